#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "radcorrect/errors.hpp"
#include "radcorrect/rng.hpp"
#include "radcorrect/vocab.hpp"

namespace radcorrect {

enum class Side : std::uint8_t { kLeft = 0, kRight = 1, kBilateral = 2 };
enum class Vertical : std::uint8_t { kUpper = 0, kLower = 1, kBase = 2, kApex = 3 };
enum class Severity : std::uint8_t { kNone = 0, kMild = 1, kModerate = 2, kSevere = 3 };
enum class Comparison : std::uint8_t { kAbsent = 0, kImproved = 1, kWorsened = 2, kUnchanged = 3 };
enum class Orientation : std::uint8_t { kFrontal = 0, kLateral = 1 };

struct Location {
  Side side = Side::kLeft;
  Vertical vertical = Vertical::kBase;
  bool operator==(const Location&) const = default;
};

struct Finding {
  int condition = 0;
  Location location;
  Severity severity = Severity::kMild;
  Comparison comparison = Comparison::kAbsent;
  bool positive() const { return severity != Severity::kNone; }
  bool operator==(const Finding&) const = default;
};

// Ground-truth clinical state. Both the report and the pseudo-image are pure
// functions of it, which is what makes every downstream claim checkable.
struct LatentState {
  std::uint64_t state_id = 0;
  Orientation orientation = Orientation::kFrontal;
  std::vector<Finding> findings;  // at most one per condition class
};

// Sentence span [begin, end) over the token sequence. finding_index >= 0 maps
// the sentence to a finding; -1 marks boilerplate (normal statements,
// orientation line, impression).
struct SentenceSpan {
  std::size_t begin = 0;
  std::size_t end = 0;
  int finding_index = -1;
};

struct ReportText {
  std::uint64_t report_id = 0;
  std::vector<TokenId> tokens;
  std::vector<SentenceSpan> sentence_map;
};

// G x G grid of d_img-dimensional patch vectors plus their mean.
struct PseudoImage {
  int grid = 0;
  int dim = 0;
  std::vector<double> patches;  // grid*grid rows, dim columns, row-major
  std::vector<double> pooled;   // dim entries, arithmetic mean of patches

  const double* patch(int cell) const { return patches.data() + static_cast<std::size_t>(cell) * dim; }
  int patch_count() const { return grid * grid; }
};

// Word tables used by the renderer. A cleared entry is a grammar gap and makes
// render_report throw, naming the slot.
struct Grammar {
  std::array<std::string, 4> severity_words{"", "mild", "moderate", "severe"};  // [Severity]
  std::array<std::string, 3> side_words{"left", "right", "bilateral"};
  std::array<std::string, 4> vertical_words{"upper", "lower", "base", "apex"};
  std::array<std::string, 4> comparison_words{"", "improved", "worsened", "unchanged"};  // [Comparison]
  std::array<std::string, 2> orientation_words{"frontal", "lateral"};
  bool orientation_line = true;
};

struct WorldConfig {
  int num_classes = 12;              // K
  int max_findings = 4;              // F_max, caps positives and negative mentions together
  double prevalence = 0.3;           // per-class positive probability
  double negative_mention_prob = 0.15;
  double comparison_prob = 0.45;     // P(comparison != absent) for a positive finding
  int grid = 4;                      // G, must be even
  int image_dim = 32;                // d_img
  double sigma = 0.1;                // patch noise stddev
  int max_tokens = 200;
  std::uint64_t code_seed = 12345;   // seeds the per-world linear code tables
  std::vector<std::string> class_names;  // defaults applied when empty

  void validate() const;  // throws ConfigError
};

enum class Split : std::uint8_t { kTrain = 0, kVal = 1, kTest = 2 };

const char* split_name(Split s);
const char* severity_name(Severity s);
const char* comparison_name(Comparison c);
const char* side_name(Side s);
const char* vertical_name(Vertical v);
const char* orientation_name(Orientation o);

// The synthetic paired world: sampling, grammar rendering, image rendering and
// rule-based label extraction, all deterministic given explicit seeds.
class World {
 public:
  explicit World(WorldConfig cfg);

  const WorldConfig& config() const { return config_; }
  const Vocabulary& vocab() const { return vocab_; }
  const Grammar& grammar() const { return grammar_; }
  const std::vector<std::string>& class_names() const { return class_names_; }

  // Hash of WorldConfig + vocabulary; chained artifacts must agree on it.
  std::uint64_t fingerprint() const { return fingerprint_; }

  LatentState sample_state(std::uint64_t seed) const;

  ReportText render_report(const LatentState& state) const { return render_report(state, grammar_); }
  ReportText render_report(const LatentState& state, const Grammar& grammar) const;

  PseudoImage render_image(const LatentState& state, std::uint64_t seed) const {
    return render_image(state, seed, config_.sigma);
  }
  PseudoImage render_image(const LatentState& state, std::uint64_t seed, double sigma) const;

  // Per-class binary labels from report text: a class is positive iff some
  // sentence names it without a preceding negation in that sentence.
  std::vector<std::uint8_t> extract_labels(const std::vector<TokenId>& tokens) const;
  std::vector<std::uint8_t> state_labels(const LatentState& state) const;

  // Deterministic 80/10/10 split by hash rank of report_id.
  static std::vector<Split> assign_splits(const std::vector<std::uint64_t>& report_ids);

  // Code-table accessors for the spatial-code algebra checks.
  std::vector<double> finding_code(const Finding& f) const;
  std::vector<int> cells_for(const Location& loc) const;
  std::vector<double> base_patch(Orientation o) const;

  TokenId severity_token(Severity s) const;
  TokenId side_token(Side s) const;
  TokenId vertical_token(Vertical v) const;
  TokenId comparison_token(Comparison c) const;
  TokenId class_token(int condition) const;
  TokenId period_token() const { return period_; }
  TokenId negation_token() const { return negation_; }

  // Sentence builders, shared with the error injector. variant_key picks the
  // template deterministically.
  std::vector<TokenId> positive_sentence(const Finding& f, std::uint64_t variant_key) const {
    return positive_sentence(f, variant_key, grammar_);
  }
  std::vector<TokenId> positive_sentence(const Finding& f, std::uint64_t variant_key, const Grammar& g) const;
  std::vector<TokenId> negative_sentence(int condition, std::uint64_t variant_key) const {
    return negative_sentence(condition, variant_key, grammar_);
  }
  std::vector<TokenId> negative_sentence(int condition, std::uint64_t variant_key, const Grammar& g) const;
  std::vector<TokenId> comparison_clause(Comparison c) const { return comparison_clause(c, grammar_); }
  std::vector<TokenId> comparison_clause(Comparison c, const Grammar& g) const;

 private:
  WorldConfig config_;
  Grammar grammar_;
  Vocabulary vocab_;
  std::vector<std::string> class_names_;
  std::uint64_t fingerprint_ = 0;
  TokenId period_ = 0;
  TokenId negation_ = 0;
  std::vector<int> class_of_token_;  // vocab-indexed, -1 when not a class name

  // Per-world linear codes, all image_dim long.
  std::vector<double> base_codes_;        // 2 orientations
  std::vector<double> condition_codes_;   // K
  std::vector<double> severity_codes_;    // K x 3 (mild, moderate, severe)
  std::vector<double> comparison_codes_;  // K x 4
};

}  // namespace radcorrect
