#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include "radcorrect/corpus.hpp"
#include "radcorrect/errorgen.hpp"
#include "radcorrect/nn.hpp"
#include "radcorrect/optim.hpp"
#include "radcorrect/tensor.hpp"
#include "radcorrect/world.hpp"

namespace radcorrect {

// How the pseudo-image is fused with the report tokens before the attention
// stack sees them.
enum class ConditioningStrategy : std::uint8_t {
  kPatch = 0,        // all projected patch vectors are prepended to the tokens
  kPool = 1,         // a single projected pooled vector is prepended
  kConcatenate = 2,  // the pooled vector is concatenated onto every token embedding
};

const char* strategy_name(ConditioningStrategy s);
ConditioningStrategy strategy_from_name(const std::string& name);

struct DetectorConfig {
  ConditioningStrategy strategy = ConditioningStrategy::kPatch;
  int d_model = 64;
  int n_heads = 4;
  int n_layers = 2;
  int ffn_hidden = 128;
  int max_seq_tokens = 200;  // token segment is truncated to this length
  int pad_to = 0;            // when positive, right-pad the token segment with [PAD]
  double tau = 0.7;          // flag a token when p_error >= 1 - tau
  FocalLossConfig focal{};
  OptimizerConfig optim{};
  int batch_size = 64;
  int phase1_epochs = 5;  // erroneous pairs only
  int phase2_epochs = 2;  // erroneous pairs plus clean pairs with all-zero labels

  void validate() const;  // throws ConfigError on out-of-range values
};

// The fused input sequence for one (image, report) pair.
struct ConditioningSequence {
  Tensor seq;                // (length, width); width is 2*d_model under kConcatenate
  std::size_t token_offset;  // row index of the first report token
  std::size_t n_tokens;      // real (non-pad) token count after truncation
};

// Per-token error classifier conditioned on a pseudo-image. The token
// embeddings, attention stack, and classifier head are trainable; the patch
// and pooled image projections are frozen features.
class DetectorModel {
 public:
  DetectorModel(const World& world, const DetectorConfig& cfg, std::uint64_t init_seed);

  const DetectorConfig& config() const { return cfg_; }
  std::uint64_t world_fingerprint() const { return world_fingerprint_; }
  std::size_t vocab_size() const { return vocab_size_; }
  std::size_t patch_count() const { return patch_count_; }
  std::size_t patch_dim() const { return patch_dim_; }
  // Width of the attention stack: d_model, or 2*d_model under kConcatenate.
  std::size_t model_width() const;

  ParamSet& trainable() { return trainable_; }
  const ParamSet& trainable() const { return trainable_; }
  ParamSet& frozen() { return frozen_; }
  const ParamSet& frozen() const { return frozen_; }

  ConditioningSequence build_sequence(const PseudoImage& image,
                                      const std::vector<TokenId>& tokens) const;

  // Per-token error probabilities, shape (n_tokens, 1), each strictly in (0, 1).
  // Only real token positions are classified; image rows and padding are not.
  Tensor forward(const PseudoImage& image, const std::vector<TokenId>& tokens) const;
  // As forward, also recording post-softmax attention weights, one capture per
  // attention layer.
  Tensor forward(const PseudoImage& image, const std::vector<TokenId>& tokens,
                 std::vector<AttentionCapture>& captures) const;

 private:
  DetectorConfig cfg_;
  std::uint64_t world_fingerprint_ = 0;
  std::size_t vocab_size_ = 0;
  std::size_t patch_count_ = 0;
  std::size_t patch_dim_ = 0;
  Tensor tok_emb_;
  Tensor patch_proj_;  // frozen (patch_dim, d_model)
  Tensor pool_proj_;   // frozen (patch_dim, d_model)
  std::vector<TransformerLayer> layers_;
  LayerNormParams ln_final_;
  Tensor head_w_, head_b_;
  ParamSet trainable_;
  ParamSet frozen_;
};

// Flatten a (n, 1) probability tensor into a plain vector.
std::vector<double> probabilities(const Tensor& p);

// flagged[i] = 1 iff p_error[i] >= 1 - tau. tau outside [0, 1] is a ConfigError.
std::vector<std::uint8_t> flag_tokens(const std::vector<double>& p_error, double tau);

// A labelled (image, tokens) pair. labels == nullptr means all-clean.
struct DetectorExample {
  const PseudoImage* image = nullptr;
  const std::vector<TokenId>* tokens = nullptr;
  const std::vector<std::uint8_t>* labels = nullptr;
};

// Erroneous reports paired with their source images, restricted to sources in
// `split`. Unknown source ids are a DataError.
std::vector<DetectorExample> erroneous_examples(const std::vector<CorpusRecord>& corpus,
                                                const std::vector<ErroneousReport>& errors,
                                                Split split);
// Clean reports from `split` with implicit all-zero labels.
std::vector<DetectorExample> clean_examples(const std::vector<CorpusRecord>& corpus, Split split);

struct DetectorTrainingLog {
  std::vector<double> phase1_loss;  // mean per-token focal loss per epoch
  std::vector<double> phase2_loss;
  std::vector<double> val_f1;  // error-class F1 on validation after each epoch
  double wall_seconds = 0.0;
};

struct TrainedDetector {
  DetectorModel model;
  DetectorTrainingLog log;
};

// Two-phase training: phase 1 on erroneous pairs, phase 2 additionally on
// clean pairs with all-zero labels. Per-epoch loss and validation F1 go to
// `log_stream` when given. Divergence raises TrainingFault.
TrainedDetector train_detector(const World& world, const std::vector<CorpusRecord>& corpus,
                               const std::vector<ErroneousReport>& errors,
                               const DetectorConfig& cfg, std::uint64_t seed,
                               std::ostream* log_stream = nullptr);

struct ClassMetrics {
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
  std::size_t support = 0;
};

struct DetectionReport {
  ClassMetrics error_class;  // positive = token belongs to an injected span
  ClassMetrics clean_class;  // positive = token untouched
  double macro_precision = 0.0;
  double macro_recall = 0.0;
  double macro_f1 = 0.0;
  double weighted_precision = 0.0;
  double weighted_recall = 0.0;
  double weighted_f1 = 0.0;
  double accuracy = 0.0;
  std::size_t n_tokens = 0;
};

// Error probabilities for every example, computed once (no gradients needed).
std::vector<std::vector<double>> predict_probabilities(const DetectorModel& model,
                                                       const std::vector<DetectorExample>& examples);

DetectionReport report_from_probabilities(const std::vector<DetectorExample>& examples,
                                          const std::vector<std::vector<double>>& probs,
                                          double tau);
DetectionReport evaluate_detection(const DetectorModel& model,
                                   const std::vector<DetectorExample>& examples, double tau);

struct SweepRow {
  double tau = 0.0;
  double precision_error = 0.0;
  double recall_error = 0.0;
  double f1_error = 0.0;
  double precision_clean = 0.0;
  double recall_clean = 0.0;
  double f1_clean = 0.0;
  double accuracy = 0.0;
};

// One row per threshold; thresholds must be sorted ascending (ConfigError
// otherwise). Probabilities are computed once and shared across thresholds,
// so recall_error is non-decreasing in tau by construction.
std::vector<SweepRow> sweep_threshold(const DetectorModel& model,
                                      const std::vector<DetectorExample>& examples,
                                      const std::vector<double>& taus);
std::string sweep_csv(const std::vector<SweepRow>& rows);

void save_detector(const std::string& path, const DetectorModel& model);
DetectorModel load_detector(const std::string& path, const World& world);

}  // namespace radcorrect
