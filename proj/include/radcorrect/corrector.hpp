#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include "radcorrect/corpus.hpp"
#include "radcorrect/detector.hpp"
#include "radcorrect/errorgen.hpp"
#include "radcorrect/nn.hpp"
#include "radcorrect/optim.hpp"
#include "radcorrect/tensor.hpp"
#include "radcorrect/world.hpp"

namespace radcorrect {

// A maximal run of flagged tokens collapsed into a single [ERROR] marker.
struct MaskedSpan {
  std::size_t position = 0;         // index of the [ERROR] token in the masked stream
  std::size_t source_position = 0;  // index where the run began in the input stream
  std::vector<TokenId> original;    // the tokens the run replaced (possibly empty)

  bool operator==(const MaskedSpan&) const = default;
};

struct MaskedReport {
  std::uint64_t report_id = 0;
  std::vector<TokenId> tokens;  // input stream with each flagged run replaced by [ERROR]
  std::vector<MaskedSpan> span_table;

  bool operator==(const MaskedReport&) const = default;
};

// Collapse maximal runs of set flags into [ERROR] markers. flags must have one
// entry per token (DataError otherwise). span.original holds the tokens the
// run struck out of THIS stream (inference provenance).
MaskedReport mask_flagged(std::uint64_t report_id, const std::vector<TokenId>& tokens,
                          const std::vector<std::uint8_t>& flags);
// Teacher mask from exact injected-span bookkeeping. Markers land where the
// flag mask would put them, but span.original holds the ground-truth tokens
// the injection replaced — the corrector's training targets. Adjacent spans
// merge with their truths concatenated.
MaskedReport mask_errors(const ErroneousReport& err);

struct CorrectorConfig {
  int d_model = 64;
  int n_heads = 4;
  int n_layers = 2;
  int ffn_hidden = 128;
  int max_seq_tokens = 200;  // masked-stream length cap
  int max_span_len = 8;      // replacement length cap, excluding [END_SPAN]
  int max_runs = 32;         // most [ERROR] markers a single report may carry
  OptimizerConfig optim{};
  int batch_size = 64;
  int epochs = 60;

  void validate() const;  // throws ConfigError on out-of-range values
};

// Teacher-forced training sequence for one masked report. The model reads
// [BOS] + stream and must predict stream token by token; the loss only looks
// at replacement tokens and their [END_SPAN] terminators.
struct TrainingStream {
  std::vector<TokenId> stream;          // masked text with spans expanded in place
  std::vector<std::uint8_t> loss_mask;  // 1 where stream[i] is replacement or [END_SPAN]
};

TrainingStream build_training_stream(const MaskedReport& masked, int max_span_len);

// Causal span-infilling model over [patches] + [BOS] + token stream. The patch
// projection trains jointly with the text stack.
class CorrectorModel {
 public:
  CorrectorModel(const World& world, const CorrectorConfig& cfg, std::uint64_t init_seed);

  const CorrectorConfig& config() const { return cfg_; }
  std::uint64_t world_fingerprint() const { return world_fingerprint_; }
  std::size_t vocab_size() const { return vocab_size_; }
  std::size_t patch_count() const { return patch_count_; }
  std::size_t patch_dim() const { return patch_dim_; }
  std::size_t position_capacity() const;

  ParamSet& params() { return params_; }
  const ParamSet& params() const { return params_; }

  // Next-token logits, shape (len(stream) + 1, vocab). Row i is the
  // distribution after consuming [BOS] + stream[0..i-1]; the final row is the
  // distribution for the token that would follow the whole stream.
  Tensor forward_logits(const PseudoImage& image, const std::vector<TokenId>& stream) const;

  const Tensor& tok_emb() const { return tok_emb_; }
  const Tensor& pos_emb() const { return pos_emb_; }
  const Tensor& patch_proj() const { return patch_proj_; }
  const std::vector<TransformerLayer>& layers() const { return layers_; }
  const LayerNormParams& ln_final() const { return ln_final_; }
  const Tensor& head_w() const { return head_w_; }
  const Tensor& head_b() const { return head_b_; }

 private:
  CorrectorConfig cfg_;
  std::uint64_t world_fingerprint_ = 0;
  std::size_t vocab_size_ = 0;
  std::size_t patch_count_ = 0;
  std::size_t patch_dim_ = 0;
  Tensor tok_emb_;
  Tensor pos_emb_;
  Tensor patch_proj_;
  std::vector<TransformerLayer> layers_;
  LayerNormParams ln_final_;
  Tensor head_w_, head_b_;
  ParamSet params_;
};

// Incremental decoding state: per-layer key/value caches plus the logits row
// for the next token. Copyable, so beam hypotheses can fork cheaply.
struct InferenceState {
  std::size_t rows = 0;  // rows consumed so far, patches and [BOS] included
  std::vector<std::vector<double>> keys;    // one row-major (rows, width) buffer per layer
  std::vector<std::vector<double>> values;  // ditto
  std::vector<double> next_logits;          // vocab-sized
};

// Weight-frozen fast forward path for decoding. Produces exactly the same
// logits as CorrectorModel::forward_logits (verified to 1e-9 in tests) at a
// fraction of the cost, because cached rows are never recomputed.
class CorrectorInference {
 public:
  explicit CorrectorInference(const CorrectorModel& model);
  // Consume [patches] + [BOS] + context. next_logits afterwards scores the
  // token following the context.
  InferenceState prefill(const PseudoImage& image, const std::vector<TokenId>& context) const;
  void append(InferenceState& state, TokenId token) const;

 private:
  const CorrectorModel* model_;
};

enum class DecodeMode : std::uint8_t { kBeam = 0, kNucleus = 1 };

const char* decode_mode_name(DecodeMode m);
DecodeMode decode_mode_from_name(const std::string& name);

struct DecodeConfig {
  DecodeMode mode = DecodeMode::kBeam;
  int beam_width = 5;
  double top_p = 0.92;
  int max_span_len = 8;
  std::uint64_t seed = 0;

  void validate() const;
};

// Replacement decoded for one [ERROR] span.
struct SpanCorrection {
  std::size_t position = 0;          // [ERROR] index in the masked stream
  std::size_t source_position = 0;   // where the original run began in the input
  std::vector<TokenId> original;     // run that was masked away
  std::vector<TokenId> replacement;  // decoded tokens; empty means delete
  std::vector<double> p_error;       // detector probabilities over the original run
};

struct Correction {
  std::uint64_t report_id = 0;
  std::vector<TokenId> corrected;  // masked stream with every [ERROR] substituted
  std::vector<SpanCorrection> spans;
};

// Keep only the smallest probability prefix reaching top_p (descending order,
// ties broken toward lower indices) and renormalize it; everything else
// becomes zero. probs must be a distribution, top_p in (0, 1].
std::vector<double> nucleus_filter(const std::vector<double>& probs, double top_p);

// Decode every span left to right; each span sees earlier spans already
// expanded the same way training streams were. Beam search is exact over its
// width with per-token scores normalized by replacement length (terminator
// included); nucleus sampling draws from the renormalized top_p prefix.
Correction decode_spans(const CorrectorModel& model, const PseudoImage& image,
                        const MaskedReport& masked, const DecodeConfig& dc);

// Substitute replacements into the masked stream.
std::vector<TokenId> apply_corrections(const MaskedReport& masked,
                                       const std::vector<SpanCorrection>& spans);

// Detect, mask, decode: the full autocorrection path for one report. The first
// form thresholds at the detector's configured tau; the second overrides it.
Correction correct(const DetectorModel& detector, const CorrectorModel& corrector,
                   const PseudoImage& image, std::uint64_t report_id,
                   const std::vector<TokenId>& tokens, const DecodeConfig& dc);
Correction correct(const DetectorModel& detector, const CorrectorModel& corrector,
                   const PseudoImage& image, std::uint64_t report_id,
                   const std::vector<TokenId>& tokens, const DecodeConfig& dc, double tau);

struct CorrectorTrainingLog {
  std::vector<double> epoch_loss;  // batch-normalized masked cross entropy
  double wall_seconds = 0.0;
};

struct TrainedCorrector {
  CorrectorModel model;
  CorrectorTrainingLog log;
};

// Teacher-masked training over the train split. Every epoch's mean masked
// cross entropy goes to log_stream when given. Divergence raises TrainingFault.
TrainedCorrector train_corrector(const World& world, const std::vector<CorpusRecord>& corpus,
                                 const std::vector<ErroneousReport>& errors,
                                 const CorrectorConfig& cfg, std::uint64_t seed,
                                 std::ostream* log_stream = nullptr);

void save_corrector(const std::string& path, const CorrectorModel& model);
CorrectorModel load_corrector(const std::string& path, const World& world);

}  // namespace radcorrect
