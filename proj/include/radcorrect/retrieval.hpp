#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include "radcorrect/corpus.hpp"
#include "radcorrect/corrector.hpp"
#include "radcorrect/detector.hpp"
#include "radcorrect/metrics.hpp"
#include "radcorrect/nn.hpp"
#include "radcorrect/optim.hpp"
#include "radcorrect/tensor.hpp"
#include "radcorrect/world.hpp"

namespace radcorrect {

// The pooled towers tolerate (and need) a faster rate than the transformer
// stacks; 3e-3 over 10 epochs reaches the targeted self-retrieval quality.
inline OptimizerConfig retrieval_default_optim() {
  OptimizerConfig o;
  o.base_lr = 3e-3;
  return o;
}

struct RetrievalConfig {
  int d_emb = 64;    // shared embedding width
  int hidden = 128;  // projection and MLP hidden width in both encoders
  OptimizerConfig optim = retrieval_default_optim();
  int batch_size = 64;
  int epochs = 10;
  double temperature_init = 0.07;  // initial softmax temperature, learned in log space

  void validate() const;  // batch_size < 2 is a ConfigError: contrastive needs negatives
};

// Image and report encoders into one shared embedding space. The image side is
// patch projection -> mean pool -> two-layer MLP; the report side is token
// embedding -> mean pool -> two-layer MLP. Both outputs are unit-normalized,
// so inner products are cosine similarities.
class EncoderPair {
 public:
  EncoderPair(const World& world, const RetrievalConfig& cfg, std::uint64_t init_seed);

  const RetrievalConfig& config() const { return cfg_; }
  std::uint64_t world_fingerprint() const { return world_fingerprint_; }
  std::size_t vocab_size() const { return vocab_size_; }

  ParamSet& params() { return params_; }
  const ParamSet& params() const { return params_; }

  // One unit-norm row per input, differentiable.
  Tensor encode_images(const std::vector<const PseudoImage*>& images) const;
  Tensor encode_reports(const std::vector<const std::vector<TokenId>*>& reports) const;

  // Convenience single-input forms returning plain unit-norm vectors.
  std::vector<double> embed_image(const PseudoImage& image) const;
  std::vector<double> embed_report(const std::vector<TokenId>& tokens) const;

  // exp(log inverse temperature) as a (1,1) graph node.
  Tensor logit_scale() const;

 private:
  RetrievalConfig cfg_;
  std::uint64_t world_fingerprint_ = 0;
  std::size_t vocab_size_ = 0;
  std::size_t patch_count_ = 0;
  std::size_t patch_dim_ = 0;
  std::size_t proj_width_ = 0;
  Tensor patch_proj_;         // (patch_dim, hidden)
  Tensor img_b0_;             // projection bias, applied before the pool
  LayerNormParams img_ln_;    // normalizes the pooled features
  Tensor img_w1_, img_b1_, img_w2_, img_b2_;
  Tensor tok_emb_;            // (vocab, hidden)
  LayerNormParams rep_ln_;
  Tensor rep_w1_, rep_b1_, rep_w2_, rep_b2_;
  Tensor log_inv_temp_;       // (1,1), init ln(1/temperature_init)
  ParamSet params_;
};

// Symmetric in-batch softmax contrastive loss over cosine similarities:
// the mean of image->report and report->image cross entropies against the
// diagonal. Rows of `images`/`reports` must align; batch < 2 is a ConfigError.
Tensor contrastive_loss(const EncoderPair& encoder,
                        const std::vector<const PseudoImage*>& images,
                        const std::vector<const std::vector<TokenId>*>& reports);

struct RetrievalTrainingLog {
  std::vector<double> epoch_loss;
  double wall_seconds = 0.0;
};

struct TrainedRetrieval {
  EncoderPair encoder;
  RetrievalTrainingLog log;
};

// Trains on the (image, ground-truth report) pairs of the train split with
// AdamW and a cosine schedule. A trailing batch of size 1 is dropped.
TrainedRetrieval train_contrastive(const World& world, const std::vector<CorpusRecord>& corpus,
                                   const RetrievalConfig& cfg, std::uint64_t seed,
                                   std::ostream* log_stream = nullptr);

void save_retrieval(const std::string& path, const EncoderPair& encoder);
EncoderPair load_retrieval(const std::string& path, const World& world);

struct ScoredId {
  std::uint64_t id = 0;
  double score = 0.0;
};

// Exact flat inner-product index over unit-norm report embeddings.
class EmbeddingIndex {
 public:
  static EmbeddingIndex build(const EncoderPair& encoder,
                              const std::vector<CorpusRecord>& records);

  std::size_t size() const { return ids_.size(); }
  std::size_t dim() const { return dim_; }
  std::uint64_t world_fingerprint() const { return world_fingerprint_; }
  const std::vector<std::uint64_t>& ids() const { return ids_; }
  const std::vector<double>& matrix() const { return matrix_; }  // row-major size() x dim()

  // Exact top-k by inner product, scores descending, ties broken by lower
  // report id. k == 0 yields an empty result; k > size() is a ConfigError.
  std::vector<ScoredId> search(const std::vector<double>& query, std::size_t k) const;

  void save(const std::string& path) const;
  static EmbeddingIndex load(const std::string& path, const World& world);

 private:
  std::size_t dim_ = 0;
  std::uint64_t world_fingerprint_ = 0;
  std::vector<std::uint64_t> ids_;
  std::vector<double> matrix_;
};

// Embeds the image and searches the index.
std::vector<ScoredId> search_image(const EmbeddingIndex& index, const EncoderPair& encoder,
                                   const PseudoImage& image, std::size_t k);

// Fraction of records whose own report is the top-1 hit for their image.
double self_retrieval_accuracy(const EncoderPair& encoder,
                               const std::vector<CorpusRecord>& records);

struct GuardrailQuery {
  std::uint64_t query_id = 0;
  std::uint64_t retrieved_id = 0;
  std::vector<TokenId> retrieved;
  std::vector<TokenId> corrected;
  std::size_t flagged_tokens = 0;
};

struct GuardrailRow {
  std::string system;
  NlgScores nlg;       // means over queries
  CeScores ce;         // micro-averaged over (query, class)
};

struct GuardrailResult {
  GuardrailRow uncorrected;  // retrieved reports as-is
  GuardrailRow corrected;    // retrieved reports after detect-and-correct
  std::vector<GuardrailQuery> queries;
};

// For every query record: retrieve the top-1 report from the index, then score
// it against the query's ground truth both before and after running the
// detector (at the given tau) and corrector over it. All four artifacts must
// share the query world's fingerprint.
GuardrailResult retrieve_and_correct(const EmbeddingIndex& index, const EncoderPair& encoder,
                                     const DetectorModel& detector,
                                     const CorrectorModel& corrector, const World& world,
                                     const std::vector<CorpusRecord>& knowledge,
                                     const std::vector<CorpusRecord>& query_records, double tau,
                                     const DecodeConfig& decode);

std::string guardrail_csv(const GuardrailResult& result);

}  // namespace radcorrect
