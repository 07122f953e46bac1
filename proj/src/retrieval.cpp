#include "radcorrect/retrieval.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <ostream>
#include <unordered_map>
#include <unordered_set>

#include "json.hpp"

#include "radcorrect/checkpoint.hpp"
#include "radcorrect/errors.hpp"
#include "radcorrect/rng.hpp"

namespace radcorrect {

namespace {

Tensor xavier_init(std::vector<std::size_t> shape, Rng& rng, bool requires_grad) {
  const double fan_in = static_cast<double>(shape[0]);
  const double fan_out = static_cast<double>(shape.back());
  const double stddev = std::sqrt(2.0 / (fan_in + fan_out));
  return Tensor::randn(std::move(shape), rng, stddev, requires_grad);
}

std::string retrieval_config_to_json(const RetrievalConfig& cfg) {
  nlohmann::json j;
  j["d_emb"] = cfg.d_emb;
  j["hidden"] = cfg.hidden;
  j["optim"] = {{"base_lr", cfg.optim.base_lr},
                {"beta1", cfg.optim.beta1},
                {"beta2", cfg.optim.beta2},
                {"eps", cfg.optim.eps},
                {"weight_decay", cfg.optim.weight_decay}};
  j["batch_size"] = cfg.batch_size;
  j["epochs"] = cfg.epochs;
  j["temperature_init"] = cfg.temperature_init;
  return j.dump();
}

RetrievalConfig retrieval_config_from_json(const std::string& text) {
  RetrievalConfig cfg;
  try {
    const nlohmann::json j = nlohmann::json::parse(text);
    cfg.d_emb = j.at("d_emb").get<int>();
    cfg.hidden = j.at("hidden").get<int>();
    const auto& o = j.at("optim");
    cfg.optim.base_lr = o.at("base_lr").get<double>();
    cfg.optim.beta1 = o.at("beta1").get<double>();
    cfg.optim.beta2 = o.at("beta2").get<double>();
    cfg.optim.eps = o.at("eps").get<double>();
    cfg.optim.weight_decay = o.at("weight_decay").get<double>();
    cfg.batch_size = j.at("batch_size").get<int>();
    cfg.epochs = j.at("epochs").get<int>();
    cfg.temperature_init = j.at("temperature_init").get<double>();
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("malformed retrieval config: ") + e.what());
  }
  return cfg;
}

std::string fingerprint_hex(std::uint64_t fp) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(fp));
  return buf;
}

}  // namespace

void RetrievalConfig::validate() const {
  if (d_emb <= 0) throw ConfigError("d_emb must be positive");
  if (hidden <= 0) throw ConfigError("hidden must be positive");
  if (batch_size < 2) throw ConfigError("contrastive batch_size must be at least 2");
  if (epochs < 0) throw ConfigError("epochs must be non-negative");
  if (!(temperature_init > 0.0)) throw ConfigError("temperature_init must be positive");
  optim.validate();
}

EncoderPair::EncoderPair(const World& world, const RetrievalConfig& cfg, std::uint64_t init_seed)
    : cfg_(cfg) {
  cfg_.validate();
  world_fingerprint_ = world.fingerprint();
  vocab_size_ = world.vocab().size();
  patch_count_ = static_cast<std::size_t>(world.config().grid) * world.config().grid;
  patch_dim_ = static_cast<std::size_t>(world.config().image_dim);

  Rng rng(derive_seed(init_seed, 0x2E721E7EULL));
  const std::size_t h = static_cast<std::size_t>(cfg_.hidden);
  const std::size_t e = static_cast<std::size_t>(cfg_.d_emb);
  proj_width_ = h;
  patch_proj_ = params_.add("img.patch_proj", xavier_init({patch_dim_, h}, rng, true));
  img_b0_ = params_.add("img.b0", Tensor::zeros({h}, true));
  img_ln_ = make_layer_norm(static_cast<int>(h), params_, "img.ln");
  img_w1_ = params_.add("img.w1", xavier_init({h, h}, rng, true));
  img_b1_ = params_.add("img.b1", Tensor::zeros({h}, true));
  img_w2_ = params_.add("img.w2", xavier_init({h, e}, rng, true));
  img_b2_ = params_.add("img.b2", Tensor::zeros({e}, true));
  tok_emb_ = params_.add("rep.tok_emb", Tensor::randn({vocab_size_, h}, rng, 1.0, true));
  rep_ln_ = make_layer_norm(static_cast<int>(h), params_, "rep.ln");
  rep_w1_ = params_.add("rep.w1", xavier_init({h, h}, rng, true));
  rep_b1_ = params_.add("rep.b1", Tensor::zeros({h}, true));
  rep_w2_ = params_.add("rep.w2", xavier_init({h, e}, rng, true));
  rep_b2_ = params_.add("rep.b2", Tensor::zeros({e}, true));
  log_inv_temp_ = params_.add(
      "log_inv_temp",
      Tensor::from({1, 1}, {std::log(1.0 / cfg_.temperature_init)}, true));
}

Tensor EncoderPair::encode_images(const std::vector<const PseudoImage*>& images) const {
  if (images.empty()) throw DataError("encode_images needs at least one image");
  std::vector<Tensor> pooled_rows;
  pooled_rows.reserve(images.size());
  for (const PseudoImage* img : images) {
    if (img == nullptr) throw DataError("encode_images given a null image");
    if (static_cast<std::size_t>(img->patch_count()) != patch_count_ ||
        static_cast<std::size_t>(img->dim) != patch_dim_ ||
        img->patches.size() != patch_count_ * patch_dim_) {
      throw DataError("image geometry does not match the encoder's world");
    }
    const Tensor patches = Tensor::from({patch_count_, patch_dim_}, img->patches);
    // The projection is nonlinear and carries a per-cell positional term;
    // otherwise mean pooling would erase which cell held which finding. The
    // positional rows are scaled down so cell content stays dominant.
    const Tensor proj =
        relu(add(add_row_broadcast(matmul(patches, patch_proj_), img_b0_),
                 scale(sinusoidal_positions(patch_count_, proj_width_), 0.25)));
    pooled_rows.push_back(mean_rows(proj));
  }
  Tensor x = layer_norm(concat_rows(pooled_rows), img_ln_.gamma, img_ln_.beta);
  x = relu(add_row_broadcast(matmul(x, img_w1_), img_b1_));
  x = add_row_broadcast(matmul(x, img_w2_), img_b2_);
  return l2_normalize_rows(x);
}

Tensor EncoderPair::encode_reports(const std::vector<const std::vector<TokenId>*>& reports) const {
  if (reports.empty()) throw DataError("encode_reports needs at least one report");
  std::vector<Tensor> pooled_rows;
  pooled_rows.reserve(reports.size());
  for (const std::vector<TokenId>* rep : reports) {
    if (rep == nullptr) throw DataError("encode_reports given a null report");
    if (rep->empty()) throw DataError("cannot encode an empty report");
    std::vector<std::int32_t> ids;
    ids.reserve(rep->size());
    for (TokenId t : *rep) {
      if (t < 0 || static_cast<std::size_t>(t) >= vocab_size_) {
        throw DataError("report token id outside the vocabulary");
      }
      ids.push_back(t);
    }
    pooled_rows.push_back(mean_rows(embedding(tok_emb_, ids)));
  }
  Tensor x = layer_norm(concat_rows(pooled_rows), rep_ln_.gamma, rep_ln_.beta);
  x = relu(add_row_broadcast(matmul(x, rep_w1_), rep_b1_));
  x = add_row_broadcast(matmul(x, rep_w2_), rep_b2_);
  return l2_normalize_rows(x);
}

std::vector<double> EncoderPair::embed_image(const PseudoImage& image) const {
  return encode_images({&image}).value();
}

std::vector<double> EncoderPair::embed_report(const std::vector<TokenId>& tokens) const {
  return encode_reports({&tokens}).value();
}

Tensor EncoderPair::logit_scale() const { return exp(log_inv_temp_); }

Tensor contrastive_loss(const EncoderPair& encoder,
                        const std::vector<const PseudoImage*>& images,
                        const std::vector<const std::vector<TokenId>*>& reports) {
  if (images.size() != reports.size()) {
    throw DataError("contrastive batch images and reports differ in length");
  }
  if (images.size() < 2) throw ConfigError("contrastive batch needs at least 2 pairs");
  const Tensor u = encoder.encode_images(images);
  const Tensor w = encoder.encode_reports(reports);
  const Tensor scale_node = encoder.logit_scale();
  const Tensor s_i2r = scale_by(matmul_nt(u, w), scale_node);
  const Tensor s_r2i = scale_by(matmul_nt(w, u), scale_node);
  std::vector<std::int32_t> diag(images.size());
  std::iota(diag.begin(), diag.end(), 0);
  const std::vector<std::uint8_t> all(images.size(), 1);
  return scale(add(masked_cross_entropy(s_i2r, diag, all), masked_cross_entropy(s_r2i, diag, all)),
               0.5);
}

TrainedRetrieval train_contrastive(const World& world, const std::vector<CorpusRecord>& corpus,
                                   const RetrievalConfig& cfg, std::uint64_t seed,
                                   std::ostream* log_stream) {
  cfg.validate();
  const auto start = std::chrono::steady_clock::now();
  EncoderPair encoder(world, cfg, derive_seed(seed, 0x2E72AE0ULL));

  std::vector<std::size_t> train_idx;
  for (std::size_t i = 0; i < corpus.size(); ++i) {
    if (corpus[i].split == Split::kTrain) train_idx.push_back(i);
  }
  if (train_idx.size() < 2) throw DataError("contrastive training needs at least 2 train pairs");

  RetrievalTrainingLog log;
  if (cfg.epochs == 0) {
    log.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    return TrainedRetrieval{std::move(encoder), std::move(log)};
  }

  const std::size_t bs = static_cast<std::size_t>(cfg.batch_size);
  std::size_t batches_per_epoch = 0;
  for (std::size_t b0 = 0; b0 < train_idx.size(); b0 += bs) {
    if (std::min(train_idx.size(), b0 + bs) - b0 >= 2) ++batches_per_epoch;
  }
  AdamW opt(encoder.params(), cfg.optim);
  const std::int64_t total_steps =
      static_cast<std::int64_t>(batches_per_epoch) * cfg.epochs;
  std::int64_t step = 0;
  Rng shuffle_rng(derive_seed(seed, 0x5AFF1EULL));

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    shuffle_rng.shuffle(train_idx);
    double epoch_sum = 0.0;
    std::size_t epoch_pairs = 0;
    for (std::size_t b0 = 0; b0 < train_idx.size(); b0 += bs) {
      const std::size_t b1 = std::min(train_idx.size(), b0 + bs);
      if (b1 - b0 < 2) continue;  // a single pair has no in-batch negatives
      std::vector<const PseudoImage*> images;
      std::vector<const std::vector<TokenId>*> reports;
      for (std::size_t i = b0; i < b1; ++i) {
        images.push_back(&corpus[train_idx[i]].image);
        reports.push_back(&corpus[train_idx[i]].tokens);
      }
      encoder.params().zero_grad();
      Tensor loss;
      try {
        loss = contrastive_loss(encoder, images, reports);
        loss.backward();
        opt.step(cosine_lr(step, total_steps, cfg.optim.base_lr));
      } catch (const NumericError& e) {
        throw TrainingFault(std::string("contrastive training diverged: ") + e.what());
      }
      ++step;
      epoch_sum += loss.item() * static_cast<double>(b1 - b0);
      epoch_pairs += b1 - b0;
    }
    const double mean_loss = epoch_sum / static_cast<double>(epoch_pairs);
    log.epoch_loss.push_back(mean_loss);
    if (log_stream != nullptr) {
      char line[96];
      std::snprintf(line, sizeof(line), "epoch %d/%d loss %.6f\n", epoch + 1, cfg.epochs,
                    mean_loss);
      *log_stream << line << std::flush;
    }
  }
  log.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return TrainedRetrieval{std::move(encoder), std::move(log)};
}

void save_retrieval(const std::string& path, const EncoderPair& encoder) {
  Checkpoint ckpt;
  ckpt.kind = "retrieval";
  ckpt.world_fingerprint = encoder.world_fingerprint();
  ckpt.config_json = retrieval_config_to_json(encoder.config());
  ckpt.tensors = snapshot(encoder.params());
  save_checkpoint(path, ckpt);
}

EncoderPair load_retrieval(const std::string& path, const World& world) {
  Checkpoint ckpt = load_checkpoint(path);
  if (ckpt.kind != "retrieval") {
    throw DataError("checkpoint kind '" + ckpt.kind + "' is not a retrieval encoder");
  }
  if (ckpt.world_fingerprint != world.fingerprint()) {
    throw FingerprintMismatch("retrieval checkpoint world fingerprint " +
                              fingerprint_hex(ckpt.world_fingerprint) +
                              " does not match current world " +
                              fingerprint_hex(world.fingerprint()));
  }
  const RetrievalConfig cfg = retrieval_config_from_json(ckpt.config_json);
  EncoderPair encoder(world, cfg, 0);
  restore_into(ckpt.tensors, encoder.params());
  return encoder;
}

EmbeddingIndex EmbeddingIndex::build(const EncoderPair& encoder,
                                     const std::vector<CorpusRecord>& records) {
  if (records.empty()) throw DataError("cannot build an index from an empty corpus");
  EmbeddingIndex index;
  index.dim_ = static_cast<std::size_t>(encoder.config().d_emb);
  index.world_fingerprint_ = encoder.world_fingerprint();
  std::unordered_set<std::uint64_t> seen;
  index.matrix_.reserve(records.size() * index.dim_);
  for (const auto& rec : records) {
    if (!seen.insert(rec.state.state_id).second) {
      throw DataError("duplicate report id in index input");
    }
    index.ids_.push_back(rec.state.state_id);
    const std::vector<double> row = encoder.embed_report(rec.tokens);
    index.matrix_.insert(index.matrix_.end(), row.begin(), row.end());
  }
  return index;
}

std::vector<ScoredId> EmbeddingIndex::search(const std::vector<double>& query,
                                             std::size_t k) const {
  if (query.size() != dim_) throw DataError("query embedding width does not match the index");
  if (k > size()) throw ConfigError("k exceeds the index size");
  if (k == 0) return {};
  std::vector<ScoredId> scored(size());
  for (std::size_t r = 0; r < size(); ++r) {
    double dot = 0.0;
    for (std::size_t c = 0; c < dim_; ++c) dot += matrix_[r * dim_ + c] * query[c];
    scored[r] = ScoredId{ids_[r], dot};
  }
  std::stable_sort(scored.begin(), scored.end(), [](const ScoredId& a, const ScoredId& b) {
    if (a.score != b.score) return a.score > b.score;
    return a.id < b.id;
  });
  scored.resize(k);
  return scored;
}

namespace {
constexpr char kIndexMagic[8] = {'R', 'C', 'I', 'D', 'X', '0', '0', '1'};
}

void EmbeddingIndex::save(const std::string& path) const {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot open index file for writing: " + path);
  out.write(kIndexMagic, sizeof(kIndexMagic));
  const std::uint64_t fp = world_fingerprint_;
  const std::uint64_t rows = size();
  const std::uint64_t cols = dim_;
  out.write(reinterpret_cast<const char*>(&fp), sizeof(fp));
  out.write(reinterpret_cast<const char*>(&rows), sizeof(rows));
  out.write(reinterpret_cast<const char*>(&cols), sizeof(cols));
  for (std::uint64_t id : ids_) {
    const std::uint64_t v = id;
    out.write(reinterpret_cast<const char*>(&v), sizeof(v));
  }
  out.write(reinterpret_cast<const char*>(matrix_.data()),
            static_cast<std::streamsize>(matrix_.size() * sizeof(double)));
  if (!out) throw DataError("failed writing index file: " + path);
}

EmbeddingIndex EmbeddingIndex::load(const std::string& path, const World& world) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open index file: " + path);
  char magic[8];
  in.read(magic, sizeof(magic));
  if (!in || !std::equal(magic, magic + 8, kIndexMagic)) {
    throw DataError("not a recognizable index file: " + path);
  }
  std::uint64_t fp = 0, rows = 0, cols = 0;
  in.read(reinterpret_cast<char*>(&fp), sizeof(fp));
  in.read(reinterpret_cast<char*>(&rows), sizeof(rows));
  in.read(reinterpret_cast<char*>(&cols), sizeof(cols));
  if (!in || rows == 0 || cols == 0) throw DataError("truncated index header: " + path);
  if (fp != world.fingerprint()) {
    throw FingerprintMismatch("index world fingerprint " + fingerprint_hex(fp) +
                              " does not match current world " +
                              fingerprint_hex(world.fingerprint()));
  }
  EmbeddingIndex index;
  index.dim_ = static_cast<std::size_t>(cols);
  index.world_fingerprint_ = fp;
  index.ids_.resize(rows);
  for (std::uint64_t r = 0; r < rows; ++r) {
    std::uint64_t v = 0;
    in.read(reinterpret_cast<char*>(&v), sizeof(v));
    index.ids_[r] = static_cast<std::uint64_t>(v);
  }
  index.matrix_.resize(rows * cols);
  in.read(reinterpret_cast<char*>(index.matrix_.data()),
          static_cast<std::streamsize>(index.matrix_.size() * sizeof(double)));
  if (!in) throw DataError("truncated index payload: " + path);
  for (std::uint64_t r = 0; r < rows; ++r) {
    double norm2 = 0.0;
    for (std::uint64_t c = 0; c < cols; ++c) {
      const double v = index.matrix_[r * cols + c];
      norm2 += v * v;
    }
    if (std::abs(std::sqrt(norm2) - 1.0) > 1e-9) {
      throw DataError("index row is not unit-norm; file is corrupt");
    }
  }
  return index;
}

std::vector<ScoredId> search_image(const EmbeddingIndex& index, const EncoderPair& encoder,
                                   const PseudoImage& image, std::size_t k) {
  if (index.world_fingerprint() != encoder.world_fingerprint()) {
    throw FingerprintMismatch("index and encoder were built against different worlds");
  }
  return index.search(encoder.embed_image(image), k);
}

double self_retrieval_accuracy(const EncoderPair& encoder,
                               const std::vector<CorpusRecord>& records) {
  if (records.empty()) throw DataError("self-retrieval needs a non-empty corpus");
  const EmbeddingIndex index = EmbeddingIndex::build(encoder, records);
  std::size_t hits = 0;
  for (const auto& rec : records) {
    const auto top = search_image(index, encoder, rec.image, 1);
    if (!top.empty() && top[0].id == rec.state.state_id) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(records.size());
}

GuardrailResult retrieve_and_correct(const EmbeddingIndex& index, const EncoderPair& encoder,
                                     const DetectorModel& detector,
                                     const CorrectorModel& corrector, const World& world,
                                     const std::vector<CorpusRecord>& knowledge,
                                     const std::vector<CorpusRecord>& query_records, double tau,
                                     const DecodeConfig& decode) {
  if (tau < 0.0 || tau > 1.0) throw ConfigError("tau must lie in [0, 1]");
  decode.validate();
  const std::uint64_t fp = world.fingerprint();
  if (index.world_fingerprint() != fp || encoder.world_fingerprint() != fp ||
      detector.world_fingerprint() != fp || corrector.world_fingerprint() != fp) {
    throw FingerprintMismatch("guardrail artifacts disagree on the world fingerprint");
  }
  if (query_records.empty()) throw DataError("guardrail evaluation needs at least one query");

  std::unordered_map<std::uint64_t, const CorpusRecord*> by_id;
  for (const auto& rec : knowledge) by_id[rec.state.state_id] = &rec;

  GuardrailResult result;
  result.uncorrected.system = "retrieved";
  result.corrected.system = "retrieved+autocorrect";

  NlgScores nlg_sum_unc{}, nlg_sum_cor{};
  std::vector<std::vector<std::uint8_t>> labels_truth, labels_unc, labels_cor;

  for (const auto& query : query_records) {
    const auto top = search_image(index, encoder, query.image, 1);
    const auto it = by_id.find(top[0].id);
    if (it == by_id.end()) {
      throw DataError("retrieved report id is missing from the knowledge corpus");
    }
    const std::vector<TokenId>& retrieved = it->second->tokens;

    const Correction corr =
        correct(detector, corrector, query.image, top[0].id, retrieved, decode, tau);

    GuardrailQuery detail;
    detail.query_id = query.state.state_id;
    detail.retrieved_id = top[0].id;
    detail.retrieved = retrieved;
    detail.corrected = corr.corrected;
    for (const auto& span : corr.spans) detail.flagged_tokens += span.original.size();

    const NlgScores unc = nlg_scores(retrieved, query.tokens, world.vocab());
    const NlgScores cor = nlg_scores(corr.corrected, query.tokens, world.vocab());
    for (int n = 0; n < 4; ++n) {
      nlg_sum_unc.bleu[static_cast<std::size_t>(n)] += unc.bleu[static_cast<std::size_t>(n)];
      nlg_sum_cor.bleu[static_cast<std::size_t>(n)] += cor.bleu[static_cast<std::size_t>(n)];
    }
    nlg_sum_unc.rouge_l_f1 += unc.rouge_l_f1;
    nlg_sum_cor.rouge_l_f1 += cor.rouge_l_f1;
    nlg_sum_unc.meteor += unc.meteor;
    nlg_sum_cor.meteor += cor.meteor;
    labels_truth.push_back(world.state_labels(query.state));
    labels_unc.push_back(world.extract_labels(retrieved));
    labels_cor.push_back(world.extract_labels(corr.corrected));

    result.queries.push_back(std::move(detail));
  }

  const double denom = static_cast<double>(query_records.size());
  for (std::size_t n = 0; n < 4; ++n) {
    result.uncorrected.nlg.bleu[n] = nlg_sum_unc.bleu[n] / denom;
    result.corrected.nlg.bleu[n] = nlg_sum_cor.bleu[n] / denom;
  }
  result.uncorrected.nlg.rouge_l_f1 = nlg_sum_unc.rouge_l_f1 / denom;
  result.corrected.nlg.rouge_l_f1 = nlg_sum_cor.rouge_l_f1 / denom;
  result.uncorrected.nlg.meteor = nlg_sum_unc.meteor / denom;
  result.corrected.nlg.meteor = nlg_sum_cor.meteor / denom;
  result.uncorrected.ce = ce_from_labels(labels_unc, labels_truth);
  result.corrected.ce = ce_from_labels(labels_cor, labels_truth);
  return result;
}

std::string guardrail_csv(const GuardrailResult& result) {
  char line[512];
  std::string out =
      "system,bleu1,bleu2,bleu3,bleu4,rouge_l,meteor,ce_precision,ce_recall,ce_f1\n";
  for (const GuardrailRow* row : {&result.uncorrected, &result.corrected}) {
    std::snprintf(line, sizeof(line), "%s,%.6f,%.6f,%.6f,%.6f,%.6f,%.6f,%.6f,%.6f,%.6f\n",
                  row->system.c_str(), row->nlg.bleu[0], row->nlg.bleu[1], row->nlg.bleu[2],
                  row->nlg.bleu[3], row->nlg.rouge_l_f1, row->nlg.meteor, row->ce.precision,
                  row->ce.recall, row->ce.f1);
    out += line;
  }
  return out;
}

}  // namespace radcorrect
