#include "radcorrect/detector.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <ostream>
#include <unordered_map>
#include <utility>

#include "json.hpp"

#include "radcorrect/checkpoint.hpp"
#include "radcorrect/errors.hpp"

namespace radcorrect {

namespace {

using nlohmann::json;

Tensor xavier_init(std::vector<std::size_t> shape, Rng& rng, bool requires_grad) {
  const double fan_in = static_cast<double>(shape.front());
  const double fan_out = static_cast<double>(shape.back());
  const double stddev = std::sqrt(2.0 / (fan_in + fan_out));
  return Tensor::randn(std::move(shape), rng, stddev, requires_grad);
}

std::string fingerprint_hex(std::uint64_t fp) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(fp));
  return std::string(buf);
}

json focal_to_json(const FocalLossConfig& f) {
  return json{{"alpha", f.alpha},
              {"gamma", f.gamma},
              {"strict_nm_normalization", f.strict_nm_normalization}};
}

json optim_to_json(const OptimizerConfig& o) {
  return json{{"base_lr", o.base_lr},
              {"beta1", o.beta1},
              {"beta2", o.beta2},
              {"eps", o.eps},
              {"weight_decay", o.weight_decay}};
}

json detector_config_to_json(const DetectorConfig& cfg) {
  return json{{"strategy", strategy_name(cfg.strategy)},
              {"d_model", cfg.d_model},
              {"n_heads", cfg.n_heads},
              {"n_layers", cfg.n_layers},
              {"ffn_hidden", cfg.ffn_hidden},
              {"max_seq_tokens", cfg.max_seq_tokens},
              {"pad_to", cfg.pad_to},
              {"tau", cfg.tau},
              {"focal", focal_to_json(cfg.focal)},
              {"optim", optim_to_json(cfg.optim)},
              {"batch_size", cfg.batch_size},
              {"phase1_epochs", cfg.phase1_epochs},
              {"phase2_epochs", cfg.phase2_epochs}};
}

DetectorConfig detector_config_from_json(const json& j) {
  DetectorConfig cfg;
  cfg.strategy = strategy_from_name(j.at("strategy").get<std::string>());
  cfg.d_model = j.at("d_model").get<int>();
  cfg.n_heads = j.at("n_heads").get<int>();
  cfg.n_layers = j.at("n_layers").get<int>();
  cfg.ffn_hidden = j.at("ffn_hidden").get<int>();
  cfg.max_seq_tokens = j.at("max_seq_tokens").get<int>();
  cfg.pad_to = j.at("pad_to").get<int>();
  cfg.tau = j.at("tau").get<double>();
  const json& f = j.at("focal");
  cfg.focal.alpha = f.at("alpha").get<double>();
  cfg.focal.gamma = f.at("gamma").get<double>();
  cfg.focal.strict_nm_normalization = f.at("strict_nm_normalization").get<bool>();
  const json& o = j.at("optim");
  cfg.optim.base_lr = o.at("base_lr").get<double>();
  cfg.optim.beta1 = o.at("beta1").get<double>();
  cfg.optim.beta2 = o.at("beta2").get<double>();
  cfg.optim.eps = o.at("eps").get<double>();
  cfg.optim.weight_decay = o.at("weight_decay").get<double>();
  cfg.batch_size = j.at("batch_size").get<int>();
  cfg.phase1_epochs = j.at("phase1_epochs").get<int>();
  cfg.phase2_epochs = j.at("phase2_epochs").get<int>();
  return cfg;
}

}  // namespace

const char* strategy_name(ConditioningStrategy s) {
  switch (s) {
    case ConditioningStrategy::kPatch: return "patch";
    case ConditioningStrategy::kPool: return "pool";
    case ConditioningStrategy::kConcatenate: return "concatenate";
  }
  throw ConfigError("unknown conditioning strategy");
}

ConditioningStrategy strategy_from_name(const std::string& name) {
  if (name == "patch") return ConditioningStrategy::kPatch;
  if (name == "pool") return ConditioningStrategy::kPool;
  if (name == "concatenate") return ConditioningStrategy::kConcatenate;
  throw ConfigError("unknown conditioning strategy: " + name);
}

void DetectorConfig::validate() const {
  if (d_model <= 0) throw ConfigError("d_model must be positive");
  if (n_heads <= 0) throw ConfigError("n_heads must be positive");
  if (d_model % n_heads != 0) throw ConfigError("d_model must be divisible by n_heads");
  if (n_layers < 1) throw ConfigError("n_layers must be >= 1");
  if (ffn_hidden <= 0) throw ConfigError("ffn_hidden must be positive");
  if (max_seq_tokens < 1) throw ConfigError("max_seq_tokens must be >= 1");
  if (pad_to < 0) throw ConfigError("pad_to must be >= 0");
  if (!(tau >= 0.0 && tau <= 1.0)) throw ConfigError("tau must lie in [0, 1]");
  if (!(focal.alpha >= 0.0 && focal.alpha <= 1.0)) throw ConfigError("focal alpha must lie in [0, 1]");
  if (focal.gamma < 0.0) throw ConfigError("focal gamma must be >= 0");
  if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
  if (phase1_epochs < 0 || phase2_epochs < 0) throw ConfigError("epoch counts must be >= 0");
  optim.validate();
}

DetectorModel::DetectorModel(const World& world, const DetectorConfig& cfg, std::uint64_t init_seed)
    : cfg_(cfg) {
  cfg_.validate();
  world_fingerprint_ = world.fingerprint();
  vocab_size_ = world.vocab().size();
  patch_count_ = static_cast<std::size_t>(world.config().grid) * world.config().grid;
  patch_dim_ = static_cast<std::size_t>(world.config().image_dim);
  const auto d = static_cast<std::size_t>(cfg_.d_model);
  const std::size_t width = model_width();
  if (width % static_cast<std::size_t>(cfg_.n_heads) != 0) {
    throw ConfigError("model width must be divisible by n_heads");
  }

  Rng rng(derive_seed(init_seed, 0x4DE7EC70ULL));
  // Embedding rows start at norm ~sqrt(d) so token content is not drowned out
  // by the sinusoidal position rows, whose norm is sqrt(d/2).
  tok_emb_ = trainable_.add("tok_emb", Tensor::randn({vocab_size_, d}, rng, 1.0, true));
  layers_.reserve(static_cast<std::size_t>(cfg_.n_layers));
  for (int i = 0; i < cfg_.n_layers; ++i) {
    layers_.push_back(make_transformer_layer(static_cast<int>(width), cfg_.n_heads,
                                             cfg_.ffn_hidden, rng, trainable_,
                                             "layer" + std::to_string(i)));
  }
  ln_final_ = make_layer_norm(static_cast<int>(width), trainable_, "ln_final");
  head_w_ = trainable_.add("head.w", xavier_init({width, 1}, rng, true));
  head_b_ = trainable_.add("head.b", Tensor::zeros({1}, true));

  patch_proj_ = frozen_.add("img.patch_proj", xavier_init({patch_dim_, d}, rng, false));
  pool_proj_ = frozen_.add("img.pool_proj", xavier_init({patch_dim_, d}, rng, false));
}

std::size_t DetectorModel::model_width() const {
  const auto d = static_cast<std::size_t>(cfg_.d_model);
  return cfg_.strategy == ConditioningStrategy::kConcatenate ? 2 * d : d;
}

ConditioningSequence DetectorModel::build_sequence(const PseudoImage& image,
                                                   const std::vector<TokenId>& tokens) const {
  if (static_cast<std::size_t>(image.patch_count()) != patch_count_ ||
      static_cast<std::size_t>(image.dim) != patch_dim_) {
    throw DataError("image geometry does not match the detector's world");
  }
  if (image.patches.size() != patch_count_ * patch_dim_ || image.pooled.size() != patch_dim_) {
    throw DataError("image buffers have inconsistent sizes");
  }

  const std::size_t keep = std::min(tokens.size(), static_cast<std::size_t>(cfg_.max_seq_tokens));
  std::vector<TokenId> ids(tokens.begin(), tokens.begin() + static_cast<std::ptrdiff_t>(keep));
  const std::size_t n_tokens = ids.size();
  if (cfg_.pad_to > 0) {
    while (ids.size() < static_cast<std::size_t>(cfg_.pad_to)) ids.push_back(Vocabulary::kPad);
  }

  const Tensor tok = embedding(tok_emb_, ids);
  ConditioningSequence out;
  out.n_tokens = n_tokens;
  Tensor seq;
  switch (cfg_.strategy) {
    case ConditioningStrategy::kPatch: {
      const Tensor patches = Tensor::from({patch_count_, patch_dim_}, image.patches);
      seq = concat_rows({matmul(patches, patch_proj_), tok});
      out.token_offset = patch_count_;
      break;
    }
    case ConditioningStrategy::kPool: {
      const Tensor pooled = Tensor::from({1, patch_dim_}, image.pooled);
      seq = concat_rows({matmul(pooled, pool_proj_), tok});
      out.token_offset = 1;
      break;
    }
    case ConditioningStrategy::kConcatenate: {
      const Tensor pooled = Tensor::from({1, patch_dim_}, image.pooled);
      const Tensor proj = matmul(pooled, pool_proj_);
      const Tensor replicated = gather_rows(proj, std::vector<std::size_t>(ids.size(), 0));
      seq = concat_cols({replicated, tok});
      out.token_offset = 0;
      break;
    }
    default:
      throw ConfigError("unknown conditioning strategy");
  }
  out.seq = add(seq, sinusoidal_positions(seq.rows(), seq.cols()));
  return out;
}

namespace {

Tensor detector_forward_impl(const std::vector<TransformerLayer>& layers,
                             const LayerNormParams& ln_final, const Tensor& head_w,
                             const Tensor& head_b, const ConditioningSequence& cs,
                             std::vector<AttentionCapture>* captures) {
  Tensor x = cs.seq;
  for (std::size_t i = 0; i < layers.size(); ++i) {
    AttentionCapture* cap = nullptr;
    if (captures != nullptr) {
      captures->emplace_back();
      cap = &captures->back();
    }
    x = transformer_layer_forward(layers[i], x, nullptr, cap);
  }
  x = layer_norm(x, ln_final.gamma, ln_final.beta);
  std::vector<std::size_t> rows(cs.n_tokens);
  for (std::size_t i = 0; i < cs.n_tokens; ++i) rows[i] = cs.token_offset + i;
  const Tensor token_states = gather_rows(x, std::move(rows));
  return sigmoid(linear(token_states, head_w, head_b));
}

}  // namespace

Tensor DetectorModel::forward(const PseudoImage& image, const std::vector<TokenId>& tokens) const {
  const ConditioningSequence cs = build_sequence(image, tokens);
  return detector_forward_impl(layers_, ln_final_, head_w_, head_b_, cs, nullptr);
}

Tensor DetectorModel::forward(const PseudoImage& image, const std::vector<TokenId>& tokens,
                              std::vector<AttentionCapture>& captures) const {
  const ConditioningSequence cs = build_sequence(image, tokens);
  captures.clear();
  return detector_forward_impl(layers_, ln_final_, head_w_, head_b_, cs, &captures);
}

std::vector<double> probabilities(const Tensor& p) {
  if (p.ndim() != 2 || p.cols() != 1) throw DataError("expected a column of probabilities");
  return p.value();
}

std::vector<std::uint8_t> flag_tokens(const std::vector<double>& p_error, double tau) {
  if (!(tau >= 0.0 && tau <= 1.0)) throw ConfigError("tau must lie in [0, 1]");
  const double cut = 1.0 - tau;
  std::vector<std::uint8_t> out(p_error.size(), 0);
  for (std::size_t i = 0; i < p_error.size(); ++i) out[i] = p_error[i] >= cut ? 1 : 0;
  return out;
}

std::vector<DetectorExample> erroneous_examples(const std::vector<CorpusRecord>& corpus,
                                                const std::vector<ErroneousReport>& errors,
                                                Split split) {
  std::unordered_map<std::uint64_t, const CorpusRecord*> by_id;
  by_id.reserve(corpus.size());
  for (const auto& rec : corpus) by_id.emplace(rec.state.state_id, &rec);
  std::vector<DetectorExample> out;
  for (const auto& err : errors) {
    const auto it = by_id.find(err.source_report_id);
    if (it == by_id.end()) {
      throw DataError("erroneous report references unknown source id " +
                      std::to_string(err.source_report_id));
    }
    if (it->second->split != split) continue;
    out.push_back({&it->second->image, &err.tokens, &err.error_token_mask});
  }
  return out;
}

std::vector<DetectorExample> clean_examples(const std::vector<CorpusRecord>& corpus, Split split) {
  std::vector<DetectorExample> out;
  for (const auto& rec : corpus) {
    if (rec.split != split) continue;
    out.push_back({&rec.image, &rec.tokens, nullptr});
  }
  return out;
}

namespace {

Tensor labels_tensor(const DetectorExample& ex, std::size_t n_tokens) {
  std::vector<double> y(n_tokens, 0.0);
  if (ex.labels != nullptr) {
    if (ex.labels->size() < n_tokens) throw DataError("label vector shorter than token sequence");
    for (std::size_t i = 0; i < n_tokens; ++i) y[i] = (*ex.labels)[i] ? 1.0 : 0.0;
  }
  return Tensor::from({n_tokens, 1}, std::move(y));
}

struct PhasePlan {
  const std::vector<DetectorExample>* examples = nullptr;
  int epochs = 0;
  std::vector<double>* loss_log = nullptr;
  int number = 0;
};

}  // namespace

TrainedDetector train_detector(const World& world, const std::vector<CorpusRecord>& corpus,
                               const std::vector<ErroneousReport>& errors,
                               const DetectorConfig& cfg, std::uint64_t seed,
                               std::ostream* log_stream) {
  cfg.validate();
  const auto t_start = std::chrono::steady_clock::now();
  DetectorModel model(world, cfg, derive_seed(seed, 0x0DE7EC70ULL));

  const std::vector<DetectorExample> train_err = erroneous_examples(corpus, errors, Split::kTrain);
  const std::vector<DetectorExample> val_err = erroneous_examples(corpus, errors, Split::kVal);
  if (train_err.empty()) throw DataError("no erroneous training examples");
  std::vector<DetectorExample> phase2 = train_err;
  {
    const std::vector<DetectorExample> clean = clean_examples(corpus, Split::kTrain);
    phase2.insert(phase2.end(), clean.begin(), clean.end());
  }

  const auto batches_of = [&](std::size_t n) {
    const auto b = static_cast<std::size_t>(cfg.batch_size);
    return (n + b - 1) / b;
  };
  const std::size_t total_steps =
      batches_of(train_err.size()) * static_cast<std::size_t>(cfg.phase1_epochs) +
      batches_of(phase2.size()) * static_cast<std::size_t>(cfg.phase2_epochs);

  DetectorTrainingLog log;
  if (total_steps == 0) {
    log.wall_seconds = 0.0;
    return {std::move(model), std::move(log)};
  }

  OptimizerConfig oc = cfg.optim;
  oc.total_steps = total_steps;
  AdamW opt(model.trainable(), oc);
  Rng shuffle_rng(derive_seed(seed, 0x51AFFE11ULL));

  const auto run_phase = [&](const PhasePlan& plan) {
    std::vector<std::size_t> order(plan.examples->size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    for (int epoch = 0; epoch < plan.epochs; ++epoch) {
      shuffle_rng.shuffle(order);
      double epoch_loss = 0.0;
      std::size_t seen = 0;
      for (std::size_t b0 = 0; b0 < order.size(); b0 += static_cast<std::size_t>(cfg.batch_size)) {
        const std::size_t b1 = std::min(order.size(), b0 + static_cast<std::size_t>(cfg.batch_size));
        model.trainable().zero_grad();
        for (std::size_t k = b0; k < b1; ++k) {
          const DetectorExample& ex = (*plan.examples)[order[k]];
          const Tensor p = model.forward(*ex.image, *ex.tokens);
          const Tensor y = labels_tensor(ex, p.rows());
          const Tensor mask = Tensor::from({p.rows(), 1}, std::vector<double>(p.rows(), 1.0));
          const Tensor loss = focal_loss(p, y, mask, cfg.focal);
          scale(loss, 1.0 / static_cast<double>(b1 - b0)).backward();
          epoch_loss += loss.item();
          ++seen;
        }
        opt.step();
      }
      plan.loss_log->push_back(epoch_loss / static_cast<double>(seen));
      double vf1 = 0.0;
      if (!val_err.empty()) {
        vf1 = evaluate_detection(model, val_err, cfg.tau).error_class.f1;
        log.val_f1.push_back(vf1);
      }
      if (log_stream != nullptr) {
        char line[160];
        if (val_err.empty()) {
          std::snprintf(line, sizeof line, "phase %d epoch %d/%d loss %.6f\n", plan.number,
                        epoch + 1, plan.epochs, plan.loss_log->back());
        } else {
          std::snprintf(line, sizeof line, "phase %d epoch %d/%d loss %.6f val_f1 %.4f\n",
                        plan.number, epoch + 1, plan.epochs, plan.loss_log->back(), vf1);
        }
        (*log_stream) << line;
      }
    }
  };

  try {
    run_phase({&train_err, cfg.phase1_epochs, &log.phase1_loss, 1});
    run_phase({&phase2, cfg.phase2_epochs, &log.phase2_loss, 2});
  } catch (const NumericError& e) {
    throw TrainingFault(std::string("detector training diverged: ") + e.what());
  }

  log.wall_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t_start).count();
  return {std::move(model), std::move(log)};
}

std::vector<std::vector<double>> predict_probabilities(
    const DetectorModel& model, const std::vector<DetectorExample>& examples) {
  std::vector<std::vector<double>> out;
  out.reserve(examples.size());
  for (const auto& ex : examples) {
    out.push_back(probabilities(model.forward(*ex.image, *ex.tokens)));
  }
  return out;
}

namespace {

ClassMetrics class_metrics(std::size_t tp, std::size_t fp, std::size_t fn) {
  ClassMetrics m;
  m.support = tp + fn;
  m.precision = (tp + fp) == 0 ? 0.0 : static_cast<double>(tp) / static_cast<double>(tp + fp);
  m.recall = (tp + fn) == 0 ? 0.0 : static_cast<double>(tp) / static_cast<double>(tp + fn);
  m.f1 = (m.precision + m.recall) == 0.0
             ? 0.0
             : 2.0 * m.precision * m.recall / (m.precision + m.recall);
  return m;
}

}  // namespace

DetectionReport report_from_probabilities(const std::vector<DetectorExample>& examples,
                                          const std::vector<std::vector<double>>& probs,
                                          double tau) {
  if (probs.size() != examples.size()) throw DataError("probability and example counts differ");
  std::size_t tp = 0, fp = 0, fn = 0, tn = 0;
  for (std::size_t i = 0; i < examples.size(); ++i) {
    const std::vector<std::uint8_t> flags = flag_tokens(probs[i], tau);
    const DetectorExample& ex = examples[i];
    if (ex.labels != nullptr && ex.labels->size() < flags.size()) {
      throw DataError("label vector shorter than prediction");
    }
    for (std::size_t j = 0; j < flags.size(); ++j) {
      const bool label = ex.labels != nullptr && (*ex.labels)[j] != 0;
      const bool pred = flags[j] != 0;
      if (label && pred) ++tp;
      else if (!label && pred) ++fp;
      else if (label && !pred) ++fn;
      else ++tn;
    }
  }
  DetectionReport r;
  r.error_class = class_metrics(tp, fp, fn);
  r.clean_class = class_metrics(tn, fn, fp);
  r.n_tokens = tp + fp + fn + tn;
  r.accuracy = r.n_tokens == 0 ? 0.0 : static_cast<double>(tp + tn) / static_cast<double>(r.n_tokens);
  r.macro_precision = 0.5 * (r.error_class.precision + r.clean_class.precision);
  r.macro_recall = 0.5 * (r.error_class.recall + r.clean_class.recall);
  r.macro_f1 = 0.5 * (r.error_class.f1 + r.clean_class.f1);
  const double total_support =
      static_cast<double>(r.error_class.support + r.clean_class.support);
  if (total_support > 0.0) {
    const double we = static_cast<double>(r.error_class.support) / total_support;
    const double wc = static_cast<double>(r.clean_class.support) / total_support;
    r.weighted_precision = we * r.error_class.precision + wc * r.clean_class.precision;
    r.weighted_recall = we * r.error_class.recall + wc * r.clean_class.recall;
    r.weighted_f1 = we * r.error_class.f1 + wc * r.clean_class.f1;
  }
  return r;
}

DetectionReport evaluate_detection(const DetectorModel& model,
                                   const std::vector<DetectorExample>& examples, double tau) {
  return report_from_probabilities(examples, predict_probabilities(model, examples), tau);
}

std::vector<SweepRow> sweep_threshold(const DetectorModel& model,
                                      const std::vector<DetectorExample>& examples,
                                      const std::vector<double>& taus) {
  for (std::size_t i = 1; i < taus.size(); ++i) {
    if (taus[i] < taus[i - 1]) throw ConfigError("thresholds must be sorted ascending");
  }
  const std::vector<std::vector<double>> probs = predict_probabilities(model, examples);
  std::vector<SweepRow> rows;
  rows.reserve(taus.size());
  for (const double tau : taus) {
    const DetectionReport r = report_from_probabilities(examples, probs, tau);
    SweepRow row;
    row.tau = tau;
    row.precision_error = r.error_class.precision;
    row.recall_error = r.error_class.recall;
    row.f1_error = r.error_class.f1;
    row.precision_clean = r.clean_class.precision;
    row.recall_clean = r.clean_class.recall;
    row.f1_clean = r.clean_class.f1;
    row.accuracy = r.accuracy;
    rows.push_back(row);
  }
  return rows;
}

std::string sweep_csv(const std::vector<SweepRow>& rows) {
  std::string out =
      "tau,precision_error,recall_error,f1_error,precision_clean,recall_clean,f1_clean,accuracy\n";
  char buf[256];
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof buf, "%.4f,%.6f,%.6f,%.6f,%.6f,%.6f,%.6f,%.6f\n", r.tau,
                  r.precision_error, r.recall_error, r.f1_error, r.precision_clean, r.recall_clean,
                  r.f1_clean, r.accuracy);
    out += buf;
  }
  return out;
}

void save_detector(const std::string& path, const DetectorModel& model) {
  Checkpoint ckpt;
  ckpt.kind = "detector";
  ckpt.world_fingerprint = model.world_fingerprint();
  ckpt.config_json = detector_config_to_json(model.config()).dump();
  ckpt.tensors = snapshot(model.trainable());
  const std::vector<NamedTensorData> frozen = snapshot(model.frozen());
  ckpt.tensors.insert(ckpt.tensors.end(), frozen.begin(), frozen.end());
  save_checkpoint(path, ckpt);
}

DetectorModel load_detector(const std::string& path, const World& world) {
  const Checkpoint ckpt = load_checkpoint(path);
  if (ckpt.kind != "detector") throw DataError("checkpoint kind is not 'detector': " + ckpt.kind);
  if (ckpt.world_fingerprint != world.fingerprint()) {
    throw FingerprintMismatch("detector checkpoint world fingerprint " +
                              fingerprint_hex(ckpt.world_fingerprint) +
                              " does not match current world " +
                              fingerprint_hex(world.fingerprint()));
  }
  DetectorConfig cfg;
  try {
    cfg = detector_config_from_json(json::parse(ckpt.config_json));
  } catch (const json::exception& e) {
    throw DataError(std::string("malformed detector checkpoint config: ") + e.what());
  }
  DetectorModel model(world, cfg, 0);
  const std::size_t n_trainable = model.trainable().items().size();
  if (ckpt.tensors.size() != n_trainable + model.frozen().items().size()) {
    throw DataError("detector checkpoint tensor count mismatch");
  }
  const std::vector<NamedTensorData> head(ckpt.tensors.begin(),
                                          ckpt.tensors.begin() + static_cast<std::ptrdiff_t>(n_trainable));
  const std::vector<NamedTensorData> tail(ckpt.tensors.begin() + static_cast<std::ptrdiff_t>(n_trainable),
                                          ckpt.tensors.end());
  restore_into(head, model.trainable());
  restore_into(tail, model.frozen());
  return model;
}

}  // namespace radcorrect
