#include "radcorrect/corrector.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <ostream>
#include <unordered_map>
#include <utility>

#include <Eigen/Dense>

#include "json.hpp"

#include "radcorrect/checkpoint.hpp"
#include "radcorrect/errors.hpp"

namespace radcorrect {

namespace {

using nlohmann::json;
using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMat>;

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

json corrector_config_to_json(const CorrectorConfig& cfg) {
  return json{{"d_model", cfg.d_model},
              {"n_heads", cfg.n_heads},
              {"n_layers", cfg.n_layers},
              {"ffn_hidden", cfg.ffn_hidden},
              {"max_seq_tokens", cfg.max_seq_tokens},
              {"max_span_len", cfg.max_span_len},
              {"max_runs", cfg.max_runs},
              {"optim",
               {{"base_lr", cfg.optim.base_lr},
                {"beta1", cfg.optim.beta1},
                {"beta2", cfg.optim.beta2},
                {"eps", cfg.optim.eps},
                {"weight_decay", cfg.optim.weight_decay}}},
              {"batch_size", cfg.batch_size},
              {"epochs", cfg.epochs}};
}

CorrectorConfig corrector_config_from_json(const json& j) {
  CorrectorConfig cfg;
  cfg.d_model = j.at("d_model").get<int>();
  cfg.n_heads = j.at("n_heads").get<int>();
  cfg.n_layers = j.at("n_layers").get<int>();
  cfg.ffn_hidden = j.at("ffn_hidden").get<int>();
  cfg.max_seq_tokens = j.at("max_seq_tokens").get<int>();
  cfg.max_span_len = j.at("max_span_len").get<int>();
  cfg.max_runs = j.at("max_runs").get<int>();
  const json& o = j.at("optim");
  cfg.optim.base_lr = o.at("base_lr").get<double>();
  cfg.optim.beta1 = o.at("beta1").get<double>();
  cfg.optim.beta2 = o.at("beta2").get<double>();
  cfg.optim.eps = o.at("eps").get<double>();
  cfg.optim.weight_decay = o.at("weight_decay").get<double>();
  cfg.batch_size = j.at("batch_size").get<int>();
  cfg.epochs = j.at("epochs").get<int>();
  return cfg;
}

}  // namespace

MaskedReport mask_flagged(std::uint64_t report_id, const std::vector<TokenId>& tokens,
                          const std::vector<std::uint8_t>& flags) {
  if (flags.size() != tokens.size()) throw DataError("flag vector length does not match tokens");
  MaskedReport out;
  out.report_id = report_id;
  std::size_t i = 0;
  while (i < tokens.size()) {
    if (flags[i] == 0) {
      out.tokens.push_back(tokens[i]);
      ++i;
      continue;
    }
    MaskedSpan span;
    span.position = out.tokens.size();
    span.source_position = i;
    while (i < tokens.size() && flags[i] != 0) {
      span.original.push_back(tokens[i]);
      ++i;
    }
    out.tokens.push_back(Vocabulary::kError);
    out.span_table.push_back(std::move(span));
  }
  return out;
}

MaskedReport mask_errors(const ErroneousReport& err) {
  MaskedReport out;
  out.report_id = err.source_report_id;
  std::size_t i = 0;
  std::size_t s = 0;
  while (i < err.tokens.size()) {
    if (s < err.spans.size() && err.spans[s].start == i) {
      // Adjacent injected spans collapse into one run, exactly as a flag mask
      // would merge them; the teacher target is the concatenated ground truth.
      MaskedSpan span;
      span.position = out.tokens.size();
      span.source_position = i;
      std::size_t end = err.spans[s].end;
      if (end <= i || end > err.tokens.size()) {
        throw DataError("error span falls outside the report");
      }
      span.original = err.spans[s].original_tokens;
      ++s;
      while (s < err.spans.size() && err.spans[s].start == end) {
        if (err.spans[s].end <= end || err.spans[s].end > err.tokens.size()) {
          throw DataError("error span falls outside the report");
        }
        span.original.insert(span.original.end(), err.spans[s].original_tokens.begin(),
                             err.spans[s].original_tokens.end());
        end = err.spans[s].end;
        ++s;
      }
      out.tokens.push_back(Vocabulary::kError);
      out.span_table.push_back(std::move(span));
      i = end;
    } else {
      out.tokens.push_back(err.tokens[i]);
      ++i;
    }
  }
  if (s != err.spans.size()) {
    throw DataError("error spans overlap or are not sorted by position");
  }
  return out;
}

void CorrectorConfig::validate() const {
  if (d_model <= 0) throw ConfigError("d_model must be positive");
  if (n_heads <= 0) throw ConfigError("n_heads must be positive");
  if (d_model % n_heads != 0) throw ConfigError("d_model must be divisible by n_heads");
  if (n_layers < 1) throw ConfigError("n_layers must be >= 1");
  if (ffn_hidden <= 0) throw ConfigError("ffn_hidden must be positive");
  if (max_seq_tokens < 1) throw ConfigError("max_seq_tokens must be >= 1");
  if (max_span_len < 1) throw ConfigError("max_span_len must be >= 1");
  if (max_runs < 1) throw ConfigError("max_runs must be >= 1");
  if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
  if (epochs < 0) throw ConfigError("epochs must be >= 0");
  optim.validate();
}

TrainingStream build_training_stream(const MaskedReport& masked, int max_span_len) {
  if (max_span_len < 1) throw ConfigError("max_span_len must be >= 1");
  TrainingStream ts;
  std::size_t span_idx = 0;
  for (std::size_t i = 0; i < masked.tokens.size(); ++i) {
    const TokenId t = masked.tokens[i];
    ts.stream.push_back(t);
    ts.loss_mask.push_back(0);
    if (t != Vocabulary::kError) continue;
    if (span_idx >= masked.span_table.size() || masked.span_table[span_idx].position != i) {
      throw DataError("span table does not align with [ERROR] markers");
    }
    const MaskedSpan& span = masked.span_table[span_idx];
    const std::size_t keep =
        std::min(span.original.size(), static_cast<std::size_t>(max_span_len));
    for (std::size_t k = 0; k < keep; ++k) {
      const TokenId orig = span.original[k];
      if (orig >= 0 && orig < Vocabulary::kReservedCount) {
        throw DataError("masked span original contains a reserved token");
      }
      ts.stream.push_back(orig);
      ts.loss_mask.push_back(1);
    }
    ts.stream.push_back(Vocabulary::kEndSpan);
    ts.loss_mask.push_back(1);
    ++span_idx;
  }
  if (span_idx != masked.span_table.size()) {
    throw DataError("span table has more entries than [ERROR] markers");
  }
  ts.stream.push_back(Vocabulary::kEos);
  ts.loss_mask.push_back(0);
  return ts;
}

CorrectorModel::CorrectorModel(const World& world, const CorrectorConfig& cfg,
                               std::uint64_t init_seed)
    : cfg_(cfg) {
  cfg_.validate();
  world_fingerprint_ = world.fingerprint();
  vocab_size_ = world.vocab().size();
  patch_count_ = static_cast<std::size_t>(world.config().grid) * world.config().grid;
  patch_dim_ = static_cast<std::size_t>(world.config().image_dim);
  const auto d = static_cast<std::size_t>(cfg_.d_model);

  Rng rng(derive_seed(init_seed, 0xC0DEC0DEULL));
  tok_emb_ = params_.add(
      "tok_emb", Tensor::randn({vocab_size_, d}, rng, 1.0 / std::sqrt(static_cast<double>(d)), true));
  pos_emb_ = params_.add("pos_emb", Tensor::randn({position_capacity(), d}, rng, 0.02, true));
  patch_proj_ = params_.add("patch_proj", xavier_init({patch_dim_, d}, rng, true));
  layers_.reserve(static_cast<std::size_t>(cfg_.n_layers));
  for (int i = 0; i < cfg_.n_layers; ++i) {
    layers_.push_back(make_transformer_layer(cfg_.d_model, cfg_.n_heads, cfg_.ffn_hidden, rng,
                                             params_, "layer" + std::to_string(i)));
  }
  ln_final_ = make_layer_norm(cfg_.d_model, params_, "ln_final");
  head_w_ = params_.add("head.w", xavier_init({d, vocab_size_}, rng, true));
  head_b_ = params_.add("head.b", Tensor::zeros({vocab_size_}, true));
}

std::size_t CorrectorModel::position_capacity() const {
  return patch_count_ + 1 /*[BOS]*/ + static_cast<std::size_t>(cfg_.max_seq_tokens) +
         static_cast<std::size_t>(cfg_.max_span_len + 2) * static_cast<std::size_t>(cfg_.max_runs) +
         1 /*[EOS]*/;
}

Tensor CorrectorModel::forward_logits(const PseudoImage& image,
                                      const std::vector<TokenId>& stream) const {
  if (static_cast<std::size_t>(image.patch_count()) != patch_count_ ||
      static_cast<std::size_t>(image.dim) != patch_dim_) {
    throw DataError("image geometry does not match the corrector's world");
  }
  const std::size_t total = patch_count_ + 1 + stream.size();
  if (total > position_capacity()) {
    throw DataError("token stream exceeds the corrector's positional capacity");
  }

  std::vector<TokenId> ids;
  ids.reserve(stream.size() + 1);
  ids.push_back(Vocabulary::kBos);
  ids.insert(ids.end(), stream.begin(), stream.end());

  const Tensor patches = Tensor::from({patch_count_, patch_dim_}, image.patches);
  Tensor x = concat_rows({matmul(patches, patch_proj_), embedding(tok_emb_, ids)});
  std::vector<std::size_t> pos_rows(total);
  std::iota(pos_rows.begin(), pos_rows.end(), 0);
  x = add(x, gather_rows(pos_emb_, std::move(pos_rows)));

  const Tensor mask = prefix_causal_mask(total, patch_count_);
  for (const auto& layer : layers_) {
    x = transformer_layer_forward(layer, x, &mask);
  }
  x = layer_norm(x, ln_final_.gamma, ln_final_.beta);
  std::vector<std::size_t> token_rows(ids.size());
  std::iota(token_rows.begin(), token_rows.end(), patch_count_);
  return linear(gather_rows(x, std::move(token_rows)), head_w_, head_b_);
}

namespace {

// Plain-Eigen mirrors of the autodiff forward pieces. Arithmetic follows the
// graph ops closely enough that decoded logits agree to ~1e-12.

void layer_norm_rows(RowMat& x, const Tensor& gamma, const Tensor& beta) {
  constexpr double kEps = 1e-5;
  const auto d = static_cast<std::size_t>(x.cols());
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    const double mean = x.row(r).mean();
    double var = 0.0;
    for (std::size_t c = 0; c < d; ++c) {
      const double diff = x(r, static_cast<Eigen::Index>(c)) - mean;
      var += diff * diff;
    }
    var /= static_cast<double>(d);
    const double inv = 1.0 / std::sqrt(var + kEps);
    for (std::size_t c = 0; c < d; ++c) {
      const auto ci = static_cast<Eigen::Index>(c);
      x(r, ci) = (x(r, ci) - mean) * inv * gamma.value()[c] + beta.value()[c];
    }
  }
}

ConstMap map2(const Tensor& t) {
  return ConstMap(t.value().data(), static_cast<Eigen::Index>(t.rows()),
                  static_cast<Eigen::Index>(t.cols()));
}

// Softmax over the first `allowed` entries of a score column; the rest get 0.
void masked_softmax_inplace(Eigen::VectorXd& scores, Eigen::Index allowed) {
  double maxv = -1e300;
  for (Eigen::Index j = 0; j < allowed; ++j) maxv = std::max(maxv, scores[j]);
  double z = 0.0;
  for (Eigen::Index j = 0; j < allowed; ++j) {
    scores[j] = std::exp(scores[j] - maxv);
    z += scores[j];
  }
  for (Eigen::Index j = 0; j < allowed; ++j) scores[j] /= z;
  for (Eigen::Index j = allowed; j < scores.size(); ++j) scores[j] = 0.0;
}

}  // namespace

CorrectorInference::CorrectorInference(const CorrectorModel& model) : model_(&model) {}

InferenceState CorrectorInference::prefill(const PseudoImage& image,
                                           const std::vector<TokenId>& context) const {
  const CorrectorModel& m = *model_;
  if (static_cast<std::size_t>(image.patch_count()) != m.patch_count() ||
      static_cast<std::size_t>(image.dim) != m.patch_dim()) {
    throw DataError("image geometry does not match the corrector's world");
  }
  const auto P = static_cast<Eigen::Index>(m.patch_count());
  const auto d = static_cast<Eigen::Index>(m.config().d_model);
  const auto L = static_cast<Eigen::Index>(m.patch_count() + 1 + context.size());
  if (static_cast<std::size_t>(L) > m.position_capacity()) {
    throw DataError("token stream exceeds the corrector's positional capacity");
  }

  const ConstMap patch_mat(image.patches.data(), P, static_cast<Eigen::Index>(m.patch_dim()));
  const ConstMap tok_emb = map2(m.tok_emb());
  const ConstMap pos_emb = map2(m.pos_emb());

  RowMat x(L, d);
  x.topRows(P) = patch_mat * map2(m.patch_proj());
  std::vector<TokenId> ids;
  ids.reserve(context.size() + 1);
  ids.push_back(Vocabulary::kBos);
  ids.insert(ids.end(), context.begin(), context.end());
  for (std::size_t i = 0; i < ids.size(); ++i) {
    const TokenId id = ids[i];
    if (id < 0 || static_cast<std::size_t>(id) >= m.vocab_size()) {
      throw DataError("token id out of range");
    }
    x.row(P + static_cast<Eigen::Index>(i)) = tok_emb.row(id);
  }
  x += pos_emb.topRows(L);

  InferenceState state;
  state.rows = static_cast<std::size_t>(L);
  const std::size_t n_layers = m.layers().size();
  state.keys.resize(n_layers);
  state.values.resize(n_layers);

  const int heads = m.config().n_heads;
  const auto hd = d / heads;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(hd));

  for (std::size_t l = 0; l < n_layers; ++l) {
    const TransformerLayer& layer = m.layers()[l];
    RowMat h = x;
    layer_norm_rows(h, layer.ln1.gamma, layer.ln1.beta);
    const RowMat q = h * map2(layer.attn.w_q);
    const RowMat k = h * map2(layer.attn.w_k);
    const RowMat v = h * map2(layer.attn.w_v);
    state.keys[l].assign(k.data(), k.data() + k.size());
    state.values[l].assign(v.data(), v.data() + v.size());

    RowMat merged(L, d);
    for (int head = 0; head < heads; ++head) {
      const auto c0 = static_cast<Eigen::Index>(head) * hd;
      for (Eigen::Index r = 0; r < L; ++r) {
        // Patch rows see the patch block only; token rows see patches plus
        // their causal prefix.
        const Eigen::Index allowed = r < P ? P : r + 1;
        Eigen::VectorXd scores =
            (k.middleCols(c0, hd).topRows(allowed) * q.row(r).segment(c0, hd).transpose()) *
            inv_sqrt;
        Eigen::VectorXd full = Eigen::VectorXd::Zero(L);
        full.head(allowed) = scores;
        masked_softmax_inplace(full, allowed);
        merged.row(r).segment(c0, hd) =
            full.head(allowed).transpose() * v.middleCols(c0, hd).topRows(allowed);
      }
    }
    x += merged * map2(layer.attn.w_o);

    RowMat h2 = x;
    layer_norm_rows(h2, layer.ln2.gamma, layer.ln2.beta);
    RowMat widened = h2 * map2(layer.ffn.w1);
    for (Eigen::Index r = 0; r < widened.rows(); ++r) {
      for (Eigen::Index c = 0; c < widened.cols(); ++c) {
        widened(r, c) = std::max(0.0, widened(r, c) + layer.ffn.b1.value()[static_cast<std::size_t>(c)]);
      }
    }
    RowMat out = widened * map2(layer.ffn.w2);
    for (Eigen::Index r = 0; r < out.rows(); ++r) {
      for (Eigen::Index c = 0; c < out.cols(); ++c) {
        out(r, c) += layer.ffn.b2.value()[static_cast<std::size_t>(c)];
      }
    }
    x += out;
  }

  RowMat last = x.bottomRows(1);
  layer_norm_rows(last, m.ln_final().gamma, m.ln_final().beta);
  Eigen::RowVectorXd logits = last.row(0) * map2(m.head_w());
  state.next_logits.resize(m.vocab_size());
  for (std::size_t cidx = 0; cidx < m.vocab_size(); ++cidx) {
    state.next_logits[cidx] = logits[static_cast<Eigen::Index>(cidx)] + m.head_b().value()[cidx];
  }
  return state;
}

void CorrectorInference::append(InferenceState& state, TokenId token) const {
  const CorrectorModel& m = *model_;
  if (token < 0 || static_cast<std::size_t>(token) >= m.vocab_size()) {
    throw DataError("token id out of range");
  }
  const std::size_t r = state.rows;
  if (r + 1 > m.position_capacity()) {
    throw DataError("token stream exceeds the corrector's positional capacity");
  }
  const auto d = static_cast<Eigen::Index>(m.config().d_model);
  const int heads = m.config().n_heads;
  const auto hd = d / heads;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(hd));

  Eigen::RowVectorXd x = map2(m.tok_emb()).row(token) +
                         map2(m.pos_emb()).row(static_cast<Eigen::Index>(r));

  for (std::size_t l = 0; l < m.layers().size(); ++l) {
    const TransformerLayer& layer = m.layers()[l];
    RowMat h = x;
    layer_norm_rows(h, layer.ln1.gamma, layer.ln1.beta);
    const Eigen::RowVectorXd q = h * map2(layer.attn.w_q);
    const Eigen::RowVectorXd k = h * map2(layer.attn.w_k);
    const Eigen::RowVectorXd v = h * map2(layer.attn.w_v);
    state.keys[l].insert(state.keys[l].end(), k.data(), k.data() + d);
    state.values[l].insert(state.values[l].end(), v.data(), v.data() + d);
    const auto rows = static_cast<Eigen::Index>(r + 1);
    const ConstMap keys(state.keys[l].data(), rows, d);
    const ConstMap values(state.values[l].data(), rows, d);

    Eigen::RowVectorXd merged(d);
    for (int head = 0; head < heads; ++head) {
      const auto c0 = static_cast<Eigen::Index>(head) * hd;
      Eigen::VectorXd scores =
          (keys.middleCols(c0, hd) * q.segment(c0, hd).transpose()) * inv_sqrt;
      masked_softmax_inplace(scores, rows);
      merged.segment(c0, hd) = scores.transpose() * values.middleCols(c0, hd);
    }
    x += merged * map2(layer.attn.w_o);

    RowMat h2 = x;
    layer_norm_rows(h2, layer.ln2.gamma, layer.ln2.beta);
    Eigen::RowVectorXd widened = h2.row(0) * map2(layer.ffn.w1);
    for (Eigen::Index c = 0; c < widened.size(); ++c) {
      widened[c] = std::max(0.0, widened[c] + layer.ffn.b1.value()[static_cast<std::size_t>(c)]);
    }
    Eigen::RowVectorXd out = widened * map2(layer.ffn.w2);
    for (Eigen::Index c = 0; c < out.size(); ++c) {
      out[c] += layer.ffn.b2.value()[static_cast<std::size_t>(c)];
    }
    x += out;
  }

  RowMat last = x;
  layer_norm_rows(last, m.ln_final().gamma, m.ln_final().beta);
  Eigen::RowVectorXd logits = last.row(0) * map2(m.head_w());
  for (std::size_t cidx = 0; cidx < m.vocab_size(); ++cidx) {
    state.next_logits[cidx] = logits[static_cast<Eigen::Index>(cidx)] + m.head_b().value()[cidx];
  }
  state.rows = r + 1;
}

const char* decode_mode_name(DecodeMode m) {
  switch (m) {
    case DecodeMode::kBeam: return "beam";
    case DecodeMode::kNucleus: return "nucleus";
  }
  throw ConfigError("unknown decode mode");
}

DecodeMode decode_mode_from_name(const std::string& name) {
  if (name == "beam") return DecodeMode::kBeam;
  if (name == "nucleus") return DecodeMode::kNucleus;
  throw ConfigError("unknown decode mode: " + name);
}

void DecodeConfig::validate() const {
  if (mode != DecodeMode::kBeam && mode != DecodeMode::kNucleus) {
    throw ConfigError("unknown decode mode");
  }
  if (beam_width < 1) throw ConfigError("beam_width must be >= 1");
  if (!(top_p > 0.0 && top_p <= 1.0)) throw ConfigError("top_p must lie in (0, 1]");
  if (max_span_len < 1) throw ConfigError("max_span_len must be >= 1");
}

std::vector<double> nucleus_filter(const std::vector<double>& probs, double top_p) {
  if (probs.empty()) throw DataError("nucleus filter needs a non-empty distribution");
  if (!(top_p > 0.0 && top_p <= 1.0)) throw ConfigError("top_p must lie in (0, 1]");
  double total = 0.0;
  for (const double p : probs) {
    if (!(p >= 0.0)) throw DataError("nucleus filter needs non-negative probabilities");
    total += p;
  }
  if (std::abs(total - 1.0) > 1e-6) throw DataError("nucleus filter input must sum to one");

  std::vector<std::size_t> order(probs.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return probs[a] > probs[b]; });
  double cum = 0.0;
  std::size_t keep = 0;
  while (keep < order.size() && cum < top_p) {
    cum += probs[order[keep]];
    ++keep;
  }
  std::vector<double> out(probs.size(), 0.0);
  for (std::size_t i = 0; i < keep; ++i) out[order[i]] = probs[order[i]] / cum;
  return out;
}

namespace {

bool is_candidate(TokenId t) {
  return t == Vocabulary::kEndSpan || t >= Vocabulary::kReservedCount;
}

std::vector<double> log_softmax(const std::vector<double>& logits) {
  double maxv = -1e300;
  for (const double v : logits) maxv = std::max(maxv, v);
  double z = 0.0;
  for (const double v : logits) z += std::exp(v - maxv);
  const double log_z = std::log(z);
  std::vector<double> out(logits.size());
  for (std::size_t i = 0; i < logits.size(); ++i) out[i] = logits[i] - maxv - log_z;
  return out;
}

std::vector<double> softmax_vec(const std::vector<double>& logits) {
  std::vector<double> out = log_softmax(logits);
  for (double& v : out) v = std::exp(v);
  return out;
}

// Exact-width beam search for one span. `base` must end at the span's
// [ERROR] marker.
std::vector<TokenId> beam_decode_span(const CorrectorInference& inf, const InferenceState& base,
                                      const DecodeConfig& dc) {
  struct Hypothesis {
    InferenceState state;
    std::vector<TokenId> tokens;
    double logp_sum = 0.0;
  };
  struct Completed {
    double score;
    std::vector<TokenId> tokens;
  };
  std::vector<Hypothesis> beams;
  beams.push_back({base, {}, 0.0});
  std::vector<Completed> completed;

  for (int step = 0; step <= dc.max_span_len; ++step) {
    struct Extension {
      std::size_t beam;
      TokenId token;
      double logp_sum;
    };
    std::vector<Extension> extensions;
    for (std::size_t b = 0; b < beams.size(); ++b) {
      const std::vector<double> logp = log_softmax(beams[b].state.next_logits);
      const double end_score = (beams[b].logp_sum + logp[Vocabulary::kEndSpan]) /
                               static_cast<double>(beams[b].tokens.size() + 1);
      completed.push_back({end_score, beams[b].tokens});
      if (step == dc.max_span_len) continue;  // length cap: terminator only
      for (TokenId t = 0; t < static_cast<TokenId>(logp.size()); ++t) {
        if (!is_candidate(t) || t == Vocabulary::kEndSpan) continue;
        extensions.push_back({b, t, beams[b].logp_sum + logp[static_cast<std::size_t>(t)]});
      }
    }
    if (extensions.empty()) break;
    std::sort(extensions.begin(), extensions.end(), [](const Extension& a, const Extension& b) {
      if (a.logp_sum != b.logp_sum) return a.logp_sum > b.logp_sum;
      if (a.beam != b.beam) return a.beam < b.beam;
      return a.token < b.token;
    });
    const std::size_t width = std::min<std::size_t>(static_cast<std::size_t>(dc.beam_width),
                                                    extensions.size());
    std::vector<Hypothesis> next;
    next.reserve(width);
    for (std::size_t i = 0; i < width; ++i) {
      const Extension& ext = extensions[i];
      Hypothesis hyp;
      hyp.state = beams[ext.beam].state;
      hyp.tokens = beams[ext.beam].tokens;
      hyp.logp_sum = ext.logp_sum;
      inf.append(hyp.state, ext.token);
      hyp.tokens.push_back(ext.token);
      next.push_back(std::move(hyp));
    }
    beams = std::move(next);
  }

  const Completed* best = nullptr;
  for (const Completed& c : completed) {
    if (best == nullptr || c.score > best->score ||
        (c.score == best->score && c.tokens.size() < best->tokens.size()) ||
        (c.score == best->score && c.tokens.size() == best->tokens.size() &&
         c.tokens < best->tokens)) {
      best = &c;
    }
  }
  return best->tokens;
}

std::vector<TokenId> nucleus_decode_span(const CorrectorInference& inf, const InferenceState& base,
                                         const DecodeConfig& dc, Rng& rng) {
  InferenceState state = base;
  std::vector<TokenId> out;
  while (static_cast<int>(out.size()) < dc.max_span_len) {
    std::vector<double> probs = softmax_vec(state.next_logits);
    double kept = 0.0;
    for (std::size_t t = 0; t < probs.size(); ++t) {
      if (!is_candidate(static_cast<TokenId>(t))) probs[t] = 0.0;
      kept += probs[t];
    }
    for (double& p : probs) p /= kept;
    const std::vector<double> filtered = nucleus_filter(probs, dc.top_p);
    const double u = rng.uniform();
    double cum = 0.0;
    TokenId chosen = Vocabulary::kEndSpan;
    for (std::size_t t = 0; t < filtered.size(); ++t) {
      if (filtered[t] <= 0.0) continue;
      cum += filtered[t];
      if (u <= cum) {
        chosen = static_cast<TokenId>(t);
        break;
      }
    }
    if (chosen == Vocabulary::kEndSpan) break;
    out.push_back(chosen);
    inf.append(state, chosen);
  }
  return out;
}

}  // namespace

Correction decode_spans(const CorrectorModel& model, const PseudoImage& image,
                        const MaskedReport& masked, const DecodeConfig& dc) {
  dc.validate();
  if (masked.span_table.size() > static_cast<std::size_t>(model.config().max_runs)) {
    throw DataError("masked report has more spans than the corrector supports");
  }
  CorrectorInference inf(model);
  InferenceState state = inf.prefill(image, {});

  Correction corr;
  corr.report_id = masked.report_id;
  std::size_t span_idx = 0;
  for (std::size_t i = 0; i < masked.tokens.size(); ++i) {
    const TokenId t = masked.tokens[i];
    inf.append(state, t);
    if (t != Vocabulary::kError) continue;
    if (span_idx >= masked.span_table.size() || masked.span_table[span_idx].position != i) {
      throw DataError("span table does not align with [ERROR] markers");
    }
    const MaskedSpan& span = masked.span_table[span_idx];
    std::vector<TokenId> replacement;
    if (dc.mode == DecodeMode::kBeam) {
      replacement = beam_decode_span(inf, state, dc);
    } else {
      Rng rng(derive_seed(derive_seed(dc.seed, masked.report_id), span.position));
      replacement = nucleus_decode_span(inf, state, dc, rng);
    }
    SpanCorrection sc;
    sc.position = span.position;
    sc.source_position = span.source_position;
    sc.original = span.original;
    sc.replacement = replacement;
    corr.spans.push_back(std::move(sc));
    for (const TokenId rt : replacement) inf.append(state, rt);
    inf.append(state, Vocabulary::kEndSpan);
    ++span_idx;
  }
  corr.corrected = apply_corrections(masked, corr.spans);
  return corr;
}

std::vector<TokenId> apply_corrections(const MaskedReport& masked,
                                       const std::vector<SpanCorrection>& spans) {
  std::vector<TokenId> out;
  out.reserve(masked.tokens.size());
  std::size_t span_idx = 0;
  for (std::size_t i = 0; i < masked.tokens.size(); ++i) {
    const TokenId t = masked.tokens[i];
    if (t != Vocabulary::kError) {
      out.push_back(t);
      continue;
    }
    if (span_idx >= spans.size() || spans[span_idx].position != i) {
      throw DataError("corrections do not align with [ERROR] markers");
    }
    const auto& repl = spans[span_idx].replacement;
    out.insert(out.end(), repl.begin(), repl.end());
    ++span_idx;
  }
  if (span_idx != spans.size()) throw DataError("more corrections than [ERROR] markers");
  return out;
}

Correction correct(const DetectorModel& detector, const CorrectorModel& corrector,
                   const PseudoImage& image, std::uint64_t report_id,
                   const std::vector<TokenId>& tokens, const DecodeConfig& dc) {
  return correct(detector, corrector, image, report_id, tokens, dc, detector.config().tau);
}

Correction correct(const DetectorModel& detector, const CorrectorModel& corrector,
                   const PseudoImage& image, std::uint64_t report_id,
                   const std::vector<TokenId>& tokens, const DecodeConfig& dc, double tau) {
  if (detector.world_fingerprint() != corrector.world_fingerprint()) {
    throw FingerprintMismatch("detector world fingerprint " +
                              fingerprint_hex(detector.world_fingerprint()) +
                              " does not match corrector world " +
                              fingerprint_hex(corrector.world_fingerprint()));
  }
  const std::vector<double> p = probabilities(detector.forward(image, tokens));
  const std::vector<std::uint8_t> flags = flag_tokens(p, tau);
  const std::vector<TokenId> visible(tokens.begin(), tokens.begin() + static_cast<std::ptrdiff_t>(p.size()));
  const MaskedReport masked = mask_flagged(report_id, visible, flags);
  Correction corr = decode_spans(corrector, image, masked, dc);
  for (SpanCorrection& span : corr.spans) {
    span.p_error.assign(p.begin() + static_cast<std::ptrdiff_t>(span.source_position),
                        p.begin() + static_cast<std::ptrdiff_t>(span.source_position +
                                                                span.original.size()));
  }
  return corr;
}

TrainedCorrector train_corrector(const World& world, const std::vector<CorpusRecord>& corpus,
                                 const std::vector<ErroneousReport>& errors,
                                 const CorrectorConfig& cfg, std::uint64_t seed,
                                 std::ostream* log_stream) {
  cfg.validate();
  const auto t_start = std::chrono::steady_clock::now();
  CorrectorModel model(world, cfg, derive_seed(seed, 0xC0221ECEULL));

  struct Example {
    const PseudoImage* image;
    TrainingStream ts;
    std::size_t active;
  };
  std::vector<Example> examples;
  {
    std::unordered_map<std::uint64_t, const CorpusRecord*> by_id;
    by_id.reserve(corpus.size());
    for (const auto& rec : corpus) by_id.emplace(rec.state.state_id, &rec);
    for (const auto& err : errors) {
      const auto it = by_id.find(err.source_report_id);
      if (it == by_id.end()) {
        throw DataError("erroneous report references unknown source id " +
                        std::to_string(err.source_report_id));
      }
      if (it->second->split != Split::kTrain) continue;
      try {
        const MaskedReport masked = mask_errors(err);
        if (masked.tokens.size() > static_cast<std::size_t>(cfg.max_seq_tokens)) {
          throw DataError("masked report exceeds max_seq_tokens");
        }
        if (masked.span_table.size() > static_cast<std::size_t>(cfg.max_runs)) {
          throw DataError("masked report has more spans than max_runs");
        }
        Example ex;
        ex.image = &it->second->image;
        ex.ts = build_training_stream(masked, cfg.max_span_len);
        ex.active = 0;
        for (const std::uint8_t mflag : ex.ts.loss_mask) ex.active += mflag != 0 ? 1 : 0;
        if (ex.active == 0) continue;  // nothing to learn from a span-free stream
        examples.push_back(std::move(ex));
      } catch (const DataError& e) {
        throw DataError("record " + std::to_string(err.source_report_id) + ": " + e.what());
      }
    }
  }
  if (examples.empty()) throw DataError("no erroneous training examples");

  const std::size_t batches =
      (examples.size() + static_cast<std::size_t>(cfg.batch_size) - 1) /
      static_cast<std::size_t>(cfg.batch_size);
  CorrectorTrainingLog log;
  if (cfg.epochs == 0) {
    return {std::move(model), std::move(log)};
  }

  OptimizerConfig oc = cfg.optim;
  oc.total_steps = batches * static_cast<std::size_t>(cfg.epochs);
  AdamW opt(model.params(), oc);
  Rng shuffle_rng(derive_seed(seed, 0x5C0221ULL));
  std::vector<std::size_t> order(examples.size());
  std::iota(order.begin(), order.end(), 0);

  try {
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
      shuffle_rng.shuffle(order);
      double epoch_loss_sum = 0.0;
      std::size_t epoch_active = 0;
      for (std::size_t b0 = 0; b0 < order.size(); b0 += static_cast<std::size_t>(cfg.batch_size)) {
        const std::size_t b1 = std::min(order.size(), b0 + static_cast<std::size_t>(cfg.batch_size));
        std::size_t total_active = 0;
        for (std::size_t k = b0; k < b1; ++k) total_active += examples[order[k]].active;
        model.params().zero_grad();
        for (std::size_t k = b0; k < b1; ++k) {
          const Example& ex = examples[order[k]];
          const Tensor logits = model.forward_logits(*ex.image, ex.ts.stream);
          std::vector<TokenId> targets = ex.ts.stream;
          targets.push_back(Vocabulary::kPad);  // final row predicts past the stream
          std::vector<std::uint8_t> mask = ex.ts.loss_mask;
          mask.push_back(0);
          const Tensor loss = masked_cross_entropy(logits, targets, mask);
          scale(loss, static_cast<double>(ex.active) / static_cast<double>(total_active))
              .backward();
          epoch_loss_sum += loss.item() * static_cast<double>(ex.active);
          epoch_active += ex.active;
        }
        opt.step();
      }
      log.epoch_loss.push_back(epoch_loss_sum / static_cast<double>(epoch_active));
      if (log_stream != nullptr) {
        char line[128];
        std::snprintf(line, sizeof line, "epoch %d/%d loss %.6f\n", epoch + 1, cfg.epochs,
                      log.epoch_loss.back());
        (*log_stream) << line << std::flush;
      }
    }
  } catch (const NumericError& e) {
    throw TrainingFault(std::string("corrector training diverged: ") + e.what());
  }

  log.wall_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t_start).count();
  return {std::move(model), std::move(log)};
}

void save_corrector(const std::string& path, const CorrectorModel& model) {
  Checkpoint ckpt;
  ckpt.kind = "corrector";
  ckpt.world_fingerprint = model.world_fingerprint();
  ckpt.config_json = corrector_config_to_json(model.config()).dump();
  ckpt.tensors = snapshot(model.params());
  save_checkpoint(path, ckpt);
}

CorrectorModel load_corrector(const std::string& path, const World& world) {
  const Checkpoint ckpt = load_checkpoint(path);
  if (ckpt.kind != "corrector") throw DataError("checkpoint kind is not 'corrector': " + ckpt.kind);
  if (ckpt.world_fingerprint != world.fingerprint()) {
    throw FingerprintMismatch("corrector checkpoint world fingerprint " +
                              fingerprint_hex(ckpt.world_fingerprint) +
                              " does not match current world " +
                              fingerprint_hex(world.fingerprint()));
  }
  CorrectorConfig cfg;
  try {
    cfg = corrector_config_from_json(json::parse(ckpt.config_json));
  } catch (const json::exception& e) {
    throw DataError(std::string("malformed corrector checkpoint config: ") + e.what());
  }
  CorrectorModel model(world, cfg, 0);
  restore_into(ckpt.tensors, model.params());
  return model;
}

}  // namespace radcorrect
