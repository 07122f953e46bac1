#include "radcorrect/nn.hpp"

#include <cmath>

namespace radcorrect {

Tensor ParamSet::add(const std::string& name, Tensor t) {
  for (const auto& [existing, _] : items_) {
    if (existing == name) throw ConfigError("duplicate parameter name: " + name);
  }
  t.set_name(name);
  items_.emplace_back(name, t);
  return t;
}

std::vector<Tensor> ParamSet::tensors() const {
  std::vector<Tensor> out;
  out.reserve(items_.size());
  for (const auto& [_, t] : items_) out.push_back(t);
  return out;
}

Tensor ParamSet::find(const std::string& name) const {
  for (const auto& [existing, t] : items_) {
    if (existing == name) return t;
  }
  throw DataError("unknown parameter: " + name);
}

void ParamSet::zero_grad() {
  for (auto& [_, t] : items_) t.zero_grad();
}

std::size_t ParamSet::total_size() const {
  std::size_t n = 0;
  for (const auto& [_, t] : items_) n += t.size();
  return n;
}

namespace {

Tensor xavier(std::vector<std::size_t> shape, Rng& rng) {
  const double fan_in = static_cast<double>(shape[0]);
  const double fan_out = static_cast<double>(shape.back());
  const double stddev = std::sqrt(2.0 / (fan_in + fan_out));
  return Tensor::randn(std::move(shape), rng, stddev, true);
}

}  // namespace

AttentionBlock make_attention_block(int model_dim, int n_heads, Rng& rng, ParamSet& params,
                                    const std::string& prefix) {
  if (model_dim <= 0 || n_heads <= 0) throw ConfigError("attention dims must be positive");
  if (model_dim % n_heads != 0) throw ConfigError("model_dim must be divisible by n_heads");
  const auto d = static_cast<std::size_t>(model_dim);
  AttentionBlock b;
  b.model_dim = model_dim;
  b.n_heads = n_heads;
  b.w_q = params.add(prefix + ".w_q", xavier({d, d}, rng));
  b.w_k = params.add(prefix + ".w_k", xavier({d, d}, rng));
  b.w_v = params.add(prefix + ".w_v", xavier({d, d}, rng));
  b.w_o = params.add(prefix + ".w_o", xavier({d, d}, rng));
  return b;
}

Tensor causal_mask(std::size_t n) {
  std::vector<double> m(n * n, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = i + 1; j < n; ++j) m[i * n + j] = -1e30;
  }
  return Tensor::from({n, n}, std::move(m));
}

Tensor prefix_causal_mask(std::size_t n, std::size_t prefix) {
  if (prefix > n) throw DataError("prefix exceeds sequence length");
  std::vector<double> m(n * n, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      const bool allowed = j < prefix || j <= i;
      if (!allowed) m[i * n + j] = -1e30;
    }
  }
  return Tensor::from({n, n}, std::move(m));
}

namespace {

Tensor attention_impl(const AttentionBlock& block, const Tensor& y, const Tensor* mask,
                      AttentionCapture* capture = nullptr) {
  if (y.ndim() != 2 || y.cols() != static_cast<std::size_t>(block.model_dim)) {
    throw DataError("attention input width must equal model_dim");
  }
  const std::size_t heads = static_cast<std::size_t>(block.n_heads);
  const std::size_t head_dim = static_cast<std::size_t>(block.model_dim) / heads;
  const Tensor q = matmul(y, block.w_q);
  const Tensor k = matmul(y, block.w_k);
  const Tensor v = matmul(y, block.w_v);
  std::vector<Tensor> head_outputs;
  head_outputs.reserve(heads);
  const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(head_dim));
  for (std::size_t h = 0; h < heads; ++h) {
    const std::size_t c0 = h * head_dim;
    const std::size_t c1 = c0 + head_dim;
    const Tensor qh = col_slice(q, c0, c1);
    const Tensor kh = col_slice(k, c0, c1);
    const Tensor vh = col_slice(v, c0, c1);
    const Tensor scores = scale(matmul_nt(qh, kh), inv_sqrt_d);
    const Tensor weights = mask ? softmax_rows(scores, *mask) : softmax_rows(scores);
    if (capture != nullptr) capture->head_weights.push_back(weights);
    head_outputs.push_back(matmul(weights, vh));
  }
  const Tensor merged = heads == 1 ? head_outputs[0] : concat_cols(head_outputs);
  return matmul(merged, block.w_o);
}

}  // namespace

Tensor self_attention(const AttentionBlock& block, const Tensor& y, bool causal) {
  if (!causal) return attention_impl(block, y, nullptr);
  const Tensor mask = causal_mask(y.rows());
  return attention_impl(block, y, &mask);
}

Tensor self_attention(const AttentionBlock& block, const Tensor& y, const Tensor& additive_mask) {
  return attention_impl(block, y, &additive_mask);
}

Tensor self_attention(const AttentionBlock& block, const Tensor& y, const Tensor* additive_mask,
                      AttentionCapture* capture) {
  return attention_impl(block, y, additive_mask, capture);
}

LayerNormParams make_layer_norm(int dim, ParamSet& params, const std::string& prefix) {
  const auto d = static_cast<std::size_t>(dim);
  LayerNormParams ln;
  ln.gamma = params.add(prefix + ".gamma", Tensor::from({d}, std::vector<double>(d, 1.0), true));
  ln.beta = params.add(prefix + ".beta", Tensor::zeros({d}, true));
  return ln;
}

FeedForward make_feed_forward(int dim, int hidden, Rng& rng, ParamSet& params,
                              const std::string& prefix) {
  if (dim <= 0 || hidden <= 0) throw ConfigError("feed-forward dims must be positive");
  const auto d = static_cast<std::size_t>(dim);
  const auto h = static_cast<std::size_t>(hidden);
  FeedForward f;
  f.w1 = params.add(prefix + ".w1", xavier({d, h}, rng));
  f.b1 = params.add(prefix + ".b1", Tensor::zeros({h}, true));
  f.w2 = params.add(prefix + ".w2", xavier({h, d}, rng));
  f.b2 = params.add(prefix + ".b2", Tensor::zeros({d}, true));
  return f;
}

TransformerLayer make_transformer_layer(int dim, int heads, int ffn_hidden, Rng& rng,
                                        ParamSet& params, const std::string& prefix) {
  TransformerLayer layer;
  layer.attn = make_attention_block(dim, heads, rng, params, prefix + ".attn");
  layer.ln1 = make_layer_norm(dim, params, prefix + ".ln1");
  layer.ln2 = make_layer_norm(dim, params, prefix + ".ln2");
  layer.ffn = make_feed_forward(dim, ffn_hidden, rng, params, prefix + ".ffn");
  return layer;
}

Tensor transformer_layer_forward(const TransformerLayer& layer, const Tensor& x,
                                 const Tensor* additive_mask, AttentionCapture* capture) {
  const Tensor normed1 = layer_norm(x, layer.ln1.gamma, layer.ln1.beta);
  const Tensor attended = attention_impl(layer.attn, normed1, additive_mask, capture);
  const Tensor x1 = add(x, attended);
  const Tensor normed2 = layer_norm(x1, layer.ln2.gamma, layer.ln2.beta);
  const Tensor hidden = relu(linear(normed2, layer.ffn.w1, layer.ffn.b1));
  const Tensor out = linear(hidden, layer.ffn.w2, layer.ffn.b2);
  return add(x1, out);
}

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) {
  return add_row_broadcast(matmul(x, w), b);
}

Tensor sinusoidal_positions(std::size_t n, std::size_t dim) {
  std::vector<double> out(n * dim, 0.0);
  for (std::size_t pos = 0; pos < n; ++pos) {
    for (std::size_t i = 0; i < dim; i += 2) {
      const double rate = std::pow(10000.0, -static_cast<double>(i) / static_cast<double>(dim));
      const double angle = static_cast<double>(pos) * rate;
      out[pos * dim + i] = std::sin(angle);
      if (i + 1 < dim) out[pos * dim + i + 1] = std::cos(angle);
    }
  }
  return Tensor::from({n, dim}, std::move(out));
}

}  // namespace radcorrect
