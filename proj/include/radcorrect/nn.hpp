#pragma once

#include <string>
#include <utility>
#include <vector>

#include "radcorrect/tensor.hpp"

namespace radcorrect {

// Ordered registry of named parameter leaves; the unit shared by the
// optimizer, checkpoints, and finite-difference sweeps.
class ParamSet {
 public:
  Tensor add(const std::string& name, Tensor t);
  const std::vector<std::pair<std::string, Tensor>>& items() const { return items_; }
  std::vector<Tensor> tensors() const;
  Tensor find(const std::string& name) const;  // throws DataError when absent
  void zero_grad();
  std::size_t total_size() const;

 private:
  std::vector<std::pair<std::string, Tensor>> items_;
};

struct AttentionBlock {
  Tensor w_q, w_k, w_v, w_o;  // all (model_dim, model_dim)
  int n_heads = 1;
  int model_dim = 0;
};

AttentionBlock make_attention_block(int model_dim, int n_heads, Rng& rng, ParamSet& params,
                                    const std::string& prefix);

// Additive masks for softmax: 0 where attention is allowed, -1e30 elsewhere.
Tensor causal_mask(std::size_t n);
// Rows attend to the whole prefix block and causally within the suffix.
Tensor prefix_causal_mask(std::size_t n, std::size_t prefix);

// Post-softmax attention weights recorded during a forward pass, one
// (rows, rows) tensor per head in head order.
struct AttentionCapture {
  std::vector<Tensor> head_weights;
};

// Multi-head scaled dot-product self-attention.
Tensor self_attention(const AttentionBlock& block, const Tensor& y, bool causal);
Tensor self_attention(const AttentionBlock& block, const Tensor& y, const Tensor& additive_mask);
Tensor self_attention(const AttentionBlock& block, const Tensor& y, const Tensor* additive_mask,
                      AttentionCapture* capture);

struct LayerNormParams {
  Tensor gamma, beta;
};

LayerNormParams make_layer_norm(int dim, ParamSet& params, const std::string& prefix);

struct FeedForward {
  Tensor w1, b1, w2, b2;
};

FeedForward make_feed_forward(int dim, int hidden, Rng& rng, ParamSet& params,
                              const std::string& prefix);

// Pre-norm transformer layer: x + Attn(LN(x)), then x + FFN(LN(x)).
struct TransformerLayer {
  AttentionBlock attn;
  LayerNormParams ln1, ln2;
  FeedForward ffn;
};

TransformerLayer make_transformer_layer(int dim, int heads, int ffn_hidden, Rng& rng,
                                        ParamSet& params, const std::string& prefix);

Tensor transformer_layer_forward(const TransformerLayer& layer, const Tensor& x,
                                 const Tensor* additive_mask,
                                 AttentionCapture* capture = nullptr);

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b);

// Fixed sinusoidal position table, (n, dim); not a parameter.
Tensor sinusoidal_positions(std::size_t n, std::size_t dim);

}  // namespace radcorrect
