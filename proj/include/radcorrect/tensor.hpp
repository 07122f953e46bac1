#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "radcorrect/errors.hpp"
#include "radcorrect/rng.hpp"

namespace radcorrect {

struct TensorNode {
  std::vector<std::size_t> shape;
  std::vector<double> value;
  std::vector<double> grad;  // sized lazily; leaves keep accumulated gradients
  bool requires_grad = false;
  bool leaf = false;
  std::string name;
  std::vector<std::shared_ptr<TensorNode>> parents;
  std::function<void(TensorNode&)> backprop;
};

// Value-semantic handle onto a reverse-mode graph node. Interior nodes live
// only as long as some downstream tensor does; leaves (parameters) persist and
// accumulate gradients across backward() calls until zero_grad().
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(std::vector<std::size_t> shape, bool requires_grad = false);
  static Tensor constant(std::vector<std::size_t> shape, double value);
  static Tensor from(std::vector<std::size_t> shape, std::vector<double> data,
                     bool requires_grad = false);
  static Tensor randn(std::vector<std::size_t> shape, Rng& rng, double stddev,
                      bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  const std::vector<std::size_t>& shape() const;
  std::size_t ndim() const { return shape().size(); }
  std::size_t dim(std::size_t i) const;
  std::size_t size() const;
  std::size_t rows() const { return dim(0); }
  std::size_t cols() const { return dim(1); }

  const std::vector<double>& value() const;
  std::vector<double>& mutable_value();  // optimizer and FD probes only
  const std::vector<double>& grad() const;
  std::vector<double>& mutable_grad();  // optimizer state surgery and tests
  void zero_grad();
  bool requires_grad() const;

  const std::string& name() const;
  void set_name(std::string name);

  // Scalar read with finiteness check.
  double item() const;

  // Reverse-mode sweep from a scalar root. Interior gradients are fresh per
  // call; leaf gradients accumulate.
  void backward() const;

  std::shared_ptr<TensorNode> node() const { return node_; }

 private:
  explicit Tensor(std::shared_ptr<TensorNode> node) : node_(std::move(node)) {}
  std::shared_ptr<TensorNode> node_;
  friend Tensor make_op(const char* op, std::vector<std::size_t> shape, std::vector<double> value,
                        const std::vector<Tensor>& parents,
                        std::function<void(TensorNode&)> backprop);
};

// Elementwise and linear algebra (2-D row-major unless stated).
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double c);
Tensor add_row_broadcast(const Tensor& x, const Tensor& bias);  // (n,d) + (d)
Tensor matmul(const Tensor& a, const Tensor& b);               // (n,k)x(k,m)
Tensor matmul_nt(const Tensor& a, const Tensor& b);            // (n,k)x(m,k)^T
Tensor concat_rows(const std::vector<Tensor>& parts);
Tensor concat_cols(const std::vector<Tensor>& parts);
Tensor col_slice(const Tensor& x, std::size_t c0, std::size_t c1);
Tensor gather_rows(const Tensor& x, std::vector<std::size_t> rows);
Tensor relu(const Tensor& x);
Tensor sigmoid(const Tensor& x);
Tensor softmax_rows(const Tensor& x);
Tensor softmax_rows(const Tensor& x, const Tensor& additive_mask);
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps = 1e-5);
Tensor embedding(const Tensor& table, const std::vector<std::int32_t>& ids);
Tensor sum(const Tensor& x);
Tensor exp(const Tensor& x);
Tensor mean_rows(const Tensor& x);  // (n,d) -> (1,d)
Tensor l2_normalize_rows(const Tensor& x, double eps = 1e-12);
Tensor scale_by(const Tensor& x, const Tensor& s);  // s is (1,1), broadcast multiply

struct FocalLossConfig {
  double alpha = 0.85;  // weights the positive (error) class
  double gamma = 2.0;
  // Normalize by the fixed N*M element count instead of the mask sum.
  bool strict_nm_normalization = false;

  void validate() const;
};

// Masked focal loss over probabilities (clamped to [1e-7, 1-1e-7]).
Tensor focal_loss(const Tensor& p, const Tensor& y, const Tensor& mask, const FocalLossConfig& cfg);

// Mean negative log-softmax over masked rows.
Tensor masked_cross_entropy(const Tensor& logits, const std::vector<std::int32_t>& targets,
                            const std::vector<std::uint8_t>& error_mask);

}  // namespace radcorrect
