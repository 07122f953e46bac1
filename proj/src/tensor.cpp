#include "radcorrect/tensor.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <unordered_set>

namespace radcorrect {

namespace {

using EMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

std::size_t product(const std::vector<std::size_t>& shape) {
  std::size_t n = 1;
  for (std::size_t d : shape) n *= d;
  return n;
}

void ensure_finite(const char* op, const std::vector<double>& v) {
  for (double x : v) {
    if (!std::isfinite(x)) throw NumericError(std::string("non-finite value produced by ") + op);
  }
}

void require_2d(const Tensor& t, const char* op) {
  if (t.ndim() != 2) throw DataError(std::string(op) + " expects a 2-d tensor");
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) throw DataError(std::string("shape mismatch in ") + op);
}

Eigen::Map<const EMat> as_mat(const TensorNode& n) {
  return {n.value.data(), static_cast<Eigen::Index>(n.shape[0]),
          static_cast<Eigen::Index>(n.shape[1])};
}

Eigen::Map<const EMat> grad_mat(const TensorNode& n) {
  return {n.grad.data(), static_cast<Eigen::Index>(n.shape[0]),
          static_cast<Eigen::Index>(n.shape[1])};
}

Eigen::Map<EMat> grad_mat_mut(TensorNode& n) {
  return {n.grad.data(), static_cast<Eigen::Index>(n.shape[0]),
          static_cast<Eigen::Index>(n.shape[1])};
}

}  // namespace

Tensor make_op(const char* op, std::vector<std::size_t> shape, std::vector<double> value,
               const std::vector<Tensor>& parents, std::function<void(TensorNode&)> backprop) {
  auto node = std::make_shared<TensorNode>();
  node->shape = std::move(shape);
  node->value = std::move(value);
  if (node->value.size() != product(node->shape)) throw DataError("internal: bad op output size");
  ensure_finite(op, node->value);
  bool needs = false;
  for (const Tensor& p : parents) {
    node->parents.push_back(p.node());
    if (p.requires_grad()) needs = true;
  }
  node->requires_grad = needs;
  if (needs) node->backprop = std::move(backprop);
  return Tensor(std::move(node));
}

// --- Tensor basics ---------------------------------------------------------

Tensor Tensor::zeros(std::vector<std::size_t> shape, bool requires_grad) {
  return from(std::move(shape), {}, requires_grad);
}

Tensor Tensor::constant(std::vector<std::size_t> shape, double value) {
  std::vector<double> data(product(shape), value);
  return from(std::move(shape), std::move(data), false);
}

Tensor Tensor::from(std::vector<std::size_t> shape, std::vector<double> data, bool requires_grad) {
  auto node = std::make_shared<TensorNode>();
  const std::size_t n = product(shape);
  if (data.empty()) data.assign(n, 0.0);
  if (data.size() != n) throw DataError("data length does not match shape");
  ensure_finite("tensor construction", data);
  node->shape = std::move(shape);
  node->value = std::move(data);
  node->requires_grad = requires_grad;
  node->leaf = true;
  if (requires_grad) node->grad.assign(n, 0.0);
  return Tensor(std::move(node));
}

Tensor Tensor::randn(std::vector<std::size_t> shape, Rng& rng, double stddev, bool requires_grad) {
  std::vector<double> data(product(shape));
  for (double& x : data) x = stddev * rng.normal();
  return from(std::move(shape), std::move(data), requires_grad);
}

const std::vector<std::size_t>& Tensor::shape() const {
  if (!node_) throw DataError("undefined tensor");
  return node_->shape;
}

std::size_t Tensor::dim(std::size_t i) const {
  const auto& s = shape();
  if (i >= s.size()) throw DataError("dimension index out of range");
  return s[i];
}

std::size_t Tensor::size() const { return value().size(); }

const std::vector<double>& Tensor::value() const {
  if (!node_) throw DataError("undefined tensor");
  return node_->value;
}

std::vector<double>& Tensor::mutable_value() {
  if (!node_) throw DataError("undefined tensor");
  return node_->value;
}

const std::vector<double>& Tensor::grad() const {
  if (!node_) throw DataError("undefined tensor");
  if (node_->grad.size() != node_->value.size()) {
    throw DataError("gradient not available; run backward first");
  }
  return node_->grad;
}

std::vector<double>& Tensor::mutable_grad() {
  if (!node_) throw DataError("undefined tensor");
  if (node_->grad.size() != node_->value.size()) {
    node_->grad.assign(node_->value.size(), 0.0);
  }
  return node_->grad;
}

void Tensor::zero_grad() {
  if (!node_) throw DataError("undefined tensor");
  node_->grad.assign(node_->value.size(), 0.0);
}

bool Tensor::requires_grad() const { return node_ && node_->requires_grad; }

const std::string& Tensor::name() const {
  if (!node_) throw DataError("undefined tensor");
  return node_->name;
}

void Tensor::set_name(std::string name) {
  if (!node_) throw DataError("undefined tensor");
  node_->name = std::move(name);
}

double Tensor::item() const {
  if (size() != 1) throw DataError("item() requires a scalar tensor");
  const double v = value()[0];
  if (!std::isfinite(v)) throw NumericError("non-finite scalar value");
  return v;
}

void Tensor::backward() const {
  if (!node_) throw DataError("undefined tensor");
  if (node_->value.size() != 1) throw DataError("backward requires a scalar root");
  if (!node_->requires_grad) throw DataError("backward on a tensor that does not require grad");

  std::vector<TensorNode*> order;
  std::unordered_set<TensorNode*> seen;
  struct Frame {
    TensorNode* node;
    std::size_t next_parent;
  };
  std::vector<Frame> stack{{node_.get(), 0}};
  seen.insert(node_.get());
  while (!stack.empty()) {
    Frame& f = stack.back();
    if (f.next_parent < f.node->parents.size()) {
      TensorNode* p = f.node->parents[f.next_parent++].get();
      if (p->requires_grad && !seen.count(p)) {
        seen.insert(p);
        stack.push_back({p, 0});
      }
    } else {
      order.push_back(f.node);
      stack.pop_back();
    }
  }
  for (TensorNode* n : order) {
    if (n->grad.size() != n->value.size()) n->grad.assign(n->value.size(), 0.0);
  }
  node_->grad[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    if ((*it)->backprop) (*it)->backprop(**it);
  }
}

// --- elementwise -----------------------------------------------------------

namespace {

void accumulate_same_shape(TensorNode& self, int parent, double sign) {
  TensorNode& p = *self.parents[static_cast<std::size_t>(parent)];
  if (!p.requires_grad) return;
  for (std::size_t i = 0; i < self.grad.size(); ++i) p.grad[i] += sign * self.grad[i];
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] + b.value()[i];
  return make_op("add", a.shape(), std::move(out), {a, b}, [](TensorNode& self) {
    accumulate_same_shape(self, 0, 1.0);
    accumulate_same_shape(self, 1, 1.0);
  });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "sub");
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] - b.value()[i];
  return make_op("sub", a.shape(), std::move(out), {a, b}, [](TensorNode& self) {
    accumulate_same_shape(self, 0, 1.0);
    accumulate_same_shape(self, 1, -1.0);
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mul");
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.value()[i] * b.value()[i];
  return make_op("mul", a.shape(), std::move(out), {a, b}, [](TensorNode& self) {
    TensorNode& pa = *self.parents[0];
    TensorNode& pb = *self.parents[1];
    if (pa.requires_grad) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) pa.grad[i] += self.grad[i] * pb.value[i];
    }
    if (pb.requires_grad) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) pb.grad[i] += self.grad[i] * pa.value[i];
    }
  });
}

Tensor scale(const Tensor& a, double c) {
  if (!std::isfinite(c)) throw NumericError("non-finite scale factor");
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = c * a.value()[i];
  return make_op("scale", a.shape(), std::move(out), {a}, [c](TensorNode& self) {
    TensorNode& p = *self.parents[0];
    for (std::size_t i = 0; i < self.grad.size(); ++i) p.grad[i] += c * self.grad[i];
  });
}

Tensor add_row_broadcast(const Tensor& x, const Tensor& bias) {
  require_2d(x, "add_row_broadcast");
  if (bias.ndim() != 1 || bias.dim(0) != x.cols()) {
    throw DataError("shape mismatch in add_row_broadcast");
  }
  const std::size_t n = x.rows();
  const std::size_t d = x.cols();
  std::vector<double> out(x.size());
  for (std::size_t r = 0; r < n; ++r) {
    for (std::size_t c = 0; c < d; ++c) out[r * d + c] = x.value()[r * d + c] + bias.value()[c];
  }
  return make_op("add_row_broadcast", x.shape(), std::move(out), {x, bias}, [n, d](TensorNode& self) {
    TensorNode& px = *self.parents[0];
    TensorNode& pb = *self.parents[1];
    if (px.requires_grad) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) px.grad[i] += self.grad[i];
    }
    if (pb.requires_grad) {
      for (std::size_t r = 0; r < n; ++r) {
        for (std::size_t c = 0; c < d; ++c) pb.grad[c] += self.grad[r * d + c];
      }
    }
  });
}

// --- matrix products -------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_2d(a, "matmul");
  require_2d(b, "matmul");
  if (a.cols() != b.rows()) throw DataError("shape mismatch in matmul");
  const std::size_t n = a.rows();
  const std::size_t m = b.cols();
  std::vector<double> out(n * m);
  {
    Eigen::Map<EMat> o(out.data(), static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(m));
    o.noalias() = as_mat(*a.node()) * as_mat(*b.node());
  }
  return make_op("matmul", {n, m}, std::move(out), {a, b}, [](TensorNode& self) {
    TensorNode& pa = *self.parents[0];
    TensorNode& pb = *self.parents[1];
    if (pa.requires_grad) grad_mat_mut(pa).noalias() += grad_mat(self) * as_mat(pb).transpose();
    if (pb.requires_grad) grad_mat_mut(pb).noalias() += as_mat(pa).transpose() * grad_mat(self);
  });
}

Tensor matmul_nt(const Tensor& a, const Tensor& b) {
  require_2d(a, "matmul_nt");
  require_2d(b, "matmul_nt");
  if (a.cols() != b.cols()) throw DataError("shape mismatch in matmul_nt");
  const std::size_t n = a.rows();
  const std::size_t m = b.rows();
  std::vector<double> out(n * m);
  {
    Eigen::Map<EMat> o(out.data(), static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(m));
    o.noalias() = as_mat(*a.node()) * as_mat(*b.node()).transpose();
  }
  return make_op("matmul_nt", {n, m}, std::move(out), {a, b}, [](TensorNode& self) {
    TensorNode& pa = *self.parents[0];
    TensorNode& pb = *self.parents[1];
    if (pa.requires_grad) grad_mat_mut(pa).noalias() += grad_mat(self) * as_mat(pb);
    if (pb.requires_grad) grad_mat_mut(pb).noalias() += grad_mat(self).transpose() * as_mat(pa);
  });
}

// --- assembly --------------------------------------------------------------

Tensor concat_rows(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw DataError("concat_rows needs at least one part");
  const std::size_t d = parts[0].cols();
  std::size_t n = 0;
  for (const Tensor& p : parts) {
    require_2d(p, "concat_rows");
    if (p.cols() != d) throw DataError("shape mismatch in concat_rows");
    n += p.rows();
  }
  std::vector<double> out;
  out.reserve(n * d);
  for (const Tensor& p : parts) out.insert(out.end(), p.value().begin(), p.value().end());
  return make_op("concat_rows", {n, d}, std::move(out), parts, [d](TensorNode& self) {
    std::size_t offset = 0;
    for (auto& parent : self.parents) {
      const std::size_t len = parent->value.size();
      if (parent->requires_grad) {
        for (std::size_t i = 0; i < len; ++i) parent->grad[i] += self.grad[offset + i];
      }
      offset += len;
    }
    (void)d;
  });
}

Tensor concat_cols(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw DataError("concat_cols needs at least one part");
  const std::size_t n = parts[0].rows();
  std::size_t d = 0;
  for (const Tensor& p : parts) {
    require_2d(p, "concat_cols");
    if (p.rows() != n) throw DataError("shape mismatch in concat_cols");
    d += p.cols();
  }
  std::vector<double> out(n * d);
  std::size_t col_offset = 0;
  for (const Tensor& p : parts) {
    const std::size_t pc = p.cols();
    for (std::size_t r = 0; r < n; ++r) {
      for (std::size_t c = 0; c < pc; ++c) out[r * d + col_offset + c] = p.value()[r * pc + c];
    }
    col_offset += pc;
  }
  return make_op("concat_cols", {n, d}, std::move(out), parts, [n, d](TensorNode& self) {
    std::size_t col_offset = 0;
    for (auto& parent : self.parents) {
      const std::size_t pc = parent->shape[1];
      if (parent->requires_grad) {
        for (std::size_t r = 0; r < n; ++r) {
          for (std::size_t c = 0; c < pc; ++c) {
            parent->grad[r * pc + c] += self.grad[r * d + col_offset + c];
          }
        }
      }
      col_offset += pc;
    }
  });
}

Tensor col_slice(const Tensor& x, std::size_t c0, std::size_t c1) {
  require_2d(x, "col_slice");
  if (c0 >= c1 || c1 > x.cols()) throw DataError("bad column range in col_slice");
  const std::size_t n = x.rows();
  const std::size_t d = x.cols();
  const std::size_t w = c1 - c0;
  std::vector<double> out(n * w);
  for (std::size_t r = 0; r < n; ++r) {
    for (std::size_t c = 0; c < w; ++c) out[r * w + c] = x.value()[r * d + c0 + c];
  }
  return make_op("col_slice", {n, w}, std::move(out), {x}, [n, d, w, c0](TensorNode& self) {
    TensorNode& p = *self.parents[0];
    for (std::size_t r = 0; r < n; ++r) {
      for (std::size_t c = 0; c < w; ++c) p.grad[r * d + c0 + c] += self.grad[r * w + c];
    }
  });
}

Tensor gather_rows(const Tensor& x, std::vector<std::size_t> rows) {
  require_2d(x, "gather_rows");
  if (rows.empty()) throw DataError("gather_rows needs at least one row");
  const std::size_t d = x.cols();
  for (std::size_t r : rows) {
    if (r >= x.rows()) throw DataError("row index out of range in gather_rows");
  }
  const std::size_t n_rows = rows.size();
  std::vector<double> out(n_rows * d);
  for (std::size_t i = 0; i < n_rows; ++i) {
    const double* src = x.value().data() + rows[i] * d;
    std::copy(src, src + d, out.data() + i * d);
  }
  return make_op("gather_rows", {n_rows, d}, std::move(out), {x},
                 [rows = std::move(rows), d](TensorNode& self) {
                   TensorNode& p = *self.parents[0];
                   for (std::size_t i = 0; i < rows.size(); ++i) {
                     for (std::size_t c = 0; c < d; ++c) {
                       p.grad[rows[i] * d + c] += self.grad[i * d + c];
                     }
                   }
                 });
}

// --- nonlinearities --------------------------------------------------------

Tensor relu(const Tensor& x) {
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x.value()[i] > 0.0 ? x.value()[i] : 0.0;
  return make_op("relu", x.shape(), std::move(out), {x}, [](TensorNode& self) {
    TensorNode& p = *self.parents[0];
    for (std::size_t i = 0; i < self.grad.size(); ++i) {
      if (p.value[i] > 0.0) p.grad[i] += self.grad[i];
    }
  });
}

Tensor sigmoid(const Tensor& x) {
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double v = x.value()[i];
    out[i] = v >= 0.0 ? 1.0 / (1.0 + std::exp(-v)) : std::exp(v) / (1.0 + std::exp(v));
  }
  return make_op("sigmoid", x.shape(), std::move(out), {x}, [](TensorNode& self) {
    TensorNode& p = *self.parents[0];
    for (std::size_t i = 0; i < self.grad.size(); ++i) {
      const double s = self.value[i];
      p.grad[i] += self.grad[i] * s * (1.0 - s);
    }
  });
}

namespace {

Tensor softmax_rows_impl(const Tensor& x, const Tensor* mask) {
  require_2d(x, "softmax_rows");
  if (mask != nullptr) {
    if (mask->shape() != x.shape()) throw DataError("shape mismatch in softmax mask");
    if (mask->requires_grad()) throw DataError("softmax additive mask must not require grad");
  }
  const std::size_t n = x.rows();
  const std::size_t d = x.cols();
  std::vector<double> out(x.size());
  for (std::size_t r = 0; r < n; ++r) {
    double maxv = -1e300;
    for (std::size_t c = 0; c < d; ++c) {
      const double v = x.value()[r * d + c] + (mask ? mask->value()[r * d + c] : 0.0);
      maxv = std::max(maxv, v);
    }
    double z = 0.0;
    for (std::size_t c = 0; c < d; ++c) {
      const double v = x.value()[r * d + c] + (mask ? mask->value()[r * d + c] : 0.0);
      const double e = std::exp(v - maxv);
      out[r * d + c] = e;
      z += e;
    }
    for (std::size_t c = 0; c < d; ++c) out[r * d + c] /= z;
  }
  std::vector<Tensor> parents{x};
  if (mask != nullptr) parents.push_back(*mask);
  return make_op("softmax_rows", x.shape(), std::move(out), parents, [n, d](TensorNode& self) {
    TensorNode& p = *self.parents[0];
    if (!p.requires_grad) return;
    for (std::size_t r = 0; r < n; ++r) {
      double dot = 0.0;
      for (std::size_t c = 0; c < d; ++c) dot += self.grad[r * d + c] * self.value[r * d + c];
      for (std::size_t c = 0; c < d; ++c) {
        p.grad[r * d + c] += self.value[r * d + c] * (self.grad[r * d + c] - dot);
      }
    }
  });
}

}  // namespace

Tensor softmax_rows(const Tensor& x) { return softmax_rows_impl(x, nullptr); }

Tensor softmax_rows(const Tensor& x, const Tensor& additive_mask) {
  return softmax_rows_impl(x, &additive_mask);
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
  require_2d(x, "layer_norm");
  if (gamma.ndim() != 1 || gamma.dim(0) != x.cols() || beta.ndim() != 1 || beta.dim(0) != x.cols()) {
    throw DataError("shape mismatch in layer_norm");
  }
  if (eps <= 0.0) throw ConfigError("layer_norm eps must be positive");
  const std::size_t n = x.rows();
  const std::size_t d = x.cols();
  std::vector<double> out(x.size());
  std::vector<double> xhat(x.size());
  std::vector<double> inv_sigma(n);
  for (std::size_t r = 0; r < n; ++r) {
    double mean = 0.0;
    for (std::size_t c = 0; c < d; ++c) mean += x.value()[r * d + c];
    mean /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t c = 0; c < d; ++c) {
      const double diff = x.value()[r * d + c] - mean;
      var += diff * diff;
    }
    var /= static_cast<double>(d);
    const double inv = 1.0 / std::sqrt(var + eps);
    inv_sigma[r] = inv;
    for (std::size_t c = 0; c < d; ++c) {
      const double h = (x.value()[r * d + c] - mean) * inv;
      xhat[r * d + c] = h;
      out[r * d + c] = h * gamma.value()[c] + beta.value()[c];
    }
  }
  return make_op("layer_norm", x.shape(), std::move(out), {x, gamma, beta},
                 [n, d, xhat = std::move(xhat), inv_sigma = std::move(inv_sigma)](TensorNode& self) {
                   TensorNode& px = *self.parents[0];
                   TensorNode& pg = *self.parents[1];
                   TensorNode& pb = *self.parents[2];
                   for (std::size_t r = 0; r < n; ++r) {
                     double mean_g = 0.0;
                     double mean_gx = 0.0;
                     for (std::size_t c = 0; c < d; ++c) {
                       const double gy = self.grad[r * d + c] * pg.value[c];
                       mean_g += gy;
                       mean_gx += gy * xhat[r * d + c];
                     }
                     mean_g /= static_cast<double>(d);
                     mean_gx /= static_cast<double>(d);
                     if (px.requires_grad) {
                       for (std::size_t c = 0; c < d; ++c) {
                         const double gy = self.grad[r * d + c] * pg.value[c];
                         px.grad[r * d + c] +=
                             inv_sigma[r] * (gy - mean_g - xhat[r * d + c] * mean_gx);
                       }
                     }
                     if (pg.requires_grad) {
                       for (std::size_t c = 0; c < d; ++c) {
                         pg.grad[c] += self.grad[r * d + c] * xhat[r * d + c];
                       }
                     }
                     if (pb.requires_grad) {
                       for (std::size_t c = 0; c < d; ++c) pb.grad[c] += self.grad[r * d + c];
                     }
                   }
                 });
}

Tensor embedding(const Tensor& table, const std::vector<std::int32_t>& ids) {
  require_2d(table, "embedding");
  if (ids.empty()) throw DataError("embedding needs at least one id");
  const std::size_t d = table.cols();
  for (std::int32_t id : ids) {
    if (id < 0 || static_cast<std::size_t>(id) >= table.rows()) {
      throw DataError("embedding id out of range: " + std::to_string(id));
    }
  }
  std::vector<double> out(ids.size() * d);
  for (std::size_t i = 0; i < ids.size(); ++i) {
    const double* src = table.value().data() + static_cast<std::size_t>(ids[i]) * d;
    std::copy(src, src + d, out.data() + i * d);
  }
  return make_op("embedding", {ids.size(), d}, std::move(out), {table}, [ids, d](TensorNode& self) {
    TensorNode& p = *self.parents[0];
    for (std::size_t i = 0; i < ids.size(); ++i) {
      double* dst = p.grad.data() + static_cast<std::size_t>(ids[i]) * d;
      const double* src = self.grad.data() + i * d;
      for (std::size_t c = 0; c < d; ++c) dst[c] += src[c];
    }
  });
}

Tensor sum(const Tensor& x) {
  double total = 0.0;
  for (double v : x.value()) total += v;
  return make_op("sum", {1}, {total}, {x}, [](TensorNode& self) {
    TensorNode& p = *self.parents[0];
    for (double& g : p.grad) g += self.grad[0];
  });
}

Tensor exp(const Tensor& x) {
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::exp(x.value()[i]);
  return make_op("exp", x.shape(), std::move(out), {x}, [](TensorNode& self) {
    TensorNode& p = *self.parents[0];
    for (std::size_t i = 0; i < p.grad.size(); ++i) p.grad[i] += self.grad[i] * self.value[i];
  });
}

Tensor mean_rows(const Tensor& x) {
  require_2d(x, "mean_rows");
  const std::size_t n = x.rows();
  const std::size_t d = x.cols();
  if (n == 0) throw ConfigError("mean_rows: input has no rows");
  std::vector<double> out(d, 0.0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < d; ++j) out[j] += x.value()[i * d + j];
  for (double& v : out) v /= static_cast<double>(n);
  return make_op("mean_rows", {1, d}, std::move(out), {x}, [n, d](TensorNode& self) {
    TensorNode& p = *self.parents[0];
    if (!p.requires_grad) return;
    const double inv = 1.0 / static_cast<double>(n);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < d; ++j) p.grad[i * d + j] += self.grad[j] * inv;
  });
}

Tensor l2_normalize_rows(const Tensor& x, double eps) {
  require_2d(x, "l2_normalize_rows");
  if (!(eps > 0.0)) throw ConfigError("l2_normalize_rows: eps must be positive");
  const std::size_t n = x.rows();
  const std::size_t d = x.cols();
  std::vector<double> out(x.size());
  std::vector<double> inv_norm(n);
  for (std::size_t i = 0; i < n; ++i) {
    double sq = 0.0;
    for (std::size_t j = 0; j < d; ++j) {
      const double v = x.value()[i * d + j];
      sq += v * v;
    }
    inv_norm[i] = 1.0 / std::sqrt(sq + eps);
    for (std::size_t j = 0; j < d; ++j) out[i * d + j] = x.value()[i * d + j] * inv_norm[i];
  }
  return make_op("l2_normalize_rows", x.shape(), std::move(out), {x},
                 [n, d, inv_norm = std::move(inv_norm)](TensorNode& self) {
                   TensorNode& p = *self.parents[0];
                   if (!p.requires_grad) return;
                   for (std::size_t i = 0; i < n; ++i) {
                     double dot = 0.0;
                     for (std::size_t j = 0; j < d; ++j)
                       dot += self.grad[i * d + j] * self.value[i * d + j];
                     for (std::size_t j = 0; j < d; ++j)
                       p.grad[i * d + j] +=
                           (self.grad[i * d + j] - self.value[i * d + j] * dot) * inv_norm[i];
                   }
                 });
}

Tensor scale_by(const Tensor& x, const Tensor& s) {
  if (s.size() != 1) throw ConfigError("scale_by: scale must hold exactly one element");
  const double c = s.value()[0];
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x.value()[i] * c;
  return make_op("scale_by", x.shape(), std::move(out), {x, s}, [c](TensorNode& self) {
    TensorNode& px = *self.parents[0];
    TensorNode& ps = *self.parents[1];
    if (px.requires_grad)
      for (std::size_t i = 0; i < self.grad.size(); ++i) px.grad[i] += self.grad[i] * c;
    if (ps.requires_grad) {
      double acc = 0.0;
      for (std::size_t i = 0; i < self.grad.size(); ++i) acc += self.grad[i] * px.value[i];
      ps.grad[0] += acc;
    }
  });
}

// --- losses ----------------------------------------------------------------

void FocalLossConfig::validate() const {
  if (!(alpha > 0.0 && alpha < 1.0)) throw ConfigError("focal alpha must lie in (0, 1)");
  if (gamma < 0.0) throw ConfigError("focal gamma must be >= 0");
}

Tensor focal_loss(const Tensor& p, const Tensor& y, const Tensor& mask, const FocalLossConfig& cfg) {
  cfg.validate();
  require_same_shape(p, y, "focal_loss");
  require_same_shape(p, mask, "focal_loss");
  if (y.requires_grad() || mask.requires_grad()) {
    throw DataError("focal loss labels and mask must not require grad");
  }
  constexpr double kEps = 1e-7;
  double mask_sum = 0.0;
  for (double m : mask.value()) {
    if (m != 0.0 && m != 1.0) throw DataError("focal loss mask must be binary");
    mask_sum += m;
  }
  if (mask_sum == 0.0) throw DataError("focal loss mask is all zero; average undefined");
  const double denom = cfg.strict_nm_normalization ? static_cast<double>(p.size()) : mask_sum;

  const std::size_t n = p.size();
  std::vector<double> dldp(n, 0.0);
  double loss = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    if (mask.value()[i] == 0.0) continue;
    const double raw = p.value()[i];
    const double pc = std::clamp(raw, kEps, 1.0 - kEps);
    const double yv = y.value()[i];
    if (yv != 0.0 && yv != 1.0) throw DataError("focal loss labels must be binary");
    const bool clamped = raw < kEps || raw > 1.0 - kEps;
    if (yv == 1.0) {
      const double mod = cfg.gamma == 0.0 ? 1.0 : std::pow(1.0 - pc, cfg.gamma);
      loss -= cfg.alpha * mod * std::log(pc);
      if (!clamped) {
        double deriv = mod / pc;
        if (cfg.gamma != 0.0) {
          deriv += -cfg.gamma * std::pow(1.0 - pc, cfg.gamma - 1.0) * std::log(pc);
        }
        dldp[i] = -cfg.alpha * deriv / denom;
      }
    } else {
      const double mod = cfg.gamma == 0.0 ? 1.0 : std::pow(pc, cfg.gamma);
      loss -= (1.0 - cfg.alpha) * mod * std::log(1.0 - pc);
      if (!clamped) {
        double deriv = -mod / (1.0 - pc);
        if (cfg.gamma != 0.0) {
          deriv += cfg.gamma * std::pow(pc, cfg.gamma - 1.0) * std::log(1.0 - pc);
        }
        dldp[i] = -(1.0 - cfg.alpha) * deriv / denom;
      }
    }
  }
  loss /= denom;
  return make_op("focal_loss", {1}, {loss}, {p, y, mask},
                 [dldp = std::move(dldp)](TensorNode& self) {
                   TensorNode& pp = *self.parents[0];
                   if (!pp.requires_grad) return;
                   for (std::size_t i = 0; i < dldp.size(); ++i) {
                     pp.grad[i] += self.grad[0] * dldp[i];
                   }
                 });
}

Tensor masked_cross_entropy(const Tensor& logits, const std::vector<std::int32_t>& targets,
                            const std::vector<std::uint8_t>& error_mask) {
  require_2d(logits, "masked_cross_entropy");
  const std::size_t n = logits.rows();
  const std::size_t v = logits.cols();
  if (targets.size() != n || error_mask.size() != n) {
    throw DataError("shape mismatch in masked_cross_entropy");
  }
  std::size_t active = 0;
  for (std::uint8_t m : error_mask) active += m != 0 ? 1 : 0;
  if (active == 0) throw DataError("cross entropy mask is all zero; average undefined");

  std::vector<double> probs;  // softmax rows for masked positions only
  probs.assign(logits.size(), 0.0);
  double loss = 0.0;
  for (std::size_t r = 0; r < n; ++r) {
    if (error_mask[r] == 0) continue;
    const std::int32_t t = targets[r];
    if (t < 0 || static_cast<std::size_t>(t) >= v) {
      throw DataError("cross entropy target out of range");
    }
    double maxv = -1e300;
    for (std::size_t c = 0; c < v; ++c) maxv = std::max(maxv, logits.value()[r * v + c]);
    double z = 0.0;
    for (std::size_t c = 0; c < v; ++c) {
      const double e = std::exp(logits.value()[r * v + c] - maxv);
      probs[r * v + c] = e;
      z += e;
    }
    for (std::size_t c = 0; c < v; ++c) probs[r * v + c] /= z;
    loss -= std::log(std::max(probs[r * v + static_cast<std::size_t>(t)], 1e-300));
  }
  loss /= static_cast<double>(active);
  return make_op("masked_cross_entropy", {1}, {loss}, {logits},
                 [probs = std::move(probs), targets, error_mask, active, n, v](TensorNode& self) {
                   TensorNode& p = *self.parents[0];
                   if (!p.requires_grad) return;
                   const double inv = self.grad[0] / static_cast<double>(active);
                   for (std::size_t r = 0; r < n; ++r) {
                     if (error_mask[r] == 0) continue;
                     for (std::size_t c = 0; c < v; ++c) {
                       double g = probs[r * v + c];
                       if (c == static_cast<std::size_t>(targets[r])) g -= 1.0;
                       p.grad[r * v + c] += inv * g;
                     }
                   }
                 });
}

}  // namespace radcorrect
