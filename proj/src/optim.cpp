#include "radcorrect/optim.hpp"

#include <cmath>

namespace radcorrect {

void OptimizerConfig::validate() const {
  if (base_lr <= 0.0) throw ConfigError("base_lr must be positive");
  if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0)) {
    throw ConfigError("betas must lie in [0, 1)");
  }
  if (eps <= 0.0) throw ConfigError("eps must be positive");
  if (weight_decay < 0.0) throw ConfigError("weight_decay must be >= 0");
  if (total_steps < 0) throw ConfigError("total_steps must be >= 0");
}

double cosine_lr(std::int64_t step, std::int64_t total_steps, double base_lr) {
  if (total_steps == 0) throw ConfigError("cosine_lr requires total_steps > 0");
  if (step < 0 || step > total_steps) throw ConfigError("cosine_lr step out of range");
  const double frac = static_cast<double>(step) / static_cast<double>(total_steps);
  return base_lr * 0.5 * (1.0 + std::cos(M_PI * frac));
}

AdamW::AdamW(std::vector<Tensor> params, OptimizerConfig cfg)
    : params_(std::move(params)), cfg_(cfg) {
  cfg_.validate();
  m_.reserve(params_.size());
  v_.reserve(params_.size());
  for (const Tensor& p : params_) {
    if (!p.requires_grad()) throw ConfigError("optimizer parameter does not require grad");
    m_.emplace_back(p.size(), 0.0);
    v_.emplace_back(p.size(), 0.0);
  }
}

AdamW::AdamW(const ParamSet& params, OptimizerConfig cfg) : AdamW(params.tensors(), cfg) {}

double AdamW::current_lr() const {
  if (cfg_.total_steps == 0) return cfg_.base_lr;
  const std::int64_t s = std::min(step_count_, cfg_.total_steps);
  return cosine_lr(s, cfg_.total_steps, cfg_.base_lr);
}

void AdamW::step() { step(current_lr()); }

void AdamW::step(double lr) {
  if (!(lr >= 0.0) || !std::isfinite(lr)) throw ConfigError("learning rate must be finite and >= 0");
  ++step_count_;
  const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(step_count_));
  const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(step_count_));
  for (std::size_t i = 0; i < params_.size(); ++i) {
    Tensor& p = params_[i];
    const std::vector<double>& g = p.grad();
    std::vector<double>& value = p.mutable_value();
    std::vector<double>& m = m_[i];
    std::vector<double>& v = v_[i];
    for (std::size_t j = 0; j < value.size(); ++j) {
      const double gj = g[j];
      if (!std::isfinite(gj)) {
        throw NumericError("non-finite gradient in parameter " +
                           (p.name().empty() ? std::string("<unnamed>") : p.name()));
      }
      m[j] = cfg_.beta1 * m[j] + (1.0 - cfg_.beta1) * gj;
      v[j] = cfg_.beta2 * v[j] + (1.0 - cfg_.beta2) * gj * gj;
      const double mhat = m[j] / bc1;
      const double vhat = v[j] / bc2;
      value[j] -= lr * (mhat / (std::sqrt(vhat) + cfg_.eps) + cfg_.weight_decay * value[j]);
    }
  }
}

void AdamW::restore(std::int64_t step_count, std::vector<std::vector<double>> m,
                    std::vector<std::vector<double>> v) {
  if (m.size() != params_.size() || v.size() != params_.size()) {
    throw DataError("optimizer state size mismatch");
  }
  for (std::size_t i = 0; i < params_.size(); ++i) {
    if (m[i].size() != params_[i].size() || v[i].size() != params_[i].size()) {
      throw DataError("optimizer moment shape mismatch");
    }
  }
  step_count_ = step_count;
  m_ = std::move(m);
  v_ = std::move(v);
}

}  // namespace radcorrect
