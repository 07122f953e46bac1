#pragma once

#include <cstdint>
#include <vector>

#include "radcorrect/nn.hpp"

namespace radcorrect {

// base_lr 3e-4 with cosine annealing over total_steps; betas/eps are the
// usual AdamW defaults.
struct OptimizerConfig {
  double base_lr = 3e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;
  std::int64_t total_steps = 0;  // 0 disables the schedule

  void validate() const;
};

// base_lr * 0.5 * (1 + cos(pi * step / total_steps))
double cosine_lr(std::int64_t step, std::int64_t total_steps, double base_lr);

// Decoupled weight decay Adam over a fixed parameter list. Moments are stored
// per parameter entry; gradients are read from the tensors themselves.
class AdamW {
 public:
  AdamW(std::vector<Tensor> params, OptimizerConfig cfg);
  explicit AdamW(const ParamSet& params, OptimizerConfig cfg = {});

  // One update with an explicit learning rate.
  void step(double lr);
  // One update at the scheduled rate for the current step count.
  void step();

  double current_lr() const;
  std::int64_t step_count() const { return step_count_; }
  const OptimizerConfig& config() const { return cfg_; }

  // Moment access for checkpointing.
  const std::vector<std::vector<double>>& first_moments() const { return m_; }
  const std::vector<std::vector<double>>& second_moments() const { return v_; }
  void restore(std::int64_t step_count, std::vector<std::vector<double>> m,
               std::vector<std::vector<double>> v);

 private:
  std::vector<Tensor> params_;
  OptimizerConfig cfg_;
  std::vector<std::vector<double>> m_;
  std::vector<std::vector<double>> v_;
  std::int64_t step_count_ = 0;
};

}  // namespace radcorrect
