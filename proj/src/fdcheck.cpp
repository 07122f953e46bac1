#include "radcorrect/fdcheck.hpp"

#include <cmath>

namespace radcorrect {

double finite_diff_check(const std::function<Tensor()>& build, const std::vector<Tensor>& params,
                         double h) {
  if (h <= 0.0) throw ConfigError("finite difference step must be positive");
  if (params.empty()) throw ConfigError("finite_diff_check needs at least one parameter");
  std::vector<Tensor> leaves = params;
  for (Tensor& p : leaves) {
    if (!p.requires_grad()) throw ConfigError("finite_diff_check parameter does not require grad");
    p.zero_grad();
  }

  const Tensor root = build();
  root.item();
  root.backward();
  std::vector<std::vector<double>> analytic;
  analytic.reserve(leaves.size());
  for (const Tensor& p : leaves) analytic.push_back(p.grad());

  double worst = 0.0;
  for (std::size_t pi = 0; pi < leaves.size(); ++pi) {
    std::vector<double>& value = leaves[pi].mutable_value();
    for (std::size_t j = 0; j < value.size(); ++j) {
      const double orig = value[j];
      value[j] = orig + h;
      const double up = build().item();
      value[j] = orig - h;
      const double down = build().item();
      value[j] = orig;
      const double fd = (up - down) / (2.0 * h);
      if (!std::isfinite(fd)) throw NumericError("non-finite finite-difference probe");
      const double ad = analytic[pi][j];
      const double denom = std::max({std::abs(fd), std::abs(ad), 1e-6});
      worst = std::max(worst, std::abs(fd - ad) / denom);
    }
  }
  return worst;
}

}  // namespace radcorrect
