#pragma once

#include <functional>
#include <vector>

#include "radcorrect/tensor.hpp"

namespace radcorrect {

// Compares reverse-mode gradients against central finite differences for every
// coordinate of every listed parameter. build must construct a fresh scalar
// graph over those same leaves on each call. Returns the worst relative error
// |fd - ad| / max(|fd|, |ad|, 1e-6).
double finite_diff_check(const std::function<Tensor()>& build, const std::vector<Tensor>& params,
                         double h = 1e-5);

}  // namespace radcorrect
