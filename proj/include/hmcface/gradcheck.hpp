#pragma once

#include <functional>
#include <string>
#include <vector>

#include "hmcface/autodiff.hpp"

namespace hmc {

struct GradReport {
    double max_rel_error = 0.0;
    int64_t worst_index = -1;
    bool passed = false;
    double tolerance = 0.0;
    std::string note;
};

// Central finite differences against a caller-supplied analytic gradient.
// Relative error denominator is max(|analytic|, |numeric|, 1e-8). Any
// non-finite value fails the check and names the offending component.
GradReport grad_check(const std::function<double(const std::vector<double>&)>& f,
                      const std::vector<double>& analytic_grad, std::vector<double> x,
                      double tolerance, double step = 1e-5);

// Convenience wrapper: the analytic gradient comes from the reverse pass of
// the same function.
GradReport grad_check(const std::function<ad::Var(const ad::Var&)>& f, const Tensor& x,
                      double tolerance, double step = 1e-5);

}  // namespace hmc
