#include "hmcface/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace hmc {

GradReport grad_check(const std::function<double(const std::vector<double>&)>& f,
                      const std::vector<double>& analytic_grad, std::vector<double> x,
                      double tolerance, double step) {
    GradReport report;
    report.tolerance = tolerance;

    if (analytic_grad.size() != x.size()) {
        report.passed = false;
        report.max_rel_error = std::numeric_limits<double>::infinity();
        report.note = "analytic gradient size mismatch";
        return report;
    }

    const double f0 = f(x);
    if (!std::isfinite(f0)) {
        report.passed = false;
        report.max_rel_error = std::numeric_limits<double>::infinity();
        report.note = "f(x) not finite at the evaluation point";
        return report;
    }

    double worst = 0.0;
    int64_t worst_i = -1;
    for (size_t i = 0; i < x.size(); ++i) {
        const double a = analytic_grad[i];
        if (!std::isfinite(a)) {
            report.passed = false;
            report.max_rel_error = std::numeric_limits<double>::infinity();
            report.worst_index = static_cast<int64_t>(i);
            report.note = "analytic gradient not finite at component " + std::to_string(i);
            return report;
        }
        const double keep = x[i];
        x[i] = keep + step;
        const double fp = f(x);
        x[i] = keep - step;
        const double fm = f(x);
        x[i] = keep;
        if (!std::isfinite(fp) || !std::isfinite(fm)) {
            report.passed = false;
            report.max_rel_error = std::numeric_limits<double>::infinity();
            report.worst_index = static_cast<int64_t>(i);
            report.note = "finite-difference probe not finite at component " + std::to_string(i);
            return report;
        }
        const double n = (fp - fm) / (2.0 * step);
        const double denom = std::max({std::fabs(a), std::fabs(n), 1e-8});
        const double rel = std::fabs(a - n) / denom;
        if (rel > worst) {
            worst = rel;
            worst_i = static_cast<int64_t>(i);
        }
    }
    report.max_rel_error = worst;
    report.worst_index = worst_i;
    report.passed = worst <= tolerance;
    return report;
}

GradReport grad_check(const std::function<ad::Var(const ad::Var&)>& f, const Tensor& x,
                      double tolerance, double step) {
    ad::Var xv = ad::leaf(x);
    ad::Var y = f(xv);
    if (y->value.size() != 1) throw HmcError("grad_check target must be scalar-valued");
    std::vector<ad::Var> grads = ad::gradients(y, {xv});
    const Tensor& g = grads[0]->value;
    std::vector<double> analytic(g.data(), g.data() + g.size());

    std::vector<int> shape = x.shape();
    auto value_fn = [&f, shape](const std::vector<double>& flat) {
        Tensor t(shape, flat);
        ad::Var out = f(ad::leaf(std::move(t)));
        return out->value[0];
    };
    std::vector<double> x0(x.data(), x.data() + x.size());
    return grad_check(value_fn, analytic, std::move(x0), tolerance, step);
}

}  // namespace hmc
