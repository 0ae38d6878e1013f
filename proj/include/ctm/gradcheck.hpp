#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "ctm/tensor.hpp"

namespace ctm {

// Central-difference check of a scalar-valued tensor function at x (f64).
// Returns max over coordinates of |analytic - numeric| / max(|a|,|n|,1e-8).
// f must be pure; callers keep inputs away from relu/maxpool kinks.
inline double gradcheck(const std::function<Tensor<double>(const Tensor<double>&)>& f,
                        Tensor<double>& x, double h = 1e-4) {
    x.set_requires_grad(true);
    std::vector<double> analytic(static_cast<size_t>(x.numel()), 0.0);
    {
        Tape<double> tape;
        TapeScope<double> scope(tape);
        Tensor<double> loss = f(x);
        // a loss that never touched x has zero gradient everywhere
        if (loss.requires_grad()) {
            tape.backward(loss);
            analytic.assign(x.grad().begin(), x.grad().end());
        }
    }
    double max_rel = 0.0;
    auto xd = x.data();
    for (std::int64_t i = 0; i < x.numel(); ++i) {
        const double orig = xd[i];
        xd[i] = orig + h;
        const double fp = f(x).item();
        xd[i] = orig - h;
        const double fm = f(x).item();
        xd[i] = orig;
        const double numeric = (fp - fm) / (2.0 * h);
        const double a = analytic[static_cast<size_t>(i)];
        const double rel =
            std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), 1e-8});
        max_rel = std::max(max_rel, rel);
    }
    return max_rel;
}

struct GradCheckResult {
    std::string name;
    double max_rel_err = 0.0;
};

// Finite-difference sweep over every differentiable primitive plus the
// composed episode graph. Defined in gradcheck_suite.cpp.
std::vector<GradCheckResult> run_gradcheck_suite();

}  // namespace ctm
