#pragma once

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "ske2grid/ops.hpp"
#include "ske2grid/tensor.hpp"

namespace ske2grid::core {

// Central-difference verification of reverse-mode gradients. f64 only: the
// f32 path shares every code template with f64, so checking the f64
// instantiation checks the arithmetic of both.

struct GradCheckFailure : Error {
    using Error::Error;
};

// Compares analytic gradients of `make_loss()` w.r.t. every tensor in
// `inputs` against central differences with step h. `make_loss` must be a
// pure function of the current values of `inputs`.
template <typename F>
double grad_check_params(F&& make_loss, const std::vector<TensorPtr<double>>& inputs,
                         double h = 1e-6) {
    for (const auto& t : inputs) {
        t->set_requires_grad(true);
        t->zero_grad();
    }
    auto loss = make_loss();
    if (loss->numel() != 1) throw GradCheckFailure("grad_check: loss must be scalar");
    loss->backward();

    std::vector<std::vector<double>> analytic;
    analytic.reserve(inputs.size());
    for (const auto& t : inputs) analytic.push_back(t->grad);

    double max_rel = 0.0;
    for (std::size_t ti = 0; ti < inputs.size(); ++ti) {
        auto& t = *inputs[ti];
        for (std::size_t i = 0; i < t.data.size(); ++i) {
            const double v = t.data[i];
            t.data[i] = v + h;
            const double lp = make_loss()->data[0];
            t.data[i] = v - h;
            const double lm = make_loss()->data[0];
            t.data[i] = v;
            const double numeric = (lp - lm) / (2.0 * h);
            const double a = analytic[ti][i];
            if (!std::isfinite(numeric) || !std::isfinite(a))
                throw GradCheckFailure("grad_check: non-finite value at input " +
                                       std::to_string(ti) + " coordinate " + std::to_string(i) +
                                       " (analytic=" + std::to_string(a) +
                                       ", numeric=" + std::to_string(numeric) + ")");
            const double rel = std::abs(a - numeric) / std::max(1.0, std::abs(numeric));
            if (rel > max_rel) max_rel = rel;
        }
    }
    return max_rel;
}

// Single-point form: checks d f(x) / d x at `point`.
inline double grad_check(const std::function<TensorPtr<double>(const TensorPtr<double>&)>& f,
                         const TensorPtr<double>& point, double h = 1e-6) {
    return grad_check_params([&]() { return f(point); }, {point}, h);
}

}  // namespace ske2grid::core
