#pragma once

#include <cmath>
#include <functional>

#include "eyepurify/tensor_ops.hpp"

namespace eyepurify {

// Central-difference verification of reverse-mode gradients. The callable
// must rebuild its graph from the passed leaves on every invocation and
// return a scalar. Returns the max over checked elements of
// |analytic - numeric| / max(|analytic|, |numeric|, 1e-8).
// Non-finite objective values or gradients raise NumericError.
template <typename T>
double grad_check(const std::function<Tensor<T>(std::vector<Tensor<T>>&)>& fn,
                  std::vector<Tensor<T>>& inputs, double eps) {
    if (!(eps > 0)) throw std::invalid_argument("grad_check: eps must be > 0");

    // Stale gradients from earlier backward passes through the same leaves
    // would contaminate the analytic values.
    for (auto& in : inputs) in.zero_grad();

    Tensor<T> root = fn(inputs);
    if (!std::isfinite(static_cast<double>(root.value()))) {
        throw NumericError("grad_check: objective is not finite");
    }
    backward(root);

    std::vector<std::vector<T>> analytic;
    for (auto& in : inputs) {
        if (in.requires_grad() && in.has_grad()) {
            analytic.push_back(in.grad());
        } else {
            // Unreached leaves have an all-zero gradient.
            analytic.emplace_back(static_cast<size_t>(in.numel()), T(0));
        }
    }

    double max_err = 0.0;
    NoGradGuard no_grad;
    for (size_t t = 0; t < inputs.size(); ++t) {
        if (!inputs[t].requires_grad()) continue;
        auto& xs = inputs[t].raw_data();
        for (size_t i = 0; i < xs.size(); ++i) {
            T saved = xs[i];
            xs[i] = saved + static_cast<T>(eps);
            double f_plus = static_cast<double>(fn(inputs).value());
            xs[i] = saved - static_cast<T>(eps);
            double f_minus = static_cast<double>(fn(inputs).value());
            xs[i] = saved;
            if (!std::isfinite(f_plus) || !std::isfinite(f_minus)) {
                throw NumericError("grad_check: objective is not finite under perturbation");
            }
            double numeric = (f_plus - f_minus) / (2.0 * eps);
            double a = static_cast<double>(analytic[t][i]);
            if (!std::isfinite(a)) throw NumericError("grad_check: gradient is not finite");
            double denom = std::max({std::fabs(a), std::fabs(numeric), 1e-8});
            max_err = std::max(max_err, std::fabs(a - numeric) / denom);
        }
    }
    return max_err;
}

// Single-input convenience form.
template <typename T>
double grad_check(const std::function<Tensor<T>(Tensor<T>&)>& fn, Tensor<T>& x,
                  double eps) {
    std::vector<Tensor<T>> inputs{x};
    std::function<Tensor<T>(std::vector<Tensor<T>>&)> wrapped =
        [&fn](std::vector<Tensor<T>>& ins) { return fn(ins[0]); };
    return grad_check<T>(wrapped, inputs, eps);
}

}  // namespace eyepurify
