#pragma once

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "refonce/tensor.hpp"

namespace refonce {

namespace detail {

template <typename T>
double error_floor(const std::vector<TensorT<T>>& leaves) {
    double g = 0;
    for (const auto& leaf : leaves)
        for (T v : leaf.grad()) g = std::max(g, std::abs(static_cast<double>(v)));
    return std::max(1e-6, 1e-3 * g);
}

}  // namespace detail

struct GradCheckResult {
    double max_rel_error = 0;
    std::size_t worst_leaf = 0;
    std::size_t worst_index = 0;
    double analytic = 0;
    double numeric = 0;
};

/// Compares reverse-mode gradients of the scalar returned by `f` with central
/// differences (f(x + h e_i) - f(x - h e_i)) / 2h for every coordinate of every
/// leaf. The relative error of a coordinate is |analytic - numeric| over
/// max(|analytic|, |numeric|, floor), where floor is 1e-3 times the largest
/// analytic gradient magnitude (at least 1e-6): coordinates whose gradient is
/// negligible against the rest are judged on absolute error at that scale. `f` must rebuild its graph from the current leaf
/// values on every call. Leaf gradients are zeroed before and left populated
/// after the check.
template <typename T, typename F>
GradCheckResult gradient_check(F&& f, std::vector<TensorT<T>> leaves, T h = T(1e-3)) {
    for (auto& leaf : leaves) {
        if (!leaf.is_leaf()) throw Error("gradient_check: inputs must be leaf tensors");
        leaf.set_requires_grad(true);
        leaf.zero_grad();
    }
    TensorT<T> y = f();
    if (y.numel() != 1) throw ShapeError("gradient_check: function must return a scalar");
    if (!std::isfinite(static_cast<double>(y.item()))) throw ValueError("gradient_check: non-finite function value");
    backward(y);

    const double floor = detail::error_floor(leaves);
    GradCheckResult res;
    NoGradGuard no_grad;
    for (std::size_t l = 0; l < leaves.size(); ++l) {
        auto& leaf = leaves[l];
        const std::vector<T> analytic = leaf.grad();
        auto data = leaf.data();
        for (std::size_t i = 0; i < data.size(); ++i) {
            const T saved = data[i];
            data[i] = saved + h;
            const double fp = static_cast<double>(f().item());
            data[i] = saved - h;
            const double fm = static_cast<double>(f().item());
            data[i] = saved;
            if (!std::isfinite(fp) || !std::isfinite(fm)) {
                throw ValueError("gradient_check: non-finite function value at coordinate " + std::to_string(i));
            }
            const double numeric = (fp - fm) / (2.0 * static_cast<double>(h));
            const double a = analytic[i];
            const double denom = std::max({std::abs(a), std::abs(numeric), floor});
            const double rel = std::abs(a - numeric) / denom;
            if (rel > res.max_rel_error) res = {rel, l, i, a, numeric};
        }
    }
    return res;
}

/// 32-bit reverse-mode gradients against central differences of the same
/// function evaluated in 64-bit. `f` takes the leaves as a vector and is called
/// with std::vector<TensorT<float>> and std::vector<TensorT<double>>.
template <typename F>
GradCheckResult gradient_check_mixed(F&& f, std::vector<TensorT<float>> leaves, double h = 1e-5) {
    for (auto& leaf : leaves) {
        if (!leaf.is_leaf()) throw Error("gradient_check_mixed: inputs must be leaf tensors");
        leaf.set_requires_grad(true);
        leaf.zero_grad();
    }
    TensorT<float> y = f(leaves);
    if (y.numel() != 1) throw ShapeError("gradient_check_mixed: function must return a scalar");
    if (!std::isfinite(y.item())) throw ValueError("gradient_check_mixed: non-finite function value");
    backward(y);

    std::vector<TensorT<double>> wide;
    for (const auto& leaf : leaves) wide.push_back(cast<double>(leaf));
    const double floor = detail::error_floor(leaves);
    GradCheckResult res;
    NoGradGuard no_grad;
    for (std::size_t l = 0; l < wide.size(); ++l) {
        const std::vector<float> analytic = leaves[l].grad();
        auto data = wide[l].data();
        for (std::size_t i = 0; i < data.size(); ++i) {
            const double saved = data[i];
            data[i] = saved + h;
            const double fp = f(wide).item();
            data[i] = saved - h;
            const double fm = f(wide).item();
            data[i] = saved;
            if (!std::isfinite(fp) || !std::isfinite(fm)) {
                throw ValueError("gradient_check_mixed: non-finite function value at coordinate " + std::to_string(i));
            }
            const double numeric = (fp - fm) / (2.0 * h);
            const double a = analytic[i];
            const double rel = std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), floor});
            if (rel > res.max_rel_error) res = {rel, l, i, a, numeric};
        }
    }
    return res;
}

/// Single-input form: `f` receives the perturbed tensor.
template <typename T, typename F>
double finite_difference_check(F&& f, TensorT<T> x, T h = T(1e-3)) {
    return gradient_check<T>([&] { return f(x); }, {x}, h).max_rel_error;
}

}  // namespace refonce
