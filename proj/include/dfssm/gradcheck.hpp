#pragma once

#include <functional>
#include <string>
#include <vector>

#include "dfssm/ops.hpp"
#include "dfssm/rng.hpp"
#include "dfssm/tensor.hpp"

namespace dfssm {

// Central finite-difference check of reverse-mode gradients. The oracle side
// only ever evaluates the forward function, so it is independent of every
// backward rule it verifies.
//
// `f` maps the listed inputs to a scalar. The error is max-norm relative per
// input tensor: max_i |a_i - fd_i| / max(max|a|, max|fd|, floor), which keeps
// FD rounding noise on near-zero components from dominating the verdict. The
// denominator is additionally floored at 1% of the largest gradient across
// all checked inputs, so tensors whose true gradient is negligible relative
// to the composite do not fail on FD noise alone.

template <typename T>
struct GradCheckResult {
    double worst_rel = 0.0;
    std::string where;
    bool pass(double tol) const { return worst_rel <= tol; }
};

template <typename T>
GradCheckResult<T> gradcheck(const std::function<Tensor<T>()>& f,
                             const std::vector<Tensor<T>>& inputs, double eps, double floor) {
    GradCheckResult<T> res;
    for (auto& in : inputs) const_cast<Tensor<T>&>(in).zero_grad();
    Tensor<T> loss = f();
    backward(loss);

    std::vector<std::vector<T>> analytic;
    analytic.reserve(inputs.size());
    for (auto& in : inputs) analytic.push_back(const_cast<Tensor<T>&>(in).grad());

    std::vector<std::vector<double>> fd_all(inputs.size());
    for (std::size_t k = 0; k < inputs.size(); ++k) {
        Tensor<T>& in = const_cast<Tensor<T>&>(inputs[k]);
        fd_all[k].resize(in.data().size());
        for (std::size_t i = 0; i < in.data().size(); ++i) {
            const T orig = in.data()[i];
            in.data()[i] = orig + static_cast<T>(eps);
            double fp;
            {
                NoGradGuard ng;
                fp = static_cast<double>(f().item());
            }
            in.data()[i] = orig - static_cast<T>(eps);
            double fm;
            {
                NoGradGuard ng;
                fm = static_cast<double>(f().item());
            }
            in.data()[i] = orig;
            fd_all[k][i] = (fp - fm) / (2.0 * eps);
        }
    }
    double global_scale = 0.0;
    for (std::size_t k = 0; k < inputs.size(); ++k)
        for (std::size_t i = 0; i < fd_all[k].size(); ++i) {
            global_scale = std::max(global_scale, std::abs(fd_all[k][i]));
            global_scale = std::max(global_scale, std::abs(static_cast<double>(analytic[k][i])));
        }
    for (std::size_t k = 0; k < inputs.size(); ++k) {
        double scale = std::max(floor, 0.01 * global_scale);
        for (std::size_t i = 0; i < fd_all[k].size(); ++i) {
            scale = std::max(scale, std::abs(fd_all[k][i]));
            scale = std::max(scale, std::abs(static_cast<double>(analytic[k][i])));
        }
        for (std::size_t i = 0; i < fd_all[k].size(); ++i) {
            const double rel = std::abs(static_cast<double>(analytic[k][i]) - fd_all[k][i]) / scale;
            if (rel > res.worst_rel) {
                res.worst_rel = rel;
                res.where = "input " + std::to_string(k) + " elem " + std::to_string(i);
            }
        }
    }
    return res;
}

// Deterministic pseudo-random weights turn a tensor-valued function into a
// scalar probe; a plain sum would miss transposition-style bugs.
template <typename T>
Tensor<T> weighted_probe(const Tensor<T>& y, std::uint64_t salt) {
    Rng rng(splitmix64(salt ^ 0x9e3779b9ULL), 17);
    Tensor<T> w = Tensor<T>::zeros(y.shape());
    for (auto& v : w.data()) v = static_cast<T>(rng.uniform(-1.0, 1.0));
    return sum_all(mul(y, w));
}

template <typename T>
Tensor<T> random_tensor(Shape s, Rng& rng, double scale = 1.0, bool requires_grad = false) {
    Tensor<T> t = Tensor<T>::zeros(s, requires_grad);
    for (auto& v : t.data()) v = static_cast<T>(rng.normal() * scale);
    return t;
}

template <typename T>
Tensor<T> uniform_tensor(Shape s, Rng& rng, double lo, double hi, bool requires_grad = false) {
    Tensor<T> t = Tensor<T>::zeros(s, requires_grad);
    for (auto& v : t.data()) v = static_cast<T>(rng.uniform(lo, hi));
    return t;
}

inline double default_fd_eps(bool is_double) { return is_double ? 1e-6 : 1e-3; }
inline double default_fd_floor(bool is_double) { return is_double ? 1e-6 : 1e-3; }

}  // namespace dfssm
