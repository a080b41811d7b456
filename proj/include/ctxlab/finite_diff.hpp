#pragma once

#include <cmath>
#include <functional>
#include <map>
#include <stdexcept>
#include <string>

#include "ctxlab/autodiff.hpp"
#include "ctxlab/params.hpp"
#include "ctxlab/tensor.hpp"

namespace ctxlab {

// Central-difference gradient of a scalar function of the parameter store:
// (f(p + eps*e) - f(p - eps*e)) / (2 eps) per coordinate of every trainable
// parameter. Purely forward evaluations; shares nothing with the tape
// backward pass, which is exactly why it can check it.
inline std::map<std::string, Tensor> finite_difference_grad(
    const std::function<double(const ParamStore&)>& f, ParamStore& params, double eps) {
    if (!(eps > 0.0)) {
        throw std::invalid_argument("finite_difference_grad: eps must be positive");
    }
    std::map<std::string, Tensor> grads;
    for (auto& [id, p] : params) {
        if (!p.trainable) {
            continue;
        }
        Tensor g(p.tensor.shape);
        for (std::size_t i = 0; i < p.tensor.values.size(); ++i) {
            const double orig = p.tensor.values[i];
            p.tensor.values[i] = orig + eps;
            const double fp = f(params);
            p.tensor.values[i] = orig - eps;
            const double fm = f(params);
            p.tensor.values[i] = orig;
            if (!std::isfinite(fp) || !std::isfinite(fm)) {
                throw NumericsError("finite_difference:" + id + "[" + std::to_string(i) + "]");
            }
            g.values[i] = (fp - fm) / (2.0 * eps);
        }
        grads.emplace(id, std::move(g));
    }
    return grads;
}

// |a-b| <= tol * max(1, |a|, |b|). The unit floor keeps near-zero gradients
// from blowing up the ratio on central-difference truncation noise.
inline bool grad_close(double a, double b, double tol) {
    return std::abs(a - b) <= tol * std::max({1.0, std::abs(a), std::abs(b)});
}

}  // namespace ctxlab
