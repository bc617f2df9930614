#pragma once

// Central-difference gradient verification. The numeric side only ever calls
// the forward function, so it stays independent of the tape's backward rules.

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "seqctl/tensor.hpp"

namespace seqctl {

// Max over all parameter entries of |analytic - central difference| /
// max(|analytic|, |numeric|, 1e-8). `f` must deterministically build a scalar
// loss from the given parameters.
inline double grad_check(const std::function<Tensor()>& f, std::vector<Tensor> params,
                         double eps = 1e-5) {
    check(eps > 0.0, "grad_check: eps must be positive");
    for (auto& p : params) {
        p.set_requires_grad(true);
        p.ensure_grad();
        p.zero_grad();
    }

    std::vector<std::vector<double>> analytic;
    {
        Tape tape;
        TapeScope scope(tape);
        Tensor loss = f();
        check(std::isfinite(loss.value()), "grad_check: non-finite loss at base point");
        tape.backward(loss);
        for (auto& p : params) {
            p.ensure_grad();
            analytic.push_back(p.grad());
        }
    }

    double max_rel = 0.0;
    NoTapeScope no_tape;
    for (size_t pi = 0; pi < params.size(); ++pi) {
        auto& vals = params[pi].data();
        for (size_t i = 0; i < vals.size(); ++i) {
            const double orig = vals[i];
            vals[i] = orig + eps;
            const double fp = f().value();
            vals[i] = orig - eps;
            const double fm = f().value();
            vals[i] = orig;
            if (!std::isfinite(fp) || !std::isfinite(fm)) {
                throw std::runtime_error("grad_check: non-finite value at parameter " +
                                         std::to_string(pi) + " entry " + std::to_string(i));
            }
            const double numeric = (fp - fm) / (2.0 * eps);
            const double a = analytic[pi][i];
            const double denom = std::max({std::abs(a), std::abs(numeric), 1e-8});
            max_rel = std::max(max_rel, std::abs(a - numeric) / denom);
        }
    }
    return max_rel;
}

}  // namespace seqctl
