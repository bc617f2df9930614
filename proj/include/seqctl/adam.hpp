#pragma once

// Bias-corrected Adam over a named parameter group. One optimizer owns one
// group; the step counter advances once per apply across the whole group.

#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include "seqctl/tensor.hpp"

namespace seqctl {

struct AdamConfig {
    double lr = 3e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

class Adam {
public:
    Adam() = default;
    Adam(std::vector<std::pair<std::string, Tensor>> params, AdamConfig cfg = {})
        : cfg_(cfg), params_(std::move(params)) {
        for (auto& [name, p] : params_) {
            slots_.push_back({std::vector<double>(p.data().size(), 0.0),
                              std::vector<double>(p.data().size(), 0.0)});
        }
    }

    i64 step_count() const { return t_; }
    const AdamConfig& config() const { return cfg_; }

    // Applies one update in place. A parameter with no grad buffer is treated
    // as zero gradient. Any non-finite gradient refuses the whole step.
    void step() {
        for (auto& [name, p] : params_) {
            if (!p.has_grad()) {
                continue;
            }
            for (double g : p.grad()) {
                if (!std::isfinite(g)) {
                    throw std::runtime_error("adam: non-finite gradient for parameter " + name);
                }
            }
        }
        t_ += 1;
        const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
        const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
        for (size_t k = 0; k < params_.size(); ++k) {
            Tensor& p = params_[k].second;
            auto& m = slots_[k].m;
            auto& v = slots_[k].v;
            auto& x = p.data();
            const bool has = p.has_grad();
            for (size_t i = 0; i < x.size(); ++i) {
                const double g = has ? p.grad()[i] : 0.0;
                m[i] = cfg_.beta1 * m[i] + (1.0 - cfg_.beta1) * g;
                v[i] = cfg_.beta2 * v[i] + (1.0 - cfg_.beta2) * g * g;
                const double mhat = m[i] / bc1;
                const double vhat = v[i] / bc2;
                x[i] -= cfg_.lr * mhat / (std::sqrt(vhat) + cfg_.eps);
            }
        }
    }

    void zero_grad() {
        for (auto& [name, p] : params_) {
            p.zero_grad();
        }
    }

    const std::vector<std::pair<std::string, Tensor>>& params() const { return params_; }
    std::vector<double>& moment1(size_t k) { return slots_[k].m; }
    std::vector<double>& moment2(size_t k) { return slots_[k].v; }

private:
    struct Slot {
        std::vector<double> m, v;
    };
    AdamConfig cfg_;
    std::vector<std::pair<std::string, Tensor>> params_;
    std::vector<Slot> slots_;
    i64 t_ = 0;
};

}  // namespace seqctl
