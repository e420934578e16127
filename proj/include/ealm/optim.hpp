#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "ealm/errors.hpp"
#include "ealm/tensor.hpp"

namespace ealm {

struct AdamWConfig {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.1;
};

// One decoupled-weight-decay update on a single parameter array. Kept as a
// free function so the recurrence is testable in isolation:
//   p *= (1 - lr*wd); m = b1*m + (1-b1)*g; v = b2*v + (1-b2)*g^2
//   p -= lr * (m / (1-b1^t)) / (sqrt(v / (1-b2^t)) + eps)
template <class Real>
void adamw_update(std::vector<Real>& p, const std::vector<Real>& g, std::vector<Real>& m,
                  std::vector<Real>& v, int64_t step, double lr, const AdamWConfig& cfg) {
    if (g.size() != p.size() || m.size() != p.size() || v.size() != p.size())
        throw UsageError("adamw_update: shape mismatch between parameter and state");
    const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(step));
    const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(step));
    for (size_t i = 0; i < p.size(); i++) {
        double pi = static_cast<double>(p[i]);
        double gi = static_cast<double>(g[i]);
        pi -= lr * cfg.weight_decay * pi;
        double mi = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * gi;
        double vi = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * gi * gi;
        m[i] = static_cast<Real>(mi);
        v[i] = static_cast<Real>(vi);
        pi -= lr * (mi / bc1) / (std::sqrt(vi / bc2) + cfg.eps);
        p[i] = static_cast<Real>(pi);
    }
}

// AdamW over a fixed parameter list. Frozen tensors must never be handed in;
// the constructor rejects anything without requires_grad. Parameters whose
// grad is absent at step() time are skipped entirely.
template <class Real>
class AdamW {
public:
    AdamW(std::vector<Tensor<Real>> params, AdamWConfig cfg = {})
        : params_(std::move(params)), cfg_(cfg) {
        m_.resize(params_.size());
        v_.resize(params_.size());
        for (size_t i = 0; i < params_.size(); i++) {
            if (!params_[i].requires_grad())
                throw UsageError("AdamW: frozen tensor '" + params_[i].name() +
                                 "' passed to optimizer");
            m_[i].assign(params_[i].size(), Real(0));
            v_[i].assign(params_[i].size(), Real(0));
        }
    }

    void step(double lr) {
        if (!(lr > 0)) throw UsageError("AdamW: lr must be positive");
        step_++;
        for (size_t i = 0; i < params_.size(); i++) {
            auto& p = params_[i];
            if (!p.has_grad()) continue;
            adamw_update(p.value(), p.grad(), m_[i], v_[i], step_, lr, cfg_);
        }
    }

    void zero_grad() {
        for (auto& p : params_) p.zero_grad();
    }

    int64_t step_count() const { return step_; }
    const AdamWConfig& config() const { return cfg_; }
    const std::vector<Tensor<Real>>& params() const { return params_; }

private:
    std::vector<Tensor<Real>> params_;
    std::vector<std::vector<Real>> m_, v_;
    int64_t step_ = 0;
    AdamWConfig cfg_;
};

// Warmup then stepped decay, driven by tokens seen:
// linear lr_start -> lr_max over warmup_tokens, then
// lr_max * decay_factor^floor((t - warmup) / decay_interval), floored at lr_end.
struct LrSchedule {
    double lr_start = 1e-6;
    double lr_max = 6e-4;
    double lr_end = 1e-6;
    int64_t warmup_tokens = 0;
    int64_t decay_interval_tokens = 0;  // 0 disables decay
    double decay_factor = 0.9;

    double at(int64_t tokens_seen) const {
        if (tokens_seen < 0) throw UsageError("LrSchedule: tokens_seen must be non-negative");
        if (tokens_seen < warmup_tokens) {
            double frac = static_cast<double>(tokens_seen) / static_cast<double>(warmup_tokens);
            return lr_start + (lr_max - lr_start) * frac;
        }
        double lr = lr_max;
        if (decay_interval_tokens > 0) {
            int64_t steps = (tokens_seen - warmup_tokens) / decay_interval_tokens;
            lr = lr_max * std::pow(decay_factor, static_cast<double>(steps));
        }
        return std::max(lr, lr_end);
    }
};

}  // namespace ealm
