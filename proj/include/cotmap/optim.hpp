// AdamW with decoupled weight decay and global gradient-norm clipping.
#pragma once

#include <cmath>
#include <stdexcept>
#include <vector>

#include "cotmap/tensor.hpp"

namespace cotmap {

struct AdamWConfig {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.0;
    double clip_norm = 1.0; // <= 0 disables clipping
};

// Scales all gradients by clip/norm when the global norm exceeds clip.
// Returns the pre-clip global norm. Direction is preserved and the norm
// never increases.
inline double clip_global_grad_norm(const std::vector<Tensor*>& params, double clip) {
    double sq = 0.0;
    for (const auto* p : params) {
        if (!p->has_grad()) continue;
        for (double g : p->grad()) sq += g * g;
    }
    const double norm = std::sqrt(sq);
    if (clip > 0.0 && norm > clip) {
        const double scale = clip / norm;
        for (auto* p : params) {
            if (!p->has_grad()) continue;
            for (double& g : p->ensure_grad()) g *= scale;
        }
    }
    return norm;
}

class AdamW {
public:
    explicit AdamW(AdamWConfig cfg = {}) : cfg_(cfg) {}

    const AdamWConfig& config() const { return cfg_; }
    void set_lr(double lr) { cfg_.lr = lr; }
    std::size_t step_count() const { return step_; }
    std::size_t skipped_steps() const { return skipped_; }
    double last_grad_norm() const { return last_norm_; }

    // One update over the parameter set. Clips the global gradient norm,
    // skips the whole step if any gradient is non-finite, applies decoupled
    // weight decay before the moment update. Clipping is folded into the
    // update as a gradient scale, so the pass structure is norm + update.
    void step(const std::vector<Tensor*>& params) {
        if (m_.empty()) {
            m_.resize(params.size());
            v_.resize(params.size());
            for (std::size_t i = 0; i < params.size(); ++i) {
                m_[i].assign(params[i]->numel(), 0.0);
                v_[i].assign(params[i]->numel(), 0.0);
            }
        }
        if (m_.size() != params.size())
            throw std::invalid_argument("AdamW::step: parameter set changed size");

        double sq = 0.0;
        for (const auto* p : params) {
            if (!p->has_grad()) continue;
            for (double g : p->grad()) sq += g * g;
        }
        const double norm = std::sqrt(sq);
        if (!std::isfinite(norm)) { // any NaN/Inf gradient poisons the norm
            ++skipped_;
            return;
        }
        last_norm_ = norm;
        const double scale = (cfg_.clip_norm > 0.0 && norm > cfg_.clip_norm)
                                 ? cfg_.clip_norm / norm
                                 : 1.0;

        ++step_;
        const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(step_));
        const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(step_));
        const double decay = 1.0 - cfg_.lr * cfg_.weight_decay;

        for (std::size_t i = 0; i < params.size(); ++i) {
            Tensor& p = *params[i];
            if (!p.has_grad()) continue;
            const auto& g = p.grad();
            auto& m = m_[i];
            auto& v = v_[i];
            double* w = p.data();
            for (std::size_t j = 0; j < g.size(); ++j) {
                const double gj = g[j] * scale;
                w[j] *= decay;
                m[j] = cfg_.beta1 * m[j] + (1.0 - cfg_.beta1) * gj;
                v[j] = cfg_.beta2 * v[j] + (1.0 - cfg_.beta2) * gj * gj;
                const double mhat = m[j] / bc1;
                const double vhat = v[j] / bc2;
                w[j] -= cfg_.lr * mhat / (std::sqrt(vhat) + cfg_.eps);
            }
        }
    }

    // Snapshot/restore of moments, for checkpoint-based recovery.
    struct State {
        std::vector<std::vector<double>> m, v;
        std::size_t step = 0;
    };
    State state() const { return {m_, v_, step_}; }
    void restore(const State& s) {
        m_ = s.m;
        v_ = s.v;
        step_ = s.step;
    }

private:
    AdamWConfig cfg_;
    std::vector<std::vector<double>> m_, v_;
    std::size_t step_ = 0;
    std::size_t skipped_ = 0;
    double last_norm_ = 0.0;
};

} // namespace cotmap
