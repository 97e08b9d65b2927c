#pragma once

// Bias-corrected Adam over flat parameter groups (descent convention;
// callers maximizing an objective negate their gradients), plus the small
// per-estimate update rules used when optimizing posterior parameters
// directly (those ascend).

#include <vector>

#include "core.hpp"

namespace amortize {

struct AdamConfig {
    double lr = 2e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

// One state per parameter group; groups are registered in a fixed order.
struct AdamState {
    AdamConfig cfg;
    std::vector<Vec> m;
    std::vector<Vec> v;
    std::uint64_t step_count = 0;

    void register_group(std::size_t n) {
        m.emplace_back(n, 0.0);
        v.emplace_back(n, 0.0);
    }
};

// Applies one descent step to every registered group. `params` and
// `grads` must match the registration order and shapes. Non-finite
// gradients are rejected before any state is touched.
inline void adam_step(std::vector<Vec*> params, const std::vector<const Vec*>& grads, AdamState& st) {
    check_dim(params.size() == grads.size() && params.size() == st.m.size(), "adam groups");
    for (std::size_t g = 0; g < params.size(); ++g) {
        check_dim(params[g]->size() == st.m[g].size() && grads[g]->size() == st.m[g].size(), "adam shapes");
        if (!all_finite(*grads[g]))
            throw std::runtime_error("adam_step: non-finite gradient in group " + std::to_string(g));
    }
    st.step_count += 1;
    const double t = static_cast<double>(st.step_count);
    const double c1 = 1.0 - std::pow(st.cfg.beta1, t);
    const double c2 = 1.0 - std::pow(st.cfg.beta2, t);
    for (std::size_t g = 0; g < params.size(); ++g) {
        Vec& p = *params[g];
        const Vec& gr = *grads[g];
        Vec& m = st.m[g];
        Vec& v = st.v[g];
        for (std::size_t i = 0; i < p.size(); ++i) {
            m[i] = st.cfg.beta1 * m[i] + (1.0 - st.cfg.beta1) * gr[i];
            v[i] = st.cfg.beta2 * v[i] + (1.0 - st.cfg.beta2) * gr[i] * gr[i];
            double mhat = m[i] / c1;
            double vhat = v[i] / c2;
            p[i] -= st.cfg.lr * mhat / (std::sqrt(vhat) + st.cfg.eps);
        }
    }
}

enum class OptimKind { Sgd, Momentum, RmsProp, Adam };

// Gradient-ascent update rules on a flat vector (posterior parameters).
// Momentum uses the classical heavy-ball accumulator; RMSProp and Adam
// use their usual decay constants.
struct AscentState {
    OptimKind kind = OptimKind::Sgd;
    double lr = 0.1;
    double momentum = 0.9;
    double rms_decay = 0.9;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    Vec buf1;  // momentum velocity / Adam m
    Vec buf2;  // RMSProp accumulator / Adam v
    std::uint64_t step_count = 0;

    AscentState() = default;
    AscentState(OptimKind k, double lr_, std::size_t n) : kind(k), lr(lr_), buf1(n, 0.0), buf2(n, 0.0) {}
};

inline void ascent_step(Vec& x, const Vec& grad, AscentState& st) {
    check_dim(x.size() == grad.size() && x.size() == st.buf1.size(), "ascent shapes");
    st.step_count += 1;
    switch (st.kind) {
        case OptimKind::Sgd:
            for (std::size_t i = 0; i < x.size(); ++i) x[i] += st.lr * grad[i];
            break;
        case OptimKind::Momentum:
            for (std::size_t i = 0; i < x.size(); ++i) {
                st.buf1[i] = st.momentum * st.buf1[i] + grad[i];
                x[i] += st.lr * st.buf1[i];
            }
            break;
        case OptimKind::RmsProp:
            for (std::size_t i = 0; i < x.size(); ++i) {
                st.buf2[i] = st.rms_decay * st.buf2[i] + (1.0 - st.rms_decay) * grad[i] * grad[i];
                x[i] += st.lr * grad[i] / (std::sqrt(st.buf2[i]) + st.eps);
            }
            break;
        case OptimKind::Adam: {
            const double t = static_cast<double>(st.step_count);
            const double c1 = 1.0 - std::pow(st.beta1, t);
            const double c2 = 1.0 - std::pow(st.beta2, t);
            for (std::size_t i = 0; i < x.size(); ++i) {
                st.buf1[i] = st.beta1 * st.buf1[i] + (1.0 - st.beta1) * grad[i];
                st.buf2[i] = st.beta2 * st.buf2[i] + (1.0 - st.beta2) * grad[i] * grad[i];
                x[i] += st.lr * (st.buf1[i] / c1) / (std::sqrt(st.buf2[i] / c2) + st.eps);
            }
            break;
        }
    }
}

}  // namespace amortize
