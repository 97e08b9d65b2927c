#pragma once

// Diagonal Gaussians and the log-density / divergence arithmetic used
// everywhere. Variances are carried as log-variance (clamped to
// [-20, 20]) so optimization over them stays unconstrained.

#include <numbers>

#include "core.hpp"

namespace amortize {

constexpr double kLog2Pi = 1.8378770664093453;  // log(2*pi)

struct DiagGaussian {
    Vec mean;
    Vec log_var;

    DiagGaussian() = default;
    DiagGaussian(Vec m, Vec lv) : mean(std::move(m)), log_var(std::move(lv)) {
        check_dim(mean.size() == log_var.size(), "DiagGaussian");
    }

    static DiagGaussian standard(std::size_t n) { return DiagGaussian(Vec(n, 0.0), Vec(n, 0.0)); }

    std::size_t dim() const { return mean.size(); }

    Vec stddev() const {
        Vec s(mean.size());
        for (std::size_t i = 0; i < s.size(); ++i) s[i] = std::exp(0.5 * log_var[i]);
        return s;
    }

    Vec variance() const {
        Vec s(mean.size());
        for (std::size_t i = 0; i < s.size(); ++i) s[i] = std::exp(log_var[i]);
        return s;
    }

    void clamp_log_var() {
        for (auto& lv : log_var) lv = clamp(lv, kLogVarMin, kLogVarMax);
    }
};

// z = mean + exp(log_var / 2) * noise
inline Vec reparameterize(const DiagGaussian& q, const Vec& noise) {
    check_dim(noise.size() == q.dim(), "reparameterize");
    Vec z(q.dim());
    for (std::size_t i = 0; i < z.size(); ++i) z[i] = q.mean[i] + std::exp(0.5 * q.log_var[i]) * noise[i];
    return z;
}

// sum_j x_j log m_j + (1-x_j) log(1-m_j); callers guarantee m in (0,1).
inline double log_prob_bernoulli(const Vec& x, const Vec& mean) {
    check_dim(x.size() == mean.size(), "log_prob_bernoulli");
    double s = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i)
        s += x[i] * std::log(mean[i]) + (1.0 - x[i]) * std::log(1.0 - mean[i]);
    return s;
}

inline double log_prob_diag_gaussian(const Vec& x, const DiagGaussian& d) {
    check_dim(x.size() == d.dim(), "log_prob_diag_gaussian");
    double s = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        double diff = x[i] - d.mean[i];
        s += -0.5 * (kLog2Pi + d.log_var[i] + diff * diff * std::exp(-d.log_var[i]));
    }
    return s;
}

// KL(q || p) in closed form; >= 0, zero iff q == p componentwise.
inline double kl_diag_gaussians(const DiagGaussian& q, const DiagGaussian& p) {
    check_dim(q.dim() == p.dim(), "kl_diag_gaussians");
    double s = 0.0;
    for (std::size_t i = 0; i < q.dim(); ++i) {
        double vr = std::exp(q.log_var[i] - p.log_var[i]);
        double diff = q.mean[i] - p.mean[i];
        s += 0.5 * (vr + diff * diff * std::exp(-p.log_var[i]) - 1.0 + p.log_var[i] - q.log_var[i]);
    }
    return s;
}

}  // namespace amortize
