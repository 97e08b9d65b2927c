#pragma once

// Test-only oracles: central finite differences, an independent MLP
// forward pass, explicit Jacobian assembly, and small dense linear
// algebra for the conjugate checks. None of these call into the code
// paths they verify.

#include <functional>
#include <vector>

#include "amortize/data_io.hpp"
#include "amortize/mlp.hpp"
#include "amortize/model.hpp"

namespace testutil {

using amortize::Mat;
using amortize::Vec;

constexpr double kFdStep = 1e-5;

// Central finite difference of a scalar function at x.
inline Vec finite_diff(const std::function<double(const Vec&)>& f, Vec x, double h = kFdStep) {
    Vec g(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) {
        double orig = x[i];
        x[i] = orig + h;
        double up = f(x);
        x[i] = orig - h;
        double down = f(x);
        x[i] = orig;
        g[i] = (up - down) / (2.0 * h);
    }
    return g;
}

inline double rel_err(const Vec& a, const Vec& b) {
    double num = 0.0, den = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        num += (a[i] - b[i]) * (a[i] - b[i]);
        den += b[i] * b[i];
    }
    return std::sqrt(num) / std::max(std::sqrt(den), 1e-12);
}

// Straight-line reimplementation of the MLP forward pass (no tapes, no
// shared kernels).
inline Vec reference_forward(const amortize::Mlp& net, const Vec& input) {
    Vec cur = input;
    for (const auto& l : net.layers) {
        Vec next(l.out_dim());
        for (std::size_t i = 0; i < l.out_dim(); ++i) {
            double s = l.b[i];
            for (std::size_t j = 0; j < l.in_dim(); ++j) s += l.w(i, j) * cur[j];
            next[i] = s;
        }
        if (l.normed) {
            double mean = 0, var = 0;
            for (double v : next) mean += v;
            mean /= next.size();
            for (double v : next) var += (v - mean) * (v - mean);
            var /= next.size();
            double sd = std::sqrt(std::max(var, amortize::kLayerNormVarFloor));
            for (std::size_t i = 0; i < next.size(); ++i)
                next[i] = l.ln_gain[i] * (next[i] - mean) / sd + l.ln_bias[i];
        }
        for (auto& v : next) {
            switch (l.act) {
                case amortize::Activation::Elu: v = v > 0 ? v : std::expm1(v); break;
                case amortize::Activation::Sigmoid: v = 1.0 / (1.0 + std::exp(-v)); break;
                default: break;
            }
        }
        cur = next;
    }
    return cur;
}

// Materializes the decoder Jacobian d(output)/d(input) column by column
// via finite differences of the forward pass; inputs must be small.
inline Mat numeric_jacobian(const amortize::Mlp& net, const Vec& input, double h = kFdStep) {
    Mat j(net.out_dim(), net.in_dim());
    Vec x = input;
    for (std::size_t c = 0; c < x.size(); ++c) {
        double orig = x[c];
        x[c] = orig + h;
        Vec up = amortize::mlp_forward(net, x);
        x[c] = orig - h;
        Vec down = amortize::mlp_forward(net, x);
        x[c] = orig;
        for (std::size_t r = 0; r < j.rows; ++r) j(r, c) = (up[r] - down[r]) / (2.0 * h);
    }
    return j;
}

// Gauss-Jordan inverse for tiny symmetric positive matrices.
inline Mat dense_inverse(Mat a) {
    const std::size_t n = a.rows;
    Mat inv(n, n);
    for (std::size_t i = 0; i < n; ++i) inv(i, i) = 1.0;
    for (std::size_t col = 0; col < n; ++col) {
        std::size_t piv = col;
        for (std::size_t r = col + 1; r < n; ++r)
            if (std::abs(a(r, col)) > std::abs(a(piv, col))) piv = r;
        for (std::size_t c = 0; c < n; ++c) {
            std::swap(a.a[piv * n + c], a.a[col * n + c]);
            std::swap(inv.a[piv * n + c], inv.a[col * n + c]);
        }
        double d = a(col, col);
        for (std::size_t c = 0; c < n; ++c) {
            a(col, c) /= d;
            inv(col, c) /= d;
        }
        for (std::size_t r = 0; r < n; ++r) {
            if (r == col) continue;
            double f = a(r, col);
            for (std::size_t c = 0; c < n; ++c) {
                a(r, c) -= f * a(col, c);
                inv(r, c) -= f * inv(col, c);
            }
        }
    }
    return inv;
}

// Flattens a posterior estimate to a vector and back, for finite
// differencing the bound in parameter space.
inline Vec flatten_lambda(const amortize::PosteriorEstimate& e) {
    Vec out;
    for (const auto& l : e.levels) {
        out.insert(out.end(), l.mean.begin(), l.mean.end());
        if (!e.point) out.insert(out.end(), l.log_var.begin(), l.log_var.end());
    }
    return out;
}

inline amortize::PosteriorEstimate unflatten_lambda(const amortize::PosteriorEstimate& shape,
                                                    const Vec& flat) {
    amortize::PosteriorEstimate e = shape;
    std::size_t pos = 0;
    for (auto& l : e.levels) {
        for (auto& v : l.mean) v = flat[pos++];
        if (!e.point)
            for (auto& v : l.log_var) v = flat[pos++];
    }
    return e;
}

inline Vec flatten_grads(const amortize::GradientSignals& g, bool point) {
    Vec out;
    for (std::size_t il = 0; il < g.d_mean.size(); ++il) {
        out.insert(out.end(), g.d_mean[il].begin(), g.d_mean[il].end());
        if (!point) out.insert(out.end(), g.d_log_var[il].begin(), g.d_log_var[il].end());
    }
    return out;
}

}  // namespace testutil
