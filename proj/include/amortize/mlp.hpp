#pragma once

// Multilayer perceptrons with hand-written forward/backward passes.
// Jacobians are never materialized; backward computes vector-Jacobian
// products from a tape recorded during forward.

#include <functional>
#include <vector>

#include "core.hpp"
#include "rng.hpp"

namespace amortize {

enum class Activation { Identity, Elu, Sigmoid };

constexpr double kLayerNormVarFloor = 1e-5;

inline double elu(double u) { return u > 0.0 ? u : std::expm1(u); }
inline double elu_deriv(double u) { return u > 0.0 ? 1.0 : std::exp(u); }
inline double sigmoid(double u) { return 1.0 / (1.0 + std::exp(-u)); }

inline double activate(Activation act, double u) {
    switch (act) {
        case Activation::Elu: return elu(u);
        case Activation::Sigmoid: return sigmoid(u);
        default: return u;
    }
}

inline double activate_deriv(Activation act, double preact) {
    switch (act) {
        case Activation::Elu: return elu_deriv(preact);
        case Activation::Sigmoid: {
            double s = sigmoid(preact);
            return s * (1.0 - s);
        }
        default: return 1.0;
    }
}

// Normalizes v to zero mean / unit population variance, then applies the
// learned per-feature affine. Variance is floored at 1e-5 (a constant
// vector maps to gain*0+bias, i.e. zeros at init).
inline Vec layer_norm(const Vec& v, const Vec& gain, const Vec& bias) {
    check_dim(v.size() >= 2, "layer_norm length >= 2");
    check_dim(gain.size() == v.size() && bias.size() == v.size(), "layer_norm affine");
    double mean = 0.0;
    for (double x : v) mean += x;
    mean /= static_cast<double>(v.size());
    double var = 0.0;
    for (double x : v) var += (x - mean) * (x - mean);
    var /= static_cast<double>(v.size());
    double inv_sigma = 1.0 / std::sqrt(std::max(var, kLayerNormVarFloor));
    Vec out(v.size());
    for (std::size_t i = 0; i < v.size(); ++i) out[i] = gain[i] * ((v[i] - mean) * inv_sigma) + bias[i];
    return out;
}

// Plain normalization (gain 1, bias 0); used to whiten inference-model
// input channels.
inline Vec layer_norm(const Vec& v) {
    Vec ones(v.size(), 1.0), zeros(v.size(), 0.0);
    return layer_norm(v, ones, zeros);
}

struct Layer {
    Mat w;
    Vec b;
    Activation act = Activation::Elu;
    bool normed = false;  // layer normalization before the activation
    Vec ln_gain;          // per-feature, init 1
    Vec ln_bias;          // per-feature, init 0

    std::size_t in_dim() const { return w.cols; }
    std::size_t out_dim() const { return w.rows; }
};

struct Mlp {
    std::vector<Layer> layers;

    std::size_t in_dim() const { return layers.front().in_dim(); }
    std::size_t out_dim() const { return layers.back().out_dim(); }
    bool empty() const { return layers.empty(); }
};

struct LayerTape {
    Vec input;
    Vec lin;       // w*input + b
    Vec normed;    // (lin - mean)/sigma, before the affine (only if normed)
    double inv_sigma = 0.0;
    bool var_floored = false;
    Vec preact;    // input to the activation
    Vec output;
};

struct MlpTape {
    std::vector<LayerTape> layers;
};

// Gradient buffers mirroring an Mlp's parameters.
struct LayerGrad {
    Mat w;
    Vec b;
    Vec ln_gain;
    Vec ln_bias;
};

struct MlpGrad {
    std::vector<LayerGrad> layers;
};

inline MlpGrad make_grad(const Mlp& net) {
    MlpGrad g;
    g.layers.reserve(net.layers.size());
    for (const auto& l : net.layers) {
        LayerGrad lg;
        lg.w = Mat(l.w.rows, l.w.cols);
        lg.b.assign(l.b.size(), 0.0);
        if (l.normed) {
            lg.ln_gain.assign(l.ln_gain.size(), 0.0);
            lg.ln_bias.assign(l.ln_bias.size(), 0.0);
        }
        g.layers.push_back(std::move(lg));
    }
    return g;
}

inline Vec mlp_forward(const Mlp& net, const Vec& input, MlpTape* tape = nullptr) {
    check_dim(!net.layers.empty(), "mlp has layers");
    check_dim(input.size() == net.in_dim(), "mlp input");
    if (tape) tape->layers.assign(net.layers.size(), {});
    Vec cur = input;
    for (std::size_t li = 0; li < net.layers.size(); ++li) {
        const Layer& l = net.layers[li];
        Vec lin;
        affine(l.w, cur, l.b, lin);
        Vec preact;
        LayerTape* lt = tape ? &tape->layers[li] : nullptr;
        if (l.normed) {
            double mean = 0.0;
            for (double x : lin) mean += x;
            mean /= static_cast<double>(lin.size());
            double var = 0.0;
            for (double x : lin) var += (x - mean) * (x - mean);
            var /= static_cast<double>(lin.size());
            bool floored = var < kLayerNormVarFloor;
            double inv_sigma = 1.0 / std::sqrt(std::max(var, kLayerNormVarFloor));
            Vec normed(lin.size());
            for (std::size_t i = 0; i < lin.size(); ++i) normed[i] = (lin[i] - mean) * inv_sigma;
            preact.resize(lin.size());
            for (std::size_t i = 0; i < lin.size(); ++i) preact[i] = l.ln_gain[i] * normed[i] + l.ln_bias[i];
            if (lt) {
                lt->normed = normed;
                lt->inv_sigma = inv_sigma;
                lt->var_floored = floored;
            }
        } else {
            preact = lin;
        }
        Vec out(preact.size());
        for (std::size_t i = 0; i < preact.size(); ++i) out[i] = activate(l.act, preact[i]);
        if (lt) {
            lt->input = cur;
            lt->lin = std::move(lin);
            lt->preact = preact;
            lt->output = out;
        }
        cur = std::move(out);
    }
    return cur;
}

// Returns the input gradient J^T * upstream; accumulates parameter
// gradients into *grad when given. The tape must come from a forward call
// on the same net and input.
inline Vec mlp_backward(const Mlp& net, const MlpTape& tape, const Vec& upstream, MlpGrad* grad = nullptr) {
    if (tape.layers.size() != net.layers.size())
        throw std::runtime_error("mlp_backward: tape does not match net");
    check_dim(upstream.size() == net.out_dim(), "mlp_backward upstream");
    Vec d = upstream;
    for (std::size_t li = net.layers.size(); li-- > 0;) {
        const Layer& l = net.layers[li];
        const LayerTape& lt = tape.layers[li];
        if (lt.output.size() != l.out_dim()) throw std::runtime_error("mlp_backward: stale tape");
        const std::size_t n = l.out_dim();
        Vec d_pre(n);
        for (std::size_t i = 0; i < n; ++i) d_pre[i] = d[i] * activate_deriv(l.act, lt.preact[i]);
        Vec d_lin;
        if (l.normed) {
            Vec d_norm(n);
            for (std::size_t i = 0; i < n; ++i) d_norm[i] = d_pre[i] * l.ln_gain[i];
            if (grad) {
                auto& lg = grad->layers[li];
                for (std::size_t i = 0; i < n; ++i) {
                    lg.ln_gain[i] += d_pre[i] * lt.normed[i];
                    lg.ln_bias[i] += d_pre[i];
                }
            }
            double mean_dn = 0.0, mean_dn_n = 0.0;
            for (std::size_t i = 0; i < n; ++i) {
                mean_dn += d_norm[i];
                mean_dn_n += d_norm[i] * lt.normed[i];
            }
            mean_dn /= static_cast<double>(n);
            mean_dn_n /= static_cast<double>(n);
            d_lin.resize(n);
            // When the variance hit the floor, sigma is constant and the
            // variance path carries no gradient.
            for (std::size_t i = 0; i < n; ++i) {
                double t = d_norm[i] - mean_dn;
                if (!lt.var_floored) t -= lt.normed[i] * mean_dn_n;
                d_lin[i] = t * lt.inv_sigma;
            }
        } else {
            d_lin = std::move(d_pre);
        }
        if (grad) {
            auto& lg = grad->layers[li];
            add_outer(lg.w, d_lin, lt.input);
            for (std::size_t i = 0; i < n; ++i) lg.b[i] += d_lin[i];
        }
        matvec_t(l.w, d_lin, d);
    }
    return d;
}

// Uniform(-sqrt(6/(fan_in+fan_out)), +...) weights, zero biases.
inline void init_layer(Layer& l, Rng& rng) {
    double bound = std::sqrt(6.0 / static_cast<double>(l.w.rows + l.w.cols));
    for (auto& x : l.w.a) x = (2.0 * rng.next_uniform() - 1.0) * bound;
    std::fill(l.b.begin(), l.b.end(), 0.0);
    if (l.normed) {
        l.ln_gain.assign(l.out_dim(), 1.0);
        l.ln_bias.assign(l.out_dim(), 0.0);
    }
}

inline Layer make_layer(std::size_t in, std::size_t out, Activation act, bool normed = false) {
    Layer l;
    l.w = Mat(out, in);
    l.b.assign(out, 0.0);
    l.act = act;
    l.normed = normed;
    if (normed) {
        l.ln_gain.assign(out, 1.0);
        l.ln_bias.assign(out, 0.0);
    }
    return l;
}

// hidden..hidden -> out; hidden layers use ELU, the final layer `out_act`.
inline Mlp make_mlp(std::size_t in, const std::vector<std::size_t>& hidden, std::size_t out,
                    Activation out_act, Rng rng) {
    Mlp net;
    std::size_t prev = in;
    for (std::size_t h : hidden) {
        net.layers.push_back(make_layer(prev, h, Activation::Elu));
        prev = h;
    }
    net.layers.push_back(make_layer(prev, out, out_act));
    std::uint64_t li = 0;
    for (auto& l : net.layers) {
        Rng layer_rng = rng.child(stream::kWeightInit, li++);
        init_layer(l, layer_rng);
    }
    return net;
}

// Parameter traversal used by optimizers and serialization. Order is
// stable: per layer, weights then bias then (if normed) gain and bias.
inline void visit_params(Mlp& net, const std::function<void(Vec&)>& fn) {
    for (auto& l : net.layers) {
        fn(l.w.a);
        fn(l.b);
        if (l.normed) {
            fn(l.ln_gain);
            fn(l.ln_bias);
        }
    }
}

inline void visit_grads(MlpGrad& g, const std::function<void(Vec&)>& fn) {
    for (auto& l : g.layers) {
        fn(l.w.a);
        fn(l.b);
        if (!l.ln_gain.empty()) {
            fn(l.ln_gain);
            fn(l.ln_bias);
        }
    }
}

inline void scale_grad(MlpGrad& g, double s) {
    visit_grads(g, [s](Vec& v) {
        for (auto& x : v) x *= s;
    });
}

inline void add_grad(MlpGrad& dst, const MlpGrad& src, double scale = 1.0) {
    for (std::size_t li = 0; li < dst.layers.size(); ++li) {
        auto& d = dst.layers[li];
        const auto& s = src.layers[li];
        for (std::size_t i = 0; i < d.w.a.size(); ++i) d.w.a[i] += scale * s.w.a[i];
        for (std::size_t i = 0; i < d.b.size(); ++i) d.b[i] += scale * s.b[i];
        for (std::size_t i = 0; i < d.ln_gain.size(); ++i) d.ln_gain[i] += scale * s.ln_gain[i];
        for (std::size_t i = 0; i < d.ln_bias.size(); ++i) d.ln_bias[i] += scale * s.ln_bias[i];
    }
}

}  // namespace amortize
