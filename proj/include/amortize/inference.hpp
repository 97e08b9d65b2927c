#pragma once

// The three inference strategies behind one contract: a standard
// bottom-up encoder, conventional optimizers applied directly to the
// posterior parameters, and iterative models that learn the update rule
// from gradient/error signals. Iterative updates are gated per
// coordinate; training credit flows one step back only (the signals and
// the incoming estimate are treated as constants).

#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "model.hpp"
#include "optim.hpp"

namespace amortize {

enum class StrategyKind { Standard, Optimizer, Iterative };
enum class Preprocessing { LogTransform, LayerNorm, None };
enum class InitMode { Prior, Zeros, LearnedConstant };
enum class NoiseMode { Fresh, Common };

struct EncodingSet {
    bool gradients = false;
    bool errors = false;
    bool data = false;

    bool any() const { return gradients || errors || data; }
};

struct StrategyConfig {
    StrategyKind kind = StrategyKind::Iterative;
    EncodingSet encoding{true, false, false};
    Preprocessing preprocessing = Preprocessing::LogTransform;
    double alpha = 1.0;    // log-transform scale
    double eps_ln = 1e-6;  // log-transform offset
    bool gated = true;
    std::vector<std::size_t> hidden = {64, 64};
    OptimKind optimizer = OptimKind::Adam;
    double lr = 0.1;
    InitMode init = InitMode::Prior;
    std::size_t iterations = 16;  // update steps per inference run
    std::size_t samples = 1;      // posterior samples per evaluation
};

// log-transform encoding of a signal channel: [alpha*log(|g|+eps); sign(g)].
inline Vec preprocess_gradient(const Vec& g, double alpha, double eps_ln) {
    check_dim(eps_ln > 0.0, "preprocess_gradient eps");
    Vec out(2 * g.size());
    for (std::size_t i = 0; i < g.size(); ++i) {
        out[i] = alpha * std::log(std::abs(g[i]) + eps_ln);
        out[g.size() + i] = g[i] > 0.0 ? 1.0 : (g[i] < 0.0 ? -1.0 : 0.0);
    }
    return out;
}

struct InferenceStrategy {
    StrategyConfig cfg;
    bool point = false;                  // mirrors the model's estimate family
    std::vector<std::size_t> latent_dims;
    std::size_t data_dim = 0;
    std::vector<Mlp> nets;               // Standard: encoder per level; Iterative: update net per level
    std::vector<Vec> init_mean;          // LearnedConstant initialization
    std::vector<Vec> init_log_var;
};

// Per-level block layout of an iterative net's output:
//   [proposal_mean; proposal_log_var?; gate_mean; gate_log_var?]
// Gates pass through a sigmoid at the use site; proposals are raw.
inline std::size_t iterative_blocks(const InferenceStrategy& s) {
    return (s.point ? 1u : 2u) * (s.cfg.gated ? 2u : 1u);
}

namespace detail {

inline std::size_t channel_encoded_size(const StrategyConfig& cfg, std::size_t n, bool signal) {
    if (signal && cfg.preprocessing == Preprocessing::LogTransform) return 2 * n;
    return n;
}

// Preprocess one input channel. `signal` marks gradient/error channels:
// the log transform applies only to those, while layer normalization
// whitens every channel it can (length >= 2).
inline void append_channel(const StrategyConfig& cfg, const Vec& v, bool signal, Vec& out) {
    if (signal && cfg.preprocessing == Preprocessing::LogTransform) {
        Vec enc = preprocess_gradient(v, cfg.alpha, cfg.eps_ln);
        out.insert(out.end(), enc.begin(), enc.end());
        return;
    }
    if (cfg.preprocessing == Preprocessing::LayerNorm && v.size() >= 2) {
        Vec n = layer_norm(v);
        out.insert(out.end(), n.begin(), n.end());
        return;
    }
    out.insert(out.end(), v.begin(), v.end());
}

}  // namespace detail

inline std::size_t iterative_input_dim(const GenerativeModel& m, const StrategyConfig& cfg,
                                       bool point, std::size_t level) {
    std::size_t n = m.latent_dims[level];
    std::size_t below = level == 0 ? m.data_dim : m.latent_dims[level - 1];
    std::size_t dim = 0;
    if (cfg.encoding.data)
        dim += detail::channel_encoded_size(cfg, level == 0 ? m.data_dim : m.latent_dims[level - 1], false);
    if (cfg.encoding.gradients) dim += (point ? 1u : 2u) * detail::channel_encoded_size(cfg, n, true);
    if (cfg.encoding.errors)
        dim += detail::channel_encoded_size(cfg, below, true) + detail::channel_encoded_size(cfg, n, true);
    dim += (point ? 1u : 2u) * detail::channel_encoded_size(cfg, n, false);  // current estimates
    return dim;
}

inline InferenceStrategy make_strategy(const StrategyConfig& cfg, const GenerativeModel& m,
                                       bool point, Rng rng) {
    if (cfg.kind == StrategyKind::Iterative && !cfg.encoding.any())
        throw std::invalid_argument("iterative strategy needs a non-empty encoding set");
    InferenceStrategy s;
    s.cfg = cfg;
    s.point = point;
    s.latent_dims = m.latent_dims;
    s.data_dim = m.data_dim;
    const std::size_t nlev = m.levels();
    if (cfg.kind == StrategyKind::Standard) {
        for (std::size_t il = 0; il < nlev; ++il) {
            std::size_t in = il == 0 ? m.data_dim : (point ? 1u : 2u) * m.latent_dims[il - 1];
            std::size_t out = (point ? 1u : 2u) * m.latent_dims[il];
            s.nets.push_back(make_mlp(in, cfg.hidden, out, Activation::Identity, rng.child(700, il)));
        }
    } else if (cfg.kind == StrategyKind::Iterative) {
        for (std::size_t il = 0; il < nlev; ++il) {
            std::size_t in = iterative_input_dim(m, cfg, point, il);
            std::size_t out = iterative_blocks(s) * m.latent_dims[il];
            Mlp net = make_mlp(in, cfg.hidden, out, Activation::Identity, rng.child(800, il));
            if (cfg.gated) {
                // Gate blocks start biased open toward keeping the current
                // estimate, so early training approximates identity updates.
                const std::size_t n = m.latent_dims[il];
                Vec& b = net.layers.back().b;
                std::size_t gate_off = (point ? 1u : 2u) * n;
                for (std::size_t i = gate_off; i < b.size(); ++i) b[i] = 2.0;
            }
            s.nets.push_back(std::move(net));
        }
    }
    // Learned-constant initialization starts from the prior-based values.
    for (std::size_t il = 0; il < nlev; ++il) {
        s.init_mean.push_back(Vec(m.latent_dims[il], 0.0));
        s.init_log_var.push_back(Vec(m.latent_dims[il], 0.0));
    }
    return s;
}

// Constant initial estimate. Prior mode copies the fixed top prior and
// evaluates each empirical prior at its parent's prior mean, so the same
// value serves every data example.
inline PosteriorEstimate init_lambda(const GenerativeModel& m, InitMode mode,
                                     const InferenceStrategy* strategy = nullptr) {
    PosteriorEstimate e = make_estimate(m, strategy ? strategy->point : false);
    const std::size_t nlev = m.levels();
    switch (mode) {
        case InitMode::Zeros:
            break;  // make_estimate is all zeros already
        case InitMode::Prior: {
            e.levels[nlev - 1] = DiagGaussian(m.top_prior.mean, m.top_prior.log_var);
            for (std::size_t il = nlev - 1; il-- > 0;) {
                Vec out = mlp_forward(m.decoders[il + 1], e.levels[il + 1].mean);
                const std::size_t n = m.latent_dims[il];
                e.levels[il].mean.assign(out.begin(), out.begin() + n);
                for (std::size_t i = 0; i < n; ++i)
                    e.levels[il].log_var[i] = clamp(out[n + i], kLogVarMin, kLogVarMax);
            }
            break;
        }
        case InitMode::LearnedConstant: {
            check_dim(strategy != nullptr, "learned-constant init needs the strategy");
            for (std::size_t il = 0; il < nlev; ++il) {
                e.levels[il].mean = strategy->init_mean[il];
                e.levels[il].log_var = strategy->init_log_var[il];
            }
            break;
        }
    }
    if (strategy && strategy->point)
        for (auto& l : e.levels) l.log_var.assign(l.log_var.size(), 0.0);
    return e;
}

struct StandardTape {
    std::vector<MlpTape> nets;
    std::vector<std::vector<char>> lv_live;
};

// Single bottom-up pass; level l consumes the estimate emitted below it.
inline PosteriorEstimate standard_infer(const InferenceStrategy& s, const GenerativeModel& m,
                                        const Vec& x, StandardTape* tape = nullptr) {
    check_dim(s.cfg.kind == StrategyKind::Standard, "standard_infer");
    PosteriorEstimate e = make_estimate(m, s.point);
    if (tape) {
        tape->nets.assign(m.levels(), {});
        tape->lv_live.assign(m.levels(), {});
    }
    Vec input = x;
    for (std::size_t il = 0; il < m.levels(); ++il) {
        Vec out = mlp_forward(s.nets[il], input, tape ? &tape->nets[il] : nullptr);
        const std::size_t n = m.latent_dims[il];
        e.levels[il].mean.assign(out.begin(), out.begin() + n);
        if (!s.point) {
            if (tape) tape->lv_live[il].resize(n);
            for (std::size_t i = 0; i < n; ++i) {
                double lv = out[n + i];
                if (tape) tape->lv_live[il][i] = (lv > kLogVarMin && lv < kLogVarMax) ? 1 : 0;
                e.levels[il].log_var[i] = clamp(lv, kLogVarMin, kLogVarMax);
            }
        }
        if (il + 1 < m.levels()) {
            input = e.levels[il].mean;
            if (!s.point)
                input.insert(input.end(), e.levels[il].log_var.begin(), e.levels[il].log_var.end());
        }
    }
    return e;
}

// Parameter-gradient buffers for a strategy (encoder or update nets plus
// the learned-constant initialization).
struct PhiGrad {
    std::vector<MlpGrad> nets;
    std::vector<Vec> init_mean;
    std::vector<Vec> init_log_var;
};

inline PhiGrad make_phi_grad(const InferenceStrategy& s) {
    PhiGrad g;
    for (const auto& n : s.nets) g.nets.push_back(make_grad(n));
    for (const auto& v : s.init_mean) g.init_mean.push_back(Vec(v.size(), 0.0));
    for (const auto& v : s.init_log_var) g.init_log_var.push_back(Vec(v.size(), 0.0));
    return g;
}

inline void add_phi(PhiGrad& dst, const PhiGrad& src, double scale = 1.0) {
    for (std::size_t i = 0; i < dst.nets.size(); ++i) add_grad(dst.nets[i], src.nets[i], scale);
    for (std::size_t i = 0; i < dst.init_mean.size(); ++i) {
        for (std::size_t j = 0; j < dst.init_mean[i].size(); ++j) {
            dst.init_mean[i][j] += scale * src.init_mean[i][j];
            dst.init_log_var[i][j] += scale * src.init_log_var[i][j];
        }
    }
}

// Backward through the bottom-up encoder chain; upstream is the bound's
// gradient at the emitted estimate.
inline void standard_backward(const InferenceStrategy& s, const GenerativeModel& m,
                              const StandardTape& tape, const GradientSignals& upstream,
                              PhiGrad& phi) {
    std::vector<Vec> dout(m.levels());
    for (std::size_t il = 0; il < m.levels(); ++il) {
        const std::size_t n = m.latent_dims[il];
        dout[il].assign((s.point ? 1u : 2u) * n, 0.0);
        for (std::size_t i = 0; i < n; ++i) dout[il][i] = upstream.d_mean[il][i];
        if (!s.point)
            for (std::size_t i = 0; i < n; ++i)
                dout[il][n + i] = tape.lv_live[il][i] ? upstream.d_log_var[il][i] : 0.0;
    }
    for (std::size_t il = m.levels(); il-- > 0;) {
        Vec din = mlp_backward(s.nets[il], tape.nets[il], dout[il], &phi.nets[il]);
        if (il > 0) {
            // The level below's outputs fed this net's input.
            const std::size_t nb = m.latent_dims[il - 1];
            for (std::size_t i = 0; i < din.size(); ++i) dout[il - 1][i] += din[i];
            (void)nb;
        }
    }
}

struct StepSignals {
    const GradientSignals* grads = nullptr;
    const ErrorSignals* errors = nullptr;
    const Vec* x = nullptr;
};

struct StepTape {
    std::vector<Vec> inputs;
    std::vector<MlpTape> nets;
    std::vector<Vec> raw;        // final-layer outputs per level
    std::vector<Vec> gate_mean;  // post-sigmoid
    std::vector<Vec> gate_log_var;
    PosteriorEstimate lambda_in;
    std::vector<std::vector<char>> lv_live;
};

namespace detail {

inline Vec assemble_input(const InferenceStrategy& s, const GenerativeModel& m, std::size_t il,
                          const StepSignals& sig, const PosteriorEstimate& lam) {
    const StrategyConfig& cfg = s.cfg;
    Vec in;
    in.reserve(iterative_input_dim(m, cfg, s.point, il));
    if (cfg.encoding.data) {
        if (!sig.x && il == 0) throw std::invalid_argument("data encoding configured but no data given");
        append_channel(cfg, il == 0 ? *sig.x : lam.levels[il - 1].mean, false, in);
    }
    if (cfg.encoding.gradients) {
        if (!sig.grads) throw std::invalid_argument("gradient encoding configured but no gradients given");
        append_channel(cfg, sig.grads->d_mean[il], true, in);
        if (!s.point) append_channel(cfg, sig.grads->d_log_var[il], true, in);
    }
    if (cfg.encoding.errors) {
        if (!sig.errors) throw std::invalid_argument("error encoding configured but no errors given");
        append_channel(cfg, il == 0 ? sig.errors->data_error : sig.errors->prior_error[il - 1], true, in);
        append_channel(cfg, sig.errors->prior_error[il], true, in);
    }
    append_channel(cfg, lam.levels[il].mean, false, in);
    if (!s.point) append_channel(cfg, lam.levels[il].log_var, false, in);
    check_dim(in.size() == iterative_input_dim(m, cfg, s.point, il), "assembled input size");
    return in;
}

}  // namespace detail

// One gated update of the estimate from the configured signals.
inline PosteriorEstimate iterative_step(const InferenceStrategy& s, const GenerativeModel& m,
                                        const StepSignals& sig, const PosteriorEstimate& lam,
                                        StepTape* tape = nullptr) {
    check_dim(s.cfg.kind == StrategyKind::Iterative, "iterative_step");
    const std::size_t nlev = m.levels();
    PosteriorEstimate next = lam;
    if (tape) {
        tape->inputs.assign(nlev, {});
        tape->nets.assign(nlev, {});
        tape->raw.assign(nlev, {});
        tape->gate_mean.assign(nlev, {});
        tape->gate_log_var.assign(nlev, {});
        tape->lambda_in = lam;
        tape->lv_live.assign(nlev, {});
    }
    for (std::size_t il = 0; il < nlev; ++il) {
        const std::size_t n = m.latent_dims[il];
        Vec in = detail::assemble_input(s, m, il, sig, lam);
        Vec raw = mlp_forward(s.nets[il], in, tape ? &tape->nets[il] : nullptr);
        const double* f_mean = raw.data();
        const double* f_lv = s.point ? nullptr : raw.data() + n;
        Vec g_mean(n, 0.0), g_lv;
        if (s.cfg.gated) {
            std::size_t off = (s.point ? 1u : 2u) * n;
            for (std::size_t i = 0; i < n; ++i) g_mean[i] = sigmoid(raw[off + i]);
            if (!s.point) {
                g_lv.resize(n);
                for (std::size_t i = 0; i < n; ++i) g_lv[i] = sigmoid(raw[off + n + i]);
            }
        }
        if (tape) tape->lv_live[il].assign(n, 1);
        for (std::size_t i = 0; i < n; ++i) {
            double old_m = lam.levels[il].mean[i];
            next.levels[il].mean[i] =
                s.cfg.gated ? g_mean[i] * old_m + (1.0 - g_mean[i]) * f_mean[i] : f_mean[i];
        }
        if (!s.point) {
            for (std::size_t i = 0; i < n; ++i) {
                double old_lv = lam.levels[il].log_var[i];
                double lv = s.cfg.gated ? g_lv[i] * old_lv + (1.0 - g_lv[i]) * f_lv[i] : f_lv[i];
                if (tape) tape->lv_live[il][i] = (lv > kLogVarMin && lv < kLogVarMax) ? 1 : 0;
                next.levels[il].log_var[i] = clamp(lv, kLogVarMin, kLogVarMax);
            }
        }
        if (tape) {
            tape->inputs[il] = std::move(in);
            tape->raw[il] = std::move(raw);
            tape->gate_mean[il] = std::move(g_mean);
            tape->gate_log_var[il] = std::move(g_lv);
        }
    }
    return next;
}

// Backward of the bound's gradient at the step's output through the
// gated update into net parameters. Inputs (signals and the incoming
// estimate) are constants: credit does not flow across iterations.
inline void iterative_step_backward(const InferenceStrategy& s, const GenerativeModel& m,
                                    const StepTape& tape, const GradientSignals& upstream,
                                    PhiGrad& phi) {
    for (std::size_t il = 0; il < m.levels(); ++il) {
        const std::size_t n = m.latent_dims[il];
        const Vec& raw = tape.raw[il];
        Vec draw(raw.size(), 0.0);
        for (std::size_t i = 0; i < n; ++i) {
            double du = upstream.d_mean[il][i];
            if (s.cfg.gated) {
                double g = tape.gate_mean[il][i];
                double f = raw[i];
                double old_m = tape.lambda_in.levels[il].mean[i];
                draw[i] = du * (1.0 - g);
                std::size_t off = (s.point ? 1u : 2u) * n;
                draw[off + i] = du * (old_m - f) * g * (1.0 - g);
            } else {
                draw[i] = du;
            }
        }
        if (!s.point) {
            for (std::size_t i = 0; i < n; ++i) {
                double du = tape.lv_live[il][i] ? upstream.d_log_var[il][i] : 0.0;
                if (s.cfg.gated) {
                    double g = tape.gate_log_var[il][i];
                    double f = raw[n + i];
                    double old_lv = tape.lambda_in.levels[il].log_var[i];
                    draw[n + i] = du * (1.0 - g);
                    draw[3 * n + i] = du * (old_lv - f) * g * (1.0 - g);
                } else {
                    draw[n + i] = du;
                }
            }
        }
        mlp_backward(s.nets[il], tape.nets[il], draw, &phi.nets[il]);
    }
}

struct TrajectoryRecord {
    std::size_t t = 0;
    PosteriorEstimate lambda;
    double elbo = 0.0;
    double grad_norm_mean = 0.0;
    double grad_norm_log_var = 0.0;
    double seconds = 0.0;
};

struct InferenceTrajectory {
    std::vector<TrajectoryRecord> records;
    bool truncated = false;
    std::string diagnostic;
};

namespace detail {

inline Vec flatten_estimate(const PosteriorEstimate& e) {
    Vec out;
    for (const auto& l : e.levels) {
        out.insert(out.end(), l.mean.begin(), l.mean.end());
        if (!e.point) out.insert(out.end(), l.log_var.begin(), l.log_var.end());
    }
    return out;
}

inline void unflatten_estimate(const Vec& flat, PosteriorEstimate& e) {
    std::size_t pos = 0;
    for (auto& l : e.levels) {
        for (auto& v : l.mean) v = flat[pos++];
        if (!e.point) {
            for (auto& v : l.log_var) v = clamp(flat[pos++], kLogVarMin, kLogVarMax);
        }
    }
}

inline Vec flatten_signals(const GradientSignals& g, bool point) {
    Vec out;
    for (std::size_t il = 0; il < g.d_mean.size(); ++il) {
        out.insert(out.end(), g.d_mean[il].begin(), g.d_mean[il].end());
        if (!point) out.insert(out.end(), g.d_log_var[il].begin(), g.d_log_var[il].end());
    }
    return out;
}

inline double grad_norm_means(const GradientSignals& g) {
    double s = 0;
    for (const auto& v : g.d_mean) s += dot(v, v);
    return std::sqrt(s);
}

inline double grad_norm_log_vars(const GradientSignals& g) {
    double s = 0;
    for (const auto& v : g.d_log_var) s += dot(v, v);
    return std::sqrt(s);
}

}  // namespace detail

struct OptimizerInferOpts {
    NoiseMode noise_mode = NoiseMode::Fresh;
    KlMode kl_mode = KlMode::Sampled;  // governs both the ascent gradient and recorded bound
    double kl_weight = 1.0;
};

// Gradient-based updates applied directly to the posterior parameters;
// the trajectory records the bound and gradient norms at every iterate
// including the initialization.
inline InferenceTrajectory optimizer_infer(OptimKind kind, double lr, const GenerativeModel& m,
                                           const Vec& x, const PosteriorEstimate& lambda0,
                                           std::size_t iterations, std::size_t k, Rng rng,
                                           const OptimizerInferOpts& opts = {}) {
    check_dim(iterations >= 1, "optimizer_infer iterations");
    InferenceTrajectory traj;
    PosteriorEstimate lam = lambda0;
    Vec flat = detail::flatten_estimate(lam);
    AscentState state(kind, lr, flat.size());
    Noises common;
    if (opts.noise_mode == NoiseMode::Common) {
        Rng nr = rng.child(stream::kNoise, 0);
        common = draw_noises(m, k, nr);
    }
    for (std::size_t t = 0; t <= iterations; ++t) {
        Noises fresh;
        const Noises* noises = &common;
        if (opts.noise_mode == NoiseMode::Fresh) {
            Rng nr = rng.child(stream::kNoise, t);
            fresh = draw_noises(m, k, nr);
            noises = &fresh;
        }
        ElboBreakdown b;
        GradientSignals g;
        try {
            g = grad_lambda(m, x, lam, *noises, opts.kl_mode, opts.kl_weight, nullptr, &b);
        } catch (const std::exception& ex) {
            traj.truncated = true;
            traj.diagnostic = ex.what();
            break;
        }
        TrajectoryRecord rec;
        rec.t = t;
        rec.lambda = lam;
        rec.elbo = b.total;
        rec.grad_norm_mean = detail::grad_norm_means(g);
        rec.grad_norm_log_var = lam.point ? 0.0 : detail::grad_norm_log_vars(g);
        traj.records.push_back(std::move(rec));
        if (t == iterations) break;
        Vec gflat = detail::flatten_signals(g, lam.point);
        ascent_step(flat, gflat, state);
        if (!all_finite(flat)) {
            traj.truncated = true;
            traj.diagnostic = "non-finite estimate after ascent step " + std::to_string(t + 1);
            break;
        }
        detail::unflatten_estimate(flat, lam);
        flat = detail::flatten_estimate(lam);  // re-flatten after the clamp
    }
    return traj;
}

struct IterativeInferOpts {
    KlMode record_kl_mode = KlMode::Sampled;  // signals are always the sampled-form gradients
    double kl_weight = 1.0;
    PhiGrad* phi_accum = nullptr;             // one-step credit accumulation
    ThetaGrad* theta_accum = nullptr;         // final-iteration generative gradient
    KlMode theta_kl_mode = KlMode::Analytic;
    // Observer for each iteration's parameter-gradient contribution.
    std::function<void(std::size_t, const PhiGrad&)> phi_hook;
};

// The iterative loop: sample, evaluate, compute signals, update. With
// phi_accum set, each update step receives the gradient of the bound
// evaluated at its own output (and nothing further back).
inline InferenceTrajectory iterative_infer(const InferenceStrategy& s, const GenerativeModel& m,
                                           const Vec& x, std::size_t iterations, std::size_t k,
                                           Rng rng, const IterativeInferOpts& opts = {}) {
    check_dim(s.cfg.kind == StrategyKind::Iterative, "iterative_infer");
    check_dim(iterations >= 1, "iterative_infer iterations");
    InferenceTrajectory traj;
    PosteriorEstimate lam = init_lambda(m, s.cfg.init, &s);
    const bool training = opts.phi_accum != nullptr;
    StepTape tape;
    bool have_tape = false;
    for (std::size_t t = 0; t <= iterations; ++t) {
        Rng nr = rng.child(stream::kNoise, t);
        Noises noises = draw_noises(m, k, nr);
        ElboBreakdown b;
        GradientSignals g;
        try {
            g = grad_lambda(m, x, lam, noises, opts.record_kl_mode, opts.kl_weight, nullptr, &b);
        } catch (const std::exception& ex) {
            traj.truncated = true;
            traj.diagnostic = ex.what();
            break;
        }
        TrajectoryRecord rec;
        rec.t = t;
        rec.lambda = lam;
        rec.elbo = b.total;
        rec.grad_norm_mean = detail::grad_norm_means(g);
        rec.grad_norm_log_var = lam.point ? 0.0 : detail::grad_norm_log_vars(g);
        traj.records.push_back(std::move(rec));

        if (training && have_tape) {
            if (opts.phi_hook) {
                PhiGrad step = make_phi_grad(s);
                iterative_step_backward(s, m, tape, g, step);
                opts.phi_hook(t, step);
                add_phi(*opts.phi_accum, step);
            } else {
                iterative_step_backward(s, m, tape, g, *opts.phi_accum);
            }
        }
        if (training && t == 0 && s.cfg.init == InitMode::LearnedConstant) {
            // The initialization is a trainable constant; it receives the
            // first evaluation's gradient directly.
            for (std::size_t il = 0; il < m.levels(); ++il) {
                for (std::size_t i = 0; i < m.latent_dims[il]; ++i) {
                    opts.phi_accum->init_mean[il][i] += g.d_mean[il][i];
                    if (!s.point) opts.phi_accum->init_log_var[il][i] += g.d_log_var[il][i];
                }
            }
        }
        if (t == iterations) {
            if (opts.theta_accum)
                grad_lambda(m, x, lam, noises, opts.theta_kl_mode, opts.kl_weight, opts.theta_accum);
            break;
        }
        ErrorSignals errs;
        StepSignals sig;
        if (s.cfg.encoding.gradients) sig.grads = &g;
        if (s.cfg.encoding.errors) {
            errs = error_signals(m, x, lam, noises);
            sig.errors = &errs;
        }
        if (s.cfg.encoding.data) sig.x = &x;
        lam = iterative_step(s, m, sig, lam, training ? &tape : nullptr);
        have_tape = true;
    }
    return traj;
}

// Parameter groups for the optimizer/serializer, in a stable order.
inline void visit_strategy_params(InferenceStrategy& s, const std::function<void(Vec&)>& fn) {
    for (auto& n : s.nets) visit_params(n, fn);
    if (s.cfg.init == InitMode::LearnedConstant) {
        for (auto& v : s.init_mean) fn(v);
        for (auto& v : s.init_log_var) fn(v);
    }
}

inline void visit_phi_grads(InferenceStrategy& s, PhiGrad& g, const std::function<void(Vec&)>& fn) {
    for (auto& n : g.nets) visit_grads(n, fn);
    if (s.cfg.init == InitMode::LearnedConstant) {
        for (auto& v : g.init_mean) fn(v);
        for (auto& v : g.init_log_var) fn(v);
    }
}

inline void visit_model_params(GenerativeModel& m, const std::function<void(Vec&)>& fn) {
    for (auto& d : m.decoders) visit_params(d, fn);
    if (m.output == OutputFamily::Gaussian) fn(m.output_log_var);
}

inline void visit_theta_grads(GenerativeModel& m, ThetaGrad& g, const std::function<void(Vec&)>& fn) {
    for (auto& d : g.decoders) visit_grads(d, fn);
    if (m.output == OutputFamily::Gaussian) fn(g.output_log_var);
}

}  // namespace amortize
