#pragma once

// Latent Gaussian generative models (single-level or a two-level chain
// with an empirical prior), ELBO evaluation, and closed-form posterior
// gradients / precision-weighted errors.
//
// Levels are indexed bottom-up: level 0 emits the data distribution,
// the top level carries a fixed prior (standard normal by default), and
// decoders[j] (j >= 1) maps z_j to the prior mean and log-variance of
// level j-1. The Gaussian output variance is a single learned global
// vector, not a function of z, so the posterior gradients below are the
// exact derivatives of the bound.

#include <optional>
#include <string>
#include <vector>

#include "dist.hpp"
#include "mlp.hpp"
#include "rng.hpp"

namespace amortize {

enum class OutputFamily { Bernoulli, Gaussian };
enum class KlMode { Analytic, Sampled };

struct GenerativeModel {
    OutputFamily output = OutputFamily::Bernoulli;
    std::size_t data_dim = 0;
    std::vector<std::size_t> latent_dims;  // bottom .. top
    std::vector<Mlp> decoders;             // decoders[0]: z_0 -> data params; decoders[j]: z_j -> prior of j-1
    Vec output_log_var;                    // Gaussian output only (global)
    DiagGaussian top_prior;

    std::size_t levels() const { return latent_dims.size(); }
};

// decoders[0] hidden sizes apply to every decoder; intermediate decoders
// emit [mean; log-variance] for the level below.
inline GenerativeModel make_model(OutputFamily family, std::size_t data_dim,
                                  std::vector<std::size_t> latent_dims,
                                  const std::vector<std::size_t>& hidden, Rng rng) {
    check_dim(!latent_dims.empty(), "model needs at least one latent level");
    GenerativeModel m;
    m.output = family;
    m.data_dim = data_dim;
    m.latent_dims = std::move(latent_dims);
    m.decoders.push_back(make_mlp(m.latent_dims[0], hidden, data_dim, Activation::Identity,
                                  rng.child(stream::kWeightInit, 1000)));
    for (std::size_t j = 1; j < m.latent_dims.size(); ++j)
        m.decoders.push_back(make_mlp(m.latent_dims[j], hidden, 2 * m.latent_dims[j - 1],
                                      Activation::Identity, rng.child(stream::kWeightInit, 1000 + j)));
    if (family == OutputFamily::Gaussian) m.output_log_var.assign(data_dim, 0.0);
    m.top_prior = DiagGaussian::standard(m.latent_dims.back());
    return m;
}

struct PosteriorEstimate {
    bool point = false;                // point estimate: log_var entries are ignored
    std::vector<DiagGaussian> levels;  // bottom .. top
};

inline PosteriorEstimate make_estimate(const GenerativeModel& m, bool point = false) {
    PosteriorEstimate e;
    e.point = point;
    for (std::size_t n : m.latent_dims) e.levels.push_back(DiagGaussian::standard(n));
    return e;
}

struct ElboBreakdown {
    double recon = 0.0;
    Vec kl_per_level;
    double total = 0.0;
    std::size_t samples_used = 0;
};

struct GradientSignals {
    std::vector<Vec> d_mean;     // per level
    std::vector<Vec> d_log_var;  // per level; empty vectors in point mode
};

struct ErrorSignals {
    Vec data_error;               // precision-weighted data mismatch
    std::vector<Vec> prior_error; // per level, precision-weighted prior mismatch
};

// One noise vector per level per sample.
struct NoiseDraw {
    std::vector<Vec> per_level;
};
using Noises = std::vector<NoiseDraw>;

inline Noises draw_noises(const GenerativeModel& m, std::size_t k, Rng& rng) {
    Noises out(k);
    for (auto& d : out) {
        d.per_level.reserve(m.levels());
        for (std::size_t n : m.latent_dims) d.per_level.push_back(rng.normal_vec(n));
    }
    return out;
}

// The +1/-1 pair has per-dimension mean zero and mean square one, which
// integrates any per-dimension quadratic exactly; conjugate-oracle tests
// use it to evaluate the bound without Monte-Carlo error.
inline Noises antithetic_unit_noises(const GenerativeModel& m) {
    Noises out(2);
    for (std::size_t s = 0; s < 2; ++s)
        for (std::size_t n : m.latent_dims) out[s].per_level.push_back(Vec(n, s == 0 ? 1.0 : -1.0));
    return out;
}

struct ThetaGrad {
    std::vector<MlpGrad> decoders;
    Vec output_log_var;
};

inline ThetaGrad make_theta_grad(const GenerativeModel& m) {
    ThetaGrad g;
    for (const auto& d : m.decoders) g.decoders.push_back(make_grad(d));
    g.output_log_var.assign(m.output_log_var.size(), 0.0);
    return g;
}

namespace detail {

inline double softplus(double u) { return std::log1p(std::exp(-std::abs(u))) + std::max(u, 0.0); }

// Everything computed from one posterior sample.
struct SamplePass {
    std::vector<Vec> z;
    std::vector<MlpTape> tapes;          // per decoder; filled only when with_tapes
    std::vector<Vec> prior_mean;         // per level
    std::vector<Vec> prior_log_var;      // per level (clamped)
    std::vector<std::vector<char>> prior_lv_live;  // 1 where the clamp is inactive
    Vec out_raw;                         // data decoder output (logits or means)
    Vec out_mean;                        // Bernoulli mean / Gaussian mean
    std::vector<char> logit_live;        // Bernoulli: 1 where the logit clamp is inactive
    double log_px = 0.0;
};

inline void run_sample(const GenerativeModel& m, const Vec& x, const PosteriorEstimate& lambda,
                       const NoiseDraw* noise, bool with_tapes, SamplePass& sp) {
    const std::size_t nlev = m.levels();
    sp.z.resize(nlev);
    sp.tapes.resize(m.decoders.size());
    sp.prior_mean.resize(nlev);
    sp.prior_log_var.resize(nlev);
    sp.prior_lv_live.resize(nlev);
    for (std::size_t il = 0; il < nlev; ++il) {
        if (lambda.point || noise == nullptr)
            sp.z[il] = lambda.levels[il].mean;
        else
            sp.z[il] = reparameterize(lambda.levels[il], noise->per_level[il]);
    }
    // Priors, top-down. The top level's prior is fixed.
    sp.prior_mean[nlev - 1] = m.top_prior.mean;
    sp.prior_log_var[nlev - 1] = m.top_prior.log_var;
    sp.prior_lv_live[nlev - 1].clear();
    for (std::size_t il = nlev - 1; il-- > 0;) {
        const Mlp& dec = m.decoders[il + 1];
        Vec out = mlp_forward(dec, sp.z[il + 1], with_tapes ? &sp.tapes[il + 1] : nullptr);
        const std::size_t n = m.latent_dims[il];
        sp.prior_mean[il].assign(out.begin(), out.begin() + n);
        sp.prior_log_var[il].resize(n);
        sp.prior_lv_live[il].resize(n);
        for (std::size_t i = 0; i < n; ++i) {
            double lv = out[n + i];
            sp.prior_lv_live[il][i] = (lv > kLogVarMin && lv < kLogVarMax) ? 1 : 0;
            sp.prior_log_var[il][i] = clamp(lv, kLogVarMin, kLogVarMax);
        }
    }
    // Output distribution and its log-density.
    sp.out_raw = mlp_forward(m.decoders[0], sp.z[0], with_tapes ? &sp.tapes[0] : nullptr);
    const std::size_t nx = m.data_dim;
    check_dim(x.size() == nx, "data dimension");
    sp.out_mean.resize(nx);
    double lp = 0.0;
    if (m.output == OutputFamily::Bernoulli) {
        sp.logit_live.resize(nx);
        for (std::size_t i = 0; i < nx; ++i) {
            double raw = sp.out_raw[i];
            sp.logit_live[i] = (raw > -kBernoulliLogitClamp && raw < kBernoulliLogitClamp) ? 1 : 0;
            double l = clamp(raw, -kBernoulliLogitClamp, kBernoulliLogitClamp);
            sp.out_mean[i] = sigmoid(l);
            lp += -(x[i] * softplus(-l) + (1.0 - x[i]) * softplus(l));
        }
    } else {
        for (std::size_t i = 0; i < nx; ++i) {
            sp.out_mean[i] = sp.out_raw[i];
            double diff = x[i] - sp.out_mean[i];
            lp += -0.5 * (kLog2Pi + m.output_log_var[i] + diff * diff * std::exp(-m.output_log_var[i]));
        }
    }
    sp.log_px = lp;
}

// d log p(x|z) / d (raw decoder output)
inline Vec output_upstream(const GenerativeModel& m, const Vec& x, const SamplePass& sp) {
    Vec u(m.data_dim);
    if (m.output == OutputFamily::Bernoulli) {
        for (std::size_t i = 0; i < m.data_dim; ++i)
            u[i] = sp.logit_live[i] ? (x[i] - sp.out_mean[i]) : 0.0;
    } else {
        for (std::size_t i = 0; i < m.data_dim; ++i)
            u[i] = (x[i] - sp.out_mean[i]) * std::exp(-m.output_log_var[i]);
    }
    return u;
}

}  // namespace detail

// Evidence lower bound for one example. The reconstruction term is a
// Monte-Carlo average over the provided noises; the divergence term is
// either closed form per level (Analytic) or estimated from the same
// samples (Sampled). In point mode the estimate is a point and the
// result is log p(x, z = mean), with -log p(z) reported in the
// divergence slot. `kl_weight` scales the divergence term (annealing).
inline ElboBreakdown elbo(const GenerativeModel& m, const Vec& x, const PosteriorEstimate& lambda,
                          const Noises& noises, KlMode kl_mode, double kl_weight = 1.0) {
    check_dim(lambda.levels.size() == m.levels(), "estimate levels");
    if (lambda.point) check_dim(m.levels() == 1, "point estimates are single-level");
    const std::size_t k = lambda.point ? 1 : noises.size();
    check_dim(k >= 1, "need at least one sample");
    const std::size_t nlev = m.levels();
    ElboBreakdown b;
    b.kl_per_level.assign(nlev, 0.0);
    b.samples_used = k;
    detail::SamplePass sp;
    for (std::size_t s = 0; s < k; ++s) {
        detail::run_sample(m, x, lambda, lambda.point ? nullptr : &noises[s], false, sp);
        b.recon += sp.log_px;
        for (std::size_t il = 0; il < nlev; ++il) {
            DiagGaussian prior(sp.prior_mean[il], sp.prior_log_var[il]);
            if (lambda.point) {
                b.kl_per_level[il] += -log_prob_diag_gaussian(sp.z[il], prior);
            } else if (kl_mode == KlMode::Sampled) {
                b.kl_per_level[il] += log_prob_diag_gaussian(sp.z[il], lambda.levels[il]) -
                                      log_prob_diag_gaussian(sp.z[il], prior);
            } else {
                b.kl_per_level[il] += kl_diag_gaussians(lambda.levels[il], prior);
            }
        }
    }
    const double inv_k = 1.0 / static_cast<double>(k);
    b.recon *= inv_k;
    double kl_sum = 0.0;
    for (auto& v : b.kl_per_level) {
        v *= inv_k;
        kl_sum += v;
    }
    b.total = b.recon - kl_weight * kl_sum;
    if (!std::isfinite(b.total)) {
        std::string which = !std::isfinite(b.recon) ? "reconstruction" : "divergence";
        throw std::runtime_error("elbo: non-finite " + which + " term");
    }
    return b;
}

// Exact gradient of elbo() with the same noises and kl_mode, w.r.t. the
// posterior means and log-variances of every level. Optionally
// accumulates the matching generative-parameter gradients into *theta
// and reports the bound through *breakdown (one shared pass).
inline GradientSignals grad_lambda(const GenerativeModel& m, const Vec& x,
                                   const PosteriorEstimate& lambda, const Noises& noises,
                                   KlMode kl_mode = KlMode::Sampled, double kl_weight = 1.0,
                                   ThetaGrad* theta = nullptr, ElboBreakdown* breakdown = nullptr) {
    check_dim(lambda.levels.size() == m.levels(), "estimate levels");
    if (lambda.point) check_dim(m.levels() == 1, "point estimates are single-level");
    const std::size_t nlev = m.levels();
    const std::size_t k = lambda.point ? 1 : noises.size();
    check_dim(k >= 1, "need at least one sample");
    const double inv_k = 1.0 / static_cast<double>(k);

    GradientSignals g;
    g.d_mean.resize(nlev);
    g.d_log_var.resize(nlev);
    for (std::size_t il = 0; il < nlev; ++il) {
        g.d_mean[il].assign(m.latent_dims[il], 0.0);
        if (!lambda.point) g.d_log_var[il].assign(m.latent_dims[il], 0.0);
    }
    ElboBreakdown b;
    b.kl_per_level.assign(nlev, 0.0);
    b.samples_used = k;

    // Accumulators for the closed-form divergence gradient in analytic
    // mode, averaged over the parent samples that produced each prior.
    std::vector<Vec> kl_mean_term(nlev), kl_lv_term(nlev);
    const bool analytic = (kl_mode == KlMode::Analytic) && !lambda.point;
    if (analytic) {
        for (std::size_t il = 0; il < nlev; ++il) {
            kl_mean_term[il].assign(m.latent_dims[il], 0.0);
            kl_lv_term[il].assign(m.latent_dims[il], 0.0);
        }
    }

    detail::SamplePass sp;
    for (std::size_t s = 0; s < k; ++s) {
        const NoiseDraw* noise = lambda.point ? nullptr : &noises[s];
        detail::run_sample(m, x, lambda, noise, true, sp);
        b.recon += sp.log_px;

        // Contribution flowing through z at each level: reconstruction
        // (or the level below's prior mismatch) minus this level's own
        // prior pull; the Jacobian transposes ride on the decoder tapes.
        // Upstreams carry the 1/K average so theta accumulation is
        // already correctly scaled.
        for (std::size_t il = 0; il < nlev; ++il) {
            const std::size_t n = m.latent_dims[il];
            Vec through_z;
            if (il == 0) {
                Vec u = detail::output_upstream(m, x, sp);
                for (auto& ui : u) ui *= inv_k;
                through_z = mlp_backward(m.decoders[0], sp.tapes[0], u,
                                         theta ? &theta->decoders[0] : nullptr);
            } else {
                // Upstream into the decoder that produced level il-1's prior.
                const std::size_t nb = m.latent_dims[il - 1];
                Vec u(2 * nb, 0.0);
                const Vec& pm = sp.prior_mean[il - 1];
                const Vec& plv = sp.prior_log_var[il - 1];
                const auto& live = sp.prior_lv_live[il - 1];
                const DiagGaussian& qb = lambda.levels[il - 1];
                const double w = kl_weight * inv_k;
                for (std::size_t i = 0; i < nb; ++i) {
                    double inv_vp = std::exp(-plv[i]);
                    if (!analytic) {
                        double diff = sp.z[il - 1][i] - pm[i];
                        u[i] = w * diff * inv_vp;
                        if (live[i]) u[nb + i] = w * 0.5 * (diff * diff * inv_vp - 1.0);
                    } else {
                        double diff = qb.mean[i] - pm[i];
                        double vq = std::exp(qb.log_var[i]);
                        u[i] = w * diff * inv_vp;
                        if (live[i]) u[nb + i] = w * 0.5 * (vq * inv_vp + diff * diff * inv_vp - 1.0);
                    }
                }
                through_z = mlp_backward(m.decoders[il], sp.tapes[il], u,
                                         theta ? &theta->decoders[il] : nullptr);
            }
            // This level's own prior pull (sampled form); analytic mode
            // adds its divergence gradient in parameter space below.
            if (!analytic) {
                for (std::size_t i = 0; i < n; ++i) {
                    double ez = (sp.z[il][i] - sp.prior_mean[il][i]) * std::exp(-sp.prior_log_var[il][i]);
                    through_z[i] -= kl_weight * inv_k * ez;
                }
            } else {
                for (std::size_t i = 0; i < n; ++i) {
                    double inv_vp = std::exp(-sp.prior_log_var[il][i]);
                    kl_mean_term[il][i] += (lambda.levels[il].mean[i] - sp.prior_mean[il][i]) * inv_vp;
                    kl_lv_term[il][i] += std::exp(lambda.levels[il].log_var[i]) * inv_vp;
                }
            }
            for (std::size_t i = 0; i < n; ++i) g.d_mean[il][i] += through_z[i];
            if (!lambda.point) {
                const DiagGaussian& q = lambda.levels[il];
                for (std::size_t i = 0; i < n; ++i) {
                    double dz_dlv = 0.5 * std::exp(0.5 * q.log_var[i]) * noise->per_level[il][i];
                    g.d_log_var[il][i] += through_z[i] * dz_dlv;
                }
            }
        }

        // Output variance gradient (Gaussian family).
        if (theta && m.output == OutputFamily::Gaussian) {
            for (std::size_t i = 0; i < m.data_dim; ++i) {
                double diff = x[i] - sp.out_mean[i];
                theta->output_log_var[i] +=
                    inv_k * 0.5 * (diff * diff * std::exp(-m.output_log_var[i]) - 1.0);
            }
        }

        for (std::size_t il = 0; il < nlev; ++il) {
            DiagGaussian prior(sp.prior_mean[il], sp.prior_log_var[il]);
            if (lambda.point)
                b.kl_per_level[il] += -log_prob_diag_gaussian(sp.z[il], prior);
            else if (kl_mode == KlMode::Sampled)
                b.kl_per_level[il] += log_prob_diag_gaussian(sp.z[il], lambda.levels[il]) -
                                      log_prob_diag_gaussian(sp.z[il], prior);
            else
                b.kl_per_level[il] += kl_diag_gaussians(lambda.levels[il], prior);
        }
    }

    if (!lambda.point) {
        for (std::size_t il = 0; il < nlev; ++il) {
            const std::size_t n = m.latent_dims[il];
            if (kl_mode == KlMode::Sampled) {
                // The entropy term is exact under reparameterization.
                for (std::size_t i = 0; i < n; ++i) g.d_log_var[il][i] += kl_weight * 0.5;
            } else {
                for (std::size_t i = 0; i < n; ++i) {
                    g.d_mean[il][i] -= kl_weight * inv_k * kl_mean_term[il][i];
                    g.d_log_var[il][i] += kl_weight * 0.5 * (1.0 - inv_k * kl_lv_term[il][i]);
                }
            }
        }
    }

    b.recon *= inv_k;
    double kl_sum = 0.0;
    for (auto& v : b.kl_per_level) {
        v *= inv_k;
        kl_sum += v;
    }
    b.total = b.recon - kl_weight * kl_sum;
    if (breakdown) *breakdown = b;
    for (std::size_t il = 0; il < nlev; ++il) {
        if (!all_finite(g.d_mean[il]) || (!lambda.point && !all_finite(g.d_log_var[il])))
            throw std::runtime_error("grad_lambda: non-finite gradient at level " + std::to_string(il));
    }
    return g;
}

// Precision-weighted mismatch signals, Monte-Carlo averaged over the
// provided noises.
inline ErrorSignals error_signals(const GenerativeModel& m, const Vec& x,
                                  const PosteriorEstimate& lambda, const Noises& noises) {
    check_dim(lambda.levels.size() == m.levels(), "estimate levels");
    const std::size_t k = lambda.point ? 1 : noises.size();
    check_dim(k >= 1, "need at least one sample");
    const double inv_k = 1.0 / static_cast<double>(k);
    ErrorSignals e;
    e.data_error.assign(m.data_dim, 0.0);
    e.prior_error.resize(m.levels());
    for (std::size_t il = 0; il < m.levels(); ++il) e.prior_error[il].assign(m.latent_dims[il], 0.0);
    detail::SamplePass sp;
    for (std::size_t s = 0; s < k; ++s) {
        detail::run_sample(m, x, lambda, lambda.point ? nullptr : &noises[s], false, sp);
        if (m.output == OutputFamily::Bernoulli) {
            for (std::size_t i = 0; i < m.data_dim; ++i) {
                double mu = sp.out_mean[i];
                e.data_error[i] += inv_k * (x[i] - mu) / (mu * (1.0 - mu));
            }
        } else {
            for (std::size_t i = 0; i < m.data_dim; ++i)
                e.data_error[i] += inv_k * (x[i] - sp.out_mean[i]) * std::exp(-m.output_log_var[i]);
        }
        for (std::size_t il = 0; il < m.levels(); ++il)
            for (std::size_t i = 0; i < m.latent_dims[il]; ++i)
                e.prior_error[il][i] += inv_k * (sp.z[il][i] - sp.prior_mean[il][i]) *
                                        std::exp(-sp.prior_log_var[il][i]);
    }
    return e;
}

// For a Gaussian output, the data error is an affine map of x under
// fixed noises: error = a .* x + b with a = E[1/var_x], b = -E[mean_x/var_x].
struct ErrorAffine {
    Vec a;  // diagonal
    Vec b;
};

inline ErrorAffine error_affine_coefficients(const GenerativeModel& m,
                                             const PosteriorEstimate& lambda, const Noises& noises) {
    if (m.output != OutputFamily::Gaussian)
        throw std::invalid_argument("error_affine_coefficients: Gaussian output only");
    const std::size_t k = lambda.point ? 1 : noises.size();
    check_dim(k >= 1, "need at least one sample");
    const double inv_k = 1.0 / static_cast<double>(k);
    ErrorAffine r;
    r.a.assign(m.data_dim, 0.0);
    r.b.assign(m.data_dim, 0.0);
    detail::SamplePass sp;
    Vec dummy_x(m.data_dim, 0.0);
    for (std::size_t s = 0; s < k; ++s) {
        detail::run_sample(m, dummy_x, lambda, lambda.point ? nullptr : &noises[s], false, sp);
        for (std::size_t i = 0; i < m.data_dim; ++i) {
            double inv_v = std::exp(-m.output_log_var[i]);
            r.a[i] += inv_k * inv_v;
            r.b[i] -= inv_k * sp.out_mean[i] * inv_v;
        }
    }
    return r;
}

}  // namespace amortize
