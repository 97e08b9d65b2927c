#include <catch2/catch_amalgamated.hpp>

#include "amortize/data_io.hpp"
#include "amortize/model.hpp"
#include "helpers.hpp"

using namespace amortize;
using Catch::Approx;
using testutil::finite_diff;
using testutil::flatten_grads;
using testutil::flatten_lambda;
using testutil::rel_err;
using testutil::unflatten_lambda;

namespace {

struct Case {
    GenerativeModel model;
    Vec x;
    PosteriorEstimate lambda;
    Noises noises;
};

Case make_case(OutputFamily family, std::vector<std::size_t> latents, std::size_t nx,
               std::size_t k, std::uint64_t seed, bool point = false) {
    Rng rng(seed);
    Case c;
    c.model = make_model(family, nx, latents, {5}, rng.child(1));
    c.x.resize(nx);
    if (family == OutputFamily::Bernoulli) {
        Rng xr = rng.child(2);
        for (auto& v : c.x) v = xr.next_uniform() < 0.35 ? 1.0 : 0.0;
    } else {
        c.x = rng.child(2).normal_vec(nx);
        Rng vr = rng.child(5);
        for (auto& lv : c.model.output_log_var) lv = 0.4 * vr.next_normal();
    }
    c.lambda = make_estimate(c.model, point);
    Rng lr = rng.child(3);
    for (auto& lev : c.lambda.levels) {
        for (auto& v : lev.mean) v = 0.7 * lr.next_normal();
        for (auto& v : lev.log_var) v = 0.5 * lr.next_normal();
    }
    Rng nr = rng.child(4);
    c.noises = draw_noises(c.model, k, nr);
    return c;
}

double elbo_at(const Case& c, const Vec& flat, KlMode mode) {
    PosteriorEstimate lam = unflatten_lambda(c.lambda, flat);
    return elbo(c.model, c.x, lam, c.noises, mode).total;
}

}  // namespace

TEST_CASE("elbo breakdown identity and permutation invariance") {
    Case c = make_case(OutputFamily::Gaussian, {3, 2}, 6, 3, 11);
    for (KlMode mode : {KlMode::Analytic, KlMode::Sampled}) {
        ElboBreakdown b = elbo(c.model, c.x, c.lambda, c.noises, mode);
        double kl_sum = 0;
        for (double v : b.kl_per_level) kl_sum += v;
        CHECK(b.total == Approx(b.recon - kl_sum).margin(1e-9));
        Noises shuffled = {c.noises[2], c.noises[0], c.noises[1]};
        ElboBreakdown b2 = elbo(c.model, c.x, c.lambda, shuffled, mode);
        CHECK(b2.total == Approx(b.total).margin(1e-12));
    }
}

TEST_CASE("elbo with q equal to the prior and a z-blind decoder has zero divergence") {
    Case c = make_case(OutputFamily::Bernoulli, {4}, 5, 2, 21);
    for (auto& v : c.model.decoders[0].layers.front().w.a) v = 0.0;  // decoder ignores z
    c.lambda.levels[0] = c.model.top_prior;
    ElboBreakdown b = elbo(c.model, c.x, c.lambda, c.noises, KlMode::Analytic);
    CHECK(b.kl_per_level[0] == Approx(0.0).margin(1e-15));
    // Reconstruction equals the constant-decoder likelihood.
    detail::SamplePass sp;
    detail::run_sample(c.model, c.x, c.lambda, &c.noises[0], false, sp);
    CHECK(b.total == Approx(sp.log_px).margin(1e-12));
}

TEST_CASE("single-sample sampled-mode elbo is the joint-minus-posterior estimate") {
    Case c = make_case(OutputFamily::Gaussian, {3}, 5, 1, 31);
    ElboBreakdown b = elbo(c.model, c.x, c.lambda, c.noises, KlMode::Sampled);
    Vec z = reparameterize(c.lambda.levels[0], c.noises[0].per_level[0]);
    detail::SamplePass sp;
    detail::run_sample(c.model, c.x, c.lambda, &c.noises[0], false, sp);
    DiagGaussian prior = c.model.top_prior;
    double want = sp.log_px + log_prob_diag_gaussian(z, prior) -
                  log_prob_diag_gaussian(z, c.lambda.levels[0]);
    CHECK(b.total == Approx(want).margin(1e-12));
}

TEST_CASE("point-estimate elbo is the joint density at the mean") {
    Case c = make_case(OutputFamily::Bernoulli, {2}, 6, 1, 41, true);
    ElboBreakdown b = elbo(c.model, c.x, c.lambda, {}, KlMode::Analytic);
    detail::SamplePass sp;
    detail::run_sample(c.model, c.x, c.lambda, nullptr, false, sp);
    double want = sp.log_px + log_prob_diag_gaussian(c.lambda.levels[0].mean, c.model.top_prior);
    CHECK(b.total == Approx(want).margin(1e-12));
}

TEST_CASE("grad_lambda vanishes when both mismatch terms vanish") {
    Case c = make_case(OutputFamily::Gaussian, {3}, 5, 1, 51);
    for (auto& l : c.model.decoders[0].layers)
        for (auto& v : l.w.a) v = 0.0;
    c.lambda.levels[0] = c.model.top_prior;
    for (auto& n : c.noises[0].per_level[0]) n = 0.0;
    // Make the output mean equal to the data so the data error is zero too.
    c.x = mlp_forward(c.model.decoders[0], c.lambda.levels[0].mean);
    GradientSignals g = grad_lambda(c.model, c.x, c.lambda, c.noises, KlMode::Sampled);
    for (double v : g.d_mean[0]) CHECK(v == Approx(0.0).margin(1e-14));
}

TEST_CASE("entropy contribution to the log-variance gradient is exactly +1/2") {
    // Zero-weight decoder, matched means, zero noise: every other term
    // vanishes and the sampled-mode log-variance gradient is the exact
    // entropy constant (in log-variance coordinates).
    Case c = make_case(OutputFamily::Gaussian, {3}, 5, 1, 61);
    for (auto& l : c.model.decoders[0].layers)
        for (auto& v : l.w.a) v = 0.0;
    c.lambda.levels[0] = c.model.top_prior;
    for (auto& n : c.noises[0].per_level[0]) n = 0.0;
    c.x = mlp_forward(c.model.decoders[0], c.lambda.levels[0].mean);
    GradientSignals g = grad_lambda(c.model, c.x, c.lambda, c.noises, KlMode::Sampled);
    for (double v : g.d_log_var[0]) CHECK(v == Approx(0.5).margin(1e-14));
}

TEST_CASE("grad_lambda matches finite differences of the bound") {
    struct Spec {
        OutputFamily fam;
        std::vector<std::size_t> lat;
        std::size_t nx;
        std::size_t k;
    };
    std::vector<Spec> specs = {
        {OutputFamily::Bernoulli, {3}, 6, 1},  {OutputFamily::Bernoulli, {3}, 6, 3},
        {OutputFamily::Gaussian, {4}, 7, 2},   {OutputFamily::Bernoulli, {3, 2}, 6, 2},
        {OutputFamily::Gaussian, {3, 2}, 5, 2}, {OutputFamily::Gaussian, {2, 2}, 4, 1},
    };
    std::uint64_t seed = 100;
    for (const auto& s : specs) {
        for (KlMode mode : {KlMode::Sampled, KlMode::Analytic}) {
            Case c = make_case(s.fam, s.lat, s.nx, s.k, ++seed);
            GradientSignals g = grad_lambda(c.model, c.x, c.lambda, c.noises, mode);
            Vec got = flatten_grads(g, false);
            Vec want = finite_diff([&](const Vec& f) { return elbo_at(c, f, mode); },
                                   flatten_lambda(c.lambda));
            INFO("family " << (s.fam == OutputFamily::Bernoulli ? "bernoulli" : "gaussian")
                           << " levels " << s.lat.size() << " mode "
                           << (mode == KlMode::Sampled ? "sampled" : "analytic"));
            CHECK(rel_err(got, want) < 1e-4);
        }
    }
}

TEST_CASE("grad_lambda matches finite differences in point mode") {
    Case c = make_case(OutputFamily::Bernoulli, {2}, 6, 1, 71, true);
    GradientSignals g = grad_lambda(c.model, c.x, c.lambda, {}, KlMode::Sampled);
    Vec want = finite_diff(
        [&](const Vec& f) {
            PosteriorEstimate lam = unflatten_lambda(c.lambda, f);
            return elbo(c.model, c.x, lam, {}, KlMode::Sampled).total;
        },
        flatten_lambda(c.lambda));
    CHECK(rel_err(g.d_mean[0], want) < 1e-6);
}

TEST_CASE("top-level gradient feels the lower prior decoder (finite differences)") {
    Case c = make_case(OutputFamily::Gaussian, {3, 2}, 5, 2, 81);
    GradientSignals g = grad_lambda(c.model, c.x, c.lambda, c.noises, KlMode::Sampled);
    // Differentiate only the top level's mean entries.
    Vec flat = flatten_lambda(c.lambda);
    const std::size_t top_mean_off = 2 * 3;  // level-0 mean+logvar
    Vec want = finite_diff([&](const Vec& f) { return elbo_at(c, f, KlMode::Sampled); }, flat);
    Vec got = flatten_grads(g, false);
    Vec want_top(want.begin() + top_mean_off, want.begin() + top_mean_off + 2);
    Vec got_top(got.begin() + top_mean_off, got.begin() + top_mean_off + 2);
    CHECK(rel_err(got_top, want_top) < 1e-4);
    // The coupling is real: zeroing the prior decoder changes the gradient.
    for (auto& l : c.model.decoders[1].layers)
        for (auto& v : l.w.a) v = 0.0;
    GradientSignals g2 = grad_lambda(c.model, c.x, c.lambda, c.noises, KlMode::Sampled);
    CHECK(rel_err(g2.d_mean[1], g.d_mean[1]) > 1e-3);
}

TEST_CASE("generative-parameter gradients match finite differences") {
    for (KlMode mode : {KlMode::Sampled, KlMode::Analytic}) {
        Case c = make_case(OutputFamily::Gaussian, {3, 2}, 5, 2, 91);
        ThetaGrad tg = make_theta_grad(c.model);
        grad_lambda(c.model, c.x, c.lambda, c.noises, mode, 1.0, &tg);
        auto objective = [&]() { return elbo(c.model, c.x, c.lambda, c.noises, mode).total; };
        struct Probe {
            double* p;
            double got;
        };
        std::vector<Probe> probes = {
            {&c.model.decoders[0].layers[0].w(1, 2), tg.decoders[0].layers[0].w(1, 2)},
            {&c.model.decoders[0].layers[1].b[3], tg.decoders[0].layers[1].b[3]},
            {&c.model.decoders[1].layers[0].w(2, 1), tg.decoders[1].layers[0].w(2, 1)},
            {&c.model.decoders[1].layers[1].b[4], tg.decoders[1].layers[1].b[4]},
            {&c.model.output_log_var[2], tg.output_log_var[2]},
        };
        for (auto& pr : probes) {
            double orig = *pr.p;
            *pr.p = orig + 1e-5;
            double up = objective();
            *pr.p = orig - 1e-5;
            double down = objective();
            *pr.p = orig;
            CHECK(pr.got == Approx((up - down) / 2e-5).margin(2e-6));
        }
    }
}

TEST_CASE("gradient decomposition: transpose-Jacobian data error minus prior error") {
    Case c = make_case(OutputFamily::Gaussian, {4}, 7, 1, 101);
    GradientSignals g = grad_lambda(c.model, c.x, c.lambda, c.noises, KlMode::Sampled);
    ErrorSignals e = error_signals(c.model, c.x, c.lambda, c.noises);
    Vec z = reparameterize(c.lambda.levels[0], c.noises[0].per_level[0]);
    MlpTape tape;
    mlp_forward(c.model.decoders[0], z, &tape);
    Vec jt_ex = mlp_backward(c.model.decoders[0], tape, e.data_error);
    for (std::size_t i = 0; i < 4; ++i)
        CHECK(g.d_mean[0][i] == Approx(jt_ex[i] - e.prior_error[0][i]).margin(1e-10));
}

TEST_CASE("errors") {
    SECTION("Gaussian output with matched data gives zero data error") {
        Case c = make_case(OutputFamily::Gaussian, {3}, 5, 1, 111);
        for (auto& n : c.noises[0].per_level[0]) n = 0.0;
        c.x = mlp_forward(c.model.decoders[0], c.lambda.levels[0].mean);
        ErrorSignals e = error_signals(c.model, c.x, c.lambda, c.noises);
        for (double v : e.data_error) CHECK(v == Approx(0.0).margin(1e-14));
    }
    SECTION("sample at the prior mean gives zero prior error") {
        Case c = make_case(OutputFamily::Gaussian, {3}, 5, 1, 121);
        c.lambda.levels[0].mean = c.model.top_prior.mean;
        for (auto& n : c.noises[0].per_level[0]) n = 0.0;
        ErrorSignals e = error_signals(c.model, c.x, c.lambda, c.noises);
        for (double v : e.prior_error[0]) CHECK(v == Approx(0.0).margin(1e-14));
    }
    SECTION("Bernoulli error at rate one half") {
        Case c = make_case(OutputFamily::Bernoulli, {2}, 3, 1, 131);
        // Zero weights and biases put every output mean at 1/2.
        for (auto& l : c.model.decoders[0].layers) {
            for (auto& v : l.w.a) v = 0.0;
            for (auto& v : l.b) v = 0.0;
        }
        c.x.assign(3, 1.0);
        ErrorSignals e = error_signals(c.model, c.x, c.lambda, c.noises);
        for (double v : e.data_error) CHECK(v == Approx(2.0).epsilon(1e-12));
    }
}

TEST_CASE("data error is an affine function of the observation") {
    Case c = make_case(OutputFamily::Gaussian, {3}, 6, 4, 141);
    ErrorAffine aff = error_affine_coefficients(c.model, c.lambda, c.noises);
    SECTION("unit output variance gives the identity diagonal") {
        Case u = make_case(OutputFamily::Gaussian, {3}, 6, 2, 151);
        u.model.output_log_var.assign(6, 0.0);
        ErrorAffine ua = error_affine_coefficients(u.model, u.lambda, u.noises);
        for (double v : ua.a) CHECK(v == Approx(1.0).epsilon(1e-14));
    }
    SECTION("identity against error_signals for random observations") {
        Rng rng(7);
        for (int rep = 0; rep < 100; ++rep) {
            Vec x = rng.normal_vec(6);
            ErrorSignals e = error_signals(c.model, x, c.lambda, c.noises);
            for (std::size_t i = 0; i < 6; ++i)
                CHECK(e.data_error[i] == Approx(aff.a[i] * x[i] + aff.b[i]).margin(1e-12));
        }
    }
    SECTION("differences are linear") {
        Rng rng(8);
        Vec x1 = rng.normal_vec(6), x2 = rng.normal_vec(6);
        ErrorSignals e1 = error_signals(c.model, x1, c.lambda, c.noises);
        ErrorSignals e2 = error_signals(c.model, x2, c.lambda, c.noises);
        for (std::size_t i = 0; i < 6; ++i)
            CHECK(e1.data_error[i] - e2.data_error[i] ==
                  Approx(aff.a[i] * (x1[i] - x2[i])).margin(1e-12));
    }
    SECTION("Bernoulli family is rejected") {
        Case b = make_case(OutputFamily::Bernoulli, {2}, 4, 1, 161);
        CHECK_THROWS_AS(error_affine_coefficients(b.model, b.lambda, b.noises),
                        std::invalid_argument);
    }
}

TEST_CASE("bound slack on the conjugate oracle equals the posterior divergence") {
    auto p = make_linear_gaussian(3, 6, 2024, 6);
    GenerativeModel m = model_from_problem(p);
    Noises noises = antithetic_unit_noises(m);
    Rng rng(5);
    for (std::size_t e = 0; e < 6; ++e) {
        Vec x = Vec(p.xs.row(e), p.xs.row(e) + 6);
        PosteriorEstimate lam = make_estimate(m);
        for (std::size_t j = 0; j < 3; ++j) {
            lam.levels[0].mean[j] = p.posterior[e].mean[j] + 0.4 * rng.next_normal();
            lam.levels[0].log_var[j] = p.posterior[e].log_var[j] + 0.3 * rng.next_normal();
        }
        double bound = elbo(m, x, lam, noises, KlMode::Analytic).total;
        double slack = kl_diag_gaussians(lam.levels[0], p.posterior[e]);
        CHECK(bound <= p.evidence[e] + 1e-9);
        CHECK(p.evidence[e] - bound == Approx(slack).margin(1e-6));
    }
}

TEST_CASE("elbo reports which term went non-finite") {
    Case c = make_case(OutputFamily::Gaussian, {3}, 5, 1, 171);
    c.x[0] = std::numeric_limits<double>::infinity();
    CHECK_THROWS_WITH(elbo(c.model, c.x, c.lambda, c.noises, KlMode::Analytic),
                      Catch::Matchers::ContainsSubstring("reconstruction"));
}
