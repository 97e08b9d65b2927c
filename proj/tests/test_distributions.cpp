#include <catch2/catch_amalgamated.hpp>

#include "amortize/dist.hpp"
#include "amortize/rng.hpp"

using namespace amortize;
using Catch::Approx;

TEST_CASE("reparameterize") {
    SECTION("standard parameters pass the noise through") {
        DiagGaussian q(Vec{0, 0}, Vec{0, 0});
        CHECK(reparameterize(q, {1.0, -1.0}) == Vec{1.0, -1.0});
    }
    SECTION("general arithmetic") {
        DiagGaussian q(Vec{2.0, -1.0}, Vec{std::log(4.0), std::log(1.0)});
        Vec z = reparameterize(q, {0.5, -2.0});
        CHECK(z[0] == Approx(3.0));
        CHECK(z[1] == Approx(-3.0));
    }
    SECTION("zero noise returns the mean") {
        DiagGaussian q(Vec{0.3, -0.7}, Vec{1.0, 2.0});
        CHECK(reparameterize(q, {0.0, 0.0}) == q.mean);
    }
}

TEST_CASE("log_prob_bernoulli closed forms") {
    CHECK(log_prob_bernoulli({1.0}, {0.5}) == Approx(-std::log(2.0)).epsilon(1e-12));
    CHECK(log_prob_bernoulli({1.0, 0.0}, {0.9, 0.1}) == Approx(2.0 * std::log(0.9)).epsilon(1e-12));
    const std::size_t n = 17;
    Vec x(n, 0.5), m(n, 0.5);
    CHECK(log_prob_bernoulli(x, m) == Approx(-double(n) * std::log(2.0)).epsilon(1e-12));
}

TEST_CASE("log_prob_diag_gaussian closed forms") {
    CHECK(log_prob_diag_gaussian({0.0}, DiagGaussian(Vec{0.0}, Vec{0.0})) ==
          Approx(-0.5 * kLog2Pi).epsilon(1e-12));
    CHECK(log_prob_diag_gaussian({1.0, 1.0}, DiagGaussian(Vec{0, 0}, Vec{0, 0})) ==
          Approx(-kLog2Pi - 1.0).epsilon(1e-12));
    SECTION("the mean maximizes the density over x") {
        Rng rng(5);
        DiagGaussian d(rng.normal_vec(3), rng.normal_vec(3));
        double at_mode = log_prob_diag_gaussian(d.mean, d);
        for (int rep = 0; rep < 20; ++rep) {
            Vec x = d.mean;
            axpy(x, 0.3, rng.normal_vec(3));
            CHECK(log_prob_diag_gaussian(x, d) <= at_mode);
        }
    }
}

TEST_CASE("kl_diag_gaussians closed forms and properties") {
    DiagGaussian std1(Vec{0.0}, Vec{0.0});
    CHECK(kl_diag_gaussians(std1, std1) == Approx(0.0).margin(1e-15));
    CHECK(kl_diag_gaussians(DiagGaussian(Vec{1.0}, Vec{0.0}), std1) == Approx(0.5).epsilon(1e-12));
    CHECK(kl_diag_gaussians(DiagGaussian(Vec{0.0}, Vec{1.0}), std1) ==
          Approx(0.5 * (std::exp(1.0) - 2.0)).epsilon(1e-12));
    SECTION("non-negative, zero only at equality") {
        Rng rng(8);
        for (int rep = 0; rep < 50; ++rep) {
            DiagGaussian q(rng.normal_vec(4), rng.normal_vec(4));
            DiagGaussian p(rng.normal_vec(4), rng.normal_vec(4));
            double kl = kl_diag_gaussians(q, p);
            CHECK(kl >= 0.0);
            bool equal = true;
            for (std::size_t i = 0; i < 4; ++i)
                equal = equal && std::abs(q.mean[i] - p.mean[i]) < 1e-12 &&
                        std::abs(q.log_var[i] - p.log_var[i]) < 1e-12;
            if (!equal) CHECK(kl > 0.0);
            CHECK(kl_diag_gaussians(q, q) == Approx(0.0).margin(1e-15));
        }
    }
}
