#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <vector>

#include "lgmcr/families.hpp"
#include "lgmcr/rng.hpp"
#include "support/oracles.hpp"

using namespace lgmcr;

namespace {

// mixed absolute/relative discrepancy
double rel_err(double got, double want) {
    return std::abs(got - want) / std::max(1.0, std::abs(want));
}

// first derivative: step 1e-5; second derivative: step 1e-3 (a 1e-5 step
// makes the difference quotient lose ~10 digits to cancellation, which is
// below the accuracy this check asserts)
void check_derivatives(const std::function<LoglikTerms(double)>& f, double eta) {
    const LoglikTerms at = f(eta);
    auto value = [&](double e) { return f(e).value; };
    const double d1 = oracle::central_diff_1(value, eta, 1e-5);
    const double d2 = oracle::central_diff_2(value, eta, 1e-3);
    REQUIRE(rel_err(at.d_eta, d1) < 1e-5);
    REQUIRE(rel_err(at.d2_eta, d2) < 1e-5);
    REQUIRE(at.d2_eta <= 0.0);
}

}  // namespace

TEST_CASE("gaussian family closed-form values", "[families]") {
    const LoglikTerms a = gaussian_loglik(0.0, 0.0, 1.0);
    CHECK(a.value == Catch::Approx(-0.5 * std::log(2.0 * M_PI)).margin(1e-14));
    CHECK(a.d_eta == 0.0);
    CHECK(a.d2_eta == -1.0);
    CHECK(gaussian_loglik(1.0, 0.0, 4.0).d_eta == 4.0);
    CHECK_THROWS_AS(gaussian_loglik(0.0, 0.0, 0.0), numeric_error);
}

TEST_CASE("poisson family closed-form values", "[families]") {
    CHECK(poisson_loglik(0.0, 0.0).value == Catch::Approx(-1.0).margin(1e-14));
    CHECK(poisson_loglik(3.0, std::log(3.0)).d_eta == Catch::Approx(0.0).margin(1e-12));
    CHECK_THROWS_AS(poisson_loglik(-1.0, 0.0), data_error);
    CHECK_THROWS_AS(poisson_loglik(2.5, 0.0), data_error);
    CHECK_THROWS_AS(poisson_loglik(1.0, 701.0), numeric_error);
}

TEST_CASE("survival family closed-form values", "[families]") {
    // h(1) = 2, H(1) = 1 for alpha 2 at eta 0
    CHECK(weibull_surv_loglik(1.0, 1, 0.0, 2.0).value ==
          Catch::Approx(std::log(2.0) - 1.0).margin(1e-14));
    CHECK(exponential_surv_loglik(2.0, 1, 0.0).value == Catch::Approx(-2.0).margin(1e-14));
    CHECK(exponential_surv_loglik(1.0, 0, 0.0).value == Catch::Approx(-1.0).margin(1e-14));
    CHECK_THROWS_AS(weibull_surv_loglik(0.0, 1, 0.0, 1.0), numeric_error);
    CHECK_THROWS_AS(weibull_surv_loglik(1.0, 2, 0.0, 1.0), numeric_error);
    CHECK_THROWS_AS(weibull_surv_loglik(1.0, 1, 0.0, 0.0), numeric_error);
    CHECK_THROWS_AS(exponential_surv_loglik(1.0, 1, 705.0), numeric_error);
    CHECK_THROWS_AS(weibull_surv_loglik(2.0, 1, 360.0, 2.0), numeric_error);
}

TEST_CASE("all four families match finite differences at 1000 points", "[families]") {
    RngStream r(1001);
    for (int k = 0; k < 1000; ++k) {
        const double eta = r.next_normal(0.0, 1.5);
        {
            const double tau = 0.1 + 4.9 * r.next_double();
            const double y = eta + r.next_normal(0.0, 1.0);
            check_derivatives([&](double e) { return gaussian_loglik(y, e, tau); }, eta);
        }
        {
            const double y = static_cast<double>(r.next_int(0, 30));
            check_derivatives([&](double e) { return poisson_loglik(y, e); }, eta);
        }
        {
            const double t = 0.05 + 4.95 * r.next_double();
            const int d = static_cast<int>(r.next_bernoulli(0.5));
            const double alpha = 0.2 + 3.8 * r.next_double();
            check_derivatives([&](double e) { return weibull_surv_loglik(t, d, e, alpha); },
                              eta);
            check_derivatives([&](double e) { return exponential_surv_loglik(t, d, e); }, eta);
        }
    }
}

TEST_CASE("unit-shape weibull is the exponential family", "[families]") {
    RngStream r(2002);
    for (int k = 0; k < 10000; ++k) {
        const double t = 0.01 + 10.0 * r.next_double();
        const int d = static_cast<int>(r.next_bernoulli(0.5));
        const double eta = r.next_normal(0.0, 2.0);
        const LoglikTerms w = weibull_surv_loglik(t, d, eta, 1.0);
        const LoglikTerms e = exponential_surv_loglik(t, d, eta);
        REQUIRE(std::abs(w.value - e.value) < 1e-14 * std::max(1.0, std::abs(e.value)));
        REQUIRE(std::abs(w.d_eta - e.d_eta) < 1e-14 * std::max(1.0, std::abs(e.d_eta)));
        REQUIRE(std::abs(w.d2_eta - e.d2_eta) < 1e-14 * std::max(1.0, std::abs(e.d2_eta)));
    }
}

TEST_CASE("precision prior calibration and normalization", "[families]") {
    // P(sigma > 1) = alpha means P(tau < 1) = alpha
    const double u = 1.0, alpha = 0.01;
    auto dens = [&](double tau) { return std::exp(pc_prec_log_prior(tau, u, alpha)); };
    const double below1 = oracle::integrate(dens, 1e-10, 1.0, 1e-12);
    CHECK(below1 == Catch::Approx(alpha).margin(1e-6));

    // integrates to one; integrate decade by decade to cover the heavy tail
    double total = below1;
    for (double lo = 1.0; lo < 1e13; lo *= 10.0)
        total += oracle::integrate(dens, lo, 10.0 * lo, 1e-10);
    // remaining tail mass P(tau > T) = 1 - exp(-lambda T^(-1/2))
    const double lambda = -std::log(alpha) / u;
    total += 1.0 - std::exp(-lambda / std::sqrt(1e13));
    CHECK(total == Catch::Approx(1.0).margin(1e-6));

    // change of variables back to sigma = tau^(-1/2) recovers Exp(lambda)
    for (double tau : {0.3, 1.0, 2.0, 7.0, 50.0}) {
        const double sigma = 1.0 / std::sqrt(tau);
        const double exp_log_density = std::log(lambda) - lambda * sigma;
        const double jac = std::log(0.5) - 1.5 * std::log(tau);  // |d sigma / d tau|
        CHECK(pc_prec_log_prior(tau, u, alpha) ==
              Catch::Approx(exp_log_density + jac).margin(1e-12));
    }
    CHECK_THROWS_AS(pc_prec_log_prior(0.0, 1.0, 0.01), numeric_error);
    CHECK_THROWS_AS(pc_prec_log_prior(1.0, 1.0, 1.5), numeric_error);
}

TEST_CASE("scaled-log-gaussian prior", "[families]") {
    const double s = 10.0, tau0 = 1.0;
    CHECK(scaled_log_gaussian_log_prior(1.0, s, tau0) ==
          Catch::Approx(0.5 * std::log(tau0 / (2.0 * M_PI)) + std::log(s)).margin(1e-12));

    // symmetric in the log variable: pi(a) a = pi(1/a) / a
    for (double a : {0.5, 0.9, 1.7, 3.0}) {
        const double lhs = std::exp(scaled_log_gaussian_log_prior(a, s, tau0)) * a;
        const double rhs = std::exp(scaled_log_gaussian_log_prior(1.0 / a, s, tau0)) / a;
        CHECK(lhs == Catch::Approx(rhs).epsilon(1e-10));
    }

    auto dens = [&](double p) { return std::exp(scaled_log_gaussian_log_prior(p, s, tau0)); };
    // +-10 standard deviations of ln(param) is (e^-1, e^1)
    CHECK(oracle::integrate(dens, std::exp(-1.5), std::exp(1.5), 1e-10) ==
          Catch::Approx(1.0).margin(1e-6));
}

TEST_CASE("single-cause exponential incidence matches the closed form", "[families]") {
    std::vector<double> grid;
    for (int i = 0; i <= 500; ++i) grid.push_back(5.0 * i / 500.0);
    const auto curves = cumulative_incidence({{HazardKind::exponential, 0.0, 1.0}}, grid);
    REQUIRE(curves.size() == 1);
    for (size_t i = 0; i < grid.size(); ++i)
        REQUIRE(std::abs(curves[0][i] - (1.0 - std::exp(-grid[i]))) < 1e-6);
}

TEST_CASE("equal competing hazards split incidence evenly", "[families]") {
    std::vector<double> grid;
    for (int i = 0; i <= 2000; ++i) grid.push_back(40.0 * i / 2000.0);
    const auto curves = cumulative_incidence(
        {{HazardKind::exponential, 0.0, 1.0}, {HazardKind::exponential, 0.0, 1.0}}, grid);
    CHECK(curves[0].back() == Catch::Approx(0.5).margin(1e-6));
    CHECK(curves[1].back() == Catch::Approx(0.5).margin(1e-6));
}

TEST_CASE("three-cause incidence limits match a latent-minimum simulation", "[families]") {
    // hazards at age 45 with the shared effect at zero
    const double eta1 = 0.01 * 45, eta2 = 0.015 * 45, eta3 = 0.0003 * 45;
    std::vector<HazardSpec> hz = {{HazardKind::exponential, eta1, 1.0},
                                  {HazardKind::exponential, eta2, 1.0},
                                  {HazardKind::exponential, eta3, 1.0}};
    std::vector<double> grid;
    for (int i = 0; i <= 4000; ++i) grid.push_back(12.0 * i / 4000.0);
    const auto curves = cumulative_incidence(hz, grid);

    RngStream r(31415);
    std::vector<double> wins(3, 0.0);
    const int n = 1000000;
    for (int i = 0; i < n; ++i) {
        const double t1 = r.next_exponential(std::exp(eta1));
        const double t2 = r.next_exponential(std::exp(eta2));
        const double t3 = r.next_exponential(std::exp(eta3));
        if (t1 <= t2 && t1 <= t3)
            wins[0] += 1.0;
        else if (t2 <= t3)
            wins[1] += 1.0;
        else
            wins[2] += 1.0;
    }
    for (size_t j = 0; j < 3; ++j)
        CHECK(curves[j].back() == Catch::Approx(wins[j] / n).margin(0.01));

    // accounting identity on the same grid
    for (size_t i = 0; i < grid.size(); ++i) {
        const double total = curves[0][i] + curves[1][i] + curves[2][i] +
                             survival_probability(hz, grid[i]);
        REQUIRE(std::abs(total - 1.0) < 2e-4);
    }
    // monotone, bounded
    for (size_t j = 0; j < 3; ++j)
        for (size_t i = 1; i < grid.size(); ++i) {
            REQUIRE(curves[j][i] >= curves[j][i - 1]);
            REQUIRE(curves[j][i] <= 1.0);
        }
}

TEST_CASE("weibull incidence handles shape below one", "[families]") {
    for (double alpha : {0.5, 1.0, 2.0}) {
        const double eta = 0.3;
        std::vector<double> grid;
        for (int i = 0; i <= 1000; ++i) grid.push_back(3.0 * i / 1000.0);
        const auto curves = cumulative_incidence({{HazardKind::weibull, eta, alpha}}, grid);
        for (size_t i = 0; i < grid.size(); ++i) {
            const double big_h = std::exp(alpha * eta) * std::pow(grid[i], alpha);
            REQUIRE(std::abs(curves[0][i] - (1.0 - std::exp(-big_h))) < 1e-6);
        }
    }
    CHECK_THROWS_AS(cumulative_incidence({{HazardKind::exponential, 0.0, 1.0}}, {0.0}),
                    numeric_error);
    CHECK_THROWS_AS(cumulative_incidence({{HazardKind::exponential, 0.0, 1.0}}, {0.0, 2.0, 1.0}),
                    numeric_error);
}
