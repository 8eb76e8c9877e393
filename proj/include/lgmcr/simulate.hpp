#pragma once

// Data generators for the two simulation studies: discrete competing risks
// with a shared random intercept (Poisson counts, three exponential causes),
// and the intercept/slope variant (bivariate random effect, Weibull causes).
//
// Every individual draws from its own substream (split on the 1-based id), so
// the output does not depend on generation order. The per-individual draw
// order is part of the reproducibility contract:
//
//   competing-risks generator, default mode:
//     normal for u; age; one exponential per cause; censoring decision
//     (always one uniform, plus one more for the censoring time when it
//     fires); n_obs; the observation times; one Poisson per count.
//
//   legacy mode (reproduces the published appendix process):
//     normal z with u = 1 + sigma*z; the Exp(exp(0.5u)) observation window;
//     age; three Bernoulli(0.6) draws summed to a cause label independent of
//     u (0 = censored, drawing a rate-1 time); the event time from the
//     labeled cause's rate; n_obs; observation times over the window (which
//     may exceed the event time); the counts.
//
//   intercept/slope generator:
//     two normals for (v, w); age; one inverse-CDF Weibull time per cause;
//     n_obs; observation times; counts.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "data.hpp"
#include "errors.hpp"
#include "rng.hpp"

namespace lgmcr {

struct CauseCoefficients {
    double gamma = 0.0;  // scaling on the shared random effect
    double beta = 0.0;   // age coefficient
};

struct SimConfig {
    std::uint64_t seed = 1;
    int n_individuals = 1000;
    int n_obs_min = 10, n_obs_max = 15;
    std::vector<CauseCoefficients> causes = {{0.3, 0.01}, {-0.1, 0.015}, {0.2, 0.0003}};
    double trend_power = 1.2;  // log-mean of a count at time t is t^power + u
    int age_min = 15, age_max = 75;
    double sigma_u = 1.0;
    double censoring_rate = 0.0;
    bool legacy_appendix = false;
};

inline void validate_sim_config(const SimConfig& c) {
    if (c.n_individuals < 1) throw config_error("simulation: n_individuals must be >= 1");
    if (c.n_obs_min < 1 || c.n_obs_max < c.n_obs_min)
        throw config_error("simulation: need 1 <= n_obs_min <= n_obs_max");
    if (c.causes.empty()) throw config_error("simulation: at least one cause is required");
    if (c.age_max < c.age_min) throw config_error("simulation: age range is empty");
    if (!(c.sigma_u > 0.0)) throw config_error("simulation: sigma_u must be positive");
    if (!(c.censoring_rate >= 0.0) || c.censoring_rate >= 1.0)
        throw config_error("simulation: censoring_rate must be in [0,1)");
    if (!std::isfinite(c.trend_power)) throw config_error("simulation: trend power not finite");
}

inline JointDataset simulate_example5(const SimConfig& cfg) {
    validate_sim_config(cfg);
    const int n_causes = static_cast<int>(cfg.causes.size());
    std::vector<LongitudinalRecord> longitudinal;
    std::vector<SurvivalRecord> survival;
    longitudinal.reserve(static_cast<size_t>(cfg.n_individuals) *
                         static_cast<size_t>(cfg.n_obs_max));
    survival.reserve(static_cast<size_t>(cfg.n_individuals));

    const RngStream root(cfg.seed);
    for (int i = 1; i <= cfg.n_individuals; ++i) {
        RngStream rng = root.split(static_cast<std::uint64_t>(i));

        double u = 0.0, window = 0.0, observed_time = 0.0;
        int cause = 0;
        double age = 0.0;
        if (!cfg.legacy_appendix) {
            u = cfg.sigma_u * rng.next_normal();
            age = static_cast<double>(rng.next_int(cfg.age_min, cfg.age_max));
            double t_min = 0.0;
            int argmin = 0;
            for (int j = 0; j < n_causes; ++j) {
                const double rate =
                    std::exp(cfg.causes[static_cast<size_t>(j)].gamma * u +
                             cfg.causes[static_cast<size_t>(j)].beta * age);
                const double tj = rng.next_exponential(rate);
                if (j == 0 || tj < t_min) {
                    t_min = tj;
                    argmin = j + 1;
                }
            }
            observed_time = t_min;
            cause = argmin;
            if (cause < 1 || cause > n_causes)
                throw numeric_error("simulate: event label must be the latent-time argmin");
            const double uc = rng.next_double();
            if (uc < cfg.censoring_rate) {
                observed_time = t_min * rng.next_double();
                cause = 0;
            }
            window = observed_time;
        } else {
            const double z = rng.next_normal();
            u = 1.0 + cfg.sigma_u * z;
            window = rng.next_exponential(std::exp(0.5 * u));
            age = static_cast<double>(rng.next_int(cfg.age_min, cfg.age_max));
            int label = 0;
            for (int b = 0; b < 3; ++b) label += static_cast<int>(rng.next_bernoulli(0.6));
            if (label > n_causes) label = n_causes;
            double rate = 1.0;  // the censored label draws its time from a unit rate
            if (label >= 1)
                rate = std::exp(cfg.causes[static_cast<size_t>(label - 1)].gamma * u +
                                cfg.causes[static_cast<size_t>(label - 1)].beta * age);
            observed_time = rng.next_exponential(rate);
            cause = label;
        }

        SurvivalRecord srec;
        srec.original_id = i;
        srec.time = observed_time;
        srec.cause = cause;
        srec.covariates["age"] = age;
        survival.push_back(std::move(srec));

        const long n_obs = rng.next_int(cfg.n_obs_min, cfg.n_obs_max);
        for (long k = 0; k < n_obs; ++k) {
            const double t = window * rng.next_double();
            const double mean = std::exp(std::pow(t, cfg.trend_power) + u);
            LongitudinalRecord lrec;
            lrec.original_id = i;
            lrec.time = t;
            lrec.value = static_cast<double>(rng.next_poisson(mean));
            longitudinal.push_back(std::move(lrec));
        }
    }

    // legacy windows are drawn independently of the event time, so rows past
    // the event must be dropped rather than rejected
    return validate_joint_dataset(longitudinal, survival, n_causes, cfg.legacy_appendix);
}

// ---- intercept/slope generator ----

struct Example1Config {
    std::uint64_t seed = 1;
    int n_individuals = 500;
    int n_obs_min = 5, n_obs_max = 10;
    double tau_v = 1.0, tau_w = 1.0;
    double rho = 0.0;  // covariance between intercept and slope
    std::vector<double> alpha;             // per-cause Weibull shape
    std::vector<CauseCoefficients> causes; // gamma scales v, beta scales age
    std::vector<double> kappa;             // per-cause scaling on w
    double intercept_long = 0.0;
    double beta_age_long = 0.0;
    int age_min = 15, age_max = 75;
};

inline void validate_example1_config(const Example1Config& c) {
    if (c.n_individuals < 1) throw config_error("simulation: n_individuals must be >= 1");
    if (c.n_obs_min < 1 || c.n_obs_max < c.n_obs_min)
        throw config_error("simulation: need 1 <= n_obs_min <= n_obs_max");
    if (c.causes.empty()) throw config_error("simulation: at least one cause is required");
    if (c.alpha.size() != c.causes.size() || c.kappa.size() != c.causes.size())
        throw config_error("simulation: alpha/kappa lists must match the cause list");
    for (double a : c.alpha)
        if (!(a > 0.0)) throw config_error("simulation: Weibull shapes must be positive");
    if (!(c.tau_v > 0.0) || !(c.tau_w > 0.0))
        throw config_error("simulation: precisions must be positive");
    if (!(c.rho * c.rho < 1.0 / (c.tau_v * c.tau_w)))
        throw config_error("simulation: intercept/slope covariance is not positive definite");
    if (c.age_max < c.age_min) throw config_error("simulation: age range is empty");
}

inline JointDataset simulate_example1(const Example1Config& cfg) {
    validate_example1_config(cfg);
    const int n_causes = static_cast<int>(cfg.causes.size());
    // lower Cholesky factor of [[1/tau_v, rho], [rho, 1/tau_w]]
    const double l11 = 1.0 / std::sqrt(cfg.tau_v);
    const double l21 = cfg.rho / l11;
    const double l22 = std::sqrt(1.0 / cfg.tau_w - l21 * l21);

    std::vector<LongitudinalRecord> longitudinal;
    std::vector<SurvivalRecord> survival;
    survival.reserve(static_cast<size_t>(cfg.n_individuals));

    const RngStream root(cfg.seed);
    for (int i = 1; i <= cfg.n_individuals; ++i) {
        RngStream rng = root.split(static_cast<std::uint64_t>(i));

        const double z1 = rng.next_normal();
        const double z2 = rng.next_normal();
        const double v = l11 * z1;
        const double w = l21 * z1 + l22 * z2;
        const double age = static_cast<double>(rng.next_int(cfg.age_min, cfg.age_max));

        double t_min = 0.0;
        int cause = 0;
        for (int j = 0; j < n_causes; ++j) {
            const double eta = cfg.causes[static_cast<size_t>(j)].beta * age +
                               cfg.causes[static_cast<size_t>(j)].gamma * v +
                               cfg.kappa[static_cast<size_t>(j)] * w;
            const double uj = rng.next_double();
            const double tj = std::pow(-std::log(uj), 1.0 / cfg.alpha[static_cast<size_t>(j)]) *
                              std::exp(-eta);
            if (j == 0 || tj < t_min) {
                t_min = tj;
                cause = j + 1;
            }
        }

        SurvivalRecord srec;
        srec.original_id = i;
        srec.time = t_min;
        srec.cause = cause;
        srec.covariates["age"] = age;
        survival.push_back(std::move(srec));

        const long n_obs = rng.next_int(cfg.n_obs_min, cfg.n_obs_max);
        for (long k = 0; k < n_obs; ++k) {
            const double t = t_min * rng.next_double();
            const double mean =
                std::exp(cfg.intercept_long + cfg.beta_age_long * age + v + w * t);
            LongitudinalRecord lrec;
            lrec.original_id = i;
            lrec.time = t;
            lrec.value = static_cast<double>(rng.next_poisson(mean));
            longitudinal.push_back(std::move(lrec));
        }
    }
    return validate_joint_dataset(longitudinal, survival, n_causes, false);
}

}  // namespace lgmcr
