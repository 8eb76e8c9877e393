#pragma once

// Declarative description of a stacked joint model: one longitudinal block
// plus one block per competing cause, shared latent effects, and copy links
// that let a cause block load on an effect (or on the longitudinal linear
// predictor) through a scaling that can itself be estimated.

#include <string>
#include <vector>

#include "errors.hpp"

namespace lgmcr {

enum class PriorKind { pc_prec, scaled_log_gaussian, gaussian, fixed };

struct PriorSpec {
    PriorKind kind = PriorKind::pc_prec;
    double a = 1.0;  // pc_prec: u | scaled_log_gaussian: s | gaussian: mean | fixed: value
    double b = 0.01;  // pc_prec: alpha | scaled_log_gaussian: tau0 | gaussian: precision

    static PriorSpec pc_prec(double u, double alpha) {
        return {PriorKind::pc_prec, u, alpha};
    }
    static PriorSpec scaled_log_gaussian(double s, double tau0) {
        return {PriorKind::scaled_log_gaussian, s, tau0};
    }
    static PriorSpec gaussian(double mean, double precision) {
        return {PriorKind::gaussian, mean, precision};
    }
    static PriorSpec fixed(double value) { return {PriorKind::fixed, value, 0.0}; }
};

enum class EffectKind { iid, iid2d, rw2 };

struct EffectSpec {
    std::string name;
    EffectKind kind = EffectKind::iid;
    int size = 0;  // groups (iid), pairs (iid2d), grid points (rw2); 0 = infer from data
    bool scale_model = false;  // rw2: rescale to unit geometric-mean marginal variance
    PriorSpec prior_tau = PriorSpec::pc_prec(1.0, 0.01);    // iid / rw2 / iid2d tau_v
    PriorSpec prior_tau_w = PriorSpec::pc_prec(1.0, 0.01);  // iid2d only
    PriorSpec prior_rho = PriorSpec::gaussian(0.0, 0.2);    // iid2d: on the Fisher z scale
    std::vector<double> grid_values;  // rw2 reporting grid (bin midpoints); optional
};

enum class Family { gaussian, poisson, weibull_surv, exponential_surv };

// covariate "1" means an intercept column; coefficients are shared across
// blocks when two terms use the same coefficient name
struct FixedTerm {
    std::string coefficient;
    std::string covariate = "1";
};

struct Attachment {
    std::string effect;
    std::string index_covariate = "id";  // integer 1..size; "id" = individual index
    // iid/rw2: optional multiplier on the entry; iid2d: multiplier on the slope
    // (w) coordinate, the intercept (v) coordinate always enters with weight 1
    std::string weight_covariate;
};

struct CopyLink {
    bool of_linear_predictor = false;
    std::string source;  // effect name, or source block name for linear predictors
    int component = 0;   // iid2d source: 0 = intercept (v), 1 = slope (w)
    std::string index_covariate = "id";  // group index, or 1-based source row index
    std::string weight_covariate;        // optional multiplier
    bool estimated = true;
    double fixed_value = 1.0;            // used when !estimated
    std::string scaling_name;            // hyperparameter name when estimated
    PriorSpec scaling_prior = PriorSpec::gaussian(0.0, 0.01);
};

struct BlockSpec {
    std::string name;
    Family family = Family::gaussian;
    int cause = 0;  // 0 = longitudinal block, j >= 1 = cause block j
    // gaussian: prior for the observation precision; weibull: prior for the shape.
    // PriorKind::fixed pins the value and removes the hyperparameter.
    PriorSpec family_hyper = PriorSpec::pc_prec(1.0, 0.01);
    std::vector<FixedTerm> fixed_terms;
    std::vector<Attachment> attachments;
    std::vector<CopyLink> copies;
};

struct ModelSpec {
    int n_causes = 0;
    std::vector<EffectSpec> effects;
    std::vector<BlockSpec> blocks;  // the longitudinal block first, then causes 1..n_causes
    double fixed_effect_precision = 0.001;  // vague prior on coefficients (and eta coordinates)
    double eta_tie_precision = 1e6;  // pseudo-observation precision tying eta to its definition
};

}  // namespace lgmcr
