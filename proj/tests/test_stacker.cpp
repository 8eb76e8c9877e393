#include <catch2/catch_amalgamated.hpp>

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "lgmcr/data.hpp"
#include "lgmcr/gmrf.hpp"
#include "lgmcr/model_spec.hpp"
#include "lgmcr/rng.hpp"
#include "lgmcr/simulate.hpp"
#include "lgmcr/stacker.hpp"
#include "support/oracles.hpp"

using namespace lgmcr;

namespace {

// Competing-risks dataset with binned longitudinal time attached as a
// covariate, ready for the reference three-cause model below.
struct Ex5Fixture {
    JointDataset data;
    std::vector<double> midpoints;
};

Ex5Fixture make_ex5_data(int n_individuals, unsigned long long seed, int n_bins) {
    SimConfig cfg;
    cfg.seed = seed;
    cfg.n_individuals = n_individuals;
    cfg.n_obs_min = 4;
    cfg.n_obs_max = 7;
    Ex5Fixture fx;
    fx.data = simulate_example5(cfg);
    std::vector<double> times;
    for (const auto& r : fx.data.longitudinal) times.push_back(r.time);
    BinnedCovariate bins = bin_covariate(times, n_bins);
    for (size_t k = 0; k < fx.data.longitudinal.size(); ++k)
        fx.data.longitudinal[k].covariates["time_bin"] = static_cast<double>(bins.indices[k]);
    fx.midpoints = bins.midpoints;
    return fx;
}

// Poisson counts + three exponential causes, smoothed trend on binned time,
// iid subject effect copied into every cause block with an estimated scaling.
ModelSpec make_ex5_spec(int n_bins, const std::vector<double>& midpoints) {
    ModelSpec spec;
    spec.n_causes = 3;

    EffectSpec trend;
    trend.name = "trend";
    trend.kind = EffectKind::rw2;
    trend.size = n_bins;
    trend.scale_model = true;
    trend.grid_values = midpoints;
    EffectSpec subject;
    subject.name = "subject";
    subject.kind = EffectKind::iid;
    spec.effects = {trend, subject};

    BlockSpec lng;
    lng.name = "long";
    lng.family = Family::poisson;
    lng.cause = 0;
    lng.fixed_terms = {{"mu_l", "1"}};
    lng.attachments = {{"trend", "time_bin", ""}, {"subject", "id", ""}};
    spec.blocks.push_back(lng);
    for (int j = 1; j <= 3; ++j) {
        BlockSpec cb;
        cb.name = "cause" + std::to_string(j);
        cb.family = Family::exponential_surv;
        cb.cause = j;
        cb.fixed_terms = {{"mu" + std::to_string(j), "1"},
                          {"beta" + std::to_string(j), "age"}};
        CopyLink cp;
        cp.source = "subject";
        cp.index_covariate = "id";
        cp.estimated = true;
        cp.scaling_name = "gamma" + std::to_string(j);
        cb.copies = {cp};
        spec.blocks.push_back(cb);
    }
    return spec;
}

// Shared intercept/slope pairs per subject entering the counts as v + t*w and
// each weibull cause through separate estimated scalings on v and on w.
ModelSpec make_pair_spec() {
    ModelSpec spec;
    spec.n_causes = 3;

    EffectSpec pair;
    pair.name = "subj2";
    pair.kind = EffectKind::iid2d;
    spec.effects = {pair};

    BlockSpec lng;
    lng.name = "long";
    lng.family = Family::poisson;
    lng.cause = 0;
    lng.fixed_terms = {{"b0", "1"}};
    lng.attachments = {{"subj2", "id", ""}};
    spec.blocks.push_back(lng);
    for (int j = 1; j <= 3; ++j) {
        BlockSpec cb;
        cb.name = "c" + std::to_string(j);
        cb.family = Family::weibull_surv;
        cb.cause = j;
        cb.family_hyper = PriorSpec::scaled_log_gaussian(0.1, 1.0);
        cb.fixed_terms = {{"mu" + std::to_string(j), "1"},
                          {"beta" + std::to_string(j), "age"}};
        CopyLink v;
        v.source = "subj2";
        v.component = 0;
        v.estimated = true;
        v.scaling_name = "g" + std::to_string(j);
        CopyLink w;
        w.source = "subj2";
        w.component = 1;
        w.estimated = true;
        w.scaling_name = "k" + std::to_string(j);
        cb.copies = {v, w};
        spec.blocks.push_back(cb);
    }
    return spec;
}

JointDataset make_pair_data(int n_individuals, unsigned long long seed) {
    Example1Config cfg;
    cfg.seed = seed;
    cfg.n_individuals = n_individuals;
    cfg.n_obs_min = 3;
    cfg.n_obs_max = 6;
    cfg.alpha = {1.2, 0.9, 1.5};
    cfg.causes = {{0.3, 0.01}, {-0.1, 0.015}, {0.2, 0.0003}};
    cfg.kappa = {0.1, 0.2, 0.3};
    return simulate_example1(cfg);
}

const LatentBlockInfo& find_layout(const StackedModel& m, const std::string& name) {
    for (const auto& info : m.layout)
        if (info.name == name) return info;
    FAIL("layout block '" + name + "' not found");
    return m.layout.front();
}

Eigen::VectorXd random_vector(RngStream& rng, int n, double sd) {
    Eigen::VectorXd x(n);
    for (int i = 0; i < n; ++i) x[i] = rng.next_normal(0.0, sd);
    return x;
}

}  // namespace

TEST_CASE("three-cause assembly: layout, hyper ordering, row bookkeeping", "[stacker]") {
    const int n_bins = 50;
    Ex5Fixture fx = make_ex5_data(30, 11, n_bins);
    const ModelSpec spec = make_ex5_spec(n_bins, fx.midpoints);
    const StackedModel m = assemble(spec, fx.data);

    const int n_long = static_cast<int>(fx.data.longitudinal.size());
    const int n_surv = static_cast<int>(fx.data.survival.size());
    REQUIRE(n_surv == 30);

    SECTION("hyperparameters come in block, effect, scaling order") {
        REQUIRE(m.n_hyper() == 5);
        CHECK(m.hypers[0].name == "tau_trend");
        CHECK(m.hypers[1].name == "tau_subject");
        CHECK(m.hypers[2].name == "gamma1");
        CHECK(m.hypers[3].name == "gamma2");
        CHECK(m.hypers[4].name == "gamma3");
        CHECK(m.hypers[0].transform == Transform::log);
        CHECK(m.hypers[1].transform == Transform::log);
        for (int j = 2; j < 5; ++j) {
            CHECK(m.hypers[static_cast<size_t>(j)].transform == Transform::identity);
            CHECK(m.hypers[static_cast<size_t>(j)].prior_on_internal);
        }
        CHECK(m.hyper_index("gamma2") == 3);
        CHECK_THROWS_AS(m.hyper_index("nope"), config_error);
    }

    SECTION("latent layout: coefficients, trend grid, subject effect") {
        REQUIRE(m.n_coef == 7);
        const std::vector<std::string> want = {"mu_l", "mu1", "beta1", "mu2",
                                               "beta2", "mu3", "beta3"};
        CHECK(m.coef_names == want);
        CHECK(m.n_latent == 7 + n_bins + 30);

        const auto& coefs = find_layout(m, "coefficients");
        CHECK(coefs.offset == 0);
        CHECK(coefs.size == 7);
        const auto& trend = find_layout(m, "trend");
        CHECK(trend.offset == 7);
        CHECK(trend.size == n_bins);
        CHECK(trend.grid == fx.midpoints);
        const auto& subject = find_layout(m, "subject");
        CHECK(subject.offset == 7 + n_bins);
        CHECK(subject.size == 30);  // inferred from the id covariate
        CHECK(m.effect_runtime[1].size == 30);
    }

    SECTION("rows: survival records repeat per cause with correct event flags") {
        REQUIRE(m.n_rows() == n_long + 3 * n_surv);
        for (int r = 0; r < n_long; ++r) {
            CHECK(m.rows[static_cast<size_t>(r)].family == Family::poisson);
            CHECK(m.rows[static_cast<size_t>(r)].block == 0);
        }
        for (int j = 1; j <= 3; ++j) {
            int events = 0;
            for (int i = 0; i < n_surv; ++i) {
                const auto& row = m.rows[static_cast<size_t>(n_long + (j - 1) * n_surv + i)];
                CHECK(row.family == Family::exponential_surv);
                CHECK(row.block == j);
                CHECK(row.y == fx.data.survival[static_cast<size_t>(i)].time);
                events += row.d;
            }
            int want = 0;
            for (const auto& s : fx.data.survival) want += s.cause == j ? 1 : 0;
            CHECK(events == want);
        }
    }

    SECTION("one sum-to-zero constraint, two flat prior directions") {
        CHECK(m.rank_deficiency == 2);
        REQUIRE(m.constraint_basis.cols() == 1);
        REQUIRE(m.prior_null_basis.cols() == 2);
        // orthonormal columns supported on the trend block only
        const Eigen::MatrixXd gram =
            m.prior_null_basis.transpose() * m.prior_null_basis;
        CHECK((gram - Eigen::MatrixXd::Identity(2, 2)).cwiseAbs().maxCoeff() < 1e-12);
        const auto& trend = find_layout(m, "trend");
        for (int i = 0; i < m.n_latent; ++i) {
            const bool inside = i >= trend.offset && i < trend.offset + trend.size;
            if (!inside) {
                CHECK(m.constraint_basis(i, 0) == 0.0);
                CHECK(m.prior_null_basis(i, 0) == 0.0);
                CHECK(m.prior_null_basis(i, 1) == 0.0);
            }
        }
    }
}

TEST_CASE("intercept-slope pair assembly: twelve hypers in declared order", "[stacker]") {
    const JointDataset data = make_pair_data(40, 5);
    const ModelSpec spec = make_pair_spec();
    const StackedModel m = assemble(spec, data);

    REQUIRE(m.n_hyper() == 12);
    const std::vector<std::string> want = {"alpha_c1",   "alpha_c2", "alpha_c3",
                                           "tau_v_subj2", "tau_w_subj2", "rho_subj2",
                                           "g1", "k1", "g2", "k2", "g3", "k3"};
    for (size_t j = 0; j < want.size(); ++j) CHECK(m.hypers[j].name == want[j]);
    CHECK(m.hypers[5].transform == Transform::fisher_z);
    CHECK(m.hypers[5].prior_on_internal);
    for (int j = 0; j < 5; ++j)
        CHECK(m.hypers[static_cast<size_t>(j)].transform == Transform::log);
    for (int j = 6; j < 12; ++j)
        CHECK(m.hypers[static_cast<size_t>(j)].transform == Transform::identity);

    CHECK(m.n_coef == 7);
    CHECK(m.effect_runtime[0].size == 80);  // interleaved (v, w) per subject
    CHECK(m.n_latent == 7 + 80);
    CHECK(m.rank_deficiency == 0);
}

TEST_CASE("linear predictor is linear in the latent vector", "[stacker]") {
    Ex5Fixture fx = make_ex5_data(25, 3, 20);
    const StackedModel m = assemble(make_ex5_spec(20, fx.midpoints), fx.data);
    RngStream rng(91);
    for (int trial = 0; trial < 10; ++trial) {
        const Eigen::VectorXd theta = random_vector(rng, m.n_hyper(), 0.4);
        const Eigen::VectorXd x1 = random_vector(rng, m.n_latent, 1.0);
        const Eigen::VectorXd x2 = random_vector(rng, m.n_latent, 1.0);
        const double a = rng.next_normal(), b = rng.next_normal();
        const Eigen::VectorXd lhs = linear_predictor(m, theta, a * x1 + b * x2);
        const Eigen::VectorXd rhs = a * linear_predictor(m, theta, x1) +
                                    b * linear_predictor(m, theta, x2);
        const double scale = std::max({1.0, lhs.cwiseAbs().maxCoeff(),
                                       rhs.cwiseAbs().maxCoeff()});
        CHECK((lhs - rhs).cwiseAbs().maxCoeff() <= 1e-12 * scale);
    }
}

TEST_CASE("linear predictor matches a scalar per-row recomputation", "[stacker]") {
    SECTION("three-cause model") {
        const int n_bins = 20;
        Ex5Fixture fx = make_ex5_data(25, 17, n_bins);
        const StackedModel m = assemble(make_ex5_spec(n_bins, fx.midpoints), fx.data);
        const int n_long = static_cast<int>(fx.data.longitudinal.size());
        const int n_surv = static_cast<int>(fx.data.survival.size());
        const int off_trend = find_layout(m, "trend").offset;
        const int off_subj = find_layout(m, "subject").offset;

        RngStream rng(23);
        for (int trial = 0; trial < 100; ++trial) {
            const Eigen::VectorXd theta = random_vector(rng, m.n_hyper(), 0.5);
            const Eigen::VectorXd x = random_vector(rng, m.n_latent, 1.0);
            const Eigen::VectorXd eta = linear_predictor(m, theta, x);
            for (int r = 0; r < m.n_rows(); ++r) {
                double want = 0.0;
                if (r < n_long) {
                    const auto& rec = fx.data.longitudinal[static_cast<size_t>(r)];
                    const int bin = static_cast<int>(rec.covariates.at("time_bin"));
                    want = x[m.coef_index("mu_l")] + x[off_trend + bin - 1] +
                           x[off_subj + rec.individual - 1];
                } else {
                    const int j = (r - n_long) / n_surv + 1;
                    const auto& rec =
                        fx.data.survival[static_cast<size_t>((r - n_long) % n_surv)];
                    const std::string js = std::to_string(j);
                    // identity transform: the scaling's natural value is theta itself
                    want = x[m.coef_index("mu" + js)] +
                           rec.covariates.at("age") * x[m.coef_index("beta" + js)] +
                           theta[m.hyper_index("gamma" + js)] *
                               x[off_subj + rec.individual - 1];
                }
                CHECK(std::abs(eta[r] - want) <= 1e-12 * std::max(1.0, std::abs(want)));
            }
        }
    }

    SECTION("intercept-slope pair model") {
        const JointDataset data = make_pair_data(30, 29);
        const StackedModel m = assemble(make_pair_spec(), data);
        const int n_long = static_cast<int>(data.longitudinal.size());
        const int n_surv = static_cast<int>(data.survival.size());
        const int off = find_layout(m, "subj2").offset;

        RngStream rng(31);
        for (int trial = 0; trial < 20; ++trial) {
            const Eigen::VectorXd theta = random_vector(rng, m.n_hyper(), 0.4);
            const Eigen::VectorXd x = random_vector(rng, m.n_latent, 1.0);
            const Eigen::VectorXd eta = linear_predictor(m, theta, x);
            for (int r = 0; r < m.n_rows(); ++r) {
                double want = 0.0;
                if (r < n_long) {
                    const auto& rec = data.longitudinal[static_cast<size_t>(r)];
                    const double v = x[off + 2 * (rec.individual - 1)];
                    const double w = x[off + 2 * (rec.individual - 1) + 1];
                    // pair attachment: intercept coordinate plus time-weighted slope
                    want = x[m.coef_index("b0")] + v + rec.time * w;
                } else {
                    const int j = (r - n_long) / n_surv + 1;
                    const auto& rec =
                        data.survival[static_cast<size_t>((r - n_long) % n_surv)];
                    const std::string js = std::to_string(j);
                    const double v = x[off + 2 * (rec.individual - 1)];
                    const double w = x[off + 2 * (rec.individual - 1) + 1];
                    want = x[m.coef_index("mu" + js)] +
                           rec.covariates.at("age") * x[m.coef_index("beta" + js)] +
                           theta[m.hyper_index("g" + js)] * v +
                           theta[m.hyper_index("k" + js)] * w;
                }
                CHECK(std::abs(eta[r] - want) <= 1e-12 * std::max(1.0, std::abs(want)));
            }
        }
    }
}

TEST_CASE("a copy scaling only moves its own block's rows", "[stacker]") {
    Ex5Fixture fx = make_ex5_data(25, 41, 20);
    const StackedModel m = assemble(make_ex5_spec(20, fx.midpoints), fx.data);
    const int off_subj = find_layout(m, "subject").offset;

    RngStream rng(7);
    const Eigen::VectorXd x = random_vector(rng, m.n_latent, 1.0);
    Eigen::VectorXd theta0 = random_vector(rng, m.n_hyper(), 0.4);
    Eigen::VectorXd theta1 = theta0;
    const double shift = 0.37;
    theta1[m.hyper_index("gamma2")] += shift;

    const Eigen::VectorXd d = linear_predictor(m, theta1, x) -
                              linear_predictor(m, theta0, x);
    for (int r = 0; r < m.n_rows(); ++r) {
        const auto& row = m.rows[static_cast<size_t>(r)];
        if (row.block != 2) {
            CHECK(d[r] == 0.0);
        } else {
            const double want = shift * x[off_subj + row.individual - 1];
            CHECK(std::abs(d[r] - want) <= 1e-12 * std::max(1.0, std::abs(want)));
        }
    }
}

TEST_CASE("joint prior precision: symmetry, null space, normalizer", "[stacker]") {
    const int n_bins = 20;
    Ex5Fixture fx = make_ex5_data(25, 53, n_bins);
    const StackedModel m = assemble(make_ex5_spec(n_bins, fx.midpoints), fx.data);
    Eigen::VectorXd theta(m.n_hyper());
    theta << 0.3, -0.2, 0.4, -0.1, 0.2;
    const SparsePrecision q = joint_prior_precision(m, theta);

    const Eigen::MatrixXd qd(q.matrix);
    CHECK((qd - qd.transpose()).cwiseAbs().maxCoeff() == 0.0);
    CHECK(q.rank_deficiency == 2);

    // flat directions of the smoothing prior stay flat after assembly
    const Eigen::MatrixXd qn = qd * m.prior_null_basis;
    CHECK(qn.cwiseAbs().maxCoeff() < 1e-7);

    // normalizer decomposes over the latent blocks
    const double tau_r = std::exp(theta[0]);
    const double tau_u = std::exp(theta[1]);
    const auto& trend_rt = m.effect_runtime[0];
    const double want_ldc = 7 * std::log(0.001) +
                            (n_bins - 2) * std::log(tau_r) +
                            trend_rt.unit_precision.log_det_constant +
                            25 * std::log(tau_u);
    CHECK(q.log_det_constant == Catch::Approx(want_ldc).margin(1e-10));

    // coefficients sit on the vague diagonal exactly
    for (int i = 0; i < 7; ++i) CHECK(qd(i, i) == 0.001);

    // subject block is tau_u * I
    const auto& subj = find_layout(m, "subject");
    for (int i = 0; i < subj.size; ++i)
        CHECK(qd(subj.offset + i, subj.offset + i) == Catch::Approx(tau_u).epsilon(1e-15));
}

TEST_CASE("pair-effect prior matches the dense two-by-two inverse", "[stacker]") {
    const JointDataset data = make_pair_data(12, 61);
    const StackedModel m = assemble(make_pair_spec(), data);
    Eigen::VectorXd theta = Eigen::VectorXd::Zero(m.n_hyper());
    theta[3] = 0.5;   // tau_v = e^0.5
    theta[4] = -0.3;  // tau_w = e^-0.3
    theta[5] = 0.4;   // correlation = tanh(0.4)
    const SparsePrecision q = joint_prior_precision(m, theta);
    const Eigen::MatrixXd qd(q.matrix);

    const double tau_v = std::exp(0.5), tau_w = std::exp(-0.3);
    const double corr = std::tanh(0.4);
    const double cov = corr / std::sqrt(tau_v * tau_w);
    Eigen::Matrix2d sigma;
    sigma << 1.0 / tau_v, cov, cov, 1.0 / tau_w;
    const Eigen::Matrix2d prec = sigma.inverse();

    const auto& pair = find_layout(m, "subj2");
    for (int i = 0; i < pair.size / 2; ++i) {
        const int o = pair.offset + 2 * i;
        CHECK(qd(o, o) == Catch::Approx(prec(0, 0)).epsilon(1e-12));
        CHECK(qd(o + 1, o + 1) == Catch::Approx(prec(1, 1)).epsilon(1e-12));
        CHECK(qd(o, o + 1) == Catch::Approx(prec(0, 1)).epsilon(1e-12));
    }
    const double want_ldc =
        7 * std::log(0.001) - 12 * std::log(sigma.determinant());
    CHECK(q.log_det_constant == Catch::Approx(want_ldc).margin(1e-9));
}

TEST_CASE("plain gaussian regression degenerates to a proper gaussian model", "[stacker]") {
    // one longitudinal row and one censoring record per individual
    std::vector<LongitudinalRecord> lng;
    std::vector<SurvivalRecord> srv;
    RngStream rng(77);
    for (int i = 1; i <= 12; ++i) {
        LongitudinalRecord l;
        l.original_id = i;
        l.individual = i;
        l.time = 0.5;
        l.value = rng.next_normal(0.0, 1.0);
        l.covariates["z"] = rng.next_normal(0.0, 1.0);
        lng.push_back(l);
        SurvivalRecord s;
        s.original_id = i;
        s.individual = i;
        s.time = 1.0;
        s.cause = 0;
        srv.push_back(s);
    }
    const JointDataset data = validate_joint_dataset(lng, srv, 0);

    ModelSpec spec;
    spec.n_causes = 0;
    BlockSpec blk;
    blk.name = "obs";
    blk.family = Family::gaussian;
    blk.family_hyper = PriorSpec::fixed(2.0);
    blk.fixed_terms = {{"b0", "1"}, {"b1", "z"}};
    spec.blocks = {blk};

    const StackedModel m = assemble(spec, data);
    CHECK(m.n_hyper() == 0);
    CHECK(m.n_latent == 2);
    CHECK(m.n_rows() == 12);
    CHECK(m.block_runtime[0].fixed_value == 2.0);

    const Eigen::VectorXd theta(0);
    const SparsePrecision q = joint_prior_precision(m, theta);
    const Eigen::MatrixXd qd(q.matrix);
    CHECK((qd - 0.001 * Eigen::MatrixXd::Identity(2, 2)).cwiseAbs().maxCoeff() == 0.0);
    CHECK(q.rank_deficiency == 0);
    CHECK(q.log_det_constant == Catch::Approx(2 * std::log(0.001)).margin(1e-14));

    // the prior log-density agrees with the dense gaussian density
    RngStream rng2(78);
    const Eigen::VectorXd x = random_vector(rng2, 2, 3.0);
    const Eigen::MatrixXd cov = 1000.0 * Eigen::MatrixXd::Identity(2, 2);
    CHECK(gmrf_log_density(x, q) ==
          Catch::Approx(oracle::mvn_logpdf(x, Eigen::VectorXd::Zero(2), cov))
              .margin(1e-10));

    // estimated observation precision shows up as a log-scale hyper
    ModelSpec spec2 = spec;
    spec2.blocks[0].family_hyper = PriorSpec::pc_prec(1.0, 0.01);
    const StackedModel m2 = assemble(spec2, data);
    REQUIRE(m2.n_hyper() == 1);
    CHECK(m2.hypers[0].name == "tau_obs");
    CHECK(m2.hypers[0].transform == Transform::log);
}

TEST_CASE("linear-predictor copies add eta coordinates and tie rows", "[stacker]") {
    // three individuals, two observations each, one cause; each survival row
    // names the source row whose linear predictor it loads on
    std::vector<LongitudinalRecord> lng;
    std::vector<SurvivalRecord> srv;
    RngStream rng(13);
    int row_counter = 0;
    for (int i = 1; i <= 3; ++i) {
        for (int k = 0; k < 2; ++k) {
            LongitudinalRecord l;
            l.original_id = i;
            l.individual = i;
            l.time = 0.3 + 0.4 * k;
            l.value = rng.next_normal(0.0, 1.0);
            lng.push_back(l);
            ++row_counter;
        }
        SurvivalRecord s;
        s.original_id = i;
        s.individual = i;
        s.time = 1.0 + 0.1 * i;
        s.cause = 1;
        s.covariates["lrow"] = row_counter;  // last observation of individual i
        srv.push_back(s);
    }
    const JointDataset data = validate_joint_dataset(lng, srv, 1);

    ModelSpec spec;
    spec.n_causes = 1;
    EffectSpec subject;
    subject.name = "subject";
    subject.kind = EffectKind::iid;
    spec.effects = {subject};
    BlockSpec lb;
    lb.name = "long";
    lb.family = Family::gaussian;
    lb.family_hyper = PriorSpec::fixed(1.0);
    lb.fixed_terms = {{"b0", "1"}};
    lb.attachments = {{"subject", "id", ""}};
    BlockSpec cb;
    cb.name = "cause1";
    cb.family = Family::exponential_surv;
    cb.cause = 1;
    cb.fixed_terms = {{"mu1", "1"}};
    CopyLink cp;
    cp.of_linear_predictor = true;
    cp.source = "long";
    cp.index_covariate = "lrow";
    cp.estimated = true;
    cp.scaling_name = "gamma";
    cb.copies = {cp};
    spec.blocks = {lb, cb};

    const StackedModel m = assemble(spec, data);
    const auto& eta_rep = find_layout(m, "eta:long");
    CHECK(eta_rep.kind == LatentBlockKind::eta_rep);
    CHECK(eta_rep.size == 6);
    CHECK(m.n_latent == 2 + 3 + 6);  // b0, mu1, subject, eta coordinates
    REQUIRE(m.n_rows() == 6 + 3 + 6);

    // tie rows: gaussian pseudo-observations at the configured precision
    REQUIRE(m.block_runtime.size() == 3);
    CHECK(m.block_runtime[2].family == Family::gaussian);
    CHECK(m.block_runtime[2].fixed_value == spec.eta_tie_precision);
    for (int r = 9; r < 15; ++r) {
        CHECK(m.rows[static_cast<size_t>(r)].family == Family::gaussian);
        CHECK(m.rows[static_cast<size_t>(r)].y == 0.0);
        CHECK(m.rows[static_cast<size_t>(r)].block == 2);
    }

    const int off_subj = find_layout(m, "subject").offset;
    RngStream rng2(14);
    for (int trial = 0; trial < 20; ++trial) {
        const Eigen::VectorXd theta = random_vector(rng2, m.n_hyper(), 0.5);
        const Eigen::VectorXd x = random_vector(rng2, m.n_latent, 1.0);
        const Eigen::VectorXd eta = linear_predictor(m, theta, x);
        for (int k = 0; k < 6; ++k) {
            // tie row: additive definition of source row k minus its eta coordinate
            const int individual = data.longitudinal[static_cast<size_t>(k)].individual;
            const double def = x[m.coef_index("b0")] + x[off_subj + individual - 1];
            const double want = def - x[eta_rep.offset + k];
            CHECK(std::abs(eta[9 + k] - want) <= 1e-12 * std::max(1.0, std::abs(want)));
        }
        for (int i = 0; i < 3; ++i) {
            const auto& rec = data.survival[static_cast<size_t>(i)];
            const int lrow = static_cast<int>(rec.covariates.at("lrow"));
            const double want = x[m.coef_index("mu1")] +
                                theta[m.hyper_index("gamma")] * x[eta_rep.offset + lrow - 1];
            CHECK(std::abs(eta[6 + i] - want) <= 1e-12 * std::max(1.0, std::abs(want)));
        }
    }

    // eta coordinates get the vague coefficient prior
    const SparsePrecision q = joint_prior_precision(m, Eigen::VectorXd::Zero(2));
    const Eigen::MatrixXd qd(q.matrix);
    for (int k = 0; k < 6; ++k)
        CHECK(qd(eta_rep.offset + k, eta_rep.offset + k) == 0.001);

    // a fractional source-row index is rejected without the binning hint
    JointDataset bad = data;
    bad.survival[0].covariates["lrow"] = 1.5;
    try {
        assemble(spec, bad);
        FAIL("expected data_error");
    } catch (const data_error& e) {
        const std::string msg = e.what();
        CHECK(msg.find("not an integer") != std::string::npos);
        CHECK(msg.find("bin_covariate") == std::string::npos);
    }
}

TEST_CASE("assembly is deterministic", "[stacker]") {
    Ex5Fixture fx = make_ex5_data(20, 99, 15);
    const ModelSpec spec = make_ex5_spec(15, fx.midpoints);
    const StackedModel a = assemble(spec, fx.data);
    const StackedModel b = assemble(spec, fx.data);
    REQUIRE(a.entries.size() == b.entries.size());
    for (size_t k = 0; k < a.entries.size(); ++k) {
        CHECK(a.entries[k].row == b.entries[k].row);
        CHECK(a.entries[k].col == b.entries[k].col);
        CHECK(a.entries[k].weight == b.entries[k].weight);
        CHECK(a.entries[k].scaling_hyper == b.entries[k].scaling_hyper);
    }
    REQUIRE(a.layout.size() == b.layout.size());
    for (size_t k = 0; k < a.layout.size(); ++k) {
        CHECK(a.layout[k].name == b.layout[k].name);
        CHECK(a.layout[k].offset == b.layout[k].offset);
        CHECK(a.layout[k].size == b.layout[k].size);
    }
    for (size_t k = 0; k < a.hypers.size(); ++k)
        CHECK(a.hypers[k].name == b.hypers[k].name);
}

TEST_CASE("hyper transforms and prior log-density", "[stacker]") {
    Ex5Fixture fx = make_ex5_data(15, 2, 10);
    const StackedModel m = assemble(make_ex5_spec(10, fx.midpoints), fx.data);
    Eigen::VectorXd theta(5);
    theta << 0.3, -0.7, 0.2, -0.1, 0.4;

    const Eigen::VectorXd nat = hyper_natural(m, theta);
    CHECK(nat[0] == std::exp(0.3));
    CHECK(nat[1] == std::exp(-0.7));
    CHECK(nat[2] == 0.2);
    CHECK(nat[3] == -0.1);
    CHECK(nat[4] == 0.4);

    // log prior: pc-precision terms carry the exp-transform jacobian, identity
    // scalings are plain gaussians on their own scale
    double want = pc_prec_log_prior(std::exp(0.3), 1.0, 0.01) + 0.3 +
                  pc_prec_log_prior(std::exp(-0.7), 1.0, 0.01) + (-0.7);
    for (int j = 2; j < 5; ++j)
        want += 0.5 * std::log(0.01 / (2.0 * M_PI)) - 0.5 * 0.01 * theta[j] * theta[j];
    CHECK(log_prior_hyper(m, theta) == Catch::Approx(want).epsilon(1e-12));

    CHECK_THROWS_AS(hyper_natural(m, Eigen::VectorXd::Zero(3)), numeric_error);
    CHECK_THROWS_AS(log_prior_hyper(m, Eigen::VectorXd::Zero(4)), numeric_error);

    SECTION("fisher-z and shape-prior terms") {
        const JointDataset data = make_pair_data(10, 8);
        const StackedModel mp = assemble(make_pair_spec(), data);
        Eigen::VectorXd tp = Eigen::VectorXd::Zero(12);
        tp[0] = 0.2;   // alpha_c1 = e^0.2
        tp[5] = 0.6;   // fisher z
        tp[6] = -0.3;  // scaling g1
        const Eigen::VectorXd natp = hyper_natural(mp, tp);
        CHECK(natp[5] == std::tanh(0.6));

        double wantp = 0.0;
        // weibull shapes: scaled-log-gaussian prior plus log jacobian
        wantp += scaled_log_gaussian_log_prior(std::exp(0.2), 0.1, 1.0) + 0.2;
        wantp += 2.0 * (scaled_log_gaussian_log_prior(1.0, 0.1, 1.0) + 0.0);
        // pair precisions: pc priors plus jacobian at theta = 0
        wantp += 2.0 * (pc_prec_log_prior(1.0, 1.0, 0.01) + 0.0);
        // correlation: gaussian on the fisher-z scale, no jacobian
        wantp += 0.5 * std::log(0.2 / (2.0 * M_PI)) - 0.5 * 0.2 * 0.6 * 0.6;
        // six scalings: gaussian(0, 0.01) on their own scale
        wantp += 6.0 * (0.5 * std::log(0.01 / (2.0 * M_PI)));
        wantp += -0.5 * 0.01 * 0.3 * 0.3;
        CHECK(log_prior_hyper(mp, tp) == Catch::Approx(wantp).epsilon(1e-12));
    }
}

TEST_CASE("conditional log-density decomposes into prior plus likelihood", "[stacker]") {
    Ex5Fixture fx = make_ex5_data(15, 19, 10);
    const StackedModel m = assemble(make_ex5_spec(10, fx.midpoints), fx.data);
    RngStream rng(3);
    const Eigen::VectorXd theta = random_vector(rng, m.n_hyper(), 0.3);
    const Eigen::VectorXd x = random_vector(rng, m.n_latent, 0.3);

    const ConditionalTerms terms = log_conditional(x, theta, m);
    const SparsePrecision q = joint_prior_precision(m, theta);
    const Eigen::VectorXd eta = linear_predictor(m, theta, x);

    double loglik = 0.0;
    const int n_long = static_cast<int>(fx.data.longitudinal.size());
    const int n_surv = static_cast<int>(fx.data.survival.size());
    for (int r = 0; r < m.n_rows(); ++r) {
        const auto& row = m.rows[static_cast<size_t>(r)];
        loglik += r < n_long ? poisson_loglik(row.y, eta[r]).value
                             : exponential_surv_loglik(row.y, row.d, eta[r]).value;
    }
    CHECK(terms.loglik == Catch::Approx(loglik).epsilon(1e-12));
    CHECK(terms.value ==
          Catch::Approx(gmrf_log_density(x, q) + loglik).epsilon(1e-12));
    CHECK(terms.curvature.minCoeff() >= 0.0);  // every family is log-concave
    REQUIRE(terms.gradient.size() == m.n_latent);
}

TEST_CASE("assembly error paths", "[stacker]") {
    Ex5Fixture fx = make_ex5_data(10, 6, 8);
    const ModelSpec good = make_ex5_spec(8, fx.midpoints);

    SECTION("unknown covariate names the offender") {
        ModelSpec spec = good;
        spec.blocks[1].fixed_terms.push_back({"b_bmi", "bmi"});
        CHECK_THROWS_MATCHES(assemble(spec, fx.data), data_error,
                             Catch::Matchers::MessageMatches(
                                 Catch::Matchers::ContainsSubstring("bmi")));
    }

    SECTION("continuous index on a smoothing effect points at the binning step") {
        ModelSpec spec = good;
        spec.blocks[0].attachments[0].index_covariate = "time";
        CHECK_THROWS_MATCHES(assemble(spec, fx.data), data_error,
                             Catch::Matchers::MessageMatches(
                                 Catch::Matchers::ContainsSubstring("bin_covariate")));
    }

    SECTION("index beyond a declared effect size") {
        ModelSpec spec = good;
        spec.effects[1].size = 5;  // ids run to 10
        CHECK_THROWS_MATCHES(assemble(spec, fx.data), data_error,
                             Catch::Matchers::MessageMatches(
                                 Catch::Matchers::ContainsSubstring("[1,5]")));
    }

    SECTION("duplicate scaling names collide") {
        ModelSpec spec = good;
        spec.blocks[2].copies[0].scaling_name = "gamma1";
        CHECK_THROWS_MATCHES(assemble(spec, fx.data), config_error,
                             Catch::Matchers::MessageMatches(
                                 Catch::Matchers::ContainsSubstring("duplicate")));
    }

    SECTION("block ordering and cause counts are enforced") {
        ModelSpec spec = good;
        std::swap(spec.blocks[0], spec.blocks[1]);
        CHECK_THROWS_AS(assemble(spec, fx.data), config_error);

        ModelSpec spec2 = good;
        spec2.n_causes = 2;
        CHECK_THROWS_AS(assemble(spec2, fx.data), config_error);

        ModelSpec spec3 = good;
        spec3.blocks.pop_back();
        spec3.n_causes = 2;  // consistent spec, inconsistent dataset
        CHECK_THROWS_AS(assemble(spec3, fx.data), config_error);
    }

    SECTION("family/block role mismatches") {
        ModelSpec spec = good;
        spec.blocks[0].family = Family::weibull_surv;
        CHECK_THROWS_AS(assemble(spec, fx.data), config_error);

        ModelSpec spec2 = good;
        spec2.blocks[1].family = Family::poisson;
        CHECK_THROWS_AS(assemble(spec2, fx.data), config_error);
    }

    SECTION("component selection is a pair-effect feature") {
        ModelSpec spec = good;
        spec.blocks[1].copies[0].component = 1;
        CHECK_THROWS_AS(assemble(spec, fx.data), config_error);
    }

    SECTION("undeclared effect") {
        ModelSpec spec = good;
        spec.blocks[0].attachments[0].effect = "nosuch";
        CHECK_THROWS_MATCHES(assemble(spec, fx.data), config_error,
                             Catch::Matchers::MessageMatches(
                                 Catch::Matchers::ContainsSubstring("not declared")));
    }

    SECTION("linear-predictor copy must point backwards") {
        ModelSpec spec = good;
        CopyLink cp;
        cp.of_linear_predictor = true;
        cp.source = "cause2";
        cp.index_covariate = "id";
        cp.estimated = false;
        spec.blocks[1].copies.push_back(cp);  // cause1 copying cause2
        CHECK_THROWS_MATCHES(assemble(spec, fx.data), config_error,
                             Catch::Matchers::MessageMatches(
                                 Catch::Matchers::ContainsSubstring("precede")));
    }

    SECTION("pair-effect correlation prior is gaussian or fixed") {
        ModelSpec spec = make_pair_spec();
        spec.effects[0].prior_rho = PriorSpec::pc_prec(1.0, 0.01);
        const JointDataset data = make_pair_data(8, 4);
        CHECK_THROWS_AS(assemble(spec, data), config_error);

        ModelSpec spec2 = make_pair_spec();
        spec2.effects[0].prior_rho = PriorSpec::fixed(1.2);
        CHECK_THROWS_AS(assemble(spec2, data), config_error);
    }

    SECTION("reporting grid must match the effect size") {
        ModelSpec spec = good;
        spec.effects[0].grid_values.pop_back();
        CHECK_THROWS_AS(assemble(spec, fx.data), config_error);
    }

    SECTION("empty model") {
        ModelSpec spec;
        CHECK_THROWS_AS(assemble(spec, fx.data), config_error);
    }
}
