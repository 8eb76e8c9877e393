#pragma once

// Nested Laplace inference for the stacked model:
//   inner loop  — damped Newton mode finding for x | theta, y under hard
//                 sum-to-zero constraints (conditioning by kriging),
//   outer loop  — Laplace approximation of the hyperparameter posterior,
//                 simplex optimization, and grid exploration,
//   marginals   — Gaussian mixtures over the grid for latent coordinates,
//                 weighted empirical summaries for hyperparameters.
//
// All grid-point evaluations warm start from the central mode, so results are
// bitwise reproducible at any thread count.

#include <Eigen/Dense>
#include <Eigen/Sparse>
#include <Eigen/SparseCholesky>

#include <array>
#include <atomic>
#include <chrono>
#include <cmath>
#include <limits>
#include <memory>
#include <sstream>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include "nelder_mead.hpp"
#include "stacker.hpp"

namespace lgmcr {

// ---- theta-fixed evaluation context ----

struct EvalContext {
    Eigen::VectorXd naturals;
    Eigen::SparseMatrix<double, Eigen::RowMajor> a;
    Eigen::SparseMatrix<double> at;  // a transposed, column major
    SparsePrecision q_pr;
    double log_prior_theta = 0.0;
};

inline EvalContext make_context(const StackedModel& m, const Eigen::VectorXd& theta) {
    EvalContext c;
    c.naturals = hyper_natural(m, theta);
    c.a = design_matrix(m, theta);
    c.at = Eigen::SparseMatrix<double>(c.a.transpose());
    c.q_pr = joint_prior_precision(m, theta);
    c.log_prior_theta = log_prior_hyper(m, theta);
    return c;
}

struct CondEval {
    double value = 0.0;
    Eigen::VectorXd gradient;
    Eigen::VectorXd curvature;  // per-row -d2(loglik)/d(eta)2, >= 0
};

inline double conditional_value(const StackedModel& m, const EvalContext& c,
                                const Eigen::VectorXd& x) {
    const Eigen::VectorXd eta = c.a * x;
    double ll = 0.0;
    for (int r = 0; r < m.n_rows(); ++r)
        ll += detail::row_loglik(m, m.rows[static_cast<size_t>(r)], eta(r), c.naturals).value;
    return gmrf_log_density(x, c.q_pr) + ll;
}

inline CondEval conditional_full(const StackedModel& m, const EvalContext& c,
                                 const Eigen::VectorXd& x) {
    const Eigen::VectorXd eta = c.a * x;
    CondEval out;
    out.curvature.resize(m.n_rows());
    Eigen::VectorXd score(m.n_rows());
    double ll = 0.0;
    for (int r = 0; r < m.n_rows(); ++r) {
        const LoglikTerms t =
            detail::row_loglik(m, m.rows[static_cast<size_t>(r)], eta(r), c.naturals);
        ll += t.value;
        score(r) = t.d_eta;
        out.curvature(r) = -t.d2_eta;
    }
    out.value = gmrf_log_density(x, c.q_pr) + ll;
    out.gradient = c.at * score - c.q_pr.matrix * x;
    return out;
}

// ---- inner Newton ----

struct NewtonOptions {
    double grad_tol = 1e-8;
    int max_iter = 50;
    int max_halvings = 40;
};

struct GaussianApprox {
    Eigen::VectorXd mode;
    double value = 0.0;               // log conditional at the mode
    double log_det_posterior = 0.0;   // ln det(Q_prior + A'DA) at the mode
    double log_det_constraint = 0.0;  // ln det(V' Q_post^{-1} V); 0 if unconstrained
    bool converged = false;
    int iterations = 0;
};

// Holds the factorization of the posterior precision at the mode; reusing one
// workspace across evaluations keeps the symbolic analysis (the sparsity
// pattern never changes for a given model).
struct SolverWorkspace {
    Eigen::SimplicialLDLT<Eigen::SparseMatrix<double>> solver;
    bool analyzed = false;
    Eigen::MatrixXd z;                 // Q_post^{-1} V at the mode
    Eigen::LLT<Eigen::MatrixXd> s_llt; // factorization of V' Z
};

namespace detail {

inline double factorize_posterior(const EvalContext& ctx, const Eigen::VectorXd& curvature,
                                  SolverWorkspace& ws) {
    const Eigen::SparseMatrix<double> scaled = curvature.asDiagonal() * ctx.a;
    const Eigen::SparseMatrix<double> q_post =
        ctx.q_pr.matrix + Eigen::SparseMatrix<double>(ctx.at * scaled);
    if (!ws.analyzed) {
        ws.solver.analyzePattern(q_post);
        ws.analyzed = true;
    }
    ws.solver.factorize(q_post);
    if (ws.solver.info() != Eigen::Success)
        throw numeric_error("find_mode: sparse factorization failed");
    double log_det = 0.0;
    const Eigen::VectorXd d = ws.solver.vectorD();
    for (int i = 0; i < d.size(); ++i) {
        if (!(d(i) > 0.0))
            throw numeric_error("find_mode: posterior precision is not positive definite");
        log_det += std::log(d(i));
    }
    return log_det;
}

}  // namespace detail

inline GaussianApprox find_mode(const StackedModel& m, const EvalContext& ctx,
                                const Eigen::VectorXd& x_init, SolverWorkspace& ws,
                                NewtonOptions opt = {}) {
    const int n = m.n_latent;
    const int n_con = static_cast<int>(m.constraint_basis.cols());
    const Eigen::MatrixXd& v = m.constraint_basis;

    Eigen::VectorXd x;
    if (x_init.size() == n && x_init.allFinite())
        x = x_init;
    else
        x = Eigen::VectorXd::Zero(n);
    if (n_con > 0) x -= v * (v.transpose() * x);

    CondEval e;
    bool start_ok = true;
    try {
        e = conditional_full(m, ctx, x);
        start_ok = std::isfinite(e.value);
    } catch (const numeric_error&) {
        start_ok = false;
    }
    if (!start_ok) {
        x.setZero();
        e = conditional_full(m, ctx, x);
        if (!std::isfinite(e.value))
            throw numeric_error("find_mode: objective not finite at the zero start");
    }

    auto projected_grad_norm = [&](const Eigen::VectorXd& g) {
        if (n_con == 0) return g.cwiseAbs().maxCoeff();
        const Eigen::VectorXd pg = g - v * (v.transpose() * g);
        return pg.cwiseAbs().maxCoeff();
    };

    GaussianApprox out;
    int iter = 0;
    while (true) {
        if (projected_grad_norm(e.gradient) < opt.grad_tol) {
            out.converged = true;
            break;
        }
        if (iter >= opt.max_iter)
            throw numeric_error("find_mode: no convergence within the iteration limit");
        detail::factorize_posterior(ctx, e.curvature, ws);
        const Eigen::VectorXd w = ws.solver.solve(e.gradient);
        Eigen::VectorXd delta;
        if (n_con > 0) {
            const Eigen::MatrixXd z = ws.solver.solve(v);
            const Eigen::MatrixXd s = v.transpose() * z;
            Eigen::LLT<Eigen::MatrixXd> llt(s);
            if (llt.info() != Eigen::Success)
                throw numeric_error("find_mode: constraint Gram matrix is not positive definite");
            const Eigen::VectorXd target = x + w;
            delta = target - z * llt.solve(v.transpose() * target) - x;
        } else {
            delta = w;
        }

        bool accepted = false;
        double t = 1.0;
        for (int h = 0; h <= opt.max_halvings; ++h, t *= 0.5) {
            const Eigen::VectorXd xt = x + t * delta;
            double ft;
            bool finite;
            try {
                ft = conditional_value(m, ctx, xt);
                finite = std::isfinite(ft);
            } catch (const numeric_error&) {
                finite = false;
            }
            if (!finite || !(ft > e.value)) continue;
            x = xt;
            e = conditional_full(m, ctx, xt);
            accepted = true;
            break;
        }
        if (!accepted) {
            // At numerical precision the objective can refuse to increase while
            // the full step still lands within tolerance; accept that case.
            const Eigen::VectorXd xt = x + delta;
            bool finite = true;
            CondEval ef;
            try {
                ef = conditional_full(m, ctx, xt);
                finite = std::isfinite(ef.value);
            } catch (const numeric_error&) {
                finite = false;
            }
            if (finite && projected_grad_norm(ef.gradient) < opt.grad_tol) {
                x = xt;
                e = ef;
                ++iter;
                out.converged = true;
                break;
            }
            throw numeric_error("find_mode: line search failed to improve the objective");
        }
        ++iter;
    }

    out.log_det_posterior = detail::factorize_posterior(ctx, e.curvature, ws);
    if (n_con > 0) {
        ws.z = ws.solver.solve(v);
        const Eigen::MatrixXd s = v.transpose() * ws.z;
        ws.s_llt.compute(s);
        if (ws.s_llt.info() != Eigen::Success)
            throw numeric_error("find_mode: constraint Gram matrix is not positive definite");
        double lds = 0.0;
        for (int i = 0; i < n_con; ++i) lds += std::log(ws.s_llt.matrixLLT()(i, i));
        out.log_det_constraint = 2.0 * lds;
    }
    out.mode = x;
    out.value = e.value;
    out.iterations = iter;
    return out;
}

// Marginal standard deviations of the constrained Gaussian approximation for
// selected coordinates; requires the workspace to still hold the factorization
// produced by find_mode.
inline Eigen::VectorXd marginal_sd(const StackedModel& m, SolverWorkspace& ws,
                                   const std::vector<int>& coords) {
    const int n_con = static_cast<int>(m.constraint_basis.cols());
    Eigen::VectorXd out(static_cast<Eigen::Index>(coords.size()));
    Eigen::VectorXd unit = Eigen::VectorXd::Zero(m.n_latent);
    for (size_t i = 0; i < coords.size(); ++i) {
        const int idx = coords[i];
        if (idx < 0 || idx >= m.n_latent) throw numeric_error("marginal_sd: coordinate out of range");
        unit(idx) = 1.0;
        const Eigen::VectorXd col = ws.solver.solve(unit);
        double var = col(idx);
        if (n_con > 0) {
            const Eigen::VectorXd zi = ws.z.row(idx).transpose();
            var -= zi.dot(ws.s_llt.solve(zi));
        }
        out(static_cast<Eigen::Index>(i)) = std::sqrt(std::max(var, 0.0));
        unit(idx) = 0.0;
    }
    return out;
}

// ---- Laplace approximation of the hyperparameter log-posterior ----

inline double laplace_log_posterior(const StackedModel& m, const EvalContext& ctx,
                                    const GaussianApprox& ap) {
    const int n_con = static_cast<int>(m.constraint_basis.cols());
    const double n_free = static_cast<double>(m.n_latent - n_con);
    return ctx.log_prior_theta + ap.value + 0.5 * n_free * std::log(2.0 * M_PI) -
           0.5 * ap.log_det_posterior - 0.5 * ap.log_det_constraint;
}

struct HyperEval {
    double log_post = -std::numeric_limits<double>::infinity();
    GaussianApprox approx;
};

inline HyperEval log_posterior_hyper(const StackedModel& m, const Eigen::VectorXd& theta,
                                     const Eigen::VectorXd& x_warm, SolverWorkspace& ws,
                                     NewtonOptions nopt = {}) {
    const EvalContext ctx = make_context(m, theta);
    HyperEval out;
    out.approx = find_mode(m, ctx, x_warm, ws, nopt);
    out.log_post = laplace_log_posterior(m, ctx, out.approx);
    return out;
}

inline HyperEval log_posterior_hyper(const StackedModel& m, const Eigen::VectorXd& theta) {
    SolverWorkspace ws;
    return log_posterior_hyper(m, theta, Eigen::VectorXd(), ws);
}

// ---- outer optimization ----

struct OuterOptions {
    SimplexOptions simplex;
    NewtonOptions newton;
};

struct OuterResult {
    Eigen::VectorXd theta_star;
    double log_post = 0.0;
    Eigen::VectorXd mode;  // latent mode at theta_star
    int n_evals = 0;
};

inline OuterResult optimize_hyper(const StackedModel& m, const Eigen::VectorXd& theta_init,
                                  OuterOptions opt = {}) {
    const int p = m.n_hyper();
    if (theta_init.size() != p) throw config_error("optimize_hyper: theta_init dimension mismatch");
    SolverWorkspace ws;
    Eigen::VectorXd warm;  // previous mode, chains across evaluations

    if (p == 0) {
        const HyperEval ev = log_posterior_hyper(m, theta_init, warm, ws, opt.newton);
        return {theta_init, ev.log_post, ev.approx.mode, 1};
    }

    Eigen::VectorXd step(p);
    for (int j = 0; j < p; ++j)
        step(j) = m.hypers[static_cast<size_t>(j)].transform == Transform::log ? 0.5 : 0.25;

    auto objective = [&](const Eigen::VectorXd& th) -> double {
        try {
            const HyperEval ev = log_posterior_hyper(m, th, warm, ws, opt.newton);
            warm = ev.approx.mode;
            return ev.log_post;
        } catch (const numeric_error&) {
            return -std::numeric_limits<double>::infinity();
        }
    };
    const SimplexResult r = nelder_mead_maximize(objective, theta_init, step, opt.simplex);
    if (!r.converged) {
        std::ostringstream msg;
        msg << "optimize_hyper: evaluation budget exhausted (best log posterior so far "
            << r.best_value << ")";
        throw numeric_error(msg.str());
    }
    const HyperEval ev = log_posterior_hyper(m, r.best, warm, ws, opt.newton);
    return {r.best, ev.log_post, ev.approx.mode, r.n_evals};
}

// ---- utility: deterministic parallel map over an index range ----

template <class Fn>
inline void parallel_for(int n, int threads, Fn&& fn) {
    if (n <= 0) return;
    const int workers = std::max(1, std::min(threads, n));
    if (workers == 1) {
        for (int i = 0; i < n; ++i) fn(i, 0);
        return;
    }
    std::atomic<int> next{0};
    std::vector<std::thread> pool;
    pool.reserve(static_cast<size_t>(workers));
    std::vector<std::exception_ptr> errors(static_cast<size_t>(workers));
    for (int w = 0; w < workers; ++w) {
        pool.emplace_back([&, w] {
            try {
                while (true) {
                    const int i = next.fetch_add(1);
                    if (i >= n) break;
                    fn(i, w);
                }
            } catch (...) {
                errors[static_cast<size_t>(w)] = std::current_exception();
                next.store(n);  // drain remaining work
            }
        });
    }
    for (auto& t : pool) t.join();
    for (auto& err : errors)
        if (err) std::rethrow_exception(err);
}

// ---- grid exploration ----

struct HyperGridPoint {
    Eigen::VectorXd theta;      // internal scale
    double log_post = 0.0;      // unnormalized
    double weight = 0.0;        // normalized over the grid
    GaussianApprox approx;
    Eigen::VectorXd marginal_sd;  // per requested coordinate
};

struct GridOptions {
    double hessian_step = 1e-3;
    double step = 1.0;          // standardized units between nodes
    double log_drop = 2.5;      // stop threshold on log-posterior drop
    double prescreen_drop = 3.0;  // quadratic-prediction cutoff for cross terms
    int max_axis_steps = 10;
    int max_points = 600;
    int threads = 1;
    NewtonOptions newton;
};

struct GridResult {
    std::vector<HyperGridPoint> points;  // [0] is the central node
    std::vector<int> var_coords;
    Eigen::MatrixXd hessian;   // curvature of -log_post at the center, internal scale
    bool hessian_fallback = false;
    int n_evaluated = 0;       // evaluations including rejected points
    // per-direction exploration record: the step vector added per unit walk
    // index, and the log-posterior drop at each retained step (plus, minus)
    std::vector<Eigen::VectorXd> step_dirs;
    std::vector<std::array<std::vector<double>, 2>> axis_drops;
};

inline GridResult explore_grid(const StackedModel& m, const Eigen::VectorXd& theta_star,
                               const Eigen::VectorXd& warm_mode,
                               const std::vector<int>& var_coords, GridOptions opt = {}) {
    const int p = m.n_hyper();
    if (theta_star.size() != p) throw config_error("explore_grid: theta dimension mismatch");
    GridResult out;
    out.var_coords = var_coords;

    SolverWorkspace ws0;
    const EvalContext ctx0 = make_context(m, theta_star);
    GaussianApprox ap0 = find_mode(m, ctx0, warm_mode, ws0, opt.newton);
    const double f0 = laplace_log_posterior(m, ctx0, ap0);
    if (!std::isfinite(f0)) throw numeric_error("explore_grid: center log posterior not finite");
    {
        HyperGridPoint center;
        center.theta = theta_star;
        center.log_post = f0;
        if (!var_coords.empty()) center.marginal_sd = marginal_sd(m, ws0, var_coords);
        center.approx = std::move(ap0);
        out.points.push_back(std::move(center));
    }
    out.n_evaluated = 1;
    const Eigen::VectorXd xc = out.points[0].approx.mode;  // warm start for every node

    if (p == 0) {
        out.points[0].weight = 1.0;
        out.hessian.resize(0, 0);
        return out;
    }

    // one workspace per worker thread
    const int workers = std::max(1, opt.threads);
    std::vector<std::unique_ptr<SolverWorkspace>> wss;
    for (int w = 0; w < workers; ++w) wss.emplace_back(new SolverWorkspace());

    auto try_eval = [&](const Eigen::VectorXd& th, SolverWorkspace& ws, HyperGridPoint& pt) {
        try {
            const EvalContext ctx = make_context(m, th);
            pt.approx = find_mode(m, ctx, xc, ws, opt.newton);
            pt.theta = th;
            pt.log_post = laplace_log_posterior(m, ctx, pt.approx);
            if (!std::isfinite(pt.log_post)) return false;
            if (!var_coords.empty()) pt.marginal_sd = marginal_sd(m, ws, var_coords);
            return true;
        } catch (const numeric_error&) {
            return false;
        }
    };

    // finite-difference curvature of -log_post at the center
    const double h = opt.hessian_step;
    std::vector<Eigen::VectorXd> probes;
    for (int j = 0; j < p; ++j) {
        for (double s : {+1.0, -1.0}) {
            Eigen::VectorXd th = theta_star;
            th(j) += s * h;
            probes.push_back(th);
        }
    }
    for (int j = 0; j < p; ++j) {
        for (int k = j + 1; k < p; ++k) {
            for (double sj : {+1.0, -1.0}) {
                for (double sk : {+1.0, -1.0}) {
                    Eigen::VectorXd th = theta_star;
                    th(j) += sj * h;
                    th(k) += sk * h;
                    probes.push_back(th);
                }
            }
        }
    }
    std::vector<double> probe_val(probes.size());
    std::vector<char> probe_ok(probes.size(), 0);
    parallel_for(static_cast<int>(probes.size()), workers, [&](int i, int w) {
        try {
            const EvalContext ctx = make_context(m, probes[static_cast<size_t>(i)]);
            SolverWorkspace& ws = *wss[static_cast<size_t>(w)];
            const GaussianApprox ap = find_mode(m, ctx, xc, ws, opt.newton);
            probe_val[static_cast<size_t>(i)] = laplace_log_posterior(m, ctx, ap);
            probe_ok[static_cast<size_t>(i)] =
                std::isfinite(probe_val[static_cast<size_t>(i)]) ? 1 : 0;
        } catch (const numeric_error&) {
            probe_ok[static_cast<size_t>(i)] = 0;
        }
    });
    out.n_evaluated += static_cast<int>(probes.size());

    bool all_probes_ok = true;
    for (char ok : probe_ok) all_probes_ok = all_probes_ok && ok != 0;
    Eigen::MatrixXd hess = Eigen::MatrixXd::Zero(p, p);
    if (all_probes_ok) {
        size_t ix = 0;
        for (int j = 0; j < p; ++j) {
            const double fp = probe_val[ix++];
            const double fm = probe_val[ix++];
            hess(j, j) = -(fp - 2.0 * f0 + fm) / (h * h);
        }
        for (int j = 0; j < p; ++j) {
            for (int k = j + 1; k < p; ++k) {
                const double fpp = probe_val[ix++];
                const double fpm = probe_val[ix++];
                const double fmp = probe_val[ix++];
                const double fmm = probe_val[ix++];
                const double v = -(fpp - fpm - fmp + fmm) / (4.0 * h * h);
                hess(j, k) = v;
                hess(k, j) = v;
            }
        }
    }
    out.hessian = hess;

    // principal directions (standardized to unit curvature), or raw-axis fallback
    std::vector<Eigen::VectorXd> dirs(static_cast<size_t>(p));
    bool fallback = !all_probes_ok;
    if (!fallback) {
        Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(hess);
        if (eig.info() != Eigen::Success || !(eig.eigenvalues().minCoeff() > 0.0)) {
            fallback = true;
        } else {
            for (int j = 0; j < p; ++j)
                dirs[static_cast<size_t>(j)] =
                    eig.eigenvectors().col(j) / std::sqrt(eig.eigenvalues()(j));
        }
    }
    if (fallback) {
        for (int j = 0; j < p; ++j) {
            dirs[static_cast<size_t>(j)] = Eigen::VectorXd::Zero(p);
            dirs[static_cast<size_t>(j)](j) = 0.5;  // raw internal-scale step
        }
    }
    out.hessian_fallback = fallback;

    // axis walks: keep stepping while the drop stays below threshold; the first
    // point at or past the threshold is retained, then the walk stops
    out.step_dirs.resize(static_cast<size_t>(p));
    out.axis_drops.resize(static_cast<size_t>(p));
    for (int j = 0; j < p; ++j)
        out.step_dirs[static_cast<size_t>(j)] = opt.step * dirs[static_cast<size_t>(j)];
    std::vector<std::array<int, 2>> extent(static_cast<size_t>(p), {0, 0});
    for (int j = 0; j < p; ++j) {
        for (int sgn = 0; sgn < 2; ++sgn) {
            const double s = sgn == 0 ? 1.0 : -1.0;
            for (int k = 1; k <= opt.max_axis_steps; ++k) {
                const Eigen::VectorXd th =
                    theta_star + s * static_cast<double>(k) * opt.step * dirs[static_cast<size_t>(j)];
                HyperGridPoint pt;
                ++out.n_evaluated;
                if (!try_eval(th, ws0, pt)) break;
                out.axis_drops[static_cast<size_t>(j)][static_cast<size_t>(sgn)].push_back(
                    f0 - pt.log_post);
                out.points.push_back(std::move(pt));
                extent[static_cast<size_t>(j)][static_cast<size_t>(sgn)] = k;
                if (f0 - out.points.back().log_post >= opt.log_drop) break;
            }
        }
    }

    // cross combinations (standardized integer offsets with >= 2 nonzero
    // components), prescreened by the quadratic drop prediction
    if (!fallback && p > 1) {
        struct Candidate {
            std::vector<int> k;
            double predicted;
        };
        std::vector<Candidate> cands;
        std::vector<int> k(static_cast<size_t>(p));
        for (int j = 0; j < p; ++j) k[static_cast<size_t>(j)] = -extent[static_cast<size_t>(j)][1];
        while (true) {
            int nonzero = 0;
            double q = 0.0;
            for (int j = 0; j < p; ++j) {
                nonzero += k[static_cast<size_t>(j)] != 0 ? 1 : 0;
                q += 0.5 * opt.step * opt.step * k[static_cast<size_t>(j)] * k[static_cast<size_t>(j)];
            }
            if (nonzero >= 2 && q <= opt.prescreen_drop) cands.push_back({k, q});
            int j = p - 1;
            for (; j >= 0; --j) {
                if (k[static_cast<size_t>(j)] < extent[static_cast<size_t>(j)][0]) {
                    ++k[static_cast<size_t>(j)];
                    for (int l = j + 1; l < p; ++l)
                        k[static_cast<size_t>(l)] = -extent[static_cast<size_t>(l)][1];
                    break;
                }
            }
            if (j < 0) break;
        }
        std::stable_sort(cands.begin(), cands.end(),
                         [](const Candidate& a, const Candidate& b) {
                             return a.predicted < b.predicted;
                         });
        const int budget = opt.max_points - static_cast<int>(out.points.size());
        if (budget > 0 && static_cast<int>(cands.size()) > budget)
            cands.resize(static_cast<size_t>(budget));
        if (budget <= 0) cands.clear();

        std::vector<HyperGridPoint> cand_pts(cands.size());
        std::vector<char> cand_ok(cands.size(), 0);
        parallel_for(static_cast<int>(cands.size()), workers, [&](int i, int w) {
            Eigen::VectorXd th = theta_star;
            for (int j = 0; j < p; ++j)
                th += static_cast<double>(cands[static_cast<size_t>(i)].k[static_cast<size_t>(j)]) *
                      opt.step * dirs[static_cast<size_t>(j)];
            cand_ok[static_cast<size_t>(i)] =
                try_eval(th, *wss[static_cast<size_t>(w)], cand_pts[static_cast<size_t>(i)]) ? 1 : 0;
        });
        out.n_evaluated += static_cast<int>(cands.size());
        for (size_t i = 0; i < cands.size(); ++i) {
            if (cand_ok[i] != 0 && f0 - cand_pts[i].log_post < opt.log_drop)
                out.points.push_back(std::move(cand_pts[i]));
        }
    }

    // normalized weights
    double max_lp = -std::numeric_limits<double>::infinity();
    for (const auto& pt : out.points) max_lp = std::max(max_lp, pt.log_post);
    double total = 0.0;
    for (auto& pt : out.points) {
        pt.weight = std::exp(pt.log_post - max_lp);
        total += pt.weight;
    }
    for (auto& pt : out.points) pt.weight /= total;
    return out;
}

// ---- summaries ----

struct SummaryRow {
    double mean = 0.0, sd = 0.0, q025 = 0.0, q50 = 0.0, q975 = 0.0;
};

inline double normal_cdf(double z) { return 0.5 * std::erfc(-z / std::sqrt(2.0)); }

namespace detail {

inline double mixture_cdf(const std::vector<double>& mu, const std::vector<double>& sd,
                          const std::vector<double>& w, double x) {
    double f = 0.0;
    for (size_t k = 0; k < mu.size(); ++k) {
        if (sd[k] > 0.0)
            f += w[k] * normal_cdf((x - mu[k]) / sd[k]);
        else
            f += x >= mu[k] ? w[k] : 0.0;
    }
    return f;
}

inline double mixture_quantile(const std::vector<double>& mu, const std::vector<double>& sd,
                               const std::vector<double>& w, double prob) {
    double lo = std::numeric_limits<double>::infinity();
    double hi = -std::numeric_limits<double>::infinity();
    for (size_t k = 0; k < mu.size(); ++k) {
        lo = std::min(lo, mu[k] - 10.0 * sd[k] - 1e-12);
        hi = std::max(hi, mu[k] + 10.0 * sd[k] + 1e-12);
    }
    for (int it = 0; it < 200; ++it) {
        const double mid = 0.5 * (lo + hi);
        if (mixture_cdf(mu, sd, w, mid) < prob)
            lo = mid;
        else
            hi = mid;
        if (hi - lo < 1e-13 * (1.0 + std::abs(lo))) break;
    }
    return 0.5 * (lo + hi);
}

}  // namespace detail

// Mixture-of-Gaussians marginals for every requested latent coordinate.
inline std::vector<SummaryRow> latent_marginals(const GridResult& grid) {
    if (grid.points.empty()) throw numeric_error("latent_marginals: empty grid");
    const size_t n_coord = grid.var_coords.size();
    const size_t n_pts = grid.points.size();
    std::vector<SummaryRow> out(n_coord);
    std::vector<double> mu(n_pts), sd(n_pts), w(n_pts);
    for (size_t i = 0; i < n_coord; ++i) {
        const int coord = grid.var_coords[i];
        for (size_t k = 0; k < n_pts; ++k) {
            mu[k] = grid.points[k].approx.mode(coord);
            sd[k] = grid.points[k].marginal_sd(static_cast<Eigen::Index>(i));
            w[k] = grid.points[k].weight;
        }
        double mean = 0.0, ex2 = 0.0;
        for (size_t k = 0; k < n_pts; ++k) {
            mean += w[k] * mu[k];
            ex2 += w[k] * (sd[k] * sd[k] + mu[k] * mu[k]);
        }
        SummaryRow row;
        row.mean = mean;
        row.sd = std::sqrt(std::max(ex2 - mean * mean, 0.0));
        row.q025 = detail::mixture_quantile(mu, sd, w, 0.025);
        row.q50 = detail::mixture_quantile(mu, sd, w, 0.5);
        row.q975 = detail::mixture_quantile(mu, sd, w, 0.975);
        out[i] = row;
    }
    return out;
}

// Weighted summary of scattered (value, weight) pairs: moments plus quantiles
// from the midpoint-convention empirical CDF with linear interpolation.
struct WeightedSummary {
    SummaryRow row;
    int n_distinct = 0;
};

inline WeightedSummary weighted_value_summary(std::vector<std::pair<double, double>> vw,
                                              const std::vector<double>& probs,
                                              std::vector<double>& quantiles_out) {
    if (vw.empty()) throw numeric_error("weighted_value_summary: no values");
    std::sort(vw.begin(), vw.end());
    // merge numerically identical values
    std::vector<std::pair<double, double>> merged;
    for (const auto& p : vw) {
        if (!merged.empty() &&
            std::abs(p.first - merged.back().first) <=
                1e-12 * (1.0 + std::abs(merged.back().first)))
            merged.back().second += p.second;
        else
            merged.push_back(p);
    }
    double wsum = 0.0;
    for (const auto& p : merged) wsum += p.second;
    if (!(wsum > 0.0)) throw numeric_error("weighted_value_summary: zero total weight");

    WeightedSummary out;
    out.n_distinct = static_cast<int>(merged.size());
    double mean = 0.0, ex2 = 0.0;
    for (const auto& p : merged) {
        const double wk = p.second / wsum;
        mean += wk * p.first;
        ex2 += wk * p.first * p.first;
    }
    out.row.mean = mean;
    out.row.sd = std::sqrt(std::max(ex2 - mean * mean, 0.0));

    std::vector<double> cdf(merged.size());
    double cum = 0.0;
    for (size_t i = 0; i < merged.size(); ++i) {
        const double wk = merged[i].second / wsum;
        cdf[i] = cum + 0.5 * wk;
        cum += wk;
    }
    quantiles_out.clear();
    for (double prob : probs) {
        double q;
        if (prob <= cdf.front()) {
            q = merged.front().first;
        } else if (prob >= cdf.back()) {
            q = merged.back().first;
        } else {
            size_t i = 0;
            while (i + 1 < cdf.size() && cdf[i + 1] < prob) ++i;
            const double t = (prob - cdf[i]) / (cdf[i + 1] - cdf[i]);
            q = merged[i].first + t * (merged[i + 1].first - merged[i].first);
        }
        quantiles_out.push_back(q);
    }
    return out;
}

struct HyperMarginal {
    SummaryRow row;
    bool curvature_fallback = false;
};

namespace detail {

// Quadratic scale of one walk side by least squares: drop(z) ~ z^2 / (2 s^2).
// Returns -1 when the side has no usable observations.
inline double walk_side_scale(const std::vector<double>& drops) {
    double num = 0.0, den = 0.0;
    for (size_t k = 0; k < drops.size(); ++k) {
        const double z = static_cast<double>(k + 1);
        num += z * z * std::max(drops[k], 0.0);
        den += z * z * z * z;
    }
    if (!(den > 0.0)) return -1.0;
    if (!(num > 0.0)) return 8.0;  // posterior flat along the walked range
    return std::min(std::max(std::sqrt(den / (2.0 * num)), 0.25), 8.0);
}

// Slice distribution along one exploration direction, on the walk-index scale:
// observed drops inside the walked range, then a fitted gaussian tail that
// continues from the last observed value. A direction that was never walked
// collapses to a point mass at the center.
inline void direction_atoms(const std::array<std::vector<double>, 2>& drops,
                            std::vector<double>& z_out, std::vector<double>& w_out) {
    double sp = walk_side_scale(drops[0]);
    double sm = walk_side_scale(drops[1]);
    z_out.assign(1, 0.0);
    w_out.assign(1, 1.0);
    if (sp < 0.0 && sm < 0.0) return;
    if (sp < 0.0) sp = sm;
    if (sm < 0.0) sm = sp;
    for (int side = 0; side < 2; ++side) {
        const double sgn = side == 0 ? 1.0 : -1.0;
        const double s = side == 0 ? sp : sm;
        const auto& d = drops[static_cast<size_t>(side)];
        const int walked = static_cast<int>(d.size());
        const double base = walked > 0 ? std::max(d[static_cast<size_t>(walked) - 1], 0.0) : 0.0;
        const int z_end = std::max(walked, static_cast<int>(std::ceil(4.0 * s)));
        for (int k = 1; k <= z_end; ++k) {
            double drop;
            if (k <= walked) {
                drop = std::max(d[static_cast<size_t>(k) - 1], 0.0);
            } else {
                const double zk = static_cast<double>(k), zm = static_cast<double>(walked);
                drop = base + (zk * zk - zm * zm) / (2.0 * s * s);
            }
            if (drop > 40.0) break;
            z_out.push_back(sgn * static_cast<double>(k));
            w_out.push_back(std::exp(-drop));
        }
    }
}

}  // namespace detail

// Discretized marginal of one hyperparameter coordinate on the internal scale.
// The joint posterior is treated as a product of independent slice
// distributions along the exploration directions (exact in the gaussian case);
// the coordinate's marginal is then the convolution of the per-direction
// slices scaled by their components, evaluated by sequential convolution with
// re-binning. Grids without a directional record fall back to projecting the
// raw atom cloud.
struct InternalMarginal {
    std::vector<double> value;
    std::vector<double> weight;
};

inline InternalMarginal hyper_internal_marginal(const GridResult& grid, int j) {
    if (grid.points.empty()) throw numeric_error("hyper_internal_marginal: empty grid");
    InternalMarginal out;
    if (grid.step_dirs.empty() || grid.axis_drops.empty()) {
        for (const auto& pt : grid.points) {
            out.value.push_back(pt.theta(j));
            out.weight.push_back(pt.weight);
        }
        return out;
    }
    const double center = grid.points[0].theta(j);
    double comp_ref = 0.0;
    for (const auto& sd : grid.step_dirs) comp_ref = std::max(comp_ref, std::abs(sd(j)));
    std::vector<std::vector<double>> vals, wts;
    for (size_t i = 0; i < grid.step_dirs.size(); ++i) {
        const double comp = grid.step_dirs[i](j);
        if (!(std::abs(comp) > 1e-12 * comp_ref)) continue;
        std::vector<double> z, w;
        detail::direction_atoms(grid.axis_drops[i], z, w);
        if (z.size() < 2) continue;  // point mass contributes nothing
        std::vector<double> v(z.size());
        for (size_t k = 0; k < z.size(); ++k) v[k] = comp * z[k];
        vals.push_back(std::move(v));
        wts.push_back(std::move(w));
    }
    if (vals.empty()) {
        out.value.assign(1, center);
        out.weight.assign(1, 1.0);
        return out;
    }
    std::vector<double> av = vals[0], aw = wts[0];
    const int n_bins = 241;
    for (size_t i = 1; i < vals.size(); ++i) {
        double lo = std::numeric_limits<double>::infinity();
        double hi = -std::numeric_limits<double>::infinity();
        for (double a : av)
            for (double b : vals[i]) {
                lo = std::min(lo, a + b);
                hi = std::max(hi, a + b);
            }
        if (!(hi > lo)) continue;
        const double dx = (hi - lo) / static_cast<double>(n_bins - 1);
        std::vector<double> bw(static_cast<size_t>(n_bins), 0.0);
        for (size_t a = 0; a < av.size(); ++a) {
            for (size_t b = 0; b < vals[i].size(); ++b) {
                const double v = av[a] + vals[i][b];
                const double w = aw[a] * wts[i][b];
                const double pos = (v - lo) / dx;
                const int k0 = std::min(static_cast<int>(pos), n_bins - 2);
                const double t = pos - static_cast<double>(k0);
                bw[static_cast<size_t>(k0)] += w * (1.0 - t);
                bw[static_cast<size_t>(k0) + 1] += w * t;
            }
        }
        av.clear();
        aw.clear();
        for (int k = 0; k < n_bins; ++k) {
            av.push_back(lo + dx * static_cast<double>(k));
            aw.push_back(bw[static_cast<size_t>(k)]);
        }
    }
    double w_max = 0.0;
    for (double w : aw) w_max = std::max(w_max, w);
    for (size_t k = 0; k < av.size(); ++k) {
        if (aw[k] > 1e-12 * w_max) {
            out.value.push_back(center + av[k]);
            out.weight.push_back(aw[k]);
        }
    }
    return out;
}

namespace detail {

inline double natural_derivative(const HyperInfo& h, double internal) {
    switch (h.transform) {
        case Transform::log: return std::exp(internal);
        case Transform::fisher_z: {
            const double t = std::tanh(internal);
            return 1.0 - t * t;
        }
        case Transform::identity: return 1.0;
    }
    throw numeric_error("natural_derivative: bad transform");
}

// (pseudo-)inverse diagonal of the internal-scale curvature, eigenvalues
// clamped away from zero so the fallback path stays usable
inline double internal_sd_from_hessian(const Eigen::MatrixXd& hess, int j) {
    if (hess.rows() == 0) return 1.0;
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(hess);
    if (eig.info() != Eigen::Success) return 1.0;
    const double floor_ev = std::max(1e-8, eig.eigenvalues().cwiseAbs().maxCoeff() * 1e-10);
    double var = 0.0;
    for (int i = 0; i < hess.rows(); ++i) {
        const double ev = std::max(eig.eigenvalues()(i), floor_ev);
        const double u = eig.eigenvectors()(j, i);
        var += u * u / ev;
    }
    return std::sqrt(var);
}

}  // namespace detail

// Natural-scale hyperparameter marginals from the directional reconstruction;
// degenerate marginals (fewer than 3 distinct internal values) fall back to
// the curvature-based Gaussian summary on the internal scale, mapped through
// the transform.
inline std::vector<HyperMarginal> hyper_marginals(const GridResult& grid, const StackedModel& m) {
    if (grid.points.empty()) throw numeric_error("hyper_marginals: empty grid");
    const int p = m.n_hyper();
    std::vector<HyperMarginal> out(static_cast<size_t>(p));
    const double z975 = 1.959963984540054;
    for (int j = 0; j < p; ++j) {
        const auto& info = m.hypers[static_cast<size_t>(j)];
        const InternalMarginal im = hyper_internal_marginal(grid, j);
        std::vector<std::pair<double, double>> vw;
        vw.reserve(im.value.size());
        for (size_t k = 0; k < im.value.size(); ++k)
            vw.emplace_back(hyper_natural_value(info, im.value[k]), im.weight[k]);
        std::vector<double> qs;
        const WeightedSummary ws = weighted_value_summary(vw, {0.025, 0.5, 0.975}, qs);
        HyperMarginal hm;
        if (ws.n_distinct >= 3) {
            hm.row = ws.row;
            hm.row.q025 = qs[0];
            hm.row.q50 = qs[1];
            hm.row.q975 = qs[2];
        } else {
            hm.curvature_fallback = true;
            const double center = grid.points[0].theta(j);
            const double sd_int = detail::internal_sd_from_hessian(grid.hessian, j);
            hm.row.mean = hyper_natural_value(info, center);
            hm.row.sd = std::abs(detail::natural_derivative(info, center)) * sd_int;
            hm.row.q025 = hyper_natural_value(info, center - z975 * sd_int);
            hm.row.q50 = hyper_natural_value(info, center);
            hm.row.q975 = hyper_natural_value(info, center + z975 * sd_int);
            if (hm.row.q025 > hm.row.q975) std::swap(hm.row.q025, hm.row.q975);
        }
        out[static_cast<size_t>(j)] = hm;
    }
    return out;
}

// ---- end-to-end fit ----

struct FitOptions {
    Eigen::VectorXd theta_init;  // empty -> model defaults
    int threads = 1;
    SimplexOptions simplex;
    NewtonOptions newton;
    GridOptions grid;
    bool marginals_for_eta = false;  // eta-representation coordinates are skipped by default
};

struct FitDiagnostics {
    int outer_evals = 0;
    int grid_size = 0;
    int grid_evaluated = 0;
    bool hessian_fallback = false;
    std::vector<int> hyper_curvature_fallback;
    double wall_seconds = 0.0;
};

struct FitResult {
    std::vector<int> latent_coords;
    std::vector<SummaryRow> latent;
    std::vector<HyperMarginal> hyper;
    Eigen::VectorXd theta_mode;
    double log_evidence = 0.0;
    GridResult grid;
    FitDiagnostics diagnostics;
};

inline std::vector<int> default_marginal_coords(const StackedModel& m, bool include_eta) {
    std::vector<int> coords;
    for (const auto& blk : m.layout) {
        if (blk.kind == LatentBlockKind::eta_rep && !include_eta) continue;
        for (int i = 0; i < blk.size; ++i) coords.push_back(blk.offset + i);
    }
    return coords;
}

inline FitResult fit(const StackedModel& m, FitOptions opt = {}) {
    const auto t_start = std::chrono::steady_clock::now();
    Eigen::VectorXd th0 = opt.theta_init.size() == m.n_hyper() ? opt.theta_init : m.theta_init();
    OuterOptions oo;
    oo.simplex = opt.simplex;
    oo.newton = opt.newton;
    const OuterResult outer = optimize_hyper(m, th0, oo);

    GridOptions go = opt.grid;
    go.newton = opt.newton;
    go.threads = opt.threads;
    const std::vector<int> coords = default_marginal_coords(m, opt.marginals_for_eta);
    GridResult grid = explore_grid(m, outer.theta_star, outer.mode, coords, go);

    FitResult res;
    res.latent_coords = coords;
    res.latent = latent_marginals(grid);
    res.hyper = hyper_marginals(grid, m);
    res.theta_mode = outer.theta_star;

    double max_lp = -std::numeric_limits<double>::infinity();
    for (const auto& pt : grid.points) max_lp = std::max(max_lp, pt.log_post);
    double sum = 0.0;
    for (const auto& pt : grid.points) sum += std::exp(pt.log_post - max_lp);
    const int p = m.n_hyper();
    if (p == 0) {
        res.log_evidence = grid.points[0].log_post;
    } else if (!grid.hessian_fallback) {
        Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(grid.hessian);
        double half_log_det = 0.0;
        for (int j = 0; j < p; ++j) half_log_det += 0.5 * std::log(eig.eigenvalues()(j));
        res.log_evidence = max_lp + std::log(sum) + p * std::log(go.step) - half_log_det;
    } else {
        res.log_evidence = max_lp + std::log(sum) + p * std::log(0.5);
    }

    res.diagnostics.outer_evals = outer.n_evals;
    res.diagnostics.grid_size = static_cast<int>(grid.points.size());
    res.diagnostics.grid_evaluated = grid.n_evaluated;
    res.diagnostics.hessian_fallback = grid.hessian_fallback;
    for (size_t j = 0; j < res.hyper.size(); ++j)
        if (res.hyper[j].curvature_fallback)
            res.diagnostics.hyper_curvature_fallback.push_back(static_cast<int>(j));
    res.grid = std::move(grid);
    res.diagnostics.wall_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t_start).count();
    return res;
}

}  // namespace lgmcr
