#pragma once

// Derivative-free simplex maximizer (Nelder-Mead with the standard
// reflection/expansion/contraction/shrink coefficients 1, 2, 0.5, 0.5).
// The objective may return -inf for infeasible points; such vertices are
// pushed out of the simplex by ordinary moves.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <limits>
#include <utility>
#include <vector>

namespace lgmcr {

struct SimplexOptions {
    double diameter_tol = 1e-4;  // max-norm spread of vertices around the best
    double value_tol = 1e-6;     // best-to-worst objective spread
    int max_evals = 2000;
};

struct SimplexResult {
    Eigen::VectorXd best;
    double best_value = -std::numeric_limits<double>::infinity();
    int n_evals = 0;
    bool converged = false;
};

// Maximizes f starting from init, with per-coordinate initial offsets `step`.
template <class F>
SimplexResult nelder_mead_maximize(F&& f, const Eigen::VectorXd& init,
                                   const Eigen::VectorXd& step, SimplexOptions opt = {}) {
    const int p = static_cast<int>(init.size());
    SimplexResult res;
    if (p == 0) {
        res.best = init;
        res.best_value = f(init);
        res.n_evals = 1;
        res.converged = true;
        return res;
    }

    const double inf = std::numeric_limits<double>::infinity();
    auto phi = [&](const Eigen::VectorXd& x) {  // minimized
        const double v = f(x);
        ++res.n_evals;
        return std::isfinite(v) ? -v : inf;
    };

    std::vector<Eigen::VectorXd> pts(static_cast<size_t>(p) + 1, init);
    std::vector<double> vals(static_cast<size_t>(p) + 1);
    for (int j = 0; j < p; ++j) pts[static_cast<size_t>(j) + 1](j) += step(j);
    for (int i = 0; i <= p; ++i) vals[static_cast<size_t>(i)] = phi(pts[static_cast<size_t>(i)]);

    std::vector<int> order(static_cast<size_t>(p) + 1);
    auto sort_simplex = [&] {
        for (int i = 0; i <= p; ++i) order[static_cast<size_t>(i)] = i;
        std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
            return vals[static_cast<size_t>(a)] < vals[static_cast<size_t>(b)];
        });
        std::vector<Eigen::VectorXd> np(pts.size());
        std::vector<double> nv(vals.size());
        for (size_t i = 0; i < order.size(); ++i) {
            np[i] = pts[static_cast<size_t>(order[i])];
            nv[i] = vals[static_cast<size_t>(order[i])];
        }
        pts.swap(np);
        vals.swap(nv);
    };

    while (true) {
        sort_simplex();
        double diameter = 0.0;
        for (int i = 1; i <= p; ++i)
            diameter = std::max(diameter,
                                (pts[static_cast<size_t>(i)] - pts[0]).cwiseAbs().maxCoeff());
        const double spread = vals[static_cast<size_t>(p)] - vals[0];
        if (diameter < opt.diameter_tol && spread < opt.value_tol) {
            res.converged = true;
            break;
        }
        if (res.n_evals >= opt.max_evals) break;

        Eigen::VectorXd centroid = Eigen::VectorXd::Zero(p);
        for (int i = 0; i < p; ++i) centroid += pts[static_cast<size_t>(i)];
        centroid /= static_cast<double>(p);
        const Eigen::VectorXd& worst = pts[static_cast<size_t>(p)];

        const Eigen::VectorXd xr = centroid + (centroid - worst);
        const double fr = phi(xr);
        if (fr < vals[0]) {
            const Eigen::VectorXd xe = centroid + 2.0 * (centroid - worst);
            const double fe = phi(xe);
            if (fe < fr) {
                pts[static_cast<size_t>(p)] = xe;
                vals[static_cast<size_t>(p)] = fe;
            } else {
                pts[static_cast<size_t>(p)] = xr;
                vals[static_cast<size_t>(p)] = fr;
            }
        } else if (fr < vals[static_cast<size_t>(p) - 1]) {
            pts[static_cast<size_t>(p)] = xr;
            vals[static_cast<size_t>(p)] = fr;
        } else {
            bool shrink = false;
            if (fr < vals[static_cast<size_t>(p)]) {
                const Eigen::VectorXd xc = centroid + 0.5 * (xr - centroid);
                const double fc = phi(xc);
                if (fc <= fr) {
                    pts[static_cast<size_t>(p)] = xc;
                    vals[static_cast<size_t>(p)] = fc;
                } else {
                    shrink = true;
                }
            } else {
                const Eigen::VectorXd xc = centroid + 0.5 * (worst - centroid);
                const double fc = phi(xc);
                if (fc < vals[static_cast<size_t>(p)]) {
                    pts[static_cast<size_t>(p)] = xc;
                    vals[static_cast<size_t>(p)] = fc;
                } else {
                    shrink = true;
                }
            }
            if (shrink) {
                for (int i = 1; i <= p; ++i) {
                    pts[static_cast<size_t>(i)] = pts[0] + 0.5 * (pts[static_cast<size_t>(i)] - pts[0]);
                    vals[static_cast<size_t>(i)] = phi(pts[static_cast<size_t>(i)]);
                }
            }
        }
    }

    sort_simplex();
    res.best = pts[0];
    res.best_value = std::isfinite(vals[0]) ? -vals[0] : -inf;
    return res;
}

}  // namespace lgmcr
