#pragma once

// Command-line front end: 'simulate' writes a dataset and its generating
// parameters, 'fit' runs the full inference pipeline on CSV input and emits
// machine-readable summaries plus plot-ready curves, 'check' closes the loop
// (simulate -> fit -> compare against the generating truth).
//
// Exit codes: 0 success, 1 numerical failure, 2 usage or I/O error.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "check.hpp"
#include "config.hpp"
#include "csv.hpp"
#include "curves.hpp"
#include "inference.hpp"
#include "simulate.hpp"
#include "stacker.hpp"

namespace lgmcr {

using ordered_json = nlohmann::ordered_json;

namespace cli_detail {

inline std::string join_path(const std::string& dir, const std::string& name) {
    return (std::filesystem::path(dir) / name).string();
}

inline void write_text(const std::string& path, const std::string& text) {
    std::ofstream out(path);
    if (!out) throw data_error("cannot write '" + path + "'");
    out << text;
    if (!out) throw data_error("write failed for '" + path + "'");
}

// sorted union of covariate names; every row must carry every name
template <class Rec>
std::vector<std::string> covariate_columns(const std::vector<Rec>& recs) {
    std::set<std::string> names;
    for (const auto& r : recs)
        for (const auto& [k, v] : r.covariates) names.insert(k);
    return {names.begin(), names.end()};
}

template <class Rec>
double covariate_or_throw(const Rec& r, const std::string& name, const std::string& ctx) {
    auto it = r.covariates.find(name);
    if (it == r.covariates.end())
        throw data_error(ctx + ": covariate '" + name + "' missing on some rows");
    return it->second;
}

inline ordered_json summary_json_row(const std::string& name, const SummaryRow& r) {
    ordered_json j;
    j["name"] = name;
    j["mean"] = r.mean;
    j["sd"] = r.sd;
    j["q025"] = r.q025;
    j["q50"] = r.q50;
    j["q975"] = r.q975;
    return j;
}

// per-latent-coordinate block name and human label, from the model layout
inline void coordinate_labels(const StackedModel& m, std::vector<std::string>& block_of,
                              std::vector<std::string>& label_of) {
    block_of.assign(static_cast<size_t>(m.n_latent), "");
    label_of.assign(static_cast<size_t>(m.n_latent), "");
    for (const auto& lb : m.layout) {
        const bool pairs =
            lb.kind == LatentBlockKind::effect && lb.effect_index >= 0 &&
            m.spec.effects[static_cast<size_t>(lb.effect_index)].kind == EffectKind::iid2d;
        for (int i = 0; i < lb.size; ++i) {
            const size_t c = static_cast<size_t>(lb.offset + i);
            block_of[c] = lb.name;
            if (lb.kind == LatentBlockKind::coefficients)
                label_of[c] = lb.coef_names[static_cast<size_t>(i)];
            else if (pairs)
                label_of[c] = (i % 2 ? "w:" : "v:") + std::to_string(i / 2 + 1);
            else if (!lb.grid.empty())
                label_of[c] = format_double(lb.grid[static_cast<size_t>(i)]);
            else
                label_of[c] = std::to_string(i + 1);
        }
    }
}

}  // namespace cli_detail

// ---- simulate --------------------------------------------------------------

inline void write_dataset_csvs(const JointDataset& ds, const std::string& out_dir) {
    using cli_detail::covariate_or_throw;
    {
        const auto cov = cli_detail::covariate_columns(ds.longitudinal);
        std::vector<std::string> header = {"id", "time", "value"};
        header.insert(header.end(), cov.begin(), cov.end());
        std::vector<std::vector<std::string>> rows;
        rows.reserve(ds.longitudinal.size());
        for (const auto& r : ds.longitudinal) {
            std::vector<std::string> row = {std::to_string(r.original_id),
                                            format_double(r.time), format_double(r.value)};
            for (const auto& c : cov)
                row.push_back(format_double(covariate_or_throw(r, c, "longitudinal.csv")));
            rows.push_back(std::move(row));
        }
        write_csv(cli_detail::join_path(out_dir, "longitudinal.csv"), header, rows);
    }
    {
        const auto cov = cli_detail::covariate_columns(ds.survival);
        std::vector<std::string> header = {"id", "time", "cause"};
        header.insert(header.end(), cov.begin(), cov.end());
        std::vector<std::vector<std::string>> rows;
        rows.reserve(ds.survival.size());
        for (const auto& r : ds.survival) {
            std::vector<std::string> row = {std::to_string(r.original_id),
                                            format_double(r.time), std::to_string(r.cause)};
            for (const auto& c : cov)
                row.push_back(format_double(covariate_or_throw(r, c, "survival.csv")));
            rows.push_back(std::move(row));
        }
        write_csv(cli_detail::join_path(out_dir, "survival.csv"), header, rows);
    }
}

inline ordered_json truth_json(const SimulateRun& run) {
    ordered_json j;
    j["generator"] = run.example1 ? "example1" : "example5";
    std::vector<double> gamma, beta;
    const auto& causes = run.example1 ? run.e1.causes : run.sim.causes;
    for (const auto& c : causes) {
        gamma.push_back(c.gamma);
        beta.push_back(c.beta);
    }
    if (run.example1) {
        const Example1Config& c = run.e1;
        j["seed"] = c.seed;
        j["n_individuals"] = c.n_individuals;
        j["n_obs_min"] = c.n_obs_min;
        j["n_obs_max"] = c.n_obs_max;
        j["age_min"] = c.age_min;
        j["age_max"] = c.age_max;
        j["gamma"] = gamma;
        j["beta"] = beta;
        j["sigma_u"] = nullptr;
        j["trend_power"] = nullptr;
        j["censoring_rate"] = nullptr;
        j["legacy_appendix"] = nullptr;
        j["tau_v"] = c.tau_v;
        j["tau_w"] = c.tau_w;
        j["rho"] = c.rho;
        j["alpha"] = c.alpha;
        j["kappa"] = c.kappa;
        j["intercept_long"] = c.intercept_long;
        j["beta_age_long"] = c.beta_age_long;
    } else {
        const SimConfig& c = run.sim;
        j["seed"] = c.seed;
        j["n_individuals"] = c.n_individuals;
        j["n_obs_min"] = c.n_obs_min;
        j["n_obs_max"] = c.n_obs_max;
        j["age_min"] = c.age_min;
        j["age_max"] = c.age_max;
        j["gamma"] = gamma;
        j["beta"] = beta;
        j["sigma_u"] = c.sigma_u;
        j["trend_power"] = c.trend_power;
        j["censoring_rate"] = c.censoring_rate;
        j["legacy_appendix"] = c.legacy_appendix;
        j["tau_v"] = nullptr;
        j["tau_w"] = nullptr;
        j["rho"] = nullptr;
        j["alpha"] = nullptr;
        j["kappa"] = nullptr;
        j["intercept_long"] = nullptr;
        j["beta_age_long"] = nullptr;
    }
    return j;
}

inline void cmd_simulate(const SimulateRun& run, const std::string& out_dir) {
    const JointDataset ds =
        run.example1 ? simulate_example1(run.e1) : simulate_example5(run.sim);
    write_dataset_csvs(ds, out_dir);
    cli_detail::write_text(cli_detail::join_path(out_dir, "truth.json"),
                           truth_json(run).dump(2) + "\n");
    std::fprintf(stderr, "simulate: %zu individuals, %zu longitudinal rows -> %s\n",
                 ds.survival.size(), ds.longitudinal.size(), out_dir.c_str());
}

// ---- fit -------------------------------------------------------------------

struct CurvePoint {
    std::string curve;
    int cause = 0;
    double time = 0.0;
    double value = 0.0;
};

// fitted mean trajectory over the reporting grid of the first gridded
// random-walk attachment in the longitudinal block; fixed effects at their
// sample-mean covariates, other random effects at zero
inline std::vector<CurvePoint> trajectory_curve(const StackedModel& m, const FitResult& fr,
                                                const JointDataset& data) {
    std::vector<CurvePoint> out;
    if (m.spec.blocks.empty() || data.longitudinal.empty()) return out;
    const BlockSpec& lb = m.spec.blocks.front();

    double eta0 = 0.0;
    for (const auto& t : lb.fixed_terms) {
        double mean_cov = 1.0;
        if (t.covariate != "1") {
            double sum = 0.0;
            for (const auto& r : data.longitudinal) {
                if (t.covariate == "time")
                    sum += r.time;
                else
                    sum += cli_detail::covariate_or_throw(r, t.covariate, "trajectory");
            }
            mean_cov = sum / static_cast<double>(data.longitudinal.size());
        }
        eta0 += coefficient_row(m, fr, t.coefficient).mean * mean_cov;
    }

    for (const auto& att : lb.attachments) {
        for (const auto& layout : m.layout) {
            if (layout.kind != LatentBlockKind::effect || layout.name != att.effect ||
                layout.grid.empty())
                continue;
            for (int i = 0; i < layout.size; ++i) {
                const int pos = coord_position(fr.latent_coords, layout.offset + i);
                if (pos < 0) continue;
                const double eta = eta0 + fr.latent[static_cast<size_t>(pos)].mean;
                CurvePoint p;
                p.curve = "trajectory";
                p.time = layout.grid[static_cast<size_t>(i)];
                p.value = lb.family == Family::poisson ? std::exp(eta) : eta;
                out.push_back(p);
            }
            return out;  // first gridded attachment wins
        }
    }
    return out;
}

// posterior-mean parametric hazards per cause block, at the sample-mean
// survival covariates with shared random effects at zero
inline std::vector<CauseHazard> posterior_mean_hazards(const StackedModel& m,
                                                       const FitResult& fr,
                                                       const JointDataset& data,
                                                       std::vector<int>& cause_of) {
    std::vector<CauseHazard> causes;
    cause_of.clear();
    for (size_t b = 0; b < m.spec.blocks.size(); ++b) {
        const BlockSpec& blk = m.spec.blocks[b];
        if (blk.cause < 1) continue;
        CauseHazard h;
        double eta = 0.0;
        for (const auto& t : blk.fixed_terms) {
            double mean_cov = 1.0;
            if (t.covariate != "1") {
                double sum = 0.0;
                for (const auto& r : data.survival) {
                    if (t.covariate == "time")
                        sum += r.time;
                    else
                        sum += cli_detail::covariate_or_throw(r, t.covariate, "hazard curve");
                }
                mean_cov = sum / static_cast<double>(data.survival.size());
            }
            eta += coefficient_row(m, fr, t.coefficient).mean * mean_cov;
        }
        h.log_scale = eta;
        if (blk.family == Family::weibull_surv) {
            const BlockRuntime& rt = m.block_runtime[b];
            h.alpha = rt.hyper_index >= 0
                          ? fr.hyper[static_cast<size_t>(rt.hyper_index)].row.mean
                          : rt.fixed_value;
        }
        causes.push_back(h);
        cause_of.push_back(blk.cause);
    }
    return causes;
}

inline void write_fit_outputs(const StackedModel& m, const FitResult& fr,
                              const JointDataset& data, const ModelConfig& mc,
                              const std::string& out_dir, double time_divisor) {
    std::vector<std::string> block_of, label_of;
    cli_detail::coordinate_labels(m, block_of, label_of);

    {
        std::vector<std::vector<std::string>> rows;
        for (size_t k = 0; k < fr.latent_coords.size(); ++k) {
            const int c = fr.latent_coords[k];
            const SummaryRow& r = fr.latent[k];
            rows.push_back({std::to_string(c), block_of[static_cast<size_t>(c)],
                            label_of[static_cast<size_t>(c)], format_double(r.mean),
                            format_double(r.sd), format_double(r.q025), format_double(r.q50),
                            format_double(r.q975)});
        }
        write_csv(cli_detail::join_path(out_dir, "latent.csv"),
                  {"coord", "block", "label", "mean", "sd", "q025", "q50", "q975"}, rows);
    }
    {
        std::vector<std::vector<std::string>> rows;
        for (int j = 0; j < m.n_hyper(); ++j) {
            const HyperMarginal& h = fr.hyper[static_cast<size_t>(j)];
            rows.push_back({m.hypers[static_cast<size_t>(j)].name, format_double(h.row.mean),
                            format_double(h.row.sd), format_double(h.row.q025),
                            format_double(h.row.q50), format_double(h.row.q975),
                            h.curvature_fallback ? "1" : "0"});
        }
        write_csv(cli_detail::join_path(out_dir, "hyper.csv"),
                  {"name", "mean", "sd", "q025", "q50", "q975", "curvature_fallback"}, rows);
    }
    {
        std::vector<CurvePoint> pts = trajectory_curve(m, fr, data);
        std::vector<int> cause_of;
        const auto hazards = posterior_mean_hazards(m, fr, data, cause_of);
        if (!hazards.empty() && !data.survival.empty()) {
            double t_max = mc.curve_t_max;
            if (!(t_max > 0.0))
                for (const auto& r : data.survival) t_max = std::max(t_max, r.time);
            std::vector<double> times(static_cast<size_t>(mc.curve_points));
            for (int i = 0; i < mc.curve_points; ++i)
                times[static_cast<size_t>(i)] = t_max * (i + 1.0) / mc.curve_points;
            const IncidenceCurves inc = incidence_curves(hazards, times);
            for (size_t k = 0; k < times.size(); ++k) {
                CurvePoint p;
                p.curve = "survival";
                p.time = times[k];
                p.value = inc.survival[k];
                pts.push_back(p);
            }
            for (size_t j = 0; j < hazards.size(); ++j)
                for (size_t k = 0; k < times.size(); ++k) {
                    CurvePoint p;
                    p.curve = "cif";
                    p.cause = cause_of[j];
                    p.time = times[k];
                    p.value = inc.cif[j][k];
                    pts.push_back(p);
                }
        }
        std::vector<std::vector<std::string>> rows;
        for (const auto& p : pts)
            rows.push_back({p.curve, std::to_string(p.cause), format_double(p.time),
                            format_double(p.value)});
        write_csv(cli_detail::join_path(out_dir, "curves.csv"),
                  {"curve", "cause", "time", "value"}, rows);
    }
    {
        ordered_json j;
        j["command"] = "fit";
        j["log_evidence"] = fr.log_evidence;
        j["n_latent"] = m.n_latent;
        j["n_rows"] = m.n_rows();
        j["n_hyper"] = m.n_hyper();
        std::vector<double> tm(fr.theta_mode.data(), fr.theta_mode.data() + fr.theta_mode.size());
        j["theta_mode"] = tm;
        ordered_json hy = ordered_json::array();
        for (int k = 0; k < m.n_hyper(); ++k) {
            ordered_json row = cli_detail::summary_json_row(
                m.hypers[static_cast<size_t>(k)].name, fr.hyper[static_cast<size_t>(k)].row);
            row["curvature_fallback"] = fr.hyper[static_cast<size_t>(k)].curvature_fallback;
            hy.push_back(row);
        }
        j["hyper"] = hy;
        ordered_json co = ordered_json::array();
        for (const auto& name : m.coef_names)
            co.push_back(
                cli_detail::summary_json_row(name, coefficient_row(m, fr, name)));
        j["coefficients"] = co;
        ordered_json diag;
        diag["outer_evals"] = fr.diagnostics.outer_evals;
        diag["grid_size"] = fr.diagnostics.grid_size;
        diag["grid_evaluated"] = fr.diagnostics.grid_evaluated;
        diag["hessian_fallback"] = fr.diagnostics.hessian_fallback;
        diag["hyper_curvature_fallback"] = fr.diagnostics.hyper_curvature_fallback;
        j["diagnostics"] = diag;
        j["warnings"] = data.warnings;
        if (time_divisor > 0.0)
            j["time_divisor"] = time_divisor;
        else
            j["time_divisor"] = nullptr;
        cli_detail::write_text(cli_detail::join_path(out_dir, "summary.json"),
                               j.dump(2) + "\n");
    }
}

inline void cmd_fit(FitRun& run, const std::string& out_dir, bool rescale_time) {
    const Family long_family =
        run.mc.spec.blocks.empty() ? Family::gaussian : run.mc.spec.blocks.front().family;
    std::vector<LongitudinalRecord> lng =
        load_longitudinal_csv(run.longitudinal_path, long_family);
    std::vector<SurvivalRecord> srv = load_survival_csv(run.survival_path, run.n_causes);

    double divisor = 0.0;
    if (rescale_time) {
        for (const auto& r : srv) divisor = std::max(divisor, r.time);
        for (const auto& r : lng) divisor = std::max(divisor, r.time);
        if (!(divisor > 0.0)) throw data_error("rescale-time: no positive times found");
        for (auto& r : srv) r.time /= divisor;
        for (auto& r : lng) r.time /= divisor;
    }
    apply_derive(run.mc, lng);
    const JointDataset data =
        validate_joint_dataset(std::move(lng), std::move(srv), run.n_causes,
                               run.truncate_late);
    const StackedModel m = assemble(run.mc.spec, data);
    const FitResult fr = fit(m, run.mc.options);
    write_fit_outputs(m, fr, data, run.mc, out_dir, divisor);
    std::fprintf(stderr,
                 "fit: %d latent, %d hyper, evidence %.6f, grid %d points (%.1fs)\n",
                 m.n_latent, m.n_hyper(), fr.log_evidence, fr.diagnostics.grid_size,
                 fr.diagnostics.wall_seconds);
}

// ---- check -----------------------------------------------------------------

inline void cmd_check(const CheckRun& run, const std::string& out_dir) {
    const CheckOutcome oc = run_check(run);
    cli_detail::write_text(cli_detail::join_path(out_dir, "verdict.json"),
                           oc.verdict.dump(2) + "\n");
    std::fputs(oc.table.c_str(), stdout);
}

inline int run_cli(int argc, char** argv) {
    CLI::App app{"competing-risks joint models: simulate, fit, and recovery checks"};
    app.require_subcommand(1);
    std::string config_path, out_dir = ".";
    int threads = 0;
    bool rescale = false, legacy = false;
    int n_seeds = 1;
    double tol_scale = 1.0;
    auto add_common = [&](CLI::App* c) {
        c->add_option("--config", config_path, "configuration file")->required();
        c->add_option("--out", out_dir, "output directory (default .)");
        c->add_option("--threads", threads, "grid exploration threads");
        c->add_flag("--rescale-time", rescale, "divide all times by the observed maximum");
        c->add_flag("--legacy-appendix", legacy, "legacy simulation order (see README)");
    };
    CLI::App* cs = app.add_subcommand("simulate", "write a simulated dataset");
    CLI::App* cf = app.add_subcommand("fit", "fit the configured model to CSV data");
    CLI::App* cc = app.add_subcommand("check", "simulate, fit, and compare to the truth");
    add_common(cs);
    add_common(cf);
    add_common(cc);
    cc->add_option("--seeds", n_seeds, "number of consecutive seeds to sweep");
    cc->add_option("--tolerance-scale", tol_scale,
                   "scale all tolerances (0 makes every comparison fail)");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? 0 : 2;
    }

    try {
        std::error_code ec;
        std::filesystem::create_directories(out_dir, ec);
        if (ec) throw data_error("cannot create output directory '" + out_dir + "'");
        ConfigFile f = parse_config_file(config_path);
        if (cs->parsed()) {
            mark_inactive_sections_used(f, {"simulate"}, {});
            SimulateRun run = read_simulate_config(f);
            if (legacy) {
                if (run.example1)
                    throw config_error("--legacy-appendix only applies to example5");
                run.sim.legacy_appendix = true;
            }
            f.check_all_used();
            cmd_simulate(run, out_dir);
        } else if (cf->parsed()) {
            mark_inactive_sections_used(f, {"data", "derive", "model", "fit"},
                                        {"effect.", "block."});
            FitRun run = read_fit_config(f);
            f.check_all_used();
            if (threads > 0) run.mc.options.threads = threads;
            cmd_fit(run, out_dir, rescale);
        } else {
            mark_inactive_sections_used(f, {"simulate", "derive", "model", "fit", "check"},
                                        {"effect.", "block."});
            CheckRun run = read_check_config(f);
            f.check_all_used();
            if (threads > 0) run.mc.options.threads = threads;
            run.n_seeds = n_seeds;
            run.tolerance_scale = tol_scale;
            cmd_check(run, out_dir);
        }
        return 0;
    } catch (const numeric_error& e) {
        std::fprintf(stderr, "numerical failure: %s\n", e.what());
        return 1;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 2;
    }
}

}  // namespace lgmcr
