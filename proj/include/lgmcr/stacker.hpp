#pragma once

// Assembles a ModelSpec plus a JointDataset into one stacked latent Gaussian
// model: a single response vector with per-row families, a sparse design over
// the joint latent field [coefficients | effects | eta representations], a
// block-diagonal prior precision, and a transformed hyperparameter vector.
//
// Copy scalings enter the design as theta-dependent weights. When a block's
// linear predictor is copied, that block's eta values become explicit latent
// coordinates, tied to their additive definition by high-precision Gaussian
// pseudo-observations (y = 0 on [definition - eta]) appended after the data
// rows.

#include <Eigen/Dense>
#include <Eigen/Sparse>

#include <algorithm>
#include <cmath>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "data.hpp"
#include "families.hpp"
#include "gmrf.hpp"
#include "model_spec.hpp"

namespace lgmcr {

enum class Transform { log, fisher_z, identity };

struct HyperInfo {
    std::string name;
    Transform transform = Transform::log;
    PriorSpec prior;
    bool prior_on_internal = false;  // gaussian priors on fisher-z / identity scales
    double init = 0.0;               // internal scale
};

struct StackedRow {
    Family family = Family::gaussian;
    double y = 0.0;
    int d = 0;           // survival event indicator
    int block = 0;       // index into block_runtime (pseudo blocks appended)
    int individual = 0;  // 0 when not tied to one individual
};

struct DesignEntry {
    int row = 0;
    int col = 0;
    double weight = 1.0;
    int scaling_hyper = -1;  // multiply by this hyper's (identity-scale) value
};

enum class LatentBlockKind { coefficients, effect, eta_rep };

struct LatentBlockInfo {
    std::string name;
    LatentBlockKind kind = LatentBlockKind::effect;
    int offset = 0;
    int size = 0;
    int effect_index = -1;          // for kind == effect
    std::vector<double> grid;       // rw2 reporting grid, may be empty
    std::vector<std::string> coef_names;  // for kind == coefficients
};

struct BlockRuntime {
    Family family = Family::gaussian;
    int hyper_index = -1;     // gaussian tau / weibull alpha, -1 if fixed or none
    double fixed_value = 1.0;
};

struct EffectRuntime {
    EffectKind kind = EffectKind::iid;
    int offset = 0;
    int size = 0;  // latent coordinates (2 * pairs for iid2d)
    int hyper_tau = -1, hyper_tau_w = -1, hyper_rho = -1;
    double fixed_tau = 1.0, fixed_tau_w = 1.0, fixed_rho = 0.0;
    SparsePrecision unit_precision;  // iid/rw2 template at tau = 1 (empty for iid2d)
};

struct StackedModel {
    ModelSpec spec;
    int n_latent = 0;
    int n_coef = 0;
    std::vector<StackedRow> rows;
    std::vector<DesignEntry> entries;
    std::vector<BlockRuntime> block_runtime;
    std::vector<EffectRuntime> effect_runtime;
    std::vector<HyperInfo> hypers;
    std::vector<std::string> coef_names;
    std::vector<LatentBlockInfo> layout;
    Eigen::MatrixXd constraint_basis;  // orthonormal columns: sum-to-zero per rw2 effect
    Eigen::MatrixXd prior_null_basis;  // orthonormal basis of the prior's null space
    int rank_deficiency = 0;

    int n_hyper() const { return static_cast<int>(hypers.size()); }
    int n_rows() const { return static_cast<int>(rows.size()); }

    int hyper_index(const std::string& name) const {
        for (size_t j = 0; j < hypers.size(); ++j)
            if (hypers[j].name == name) return static_cast<int>(j);
        throw config_error("unknown hyperparameter '" + name + "'");
    }

    int coef_index(const std::string& name) const {
        for (size_t j = 0; j < coef_names.size(); ++j)
            if (coef_names[j] == name) return static_cast<int>(j);
        throw config_error("unknown coefficient '" + name + "'");
    }

    Eigen::VectorXd theta_init() const {
        Eigen::VectorXd out(n_hyper());
        for (int j = 0; j < n_hyper(); ++j) out(j) = hypers[static_cast<size_t>(j)].init;
        return out;
    }
};

namespace detail {

struct RowSource {
    const std::map<std::string, double>* covariates = nullptr;
    double time = 0.0;
    int individual = 0;
};

inline double covariate_value(const RowSource& src, const std::string& name,
                              const std::string& ctx) {
    if (name == "1") return 1.0;
    if (name == "time") return src.time;
    if (name == "id") return src.individual;
    auto it = src.covariates->find(name);
    if (it == src.covariates->end())
        throw data_error(ctx + ": covariate '" + name + "' not present on this row");
    return it->second;
}

inline int integral_index(double v, int size, const std::string& ctx, bool rw2_hint) {
    const double r = std::round(v);
    if (std::abs(v - r) > 1e-9 || r < 1.0 || r > static_cast<double>(size)) {
        std::ostringstream msg;
        msg << ctx << ": index value " << v << " is not an integer in [1," << size << "]";
        if (rw2_hint) msg << " (continuous covariates must go through bin_covariate first)";
        throw data_error(msg.str());
    }
    return static_cast<int>(r);
}

}  // namespace detail

inline StackedModel assemble(const ModelSpec& spec, const JointDataset& data) {
    if (spec.blocks.empty()) throw config_error("assemble: model has no blocks");
    if (spec.blocks[0].cause != 0)
        throw config_error("assemble: first block must be the longitudinal block");
    for (size_t b = 1; b < spec.blocks.size(); ++b) {
        if (spec.blocks[b].cause != static_cast<int>(b))
            throw config_error("assemble: cause blocks must follow in cause order 1..C");
    }
    const int n_cause_blocks = static_cast<int>(spec.blocks.size()) - 1;
    if (spec.n_causes != n_cause_blocks)
        throw config_error("assemble: spec.n_causes does not match the cause blocks");
    if (n_cause_blocks > 0 && n_cause_blocks != data.n_causes)
        throw config_error("assemble: dataset n_causes does not match the model");
    if (data.longitudinal.empty()) throw config_error("assemble: no longitudinal rows");
    for (const auto& blk : spec.blocks) {
        const bool surv = blk.cause >= 1;
        if (surv && blk.family != Family::weibull_surv && blk.family != Family::exponential_surv)
            throw config_error("assemble: cause block '" + blk.name + "' needs a survival family");
        if (!surv && (blk.family == Family::weibull_surv || blk.family == Family::exponential_surv))
            throw config_error("assemble: longitudinal block '" + blk.name +
                               "' cannot use a survival family");
    }

    StackedModel m;
    m.spec = spec;

    auto effect_id = [&](const std::string& name) {
        for (size_t k = 0; k < spec.effects.size(); ++k)
            if (spec.effects[k].name == name) return static_cast<int>(k);
        throw config_error("assemble: effect '" + name + "' is not declared");
    };

    // ---- row sources per block (data order preserved within a block) ----
    std::vector<std::vector<detail::RowSource>> block_rows(spec.blocks.size());
    for (size_t b = 0; b < spec.blocks.size(); ++b) {
        const auto& blk = spec.blocks[b];
        if (blk.cause == 0) {
            for (const auto& rec : data.longitudinal)
                block_rows[b].push_back({&rec.covariates, rec.time, rec.individual});
        } else {
            for (const auto& rec : data.survival)
                block_rows[b].push_back({&rec.covariates, rec.time, rec.individual});
        }
        if (block_rows[b].empty())
            throw config_error("assemble: block '" + blk.name + "' has no rows");
    }

    // ---- infer effect sizes where not given ----
    std::vector<int> effect_size(spec.effects.size(), 0);
    for (size_t k = 0; k < spec.effects.size(); ++k) effect_size[k] = spec.effects[k].size;
    auto observe_index = [&](int k, double v) {
        const double r = std::round(v);
        if (std::abs(v - r) < 1e-9 && r >= 1.0)
            effect_size[static_cast<size_t>(k)] =
                std::max(effect_size[static_cast<size_t>(k)], static_cast<int>(r));
    };
    for (size_t b = 0; b < spec.blocks.size(); ++b) {
        const auto& blk = spec.blocks[b];
        for (const auto& src : block_rows[b]) {
            for (const auto& att : blk.attachments) {
                const int k = effect_id(att.effect);
                if (spec.effects[static_cast<size_t>(k)].size == 0)
                    observe_index(k, detail::covariate_value(src, att.index_covariate, blk.name));
            }
            for (const auto& cp : blk.copies) {
                if (cp.of_linear_predictor) continue;
                const int k = effect_id(cp.source);
                if (spec.effects[static_cast<size_t>(k)].size == 0)
                    observe_index(k, detail::covariate_value(src, cp.index_covariate, blk.name));
            }
        }
    }
    for (size_t k = 0; k < spec.effects.size(); ++k)
        if (effect_size[k] < 1)
            throw config_error("assemble: cannot infer a size for effect '" + spec.effects[k].name +
                               "'");

    // ---- which blocks need an eta representation ----
    std::vector<int> eta_block(spec.blocks.size(), -1);  // latent offset, filled below
    std::set<int> eta_sources;
    auto block_id = [&](const std::string& name) {
        for (size_t b = 0; b < spec.blocks.size(); ++b)
            if (spec.blocks[b].name == name) return static_cast<int>(b);
        throw config_error("assemble: block '" + name + "' is not declared");
    };
    for (size_t b = 0; b < spec.blocks.size(); ++b) {
        for (const auto& cp : spec.blocks[b].copies) {
            if (!cp.of_linear_predictor) continue;
            const int sb = block_id(cp.source);
            if (sb >= static_cast<int>(b))
                throw config_error("assemble: linear-predictor copy source '" + cp.source +
                                   "' must precede block '" + spec.blocks[b].name + "'");
            eta_sources.insert(sb);
        }
    }

    // ---- latent layout: coefficients, effects, eta representations ----
    for (const auto& blk : spec.blocks) {
        for (const auto& t : blk.fixed_terms) {
            if (t.coefficient.empty())
                throw config_error("assemble: empty coefficient name in block '" + blk.name + "'");
            if (std::find(m.coef_names.begin(), m.coef_names.end(), t.coefficient) ==
                m.coef_names.end())
                m.coef_names.push_back(t.coefficient);
        }
    }
    m.n_coef = static_cast<int>(m.coef_names.size());
    int offset = 0;
    if (m.n_coef > 0) {
        LatentBlockInfo info;
        info.name = "coefficients";
        info.kind = LatentBlockKind::coefficients;
        info.offset = 0;
        info.size = m.n_coef;
        info.coef_names = m.coef_names;
        m.layout.push_back(info);
        offset += m.n_coef;
    }
    m.effect_runtime.resize(spec.effects.size());
    for (size_t k = 0; k < spec.effects.size(); ++k) {
        const auto& e = spec.effects[k];
        auto& rt = m.effect_runtime[k];
        rt.kind = e.kind;
        rt.offset = offset;
        rt.size = e.kind == EffectKind::iid2d ? 2 * effect_size[k] : effect_size[k];
        if (e.kind == EffectKind::iid) {
            rt.unit_precision = iid_precision(effect_size[k], 1.0);
        } else if (e.kind == EffectKind::rw2) {
            rt.unit_precision = rw2_precision(effect_size[k]);
            if (e.scale_model) rt.unit_precision = scale_precision(rt.unit_precision);
            if (!e.grid_values.empty() &&
                static_cast<int>(e.grid_values.size()) != effect_size[k])
                throw config_error("assemble: grid_values size mismatch for effect '" + e.name +
                                   "'");
        }
        LatentBlockInfo info;
        info.name = e.name;
        info.kind = LatentBlockKind::effect;
        info.offset = offset;
        info.size = rt.size;
        info.effect_index = static_cast<int>(k);
        info.grid = e.grid_values;
        m.layout.push_back(info);
        offset += rt.size;
    }
    for (int sb : eta_sources) {
        eta_block[static_cast<size_t>(sb)] = offset;
        LatentBlockInfo info;
        info.name = "eta:" + spec.blocks[static_cast<size_t>(sb)].name;
        info.kind = LatentBlockKind::eta_rep;
        info.offset = offset;
        info.size = static_cast<int>(block_rows[static_cast<size_t>(sb)].size());
        m.layout.push_back(info);
        offset += info.size;
    }
    m.n_latent = offset;

    // ---- hyperparameters: per-block family hypers, per-effect hypers, scalings ----
    auto add_hyper = [&](const std::string& name, Transform tr, const PriorSpec& prior,
                         bool on_internal, double init_internal) {
        for (const auto& h : m.hypers)
            if (h.name == name)
                throw config_error("assemble: duplicate hyperparameter name '" + name + "'");
        m.hypers.push_back({name, tr, prior, on_internal, init_internal});
        return static_cast<int>(m.hypers.size()) - 1;
    };
    m.block_runtime.resize(spec.blocks.size());
    for (size_t b = 0; b < spec.blocks.size(); ++b) {
        const auto& blk = spec.blocks[b];
        auto& rt = m.block_runtime[b];
        rt.family = blk.family;
        if (blk.family == Family::gaussian) {
            if (blk.family_hyper.kind == PriorKind::fixed) {
                rt.fixed_value = blk.family_hyper.a;
                if (!(rt.fixed_value > 0.0))
                    throw config_error("assemble: fixed precision must be positive");
            } else {
                rt.hyper_index =
                    add_hyper("tau_" + blk.name, Transform::log, blk.family_hyper, false, 0.0);
            }
        } else if (blk.family == Family::weibull_surv) {
            if (blk.family_hyper.kind == PriorKind::fixed) {
                rt.fixed_value = blk.family_hyper.a;
                if (!(rt.fixed_value > 0.0))
                    throw config_error("assemble: fixed weibull shape must be positive");
            } else {
                rt.hyper_index =
                    add_hyper("alpha_" + blk.name, Transform::log, blk.family_hyper, false, 0.0);
            }
        }
    }
    for (size_t k = 0; k < spec.effects.size(); ++k) {
        const auto& e = spec.effects[k];
        auto& rt = m.effect_runtime[k];
        auto precision_hyper = [&](const std::string& name, const PriorSpec& p, double& fixed) {
            if (p.kind == PriorKind::fixed) {
                fixed = p.a;
                if (!(fixed > 0.0))
                    throw config_error("assemble: fixed precision must be positive");
                return -1;
            }
            return add_hyper(name, Transform::log, p, false, 0.0);
        };
        if (e.kind == EffectKind::iid || e.kind == EffectKind::rw2) {
            rt.hyper_tau = precision_hyper("tau_" + e.name, e.prior_tau, rt.fixed_tau);
        } else {
            rt.hyper_tau = precision_hyper("tau_v_" + e.name, e.prior_tau, rt.fixed_tau);
            rt.hyper_tau_w = precision_hyper("tau_w_" + e.name, e.prior_tau_w, rt.fixed_tau_w);
            if (e.prior_rho.kind == PriorKind::fixed) {
                rt.fixed_rho = e.prior_rho.a;
                if (!(std::abs(rt.fixed_rho) < 1.0))
                    throw config_error("assemble: fixed rho must be in (-1,1)");
            } else if (e.prior_rho.kind == PriorKind::gaussian) {
                rt.hyper_rho =
                    add_hyper("rho_" + e.name, Transform::fisher_z, e.prior_rho, true, 0.0);
            } else {
                throw config_error("assemble: rho prior must be gaussian (Fisher z scale) or fixed");
            }
        }
    }
    std::map<std::pair<size_t, size_t>, int> copy_hyper;  // (block, copy) -> hyper
    for (size_t b = 0; b < spec.blocks.size(); ++b) {
        const auto& blk = spec.blocks[b];
        for (size_t c = 0; c < blk.copies.size(); ++c) {
            const auto& cp = blk.copies[c];
            if (!cp.estimated) continue;
            if (cp.scaling_name.empty())
                throw config_error("assemble: estimated copy scaling needs a name in block '" +
                                   blk.name + "'");
            if (cp.scaling_prior.kind != PriorKind::gaussian)
                throw config_error("assemble: copy scaling prior must be gaussian");
            copy_hyper[{b, c}] = add_hyper(cp.scaling_name, Transform::identity,
                                           cp.scaling_prior, true, cp.scaling_prior.a);
        }
    }

    // ---- rows and design entries ----
    auto emit_effect_entry = [&](int row, const BlockSpec& blk, const detail::RowSource& src,
                                 int k, int component, const std::string& index_cov,
                                 const std::string& weight_cov, int scaling_hyper,
                                 double fixed_scale) {
        const auto& e = spec.effects[static_cast<size_t>(k)];
        const auto& rt = m.effect_runtime[static_cast<size_t>(k)];
        const std::string ctx = "block '" + blk.name + "', effect '" + e.name + "'";
        const double iv = detail::covariate_value(src, index_cov, ctx);
        const int idx = detail::integral_index(iv, effect_size[static_cast<size_t>(k)], ctx,
                                               e.kind == EffectKind::rw2);
        double w = weight_cov.empty() ? 1.0 : detail::covariate_value(src, weight_cov, ctx);
        if (e.kind == EffectKind::iid2d) {
            if (component < 0 || component > 1)
                throw config_error(ctx + ": iid2d component must be 0 (v) or 1 (w)");
            // attachments load both coordinates; copies pick one component
            if (component == 0) {
                m.entries.push_back(
                    {row, rt.offset + 2 * (idx - 1), w * fixed_scale, scaling_hyper});
            } else {
                m.entries.push_back(
                    {row, rt.offset + 2 * (idx - 1) + 1, w * fixed_scale, scaling_hyper});
            }
        } else {
            if (component != 0)
                throw config_error(ctx + ": component selection only applies to iid2d effects");
            m.entries.push_back({row, rt.offset + idx - 1, w * fixed_scale, scaling_hyper});
        }
    };

    int row_count = 0;
    std::vector<std::vector<int>> block_row_index(spec.blocks.size());
    for (size_t b = 0; b < spec.blocks.size(); ++b) {
        const auto& blk = spec.blocks[b];
        const bool surv = blk.cause >= 1;
        for (size_t rix = 0; rix < block_rows[b].size(); ++rix) {
            const auto& src = block_rows[b][rix];
            StackedRow row;
            row.family = blk.family;
            row.block = static_cast<int>(b);
            row.individual = src.individual;
            if (surv) {
                const auto& rec = data.survival[rix];
                row.y = rec.time;
                row.d = rec.cause == blk.cause ? 1 : 0;
            } else {
                row.y = data.longitudinal[rix].value;
            }
            const int r = row_count++;
            block_row_index[b].push_back(r);
            m.rows.push_back(row);

            for (const auto& t : blk.fixed_terms) {
                const double v = detail::covariate_value(src, t.covariate, "block '" + blk.name +
                                                                               "'");
                m.entries.push_back({r, m.coef_index(t.coefficient), v, -1});
            }
            for (const auto& att : blk.attachments) {
                const int k = effect_id(att.effect);
                if (spec.effects[static_cast<size_t>(k)].kind == EffectKind::iid2d) {
                    emit_effect_entry(r, blk, src, k, 0, att.index_covariate, "", -1, 1.0);
                    const std::string slope =
                        att.weight_covariate.empty() ? "time" : att.weight_covariate;
                    emit_effect_entry(r, blk, src, k, 1, att.index_covariate, slope, -1, 1.0);
                } else {
                    emit_effect_entry(r, blk, src, k, 0, att.index_covariate,
                                      att.weight_covariate, -1, 1.0);
                }
            }
            for (size_t c = 0; c < blk.copies.size(); ++c) {
                const auto& cp = blk.copies[c];
                const int scaling =
                    cp.estimated ? copy_hyper.at({b, c}) : -1;
                const double fixed_scale = cp.estimated ? 1.0 : cp.fixed_value;
                if (cp.of_linear_predictor) {
                    const int sb = block_id(cp.source);
                    const int eta_off = eta_block[static_cast<size_t>(sb)];
                    const std::string ctx = "block '" + blk.name + "', eta copy";
                    const double iv = detail::covariate_value(src, cp.index_covariate, ctx);
                    const int idx = detail::integral_index(
                        iv, static_cast<int>(block_rows[static_cast<size_t>(sb)].size()), ctx,
                        false);
                    const double w = cp.weight_covariate.empty()
                                         ? 1.0
                                         : detail::covariate_value(src, cp.weight_covariate, ctx);
                    m.entries.push_back({r, eta_off + idx - 1, w * fixed_scale, scaling});
                } else {
                    emit_effect_entry(r, blk, src, effect_id(cp.source), cp.component,
                                      cp.index_covariate, cp.weight_covariate, scaling,
                                      fixed_scale);
                }
            }
        }
    }

    // ---- eta tie pseudo-rows: 0 ~ N(definition - eta, 1/tie_precision) ----
    for (int sb : eta_sources) {
        BlockRuntime pseudo;
        pseudo.family = Family::gaussian;
        pseudo.hyper_index = -1;
        pseudo.fixed_value = spec.eta_tie_precision;
        m.block_runtime.push_back(pseudo);
        const int pseudo_block = static_cast<int>(m.block_runtime.size()) - 1;
        const int eta_off = eta_block[static_cast<size_t>(sb)];
        const auto& source_rows = block_row_index[static_cast<size_t>(sb)];
        for (size_t rix = 0; rix < source_rows.size(); ++rix) {
            StackedRow row;
            row.family = Family::gaussian;
            row.y = 0.0;
            row.block = pseudo_block;
            row.individual = m.rows[static_cast<size_t>(source_rows[rix])].individual;
            const int r = row_count++;
            m.rows.push_back(row);
            // replicate the source row's additive definition
            const int src_row = source_rows[rix];
            const size_t n_before = m.entries.size();
            for (size_t eix = 0; eix < n_before; ++eix) {
                if (m.entries[eix].row == src_row)
                    m.entries.push_back(
                        {r, m.entries[eix].col, m.entries[eix].weight, m.entries[eix].scaling_hyper});
            }
            m.entries.push_back({r, eta_off + static_cast<int>(rix), -1.0, -1});
        }
    }

    // ---- constraints and prior null space ----
    int n_constraints = 0, n_null = 0;
    for (const auto& rt : m.effect_runtime) {
        if (rt.kind == EffectKind::rw2) {
            n_constraints += 1;
            n_null += 2;
        }
    }
    m.constraint_basis = Eigen::MatrixXd::Zero(m.n_latent, n_constraints);
    m.prior_null_basis = Eigen::MatrixXd::Zero(m.n_latent, n_null);
    int ci = 0, ni = 0;
    for (const auto& rt : m.effect_runtime) {
        if (rt.kind != EffectKind::rw2) continue;
        const int n = rt.size;
        const double inv_sqrt_n = 1.0 / std::sqrt(static_cast<double>(n));
        for (int i = 0; i < n; ++i) m.constraint_basis(rt.offset + i, ci) = inv_sqrt_n;
        ++ci;
        for (int i = 0; i < n; ++i) m.prior_null_basis(rt.offset + i, ni) = inv_sqrt_n;
        const double mean_t = 0.5 * (n + 1);
        double norm2 = 0.0;
        for (int i = 0; i < n; ++i) norm2 += (i + 1 - mean_t) * (i + 1 - mean_t);
        const double inv_norm = 1.0 / std::sqrt(norm2);
        for (int i = 0; i < n; ++i)
            m.prior_null_basis(rt.offset + i, ni + 1) = (i + 1 - mean_t) * inv_norm;
        ni += 2;
    }
    m.rank_deficiency = n_null;
    return m;
}

// ---- hyperparameter transforms ----

inline double hyper_natural_value(const HyperInfo& h, double internal) {
    switch (h.transform) {
        case Transform::log: return std::exp(internal);
        case Transform::fisher_z: return std::tanh(internal);
        case Transform::identity: return internal;
    }
    throw numeric_error("hyper_natural_value: bad transform");
}

inline Eigen::VectorXd hyper_natural(const StackedModel& m, const Eigen::VectorXd& theta) {
    if (theta.size() != m.n_hyper())
        throw numeric_error("hyper_natural: theta dimension mismatch");
    Eigen::VectorXd out(theta.size());
    for (int j = 0; j < theta.size(); ++j)
        out(j) = hyper_natural_value(m.hypers[static_cast<size_t>(j)], theta(j));
    return out;
}

// Sum of hyperparameter prior log-densities, with the log-Jacobian of each
// internal transform added exactly once (natural-scale priors only).
inline double log_prior_hyper(const StackedModel& m, const Eigen::VectorXd& theta) {
    if (theta.size() != m.n_hyper())
        throw numeric_error("log_prior_hyper: theta dimension mismatch");
    double out = 0.0;
    for (int j = 0; j < theta.size(); ++j) {
        const auto& h = m.hypers[static_cast<size_t>(j)];
        const double natural = hyper_natural_value(h, theta(j));
        switch (h.prior.kind) {
            case PriorKind::pc_prec:
                out += pc_prec_log_prior(natural, h.prior.a, h.prior.b);
                break;
            case PriorKind::scaled_log_gaussian:
                out += scaled_log_gaussian_log_prior(natural, h.prior.a, h.prior.b);
                break;
            case PriorKind::gaussian: {
                const double v = h.prior_on_internal ? theta(j) : natural;
                const double r = v - h.prior.a;
                out += 0.5 * std::log(h.prior.b / (2.0 * M_PI)) - 0.5 * h.prior.b * r * r;
                break;
            }
            case PriorKind::fixed:
                throw config_error("log_prior_hyper: fixed value registered as hyperparameter");
        }
        if (!h.prior_on_internal && h.transform == Transform::log) out += theta(j);
        if (!h.prior_on_internal && h.transform == Transform::fisher_z)
            out += std::log(1.0 - natural * natural);
    }
    return out;
}

// Design matrix A(theta): copy scalings enter as theta-dependent weights.
inline Eigen::SparseMatrix<double, Eigen::RowMajor> design_matrix(const StackedModel& m,
                                                                  const Eigen::VectorXd& theta) {
    const Eigen::VectorXd naturals = hyper_natural(m, theta);
    std::vector<Eigen::Triplet<double>> trip;
    trip.reserve(m.entries.size());
    for (const auto& e : m.entries) {
        double w = e.weight;
        if (e.scaling_hyper >= 0) w *= naturals(e.scaling_hyper);
        trip.emplace_back(e.row, e.col, w);
    }
    Eigen::SparseMatrix<double, Eigen::RowMajor> a(m.n_rows(), m.n_latent);
    a.setFromTriplets(trip.begin(), trip.end());
    return a;
}

inline Eigen::VectorXd linear_predictor(const StackedModel& m, const Eigen::VectorXd& theta,
                                        const Eigen::VectorXd& x) {
    if (x.size() != m.n_latent) throw numeric_error("linear_predictor: x dimension mismatch");
    return design_matrix(m, theta) * x;
}

// Block-diagonal joint prior precision at theta. log_det_constant carries all
// theta dependence, so gmrf_log_density(x, Q, 1.0) is the exact joint prior
// log-density (up to the flat rank-deficient directions).
inline SparsePrecision joint_prior_precision(const StackedModel& m,
                                             const Eigen::VectorXd& theta) {
    const Eigen::VectorXd naturals = hyper_natural(m, theta);
    std::vector<Eigen::Triplet<double>> trip;
    double ldc = 0.0;
    int rank_def = 0;
    const double p_fix = m.spec.fixed_effect_precision;
    if (!(p_fix > 0.0)) throw config_error("joint_prior_precision: fixed_effect_precision <= 0");
    for (const auto& info : m.layout) {
        if (info.kind == LatentBlockKind::coefficients || info.kind == LatentBlockKind::eta_rep) {
            for (int i = 0; i < info.size; ++i)
                trip.emplace_back(info.offset + i, info.offset + i, p_fix);
            ldc += info.size * std::log(p_fix);
            continue;
        }
        const auto& rt = m.effect_runtime[static_cast<size_t>(info.effect_index)];
        if (rt.kind == EffectKind::iid2d) {
            const double tau_v = rt.hyper_tau >= 0 ? naturals(rt.hyper_tau) : rt.fixed_tau;
            const double tau_w = rt.hyper_tau_w >= 0 ? naturals(rt.hyper_tau_w) : rt.fixed_tau_w;
            const double corr = rt.hyper_rho >= 0 ? naturals(rt.hyper_rho) : rt.fixed_rho;
            const double rho_cov = corr / std::sqrt(tau_v * tau_w);
            const SparsePrecision block = iid2d_precision(rt.size / 2, tau_v, tau_w, rho_cov);
            for (int o = 0; o < block.matrix.outerSize(); ++o)
                for (Eigen::SparseMatrix<double>::InnerIterator it(block.matrix, o); it; ++it)
                    trip.emplace_back(rt.offset + static_cast<int>(it.row()),
                                      rt.offset + static_cast<int>(it.col()), it.value());
            ldc += block.log_det_constant;
        } else {
            const double tau = rt.hyper_tau >= 0 ? naturals(rt.hyper_tau) : rt.fixed_tau;
            if (!(tau > 0.0)) throw numeric_error("joint_prior_precision: tau <= 0");
            for (int o = 0; o < rt.unit_precision.matrix.outerSize(); ++o)
                for (Eigen::SparseMatrix<double>::InnerIterator it(rt.unit_precision.matrix, o);
                     it; ++it)
                    trip.emplace_back(rt.offset + static_cast<int>(it.row()),
                                      rt.offset + static_cast<int>(it.col()), tau * it.value());
            const int n_eff = rt.size - rt.unit_precision.rank_deficiency;
            ldc += n_eff * std::log(tau) + rt.unit_precision.log_det_constant;
            rank_def += rt.unit_precision.rank_deficiency;
        }
    }
    SparsePrecision out;
    out.matrix.resize(m.n_latent, m.n_latent);
    out.matrix.setFromTriplets(trip.begin(), trip.end());
    out.rank_deficiency = rank_def;
    out.log_det_constant = ldc;
    return out;
}

struct ConditionalTerms {
    double value = 0.0;           // log prior + sum of family log-likelihoods
    Eigen::VectorXd gradient;     // d value / dx
    Eigen::VectorXd curvature;    // per-row -(d2 loglik / d eta2) >= 0
    double loglik = 0.0;          // likelihood part alone
};

namespace detail {

inline LoglikTerms row_loglik(const StackedModel& m, const StackedRow& row, double eta,
                              const Eigen::VectorXd& naturals) {
    const auto& rt = m.block_runtime[static_cast<size_t>(row.block)];
    const double aux = rt.hyper_index >= 0 ? naturals(rt.hyper_index) : rt.fixed_value;
    switch (row.family) {
        case Family::gaussian: return gaussian_loglik(row.y, eta, aux);
        case Family::poisson: return poisson_loglik(row.y, eta);
        case Family::weibull_surv: return weibull_surv_loglik(row.y, row.d, eta, aux);
        case Family::exponential_surv: return exponential_surv_loglik(row.y, row.d, eta);
    }
    throw numeric_error("row_loglik: bad family");
}

}  // namespace detail

// Log prior density of x plus the stacked log-likelihood at eta = A(theta) x,
// with gradient in x and per-row likelihood curvature for Hessian assembly.
inline ConditionalTerms log_conditional(const Eigen::VectorXd& x, const Eigen::VectorXd& theta,
                                        const StackedModel& m) {
    const Eigen::VectorXd naturals = hyper_natural(m, theta);
    const SparsePrecision q = joint_prior_precision(m, theta);
    const auto a = design_matrix(m, theta);
    const Eigen::VectorXd eta = a * x;
    ConditionalTerms out;
    out.curvature.resize(m.n_rows());
    Eigen::VectorXd score(m.n_rows());
    double loglik = 0.0;
    for (int r = 0; r < m.n_rows(); ++r) {
        const LoglikTerms t =
            detail::row_loglik(m, m.rows[static_cast<size_t>(r)], eta(r), naturals);
        loglik += t.value;
        score(r) = t.d_eta;
        out.curvature(r) = -t.d2_eta;
    }
    out.loglik = loglik;
    out.value = gmrf_log_density(x, q) + loglik;
    out.gradient = a.transpose() * score - q.matrix * x;
    return out;
}

}  // namespace lgmcr
