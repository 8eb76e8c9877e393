#pragma once

// Data model for joint longitudinal + competing-risks datasets.
//
// Longitudinal file : header  id,time,value[,extra covariates...]
// Survival file     : header  id,time,cause[,extra covariates...]
// cause 0 means censored; causes 1..n_causes are the competing events.
// Every individual has exactly one survival row; individuals are re-indexed
// densely 1..N (order of first appearance in the survival file) and the
// original ids are retained for reporting.

#include <algorithm>
#include <cmath>
#include <map>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include "csv.hpp"
#include "errors.hpp"
#include "model_spec.hpp"

namespace lgmcr {

struct LongitudinalRecord {
    long original_id = 0;
    int individual = 0;  // dense 1..N, assigned by validate_joint_dataset
    double time = 0.0;
    double value = 0.0;
    std::map<std::string, double> covariates;
};

struct SurvivalRecord {
    long original_id = 0;
    int individual = 0;
    double time = 0.0;
    int cause = 0;  // 0 = censored
    std::map<std::string, double> covariates;
};

struct JointDataset {
    std::vector<LongitudinalRecord> longitudinal;
    std::vector<SurvivalRecord> survival;  // one row per individual
    int n_individuals = 0;
    int n_causes = 0;
    std::vector<long> original_id;  // original_id[i-1] for dense index i
    std::vector<std::string> warnings;
};

namespace detail {

inline long parse_id(const std::string& s, const std::string& ctx) {
    const double v = parse_double(s, ctx);
    const double r = std::round(v);
    if (!(std::abs(v - r) < 1e-9))
        throw data_error(ctx + ": id '" + s + "' is not an integer");
    return static_cast<long>(r);
}

}  // namespace detail

// family: gaussian accepts any finite value, poisson requires nonnegative
// integers (the count likelihood would reject them later and with a worse
// error message)
inline std::vector<LongitudinalRecord> load_longitudinal_csv(const std::string& path,
                                                             Family family = Family::gaussian) {
    if (family != Family::gaussian && family != Family::poisson)
        throw config_error(path + ": longitudinal family must be gaussian or poisson");
    const CsvTable t = read_csv(path);
    const int c_id = t.column("id"), c_time = t.column("time"), c_value = t.column("value");
    if (c_id != 0 || c_time != 1 || c_value != 2)
        throw data_error(path + ": longitudinal header must start with id,time,value");
    std::vector<LongitudinalRecord> out;
    out.reserve(t.rows.size());
    for (size_t r = 0; r < t.rows.size(); ++r) {
        std::ostringstream ctx;
        ctx << path << ":row " << r + 2;
        const auto& row = t.rows[r];
        LongitudinalRecord rec;
        rec.original_id = detail::parse_id(row[0], ctx.str());
        rec.time = parse_double(row[1], ctx.str());
        rec.value = parse_double(row[2], ctx.str());
        if (!std::isfinite(rec.time) || rec.time < 0.0)
            throw data_error(ctx.str() + ": time must be finite and nonnegative");
        if (!std::isfinite(rec.value))
            throw data_error(ctx.str() + ": value must be finite");
        if (family == Family::poisson &&
            (rec.value < 0.0 || std::abs(rec.value - std::round(rec.value)) > 1e-9))
            throw data_error(ctx.str() + ": value '" + row[2] +
                             "' is not a nonnegative integer count");
        for (size_t j = 3; j < t.header.size(); ++j)
            rec.covariates[t.header[j]] = parse_double(row[j], ctx.str());
        out.push_back(std::move(rec));
    }
    return out;
}

inline std::vector<SurvivalRecord> load_survival_csv(const std::string& path, int n_causes) {
    if (n_causes < 1) throw data_error("load_survival_csv: n_causes must be >= 1");
    const CsvTable t = read_csv(path);
    const int c_id = t.column("id"), c_time = t.column("time"), c_cause = t.column("cause");
    if (c_id != 0 || c_time != 1 || c_cause != 2)
        throw data_error(path + ": survival header must start with id,time,cause");
    std::vector<SurvivalRecord> out;
    out.reserve(t.rows.size());
    for (size_t r = 0; r < t.rows.size(); ++r) {
        std::ostringstream ctx;
        ctx << path << ":row " << r + 2;
        const auto& row = t.rows[r];
        SurvivalRecord rec;
        rec.original_id = detail::parse_id(row[0], ctx.str());
        rec.time = parse_double(row[1], ctx.str());
        if (!std::isfinite(rec.time) || !(rec.time > 0.0))
            throw data_error(ctx.str() + ": survival time must be finite and positive");
        const long cause = detail::parse_id(row[2], ctx.str());
        if (cause < 0 || cause > n_causes) {
            std::ostringstream msg;
            msg << ctx.str() << ": cause " << cause << " outside [0," << n_causes << "]";
            throw data_error(msg.str());
        }
        rec.cause = static_cast<int>(cause);
        for (size_t j = 3; j < t.header.size(); ++j)
            rec.covariates[t.header[j]] = parse_double(row[j], ctx.str());
        out.push_back(std::move(rec));
    }
    return out;
}

// If truncate_late_observations is set, longitudinal rows observed after the
// individual's survival time are dropped with a warning instead of erroring.
inline JointDataset validate_joint_dataset(std::vector<LongitudinalRecord> longitudinal,
                                           std::vector<SurvivalRecord> survival, int n_causes,
                                           bool truncate_late_observations = false) {
    if (survival.empty()) throw data_error("validate_joint_dataset: empty survival list");
    if (longitudinal.empty()) throw data_error("validate_joint_dataset: empty longitudinal list");

    JointDataset ds;
    ds.n_causes = n_causes;
    std::unordered_map<long, int> dense;
    for (auto& s : survival) {
        auto [it, inserted] = dense.emplace(s.original_id, static_cast<int>(dense.size()) + 1);
        if (!inserted) {
            std::ostringstream msg;
            msg << "validate_joint_dataset: duplicate survival row for id " << s.original_id;
            throw data_error(msg.str());
        }
        s.individual = it->second;
        ds.original_id.push_back(s.original_id);
        if (s.cause < 0 || s.cause > n_causes)
            throw data_error("validate_joint_dataset: cause outside [0,n_causes]");
    }
    ds.n_individuals = static_cast<int>(survival.size());

    std::vector<LongitudinalRecord> kept;
    kept.reserve(longitudinal.size());
    size_t dropped = 0;
    for (auto& rec : longitudinal) {
        auto it = dense.find(rec.original_id);
        if (it == dense.end()) {
            std::ostringstream msg;
            msg << "validate_joint_dataset: longitudinal id " << rec.original_id
                << " has no survival row";
            throw data_error(msg.str());
        }
        rec.individual = it->second;
        const double s_time = survival[static_cast<size_t>(rec.individual) - 1].time;
        if (rec.time > s_time) {
            if (truncate_late_observations) {
                ++dropped;
                continue;
            }
            std::ostringstream msg;
            msg << "validate_joint_dataset: id " << rec.original_id << " observed at time "
                << rec.time << " after its survival time " << s_time;
            throw data_error(msg.str());
        }
        kept.push_back(std::move(rec));
    }
    if (dropped > 0) {
        std::ostringstream msg;
        msg << "dropped " << dropped << " longitudinal rows observed after the survival time";
        ds.warnings.push_back(msg.str());
        if (kept.empty())
            throw data_error("validate_joint_dataset: truncation removed every longitudinal row");
    }
    ds.longitudinal = std::move(kept);
    ds.survival = std::move(survival);
    return ds;
}

}  // namespace lgmcr
