#pragma once

// Plain-text run configuration. One file drives simulation, fitting, and the
// recovery check: [section] headers with key = value lines, plus small
// grammars for priors ("pc_prec(1, 0.01)"), fixed-effect terms ("beta1*age"),
// attachments ("trend(time_bin)"), copy links, and derived covariates
// ("bin(time, 50)"). Unknown keys are errors, not silence.

#include <algorithm>
#include <cctype>
#include <cstdint>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "data.hpp"
#include "errors.hpp"
#include "gmrf.hpp"
#include "inference.hpp"
#include "model_spec.hpp"
#include "simulate.hpp"

namespace lgmcr {

struct ConfigEntry {
    std::string section, key, value;
    int line = 0;
    mutable bool used = false;
};

namespace detail {

inline std::string trim(const std::string& s) {
    size_t a = 0, b = s.size();
    while (a < b && std::isspace(static_cast<unsigned char>(s[a]))) ++a;
    while (b > a && std::isspace(static_cast<unsigned char>(s[b - 1]))) --b;
    return s.substr(a, b - a);
}

inline bool valid_name(const std::string& s) {
    if (s.empty()) return false;
    for (char c : s)
        if (!std::isalnum(static_cast<unsigned char>(c)) && c != '_' && c != '.' && c != '-')
            return false;
    return true;
}

}  // namespace detail

struct ConfigFile {
    std::vector<ConfigEntry> entries;
    std::vector<std::string> section_order;  // first-appearance order
    std::string origin;                      // path or "<string>", for messages

    bool has_section(const std::string& s) const {
        return std::find(section_order.begin(), section_order.end(), s) != section_order.end();
    }

    // scalar lookup; a repeated scalar key is a config mistake, not a list
    const ConfigEntry* find(const std::string& section, const std::string& key) const {
        const ConfigEntry* hit = nullptr;
        for (const auto& e : entries) {
            if (e.section != section || e.key != key) continue;
            if (hit) {
                std::ostringstream msg;
                msg << origin << ": key '" << key << "' appears twice in [" << section
                    << "] (lines " << hit->line << " and " << e.line << ")";
                throw config_error(msg.str());
            }
            hit = &e;
        }
        if (hit) hit->used = true;
        return hit;
    }

    std::string require(const std::string& section, const std::string& key) const {
        const ConfigEntry* e = find(section, key);
        if (!e)
            throw config_error(origin + ": missing key '" + key + "' in [" + section + "]");
        return e->value;
    }

    std::string get_or(const std::string& section, const std::string& key,
                       const std::string& fallback) const {
        const ConfigEntry* e = find(section, key);
        return e ? e->value : fallback;
    }

    // every occurrence, in file order (for repeatable keys: attach, copy, ...)
    std::vector<std::string> all(const std::string& section, const std::string& key) const {
        std::vector<std::string> out;
        for (const auto& e : entries)
            if (e.section == section && e.key == key) {
                e.used = true;
                out.push_back(e.value);
            }
        return out;
    }

    // entries of one section in file order, all marked used (caller validates)
    std::vector<const ConfigEntry*> section_entries(const std::string& section) const {
        std::vector<const ConfigEntry*> out;
        for (const auto& e : entries)
            if (e.section == section) {
                e.used = true;
                out.push_back(&e);
            }
        return out;
    }

    std::vector<std::string> sections_with_prefix(const std::string& prefix) const {
        std::vector<std::string> out;
        for (const auto& s : section_order)
            if (s.size() > prefix.size() && s.compare(0, prefix.size(), prefix) == 0)
                out.push_back(s);
        return out;
    }

    // call after building everything from the file: leftover keys are typos
    void check_all_used() const {
        for (const auto& e : entries)
            if (!e.used) {
                std::ostringstream msg;
                msg << origin << ":" << e.line << ": unknown key '" << e.key << "' in ["
                    << e.section << "]";
                throw config_error(msg.str());
            }
    }
};

inline ConfigFile parse_config_text(const std::string& text,
                                    const std::string& origin = "<string>") {
    ConfigFile f;
    f.origin = origin;
    std::istringstream in(text);
    std::string line, section;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        const size_t hash = line.find('#');
        if (hash != std::string::npos) line.erase(hash);
        line = detail::trim(line);
        if (line.empty()) continue;
        std::ostringstream ctx;
        ctx << origin << ":" << lineno;
        if (line.front() == '[') {
            if (line.back() != ']')
                throw config_error(ctx.str() + ": unterminated section header");
            section = detail::trim(line.substr(1, line.size() - 2));
            if (!detail::valid_name(section))
                throw config_error(ctx.str() + ": bad section name '" + section + "'");
            if (!f.has_section(section)) f.section_order.push_back(section);
            continue;
        }
        const size_t eq = line.find('=');
        if (eq == std::string::npos)
            throw config_error(ctx.str() + ": expected 'key = value' or '[section]'");
        if (section.empty())
            throw config_error(ctx.str() + ": key before any [section]");
        ConfigEntry e;
        e.section = section;
        e.key = detail::trim(line.substr(0, eq));
        e.value = detail::trim(line.substr(eq + 1));
        e.line = lineno;
        if (!detail::valid_name(e.key))
            throw config_error(ctx.str() + ": bad key name '" + e.key + "'");
        f.entries.push_back(std::move(e));
    }
    return f;
}

inline ConfigFile parse_config_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw config_error("cannot open config file '" + path + "'");
    std::ostringstream buf;
    buf << in.rdbuf();
    return parse_config_text(buf.str(), path);
}

// One file may drive several commands. A command marks the sections it does
// not read as used, so check_all_used() still catches typos inside its own.
inline void mark_inactive_sections_used(const ConfigFile& f,
                                        const std::vector<std::string>& active,
                                        const std::vector<std::string>& active_prefixes) {
    for (const auto& e : f.entries) {
        bool mine = false;
        for (const auto& s : active) mine = mine || e.section == s;
        for (const auto& p : active_prefixes)
            mine = mine || (e.section.size() > p.size() &&
                            e.section.compare(0, p.size(), p) == 0);
        if (!mine) e.used = true;
    }
}

// ---- value parsers ---------------------------------------------------------

namespace cfg {

inline double to_double(const std::string& v, const std::string& ctx) {
    try {
        size_t pos = 0;
        const double x = std::stod(v, &pos);
        if (pos != v.size()) throw std::invalid_argument(v);
        return x;
    } catch (const std::exception&) {
        throw config_error(ctx + ": '" + v + "' is not a number");
    }
}

inline long long to_int(const std::string& v, const std::string& ctx) {
    try {
        size_t pos = 0;
        const long long x = std::stoll(v, &pos);
        if (pos != v.size()) throw std::invalid_argument(v);
        return x;
    } catch (const std::exception&) {
        throw config_error(ctx + ": '" + v + "' is not an integer");
    }
}

inline std::uint64_t to_u64(const std::string& v, const std::string& ctx) {
    try {
        size_t pos = 0;
        const unsigned long long x = std::stoull(v, &pos);
        if (pos != v.size() || v.front() == '-') throw std::invalid_argument(v);
        return x;
    } catch (const std::exception&) {
        throw config_error(ctx + ": '" + v + "' is not a nonnegative integer");
    }
}

inline bool to_bool(const std::string& v, const std::string& ctx) {
    if (v == "true" || v == "yes" || v == "on" || v == "1") return true;
    if (v == "false" || v == "no" || v == "off" || v == "0") return false;
    throw config_error(ctx + ": '" + v + "' is not a boolean (use true/false)");
}

inline std::vector<std::string> split_list(const std::string& v) {
    std::vector<std::string> out;
    std::string item;
    int depth = 0;
    for (char c : v) {
        if (c == '(') ++depth;
        if (c == ')') --depth;
        if (c == ',' && depth == 0) {
            out.push_back(detail::trim(item));
            item.clear();
        } else {
            item += c;
        }
    }
    item = detail::trim(item);
    if (!item.empty() || !out.empty()) out.push_back(item);
    for (const auto& s : out)
        if (s.empty()) throw config_error("empty item in list '" + v + "'");
    return out;
}

inline std::vector<double> to_double_list(const std::string& v, const std::string& ctx) {
    std::vector<double> out;
    for (const auto& s : split_list(v)) out.push_back(to_double(s, ctx));
    return out;
}

struct Call {
    std::string name;
    std::vector<std::string> args;
};

// "name(arg, arg)" or a bare "name"
inline Call parse_call(const std::string& v, const std::string& ctx) {
    const size_t open = v.find('(');
    Call c;
    if (open == std::string::npos) {
        c.name = detail::trim(v);
    } else {
        if (v.back() != ')')
            throw config_error(ctx + ": missing ')' in '" + v + "'");
        c.name = detail::trim(v.substr(0, open));
        const std::string inner = v.substr(open + 1, v.size() - open - 2);
        if (!detail::trim(inner).empty()) c.args = split_list(inner);
    }
    if (c.name.empty()) throw config_error(ctx + ": empty name in '" + v + "'");
    return c;
}

inline PriorSpec to_prior(const std::string& v, const std::string& ctx) {
    const Call c = parse_call(v, ctx);
    auto need = [&](size_t n) {
        if (c.args.size() != n) {
            std::ostringstream msg;
            msg << ctx << ": prior '" << c.name << "' takes " << n << " argument"
                << (n == 1 ? "" : "s") << ", got " << c.args.size();
            throw config_error(msg.str());
        }
    };
    if (c.name == "pc_prec") {
        need(2);
        return PriorSpec::pc_prec(to_double(c.args[0], ctx), to_double(c.args[1], ctx));
    }
    if (c.name == "scaled_log_gaussian") {
        need(2);
        return PriorSpec::scaled_log_gaussian(to_double(c.args[0], ctx),
                                              to_double(c.args[1], ctx));
    }
    if (c.name == "gaussian") {
        need(2);
        return PriorSpec::gaussian(to_double(c.args[0], ctx), to_double(c.args[1], ctx));
    }
    if (c.name == "fixed") {
        need(1);
        return PriorSpec::fixed(to_double(c.args[0], ctx));
    }
    throw config_error(ctx + ": unknown prior '" + c.name +
                       "' (expected pc_prec, scaled_log_gaussian, gaussian, or fixed)");
}

// whitespace-separated tokens, parentheses kept together
inline std::vector<std::string> split_tokens(const std::string& v) {
    std::vector<std::string> out;
    std::string tok;
    int depth = 0;
    for (char c : v) {
        if (c == '(') ++depth;
        if (c == ')') --depth;
        if (std::isspace(static_cast<unsigned char>(c)) && depth == 0) {
            if (!tok.empty()) out.push_back(tok);
            tok.clear();
        } else {
            tok += c;
        }
    }
    if (!tok.empty()) out.push_back(tok);
    return out;
}

}  // namespace cfg

// ---- simulation section ----------------------------------------------------

struct SimulateRun {
    bool example1 = false;
    SimConfig sim;       // discrete competing-risks generator
    Example1Config e1;   // intercept/slope Weibull generator
};

inline SimulateRun read_simulate_config(const ConfigFile& f) {
    if (!f.has_section("simulate"))
        throw config_error(f.origin + ": missing [simulate] section");
    const std::string ctx = f.origin + ": [simulate]";
    SimulateRun run;
    const std::string gen = f.get_or("simulate", "generator", "example5");
    if (gen == "example1")
        run.example1 = true;
    else if (gen != "example5")
        throw config_error(ctx + ": generator must be example5 or example1, got '" + gen + "'");

    auto opt_int = [&](const char* key, int& dst) {
        if (const ConfigEntry* e = f.find("simulate", key))
            dst = static_cast<int>(cfg::to_int(e->value, ctx));
    };
    auto opt_double = [&](const char* key, double& dst) {
        if (const ConfigEntry* e = f.find("simulate", key)) dst = cfg::to_double(e->value, ctx);
    };

    std::vector<CauseCoefficients> causes;
    {
        const ConfigEntry* g = f.find("simulate", "gamma");
        const ConfigEntry* b = f.find("simulate", "beta");
        if (static_cast<bool>(g) != static_cast<bool>(b))
            throw config_error(ctx + ": gamma and beta lists must be given together");
        if (g) {
            const auto gv = cfg::to_double_list(g->value, ctx);
            const auto bv = cfg::to_double_list(b->value, ctx);
            if (gv.size() != bv.size())
                throw config_error(ctx + ": gamma and beta lists differ in length");
            for (size_t j = 0; j < gv.size(); ++j) causes.push_back({gv[j], bv[j]});
        }
    }

    if (run.example1) {
        Example1Config& c = run.e1;
        if (const ConfigEntry* e = f.find("simulate", "seed"))
            c.seed = cfg::to_u64(e->value, ctx);
        opt_int("n_individuals", c.n_individuals);
        opt_int("n_obs_min", c.n_obs_min);
        opt_int("n_obs_max", c.n_obs_max);
        opt_int("age_min", c.age_min);
        opt_int("age_max", c.age_max);
        opt_double("tau_v", c.tau_v);
        opt_double("tau_w", c.tau_w);
        opt_double("rho", c.rho);
        opt_double("intercept_long", c.intercept_long);
        opt_double("beta_age_long", c.beta_age_long);
        if (!causes.empty()) c.causes = causes;
        if (const ConfigEntry* e = f.find("simulate", "alpha"))
            c.alpha = cfg::to_double_list(e->value, ctx);
        if (const ConfigEntry* e = f.find("simulate", "kappa"))
            c.kappa = cfg::to_double_list(e->value, ctx);
        validate_example1_config(c);
    } else {
        SimConfig& c = run.sim;
        if (const ConfigEntry* e = f.find("simulate", "seed"))
            c.seed = cfg::to_u64(e->value, ctx);
        opt_int("n_individuals", c.n_individuals);
        opt_int("n_obs_min", c.n_obs_min);
        opt_int("n_obs_max", c.n_obs_max);
        opt_int("age_min", c.age_min);
        opt_int("age_max", c.age_max);
        opt_double("trend_power", c.trend_power);
        opt_double("sigma_u", c.sigma_u);
        opt_double("censoring_rate", c.censoring_rate);
        if (const ConfigEntry* e = f.find("simulate", "legacy_appendix"))
            c.legacy_appendix = cfg::to_bool(e->value, ctx);
        if (!causes.empty()) c.causes = causes;
        validate_sim_config(c);
    }
    return run;
}

// ---- model / fit sections --------------------------------------------------

struct DeriveDirective {
    std::string name;    // new covariate on longitudinal rows
    std::string source;  // "time" or an existing covariate
    int n_bins = 0;
};

// model + fit settings shared by 'fit' (CSV input) and 'check' (in-memory data)
struct ModelConfig {
    std::vector<DeriveDirective> derive;
    ModelSpec spec;
    // effect index -> name of the derive directive whose bin midpoints become
    // the reporting grid (and the effect size, when unset)
    std::map<int, std::string> grid_from_bins;
    FitOptions options;
    int curve_points = 101;
    double curve_t_max = 0.0;  // 0 = largest observed survival time
};

struct FitRun {
    std::string longitudinal_path, survival_path;
    int n_causes = 0;
    bool truncate_late = false;
    ModelConfig mc;
};

namespace detail {

inline FixedTerm parse_fixed_term(const std::string& s, const std::string& ctx) {
    const size_t star = s.find('*');
    FixedTerm t;
    if (star == std::string::npos) {
        t.coefficient = trim(s);
    } else {
        t.coefficient = trim(s.substr(0, star));
        t.covariate = trim(s.substr(star + 1));
    }
    if (t.coefficient.empty() || t.covariate.empty())
        throw config_error(ctx + ": bad fixed-effect term '" + s + "' (use name or name*cov)");
    return t;
}

inline Attachment parse_attachment(const std::string& s, const std::string& ctx) {
    const cfg::Call c = cfg::parse_call(s, ctx);
    if (c.args.empty() || c.args.size() > 2)
        throw config_error(ctx + ": attachment '" + s + "' needs effect(index) or " +
                           "effect(index, weight)");
    Attachment a;
    a.effect = c.name;
    a.index_covariate = c.args[0];
    if (c.args.size() == 2) a.weight_covariate = c.args[1];
    return a;
}

// "source(index) scaling=name prior=gaussian(0,0.01)" | "source(index) fixed=1"
// source: effect | effect.v | effect.w | eta.block
inline CopyLink parse_copy(const std::string& s, const std::string& ctx) {
    const auto tokens = cfg::split_tokens(s);
    if (tokens.empty()) throw config_error(ctx + ": empty copy specification");
    const cfg::Call head = cfg::parse_call(tokens[0], ctx);
    if (head.args.size() != 1)
        throw config_error(ctx + ": copy source '" + tokens[0] + "' needs exactly one index");
    CopyLink cp;
    cp.index_covariate = head.args[0];
    std::string src = head.name;
    if (src.size() > 4 && src.compare(0, 4, "eta.") == 0) {
        cp.of_linear_predictor = true;
        cp.source = src.substr(4);
    } else if (src.size() > 2 && src.compare(src.size() - 2, 2, ".v") == 0) {
        cp.source = src.substr(0, src.size() - 2);
        cp.component = 0;
    } else if (src.size() > 2 && src.compare(src.size() - 2, 2, ".w") == 0) {
        cp.source = src.substr(0, src.size() - 2);
        cp.component = 1;
    } else {
        cp.source = src;
    }
    bool has_scaling = false, has_fixed = false;
    for (size_t k = 1; k < tokens.size(); ++k) {
        const size_t eq = tokens[k].find('=');
        if (eq == std::string::npos)
            throw config_error(ctx + ": bad copy attribute '" + tokens[k] +
                               "' (use key=value)");
        const std::string key = tokens[k].substr(0, eq);
        const std::string val = tokens[k].substr(eq + 1);
        if (key == "scaling") {
            cp.scaling_name = val;
            has_scaling = true;
        } else if (key == "prior") {
            cp.scaling_prior = cfg::to_prior(val, ctx);
        } else if (key == "fixed") {
            cp.fixed_value = cfg::to_double(val, ctx);
            has_fixed = true;
        } else if (key == "weight") {
            cp.weight_covariate = val;
        } else {
            throw config_error(ctx + ": unknown copy attribute '" + key + "'");
        }
    }
    if (has_scaling == has_fixed)
        throw config_error(ctx + ": copy '" + s +
                           "' needs exactly one of scaling=<name> or fixed=<value>");
    cp.estimated = has_scaling;
    return cp;
}

}  // namespace detail

inline ModelConfig read_model_config(const ConfigFile& f, int n_causes) {
    ModelConfig run;
    run.spec.n_causes = n_causes;

    if (f.has_section("derive")) {
        const std::string ctx = f.origin + ": [derive]";
        for (const ConfigEntry* e : f.section_entries("derive")) {
            const cfg::Call c = cfg::parse_call(e->value, ctx);
            if (c.name != "bin" || c.args.size() != 2)
                throw config_error(ctx + ": '" + e->value +
                                   "' (only bin(source, n_bins) is supported)");
            DeriveDirective d;
            d.name = e->key;
            d.source = c.args[0];
            d.n_bins = static_cast<int>(cfg::to_int(c.args[1], ctx));
            if (d.n_bins < 2) throw config_error(ctx + ": need at least 2 bins");
            run.derive.push_back(d);
        }
    }

    if (f.has_section("model")) {
        const std::string ctx = f.origin + ": [model]";
        if (const ConfigEntry* e = f.find("model", "fixed_effect_precision"))
            run.spec.fixed_effect_precision = cfg::to_double(e->value, ctx);
        if (const ConfigEntry* e = f.find("model", "eta_tie_precision"))
            run.spec.eta_tie_precision = cfg::to_double(e->value, ctx);
    }

    for (const std::string& sec : f.sections_with_prefix("effect.")) {
        const std::string ctx = f.origin + ": [" + sec + "]";
        EffectSpec e;
        e.name = sec.substr(7);
        const std::string kind = f.require(sec, "kind");
        if (kind == "iid")
            e.kind = EffectKind::iid;
        else if (kind == "iid2d")
            e.kind = EffectKind::iid2d;
        else if (kind == "rw2")
            e.kind = EffectKind::rw2;
        else
            throw config_error(ctx + ": kind must be iid, iid2d, or rw2, got '" + kind + "'");
        if (const ConfigEntry* en = f.find(sec, "size"))
            e.size = static_cast<int>(cfg::to_int(en->value, ctx));
        if (const ConfigEntry* en = f.find(sec, "scale_model")) {
            if (e.kind != EffectKind::rw2)
                throw config_error(ctx + ": scale_model only applies to rw2 effects");
            e.scale_model = cfg::to_bool(en->value, ctx);
        }
        if (const ConfigEntry* en = f.find(sec, "prior"))
            e.prior_tau = cfg::to_prior(en->value, ctx);
        if (const ConfigEntry* en = f.find(sec, "prior_w")) {
            if (e.kind != EffectKind::iid2d)
                throw config_error(ctx + ": prior_w only applies to iid2d effects");
            e.prior_tau_w = cfg::to_prior(en->value, ctx);
        }
        if (const ConfigEntry* en = f.find(sec, "prior_rho")) {
            if (e.kind != EffectKind::iid2d)
                throw config_error(ctx + ": prior_rho only applies to iid2d effects");
            e.prior_rho = cfg::to_prior(en->value, ctx);
        }
        if (const ConfigEntry* en = f.find(sec, "grid")) {
            if (e.kind != EffectKind::rw2)
                throw config_error(ctx + ": grid only applies to rw2 effects");
            const cfg::Call c = cfg::parse_call(en->value, ctx);
            if (c.name == "bins" && c.args.size() == 1) {
                bool known = false;
                for (const auto& d : run.derive) known = known || d.name == c.args[0];
                if (!known)
                    throw config_error(ctx + ": grid = bins(" + c.args[0] +
                                       ") has no matching [derive] entry");
                run.grid_from_bins[static_cast<int>(run.spec.effects.size())] = c.args[0];
            } else {
                e.grid_values = cfg::to_double_list(en->value, ctx);
            }
        }
        run.spec.effects.push_back(std::move(e));
    }

    const auto block_sections = f.sections_with_prefix("block.");
    if (block_sections.empty())
        throw config_error(f.origin + ": no [block.<name>] sections");
    for (const std::string& sec : block_sections) {
        const std::string ctx = f.origin + ": [" + sec + "]";
        BlockSpec b;
        b.name = sec.substr(6);
        const std::string fam = f.require(sec, "family");
        if (fam == "gaussian")
            b.family = Family::gaussian;
        else if (fam == "poisson")
            b.family = Family::poisson;
        else if (fam == "weibull_surv")
            b.family = Family::weibull_surv;
        else if (fam == "exponential_surv")
            b.family = Family::exponential_surv;
        else
            throw config_error(ctx + ": unknown family '" + fam + "'");
        if (const ConfigEntry* e = f.find(sec, "cause"))
            b.cause = static_cast<int>(cfg::to_int(e->value, ctx));
        if (const ConfigEntry* e = f.find(sec, "family_hyper")) {
            if (b.family != Family::gaussian && b.family != Family::weibull_surv)
                throw config_error(ctx +
                                   ": family_hyper only applies to gaussian (precision) " +
                                   "and weibull_surv (shape) blocks");
            b.family_hyper = cfg::to_prior(e->value, ctx);
        }
        for (const std::string& v : f.all(sec, "fixed"))
            for (const auto& item : cfg::split_list(v))
                b.fixed_terms.push_back(detail::parse_fixed_term(item, ctx));
        for (const std::string& v : f.all(sec, "attach"))
            for (const auto& item : cfg::split_list(v))
                b.attachments.push_back(detail::parse_attachment(item, ctx));
        for (const std::string& v : f.all(sec, "copy"))
            b.copies.push_back(detail::parse_copy(v, ctx));
        run.spec.blocks.push_back(std::move(b));
    }

    if (f.has_section("fit")) {
        const std::string ctx = f.origin + ": [fit]";
        FitOptions& o = run.options;
        if (const ConfigEntry* e = f.find("fit", "threads"))
            o.threads = static_cast<int>(cfg::to_int(e->value, ctx));
        if (const ConfigEntry* e = f.find("fit", "theta_init")) {
            const auto v = cfg::to_double_list(e->value, ctx);
            o.theta_init = Eigen::Map<const Eigen::VectorXd>(v.data(),
                                                             static_cast<Eigen::Index>(v.size()));
        }
        if (const ConfigEntry* e = f.find("fit", "marginals_for_eta"))
            o.marginals_for_eta = cfg::to_bool(e->value, ctx);
        if (const ConfigEntry* e = f.find("fit", "grid_step"))
            o.grid.step = cfg::to_double(e->value, ctx);
        if (const ConfigEntry* e = f.find("fit", "grid_log_drop"))
            o.grid.log_drop = cfg::to_double(e->value, ctx);
        if (const ConfigEntry* e = f.find("fit", "grid_max_axis_steps"))
            o.grid.max_axis_steps = static_cast<int>(cfg::to_int(e->value, ctx));
        if (const ConfigEntry* e = f.find("fit", "grid_max_points"))
            o.grid.max_points = static_cast<int>(cfg::to_int(e->value, ctx));
        if (const ConfigEntry* e = f.find("fit", "simplex_max_evals"))
            o.simplex.max_evals = static_cast<int>(cfg::to_int(e->value, ctx));
        if (const ConfigEntry* e = f.find("fit", "newton_max_iter"))
            o.newton.max_iter = static_cast<int>(cfg::to_int(e->value, ctx));
        if (const ConfigEntry* e = f.find("fit", "curve_points")) {
            run.curve_points = static_cast<int>(cfg::to_int(e->value, ctx));
            if (run.curve_points < 2) throw config_error(ctx + ": curve_points must be >= 2");
        }
        if (const ConfigEntry* e = f.find("fit", "curve_t_max")) {
            run.curve_t_max = cfg::to_double(e->value, ctx);
            if (!(run.curve_t_max > 0.0)) throw config_error(ctx + ": curve_t_max must be > 0");
        }
    }
    return run;
}

inline FitRun read_fit_config(const ConfigFile& f) {
    FitRun run;
    if (!f.has_section("data"))
        throw config_error(f.origin + ": missing [data] section");
    const std::string ctx = f.origin + ": [data]";
    run.longitudinal_path = f.require("data", "longitudinal");
    run.survival_path = f.require("data", "survival");
    run.n_causes = static_cast<int>(cfg::to_int(f.require("data", "n_causes"), ctx));
    if (run.n_causes < 1) throw config_error(ctx + ": n_causes must be >= 1");
    const std::string late = f.get_or("data", "on_late_observation", "error");
    if (late == "truncate")
        run.truncate_late = true;
    else if (late != "error")
        throw config_error(ctx + ": on_late_observation must be 'error' or 'truncate'");
    run.mc = read_model_config(f, run.n_causes);
    return run;
}

// Add derived covariates to longitudinal rows and resolve bins(...) grids.
inline void apply_derive(ModelConfig& mc, std::vector<LongitudinalRecord>& lng) {
    std::map<std::string, std::vector<double>> midpoints;
    for (const auto& d : mc.derive) {
        std::vector<double> src;
        src.reserve(lng.size());
        for (const auto& rec : lng) {
            if (d.source == "time") {
                src.push_back(rec.time);
            } else {
                auto it = rec.covariates.find(d.source);
                if (it == rec.covariates.end())
                    throw config_error("derive " + d.name + ": covariate '" + d.source +
                                       "' not present on a longitudinal row");
                src.push_back(it->second);
            }
        }
        const BinnedCovariate bins = bin_covariate(src, d.n_bins);
        for (size_t k = 0; k < lng.size(); ++k)
            lng[k].covariates[d.name] = static_cast<double>(bins.indices[k]);
        midpoints[d.name] = bins.midpoints;
    }
    for (const auto& [idx, name] : mc.grid_from_bins) {
        EffectSpec& e = mc.spec.effects[static_cast<size_t>(idx)];
        e.grid_values = midpoints.at(name);
        if (e.size == 0) e.size = static_cast<int>(e.grid_values.size());
    }
}

// Load the CSVs, add derived covariates, resolve bins(...) grids, validate.
inline JointDataset load_fit_dataset(FitRun& run) {
    const Family long_family =
        run.mc.spec.blocks.empty() ? Family::gaussian : run.mc.spec.blocks.front().family;
    std::vector<LongitudinalRecord> lng =
        load_longitudinal_csv(run.longitudinal_path, long_family);
    std::vector<SurvivalRecord> srv = load_survival_csv(run.survival_path, run.n_causes);
    apply_derive(run.mc, lng);
    return validate_joint_dataset(std::move(lng), std::move(srv), run.n_causes,
                                  run.truncate_late);
}

}  // namespace lgmcr
