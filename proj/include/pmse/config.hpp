#pragma once

#include <fstream>
#include <optional>
#include <string>

#include <json.hpp>

#include "pmse/errors.hpp"
#include "pmse/montecarlo.hpp"

namespace pmse {

using json = nlohmann::json;

struct OutputOptions {
    std::string prefix = "run";
    bool write_ledger = false;
};

namespace detail {

inline Eigen::MatrixXd parse_matrix(const json& j, const std::string& field) {
    if (!j.is_array() || j.empty() || !j.front().is_array())
        throw config_error("config field '" + field + "' must be a matrix (array of arrays)");
    const size_t rows = j.size(), cols = j.front().size();
    Eigen::MatrixXd m(rows, cols);
    for (size_t i = 0; i < rows; ++i) {
        if (j[i].size() != cols)
            throw config_error("config field '" + field + "' has ragged rows");
        for (size_t c = 0; c < cols; ++c) m(i, c) = j[i][c].get<double>();
    }
    return m;
}

inline Eigen::VectorXd parse_vector(const json& j, const std::string& field) {
    if (!j.is_array()) throw config_error("config field '" + field + "' must be an array");
    Eigen::VectorXd v(j.size());
    for (size_t i = 0; i < j.size(); ++i) v(i) = j[i].get<double>();
    return v;
}

template <class T>
T field_or(const json& j, const std::string& key, T fallback) {
    if (!j.contains(key)) return fallback;
    return j.at(key).get<T>();
}

inline const json& require(const json& j, const std::string& key, const std::string& where) {
    if (!j.contains(key))
        throw config_error("missing required config field '" + where + "." + key + "'");
    return j.at(key);
}

} // namespace detail

inline json load_json(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw config_error("cannot open config file: " + path);
    json j;
    try {
        in >> j;
    } catch (const std::exception& e) {
        throw config_error(std::string("config parse error: ") + e.what());
    }
    return j;
}

// Builds an experiment plan from the config sections {design, family,
// target, parameter, grids, mc, quadrature, estimator, experiment}.
inline ExperimentPlan parse_plan(const json& cfg) {
    ExperimentPlan plan;

    const json& design = detail::require(cfg, "design", "");
    if (design.contains("x_csv")) {
        plan.X = load_matrix_csv(design.at("x_csv").get<std::string>());
        plan.n_ladder = {static_cast<int>(plan.X->rows())};
    }
    if (design.contains("Q")) {
        plan.Q = detail::parse_matrix(design.at("Q"), "design.Q");
    } else if (design.contains("q_csv")) {
        plan.Q = load_matrix_csv(design.at("q_csv").get<std::string>());
    } else if (plan.X) {
        plan.Q = (plan.X->transpose() * (*plan.X)) / static_cast<double>(plan.X->rows());
    } else {
        throw config_error("design needs either Q, q_csv or x_csv");
    }
    if (design.contains("n_ladder")) {
        plan.n_ladder.clear();
        for (const auto& n : design.at("n_ladder")) plan.n_ladder.push_back(n.get<int>());
    }
    if (plan.n_ladder.empty()) throw config_error("design.n_ladder must not be empty");
    plan.design_seed = detail::field_or<std::uint64_t>(design, "seed", 777);

    const json& target = detail::require(cfg, "target", "");
    plan.target = TargetMap(detail::parse_matrix(detail::require(target, "A", "target"),
                                                 "target.A"));

    const json& family = detail::require(cfg, "family", "");
    const std::string kind = detail::require(family, "kind", "family").get<std::string>();
    const int P = static_cast<int>(plan.Q.rows());
    if (kind == "nested") {
        std::vector<double> crit;
        for (const auto& c : detail::require(family, "crit", "family")) crit.push_back(c.get<double>());
        const int floor = detail::field_or<int>(family, "min_order", 0);
        plan.nested = NestedFamily(floor, P, crit);
        if (family.contains("crit_by_n")) {
            for (const auto& [key, value] : family.at("crit_by_n").items()) {
                std::vector<double> cn;
                for (const auto& c : value) cn.push_back(c.get<double>());
                plan.nested_by_n.emplace(std::stoi(key), NestedFamily(floor, P, cn));
            }
        }
    } else if (kind == "subsets") {
        std::vector<std::vector<int>> masks;
        const json& jm = detail::require(family, "masks", "family");
        if (jm.is_string() && jm.get<std::string>() == "all") {
            plan.subsets = SubsetFamily::all_subsets(P, detail::field_or<double>(family, "penalty", 2.0));
        } else {
            for (const auto& row : jm) {
                std::vector<int> mask;
                for (const auto& bit : row) mask.push_back(bit.get<int>());
                masks.push_back(std::move(mask));
            }
            plan.subsets = SubsetFamily(masks, detail::field_or<double>(family, "penalty", 2.0));
        }
        // the reduction runs still need the nested single-test family
        const double c = detail::field_or<double>(family, "threshold_c", 0.0);
        const double eff = c > 0.0 ? c : std::sqrt(plan.subsets->upsilon);
        plan.nested = NestedFamily(P - 1, P, {eff});
        plan.threshold_c = eff;
    } else {
        throw config_error("family.kind must be 'nested' or 'subsets'");
    }

    const json& param = detail::require(cfg, "parameter", "");
    plan.base = ParameterPoint(
        detail::parse_vector(detail::require(param, "theta", "parameter"), "parameter.theta"),
        detail::field_or<double>(param, "sigma", 1.0));
    if (plan.base.theta.size() != P)
        throw config_error("parameter.theta length does not match the design");

    if (cfg.contains("grids")) {
        const json& grids = cfg.at("grids");
        if (grids.contains("t")) {
            plan.t_grid.clear();
            for (const auto& t : grids.at("t"))
                plan.t_grid.push_back(detail::parse_vector(t, "grids.t"));
        }
        if (grids.contains("gamma_active")) {
            plan.gamma_active.clear();
            for (const auto& c : grids.at("gamma_active"))
                plan.gamma_active.push_back(c.get<int>());
        }
        plan.gamma_points = detail::field_or<int>(grids, "gamma_points", plan.gamma_points);
        plan.rho0 = detail::field_or<double>(grids, "rho0", plan.rho0);
        plan.delta0_override = detail::field_or<double>(grids, "delta0", plan.delta0_override);
        if (grids.contains("delta")) {
            const json& jd = grids.at("delta");
            if (jd.is_array()) {
                for (const auto& d : jd) plan.delta_grid.push_back(d.get<double>());
                if (plan.delta_grid.empty())
                    throw config_error("grids.delta must not be an empty array");
                plan.exceedance_delta = plan.delta_grid.front();
            } else {
                plan.exceedance_delta = jd.get<double>();
            }
        }
    }
    for (const auto& t : plan.t_grid)
        if (t.size() != plan.target.k)
            throw config_error("grids.t entries must have the target dimension");

    if (cfg.contains("mc")) {
        const json& mc = cfg.at("mc");
        plan.replications = detail::field_or<std::uint64_t>(mc, "replications", plan.replications);
        plan.master_seed = detail::field_or<std::uint64_t>(mc, "seed", plan.master_seed);
        plan.threads = detail::field_or<int>(mc, "threads", plan.threads);
        plan.sampler = SamplerChoice::parse(
            detail::field_or<std::string>(mc, "sampler", "sufficient"));
    }

    if (cfg.contains("quadrature")) {
        const json& q = cfg.at("quadrature");
        plan.quad.rel_tol = detail::field_or<double>(q, "rel_tol", plan.quad.rel_tol);
        plan.quad.abs_tol = detail::field_or<double>(q, "abs_tol", plan.quad.abs_tol);
        plan.quad.qmc_points =
            detail::field_or<std::uint64_t>(q, "qmc_points", plan.quad.qmc_points);
        plan.quad.gl_1d = detail::field_or<int>(q, "gl_1d", plan.quad.gl_1d);
        plan.quad.s_nodes_init = detail::field_or<int>(q, "s_nodes_init", plan.quad.s_nodes_init);
        plan.quad.s_nodes_max = detail::field_or<int>(q, "s_nodes_max", plan.quad.s_nodes_max);
        plan.quad.master_seed = plan.master_seed;
        plan.quad.validate();
    }

    if (cfg.contains("estimator")) {
        const json& e = cfg.at("estimator");
        plan.aux.threshold = detail::field_or<double>(e, "aux_threshold", 0.0);
        const std::string ak = detail::field_or<std::string>(e, "aux_kind", "threshold");
        if (ak == "bic")
            plan.aux.kind = AuxRule::Kind::bic;
        else if (ak != "threshold")
            throw config_error("estimator.aux_kind must be 'threshold' or 'bic'");
    }

    if (cfg.contains("experiment")) {
        const json& e = cfg.at("experiment");
        plan.p_eval = detail::field_or<int>(e, "p_eval", plan.p_eval);
        if (e.contains("gamma"))
            plan.gamma_fixed = detail::parse_vector(e.at("gamma"), "experiment.gamma");
        plan.probe_order = detail::field_or<int>(e, "probe_order", plan.probe_order);
        plan.radius_scale = detail::field_or<double>(e, "radius_scale", plan.radius_scale);
        plan.selector = detail::field_or<std::string>(e, "selector", plan.selector);
        if (e.contains("r_star")) {
            plan.r_star.clear();
            for (const auto& bit : e.at("r_star")) plan.r_star.push_back(bit.get<int>());
        }
        plan.threshold_c = detail::field_or<double>(e, "threshold_c", plan.threshold_c);
    }
    return plan;
}

inline OutputOptions parse_output(const json& cfg) {
    OutputOptions out;
    if (cfg.contains("output")) {
        out.prefix = detail::field_or<std::string>(cfg.at("output"), "prefix", out.prefix);
        out.write_ledger =
            detail::field_or<bool>(cfg.at("output"), "ledger", out.write_ledger);
    }
    return out;
}

} // namespace pmse
