// Batch front end: evaluates exact conditional distributions, runs the
// non-uniformity and selection-probability experiments, and emits CSV tables
// plus optional SVG figures.

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <string>

#include "pmse/cond_dist.hpp"
#include "pmse/config.hpp"
#include "pmse/csv.hpp"
#include "pmse/montecarlo.hpp"
#include "pmse/svg.hpp"

namespace fs = std::filesystem;
using namespace pmse;

namespace {

struct CommonOpts {
    std::string config_path;
    std::string out_dir = ".";
    std::uint64_t seed = 0;
    int threads = 0;
    bool svg = false;
};

void add_common(CLI::App* cmd, CommonOpts& opts) {
    cmd->add_option("--config", opts.config_path, "experiment config (JSON)")
        ->required();
    cmd->add_option("--seed", opts.seed, "override the master seed");
    cmd->add_option("--out", opts.out_dir, "output directory");
    cmd->add_option("--threads", opts.threads, "worker thread count");
    cmd->add_flag("--svg", opts.svg, "emit SVG figures next to the CSV tables");
}

std::pair<ExperimentPlan, OutputOptions> load_plan(const CommonOpts& opts) {
    json cfg = load_json(opts.config_path);
    ExperimentPlan plan = parse_plan(cfg);
    if (opts.seed != 0) {
        plan.master_seed = opts.seed;
        plan.quad.master_seed = opts.seed;
    }
    if (opts.threads > 0) plan.threads = opts.threads;
    fs::create_directories(opts.out_dir);
    return {std::move(plan), parse_output(cfg)};
}

std::string out_path(const CommonOpts& opts, const OutputOptions& oo,
                     const std::string& suffix) {
    return (fs::path(opts.out_dir) / (oo.prefix + "_" + suffix)).string();
}

int run_exact(const CommonOpts& opts) {
    auto [plan, oo] = load_plan(opts);
    if (plan.t_grid.empty()) throw config_error("missing required config field 'grids.t'");
    const int O = plan.nested.min_order;
    const int P = plan.nested.max_order();

    Table cdf;
    cdf.schema = "pmse.exact.cdf.v1";
    cdf.columns = {"n", "p"};
    for (int j = 0; j < plan.target.k; ++j) cdf.columns.push_back("t" + std::to_string(j + 1));
    cdf.columns.insert(cdf.columns.end(), {"value", "error", "method"});

    Table sel;
    sel.schema = "pmse.exact.selprob.v1";
    sel.columns = {"n", "p", "value", "error", "sum_over_p"};

    for (int n : plan.n_ladder) {
        DesignMatrix design = plan.make_design(n);
        NestedModelDistribution dist(design, plan.target, plan.nested, plan.base, plan.quad);
        double sum = 0.0;
        std::vector<CdfValue> probs;
        for (int p = O; p <= P; ++p) {
            probs.push_back(dist.selection_probability(p));
            sum += probs.back().value;
        }
        for (int p = O; p <= P; ++p)
            sel.add_row({static_cast<long long>(n), static_cast<long long>(p),
                         probs[p - O].value, probs[p - O].error, sum});
        for (int p = O; p <= P; ++p) {
            for (const auto& t : plan.t_grid) {
                if (probs[p - O].value < 1e-10) continue; // conditioning cell vanishes
                CdfValue g = dist.conditional_cdf(p, t);
                std::vector<Table::Cell> row{static_cast<long long>(n),
                                             static_cast<long long>(p)};
                for (int j = 0; j < plan.target.k; ++j) row.push_back(t(j));
                row.push_back(g.value);
                row.push_back(g.error);
                row.push_back(g.method);
                std::vector<std::string> cells;
                for (auto& c : row)
                    cells.push_back(std::holds_alternative<double>(c)
                                        ? format_double(std::get<double>(c))
                                        : (std::holds_alternative<long long>(c)
                                               ? std::to_string(std::get<long long>(c))
                                               : std::get<std::string>(c)));
                cdf.rows.push_back(std::move(cells));
            }
        }
    }

    // large-sample limits at the base parameter (no local perturbation)
    Table lim;
    lim.schema = "pmse.exact.limit.v1";
    lim.columns = {"p"};
    for (int j = 0; j < plan.target.k; ++j) lim.columns.push_back("t" + std::to_string(j + 1));
    lim.columns.insert(lim.columns.end(), {"value", "error", "method"});
    AsymptoticContext ctx(plan.Q, plan.target, plan.nested, plan.base.sigma);
    const int pmin = std::max(order_of(plan.base.theta), O);
    Eigen::VectorXd gamma0 = Eigen::VectorXd::Zero(P);
    for (int p = pmin; p <= P; ++p) {
        const OrderClass cls = p == pmin ? OrderClass::tight : OrderClass::overfit;
        for (const auto& t : plan.t_grid) {
            CdfValue g = limit_cdf(ctx, p, gamma0, cls, t, plan.quad);
            std::vector<std::string> cells{std::to_string(p)};
            for (int j = 0; j < plan.target.k; ++j) cells.push_back(format_double(t(j)));
            cells.push_back(format_double(g.value));
            cells.push_back(format_double(g.error));
            cells.push_back(g.method);
            lim.rows.push_back(std::move(cells));
        }
    }

    cdf.write_file(out_path(opts, oo, "cdf.csv"));
    sel.write_file(out_path(opts, oo, "selprob.csv"));
    lim.write_file(out_path(opts, oo, "limit.csv"));

    if (opts.svg && plan.n_ladder.size() > 1) {
        std::vector<SvgSeries> series;
        const char* palette[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#8c564b"};
        for (int p = O; p <= P; ++p) {
            SvgSeries s;
            s.label = "p = " + std::to_string(p);
            s.color = palette[(p - O) % 5];
            for (size_t i = 0; i < plan.n_ladder.size(); ++i) {
                DesignMatrix design = plan.make_design(plan.n_ladder[i]);
                NestedModelDistribution dist(design, plan.target, plan.nested, plan.base,
                                             plan.quad);
                s.x.push_back(plan.n_ladder[i]);
                s.y.push_back(dist.selection_probability(p).value);
            }
            series.push_back(std::move(s));
        }
        write_line_chart(out_path(opts, oo, "selprob.svg"), "selection probabilities",
                         "n", "P(selected = p)", series);
    }
    return 0;
}

int run_sweep(const CommonOpts& opts, const std::string& experiment) {
    auto [plan, oo] = load_plan(opts);

    if (experiment == "thm2.3" || experiment == "thm4.1" || experiment == "thm4.2") {
        if (experiment == "thm4.2" && plan.p_eval <= 0)
            throw config_error("experiment 'thm4.2' needs config field 'experiment.p_eval'");
        SweepResult res = nonuniformity_sweep(plan);
        res.summary_table().write_file(out_path(opts, oo, "summary.csv"));
        res.detail_table().write_file(out_path(opts, oo, "detail.csv"));
        if (opts.svg) {
            SvgSeries sup_u{"sup err (unconditional)", {}, {}, "#1f77b4"};
            SvgSeries sup_c{"sup err (conditional)", {}, {}, "#d62728"};
            SvgSeries bound{"selection floor", {}, {}, "#7f7f7f"};
            for (int n : res.ladder) {
                sup_u.x.push_back(n);
                sup_u.y.push_back(res.sup_uncond(n));
                sup_c.x.push_back(n);
                sup_c.y.push_back(res.sup_cond(n));
                bound.x.push_back(n);
                bound.y.push_back(res.bound);
            }
            write_line_chart(out_path(opts, oo, "sweep.svg"),
                             "worst-case estimation error over the shrinking neighborhood",
                             "n", "exceedance frequency", {sup_u, sup_c, bound});
        }
        return 0;
    }
    if (experiment == "consistency") {
        std::vector<double> deltas = plan.delta_grid;
        if (deltas.empty()) deltas.push_back(plan.exceedance_delta);
        Table t;
        t.schema = "pmse.consistency.v1";
        t.columns = {"n", "err_prob", "se", "delta"};
        SweepResult res;
        for (double delta : deltas) {
            ExperimentPlan cur = plan;
            cur.delta0_override = delta;
            res = consistency_curve(cur);
            for (const auto& c : res.cells)
                t.add_row({static_cast<long long>(c.n), c.err_uncond.freq,
                           c.err_uncond.se, delta});
        }
        t.write_file(out_path(opts, oo, "consistency.csv"));
        if (opts.svg) {
            SvgSeries s{"estimation error frequency", {}, {}, "#1f77b4"};
            for (const auto& c : res.cells) {
                s.x.push_back(c.n);
                s.y.push_back(c.err_uncond.freq);
            }
            write_line_chart(out_path(opts, oo, "consistency.svg"),
                             "estimator consistency at the base parameter", "n",
                             "exceedance frequency", {s});
        }
        return 0;
    }
    if (experiment == "prop-a2a" || experiment == "prop-a2b") {
        SelectionProbeResult res =
            selection_probability_probe(plan, experiment.back() == 'a' ? 'a' : 'b');
        res.summary_table().write_file(out_path(opts, oo, "probe.csv"));
        if (opts.svg) {
            SvgSeries s{"min selection frequency", {}, {}, "#1f77b4"};
            for (const auto& row : res.rows) {
                s.x.push_back(row.n);
                s.y.push_back(row.min_freq);
            }
            write_line_chart(out_path(opts, oo, "probe.svg"),
                             "selection probability over the neighborhood", "n",
                             "min frequency", {s});
        }
        return 0;
    }
    if (experiment == "exact-mc") {
        ExactVsMcResult res = exact_vs_mc(plan);
        res.summary_table().write_file(out_path(opts, oo, "exactmc.csv"));
        res.selection_table().write_file(out_path(opts, oo, "selfreq.csv"));
        if (oo.write_ledger)
            res.ledger.to_table("pmse.ledger.v1", plan.target.k, 0, 0)
                .write_file(out_path(opts, oo, "ledger.csv"));
        return 0;
    }
    if (experiment == "prop2.4") {
        OrthogonalEscapeResult res = orthogonal_escape(plan);
        res.summary_table().write_file(out_path(opts, oo, "orthogonal.csv"));
        if (opts.svg) {
            SvgSeries s{"sup exceedance frequency", {}, {}, "#1f77b4"};
            for (const auto& row : res.rows) {
                s.x.push_back(row.n);
                s.y.push_back(row.sup_freq);
            }
            write_line_chart(out_path(opts, oo, "orthogonal.svg"),
                             "full-model plug-in under an uncorrelated target", "n",
                             "sup exceedance frequency", {s});
        }
        return 0;
    }
    throw config_error("unknown experiment: " + experiment);
}

int run_probe24(const CommonOpts& opts) {
    auto [plan, oo] = load_plan(opts);
    ReductionResult res = reduction_run(plan);
    res.summary_table().write_file(out_path(opts, oo, "probe24.csv"));
    if (opts.svg) {
        SvgSeries s1{"symdiff full", {}, {}, "#1f77b4"};
        SvgSeries s2{"symdiff drop-one", {}, {}, "#d62728"};
        SvgSeries s3{"sup dev full-cell", {}, {}, "#2ca02c"};
        SvgSeries s4{"sup dev drop-cell", {}, {}, "#9467bd"};
        for (const auto& row : res.rows) {
            s1.x.push_back(row.n);
            s1.y.push_back(row.symdiff_full.freq);
            s2.x.push_back(row.n);
            s2.y.push_back(row.symdiff_star.freq);
            s3.x.push_back(row.n);
            s3.y.push_back(row.sup_dev_full);
            s4.x.push_back(row.n);
            s4.y.push_back(row.sup_dev_star);
        }
        write_line_chart(out_path(opts, oo, "probe24.svg"),
                         "threshold correspondence of the subset selector", "n",
                         "frequency / sup deviation", {s1, s2, s3, s4});
    }
    return 0;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"post-model-selection conditional distribution toolkit"};
    app.require_subcommand(1);

    CommonOpts exact_opts, sweep_opts, probe_opts;
    std::string experiment;

    CLI::App* exact = app.add_subcommand("exact", "exact conditional c.d.f. and "
                                                  "selection-probability tables");
    add_common(exact, exact_opts);

    CLI::App* sweep = app.add_subcommand("sweep", "ladder experiments: non-uniformity "
                                                  "sweeps, consistency curves, "
                                                  "selection-probability probes");
    add_common(sweep, sweep_opts);
    sweep->add_option("--experiment", experiment,
                      "one of thm2.3, thm4.1, thm4.2, consistency, prop-a2a, prop-a2b, "
                      "prop2.4, exact-mc")
        ->required();

    CLI::App* probe = app.add_subcommand("probe24", "subset-selector threshold "
                                                    "correspondence and reduction run");
    add_common(probe, probe_opts);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 2;
    }

    try {
        if (exact->parsed()) return run_exact(exact_opts);
        if (sweep->parsed()) return run_sweep(sweep_opts, experiment);
        if (probe->parsed()) return run_probe24(probe_opts);
    } catch (const config_error& e) {
        std::fprintf(stderr, "config error: %s\n", e.what());
        return 2;
    } catch (const empty_cell_error& e) {
        std::fprintf(stderr, "empty conditioning cell: %s\n", e.what());
        return 4;
    } catch (const numeric_error& e) {
        std::fprintf(stderr, "numerical failure: %s (best estimate %.6g, error %.3g)\n",
                     e.what(), e.best, e.error);
        return 3;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    }
    return 0;
}
