#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include <Eigen/Dense>

#include "pmse/cond_dist.hpp"
#include "pmse/csv.hpp"
#include "pmse/design.hpp"
#include "pmse/errors.hpp"
#include "pmse/estimators.hpp"
#include "pmse/regression.hpp"
#include "pmse/rng.hpp"
#include "pmse/selection.hpp"

namespace pmse {

// ---------------------------------------------------------------------------
// Sampling
// ---------------------------------------------------------------------------

inline Eigen::VectorXd draw_sample(const DesignMatrix& design, const Eigen::VectorXd& theta,
                                   double sigma, Rng& rng) {
    if (theta.size() != design.P) throw config_error("draw_sample: theta length != P");
    if (!(sigma > 0.0)) throw config_error("draw_sample: sigma must be positive");
    Eigen::VectorXd y = design.X * theta;
    for (int i = 0; i < design.n; ++i) y(i) += sigma * rng.normal();
    return y;
}

// Draws the sufficient statistics (X'Y/n, Y'Y/n) directly: X'Y/n is Gaussian
// around the Gram-weighted mean and the residual sum of squares is an
// independent scaled chi-square, which reproduces the joint law of the
// response draw at O(P^2) cost per replication instead of O(nP).
class SufficientSampler {
public:
    explicit SufficientSampler(const DesignMatrix& design) : design_(&design) {
        Eigen::LLT<Eigen::MatrixXd> llt(design.gram);
        chol_ = llt.matrixL();
        gram_inv_ = llt.solve(Eigen::MatrixXd::Identity(design.P, design.P));
    }

    SampleStats draw(const Eigen::VectorXd& theta, double sigma, Rng& rng) const {
        const DesignMatrix& d = *design_;
        const double n = static_cast<double>(d.n);
        Eigen::VectorXd z(d.P);
        for (int j = 0; j < d.P; ++j) z(j) = rng.normal();
        Eigen::VectorXd w = chol_ * z; // X'u/(sigma sqrt(n)) in distribution
        const double chi2 = rng.chi_square(static_cast<double>(d.n - d.P));
        SampleStats s;
        s.design = design_;
        s.xty_n = d.gram * theta + (sigma / std::sqrt(n)) * w;
        s.yty_n = theta.dot(d.gram * theta) + 2.0 * sigma * theta.dot(w) / std::sqrt(n) +
                  sigma * sigma * (chi2 + w.dot(gram_inv_ * w)) / n;
        return s;
    }

private:
    const DesignMatrix* design_;
    Eigen::MatrixXd chol_;
    Eigen::MatrixXd gram_inv_;
};

// Both sampling routes behind one switch.
struct SamplerChoice {
    enum class Kind { response, sufficient } kind = Kind::sufficient;

    static SamplerChoice parse(const std::string& name) {
        SamplerChoice c;
        if (name == "response")
            c.kind = Kind::response;
        else if (name == "sufficient")
            c.kind = Kind::sufficient;
        else
            throw config_error("unknown sampler: " + name);
        return c;
    }
};

// ---------------------------------------------------------------------------
// Ledger and frequency statistics
// ---------------------------------------------------------------------------

struct BinomialStat {
    double freq = 0.0;
    double se = 0.0;
    std::uint64_t count = 0;
    std::uint64_t cell = 0;
    bool empty = false;

    static BinomialStat from(std::uint64_t count, std::uint64_t cell) {
        BinomialStat b;
        b.count = count;
        b.cell = cell;
        if (cell == 0) {
            b.empty = true;
            return b;
        }
        b.freq = static_cast<double>(count) / static_cast<double>(cell);
        b.se = std::sqrt(std::max(b.freq * (1.0 - b.freq), 0.0) /
                         static_cast<double>(cell));
        return b;
    }
};

struct LedgerRow {
    std::uint64_t rep = 0;
    std::uint64_t stream_key = 0;
    int selected = -1; // nested order or mask index
    double sigma_hat = 0.0;
    Eigen::VectorXd scaled_dev;         // sqrt(n) A (estimate - theta)
    std::vector<double> estimates;      // estimator values, experiment layout
    std::vector<double> targets;        // realized exact targets
};

struct ReplicationLedger {
    std::vector<LedgerRow> rows;

    // Conditional empirical c.d.f. within the {selected == p} cell.
    BinomialStat empirical_cond_cdf(int selected, const Eigen::VectorXd& t) const {
        std::uint64_t cell = 0, count = 0;
        for (const auto& row : rows) {
            if (row.selected != selected) continue;
            ++cell;
            if ((row.scaled_dev.array() <= t.array()).all()) ++count;
        }
        return BinomialStat::from(count, cell);
    }

    // Exceedance frequency of |estimate - target| over delta, optionally
    // restricted to one selection cell.
    BinomialStat error_prob(size_t est_index, size_t target_index, double delta,
                            std::optional<int> cell_selected = {}) const {
        std::uint64_t cell = 0, count = 0;
        for (const auto& row : rows) {
            if (cell_selected && row.selected != *cell_selected) continue;
            ++cell;
            if (std::abs(row.estimates.at(est_index) - row.targets.at(target_index)) > delta)
                ++count;
        }
        return BinomialStat::from(count, cell);
    }

    BinomialStat selection_frequency(int selected) const {
        std::uint64_t count = 0;
        for (const auto& row : rows)
            if (row.selected == selected) ++count;
        return BinomialStat::from(count, rows.size());
    }

    Table to_table(const std::string& schema, int k, size_t n_est, size_t n_tgt) const {
        Table tab;
        tab.schema = schema;
        tab.columns = {"rep", "stream_key", "selected", "sigma_hat"};
        for (int j = 0; j < k; ++j) tab.columns.push_back("dev" + std::to_string(j + 1));
        for (size_t j = 0; j < n_est; ++j)
            tab.columns.push_back("estimate" + std::to_string(j + 1));
        for (size_t j = 0; j < n_tgt; ++j)
            tab.columns.push_back("target" + std::to_string(j + 1));
        for (const auto& row : rows) {
            std::vector<std::string> cells;
            cells.push_back(std::to_string(row.rep));
            cells.push_back(std::to_string(row.stream_key));
            cells.push_back(std::to_string(row.selected));
            cells.push_back(format_double(row.sigma_hat));
            for (int j = 0; j < k; ++j) cells.push_back(format_double(row.scaled_dev(j)));
            for (size_t j = 0; j < n_est; ++j)
                cells.push_back(format_double(j < row.estimates.size() ? row.estimates[j] : 0.0));
            for (size_t j = 0; j < n_tgt; ++j)
                cells.push_back(format_double(j < row.targets.size() ? row.targets[j] : 0.0));
            tab.rows.push_back(std::move(cells));
        }
        return tab;
    }
};

// Deterministic parallel map: items are claimed in blocks and written to
// caller-owned slots, so the result is independent of the thread count.
template <class F>
void parallel_for(std::uint64_t items, int threads, F&& fn) {
    if (threads <= 1 || items < 4096) {
        for (std::uint64_t i = 0; i < items; ++i) fn(i);
        return;
    }
    std::atomic<std::uint64_t> next{0};
    const std::uint64_t block = 1024;
    auto worker = [&] {
        for (;;) {
            const std::uint64_t start = next.fetch_add(block);
            if (start >= items) return;
            const std::uint64_t stop = std::min(items, start + block);
            for (std::uint64_t i = start; i < stop; ++i) fn(i);
        }
    };
    std::vector<std::thread> pool;
    for (int t = 0; t < threads; ++t) pool.emplace_back(worker);
    for (auto& th : pool) th.join();
}

// ---------------------------------------------------------------------------
// Experiment plan
// ---------------------------------------------------------------------------

struct ExperimentPlan {
    Eigen::MatrixXd Q;                     // target Gram for synthetic designs
    std::optional<Eigen::MatrixXd> X;      // explicit design (single-n experiments)
    std::vector<int> n_ladder;
    TargetMap target{Eigen::MatrixXd::Identity(1, 1)};
    NestedFamily nested;                   // limiting critical values
    std::map<int, NestedFamily> nested_by_n; // optional per-n schedule
    std::optional<SubsetFamily> subsets;
    ParameterPoint base;

    std::vector<int> gamma_active;         // 1-based perturbed coordinates
    int gamma_points = 9;
    double rho0 = 0.0;                     // 0 requests 4 sigma sqrt(max diag Q^-1)
    int p_eval = -1;                       // conditional-cell order; -1 = auto
    std::optional<Eigen::VectorXd> gamma_fixed; // single perturbation direction

    std::vector<Eigen::VectorXd> t_grid;
    double delta0_override = 0.0;          // 0 requests the oscillation rule
    double exceedance_delta = 0.05;
    std::vector<double> delta_grid;        // optional extra exceedance levels

    std::uint64_t replications = 100000;
    std::uint64_t master_seed = 20260801;
    int threads = 1;
    SamplerChoice sampler;
    QuadratureConfig quad;
    AuxRule aux;
    std::uint64_t design_seed = 777;

    // subset-selection experiments
    std::vector<int> r_star;
    double threshold_c = 0.0;              // 0 requests sqrt(penalty)
    std::string selector = "ic";           // "ic" or "threshold"

    // selection-probability probes
    int probe_order = -1;
    double radius_scale = 1.0;

    DesignMatrix make_design(int n) const {
        if (X) {
            if (n != X->rows())
                throw config_error("explicit design does not match requested n");
            return DesignMatrix::from_matrix(*X, Q.size() ? std::optional(Q) : std::nullopt);
        }
        return DesignMatrix::synthetic(n, Q, design_seed);
    }

    // Per-sample-size critical values when a schedule is configured; the
    // schedule must approach the limiting values held in `nested`.
    const NestedFamily& family_for(int n) const {
        auto it = nested_by_n.find(n);
        return it == nested_by_n.end() ? nested : it->second;
    }

    void require_scalar_target() const {
        if (target.k != 1)
            throw config_error("this experiment requires a one-dimensional target");
    }

    void require_reportable_replications() const {
        if (replications < 1000)
            throw config_error(
                "mc.replications must be at least 1000 for reported standard errors");
    }
};

// Tensor grid over the active coordinates, sign-symmetric and containing 0.
inline std::vector<Eigen::VectorXd> gamma_grid(const ExperimentPlan& plan, double rho0) {
    const int P = static_cast<int>(plan.Q.rows());
    std::vector<Eigen::VectorXd> grid;
    if (plan.gamma_active.empty()) {
        grid.push_back(Eigen::VectorXd::Zero(P));
        return grid;
    }
    const int m = plan.gamma_points;
    if (m < 1 || m % 2 == 0)
        throw config_error("gamma_points must be odd so the grid contains zero");
    std::vector<double> axis(m);
    for (int i = 0; i < m; ++i)
        axis[i] = rho0 * 0.999 * (2.0 * i / (m - 1.0) - 1.0);
    if (m == 1) axis[0] = 0.0;
    std::vector<Eigen::VectorXd> partial{Eigen::VectorXd::Zero(P)};
    for (int coord : plan.gamma_active) {
        if (coord < 1 || coord > P) throw config_error("gamma coordinate out of range");
        std::vector<Eigen::VectorXd> next;
        for (const auto& g : partial)
            for (double v : axis) {
                Eigen::VectorXd h = g;
                h(coord - 1) = v;
                next.push_back(std::move(h));
            }
        partial = std::move(next);
    }
    // scale multi-coordinate grids back inside the ball of radius rho0
    const double norm_max = std::sqrt(static_cast<double>(plan.gamma_active.size()));
    for (auto& g : partial)
        if (plan.gamma_active.size() > 1) g /= norm_max;
    return partial;
}

inline double default_rho0(const Eigen::MatrixXd& Q, double sigma) {
    Eigen::MatrixXd qinv = Q.llt().solve(Eigen::MatrixXd::Identity(Q.rows(), Q.cols()));
    return 4.0 * sigma * std::sqrt(qinv.diagonal().maxCoeff());
}

namespace detail {

inline SampleStats draw_stats(const ExperimentPlan& plan, const DesignMatrix& design,
                              const SufficientSampler& fast, const Eigen::VectorXd& theta,
                              Rng& rng) {
    if (plan.sampler.kind == SamplerChoice::Kind::response)
        return SampleStats::from_response(design, draw_sample(design, theta, plan.base.sigma, rng));
    return fast.draw(theta, plan.base.sigma, rng);
}

} // namespace detail

// ---------------------------------------------------------------------------
// Non-uniformity sweep: worst-case estimation-error frequencies over a
// shrinking parameter neighborhood, against the constant selection-probability
// floor they cannot fall below.
// ---------------------------------------------------------------------------

struct SweepCell {
    int n = 0;
    int gamma_index = 0;
    double gamma_coord = 0.0;
    BinomialStat err_uncond;
    BinomialStat err_cond;
    BinomialStat cell_freq;
    double exact_eval = 0.0;
};

struct SweepResult {
    int qstar = -1;
    int p_eval = -1;
    double rho0 = 0.0;
    double delta0 = 0.0;
    double bound = 0.0;
    std::vector<double> limit_values; // limiting c.d.f. per grid point
    std::vector<SweepCell> cells;
    std::vector<int> ladder;

    double sup_uncond(int n) const {
        double v = 0.0;
        for (const auto& c : cells)
            if (c.n == n) v = std::max(v, c.err_uncond.freq);
        return v;
    }
    double sup_cond(int n) const {
        double v = 0.0;
        for (const auto& c : cells)
            if (c.n == n && !c.err_cond.empty) v = std::max(v, c.err_cond.freq);
        return v;
    }

    Table summary_table() const {
        Table t;
        t.schema = "pmse.sweep.v1";
        t.columns = {"n", "sup_err_unconditional", "sup_err_conditional", "bound", "delta0"};
        for (int n : ladder)
            t.add_row({static_cast<long long>(n), sup_uncond(n), sup_cond(n), bound, delta0});
        return t;
    }

    Table detail_table() const {
        Table t;
        t.schema = "pmse.sweep.detail.v1";
        t.columns = {"n", "gamma_index", "gamma_coord", "err_uncond", "err_uncond_se",
                     "err_cond", "err_cond_se", "cell_freq", "cell_freq_se", "exact_eval"};
        for (const auto& c : cells)
            t.add_row({static_cast<long long>(c.n), static_cast<long long>(c.gamma_index),
                       c.gamma_coord, c.err_uncond.freq, c.err_uncond.se,
                       c.err_cond.empty ? -1.0 : c.err_cond.freq, c.err_cond.se,
                       c.cell_freq.freq, c.cell_freq.se, c.exact_eval});
        return t;
    }
};

inline SweepResult nonuniformity_sweep(const ExperimentPlan& plan) {
    plan.require_scalar_target();
    plan.require_reportable_replications();
    if (plan.t_grid.empty()) throw config_error("sweep: need a t point");
    const Eigen::VectorXd t = plan.t_grid.front();
    const double sigma = plan.base.sigma;
    AsymptoticContext ctx(plan.Q, plan.target, plan.nested, sigma);
    SweepResult out;
    out.ladder = plan.n_ladder;
    out.qstar = ctx.largest_correlated_order();
    if (out.qstar < 0)
        throw config_error("sweep: target is asymptotically uncorrelated with every "
                           "tested coefficient; no oscillation to probe");
    out.p_eval = plan.p_eval > 0 ? plan.p_eval : out.qstar;
    out.rho0 = plan.rho0 > 0.0 ? plan.rho0 : default_rho0(plan.Q, sigma);
    out.bound = asymptotic_overselection_prob(plan.nested, out.qstar);

    const auto grid = gamma_grid(plan, out.rho0);
    const int O = plan.nested.min_order;
    const OrderClass cls =
        out.p_eval == std::max(order_of(plan.base.theta), O) ? OrderClass::tight
                                                             : OrderClass::overfit;
    for (const auto& g : grid)
        out.limit_values.push_back(limit_cdf(ctx, out.p_eval, g, cls, t, plan.quad).value);
    if (plan.delta0_override > 0.0) {
        out.delta0 = plan.delta0_override;
    } else {
        const auto [lo, hi] =
            std::minmax_element(out.limit_values.begin(), out.limit_values.end());
        const double osc = *hi - *lo;
        if (!(osc > 0.0))
            throw numeric_error("sweep: limiting c.d.f. is constant over the grid", osc, 0.0);
        out.delta0 = 0.25 * osc;
    }

    const int P = plan.nested.max_order();
    for (int n : plan.n_ladder) {
        DesignMatrix design = plan.make_design(n);
        const NestedFamily& fam_n = plan.family_for(n);
        SufficientSampler fast(design);
        std::vector<CheckCdfTable> tables;
        tables.reserve(P - O + 1);
        for (int p = O; p <= P; ++p)
            tables.emplace_back(design, plan.target, fam_n, p, plan.quad);
        const double aux_thr = plan.aux.resolve_threshold(n);

        for (size_t gi = 0; gi < grid.size(); ++gi) {
            Eigen::VectorXd vartheta =
                plan.base.theta + grid[gi] / std::sqrt(static_cast<double>(n));
            NestedModelDistribution dist(design, plan.target, fam_n,
                                         ParameterPoint(vartheta, sigma), plan.quad);
            // orders whose selection probability vanishes numerically carry
            // no exact target; a replication landing there is an error
            std::vector<double> exact(P + 1, std::numeric_limits<double>::quiet_NaN());
            for (int p = O; p <= P; ++p)
                if (dist.selection_probability(p).value > 1e-9)
                    exact[p] = dist.conditional_cdf(p, t).value;

            const std::uint64_t R = plan.replications;
            std::vector<std::uint8_t> flag_u(R), flag_c(R), in_cell(R);
            std::atomic<std::uint64_t> stranded{0};
            parallel_for(R, plan.threads, [&](std::uint64_t r) {
                Rng rng = Rng::from_key(plan.master_seed,
                                        mix_key({static_cast<std::uint64_t>(n), gi}), r);
                SampleStats stats = detail::draw_stats(plan, design, fast, vartheta, rng);
                SelectionOutcome sel = gts_select(stats, fam_n);
                if (std::isnan(exact[sel.order])) {
                    stranded.fetch_add(1);
                    return;
                }
                const double shat = sel.sigma_hat;
                const double est_sel = tables[sel.order - O].value(
                    t(0), shat, sel.t_stats[sel.order], aux_thr);
                flag_u[r] = std::abs(est_sel - exact[sel.order]) > out.delta0;
                in_cell[r] = sel.order == out.p_eval;
                if (in_cell[r]) {
                    const double est_eval = tables[out.p_eval - O].value(
                        t(0), shat, sel.t_stats[out.p_eval], aux_thr);
                    flag_c[r] = std::abs(est_eval - exact[out.p_eval]) > out.delta0;
                }
            });
            if (stranded.load() > 0)
                throw empty_cell_error(
                    "sweep: replications selected an order with vanishing probability");
            std::uint64_t cu = 0, cc = 0, cells = 0;
            for (std::uint64_t r = 0; r < R; ++r) {
                cu += flag_u[r];
                if (in_cell[r]) {
                    ++cells;
                    cc += flag_c[r];
                }
            }
            SweepCell cell;
            cell.n = n;
            cell.gamma_index = static_cast<int>(gi);
            cell.gamma_coord = plan.gamma_active.empty()
                                   ? 0.0
                                   : grid[gi](plan.gamma_active.front() - 1);
            cell.err_uncond = BinomialStat::from(cu, R);
            cell.err_cond = BinomialStat::from(cc, cells);
            cell.cell_freq = BinomialStat::from(cells, R);
            cell.exact_eval = exact[out.p_eval];
            out.cells.push_back(cell);
        }
    }
    return out;
}

// Consistency curve: the same engine at the base parameter only, with a
// fixed exceedance threshold.
inline SweepResult consistency_curve(ExperimentPlan plan) {
    plan.gamma_active.clear();
    plan.gamma_points = 1;
    if (plan.delta0_override <= 0.0) plan.delta0_override = plan.exceedance_delta;
    return nonuniformity_sweep(plan);
}

// ---------------------------------------------------------------------------
// Orthogonal escape hatch: with an asymptotically uncorrelated target the
// full-model plug-in is uniformly adequate; tracks the worst (theta, t) cell
// of the exceedance frequency down the ladder.
// ---------------------------------------------------------------------------

struct OrthogonalEscapeRow {
    int n = 0;
    double sup_freq = 0.0;
    double max_se = 0.0;
};

struct OrthogonalEscapeResult {
    std::vector<OrthogonalEscapeRow> rows;
    double delta = 0.05;

    Table summary_table() const {
        Table t;
        t.schema = "pmse.orthogonal.v1";
        t.columns = {"n", "sup_exceed_freq", "max_se", "delta"};
        for (const auto& r : rows)
            t.add_row({static_cast<long long>(r.n), r.sup_freq, r.max_se, delta});
        return t;
    }
};

inline OrthogonalEscapeResult orthogonal_escape(const ExperimentPlan& plan) {
    plan.require_scalar_target();
    plan.require_reportable_replications();
    if (plan.t_grid.empty()) throw config_error("orthogonal escape: need t points");
    OrthogonalEscapeResult out;
    out.delta = plan.exceedance_delta;
    const double sigma = plan.base.sigma;
    const int O = plan.nested.min_order;
    const int P = plan.nested.max_order();

    for (int n : plan.n_ladder) {
        DesignMatrix design = plan.make_design(n);
        const NestedFamily& fam_n = plan.family_for(n);
        SufficientSampler fast(design);
        ProjectionQuantities pq_full = projection_quantities(design.gram, plan.target, P);
        const double sd_full = std::sqrt(pq_full.cov_z(0, 0));
        const auto grid = gamma_grid(plan, plan.rho0 > 0.0 ? plan.rho0
                                                           : default_rho0(plan.Q, sigma));

        OrthogonalEscapeRow row;
        row.n = n;
        for (size_t gi = 0; gi < grid.size(); ++gi) {
            Eigen::VectorXd vartheta =
                plan.base.theta + grid[gi] / std::sqrt(static_cast<double>(n));
            NestedModelDistribution dist(design, plan.target, fam_n,
                                         ParameterPoint(vartheta, sigma), plan.quad);
            std::vector<std::vector<double>> exact(P + 1);
            for (int p = O; p <= P; ++p) {
                if (dist.selection_probability(p).value <= 1e-9) continue;
                for (const auto& t : plan.t_grid)
                    exact[p].push_back(dist.conditional_cdf(p, t).value);
            }

            const std::uint64_t R = plan.replications;
            const size_t T = plan.t_grid.size();
            std::vector<std::uint8_t> flags(R * T);
            std::atomic<std::uint64_t> stranded{0};
            parallel_for(R, plan.threads, [&](std::uint64_t r) {
                Rng rng = Rng::from_key(plan.master_seed,
                                        mix_key({static_cast<std::uint64_t>(n), gi, 0x0eu}), r);
                SampleStats stats = detail::draw_stats(plan, design, fast, vartheta, rng);
                SelectionOutcome sel = gts_select(stats, fam_n);
                if (exact[sel.order].empty()) {
                    stranded.fetch_add(1);
                    return;
                }
                for (size_t l = 0; l < T; ++l) {
                    const double est =
                        norm_cdf(plan.t_grid[l](0) / (sel.sigma_hat * sd_full));
                    flags[r * T + l] =
                        std::abs(est - exact[sel.order][l]) > plan.exceedance_delta;
                }
            });
            if (stranded.load() > 0)
                throw empty_cell_error(
                    "orthogonal escape: replications selected an order with vanishing "
                    "probability");
            for (size_t l = 0; l < T; ++l) {
                std::uint64_t c = 0;
                for (std::uint64_t r = 0; r < R; ++r) c += flags[r * T + l];
                BinomialStat st = BinomialStat::from(c, R);
                if (st.freq > row.sup_freq) {
                    row.sup_freq = st.freq;
                    row.max_se = st.se;
                }
            }
        }
        out.rows.push_back(row);
    }
    return out;
}

// ---------------------------------------------------------------------------
// Selection-probability floor/decay probe over shrinking neighborhoods.
// ---------------------------------------------------------------------------

struct SelectionProbeRow {
    int n = 0;
    double min_freq = 1.0;
    double se_at_min = 0.0;
    double radius = 0.0;
};

struct SelectionProbeResult {
    std::vector<SelectionProbeRow> rows;
    int order = 0;

    Table summary_table() const {
        Table t;
        t.schema = "pmse.selprobe.v1";
        t.columns = {"n", "min_sel_freq", "se", "radius"};
        for (const auto& r : rows)
            t.add_row({static_cast<long long>(r.n), r.min_freq, r.se_at_min, r.radius});
        return t;
    }
};

// part "a": radius r_n = scale / sqrt(n), perturbing the coordinates above p;
// part "b": radius r_n = scale * n^{-1/4}, including the slowly separating
// point with last coordinate r_n / 2.
inline SelectionProbeResult selection_probability_probe(const ExperimentPlan& plan,
                                                        char part) {
    plan.require_reportable_replications();
    const int P = plan.nested.max_order();
    const int p = plan.probe_order;
    if (p < plan.nested.min_order || p > P)
        throw config_error("probe: order outside family");
    if (part == 'b' && p >= P) throw config_error("probe part b: need p < P");
    SelectionProbeResult out;
    out.order = p;

    for (int n : plan.n_ladder) {
        const double rn = part == 'a'
                              ? plan.radius_scale / std::sqrt(static_cast<double>(n))
                              : plan.radius_scale * std::pow(static_cast<double>(n), -0.25);
        DesignMatrix design = plan.make_design(n);
        const NestedFamily& fam_n = plan.family_for(n);
        SufficientSampler fast(design);

        std::vector<Eigen::VectorXd> grid;
        grid.push_back(plan.base.theta);
        if (part == 'a') {
            for (int q = p + 1; q <= P; ++q) {
                Eigen::VectorXd up = plan.base.theta, dn = plan.base.theta;
                up(q - 1) += 0.9 * rn;
                dn(q - 1) -= 0.9 * rn;
                grid.push_back(up);
                grid.push_back(dn);
            }
            if (p == P) {
                Eigen::VectorXd up = plan.base.theta;
                up(P - 1) += 0.9 * rn;
                grid.push_back(up);
            }
        } else {
            // the slowly separating point: its scaled last coordinate
            // diverges, so the selection probability must drain away
            Eigen::VectorXd worst = plan.base.theta;
            worst(P - 1) = rn / 2.0;
            grid.push_back(worst);
        }

        SelectionProbeRow row;
        row.n = n;
        row.radius = rn;
        for (size_t gi = 0; gi < grid.size(); ++gi) {
            const std::uint64_t R = plan.replications;
            std::vector<std::uint8_t> hit(R);
            parallel_for(R, plan.threads, [&](std::uint64_t r) {
                Rng rng = Rng::from_key(plan.master_seed,
                                        mix_key({static_cast<std::uint64_t>(n), gi, 0xA2u}), r);
                SampleStats stats = detail::draw_stats(plan, design, fast, grid[gi], rng);
                hit[r] = gts_select(stats, fam_n).order == p;
            });
            std::uint64_t c = 0;
            for (std::uint64_t r = 0; r < R; ++r) c += hit[r];
            BinomialStat st = BinomialStat::from(c, R);
            if (st.freq < row.min_freq) {
                row.min_freq = st.freq;
                row.se_at_min = st.se;
            }
        }
        out.rows.push_back(row);
    }
    return out;
}

// ---------------------------------------------------------------------------
// Subset-selector correspondence: symmetric differences against the
// full-model t-test events and the nested-reduction distribution targets.
// ---------------------------------------------------------------------------

struct ReductionRow {
    int n = 0;
    BinomialStat symdiff_full;  // {selected full} vs {|T| >= c}
    BinomialStat symdiff_star;  // {selected r*} vs {|T| < c}
    BinomialStat freq_full;
    double sup_dev_full = 0.0;  // sup_t |K_emp(t|full) - G(t|P)|
    double sup_dev_star = 0.0;  // sup_t |K_emp(t|r*) - G(t|P-1)|
    std::uint64_t cell_full = 0, cell_star = 0;
};

struct ReductionResult {
    std::vector<ReductionRow> rows;
    double c = 0.0;
    double limit_freq_full = 0.0; // 2(1 - Phi(c))

    Table summary_table() const {
        Table t;
        t.schema = "pmse.reduction.v1";
        t.columns = {"n",         "symdiff_full", "symdiff_full_se", "symdiff_star",
                     "symdiff_star_se", "freq_full",    "freq_full_se",    "sup_dev_full",
                     "sup_dev_star",    "limit_freq_full"};
        for (const auto& r : rows)
            t.add_row({static_cast<long long>(r.n), r.symdiff_full.freq, r.symdiff_full.se,
                       r.symdiff_star.freq, r.symdiff_star.se, r.freq_full.freq,
                       r.freq_full.se, r.sup_dev_full, r.sup_dev_star, limit_freq_full});
        return t;
    }
};

inline ReductionResult reduction_run(const ExperimentPlan& plan) {
    plan.require_scalar_target();
    plan.require_reportable_replications();
    if (!plan.subsets) throw config_error("reduction: subset family required");
    const SubsetFamily& fam = *plan.subsets;
    fam.require_selection_structure();
    const int P = fam.P();
    if (plan.r_star.empty()) throw config_error("reduction: r_star required");
    if (dropped_index(plan.r_star) != P)
        throw config_error("reduction: coordinates must be arranged so the excluded "
                           "index of r_star is the last one");
    if (order_of(plan.base.theta) != P - 1)
        throw config_error("reduction: theta must have exactly P-1 leading nonzero "
                           "coordinates");
    for (int j = 0; j + 1 < P; ++j)
        if (plan.base.theta(j) == 0.0)
            throw config_error("reduction: theta must have exactly P-1 nonzero coordinates");
    const double c = plan.threshold_c > 0.0 ? plan.threshold_c : std::sqrt(fam.upsilon);
    if (plan.selector != "ic" && plan.selector != "threshold")
        throw config_error("unknown selector: " + plan.selector);
    const bool use_threshold_selector = plan.selector == "threshold";

    int idx_full = -1, idx_star = -1;
    for (size_t i = 0; i < fam.masks.size(); ++i) {
        if (mask_weight(fam.masks[i]) == P) idx_full = static_cast<int>(i);
        if (fam.masks[i] == plan.r_star) idx_star = static_cast<int>(i);
    }
    if (idx_star < 0) throw config_error("reduction: r_star not in the family");

    // the nested single-test reduction of the subset problem
    NestedFamily reduction_family(P - 1, P, {c});

    ReductionResult out;
    out.c = c;
    out.limit_freq_full = 2.0 * (1.0 - norm_cdf(c));

    for (int n : plan.n_ladder) {
        DesignMatrix design = plan.make_design(n);
        SufficientSampler fast(design);
        NestedModelDistribution dist(design, plan.target, reduction_family, plan.base,
                                     plan.quad);
        std::vector<double> exact_full, exact_star;
        for (const auto& t : plan.t_grid) {
            exact_full.push_back(dist.conditional_cdf(P, t).value);
            exact_star.push_back(dist.conditional_cdf(P - 1, t).value);
        }

        const std::uint64_t R = plan.replications;
        std::vector<std::uint8_t> e1(R), e2(R), cls(R); // cls: 0 other, 1 full, 2 star
        std::vector<double> dev(R);
        parallel_for(R, plan.threads, [&](std::uint64_t r) {
            Rng rng = Rng::from_key(plan.master_seed,
                                    mix_key({static_cast<std::uint64_t>(n), 0x24u}), r);
            SampleStats stats = detail::draw_stats(plan, design, fast, plan.base.theta, rng);
            const double t_full = full_model_t(stats, P);
            const bool t_fires = std::abs(t_full) >= c;
            int chosen;
            if (use_threshold_selector) {
                chosen = t_fires ? idx_full : idx_star;
            } else {
                chosen = ic_select(stats, fam).mask_index;
            }
            const bool is_full = chosen == idx_full;
            const bool is_star = chosen == idx_star;
            cls[r] = is_full ? 1 : (is_star ? 2 : 0);
            e1[r] = is_full != t_fires;
            e2[r] = is_star != !t_fires;
            Eigen::VectorXd est = subset_ls(stats, fam.masks[chosen]);
            dev[r] = std::sqrt(static_cast<double>(n)) *
                     (plan.target.A * (est - plan.base.theta))(0);
        });

        ReductionRow row;
        row.n = n;
        std::uint64_t c1 = 0, c2 = 0, nfull = 0, nstar = 0;
        for (std::uint64_t r = 0; r < R; ++r) {
            c1 += e1[r];
            c2 += e2[r];
            nfull += cls[r] == 1;
            nstar += cls[r] == 2;
        }
        row.symdiff_full = BinomialStat::from(c1, R);
        row.symdiff_star = BinomialStat::from(c2, R);
        row.freq_full = BinomialStat::from(nfull, R);
        row.cell_full = nfull;
        row.cell_star = nstar;
        if (nfull == 0 || nstar == 0)
            throw empty_cell_error("reduction: a required conditioning cell is empty");
        for (size_t l = 0; l < plan.t_grid.size(); ++l) {
            const double tl = plan.t_grid[l](0);
            std::uint64_t hf = 0, hs = 0;
            for (std::uint64_t r = 0; r < R; ++r) {
                if (cls[r] == 1 && dev[r] <= tl) ++hf;
                if (cls[r] == 2 && dev[r] <= tl) ++hs;
            }
            row.sup_dev_full =
                std::max(row.sup_dev_full,
                         std::abs(static_cast<double>(hf) / nfull - exact_full[l]));
            row.sup_dev_star =
                std::max(row.sup_dev_star,
                         std::abs(static_cast<double>(hs) / nstar - exact_star[l]));
        }
        out.rows.push_back(row);
    }
    return out;
}

// ---------------------------------------------------------------------------
// Exact-versus-Monte-Carlo comparison at one sample size.
// ---------------------------------------------------------------------------

struct ExactVsMcCell {
    int p = 0;
    double t = 0.0;
    double exact = 0.0;
    double exact_err = 0.0;
    BinomialStat empirical;
    double z_score = 0.0; // |diff| / SE
};

struct ExactVsMcResult {
    std::vector<ExactVsMcCell> cells;
    std::vector<double> sel_exact;      // per order, starting at min_order
    std::vector<BinomialStat> sel_freq; // matching Monte Carlo frequencies
    double sel_sum = 0.0;
    int min_order = 0;
    ReplicationLedger ledger;
    std::vector<double> mixture_exact; // law-of-total-probability check per t
    std::vector<BinomialStat> mixture_emp;

    Table summary_table() const {
        Table t;
        t.schema = "pmse.exactmc.v1";
        t.columns = {"p", "t", "exact", "exact_err", "empirical", "se", "count", "z"};
        for (const auto& c : cells)
            t.add_row({static_cast<long long>(c.p), c.t, c.exact, c.exact_err,
                       c.empirical.freq, c.empirical.se,
                       static_cast<long long>(c.empirical.cell), c.z_score});
        return t;
    }

    Table selection_table() const {
        Table t;
        t.schema = "pmse.selprob.v1";
        t.columns = {"p", "exact", "mc_freq", "mc_se", "sum_exact"};
        for (size_t i = 0; i < sel_exact.size(); ++i)
            t.add_row({static_cast<long long>(min_order + static_cast<int>(i)), sel_exact[i],
                       sel_freq[i].freq, sel_freq[i].se, sel_sum});
        return t;
    }
};

inline ExactVsMcResult exact_vs_mc(const ExperimentPlan& plan) {
    plan.require_reportable_replications();
    if (plan.n_ladder.size() != 1)
        throw config_error("exact_vs_mc: exactly one sample size expected");
    const int n = plan.n_ladder.front();
    DesignMatrix design = plan.make_design(n);
    const NestedFamily& fam_n = plan.family_for(n);
    SufficientSampler fast(design);
    NestedModelDistribution dist(design, plan.target, fam_n, plan.base, plan.quad);
    const int O = plan.nested.min_order;
    const int P = plan.nested.max_order();

    ExactVsMcResult out;
    out.min_order = O;
    for (int p = O; p <= P; ++p) {
        CdfValue sp = dist.selection_probability(p);
        out.sel_exact.push_back(sp.value);
        out.sel_sum += sp.value;
    }

    const std::uint64_t R = plan.replications;
    out.ledger.rows.resize(R);
    parallel_for(R, plan.threads, [&](std::uint64_t r) {
        Rng rng = Rng::from_key(plan.master_seed, 0xE1ull, r);
        SampleStats stats = detail::draw_stats(plan, design, fast, plan.base.theta, rng);
        SelectionOutcome sel = gts_select(stats, fam_n);
        LedgerRow& row = out.ledger.rows[r];
        row.rep = r;
        row.stream_key = mix_key({plan.master_seed, 0xE1ull, r});
        row.selected = sel.order;
        row.sigma_hat = sel.sigma_hat;
        Eigen::VectorXd est = restricted_ls(stats, sel.order);
        row.scaled_dev = std::sqrt(static_cast<double>(n)) *
                         (plan.target.A * (est - plan.base.theta));
    });

    for (int p = O; p <= P; ++p)
        out.sel_freq.push_back(out.ledger.selection_frequency(p));

    for (int p = O; p <= P; ++p) {
        if (out.sel_exact[p - O] < 0.05) continue;
        for (const auto& t : plan.t_grid) {
            CdfValue g = dist.conditional_cdf(p, t);
            ExactVsMcCell cell;
            cell.p = p;
            cell.t = t(0);
            cell.exact = g.value;
            cell.exact_err = g.error;
            cell.empirical = out.ledger.empirical_cond_cdf(p, t);
            cell.z_score = cell.empirical.empty
                               ? std::numeric_limits<double>::infinity()
                               : std::abs(cell.empirical.freq - cell.exact) /
                                     std::max(cell.empirical.se, 1e-12);
            out.cells.push_back(cell);
        }
    }

    // law of total probability: mixture of conditional laws matches the
    // unconditional empirical distribution; vanishing cells carry no weight
    for (const auto& t : plan.t_grid) {
        double mix = 0.0;
        for (int p = O; p <= P; ++p) {
            if (out.sel_exact[p - O] <= 1e-10) continue;
            mix += dist.conditional_cdf(p, t).value * out.sel_exact[p - O];
        }
        out.mixture_exact.push_back(mix);
        std::uint64_t hits = 0;
        for (const auto& row : out.ledger.rows)
            if ((row.scaled_dev.array() <= t.array()).all()) ++hits;
        out.mixture_emp.push_back(BinomialStat::from(hits, R));
    }
    return out;
}

} // namespace pmse
