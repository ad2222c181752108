#include <catch2/catch_amalgamated.hpp>

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <sstream>

#include "pmse/montecarlo.hpp"

using namespace pmse;
using Catch::Matchers::WithinAbs;

namespace {

Eigen::Matrix3d equicorrelated3() {
    Eigen::Matrix3d q;
    q << 1, 0.5, 0.5, 0.5, 1, 0.5, 0.5, 0.5, 1;
    return q;
}

TargetMap first_coord_target() {
    Eigen::MatrixXd a(1, 3);
    a << 1, 0, 0;
    return TargetMap(a);
}

Eigen::VectorXd v1(double x) {
    Eigen::VectorXd t(1);
    t << x;
    return t;
}

template <class Cdf>
double ks_distance(std::vector<double> xs, const Cdf& cdf) {
    std::sort(xs.begin(), xs.end());
    const double n = static_cast<double>(xs.size());
    double d = 0.0;
    for (size_t i = 0; i < xs.size(); ++i) {
        const double f = cdf(xs[i]);
        d = std::max(d, std::abs(f - (i + 1) / n));
        d = std::max(d, std::abs(f - i / n));
    }
    return d;
}

ExperimentPlan base_plan() {
    ExperimentPlan plan;
    plan.Q = equicorrelated3();
    plan.n_ladder = {100};
    plan.target = first_coord_target();
    plan.nested = NestedFamily(1, 3, {1.96, 1.96});
    Eigen::VectorXd theta(3);
    theta << 1.0, 0.15, 0.0;
    plan.base = ParameterPoint(theta, 1.0);
    plan.t_grid = {v1(0.8)};
    plan.replications = 4000;
    plan.master_seed = 99;
    plan.threads = 2;
    return plan;
}

} // namespace

TEST_CASE("response draws are deterministic and have the right moments") {
    DesignMatrix d = DesignMatrix::synthetic(50, equicorrelated3(), 1);
    Eigen::VectorXd theta(3);
    theta << 0.0, 0.0, 0.0;
    Rng a = Rng::from_key(4, 4, 4), b = Rng::from_key(4, 4, 4);
    Eigen::VectorXd y1 = draw_sample(d, theta, 1.0, a);
    Eigen::VectorXd y2 = draw_sample(d, theta, 1.0, b);
    CHECK((y1 - y2).cwiseAbs().maxCoeff() == 0.0);

    // zero-mean check at theta = 0
    const int reps = 2000;
    double mean = 0.0;
    for (int r = 0; r < reps; ++r) {
        Rng rng = Rng::from_key(8, 1, r);
        mean += draw_sample(d, theta, 1.0, rng).mean();
    }
    mean /= reps;
    const double se = 1.0 / std::sqrt(50.0 * reps);
    CHECK_THAT(mean, WithinAbs(0.0, 3.0 * se));
}

TEST_CASE("response covariance is diagonal at the nominal scale") {
    Eigen::MatrixXd x(5, 2);
    x << 1, 0.5, 1, -0.5, 1, 1, 1, -1, 1, 0;
    DesignMatrix d = DesignMatrix::from_matrix(x);
    Eigen::VectorXd theta(2);
    theta << 0.7, -0.3;
    const double sigma = 1.3;
    const int reps = 40000;
    Eigen::MatrixXd acc = Eigen::MatrixXd::Zero(5, 5);
    Eigen::VectorXd mu = d.X * theta;
    for (int r = 0; r < reps; ++r) {
        Rng rng = Rng::from_key(6, 6, r);
        Eigen::VectorXd y = draw_sample(d, theta, sigma, rng) - mu;
        acc += y * y.transpose();
    }
    acc /= reps;
    const double var = sigma * sigma;
    const double se_diag = var * std::sqrt(2.0 / reps);
    const double se_off = var / std::sqrt(static_cast<double>(reps));
    for (int i = 0; i < 5; ++i)
        for (int j = 0; j < 5; ++j) {
            if (i == j)
                CHECK_THAT(acc(i, j), WithinAbs(var, 3.0 * se_diag));
            else
                CHECK_THAT(acc(i, j), WithinAbs(0.0, 3.0 * se_off));
        }
}

TEST_CASE("sufficient-statistic draws match the response law") {
    const int n = 200;
    DesignMatrix d = DesignMatrix::synthetic(n, equicorrelated3(), 10);
    SufficientSampler fast(d);
    Eigen::VectorXd theta(3);
    theta << 1.0, 0.3, 0.0;
    const int reps = 20000;
    std::vector<double> t_fast(reps), t_resp(reps), s_fast(reps), s_resp(reps);
    for (int r = 0; r < reps; ++r) {
        Rng r1 = Rng::from_key(61, 1, r);
        SampleStats sf = fast.draw(theta, 1.0, r1);
        t_fast[r] = t_stat(sf, 3);
        s_fast[r] = sigma_hat(sf);
        Rng r2 = Rng::from_key(62, 2, r);
        SampleStats sr = SampleStats::from_response(d, draw_sample(d, theta, 1.0, r2));
        t_resp[r] = t_stat(sr, 3);
        s_resp[r] = sigma_hat(sr);
    }
    // two-sample Kolmogorov-Smirnov distances; bound 3 sqrt(1/m + 1/n)/2-ish
    std::sort(t_resp.begin(), t_resp.end());
    const double ks_t = ks_distance(t_fast, [&](double x) {
        return (std::lower_bound(t_resp.begin(), t_resp.end(), x) - t_resp.begin()) /
               static_cast<double>(reps);
    });
    std::sort(s_resp.begin(), s_resp.end());
    const double ks_s = ks_distance(s_fast, [&](double x) {
        return (std::lower_bound(s_resp.begin(), s_resp.end(), x) - s_resp.begin()) /
               static_cast<double>(reps);
    });
    const double bound = 3.0 * std::sqrt(2.0 / reps);
    CHECK(ks_t < bound);
    CHECK(ks_s < bound);
}

TEST_CASE("ledger conditional statistics") {
    ReplicationLedger ledger;
    auto add = [&](int sel, double dev) {
        LedgerRow row;
        row.selected = sel;
        row.scaled_dev = v1(dev);
        row.estimates = {0.5};
        row.targets = {0.52};
        ledger.rows.push_back(row);
    };
    add(2, -1.0);
    add(2, 0.4);
    add(3, 5.0);

    SECTION("a huge threshold captures the whole cell") {
        BinomialStat st = ledger.empirical_cond_cdf(2, v1(1e9));
        CHECK(st.freq == 1.0);
        CHECK(st.cell == 2);
    }
    SECTION("single-replication cell") {
        BinomialStat st = ledger.empirical_cond_cdf(3, v1(1e9));
        CHECK(st.freq == 1.0);
        CHECK(st.cell == 1);
    }
    SECTION("empty cells are flagged, never silently zero") {
        BinomialStat st = ledger.empirical_cond_cdf(1, v1(0.0));
        CHECK(st.empty);
        CHECK(st.cell == 0);
    }
    SECTION("impossible exceedance has frequency zero") {
        BinomialStat st = ledger.error_prob(0, 0, 1.1);
        CHECK(st.freq == 0.0);
    }
    SECTION("zero threshold counts every non-tie") {
        BinomialStat st = ledger.error_prob(0, 0, 0.0);
        CHECK(st.freq == 1.0);
    }
    SECTION("selection frequencies partition the ledger") {
        double sum = 0.0;
        for (int p = 1; p <= 3; ++p) sum += ledger.selection_frequency(p).freq;
        CHECK_THAT(sum, WithinAbs(1.0, 1e-15));
    }
}

TEST_CASE("gamma grids are odd, symmetric and contain zero") {
    ExperimentPlan plan = base_plan();
    plan.gamma_active = {3};
    plan.gamma_points = 9;
    auto grid = gamma_grid(plan, 2.0);
    CHECK(grid.size() == 9);
    bool has_zero = false;
    for (const auto& g : grid) {
        bool mirrored = false;
        for (const auto& h : grid)
            if ((g + h).cwiseAbs().maxCoeff() == 0.0) mirrored = true;
        CHECK(mirrored);
        if (g.cwiseAbs().maxCoeff() == 0.0) has_zero = true;
        CHECK(std::abs(g(2)) <= 2.0);
        CHECK(g(0) == 0.0);
        CHECK(g(1) == 0.0);
    }
    CHECK(has_zero);
    plan.gamma_points = 8;
    CHECK_THROWS_AS(gamma_grid(plan, 2.0), config_error);
}

TEST_CASE("exact-vs-mc experiment is deterministic across thread counts") {
    ExperimentPlan plan = base_plan();
    plan.replications = 6000;
    plan.threads = 1;
    ExactVsMcResult one = exact_vs_mc(plan);
    plan.threads = 2;
    ExactVsMcResult two = exact_vs_mc(plan);
    REQUIRE(one.ledger.rows.size() == two.ledger.rows.size());
    for (size_t i = 0; i < one.ledger.rows.size(); i += 97) {
        CHECK(one.ledger.rows[i].selected == two.ledger.rows[i].selected);
        CHECK(one.ledger.rows[i].sigma_hat == two.ledger.rows[i].sigma_hat);
        CHECK(one.ledger.rows[i].scaled_dev == two.ledger.rows[i].scaled_dev);
    }
    std::ostringstream csv1, csv2;
    one.summary_table().write(csv1);
    two.summary_table().write(csv2);
    CHECK(csv1.str() == csv2.str());

    // partition and agreement sanity on the summary
    CHECK_THAT(one.sel_sum, WithinAbs(1.0, 1e-6));
    for (const auto& cell : one.cells) CHECK(cell.z_score < 4.0);

    // law of total probability: the selection-weighted mixture of the
    // conditional laws reproduces the unconditional empirical distribution
    for (size_t i = 0; i < one.mixture_exact.size(); ++i)
        CHECK(std::abs(one.mixture_exact[i] - one.mixture_emp[i].freq) <
              3.0 * one.mixture_emp[i].se + 1e-6);
}

TEST_CASE("per-n critical-value schedules steer the selector") {
    ExperimentPlan plan = base_plan();
    plan.nested_by_n.emplace(100, NestedFamily(1, 3, {40.0, 40.0}));
    CHECK(plan.family_for(100).c(3) == 40.0);
    CHECK(plan.family_for(400).c(3) == 1.96);
    // with an absurd critical value at n = 100 everything lands on the floor
    plan.n_ladder = {100};
    plan.replications = 2000;
    ExactVsMcResult res = exact_vs_mc(plan);
    CHECK(res.sel_freq[0].freq == 1.0);
    CHECK_THAT(res.sel_exact[0], WithinAbs(1.0, 1e-6));
}

TEST_CASE("experiments refuse replication counts too small to report errors") {
    ExperimentPlan plan = base_plan();
    plan.replications = 100;
    CHECK_THROWS_AS(exact_vs_mc(plan), config_error);
}

TEST_CASE("exact-vs-mc supports the response sampler") {
    ExperimentPlan plan = base_plan();
    plan.n_ladder = {40};
    plan.replications = 3000;
    plan.sampler = SamplerChoice::parse("response");
    ExactVsMcResult res = exact_vs_mc(plan);
    CHECK_THAT(res.sel_sum, WithinAbs(1.0, 1e-6));
    std::uint64_t cells = 0;
    for (size_t i = 0; i < res.sel_freq.size(); ++i) cells += res.sel_freq[i].count;
    CHECK(cells == plan.replications);
}

TEST_CASE("sweep smoke run produces coherent cells") {
    ExperimentPlan plan = base_plan();
    plan.gamma_active = {3};
    plan.gamma_points = 3;
    plan.replications = 3000;
    plan.n_ladder = {100, 400};
    SweepResult res = nonuniformity_sweep(plan);
    CHECK(res.qstar == 3);
    CHECK(res.delta0 > 0.0);
    CHECK(res.bound > 0.04);
    CHECK(res.cells.size() == 6);
    for (const auto& c : res.cells) {
        CHECK(c.err_uncond.freq >= 0.0);
        CHECK(c.err_uncond.freq <= 1.0);
        if (!c.err_cond.empty) CHECK(c.cell_freq.count == c.err_cond.cell);
    }
    Table summary = res.summary_table();
    CHECK(summary.rows.size() == 2);
    Table detail = res.detail_table();
    CHECK(detail.rows.size() == 6);
}

TEST_CASE("consistency curve runs at the base point only") {
    ExperimentPlan plan = base_plan();
    plan.replications = 3000;
    plan.n_ladder = {100, 400};
    plan.exceedance_delta = 0.05;
    SweepResult res = consistency_curve(plan);
    CHECK(res.delta0 == 0.05);
    CHECK(res.cells.size() == 2); // one gamma point per n
}

TEST_CASE("conditional sweep at an order below the top correlated one") {
    // conditioning on a mid-order cell while perturbing along the deepest
    // correlated coordinate: the sweep engine must accept an explicit
    // evaluation order and produce a positive oscillation threshold there
    ExperimentPlan plan = base_plan();
    Eigen::VectorXd theta(3);
    theta << 1.0, 0.2, 0.0;
    plan.base = ParameterPoint(theta, 1.0);
    plan.gamma_active = {3};
    plan.gamma_points = 3;
    plan.p_eval = 2;
    plan.replications = 3000;
    SweepResult res = nonuniformity_sweep(plan);
    CHECK(res.p_eval == 2);
    CHECK(res.qstar == 3);
    CHECK(res.delta0 > 0.0);
    bool any_cell = false;
    for (const auto& c : res.cells) any_cell = any_cell || !c.err_cond.empty;
    CHECK(any_cell);
}

TEST_CASE("top-order selection stays above the two-sided tail floor") {
    // at the top order the probe minimum cannot fall below the selection
    // probability at a centered last coordinate
    ExperimentPlan plan = base_plan();
    Eigen::VectorXd theta(3);
    theta << 1.0, 0.4, 0.0;
    plan.base = ParameterPoint(theta, 1.0);
    plan.probe_order = 3;
    plan.replications = 20000;
    plan.n_ladder = {400};
    SelectionProbeResult res = selection_probability_probe(plan, 'a');
    const double floor = 0.049995790296440868; // 2(1 - Phi(1.96))
    const double se = std::sqrt(floor * (1 - floor) / 20000.0);
    CHECK(res.rows.front().min_freq >= floor - 3.0 * se);
}

TEST_CASE("selection probability probe grids respect their radii") {
    ExperimentPlan plan = base_plan();
    plan.n_ladder = {100, 400};
    plan.replications = 3000;
    plan.probe_order = 2;
    Eigen::VectorXd theta(3);
    theta << 1.0, 0.4, 0.0;
    plan.base = ParameterPoint(theta, 1.0);
    SelectionProbeResult a = selection_probability_probe(plan, 'a');
    CHECK(a.rows.size() == 2);
    for (const auto& row : a.rows) {
        CHECK(row.min_freq > 0.0);
        CHECK(row.min_freq <= 1.0);
    }
    SelectionProbeResult b = selection_probability_probe(plan, 'b');
    CHECK(b.rows[0].radius > b.rows[1].radius * 1.3);
}

TEST_CASE("threshold selector reproduces its own events exactly") {
    ExperimentPlan plan = base_plan();
    Eigen::VectorXd theta(3);
    theta << 1.0, 0.5, 0.0;
    plan.base = ParameterPoint(theta, 1.0);
    plan.subsets = SubsetFamily::all_subsets(3, 2.0);
    plan.r_star = {1, 1, 0};
    plan.selector = "threshold";
    plan.replications = 2000;
    plan.t_grid = {v1(-0.5), v1(0.5)};
    ReductionResult res = reduction_run(plan);
    for (const auto& row : res.rows) {
        CHECK(row.symdiff_full.count == 0);
        CHECK(row.symdiff_star.count == 0);
    }
}

TEST_CASE("information-criterion selector drifts toward the threshold rule") {
    ExperimentPlan plan = base_plan();
    Eigen::VectorXd theta(3);
    theta << 1.0, 0.5, 0.0;
    plan.base = ParameterPoint(theta, 1.0);
    plan.subsets = SubsetFamily::all_subsets(3, 2.0);
    plan.r_star = {1, 1, 0};
    plan.selector = "ic";
    plan.replications = 8000;
    plan.n_ladder = {100, 1600};
    plan.t_grid = {v1(0.0)};
    ReductionResult res = reduction_run(plan);
    CHECK(res.rows[1].symdiff_full.freq < res.rows[0].symdiff_full.freq + 0.01);
    CHECK(res.rows[1].symdiff_full.freq < 0.05);
    // deliberately wrong threshold: the correspondence must fail
    plan.threshold_c = 3.0;
    ReductionResult bad = reduction_run(plan);
    CHECK(bad.rows[1].symdiff_full.freq > 0.05);
}

TEST_CASE("parallel_for covers every index exactly once") {
    const std::uint64_t N = 20000;
    std::vector<int> hits(N, 0);
    parallel_for(N, 2, [&](std::uint64_t i) { hits[i] += 1; });
    CHECK(std::count(hits.begin(), hits.end(), 1) == static_cast<long>(N));
}

TEST_CASE("ledger csv serialization carries the schema header") {
    ReplicationLedger ledger;
    LedgerRow row;
    row.rep = 0;
    row.stream_key = 42;
    row.selected = 2;
    row.sigma_hat = 1.25;
    row.scaled_dev = v1(0.5);
    ledger.rows.push_back(row);
    Table t = ledger.to_table("pmse.ledger.v1", 1, 0, 0);
    std::ostringstream out;
    t.write(out);
    const std::string text = out.str();
    CHECK(text.rfind("# schema: pmse.ledger.v1", 0) == 0);
    CHECK(text.find("rep,stream_key,selected,sigma_hat,dev1") != std::string::npos);
}
