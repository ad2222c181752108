// Acceptance suite: one test case per shipped criterion, each printing a
// single pass/fail summary line.  Criteria that share a Monte Carlo run
// reuse one cached result.

#include <catch2/catch_amalgamated.hpp>

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <string>

#include "pmse/config.hpp"
#include "pmse/cond_dist.hpp"
#include "pmse/estimators.hpp"
#include "pmse/montecarlo.hpp"

using namespace pmse;

namespace {

std::string config_dir() {
    if (const char* env = std::getenv("PMSE_CONFIG_DIR")) return env;
    return "configs";
}

json load_config(const std::string& name) {
    return load_json(config_dir() + "/" + name);
}

ExperimentPlan plan_from(const std::string& name) {
    return parse_plan(load_config(name));
}

void report(int criterion, const std::string& what, bool pass, const std::string& detail) {
    std::printf("criterion %2d %-38s %s  (%s)\n", criterion, what.c_str(),
                pass ? "PASS" : "FAIL", detail.c_str());
    std::fflush(stdout);
}

Eigen::VectorXd v1(double x) {
    Eigen::VectorXd t(1);
    t << x;
    return t;
}

// criteria 1 and 2 share one exact-vs-Monte-Carlo run
struct Crit1Data {
    ExactVsMcResult res;
    double seconds = 0.0;
};

const Crit1Data& crit1_run() {
    static Crit1Data data = [] {
        Crit1Data d;
        ExperimentPlan plan = plan_from("criterion01_exact_vs_mc.json");
        const auto start = std::chrono::steady_clock::now();
        d.res = exact_vs_mc(plan);
        d.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start)
                        .count();
        return d;
    }();
    return data;
}

// criteria 7 and 8 share one non-uniformity sweep
const SweepResult& sweep_run() {
    static SweepResult res = nonuniformity_sweep(plan_from("criterion07_nonuniformity.json"));
    return res;
}

} // namespace

TEST_CASE("criterion 1: exact vs Monte Carlo conditional cdf") {
    const Crit1Data& d = crit1_run();
    double max_z = 0.0;
    size_t cells = 0;
    for (const auto& c : d.res.cells) {
        max_z = std::max(max_z, c.z_score);
        ++cells;
    }
    const bool pass = cells >= 10 && max_z <= 3.0 && d.seconds <= 300.0;
    char detail[128];
    std::snprintf(detail, sizeof(detail), "max|z| = %.2f over %zu cells, %.1f s", max_z,
                  cells, d.seconds);
    report(1, "exact-vs-MC conditional cdf", pass, detail);
    CHECK(cells >= 10);
    CHECK(max_z <= 3.0);
    CHECK(d.seconds <= 300.0);
}

TEST_CASE("criterion 2: selection probabilities") {
    ExperimentPlan plan = plan_from("criterion02_selection_probs.json");
    // identical run to criterion 1 (same seed and design); reuse it
    const ExactVsMcResult& res = crit1_run().res;
    double max_z = 0.0;
    for (size_t i = 0; i < res.sel_exact.size(); ++i) {
        const double se = std::max(res.sel_freq[i].se, 1e-12);
        max_z = std::max(max_z, std::abs(res.sel_exact[i] - res.sel_freq[i].freq) / se);
    }
    const double sum_gap = std::abs(res.sel_sum - 1.0);
    const bool pass = max_z <= 3.0 && sum_gap <= 1e-6;
    char detail[128];
    std::snprintf(detail, sizeof(detail), "max|z| = %.2f, |sum-1| = %.2e", max_z, sum_gap);
    report(2, "selection probabilities", pass, detail);
    CHECK(max_z <= 3.0);
    CHECK(sum_gap <= 1e-6);
    CHECK(plan.nested.max_order() == 3);
}

TEST_CASE("criterion 3: selection-probability floor ladder") {
    ExperimentPlan plan = plan_from("criterion03_floor_ladder.json");
    const double bound = asymptotic_overselection_prob(plan.nested, 3);
    std::vector<double> gaps;
    for (int n : plan.n_ladder) {
        DesignMatrix d = plan.make_design(n);
        NestedModelDistribution dist(d, plan.target, plan.nested, plan.base, plan.quad);
        gaps.push_back(std::abs(dist.selection_probability(3).value - bound));
    }
    bool decreasing = true;
    for (size_t i = 1; i < gaps.size(); ++i)
        decreasing = decreasing && gaps[i] < gaps[i - 1] + 1e-7;
    const bool pass = decreasing && gaps.back() <= 0.01;
    char detail[160];
    std::snprintf(detail, sizeof(detail), "gaps %.2e -> %.2e, floor %.4f", gaps.front(),
                  gaps.back(), bound);
    report(3, "overselection floor ladder", pass, detail);
    CHECK(decreasing);
    CHECK(gaps.back() <= 0.01);
}

TEST_CASE("criterion 4: finite-sample to limit convergence ladder") {
    ExperimentPlan plan = plan_from("criterion04_limit_ladder.json");
    REQUIRE(plan.gamma_fixed.has_value());
    const Eigen::VectorXd gamma = *plan.gamma_fixed;
    const int p = plan.p_eval;
    AsymptoticContext ctx(plan.Q, plan.target, plan.nested, plan.base.sigma);
    // theta is inside the smaller candidate model, so the conditioned order
    // strictly overfits
    REQUIRE(order_of(plan.base.theta) < p);
    std::vector<double> sups;
    for (int n : plan.n_ladder) {
        DesignMatrix d = plan.make_design(n);
        Eigen::VectorXd vartheta =
            plan.base.theta + gamma / std::sqrt(static_cast<double>(n));
        NestedModelDistribution dist(d, plan.target, plan.nested,
                                     ParameterPoint(vartheta, plan.base.sigma), plan.quad);
        double sup = 0.0;
        for (int i = 0; i < 21; ++i) {
            const double t = -4.0 + 8.0 * i / 20.0;
            const double fin = dist.conditional_cdf(p, v1(t)).value;
            const double lim =
                limit_cdf(ctx, p, gamma, OrderClass::overfit, v1(t), plan.quad).value;
            sup = std::max(sup, std::abs(fin - lim));
        }
        sups.push_back(sup);
    }
    bool decreasing = true;
    for (size_t i = 1; i < sups.size(); ++i)
        decreasing = decreasing && sups[i] < sups[i - 1] + 1e-6;
    const bool pass = decreasing && sups.back() < sups.front();
    char detail[160];
    std::snprintf(detail, sizeof(detail), "sup gaps %.3e -> %.3e", sups.front(), sups.back());
    report(4, "limit-convergence ladder", pass, detail);
    CHECK(decreasing);
    CHECK(sups.back() < sups.front());
}

TEST_CASE("criterion 5: quadrature vs joint-normal oracle") {
    ExperimentPlan plan = plan_from("criterion05_oracle_crosscheck.json");
    Rng rng(mix_key({plan.master_seed, 0x05u}));
    double max_z = 0.0;
    int done = 0;
    for (int i = 0; i < 10; ++i) {
        // random well-conditioned unit-diagonal Gram matrix
        Eigen::Matrix3d r;
        for (int a = 0; a < 3; ++a)
            for (int b = 0; b < 3; ++b) r(a, b) = rng.normal();
        Eigen::Matrix3d q = r.transpose() * r + 3.0 * Eigen::Matrix3d::Identity();
        Eigen::Vector3d dinv = q.diagonal().cwiseSqrt().cwiseInverse();
        q = dinv.asDiagonal() * q * dinv.asDiagonal();

        const int k = 1 + (i % 2);
        Eigen::MatrixXd a(k, 3);
        for (int row = 0; row < k; ++row)
            for (int col = 0; col < 3; ++col) a(row, col) = rng.normal();
        const double sigma = 0.6 + 0.8 * rng.uniform01();
        const double c2 = 1.6 + 0.6 * rng.uniform01();
        const double c3 = 1.6 + 0.6 * rng.uniform01();
        NestedFamily fam(1, 3, {c2, c3});
        AsymptoticContext ctx(q, TargetMap(a), fam, sigma);
        Eigen::VectorXd gamma(3), t(k);
        for (int j = 0; j < 3; ++j) gamma(j) = 2.0 * (rng.uniform01() - 0.5);
        for (int j = 0; j < k; ++j) t(j) = 1.5 * (rng.uniform01() - 0.3);
        const OrderClass cls = (i % 2 == 0) ? OrderClass::tight : OrderClass::overfit;
        const int p = 2 + (i % 2);
        CdfValue quad = limit_cdf(ctx, p, gamma, cls, t, plan.quad);
        McValue mc = limit_cdf_mc(ctx, p, gamma, cls, t, mix_key({plan.master_seed, (std::uint64_t)i}),
                                  plan.replications);
        const double z = std::abs(quad.value - mc.value) / std::max(mc.se, 1e-9);
        max_z = std::max(max_z, z);
        ++done;
    }
    const bool pass = done == 10 && max_z <= 3.0;
    char detail[96];
    std::snprintf(detail, sizeof(detail), "max|z| = %.2f over %d queries", max_z, done);
    report(5, "limit quadrature vs oracle", pass, detail);
    CHECK(done == 10);
    CHECK(max_z <= 3.0);
}

TEST_CASE("criterion 6: estimator consistency curve") {
    ExperimentPlan plan = plan_from("criterion06_consistency.json");
    SweepResult res = consistency_curve(plan);
    std::vector<double> errs;
    for (const auto& c : res.cells) errs.push_back(c.err_uncond.freq);
    bool decreasing = true;
    for (size_t i = 1; i < errs.size(); ++i)
        decreasing = decreasing && errs[i] < errs[i - 1] + 2.0 * res.cells[i].err_uncond.se;
    const bool pass = decreasing && errs.back() <= 0.05;
    char detail[160];
    std::snprintf(detail, sizeof(detail), "error freq %.4f -> %.4f at delta %.2f",
                  errs.front(), errs.back(), res.delta0);
    report(6, "consistency curve", pass, detail);
    CHECK(decreasing);
    CHECK(errs.back() <= 0.05);
}

TEST_CASE("criterion 7: non-uniformity of the unconditional error") {
    const SweepResult& res = sweep_run();
    const double floor_frac = 0.8 * res.bound;
    bool all_above = true;
    std::string sups;
    for (int n : res.ladder) {
        const double s = res.sup_uncond(n);
        all_above = all_above && s >= floor_frac;
        char buf[32];
        std::snprintf(buf, sizeof(buf), "%.3f ", s);
        sups += buf;
    }
    char detail[192];
    std::snprintf(detail, sizeof(detail), "sup rows [%s] vs 0.8 x bound = %.4f, delta0 = %.3f",
                  sups.c_str(), floor_frac, res.delta0);
    report(7, "worst-case error floor", all_above, detail);
    CHECK(res.qstar == 3);
    CHECK(all_above);
}

TEST_CASE("criterion 8: non-uniformity of the conditional error") {
    const SweepResult& res = sweep_run();
    const double final_sup = res.sup_cond(res.ladder.back());
    const bool pass = final_sup >= 0.9;
    char detail[96];
    std::snprintf(detail, sizeof(detail), "conditional sup at n=%d is %.3f",
                  res.ladder.back(), final_sup);
    report(8, "conditional worst-case error", pass, detail);
    CHECK(final_sup >= 0.9);
}

TEST_CASE("criterion 9: orthogonal escape hatch") {
    ExperimentPlan plan = plan_from("criterion09_orthogonal.json");
    OrthogonalEscapeResult res = orthogonal_escape(plan);
    bool shrinking = true;
    for (size_t i = 1; i < res.rows.size(); ++i)
        shrinking = shrinking &&
                    res.rows[i].sup_freq <= res.rows[i - 1].sup_freq + 2.0 * res.rows[i].max_se + 1e-3;
    const bool pass = shrinking && res.rows.back().sup_freq <= 0.05;
    char detail[160];
    std::snprintf(detail, sizeof(detail), "sup exceedance %.4f -> %.4f",
                  res.rows.front().sup_freq, res.rows.back().sup_freq);
    report(9, "orthogonal plug-in adequacy", pass, detail);
    CHECK(shrinking);
    CHECK(res.rows.back().sup_freq <= 0.05);
}

TEST_CASE("criterion 10: threshold correspondence of the subset selector") {
    ExperimentPlan plan = plan_from("criterion10_probe24.json");
    ReductionResult res = reduction_run(plan);
    const auto& last = res.rows.back();
    const bool symdiff_ok = last.symdiff_full.freq <= 0.02 && last.symdiff_star.freq <= 0.02;
    bool sup_decreasing = last.sup_dev_full < res.rows.front().sup_dev_full &&
                          last.sup_dev_star < res.rows.front().sup_dev_star;
    for (size_t i = 1; i < res.rows.size(); ++i) {
        const double slack = 0.01;
        sup_decreasing = sup_decreasing &&
                         res.rows[i].sup_dev_full <= res.rows[i - 1].sup_dev_full + slack &&
                         res.rows[i].sup_dev_star <= res.rows[i - 1].sup_dev_star + slack;
    }
    const bool pass = symdiff_ok && sup_decreasing;
    char detail[192];
    std::snprintf(detail, sizeof(detail),
                  "symdiff (%.4f, %.4f) at n=%d; sup dev %.3f/%.3f -> %.3f/%.3f",
                  last.symdiff_full.freq, last.symdiff_star.freq, last.n,
                  res.rows.front().sup_dev_full, res.rows.front().sup_dev_star,
                  last.sup_dev_full, last.sup_dev_star);
    report(10, "subset-selector correspondence", pass, detail);
    CHECK(symdiff_ok);
    CHECK(sup_decreasing);
}

TEST_CASE("criterion 11: selection probability over shrinking neighborhoods") {
    ExperimentPlan plan = plan_from("criterion11_selprobe.json");
    SelectionProbeResult a = selection_probability_probe(plan, 'a');
    bool floor_ok = true;
    for (const auto& row : a.rows) floor_ok = floor_ok && row.min_freq >= 0.5 * a.rows.front().min_freq;
    SelectionProbeResult b = selection_probability_probe(plan, 'b');
    const double decay = b.rows.back().min_freq;
    const bool decay_ok = decay <= 0.2 * b.rows.front().min_freq;
    const bool pass = floor_ok && decay_ok;
    char detail[160];
    std::snprintf(detail, sizeof(detail),
                  "bounded-radius min %.3f..%.3f; growing-radius min %.3f -> %.3f",
                  a.rows.front().min_freq, a.rows.back().min_freq, b.rows.front().min_freq,
                  decay);
    report(11, "neighborhood selection probabilities", pass, detail);
    CHECK(floor_ok);
    CHECK(decay_ok);
}

TEST_CASE("criterion 12: invariant suite") {
    json cfg = load_config("criterion12_invariants.json");
    ExperimentPlan plan = parse_plan(cfg);
    bool ok = true;
    std::string sub;

    // interval-probability conventions
    const double inf = std::numeric_limits<double>::infinity();
    ok = ok && delta_prob(1.0, inf, 5.0) == 0.0 && delta_prob(1.0, -inf, 5.0) == 0.0;
    ok = ok && delta_prob(0.0, 0.5, 1.0) == 1.0 && delta_prob(0.0, 2.0, 1.0) == 0.0;
    Rng rng(7);
    for (int i = 0; i < 100 && ok; ++i) {
        const double s = 2.0 * rng.uniform01(), aa = 6.0 * (rng.uniform01() - 0.5),
                     bb = 4.0 * rng.uniform01();
        ok = ok && delta_prob(s, aa, bb) == delta_prob(s, -aa, bb);
    }
    if (!ok) sub += "interval-conventions ";

    // conditional c.d.f. monotonicity and limits on the shipped design
    DesignMatrix d = plan.make_design(plan.n_ladder.front());
    NestedModelDistribution dist(d, plan.target, plan.nested, plan.base, plan.quad);
    bool mono_ok = true;
    for (int p = 1; p <= 3 && mono_ok; ++p) {
        double prev = -1.0;
        for (double t = -5.0; t <= 5.01; t += 1.0) {
            const double v = dist.conditional_cdf(p, v1(t)).value;
            mono_ok = mono_ok && v >= prev - 1e-9;
            prev = v;
        }
        mono_ok = mono_ok && dist.conditional_cdf(p, v1(20.0)).value >= 0.999;
        mono_ok = mono_ok && dist.conditional_cdf(p, v1(-20.0)).value <= 0.001;
    }
    if (!mono_ok) sub += "cdf-monotonicity ";
    ok = ok && mono_ok;

    // variance-representation equivalence on three designs
    std::vector<Eigen::MatrixXd> designs{plan.Q};
    for (const auto& jq : cfg.at("invariants").at("extra_Q"))
        designs.push_back(detail::parse_matrix(jq, "invariants.extra_Q"));
    bool prop_ok = true;
    for (const auto& q : designs) {
        for (int p = 1; p <= 2; ++p) {
            bool uncorr = true;
            for (int r = p + 1; r <= 3; ++r)
                uncorr = uncorr && projection_quantities(q, plan.target, r)
                                           .C.cwiseAbs()
                                           .maxCoeff() < 1e-10;
            Eigen::MatrixXd lead = Eigen::MatrixXd::Zero(1, 1), full = lead;
            for (int r = 1; r <= 3; ++r) {
                ProjectionQuantities pq = projection_quantities(q, plan.target, r);
                Eigen::MatrixXd term = pq.C * pq.C.transpose() / pq.xi2;
                if (r <= p) lead += term;
                full += term;
            }
            const bool equal = (lead - full).cwiseAbs().maxCoeff() < 1e-10;
            prop_ok = prop_ok && (equal == uncorr);
        }
    }
    if (!prop_ok) sub += "variance-representation ";
    ok = ok && prop_ok;

    // coefficient-variance split identity
    bool zeta_ok = true;
    for (const auto& q : designs)
        for (int p = 1; p <= 3; ++p) {
            ProjectionQuantities pq = projection_quantities(q, plan.target, p);
            zeta_ok = zeta_ok && std::abs(pq.zeta2 + pq.b.dot(pq.C) - pq.xi2) <=
                                     1e-10 * std::max(1.0, pq.xi2);
        }
    if (!zeta_ok) sub += "variance-split ";
    ok = ok && zeta_ok;

    // floor-order identity between the two evaluation routes: the
    // constructor-default cross-check throws on violation
    bool floor_ok = true;
    try {
        const double direct = dist.conditional_cdf(1, v1(0.7)).value;
        const double shift =
            std::sqrt(static_cast<double>(d.n)) *
            (plan.target.A * (eta_vector(d.gram, plan.base.theta, 1) - plan.base.theta))(0);
        const double sd = plan.base.sigma * std::sqrt(1.0 / d.gram(0, 0));
        floor_ok = std::abs(direct - norm_cdf((0.7 - shift) / sd)) < 1e-7;
    } catch (const numeric_error&) {
        floor_ok = false;
    }
    if (!floor_ok) sub += "floor-identity ";
    ok = ok && floor_ok;

    report(12, "invariant suite", ok, ok ? "all identities hold" : ("failing: " + sub));
    CHECK(ok);
}
