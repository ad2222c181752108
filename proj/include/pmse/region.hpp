#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "pmse/errors.hpp"
#include "pmse/quadrature.hpp"
#include "pmse/special.hpp"

namespace pmse {

// Quadrature settings shared by the distribution evaluators.
struct QuadratureConfig {
    double rel_tol = 1e-8;
    double abs_tol = 1e-12;
    double s_quantile_eps = 1e-10; // scale-integral domain truncation
    int s_nodes_init = 16;
    int s_nodes_max = 4096;
    int gl_1d = 200;   // one-dimensional Gaussian integrals
    int gl_outer = 96; // nested rule, outer axis
    int gl_inner = 64; // nested rule, inner axis
    std::uint64_t qmc_points = 1ull << 16;
    std::uint64_t master_seed = 0x1905CDF5EEDull;
    bool check_boundary_identity = true;
    double gauss_tail = 8.2; // standard-normal truncation for node placement

    void validate() const {
        if (!(rel_tol > 0.0) || !(abs_tol > 0.0) || !(s_quantile_eps > 0.0))
            throw config_error("QuadratureConfig: tolerances must be positive");
        if (s_nodes_init < 8 || gl_1d < 8 || gl_outer < 8 || gl_inner < 8)
            throw config_error("QuadratureConfig: node counts must be >= 8");
        if (qmc_points < 8) throw config_error("QuadratureConfig: qmc_points must be >= 8");
    }
};

// Discretization of E[ 1{R v <= tau} f(u0 + g'v) ] for v ~ N(0, cov):
// points carry the value of the linear functional g'v and a weight that
// already includes the Gaussian mass, so any integrand f can be summed over
// the rule.  `prob` is the plain region probability (f == 1).
struct WeightedRegionRule {
    std::vector<double> weights;
    std::vector<double> u;
    double prob = 0.0;
    bool prob_exact = false;
    bool empty = false;
    std::string method;

    template <class F>
    double expect(const F& f) const {
        double sum = 0.0;
        for (size_t i = 0; i < weights.size(); ++i) sum += weights[i] * f(u[i]);
        return sum;
    }
};

namespace detail {

struct HalfLine {
    double lo = -std::numeric_limits<double>::infinity();
    double hi = std::numeric_limits<double>::infinity();
    bool empty = false;

    void add_upper(double x) { hi = std::min(hi, x); }
    void add_lower(double x) { lo = std::max(lo, x); }
    void clip(double a, double b) {
        lo = std::max(lo, a);
        hi = std::min(hi, b);
    }
    bool degenerate() const { return !(lo < hi); }
};

// Splits the rows of (R, tau) into bounds on one coordinate given the other
// coordinates' contribution.
inline HalfLine coordinate_interval(const Eigen::MatrixXd& R, const Eigen::VectorXd& tau,
                                    int coord, const Eigen::VectorXd& partial,
                                    double row_tol) {
    HalfLine iv;
    for (int i = 0; i < R.rows(); ++i) {
        const double a = R(i, coord);
        double rhs = tau(i);
        for (int j = 0; j < R.cols(); ++j)
            if (j != coord) rhs -= R(i, j) * partial(j);
        if (std::abs(a) <= row_tol) {
            if (rhs < 0.0) iv.empty = true;
        } else if (a > 0.0) {
            iv.add_upper(rhs / a);
        } else {
            iv.add_lower(rhs / a);
        }
    }
    return iv;
}

} // namespace detail

// Builds the rule in whitened coordinates.  `orthant` marks regions of the
// componentwise form v <= tau, for which the whitened constraint matrix is
// lower triangular and a sequential (separation-of-variables) transform
// keeps the integrand smooth for quasi-Monte Carlo evaluation.
inline WeightedRegionRule build_region_rule(const Eigen::MatrixXd& cov,
                                            const Eigen::MatrixXd& R_in,
                                            const Eigen::VectorXd& tau_in,
                                            const Eigen::RowVectorXd& functional,
                                            const QuadratureConfig& cfg,
                                            std::uint64_t qmc_seed, bool orthant) {
    const int e = static_cast<int>(cov.rows());
    WeightedRegionRule rule;

    // drop identically-zero constraint rows, checking feasibility
    std::vector<int> keep;
    const double scale = std::max(1.0, R_in.cwiseAbs().maxCoeff());
    for (int i = 0; i < R_in.rows(); ++i) {
        if (R_in.row(i).cwiseAbs().maxCoeff() <= 1e-14 * scale) {
            if (tau_in(i) < 0.0) {
                rule.empty = true;
                rule.method = "empty";
                return rule;
            }
        } else {
            keep.push_back(i);
        }
    }
    Eigen::MatrixXd R(keep.size(), e);
    Eigen::VectorXd tau(keep.size());
    for (size_t i = 0; i < keep.size(); ++i) {
        R.row(i) = R_in.row(keep[i]);
        tau(i) = tau_in(keep[i]);
    }

    Eigen::LLT<Eigen::MatrixXd> llt(cov);
    if (llt.info() != Eigen::Success)
        throw numeric_error("build_region_rule: covariance not positive definite", 0, 0);
    Eigen::MatrixXd L = llt.matrixL();
    Eigen::MatrixXd Rt = R * L;
    Eigen::RowVectorXd ft = functional * L;
    const double z8 = cfg.gauss_tail;

    if (R.rows() == 0) {
        // unconstrained: reduces to a one-dimensional Gaussian in g'v
        const double sd = ft.norm();
        rule.method = "gauss-free";
        rule.prob = 1.0;
        rule.prob_exact = true;
        const auto& gl = GaussLegendre::get(cfg.gl_1d);
        const double mid = 0.0, half = z8;
        for (int i = 0; i < cfg.gl_1d; ++i) {
            const double x = mid + half * gl.nodes[i];
            rule.weights.push_back(gl.weights[i] * half * norm_pdf(x));
            rule.u.push_back(sd * x);
        }
        return rule;
    }

    if (e == 1) {
        detail::HalfLine iv = detail::coordinate_interval(Rt, tau, 0,
                                                          Eigen::VectorXd::Zero(1), 1e-14 * scale);
        iv.clip(-z8, z8);
        if (iv.empty || iv.degenerate()) {
            rule.empty = true;
            rule.method = "empty";
            return rule;
        }
        rule.method = "gl-1d";
        rule.prob = norm_cdf(iv.hi) - norm_cdf(iv.lo);
        rule.prob_exact = true;
        const auto& gl = GaussLegendre::get(cfg.gl_1d);
        const double mid = 0.5 * (iv.lo + iv.hi), half = 0.5 * (iv.hi - iv.lo);
        for (int i = 0; i < cfg.gl_1d; ++i) {
            const double x = mid + half * gl.nodes[i];
            rule.weights.push_back(gl.weights[i] * half * norm_pdf(x));
            rule.u.push_back(ft(0) * x);
        }
        return rule;
    }

    if (e == 2) {
        // outer coordinate constrained by rows not involving the inner one
        rule.method = "gl-2d";
        const double row_tol = 1e-13 * std::max(1.0, Rt.cwiseAbs().maxCoeff());
        detail::HalfLine outer;
        for (int i = 0; i < Rt.rows(); ++i) {
            if (std::abs(Rt(i, 1)) <= row_tol) {
                const double a = Rt(i, 0);
                if (std::abs(a) <= row_tol) {
                    if (tau(i) < 0.0) outer.empty = true;
                } else if (a > 0.0) {
                    outer.add_upper(tau(i) / a);
                } else {
                    outer.add_lower(tau(i) / a);
                }
            }
        }
        outer.clip(-z8, z8);
        if (outer.empty || outer.degenerate()) {
            rule.empty = true;
            rule.method = "empty";
            return rule;
        }
        const auto& glo = GaussLegendre::get(cfg.gl_outer);
        const auto& gli = GaussLegendre::get(cfg.gl_inner);
        const double mid = 0.5 * (outer.lo + outer.hi), half = 0.5 * (outer.hi - outer.lo);
        double prob = 0.0;
        Eigen::VectorXd partial(2);
        for (int i = 0; i < cfg.gl_outer; ++i) {
            const double x1 = mid + half * glo.nodes[i];
            const double w1 = glo.weights[i] * half * norm_pdf(x1);
            partial << x1, 0.0;
            detail::HalfLine inner;
            for (int r = 0; r < Rt.rows(); ++r) {
                const double a = Rt(r, 1);
                if (std::abs(a) <= row_tol) continue;
                const double rhs = tau(r) - Rt(r, 0) * x1;
                if (a > 0.0)
                    inner.add_upper(rhs / a);
                else
                    inner.add_lower(rhs / a);
            }
            inner.clip(-z8, z8);
            if (inner.degenerate()) continue;
            const double imid = 0.5 * (inner.lo + inner.hi);
            const double ihalf = 0.5 * (inner.hi - inner.lo);
            for (int j = 0; j < cfg.gl_inner; ++j) {
                const double x2 = imid + ihalf * gli.nodes[j];
                const double w = w1 * gli.weights[j] * ihalf * norm_pdf(x2);
                rule.weights.push_back(w);
                rule.u.push_back(ft(0) * x1 + ft(1) * x2);
                prob += w;
            }
        }
        rule.prob = prob;
        if (rule.weights.empty()) rule.empty = true;
        return rule;
    }

    // e >= 3: quasi-Monte Carlo
    const std::uint64_t N = cfg.qmc_points;
    HaltonRule halton(e, qmc_seed);
    std::vector<double> uni(e);
    Eigen::VectorXd x(e);
    double prob = 0.0;
    if (orthant) {
        // sequential conditioning through the triangular constraint
        rule.method = "qmc-seq";
        for (std::uint64_t i = 0; i < N; ++i) {
            halton.point(i, uni);
            double w = 1.0;
            bool dead = false;
            for (int j = 0; j < e && !dead; ++j) {
                double bound = tau(j);
                for (int l = 0; l < j; ++l) bound -= Rt(j, l) * x(l);
                if (Rt(j, j) <= 0.0)
                    throw numeric_error("build_region_rule: non-triangular orthant", 0, 0);
                const double beta = bound / Rt(j, j);
                const double pj = norm_cdf(beta);
                if (pj <= 1e-300) {
                    dead = true;
                    break;
                }
                const double q = std::min(uni[j] * pj, pj * (1.0 - 1e-16));
                x(j) = normal_quantile(std::max(q, 1e-300));
                w *= pj;
            }
            if (dead) continue;
            rule.weights.push_back(w / static_cast<double>(N));
            rule.u.push_back(ft.dot(x));
            prob += w / static_cast<double>(N);
        }
    } else {
        rule.method = "qmc";
        for (std::uint64_t i = 0; i < N; ++i) {
            halton.point(i, uni);
            for (int j = 0; j < e; ++j) x(j) = normal_quantile(uni[j]);
            bool inside = true;
            for (int r = 0; r < Rt.rows() && inside; ++r)
                inside = (Rt.row(r).dot(x) <= tau(r));
            if (!inside) continue;
            rule.weights.push_back(1.0 / static_cast<double>(N));
            rule.u.push_back(ft.dot(x));
            prob += 1.0 / static_cast<double>(N);
        }
    }
    rule.prob = prob;
    if (rule.weights.empty()) rule.empty = true;
    return rule;
}

// Plain Gaussian probability of {R v <= tau}, exact in one dimension.
inline double gaussian_region_prob(const Eigen::MatrixXd& cov, const Eigen::MatrixXd& R,
                                   const Eigen::VectorXd& tau, const QuadratureConfig& cfg,
                                   std::uint64_t qmc_seed, bool orthant) {
    WeightedRegionRule rule = build_region_rule(
        cov, R, tau, Eigen::RowVectorXd::Zero(cov.cols()), cfg, qmc_seed, orthant);
    return rule.empty ? 0.0 : rule.prob;
}

} // namespace pmse
