#pragma once

#include <cmath>
#include <cstring>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "pmse/design.hpp"
#include "pmse/errors.hpp"
#include "pmse/quadrature.hpp"
#include "pmse/region.hpp"
#include "pmse/regression.hpp"
#include "pmse/rng.hpp"
#include "pmse/selection.hpp"
#include "pmse/special.hpp"

namespace pmse {

// A conditional-c.d.f. evaluation: value in [0,1] after clamping, with the
// integration error estimate recorded first and a tag naming the method.
struct CdfValue {
    double value = 0.0;
    double error = 0.0;
    std::string method;
};

inline double clamp_probability(double v, double err) {
    if (v < -err - 1e-9 || v > 1.0 + err + 1e-9)
        throw numeric_error("probability outside [0,1] beyond its error estimate", v, err);
    return std::clamp(v, 0.0, 1.0);
}

// Limit of the probability of selecting order p when the true order is
// strictly below p: 2(1-Phi(c_p)) prod_{q>p} (2 Phi(c_q) - 1).
inline double asymptotic_overselection_prob(const NestedFamily& family, int p) {
    const int P = family.max_order();
    if (p <= family.min_order || p > P)
        throw config_error("asymptotic_overselection_prob: need min_order < p <= P");
    double v = 2.0 * (1.0 - norm_cdf(family.c(p)));
    for (int q = p + 1; q <= P; ++q) v *= 2.0 * norm_cdf(family.c(q)) - 1.0;
    return v;
}

namespace detail {

inline std::uint64_t hash_doubles(std::uint64_t seed, const double* data, size_t count) {
    std::uint64_t h = seed;
    for (size_t i = 0; i < count; ++i) {
        std::uint64_t bits;
        static_assert(sizeof(double) == sizeof(bits));
        std::memcpy(&bits, &data[i], sizeof(bits));
        h = mix_key({h, bits});
    }
    return h;
}

// Chooses the integration space for the measure of A[p] * (p-dim Gaussian):
// the target space when A[p] has full row rank (the measure is nonsingular
// there), otherwise the preimage space, which is always nonsingular.
struct MeasureSpace {
    Eigen::MatrixXd cov;        // integration-space covariance (times sigma^2)
    Eigen::MatrixXd constraints; // region {constraints * v <= tau}
    Eigen::RowVectorXd functional; // u = functional * v reproduces b*z
    bool orthant = false;
    int dim = 0;
};

inline MeasureSpace measure_space(const ProjectionQuantities& pq,
                                  const Eigen::MatrixXd& A, double sigma) {
    const int k = static_cast<int>(A.rows());
    const int p = pq.p;
    Eigen::MatrixXd ap = A.leftCols(p);
    Eigen::JacobiSVD<Eigen::MatrixXd> svd(ap);
    const auto& sv = svd.singularValues();
    int rank = 0;
    for (int i = 0; i < sv.size(); ++i)
        if (sv(i) > 1e-12 * sv(0)) ++rank;
    MeasureSpace out;
    if (rank == k) {
        out.cov = sigma * sigma * pq.cov_z;
        out.constraints = Eigen::MatrixXd::Identity(k, k);
        out.functional = pq.b;
        out.orthant = true;
        out.dim = k;
    } else {
        out.cov = sigma * sigma * pq.cov_w;
        out.constraints = ap;
        out.functional = pq.b * ap;
        out.orthant = false;
        out.dim = p;
    }
    return out;
}

} // namespace detail

// ---------------------------------------------------------------------------
// Finite-sample machinery: the conditional law of sqrt(n) A (theta_hat -
// theta) given which order the general-to-specific selector picked.
// ---------------------------------------------------------------------------

class NestedModelDistribution {
public:
    NestedModelDistribution(const DesignMatrix& design, const TargetMap& target,
                            const NestedFamily& family, const ParameterPoint& point,
                            QuadratureConfig quad = {})
        : design_(design), target_(target), family_(family), point_(point), quad_(quad) {
        quad_.validate();
        if (family_.max_order() != design_.P)
            throw config_error("family order does not match design");
        if (point_.theta.size() != design_.P)
            throw config_error("theta length does not match design");
        P_ = design_.P;
        O_ = family_.min_order;
        dof_ = design_.n - design_.P;
        root_n_ = std::sqrt(static_cast<double>(design_.n));
        s_lo_ = chi_scale_quantile(dof_, quad_.s_quantile_eps);
        s_hi_ = chi_scale_quantile(dof_, 1.0 - quad_.s_quantile_eps);
        bias_.assign(P_ + 1, 0.0);
        xi_.assign(P_ + 1, 0.0);
        for (int q = 1; q <= P_; ++q) {
            bias_[q] = root_n_ * eta_coord(design_.gram, point_.theta, q);
            Eigen::MatrixXd sig = design_.gram.topLeftCorner(q, q).llt().solve(
                Eigen::MatrixXd::Identity(q, q));
            xi_[q] = std::sqrt(sig(q - 1, q - 1));
        }
    }

    int min_order() const { return O_; }
    int max_order() const { return P_; }

    // P(selected order == p), a one-dimensional integral over the residual
    // scale.  The factor for the selected order drops out at the family
    // floor where the critical value is zero.
    CdfValue selection_probability(int p) const {
        check_order(p);
        const double sigma = point_.sigma;
        const double a_p = p >= 1 ? bias_[p] : 0.0;
        const double own_scale = p >= 1 ? sigma * xi_[p] : 0.0;
        const double cp = family_.c(p);
        auto integrand = [&](double s) {
            double v = chi_scale_density(dof_, s) *
                       (1.0 - delta_prob(own_scale, a_p, s * cp * sigma * (p >= 1 ? xi_[p] : 1.0)));
            for (int q = p + 1; q <= P_; ++q)
                v *= delta_prob(sigma * xi_[q], bias_[q], s * family_.c(q) * sigma * xi_[q]);
            return v;
        };
        IntegralValue iv = integrate_doubling(integrand, s_lo_, s_hi_, quad_.rel_tol,
                                              quad_.abs_tol, quad_.s_nodes_init,
                                              quad_.s_nodes_max);
        return {clamp_probability(iv.value, iv.error + 2.0 * quad_.s_quantile_eps),
                iv.error + 2.0 * quad_.s_quantile_eps, "gl-doubling"};
    }

    // G(t | p): c.d.f. of the scaled estimator deviation given selection of
    // order p.  At the family floor this is an ordinary Gaussian c.d.f.; at
    // higher orders the selection event reweights the Gaussian measure.
    CdfValue conditional_cdf(int p, const Eigen::VectorXd& t) const {
        check_order(p);
        if (t.size() != target_.k) throw config_error("t has wrong dimension");
        Eigen::VectorXd shift =
            root_n_ * (target_.A * (eta_vector(design_.gram, point_.theta, p) - point_.theta));
        Eigen::VectorXd tau = t - shift;

        if (p == O_) {
            CdfValue base = boundary_cdf(p, tau);
            if (quad_.check_boundary_identity && p >= 1) {
                CdfValue alt = weighted_cdf(p, tau);
                const double tol = 200.0 * (base.error + alt.error) + 1e-6;
                if (std::abs(alt.value - base.value) > tol)
                    throw numeric_error("boundary-order identity violated between the two "
                                        "conditional c.d.f. routes",
                                        base.value, std::abs(alt.value - base.value));
            }
            return base;
        }
        return weighted_cdf(p, tau);
    }

    CdfValue cdf_at_selected(const SelectionOutcome& outcome, const Eigen::VectorXd& t) const {
        if (outcome.order < 0) throw config_error("cdf_at_selected: nested outcome required");
        return conditional_cdf(outcome.order, t);
    }

    const QuadratureConfig& quad() const { return quad_; }

private:
    void check_order(int p) const {
        if (p < O_ || p > P_)
            throw config_error("order outside the candidate family");
    }

    // Gaussian c.d.f. of the restricted estimator (the floor-order case).
    CdfValue boundary_cdf(int p, const Eigen::VectorXd& tau) const {
        if (p == 0) {
            const bool in = (tau.array() >= 0.0).all();
            return {in ? 1.0 : 0.0, 0.0, "point-mass"};
        }
        ProjectionQuantities pq = projection_quantities(design_.gram, target_, p);
        detail::MeasureSpace ms = detail::measure_space(pq, target_.A, point_.sigma);
        const std::uint64_t seed = query_seed(p, tau, 0x12);
        const double prob = gaussian_region_prob(ms.cov, ms.constraints, tau, quad_,
                                                 seed, ms.orthant);
        const double err = ms.dim >= 3 ? qmc_error_estimate() : 1e-12;
        return {clamp_probability(prob, err), err, std::string("gauss-") +
                                                       (ms.dim >= 3 ? "qmc" : "gl")};
    }

    // Selection-weighted Gaussian integral for orders above the floor.
    CdfValue weighted_cdf(int p, const Eigen::VectorXd& tau) const {
        const double sigma = point_.sigma;
        CdfValue selp = selection_probability(p);
        if (selp.value < 1e-10)
            throw numeric_error("conditioning event has numerically zero probability",
                                selp.value, selp.error);
        ProjectionQuantities pq = projection_quantities(design_.gram, target_, p);
        detail::MeasureSpace ms = detail::measure_space(pq, target_.A, sigma);
        WeightedRegionRule rule = build_region_rule(ms.cov, ms.constraints, tau,
                                                    ms.functional, quad_,
                                                    query_seed(p, tau, 0x7e), ms.orthant);
        if (rule.empty)
            return {0.0, selp.error, "empty-region"};

        const double u0 = bias_[p];
        const double cp = family_.c(p);
        const double zeta_scale = sigma * pq.zeta;
        const double own = cp * sigma * xi_[p];
        double numerator = 0.0;
        double num_err = 0.0;
        std::string tag;

        if (pq.zeta > 0.0 || cp <= 0.0) {
            // smooth route: outer scale integral of the rule-weighted factor
            auto psi = [&](double s) {
                const double width = s * own;
                double sum = 0.0;
                for (size_t i = 0; i < rule.weights.size(); ++i)
                    sum += rule.weights[i] *
                           (1.0 - delta_prob(zeta_scale, u0 + rule.u[i], width));
                return sum;
            };
            auto integrand = [&](double s) {
                double v = chi_scale_density(dof_, s) * psi(s);
                for (int q = p + 1; q <= P_; ++q)
                    v *= delta_prob(sigma * xi_[q], bias_[q], s * family_.c(q) * sigma * xi_[q]);
                return v;
            };
            IntegralValue iv = integrate_doubling(integrand, s_lo_, s_hi_, quad_.rel_tol,
                                                  quad_.abs_tol, quad_.s_nodes_init,
                                                  quad_.s_nodes_max);
            numerator = iv.value;
            num_err = iv.error;
            tag = "weighted-" + rule.method;
        } else {
            // perfectly correlated case: the reweighting factor is an
            // indicator in the scale variable, so the scale integral is a
            // cumulative integral split at the per-point root.
            auto base = [&](double s) {
                double v = chi_scale_density(dof_, s);
                for (int q = p + 1; q <= P_; ++q)
                    v *= delta_prob(sigma * xi_[q], bias_[q], s * family_.c(q) * sigma * xi_[q]);
                return v;
            };
            const bool pure_scale = (p == P_); // no product terms: exact c.d.f.
            std::optional<CumulativeIntegral> cum;
            if (!pure_scale) cum.emplace(base, s_lo_, s_hi_, 512, 8);
            for (size_t i = 0; i < rule.weights.size(); ++i) {
                const double s_star = std::abs(u0 + rule.u[i]) / own;
                double mass;
                if (pure_scale)
                    mass = chi_scale_cdf(dof_, std::min(s_star, s_hi_));
                else
                    mass = cum->upto(s_star);
                numerator += rule.weights[i] * mass;
            }
            num_err = 1e-8 * numerator + quad_.s_quantile_eps;
            tag = "split-" + rule.method;
        }

        const double rule_err = ms.dim >= 3 ? qmc_error_estimate() : 1e-10;
        const double err =
            (num_err + rule_err + selp.error * (numerator / selp.value)) / selp.value;
        return {clamp_probability(numerator / selp.value, err + 1e-9), err, tag};
    }

    std::uint64_t query_seed(int p, const Eigen::VectorXd& tau, std::uint64_t salt) const {
        std::uint64_t h = mix_key({quad_.master_seed, static_cast<std::uint64_t>(p), salt,
                                   static_cast<std::uint64_t>(design_.n)});
        return detail::hash_doubles(h, tau.data(), tau.size());
    }

    double qmc_error_estimate() const {
        return 2.0 * std::pow(static_cast<double>(quad_.qmc_points), -0.75);
    }

    const DesignMatrix& design_;
    TargetMap target_;
    NestedFamily family_;
    ParameterPoint point_;
    QuadratureConfig quad_;
    int P_ = 0, O_ = 0;
    double dof_ = 0.0, root_n_ = 0.0, s_lo_ = 0.0, s_hi_ = 0.0;
    std::vector<double> bias_; // sqrt(n) * eta_q(q), q = 1..P
    std::vector<double> xi_;   // xi_{n,q}, q = 1..P
};

// ---------------------------------------------------------------------------
// Large-sample limits under local perturbations theta + gamma / sqrt(n).
// ---------------------------------------------------------------------------

// Whether the conditioned order equals max{p0(theta), min_order} (the
// smallest candidate that is correct for theta) or strictly exceeds it.
// Only the class enters the limit formulas, so the caller declares it.
enum class OrderClass { tight, overfit };

struct AsymptoticContext {
    Eigen::MatrixXd Q;
    TargetMap target;
    NestedFamily family;
    double sigma = 1.0;
    std::vector<double> xi;                  // xi_inf_r, r = 1..P (index r)
    std::vector<Eigen::VectorXd> C;          // C_inf^(r)
    std::vector<ProjectionQuantities> proj;  // full quantities per order

    AsymptoticContext(Eigen::MatrixXd q, TargetMap a, NestedFamily fam, double sg)
        : Q(std::move(q)), target(std::move(a)), family(std::move(fam)), sigma(sg) {
        const int P = static_cast<int>(Q.rows());
        if (family.max_order() != P)
            throw config_error("AsymptoticContext: family order != Q dimension");
        if (!(sigma > 0.0)) throw config_error("AsymptoticContext: sigma must be positive");
        xi.assign(P + 1, 0.0);
        C.resize(P + 1);
        proj.resize(P + 1);
        for (int r = 1; r <= P; ++r) {
            proj[r] = projection_quantities(Q, target, r);
            xi[r] = proj[r].xi;
            C[r] = proj[r].C;
        }
    }

    int P() const { return static_cast<int>(Q.rows()); }

    // Largest order above the floor whose coefficient estimate is
    // asymptotically correlated with the target; -1 if none.
    int largest_correlated_order() const {
        double scale = 0.0;
        for (int q = family.min_order + 1; q <= P(); ++q)
            scale = std::max(scale, C[q].cwiseAbs().maxCoeff());
        for (int q = P(); q > family.min_order; --q)
            if (C[q].cwiseAbs().maxCoeff() > 1e-10 * std::max(1.0, scale)) return q;
        return -1;
    }
};

// Derived quantities of a local perturbation direction gamma.
struct LocalPerturbation {
    Eigen::VectorXd gamma;
    Eigen::VectorXd nu; // nu_r, r = 1..P at indices 0..P-1

    LocalPerturbation(const Eigen::MatrixXd& Q, Eigen::VectorXd g) : gamma(std::move(g)) {
        const int P = static_cast<int>(Q.rows());
        if (gamma.size() != P) throw config_error("LocalPerturbation: bad gamma length");
        nu.resize(P);
        for (int r = 1; r <= P; ++r) nu(r - 1) = eta_coord(Q, gamma, r);
    }

    double nu_at(int r) const { return nu(r - 1); }
};

// Mean shift of the limiting law: -sum_{r>p} xi_r^{-2} C_r nu_r.
inline Eigen::VectorXd limit_mean_shift(const AsymptoticContext& ctx,
                                        const LocalPerturbation& lp, int p) {
    Eigen::VectorXd beta = Eigen::VectorXd::Zero(ctx.target.k);
    for (int r = p + 1; r <= ctx.P(); ++r)
        beta -= ctx.C[r] * (lp.nu_at(r) / (ctx.xi[r] * ctx.xi[r]));
    return beta;
}

namespace detail {

// Shared evaluator for selection-reweighted Gaussian c.d.f.s without a scale
// integral: the large-sample limit and the plug-in estimator branch have the
// same shape with different inputs.
inline CdfValue overfit_weighted_cdf(const ProjectionQuantities& pq,
                                     const Eigen::MatrixXd& A, double sigma, double nu,
                                     double cp, const Eigen::VectorXd& tau,
                                     const QuadratureConfig& quad, std::uint64_t seed) {
    const double denom = 1.0 - delta_prob(sigma * pq.xi, nu, cp * sigma * pq.xi);
    if (denom < 1e-12)
        throw numeric_error("conditioning event has numerically zero probability in the limit",
                            0.0, denom);
    MeasureSpace ms = measure_space(pq, A, sigma);
    const double own = cp * sigma * pq.xi;
    const double qmc_err = 2.0 * std::pow(static_cast<double>(quad.qmc_points), -0.75);

    if (pq.zeta > 0.0 || cp <= 0.0) {
        WeightedRegionRule rule =
            build_region_rule(ms.cov, ms.constraints, tau, ms.functional, quad, seed,
                              ms.orthant);
        if (rule.empty) return {0.0, 1e-12, "empty-region"};
        const double zs = sigma * pq.zeta;
        double numerator = rule.expect(
            [&](double u) { return 1.0 - delta_prob(zs, nu + u, own); });
        const double err = (ms.dim >= 3 ? qmc_err : 1e-10) / denom;
        return {clamp_probability(numerator / denom, err + 1e-9), err,
                "limit-" + rule.method};
    }

    // perfect correlation: the factor is an indicator, so the numerator is a
    // difference of plain Gaussian region probabilities with one extra
    // constraint row for each side of the excluded band.
    auto prob_with_row = [&](double sign, double bound) {
        Eigen::MatrixXd R(ms.constraints.rows() + 1, ms.constraints.cols());
        Eigen::VectorXd t2(ms.constraints.rows() + 1);
        R.topRows(ms.constraints.rows()) = ms.constraints;
        t2.head(ms.constraints.rows()) = tau;
        R.row(ms.constraints.rows()) = sign * ms.functional;
        t2(ms.constraints.rows()) = bound;
        return gaussian_region_prob(ms.cov, R, t2, quad, mix_key({seed, 0xF00Dull}),
                                    false);
    };
    const double whole = gaussian_region_prob(ms.cov, ms.constraints, tau, quad, seed,
                                              ms.orthant);
    // band {|nu + u| < own} intersected with the region, as P(u < own - nu)
    // minus P(u <= -own - nu)
    const double below_hi = prob_with_row(1.0, own - nu);
    const double below_lo = prob_with_row(1.0, -own - nu);
    const double numerator = std::max(0.0, whole - (below_hi - below_lo));
    const double err = (ms.dim >= 3 ? 3.0 * qmc_err : 1e-9) / denom;
    return {clamp_probability(numerator / denom, err + 1e-9), err, "limit-split"};
}

} // namespace detail

// Large-sample limit of the conditional c.d.f. under theta + gamma/sqrt(n).
inline CdfValue limit_cdf(const AsymptoticContext& ctx, int p,
                          const Eigen::VectorXd& gamma, OrderClass cls,
                          const Eigen::VectorXd& t, const QuadratureConfig& quad = {}) {
    quad.validate();
    if (p < ctx.family.min_order || p > ctx.P())
        throw config_error("limit_cdf: order outside family");
    if (t.size() != ctx.target.k) throw config_error("limit_cdf: t has wrong dimension");
    LocalPerturbation lp(ctx.Q, gamma);
    Eigen::VectorXd tau = t - limit_mean_shift(ctx, lp, p);
    std::uint64_t seed = detail::hash_doubles(
        mix_key({quad.master_seed, static_cast<std::uint64_t>(p), 0xA51ull}), tau.data(),
        tau.size());

    if (cls == OrderClass::tight) {
        if (p == 0) {
            const bool in = (tau.array() >= 0.0).all();
            return {in ? 1.0 : 0.0, 0.0, "point-mass"};
        }
        detail::MeasureSpace ms = detail::measure_space(ctx.proj[p], ctx.target.A, ctx.sigma);
        const double prob =
            gaussian_region_prob(ms.cov, ms.constraints, tau, quad, seed, ms.orthant);
        const double err =
            ms.dim >= 3 ? 2.0 * std::pow(static_cast<double>(quad.qmc_points), -0.75) : 1e-12;
        return {clamp_probability(prob, err), err, "limit-gauss"};
    }
    if (p <= ctx.family.min_order)
        throw config_error("limit_cdf: overfit class requires p above the family floor");
    return detail::overfit_weighted_cdf(ctx.proj[p], ctx.target.A, ctx.sigma, lp.nu_at(p),
                                        ctx.family.c(p), tau, quad, seed);
}

struct McValue {
    double value = 0.0;
    double se = 0.0;
    std::uint64_t used = 0;
    std::uint64_t total = 0;
};

// Monte Carlo oracle for limit_cdf built on the joint-normal representation
// of the limiting law: Z_p = sum_{r<=p} xi_r^{-2} C_r W_r with independent
// W_r, conditioned (in the overfit case) on the selection band for W_p.
inline McValue limit_cdf_mc(const AsymptoticContext& ctx, int p,
                            const Eigen::VectorXd& gamma, OrderClass cls,
                            const Eigen::VectorXd& t, std::uint64_t seed,
                            std::uint64_t reps) {
    if (p < ctx.family.min_order || p > ctx.P())
        throw config_error("limit_cdf_mc: order outside family");
    LocalPerturbation lp(ctx.Q, gamma);
    Eigen::VectorXd tau = t - limit_mean_shift(ctx, lp, p);
    if (cls == OrderClass::overfit && p <= ctx.family.min_order)
        throw config_error("limit_cdf_mc: overfit class requires p above the family floor");

    Rng rng(mix_key({seed, 0x11C0ull, static_cast<std::uint64_t>(p)}));
    const double band = cls == OrderClass::overfit
                            ? ctx.family.c(p) * ctx.sigma * ctx.xi[p]
                            : 0.0;
    std::uint64_t kept = 0, hits = 0;
    Eigen::VectorXd z(ctx.target.k);
    for (std::uint64_t i = 0; i < reps; ++i) {
        z.setZero();
        double w_p = 0.0;
        for (int r = 1; r <= p; ++r) {
            const double w = ctx.sigma * ctx.xi[r] * rng.normal();
            if (r == p) w_p = w;
            z += ctx.C[r] * (w / (ctx.xi[r] * ctx.xi[r]));
        }
        if (cls == OrderClass::overfit && std::abs(w_p + lp.nu_at(p)) < band) continue;
        ++kept;
        if ((z.array() <= tau.array()).all()) ++hits;
    }
    if (kept == 0) throw empty_cell_error("limit_cdf_mc: no samples satisfied the conditioning event");
    McValue out;
    out.value = static_cast<double>(hits) / static_cast<double>(kept);
    out.se = std::sqrt(std::max(out.value * (1.0 - out.value), 1e-12) /
                       static_cast<double>(kept));
    out.used = kept;
    out.total = reps;
    return out;
}

// Accumulation points of the selection probability under parameter
// sequences, parameterized by the limits v_q (extended reals allowed) of the
// scaled selector biases for q = p..P.
inline double limit_sel_prob(const AsymptoticContext& ctx, int p,
                             const std::vector<double>& v) {
    const int P = ctx.P();
    if (p < ctx.family.min_order || p > P)
        throw config_error("limit_sel_prob: order outside family");
    if (static_cast<int>(v.size()) != P - p + 1)
        throw config_error("limit_sel_prob: need one v per order p..P");
    double value = 1.0;
    if (p > ctx.family.min_order) {
        const double sx = ctx.sigma * ctx.xi[p];
        value = 1.0 - delta_prob(sx, v[0], ctx.family.c(p) * sx);
    }
    for (int q = p + 1; q <= P; ++q) {
        const double sx = ctx.sigma * ctx.xi[q];
        value *= delta_prob(sx, v[q - p], ctx.family.c(q) * sx);
    }
    return value;
}

} // namespace pmse
