#pragma once

#include <cmath>
#include <optional>
#include <vector>

#include <Eigen/Dense>

#include "pmse/cond_dist.hpp"
#include "pmse/regression.hpp"
#include "pmse/selection.hpp"

namespace pmse {

// Gaussian plug-in for the conditional c.d.f.: centered normal with the
// estimated scale, point-mass at zero for order 0 (and for a zero scale
// estimate, a probability-zero event kept for completeness).
inline CdfValue plugin_gaussian_cdf(const DesignMatrix& design, const TargetMap& target,
                                    int p, double sigma_hat, const Eigen::VectorXd& t,
                                    const QuadratureConfig& quad = {}) {
    if (p < 0 || p > design.P) throw config_error("plugin_gaussian_cdf: order out of range");
    if (t.size() != target.k) throw config_error("plugin_gaussian_cdf: t has wrong dimension");
    if (p == 0 || sigma_hat == 0.0) {
        const bool in = (t.array() >= 0.0).all();
        return {in ? 1.0 : 0.0, 0.0, "point-mass"};
    }
    ProjectionQuantities pq = projection_quantities(design.gram, target, p);
    detail::MeasureSpace ms = detail::measure_space(pq, target.A, sigma_hat);
    std::uint64_t seed = detail::hash_doubles(
        mix_key({quad.master_seed, 0x916ull, static_cast<std::uint64_t>(p)}), t.data(),
        t.size());
    const double prob = gaussian_region_prob(ms.cov, ms.constraints, t, quad, seed, ms.orthant);
    const double err =
        ms.dim >= 3 ? 2.0 * std::pow(static_cast<double>(quad.qmc_points), -0.75) : 1e-12;
    return {clamp_probability(prob, err), err, "plugin"};
}

enum class AuxDecision { order_is_p, order_below_p };

// Auxiliary order decision: the coefficient is declared active when its
// t-statistic clears a slowly growing threshold.
inline AuxDecision aux_decide(double t_p, double threshold) {
    return std::abs(t_p) > threshold ? AuxDecision::order_is_p : AuxDecision::order_below_p;
}

inline double default_aux_threshold(int n) { return std::sqrt(std::log(static_cast<double>(n))); }

// Opt-in alternative: decide by a consistent information criterion comparing
// the order-(p-1) and order-p fits.
inline AuxDecision aux_decide_bic(const SampleStats& s, int p) {
    const DesignMatrix& d = *s.design;
    if (p < 1 || p > d.P) throw config_error("aux_decide_bic: order out of range");
    const double rss_below = rss_over_n(s, p - 1) * d.n;
    const double rss_at = rss_over_n(s, p) * d.n;
    if (rss_at < kDegenerateRss)
        throw degenerate_error("aux_decide_bic: degenerate residual sum of squares");
    const double gain = d.n * std::log(rss_below / rss_at);
    return gain > std::log(static_cast<double>(d.n)) ? AuxDecision::order_is_p
                                                     : AuxDecision::order_below_p;
}

struct AuxRule {
    enum class Kind { threshold, bic } kind = Kind::threshold;
    double threshold = 0.0; // 0 requests sqrt(log n)

    double resolve_threshold(int n) const {
        return threshold > 0.0 ? threshold : default_aux_threshold(n);
    }
};

// Estimator of the conditional c.d.f. for a given order: the plug-in normal
// at the family floor or when the auxiliary decision declares the last
// coefficient active, otherwise the selection-reweighted plug-in.
inline CdfValue check_cdf(const DesignMatrix& design, const TargetMap& target,
                          const NestedFamily& family, const SampleStats& stats, int p,
                          const Eigen::VectorXd& t, const QuadratureConfig& quad = {},
                          const AuxRule& aux = {}) {
    if (p < family.min_order || p > family.max_order())
        throw config_error("check_cdf: order outside family");
    const double shat = sigma_hat(stats);
    if (p == family.min_order)
        return plugin_gaussian_cdf(design, target, p, shat, t, quad);

    AuxDecision decision;
    if (aux.kind == AuxRule::Kind::bic) {
        decision = aux_decide_bic(stats, p);
    } else {
        decision = aux_decide(t_stat(stats, p), aux.resolve_threshold(design.n));
    }
    if (decision == AuxDecision::order_is_p)
        return plugin_gaussian_cdf(design, target, p, shat, t, quad);

    ProjectionQuantities pq = projection_quantities(design.gram, target, p);
    std::uint64_t seed = detail::hash_doubles(
        mix_key({quad.master_seed, 0xC4ECull, static_cast<std::uint64_t>(p)}), t.data(),
        t.size());
    return detail::overfit_weighted_cdf(pq, target.A, shat, 0.0, family.c(p), t, quad, seed);
}

inline CdfValue check_cdf_selected(const DesignMatrix& design, const TargetMap& target,
                                   const NestedFamily& family, const SampleStats& stats,
                                   const SelectionOutcome& outcome, const Eigen::VectorXd& t,
                                   const QuadratureConfig& quad = {}, const AuxRule& aux = {}) {
    if (outcome.order < 0) throw config_error("check_cdf_selected: nested outcome required");
    return check_cdf(design, target, family, stats, outcome.order, t, quad, aux);
}

// ---------------------------------------------------------------------------
// Fast scalar-target evaluator.  For a one-dimensional target the estimator
// depends on the data only through t / sigma_hat, so the reweighted branch
// can be tabulated once per (design, order) and evaluated per replication by
// interpolation.  Used by the Monte Carlo ladders.
// ---------------------------------------------------------------------------

class CheckCdfTable {
public:
    CheckCdfTable(const DesignMatrix& design, const TargetMap& target,
                  const NestedFamily& family, int p, const QuadratureConfig& quad = {})
        : p_(p) {
        if (target.k != 1) throw config_error("CheckCdfTable: scalar targets only");
        if (p < family.min_order || p > family.max_order())
            throw config_error("CheckCdfTable: order outside family");
        floor_ = (p == family.min_order);
        if (p >= 1) {
            ProjectionQuantities pq = projection_quantities(design.gram, target, p);
            sd_z_ = std::sqrt(pq.cov_z(0, 0));
            zeta_ = pq.zeta;
            xi_ = pq.xi;
            b_ = pq.b(0);
            cp_ = family.c(p);
        }
        if (floor_ || p_ == 0) return;

        denom_ = 1.0 - delta_prob(xi_, 0.0, cp_ * xi_);
        if (zeta_ == 0.0) return; // handled analytically in overfit_value

        // grid of F(x) = E[ 1{z<=x} (1 - Delta_zeta(b z, c xi)) ] / denom at
        // unit scale, with the integrand stored for Hermite interpolation
        const double span = 10.0 * sd_z_;
        knots_ = 4097;
        x0_ = -span;
        dx_ = 2.0 * span / (knots_ - 1);
        fval_.resize(knots_);
        dens_.resize(knots_);
        auto integrand = [&](double z) {
            return (1.0 - delta_prob(zeta_, b_ * z, cp_ * xi_)) *
                   norm_pdf(z / sd_z_) / sd_z_;
        };
        double acc = 0.0;
        fval_[0] = 0.0;
        dens_[0] = integrand(x0_);
        for (int i = 1; i < knots_; ++i) {
            const double a = x0_ + dx_ * (i - 1);
            acc += integrate_gl(integrand, a, a + dx_, 8);
            fval_[i] = acc;
            dens_[i] = integrand(x0_ + dx_ * i);
        }
    }

    // plug-in branch, exact for a scalar target
    double plugin_value(double t, double sigma_hat) const {
        if (p_ == 0 || sigma_hat == 0.0) return t >= 0.0 ? 1.0 : 0.0;
        return norm_cdf(t / (sigma_hat * sd_z_));
    }

    // reweighted branch evaluated at unit scale via x = t / sigma_hat
    double overfit_value(double t, double sigma_hat) const {
        const double x = t / sigma_hat;
        if (zeta_ == 0.0) {
            // indicator reweighting: z restricted outside the band
            // |b z| < c xi, all probabilities exact
            const double lo = -cp_ * xi_ / std::abs(b_);
            const double hi = cp_ * xi_ / std::abs(b_);
            double num;
            if (x <= lo)
                num = norm_cdf(x / sd_z_);
            else if (x <= hi)
                num = norm_cdf(lo / sd_z_);
            else
                num = norm_cdf(lo / sd_z_) + norm_cdf(x / sd_z_) - norm_cdf(hi / sd_z_);
            return std::clamp(num / denom_, 0.0, 1.0);
        }
        double f;
        if (x <= x0_) {
            f = 0.0;
        } else if (x >= x0_ + dx_ * (knots_ - 1)) {
            f = fval_.back();
        } else {
            const int i = static_cast<int>((x - x0_) / dx_);
            const double s = (x - (x0_ + dx_ * i)) / dx_;
            const double h00 = (1 + 2 * s) * (1 - s) * (1 - s);
            const double h10 = s * (1 - s) * (1 - s);
            const double h01 = s * s * (3 - 2 * s);
            const double h11 = s * s * (s - 1);
            f = h00 * fval_[i] + h10 * dx_ * dens_[i] + h01 * fval_[i + 1] +
                h11 * dx_ * dens_[i + 1];
        }
        return std::clamp(f / denom_, 0.0, 1.0);
    }

    double value(double t, double sigma_hat, double t_stat_p, double aux_threshold) const {
        if (floor_) return plugin_value(t, sigma_hat);
        if (std::abs(t_stat_p) > aux_threshold) return plugin_value(t, sigma_hat);
        return overfit_value(t, sigma_hat);
    }

private:
    int p_ = 0;
    bool floor_ = true;
    double sd_z_ = 1.0, zeta_ = 0.0, xi_ = 1.0, b_ = 0.0, cp_ = 0.0, denom_ = 1.0;
    int knots_ = 0;
    double x0_ = 0.0, dx_ = 0.0;
    std::vector<double> fval_;
    std::vector<double> dens_;
};

} // namespace pmse
