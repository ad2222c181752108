#pragma once

#include <algorithm>
#include <cmath>
#include <limits>

#include <boost/math/distributions/chi_squared.hpp>
#include <boost/math/distributions/normal.hpp>

#include "pmse/errors.hpp"

namespace pmse {

inline double norm_pdf(double x) {
    static const double inv_sqrt_2pi = 0.3989422804014326779399461;
    return inv_sqrt_2pi * std::exp(-0.5 * x * x);
}

inline double norm_cdf(double x) {
    return 0.5 * std::erfc(-x * 0.7071067811865475244008444);
}

inline double normal_quantile(double p) {
    static const boost::math::normal_distribution<double> nd;
    return boost::math::quantile(nd, p);
}

// P(|N(0, s^2) - a| < b).  Conventions: 0 at a = +/-inf, indicator of
// |a| < b when s = 0, and 0 whenever b <= 0 (an empty interval).
inline double delta_prob(double s, double a, double b) {
    if (std::isinf(a)) return 0.0;
    if (!(b > 0.0)) return 0.0;
    a = std::abs(a); // symmetric around zero in the first argument
    if (s == 0.0) return a < b ? 1.0 : 0.0;
    const double hi = norm_cdf((a + b) / s);
    const double lo = norm_cdf((a - b) / s);
    return std::clamp(hi - lo, 0.0, 1.0);
}

// Density, c.d.f. and quantile of S = sqrt(V/d) with V chi-square on d
// degrees of freedom (the distribution of a residual scale estimate over
// the true scale).  Evaluated through log-gamma so large d stays finite.
inline double chi_scale_density(double d, double s) {
    if (!(d >= 1.0)) throw config_error("chi_scale_density: need d >= 1");
    if (!(s > 0.0)) return 0.0;
    const double half_d = 0.5 * d;
    const double log_h = std::log(2.0) + half_d * std::log(half_d) +
                         (d - 1.0) * std::log(s) - half_d * s * s -
                         std::lgamma(half_d);
    return std::exp(log_h);
}

inline double chi_scale_cdf(double d, double s) {
    if (!(s > 0.0)) return 0.0;
    boost::math::chi_squared_distribution<double> chi2(d);
    return boost::math::cdf(chi2, d * s * s);
}

inline double chi_scale_quantile(double d, double p) {
    boost::math::chi_squared_distribution<double> chi2(d);
    return std::sqrt(boost::math::quantile(chi2, p) / d);
}

} // namespace pmse
