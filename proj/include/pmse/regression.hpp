#pragma once

#include <vector>

#include <Eigen/Dense>

#include "pmse/design.hpp"
#include "pmse/errors.hpp"

namespace pmse {

inline constexpr double kDegenerateRss = 1e-30;

// Sufficient statistics of a sample (X, Y): every estimator and selector in
// this library depends on Y only through X'Y/n and Y'Y/n.
struct SampleStats {
    const DesignMatrix* design = nullptr;
    Eigen::VectorXd xty_n; // X'Y/n
    double yty_n = 0.0;    // Y'Y/n

    static SampleStats from_response(const DesignMatrix& d, const Eigen::VectorXd& y) {
        if (y.size() != d.n) throw config_error("response length != n");
        SampleStats s;
        s.design = &d;
        s.xty_n = (d.X.transpose() * y) / static_cast<double>(d.n);
        s.yty_n = y.squaredNorm() / static_cast<double>(d.n);
        return s;
    }
};

// Least squares restricted to the first p coordinates; trailing entries are
// exactly zero.  p = 0 is the zero vector, p = P the unrestricted fit.
inline Eigen::VectorXd restricted_ls(const DesignMatrix& d, const Eigen::VectorXd& y, int p) {
    if (p < 0 || p > d.P) throw config_error("restricted_ls: order out of range");
    if (y.size() != d.n) throw config_error("restricted_ls: response length != n");
    Eigen::VectorXd out = Eigen::VectorXd::Zero(d.P);
    if (p == 0) return out;
    out.head(p) = d.X.leftCols(p).householderQr().solve(y);
    return out;
}

inline Eigen::VectorXd restricted_ls(const SampleStats& s, int p) {
    const DesignMatrix& d = *s.design;
    if (p < 0 || p > d.P) throw config_error("restricted_ls: order out of range");
    Eigen::VectorXd out = Eigen::VectorXd::Zero(d.P);
    if (p == 0) return out;
    out.head(p) = d.gram.topLeftCorner(p, p).ldlt().solve(s.xty_n.head(p));
    return out;
}

// Least squares with the coordinates excluded by the mask pinned to zero.
inline Eigen::VectorXd subset_ls(const DesignMatrix& d, const Eigen::VectorXd& y,
                                 const std::vector<int>& mask) {
    if (static_cast<int>(mask.size()) != d.P)
        throw config_error("subset_ls: mask length != P");
    std::vector<int> idx;
    for (int j = 0; j < d.P; ++j)
        if (mask[j] != 0) idx.push_back(j);
    Eigen::VectorXd out = Eigen::VectorXd::Zero(d.P);
    if (idx.empty()) return out;
    Eigen::MatrixXd xs(d.n, idx.size());
    for (size_t j = 0; j < idx.size(); ++j) xs.col(j) = d.X.col(idx[j]);
    Eigen::VectorXd coef = xs.householderQr().solve(y);
    for (size_t j = 0; j < idx.size(); ++j) out(idx[j]) = coef(j);
    return out;
}

inline Eigen::VectorXd subset_ls(const SampleStats& s, const std::vector<int>& mask) {
    const DesignMatrix& d = *s.design;
    if (static_cast<int>(mask.size()) != d.P)
        throw config_error("subset_ls: mask length != P");
    std::vector<int> idx;
    for (int j = 0; j < d.P; ++j)
        if (mask[j] != 0) idx.push_back(j);
    Eigen::VectorXd out = Eigen::VectorXd::Zero(d.P);
    if (idx.empty()) return out;
    Eigen::MatrixXd g(idx.size(), idx.size());
    Eigen::VectorXd v(idx.size());
    for (size_t a = 0; a < idx.size(); ++a) {
        v(a) = s.xty_n(idx[a]);
        for (size_t b = 0; b < idx.size(); ++b) g(a, b) = d.gram(idx[a], idx[b]);
    }
    Eigen::VectorXd coef = g.ldlt().solve(v);
    for (size_t j = 0; j < idx.size(); ++j) out(idx[j]) = coef(j);
    return out;
}

// Residual sum of squares over n for an arbitrary inclusion mask; clamped at
// zero against floating-point cancellation.
inline double rss_over_n(const SampleStats& s, const std::vector<int>& mask) {
    Eigen::VectorXd coef = subset_ls(s, mask);
    return std::max(0.0, s.yty_n - s.xty_n.dot(coef));
}

inline double rss_over_n(const SampleStats& s, int p) {
    Eigen::VectorXd coef = restricted_ls(s, p);
    return std::max(0.0, s.yty_n - s.xty_n.dot(coef));
}

inline double sigma_hat(const SampleStats& s) {
    const DesignMatrix& d = *s.design;
    const double s2 = rss_over_n(s, d.P) * d.n / static_cast<double>(d.n - d.P);
    if (s2 < kDegenerateRss)
        throw degenerate_error("sigma_hat: residual sum of squares is degenerate");
    return std::sqrt(s2);
}

inline double sigma_hat(const DesignMatrix& d, const Eigen::VectorXd& y) {
    return sigma_hat(SampleStats::from_response(d, y));
}

// Expected value of the order-p restricted estimator.  Only Gram blocks
// enter, so the same routine serves the finite-sample Gram and its limit.
inline Eigen::VectorXd eta_vector(const Eigen::MatrixXd& gram,
                                  const Eigen::VectorXd& theta, int p) {
    const int P = static_cast<int>(gram.rows());
    if (p < 0 || p > P) throw config_error("eta_vector: order out of range");
    Eigen::VectorXd out = Eigen::VectorXd::Zero(P);
    if (p == 0) return out;
    out.head(p) = theta.head(p);
    if (p < P)
        out.head(p) += gram.topLeftCorner(p, p).ldlt().solve(
            gram.topRightCorner(p, P - p) * theta.tail(P - p));
    return out;
}

// p-th coordinate of eta_vector(gram, theta, p); the selector bias terms.
inline double eta_coord(const Eigen::MatrixXd& gram, const Eigen::VectorXd& theta, int p) {
    return eta_vector(gram, theta, p)(p - 1);
}

// Smallest p with all trailing coordinates exactly zero.  Membership in a
// candidate model is a modeling statement, so the comparison is literal.
inline int order_of(const Eigen::VectorXd& theta) {
    int p = static_cast<int>(theta.size());
    while (p > 0 && theta(p - 1) == 0.0) --p;
    return p;
}

// Scalars and vectors coupling the target A*estimator to the tested
// coefficient: the variance xi^2 of the coefficient estimate, the covariance
// vector C, the regression row b and the residual variance zeta^2.
struct ProjectionQuantities {
    int p = 0;
    double xi2 = 0.0;
    double zeta2 = 0.0;
    double xi = 0.0;
    double zeta = 0.0;
    Eigen::VectorXd C;      // k-vector
    Eigen::RowVectorXd b;   // 1 x k
    Eigen::MatrixXd cov_w;  // p x p, inverse leading Gram block
    Eigen::MatrixXd cov_z;  // k x k, A[p] cov_w A[p]'
};

// gram may be the finite-sample or the limit Gram matrix.  The generalized
// inverse is the Moore-Penrose pseudoinverse with singular values below
// 1e-12 of the largest truncated; zeta^2 in [-1e-10, 0) is clamped to zero.
inline ProjectionQuantities projection_quantities(const Eigen::MatrixXd& gram,
                                                  const TargetMap& target, int p) {
    const int P = static_cast<int>(gram.rows());
    if (p < 1 || p > P) throw config_error("projection_quantities: need 0 < p <= P");
    ProjectionQuantities out;
    out.p = p;
    Eigen::MatrixXd sig = gram.topLeftCorner(p, p).llt().solve(
        Eigen::MatrixXd::Identity(p, p));
    out.cov_w = sig;
    out.xi2 = sig(p - 1, p - 1);
    if (!(out.xi2 > 0.0))
        throw config_error("projection_quantities: nonpositive coefficient variance");
    out.xi = std::sqrt(out.xi2);
    Eigen::MatrixXd ap = target.A.leftCols(p);
    out.C = ap * sig.col(p - 1);
    out.cov_z = ap * sig * ap.transpose();
    Eigen::JacobiSVD<Eigen::MatrixXd> svd(out.cov_z,
                                          Eigen::ComputeThinU | Eigen::ComputeThinV);
    const auto& sv = svd.singularValues();
    const double cutoff = 1e-12 * (sv.size() > 0 ? sv(0) : 0.0);
    Eigen::VectorXd inv_sv = Eigen::VectorXd::Zero(sv.size());
    for (int i = 0; i < sv.size(); ++i)
        if (sv(i) > cutoff) inv_sv(i) = 1.0 / sv(i);
    Eigen::MatrixXd pinv =
        svd.matrixV() * inv_sv.asDiagonal() * svd.matrixU().transpose();
    out.b = out.C.transpose() * pinv;
    double z2 = out.xi2 - out.b.dot(out.C);
    if (z2 < -1e-10)
        throw numeric_error("projection_quantities: zeta^2 below clamp window", z2,
                            std::abs(z2));
    // cancellation noise on either side of zero means perfect correlation
    if (z2 < 1e-10 * out.xi2) z2 = 0.0;
    out.zeta2 = z2;
    out.zeta = std::sqrt(z2);
    return out;
}

} // namespace pmse
