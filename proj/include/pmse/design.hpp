#pragma once

#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "pmse/errors.hpp"
#include "pmse/rng.hpp"

namespace pmse {

// Fixed regressor matrix with its normalized Gram matrix X'X/n and the
// large-sample Gram limit (defaults to the finite-sample one).
struct DesignMatrix {
    Eigen::MatrixXd X;
    Eigen::MatrixXd gram;       // X'X/n
    Eigen::MatrixXd limit_gram; // asymptotic Gram, symmetric positive definite
    int n = 0;
    int P = 0;

    static DesignMatrix from_matrix(Eigen::MatrixXd x,
                                    std::optional<Eigen::MatrixXd> limit = {}) {
        DesignMatrix d;
        d.n = static_cast<int>(x.rows());
        d.P = static_cast<int>(x.cols());
        if (d.P < 1 || d.n <= d.P)
            throw config_error("DesignMatrix: need n > P >= 1");
        d.X = std::move(x);
        d.gram = (d.X.transpose() * d.X) / static_cast<double>(d.n);
        check_spd(d.gram, "X'X/n");
        if (limit) {
            if (limit->rows() != d.P || limit->cols() != d.P)
                throw config_error("DesignMatrix: limit Gram must be PxP");
            check_spd(*limit, "limit Gram");
            d.limit_gram = std::move(*limit);
        } else {
            d.limit_gram = d.gram;
        }
        return d;
    }

    // Deterministic design with X'X/n equal to the requested Gram matrix
    // exactly: orthonormalize a seeded matrix and color it by the Cholesky
    // factor.  Used by the n-ladder experiments, which need one design per
    // sample size converging to (here: equal to) a common limit.
    static DesignMatrix synthetic(int n, const Eigen::MatrixXd& target_gram,
                                  std::uint64_t seed) {
        const int P = static_cast<int>(target_gram.rows());
        if (n <= P) throw config_error("synthetic design: need n > P");
        check_spd(target_gram, "target Gram");
        Eigen::MatrixXd raw(n, P);
        Rng rng(mix_key({seed, static_cast<std::uint64_t>(n), 0xD351C0ull}));
        for (int i = 0; i < n; ++i)
            for (int j = 0; j < P; ++j) raw(i, j) = rng.normal();
        Eigen::HouseholderQR<Eigen::MatrixXd> qr(raw);
        Eigen::MatrixXd u = qr.householderQ() * Eigen::MatrixXd::Identity(n, P);
        Eigen::LLT<Eigen::MatrixXd> llt(target_gram);
        Eigen::MatrixXd x =
            std::sqrt(static_cast<double>(n)) * u * llt.matrixL().transpose();
        return from_matrix(std::move(x), target_gram);
    }

private:
    static void check_spd(const Eigen::MatrixXd& m, const char* what) {
        if ((m - m.transpose()).cwiseAbs().maxCoeff() > 1e-8 * (1.0 + m.cwiseAbs().maxCoeff()))
            throw config_error(std::string(what) + " is not symmetric");
        Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(m);
        const double lo = es.eigenvalues().minCoeff();
        const double hi = es.eigenvalues().maxCoeff();
        if (!(lo > 1e-10 * hi))
            throw config_error(std::string(what) + " is numerically singular");
    }
};

// Nonstochastic k x P matrix of full row rank mapping the estimator to the
// k-dimensional quantity whose conditional distribution is studied.
struct TargetMap {
    Eigen::MatrixXd A;
    int k = 0;

    explicit TargetMap(Eigen::MatrixXd a) : A(std::move(a)) {
        k = static_cast<int>(A.rows());
        if (k < 1 || k > A.cols())
            throw config_error("TargetMap: need 1 <= k <= P");
        Eigen::JacobiSVD<Eigen::MatrixXd> svd(A);
        const auto& sv = svd.singularValues();
        if (!(sv(k - 1) > 1e-12 * sv(0)))
            throw config_error("TargetMap: A must have full row rank");
    }
};

struct ParameterPoint {
    Eigen::VectorXd theta;
    double sigma = 1.0;

    ParameterPoint() = default;
    ParameterPoint(Eigen::VectorXd th, double sg) : theta(std::move(th)), sigma(sg) {
        if (!(sigma > 0.0) || !std::isfinite(sigma))
            throw config_error("ParameterPoint: sigma must be positive and finite");
    }
};

// Numeric CSV reader; a non-numeric first row is treated as a header.
inline Eigen::MatrixXd load_matrix_csv(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw config_error("cannot open CSV file: " + path);
    std::vector<std::vector<double>> rows;
    std::string line;
    bool first = true;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        std::vector<double> row;
        std::stringstream ss(line);
        std::string cell;
        bool numeric = true;
        while (std::getline(ss, cell, ',')) {
            try {
                size_t pos = 0;
                row.push_back(std::stod(cell, &pos));
            } catch (const std::exception&) {
                numeric = false;
                break;
            }
        }
        if (!numeric) {
            if (first) { first = false; continue; } // header row
            throw config_error("non-numeric CSV row in " + path);
        }
        first = false;
        if (!rows.empty() && row.size() != rows.front().size())
            throw config_error("ragged CSV rows in " + path);
        rows.push_back(std::move(row));
    }
    if (rows.empty()) throw config_error("empty CSV file: " + path);
    Eigen::MatrixXd m(rows.size(), rows.front().size());
    for (size_t i = 0; i < rows.size(); ++i)
        for (size_t j = 0; j < rows.front().size(); ++j) m(i, j) = rows[i][j];
    return m;
}

} // namespace pmse
