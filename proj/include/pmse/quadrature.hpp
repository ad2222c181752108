#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <mutex>
#include <span>
#include <vector>

#include "pmse/errors.hpp"
#include "pmse/rng.hpp"

namespace pmse {

// Gauss-Legendre nodes/weights on [-1,1], computed by Newton iteration on
// the Legendre recurrence and cached per order.
struct GaussLegendre {
    std::vector<double> nodes;
    std::vector<double> weights;

    static const GaussLegendre& get(int m) {
        static std::map<int, GaussLegendre> cache;
        static std::mutex mutex;
        std::lock_guard<std::mutex> lock(mutex);
        auto it = cache.find(m);
        if (it == cache.end()) it = cache.emplace(m, compute(m)).first;
        return it->second;
    }

private:
    static GaussLegendre compute(int m) {
        GaussLegendre rule;
        rule.nodes.resize(m);
        rule.weights.resize(m);
        const int half = (m + 1) / 2;
        for (int i = 0; i < half; ++i) {
            double x = std::cos(M_PI * (i + 0.75) / (m + 0.5));
            double pp = 0.0;
            for (int iter = 0; iter < 100; ++iter) {
                double p0 = 1.0, p1 = 0.0;
                for (int j = 0; j < m; ++j) {
                    const double p2 = p1;
                    p1 = p0;
                    p0 = ((2.0 * j + 1.0) * x * p1 - j * p2) / (j + 1.0);
                }
                pp = m * (x * p0 - p1) / (x * x - 1.0);
                const double dx = p0 / pp;
                x -= dx;
                if (std::abs(dx) < 1e-15) break;
            }
            rule.nodes[i] = -x;
            rule.nodes[m - 1 - i] = x;
            rule.weights[i] = 2.0 / ((1.0 - x * x) * pp * pp);
            rule.weights[m - 1 - i] = rule.weights[i];
        }
        return rule;
    }
};

template <class F>
double integrate_gl(const F& f, double a, double b, int m) {
    const auto& rule = GaussLegendre::get(m);
    const double mid = 0.5 * (a + b), half = 0.5 * (b - a);
    double sum = 0.0;
    for (int i = 0; i < m; ++i)
        sum += rule.weights[i] * f(mid + half * rule.nodes[i]);
    return sum * half;
}

struct IntegralValue {
    double value = 0.0;
    double error = 0.0;
    int nodes = 0;
};

// Node-doubling Gauss-Legendre: refine until two successive orders agree to
// the requested tolerance.  Throws numeric_error carrying the best estimate
// if the ceiling is hit first.
template <class F>
IntegralValue integrate_doubling(const F& f, double a, double b, double rel_tol,
                                 double abs_tol, int m0 = 16, int m_max = 2048) {
    double prev = integrate_gl(f, a, b, m0);
    for (int m = 2 * m0; m <= m_max; m *= 2) {
        const double cur = integrate_gl(f, a, b, m);
        const double err = std::abs(cur - prev);
        if (err <= rel_tol * std::abs(cur) + abs_tol)
            return {cur, err, m};
        prev = cur;
    }
    throw numeric_error("integrate_doubling: tolerance not reached", prev,
                        std::abs(prev));
}

// Piecewise cumulative integral of a smooth positive integrand: panel sums
// accumulated once, arbitrary upper limits evaluated with a short
// Gauss-Legendre rule on the final partial panel.
class CumulativeIntegral {
public:
    template <class F>
    CumulativeIntegral(const F& f, double a, double b, int panels = 256,
                       int nodes_per_panel = 8)
        : a_(a), b_(b), panels_(panels), nodes_(nodes_per_panel) {
        knots_.resize(panels + 1);
        cum_.resize(panels + 1);
        const double h = (b - a) / panels;
        cum_[0] = 0.0;
        for (int i = 0; i <= panels; ++i) knots_[i] = a + h * i;
        for (int i = 0; i < panels; ++i)
            cum_[i + 1] = cum_[i] + integrate_gl(f, knots_[i], knots_[i + 1], nodes_);
        eval_ = [f](double lo, double hi, int m) {
            return integrate_gl(f, lo, hi, m);
        };
    }

    double upto(double x) const {
        if (x <= a_) return 0.0;
        if (x >= b_) return cum_.back();
        const double h = (b_ - a_) / panels_;
        int i = static_cast<int>((x - a_) / h);
        if (i >= panels_) i = panels_ - 1;
        return cum_[i] + eval_(knots_[i], x, nodes_);
    }

    double total() const { return cum_.back(); }

private:
    double a_, b_;
    int panels_, nodes_;
    std::vector<double> knots_;
    std::vector<double> cum_;
    std::function<double(double, double, int)> eval_;
};

// Halton sequence with a seeded Cranley-Patterson rotation; enough bases for
// the dimensions this library integrates over.
class HaltonRule {
public:
    HaltonRule(int dim, std::uint64_t seed) : dim_(dim), shift_(dim) {
        static const int primes[] = {2,  3,  5,  7,  11, 13, 17, 19,
                                     23, 29, 31, 37, 41, 43, 47, 53};
        if (dim < 1 || dim > 16)
            throw config_error("HaltonRule: dimension out of range");
        bases_.assign(primes, primes + dim);
        Rng rng(seed);
        for (int j = 0; j < dim; ++j) shift_[j] = rng.uniform01();
    }

    void point(std::uint64_t index, std::span<double> out) const {
        for (int j = 0; j < dim_; ++j) {
            double u = radical_inverse(index + 1, bases_[j]) + shift_[j];
            if (u >= 1.0) u -= 1.0;
            // keep strictly inside (0,1) for inverse-cdf mappings
            out[j] = std::min(std::max(u, 1e-15), 1.0 - 1e-15);
        }
    }

    int dim() const { return dim_; }

private:
    static double radical_inverse(std::uint64_t i, int base) {
        double inv_base = 1.0 / base, f = inv_base, value = 0.0;
        while (i > 0) {
            value += f * static_cast<double>(i % base);
            i /= base;
            f *= inv_base;
        }
        return value;
    }

    int dim_;
    std::vector<int> bases_;
    std::vector<double> shift_;
};

} // namespace pmse
