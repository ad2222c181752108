#pragma once

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "pmse/regression.hpp"

namespace pmse {

// Nested candidate family: orders min_order..P with one critical value per
// testable order.  The critical value at min_order is pinned to zero so the
// selector always terminates there.
struct NestedFamily {
    int min_order = 0;          // smallest candidate order
    std::vector<double> crit;   // crit[p] for p = 0..P; crit[min_order] == 0

    NestedFamily() = default;
    // c_values holds the critical values for orders min_order+1..P.
    NestedFamily(int order_floor, int P, std::vector<double> c_values) {
        if (order_floor < 0 || order_floor >= P)
            throw config_error("NestedFamily: need 0 <= min_order < P");
        if (static_cast<int>(c_values.size()) != P - order_floor)
            throw config_error("NestedFamily: need one critical value per order above the floor");
        min_order = order_floor;
        crit.assign(P + 1, 0.0);
        for (int p = order_floor + 1; p <= P; ++p) {
            const double c = c_values[p - order_floor - 1];
            if (!(c > 0.0) || !std::isfinite(c))
                throw config_error("NestedFamily: critical values must be in (0, inf)");
            crit[p] = c;
        }
    }

    int max_order() const { return static_cast<int>(crit.size()) - 1; }
    double c(int p) const { return crit.at(p); }
};

// Subset candidate family with an information-criterion penalty.  Must
// contain the full mask and at least one mask of weight P-1.
struct SubsetFamily {
    std::vector<std::vector<int>> masks;
    double upsilon = 2.0; // per-coordinate penalty, AIC at 2

    SubsetFamily() = default;
    SubsetFamily(std::vector<std::vector<int>> m, double penalty)
        : masks(std::move(m)), upsilon(penalty) {
        if (masks.empty()) throw config_error("SubsetFamily: empty mask set");
        const size_t P = masks.front().size();
        for (const auto& r : masks) {
            if (r.size() != P) throw config_error("SubsetFamily: ragged masks");
            for (int bit : r)
                if (bit != 0 && bit != 1)
                    throw config_error("SubsetFamily: masks must be 0/1");
        }
        if (!(upsilon >= 0.0)) throw config_error("SubsetFamily: penalty must be >= 0");
    }

    // The correspondence experiments additionally require the full mask and
    // at least one mask of weight P-1 in the family.
    void require_selection_structure() const {
        bool has_full = false, has_drop_one = false;
        const int P = this->P();
        for (const auto& r : masks) {
            int w = 0;
            for (int bit : r) w += bit;
            if (w == P) has_full = true;
            if (w == P - 1) has_drop_one = true;
        }
        if (!has_full) throw config_error("SubsetFamily: must contain the full mask");
        if (!has_drop_one)
            throw config_error("SubsetFamily: must contain a mask of weight P-1");
    }

    static SubsetFamily all_subsets(int P, double penalty) {
        std::vector<std::vector<int>> m;
        for (int bits = 0; bits < (1 << P); ++bits) {
            std::vector<int> r(P);
            for (int j = 0; j < P; ++j) r[j] = (bits >> j) & 1;
            m.push_back(std::move(r));
        }
        return SubsetFamily(std::move(m), penalty);
    }

    int P() const { return static_cast<int>(masks.front().size()); }
};

inline int mask_weight(const std::vector<int>& r) {
    int w = 0;
    for (int bit : r) w += bit;
    return w;
}

// Index of the unique excluded coordinate of a weight-(P-1) mask, 1-based.
inline int dropped_index(const std::vector<int>& r) {
    int idx = -1;
    for (size_t j = 0; j < r.size(); ++j)
        if (r[j] == 0) {
            if (idx >= 0) throw config_error("mask does not have weight P-1");
            idx = static_cast<int>(j) + 1;
        }
    if (idx < 0) throw config_error("mask does not have weight P-1");
    return idx;
}

struct SelectionOutcome {
    int order = -1;                  // nested selection result
    int mask_index = -1;             // subset selection result (index into family)
    std::vector<double> t_stats;     // nested: T_p for p = 0..P
    std::vector<double> scores;      // subset: one score per mask
    double sigma_hat = 0.0;          // full-model scale estimate of the replication
};

// t-statistic for the hypothesis that the order-p fit's last coefficient is
// zero, with the scale always estimated from the full model; T_0 = 0.
inline double t_stat(const SampleStats& s, int p) {
    if (p == 0) return 0.0;
    const DesignMatrix& d = *s.design;
    if (p < 0 || p > d.P) throw config_error("t_stat: order out of range");
    const double shat = sigma_hat(s);
    const Eigen::VectorXd coef = restricted_ls(s, p);
    Eigen::MatrixXd sig = d.gram.topLeftCorner(p, p).llt().solve(
        Eigen::MatrixXd::Identity(p, p));
    const double xi = std::sqrt(sig(p - 1, p - 1));
    return std::sqrt(static_cast<double>(d.n)) * coef(p - 1) / (shat * xi);
}

// t-statistic for coordinate i (1-based) in the full model.
inline double full_model_t(const SampleStats& s, int i) {
    const DesignMatrix& d = *s.design;
    if (i < 1 || i > d.P) throw config_error("full_model_t: index out of range");
    const double shat = sigma_hat(s);
    const Eigen::VectorXd coef = restricted_ls(s, d.P);
    Eigen::MatrixXd sig = d.gram.llt().solve(Eigen::MatrixXd::Identity(d.P, d.P));
    return std::sqrt(static_cast<double>(d.n)) * coef(i - 1) /
           (shat * std::sqrt(sig(i - 1, i - 1)));
}

// General-to-specific selection: the largest candidate order whose
// t-statistic clears its critical value.  The zero critical value at the
// family floor makes the result well defined.
inline SelectionOutcome gts_select(const SampleStats& s, const NestedFamily& family) {
    const DesignMatrix& d = *s.design;
    if (family.max_order() != d.P)
        throw config_error("gts_select: family order does not match design");
    SelectionOutcome out;
    out.t_stats.resize(d.P + 1, 0.0);
    const double shat = sigma_hat(s);
    out.sigma_hat = shat;
    const double root_n = std::sqrt(static_cast<double>(d.n));
    for (int p = 1; p <= d.P; ++p) {
        const Eigen::VectorXd coef = restricted_ls(s, p);
        Eigen::MatrixXd sig = d.gram.topLeftCorner(p, p).llt().solve(
            Eigen::MatrixXd::Identity(p, p));
        out.t_stats[p] = root_n * coef(p - 1) / (shat * std::sqrt(sig(p - 1, p - 1)));
    }
    out.order = family.min_order;
    for (int p = d.P; p >= family.min_order; --p) {
        if (std::abs(out.t_stats[p]) >= family.c(p)) {
            out.order = p;
            break;
        }
    }
    return out;
}

// log(RSS) plus the per-coordinate penalty.
inline double ic_score(const SampleStats& s, const std::vector<int>& mask, double upsilon) {
    const DesignMatrix& d = *s.design;
    const double rss = rss_over_n(s, mask) * d.n;
    if (rss < kDegenerateRss)
        throw degenerate_error("ic_score: residual sum of squares is degenerate");
    return std::log(rss) + mask_weight(mask) * upsilon / static_cast<double>(d.n);
}

// Minimizes the information criterion over the family; ties broken by lower
// mask weight, then lexicographically smallest mask.
inline SelectionOutcome ic_select(const SampleStats& s, const SubsetFamily& family) {
    SelectionOutcome out;
    out.sigma_hat = sigma_hat(s);
    out.scores.reserve(family.masks.size());
    int best = -1;
    for (size_t i = 0; i < family.masks.size(); ++i) {
        out.scores.push_back(ic_score(s, family.masks[i], family.upsilon));
        if (best < 0) {
            best = static_cast<int>(i);
            continue;
        }
        const double cur = out.scores[i], ref = out.scores[best];
        if (cur < ref) {
            best = static_cast<int>(i);
        } else if (cur == ref) {
            const auto& a = family.masks[i];
            const auto& b = family.masks[best];
            const int wa = mask_weight(a), wb = mask_weight(b);
            if (wa < wb || (wa == wb && std::lexicographical_compare(a.begin(), a.end(),
                                                                     b.begin(), b.end())))
                best = static_cast<int>(i);
        }
    }
    out.mask_index = best;
    return out;
}

// Post-model-selection estimator: the restricted fit of whichever candidate
// the rule picked, with the outcome attached.
struct PostSelectionEstimate {
    Eigen::VectorXd theta;
    SelectionOutcome outcome;
};

inline PostSelectionEstimate post_selection_estimate(const SampleStats& s,
                                                     const NestedFamily& family) {
    PostSelectionEstimate out;
    out.outcome = gts_select(s, family);
    out.theta = restricted_ls(s, out.outcome.order);
    return out;
}

inline PostSelectionEstimate post_selection_estimate(const SampleStats& s,
                                                     const SubsetFamily& family) {
    PostSelectionEstimate out;
    out.outcome = ic_select(s, family);
    out.theta = subset_ls(s, family.masks[out.outcome.mask_index]);
    return out;
}

} // namespace pmse
