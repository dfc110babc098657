#pragma once

// Brute-force partition oracle shared by the unit and acceptance suites.
// Everything here is independent of the library's split-search path: the
// criterion, quantile rule, and candidate enumeration are recomputed from
// scratch.

#include <algorithm>
#include <cmath>
#include <set>
#include <vector>

#include "mopjci/partition.hpp"

namespace mopjci::testing {

struct Fixture {
    Matrix X;
    IteBands bands;
    ValScores scores;  // populated for SCR fixtures
    std::vector<double> weights;

    PartitionContext ctx(ConformalMethod method, double lambda, double gamma,
                         std::size_t min_leaf) const {
        PartitionContext c;
        c.covariates = &X;
        c.bands = &bands;
        c.method = method;
        c.scores = method == ConformalMethod::Scr ? &scores : nullptr;
        c.weights = weights;
        c.lambda = lambda;
        c.gamma = gamma;
        c.min_leaf = min_leaf;
        c.w_level = 0.025;
        c.v_level = 0.2;
        return c;
    }
};

inline Fixture make_fixture(std::size_t n, std::size_t p, std::size_t d) {
    Fixture f;
    f.X = Matrix(n, p);
    f.bands.n = n;
    f.bands.d = d;
    f.bands.point.assign(n * d, 0.0);
    f.bands.w_band.assign(n * d, Interval{});
    f.bands.v_band.assign(n * d, Interval{});
    f.weights.assign(d, 1.0 / static_cast<double>(d));
    return f;
}

inline void set_bands(Fixture& f, std::size_t i, std::size_t k, double point,
                      double v_half, double w_half) {
    const std::size_t at = f.bands.at(i, k);
    f.bands.point[at] = point;
    f.bands.v_band[at] = {point - v_half, point + v_half};
    f.bands.w_band[at] = {point - w_half, point + w_half};
}

inline double oracle_quantile(std::vector<double> scores, double alpha) {
    std::sort(scores.begin(), scores.end());
    const double n = static_cast<double>(scores.size());
    const double level = (1.0 - alpha) * (1.0 + 1.0 / n);
    long k = static_cast<long>(std::ceil(level * n));
    k = std::max(1L, std::min(static_cast<long>(scores.size()), k));
    return scores[static_cast<std::size_t>(k - 1)];
}

inline double oracle_objective(const std::vector<std::size_t>& members, const Fixture& f,
                               ConformalMethod method, double lambda) {
    const std::size_t d = f.bands.d;
    std::vector<double> mean(d, 0.0);
    for (std::size_t i : members)
        for (std::size_t k = 0; k < d; ++k) mean[k] += f.bands.point[f.bands.at(i, k)];
    for (auto& m : mean) m /= static_cast<double>(members.size());

    double objective = 0.0;
    for (std::size_t k = 0; k < d; ++k) {
        double w = 0.0, v = 0.0;
        if (method == ConformalMethod::Scr) {
            double half_v = 0.0;
            for (int arm = 0; arm < 2; ++arm) {
                std::vector<double> rs;
                for (std::size_t i : members)
                    if (f.scores.arm[i] == arm) rs.push_back(f.scores.abs_residual(i, k));
                w += 2.0 * oracle_quantile(rs, 0.025);
                half_v += oracle_quantile(rs, 0.2);
            }
            for (std::size_t i : members) {
                const double point = f.bands.point[f.bands.at(i, k)];
                const double lo = point - half_v, hi = point + half_v;
                if (mean[k] > hi) v += mean[k] - hi;
                else if (mean[k] < lo) v += lo - mean[k];
            }
            v /= static_cast<double>(members.size());
        } else {
            for (std::size_t i : members) {
                w += f.bands.w_band[f.bands.at(i, k)].width();
                const Interval& band = f.bands.v_band[f.bands.at(i, k)];
                if (mean[k] > band.hi) v += mean[k] - band.hi;
                else if (mean[k] < band.lo) v += band.lo - mean[k];
            }
            w /= static_cast<double>(members.size());
            v /= static_cast<double>(members.size());
        }
        const double lam = method == ConformalMethod::Scqr ? 0.0 : lambda;
        objective += f.weights[k] * (lam * w + (1.0 - lam) * v);
    }
    return objective;
}

struct OracleBest {
    bool found = false;
    std::size_t feature = 0;
    double threshold = 0.0;
    double gain = 0.0;
};

inline OracleBest oracle_best_split(const std::vector<std::size_t>& members,
                                    const Fixture& f, ConformalMethod method,
                                    double lambda, std::size_t min_leaf) {
    OracleBest best;
    const double node_obj = oracle_objective(members, f, method, lambda);
    for (std::size_t j = 0; j < f.X.cols(); ++j) {
        std::set<double> values;
        for (std::size_t i : members) values.insert(f.X(i, j));
        for (double thr : values) {
            std::vector<std::size_t> left, right;
            for (std::size_t i : members) (f.X(i, j) <= thr ? left : right).push_back(i);
            if (left.size() < min_leaf || right.size() < min_leaf) continue;
            if (method == ConformalMethod::Scr) {
                auto both = [&](const std::vector<std::size_t>& b) {
                    bool a0 = false, a1 = false;
                    for (std::size_t i : b) (f.scores.arm[i] ? a1 : a0) = true;
                    return a0 && a1;
                };
                if (!both(left) || !both(right)) continue;
            }
            const double child =
                (static_cast<double>(left.size()) *
                     oracle_objective(left, f, method, lambda) +
                 static_cast<double>(right.size()) *
                     oracle_objective(right, f, method, lambda)) /
                static_cast<double>(members.size());
            const double gain = node_obj - child;
            if (!best.found || gain > best.gain) best = {true, j, thr, gain};
        }
    }
    return best;
}

inline Fixture random_fixture(RngStream& rng, bool scr) {
    const std::size_t n = 4 + rng.below(9);  // <= 12 samples
    const std::size_t p = 1 + rng.below(3);
    const std::size_t d = 1 + rng.below(2);
    Fixture f = make_fixture(n, p, d);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < p; ++j)
            f.X(i, j) =
                rng.bernoulli(0.4) ? static_cast<double>(rng.below(3)) : rng.normal();
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t k = 0; k < d; ++k)
            set_bands(f, i, k, rng.normal(0, 5), rng.uniform(0.1, 2.0),
                      rng.uniform(2.0, 4.0));
    if (scr) {
        f.scores.arm.resize(n);
        for (std::size_t i = 0; i < n; ++i) f.scores.arm[i] = static_cast<int>(i % 2);
        f.scores.abs_residual = Matrix(n, d);
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t k = 0; k < d; ++k)
                f.scores.abs_residual(i, k) = rng.uniform(0.0, 3.0);
    }
    if (d == 2) {
        const double beta = rng.uniform(0.0, 1.0);
        f.weights = {beta, 1.0 - beta};
    }
    return f;
}

inline std::vector<std::size_t> all_members(const Fixture& f) {
    std::vector<std::size_t> m(f.bands.n);
    for (std::size_t i = 0; i < m.size(); ++i) m[i] = i;
    return m;
}

inline Fixture slice_first_outcome(const Fixture& two) {
    Fixture one = two;
    one.bands.d = 1;
    one.bands.point.resize(two.bands.n);
    one.bands.w_band.resize(two.bands.n);
    one.bands.v_band.resize(two.bands.n);
    for (std::size_t i = 0; i < two.bands.n; ++i) {
        one.bands.point[i] = two.bands.point[two.bands.at(i, 0)];
        one.bands.w_band[i] = two.bands.w_band[two.bands.at(i, 0)];
        one.bands.v_band[i] = two.bands.v_band[two.bands.at(i, 0)];
    }
    if (!two.scores.empty()) {
        Matrix r(two.bands.n, 1);
        for (std::size_t i = 0; i < two.bands.n; ++i)
            r(i, 0) = two.scores.abs_residual(i, 0);
        one.scores.abs_residual = r;
    }
    one.weights = {1.0};
    return one;
}

inline bool same_structure(const PartitionTree& a, const PartitionTree& b) {
    if (a.nodes.size() != b.nodes.size()) return false;
    for (std::size_t i = 0; i < a.nodes.size(); ++i) {
        if (a.nodes[i].feature != b.nodes[i].feature) return false;
        if (a.nodes[i].threshold != b.nodes[i].threshold) return false;
        if (a.nodes[i].left != b.nodes[i].left) return false;
        if (a.nodes[i].right != b.nodes[i].right) return false;
        if (a.nodes[i].group != b.nodes[i].group) return false;
        if (a.nodes[i].members != b.nodes[i].members) return false;
    }
    return true;
}

}  // namespace mopjci::testing
