#include "mopjci/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace mopjci {

namespace {

double mean_of(std::span<const double> v) {
    double sum = 0.0;
    for (double x : v) sum += x;
    return sum / static_cast<double>(v.size());
}

double sample_variance(std::span<const double> v) {
    if (v.size() < 2) return 0.0;
    const double m = mean_of(v);
    double ss = 0.0;
    for (double x : v) ss += (x - m) * (x - m);
    return ss / static_cast<double>(v.size() - 1);
}

}  // namespace

double v_across(const std::vector<std::vector<double>>& group_values) {
    if (group_values.empty()) throw std::invalid_argument("v_across: no groups");
    std::vector<double> means;
    means.reserve(group_values.size());
    for (const auto& g : group_values) {
        if (g.empty()) throw std::invalid_argument("v_across: empty group");
        means.push_back(mean_of(g));
    }
    return sample_variance(means);
}

double v_within(const std::vector<std::vector<double>>& group_values) {
    if (group_values.empty()) throw std::invalid_argument("v_within: no groups");
    double sum = 0.0;
    for (const auto& g : group_values) {
        if (g.empty()) throw std::invalid_argument("v_within: empty group");
        sum += sample_variance(g);
    }
    return sum / static_cast<double>(group_values.size());
}

double pehe(std::span<const double> true_ite, std::span<const double> est_ite) {
    if (true_ite.size() != est_ite.size())
        throw std::invalid_argument("pehe: length mismatch");
    if (true_ite.empty()) throw std::invalid_argument("pehe: empty input");
    double ss = 0.0;
    for (std::size_t i = 0; i < true_ite.size(); ++i) {
        const double e = est_ite[i] - true_ite[i];
        ss += e * e;
    }
    return std::sqrt(ss / static_cast<double>(true_ite.size()));
}

double coverage_joint(const Matrix& true_ite, const IteBands& bands) {
    if (true_ite.rows() != bands.n || true_ite.cols() != bands.d)
        throw std::invalid_argument("coverage_joint: shape mismatch");
    if (bands.n == 0) throw std::invalid_argument("coverage_joint: no samples");
    std::size_t covered = 0;
    for (std::size_t i = 0; i < bands.n; ++i) {
        bool all = true;
        for (std::size_t k = 0; k < bands.d; ++k)
            if (!bands.w_band[bands.at(i, k)].contains(true_ite(i, k))) {
                all = false;
                break;
            }
        covered += all ? 1 : 0;
    }
    return static_cast<double>(covered) / static_cast<double>(bands.n);
}

SplitFlags split_accuracy(const PartitionTree& tree,
                          std::span<const std::size_t> expected,
                          std::span<const std::size_t> unexpected) {
    const std::vector<std::size_t> used = tree.used_features();
    auto is_used = [&](std::size_t j) {
        return std::binary_search(used.begin(), used.end(), j);
    };
    SplitFlags flags;
    flags.acc = 1;
    for (std::size_t j : expected)
        if (!is_used(j)) {
            flags.acc = 0;
            break;
        }
    for (std::size_t j : unexpected)
        if (is_used(j)) {
            flags.err = 1;
            break;
        }
    return flags;
}

}  // namespace mopjci
