#include "mopjci/forest.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

namespace mopjci {

std::size_t MaxFeatures::count(std::size_t p) const {
    std::size_t k = p;
    switch (mode) {
        case Mode::All: k = p; break;
        case Mode::Sqrt: k = static_cast<std::size_t>(std::sqrt(static_cast<double>(p))); break;
        case Mode::Fraction: k = static_cast<std::size_t>(fraction * static_cast<double>(p)); break;
    }
    return std::clamp<std::size_t>(k, 1, p);
}

ForestHyperparams rf_params_synthetic() {
    ForestHyperparams hp;
    hp.n_estimators = 450;
    hp.max_depth = 38;
    hp.min_samples_split = 2;
    hp.min_samples_leaf = 1;
    hp.max_features = MaxFeatures::all();
    hp.bootstrap = true;
    return hp;
}

ForestHyperparams rf_params_semisynthetic() {
    ForestHyperparams hp;
    hp.n_estimators = 450;
    hp.max_depth = 50;
    hp.min_samples_split = 3;
    hp.min_samples_leaf = 1;
    hp.max_features = MaxFeatures::sqrt();
    hp.bootstrap = false;
    return hp;
}

ForestHyperparams qrf_params_default() {
    ForestHyperparams hp;
    hp.n_estimators = 100;
    hp.max_depth = 0;
    hp.min_samples_split = 2;
    hp.min_samples_leaf = 1;
    hp.max_features = MaxFeatures::all();
    hp.bootstrap = true;
    return hp;
}

int RegressionTree::find_leaf(std::span<const double> x) const {
    int node = 0;
    while (nodes[node].feature >= 0) {
        const TreeNode& nd = nodes[node];
        node = x[nd.feature] <= nd.threshold ? nd.left : nd.right;
    }
    return node;
}

namespace {

struct BestSplit {
    int feature = -1;
    double threshold = 0.0;
    double gain = 0.0;
};

class TreeBuilder {
public:
    TreeBuilder(const Matrix& X, std::span<const double> y, const ForestHyperparams& hp,
                ForestKind kind)
        : X_(X), y_(y), hp_(hp), kind_(kind) {}

    RegressionTree build(std::vector<std::size_t> samples, RngStream rng) {
        tree_ = RegressionTree{};
        rng_ = rng;
        samples_ = std::move(samples);
        grow(0, samples_.size(), 0);
        return std::move(tree_);
    }

private:
    // Grows the node over samples_[begin, end); returns its index.
    int grow(std::size_t begin, std::size_t end, int depth) {
        const std::size_t m = end - begin;
        const int node_id = static_cast<int>(tree_.nodes.size());
        tree_.nodes.emplace_back();

        double mean = 0.0;
        for (std::size_t i = begin; i < end; ++i) mean += y_[samples_[i]];
        mean /= static_cast<double>(m);

        const bool depth_ok = hp_.max_depth <= 0 || depth < hp_.max_depth;
        BestSplit best;
        if (depth_ok && m >= static_cast<std::size_t>(hp_.min_samples_split))
            best = find_best_split(begin, end, mean);

        if (best.feature < 0) {
            make_leaf(node_id, begin, end, mean);
            return node_id;
        }

        const auto mid = std::stable_partition(
            samples_.begin() + begin, samples_.begin() + end,
            [&](std::size_t s) { return X_(s, best.feature) <= best.threshold; });
        const std::size_t cut = static_cast<std::size_t>(mid - samples_.begin());

        tree_.nodes[node_id].feature = best.feature;
        tree_.nodes[node_id].threshold = best.threshold;
        const int left = grow(begin, cut, depth + 1);
        tree_.nodes[node_id].left = left;
        const int right = grow(cut, end, depth + 1);
        tree_.nodes[node_id].right = right;
        return node_id;
    }

    void make_leaf(int node_id, std::size_t begin, std::size_t end, double mean) {
        TreeNode& nd = tree_.nodes[node_id];
        nd.feature = -1;
        nd.leaf_mean = mean;
        if (kind_ == ForestKind::Quantile) {
            nd.leaf_begin = static_cast<int>(tree_.leaf_values.size());
            for (std::size_t i = begin; i < end; ++i)
                tree_.leaf_values.push_back(y_[samples_[i]]);
            nd.leaf_end = static_cast<int>(tree_.leaf_values.size());
        }
    }

    std::vector<int> feature_candidates() {
        const std::size_t p = X_.cols();
        const std::size_t k = hp_.max_features.count(p);
        std::vector<int> features;
        if (k == p) {
            features.resize(p);
            for (std::size_t j = 0; j < p; ++j) features[j] = static_cast<int>(j);
            return features;
        }
        std::vector<int> pool(p);
        for (std::size_t j = 0; j < p; ++j) pool[j] = static_cast<int>(j);
        for (std::size_t i = 0; i < k; ++i)
            std::swap(pool[i], pool[i + rng_.below(p - i)]);
        features.assign(pool.begin(), pool.begin() + k);
        std::sort(features.begin(), features.end());
        return features;
    }

    // Candidate thresholds are midpoints between consecutive distinct sorted
    // feature values; ties in gain resolve to the lowest feature index, then
    // the lowest threshold (features and thresholds scanned ascending).
    BestSplit find_best_split(std::size_t begin, std::size_t end, double node_mean) {
        const std::size_t m = end - begin;
        const std::size_t min_leaf = static_cast<std::size_t>(hp_.min_samples_leaf);
        BestSplit best;

        scratch_.resize(m);
        double parent_sse = 0.0;
        for (std::size_t i = begin; i < end; ++i) {
            const double c = y_[samples_[i]] - node_mean;
            parent_sse += c * c;
        }
        // Minimum acceptable gain; filters numerically spurious splits on
        // (near-)constant targets.
        best.gain = 1e-12 * std::max(1.0, parent_sse);

        for (int j : feature_candidates()) {
            for (std::size_t i = 0; i < m; ++i) {
                const std::size_t s = samples_[begin + i];
                scratch_[i] = {X_(s, j), y_[s] - node_mean};
            }
            std::sort(scratch_.begin(), scratch_.end(),
                      [](const auto& a, const auto& b) { return a.first < b.first; });

            double sum_l = 0.0, sum2_l = 0.0;
            double sum_all = 0.0, sum2_all = 0.0;
            for (const auto& [v, c] : scratch_) {
                sum_all += c;
                sum2_all += c * c;
            }
            for (std::size_t i = 0; i + 1 < m; ++i) {
                const double c = scratch_[i].second;
                sum_l += c;
                sum2_l += c * c;
                if (scratch_[i].first == scratch_[i + 1].first) continue;
                const std::size_t n_l = i + 1, n_r = m - n_l;
                if (n_l < min_leaf || n_r < min_leaf) continue;
                const double sum_r = sum_all - sum_l, sum2_r = sum2_all - sum2_l;
                const double sse_l = std::max(0.0, sum2_l - sum_l * sum_l / double(n_l));
                const double sse_r = std::max(0.0, sum2_r - sum_r * sum_r / double(n_r));
                const double gain = parent_sse - sse_l - sse_r;
                if (gain > best.gain) {
                    best.feature = j;
                    best.threshold = (scratch_[i].first + scratch_[i + 1].first) / 2.0;
                    best.gain = gain;
                }
            }
        }
        return best;
    }

    const Matrix& X_;
    std::span<const double> y_;
    const ForestHyperparams& hp_;
    ForestKind kind_;
    RngStream rng_;
    RegressionTree tree_;
    std::vector<std::size_t> samples_;
    std::vector<std::pair<double, double>> scratch_;  // (feature value, centered target)
};

}  // namespace

ForestModel fit_forest(const Matrix& X, std::span<const double> y,
                       const ForestHyperparams& hp, ForestKind kind, RngStream rng) {
    const std::size_t n = X.rows();
    if (n != y.size()) throw std::invalid_argument("fit_forest: X/y length mismatch");
    if (n < static_cast<std::size_t>(hp.min_samples_split))
        throw std::invalid_argument("fit_forest: too few samples");
    if (hp.n_estimators < 1) throw std::invalid_argument("fit_forest: n_estimators < 1");
    for (double v : y)
        if (!std::isfinite(v)) throw std::invalid_argument("fit_forest: non-finite target");

    ForestModel model;
    model.hyperparams = hp;
    model.kind = kind;
    model.n_features = X.cols();
    model.y_min = *std::min_element(y.begin(), y.end());
    model.y_max = *std::max_element(y.begin(), y.end());
    model.trees.reserve(hp.n_estimators);

    TreeBuilder builder(X, y, hp, kind);
    for (int t = 0; t < hp.n_estimators; ++t) {
        RngStream tree_rng = rng.child(static_cast<std::uint64_t>(t));
        std::vector<std::size_t> samples(n);
        if (hp.bootstrap) {
            for (std::size_t i = 0; i < n; ++i) samples[i] = tree_rng.below(n);
        } else {
            for (std::size_t i = 0; i < n; ++i) samples[i] = i;
        }
        model.trees.push_back(builder.build(std::move(samples), tree_rng));
    }
    return model;
}

namespace {

void check_dims(const ForestModel& m, std::span<const double> x) {
    if (x.size() != m.n_features)
        throw std::invalid_argument("prediction input has wrong dimension");
}

}  // namespace

double predict_mean(const ForestModel& m, std::span<const double> x) {
    check_dims(m, x);
    double sum = 0.0;
    for (const RegressionTree& tree : m.trees)
        sum += tree.nodes[tree.find_leaf(x)].leaf_mean;
    return sum / static_cast<double>(m.trees.size());
}

std::vector<double> predict_mean(const ForestModel& m, const Matrix& X) {
    std::vector<double> out(X.rows());
    for (std::size_t i = 0; i < X.rows(); ++i) out[i] = predict_mean(m, X.row(i));
    return out;
}

namespace {

double weighted_quantile(std::vector<std::pair<double, double>>& vw, double q) {
    std::sort(vw.begin(), vw.end());
    double total = 0.0;
    for (const auto& [v, w] : vw) total += w;
    // Midpoint cumulative-weight positions with linear interpolation.
    double cum = 0.0;
    double prev_pos = -1.0, prev_val = vw.front().first;
    for (const auto& [v, w] : vw) {
        const double pos = (cum + w / 2.0) / total;
        if (q <= pos) {
            if (prev_pos < 0.0) return v;  // below the first position: clamp
            return prev_val + (v - prev_val) * (q - prev_pos) / (pos - prev_pos);
        }
        cum += w;
        prev_pos = pos;
        prev_val = v;
    }
    return vw.back().first;  // above the last position: clamp
}

void gather_leaf_weights(const ForestModel& m, std::span<const double> x,
                         std::vector<std::pair<double, double>>& vw) {
    vw.clear();
    const double tree_w = 1.0 / static_cast<double>(m.trees.size());
    for (const RegressionTree& tree : m.trees) {
        const TreeNode& leaf = tree.nodes[tree.find_leaf(x)];
        const int size = leaf.leaf_end - leaf.leaf_begin;
        const double w = tree_w / static_cast<double>(size);
        for (int i = leaf.leaf_begin; i < leaf.leaf_end; ++i)
            vw.emplace_back(tree.leaf_values[i], w);
    }
}

}  // namespace

double predict_quantile(const ForestModel& m, std::span<const double> x, double q) {
    double out = 0.0;
    predict_quantiles(m, x, std::span<const double>(&q, 1), std::span<double>(&out, 1));
    return out;
}

void predict_quantiles(const ForestModel& m, std::span<const double> x,
                       std::span<const double> qs, std::span<double> out) {
    check_dims(m, x);
    if (m.kind != ForestKind::Quantile)
        throw std::invalid_argument("predict_quantile requires a quantile-kind forest");
    for (double q : qs)
        if (!(q > 0.0 && q < 1.0))
            throw std::invalid_argument("quantile level outside (0,1)");
    std::vector<std::pair<double, double>> vw;
    gather_leaf_weights(m, x, vw);
    for (std::size_t i = 0; i < qs.size(); ++i) out[i] = weighted_quantile(vw, qs[i]);
}

std::vector<double> predict_quantile(const ForestModel& m, const Matrix& X, double q) {
    std::vector<double> out(X.rows());
    for (std::size_t i = 0; i < X.rows(); ++i) out[i] = predict_quantile(m, X.row(i), q);
    return out;
}

}  // namespace mopjci
