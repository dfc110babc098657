#pragma once

#include <span>
#include <vector>

#include "mopjci/core.hpp"

namespace mopjci {

// ============================================================================
// Random-forest regressors grown by greedy variance-reduction CART.
// Mean forests keep leaf means; quantile forests keep the full leaf target
// multisets and serve Meinshausen-style weighted empirical quantiles.
// ============================================================================

struct MaxFeatures {
    enum class Mode { All, Sqrt, Fraction };
    Mode mode = Mode::All;
    double fraction = 1.0;

    static MaxFeatures all() { return {Mode::All, 1.0}; }
    static MaxFeatures sqrt() { return {Mode::Sqrt, 1.0}; }
    static MaxFeatures frac(double f) { return {Mode::Fraction, f}; }

    std::size_t count(std::size_t p) const;
};

struct ForestHyperparams {
    int n_estimators = 100;
    int max_depth = 0;  // <= 0 means unlimited
    int min_samples_split = 2;
    int min_samples_leaf = 1;
    MaxFeatures max_features{};
    bool bootstrap = true;
};

// Tuned RF settings for the synthetic and semi-synthetic benchmarks.
ForestHyperparams rf_params_synthetic();
ForestHyperparams rf_params_semisynthetic();
// QRF runs untuned.
ForestHyperparams qrf_params_default();

enum class ForestKind { Mean, Quantile };

struct TreeNode {
    int feature = -1;  // -1 marks a leaf
    double threshold = 0.0;
    int left = -1;
    int right = -1;
    double leaf_mean = 0.0;
    int leaf_begin = 0;  // into RegressionTree::leaf_values (quantile kind only)
    int leaf_end = 0;
};

struct RegressionTree {
    std::vector<TreeNode> nodes;      // nodes[0] is the root
    std::vector<double> leaf_values;  // concatenated leaf target multisets

    int find_leaf(std::span<const double> x) const;
};

struct ForestModel {
    std::vector<RegressionTree> trees;
    ForestHyperparams hyperparams;
    ForestKind kind = ForestKind::Mean;
    std::size_t n_features = 0;
    double y_min = 0.0;
    double y_max = 0.0;
};

// Deterministic given (X, y, hp, rng). Constant targets are fine and yield a
// constant predictor; n < min_samples_split throws.
ForestModel fit_forest(const Matrix& X, std::span<const double> y,
                       const ForestHyperparams& hp, ForestKind kind, RngStream rng);

double predict_mean(const ForestModel& m, std::span<const double> x);
std::vector<double> predict_mean(const ForestModel& m, const Matrix& X);

// Weighted empirical quantile across reached leaves: each target in a reached
// leaf carries weight 1/(n_trees * leaf_size). Quantile convention: linear
// interpolation between order statistics at midpoint cumulative-weight
// positions p_i = (W_{<i} + w_i/2) / W, clamped to [min, max] outside.
// For a single leaf {1,2,3,4}, q = 0.5 gives 2.5.
double predict_quantile(const ForestModel& m, std::span<const double> x, double q);
std::vector<double> predict_quantile(const ForestModel& m, const Matrix& X, double q);

// Several quantiles of the same point in one leaf-gather pass; `qs` need not
// be sorted.
void predict_quantiles(const ForestModel& m, std::span<const double> x,
                       std::span<const double> qs, std::span<double> out);

}  // namespace mopjci
