#pragma once

#include <span>
#include <vector>

#include "mopjci/conformal.hpp"
#include "mopjci/core.hpp"
#include "mopjci/partition.hpp"

namespace mopjci {

// ============================================================================
// Held-out evaluation metrics over test samples routed through a partition.
// Variance estimators are the unbiased (n-1) form throughout.
// ============================================================================

// Variance of the group means; 0 for a single group.
double v_across(const std::vector<std::vector<double>>& group_values);

// Mean over groups of the within-group variance; singleton groups contribute 0.
double v_within(const std::vector<std::vector<double>>& group_values);

// Root mean squared error between estimated and true effects.
double pehe(std::span<const double> true_ite, std::span<const double> est_ite);

// Fraction of samples whose true effect lies in the W band for every outcome
// simultaneously. true_ite is n x d aligned with the bands.
double coverage_joint(const Matrix& true_ite, const IteBands& bands);

struct SplitFlags {
    int acc = 0;  // 1 iff every expected covariate appears in an internal node
    int err = 0;  // 1 iff any unexpected covariate appears in an internal node
};
SplitFlags split_accuracy(const PartitionTree& tree,
                          std::span<const std::size_t> expected,
                          std::span<const std::size_t> unexpected);

}  // namespace mopjci
