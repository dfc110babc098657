#pragma once

#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "mopjci/conformal.hpp"
#include "mopjci/core.hpp"

namespace mopjci {

// ============================================================================
// Confidence-criterion recursive partitioning over validation-sample bands.
// SCR recalibrates offsets inside every candidate subgroup; SCQR bands are
// fixed, which also forces the width term out of the objective (lambda = 0).
// ============================================================================

// Distance of the group-mean effect outside a sample's band (0 when covered).
double sample_deviation(const Interval& band, double group_mean);

struct GroupCriterion {
    std::vector<double> w_width;    // W_k: mean W-band width per outcome
    std::vector<double> deviation;  // V_k: mean deviation vs the V band per outcome
    double objective = 0.0;
};

struct PartitionContext {
    const Matrix* covariates = nullptr;  // validation covariates, n_val x p
    const IteBands* bands = nullptr;     // global validation bands
    ConformalMethod method = ConformalMethod::Scqr;
    const ValScores* scores = nullptr;   // required for SCR recalibration
    std::vector<double> weights;         // outcome weights tau, size d
    double lambda = 0.25;
    double gamma = 0.05;
    std::size_t min_leaf = 10;
    double w_level = 0.0;  // per-regressor miscoverage levels for recalibration
    double v_level = 0.0;

    static PartitionContext from(const FitResult& fit, const ExperimentConfig& cfg);
};

GroupCriterion group_criterion(std::span<const std::size_t> members,
                               const PartitionContext& ctx);

struct SplitCandidate {
    std::size_t feature = 0;
    double threshold = 0.0;
    double gain = 0.0;
};

// Exhaustive scan over every covariate and every unique member value
// (rule x_j <= v). Branches below min_leaf, or lacking a treatment arm under
// SCR, are inadmissible. Ties break to the lowest feature, then threshold.
// G_split = G_node minus the size-weighted mean of the branch objectives, so
// the criterion stays in per-sample units and an uninformative split has
// zero gain.
std::optional<SplitCandidate> best_split(std::span<const std::size_t> members,
                                         double node_objective,
                                         const PartitionContext& ctx);

struct PartitionNode {
    int feature = -1;  // -1 marks a leaf
    double threshold = 0.0;
    int left = -1;
    int right = -1;
    int group = -1;                        // leaf
    std::vector<std::size_t> members;      // leaf: validation positions
    GroupCriterion criterion;              // leaf
    std::vector<double> mean_effect;       // leaf: per-outcome mean point estimate
};

struct PartitionTree {
    std::vector<PartitionNode> nodes;  // nodes[0] is the root
    std::size_t num_groups = 0;
    std::size_t n_features = 0;

    int assign_group(std::span<const double> x) const;
    std::vector<std::size_t> used_features() const;  // internal-node features, sorted
    nlohmann::json to_json(const std::vector<std::string>& covariate_names) const;
};

// Greedy recursion from the whole validation set; a split is kept iff
// G_split > gamma * G_node with G_node the current node's objective.
PartitionTree build_partition(const PartitionContext& ctx);

}  // namespace mopjci
