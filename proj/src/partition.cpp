#include "mopjci/partition.hpp"

#include <algorithm>
#include <set>
#include <stdexcept>

#include <nlohmann/json.hpp>

namespace mopjci {

using nlohmann::json;

double sample_deviation(const Interval& band, double group_mean) {
    if (group_mean > band.hi) return group_mean - band.hi;
    if (group_mean < band.lo) return band.lo - group_mean;
    return 0.0;
}

PartitionContext PartitionContext::from(const FitResult& fit, const ExperimentConfig& cfg) {
    PartitionContext ctx;
    ctx.covariates = &fit.val_covariates;
    ctx.bands = &fit.val_bands;
    ctx.method = fit.calib.method;
    ctx.scores = fit.val_scores.empty() ? nullptr : &fit.val_scores;
    ctx.weights = cfg.outcome_weights;
    ctx.lambda = cfg.lambda;
    ctx.gamma = cfg.gamma;
    ctx.min_leaf = static_cast<std::size_t>(cfg.min_leaf);
    ctx.w_level = fit.calib.w_level;
    ctx.v_level = fit.calib.v_level;
    return ctx;
}

GroupCriterion group_criterion(std::span<const std::size_t> members,
                               const PartitionContext& ctx) {
    if (members.empty()) throw std::invalid_argument("group_criterion: empty group");
    const IteBands& bands = *ctx.bands;
    const std::size_t d = bands.d;
    const double m = static_cast<double>(members.size());

    GroupCriterion crit;
    crit.w_width.assign(d, 0.0);
    crit.deviation.assign(d, 0.0);

    std::vector<double> group_mean(d, 0.0);
    for (std::size_t i : members)
        for (std::size_t k = 0; k < d; ++k) group_mean[k] += bands.point[bands.at(i, k)];
    for (std::size_t k = 0; k < d; ++k) group_mean[k] /= m;

    if (ctx.method == ConformalMethod::Scr) {
        if (ctx.scores == nullptr)
            throw std::invalid_argument("group_criterion: SCR requires validation scores");
        const SubgroupOffsets off =
            recalibrate_subgroup(*ctx.scores, members, ctx.w_level, ctx.v_level);
        for (std::size_t k = 0; k < d; ++k) {
            const double half_w = off.w[k][0] + off.w[k][1];
            const double half_v = off.v[k][0] + off.v[k][1];
            crit.w_width[k] = 2.0 * half_w;  // constant over the subgroup
            double dev = 0.0;
            for (std::size_t i : members) {
                const double point = bands.point[bands.at(i, k)];
                dev += sample_deviation({point - half_v, point + half_v}, group_mean[k]);
            }
            crit.deviation[k] = dev / m;
        }
    } else {
        for (std::size_t k = 0; k < d; ++k) {
            double width = 0.0, dev = 0.0;
            for (std::size_t i : members) {
                const std::size_t at = bands.at(i, k);
                width += bands.w_band[at].width();
                dev += sample_deviation(bands.v_band[at], group_mean[k]);
            }
            crit.w_width[k] = width / m;
            crit.deviation[k] = dev / m;
        }
    }

    const double lambda = ctx.method == ConformalMethod::Scqr ? 0.0 : ctx.lambda;
    double objective = 0.0;
    for (std::size_t k = 0; k < d; ++k)
        objective += ctx.weights[k] * (lambda * crit.w_width[k] +
                                       (1.0 - lambda) * crit.deviation[k]);
    crit.objective = objective;
    return crit;
}

std::optional<SplitCandidate> best_split(std::span<const std::size_t> members,
                                         double node_objective,
                                         const PartitionContext& ctx) {
    const Matrix& X = *ctx.covariates;
    const std::size_t p = X.cols();
    const bool need_arms = ctx.method == ConformalMethod::Scr;

    std::optional<SplitCandidate> best;
    std::vector<double> values;
    std::vector<std::size_t> left, right;
    left.reserve(members.size());
    right.reserve(members.size());

    for (std::size_t j = 0; j < p; ++j) {
        values.clear();
        for (std::size_t i : members) values.push_back(X(i, j));
        std::sort(values.begin(), values.end());
        values.erase(std::unique(values.begin(), values.end()), values.end());

        for (double threshold : values) {
            left.clear();
            right.clear();
            for (std::size_t i : members)
                (X(i, j) <= threshold ? left : right).push_back(i);
            if (left.size() < ctx.min_leaf || right.size() < ctx.min_leaf) continue;
            if (need_arms) {
                auto has_both = [&](const std::vector<std::size_t>& branch) {
                    bool a0 = false, a1 = false;
                    for (std::size_t i : branch) (ctx.scores->arm[i] ? a1 : a0) = true;
                    return a0 && a1;
                };
                if (!has_both(left) || !has_both(right)) continue;
            }
            // Children enter size-weighted so that a split which improves
            // nothing is gain-neutral rather than double-counting the
            // deviation of every unimproved outcome.
            const double n_l = static_cast<double>(left.size());
            const double n_r = static_cast<double>(right.size());
            const double child =
                (n_l * group_criterion(left, ctx).objective +
                 n_r * group_criterion(right, ctx).objective) /
                static_cast<double>(members.size());
            const double gain = node_objective - child;
            if (!best || gain > best->gain) best = SplitCandidate{j, threshold, gain};
        }
    }
    return best;
}

namespace {

class TreeGrower {
public:
    explicit TreeGrower(const PartitionContext& ctx) : ctx_(ctx) {}

    PartitionTree run() {
        PartitionTree tree;
        tree.n_features = ctx_.covariates->cols();
        tree_ = &tree;
        std::vector<std::size_t> all(ctx_.bands->n);
        for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
        grow(std::move(all));
        tree.num_groups = static_cast<std::size_t>(next_group_);
        return tree;
    }

private:
    int grow(std::vector<std::size_t> members) {
        const GroupCriterion crit = group_criterion(members, ctx_);
        const auto cand = best_split(members, crit.objective, ctx_);
        const int node_id = static_cast<int>(tree_->nodes.size());
        tree_->nodes.emplace_back();

        if (cand && cand->gain > ctx_.gamma * crit.objective) {
            std::vector<std::size_t> left, right;
            for (std::size_t i : members)
                ((*ctx_.covariates)(i, cand->feature) <= cand->threshold ? left : right)
                    .push_back(i);
            tree_->nodes[node_id].feature = static_cast<int>(cand->feature);
            tree_->nodes[node_id].threshold = cand->threshold;
            const int l = grow(std::move(left));
            tree_->nodes[node_id].left = l;
            const int r = grow(std::move(right));
            tree_->nodes[node_id].right = r;
            return node_id;
        }

        PartitionNode& leaf = tree_->nodes[node_id];
        leaf.group = next_group_++;
        leaf.criterion = crit;
        const std::size_t d = ctx_.bands->d;
        leaf.mean_effect.assign(d, 0.0);
        for (std::size_t i : members)
            for (std::size_t k = 0; k < d; ++k)
                leaf.mean_effect[k] += ctx_.bands->point[ctx_.bands->at(i, k)];
        for (std::size_t k = 0; k < d; ++k)
            leaf.mean_effect[k] /= static_cast<double>(members.size());
        leaf.members = std::move(members);
        return node_id;
    }

    const PartitionContext& ctx_;
    PartitionTree* tree_ = nullptr;
    int next_group_ = 0;
};

}  // namespace

PartitionTree build_partition(const PartitionContext& ctx) {
    if (ctx.bands == nullptr || ctx.covariates == nullptr)
        throw std::invalid_argument("build_partition: missing bands or covariates");
    if (ctx.bands->n != ctx.covariates->rows())
        throw std::invalid_argument("build_partition: bands/covariates row mismatch");
    if (ctx.weights.size() != ctx.bands->d)
        throw std::invalid_argument("build_partition: weight count != outcome count");
    if (ctx.bands->n < 2 * ctx.min_leaf)
        throw std::invalid_argument("build_partition: validation set smaller than 2*min_leaf");
    return TreeGrower(ctx).run();
}

int PartitionTree::assign_group(std::span<const double> x) const {
    if (x.size() != n_features)
        throw std::invalid_argument("assign_group: wrong covariate dimension");
    int node = 0;
    while (nodes[node].feature >= 0)
        node = x[nodes[node].feature] <= nodes[node].threshold ? nodes[node].left
                                                               : nodes[node].right;
    return nodes[node].group;
}

std::vector<std::size_t> PartitionTree::used_features() const {
    std::set<std::size_t> used;
    for (const PartitionNode& nd : nodes)
        if (nd.feature >= 0) used.insert(static_cast<std::size_t>(nd.feature));
    return {used.begin(), used.end()};
}

namespace {

json node_to_json(const PartitionTree& tree, int id,
                  const std::vector<std::string>& names) {
    const PartitionNode& nd = tree.nodes[id];
    json j;
    if (nd.feature >= 0) {
        j["covariate"] = nd.feature;
        if (static_cast<std::size_t>(nd.feature) < names.size())
            j["name"] = names[nd.feature];
        j["threshold"] = nd.threshold;
        j["left"] = node_to_json(tree, nd.left, names);
        j["right"] = node_to_json(tree, nd.right, names);
    } else {
        j["group"] = nd.group;
        j["size"] = nd.members.size();
        j["means"] = nd.mean_effect;
        j["criterion"] = {{"w_width", nd.criterion.w_width},
                          {"deviation", nd.criterion.deviation},
                          {"objective", nd.criterion.objective}};
    }
    return j;
}

}  // namespace

json PartitionTree::to_json(const std::vector<std::string>& covariate_names) const {
    return node_to_json(*this, 0, covariate_names);
}

}  // namespace mopjci
