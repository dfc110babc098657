#pragma once

#include <array>
#include <cstddef>
#include <span>
#include <vector>

#include "mopjci/core.hpp"
#include "mopjci/forest.hpp"

namespace mopjci {

// ============================================================================
// Split conformal calibration (SCR / SCQR), treated-vs-control ITE intervals,
// and the multi-outcome miscoverage budget.
// ============================================================================

enum class ConformalMethod { Scr, Scqr };

// Quantile level (1 - alpha)(1 + 1/n_val); may exceed 1.
double conformal_quantile_level(std::size_t n_val, double alpha);

// k-th smallest score with k = ceil(level * n), clamped to [1, n].
double score_quantile(std::span<const double> scores, double alpha);

// Q-hat from absolute residuals |y_i - prediction_i|.
double scr_calibrate(std::span<const double> predictions, std::span<const double> y,
                     double alpha);
double scr_calibrate(const ForestModel& model, const Matrix& X_val,
                     std::span<const double> y_val, double alpha);

// Q-hat from CQR scores E_i = max(q_lo(x_i) - y_i, y_i - q_hi(x_i)).
// Scores, and therefore the offset, may be negative.
double scqr_calibrate(std::span<const double> q_lo, std::span<const double> q_hi,
                      std::span<const double> y, double alpha);

// [treated.lo - control.hi, treated.hi - control.lo].
Interval ite_interval(const Interval& treated, const Interval& control);

// alpha / (2d): per-regressor budget after the treated/control halving and the
// d-outcome Bonferroni correction.
double per_regressor_miscoverage(double alpha, std::size_t d);

// ----------------------------------------------------------------------------
// Per-sample per-outcome bands: point ITE estimate, W band (overall
// miscoverage alpha) and V band (overall miscoverage alpha_v, narrower).
// ----------------------------------------------------------------------------
struct IteBands {
    std::size_t n = 0;
    std::size_t d = 0;
    std::vector<double> point;     // n*d, row-major
    std::vector<Interval> w_band;  // n*d
    std::vector<Interval> v_band;  // n*d
    int crossing_count = 0;        // arm intervals repaired after a negative offset
    int nesting_clamps = 0;        // V bands clipped into the W band (SCQR only;
                                   // nesting is exact by construction for SCR)

    std::size_t at(std::size_t i, std::size_t k) const { return i * d + k; }
};

// ----------------------------------------------------------------------------
// Fitted arm regressors plus calibration offsets at both band levels.
// ----------------------------------------------------------------------------
class ConformalCalibration {
public:
    struct ArmModel {
        ForestModel model;
        double offset_w = 0.0;  // Q-hat at per-regressor level alpha/(2d)
        double offset_v = 0.0;  // Q-hat at per-regressor level alpha_v/(2d)
    };

    ConformalMethod method = ConformalMethod::Scr;
    std::size_t d = 0;
    double w_level = 0.0;  // per-regressor miscoverage of the W band
    double v_level = 0.0;  // per-regressor miscoverage of the V band
    std::vector<std::array<ArmModel, 2>> per_outcome;  // [outcome][arm]

    // Bands for arbitrary covariates using the global offsets.
    IteBands make_bands(const Matrix& X) const;
    // Point ITE estimates only (mean difference for SCR, median difference
    // for SCQR), n*d row-major.
    std::vector<double> point_estimates(const Matrix& X) const;
};

// ----------------------------------------------------------------------------
// Per-validation-sample material retained for SCR subgroup recalibration.
// ----------------------------------------------------------------------------
struct ValScores {
    std::vector<int> arm;  // n_val
    Matrix mu_treated;     // n_val x d
    Matrix mu_control;     // n_val x d
    Matrix abs_residual;   // n_val x d, residual of the sample's own arm model

    std::size_t n() const { return arm.size(); }
    bool empty() const { return arm.empty(); }
};

struct SubgroupOffsets {
    std::vector<std::array<double, 2>> w;  // [outcome][arm]
    std::vector<std::array<double, 2>> v;
};

// Q-hats recomputed from only the subgroup's validation residuals. Requires
// at least one member per arm (enforced upstream via split admissibility).
SubgroupOffsets recalibrate_subgroup(const ValScores& scores,
                                     std::span<const std::size_t> members,
                                     double w_level, double v_level);

struct FitResult {
    ConformalCalibration calib;
    std::vector<std::size_t> val_indices;  // rows of the input dataset in I_val
    Matrix val_covariates;                 // covariate rows of I_val
    IteBands val_bands;                    // bands over I_val, global offsets
    ValScores val_scores;                  // empty for SCQR
};

// Full pipeline: stratified 50/50 split, per-(outcome, arm) fits on I_tr,
// offset calibration at both band levels, and bands for every I_val sample.
FitResult fit_and_band(const TrialDataset& ds, const ExperimentConfig& cfg,
                       const ForestHyperparams& hp, RngStream rng);

// Variant over a precomputed split and prefitted arm models (models[k][arm]
// trained on the I_tr rows of that arm). Lets callers share fits across
// configurations that differ only in miscoverage levels or outcome subsets.
FitResult calibrate_and_band(const TrialDataset& ds, const SplitIndices& split,
                             std::vector<std::array<ForestModel, 2>> models,
                             const ExperimentConfig& cfg);

}  // namespace mopjci
