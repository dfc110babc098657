#include "mopjci/conformal.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace mopjci {

double conformal_quantile_level(std::size_t n_val, double alpha) {
    return (1.0 - alpha) * (1.0 + 1.0 / static_cast<double>(n_val));
}

double score_quantile(std::span<const double> scores, double alpha) {
    if (scores.empty()) throw std::invalid_argument("empty validation set");
    const std::size_t n = scores.size();
    const double level = conformal_quantile_level(n, alpha);
    std::size_t k = static_cast<std::size_t>(std::ceil(level * static_cast<double>(n)));
    k = std::clamp<std::size_t>(k, 1, n);
    std::vector<double> sorted(scores.begin(), scores.end());
    std::nth_element(sorted.begin(), sorted.begin() + (k - 1), sorted.end());
    return sorted[k - 1];
}

double scr_calibrate(std::span<const double> predictions, std::span<const double> y,
                     double alpha) {
    if (predictions.size() != y.size())
        throw std::invalid_argument("scr_calibrate: prediction/target length mismatch");
    std::vector<double> residuals(y.size());
    for (std::size_t i = 0; i < y.size(); ++i) residuals[i] = std::abs(y[i] - predictions[i]);
    return score_quantile(residuals, alpha);
}

double scr_calibrate(const ForestModel& model, const Matrix& X_val,
                     std::span<const double> y_val, double alpha) {
    const std::vector<double> pred = predict_mean(model, X_val);
    return scr_calibrate(pred, y_val, alpha);
}

double scqr_calibrate(std::span<const double> q_lo, std::span<const double> q_hi,
                      std::span<const double> y, double alpha) {
    if (q_lo.size() != y.size() || q_hi.size() != y.size())
        throw std::invalid_argument("scqr_calibrate: length mismatch");
    std::vector<double> scores(y.size());
    for (std::size_t i = 0; i < y.size(); ++i)
        scores[i] = std::max(q_lo[i] - y[i], y[i] - q_hi[i]);
    return score_quantile(scores, alpha);
}

Interval ite_interval(const Interval& treated, const Interval& control) {
    return {treated.lo - control.hi, treated.hi - control.lo};
}

double per_regressor_miscoverage(double alpha, std::size_t d) {
    return alpha / (2.0 * static_cast<double>(d));
}

namespace {

// Arm interval after the conformal offset; a negative SCQR offset can cross
// the bounds, in which case the interval degenerates to its midpoint.
Interval arm_interval(double lo, double hi, double offset, int& crossings) {
    Interval iv{lo - offset, hi + offset};
    if (iv.lo > iv.hi) {
        const double mid = (iv.lo + iv.hi) / 2.0;
        iv = {mid, mid};
        ++crossings;
    }
    return iv;
}

struct ScqrPredictions {
    std::vector<double> lo_w, hi_w, lo_v, hi_v, med;  // per row of X
};

ScqrPredictions scqr_predict(const ForestModel& model, const Matrix& X, double w_level,
                             double v_level) {
    ScqrPredictions out;
    const std::size_t n = X.rows();
    out.lo_w.resize(n);
    out.hi_w.resize(n);
    out.lo_v.resize(n);
    out.hi_v.resize(n);
    out.med.resize(n);
    const std::array<double, 5> qs = {w_level / 2.0, 1.0 - w_level / 2.0,
                                      v_level / 2.0, 1.0 - v_level / 2.0, 0.5};
    std::array<double, 5> vals{};
    for (std::size_t i = 0; i < n; ++i) {
        predict_quantiles(model, X.row(i), qs, vals);
        out.lo_w[i] = vals[0];
        out.hi_w[i] = vals[1];
        out.lo_v[i] = vals[2];
        out.hi_v[i] = vals[3];
        out.med[i] = vals[4];
    }
    return out;
}

}  // namespace

IteBands ConformalCalibration::make_bands(const Matrix& X) const {
    IteBands bands;
    bands.n = X.rows();
    bands.d = d;
    bands.point.resize(bands.n * d);
    bands.w_band.resize(bands.n * d);
    bands.v_band.resize(bands.n * d);

    for (std::size_t k = 0; k < d; ++k) {
        const ArmModel& treated = per_outcome[k][1];
        const ArmModel& control = per_outcome[k][0];
        if (method == ConformalMethod::Scr) {
            const std::vector<double> mu1 = predict_mean(treated.model, X);
            const std::vector<double> mu0 = predict_mean(control.model, X);
            for (std::size_t i = 0; i < bands.n; ++i) {
                const std::size_t at = bands.at(i, k);
                bands.point[at] = mu1[i] - mu0[i];
                bands.w_band[at] = ite_interval({mu1[i] - treated.offset_w, mu1[i] + treated.offset_w},
                                                {mu0[i] - control.offset_w, mu0[i] + control.offset_w});
                bands.v_band[at] = ite_interval({mu1[i] - treated.offset_v, mu1[i] + treated.offset_v},
                                                {mu0[i] - control.offset_v, mu0[i] + control.offset_v});
            }
        } else {
            const ScqrPredictions p1 = scqr_predict(treated.model, X, w_level, v_level);
            const ScqrPredictions p0 = scqr_predict(control.model, X, w_level, v_level);
            for (std::size_t i = 0; i < bands.n; ++i) {
                const std::size_t at = bands.at(i, k);
                bands.point[at] = p1.med[i] - p0.med[i];
                const Interval t_w =
                    arm_interval(p1.lo_w[i], p1.hi_w[i], treated.offset_w, bands.crossing_count);
                const Interval c_w =
                    arm_interval(p0.lo_w[i], p0.hi_w[i], control.offset_w, bands.crossing_count);
                const Interval t_v =
                    arm_interval(p1.lo_v[i], p1.hi_v[i], treated.offset_v, bands.crossing_count);
                const Interval c_v =
                    arm_interval(p0.lo_v[i], p0.hi_v[i], control.offset_v, bands.crossing_count);
                const Interval w = ite_interval(t_w, c_w);
                Interval v = ite_interval(t_v, c_v);
                // The quantile bands nest by construction, but the two offsets
                // come from different score sets; clip the rare excursion.
                if (v.lo < w.lo || v.hi > w.hi) {
                    v = {std::max(v.lo, w.lo), std::min(v.hi, w.hi)};
                    if (v.lo > v.hi) {
                        const double mid =
                            std::clamp((v.lo + v.hi) / 2.0, w.lo, w.hi);
                        v = {mid, mid};
                    }
                    ++bands.nesting_clamps;
                }
                bands.w_band[at] = w;
                bands.v_band[at] = v;
            }
        }
    }
    return bands;
}

std::vector<double> ConformalCalibration::point_estimates(const Matrix& X) const {
    std::vector<double> out(X.rows() * d);
    for (std::size_t k = 0; k < d; ++k) {
        std::vector<double> v1, v0;
        if (method == ConformalMethod::Scr) {
            v1 = predict_mean(per_outcome[k][1].model, X);
            v0 = predict_mean(per_outcome[k][0].model, X);
        } else {
            v1 = predict_quantile(per_outcome[k][1].model, X, 0.5);
            v0 = predict_quantile(per_outcome[k][0].model, X, 0.5);
        }
        for (std::size_t i = 0; i < X.rows(); ++i) out[i * d + k] = v1[i] - v0[i];
    }
    return out;
}

SubgroupOffsets recalibrate_subgroup(const ValScores& scores,
                                     std::span<const std::size_t> members,
                                     double w_level, double v_level) {
    const std::size_t d = scores.abs_residual.cols();
    SubgroupOffsets out;
    out.w.resize(d);
    out.v.resize(d);
    std::vector<double> arm_scores;
    for (int arm = 0; arm < 2; ++arm) {
        arm_scores.clear();
        for (std::size_t m : members)
            if (scores.arm[m] == arm) arm_scores.push_back(0.0);
        if (arm_scores.empty())
            throw std::invalid_argument("subgroup lacks validation samples in one arm");
        for (std::size_t k = 0; k < d; ++k) {
            std::size_t idx = 0;
            for (std::size_t m : members)
                if (scores.arm[m] == arm) arm_scores[idx++] = scores.abs_residual(m, k);
            out.w[k][arm] = score_quantile(arm_scores, w_level);
            out.v[k][arm] = score_quantile(arm_scores, v_level);
        }
    }
    return out;
}

FitResult calibrate_and_band(const TrialDataset& ds, const SplitIndices& split,
                             std::vector<std::array<ForestModel, 2>> models,
                             const ExperimentConfig& cfg) {
    const std::size_t d = ds.d();
    if (models.size() != d)
        throw std::invalid_argument("calibrate_and_band: model count != outcome count");

    FitResult result;
    result.val_indices = split.validate;
    ConformalCalibration& calib = result.calib;
    calib.method = cfg.estimator == Estimator::RfScr ? ConformalMethod::Scr
                                                     : ConformalMethod::Scqr;
    calib.d = d;
    calib.w_level = per_regressor_miscoverage(cfg.alpha, d);
    calib.v_level = per_regressor_miscoverage(cfg.alpha_v, d);

    const Matrix X_val = ds.covariates.subset_rows(split.validate);
    const std::size_t n_val = split.validate.size();
    std::vector<int> val_arm(n_val);
    std::vector<std::vector<std::size_t>> arm_pos(2);  // positions within I_val per arm
    for (std::size_t i = 0; i < n_val; ++i) {
        val_arm[i] = ds.treatment[split.validate[i]];
        arm_pos[val_arm[i]].push_back(i);
    }
    if (arm_pos[0].empty() || arm_pos[1].empty())
        throw std::invalid_argument("validation part lacks a treatment arm");

    calib.per_outcome.resize(d);
    const bool scr = calib.method == ConformalMethod::Scr;
    if (scr) {
        result.val_scores.arm = val_arm;
        result.val_scores.mu_treated = Matrix(n_val, d);
        result.val_scores.mu_control = Matrix(n_val, d);
        result.val_scores.abs_residual = Matrix(n_val, d);
    }

    for (std::size_t k = 0; k < d; ++k) {
        for (int arm = 0; arm < 2; ++arm) {
            ConformalCalibration::ArmModel& am = calib.per_outcome[k][arm];
            am.model = std::move(models[k][arm]);
            std::vector<double> y_arm;
            y_arm.reserve(arm_pos[arm].size());
            for (std::size_t i : arm_pos[arm]) y_arm.push_back(ds.outcomes(split.validate[i], k));

            if (scr) {
                const std::vector<double> mu = predict_mean(am.model, X_val);
                Matrix& mu_out =
                    arm == 1 ? result.val_scores.mu_treated : result.val_scores.mu_control;
                for (std::size_t i = 0; i < n_val; ++i) mu_out(i, k) = mu[i];
                std::vector<double> residuals;
                residuals.reserve(arm_pos[arm].size());
                for (std::size_t j = 0; j < arm_pos[arm].size(); ++j) {
                    const std::size_t i = arm_pos[arm][j];
                    const double r = std::abs(y_arm[j] - mu[i]);
                    residuals.push_back(r);
                    result.val_scores.abs_residual(i, k) = r;
                }
                am.offset_w = score_quantile(residuals, calib.w_level);
                am.offset_v = score_quantile(residuals, calib.v_level);
            } else {
                const Matrix X_arm = X_val.subset_rows(arm_pos[arm]);
                const ScqrPredictions p =
                    scqr_predict(am.model, X_arm, calib.w_level, calib.v_level);
                am.offset_w = scqr_calibrate(p.lo_w, p.hi_w, y_arm, calib.w_level);
                am.offset_v = scqr_calibrate(p.lo_v, p.hi_v, y_arm, calib.v_level);
            }
        }
    }

    result.val_bands = calib.make_bands(X_val);
    result.val_covariates = X_val;
    return result;
}

FitResult fit_and_band(const TrialDataset& ds, const ExperimentConfig& cfg,
                       const ForestHyperparams& hp, RngStream rng) {
    validate_dataset(ds);
    cfg.validate(ds.d());

    RngStream split_rng = rng.child(0);
    const SplitIndices split = split_train_validate_indices(ds, split_rng);

    std::vector<std::size_t> tr_arm[2];
    for (std::size_t r : split.train) tr_arm[ds.treatment[r]].push_back(r);
    if (tr_arm[0].size() < static_cast<std::size_t>(hp.min_samples_split) ||
        tr_arm[1].size() < static_cast<std::size_t>(hp.min_samples_split))
        throw std::invalid_argument("training arm too small for the forest");

    const ForestKind kind =
        cfg.estimator == Estimator::RfScr ? ForestKind::Mean : ForestKind::Quantile;
    RngStream fit_rng = rng.child(1);
    std::vector<std::array<ForestModel, 2>> models(ds.d());
    for (std::size_t k = 0; k < ds.d(); ++k) {
        for (int arm = 0; arm < 2; ++arm) {
            const Matrix X_tr = ds.covariates.subset_rows(tr_arm[arm]);
            std::vector<double> y_tr;
            y_tr.reserve(tr_arm[arm].size());
            for (std::size_t r : tr_arm[arm]) y_tr.push_back(ds.outcomes(r, k));
            models[k][arm] =
                fit_forest(X_tr, y_tr, hp, kind, fit_rng.child(2 * k + arm));
        }
    }
    return calibrate_and_band(ds, split, std::move(models), cfg);
}

}  // namespace mopjci
