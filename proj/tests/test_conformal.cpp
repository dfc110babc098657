#include <doctest.h>

#include <cmath>
#include <stdexcept>

#include "mopjci/conformal.hpp"
#include "mopjci/datagen.hpp"
#include "test_helpers.hpp"

using namespace mopjci;
using mopjci::testing::make_dataset;

TEST_CASE("conformal quantile level and order-statistic rule") {
    CHECK(conformal_quantile_level(100, 0.1) == doctest::Approx(0.909));
    CHECK(conformal_quantile_level(4, 0.5) == doctest::Approx(0.625));
    CHECK(conformal_quantile_level(2, 0.05) > 1.0);

    // residuals {1,2,3,4} at alpha=0.5: level 0.625 -> 3rd of 4
    CHECK(score_quantile(std::vector<double>{1, 2, 3, 4}, 0.5) == 3.0);
    // scores may be negative: {-1,-1,2,3} -> 3rd smallest = 2
    CHECK(score_quantile(std::vector<double>{-1, -1, 2, 3}, 0.5) == 2.0);
    // level above 1 clamps to the max score
    CHECK(score_quantile(std::vector<double>{4, 9}, 0.05) == 9.0);
    CHECK_THROWS_AS(score_quantile(std::vector<double>{}, 0.1), std::invalid_argument);
}

TEST_CASE("scr calibration") {
    SUBCASE("perfect model") {
        const std::vector<double> pred = {1, 2, 3};
        CHECK(scr_calibrate(pred, pred, 0.1) == 0.0);
    }
    SUBCASE("constant residuals") {
        const std::vector<double> pred = {0, 0, 0, 0};
        const std::vector<double> y = {2.5, -2.5, 2.5, -2.5};
        CHECK(scr_calibrate(pred, y, 0.3) == 2.5);
    }
    SUBCASE("sorted index rule") {
        const std::vector<double> pred = {0, 0, 0, 0};
        const std::vector<double> y = {1, -2, 3, -4};
        CHECK(scr_calibrate(pred, y, 0.5) == 3.0);
    }
}

TEST_CASE("scqr calibration") {
    SUBCASE("targets exactly on the upper quantile") {
        const std::vector<double> lo = {0, 0, 0};
        const std::vector<double> hi = {1, 2, 3};
        const std::vector<double> y = hi;
        CHECK(scqr_calibrate(lo, hi, y, 0.2) == 0.0);
    }
    SUBCASE("negative offset when all targets sit inside the band") {
        const std::vector<double> lo = {0, 0, 0, 0};
        const std::vector<double> hi = {10, 10, 10, 10};
        const std::vector<double> y = {4, 5, 5, 6};  // margin >= 4 on both sides
        CHECK(scqr_calibrate(lo, hi, y, 0.5) <= -4.0);
    }
    SUBCASE("mixed-sign scores use the same index rule") {
        // E_i = max(lo - y, y - hi) comes out {-1, -1, 2, 3}; 3rd smallest = 2.
        const std::vector<double> lo = {-5, -5, -5, -5};
        const std::vector<double> hi = {1, 1, 1, 1};
        const std::vector<double> y = {0.0, 0.0, 3.0, 4.0};
        CHECK(scqr_calibrate(lo, hi, y, 0.5) == 2.0);
    }
}

TEST_CASE("ite_interval composition") {
    CHECK(ite_interval({1, 3}, {0, 1}) == Interval{0, 3});
    const Interval sym = ite_interval({2, 5}, {2, 5});
    CHECK(sym.lo == -3.0);
    CHECK(sym.hi == 3.0);
    CHECK(ite_interval({2, 2}, {1, 1}) == Interval{1, 1});

    // width additivity
    RngStream rng(8);
    for (int i = 0; i < 1000; ++i) {
        const double a = rng.normal(), b = a + rng.uniform();
        const double c = rng.normal(), d = c + rng.uniform();
        const Interval ite = ite_interval({a, b}, {c, d});
        CHECK(ite.width() ==
              doctest::Approx((b - a) + (d - c)).epsilon(1e-12));
    }
}

TEST_CASE("per-regressor miscoverage split") {
    CHECK(per_regressor_miscoverage(0.1, 2) == doctest::Approx(0.025));
    CHECK(per_regressor_miscoverage(0.1, 1) == doctest::Approx(0.05));
    CHECK(per_regressor_miscoverage(0.2, 4) == doctest::Approx(0.025));
}

namespace {

// Arm-constant outcomes: any forest is a perfect regressor.
TrialDataset arm_constant_dataset(std::size_t n, double control_y, double treated_y) {
    TrialDataset ds = make_dataset(n, 2, 1);
    RngStream rng(99);
    for (std::size_t i = 0; i < n; ++i) {
        ds.covariates(i, 0) = rng.normal();
        ds.covariates(i, 1) = rng.normal();
        ds.outcomes(i, 0) = ds.treatment[i] == 1 ? treated_y : control_y;
    }
    return ds;
}

ForestHyperparams tiny_forest() {
    ForestHyperparams hp;
    hp.n_estimators = 5;
    hp.max_depth = 4;
    return hp;
}

}  // namespace

TEST_CASE("fit_and_band with perfect regressors yields degenerate bands") {
    const TrialDataset ds = arm_constant_dataset(24, 2.0, 5.0);
    ExperimentConfig cfg;
    cfg.outcome_weights = {1.0};
    const FitResult fit = fit_and_band(ds, cfg, tiny_forest(), RngStream(1));
    REQUIRE(fit.val_bands.d == 1);
    for (std::size_t i = 0; i < fit.val_bands.n; ++i) {
        CHECK(fit.val_bands.point[i] == doctest::Approx(3.0));
        CHECK(fit.val_bands.w_band[i].lo == doctest::Approx(3.0));
        CHECK(fit.val_bands.w_band[i].hi == doctest::Approx(3.0));
        CHECK(fit.val_bands.v_band[i] == fit.val_bands.w_band[i]);
    }
}

TEST_CASE("subgroup recalibration on the full validation set equals the global offsets") {
    auto [train, test] = gen_synthetic({80, 10}, RngStream(5));
    ExperimentConfig cfg;  // d = 2 defaults
    const FitResult fit = fit_and_band(train, cfg, tiny_forest(), RngStream(2));
    REQUIRE_FALSE(fit.val_scores.empty());

    std::vector<std::size_t> all(fit.val_bands.n);
    for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
    const SubgroupOffsets off =
        recalibrate_subgroup(fit.val_scores, all, fit.calib.w_level, fit.calib.v_level);
    for (std::size_t k = 0; k < 2; ++k)
        for (int arm = 0; arm < 2; ++arm) {
            CHECK(off.w[k][arm] == fit.calib.per_outcome[k][arm].offset_w);
            CHECK(off.v[k][arm] == fit.calib.per_outcome[k][arm].offset_v);
        }
}

TEST_CASE("subgroup recalibration uses the subgroup's own residual quantile") {
    ValScores scores;
    scores.arm = {1, 1, 1, 1, 0, 0};
    scores.abs_residual = Matrix(6, 1);
    const double treated_resid[4] = {1, 2, 3, 4};
    for (int i = 0; i < 4; ++i) scores.abs_residual(i, 0) = treated_resid[i];
    scores.abs_residual(4, 0) = 0.5;
    scores.abs_residual(5, 0) = 0.5;
    scores.mu_treated = Matrix(6, 1);
    scores.mu_control = Matrix(6, 1);

    // Global-style subgroup: treated residuals {1,2,3,4} at level 0.5 -> 3.
    std::vector<std::size_t> all = {0, 1, 2, 3, 4, 5};
    const SubgroupOffsets g = recalibrate_subgroup(scores, all, 0.5, 0.5);
    CHECK(g.w[0][1] == 3.0);
    // Subgroup with treated residuals {1,2}: level 0.75 of n=2 -> 2nd smallest = 2.
    std::vector<std::size_t> sub = {0, 1, 4};
    const SubgroupOffsets s = recalibrate_subgroup(scores, sub, 0.5, 0.5);
    CHECK(s.w[0][1] == 2.0);
    // Perfectly-fit subgroup: control residuals are 0.5 everywhere -> 0.5.
    CHECK(s.w[0][0] == 0.5);

    std::vector<std::size_t> one_arm = {0, 1};
    CHECK_THROWS_AS(recalibrate_subgroup(scores, one_arm, 0.5, 0.5),
                    std::invalid_argument);
}

TEST_CASE("swapping outcome order permutes bands identically") {
    auto [train, test] = gen_synthetic({60, 10}, RngStream(21));
    TrialDataset swapped = train;
    for (std::size_t i = 0; i < train.n(); ++i) {
        swapped.outcomes(i, 0) = train.outcomes(i, 1);
        swapped.outcomes(i, 1) = train.outcomes(i, 0);
        (*swapped.true_ite)(i, 0) = (*train.true_ite)(i, 1);
        (*swapped.true_ite)(i, 1) = (*train.true_ite)(i, 0);
    }
    std::swap(swapped.outcome_names[0], swapped.outcome_names[1]);

    // Deterministic forest settings make the fit independent of the per-model
    // RNG streams, so the column swap is exact.
    ForestHyperparams hp;
    hp.n_estimators = 1;
    hp.bootstrap = false;
    ExperimentConfig cfg;
    for (Estimator est : {Estimator::RfScr, Estimator::QrfScqr}) {
        cfg.estimator = est;
        const FitResult a = fit_and_band(train, cfg, hp, RngStream(3));
        const FitResult b = fit_and_band(swapped, cfg, hp, RngStream(3));
        REQUIRE(a.val_bands.n == b.val_bands.n);
        for (std::size_t i = 0; i < a.val_bands.n; ++i)
            for (std::size_t k = 0; k < 2; ++k) {
                CHECK(a.val_bands.point[a.val_bands.at(i, k)] ==
                      b.val_bands.point[b.val_bands.at(i, 1 - k)]);
                CHECK(a.val_bands.w_band[a.val_bands.at(i, k)] ==
                      b.val_bands.w_band[b.val_bands.at(i, 1 - k)]);
            }
    }
}

TEST_CASE("band nesting: the V band sits inside the W band") {
    auto [train, test] = gen_synthetic({120, 10}, RngStream(12));
    ExperimentConfig cfg;
    for (Estimator est : {Estimator::RfScr, Estimator::QrfScqr}) {
        cfg.estimator = est;
        ForestHyperparams hp = est == Estimator::RfScr ? tiny_forest() : qrf_params_default();
        hp.n_estimators = 30;
        const FitResult fit = fit_and_band(train, cfg, hp, RngStream(6));
        for (std::size_t i = 0; i < fit.val_bands.n; ++i)
            for (std::size_t k = 0; k < 2; ++k) {
                const Interval& w = fit.val_bands.w_band[fit.val_bands.at(i, k)];
                const Interval& v = fit.val_bands.v_band[fit.val_bands.at(i, k)];
                CHECK(w.lo <= v.lo);
                CHECK(v.hi <= w.hi);
            }
    }
}

TEST_CASE("split conformal coverage holds for a deliberately bad regressor") {
    // Constant predictor over heterogeneous targets still gets valid marginal
    // coverage after calibration (distribution-free guarantee).
    const double alpha = 0.1;
    double total = 0.0;
    const int runs = 10;
    for (int r = 0; r < runs; ++r) {
        RngStream rng(500 + r);
        const std::size_t n_cal = 150, n_test = 300;
        std::vector<double> y_cal(n_cal), y_test(n_test);
        for (auto& y : y_cal) y = rng.normal(0, 1) + rng.uniform(0, 5);
        for (auto& y : y_test) y = rng.normal(0, 1) + rng.uniform(0, 5);
        const std::vector<double> pred_cal(n_cal, 0.0);
        const double qhat = scr_calibrate(pred_cal, y_cal, alpha);
        std::size_t covered = 0;
        for (double y : y_test) covered += std::abs(y) <= qhat ? 1 : 0;
        total += static_cast<double>(covered) / n_test;
    }
    CHECK(total / runs >= 1.0 - alpha - 0.05);
}
