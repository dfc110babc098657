#include "mopjci/datagen.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <stdexcept>

#include <nlohmann/json.hpp>

namespace mopjci {

using nlohmann::json;

namespace {

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

constexpr double kTimeMean = 11.5;
constexpr double kAltMean = 16.0;
constexpr double kAltSd = 5.1;
// sd of Unif(9, 14)
const double kTimeSd = 5.0 / std::sqrt(12.0);

double draw_coefficient(RngStream& rng, std::span<const double> values,
                        std::span<const double> probs) {
    const double u = rng.uniform();
    double acc = 0.0;
    for (std::size_t i = 0; i < values.size(); ++i) {
        acc += probs[i];
        if (u < acc) return values[i];
    }
    return values.back();
}

}  // namespace

SyntheticVariant synthetic_variant_from_name(const std::string& name) {
    if (name == "uncorrelated") return SyntheticVariant::Uncorrelated;
    if (name == "correlated_covariates") return SyntheticVariant::CorrelatedCovariates;
    if (name == "heteroscedastic") return SyntheticVariant::Heteroscedastic;
    throw std::invalid_argument("unknown synthetic variant: " + name);
}

std::string synthetic_variant_name(SyntheticVariant v) {
    switch (v) {
        case SyntheticVariant::Uncorrelated: return "uncorrelated";
        case SyntheticVariant::CorrelatedCovariates: return "correlated_covariates";
        case SyntheticVariant::Heteroscedastic: return "heteroscedastic";
    }
    return "uncorrelated";
}

const std::vector<CovariateDist>& synthetic_covariate_distributions() {
    static const std::vector<CovariateDist> dists = {
        {"age", 66.0, 4.1, false, 0, 0},
        {"wbc", 6.2, 1.0, false, 0, 0},
        {"lymphocyte", 0.8, 0.1, false, 0, 0},
        {"platelet", 183.0, 20.4, false, 0, 0},
        {"creatinine", 68.0, 6.6, false, 0, 0},
        {"ast", 31.0, 5.1, false, 0, 0},
        {"alt", kAltMean, kAltSd, false, 0, 0},
        {"ldh", 339.0, 51.0, false, 0, 0},
        {"ck", 76.0, 21.0, false, 0, 0},
        {"time", kTimeMean, 5.0 / std::sqrt(12.0), true, 9.0, 14.0},
    };
    return dists;
}

double synthetic_true_ite_a(double time) {
    // treated 20*s vs control s + 20
    return 19.0 * sigmoid(time - kTimeMean) - 20.0;
}

double synthetic_true_ite_b(double alt) {
    // treated alt*s + alt vs control s + alt
    return (alt - 1.0) * sigmoid(alt - kAltMean);
}

std::pair<TrialDataset, TrialDataset> gen_synthetic(const SyntheticSpec& spec,
                                                    RngStream rng) {
    if (spec.n_train <= 0 || spec.n_test <= 0)
        throw std::invalid_argument("sample counts must be positive");
    const std::size_t n = static_cast<std::size_t>(spec.n_train + spec.n_test);
    const auto& dists = synthetic_covariate_distributions();
    const std::size_t p = dists.size();

    RngStream beta_rng = rng.child(0);
    RngStream cov_rng = rng.child(1);
    RngStream treat_rng = rng.child(2);
    RngStream noise_rng = rng.child(3);

    // Generator coefficients, resampled per dataset; one vector per outcome
    // over the non-driver covariates.
    const std::vector<double> coef_values = {0.0, 0.1, 0.2, 0.3, 0.4};
    const std::vector<double> coef_probs = {0.6, 0.1, 0.1, 0.1, 0.1};
    std::vector<double> beta_a(p, 0.0), beta_b(p, 0.0);
    for (std::size_t j = 0; j < p; ++j)
        if (j != kSyntheticTimeIndex)
            beta_a[j] = draw_coefficient(beta_rng, coef_values, coef_probs);
    for (std::size_t j = 0; j < p; ++j)
        if (j != kSyntheticAltIndex)
            beta_b[j] = draw_coefficient(beta_rng, coef_values, coef_probs);

    Matrix X(n, p);
    std::vector<int> treatment(n);
    Matrix outcomes(n, 2);
    Matrix tau(n, 2);

    const bool correlated = spec.variant == SyntheticVariant::CorrelatedCovariates;
    const bool het = spec.variant == SyntheticVariant::Heteroscedastic;
    const double rho = spec.rho;

    for (std::size_t i = 0; i < n; ++i) {
        double z_alt = 0.0;
        for (std::size_t j = 0; j < p; ++j) {
            if (j == kSyntheticAltIndex) {
                z_alt = cov_rng.normal();  // ALT resolved after time is drawn
            } else if (dists[j].uniform) {
                X(i, j) = cov_rng.uniform(dists[j].lo, dists[j].hi);
            } else {
                X(i, j) = cov_rng.normal(dists[j].mean, dists[j].sd);
            }
        }
        const double time = X(i, kSyntheticTimeIndex);
        if (correlated) {
            X(i, kSyntheticAltIndex) =
                kAltMean + kAltSd * (rho * (time - kTimeMean) / kTimeSd +
                                     std::sqrt(1.0 - rho * rho) * z_alt);
        } else {
            X(i, kSyntheticAltIndex) = kAltMean + kAltSd * z_alt;
        }
        const double alt = X(i, kSyntheticAltIndex);

        // X0*beta on standardized non-driver covariates, per outcome.
        double base_a = 0.0, base_b = 0.0;
        for (std::size_t j = 0; j < p; ++j) {
            const double z = (X(i, j) - dists[j].mean) / dists[j].sd;
            base_a += beta_a[j] * z;
            base_b += beta_b[j] * z;
        }

        const double s_a = sigmoid(time - kTimeMean);
        const double s_b = sigmoid(alt - kAltMean);
        const double mean_a0 = base_a + s_a + 20.0;
        const double mean_a1 = base_a + 20.0 * s_a;
        const double mean_b0 = base_b + s_b + alt;
        const double mean_b1 = base_b + alt * s_b + alt;
        tau(i, 0) = mean_a1 - mean_a0;
        tau(i, 1) = mean_b1 - mean_b0;

        const int t = treat_rng.bernoulli(0.5) ? 1 : 0;
        treatment[i] = t;
        const double mult_a = het ? 1.0 + spec.het_c * (time - 9.0) : 1.0;
        const double mult_b = het ? 1.0 + spec.het_c * std::abs(alt - kAltMean) : 1.0;
        const double noise_a = spec.noise_sd * mult_a * noise_rng.normal();
        const double noise_b = spec.noise_sd * mult_b * noise_rng.normal();
        outcomes(i, 0) = (t == 1 ? mean_a1 : mean_a0) + noise_a;
        outcomes(i, 1) = (t == 1 ? mean_b1 : mean_b0) + noise_b;
    }

    TrialDataset full;
    full.covariates = std::move(X);
    for (const auto& dist : dists) full.covariate_names.push_back(dist.name);
    full.treatment = std::move(treatment);
    full.outcomes = std::move(outcomes);
    full.outcome_names = {"y0", "y1"};
    full.true_ite = std::move(tau);

    std::vector<std::size_t> train_idx(spec.n_train), test_idx(spec.n_test);
    for (int i = 0; i < spec.n_train; ++i) train_idx[i] = static_cast<std::size_t>(i);
    for (int i = 0; i < spec.n_test; ++i)
        test_idx[i] = static_cast<std::size_t>(spec.n_train + i);
    return {full.subset(train_idx), full.subset(test_idx)};
}

// ----------------------------------------------------------------------------
// Response surface
// ----------------------------------------------------------------------------

EffectForm effect_form_from_name(const std::string& name) {
    if (name == "logistic_scaled") return EffectForm::LogisticScaled;
    if (name == "linear_in_driver") return EffectForm::LinearInDriver;
    if (name == "none") return EffectForm::None;
    throw std::invalid_argument("unknown effect form: " + name);
}

std::string effect_form_name(EffectForm f) {
    switch (f) {
        case EffectForm::LogisticScaled: return "logistic_scaled";
        case EffectForm::LinearInDriver: return "linear_in_driver";
        case EffectForm::None: return "none";
    }
    return "none";
}

namespace {

ResponseSurfaceSpec surface_from_json(const json& j) {
    ResponseSurfaceSpec spec;
    for (const json& o : j.at("outcomes")) {
        OutcomeSurface s;
        s.driver = o.at("driver").get<std::string>();
        if (o.contains("form")) s.form = effect_form_from_name(o.at("form").get<std::string>());
        if (o.contains("scale")) s.scale = o.at("scale").get<double>();
        if (o.contains("slope")) s.slope = o.at("slope").get<double>();
        spec.outcomes.push_back(std::move(s));
    }
    if (j.contains("coefficient_values"))
        spec.coefficient_values = j.at("coefficient_values").get<std::vector<double>>();
    if (j.contains("coefficient_probs"))
        spec.coefficient_probs = j.at("coefficient_probs").get<std::vector<double>>();
    if (j.contains("noise_sd")) spec.noise_sd = j.at("noise_sd").get<double>();
    return spec;
}

}  // namespace

ResponseSurfaceSpec surface_from_json_string(const std::string& text) {
    return surface_from_json(json::parse(text));
}

ResponseSurfaceSpec surface_from_json_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open surface file: " + path);
    json j;
    in >> j;
    return surface_from_json(j);
}

NumericCsv load_covariates(const std::string& path) { return read_numeric_csv(path); }

TrialDataset gen_response_surface(const Matrix& covariates,
                                  const std::vector<std::string>& covariate_names,
                                  const ResponseSurfaceSpec& spec, RngStream rng) {
    if (spec.outcomes.empty()) throw std::invalid_argument("no outcomes configured");
    if (spec.coefficient_values.size() != spec.coefficient_probs.size())
        throw std::invalid_argument("coefficient values/probs size mismatch");
    double prob_sum = 0.0;
    for (double pr : spec.coefficient_probs) prob_sum += pr;
    if (std::abs(prob_sum - 1.0) > 1e-9)
        throw std::invalid_argument("coefficient probabilities do not sum to 1");

    // A column named `t` supplies the treatment assignment.
    std::vector<std::size_t> cov_cols;
    int t_col = -1;
    for (std::size_t c = 0; c < covariate_names.size(); ++c) {
        if (covariate_names[c] == "t")
            t_col = static_cast<int>(c);
        else
            cov_cols.push_back(c);
    }

    const std::size_t n = covariates.rows();
    const std::size_t p = cov_cols.size();
    const std::size_t d = spec.outcomes.size();
    if (n == 0 || p == 0) throw std::invalid_argument("empty covariate matrix");

    TrialDataset ds;
    ds.covariates = Matrix(n, p);
    for (std::size_t j = 0; j < p; ++j) {
        ds.covariate_names.push_back(covariate_names[cov_cols[j]]);
        for (std::size_t i = 0; i < n; ++i) ds.covariates(i, j) = covariates(i, cov_cols[j]);
    }

    std::vector<std::size_t> drivers(d);
    for (std::size_t k = 0; k < d; ++k) {
        const auto it = std::find(ds.covariate_names.begin(), ds.covariate_names.end(),
                                  spec.outcomes[k].driver);
        if (it == ds.covariate_names.end())
            throw std::invalid_argument("missing driver column: " + spec.outcomes[k].driver);
        drivers[k] = static_cast<std::size_t>(it - ds.covariate_names.begin());
    }

    // Sample moments for standardization and driver shifts.
    std::vector<double> mean(p, 0.0), sd(p, 1.0);
    for (std::size_t j = 0; j < p; ++j) {
        double m = 0.0;
        for (std::size_t i = 0; i < n; ++i) m += ds.covariates(i, j);
        m /= static_cast<double>(n);
        double ss = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            const double c = ds.covariates(i, j) - m;
            ss += c * c;
        }
        mean[j] = m;
        sd[j] = n > 1 ? std::sqrt(ss / static_cast<double>(n - 1)) : 0.0;
        if (sd[j] == 0.0) sd[j] = 1.0;  // constant column contributes 0 after centering
    }

    RngStream beta_rng = rng.child(0);
    RngStream treat_rng = rng.child(1);
    RngStream noise_rng = rng.child(2);

    Matrix beta(d, p);
    for (std::size_t k = 0; k < d; ++k)
        for (std::size_t j = 0; j < p; ++j)
            beta(k, j) = j == drivers[k]
                             ? 0.0
                             : draw_coefficient(beta_rng, spec.coefficient_values,
                                                spec.coefficient_probs);

    ds.treatment.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
        if (t_col >= 0) {
            const double t = covariates(i, static_cast<std::size_t>(t_col));
            if (t != 0.0 && t != 1.0)
                throw std::invalid_argument("treatment column value not 0/1 at row " +
                                            std::to_string(i));
            ds.treatment[i] = static_cast<int>(t);
        } else {
            ds.treatment[i] = treat_rng.bernoulli(0.5) ? 1 : 0;
        }
    }

    ds.outcomes = Matrix(n, d);
    Matrix tau(n, d);
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t k = 0; k < d; ++k) {
            const OutcomeSurface& surf = spec.outcomes[k];
            double base = 0.0;
            for (std::size_t j = 0; j < p; ++j)
                base += beta(k, j) * (ds.covariates(i, j) - mean[j]) / sd[j];
            const double x = ds.covariates(i, drivers[k]);
            const double s = sigmoid(x - mean[drivers[k]]);
            double y0 = base, y1 = base;
            switch (surf.form) {
                case EffectForm::LogisticScaled:
                    y0 += s + surf.scale;
                    y1 += surf.scale * s;
                    break;
                case EffectForm::LinearInDriver:
                    y0 += s + x;
                    y1 += s + x + surf.slope * (x - mean[drivers[k]]);
                    break;
                case EffectForm::None: break;
            }
            tau(i, k) = y1 - y0;
            const double noise = spec.noise_sd * noise_rng.normal();
            ds.outcomes(i, k) = (ds.treatment[i] == 1 ? y1 : y0) + noise;
        }
    }
    for (std::size_t k = 0; k < d; ++k) ds.outcome_names.push_back("y" + std::to_string(k));
    ds.true_ite = std::move(tau);
    return ds;
}

}  // namespace mopjci
