#pragma once

#include <string>
#include <utility>
#include <vector>

#include "mopjci/core.hpp"

namespace mopjci {

// ============================================================================
// Synthetic two-outcome RCT generator (uncorrelated, correlated-covariate,
// and heteroscedastic variants) plus a configurable response-surface
// generator over user-loaded covariates. Both store oracle treatment effects.
// ============================================================================

enum class SyntheticVariant { Uncorrelated, CorrelatedCovariates, Heteroscedastic };

SyntheticVariant synthetic_variant_from_name(const std::string& name);
std::string synthetic_variant_name(SyntheticVariant v);

struct SyntheticSpec {
    int n_train = 300;
    int n_test = 200;
    SyntheticVariant variant = SyntheticVariant::Uncorrelated;
    double noise_sd = 0.1;
    double rho = 0.8;    // time/ALT correlation (correlated variant)
    double het_c = 10.0; // noise-sd growth rate (heteroscedastic variant)
};

// Covariate population parameters; `uniform` entries use [lo, hi].
struct CovariateDist {
    std::string name;
    double mean = 0.0;
    double sd = 1.0;
    bool uniform = false;
    double lo = 0.0;
    double hi = 0.0;
};

const std::vector<CovariateDist>& synthetic_covariate_distributions();
constexpr std::size_t kSyntheticAltIndex = 6;
constexpr std::size_t kSyntheticTimeIndex = 9;

// Oracle effects. Outcome A is driven by time from symptom onset, outcome B
// by baseline ALT.
double synthetic_true_ite_a(double time);
double synthetic_true_ite_b(double alt);

// Returns (train, test), each passing validate_dataset. Deterministic given
// (spec, rng).
std::pair<TrialDataset, TrialDataset> gen_synthetic(const SyntheticSpec& spec,
                                                    RngStream rng);

// ----------------------------------------------------------------------------
// Response-surface generation over loaded covariates.
// ----------------------------------------------------------------------------

enum class EffectForm { LogisticScaled, LinearInDriver, None };

EffectForm effect_form_from_name(const std::string& name);
std::string effect_form_name(EffectForm f);

struct OutcomeSurface {
    std::string driver;                        // covariate name
    EffectForm form = EffectForm::LogisticScaled;
    double scale = 20.0;  // logistic_scaled: tau = (scale-1)*sigmoid(x-m) - scale
    double slope = 1.0;   // linear_in_driver: tau = slope*(x-m)
};

struct ResponseSurfaceSpec {
    std::vector<OutcomeSurface> outcomes;
    std::vector<double> coefficient_values = {0.0, 0.1, 0.2, 0.3, 0.4};
    std::vector<double> coefficient_probs = {0.6, 0.1, 0.1, 0.1, 0.1};
    double noise_sd = 0.1;
};

ResponseSurfaceSpec surface_from_json_string(const std::string& text);
ResponseSurfaceSpec surface_from_json_file(const std::string& path);

// Covariate CSV loader (header + numeric cells; binary columns pass through
// as 0/1 numerics).
NumericCsv load_covariates(const std::string& path);

// Potentials are X0*beta plus a treatment-dependent driver effect; a column
// named `t` in the covariates supplies treatment assignment, otherwise it is
// Bernoulli(1/2). Driver shifts use the sample mean of the driver column.
TrialDataset gen_response_surface(const Matrix& covariates,
                                  const std::vector<std::string>& covariate_names,
                                  const ResponseSurfaceSpec& spec, RngStream rng);

}  // namespace mopjci
