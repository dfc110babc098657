#pragma once

#include <array>
#include <cstddef>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "mopjci/conformal.hpp"
#include "mopjci/core.hpp"
#include "mopjci/datagen.hpp"
#include "mopjci/forest.hpp"
#include "mopjci/partition.hpp"

namespace mopjci {

// ============================================================================
// Experiment orchestration: the method matrix (single-outcome baselines plus
// the jointly-partitioned SCR/SCQR variants), repeated runs with independent
// RNG streams, aggregation, and artifact output.
// ============================================================================

enum class MethodKind { BaselineSingleOutcome, MopJciScr, MopJciScqr };

struct MethodSpec {
    MethodKind kind = MethodKind::MopJciScr;
    std::size_t outcome = 0;  // baseline target outcome

    std::string name() const;
    static MethodSpec parse(const std::string& name);
};

struct DatasetSpec {
    enum class Kind { Synthetic, ResponseSurface, Csv };
    Kind kind = Kind::Synthetic;
    SyntheticSpec synthetic;
    std::string covariates_csv;   // response-surface input
    ResponseSurfaceSpec surface;  // response-surface config
    std::string train_csv;        // csv input
    double test_fraction = 0.2;   // response-surface / csv test split
};

struct ExperimentPlan {
    std::string name = "experiment";
    DatasetSpec dataset;
    std::vector<MethodSpec> methods;
    ExperimentConfig config;
    std::optional<ForestHyperparams> rf_params;   // default depends on dataset kind
    std::optional<ForestHyperparams> qrf_params;  // default: untuned QRF
    std::vector<std::string> expected_covariates;
    std::string out_dir;      // empty: nothing written to disk
    std::size_t workers = 0;  // 0: hardware concurrency

    ForestHyperparams effective_rf_params() const;
    ForestHyperparams effective_qrf_params() const;
    void validate() const;
};

ExperimentPlan plan_from_json_string(const std::string& text);
ExperimentPlan plan_from_json_file(const std::string& path);

// ----------------------------------------------------------------------------
// Per-run results.
// ----------------------------------------------------------------------------
struct OutcomeMetrics {
    double v_across = 0.0;
    double v_within = 0.0;
    double pehe = 0.0;      // NaN when the outcome was not modeled
    double ci_width = 0.0;  // NaN when the outcome was not modeled
    bool modeled = false;
};

struct MetricsReport {
    std::size_t num_groups = 0;
    std::vector<OutcomeMetrics> outcomes;  // per original outcome
    double cov_joint = 0.0;                // joint over the modeled outcomes
    int split_acc = 0;
    int split_err = 0;
    bool split_flags_valid = false;  // false when no expected covariates are known
    std::size_t empty_test_groups = 0;
    std::size_t singleton_test_groups = 0;
    int nesting_violations = 0;  // validation samples where the V band leaves the W band
    int nesting_clamps = 0;      // V bands clipped into the W band at construction
    int crossing_count = 0;      // repaired arm-interval crossings (SCQR)
};

nlohmann::json metrics_to_json(const MetricsReport& rep);
// One CSV line pair (header, values): num groups, per-outcome
// V_across/V_within/PEHE/CI width, coverage.
std::string metrics_csv_header(std::size_t d);
std::string metrics_csv_row(const MetricsReport& rep);

struct SubgroupRow {
    int group = 0;
    std::size_t count = 0;
    std::vector<double> cov_mean, cov_sd;  // per table covariate
    std::vector<double> te_mean, te_sd;    // per outcome
};

struct MethodRunResult {
    MetricsReport metrics;
    PartitionTree tree;
    std::vector<SubgroupRow> subgroups;
};

struct RunRecord {
    std::size_t run_index = 0;
    std::uint64_t seed = 0;
    std::vector<MethodRunResult> methods;  // aligned with plan.methods
    std::string error;                     // non-empty when the run failed
};

// ----------------------------------------------------------------------------
// Aggregates over runs (mean and unbiased sample sd).
// ----------------------------------------------------------------------------
struct MetricAggregate {
    double mean = 0.0;
    double sd = 0.0;
    std::size_t count = 0;
};
MetricAggregate aggregate(std::span<const double> values);

struct MethodAggregate {
    std::string method;
    MetricAggregate num_groups;
    double split_acc_pct = -1.0;  // -1 when split flags were not evaluated
    double split_err_pct = -1.0;
    std::vector<std::array<MetricAggregate, 4>> outcomes;  // v_across, v_within, pehe, ci_width
    MetricAggregate cov_joint;
    std::size_t nesting_violations = 0;
    std::size_t crossings = 0;
};

struct ExperimentReport {
    std::string name;
    std::vector<std::string> method_names;
    std::vector<RunRecord> runs;
    std::vector<MethodAggregate> aggregates;
    std::vector<std::string> failures;

    const MethodAggregate& method(const std::string& name) const;
    std::string summary_csv() const;
    nlohmann::json summary_json() const;
};

ExperimentReport run_experiment(const ExperimentPlan& plan);

// ----------------------------------------------------------------------------
// Hyperparameter sweeps.
// ----------------------------------------------------------------------------
enum class SweepParam { Lambda, Gamma, Beta };
SweepParam sweep_param_from_name(const std::string& name);
std::string sweep_param_name(SweepParam p);

struct SweepReport {
    SweepParam param = SweepParam::Lambda;
    std::vector<double> values;
    std::vector<ExperimentReport> reports;

    std::string long_csv() const;  // param,value,method,metric,outcome,mean,sd
};

SweepReport sweep(const ExperimentPlan& plan, SweepParam param,
                  const std::vector<double>& values);

std::string subgroup_table_csv(const std::vector<SubgroupRow>& rows,
                               const std::vector<std::string>& table_covariates,
                               std::size_t d);

}  // namespace mopjci
