#include "mopjci/runner.hpp"

#include <atomic>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>
#include <thread>

#include <nlohmann/json.hpp>

#include "mopjci/metrics.hpp"

namespace mopjci {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

std::string fmt_or_blank(double v) { return std::isnan(v) ? std::string() : format_double(v); }

}  // namespace

// ----------------------------------------------------------------------------
// MethodSpec
// ----------------------------------------------------------------------------

std::string MethodSpec::name() const {
    switch (kind) {
        case MethodKind::BaselineSingleOutcome:
            return "baseline_outcome_" + std::to_string(outcome);
        case MethodKind::MopJciScr: return "mop_jci_scr";
        case MethodKind::MopJciScqr: return "mop_jci_scqr";
    }
    return "unknown";
}

MethodSpec MethodSpec::parse(const std::string& name) {
    if (name == "mop_jci_scr") return {MethodKind::MopJciScr, 0};
    if (name == "mop_jci_scqr") return {MethodKind::MopJciScqr, 0};
    const std::string prefix = "baseline_outcome_";
    if (name.compare(0, prefix.size(), prefix) == 0) {
        const std::string tail = name.substr(prefix.size());
        if (!tail.empty() && tail.find_first_not_of("0123456789") == std::string::npos)
            return {MethodKind::BaselineSingleOutcome,
                    static_cast<std::size_t>(std::stoul(tail))};
    }
    throw std::invalid_argument("unknown method: " + name);
}

// ----------------------------------------------------------------------------
// Plan
// ----------------------------------------------------------------------------

ForestHyperparams ExperimentPlan::effective_rf_params() const {
    if (rf_params) return *rf_params;
    return dataset.kind == DatasetSpec::Kind::Synthetic ? rf_params_synthetic()
                                                        : rf_params_semisynthetic();
}

ForestHyperparams ExperimentPlan::effective_qrf_params() const {
    return qrf_params ? *qrf_params : qrf_params_default();
}

void ExperimentPlan::validate() const {
    if (methods.empty()) throw std::invalid_argument("plan has no methods");
    config.validate_scalars();
    if (dataset.kind == DatasetSpec::Kind::ResponseSurface) {
        if (dataset.covariates_csv.empty())
            throw std::invalid_argument("response-surface plan missing covariates_csv");
        if (dataset.surface.outcomes.empty())
            throw std::invalid_argument("response-surface plan has no outcomes");
    }
    if (dataset.kind == DatasetSpec::Kind::Csv && dataset.train_csv.empty())
        throw std::invalid_argument("csv plan missing train_csv");
    if (dataset.kind != DatasetSpec::Kind::Synthetic &&
        !(dataset.test_fraction > 0.0 && dataset.test_fraction < 1.0))
        throw std::invalid_argument("test_fraction not in (0,1)");
}

namespace {

MaxFeatures max_features_from_json(const json& j) {
    if (j.is_string()) {
        const std::string s = j.get<std::string>();
        if (s == "all") return MaxFeatures::all();
        if (s == "sqrt") return MaxFeatures::sqrt();
        throw std::invalid_argument("unknown max_features: " + s);
    }
    return MaxFeatures::frac(j.get<double>());
}

ForestHyperparams forest_params_from_json(const json& j, ForestHyperparams base) {
    if (j.contains("n_estimators")) base.n_estimators = j.at("n_estimators").get<int>();
    if (j.contains("max_depth")) base.max_depth = j.at("max_depth").get<int>();
    if (j.contains("min_samples_split"))
        base.min_samples_split = j.at("min_samples_split").get<int>();
    if (j.contains("min_samples_leaf"))
        base.min_samples_leaf = j.at("min_samples_leaf").get<int>();
    if (j.contains("max_features"))
        base.max_features = max_features_from_json(j.at("max_features"));
    if (j.contains("bootstrap")) base.bootstrap = j.at("bootstrap").get<bool>();
    return base;
}

ExperimentPlan plan_from_json(const json& j) {
    ExperimentPlan plan;
    if (j.contains("name")) plan.name = j.at("name").get<std::string>();

    if (j.contains("dataset")) {
        const json& dj = j.at("dataset");
        const std::string type = dj.value("type", std::string("synthetic"));
        if (type == "synthetic") {
            plan.dataset.kind = DatasetSpec::Kind::Synthetic;
            SyntheticSpec& s = plan.dataset.synthetic;
            if (dj.contains("variant"))
                s.variant = synthetic_variant_from_name(dj.at("variant").get<std::string>());
            if (dj.contains("n_train")) s.n_train = dj.at("n_train").get<int>();
            if (dj.contains("n_test")) s.n_test = dj.at("n_test").get<int>();
            if (dj.contains("noise_sd")) s.noise_sd = dj.at("noise_sd").get<double>();
            if (dj.contains("rho")) s.rho = dj.at("rho").get<double>();
            if (dj.contains("het_c")) s.het_c = dj.at("het_c").get<double>();
        } else if (type == "response_surface") {
            plan.dataset.kind = DatasetSpec::Kind::ResponseSurface;
            plan.dataset.covariates_csv = dj.at("covariates_csv").get<std::string>();
            plan.dataset.surface = surface_from_json_string(dj.at("surface").dump());
            if (dj.contains("test_fraction"))
                plan.dataset.test_fraction = dj.at("test_fraction").get<double>();
        } else if (type == "csv") {
            plan.dataset.kind = DatasetSpec::Kind::Csv;
            plan.dataset.train_csv = dj.at("train_csv").get<std::string>();
            if (dj.contains("test_fraction"))
                plan.dataset.test_fraction = dj.at("test_fraction").get<double>();
        } else {
            throw std::invalid_argument("unknown dataset type: " + type);
        }
    }

    if (j.contains("methods")) {
        for (const json& m : j.at("methods"))
            plan.methods.push_back(MethodSpec::parse(m.get<std::string>()));
    } else {
        const std::size_t d =
            plan.dataset.kind == DatasetSpec::Kind::ResponseSurface
                ? plan.dataset.surface.outcomes.size()
                : 2;
        for (std::size_t k = 0; k < d; ++k)
            plan.methods.push_back({MethodKind::BaselineSingleOutcome, k});
        plan.methods.push_back({MethodKind::MopJciScr, 0});
        plan.methods.push_back({MethodKind::MopJciScqr, 0});
    }

    if (plan.dataset.kind != DatasetSpec::Kind::Synthetic) {
        // Partitioning defaults tuned for the semi-synthetic benchmark.
        plan.config.lambda = 0.0;
        plan.config.gamma = 0.02;
        plan.config.outcome_weights = ExperimentConfig::beta_weights(0.25);
    }
    if (j.contains("config"))
        plan.config = config_from_json_string(j.at("config").dump());

    if (j.contains("rf_params"))
        plan.rf_params = forest_params_from_json(
            j.at("rf_params"), plan.dataset.kind == DatasetSpec::Kind::Synthetic
                                   ? rf_params_synthetic()
                                   : rf_params_semisynthetic());
    if (j.contains("qrf_params"))
        plan.qrf_params = forest_params_from_json(j.at("qrf_params"), qrf_params_default());

    if (j.contains("expected_covariates"))
        plan.expected_covariates =
            j.at("expected_covariates").get<std::vector<std::string>>();
    else if (plan.dataset.kind == DatasetSpec::Kind::Synthetic)
        plan.expected_covariates = {"time", "alt"};
    else if (plan.dataset.kind == DatasetSpec::Kind::ResponseSurface)
        for (const auto& o : plan.dataset.surface.outcomes)
            plan.expected_covariates.push_back(o.driver);

    if (j.contains("out_dir")) plan.out_dir = j.at("out_dir").get<std::string>();
    if (j.contains("workers")) plan.workers = j.at("workers").get<std::size_t>();
    return plan;
}

}  // namespace

ExperimentPlan plan_from_json_string(const std::string& text) {
    return plan_from_json(json::parse(text));
}

ExperimentPlan plan_from_json_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open plan file: " + path);
    json j;
    in >> j;
    return plan_from_json(j);
}

// ----------------------------------------------------------------------------
// Aggregation helpers
// ----------------------------------------------------------------------------

MetricAggregate aggregate(std::span<const double> values) {
    MetricAggregate agg;
    agg.count = values.size();
    if (values.empty()) {
        agg.mean = kNaN;
        agg.sd = kNaN;
        return agg;
    }
    double sum = 0.0;
    for (double v : values) sum += v;
    agg.mean = sum / static_cast<double>(values.size());
    if (values.size() < 2) {
        agg.sd = 0.0;
        return agg;
    }
    double ss = 0.0;
    for (double v : values) ss += (v - agg.mean) * (v - agg.mean);
    agg.sd = std::sqrt(ss / static_cast<double>(values.size() - 1));
    return agg;
}

// ----------------------------------------------------------------------------
// Single run
// ----------------------------------------------------------------------------

namespace {

// Stratified train/test row split for loaded datasets.
std::pair<std::vector<std::size_t>, std::vector<std::size_t>> split_test_fraction(
    const TrialDataset& ds, double fraction, RngStream& rng) {
    std::vector<std::size_t> arm[2];
    for (std::size_t i = 0; i < ds.n(); ++i) arm[ds.treatment[i]].push_back(i);
    std::vector<std::size_t> train_rows, test_rows;
    for (auto& rows : arm) {
        if (rows.size() < 3) throw std::invalid_argument("arm too small for a test split");
        shuffle(rows, rng);
        std::size_t n_test = static_cast<std::size_t>(
            std::llround(fraction * static_cast<double>(rows.size())));
        n_test = std::clamp<std::size_t>(n_test, 1, rows.size() - 2);
        test_rows.insert(test_rows.end(), rows.begin(), rows.begin() + n_test);
        train_rows.insert(train_rows.end(), rows.begin() + n_test, rows.end());
    }
    std::sort(train_rows.begin(), train_rows.end());
    std::sort(test_rows.begin(), test_rows.end());
    return {train_rows, test_rows};
}

// Lazily fits one forest per (estimator family, outcome, arm) on the training
// half; methods sharing a family reuse identical fits (and identical RNG
// streams keyed by the original outcome index).
class ForestCache {
public:
    ForestCache(const TrialDataset& train, const SplitIndices& split,
                ForestHyperparams rf_hp, ForestHyperparams qrf_hp, RngStream rf_rng,
                RngStream qrf_rng)
        : train_(train), rf_hp_(rf_hp), qrf_hp_(qrf_hp), rf_rng_(rf_rng), qrf_rng_(qrf_rng) {
        for (std::size_t r : split.train) arm_rows_[train.treatment[r]].push_back(r);
    }

    const ForestModel& get(Estimator family, std::size_t k, int arm) {
        const auto key = std::make_tuple(static_cast<int>(family), k, arm);
        auto it = cache_.find(key);
        if (it == cache_.end()) it = cache_.emplace(key, fit(family, k, arm)).first;
        return it->second;
    }

private:
    ForestModel fit(Estimator family, std::size_t k, int arm) {
        const Matrix X = train_.covariates.subset_rows(arm_rows_[arm]);
        std::vector<double> y;
        y.reserve(arm_rows_[arm].size());
        for (std::size_t r : arm_rows_[arm]) y.push_back(train_.outcomes(r, k));
        const bool rf = family == Estimator::RfScr;
        RngStream rng = (rf ? rf_rng_ : qrf_rng_).child(2 * k + static_cast<std::size_t>(arm));
        return fit_forest(X, y, rf ? rf_hp_ : qrf_hp_,
                          rf ? ForestKind::Mean : ForestKind::Quantile, rng);
    }

    const TrialDataset& train_;
    std::vector<std::size_t> arm_rows_[2];
    ForestHyperparams rf_hp_, qrf_hp_;
    RngStream rf_rng_, qrf_rng_;
    std::map<std::tuple<int, std::size_t, int>, ForestModel> cache_;
};

struct ResolvedCovariates {
    std::vector<std::size_t> expected;    // indices of expected covariates
    std::vector<std::size_t> unexpected;  // complement (when expected non-empty)
    std::vector<std::size_t> table;       // columns shown in subgroup tables
    std::vector<std::string> table_names;
};

ResolvedCovariates resolve_covariates(const ExperimentPlan& plan,
                                      const std::vector<std::string>& names) {
    ResolvedCovariates rc;
    for (const std::string& want : plan.expected_covariates) {
        const auto it = std::find(names.begin(), names.end(), want);
        if (it == names.end())
            throw std::invalid_argument("expected covariate not in dataset: " + want);
        rc.expected.push_back(static_cast<std::size_t>(it - names.begin()));
    }
    if (!rc.expected.empty()) {
        for (std::size_t j = 0; j < names.size(); ++j)
            if (std::find(rc.expected.begin(), rc.expected.end(), j) == rc.expected.end())
                rc.unexpected.push_back(j);
        rc.table = rc.expected;
    } else {
        rc.table.resize(names.size());
        for (std::size_t j = 0; j < names.size(); ++j) rc.table[j] = j;
    }
    for (std::size_t j : rc.table) rc.table_names.push_back(names[j]);
    return rc;
}

struct ColumnStats {
    double mean = kNaN;
    double sd = kNaN;
};

ColumnStats column_stats(std::span<const double> values) {
    if (values.empty()) return {};
    const MetricAggregate agg = aggregate(values);
    return {agg.mean, agg.sd};
}

MethodRunResult run_method(const ExperimentPlan& plan, const MethodSpec& method,
                           const TrialDataset& train, const TrialDataset& test,
                           const SplitIndices& split, ForestCache& cache,
                           const ResolvedCovariates& rc) {
    const std::size_t d_full = train.d();
    ExperimentConfig mcfg = plan.config;
    std::vector<std::size_t> outcome_map;
    switch (method.kind) {
        case MethodKind::BaselineSingleOutcome:
            if (method.outcome >= d_full)
                throw std::invalid_argument("baseline outcome index out of range");
            outcome_map = {method.outcome};
            mcfg.outcome_weights = {1.0};
            break;
        case MethodKind::MopJciScr:
            mcfg.estimator = Estimator::RfScr;
            break;
        case MethodKind::MopJciScqr:
            mcfg.estimator = Estimator::QrfScqr;
            break;
    }
    if (outcome_map.empty())
        for (std::size_t k = 0; k < d_full; ++k) outcome_map.push_back(k);
    const std::size_t d_m = outcome_map.size();

    std::vector<std::array<ForestModel, 2>> models(d_m);
    for (std::size_t mk = 0; mk < d_m; ++mk)
        for (int arm = 0; arm < 2; ++arm)
            models[mk][arm] = cache.get(mcfg.estimator, outcome_map[mk], arm);

    const TrialDataset view = d_m == d_full ? TrialDataset{} : train.select_outcome(outcome_map[0]);
    const TrialDataset& mtrain = d_m == d_full ? train : view;

    FitResult fit = calibrate_and_band(mtrain, split, std::move(models), mcfg);
    const PartitionContext ctx = PartitionContext::from(fit, mcfg);

    MethodRunResult result;
    result.tree = build_partition(ctx);
    const PartitionTree& tree = result.tree;

    const IteBands test_bands = fit.calib.make_bands(test.covariates);

    MetricsReport& rep = result.metrics;
    rep.num_groups = tree.num_groups;
    rep.outcomes.assign(d_full, OutcomeMetrics{kNaN, kNaN, kNaN, kNaN, false});
    rep.crossing_count = fit.val_bands.crossing_count + test_bands.crossing_count;
    rep.nesting_clamps = fit.val_bands.nesting_clamps + test_bands.nesting_clamps;
    for (std::size_t i = 0; i < fit.val_bands.n; ++i)
        for (std::size_t k = 0; k < fit.val_bands.d; ++k) {
            const Interval& w = fit.val_bands.w_band[fit.val_bands.at(i, k)];
            const Interval& v = fit.val_bands.v_band[fit.val_bands.at(i, k)];
            if (!(w.lo <= v.lo && v.hi <= w.hi)) ++rep.nesting_violations;
        }

    // Route test samples through the partition.
    std::vector<std::vector<std::size_t>> group_rows(tree.num_groups);
    for (std::size_t i = 0; i < test.n(); ++i)
        group_rows[static_cast<std::size_t>(tree.assign_group(test.covariates.row(i)))]
            .push_back(i);
    for (const auto& rows : group_rows) {
        if (rows.empty()) ++rep.empty_test_groups;
        else if (rows.size() == 1) ++rep.singleton_test_groups;
    }

    const bool has_truth = test.true_ite.has_value();
    if (has_truth) {
        for (std::size_t k = 0; k < d_full; ++k) {
            std::vector<std::vector<double>> groups;
            for (const auto& rows : group_rows) {
                if (rows.empty()) continue;  // dropped, counted above
                std::vector<double> vals;
                vals.reserve(rows.size());
                for (std::size_t i : rows) vals.push_back((*test.true_ite)(i, k));
                groups.push_back(std::move(vals));
            }
            rep.outcomes[k].v_across = v_across(groups);
            rep.outcomes[k].v_within = v_within(groups);
        }
    }

    for (std::size_t mk = 0; mk < d_m; ++mk) {
        const std::size_t k = outcome_map[mk];
        rep.outcomes[k].modeled = true;
        double width = 0.0;
        for (std::size_t i = 0; i < test.n(); ++i)
            width += test_bands.w_band[test_bands.at(i, mk)].width();
        rep.outcomes[k].ci_width = width / static_cast<double>(test.n());
        if (has_truth) {
            std::vector<double> truth(test.n()), est(test.n());
            for (std::size_t i = 0; i < test.n(); ++i) {
                truth[i] = (*test.true_ite)(i, k);
                est[i] = test_bands.point[test_bands.at(i, mk)];
            }
            rep.outcomes[k].pehe = pehe(truth, est);
        }
    }

    if (has_truth) {
        Matrix truth_sub(test.n(), d_m);
        for (std::size_t i = 0; i < test.n(); ++i)
            for (std::size_t mk = 0; mk < d_m; ++mk)
                truth_sub(i, mk) = (*test.true_ite)(i, outcome_map[mk]);
        rep.cov_joint = coverage_joint(truth_sub, test_bands);
    } else {
        rep.cov_joint = kNaN;
    }

    if (!rc.expected.empty()) {
        const SplitFlags flags = split_accuracy(tree, rc.expected, rc.unexpected);
        rep.split_acc = flags.acc;
        rep.split_err = flags.err;
        rep.split_flags_valid = true;
    }

    // Subgroup characteristics over test members.
    for (std::size_t g = 0; g < tree.num_groups; ++g) {
        SubgroupRow row;
        row.group = static_cast<int>(g);
        row.count = group_rows[g].size();
        for (std::size_t j : rc.table) {
            std::vector<double> vals;
            vals.reserve(row.count);
            for (std::size_t i : group_rows[g]) vals.push_back(test.covariates(i, j));
            const ColumnStats st = column_stats(vals);
            row.cov_mean.push_back(st.mean);
            row.cov_sd.push_back(st.sd);
        }
        for (std::size_t k = 0; k < d_full; ++k) {
            std::vector<double> vals;
            if (has_truth) {
                for (std::size_t i : group_rows[g]) vals.push_back((*test.true_ite)(i, k));
            } else if (rep.outcomes[k].modeled) {
                const std::size_t mk = static_cast<std::size_t>(
                    std::find(outcome_map.begin(), outcome_map.end(), k) -
                    outcome_map.begin());
                for (std::size_t i : group_rows[g])
                    vals.push_back(test_bands.point[test_bands.at(i, mk)]);
            }
            const ColumnStats st = column_stats(vals);
            row.te_mean.push_back(st.mean);
            row.te_sd.push_back(st.sd);
        }
        result.subgroups.push_back(std::move(row));
    }
    return result;
}

struct PreloadedData {
    NumericCsv covariates;    // response surface
    TrialDataset csv_train;   // csv dataset
};

RunRecord run_one(const ExperimentPlan& plan, std::size_t r, const PreloadedData& pre) {
    RunRecord record;
    record.run_index = r;
    record.seed = plan.config.seed;

    RngStream run_rng(plan.config.seed, r);
    TrialDataset train, test;
    switch (plan.dataset.kind) {
        case DatasetSpec::Kind::Synthetic: {
            auto pair = gen_synthetic(plan.dataset.synthetic, run_rng.child(0));
            train = std::move(pair.first);
            test = std::move(pair.second);
            break;
        }
        case DatasetSpec::Kind::ResponseSurface: {
            const TrialDataset full = gen_response_surface(
                pre.covariates.values, pre.covariates.names, plan.dataset.surface,
                run_rng.child(0));
            RngStream split_rng = run_rng.child(4);
            auto [train_rows, test_rows] =
                split_test_fraction(full, plan.dataset.test_fraction, split_rng);
            train = full.subset(train_rows);
            test = full.subset(test_rows);
            break;
        }
        case DatasetSpec::Kind::Csv: {
            RngStream split_rng = run_rng.child(4);
            auto [train_rows, test_rows] =
                split_test_fraction(pre.csv_train, plan.dataset.test_fraction, split_rng);
            train = pre.csv_train.subset(train_rows);
            test = pre.csv_train.subset(test_rows);
            break;
        }
    }
    validate_dataset(train);
    validate_dataset(test);

    const ResolvedCovariates rc = resolve_covariates(plan, train.covariate_names);

    RngStream split_rng = run_rng.child(1);
    const SplitIndices split = split_train_validate_indices(train, split_rng);
    ForestCache cache(train, split, plan.effective_rf_params(), plan.effective_qrf_params(),
                      run_rng.child(2), run_rng.child(3));

    for (const MethodSpec& method : plan.methods)
        record.methods.push_back(run_method(plan, method, train, test, split, cache, rc));
    return record;
}

}  // namespace

// ----------------------------------------------------------------------------
// Experiment driver
// ----------------------------------------------------------------------------

namespace {

std::vector<MethodAggregate> aggregate_runs(const ExperimentPlan& plan,
                                            const std::vector<RunRecord>& runs) {
    std::vector<MethodAggregate> out;
    std::vector<const RunRecord*> ok;
    for (const RunRecord& run : runs)
        if (run.error.empty()) ok.push_back(&run);
    if (ok.empty()) return out;

    const std::size_t d = ok.front()->methods.front().metrics.outcomes.size();
    for (std::size_t m = 0; m < plan.methods.size(); ++m) {
        MethodAggregate agg;
        agg.method = plan.methods[m].name();

        std::vector<double> groups, cov;
        std::vector<double> acc, err;
        std::vector<std::array<std::vector<double>, 4>> per_outcome(d);
        for (const RunRecord* run : ok) {
            const MetricsReport& rep = run->methods[m].metrics;
            groups.push_back(static_cast<double>(rep.num_groups));
            if (!std::isnan(rep.cov_joint)) cov.push_back(rep.cov_joint);
            if (rep.split_flags_valid) {
                acc.push_back(rep.split_acc);
                err.push_back(rep.split_err);
            }
            for (std::size_t k = 0; k < d; ++k) {
                const OutcomeMetrics& om = rep.outcomes[k];
                const double vals[4] = {om.v_across, om.v_within, om.pehe, om.ci_width};
                for (int q = 0; q < 4; ++q)
                    if (!std::isnan(vals[q])) per_outcome[k][q].push_back(vals[q]);
            }
            agg.nesting_violations += static_cast<std::size_t>(rep.nesting_violations);
            agg.crossings += static_cast<std::size_t>(rep.crossing_count);
        }
        agg.num_groups = aggregate(groups);
        agg.cov_joint = aggregate(cov);
        if (!acc.empty()) {
            agg.split_acc_pct = 100.0 * aggregate(acc).mean;
            agg.split_err_pct = 100.0 * aggregate(err).mean;
        }
        agg.outcomes.resize(d);
        for (std::size_t k = 0; k < d; ++k)
            for (int q = 0; q < 4; ++q) agg.outcomes[k][q] = aggregate(per_outcome[k][q]);
        out.push_back(std::move(agg));
    }
    return out;
}

void write_text_file(const fs::path& path, const std::string& text) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    out << text;
}

void write_run_artifacts(const ExperimentPlan& plan, const RunRecord& run,
                         const std::vector<std::string>& covariate_names,
                         const std::vector<std::string>& table_names, std::size_t d) {
    const fs::path run_dir = fs::path(plan.out_dir) / ("run_" + std::to_string(run.run_index));
    for (std::size_t m = 0; m < plan.methods.size(); ++m) {
        const fs::path dir = run_dir / plan.methods[m].name();
        fs::create_directories(dir);
        const MethodRunResult& res = run.methods[m];
        write_text_file(dir / "tree.json", res.tree.to_json(covariate_names).dump(2) + "\n");
        write_text_file(dir / "metrics.json", metrics_to_json(res.metrics).dump(2) + "\n");
        write_text_file(dir / "metrics.csv",
                        metrics_csv_header(d) + metrics_csv_row(res.metrics));
        write_text_file(dir / "subgroups.csv",
                        subgroup_table_csv(res.subgroups, table_names, d));
    }
}

std::string runs_csv(const ExperimentPlan& plan, const std::vector<RunRecord>& runs) {
    std::ostringstream out;
    out << "run,method,metric,outcome,value\n";
    auto emit = [&](std::size_t r, const std::string& method, const std::string& metric,
                    const std::string& outcome, double value) {
        if (std::isnan(value)) return;
        out << r << ',' << method << ',' << metric << ',' << outcome << ','
            << format_double(value) << "\n";
    };
    for (const RunRecord& run : runs) {
        if (!run.error.empty()) continue;
        for (std::size_t m = 0; m < plan.methods.size(); ++m) {
            const std::string name = plan.methods[m].name();
            const MetricsReport& rep = run.methods[m].metrics;
            emit(run.run_index, name, "num_groups", "", static_cast<double>(rep.num_groups));
            emit(run.run_index, name, "cov_joint", "", rep.cov_joint);
            if (rep.split_flags_valid) {
                emit(run.run_index, name, "split_acc", "", rep.split_acc);
                emit(run.run_index, name, "split_err", "", rep.split_err);
            }
            for (std::size_t k = 0; k < rep.outcomes.size(); ++k) {
                const std::string o = std::to_string(k);
                emit(run.run_index, name, "v_across", o, rep.outcomes[k].v_across);
                emit(run.run_index, name, "v_within", o, rep.outcomes[k].v_within);
                emit(run.run_index, name, "pehe", o, rep.outcomes[k].pehe);
                emit(run.run_index, name, "ci_width", o, rep.outcomes[k].ci_width);
            }
        }
    }
    return out.str();
}

}  // namespace

ExperimentReport run_experiment(const ExperimentPlan& plan) {
    plan.validate();

    PreloadedData pre;
    if (plan.dataset.kind == DatasetSpec::Kind::ResponseSurface)
        pre.covariates = load_covariates(plan.dataset.covariates_csv);
    if (plan.dataset.kind == DatasetSpec::Kind::Csv)
        pre.csv_train = read_dataset_csv(plan.dataset.train_csv);

    const std::size_t n_runs = static_cast<std::size_t>(plan.config.n_runs);
    std::vector<RunRecord> runs(n_runs);
    std::size_t workers = plan.workers > 0
                              ? plan.workers
                              : std::max<std::size_t>(1, std::thread::hardware_concurrency());
    workers = std::min(workers, n_runs);

    std::atomic<std::size_t> next{0};
    auto work = [&]() {
        for (;;) {
            const std::size_t r = next.fetch_add(1);
            if (r >= n_runs) break;
            try {
                runs[r] = run_one(plan, r, pre);
            } catch (const std::exception& e) {
                runs[r].run_index = r;
                runs[r].error = e.what();
            }
        }
    };
    if (workers <= 1) {
        work();
    } else {
        std::vector<std::thread> pool;
        for (std::size_t w = 0; w < workers; ++w) pool.emplace_back(work);
        for (std::thread& t : pool) t.join();
    }

    ExperimentReport report;
    report.name = plan.name;
    for (const MethodSpec& m : plan.methods) report.method_names.push_back(m.name());
    report.runs = std::move(runs);
    for (const RunRecord& run : report.runs)
        if (!run.error.empty())
            report.failures.push_back("run " + std::to_string(run.run_index) + ": " +
                                      run.error);
    report.aggregates = aggregate_runs(plan, report.runs);

    if (!plan.out_dir.empty()) {
        fs::create_directories(plan.out_dir);
        std::vector<std::string> covariate_names, table_names;
        std::size_t d = 0;
        for (const RunRecord& run : report.runs) {
            if (!run.error.empty()) continue;
            d = run.methods.front().metrics.outcomes.size();
            break;
        }
        // Re-resolve display names from whichever dataset kind is in play.
        if (plan.dataset.kind == DatasetSpec::Kind::Synthetic)
            for (const auto& dist : synthetic_covariate_distributions())
                covariate_names.push_back(dist.name);
        else if (plan.dataset.kind == DatasetSpec::Kind::ResponseSurface)
            covariate_names = pre.covariates.names;
        else
            covariate_names = pre.csv_train.covariate_names;
        table_names = plan.expected_covariates.empty() ? covariate_names
                                                       : plan.expected_covariates;
        for (const RunRecord& run : report.runs)
            if (run.error.empty())
                write_run_artifacts(plan, run, covariate_names, table_names, d);
        write_text_file(fs::path(plan.out_dir) / "summary.csv", report.summary_csv());
        write_text_file(fs::path(plan.out_dir) / "summary.json",
                        report.summary_json().dump(2) + "\n");
        write_text_file(fs::path(plan.out_dir) / "runs.csv", runs_csv(plan, report.runs));
        if (!report.failures.empty()) {
            std::string log;
            for (const std::string& f : report.failures) log += f + "\n";
            write_text_file(fs::path(plan.out_dir) / "failures.log", log);
        }
    }
    return report;
}

// ----------------------------------------------------------------------------
// Report serialization
// ----------------------------------------------------------------------------

nlohmann::json metrics_to_json(const MetricsReport& rep) {
    json j;
    j["num_groups"] = rep.num_groups;
    j["cov_joint"] = rep.cov_joint;
    if (rep.split_flags_valid) {
        j["split_acc"] = rep.split_acc;
        j["split_err"] = rep.split_err;
    }
    j["empty_test_groups"] = rep.empty_test_groups;
    j["singleton_test_groups"] = rep.singleton_test_groups;
    j["nesting_violations"] = rep.nesting_violations;
    j["nesting_clamps"] = rep.nesting_clamps;
    j["crossing_count"] = rep.crossing_count;
    json outs = json::array();
    for (const OutcomeMetrics& om : rep.outcomes) {
        json o;
        o["v_across"] = om.v_across;
        o["v_within"] = om.v_within;
        o["pehe"] = om.pehe;
        o["ci_width"] = om.ci_width;
        o["modeled"] = om.modeled;
        outs.push_back(std::move(o));
    }
    j["outcomes"] = std::move(outs);
    return j;
}

std::string metrics_csv_header(std::size_t d) {
    std::string h = "num_groups";
    for (std::size_t k = 0; k < d; ++k) {
        const std::string o = std::to_string(k);
        h += ",o" + o + "_v_across,o" + o + "_v_within,o" + o + "_pehe,o" + o + "_ci_width";
    }
    h += ",cov_joint\n";
    return h;
}

std::string metrics_csv_row(const MetricsReport& rep) {
    std::string row = std::to_string(rep.num_groups);
    for (const OutcomeMetrics& om : rep.outcomes) {
        row += "," + fmt_or_blank(om.v_across);
        row += "," + fmt_or_blank(om.v_within);
        row += "," + fmt_or_blank(om.pehe);
        row += "," + fmt_or_blank(om.ci_width);
    }
    row += "," + fmt_or_blank(rep.cov_joint) + "\n";
    return row;
}

const MethodAggregate& ExperimentReport::method(const std::string& name) const {
    for (const MethodAggregate& agg : aggregates)
        if (agg.method == name) return agg;
    throw std::invalid_argument("no aggregate for method: " + name);
}

std::string ExperimentReport::summary_csv() const {
    std::ostringstream out;
    const std::size_t d = aggregates.empty() ? 0 : aggregates.front().outcomes.size();
    out << "method,runs,num_groups_mean,num_groups_sd,split_acc_pct,split_err_pct,"
           "cov_joint_mean,cov_joint_sd";
    for (std::size_t k = 0; k < d; ++k) {
        const std::string o = std::to_string(k);
        out << ",o" << o << "_v_across_mean,o" << o << "_v_across_sd"
            << ",o" << o << "_v_within_mean,o" << o << "_v_within_sd"
            << ",o" << o << "_pehe_mean,o" << o << "_pehe_sd"
            << ",o" << o << "_ci_width_mean,o" << o << "_ci_width_sd";
    }
    out << "\n";
    auto cell = [&](const MetricAggregate& agg, bool sd) {
        return agg.count == 0 ? std::string() : format_double(sd ? agg.sd : agg.mean);
    };
    for (const MethodAggregate& agg : aggregates) {
        out << agg.method << ',' << agg.num_groups.count << ','
            << cell(agg.num_groups, false) << ',' << cell(agg.num_groups, true) << ','
            << (agg.split_acc_pct < 0 ? std::string() : format_double(agg.split_acc_pct))
            << ','
            << (agg.split_err_pct < 0 ? std::string() : format_double(agg.split_err_pct))
            << ',' << cell(agg.cov_joint, false) << ',' << cell(agg.cov_joint, true);
        for (const auto& om : agg.outcomes)
            for (int q = 0; q < 4; ++q)
                out << ',' << cell(om[q], false) << ',' << cell(om[q], true);
        out << "\n";
    }
    return out.str();
}

nlohmann::json ExperimentReport::summary_json() const {
    json j;
    j["name"] = name;
    j["failures"] = failures;
    json methods = json::array();
    for (const MethodAggregate& agg : aggregates) {
        json m;
        m["method"] = agg.method;
        m["runs"] = agg.num_groups.count;
        m["num_groups"] = {{"mean", agg.num_groups.mean}, {"sd", agg.num_groups.sd}};
        if (agg.split_acc_pct >= 0) {
            m["split_acc_pct"] = agg.split_acc_pct;
            m["split_err_pct"] = agg.split_err_pct;
        }
        m["cov_joint"] = {{"mean", agg.cov_joint.mean}, {"sd", agg.cov_joint.sd}};
        m["nesting_violations"] = agg.nesting_violations;
        m["crossings"] = agg.crossings;
        json outs = json::array();
        static const char* kMetricNames[4] = {"v_across", "v_within", "pehe", "ci_width"};
        for (const auto& om : agg.outcomes) {
            json o;
            for (int q = 0; q < 4; ++q)
                o[kMetricNames[q]] = {{"mean", om[q].mean}, {"sd", om[q].sd},
                                      {"n", om[q].count}};
            outs.push_back(std::move(o));
        }
        m["outcomes"] = std::move(outs);
        methods.push_back(std::move(m));
    }
    j["methods"] = std::move(methods);
    return j;
}

std::string subgroup_table_csv(const std::vector<SubgroupRow>& rows,
                               const std::vector<std::string>& table_covariates,
                               std::size_t d) {
    std::ostringstream out;
    out << "group,count";
    for (const std::string& name : table_covariates)
        out << ',' << name << "_mean," << name << "_sd";
    for (std::size_t k = 0; k < d; ++k)
        out << ",tau" << k << "_mean,tau" << k << "_sd";
    out << "\n";
    for (const SubgroupRow& row : rows) {
        out << row.group << ',' << row.count;
        for (std::size_t c = 0; c < row.cov_mean.size(); ++c)
            out << ',' << fmt_or_blank(row.cov_mean[c]) << ',' << fmt_or_blank(row.cov_sd[c]);
        for (std::size_t k = 0; k < row.te_mean.size(); ++k)
            out << ',' << fmt_or_blank(row.te_mean[k]) << ',' << fmt_or_blank(row.te_sd[k]);
        out << "\n";
    }
    return out.str();
}

// ----------------------------------------------------------------------------
// Sweeps
// ----------------------------------------------------------------------------

SweepParam sweep_param_from_name(const std::string& name) {
    if (name == "lambda") return SweepParam::Lambda;
    if (name == "gamma") return SweepParam::Gamma;
    if (name == "beta") return SweepParam::Beta;
    throw std::invalid_argument("unknown sweep parameter: " + name);
}

std::string sweep_param_name(SweepParam p) {
    switch (p) {
        case SweepParam::Lambda: return "lambda";
        case SweepParam::Gamma: return "gamma";
        case SweepParam::Beta: return "beta";
    }
    return "lambda";
}

SweepReport sweep(const ExperimentPlan& plan, SweepParam param,
                  const std::vector<double>& values) {
    if (values.empty()) throw std::invalid_argument("sweep: empty value list");
    if (param == SweepParam::Lambda)
        for (const MethodSpec& m : plan.methods)
            if (m.kind == MethodKind::MopJciScqr)
                throw std::invalid_argument(
                    "lambda sweep invalid for SCQR (its objective fixes lambda = 0)");

    SweepReport report;
    report.param = param;
    report.values = values;
    for (double v : values) {
        ExperimentPlan p = plan;
        switch (param) {
            case SweepParam::Lambda: p.config.lambda = v; break;
            case SweepParam::Gamma: p.config.gamma = v; break;
            case SweepParam::Beta:
                p.config.outcome_weights = ExperimentConfig::beta_weights(v);
                break;
        }
        p.name = plan.name + "_" + sweep_param_name(param) + "_" + format_double(v);
        if (!plan.out_dir.empty())
            p.out_dir = (fs::path(plan.out_dir) /
                         (sweep_param_name(param) + "_" + format_double(v)))
                            .string();
        report.reports.push_back(run_experiment(p));
    }
    if (!plan.out_dir.empty())
        write_text_file(fs::path(plan.out_dir) / "sweep.csv", report.long_csv());
    return report;
}

std::string SweepReport::long_csv() const {
    std::ostringstream out;
    out << "param,value,method,metric,outcome,mean,sd\n";
    const std::string pname = sweep_param_name(param);
    for (std::size_t v = 0; v < values.size(); ++v) {
        const ExperimentReport& rep = reports[v];
        for (const MethodAggregate& agg : rep.aggregates) {
            auto emit = [&](const std::string& metric, const std::string& outcome,
                            double mean, double sd) {
                if (std::isnan(mean)) return;
                out << pname << ',' << format_double(values[v]) << ',' << agg.method << ','
                    << metric << ',' << outcome << ',' << format_double(mean) << ','
                    << (std::isnan(sd) ? std::string() : format_double(sd)) << "\n";
            };
            emit("num_groups", "", agg.num_groups.mean, agg.num_groups.sd);
            emit("cov_joint", "", agg.cov_joint.mean, agg.cov_joint.sd);
            if (agg.split_acc_pct >= 0) {
                emit("split_acc_pct", "", agg.split_acc_pct, kNaN);
                emit("split_err_pct", "", agg.split_err_pct, kNaN);
            }
            static const char* kMetricNames[4] = {"v_across", "v_within", "pehe",
                                                  "ci_width"};
            for (std::size_t k = 0; k < agg.outcomes.size(); ++k)
                for (int q = 0; q < 4; ++q)
                    emit(kMetricNames[q], std::to_string(k), agg.outcomes[k][q].mean,
                         agg.outcomes[k][q].sd);
        }
    }
    return out.str();
}

}  // namespace mopjci
