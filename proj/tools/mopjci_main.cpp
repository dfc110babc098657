#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "mopjci/datagen.hpp"
#include "mopjci/runner.hpp"

namespace fs = std::filesystem;
using namespace mopjci;

namespace {

int cmd_gen_data(const std::string& variant, int n_train, int n_test, double noise_sd,
                 double rho, double het_c, std::uint64_t seed,
                 const std::string& covariates_path, const std::string& surface_path,
                 const std::string& out_train, const std::string& out_test,
                 const std::string& out_single) {
    if (!covariates_path.empty()) {
        if (surface_path.empty())
            throw std::runtime_error("--covariates requires --surface");
        const NumericCsv covs = load_covariates(covariates_path);
        const ResponseSurfaceSpec spec = surface_from_json_file(surface_path);
        const TrialDataset ds =
            gen_response_surface(covs.values, covs.names, spec, RngStream(seed));
        validate_dataset(ds);
        const std::string out = out_single.empty() ? "dataset.csv" : out_single;
        write_dataset_csv(ds, out);
        std::cout << "wrote " << ds.n() << " rows to " << out << "\n";
        return 0;
    }

    SyntheticSpec spec;
    spec.variant = synthetic_variant_from_name(variant);
    spec.n_train = n_train;
    spec.n_test = n_test;
    spec.noise_sd = noise_sd;
    spec.rho = rho;
    spec.het_c = het_c;
    const auto [train, test] = gen_synthetic(spec, RngStream(seed));
    write_dataset_csv(train, out_train);
    write_dataset_csv(test, out_test);
    std::cout << "wrote " << train.n() << " rows to " << out_train << " and " << test.n()
              << " rows to " << out_test << "\n";
    return 0;
}

void print_summary(const ExperimentReport& report) {
    std::cout << report.summary_csv();
    for (const std::string& f : report.failures) std::cerr << "FAILED " << f << "\n";
}

int cmd_run(const std::string& config_path, const std::string& out_dir, std::size_t workers,
            long long seed, int runs) {
    ExperimentPlan plan = plan_from_json_file(config_path);
    if (!out_dir.empty()) plan.out_dir = out_dir;
    if (workers > 0) plan.workers = workers;
    if (seed >= 0) plan.config.seed = static_cast<std::uint64_t>(seed);
    if (runs > 0) plan.config.n_runs = runs;
    const ExperimentReport report = run_experiment(plan);
    print_summary(report);
    return report.failures.empty() ? 0 : 1;
}

int cmd_sweep(const std::string& config_path, const std::string& param,
              const std::vector<double>& values, const std::string& out_dir,
              std::size_t workers) {
    ExperimentPlan plan = plan_from_json_file(config_path);
    if (!out_dir.empty()) plan.out_dir = out_dir;
    if (workers > 0) plan.workers = workers;
    const SweepReport report = sweep(plan, sweep_param_from_name(param), values);
    std::cout << report.long_csv();
    for (const ExperimentReport& rep : report.reports)
        if (!rep.failures.empty()) {
            for (const std::string& f : rep.failures) std::cerr << "FAILED " << f << "\n";
            return 1;
        }
    return 0;
}

// Concatenates per-run subgroup tables from a run directory into one CSV.
int cmd_report(const std::string& run_dir, const std::string& out_path) {
    std::vector<std::pair<std::size_t, fs::path>> run_dirs;
    for (const auto& entry : fs::directory_iterator(run_dir)) {
        if (!entry.is_directory()) continue;
        const std::string name = entry.path().filename().string();
        if (name.rfind("run_", 0) == 0)
            run_dirs.emplace_back(std::stoul(name.substr(4)), entry.path());
    }
    std::sort(run_dirs.begin(), run_dirs.end());
    if (run_dirs.empty()) throw std::runtime_error("no run_* directories in " + run_dir);

    std::ostringstream out;
    bool wrote_header = false;
    for (const auto& [r, dir] : run_dirs) {
        std::vector<fs::path> method_dirs;
        for (const auto& entry : fs::directory_iterator(dir))
            if (entry.is_directory()) method_dirs.push_back(entry.path());
        std::sort(method_dirs.begin(), method_dirs.end());
        for (const fs::path& mdir : method_dirs) {
            std::ifstream in(mdir / "subgroups.csv");
            if (!in) continue;
            std::string line;
            bool header = true;
            while (std::getline(in, line)) {
                if (header) {
                    if (!wrote_header) {
                        out << "run,method," << line << "\n";
                        wrote_header = true;
                    }
                    header = false;
                    continue;
                }
                if (!line.empty())
                    out << r << ',' << mdir.filename().string() << ',' << line << "\n";
            }
        }
    }
    if (out_path.empty()) {
        std::cout << out.str();
    } else {
        std::ofstream f(out_path);
        f << out.str();
        std::cout << "wrote " << out_path << "\n";
    }
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Conformal multi-outcome subgroup partitioning for RCT data"};
    app.require_subcommand(1);

    // gen-data
    auto* gen = app.add_subcommand("gen-data", "Generate a dataset CSV");
    std::string variant = "uncorrelated";
    int n_train = 300, n_test = 200;
    double noise_sd = 0.1, rho = 0.8, het_c = 10.0;
    std::uint64_t seed = 42;
    std::string covariates_path, surface_path;
    std::string out_train = "train.csv", out_test = "test.csv", out_single;
    gen->add_option("--variant", variant,
                    "uncorrelated | correlated_covariates | heteroscedastic");
    gen->add_option("--n-train", n_train, "training rows");
    gen->add_option("--n-test", n_test, "test rows");
    gen->add_option("--noise-sd", noise_sd, "outcome noise sd");
    gen->add_option("--rho", rho, "time/ALT correlation (correlated variant)");
    gen->add_option("--het-c", het_c, "noise growth rate (heteroscedastic variant)");
    gen->add_option("--seed", seed, "RNG seed");
    gen->add_option("--covariates", covariates_path,
                    "covariate CSV for response-surface generation");
    gen->add_option("--surface", surface_path, "response-surface spec JSON");
    gen->add_option("--out-train", out_train, "output CSV (train)");
    gen->add_option("--out-test", out_test, "output CSV (test)");
    gen->add_option("--out", out_single, "output CSV (response-surface dataset)");

    // run
    auto* run = app.add_subcommand("run", "Run an experiment plan");
    std::string run_config, run_out;
    std::size_t run_workers = 0;
    long long run_seed = -1;
    int run_runs = 0;
    run->add_option("--config", run_config, "plan JSON")->required();
    run->add_option("--out", run_out, "output directory");
    run->add_option("--workers", run_workers, "parallel run workers (0 = auto)");
    run->add_option("--seed", run_seed, "override config seed");
    run->add_option("--runs", run_runs, "override config n_runs");

    // sweep
    auto* sw = app.add_subcommand("sweep", "Sweep a partitioning hyperparameter");
    std::string sweep_config, sweep_param, sweep_out;
    std::vector<double> sweep_values;
    std::size_t sweep_workers = 0;
    sw->add_option("--config", sweep_config, "plan JSON")->required();
    sw->add_option("--param", sweep_param, "lambda | gamma | beta")->required();
    sw->add_option("--values", sweep_values, "parameter values")
        ->required()
        ->delimiter(',');
    sw->add_option("--out", sweep_out, "output directory");
    sw->add_option("--workers", sweep_workers, "parallel run workers");

    // report
    auto* rep = app.add_subcommand("report", "Collect subgroup tables from a run directory");
    std::string report_dir, report_out;
    rep->add_option("--run-dir", report_dir, "experiment output directory")->required();
    rep->add_option("--out", report_out, "output CSV (default: stdout)");

    CLI11_PARSE(app, argc, argv);

    try {
        if (gen->parsed())
            return cmd_gen_data(variant, n_train, n_test, noise_sd, rho, het_c, seed,
                                covariates_path, surface_path, out_train, out_test,
                                out_single);
        if (run->parsed()) return cmd_run(run_config, run_out, run_workers, run_seed, run_runs);
        if (sw->parsed())
            return cmd_sweep(sweep_config, sweep_param, sweep_values, sweep_out,
                             sweep_workers);
        if (rep->parsed()) return cmd_report(report_dir, report_out);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
