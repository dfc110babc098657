#pragma once

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

namespace mopjci {

// ============================================================================
// Dense row-major matrix. Small helper, no linear algebra needed here.
// ============================================================================
class Matrix {
public:
    Matrix() = default;
    Matrix(std::size_t rows, std::size_t cols, double fill = 0.0)
        : rows_(rows), cols_(cols), data_(rows * cols, fill) {}

    std::size_t rows() const { return rows_; }
    std::size_t cols() const { return cols_; }
    bool empty() const { return data_.empty(); }

    double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
    double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

    std::span<const double> row(std::size_t r) const {
        return {data_.data() + r * cols_, cols_};
    }
    std::span<double> row(std::size_t r) {
        return {data_.data() + r * cols_, cols_};
    }

    std::vector<double> column(std::size_t c) const;
    Matrix subset_rows(std::span<const std::size_t> idx) const;

    const std::vector<double>& data() const { return data_; }

    friend bool operator==(const Matrix&, const Matrix&) = default;

private:
    std::size_t rows_ = 0, cols_ = 0;
    std::vector<double> data_;
};

// ============================================================================
// Closed interval [lo, hi].
// ============================================================================
struct Interval {
    double lo = 0.0;
    double hi = 0.0;

    double width() const { return hi - lo; }
    bool contains(double x) const { return lo <= x && x <= hi; }

    friend bool operator==(const Interval&, const Interval&) = default;
};

// ============================================================================
// Deterministic counter-based RNG stream (splitmix64 core).
//
// Identical (seed, stream_id) pairs reproduce identical draw sequences.
// child(i) derives an independent-behaving stream from the construction key,
// regardless of how many draws the parent has consumed, so per-run / per-tree
// streams are stable under any scheduling.
// ============================================================================
class RngStream {
public:
    RngStream() : RngStream(0, 0) {}
    explicit RngStream(std::uint64_t seed, std::uint64_t stream_id = 0);

    std::uint64_t next_u64();
    double uniform();                       // [0, 1)
    double uniform(double a, double b);     // [a, b)
    double normal();                        // standard normal, Box-Muller
    double normal(double mean, double sd);
    std::uint64_t below(std::uint64_t n);   // unbiased draw in [0, n)
    bool bernoulli(double p);

    RngStream child(std::uint64_t id) const;

    std::uint64_t seed() const { return seed_; }
    std::uint64_t stream_id() const { return stream_id_; }

private:
    std::uint64_t seed_ = 0;
    std::uint64_t stream_id_ = 0;
    std::uint64_t key_ = 0;    // mixed (seed, stream_id), fixed at construction
    std::uint64_t state_ = 0;  // advances with draws
};

// Fisher-Yates shuffle driven by an RngStream.
template <typename T>
void shuffle(std::vector<T>& v, RngStream& rng) {
    for (std::size_t i = v.size(); i > 1; --i) {
        std::swap(v[i - 1], v[rng.below(i)]);
    }
}

// ============================================================================
// Trial data: covariates, binary treatment, d continuous outcomes, and the
// oracle treatment effects when the data was generated.
// ============================================================================
struct TrialDataset {
    Matrix covariates;                        // N x p
    std::vector<std::string> covariate_names; // p
    std::vector<int> treatment;               // N, values in {0,1}
    Matrix outcomes;                          // N x d
    std::vector<std::string> outcome_names;   // d
    std::optional<Matrix> true_ite;           // N x d when present

    std::size_t n() const { return covariates.rows(); }
    std::size_t p() const { return covariates.cols(); }
    std::size_t d() const { return outcomes.cols(); }

    TrialDataset subset(std::span<const std::size_t> rows) const;
    // Restrict to a single outcome column (keeps covariates/treatment).
    TrialDataset select_outcome(std::size_t k) const;
};

// Throws std::invalid_argument naming the first violated invariant.
// Returns its argument so call sites can chain.
const TrialDataset& validate_dataset(const TrialDataset& ds);

// ============================================================================
// Experiment configuration.
// ============================================================================
enum class Estimator { RfScr, QrfScqr };

std::string estimator_name(Estimator e);
Estimator estimator_from_name(const std::string& name);

struct ExperimentConfig {
    double alpha = 0.1;    // overall miscoverage for the W band
    double alpha_v = 0.8;  // miscoverage for the V deviation band
    double lambda = 0.25;
    double gamma = 0.05;
    std::vector<double> outcome_weights = {0.5, 0.5};  // normalized, size d
    Estimator estimator = Estimator::RfScr;
    int min_leaf = 20;
    int n_runs = 30;
    std::uint64_t seed = 42;

    void validate_scalars() const;       // checks everything except the weights
    void validate(std::size_t d) const;  // throws std::invalid_argument

    // Weight vector for two outcomes parameterized by beta: (beta, 1-beta).
    static std::vector<double> beta_weights(double beta) { return {beta, 1.0 - beta}; }
};

std::string config_to_json_string(const ExperimentConfig& cfg);
ExperimentConfig config_from_json_string(const std::string& text);
ExperimentConfig config_from_json_file(const std::string& path);

// ============================================================================
// 50/50 train/validation split, stratified by treatment arm.
// ============================================================================
struct SplitIndices {
    std::vector<std::size_t> train;     // ascending row indices
    std::vector<std::size_t> validate;  // ascending row indices
};

SplitIndices split_train_validate_indices(const TrialDataset& ds, RngStream& rng);
std::pair<TrialDataset, TrialDataset> split_train_validate(const TrialDataset& ds,
                                                           RngStream& rng);

// ============================================================================
// Dataset CSV format: header row, column `t` (0/1), `y0..y{d-1}`, optional
// `tau0..tau{d-1}`, every remaining column a covariate.
// ============================================================================
TrialDataset parse_dataset_csv(std::istream& in);
TrialDataset read_dataset_csv(const std::string& path);
void write_dataset_csv(const TrialDataset& ds, std::ostream& out);
void write_dataset_csv(const TrialDataset& ds, const std::string& path);
std::string dataset_to_csv_string(const TrialDataset& ds);

// Plain numeric CSV (header + numeric cells), used for covariate files.
struct NumericCsv {
    std::vector<std::string> names;
    Matrix values;
};
NumericCsv parse_numeric_csv(std::istream& in);
NumericCsv read_numeric_csv(const std::string& path);

// Shortest round-trip decimal rendering (used by all CSV/JSON writers so that
// identical runs produce byte-identical artifacts).
std::string format_double(double v);

}  // namespace mopjci
