#include "mopjci/core.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>
#include <stdexcept>

#include <nlohmann/json.hpp>

namespace mopjci {

using nlohmann::json;

// ----------------------------------------------------------------------------
// Matrix
// ----------------------------------------------------------------------------

std::vector<double> Matrix::column(std::size_t c) const {
    std::vector<double> out(rows_);
    for (std::size_t r = 0; r < rows_; ++r) out[r] = (*this)(r, c);
    return out;
}

Matrix Matrix::subset_rows(std::span<const std::size_t> idx) const {
    Matrix out(idx.size(), cols_);
    for (std::size_t i = 0; i < idx.size(); ++i) {
        auto src = row(idx[i]);
        std::copy(src.begin(), src.end(), out.row(i).begin());
    }
    return out;
}

// ----------------------------------------------------------------------------
// RngStream
// ----------------------------------------------------------------------------

namespace {

constexpr std::uint64_t kGolden = 0x9e3779b97f4a7c15ULL;

std::uint64_t mix64(std::uint64_t x) {
    x += kGolden;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

}  // namespace

RngStream::RngStream(std::uint64_t seed, std::uint64_t stream_id)
    : seed_(seed), stream_id_(stream_id) {
    key_ = mix64(mix64(seed) ^ mix64(stream_id ^ 0x5851f42d4c957f2dULL));
    state_ = key_;
}

std::uint64_t RngStream::next_u64() {
    state_ += kGolden;
    std::uint64_t x = state_;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

double RngStream::uniform() {
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
}

double RngStream::uniform(double a, double b) { return a + (b - a) * uniform(); }

double RngStream::normal() {
    // Box-Muller, cosine branch only; two u64 draws per variate.
    const double u1 = static_cast<double>((next_u64() >> 11) + 1) * 0x1.0p-53;  // (0, 1]
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
}

double RngStream::normal(double mean, double sd) { return mean + sd * normal(); }

std::uint64_t RngStream::below(std::uint64_t n) {
    const std::uint64_t threshold = (0 - n) % n;  // 2^64 mod n
    for (;;) {
        const std::uint64_t r = next_u64();
        if (r >= threshold) return r % n;
    }
}

bool RngStream::bernoulli(double p) { return uniform() < p; }

RngStream RngStream::child(std::uint64_t id) const { return RngStream(key_, id); }

// ----------------------------------------------------------------------------
// TrialDataset
// ----------------------------------------------------------------------------

TrialDataset TrialDataset::subset(std::span<const std::size_t> rows) const {
    TrialDataset out;
    out.covariates = covariates.subset_rows(rows);
    out.covariate_names = covariate_names;
    out.treatment.reserve(rows.size());
    for (std::size_t r : rows) out.treatment.push_back(treatment[r]);
    out.outcomes = outcomes.subset_rows(rows);
    out.outcome_names = outcome_names;
    if (true_ite) out.true_ite = true_ite->subset_rows(rows);
    return out;
}

TrialDataset TrialDataset::select_outcome(std::size_t k) const {
    TrialDataset out;
    out.covariates = covariates;
    out.covariate_names = covariate_names;
    out.treatment = treatment;
    out.outcomes = Matrix(n(), 1);
    for (std::size_t i = 0; i < n(); ++i) out.outcomes(i, 0) = outcomes(i, k);
    out.outcome_names = {outcome_names[k]};
    if (true_ite) {
        Matrix t(n(), 1);
        for (std::size_t i = 0; i < n(); ++i) t(i, 0) = (*true_ite)(i, k);
        out.true_ite = std::move(t);
    }
    return out;
}

const TrialDataset& validate_dataset(const TrialDataset& ds) {
    const std::size_t n = ds.n(), p = ds.p(), d = ds.d();
    if (n < 4) throw std::invalid_argument("dataset has fewer than 4 rows");
    if (p < 1) throw std::invalid_argument("no covariates");
    if (d < 1) throw std::invalid_argument("no outcomes");
    if (ds.covariate_names.size() != p)
        throw std::invalid_argument("covariate name count mismatch");
    if (ds.outcome_names.size() != d)
        throw std::invalid_argument("outcome name count mismatch");
    if (ds.treatment.size() != n) throw std::invalid_argument("treatment length mismatch");
    if (ds.outcomes.rows() != n) throw std::invalid_argument("outcome row count mismatch");

    std::size_t treated = 0, control = 0;
    for (std::size_t i = 0; i < n; ++i) {
        const int t = ds.treatment[i];
        if (t != 0 && t != 1)
            throw std::invalid_argument("treatment value not 0/1 at row " + std::to_string(i));
        (t == 1 ? treated : control)++;
    }
    if (treated == 0 || control == 0) throw std::invalid_argument("treatment arm empty");

    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < p; ++j)
            if (!std::isfinite(ds.covariates(i, j)))
                throw std::invalid_argument("non-finite covariate at row " + std::to_string(i) +
                                            ", col " + std::to_string(j));
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t k = 0; k < d; ++k)
            if (!std::isfinite(ds.outcomes(i, k)))
                throw std::invalid_argument("non-finite outcome at row " + std::to_string(i) +
                                            ", col " + std::to_string(k));

    if (ds.true_ite) {
        if (ds.true_ite->rows() != n || ds.true_ite->cols() != d)
            throw std::invalid_argument("true_ite shape mismatch");
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t k = 0; k < d; ++k)
                if (!std::isfinite((*ds.true_ite)(i, k)))
                    throw std::invalid_argument("non-finite true_ite at row " +
                                                std::to_string(i) + ", col " + std::to_string(k));
    }
    return ds;
}

// ----------------------------------------------------------------------------
// ExperimentConfig
// ----------------------------------------------------------------------------

std::string estimator_name(Estimator e) {
    return e == Estimator::RfScr ? "rf_scr" : "qrf_scqr";
}

Estimator estimator_from_name(const std::string& name) {
    if (name == "rf_scr") return Estimator::RfScr;
    if (name == "qrf_scqr") return Estimator::QrfScqr;
    throw std::invalid_argument("unknown estimator: " + name);
}

void ExperimentConfig::validate_scalars() const {
    if (!(alpha > 0.0 && alpha < 1.0)) throw std::invalid_argument("alpha not in (0,1)");
    if (!(alpha_v > 0.0 && alpha_v < 1.0)) throw std::invalid_argument("alpha_v not in (0,1)");
    if (!(alpha < alpha_v)) throw std::invalid_argument("alpha must be < alpha_v");
    if (!(lambda >= 0.0 && lambda <= 1.0)) throw std::invalid_argument("lambda not in [0,1]");
    if (!(gamma >= 0.0)) throw std::invalid_argument("gamma negative");
    if (min_leaf < 1) throw std::invalid_argument("min_leaf must be positive");
    if (n_runs < 1) throw std::invalid_argument("n_runs must be positive");
}

void ExperimentConfig::validate(std::size_t d) const {
    validate_scalars();
    if (outcome_weights.size() != d)
        throw std::invalid_argument("outcome_weights size != number of outcomes");
    double sum = 0.0;
    for (double w : outcome_weights) {
        if (!(w >= 0.0)) throw std::invalid_argument("negative outcome weight");
        sum += w;
    }
    if (std::abs(sum - 1.0) > 1e-12)
        throw std::invalid_argument("outcome_weights do not sum to 1");
}

std::string config_to_json_string(const ExperimentConfig& cfg) {
    json j;
    j["alpha"] = cfg.alpha;
    j["alpha_v"] = cfg.alpha_v;
    j["lambda"] = cfg.lambda;
    j["gamma"] = cfg.gamma;
    j["outcome_weights"] = cfg.outcome_weights;
    j["estimator"] = estimator_name(cfg.estimator);
    j["min_leaf"] = cfg.min_leaf;
    j["n_runs"] = cfg.n_runs;
    j["seed"] = cfg.seed;
    return j.dump(2);
}

namespace {

ExperimentConfig config_from_json(const json& j) {
    ExperimentConfig cfg;
    if (j.contains("alpha")) cfg.alpha = j.at("alpha").get<double>();
    if (j.contains("alpha_v")) cfg.alpha_v = j.at("alpha_v").get<double>();
    if (j.contains("lambda")) cfg.lambda = j.at("lambda").get<double>();
    if (j.contains("gamma")) cfg.gamma = j.at("gamma").get<double>();
    if (j.contains("outcome_weights"))
        cfg.outcome_weights = j.at("outcome_weights").get<std::vector<double>>();
    if (j.contains("estimator"))
        cfg.estimator = estimator_from_name(j.at("estimator").get<std::string>());
    if (j.contains("min_leaf")) cfg.min_leaf = j.at("min_leaf").get<int>();
    if (j.contains("n_runs")) cfg.n_runs = j.at("n_runs").get<int>();
    if (j.contains("seed")) cfg.seed = j.at("seed").get<std::uint64_t>();
    return cfg;
}

}  // namespace

ExperimentConfig config_from_json_string(const std::string& text) {
    return config_from_json(json::parse(text));
}

ExperimentConfig config_from_json_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open config file: " + path);
    json j;
    in >> j;
    return config_from_json(j);
}

// ----------------------------------------------------------------------------
// split_train_validate
// ----------------------------------------------------------------------------

SplitIndices split_train_validate_indices(const TrialDataset& ds, RngStream& rng) {
    std::vector<std::size_t> arm0, arm1;
    for (std::size_t i = 0; i < ds.n(); ++i) (ds.treatment[i] == 1 ? arm1 : arm0).push_back(i);
    if (arm0.size() < 2 || arm1.size() < 2)
        throw std::invalid_argument("treatment arm too small to split");

    SplitIndices out;
    for (auto* arm : {&arm0, &arm1}) {
        shuffle(*arm, rng);
        const std::size_t n_train = (arm->size() + 1) / 2;
        out.train.insert(out.train.end(), arm->begin(), arm->begin() + n_train);
        out.validate.insert(out.validate.end(), arm->begin() + n_train, arm->end());
    }
    std::sort(out.train.begin(), out.train.end());
    std::sort(out.validate.begin(), out.validate.end());
    return out;
}

std::pair<TrialDataset, TrialDataset> split_train_validate(const TrialDataset& ds,
                                                           RngStream& rng) {
    const SplitIndices idx = split_train_validate_indices(ds, rng);
    return {ds.subset(idx.train), ds.subset(idx.validate)};
}

// ----------------------------------------------------------------------------
// CSV
// ----------------------------------------------------------------------------

std::string format_double(double v) {
    char buf[40];
    auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), v);
    (void)ec;
    return std::string(buf, ptr);
}

namespace {

std::vector<std::string> split_csv_line(const std::string& line) {
    std::vector<std::string> cells;
    std::string cur;
    for (char c : line) {
        if (c == ',') {
            cells.push_back(cur);
            cur.clear();
        } else if (c != '\r') {
            cur.push_back(c);
        }
    }
    cells.push_back(cur);
    return cells;
}

double parse_cell(const std::string& cell, std::size_t row, const std::string& col) {
    const char* begin = cell.data();
    const char* end = begin + cell.size();
    while (begin < end && (*begin == ' ' || *begin == '\t')) ++begin;
    while (end > begin && (end[-1] == ' ' || end[-1] == '\t')) --end;
    double value = 0.0;
    auto [ptr, ec] = std::from_chars(begin, end, value);
    if (ec != std::errc() || ptr != end)
        throw std::runtime_error("non-numeric cell at row " + std::to_string(row) + ", col " +
                                 col);
    return value;
}

}  // namespace

TrialDataset parse_dataset_csv(std::istream& in) {
    std::string line;
    if (!std::getline(in, line)) throw std::runtime_error("no rows");
    const std::vector<std::string> header = split_csv_line(line);

    int t_col = -1;
    std::vector<int> y_cols, tau_cols, cov_cols;
    auto outcome_index = [](const std::string& name, const std::string& prefix) -> int {
        if (name.size() <= prefix.size() || name.compare(0, prefix.size(), prefix) != 0)
            return -1;
        for (std::size_t i = prefix.size(); i < name.size(); ++i)
            if (!std::isdigit(static_cast<unsigned char>(name[i]))) return -1;
        return std::stoi(name.substr(prefix.size()));
    };

    std::vector<std::pair<int, int>> y_found, tau_found;  // (outcome index, column)
    for (std::size_t c = 0; c < header.size(); ++c) {
        const std::string& name = header[c];
        if (name == "t") {
            t_col = static_cast<int>(c);
        } else if (int k = outcome_index(name, "y"); k >= 0) {
            y_found.emplace_back(k, static_cast<int>(c));
        } else if (int k2 = outcome_index(name, "tau"); k2 >= 0) {
            tau_found.emplace_back(k2, static_cast<int>(c));
        } else {
            cov_cols.push_back(static_cast<int>(c));
        }
    }
    if (t_col < 0) throw std::runtime_error("missing treatment column 't'");
    if (y_found.empty()) throw std::runtime_error("missing outcome columns 'y0..'");
    std::sort(y_found.begin(), y_found.end());
    std::sort(tau_found.begin(), tau_found.end());
    for (std::size_t k = 0; k < y_found.size(); ++k)
        if (y_found[k].first != static_cast<int>(k))
            throw std::runtime_error("outcome columns must be y0..y{d-1} without gaps");
    if (!tau_found.empty() && tau_found.size() != y_found.size())
        throw std::runtime_error("tau columns must match outcome count");
    for (auto& yc : y_found) y_cols.push_back(yc.second);
    for (auto& tc : tau_found) tau_cols.push_back(tc.second);

    std::vector<std::vector<double>> rows;
    std::size_t row_no = 0;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        ++row_no;
        const std::vector<std::string> cells = split_csv_line(line);
        if (cells.size() != header.size())
            throw std::runtime_error("wrong cell count at row " + std::to_string(row_no));
        std::vector<double> vals(cells.size());
        for (std::size_t c = 0; c < cells.size(); ++c)
            vals[c] = parse_cell(cells[c], row_no, header[c]);
        rows.push_back(std::move(vals));
    }
    if (rows.empty()) throw std::runtime_error("no rows");

    const std::size_t n = rows.size(), d = y_cols.size(), p = cov_cols.size();
    TrialDataset ds;
    ds.covariates = Matrix(n, p);
    ds.outcomes = Matrix(n, d);
    ds.treatment.resize(n);
    for (int c : cov_cols) ds.covariate_names.push_back(header[c]);
    for (std::size_t k = 0; k < d; ++k) ds.outcome_names.push_back("y" + std::to_string(k));
    if (!tau_cols.empty()) ds.true_ite = Matrix(n, d);

    for (std::size_t i = 0; i < n; ++i) {
        const double t = rows[i][t_col];
        if (t != 0.0 && t != 1.0)
            throw std::runtime_error("treatment value not 0/1 at row " + std::to_string(i + 1));
        ds.treatment[i] = static_cast<int>(t);
        for (std::size_t k = 0; k < d; ++k) ds.outcomes(i, k) = rows[i][y_cols[k]];
        for (std::size_t j = 0; j < p; ++j) ds.covariates(i, j) = rows[i][cov_cols[j]];
        if (ds.true_ite)
            for (std::size_t k = 0; k < d; ++k) (*ds.true_ite)(i, k) = rows[i][tau_cols[k]];
    }
    return ds;
}

TrialDataset read_dataset_csv(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open dataset file: " + path);
    return parse_dataset_csv(in);
}

NumericCsv parse_numeric_csv(std::istream& in) {
    std::string line;
    if (!std::getline(in, line)) throw std::runtime_error("no rows");
    NumericCsv out;
    out.names = split_csv_line(line);

    std::vector<std::vector<double>> rows;
    std::size_t row_no = 0;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        ++row_no;
        const std::vector<std::string> cells = split_csv_line(line);
        if (cells.size() != out.names.size())
            throw std::runtime_error("wrong cell count at row " + std::to_string(row_no));
        std::vector<double> vals(cells.size());
        for (std::size_t c = 0; c < cells.size(); ++c)
            vals[c] = parse_cell(cells[c], row_no, out.names[c]);
        rows.push_back(std::move(vals));
    }
    if (rows.empty()) throw std::runtime_error("no rows");

    out.values = Matrix(rows.size(), out.names.size());
    for (std::size_t i = 0; i < rows.size(); ++i)
        for (std::size_t c = 0; c < rows[i].size(); ++c) out.values(i, c) = rows[i][c];
    return out;
}

NumericCsv read_numeric_csv(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open covariate file: " + path);
    return parse_numeric_csv(in);
}

void write_dataset_csv(const TrialDataset& ds, std::ostream& out) {
    out << "t";
    for (std::size_t k = 0; k < ds.d(); ++k) out << ",y" << k;
    if (ds.true_ite)
        for (std::size_t k = 0; k < ds.d(); ++k) out << ",tau" << k;
    for (const auto& name : ds.covariate_names) out << "," << name;
    out << "\n";
    for (std::size_t i = 0; i < ds.n(); ++i) {
        out << ds.treatment[i];
        for (std::size_t k = 0; k < ds.d(); ++k) out << "," << format_double(ds.outcomes(i, k));
        if (ds.true_ite)
            for (std::size_t k = 0; k < ds.d(); ++k)
                out << "," << format_double((*ds.true_ite)(i, k));
        for (std::size_t j = 0; j < ds.p(); ++j)
            out << "," << format_double(ds.covariates(i, j));
        out << "\n";
    }
}

void write_dataset_csv(const TrialDataset& ds, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write dataset file: " + path);
    write_dataset_csv(ds, out);
}

std::string dataset_to_csv_string(const TrialDataset& ds) {
    std::ostringstream out;
    write_dataset_csv(ds, out);
    return out.str();
}

}  // namespace mopjci
