#pragma once

#include <string>
#include <vector>

#include "mopjci/core.hpp"

namespace mopjci::testing {

// Small hand-rolled dataset: n rows, p covariates filled by caller.
inline TrialDataset make_dataset(std::size_t n, std::size_t p, std::size_t d = 1) {
    TrialDataset ds;
    ds.covariates = Matrix(n, p);
    for (std::size_t j = 0; j < p; ++j)
        ds.covariate_names.push_back("x" + std::to_string(j));
    ds.treatment.assign(n, 0);
    for (std::size_t i = 0; i < n; i += 2) ds.treatment[i] = 1;
    ds.outcomes = Matrix(n, d);
    for (std::size_t k = 0; k < d; ++k) ds.outcome_names.push_back("y" + std::to_string(k));
    return ds;
}

inline bool message_contains(const std::exception& e, const std::string& needle) {
    return std::string(e.what()).find(needle) != std::string::npos;
}

}  // namespace mopjci::testing
