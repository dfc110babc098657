#include <doctest.h>

#include <cmath>
#include <set>
#include <stdexcept>
#include <sstream>

#include "mopjci/core.hpp"
#include "test_helpers.hpp"

using namespace mopjci;
using mopjci::testing::make_dataset;
using mopjci::testing::message_contains;

TEST_CASE("validate_dataset accepts a well-formed dataset") {
    TrialDataset ds = make_dataset(10, 2);
    CHECK_NOTHROW(validate_dataset(ds));
}

TEST_CASE("validate_dataset reports the first violated invariant") {
    SUBCASE("empty arm") {
        TrialDataset ds = make_dataset(10, 2);
        ds.treatment.assign(10, 0);
        CHECK_THROWS_AS(validate_dataset(ds), std::invalid_argument);
        try {
            validate_dataset(ds);
        } catch (const std::exception& e) {
            CHECK(message_contains(e, "treatment arm empty"));
        }
    }
    SUBCASE("non-finite outcome names row and column") {
        TrialDataset ds = make_dataset(10, 2, 2);
        ds.outcomes(3, 1) = std::nan("");
        try {
            validate_dataset(ds);
            FAIL("expected throw");
        } catch (const std::exception& e) {
            CHECK(message_contains(e, "non-finite outcome at row 3, col 1"));
        }
    }
    SUBCASE("non-finite covariate") {
        TrialDataset ds = make_dataset(10, 2);
        ds.covariates(7, 0) = std::numeric_limits<double>::infinity();
        try {
            validate_dataset(ds);
            FAIL("expected throw");
        } catch (const std::exception& e) {
            CHECK(message_contains(e, "non-finite covariate at row 7, col 0"));
        }
    }
    SUBCASE("too small") {
        TrialDataset ds = make_dataset(3, 1);
        CHECK_THROWS_AS(validate_dataset(ds), std::invalid_argument);
    }
    SUBCASE("true_ite shape") {
        TrialDataset ds = make_dataset(10, 2, 2);
        ds.true_ite = Matrix(10, 1);
        try {
            validate_dataset(ds);
            FAIL("expected throw");
        } catch (const std::exception& e) {
            CHECK(message_contains(e, "true_ite shape mismatch"));
        }
    }
    SUBCASE("bad treatment value") {
        TrialDataset ds = make_dataset(10, 2);
        ds.treatment[4] = 2;
        CHECK_THROWS_AS(validate_dataset(ds), std::invalid_argument);
    }
}

namespace {

TrialDataset arm_sized_dataset(std::size_t treated, std::size_t control) {
    TrialDataset ds = make_dataset(treated + control, 1);
    for (std::size_t i = 0; i < ds.n(); ++i) ds.treatment[i] = i < treated ? 1 : 0;
    return ds;
}

}  // namespace

TEST_CASE("split_train_validate is an even stratified partition") {
    SUBCASE("100 + 100") {
        TrialDataset ds = arm_sized_dataset(100, 100);
        RngStream rng(7);
        const SplitIndices idx = split_train_validate_indices(ds, rng);
        CHECK(idx.train.size() == 100);
        CHECK(idx.validate.size() == 100);
        auto treated_in = [&](const std::vector<std::size_t>& rows) {
            std::size_t c = 0;
            for (std::size_t r : rows) c += ds.treatment[r];
            return c;
        };
        CHECK(treated_in(idx.train) == 50);
        CHECK(treated_in(idx.validate) == 50);
    }
    SUBCASE("odd arm splits as parity allows") {
        TrialDataset ds = arm_sized_dataset(101, 100);
        RngStream rng(7);
        const SplitIndices idx = split_train_validate_indices(ds, rng);
        CHECK(idx.train.size() == 101);
        CHECK(idx.validate.size() == 100);
        std::size_t treated_train = 0;
        for (std::size_t r : idx.train) treated_train += ds.treatment[r];
        CHECK(treated_train == 51);
    }
    SUBCASE("every row lands in exactly one part") {
        for (std::uint64_t seed = 0; seed < 20; ++seed) {
            TrialDataset ds = arm_sized_dataset(7 + seed % 5, 9 + seed % 3);
            RngStream rng(seed);
            const SplitIndices idx = split_train_validate_indices(ds, rng);
            std::set<std::size_t> seen(idx.train.begin(), idx.train.end());
            for (std::size_t r : idx.validate) CHECK(seen.insert(r).second);
            CHECK(seen.size() == ds.n());
        }
    }
    SUBCASE("deterministic given the stream") {
        TrialDataset ds = arm_sized_dataset(31, 30);
        RngStream a(123), b(123);
        const SplitIndices ia = split_train_validate_indices(ds, a);
        const SplitIndices ib = split_train_validate_indices(ds, b);
        CHECK(ia.train == ib.train);
        CHECK(ia.validate == ib.validate);
    }
    SUBCASE("arm too small") {
        TrialDataset ds = arm_sized_dataset(1, 10);
        RngStream rng(1);
        CHECK_THROWS_AS(split_train_validate_indices(ds, rng), std::invalid_argument);
    }
}

TEST_CASE("RngStream streams are reproducible and distinct") {
    RngStream a(42, 3), b(42, 3), c(42, 4);
    for (int i = 0; i < 100; ++i) {
        const std::uint64_t va = a.next_u64();
        CHECK(va == b.next_u64());
    }
    bool any_diff = false;
    RngStream a2(42, 3);
    for (int i = 0; i < 100; ++i) any_diff |= a2.next_u64() != c.next_u64();
    CHECK(any_diff);

    // child streams do not depend on parent consumption
    RngStream parent(9);
    RngStream c1 = parent.child(5);
    parent.uniform();
    parent.uniform();
    RngStream c2 = parent.child(5);
    CHECK(c1.next_u64() == c2.next_u64());
}

TEST_CASE("RngStream draws have sane ranges") {
    RngStream rng(11);
    double sum = 0.0;
    for (int i = 0; i < 10000; ++i) {
        const double u = rng.uniform();
        CHECK(u >= 0.0);
        CHECK(u < 1.0);
        sum += u;
    }
    CHECK(std::abs(sum / 10000.0 - 0.5) < 0.02);

    double nsum = 0.0, nsq = 0.0;
    for (int i = 0; i < 10000; ++i) {
        const double z = rng.normal();
        nsum += z;
        nsq += z * z;
    }
    CHECK(std::abs(nsum / 10000.0) < 0.05);
    CHECK(std::abs(nsq / 10000.0 - 1.0) < 0.06);

    for (int i = 0; i < 1000; ++i) CHECK(rng.below(7) < 7);
}

TEST_CASE("dataset CSV round trip") {
    TrialDataset ds = make_dataset(6, 3, 2);
    RngStream rng(5);
    for (std::size_t i = 0; i < ds.n(); ++i) {
        for (std::size_t j = 0; j < ds.p(); ++j) ds.covariates(i, j) = rng.normal();
        for (std::size_t k = 0; k < ds.d(); ++k) ds.outcomes(i, k) = rng.normal(0, 3);
    }
    Matrix tau(6, 2);
    for (std::size_t i = 0; i < 6; ++i)
        for (std::size_t k = 0; k < 2; ++k) tau(i, k) = rng.uniform(-1, 1);
    ds.true_ite = tau;

    const std::string text = dataset_to_csv_string(ds);
    std::istringstream in(text);
    const TrialDataset back = parse_dataset_csv(in);
    CHECK(back.covariates == ds.covariates);
    CHECK(back.outcomes == ds.outcomes);
    CHECK(back.treatment == ds.treatment);
    CHECK(back.covariate_names == ds.covariate_names);
    REQUIRE(back.true_ite.has_value());
    CHECK(*back.true_ite == *ds.true_ite);
    // byte-identical when re-serialized
    CHECK(dataset_to_csv_string(back) == text);
}

TEST_CASE("dataset CSV errors") {
    SUBCASE("empty file") {
        std::istringstream in("");
        CHECK_THROWS_WITH_AS(parse_dataset_csv(in), "no rows", std::runtime_error);
    }
    SUBCASE("header only") {
        std::istringstream in("t,y0,x0\n");
        CHECK_THROWS_WITH_AS(parse_dataset_csv(in), "no rows", std::runtime_error);
    }
    SUBCASE("non-numeric cell names row and column") {
        std::istringstream in("t,y0,x0\n1,2.5,oops\n");
        try {
            parse_dataset_csv(in);
            FAIL("expected throw");
        } catch (const std::exception& e) {
            CHECK(message_contains(e, "row 1"));
            CHECK(message_contains(e, "x0"));
        }
    }
    SUBCASE("missing treatment column") {
        std::istringstream in("y0,x0\n1,2\n");
        CHECK_THROWS_AS(parse_dataset_csv(in), std::runtime_error);
    }
}

TEST_CASE("numeric CSV loader") {
    std::istringstream in("a,b\n1,2\n3,4\n5,6\n");
    const NumericCsv csv = parse_numeric_csv(in);
    CHECK(csv.names == std::vector<std::string>{"a", "b"});
    CHECK(csv.values.rows() == 3);
    CHECK(csv.values(2, 1) == 6.0);
}

TEST_CASE("config json round trip and validation") {
    ExperimentConfig cfg;
    cfg.alpha = 0.1;
    cfg.alpha_v = 0.8;
    cfg.lambda = 0.25;
    cfg.gamma = 0.05;
    cfg.outcome_weights = {0.5, 0.5};
    cfg.estimator = Estimator::QrfScqr;
    cfg.min_leaf = 10;
    cfg.n_runs = 30;
    cfg.seed = 99;
    const ExperimentConfig back = config_from_json_string(config_to_json_string(cfg));
    CHECK(back.alpha == cfg.alpha);
    CHECK(back.alpha_v == cfg.alpha_v);
    CHECK(back.lambda == cfg.lambda);
    CHECK(back.gamma == cfg.gamma);
    CHECK(back.outcome_weights == cfg.outcome_weights);
    CHECK(back.estimator == Estimator::QrfScqr);
    CHECK(back.seed == 99);
    CHECK_NOTHROW(back.validate(2));

    ExperimentConfig bad = cfg;
    bad.outcome_weights = {0.5, 0.6};
    CHECK_THROWS_AS(bad.validate(2), std::invalid_argument);
    bad = cfg;
    bad.alpha = 0.9;  // not below alpha_v
    CHECK_THROWS_AS(bad.validate(2), std::invalid_argument);
    bad = cfg;
    bad.n_runs = 0;
    CHECK_THROWS_AS(bad.validate(2), std::invalid_argument);
}
