#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <map>
#include <vector>

#include <mpsae/estimator.hpp>
#include <mpsae/oracle.hpp>
#include <mpsae/rng.hpp>

using namespace mpsae;
using Catch::Matchers::WithinAbs;

namespace {

double logit(double p) { return std::log(p / (1.0 - p)); }

/// Census with two municipalities in one department; observed pattern per
/// unit alternates between no deprivations and one 0.1-weight deprivation.
Dataset toy_census(int per_muni) {
    const IndicatorSpec spec = default_spec();
    Dataset ds = Dataset::create(DatasetRole::census, {}, spec.names);
    UnitRecord rec;
    rec.indicators.assign(spec.K, 0);
    rec.indicators[6] = kMissing;
    rec.indicators[7] = kMissing;
    for (int m = 0; m < 2; ++m) {
        rec.dept = "D1";
        rec.muni = "D1M" + std::to_string(m + 1);
        for (int i = 0; i < per_muni; ++i) {
            for (int k = 0; k < 6; ++k) rec.indicators[k] = 0;
            rec.indicators[0] = static_cast<std::int8_t>(i % 2);
            ds.add_record(rec);
        }
    }
    ds.finalize();
    return ds;
}

/// Intercept-only fit producing the same probability for every unit.
GlmmFit flat_fit(double pi, const std::string& name) {
    GlmmFit fit;
    fit.beta = {pi <= 0.0 ? -40.0 : (pi >= 1.0 ? 40.0 : logit(pi))};
    fit.sigma_u = 0.0;
    fit.indicator_name = name;
    return fit;
}

} // namespace

TEST_CASE("all-zero probabilities give a zero headcount", "[estimator]") {
    const IndicatorSpec spec = default_spec();
    const Dataset census = toy_census(20);
    std::map<int, GlmmFit> fits;
    fits[6] = flat_fit(0.0, spec.names[6]);
    fits[7] = flat_fit(0.0, spec.names[7]);
    const auto estimates = estimate_headcount(census, fits, spec, 50, 1);
    for (const auto& e : estimates) {
        CHECK(e.h_hat == 0.0);
        CHECK(e.mc_stderr == 0.0);
    }
}

TEST_CASE("all-one probabilities are deterministic", "[estimator]") {
    const IndicatorSpec spec = default_spec();
    const Dataset census = toy_census(20);
    std::map<int, GlmmFit> fits;
    fits[6] = flat_fit(1.0, spec.names[6]);
    fits[7] = flat_fit(1.0, spec.names[7]);
    const auto estimates = estimate_headcount(census, fits, spec, 50, 1);
    // observed part is 0 or 0.1; plus 0.4 from both missing -> 0.4 or 0.5.
    // Only the 0.5 units clear the strict threshold: half of each domain.
    for (const auto& e : estimates) {
        CHECK(e.h_hat == 0.5);
        CHECK(e.mc_stderr == 0.0);
    }
}

TEST_CASE("single unit converges to the one-missing closed form", "[estimator]") {
    // observed contribution 0.3, one missing indicator of weight 0.2, pi 0.6
    IndicatorSpec spec{3, {0.3, 0.5, 0.2}, 0.4, {2}, {"a", "b", "c"}};
    Dataset census = Dataset::create(DatasetRole::census, {}, spec.names);
    UnitRecord rec;
    rec.dept = "D1";
    rec.muni = "D1M1";
    rec.indicators = {1, 0, kMissing};
    census.add_record(rec);
    census.finalize();

    std::map<int, GlmmFit> fits;
    fits[2] = flat_fit(0.6, "c");
    const long L = 100000;
    const auto estimates = estimate_headcount(census, fits, spec, L, 99);
    const auto& muni = estimates.back();
    REQUIRE(muni.level == "municipality");
    const double se = std::sqrt(0.6 * 0.4 / L);
    CHECK_THAT(muni.h_hat, WithinAbs(0.6, 3.0 * se));
    CHECK_THAT(muni.mc_stderr, WithinAbs(se, 0.2 * se));
}

TEST_CASE("single replicate with no missing indicators is deterministic", "[estimator]") {
    IndicatorSpec spec{2, {0.5, 0.5}, 0.4, {}, {"a", "b"}};
    Dataset census = Dataset::create(DatasetRole::census, {}, spec.names);
    UnitRecord rec;
    rec.dept = "D1";
    rec.muni = "D1M1";
    rec.indicators = {1, 0};
    census.add_record(rec);
    rec.indicators = {0, 0};
    census.add_record(rec);
    census.finalize();
    const auto h = single_mc_replicate(census, {}, spec, RngStream(5));
    CHECK(h.at("D1M1") == 0.5); // q = 0.5 > 0.4 for the first unit only
}

TEST_CASE("single replicate honors forced and impossible poverty", "[estimator]") {
    SECTION("observed part alone exceeds the threshold") {
        IndicatorSpec spec{2, {0.5, 0.5}, 0.4, {1}, {"a", "b"}};
        Dataset census = Dataset::create(DatasetRole::census, {}, spec.names);
        UnitRecord rec;
        rec.dept = "D1";
        rec.muni = "D1M1";
        rec.indicators = {1, kMissing};
        census.add_record(rec);
        census.finalize();
        const std::map<int, std::vector<double>> pihat{{1, {0.5}}};
        CHECK(single_mc_replicate(census, pihat, spec, RngStream(5)).at("D1M1") == 1.0);
    }
    SECTION("missing indicator cannot push the unit over the threshold") {
        IndicatorSpec spec{3, {0.1, 0.8, 0.1}, 0.4, {2}, {"a", "b", "c"}};
        Dataset census = Dataset::create(DatasetRole::census, {}, spec.names);
        UnitRecord rec;
        rec.dept = "D1";
        rec.muni = "D1M1";
        rec.indicators = {1, 0, kMissing}; // k = 0.1, alpha = 0.1 < delta - k
        census.add_record(rec);
        census.finalize();
        const std::map<int, std::vector<double>> pihat{{2, {0.5}}};
        CHECK(single_mc_replicate(census, pihat, spec, RngStream(5)).at("D1M1") == 0.0);
    }
}

TEST_CASE("estimates are deterministic across thread counts", "[estimator]") {
    const IndicatorSpec spec = default_spec();
    const Dataset census = toy_census(100);
    std::map<int, GlmmFit> fits;
    fits[6] = flat_fit(0.55, spec.names[6]);
    fits[7] = flat_fit(0.35, spec.names[7]);
    const auto one = estimate_headcount(census, fits, spec, 500, 42, 1);
    const auto four = estimate_headcount(census, fits, spec, 500, 42, 4);
    const auto eight = estimate_headcount(census, fits, spec, 500, 42, 8);
    REQUIRE(one.size() == four.size());
    for (std::size_t i = 0; i < one.size(); ++i) {
        REQUIRE(one[i].h_hat == four[i].h_hat);
        REQUIRE(one[i].h_hat == eight[i].h_hat);
        REQUIRE(one[i].mc_stderr == four[i].mc_stderr);
    }
    const auto other_seed = estimate_headcount(census, fits, spec, 500, 43, 1);
    bool any_diff = false;
    for (std::size_t i = 0; i < one.size(); ++i)
        any_diff = any_diff || one[i].h_hat != other_seed[i].h_hat;
    CHECK(any_diff);
}

TEST_CASE("raising probabilities never lowers the estimate under a shared seed",
          "[estimator][property]") {
    const IndicatorSpec spec = default_spec();
    const Dataset census = toy_census(50);
    RngStream rng(606);
    for (int rep = 0; rep < 20; ++rep) {
        const double lo6 = 0.2 + 0.3 * rng.uniform01();
        const double lo7 = 0.2 + 0.3 * rng.uniform01();
        std::map<int, GlmmFit> low, high;
        low[6] = flat_fit(lo6, spec.names[6]);
        low[7] = flat_fit(lo7, spec.names[7]);
        high[6] = flat_fit(lo6 + 0.2, spec.names[6]);
        high[7] = flat_fit(lo7 + 0.2, spec.names[7]);
        const auto a = estimate_headcount(census, low, spec, 200, 7 + rep);
        const auto b = estimate_headcount(census, high, spec, 200, 7 + rep);
        for (std::size_t i = 0; i < a.size(); ++i) REQUIRE(b[i].h_hat >= a[i].h_hat);
    }
}

TEST_CASE("department rows aggregate municipality counts", "[estimator]") {
    const IndicatorSpec spec = default_spec();
    const Dataset census = toy_census(30);
    std::map<int, GlmmFit> fits;
    fits[6] = flat_fit(0.5, spec.names[6]);
    fits[7] = flat_fit(0.5, spec.names[7]);
    const auto estimates = estimate_headcount(census, fits, spec, 100, 11);
    REQUIRE(estimates.size() == 3); // one department, two municipalities
    REQUIRE(estimates[0].level == "department");
    // equal-size municipalities: department mean is the average
    CHECK_THAT(estimates[0].h_hat, WithinAbs(0.5 * (estimates[1].h_hat + estimates[2].h_hat),
                                             1e-12));
}

TEST_CASE("estimator validates fits against the spec", "[estimator]") {
    const IndicatorSpec spec = default_spec();
    const Dataset census = toy_census(5);
    std::map<int, GlmmFit> fits;
    fits[6] = flat_fit(0.5, spec.names[6]);
    try {
        estimate_headcount(census, fits, spec, 10, 1);
        FAIL("expected FitMissing");
    } catch (const Error& e) {
        CHECK(e.code() == errc::fit_missing);
    }

    fits[7] = flat_fit(0.5, spec.names[7]);
    fits[3] = flat_fit(0.5, spec.names[3]); // not census-missing
    try {
        estimate_headcount(census, fits, spec, 10, 1);
        FAIL("expected IncompatibleSpec");
    } catch (const Error& e) {
        CHECK(e.code() == errc::incompatible_spec);
    }

    fits.erase(3);
    fits[6].beta = {0.0, 1.0}; // census has p = 0
    try {
        estimate_headcount(census, fits, spec, 10, 1);
        FAIL("expected IncompatibleSpec");
    } catch (const Error& e) {
        CHECK(e.code() == errc::incompatible_spec);
    }

    CHECK_THROWS_AS(estimate_headcount(census, fits, spec, 0, 1), Error);
}

TEST_CASE("estimator agrees with exhaustive enumeration on a small domain", "[estimator]") {
    IndicatorSpec spec{4, {0.25, 0.35, 0.2, 0.2}, 0.4, {2, 3}, {"a", "b", "c", "d"}};
    Dataset census = Dataset::create(DatasetRole::census, {"x_1"}, spec.names);
    RngStream rng(2121);
    UnitRecord rec;
    rec.dept = "D1";
    rec.muni = "D1M1";
    std::map<int, std::vector<double>> pihat{{2, {}}, {3, {}}};
    for (int i = 0; i < 6; ++i) {
        const double p2 = 0.1 + 0.8 * rng.uniform01();
        const double p3 = 0.1 + 0.8 * rng.uniform01();
        rec.covariates = {0.0};
        rec.indicators = {static_cast<std::int8_t>(rng.bernoulli(0.5) ? 1 : 0),
                          static_cast<std::int8_t>(rng.bernoulli(0.5) ? 1 : 0), kMissing,
                          kMissing};
        census.add_record(rec);
        pihat[2].push_back(p2);
        pihat[3].push_back(p3);
    }
    census.finalize();

    const long L = 200000;
    const auto mc = estimate_headcount_from_probabilities(census, pihat, spec, L, 31);
    const auto exact = enumerate_expected_headcount(census, pihat, spec);
    const auto& muni = mc.back();
    const double tol = std::max(3.0 * muni.mc_stderr, 1e-12);
    CHECK_THAT(muni.h_hat, WithinAbs(exact.at("D1M1"), tol));
}
