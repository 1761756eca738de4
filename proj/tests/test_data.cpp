#include <catch2/catch_amalgamated.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <set>
#include <string>

#include <mpsae/data.hpp>
#include <mpsae/rng.hpp>

using namespace mpsae;
namespace fs = std::filesystem;

namespace {

fs::path temp_dir() {
    static const fs::path dir = [] {
        auto d = fs::temp_directory_path() / "mpsae_test_data";
        fs::create_directories(d);
        return d;
    }();
    return dir;
}

fs::path write_file(const std::string& name, const std::string& content) {
    const fs::path path = temp_dir() / name;
    std::ofstream out(path);
    out << content;
    return path;
}

CsvSchema toy_schema() {
    CsvSchema schema;
    schema.weight_column.clear();
    schema.covariate_columns = {"x_1"};
    schema.indicator_columns = {"y_1"};
    return schema;
}

} // namespace

TEST_CASE("minimal well-formed csv loads", "[data]") {
    const auto path = write_file("ok.csv",
                                 "domain_dept,domain_muni,x_1,y_1\n"
                                 "D1,D1M1,0.5,1\n"
                                 "D1,D1M2,-1.25,0\n"
                                 "D2,D2M1,3,1\n");
    const Dataset ds = load_dataset(path.string(), DatasetRole::survey, toy_schema());
    CHECK(ds.n() == 3);
    CHECK(ds.p() == 1);
    CHECK(ds.k() == 1);
    CHECK(ds.num_domains() == 3);
    CHECK(ds.covariate(1, 0) == -1.25);
    CHECK(ds.indicator(2, 0) == 1);
    CHECK(ds.weight(0) == 1.0);
    CHECK(ds.department_index().size() == 2);
}

TEST_CASE("out-of-range indicator value is rejected", "[data]") {
    const auto path = write_file("bad_ind.csv",
                                 "domain_dept,domain_muni,x_1,y_1\n"
                                 "D1,D1M1,0.5,2\n");
    try {
        load_dataset(path.string(), DatasetRole::survey, toy_schema());
        FAIL("expected NonBinaryIndicator");
    } catch (const Error& e) {
        CHECK(e.code() == errc::non_binary_indicator);
    }
}

TEST_CASE("missing tokens load as missing", "[data]") {
    const auto path = write_file("na.csv",
                                 "domain_dept,domain_muni,x_1,y_1\n"
                                 "D1,D1M1,0.5,NA\n"
                                 "D1,D1M1,0.25,\n"
                                 "D1,D1M1,0.5,1\n");
    const Dataset ds = load_dataset(path.string(), DatasetRole::census, toy_schema());
    CHECK(ds.indicator(0, 0) == kMissing);
    CHECK(ds.indicator(1, 0) == kMissing);
    CHECK(ds.indicator(2, 0) == 1);
}

TEST_CASE("census-missing columns may be absent from the file", "[data]") {
    const auto path = write_file("census.csv",
                                 "domain_dept,domain_muni,x_1,y_1\n"
                                 "D1,D1M1,0.5,1\n");
    CsvSchema schema = toy_schema();
    schema.indicator_columns = {"y_1", ""}; // second indicator not in the census
    const Dataset ds = load_dataset(path.string(), DatasetRole::census, schema);
    CHECK(ds.k() == 2);
    CHECK(ds.indicator(0, 0) == 1);
    CHECK(ds.indicator(0, 1) == kMissing);
}

TEST_CASE("loader error codes", "[data]") {
    const auto no_col = write_file("no_col.csv", "domain_dept,domain_muni,y_1\nD1,D1M1,1\n");
    try {
        load_dataset(no_col.string(), DatasetRole::survey, toy_schema());
        FAIL("expected MissingColumn");
    } catch (const Error& e) {
        CHECK(e.code() == errc::missing_column);
    }

    const auto bad_cov = write_file("bad_cov.csv",
                                    "domain_dept,domain_muni,x_1,y_1\nD1,D1M1,oops,1\n");
    try {
        load_dataset(bad_cov.string(), DatasetRole::survey, toy_schema());
        FAIL("expected NonFiniteCovariate");
    } catch (const Error& e) {
        CHECK(e.code() == errc::non_finite_covariate);
    }

    const auto inf_cov = write_file("inf_cov.csv",
                                    "domain_dept,domain_muni,x_1,y_1\nD1,D1M1,inf,1\n");
    try {
        load_dataset(inf_cov.string(), DatasetRole::survey, toy_schema());
        FAIL("expected NonFiniteCovariate");
    } catch (const Error& e) {
        CHECK(e.code() == errc::non_finite_covariate);
    }

    const auto empty = write_file("empty.csv", "domain_dept,domain_muni,x_1,y_1\n");
    try {
        load_dataset(empty.string(), DatasetRole::survey, toy_schema());
        FAIL("expected EmptyDataset");
    } catch (const Error& e) {
        CHECK(e.code() == errc::empty_dataset);
    }

    const auto bad_weight = write_file("bad_w.csv",
                                       "domain_dept,domain_muni,weight,x_1,y_1\n"
                                       "D1,D1M1,-2,0.5,1\n");
    CsvSchema schema = toy_schema();
    schema.weight_column = "weight";
    try {
        load_dataset(bad_weight.string(), DatasetRole::survey, schema);
        FAIL("expected InvalidWeight");
    } catch (const Error& e) {
        CHECK(e.code() == errc::invalid_weight);
    }
}

TEST_CASE("municipality mapped to two departments is rejected", "[data]") {
    const auto path = write_file("two_depts.csv",
                                 "domain_dept,domain_muni,x_1,y_1\n"
                                 "D1,D1M1,0.5,1\n"
                                 "D2,D1M1,0.5,0\n");
    try {
        load_dataset(path.string(), DatasetRole::survey, toy_schema());
        FAIL("expected InconsistentHierarchy");
    } catch (const Error& e) {
        CHECK(e.code() == errc::inconsistent_hierarchy);
    }
}

TEST_CASE("load-save-load round trips records", "[data]") {
    RngStream rng(31);
    Dataset ds = Dataset::create(DatasetRole::survey, {"x_1", "x_2"}, {"y_1", "y_2"});
    for (int i = 0; i < 50; ++i) {
        UnitRecord rec;
        const int d = static_cast<int>(rng.below(5));
        rec.dept = "D" + std::to_string(d % 2 + 1);
        rec.muni = rec.dept + "M" + std::to_string(d + 1);
        rec.weight = 0.5 + rng.uniform01() * 10.0;
        rec.covariates = {rng.normal(), rng.normal(2.0, 3.0)};
        rec.indicators = {static_cast<std::int8_t>(rng.bernoulli(0.5) ? 1 : 0),
                          static_cast<std::int8_t>(rng.bernoulli(0.5) ? 1 : 0)};
        ds.add_record(rec);
    }
    ds.finalize();

    const fs::path path = temp_dir() / "roundtrip.csv";
    save_dataset(ds, path.string());
    CsvSchema schema;
    schema.covariate_columns = {"x_1", "x_2"};
    schema.indicator_columns = {"y_1", "y_2"};
    const Dataset back = load_dataset(path.string(), DatasetRole::survey, schema);
    REQUIRE(back.n() == ds.n());
    for (std::size_t i = 0; i < ds.n(); ++i) REQUIRE(back.record(i) == ds.record(i));

    // a second cycle is byte-stable
    const fs::path path2 = temp_dir() / "roundtrip2.csv";
    save_dataset(back, path2.string());
    std::ifstream a(path), b(path2);
    std::string sa((std::istreambuf_iterator<char>(a)), std::istreambuf_iterator<char>());
    std::string sb((std::istreambuf_iterator<char>(b)), std::istreambuf_iterator<char>());
    CHECK(sa == sb);
}

TEST_CASE("domain index partitions the records", "[data]") {
    RngStream rng(77);
    Dataset ds = Dataset::create(DatasetRole::survey, {}, {"y_1"});
    for (int i = 0; i < 200; ++i) {
        UnitRecord rec;
        const int d = static_cast<int>(rng.below(13));
        rec.dept = "D" + std::to_string(d % 4);
        rec.muni = rec.dept + "M" + std::to_string(d);
        rec.indicators = {static_cast<std::int8_t>(rng.bernoulli(0.3) ? 1 : 0)};
        ds.add_record(rec);
    }
    ds.finalize();

    std::set<std::uint32_t> seen;
    for (const auto& [code, slot] : ds.domain_index()) {
        for (const auto row : ds.rows_in_domain(slot)) {
            REQUIRE(seen.insert(row).second); // disjoint
            REQUIRE(ds.domain(ds.domain_slot_of_row(row)).muni == code);
        }
    }
    CHECK(seen.size() == ds.n()); // covering
}

namespace {

/// One-record-per-municipality dataset over the given domain layout.
Dataset domains_dataset(int n_dept, int munis, int in_survey_depts, int take_munis,
                        bool census_role) {
    // munis spread round-robin over departments
    Dataset ds = Dataset::create(census_role ? DatasetRole::census : DatasetRole::survey, {"x_1"},
                                 {"y_1"});
    int taken = 0;
    for (int m = 0; m < munis; ++m) {
        const int dept = m % n_dept;
        if (take_munis > 0) {
            if (dept >= in_survey_depts) continue;
            if (taken >= take_munis) break;
            ++taken;
        }
        UnitRecord rec;
        rec.dept = "D" + std::to_string(dept + 1);
        rec.muni = rec.dept + "M" + std::to_string(m + 1);
        rec.covariates = {0.0};
        rec.indicators = {census_role ? kMissing : static_cast<std::int8_t>(0)};
        ds.add_record(rec);
    }
    ds.finalize();
    return ds;
}

} // namespace

TEST_CASE("alignment reports the out-of-sample set", "[data]") {
    const IndicatorSpec spec{1, {1.0}, 0.4, {0}, {"y_1"}};
    const Dataset census = domains_dataset(33, 1122, 33, 0, true);
    const Dataset survey = domains_dataset(33, 1122, 24, 438, false);
    REQUIRE(census.num_domains() == 1122);
    REQUIRE(survey.num_domains() == 438);
    REQUIRE(survey.department_index().size() == 24);

    const AlignmentReport report = check_alignment(survey, census, spec);
    CHECK(report.covariates_match);
    CHECK(report.out_of_sample_municipalities.size() == 684);
    CHECK(report.out_of_sample_departments.size() == 9);

    // deterministic
    const AlignmentReport again = check_alignment(survey, census, spec);
    CHECK(again.out_of_sample_municipalities == report.out_of_sample_municipalities);
}

TEST_CASE("identical domain sets mean no out-of-sample domains", "[data]") {
    const IndicatorSpec spec{1, {1.0}, 0.4, {0}, {"y_1"}};
    const Dataset census = domains_dataset(4, 20, 4, 0, true);
    const Dataset survey = domains_dataset(4, 20, 4, 0, false);
    const AlignmentReport report = check_alignment(survey, census, spec);
    CHECK(report.out_of_sample_municipalities.empty());
    CHECK(report.out_of_sample_departments.empty());
}

TEST_CASE("covariate order mismatch is an error", "[data]") {
    const IndicatorSpec spec{1, {1.0}, 0.4, {0}, {"y_1"}};
    Dataset census = Dataset::create(DatasetRole::census, {"x_1", "x_2"}, {"y_1"});
    Dataset survey = Dataset::create(DatasetRole::survey, {"x_2", "x_1"}, {"y_1"});
    UnitRecord rec;
    rec.dept = "D1";
    rec.muni = "D1M1";
    rec.covariates = {0.0, 0.0};
    rec.indicators = {kMissing};
    census.add_record(rec);
    census.finalize();
    rec.indicators = {0};
    survey.add_record(rec);
    survey.finalize();
    try {
        check_alignment(survey, census, spec);
        FAIL("expected CovariateMismatch");
    } catch (const Error& e) {
        CHECK(e.code() == errc::covariate_mismatch);
    }
}

TEST_CASE("census observing a spec-missing indicator is inconsistent", "[data]") {
    const IndicatorSpec spec{1, {1.0}, 0.4, {0}, {"y_1"}};
    Dataset census = Dataset::create(DatasetRole::census, {"x_1"}, {"y_1"});
    Dataset survey = Dataset::create(DatasetRole::survey, {"x_1"}, {"y_1"});
    UnitRecord rec;
    rec.dept = "D1";
    rec.muni = "D1M1";
    rec.covariates = {0.0};
    rec.indicators = {1}; // observed, but the spec marks it census-missing
    census.add_record(rec);
    census.finalize();
    survey.add_record(rec);
    survey.finalize();
    try {
        check_alignment(survey, census, spec);
        FAIL("expected SpecInconsistent");
    } catch (const Error& e) {
        CHECK(e.code() == errc::spec_inconsistent);
    }
}

TEST_CASE("survey with missing values fails alignment", "[data]") {
    const IndicatorSpec spec{2, {0.5, 0.5}, 0.4, {1}, {"y_1", "y_2"}};
    Dataset census = Dataset::create(DatasetRole::census, {}, {"y_1", "y_2"});
    Dataset survey = Dataset::create(DatasetRole::survey, {}, {"y_1", "y_2"});
    UnitRecord rec;
    rec.dept = "D1";
    rec.muni = "D1M1";
    rec.indicators = {1, kMissing};
    census.add_record(rec);
    census.finalize();
    survey.add_record(rec); // survey must observe everything
    survey.finalize();
    try {
        check_alignment(survey, census, spec);
        FAIL("expected SpecInconsistent");
    } catch (const Error& e) {
        CHECK(e.code() == errc::spec_inconsistent);
    }
}

TEST_CASE("masking hides exactly the census-missing indicators", "[data]") {
    const IndicatorSpec spec{2, {0.5, 0.5}, 0.4, {1}, {"y_1", "y_2"}};
    Dataset pop = Dataset::create(DatasetRole::census, {}, {"y_1", "y_2"});
    UnitRecord rec;
    rec.dept = "D1";
    rec.muni = "D1M1";
    rec.indicators = {1, 1};
    pop.add_record(rec);
    pop.finalize();
    const Dataset masked = mask_census_missing(pop, spec);
    CHECK(masked.indicator(0, 0) == 1);
    CHECK(masked.indicator(0, 1) == kMissing);
    CHECK(pop.indicator(0, 1) == 1); // original untouched
}
