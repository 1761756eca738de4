#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "mpsae/csv.hpp"
#include "mpsae/error.hpp"
#include "mpsae/indicator.hpp"

namespace mpsae {

/// Hierarchical domain code; a department code is the prefix segment shared
/// by its municipalities.
using DomainId = std::string;

enum class DatasetRole { survey, census };

struct UnitRecord {
    DomainId dept;
    DomainId muni;
    double weight = 1.0;
    std::vector<double> covariates;
    std::vector<std::int8_t> indicators; // kMissing marks an unobserved cell

    bool operator==(const UnitRecord&) const = default;
};

/// Column mapping from a CSV header onto the data model. Indicator entries
/// left empty name columns the file does not carry (census-missing); those
/// load as all-missing.
struct CsvSchema {
    std::string dept_column = "domain_dept";
    std::string muni_column = "domain_muni";
    std::string weight_column = "weight"; // empty string: no weight column, default 1
    std::vector<std::string> covariate_columns;
    std::vector<std::string> indicator_columns;
};

/// Immutable after finalize(); safe for concurrent reads.
class Dataset {
  public:
    struct Domain {
        DomainId muni;
        DomainId dept;
    };

    DatasetRole role = DatasetRole::survey;
    std::vector<std::string> covariate_names;
    std::vector<std::string> indicator_names;

    static Dataset create(DatasetRole role, std::vector<std::string> covariate_names,
                          std::vector<std::string> indicator_names) {
        Dataset ds;
        ds.role = role;
        ds.covariate_names = std::move(covariate_names);
        ds.indicator_names = std::move(indicator_names);
        return ds;
    }

    std::size_t n() const { return weights_.size(); }
    std::size_t p() const { return covariate_names.size(); }
    int k() const { return static_cast<int>(indicator_names.size()); }

    double covariate(std::size_t row, std::size_t j) const { return covariates_[row * p() + j]; }
    std::span<const double> covariate_row(std::size_t row) const {
        return {covariates_.data() + row * p(), p()};
    }
    std::int8_t indicator(std::size_t row, int kk) const { return indicators_[row * k() + kk]; }
    void set_indicator(std::size_t row, int kk, std::int8_t v) { indicators_[row * k() + kk] = v; }
    double weight(std::size_t row) const { return weights_[row]; }

    std::uint32_t domain_slot_of_row(std::size_t row) const { return domain_of_[row]; }
    const Domain& domain(std::uint32_t slot) const { return domains_[slot]; }
    std::size_t num_domains() const { return domains_.size(); }
    const std::vector<std::uint32_t>& rows_in_domain(std::uint32_t slot) const {
        return rows_by_domain_[slot];
    }
    /// Municipality code -> slot, ordered by code.
    const std::map<DomainId, std::uint32_t>& domain_index() const { return domain_slot_; }
    /// Department code -> municipality slots, ordered by code.
    const std::map<DomainId, std::vector<std::uint32_t>>& department_index() const {
        return dept_index_;
    }

    void add_record(const UnitRecord& rec) {
        if (rec.covariates.size() != p())
            throw Error(errc::dimension_mismatch, "covariate length differs from declared p");
        if (static_cast<int>(rec.indicators.size()) != k())
            throw Error(errc::dimension_mismatch, "indicator length differs from declared K");
        for (double x : rec.covariates)
            if (!std::isfinite(x))
                throw Error(errc::non_finite_covariate, "non-finite covariate value");
        for (std::int8_t v : rec.indicators)
            if (v != 0 && v != 1 && v != kMissing)
                throw Error(errc::non_binary_indicator, "indicator value outside {0,1,missing}");
        if (!(std::isfinite(rec.weight) && rec.weight > 0.0))
            throw Error(errc::invalid_weight, "design weight must be a positive real");
        const std::uint32_t slot = intern_domain(rec.muni, rec.dept);
        const std::size_t row = n();
        covariates_.insert(covariates_.end(), rec.covariates.begin(), rec.covariates.end());
        indicators_.insert(indicators_.end(), rec.indicators.begin(), rec.indicators.end());
        weights_.push_back(rec.weight);
        domain_of_.push_back(slot);
        rows_by_domain_[slot].push_back(static_cast<std::uint32_t>(row));
    }

    UnitRecord record(std::size_t row) const {
        const Domain& d = domains_[domain_of_[row]];
        UnitRecord rec;
        rec.dept = d.dept;
        rec.muni = d.muni;
        rec.weight = weights_[row];
        const auto cov = covariate_row(row);
        rec.covariates.assign(cov.begin(), cov.end());
        rec.indicators.assign(indicators_.begin() + row * k(), indicators_.begin() + (row + 1) * k());
        return rec;
    }

    std::span<const std::int8_t> indicator_row(std::size_t row) const {
        return {indicators_.data() + row * k(), static_cast<std::size_t>(k())};
    }

    void finalize() {
        if (n() == 0) throw Error(errc::empty_dataset, "dataset has no records");
        dept_index_.clear();
        for (const auto& [muni, slot] : domain_slot_) dept_index_[domains_[slot].dept].push_back(slot);
    }

  private:
    std::uint32_t intern_domain(const DomainId& muni, const DomainId& dept) {
        auto it = domain_slot_.find(muni);
        if (it != domain_slot_.end()) {
            if (domains_[it->second].dept != dept)
                throw Error(errc::inconsistent_hierarchy,
                            "municipality " + muni + " maps to two departments");
            return it->second;
        }
        const auto slot = static_cast<std::uint32_t>(domains_.size());
        domains_.push_back(Domain{muni, dept});
        domain_slot_.emplace(muni, slot);
        rows_by_domain_.emplace_back();
        return slot;
    }

    std::vector<double> covariates_; // n * p, row-major
    std::vector<std::int8_t> indicators_; // n * K, row-major
    std::vector<double> weights_;
    std::vector<std::uint32_t> domain_of_;
    std::vector<Domain> domains_;
    std::map<DomainId, std::uint32_t> domain_slot_;
    std::vector<std::vector<std::uint32_t>> rows_by_domain_;
    std::map<DomainId, std::vector<std::uint32_t>> dept_index_;
};

namespace detail {

inline bool is_missing_token(const std::string& s) { return s.empty() || s == "NA"; }

} // namespace detail

inline Dataset load_dataset(const std::string& path, DatasetRole role, const CsvSchema& schema) {
    const csv::Table table = csv::read_file(path);

    auto require_column = [&](const std::string& name) {
        const int idx = table.column(name);
        if (idx < 0) throw Error(errc::missing_column, "column '" + name + "' not in " + path);
        return idx;
    };

    const int dept_idx = require_column(schema.dept_column);
    const int muni_idx = require_column(schema.muni_column);
    const int weight_idx = schema.weight_column.empty() ? -1 : table.column(schema.weight_column);
    if (!schema.weight_column.empty() && weight_idx < 0 && role == DatasetRole::survey)
        throw Error(errc::missing_column, "column '" + schema.weight_column + "' not in " + path);

    std::vector<int> cov_idx;
    for (const auto& name : schema.covariate_columns) cov_idx.push_back(require_column(name));
    std::vector<int> ind_idx;
    for (const auto& name : schema.indicator_columns)
        ind_idx.push_back(name.empty() ? -1 : require_column(name));

    std::vector<std::string> indicator_names;
    for (std::size_t kk = 0; kk < schema.indicator_columns.size(); ++kk) {
        const auto& name = schema.indicator_columns[kk];
        indicator_names.push_back(name.empty() ? "y_" + std::to_string(kk + 1) : name);
    }

    Dataset ds = Dataset::create(role, schema.covariate_columns, indicator_names);
    if (table.rows.empty()) throw Error(errc::empty_dataset, path + " has a header but no records");

    UnitRecord rec;
    rec.covariates.resize(cov_idx.size());
    rec.indicators.resize(ind_idx.size());
    for (std::size_t r = 0; r < table.rows.size(); ++r) {
        const auto& row = table.rows[r];
        auto field = [&](int idx) -> const std::string& {
            static const std::string empty;
            return idx >= 0 && idx < static_cast<int>(row.size()) ? row[idx] : empty;
        };
        rec.dept = field(dept_idx);
        rec.muni = field(muni_idx);
        if (rec.muni.empty())
            throw Error(errc::inconsistent_hierarchy,
                        "empty municipality code at data row " + std::to_string(r + 1));
        const std::string& w = field(weight_idx);
        if (weight_idx < 0 || detail::is_missing_token(w)) {
            rec.weight = 1.0;
        } else if (!csv::parse_double(w, rec.weight) || !std::isfinite(rec.weight) ||
                   rec.weight <= 0.0) {
            throw Error(errc::invalid_weight,
                        "bad weight '" + w + "' at data row " + std::to_string(r + 1));
        }
        for (std::size_t j = 0; j < cov_idx.size(); ++j) {
            double v;
            const std::string& s = field(cov_idx[j]);
            if (!csv::parse_double(s, v) || !std::isfinite(v))
                throw Error(errc::non_finite_covariate, "bad covariate '" + s + "' in column " +
                                                            schema.covariate_columns[j] +
                                                            " at data row " + std::to_string(r + 1));
            rec.covariates[j] = v;
        }
        for (std::size_t kk = 0; kk < ind_idx.size(); ++kk) {
            if (ind_idx[kk] < 0) {
                rec.indicators[kk] = kMissing;
                continue;
            }
            const std::string& s = field(ind_idx[kk]);
            if (detail::is_missing_token(s)) rec.indicators[kk] = kMissing;
            else if (s == "0") rec.indicators[kk] = 0;
            else if (s == "1") rec.indicators[kk] = 1;
            else
                throw Error(errc::non_binary_indicator,
                            "indicator value '" + s + "' outside {0,1,NA} at data row " +
                                std::to_string(r + 1));
        }
        ds.add_record(rec);
    }
    ds.finalize();
    return ds;
}

/// Writes the canonical schema; indicators listed in drop_indicators are
/// omitted entirely (the census file convention for unobserved columns).
inline void save_dataset(const Dataset& ds, const std::string& path,
                         const std::set<int>& drop_indicators = {}) {
    csv::Writer out(path);
    std::vector<std::string> row;
    row.push_back("domain_dept");
    row.push_back("domain_muni");
    row.push_back("weight");
    for (const auto& name : ds.covariate_names) row.push_back(name);
    for (int kk = 0; kk < ds.k(); ++kk)
        if (!drop_indicators.count(kk)) row.push_back(ds.indicator_names[kk]);
    out.row(row);
    for (std::size_t i = 0; i < ds.n(); ++i) {
        row.clear();
        const auto& dom = ds.domain(ds.domain_slot_of_row(i));
        row.push_back(dom.dept);
        row.push_back(dom.muni);
        row.push_back(csv::format_double(ds.weight(i)));
        for (std::size_t j = 0; j < ds.p(); ++j)
            row.push_back(csv::format_double(ds.covariate(i, j)));
        for (int kk = 0; kk < ds.k(); ++kk) {
            if (drop_indicators.count(kk)) continue;
            const std::int8_t v = ds.indicator(i, kk);
            row.push_back(v == kMissing ? "NA" : (v ? "1" : "0"));
        }
        out.row(row);
    }
}

struct AlignmentReport {
    bool covariates_match = false;
    std::vector<DomainId> out_of_sample_municipalities; // census domains absent from survey
    std::vector<DomainId> out_of_sample_departments;
    std::size_t survey_municipalities = 0;
    std::size_t census_municipalities = 0;
    std::size_t survey_departments = 0;
    std::size_t census_departments = 0;
};

/// Validates that the survey and census files describe the same model space
/// and that indicator observability matches the spec.
inline AlignmentReport check_alignment(const Dataset& survey, const Dataset& census,
                                       const IndicatorSpec& spec) {
    if (survey.covariate_names != census.covariate_names)
        throw Error(errc::covariate_mismatch,
                    "survey and census covariate columns differ in name or order");
    if (survey.k() != spec.K || census.k() != spec.K)
        throw Error(errc::spec_inconsistent, "datasets must declare all K indicators");
    if (survey.indicator_names != census.indicator_names)
        throw Error(errc::spec_inconsistent, "survey and census indicator names differ");

    for (std::size_t i = 0; i < survey.n(); ++i)
        for (int kk = 0; kk < spec.K; ++kk)
            if (survey.indicator(i, kk) == kMissing)
                throw Error(errc::spec_inconsistent, "survey has missing values for indicator " +
                                                         survey.indicator_names[kk]);
    for (std::size_t i = 0; i < census.n(); ++i) {
        for (int kk = 0; kk < spec.K; ++kk) {
            const bool observed = census.indicator(i, kk) != kMissing;
            if (spec.is_census_missing(kk) && observed)
                throw Error(errc::spec_inconsistent, "census observes indicator " +
                                                         census.indicator_names[kk] +
                                                         " which the spec marks census-missing");
            if (!spec.is_census_missing(kk) && !observed)
                throw Error(errc::spec_inconsistent, "census is missing values for indicator " +
                                                         census.indicator_names[kk]);
        }
    }

    AlignmentReport report;
    report.covariates_match = true;
    report.survey_municipalities = survey.num_domains();
    report.census_municipalities = census.num_domains();
    report.survey_departments = survey.department_index().size();
    report.census_departments = census.department_index().size();
    for (const auto& [muni, slot] : census.domain_index())
        if (!survey.domain_index().count(muni)) report.out_of_sample_municipalities.push_back(muni);
    for (const auto& [dept, slots] : census.department_index())
        if (!survey.department_index().count(dept)) report.out_of_sample_departments.push_back(dept);
    return report;
}

/// Copy of a fully observed population with the spec's census-missing
/// indicators blanked out; what the estimator is allowed to see.
inline Dataset mask_census_missing(const Dataset& population, const IndicatorSpec& spec) {
    Dataset masked = population;
    masked.role = DatasetRole::census;
    for (std::size_t i = 0; i < masked.n(); ++i)
        for (int kk : spec.census_missing) masked.set_indicator(i, kk, kMissing);
    return masked;
}

} // namespace mpsae
