#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "mpsae/error.hpp"

namespace mpsae {

constexpr std::int8_t kMissing = -1;

/// Definition of the composite index: K dichotomous deprivation indicators,
/// their weights, the poverty threshold z, and which indicators the census
/// does not observe.
struct IndicatorSpec {
    int K = 0;
    std::vector<double> weights;
    double z = 0.0;
    std::vector<int> census_missing; // 0-based, sorted
    std::vector<std::string> names;

    void validate() const {
        if (K <= 0) throw Error(errc::invalid_config, "indicator spec needs K >= 1");
        if (static_cast<int>(weights.size()) != K)
            throw Error(errc::invalid_config, "weights length must equal K");
        double sum = 0.0;
        for (double w : weights) {
            if (!(w >= 0.0)) throw Error(errc::invalid_config, "weights must be non-negative");
            sum += w;
        }
        if (std::abs(sum - 1.0) > 1e-12)
            throw Error(errc::invalid_config, "weights must sum to 1 within 1e-12");
        if (!(z > 0.0 && z < 1.0)) throw Error(errc::invalid_config, "threshold z must be in (0,1)");
        if (static_cast<int>(names.size()) != K)
            throw Error(errc::invalid_config, "names length must equal K");
        int prev = -1;
        for (int m : census_missing) {
            if (m < 0 || m >= K)
                throw Error(errc::invalid_config, "census_missing index out of range");
            if (m <= prev)
                throw Error(errc::invalid_config, "census_missing must be strictly increasing");
            prev = m;
        }
    }

    bool is_census_missing(int k) const {
        return std::binary_search(census_missing.begin(), census_missing.end(), k);
    }
};

/// Default configuration: eight indicators, six weighted 1/10 and two
/// weighted 2/10, threshold 0.4, the last two unobserved in the census.
inline IndicatorSpec default_spec() {
    IndicatorSpec spec;
    spec.K = 8;
    spec.weights = {0.1, 0.1, 0.1, 0.1, 0.1, 0.1, 0.2, 0.2};
    spec.z = 0.4;
    spec.census_missing = {6, 7};
    spec.names = {"housing",     "overcrowding", "water",     "sanitation",
                  "internet",    "electricity",  "education", "employment"};
    spec.validate();
    return spec;
}

/// Config uses 1-based indicator positions in census_missing.
inline IndicatorSpec spec_from_json(const nlohmann::json& j) {
    IndicatorSpec spec;
    spec.weights = j.at("weights").get<std::vector<double>>();
    spec.K = static_cast<int>(spec.weights.size());
    spec.z = j.at("z").get<double>();
    for (const auto& m : j.at("census_missing")) {
        const int one_based = m.get<int>();
        if (one_based < 1 || one_based > spec.K)
            throw Error(errc::invalid_config, "census_missing entries are 1-based indicator positions");
        spec.census_missing.push_back(one_based - 1);
    }
    std::sort(spec.census_missing.begin(), spec.census_missing.end());
    if (j.contains("names")) {
        spec.names = j.at("names").get<std::vector<std::string>>();
    } else {
        for (int k = 1; k <= spec.K; ++k) spec.names.push_back("y_" + std::to_string(k));
    }
    spec.validate();
    return spec;
}

inline nlohmann::json spec_to_json(const IndicatorSpec& spec) {
    nlohmann::json j;
    j["weights"] = spec.weights;
    j["z"] = spec.z;
    std::vector<int> one_based;
    for (int m : spec.census_missing) one_based.push_back(m + 1);
    j["census_missing"] = one_based;
    j["names"] = spec.names;
    return j;
}

/// Weighted deprivation score q = sum_k w_k y_k, summed in indicator order.
inline double deprivation_score(std::span<const std::int8_t> y, const IndicatorSpec& spec) {
    if (static_cast<int>(y.size()) != spec.K)
        throw Error(errc::dimension_mismatch, "indicator vector length must equal K");
    double q = 0.0;
    for (int k = 0; k < spec.K; ++k) {
        if (y[k] == kMissing)
            throw Error(errc::missing_indicator_value,
                        "indicator " + std::to_string(k + 1) + " is missing");
        q += spec.weights[k] * y[k];
    }
    return q;
}

/// Poverty classification: strictly greater than the threshold.
inline int is_poor(double q, double z) { return q > z ? 1 : 0; }

/// Headcount ratio over one domain: rows are complete K-vectors of 0/1.
inline double headcount(const std::vector<std::vector<std::int8_t>>& rows,
                        const IndicatorSpec& spec) {
    if (rows.empty()) throw Error(errc::empty_domain, "headcount over an empty domain");
    long poor = 0;
    for (const auto& row : rows)
        poor += is_poor(deprivation_score(row, spec), spec.z);
    return static_cast<double>(poor) / static_cast<double>(rows.size());
}

} // namespace mpsae
