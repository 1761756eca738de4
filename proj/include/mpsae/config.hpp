#pragma once

#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "mpsae/data.hpp"
#include "mpsae/error.hpp"
#include "mpsae/glmm.hpp"
#include "mpsae/indicator.hpp"
#include "mpsae/simulation.hpp"
#include "mpsae/uncertainty.hpp"

namespace mpsae {

inline nlohmann::json load_json_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw Error(errc::invalid_config, "cannot open config file " + path);
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw Error(errc::invalid_config, path + ": " + e.what());
    }
    return j;
}

inline FitConfig fit_config_from_json(const nlohmann::json& j) {
    FitConfig c;
    c.inner_tol = j.value("inner_tol", c.inner_tol);
    c.inner_max_iter = j.value("inner_max_iter", c.inner_max_iter);
    c.outer_tol = j.value("outer_tol", c.outer_tol);
    c.outer_max_iter = j.value("outer_max_iter", c.outer_max_iter);
    c.sigma_init = j.value("sigma_init", c.sigma_init);
    c.standardize = j.value("standardize", c.standardize);
    c.validate();
    return c;
}

/// Everything a reproducible run needs; flags may override fields after load.
struct RunConfig {
    std::string survey_path;
    std::string census_path;
    std::string out_dir = ".";
    IndicatorSpec spec = default_spec();
    FitConfig fit;
    long L = 100;
    BootstrapConfig bootstrap;
    std::optional<std::uint64_t> seed;
    unsigned threads = 0;
    // schema overrides; empty lists mean "derive from the header and spec"
    std::string dept_column = "domain_dept";
    std::string muni_column = "domain_muni";
    std::string weight_column = "weight";
    std::vector<std::string> covariate_columns;
    std::vector<std::string> indicator_columns;

    std::uint64_t require_seed() const {
        if (!seed) throw Error(errc::invalid_config, "seed is required (no wall-clock seeding)");
        return *seed;
    }
};

inline RunConfig run_config_from_json(const nlohmann::json& j) {
    RunConfig c;
    c.survey_path = j.value("survey", "");
    c.census_path = j.value("census", "");
    c.out_dir = j.value("out", ".");
    if (j.contains("spec")) c.spec = spec_from_json(j.at("spec"));
    if (j.contains("fit")) c.fit = fit_config_from_json(j.at("fit"));
    c.L = j.value("L", c.L);
    if (j.contains("bootstrap")) {
        const auto& b = j.at("bootstrap");
        c.bootstrap.B = b.value("B", c.bootstrap.B);
        c.bootstrap.L_inner = b.value("L_inner", c.L);
        c.bootstrap.refit = b.value("refit", c.bootstrap.refit);
    } else {
        c.bootstrap.L_inner = c.L;
    }
    if (j.contains("seed")) c.seed = j.at("seed").get<std::uint64_t>();
    c.threads = j.value("threads", 0u);
    if (j.contains("schema")) {
        const auto& s = j.at("schema");
        c.dept_column = s.value("dept", c.dept_column);
        c.muni_column = s.value("muni", c.muni_column);
        c.weight_column = s.value("weight", c.weight_column);
        if (s.contains("covariates"))
            c.covariate_columns = s.at("covariates").get<std::vector<std::string>>();
        if (s.contains("indicators"))
            c.indicator_columns = s.at("indicators").get<std::vector<std::string>>();
    }
    return c;
}

/// Concrete column mapping for one file. Unlisted covariates default to every
/// header column that is not a domain, weight, or indicator column; indicator
/// columns default to the spec names, with census-missing ones mapped to
/// "absent" for census files.
inline CsvSchema resolve_schema(const std::string& path, const RunConfig& config,
                                DatasetRole role) {
    CsvSchema schema;
    schema.dept_column = config.dept_column;
    schema.muni_column = config.muni_column;
    schema.weight_column = config.weight_column;

    std::vector<std::string> indicator_cols = config.indicator_columns;
    if (indicator_cols.empty()) indicator_cols = config.spec.names;
    if (static_cast<int>(indicator_cols.size()) != config.spec.K)
        throw Error(errc::invalid_config, "schema indicator list must have K entries");

    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error(errc::invalid_config, "cannot open data file " + path);
    std::string header_line;
    std::getline(in, header_line);
    if (!header_line.empty() && header_line.back() == '\r') header_line.pop_back();
    const auto header = csv::split_line(header_line);

    auto in_header = [&](const std::string& name) {
        return std::find(header.begin(), header.end(), name) != header.end();
    };

    schema.indicator_columns.resize(indicator_cols.size());
    for (std::size_t k = 0; k < indicator_cols.size(); ++k) {
        const bool absent =
            role == DatasetRole::census && config.spec.is_census_missing(static_cast<int>(k));
        schema.indicator_columns[k] = absent ? "" : indicator_cols[k];
    }

    if (!config.covariate_columns.empty()) {
        schema.covariate_columns = config.covariate_columns;
    } else {
        for (const auto& col : header) {
            if (col == schema.dept_column || col == schema.muni_column ||
                col == schema.weight_column)
                continue;
            if (std::find(indicator_cols.begin(), indicator_cols.end(), col) !=
                indicator_cols.end())
                continue;
            schema.covariate_columns.push_back(col);
        }
    }
    if (!in_header(schema.weight_column)) schema.weight_column.clear();
    return schema;
}

inline CovariateModel covariate_model_from_json(const nlohmann::json& j) {
    CovariateModel m;
    const std::string kind = j.value("kind", "normal");
    if (kind == "normal") {
        m.kind = CovariateModel::Kind::normal;
        m.a = j.value("mean", 0.0);
        m.b = j.value("sd", 1.0);
    } else if (kind == "uniform") {
        m.kind = CovariateModel::Kind::uniform;
        m.a = j.value("low", 0.0);
        m.b = j.value("high", 1.0);
    } else if (kind == "bernoulli") {
        m.kind = CovariateModel::Kind::bernoulli;
        m.a = j.value("prob", 0.5);
    } else {
        throw Error(errc::invalid_config, "unknown covariate kind '" + kind + "'");
    }
    return m;
}

/// Population config; per-indicator models take 1-based keys, with optional
/// default_beta / default_sigma_u fallbacks for unlisted indicators.
inline PopulationConfig population_config_from_json(const nlohmann::json& j) {
    PopulationConfig c;
    c.D = j.value("D", c.D);
    c.departments = j.value("departments", 0);
    if (j.contains("domain_sizes")) c.domain_sizes = j.at("domain_sizes").get<std::vector<int>>();
    c.size_min = j.value("size_min", c.size_min);
    c.size_max = j.value("size_max", c.size_max);
    c.p = j.value("p", c.p);
    if (j.contains("covariates"))
        for (const auto& cm : j.at("covariates")) c.covariates.push_back(covariate_model_from_json(cm));
    if (j.contains("spec")) c.spec = spec_from_json(j.at("spec"));
    else c.spec = default_spec();
    if (j.contains("seed")) c.seed = j.at("seed").get<std::uint64_t>();

    std::vector<double> default_beta;
    if (j.contains("default_beta")) default_beta = j.at("default_beta").get<std::vector<double>>();
    const double default_sigma = j.value("default_sigma_u", 0.5);
    if (j.contains("true_beta"))
        for (const auto& [key, value] : j.at("true_beta").items())
            c.true_beta[std::stoi(key) - 1] = value.get<std::vector<double>>();
    if (j.contains("true_sigma_u"))
        for (const auto& [key, value] : j.at("true_sigma_u").items())
            c.true_sigma_u[std::stoi(key) - 1] = value.get<double>();
    for (int k = 0; k < c.spec.K; ++k) {
        if (!c.true_beta.count(k)) {
            if (default_beta.empty())
                throw Error(errc::invalid_config, "no coefficients for indicator " +
                                                      std::to_string(k + 1) +
                                                      " and no default_beta");
            c.true_beta[k] = default_beta;
        }
        if (!c.true_sigma_u.count(k)) c.true_sigma_u[k] = default_sigma;
    }
    c.validate();
    return c;
}

inline SamplingDesign design_from_json(const nlohmann::json& j) {
    const std::string type = j.value("type", "srs");
    if (type == "srs") {
        SrsDesign d;
        d.n = j.at("n").get<std::size_t>();
        return d;
    }
    if (type == "stratified") {
        StratifiedTwoStageDesign d;
        d.munis_per_stratum = j.at("munis_per_stratum").get<int>();
        d.units_per_muni = j.at("units_per_muni").get<int>();
        return d;
    }
    throw Error(errc::invalid_config, "unknown design type '" + type + "'");
}

struct Scenario {
    std::string name;
    SamplingDesign design;
};

struct SimulateConfig {
    PopulationConfig population;
    std::vector<Scenario> scenarios;
    int T = 100;
    long L = 100;
    FitConfig fit;
    std::optional<std::uint64_t> seed;
    unsigned threads = 0;
    std::string out_dir = ".";
};

inline SimulateConfig simulate_config_from_json(const nlohmann::json& j) {
    SimulateConfig c;
    c.population = population_config_from_json(j.at("population"));
    if (!j.contains("scenarios") || j.at("scenarios").empty())
        throw Error(errc::invalid_config, "simulate config needs at least one scenario");
    for (const auto& s : j.at("scenarios")) {
        Scenario sc;
        sc.name = s.value("name", "scenario" + std::to_string(c.scenarios.size() + 1));
        sc.design = design_from_json(s.at("design"));
        c.scenarios.push_back(std::move(sc));
    }
    c.T = j.value("T", c.T);
    c.L = j.value("L", c.L);
    if (j.contains("fit")) c.fit = fit_config_from_json(j.at("fit"));
    if (j.contains("seed")) c.seed = j.at("seed").get<std::uint64_t>();
    c.threads = j.value("threads", 0u);
    c.out_dir = j.value("out", ".");
    return c;
}

struct GenerateConfig {
    PopulationConfig population;
    SamplingDesign design;
    std::optional<std::uint64_t> seed;
    std::string out_dir = ".";
};

inline GenerateConfig generate_config_from_json(const nlohmann::json& j) {
    GenerateConfig c;
    c.population = population_config_from_json(j.at("population"));
    if (j.contains("design")) c.design = design_from_json(j.at("design"));
    else c.design = SrsDesign{1000};
    if (j.contains("seed")) c.seed = j.at("seed").get<std::uint64_t>();
    c.out_dir = j.value("out", ".");
    return c;
}

} // namespace mpsae
