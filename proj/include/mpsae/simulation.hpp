#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <tuple>
#include <variant>
#include <vector>

#include "mpsae/csv.hpp"
#include "mpsae/data.hpp"
#include "mpsae/error.hpp"
#include "mpsae/estimator.hpp"
#include "mpsae/glmm.hpp"
#include "mpsae/indicator.hpp"
#include "mpsae/parallel.hpp"
#include "mpsae/rng.hpp"

namespace mpsae {

struct CovariateModel {
    enum class Kind { normal, uniform, bernoulli };
    Kind kind = Kind::normal;
    double a = 0.0; // mean / lower / probability
    double b = 1.0; // sd / upper / unused
};

struct PopulationConfig {
    int D = 100;         // municipalities
    int departments = 0; // 0: max(2, D/10)
    std::vector<int> domain_sizes; // explicit per-municipality sizes, or empty
    int size_min = 200;
    int size_max = 5000;
    int p = 1;
    std::vector<CovariateModel> covariates; // per covariate; defaults to standard normal
    std::map<int, std::vector<double>> true_beta; // indicator -> p+1 coefficients
    std::map<int, double> true_sigma_u;           // indicator -> sigma
    IndicatorSpec spec;
    std::uint64_t seed = 0;

    int dept_count() const { return departments > 0 ? departments : std::max(2, D / 10); }

    void validate() const {
        if (D < 2) throw Error(errc::invalid_config, "population needs D >= 2 municipalities");
        if (!domain_sizes.empty()) {
            if (static_cast<int>(domain_sizes.size()) != D)
                throw Error(errc::invalid_config, "domain_sizes length must equal D");
            for (int s : domain_sizes)
                if (s < 1) throw Error(errc::invalid_config, "domain sizes must be >= 1");
        } else if (size_min < 1 || size_max < size_min) {
            throw Error(errc::invalid_config, "invalid domain size range");
        }
        if (p < 0) throw Error(errc::invalid_config, "p must be non-negative");
        if (!covariates.empty() && static_cast<int>(covariates.size()) != p)
            throw Error(errc::invalid_config, "covariate models must match p");
        spec.validate();
        for (int k = 0; k < spec.K; ++k) {
            const auto bit = true_beta.find(k);
            if (bit == true_beta.end())
                throw Error(errc::invalid_config,
                            "true_beta missing for indicator " + std::to_string(k + 1));
            if (static_cast<int>(bit->second.size()) != p + 1)
                throw Error(errc::invalid_config,
                            "true_beta for indicator " + std::to_string(k + 1) +
                                " must have length p+1");
            const auto sit = true_sigma_u.find(k);
            if (sit == true_sigma_u.end() || !(sit->second >= 0.0))
                throw Error(errc::invalid_config,
                            "true_sigma_u missing or negative for indicator " +
                                std::to_string(k + 1));
        }
    }
};

namespace sim_detail {

inline std::string pad_code(const std::string& prefix, int value, int width) {
    std::string digits = std::to_string(value);
    if (static_cast<int>(digits.size()) < width)
        digits.insert(0, width - digits.size(), '0');
    return prefix + digits;
}

inline double draw_covariate(const CovariateModel& model, RngStream& rng) {
    switch (model.kind) {
    case CovariateModel::Kind::normal: return rng.normal(model.a, model.b);
    case CovariateModel::Kind::uniform: return model.a + (model.b - model.a) * rng.uniform01();
    case CovariateModel::Kind::bernoulli: return rng.bernoulli(model.a) ? 1.0 : 0.0;
    }
    return 0.0;
}

} // namespace sim_detail

/// Synthetic fixed population drawn from the unit-level logit model; every
/// indicator fully observed. Municipality codes carry their department code
/// as a prefix.
inline Dataset generate_population(const PopulationConfig& config) {
    config.validate();
    const RngStream root(config.seed);
    const int n_dept = config.dept_count();

    std::vector<int> sizes = config.domain_sizes;
    if (sizes.empty()) {
        RngStream s = root.child("pop.sizes");
        sizes.resize(config.D);
        for (int d = 0; d < config.D; ++d)
            sizes[d] = config.size_min +
                       static_cast<int>(s.below(static_cast<std::uint64_t>(config.size_max -
                                                                           config.size_min + 1)));
    }

    std::vector<CovariateModel> cov_models = config.covariates;
    if (cov_models.empty()) cov_models.resize(config.p); // standard normals

    std::vector<std::string> covariate_names;
    for (int j = 1; j <= config.p; ++j) covariate_names.push_back("x_" + std::to_string(j));
    Dataset pop = Dataset::create(DatasetRole::census, covariate_names, config.spec.names);

    // per-indicator random intercepts, one stream per indicator
    std::vector<std::vector<double>> u(config.spec.K, std::vector<double>(config.D));
    for (int k = 0; k < config.spec.K; ++k) {
        RngStream s = root.child("pop.u", static_cast<std::uint64_t>(k));
        const double sigma = config.true_sigma_u.at(k);
        for (int d = 0; d < config.D; ++d) u[k][d] = s.normal(0.0, sigma);
    }

    const int dept_width = n_dept > 99 ? 3 : 2;
    const int muni_width = config.D > 999 ? 4 : 3;
    UnitRecord rec;
    rec.covariates.resize(config.p);
    rec.indicators.resize(config.spec.K);
    rec.weight = 1.0;
    for (int d = 0; d < config.D; ++d) {
        const int dept = d % n_dept;
        rec.dept = sim_detail::pad_code("D", dept + 1, dept_width);
        rec.muni = rec.dept + sim_detail::pad_code("M", d + 1, muni_width);
        RngStream sx = root.child("pop.x", static_cast<std::uint64_t>(d));
        RngStream sy = root.child("pop.y", static_cast<std::uint64_t>(d));
        for (int i = 0; i < sizes[d]; ++i) {
            for (int j = 0; j < config.p; ++j)
                rec.covariates[j] = sim_detail::draw_covariate(cov_models[j], sx);
            for (int k = 0; k < config.spec.K; ++k) {
                const auto& beta = config.true_beta.at(k);
                double eta = beta[0];
                for (int j = 0; j < config.p; ++j) eta += beta[j + 1] * rec.covariates[j];
                eta += u[k][d];
                rec.indicators[k] = sy.bernoulli(detail::expit(eta)) ? 1 : 0;
            }
            pop.add_record(rec);
        }
    }
    pop.finalize();
    return pop;
}

/// True headcount of a fully observed dataset per municipality and
/// department.
struct TrueHeadcounts {
    std::map<DomainId, double> municipality;
    std::map<DomainId, double> department;
};

inline TrueHeadcounts true_headcounts(const Dataset& population, const IndicatorSpec& spec) {
    TrueHeadcounts out;
    std::map<DomainId, std::pair<long, long>> dept_counts; // poor, total
    for (const auto& [code, slot] : population.domain_index()) {
        const auto& rows = population.rows_in_domain(slot);
        long poor = 0;
        for (const auto row : rows)
            poor += is_poor(deprivation_score(population.indicator_row(row), spec), spec.z);
        out.municipality[code] = static_cast<double>(poor) / static_cast<double>(rows.size());
        auto& dc = dept_counts[population.domain(slot).dept];
        dc.first += poor;
        dc.second += static_cast<long>(rows.size());
    }
    for (const auto& [dept, counts] : dept_counts)
        out.department[dept] = static_cast<double>(counts.first) / counts.second;
    return out;
}

struct SrsDesign {
    std::size_t n = 0;
};

/// Strata are departments; stage one samples municipalities within each
/// stratum, stage two samples units within each selected municipality.
struct StratifiedTwoStageDesign {
    int munis_per_stratum = 1;
    int units_per_muni = 1;
};

using SamplingDesign = std::variant<SrsDesign, StratifiedTwoStageDesign>;

inline std::string design_name(const SamplingDesign& design) {
    if (const auto* srs = std::get_if<SrsDesign>(&design))
        return "srs(" + std::to_string(srs->n) + ")";
    const auto& st = std::get<StratifiedTwoStageDesign>(design);
    return "stratified(" + std::to_string(st.munis_per_stratum) + "," +
           std::to_string(st.units_per_muni) + ")";
}

namespace sim_detail {

inline std::vector<std::uint32_t> sample_without_replacement(const std::vector<std::uint32_t>& pool,
                                                             std::size_t take, RngStream& rng) {
    std::vector<std::uint32_t> work(pool);
    for (std::size_t i = 0; i < take; ++i) {
        const std::size_t j = i + static_cast<std::size_t>(rng.below(work.size() - i));
        std::swap(work[i], work[j]);
    }
    work.resize(take);
    std::sort(work.begin(), work.end());
    return work;
}

} // namespace sim_detail

/// Draw a survey sample from a fully observed population; design weights are
/// inverse inclusion probabilities.
inline Dataset draw_sample(const Dataset& population, const SamplingDesign& design,
                           std::uint64_t seed) {
    RngStream rng = RngStream(seed).child("sample");
    std::vector<std::pair<std::uint32_t, double>> picks; // row, weight

    if (const auto* srs = std::get_if<SrsDesign>(&design)) {
        const std::size_t N = population.n();
        if (srs->n > N) throw Error(errc::sample_too_large, "SRS size exceeds the population");
        if (srs->n == 0) throw Error(errc::invalid_config, "SRS size must be positive");
        std::vector<std::uint32_t> all(N);
        for (std::size_t i = 0; i < N; ++i) all[i] = static_cast<std::uint32_t>(i);
        const auto rows = sim_detail::sample_without_replacement(all, srs->n, rng);
        const double w = static_cast<double>(N) / static_cast<double>(srs->n);
        for (const auto row : rows) picks.emplace_back(row, w);
    } else {
        const auto& st = std::get<StratifiedTwoStageDesign>(design);
        if (st.munis_per_stratum < 1 || st.units_per_muni < 1)
            throw Error(errc::invalid_config, "stratified design stages must be >= 1");
        for (const auto& [dept, slots] : population.department_index()) {
            const std::size_t m_take =
                std::min<std::size_t>(st.munis_per_stratum, slots.size());
            const double stage1 = static_cast<double>(slots.size()) / m_take;
            const auto chosen = sim_detail::sample_without_replacement(slots, m_take, rng);
            for (const auto slot : chosen) {
                const auto& rows = population.rows_in_domain(slot);
                const std::size_t u_take = std::min<std::size_t>(st.units_per_muni, rows.size());
                const double stage2 = static_cast<double>(rows.size()) / u_take;
                const auto unit_rows = sim_detail::sample_without_replacement(rows, u_take, rng);
                for (const auto row : unit_rows) picks.emplace_back(row, stage1 * stage2);
            }
        }
        std::sort(picks.begin(), picks.end());
    }

    Dataset sample =
        Dataset::create(DatasetRole::survey, population.covariate_names, population.indicator_names);
    for (const auto& [row, w] : picks) {
        UnitRecord rec = population.record(row);
        rec.weight = w;
        sample.add_record(rec);
    }
    sample.finalize();
    return sample;
}

/// Direct (Hajek) headcount per sampled municipality.
inline std::map<DomainId, double> direct_headcount(const Dataset& sample, const IndicatorSpec& spec,
                                                   bool weighted = true) {
    std::map<DomainId, double> out;
    for (const auto& [code, slot] : sample.domain_index()) {
        double num = 0.0, den = 0.0;
        for (const auto row : sample.rows_in_domain(slot)) {
            const double w = weighted ? sample.weight(row) : 1.0;
            num += w * is_poor(deprivation_score(sample.indicator_row(row), spec), spec.z);
            den += w;
        }
        out[code] = num / den;
    }
    return out;
}

struct SimulationConfig {
    int T = 100;
    long L = 100;
    FitConfig fit;
    std::uint64_t seed = 0;
    unsigned threads = 1;
    bool weighted_direct = true;
};

struct DomainPerformance {
    DomainId domain;
    double bias = 0.0;
    double rmse = 0.0;
    std::optional<double> cv_percent; // vs the true headcount; absent when it is zero
};

/// Bias and RMSE of a set of replicate estimates against a fixed truth.
inline std::pair<double, double> bias_rmse(std::span<const double> estimates, double truth) {
    double sum = 0.0, sumsq = 0.0;
    for (const double e : estimates) {
        const double gap = e - truth;
        sum += gap;
        sumsq += gap * gap;
    }
    const double n = static_cast<double>(estimates.size());
    return {sum / n, std::sqrt(sumsq / n)};
}

struct SummaryStats {
    double min = 0.0, q1 = 0.0, median = 0.0, mean = 0.0, q3 = 0.0, max = 0.0;
};

inline SummaryStats summarize(std::vector<double> values) {
    SummaryStats s;
    if (values.empty()) return s;
    std::sort(values.begin(), values.end());
    auto quantile = [&](double q) {
        const double pos = q * (values.size() - 1);
        const std::size_t lo = static_cast<std::size_t>(pos);
        const std::size_t hi = std::min(lo + 1, values.size() - 1);
        const double frac = pos - lo;
        return values[lo] * (1.0 - frac) + values[hi] * frac;
    };
    s.min = values.front();
    s.q1 = quantile(0.25);
    s.median = quantile(0.5);
    s.q3 = quantile(0.75);
    s.max = values.back();
    double sum = 0.0;
    for (double v : values) sum += v;
    s.mean = sum / values.size();
    return s;
}

struct SimulationReport {
    std::string design;
    int T = 0;
    int failures = 0;
    std::vector<DomainPerformance> per_domain; // municipality level, code order
    double direct_model_pearson = 0.0;         // pooled over replicates, in-sample domains
    SummaryStats bias_summary;
    SummaryStats abs_bias_summary;
    SummaryStats rmse_summary;
    SummaryStats cv_summary;
};

/// Design-based evaluation: T repeated samples from a fixed population, a
/// full fit/estimate per sample, bias and RMSE against the population truth.
inline SimulationReport run_design_simulation(const Dataset& population,
                                              const SamplingDesign& design,
                                              const IndicatorSpec& spec,
                                              const SimulationConfig& config) {
    spec.validate();
    config.fit.validate();
    if (config.T < 2) throw Error(errc::invalid_config, "design simulation needs T >= 2");

    const TrueHeadcounts truth = true_headcounts(population, spec);
    const Dataset census = mask_census_missing(population, spec);
    const std::size_t n_muni = census.num_domains();
    const RngStream root(config.seed);

    // per-replicate estimates aligned to municipality code order; NaN = failed
    std::vector<std::vector<double>> model_est(config.T);
    std::vector<std::map<DomainId, double>> direct_est(config.T);
    std::vector<char> failed(config.T, 0);

    std::vector<DomainId> muni_codes;
    for (const auto& [code, slot] : census.domain_index()) muni_codes.push_back(code);

    parallel_for(static_cast<std::size_t>(config.T), config.threads, [&](std::size_t t) {
        try {
            const std::uint64_t sample_seed = root.child("sim.sample", t).next_u64();
            const Dataset sample = draw_sample(population, design, sample_seed);
            std::map<int, GlmmFit> fits;
            for (int k : spec.census_missing) fits[k] = fit(sample, k, config.fit);
            const std::uint64_t est_seed = root.child("sim.estimate", t).next_u64();
            const auto estimates = estimate_headcount(census, fits, spec, config.L, est_seed, 1);
            auto& row = model_est[t];
            row.resize(n_muni);
            std::size_t pos = 0;
            for (const auto& e : estimates) {
                if (e.level != "municipality") continue;
                row[pos++] = e.h_hat;
            }
            direct_est[t] = direct_headcount(sample, spec, config.weighted_direct);
        } catch (const Error&) {
            failed[t] = 1;
        }
    });

    SimulationReport report;
    report.design = design_name(design);
    report.T = config.T;
    for (const char f : failed) report.failures += f;
    if (report.failures * 10 > config.T)
        throw Error(errc::excess_failures, std::to_string(report.failures) + " of " +
                                               std::to_string(config.T) +
                                               " replicates failed (more than 10%)");

    std::vector<double> biases, abs_biases, rmses, cvs;
    std::vector<double> replicate_values;
    for (std::size_t i = 0; i < n_muni; ++i) {
        const double h_true = truth.municipality.at(muni_codes[i]);
        replicate_values.clear();
        for (int t = 0; t < config.T; ++t) {
            if (failed[t]) continue;
            replicate_values.push_back(model_est[t][i]);
        }
        DomainPerformance perf;
        perf.domain = muni_codes[i];
        std::tie(perf.bias, perf.rmse) = bias_rmse(replicate_values, h_true);
        if (h_true > 0.0) perf.cv_percent = 100.0 * perf.rmse / h_true;
        biases.push_back(perf.bias);
        abs_biases.push_back(std::abs(perf.bias));
        rmses.push_back(perf.rmse);
        if (perf.cv_percent) cvs.push_back(*perf.cv_percent);
        report.per_domain.push_back(std::move(perf));
    }
    report.bias_summary = summarize(biases);
    report.abs_bias_summary = summarize(abs_biases);
    report.rmse_summary = summarize(rmses);
    report.cv_summary = summarize(cvs);

    // pooled direct-vs-model correlation over in-sample municipalities
    std::vector<double> xs, ys;
    for (int t = 0; t < config.T; ++t) {
        if (failed[t]) continue;
        for (std::size_t i = 0; i < n_muni; ++i) {
            const auto it = direct_est[t].find(muni_codes[i]);
            if (it == direct_est[t].end()) continue;
            xs.push_back(it->second);
            ys.push_back(model_est[t][i]);
        }
    }
    if (xs.size() >= 2) {
        double mx = 0.0, my = 0.0;
        for (std::size_t i = 0; i < xs.size(); ++i) {
            mx += xs[i];
            my += ys[i];
        }
        mx /= xs.size();
        my /= ys.size();
        double sxy = 0.0, sxx = 0.0, syy = 0.0;
        for (std::size_t i = 0; i < xs.size(); ++i) {
            sxy += (xs[i] - mx) * (ys[i] - my);
            sxx += (xs[i] - mx) * (xs[i] - mx);
            syy += (ys[i] - my) * (ys[i] - my);
        }
        if (sxx > 0.0 && syy > 0.0) report.direct_model_pearson = sxy / std::sqrt(sxx * syy);
    }
    return report;
}

inline void write_simulation_domains_csv(const SimulationReport& report, const std::string& path) {
    csv::Writer out(path);
    out.row({"domain", "bias", "rmse", "cv"});
    for (const auto& d : report.per_domain) {
        out.row({d.domain, csv::format_double(d.bias), csv::format_double(d.rmse),
                 d.cv_percent ? csv::format_double(*d.cv_percent) : ""});
    }
}

inline void append_summary_rows(csv::Writer& out, const std::string& scenario,
                                const SimulationReport& report) {
    auto emit = [&](const std::string& stat, const SummaryStats& s) {
        out.row({scenario, stat, csv::format_double(s.min), csv::format_double(s.q1),
                 csv::format_double(s.median), csv::format_double(s.mean),
                 csv::format_double(s.q3), csv::format_double(s.max)});
    };
    emit("bias", report.bias_summary);
    emit("abs_bias", report.abs_bias_summary);
    emit("rmse", report.rmse_summary);
    emit("cv", report.cv_summary);
}

} // namespace mpsae
