#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "mpsae/data.hpp"
#include "mpsae/error.hpp"
#include "mpsae/estimator.hpp"
#include "mpsae/glmm.hpp"
#include "mpsae/indicator.hpp"
#include "mpsae/parallel.hpp"
#include "mpsae/rng.hpp"

namespace mpsae {

struct BootstrapConfig {
    int B = 200;
    long L_inner = 100;
    bool refit = true;
    std::uint64_t seed = 0;
    unsigned threads = 1;
    FitConfig fit;

    void validate() const {
        if (B < 2) throw Error(errc::invalid_config, "bootstrap needs B >= 2");
        if (L_inner < 1) throw Error(errc::invalid_config, "L_inner must be >= 1");
        fit.validate();
    }
};

struct BootstrapResult {
    std::map<DomainId, double> mse_municipality;
    std::map<DomainId, double> mse_department;
};

/// Coefficient of variation in percent: 100 * sqrt(mse) / h_hat.
inline double cv(double h_hat, double mse) {
    if (!(mse >= 0.0)) throw Error(errc::invalid_config, "mse must be non-negative");
    if (h_hat <= 0.0) throw Error(errc::zero_estimate, "CV undefined when the estimate is zero");
    return 100.0 * std::sqrt(mse) / h_hat;
}

/// The bootstrap MSE reduction: mean squared gap between the replicate truths
/// and the replicate estimates.
inline double mean_squared_gap(std::span<const double> truths, std::span<const double> estimates) {
    if (truths.size() != estimates.size() || truths.empty())
        throw Error(errc::dimension_mismatch, "mean_squared_gap needs matching non-empty inputs");
    double acc = 0.0;
    for (std::size_t i = 0; i < truths.size(); ++i) {
        const double gap = truths[i] - estimates[i];
        acc += gap * gap;
    }
    return acc / static_cast<double>(truths.size());
}

namespace boot_detail {

/// Census positions standing in for the survey sample: per in-sample domain,
/// n_d pseudo-randomly chosen census rows. Chosen once so the design stays
/// fixed across bootstrap replicates.
struct SamplePlan {
    std::vector<std::size_t> census_rows; // concatenated, domain code order
    Dataset skeleton;                     // covariates + observed indicators copied from census
};

inline SamplePlan build_sample_plan(const Dataset& census, const Dataset& survey,
                                    std::uint64_t seed) {
    SamplePlan plan;
    plan.skeleton = Dataset::create(DatasetRole::survey, census.covariate_names,
                                    census.indicator_names);
    RngStream pos = RngStream(seed).child("bootstrap.positions");
    for (const auto& [code, sslot] : survey.domain_index()) {
        const auto it = census.domain_index().find(code);
        if (it == census.domain_index().end())
            throw Error(errc::insufficient_sample,
                        "survey domain " + code + " does not appear in the census");
        const auto& crows = census.rows_in_domain(it->second);
        const std::size_t n_d = survey.rows_in_domain(sslot).size();
        if (n_d > crows.size())
            throw Error(errc::insufficient_sample,
                        "survey domain " + code + " is larger than its census domain");
        std::vector<std::uint32_t> pool(crows);
        for (std::size_t i = 0; i < n_d; ++i) {
            const std::size_t j = i + static_cast<std::size_t>(pos.below(pool.size() - i));
            std::swap(pool[i], pool[j]);
        }
        std::vector<std::uint32_t> chosen(pool.begin(), pool.begin() + n_d);
        std::sort(chosen.begin(), chosen.end());
        for (const auto row : chosen) {
            plan.census_rows.push_back(row);
            UnitRecord rec = census.record(row);
            rec.weight = 1.0;
            plan.skeleton.add_record(rec);
        }
    }
    plan.skeleton.finalize();
    return plan;
}

} // namespace boot_detail

/// Parametric bootstrap MSE of the headcount estimator. For each replicate a
/// bootstrap superpopulation is drawn for every census-missing indicator from
/// the fitted model, the true bootstrap headcount is computed, the estimator
/// is rerun on the replicate's sample, and the squared gaps are averaged.
/// Deterministic given the seed.
inline BootstrapResult bootstrap_mse(const Dataset& census, const Dataset& survey,
                                     const std::map<int, GlmmFit>& fits, const IndicatorSpec& spec,
                                     const BootstrapConfig& config) {
    spec.validate();
    config.validate();
    for (int k : spec.census_missing)
        if (!fits.count(k))
            throw Error(errc::fit_missing,
                        "no fit provided for census-missing indicator " + spec.names[k]);

    est_detail::CensusContext ctx = est_detail::build_context(census, spec);
    const boot_detail::SamplePlan plan = boot_detail::build_sample_plan(census, survey, config.seed);
    const RngStream root(config.seed);
    const std::size_t n = census.n();
    const std::size_t n_muni = census.num_domains();
    const std::size_t n_dept = ctx.dept_codes.size();
    const std::size_t m_count = spec.census_missing.size();

    // Fixed-effect part of eta per unit and indicator; reused by every replicate.
    std::vector<std::vector<double>> eta0(m_count, std::vector<double>(n));
    for (std::size_t m = 0; m < m_count; ++m) {
        const GlmmFit& fit = fits.at(spec.census_missing[m]);
        if (fit.beta.size() != census.p() + 1)
            throw Error(errc::incompatible_spec,
                        "fit for " + fit.indicator_name + " has wrong coefficient length");
        for (std::size_t i = 0; i < n; ++i) {
            double eta = fit.beta[0];
            const auto x = census.covariate_row(i);
            for (std::size_t j = 0; j < x.size(); ++j) eta += fit.beta[j + 1] * x[j];
            eta0[m][i] = eta;
        }
    }

    std::vector<std::vector<double>> sq_muni(config.B), sq_dept(config.B);

    parallel_for(static_cast<std::size_t>(config.B), config.threads, [&](std::size_t b) {
        std::vector<std::vector<std::uint8_t>> ystar(m_count, std::vector<std::uint8_t>(n));
        std::vector<double> u_star(n_muni);
        Error last_error(errc::bootstrap_fit_failure, "unset");
        for (std::uint64_t attempt = 0;; ++attempt) {
            if (attempt > 3)
                throw Error(errc::bootstrap_fit_failure,
                            "bootstrap replicate " + std::to_string(b) +
                                " failed after 3 retries: " + last_error.what());
            try {
                // superpopulation for each missing indicator
                for (std::size_t m = 0; m < m_count; ++m) {
                    const int k = spec.census_missing[m];
                    const GlmmFit& fit = fits.at(k);
                    RngStream su = root.child("bootstrap.u", b, static_cast<std::uint64_t>(k),
                                              attempt);
                    RngStream sy = root.child("bootstrap.y", b, static_cast<std::uint64_t>(k),
                                              attempt);
                    for (const auto& [code, slot] : census.domain_index())
                        u_star[slot] = su.normal(0.0, fit.sigma_u);
                    auto& ym = ystar[m];
                    for (std::size_t i = 0; i < n; ++i) {
                        const double pi =
                            detail::expit(eta0[m][i] + u_star[census.domain_slot_of_row(i)]);
                        ym[i] = sy.bernoulli(pi) ? 1 : 0;
                    }
                }

                // true bootstrap headcounts
                std::vector<std::uint32_t> poor(n_muni, 0);
                for (std::size_t i = 0; i < n; ++i) {
                    double q = ctx.observed_part[i];
                    for (std::size_t m = 0; m < m_count; ++m)
                        if (ystar[m][i]) q += ctx.missing_weight[m];
                    if (q > spec.z) ++poor[census.domain_slot_of_row(i)];
                }
                std::vector<std::uint32_t> dept_poor(n_dept, 0);
                for (std::size_t slot = 0; slot < n_muni; ++slot)
                    dept_poor[ctx.dept_of_domain[slot]] += poor[slot];

                // bootstrap sample: superpopulation values at the plan's positions
                Dataset sample = plan.skeleton;
                for (std::size_t r = 0; r < plan.census_rows.size(); ++r)
                    for (std::size_t m = 0; m < m_count; ++m)
                        sample.set_indicator(r, spec.census_missing[m],
                                             static_cast<std::int8_t>(ystar[m][plan.census_rows[r]]));

                // re-estimate
                std::map<int, GlmmFit> fits_b;
                for (std::size_t m = 0; m < m_count; ++m) {
                    const int k = spec.census_missing[m];
                    if (config.refit) {
                        fits_b[k] = fit(sample, k, config.fit);
                    } else {
                        GlmmFit fb = fits.at(k);
                        fb.u_hat.clear();
                        if (fb.sigma_u > 0.0) {
                            const auto modes =
                                inner_modes(sample, k, fb.beta, fb.sigma_u, config.fit);
                            for (const auto& [code, mc] : modes) fb.u_hat[code] = mc.first;
                        } else {
                            for (const auto& [code, slot] : sample.domain_index())
                                fb.u_hat[code] = 0.0;
                        }
                        fits_b[k] = std::move(fb);
                    }
                }
                const std::uint64_t est_seed = root.child("bootstrap.estimate", b, attempt).next_u64();
                const auto estimates =
                    estimate_headcount(census, fits_b, spec, config.L_inner, est_seed, 1);

                auto& sm = sq_muni[b];
                auto& sd = sq_dept[b];
                sm.assign(n_muni, 0.0);
                sd.assign(n_dept, 0.0);
                std::size_t pos = 0;
                for (std::size_t dpos = 0; dpos < n_dept; ++dpos, ++pos) {
                    const double truth =
                        static_cast<double>(dept_poor[dpos]) / ctx.dept_size[dpos];
                    const double gap = truth - estimates[pos].h_hat;
                    sd[dpos] = gap * gap;
                }
                for (const auto& [code, slot] : census.domain_index()) {
                    const double truth = static_cast<double>(poor[slot]) / ctx.muni_size[slot];
                    const double gap = truth - estimates[pos].h_hat;
                    sm[slot] = gap * gap;
                    ++pos;
                }
                return;
            } catch (const Error& e) {
                if (e.code() == errc::bootstrap_fit_failure) throw;
                last_error = e; // redraw with a fresh stream
            }
        }
    });

    BootstrapResult result;
    std::vector<double> acc_muni(n_muni, 0.0), acc_dept(n_dept, 0.0);
    for (int b = 0; b < config.B; ++b) {
        for (std::size_t i = 0; i < n_muni; ++i) acc_muni[i] += sq_muni[b][i];
        for (std::size_t i = 0; i < n_dept; ++i) acc_dept[i] += sq_dept[b][i];
    }
    for (const auto& [code, slot] : census.domain_index())
        result.mse_municipality[code] = acc_muni[slot] / config.B;
    for (std::size_t dpos = 0; dpos < n_dept; ++dpos)
        result.mse_department[ctx.dept_codes[dpos]] = acc_dept[dpos] / config.B;
    return result;
}

/// Merge point estimates with bootstrap MSEs; used by the mse CSV output.
inline void attach_mse(std::vector<HeadcountEstimate>& estimates, const BootstrapResult& mse) {
    for (auto& e : estimates) {
        const auto& table = e.level == "department" ? mse.mse_department : mse.mse_municipality;
        const auto it = table.find(e.domain);
        if (it == table.end()) continue;
        e.mse = it->second;
        if (e.h_hat > 0.0) e.cv_percent = cv(e.h_hat, it->second);
    }
}

inline void write_mse_csv(const std::vector<HeadcountEstimate>& estimates, const std::string& path,
                          int B, bool refit) {
    csv::Writer out(path);
    out.row({"domain", "level", "h_hat", "mse", "rmse", "cv_percent", "B", "refit"});
    for (const auto& e : estimates) {
        std::vector<std::string> row{e.domain, e.level, csv::format_double(e.h_hat)};
        if (e.mse) {
            row.push_back(csv::format_double(*e.mse));
            row.push_back(csv::format_double(std::sqrt(*e.mse)));
        } else {
            row.push_back("");
            row.push_back("");
        }
        row.push_back(e.cv_percent ? csv::format_double(*e.cv_percent) : "");
        row.push_back(std::to_string(B));
        row.push_back(refit ? "true" : "false");
        out.row(row);
    }
}

} // namespace mpsae
