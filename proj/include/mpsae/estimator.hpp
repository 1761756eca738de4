#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "mpsae/csv.hpp"
#include "mpsae/data.hpp"
#include "mpsae/error.hpp"
#include "mpsae/glmm.hpp"
#include "mpsae/indicator.hpp"
#include "mpsae/parallel.hpp"
#include "mpsae/rng.hpp"

namespace mpsae {

struct HeadcountEstimate {
    DomainId domain;
    std::string level; // "department" or "municipality"
    double h_hat = 0.0;
    long replicates = 0;
    double mc_stderr = 0.0;
    std::optional<double> mse;
    std::optional<double> cv_percent;
};

namespace est_detail {

/// Everything the replicate loop needs, computed once: the observed part of
/// each unit's score and the plug-in probability of each missing indicator.
struct CensusContext {
    const Dataset* census = nullptr;
    const IndicatorSpec* spec = nullptr;
    std::vector<double> observed_part;          // per unit
    std::vector<double> missing_weight;         // per missing indicator
    std::vector<std::vector<double>> probs;     // [missing slot][unit]
    // department aggregation
    std::vector<DomainId> dept_codes;           // sorted
    std::vector<std::uint32_t> dept_of_domain;  // muni slot -> dept position
    std::vector<std::uint32_t> muni_size;       // units per muni slot
    std::vector<std::uint32_t> dept_size;       // units per dept position
};

inline double observed_score(const Dataset& census, const IndicatorSpec& spec, std::size_t row) {
    double q = 0.0;
    for (int k = 0; k < spec.K; ++k) {
        if (spec.is_census_missing(k)) continue;
        const std::int8_t v = census.indicator(row, k);
        if (v == kMissing)
            throw Error(errc::missing_indicator_value,
                        "census row " + std::to_string(row) + " is missing observed indicator " +
                            census.indicator_names[k]);
        q += spec.weights[k] * v;
    }
    return q;
}

inline CensusContext build_context(const Dataset& census, const IndicatorSpec& spec) {
    if (census.k() != spec.K)
        throw Error(errc::incompatible_spec, "census declares a different K than the spec");
    CensusContext ctx;
    ctx.census = &census;
    ctx.spec = &spec;
    const std::size_t n = census.n();
    ctx.observed_part.resize(n);
    for (std::size_t i = 0; i < n; ++i) ctx.observed_part[i] = observed_score(census, spec, i);
    for (int k : spec.census_missing) ctx.missing_weight.push_back(spec.weights[k]);

    ctx.muni_size.assign(census.num_domains(), 0);
    for (std::uint32_t slot = 0; slot < census.num_domains(); ++slot)
        ctx.muni_size[slot] = static_cast<std::uint32_t>(census.rows_in_domain(slot).size());
    ctx.dept_of_domain.assign(census.num_domains(), 0);
    for (const auto& [dept, slots] : census.department_index()) {
        const auto pos = static_cast<std::uint32_t>(ctx.dept_codes.size());
        ctx.dept_codes.push_back(dept);
        for (const auto slot : slots) ctx.dept_of_domain[slot] = pos;
    }
    ctx.dept_size.assign(ctx.dept_codes.size(), 0);
    for (std::uint32_t slot = 0; slot < census.num_domains(); ++slot)
        ctx.dept_size[ctx.dept_of_domain[slot]] += ctx.muni_size[slot];
    return ctx;
}

/// Plug-in probabilities for every census unit and missing indicator.
inline void fill_probabilities(CensusContext& ctx, const std::map<int, GlmmFit>& fits) {
    const Dataset& census = *ctx.census;
    const IndicatorSpec& spec = *ctx.spec;
    for (int k : spec.census_missing)
        if (!fits.count(k))
            throw Error(errc::fit_missing, "no fit provided for census-missing indicator " +
                                               spec.names[k]);
    for (const auto& [k, fit] : fits) {
        if (!spec.is_census_missing(k))
            throw Error(errc::incompatible_spec,
                        "fit provided for indicator " + std::to_string(k + 1) +
                            " which the spec does not mark census-missing");
        if (fit.beta.size() != census.p() + 1)
            throw Error(errc::incompatible_spec, "fit for " + fit.indicator_name +
                                                     " has wrong coefficient length");
    }
    ctx.probs.assign(spec.census_missing.size(), std::vector<double>(census.n()));
    // u_hat lookups hoisted per domain
    for (std::size_t m = 0; m < spec.census_missing.size(); ++m) {
        const GlmmFit& fit = fits.at(spec.census_missing[m]);
        std::vector<double> u_by_slot(census.num_domains());
        for (std::uint32_t slot = 0; slot < census.num_domains(); ++slot)
            u_by_slot[slot] = fit.u_for(census.domain(slot).muni);
        auto& out = ctx.probs[m];
        for (std::size_t i = 0; i < census.n(); ++i) {
            double eta = fit.beta[0];
            const auto x = census.covariate_row(i);
            for (std::size_t j = 0; j < x.size(); ++j) eta += fit.beta[j + 1] * x[j];
            eta += u_by_slot[census.domain_slot_of_row(i)];
            out[i] = detail::expit(eta);
        }
    }
}

/// One Monte Carlo replicate: per-municipality poor counts. Streams are one
/// per missing indicator; the i-th value of stream m belongs to unit i.
inline void replicate_poor_counts(const CensusContext& ctx, std::vector<RngStream>& streams,
                                  std::vector<std::uint32_t>& poor) {
    const Dataset& census = *ctx.census;
    const double z = ctx.spec->z;
    const std::size_t n = census.n();
    const std::size_t m_count = ctx.missing_weight.size();
    poor.assign(census.num_domains(), 0);
    for (std::size_t i = 0; i < n; ++i) {
        double q = ctx.observed_part[i];
        for (std::size_t m = 0; m < m_count; ++m) {
            if (streams[m].uniform01() < ctx.probs[m][i]) q += ctx.missing_weight[m];
        }
        if (q > z) ++poor[census.domain_slot_of_row(i)];
    }
}

struct MomentAccumulator {
    std::vector<double> sum, sumsq;
    void init(std::size_t n) {
        sum.assign(n, 0.0);
        sumsq.assign(n, 0.0);
    }
    void add(const MomentAccumulator& other) {
        for (std::size_t i = 0; i < sum.size(); ++i) {
            sum[i] += other.sum[i];
            sumsq[i] += other.sumsq[i];
        }
    }
};

} // namespace est_detail

/// One Monte Carlo draw of the headcount per municipality, given plug-in
/// probabilities keyed by indicator index.
inline std::map<DomainId, double> single_mc_replicate(const Dataset& census,
                                                      const std::map<int, std::vector<double>>& pihat,
                                                      const IndicatorSpec& spec, RngStream stream) {
    est_detail::CensusContext ctx = est_detail::build_context(census, spec);
    ctx.probs.clear();
    for (int k : spec.census_missing) {
        const auto it = pihat.find(k);
        if (it == pihat.end() || it->second.size() != census.n())
            throw Error(errc::fit_missing, "pihat incomplete for census-missing indicator " +
                                               std::to_string(k + 1));
        ctx.probs.push_back(it->second);
    }
    std::vector<RngStream> streams;
    for (int k : spec.census_missing)
        streams.push_back(stream.child("indicator", static_cast<std::uint64_t>(k)));
    std::vector<std::uint32_t> poor;
    est_detail::replicate_poor_counts(ctx, streams, poor);
    std::map<DomainId, double> out;
    for (const auto& [code, slot] : census.domain_index())
        out[code] = static_cast<double>(poor[slot]) / static_cast<double>(ctx.muni_size[slot]);
    return out;
}

namespace est_detail {

/// Shared replicate engine; returns estimates for departments then
/// municipalities, both in code order.
inline std::vector<HeadcountEstimate> run_replicates(const CensusContext& ctx, long L,
                                                     std::uint64_t seed, unsigned threads) {
    if (L < 1) throw Error(errc::invalid_config, "L must be >= 1");
    const Dataset& census = *ctx.census;
    const IndicatorSpec& spec = *ctx.spec;
    const std::size_t n_muni = census.num_domains();
    const std::size_t n_dept = ctx.dept_codes.size();
    const RngStream root(seed);

    // Fixed-size chunks keep the reduction order independent of threads.
    constexpr long kChunk = 32;
    const std::size_t tasks = static_cast<std::size_t>((L + kChunk - 1) / kChunk);
    std::vector<MomentAccumulator> muni_parts(tasks), dept_parts(tasks);

    parallel_for(tasks, threads, [&](std::size_t task) {
        auto& muni_acc = muni_parts[task];
        auto& dept_acc = dept_parts[task];
        muni_acc.init(n_muni);
        dept_acc.init(n_dept);
        std::vector<std::uint32_t> poor;
        std::vector<std::uint32_t> dept_poor(n_dept);
        std::vector<RngStream> streams;
        const long lo = static_cast<long>(task) * kChunk;
        const long hi = std::min(L, lo + kChunk);
        for (long l = lo; l < hi; ++l) {
            streams.clear();
            for (int k : spec.census_missing)
                streams.push_back(root.child("estimator.replicate", static_cast<std::uint64_t>(l),
                                             static_cast<std::uint64_t>(k)));
            replicate_poor_counts(ctx, streams, poor);
            std::fill(dept_poor.begin(), dept_poor.end(), 0);
            for (std::size_t slot = 0; slot < n_muni; ++slot)
                dept_poor[ctx.dept_of_domain[slot]] += poor[slot];
            for (std::size_t slot = 0; slot < n_muni; ++slot) {
                const double h = static_cast<double>(poor[slot]) / ctx.muni_size[slot];
                muni_acc.sum[slot] += h;
                muni_acc.sumsq[slot] += h * h;
            }
            for (std::size_t dpos = 0; dpos < n_dept; ++dpos) {
                const double h = static_cast<double>(dept_poor[dpos]) / ctx.dept_size[dpos];
                dept_acc.sum[dpos] += h;
                dept_acc.sumsq[dpos] += h * h;
            }
        }
    });

    MomentAccumulator muni_total, dept_total;
    muni_total.init(n_muni);
    dept_total.init(n_dept);
    for (std::size_t task = 0; task < tasks; ++task) {
        muni_total.add(muni_parts[task]);
        dept_total.add(dept_parts[task]);
    }

    auto finish = [&](double sum, double sumsq) {
        const double mean = sum / static_cast<double>(L);
        double se = 0.0;
        if (L > 1) {
            const double var = std::max(0.0, (sumsq - sum * sum / L) / static_cast<double>(L - 1));
            se = std::sqrt(var / static_cast<double>(L));
        }
        return std::pair<double, double>(mean, se);
    };

    std::vector<HeadcountEstimate> out;
    for (std::size_t dpos = 0; dpos < n_dept; ++dpos) {
        const auto [mean, se] = finish(dept_total.sum[dpos], dept_total.sumsq[dpos]);
        HeadcountEstimate e;
        e.domain = ctx.dept_codes[dpos];
        e.level = "department";
        e.h_hat = mean;
        e.replicates = L;
        e.mc_stderr = se;
        out.push_back(std::move(e));
    }
    for (const auto& [code, slot] : census.domain_index()) {
        const auto [mean, se] = finish(muni_total.sum[slot], muni_total.sumsq[slot]);
        HeadcountEstimate e;
        e.domain = code;
        e.level = "municipality";
        e.h_hat = mean;
        e.replicates = L;
        e.mc_stderr = se;
        out.push_back(std::move(e));
    }
    return out;
}

} // namespace est_detail

/// Monte Carlo point estimator of the headcount for every census domain,
/// at both hierarchy levels. Deterministic given the seed.
inline std::vector<HeadcountEstimate> estimate_headcount(const Dataset& census,
                                                         const std::map<int, GlmmFit>& fits,
                                                         const IndicatorSpec& spec, long L,
                                                         std::uint64_t seed, unsigned threads = 1) {
    spec.validate();
    est_detail::CensusContext ctx = est_detail::build_context(census, spec);
    est_detail::fill_probabilities(ctx, fits);
    return est_detail::run_replicates(ctx, L, seed, threads);
}

/// Same estimator with externally supplied plug-in probabilities.
inline std::vector<HeadcountEstimate>
estimate_headcount_from_probabilities(const Dataset& census,
                                      const std::map<int, std::vector<double>>& pihat,
                                      const IndicatorSpec& spec, long L, std::uint64_t seed,
                                      unsigned threads = 1) {
    spec.validate();
    est_detail::CensusContext ctx = est_detail::build_context(census, spec);
    for (int k : spec.census_missing) {
        const auto it = pihat.find(k);
        if (it == pihat.end() || it->second.size() != census.n())
            throw Error(errc::fit_missing, "pihat incomplete for census-missing indicator " +
                                               std::to_string(k + 1));
        ctx.probs.push_back(it->second);
    }
    return est_detail::run_replicates(ctx, L, seed, threads);
}

inline void write_estimates_csv(const std::vector<HeadcountEstimate>& estimates,
                                const std::string& path, std::uint64_t seed) {
    csv::Writer out(path);
    out.row({"domain", "level", "h_hat", "mc_stderr", "L", "seed"});
    for (const auto& e : estimates) {
        out.row({e.domain, e.level, csv::format_double(e.h_hat), csv::format_double(e.mc_stderr),
                 std::to_string(e.replicates), std::to_string(seed)});
    }
}

} // namespace mpsae
