#include <chrono>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include <mpsae/mpsae.hpp>

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr const char* kVersion = "0.1.0";

struct GlobalOptions {
    std::string config_path;
    std::optional<std::uint64_t> seed;
    std::optional<unsigned> threads;
    std::optional<std::string> out_dir;
    std::optional<std::string> survey_path;
    std::optional<std::string> census_path;
    std::optional<long> L;
    std::optional<int> B;
};

std::string hash_file_hex(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    std::uint64_t h = 0xCBF29CE484222325ull;
    char c;
    while (in.get(c)) {
        h ^= static_cast<unsigned char>(c);
        h *= 0x100000001B3ull;
    }
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
    return buf;
}

void write_manifest(const std::string& out_dir, const std::string& command,
                    const std::string& config_path, std::uint64_t seed, unsigned threads,
                    double runtime_seconds, const std::vector<std::string>& outputs) {
    const fs::path path = fs::path(out_dir) / "manifest.json";
    json manifest = json::object();
    if (fs::exists(path)) {
        std::ifstream in(path);
        try {
            in >> manifest;
        } catch (...) {
            manifest = json::object();
        }
    }
    json entry;
    entry["version"] = kVersion;
    entry["config"] = config_path;
    entry["config_hash"] = config_path.empty() ? "" : hash_file_hex(config_path);
    entry["seed"] = seed;
    entry["threads"] = threads;
    entry["runtime_seconds"] = runtime_seconds;
    entry["outputs"] = outputs;
    manifest[command] = entry;
    std::ofstream out(path);
    out << manifest.dump(2) << '\n';
}

mpsae::RunConfig load_run_config(const GlobalOptions& opts) {
    mpsae::RunConfig config;
    if (!opts.config_path.empty())
        config = mpsae::run_config_from_json(mpsae::load_json_file(opts.config_path));
    if (opts.seed) config.seed = *opts.seed;
    if (opts.threads) config.threads = *opts.threads;
    if (opts.out_dir) config.out_dir = *opts.out_dir;
    if (opts.survey_path) config.survey_path = *opts.survey_path;
    if (opts.census_path) config.census_path = *opts.census_path;
    if (opts.L) config.L = *opts.L;
    if (opts.B) config.bootstrap.B = *opts.B;
    return config;
}

fs::path fit_file_path(const std::string& out_dir, const std::string& indicator_name) {
    return fs::path(out_dir) / ("fit_" + indicator_name + ".json");
}

std::map<int, mpsae::GlmmFit> load_fits(const mpsae::RunConfig& config) {
    std::map<int, mpsae::GlmmFit> fits;
    for (int k : config.spec.census_missing) {
        const fs::path path = fit_file_path(config.out_dir, config.spec.names[k]);
        if (!fs::exists(path))
            throw mpsae::Error(mpsae::errc::fit_missing,
                               "fit file " + path.string() + " not found; run `fit` first");
        fits[k] = mpsae::fit_from_json(mpsae::load_json_file(path.string()));
    }
    return fits;
}

int cmd_fit(const GlobalOptions& opts, std::string& out_dir_used) {
    const auto config = load_run_config(opts);
    out_dir_used = config.out_dir;
    if (config.survey_path.empty())
        throw mpsae::Error(mpsae::errc::invalid_config, "fit needs a survey path");
    config.require_seed();
    const auto survey_schema = mpsae::resolve_schema(config.survey_path, config, mpsae::DatasetRole::survey);
    const auto survey =
        mpsae::load_dataset(config.survey_path, mpsae::DatasetRole::survey, survey_schema);
    if (!config.census_path.empty()) {
        const auto census_schema =
            mpsae::resolve_schema(config.census_path, config, mpsae::DatasetRole::census);
        const auto census =
            mpsae::load_dataset(config.census_path, mpsae::DatasetRole::census, census_schema);
        const auto report = mpsae::check_alignment(survey, census, config.spec);
        std::cout << "alignment ok: " << report.out_of_sample_municipalities.size()
                  << " out-of-sample municipalities, " << report.out_of_sample_departments.size()
                  << " out-of-sample departments\n";
    }
    fs::create_directories(config.out_dir);
    bool all_converged = true;
    std::vector<std::string> outputs;
    for (int k : config.spec.census_missing) {
        mpsae::GlmmFit fit;
        try {
            fit = mpsae::fit(survey, k, config.fit);
        } catch (const mpsae::Error& e) {
            throw mpsae::Error(e.code(),
                               std::string(e.what()) + " (indicator " + config.spec.names[k] + ")");
        }
        const fs::path path = fit_file_path(config.out_dir, config.spec.names[k]);
        std::ofstream out(path);
        out << mpsae::fit_to_json(fit).dump(2) << '\n';
        outputs.push_back(path.string());
        std::cout << "fitted " << config.spec.names[k] << ": sigma_u=" << fit.sigma_u
                  << " loglik=" << fit.loglik << " converged=" << (fit.converged ? "yes" : "no")
                  << " iterations=" << fit.iterations << '\n';
        all_converged = all_converged && fit.converged;
    }
    return all_converged ? 0 : 2;
}

int cmd_estimate(const GlobalOptions& opts, std::string& out_dir_used) {
    const auto config = load_run_config(opts);
    out_dir_used = config.out_dir;
    if (config.census_path.empty())
        throw mpsae::Error(mpsae::errc::invalid_config, "estimate needs a census path");
    const std::uint64_t seed = config.require_seed();
    const auto census_schema =
        mpsae::resolve_schema(config.census_path, config, mpsae::DatasetRole::census);
    const auto census =
        mpsae::load_dataset(config.census_path, mpsae::DatasetRole::census, census_schema);
    const auto fits = load_fits(config);
    const auto estimates = mpsae::estimate_headcount(census, fits, config.spec, config.L, seed,
                                                     config.threads);
    fs::create_directories(config.out_dir);
    const fs::path path = fs::path(config.out_dir) / "estimates.csv";
    mpsae::write_estimates_csv(estimates, path.string(), seed);
    std::cout << "wrote " << path.string() << " (" << estimates.size() << " rows)\n";
    return 0;
}

int cmd_mse(const GlobalOptions& opts, std::string& out_dir_used) {
    auto config = load_run_config(opts);
    out_dir_used = config.out_dir;
    if (config.census_path.empty() || config.survey_path.empty())
        throw mpsae::Error(mpsae::errc::invalid_config, "mse needs survey and census paths");
    const std::uint64_t seed = config.require_seed();
    const auto survey_schema =
        mpsae::resolve_schema(config.survey_path, config, mpsae::DatasetRole::survey);
    const auto survey =
        mpsae::load_dataset(config.survey_path, mpsae::DatasetRole::survey, survey_schema);
    const auto census_schema =
        mpsae::resolve_schema(config.census_path, config, mpsae::DatasetRole::census);
    const auto census =
        mpsae::load_dataset(config.census_path, mpsae::DatasetRole::census, census_schema);
    mpsae::check_alignment(survey, census, config.spec);
    const auto fits = load_fits(config);

    auto estimates =
        mpsae::estimate_headcount(census, fits, config.spec, config.L, seed, config.threads);
    config.bootstrap.seed = seed;
    config.bootstrap.threads = config.threads;
    config.bootstrap.fit = config.fit;
    const auto mse = mpsae::bootstrap_mse(census, survey, fits, config.spec, config.bootstrap);
    mpsae::attach_mse(estimates, mse);

    bool warned = false;
    for (const auto& e : estimates) {
        if (e.mse && !e.cv_percent) {
            std::cerr << "WARNING: domain " << e.domain << " has h_hat = 0; CV left empty\n";
            warned = true;
        }
    }
    fs::create_directories(config.out_dir);
    const fs::path path = fs::path(config.out_dir) / "mse.csv";
    mpsae::write_mse_csv(estimates, path.string(), config.bootstrap.B, config.bootstrap.refit);
    std::cout << "wrote " << path.string() << '\n';
    return warned ? 2 : 0;
}

int cmd_simulate(const GlobalOptions& opts, std::string& out_dir_used) {
    if (opts.config_path.empty())
        throw mpsae::Error(mpsae::errc::invalid_config, "simulate needs --config");
    auto config = mpsae::simulate_config_from_json(mpsae::load_json_file(opts.config_path));
    if (opts.seed) config.seed = *opts.seed;
    if (opts.threads) config.threads = *opts.threads;
    if (opts.out_dir) config.out_dir = *opts.out_dir;
    out_dir_used = config.out_dir;
    if (!config.seed)
        throw mpsae::Error(mpsae::errc::invalid_config, "seed is required (no wall-clock seeding)");

    const auto population = mpsae::generate_population(config.population);
    fs::create_directories(config.out_dir);
    const fs::path summary_path = fs::path(config.out_dir) / "sim_summary.csv";
    mpsae::csv::Writer summary(summary_path.string());
    summary.row({"scenario", "stat", "min", "q1", "median", "mean", "q3", "max"});
    for (const auto& scenario : config.scenarios) {
        mpsae::SimulationConfig sim;
        sim.T = config.T;
        sim.L = config.L;
        sim.fit = config.fit;
        sim.seed = mpsae::RngStream(*config.seed)
                       .child("scenario", mpsae::detail::fnv1a64(scenario.name))
                       .next_u64();
        sim.threads = config.threads;
        const auto report =
            mpsae::run_design_simulation(population, scenario.design, config.population.spec, sim);
        const fs::path domains_path =
            fs::path(config.out_dir) / ("sim_" + scenario.name + "_domains.csv");
        mpsae::write_simulation_domains_csv(report, domains_path.string());
        mpsae::append_summary_rows(summary, scenario.name, report);
        std::cout << "scenario " << scenario.name << " [" << report.design
                  << "]: median |bias|=" << report.abs_bias_summary.median
                  << " median rmse=" << report.rmse_summary.median
                  << " failures=" << report.failures << '\n';
    }
    std::cout << "wrote " << summary_path.string() << '\n';
    return 0;
}

int cmd_generate(const GlobalOptions& opts, std::string& out_dir_used) {
    if (opts.config_path.empty())
        throw mpsae::Error(mpsae::errc::invalid_config, "generate needs --config");
    auto config = mpsae::generate_config_from_json(mpsae::load_json_file(opts.config_path));
    if (opts.seed) config.seed = *opts.seed;
    if (opts.out_dir) config.out_dir = *opts.out_dir;
    out_dir_used = config.out_dir;
    if (config.seed) config.population.seed = *config.seed;

    const auto population = mpsae::generate_population(config.population);
    const auto& spec = config.population.spec;
    const std::uint64_t sample_seed =
        mpsae::RngStream(config.population.seed).child("generate.sample").next_u64();
    const auto survey = mpsae::draw_sample(population, config.design, sample_seed);
    const auto truth = mpsae::true_headcounts(population, spec);

    fs::create_directories(config.out_dir);
    const fs::path dir(config.out_dir);
    mpsae::save_dataset(population, (dir / "population.csv").string());
    std::set<int> drop(spec.census_missing.begin(), spec.census_missing.end());
    mpsae::save_dataset(population, (dir / "census.csv").string(), drop);
    mpsae::save_dataset(survey, (dir / "survey.csv").string());
    mpsae::csv::Writer truth_csv((dir / "truth.csv").string());
    truth_csv.row({"domain", "level", "h_true"});
    for (const auto& [code, h] : truth.department)
        truth_csv.row({code, "department", mpsae::csv::format_double(h)});
    for (const auto& [code, h] : truth.municipality)
        truth_csv.row({code, "municipality", mpsae::csv::format_double(h)});
    std::cout << "wrote population.csv census.csv survey.csv truth.csv in " << config.out_dir
              << " (N=" << population.n() << ", n=" << survey.n() << ")\n";
    return 0;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"Small-area estimation of composite deprivation headcounts"};
    app.require_subcommand(1);
    app.fallthrough(true);

    GlobalOptions opts;
    std::uint64_t seed_value = 0;
    unsigned threads_value = 0;
    std::string out_value, survey_value, census_value;
    long L_value = 0;
    int B_value = 0;

    app.add_option("--config", opts.config_path, "JSON configuration file");
    auto* seed_opt = app.add_option("--seed", seed_value, "Root seed for all randomness");
    auto* threads_opt = app.add_option("--threads", threads_value, "Worker threads (0 = auto)");
    auto* out_opt = app.add_option("--out", out_value, "Output directory");
    auto* survey_opt = app.add_option("--survey", survey_value, "Survey CSV path");
    auto* census_opt = app.add_option("--census", census_value, "Census CSV path");
    auto* L_opt = app.add_option("--L", L_value, "Monte Carlo replicates for the estimator");
    auto* B_opt = app.add_option("--B", B_value, "Bootstrap replicates");

    auto* fit_cmd = app.add_subcommand("fit", "Fit one mixed model per census-missing indicator");
    auto* estimate_cmd = app.add_subcommand("estimate", "Monte Carlo headcount estimates per domain");
    auto* mse_cmd = app.add_subcommand("mse", "Point estimates with parametric-bootstrap MSE and CV");
    auto* simulate_cmd = app.add_subcommand("simulate", "Design-based simulation study");
    auto* generate_cmd = app.add_subcommand("generate", "Generate a synthetic population and sample");

    auto* oracle_cmd = app.add_subcommand("oracle", "Closed-form expected poverty status spot check");
    double alpha = 0.0, kpart = 0.0, delta = 0.0, pi1 = 0.0, pi2 = 0.0;
    auto* alpha_opt = oracle_cmd->add_option("--alpha", alpha, "Weight of each missing indicator");
    auto* k_opt = oracle_cmd->add_option("--k", kpart, "Observed contribution to the score");
    auto* delta_opt = oracle_cmd->add_option("--delta", delta, "Poverty threshold");
    auto* pi_opt = oracle_cmd->add_option("--pi", pi1, "Probability of the first missing indicator");
    auto* pi2_opt = oracle_cmd->add_option("--pi2", pi2, "Probability of the second missing indicator");
    alpha_opt->required();
    k_opt->required();
    delta_opt->required();
    pi_opt->required();

    CLI11_PARSE(app, argc, argv);

    if (seed_opt->count()) opts.seed = seed_value;
    if (threads_opt->count()) opts.threads = threads_value;
    if (out_opt->count()) opts.out_dir = out_value;
    if (survey_opt->count()) opts.survey_path = survey_value;
    if (census_opt->count()) opts.census_path = census_value;
    if (L_opt->count()) opts.L = L_value;
    if (B_opt->count()) opts.B = B_value;

    const auto start = std::chrono::steady_clock::now();
    int code = 0;
    std::string command;
    std::string manifest_dir;
    try {
        if (oracle_cmd->parsed()) {
            mpsae::UnitPovertyProblem problem;
            problem.alpha = alpha;
            problem.k = kpart;
            problem.delta = delta;
            problem.pis.push_back(pi1);
            if (pi2_opt->count()) problem.pis.push_back(pi2);
            const double value = problem.pis.size() == 1
                                     ? mpsae::expected_poor_one_missing(problem)
                                     : mpsae::expected_poor_two_missing(problem);
            std::cout << mpsae::csv::format_double(value) << '\n';
            return 0;
        }
        if (fit_cmd->parsed()) {
            command = "fit";
            code = cmd_fit(opts, manifest_dir);
        } else if (estimate_cmd->parsed()) {
            command = "estimate";
            code = cmd_estimate(opts, manifest_dir);
        } else if (mse_cmd->parsed()) {
            command = "mse";
            code = cmd_mse(opts, manifest_dir);
        } else if (simulate_cmd->parsed()) {
            command = "simulate";
            code = cmd_simulate(opts, manifest_dir);
        } else if (generate_cmd->parsed()) {
            command = "generate";
            code = cmd_generate(opts, manifest_dir);
        }
    } catch (const mpsae::Error& e) {
        std::cerr << "ERROR: " << e.what() << '\n';
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "ERROR: " << e.what() << '\n';
        return 1;
    }

    const double runtime =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    try {
        if (manifest_dir.empty()) manifest_dir = opts.out_dir.value_or(".");
        write_manifest(manifest_dir, command, opts.config_path, opts.seed.value_or(0),
                       opts.threads.value_or(0), runtime, {});
    } catch (...) {
        // manifest is a run log; never fail the command over it
    }
    return code;
}
