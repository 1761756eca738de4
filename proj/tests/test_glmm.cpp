#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <vector>

#include <Eigen/Dense>

#include <mpsae/glmm.hpp>
#include <mpsae/oracle.hpp>
#include <mpsae/rng.hpp>
#include <mpsae/simulation.hpp>

using namespace mpsae;
using Catch::Matchers::WithinAbs;
using Catch::Matchers::WithinRel;

namespace {

Dataset logit_population(int D, int per_domain, double b0, double b1, double sigma,
                         std::uint64_t seed) {
    PopulationConfig config;
    config.D = D;
    config.departments = 2;
    config.domain_sizes.assign(D, per_domain);
    config.p = 1;
    config.spec = IndicatorSpec{2, {0.5, 0.5}, 0.4, {1}, {"y_1", "y_2"}};
    config.true_beta[0] = {b0, b1};
    config.true_beta[1] = {0.0, 0.0};
    config.true_sigma_u[0] = sigma;
    config.true_sigma_u[1] = 0.1;
    config.seed = seed;
    return generate_population(config);
}

/// Test-only logistic ML fit: straight Newton iteration, no shared code with
/// the library's fitter beyond Eigen.
struct TestLogistic {
    Eigen::VectorXd beta;
    double loglik = 0.0;
};

TestLogistic reference_logistic(const Dataset& data, int k) {
    const std::size_t n = data.n(), p = data.p();
    Eigen::MatrixXd X(n, p + 1);
    Eigen::VectorXd y(n);
    for (std::size_t i = 0; i < n; ++i) {
        X(i, 0) = 1.0;
        for (std::size_t j = 0; j < p; ++j) X(i, j + 1) = data.covariate(i, j);
        y(i) = data.indicator(i, k);
    }
    Eigen::VectorXd beta = Eigen::VectorXd::Zero(p + 1);
    for (int it = 0; it < 200; ++it) {
        const Eigen::VectorXd eta = X * beta;
        Eigen::VectorXd pi(n), w(n);
        for (std::size_t i = 0; i < n; ++i) {
            pi(i) = 1.0 / (1.0 + std::exp(-eta(i)));
            w(i) = pi(i) * (1.0 - pi(i));
        }
        const Eigen::VectorXd grad = X.transpose() * (y - pi);
        if (grad.lpNorm<Eigen::Infinity>() < 1e-12) break;
        beta += (X.transpose() * w.asDiagonal() * X).ldlt().solve(grad);
    }
    TestLogistic out;
    out.beta = beta;
    const Eigen::VectorXd eta = X * beta;
    for (std::size_t i = 0; i < n; ++i)
        out.loglik += y(i) * eta(i) - std::log1p(std::exp(eta(i)));
    return out;
}

} // namespace

TEST_CASE("no-domain-effect data reduces to plain logistic", "[glmm]") {
    const Dataset data = logit_population(50, 40, -1.0, 0.5, 0.0, 202);
    const GlmmFit fitted = fit(data, 0);
    const TestLogistic ref = reference_logistic(data, 0);
    CHECK_THAT(fitted.loglik, WithinRel(ref.loglik, 1e-6));
    // coefficients agree too when sigma collapses
    CHECK_THAT(fitted.beta[0], WithinAbs(ref.beta(0), 1e-3));
    CHECK_THAT(fitted.beta[1], WithinAbs(ref.beta(1), 1e-3));
    for (const auto& [code, u] : fitted.u_hat) {
        if (fitted.sigma_u == 0.0) REQUIRE(u == 0.0);
    }
}

TEST_CASE("constant response separates", "[glmm]") {
    Dataset data = Dataset::create(DatasetRole::survey, {}, {"y_1"});
    UnitRecord rec;
    rec.dept = "D1";
    rec.muni = "D1M1";
    rec.indicators = {0};
    for (int i = 0; i < 30; ++i) data.add_record(rec);
    data.finalize();
    try {
        fit(data, 0);
        FAIL("expected Separation");
    } catch (const Error& e) {
        CHECK(e.code() == errc::separation);
    }
}

TEST_CASE("rank-deficient designs are rejected", "[glmm]") {
    RngStream rng(7);
    Dataset data = Dataset::create(DatasetRole::survey, {"x_1", "x_2"}, {"y_1"});
    UnitRecord rec;
    for (int i = 0; i < 60; ++i) {
        const double x = rng.normal();
        rec.dept = "D1";
        rec.muni = "D1M" + std::to_string(i % 3 + 1);
        rec.covariates = {x, 2.0 * x}; // collinear
        rec.indicators = {static_cast<std::int8_t>(rng.bernoulli(0.5) ? 1 : 0)};
        data.add_record(rec);
    }
    data.finalize();
    try {
        fit(data, 0);
        FAIL("expected RankDeficientDesign");
    } catch (const Error& e) {
        CHECK(e.code() == errc::rank_deficient_design);
    }
}

TEST_CASE("inner modes: symmetry, stationarity, grid-search oracle", "[glmm]") {
    SECTION("balanced domain with zero linear predictor has mode zero") {
        Dataset data = Dataset::create(DatasetRole::survey, {}, {"y_1"});
        UnitRecord rec;
        rec.dept = "D1";
        rec.muni = "D1M1";
        for (int i = 0; i < 10; ++i) {
            rec.indicators = {static_cast<std::int8_t>(i % 2)};
            data.add_record(rec);
        }
        data.finalize();
        const std::vector<double> beta{0.0};
        const auto modes = inner_modes(data, 0, beta, 0.8);
        REQUIRE(modes.size() == 1);
        CHECK_THAT(modes.at("D1M1").first, WithinAbs(0.0, 1e-8));
        CHECK(modes.at("D1M1").second > 0.0);
    }

    SECTION("analytic first derivative vanishes at the mode") {
        const Dataset data = logit_population(6, 15, -0.5, 0.9, 0.7, 303);
        const std::vector<double> beta{-0.4, 0.8};
        const double sigma = 0.6;
        const auto modes = inner_modes(data, 0, beta, sigma);
        for (const auto& [code, mode_curv] : modes) {
            const auto slot = data.domain_index().at(code);
            double d1 = -mode_curv.first / (sigma * sigma);
            for (const auto row : data.rows_in_domain(slot)) {
                const double eta = beta[0] + beta[1] * data.covariate(row, 0) + mode_curv.first;
                d1 += data.indicator(row, 0) - 1.0 / (1.0 + std::exp(-eta));
            }
            REQUIRE(std::abs(d1) < 1e-6);
        }
    }

    SECTION("modes match a dense grid search") {
        const Dataset data = logit_population(3, 10, 0.3, -0.6, 0.5, 404);
        const std::vector<double> beta{0.2, -0.5};
        const double sigma = 0.5;
        const auto modes = inner_modes(data, 0, beta, sigma);
        for (const auto& [code, mode_curv] : modes) {
            const auto slot = data.domain_index().at(code);
            // test-side objective
            auto objective = [&](double u) {
                double g = -0.5 * u * u / (sigma * sigma);
                for (const auto row : data.rows_in_domain(slot)) {
                    const double eta = beta[0] + beta[1] * data.covariate(row, 0) + u;
                    g += data.indicator(row, 0) * eta - std::log1p(std::exp(eta));
                }
                return g;
            };
            double best_u = -10.0 * sigma, best_g = objective(best_u);
            for (double u = -10.0 * sigma; u <= 10.0 * sigma; u += 1e-4) {
                const double g = objective(u);
                if (g > best_g) {
                    best_g = g;
                    best_u = u;
                }
            }
            REQUIRE_THAT(mode_curv.first, WithinAbs(best_u, 1e-3));
        }
    }
}

TEST_CASE("analytic gradient matches central finite differences", "[glmm]") {
    const Dataset data = logit_population(5, 12, -0.6, 0.7, 0.6, 505);
    RngStream rng(117);
    for (int point = 0; point < 20; ++point) {
        std::vector<double> beta{-1.0 + 2.0 * rng.uniform01(), -1.0 + 2.0 * rng.uniform01()};
        const double log_sigma = -1.5 + 1.5 * rng.uniform01();
        const double sigma = std::exp(log_sigma);

        const auto grad = laplace_loglik_gradient(data, 0, beta, sigma);
        REQUIRE(grad.size() == 3);

        const double h = 1e-6;
        for (std::size_t j = 0; j < 3; ++j) {
            auto bp = beta;
            auto bm = beta;
            double sp = sigma, sm = sigma;
            if (j < 2) {
                bp[j] += h;
                bm[j] -= h;
            } else {
                sp = std::exp(log_sigma + h);
                sm = std::exp(log_sigma - h);
            }
            const double fd =
                (laplace_loglik(data, 0, bp, sp) - laplace_loglik(data, 0, bm, sm)) / (2.0 * h);
            REQUIRE_THAT(grad[j], WithinRel(fd, 1e-4));
        }
    }
}

TEST_CASE("laplace tracks the quadrature oracle on small instances", "[glmm]") {
    const Dataset data = logit_population(5, 18, -0.4, 0.6, 0.8, 606);
    const std::vector<double> beta{-0.5, 0.7};
    for (const double sigma : {0.3, 0.7, 1.0}) {
        const double lap = laplace_loglik(data, 0, beta, sigma);
        // quadrature oracle lives in the oracle header
        const double gh = gh_marginal_loglik(data, 0, beta, sigma, 50);
        REQUIRE_THAT(lap, WithinRel(gh, 5e-3));
    }
}

TEST_CASE("plug-in prediction", "[glmm]") {
    GlmmFit fit;
    fit.beta = {0.2, -0.1};
    fit.sigma_u = 0.5;
    fit.u_hat["D1M1"] = 0.3;
    fit.indicator_name = "y_1";

    SECTION("logistic at zero") {
        const std::vector<double> x{2.0};
        CHECK(predict_plugin(fit, x, "OUT") == 0.5); // 0.2 - 0.2 + 0
    }
    SECTION("in-sample domain uses its mode") {
        const std::vector<double> x{2.0};
        const double p = predict_plugin(fit, x, "D1M1");
        CHECK_THAT(p, WithinAbs(1.0 / (1.0 + std::exp(-0.3)), 1e-12));
    }
    SECTION("saturation stays inside the open interval") {
        GlmmFit wide;
        wide.beta = {40.0};
        const std::vector<double> none{};
        const double hi = predict_plugin(wide, none, "OUT");
        CHECK(hi > 1.0 - 1e-15);
        CHECK(hi < 1.0);
        wide.beta = {700.0};
        const double extreme = predict_plugin(wide, none, "OUT");
        CHECK(extreme < 1.0);
        wide.beta = {-700.0};
        CHECK(predict_plugin(wide, none, "OUT") > 0.0);
    }
    SECTION("dimension mismatch") {
        const std::vector<double> wrong{1.0, 2.0};
        CHECK_THROWS_AS(predict_plugin(fit, wrong, "D1M1"), Error);
    }
    SECTION("monotone in a covariate with positive coefficient") {
        GlmmFit pos;
        pos.beta = {0.1, 0.8};
        double prev = 0.0;
        for (double x = -3.0; x <= 3.0; x += 0.25) {
            const std::vector<double> xv{x};
            const double p = predict_plugin(pos, xv, "OUT");
            REQUIRE(p > prev);
            prev = p;
        }
    }
}

TEST_CASE("covariate shift leaves refitted predictions unchanged", "[glmm]") {
    const Dataset data = logit_population(20, 50, -0.8, 0.6, 0.5, 707);
    const GlmmFit base = fit(data, 0);

    const double shift = 3.7;
    Dataset shifted = Dataset::create(data.role, data.covariate_names, data.indicator_names);
    for (std::size_t i = 0; i < data.n(); ++i) {
        UnitRecord rec = data.record(i);
        rec.covariates[0] += shift;
        shifted.add_record(rec);
    }
    shifted.finalize();
    const GlmmFit moved = fit(shifted, 0);

    for (std::size_t i = 0; i < data.n(); ++i) {
        const auto code = data.domain(data.domain_slot_of_row(i)).muni;
        const std::vector<double> x0{data.covariate(i, 0)};
        const std::vector<double> x1{data.covariate(i, 0) + shift};
        REQUIRE_THAT(predict_plugin(moved, x1, code),
                     WithinAbs(predict_plugin(base, x0, code), 1e-10));
    }
}

TEST_CASE("plugin proportion combines sample and predictions", "[glmm]") {
    // census domain of four units with eta = 0 everywhere -> pi = 0.5
    GlmmFit f;
    f.beta = {0.0};
    f.sigma_u = 0.0;
    f.indicator_name = "y_1";

    Dataset census = Dataset::create(DatasetRole::census, {}, {"y_1"});
    UnitRecord rec;
    rec.dept = "D1";
    rec.muni = "D1M1";
    rec.indicators = {kMissing};
    for (int i = 0; i < 4; ++i) census.add_record(rec);
    census.finalize();

    SECTION("no sampled units: mean of predictions") {
        Dataset survey = Dataset::create(DatasetRole::survey, {}, {"y_1"});
        rec.muni = "D9M9";
        rec.dept = "D9";
        rec.indicators = {1};
        survey.add_record(rec);
        survey.finalize();
        const auto out = plugin_proportion(f, census, survey, 0);
        CHECK(out.at("D1M1") == 0.5);
    }
    SECTION("two sampled units y=(1,0) with two predictions at 0.5") {
        Dataset survey = Dataset::create(DatasetRole::survey, {}, {"y_1"});
        rec.muni = "D1M1";
        rec.dept = "D1";
        rec.indicators = {1};
        survey.add_record(rec);
        rec.indicators = {0};
        survey.add_record(rec);
        survey.finalize();
        const auto out = plugin_proportion(f, census, survey, 0);
        CHECK(out.at("D1M1") == 0.5); // (1 + 0 + 2*0.5) / 4
    }
    SECTION("fully sampled domain reduces to the sample mean") {
        Dataset survey = Dataset::create(DatasetRole::survey, {}, {"y_1"});
        rec.muni = "D1M1";
        rec.dept = "D1";
        for (int i = 0; i < 4; ++i) {
            rec.indicators = {static_cast<std::int8_t>(i == 0 ? 1 : 0)};
            survey.add_record(rec);
        }
        survey.finalize();
        const auto out = plugin_proportion(f, census, survey, 0);
        CHECK(out.at("D1M1") == 0.25);
    }
}

TEST_CASE("fit serialization round trips", "[glmm]") {
    const Dataset data = logit_population(8, 25, -0.5, 0.4, 0.5, 808);
    const GlmmFit fitted = fit(data, 0);
    const auto j = fit_to_json(fitted);
    const GlmmFit back = fit_from_json(j);
    CHECK(back.beta == fitted.beta);
    CHECK(back.sigma_u == fitted.sigma_u);
    CHECK(back.u_hat == fitted.u_hat);
    CHECK(back.loglik == fitted.loglik);
    CHECK(back.converged == fitted.converged);
    CHECK(back.iterations == fitted.iterations);
    CHECK(back.indicator_name == fitted.indicator_name);
}

TEST_CASE("standardized fits match unstandardized predictions", "[glmm]") {
    const Dataset data = logit_population(10, 40, -0.6, 0.5, 0.4, 909);
    FitConfig plain;
    FitConfig std_cfg;
    std_cfg.standardize = true;
    const GlmmFit a = fit(data, 0, plain);
    const GlmmFit b = fit(data, 0, std_cfg);
    for (std::size_t i = 0; i < data.n(); i += 17) {
        const auto code = data.domain(data.domain_slot_of_row(i)).muni;
        const std::vector<double> x{data.covariate(i, 0)};
        REQUIRE_THAT(predict_plugin(b, x, code), WithinAbs(predict_plugin(a, x, code), 1e-5));
    }
}

TEST_CASE("observed information is positive definite at the optimum", "[glmm]") {
    const Dataset data = logit_population(15, 30, -0.7, 0.6, 0.6, 1010);
    const GlmmFit fitted = fit(data, 0);
    REQUIRE(fitted.sigma_u > 0.0);
    const Eigen::MatrixXd info = observed_information(data, 0, fitted.beta, fitted.sigma_u);
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(info);
    for (Eigen::Index i = 0; i < eig.eigenvalues().size(); ++i)
        CHECK(eig.eigenvalues()(i) > 0.0);
}
