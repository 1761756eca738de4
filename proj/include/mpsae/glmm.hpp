#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "mpsae/data.hpp"
#include "mpsae/error.hpp"

namespace mpsae {

namespace detail {

inline double log1pexp(double x) {
    if (x > 35.0) return x + std::exp(-x);
    if (x < -35.0) return std::exp(x);
    return std::log1p(std::exp(x));
}

/// Logistic inverse link, clamped into the open unit interval.
inline double expit(double eta) {
    double p;
    if (eta >= 0.0) {
        const double t = std::exp(-eta);
        p = 1.0 / (1.0 + t);
    } else {
        const double t = std::exp(eta);
        p = t / (1.0 + t);
    }
    constexpr double hi = 1.0 - std::numeric_limits<double>::epsilon() / 2.0;
    if (p >= 1.0) p = hi;
    if (p <= 0.0) p = std::numeric_limits<double>::denorm_min();
    return p;
}

constexpr double kLogTwoPi = 1.8378770664093454836; // log(2*pi)

} // namespace detail

struct FitConfig {
    double inner_tol = 1e-8;
    int inner_max_iter = 100;
    double outer_tol = 1e-6;
    int outer_max_iter = 500;
    double sigma_init = 0.5;
    bool standardize = false;

    void validate() const {
        if (!(inner_tol > 0.0) || !(outer_tol > 0.0))
            throw Error(errc::invalid_config, "tolerances must be positive");
        if (inner_max_iter < 1 || outer_max_iter < 1)
            throw Error(errc::invalid_config, "iteration caps must be >= 1");
        if (!(sigma_init > 0.0)) throw Error(errc::invalid_config, "sigma_init must be positive");
    }
};

/// Fitted random-intercept Bernoulli logit model for one indicator.
struct GlmmFit {
    std::vector<double> beta; // intercept first, length p+1
    double sigma_u = 0.0;
    std::map<DomainId, double> u_hat; // conditional modes for in-sample domains
    double loglik = 0.0;
    bool converged = false;
    int iterations = 0;
    std::string indicator_name;

    /// Out-of-sample domains predict at the prior mean.
    double u_for(const DomainId& muni) const {
        const auto it = u_hat.find(muni);
        return it == u_hat.end() ? 0.0 : it->second;
    }
};

inline nlohmann::json fit_to_json(const GlmmFit& fit) {
    nlohmann::json j;
    j["indicator"] = fit.indicator_name;
    j["beta"] = fit.beta;
    j["sigma_u"] = fit.sigma_u;
    j["u_hat"] = nlohmann::json::object();
    for (const auto& [code, u] : fit.u_hat) j["u_hat"][code] = u;
    j["loglik"] = fit.loglik;
    j["converged"] = fit.converged;
    j["iterations"] = fit.iterations;
    return j;
}

inline GlmmFit fit_from_json(const nlohmann::json& j) {
    GlmmFit fit;
    fit.indicator_name = j.at("indicator").get<std::string>();
    fit.beta = j.at("beta").get<std::vector<double>>();
    fit.sigma_u = j.at("sigma_u").get<double>();
    for (const auto& [code, u] : j.at("u_hat").items()) fit.u_hat[code] = u.get<double>();
    fit.loglik = j.at("loglik").get<double>();
    fit.converged = j.at("converged").get<bool>();
    fit.iterations = j.at("iterations").get<int>();
    return fit;
}

namespace glmm_detail {

/// Design extracted for one indicator: intercept-first X, 0/1 response, and
/// rows grouped by the domains present in the data (code order).
struct FitData {
    Eigen::MatrixXd X; // n x (p+1)
    Eigen::VectorXd y;
    std::vector<std::vector<std::uint32_t>> domain_rows;
    std::vector<DomainId> domain_codes;
};

inline FitData build_fit_data(const Dataset& data, int indicator_index) {
    if (indicator_index < 0 || indicator_index >= data.k())
        throw Error(errc::dimension_mismatch, "indicator index out of range");
    const std::size_t n = data.n();
    const std::size_t p = data.p();
    FitData fd;
    fd.X.resize(n, p + 1);
    fd.y.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
        const std::int8_t v = data.indicator(i, indicator_index);
        if (v == kMissing)
            throw Error(errc::missing_indicator_value,
                        "indicator " + data.indicator_names[indicator_index] +
                            " has missing values in the training data");
        fd.y(i) = v;
        fd.X(i, 0) = 1.0;
        for (std::size_t j = 0; j < p; ++j) fd.X(i, j + 1) = data.covariate(i, j);
    }
    for (const auto& [code, slot] : data.domain_index()) {
        fd.domain_codes.push_back(code);
        fd.domain_rows.push_back(data.rows_in_domain(slot));
    }
    return fd;
}

inline void check_separation(const Eigen::VectorXd& beta, const std::string& what) {
    for (Eigen::Index j = 0; j < beta.size(); ++j)
        if (std::abs(beta(j)) > 50.0)
            throw Error(errc::separation, what + ": coefficient " + std::to_string(j) +
                                              " diverged beyond |50|");
}

struct LogisticResult {
    Eigen::VectorXd beta;
    double loglik = 0.0;
    bool converged = false;
    int iterations = 0;
};

/// Plain logistic regression by Newton iteration with step halving.
inline LogisticResult logistic_fit(const Eigen::MatrixXd& X, const Eigen::VectorXd& y,
                                   int max_iter = 100, double tol = 1e-10) {
    const Eigen::Index n = X.rows(), q = X.cols();
    LogisticResult res;
    res.beta = Eigen::VectorXd::Zero(q);

    auto loglik_at = [&](const Eigen::VectorXd& b) {
        const Eigen::VectorXd eta = X * b;
        double ll = 0.0;
        for (Eigen::Index i = 0; i < n; ++i) ll += y(i) * eta(i) - detail::log1pexp(eta(i));
        return ll;
    };

    double ll = loglik_at(res.beta);
    for (int it = 0; it < max_iter; ++it) {
        res.iterations = it + 1;
        const Eigen::VectorXd eta = X * res.beta;
        Eigen::VectorXd pi(n), w(n);
        for (Eigen::Index i = 0; i < n; ++i) {
            pi(i) = detail::expit(eta(i));
            w(i) = pi(i) * (1.0 - pi(i));
        }
        const Eigen::VectorXd grad = X.transpose() * (y - pi);
        if (grad.lpNorm<Eigen::Infinity>() < tol * std::max(1.0, std::abs(ll))) {
            res.converged = true;
            break;
        }
        const Eigen::MatrixXd info = X.transpose() * w.asDiagonal() * X;
        Eigen::VectorXd step = info.ldlt().solve(grad);
        double t = 1.0;
        Eigen::VectorXd cand;
        double ll_new = -std::numeric_limits<double>::infinity();
        for (int h = 0; h < 30; ++h) {
            cand = res.beta + t * step;
            ll_new = loglik_at(cand);
            if (ll_new >= ll) break;
            t *= 0.5;
        }
        if (ll_new < ll) {
            break; // no ascent direction left
        }
        res.beta = cand;
        check_separation(res.beta, "logistic regression");
        if (ll_new - ll < 1e-14 * std::max(1.0, std::abs(ll))) {
            ll = ll_new;
            res.converged = true;
            break;
        }
        ll = ll_new;
    }
    res.loglik = loglik_at(res.beta);
    return res;
}

struct InnerMode {
    double mode = 0.0;
    double curvature = 0.0; // negative second derivative at the mode, > 0
};

/// Newton maximization of the conditional log-density of u for one domain.
/// eta0 holds the fixed-effect part x'beta for the domain's rows.
inline InnerMode inner_mode_newton(std::span<const double> eta0, std::span<const double> y,
                                   double sigma2, double tol, int max_iter) {
    const double inv_s2 = 1.0 / sigma2;
    auto objective = [&](double u) {
        double g = -0.5 * u * u * inv_s2;
        for (std::size_t i = 0; i < eta0.size(); ++i) {
            const double eta = eta0[i] + u;
            g += y[i] * eta - detail::log1pexp(eta);
        }
        return g;
    };

    double u = 0.0;
    double g = objective(u);
    for (int it = 0; it < max_iter; ++it) {
        double d1 = -u * inv_s2;
        double d2 = -inv_s2;
        for (std::size_t i = 0; i < eta0.size(); ++i) {
            const double pi = detail::expit(eta0[i] + u);
            d1 += y[i] - pi;
            d2 -= pi * (1.0 - pi);
        }
        double step = -d1 / d2;
        if (std::abs(step) < tol) {
            InnerMode m;
            m.mode = u;
            m.curvature = -d2;
            return m;
        }
        double t = 1.0;
        double u_new = u + step;
        double g_new = objective(u_new);
        int halvings = 0;
        while (g_new < g && halvings < 30) {
            t *= 0.5;
            u_new = u + t * step;
            g_new = objective(u_new);
            ++halvings;
        }
        u = u_new;
        g = g_new;
        if (std::abs(t * step) < tol) {
            double d2f = -inv_s2;
            for (std::size_t i = 0; i < eta0.size(); ++i) {
                const double pi = detail::expit(eta0[i] + u);
                d2f -= pi * (1.0 - pi);
            }
            InnerMode m;
            m.mode = u;
            m.curvature = -d2f;
            return m;
        }
    }
    throw Error(errc::inner_no_convergence, "inner Newton exceeded its iteration cap");
}

struct LaplaceEval {
    double loglik = 0.0;
    Eigen::VectorXd grad; // d/d(beta, theta) with theta = log sigma_u
    std::vector<double> modes;
    std::vector<double> curvatures;
};

/// Laplace-approximated marginal log-likelihood and its analytic gradient.
///
/// Per domain, with g(u) the conditional log-density of u and u* its mode:
///   l_d = sum_j [y eta - log(1+e^eta)] - log sigma - u*^2/(2 sigma^2)
///         - 0.5 log(H),   H = sum_j w_j + 1/sigma^2.
/// The gradient accounts for the dependence of u* and H on the parameters
/// via implicit differentiation of the inner stationarity condition.
inline LaplaceEval laplace_eval(const FitData& fd, const Eigen::VectorXd& beta, double theta,
                                const FitConfig& config, bool want_grad) {
    const Eigen::Index q = fd.X.cols();
    const double sigma = std::exp(theta);
    const double sigma2 = sigma * sigma;
    const double inv_s2 = 1.0 / sigma2;

    LaplaceEval ev;
    ev.grad = Eigen::VectorXd::Zero(q + 1);
    ev.modes.resize(fd.domain_rows.size());
    ev.curvatures.resize(fd.domain_rows.size());

    const Eigen::VectorXd eta0_all = fd.X * beta;

    std::vector<double> eta0, yy;
    for (std::size_t d = 0; d < fd.domain_rows.size(); ++d) {
        const auto& rows = fd.domain_rows[d];
        eta0.resize(rows.size());
        yy.resize(rows.size());
        for (std::size_t i = 0; i < rows.size(); ++i) {
            eta0[i] = eta0_all(rows[i]);
            yy[i] = fd.y(rows[i]);
        }
        const InnerMode m =
            inner_mode_newton(eta0, yy, sigma2, config.inner_tol, config.inner_max_iter);
        ev.modes[d] = m.mode;
        ev.curvatures[d] = m.curvature;
        const double u = m.mode;
        const double H = m.curvature;

        double bern = 0.0;
        for (std::size_t i = 0; i < rows.size(); ++i) {
            const double eta = eta0[i] + u;
            bern += yy[i] * eta - detail::log1pexp(eta);
        }
        ev.loglik += bern - theta - 0.5 * u * u * inv_s2 - 0.5 * std::log(H);

        if (!want_grad) continue;

        // Per-row pieces at the mode.
        double sw = 0.0, swp = 0.0;
        Eigen::VectorXd a = Eigen::VectorXd::Zero(q); // sum (y - pi) x
        Eigen::VectorXd b = Eigen::VectorXd::Zero(q); // sum w x
        Eigen::VectorXd c = Eigen::VectorXd::Zero(q); // sum w' x
        for (std::size_t i = 0; i < rows.size(); ++i) {
            const double pi = detail::expit(eta0[i] + u);
            const double w = pi * (1.0 - pi);
            const double wp = w * (1.0 - 2.0 * pi);
            sw += w;
            swp += wp;
            const auto xrow = fd.X.row(rows[i]).transpose();
            a += (yy[i] - pi) * xrow;
            b += w * xrow;
            c += wp * xrow;
        }
        // beta components
        for (Eigen::Index mcol = 0; mcol < q; ++mcol) {
            const double du = -b(mcol) / H;
            const double dH = c(mcol) + swp * du;
            ev.grad(mcol) += a(mcol) - 0.5 * dH / H;
        }
        // theta component
        const double du_dtheta = (2.0 * u * inv_s2) / H;
        const double dH_dtheta = -2.0 * inv_s2 + swp * du_dtheta;
        ev.grad(q) += (-1.0 + u * u * inv_s2) - 0.5 * dH_dtheta / H;
    }
    return ev;
}

} // namespace glmm_detail

/// Conditional modes and curvatures of the random intercepts at fixed
/// parameters, keyed by domain code.
inline std::map<DomainId, std::pair<double, double>>
inner_modes(const Dataset& data, int indicator_index, std::span<const double> beta, double sigma_u,
            const FitConfig& config = {}) {
    if (!(sigma_u > 0.0)) throw Error(errc::invalid_config, "inner_modes requires sigma_u > 0");
    const auto fd = glmm_detail::build_fit_data(data, indicator_index);
    if (static_cast<Eigen::Index>(beta.size()) != fd.X.cols())
        throw Error(errc::dimension_mismatch, "beta length must be p+1");
    const Eigen::VectorXd b = Eigen::Map<const Eigen::VectorXd>(beta.data(), beta.size());
    const auto ev = glmm_detail::laplace_eval(fd, b, std::log(sigma_u), config, false);
    std::map<DomainId, std::pair<double, double>> out;
    for (std::size_t d = 0; d < fd.domain_codes.size(); ++d)
        out[fd.domain_codes[d]] = {ev.modes[d], ev.curvatures[d]};
    return out;
}

/// Laplace-approximated marginal log-likelihood at given parameters.
inline double laplace_loglik(const Dataset& data, int indicator_index, std::span<const double> beta,
                             double sigma_u, const FitConfig& config = {}) {
    const auto fd = glmm_detail::build_fit_data(data, indicator_index);
    const Eigen::VectorXd b = Eigen::Map<const Eigen::VectorXd>(beta.data(), beta.size());
    return glmm_detail::laplace_eval(fd, b, std::log(sigma_u), config, false).loglik;
}

/// Analytic gradient of the Laplace log-likelihood w.r.t. (beta, log sigma_u).
inline std::vector<double> laplace_loglik_gradient(const Dataset& data, int indicator_index,
                                                   std::span<const double> beta, double sigma_u,
                                                   const FitConfig& config = {}) {
    const auto fd = glmm_detail::build_fit_data(data, indicator_index);
    const Eigen::VectorXd b = Eigen::Map<const Eigen::VectorXd>(beta.data(), beta.size());
    const auto ev = glmm_detail::laplace_eval(fd, b, std::log(sigma_u), config, true);
    return std::vector<double>(ev.grad.data(), ev.grad.data() + ev.grad.size());
}

/// Maximum likelihood fit of the random-intercept logit model via the
/// Laplace approximation; BFGS over (beta, log sigma_u).
inline GlmmFit fit(const Dataset& data, int indicator_index, const FitConfig& config = {}) {
    config.validate();
    auto fd = glmm_detail::build_fit_data(data, indicator_index);
    const Eigen::Index q = fd.X.cols();
    const std::size_t n = data.n();

    // A constant response separates perfectly; the intercept MLE is infinite.
    const double y_sum = fd.y.sum();
    if (y_sum == 0.0 || y_sum == static_cast<double>(n))
        throw Error(errc::separation, "indicator " + data.indicator_names[indicator_index] +
                                          " is constant in the training data; the intercept "
                                          "diverges");

    // Optional internal standardization; coefficients are mapped back below.
    Eigen::VectorXd col_mean = Eigen::VectorXd::Zero(q), col_sd = Eigen::VectorXd::Ones(q);
    if (config.standardize) {
        for (Eigen::Index j = 1; j < q; ++j) {
            col_mean(j) = fd.X.col(j).mean();
            const double var = (fd.X.col(j).array() - col_mean(j)).square().sum() /
                               std::max<double>(1.0, static_cast<double>(n) - 1.0);
            col_sd(j) = var > 0.0 ? std::sqrt(var) : 1.0;
            fd.X.col(j) = (fd.X.col(j).array() - col_mean(j)) / col_sd(j);
        }
    }

    Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(fd.X);
    qr.setThreshold(1e-10);
    if (qr.rank() < q)
        throw Error(errc::rank_deficient_design,
                    "design matrix rank " + std::to_string(qr.rank()) + " < " + std::to_string(q));

    const auto init = glmm_detail::logistic_fit(fd.X, fd.y);

    const double theta_floor = std::log(1e-6);
    Eigen::VectorXd psi(q + 1);
    psi.head(q) = init.beta;
    psi(q) = std::log(config.sigma_init);

    auto eval = [&](const Eigen::VectorXd& point, bool want_grad) {
        return glmm_detail::laplace_eval(fd, point.head(q), point(q), config, want_grad);
    };

    auto finish_logistic = [&](int iterations_used) {
        GlmmFit out;
        Eigen::VectorXd beta = init.beta;
        if (config.standardize) {
            for (Eigen::Index j = 1; j < q; ++j) beta(j) /= col_sd(j);
            for (Eigen::Index j = 1; j < q; ++j) beta(0) -= beta(j) * col_mean(j);
        }
        out.beta.assign(beta.data(), beta.data() + q);
        out.sigma_u = 0.0;
        for (const auto& code : fd.domain_codes) out.u_hat[code] = 0.0;
        out.loglik = init.loglik;
        out.converged = init.converged;
        out.iterations = iterations_used;
        out.indicator_name = data.indicator_names[indicator_index];
        return out;
    };

    glmm_detail::LaplaceEval cur = eval(psi, true);
    double f = -cur.loglik;
    Eigen::VectorXd g = -cur.grad;

    Eigen::MatrixXd Hinv = Eigen::MatrixXd::Identity(q + 1, q + 1);
    bool converged = false;
    int iterations = 0;
    bool first_update = true;

    auto grad_ok = [&](const Eigen::VectorXd& gv, double fv) {
        return gv.lpNorm<Eigen::Infinity>() <= config.outer_tol * std::max(1.0, std::abs(fv));
    };

    for (int it = 0; it < config.outer_max_iter; ++it) {
        iterations = it + 1;
        if (grad_ok(g, f)) {
            converged = true;
            break;
        }
        Eigen::VectorXd dir = -(Hinv * g);
        double slope = g.dot(dir);
        if (slope >= 0.0) { // reset on loss of descent
            Hinv.setIdentity();
            dir = -g;
            slope = g.dot(dir);
        }
        double t = 1.0;
        Eigen::VectorXd psi_new;
        glmm_detail::LaplaceEval ev_new;
        double f_new = f;
        bool accepted = false;
        for (int h = 0; h < 40; ++h) {
            psi_new = psi + t * dir;
            if (psi_new(q) < theta_floor) return finish_logistic(iterations + init.iterations);
            ev_new = eval(psi_new, true);
            f_new = -ev_new.loglik;
            if (std::isfinite(f_new) && f_new <= f + 1e-4 * t * slope) {
                accepted = true;
                break;
            }
            t *= 0.5;
        }
        if (!accepted) break; // best iterate stands; converged stays false

        glmm_detail::check_separation(psi_new.head(q), "mixed-model fit");

        const Eigen::VectorXd s = psi_new - psi;
        const Eigen::VectorXd g_new = -ev_new.grad;
        const Eigen::VectorXd yk = g_new - g;
        const double sy = s.dot(yk);
        if (sy > 1e-12 * s.norm() * yk.norm()) {
            if (first_update) {
                Hinv *= sy / yk.squaredNorm();
                first_update = false;
            }
            const Eigen::MatrixXd I = Eigen::MatrixXd::Identity(q + 1, q + 1);
            const double rho = 1.0 / sy;
            Hinv = (I - rho * s * yk.transpose()) * Hinv * (I - rho * yk * s.transpose()) +
                   rho * s * s.transpose();
        }
        psi = psi_new;
        f = f_new;
        g = g_new;
        cur = std::move(ev_new);
    }
    if (!converged) converged = grad_ok(g, f);

    GlmmFit out;
    Eigen::VectorXd beta = psi.head(q);
    if (config.standardize) {
        for (Eigen::Index j = 1; j < q; ++j) beta(j) /= col_sd(j);
        for (Eigen::Index j = 1; j < q; ++j) beta(0) -= beta(j) * col_mean(j);
    }
    out.beta.assign(beta.data(), beta.data() + q);
    out.sigma_u = std::exp(psi(q));
    for (std::size_t d = 0; d < fd.domain_codes.size(); ++d) out.u_hat[fd.domain_codes[d]] = cur.modes[d];
    out.loglik = cur.loglik;
    out.converged = converged;
    out.iterations = iterations + init.iterations;
    out.indicator_name = data.indicator_names[indicator_index];
    return out;
}

/// Plug-in predicted probability for a unit with the given covariates.
inline double predict_plugin(const GlmmFit& fit, std::span<const double> covariates,
                             const DomainId& domain) {
    if (covariates.size() + 1 != fit.beta.size())
        throw Error(errc::dimension_mismatch, "covariate length must be p");
    double eta = fit.beta[0];
    for (std::size_t j = 0; j < covariates.size(); ++j) eta += fit.beta[j + 1] * covariates[j];
    eta += fit.u_for(domain);
    return detail::expit(eta);
}

/// Plug-in predictor of the per-domain proportion: observed sample values
/// plus predicted probabilities for the non-sampled units. Sample and census
/// units are not linked record-to-record, so the out-of-sample sum uses the
/// census mean prediction scaled by N_d - n_d.
inline std::map<DomainId, double> plugin_proportion(const GlmmFit& fit, const Dataset& census,
                                                    const Dataset& survey, int indicator_index) {
    std::map<DomainId, double> out;
    for (const auto& [code, slot] : census.domain_index()) {
        const auto& rows = census.rows_in_domain(slot);
        const std::size_t population = rows.size();
        if (population == 0) throw Error(errc::unknown_domain, "census domain with zero units");
        double mean_pi = 0.0;
        for (const auto row : rows)
            mean_pi += predict_plugin(fit, census.covariate_row(row), code);
        mean_pi /= static_cast<double>(population);

        double sum_y = 0.0;
        std::size_t sampled = 0;
        const auto it = survey.domain_index().find(code);
        if (it != survey.domain_index().end()) {
            const auto& srows = survey.rows_in_domain(it->second);
            sampled = srows.size();
            for (const auto row : srows) {
                const std::int8_t v = survey.indicator(row, indicator_index);
                if (v == kMissing)
                    throw Error(errc::missing_indicator_value,
                                "survey indicator required by plugin_proportion is missing");
                sum_y += v;
            }
        }
        double value;
        if (sampled >= population) {
            value = sum_y / static_cast<double>(sampled);
        } else {
            value = (sum_y + static_cast<double>(population - sampled) * mean_pi) /
                    static_cast<double>(population);
        }
        out[code] = value;
    }
    return out;
}

/// Observed information of the Laplace objective at (beta, log sigma_u),
/// by central differences of the analytic gradient.
inline Eigen::MatrixXd observed_information(const Dataset& data, int indicator_index,
                                            std::span<const double> beta, double sigma_u,
                                            const FitConfig& config = {}, double h = 1e-5) {
    const std::size_t q = beta.size();
    Eigen::MatrixXd hess(q + 1, q + 1);
    std::vector<double> b(beta.begin(), beta.end());
    const double theta = std::log(sigma_u);
    auto grad_at = [&](const std::vector<double>& bb, double th) {
        return laplace_loglik_gradient(data, indicator_index, bb, std::exp(th), config);
    };
    for (std::size_t j = 0; j <= q; ++j) {
        std::vector<double> bp = b, bm = b;
        double tp = theta, tm = theta;
        if (j < q) {
            bp[j] += h;
            bm[j] -= h;
        } else {
            tp += h;
            tm -= h;
        }
        const auto gp = grad_at(bp, tp);
        const auto gm = grad_at(bm, tm);
        for (std::size_t i = 0; i <= q; ++i) hess(i, j) = -(gp[i] - gm[i]) / (2.0 * h);
    }
    // symmetrize
    return 0.5 * (hess + hess.transpose());
}

} // namespace mpsae
