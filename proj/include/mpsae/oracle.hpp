#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <vector>

#include <Eigen/Dense>

#include "mpsae/data.hpp"
#include "mpsae/error.hpp"
#include "mpsae/glmm.hpp"
#include "mpsae/indicator.hpp"

namespace mpsae {

/// One unit's poverty problem reduced to the quantities of the closed-form
/// derivations: each missing indicator carries weight alpha, the observed
/// indicators contribute k, and delta is the poverty threshold.
struct UnitPovertyProblem {
    double alpha = 0.0;
    double k = 0.0;
    double delta = 0.0;
    std::vector<double> pis;

    void validate() const {
        if (!(alpha > 0.0)) throw Error(errc::invalid_config, "alpha must be positive");
        if (!(k >= 0.0 && k <= 1.0)) throw Error(errc::invalid_config, "k must be in [0,1]");
        if (!(delta > 0.0 && delta < 1.0)) throw Error(errc::invalid_config, "delta must be in (0,1)");
        for (double pi : pis)
            if (!(pi >= 0.0 && pi <= 1.0))
                throw Error(errc::invalid_config, "probabilities must be in [0,1]");
    }
};

/// Probability the unit is classified poor with one missing indicator:
/// 1 if delta-k <= 0; pi if 0 < delta-k <= alpha; 0 otherwise.
inline double expected_poor_one_missing(const UnitPovertyProblem& p) {
    if (p.pis.size() != 1)
        throw Error(errc::wrong_arity, "one-missing closed form needs exactly one probability");
    p.validate();
    const double gap = p.delta - p.k;
    if (gap <= 0.0) return 1.0;
    if (gap <= p.alpha) return p.pis[0];
    return 0.0;
}

/// Two missing indicators, independent draws:
/// 1 if delta-k <= 0; 1-(1-pi1)(1-pi2) written out if 0 < delta-k <= alpha;
/// pi1*pi2 if alpha < delta-k <= 2*alpha; 0 otherwise.
inline double expected_poor_two_missing(const UnitPovertyProblem& p) {
    if (p.pis.size() != 2)
        throw Error(errc::wrong_arity, "two-missing closed form needs exactly two probabilities");
    p.validate();
    const double pi1 = p.pis[0], pi2 = p.pis[1];
    const double gap = p.delta - p.k;
    if (gap <= 0.0) return 1.0;
    if (gap <= p.alpha) return pi2 * (1.0 - pi1) + pi1 * (1.0 - pi2) + pi1 * pi2;
    if (gap <= 2.0 * p.alpha) return pi1 * pi2;
    return 0.0;
}

/// Exact E[H_d] per domain by summing each unit's 2^m outcome combinations
/// under independent Bernoulli draws. Scoring follows the estimator's
/// summation order so classifications agree bit for bit.
inline std::map<DomainId, double>
enumerate_expected_headcount(const Dataset& census, const std::map<int, std::vector<double>>& pihat,
                             const IndicatorSpec& spec) {
    spec.validate();
    const std::size_t m_count = spec.census_missing.size();
    std::vector<const std::vector<double>*> probs;
    for (int k : spec.census_missing) {
        const auto it = pihat.find(k);
        if (it == pihat.end() || it->second.size() != census.n())
            throw Error(errc::fit_missing, "pihat incomplete for census-missing indicator " +
                                               std::to_string(k + 1));
        probs.push_back(&it->second);
    }
    std::map<DomainId, double> out;
    for (const auto& [code, slot] : census.domain_index()) {
        const auto& rows = census.rows_in_domain(slot);
        if (rows.size() * m_count > 24)
            throw Error(errc::too_large_to_enumerate,
                        "domain " + code + " exceeds the enumeration bound");
        double total = 0.0;
        for (const auto row : rows) {
            double base = 0.0;
            for (int k = 0; k < spec.K; ++k) {
                if (spec.is_census_missing(k)) continue;
                const std::int8_t v = census.indicator(row, k);
                if (v == kMissing)
                    throw Error(errc::missing_indicator_value,
                                "census row is missing an observed indicator");
                base += spec.weights[k] * v;
            }
            double p_poor = 0.0;
            const std::uint32_t combos = 1u << m_count;
            for (std::uint32_t mask = 0; mask < combos; ++mask) {
                double q = base;
                double prob = 1.0;
                for (std::size_t m = 0; m < m_count; ++m) {
                    const double pi = (*probs[m])[row];
                    if (mask & (1u << m)) {
                        q += spec.weights[spec.census_missing[m]];
                        prob *= pi;
                    } else {
                        prob *= 1.0 - pi;
                    }
                }
                if (q > spec.z) p_poor += prob;
            }
            total += p_poor;
        }
        out[code] = total / static_cast<double>(rows.size());
    }
    return out;
}

/// Gauss-Hermite rule (physicists' weight e^{-t^2}) via the Golub-Welsch
/// eigendecomposition of the Jacobi matrix.
struct GhRule {
    std::vector<double> nodes;
    std::vector<double> log_weights;
};

inline GhRule gh_rule(int n) {
    if (n < 1) throw Error(errc::invalid_config, "quadrature needs at least one node");
    Eigen::MatrixXd jacobi = Eigen::MatrixXd::Zero(n, n);
    for (int i = 1; i < n; ++i) {
        const double b = std::sqrt(i / 2.0);
        jacobi(i, i - 1) = b;
        jacobi(i - 1, i) = b;
    }
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(jacobi);
    GhRule rule;
    rule.nodes.resize(n);
    rule.log_weights.resize(n);
    const double log_sqrt_pi = 0.5 * std::log(3.14159265358979323846);
    for (int i = 0; i < n; ++i) {
        rule.nodes[i] = eig.eigenvalues()(i);
        const double v0 = eig.eigenvectors()(0, i);
        rule.log_weights[i] = log_sqrt_pi + 2.0 * std::log(std::abs(v0));
    }
    return rule;
}

/// Marginal log-likelihood of the random-intercept logit model by adaptive
/// Gauss-Hermite quadrature, centered and scaled at each domain's inner
/// mode. The reference integrator the Laplace fit is checked against.
inline double gh_marginal_loglik(const Dataset& data, int indicator_index,
                                 std::span<const double> beta, double sigma_u, int nodes,
                                 const FitConfig& config = {}) {
    if (nodes < 5) throw Error(errc::invalid_config, "adaptive quadrature needs >= 5 nodes");
    if (!(sigma_u > 0.0)) throw Error(errc::invalid_config, "gh_marginal_loglik requires sigma_u > 0");
    const auto fd = glmm_detail::build_fit_data(data, indicator_index);
    if (static_cast<Eigen::Index>(beta.size()) != fd.X.cols())
        throw Error(errc::dimension_mismatch, "beta length must be p+1");
    const Eigen::VectorXd b = Eigen::Map<const Eigen::VectorXd>(beta.data(), beta.size());
    const Eigen::VectorXd eta0_all = fd.X * b;
    const GhRule rule = gh_rule(nodes);
    const double sigma2 = sigma_u * sigma_u;
    const double log_sigma = std::log(sigma_u);

    double total = 0.0;
    std::vector<double> eta0, yy, terms(nodes);
    for (std::size_t d = 0; d < fd.domain_rows.size(); ++d) {
        const auto& rows = fd.domain_rows[d];
        eta0.resize(rows.size());
        yy.resize(rows.size());
        for (std::size_t i = 0; i < rows.size(); ++i) {
            eta0[i] = eta0_all(rows[i]);
            yy[i] = fd.y(rows[i]);
        }
        const auto mode =
            glmm_detail::inner_mode_newton(eta0, yy, sigma2, config.inner_tol, config.inner_max_iter);
        const double scale = 1.0 / std::sqrt(mode.curvature);

        auto log_density = [&](double u) {
            double g = -0.5 * detail::kLogTwoPi - log_sigma - 0.5 * u * u / sigma2;
            for (std::size_t i = 0; i < eta0.size(); ++i) {
                const double eta = eta0[i] + u;
                g += yy[i] * eta - detail::log1pexp(eta);
            }
            return g;
        };

        double max_term = -std::numeric_limits<double>::infinity();
        for (int i = 0; i < nodes; ++i) {
            const double t = rule.nodes[i];
            const double u = mode.mode + std::sqrt(2.0) * scale * t;
            terms[i] = rule.log_weights[i] + t * t + log_density(u);
            max_term = std::max(max_term, terms[i]);
        }
        if (!std::isfinite(max_term))
            throw Error(errc::quadrature_underflow,
                        "all quadrature terms underflowed for a domain");
        double sum = 0.0;
        for (int i = 0; i < nodes; ++i) sum += std::exp(terms[i] - max_term);
        total += std::log(std::sqrt(2.0) * scale) + max_term + std::log(sum);
    }
    return total;
}

} // namespace mpsae
