#ifndef FALOHA_MARKOV_HPP
#define FALOHA_MARKOV_HPP

#include <cmath>
#include <string>
#include <string_view>
#include <vector>

#include <Eigen/Dense>

#include "core.hpp"
#include "sic_analysis.hpp"

namespace faloha {

/// Probability that a user generated at least one packet during d slots.
inline double activity_prob(double gamma, int d)
{
    if (gamma < 0.0 || gamma > 1.0 || d < 1)
        throw ConfigError("activity_prob: need gamma in [0,1] and d >= 1");
    return -std::expm1(d * std::log1p(-gamma));
}

/// Distribution of the number of active users after a contention of d slots.
inline ProbVector active_users_pmf(int users, double gamma, int d)
{
    return ProbVector(binomial_pmf(users, activity_prob(gamma, d)));
}

namespace detail {

// rows d = 1..dmax, columns n = 0..U
inline Eigen::MatrixXd users_given_len(const SystemConfig& cfg)
{
    Eigen::MatrixXd m(cfg.max_cp_len(), cfg.users() + 1);
    for (int d = 1; d <= cfg.max_cp_len(); ++d) {
        std::vector<double> pmf = binomial_pmf(cfg.users(), activity_prob(cfg.gen_prob(), d));
        for (int n = 0; n <= cfg.users(); ++n)
            m(d - 1, n) = pmf[n];
    }
    return m;
}

// rows n = 0..U, columns d = 1..dmax
inline Eigen::MatrixXd len_given_users(const ConditionalTables& t)
{
    Eigen::MatrixXd m(t.users + 1, t.max_cp_len);
    for (int n = 0; n <= t.users; ++n)
        for (int d = 1; d <= t.max_cp_len; ++d)
            m(n, d - 1) = t.p_cp_len(d, n);
    return m;
}

inline void check_tables(const SystemConfig& cfg, const ConditionalTables& t)
{
    if (t.users != cfg.users() || t.max_cp_len != cfg.max_cp_len() || t.tx_prob != cfg.tx_prob())
        throw ConfigError("conditional tables were built for a different (U, q, d_max)");
}

}  // namespace detail

/// Chain of contention lengths: p_D(i, j) = sum_n P{D=j|N=n} P{N=n|D'=i}.
inline StochasticMatrix cp_chain(const SystemConfig& cfg, const ConditionalTables& t)
{
    detail::check_tables(cfg, t);
    return StochasticMatrix(detail::users_given_len(cfg) * detail::len_given_users(t));
}

/// Chain of active-user counts: p_N(i, j) = sum_d P{N'=j|D=d} P{D=d|N=i}.
inline StochasticMatrix users_chain(const SystemConfig& cfg, const ConditionalTables& t)
{
    detail::check_tables(cfg, t);
    return StochasticMatrix(detail::len_given_users(t) * detail::users_given_len(cfg));
}

/// max_j |(pi P)_j - pi_j|
inline double stationary_residual(const StochasticMatrix& p, std::span<const double> pi)
{
    Eigen::Map<const Eigen::RowVectorXd> row(pi.data(), static_cast<Eigen::Index>(pi.size()));
    return (row * p.matrix() - row).cwiseAbs().maxCoeff();
}

inline constexpr double kStationaryTol = 1e-10;

/*
 * Stationary distribution from the balance equations pi (I - P) = 0 with the
 * last equation replaced by sum(pi) = 1, solved by fully pivoted LU.
 */
inline ProbVector stationary(const StochasticMatrix& p, std::string_view chain = "chain")
{
    const Eigen::Index k = p.size();
    Eigen::MatrixXd a = Eigen::MatrixXd::Identity(k, k) - p.matrix().transpose();
    a.row(k - 1).setOnes();
    Eigen::VectorXd b = Eigen::VectorXd::Zero(k);
    b(k - 1) = 1.0;

    Eigen::FullPivLU<Eigen::MatrixXd> lu(a);
    if (!lu.isInvertible())
        throw NumericalError(std::string(chain) + ": balance equations are singular");
    Eigen::VectorXd x = lu.solve(b);

    std::vector<double> pi(static_cast<std::size_t>(k));
    for (Eigen::Index i = 0; i < k; ++i) {
        if (!std::isfinite(x(i)) || x(i) < -1e-12)
            throw NumericalError(std::string(chain) + ": degenerate stationary solution");
        pi[static_cast<std::size_t>(i)] = std::max(0.0, x(i));
    }
    ProbVector out = normalize(pi);
    double res = stationary_residual(p, out.values());
    if (!(res < kStationaryTol))
        throw NumericalError(std::string(chain) + ": stationary residual " + format_double(res));
    return out;
}

struct ThroughputResult
{
    double throughput = 0.0;
    ProbVector pi_m;  // decoded users per contention, m = 0..U
};

/// Decoded packets per slot: E[M] / E[D] under the stationary laws.
inline ThroughputResult throughput(const SystemConfig& cfg, const ConditionalTables& t,
                                   const ProbVector& pi_n, const ProbVector& pi_d)
{
    detail::check_tables(cfg, t);
    std::vector<double> pm(static_cast<std::size_t>(cfg.users()) + 1, 0.0);
    double decoded = 0.0;
    for (int n = 0; n <= cfg.users(); ++n) {
        for (int m = 0; m <= n; ++m) {
            double w = t.p_decoded(m, n) * pi_n[n];
            pm[m] += w;
            decoded += m * w;
        }
    }
    double slots = pi_d.mean(1.0);
    return {decoded / slots, normalize(pm)};
}

struct StationaryResult
{
    ProbVector pi_d;  // index d-1
    ProbVector pi_n;
    ProbVector pi_m;
    double throughput = 0.0;
    double residual_d = 0.0;
    double residual_n = 0.0;

    double mean_active() const { return pi_n.mean(); }
    double mean_cp_len() const { return pi_d.mean(1.0); }
};

inline StationaryResult analyze_stationary(const SystemConfig& cfg, const ConditionalTables& t)
{
    StochasticMatrix pd = cp_chain(cfg, t);
    StochasticMatrix pn = users_chain(cfg, t);
    StationaryResult r;
    r.pi_d = stationary(pd, "contention-length chain");
    r.pi_n = stationary(pn, "active-user chain");
    r.residual_d = stationary_residual(pd, r.pi_d.values());
    r.residual_n = stationary_residual(pn, r.pi_n.values());
    ThroughputResult tr = throughput(cfg, t, r.pi_n, r.pi_d);
    r.throughput = tr.throughput;
    r.pi_m = std::move(tr.pi_m);
    return r;
}

}  // namespace faloha

#endif
