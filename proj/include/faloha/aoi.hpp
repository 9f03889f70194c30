#ifndef FALOHA_AOI_HPP
#define FALOHA_AOI_HPP

#include <cmath>
#include <limits>
#include <optional>
#include <queue>
#include <vector>

#include <Eigen/Dense>

#include "core.hpp"
#include "markov.hpp"
#include "sic_analysis.hpp"

namespace faloha {

/*
 * Probability that a tagged user delivers an update in a contention of d
 * slots with n active users. Before d_max everyone active is decoded; at
 * d_max the tagged user is one of the m decoded with probability m/U.
 */
inline double update_prob(int n, int d, const SystemConfig& cfg, const ConditionalTables& t)
{
    if (n < 0 || n > cfg.users() || d < 1 || d > cfg.max_cp_len())
        throw ConfigError("update_prob: (n, d) out of range");
    const double users = cfg.users();
    if (d < cfg.max_cp_len())
        return n / users;
    return t.mean_decoded_at_max(n) / users;
}

/*
 * Ancillary chain Z = (contention length, tagged-user success). States are
 * ordered (1,0), (1,1), (2,0), ...; the next state does not depend on the
 * success bit, so both rows of a length share their values.
 */
struct ZChain
{
    int max_cp_len = 0;
    Eigen::MatrixXd fail;     // fail(j-1, d-1) = p_Z((j,.), (d,0))
    Eigen::MatrixXd succeed;  // succeed(j-1, d-1) = p_Z((j,.), (d,1))
    StochasticMatrix transition;
    ProbVector stationary;
    double residual = 0.0;

    static Eigen::Index index(int d, int s) { return 2 * (d - 1) + s; }
    double pi(int d, int s) const { return stationary[static_cast<std::size_t>(index(d, s))]; }
};

inline ZChain build_z_chain(const SystemConfig& cfg, const ConditionalTables& t)
{
    detail::check_tables(cfg, t);
    if (cfg.gen_prob() == 0.0)
        throw ConfigError("Z chain: gamma = 0 leaves success states unreachable; peak AoI undefined");

    const int dmax = cfg.max_cp_len();
    Eigen::MatrixXd n_given_len = detail::users_given_len(cfg);
    Eigen::MatrixXd w_fail(cfg.users() + 1, dmax), w_succ(cfg.users() + 1, dmax);
    for (int n = 0; n <= cfg.users(); ++n) {
        for (int d = 1; d <= dmax; ++d) {
            double nu = update_prob(n, d, cfg, t);
            double pd = t.p_cp_len(d, n);
            w_succ(n, d - 1) = nu * pd;
            w_fail(n, d - 1) = (1.0 - nu) * pd;
        }
    }

    ZChain z;
    z.max_cp_len = dmax;
    z.fail = n_given_len * w_fail;
    z.succeed = n_given_len * w_succ;

    Eigen::MatrixXd full(2 * dmax, 2 * dmax);
    for (int j = 1; j <= dmax; ++j) {
        for (int s = 0; s <= 1; ++s) {
            for (int d = 1; d <= dmax; ++d) {
                full(ZChain::index(j, s), ZChain::index(d, 0)) = z.fail(j - 1, d - 1);
                full(ZChain::index(j, s), ZChain::index(d, 1)) = z.succeed(j - 1, d - 1);
            }
        }
    }
    z.transition = StochasticMatrix(std::move(full));
    z.stationary = stationary(z.transition, "Z chain");
    z.residual = stationary_residual(z.transition, z.stationary.values());
    return z;
}

/// Law of the contention length in which the previous update was delivered; index delta0-1.
inline ProbVector delta0_pmf(const ZChain& z)
{
    std::vector<double> w(static_cast<std::size_t>(z.max_cp_len));
    for (int d = 1; d <= z.max_cp_len; ++d)
        w[d - 1] = z.pi(d, 1);
    double total = 0.0;
    for (double x : w)
        total += x;
    if (!(total > 0.0))
        throw NumericalError("delta0_pmf: no stationary mass on success states");
    return normalize(w);
}

struct InterUpdateResult
{
    double e_y = 0.0;
    std::vector<double> given_fail_start;  // E[Y | Z1 = (d,0)], index d-1
    std::vector<double> given_delta0;      // E[Y | Delta0 = d], index d-1
    double residual = 0.0;                 // normwise relative backward error of the solve
};

inline constexpr double kFirstStepTol = 1e-9;

/*
 * Expected inter-update time by first-step analysis on Z with the success
 * states absorbing and cost d per visited state (d, s):
 *   x_d = d + sum_d' [ p_Z((d,0),(d',0)) x_d' + p_Z((d,0),(d',1)) d' ].
 * The success bit does not influence transitions, so the solve runs on d_max
 * unknowns. Diagonal entries of I - P00 are formed as the sum of the other
 * outgoing probabilities to avoid cancellation when successes are rare.
 */
inline InterUpdateResult expected_inter_update(const SystemConfig& cfg, const ZChain& z,
                                               const ProbVector& delta0)
{
    const int dmax = cfg.max_cp_len();
    if (z.max_cp_len != dmax || static_cast<int>(delta0.size()) != dmax)
        throw ConfigError("expected_inter_update: size mismatch");

    // every state must be able to reach a success, else the system is singular
    std::vector<char> reaches(dmax, 0);
    std::queue<int> frontier;
    for (int d = 0; d < dmax; ++d) {
        if (z.succeed.row(d).sum() > 0.0) {
            reaches[d] = 1;
            frontier.push(d);
        }
    }
    while (!frontier.empty()) {
        int to = frontier.front();
        frontier.pop();
        for (int from = 0; from < dmax; ++from) {
            if (!reaches[from] && z.fail(from, to) > 0.0) {
                reaches[from] = 1;
                frontier.push(from);
            }
        }
    }
    for (int d = 0; d < dmax; ++d)
        if (!reaches[d])
            throw NumericalError("first-step system singular: no update is ever delivered after a "
                                 "contention of " + std::to_string(d + 1) + " slots");

    Eigen::MatrixXd a = -z.fail;
    Eigen::VectorXd b(dmax);
    for (int d = 0; d < dmax; ++d) {
        double out = z.succeed.row(d).sum() + z.fail.row(d).sum() - z.fail(d, d);
        a(d, d) = out;
        double cost = d + 1.0;
        for (int e = 0; e < dmax; ++e)
            cost += (e + 1.0) * z.succeed(d, e);
        b(d) = cost;
    }

    Eigen::VectorXd x = a.partialPivLu().solve(b);
    double scale = a.cwiseAbs().rowwise().sum().maxCoeff() * x.cwiseAbs().maxCoeff() +
                   b.cwiseAbs().maxCoeff();
    InterUpdateResult r;
    r.residual = (a * x - b).cwiseAbs().maxCoeff() / scale;
    if (!x.allFinite() || !(r.residual < kFirstStepTol))
        throw NumericalError("first-step system: residual " + format_double(r.residual));

    r.given_fail_start.assign(x.data(), x.data() + dmax);
    r.given_delta0.assign(static_cast<std::size_t>(dmax), 0.0);
    for (int d0 = 0; d0 < dmax; ++d0) {
        double e = 0.0;
        for (int d = 0; d < dmax; ++d)
            e += z.fail(d0, d) * x(d) + z.succeed(d0, d) * (d + 1.0);
        r.given_delta0[d0] = e;
        r.e_y += delta0[d0] * e;
    }
    return r;
}

struct AoiResult
{
    ProbVector delta0_pmf;
    double e_delta0 = 0.0;
    double e_y = 0.0;
    double peak_aoi = 0.0;
    double z_residual = 0.0;
    double first_step_residual = 0.0;
};

/// Average peak AoI = E[Delta0] + E[Y].
inline AoiResult avg_peak_aoi(const SystemConfig& cfg, const ConditionalTables& t)
{
    ZChain z = build_z_chain(cfg, t);
    AoiResult r;
    r.delta0_pmf = delta0_pmf(z);
    r.e_delta0 = r.delta0_pmf.mean(1.0);
    if (!(r.e_delta0 >= 1.0 - 1e-12))
        throw NumericalError("E[Delta0] below one slot");
    InterUpdateResult y = expected_inter_update(cfg, z, r.delta0_pmf);
    r.e_y = y.e_y;
    r.peak_aoi = r.e_delta0 + r.e_y;
    r.z_residual = z.residual;
    r.first_step_residual = y.residual;
    return r;
}

inline AoiResult avg_peak_aoi(const SystemConfig& cfg)
{
    return avg_peak_aoi(cfg, build_conditional_tables(cfg));
}

/// Throughput and peak AoI of one operating point.
struct PointAnalysis
{
    SystemConfig cfg;
    StationaryResult stationary;
    std::optional<AoiResult> aoi;  // absent when gamma = 0

    double peak_aoi() const
    {
        return aoi ? aoi->peak_aoi : std::numeric_limits<double>::quiet_NaN();
    }
};

inline PointAnalysis evaluate_point(const SystemConfig& cfg, const ConditionalTables& t)
{
    PointAnalysis p{cfg, analyze_stationary(cfg, t), std::nullopt};
    if (cfg.gen_prob() > 0.0)
        p.aoi = avg_peak_aoi(cfg, t);
    return p;
}

}  // namespace faloha

#endif
