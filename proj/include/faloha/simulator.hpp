#ifndef FALOHA_SIMULATOR_HPP
#define FALOHA_SIMULATOR_HPP

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <random>
#include <vector>

#include <boost/math/distributions/students_t.hpp>

#include "core.hpp"
#include "sic_analysis.hpp"

namespace faloha {

/*
 * Transmission pattern of one contention: slots[d-1] lists the local user
 * ids (0..active-1) sending a replica in slot d. Slot 1 is implicit: every
 * active user sends in it, so slots[0] is ignored.
 */
struct ContentionPattern
{
    int active = 0;
    std::vector<std::vector<int>> slots;
};

struct ContentionOutcome
{
    int length = 1;
    std::vector<char> decoded;  // per local user id

    int decoded_count() const { return static_cast<int>(std::count(decoded.begin(), decoded.end(), 1)); }
};

/*
 * Runs the receiver over a pattern slot by slot: after each slot, SIC peels
 * every singleton and cancels the decoded user's replicas in all slots seen so
 * far, the first slot included. Replicas of users already decoded are
 * cancelled on arrival. The contention ends once the first slot is empty or
 * after max_len slots.
 */
class ContentionDecoder
{
public:
    ContentionOutcome run(const ContentionPattern& pat, int max_len)
    {
        const int n = pat.active;
        ContentionOutcome out;
        out.decoded.assign(n, 0);
        count_.assign(max_len, 0);
        idsum_.assign(max_len, 0);
        user_slots_.assign(n, {});
        queue_.clear();

        count_[0] = n;
        for (int u = 0; u < n; ++u) {
            idsum_[0] += u;
            user_slots_[u].push_back(0);
        }
        if (n == 1)
            queue_.push_back(0);
        peel(out);

        int d = 1;
        while (count_[0] > 0 && d < max_len) {
            ++d;
            const int slot = d - 1;
            if (slot < static_cast<int>(pat.slots.size())) {
                for (int u : pat.slots[slot]) {
                    if (u < 0 || u >= n)
                        throw ConfigError("contention pattern: user id out of range");
                    if (out.decoded[u])
                        continue;
                    ++count_[slot];
                    idsum_[slot] += u;
                    user_slots_[u].push_back(slot);
                }
            }
            if (count_[slot] == 1)
                queue_.push_back(slot);
            peel(out);
        }
        out.length = d;
        return out;
    }

private:
    void peel(ContentionOutcome& out)
    {
        while (!queue_.empty()) {
            int slot = queue_.back();
            queue_.pop_back();
            if (count_[slot] != 1)
                continue;
            const int u = static_cast<int>(idsum_[slot]);
            out.decoded[u] = 1;
            for (int t : user_slots_[u]) {
                --count_[t];
                idsum_[t] -= u;
                if (count_[t] == 1)
                    queue_.push_back(t);
                if (count_[t] < 0)
                    throw NumericalError("contention decoder: negative slot occupancy");
            }
            user_slots_[u].clear();
        }
    }

    std::vector<int> count_;
    std::vector<std::int64_t> idsum_;
    std::vector<std::vector<int>> user_slots_;
    std::vector<int> queue_;
};

inline ContentionOutcome run_contention(const ContentionPattern& pat, int max_len)
{
    ContentionDecoder dec;
    return dec.run(pat, max_len);
}

struct CpRecord
{
    int length = 1;
    int active = 0;
    int decoded = 0;
    std::vector<int> decoded_users;  // global user ids
    bool truncated = false;          // reached max_len with users left undecoded
};

/// Per-user schedules of slots 2..max_len, drawn by geometric skips.
template <typename Rng>
ContentionPattern draw_pattern(int active, double q, int max_len, Rng& rng)
{
    ContentionPattern pat;
    pat.active = active;
    pat.slots.assign(max_len, {});
    if (q >= 1.0) {
        for (int d = 2; d <= max_len; ++d)
            for (int u = 0; u < active; ++u)
                pat.slots[d - 1].push_back(u);
        return pat;
    }
    std::geometric_distribution<int> gap(q);
    for (int u = 0; u < active; ++u) {
        for (long long d = 2 + gap(rng); d <= max_len; d += 1 + gap(rng))
            pat.slots[static_cast<std::size_t>(d) - 1].push_back(u);
    }
    return pat;
}

/// One contention among the given users (global ids).
template <typename Rng>
CpRecord simulate_cp(const std::vector<int>& active, const SystemConfig& cfg, Rng& rng)
{
    ContentionPattern pat =
        draw_pattern(static_cast<int>(active.size()), cfg.tx_prob(), cfg.max_cp_len(), rng);
    ContentionOutcome o = run_contention(pat, cfg.max_cp_len());
    CpRecord rec;
    rec.length = o.length;
    rec.active = pat.active;
    for (int u = 0; u < pat.active; ++u)
        if (o.decoded[u])
            rec.decoded_users.push_back(active[u]);
    rec.decoded = static_cast<int>(rec.decoded_users.size());
    rec.truncated = rec.decoded < rec.active;
    if (rec.decoded > rec.active || (rec.active <= 1 && rec.length != 1) ||
        (rec.truncated && rec.length != cfg.max_cp_len()))
        throw NumericalError("simulate_cp: contention record violates its invariants");
    return rec;
}

/// Batch accumulators of a ratio estimator sum(num) / sum(den).
struct RatioBatches
{
    std::vector<double> num, den;

    explicit RatioBatches(int batches = 0) : num(batches, 0.0), den(batches, 0.0) {}

    double estimate() const
    {
        double a = 0.0, b = 0.0;
        for (std::size_t i = 0; i < num.size(); ++i) {
            a += num[i];
            b += den[i];
        }
        return b > 0.0 ? a / b : std::numeric_limits<double>::quiet_NaN();
    }

    /*
     * 95% half-width from the batch ratios by the delta method, with a
     * Student-t quantile on batches-1 degrees of freedom.
     */
    double half_width() const
    {
        const std::size_t k = num.size();
        if (k < 2)
            return std::numeric_limits<double>::quiet_NaN();
        const double r = estimate();
        double mean_den = 0.0;
        for (double b : den)
            mean_den += b;
        mean_den /= static_cast<double>(k);
        if (!(mean_den > 0.0) || !std::isfinite(r))
            return std::numeric_limits<double>::quiet_NaN();
        double ss = 0.0;
        for (std::size_t i = 0; i < k; ++i) {
            double z = num[i] - r * den[i];
            ss += z * z;
        }
        double se = std::sqrt(ss / (static_cast<double>(k) * (k - 1.0))) / mean_den;
        boost::math::students_t t(static_cast<double>(k - 1));
        return boost::math::quantile(boost::math::complement(t, 0.025)) * se;
    }

    void merge(const RatioBatches& o)
    {
        if (o.num.size() != num.size())
            throw ConfigError("RatioBatches: batch counts differ");
        for (std::size_t i = 0; i < num.size(); ++i) {
            num[i] += o.num[i];
            den[i] += o.den[i];
        }
    }
};

struct SimMetrics
{
    std::uint64_t seed = 0;
    long long cp_count = 0;
    RatioBatches throughput_batches;  // decoded packets / slots
    RatioBatches peak_batches;        // sum of peak AoI samples / sample count
    RatioBatches delta0_batches;      // sum of reset values under the same samples / sample count
    std::vector<double> hist_d;       // index d-1
    std::vector<double> hist_n;
    std::vector<double> hist_m;

    double throughput() const { return throughput_batches.estimate(); }
    double throughput_ci() const { return throughput_batches.half_width(); }
    double peak_aoi() const { return peak_batches.estimate(); }
    double peak_aoi_ci() const { return peak_batches.half_width(); }
    double e_delta0() const { return delta0_batches.estimate(); }
    double e_y() const { return peak_aoi() - e_delta0(); }
    double mean_active() const { return ProbVector(normalize(hist_n)).mean(); }
    ProbVector pi_d() const { return normalize(hist_d); }
    ProbVector pi_n() const { return normalize(hist_n); }
    ProbVector pi_m() const { return normalize(hist_m); }

    /// Adds the counts of another replication of the same configuration.
    void merge(const SimMetrics& o)
    {
        if (o.hist_d.size() != hist_d.size() || o.hist_n.size() != hist_n.size())
            throw ConfigError("SimMetrics: merging runs of different configurations");
        cp_count += o.cp_count;
        throughput_batches.merge(o.throughput_batches);
        peak_batches.merge(o.peak_batches);
        delta0_batches.merge(o.delta0_batches);
        for (std::size_t i = 0; i < hist_d.size(); ++i)
            hist_d[i] += o.hist_d[i];
        for (std::size_t i = 0; i < hist_n.size(); ++i) {
            hist_n[i] += o.hist_n[i];
            hist_m[i] += o.hist_m[i];
        }
    }
};

inline constexpr int kBatches = 30;

/*
 * Stream for replication `rep` of a run seeded with `seed`: a 64-bit
 * Mersenne twister seeded through seed_seq{seed low, seed high, rep}.
 */
inline std::mt19937_64 replication_stream(std::uint64_t seed, std::uint64_t rep)
{
    std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                      static_cast<std::uint32_t>(rep), static_cast<std::uint32_t>(rep >> 32)};
    return std::mt19937_64(seq);
}

/*
 * Back-to-back contentions with Bernoulli(gamma) arrivals per user and slot.
 * A user is active in a contention iff it generated during the previous one,
 * its final slot included. A decoded user's peak age is sampled as the
 * contention's end boundary minus the start of the contention of its previous
 * delivery. Metrics skip the first `warmup` contentions.
 */
inline SimMetrics simulate(const SystemConfig& cfg, std::uint64_t seed, long long num_cps,
                           long long warmup, std::uint64_t replication = 0)
{
    if (num_cps < 1)
        throw ConfigError("simulate: num_cps must be >= 1");
    if (warmup < 0)
        throw ConfigError("simulate: warmup must be >= 0");

    const int users = cfg.users();
    const double gamma = cfg.gen_prob();
    std::mt19937_64 rng = replication_stream(seed, replication);
    constexpr long long kNever = std::numeric_limits<long long>::max();
    std::geometric_distribution<long long> arrival_gap(gamma > 0.0 && gamma < 1.0 ? gamma : 0.5);
    auto next_arrival_from = [&](long long slot) -> long long {
        if (gamma <= 0.0)
            return kNever;
        if (gamma >= 1.0)
            return slot;
        return slot + arrival_gap(rng);
    };

    std::vector<long long> next_arrival(users);
    for (int u = 0; u < users; ++u)
        next_arrival[u] = next_arrival_from(0);
    std::vector<long long> last_start(users, -1);  // start slot of the last delivery's contention
    std::vector<int> last_len(users, 0);           // and its length
    std::vector<int> active;

    const int batches = static_cast<int>(std::min<long long>(kBatches, num_cps));
    SimMetrics m;
    m.seed = seed;
    m.throughput_batches = RatioBatches(batches);
    m.peak_batches = RatioBatches(batches);
    m.delta0_batches = RatioBatches(batches);
    m.hist_d.assign(cfg.max_cp_len(), 0.0);
    m.hist_n.assign(static_cast<std::size_t>(users) + 1, 0.0);
    m.hist_m.assign(static_cast<std::size_t>(users) + 1, 0.0);

    long long start = 0;
    std::vector<int> next_active;
    for (long long cp = 0; cp < warmup + num_cps; ++cp) {
        CpRecord rec = simulate_cp(active, cfg, rng);
        const long long end = start + rec.length;

        const bool measured = cp >= warmup;
        const int batch = measured ? static_cast<int>((cp - warmup) * batches / num_cps) : 0;
        for (int u : rec.decoded_users) {
            if (measured && last_start[u] >= 0) {
                m.peak_batches.num[batch] += static_cast<double>(end - last_start[u]);
                m.peak_batches.den[batch] += 1.0;
                m.delta0_batches.num[batch] += last_len[u];
                m.delta0_batches.den[batch] += 1.0;
            }
            last_start[u] = start;
            last_len[u] = rec.length;
        }
        if (measured) {
            ++m.cp_count;
            m.throughput_batches.num[batch] += rec.decoded;
            m.throughput_batches.den[batch] += rec.length;
            m.hist_d[rec.length - 1] += 1.0;
            m.hist_n[rec.active] += 1.0;
            m.hist_m[rec.decoded] += 1.0;
        }

        next_active.clear();
        for (int u = 0; u < users; ++u) {
            if (next_arrival[u] < end) {
                next_active.push_back(u);
                next_arrival[u] = next_arrival_from(end);
            }
        }
        active.swap(next_active);
        start = end;
    }
    return m;
}

/// Exact conditional laws of one contention with n active users, by enumeration.
struct OracleColumn
{
    std::vector<double> cp_len;   // index d-1
    std::vector<double> decoded;  // index m
    std::vector<double> beta;     // law of m given the contention reached max_len; empty if it never does
};

/*
 * Enumerates all 2^(n (max_len - 1)) transmission patterns of slots
 * 2..max_len, weighting each by q^tx (1-q)^silent, and runs each through the
 * same decoder as the simulator.
 */
inline OracleColumn oracle_enumerate(int n, double q, int max_len)
{
    if (n < 0 || n > 3 || max_len < 1 || max_len > 4)
        throw ConfigError("oracle_enumerate: needs 0 <= n <= 3 and 1 <= d_max <= 4");
    if (!(q > 0.0 && q <= 1.0))
        throw ConfigError("oracle_enumerate: q must lie in (0, 1]");

    const int bits = n * (max_len - 1);
    OracleColumn col;
    col.cp_len.assign(max_len, 0.0);
    col.decoded.assign(static_cast<std::size_t>(n) + 1, 0.0);
    std::vector<double> at_max(static_cast<std::size_t>(n) + 1, 0.0);
    ContentionDecoder dec;
    ContentionPattern pat;
    pat.active = n;
    for (std::uint32_t mask = 0; mask < (1u << bits); ++mask) {
        pat.slots.assign(max_len, {});
        int tx = 0;
        for (int b = 0; b < bits; ++b) {
            if (mask >> b & 1u) {
                pat.slots[1 + b / n].push_back(b % n);
                ++tx;
            }
        }
        const double p = std::pow(q, tx) * std::pow(1.0 - q, bits - tx);
        if (p == 0.0)
            continue;
        ContentionOutcome o = dec.run(pat, max_len);
        const int m = o.decoded_count();
        col.cp_len[o.length - 1] += p;
        col.decoded[m] += p;
        if (o.length == max_len)
            at_max[m] += p;
    }
    double total = 0.0;
    for (double x : at_max)
        total += x;
    if (total > 0.0) {
        for (double& x : at_max)
            x /= total;
        col.beta = std::move(at_max);
    }
    return col;
}

}  // namespace faloha

#endif
