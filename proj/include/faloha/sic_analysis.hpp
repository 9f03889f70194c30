#ifndef FALOHA_SIC_ANALYSIS_HPP
#define FALOHA_SIC_ANALYSIS_HPP

#include <algorithm>
#include <cmath>
#include <compare>
#include <cstddef>
#include <limits>
#include <map>
#include <memory>
#include <mutex>
#include <string>
#include <tuple>
#include <vector>

#include "core.hpp"

namespace faloha {

/*
 * Finite-state description of successive interference cancellation inside
 * one contention period. A state is (unresolved users, collided slots other
 * than the first one, singleton slots).
 */
struct DecoderState
{
    int unresolved = 0;
    int collided = 0;
    int singletons = 0;

    auto operator<=>(const DecoderState&) const = default;
};

inline std::string to_string(const DecoderState& st)
{
    return "(" + std::to_string(st.unresolved) + "," + std::to_string(st.collided) + "," +
           std::to_string(st.singletons) + ")";
}

/// Sparse probability mass over decoder states.
class StateDistribution
{
public:
    using Map = std::map<DecoderState, double>;

    StateDistribution() = default;
    StateDistribution(std::initializer_list<Map::value_type> init) : mass_(init) {}

    void add(const DecoderState& st, double p)
    {
        if (p != 0.0)
            mass_[st] += p;
    }

    double at(const DecoderState& st) const
    {
        auto it = mass_.find(st);
        return it == mass_.end() ? 0.0 : it->second;
    }

    double total() const
    {
        double t = 0.0;
        for (const auto& [st, p] : mass_)
            t += p;
        return t;
    }

    void erase(const DecoderState& st) { mass_.erase(st); }
    bool empty() const { return mass_.empty(); }
    std::size_t size() const { return mass_.size(); }
    const Map& entries() const { return mass_; }
    auto begin() const { return mass_.begin(); }
    auto end() const { return mass_.end(); }

    /// Scales every mass; used when mixing distributions.
    StateDistribution scaled(double w) const
    {
        StateDistribution out;
        for (const auto& [st, p] : mass_)
            out.add(st, p * w);
        return out;
    }

    void merge(const StateDistribution& other)
    {
        for (const auto& [st, p] : other.mass_)
            add(st, p);
    }

private:
    Map mass_;
};

/// State right after the first slot, where every active user transmits.
inline DecoderState init_state(int n, int users)
{
    if (n < 0 || n > users)
        throw ConfigError("init_state: active count " + std::to_string(n) + " outside [0, " +
                          std::to_string(users) + "]");
    if (n == 0)
        return {0, 0, 0};
    if (n == 1)
        return {1, 0, 1};
    return {n, 0, 0};
}

/*
 * Probability that a collided slot turns into a singleton when one specific
 * unresolved user is removed, given s unresolved out of n active users and
 * per-slot access probability q. Slot degrees are Binomial(n, q) with uniform
 * neighbours; the numerator counts slots with exactly two unresolved
 * neighbours one of which is the removed user, the denominator slots with at
 * least two unresolved neighbours. The denominator is summed from its
 * nonnegative terms instead of as one minus two sums.
 */
inline double h_unresolved(int s, int n, double q)
{
    if (n < 1 || s < 1 || s > n)
        throw ConfigError("h_unresolved: need 1 <= s <= n, got s=" + std::to_string(s) +
                          ", n=" + std::to_string(n));
    if (s < 2)
        return 0.0;

    std::vector<double> lambda = binomial_pmf(n, q);
    double num = 0.0;
    for (int k = 2; k <= n - s + 2; ++k) {
        double kk = static_cast<double>(k);
        double ratio = std::exp(log_choose(n - s, k - 2) - log_choose(n - 2, k - 2));
        num += lambda[k] * kk * (kk - 1.0) / n * (s - 1.0) / (n - 1.0) * ratio;
    }

    double den = 0.0;
    for (int k = 2; k <= n; ++k) {
        if (lambda[k] == 0.0)
            continue;
        double at_least_two = 0.0;
        for (int t = std::max(2, k - (n - s)); t <= std::min(k, s); ++t)
            at_least_two +=
                std::exp(log_choose(s, t) + log_choose(n - s, k - t) - log_choose(n, k));
        den += lambda[k] * at_least_two;
    }

    if (!(den > 1e-300))
        throw NumericalError("h_unresolved: vanishing denominator for s=" + std::to_string(s) +
                             ", n=" + std::to_string(n));
    double h = num / den;
    if (h > 1.0) {
        if (h > 1.0 + 1e-12)
            throw NumericalError("h_unresolved: ratio exceeds one: " + format_double(h));
        h = 1.0;
    }
    return h;
}

/// Outcome of the first SIC iteration applied to a state with s >= 1 and r >= 1.
inline StateDistribution resolve_one_user(const DecoderState& st, int n, double q)
{
    const int s = st.unresolved, c = st.collided, r = st.singletons;
    if (s < 1 || r < 1)
        throw ConfigError("resolve_one_user: no resolvable user in state " + to_string(st));

    const double h = c > 0 ? h_unresolved(s, n, q) : 0.0;
    const std::vector<double> released = binomial_pmf(c, h);
    // i-1 of the other r-1 singletons carry the resolved user
    const std::vector<double> same_user = binomial_pmf(r - 1, 1.0 / s);

    StateDistribution out;
    for (int a = 0; a <= 1; ++a) {
        bool first_slot_term = (s != 2 && a == 0) || (s == 2 && a == 1);
        if (!first_slot_term)
            continue;
        for (int j = 0; j <= c; ++j) {
            for (int i = 1; i <= r; ++i) {
                if (i - j - a > r)
                    continue;
                double p = released[j] * same_user[i - 1];
                out.add({s - 1, c - j, r - i + j + a}, p);
            }
        }
    }
    return out;
}

/*
 * Runs SIC to a stall: mass on states with r >= 1 and s >= 1 is pushed
 * through resolve_one_user until it sits on r = 0 or s = 0. States with s = 0
 * collapse onto (0,0,0).
 */
inline StateDistribution decode_until_stall(const StateDistribution& dist, int n, double q)
{
    StateDistribution pending;
    int max_s = 0, max_cr = 0;
    for (const auto& [st, p] : dist) {
        pending.add(st, p);
        max_s = std::max(max_s, st.unresolved);
        max_cr = std::max(max_cr, st.collided + st.singletons);
    }
    const long long budget = 64LL * (max_s + 1) * (max_cr + 2) * (max_cr + 2);

    StateDistribution out;
    long long iterations = 0;
    auto map = pending.entries();
    while (!map.empty()) {
        if (++iterations > budget)
            throw NumericalError("decode_until_stall: worklist did not drain");
        auto it = std::prev(map.end());
        DecoderState st = it->first;
        double p = it->second;
        map.erase(it);
        if (st.unresolved == 0) {
            out.add({0, 0, 0}, p);
        } else if (st.singletons == 0) {
            out.add(st, p);
        } else {
            for (const auto& [next, w] : resolve_one_user(st, n, q))
                map[next] += p * w;
        }
    }
    return out;
}

/// Probabilities that a new slot holds zero, one, or several of s unresolved users.
struct SlotOutcome
{
    double idle;
    double singleton;
    double collision;
};

inline SlotOutcome slot_outcome(int s, double q)
{
    std::vector<double> pmf = binomial_pmf(s, q);
    SlotOutcome out{pmf[0], s >= 1 ? pmf[1] : 0.0, 0.0};
    for (int t = 2; t <= s; ++t)
        out.collision += pmf[t];
    return out;
}

/// Pre-decoding state after one more slot is observed from post-decoding state (s, c, 0).
inline StateDistribution add_slot(const DecoderState& st, double q)
{
    if (st.singletons != 0)
        throw ConfigError("add_slot: state " + to_string(st) + " is not post-decoding (r != 0)");
    if (st.unresolved < 1)
        throw ConfigError("add_slot: state " + to_string(st) + " has no unresolved user");
    const int s = st.unresolved, c = st.collided;
    SlotOutcome o = slot_outcome(s, q);
    StateDistribution out;
    out.add({s, c, 0}, o.idle);
    out.add({s, c, 1}, o.singleton);
    out.add({s, c + 1, 0}, o.collision);
    return out;
}

/*
 * Per-active-count conditional distributions for one contention period:
 *   cp_len[n][d-1] = P{D = d | N = n},   d = 1..d_max
 *   decoded[n][m]  = P{M = m | N = n},   m = 0..n
 *   beta[n][m]     = P{M = m | N = n, D = d_max}
 * beta[n] is empty when a contention with n users never reaches d_max.
 */
struct ConditionalTables
{
    int users = 0;
    int max_cp_len = 0;
    double tx_prob = 0.0;
    std::vector<std::vector<double>> cp_len;
    std::vector<std::vector<double>> decoded;
    std::vector<std::vector<double>> beta;
    std::vector<double> pruned_mass;

    double p_cp_len(int d, int n) const
    {
        if (d < 1 || d > max_cp_len)
            return 0.0;
        return cp_len[n][d - 1];
    }
    double p_decoded(int m, int n) const
    {
        if (m < 0 || m > n)
            return 0.0;
        return decoded[n][m];
    }
    double p_beta(int m, int n) const
    {
        if (m < 0 || m > n || beta[n].empty())
            return 0.0;
        return beta[n][m];
    }
    bool has_beta(int n) const { return !beta[n].empty(); }

    double mean_decoded(int n) const
    {
        double e = 0.0;
        for (int m = 0; m <= n; ++m)
            e += m * decoded[n][m];
        return e;
    }
    double mean_decoded_at_max(int n) const
    {
        double e = 0.0;
        if (!beta[n].empty())
            for (int m = 0; m <= n; ++m)
                e += m * beta[n][m];
        return e;
    }
    double max_pruned_mass() const
    {
        return pruned_mass.empty() ? 0.0 : *std::max_element(pruned_mass.begin(), pruned_mass.end());
    }
};

/// Mass bookkeeping of one active-count column, collected slot by slot.
struct ColumnTrace
{
    std::vector<double> terminated;                  // [d-1]: mass reaching (0,0,0) at slot d
    std::map<int, std::vector<double>> residual;     // d -> mass by unresolved count s at slot d
    double pruned = 0.0;
};

namespace detail {

inline ConditionalTables assemble_tables(int users, double q, int dmax,
                                         const std::vector<ColumnTrace>& traces)
{
    ConditionalTables t;
    t.users = users;
    t.max_cp_len = dmax;
    t.tx_prob = q;
    t.cp_len.assign(users + 1, std::vector<double>(dmax, 0.0));
    t.decoded.resize(users + 1);
    t.beta.resize(users + 1);
    t.pruned_mass.assign(users + 1, 0.0);

    for (int n = 0; n <= users; ++n) {
        const ColumnTrace& tr = traces[n];
        t.pruned_mass[n] = tr.pruned;
        auto& len = t.cp_len[n];
        auto& dec = t.decoded[n];
        dec.assign(n + 1, 0.0);

        double early = 0.0;
        for (int d = 1; d < dmax; ++d) {
            len[d - 1] = tr.terminated[d - 1];
            early += len[d - 1];
        }
        len[dmax - 1] = std::max(0.0, 1.0 - early);

        const std::vector<double>& res = tr.residual.at(dmax);
        double at_max = tr.terminated[dmax - 1];
        double undecoded_mass = 0.0;
        for (int s = 1; s <= n; ++s) {
            dec[n - s] = res[s];
            undecoded_mass += res[s];
            at_max += res[s];
        }
        dec[n] = std::max(0.0, 1.0 - undecoded_mass);

        if (at_max > 0.0) {
            auto& b = t.beta[n];
            b.assign(n + 1, 0.0);
            for (int s = 1; s <= n; ++s)
                b[n - s] = res[s] / at_max;
            b[n] = tr.terminated[dmax - 1] / at_max;
        }
    }
    return t;
}

inline void check_dmax_list(int users, double q, const std::vector<int>& dmax_list)
{
    if (dmax_list.empty())
        throw ConfigError("conditional tables: empty d_max list");
    for (int d : dmax_list)
        SystemConfig(users, q, 0.0, d);
}

}  // namespace detail

/*
 * Spec-literal construction on sparse state maps: init_state, then slot by
 * slot add_slot and decode_until_stall, harvesting (0,0,0) before the next
 * slot. Exact, but only practical for small n and d_max.
 */
inline ConditionalTables build_tables_by_state_map(const SystemConfig& cfg)
{
    const int users = cfg.users(), dmax = cfg.max_cp_len();
    const double q = cfg.tx_prob();
    std::vector<ColumnTrace> traces(users + 1);
    for (int n = 0; n <= users; ++n) {
        ColumnTrace& tr = traces[n];
        tr.terminated.assign(dmax, 0.0);
        StateDistribution dist;
        dist.add(init_state(n, users), 1.0);
        for (int d = 1; d <= dmax; ++d) {
            if (d > 1) {
                StateDistribution next;
                for (const auto& [st, p] : dist)
                    next.merge(add_slot(st, q).scaled(p));
                dist = std::move(next);
            }
            dist = decode_until_stall(dist, std::max(n, 1), q);
            tr.terminated[d - 1] = dist.at({0, 0, 0});
            dist.erase({0, 0, 0});
            if (d == dmax) {
                std::vector<double> res(n + 1, 0.0);
                for (const auto& [st, p] : dist)
                    res[st.unresolved] += p;
                tr.residual[d] = std::move(res);
            }
        }
    }
    return detail::assemble_tables(users, q, dmax, traces);
}

struct TableOptions
{
    /*
     * Entries of the level arrays below this absolute mass are dropped and
     * accounted for in ConditionalTables::pruned_mass. Zero keeps every
     * representable entry.
     */
    double prune_below = 1e-22;
};

namespace detail {

/*
 * Row-wise binomial tables for a fixed success probability, rows
 * 0..max_trials, with the mode and prefix/suffix sums of every row so that
 * a caller can restrict a row to the entries that matter for a given weight
 * and account for the rest exactly.
 */
class BinomialRows
{
public:
    BinomialRows() = default;

    BinomialRows(int max_trials, double p)
        : offset_(static_cast<std::size_t>(max_trials) + 2, 0),
          mode_(static_cast<std::size_t>(max_trials) + 1, 0)
    {
        for (int m = 0; m <= max_trials; ++m)
            offset_[m + 1] = offset_[m] + static_cast<std::size_t>(m) + 1;
        pmf_.assign(offset_.back(), 0.0);
        below_.assign(offset_.back(), 0.0);
        above_.assign(offset_.back(), 0.0);

        // Pascal recurrence keeps every row normalized up to rounding
        pmf_[0] = 1.0;
        for (int m = 1; m <= max_trials; ++m) {
            const double* prev = &pmf_[offset_[m - 1]];
            double* row = &pmf_[offset_[m]];
            for (int k = 0; k <= m; ++k) {
                double v = 0.0;
                if (k < m)
                    v += prev[k] * (1.0 - p);
                if (k > 0)
                    v += prev[k - 1] * p;
                row[k] = v;
            }
        }
        for (int m = 0; m <= max_trials; ++m) {
            const double* row = &pmf_[offset_[m]];
            double* lo = &below_[offset_[m]];
            double* hi = &above_[offset_[m]];
            for (int k = 1; k <= m; ++k)
                lo[k] = lo[k - 1] + row[k - 1];
            for (int k = m - 1; k >= 0; --k)
                hi[k] = hi[k + 1] + row[k + 1];
            mode_[m] = static_cast<int>(std::max_element(row, row + m + 1) - row);
        }
    }

    const double* row(int m) const { return &pmf_[offset_[m]]; }

    /*
     * Index range [lo, hi] of row m where weight * pmf >= floor, and the
     * probability outside it. An empty range (lo > hi) means the whole row
     * falls below the floor.
     */
    void significant(int m, double weight, double floor, int& lo, int& hi, double& outside) const
    {
        const double* r = row(m);
        const int md = mode_[m];
        if (floor <= 0.0) {
            lo = 0;
            hi = m;
            outside = 0.0;
            return;
        }
        if (weight * r[md] < floor) {
            lo = 1;
            hi = 0;
            outside = 1.0;
            return;
        }
        lo = md;
        while (lo > 0 && weight * r[lo - 1] >= floor)
            --lo;
        hi = md;
        while (hi < m && weight * r[hi + 1] >= floor)
            ++hi;
        outside = below_[offset_[m] + lo] + above_[offset_[m] + hi];
    }

private:
    std::vector<std::size_t> offset_;
    std::vector<int> mode_;
    std::vector<double> pmf_, below_, above_;
};

/*
 * Grid of cells, each holding a mass vector over the starting active count n.
 * Every cell keeps the range [lo, hi] outside which its vector is zero, and
 * the grid remembers which cells are in use so clearing is proportional to
 * the occupied part.
 */
class ColumnGrid
{
public:
    ColumnGrid(int cells, int vlen)
        : vlen_(vlen),
          data_(static_cast<std::size_t>(cells) * vlen, 0.0),
          lo_(cells, vlen),
          hi_(cells, -1)
    {
    }

    const std::vector<int>& used() const { return used_; }
    int lo(int cell) const { return lo_[cell]; }
    int hi(int cell) const { return hi_[cell]; }
    const double* vec(int cell) const { return &data_[static_cast<std::size_t>(cell) * vlen_]; }

    /// cell[n] += a * src[n] for n in [lo, hi]
    void axpy(int cell, const double* src, int lo, int hi, double a)
    {
        if (lo_[cell] > hi_[cell])
            used_.push_back(cell);
        lo_[cell] = std::min(lo_[cell], lo);
        hi_[cell] = std::max(hi_[cell], hi);
        double* dst = &data_[static_cast<std::size_t>(cell) * vlen_];
        for (int n = lo; n <= hi; ++n)
            dst[n] += a * src[n];
    }

    /// Zeroes entries below floor at both ends of the range, adding them to sink.
    void trim(int cell, double floor, std::vector<double>& sink)
    {
        double* v = &data_[static_cast<std::size_t>(cell) * vlen_];
        int& lo = lo_[cell];
        int& hi = hi_[cell];
        while (lo <= hi && v[lo] < floor) {
            sink[lo] += v[lo];
            v[lo++] = 0.0;
        }
        while (hi >= lo && v[hi] < floor) {
            sink[hi] += v[hi];
            v[hi--] = 0.0;
        }
    }

    double peak(int cell) const
    {
        const double* v = vec(cell);
        double m = 0.0;
        for (int n = lo_[cell]; n <= hi_[cell]; ++n)
            m = std::max(m, v[n]);
        return m;
    }

    void clear()
    {
        for (int cell : used_) {
            double* v = &data_[static_cast<std::size_t>(cell) * vlen_];
            std::fill(v + lo_[cell], v + hi_[cell] + 1, 0.0);
            lo_[cell] = vlen_;
            hi_[cell] = -1;
        }
        used_.clear();
    }

    void swap(ColumnGrid& other) noexcept
    {
        std::swap(vlen_, other.vlen_);
        data_.swap(other.data_);
        lo_.swap(other.lo_);
        hi_.swap(other.hi_);
        used_.swap(other.used_);
    }

private:
    int vlen_;
    std::vector<double> data_;
    std::vector<int> lo_, hi_;
    std::vector<int> used_;
};

/*
 * Slot-by-slot evolution of every active-count column at once. The dynamics
 * depend on the unresolved count only, so each state cell carries a vector
 * over the starting count n. Post-decoding mass lives on (s, c) with s >= 2;
 * a new singleton slot starts a cascade that is processed one unresolved
 * level at a time on (c, r) cells. A level-s step draws the surviving other
 * singletons as Binomial(r-1, 1-1/s) and the released collided slots as
 * Binomial(c, h_s). Reaching two unresolved users with a singleton left means
 * the first slot becomes a singleton as well, so the whole contention is
 * decoded.
 */
class ColumnEvolver
{
public:
    struct LevelKernel
    {
        SlotOutcome slot{};
        BinomialRows survivors;  // Bin(r-1, 1-1/s)
        BinomialRows released;   // Bin(c, h_s)
    };

    ColumnEvolver(int users, double q, int dmax, double prune)
        : users_(users), dmax_(dmax), prune_(prune), kernels_(users + 1)
    {
        for (int s = 1; s <= users; ++s) {
            kernels_[s].slot = slot_outcome(s, q);
            if (s >= 3) {
                kernels_[s].survivors = BinomialRows(dmax, 1.0 - 1.0 / s);
                kernels_[s].released = BinomialRows(dmax, h_unresolved(s, users, q));
            }
        }
    }

    /// One trace per n = 0..U, with residuals recorded at the listed lengths.
    std::vector<ColumnTrace> run(const std::vector<int>& snapshots) const
    {
        const int vlen = users_ + 1;
        std::vector<ColumnTrace> tr(vlen);
        for (ColumnTrace& t : tr)
            t.terminated.assign(dmax_, 0.0);
        auto want = [&](int d) {
            return std::find(snapshots.begin(), snapshots.end(), d) != snapshots.end();
        };
        auto snapshot = [&](int d, auto&& mass_at) {
            for (int n = 0; n <= users_; ++n)
                tr[n].residual[d] = std::vector<double>(n + 1, 0.0);
            mass_at([&](int s, int n, double m) { tr[n].residual[d][s] += m; });
        };
        // zero or one active user: the forced first slot settles it
        tr[0].terminated[0] = 1.0;
        if (users_ >= 1)
            tr[1].terminated[0] = 1.0;

        const int width = dmax_ + 1;
        auto post_cell = [&](int s, int c) { return s * dmax_ + c; };
        auto level_cell = [&](int c, int r) { return c * width + r; };

        ColumnGrid post(vlen * dmax_, vlen), next(vlen * dmax_, vlen), fresh(vlen * dmax_, vlen);
        ColumnGrid cur(dmax_ * width, vlen), thinned(dmax_ * width, vlen), below(dmax_ * width, vlen);
        std::vector<double> ended(vlen), pruned(vlen, 0.0), unit(vlen, 1.0);

        if (users_ >= 2) {
            for (int n = 2; n <= users_; ++n)
                post.axpy(post_cell(n, 0), unit.data(), n, n, 1.0);
        }
        if (want(1)) {
            snapshot(1, [&](auto&& put) {
                for (int n = 2; n <= users_; ++n)
                    put(n, n, 1.0);
            });
        }

        for (int d = 2; d <= dmax_; ++d) {
            std::fill(ended.begin(), ended.end(), 0.0);
            int top_s = 0;
            for (int cell : post.used()) {
                const int s = cell / dmax_, c = cell % dmax_;
                post.trim(cell, prune_, pruned);
                const int lo = post.lo(cell), hi = post.hi(cell);
                const double* v = post.vec(cell);
                if (lo > hi)
                    continue;
                const SlotOutcome& o = kernels_[s].slot;
                if (o.idle > 0.0)
                    next.axpy(cell, v, lo, hi, o.idle);
                if (o.singleton > 0.0) {
                    fresh.axpy(cell, v, lo, hi, o.singleton);
                    top_s = std::max(top_s, s);
                }
                if (o.collision > 0.0)
                    next.axpy(post_cell(s, c + 1), v, lo, hi, o.collision);  // c <= d-2 here
            }
            post.clear();

            // cascade, highest unresolved level first; fresh cells are visited per level
            std::vector<std::vector<int>> fresh_by_level(top_s + 1);
            for (int cell : fresh.used())
                fresh_by_level[cell / dmax_].push_back(cell);

            for (int s = top_s; s >= 2; --s) {
                for (int cell : fresh_by_level[s])
                    cur.axpy(level_cell(cell % dmax_, 1), fresh.vec(cell), fresh.lo(cell),
                             fresh.hi(cell), 1.0);
                if (cur.used().empty())
                    continue;

                if (s == 2) {
                    for (int cell : cur.used()) {
                        const int c = cell / width, r = cell % width;
                        const double* v = cur.vec(cell);
                        if (r == 0) {
                            next.axpy(post_cell(2, c), v, cur.lo(cell), cur.hi(cell), 1.0);
                        } else {
                            for (int n = cur.lo(cell); n <= cur.hi(cell); ++n)
                                ended[n] += v[n];
                        }
                    }
                    cur.clear();
                    continue;
                }

                const LevelKernel& k = kernels_[s];
                for (int cell : cur.used()) {
                    const int c = cell / width, r = cell % width;
                    if (r > 0)
                        cur.trim(cell, prune_, pruned);
                    const int lo = cur.lo(cell), hi = cur.hi(cell);
                    const double* v = cur.vec(cell);
                    if (lo > hi)
                        continue;
                    if (r == 0) {
                        next.axpy(post_cell(s, c), v, lo, hi, 1.0);
                        continue;
                    }
                    int klo, khi;
                    double outside;
                    k.survivors.significant(r - 1, cur.peak(cell), prune_, klo, khi, outside);
                    const double* pmf = k.survivors.row(r - 1);
                    for (int kk = klo; kk <= khi; ++kk)
                        thinned.axpy(level_cell(c, kk), v, lo, hi, pmf[kk]);
                    if (outside > 0.0)
                        for (int n = lo; n <= hi; ++n)
                            pruned[n] += outside * v[n];
                }
                cur.clear();

                for (int cell : thinned.used()) {
                    const int c = cell / width, kk = cell % width;
                    thinned.trim(cell, prune_, pruned);
                    const int lo = thinned.lo(cell), hi = thinned.hi(cell);
                    const double* v = thinned.vec(cell);
                    if (lo > hi)
                        continue;
                    int jlo, jhi;
                    double outside;
                    k.released.significant(c, thinned.peak(cell), prune_, jlo, jhi, outside);
                    const double* pmf = k.released.row(c);
                    for (int j = jlo; j <= jhi; ++j)
                        below.axpy(level_cell(c - j, kk + j), v, lo, hi, pmf[j]);
                    if (outside > 0.0)
                        for (int n = lo; n <= hi; ++n)
                            pruned[n] += outside * v[n];
                }
                thinned.clear();
                cur.swap(below);
            }
            fresh.clear();

            for (int n = 2; n <= users_; ++n)
                tr[n].terminated[d - 1] = ended[n];
            post.swap(next);

            if (want(d)) {
                snapshot(d, [&](auto&& put) {
                    for (int cell : post.used()) {
                        const double* v = post.vec(cell);
                        for (int n = post.lo(cell); n <= post.hi(cell); ++n)
                            put(cell / dmax_, n, v[n]);
                    }
                });
            }
        }
        for (int n = 0; n <= users_; ++n)
            tr[n].pruned = pruned[n];
        return tr;
    }

private:
    int users_;
    int dmax_;
    double prune_;
    std::vector<LevelKernel> kernels_;
};

}  // namespace detail

/*
 * Conditional tables for several maximum contention lengths at once. Slots
 * before d_max do not depend on d_max, so one pass up to the largest value
 * serves every entry of the list.
 */
inline std::vector<ConditionalTables> build_conditional_tables_multi(
    int users, double q, std::vector<int> dmax_list, const TableOptions& opts = {})
{
    detail::check_dmax_list(users, q, dmax_list);
    const int top = *std::max_element(dmax_list.begin(), dmax_list.end());
    detail::ColumnEvolver evolver(users, q, top, opts.prune_below);

    std::vector<ColumnTrace> traces = evolver.run(dmax_list);

    std::vector<ConditionalTables> out;
    out.reserve(dmax_list.size());
    for (int dmax : dmax_list) {
        std::vector<ColumnTrace> cut(users + 1);
        for (int n = 0; n <= users; ++n) {
            cut[n].terminated.assign(traces[n].terminated.begin(),
                                     traces[n].terminated.begin() + dmax);
            cut[n].residual[dmax] = traces[n].residual.at(dmax);
            cut[n].pruned = traces[n].pruned;
        }
        out.push_back(detail::assemble_tables(users, q, dmax, cut));
    }
    return out;
}

inline ConditionalTables build_conditional_tables(const SystemConfig& cfg,
                                                  const TableOptions& opts = {})
{
    return build_conditional_tables_multi(cfg.users(), cfg.tx_prob(), {cfg.max_cp_len()}, opts)
        .front();
}

/*
 * Tables depend on (U, q, d_max) only; the cache lets sweeps over the load
 * reuse them. Safe for concurrent use.
 */
class TableCache
{
public:
    explicit TableCache(TableOptions opts = {}) : opts_(opts) {}

    std::shared_ptr<const ConditionalTables> get(const SystemConfig& cfg)
    {
        Key key{cfg.users(), cfg.tx_prob(), cfg.max_cp_len()};
        {
            std::lock_guard<std::mutex> lock(mu_);
            auto it = cache_.find(key);
            if (it != cache_.end())
                return it->second;
        }
        auto built = std::make_shared<const ConditionalTables>(build_conditional_tables(cfg, opts_));
        std::lock_guard<std::mutex> lock(mu_);
        return cache_.emplace(key, std::move(built)).first->second;
    }

    std::size_t size() const
    {
        std::lock_guard<std::mutex> lock(mu_);
        return cache_.size();
    }

private:
    using Key = std::tuple<int, double, int>;
    TableOptions opts_;
    mutable std::mutex mu_;
    std::map<Key, std::shared_ptr<const ConditionalTables>> cache_;
};

}  // namespace faloha

#endif
