#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "faloha/sic_analysis.hpp"
#include "faloha/simulator.hpp"

using namespace faloha;

namespace {

// Closed form of the collided-slot release probability; no dependence on n.
double h_closed(int s, double q)
{
    if (s < 2)
        return 0.0;
    double num = (s - 1.0) * q * q * std::pow(1.0 - q, s - 2);
    double den = 1.0 - std::pow(1.0 - q, s) - s * q * std::pow(1.0 - q, s - 1);
    return num / den;
}

// Displayed ratio evaluated term by term with plain binomial coefficients.
double h_direct(int s, int n, double q)
{
    auto lam = [&](int k) { return choose(n, k) * std::pow(q, k) * std::pow(1.0 - q, n - k); };
    double num = 0.0;
    for (int k = 2; k <= n; ++k)
        num += lam(k) * k * (k - 1.0) / (n * (n - 1.0)) * (s - 1.0) * choose(n - s, k - 2) /
               choose(n - 2, k - 2);
    double den = 0.0;
    for (int k = 2; k <= n; ++k) {
        double two_or_more = 0.0;
        for (int t = 2; t <= std::min(k, s); ++t)
            two_or_more += choose(s, t) * choose(n - s, k - t) / choose(n, k);
        den += lam(k) * two_or_more;
    }
    return num / den;
}

double max_table_gap(const ConditionalTables& a, const ConditionalTables& b)
{
    double w = 0.0;
    for (int n = 0; n <= a.users; ++n) {
        for (int d = 1; d <= a.max_cp_len; ++d)
            w = std::max(w, std::abs(a.p_cp_len(d, n) - b.p_cp_len(d, n)));
        for (int m = 0; m <= n; ++m) {
            w = std::max(w, std::abs(a.p_decoded(m, n) - b.p_decoded(m, n)));
            w = std::max(w, std::abs(a.p_beta(m, n) - b.p_beta(m, n)));
        }
        if (a.has_beta(n) != b.has_beta(n))
            return std::numeric_limits<double>::infinity();
    }
    return w;
}

}  // namespace

TEST(InitState, Cases)
{
    EXPECT_EQ(init_state(0, 10), (DecoderState{0, 0, 0}));
    EXPECT_EQ(init_state(1, 10), (DecoderState{1, 0, 1}));
    EXPECT_EQ(init_state(5, 10), (DecoderState{5, 0, 0}));
    EXPECT_THROW(init_state(11, 10), ConfigError);
    EXPECT_THROW(init_state(-1, 10), ConfigError);
}

TEST(HUnresolved, Examples)
{
    EXPECT_NEAR(h_unresolved(2, 2, 0.5), 1.0, 1e-15);
    EXPECT_EQ(h_unresolved(1, 1, 0.7), 0.0);
    double h = h_unresolved(3, 5, 0.2);
    EXPECT_GE(h, 0.0);
    EXPECT_LE(h, 1.0);
    EXPECT_NEAR(h, h_direct(3, 5, 0.2), 1e-14);
    EXPECT_NEAR(h, h_closed(3, 0.2), 1e-14);
}

TEST(HUnresolved, AgreesWithTwoIndependentForms)
{
    for (int n : {2, 3, 7, 20, 60}) {
        for (int s = 2; s <= n; s += std::max(1, n / 6)) {
            for (double q : {0.01, 0.1, 0.3, 0.5, 0.9, 1.0}) {
                double h = h_unresolved(s, n, q);
                EXPECT_NEAR(h, h_closed(s, q), 1e-12 * std::max(1.0, h)) << s << " " << n << " " << q;
                if (n <= 20)
                    EXPECT_NEAR(h, h_direct(s, n, q), 1e-12 * std::max(1.0, h)) << s << " " << n << " " << q;
            }
        }
    }
    // large n stays finite through the log-binomial ratios
    EXPECT_NEAR(h_unresolved(150, 400, 0.01), h_closed(150, 0.01), 1e-12);
    EXPECT_THROW(h_unresolved(4, 3, 0.5), ConfigError);
}

TEST(ResolveOneUser, Examples)
{
    StateDistribution a = resolve_one_user({1, 0, 1}, 4, 0.37);
    EXPECT_EQ(a.size(), 1u);
    EXPECT_DOUBLE_EQ(a.at({0, 0, 0}), 1.0);

    StateDistribution b = resolve_one_user({2, 0, 1}, 2, 0.5);
    EXPECT_EQ(b.size(), 1u);
    EXPECT_DOUBLE_EQ(b.at({1, 0, 1}), 1.0);

    // i = 1, a = 0: (s-1, c-j, r-i+j) with j ~ Bin(1, h)
    for (double q : {0.2, 0.5, 0.8}) {
        double h = h_unresolved(3, 3, q);
        StateDistribution c = resolve_one_user({3, 1, 1}, 3, q);
        EXPECT_EQ(c.size(), 2u);
        EXPECT_NEAR(c.at({2, 1, 0}), 1.0 - h, 1e-15);
        EXPECT_NEAR(c.at({2, 0, 1}), h, 1e-15);
        EXPECT_NEAR(c.total(), 1.0, 1e-15);
    }
    EXPECT_THROW(resolve_one_user({3, 1, 0}, 3, 0.5), ConfigError);
    EXPECT_THROW(resolve_one_user({0, 0, 1}, 3, 0.5), ConfigError);
}

TEST(ResolveOneUser, ConservesMassAndDropsOneUser)
{
    std::mt19937_64 rng(11);
    for (int trial = 0; trial < 200; ++trial) {
        int n = 2 + static_cast<int>(rng() % 12);
        int s = 1 + static_cast<int>(rng() % n);
        int c = static_cast<int>(rng() % 6);
        int r = 1 + static_cast<int>(rng() % 5);
        double q = 0.05 + 0.9 * std::uniform_real_distribution<double>()(rng);
        StateDistribution out = resolve_one_user({s, c, r}, n, q);
        EXPECT_NEAR(out.total(), 1.0, 1e-13);
        for (const auto& [st, p] : out) {
            EXPECT_EQ(st.unresolved, s - 1);
            EXPECT_GE(st.singletons, 0);
            EXPECT_LE(st.collided, c);
            EXPECT_GE(p, 0.0);
        }
    }
}

TEST(DecodeUntilStall, Examples)
{
    StateDistribution stuck;
    stuck.add({4, 2, 0}, 1.0);
    StateDistribution out = decode_until_stall(stuck, 4, 0.3);
    EXPECT_EQ(out.size(), 1u);
    EXPECT_EQ(out.at({4, 2, 0}), 1.0);

    StateDistribution two;
    two.add({2, 0, 1}, 1.0);
    out = decode_until_stall(two, 2, 0.5);
    EXPECT_EQ(out.size(), 1u);
    EXPECT_NEAR(out.at({0, 0, 0}), 1.0, 1e-15);

    StateDistribution mix;
    mix.add({1, 0, 1}, 0.5);
    mix.add({3, 1, 0}, 0.5);
    out = decode_until_stall(mix, 3, 0.4);
    EXPECT_EQ(out.size(), 2u);
    EXPECT_NEAR(out.at({0, 0, 0}), 0.5, 1e-15);
    EXPECT_NEAR(out.at({3, 1, 0}), 0.5, 1e-15);
}

TEST(DecodeUntilStall, LinearOverMixtures)
{
    std::mt19937_64 rng(5);
    std::uniform_real_distribution<double> u;
    for (int trial = 0; trial < 50; ++trial) {
        const int n = 8;
        const double q = 0.1 + 0.8 * u(rng);
        DecoderState x{2 + static_cast<int>(rng() % 7), static_cast<int>(rng() % 5), static_cast<int>(rng() % 3)};
        DecoderState y{2 + static_cast<int>(rng() % 7), static_cast<int>(rng() % 5), static_cast<int>(rng() % 3)};
        if (x == y)
            continue;
        const double w = u(rng);
        StateDistribution dx, dy, mixed;
        dx.add(x, 1.0);
        dy.add(y, 1.0);
        mixed.add(x, w);
        mixed.add(y, 1.0 - w);
        StateDistribution expect = decode_until_stall(dx, n, q).scaled(w);
        expect.merge(decode_until_stall(dy, n, q).scaled(1.0 - w));
        StateDistribution got = decode_until_stall(mixed, n, q);
        EXPECT_NEAR(got.total(), 1.0, 1e-12);
        for (const auto& [st, p] : expect)
            EXPECT_NEAR(got.at(st), p, 1e-13) << to_string(st);
        for (const auto& [st, p] : got) {
            EXPECT_NEAR(expect.at(st), p, 1e-13) << to_string(st);
            EXPECT_TRUE(st.singletons == 0 || st.unresolved == 0);
        }
    }
}

TEST(AddSlot, Examples)
{
    StateDistribution a = add_slot({1, 0, 0}, 0.5);
    EXPECT_DOUBLE_EQ(a.at({1, 0, 0}), 0.5);
    EXPECT_DOUBLE_EQ(a.at({1, 0, 1}), 0.5);
    EXPECT_EQ(a.at({1, 1, 0}), 0.0);

    StateDistribution b = add_slot({2, 0, 0}, 0.5);
    EXPECT_DOUBLE_EQ(b.at({2, 0, 0}), 0.25);
    EXPECT_DOUBLE_EQ(b.at({2, 0, 1}), 0.5);
    EXPECT_DOUBLE_EQ(b.at({2, 1, 0}), 0.25);

    StateDistribution c = add_slot({3, 2, 0}, 1.0);
    EXPECT_EQ(c.size(), 1u);
    EXPECT_DOUBLE_EQ(c.at({3, 3, 0}), 1.0);

    EXPECT_THROW(add_slot({3, 2, 1}, 0.5), ConfigError);
}

TEST(ConditionalTables, Examples)
{
    ConditionalTables t0 = build_conditional_tables(SystemConfig(3, 0.5, 0.1, 4));
    EXPECT_EQ(t0.p_cp_len(1, 0), 1.0);
    EXPECT_EQ(t0.p_decoded(0, 0), 1.0);
    EXPECT_EQ(t0.p_cp_len(1, 1), 1.0);
    EXPECT_EQ(t0.p_decoded(1, 1), 1.0);

    ConditionalTables t1 = build_conditional_tables(SystemConfig(2, 1.0, 0.1, 3));
    EXPECT_NEAR(t1.p_cp_len(3, 2), 1.0, 1e-15);
    EXPECT_NEAR(t1.p_decoded(0, 2), 1.0, 1e-15);

    ConditionalTables t2 = build_conditional_tables(SystemConfig(2, 0.5, 0.1, 2));
    EXPECT_NEAR(t2.p_cp_len(2, 2), 1.0, 1e-15);
    EXPECT_NEAR(t2.p_decoded(2, 2), 0.5, 1e-15);
    EXPECT_NEAR(t2.p_decoded(0, 2), 0.5, 1e-15);
    EXPECT_NEAR(t2.p_beta(2, 2), 0.5, 1e-15);
    EXPECT_NEAR(t2.p_beta(0, 2), 0.5, 1e-15);
}

TEST(ConditionalTables, ColumnInvariants)
{
    for (double q : {0.02, 0.1, 0.3, 0.7}) {
        for (int dmax : {2, 7, 30}) {
            ConditionalTables t = build_conditional_tables(SystemConfig(25, q, 0.01, dmax));
            for (int n = 0; n <= 25; ++n) {
                double sd = 0.0, sm = 0.0, sb = 0.0;
                for (int d = 1; d <= dmax; ++d) {
                    EXPECT_GE(t.p_cp_len(d, n), 0.0);
                    sd += t.p_cp_len(d, n);
                }
                for (int m = 0; m <= n; ++m) {
                    EXPECT_GE(t.p_decoded(m, n), 0.0);
                    sm += t.p_decoded(m, n);
                    sb += t.p_beta(m, n);
                }
                EXPECT_NEAR(sd, 1.0, 1e-10);
                EXPECT_NEAR(sm, 1.0, 1e-10);
                if (t.has_beta(n))
                    EXPECT_NEAR(sb, 1.0, 1e-10);
                EXPECT_LE(t.mean_decoded(n), n + 1e-12);
                if (n >= 2)
                    EXPECT_EQ(t.p_cp_len(1, n), 0.0);
                else
                    EXPECT_EQ(t.p_cp_len(1, n), 1.0);
            }
        }
    }
}

// Level-batched production builder against the literal per-state construction.
TEST(ConditionalTables, MatchesStateMapReference)
{
    for (int users : {2, 3, 5, 8, 12}) {
        for (int dmax : {1, 2, 3, 5, 9, 14}) {
            for (double q : {0.05, 0.3, 0.5, 0.9, 1.0}) {
                SystemConfig cfg(users, q, 0.1, dmax);
                ConditionalTables ref = build_tables_by_state_map(cfg);
                ConditionalTables fast = build_conditional_tables(cfg, TableOptions{0.0});
                EXPECT_LT(max_table_gap(ref, fast), 1e-13) << users << " " << dmax << " " << q;
            }
        }
    }
}

TEST(ConditionalTables, PruningBoundedByAccountedMass)
{
    SystemConfig cfg(30, 0.1, 0.02, 40);
    ConditionalTables exact = build_conditional_tables(cfg, TableOptions{0.0});
    ConditionalTables pruned = build_conditional_tables(cfg, TableOptions{1e-14});
    EXPECT_EQ(exact.max_pruned_mass(), 0.0);
    EXPECT_GT(pruned.max_pruned_mass(), 0.0);
    EXPECT_LT(pruned.max_pruned_mass(), 1e-9);
    // every dropped unit of mass moves at most one unit of probability
    EXPECT_LT(max_table_gap(exact, pruned), 4.0 * pruned.max_pruned_mass() + 1e-14);
}

TEST(ConditionalTables, MultiDmaxEqualsSingleBuilds)
{
    std::vector<int> list{3, 10, 17, 25};
    auto multi = build_conditional_tables_multi(15, 0.12, list, TableOptions{0.0});
    ASSERT_EQ(multi.size(), list.size());
    for (std::size_t i = 0; i < list.size(); ++i) {
        ConditionalTables one = build_conditional_tables(SystemConfig(15, 0.12, 0.1, list[i]), TableOptions{0.0});
        EXPECT_EQ(max_table_gap(multi[i], one), 0.0) << list[i];
    }
}

TEST(ConditionalTables, OracleEquivalence)
{
    for (int dmax = 1; dmax <= 4; ++dmax) {
        for (double q : {0.3, 0.5, 1.0}) {
            ConditionalTables t = build_conditional_tables(SystemConfig(3, q, 0.1, dmax), TableOptions{0.0});
            for (int n = 0; n <= 3; ++n) {
                OracleColumn o = oracle_enumerate(n, q, dmax);
                for (int d = 1; d <= dmax; ++d)
                    EXPECT_NEAR(t.p_cp_len(d, n), o.cp_len[d - 1], 1e-9) << n << " " << q << " " << dmax;
                for (int m = 0; m <= n; ++m)
                    EXPECT_NEAR(t.p_decoded(m, n), o.decoded[m], 1e-9) << n << " " << q << " " << dmax;
                ASSERT_EQ(t.has_beta(n), !o.beta.empty()) << n << " " << q << " " << dmax;
                for (std::size_t m = 0; m < o.beta.size(); ++m)
                    EXPECT_NEAR(t.p_beta(static_cast<int>(m), n), o.beta[m], 1e-9);
            }
        }
    }
}

TEST(TableCache, ReusesTablesAcrossLoads)
{
    TableCache cache;
    auto a = cache.get(SystemConfig(10, 0.2, 0.01, 12));
    auto b = cache.get(SystemConfig(10, 0.2, 0.05, 12));
    auto c = cache.get(SystemConfig(10, 0.25, 0.05, 12));
    EXPECT_EQ(a.get(), b.get());
    EXPECT_NE(a.get(), c.get());
    EXPECT_EQ(cache.size(), 2u);
}
