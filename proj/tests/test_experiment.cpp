#include <gtest/gtest.h>

#include <atomic>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "faloha/experiment.hpp"

using namespace faloha;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name)
{
    fs::path p = fs::temp_directory_path() / ("faloha_test_" + name);
    fs::remove_all(p);
    return p;
}

std::string slurp(const fs::path& p)
{
    std::ifstream in(p);
    std::stringstream buf;
    buf << in.rdbuf();
    return buf.str();
}

}  // namespace

TEST(ConfigText, ParsesAndRejects)
{
    ParamMap m = parse_config_text("# point\nusers = 100\n q=0.1 \n\nload = 0.6\ndmax = 100\n");
    EXPECT_EQ(m.size(), 4u);
    EXPECT_EQ(m.at("q"), "0.1");
    EXPECT_EQ(validate_config(m), SystemConfig(100, 0.1, 0.006, 100));
    EXPECT_THROW(parse_config_text("users = 1\nusers = 2\n"), ConfigError);
    EXPECT_THROW(parse_config_text("users 1\n"), ConfigError);
    EXPECT_THROW(parse_config_text("users =\n"), ConfigError);
    EXPECT_THROW(parse_config_file("/nonexistent/cfg"), ConfigError);
}

TEST(Grid, LinearAndLog)
{
    auto lin = make_grid(0.0, 1.0, 5, false);
    EXPECT_EQ(lin, (std::vector<double>{0.0, 0.25, 0.5, 0.75, 1.0}));
    auto lg = make_grid(0.001, 0.1, 3, true);
    EXPECT_EQ(lg.front(), 0.001);
    EXPECT_NEAR(lg[1], 0.01, 1e-15);
    EXPECT_EQ(lg.back(), 0.1);
    EXPECT_EQ(make_grid(0.3, 0.3, 1, true), std::vector<double>{0.3});
    EXPECT_THROW(make_grid(0.0, 1.0, 3, true), ConfigError);
    EXPECT_THROW(make_grid(1.0, 0.5, 3, false), ConfigError);
}

TEST(Spec, PointsAndValidation)
{
    ExperimentSpec s;
    s.mode = Mode::sweep_q;
    s.base = SystemConfig(10, 0.1, 0.05, 20);
    s.axis = Axis::q;
    s.grid = {0.05, 0.2};
    auto pts = s.points();
    ASSERT_EQ(pts.size(), 2u);
    EXPECT_EQ(pts[1].tx_prob(), 0.2);
    EXPECT_NO_THROW(s.validate());

    s.grid = {0.05, 1.5};
    EXPECT_THROW(s.validate(), ConfigError);

    ExperimentSpec l;
    l.base = SystemConfig(10, 0.1, 0.05, 20);
    l.axis = Axis::load;
    l.grid = {0.6};
    EXPECT_NEAR(l.points()[0].gen_prob(), 0.06, 1e-17);

    ExperimentSpec o;
    o.mode = Mode::oracle;
    o.base = SystemConfig(4, 0.5, 0.1, 3);
    EXPECT_THROW(o.validate(), ConfigError);

    ExperimentSpec d;
    d.mode = Mode::sweep_dmax;
    d.base = SystemConfig(10, 0.1, 0.05, 20);
    d.axis = Axis::dmax;
    d.grid = {10.5};
    EXPECT_THROW(d.validate(), ConfigError);
}

TEST(ResultsCsv, RoundTrip)
{
    ResultRow a;
    a.users = 100;
    a.q = 0.1;
    a.gamma = 0.006;
    a.gamma_u = 0.6;
    a.dmax = 100;
    a.throughput = 0.548321;
    a.e_delta0 = 12.25;
    a.e_y = 199.7;
    a.peak_aoi = 211.95;
    a.mean_active = 14.7405;
    a.qstar_flag = 2;
    ResultRow s = a;
    s.source = "sim";
    s.seed = 7;
    s.n_cps = 100000;
    s.tput_ci = 0.00121;
    s.aoi_ci = 0.43;

    auto back = parse_rows_csv(write_rows_csv({a}, false));
    ASSERT_EQ(back.size(), 1u);
    EXPECT_EQ(back[0].throughput, a.throughput);
    EXPECT_EQ(back[0].qstar_flag, 2);
    EXPECT_FALSE(back[0].seed.has_value());

    auto sim = parse_rows_csv(write_rows_csv({s, a}, true));
    ASSERT_EQ(sim.size(), 2u);
    EXPECT_EQ(*sim[0].seed, 7u);
    EXPECT_EQ(*sim[0].aoi_ci, 0.43);
    EXPECT_FALSE(sim[1].tput_ci.has_value());
    EXPECT_EQ(sim[1].source, "analysis");
}

TEST(ResultsCsv, RejectsOtherSchemas)
{
    EXPECT_THROW(parse_rows_csv(""), ConfigError);
    EXPECT_THROW(parse_rows_csv("source,U,q\nanalysis,1,0.1\n"), ConfigError);
    std::string ok = write_rows_csv({ResultRow{}}, false);
    std::string renamed = "src" + ok.substr(ok.find(','));
    EXPECT_THROW(parse_rows_csv(renamed), ConfigError);
    std::string short_row = ok.substr(0, ok.find('\n') + 1) + "analysis,1,0.1\n";
    EXPECT_THROW(parse_rows_csv(short_row), ConfigError);
}

TEST(ParallelFor, KeepsOrderAndReportsErrors)
{
    std::vector<int> out(50, -1);
    auto errs = parallel_for(50, 4, [&](std::size_t i) { out[i] = static_cast<int>(i * i); });
    EXPECT_EQ(first_error(errs), nullptr);
    for (int i = 0; i < 50; ++i)
        EXPECT_EQ(out[i], i * i);

    errs = parallel_for(10, 1, [](std::size_t i) {
        if (i == 3)
            throw NumericalError("boom");
    });
    EXPECT_NE(first_error(errs), nullptr);
    EXPECT_TRUE(errs[3]);
}

TEST(Sha256, KnownDigest)
{
    EXPECT_EQ(sha256_hex("abc"), "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
    EXPECT_EQ(sha256_hex(""), "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855");
}

TEST(GoldenRefine, FindsInteriorMaximumAndKeepsFallback)
{
    SystemConfig base(20, 0.1, 0.6 / 20, 20);
    auto eval = [&](double q) {
        SystemConfig c = base.with_tx_prob(q);
        return evaluate_point(c, build_conditional_tables(c));
    };
    auto score = [](const PointAnalysis& p) { return p.stationary.throughput; };
    std::vector<double> grid = make_grid(0.02, 0.5, 9, true);
    std::size_t best = 0;
    std::vector<PointAnalysis> pts;
    for (double q : grid)
        pts.push_back(eval(q));
    for (std::size_t i = 1; i < grid.size(); ++i)
        if (score(pts[i]) > score(pts[best]))
            best = i;
    ASSERT_GT(best, 0u);
    ASSERT_LT(best, grid.size() - 1);
    QOptimum fb{grid[best], pts[best], false};
    QOptimum r = golden_refine(eval, score, grid[best - 1], grid[best + 1], 15, fb);
    EXPECT_GE(score(r.point), score(fb.point));
    EXPECT_GE(r.q, grid[best - 1]);
    EXPECT_LE(r.q, grid[best + 1]);
    // nearby points are no better than the refined optimum
    EXPECT_GE(score(r.point), score(eval(r.q * 1.01)) - 1e-12);
    EXPECT_GE(score(r.point), score(eval(r.q / 1.01)) - 1e-12);
}

TEST(OptimizeOverDmax, MatchesDirectSearch)
{
    SystemConfig base(15, 0.1, 0.6 / 15, 10);
    std::vector<double> grid = make_grid(0.01, 0.5, 8, true);
    auto res = optimize_over_dmax(base, {5, 12}, grid, 0, TableOptions{}, 1);
    ASSERT_EQ(res.size(), 2u);
    for (const DmaxOptimum& o : res) {
        double best_s = -1.0, best_a = 1e300;
        for (double q : grid) {
            SystemConfig c(15, q, 0.04, o.dmax);
            PointAnalysis p = evaluate_point(c, build_conditional_tables(c));
            best_s = std::max(best_s, p.stationary.throughput);
            best_a = std::min(best_a, p.peak_aoi());
        }
        EXPECT_NEAR(o.best_throughput.point.stationary.throughput, best_s, 1e-13);
        EXPECT_NEAR(o.best_aoi.point.peak_aoi(), best_a, 1e-9 * best_a);
        EXPECT_FALSE(o.best_throughput.refined);
    }
}

TEST(RunExperiment, SweepWritesCsvAndManifest)
{
    ExperimentSpec s;
    s.mode = Mode::sweep_q;
    s.base = SystemConfig(12, 0.05, 0.05, 15);
    s.axis = Axis::q;
    s.grid = {0.05, 0.15, 0.4};
    s.out_dir = scratch("sweep");
    s.dump_dists = true;
    s.threads = 2;
    RunOutcome r = run_experiment(s, "test");
    EXPECT_TRUE(r.complete);
    EXPECT_EQ(r.summary.size(), 3u);

    auto rows = parse_rows_csv(slurp(s.out_dir / "analysis.csv"));
    ASSERT_EQ(rows.size(), 3u);
    int flagged = 0;
    for (std::size_t i = 0; i < 3; ++i) {
        EXPECT_EQ(rows[i].q, s.grid[i]);
        flagged += rows[i].qstar_flag;
    }
    EXPECT_EQ(flagged, 1);

    auto manifest = nlohmann::json::parse(slurp(s.out_dir / "manifest.json"));
    EXPECT_EQ(manifest["tool"], "faloha");
    EXPECT_EQ(manifest["complete"], true);
    EXPECT_EQ(manifest["spec"]["mode"], "sweep-q");
    ASSERT_EQ(manifest["files"].size(), 2u);
    for (const auto& f : manifest["files"])
        EXPECT_EQ(f["sha256"], sha256_hex(slurp(s.out_dir / f["name"].get<std::string>())));
}

TEST(RunExperiment, OracleAndCompare)
{
    ExperimentSpec o;
    o.mode = Mode::oracle;
    o.base = SystemConfig(3, 0.5, 0.1, 4);
    o.axis = Axis::q;
    o.grid = {0.3, 0.5, 1.0};
    o.out_dir = scratch("oracle");
    RunOutcome r = run_experiment(o);
    EXPECT_TRUE(r.all_pass);
    EXPECT_NE(slurp(o.out_dir / "oracle.csv").find("PASS"), std::string::npos);

    ExperimentSpec c;
    c.mode = Mode::compare;
    c.base = SystemConfig(8, 0.2, 0.05, 10);
    c.num_cps = 5000;
    c.warmup = 100;
    c.seed = 3;
    c.out_dir = scratch("compare");
    RunOutcome cr = run_experiment(c);
    EXPECT_TRUE(cr.complete);
    auto rows = parse_rows_csv(slurp(c.out_dir / "simulation.csv"));
    ASSERT_EQ(rows.size(), 2u);
    EXPECT_EQ(rows[0].source, "sim");
    EXPECT_EQ(*rows[0].n_cps, 5000);
    std::string cmp = slurp(c.out_dir / "compare.csv");
    EXPECT_EQ(std::count(cmp.begin(), cmp.end(), '\n'), 2);
}

// A point with no delivered updates fails numerically; the manifest says so.
TEST(RunExperiment, FailureMarksManifestIncomplete)
{
    ExperimentSpec s;
    s.mode = Mode::analyze;
    s.base = SystemConfig(3, 1.0, 1.0, 4);
    s.out_dir = scratch("fail");
    RunOutcome r = run_experiment(s);
    EXPECT_FALSE(r.complete);
    auto manifest = nlohmann::json::parse(slurp(s.out_dir / "manifest.json"));
    EXPECT_EQ(manifest["complete"], false);
    EXPECT_TRUE(manifest.contains("error"));
}
