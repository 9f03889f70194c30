// Command-line front end: single points, q and d_max sweeps, simulation,
// analysis-vs-simulation comparison and the enumeration oracle.

#include <cstdlib>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "faloha/experiment.hpp"

namespace {

using faloha::Axis;
using faloha::ConfigError;
using faloha::ExperimentSpec;
using faloha::Mode;

struct Flags
{
    std::string config;
    std::optional<int> users;
    std::optional<double> q;
    std::optional<double> gamma;
    std::optional<double> load;
    std::optional<int> dmax;
    std::string out;
    int threads = 0;
    std::optional<double> prune;
    bool dists = false;
    bool tables = false;

    // q grid
    std::optional<double> from, to;
    std::optional<int> points;
    bool log_scale = false;
    std::vector<double> q_values;
    // load grid
    std::vector<double> loads;
    // d_max grid
    std::vector<int> dmax_values;
    std::optional<int> dmax_from, dmax_to;
    int dmax_step = 10;
    // inner q search
    double search_from = 0.002, search_to = 0.5;
    int search_points = 24;
    int refine_iters = 10;

    std::optional<unsigned long long> seed;
    std::optional<long long> cps, warmup;
};

void add_point_flags(CLI::App* sub, Flags& f)
{
    sub->add_option("--config", f.config, "flat 'key = value' file (users, q, gamma|load, dmax, seed, cps, warmup)")
        ->check(CLI::ExistingFile);
    sub->add_option("--users", f.users, "number of users U");
    sub->add_option("--q", f.q, "access probability after slot 1, in (0, 1]");
    auto* g = sub->add_option("--gamma", f.gamma, "per-slot generation probability");
    auto* l = sub->add_option("--load", f.load, "aggregate load gamma*U (alternative to --gamma)");
    g->excludes(l);
    sub->add_option("--dmax", f.dmax, "maximum contention length in slots");
    sub->add_option("--out", f.out, "output directory (default: $FALOHA_OUT_DIR or .)");
    sub->add_option("--threads", f.threads, "worker threads, 0 = all cores")->check(CLI::NonNegativeNumber);
    sub->add_option("--prune", f.prune, "drop table mass below this per cell (0 = exact)")
        ->check(CLI::NonNegativeNumber);
    sub->add_flag("--dists", f.dists, "also write stationary distributions / histograms");
}

void add_q_grid_flags(CLI::App* sub, Flags& f)
{
    sub->add_option("--from", f.from, "first q of the grid");
    sub->add_option("--to", f.to, "last q of the grid");
    sub->add_option("--points", f.points, "number of grid points")->check(CLI::PositiveNumber);
    sub->add_flag("--log", f.log_scale, "logarithmic spacing");
    sub->add_option("--q-values", f.q_values, "explicit q grid")->delimiter(',');
}

void add_sim_flags(CLI::App* sub, Flags& f)
{
    sub->add_option("--seed", f.seed, "master seed");
    sub->add_option("--cps", f.cps, "measured contention periods")->check(CLI::PositiveNumber);
    sub->add_option("--warmup", f.warmup, "discarded initial contention periods")->check(CLI::NonNegativeNumber);
}

bool has_q_grid(const Flags& f)
{
    return !f.q_values.empty() || f.from || f.to || f.points;
}

std::vector<double> q_grid(const Flags& f)
{
    if (!f.q_values.empty()) {
        if (f.from || f.to || f.points)
            throw ConfigError("give either --q-values or --from/--to/--points");
        return f.q_values;
    }
    if (!f.from || !f.to || !f.points)
        throw ConfigError("q grid needs --from, --to and --points (or --q-values)");
    return faloha::make_grid(*f.from, *f.to, *f.points, f.log_scale);
}

ExperimentSpec build_spec(Mode mode, const Flags& f)
{
    ExperimentSpec spec;
    spec.mode = mode;

    faloha::ParamMap raw;
    if (!f.config.empty())
        raw = faloha::parse_config_file(f.config);
    auto take = [&](const char* key) -> std::optional<std::string> {
        auto it = raw.find(key);
        if (it == raw.end())
            return std::nullopt;
        std::string v = it->second;
        raw.erase(it);
        return v;
    };
    // simulation controls may also come from the config file
    if (auto v = take("seed"))
        spec.seed = static_cast<std::uint64_t>(faloha::parse_integer(*v, "seed"));
    if (auto v = take("cps"))
        spec.num_cps = faloha::parse_integer(*v, "cps");
    if (auto v = take("warmup"))
        spec.warmup = faloha::parse_integer(*v, "warmup");
    std::optional<std::string> cfg_out = take("out");

    if (f.users)
        raw["users"] = std::to_string(*f.users);
    if (f.q)
        raw["q"] = faloha::format_double(*f.q);
    if (f.gamma) {
        raw.erase("load");
        raw["gamma"] = faloha::format_double(*f.gamma);
    }
    if (f.load) {
        raw.erase("gamma");
        raw["load"] = faloha::format_double(*f.load);
    }
    if (f.dmax)
        raw["dmax"] = std::to_string(*f.dmax);
    if (f.seed)
        spec.seed = *f.seed;
    if (f.cps)
        spec.num_cps = *f.cps;
    if (f.warmup)
        spec.warmup = *f.warmup;

    // sweep axis; at most one
    const bool dmax_grid = !f.dmax_values.empty() || f.dmax_from || f.dmax_to;
    const int axes = (has_q_grid(f) ? 1 : 0) + (!f.loads.empty() ? 1 : 0) + (dmax_grid ? 1 : 0);
    if (axes > 1)
        throw ConfigError("only one sweep axis allowed (q grid, --loads or d_max grid)");
    if (has_q_grid(f)) {
        spec.axis = Axis::q;
        spec.grid = q_grid(f);
        if (!raw.count("q"))
            raw["q"] = faloha::format_double(spec.grid.front());
    } else if (!f.loads.empty()) {
        spec.axis = Axis::load;
        spec.grid = f.loads;
        if (!raw.count("gamma") && !raw.count("load"))
            raw["load"] = faloha::format_double(spec.grid.front());
    } else if (dmax_grid) {
        spec.axis = Axis::dmax;
        if (!f.dmax_values.empty()) {
            if (f.dmax_from || f.dmax_to)
                throw ConfigError("give either --dmax-values or --dmax-from/--dmax-to");
            for (int d : f.dmax_values)
                spec.grid.push_back(d);
        } else {
            if (!f.dmax_from || !f.dmax_to || f.dmax_step < 1 || *f.dmax_from > *f.dmax_to)
                throw ConfigError("d_max grid needs --dmax-from <= --dmax-to and --dmax-step >= 1");
            for (int d = *f.dmax_from; d <= *f.dmax_to; d += f.dmax_step)
                spec.grid.push_back(d);
        }
        if (!raw.count("dmax"))
            raw["dmax"] = std::to_string(static_cast<int>(spec.grid.front()));
        if (mode == Mode::sweep_dmax && !raw.count("q"))
            raw["q"] = faloha::format_double(f.search_from);
    }
    spec.base = faloha::validate_config(raw);

    if (mode == Mode::sweep_dmax) {
        spec.q_search_grid = faloha::make_grid(f.search_from, f.search_to, f.search_points, true);
        spec.refine_iters = f.refine_iters;
    }
    if (!f.out.empty())
        spec.out_dir = f.out;
    else if (cfg_out)
        spec.out_dir = *cfg_out;
    else if (const char* env = std::getenv("FALOHA_OUT_DIR"); env && *env)
        spec.out_dir = env;
    spec.threads = f.threads;
    spec.dump_dists = f.dists;
    spec.dump_tables = f.tables;
    if (f.prune)
        spec.prune_below = *f.prune;
    spec.validate();
    return spec;
}

}  // namespace

int main(int argc, char** argv)
{
    CLI::App app{"Frameless ALOHA throughput and peak Age of Information: exact analysis, "
                 "simulation and enumeration oracle"};
    app.require_subcommand(1);
    app.set_version_flag("--version", std::string(faloha::kToolVersion));
    Flags f;

    auto* analyze = app.add_subcommand("analyze", "analyze one point, or a --loads grid");
    add_point_flags(analyze, f);
    analyze->add_option("--loads", f.loads, "grid of loads gamma*U")->delimiter(',');
    analyze->add_flag("--tables", f.tables, "also write the conditional tables");

    auto* sweep_q = app.add_subcommand("sweep-q", "analysis over a grid of q");
    add_point_flags(sweep_q, f);
    add_q_grid_flags(sweep_q, f);
    sweep_q->add_option("--loads", f.loads, "rejected: one sweep axis only")->delimiter(',');

    auto* sweep_d = app.add_subcommand("sweep-dmax", "d_max grid with q optimized per point");
    add_point_flags(sweep_d, f);
    sweep_d->add_option("--dmax-values", f.dmax_values, "explicit d_max grid")->delimiter(',');
    sweep_d->add_option("--dmax-from", f.dmax_from, "first d_max");
    sweep_d->add_option("--dmax-to", f.dmax_to, "last d_max");
    sweep_d->add_option("--dmax-step", f.dmax_step, "d_max step")->capture_default_str();
    sweep_d->add_option("--q-from", f.search_from, "inner search: smallest q")->capture_default_str();
    sweep_d->add_option("--q-to", f.search_to, "inner search: largest q")->capture_default_str();
    sweep_d->add_option("--q-points", f.search_points, "inner search: coarse log-grid points")->capture_default_str();
    sweep_d->add_option("--refine-iters", f.refine_iters, "golden-section iterations (0 = grid only)")->capture_default_str();
    sweep_d->add_option("--loads", f.loads, "rejected: one sweep axis only")->delimiter(',');

    auto* simulate = app.add_subcommand("simulate", "slot-level simulation");
    add_point_flags(simulate, f);
    add_q_grid_flags(simulate, f);
    add_sim_flags(simulate, f);
    simulate->add_option("--loads", f.loads, "grid of loads gamma*U")->delimiter(',');

    auto* compare = app.add_subcommand("compare", "simulation next to analysis, with z-scores");
    add_point_flags(compare, f);
    add_q_grid_flags(compare, f);
    add_sim_flags(compare, f);
    compare->add_option("--loads", f.loads, "grid of loads gamma*U")->delimiter(',');

    auto* oracle = app.add_subcommand("oracle", "check the tables against exhaustive enumeration");
    add_point_flags(oracle, f);
    add_q_grid_flags(oracle, f);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        int code = app.exit(e);
        return code == 0 ? 0 : 1;
    }

    Mode mode = Mode::analyze;
    if (*sweep_q)
        mode = Mode::sweep_q;
    else if (*sweep_d)
        mode = Mode::sweep_dmax;
    else if (*simulate)
        mode = Mode::simulate;
    else if (*compare)
        mode = Mode::compare;
    else if (*oracle)
        mode = Mode::oracle;

    ExperimentSpec spec;
    try {
        spec = build_spec(mode, f);
    } catch (const ConfigError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }

    std::string command;
    for (int i = 0; i < argc; ++i)
        command += (i ? " " : "") + std::string(argv[i]);

    try {
        faloha::RunOutcome res = faloha::run_experiment(spec, command);
        for (const std::string& line : res.summary)
            std::cout << line << "\n";
        std::cout << "wrote " << spec.out_dir.string() << "/manifest.json\n";
        if (!res.complete) {
            std::cerr << "error: run incomplete: " << res.error << "\n";
            return 2;
        }
        if (mode == Mode::oracle && !res.all_pass)
            return 2;
    } catch (const ConfigError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const faloha::NumericalError& e) {
        std::cerr << "numerical failure: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
    return 0;
}
