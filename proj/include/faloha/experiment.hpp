#ifndef FALOHA_EXPERIMENT_HPP
#define FALOHA_EXPERIMENT_HPP

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <exception>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <limits>
#include <map>
#include <mutex>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <openssl/evp.h>

#include <json.hpp>

#include "aoi.hpp"
#include "core.hpp"
#include "markov.hpp"
#include "sic_analysis.hpp"
#include "simulator.hpp"

namespace faloha {

inline constexpr const char* kToolName = "faloha";
inline constexpr const char* kToolVersion = "1.0.0";

/*
 * Reads a flat "key = value" file. Blank lines and lines starting with '#'
 * are skipped; repeated keys are rejected.
 */
inline ParamMap parse_config_text(const std::string& text, const std::string& origin = "config")
{
    auto trim = [](std::string s) {
        const char* ws = " \t\r";
        s.erase(0, s.find_first_not_of(ws));
        s.erase(s.find_last_not_of(ws) + 1);
        return s;
    };
    ParamMap out;
    std::istringstream in(text);
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        line = trim(line);
        if (line.empty() || line.front() == '#')
            continue;
        auto eq = line.find('=');
        if (eq == std::string::npos)
            throw ConfigError(origin + ":" + std::to_string(lineno) + ": expected 'key = value'");
        std::string key = trim(line.substr(0, eq));
        std::string value = trim(line.substr(eq + 1));
        if (key.empty() || value.empty())
            throw ConfigError(origin + ":" + std::to_string(lineno) + ": empty key or value");
        if (!out.emplace(key, value).second)
            throw ConfigError(origin + ":" + std::to_string(lineno) + ": duplicate key '" + key + "'");
    }
    return out;
}

inline ParamMap parse_config_file(const std::filesystem::path& path)
{
    std::ifstream in(path);
    if (!in)
        throw ConfigError("cannot read config file " + path.string());
    std::stringstream buf;
    buf << in.rdbuf();
    return parse_config_text(buf.str(), path.string());
}

/// `points` values from `from` to `to` inclusive, evenly spaced in log or linear scale.
inline std::vector<double> make_grid(double from, double to, int points, bool log_scale)
{
    if (points < 1)
        throw ConfigError("grid: points must be >= 1");
    if (!(from <= to))
        throw ConfigError("grid: need from <= to");
    if (log_scale && !(from > 0.0))
        throw ConfigError("grid: log spacing needs from > 0");
    std::vector<double> g(points);
    if (points == 1) {
        g[0] = from;
        return g;
    }
    for (int i = 0; i < points; ++i) {
        double t = static_cast<double>(i) / (points - 1);
        g[i] = log_scale ? std::exp(std::log(from) + t * (std::log(to) - std::log(from)))
                         : from + t * (to - from);
    }
    g.front() = from;
    g.back() = to;
    return g;
}

enum class Mode { analyze, sweep_q, sweep_dmax, simulate, compare, oracle };
enum class Axis { none, q, dmax, load };

inline const char* to_string(Mode m)
{
    switch (m) {
    case Mode::analyze: return "analyze";
    case Mode::sweep_q: return "sweep-q";
    case Mode::sweep_dmax: return "sweep-dmax";
    case Mode::simulate: return "simulate";
    case Mode::compare: return "compare";
    case Mode::oracle: return "oracle";
    }
    return "?";
}

inline const char* to_string(Axis a)
{
    switch (a) {
    case Axis::none: return "none";
    case Axis::q: return "q";
    case Axis::dmax: return "dmax";
    case Axis::load: return "load";
    }
    return "?";
}

struct ExperimentSpec
{
    Mode mode = Mode::analyze;
    SystemConfig base{1, 1.0, 0.0, 1};
    Axis axis = Axis::none;
    std::vector<double> grid;  // q values, d_max values or loads gamma*U, by axis

    // inner q search of sweep-dmax
    std::vector<double> q_search_grid = make_grid(0.002, 0.5, 24, true);
    int refine_iters = 10;

    std::uint64_t seed = 1;
    long long num_cps = 100000;
    long long warmup = 1000;

    std::filesystem::path out_dir = ".";
    int threads = 0;  // 0 = hardware concurrency
    bool dump_dists = false;
    bool dump_tables = false;
    double prune_below = TableOptions{}.prune_below;

    /// Configurations of all grid points, in grid order.
    std::vector<SystemConfig> points() const
    {
        if (axis == Axis::none)
            return {base};
        std::vector<SystemConfig> out;
        for (double v : grid) {
            switch (axis) {
            case Axis::q:
                out.push_back(base.with_tx_prob(v));
                break;
            case Axis::dmax:
                if (v != std::floor(v))
                    throw ConfigError("dmax grid: non-integer value " + format_double(v));
                out.push_back(base.with_max_cp_len(static_cast<int>(v)));
                break;
            case Axis::load: {
                double gamma = v / base.users();
                out.emplace_back(base.users(), base.tx_prob(), gamma, base.max_cp_len());
                break;
            }
            case Axis::none:
                break;
            }
        }
        return out;
    }

    void validate() const
    {
        if (axis != Axis::none && grid.empty())
            throw ConfigError("sweep axis " + std::string(to_string(axis)) + " has no grid values");
        for (const SystemConfig& c : points())
            (void)c;  // constructing each point validates it
        if (mode == Mode::sweep_q && axis != Axis::q)
            throw ConfigError("sweep-q needs a q grid");
        if (mode == Mode::sweep_dmax && axis != Axis::dmax)
            throw ConfigError("sweep-dmax needs a d_max grid");
        if (mode == Mode::oracle) {
            if (axis == Axis::dmax || axis == Axis::load)
                throw ConfigError("oracle accepts a q grid only");
            if (base.users() > 3 || base.max_cp_len() > 4)
                throw ConfigError("oracle needs users <= 3 and dmax <= 4");
        }
        if ((mode == Mode::simulate || mode == Mode::compare) && axis == Axis::dmax)
            throw ConfigError("simulate/compare accept a q or load grid only");
        if (mode == Mode::sweep_dmax && q_search_grid.size() < 3)
            throw ConfigError("sweep-dmax: inner q grid needs at least 3 points");
        if (num_cps < 1 || warmup < 0)
            throw ConfigError("cps must be >= 1 and warmup >= 0");
    }
};

/*
 * One CSV row. Analysis rows leave the simulation fields unset; simulation
 * rows carry seed, n_cps and the 95% half-widths.
 */
struct ResultRow
{
    std::string source = "analysis";
    int users = 0;
    double q = 0.0;
    double gamma = 0.0;
    double gamma_u = 0.0;
    int dmax = 0;
    double throughput = 0.0;
    double e_delta0 = 0.0;
    double e_y = 0.0;
    double peak_aoi = 0.0;
    double mean_active = 0.0;
    int qstar_flag = 0;  // 0 plain point, 1 throughput-optimal q, 2 peak-AoI-optimal q
    std::optional<std::uint64_t> seed;
    std::optional<long long> n_cps;
    std::optional<double> tput_ci;
    std::optional<double> aoi_ci;
};

inline const std::vector<std::string>& analysis_columns()
{
    static const std::vector<std::string> cols{"source", "U",        "q",         "gamma",
                                               "gammaU", "dmax",     "throughput", "e_delta0",
                                               "e_y",    "peak_aoi", "mean_active", "qstar_flag"};
    return cols;
}

inline const std::vector<std::string>& simulation_columns()
{
    static const std::vector<std::string> cols = [] {
        std::vector<std::string> c = analysis_columns();
        for (const char* extra : {"seed", "n_cps", "tput_ci", "aoi_ci"})
            c.emplace_back(extra);
        return c;
    }();
    return cols;
}

inline std::string join(const std::vector<std::string>& cells)
{
    std::string out;
    for (std::size_t i = 0; i < cells.size(); ++i) {
        if (i)
            out += ',';
        out += cells[i];
    }
    return out;
}

inline std::vector<std::string> split_csv_line(const std::string& line)
{
    std::vector<std::string> cells;
    std::string cur;
    for (char ch : line) {
        if (ch == ',') {
            cells.push_back(cur);
            cur.clear();
        } else if (ch != '\r') {
            cur += ch;
        }
    }
    cells.push_back(cur);
    return cells;
}

inline std::string format_row(const ResultRow& r, bool with_sim)
{
    std::vector<std::string> c{r.source,
                               std::to_string(r.users),
                               format_double(r.q),
                               format_double(r.gamma),
                               format_double(r.gamma_u),
                               std::to_string(r.dmax),
                               format_double(r.throughput),
                               format_double(r.e_delta0),
                               format_double(r.e_y),
                               format_double(r.peak_aoi),
                               format_double(r.mean_active),
                               std::to_string(r.qstar_flag)};
    if (with_sim) {
        c.push_back(r.seed ? std::to_string(*r.seed) : "");
        c.push_back(r.n_cps ? std::to_string(*r.n_cps) : "");
        c.push_back(r.tput_ci ? format_double(*r.tput_ci) : "");
        c.push_back(r.aoi_ci ? format_double(*r.aoi_ci) : "");
    }
    return join(c);
}

inline std::string write_rows_csv(const std::vector<ResultRow>& rows, bool with_sim)
{
    std::string out = join(with_sim ? simulation_columns() : analysis_columns()) + "\n";
    for (const ResultRow& r : rows)
        out += format_row(r, with_sim) + "\n";
    return out;
}

/*
 * Parses a results CSV written by write_rows_csv. The header must match one of
 * the two schemas exactly; any other column set is rejected.
 */
inline std::vector<ResultRow> parse_rows_csv(const std::string& text)
{
    std::istringstream in(text);
    std::string line;
    if (!std::getline(in, line))
        throw ConfigError("results csv: empty input");
    std::vector<std::string> header = split_csv_line(line);
    bool with_sim;
    if (header == analysis_columns())
        with_sim = false;
    else if (header == simulation_columns())
        with_sim = true;
    else
        throw ConfigError("results csv: unexpected header '" + line + "'");

    std::vector<ResultRow> rows;
    int lineno = 1;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty() || line == "\r")
            continue;
        std::vector<std::string> c = split_csv_line(line);
        if (c.size() != header.size())
            throw ConfigError("results csv line " + std::to_string(lineno) + ": expected " +
                              std::to_string(header.size()) + " fields, got " + std::to_string(c.size()));
        ResultRow r;
        r.source = c[0];
        r.users = static_cast<int>(parse_integer(c[1], "U"));
        r.q = parse_double(c[2], "q");
        r.gamma = parse_double(c[3], "gamma");
        r.gamma_u = parse_double(c[4], "gammaU");
        r.dmax = static_cast<int>(parse_integer(c[5], "dmax"));
        r.throughput = parse_double(c[6], "throughput");
        r.e_delta0 = parse_double(c[7], "e_delta0");
        r.e_y = parse_double(c[8], "e_y");
        r.peak_aoi = parse_double(c[9], "peak_aoi");
        r.mean_active = parse_double(c[10], "mean_active");
        r.qstar_flag = static_cast<int>(parse_integer(c[11], "qstar_flag"));
        if (with_sim) {
            if (!c[12].empty())
                r.seed = static_cast<std::uint64_t>(parse_integer(c[12], "seed"));
            if (!c[13].empty())
                r.n_cps = parse_integer(c[13], "n_cps");
            if (!c[14].empty())
                r.tput_ci = parse_double(c[14], "tput_ci");
            if (!c[15].empty())
                r.aoi_ci = parse_double(c[15], "aoi_ci");
        }
        rows.push_back(std::move(r));
    }
    return rows;
}

inline ResultRow analysis_row(const PointAnalysis& p, int qstar_flag = 0)
{
    ResultRow r;
    r.users = p.cfg.users();
    r.q = p.cfg.tx_prob();
    r.gamma = p.cfg.gen_prob();
    r.gamma_u = p.cfg.load();
    r.dmax = p.cfg.max_cp_len();
    r.throughput = p.stationary.throughput;
    const double nan = std::numeric_limits<double>::quiet_NaN();
    r.e_delta0 = p.aoi ? p.aoi->e_delta0 : nan;
    r.e_y = p.aoi ? p.aoi->e_y : nan;
    r.peak_aoi = p.peak_aoi();
    r.mean_active = p.stationary.mean_active();
    r.qstar_flag = qstar_flag;
    return r;
}

inline ResultRow simulation_row(const SystemConfig& cfg, const SimMetrics& m)
{
    ResultRow r;
    r.source = "sim";
    r.users = cfg.users();
    r.q = cfg.tx_prob();
    r.gamma = cfg.gen_prob();
    r.gamma_u = cfg.load();
    r.dmax = cfg.max_cp_len();
    r.throughput = m.throughput();
    r.e_delta0 = m.e_delta0();
    r.e_y = m.e_y();
    r.peak_aoi = m.peak_aoi();
    r.mean_active = m.mean_active();
    r.seed = m.seed;
    r.n_cps = m.cp_count;
    r.tput_ci = m.throughput_ci();
    r.aoi_ci = m.peak_aoi_ci();
    return r;
}

/*
 * Runs task(i) for i in [0, count) on a pool of threads. Results are written
 * by index, so the caller sees them in grid order. The first exception is
 * rethrown after all workers stop; tasks not yet started are skipped.
 */
inline std::vector<std::exception_ptr> parallel_for(std::size_t count, int threads,
                                                    const std::function<void(std::size_t)>& task)
{
    std::vector<std::exception_ptr> errors(count);
    if (threads <= 0)
        threads = static_cast<int>(std::max(1u, std::thread::hardware_concurrency()));
    threads = static_cast<int>(std::min<std::size_t>(threads, std::max<std::size_t>(count, 1)));
    std::atomic<std::size_t> next{0};
    std::atomic<bool> failed{false};
    auto worker = [&] {
        for (std::size_t i = next++; i < count; i = next++) {
            if (failed)
                return;
            try {
                task(i);
            } catch (...) {
                errors[i] = std::current_exception();
                failed = true;
            }
        }
    };
    if (threads == 1) {
        worker();
    } else {
        std::vector<std::thread> pool;
        for (int t = 0; t < threads; ++t)
            pool.emplace_back(worker);
        for (std::thread& t : pool)
            t.join();
    }
    return errors;
}

inline std::exception_ptr first_error(const std::vector<std::exception_ptr>& errors)
{
    for (const auto& e : errors)
        if (e)
            return e;
    return nullptr;
}

/// Result of an inner q search at one configuration.
struct QOptimum
{
    double q = 0.0;
    PointAnalysis point;
    bool refined = false;  // false: grid argmax kept as fallback
};

/*
 * Golden-section search of log q on [lo, hi] for the maximum of score. The
 * bracket comes from a coarse grid, whose best point is kept if the search
 * fails to improve on it.
 */
inline QOptimum golden_refine(const std::function<PointAnalysis(double)>& eval,
                              const std::function<double(const PointAnalysis&)>& score, double lo,
                              double hi, int iters, QOptimum fallback)
{
    const double phi = (std::sqrt(5.0) - 1.0) / 2.0;
    double a = std::log(lo), b = std::log(hi);
    double x1 = b - phi * (b - a), x2 = a + phi * (b - a);
    PointAnalysis p1 = eval(std::exp(x1)), p2 = eval(std::exp(x2));
    for (int i = 0; i < iters; ++i) {
        if (score(p1) >= score(p2)) {
            b = x2;
            x2 = x1;
            p2 = std::move(p1);
            x1 = b - phi * (b - a);
            p1 = eval(std::exp(x1));
        } else {
            a = x1;
            x1 = x2;
            p1 = std::move(p2);
            x2 = a + phi * (b - a);
            p2 = eval(std::exp(x2));
        }
    }
    QOptimum best = score(p1) >= score(p2) ? QOptimum{std::exp(x1), p1, true}
                                           : QOptimum{std::exp(x2), p2, true};
    if (score(best.point) < score(fallback.point))
        return fallback;
    return best;
}

/// Throughput-optimal and peak-AoI-optimal q at one d_max.
struct DmaxOptimum
{
    int dmax = 0;
    QOptimum best_throughput;
    QOptimum best_aoi;
};

/*
 * For each d_max: evaluate the coarse q grid (one table pass per q serves all
 * d_max values), then refine the throughput maximum and the peak-AoI minimum
 * separately by golden-section search inside the bracket around the grid
 * optimum.
 */
inline std::vector<DmaxOptimum> optimize_over_dmax(const SystemConfig& base,
                                                   const std::vector<int>& dmax_grid,
                                                   const std::vector<double>& q_grid, int refine_iters,
                                                   const TableOptions& opts = {}, int threads = 0)
{
    if (dmax_grid.empty() || q_grid.size() < 3)
        throw ConfigError("optimize_over_dmax: need d_max values and >= 3 q grid points");
    const std::size_t nq = q_grid.size(), nd = dmax_grid.size();
    std::vector<std::vector<PointAnalysis>> coarse(nq);
    auto errs = parallel_for(nq, threads, [&](std::size_t i) {
        auto tables = build_conditional_tables_multi(base.users(), q_grid[i], dmax_grid, opts);
        for (std::size_t k = 0; k < nd; ++k) {
            SystemConfig cfg(base.users(), q_grid[i], base.gen_prob(), dmax_grid[k]);
            coarse[i].push_back(evaluate_point(cfg, tables[k]));
        }
    });
    if (auto e = first_error(errs))
        std::rethrow_exception(e);

    std::vector<std::optional<DmaxOptimum>> slots(nd);
    errs = parallel_for(nd, threads, [&](std::size_t k) {
        const SystemConfig cfg = base.with_max_cp_len(dmax_grid[k]);
        // both searches usually share a bracket, and then the same probe points
        std::map<double, PointAnalysis> memo;
        auto eval = [&](double q) {
            auto it = memo.find(q);
            if (it != memo.end())
                return it->second;
            SystemConfig c = cfg.with_tx_prob(q);
            return memo.emplace(q, evaluate_point(c, build_conditional_tables(c, opts))).first->second;
        };
        auto search = [&](const std::function<double(const PointAnalysis&)>& score) {
            std::size_t best = 0;
            for (std::size_t i = 1; i < nq; ++i)
                if (score(coarse[i][k]) > score(coarse[best][k]))
                    best = i;
            QOptimum grid_best{q_grid[best], coarse[best][k], false};
            double lo = q_grid[best == 0 ? 0 : best - 1];
            double hi = q_grid[std::min(best + 1, nq - 1)];
            if (refine_iters <= 0 || !(lo < hi))
                return grid_best;
            return golden_refine(eval, score, lo, hi, refine_iters, grid_best);
        };
        QOptimum s = search([](const PointAnalysis& p) { return p.stationary.throughput; });
        QOptimum a = search([](const PointAnalysis& p) {
            double v = p.peak_aoi();
            return std::isfinite(v) ? -v : -std::numeric_limits<double>::infinity();
        });
        slots[k] = DmaxOptimum{dmax_grid[k], std::move(s), std::move(a)};
    });
    if (auto e = first_error(errs))
        std::rethrow_exception(e);
    std::vector<DmaxOptimum> out;
    for (auto& s : slots)
        out.push_back(std::move(*s));
    return out;
}

/// Hex SHA-256 of a byte string.
inline std::string sha256_hex(const std::string& data)
{
    unsigned char md[EVP_MAX_MD_SIZE];
    unsigned int len = 0;
    if (EVP_Digest(data.data(), data.size(), md, &len, EVP_sha256(), nullptr) != 1)
        throw std::runtime_error("sha256: digest failed");
    std::ostringstream hex;
    for (unsigned int i = 0; i < len; ++i)
        hex << std::hex << std::setw(2) << std::setfill('0') << static_cast<int>(md[i]);
    return hex.str();
}

/// Files written by one run, with their checksums.
class OutputSet
{
public:
    explicit OutputSet(std::filesystem::path dir) : dir_(std::move(dir))
    {
        std::filesystem::create_directories(dir_);
    }

    void write(const std::string& name, const std::string& content)
    {
        std::ofstream out(dir_ / name, std::ios::binary);
        if (!out)
            throw std::runtime_error("cannot write " + (dir_ / name).string());
        out << content;
        if (!out)
            throw std::runtime_error("short write to " + (dir_ / name).string());
        files_.push_back({{"name", name},
                          {"sha256", sha256_hex(content)},
                          {"bytes", content.size()},
                          {"lines", std::count(content.begin(), content.end(), '\n')}});
    }

    const std::filesystem::path& dir() const { return dir_; }
    const nlohmann::json& files() const { return files_; }

private:
    std::filesystem::path dir_;
    nlohmann::json files_ = nlohmann::json::array();
};

inline nlohmann::json spec_to_json(const ExperimentSpec& s)
{
    nlohmann::json base;
    for (const auto& [k, v] : to_params(s.base))
        base[k] = v;
    nlohmann::json j{{"mode", to_string(s.mode)},
                     {"base", base},
                     {"axis", to_string(s.axis)},
                     {"grid", s.grid},
                     {"prune_below", s.prune_below}};
    if (s.mode == Mode::sweep_dmax) {
        j["q_search_grid"] = s.q_search_grid;
        j["refine_iters"] = s.refine_iters;
    }
    if (s.mode == Mode::simulate || s.mode == Mode::compare) {
        j["seed"] = s.seed;
        j["num_cps"] = s.num_cps;
        j["warmup"] = s.warmup;
    }
    return j;
}

inline std::string stationary_csv(const std::vector<PointAnalysis>& pts)
{
    std::string out = "U,q,gammaU,dmax,kind,index,prob\n";
    for (const PointAnalysis& p : pts) {
        std::string key = std::to_string(p.cfg.users()) + "," + format_double(p.cfg.tx_prob()) + "," +
                          format_double(p.cfg.load()) + "," + std::to_string(p.cfg.max_cp_len()) + ",";
        for (std::size_t i = 0; i < p.stationary.pi_d.size(); ++i)
            out += key + "d," + std::to_string(i + 1) + "," + format_double(p.stationary.pi_d[i]) + "\n";
        for (std::size_t i = 0; i < p.stationary.pi_n.size(); ++i)
            out += key + "n," + std::to_string(i) + "," + format_double(p.stationary.pi_n[i]) + "\n";
        for (std::size_t i = 0; i < p.stationary.pi_m.size(); ++i)
            out += key + "m," + std::to_string(i) + "," + format_double(p.stationary.pi_m[i]) + "\n";
    }
    return out;
}

inline std::string tables_csv(const SystemConfig& cfg, const ConditionalTables& t)
{
    std::string out = "q,dmax,n,kind,index,prob\n";
    std::string key = format_double(cfg.tx_prob()) + "," + std::to_string(cfg.max_cp_len()) + ",";
    for (int n = 0; n <= t.users; ++n) {
        std::string k = key + std::to_string(n) + ",";
        for (int d = 1; d <= t.max_cp_len; ++d)
            out += k + "p_d_given_n," + std::to_string(d) + "," + format_double(t.p_cp_len(d, n)) + "\n";
        for (int m = 0; m <= n; ++m)
            out += k + "p_m_given_n," + std::to_string(m) + "," + format_double(t.p_decoded(m, n)) + "\n";
        if (t.has_beta(n))
            for (int m = 0; m <= n; ++m)
                out += k + "beta," + std::to_string(m) + "," + format_double(t.p_beta(m, n)) + "\n";
    }
    return out;
}

/// One compare row: analysis next to simulation, with z-scores in standard-error units.
struct CompareRow
{
    ResultRow ana;
    ResultRow sim;

    static double z(double sim, double ana, double half_width, long long batches)
    {
        boost::math::students_t t(static_cast<double>(batches - 1));
        double se = half_width / boost::math::quantile(boost::math::complement(t, 0.025));
        return se > 0.0 ? (sim - ana) / se : std::numeric_limits<double>::quiet_NaN();
    }
};

inline std::string compare_csv(const std::vector<CompareRow>& rows, int batches)
{
    std::string out = "U,q,gamma,gammaU,dmax,seed,n_cps,tput_ana,tput_sim,tput_ci,tput_z,aoi_ana,"
                      "aoi_sim,aoi_ci,aoi_z,active_ana,active_sim,within_3ci\n";
    for (const CompareRow& r : rows) {
        const double tz = CompareRow::z(r.sim.throughput, r.ana.throughput, *r.sim.tput_ci, batches);
        const double az = CompareRow::z(r.sim.peak_aoi, r.ana.peak_aoi, *r.sim.aoi_ci, batches);
        const bool ok = std::abs(r.sim.throughput - r.ana.throughput) <= 3.0 * *r.sim.tput_ci &&
                        std::abs(r.sim.peak_aoi - r.ana.peak_aoi) <= 3.0 * *r.sim.aoi_ci;
        out += join({std::to_string(r.ana.users), format_double(r.ana.q), format_double(r.ana.gamma),
                     format_double(r.ana.gamma_u), std::to_string(r.ana.dmax), std::to_string(*r.sim.seed),
                     std::to_string(*r.sim.n_cps), format_double(r.ana.throughput),
                     format_double(r.sim.throughput), format_double(*r.sim.tput_ci), format_double(tz),
                     format_double(r.ana.peak_aoi), format_double(r.sim.peak_aoi),
                     format_double(*r.sim.aoi_ci), format_double(az), format_double(r.ana.mean_active),
                     format_double(r.sim.mean_active), ok ? "1" : "0"}) +
               "\n";
    }
    return out;
}

/// Oracle check of every column n <= U at one q.
struct OracleReport
{
    double q = 0.0;
    int dmax = 0;
    int users = 0;
    double max_abs_dev = 0.0;
    bool pass = false;
};

inline constexpr double kOracleTol = 1e-9;

inline OracleReport oracle_check(const SystemConfig& cfg)
{
    ConditionalTables t = build_conditional_tables(cfg, TableOptions{0.0});
    OracleReport rep{cfg.tx_prob(), cfg.max_cp_len(), cfg.users(), 0.0, true};
    for (int n = 0; n <= cfg.users(); ++n) {
        OracleColumn o = oracle_enumerate(n, cfg.tx_prob(), cfg.max_cp_len());
        for (int d = 1; d <= cfg.max_cp_len(); ++d)
            rep.max_abs_dev = std::max(rep.max_abs_dev, std::abs(o.cp_len[d - 1] - t.p_cp_len(d, n)));
        for (int m = 0; m <= n; ++m)
            rep.max_abs_dev = std::max(rep.max_abs_dev, std::abs(o.decoded[m] - t.p_decoded(m, n)));
        if (o.beta.empty() != !t.has_beta(n)) {
            rep.max_abs_dev = std::numeric_limits<double>::infinity();
        } else if (!o.beta.empty()) {
            for (int m = 0; m <= n; ++m)
                rep.max_abs_dev = std::max(rep.max_abs_dev, std::abs(o.beta[m] - t.p_beta(m, n)));
        }
    }
    rep.pass = rep.max_abs_dev < kOracleTol;
    return rep;
}

/// What a run produced, for the caller's summary and exit status.
struct RunOutcome
{
    bool complete = true;
    std::string error;
    std::vector<std::string> summary;  // one line per grid point
    bool all_pass = true;              // oracle mode
};

/*
 * Executes a validated spec: computes every grid point, writes the CSVs in
 * grid order and a manifest. On a numerical failure the points computed so
 * far are still written and the manifest is marked incomplete.
 */
inline RunOutcome run_experiment(const ExperimentSpec& spec, const std::string& command_line = "")
{
    spec.validate();
    OutputSet out(spec.out_dir);
    RunOutcome res;
    nlohmann::json extra = nlohmann::json::object();
    const TableOptions opts{spec.prune_below};
    const std::vector<SystemConfig> pts = spec.points();

    auto note_error = [&](const std::vector<std::exception_ptr>& errs) {
        if (auto e = first_error(errs)) {
            res.complete = false;
            try {
                std::rethrow_exception(e);
            } catch (const std::exception& ex) {
                res.error = ex.what();
            }
        }
    };

    switch (spec.mode) {
    case Mode::analyze:
    case Mode::sweep_q: {
        TableCache cache(opts);
        std::vector<std::optional<PointAnalysis>> results(pts.size());
        note_error(parallel_for(pts.size(), spec.threads, [&](std::size_t i) {
            results[i] = evaluate_point(pts[i], *cache.get(pts[i]));
        }));
        std::vector<PointAnalysis> done;
        for (auto& r : results)
            if (r)
                done.push_back(*r);
        // flag the throughput-maximizing grid point of a q sweep
        std::size_t best = 0;
        for (std::size_t i = 1; i < done.size(); ++i)
            if (done[i].stationary.throughput > done[best].stationary.throughput)
                best = i;
        std::vector<ResultRow> rows;
        for (std::size_t i = 0; i < done.size(); ++i) {
            int flag = spec.mode == Mode::sweep_q && res.complete && i == best ? 1 : 0;
            rows.push_back(analysis_row(done[i], flag));
            res.summary.push_back("U=" + std::to_string(rows.back().users) +
                                  " q=" + format_double(rows.back().q) +
                                  " gammaU=" + format_double(rows.back().gamma_u) +
                                  " dmax=" + std::to_string(rows.back().dmax) +
                                  " S=" + format_double(rows.back().throughput) +
                                  " peak_aoi=" + format_double(rows.back().peak_aoi) +
                                  " mean_active=" + format_double(rows.back().mean_active));
        }
        out.write("analysis.csv", write_rows_csv(rows, false));
        if (spec.dump_dists)
            out.write("stationary.csv", stationary_csv(done));
        if (spec.dump_tables) {
            std::string all;
            for (std::size_t i = 0; i < done.size(); ++i) {
                std::string t = tables_csv(pts[i], *cache.get(pts[i]));
                all += i == 0 ? t : t.substr(t.find('\n') + 1);
            }
            out.write("tables.csv", all);
        }
        break;
    }
    case Mode::sweep_dmax: {
        std::vector<int> dgrid;
        for (const SystemConfig& c : pts)
            dgrid.push_back(c.max_cp_len());
        std::vector<DmaxOptimum> best;
        try {
            best = optimize_over_dmax(spec.base, dgrid, spec.q_search_grid, spec.refine_iters, opts,
                                      spec.threads);
        } catch (const NumericalError& e) {
            res.complete = false;
            res.error = e.what();
        }
        std::vector<ResultRow> rows;
        nlohmann::json qstar = nlohmann::json::array();
        for (const DmaxOptimum& b : best) {
            rows.push_back(analysis_row(b.best_throughput.point, 1));
            rows.push_back(analysis_row(b.best_aoi.point, 2));
            qstar.push_back({{"dmax", b.dmax},
                             {"q_throughput", b.best_throughput.q},
                             {"throughput_refined", b.best_throughput.refined},
                             {"q_peak_aoi", b.best_aoi.q},
                             {"peak_aoi_refined", b.best_aoi.refined}});
            res.summary.push_back("dmax=" + std::to_string(b.dmax) +
                                  " q*_S=" + format_double(b.best_throughput.q) +
                                  " S=" + format_double(b.best_throughput.point.stationary.throughput) +
                                  " q*_aoi=" + format_double(b.best_aoi.q) +
                                  " peak_aoi=" + format_double(b.best_aoi.point.peak_aoi()));
        }
        extra["qstar"] = qstar;
        out.write("analysis.csv", write_rows_csv(rows, false));
        break;
    }
    case Mode::simulate:
    case Mode::compare: {
        std::vector<std::optional<SimMetrics>> sims(pts.size());
        std::vector<std::optional<PointAnalysis>> anas(pts.size());
        TableCache cache(opts);
        note_error(parallel_for(pts.size(), spec.threads, [&](std::size_t i) {
            sims[i] = simulate(pts[i], spec.seed, spec.num_cps, spec.warmup);
            if (spec.mode == Mode::compare)
                anas[i] = evaluate_point(pts[i], *cache.get(pts[i]));
        }));
        std::vector<ResultRow> rows;
        std::vector<CompareRow> cmp;
        int batches = 0;
        for (std::size_t i = 0; i < pts.size(); ++i) {
            if (!sims[i] || (spec.mode == Mode::compare && !anas[i]))
                continue;
            batches = static_cast<int>(sims[i]->throughput_batches.num.size());
            ResultRow s = simulation_row(pts[i], *sims[i]);
            rows.push_back(s);
            std::string line = "U=" + std::to_string(s.users) + " q=" + format_double(s.q) +
                               " S_sim=" + format_double(s.throughput) + "+-" + format_double(*s.tput_ci) +
                               " peak_aoi_sim=" + format_double(s.peak_aoi) + "+-" +
                               format_double(*s.aoi_ci);
            if (anas[i]) {
                ResultRow a = analysis_row(*anas[i]);
                rows.push_back(a);
                cmp.push_back({a, s});
                line += " S_ana=" + format_double(a.throughput) + " peak_aoi_ana=" + format_double(a.peak_aoi);
            }
            res.summary.push_back(line);
        }
        out.write("simulation.csv", write_rows_csv(rows, true));
        if (spec.mode == Mode::compare)
            out.write("compare.csv", compare_csv(cmp, batches));
        if (spec.dump_dists) {
            std::string h = "U,q,gammaU,dmax,kind,index,prob\n";
            for (std::size_t i = 0; i < pts.size(); ++i) {
                if (!sims[i])
                    continue;
                std::string key = std::to_string(pts[i].users()) + "," + format_double(pts[i].tx_prob()) +
                                  "," + format_double(pts[i].load()) + "," +
                                  std::to_string(pts[i].max_cp_len()) + ",";
                auto emit = [&](const char* kind, const ProbVector& p, int offset) {
                    for (std::size_t k = 0; k < p.size(); ++k)
                        h += key + kind + "," + std::to_string(k + offset) + "," + format_double(p[k]) + "\n";
                };
                emit("d", sims[i]->pi_d(), 1);
                emit("n", sims[i]->pi_n(), 0);
                emit("m", sims[i]->pi_m(), 0);
            }
            out.write("sim_histograms.csv", h);
        }
        break;
    }
    case Mode::oracle: {
        std::vector<OracleReport> reps(pts.size());
        note_error(parallel_for(pts.size(), spec.threads, [&](std::size_t i) { reps[i] = oracle_check(pts[i]); }));
        std::string csv = "U,q,dmax,max_abs_dev,status\n";
        for (const OracleReport& r : reps) {
            if (r.users == 0)
                continue;
            csv += join({std::to_string(r.users), format_double(r.q), std::to_string(r.dmax),
                         format_double(r.max_abs_dev), r.pass ? "PASS" : "FAIL"}) +
                   "\n";
            res.all_pass = res.all_pass && r.pass;
            res.summary.push_back(std::string(r.pass ? "PASS" : "FAIL") + " oracle U=" +
                                  std::to_string(r.users) + " q=" + format_double(r.q) +
                                  " dmax=" + std::to_string(r.dmax) +
                                  " max_abs_dev=" + format_double(r.max_abs_dev));
        }
        out.write("oracle.csv", csv);
        break;
    }
    }

    nlohmann::json manifest{{"tool", kToolName},
                            {"version", kToolVersion},
                            {"command", command_line},
                            {"spec", spec_to_json(spec)},
                            {"complete", res.complete},
                            {"files", out.files()}};
    if (!res.complete)
        manifest["error"] = res.error;
    for (auto& [k, v] : extra.items())
        manifest[k] = v;
    std::ofstream mf(spec.out_dir / "manifest.json");
    mf << manifest.dump(2) << "\n";
    return res;
}

}  // namespace faloha

#endif
