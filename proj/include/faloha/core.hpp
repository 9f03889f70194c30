#ifndef FALOHA_CORE_HPP
#define FALOHA_CORE_HPP

#include <charconv>
#include <cmath>
#include <cstddef>
#include <map>
#include <numeric>
#include <span>
#include <stdexcept>
#include <string>
#include <system_error>
#include <utility>
#include <vector>

#include <Eigen/Dense>

namespace faloha {

/// Raised for out-of-range parameters and malformed inputs.
class ConfigError : public std::invalid_argument
{
public:
    using std::invalid_argument::invalid_argument;
};

/// Raised when a numerical routine meets a state it cannot handle
/// (singular system, non-normalizable vector, runaway iteration).
class NumericalError : public std::runtime_error
{
public:
    using std::runtime_error::runtime_error;
};

/// Shortest decimal representation that parses back to the same double.
inline std::string format_double(double value)
{
    char buf[64];
    auto res = std::to_chars(buf, buf + sizeof(buf), value);
    return std::string(buf, res.ptr);
}

inline double parse_double(const std::string& text, const std::string& field)
{
    double value = 0.0;
    const char* first = text.data();
    const char* last = text.data() + text.size();
    auto res = std::from_chars(first, last, value);
    if (res.ec != std::errc() || res.ptr != last)
        throw ConfigError("field '" + field + "': cannot parse '" + text + "' as a number");
    return value;
}

inline long long parse_integer(const std::string& text, const std::string& field)
{
    long long value = 0;
    const char* first = text.data();
    const char* last = text.data() + text.size();
    auto res = std::from_chars(first, last, value);
    if (res.ec != std::errc() || res.ptr != last)
        throw ConfigError("field '" + field + "': cannot parse '" + text + "' as an integer");
    return value;
}

/*
 * Protocol and traffic parameters: population U, access probability q used
 * after the first slot of a contention period, per-slot generation
 * probability gamma, and the maximum contention length d_max in slots.
 */
class SystemConfig
{
public:
    SystemConfig(int users, double tx_prob, double gen_prob, int max_cp_len)
        : users_(users), tx_prob_(tx_prob), gen_prob_(gen_prob), max_cp_len_(max_cp_len)
    {
        if (users < 1)
            throw ConfigError("users: must be >= 1, got " + std::to_string(users));
        if (!(tx_prob > 0.0 && tx_prob <= 1.0))
            throw ConfigError("q: must lie in (0, 1], got " + format_double(tx_prob));
        if (!(gen_prob >= 0.0 && gen_prob <= 1.0))
            throw ConfigError("gamma: must lie in [0, 1], got " + format_double(gen_prob));
        if (max_cp_len < 1)
            throw ConfigError("dmax: must be >= 1, got " + std::to_string(max_cp_len));
    }

    int users() const { return users_; }
    double tx_prob() const { return tx_prob_; }
    double gen_prob() const { return gen_prob_; }
    int max_cp_len() const { return max_cp_len_; }
    double load() const { return gen_prob_ * users_; }

    SystemConfig with_tx_prob(double q) const { return {users_, q, gen_prob_, max_cp_len_}; }
    SystemConfig with_max_cp_len(int d) const { return {users_, tx_prob_, gen_prob_, d}; }

    bool operator==(const SystemConfig&) const = default;

private:
    int users_;
    double tx_prob_;
    double gen_prob_;
    int max_cp_len_;
};

/// Raw textual parameters keyed by name: users, q, gamma | load, dmax.
using ParamMap = std::map<std::string, std::string>;

/*
 * Builds a SystemConfig from raw parameters. The generation probability may
 * be given directly ("gamma") or as the aggregate load gamma*U ("load"), in
 * which case gamma = load / U.
 */
inline SystemConfig validate_config(const ParamMap& raw)
{
    auto need = [&](const char* key) -> const std::string& {
        auto it = raw.find(key);
        if (it == raw.end())
            throw ConfigError(std::string(key) + ": missing parameter");
        return it->second;
    };
    for (const auto& [key, value] : raw) {
        if (key != "users" && key != "q" && key != "gamma" && key != "load" && key != "dmax")
            throw ConfigError(key + ": unknown parameter");
    }

    long long users = parse_integer(need("users"), "users");
    if (users < 1 || users > 100000)
        throw ConfigError("users: must be in [1, 100000], got " + std::to_string(users));
    double q = parse_double(need("q"), "q");
    long long dmax = parse_integer(need("dmax"), "dmax");
    if (dmax < 1 || dmax > 100000)
        throw ConfigError("dmax: must be in [1, 100000], got " + std::to_string(dmax));

    bool has_gamma = raw.count("gamma") > 0;
    bool has_load = raw.count("load") > 0;
    if (has_gamma && has_load)
        throw ConfigError("gamma/load: give exactly one of them");
    if (!has_gamma && !has_load)
        throw ConfigError("gamma: missing parameter (or give load = gamma*U)");

    double gamma = 0.0;
    if (has_gamma) {
        gamma = parse_double(raw.at("gamma"), "gamma");
    } else {
        double load = parse_double(raw.at("load"), "load");
        if (!(load >= 0.0 && load <= static_cast<double>(users)))
            throw ConfigError("load: must lie in [0, U], got " + format_double(load));
        gamma = load / static_cast<double>(users);
    }
    return SystemConfig(static_cast<int>(users), q, gamma, static_cast<int>(dmax));
}

/// Inverse of validate_config; gamma is written directly so the round trip is exact.
inline ParamMap to_params(const SystemConfig& cfg)
{
    return {{"users", std::to_string(cfg.users())},
            {"q", format_double(cfg.tx_prob())},
            {"gamma", format_double(cfg.gen_prob())},
            {"dmax", std::to_string(cfg.max_cp_len())}};
}

inline constexpr double kUnitSumTol = 1e-12;

/// A probability mass function over the index set {0, ..., size-1}.
class ProbVector
{
public:
    ProbVector() = default;

    explicit ProbVector(std::vector<double> entries, double tol = kUnitSumTol)
        : p_(std::move(entries))
    {
        if (p_.empty())
            throw NumericalError("ProbVector: empty support");
        double sum = 0.0;
        for (double x : p_) {
            if (!(x >= 0.0 && x <= 1.0 + tol))
                throw NumericalError("ProbVector: entry outside [0,1]: " + format_double(x));
            sum += x;
        }
        if (std::abs(sum - 1.0) > tol)
            throw NumericalError("ProbVector: entries sum to " + format_double(sum));
    }

    std::size_t size() const { return p_.size(); }
    double operator[](std::size_t i) const { return p_[i]; }
    double at(std::size_t i) const { return i < p_.size() ? p_[i] : 0.0; }
    std::span<const double> values() const { return p_; }
    auto begin() const { return p_.begin(); }
    auto end() const { return p_.end(); }

    /// sum_i (i + offset) * p(i)
    double mean(double offset = 0.0) const
    {
        double m = 0.0;
        for (std::size_t i = 0; i < p_.size(); ++i)
            m += (static_cast<double>(i) + offset) * p_[i];
        return m;
    }

private:
    std::vector<double> p_;
};

/// Scales a nonnegative vector to unit sum.
inline ProbVector normalize(std::span<const double> v)
{
    double sum = 0.0;
    for (double x : v) {
        if (!(x >= 0.0) || !std::isfinite(x))
            throw NumericalError("normalize: negative or non-finite entry");
        sum += x;
    }
    if (!(sum > 0.0))
        throw NumericalError("normalize: vector has no positive entry");
    std::vector<double> out(v.begin(), v.end());
    for (double& x : out)
        x /= sum;
    return ProbVector(std::move(out));
}

/// Square row-stochastic matrix p(i, j) = P{X' = j | X = i}.
class StochasticMatrix
{
public:
    StochasticMatrix() = default;

    explicit StochasticMatrix(Eigen::MatrixXd m, double tol = kUnitSumTol)
        : m_(std::move(m))
    {
        if (m_.rows() != m_.cols() || m_.rows() == 0)
            throw NumericalError("StochasticMatrix: must be square and nonempty");
        for (Eigen::Index i = 0; i < m_.rows(); ++i) {
            if ((m_.row(i).array() < 0.0).any())
                throw NumericalError("StochasticMatrix: negative entry in row " + std::to_string(i));
            double s = m_.row(i).sum();
            if (std::abs(s - 1.0) > tol)
                throw NumericalError("StochasticMatrix: row " + std::to_string(i) + " sums to " +
                                     format_double(s));
        }
    }

    Eigen::Index size() const { return m_.rows(); }
    double operator()(Eigen::Index i, Eigen::Index j) const { return m_(i, j); }
    const Eigen::MatrixXd& matrix() const { return m_; }

private:
    Eigen::MatrixXd m_;
};

/*
 * Binomial(trials, p) pmf. Coefficients by multiplicative recurrence in the
 * linear domain; fine for trials up to ~1000.
 */
inline std::vector<double> binomial_pmf(int trials, double p)
{
    std::vector<double> out(static_cast<std::size_t>(trials) + 1, 0.0);
    if (p <= 0.0) {
        out.front() = 1.0;
        return out;
    }
    if (p >= 1.0) {
        out.back() = 1.0;
        return out;
    }
    double coef = 1.0;
    for (int k = 0; k <= trials; ++k) {
        if (k > 0)
            coef = coef * static_cast<double>(trials - k + 1) / static_cast<double>(k);
        out[static_cast<std::size_t>(k)] = coef * std::pow(p, k) * std::pow(1.0 - p, trials - k);
    }
    return out;
}

/// Binomial coefficient as a double; zero outside 0 <= k <= n.
inline double choose(int n, int k)
{
    if (k < 0 || n < 0 || k > n)
        return 0.0;
    k = std::min(k, n - k);
    double c = 1.0;
    for (int i = 1; i <= k; ++i)
        c = c * static_cast<double>(n - k + i) / static_cast<double>(i);
    return c;
}

/// log C(n, k) for 0 <= k <= n.
inline double log_choose(int n, int k)
{
    return std::lgamma(n + 1.0) - std::lgamma(k + 1.0) - std::lgamma(n - k + 1.0);
}

}  // namespace faloha

#endif
