#pragma once

#include <algorithm>
#include <array>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <limits>
#include <memory>
#include <optional>
#include <random>
#include <span>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <Eigen/Dense>
#include <Eigen/Sparse>

#include <toml.hpp>

#include "assembly.hpp"
#include "coeffrec.hpp"
#include "errors.hpp"
#include "forward.hpp"
#include "geometry.hpp"
#include "kernel.hpp"
#include "log.hpp"
#include "plot.hpp"
#include "staterec.hpp"

namespace fraccal {

// ---------------------------------------------------------------------------
// Configuration

enum class PotentialKind { bump1d, indicator1d, bump2d, table };

/// True potential presets: a (r^2 - x^2)_+, 1_(-c, c), a (r^2-x^2)_+^3 (r^2-y^2)_+^3,
/// or a 1D piecewise-linear table (zero outside its range).
struct PotentialSpec {
    PotentialKind kind = PotentialKind::bump1d;
    double a = 10.0;
    double r = std::sqrt(0.75);
    double c = 0.5;
    std::vector<double> table_x;
    std::vector<double> table_q;

    int dim() const { return kind == PotentialKind::bump2d ? 2 : 1; }

    template <std::size_t N>
    double operator()(const std::array<double, N>& x) const {
        switch (kind) {
            case PotentialKind::bump1d:
                return a * std::max(0.0, r * r - x[0] * x[0]);
            case PotentialKind::indicator1d:
                return std::abs(x[0]) < c ? 1.0 : 0.0;
            case PotentialKind::bump2d: {
                const double px = std::max(0.0, r * r - x[0] * x[0]);
                const double py = N > 1 ? std::max(0.0, r * r - x[N - 1] * x[N - 1]) : 0.0;
                return a * px * px * px * py * py * py;
            }
            case PotentialKind::table: {
                if (table_x.empty() || x[0] < table_x.front() || x[0] > table_x.back()) {
                    return 0.0;
                }
                const auto it = std::upper_bound(table_x.begin(), table_x.end(), x[0]);
                if (it == table_x.end()) {
                    return table_q.back();
                }
                const std::size_t j = static_cast<std::size_t>(it - table_x.begin());
                const double t = (x[0] - table_x[j - 1]) / (table_x[j] - table_x[j - 1]);
                return (1.0 - t) * table_q[j - 1] + t * table_q[j];
            }
        }
        return 0.0;
    }
};

inline std::string to_string(PotentialKind k) {
    switch (k) {
        case PotentialKind::bump1d: return "bump1d";
        case PotentialKind::indicator1d: return "indicator1d";
        case PotentialKind::bump2d: return "bump2d";
        case PotentialKind::table: return "table";
    }
    return "?";
}

/// alpha_q = c delta (linear) or max(c delta^p, floor) (power).
struct AlphaQScheme {
    enum class Kind { linear, power } kind = Kind::linear;
    double c = 0.01;
    double p = 1.5;
    double floor = 1e-14;

    double operator()(double delta) const {
        const double v = kind == Kind::linear ? c * delta : std::max(c * std::pow(delta, p), floor);
        if (!(v > 0.0)) {
            throw ConfigError("alpha_q rule produced a nonpositive value for delta = " + std::to_string(delta));
        }
        return v;
    }
};

struct ExperimentConfig {
    std::string name = "experiment";
    int dim = 1;
    double s = 0.6;
    double R = 3.0;
    double omega_half = 1.0;
    double eps_gap = 0.05;
    double h = 0.0125;
    std::array<double, 2> omega_prime_lo{-std::sqrt(0.75), -std::sqrt(0.75)};
    std::array<double, 2> omega_prime_hi{std::sqrt(0.75), std::sqrt(0.75)};
    double cutoff_width = 0.1;
    PotentialSpec potential;
    std::vector<double> deltas{1e-7, 1e-5, 1e-3, 1e-1};
    AlphaScheme alpha;
    AlphaQScheme alpha_q;
    CoeffMethod method = CoeffMethod::quadratic;
    AdmmOptions admm;
    int tv_target_jumps = 2;
    double debias_threshold = 0.5;
    std::uint64_t seed = 1;
    int fine_ratio = 2;
    bool forbid_inverse_crime = false;
    std::filesystem::path out_dir = "out";
    std::optional<std::filesystem::path> cache_dir;
    bool write_fields = true;
    bool write_plots = true;
    int threads = 0;  ///< 0: hardware concurrency
    std::vector<double> diagnostics_R{2.0, 3.0, 5.0};

    template <int Dim>
    DomainSpec<Dim> domain(double spacing) const {
        DomainSpec<Dim> d{R, omega_half, eps_gap, spacing, {}};
        for (int i = 0; i < Dim; ++i) {
            d.omega_prime.lo[i] = omega_prime_lo[i];
            d.omega_prime.hi[i] = omega_prime_hi[i];
        }
        return d;
    }
    template <int Dim>
    DomainSpec<Dim> domain() const {
        return domain<Dim>(h);
    }
};

/// Log-spaced ladder from lo to hi (inclusive).
inline std::vector<double> log_ladder(double lo, double hi, int count) {
    if (!(lo > 0.0) || !(hi > lo) || count < 2) {
        throw ConfigError("noise ladder needs 0 < min < max and count >= 2");
    }
    std::vector<double> d(static_cast<std::size_t>(count));
    for (int j = 0; j < count; ++j) {
        d[static_cast<std::size_t>(j)] = std::pow(10.0, std::log10(lo) + (std::log10(hi) - std::log10(lo)) * j / (count - 1));
    }
    d.back() = hi;
    return d;
}

/// Throws ConfigError describing the first inconsistency.
inline void validate(const ExperimentConfig& c) {
    if (c.dim != 1 && c.dim != 2) {
        throw ConfigError("dim must be 1 or 2");
    }
    if (!(c.s > 0.0 && c.s < 1.0)) {
        throw ConfigError("fractional order s must lie in (0, 1)");
    }
    if (c.potential.dim() != c.dim) {
        throw ConfigError("potential preset " + to_string(c.potential.kind) + " does not match dim = " +
                          std::to_string(c.dim));
    }
    if (c.potential.kind == PotentialKind::table) {
        const auto& x = c.potential.table_x;
        if (x.size() < 2 || x.size() != c.potential.table_q.size() || !std::is_sorted(x.begin(), x.end()) ||
            std::adjacent_find(x.begin(), x.end()) != x.end()) {
            throw ConfigError("potential table needs >= 2 strictly increasing abscissae and matching values");
        }
    }
    if (c.deltas.empty()) {
        throw ConfigError("noise list is empty");
    }
    for (std::size_t k = 0; k < c.deltas.size(); ++k) {
        if (!(c.deltas[k] > 0.0) || !std::isfinite(c.deltas[k])) {
            throw ConfigError("noise levels must be positive and finite");
        }
        if (k > 0 && !(c.deltas[k] > c.deltas[k - 1])) {
            throw ConfigError("noise levels must be strictly increasing");
        }
    }
    alpha_rule(c.deltas.front(), c.alpha);
    c.alpha_q(c.deltas.front());
    if (c.method == CoeffMethod::tv && c.dim != 1) {
        throw ConfigError("TV coefficient recovery is implemented for dim = 1 only");
    }
    if (c.fine_ratio < 1) {
        throw ConfigError("forward mesh ratio must be a positive integer");
    }
    if (!(c.cutoff_width > 0.0)) {
        throw ConfigError("cutoff width must be positive");
    }
    if (!(c.h > 0.0)) {
        throw ConfigError("mesh spacing must be positive");
    }
    if (c.tv_target_jumps < 0) {
        throw ConfigError("target jump count must be nonnegative");
    }
    for (double r : c.diagnostics_R) {
        if (!(r > c.omega_half + c.eps_gap)) {
            throw ConfigError("diagnostic truncation radii must exceed omega_half + eps_gap");
        }
    }
}

namespace detail {

inline void check_keys(const toml::table& t, std::initializer_list<std::string_view> allowed,
                       const std::string& where) {
    for (const auto& [k, v] : t) {
        if (std::find(allowed.begin(), allowed.end(), k.str()) == allowed.end()) {
            throw ConfigError("unknown key '" + std::string(k.str()) + "' in " + where);
        }
    }
}

inline double num(const toml::node_view<const toml::node>& v, const std::string& what) {
    if (auto d = v.value<double>()) {
        return *d;
    }
    throw ConfigError("expected a number for " + what);
}

template <class T>
void read_num(const toml::table& t, std::string_view key, T& out, const std::string& where) {
    if (auto node = t[key]; node) {
        if constexpr (std::is_same_v<T, bool>) {
            auto b = node.value<bool>();
            if (!b) {
                throw ConfigError("expected a boolean for " + where + "." + std::string(key));
            }
            out = *b;
        } else if constexpr (std::is_integral_v<T>) {
            auto i = node.value<std::int64_t>();
            if (!i || !node.is_integer()) {
                throw ConfigError("expected an integer for " + where + "." + std::string(key));
            }
            out = static_cast<T>(*i);
        } else {
            out = num(node, where + "." + std::string(key));
        }
    }
}

inline std::vector<double> num_array(const toml::node_view<const toml::node>& v, const std::string& what) {
    const auto* arr = v.as_array();
    if (!arr) {
        throw ConfigError("expected an array for " + what);
    }
    std::vector<double> out;
    for (const auto& e : *arr) {
        auto d = e.value<double>();
        if (!d) {
            throw ConfigError("expected numbers in " + what);
        }
        out.push_back(*d);
    }
    return out;
}

inline const toml::table* subtable(const toml::table& root, std::string_view key) {
    const auto node = root[key];
    if (!node) {
        return nullptr;
    }
    if (!node.is_table()) {
        throw ConfigError("'" + std::string(key) + "' must be a table");
    }
    return node.as_table();
}

}  // namespace detail

/// Parses the TOML schema documented in the README. Relative output and
/// cache paths are resolved against `base_dir`.
inline ExperimentConfig parse_config(std::string_view text, const std::filesystem::path& base_dir = {}) {
    toml::table root;
    try {
        root = toml::parse(text);
    } catch (const toml::parse_error& e) {
        std::ostringstream os;
        os << "TOML parse error: " << e.description() << " at line " << e.source().begin.line;
        throw ConfigError(os.str());
    }
    using detail::read_num;
    detail::check_keys(root,
                       {"name", "dim", "s", "seed", "threads", "domain", "exterior", "potential", "noise",
                        "regularization", "coefficient", "forward", "output", "diagnostics"},
                       "top level");
    ExperimentConfig c;
    if (auto n = root["name"].value<std::string>()) {
        c.name = *n;
    }
    read_num(root, "dim", c.dim, "top");
    read_num(root, "s", c.s, "top");
    read_num(root, "threads", c.threads, "top");
    if (auto node = root["seed"]; node) {
        auto v = node.value<std::int64_t>();
        if (!v || *v < 0) {
            throw ConfigError("seed must be a nonnegative integer");
        }
        c.seed = static_cast<std::uint64_t>(*v);
    }
    if (c.dim == 2) {
        c.potential.kind = PotentialKind::bump2d;
        c.potential.a = 100.0;
        c.potential.r = 0.75;
        c.omega_prime_lo = {-0.75, -0.75};
        c.omega_prime_hi = {0.75, 0.75};
    }

    if (const auto* t = detail::subtable(root, "domain")) {
        detail::check_keys(*t, {"R", "omega_half", "eps_gap", "h", "omega_prime", "omega_prime_half"}, "[domain]");
        read_num(*t, "R", c.R, "domain");
        read_num(*t, "omega_half", c.omega_half, "domain");
        read_num(*t, "eps_gap", c.eps_gap, "domain");
        read_num(*t, "h", c.h, "domain");
        if (auto node = (*t)["omega_prime_half"]; node) {
            const double a = detail::num(node, "domain.omega_prime_half");
            c.omega_prime_lo = {-a, -a};
            c.omega_prime_hi = {a, a};
        }
        if (auto node = (*t)["omega_prime"]; node) {
            const auto* arr = node.as_array();
            if (!arr || arr->empty()) {
                throw ConfigError("domain.omega_prime must be [lo, hi] or [[xlo, xhi], [ylo, yhi]]");
            }
            if ((*arr)[0].is_array()) {
                if (static_cast<int>(arr->size()) != c.dim) {
                    throw ConfigError("domain.omega_prime needs one [lo, hi] pair per axis");
                }
                for (int i = 0; i < c.dim; ++i) {
                    const auto pair = detail::num_array(node[static_cast<std::size_t>(i)], "domain.omega_prime");
                    if (pair.size() != 2) {
                        throw ConfigError("domain.omega_prime entries must be [lo, hi]");
                    }
                    c.omega_prime_lo[i] = pair[0];
                    c.omega_prime_hi[i] = pair[1];
                }
            } else {
                const auto pair = detail::num_array(node, "domain.omega_prime");
                if (pair.size() != 2) {
                    throw ConfigError("domain.omega_prime must be [lo, hi]");
                }
                c.omega_prime_lo = {pair[0], pair[0]};
                c.omega_prime_hi = {pair[1], pair[1]};
            }
        }
    }
    if (const auto* t = detail::subtable(root, "exterior")) {
        detail::check_keys(*t, {"cutoff_width"}, "[exterior]");
        read_num(*t, "cutoff_width", c.cutoff_width, "exterior");
    }
    if (const auto* t = detail::subtable(root, "potential")) {
        detail::check_keys(*t, {"preset", "a", "r", "c", "x", "q"}, "[potential]");
        if (auto p = (*t)["preset"].value<std::string>()) {
            if (*p == "bump1d") {
                c.potential = PotentialSpec{};
            } else if (*p == "indicator1d") {
                c.potential.kind = PotentialKind::indicator1d;
            } else if (*p == "bump2d") {
                c.potential.kind = PotentialKind::bump2d;
                c.potential.a = 100.0;
                c.potential.r = 0.75;
            } else if (*p == "table") {
                c.potential.kind = PotentialKind::table;
                c.potential.table_x = detail::num_array((*t)["x"], "potential.x");
                c.potential.table_q = detail::num_array((*t)["q"], "potential.q");
            } else {
                throw ConfigError("unknown potential preset '" + *p + "'");
            }
        }
        read_num(*t, "a", c.potential.a, "potential");
        read_num(*t, "r", c.potential.r, "potential");
        read_num(*t, "c", c.potential.c, "potential");
    }
    if (const auto* t = detail::subtable(root, "noise")) {
        detail::check_keys(*t, {"deltas", "ladder"}, "[noise]");
        if ((*t)["deltas"] && (*t)["ladder"]) {
            throw ConfigError("give either noise.deltas or noise.ladder, not both");
        }
        if (auto node = (*t)["deltas"]; node) {
            c.deltas = detail::num_array(node, "noise.deltas");
        }
        if (const auto* lad = detail::subtable(*t, "ladder")) {
            detail::check_keys(*lad, {"min", "max", "count"}, "noise.ladder");
            double lo = 0.0, hi = 0.0;
            int count = 0;
            read_num(*lad, "min", lo, "noise.ladder");
            read_num(*lad, "max", hi, "noise.ladder");
            read_num(*lad, "count", count, "noise.ladder");
            c.deltas = log_ladder(lo, hi, count);
        }
    }
    if (const auto* t = detail::subtable(root, "regularization")) {
        detail::check_keys(*t,
                           {"alpha_c", "alpha_p", "alpha_floor", "alpha_q_scheme", "alpha_q_c", "alpha_q_p",
                            "alpha_q_floor"},
                           "[regularization]");
        read_num(*t, "alpha_c", c.alpha.c, "regularization");
        read_num(*t, "alpha_p", c.alpha.p, "regularization");
        read_num(*t, "alpha_floor", c.alpha.floor, "regularization");
        if (auto k = (*t)["alpha_q_scheme"].value<std::string>()) {
            if (*k == "linear") {
                c.alpha_q.kind = AlphaQScheme::Kind::linear;
            } else if (*k == "power") {
                c.alpha_q.kind = AlphaQScheme::Kind::power;
            } else {
                throw ConfigError("alpha_q_scheme must be 'linear' or 'power'");
            }
        }
        read_num(*t, "alpha_q_c", c.alpha_q.c, "regularization");
        read_num(*t, "alpha_q_p", c.alpha_q.p, "regularization");
        read_num(*t, "alpha_q_floor", c.alpha_q.floor, "regularization");
    }
    if (const auto* t = detail::subtable(root, "coefficient")) {
        detail::check_keys(*t, {"method", "tv_tol", "tv_max_iter", "tv_target_jumps", "debias_threshold"},
                           "[coefficient]");
        if (auto m = (*t)["method"].value<std::string>()) {
            c.method = parse_coeff_method(*m);
        }
        read_num(*t, "tv_tol", c.admm.tol, "coefficient");
        read_num(*t, "tv_max_iter", c.admm.max_iter, "coefficient");
        read_num(*t, "tv_target_jumps", c.tv_target_jumps, "coefficient");
        read_num(*t, "debias_threshold", c.debias_threshold, "coefficient");
    }
    if (const auto* t = detail::subtable(root, "forward")) {
        detail::check_keys(*t, {"fine_ratio", "forbid_inverse_crime"}, "[forward]");
        read_num(*t, "fine_ratio", c.fine_ratio, "forward");
        read_num(*t, "forbid_inverse_crime", c.forbid_inverse_crime, "forward");
    }
    if (const auto* t = detail::subtable(root, "output")) {
        detail::check_keys(*t, {"dir", "cache", "fields", "plots"}, "[output]");
        if (auto d = (*t)["dir"].value<std::string>()) {
            c.out_dir = *d;
        }
        if (auto d = (*t)["cache"].value<std::string>()) {
            c.cache_dir = std::filesystem::path(*d);
        }
        read_num(*t, "fields", c.write_fields, "output");
        read_num(*t, "plots", c.write_plots, "output");
    }
    if (const auto* t = detail::subtable(root, "diagnostics")) {
        detail::check_keys(*t, {"R_list"}, "[diagnostics]");
        if (auto node = (*t)["R_list"]; node) {
            c.diagnostics_R = detail::num_array(node, "diagnostics.R_list");
        }
    }
    if (!base_dir.empty()) {
        if (c.out_dir.is_relative()) {
            c.out_dir = base_dir / c.out_dir;
        }
        if (c.cache_dir && c.cache_dir->is_relative()) {
            c.cache_dir = base_dir / *c.cache_dir;
        }
    }
    validate(c);
    return c;
}

/// Reads a config file; relative paths inside are taken relative to the working directory.
inline ExperimentConfig load_config(const std::filesystem::path& path) {
    std::ifstream is(path);
    if (!is) {
        throw ConfigError("cannot open config file " + path.string());
    }
    std::stringstream ss;
    ss << is.rdbuf();
    return parse_config(ss.str());
}

/// Per-delta noise seed derived from the run seed and the ladder index.
inline std::uint64_t delta_seed(std::uint64_t seed, std::size_t index) {
    std::seed_seq seq{static_cast<std::uint32_t>(seed & 0xffffffffu), static_cast<std::uint32_t>(seed >> 32),
                      static_cast<std::uint32_t>(index)};
    std::array<std::uint32_t, 2> out{};
    seq.generate(out.begin(), out.end());
    return (static_cast<std::uint64_t>(out[0]) << 32) | out[1];
}

// ---------------------------------------------------------------------------
// Results

struct DeltaRecord {
    std::size_t index = 0;
    double delta = 0.0;
    std::uint64_t seed = 0;
    double alpha = 0.0;
    double alpha_q = 0.0;
    double alpha_tv = std::numeric_limits<double>::quiet_NaN();
    double residual_Y = 0.0;
    double state_err_S = 0.0, state_err_S_rel = 0.0;
    double state_err_L2 = 0.0, state_err_L2_rel = 0.0;
    ErrorDecomposition decomposition;
    double q_err_linf = 0.0, q_err_linf_rel = 0.0;
    double q_err_l2 = 0.0, q_err_l2_rel = 0.0;
    double q_max = 0.0;
    std::array<double, 2> q_argmax{};
    double baseline_q_err_linf = 0.0, baseline_q_err_linf_rel = 0.0;
    bool admm_converged = true;
    int admm_iterations = 0;
    bool debias_empty = false;
    double support_lo = std::numeric_limits<double>::quiet_NaN();
    double support_hi = std::numeric_limits<double>::quiet_NaN();
    double level = std::numeric_limits<double>::quiet_NaN();
    double runtime_s = 0.0;

    std::vector<double> state;     ///< reconstructed u0 at interior dofs
    std::vector<double> q_values;  ///< final coefficient per element of Omega'
    std::vector<double> q_baseline;
};

struct StabilityFit {
    double gamma = 0.0;
    double C = 0.0;
    double r2 = 0.0;
    std::size_t n = 0;
};

struct ExperimentResult {
    ExperimentConfig config;
    int num_dofs = 0;
    int num_obs = 0;
    int num_fine_dofs = 0;
    double data_mismatch = 0.0;  ///< ||B u0_ref - mu||_Y / ||mu||_Y on clean data
    double q_sup = 0.0;
    std::vector<std::array<double, 2>> dof_points;
    std::vector<double> u0_ref;
    std::vector<std::array<double, 2>> q_points;  ///< element centroids of Omega'
    std::vector<std::vector<std::array<double, 2>>> q_polygons;
    std::vector<double> q_true;  ///< element means of the true potential
    std::vector<DeltaRecord> records;
    std::optional<StabilityFit> fit;
    double assembly_s = 0.0;
    double total_s = 0.0;
};

/// Least squares of log e = log C - gamma log|log delta|.
inline StabilityFit fit_stability(std::span<const double> deltas, std::span<const double> errors) {
    if (deltas.size() != errors.size()) {
        throw ConfigError("fit_stability: deltas and errors differ in length");
    }
    if (deltas.size() < 3) {
        throw ConfigError("fit_stability needs at least 3 points");
    }
    const std::size_t n = deltas.size();
    std::vector<double> x(n), y(n);
    for (std::size_t i = 0; i < n; ++i) {
        if (!(deltas[i] > 0.0 && deltas[i] < 1.0)) {
            throw ConfigError("fit_stability: noise levels must lie in (0, 1)");
        }
        if (!(errors[i] > 0.0) || !std::isfinite(errors[i])) {
            throw ConfigError("fit_stability: errors must be positive and finite");
        }
        x[i] = std::log(std::abs(std::log(deltas[i])));
        y[i] = std::log(errors[i]);
    }
    double mx = 0.0, my = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        mx += x[i] / n;
        my += y[i] / n;
    }
    double sxx = 0.0, sxy = 0.0, syy = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        sxx += (x[i] - mx) * (x[i] - mx);
        sxy += (x[i] - mx) * (y[i] - my);
        syy += (y[i] - my) * (y[i] - my);
    }
    if (!(sxx > 1e-24 * std::max(1.0, mx * mx))) {
        throw ConfigError("fit_stability: degenerate input (all noise levels equal)");
    }
    const double slope = sxy / sxx;
    StabilityFit f;
    f.gamma = -slope;
    f.C = std::exp(my - slope * mx);
    f.r2 = syy > 0.0 ? (sxy * sxy) / (sxx * syy) : 1.0;
    f.n = n;
    return f;
}

// ---------------------------------------------------------------------------
// Experiment runner

namespace detail {

template <class F>
auto staged(const std::string& stage, F&& f) -> decltype(f()) {
    try {
        return f();
    } catch (const StageError&) {
        throw;
    } catch (const NumericalError& e) {
        throw StageError(stage, e.what(), true);
    } catch (const ConfigError& e) {
        throw StageError(stage, e.what(), false);
    }
}

inline std::string num17(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

template <int Dim>
std::array<double, 2> as2(const Point<Dim>& p) {
    return {p[0], Dim > 1 ? p[Dim - 1] : 0.0};
}

template <int Dim>
std::shared_ptr<AssembledOperators<Dim>> operators_for(const ExperimentConfig& cfg, const DomainSpec<Dim>& spec) {
    auto mesh = std::make_shared<const Mesh<Dim>>(build_mesh<Dim>(spec));
    const auto fo = make_frac_order(cfg.s, Dim);
    const auto cut = make_cutoff(spec, cfg.cutoff_width);
    const AssemblyOptions opt;
    const std::uint64_t key = fnv1a64(operators_key(spec, fo, cut, opt.quad));
    std::filesystem::path file;
    if (cfg.cache_dir) {
        char name[64];
        std::snprintf(name, sizeof name, "operators_%016llx.bin", static_cast<unsigned long long>(key));
        file = *cfg.cache_dir / name;
        if (auto ops = load_operators<Dim>(file, mesh, fo, cut, key)) {
            return std::make_shared<AssembledOperators<Dim>>(std::move(*ops));
        }
    }
    auto ops = std::make_shared<AssembledOperators<Dim>>(assemble_operators<Dim>(mesh, fo, cut, opt));
    if (cfg.cache_dir) {
        std::filesystem::create_directories(*cfg.cache_dir);
        save_operators<Dim>(file, *ops, key);
    }
    return ops;
}

}  // namespace detail

/// Assembled operators for the reconstruction mesh and the forward-data mesh.
template <int Dim>
struct ExperimentOperators {
    std::shared_ptr<AssembledOperators<Dim>> coarse;
    std::shared_ptr<AssembledOperators<Dim>> fine;  ///< same object as coarse when the ratio is 1
};

template <int Dim>
ExperimentOperators<Dim> build_experiment_operators(const ExperimentConfig& cfg) {
    return detail::staged("assemble", [&] {
        ExperimentOperators<Dim> out;
        out.coarse = detail::operators_for<Dim>(cfg, cfg.domain<Dim>());
        out.fine = cfg.fine_ratio == 1 ? out.coarse
                                       : detail::operators_for<Dim>(cfg, cfg.domain<Dim>(cfg.h / cfg.fine_ratio));
        return out;
    });
}

/// Clean synthetic data for the configured potential.
template <int Dim>
SyntheticData<Dim> synthesize(const ExperimentConfig& cfg, const ExperimentOperators<Dim>& ops) {
    return detail::staged("forward", [&] {
        const auto& q = cfg.potential;
        SynthesisOptions so;
        so.forbid_inverse_crime = cfg.forbid_inverse_crime;
        return synthesize_clean<Dim>(*ops.fine, *ops.coarse->mesh, [&](const Point<Dim>& x) { return q(x); }, so);
    });
}

namespace detail {

/// Element means of q and the L2 quadrature data on the Omega' elements.
template <int Dim>
struct PotentialSamples {
    std::vector<double> mean;
    std::vector<std::vector<std::pair<double, double>>> points;  ///< (weight, q) per element
    double sup = 0.0;
};

template <int Dim>
PotentialSamples<Dim> sample_potential(const Mesh<Dim>& mesh, std::span<const int> elements,
                                       const PotentialSpec& q) {
    PotentialSamples<Dim> out;
    for (int e : elements) {
        const auto K = element_simplex(mesh, e);
        double acc = 0.0;
        std::vector<std::pair<double, double>> pts;
        for_each_point<Dim>(K, 8, [&](const Point<Dim>& x, const auto&, double w) {
            const double v = q(x);
            pts.emplace_back(w, v);
            acc += w * v;
            out.sup = std::max(out.sup, std::abs(v));
        });
        for (const auto& v : K.v) {
            out.sup = std::max(out.sup, std::abs(q(v)));
        }
        out.mean.push_back(acc / K.measure());
        out.points.push_back(std::move(pts));
    }
    return out;
}

template <int Dim>
void fill_q_metrics(DeltaRecord& r, const Mesh<Dim>& mesh, std::span<const int> elements,
                    const PotentialSamples<Dim>& qs, const CoefficientField& field, const CoefficientField& baseline) {
    double linf = 0.0, l2 = 0.0, l2ref = 0.0, base = 0.0;
    std::size_t arg = 0;
    for (std::size_t k = 0; k < elements.size(); ++k) {
        linf = std::max(linf, std::abs(field.values[k] - qs.mean[k]));
        base = std::max(base, std::abs(baseline.values[k] - qs.mean[k]));
        for (const auto& [w, v] : qs.points[k]) {
            l2 += w * (field.values[k] - v) * (field.values[k] - v);
            l2ref += w * v * v;
        }
        if (field.values[k] > field.values[arg]) {
            arg = k;
        }
    }
    const double sup = qs.sup > 0.0 ? qs.sup : 1.0;
    r.q_err_linf = linf;
    r.q_err_linf_rel = linf / sup;
    r.baseline_q_err_linf = base;
    r.baseline_q_err_linf_rel = base / sup;
    r.q_err_l2 = std::sqrt(l2);
    r.q_err_l2_rel = l2ref > 0.0 ? std::sqrt(l2 / l2ref) : std::sqrt(l2);
    r.q_max = field.values[arg];
    r.q_argmax = as2<Dim>(mesh.centroid(elements[arg]));
    r.q_values = field.values;
    r.q_baseline = baseline.values;
    if constexpr (Dim == 1) {
        if (field.method == CoeffMethod::tv) {
            for (std::size_t k = 0; k < elements.size(); ++k) {
                if (field.values[k] > 0.0) {
                    const auto v = mesh.vertices(elements[k]);
                    const double lo = std::min(v[0][0], v[1][0]), hi = std::max(v[0][0], v[1][0]);
                    r.support_lo = std::isnan(r.support_lo) ? lo : std::min(r.support_lo, lo);
                    r.support_hi = std::isnan(r.support_hi) ? hi : std::max(r.support_hi, hi);
                    r.level = field.values[k];
                }
            }
        }
    }
}

}  // namespace detail

/// Shared read-only state for per-delta runs.
template <int Dim>
struct ExperimentContext {
    const ExperimentConfig* cfg = nullptr;
    ExperimentOperators<Dim> ops;
    SyntheticData<Dim> data;
    std::unique_ptr<StateSolver<Dim>> solver;
    std::vector<int> elements;
    detail::PotentialSamples<Dim> samples;
};

template <int Dim>
ExperimentContext<Dim> prepare_experiment(const ExperimentConfig& cfg) {
    validate(cfg);
    ExperimentContext<Dim> ctx;
    ctx.cfg = &cfg;
    ctx.ops = build_experiment_operators<Dim>(cfg);
    ctx.data = synthesize<Dim>(cfg, ctx.ops);
    ctx.solver = detail::staged("state", [&] { return std::make_unique<StateSolver<Dim>>(*ctx.ops.coarse); });
    const auto& mesh = *ctx.ops.coarse->mesh;
    ctx.elements = detail::staged("coefficient", [&] { return coefficient_elements(mesh, cfg.domain<Dim>().omega_prime); });
    ctx.samples = detail::sample_potential<Dim>(mesh, ctx.elements, cfg.potential);
    return ctx;
}

/// Full reconstruction for one noise level of the ladder.
template <int Dim>
DeltaRecord run_delta(const ExperimentContext<Dim>& ctx, std::size_t index, double delta) {
    const auto t0 = std::chrono::steady_clock::now();
    const auto& cfg = *ctx.cfg;
    const auto& ops = *ctx.ops.coarse;
    const auto& mesh = *ops.mesh;
    DeltaRecord r;
    r.index = index;
    r.delta = delta;
    r.seed = delta_seed(cfg.seed, index);
    const auto meas = detail::staged(
        "forward", [&] { return make_measurement<Dim>(mesh, ops.W_obs, ctx.data.mu_clean, delta, r.seed); });
    r.alpha = detail::staged("state", [&] { return alpha_rule(delta, cfg.alpha); });
    r.alpha_q = detail::staged("coefficient", [&] { return cfg.alpha_q(delta); });

    const auto noisy = detail::staged("state", [&] { return ctx.solver->solve(meas.mu_noisy, r.alpha); });
    const auto clean = detail::staged("state", [&] { return ctx.solver->solve(meas.mu_clean, r.alpha); });
    const Eigen::VectorXd& ref = ctx.data.u0_ref;
    r.residual_Y = noisy.residual_Y;
    r.state_err_S = ops.norm_S(noisy.v - ref);
    r.state_err_S_rel = r.state_err_S / ops.norm_S(ref);
    r.state_err_L2 = ops.norm_L2(noisy.v - ref);
    r.state_err_L2_rel = r.state_err_L2 / ops.norm_L2(ref);
    r.decomposition = {r.state_err_S, ops.norm_S(clean.v - ref), ops.norm_S(noisy.v - clean.v)};
    r.state.assign(noisy.v.data(), noisy.v.data() + noisy.v.size());

    detail::staged("coefficient", [&] {
        const Eigen::VectorXd w = recover_wh(ops, noisy.v);
        const auto mom = element_moments(mesh, std::span<const int>(ctx.elements), noisy.v, w);
        const auto baseline = reconstruct_q_quadratic(ctx.elements, mom, r.alpha_q);
        if (cfg.method == CoeffMethod::quadratic) {
            detail::fill_q_metrics<Dim>(r, mesh, ctx.elements, ctx.samples, baseline, baseline);
            return 0;
        }
        const auto sel = adaptive_alpha_tv(baseline, mom, cfg.admm, cfg.tv_target_jumps);
        const auto final_q = debias(sel.field, mom, cfg.debias_threshold, 0.0, 1.0);
        r.alpha_tv = sel.field.alpha_tv;
        r.admm_converged = sel.field.converged;
        r.admm_iterations = sel.field.iterations;
        r.debias_empty = final_q.empty_support;
        detail::fill_q_metrics<Dim>(r, mesh, ctx.elements, ctx.samples, final_q, baseline);
        return 0;
    });
    r.runtime_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return r;
}

namespace detail {

inline int thread_count(const ExperimentConfig& cfg, std::size_t jobs) {
    int t = cfg.threads > 0 ? cfg.threads : static_cast<int>(std::thread::hardware_concurrency());
    return std::clamp(t, 1, static_cast<int>(std::max<std::size_t>(1, jobs)));
}

}  // namespace detail

inline void write_experiment_outputs(const ExperimentResult& result);

template <int Dim>
ExperimentResult run_experiment_dim(const ExperimentConfig& cfg, bool write_outputs) {
    const auto t0 = std::chrono::steady_clock::now();
    ExperimentResult res;
    res.config = cfg;
    const auto ctx = prepare_experiment<Dim>(cfg);
    res.assembly_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    const auto& ops = *ctx.ops.coarse;
    const auto& mesh = *ops.mesh;
    res.num_dofs = mesh.num_dofs();
    res.num_obs = mesh.num_obs();
    res.num_fine_dofs = ctx.ops.fine->mesh->num_dofs();
    res.data_mismatch = ops.norm_Y(ops.B * ctx.data.u0_ref - ctx.data.mu_clean) / ops.norm_Y(ctx.data.mu_clean);
    res.q_sup = ctx.samples.sup;
    for (int n : mesh.interior_dofs) {
        res.dof_points.push_back(detail::as2<Dim>(mesh.nodes[n]));
    }
    res.u0_ref.assign(ctx.data.u0_ref.data(), ctx.data.u0_ref.data() + ctx.data.u0_ref.size());
    for (std::size_t k = 0; k < ctx.elements.size(); ++k) {
        const int e = ctx.elements[k];
        res.q_points.push_back(detail::as2<Dim>(mesh.centroid(e)));
        std::vector<std::array<double, 2>> poly;
        for (const auto& v : mesh.vertices(e)) {
            poly.push_back(detail::as2<Dim>(v));
        }
        res.q_polygons.push_back(std::move(poly));
    }
    res.q_true = ctx.samples.mean;

    // independent noise levels; results land in their own slot so order is fixed
    const std::size_t n = cfg.deltas.size();
    res.records.resize(n);
    std::vector<std::exception_ptr> errors(n);
    const int threads = detail::thread_count(cfg, n);
    std::vector<std::thread> pool;
    std::atomic<std::size_t> next{0};
    auto worker = [&] {
        for (std::size_t k = next++; k < n; k = next++) {
            try {
                res.records[k] = run_delta<Dim>(ctx, k, cfg.deltas[k]);
            } catch (...) {
                errors[k] = std::current_exception();
            }
        }
    };
    for (int t = 1; t < threads; ++t) {
        pool.emplace_back(worker);
    }
    worker();
    for (auto& th : pool) {
        th.join();
    }
    for (const auto& e : errors) {
        if (e) {
            std::rethrow_exception(e);
        }
    }
    std::vector<double> d, err;
    for (const auto& r : res.records) {
        if (r.delta < 1.0 && r.q_err_linf > 0.0) {
            d.push_back(r.delta);
            err.push_back(r.q_err_linf);
        }
    }
    if (d.size() >= 3) {
        try {
            res.fit = fit_stability(d, err);
        } catch (const ConfigError& e) {
            warn(std::string("stability fit skipped: ") + e.what());
        }
    }
    res.total_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    if (write_outputs) {
        write_experiment_outputs(res);
    }
    return res;
}

/// Synthesize, reconstruct and score every noise level of the configuration.
inline ExperimentResult run_experiment(const ExperimentConfig& cfg, bool write_outputs = true) {
    return cfg.dim == 1 ? run_experiment_dim<1>(cfg, write_outputs) : run_experiment_dim<2>(cfg, write_outputs);
}

// ---------------------------------------------------------------------------
// CSV output

namespace detail {

inline std::ofstream open_out(const std::filesystem::path& path) {
    std::ofstream os(path);
    if (!os) {
        throw std::runtime_error("cannot write " + path.string());
    }
    return os;
}

}  // namespace detail

inline const char* kRecordHeader =
    "index,delta,seed,alpha,alpha_q,alpha_tv,residual_Y,state_err_S,state_err_S_rel,state_err_L2,state_err_L2_rel,"
    "bias_S,noise_S,total_S,q_err_linf,q_err_linf_rel,q_err_l2,q_err_l2_rel,q_max,q_argmax_x,q_argmax_y,"
    "baseline_q_err_linf,baseline_q_err_linf_rel,admm_converged,admm_iterations,debias_empty,support_lo,support_hi,"
    "level";

inline void write_records_csv(const std::filesystem::path& path, const std::vector<DeltaRecord>& recs) {
    auto os = detail::open_out(path);
    using detail::num17;
    os << kRecordHeader << '\n';
    for (const auto& r : recs) {
        os << r.index << ',' << num17(r.delta) << ',' << r.seed << ',' << num17(r.alpha) << ',' << num17(r.alpha_q)
           << ',' << num17(r.alpha_tv) << ',' << num17(r.residual_Y) << ',' << num17(r.state_err_S) << ','
           << num17(r.state_err_S_rel) << ',' << num17(r.state_err_L2) << ',' << num17(r.state_err_L2_rel) << ','
           << num17(r.decomposition.bias) << ',' << num17(r.decomposition.noise) << ','
           << num17(r.decomposition.total) << ',' << num17(r.q_err_linf) << ',' << num17(r.q_err_linf_rel) << ','
           << num17(r.q_err_l2) << ',' << num17(r.q_err_l2_rel) << ',' << num17(r.q_max) << ','
           << num17(r.q_argmax[0]) << ',' << num17(r.q_argmax[1]) << ',' << num17(r.baseline_q_err_linf) << ','
           << num17(r.baseline_q_err_linf_rel) << ',' << (r.admm_converged ? 1 : 0) << ',' << r.admm_iterations
           << ',' << (r.debias_empty ? 1 : 0) << ',' << num17(r.support_lo) << ',' << num17(r.support_hi) << ','
           << num17(r.level) << '\n';
    }
}

/// Reads (delta, column) pairs from a records CSV.
inline std::pair<std::vector<double>, std::vector<double>> read_records_column(const std::filesystem::path& path,
                                                                               const std::string& column) {
    std::ifstream is(path);
    if (!is) {
        throw ConfigError("cannot open " + path.string());
    }
    std::string line;
    if (!std::getline(is, line)) {
        throw ConfigError(path.string() + " is empty");
    }
    auto split = [](const std::string& s) {
        std::vector<std::string> out;
        std::stringstream ss(s);
        std::string item;
        while (std::getline(ss, item, ',')) {
            out.push_back(item);
        }
        return out;
    };
    const auto head = split(line);
    const auto find = [&](const std::string& name) {
        const auto it = std::find(head.begin(), head.end(), name);
        if (it == head.end()) {
            throw ConfigError(path.string() + " has no column '" + name + "'");
        }
        return static_cast<std::size_t>(it - head.begin());
    };
    const std::size_t id = find("delta"), ie = find(column);
    std::vector<double> d, e;
    while (std::getline(is, line)) {
        if (line.empty()) {
            continue;
        }
        const auto cells = split(line);
        if (cells.size() <= std::max(id, ie)) {
            throw ConfigError("short row in " + path.string());
        }
        try {
            d.push_back(std::stod(cells[id]));
            e.push_back(std::stod(cells[ie]));
        } catch (const std::exception&) {
            throw ConfigError("non-numeric entry in " + path.string());
        }
    }
    return {d, e};
}

inline void write_fit_csv(const std::filesystem::path& path, const StabilityFit& f) {
    auto os = detail::open_out(path);
    os << "gamma,C,r2,n\n"
       << detail::num17(f.gamma) << ',' << detail::num17(f.C) << ',' << detail::num17(f.r2) << ',' << f.n << '\n';
}

// ---------------------------------------------------------------------------
// Plots

inline std::vector<std::filesystem::path> emit_plots(const ExperimentResult& res, const std::filesystem::path& dir) {
    if (res.records.empty()) {
        throw ConfigError("no records");
    }
    std::filesystem::create_directories(dir);
    using detail::num17;
    const auto& pal = svg::palette();
    const bool one_d = res.config.dim == 1;
    std::vector<std::filesystem::path> files;
    const auto& best = res.records.front();  // smallest noise level

    // state overlay
    {
        auto os = detail::open_out(dir / "fig_state.csv");
        os << "x,y,u0_ref";
        for (const auto& r : res.records) {
            os << ",u0_delta_" << r.index;
        }
        os << '\n';
        for (std::size_t i = 0; i < res.dof_points.size(); ++i) {
            os << num17(res.dof_points[i][0]) << ',' << num17(res.dof_points[i][1]) << ',' << num17(res.u0_ref[i]);
            for (const auto& r : res.records) {
                os << ',' << num17(r.state[i]);
            }
            os << '\n';
        }
        const auto path = dir / "fig_state.svg";
        if (one_d) {
            svg::LinePlot p{"interior state u0", "x", "u0", false, false, {}};
            std::vector<double> xs;
            for (const auto& pt : res.dof_points) {
                xs.push_back(pt[0]);
            }
            p.series.push_back({"reference", xs, res.u0_ref, "black", false, true});
            for (std::size_t k = 0; k < res.records.size(); ++k) {
                p.series.push_back({"delta=" + svg::detail::fmt(res.records[k].delta), xs, res.records[k].state,
                                    pal[k % pal.size()]});
            }
            svg::write_line_plot(path, p);
        } else {
            // nodal values on a regular grid: draw one square per dof
            svg::PatchPlot p{"reconstructed u0, delta=" + svg::detail::fmt(best.delta), {}, best.state};
            const double hh = 0.5 * res.config.h;
            for (const auto& pt : res.dof_points) {
                p.polygons.push_back({{pt[0] - hh, pt[1] - hh}, {pt[0] + hh, pt[1] - hh}, {pt[0] + hh, pt[1] + hh},
                                      {pt[0] - hh, pt[1] + hh}});
            }
            svg::write_patch_plot(path, p);
        }
        files.push_back(path);
    }

    // error decomposition
    {
        auto os = detail::open_out(dir / "fig_decomposition.csv");
        os << "delta,total_S,bias_S,noise_S\n";
        svg::LinePlot p{"state error decomposition (S-norm)", "delta", "error", true, true, {}};
        svg::Series tot{"total", {}, {}, pal[0], true}, bias{"bias", {}, {}, pal[1], true},
            noise{"noise", {}, {}, pal[2], true};
        for (const auto& r : res.records) {
            os << num17(r.delta) << ',' << num17(r.decomposition.total) << ',' << num17(r.decomposition.bias) << ','
               << num17(r.decomposition.noise) << '\n';
            for (auto* s : {&tot, &bias, &noise}) {
                s->x.push_back(r.delta);
            }
            tot.y.push_back(r.decomposition.total);
            bias.y.push_back(r.decomposition.bias);
            noise.y.push_back(r.decomposition.noise);
        }
        p.series = {tot, bias, noise};
        const auto path = dir / "fig_decomposition.svg";
        svg::write_line_plot(path, p);
        files.push_back(path);
    }

    // potential
    {
        auto os = detail::open_out(dir / "fig_q.csv");
        os << "x,y,q_true";
        for (const auto& r : res.records) {
            os << ",q_delta_" << r.index;
        }
        os << '\n';
        for (std::size_t i = 0; i < res.q_points.size(); ++i) {
            os << num17(res.q_points[i][0]) << ',' << num17(res.q_points[i][1]) << ',' << num17(res.q_true[i]);
            for (const auto& r : res.records) {
                os << ',' << num17(r.q_values[i]);
            }
            os << '\n';
        }
        const auto path = dir / "fig_q.svg";
        if (one_d) {
            svg::LinePlot p{"potential q", "x", "q", false, false, {}};
            std::vector<double> xs;
            for (const auto& pt : res.q_points) {
                xs.push_back(pt[0]);
            }
            p.series.push_back({"true", xs, res.q_true, "black", false, true});
            for (std::size_t k = 0; k < res.records.size(); ++k) {
                p.series.push_back({"delta=" + svg::detail::fmt(res.records[k].delta), xs, res.records[k].q_values,
                                    pal[k % pal.size()]});
            }
            svg::write_line_plot(path, p);
        } else {
            svg::write_patch_plot(path, {"recovered q, delta=" + svg::detail::fmt(best.delta), res.q_polygons,
                                         best.q_values});
        }
        files.push_back(path);
    }

    // stability trend
    if (res.records.size() > 1) {
        auto os = detail::open_out(dir / "fig_stability.csv");
        os << "delta,q_err_linf,fit\n";
        svg::LinePlot p{"potential error vs noise", "delta", "||q_h - q||_inf", true, true, {}};
        svg::Series data{"error", {}, {}, pal[0], true}, model{"fit", {}, {}, pal[1], false, true};
        for (const auto& r : res.records) {
            const double fit = res.fit ? res.fit->C * std::pow(std::abs(std::log(r.delta)), -res.fit->gamma)
                                       : std::numeric_limits<double>::quiet_NaN();
            os << num17(r.delta) << ',' << num17(r.q_err_linf) << ',' << num17(fit) << '\n';
            data.x.push_back(r.delta);
            data.y.push_back(r.q_err_linf);
            if (res.fit) {
                model.x.push_back(r.delta);
                model.y.push_back(fit);
            }
        }
        p.series.push_back(data);
        if (res.fit) {
            model.label = "C=" + svg::detail::fmt(res.fit->C) + " g=" + svg::detail::fmt(res.fit->gamma);
            p.series.push_back(model);
        }
        const auto path = dir / "fig_stability.svg";
        svg::write_line_plot(path, p);
        files.push_back(path);
    }
    return files;
}

inline void write_experiment_outputs(const ExperimentResult& res) {
    const auto& cfg = res.config;
    std::filesystem::create_directories(cfg.out_dir);
    write_records_csv(cfg.out_dir / "records.csv", res.records);
    if (res.fit) {
        write_fit_csv(cfg.out_dir / "fit.csv", *res.fit);
    }
    if (cfg.write_fields) {
        using detail::num17;
        for (const auto& r : res.records) {
            auto su = detail::open_out(cfg.out_dir / ("state_" + std::to_string(r.index) + ".csv"));
            su << "x,y,u0_ref,u0\n";
            for (std::size_t i = 0; i < res.dof_points.size(); ++i) {
                su << num17(res.dof_points[i][0]) << ',' << num17(res.dof_points[i][1]) << ',' << num17(res.u0_ref[i])
                   << ',' << num17(r.state[i]) << '\n';
            }
            auto sq = detail::open_out(cfg.out_dir / ("q_" + std::to_string(r.index) + ".csv"));
            sq << "x,y,q_true,q,q_quadratic\n";
            for (std::size_t i = 0; i < res.q_points.size(); ++i) {
                sq << num17(res.q_points[i][0]) << ',' << num17(res.q_points[i][1]) << ',' << num17(res.q_true[i])
                   << ',' << num17(r.q_values[i]) << ',' << num17(r.q_baseline[i]) << '\n';
            }
        }
    }
    if (cfg.write_plots) {
        emit_plots(res, cfg.out_dir / "plots");
    }
    // timings are kept out of the CSV files so that those stay byte-reproducible
    auto os = detail::open_out(cfg.out_dir / "summary.txt");
    os << "name " << cfg.name << "\ndim " << cfg.dim << "\nh " << cfg.h << "\nfine_ratio " << cfg.fine_ratio
       << "\ndofs " << res.num_dofs << "\nobservations " << res.num_obs << "\nfine_dofs " << res.num_fine_dofs
       << "\ndata_mismatch " << res.data_mismatch << "\nassembly_seconds " << res.assembly_s << "\ntotal_seconds "
       << res.total_s << '\n';
    for (const auto& r : res.records) {
        os << "delta " << r.delta << " alpha " << r.alpha << " q_err_linf_rel " << r.q_err_linf_rel
           << " state_err_S_rel " << r.state_err_S_rel << " seconds " << r.runtime_s << '\n';
    }
    if (res.fit) {
        os << "fit gamma " << res.fit->gamma << " C " << res.fit->C << " r2 " << res.fit->r2 << '\n';
    }
}

// ---------------------------------------------------------------------------
// Consistency diagnostics

struct ConsistencyRow {
    double R = 0.0;
    double h = 0.0;
    double eta_t = 0.0;
    double eta_I = std::numeric_limits<double>::quiet_NaN();
};

namespace detail {

/// y_n = a(u, phi_n) for every node n, with the tail term included.
template <int Dim>
Eigen::VectorXd energy_apply(const Mesh<Dim>& mesh, const FracOrder& fo, const Eigen::VectorXd& u,
                             const QuadratureOptions& qo = {}) {
    const int ne = static_cast<int>(mesh.elements.size());
    std::vector<char> active(ne);
    for (int e = 0; e < ne; ++e) {
        for (int node : mesh.elements[e]) {
            active[e] |= u[node] != 0.0;
        }
    }
    Eigen::VectorXd y = Eigen::VectorXd::Zero(u.size());
    for (int ea = 0; ea < ne; ++ea) {
        for (int eb = ea; eb < ne; ++eb) {
            if (!active[ea] && !active[eb]) {
                continue;
            }
            const auto pm = pair_matrix<Dim>(fo, mesh, ea, eb, qo);
            const double factor = ea == eb ? 0.5 : 1.0;
            for (std::size_t a = 0; a < pm.nodes.size(); ++a) {
                const double ua = u[pm.nodes[a]];
                if (ua == 0.0) {
                    continue;
                }
                for (std::size_t b = 0; b < pm.nodes.size(); ++b) {
                    y[pm.nodes[b]] += factor * ua * pm.value(a, b);
                }
            }
        }
    }
    const double R = mesh.spec.R;
    const int order = Dim == 1 ? qo.exterior_order_1d : qo.exterior_order_2d;
    const int depth = Dim == 1 ? qo.exterior_depth_1d : qo.exterior_depth_2d;
    for (int e = 0; e < ne; ++e) {
        if (!active[e]) {
            continue;
        }
        const auto loc = weighted_local_matrix<Dim>(
            element_simplex(mesh, e), [&](const Point<Dim>& x) { return tail_weight<Dim>(fo, x, R); },
            [&](const Point<Dim>& x) { return on_box_boundary<Dim>(x, R); }, order, depth);
        for (int a = 0; a <= Dim; ++a) {
            for (int b = 0; b <= Dim; ++b) {
                y[mesh.elements[e][b]] += u[mesh.elements[e][a]] * loc(a, b);
            }
        }
    }
    return fo.c_ds * y;
}

}  // namespace detail

/// eta_t: Y-norm of c u_hf(x_k) int_{R^d \ Omega_R} |x_k - y|^{-d-2s} dy.
template <int Dim>
double eta_truncation(const Mesh<Dim>& mesh, const FracOrder& fo, const Cutoff& cutoff) {
    Eigen::VectorXd t(mesh.num_obs());
    for (int k = 0; k < mesh.num_obs(); ++k) {
        const auto& x = mesh.nodes[mesh.obs_nodes[k]];
        const double u = cutoff(x);
        t[k] = u == 0.0 ? 0.0 : fo.c_ds * u * tail_weight<Dim>(fo, x, mesh.spec.R);
    }
    const auto W = assemble_observation_mass(mesh);
    return std::sqrt(t.dot(W * t));
}

/// eta_I: dual Y-norm of the functional k -> a(f_ref - u_hf, theta_k), where
/// f_ref is the interpolant of the cutoff on a mesh refined `refine` times.
template <int Dim>
double eta_interpolation(const DomainSpec<Dim>& spec, const FracOrder& fo, const Cutoff& cutoff, int refine = 4) {
    const auto coarse = build_mesh<Dim>(spec);
    DomainSpec<Dim> fs = spec;
    fs.h = spec.h / refine;
    const auto fine = build_mesh<Dim>(fs);
    const Eigen::VectorXd uc = interpolate<Dim>(coarse, [&](const Point<Dim>& x) { return cutoff(x); });
    Eigen::VectorXd e(static_cast<Eigen::Index>(fine.nodes.size()));
    for (std::size_t n = 0; n < fine.nodes.size(); ++n) {
        const double ref = cutoff(fine.nodes[n]);
        const double coarse_val = coarse.evaluate(std::span<const double>(uc.data(), uc.size()), fine.nodes[n]);
        const double d = ref - coarse_val;
        e[static_cast<Eigen::Index>(n)] = std::abs(d) < 1e-15 ? 0.0 : d;
    }
    const Eigen::VectorXd y = detail::energy_apply<Dim>(fine, fo, e);
    Eigen::VectorXd r = Eigen::VectorXd::Zero(coarse.num_obs());
    std::vector<double> hat(coarse.nodes.size(), 0.0);
    for (std::size_t n = 0; n < fine.nodes.size(); ++n) {
        if (y[static_cast<Eigen::Index>(n)] == 0.0) {
            continue;
        }
        const auto loc = coarse.locate(fine.nodes[n]);
        if (!loc) {
            continue;
        }
        for (int a = 0; a <= Dim; ++a) {
            const int k = coarse.obs_of_node[coarse.elements[loc->first][a]];
            if (k >= 0 && loc->second[a] > 1e-14) {
                r[k] += loc->second[a] * y[static_cast<Eigen::Index>(n)];
            }
        }
    }
    const auto W = assemble_observation_mass(coarse);
    Eigen::SimplicialLLT<Eigen::SparseMatrix<double>> llt(W);
    return std::sqrt(std::max(0.0, r.dot(llt.solve(r))));
}

/// eta_t for each truncation radius; eta_I in 1D (NaN with a warning in 2D,
/// where the refined reference is too costly). The exterior datum is the
/// cutoff of the base domain and stays fixed while the radius varies.
template <int Dim>
std::vector<ConsistencyRow> consistency_diagnostics(const DomainSpec<Dim>& base, const FracOrder& fo,
                                                    double cutoff_width, std::span<const double> R_list) {
    std::vector<ConsistencyRow> rows;
    if constexpr (Dim == 2) {
        warn("eta_I is not computed in 2D; reported as NaN");
    }
    const auto cut = make_cutoff(base, cutoff_width);
    for (double R : R_list) {
        DomainSpec<Dim> spec = base;
        spec.R = R;
        const auto mesh = build_mesh<Dim>(spec);
        ConsistencyRow row;
        row.R = R;
        row.h = spec.h;
        row.eta_t = eta_truncation<Dim>(mesh, fo, cut);
        if constexpr (Dim == 1) {
            row.eta_I = eta_interpolation<Dim>(spec, fo, cut);
        }
        rows.push_back(row);
    }
    return rows;
}

inline std::vector<ConsistencyRow> consistency_diagnostics(const ExperimentConfig& cfg) {
    validate(cfg);
    const auto fo = make_frac_order(cfg.s, cfg.dim);
    if (cfg.dim == 1) {
        return consistency_diagnostics<1>(cfg.domain<1>(), fo, cfg.cutoff_width, cfg.diagnostics_R);
    }
    return consistency_diagnostics<2>(cfg.domain<2>(), fo, cfg.cutoff_width, cfg.diagnostics_R);
}

inline void write_diagnostics_csv(const std::filesystem::path& path, const std::vector<ConsistencyRow>& rows) {
    auto os = detail::open_out(path);
    os << "R,h,eta_t,eta_I\n";
    for (const auto& r : rows) {
        os << detail::num17(r.R) << ',' << detail::num17(r.h) << ',' << detail::num17(r.eta_t) << ','
           << detail::num17(r.eta_I) << '\n';
    }
}

}  // namespace fraccal
