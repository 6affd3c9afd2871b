/*
   Copyright 2026 The stodyn Authors

   Licensed under the Apache License, Version 2.0 (the "License");
   you may not use this file except in compliance with the License.
   You may obtain a copy of the License at

       http://www.apache.org/licenses/LICENSE-2.0

   Unless required by applicable law or agreed to in writing, software
   distributed under the License is distributed on an "AS IS" BASIS,
   WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
   See the License for the specific language governing permissions and
   limitations under the License.
*/

// Scenario files: flat INI with [system], [parameters], [noise], [grid],
// [run], [domain], [scan], [slowfast], [xi_grid]. Expressions are quoted.
// Every resolved value (defaults included) is echoed back by
// Scenario::resolved_text(), which parses to the same scenario.

#pragma once

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

#include <charconv>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "stodyn/error.hpp"
#include "stodyn/fokker_planck.hpp"
#include "stodyn/io.hpp"
#include "stodyn/portraits.hpp"
#include "stodyn/sde.hpp"
#include "stodyn/slow_manifold.hpp"

namespace stodyn {

enum class Mode { simulate, fokker_planck, mppp, mean_portrait, first_passage, bifurcation_scan, slow_manifold };

inline constexpr std::array<std::pair<std::string_view, Mode>, 7> kModes{{
    {"simulate", Mode::simulate},
    {"fokker-planck", Mode::fokker_planck},
    {"mppp", Mode::mppp},
    {"mean-portrait", Mode::mean_portrait},
    {"first-passage", Mode::first_passage},
    {"bifurcation-scan", Mode::bifurcation_scan},
    {"slow-manifold", Mode::slow_manifold},
}};

inline std::string_view to_string(Mode m) {
    for (auto [name, mode] : kModes)
        if (mode == m) return name;
    return "?";
}

inline Mode parse_mode(std::string_view s) {
    for (auto [name, mode] : kModes)
        if (name == s) return mode;
    throw ValidationError("mode", "unknown mode '" + std::string(s) + "'");
}

struct RunSettings {
    double horizon = 10.0;
    double dt = 0.01;
    std::size_t output_every = 10;
    std::size_t paths = 1000;
    double truncation = 0.0;
    std::size_t startup_steps = 4;
};

struct PortraitSettings {
    std::vector<double> probes;  // empty = default spread
    std::size_t probe_count = 16;
    double radius_fraction = 0.1;
    std::size_t max_bisections = 12;
};

struct FirstPassageSettings {
    Interval domain{-1.0, 1.0};
    std::optional<double> threshold;
    double hysteresis = 0.1;
};

struct ScanSettings {
    std::string parameter;
    std::vector<double> values;
    OrbitKind orbit = OrbitKind::most_probable;
};

enum class SlowMethod { both, lyapunov_perron, truncation };

struct SlowSettings {
    SlowFastSpec spec;
    SlowGrid xi;
    std::vector<double> x0;
    std::optional<std::vector<double>> y0;
    SlowMethod method = SlowMethod::both;
    double tolerance = 1e-10;
    std::size_t max_iterations = 100;
    bool override_gap = false;
};

struct Scenario {
    std::string name;
    Mode mode = Mode::simulate;
    std::uint64_t seed = 1;
    bool seed_defaulted = false;

    std::optional<SystemSpec> system;
    std::vector<double> x0;
    bool experimental_multiplicative = false;
    std::optional<Grid1D> grid;
    RunSettings run;
    std::optional<PortraitSettings> portrait;
    std::optional<FirstPassageSettings> first_passage;
    std::optional<ScanSettings> scan;
    std::optional<SlowSettings> slow;

    std::string resolved;  // canonical text, filled by the loader

    const std::string& resolved_text() const { return resolved; }
};

namespace detail {

inline std::string unquote(std::string v) {
    if (v.size() >= 2 && (v.front() == '"' || v.front() == '\'') && v.back() == v.front()) return v.substr(1, v.size() - 2);
    return v;
}

inline double parse_number(const std::string& field, const std::string& text) {
    double v = 0.0;
    const char* b = text.data();
    const char* e = b + text.size();
    auto [ptr, ec] = std::from_chars(b, e, v);
    if (ec != std::errc() || ptr != e) {
        if (text == "inf") return INFINITY;
        if (text == "-inf") return -INFINITY;
        throw ValidationError(field, "expected a number, got '" + text + "'");
    }
    return v;
}

inline std::vector<std::string> split(const std::string& s, char sep) {
    std::vector<std::string> out;
    std::string cur;
    for (char c : s) {
        if (c == sep) {
            out.push_back(cur);
            cur.clear();
        } else cur.push_back(c);
    }
    out.push_back(cur);
    for (auto& p : out) {
        const auto a = p.find_first_not_of(" \t");
        const auto b = p.find_last_not_of(" \t");
        p = a == std::string::npos ? std::string{} : p.substr(a, b - a + 1);
    }
    return out;
}

inline std::string join_numbers(const std::vector<double>& v) {
    std::string s;
    for (std::size_t i = 0; i < v.size(); ++i) s += (i ? ", " : "") + io::format_double(v[i]);
    return s;
}

// Reads typed values from the tree, records what it read, echoes the
// resolved value into a canonical INI image.
class Reader {
public:
    explicit Reader(boost::property_tree::ptree tree) : tree_(std::move(tree)) {}

    bool has_section(const std::string& s) const {
        auto it = tree_.find(s);
        return it != tree_.not_found() && !it->second.data().size() && !it->second.empty();
    }
    bool has(const std::string& sec, const std::string& key) const { return raw(sec, key).has_value(); }

    std::optional<std::string> raw(const std::string& sec, const std::string& key) const {
        const boost::property_tree::ptree* node = &tree_;
        if (!sec.empty()) {
            auto it = tree_.find(sec);
            if (it == tree_.not_found()) return std::nullopt;
            node = &it->second;
        }
        auto it = node->find(key);
        if (it == node->not_found() || !it->second.empty()) return std::nullopt;
        return it->second.data();
    }

    std::string field(const std::string& sec, const std::string& key) const {
        return sec.empty() ? key : sec + "." + key;
    }

    double number(const std::string& sec, const std::string& key, std::optional<double> def = {}) {
        auto r = raw(sec, key);
        if (!r && !def) throw ValidationError(field(sec, key), "required");
        const double v = r ? parse_number(field(sec, key), unquote(*r)) : *def;
        echo(sec, key, io::format_double(v));
        return v;
    }

    std::size_t count(const std::string& sec, const std::string& key, std::optional<std::size_t> def = {}) {
        auto r = raw(sec, key);
        if (!r && !def) throw ValidationError(field(sec, key), "required");
        std::size_t v = def.value_or(0);
        if (r) {
            const double d = parse_number(field(sec, key), unquote(*r));
            if (!(d >= 0.0) || d != std::floor(d) || d > 1e15)
                throw ValidationError(field(sec, key), "expected a non-negative integer");
            v = static_cast<std::size_t>(d);
        }
        echo(sec, key, std::to_string(v));
        return v;
    }

    std::uint64_t u64(const std::string& sec, const std::string& key, std::uint64_t def, bool* defaulted) {
        auto r = raw(sec, key);
        std::uint64_t v = def;
        if (r) {
            const auto t = unquote(*r);
            auto [ptr, ec] = std::from_chars(t.data(), t.data() + t.size(), v);
            if (ec != std::errc() || ptr != t.data() + t.size())
                throw ValidationError(field(sec, key), "expected an unsigned integer");
        }
        if (defaulted) *defaulted = !r;
        echo(sec, key, std::to_string(v));
        return v;
    }

    bool flag(const std::string& sec, const std::string& key, bool def) {
        auto r = raw(sec, key);
        bool v = def;
        if (r) {
            const auto t = unquote(*r);
            if (t == "true" || t == "1" || t == "yes") v = true;
            else if (t == "false" || t == "0" || t == "no") v = false;
            else throw ValidationError(field(sec, key), "expected true or false");
        }
        echo(sec, key, v ? "true" : "false");
        return v;
    }

    std::string word(const std::string& sec, const std::string& key, std::optional<std::string> def = {}) {
        auto r = raw(sec, key);
        if (!r && !def) throw ValidationError(field(sec, key), "required");
        auto v = r ? unquote(*r) : *def;
        echo(sec, key, v);
        return v;
    }

    expr::Expr expression(const std::string& sec, const std::string& key) {
        auto r = raw(sec, key);
        if (!r) throw ValidationError(field(sec, key), "required");
        const auto text = unquote(*r);
        try {
            auto e = expr::parse(text);
            echo(sec, key, "\"" + text + "\"");
            return e;
        } catch (const expr::ParseError& err) {
            throw ValidationError(field(sec, key), std::string(err.what()) + " in '" + text + "'");
        }
    }

    std::vector<double> numbers(const std::string& sec, const std::string& key,
                                std::optional<std::vector<double>> def = {}) {
        auto r = raw(sec, key);
        if (!r && !def) throw ValidationError(field(sec, key), "required");
        std::vector<double> v;
        if (r) {
            for (const auto& p : split(unquote(*r), ','))
                if (!p.empty()) v.push_back(parse_number(field(sec, key), p));
        } else v = *def;
        echo(sec, key, join_numbers(v));
        return v;
    }

    Eigen::MatrixXd matrix(const std::string& sec, const std::string& key, std::size_t rows, std::size_t cols) {
        auto r = raw(sec, key);
        if (!r) throw ValidationError(field(sec, key), "required");
        const auto row_text = split(unquote(*r), ';');
        if (row_text.size() != rows)
            throw ValidationError(field(sec, key), "expected " + std::to_string(rows) + " rows separated by ';'");
        Eigen::MatrixXd M(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
        std::string echoed;
        for (std::size_t i = 0; i < rows; ++i) {
            const auto cells = split(row_text[i], ',');
            if (cells.size() != cols)
                throw ValidationError(field(sec, key), "expected " + std::to_string(cols) + " entries per row");
            for (std::size_t j = 0; j < cols; ++j) {
                M(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = parse_number(field(sec, key), cells[j]);
                echoed += (j ? ", " : (i ? "; " : "")) + io::format_double(M(static_cast<Eigen::Index>(i),
                                                                             static_cast<Eigen::Index>(j)));
            }
        }
        echo(sec, key, echoed);
        return M;
    }

    /// Every key of a free-form section, in file order.
    std::vector<std::pair<std::string, double>> all_numbers(const std::string& sec) {
        std::vector<std::pair<std::string, double>> out;
        auto it = tree_.find(sec);
        if (it == tree_.not_found()) return out;
        for (const auto& [k, v] : it->second) out.emplace_back(k, number(sec, k));
        return out;
    }

    /// Rejects keys that were never read.
    void check_unused() const {
        for (const auto& [sec, node] : tree_) {
            if (node.empty()) {
                if (!read_.count({"", sec})) throw ValidationError(sec, "unknown key");
                continue;
            }
            for (const auto& [k, v] : node)
                if (!read_.count({sec, k})) throw ValidationError(sec + "." + k, "unknown key");
        }
    }

    std::string text() const {
        std::ostringstream os;
        for (const auto& [k, v] : sections_[0].second) os << k << " = " << v << '\n';
        for (std::size_t i = 1; i < sections_.size(); ++i) {
            if (sections_[i].second.empty()) continue;
            os << "\n[" << sections_[i].first << "]\n";
            for (const auto& [k, v] : sections_[i].second) os << k << " = " << v << '\n';
        }
        return os.str();
    }

    void begin_section(const std::string& sec) { section(sec); }
    void put(const std::string& sec, const std::string& key, const std::string& value) { echo(sec, key, value); }

private:
    using Entries = std::vector<std::pair<std::string, std::string>>;

    Entries& section(const std::string& sec) {
        for (auto& s : sections_)
            if (s.first == sec) return s.second;
        sections_.emplace_back(sec, Entries{});
        return sections_.back().second;
    }

    void echo(const std::string& sec, const std::string& key, const std::string& value) {
        read_.insert({sec, key});
        auto& e = section(sec);
        for (auto& kv : e)
            if (kv.first == key) {
                kv.second = value;
                return;
            }
        e.emplace_back(key, value);
    }

    boost::property_tree::ptree tree_;
    std::set<std::pair<std::string, std::string>> read_;
    std::vector<std::pair<std::string, Entries>> sections_{{"", {}}};
};

inline std::string indexed(const char* base, std::size_t i) { return base + std::to_string(i + 1); }

inline void read_system(Reader& r, Scenario& sc) {
    SystemSpec s;
    s.dimension = r.count("system", "dimension", 1);
    if (s.dimension == 0) throw ValidationError("system.dimension", "must be at least 1");
    // noise first: the diffusion layout depends on its dimension
    r.begin_section("noise");
    const auto family = r.word("noise", "family", "brownian");
    if (family == "brownian") s.noise = NoiseSpec::brownian();
    else if (family == "stable") {
        s.noise.family = NoiseFamily::stable;
        s.noise.alpha = r.number("noise", "alpha");
        s.noise.beta = r.number("noise", "beta", 0.0);
        if (!(s.noise.alpha > 0.0 && s.noise.alpha <= 2.0)) throw ValidationError("alpha", "must lie in (0, 2]");
        if (!(s.noise.beta >= -1.0 && s.noise.beta <= 1.0)) throw ValidationError("beta", "must lie in [-1, 1]");
    } else throw ValidationError("noise.family", "expected brownian or stable");
    s.noise.dimension = r.count("noise", "dimension", s.dimension);
    if (s.noise.dimension == 0) throw ValidationError("noise.dimension", "must be at least 1");
    sc.experimental_multiplicative = r.flag("noise", "experimental_multiplicative", false);

    if (s.dimension == 1) {
        s.drift.push_back(r.expression("system", "drift"));
    } else {
        for (std::size_t i = 0; i < s.dimension; ++i) s.drift.push_back(r.expression("system", indexed("drift", i)));
    }
    if (s.dimension == 1 && s.noise.dimension == 1) {
        s.diffusion.push_back(r.expression("system", "sigma"));
    } else {
        for (std::size_t i = 0; i < s.dimension; ++i)
            for (std::size_t j = 0; j < s.noise.dimension; ++j)
                s.diffusion.push_back(
                    r.expression("system", "sigma" + std::to_string(i + 1) + std::to_string(j + 1)));
    }
    for (const auto& [k, v] : r.all_numbers("parameters")) s.parameters[k] = v;
    sc.x0 = r.numbers("system", "x0", std::vector<double>(s.dimension, 0.0));
    if (sc.x0.size() != s.dimension) throw ValidationError("system.x0", "expected one value per dimension");
    s.validate();
    sc.system = std::move(s);
}

inline void read_slowfast(Reader& r, Scenario& sc) {
    SlowSettings ss;
    auto& s = ss.spec;
    s.n = r.count("slowfast", "n", 1);
    s.m = r.count("slowfast", "m", 1);
    if (s.n == 0 || s.m == 0) throw ValidationError("slowfast.n", "dimensions must be positive");
    s.A = r.matrix("slowfast", "A", s.n, s.n);
    s.B = r.matrix("slowfast", "B", s.m, s.m);
    for (std::size_t i = 0; i < s.n; ++i) s.f.push_back(r.expression("slowfast", s.n == 1 ? "f" : indexed("f", i)));
    for (std::size_t i = 0; i < s.m; ++i) s.g.push_back(r.expression("slowfast", s.m == 1 ? "g" : indexed("g", i)));
    s.eps = r.number("slowfast", "eps");
    s.sigma = r.number("slowfast", "sigma", 0.0);
    if (r.has("slowfast", "lipschitz_f")) s.lipschitz_f = r.number("slowfast", "lipschitz_f");
    if (r.has("slowfast", "lipschitz_g")) s.lipschitz_g = r.number("slowfast", "lipschitz_g");
    for (const auto& [k, v] : r.all_numbers("parameters")) s.parameters[k] = v;
    ss.x0 = r.numbers("slowfast", "x0", std::vector<double>(s.n, 0.0));
    if (ss.x0.size() != s.n) throw ValidationError("slowfast.x0", "expected n values");
    if (r.has("slowfast", "y0")) {
        ss.y0 = r.numbers("slowfast", "y0");
        if (ss.y0->size() != s.m) throw ValidationError("slowfast.y0", "expected m values");
    }
    s.validate();
    auto lo = r.numbers("xi_grid", "lo");
    auto hi = r.numbers("xi_grid", "hi");
    auto cnt = r.numbers("xi_grid", "count");
    if (lo.size() != s.n || hi.size() != s.n || cnt.size() != s.n)
        throw ValidationError("xi_grid", "lo, hi and count need n entries");
    std::vector<std::size_t> c;
    for (double v : cnt) {
        if (!(v >= 2.0) || v != std::floor(v)) throw ValidationError("xi_grid.count", "expected integers >= 2");
        c.push_back(static_cast<std::size_t>(v));
    }
    ss.xi = SlowGrid(lo, hi, c);
    if (!ss.xi.contains(ss.x0)) throw ValidationError("slowfast.x0", "outside the xi grid");
    const auto method = r.word("run", "method", "both");
    if (method == "both") ss.method = SlowMethod::both;
    else if (method == "lyapunov-perron") ss.method = SlowMethod::lyapunov_perron;
    else if (method == "truncation") ss.method = SlowMethod::truncation;
    else throw ValidationError("run.method", "expected both, lyapunov-perron or truncation");
    ss.tolerance = r.number("run", "tolerance", 1e-10);
    ss.max_iterations = r.count("run", "max_iterations", 100);
    ss.override_gap = r.flag("run", "override_gap", false);
    sc.slow = std::move(ss);
}

inline RunSettings default_run(Mode m) {
    RunSettings d;
    switch (m) {
        case Mode::mppp:
        case Mode::mean_portrait:
        case Mode::bifurcation_scan: d.horizon = 50.0; break;
        case Mode::first_passage:
            d.horizon = 50.0;
            d.paths = 10'000;
            break;
        case Mode::slow_manifold:
            d.horizon = 5.0;
            d.dt = 1e-3;
            break;
        default: break;
    }
    return d;
}

}  // namespace detail

/// Parses and validates scenario text. `mode_override` comes from the
/// command line and wins over the file's `mode` key.
inline Scenario parse_scenario(const std::string& text, const std::string& fallback_name,
                               std::optional<Mode> mode_override = {}, std::optional<std::uint64_t> seed_override = {}) {
    boost::property_tree::ptree tree;
    std::istringstream is(text);
    try {
        boost::property_tree::read_ini(is, tree);
    } catch (const boost::property_tree::ini_parser_error& e) {
        throw ValidationError("", "parse error at line " + std::to_string(e.line()) + ": " + e.message());
    }
    detail::Reader r(std::move(tree));
    Scenario sc;
    sc.name = r.word("", "name", fallback_name);
    if (sc.name.empty() || sc.name.find_first_of("/\\") != std::string::npos)
        throw ValidationError("name", "must be a plain file name");
    std::optional<Mode> file_mode;
    if (r.has("", "mode")) file_mode = parse_mode(detail::unquote(*r.raw("", "mode")));
    if (!mode_override && !file_mode) throw ValidationError("mode", "required");
    sc.mode = mode_override ? *mode_override : *file_mode;
    if (file_mode) r.word("", "mode");
    r.put("", "mode", std::string(to_string(sc.mode)));
    bool defaulted = false;
    sc.seed = r.u64("", "seed", 1, &defaulted);
    sc.seed_defaulted = defaulted;
    if (seed_override) {
        sc.seed = *seed_override;
        sc.seed_defaulted = false;
        r.put("", "seed", std::to_string(sc.seed));
    }

    const bool slow = sc.mode == Mode::slow_manifold;
    if (slow) {
        if (!r.has_section("slowfast")) throw ValidationError("slowfast", "slow-manifold mode requires a [slowfast] block");
        if (!r.has_section("xi_grid")) throw ValidationError("xi_grid", "slow-manifold mode requires a [xi_grid] block");
    } else if (!r.has_section("system")) {
        throw ValidationError("system", "mode requires a [system] block");
    }
    if (r.has_section("system")) detail::read_system(r, sc);
    if (r.has_section("slowfast") || r.has_section("xi_grid")) detail::read_slowfast(r, sc);

    const bool needs_grid = sc.mode == Mode::fokker_planck || sc.mode == Mode::mppp || sc.mode == Mode::mean_portrait ||
                            sc.mode == Mode::bifurcation_scan;
    if (needs_grid && !r.has_section("grid"))
        throw ValidationError("grid", std::string(to_string(sc.mode)) + " mode requires a [grid] block");
    if (r.has_section("grid")) {
        const double lo = r.number("grid", "lo");
        const double hi = r.number("grid", "hi");
        const std::size_t n = r.count("grid", "n");
        Grid1D g(lo, hi, n);
        g.validate();
        sc.grid = g;
    }

    const auto d = detail::default_run(sc.mode);
    sc.run.horizon = r.number("run", "horizon", d.horizon);
    sc.run.dt = r.number("run", "dt", d.dt);
    sc.run.output_every = r.count("run", "output_every", d.output_every);
    if (!(sc.run.horizon > 0.0)) throw ValidationError("run.horizon", "must be positive");
    if (!(sc.run.dt > 0.0)) throw ValidationError("run.dt", "must be positive");
    if (sc.run.output_every == 0) throw ValidationError("run.output_every", "must be at least 1");
    step_count(sc.run.horizon, sc.run.dt);
    if (!slow) {
        sc.run.paths = r.count("run", "paths", d.paths);
        if (sc.run.paths == 0) throw ValidationError("run.paths", "must be at least 1");
        sc.run.truncation = r.number("run", "truncation", 0.0);
        sc.run.startup_steps = r.count("run", "startup_steps", d.startup_steps);
    }

    if (sc.mode == Mode::mppp || sc.mode == Mode::mean_portrait || sc.mode == Mode::bifurcation_scan ||
        r.has_section("portrait")) {
        PortraitSettings p;
        p.probes = r.numbers("portrait", "probes", std::vector<double>{});
        p.probe_count = r.count("portrait", "probe_count", 16);
        p.radius_fraction = r.number("portrait", "radius_fraction", 0.1);
        p.max_bisections = r.count("portrait", "max_bisections", 12);
        if (p.probes.empty() && p.probe_count < 8) throw ValidationError("portrait.probe_count", "need at least 8");
        if (!(p.radius_fraction > 0.0 && p.radius_fraction < 1.0))
            throw ValidationError("portrait.radius_fraction", "must lie in (0, 1)");
        if (sc.grid)
            for (double x : p.probes)
                if (!(x > sc.grid->lo && x < sc.grid->hi)) throw ValidationError("portrait.probes", "outside the grid");
        sc.portrait = p;
    }

    if (sc.mode == Mode::first_passage || r.has_section("domain")) {
        FirstPassageSettings f;
        f.domain.lo = r.number("domain", "lo");
        f.domain.hi = r.number("domain", "hi");
        if (!(f.domain.hi > f.domain.lo)) throw ValidationError("domain.hi", "must exceed domain.lo");
        if (r.has("domain", "threshold")) f.threshold = r.number("domain", "threshold");
        f.hysteresis = r.number("domain", "hysteresis", 0.1);
        if (!(f.hysteresis >= 0.0)) throw ValidationError("domain.hysteresis", "must be non-negative");
        sc.first_passage = f;
    }

    if (sc.mode == Mode::bifurcation_scan || r.has_section("scan")) {
        ScanSettings s;
        s.parameter = r.word("scan", "parameter");
        if (r.has("scan", "values")) {
            s.values = r.numbers("scan", "values");
        } else {
            const double a = r.number("scan", "start");
            const double b = r.number("scan", "stop");
            const std::size_t k = r.count("scan", "points");
            if (k < 2) throw ValidationError("scan.points", "need at least 2");
            for (std::size_t i = 0; i < k; ++i)
                s.values.push_back(i + 1 == k ? b : a + (b - a) * static_cast<double>(i) / static_cast<double>(k - 1));
        }
        const auto orbit = r.word("scan", "orbit", "most-probable");
        if (orbit == "most-probable") s.orbit = OrbitKind::most_probable;
        else if (orbit == "mean") s.orbit = OrbitKind::mean;
        else throw ValidationError("scan.orbit", "expected most-probable or mean");
        if (sc.system) {
            const bool is_param = sc.system->parameters.count(s.parameter) > 0;
            const bool is_noise = s.parameter == "alpha" || s.parameter == "beta";
            if (!is_param && !is_noise)
                throw ValidationError("scan.parameter", "'" + s.parameter + "' is not a declared parameter");
        }
        sc.scan = s;
    }

    if (sc.system && sc.grid && sc.mode != Mode::simulate && sc.mode != Mode::first_passage) {
        if (sc.system->dimension != 1)
            throw ValidationError("system.dimension", "density modes are one-dimensional");
    }
    if (sc.mode == Mode::fokker_planck && sc.grid && !(sc.x0[0] > sc.grid->lo && sc.x0[0] < sc.grid->hi))
        throw ValidationError("system.x0", "outside the grid");
    if (sc.mode == Mode::first_passage && sc.system) {
        if (sc.system->dimension != 1 && !sc.first_passage) throw ValidationError("domain", "required");
    }

    r.check_unused();
    sc.resolved = r.text();
    return sc;
}

inline Scenario load_scenario(const std::filesystem::path& path, std::optional<Mode> mode_override = {},
                              std::optional<std::uint64_t> seed_override = {}) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ValidationError("scenario", "cannot open '" + path.string() + "'");
    std::ostringstream ss;
    ss << in.rdbuf();
    auto stem = path.stem().string();
    return parse_scenario(ss.str(), stem, mode_override, seed_override);
}

}  // namespace stodyn
