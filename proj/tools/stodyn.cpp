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

// stodyn <mode> --scenario FILE [--seed N] [--jobs N] [--out DIR]
// stodyn validate --scenario FILE
//
// exit 0 ok, 1 validation error, 2 numerical failure. Every run leaves
// run.json in the output directory, even on failure.

#include <CLI11.hpp>
#include <json.hpp>
#include <openssl/evp.h>

#include <boost/version.hpp>

#include <chrono>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include "stodyn/parallel.hpp"
#include "stodyn/scenario.hpp"

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;

namespace {

using namespace stodyn;

std::string sha256_hex(const std::string& data) {
    unsigned char md[EVP_MAX_MD_SIZE];
    unsigned int len = 0;
    EVP_Digest(data.data(), data.size(), md, &len, EVP_sha256(), nullptr);
    static const char* hex = "0123456789abcdef";
    std::string out;
    for (unsigned int i = 0; i < len; ++i) {
        out.push_back(hex[md[i] >> 4]);
        out.push_back(hex[md[i] & 15]);
    }
    return out;
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

json versions() {
    json v;
    v["stodyn"] = STODYN_VERSION;
    v["eigen"] = std::to_string(EIGEN_WORLD_VERSION) + "." + std::to_string(EIGEN_MAJOR_VERSION) + "." +
                 std::to_string(EIGEN_MINOR_VERSION);
    v["boost"] = std::to_string(BOOST_VERSION / 100000) + "." + std::to_string(BOOST_VERSION / 100 % 1000) + "." +
                 std::to_string(BOOST_VERSION % 100);
    v["compiler"] = __VERSION__;
    return v;
}

// Output sink confined to one directory.
struct RunDir {
    fs::path dir;
    std::vector<std::string> files;

    std::ofstream open(const std::string& name) {
        files.push_back(name);
        std::ofstream os(dir / name, std::ios::binary | std::ios::trunc);
        if (!os) throw std::runtime_error("cannot write " + (dir / name).string());
        return os;
    }
    void write_json(const std::string& name, const json& j) { open(name) << j.dump(2) << '\n'; }
};

struct Context {
    const Scenario& sc;
    RunDir& out;
    std::vector<std::string>& warnings;
};

// ---------------------------------------------------------------------------
// modes

void run_simulate(Context& c) {
    const auto& sc = c.sc;
    const auto& sys = *sc.system;
    auto st = simulate_ensemble(sys, sc.x0, sc.run.horizon, sc.run.dt, sc.run.paths, sc.seed,
                                {.output_every = sc.run.output_every});
    {
        auto os = c.out.open("ensemble.csv");
        io::CsvWriter csv(os, {"t", "component", "mean", "variance", "q05", "q50", "q95", "alive"});
        for (std::size_t k = 0; k < st.times.size(); ++k)
            for (std::size_t d = 0; d < st.dimension; ++d) {
                csv.cell(st.times[k]).cell(d + 1).cell(st.mean_at(k, d)).cell(st.variance_at(k, d));
                for (std::size_t q = 0; q < 3; ++q) csv.cell(st.quantile_at(q, k, d));
                csv.cell(st.alive[k]);
                csv.end_row();
            }
    }
    // one sample path on its own stream past the ensemble
    const auto steps = step_count(sc.run.horizon, sc.run.dt);
    auto path = make_noise_path(sys.noise, sc.run.dt, 0, steps, sc.seed, sc.run.paths);
    auto orbit = integrate_em(sys, sc.x0, sc.run.horizon, sc.run.dt, path, sc.run.output_every);
    {
        auto os = c.out.open("orbit.csv");
        std::vector<std::string> header{"t"};
        for (std::size_t d = 0; d < sys.dimension; ++d) header.push_back("x" + std::to_string(d + 1));
        io::CsvWriter csv(os, header);
        for (std::size_t k = 0; k < orbit.size(); ++k) {
            csv.cell(orbit.times[k]);
            for (std::size_t d = 0; d < sys.dimension; ++d) csv.cell(orbit.at(k, d));
            csv.end_row();
        }
    }
    if (sys.noise.family == NoiseFamily::stable && sys.noise.alpha <= 1.0)
        c.warnings.push_back("mean and variance are not defined for alpha <= 1; use q50");
    if (st.blown_up == st.paths)
        throw NumericalError("all " + std::to_string(st.paths) + " paths blew up; reduce run.dt");
    if (st.blown_up)
        c.warnings.push_back("blow-up fraction " + io::format_double(st.blow_up_fraction()));
}

GeneratorOptions generator_options(const Scenario& sc) {
    return {.truncation = sc.run.truncation, .experimental_multiplicative = sc.experimental_multiplicative};
}

void run_fokker_planck(Context& c) {
    const auto& sc = c.sc;
    const auto gen = build_adjoint_generator(*sc.system, *sc.grid, generator_options(sc));
    auto ev = evolve_density(gen, delta_initial(*sc.grid, sc.x0[0]), sc.run.horizon, sc.run.dt,
                             {.output_every = sc.run.output_every, .startup_steps = sc.run.startup_steps});
    {
        auto os = c.out.open("density.csv");
        write_density_csv(os, ev.frames);
    }
    const auto& r = ev.report;
    json j;
    j["steps"] = r.steps;
    j["initial_mass"] = r.mass.front();
    j["final_mass"] = r.mass.back();
    j["max_drift_per_1000"] = r.max_drift_per_1000;
    j["boundary_loss"] = r.boundary_loss;
    j["clipped_mass"] = r.clipped_mass;
    j["clip_events"] = r.clip_events;
    j["positivity_violations"] = r.positivity_violations;
    j["min_ratio"] = r.min_ratio;
    j["final_normalization"] = r.final_normalization;
    j["log"] = r.log;
    c.out.write_json("report.json", j);
    if (r.clip_events)
        c.warnings.push_back(std::to_string(r.clip_events) + " clipping events, mass added " +
                             io::format_double(r.clipped_mass));
    if (r.positivity_violations)
        c.warnings.push_back(std::to_string(r.positivity_violations) + " steps with negative density");
}

PortraitConfig portrait_config(const Scenario& sc) {
    PortraitConfig cfg;
    cfg.grid = *sc.grid;
    cfg.horizon = sc.run.horizon;
    cfg.dt = sc.run.dt;
    cfg.output_every = sc.run.output_every;
    cfg.probes = sc.portrait->probes.empty() ? default_probes(*sc.grid, sc.portrait->probe_count)
                                              : sc.portrait->probes;
    cfg.radius_fraction = sc.portrait->radius_fraction;
    cfg.max_bisections = sc.portrait->max_bisections;
    cfg.generator = generator_options(sc);
    return cfg;
}

void run_portrait(Context& c, OrbitKind kind) {
    const auto& sc = c.sc;
    const auto pp = phase_portrait(*sc.system, portrait_config(sc), kind);
    {
        auto os = c.out.open("orbits.csv");
        write_orbits_csv(os, pp.orbits);
    }
    {
        auto os = c.out.open("probes.csv");
        io::CsvWriter csv(os, {"probe", "x0", "x_final", "provenance"});
        for (std::size_t i = 0; i < pp.orbits.size(); ++i) {
            const auto& o = pp.orbits[i];
            csv.cell(i).cell(o.at(0)).cell(o.at(o.size() - 1)).cell(std::string_view(to_string(o.provenance)));
            csv.end_row();
        }
    }
    {
        auto os = c.out.open("equilibria.csv");
        write_equilibria_csv(os, pp.equilibria, std::numeric_limits<double>::quiet_NaN());
    }
    for (const auto& w : pp.warnings) c.warnings.push_back(w);
}

void run_first_passage(Context& c) {
    const auto& sc = c.sc;
    const auto& fpset = *sc.first_passage;
    FirstPassageOptions opt;
    opt.threshold = fpset.threshold;
    opt.hysteresis = fpset.hysteresis;
    const auto fp = first_passage_stats(*sc.system, sc.x0, fpset.domain, sc.run.horizon, sc.run.dt, sc.run.paths,
                                        sc.seed, opt);
    {
        auto os = c.out.open("exit_times.csv");
        io::CsvWriter csv(os, {"path", "exit_time", "transitions"});
        for (std::size_t p = 0; p < fp.exit_times.size(); ++p) {
            csv.cell(p).cell(fp.exit_times[p]);
            csv.cell(p < fp.path_transitions.size() ? std::size_t{fp.path_transitions[p]} : std::size_t{0});
            csv.end_row();
        }
    }
    {
        auto os = c.out.open("survival.csv");
        io::CsvWriter csv(os, {"t", "survival"});
        for (std::size_t k = 0; k < fp.survival_times.size(); ++k) {
            csv.cell(fp.survival_times[k]).cell(fp.survival[k]);
            csv.end_row();
        }
    }
    auto num = [](double v) { return std::isfinite(v) ? json(v) : json(io::format_double(v)); };
    json j;
    j["paths"] = fp.paths;
    j["exited"] = fp.exited;
    j["blown_up"] = fp.blown_up;
    j["horizon"] = fp.horizon;
    j["exit_probability"] = fp.exit_probability;
    j["mean_exit_time"] = num(fp.mean_exit_time);
    j["restricted_mean"] = fp.restricted_mean;
    j["median_exit_time"] = num(fp.median_exit_time);
    j["left_to_right"] = fp.left_to_right;
    j["right_to_left"] = fp.right_to_left;
    c.out.write_json("summary.json", j);
    if (fp.blown_up) c.warnings.push_back(std::to_string(fp.blown_up) + " paths blew up");
    if (fp.blown_up == fp.paths) throw NumericalError("every path blew up; reduce run.dt");
}

void run_scan(Context& c) {
    const auto& sc = c.sc;
    const auto& s = *sc.scan;
    const auto d = bifurcation_scan(*sc.system, s.parameter, s.values, portrait_config(sc), s.orbit);
    {
        auto os = c.out.open("diagram.csv");
        write_diagram_csv(os, d);
    }
    json j;
    j["parameter"] = d.parameter;
    j["orbit"] = s.orbit == OrbitKind::mean ? "mean" : "most-probable";
    j["values"] = d.values;
    json counts = json::array();
    for (std::size_t k = 0; k < d.values.size(); ++k)
        counts.push_back(d.errors[k].empty() ? json(d.stable_count(k)) : json(nullptr));
    j["stable_counts"] = counts;
    json cps = json::array();
    for (const auto& cp : d.change_points)
        cps.push_back({{"lower", cp.lower}, {"upper", cp.upper}, {"count_lower", cp.count_lower},
                       {"count_upper", cp.count_upper}});
    j["change_points"] = cps;
    j["errors"] = d.errors;
    c.out.write_json("scan.json", j);
    std::size_t failed = 0;
    for (std::size_t k = 0; k < d.values.size(); ++k)
        if (!d.errors[k].empty()) {
            ++failed;
            c.warnings.push_back(s.parameter + " = " + io::format_double(d.values[k]) + ": " + d.errors[k]);
        }
    if (failed == d.values.size()) throw NumericalError("every scan value failed");
}

void run_slow_manifold(Context& c) {
    const auto& sc = c.sc;
    const auto& ss = *sc.slow;
    const auto& s = ss.spec;
    const double dt = sc.run.dt, T = sc.run.horizon;
    const bool lp_on = ss.method != SlowMethod::truncation;
    const bool tr_on = ss.method != SlowMethod::lyapunov_perron;

    LyapunovPerronOptions lo;
    lo.tolerance = ss.tolerance;
    lo.max_iterations = ss.max_iterations;
    lo.override_gap = ss.override_gap;
    const auto gap = validate_gap(s);
    if (gap.status != GapStatus::pass) c.warnings.push_back(gap.message);

    const auto burn = static_cast<std::int64_t>(std::ceil(default_burn_in(s.B, s.eps) / dt)) + 2;
    const auto before = std::max(lp_on ? lyapunov_perron_history(s, dt, lo) : std::int64_t{0}, burn);
    const auto steps = step_count(T, dt);
    const auto path = make_noise_path(NoiseSpec::brownian(s.m), dt, before, steps + 1, sc.seed, 0);

    std::optional<ManifoldGraph> lp, tr;
    if (lp_on) lp = lyapunov_perron_solve(s, ss.xi, path, lo);
    if (tr_on) tr = truncated_h(s, ss.xi, path);
    const ManifoldGraph& primary = lp ? *lp : *tr;
    for (const auto& w : primary.warnings) c.warnings.push_back(w);

    {
        auto os = c.out.open("graph.csv");
        write_graph_csv(os, primary);
    }
    if (lp && tr) {
        auto os = c.out.open("truncation.csv");
        write_graph_csv(os, *tr);
    }

    std::vector<double> y0(s.m);
    if (ss.y0) {
        y0 = *ss.y0;
    } else {
        const auto eta = stationary_eta(s.eps, s.B, path, 0.0, T);
        primary.eval(ss.x0.data(), y0.data());
        for (std::size_t j = 0; j < s.m; ++j) y0[j] += s.sigma * eta.at(0, j);
    }
    const auto full = integrate_slow_fast(s, ss.x0, y0, T, path, sc.run.output_every);
    const auto red = reduced_slow_integrate(s, primary, ss.x0, T, path, sc.run.output_every);
    {
        auto os = c.out.open("orbits.csv");
        write_orbits_csv(os, {full.x, red});
    }

    json j;
    j["gap"] = {{"status", to_string(gap.status)},
                {"max_real_eigenvalue", gap.max_real_eigenvalue},
                {"lipschitz_g", gap.lipschitz_g},
                {"ratio", gap.ratio}};
    if (lp) j["lyapunov_perron"] = convergence_json(*lp);
    if (tr) j["truncation"] = convergence_json(*tr);
    if (lp && tr) {
        double d = 0.0;
        for (std::size_t i = 0; i < lp->values.size(); ++i) d = std::max(d, std::abs(lp->values[i] - tr->values[i]));
        j["truncation_vs_fixed_point_sup"] = d;
    }
    j["reduced_vs_full_sup_gap"] = slow_gap(full.x, red);
    c.out.write_json("convergence.json", j);
}

void dispatch(Context& c) {
    switch (c.sc.mode) {
        case Mode::simulate: return run_simulate(c);
        case Mode::fokker_planck: return run_fokker_planck(c);
        case Mode::mppp: return run_portrait(c, OrbitKind::most_probable);
        case Mode::mean_portrait: return run_portrait(c, OrbitKind::mean);
        case Mode::first_passage: return run_first_passage(c);
        case Mode::bifurcation_scan: return run_scan(c);
        case Mode::slow_manifold: return run_slow_manifold(c);
    }
}

// ---------------------------------------------------------------------------

int run_mode(Mode mode, const fs::path& scenario, std::optional<std::uint64_t> seed, std::optional<fs::path> out) {
    const auto t0 = std::chrono::steady_clock::now();
    json rj;
    std::vector<std::string> warnings;
    RunDir dir;
    int code = 0;
    std::string status = "ok", message;
    std::optional<Scenario> sc;

    try {
        sc = load_scenario(scenario, mode, seed);
    } catch (const Error& e) {
        code = 1;
        status = "validation-error";
        message = e.what();
    }
    dir.dir = out ? *out : fs::path("stodyn-out") / (sc ? sc->name : scenario.stem().string()) / to_string(mode);
    std::error_code ec;
    fs::create_directories(dir.dir, ec);
    if (ec) {
        std::cerr << "stodyn: cannot create " << dir.dir << ": " << ec.message() << '\n';
        return 1;
    }

    if (sc) {
        try {
            dir.open(sc->name + ".resolved") << sc->resolved_text();
            Context ctx{*sc, dir, warnings};
            dispatch(ctx);
        } catch (const ValidationError& e) {
            code = 1, status = "validation-error", message = e.what();
        } catch (const expr::ParseError& e) {
            code = 1, status = "validation-error", message = e.what();
        } catch (const NumericalError& e) {
            code = 2, status = "numerical-error", message = e.what();
        } catch (const std::exception& e) {
            code = 2, status = "numerical-error", message = e.what();
        }
    }

    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    rj["status"] = status;
    rj["exit_code"] = code;
    rj["mode"] = to_string(mode);
    if (sc) rj["seed"] = sc->seed;
    else rj["seed"] = seed ? json(*seed) : json(nullptr);
    rj["scenario_hash"] = sha256_hex(sc ? sc->resolved_text() : slurp(scenario));
    rj["duration_s"] = secs;
    rj["warnings"] = warnings;
    if (!message.empty()) rj["error"] = message;
    rj["jobs"] = max_jobs();
    rj["versions"] = versions();
    rj["outputs"] = dir.files;
    {
        std::ofstream os(dir.dir / "run.json", std::ios::binary | std::ios::trunc);
        os << rj.dump(2) << '\n';
    }
    if (code) std::cerr << "stodyn: " << message << '\n';
    for (const auto& w : warnings) std::cerr << "stodyn: warning: " << w << '\n';
    return code;
}

int run_validate(const fs::path& scenario) {
    try {
        auto sc = load_scenario(scenario);
        std::cout << sc.resolved_text();
        return 0;
    } catch (const Error& e) {
        std::cerr << "stodyn: " << e.what() << '\n';
        return 1;
    }
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"stodyn: deterministic portraits of stochastic dynamical systems"};
    app.require_subcommand(1);
    app.set_version_flag("--version", STODYN_VERSION);

    std::string scenario;
    std::optional<std::uint64_t> seed;
    std::size_t jobs = 0;
    std::string out;

    std::vector<std::pair<CLI::App*, Mode>> subs;
    for (auto [name, mode] : kModes) {
        auto* sub = app.add_subcommand(std::string(name), "run in " + std::string(name) + " mode");
        sub->add_option("--scenario", scenario, "scenario file")->required()->check(CLI::ExistingFile);
        sub->add_option("--seed", seed, "override the scenario seed");
        sub->add_option("--jobs", jobs, "worker cap (0 = hardware)");
        sub->add_option("--out", out, "output directory");
        subs.emplace_back(sub, mode);
    }
    auto* val = app.add_subcommand("validate", "resolve and print a scenario");
    val->add_option("--scenario", scenario, "scenario file")->required()->check(CLI::ExistingFile);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? 0 : 1;
    }
    if (jobs) set_max_jobs(jobs);

    if (val->parsed()) return run_validate(scenario);
    for (auto [sub, mode] : subs)
        if (sub->parsed())
            return run_mode(mode, scenario, seed, out.empty() ? std::nullopt : std::optional<fs::path>(out));
    return 1;
}
