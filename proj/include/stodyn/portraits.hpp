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

// Most probable (density ridge) and mean orbits, horizon-based equilibrium
// detection and parameter scans.

#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "stodyn/error.hpp"
#include "stodyn/fokker_planck.hpp"
#include "stodyn/io.hpp"
#include "stodyn/parallel.hpp"
#include "stodyn/sde.hpp"

namespace stodyn {

namespace detail {

// Peak cell refined by the parabola through it and its neighbours.
inline double parabolic_peak(const DensityField& f, std::size_t i) {
    const double x = f.grid.x(i);
    if (i == 0 || i + 1 >= f.p.size()) return x;
    const double a = f.p[i - 1], b = f.p[i], c = f.p[i + 1];
    const double den = a - 2.0 * b + c;
    if (!(den < 0.0)) return x;
    const double off = std::clamp(0.5 * (a - c) / den, -0.5, 0.5);
    return x + off * f.grid.h();
}

}  // namespace detail

/// Ridge x_m(t) of a density sequence. Near-ties (within tie_tolerance of
/// the maximum, relative) go to the cell closest to the previous ridge
/// point, or to x0 on the first slice.
inline Orbit most_probable_orbit(const std::vector<DensityField>& seq, std::optional<double> x0 = std::nullopt,
                                 double tie_tolerance = 1e-9) {
    if (seq.empty()) throw ValidationError("density", "empty density sequence");
    Orbit orbit;
    orbit.provenance = Provenance::most_probable;
    double ref = x0 ? *x0 : std::numeric_limits<double>::quiet_NaN();
    for (const auto& f : seq) {
        if (!(f.grid == seq.front().grid)) throw ValidationError("density", "slices live on different grids");
        const double pmax = *std::max_element(f.p.begin(), f.p.end());
        if (!(pmax > 0.0)) throw ValidationError("density", "all-zero slice at t = " + io::format_double(f.t));
        std::size_t best = f.p.size();
        for (std::size_t i = 0; i < f.p.size(); ++i) {
            if (f.p[i] < pmax * (1.0 - tie_tolerance)) continue;
            if (best == f.p.size() || (std::isfinite(ref) && std::abs(f.grid.x(i) - ref) < std::abs(f.grid.x(best) - ref)))
                best = i;
        }
        const double x = detail::parabolic_peak(f, best);
        orbit.push(f.t, std::span<const double>(&x, 1));
        ref = x;
    }
    return orbit;
}

/// x_bar(t) = h sum x_i p_i. Refuses slices whose mass is off by more than 1e-2.
inline Orbit mean_orbit(const std::vector<DensityField>& seq) {
    if (seq.empty()) throw ValidationError("density", "empty density sequence");
    Orbit orbit;
    orbit.provenance = Provenance::mean;
    for (const auto& f : seq) {
        const double m = f.mass();
        if (std::abs(m - 1.0) > 1e-2)
            throw NumericalError("mass " + io::format_double(m) + " at t = " + io::format_double(f.t) +
                                 " would bias the mean");
        std::vector<double> w(f.p.size());
        for (std::size_t i = 0; i < f.p.size(); ++i) w[i] = f.grid.x(i) * f.p[i];
        const double x = f.grid.h() * pairwise_sum(w);
        orbit.push(f.t, std::span<const double>(&x, 1));
    }
    return orbit;
}

/// Median of each slice, from the piecewise-constant cumulative mass.
inline Orbit median_orbit(const std::vector<DensityField>& seq) {
    if (seq.empty()) throw ValidationError("density", "empty density sequence");
    Orbit orbit;
    orbit.provenance = Provenance::median;
    for (const auto& f : seq) {
        const double half = 0.5 * f.mass();
        const double h = f.grid.h();
        double acc = 0.0, x = f.grid.hi;
        for (std::size_t i = 0; i < f.p.size(); ++i) {
            const double step = h * f.p[i];
            if (acc + step >= half && step > 0.0) {
                x = f.grid.face(i) + h * (half - acc) / step;
                break;
            }
            acc += step;
        }
        orbit.push(f.t, std::span<const double>(&x, 1));
    }
    return orbit;
}

/// Monte Carlo orbit with a 3-standard-error band (mean) or the
/// interquartile half-width (median).
struct McOrbit {
    Orbit orbit;
    std::vector<double> band;  // per time and component
    std::size_t paths = 0;
    std::size_t blown_up = 0;
};

inline McOrbit mean_orbit_mc(const SystemSpec& system, std::span<const double> x0, double horizon, double dt,
                             std::size_t paths, std::uint64_t seed, std::size_t output_every = 1) {
    if (system.noise.family == NoiseFamily::stable && system.noise.alpha <= 1.0)
        throw ValidationError("noise", "the mean does not exist for stable noise with alpha <= 1; use the median orbit");
    auto st = simulate_ensemble(system, x0, horizon, dt, paths, seed, {.output_every = output_every});
    McOrbit out;
    out.paths = paths;
    out.blown_up = st.blown_up;
    out.orbit.dimension = st.dimension;
    out.orbit.provenance = Provenance::mean;
    out.orbit.times = st.times;
    out.orbit.states = st.mean;
    out.band.resize(st.mean.size());
    for (std::size_t k = 0; k < st.times.size(); ++k)
        for (std::size_t c = 0; c < st.dimension; ++c) out.band[k * st.dimension + c] = 3.0 * st.standard_error(k, c);
    return out;
}

inline McOrbit median_orbit_mc(const SystemSpec& system, std::span<const double> x0, double horizon, double dt,
                               std::size_t paths, std::uint64_t seed, std::size_t output_every = 1) {
    auto st = simulate_ensemble(system, x0, horizon, dt, paths, seed,
                                {.output_every = output_every, .quantile_levels = {0.25, 0.5, 0.75}});
    McOrbit out;
    out.paths = paths;
    out.blown_up = st.blown_up;
    out.orbit.dimension = st.dimension;
    out.orbit.provenance = Provenance::median;
    out.orbit.times = st.times;
    out.orbit.states.resize(st.mean.size());
    out.band.resize(st.mean.size());
    for (std::size_t k = 0; k < st.times.size(); ++k)
        for (std::size_t c = 0; c < st.dimension; ++c) {
            out.orbit.states[k * st.dimension + c] = st.quantile_at(1, k, c);
            out.band[k * st.dimension + c] = 0.5 * (st.quantile_at(2, k, c) - st.quantile_at(0, k, c));
        }
    return out;
}

/// Experimental, n >= 1: per output time, the ensemble sample with the
/// highest Gaussian kernel density estimate (Scott bandwidth per component).
inline Orbit most_probable_orbit_kde(const EnsembleStats& st, std::size_t max_points = 2000) {
    if (st.samples.empty()) throw ValidationError("ensemble", "needs keep_paths");
    const std::size_t n = st.dimension;
    Orbit orbit;
    orbit.dimension = n;
    orbit.provenance = Provenance::most_probable;
    for (std::size_t k = 0; k < st.times.size(); ++k) {
        std::vector<std::vector<double>> pts;
        const std::size_t paths = st.samples[k].size() / n;
        const std::size_t stride = std::max<std::size_t>(1, paths / max_points);
        for (std::size_t p = 0; p < paths; p += stride) {
            std::vector<double> x(st.samples[k].begin() + static_cast<std::ptrdiff_t>(p * n),
                                  st.samples[k].begin() + static_cast<std::ptrdiff_t>((p + 1) * n));
            if (detail::finite_state(x)) pts.push_back(std::move(x));
        }
        if (pts.empty()) throw NumericalError("no finite samples at t = " + io::format_double(st.times[k]));
        std::vector<double> bw(n);
        const double factor = std::pow(static_cast<double>(pts.size()), -1.0 / (n + 4.0));
        for (std::size_t c = 0; c < n; ++c) {
            double m = 0.0, v = 0.0;
            for (const auto& x : pts) m += x[c];
            m /= static_cast<double>(pts.size());
            for (const auto& x : pts) v += (x[c] - m) * (x[c] - m);
            bw[c] = std::max(1e-12, std::sqrt(v / static_cast<double>(pts.size())) * factor);
        }
        std::size_t best = 0;
        double best_val = -1.0;
        for (std::size_t a = 0; a < pts.size(); ++a) {
            double s = 0.0;
            for (const auto& b : pts) {
                double q = 0.0;
                for (std::size_t c = 0; c < n; ++c) {
                    const double z = (pts[a][c] - b[c]) / bw[c];
                    q += z * z;
                }
                s += std::exp(-0.5 * q);
            }
            if (s > best_val) {
                best_val = s;
                best = a;
            }
        }
        orbit.push(st.times[k], pts[best]);
    }
    return orbit;
}

enum class EquilibriumKind { stable, unstable, unclassified };

inline const char* to_string(EquilibriumKind k) {
    switch (k) {
        case EquilibriumKind::stable: return "stable";
        case EquilibriumKind::unstable: return "unstable";
        case EquilibriumKind::unclassified: return "unclassified";
    }
    return "unknown";
}

struct Equilibrium {
    double location = 0.0;
    EquilibriumKind kind = EquilibriumKind::unclassified;
};

enum class OrbitKind { most_probable, mean };

struct PortraitConfig {
    Grid1D grid;
    double horizon = 50.0;
    double dt = 0.01;
    std::size_t output_every = 10;
    std::vector<double> probes;       // empty: 16 probes over the middle 80% of the grid
    double radius_fraction = 0.1;     // r = radius_fraction * domain width
    std::size_t max_bisections = 12;
    GeneratorOptions generator;
};

struct PhasePortrait {
    Provenance provenance = Provenance::most_probable;
    std::vector<double> probes;
    std::vector<Orbit> orbits;
    std::vector<Equilibrium> equilibria;
    std::vector<std::string> warnings;

    std::size_t count(EquilibriumKind k) const {
        return static_cast<std::size_t>(std::count_if(equilibria.begin(), equilibria.end(),
                                                      [k](const Equilibrium& e) { return e.kind == k; }));
    }
    std::vector<double> locations(EquilibriumKind k) const {
        std::vector<double> v;
        for (const auto& e : equilibria)
            if (e.kind == k) v.push_back(e.location);
        return v;
    }
};

inline std::vector<double> default_probes(const Grid1D& grid, std::size_t count = 16) {
    std::vector<double> v(count);
    for (std::size_t k = 0; k < count; ++k)
        v[k] = grid.lo + grid.width() * (0.1 + 0.8 * (static_cast<double>(k) + 0.5) / static_cast<double>(count));
    return v;
}

namespace detail {

struct ProbeSolver {
    const AdjointGenerator& gen;
    const PortraitConfig& cfg;
    OrbitKind kind;
    Provenance provenance;

    Orbit operator()(double x0) const {
        auto ev = evolve_density(gen, delta_initial(cfg.grid, x0), cfg.horizon, cfg.dt,
                                 {.output_every = cfg.output_every, .normalize_at_end = false});
        switch (provenance) {
            case Provenance::mean: return mean_orbit(ev.frames);
            case Provenance::median: return median_orbit(ev.frames);
            default: return most_probable_orbit(ev.frames, x0);
        }
    }
};

inline double value_at(const Orbit& o, double t) {
    const auto it = std::lower_bound(o.times.begin(), o.times.end(), t - 1e-12);
    const auto k = static_cast<std::size_t>(std::min<std::ptrdiff_t>(it - o.times.begin(), static_cast<std::ptrdiff_t>(o.size()) - 1));
    return o.at(k);
}

// |x(t) - c| non-increasing over [T/2, T] up to tol per output step.
inline bool converges_monotonically(const Orbit& o, double c, double horizon, double tol) {
    double prev = std::numeric_limits<double>::infinity();
    for (std::size_t k = 0; k < o.size(); ++k) {
        if (o.times[k] < 0.5 * horizon - 1e-12) continue;
        const double d = std::abs(o.at(k) - c);
        if (d > prev + tol) return false;
        prev = d;
    }
    return true;
}

}  // namespace detail

/// Equilibria from the T-horizon endpoints of most probable or mean orbits
/// started at the probes.
inline PhasePortrait phase_portrait(const SystemSpec& system, const PortraitConfig& cfg, OrbitKind kind) {
    cfg.grid.validate();
    auto probes = cfg.probes.empty() ? default_probes(cfg.grid) : cfg.probes;
    std::sort(probes.begin(), probes.end());
    if (probes.size() < 8) throw ValidationError("probes", "need at least 8 initial conditions");
    for (double p : probes)
        if (!(p > cfg.grid.lo && p < cfg.grid.hi)) throw ValidationError("probes", "probe outside the domain");

    PhasePortrait out;
    out.provenance = Provenance::most_probable;
    if (kind == OrbitKind::mean) {
        out.provenance = Provenance::mean;
        if (system.noise.family == NoiseFamily::stable && system.noise.alpha <= 1.0) {
            out.provenance = Provenance::median;
            out.warnings.push_back("mean undefined for alpha <= 1: median portrait");
        }
    }
    const auto gen = build_adjoint_generator(system, cfg.grid, cfg.generator);
    const detail::ProbeSolver solve{gen, cfg, kind, out.provenance};

    const double width = cfg.grid.width();
    const double r = cfg.radius_fraction * width;
    const double tol = 0.01 * cfg.grid.h();
    const double T = cfg.horizon;

    out.probes = probes;
    out.orbits.resize(probes.size());
    parallel_for(probes.size(), [&](std::size_t i) { out.orbits[i] = solve(probes[i]); });

    std::vector<double> ends(probes.size());
    for (std::size_t i = 0; i < probes.size(); ++i) {
        const auto& o = out.orbits[i];
        ends[i] = o.at(o.size() - 1);
        const double drift = std::abs(ends[i] - detail::value_at(o, 0.75 * T));
        if (drift > 0.1 * width)
            throw ValidationError("horizon", "too short: tail drift " + io::format_double(drift) + " from probe " +
                                                 io::format_double(probes[i]));
    }

    // single-linkage clusters of the endpoints at distance r/2
    std::vector<std::size_t> order(probes.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return ends[a] < ends[b]; });
    std::vector<std::size_t> cluster_of(probes.size());
    std::vector<double> centers;
    std::vector<std::size_t> sizes;
    for (std::size_t k = 0; k < order.size(); ++k) {
        const std::size_t i = order[k];
        if (k == 0 || ends[i] - ends[order[k - 1]] > 0.5 * r) {
            centers.push_back(0.0);
            sizes.push_back(0);
        }
        cluster_of[i] = centers.size() - 1;
        centers.back() += ends[i];
        ++sizes.back();
    }
    for (std::size_t c = 0; c < centers.size(); ++c) centers[c] /= static_cast<double>(sizes[c]);

    for (std::size_t c = 0; c < centers.size(); ++c) {
        const double x = centers[c];
        if (!(x > cfg.grid.lo && x < cfg.grid.hi)) continue;
        std::size_t near = 0;
        bool attracting = true;
        for (std::size_t i = 0; i < probes.size(); ++i) {
            if (std::abs(probes[i] - x) > r) continue;
            ++near;
            if (cluster_of[i] != c || !detail::converges_monotonically(out.orbits[i], x, T, tol)) attracting = false;
        }
        out.equilibria.push_back({x, near > 0 && attracting ? EquilibriumKind::stable : EquilibriumKind::unclassified});
        if (near == 0) out.warnings.push_back("no probe within r of " + io::format_double(x));
    }

    // Separatrices between neighbouring probes that end in different clusters.
    std::vector<double> seen;
    for (std::size_t i = 0; i + 1 < probes.size(); ++i) {
        if (cluster_of[i] == cluster_of[i + 1]) continue;
        double a = probes[i], b = probes[i + 1];
        const double ea = ends[i], eb = ends[i + 1];
        Orbit oa = out.orbits[i], ob = out.orbits[i + 1];
        auto cluster_end = [&](double e) {
            std::size_t best = 0;
            for (std::size_t c = 1; c < centers.size(); ++c)
                if (std::abs(e - centers[c]) < std::abs(e - centers[best])) best = c;
            return best;
        };
        const std::size_t ca = cluster_end(ea);
        for (std::size_t it = 0; it < cfg.max_bisections && b - a > cfg.grid.h(); ++it) {
            const double mid = 0.5 * (a + b);
            Orbit om = solve(mid);
            if (cluster_end(om.at(om.size() - 1)) == ca) {
                a = mid;
                oa = std::move(om);
            } else {
                b = mid;
                ob = std::move(om);
            }
        }
        const double u = 0.5 * (a + b);
        if (std::any_of(seen.begin(), seen.end(), [&](double s) { return std::abs(s - u) < 0.5 * r; })) continue;
        seen.push_back(u);
        const double da = std::abs(oa.at(oa.size() - 1) - u), db = std::abs(ob.at(ob.size() - 1) - u);
        const bool diverge = da > std::max(std::abs(a - u), 0.5 * r) && db > std::max(std::abs(b - u), 0.5 * r);
        out.equilibria.push_back({u, diverge ? EquilibriumKind::unstable : EquilibriumKind::unclassified});
    }
    std::sort(out.equilibria.begin(), out.equilibria.end(),
              [](const Equilibrium& x, const Equilibrium& y) { return x.location < y.location; });
    return out;
}

inline PhasePortrait most_probable_equilibria(const SystemSpec& system, const PortraitConfig& cfg) {
    return phase_portrait(system, cfg, OrbitKind::most_probable);
}

inline PhasePortrait mean_equilibria(const SystemSpec& system, const PortraitConfig& cfg) {
    return phase_portrait(system, cfg, OrbitKind::mean);
}

struct ChangePoint {
    double lower = 0.0;  // scanned values bracketing the change
    double upper = 0.0;
    std::size_t count_lower = 0;
    std::size_t count_upper = 0;
};

struct BifurcationDiagram {
    std::string parameter;
    std::vector<double> values;
    std::vector<std::vector<Equilibrium>> equilibria;
    std::vector<std::string> errors;  // per value, empty on success
    std::vector<ChangePoint> change_points;

    std::size_t stable_count(std::size_t k) const {
        return static_cast<std::size_t>(std::count_if(equilibria[k].begin(), equilibria[k].end(),
                                                      [](const Equilibrium& e) { return e.kind == EquilibriumKind::stable; }));
    }
};

/// System with one parameter replaced: an expression parameter, or the
/// noise fields "alpha" / "beta".
inline SystemSpec with_parameter(SystemSpec s, const std::string& name, double value) {
    if (s.parameters.count(name)) {
        s.parameters[name] = value;
    } else if (name == "alpha" && s.noise.family == NoiseFamily::stable) {
        s.noise.alpha = value;
    } else if (name == "beta" && s.noise.family == NoiseFamily::stable) {
        s.noise.beta = value;
    } else {
        throw ValidationError("scan.parameter", "'" + name + "' is not a parameter of the system");
    }
    s.validate();
    return s;
}

/// Runs the portrait per value (concurrently) and records where the number of
/// stable equilibria changes between adjacent successful values.
inline BifurcationDiagram bifurcation_scan(const SystemSpec& system, const std::string& parameter,
                                           const std::vector<double>& values, const PortraitConfig& cfg,
                                           OrbitKind kind = OrbitKind::most_probable) {
    if (values.empty()) throw ValidationError("scan.values", "empty value grid");
    for (std::size_t k = 1; k < values.size(); ++k)
        if (!(values[k] > values[k - 1])) throw ValidationError("scan.values", "must be strictly increasing");
    (void)with_parameter(system, parameter, values.front());

    BifurcationDiagram d;
    d.parameter = parameter;
    d.values = values;
    d.equilibria.resize(values.size());
    d.errors.resize(values.size());
    parallel_for(values.size(), [&](std::size_t k) {
        try {
            d.equilibria[k] = phase_portrait(with_parameter(system, parameter, values[k]), cfg, kind).equilibria;
        } catch (const std::exception& e) {
            d.errors[k] = e.what();
        }
    });
    std::optional<std::size_t> prev;
    for (std::size_t k = 0; k < values.size(); ++k) {
        if (!d.errors[k].empty()) continue;
        if (prev && d.stable_count(*prev) != d.stable_count(k))
            d.change_points.push_back({values[*prev], values[k], d.stable_count(*prev), d.stable_count(k)});
        prev = k;
    }
    return d;
}

/// Columns t, x, provenance; first state component only.
inline void write_orbits_csv(std::ostream& os, const std::vector<Orbit>& orbits) {
    io::CsvWriter csv(os, {"t", "x", "provenance"});
    for (const auto& o : orbits)
        for (std::size_t k = 0; k < o.size(); ++k) {
            csv.cell(o.times[k]).cell(o.at(k)).cell(std::string_view(to_string(o.provenance)));
            csv.end_row();
        }
}

inline void write_equilibria_csv(std::ostream& os, const std::vector<Equilibrium>& eq, double parameter_value) {
    io::CsvWriter csv(os, {"location", "kind", "parameter-value"});
    for (const auto& e : eq) {
        csv.cell(e.location).cell(std::string_view(to_string(e.kind))).cell(parameter_value);
        csv.end_row();
    }
}

inline void write_diagram_csv(std::ostream& os, const BifurcationDiagram& d) {
    io::CsvWriter csv(os, {"param", "location", "kind"});
    for (std::size_t k = 0; k < d.values.size(); ++k)
        for (const auto& e : d.equilibria[k]) {
            csv.cell(d.values[k]).cell(e.location).cell(std::string_view(to_string(e.kind)));
            csv.end_row();
        }
}

}  // namespace stodyn
