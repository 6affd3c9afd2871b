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

// Pathwise Euler-Maruyama integration of
//
//   dX_t = f(X_t, t) dt + sigma(X_t) dL_t,    X_0 = x0,
//
// where L is Brownian motion or an alpha-stable Levy motion, plus
// Monte Carlo ensembles and first-passage statistics on top of it.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "stodyn/error.hpp"
#include "stodyn/expr.hpp"
#include "stodyn/noise.hpp"
#include "stodyn/parallel.hpp"

namespace stodyn {

/// Drift and noise-intensity expressions of an n-dimensional SDE.
struct SystemSpec {
    std::size_t dimension = 1;
    std::vector<expr::Expr> drift;      // n entries over x1..xn, t
    std::vector<expr::Expr> diffusion;  // n * noise.dimension entries, row-major
    NoiseSpec noise;
    expr::Bindings parameters;

    /// Scalar system from expression strings.
    static SystemSpec scalar(std::string_view drift, std::string_view sigma, NoiseSpec noise,
                             expr::Bindings params = {}) {
        SystemSpec s;
        s.drift.push_back(expr::parse(drift));
        s.diffusion.push_back(expr::parse(sigma));
        s.noise = std::move(noise);
        s.parameters = std::move(params);
        s.validate();
        return s;
    }

    std::vector<std::string> slot_names() const {
        std::vector<std::string> names;
        for (std::size_t i = 0; i < dimension; ++i) names.push_back("x" + std::to_string(i + 1));
        names.emplace_back("t");
        return names;
    }

    void validate() const {
        noise.validate();
        if (dimension == 0) throw ValidationError("dimension", "must be at least 1");
        if (drift.size() != dimension)
            throw ValidationError("drift", "expected " + std::to_string(dimension) + " expressions");
        if (diffusion.size() != dimension * noise.dimension)
            throw ValidationError("sigma", "expected " + std::to_string(dimension * noise.dimension) +
                                               " expressions (n x noise dimension)");
        const auto slots = slot_names();
        auto check = [&](const expr::Expr& e, const char* field) {
            for (const auto& v : e.free_variables()) {
                if (std::find(slots.begin(), slots.end(), v) != slots.end()) continue;
                if (parameters.count(v)) continue;
                throw ValidationError(field, "unbound identifier '" + v + "' in '" + e.source() + "'");
            }
        };
        for (const auto& e : drift) check(e, "drift");
        for (const auto& e : diffusion) check(e, "sigma");
    }

    /// True when every noise intensity is state independent.
    bool additive_noise() const {
        for (const auto& e : diffusion)
            for (const auto& v : e.free_variables())
                if (expr::is_state_variable(v)) return false;
        return true;
    }
};

/// Drift and diffusion compiled against the slot layout (x1..xn, t).
class CompiledSystem {
public:
    explicit CompiledSystem(const SystemSpec& spec) : n_(spec.dimension), d_(spec.noise.dimension) {
        spec.validate();
        const auto slots = spec.slot_names();
        for (const auto& e : spec.drift) drift_.emplace_back(e, slots, spec.parameters);
        for (const auto& e : spec.diffusion) sigma_.emplace_back(e, slots, spec.parameters);
        scratch_.resize(n_ + 1);
    }

    std::size_t dimension() const noexcept { return n_; }
    std::size_t noise_dimension() const noexcept { return d_; }

    /// x <- x + f(x, t) dt + sigma(x, t) dL.
    void em_step(std::span<double> x, double t, double dt, const double* dl) {
        std::copy(x.begin(), x.end(), scratch_.begin());
        scratch_[n_] = t;
        for (std::size_t i = 0; i < n_; ++i) {
            double dx = drift_[i](scratch_) * dt;
            for (std::size_t j = 0; j < d_; ++j) dx += sigma_[i * d_ + j](scratch_) * dl[j];
            x[i] += dx;
        }
    }

    double drift(std::size_t i, std::span<const double> slots) const { return drift_[i](slots); }
    double sigma(std::size_t i, std::size_t j, std::span<const double> slots) const {
        return sigma_[i * d_ + j](slots);
    }

private:
    std::size_t n_;
    std::size_t d_;
    std::vector<expr::Program> drift_;
    std::vector<expr::Program> sigma_;
    std::vector<double> scratch_;
};

enum class Provenance { sample, most_probable, mean, median, reduced_slow };

inline const char* to_string(Provenance p) {
    switch (p) {
        case Provenance::sample: return "sample";
        case Provenance::most_probable: return "most-probable";
        case Provenance::mean: return "mean";
        case Provenance::median: return "median";
        case Provenance::reduced_slow: return "reduced-slow";
    }
    return "unknown";
}

/// A trajectory on a strictly increasing time grid.
struct Orbit {
    std::size_t dimension = 1;
    std::vector<double> times;
    std::vector<double> states;  // times.size() * dimension, time-major
    Provenance provenance = Provenance::sample;
    std::optional<double> blow_up_time;

    std::size_t size() const noexcept { return times.size(); }
    double at(std::size_t k, std::size_t c = 0) const { return states[k * dimension + c]; }
    std::span<const double> state(std::size_t k) const { return {states.data() + k * dimension, dimension}; }

    void push(double t, std::span<const double> x) {
        times.push_back(t);
        states.insert(states.end(), x.begin(), x.end());
    }

    /// Component c as a series.
    std::vector<double> component(std::size_t c = 0) const {
        std::vector<double> v(size());
        for (std::size_t k = 0; k < size(); ++k) v[k] = at(k, c);
        return v;
    }
};

inline std::int64_t step_count(double horizon, double dt) {
    if (!(dt > 0.0)) throw ValidationError("dt", "must be positive");
    if (!(horizon >= 0.0)) throw ValidationError("T", "must be non-negative");
    const double k = std::round(horizon / dt);
    if (std::abs(k * dt - horizon) > 1e-9 * std::max(1.0, horizon))
        throw ValidationError("dt", "horizon must be an integer number of steps");
    return static_cast<std::int64_t>(k);
}

namespace detail {
inline bool finite_state(std::span<const double> x) {
    return std::all_of(x.begin(), x.end(), [](double v) { return std::isfinite(v); });
}
}  // namespace detail

/// Euler-Maruyama along a materialised noise path. Stops at the first
/// non-finite state and records the blow-up time.
inline Orbit integrate_em(const SystemSpec& system, std::span<const double> x0, double horizon, double dt,
                          const NoisePath& path, std::size_t output_every = 1) {
    if (x0.size() != system.dimension) throw ValidationError("x0", "dimension mismatch");
    if (path.dimension() != system.noise.dimension) throw ValidationError("noise_path", "dimension mismatch");
    if (std::abs(path.dt() - dt) > 1e-15 * dt) throw ValidationError("dt", "does not match the noise path");
    const std::int64_t steps = step_count(horizon, dt);
    if (steps > 0 && (!path.covers(0) || !path.covers(steps - 1)))
        throw ValidationError("noise_path", "does not cover [0, T]");
    output_every = std::max<std::size_t>(1, output_every);

    CompiledSystem sys(system);
    Orbit orbit;
    orbit.dimension = system.dimension;
    std::vector<double> x(x0.begin(), x0.end());
    orbit.push(0.0, x);
    for (std::int64_t k = 0; k < steps; ++k) {
        sys.em_step(x, static_cast<double>(k) * dt, dt, path.step(k));
        const double t = static_cast<double>(k + 1) * dt;
        if (!detail::finite_state(x)) {
            orbit.blow_up_time = t;
            break;
        }
        if ((k + 1) % static_cast<std::int64_t>(output_every) == 0 || k + 1 == steps) orbit.push(t, x);
    }
    return orbit;
}

struct EnsembleOptions {
    std::size_t output_every = 1;
    std::vector<double> quantile_levels{0.05, 0.5, 0.95};
    bool keep_paths = false;
    std::uint64_t stream_offset = 0;
};

/// Per-time statistics over an ensemble of independently streamed paths.
struct EnsembleStats {
    std::size_t dimension = 1;
    std::vector<double> times;
    std::vector<double> mean;       // times * dimension
    std::vector<double> variance;   // times * dimension, unbiased
    std::vector<double> quantile_levels;
    std::vector<double> quantiles;  // levels * times * dimension
    std::vector<std::size_t> alive; // finite paths per output time
    std::size_t paths = 0;
    std::size_t blown_up = 0;
    std::uint64_t seed = 0;
    std::uint64_t stream_offset = 0;
    // samples[k][p * dimension + c]; NaN once path p has blown up. Only
    // populated when EnsembleOptions::keep_paths is set.
    std::vector<std::vector<double>> samples;

    double blow_up_fraction() const { return paths ? static_cast<double>(blown_up) / paths : 0.0; }
    double mean_at(std::size_t k, std::size_t c = 0) const { return mean[k * dimension + c]; }
    double variance_at(std::size_t k, std::size_t c = 0) const { return variance[k * dimension + c]; }
    double quantile_at(std::size_t level, std::size_t k, std::size_t c = 0) const {
        return quantiles[(level * times.size() + k) * dimension + c];
    }
    /// Standard error of the mean at output time k.
    double standard_error(std::size_t k, std::size_t c = 0) const {
        return alive[k] > 1 ? std::sqrt(variance_at(k, c) / static_cast<double>(alive[k])) : 0.0;
    }
};

namespace detail {

/// Runs one path of the lineage (seed, stream) and writes its states at the
/// output times into out (NaN after blow-up). Returns true on blow-up.
inline bool run_path(CompiledSystem& sys, const NoiseSpec& noise, std::span<const double> x0, double dt,
                     std::int64_t steps, std::size_t output_every, std::uint64_t seed, std::uint64_t stream,
                     std::span<double> out) {
    const std::size_t n = x0.size();
    std::vector<double> x(x0.begin(), x0.end());
    NoiseStream s(noise, dt, seed, stream, 0, steps);
    std::copy(x.begin(), x.end(), out.begin());
    std::size_t slot = 1;
    bool blown = false;
    for (std::int64_t k = 0; k < steps; ++k) {
        sys.em_step(x, static_cast<double>(k) * dt, dt, s.next());
        if (!finite_state(x)) {
            blown = true;
            break;
        }
        if ((k + 1) % static_cast<std::int64_t>(output_every) == 0 || k + 1 == steps) {
            std::copy(x.begin(), x.end(), out.begin() + static_cast<std::ptrdiff_t>(slot * n));
            ++slot;
        }
    }
    std::fill(out.begin() + static_cast<std::ptrdiff_t>(slot * n), out.end(), std::numeric_limits<double>::quiet_NaN());
    return blown;
}

inline std::vector<double> output_times(double dt, std::int64_t steps, std::size_t every) {
    std::vector<double> t{0.0};
    for (std::int64_t k = 1; k <= steps; ++k)
        if (k % static_cast<std::int64_t>(every) == 0 || k == steps) t.push_back(static_cast<double>(k) * dt);
    return t;
}

}  // namespace detail

/// Monte Carlo ensemble of M Euler-Maruyama paths; path p uses stream
/// stream_offset + p of the root seed.
inline EnsembleStats simulate_ensemble(const SystemSpec& system, std::span<const double> x0, double horizon,
                                       double dt, std::size_t paths, std::uint64_t seed,
                                       const EnsembleOptions& opt = {}) {
    if (paths == 0) throw ValidationError("paths", "must be at least 1");
    if (x0.size() != system.dimension) throw ValidationError("x0", "dimension mismatch");
    system.validate();
    const std::int64_t steps = step_count(horizon, dt);
    const std::size_t every = std::max<std::size_t>(1, opt.output_every);
    const auto times = detail::output_times(dt, steps, every);
    const std::size_t nt = times.size(), n = system.dimension;

    // Path-major scratch: path p owns [p * nt * n, (p + 1) * nt * n).
    std::vector<double> buf(paths * nt * n);
    std::vector<char> blown(paths, 0);
    const CompiledSystem prototype(system);
    parallel_for(paths, [&](std::size_t p) {
        CompiledSystem sys = prototype;
        blown[p] = detail::run_path(sys, system.noise, x0, dt, steps, every, seed, opt.stream_offset + p,
                                    std::span<double>(buf.data() + p * nt * n, nt * n));
    });

    EnsembleStats st;
    st.dimension = n;
    st.times = times;
    st.paths = paths;
    st.seed = seed;
    st.stream_offset = opt.stream_offset;
    st.quantile_levels = opt.quantile_levels;
    st.blown_up = static_cast<std::size_t>(std::count(blown.begin(), blown.end(), 1));
    st.mean.assign(nt * n, 0.0);
    st.variance.assign(nt * n, 0.0);
    st.alive.assign(nt, 0);
    st.quantiles.assign(opt.quantile_levels.size() * nt * n, std::numeric_limits<double>::quiet_NaN());
    if (opt.keep_paths) st.samples.assign(nt, std::vector<double>(paths * n));

    std::vector<double> column;
    column.reserve(paths);
    for (std::size_t k = 0; k < nt; ++k) {
        if (opt.keep_paths)
            for (std::size_t p = 0; p < paths; ++p)
                for (std::size_t c = 0; c < n; ++c) st.samples[k][p * n + c] = buf[(p * nt + k) * n + c];
        for (std::size_t c = 0; c < n; ++c) {
            column.clear();
            for (std::size_t p = 0; p < paths; ++p) {
                const double v = buf[(p * nt + k) * n + c];
                if (std::isfinite(v)) column.push_back(v);
            }
            if (c == 0) st.alive[k] = column.size();
            if (column.empty()) {
                st.mean[k * n + c] = std::numeric_limits<double>::quiet_NaN();
                st.variance[k * n + c] = std::numeric_limits<double>::quiet_NaN();
                continue;
            }
            const double m = pairwise_sum(column) / static_cast<double>(column.size());
            std::vector<double> dev(column.size());
            for (std::size_t i = 0; i < column.size(); ++i) dev[i] = (column[i] - m) * (column[i] - m);
            st.mean[k * n + c] = m;
            st.variance[k * n + c] = column.size() > 1 ? pairwise_sum(dev) / static_cast<double>(column.size() - 1) : 0.0;
            std::sort(column.begin(), column.end());
            for (std::size_t l = 0; l < opt.quantile_levels.size(); ++l) {
                const double pos = opt.quantile_levels[l] * static_cast<double>(column.size() - 1);
                const auto lo = static_cast<std::size_t>(std::floor(pos));
                const std::size_t hi = std::min(lo + 1, column.size() - 1);
                const double w = pos - static_cast<double>(lo);
                st.quantiles[(l * nt + k) * n + c] = (1.0 - w) * column[lo] + w * column[hi];
            }
        }
    }
    return st;
}

/// Open interval whose first exit is recorded.
struct Interval {
    double lo = -std::numeric_limits<double>::infinity();
    double hi = std::numeric_limits<double>::infinity();
    bool contains(double x) const noexcept { return x > lo && x < hi; }
};

struct FirstPassageOptions {
    std::size_t component = 0;
    // Basin threshold for transition counting; disabled when empty.
    std::optional<double> threshold;
    double hysteresis = 0.1;
    std::size_t survival_points = 101;
    std::uint64_t stream_offset = 0;
};

struct FirstPassageSummary {
    std::vector<double> exit_times;  // per path; +inf when censored at T_max
    std::size_t paths = 0;
    std::size_t exited = 0;
    std::size_t blown_up = 0;
    double horizon = 0.0;
    double exit_probability = 0.0;
    double mean_exit_time = std::numeric_limits<double>::quiet_NaN();  // among exited paths
    double restricted_mean = 0.0;                                      // E[min(tau, T_max)]
    double median_exit_time = std::numeric_limits<double>::quiet_NaN();  // NaN if >= 50% censored
    std::vector<double> survival_times;
    std::vector<double> survival;
    std::size_t left_to_right = 0;
    std::size_t right_to_left = 0;
    std::vector<std::uint32_t> path_transitions;

    /// Fraction of paths that exited strictly before t.
    double exit_fraction_before(double t) const {
        std::size_t c = 0;
        for (double e : exit_times) c += e < t;
        return paths ? static_cast<double>(c) / paths : 0.0;
    }
};

/// First exit of `domain` by component opt.component, censored at T_max.
/// With a threshold set, paths run to T_max and basin transitions (with a
/// hysteresis band) are counted as well.
inline FirstPassageSummary first_passage_stats(const SystemSpec& system, std::span<const double> x0,
                                               Interval domain, double t_max, double dt, std::size_t paths,
                                               std::uint64_t seed, const FirstPassageOptions& opt = {}) {
    if (x0.size() != system.dimension) throw ValidationError("x0", "dimension mismatch");
    if (opt.component >= system.dimension) throw ValidationError("component", "out of range");
    if (!domain.contains(x0[opt.component])) throw ValidationError("x0", "initial state outside the domain");
    if (paths == 0) throw ValidationError("paths", "must be at least 1");
    if (!(opt.hysteresis >= 0.0)) throw ValidationError("hysteresis", "must be non-negative");
    const std::int64_t steps = step_count(t_max, dt);
    const std::size_t c = opt.component;

    FirstPassageSummary out;
    out.paths = paths;
    out.horizon = t_max;
    out.exit_times.assign(paths, std::numeric_limits<double>::infinity());
    out.path_transitions.assign(paths, 0);
    std::vector<std::uint32_t> l2r(paths, 0), r2l(paths, 0);
    std::vector<char> blown(paths, 0);

    const CompiledSystem prototype(system);
    parallel_for(paths, [&](std::size_t p) {
        CompiledSystem sys = prototype;
        std::vector<double> x(x0.begin(), x0.end());
        NoiseStream s(system.noise, dt, seed, opt.stream_offset + p, 0, steps);
        int basin = 0;
        if (opt.threshold) {
            if (x[c] < *opt.threshold - opt.hysteresis) basin = -1;
            else if (x[c] > *opt.threshold + opt.hysteresis) basin = 1;
        }
        for (std::int64_t k = 0; k < steps; ++k) {
            sys.em_step(x, static_cast<double>(k) * dt, dt, s.next());
            const double t = static_cast<double>(k + 1) * dt;
            if (!detail::finite_state(x)) {
                blown[p] = 1;
                if (!std::isfinite(out.exit_times[p])) out.exit_times[p] = t;
                break;
            }
            if (!std::isfinite(out.exit_times[p]) && !domain.contains(x[c])) {
                out.exit_times[p] = t;
                if (!opt.threshold) break;
            }
            if (opt.threshold) {
                const double v = x[c];
                if (v > *opt.threshold + opt.hysteresis && basin != 1) {
                    if (basin == -1) ++l2r[p];
                    basin = 1;
                } else if (v < *opt.threshold - opt.hysteresis && basin != -1) {
                    if (basin == 1) ++r2l[p];
                    basin = -1;
                }
            }
        }
    });

    std::vector<double> exited_times;
    std::vector<double> clipped(paths);
    for (std::size_t p = 0; p < paths; ++p) {
        const double e = out.exit_times[p];
        clipped[p] = std::min(e, t_max);
        if (std::isfinite(e)) exited_times.push_back(e);
        out.left_to_right += l2r[p];
        out.right_to_left += r2l[p];
        out.path_transitions[p] = l2r[p] + r2l[p];
        out.blown_up += blown[p];
    }
    out.exited = exited_times.size();
    out.exit_probability = static_cast<double>(out.exited) / static_cast<double>(paths);
    out.restricted_mean = pairwise_sum(clipped) / static_cast<double>(paths);
    if (!exited_times.empty()) out.mean_exit_time = pairwise_sum(exited_times) / static_cast<double>(exited_times.size());

    std::vector<double> sorted = out.exit_times;
    std::sort(sorted.begin(), sorted.end());
    if (2 * out.exited > paths) out.median_exit_time = sorted[(paths - 1) / 2];

    const std::size_t sp = std::max<std::size_t>(2, opt.survival_points);
    for (std::size_t i = 0; i < sp; ++i) {
        const double t = t_max * static_cast<double>(i) / static_cast<double>(sp - 1);
        const auto exited_by = static_cast<std::size_t>(std::upper_bound(sorted.begin(), sorted.end(), t) - sorted.begin());
        out.survival_times.push_back(t);
        out.survival.push_back(1.0 - static_cast<double>(exited_by) / static_cast<double>(paths));
    }
    return out;
}

}  // namespace stodyn
