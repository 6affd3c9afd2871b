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

// Brownian and alpha-stable noise: samplers, the stable jump measure and
// reproducible two-sided increment paths.
//
// Stable laws use the S_alpha(scale, beta, 0) parameterisation whose
// characteristic function is
//
//   exp(-scale^a |u|^a (1 - i beta sign(u) tan(pi a / 2)))                a != 1
//   exp(-scale |u| (1 + i beta (2/pi) sign(u) log|u|))                    a == 1
//
// so alpha = 2 gives Normal(0, 2 scale^2). The Brownian family is
// normalised separately so its increments have variance exactly dt.

#pragma once

#include <algorithm>
#include <climits>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <string>
#include <utility>
#include <vector>

#include "stodyn/error.hpp"
#include "stodyn/rng.hpp"

namespace stodyn {

enum class NoiseFamily { brownian, stable };

inline const char* to_string(NoiseFamily f) { return f == NoiseFamily::brownian ? "brownian" : "stable"; }

struct NoiseSpec {
    NoiseFamily family = NoiseFamily::brownian;
    double alpha = 2.0;
    double beta = 0.0;
    std::size_t dimension = 1;
    // When false every component receives the same scalar increment.
    bool independent_components = true;

    static NoiseSpec brownian(std::size_t dim = 1) {
        NoiseSpec s;
        s.dimension = dim;
        return s;
    }

    static NoiseSpec stable(double alpha, double beta, std::size_t dim = 1) {
        NoiseSpec s;
        s.family = NoiseFamily::stable;
        s.alpha = alpha;
        s.beta = beta;
        s.dimension = dim;
        s.validate();
        return s;
    }

    double effective_alpha() const noexcept { return family == NoiseFamily::brownian ? 2.0 : alpha; }
    double effective_beta() const noexcept { return family == NoiseFamily::brownian ? 0.0 : beta; }

    void validate() const {
        if (family == NoiseFamily::stable) {
            if (!(alpha > 0.0 && alpha <= 2.0)) throw ValidationError("alpha", "must lie in (0, 2]");
            if (!(beta >= -1.0 && beta <= 1.0)) throw ValidationError("beta", "must lie in [-1, 1]");
        }
        if (dimension == 0) throw ValidationError("noise_dimension", "must be at least 1");
    }
};

/// H_alpha: 2/pi at alpha = 1, alpha(1 - alpha) / (Gamma(2 - alpha) cos(pi alpha / 2)) otherwise.
inline double stable_h(double alpha) {
    if (!(alpha > 0.0 && alpha < 2.0)) throw ValidationError("alpha", "jump measure needs alpha in (0, 2)");
    if (alpha == 1.0) return 2.0 / std::numbers::pi;
    // cos(pi a / 2) == sin(pi (1 - a) / 2) keeps full relative precision near a = 1.
    const double c = std::sin(0.5 * std::numbers::pi * (1.0 - alpha));
    return alpha * (1.0 - alpha) / (std::tgamma(2.0 - alpha) * c);
}

/// Weights (C1, C2) of the positive and negative jump halves.
struct JumpWeights {
    double positive;
    double negative;
};

inline JumpWeights jump_weights(double alpha, double beta) {
    if (!(beta >= -1.0 && beta <= 1.0)) throw ValidationError("beta", "must lie in [-1, 1]");
    const double h = stable_h(alpha);
    return {0.5 * h * (1.0 + beta), 0.5 * h * (1.0 - beta)};
}

/// Density of the stable jump measure at y != 0.
inline double jump_measure_density(double y, double alpha, double beta) {
    if (y == 0.0) throw ValidationError("y", "jump measure is singular at the origin");
    const auto w = jump_weights(alpha, beta);
    const double c = y > 0.0 ? w.positive : w.negative;
    return c / std::pow(std::abs(y), 1.0 + alpha);
}

/// Closed-form mass of the jump measure outside [-r, r].
inline double jump_tail_mass(double r, double alpha, double beta) {
    const auto w = jump_weights(alpha, beta);
    return (w.positive + w.negative) * std::pow(r, -alpha) / alpha;
}

/// One draw from S_alpha(scale, beta, 0) by Chambers-Mallows-Stuck.
inline double sample_stable(double alpha, double beta, double scale, CounterRng& rng) {
    if (!(alpha > 0.0 && alpha <= 2.0)) throw ValidationError("alpha", "must lie in (0, 2]");
    if (!(beta >= -1.0 && beta <= 1.0)) throw ValidationError("beta", "must lie in [-1, 1]");
    if (!(scale > 0.0)) throw ValidationError("scale", "must be positive");

    constexpr double pi = std::numbers::pi;
    if (alpha == 2.0) return scale * std::numbers::sqrt2 * rng.normal();

    const double v = pi * (rng.uniform() - 0.5);
    const double w = rng.exponential();

    if (alpha == 1.0) {
        const double a = 0.5 * pi + beta * v;
        const double x = (2.0 / pi) * (a * std::tan(v) - beta * std::log(0.5 * pi * w * std::cos(v) / a));
        return scale * x + (2.0 / pi) * beta * scale * std::log(scale);
    }

    const double t = beta * std::tan(0.5 * pi * alpha);
    const double b = std::atan(t) / alpha;
    const double s = std::pow(1.0 + t * t, 0.5 / alpha);
    const double x = s * std::sin(alpha * (v + b)) / std::pow(std::cos(v), 1.0 / alpha) *
                     std::pow(std::cos(v - alpha * (v + b)) / w, (1.0 - alpha) / alpha);
    return scale * x;
}

/// One increment of the driving process over a step of length dt.
inline double sample_increment(const NoiseSpec& spec, double dt, CounterRng& rng) {
    if (spec.family == NoiseFamily::brownian) return std::sqrt(dt) * rng.normal();
    return sample_stable(spec.alpha, spec.beta, std::pow(dt, 1.0 / spec.alpha), rng);
}

/// Increments per RNG block. Index k lives in block floor(k / kNoiseBlock).
inline constexpr std::int64_t kNoiseBlock = 1024;

inline std::int64_t floor_div(std::int64_t a, std::int64_t b) noexcept {
    std::int64_t q = a / b;
    if ((a % b != 0) && ((a < 0) != (b < 0))) --q;
    return q;
}

/// Generates one block of increments (all components, step-major) for the
/// given lineage. Draws are sequential, so a short fill is a prefix of the
/// full block.
inline void fill_noise_block(const NoiseSpec& spec, double dt, std::uint64_t seed, std::uint64_t stream,
                             std::int64_t block, std::vector<double>& out,
                             std::size_t steps = static_cast<std::size_t>(kNoiseBlock)) {
    const std::size_t d = spec.dimension;
    steps = std::min(steps, static_cast<std::size_t>(kNoiseBlock));
    out.resize(steps * d);
    CounterRng rng({seed, stream, block});
    for (std::size_t k = 0; k < steps; ++k) {
        if (spec.independent_components) {
            for (std::size_t c = 0; c < d; ++c) out[k * d + c] = sample_increment(spec, dt, rng);
        } else {
            const double v = sample_increment(spec, dt, rng);
            for (std::size_t c = 0; c < d; ++c) out[k * d + c] = v;
        }
    }
}

/// Sequential reader over the increments of one lineage; yields exactly the
/// values a materialised NoisePath with the same lineage would hold.
class NoiseStream {
public:
    /// Steps at or past `end` are never read; the last block is filled short.
    NoiseStream(NoiseSpec spec, double dt, std::uint64_t seed, std::uint64_t stream, std::int64_t first = 0,
                std::int64_t end = INT64_MAX)
        : spec_(std::move(spec)), dt_(dt), seed_(seed), stream_(stream), next_(first), end_(end) {}

    /// Increment vector for the next step (dimension() values).
    const double* next() {
        const std::int64_t b = floor_div(next_, kNoiseBlock);
        if (b != block_) {
            const std::int64_t start = b * kNoiseBlock;
            const auto steps =
                static_cast<std::size_t>(end_ >= start + kNoiseBlock ? kNoiseBlock : std::max<std::int64_t>(1, end_ - start));
            fill_noise_block(spec_, dt_, seed_, stream_, b, buf_, steps);
            block_ = b;
        }
        if (next_ >= end_) throw ValidationError("noise", "read past the declared end of the stream");
        const auto off = static_cast<std::size_t>(next_ - b * kNoiseBlock) * spec_.dimension;
        ++next_;
        return buf_.data() + off;
    }

    std::size_t dimension() const noexcept { return spec_.dimension; }

private:
    NoiseSpec spec_;
    double dt_;
    std::uint64_t seed_;
    std::uint64_t stream_;
    std::int64_t next_;
    std::int64_t end_;
    std::int64_t block_ = INT64_MIN;
    std::vector<double> buf_;
};

/// Two-sided discretised noise realisation. Step k covers
/// [k dt, (k + 1) dt) relative to the shift origin.
class NoisePath {
public:
    NoisePath() = default;

    NoisePath(NoiseSpec spec, double dt, std::int64_t first, std::int64_t end, std::uint64_t seed,
              std::uint64_t stream, std::vector<double> increments)
        : spec_(std::move(spec)), dt_(dt), first_(first), end_(end), seed_(seed), stream_(stream),
          inc_(std::move(increments)) {}

    const NoiseSpec& spec() const noexcept { return spec_; }
    double dt() const noexcept { return dt_; }
    std::size_t dimension() const noexcept { return spec_.dimension; }
    std::uint64_t seed() const noexcept { return seed_; }
    std::uint64_t stream() const noexcept { return stream_; }
    std::int64_t shift() const noexcept { return shift_; }

    /// First and one-past-last valid step index (after the shift).
    std::int64_t first() const noexcept { return first_ - shift_; }
    std::int64_t end() const noexcept { return end_ - shift_; }
    double t_min() const noexcept { return static_cast<double>(first()) * dt_; }
    double t_max() const noexcept { return static_cast<double>(end()) * dt_; }

    bool covers(std::int64_t k) const noexcept { return k >= first() && k < end(); }

    /// Increment of component c over step k.
    double at(std::int64_t k, std::size_t c = 0) const {
        if (!covers(k)) throw ValidationError("noise_path", "step " + std::to_string(k) + " outside path coverage");
        return inc_[static_cast<std::size_t>(k + shift_ - first_) * spec_.dimension + c];
    }

    const double* step(std::int64_t k) const {
        if (!covers(k)) throw ValidationError("noise_path", "step " + std::to_string(k) + " outside path coverage");
        return inc_.data() + static_cast<std::size_t>(k + shift_ - first_) * spec_.dimension;
    }

    /// The time-shifted realisation theta_{steps dt} omega: step k of the
    /// result is step k + steps of this path.
    NoisePath shifted(std::int64_t steps) const {
        NoisePath p = *this;
        p.shift_ += steps;
        return p;
    }

    /// Same realisation with every increment multiplied by `factor`.
    NoisePath scaled(double factor) const {
        NoisePath p = *this;
        for (auto& v : p.inc_) v *= factor;
        return p;
    }

    const std::vector<double>& raw() const noexcept { return inc_; }

private:
    NoiseSpec spec_;
    double dt_ = 0.0;
    std::int64_t first_ = 0;
    std::int64_t end_ = 0;
    std::uint64_t seed_ = 0;
    std::uint64_t stream_ = 0;
    std::int64_t shift_ = 0;
    std::vector<double> inc_;
};

/// Materialises steps [-steps_before, steps_after) of the lineage (seed, stream).
inline NoisePath make_noise_path(const NoiseSpec& spec, double dt, std::int64_t steps_before,
                                 std::int64_t steps_after, std::uint64_t seed, std::uint64_t stream) {
    spec.validate();
    if (!(dt > 0.0)) throw ValidationError("dt", "must be positive");
    if (steps_before < 0 || steps_after < 0) throw ValidationError("steps", "must be non-negative");
    const std::int64_t first = -steps_before;
    const std::int64_t end = steps_after;
    std::vector<double> inc(static_cast<std::size_t>(end - first) * spec.dimension);
    NoiseStream s(spec, dt, seed, stream, first, end);
    for (std::int64_t k = first; k < end; ++k) {
        const double* v = s.next();
        std::copy(v, v + spec.dimension, inc.begin() + static_cast<std::ptrdiff_t>((k - first) * spec.dimension));
    }
    return NoisePath(spec, dt, first, end, seed, stream, std::move(inc));
}

}  // namespace stodyn
