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

// 1-D Fokker-Planck solver p_t = A* p on a cell-centred grid with absorbing
// ends.
//
// Local part, in conservative flux form:
//     -d/dx (V p) + d2/dx2 (D p)
// Brownian noise: V = f, D = sigma^2 / 2.
//
// Stable noise (0 < alpha < 2) adds the adjoint of the jump integral
//     int [p(x+y) - p(x) - 1{|y|<1} y p'(x)] nu~(dy),   nu~ = nu with beta -> -beta
// split into
//   |y| in [h/2, R]  exact product integration against the piecewise-linear
//                    interpolant of p (a Toeplitz stencil, applied explicitly)
//   |y| > R          -p(x) * nu(|y| > R), closed form
//   |y| < h/2        second-order Taylor term, a diffusion folded into D
// The compensator and the first-moment pieces that can be done analytically
// end up as a constant velocity folded into V.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numbers>
#include <ostream>
#include <string>
#include <vector>

#include <boost/math/quadrature/gauss.hpp>

#include "stodyn/error.hpp"
#include "stodyn/io.hpp"
#include "stodyn/noise.hpp"
#include "stodyn/parallel.hpp"
#include "stodyn/sde.hpp"

namespace stodyn {

struct Grid1D {
    double lo = -1.0;
    double hi = 1.0;
    std::size_t n = 16;

    Grid1D() = default;
    Grid1D(double lo_, double hi_, std::size_t n_) : lo(lo_), hi(hi_), n(n_) { validate(); }

    double h() const noexcept { return (hi - lo) / static_cast<double>(n); }
    double x(std::size_t i) const noexcept { return lo + (static_cast<double>(i) + 0.5) * h(); }
    double face(std::size_t k) const noexcept { return lo + static_cast<double>(k) * h(); }
    double width() const noexcept { return hi - lo; }

    void validate() const {
        if (!(lo < hi)) throw ValidationError("grid", "x_lo must be below x_hi");
        if (n < 16) throw ValidationError("grid", "needs at least 16 cells");
    }

    bool operator==(const Grid1D&) const = default;
};

struct DensityField {
    Grid1D grid;
    std::vector<double> p;
    double t = 0.0;

    double mass() const { return grid.h() * pairwise_sum(p); }

    double mean() const {
        std::vector<double> w(p.size());
        for (std::size_t i = 0; i < p.size(); ++i) w[i] = grid.x(i) * p[i];
        return grid.h() * pairwise_sum(w) / mass();
    }

    double variance() const {
        const double m = mean();
        std::vector<double> w(p.size());
        for (std::size_t i = 0; i < p.size(); ++i) w[i] = (grid.x(i) - m) * (grid.x(i) - m) * p[i];
        return grid.h() * pairwise_sum(w) / mass();
    }

    /// h * sum |p - q(x_i)|
    template <class Fn>
    double l1_distance(Fn&& q) const {
        std::vector<double> w(p.size());
        for (std::size_t i = 0; i < p.size(); ++i) w[i] = std::abs(p[i] - q(grid.x(i)));
        return grid.h() * pairwise_sum(w);
    }
};

/// Mollified delta: Gaussian of standard deviation 2h, renormalised on the grid.
inline DensityField delta_initial(const Grid1D& grid, double x0) {
    grid.validate();
    if (!(x0 > grid.lo && x0 < grid.hi)) throw ValidationError("x0", "must lie strictly inside the grid");
    const double s = 2.0 * grid.h();
    DensityField d{grid, std::vector<double>(grid.n), 0.0};
    for (std::size_t i = 0; i < grid.n; ++i) {
        const double z = (grid.x(i) - x0) / s;
        d.p[i] = std::exp(-0.5 * z * z);
    }
    const double m = d.mass();
    if (!(m > 0.0)) throw ValidationError("x0", "too close to the boundary for the grid");
    for (auto& v : d.p) v /= m;
    return d;
}

struct GeneratorOptions {
    // Truncation radius of the jump integral; 0 selects 4 x domain half-width.
    double truncation = 0.0;
    // State-dependent sigma with stable noise. The jump part is frozen per
    // source cell; the exact adjoint is parameterisation sensitive.
    bool experimental_multiplicative = false;
};

/// Discrete A*: tridiagonal local part plus an optional Toeplitz jump part.
struct AdjointGenerator {
    Grid1D grid;
    std::vector<double> lower, diag, upper;  // local rows; lower[0], upper[n-1] unused
    bool nonlocal = false;
    std::vector<double> kernel;        // offsets -(n-1)..(n-1), index m + n - 1
    std::vector<double> source_scale;  // per-column factor sigma(x_j)^alpha; empty when folded in
    double truncation = 0.0;
    double tail_rate = 0.0;            // nu(|y| > R), before scaling
    std::vector<std::string> notes;

    std::size_t size() const noexcept { return grid.n; }

    void apply_local(const std::vector<double>& p, std::vector<double>& out) const {
        const std::size_t n = grid.n;
        for (std::size_t i = 0; i < n; ++i) {
            double v = diag[i] * p[i];
            if (i > 0) v += lower[i] * p[i - 1];
            if (i + 1 < n) v += upper[i] * p[i + 1];
            out[i] = v;
        }
    }

    /// out += K p. Four interleaved partial sums keep the order fixed.
    void add_nonlocal(const std::vector<double>& p, std::vector<double>& out) const {
        if (!nonlocal) return;
        const std::size_t n = grid.n;
        const double* q = p.data();
        std::vector<double> scaled;
        if (!source_scale.empty()) {
            scaled.resize(n);
            for (std::size_t j = 0; j < n; ++j) scaled[j] = source_scale[j] * p[j];
            q = scaled.data();
        }
        for (std::size_t i = 0; i < n; ++i) {
            const double* w = kernel.data() + (n - 1 - i);  // w[j] = K[j - i]
            double s0 = 0, s1 = 0, s2 = 0, s3 = 0;
            std::size_t j = 0;
            for (; j + 4 <= n; j += 4) {
                s0 += w[j] * q[j];
                s1 += w[j + 1] * q[j + 1];
                s2 += w[j + 2] * q[j + 2];
                s3 += w[j + 3] * q[j + 3];
            }
            for (; j < n; ++j) s0 += w[j] * q[j];
            out[i] += (s0 + s1) + (s2 + s3);
        }
    }

    std::vector<double> apply(const std::vector<double>& p) const {
        std::vector<double> out(grid.n);
        apply_local(p, out);
        add_nonlocal(p, out);
        return out;
    }

    /// Dense matrix, for inspection and tests.
    std::vector<std::vector<double>> dense() const {
        const std::size_t n = grid.n;
        std::vector<std::vector<double>> a(n, std::vector<double>(n, 0.0));
        std::vector<double> e(n, 0.0);
        for (std::size_t j = 0; j < n; ++j) {
            e[j] = 1.0;
            auto col = apply(e);
            for (std::size_t i = 0; i < n; ++i) a[i][j] = col[i];
            e[j] = 0.0;
        }
        return a;
    }
};

namespace detail {

// int_lo^hi u^k du
inline double power_integral(double k, double lo, double hi) {
    if (k == -1.0) return std::log(hi / lo);
    return (std::pow(hi, k + 1.0) - std::pow(lo, k + 1.0)) / (k + 1.0);
}

// int_lo^hi (c0 + c1 u) u^(-1-alpha) du
inline double linear_power_segment(double c0, double c1, double alpha, double lo, double hi) {
    if (!(hi > lo)) return 0.0;
    if (lo >= 2.0) {
        auto f = [&](double u) { return (c0 + c1 * u) * std::pow(u, -1.0 - alpha); };
        return boost::math::quadrature::gauss<double, 15>::integrate(f, lo, hi);
    }
    return c0 * power_integral(-1.0 - alpha, lo, hi) + c1 * power_integral(-alpha, lo, hi);
}

// int phi_m(u) u^(-1-alpha) du over [1/2, u_max], phi_m the unit hat at m.
inline double hat_weight(std::int64_t m, double alpha, double u_max) {
    const double mm = static_cast<double>(m);
    const double lo0 = std::max(0.5, mm - 1.0), hi0 = std::min(u_max, mm);
    const double lo1 = std::max(0.5, mm), hi1 = std::min(u_max, mm + 1.0);
    double w = 0.0;
    if (m >= 1) w += linear_power_segment(-(mm - 1.0), 1.0, alpha, lo0, hi0);
    w += linear_power_segment(mm + 1.0, -1.0, alpha, lo1, hi1);
    return w;
}

// int over [1/2, min(u_max, 2)] of (u - m)(m + 1 - u) u^(-1-alpha) on the
// unit segments [m, m + 1]: the leading error of linear interpolation
// between grid nodes, per unit p''. Only the two segments next to the
// origin, where p'' is still p''(x).
inline double interpolation_moment(double alpha, double u_max) {
    double total = 0.0;
    for (double m = 0.0; m < 2.0; m += 1.0) {
        const double lo = std::max(0.5, m), hi = std::min(u_max, m + 1.0);
        if (!(hi > lo)) continue;
        total += -power_integral(1.0 - alpha, lo, hi) + (2.0 * m + 1.0) * power_integral(-alpha, lo, hi) -
                 m * (m + 1.0) * power_integral(-1.0 - alpha, lo, hi);
    }
    return total;
}

// Velocity from the compensator and the first moment of the jumps in
// [h/2, inf) and (0, h/2), per unit noise intensity. Positive beta pushes
// jumps right, so the compensating velocity points left.
inline double jump_velocity(double alpha, double beta, double a) {
    if (alpha == 1.0) {
        return -(2.0 * beta / std::numbers::pi) * (1.0 - std::numbers::egamma + std::log(1.0 / a));
    }
    return -stable_h(alpha) * beta * std::pow(a, 1.0 - alpha) / (alpha - 1.0);
}

// Face coefficients of F = af * p_left + bf * p_right. Central when the
// cell Peclet number |v| h / D is at most 2, or when v mostly compensates
// jumps going the other way (m_against: first moment of the jump stencil
// against v); the jump stencil then supplies the upstream coupling.
inline void face_flux(double v, double d_left, double d_right, double h, double m_against, double& af,
                      double& bf) {
    const double d_face = 0.5 * (d_left + d_right);
    const bool central = std::abs(v) * h <= 2.0 * d_face || m_against >= 0.5 * std::abs(v);
    if (central) {
        af = 0.5 * v + d_left / h;
        bf = 0.5 * v - d_right / h;
    } else if (v >= 0.0) {
        af = v + d_left / h;
        bf = -d_right / h;
    } else {
        af = d_left / h;
        bf = v - d_right / h;
    }
}

}  // namespace detail

inline AdjointGenerator build_adjoint_generator(const SystemSpec& system, const Grid1D& grid,
                                                const GeneratorOptions& opt = {}) {
    system.validate();
    grid.validate();
    if (system.dimension != 1) throw ValidationError("dimension", "the density solver is one-dimensional");
    if (system.noise.dimension != 1) throw ValidationError("noise_dimension", "must be 1 for the density solver");
    for (const auto& e : {system.drift[0], system.diffusion[0]})
        if (e.free_variables().count("t")) throw ValidationError("drift", "the density solver needs an autonomous system");

    const std::size_t n = grid.n;
    const double h = grid.h();
    const CompiledSystem sys(system);
    auto f = [&](double x) {
        const double s[2] = {x, 0.0};
        return sys.drift(0, s);
    };
    auto sigma = [&](double x) {
        const double s[2] = {x, 0.0};
        return sys.sigma(0, 0, s);
    };

    AdjointGenerator g;
    g.grid = grid;
    g.lower.assign(n, 0.0);
    g.diag.assign(n, 0.0);
    g.upper.assign(n, 0.0);

    const double alpha = system.noise.effective_alpha();
    double beta = system.noise.effective_beta();
    const bool stable_jumps = system.noise.family == NoiseFamily::stable && alpha < 2.0;
    const bool additive = system.additive_noise();

    std::vector<double> d_cell(n), v_face(n + 1);
    if (!stable_jumps) {
        // Brownian: D = sigma^2/2. Stable alpha = 2 is Normal(0, 2 sigma^2 dt): D = sigma^2.
        const double c = system.noise.family == NoiseFamily::brownian ? 0.5 : 1.0;
        if (system.noise.family == NoiseFamily::stable) g.notes.push_back("alpha = 2 handled by the local branch");
        for (std::size_t i = 0; i < n; ++i) d_cell[i] = c * sigma(grid.x(i)) * sigma(grid.x(i));
        for (std::size_t k = 0; k <= n; ++k) v_face[k] = f(grid.face(k));
    } else {
        if (!additive && !opt.experimental_multiplicative)
            throw ValidationError("sigma", "state-dependent stable noise needs the experimental flag");
        if (h / 2.0 >= 1.0) throw ValidationError("grid", "spacing must be below 2 for the jump integral");
        double s0 = sigma(0.0);
        if (additive && s0 < 0.0) {
            // sigma L with sigma < 0 is |sigma| L with beta reflected.
            s0 = -s0;
            beta = -beta;
        }
        auto intensity = [&](double x) {
            const double s = additive ? s0 : sigma(x);
            if (!additive && !(s > 0.0)) throw ValidationError("sigma", "must stay positive for experimental stable noise");
            return s;
        };
        const double a = 0.5 * h;
        const double r = opt.truncation > 0.0 ? opt.truncation : 2.0 * grid.width();
        if (!(r > a)) throw ValidationError("truncation", "must exceed h/2");
        // jumps below h/2 act as diffusion; the interpolated stencil over-diffuses
        // by the interpolation moment, which is taken back here
        const double m2 = stable_h(alpha) * std::pow(a, 2.0 - alpha) / (2.0 - alpha);
        const double d_interp = 0.5 * stable_h(alpha) * std::pow(h, 2.0 - alpha) * detail::interpolation_moment(alpha, r / h);
        // heavy small-jump tails (alpha well below 1) can push this past zero
        const double d_unit = std::max(0.0, 0.5 * m2 - d_interp);
        const double vj = detail::jump_velocity(alpha, beta, a);
        for (std::size_t i = 0; i < n; ++i) d_cell[i] = std::pow(intensity(grid.x(i)), alpha) * d_unit;
        for (std::size_t k = 0; k <= n; ++k) {
            const double x = grid.face(k), s = intensity(x);
            double v = f(x) + std::pow(s, alpha) * vj;
            if (alpha == 1.0) v += -(2.0 / std::numbers::pi) * beta * s * std::log(s);
            v_face[k] = v;
        }

        g.nonlocal = true;
        g.truncation = r;
        g.tail_rate = jump_tail_mass(r, alpha, beta);
        const auto w = jump_weights(alpha, beta);
        const double scale_h = std::pow(h, -alpha);
        const double u_max = r / h;
        g.kernel.assign(2 * n - 1, 0.0);
        for (std::size_t m = 1; m < n; ++m) {
            const double im = detail::hat_weight(static_cast<std::int64_t>(m), alpha, u_max) * scale_h;
            // source at x + mh feeds x through a jump of -mh: reflected weights
            g.kernel[n - 1 + m] = w.negative * im;
            g.kernel[n - 1 - m] = w.positive * im;
        }
        g.kernel[n - 1] = (w.positive + w.negative) * detail::hat_weight(0, alpha, u_max) * scale_h -
                          jump_tail_mass(a, alpha, beta);
        if (additive) {
            const double sa = std::pow(s0, alpha);
            for (auto& k : g.kernel) k *= sa;
        } else {
            g.source_scale.resize(n);
            for (std::size_t j = 0; j < n; ++j) g.source_scale[j] = std::pow(intensity(grid.x(j)), alpha);
            g.notes.push_back("experimental: state-dependent stable intensity frozen per source cell");
        }
    }

    double moment_right = 0.0, moment_left = 0.0;
    if (g.nonlocal) {
        for (std::size_t m = 1; m < n; ++m) {
            moment_right += g.kernel[n - 1 + m] * static_cast<double>(m) * h;
            moment_left += g.kernel[n - 1 - m] * static_cast<double>(m) * h;
        }
    }
    std::vector<double> af(n + 1), bf(n + 1);
    for (std::size_t k = 0; k <= n; ++k) {
        const double dl = k > 0 ? d_cell[k - 1] : d_cell[0];
        const double dr = k < n ? d_cell[k] : d_cell[n - 1];
        double m_against = 0.0;
        if (g.nonlocal) {
            // v > 0 is compensated by jumps to the left, i.e. sources on the right
            m_against = v_face[k] >= 0.0 ? moment_right : moment_left;
            if (!g.source_scale.empty()) m_against *= g.source_scale[std::min(k, n - 1)];
        }
        detail::face_flux(v_face[k], dl, dr, h, m_against, af[k], bf[k]);
    }
    // Absorbing ends: ghost cells carry p = 0, so af[0] and bf[n] never act.
    for (std::size_t i = 0; i < n; ++i) {
        g.lower[i] = af[i] / h;
        g.diag[i] = (bf[i] - af[i + 1]) / h;
        g.upper[i] = -bf[i + 1] / h;
    }
    return g;
}

struct EvolveOptions {
    std::size_t output_every = 1;
    // Backward-Euler steps before switching to Crank-Nicolson (at least 1).
    std::size_t startup_steps = 4;
    bool normalize_at_end = true;
};

struct EvolveReport {
    std::size_t steps = 0;
    std::vector<double> mass;          // after every step, index 0 = initial
    double max_drift_per_1000 = 0.0;   // max |mass(k + 1000) - mass(k)|
    double boundary_loss = 0.0;        // mass lost through the ends and the far tail
    double clipped_mass = 0.0;         // mass added by clipping negatives
    std::size_t clip_events = 0;
    std::size_t positivity_violations = 0;  // steps with min p < -1e-10 max p
    double min_ratio = 0.0;            // most negative min p / max p seen
    double final_normalization = 1.0;  // factor applied once at the end
    std::vector<std::string> log;
};

struct DensityEvolution {
    std::vector<DensityField> frames;
    EvolveReport report;
};

namespace detail {

// Thomas factorisation of (I - c L) for a tridiagonal L.
struct TridiagonalSolver {
    std::vector<double> a, cp, inv;  // sub-diagonal, modified super-diagonal, 1 / pivot

    TridiagonalSolver(const AdjointGenerator& g, double c) {
        const std::size_t n = g.size();
        a.resize(n);
        cp.resize(n);
        inv.resize(n);
        for (std::size_t i = 0; i < n; ++i) a[i] = -c * g.lower[i];
        double prev_cp = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            const double b = 1.0 - c * g.diag[i];
            const double piv = b - (i > 0 ? a[i] * prev_cp : 0.0);
            if (piv == 0.0) throw NumericalError("singular implicit step");
            inv[i] = 1.0 / piv;
            cp[i] = (i + 1 < n ? -c * g.upper[i] : 0.0) * inv[i];
            prev_cp = cp[i];
        }
    }

    void solve(std::vector<double>& d) const {
        const std::size_t n = d.size();
        d[0] *= inv[0];
        for (std::size_t i = 1; i < n; ++i) d[i] = (d[i] - a[i] * d[i - 1]) * inv[i];
        for (std::size_t i = n - 1; i-- > 0;) d[i] -= cp[i] * d[i + 1];
    }
};

}  // namespace detail

/// IMEX time march: Crank-Nicolson on the local part with two-step
/// Adams-Bashforth on the jump part. The first few steps are backward Euler
/// with forward Euler jumps.
inline DensityEvolution evolve_density(const AdjointGenerator& gen, const DensityField& p0, double horizon,
                                       double dt, const EvolveOptions& opt = {}) {
    if (!(p0.grid == gen.grid)) throw ValidationError("grid", "initial density lives on a different grid");
    const std::int64_t steps = step_count(horizon, dt);
    const std::size_t n = gen.size();
    const double h = gen.grid.h();
    const std::size_t every = std::max<std::size_t>(1, opt.output_every);

    const detail::TridiagonalSolver be(gen, dt), cn(gen, 0.5 * dt);

    DensityEvolution out;
    auto& rep = out.report;
    std::vector<double> p = p0.p, lp(n), rhs(n);
    const double t0 = p0.t;
    out.frames.push_back({gen.grid, p, t0});
    rep.mass.push_back(h * pairwise_sum(p));

    std::vector<double> kp(n, 0.0), kp_prev(n, 0.0);
    for (std::int64_t k = 0; k < steps; ++k) {
        const bool startup = static_cast<std::size_t>(k) < std::max<std::size_t>(1, opt.startup_steps);
        kp_prev.swap(kp);
        std::fill(kp.begin(), kp.end(), 0.0);
        gen.add_nonlocal(p, kp);
        if (startup) {
            for (std::size_t i = 0; i < n; ++i) rhs[i] = p[i] + dt * kp[i];
            be.solve(rhs);
        } else {
            gen.apply_local(p, lp);
            for (std::size_t i = 0; i < n; ++i)
                rhs[i] = p[i] + 0.5 * dt * lp[i] + dt * (1.5 * kp[i] - 0.5 * kp_prev[i]);
            cn.solve(rhs);
        }
        p.swap(rhs);

        double pmax = 0.0, pmin = 0.0, neg = 0.0;
        for (double v : p) {
            if (!std::isfinite(v)) throw NumericalError("non-finite density at step " + std::to_string(k + 1));
            pmax = std::max(pmax, v);
            pmin = std::min(pmin, v);
            if (v < 0.0) neg -= v;
        }
        const double mass_raw = h * pairwise_sum(p);
        if (h * neg > 0.01 * std::abs(mass_raw))
            throw NumericalError("negative mass above 1% at step " + std::to_string(k + 1) + "; reduce dt");
        if (pmax > 0.0) rep.min_ratio = std::min(rep.min_ratio, pmin / pmax);
        if (pmin < -1e-10 * pmax) ++rep.positivity_violations;
        if (neg > 0.0) {
            for (auto& v : p) v = std::max(v, 0.0);
            rep.clipped_mass += h * neg;
            ++rep.clip_events;
        }
        const double m = h * pairwise_sum(p);
        rep.boundary_loss += rep.mass.back() - mass_raw;
        rep.mass.push_back(m);
        if ((k + 1) % static_cast<std::int64_t>(every) == 0 || k + 1 == steps)
            out.frames.push_back({gen.grid, p, t0 + static_cast<double>(k + 1) * dt});
    }
    rep.steps = static_cast<std::size_t>(steps);

    const std::size_t window = 1000;
    if (rep.mass.size() > window) {
        for (std::size_t k = 0; k + window < rep.mass.size(); ++k)
            rep.max_drift_per_1000 = std::max(rep.max_drift_per_1000, std::abs(rep.mass[k + window] - rep.mass[k]));
    } else {
        rep.max_drift_per_1000 = std::abs(rep.mass.back() - rep.mass.front());
    }
    if (rep.clip_events)
        rep.log.push_back("clipped negative values on " + std::to_string(rep.clip_events) + " steps, mass " +
                          io::format_double(rep.clipped_mass));

    if (opt.normalize_at_end) {
        auto& last = out.frames.back();
        const double m = last.mass();
        if (m > 0.0) {
            rep.final_normalization = 1.0 / m;
            for (auto& v : last.p) v /= m;
            rep.log.push_back("end-of-run normalisation by " + io::format_double(1.0 / m));
        }
    }
    return out;
}

/// Columns t, x, p.
inline void write_density_csv(std::ostream& os, const std::vector<DensityField>& frames) {
    io::CsvWriter csv(os, {"t", "x", "p"});
    for (const auto& f : frames)
        for (std::size_t i = 0; i < f.p.size(); ++i) {
            csv.cell(f.t).cell(f.grid.x(i)).cell(f.p[i]);
            csv.end_row();
        }
}

}  // namespace stodyn
