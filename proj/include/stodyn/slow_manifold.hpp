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

// Random slow manifolds of
//
//   dx = (A x + f(x, y)) dt
//   dy = (1/eps) (B y + g(x, y)) dt + (sigma / sqrt(eps)) dW
//
// Fast variables are split as y = Y + sigma * eta, where eta is the
// stationary fast Ornstein-Uhlenbeck process driven by the same W. Graphs
// are stored in Y coordinates; the eta offset is added back on use.

#pragma once

#include <Eigen/Dense>
#include <unsupported/Eigen/MatrixFunctions>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "stodyn/error.hpp"
#include "stodyn/expr.hpp"
#include "stodyn/io.hpp"
#include "stodyn/noise.hpp"
#include "stodyn/parallel.hpp"
#include "stodyn/sde.hpp"

namespace stodyn {

struct SlowFastSpec {
    std::size_t n = 1;  // slow
    std::size_t m = 1;  // fast
    Eigen::MatrixXd A;
    Eigen::MatrixXd B;
    std::vector<expr::Expr> f;  // n entries over x1..xn, y1..ym
    std::vector<expr::Expr> g;  // m entries
    double eps = 0.01;
    double sigma = 0.0;
    expr::Bindings parameters;
    std::optional<double> lipschitz_f;
    std::optional<double> lipschitz_g;

    std::vector<std::string> slot_names() const {
        std::vector<std::string> s;
        for (std::size_t i = 0; i < n; ++i) s.push_back("x" + std::to_string(i + 1));
        for (std::size_t j = 0; j < m; ++j) s.push_back("y" + std::to_string(j + 1));
        return s;
    }

    double max_real_eigenvalue() const {
        Eigen::EigenSolver<Eigen::MatrixXd> es(B, false);
        return es.eigenvalues().real().maxCoeff();
    }

    void validate() const {
        if (n == 0 || m == 0) throw ValidationError("dimension", "slow and fast dimensions must be positive");
        if (A.rows() != static_cast<Eigen::Index>(n) || A.cols() != static_cast<Eigen::Index>(n))
            throw ValidationError("A", "expected " + std::to_string(n) + "x" + std::to_string(n));
        if (B.rows() != static_cast<Eigen::Index>(m) || B.cols() != static_cast<Eigen::Index>(m))
            throw ValidationError("B", "expected " + std::to_string(m) + "x" + std::to_string(m));
        if (!A.allFinite() || !B.allFinite()) throw ValidationError("A", "entries must be finite");
        if (f.size() != n) throw ValidationError("f", "expected " + std::to_string(n) + " expressions");
        if (g.size() != m) throw ValidationError("g", "expected " + std::to_string(m) + " expressions");
        if (!(eps > 0.0) || !std::isfinite(eps)) throw ValidationError("eps", "must be positive");
        if (!(sigma >= 0.0) || !std::isfinite(sigma)) throw ValidationError("sigma", "must be non-negative");
        const auto slots = slot_names();
        auto check = [&](const expr::Expr& e, const char* field) {
            for (const auto& v : e.free_variables()) {
                if (std::find(slots.begin(), slots.end(), v) != slots.end() || parameters.count(v)) continue;
                throw ValidationError(field, "unbound identifier '" + v + "' in '" + e.source() + "'");
            }
        };
        for (const auto& e : f) check(e, "f");
        for (const auto& e : g) check(e, "g");
        const double lam = max_real_eigenvalue();
        if (!(lam < 0.0))
            throw ValidationError("B", "eigenvalue with real part " + io::format_double(lam) +
                                           " >= 0; the fast part has no exponential dichotomy");
    }
};

/// f and g compiled over the slot layout x1..xn, y1..ym.
class CompiledSlowFast {
public:
    explicit CompiledSlowFast(const SlowFastSpec& s) : n_(s.n), m_(s.m) {
        const auto slots = s.slot_names();
        for (const auto& e : s.f) f_.emplace_back(e, slots, s.parameters);
        for (const auto& e : s.g) g_.emplace_back(e, slots, s.parameters);
    }

    void f(const double* x, const double* y, double* out) const { eval(f_, x, y, out); }
    void g(const double* x, const double* y, double* out) const { eval(g_, x, y, out); }

private:
    void eval(const std::vector<expr::Program>& p, const double* x, const double* y, double* out) const {
        std::array<double, 32> slots{};
        if (n_ + m_ > slots.size()) throw ValidationError("dimension", "at most 32 slow plus fast variables");
        std::copy(x, x + n_, slots.begin());
        std::copy(y, y + m_, slots.begin() + static_cast<std::ptrdiff_t>(n_));
        for (std::size_t i = 0; i < p.size(); ++i) out[i] = p[i](std::span<const double>(slots.data(), n_ + m_));
    }

    std::size_t n_, m_;
    std::vector<expr::Program> f_, g_;
};

/// Tensor grid over the slow variables; last coordinate varies fastest.
struct SlowGrid {
    std::vector<double> lo, hi;
    std::vector<std::size_t> count;

    SlowGrid() = default;
    SlowGrid(double a, double b, std::size_t k) : lo{a}, hi{b}, count{k} { validate(); }
    SlowGrid(std::vector<double> a, std::vector<double> b, std::vector<std::size_t> k)
        : lo(std::move(a)), hi(std::move(b)), count(std::move(k)) {
        validate();
    }

    std::size_t dimension() const noexcept { return lo.size(); }
    std::size_t size() const {
        std::size_t s = 1;
        for (auto c : count) s *= c;
        return s;
    }
    double step(std::size_t d) const { return (hi[d] - lo[d]) / static_cast<double>(count[d] - 1); }
    double coordinate(std::size_t d, std::size_t i) const {
        return i + 1 == count[d] ? hi[d] : lo[d] + static_cast<double>(i) * step(d);
    }

    void point(std::size_t k, double* out) const {
        for (std::size_t d = dimension(); d-- > 0;) {
            out[d] = coordinate(d, k % count[d]);
            k /= count[d];
        }
    }

    bool contains(std::span<const double> x, double slack = 1e-12) const {
        for (std::size_t d = 0; d < dimension(); ++d) {
            const double s = slack * std::max(1.0, hi[d] - lo[d]);
            if (!(x[d] >= lo[d] - s && x[d] <= hi[d] + s)) return false;
        }
        return true;
    }

    /// Multilinear interpolation of `values` (m per node). Outside the box
    /// the boundary cell is extended linearly, or held constant with `clamp`.
    void interpolate(std::span<const double> values, std::size_t m, const double* x, double* out,
                     bool clamp = false) const {
        const std::size_t nd = dimension();
        std::array<std::size_t, 8> base{};
        std::array<double, 8> w{};
        for (std::size_t d = 0; d < nd; ++d) {
            const double h = step(d);
            const double u = (clamp ? std::clamp(x[d], lo[d], hi[d]) - lo[d] : x[d] - lo[d]) / h;
            const double c = std::clamp(std::floor(u), 0.0, static_cast<double>(count[d] - 2));
            base[d] = static_cast<std::size_t>(c);
            w[d] = u - c;
        }
        std::fill(out, out + m, 0.0);
        for (std::size_t corner = 0; corner < (std::size_t{1} << nd); ++corner) {
            double weight = 1.0;
            std::size_t idx = 0;
            for (std::size_t d = 0; d < nd; ++d) {
                const bool up = (corner >> (nd - 1 - d)) & 1U;
                weight *= up ? w[d] : 1.0 - w[d];
                idx = idx * count[d] + base[d] + (up ? 1 : 0);
            }
            if (weight == 0.0) continue;
            for (std::size_t c = 0; c < m; ++c) out[c] += weight * values[idx * m + c];
        }
    }

    void validate() const {
        if (lo.empty() || lo.size() != hi.size() || lo.size() != count.size())
            throw ValidationError("xi_grid", "lo, hi and count must have the slow dimension");
        if (lo.size() > 3) throw ValidationError("xi_grid", "graphs over more than 3 slow variables are not supported");
        for (std::size_t d = 0; d < lo.size(); ++d) {
            if (!(hi[d] > lo[d])) throw ValidationError("xi_grid", "hi must exceed lo");
            if (count[d] < 2) throw ValidationError("xi_grid", "need at least 2 points per dimension");
        }
    }
};

struct ManifoldGraph {
    SlowGrid grid;
    std::size_t m = 1;
    std::vector<double> values;    // grid.size() * m, Y coordinates
    std::vector<double> residual;  // per grid point, last update
    double eps = 0.0;
    std::string method;
    std::uint64_t seed = 0;
    std::uint64_t stream = 0;
    std::size_t iterations = 0;
    double final_residual = 0.0;
    double tolerance = 0.0;
    bool converged = true;
    std::vector<double> residual_history;
    double window = 0.0;
    std::size_t time_slices = 1;
    std::vector<std::string> warnings;

    std::span<const double> at(std::size_t k) const { return {values.data() + k * m, m}; }
    void eval(const double* xi, double* out) const { grid.interpolate(values, m, xi, out); }
};

// --------------------------------------------------------------------------
// Fast Ornstein-Uhlenbeck process

/// Exponential-Euler propagators for eps dY = B Y dt + ...: E = exp(B dt/eps),
/// Phi = (1/eps) int_0^dt exp(B u/eps) du, and the midpoint noise factor
/// exp(B dt/(2 eps)) / sqrt(eps).
struct FastPropagator {
    Eigen::MatrixXd E, Phi, noise;

    FastPropagator(const Eigen::MatrixXd& B, double eps, double dt) {
        const Eigen::MatrixXd M = B / eps;
        E = (M * dt).exp();
        const Eigen::MatrixXd I = Eigen::MatrixXd::Identity(B.rows(), B.cols());
        Phi = B.fullPivLu().solve(E - I);
        noise = (M * (0.5 * dt)).exp() / std::sqrt(eps);
    }
};

/// eta at nodes t_k = k dt for k in [first, first + count).
struct EtaPath {
    double dt = 0.0;
    std::int64_t first = 0;
    std::size_t m = 1;
    std::vector<double> values;

    std::int64_t end() const { return first + static_cast<std::int64_t>(values.size() / m); }
    bool covers(std::int64_t k) const { return k >= first && k < end(); }
    const double* node(std::int64_t k) const {
        if (!covers(k)) throw ValidationError("eta", "node " + std::to_string(k) + " outside the eta window");
        return values.data() + static_cast<std::size_t>(k - first) * m;
    }
    double at(std::int64_t k, std::size_t c = 0) const { return node(k)[c]; }
};

inline double default_burn_in(const Eigen::MatrixXd& B, double eps) {
    Eigen::EigenSolver<Eigen::MatrixXd> es(B, false);
    const double lam = es.eigenvalues().real().maxCoeff();
    if (!(lam < 0.0)) throw ValidationError("B", "fast matrix is not stable");
    return eps * std::log(1e8) / -lam;
}

/// Stationary fast process on nodes covering [t_min, t_max], started from
/// zero a burn-in time earlier along the same increments.
inline EtaPath stationary_eta(double eps, const Eigen::MatrixXd& B, const NoisePath& path, double t_min,
                              double t_max, std::optional<double> burn_in = {}) {
    if (!(eps > 0.0)) throw ValidationError("eps", "must be positive");
    if (path.dimension() != static_cast<std::size_t>(B.rows()))
        throw ValidationError("noise_path", "dimension must equal the fast dimension");
    if (path.spec().family != NoiseFamily::brownian)
        throw ValidationError("noise", "the fast equation is Brownian-driven");
    const double dt = path.dt();
    const double tb = burn_in ? *burn_in : default_burn_in(B, eps);
    const auto k0 = static_cast<std::int64_t>(std::floor(t_min / dt + 1e-9));
    const auto k1 = static_cast<std::int64_t>(std::ceil(t_max / dt - 1e-9));
    const auto kb = static_cast<std::int64_t>(std::ceil(tb / dt - 1e-9));
    if (!path.covers(k0 - kb) || !path.covers(std::max(k0 - kb, k1 - 1)))
        throw ValidationError("burn_in", "burn-in window exceeds path coverage");
    const std::size_t m = path.dimension();
    FastPropagator P(B, eps, dt);
    Eigen::VectorXd eta = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(m));
    EtaPath out{dt, k0, m, {}};
    out.values.reserve(static_cast<std::size_t>(k1 - k0 + 1) * m);
    for (std::int64_t k = k0 - kb;; ++k) {
        if (k >= k0)
            for (std::size_t c = 0; c < m; ++c) out.values.push_back(eta[static_cast<Eigen::Index>(c)]);
        if (k == k1) break;
        const Eigen::Map<const Eigen::VectorXd> dw(path.step(k), static_cast<Eigen::Index>(m));
        eta = P.E * eta + P.noise * dw;
    }
    return out;
}

// --------------------------------------------------------------------------
// Gap check

struct LipschitzBox {
    std::vector<double> lo, hi;  // n + m entries, x then y
};

namespace detail {

inline double probe_lipschitz(const SlowFastSpec& s, bool use_g, const LipschitzBox& box) {
    const std::size_t d = s.n + s.m;
    if (box.lo.size() != d || box.hi.size() != d) throw ValidationError("box", "expected n + m bounds");
    CompiledSlowFast c(s);
    const std::size_t per = d <= 4 ? 5 : 3;
    std::size_t total = 1;
    for (std::size_t i = 0; i < d; ++i) total *= per;
    const std::size_t rows = use_g ? s.m : s.n;
    const auto fn = use_g ? &CompiledSlowFast::g : &CompiledSlowFast::f;
    std::vector<double> z(d), zp(d), fp(rows), fm(rows);
    double best = 0.0;
    for (std::size_t k = 0; k < total; ++k) {
        std::size_t r = k;
        for (std::size_t i = d; i-- > 0;) {
            z[i] = box.lo[i] + (box.hi[i] - box.lo[i]) * static_cast<double>(r % per) / static_cast<double>(per - 1);
            r /= per;
        }
        std::vector<double> rowsum(rows, 0.0);
        for (std::size_t j = 0; j < d; ++j) {
            const double h = 1e-6 * std::max(1.0, std::abs(z[j]));
            zp = z;
            zp[j] = z[j] + h;
            (c.*fn)(zp.data(), zp.data() + s.n, fp.data());
            zp[j] = z[j] - h;
            (c.*fn)(zp.data(), zp.data() + s.n, fm.data());
            for (std::size_t i = 0; i < rows; ++i) rowsum[i] += std::abs(fp[i] - fm[i]) / (2.0 * h);
        }
        for (double v : rowsum) {
            if (!std::isfinite(v)) throw ValidationError(use_g ? "g" : "f", "Lipschitz probe is not finite on the box");
            best = std::max(best, v);
        }
    }
    return best;
}

}  // namespace detail

inline double probe_lipschitz_f(const SlowFastSpec& s, const LipschitzBox& box) {
    return detail::probe_lipschitz(s, false, box);
}
inline double probe_lipschitz_g(const SlowFastSpec& s, const LipschitzBox& box) {
    return detail::probe_lipschitz(s, true, box);
}

enum class GapStatus { pass, warn, fail };

inline const char* to_string(GapStatus s) {
    switch (s) {
        case GapStatus::pass: return "pass";
        case GapStatus::warn: return "warn";
        case GapStatus::fail: return "fail";
    }
    return "?";
}

struct GapReport {
    GapStatus status = GapStatus::pass;
    double max_real_eigenvalue = 0.0;
    double lipschitz_g = 0.0;
    double ratio = 0.0;
    std::string message;
};

/// Advisory only; never throws for a bad B. L_g comes from the spec or is
/// probed on `box`.
inline GapReport validate_gap(const SlowFastSpec& s, const std::optional<LipschitzBox>& box = {}) {
    GapReport r;
    Eigen::EigenSolver<Eigen::MatrixXd> es(s.B, false);
    r.max_real_eigenvalue = es.eigenvalues().real().maxCoeff();
    if (!(r.max_real_eigenvalue < 0.0)) {
        r.status = GapStatus::fail;
        r.message = "B has an eigenvalue with real part " + io::format_double(r.max_real_eigenvalue) +
                    "; exponential dichotomy violated";
        return r;
    }
    if (s.lipschitz_g) r.lipschitz_g = *s.lipschitz_g;
    else if (box) r.lipschitz_g = probe_lipschitz_g(s, *box);
    else {
        LipschitzBox unit{std::vector<double>(s.n + s.m, -1.0), std::vector<double>(s.n + s.m, 1.0)};
        r.lipschitz_g = probe_lipschitz_g(s, unit);
    }
    r.ratio = s.eps * r.lipschitz_g / -r.max_real_eigenvalue;
    if (r.ratio > 0.5) {
        r.status = GapStatus::warn;
        r.message = "eps * L_g / |Re lambda_max| = " + io::format_double(r.ratio) +
                    " > 0.5; the fixed-point iteration may not contract";
    }
    return r;
}

// --------------------------------------------------------------------------
// Lyapunov-Perron fixed point

struct LyapunovPerronOptions {
    double tolerance = 1e-10;
    std::size_t max_iterations = 100;
    double ds = 0.0;            // quadrature step; 0 = largest multiple of path dt <= eps / 20
    double window = 0.0;        // 0 = kernel norm below 1e-8
    std::size_t time_slices = 0;  // graphs kept at earlier times; 0 = auto (1 if sigma = 0)
    bool override_gap = false;
    std::optional<LipschitzBox> box;
};

namespace detail {

// Product-trapezoid weights for (1/eps) int_0^inf exp(B u/eps) G(u) du
// with G piecewise linear on nodes u_q = q d and constant beyond u_Q.
struct KernelWeights {
    std::vector<Eigen::MatrixXd> wa, wb;  // weight of G_q and G_{q+1} on interval q
    Eigen::MatrixXd tail;                 // weight of G_Q
    std::size_t Q = 0;
};

inline KernelWeights kernel_weights(const Eigen::MatrixXd& B, double eps, double d, double window) {
    const Eigen::Index m = B.rows();
    const Eigen::MatrixXd I = Eigen::MatrixXd::Identity(m, m);
    const Eigen::MatrixXd M = B / eps;
    const Eigen::MatrixXd E = (M * d).exp();
    auto lu = M.fullPivLu();
    const Eigen::MatrixXd phi0 = lu.solve(E - I);
    const Eigen::MatrixXd phi1 = lu.solve(d * E - phi0);
    const Eigen::MatrixXd pb = phi1 / d;
    const Eigen::MatrixXd pa = phi0 - pb;
    KernelWeights k;
    Eigen::MatrixXd power = I;
    const std::size_t qmax = window > 0.0 ? static_cast<std::size_t>(std::ceil(window / d - 1e-9))
                                          : std::numeric_limits<std::size_t>::max();
    for (std::size_t q = 0;; ++q) {
        if (window > 0.0 ? q == qmax : power.norm() < 1e-8) {
            k.Q = q;
            break;
        }
        if (q > 5'000'000 || !power.allFinite())
            throw NumericalError("Lyapunov-Perron kernel does not decay; check B");
        k.wa.push_back(power * pa / eps);
        k.wb.push_back(power * pb / eps);
        power = power * E;
    }
    k.tail = -B.fullPivLu().solve(power);
    return k;
}

inline std::int64_t stride_for(double dt, double wanted) {
    return std::max<std::int64_t>(1, static_cast<std::int64_t>(std::floor(wanted / dt + 1e-9)));
}

}  // namespace detail

namespace detail {

struct LpLayout {
    double ds = 0.0;
    std::int64_t stride = 1;  // ds / path dt
    std::size_t Q = 0;        // quadrature intervals in the window
    std::int64_t tau = 1;     // slice spacing in ds units
    std::size_t slices = 1;
};

inline LpLayout lp_layout(const SlowFastSpec& s, double path_dt, const LyapunovPerronOptions& opt) {
    LpLayout L;
    const double wanted = opt.ds > 0.0 ? opt.ds : s.eps / 20.0;
    const double dt = path_dt > 0.0 ? path_dt : wanted;
    L.stride = stride_for(dt, wanted);
    if (opt.ds > 0.0 && std::abs(static_cast<double>(L.stride) * dt - opt.ds) > 1e-9 * opt.ds)
        throw ValidationError("ds", "must be a multiple of the noise path step");
    L.ds = static_cast<double>(L.stride) * dt;
    L.Q = kernel_weights(s.B, s.eps, L.ds, opt.window).Q;
    L.tau = std::max<std::int64_t>(1, static_cast<std::int64_t>(L.Q / 8));
    L.slices = s.sigma > 0.0 ? (opt.time_slices ? opt.time_slices : 25) : 1;
    return L;
}

}  // namespace detail

/// Noise-path steps before t = 0 that lyapunov_perron_solve reads,
/// burn-in included.
inline std::int64_t lyapunov_perron_history(const SlowFastSpec& s, double path_dt,
                                            const LyapunovPerronOptions& opt = {}) {
    s.validate();
    const auto L = detail::lp_layout(s, path_dt, opt);
    const std::int64_t span = (static_cast<std::int64_t>(L.slices) - 1) * L.tau + static_cast<std::int64_t>(L.Q);
    const auto kb = static_cast<std::int64_t>(std::ceil(default_burn_in(s.B, s.eps) / path_dt - 1e-9));
    return span * L.stride + kb + 1;
}

/// Fixed point of the Lyapunov-Perron map on `grid`. For sigma > 0 the
/// graph is resolved on time slices t_j = -j tau so backward orbits see
/// the graph of the matching shifted realisation; slices past the last
/// are clamped. Backward orbits that leave the box see the graph held at
/// its boundary value. Result is the t = 0 slice.
inline ManifoldGraph lyapunov_perron_solve(const SlowFastSpec& s, const SlowGrid& grid, const NoisePath& path,
                                           const LyapunovPerronOptions& opt = {}) {
    s.validate();
    grid.validate();
    if (grid.dimension() != s.n) throw ValidationError("xi_grid", "dimension must equal the slow dimension");
    if (!(opt.tolerance > 0.0)) throw ValidationError("tolerance", "must be positive");

    ManifoldGraph out;
    LipschitzBox box;
    if (opt.box) box = *opt.box;
    else {
        box.lo = grid.lo;
        box.hi = grid.hi;
        for (std::size_t j = 0; j < s.m; ++j) {
            box.lo.push_back(-1.0);
            box.hi.push_back(1.0);
        }
    }
    const auto gap = validate_gap(s, box);
    if (gap.status == GapStatus::warn) {
        if (!opt.override_gap) throw ValidationError("gap", gap.message);
        out.warnings.push_back(gap.message);
    }

    const bool noisy = s.sigma > 0.0;
    if (noisy && !(path.dt() > 0.0)) throw ValidationError("noise_path", "required when sigma > 0");
    if (path.dt() > 0.0 && path.dimension() != s.m) throw ValidationError("noise_path", "dimension must equal m");
    const auto L = detail::lp_layout(s, path.dt(), opt);
    const double ds = L.ds;
    const std::int64_t stride = L.stride, tau = L.tau;
    const auto kw = detail::kernel_weights(s.B, s.eps, ds, opt.window);
    const std::size_t Q = kw.Q, J = L.slices;

    // eta on the coarse nodes -(J-1) tau - Q .. 0
    const std::int64_t span = static_cast<std::int64_t>(J - 1) * tau + static_cast<std::int64_t>(Q);
    EtaPath eta;
    if (noisy) eta = stationary_eta(s.eps, s.B, path, -static_cast<double>(span * stride) * path.dt(), 0.0);
    auto eta_at = [&](std::int64_t node, std::size_t c) -> double {
        return noisy ? eta.at(node * stride, c) : 0.0;
    };

    const std::size_t K = grid.size(), n = s.n, m = s.m;
    std::vector<double> table(J * K * m, 0.0), next(table.size());
    CompiledSlowFast sys(s);

    // graph in Y coordinates at coarse node `node` (<= 0) and position x
    auto graph_at = [&](const std::vector<double>& tab, std::int64_t node, const double* x, double* out) {
        const double jf = std::min(static_cast<double>(-node) / static_cast<double>(tau), static_cast<double>(J - 1));
        const auto j0 = static_cast<std::size_t>(std::floor(jf));
        const std::size_t j1 = std::min(j0 + 1, J - 1);
        const double w = jf - static_cast<double>(j0);
        grid.interpolate(std::span<const double>(tab.data() + j0 * K * m, K * m), m, x, out, true);
        if (w > 0.0 && j1 != j0) {
            std::array<double, 32> tmp{};
            grid.interpolate(std::span<const double>(tab.data() + j1 * K * m, K * m), m, x, tmp.data(), true);
            for (std::size_t c = 0; c < m; ++c) out[c] = (1.0 - w) * out[c] + w * tmp[c];
        }
    };

    std::vector<std::size_t> exits(J * K, 0);
    out.grid = grid;
    out.m = m;
    out.eps = s.eps;
    out.method = "lyapunov-perron";
    out.seed = path.seed();
    out.stream = path.stream();
    out.tolerance = opt.tolerance;
    out.window = static_cast<double>(Q) * ds;
    out.time_slices = J;
    out.residual.assign(K, 0.0);
    out.converged = false;

    for (std::size_t it = 0; it < opt.max_iterations; ++it) {
        parallel_for(J * K, [&](std::size_t task) {
            const std::size_t j = task / K, k = task % K;
            const std::int64_t start = -static_cast<std::int64_t>(j) * tau;
            std::array<double, 32> x{}, xs{}, y{}, fx{}, fs{}, gv{};
            grid.point(k, x.data());
            auto rhs = [&](const double* pos, std::int64_t node, double* dx) {
                graph_at(table, node, pos, y.data());
                for (std::size_t c = 0; c < m; ++c) y[c] += s.sigma * eta_at(node, c);
                sys.f(pos, y.data(), dx);
                for (std::size_t r = 0; r < n; ++r) {
                    double a = 0.0;
                    for (std::size_t c = 0; c < n; ++c)
                        a += s.A(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)) * pos[c];
                    dx[r] += a;
                }
            };
            auto g_at = [&](const double* pos, std::int64_t node, Eigen::VectorXd& into) {
                graph_at(table, node, pos, y.data());
                for (std::size_t c = 0; c < m; ++c) y[c] += s.sigma * eta_at(node, c);
                sys.g(pos, y.data(), gv.data());
                for (std::size_t c = 0; c < m; ++c) into[static_cast<Eigen::Index>(c)] = gv[c];
            };
            Eigen::VectorXd acc = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(m));
            Eigen::VectorXd g0(static_cast<Eigen::Index>(m)), g1(static_cast<Eigen::Index>(m));
            g_at(x.data(), start, g0);
            std::size_t left = 0;
            for (std::size_t q = 0; q < Q; ++q) {
                const std::int64_t node = start - static_cast<std::int64_t>(q);
                // Heun, backwards in time
                rhs(x.data(), node, fx.data());
                for (std::size_t r = 0; r < n; ++r) xs[r] = x[r] - ds * fx[r];
                rhs(xs.data(), node - 1, fs.data());
                for (std::size_t r = 0; r < n; ++r) x[r] -= 0.5 * ds * (fx[r] + fs[r]);
                if (!grid.contains(std::span<const double>(x.data(), n))) ++left;
                g_at(x.data(), node - 1, g1);
                acc += kw.wa[q] * g0 + kw.wb[q] * g1;
                g0 = g1;
            }
            acc += kw.tail * g0;
            for (std::size_t c = 0; c < m; ++c) next[(j * K + k) * m + c] = acc[static_cast<Eigen::Index>(c)];
            exits[task] = left;
        });
        double res = 0.0;
        for (std::size_t i = 0; i < table.size(); ++i) {
            const double d = std::abs(next[i] - table[i]);
            if (!std::isfinite(next[i])) throw NumericalError("Lyapunov-Perron iterate is not finite");
            res = std::max(res, d);
        }
        for (std::size_t k = 0; k < K; ++k) {
            double d = 0.0;
            for (std::size_t c = 0; c < m; ++c) d = std::max(d, std::abs(next[k * m + c] - table[k * m + c]));
            out.residual[k] = d;
        }
        table.swap(next);
        out.residual_history.push_back(res);
        out.iterations = it + 1;
        out.final_residual = res;
        if (res < opt.tolerance) {
            out.converged = true;
            break;
        }
    }
    std::size_t total_exits = 0;
    for (auto e : exits) total_exits += e;
    if (total_exits > 0)
        out.warnings.push_back("backward orbits left the graph box at " + std::to_string(total_exits) +
                               " quadrature nodes; the graph was held at its boundary value there");
    out.values.assign(table.begin(), table.begin() + static_cast<std::ptrdiff_t>(K * m));
    if (!out.converged) {
        std::string hist;
        for (double r : out.residual_history) hist += (hist.empty() ? "" : ", ") + io::format_double(r);
        throw NumericalError("Lyapunov-Perron iteration did not converge in " + std::to_string(opt.max_iterations) +
                             " iterations; residuals: " + hist);
    }
    return out;
}

// --------------------------------------------------------------------------
// First-order truncation

namespace detail {

// Central-difference Jacobians of g with respect to x (m x n) and y (m x m).
inline void g_jacobians(const CompiledSlowFast& c, std::size_t n, std::size_t m, const double* x, const double* y,
                        Eigen::MatrixXd& gx, Eigen::MatrixXd& gy) {
    std::array<double, 32> xx{}, yy{}, gp{}, gm{};
    std::copy(x, x + n, xx.begin());
    std::copy(y, y + m, yy.begin());
    gx.resize(static_cast<Eigen::Index>(m), static_cast<Eigen::Index>(n));
    gy.resize(static_cast<Eigen::Index>(m), static_cast<Eigen::Index>(m));
    for (std::size_t j = 0; j < n; ++j) {
        const double h = 1e-5 * std::max(1.0, std::abs(x[j]));
        xx[j] = x[j] + h;
        c.g(xx.data(), yy.data(), gp.data());
        xx[j] = x[j] - h;
        c.g(xx.data(), yy.data(), gm.data());
        xx[j] = x[j];
        for (std::size_t i = 0; i < m; ++i)
            gx(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = (gp[i] - gm[i]) / (2.0 * h);
    }
    for (std::size_t j = 0; j < m; ++j) {
        const double h = 1e-5 * std::max(1.0, std::abs(y[j]));
        yy[j] = y[j] + h;
        c.g(xx.data(), yy.data(), gp.data());
        yy[j] = y[j] - h;
        c.g(xx.data(), yy.data(), gm.data());
        yy[j] = y[j];
        for (std::size_t i = 0; i < m; ++i)
            gy(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = (gp[i] - gm[i]) / (2.0 * h);
    }
}

}  // namespace detail

struct TruncationParts {
    std::vector<double> h0, h1;  // grid.size() * m each
};

/// h0 solves B h0 + g(xi, h0) = 0 (damped Newton); h1 is the first drift
/// correction (B + g_y)^{-1} Dh0 (A xi + f(xi, h0)).
inline TruncationParts truncation_parts(const SlowFastSpec& s, const SlowGrid& grid) {
    s.validate();
    grid.validate();
    if (grid.dimension() != s.n) throw ValidationError("xi_grid", "dimension must equal the slow dimension");
    const std::size_t K = grid.size(), n = s.n, m = s.m;
    const auto mi = static_cast<Eigen::Index>(m);
    TruncationParts out{std::vector<double>(K * m), std::vector<double>(K * m)};
    std::vector<int> status(K, 0);  // 1 newton failure, 2 singular
    CompiledSlowFast c(s);
    auto blu = s.B.fullPivLu();
    parallel_for(K, [&](std::size_t k) {
        std::array<double, 32> x{}, gv{}, fv{};
        grid.point(k, x.data());
        Eigen::VectorXd y = Eigen::VectorXd::Zero(mi), r(mi);
        auto residual = [&](const Eigen::VectorXd& v, Eigen::VectorXd& into) {
            c.g(x.data(), v.data(), gv.data());
            into = s.B * v;
            for (std::size_t i = 0; i < m; ++i) into[static_cast<Eigen::Index>(i)] += gv[i];
        };
        residual(y, r);
        y = -blu.solve(r);  // B^{-1} g(xi, 0)
        Eigen::MatrixXd gx, gy;
        bool ok = false;
        residual(y, r);
        for (int it = 0; it < 60; ++it) {
            if (r.lpNorm<Eigen::Infinity>() < 1e-12 * (1.0 + y.lpNorm<Eigen::Infinity>())) {
                ok = true;
                break;
            }
            detail::g_jacobians(c, n, m, x.data(), y.data(), gx, gy);
            auto lu = (s.B + gy).fullPivLu();
            if (!lu.isInvertible()) {
                status[k] = 2;
                return;
            }
            const Eigen::VectorXd step = lu.solve(r);
            double lambda = 1.0;
            Eigen::VectorXd trial(mi), rt(mi);
            for (int h = 0; h < 30; ++h, lambda *= 0.5) {
                trial = y - lambda * step;
                residual(trial, rt);
                if (rt.allFinite() && rt.lpNorm<Eigen::Infinity>() < r.lpNorm<Eigen::Infinity>()) break;
            }
            if (!(rt.lpNorm<Eigen::Infinity>() < r.lpNorm<Eigen::Infinity>())) {
                // stagnated at roundoff level counts as converged
                ok = r.lpNorm<Eigen::Infinity>() < 1e-9 * (1.0 + y.lpNorm<Eigen::Infinity>());
                break;
            }
            y = trial;
            r = rt;
        }
        if (!ok) {
            status[k] = 1;
            return;
        }
        detail::g_jacobians(c, n, m, x.data(), y.data(), gx, gy);
        auto lu = (s.B + gy).fullPivLu();
        if (!lu.isInvertible()) {
            status[k] = 2;
            return;
        }
        const Eigen::MatrixXd dh0 = -lu.solve(gx);  // m x n
        c.f(x.data(), y.data(), fv.data());
        Eigen::VectorXd vx(static_cast<Eigen::Index>(n));
        for (std::size_t i = 0; i < n; ++i) {
            double a = fv[i];
            for (std::size_t j = 0; j < n; ++j)
                a += s.A(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) * x[j];
            vx[static_cast<Eigen::Index>(i)] = a;
        }
        const Eigen::VectorXd h1 = lu.solve(dh0 * vx);
        for (std::size_t i = 0; i < m; ++i) {
            out.h0[k * m + i] = y[static_cast<Eigen::Index>(i)];
            out.h1[k * m + i] = h1[static_cast<Eigen::Index>(i)];
        }
    });
    std::string bad_newton, bad_singular;
    for (std::size_t k = 0; k < K; ++k) {
        if (status[k] == 1) bad_newton += (bad_newton.empty() ? "" : " ") + std::to_string(k);
        if (status[k] == 2) bad_singular += (bad_singular.empty() ? "" : " ") + std::to_string(k);
    }
    if (!bad_singular.empty()) throw NumericalError("B + dg/dy is singular at xi cells: " + bad_singular);
    if (!bad_newton.empty()) throw NumericalError("Newton failed for the critical manifold at xi cells: " + bad_newton);
    return out;
}

/// First-order truncation h0 + eps h1 in Y coordinates. The path is only
/// recorded as lineage; the eta offset is added where the graph is used.
inline ManifoldGraph truncated_h(const SlowFastSpec& s, const SlowGrid& grid, const NoisePath& path = {}) {
    const auto parts = truncation_parts(s, grid);
    ManifoldGraph out;
    out.grid = grid;
    out.m = s.m;
    out.eps = s.eps;
    out.method = "truncation";
    out.seed = path.seed();
    out.stream = path.stream();
    out.values.resize(parts.h0.size());
    for (std::size_t i = 0; i < parts.h0.size(); ++i) out.values[i] = parts.h0[i] + s.eps * parts.h1[i];
    out.residual.assign(grid.size(), 0.0);
    return out;
}

// --------------------------------------------------------------------------
// Trajectories

struct SlowFastOrbit {
    Orbit x;
    std::vector<double> y;  // x.size() * m
    std::size_t m = 1;
    double y_at(std::size_t k, std::size_t c = 0) const { return y[k * m + c]; }
};

namespace detail {

inline void slow_rhs(const SlowFastSpec& s, const CompiledSlowFast& c, const double* x, const double* y, double* out) {
    c.f(x, y, out);
    for (std::size_t i = 0; i < s.n; ++i)
        for (std::size_t j = 0; j < s.n; ++j)
            out[i] += s.A(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) * x[j];
}

inline void check_path(const SlowFastSpec& s, const NoisePath& path, double horizon) {
    if (!(path.dt() > 0.0)) throw ValidationError("noise_path", "required");
    if (path.dimension() != s.m) throw ValidationError("noise_path", "dimension must equal the fast dimension");
    const std::int64_t steps = step_count(horizon, path.dt());
    if (steps > 0 && !path.covers(steps - 1)) throw ValidationError("noise_path", "does not cover the horizon");
}

}  // namespace detail

/// Full system: exponential Euler for y with the noise propagated over
/// half a step (as in stationary_eta), then Heun for x using the old and
/// new fast states.
inline SlowFastOrbit integrate_slow_fast(const SlowFastSpec& s, std::span<const double> x0,
                                         std::span<const double> y0, double horizon, const NoisePath& path,
                                         std::size_t output_every = 1) {
    s.validate();
    detail::check_path(s, path, horizon);
    if (x0.size() != s.n || y0.size() != s.m) throw ValidationError("x0", "dimension mismatch");
    const double dt = path.dt();
    const std::int64_t steps = step_count(horizon, dt);
    const std::size_t n = s.n, m = s.m;
    CompiledSlowFast c(s);
    FastPropagator P(s.B, s.eps, dt);
    std::vector<double> x(x0.begin(), x0.end()), xs(n), k1(n), k2(n), gv(m);
    Eigen::VectorXd y = Eigen::Map<const Eigen::VectorXd>(y0.data(), static_cast<Eigen::Index>(m));
    Eigen::VectorXd y1(static_cast<Eigen::Index>(m));
    SlowFastOrbit out;
    out.m = m;
    out.x.dimension = n;
    auto record = [&](double t) {
        out.x.push(t, x);
        for (std::size_t i = 0; i < m; ++i) out.y.push_back(y[static_cast<Eigen::Index>(i)]);
    };
    record(0.0);
    const std::size_t every = std::max<std::size_t>(1, output_every);
    for (std::int64_t k = 0; k < steps; ++k) {
        c.g(x.data(), y.data(), gv.data());
        const Eigen::Map<const Eigen::VectorXd> g(gv.data(), static_cast<Eigen::Index>(m));
        const Eigen::Map<const Eigen::VectorXd> dw(path.step(k), static_cast<Eigen::Index>(m));
        y1 = P.E * y + P.Phi * g + s.sigma * (P.noise * dw);
        detail::slow_rhs(s, c, x.data(), y.data(), k1.data());
        for (std::size_t i = 0; i < n; ++i) xs[i] = x[i] + dt * k1[i];
        detail::slow_rhs(s, c, xs.data(), y1.data(), k2.data());
        for (std::size_t i = 0; i < n; ++i) x[i] += 0.5 * dt * (k1[i] + k2[i]);
        y = y1;
        if (!detail::finite_state(x) || !y.allFinite()) {
            out.x.blow_up_time = static_cast<double>(k + 1) * dt;
            throw NumericalError("slow-fast trajectory blew up at t = " + io::format_double(*out.x.blow_up_time));
        }
        if ((static_cast<std::size_t>(k) + 1) % every == 0) record(static_cast<double>(k + 1) * dt);
    }
    return out;
}

/// Reduced slow system x' = A x + f(x, h(x) + sigma eta_t) along the same
/// realisation as the full system (Heun). The graph is the t = 0 graph.
inline Orbit reduced_slow_integrate(const SlowFastSpec& s, const ManifoldGraph& graph, std::span<const double> x0,
                                    double horizon, const NoisePath& path, std::size_t output_every = 1) {
    s.validate();
    if (graph.grid.dimension() != s.n || graph.m != s.m) throw ValidationError("graph", "dimension mismatch");
    if (x0.size() != s.n) throw ValidationError("x0", "dimension mismatch");
    detail::check_path(s, path, horizon);
    const double dt = path.dt();
    const std::int64_t steps = step_count(horizon, dt);
    EtaPath eta;
    if (s.sigma > 0.0) eta = stationary_eta(s.eps, s.B, path, 0.0, horizon);
    CompiledSlowFast c(s);
    const std::size_t n = s.n, m = s.m;
    std::vector<double> x(x0.begin(), x0.end()), xs(n), k1(n), k2(n), y(m);
    auto rhs = [&](const std::vector<double>& pos, std::int64_t node, std::vector<double>& out) {
        if (!graph.grid.contains(pos))
            throw NumericalError("reduced orbit left the graph coverage at t = " +
                                 io::format_double(static_cast<double>(node) * dt));
        graph.eval(pos.data(), y.data());
        if (s.sigma > 0.0)
            for (std::size_t i = 0; i < m; ++i) y[i] += s.sigma * eta.at(node, i);
        detail::slow_rhs(s, c, pos.data(), y.data(), out.data());
    };
    Orbit out;
    out.dimension = n;
    out.provenance = Provenance::reduced_slow;
    out.push(0.0, x);
    const std::size_t every = std::max<std::size_t>(1, output_every);
    for (std::int64_t k = 0; k < steps; ++k) {
        rhs(x, k, k1);
        for (std::size_t i = 0; i < n; ++i) xs[i] = x[i] + dt * k1[i];
        rhs(xs, k + 1, k2);
        for (std::size_t i = 0; i < n; ++i) x[i] += 0.5 * dt * (k1[i] + k2[i]);
        if (!detail::finite_state(x)) throw NumericalError("reduced orbit blew up");
        if ((static_cast<std::size_t>(k) + 1) % every == 0) out.push(static_cast<double>(k + 1) * dt, x);
    }
    return out;
}

/// sup over shared output times of the largest slow-component difference.
inline double slow_gap(const Orbit& a, const Orbit& b) {
    if (a.size() != b.size() || a.dimension != b.dimension) throw ValidationError("orbit", "layouts differ");
    double d = 0.0;
    for (std::size_t i = 0; i < a.states.size(); ++i) d = std::max(d, std::abs(a.states[i] - b.states[i]));
    return d;
}

struct InvarianceReport {
    std::vector<double> times;
    std::vector<std::vector<double>> deviation;  // per point, per output time
    double sup = 0.0;
    double mean = 0.0;
};

/// Starts the full system on the graph (plus `perturbation` in every fast
/// component) at each point and tracks |y - (h(x) + sigma eta)|_inf.
inline InvarianceReport invariance_error(const SlowFastSpec& s, const ManifoldGraph& graph,
                                         std::span<const double> points, double t_check, const NoisePath& path,
                                         double perturbation = 0.0, std::size_t output_every = 1) {
    const std::size_t n = s.n, m = s.m;
    if (points.size() % n != 0) throw ValidationError("points", "expected a multiple of the slow dimension");
    const std::size_t P = points.size() / n;
    EtaPath eta;
    if (s.sigma > 0.0) eta = stationary_eta(s.eps, s.B, path, 0.0, t_check);
    auto offset = [&](std::int64_t k, std::size_t c) { return s.sigma > 0.0 ? s.sigma * eta.at(k, c) : 0.0; };
    InvarianceReport rep;
    rep.deviation.resize(P);
    std::vector<SlowFastOrbit> runs(P);
    for (std::size_t p = 0; p < P; ++p)
        if (!graph.grid.contains(points.subspan(p * n, n)))
            throw ValidationError("points", "point outside graph coverage");
    parallel_for(P, [&](std::size_t p) {
        std::vector<double> y0(m);
        graph.eval(points.data() + p * n, y0.data());
        for (std::size_t c = 0; c < m; ++c) y0[c] += offset(0, c) + perturbation;
        runs[p] = integrate_slow_fast(s, points.subspan(p * n, n), y0, t_check, path, output_every);
    });
    const std::size_t every = std::max<std::size_t>(1, output_every);
    double total = 0.0;
    std::size_t count = 0;
    std::vector<double> h(m);
    for (std::size_t p = 0; p < P; ++p) {
        const auto& r = runs[p];
        if (p == 0) rep.times = r.x.times;
        for (std::size_t k = 0; k < r.x.size(); ++k) {
            const auto xs = r.x.state(k);
            if (!graph.grid.contains(xs)) throw NumericalError("invariance run left the graph coverage");
            graph.eval(xs.data(), h.data());
            double d = 0.0;
            const auto node = static_cast<std::int64_t>(k * every);
            for (std::size_t c = 0; c < m; ++c) d = std::max(d, std::abs(r.y_at(k, c) - h[c] - offset(node, c)));
            rep.deviation[p].push_back(d);
            rep.sup = std::max(rep.sup, d);
            total += d;
            ++count;
        }
    }
    rep.mean = count ? total / static_cast<double>(count) : 0.0;
    return rep;
}

// --------------------------------------------------------------------------
// Export

/// Columns xi_1..xi_n, h_1..h_m, residual.
inline void write_graph_csv(std::ostream& os, const ManifoldGraph& g) {
    std::vector<std::string> header;
    for (std::size_t d = 0; d < g.grid.dimension(); ++d) header.push_back("xi_" + std::to_string(d + 1));
    for (std::size_t c = 0; c < g.m; ++c) header.push_back("h_" + std::to_string(c + 1));
    header.emplace_back("residual");
    io::CsvWriter w(os, header);
    std::vector<double> xi(g.grid.dimension());
    for (std::size_t k = 0; k < g.grid.size(); ++k) {
        g.grid.point(k, xi.data());
        for (double v : xi) w.cell(v);
        for (double v : g.at(k)) w.cell(v);
        w.cell(k < g.residual.size() ? g.residual[k] : 0.0);
        w.end_row();
    }
}

inline nlohmann::ordered_json convergence_json(const ManifoldGraph& g) {
    nlohmann::ordered_json j;
    j["method"] = g.method;
    j["eps"] = g.eps;
    j["iterations"] = g.iterations;
    j["converged"] = g.converged;
    j["residual"] = g.final_residual;
    j["tolerance"] = g.tolerance;
    j["residual_history"] = g.residual_history;
    j["window"] = g.window;
    j["time_slices"] = g.time_slices;
    j["seed"] = g.seed;
    j["stream"] = g.stream;
    j["warnings"] = g.warnings;
    return j;
}

}  // namespace stodyn
