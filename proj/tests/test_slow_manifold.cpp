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

#include <catch_amalgamated.hpp>

#include <algorithm>
#include <cmath>
#include <sstream>

#include "oracles.hpp"
#include "stodyn/slow_manifold.hpp"

using namespace stodyn;

namespace {

Eigen::MatrixXd mat(std::initializer_list<std::initializer_list<double>> rows) {
    Eigen::MatrixXd M(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(rows.begin()->size()));
    Eigen::Index i = 0;
    for (const auto& r : rows) {
        Eigen::Index j = 0;
        for (double v : r) M(i, j++) = v;
        ++i;
    }
    return M;
}

SlowFastSpec scalar_spec(double a, double b, const char* f, const char* g, double eps, double sigma = 0.0) {
    SlowFastSpec s;
    s.A = mat({{a}});
    s.B = mat({{b}});
    s.f = {expr::parse(f)};
    s.g = {expr::parse(g)};
    s.eps = eps;
    s.sigma = sigma;
    s.validate();
    return s;
}

SlowFastSpec nonlinear(double eps, double sigma) {
    return scalar_spec(-1.0, -1.0, "y1 + 0.3*y1^2", "sin(x1)", eps, sigma);
}

struct JobsGuard {
    explicit JobsGuard(std::size_t j) { set_max_jobs(j); }
    ~JobsGuard() { set_max_jobs(0); }
};

double max_abs_diff(const std::vector<double>& a, const std::vector<double>& b) {
    double d = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) d = std::max(d, std::abs(a[i] - b[i]));
    return d;
}

}  // namespace

TEST_CASE("slow-fast spec validation", "[slow]") {
    CHECK_THROWS_AS(scalar_spec(-1, 0.5, "y1", "x1", 0.1), ValidationError);
    CHECK_THROWS_AS(scalar_spec(-1, -1, "y1", "x1", 0.0), ValidationError);
    CHECK_THROWS_AS(scalar_spec(-1, -1, "y1 + q", "x1", 0.1), ValidationError);
    CHECK_THROWS_AS(scalar_spec(-1, -1, "y1", "x1", 0.1, -0.2), ValidationError);
    auto s = scalar_spec(-1, -1, "y1", "x1", 0.1);
    s.B = mat({{-1, 0}, {0, -1}});
    CHECK_THROWS_AS(s.validate(), ValidationError);
}

TEST_CASE("gap check", "[slow]") {
    SlowFastSpec s;
    s.n = 1;
    s.m = 2;
    s.A = mat({{0.0}});
    s.B = mat({{-1, 0}, {0, -1}});
    s.f = {expr::parse("y1")};
    s.g = {expr::parse("0.1*sin(y1)"), expr::parse("0")};
    s.eps = 0.01;
    s.lipschitz_g = 0.1;
    auto r = validate_gap(s);
    CHECK(r.status == GapStatus::pass);
    CHECK(r.ratio == Catch::Approx(0.001));

    s.lipschitz_g.reset();
    LipschitzBox box{{-1, -1, -1}, {1, 1, 1}};
    CHECK(probe_lipschitz_g(s, box) == Catch::Approx(0.1).epsilon(1e-6));
    CHECK(validate_gap(s, box).status == GapStatus::pass);

    s.B = mat({{-1, 0}, {0, 0.5}});
    CHECK(validate_gap(s).status == GapStatus::fail);

    s.B = mat({{-1, 0}, {0, -1}});
    s.eps = 0.6;
    s.lipschitz_g = 1.0;
    auto w = validate_gap(s);
    CHECK(w.status == GapStatus::warn);
    CHECK(w.ratio == Catch::Approx(0.6));
}

TEST_CASE("stationary fast process", "[slow]") {
    const Eigen::MatrixXd B = mat({{-1.0}});
    SECTION("linear in the increments") {
        auto path = make_noise_path(NoiseSpec::brownian(), 1e-3, 2000, 1000, 5, 0);
        auto a = stationary_eta(0.05, B, path, 0.0, 1.0);
        auto b = stationary_eta(0.05, B, path.scaled(2.0), 0.0, 1.0);
        for (std::size_t i = 0; i < a.values.size(); ++i) CHECK(b.values[i] == 2.0 * a.values[i]);
        auto z = stationary_eta(0.05, B, path.scaled(0.0), 0.0, 1.0);
        for (double v : z.values) CHECK(v == 0.0);
    }
    SECTION("stationary variance is one half for every eps") {
        for (double eps : {0.1, 0.01}) {
            const double dt = eps / 10.0;
            auto path = make_noise_path(NoiseSpec::brownian(), dt, 400, 200'000, 6, 0);
            auto e = stationary_eta(eps, B, path, 0.0, 200'000 * dt - dt);
            double s2 = 0.0;
            for (double v : e.values) s2 += v * v;
            CHECK(s2 / static_cast<double>(e.values.size()) == Catch::Approx(0.5).epsilon(0.05));
        }
    }
    SECTION("burn-in beyond the path is rejected") {
        auto path = make_noise_path(NoiseSpec::brownian(), 1e-3, 10, 1000, 5, 0);
        CHECK_THROWS_AS(stationary_eta(0.05, B, path, 0.0, 0.5), ValidationError);
    }
}

TEST_CASE("constant forcing reproduces -B^{-1} g0", "[slow][closed-form]") {
    SlowFastSpec s;
    s.n = 1;
    s.m = 2;
    s.A = mat({{-0.3}});
    s.B = mat({{-1.0, 0.5}, {0.0, -2.0}});
    s.f = {expr::parse("y1 - y2")};
    s.g = {expr::parse("1"), expr::parse("-1")};
    s.eps = 0.05;
    s.validate();
    const Eigen::Vector2d g0(1.0, -1.0);
    const Eigen::Vector2d exact = -s.B.fullPivLu().solve(g0);
    SlowGrid grid(-2.0, 2.0, 11);
    auto lp = lyapunov_perron_solve(s, grid, NoisePath{});
    auto tr = truncated_h(s, grid);
    for (std::size_t k = 0; k < grid.size(); ++k) {
        for (std::size_t c = 0; c < 2; ++c) {
            CHECK(std::abs(lp.at(k)[c] - exact[static_cast<Eigen::Index>(c)]) < 1e-6);
            CHECK(std::abs(tr.at(k)[c] - exact[static_cast<Eigen::Index>(c)]) < 1e-12);
            CHECK(std::abs(lp.at(k)[c] - tr.at(k)[c]) < 1e-12);
        }
    }
    CHECK(lp.converged);

    SECTION("reduced system is the closed-form linear ODE") {
        auto c1 = scalar_spec(-0.5, -2.0, "y1", "3", 0.05);
        auto path = make_noise_path(NoiseSpec::brownian(), 1e-3, 0, 5000, 1, 0);
        auto g = truncated_h(c1, SlowGrid(-1.0, 5.0, 7));
        const std::vector<double> x0{0.0};
        auto o = reduced_slow_integrate(c1, g, x0, 5.0, path, 100);
        CHECK(o.provenance == Provenance::reduced_slow);
        for (std::size_t k = 0; k < o.size(); ++k)
            CHECK(std::abs(o.at(k) - 3.0 * (1.0 - std::exp(-0.5 * o.times[k]))) < 1e-6);
    }
}

TEST_CASE("decoupled fast forcing", "[slow][closed-form]") {
    // A = 0, f = 0: the backward slow orbit is frozen
    auto s = scalar_spec(0.0, -2.0, "0", "sin(x1) + x1^2", 0.1);
    SlowGrid grid(-2.0, 2.0, 21);
    auto lp = lyapunov_perron_solve(s, grid, NoisePath{});
    std::vector<double> xi(1);
    for (std::size_t k = 0; k < grid.size(); ++k) {
        grid.point(k, xi.data());
        CHECK(std::abs(lp.at(k)[0] - 0.5 * (std::sin(xi[0]) + xi[0] * xi[0])) < 1e-6);
    }
}

TEST_CASE("linear systems match the Sylvester solution", "[slow][closed-form]") {
    SlowFastSpec s;
    s.n = 2;
    s.m = 2;
    s.A = mat({{-0.5, 0.3}, {0.0, -0.2}});
    s.B = mat({{-1.0, 0.4}, {0.0, -1.5}});
    s.f = {expr::parse("0"), expr::parse("0")};
    s.g = {expr::parse("x1 - 0.5*x2 + 0.2*y1"), expr::parse("0.3*x1 + 0.8*x2 + 0.1*y1 - 0.3*y2")};
    s.eps = 0.1;
    s.validate();
    const Eigen::MatrixXd C = mat({{1.0, -0.5}, {0.3, 0.8}});
    const Eigen::MatrixXd D = mat({{0.2, 0.0}, {0.1, -0.3}});
    const Eigen::MatrixXd H0 = -(s.B + D).fullPivLu().solve(C);
    const Eigen::MatrixXd H = oracle::sylvester(s.eps, s.A, s.B + D, C);
    SlowGrid grid({-6.0, -6.0}, {6.0, 6.0}, {13, 13});
    auto parts = truncation_parts(s, grid);
    LyapunovPerronOptions fine;
    fine.ds = s.eps / 80.0;
    auto lp = lyapunov_perron_solve(s, grid, NoisePath{}, fine);
    Eigen::Vector2d xi;
    for (std::size_t k = 0; k < grid.size(); ++k) {
        grid.point(k, xi.data());
        const Eigen::Vector2d a = H0 * xi, b = H * xi;
        for (Eigen::Index c = 0; c < 2; ++c) {
            CHECK(std::abs(parts.h0[k * 2 + static_cast<std::size_t>(c)] - a[c]) < 1e-8);
            // backward orbits from the inner square stay in the box over the kernel window
            if (xi.lpNorm<Eigen::Infinity>() <= 1.0) CHECK(std::abs(lp.at(k)[static_cast<std::size_t>(c)] - b[c]) < 1e-6);
        }
    }
}

TEST_CASE("fixed-point residuals contract", "[slow]") {
    auto s = scalar_spec(-1.0, -1.0, "y1", "sin(x1) + 0.2*tanh(y1)", 0.1);
    auto lp = lyapunov_perron_solve(s, SlowGrid(-2.0, 2.0, 41), NoisePath{});
    const auto& r = lp.residual_history;
    REQUIRE(r.size() >= 6);
    for (std::size_t i = 1; i < r.size(); ++i) CHECK(r[i] < r[i - 1]);
    CHECK(lp.final_residual < lp.tolerance);

    LyapunovPerronOptions few;
    few.max_iterations = 2;
    CHECK_THROWS_AS(lyapunov_perron_solve(s, SlowGrid(-2.0, 2.0, 41), NoisePath{}, few), NumericalError);
}

TEST_CASE("noisy fixed point", "[slow]") {
    auto s = nonlinear(0.05, 0.5);
    const double dt = 1e-3;
    const auto before = lyapunov_perron_history(s, dt);
    auto path = make_noise_path(NoiseSpec::brownian(), dt, before, 100, 11, 0);
    SlowGrid grid(-3.0, 3.0, 31);
    auto lp = lyapunov_perron_solve(s, grid, path);
    const auto& r = lp.residual_history;
    REQUIRE(r.size() >= 6);
    for (std::size_t i = r.size() - 5; i < r.size(); ++i) CHECK(r[i] < r[i - 1]);
    // the random graph sits within O(eps) of the truncation
    auto tr = truncated_h(s, grid, path);
    CHECK(max_abs_diff(lp.values, tr.values) < 0.1);

    SECTION("bit-identical for any worker count") {
        std::vector<double> one, many;
        {
            JobsGuard g(1);
            one = lyapunov_perron_solve(s, grid, path).values;
        }
        {
            JobsGuard g(4);
            many = lyapunov_perron_solve(s, grid, path).values;
        }
        CHECK(one == many);
        CHECK(one == lp.values);
    }
    SECTION("short noise history is rejected") {
        auto shorter = make_noise_path(NoiseSpec::brownian(), dt, before / 2, 100, 11, 0);
        CHECK_THROWS_AS(lyapunov_perron_solve(s, grid, shorter), ValidationError);
    }
}

TEST_CASE("truncation converges to the fixed point", "[slow]") {
    std::vector<double> gaps;
    SlowGrid grid(-3.0, 3.0, 61);
    for (double eps : {0.1, 0.05, 0.025}) {
        auto s = scalar_spec(-1.0, -1.0, "y1 + 0.3*y1^2", "sin(x1) + 0.2*tanh(y1)", eps);
        auto lp = lyapunov_perron_solve(s, grid, NoisePath{});
        auto tr = truncated_h(s, grid);
        std::vector<double> xi(1);
        double d = 0.0;
        for (std::size_t k = 0; k < grid.size(); ++k) {
            grid.point(k, xi.data());
            if (std::abs(xi[0]) <= 1.5) d = std::max(d, std::abs(lp.at(k)[0] - tr.at(k)[0]));
        }
        gaps.push_back(d);
    }
    for (std::size_t i = 1; i < gaps.size(); ++i) {
        INFO("gaps " << gaps[i - 1] << " -> " << gaps[i]);
        CHECK(gaps[i] / gaps[i - 1] >= 0.2);
        CHECK(gaps[i] / gaps[i - 1] <= 0.7);
    }
}

TEST_CASE("reduced slow orbits track the full system", "[slow]") {
    const double dt = 5e-4, T = 5.0;
    SlowGrid grid(-4.0, 4.0, 801);
    const std::vector<double> x0{0.5};
    auto mean_gap = [&](double eps) {
        auto s = nonlinear(eps, 0.5);
        auto g = truncated_h(s, grid);
        double total = 0.0;
        const int paths = 8;
        for (int p = 0; p < paths; ++p) {
            auto path = make_noise_path(NoiseSpec::brownian(), dt, 2000, 10'000, 21, static_cast<std::uint64_t>(p));
            auto eta = stationary_eta(eps, s.B, path, 0.0, T);
            std::vector<double> y0(1);
            g.eval(x0.data(), y0.data());
            y0[0] += s.sigma * eta.at(0);
            auto full = integrate_slow_fast(s, x0, y0, T, path, 10);
            auto red = reduced_slow_integrate(s, g, x0, T, path, 10);
            total += slow_gap(full.x, red);
        }
        return total / paths;
    };
    const double g4 = mean_gap(0.04), g2 = mean_gap(0.02), g1 = mean_gap(0.01);
    INFO("gaps " << g4 << " " << g2 << " " << g1);
    CHECK(g2 < g4);
    CHECK(g1 < g2);
    CHECK(g1 < 2.0 * (g4 / 0.04) * 0.01);

    SECTION("leaving the graph is an error") {
        auto s = nonlinear(0.05, 0.0);
        auto path = make_noise_path(NoiseSpec::brownian(), dt, 0, 10'000, 1, 0);
        auto g = truncated_h(s, SlowGrid(0.0, 0.6, 13));
        CHECK_THROWS_AS(reduced_slow_integrate(s, g, x0, T, path), NumericalError);
    }
}

TEST_CASE("invariance of the graph", "[slow]") {
    const double dt = 5e-4;
    auto path = make_noise_path(NoiseSpec::brownian(), dt, 4000, 4000, 31, 0);
    const std::vector<double> points{-1.0, 0.0, 0.5, 1.5};
    SECTION("constant manifold is invariant") {
        auto s = scalar_spec(-0.5, -2.0, "y1", "3", 0.05, 0.4);
        auto g = truncated_h(s, SlowGrid(-3.0, 5.0, 17));
        auto rep = invariance_error(s, g, points, 1.0, path);
        CHECK(rep.sup < 1e-10);
    }
    SECTION("off-manifold starts relax at rate |lambda|/eps") {
        auto s = nonlinear(0.05, 0.5);
        SlowGrid grid(-4.0, 4.0, 801);
        auto g = truncated_h(s, grid);
        auto on = invariance_error(s, g, points, 1.0, path);
        auto off = invariance_error(s, g, points, 1.0, path, 1.0);
        const double t_relax = 1.5 * s.eps * std::log(1e6);
        for (std::size_t p = 0; p < off.deviation.size(); ++p) {
            CHECK(off.deviation[p][0] == Catch::Approx(1.0).margin(1e-9));
            for (std::size_t k = 0; k < off.times.size(); ++k)
                if (off.times[k] >= t_relax) CHECK(off.deviation[p][k] <= on.sup + 1e-6);
        }
    }
    SECTION("deviation shrinks with eps") {
        SlowGrid grid(-4.0, 4.0, 801);
        double prev = INFINITY;
        for (double eps : {0.1, 0.05, 0.025}) {
            auto s = nonlinear(eps, 0.5);
            auto rep = invariance_error(s, truncated_h(s, grid), points, 1.0, path);
            CHECK(rep.mean < prev);
            prev = rep.mean;
        }
    }
}

TEST_CASE("graph exports", "[slow]") {
    auto s = scalar_spec(-0.5, -2.0, "y1", "3", 0.05);
    auto g = lyapunov_perron_solve(s, SlowGrid(0.0, 1.0, 2), NoisePath{});
    std::ostringstream os;
    write_graph_csv(os, g);
    const auto text = os.str();
    CHECK(text.rfind("xi_1,h_1,residual\n0,1.4999999", 0) == 0);
    CHECK(std::count(text.begin(), text.end(), '\n') == 3);
    auto j = convergence_json(g);
    CHECK(j["method"] == "lyapunov-perron");
    CHECK(j["converged"] == true);
    CHECK(j["residual_history"].size() == g.iterations);
}
