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

#include <cmath>
#include <sstream>
#include <vector>

#include "oracles.hpp"
#include "stodyn/fokker_planck.hpp"

using namespace stodyn;
using Catch::Approx;

namespace {

std::vector<double> column_sums(const AdjointGenerator& g) {
    auto a = g.dense();
    std::vector<double> s(g.size(), 0.0);
    for (std::size_t i = 0; i < g.size(); ++i)
        for (std::size_t j = 0; j < g.size(); ++j) s[j] += a[i][j];
    return s;
}

// Histogram of the final ensemble samples on the solver grid, as a density.
std::vector<double> histogram(const EnsembleStats& st, const Grid1D& grid) {
    std::vector<double> hist(grid.n, 0.0);
    const auto& last = st.samples.back();
    for (double v : last) {
        if (!std::isfinite(v) || v <= grid.lo || v >= grid.hi) continue;
        const auto i = static_cast<std::size_t>((v - grid.lo) / grid.h());
        hist[std::min(i, grid.n - 1)] += 1.0;
    }
    for (auto& v : hist) v /= static_cast<double>(last.size()) * grid.h();
    return hist;
}

}  // namespace

TEST_CASE("grid and mollified delta", "[fp]") {
    CHECK_THROWS_AS(Grid1D(1.0, 0.0, 32), ValidationError);
    CHECK_THROWS_AS(Grid1D(0.0, 1.0, 8), ValidationError);
    Grid1D g(-4.0, 4.0, 160);
    CHECK(g.h() == 0.05);
    auto d = delta_initial(g, 0.37);
    CHECK(std::abs(d.mass() - 1.0) < 1e-12);
    CHECK(std::abs(d.mean() - 0.37) < g.h() / 10);
    auto fine = delta_initial(Grid1D(-4.0, 4.0, 320), 0.37);
    const double ratio = fine.variance() / d.variance();
    CHECK(ratio >= 0.2);
    CHECK(ratio <= 0.3);
    CHECK_THROWS_AS(delta_initial(g, 4.0), ValidationError);
}

TEST_CASE("local generator structure", "[fp]") {
    SECTION("interior columns sum to zero") {
        auto sys = SystemSpec::scalar("x1 - x1^3", "0.4 + 0.1*x1^2", NoiseSpec::brownian());
        auto g = build_adjoint_generator(sys, Grid1D(-3.0, 3.0, 64));
        auto s = column_sums(g);
        for (std::size_t j = 1; j + 1 < s.size(); ++j) CHECK(std::abs(s[j]) < 1e-12);
        CHECK(s.front() < 0.0);
        CHECK(s.back() < 0.0);
    }
    SECTION("pure diffusion is the three-point Laplacian") {
        auto sys = SystemSpec::scalar("0", "1", NoiseSpec::brownian());
        Grid1D grid(-2.0, 2.0, 40);
        auto g = build_adjoint_generator(sys, grid);
        const double d = 0.5, h2 = grid.h() * grid.h();
        for (std::size_t i = 0; i < grid.n; ++i) {
            CHECK(g.diag[i] == Approx(-2.0 * d / h2).epsilon(1e-14));
            if (i > 0) CHECK(g.lower[i] == Approx(d / h2).epsilon(1e-14));
            if (i + 1 < grid.n) CHECK(g.upper[i] == Approx(d / h2).epsilon(1e-14));
        }
    }
    SECTION("stable alpha = 2 is Brownian with twice the variance") {
        Grid1D grid(-2.0, 2.0, 40);
        auto a = build_adjoint_generator(SystemSpec::scalar("-x1", "1", NoiseSpec::stable(2.0, 0.0)), grid);
        auto b = build_adjoint_generator(SystemSpec::scalar("-x1", "sqrt(2)", NoiseSpec::brownian()), grid);
        CHECK_FALSE(a.nonlocal);
        for (std::size_t i = 0; i < grid.n; ++i) CHECK(a.diag[i] == Approx(b.diag[i]).epsilon(1e-14));
    }
    SECTION("validation") {
        SystemSpec two;
        two.dimension = 2;
        two.drift = {expr::parse("x2"), expr::parse("-x1")};
        two.diffusion = {expr::parse("1"), expr::parse("1")};
        CHECK_THROWS_AS(build_adjoint_generator(two, Grid1D(-1, 1, 32)), ValidationError);
        auto mult = SystemSpec::scalar("-x1", "1 + 0.1*x1^2", NoiseSpec::stable(1.5, 0.0));
        CHECK_THROWS_AS(build_adjoint_generator(mult, Grid1D(-1, 1, 32)), ValidationError);
        CHECK_NOTHROW(build_adjoint_generator(mult, Grid1D(-1, 1, 32), {.experimental_multiplicative = true}));
        auto timed = SystemSpec::scalar("-x1 + sin(t)", "1", NoiseSpec::brownian());
        CHECK_THROWS_AS(build_adjoint_generator(timed, Grid1D(-1, 1, 32)), ValidationError);
    }
}

TEST_CASE("jump operator structure", "[fp]") {
    Grid1D grid(-5.0, 5.0, 100);
    SECTION("beta = 0 maps even functions to even functions") {
        for (double alpha : {0.5, 1.0, 1.5}) {
            auto g = build_adjoint_generator(SystemSpec::scalar("0", "0.7", NoiseSpec::stable(alpha, 0.0)), grid);
            std::vector<double> p(grid.n);
            for (std::size_t i = 0; i < grid.n; ++i) p[i] = std::exp(-grid.x(i) * grid.x(i)) * (1 + grid.x(i) * grid.x(i));
            auto q = g.apply(p);
            for (std::size_t i = 0; i < grid.n; ++i) CHECK(std::abs(q[i] - q[grid.n - 1 - i]) < 1e-10);
        }
    }
    SECTION("columns lose mass only through the ends and the far tail") {
        for (double alpha : {0.5, 1.0, 1.5}) {
            for (double beta : {-1.0, 0.0, 0.6}) {
                auto g = build_adjoint_generator(SystemSpec::scalar("-x1", "1", NoiseSpec::stable(alpha, beta)), grid);
                auto s = column_sums(g);
                const double tail = jump_tail_mass(grid.h() / 2, alpha, beta);
                for (double v : s) {
                    CHECK(v <= 1e-9);
                    CHECK(v >= -tail - 1e3);
                }
                // the centre column loses exactly the jumps that leave [-5, 5]
                const std::size_t c = grid.n / 2;
                const double x = grid.x(c);
                const auto w = jump_weights(alpha, beta);
                const double leave = (w.positive * std::pow(grid.hi - x, -alpha) + w.negative * std::pow(x - grid.lo, -alpha)) / alpha;
                CHECK(s[c] == Approx(-leave).epsilon(0.05));
            }
        }
    }
}

TEST_CASE("heat kernel variance grows linearly", "[fp]") {
    Grid1D grid(-8.0, 8.0, 320);
    auto g = build_adjoint_generator(SystemSpec::scalar("0", "1", NoiseSpec::brownian()), grid);
    auto p0 = delta_initial(grid, 0.0);
    auto ev = evolve_density(g, p0, 2.0, 0.01, {.output_every = 100});
    for (const auto& f : ev.frames)
        CHECK(std::abs(f.variance() - p0.variance() - f.t) < 2 * grid.h() * grid.h());
}

TEST_CASE("Ornstein-Uhlenbeck stationary density", "[fp][property]") {
    Grid1D grid(-6.0, 6.0, 240);
    auto g = build_adjoint_generator(SystemSpec::scalar("-x1", "1", NoiseSpec::brownian()), grid);
    auto ev = evolve_density(g, delta_initial(grid, 1.0), 20.0, 0.01, {.output_every = 500});
    const auto& last = ev.frames.back();
    CHECK(last.l1_distance([](double x) { return oracle::normal_pdf(x, 0.0, 0.5); }) < 1e-2);
    CHECK(ev.report.max_drift_per_1000 < 1e-6);
    CHECK(ev.report.positivity_violations == 0);
    CHECK(ev.report.final_normalization == Approx(1.0).epsilon(1e-6));
    // transient mean decays like e^{-t}
    for (const auto& f : ev.frames) CHECK(std::abs(f.mean() - std::exp(-f.t)) < 1e-3);
}

TEST_CASE("ordered initial data keeps ordered means under constant drift", "[fp]") {
    Grid1D grid(-6.0, 6.0, 240);
    auto g = build_adjoint_generator(SystemSpec::scalar("0.5", "0.6", NoiseSpec::brownian()), grid);
    auto a = evolve_density(g, delta_initial(grid, -1.0), 3.0, 0.01, {.output_every = 20});
    auto b = evolve_density(g, delta_initial(grid, -1.5), 3.0, 0.01, {.output_every = 20});
    for (std::size_t k = 0; k < a.frames.size(); ++k) CHECK(a.frames[k].mean() > b.frames[k].mean());
}

TEST_CASE("jump solver keeps the strictly stable mean", "[fp]") {
    // alpha > 1: E[L_t] = 0 for every beta. On [-L, L] with f = 0 the only
    // bias is the first moment of the jumps that leave the domain.
    const double alpha = 1.5, L = 40.0;
    Grid1D grid(-L, L, 640);
    for (double beta : {-1.0, 0.0, 0.5}) {
        auto g = build_adjoint_generator(SystemSpec::scalar("0", "1", NoiseSpec::stable(alpha, beta)), grid);
        auto ev = evolve_density(g, delta_initial(grid, 0.0), 1.0, 0.005, {.output_every = 200, .normalize_at_end = false});
        const auto& last = ev.frames.back();
        const auto w = jump_weights(alpha, beta);
        const double lost_moment = (w.positive - w.negative) * std::pow(L, 1.0 - alpha) / (alpha - 1.0);
        INFO("beta=" << beta);
        CHECK(std::abs(last.mean() * last.mass() + lost_moment) < 0.01);
        CHECK(ev.report.positivity_violations == 0);
    }
}

TEST_CASE("truncation loss shrinks as the radius doubles", "[fp]") {
    Grid1D grid(-20.0, 20.0, 320);
    auto sys = SystemSpec::scalar("-x1", "1", NoiseSpec::stable(1.5, 0.0));
    double prev = 1.0;
    for (double r : {2.5, 5.0, 10.0, 20.0, 40.0}) {
        auto g = build_adjoint_generator(sys, grid, {.truncation = r});
        auto ev = evolve_density(g, delta_initial(grid, 0.0), 1.0, 0.005, {.normalize_at_end = false});
        const double loss = 1.0 - ev.report.mass.back();
        INFO("R=" << r << " loss=" << loss);
        CHECK(loss < prev);
        prev = loss;
    }
}

TEST_CASE("density agrees with a Monte Carlo histogram", "[fp][property]") {
    const double alpha = 1.5;
    Grid1D grid(-30.0, 30.0, 600);
    auto sys = SystemSpec::scalar("-x1", "0.5", NoiseSpec::stable(alpha, 0.3));
    auto ev = evolve_density(build_adjoint_generator(sys, grid), delta_initial(grid, 1.0), 1.0, 0.005,
                             {.output_every = 200});
    auto st = simulate_ensemble(sys, std::vector<double>{1.0}, 1.0, 0.005, 100'000, 77,
                                {.output_every = 200, .keep_paths = true});
    auto hist = histogram(st, grid);
    const auto& last = ev.frames.back();
    double l1 = 0.0;
    for (std::size_t i = 0; i < grid.n; ++i) l1 += std::abs(last.p[i] - hist[i]) * grid.h();
    CHECK(l1 < 5e-2);
}

TEST_CASE("density CSV layout", "[fp]") {
    Grid1D grid(0.0, 1.6, 16);
    std::ostringstream os;
    write_density_csv(os, {delta_initial(grid, 0.8)});
    const auto s = os.str();
    CHECK(s.rfind("t,x,p\n0,0.05,", 0) == 0);
    CHECK(std::count(s.begin(), s.end(), '\n') == 17);
}
