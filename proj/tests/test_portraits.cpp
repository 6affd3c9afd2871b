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
#include "stodyn/portraits.hpp"

using namespace stodyn;
using Catch::Approx;

namespace {

std::vector<DensityField> solve(const SystemSpec& sys, const Grid1D& grid, double x0, double T, double dt = 0.01,
                                std::size_t every = 10) {
    auto g = build_adjoint_generator(sys, grid);
    return evolve_density(g, delta_initial(grid, x0), T, dt, {.output_every = every, .normalize_at_end = false}).frames;
}

const Equilibrium* nearest(const PhasePortrait& p, double x) {
    const Equilibrium* best = nullptr;
    for (const auto& e : p.equilibria)
        if (!best || std::abs(e.location - x) < std::abs(best->location - x)) best = &e;
    return best;
}

}  // namespace

TEST_CASE("most probable orbit of Ornstein-Uhlenbeck follows the mean", "[portraits]") {
    Grid1D grid(-4.0, 4.0, 320);
    auto sys = SystemSpec::scalar("-x1", "1", NoiseSpec::brownian());
    auto orbit = most_probable_orbit(solve(sys, grid, 2.0, 3.0), 2.0);
    for (std::size_t k = 0; k < orbit.size(); ++k) {
        INFO("t=" << orbit.times[k]);
        CHECK(std::abs(orbit.at(k) - 2.0 * std::exp(-orbit.times[k])) < grid.h());
    }
    // halving h moves the ridge by less than h
    Grid1D fine(-4.0, 4.0, 640);
    auto refined = most_probable_orbit(solve(sys, fine, 2.0, 3.0), 2.0);
    for (std::size_t k = 0; k < orbit.size(); ++k) CHECK(std::abs(refined.at(k) - orbit.at(k)) < grid.h());
}

TEST_CASE("ridge is invariant under positive rescaling", "[portraits][property]") {
    Grid1D grid(-3.0, 3.0, 240);
    auto seq = solve(SystemSpec::scalar("x1 - x1^3", "0.4", NoiseSpec::brownian()), grid, 0.3, 5.0);
    const auto base = most_probable_orbit(seq, 0.3);
    for (double c : {4.0, 0.125, 1024.0}) {
        auto scaled = seq;
        for (auto& f : scaled)
            for (auto& v : f.p) v *= c;
        CHECK(most_probable_orbit(scaled, 0.3).states == base.states);
    }
    for (double c : {3.7, 1e-3, 12345.6}) {
        auto scaled = seq;
        for (auto& f : scaled)
            for (auto& v : f.p) v *= c;
        auto o = most_probable_orbit(scaled, 0.3);
        for (std::size_t k = 0; k < o.size(); ++k) CHECK(std::abs(o.at(k) - base.at(k)) < 1e-12);
    }
}

TEST_CASE("ties follow the previous ridge point", "[portraits]") {
    Grid1D grid(-2.0, 2.0, 200);
    DensityField f{grid, std::vector<double>(grid.n), 0.0};
    for (std::size_t i = 0; i < grid.n / 2; ++i) {
        const double x = grid.x(i);
        f.p[i] = std::exp(2.0 * (x * x / 2.0 - x * x * x * x / 4.0) / 0.09);
        f.p[grid.n - 1 - i] = f.p[i];
    }
    std::vector<DensityField> seq;
    for (int k = 0; k < 5; ++k) {
        f.t = k;
        seq.push_back(f);
    }
    for (double x : most_probable_orbit(seq, 0.1).component()) CHECK(x == Approx(1.0).margin(grid.h()));
    for (double x : most_probable_orbit(seq, -0.1).component()) CHECK(x == Approx(-1.0).margin(grid.h()));
    seq[2].p.assign(grid.n, 0.0);
    CHECK_THROWS_AS(most_probable_orbit(seq, 0.1), ValidationError);
}

TEST_CASE("mean orbits", "[portraits]") {
    Grid1D grid(-5.0, 5.0, 400);
    SECTION("Ornstein-Uhlenbeck") {
        auto o = mean_orbit(solve(SystemSpec::scalar("-x1", "1", NoiseSpec::brownian()), grid, 2.0, 3.0));
        for (std::size_t k = 0; k < o.size(); ++k) CHECK(std::abs(o.at(k) - 2.0 * std::exp(-o.times[k])) < 1e-2);
    }
    SECTION("symmetric double well from the origin") {
        auto o = mean_orbit(solve(SystemSpec::scalar("x1 - x1^3", "0.5", NoiseSpec::brownian()), grid, 0.0, 5.0));
        for (double x : o.component()) CHECK(std::abs(x) < 1e-2);
    }
    SECTION("pure drift translates") {
        auto o = mean_orbit(solve(SystemSpec::scalar("1", "0.05", NoiseSpec::brownian()), grid, -2.0, 3.0));
        for (std::size_t k = 0; k < o.size(); ++k) CHECK(std::abs(o.at(k) - (-2.0 + o.times[k])) < 1e-2);
    }
    SECTION("translating the grid translates the mean") {
        auto sys = SystemSpec::scalar("-x1", "1", NoiseSpec::brownian());
        auto seq = solve(sys, grid, 1.0, 1.0);
        auto shifted = seq;
        for (auto& f : shifted) {
            f.grid.lo += 0.37;
            f.grid.hi += 0.37;
        }
        auto a = mean_orbit(seq), b = mean_orbit(shifted);
        for (std::size_t k = 0; k < a.size(); ++k) CHECK(std::abs(b.at(k) - a.at(k) - 0.37) < grid.h());
    }
    SECTION("mass loss is refused") {
        auto seq = solve(SystemSpec::scalar("-x1", "1", NoiseSpec::brownian()), grid, 1.0, 0.1);
        for (auto& v : seq.back().p) v *= 0.95;
        CHECK_THROWS_AS(mean_orbit(seq), NumericalError);
    }
}

TEST_CASE("Monte Carlo mean orbit", "[portraits]") {
    auto sys = SystemSpec::scalar("-x1", "1", NoiseSpec::brownian());
    const std::vector<double> x0{2.0};
    SECTION("agrees with the density mean inside its band") {
        Grid1D grid(-5.0, 5.0, 400);
        auto pde = mean_orbit(solve(sys, grid, 2.0, 2.0, 0.01, 20));
        auto mc = mean_orbit_mc(sys, x0, 2.0, 0.01, 20'000, 3, 20);
        REQUIRE(mc.orbit.size() == pde.size());
        for (std::size_t k = 1; k < pde.size(); ++k) CHECK(std::abs(mc.orbit.at(k) - pde.at(k)) < mc.band[k] + 1e-3);
    }
    SECTION("band shrinks like one over root M") {
        auto a = mean_orbit_mc(sys, x0, 1.0, 0.01, 4'000, 4, 100);
        auto b = mean_orbit_mc(sys, x0, 1.0, 0.01, 16'000, 5, 100);
        const double ratio = b.band.back() / a.band.back();
        CHECK(ratio >= 0.45);
        CHECK(ratio <= 0.55);
    }
    SECTION("undefined means are refused") {
        auto heavy = SystemSpec::scalar("-x1", "1", NoiseSpec::stable(0.8, 0.0));
        CHECK_THROWS_AS(mean_orbit_mc(heavy, x0, 1.0, 0.01, 100, 1), ValidationError);
        auto med = median_orbit_mc(heavy, x0, 1.0, 0.01, 2000, 1, 100);
        CHECK(med.orbit.provenance == Provenance::median);
        CHECK(std::abs(med.orbit.states.back() - 2.0 * std::exp(-1.0)) < 0.2);
    }
}

TEST_CASE("most probable equilibria", "[portraits]") {
    PortraitConfig cfg;
    cfg.grid = Grid1D(-2.0, 2.0, 200);
    cfg.horizon = 20.0;
    SECTION("double well") {
        auto p = most_probable_equilibria(SystemSpec::scalar("x1 - x1^3", "0.2", NoiseSpec::brownian()), cfg);
        auto stable = p.locations(EquilibriumKind::stable);
        REQUIRE(stable.size() == 2);
        CHECK(std::abs(stable[0] + 1.0) < 0.05);
        CHECK(std::abs(stable[1] - 1.0) < 0.05);
        const auto* mid = nearest(p, 0.0);
        CHECK(std::abs(mid->location) < 0.1);
        CHECK(mid->kind != EquilibriumKind::stable);
        CHECK(p.provenance == Provenance::most_probable);
        for (const auto& o : p.orbits) CHECK(o.provenance == Provenance::most_probable);

        // doubling the probes never flips stable and unstable
        auto more = cfg;
        more.probes = default_probes(cfg.grid, 32);
        auto q = most_probable_equilibria(SystemSpec::scalar("x1 - x1^3", "0.2", NoiseSpec::brownian()), more);
        for (const auto& e : p.equilibria) {
            const auto* f = nearest(q, e.location);
            if (e.kind == EquilibriumKind::stable) CHECK(f->kind != EquilibriumKind::unstable);
            if (e.kind == EquilibriumKind::unstable) CHECK(f->kind != EquilibriumKind::stable);
        }
    }
    SECTION("Ornstein-Uhlenbeck") {
        auto p = most_probable_equilibria(SystemSpec::scalar("-x1", "1", NoiseSpec::brownian()), cfg);
        REQUIRE(p.equilibria.size() == 1);
        CHECK(p.equilibria[0].kind == EquilibriumKind::stable);
        CHECK(std::abs(p.equilibria[0].location) < cfg.grid.h());
    }
    SECTION("zero noise recovers the fixed points") {
        auto f = [](double x) { return x - x * x * x; };
        auto roots = oracle::roots(f, -1.9, 1.9 - 1e-3);
        auto p = most_probable_equilibria(SystemSpec::scalar("x1 - x1^3", "0", NoiseSpec::brownian()), cfg);
        REQUIRE(p.equilibria.size() == roots.size());
        for (std::size_t i = 0; i < roots.size(); ++i) CHECK(std::abs(p.equilibria[i].location - roots[i]) < 0.02);
        auto m = mean_equilibria(SystemSpec::scalar("x1 - x1^3", "0", NoiseSpec::brownian()), cfg);
        REQUIRE(m.equilibria.size() == roots.size());
        for (std::size_t i = 0; i < roots.size(); ++i) CHECK(std::abs(m.equilibria[i].location - roots[i]) < 0.02);
    }
    SECTION("a short horizon is rejected") {
        auto shorter = cfg;
        shorter.horizon = 0.5;
        CHECK_THROWS_AS(most_probable_equilibria(SystemSpec::scalar("4", "0.3", NoiseSpec::brownian()), shorter),
                        ValidationError);
    }
}

TEST_CASE("mean equilibria differ from most probable ones", "[portraits]") {
    PortraitConfig cfg;
    cfg.grid = Grid1D(-3.0, 3.0, 240);
    cfg.horizon = 100.0;
    auto sys = SystemSpec::scalar("x1 - x1^3", "0.5", NoiseSpec::brownian());
    auto mean = mean_equilibria(sys, cfg);
    REQUIRE(mean.count(EquilibriumKind::stable) == 1);
    CHECK(std::abs(mean.locations(EquilibriumKind::stable)[0]) < 0.05);
    cfg.grid = Grid1D(-6.0, 6.0, 240);
    auto ou = mean_equilibria(SystemSpec::scalar("-x1", "1", NoiseSpec::brownian()), cfg);
    REQUIRE(ou.equilibria.size() == 1);
    CHECK(std::abs(ou.equilibria[0].location) < 1e-6);
}

TEST_CASE("bifurcation scans", "[portraits]") {
    PortraitConfig cfg;
    cfg.grid = Grid1D(-2.0, 2.0, 200);
    cfg.horizon = 100.0;
    auto sys = SystemSpec::scalar("mu*x1 - x1^3", "0.05", NoiseSpec::brownian(), {{"mu", 0.0}});
    auto d = bifurcation_scan(sys, "mu", {-0.2, -0.1, 0.0, 0.1, 0.2}, cfg);
    REQUIRE(d.change_points.size() == 1);
    CHECK(d.change_points[0].count_lower == 1);
    CHECK(d.change_points[0].count_upper == 2);
    CHECK(d.change_points[0].lower >= -0.1);
    CHECK(d.change_points[0].upper <= 0.1);

    auto flat = bifurcation_scan(sys, "mu", {0.5, 0.6, 0.7}, cfg);
    CHECK(flat.change_points.empty());

    CHECK_THROWS_AS(bifurcation_scan(sys, "nu", {0.1, 0.2}, cfg), ValidationError);
    CHECK_THROWS_AS(bifurcation_scan(sys, "mu", {0.2, 0.1}, cfg), ValidationError);

    // a failing value is recorded, not fatal
    auto heavy = SystemSpec::scalar("-x1", "0.3", NoiseSpec::stable(1.5, 0.0));
    cfg.horizon = 20.0;
    auto partial = bifurcation_scan(heavy, "alpha", {1.5, 2.5}, cfg);
    CHECK(partial.errors[0].empty());
    CHECK_FALSE(partial.errors[1].empty());
}

TEST_CASE("experimental kernel density ridge in two dimensions", "[portraits]") {
    SystemSpec s;
    s.dimension = 2;
    s.drift = {expr::parse("-x1"), expr::parse("-2*x2")};
    s.diffusion = {expr::parse("0.5"), expr::parse("0"), expr::parse("0"), expr::parse("0.5")};
    s.noise = NoiseSpec::brownian(2);
    auto st = simulate_ensemble(s, std::vector<double>{2.0, -1.0}, 1.0, 0.01, 1000, 9,
                                {.output_every = 50, .keep_paths = true});
    auto o = most_probable_orbit_kde(st);
    CHECK(std::abs(o.at(o.size() - 1, 0) - 2.0 * std::exp(-1.0)) < 0.15);
    CHECK(std::abs(o.at(o.size() - 1, 1) + std::exp(-2.0)) < 0.15);
}

TEST_CASE("portrait CSV layouts", "[portraits]") {
    Orbit o;
    o.provenance = Provenance::mean;
    const double x = 0.5;
    o.push(0.0, std::span<const double>(&x, 1));
    std::ostringstream a, b, c;
    write_orbits_csv(a, {o});
    CHECK(a.str() == "t,x,provenance\n0,0.5,mean\n");
    write_equilibria_csv(b, {{1.0, EquilibriumKind::stable}}, 0.2);
    CHECK(b.str() == "location,kind,parameter-value\n1,stable,0.2\n");
    BifurcationDiagram d;
    d.values = {0.1};
    d.equilibria = {{{-1.0, EquilibriumKind::unstable}}};
    write_diagram_csv(c, d);
    CHECK(c.str() == "param,location,kind\n0.1,-1,unstable\n");
}
