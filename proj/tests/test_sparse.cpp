// SPDX-License-Identifier: Apache-2.0
#include "fdd/sparse.hpp"

#include <doctest.h>

#include <cmath>

using namespace fdd;

namespace {

double rel_err(const CMatrix& a, const CMatrix& b) { return std::sqrt((a - b).frobenius_norm_sq() / b.frobenius_norm_sq()); }

// Observation y = sensing * x for a sparse x given as (index, value) pairs.
CMatrix observe(const CMatrix& sensing, const std::vector<std::pair<std::size_t, cdouble>>& x) {
    CMatrix y(sensing.rows(), 1);
    for (auto [g, a] : x)
        for (std::size_t i = 0; i < sensing.rows(); ++i) y.set(i, 0, y(i, 0) + a * sensing(i, g));
    return y;
}

}  // namespace

TEST_CASE("build_dictionary: grid, atoms and projection") {
    const ArrayConfig cfg{8, 0.5};
    const auto d = build_dictionary(cfg, 65, deg_to_rad(-30.0), deg_to_rad(30.0));
    REQUIRE(d.size() == 65);
    CHECK(d.grid.front() == doctest::Approx(deg_to_rad(-30.0)).epsilon(1e-14));
    CHECK(d.grid.back() == doctest::Approx(deg_to_rad(30.0)).epsilon(1e-14));
    CHECK(std::abs(d.grid[32]) < 1e-15);
    for (std::size_t m = 0; m < 8; ++m) CHECK(std::abs(d.atoms(m, 32) - cdouble(1.0)) < 1e-12);
    for (std::size_t g = 1; g < d.size(); ++g)
        CHECK(std::sin(d.grid[g]) - std::sin(d.grid[g - 1]) == doctest::Approx(std::sin(d.grid[1]) - std::sin(d.grid[0])));

    const auto full = build_dictionary(cfg, 16);
    CHECK(std::sin(full.grid[0]) == doctest::Approx(-1.0));
    CHECK(std::sin(full.grid[15]) == doctest::Approx(-1.0 + 2.0 * 15 / 16));
    for (std::size_t g = 0; g < full.size(); ++g) {
        CHECK(full.atoms.column(g).frobenius_norm_sq() == doctest::Approx(8.0).epsilon(1e-12));
        CHECK(rel_err(full.atoms.column(g), array_response(full.grid[g], cfg)) < 1e-12);
    }

    RandomStream rng(1);
    const auto p = PilotMatrix::random_gaussian(8, 4, 3.0, rng);
    const CMatrix proj = d.project(p);
    REQUIRE(proj.rows() == 4);
    for (std::size_t g = 0; g < d.size(); g += 7) {
        const CMatrix want = cgemm(p.x, array_response(d.grid[g], cfg), true);
        CHECK(rel_err(proj.column(g), want) < 1e-12);
    }
    CHECK_THROWS(build_dictionary(cfg, 1));
}

TEST_CASE("omp: 1-sparse exactness against brute force") {
    const ArrayConfig cfg{16, 0.5};
    const auto d = build_dictionary(cfg, 16);
    const auto pilots = PilotMatrix::orthogonal_dft(16, 10.0);
    const CMatrix s = d.project(pilots);
    RandomStream rng(2);
    for (int t = 0; t < 200; ++t) {
        const std::size_t g = rng.uniform_index(d.size());
        const cdouble a = rng.complex_normal(1.0);
        const CMatrix y = observe(s, {{g, a}});
        const auto r = omp(y, s, 1);
        // Brute force: the single atom whose least-squares fit leaves the smallest residual.
        std::size_t best = 0;
        double best_res = 1e300;
        for (std::size_t c = 0; c < d.size(); ++c) {
            const CMatrix col = s.column(c);
            const cdouble coef = cgemm(col, y, true)(0, 0) / col.frobenius_norm_sq();
            CMatrix fit = col;
            for (std::size_t i = 0; i < col.rows(); ++i) fit.set(i, 0, coef * col(i, 0));
            const double res = (y - fit).frobenius_norm_sq();
            if (res < best_res) best_res = res, best = c;
        }
        REQUIRE(r.support.size() == 1);
        REQUIRE(r.support[0] == best);
        REQUIRE(r.support[0] == g);
        REQUIRE(std::abs(r.coefficients[0] - a) < 1e-10);
    }
}

TEST_CASE("omp: 2-sparse exact recovery with identity sensing") {
    const ArrayConfig cfg{16, 0.5};
    const auto d = build_dictionary(cfg, 16);
    RandomStream rng(3);
    for (int t = 0; t < 200; ++t) {
        const std::size_t g1 = rng.uniform_index(16);
        const std::size_t g2 = (g1 + 4 + rng.uniform_index(9)) % 16;
        const cdouble a1 = rng.complex_normal(1.0), a2 = rng.complex_normal(1.0);
        const CMatrix y = observe(d.atoms, {{g1, a1}, {g2, a2}});
        const auto r = omp(y, d.atoms, 2);
        REQUIRE(r.support.size() == 2);
        for (std::size_t i = 0; i < 2; ++i) {
            const cdouble want = r.support[i] == g1 ? a1 : a2;
            REQUIRE((r.support[i] == g1 || r.support[i] == g2));
            REQUIRE(std::abs(r.coefficients[i] - want) < 1e-8);
        }
        REQUIRE(r.support[0] != r.support[1]);
    }
}

TEST_CASE("omp: zero observation, residual properties, errors") {
    const ArrayConfig cfg{8, 0.5};
    const auto d = build_dictionary(cfg, 64);
    RandomStream rng(4);
    const auto pilots = PilotMatrix::random_gaussian(8, 6, 1.0, rng);
    const CMatrix s = d.project(pilots);

    const auto z = omp(CMatrix(6, 1), s, 2);
    CHECK(z.support.empty());
    CHECK(z.coefficients.empty());

    for (int t = 0; t < 100; ++t) {
        CMatrix y(6, 1);
        for (std::size_t i = 0; i < 6; ++i) y.set(i, 0, rng.complex_normal(1.0));
        const auto r = omp(y, s, 3);
        REQUIRE(r.residual_norms.size() == 4);
        for (std::size_t i = 1; i < r.residual_norms.size(); ++i)
            REQUIRE(r.residual_norms[i] <= r.residual_norms[i - 1] + 1e-12);
        for (std::size_t g : r.support) REQUIRE(std::abs(cgemm(s.column(g), r.residual, true)(0, 0)) < 1e-9);
    }
    CHECK_THROWS(omp(CMatrix(6, 1), s, 7));
    CHECK_THROWS_AS(omp(CMatrix(5, 1), s, 1), ShapeError);
}

TEST_CASE("estimate_channel_omp: noiseless on-grid exactness and lp = 0") {
    const ArrayConfig cfg{16, 0.5};
    const auto d = build_dictionary(cfg, 64);
    const auto pilots = PilotMatrix::orthogonal_dft(16, 10.0);
    const CMatrix proj = d.project(pilots);
    RandomStream rng(5);
    for (int t = 0; t < 100; ++t) {
        const std::size_t g1 = rng.uniform_index(64), g2 = (g1 + 8 + rng.uniform_index(48)) % 64;
        const std::vector<cdouble> gains{rng.complex_normal(1.0), rng.complex_normal(1.0)};
        const std::vector<double> aods{d.grid[g1], d.grid[g2]};
        const CMatrix h = compose_channel(gains, aods, cfg);
        const auto rx = receive_pilots(h, pilots, 0.0, rng);
        const auto est = estimate_channel_omp(rx, pilots, d, 2, &proj);
        REQUIRE(rel_err(est.h, h) < 1e-8);
    }
    CMatrix h0(16, 1);
    h0.set(0, 0, 1.0);
    const auto e0 = estimate_channel_omp(receive_pilots(h0, pilots, 0.0, rng), pilots, d, 0);
    CHECK(e0.h.frobenius_norm_sq() == 0.0);
}

TEST_CASE("estimate_channel_omp: more pilots and finer grids help on average") {
    const ArrayConfig cfg{64, 0.5};
    const ChannelDistribution dist;
    const double p = 10.0;
    RandomStream rng(6);
    const auto d = build_dictionary(cfg, 256);
    const auto p8 = PilotMatrix::random_gaussian(64, 8, p, rng);
    const auto p64 = PilotMatrix::random_gaussian(64, 64, p, rng);
    const CMatrix s8 = d.project(p8), s64 = d.project(p64);
    double n8 = 0.0, n64 = 0.0;
    const int n = 2000;
    for (int t = 0; t < n; ++t) {
        const auto h = sample_channel(dist, cfg, rng);
        n8 += std::pow(rel_err(estimate_channel_omp(receive_pilots(h, p8, 1.0, rng), p8, d, 2, &s8).h, h.h), 2);
        n64 += std::pow(rel_err(estimate_channel_omp(receive_pilots(h, p64, 1.0, rng), p64, d, 2, &s64).h, h.h), 2);
    }
    CHECK(n64 < n8);

    // The doubled grid still contains every coarse atom. Orthogonal pilots with L = M.
    const ArrayConfig small{16, 0.5};
    const auto coarse = build_dictionary(small, 32), fine = build_dictionary(small, 64);
    const auto pilots = PilotMatrix::orthogonal_dft(16, p);
    const CMatrix sc = coarse.project(pilots), sf = fine.project(pilots);
    double ec = 0.0, ef = 0.0;
    for (int t = 0; t < 1000; ++t) {
        const std::vector<cdouble> gains{rng.complex_normal(1.0), rng.complex_normal(1.0)};
        const std::vector<double> aods{coarse.grid[rng.uniform_index(32)], coarse.grid[rng.uniform_index(32)]};
        const CMatrix h = compose_channel(gains, aods, small);
        const auto rx = receive_pilots(h, pilots, 0.0, rng);
        ec += std::pow(rel_err(estimate_channel_omp(rx, pilots, coarse, 2, &sc).h, h), 2);
        ef += std::pow(rel_err(estimate_channel_omp(rx, pilots, fine, 2, &sf).h, h), 2);
    }
    CHECK(ef <= ec);
}
