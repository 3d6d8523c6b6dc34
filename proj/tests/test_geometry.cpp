#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <random>

#include "vp/geometry.hpp"

using namespace vp;

namespace {

// Deterministic points in the tube of a domain, built from chart parameters.
std::vector<Vec3> tube_points(const ConvexDomain& dom, int count, unsigned seed) {
    std::mt19937 rng(seed);
    std::uniform_real_distribution<double> uth(dom.pole_margin() + 0.05,
                                               M_PI - dom.pole_margin() - 0.05);
    std::uniform_real_distribution<double> uph(-M_PI, M_PI);
    std::uniform_real_distribution<double> ud(0.0, dom.delta_tube());
    std::vector<Vec3> pts;
    pts.reserve(count);
    for (int i = 0; i < count; ++i) {
        ChartCoords c{ChartId::ZPoles, uth(rng), uph(rng), ud(rng)};
        pts.push_back(dom.point_from_chart(c));
    }
    return pts;
}

}  // namespace

TEST_CASE("point_from_chart on the ball: radial geometry") {
    const auto dom = ConvexDomain::ball();
    // mu for x_par = (1,0,0) in the z-poles chart: theta = pi/2, phi = 0.
    const Vec3 p0 = dom.point_from_chart({ChartId::ZPoles, M_PI / 2, 0.0, 0.0});
    CHECK(norm(p0 - Vec3{1, 0, 0}) < 1e-14);
    const Vec3 p1 = dom.point_from_chart({ChartId::ZPoles, M_PI / 2, 0.0, 0.1});
    CHECK(norm(p1 - Vec3{0.9, 0, 0}) < 1e-14);
    // x_par = (0,0,1) is a z-chart pole; the x-poles chart covers it:
    // theta = pi/2, phi = pi/2 gives (0, 0, 1).
    const Vec3 p2 = dom.point_from_chart({ChartId::XPoles, M_PI / 2, M_PI / 2, 0.05});
    CHECK(norm(p2 - Vec3{0, 0, 0.95}) < 1e-14);
    CHECK_THROWS_AS((void)dom.point_from_chart({ChartId::ZPoles, M_PI / 2, 0.0, 0.3}), Error);
    CHECK_THROWS_AS((void)dom.point_from_chart({ChartId::ZPoles, M_PI / 2, 0.0, -0.01}), Error);
}

TEST_CASE("chart_from_point on the ball: radial geometry") {
    const auto dom = ConvexDomain::ball();
    const ChartCoords c = dom.chart_from_point({0.9, 0, 0});
    CHECK(c.x_perp == doctest::Approx(0.1).epsilon(1e-10));
    CHECK(norm(dom.boundary_point(c.chart, c.mu1, c.mu2) - Vec3{1, 0, 0}) < 1e-9);
    const ChartCoords c2 = dom.chart_from_point({0, 0.95, 0});
    CHECK(c2.x_perp == doctest::Approx(0.05).epsilon(1e-10));
    CHECK_THROWS_AS((void)dom.chart_from_point({0.1, 0, 0}), Error);      // deep interior
    CHECK_THROWS_AS((void)dom.chart_from_point({1.5, 0, 0}), Error);      // outside
}

TEST_CASE("chart_from_point on the ellipsoid vs brute-force nearest point") {
    const auto dom = ConvexDomain::ellipsoid({2, 1, 1});
    const Vec3 x{1.9, 0, 0};
    const ChartCoords c = dom.chart_from_point(x);

    // Independent oracle: nearest boundary point over a fine parameter grid
    // (z-poles parametrization covers the whole surface up to poles).
    double best = 1e30;
    Vec3 best_p;
    const int N = 2400;
    for (int i = 1; i < N; ++i) {
        for (int j = 0; j < N; ++j) {
            const double th = M_PI * i / N, ph = 2 * M_PI * j / N - M_PI;
            const Vec3 p = dom.boundary_point(ChartId::ZPoles, th, ph);
            const double d = norm(p - x);
            if (d < best) {
                best = d;
                best_p = p;
            }
        }
    }
    CHECK(c.x_perp == doctest::Approx(best).epsilon(1e-5));
    CHECK(c.x_perp == doctest::Approx(0.1).epsilon(1e-9));
    const Vec3 foot = dom.boundary_point(c.chart, c.mu1, c.mu2);
    CHECK(norm(foot - Vec3{2, 0, 0}) < 1e-7);
    CHECK(norm(best_p - Vec3{2, 0, 0}) < 1e-2);
}

TEST_CASE("chart round trip: 1000 tube points per domain stay within 1e-9") {
    for (const auto& dom : {ConvexDomain::ball(), ConvexDomain::ellipsoid({2, 1, 1}),
                            ConvexDomain::ellipsoid({1.0, 1.3, 0.8})}) {
        double worst = 0.0;
        for (const Vec3& x : tube_points(dom, 1000, 12345)) {
            const ChartCoords c = dom.chart_from_point(x);
            worst = std::max(worst, norm(dom.point_from_chart(c) - x));
        }
        CAPTURE(dom.describe());
        CHECK(worst <= 1e-9);
    }
}

TEST_CASE("surface tensors on the unit ball match the analytic sphere") {
    const auto dom = ConvexDomain::ball();
    // Equator point (1,0,0): theta = pi/2, phi = 0.
    const SurfaceTensors t = dom.surface_tensors(ChartId::ZPoles, M_PI / 2, 0.0);
    CHECK(norm(t.n - Vec3{1, 0, 0}) < 1e-12);
    CHECK(norm(t.u1 - Vec3{0, 0, -1}) < 1e-8);  // d/dtheta
    CHECK(norm(t.u2 - Vec3{0, 1, 0}) < 1e-8);   // d/dphi
    CHECK(t.k1 == doctest::Approx(1.0).epsilon(1e-8));
    CHECK(t.k2 == doctest::Approx(1.0).epsilon(1e-8));
    // b_j = -k_j |u_j|^2 with the outer normal.
    CHECK(t.b1 == doctest::Approx(-1.0).epsilon(1e-8));
    CHECK(t.b2 == doctest::Approx(-1.0).epsilon(1e-8));
    CHECK(std::abs(t.b12) < 1e-8);
    CHECK(std::abs(dot(t.u1, t.n)) < 1e-10);
    CHECK(std::abs(dot(t.u2, t.n)) < 1e-10);

    // Analytic sphere values away from the equator: |u2|^2 = sin^2(theta),
    // Gamma^1_{22} = -sin th cos th, Gamma^2_{12} = cot th.
    const double th = 1.1;
    const SurfaceTensors s = dom.surface_tensors(ChartId::ZPoles, th, 0.7);
    CHECK(s.k1 == doctest::Approx(1.0).epsilon(1e-8));
    CHECK(s.k2 == doctest::Approx(1.0).epsilon(1e-8));
    CHECK(s.g22 == doctest::Approx(std::sin(th) * std::sin(th)).epsilon(1e-8));
    CHECK(s.christoffel[0][1][1] ==
          doctest::Approx(-std::sin(th) * std::cos(th)).epsilon(1e-6));
    CHECK(s.christoffel[1][0][1] == doctest::Approx(std::cos(th) / std::sin(th)).epsilon(1e-6));
    CHECK(std::abs(s.g12) < 1e-10);

    CHECK_THROWS_AS((void)dom.surface_tensors(ChartId::ZPoles, 0.05, 0.0), Error);
}

TEST_CASE("degenerate ellipsoid reproduces the ball tensors") {
    const auto ball = ConvexDomain::ball();
    const auto ell = ConvexDomain::ellipsoid({1, 1, 1});
    for (double th : {0.7, 1.3, 2.2}) {
        for (double ph : {-1.0, 0.4, 2.9}) {
            const SurfaceTensors a = ball.surface_tensors(ChartId::ZPoles, th, ph);
            const SurfaceTensors b = ell.surface_tensors(ChartId::ZPoles, th, ph);
            CHECK(std::abs(a.k1 - b.k1) < 1e-8);
            CHECK(std::abs(a.k2 - b.k2) < 1e-8);
            CHECK(norm(a.u1 - b.u1) < 1e-8);
            CHECK(norm(a.n - b.n) < 1e-12);
            CHECK(std::abs(a.b1 - b.b1) < 1e-8);
        }
    }
}

TEST_CASE("convexity: principal curvatures positive on a 64x64 parameter grid") {
    for (const auto& dom : {ConvexDomain::ball(), ConvexDomain::ellipsoid({2, 1, 1}),
                            ConvexDomain::ellipsoid({1.0, 1.3, 0.8})}) {
        double kmin = 1e30;
        const int N = 64;
        for (int i = 0; i < N; ++i) {
            const double th = dom.pole_margin() + 0.02 +
                              (M_PI - 2 * (dom.pole_margin() + 0.02)) * (i + 0.5) / N;
            for (int j = 0; j < N; ++j) {
                const double ph = -M_PI + 2 * M_PI * (j + 0.5) / N;
                const auto k = dom.principal_curvatures(ChartId::ZPoles, th, ph);
                kmin = std::min({kmin, k[0], k[1]});
            }
        }
        CAPTURE(dom.describe());
        CHECK(kmin > 0.0);
    }
}

TEST_CASE("normal consistency: outer normal points out of the domain") {
    for (const auto& dom : {ConvexDomain::ball(), ConvexDomain::ellipsoid({2, 1, 1})}) {
        std::mt19937 rng(99);
        std::uniform_real_distribution<double> uth(0.3, M_PI - 0.3);
        std::uniform_real_distribution<double> uph(-M_PI, M_PI);
        for (int i = 0; i < 200; ++i) {
            const Vec3 p = dom.boundary_point(ChartId::ZPoles, uth(rng), uph(rng));
            const Vec3 n = dom.outer_normal(p);
            const double eps = 1e-6;
            CHECK(!dom.inside(p + eps * n));
            CHECK(dom.inside(p - eps * n));
        }
    }
}

TEST_CASE("ray_boundary_hit: chord arithmetic on the ball") {
    const auto dom = ConvexDomain::ball();
    auto h1 = dom.ray_boundary_hit({0, 0, 0}, {1, 0, 0});
    CHECK(h1.t_star == doctest::Approx(1.0).epsilon(1e-14));
    CHECK(norm(h1.point - Vec3{1, 0, 0}) < 1e-14);
    auto h2 = dom.ray_boundary_hit({0.5, 0, 0}, {1, 0, 0});
    CHECK(h2.t_star == doctest::Approx(0.5).epsilon(1e-14));
    auto h3 = dom.ray_boundary_hit({0.5, 0, 0}, {-1, 0, 0});
    CHECK(h3.t_star == doctest::Approx(1.5).epsilon(1e-14));
}

TEST_CASE("ray_boundary_hit agrees with the independent sphere formula to 1e-12") {
    const auto dom = ConvexDomain::ball();
    std::mt19937 rng(7);
    std::normal_distribution<double> g;
    std::uniform_real_distribution<double> ur(0.0, 0.97);
    for (int i = 0; i < 2000; ++i) {
        Vec3 d = normalized({g(rng), g(rng), g(rng)});
        Vec3 x = ur(rng) * normalized(Vec3{g(rng), g(rng), g(rng)});
        const auto hit = dom.ray_boundary_hit(x, d);
        // Quadratic-formula sphere intersection: t = -x.d + sqrt((x.d)^2 + 1 - |x|^2).
        const double xd = dot(x, d);
        const double t_ref = -xd + std::sqrt(xd * xd + 1.0 - norm2(x));
        CHECK(std::abs(hit.t_star - t_ref) <= 1e-12);
        CHECK(std::abs(norm(hit.point) - 1.0) <= 1e-12);
    }
}

TEST_CASE("ray hits stay on the ellipsoid surface and are forward-unique") {
    const auto dom = ConvexDomain::ellipsoid({2, 1, 1});
    std::mt19937 rng(21);
    std::normal_distribution<double> g;
    for (int i = 0; i < 500; ++i) {
        Vec3 x{0.3 * g(rng), 0.2 * g(rng), 0.2 * g(rng)};
        if (!dom.inside(x)) continue;
        Vec3 d = normalized({g(rng), g(rng), g(rng)});
        const auto hit = dom.ray_boundary_hit(x, d);
        CHECK(hit.t_star > 0.0);
        CHECK(std::abs(dom.implicit(hit.point) - 1.0) <= 1e-12);
        // Midpoint of the traversed segment stays inside (convexity).
        CHECK(dom.inside(x + 0.5 * hit.t_star * d, 1e-12));
    }
}

TEST_CASE("wall_distance: ball exact, ellipsoid consistent with the chart") {
    const auto ball = ConvexDomain::ball();
    CHECK(ball.wall_distance({0.9, 0, 0}) == doctest::Approx(0.1).epsilon(1e-14));
    const auto ell = ConvexDomain::ellipsoid({2, 1, 1});
    CHECK(ell.wall_distance({1.9, 0, 0}) == doctest::Approx(0.1).epsilon(1e-8));
    CHECK(ell.wall_distance({0, 0.9, 0}) == doctest::Approx(0.1).epsilon(1e-8));
}
