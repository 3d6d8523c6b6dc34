#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <random>

#include "vp/chart.hpp"
#include "vp/geometry.hpp"

using namespace vp;

namespace {

// Independent free-flight billiard oracle in the unit ball: exact chords and
// quadratic-formula reflections, no shared code with the chart machinery.
struct BallOracle {
    Vec3 x, v;
    int bounces = 0;
    void run(double duration) {
        double left = duration;
        while (left > 1e-15) {
            const double speed = std::sqrt(dot(v, v));
            const Vec3 d = v / speed;
            const double xd = dot(x, d);
            const double t_hit = -xd + std::sqrt(std::max(0.0, xd * xd + 1.0 - dot(x, x)));
            if (t_hit / speed >= left) {
                x += left * v;
                return;
            }
            x += t_hit * d;
            x = x / std::sqrt(dot(x, x));
            const Vec3 n = x;
            v = v - 2.0 * dot(n, v) * n;
            left -= t_hit / speed;
            ++bounces;
        }
    }
};

SurfaceTensors equator_tensors() {
    return ConvexDomain::ball().surface_tensors(ChartId::ZPoles, M_PI / 2, 0.0);
}

}  // namespace

TEST_CASE("specular reflection: axis cases") {
    CHECK(norm(specular_reflect({0, 0, 1}, {1, 2, 3}) - Vec3{1, 2, -3}) == 0.0);
    CHECK(norm(specular_reflect({0, 0, 1}, {1, 2, 0}) - Vec3{1, 2, 0}) == 0.0);
    CHECK(norm(specular_reflect({1, 0, 0}, {5, 0, 0}) - Vec3{-5, 0, 0}) == 0.0);
}

TEST_CASE("specular reflection is an isometry and involution") {
    std::mt19937 rng(4);
    std::normal_distribution<double> g;
    for (int i = 0; i < 20000; ++i) {
        const Vec3 n = normalized({g(rng), g(rng), g(rng)});
        const Vec3 v{10 * g(rng), 10 * g(rng), 10 * g(rng)};
        const Vec3 r = specular_reflect(n, v);
        CHECK(std::abs(norm(r) - norm(v)) <= 1e-12 * std::max(1.0, norm(v)));
        CHECK(norm(specular_reflect(n, r) - v) <= 1e-12 * std::max(1.0, norm(v)));
        // Tangential part unchanged, normal part negated.
        CHECK(std::abs(dot(r, n) + dot(v, n)) <= 1e-12 * std::max(1.0, norm(v)));
    }
}

TEST_CASE("velocity chart at the equator point of the ball") {
    const SurfaceTensors t = equator_tensors();  // u1=(0,0,-1), u2=(0,1,0), n=(1,0,0)
    auto c1 = velocity_chart(t, {-2, 0, 0});
    CHECK(c1.w1 == doctest::Approx(0.0).epsilon(1e-10));
    CHECK(c1.w2 == doctest::Approx(0.0).epsilon(1e-10));
    CHECK(c1.v_perp == doctest::Approx(2.0));
    auto c2 = velocity_chart(t, {0, 1, 0});
    CHECK(c2.w1 == doctest::Approx(0.0).epsilon(1e-10));
    CHECK(c2.w2 == doctest::Approx(1.0));
    CHECK(c2.v_perp == doctest::Approx(0.0).epsilon(1e-12));
    auto c3 = velocity_chart(t, {1, 0, -1});
    CHECK(c3.w1 == doctest::Approx(1.0));
    CHECK(c3.w2 == doctest::Approx(0.0).epsilon(1e-10));
    CHECK(c3.v_perp == doctest::Approx(-1.0));
}

TEST_CASE("velocity chart reconstruction round trip in the tube") {
    const auto dom = ConvexDomain::ball();
    std::mt19937 rng(11);
    std::uniform_real_distribution<double> uth(0.4, M_PI - 0.4), uph(-M_PI, M_PI),
        ud(0.0, dom.delta_tube()), uv(-2, 2);
    for (int i = 0; i < 500; ++i) {
        const ChartCoords c{ChartId::ZPoles, uth(rng), uph(rng), ud(rng)};
        const SurfaceTensors t = dom.surface_tensors(c);
        const Vec3 v{uv(rng), uv(rng), uv(rng)};
        const auto w = velocity_chart(t, v);
        CHECK(norm(velocity_from_chart(t, w.w1, w.w2, w.v_perp) - v) <= 1e-10);
        // Full phase-space round trip through chart_state_of / cartesian_of.
        const Vec3 x = dom.point_from_chart(c);
        const BoundaryChartState s = chart_state_of(dom, x, v);
        const Phase p = cartesian_of(dom, s);
        CHECK(norm(p.x - x) <= 1e-9);
        CHECK(norm(p.v - v) <= 1e-9);
    }
}

TEST_CASE("coefficient_F: field term and curvature term") {
    const SurfaceTensors t = equator_tensors();
    // E with E.n = 1 and no tangential motion: F = E_perp = -1.
    CHECK(coefficient_F(t, {1, 0, 0}, 0, 0, 0) == doctest::Approx(-1.0));
    // Tangential motion adds b1 w1^2 = -|u1|^2 w1^2 = -1 at the equator.
    CHECK(coefficient_F(t, {1, 0, 0}, 1, 0, 0) == doctest::Approx(-2.0));
    // Purely tangential field and no motion: both terms vanish.
    CHECK(coefficient_F(t, {0, 0.5, -0.3}, 0, 0, 0) == doctest::Approx(0.0).epsilon(1e-10));
}

TEST_CASE("coefficient_F is negative whenever E.n >= h_min > 0") {
    const auto dom = ConvexDomain::ellipsoid({2, 1, 1});
    std::mt19937 rng(5);
    std::uniform_real_distribution<double> uth(0.4, M_PI - 0.4), uph(-M_PI, M_PI), uw(-3, 3),
        uh(0.01, 2.0), ut(-1, 1), ux(0.0, dom.delta_tube());
    for (int i = 0; i < 2000; ++i) {
        const SurfaceTensors t = dom.surface_tensors(ChartId::XPoles, uth(rng), uph(rng));
        // Field with outward normal component h > 0 plus arbitrary tangential part.
        const Vec3 E = uh(rng) * t.n + ut(rng) * t.u1 + ut(rng) * t.u2;
        CHECK(coefficient_F(t, E, uw(rng), uw(rng), ux(rng)) < 0.0);
    }
}

TEST_CASE("coefficient_sigma: vanishing and field-only cases") {
    const SurfaceTensors t = equator_tensors();
    auto s0 = coefficient_sigma(t, {0, 0, 0}, 0, 0, 0, 0);
    CHECK(s0[0] == doctest::Approx(0.0));
    CHECK(s0[1] == doctest::Approx(0.0));
    // E = 2 u1: only the field term survives.
    const Vec3 E = 2.0 * t.u1;
    auto s1 = coefficient_sigma(t, E, 0, 0, 0, 0);
    CHECK(s1[0] == doctest::Approx(2.0));
    CHECK(s1[1] == doctest::Approx(0.0).epsilon(1e-10));
}

TEST_CASE("free chart flow keeps a great circle on the ball") {
    // Equatorial chord: mu1 = pi/2, w1 = 0 are invariant under the chart flow.
    const auto dom = ConvexDomain::ball();
    BoundaryChartState s;
    s.chart = ChartId::ZPoles;
    s.mu1 = M_PI / 2;
    s.mu2 = 0.2;
    s.x_perp = 0.05;
    s.w1 = 0.0;
    s.w2 = 0.9;
    s.v_perp = -0.4;
    const BoundaryChartState end = chart_integrate(dom, s, 0.0, 0.5, 1e-3, nullptr);
    CHECK(std::abs(end.mu1 - M_PI / 2) < 1e-8);
    CHECK(std::abs(end.w1) < 1e-8);
    CHECK(end.bounce_count >= 1);
}

TEST_CASE("alpha-beta coordinates: direct formulas and inverse") {
    BoundaryChartState s;
    s.x_perp = 0.1;
    s.v_perp = 0.0;
    s.bounce_count = 0;
    const AlphaBeta ab = alpha_beta(s, -2.0);
    CHECK(ab.alpha == doctest::Approx(0.2));
    CHECK(ab.beta == doctest::Approx(M_PI));

    BoundaryChartState w0;  // leaving the wall: v_perp = +sqrt(2 alpha)
    w0.x_perp = 0.0;
    w0.v_perp = std::sqrt(2.0 * 0.3);
    CHECK(alpha_beta(w0, -1.0).beta == doctest::Approx(0.0).epsilon(1e-12));
    w0.v_perp = -w0.v_perp;  // hitting the wall
    CHECK(alpha_beta(w0, -1.0).beta == doctest::Approx(2 * M_PI));

    const auto [xp, vp] = alpha_beta_inverse(ab.alpha, ab.beta, 0, -2.0);
    CHECK(xp == doctest::Approx(0.1));
    CHECK(vp == doctest::Approx(0.0).epsilon(1e-12));

    BoundaryChartState sing;
    sing.x_perp = 0.0;
    sing.v_perp = 0.0;
    CHECK_THROWS_AS((void)alpha_beta(sing, -1.0), Error);  // alpha = 0: singular set
    CHECK_THROWS_AS((void)alpha_beta(s, 0.5), Error);      // F0 must be negative
}

TEST_CASE("alpha is equivalent to v_perp^2 + x_perp") {
    std::mt19937 rng(17);
    std::uniform_real_distribution<double> uf(-4.0, -0.25), ux(1e-4, 0.2), uv(-2, 2);
    for (int i = 0; i < 1000; ++i) {
        const double F0 = uf(rng);
        BoundaryChartState s;
        s.x_perp = ux(rng);
        s.v_perp = uv(rng);
        const double alpha = alpha_beta(s, F0).alpha;
        const double base = s.v_perp * s.v_perp + s.x_perp;
        const double c1 = std::min(0.5, -F0), c2 = std::max(0.5, -F0);
        CHECK(alpha >= c1 * base * (1 - 1e-12));
        CHECK(alpha <= c2 * base * (1 + 1e-12));
    }
}

TEST_CASE("chart vector field: direct substitution") {
    const SurfaceTensors t = equator_tensors();
    BoundaryChartState s;
    s.mu1 = M_PI / 2;
    s.x_perp = 0.05;
    s.v_perp = 1.0;
    const ChartDeriv d = chart_vector_field(s, t, {0, 0, 0});
    CHECK(d.mu1 == doctest::Approx(0.0));
    CHECK(d.mu2 == doctest::Approx(0.0));
    CHECK(d.x_perp == doctest::Approx(1.0));
    CHECK(d.w1 == doctest::Approx(0.0));
    CHECK(d.w2 == doctest::Approx(0.0));
    CHECK(d.v_perp == doctest::Approx(0.0));  // w = 0: curvature term vanishes

    // With tangential motion the curvature term alone drives v_perp.
    BoundaryChartState s2 = s;
    s2.w2 = 0.7;
    const ChartDeriv d2 = chart_vector_field(s2, t, {0, 0, 0});
    // b2 w2^2 / (1 - k2 x_perp) = -0.49 / 0.95
    CHECK(d2.v_perp == doctest::Approx(-0.49 / 0.95).epsilon(1e-8));
    CHECK(d2.mu2 == doctest::Approx(0.7 / 0.95).epsilon(1e-8));
}

TEST_CASE("metric degeneracy raises an error") {
    const SurfaceTensors t = equator_tensors();
    BoundaryChartState s;
    s.x_perp = 1.5;  // beyond the focal distance 1/k = 1
    s.w1 = 0.1;
    CHECK_THROWS_AS((void)chart_vector_field(s, t, {0, 0, 0}), Error);
}

TEST_CASE("chart integration reproduces Cartesian billiards through one bounce") {
    // The sign-fixing cross-check: free flight near the wall, one reflection,
    // chart ODE vs the independent Cartesian oracle.
    const auto dom = ConvexDomain::ball();
    std::mt19937 rng(23);
    std::uniform_real_distribution<double> uth(0.6, M_PI - 0.6), uph(-M_PI, M_PI),
        ux(0.01, 0.05), uw(-0.8, 0.8), uv(0.25, 1.0);
    int tested = 0;
    double worst = 0.0;
    for (int i = 0; i < 400 && tested < 20; ++i) {
        BoundaryChartState s;
        s.chart = ChartId::ZPoles;
        s.mu1 = uth(rng);
        s.mu2 = uph(rng);
        s.x_perp = ux(rng);
        s.w1 = uw(rng);
        s.w2 = uw(rng);
        s.v_perp = -uv(rng);  // moving toward the wall
        const Phase p0 = cartesian_of(dom, s);

        BallOracle oracle{p0.x, p0.v};
        const double duration = 0.25;
        oracle.run(duration);
        if (oracle.bounces != 1 || dom.wall_distance(oracle.x) > 0.15) continue;

        const BoundaryChartState end = chart_integrate(dom, s, 0.0, duration, 1e-4, nullptr);
        if (end.bounce_count != 1) continue;
        const Phase p1 = cartesian_of(dom, end);
        worst = std::max(worst, norm(p1.x - oracle.x));
        CHECK(norm(p1.x - oracle.x) <= 1e-6);
        CHECK(norm(p1.v - oracle.v) <= 1e-5);
        ++tested;
    }
    CHECK(tested >= 20);
    MESSAGE("worst position discrepancy: " << worst);
}

TEST_CASE("beta is continuous across a bounce and increases in flight") {
    const auto dom = ConvexDomain::ball();
    BoundaryChartState s;
    s.chart = ChartId::ZPoles;
    s.mu1 = 1.2;
    s.mu2 = -0.4;
    s.x_perp = 0.03;
    s.w1 = 0.3;
    s.w2 = -0.5;
    s.v_perp = -0.6;
    std::vector<ChartTracePoint> trace;
    (void)chart_integrate(dom, s, 0.0, 0.12, 2e-5, nullptr, &trace);
    int crossings = 0;
    for (size_t i = 1; i < trace.size(); ++i) {
        if (trace[i].state.bounce_count != trace[i - 1].state.bounce_count) {
            ++crossings;
            CHECK(std::abs(trace[i].beta - trace[i - 1].beta) < 1e-2);
        } else {
            CHECK(trace[i].beta >= trace[i - 1].beta - 1e-9);
        }
    }
    CHECK(crossings >= 1);
}

TEST_CASE("|d alpha / dt| <= C alpha along near-wall trajectories") {
    const auto dom = ConvexDomain::ball();
    std::mt19937 rng(31);
    std::uniform_real_distribution<double> uth(0.7, M_PI - 0.7), uph(-M_PI, M_PI),
        ux(0.01, 0.08), uw(0.2, 0.9), uv(0.1, 0.6);
    // Radial field with E.n = 0.5 > 0 at the wall keeps F0 strictly negative
    // even for purely radial motion.
    auto field = [](const Vec3& x, double) { return 0.5 * x; };
    for (int i = 0; i < 10; ++i) {
        BoundaryChartState s;
        s.chart = ChartId::ZPoles;
        s.mu1 = uth(rng);
        s.mu2 = uph(rng);
        s.x_perp = ux(rng);
        s.w1 = uw(rng);
        s.w2 = uw(rng);
        s.v_perp = -uv(rng);
        std::vector<ChartTracePoint> trace;
        (void)chart_integrate(dom, s, 0.0, 0.4, 5e-4, field, &trace);
        double C = 0.0;
        for (size_t k = 1; k < trace.size(); ++k) {
            const double ds = trace[k].s - trace[k - 1].s;
            if (ds < 1e-12) continue;
            const double rate =
                std::abs(std::log(trace[k].alpha) - std::log(trace[k - 1].alpha)) / ds;
            C = std::max(C, rate);
        }
        CHECK(C < 50.0);  // finite and of moderate size for clean trajectories
        for (const auto& p : trace) CHECK(p.alpha > 1e-12);
    }
}
