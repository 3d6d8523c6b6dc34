#include "vp/geometry.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>

namespace vp {

namespace {

// 2x2 symmetric solve: [a b; b c] s = r.
std::array<double, 2> solve_sym2(double a, double b, double c, double r0, double r1,
                                 const char* ctx) {
    const double det = a * c - b * b;
    if (!(std::abs(det) > 1e-14 * std::max(1.0, std::abs(a) * std::abs(c)))) {
        fail(ErrorKind::ChartSingular, std::string("degenerate tangent basis in ") + ctx);
    }
    return {(c * r0 - b * r1) / det, (a * r1 - b * r0) / det};
}

}  // namespace

ConvexDomain ConvexDomain::ball(double delta_tube, double geo_step) {
    ConvexDomain d;
    d.kind_ = DomainKind::UnitBall;
    d.axes_ = {1.0, 1.0, 1.0};
    d.delta_ = delta_tube;
    d.geo_step_ = geo_step;
    if (!(delta_tube > 0.0 && delta_tube < 1.0))
        fail(ErrorKind::Config, "delta_tube must lie in (0, 1) for the unit ball");
    if (!(geo_step > 0.0 && geo_step <= 1e-3))
        fail(ErrorKind::Config, "geo_step must lie in (0, 1e-3]");
    return d;
}

ConvexDomain ConvexDomain::ellipsoid(const Vec3& semi_axes, double delta_tube, double geo_step) {
    ConvexDomain d;
    d.kind_ = DomainKind::Ellipsoid;
    d.axes_ = semi_axes;
    if (!(semi_axes.x > 0 && semi_axes.y > 0 && semi_axes.z > 0))
        fail(ErrorKind::Config, "ellipsoid semi-axes must be positive");
    const double amin = d.min_semi_axis();
    d.delta_ = delta_tube > 0.0 ? delta_tube : 0.2 * amin;
    d.geo_step_ = geo_step;
    if (!(geo_step > 0.0 && geo_step <= 1e-3))
        fail(ErrorKind::Config, "geo_step must lie in (0, 1e-3]");
    // The chart is injective only while 1 - k_max x_perp > 0.
    const Vec3& a = d.axes_;
    const double amax = std::max({a.x, a.y, a.z});
    const double kmax = amax / (amin * amin);
    if (d.delta_ * kmax >= 0.9)
        fail(ErrorKind::Config, "delta_tube too wide for the ellipsoid's maximum curvature");
    return d;
}

double ConvexDomain::min_semi_axis() const { return std::min({axes_.x, axes_.y, axes_.z}); }

double ConvexDomain::implicit(const Vec3& x) const {
    const double px = x.x / axes_.x, py = x.y / axes_.y, pz = x.z / axes_.z;
    return px * px + py * py + pz * pz;
}

Vec3 ConvexDomain::implicit_gradient(const Vec3& x) const {
    return {2.0 * x.x / (axes_.x * axes_.x), 2.0 * x.y / (axes_.y * axes_.y),
            2.0 * x.z / (axes_.z * axes_.z)};
}

Vec3 ConvexDomain::snap_to_surface(const Vec3& x) const {
    const double q = std::sqrt(implicit(x));
    if (!(q > 0.0)) fail(ErrorKind::Integrity, "cannot snap the origin to the surface");
    return x / q;
}

Vec3 ConvexDomain::outer_normal(const Vec3& surface_point) const {
    return normalized(implicit_gradient(surface_point));
}

Vec3 ConvexDomain::boundary_point(ChartId chart, double mu1, double mu2) const {
    const double st = std::sin(mu1), ct = std::cos(mu1);
    const double sp = std::sin(mu2), cp = std::cos(mu2);
    if (chart == ChartId::ZPoles)
        return {axes_.x * st * cp, axes_.y * st * sp, axes_.z * ct};
    return {axes_.x * ct, axes_.y * st * cp, axes_.z * st * sp};
}

Vec3 ConvexDomain::chart_normal(ChartId chart, double mu1, double mu2) const {
    return outer_normal(boundary_point(chart, mu1, mu2));
}

Vec3 ConvexDomain::point_from_chart(const ChartCoords& c) const {
    if (!(c.x_perp >= 0.0 && c.x_perp <= delta_))
        fail(ErrorKind::OutOfTube, "x_perp outside [0, delta_tube]");
    return boundary_point(c.chart, c.mu1, c.mu2) - c.x_perp * chart_normal(c.chart, c.mu1, c.mu2);
}

bool ConvexDomain::chart_is_loc(ChartId chart) const {
    // Meridians/parallels are lines of curvature when the two "equatorial"
    // axes coincide.
    if (chart == ChartId::ZPoles) return axes_.x == axes_.y;
    return axes_.y == axes_.z;
}

ChartId ConvexDomain::select_chart(const Vec3& x) const {
    // Unit-sphere direction of the foot point in scaled coordinates.
    const Vec3 p = normalized(Vec3{x.x / axes_.x, x.y / axes_.y, x.z / axes_.z});
    const double margin_cos = std::cos(pole_margin_);
    const bool z_ok = std::abs(p.z) < margin_cos;
    const bool x_ok = std::abs(p.x) < margin_cos;
    const bool z_loc = chart_is_loc(ChartId::ZPoles);
    const bool x_loc = chart_is_loc(ChartId::XPoles);
    if (z_ok && x_ok) {
        if (z_loc && !x_loc) return ChartId::ZPoles;
        if (x_loc && !z_loc) return ChartId::XPoles;
        return std::abs(p.z) <= std::abs(p.x) ? ChartId::ZPoles : ChartId::XPoles;
    }
    if (z_ok) return ChartId::ZPoles;
    if (x_ok) return ChartId::XPoles;
    fail(ErrorKind::ChartSingular, "point within the pole margin of both charts");
}

ChartCoords ConvexDomain::chart_from_point(const Vec3& x) const {
    const double q = implicit(x);
    if (q > 1.0 + 1e-9) fail(ErrorKind::OutOfTube, "point outside the closed domain");

    // Safe lower bound on the wall distance: |grad q| <= 2/amin, so
    // dist >= (1 - q) amin / 2. Rejecting on it never rejects a tube point.
    const double qs = std::sqrt(std::max(q, 1e-300));
    const double dist_lb = (1.0 - q) * min_semi_axis() / 2.0;
    if (qs < 1e-12 || dist_lb > 1.5 * delta_)
        fail(ErrorKind::OutOfTube, "point too deep inside for the boundary chart");
    const double radial_gap = norm(x) * (1.0 - qs) / std::max(qs, 1e-300);

    ChartCoords c;
    c.chart = select_chart(x);
    // Initial guess from the scaled radial direction.
    const Vec3 p = normalized(Vec3{x.x / axes_.x, x.y / axes_.y, x.z / axes_.z});
    if (c.chart == ChartId::ZPoles) {
        c.mu1 = std::acos(std::clamp(p.z, -1.0, 1.0));
        c.mu2 = std::atan2(p.y, p.x);
    } else {
        c.mu1 = std::acos(std::clamp(p.x, -1.0, 1.0));
        c.mu2 = std::atan2(p.z, p.y);
    }
    c.x_perp = std::max(0.0, radial_gap);

    const double scale = std::max(1.0, norm(x));
    const double h = geo_step_;
    double res_norm = 0.0;
    for (int iter = 0; iter < 50; ++iter) {
        const Vec3 n = chart_normal(c.chart, c.mu1, c.mu2);
        const Vec3 res = boundary_point(c.chart, c.mu1, c.mu2) - c.x_perp * n - x;
        res_norm = norm(res);
        if (res_norm <= 1e-13 * scale) {
            if (c.x_perp > delta_ * (1.0 + 1e-9))
                fail(ErrorKind::OutOfTube, "point beyond the tube width delta");
            c.x_perp = std::max(c.x_perp, 0.0);
            return c;
        }
        // Jacobian columns d(residual)/d(mu1, mu2, x_perp) by centered FD.
        Vec3 J[3];
        for (int k = 0; k < 2; ++k) {
            ChartCoords cp = c, cm = c;
            (k == 0 ? cp.mu1 : cp.mu2) += h;
            (k == 0 ? cm.mu1 : cm.mu2) -= h;
            const Vec3 fp = boundary_point(cp.chart, cp.mu1, cp.mu2) -
                            c.x_perp * chart_normal(cp.chart, cp.mu1, cp.mu2);
            const Vec3 fm = boundary_point(cm.chart, cm.mu1, cm.mu2) -
                            c.x_perp * chart_normal(cm.chart, cm.mu1, cm.mu2);
            J[k] = (fp - fm) / (2.0 * h);
        }
        J[2] = -n;

        // Solve J s = -res (3x3, Cramer).
        const double det = dot(J[0], cross(J[1], J[2]));
        if (std::abs(det) < 1e-14)
            fail(ErrorKind::NewtonFailure, "singular Jacobian in chart inversion");
        const Vec3 r = -1.0 * res;
        const double s0 = dot(r, cross(J[1], J[2])) / det;
        const double s1 = dot(J[0], cross(r, J[2])) / det;
        const double s2 = dot(J[0], cross(J[1], r)) / det;

        // Damped update: halve until the residual decreases.
        double lambda = 1.0;
        for (int back = 0; back < 40; ++back) {
            ChartCoords trial = c;
            trial.mu1 += lambda * s0;
            trial.mu2 += lambda * s1;
            trial.x_perp += lambda * s2;
            const Vec3 tres = boundary_point(trial.chart, trial.mu1, trial.mu2) -
                              trial.x_perp * chart_normal(trial.chart, trial.mu1, trial.mu2) - x;
            if (norm(tres) < res_norm) {
                c = trial;
                break;
            }
            lambda *= 0.5;
            if (back == 39)
                fail(ErrorKind::NewtonFailure, "chart inversion line search stalled");
        }
    }
    fail(ErrorKind::NewtonFailure, "chart inversion did not converge in 50 iterations");
}

SurfaceTensors ConvexDomain::surface_tensors(ChartId chart, double mu1, double mu2) const {
    if (!(mu1 > pole_margin_ && mu1 < M_PI - pole_margin_))
        fail(ErrorKind::ChartSingular, "parameter point within the pole margin");

    // All derivatives use 4th-order 5-point first-difference stencils. The
    // second fundamental form comes from the exact implicit normal via
    // L_ij = -<u_i, dn/dmu_j>, and the Christoffel symbols from metric
    // derivatives, so no second difference of the parametrization (and its
    // eps/h^2 roundoff) ever appears.
    const double h = geo_step_;
    auto d5 = [h](auto&& f) {
        return (-1.0 * f(2.0 * h) + 8.0 * f(h) - 8.0 * f(-h) + f(-2.0 * h)) / (12.0 * h);
    };
    auto xpar = [&](double t, double p) { return boundary_point(chart, t, p); };
    auto npar = [&](double t, double p) { return chart_normal(chart, t, p); };
    auto u_at = [&](double t, double p, int i) {
        return i == 0 ? d5([&](double s) { return xpar(t + s, p); })
                      : d5([&](double s) { return xpar(t, p + s); });
    };

    SurfaceTensors s;
    s.chart = chart;
    s.u1 = u_at(mu1, mu2, 0);
    s.u2 = u_at(mu1, mu2, 1);
    s.n = npar(mu1, mu2);

    const Vec3 dn1 = d5([&](double t) { return npar(mu1 + t, mu2); });
    const Vec3 dn2 = d5([&](double t) { return npar(mu1, mu2 + t); });

    s.g11 = dot(s.u1, s.u1);
    s.g12 = dot(s.u1, s.u2);
    s.g22 = dot(s.u2, s.u2);

    // Second fundamental form w.r.t. the outer normal (negative definite on
    // a convex surface): L_ij = <x_{mu_i mu_j}, n> = -<u_i, dn_j>.
    s.b1 = -dot(s.u1, dn1);
    s.b2 = -dot(s.u2, dn2);
    s.b12 = -dot(s.u1, dn2);
    s.k1 = -s.b1 / s.g11;
    s.k2 = -s.b2 / s.g22;

    // Gamma^l_ij = (1/2) g^{lm} (d_i g_{jm} + d_j g_{im} - d_m g_{ij}).
    auto metric_at = [&](double t, double p) {
        const Vec3 a = u_at(t, p, 0), b = u_at(t, p, 1);
        return std::array<double, 3>{dot(a, a), dot(a, b), dot(b, b)};
    };
    std::array<double, 3> dg[2];
    for (int k = 0; k < 3; ++k) {
        dg[0][k] = d5([&](double t) { return metric_at(mu1 + t, mu2)[k]; });
        dg[1][k] = d5([&](double t) { return metric_at(mu1, mu2 + t)[k]; });
    }
    auto g_of = [&](int i, int j) { return i == 0 ? (j == 0 ? s.g11 : s.g12)
                                                  : (j == 0 ? s.g12 : s.g22); };
    auto dg_of = [&](int d, int i, int j) { return dg[d][i + j]; };  // (0,0)->0,(0,1)->1,(1,1)->2
    const double det = s.g11 * s.g22 - s.g12 * s.g12;
    if (!(det > 1e-20)) fail(ErrorKind::ChartSingular, "degenerate metric in surface_tensors");
    const double ginv[2][2] = {{s.g22 / det, -s.g12 / det}, {-s.g12 / det, s.g11 / det}};
    for (int i = 0; i < 2; ++i) {
        for (int j = i; j < 2; ++j) {
            for (int l = 0; l < 2; ++l) {
                double sum = 0.0;
                for (int m = 0; m < 2; ++m)
                    sum += ginv[l][m] * (dg_of(i, j, m) + dg_of(j, i, m) - dg_of(m, i, j));
                s.christoffel[l][i][j] = s.christoffel[l][j][i] = 0.5 * sum;
            }
        }
    }
    (void)g_of;
    return s;
}

std::array<double, 2> ConvexDomain::principal_curvatures(ChartId chart, double mu1,
                                                         double mu2) const {
    const SurfaceTensors s = surface_tensors(chart, mu1, mu2);
    // Eigenvalues of -I^{-1} II: k^2 - tr k + det = 0 with
    // tr = (g22 L11 - 2 g12 L12 + g11 L22) / det(I) (sign flipped),
    // det = det(II)/det(I).
    const double detI = s.g11 * s.g22 - s.g12 * s.g12;
    const double tr = -(s.g22 * s.b1 - 2.0 * s.g12 * s.b12 + s.g11 * s.b2) / detI;
    const double det = (s.b1 * s.b2 - s.b12 * s.b12) / detI;
    const double disc = std::sqrt(std::max(0.0, tr * tr / 4.0 - det));
    return {tr / 2.0 - disc, tr / 2.0 + disc};
}

RayHit ConvexDomain::ray_boundary_hit(const Vec3& x, const Vec3& d) const {
    // Quadratic along the ray in scaled coordinates: A t^2 + B t + C = 0,
    // C <= 0 inside, so the roots straddle zero and the forward one is unique.
    const Vec3 xs{x.x / axes_.x, x.y / axes_.y, x.z / axes_.z};
    const Vec3 ds{d.x / axes_.x, d.y / axes_.y, d.z / axes_.z};
    const double A = dot(ds, ds);
    const double B = 2.0 * dot(xs, ds);
    const double C = dot(xs, xs) - 1.0;
    if (!(A > 0.0)) fail(ErrorKind::Integrity, "zero direction in ray_boundary_hit");
    const double disc = B * B - 4.0 * A * C;
    if (disc < 0.0) fail(ErrorKind::Integrity, "ray misses the boundary from inside");
    const double sq = std::sqrt(disc);
    // Numerically stable root pair.
    const double qq = -0.5 * (B + (B >= 0.0 ? sq : -sq));
    const double r1 = qq / A;
    const double r2 = (qq != 0.0) ? C / qq : 0.0;
    double t = std::max(r1, r2);
    if (t < 0.0) t = 0.0;
    RayHit hit;
    hit.t_star = t;
    hit.point = snap_to_surface(x + t * d);
    return hit;
}

double ConvexDomain::wall_distance(const Vec3& x) const {
    if (kind_ == DomainKind::UnitBall) return 1.0 - norm(x);
    const double q = implicit(x);
    const double dist_lb = (1.0 - q) * min_semi_axis() / 2.0;
    if (dist_lb > delta_) return dist_lb;  // certainly out of the tube; estimate is enough
    try {
        return chart_from_point(x).x_perp;
    } catch (const Error& e) {
        if (e.kind() == ErrorKind::OutOfTube) return delta_ + dist_lb;
        throw;
    }
}

std::string ConvexDomain::describe() const {
    char buf[128];
    if (kind_ == DomainKind::UnitBall) return "unit ball";
    std::snprintf(buf, sizeof(buf), "ellipsoid(%g, %g, %g)", axes_.x, axes_.y, axes_.z);
    return buf;
}

}  // namespace vp
