#pragma once

#include <array>
#include <string>

#include "vp/error.hpp"
#include "vp/vec.hpp"

namespace vp {

enum class DomainKind { UnitBall, Ellipsoid };

// Two overlapping spherical-type parametrizations; each degenerates at a pair
// of antipodal poles, so the caller picks the chart whose pole margin holds.
//   ZPoles: x(th, ph) = (a sin th cos ph, b sin th sin ph, c cos th)
//   XPoles: x(th, ph) = (a cos th, b sin th cos ph, c sin th sin ph)
// For spheroids the chart with poles on the distinct axis parametrizes along
// lines of curvature, which makes the cross term of the second fundamental
// form vanish; that chart is preferred for tensor evaluations.
enum class ChartId { ZPoles, XPoles };

struct ChartCoords {
    ChartId chart = ChartId::ZPoles;
    double mu1 = 0.0;     // polar angle in (0, pi)
    double mu2 = 0.0;     // azimuthal angle
    double x_perp = 0.0;  // wall distance, >= 0 inside
};

// Surface data at a parameter point, computed by nested centered differences
// of the parametrization (step geo_step) with the outer normal taken from the
// exact implicit-function gradient.
//
// Sign conventions (fixed by the Cartesian billiard cross-check):
//   k1, k2 > 0   principal (normal) curvatures of the convex surface,
//   b1, b2 < 0   second-fundamental-form coefficients w.r.t. the OUTER
//                normal, b_j = -k_j |u_j|^2,
//   metric factor along mu_j at wall distance x_perp: 1 - k_j x_perp.
struct SurfaceTensors {
    ChartId chart = ChartId::ZPoles;
    Vec3 u1, u2;     // tangent basis dx/dmu_i
    Vec3 n;          // outer unit normal
    double k1 = 0.0, k2 = 0.0;
    double b1 = 0.0, b2 = 0.0;
    double b12 = 0.0;                 // cross coefficient; ~0 in LOC charts
    double g11 = 0.0, g12 = 0.0, g22 = 0.0;  // first fundamental form
    double christoffel[2][2][2] = {};        // [l][i][j], symmetric in (i,j)

    double metric_factor(int j, double x_perp) const {
        return 1.0 - (j == 0 ? k1 : k2) * x_perp;
    }
};

struct RayHit {
    double t_star = 0.0;  // arc length along the unit direction
    Vec3 point;           // boundary point, snapped onto the surface
};

class ConvexDomain {
  public:
    ConvexDomain() = default;  // unit ball with default tube parameters

    static ConvexDomain ball(double delta_tube = 0.2, double geo_step = 2.5e-4);
    static ConvexDomain ellipsoid(const Vec3& semi_axes, double delta_tube = -1.0,
                                  double geo_step = 2.5e-4);

    DomainKind kind() const { return kind_; }
    const Vec3& semi_axes() const { return axes_; }
    double delta_tube() const { return delta_; }
    double geo_step() const { return geo_step_; }
    double pole_margin() const { return pole_margin_; }
    double min_semi_axis() const;

    // Implicit form q(x) = x^2/a^2 + y^2/b^2 + z^2/c^2; inside iff q <= 1.
    double implicit(const Vec3& x) const;
    Vec3 implicit_gradient(const Vec3& x) const;
    bool inside(const Vec3& x, double tol = 0.0) const { return implicit(x) <= 1.0 + tol; }

    // Snap a point near the surface onto it by radial rescaling (exact for
    // the supported quadrics).
    Vec3 snap_to_surface(const Vec3& x) const;
    Vec3 outer_normal(const Vec3& surface_point) const;

    Vec3 boundary_point(ChartId chart, double mu1, double mu2) const;
    Vec3 chart_normal(ChartId chart, double mu1, double mu2) const;

    // x = x_par(mu) - x_perp n(mu). Throws for x_perp outside [0, delta].
    Vec3 point_from_chart(const ChartCoords& c) const;

    // Inverse chart via damped Newton. Throws OutOfTube / NewtonFailure.
    ChartCoords chart_from_point(const Vec3& x) const;

    SurfaceTensors surface_tensors(ChartId chart, double mu1, double mu2) const;
    SurfaceTensors surface_tensors(const ChartCoords& c) const {
        return surface_tensors(c.chart, c.mu1, c.mu2);
    }

    // Principal curvatures at a parameter point from the full shape operator
    // (handles charts that are not lines-of-curvature); positive for convex.
    std::array<double, 2> principal_curvatures(ChartId chart, double mu1, double mu2) const;

    // First boundary intersection of x + t d, d a unit vector, x inside.
    RayHit ray_boundary_hit(const Vec3& x, const Vec3& d) const;

    // Distance to the wall. Exact for the ball; Newton-based in the tube for
    // ellipsoids, conservative estimate outside it.
    double wall_distance(const Vec3& x) const;

    // Chart whose pole margin is satisfied for the given surface direction,
    // preferring the lines-of-curvature chart when one exists.
    ChartId select_chart(const Vec3& x) const;
    bool chart_is_loc(ChartId chart) const;

    std::string describe() const;

  private:

    DomainKind kind_ = DomainKind::UnitBall;
    Vec3 axes_{1.0, 1.0, 1.0};
    double delta_ = 0.2;
    double geo_step_ = 2.5e-4;
    double pole_margin_ = 0.2;  // radians kept clear of each chart pole
};

// v* = v - 2 (n.v) n, |n| = 1. Isometry and involution.
inline Vec3 specular_reflect(const Vec3& n, const Vec3& v) {
    return v - 2.0 * dot(n, v) * n;
}

}  // namespace vp
