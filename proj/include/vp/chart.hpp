#pragma once

#include <array>
#include <functional>

#include "vp/geometry.hpp"
#include "vp/vec.hpp"

namespace vp {

// Near-wall phase-space coordinates (mu1, mu2, x_perp, w1, w2, v_perp):
//   x = x_par(mu) - x_perp n(mu),   v = w1 u1 + w2 u2 - v_perp n,
// so v_perp = -v.n and x_perp grows toward the interior. H counts bounces.
struct BoundaryChartState {
    ChartId chart = ChartId::ZPoles;
    double mu1 = 0.0, mu2 = 0.0;
    double x_perp = 0.0;
    double w1 = 0.0, w2 = 0.0;
    double v_perp = 0.0;
    int bounce_count = 0;
};

struct VelocityChart {
    double w1 = 0.0, w2 = 0.0, v_perp = 0.0;
};

struct AlphaBeta {
    double alpha = 0.0;
    double beta = 0.0;
};

// Time derivative of (mu1, mu2, x_perp, w1, w2, v_perp).
struct ChartDeriv {
    double mu1 = 0.0, mu2 = 0.0, x_perp = 0.0, w1 = 0.0, w2 = 0.0, v_perp = 0.0;
};

// Decompose v = w1 u1 + w2 u2 - v_perp n. Throws on a degenerate basis.
VelocityChart velocity_chart(const SurfaceTensors& t, const Vec3& v);
Vec3 velocity_from_chart(const SurfaceTensors& t, double w1, double w2, double v_perp);

// Tangential field components of E = E1 u1 + E2 u2 - E_perp n.
std::array<double, 2> field_tangential(const SurfaceTensors& t, const Vec3& E);
inline double field_normal(const SurfaceTensors& t, const Vec3& E) { return -dot(E, t.n); }

// F = E_perp + sum_j w_j^2 b_j / (1 - k_j x_perp). Negative whenever
// E.n > 0 on a convex wall. Throws MetricDegenerate if 1 - k_j x_perp <= 0.
double coefficient_F(const SurfaceTensors& t, const Vec3& E, double w1, double w2, double x_perp);

// sigma_i = E_i + v_perp w_i k_i/(1 - k_i x_perp)
//           - sum_{j,l} Gamma^i_{jl} w_j w_l / (1 - k_j x_perp).
std::array<double, 2> coefficient_sigma(const SurfaceTensors& t, const Vec3& E, double w1,
                                        double w2, double v_perp, double x_perp);

// alpha = v_perp^2/2 - F0 x_perp, beta - 2 pi H = pi (1 - v_perp/sqrt(2 alpha)).
// Requires F0 < 0; alpha = 0 is the singular set and raises an error.
AlphaBeta alpha_beta(const BoundaryChartState& s, double F0);
// Inverse pair (x_perp, v_perp) from (alpha, beta, H, F0).
std::pair<double, double> alpha_beta_inverse(double alpha, double beta, int bounce_count,
                                             double F0);

// d/dt (mu, w, x_perp, v_perp) for a frozen field vector at the point.
ChartDeriv chart_vector_field(const BoundaryChartState& s, const SurfaceTensors& t, const Vec3& E);

// RK4 integration of the chart equations with reflection events at
// x_perp = 0 (v_perp flips, H increments). Used to cross-validate the
// Cartesian integrator and to probe d(alpha)/dt along trajectories.
// The field function receives the Cartesian point and the current time.
using FieldFn = std::function<Vec3(const Vec3&, double)>;

struct ChartTracePoint {
    double s = 0.0;
    BoundaryChartState state;
    double alpha = 0.0;
    double beta = 0.0;
};

BoundaryChartState chart_integrate(const ConvexDomain& dom, BoundaryChartState s0, double t0,
                                   double t1, double dt, const FieldFn& field,
                                   std::vector<ChartTracePoint>* trace = nullptr);

// Convenience: full chart state of a Cartesian phase point in the tube.
BoundaryChartState chart_state_of(const ConvexDomain& dom, const Vec3& x, const Vec3& v,
                                  int bounce_count = 0);
Phase cartesian_of(const ConvexDomain& dom, const BoundaryChartState& s);

}  // namespace vp
