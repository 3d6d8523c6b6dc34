#include "vp/chart.hpp"

#include <cmath>

namespace vp {

namespace {

std::array<double, 2> gram_solve(const SurfaceTensors& t, double r1, double r2, const char* ctx) {
    const double det = t.g11 * t.g22 - t.g12 * t.g12;
    if (!(det > 1e-20 * std::max(1.0, t.g11 * t.g22)))
        fail(ErrorKind::ChartSingular, std::string("degenerate tangent basis in ") + ctx);
    return {(t.g22 * r1 - t.g12 * r2) / det, (t.g11 * r2 - t.g12 * r1) / det};
}

double metric_or_fail(const SurfaceTensors& t, int j, double x_perp) {
    const double m = t.metric_factor(j, x_perp);
    if (!(m > 0.0))
        fail(ErrorKind::MetricDegenerate, "1 - k_j x_perp <= 0: point beyond the focal caustic");
    return m;
}

}  // namespace

VelocityChart velocity_chart(const SurfaceTensors& t, const Vec3& v) {
    VelocityChart out;
    out.v_perp = -dot(v, t.n);
    const Vec3 v_tan = v + out.v_perp * t.n;
    const auto w = gram_solve(t, dot(v_tan, t.u1), dot(v_tan, t.u2), "velocity_chart");
    out.w1 = w[0];
    out.w2 = w[1];
    return out;
}

Vec3 velocity_from_chart(const SurfaceTensors& t, double w1, double w2, double v_perp) {
    return w1 * t.u1 + w2 * t.u2 - v_perp * t.n;
}

std::array<double, 2> field_tangential(const SurfaceTensors& t, const Vec3& E) {
    const Vec3 E_tan = E - dot(E, t.n) * t.n;
    return gram_solve(t, dot(E_tan, t.u1), dot(E_tan, t.u2), "field_tangential");
}

double coefficient_F(const SurfaceTensors& t, const Vec3& E, double w1, double w2,
                     double x_perp) {
    const double m1 = metric_or_fail(t, 0, x_perp);
    const double m2 = metric_or_fail(t, 1, x_perp);
    return field_normal(t, E) + w1 * w1 * t.b1 / m1 + w2 * w2 * t.b2 / m2;
}

std::array<double, 2> coefficient_sigma(const SurfaceTensors& t, const Vec3& E, double w1,
                                        double w2, double v_perp, double x_perp) {
    const double m[2] = {metric_or_fail(t, 0, x_perp), metric_or_fail(t, 1, x_perp)};
    const double w[2] = {w1, w2};
    const double k[2] = {t.k1, t.k2};
    const auto Et = field_tangential(t, E);
    std::array<double, 2> sigma{};
    for (int i = 0; i < 2; ++i) {
        double chr = 0.0;
        for (int jj = 0; jj < 2; ++jj)
            for (int ll = 0; ll < 2; ++ll) chr += t.christoffel[i][jj][ll] * w[jj] * w[ll] / m[jj];
        sigma[i] = Et[i] + v_perp * w[i] * k[i] / m[i] - chr;
    }
    return sigma;
}

AlphaBeta alpha_beta(const BoundaryChartState& s, double F0) {
    if (!(F0 < 0.0)) fail(ErrorKind::OutOfRegime, "alpha_beta requires F(t,0) < 0");
    AlphaBeta ab;
    ab.alpha = s.v_perp * s.v_perp / 2.0 - F0 * s.x_perp;
    if (!(ab.alpha > 0.0))
        fail(ErrorKind::SingularSet, "alpha = 0: phase point on the singular set");
    ab.beta = 2.0 * M_PI * s.bounce_count + M_PI * (1.0 - s.v_perp / std::sqrt(2.0 * ab.alpha));
    return ab;
}

std::pair<double, double> alpha_beta_inverse(double alpha, double beta, int bounce_count,
                                             double F0) {
    if (!(F0 < 0.0)) fail(ErrorKind::OutOfRegime, "alpha_beta_inverse requires F(t,0) < 0");
    if (!(alpha > 0.0)) fail(ErrorKind::SingularSet, "alpha must be positive");
    const double phase = 1.0 - (beta - 2.0 * M_PI * bounce_count) / M_PI;
    const double x_perp = -alpha / F0 * (1.0 - phase * phase);
    const double v_perp = std::sqrt(2.0 * alpha) * phase;
    return {x_perp, v_perp};
}

ChartDeriv chart_vector_field(const BoundaryChartState& s, const SurfaceTensors& t,
                              const Vec3& E) {
    ChartDeriv d;
    d.mu1 = s.w1 / metric_or_fail(t, 0, s.x_perp);
    d.mu2 = s.w2 / metric_or_fail(t, 1, s.x_perp);
    d.x_perp = s.v_perp;
    const auto sigma = coefficient_sigma(t, E, s.w1, s.w2, s.v_perp, s.x_perp);
    d.w1 = sigma[0];
    d.w2 = sigma[1];
    d.v_perp = coefficient_F(t, E, s.w1, s.w2, s.x_perp);
    return d;
}

BoundaryChartState chart_state_of(const ConvexDomain& dom, const Vec3& x, const Vec3& v,
                                  int bounce_count) {
    const ChartCoords c = dom.chart_from_point(x);
    const SurfaceTensors t = dom.surface_tensors(c);
    const VelocityChart vc = velocity_chart(t, v);
    BoundaryChartState s;
    s.chart = c.chart;
    s.mu1 = c.mu1;
    s.mu2 = c.mu2;
    s.x_perp = c.x_perp;
    s.w1 = vc.w1;
    s.w2 = vc.w2;
    s.v_perp = vc.v_perp;
    s.bounce_count = bounce_count;
    return s;
}

Phase cartesian_of(const ConvexDomain& dom, const BoundaryChartState& s) {
    ChartCoords c{s.chart, s.mu1, s.mu2, s.x_perp};
    const SurfaceTensors t = dom.surface_tensors(c);
    Phase p;
    p.x = dom.point_from_chart(c);
    p.v = velocity_from_chart(t, s.w1, s.w2, s.v_perp);
    return p;
}

namespace {

ChartDeriv eval_rhs(const ConvexDomain& dom, const BoundaryChartState& s, double time,
                    const FieldFn& field) {
    const SurfaceTensors t = dom.surface_tensors(s.chart, s.mu1, s.mu2);
    Vec3 E{};
    if (field) {
        const Vec3 x = dom.point_from_chart({s.chart, s.mu1, s.mu2, std::max(s.x_perp, 0.0)});
        E = field(x, time);
    }
    return chart_vector_field(s, t, E);
}

BoundaryChartState apply(const BoundaryChartState& s, const ChartDeriv& d, double h) {
    BoundaryChartState r = s;
    r.mu1 += h * d.mu1;
    r.mu2 += h * d.mu2;
    r.x_perp += h * d.x_perp;
    r.w1 += h * d.w1;
    r.w2 += h * d.w2;
    r.v_perp += h * d.v_perp;
    return r;
}

BoundaryChartState rk4_step(const ConvexDomain& dom, const BoundaryChartState& s, double time,
                            double h, const FieldFn& field) {
    const ChartDeriv k1 = eval_rhs(dom, s, time, field);
    const ChartDeriv k2 = eval_rhs(dom, apply(s, k1, h / 2), time + h / 2, field);
    const ChartDeriv k3 = eval_rhs(dom, apply(s, k2, h / 2), time + h / 2, field);
    const ChartDeriv k4 = eval_rhs(dom, apply(s, k3, h), time + h, field);
    BoundaryChartState r = s;
    r.mu1 += h / 6 * (k1.mu1 + 2 * k2.mu1 + 2 * k3.mu1 + k4.mu1);
    r.mu2 += h / 6 * (k1.mu2 + 2 * k2.mu2 + 2 * k3.mu2 + k4.mu2);
    r.x_perp += h / 6 * (k1.x_perp + 2 * k2.x_perp + 2 * k3.x_perp + k4.x_perp);
    r.w1 += h / 6 * (k1.w1 + 2 * k2.w1 + 2 * k3.w1 + k4.w1);
    r.w2 += h / 6 * (k1.w2 + 2 * k2.w2 + 2 * k3.w2 + k4.w2);
    r.v_perp += h / 6 * (k1.v_perp + 2 * k2.v_perp + 2 * k3.v_perp + k4.v_perp);
    return r;
}

}  // namespace

BoundaryChartState chart_integrate(const ConvexDomain& dom, BoundaryChartState s0, double t0,
                                   double t1, double dt, const FieldFn& field,
                                   std::vector<ChartTracePoint>* trace) {
    if (!(dt > 0.0)) fail(ErrorKind::Config, "chart_integrate needs dt > 0");
    double time = t0;
    auto record = [&](const BoundaryChartState& s) {
        if (!trace) return;
        ChartTracePoint p;
        p.s = time;
        p.state = s;
        const SurfaceTensors t = dom.surface_tensors(s.chart, s.mu1, s.mu2);
        Vec3 E{};
        if (field) E = field(dom.point_from_chart({s.chart, s.mu1, s.mu2, s.x_perp}), time);
        const double F0 = coefficient_F(t, E, s.w1, s.w2, 0.0);
        const AlphaBeta ab = alpha_beta(s, F0);
        p.alpha = ab.alpha;
        p.beta = ab.beta;
        trace->push_back(p);
    };
    record(s0);
    const int start_bounces = s0.bounce_count;
    while (time < t1 - 1e-15) {
        const double h = std::min(dt, t1 - time);
        BoundaryChartState next = rk4_step(dom, s0, time, h, field);
        if (next.x_perp < 0.0) {
            // Locate the wall crossing by bisection on the step fraction.
            double lo = 0.0, hi = h;
            for (int it = 0; it < 80 && (hi - lo) > 1e-16 * dt; ++it) {
                const double mid = (lo + hi) / 2;
                const BoundaryChartState probe = rk4_step(dom, s0, time, mid, field);
                (probe.x_perp >= 0.0 ? lo : hi) = mid;
            }
            BoundaryChartState at_wall = rk4_step(dom, s0, time, lo, field);
            at_wall.x_perp = 0.0;
            at_wall.v_perp = -at_wall.v_perp;  // specular reflection in chart form
            at_wall.bounce_count += 1;
            time += lo;
            s0 = at_wall;
            if (s0.bounce_count - start_bounces > 10000)
                fail(ErrorKind::GrazingCascade, "chart integration: reflection cascade");
        } else {
            time += h;
            s0 = next;
        }
        record(s0);
    }
    return s0;
}

}  // namespace vp
