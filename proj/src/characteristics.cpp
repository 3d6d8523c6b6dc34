#include "vp/characteristics.hpp"

#include <algorithm>
#include <cmath>

namespace vp {

void drift_reflect(const ConvexDomain& dom, Vec3& x, Vec3& v, double duration, int& bounces) {
    double left = duration;
    int events = 0;
    while (left > 0.0) {
        const double speed = norm(v);
        if (!(speed > 0.0)) return;
        const Vec3 target = x + left * v;
        if (dom.inside(target, 1e-14)) {
            x = target;
            return;
        }
        const Vec3 dir = v / speed;
        const RayHit hit = dom.ray_boundary_hit(x, dir);
        const double t_hit = hit.t_star / speed;
        if (t_hit >= left) {
            // Endpoint grazes the wall within tolerance; land there.
            x = target;
            if (!dom.inside(x, 0.0)) x = dom.snap_to_surface(x);
            return;
        }
        x = hit.point;
        v = specular_reflect(dom.outer_normal(hit.point), v);
        left -= t_hit;
        ++bounces;
        if (++events > kMaxBouncesPerStep)
            fail(ErrorKind::GrazingCascade,
                 "more than 64 reflections within one step (near-singular dynamics)");
    }
}

namespace {

template <class FieldEval>
TrajectoryState advance_impl(const ConvexDomain& dom, TrajectoryState s, FieldEval&& field,
                             double dt) {
    if (dt == 0.0) return s;
    const double half = dt / 2.0;
    s.v += half * field(s.x);
    if (dt > 0.0) {
        drift_reflect(dom, s.x, s.v, dt, s.bounces);
    } else {
        Vec3 back = -1.0 * s.v;
        drift_reflect(dom, s.x, back, -dt, s.bounces);
        s.v = -1.0 * back;
    }
    s.v += half * field(s.x);
    s.s += dt;
    return s;
}

}  // namespace

TrajectoryState advance(const ConvexDomain& dom, TrajectoryState state, const FieldState& field,
                        double dt) {
    return advance_impl(dom, state, [&](const Vec3& x) { return field_eval(field, x); }, dt);
}

// ---------------------------------------------------------------------------
FieldHistory::FieldHistory(std::shared_ptr<const PoissonGeometry> geo, double t0, double dt)
    : geo_(std::move(geo)), t0_(t0), dt_(dt) {
    if (!(dt_ > 0.0)) fail(ErrorKind::Config, "field history needs dt > 0");
}

void FieldHistory::push(const FieldState& f) {
    Snap s;
    const size_t n = f.ex.size();
    for (int d = 0; d < 3; ++d) s.e[d].resize(n);
    for (size_t i = 0; i < n; ++i) {
        s.e[0][i] = static_cast<float>(f.ex[i]);
        s.e[1][i] = static_cast<float>(f.ey[i]);
        s.e[2][i] = static_cast<float>(f.ez[i]);
    }
    snaps_.push_back(std::move(s));
}

void FieldHistory::push_static(const FieldState& f, int steps) {
    push(f);
    // Duplicate the first snapshot cheaply by copying the float arrays.
    for (int k = 1; k < steps; ++k) snaps_.push_back(snaps_.front());
}

int FieldHistory::step_of(double s) const {
    const double eps = 1e-9 * std::max(1.0, std::abs(s));
    if (s < t0_ - eps || s > t_end() + eps)
        fail(ErrorKind::HistoryMissing, "time outside the stored field history");
    int k = static_cast<int>(std::floor((s - t0_) / dt_));
    return std::clamp(k, 0, steps() - 1);
}

Vec3 FieldHistory::eval_step(const Vec3& x, int k) const {
    const GridLayout& g = geo_->grid;
    const Snap& sn = snaps_[static_cast<size_t>(k)];
    const double gx = (x.x - g.lo.x) / g.h.x - 0.5;
    const double gy = (x.y - g.lo.y) / g.h.y - 0.5;
    const double gz = (x.z - g.lo.z) / g.h.z - 0.5;
    const int i0 = static_cast<int>(std::floor(gx));
    const int j0 = static_cast<int>(std::floor(gy));
    const int k0 = static_cast<int>(std::floor(gz));
    if (!g.in_range(i0, j0, k0) || !g.in_range(i0 + 1, j0 + 1, k0 + 1))
        fail(ErrorKind::OutOfTube, "history eval outside the grid");
    const double fx = gx - i0, fy = gy - j0, fz = gz - k0;
    Vec3 acc{};
    for (int dk = 0; dk < 2; ++dk)
        for (int dj = 0; dj < 2; ++dj)
            for (int di = 0; di < 2; ++di) {
                const double w = (di ? fx : 1 - fx) * (dj ? fy : 1 - fy) * (dk ? fz : 1 - fz);
                const std::int64_t id = g.index(i0 + di, j0 + dj, k0 + dk);
                acc += w * Vec3{sn.e[0][static_cast<size_t>(id)], sn.e[1][static_cast<size_t>(id)],
                                sn.e[2][static_cast<size_t>(id)]};
            }
    return acc;
}

Vec3 FieldHistory::eval(const Vec3& x, double s) const { return eval_step(x, step_of(s)); }

TrajectoryState trace(const ConvexDomain& dom, const Vec3& x, const Vec3& v, double t,
                      double s_target, const FieldHistory& history) {
    TrajectoryState st{x, v, t, 0};
    (void)history.step_of(t);
    (void)history.step_of(s_target);
    const double tiny = 1e-13 * std::max({1.0, std::abs(t), std::abs(s_target)});
    while (std::abs(s_target - st.s) > tiny) {
        const bool fwd = s_target > st.s;
        const int k = history.step_of(st.s + (fwd ? tiny : -tiny));
        const double edge =
            history.t0() + history.dt() * (fwd ? (k + 1) : k);
        double seg_end = fwd ? std::min(s_target, edge) : std::max(s_target, edge);
        if (std::abs(seg_end - st.s) <= tiny) seg_end = s_target;  // at a boundary already
        const double dt = seg_end - st.s;
        st = advance_impl(dom, st, [&](const Vec3& p) { return history.eval_step(p, k); }, dt);
        st.s = seg_end;  // keep boundaries exact
    }
    return st;
}

double liouville_check(const ConvexDomain& dom, const FieldState& field, const Phase& base,
                       double eps, double dt) {
    // Vertices: base and base + eps e_i over the six phase directions.
    TrajectoryState verts[7];
    for (int i = 0; i < 7; ++i) {
        verts[i] = {base.x, base.v, 0.0, 0};
        if (i >= 1 && i <= 3) verts[i].x[i - 1] += eps;
        if (i >= 4) verts[i].v[i - 4] += eps;
        if (!dom.inside(verts[i].x, 1e-12))
            fail(ErrorKind::ClusterSplit, "liouville cluster does not fit inside the domain");
    }
    for (auto& v : verts) v = advance(dom, v, field, dt);
    for (int i = 1; i < 7; ++i)
        if (verts[i].bounces != verts[0].bounces)
            fail(ErrorKind::ClusterSplit,
                 "liouville cluster straddles a reflection (retry with smaller eps)");

    // Volume ratio = |det(edges)| / eps^6 (initial simplex volume factor 1/6!
    // cancels in the ratio).
    double m[6][6];
    for (int i = 0; i < 6; ++i) {
        const Vec3 dx = verts[i + 1].x - verts[0].x;
        const Vec3 dv = verts[i + 1].v - verts[0].v;
        m[i][0] = dx.x;
        m[i][1] = dx.y;
        m[i][2] = dx.z;
        m[i][3] = dv.x;
        m[i][4] = dv.y;
        m[i][5] = dv.z;
    }
    // Gaussian elimination with partial pivoting.
    double det = 1.0;
    for (int c = 0; c < 6; ++c) {
        int piv = c;
        for (int r = c + 1; r < 6; ++r)
            if (std::abs(m[r][c]) > std::abs(m[piv][c])) piv = r;
        if (piv != c) {
            std::swap(m[piv], m[c]);
            det = -det;
        }
        if (m[c][c] == 0.0) return 0.0;
        det *= m[c][c];
        for (int r = c + 1; r < 6; ++r) {
            const double f = m[r][c] / m[c][c];
            for (int cc = c; cc < 6; ++cc) m[r][cc] -= f * m[c][cc];
        }
    }
    double ratio = std::abs(det);
    for (int i = 0; i < 6; ++i) ratio /= eps;
    return ratio;
}

// Instantiate the history-driven advance for transport replays.
TrajectoryState advance_with_history(const ConvexDomain& dom, TrajectoryState s,
                                     const FieldHistory& history, int step, double dt) {
    return advance_impl(dom, s, [&](const Vec3& p) { return history.eval_step(p, step); }, dt);
}

}  // namespace vp
