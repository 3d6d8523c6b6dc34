#include "vp/poisson.hpp"

#include "vp/cutcell.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

#include "vp/parallel.hpp"
#include "vp/transport.hpp"

namespace vp {

namespace {

constexpr double kWetThreshold = 1e-8;   // min wet fraction for a solver unknown
constexpr double kGradThreshold = 0.05;  // min wet fraction to donate gradient stencils

// ---------------------------------------------------------------------------
// Gauss-Legendre nodes/weights on [-1, 1].
void gauss_legendre(int n, std::vector<double>& x, std::vector<double>& w) {
    x.assign(n, 0.0);
    w.assign(n, 0.0);
    for (int i = 0; i < (n + 1) / 2; ++i) {
        double z = std::cos(M_PI * (i + 0.75) / (n + 0.5));
        double pp = 0.0;
        for (int it = 0; it < 100; ++it) {
            double p0 = 1.0, p1 = 0.0;
            for (int j = 0; j < n; ++j) {
                const double p2 = p1;
                p1 = p0;
                p0 = ((2.0 * j + 1.0) * z * p1 - j * p2) / (j + 1.0);
            }
            pp = n * (z * p0 - p1) / (z * z - 1.0);
            const double dz = p0 / pp;
            z -= dz;
            if (std::abs(dz) < 1e-15) break;
        }
        x[i] = -z;
        x[n - 1 - i] = z;
        w[i] = w[n - 1 - i] = 2.0 / ((1.0 - z * z) * pp * pp);
    }
}

// Analytic parametrization tangents (quadrature plumbing; SurfaceTensors
// deliberately sticks to finite differences of the same parametrization).
void chart_tangents(const ConvexDomain& dom, double th, double ph, Vec3& t_th, Vec3& t_ph) {
    const Vec3 a = dom.semi_axes();
    const double st = std::sin(th), ct = std::cos(th), sp = std::sin(ph), cp = std::cos(ph);
    t_th = {a.x * ct * cp, a.y * ct * sp, -a.z * st};
    t_ph = {-a.x * st * sp, a.y * st * cp, 0.0};
}

// Wet area of an axis-aligned rectangle against the interior of the ellipse
// y^2/ay^2 + z^2/az^2 <= 1. Scanline in the angle variable y = ay sin(u), so
// the half-width az cos(u) is smooth and Gauss segments between the clip
// breakpoints integrate to near machine precision (a plain y-scanline keeps
// a sqrt edge singularity whose quadrature error never converges away).
}  // namespace

WetFace ellipse_rect_moments(double ay, double az, double y0, double y1, double z0, double z1) {
    WetFace out;
    if (!(ay > 0.0) || !(az > 0.0)) return out;
    const double ylo = std::max(y0, -ay), yhi = std::min(y1, ay);
    if (!(yhi > ylo)) return out;
    auto u_of = [&](double y) { return std::asin(std::clamp(y / ay, -1.0, 1.0)); };
    std::vector<double> bp{u_of(ylo), u_of(yhi)};
    auto push = [&](double y) {
        if (y > ylo && y < yhi) bp.push_back(u_of(y));
    };
    // Scanlines where the elliptical cap crosses the z-clips.
    for (double zb : {z0, z1}) {
        const double s = 1.0 - (zb / az) * (zb / az);
        if (s > 0.0) {
            const double yc = ay * std::sqrt(s);
            push(-yc);
            push(yc);
        }
    }
    std::sort(bp.begin(), bp.end());
    static const double gx[8] = {-0.9602898564975363, -0.7966664774136267, -0.5255324099163290,
                                 -0.1834346424956498, 0.1834346424956498,  0.5255324099163290,
                                 0.7966664774136267,  0.9602898564975363};
    static const double gw[8] = {0.1012285362903763, 0.2223810344533745, 0.3137066458778873,
                                 0.3626837833783620, 0.3626837833783620, 0.3137066458778873,
                                 0.2223810344533745, 0.1012285362903763};
    double area = 0.0, my = 0.0, mz = 0.0, syy = 0.0, szz = 0.0, syz = 0.0;
    for (size_t s = 0; s + 1 < bp.size(); ++s) {
        const double lo = bp[s], hi = bp[s + 1];
        if (!(hi - lo > 0.0)) continue;
        const double mid = (lo + hi) / 2, half = (hi - lo) / 2;
        for (int g = 0; g < 8; ++g) {
            const double u = mid + half * gx[g];
            const double y = ay * std::sin(u);
            const double zc = az * std::cos(u);
            const double zl = std::max(z0, -zc), zh = std::min(z1, zc);
            if (zh > zl) {
                const double jac = gw[g] * half * ay * std::cos(u);
                const double dz1 = zh - zl;
                const double dz2 = 0.5 * (zh * zh - zl * zl);
                area += jac * dz1;
                my += jac * dz1 * y;
                mz += jac * dz2;
                syy += jac * dz1 * y * y;
                szz += jac * (zh * zh * zh - zl * zl * zl) / 3.0;
                syz += jac * dz2 * y;
            }
        }
    }
    out.area = area;
    out.syy = syy;
    out.szz = szz;
    out.syz = syz;
    if (area > 0.0) {
        out.cy = my / area;
        out.cz = mz / area;
    }
    return out;
}

double ellipse_rect_area(double ay, double az, double y0, double y1, double z0, double z1) {
    return ellipse_rect_moments(ay, az, y0, y1, z0, z1).area;
}

namespace {

int other_axis(int d, int which) {
    static const int tab[3][2] = {{1, 2}, {0, 2}, {0, 1}};
    return tab[d][which];
}

// Wet volume and centroid of one cut cell by adaptive Simpson over z-layers
// of the exact in-plane overlap area. Layering avoids the catastrophic
// cancellation a divergence-theorem volume suffers on thin slivers.
struct WetCell {
    double volume = 0.0;
    Vec3 centroid;
};

struct LayerMoments {
    double a = 0.0, ax = 0.0, ay = 0.0, az = 0.0;
    LayerMoments operator+(const LayerMoments& o) const {
        return {a + o.a, ax + o.ax, ay + o.ay, az + o.az};
    }
    LayerMoments operator-(const LayerMoments& o) const {
        return {a - o.a, ax - o.ax, ay - o.ay, az - o.az};
    }
    double err(const LayerMoments& o) const {
        return std::max(std::abs(a - o.a),
                        std::max(std::abs(ax - o.ax),
                                 std::max(std::abs(ay - o.ay), std::abs(az - o.az))));
    }
    LayerMoments scaled(double s) const { return {a * s, ax * s, ay * s, az * s}; }
};

WetCell wet_cell_moments(const Vec3& axes, double x0, double x1, double y0, double y1, double z0,
                         double z1, double tol) {
    auto layer = [&](double z) {
        LayerMoments m;
        const double r2 = 1.0 - (z / axes.z) * (z / axes.z);
        if (r2 <= 0.0) return m;
        const double ax = axes.x * std::sqrt(r2), ay = axes.y * std::sqrt(r2);
        const WetFace wf = ellipse_rect_moments(ax, ay, x0, x1, y0, y1);
        m.a = wf.area;
        m.ax = wf.area * wf.cy;
        m.ay = wf.area * wf.cz;
        m.az = wf.area * z;
        return m;
    };
    struct Scope {
        decltype(layer)& f;
        double tol;
        int depth_cap = 40;
        LayerMoments simpson(double a, double b, const LayerMoments& fa, const LayerMoments& fm,
                             const LayerMoments& fb) {
            return (fa + fm.scaled(4.0) + fb).scaled((b - a) / 6.0);
        }
        LayerMoments run(double a, double b, LayerMoments fa, LayerMoments fm, LayerMoments fb,
                         LayerMoments whole, int depth) {
            const double m = (a + b) / 2;
            const LayerMoments fl = f((a + m) / 2), fr = f((m + b) / 2);
            const LayerMoments left = simpson(a, m, fa, fl, fm);
            const LayerMoments right = simpson(m, b, fm, fr, fb);
            const LayerMoments both = left + right;
            if (depth >= depth_cap || both.err(whole) < 15.0 * tol) return both;
            return run(a, m, fa, fl, fm, left, depth + 1) +
                   run(m, b, fm, fr, fb, right, depth + 1);
        }
    } scope{layer, tol};
    const LayerMoments fa = layer(z0), fb = layer(z1), fm = layer((z0 + z1) / 2);
    const LayerMoments whole = scope.simpson(z0, z1, fa, fm, fb);
    const LayerMoments total = scope.run(z0, z1, fa, fm, fb, whole, 0);
    WetCell out;
    out.volume = total.a;
    if (total.a > 0.0) out.centroid = {total.ax / total.a, total.ay / total.a, total.az / total.a};
    return out;
}

}  // namespace

// ---------------------------------------------------------------------------
BoundaryMesh make_boundary_mesh(const ConvexDomain& dom, int n_theta, int n_phi) {
    BoundaryMesh mesh;
    mesh.n_theta = n_theta;
    mesh.n_phi = n_phi;
    std::vector<double> gx, gw;
    gauss_legendre(n_theta, gx, gw);
    mesh.mu = gx;
    mesh.nodes.reserve(static_cast<size_t>(n_theta) * n_phi);
    for (int i = 0; i < n_theta; ++i) {
        const double th = std::acos(gx[i]);
        for (int j = 0; j < n_phi; ++j) {
            const double ph = -M_PI + 2.0 * M_PI * (j + 0.5) / n_phi;
            BoundaryNode node;
            node.pos = dom.boundary_point(ChartId::ZPoles, th, ph);
            node.normal = dom.outer_normal(node.pos);
            Vec3 t_th, t_ph;
            chart_tangents(dom, th, ph, t_th, t_ph);
            // dS = |x_th x x_ph| dth dph and dth = dmu / sin(th).
            const double jac = norm(cross(t_th, t_ph)) / std::max(std::sin(th), 1e-300);
            node.weight = jac * gw[i] * (2.0 * M_PI / n_phi);
            mesh.total_area += node.weight;
            mesh.nodes.push_back(node);
        }
    }
    return mesh;
}

std::int64_t PoissonGeometry::cell_of_point(const Vec3& x, int* i, int* j, int* k) const {
    const int ci = static_cast<int>(std::floor((x.x - grid.lo.x) / grid.h.x));
    const int cj = static_cast<int>(std::floor((x.y - grid.lo.y) / grid.h.y));
    const int ck = static_cast<int>(std::floor((x.z - grid.lo.z) / grid.h.z));
    if (i) *i = ci;
    if (j) *j = cj;
    if (k) *k = ck;
    if (!grid.in_range(ci, cj, ck)) return -1;
    return grid.index(ci, cj, ck);
}

std::shared_ptr<const PoissonGeometry> build_poisson_geometry(const ConvexDomain& dom, int grid_n,
                                                              int mesh_n_theta) {
    if (grid_n < 8) fail(ErrorKind::Config, "poisson.grid_n must be at least 8");
    auto geo = std::make_shared<PoissonGeometry>();
    geo->domain = dom;
    const int nth = std::max(mesh_n_theta, 2 * grid_n);
    geo->mesh = make_boundary_mesh(dom, nth, 2 * nth);

    const Vec3 axes = dom.semi_axes();
    GridLayout& g = geo->grid;
    for (int d = 0; d < 3; ++d) {
        g.h[d] = 2.0 * axes[d] / grid_n;
        g.n[d] = grid_n + 4;  // two margin cells per side
        g.lo[d] = -axes[d] - 2.0 * g.h[d];
    }
    g.cell_volume = g.h.x * g.h.y * g.h.z;
    const std::int64_t ncell = g.size();

    // Wet face areas; the d-array carries one extra layer along d.
    auto face_index = [&](int d, int i, int j, int k) {
        const std::int64_t nx = g.n[0] + (d == 0), ny = g.n[1] + (d == 1);
        return (static_cast<std::int64_t>(k) * ny + j) * nx + i;
    };
    std::vector<double> face_area[3], face_c1[3], face_c2[3];
    std::vector<double> face_s11[3], face_s22[3], face_s12[3];
    for (int d = 0; d < 3; ++d) {
        const size_t nfaces = static_cast<size_t>((g.n[0] + (d == 0))) * (g.n[1] + (d == 1)) *
                              (g.n[2] + (d == 2));
        face_area[d].assign(nfaces, 0.0);
        face_c1[d].assign(nfaces, 0.0);
        face_c2[d].assign(nfaces, 0.0);
        face_s11[d].assign(nfaces, 0.0);
        face_s22[d].assign(nfaces, 0.0);
        face_s12[d].assign(nfaces, 0.0);
    }

    for (int d = 0; d < 3; ++d) {
        const int d1 = other_axis(d, 0), d2 = other_axis(d, 1);
        const int lim0 = g.n[0] + (d == 0), lim1 = g.n[1] + (d == 1), lim2 = g.n[2] + (d == 2);
        parallel_for(lim2, [&](std::ptrdiff_t kk) {
            const int k = static_cast<int>(kk);
            for (int j = 0; j < lim1; ++j) {
                for (int i = 0; i < lim0; ++i) {
                    const int idx[3] = {i, j, k};
                    const double plane = g.lo[d] + idx[d] * g.h[d];
                    const double u0 = g.lo[d1] + idx[d1] * g.h[d1], u1 = u0 + g.h[d1];
                    const double v0 = g.lo[d2] + idx[d2] * g.h[d2], v1 = v0 + g.h[d2];
                    Vec3 c{};
                    c[d] = plane;
                    int inside_corners = 0;
                    for (int s1 = 0; s1 < 2; ++s1)
                        for (int s2 = 0; s2 < 2; ++s2) {
                            c[d1] = s1 ? u1 : u0;
                            c[d2] = s2 ? v1 : v0;
                            inside_corners += dom.inside(c) ? 1 : 0;
                        }
                    WetFace wf;
                    if (inside_corners == 4) {
                        wf.area = g.h[d1] * g.h[d2];  // convexity: fully wet
                        wf.cy = 0.5 * (u0 + u1);
                        wf.cz = 0.5 * (v0 + v1);
                        wf.syy = (u1 * u1 * u1 - u0 * u0 * u0) / 3.0 * (v1 - v0);
                        wf.szz = (v1 * v1 * v1 - v0 * v0 * v0) / 3.0 * (u1 - u0);
                        wf.syz = 0.5 * (u1 * u1 - u0 * u0) * 0.5 * (v1 * v1 - v0 * v0);
                    } else {
                        const double r2 = 1.0 - (plane / axes[d]) * (plane / axes[d]);
                        if (r2 > 0.0) {
                            const double ay = axes[d1] * std::sqrt(r2);
                            const double az = axes[d2] * std::sqrt(r2);
                            wf = ellipse_rect_moments(ay, az, u0, u1, v0, v1);
                        }
                    }
                    const size_t fi = static_cast<size_t>(face_index(d, i, j, k));
                    face_area[d][fi] = wf.area;
                    face_c1[d][fi] = wf.cy;
                    face_c2[d][fi] = wf.cz;
                    face_s11[d][fi] = wf.syy;
                    face_s22[d][fi] = wf.szz;
                    face_s12[d][fi] = wf.syz;
                }
            }
        });
    }

    geo->flag.assign(static_cast<size_t>(ncell), 0);
    geo->wet_fraction.assign(static_cast<size_t>(ncell), 0.0);
    geo->unknown_of_cell.assign(static_cast<size_t>(ncell), -1);
    std::vector<Vec3> wall_centroid(static_cast<size_t>(ncell), Vec3{});
    std::vector<Vec3> wet_centroid(static_cast<size_t>(ncell), Vec3{});

    parallel_for(g.n[2], [&](std::ptrdiff_t kk) {
        const int k = static_cast<int>(kk);
        for (int j = 0; j < g.n[1]; ++j) {
            for (int i = 0; i < g.n[0]; ++i) {
                const std::int64_t id = g.index(i, j, k);
                const double af[6] = {
                    face_area[0][static_cast<size_t>(face_index(0, i, j, k))],
                    face_area[0][static_cast<size_t>(face_index(0, i + 1, j, k))],
                    face_area[1][static_cast<size_t>(face_index(1, i, j, k))],
                    face_area[1][static_cast<size_t>(face_index(1, i, j + 1, k))],
                    face_area[2][static_cast<size_t>(face_index(2, i, j, k))],
                    face_area[2][static_cast<size_t>(face_index(2, i, j, k + 1))]};
                double asum = 0.0;
                bool all_full = true;
                for (int f = 0; f < 6; ++f) {
                    asum += af[f];
                    const int d = f / 2;
                    const double full = g.h[other_axis(d, 0)] * g.h[other_axis(d, 1)];
                    if (std::abs(af[f] - full) > 1e-12 * full) all_full = false;
                }
                if (asum <= 0.0) continue;  // dry
                if (all_full) {
                    geo->wet_fraction[static_cast<size_t>(id)] = 1.0;
                    geo->flag[static_cast<size_t>(id)] = 2;
                    continue;
                }
                const double x0 = g.lo.x + i * g.h.x, y0 = g.lo.y + j * g.h.y,
                             z0 = g.lo.z + k * g.h.z;
                const WetCell wc =
                    wet_cell_moments(axes, x0, x0 + g.h.x, y0, y0 + g.h.y, z0, z0 + g.h.z,
                                     1e-13 * g.cell_volume / g.h.z);
                const double lam = std::clamp(wc.volume / g.cell_volume, 0.0, 1.0);
                geo->wet_fraction[static_cast<size_t>(id)] = lam;
                if (lam >= kWetThreshold) {
                    wet_centroid[static_cast<size_t>(id)] = wc.centroid;
                    wall_centroid[static_cast<size_t>(id)] =
                        norm(wc.centroid) > 1e-12 ? dom.snap_to_surface(wc.centroid)
                                                  : dom.snap_to_surface(g.center(i, j, k));
                    geo->flag[static_cast<size_t>(id)] =
                        dom.inside(g.center(i, j, k)) ? 2 : 1;
                }
            }
        }
    });

    for (std::int64_t id = 0; id < ncell; ++id) {
        if (geo->flag[static_cast<size_t>(id)] != 0) {
            geo->unknown_of_cell[static_cast<size_t>(id)] =
                static_cast<std::int32_t>(geo->active_cells.size());
            geo->active_cells.push_back(id);
        }
        if (geo->flag[static_cast<size_t>(id)] == 2) geo->interior_cells.push_back(id);
    }
    const std::int64_t nact = static_cast<std::int64_t>(geo->active_cells.size());
    geo->nbr.assign(static_cast<size_t>(nact), {-1, -1, -1, -1, -1, -1});
    geo->face_coeff.assign(static_cast<size_t>(nact), {0, 0, 0, 0, 0, 0});
    geo->face_off1.assign(static_cast<size_t>(nact), {0, 0, 0, 0, 0, 0});
    geo->face_off2.assign(static_cast<size_t>(nact), {0, 0, 0, 0, 0, 0});
    geo->wall_area.assign(static_cast<size_t>(nact), 0.0);
    geo->wall_point.assign(static_cast<size_t>(nact), Vec3{});
    geo->load_volume.assign(static_cast<size_t>(nact), 0.0);

    const std::int64_t plane_stride = static_cast<std::int64_t>(g.n[0]) * g.n[1];
    double wet_volume = 0.0, wall_total = 0.0;
    for (std::int64_t u = 0; u < nact; ++u) {
        const std::int64_t id = geo->active_cells[static_cast<size_t>(u)];
        const int i = static_cast<int>(id % g.n[0]);
        const int j = static_cast<int>((id / g.n[0]) % g.n[1]);
        const int k = static_cast<int>(id / plane_stride);
        geo->load_volume[static_cast<size_t>(u)] =
            geo->wet_fraction[static_cast<size_t>(id)] * g.cell_volume;

        // Fluxes act between unknowns. The effective wall patch closes the
        // surface made of the active-active faces, so its area vector is
        // minus their sum; wet faces toward dropped slivers implicitly join
        // the wall patch this way.
        Vec3 wvec{}, wvec_full{};
        // Patch moments via divergence identities: with V-moments and face
        // moments known exactly,
        //   int_patch x_k n_m dA       = delta_km V - (face first moments),
        //   int_patch x_k x_l n_m dA   = (delta_mk xbar_l + delta_ml xbar_k) V
        //                                - (face second moments).
        const double Vw = geo->load_volume[static_cast<size_t>(u)];
        const Vec3 xbarV = Vw * wet_centroid[static_cast<size_t>(id)];
        double M[3][3] = {};
        double T2[3][3][3] = {};  // [k][l][m]
        for (int d = 0; d < 3; ++d) {
            M[d][d] = Vw;
            for (int l = 0; l < 3; ++l) {
                T2[d][l][d] += xbarV[l];
                T2[l][d][d] += xbarV[l];
            }
        }
        for (int d = 0; d < 3; ++d) {
            for (int side = 0; side < 2; ++side) {
                const int f = 2 * d + side;
                const int ii = i + (d == 0 ? (side ? 1 : -1) : 0);
                const int jj = j + (d == 1 ? (side ? 1 : -1) : 0);
                const int kk = k + (d == 2 ? (side ? 1 : -1) : 0);
                const size_t fi = static_cast<size_t>(face_index(
                    d, i + (d == 0 && side), j + (d == 1 && side), k + (d == 2 && side)));
                const double area = face_area[d][fi];
                if (area > 0.0) {
                    const int ijk[3] = {i, j, k};
                    const int d1 = other_axis(d, 0), d2 = other_axis(d, 1);
                    Vec3 fc{};
                    fc[d] = g.lo[d] + (ijk[d] + side) * g.h[d];
                    fc[d1] = face_c1[d][fi];
                    fc[d2] = face_c2[d][fi];
                    const double sgn = side ? 1.0 : -1.0;
                    for (int kk2 = 0; kk2 < 3; ++kk2) M[kk2][d] -= sgn * area * fc[kk2];
                    wvec_full[d] -= sgn * area;
                    // Face second moments (x_d is the plane constant).
                    double F2[3][3] = {};
                    F2[d][d] = fc[d] * fc[d] * area;
                    F2[d][d1] = F2[d1][d] = fc[d] * area * fc[d1];
                    F2[d][d2] = F2[d2][d] = fc[d] * area * fc[d2];
                    F2[d1][d1] = face_s11[d][fi];
                    F2[d2][d2] = face_s22[d][fi];
                    F2[d1][d2] = F2[d2][d1] = face_s12[d][fi];
                    for (int a2 = 0; a2 < 3; ++a2)
                        for (int b2 = 0; b2 < 3; ++b2) T2[a2][b2][d] -= sgn * F2[a2][b2];
                }
                std::int32_t nb = -1;
                if (g.in_range(ii, jj, kk))
                    nb = geo->unknown_of_cell[static_cast<size_t>(g.index(ii, jj, kk))];
                if (nb >= 0 && area > 0.0) {
                    geo->nbr[static_cast<size_t>(u)][f] = nb;
                    geo->face_coeff[static_cast<size_t>(u)][f] = area / g.h[d];
                    wvec[d] -= (side ? 1.0 : -1.0) * area;
                    const int d1 = other_axis(d, 0), d2 = other_axis(d, 1);
                    const double full = g.h[d1] * g.h[d2];
                    if (area < full * (1.0 - 1e-12)) {
                        const int ijk[3] = {i, j, k};
                        const double fc1 = g.lo[d1] + (ijk[d1] + 0.5) * g.h[d1];
                        const double fc2 = g.lo[d2] + (ijk[d2] + 0.5) * g.h[d2];
                        geo->face_off1[static_cast<size_t>(u)][f] =
                            static_cast<float>((face_c1[d][fi] - fc1) / g.h[d1]);
                        geo->face_off2[static_cast<size_t>(u)][f] =
                            static_cast<float>((face_c2[d][fi] - fc2) / g.h[d2]);
                        geo->any_cut_faces = true;
                    }
                }
            }
        }
        double S = norm(wvec);
        const double Sfull = norm(wvec_full);
        if (Sfull > 0.0) {
            // Patch centroid from the moment matrix applied to the patch's
            // mean normal; second-order accurate, unlike the wet-volume
            // centroid which sits O(dx) off the wall tangentially.
            const Vec3 what = wvec_full / Sfull;
            Vec3 cp{M[0][0] * what.x + M[0][1] * what.y + M[0][2] * what.z,
                    M[1][0] * what.x + M[1][1] * what.y + M[1][2] * what.z,
                    M[2][0] * what.x + M[2][1] * what.y + M[2][2] * what.z};
            cp = cp / Sfull;
            if (norm(cp) > 1e-12)
                geo->wall_point[static_cast<size_t>(u)] = dom.snap_to_surface(cp);
            else
                geo->wall_point[static_cast<size_t>(u)] =
                    wall_centroid[static_cast<size_t>(id)];

            // Curvature correction of the patch area: |int n dA| undercounts
            // the area by half the normal's variance over the patch, which
            // follows from the patch covariance and the Weingarten map of the
            // implicit surface.
            const Vec3 cpw = geo->wall_point[static_cast<size_t>(u)];
            double cov[3][3];
            for (int a2 = 0; a2 < 3; ++a2)
                for (int b2 = 0; b2 < 3; ++b2) {
                    double t = 0.0;
                    for (int m2 = 0; m2 < 3; ++m2) t += T2[a2][b2][m2] * what[m2];
                    cov[a2][b2] = t / Sfull - cp[a2] * cp[b2];
                }
            const Vec3 nrm = dom.outer_normal(cpw);
            const Vec3 grad = dom.implicit_gradient(cpw);
            const double gn = norm(grad);
            const Vec3 ax = dom.semi_axes();
            const double D[3] = {2.0 / (ax.x * ax.x), 2.0 / (ax.y * ax.y),
                                 2.0 / (ax.z * ax.z)};
            // W = (I - n n^T) D / |grad q|; Var(n) ~ tr(W Cov W^T).
            double W[3][3];
            for (int a2 = 0; a2 < 3; ++a2)
                for (int b2 = 0; b2 < 3; ++b2)
                    W[a2][b2] = ((a2 == b2 ? 1.0 : 0.0) - nrm[a2] * nrm[b2]) * D[b2] / gn;
            double var = 0.0;
            for (int a2 = 0; a2 < 3; ++a2)
                for (int b2 = 0; b2 < 3; ++b2)
                    for (int c2 = 0; c2 < 3; ++c2)
                        var += W[a2][b2] * cov[b2][c2] * W[a2][c2];
            var = std::clamp(var, 0.0, 0.5);
            S *= 1.0 + 0.5 * var;
        } else if (S > 0.0) {
            geo->wall_point[static_cast<size_t>(u)] = wall_centroid[static_cast<size_t>(id)];
        }
        geo->wall_area[static_cast<size_t>(u)] = S;
        wet_volume += geo->load_volume[static_cast<size_t>(u)];
        wall_total += S;
    }
    geo->wet_volume = wet_volume;
    geo->wall_total = wall_total;

    // Bilinear data-interpolation stencil in (cos theta, phi) per wall cell.
    geo->wall_h_nodes.assign(static_cast<size_t>(nact), {-1, -1, -1, -1});
    geo->wall_h_weights.assign(static_cast<size_t>(nact), {0, 0, 0, 0});
    parallel_for(nact, [&](std::ptrdiff_t u) {
        if (!(geo->wall_area[static_cast<size_t>(u)] > 0.0)) return;
        const Vec3 p = geo->wall_point[static_cast<size_t>(u)];
        const Vec3 q = normalized(Vec3{p.x / axes.x, p.y / axes.y, p.z / axes.z});
        const double mu = std::clamp(q.z, -1.0, 1.0);
        const double phi = std::atan2(q.y, q.x);
        const auto& mesh = geo->mesh;
        int r1 = static_cast<int>(std::upper_bound(mesh.mu.begin(), mesh.mu.end(), mu) -
                                  mesh.mu.begin());
        int r0 = r1 - 1;
        double tmu = 0.0;
        if (r0 < 0) {
            r0 = r1 = 0;  // polar cap: clamp to the edge row
        } else if (r1 >= mesh.n_theta) {
            r0 = r1 = mesh.n_theta - 1;
        } else {
            tmu = (mu - mesh.mu[static_cast<size_t>(r0)]) /
                  (mesh.mu[static_cast<size_t>(r1)] - mesh.mu[static_cast<size_t>(r0)]);
        }
        const double fcol = (phi + M_PI) / (2.0 * M_PI) * mesh.n_phi - 0.5;
        int c0 = static_cast<int>(std::floor(fcol));
        const double tph = fcol - c0;
        c0 = ((c0 % mesh.n_phi) + mesh.n_phi) % mesh.n_phi;
        const int c1 = (c0 + 1) % mesh.n_phi;
        const auto node = [&](int r, int c) {
            return static_cast<std::int32_t>(r * mesh.n_phi + c);
        };
        geo->wall_h_nodes[static_cast<size_t>(u)] = {node(r0, c0), node(r0, c1), node(r1, c0),
                                                     node(r1, c1)};
        geo->wall_h_weights[static_cast<size_t>(u)] = {
            (1 - tmu) * (1 - tph), (1 - tmu) * tph, tmu * (1 - tph), tmu * tph};
    });

    // Clip fallback map near the wall.
    geo->clip_target.assign(static_cast<size_t>(ncell), -1);
    parallel_for(g.n[2], [&](std::ptrdiff_t kk) {
        const int k = static_cast<int>(kk);
        for (int j = 0; j < g.n[1]; ++j) {
            for (int i = 0; i < g.n[0]; ++i) {
                const std::int64_t id = g.index(i, j, k);
                if (geo->flag[static_cast<size_t>(id)] == 2) continue;
                bool near_wet = geo->wet_fraction[static_cast<size_t>(id)] > 0.0;
                for (int dk = -1; dk <= 1 && !near_wet; ++dk)
                    for (int dj = -1; dj <= 1 && !near_wet; ++dj)
                        for (int di = -1; di <= 1 && !near_wet; ++di)
                            if (g.in_range(i + di, j + dj, k + dk) &&
                                geo->wet_fraction[static_cast<size_t>(
                                    g.index(i + di, j + dj, k + dk))] > 0.0)
                                near_wet = true;
                if (!near_wet) continue;
                double best = 1e30;
                std::int32_t best_id = -1;
                for (int r = 1; r <= 5 && best_id < 0; ++r) {
                    for (int dk = -r; dk <= r; ++dk)
                        for (int dj = -r; dj <= r; ++dj)
                            for (int di = -r; di <= r; ++di) {
                                if (std::max({std::abs(di), std::abs(dj), std::abs(dk)}) != r)
                                    continue;
                                if (!g.in_range(i + di, j + dj, k + dk)) continue;
                                const std::int64_t nid = g.index(i + di, j + dj, k + dk);
                                if (geo->flag[static_cast<size_t>(nid)] != 2) continue;
                                const double d2 =
                                    double(di) * di + double(dj) * dj + double(dk) * dk;
                                if (d2 < best) {
                                    best = d2;
                                    best_id = static_cast<std::int32_t>(nid);
                                }
                            }
                }
                geo->clip_target[static_cast<size_t>(id)] = best_id;
            }
        }
    });

    return geo;
}

// ---------------------------------------------------------------------------
FieldState::FieldState(std::shared_ptr<const PoissonGeometry> g) : geo(std::move(g)) {
    const size_t n = static_cast<size_t>(geo->grid.size());
    rho.assign(n, 0.0);
    phi.assign(n, 0.0);
    ex.assign(n, 0.0);
    ey.assign(n, 0.0);
    ez.assign(n, 0.0);
    h.assign(geo->mesh.nodes.size(), 0.0);
}

void deposit_density(const std::vector<Marker>& markers, FieldState& f, bool parallel) {
    const PoissonGeometry& geo = *f.geo;
    const GridLayout& g = geo.grid;
    const size_t ncell = static_cast<size_t>(g.size());
    std::fill(f.rho.begin(), f.rho.end(), 0.0);

    const int nthreads = parallel ? max_threads() : 1;
    std::vector<std::vector<double>> charge(static_cast<size_t>(nthreads));
    for (auto& c : charge) c.assign(ncell, 0.0);
    const std::ptrdiff_t n = static_cast<std::ptrdiff_t>(markers.size());
    const std::ptrdiff_t chunk = nthreads > 0 ? (n + nthreads - 1) / nthreads : n;

    auto deposit_range = [&](std::ptrdiff_t lo, std::ptrdiff_t hi, std::vector<double>& out) {
        for (std::ptrdiff_t m = lo; m < hi; ++m) {
            const Marker& mk = markers[static_cast<size_t>(m)];
            const double q = mk.f_value * mk.weight;
            if (q == 0.0) continue;
            const double gx = (mk.x.x - g.lo.x) / g.h.x - 0.5;
            const double gy = (mk.x.y - g.lo.y) / g.h.y - 0.5;
            const double gz = (mk.x.z - g.lo.z) / g.h.z - 0.5;
            const int i0 = static_cast<int>(std::floor(gx));
            const int j0 = static_cast<int>(std::floor(gy));
            const int k0 = static_cast<int>(std::floor(gz));
            if (!g.in_range(i0, j0, k0) || !g.in_range(i0 + 1, j0 + 1, k0 + 1))
                fail(ErrorKind::Integrity, "marker outside the deposition grid");
            const double fx = gx - i0, fy = gy - j0, fz = gz - k0;
            double w8[8];
            std::int64_t id8[8];
            bool in8[8];
            double wsum_in = 0.0;
            int c = 0;
            for (int dk = 0; dk < 2; ++dk)
                for (int dj = 0; dj < 2; ++dj)
                    for (int di = 0; di < 2; ++di, ++c) {
                        w8[c] = (di ? fx : 1 - fx) * (dj ? fy : 1 - fy) * (dk ? fz : 1 - fz);
                        id8[c] = g.index(i0 + di, j0 + dj, k0 + dk);
                        in8[c] = geo.flag[static_cast<size_t>(id8[c])] == 2;
                        if (in8[c]) wsum_in += w8[c];
                    }
            if (wsum_in > 0.0) {
                // Clip to the interior part of the stencil, mass preserved.
                const double scale = q / wsum_in;
                for (c = 0; c < 8; ++c)
                    if (in8[c]) out[static_cast<size_t>(id8[c])] += scale * w8[c];
            } else {
                const std::int32_t tgt =
                    geo.clip_target[static_cast<size_t>(g.index(i0, j0, k0))];
                if (tgt < 0) fail(ErrorKind::Integrity, "marker with no interior cell in reach");
                out[static_cast<size_t>(tgt)] += q;
            }
        }
    };

#ifdef _OPENMP
#pragma omp parallel for schedule(static, 1) num_threads(nthreads) if (parallel)
#endif
    for (int t = 0; t < nthreads; ++t) {
        const std::ptrdiff_t lo = t * chunk;
        const std::ptrdiff_t hi = std::min(n, lo + chunk);
        if (lo < hi) deposit_range(lo, hi, charge[static_cast<size_t>(t)]);
    }

    double total = 0.0;
    for (size_t id = 0; id < ncell; ++id) {
        double qcell = 0.0;
        for (int t = 0; t < nthreads; ++t) qcell += charge[static_cast<size_t>(t)][id];
        if (qcell != 0.0) {
            const double lam = geo.wet_fraction[id];
            f.rho[id] = qcell / (std::max(lam, 1e-3) * g.cell_volume);
            total += qcell;
        }
    }
    f.charge = total;
    f.solved = false;
}

void fill_density(FieldState& f, const std::function<double(const Vec3&)>& rho_fn) {
    const PoissonGeometry& geo = *f.geo;
    const GridLayout& g = geo.grid;
    parallel_for(g.n[2], [&](std::ptrdiff_t kk) {
        const int k = static_cast<int>(kk);
        for (int j = 0; j < g.n[1]; ++j)
            for (int i = 0; i < g.n[0]; ++i)
                f.rho[static_cast<size_t>(g.index(i, j, k))] = rho_fn(g.center(i, j, k));
    });
    f.charge = deterministic_sum(
        static_cast<std::ptrdiff_t>(geo.active_cells.size()), [&](std::ptrdiff_t u) {
            return f.rho[static_cast<size_t>(geo.active_cells[static_cast<size_t>(u)])] *
                   geo.load_volume[static_cast<size_t>(u)];
        });
    f.solved = false;
}

namespace {

void rebuild_wall_load(FieldState& f) {
    const PoissonGeometry& geo = *f.geo;
    const std::ptrdiff_t nact = static_cast<std::ptrdiff_t>(geo.active_cells.size());
    f.wall_load.assign(static_cast<size_t>(nact), 0.0);
    for (std::ptrdiff_t u = 0; u < nact; ++u) {
        if (!(geo.wall_area[static_cast<size_t>(u)] > 0.0)) continue;
        const auto& idx = geo.wall_h_nodes[static_cast<size_t>(u)];
        const auto& w = geo.wall_h_weights[static_cast<size_t>(u)];
        double hv = 0.0;
        for (int s = 0; s < 4; ++s)
            if (idx[static_cast<size_t>(s)] >= 0)
                hv += w[static_cast<size_t>(s)] * f.h[static_cast<size_t>(idx[static_cast<size_t>(s)])];
        f.wall_load[static_cast<size_t>(u)] = hv * geo.wall_area[static_cast<size_t>(u)];
    }
    // Close the gap between the discrete wall integral and the quadrature
    // integral by an area-proportional shift (a uniform offset of the applied
    // h); the discrete total then matches the quadrature total exactly.
    const double raw = deterministic_sum(
        nact, [&](std::ptrdiff_t u) { return f.wall_load[static_cast<size_t>(u)]; });
    const double target = flux_integral(f);
    const double area = deterministic_sum(
        nact, [&](std::ptrdiff_t u) { return geo.wall_area[static_cast<size_t>(u)]; });
    if (area > 0.0) {
        const double shift = (target - raw) / area;
        for (std::ptrdiff_t u = 0; u < nact; ++u)
            f.wall_load[static_cast<size_t>(u)] += shift * geo.wall_area[static_cast<size_t>(u)];
    }
}

}  // namespace

void set_flux(FieldState& f, double uniform_value) {
    std::fill(f.h.begin(), f.h.end(), uniform_value);
    rebuild_wall_load(f);
    f.solved = false;
}

void set_flux(FieldState& f, const std::function<double(const Vec3&, const Vec3&)>& h_fn) {
    const auto& nodes = f.geo->mesh.nodes;
    for (size_t i = 0; i < nodes.size(); ++i) f.h[i] = h_fn(nodes[i].pos, nodes[i].normal);
    rebuild_wall_load(f);
    f.solved = false;
}

double flux_integral(const FieldState& f) {
    const auto& nodes = f.geo->mesh.nodes;
    return deterministic_sum(static_cast<std::ptrdiff_t>(nodes.size()), [&](std::ptrdiff_t i) {
        return f.h[static_cast<size_t>(i)] * nodes[static_cast<size_t>(i)].weight;
    });
}

double check_compatibility(const FieldState& f) { return f.charge - flux_integral(f); }

// ---------------------------------------------------------------------------
namespace {

// Flux-centroid-corrected operator: on cut faces the two-point face-normal
// difference is bilinearly interpolated toward the wet-face centroid using
// the transversally shifted difference pairs (when both of their cells are
// unknowns). Off-centroid weights fold back onto the base pair, so constants
// stay in the null space exactly.
void apply_full_operator(const PoissonGeometry& geo, const std::vector<double>& x_grid,
                         std::vector<double>& y) {
    const GridLayout& g = geo.grid;
    const std::int64_t strides[3] = {1, g.n[0], static_cast<std::int64_t>(g.n[0]) * g.n[1]};
    const std::ptrdiff_t nact = static_cast<std::ptrdiff_t>(geo.active_cells.size());
    parallel_for(nact, [&](std::ptrdiff_t u) {
        const std::int64_t id = geo.active_cells[static_cast<size_t>(u)];
        const double xc = x_grid[static_cast<size_t>(id)];
        double acc = 0.0;
        for (int fc = 0; fc < 6; ++fc) {
            if (geo.nbr[static_cast<size_t>(u)][fc] < 0) continue;
            const int d = fc / 2;
            const std::int64_t other = id + (fc % 2 ? strides[d] : -strides[d]);
            const std::int64_t lo = fc % 2 ? id : other;
            const std::int64_t hi = fc % 2 ? other : id;
            const double coeff = geo.face_coeff[static_cast<size_t>(u)][fc];
            const double t1 = geo.face_off1[static_cast<size_t>(u)][fc];
            const double t2 = geo.face_off2[static_cast<size_t>(u)][fc];
            double grad;
            if (t1 == 0.0f && t2 == 0.0f) {
                grad = x_grid[static_cast<size_t>(hi)] - x_grid[static_cast<size_t>(lo)];
            } else {
                const int d1 = other_axis(d, 0), d2 = other_axis(d, 1);
                const std::int64_t s1 = (t1 >= 0 ? 1 : -1) * strides[d1];
                const std::int64_t s2 = (t2 >= 0 ? 1 : -1) * strides[d2];
                const double a1 = std::abs(t1), a2 = std::abs(t2);
                double w00 = (1 - a1) * (1 - a2), w10 = a1 * (1 - a2), w01 = (1 - a1) * a2,
                       w11 = a1 * a2;
                auto pair_ok = [&](std::int64_t shift) {
                    return geo.unknown_of_cell[static_cast<size_t>(lo + shift)] >= 0 &&
                           geo.unknown_of_cell[static_cast<size_t>(hi + shift)] >= 0;
                };
                auto pair_grad = [&](std::int64_t shift) {
                    return x_grid[static_cast<size_t>(hi + shift)] -
                           x_grid[static_cast<size_t>(lo + shift)];
                };
                // Missing donors: extrapolate linearly from the opposite side
                // when it exists, else fold onto the base pair.
                double w_opp1 = 0.0, w_opp2 = 0.0;
                if (!pair_ok(s1)) {
                    if (pair_ok(-s1)) {
                        w00 += 2.0 * w10;
                        w_opp1 -= w10;
                    } else {
                        w00 += w10;
                    }
                    w10 = 0.0;
                }
                if (!pair_ok(s2)) {
                    if (pair_ok(-s2)) {
                        w00 += 2.0 * w01;
                        w_opp2 -= w01;
                    } else {
                        w00 += w01;
                    }
                    w01 = 0.0;
                }
                if (w11 != 0.0 && !pair_ok(s1 + s2)) {
                    w00 += w11;
                    w11 = 0.0;
                }
                grad = w00 * pair_grad(0);
                if (w10 != 0.0) grad += w10 * pair_grad(s1);
                if (w01 != 0.0) grad += w01 * pair_grad(s2);
                if (w11 != 0.0) grad += w11 * pair_grad(s1 + s2);
                if (w_opp1 != 0.0) grad += w_opp1 * pair_grad(-s1);
                if (w_opp2 != 0.0) grad += w_opp2 * pair_grad(-s2);
            }
            acc += coeff * (fc % 2 ? 1.0 : -1.0) * grad;
        }
        y[static_cast<size_t>(u)] = -acc;  // negated divergence, like the SPD operator
        (void)xc;
    });
}

}  // namespace

void solve_neumann(FieldState& f, const PoissonOptions& opt) {
    const PoissonGeometry& geo = *f.geo;
    const GridLayout& g = geo.grid;
    const std::ptrdiff_t nact = static_cast<std::ptrdiff_t>(geo.active_cells.size());
    if (nact == 0) fail(ErrorKind::SolverFailure, "no active cells");

    const double hint = flux_integral(f);
    const double scale = std::max({std::abs(f.charge), std::abs(hint), 1e-30});
    if (std::abs(f.charge - hint) > opt.compat_tol * scale + 1e-13)
        fail(ErrorKind::Incompatible,
             "Neumann compatibility violated: integral of rho differs from integral of h");
    if (f.wall_load.size() != static_cast<size_t>(nact))
        fail(ErrorKind::Incompatible, "no Neumann data set (call set_flux first)");

    // Load b_u = rho Lambda V - wall flux; project out the constant null mode.
    std::vector<double> b(static_cast<size_t>(nact), 0.0);
    parallel_for(nact, [&](std::ptrdiff_t u) {
        const std::int64_t id = geo.active_cells[static_cast<size_t>(u)];
        b[static_cast<size_t>(u)] =
            f.rho[static_cast<size_t>(id)] * geo.load_volume[static_cast<size_t>(u)] -
            f.wall_load[static_cast<size_t>(u)];
    });
    auto project = [&](std::vector<double>& v) {
        const double mean =
            deterministic_sum(nact, [&](std::ptrdiff_t u) { return v[static_cast<size_t>(u)]; }) /
            static_cast<double>(nact);
        parallel_for(nact, [&](std::ptrdiff_t u) { v[static_cast<size_t>(u)] -= mean; });
    };
    project(b);
    // The CG operator is the negated flux divergence; flip the load once.
    parallel_for(nact, [&](std::ptrdiff_t u) { b[static_cast<size_t>(u)] = -b[static_cast<size_t>(u)]; });

    std::vector<double> diag(static_cast<size_t>(nact), 0.0);
    parallel_for(nact, [&](std::ptrdiff_t u) {
        double d = 0.0;
        for (int fc = 0; fc < 6; ++fc) d += geo.face_coeff[static_cast<size_t>(u)][fc];
        diag[static_cast<size_t>(u)] = std::max(d, 1e-300);
    });

    // Symmetric two-point operator (SPD after negation) for CG.
    auto apply_sym = [&](const std::vector<double>& x, std::vector<double>& y) {
        parallel_for(nact, [&](std::ptrdiff_t u) {
            const auto& nb = geo.nbr[static_cast<size_t>(u)];
            const auto& cf = geo.face_coeff[static_cast<size_t>(u)];
            double acc = diag[static_cast<size_t>(u)] * x[static_cast<size_t>(u)];
            for (int fc = 0; fc < 6; ++fc)
                if (nb[fc] >= 0) acc -= cf[fc] * x[static_cast<size_t>(nb[fc])];
            y[static_cast<size_t>(u)] = acc;
        });
    };
    auto dotv = [&](const std::vector<double>& a, const std::vector<double>& c) {
        return deterministic_sum(nact, [&](std::ptrdiff_t u) {
            return a[static_cast<size_t>(u)] * c[static_cast<size_t>(u)];
        });
    };

    // Jacobi-preconditioned CG for apply_sym(x) = rhs, warm-started on x.
    std::vector<double> r(static_cast<size_t>(nact)), z(static_cast<size_t>(nact)),
        p(static_cast<size_t>(nact)), Ap(static_cast<size_t>(nact));
    int iterations_used = 0;
    auto cg_solve = [&](const std::vector<double>& rhs, std::vector<double>& x, double rel_tol) {
        apply_sym(x, Ap);
        parallel_for(nact, [&](std::ptrdiff_t u) {
            r[static_cast<size_t>(u)] = rhs[static_cast<size_t>(u)] - Ap[static_cast<size_t>(u)];
        });
        const double rhsn = std::sqrt(dotv(rhs, rhs));
        const double stop = std::max(rel_tol * std::max(rhsn, 1e-300), 1e-300);
        parallel_for(nact, [&](std::ptrdiff_t u) {
            z[static_cast<size_t>(u)] = r[static_cast<size_t>(u)] / diag[static_cast<size_t>(u)];
        });
        p = z;
        double rz = dotv(r, z);
        for (int it = 0; it < opt.max_iter; ++it, ++iterations_used) {
            if (it > 0 && it % 100 == 0) {
                // Refresh the drifting recursive residual.
                apply_sym(x, Ap);
                parallel_for(nact, [&](std::ptrdiff_t u) {
                    r[static_cast<size_t>(u)] =
                        rhs[static_cast<size_t>(u)] - Ap[static_cast<size_t>(u)];
                    z[static_cast<size_t>(u)] =
                        r[static_cast<size_t>(u)] / diag[static_cast<size_t>(u)];
                });
                p = z;
                rz = dotv(r, z);
            }
            if (std::sqrt(dotv(r, r)) <= stop) return;
            apply_sym(p, Ap);
            double pAp = dotv(p, Ap);
            if (!(pAp > 0.0)) {
                project(p);
                pAp = dotv(p, Ap);
                if (!(pAp > 0.0))
                    fail(ErrorKind::SolverFailure, "CG broke down on the null mode");
            }
            const double alpha = rz / pAp;
            parallel_for(nact, [&](std::ptrdiff_t u) {
                x[static_cast<size_t>(u)] += alpha * p[static_cast<size_t>(u)];
                r[static_cast<size_t>(u)] -= alpha * Ap[static_cast<size_t>(u)];
            });
            parallel_for(nact, [&](std::ptrdiff_t u) {
                z[static_cast<size_t>(u)] = r[static_cast<size_t>(u)] / diag[static_cast<size_t>(u)];
            });
            const double rz_new = dotv(r, z);
            const double beta = rz_new / rz;
            rz = rz_new;
            parallel_for(nact, [&](std::ptrdiff_t u) {
                p[static_cast<size_t>(u)] = z[static_cast<size_t>(u)] + beta * p[static_cast<size_t>(u)];
            });
        }
        fail(ErrorKind::SolverFailure, "CG did not reach tolerance");
    };

    // Warm start from the previous phi.
    std::vector<double> x(static_cast<size_t>(nact));
    parallel_for(nact, [&](std::ptrdiff_t u) {
        x[static_cast<size_t>(u)] =
            f.phi[static_cast<size_t>(geo.active_cells[static_cast<size_t>(u)])];
    });
    cg_solve(b, x, opt.tol);

    // Defect correction toward the flux-centroid-corrected operator.
    if (geo.any_cut_faces) {
        std::vector<double> x_grid(static_cast<size_t>(g.size()), 0.0);
        std::vector<double> rfull(static_cast<size_t>(nact)), dx(static_cast<size_t>(nact));
        const double bnorm = std::sqrt(dotv(b, b));
        double prev = 1e300;
        for (int sweep = 0; sweep < 60; ++sweep) {
            parallel_for(nact, [&](std::ptrdiff_t u) {
                x_grid[static_cast<size_t>(geo.active_cells[static_cast<size_t>(u)])] =
                    x[static_cast<size_t>(u)];
            });
            apply_full_operator(geo, x_grid, Ap);
            parallel_for(nact, [&](std::ptrdiff_t u) {
                rfull[static_cast<size_t>(u)] =
                    b[static_cast<size_t>(u)] - Ap[static_cast<size_t>(u)];
            });
            project(rfull);
            const double rn = std::sqrt(dotv(rfull, rfull));
            if (rn <= std::max(10.0 * opt.tol * std::max(bnorm, 1e-300), 1e-300)) break;
            if (sweep == 59 || rn > 0.9 * prev)
                fail(ErrorKind::SolverFailure, "cut-face defect correction stagnated");
            prev = rn;
            std::fill(dx.begin(), dx.end(), 0.0);
            cg_solve(rfull, dx, 0.05);
            parallel_for(nact, [&](std::ptrdiff_t u) {
                x[static_cast<size_t>(u)] += dx[static_cast<size_t>(u)];
            });
        }
    }

    // Zero-mean gauge over the wet volume.
    const double vmean = deterministic_sum(nact,
                                           [&](std::ptrdiff_t u) {
                                               return x[static_cast<size_t>(u)] *
                                                      geo.load_volume[static_cast<size_t>(u)];
                                           }) /
                         geo.wet_volume;
    std::fill(f.phi.begin(), f.phi.end(), 0.0);
    parallel_for(nact, [&](std::ptrdiff_t u) {
        f.phi[static_cast<size_t>(geo.active_cells[static_cast<size_t>(u)])] =
            x[static_cast<size_t>(u)] - vmean;
    });

    // Gradient on fully wet cells only: centered stencils where both
    // neighbors are full, else one-sided second order (inward), else first
    // order. Cut-cell phi carries a rough O(dx^2) layer that differencing
    // would demote to O(dx); cut cells instead receive extrapolated E below.
    const std::int64_t strides[3] = {1, g.n[0], static_cast<std::int64_t>(g.n[0]) * g.n[1]};
    auto active = [&](std::int64_t id) {
        return geo.flag[static_cast<size_t>(id)] != 0 &&
               geo.wet_fraction[static_cast<size_t>(id)] >= 1.0;
    };
    (void)kGradThreshold;
    std::vector<double>* comp[3] = {&f.ex, &f.ey, &f.ez};
    for (auto* c : comp) std::fill(c->begin(), c->end(), 0.0);
    auto any_active = [&](std::int64_t id) { return geo.flag[static_cast<size_t>(id)] != 0; };
    parallel_for(nact, [&](std::ptrdiff_t u) {
        const std::int64_t id = geo.active_cells[static_cast<size_t>(u)];
        if (!active(id)) return;
        const int ijk[3] = {static_cast<int>(id % g.n[0]),
                            static_cast<int>((id / g.n[0]) % g.n[1]),
                            static_cast<int>(id / strides[2])};
        const auto& ph = f.phi;
        for (int d = 0; d < 3; ++d) {
            const double hd = g.h[d];
            auto centered = [&](auto&& ok) {
                return ijk[d] >= 1 && ijk[d] + 1 < g.n[d] && ok(id - strides[d]) &&
                       ok(id + strides[d]);
            };
            auto sided = [&](int sgn, auto&& ok) {
                const int pos = ijk[d] + 2 * sgn;
                return pos >= 0 && pos < g.n[d] && ok(id + sgn * strides[d]) &&
                       ok(id + 2 * sgn * strides[d]);
            };
            auto eval_centered = [&] {
                return (ph[static_cast<size_t>(id + strides[d])] -
                        ph[static_cast<size_t>(id - strides[d])]) /
                       (2 * hd);
            };
            auto eval_sided = [&](int sgn) {
                return -sgn *
                       (3 * ph[static_cast<size_t>(id)] -
                        4 * ph[static_cast<size_t>(id + sgn * strides[d])] +
                        ph[static_cast<size_t>(id + 2 * sgn * strides[d])]) /
                       (2 * hd);
            };
            double e = 0.0;
            if (centered(active))
                e = eval_centered();
            else if (sided(-1, active))
                e = eval_sided(-1);
            else if (sided(+1, active))
                e = eval_sided(+1);
            else if (centered(any_active))
                e = eval_centered();
            else if (sided(-1, any_active))
                e = eval_sided(-1);
            else if (sided(+1, any_active))
                e = eval_sided(+1);
            else if (ijk[d] >= 1 && any_active(id - strides[d]))
                e = (ph[static_cast<size_t>(id)] - ph[static_cast<size_t>(id - strides[d])]) / hd;
            else if (ijk[d] + 1 < g.n[d] && any_active(id + strides[d]))
                e = (ph[static_cast<size_t>(id + strides[d])] - ph[static_cast<size_t>(id)]) / hd;
            (*comp[d])[static_cast<size_t>(id)] = e;
        }
    });

    // Two-ring ghost extension feeding wall-adjacent trilinear stencils.
    std::vector<std::uint8_t> filled(static_cast<size_t>(g.size()), 0);
    parallel_for(static_cast<std::ptrdiff_t>(g.size()),
                 [&](std::ptrdiff_t id) { filled[static_cast<size_t>(id)] = active(id) ? 1 : 0; });
    for (int ring = 0; ring < 3; ++ring) {
        std::vector<std::int64_t> todo;
        for (std::int64_t id = 0; id < g.size(); ++id) {
            if (filled[static_cast<size_t>(id)]) continue;
            const int ijk[3] = {static_cast<int>(id % g.n[0]),
                                static_cast<int>((id / g.n[0]) % g.n[1]),
                                static_cast<int>(id / strides[2])};
            bool near = false;
            for (int d = 0; d < 3 && !near; ++d) {
                if (ijk[d] >= 1 && filled[static_cast<size_t>(id - strides[d])]) near = true;
                if (ijk[d] + 1 < g.n[d] && filled[static_cast<size_t>(id + strides[d])]) near = true;
            }
            if (near) todo.push_back(id);
        }
        std::vector<Vec3> val(todo.size());
        parallel_for(static_cast<std::ptrdiff_t>(todo.size()), [&](std::ptrdiff_t t) {
            const std::int64_t id = todo[static_cast<size_t>(t)];
            const int ijk[3] = {static_cast<int>(id % g.n[0]),
                                static_cast<int>((id / g.n[0]) % g.n[1]),
                                static_cast<int>(id / strides[2])};
            Vec3 acc{};
            int cnt = 0;
            Vec3 copy_acc{};
            int copy_cnt = 0;
            for (int d = 0; d < 3; ++d) {
                for (int sgn = -1; sgn <= 1; sgn += 2) {
                    if (ijk[d] + sgn < 0 || ijk[d] + sgn >= g.n[d]) continue;
                    const std::int64_t n1 = id + sgn * strides[d];
                    if (!filled[static_cast<size_t>(n1)]) continue;
                    const Vec3 e1{f.ex[static_cast<size_t>(n1)], f.ey[static_cast<size_t>(n1)],
                                  f.ez[static_cast<size_t>(n1)]};
                    copy_acc += e1;
                    ++copy_cnt;
                    if (ijk[d] + 2 * sgn >= 0 && ijk[d] + 2 * sgn < g.n[d] &&
                        filled[static_cast<size_t>(id + 2 * sgn * strides[d])]) {
                        const std::int64_t n2 = id + 2 * sgn * strides[d];
                        acc += 2.0 * e1 - Vec3{f.ex[static_cast<size_t>(n2)],
                                               f.ey[static_cast<size_t>(n2)],
                                               f.ez[static_cast<size_t>(n2)]};
                        ++cnt;
                    }
                }
            }
            if (cnt > 0)
                val[static_cast<size_t>(t)] = acc / cnt;
            else if (copy_cnt > 0)
                val[static_cast<size_t>(t)] = copy_acc / copy_cnt;
        });
        for (size_t t = 0; t < todo.size(); ++t) {
            const std::int64_t id = todo[t];
            f.ex[static_cast<size_t>(id)] = val[t].x;
            f.ey[static_cast<size_t>(id)] = val[t].y;
            f.ez[static_cast<size_t>(id)] = val[t].z;
            filled[static_cast<size_t>(id)] = 1;
        }
    }

    f.solved = true;
}

Vec3 field_eval(const FieldState& f, const Vec3& x) {
    const PoissonGeometry& geo = *f.geo;
    const GridLayout& g = geo.grid;
    if (!geo.domain.inside(x, 1e-9)) fail(ErrorKind::OutOfTube, "field_eval outside the domain");
    const double gx = (x.x - g.lo.x) / g.h.x - 0.5;
    const double gy = (x.y - g.lo.y) / g.h.y - 0.5;
    const double gz = (x.z - g.lo.z) / g.h.z - 0.5;
    const int i0 = static_cast<int>(std::floor(gx));
    const int j0 = static_cast<int>(std::floor(gy));
    const int k0 = static_cast<int>(std::floor(gz));
    if (!g.in_range(i0, j0, k0) || !g.in_range(i0 + 1, j0 + 1, k0 + 1))
        fail(ErrorKind::OutOfTube, "field_eval outside the grid");
    const double fx = gx - i0, fy = gy - j0, fz = gz - k0;
    Vec3 acc{};
    for (int dk = 0; dk < 2; ++dk)
        for (int dj = 0; dj < 2; ++dj)
            for (int di = 0; di < 2; ++di) {
                const double w = (di ? fx : 1 - fx) * (dj ? fy : 1 - fy) * (dk ? fz : 1 - fz);
                const std::int64_t id = g.index(i0 + di, j0 + dj, k0 + dk);
                acc += w * Vec3{f.ex[static_cast<size_t>(id)], f.ey[static_cast<size_t>(id)],
                                f.ez[static_cast<size_t>(id)]};
            }
    return acc;
}

double interior_residual(const FieldState& f) {
    const PoissonGeometry& geo = *f.geo;
    const GridLayout& g = geo.grid;
    const std::int64_t strides[3] = {1, g.n[0], static_cast<std::int64_t>(g.n[0]) * g.n[1]};
    const double full[3] = {g.h.y * g.h.z / g.h.x, g.h.x * g.h.z / g.h.y, g.h.x * g.h.y / g.h.z};
    return deterministic_max(
        static_cast<std::ptrdiff_t>(geo.active_cells.size()),
        [&](std::ptrdiff_t u) {
            // Only cells whose equation is the plain 7-point one.
            for (int fc = 0; fc < 6; ++fc) {
                if (geo.nbr[static_cast<size_t>(u)][fc] < 0) return 0.0;
                if (std::abs(geo.face_coeff[static_cast<size_t>(u)][fc] - full[fc / 2]) >
                    1e-12 * full[fc / 2])
                    return 0.0;
            }
            const std::int64_t id = geo.active_cells[static_cast<size_t>(u)];
            double lap = 0.0;
            for (int d = 0; d < 3; ++d)
                lap += (f.phi[static_cast<size_t>(id + strides[d])] -
                        2 * f.phi[static_cast<size_t>(id)] +
                        f.phi[static_cast<size_t>(id - strides[d])]) /
                       (g.h[d] * g.h[d]);
            return std::abs(lap - f.rho[static_cast<size_t>(id)]);
        },
        0.0);
}

double rho_max(const FieldState& f) {
    const auto& cells = f.geo->interior_cells;
    return deterministic_max(
        static_cast<std::ptrdiff_t>(cells.size()),
        [&](std::ptrdiff_t i) {
            return std::abs(f.rho[static_cast<size_t>(cells[static_cast<size_t>(i)])]);
        },
        0.0);
}

double rho_l53(const FieldState& f) {
    const PoissonGeometry& geo = *f.geo;
    const double s = deterministic_sum(
        static_cast<std::ptrdiff_t>(geo.active_cells.size()), [&](std::ptrdiff_t u) {
            const std::int64_t id = geo.active_cells[static_cast<size_t>(u)];
            return std::pow(std::abs(f.rho[static_cast<size_t>(id)]), 5.0 / 3.0) *
                   geo.load_volume[static_cast<size_t>(u)];
        });
    return std::pow(s, 3.0 / 5.0);
}

double field_energy(const FieldState& f) {
    const PoissonGeometry& geo = *f.geo;
    return deterministic_sum(
        static_cast<std::ptrdiff_t>(geo.active_cells.size()), [&](std::ptrdiff_t u) {
            const std::int64_t id = geo.active_cells[static_cast<size_t>(u)];
            const Vec3 e{f.ex[static_cast<size_t>(id)], f.ey[static_cast<size_t>(id)],
                         f.ez[static_cast<size_t>(id)]};
            return norm2(e) * geo.load_volume[static_cast<size_t>(u)];
        });
}

}  // namespace vp
