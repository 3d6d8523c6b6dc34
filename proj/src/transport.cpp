#include "vp/transport.hpp"

#include <algorithm>
#include <cmath>

#include "vp/chart.hpp"
#include "vp/parallel.hpp"

namespace vp {

namespace {

// C^3 bump shape on [0, 1): (1 - u^2)^4.
double bump(double u) {
    if (!(std::abs(u) < 1.0)) return 0.0;
    const double s = 1.0 - u * u;
    const double s2 = s * s;
    return s2 * s2;
}

}  // namespace

double InitialDataSpec::eval(const Vec3& x, const Vec3& v) const {
    const double gv = bump(norm(v) / radius_v);
    if (gv == 0.0) return 0.0;
    switch (profile) {
        case ProfileKind::FlatBump:
            return amplitude * bump(norm(x - center) / radius_x) * gv;
        case ProfileKind::DoubleBump: {
            const Vec3 off{separation, 0.0, 0.0};
            return amplitude *
                   (bump(norm(x - center - off) / radius_x) +
                    bump(norm(x - center + off) / radius_x)) *
                   gv;
        }
    }
    return 0.0;
}

std::vector<Marker> sample_initial(const InitialDataSpec& spec, const ConvexDomain& dom,
                                   int n_per_dim, bool parallel) {
    if (n_per_dim < 2) fail(ErrorKind::Config, "init.n_per_dim must be at least 2");
    const int n = n_per_dim;
    const Vec3 hx{2 * spec.support_x.x / n, 2 * spec.support_x.y / n, 2 * spec.support_x.z / n};
    const Vec3 hv{2 * spec.support_v.x / n, 2 * spec.support_v.y / n, 2 * spec.support_v.z / n};
    const double weight = hx.x * hx.y * hx.z * hv.x * hv.y * hv.z;

    // Lattice of cell midpoints; per-slab buffers are concatenated in slab
    // order so the marker order is the lattice order for any thread count.
    std::vector<std::vector<Marker>> slab(static_cast<size_t>(n));
    std::vector<std::uint8_t> negative(static_cast<size_t>(n), 0);
    parallel_for(
        n,
        [&](std::ptrdiff_t i0) {
            auto& out = slab[static_cast<size_t>(i0)];
            Vec3 x, v;
            x.x = spec.center.x - spec.support_x.x + (i0 + 0.5) * hx.x;
            for (int i1 = 0; i1 < n; ++i1) {
                x.y = spec.center.y - spec.support_x.y + (i1 + 0.5) * hx.y;
                for (int i2 = 0; i2 < n; ++i2) {
                    x.z = spec.center.z - spec.support_x.z + (i2 + 0.5) * hx.z;
                    if (!dom.inside(x)) continue;
                    for (int i3 = 0; i3 < n; ++i3) {
                        v.x = -spec.support_v.x + (i3 + 0.5) * hv.x;
                        for (int i4 = 0; i4 < n; ++i4) {
                            v.y = -spec.support_v.y + (i4 + 0.5) * hv.y;
                            for (int i5 = 0; i5 < n; ++i5) {
                                v.z = -spec.support_v.z + (i5 + 0.5) * hv.z;
                                const double f = spec.eval(x, v);
                                if (f < 0.0) {
                                    negative[static_cast<size_t>(i0)] = 1;
                                    return;
                                }
                                if (f > 0.0) out.push_back({x, v, f, weight});
                            }
                        }
                    }
                }
            }
        },
        parallel);
    for (auto flag : negative)
        if (flag) fail(ErrorKind::Admissibility, "initial profile is negative on the lattice");

    std::vector<Marker> markers;
    size_t total = 0;
    for (const auto& s : slab) total += s.size();
    markers.reserve(total);
    for (auto& s : slab) markers.insert(markers.end(), s.begin(), s.end());

    const auto violations = check_flatness(spec, dom, 2000);
    if (!violations.empty())
        fail(ErrorKind::Admissibility,
             "initial profile is not constant on the near-singular shell");
    return markers;
}

std::vector<FlatnessViolation> check_flatness(const InitialDataSpec& spec,
                                              const ConvexDomain& dom, int samples) {
    // The shell is tested in the equivalence variable v_perp^2/2 + x_perp
    // (alpha with |F0| normalized to 1); the admissible band scales with
    // flatness_c. States are built directly in the chart.
    std::vector<FlatnessViolation> bad;
    const double cap = spec.flatness_c * spec.delta0;
    const int n_ang = std::max(4, static_cast<int>(std::sqrt(static_cast<double>(samples) / 8)));
    const double margin = dom.pole_margin() + 0.05;
    for (int it = 0; it < n_ang; ++it) {
        const double th = margin + (M_PI - 2 * margin) * (it + 0.5) / n_ang;
        for (int ip = 0; ip < 2 * n_ang; ++ip) {
            const double ph = -M_PI + 2 * M_PI * (ip + 0.5) / (2 * n_ang);
            const SurfaceTensors t = dom.surface_tensors(ChartId::ZPoles, th, ph);
            for (double fx : {0.0, 0.3, 1.0}) {
                const double x_perp = std::min(fx * cap, dom.delta_tube());
                const double vmax = std::sqrt(std::max(0.0, 2.0 * (cap - x_perp)));
                for (double fv : {-1.0, -0.4, 0.0, 0.4, 1.0}) {
                    const double v_perp = fv * vmax;
                    for (double wmag : {0.0, 0.5 * spec.radius_v, 0.95 * spec.radius_v}) {
                        const Vec3 x =
                            dom.point_from_chart({ChartId::ZPoles, th, ph, x_perp});
                        const Vec3 v = velocity_from_chart(
                            t, wmag / std::sqrt(std::max(t.g11, 1e-30)), 0.0, v_perp);
                        const double val = spec.eval(x, v);
                        if (std::abs(val - spec.flat_value) > 1e-12) {
                            bad.push_back({x, v, v_perp * v_perp / 2 + x_perp, val});
                            if (bad.size() > 32) return bad;
                        }
                    }
                }
            }
        }
    }
    return bad;
}

double marker_mass(const std::vector<Marker>& m) {
    return deterministic_sum(static_cast<std::ptrdiff_t>(m.size()), [&](std::ptrdiff_t i) {
        return m[static_cast<size_t>(i)].f_value * m[static_cast<size_t>(i)].weight;
    });
}

double marker_lp(const std::vector<Marker>& m, double p) {
    const double s = deterministic_sum(static_cast<std::ptrdiff_t>(m.size()), [&](std::ptrdiff_t i) {
        return std::pow(m[static_cast<size_t>(i)].f_value, p) * m[static_cast<size_t>(i)].weight;
    });
    return std::pow(s, 1.0 / p);
}

double marker_max_f(const std::vector<Marker>& m) {
    return deterministic_max(
        static_cast<std::ptrdiff_t>(m.size()),
        [&](std::ptrdiff_t i) { return m[static_cast<size_t>(i)].f_value; }, 0.0);
}

double marker_max_speed(const std::vector<Marker>& m) {
    return deterministic_max(
        static_cast<std::ptrdiff_t>(m.size()),
        [&](std::ptrdiff_t i) {
            return m[static_cast<size_t>(i)].f_value > 0.0 ? norm(m[static_cast<size_t>(i)].v)
                                                           : 0.0;
        },
        0.0);
}

double marker_kinetic(const std::vector<Marker>& m) {
    return deterministic_sum(static_cast<std::ptrdiff_t>(m.size()), [&](std::ptrdiff_t i) {
        const Marker& mk = m[static_cast<size_t>(i)];
        return mk.f_value * mk.weight * norm2(mk.v);
    });
}

double normalize_flux_to_charge(double charge, FieldState& f, double h_base) {
    if (!(h_base > 0.0)) fail(ErrorKind::Admissibility, "h must be positive on the wall");
    if (!(charge > 0.0)) fail(ErrorKind::Admissibility, "cannot normalize h to zero mass");
    set_flux(f, h_base);
    const double integral = flux_integral(f);
    const double scale = charge / integral;
    set_flux(f, h_base * scale);
    return scale;
}

double normalize_flux(const std::vector<Marker>& markers, FieldState& f, double h_base) {
    return normalize_flux_to_charge(marker_mass(markers), f, h_base);
}

void pushforward(std::vector<Marker>& markers, const ConvexDomain& dom, const FieldState& field,
                 double dt, std::vector<int>* bounces, bool parallel) {
    if (bounces && bounces->size() != markers.size())
        fail(ErrorKind::Integrity, "bounce array size mismatch");
    parallel_for(
        static_cast<std::ptrdiff_t>(markers.size()),
        [&](std::ptrdiff_t i) {
            Marker& mk = markers[static_cast<size_t>(i)];
            TrajectoryState st{mk.x, mk.v, 0.0, 0};
            st = advance(dom, st, field, dt);
            mk.x = st.x;
            mk.v = st.v;
            if (bounces) (*bounces)[static_cast<size_t>(i)] += st.bounces;
        },
        parallel);
}

void pushforward_history(std::vector<Marker>& markers, const ConvexDomain& dom,
                         const FieldHistory& history, int step, std::vector<int>* bounces,
                         bool parallel) {
    if (bounces && bounces->size() != markers.size())
        fail(ErrorKind::Integrity, "bounce array size mismatch");
    parallel_for(
        static_cast<std::ptrdiff_t>(markers.size()),
        [&](std::ptrdiff_t i) {
            Marker& mk = markers[static_cast<size_t>(i)];
            TrajectoryState st{mk.x, mk.v, 0.0, 0};
            st = advance_with_history(dom, st, history, step, history.dt());
            mk.x = st.x;
            mk.v = st.v;
            if (bounces) (*bounces)[static_cast<size_t>(i)] += st.bounces;
        },
        parallel);
}

}  // namespace vp
