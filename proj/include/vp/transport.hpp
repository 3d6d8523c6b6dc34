#pragma once

#include <functional>
#include <string>
#include <vector>

#include "vp/characteristics.hpp"
#include "vp/geometry.hpp"
#include "vp/poisson.hpp"
#include "vp/vec.hpp"

namespace vp {

// One Lagrangian sample of f: the carried value and the phase-space volume
// element are constants of motion; only (x, v) evolve.
struct Marker {
    Vec3 x, v;
    double f_value = 0.0;
    double weight = 0.0;
};

enum class ProfileKind { FlatBump, DoubleBump };

// Compactly supported initial data, constant (here: zero) near the singular
// set. Separable bumps a(|x - center|) g(|v|) satisfy f0(x, v) = f0(x, v*)
// identically because reflection preserves |v|.
struct InitialDataSpec {
    ProfileKind profile = ProfileKind::FlatBump;
    Vec3 center{};          // x-space center
    double radius_x = 0.3;
    double radius_v = 1.2;
    double amplitude = 1.0;
    double separation = 0.35;  // double_bump: centers at center +- (sep,0,0)
    double delta0 = 0.05;      // flatness radius in alpha units
    double flat_value = 0.0;   // value on the near-singular shell
    double flatness_c = 1.0;   // alpha <= c * delta0 defines the tested shell
    Vec3 support_x{0.6, 0.6, 0.6};  // lattice half-widths around center
    Vec3 support_v{2.4, 2.4, 2.4};

    double eval(const Vec3& x, const Vec3& v) const;
};

// Uniform phase-space lattice (cell midpoints) over the support box,
// intersected with the domain; zero-valued markers are dropped. Throws
// Admissibility on negative values or flatness violations.
std::vector<Marker> sample_initial(const InitialDataSpec& spec, const ConvexDomain& dom,
                                   int n_per_dim, bool parallel = true);

// Flatness check: f0 must equal flat_value on sampled tube states with
// alpha <= flatness_c * delta0. Returns offending states (empty = pass).
struct FlatnessViolation {
    Vec3 x, v;
    double alpha = 0.0;
    double value = 0.0;
};
std::vector<FlatnessViolation> check_flatness(const InitialDataSpec& spec,
                                              const ConvexDomain& dom, int samples = 4000);

// Deterministic fixed-block reductions over a collection.
double marker_mass(const std::vector<Marker>& m);          // sum f w
double marker_lp(const std::vector<Marker>& m, double p);  // (sum f^p w)^(1/p)
double marker_max_f(const std::vector<Marker>& m);
double marker_max_speed(const std::vector<Marker>& m);     // over f > 0
double marker_kinetic(const std::vector<Marker>& m);       // sum f w |v|^2

// Scale h_base so that the wall flux integral equals the marker mass exactly
// (S1E4b); h_base must be positive. Returns the applied scale factor.
double normalize_flux(const std::vector<Marker>& markers, FieldState& f, double h_base);
double normalize_flux_to_charge(double charge, FieldState& f, double h_base);

// Advance every marker one macro step through the frozen field. Values and
// weights are untouched; bounce counts accumulate into `bounces` when given.
void pushforward(std::vector<Marker>& markers, const ConvexDomain& dom, const FieldState& field,
                 double dt, std::vector<int>* bounces = nullptr, bool parallel = true);

// Same loop against a field history snapshot (used by replays).
void pushforward_history(std::vector<Marker>& markers, const ConvexDomain& dom,
                         const FieldHistory& history, int step, std::vector<int>* bounces,
                         bool parallel = true);

}  // namespace vp
