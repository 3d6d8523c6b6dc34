#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <vector>

#include "vp/geometry.hpp"
#include "vp/vec.hpp"

namespace vp {

struct Marker;  // transport.hpp

// Regular Cartesian grid over the domain's bounding box plus a two-cell
// margin per side (CIC stencils of wall markers stay in range).
struct GridLayout {
    int n[3] = {0, 0, 0};   // total cells per axis (includes the margin)
    Vec3 lo;                // corner of the first cell
    Vec3 h;                 // cell spacing per axis
    double cell_volume = 0.0;

    std::int64_t index(int i, int j, int k) const {
        return (static_cast<std::int64_t>(k) * n[1] + j) * n[0] + i;
    }
    std::int64_t size() const {
        return static_cast<std::int64_t>(n[0]) * n[1] * n[2];
    }
    Vec3 center(int i, int j, int k) const {
        return {lo.x + (i + 0.5) * h.x, lo.y + (j + 0.5) * h.y, lo.z + (k + 0.5) * h.z};
    }
    bool in_range(int i, int j, int k) const {
        return i >= 0 && j >= 0 && k >= 0 && i < n[0] && j < n[1] && k < n[2];
    }
};

// Surface quadrature mesh: Gauss-Legendre nodes in cos(theta) times a uniform
// azimuthal grid, with exact parametric area weights.
struct BoundaryNode {
    Vec3 pos;
    Vec3 normal;
    double weight = 0.0;  // area weight dS
};

struct BoundaryMesh {
    std::vector<BoundaryNode> nodes;  // row-major: i_theta * n_phi + i_phi
    int n_theta = 0, n_phi = 0;
    std::vector<double> mu;  // Gauss nodes in cos(theta), ascending
    double total_area = 0.0;
};

BoundaryMesh make_boundary_mesh(const ConvexDomain& dom, int n_theta, int n_phi);

// Immutable cut-cell geometry shared by every FieldState on the same grid.
//
// Cell classification:
//   outside  - wet volume below threshold; carries no unknown,
//   active   - solver unknown (wet fraction >= threshold),
//   interior - active and cell center inside Omega (the spec's mask; the
//              deposition target set).
// Fluxes act on faces between active cells; each active cell closes its wet
// control volume with a wall patch (area vector from the divergence closure,
// Neumann data evaluated at the projected wet centroid).
struct PoissonGeometry {
    ConvexDomain domain;
    GridLayout grid;
    BoundaryMesh mesh;

    std::vector<std::uint8_t> flag;      // 0 outside, 1 active, 2 interior
    std::vector<double> wet_fraction;    // Lambda per cell (0 outside)
    // Per active cell (indexed by the compact active list):
    std::vector<std::int64_t> active_cells;          // grid index of each unknown
    std::vector<std::int32_t> unknown_of_cell;       // grid index -> unknown id or -1
    std::vector<std::array<std::int32_t, 6>> nbr;    // unknown id of each face nbr or -1
    std::vector<std::array<double, 6>> face_coeff;   // aperture area / spacing
    // Wet-face centroid offsets from the face center along the two transverse
    // axes (other_axis order), in units of the transverse spacings; zero on
    // full faces. They drive the flux-centroid interpolation applied as a
    // defect correction on top of the symmetric two-point fluxes.
    std::vector<std::array<float, 6>> face_off1, face_off2;
    bool any_cut_faces = false;
    std::vector<double> wall_area;                   // |closure vector|
    std::vector<Vec3> wall_point;                    // wet centroid projected onto the wall
    std::vector<double> load_volume;                 // Lambda * cell volume
    // Bilinear (cos theta, phi) interpolation stencil of the mesh h samples
    // at each wall point; the per-cell loads h(c_w) S_w are rescaled once per
    // set_flux so their sum matches the quadrature flux integral exactly.
    std::vector<std::array<std::int32_t, 4>> wall_h_nodes;
    std::vector<std::array<double, 4>> wall_h_weights;

    std::vector<std::int64_t> interior_cells;
    // For every cell that can appear in a wall-adjacent CIC stencil, the
    // nearest interior cell (grid index) as a clip fallback.
    std::vector<std::int32_t> clip_target;

    double wet_volume = 0.0;   // sum Lambda * V
    double wall_total = 0.0;   // sum of wall patch areas

    std::int64_t cell_of_point(const Vec3& x, int* i, int* j, int* k) const;
};

std::shared_ptr<const PoissonGeometry> build_poisson_geometry(const ConvexDomain& dom,
                                                              int grid_n, int mesh_n_theta = 32);

struct FieldState {
    std::shared_ptr<const PoissonGeometry> geo;
    std::vector<double> rho;   // density w.r.t. wet volume; integral = sum rho*Lambda*V
    std::vector<double> phi;   // zero-mean gauge over the wet volume
    std::vector<double> ex, ey, ez;
    std::vector<double> h;         // Neumann samples on mesh nodes
    std::vector<double> wall_load; // per-unknown integral of h over its wall patch
    double charge = 0.0;           // authoritative total of rho over Omega
    bool solved = false;

    explicit FieldState(std::shared_ptr<const PoissonGeometry> g);
    FieldState() = default;
};

struct PoissonOptions {
    double tol = 1e-8;        // CG relative residual
    int max_iter = 20000;
    double compat_tol = 1e-8; // relative compatibility tolerance
};

// Cloud-in-cell deposition of marker charge; near-wall shares falling on
// non-interior cells are folded back onto the interior part of the stencil
// (mass preserved exactly). Deterministic for a fixed thread count.
void deposit_density(const std::vector<Marker>& markers, FieldState& f, bool parallel = true);

// Analytic density fill on the whole grid; charge = wet-volume integral.
void fill_density(FieldState& f, const std::function<double(const Vec3&)>& rho_fn);

// Uniform or analytic Neumann data on the quadrature mesh.
void set_flux(FieldState& f, double uniform_value);
void set_flux(FieldState& f, const std::function<double(const Vec3&, const Vec3&)>& h_fn);
double flux_integral(const FieldState& f);  // quadrature of h over the wall

// charge - integral of h (positive means surplus interior charge).
double check_compatibility(const FieldState& f);

// Conjugate-gradient solve of the cut-cell Neumann problem with the constant
// null mode projected out of the load; phi in the zero-mean gauge, E by
// centered/one-sided differences plus a two-ring ghost extension.
void solve_neumann(FieldState& f, const PoissonOptions& opt = {});

// Trilinear field interpolation; valid for x in the closed domain.
Vec3 field_eval(const FieldState& f, const Vec3& x);

// Max-norm of the discrete residual Delta_h phi - rho over cells whose full
// 7-point stencil is active (a consistency diagnostic, not the solver stop).
double interior_residual(const FieldState& f);

// Density norms over the interior mask.
double rho_max(const FieldState& f);
double rho_l53(const FieldState& f);
double field_energy(const FieldState& f);  // integral of |E|^2 over the wet volume

}  // namespace vp
