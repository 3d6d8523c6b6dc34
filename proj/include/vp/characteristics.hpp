#pragma once

#include <optional>
#include <vector>

#include "vp/geometry.hpp"
#include "vp/poisson.hpp"
#include "vp/vec.hpp"

namespace vp {

// One generalized characteristic: dX/ds = V, dV/ds = E, specular reflection
// whenever X reaches the wall.
struct TrajectoryState {
    Vec3 x, v;
    double s = 0.0;   // current time
    int bounces = 0;  // cumulative bounce count H
};

inline constexpr int kMaxBouncesPerStep = 64;

// One macro step of the symmetric splitting integrator: half kick, exact
// free drift with reflection sub-events, half kick. dt may be negative
// (time-reversed step); the field is frozen over the step.
TrajectoryState advance(const ConvexDomain& dom, TrajectoryState state, const FieldState& field,
                        double dt);

// Drift-only sub-step (no field): exact chords and reflections. Exposed for
// the kernels and tests.
void drift_reflect(const ConvexDomain& dom, Vec3& x, Vec3& v, double duration, int& bounces);

// Piecewise-constant-in-time field history over macro steps: snapshot k holds
// the field of time t0 + k dt, used as the force over [t_k, t_{k+1}).
// Snapshots store the gradient compactly (float) to keep long histories
// affordable; lookups build no copies.
class FieldHistory {
  public:
    FieldHistory() = default;
    FieldHistory(std::shared_ptr<const PoissonGeometry> geo, double t0, double dt);

    void push(const FieldState& f);          // append next snapshot
    void push_static(const FieldState& f, int steps);  // same field for all steps
    int steps() const { return static_cast<int>(snaps_.size()); }
    double t0() const { return t0_; }
    double dt() const { return dt_; }
    double t_end() const { return t0_ + dt_ * steps(); }

    // Field vector at position x for time s (staircase reconstruction).
    Vec3 eval(const Vec3& x, double s) const;
    int step_of(double s) const;  // throws HistoryMissing outside the horizon

    // View of snapshot k as an evaluable field.
    Vec3 eval_step(const Vec3& x, int k) const;

  private:
    std::shared_ptr<const PoissonGeometry> geo_;
    double t0_ = 0.0, dt_ = 0.0;
    struct Snap {
        std::vector<float> e[3];
    };
    std::vector<Snap> snaps_;
};

// Integrate from (x, v) at time t to s_target through the stored history.
TrajectoryState trace(const ConvexDomain& dom, const Vec3& x, const Vec3& v, double t,
                      double s_target, const FieldHistory& history);

// One macro step against a single history snapshot.
TrajectoryState advance_with_history(const ConvexDomain& dom, TrajectoryState s,
                                     const FieldHistory& history, int step, double dt);

// Transport the 7 vertices of a phase-space simplex of size eps through one
// macro step and return final/initial volume ratio. Throws ClusterSplit when
// the vertices disagree on the bounce count.
double liouville_check(const ConvexDomain& dom, const FieldState& field, const Phase& base,
                       double eps, double dt);

}  // namespace vp
