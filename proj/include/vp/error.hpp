#pragma once

#include <stdexcept>
#include <string>

namespace vp {

// Failure taxonomy. The CLI maps categories to process exit codes
// (config=2, solver=3, integrity=4, non-convergence=5).
enum class ErrorKind {
    Config,          // bad configuration / malformed input
    OutOfTube,       // point outside the boundary chart's tube of validity
    ChartSingular,   // parametrization pole / degenerate tangent basis
    MetricDegenerate,// 1 - k_j x_perp <= 0 inside a chart formula
    SingularSet,     // alpha hit zero (grazing phase point)
    GrazingCascade,  // reflection cascade within one step
    NewtonFailure,   // chart inversion did not converge
    SolverFailure,   // linear solver stagnated / diverged
    Incompatible,    // Neumann compatibility condition violated
    HistoryMissing,  // field history does not cover a requested time
    Correspondence,  // marker collections from different lattices
    ClusterSplit,    // Liouville cluster straddles a grazing event
    Admissibility,   // initial data violates f0 >= 0 / flatness / h > 0
    Integrity,       // internal invariant broken (marker left the domain, ...)
    OutOfRegime,     // diagnostic preconditions not met (e.g. Q < 1)
};

class Error : public std::runtime_error {
  public:
    Error(ErrorKind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
    ErrorKind kind() const { return kind_; }

  private:
    ErrorKind kind_;
};

[[noreturn]] inline void fail(ErrorKind kind, const std::string& msg) { throw Error(kind, msg); }

// Exit codes used by the CLI and acceptance harness.
enum ExitCode : int {
    kExitOk = 0,
    kExitConfig = 2,
    kExitSolver = 3,
    kExitIntegrity = 4,
    kExitNonConvergence = 5,
};

inline int exit_code_for(ErrorKind kind) {
    switch (kind) {
        case ErrorKind::Config: return kExitConfig;
        case ErrorKind::SolverFailure:
        case ErrorKind::NewtonFailure: return kExitSolver;
        default: return kExitIntegrity;
    }
}

}  // namespace vp
