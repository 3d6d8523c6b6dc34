#pragma once

#include <cstddef>
#include <vector>

#ifdef _OPENMP
#include <omp.h>
#endif

namespace vp {

// Deterministic parallel reductions.
//
// Every reduction that feeds an output file or a conservation check goes
// through deterministic_sum: values are accumulated within fixed-size index
// blocks and the block partials are folded in block order. The result is
// bitwise identical for any thread count, and identical to the serial path
// run over the same blocks.

inline constexpr std::ptrdiff_t kReductionBlock = 4096;

inline int max_threads() {
#ifdef _OPENMP
    return omp_get_max_threads();
#else
    return 1;
#endif
}

inline void set_threads(int n) {
#ifdef _OPENMP
    if (n > 0) omp_set_num_threads(n);
#else
    (void)n;
#endif
}

template <class F>
double deterministic_sum(std::ptrdiff_t n, F&& term, bool parallel = true) {
    const std::ptrdiff_t nblocks = (n + kReductionBlock - 1) / kReductionBlock;
    std::vector<double> partial(static_cast<size_t>(nblocks), 0.0);
#ifdef _OPENMP
#pragma omp parallel for schedule(static) if (parallel && nblocks > 1)
#endif
    for (std::ptrdiff_t b = 0; b < nblocks; ++b) {
        const std::ptrdiff_t lo = b * kReductionBlock;
        const std::ptrdiff_t hi = std::min(n, lo + kReductionBlock);
        double s = 0.0;
        for (std::ptrdiff_t i = lo; i < hi; ++i) s += term(i);
        partial[static_cast<size_t>(b)] = s;
    }
    double total = 0.0;
    for (double p : partial) total += p;
    return total;
}

template <class F>
double deterministic_max(std::ptrdiff_t n, F&& term, double init, bool parallel = true) {
    const std::ptrdiff_t nblocks = (n + kReductionBlock - 1) / kReductionBlock;
    std::vector<double> partial(static_cast<size_t>(nblocks), init);
#ifdef _OPENMP
#pragma omp parallel for schedule(static) if (parallel && nblocks > 1)
#endif
    for (std::ptrdiff_t b = 0; b < nblocks; ++b) {
        const std::ptrdiff_t lo = b * kReductionBlock;
        const std::ptrdiff_t hi = std::min(n, lo + kReductionBlock);
        double m = init;
        for (std::ptrdiff_t i = lo; i < hi; ++i) {
            const double v = term(i);
            if (v > m) m = v;
        }
        partial[static_cast<size_t>(b)] = m;
    }
    double total = init;
    for (double p : partial) total = p > total ? p : total;
    return total;
}

// Plain parallel loop over independent items (no reduction involved).
template <class F>
void parallel_for(std::ptrdiff_t n, F&& body, bool parallel = true) {
#ifdef _OPENMP
#pragma omp parallel for schedule(static) if (parallel && n > 1)
#endif
    for (std::ptrdiff_t i = 0; i < n; ++i) body(i);
}

}  // namespace vp
