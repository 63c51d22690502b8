#pragma once

// Dense kernels behind the tape and the batched evaluators. Every kernel has
// a serial reference path and an OpenMP path; both accumulate each output
// element in the same order, so their results are bit-identical.

#include <cstddef>
#include <span>

#ifdef _OPENMP
#include <omp.h>
#endif

namespace f2m::kernels {

enum class Exec { serial, parallel };

/// out[n x d_out] = in[n x d_in] * w[d_in x d_out] + bias[d_out]
void linear_forward(Exec exec, std::span<const double> in, std::size_t n, std::size_t d_in,
                    std::span<const double> w, std::size_t d_out,
                    std::span<const double> bias, std::span<double> out);

/// out[d_in x d_out] += a[n x d_in]^T * g[n x d_out]
void accumulate_at_b(Exec exec, std::span<const double> a, std::size_t n, std::size_t d_in,
                     std::span<const double> g, std::size_t d_out, std::span<double> out);

/// out[n x d_in] += g[n x d_out] * w[d_in x d_out]^T
void accumulate_a_bt(Exec exec, std::span<const double> g, std::size_t n, std::size_t d_out,
                     std::span<const double> w, std::size_t d_in, std::span<double> out);

/// Number of worker threads the parallel paths may use. Honors F2M_THREADS.
int thread_count();

/// Reads F2M_THREADS (if set) and caps the OpenMP team size accordingly.
void configure_threads_from_env();

/// Runs body(i) for i in [0, n). Iterations must be independent.
template <class Body>
void parallel_for(Exec exec, std::size_t n, Body&& body) {
    if (exec == Exec::serial || n < 2) {
        for (std::size_t i = 0; i < n; ++i) body(i);
        return;
    }
#ifdef _OPENMP
    const auto count = static_cast<long long>(n);
#pragma omp parallel for schedule(static)
    for (long long i = 0; i < count; ++i) body(static_cast<std::size_t>(i));
#else
    for (std::size_t i = 0; i < n; ++i) body(i);
#endif
}

}  // namespace f2m::kernels
