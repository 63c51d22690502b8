#include "f2m/kernels.hpp"

#include <cstdlib>
#include <string>

namespace f2m::kernels {

namespace {

void linear_row(std::span<const double> in, std::size_t i, std::size_t d_in,
                std::span<const double> w, std::size_t d_out, std::span<const double> bias,
                std::span<double> out) {
    double* o = out.data() + i * d_out;
    const double* x = in.data() + i * d_in;
    for (std::size_t j = 0; j < d_out; ++j) o[j] = 0.0;
    for (std::size_t k = 0; k < d_in; ++k) {
        const double xk = x[k];
        const double* wk = w.data() + k * d_out;
        for (std::size_t j = 0; j < d_out; ++j) o[j] += xk * wk[j];
    }
    for (std::size_t j = 0; j < d_out; ++j) o[j] += bias[j];
}

}  // namespace

void linear_forward(Exec exec, std::span<const double> in, std::size_t n, std::size_t d_in,
                    std::span<const double> w, std::size_t d_out,
                    std::span<const double> bias, std::span<double> out) {
    parallel_for(exec, n, [&](std::size_t i) { linear_row(in, i, d_in, w, d_out, bias, out); });
}

void accumulate_at_b(Exec exec, std::span<const double> a, std::size_t n, std::size_t d_in,
                     std::span<const double> g, std::size_t d_out, std::span<double> out) {
    // Row k of the output only reads column k of a, so rows are independent.
    parallel_for(exec, d_in, [&](std::size_t k) {
        double* o = out.data() + k * d_out;
        for (std::size_t i = 0; i < n; ++i) {
            const double aik = a[i * d_in + k];
            const double* gi = g.data() + i * d_out;
            for (std::size_t j = 0; j < d_out; ++j) o[j] += aik * gi[j];
        }
    });
}

void accumulate_a_bt(Exec exec, std::span<const double> g, std::size_t n, std::size_t d_out,
                     std::span<const double> w, std::size_t d_in, std::span<double> out) {
    parallel_for(exec, n, [&](std::size_t i) {
        const double* gi = g.data() + i * d_out;
        double* o = out.data() + i * d_in;
        for (std::size_t k = 0; k < d_in; ++k) {
            const double* wk = w.data() + k * d_out;
            double acc = 0.0;
            for (std::size_t j = 0; j < d_out; ++j) acc += gi[j] * wk[j];
            o[k] += acc;
        }
    });
}

int thread_count() {
#ifdef _OPENMP
    return omp_get_max_threads();
#else
    return 1;
#endif
}

void configure_threads_from_env() {
    const char* env = std::getenv("F2M_THREADS");
    if (!env || !*env) return;
    int cap = 0;
    try {
        cap = std::stoi(env);
    } catch (...) {
        return;
    }
    if (cap < 1) return;
#ifdef _OPENMP
    omp_set_num_threads(cap);
#endif
}

}  // namespace f2m::kernels
