#pragma once

// Shared fixtures and independent oracles for the test suites.

#include <cmath>
#include <cstdint>
#include <random>
#include <vector>

#include "f2m/bench.hpp"
#include "f2m/dataset.hpp"
#include "f2m/net.hpp"
#include "f2m/tensor.hpp"

namespace f2m::oracle {

inline Tensor random_matrix(std::size_t r, std::size_t c, std::mt19937_64& rng, double scale = 1.0) {
    std::normal_distribution<double> d(0.0, scale);
    std::vector<double> v(r * c);
    for (double& x : v) x = d(rng);
    return Tensor({r, c}, std::move(v));
}

inline std::vector<double> random_vector(std::size_t n, std::mt19937_64& rng, double scale = 1.0) {
    std::normal_distribution<double> d(0.0, scale);
    std::vector<double> v(n);
    for (double& x : v) x = d(rng);
    return v;
}

/// Textbook triple loop: out = in * w + bias.
inline std::vector<double> matmul_oracle(const std::vector<double>& in, std::size_t n, std::size_t d_in,
                                         const std::vector<double>& w, std::size_t d_out,
                                         const std::vector<double>& bias) {
    std::vector<double> out(n * d_out);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < d_out; ++j) {
            double s = 0.0;
            for (std::size_t k = 0; k < d_in; ++k) s += in[i * d_in + k] * w[k * d_out + j];
            out[i * d_out + j] = s + bias[j];
        }
    return out;
}

/// Labeled Gaussian blobs, labels 0..classes-1 unless `first_label` shifts them.
inline Dataset blobs(std::size_t classes, std::size_t per_class, std::size_t dim, double separation,
                     std::uint64_t seed, int first_label = 0) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> unit(0.0, 1.0);
    Dataset d(dim);
    for (std::size_t c = 0; c < classes; ++c) {
        std::vector<double> mean(dim);
        for (double& m : mean) m = separation * unit(rng);
        for (std::size_t s = 0; s < per_class; ++s) {
            std::vector<double> x(dim);
            for (std::size_t k = 0; k < dim; ++k) x[k] = mean[k] + unit(rng);
            d.add(x, first_label + static_cast<int>(c));
        }
    }
    return d;
}

inline NetworkConfig small_net(std::size_t in, std::vector<std::size_t> hidden, std::size_t emb, std::size_t classes,
                               std::size_t last_k, std::uint64_t seed) {
    NetworkConfig c;
    c.input_dim = in;
    c.hidden = std::move(hidden);
    c.embedding_dim = emb;
    c.class_count = classes;
    c.noise_last_k = last_k;
    c.seed = seed;
    return c;
}

/// Scalar-loop embedding of one sample (ReLU between layers, linear last layer).
inline std::vector<double> embed_oracle(const ParamSet& p, std::span<const double> x) {
    std::vector<double> h(x.begin(), x.end());
    const std::size_t layers = p.embedding_layers();
    for (std::size_t l = 0; l < layers; ++l) {
        const Tensor& w = p[2 * l].value;
        const Tensor& b = p[2 * l + 1].value;
        std::vector<double> next(w.cols());
        for (std::size_t j = 0; j < w.cols(); ++j) {
            double s = 0.0;
            for (std::size_t k = 0; k < w.rows(); ++k) s += h[k] * w.at(k, j);
            s += b[j];
            next[j] = (l + 1 < layers && s < 0.0) ? 0.0 : s;
        }
        h = std::move(next);
    }
    return h;
}

/// Default desk benchmark at the bound used for the directional checks.
inline ExperimentConfig desk_benchmark(std::uint64_t seed) {
    ExperimentConfig c;
    c.seed = seed;
    c.train.noise.bound = 0.03;
    return c;
}

}  // namespace f2m::oracle
