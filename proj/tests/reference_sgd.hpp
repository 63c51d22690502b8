#pragma once

// Plain minibatch SGD on an MLP + softmax head, written with explicit loops
// and no tape. Used as the oracle for noise-free, penalty-free base training.

#include <algorithm>
#include <cmath>
#include <map>
#include <vector>

#include "f2m/dataset.hpp"
#include "f2m/net.hpp"
#include "f2m/random.hpp"

namespace f2m::oracle {

struct Layer {
    std::size_t in = 0, out = 0;
    std::vector<double> w, b;
};

inline std::vector<Layer> layers_of(const ParamSet& p) {
    std::vector<Layer> ls;
    for (std::size_t i = 0; i + 1 < p.size(); i += 2)
        ls.push_back({p[i].value.rows(), p[i].value.cols(), p[i].value.values(), p[i + 1].value.values()});
    return ls;
}

/// Runs `steps` SGD updates from the network initialised by `net` and returns
/// the flattened parameters (same layout as ParamSet::flatten).
inline std::vector<double> reference_sgd(const Dataset& data, NetworkConfig net, std::size_t batch_size, double lr,
                                         std::uint64_t train_seed, std::size_t steps) {
    std::map<int, std::size_t> head;
    for (int y : data.labels) head.emplace(y, 0);
    std::size_t next = 0;
    for (auto& [c, idx] : head) idx = next++;
    net.class_count = head.size();
    std::vector<Layer> L = layers_of(init_network(net));
    const std::size_t depth = L.size();

    Rng shuffle(derive_seed(train_seed, 1));
    std::size_t done = 0;
    while (done < steps) {
        const auto order = permutation(data.size(), shuffle);
        for (std::size_t start = 0; start < order.size() && done < steps; start += batch_size, ++done) {
            const std::size_t n = std::min(order.size(), start + batch_size) - start;
            // Forward, keeping every layer's output (post-activation for hidden layers).
            std::vector<std::vector<double>> act(depth + 1);
            act[0].resize(n * data.dim);
            for (std::size_t i = 0; i < n; ++i) {
                const auto row = data.row(order[start + i]);
                std::copy(row.begin(), row.end(), act[0].begin() + static_cast<long>(i * data.dim));
            }
            for (std::size_t l = 0; l < depth; ++l) {
                const Layer& ly = L[l];
                act[l + 1].assign(n * ly.out, 0.0);
                for (std::size_t i = 0; i < n; ++i) {
                    double* o = &act[l + 1][i * ly.out];
                    for (std::size_t k = 0; k < ly.in; ++k)
                        for (std::size_t j = 0; j < ly.out; ++j) o[j] += act[l][i * ly.in + k] * ly.w[k * ly.out + j];
                    for (std::size_t j = 0; j < ly.out; ++j) o[j] += ly.b[j];
                    // ReLU after every embedding layer except the last; never after the head.
                    if (l + 2 < depth)
                        for (std::size_t j = 0; j < ly.out; ++j) o[j] = o[j] > 0.0 ? o[j] : 0.0;
                }
            }
            // Softmax cross-entropy gradient with respect to the logits.
            const std::size_t c = L.back().out;
            std::vector<double> g(n * c);
            const double scale = 1.0 / static_cast<double>(n);
            for (std::size_t i = 0; i < n; ++i) {
                const double* z = &act[depth][i * c];
                double m = z[0];
                for (std::size_t j = 1; j < c; ++j) m = std::max(m, z[j]);
                double s = 0.0;
                for (std::size_t j = 0; j < c; ++j) s += std::exp(z[j] - m);
                const double lse = m + std::log(s);
                const std::size_t y = head.at(data.labels[order[start + i]]);
                for (std::size_t j = 0; j < c; ++j) g[i * c + j] = scale * (std::exp(z[j] - lse) - (j == y ? 1.0 : 0.0));
            }
            // Backward, then update every layer.
            std::vector<std::vector<double>> gw(depth), gb(depth);
            for (std::size_t l = depth; l-- > 0;) {
                const Layer& ly = L[l];
                gw[l].assign(ly.in * ly.out, 0.0);
                gb[l].assign(ly.out, 0.0);
                for (std::size_t k = 0; k < ly.in; ++k)
                    for (std::size_t i = 0; i < n; ++i)
                        for (std::size_t j = 0; j < ly.out; ++j)
                            gw[l][k * ly.out + j] += act[l][i * ly.in + k] * g[i * ly.out + j];
                for (std::size_t i = 0; i < n; ++i)
                    for (std::size_t j = 0; j < ly.out; ++j) gb[l][j] += g[i * ly.out + j];
                if (l == 0) break;
                std::vector<double> gin(n * ly.in, 0.0);
                for (std::size_t i = 0; i < n; ++i)
                    for (std::size_t k = 0; k < ly.in; ++k) {
                        double acc = 0.0;
                        for (std::size_t j = 0; j < ly.out; ++j) acc += g[i * ly.out + j] * ly.w[k * ly.out + j];
                        gin[i * ly.in + k] = acc;
                    }
                // act[l] is post-ReLU except for the embedding output feeding the head.
                if (l + 1 < depth)
                    for (std::size_t i = 0; i < gin.size(); ++i)
                        if (!(act[l][i] > 0.0)) gin[i] = 0.0;
                g = std::move(gin);
            }
            for (std::size_t l = 0; l < depth; ++l) {
                for (std::size_t i = 0; i < L[l].w.size(); ++i) L[l].w[i] -= lr * gw[l][i];
                for (std::size_t i = 0; i < L[l].b.size(); ++i) L[l].b[i] -= lr * gb[l][i];
            }
        }
    }
    std::vector<double> flat;
    for (const Layer& ly : L) {
        flat.insert(flat.end(), ly.w.begin(), ly.w.end());
        flat.insert(flat.end(), ly.b.begin(), ly.b.end());
    }
    return flat;
}

}  // namespace f2m::oracle
