#pragma once

// Reverse-mode differentiation over a per-forward-pass tape.
//
// A Tape records nodes in topological order. Leaves are either constants or
// parameters; backward() returns one gradient per parameter, in the order the
// parameters were registered. A tape belongs to one thread; independent tapes
// may be built concurrently over shared read-only tensors.

#include <cstddef>
#include <functional>
#include <span>
#include <vector>

#include "f2m/tensor.hpp"

namespace f2m::ad {

class Tape;

class Var {
public:
    Var() = default;
    const Tensor& value() const;
    std::size_t id() const noexcept { return id_; }
    Tape* tape() const noexcept { return tape_; }

private:
    friend class Tape;
    Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}
    Tape* tape_ = nullptr;
    std::size_t id_ = 0;
};

class Tape {
public:
    using Inputs = std::span<const Tensor* const>;
    using Forward = std::function<Tensor(Inputs in)>;
    /// grad_in[k] is null when operand k does not need a gradient.
    using Backward = std::function<void(const Tensor& grad_out, Inputs in, const Tensor& out,
                                        std::span<Tensor* const> grad_in)>;

    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    Var constant(Tensor value);
    Var parameter(Tensor value);

    Var record(std::vector<Var> inputs, Forward forward, Backward backward);

    const Tensor& value(Var v) const;
    std::size_t size() const noexcept { return nodes_.size(); }
    std::size_t parameter_count() const noexcept { return params_.size(); }

    /// Recomputes every non-leaf node from its operands' recorded values.
    std::vector<Tensor> replay() const;

    /// d(loss)/d(parameter) for every registered parameter.
    std::vector<Tensor> backward(Var loss) const;

private:
    struct Node {
        std::vector<std::size_t> inputs;
        Tensor value;
        Forward forward;
        Backward backward;
        bool needs_grad = false;
    };

    void check_owned(Var v) const;

    std::vector<Node> nodes_;
    std::vector<std::size_t> params_;
};

inline std::vector<Tensor> backward(const Tape& tape, Var loss) { return tape.backward(loss); }

// Differentiable primitives.

Var linear(Var input, Var weight, Var bias);
Var relu(Var input);
/// Mean over rows of -log softmax(logits)[label].
Var softmax_cross_entropy(Var logits, std::span<const std::size_t> labels);
Var squared_euclidean(Var a, Var b);

Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var scale(Var a, double factor);
Var sum(Var a);
/// Mean of the selected rows of a matrix, as a vector.
Var mean_rows(Var x, std::span<const std::size_t> rows);
/// out[i, c] = -||x_i - p_c||^2
Var neg_sq_distances(Var x, Var prototypes);

/// Plain-value counterparts used by tests and oracles.
double squared_euclidean(std::span<const double> a, std::span<const double> b);
double softmax_cross_entropy(const Tensor& logits, std::span<const std::size_t> labels);

using LossFn = std::function<double(const std::vector<Tensor>& params)>;

/// Central differences (f(p + h e_i) - f(p - h e_i)) / 2h for every component.
std::vector<Tensor> finite_difference_gradient(const LossFn& loss, const std::vector<Tensor>& params,
                                               double h = 1e-4);

/// Largest elementwise mismatch between two gradient sets: relative error
/// where |reference| >= abs_floor, absolute error below it.
double max_gradient_mismatch(const std::vector<Tensor>& actual, const std::vector<Tensor>& reference,
                             double abs_floor = 1e-8);

/// True when every component satisfies |a - r| <= max(rel * |r|, abs).
bool gradients_match(const std::vector<Tensor>& actual, const std::vector<Tensor>& reference, double rel = 1e-5,
                     double abs = 1e-8);

}  // namespace f2m::ad
