#include "f2m/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "f2m/errors.hpp"
#include "f2m/kernels.hpp"

namespace f2m::ad {

using kernels::Exec;

const Tensor& Var::value() const {
    if (!tape_) throw ContractError("value() on a detached Var");
    return tape_->value(*this);
}

void Tape::check_owned(Var v) const {
    if (v.tape() != this || v.id() >= nodes_.size())
        throw ContractError("Var does not belong to this tape");
}

Var Tape::constant(Tensor value) {
    nodes_.push_back(Node{{}, std::move(value), nullptr, nullptr, false});
    return Var(this, nodes_.size() - 1);
}

Var Tape::parameter(Tensor value) {
    nodes_.push_back(Node{{}, std::move(value), nullptr, nullptr, true});
    params_.push_back(nodes_.size() - 1);
    return Var(this, nodes_.size() - 1);
}

const Tensor& Tape::value(Var v) const {
    check_owned(v);
    return nodes_[v.id()].value;
}

Var Tape::record(std::vector<Var> inputs, Forward forward, Backward backward) {
    Node node;
    std::vector<const Tensor*> in;
    in.reserve(inputs.size());
    for (const Var& v : inputs) {
        check_owned(v);
        node.inputs.push_back(v.id());
        node.needs_grad = node.needs_grad || nodes_[v.id()].needs_grad;
        in.push_back(&nodes_[v.id()].value);
    }
    node.value = forward(in);
    node.forward = std::move(forward);
    node.backward = std::move(backward);
    nodes_.push_back(std::move(node));
    return Var(this, nodes_.size() - 1);
}

std::vector<Tensor> Tape::replay() const {
    std::vector<Tensor> values;
    values.reserve(nodes_.size());
    for (const Node& node : nodes_) {
        if (!node.forward) {
            values.push_back(node.value);
            continue;
        }
        std::vector<const Tensor*> in;
        for (auto id : node.inputs) in.push_back(&values[id]);
        values.push_back(node.forward(in));
    }
    return values;
}

std::vector<Tensor> Tape::backward(Var loss) const {
    check_owned(loss);
    const Node& root = nodes_[loss.id()];
    if (!root.value.is_scalar())
        throw ContractError("backward() needs a scalar loss, got shape " +
                            shape_string(root.value.shape()));

    std::vector<Tensor> grads(nodes_.size());
    std::vector<bool> touched(nodes_.size(), false);
    grads[loss.id()] = Tensor::unchecked(root.value.shape(), {1.0});
    touched[loss.id()] = true;

    for (std::size_t id = loss.id() + 1; id-- > 0;) {
        const Node& node = nodes_[id];
        if (!touched[id] || !node.backward || !node.needs_grad) continue;
        std::vector<const Tensor*> in;
        std::vector<Tensor*> gin;
        for (auto input : node.inputs) {
            in.push_back(&nodes_[input].value);
            if (nodes_[input].needs_grad) {
                if (!touched[input]) {
                    grads[input] = Tensor::zeros_like(nodes_[input].value);
                    touched[input] = true;
                }
                gin.push_back(&grads[input]);
            } else {
                gin.push_back(nullptr);
            }
        }
        node.backward(grads[id], in, node.value, gin);
    }

    std::vector<Tensor> out;
    out.reserve(params_.size());
    for (auto id : params_)
        out.push_back(touched[id] ? std::move(grads[id]) : Tensor::zeros_like(nodes_[id].value));
    return out;
}

namespace {

Tape& same_tape(Var a, Var b) {
    if (!a.tape() || a.tape() != b.tape()) throw ContractError("operands live on different tapes");
    return *a.tape();
}

void require_same_size(const Tensor& a, const Tensor& b, const char* op) {
    if (a.size() != b.size())
        throw DimensionError(std::string(op) + ": shapes " + shape_string(a.shape()) + " and " +
                             shape_string(b.shape()) + " do not conform");
}

}  // namespace

Var linear(Var input, Var weight, Var bias) {
    Tape& tape = same_tape(input, weight);
    same_tape(input, bias);
    const Tensor& x = input.value();
    const Tensor& w = weight.value();
    const Tensor& b = bias.value();
    if (x.rank() != 2 || w.rank() != 2 || x.cols() != w.rows() || b.size() != w.cols() || b.rank() != 1)
        throw DimensionError("linear: input " + shape_string(x.shape()) + " and weight " +
                             shape_string(w.shape()) + " (bias " + shape_string(b.shape()) +
                             ") do not conform");
    return tape.record(
        {input, weight, bias},
        [](Tape::Inputs in) {
            const Tensor& x = *in[0];
            const Tensor& w = *in[1];
            const std::size_t n = x.rows(), d_in = x.cols(), d_out = w.cols();
            std::vector<double> out(n * d_out);
            kernels::linear_forward(Exec::serial, x.data(), n, d_in, w.data(), d_out, in[2]->data(), out);
            return Tensor::unchecked({n, d_out}, std::move(out));
        },
        [](const Tensor& g, Tape::Inputs in, const Tensor&, std::span<Tensor* const> gin) {
            const Tensor& x = *in[0];
            const Tensor& w = *in[1];
            const std::size_t n = x.rows(), d_in = x.cols(), d_out = w.cols();
            if (gin[0]) kernels::accumulate_a_bt(Exec::serial, g.data(), n, d_out, w.data(), d_in, gin[0]->data());
            if (gin[1]) kernels::accumulate_at_b(Exec::serial, x.data(), n, d_in, g.data(), d_out, gin[1]->data());
            if (gin[2]) {
                auto gb = gin[2]->data();
                for (std::size_t i = 0; i < n; ++i)
                    for (std::size_t j = 0; j < d_out; ++j) gb[j] += g[i * d_out + j];
            }
        });
}

Var relu(Var input) {
    Tape& tape = *input.tape();
    return tape.record(
        {input},
        [](Tape::Inputs in) {
            std::vector<double> out(in[0]->values());
            for (double& v : out) v = v > 0.0 ? v : 0.0;
            return Tensor::unchecked(in[0]->shape(), std::move(out));
        },
        [](const Tensor& g, Tape::Inputs in, const Tensor&, std::span<Tensor* const> gin) {
            if (!gin[0]) return;
            const Tensor& x = *in[0];
            for (std::size_t i = 0; i < x.size(); ++i)
                if (x[i] > 0.0) (*gin[0])[i] += g[i];
        });
}

namespace {

void check_labels(const Tensor& logits, std::span<const std::size_t> labels) {
    if (logits.rank() != 2) throw DimensionError("cross-entropy expects [n x C] logits, got " +
                                                 shape_string(logits.shape()));
    if (labels.size() != logits.rows())
        throw DimensionError("cross-entropy: " + std::to_string(labels.size()) + " labels for " +
                             std::to_string(logits.rows()) + " rows");
    for (auto y : labels)
        if (y >= logits.cols())
            throw IndexError("label " + std::to_string(y) + " out of range for " +
                             std::to_string(logits.cols()) + " classes");
}

// Row-wise log-sum-exp with max subtraction.
double row_lse(const double* row, std::size_t c) {
    double m = row[0];
    for (std::size_t j = 1; j < c; ++j) m = std::max(m, row[j]);
    double s = 0.0;
    for (std::size_t j = 0; j < c; ++j) s += std::exp(row[j] - m);
    return m + std::log(s);
}

double ce_value(const Tensor& logits, std::span<const std::size_t> labels) {
    const std::size_t n = logits.rows(), c = logits.cols();
    double total = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        const double* row = logits.data().data() + i * c;
        total += row_lse(row, c) - row[labels[i]];
    }
    return total / static_cast<double>(n);
}

}  // namespace

double softmax_cross_entropy(const Tensor& logits, std::span<const std::size_t> labels) {
    check_labels(logits, labels);
    return ce_value(logits, labels);
}

Var softmax_cross_entropy(Var logits, std::span<const std::size_t> labels) {
    check_labels(logits.value(), labels);
    std::vector<std::size_t> y(labels.begin(), labels.end());
    return logits.tape()->record(
        {logits},
        [y](Tape::Inputs in) { return Tensor::unchecked({}, {ce_value(*in[0], y)}); },
        [y](const Tensor& g, Tape::Inputs in, const Tensor&, std::span<Tensor* const> gin) {
            if (!gin[0]) return;
            const Tensor& l = *in[0];
            const std::size_t n = l.rows(), c = l.cols();
            const double scale = g.item() / static_cast<double>(n);
            auto out = gin[0]->data();
            for (std::size_t i = 0; i < n; ++i) {
                const double* row = l.data().data() + i * c;
                const double lse = row_lse(row, c);
                for (std::size_t j = 0; j < c; ++j) {
                    const double p = std::exp(row[j] - lse);
                    out[i * c + j] += scale * (p - (j == y[i] ? 1.0 : 0.0));
                }
            }
        });
}

double squared_euclidean(std::span<const double> a, std::span<const double> b) {
    if (a.size() != b.size())
        throw DimensionError("squared_euclidean: lengths " + std::to_string(a.size()) + " and " +
                             std::to_string(b.size()));
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const double d = a[i] - b[i];
        s += d * d;
    }
    return s;
}

Var squared_euclidean(Var a, Var b) {
    Tape& tape = same_tape(a, b);
    require_same_size(a.value(), b.value(), "squared_euclidean");
    return tape.record(
        {a, b},
        [](Tape::Inputs in) {
            return Tensor::unchecked({}, {squared_euclidean(in[0]->data(), in[1]->data())});
        },
        [](const Tensor& g, Tape::Inputs in, const Tensor&, std::span<Tensor* const> gin) {
            const Tensor& x = *in[0];
            const Tensor& y = *in[1];
            for (std::size_t i = 0; i < x.size(); ++i) {
                const double d = 2.0 * (x[i] - y[i]) * g.item();
                if (gin[0]) (*gin[0])[i] += d;
                if (gin[1]) (*gin[1])[i] -= d;
            }
        });
}

namespace {

template <class Op, class DA, class DB>
Var elementwise(Var a, Var b, const char* name, Op op, DA da, DB db) {
    Tape& tape = same_tape(a, b);
    if (a.value().shape() != b.value().shape())
        throw DimensionError(std::string(name) + ": shapes " + shape_string(a.value().shape()) +
                             " and " + shape_string(b.value().shape()) + " differ");
    return tape.record(
        {a, b},
        [op](Tape::Inputs in) {
            std::vector<double> out(in[0]->size());
            for (std::size_t i = 0; i < out.size(); ++i) out[i] = op((*in[0])[i], (*in[1])[i]);
            return Tensor::unchecked(in[0]->shape(), std::move(out));
        },
        [da, db](const Tensor& g, Tape::Inputs in, const Tensor&, std::span<Tensor* const> gin) {
            for (std::size_t i = 0; i < g.size(); ++i) {
                if (gin[0]) (*gin[0])[i] += g[i] * da((*in[0])[i], (*in[1])[i]);
                if (gin[1]) (*gin[1])[i] += g[i] * db((*in[0])[i], (*in[1])[i]);
            }
        });
}

}  // namespace

Var add(Var a, Var b) {
    return elementwise(
        a, b, "add", [](double x, double y) { return x + y; }, [](double, double) { return 1.0; },
        [](double, double) { return 1.0; });
}

Var sub(Var a, Var b) {
    return elementwise(
        a, b, "sub", [](double x, double y) { return x - y; }, [](double, double) { return 1.0; },
        [](double, double) { return -1.0; });
}

Var mul(Var a, Var b) {
    return elementwise(
        a, b, "mul", [](double x, double y) { return x * y; }, [](double, double y) { return y; },
        [](double x, double) { return x; });
}

Var scale(Var a, double factor) {
    return a.tape()->record(
        {a},
        [factor](Tape::Inputs in) {
            std::vector<double> out(in[0]->values());
            for (double& v : out) v *= factor;
            return Tensor::unchecked(in[0]->shape(), std::move(out));
        },
        [factor](const Tensor& g, Tape::Inputs, const Tensor&, std::span<Tensor* const> gin) {
            if (!gin[0]) return;
            for (std::size_t i = 0; i < g.size(); ++i) (*gin[0])[i] += factor * g[i];
        });
}

Var sum(Var a) {
    return a.tape()->record(
        {a},
        [](Tape::Inputs in) {
            double s = 0.0;
            for (double v : in[0]->values()) s += v;
            return Tensor::unchecked({}, {s});
        },
        [](const Tensor& g, Tape::Inputs, const Tensor&, std::span<Tensor* const> gin) {
            if (!gin[0]) return;
            for (double& v : gin[0]->data()) v += g.item();
        });
}

Var mean_rows(Var x, std::span<const std::size_t> rows) {
    const Tensor& xv = x.value();
    if (xv.rank() != 2) throw DimensionError("mean_rows expects a matrix, got " + shape_string(xv.shape()));
    if (rows.empty()) throw ContractError("mean_rows over an empty row set");
    for (auto r : rows)
        if (r >= xv.rows()) throw IndexError("row " + std::to_string(r) + " out of range");
    std::vector<std::size_t> idx(rows.begin(), rows.end());
    return x.tape()->record(
        {x},
        [idx](Tape::Inputs in) {
            const Tensor& m = *in[0];
            const std::size_t d = m.cols();
            std::vector<double> out(d, 0.0);
            for (auto r : idx)
                for (std::size_t k = 0; k < d; ++k) out[k] += m.at(r, k);
            const auto count = static_cast<double>(idx.size());
            for (double& v : out) v /= count;
            return Tensor::unchecked({d}, std::move(out));
        },
        [idx](const Tensor& g, Tape::Inputs in, const Tensor&, std::span<Tensor* const> gin) {
            if (!gin[0]) return;
            const std::size_t d = in[0]->cols();
            const auto count = static_cast<double>(idx.size());
            for (auto r : idx)
                for (std::size_t k = 0; k < d; ++k) gin[0]->at(r, k) += g[k] / count;
        });
}

Var neg_sq_distances(Var x, Var prototypes) {
    Tape& tape = same_tape(x, prototypes);
    const Tensor& xv = x.value();
    const Tensor& pv = prototypes.value();
    if (xv.rank() != 2 || pv.rank() != 2 || xv.cols() != pv.cols())
        throw DimensionError("neg_sq_distances: embeddings " + shape_string(xv.shape()) +
                             " and prototypes " + shape_string(pv.shape()) + " do not conform");
    return tape.record(
        {x, prototypes},
        [](Tape::Inputs in) {
            const Tensor& a = *in[0];
            const Tensor& p = *in[1];
            const std::size_t n = a.rows(), c = p.rows(), d = a.cols();
            std::vector<double> out(n * c);
            for (std::size_t i = 0; i < n; ++i)
                for (std::size_t j = 0; j < c; ++j)
                    out[i * c + j] = -squared_euclidean(a.data().subspan(i * d, d), p.data().subspan(j * d, d));
            return Tensor::unchecked({n, c}, std::move(out));
        },
        [](const Tensor& g, Tape::Inputs in, const Tensor&, std::span<Tensor* const> gin) {
            const Tensor& a = *in[0];
            const Tensor& p = *in[1];
            const std::size_t n = a.rows(), c = p.rows(), d = a.cols();
            for (std::size_t i = 0; i < n; ++i)
                for (std::size_t j = 0; j < c; ++j) {
                    const double gij = g[i * c + j];
                    if (gij == 0.0) continue;
                    for (std::size_t k = 0; k < d; ++k) {
                        const double diff = 2.0 * (a.at(i, k) - p.at(j, k)) * gij;
                        if (gin[0]) gin[0]->at(i, k) -= diff;
                        if (gin[1]) gin[1]->at(j, k) += diff;
                    }
                }
        });
}

std::vector<Tensor> finite_difference_gradient(const LossFn& loss, const std::vector<Tensor>& params,
                                               double h) {
    if (!(h > 0.0)) throw ContractError("finite-difference step must be positive");
    std::vector<Tensor> probe = params;
    std::vector<Tensor> grads;
    grads.reserve(params.size());
    for (std::size_t p = 0; p < params.size(); ++p) {
        Tensor g = Tensor::zeros_like(params[p]);
        for (std::size_t i = 0; i < params[p].size(); ++i) {
            const double orig = params[p][i];
            probe[p][i] = orig + h;
            const double up = loss(probe);
            probe[p][i] = orig - h;
            const double down = loss(probe);
            probe[p][i] = orig;
            g[i] = (up - down) / (2.0 * h);
        }
        grads.push_back(std::move(g));
    }
    return grads;
}

double max_gradient_mismatch(const std::vector<Tensor>& actual, const std::vector<Tensor>& reference,
                             double abs_floor) {
    if (actual.size() != reference.size()) throw DimensionError("gradient set sizes differ");
    double worst = 0.0;
    for (std::size_t p = 0; p < actual.size(); ++p) {
        require_same_size(actual[p], reference[p], "max_gradient_mismatch");
        for (std::size_t i = 0; i < actual[p].size(); ++i) {
            const double ref = reference[p][i];
            const double err = std::abs(actual[p][i] - ref);
            worst = std::max(worst, std::abs(ref) < abs_floor ? err : err / std::abs(ref));
        }
    }
    return worst;
}

bool gradients_match(const std::vector<Tensor>& actual, const std::vector<Tensor>& reference, double rel,
                     double abs) {
    if (actual.size() != reference.size()) throw DimensionError("gradient set sizes differ");
    for (std::size_t p = 0; p < actual.size(); ++p) {
        require_same_size(actual[p], reference[p], "gradients_match");
        for (std::size_t i = 0; i < actual[p].size(); ++i) {
            const double r = reference[p][i];
            if (!(std::abs(actual[p][i] - r) <= std::max(rel * std::abs(r), abs))) return false;
        }
    }
    return true;
}

}  // namespace f2m::ad
