#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "f2m/autodiff.hpp"
#include "f2m/errors.hpp"
#include "f2m/kernels.hpp"
#include "support.hpp"

using namespace f2m;
using namespace f2m::ad;
using f2m::kernels::Exec;

TEST(Tensor, RejectsSizeMismatchAndNonFinite) {
    EXPECT_THROW(Tensor({2, 2}, std::vector<double>{1, 2, 3}), DimensionError);
    EXPECT_THROW(Tensor({2}, std::vector<double>{1, NAN}), ContractError);
    EXPECT_THROW(Tensor({1}, std::vector<double>{INFINITY}), ContractError);
    EXPECT_NO_THROW(Tensor({2, 3}, 0.5));
    EXPECT_EQ(Tensor::scalar(4.0).item(), 4.0);
}

TEST(Kernels, LinearForwardExamples) {
    std::vector<double> out(2);
    kernels::linear_forward(Exec::serial, std::vector<double>{1, 2}, 1, 2, std::vector<double>{1, 0, 0, 1}, 2,
                            std::vector<double>{0, 0}, out);
    EXPECT_EQ(out, (std::vector<double>{1, 2}));
    std::vector<double> one(1);
    kernels::linear_forward(Exec::serial, std::vector<double>{1, 1}, 1, 2, std::vector<double>{2, 3}, 1,
                            std::vector<double>{1}, one);
    EXPECT_EQ(one[0], 6.0);
}

TEST(Kernels, LinearMatchesTripleLoopOracle) {
    std::mt19937_64 rng(7);
    const auto in = oracle::random_vector(12, rng);
    const auto w = oracle::random_vector(8, rng);
    const auto b = oracle::random_vector(2, rng);
    const auto ref = oracle::matmul_oracle(in, 3, 4, w, 2, b);
    Tape tape;
    const Var y = linear(tape.constant(Tensor({3, 4}, in)), tape.constant(Tensor({4, 2}, w)),
                         tape.constant(Tensor({2}, b)));
    for (std::size_t i = 0; i < ref.size(); ++i) EXPECT_NEAR(y.value()[i], ref[i], 1e-12);
}

TEST(Kernels, SerialAndParallelAreBitIdentical) {
    std::mt19937_64 rng(11);
    const std::size_t n = 257, d_in = 33, d_out = 19;
    const auto in = oracle::random_vector(n * d_in, rng);
    const auto w = oracle::random_vector(d_in * d_out, rng);
    const auto b = oracle::random_vector(d_out, rng);
    const auto g = oracle::random_vector(n * d_out, rng);
    std::vector<double> s(n * d_out), p(n * d_out);
    kernels::linear_forward(Exec::serial, in, n, d_in, w, d_out, b, s);
    kernels::linear_forward(Exec::parallel, in, n, d_in, w, d_out, b, p);
    EXPECT_EQ(s, p);

    std::vector<double> gs(d_in * d_out, 0.0), gp(d_in * d_out, 0.0);
    kernels::accumulate_at_b(Exec::serial, in, n, d_in, g, d_out, gs);
    kernels::accumulate_at_b(Exec::parallel, in, n, d_in, g, d_out, gp);
    EXPECT_EQ(gs, gp);

    std::vector<double> xs(n * d_in, 0.0), xp(n * d_in, 0.0);
    kernels::accumulate_a_bt(Exec::serial, g, n, d_out, w, d_in, xs);
    kernels::accumulate_a_bt(Exec::parallel, g, n, d_out, w, d_in, xp);
    EXPECT_EQ(xs, xp);
}

TEST(Autodiff, LinearRejectsNonConformingShapes) {
    Tape tape;
    EXPECT_THROW(linear(tape.constant(Tensor({1, 3}, 1.0)), tape.constant(Tensor({2, 2}, 1.0)),
                        tape.constant(Tensor({2}, 0.0))),
                 DimensionError);
}

TEST(Autodiff, Relu) {
    Tape tape;
    const Var x = tape.parameter(Tensor::vector({-1, 0, 2}));
    EXPECT_EQ(relu(x).value().values(), (std::vector<double>{0, 0, 2}));
    Tape t2;
    EXPECT_EQ(relu(t2.constant(Tensor::vector({-3, -0.5}))).value().values(), (std::vector<double>{0, 0}));

    Tape t3;
    const Var p = t3.parameter(Tensor::vector({-1, 2}));
    const auto g = t3.backward(sum(relu(p)));
    EXPECT_EQ(g[0].values(), (std::vector<double>{0, 1}));
}

TEST(Autodiff, SoftmaxCrossEntropyValues) {
    const std::vector<std::size_t> label0{0};
    EXPECT_NEAR(softmax_cross_entropy(Tensor::matrix({{0.3, 0.3, 0.3, 0.3}}), label0), std::log(4.0), 1e-12);
    EXPECT_LT(softmax_cross_entropy(Tensor::matrix({{30, 0, 0}}), label0), 1e-9);
    const std::vector<std::size_t> label1{1};
    const double oracle = -std::log(std::exp(2.0) / (std::exp(1.0) + std::exp(2.0)));
    EXPECT_NEAR(softmax_cross_entropy(Tensor::matrix({{1, 2}}), label1), oracle, 1e-15);
    EXPECT_NEAR(softmax_cross_entropy(Tensor::matrix({{1, 2}}), label1), 0.313262, 5e-7);
    const std::vector<std::size_t> bad{2};
    EXPECT_THROW(softmax_cross_entropy(Tensor::matrix({{1, 2}}), bad), IndexError);
}

TEST(Autodiff, SquaredEuclidean) {
    const std::vector<double> a{1.5, -2}, z{0, 0}, b{3, 4};
    EXPECT_EQ(squared_euclidean(a, a), 0.0);
    EXPECT_EQ(squared_euclidean(z, b), 25.0);
    std::mt19937_64 rng(3);
    const auto u = oracle::random_vector(16, rng), v = oracle::random_vector(16, rng);
    double ref = 0.0;
    for (int i = 0; i < 16; ++i) ref += (u[i] - v[i]) * (u[i] - v[i]);
    EXPECT_NEAR(squared_euclidean(u, v), ref, 1e-12);
    const std::vector<double> three(3);
    EXPECT_THROW(squared_euclidean(a, three), DimensionError);
}

TEST(Autodiff, BackwardBasics) {
    Tape t;
    const Var p = t.parameter(Tensor::vector({1, 2}));
    const Var c = t.constant(Tensor::scalar(5.0));
    const auto g = t.backward(c);
    ASSERT_EQ(g.size(), 1u);
    EXPECT_EQ(g[0].values(), (std::vector<double>{0, 0}));
    (void)p;

    Tape t2;
    const Var q = t2.parameter(Tensor::scalar(3.0));
    EXPECT_EQ(t2.backward(mul(q, q))[0].item(), 6.0);

    Tape t3;
    const Var v = t3.parameter(Tensor::vector({1, 2}));
    EXPECT_THROW(t3.backward(v), ContractError);
}

TEST(Autodiff, ReplayReproducesForwardValuesAndOrderIsTopological) {
    std::mt19937_64 rng(5);
    Tape t;
    const Var x = t.constant(oracle::random_matrix(4, 3, rng));
    const Var w = t.parameter(oracle::random_matrix(3, 5, rng));
    const Var b = t.parameter(Tensor::vector(oracle::random_vector(5, rng)));
    const std::vector<std::size_t> y{0, 4, 2, 1};
    const Var h = linear(x, w, b);
    const Var r = relu(h);
    const Var loss = softmax_cross_entropy(r, y);
    for (const Var& v : {h, r, loss}) EXPECT_GT(v.id(), x.id());
    EXPECT_GT(r.id(), h.id());
    EXPECT_GT(loss.id(), r.id());
    const auto replayed = t.replay();
    ASSERT_EQ(replayed.size(), t.size());
    for (const Var& v : {x, w, b, h, r, loss}) EXPECT_EQ(replayed[v.id()], v.value());
}

TEST(FiniteDifference, AnalyticCases) {
    const auto sq = finite_difference_gradient(
        [](const std::vector<Tensor>& p) { return p[0].item() * p[0].item(); }, {Tensor::scalar(3.0)});
    EXPECT_NEAR(sq[0].item(), 6.0, 1e-6);
    const auto s = finite_difference_gradient([](const std::vector<Tensor>& p) { return std::sin(p[0].item()); },
                                              {Tensor::scalar(0.0)});
    EXPECT_NEAR(s[0].item(), 1.0, 1e-6);
}

TEST(FiniteDifference, TwoLayerMlpCrossEntropyAgreesWithBackward) {
    std::mt19937_64 rng(9);
    const Tensor x = oracle::random_matrix(4, 3, rng);
    const std::vector<std::size_t> y{0, 1, 2, 1};
    std::vector<Tensor> params{oracle::random_matrix(3, 5, rng), Tensor::vector(oracle::random_vector(5, rng)),
                               oracle::random_matrix(5, 3, rng), Tensor::vector(oracle::random_vector(3, rng))};
    auto record = [&](Tape& t, const std::vector<Tensor>& p) {
        std::vector<Var> v;
        for (const Tensor& q : p) v.push_back(t.parameter(q));
        const Var h = relu(linear(t.constant(x), v[0], v[1]));
        return softmax_cross_entropy(linear(h, v[2], v[3]), y);
    };
    Tape t;
    const auto grad = t.backward(record(t, params));
    const auto fd = finite_difference_gradient(
        [&](const std::vector<Tensor>& p) {
            Tape tt;
            return record(tt, p).value().item();
        },
        params);
    EXPECT_LT(max_gradient_mismatch(grad, fd), 1e-5);
    EXPECT_TRUE(gradients_match(grad, fd, 1e-5, 1e-8));
}
