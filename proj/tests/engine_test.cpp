#include <gtest/gtest.h>

#include <cmath>
#include <cstring>
#include <filesystem>
#include <random>

#include "f2m/autodiff.hpp"
#include "f2m/engine.hpp"
#include "f2m/errors.hpp"
#include "reference_sgd.hpp"
#include "support.hpp"

using namespace f2m;
using f2m::kernels::Exec;

namespace {

ParamSet scalar_model(double theta) { return ParamSet({{"theta", Tensor::vector({theta}), Group::embedding, true}}); }

LossGradFn square_loss() {
    return [](const ParamSet& at) {
        const double t = at[0].value[0];
        return LossGrad{t * t, {Tensor::vector({2.0 * t})}};
    };
}

double ce_oracle(const ParamSet& p, const Dataset& batch) {
    const Tensor& w = p.get("head.weight").value;
    const Tensor& b = p.get("head.bias").value;
    double total = 0.0;
    for (std::size_t i = 0; i < batch.size(); ++i) {
        const auto e = oracle::embed_oracle(p, batch.row(i));
        std::vector<double> z(w.cols());
        for (std::size_t j = 0; j < w.cols(); ++j) {
            z[j] = b[j];
            for (std::size_t k = 0; k < e.size(); ++k) z[j] += e[k] * w.at(k, j);
        }
        double s = 0.0;
        for (double v : z) s += std::exp(v);
        total += std::log(s) - z[static_cast<std::size_t>(batch.labels[i])];
    }
    return total / static_cast<double>(batch.size());
}

std::map<int, std::vector<double>> means_oracle(const ParamSet& p, const Dataset& batch) {
    std::map<int, std::vector<double>> sum;
    std::map<int, int> count;
    for (std::size_t i = 0; i < batch.size(); ++i) {
        const auto e = oracle::embed_oracle(p, batch.row(i));
        auto& s = sum[batch.labels[i]];
        s.resize(e.size(), 0.0);
        for (std::size_t k = 0; k < e.size(); ++k) s[k] += e[k];
        ++count[batch.labels[i]];
    }
    for (auto& [c, s] : sum)
        for (double& v : s) v /= count[c];
    return sum;
}

NoiseVector uniform_noise(std::size_t n, double b, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> u(-b, b);
    NoiseVector v(n);
    for (double& x : v) x = u(rng);
    return v;
}

struct Toy {
    ParamSet params;
    Dataset batch;
};

Toy toy_problem(std::uint64_t seed, std::size_t classes = 2, std::size_t per_class = 2) {
    Toy t{init_network(oracle::small_net(3, {4}, 3, classes, 2, seed)),
          oracle::blobs(classes, per_class, 3, 2.0, seed + 1)};
    std::mt19937_64 rng(seed);
    for (double& v : t.params.params()[1].value.data()) v = 0.1 * oracle::random_vector(1, rng)[0];
    return t;
}

}  // namespace

TEST(Flags, ParseAndLabel) {
    EXPECT_EQ(Flags::parse("none"), Flags::none());
    EXPECT_EQ(Flags::parse("pc,fm").label(), "fm,pc");
    EXPECT_EQ(Flags::parse("fm,pf,pc,pn"), Flags{});
    EXPECT_THROW(Flags::parse("fm,xx"), ConfigError);
}

TEST(SampleNoise, BoundsAndMean) {
    const ParamSet p = init_network(oracle::small_net(3, {4}, 2, 2, 1, 5));
    NoiseSpec spec{0.01, 1, 0};
    Rng rng(17);
    const std::size_t n = p.eligible_count();
    ASSERT_EQ(n, 10u);
    std::vector<double> mean(n, 0.0);
    const std::size_t draws = 100000;
    for (std::size_t d = 0; d < draws; ++d) {
        const NoiseVector e = sample_noise(spec, p, rng);
        ASSERT_EQ(e.size(), n);
        for (std::size_t i = 0; i < n; ++i) {
            if (d < 10000) ASSERT_LE(std::abs(e[i]), spec.bound);
            mean[i] += e[i];
        }
    }
    const double tol = 3.0 * spec.bound / std::sqrt(3.0 * draws);
    for (double m : mean) EXPECT_LE(std::abs(m / draws), tol);

    // Non-eligible coordinates are untouched by a draw.
    const ParamSet q = perturbed(p, sample_noise(spec, p, rng));
    EXPECT_EQ(q.get("embed.0.weight").value, p.get("embed.0.weight").value);
    EXPECT_EQ(q.get("head.weight").value, p.get("head.weight").value);
    EXPECT_NE(q.get("embed.1.weight").value, p.get("embed.1.weight").value);
}

TEST(BaseLoss, LambdaZeroIsNoisyCrossEntropy) {
    const Toy t = toy_problem(1);
    const NoiseVector eps = uniform_noise(t.params.eligible_count(), 0.05, 3);
    const ClassMeans clean = clean_batch_prototypes(t.params, t.batch);
    const double value = base_loss(t.params, eps, t.batch, 0.0, clean);
    EXPECT_NEAR(value, ce_oracle(perturbed(t.params, eps), t.batch), 1e-12);
}

TEST(BaseLoss, ZeroNoiseMakesPenaltyExactlyZero) {
    const Toy t = toy_problem(2);
    const NoiseVector zero(t.params.eligible_count(), 0.0);
    const ClassMeans clean = clean_batch_prototypes(t.params, t.batch);
    EXPECT_EQ(base_loss(t.params, zero, t.batch, 5.0, clean), base_loss(t.params, zero, t.batch, 0.0, clean));
}

TEST(BaseLoss, MatchesScalarOracleForBothTerms) {
    const Toy t = toy_problem(3);  // 2 classes, 4 samples, 1 hidden layer
    ASSERT_EQ(t.batch.size(), 4u);
    const NoiseVector eps = uniform_noise(t.params.eligible_count(), 0.1, 4);
    const double lambda = 0.7;
    const ClassMeans clean = clean_batch_prototypes(t.params, t.batch);
    const ParamSet noisy = perturbed(t.params, eps);
    const auto clean_ref = means_oracle(t.params, t.batch);
    const auto noisy_ref = means_oracle(noisy, t.batch);
    double penalty = 0.0;
    for (const auto& [c, v] : noisy_ref)
        for (std::size_t k = 0; k < v.size(); ++k) penalty += (v[k] - clean_ref.at(c)[k]) * (v[k] - clean_ref.at(c)[k]);
    const double oracle = ce_oracle(noisy, t.batch) + lambda * penalty / 2.0;
    EXPECT_NEAR(base_loss(t.params, eps, t.batch, lambda, clean), oracle, 1e-10);
}

TEST(BaseLoss, MissingCleanPrototypeIsStateError) {
    const Toy t = toy_problem(4);
    const NoiseVector zero(t.params.eligible_count(), 0.0);
    EXPECT_THROW(base_loss(t.params, zero, t.batch, 1.0, ClassMeans{}), StateError);
}

TEST(BaseLoss, GradientMatchesFiniteDifferences) {
    const Toy t = toy_problem(5, 3, 3);
    const NoiseVector eps = uniform_noise(t.params.eligible_count(), 0.05, 6);
    const ClassMeans clean = clean_batch_prototypes(t.params, t.batch);
    const LossGrad lg = base_loss_grad(t.params, eps, t.batch, 2.0, clean);
    std::vector<Tensor> values;
    for (const Param& p : t.params.params()) values.push_back(p.value);
    const auto fd = ad::finite_difference_gradient(
        [&](const std::vector<Tensor>& v) {
            ParamSet q = t.params;
            for (std::size_t i = 0; i < v.size(); ++i) q[i].value = v[i];
            return base_loss(q, eps, t.batch, 2.0, clean);
        },
        values);
    EXPECT_TRUE(ad::gradients_match(lg.grad, fd, 1e-5, 1e-8)) << ad::max_gradient_mismatch(lg.grad, fd);
}

TEST(MultiNoise, SingleDrawIdenticalDrawsAndMean) {
    const Toy t = toy_problem(7);
    const ClassMeans clean = clean_batch_prototypes(t.params, t.batch);
    const std::size_t n = t.params.eligible_count();
    const NoiseVector a = uniform_noise(n, 0.05, 1), b = uniform_noise(n, 0.05, 2);

    const std::vector<NoiseVector> one{a};
    const LossGrad m1 = multi_noise_loss(t.params, one, t.batch, 1.0);
    const LossGrad direct = base_loss_grad(t.params, a, t.batch, 1.0, clean);
    EXPECT_EQ(m1.value, direct.value);
    for (std::size_t p = 0; p < m1.grad.size(); ++p) EXPECT_EQ(m1.grad[p], direct.grad[p]);

    const std::vector<NoiseVector> same{a, a, a};
    EXPECT_NEAR(multi_noise_loss(t.params, same, t.batch, 1.0).value, direct.value, 1e-15);

    const std::vector<NoiseVector> two{a, b};
    const double expected = (base_loss(t.params, a, t.batch, 1.0, clean) + base_loss(t.params, b, t.batch, 1.0, clean)) / 2;
    EXPECT_NEAR(multi_noise_loss(t.params, two, t.batch, 1.0).value, expected, 1e-12);
}

TEST(MultiNoise, SerialAndParallelAreBitIdentical) {
    const Toy t = toy_problem(8, 4, 10);
    std::vector<NoiseVector> draws;
    for (int j = 0; j < 6; ++j) draws.push_back(uniform_noise(t.params.eligible_count(), 0.02, 30 + j));
    const LossGrad s = multi_noise_loss(t.params, draws, t.batch, 1.0, Exec::serial);
    const LossGrad p = multi_noise_loss(t.params, draws, t.batch, 1.0, Exec::parallel);
    EXPECT_EQ(s.value, p.value);
    for (std::size_t i = 0; i < s.grad.size(); ++i) EXPECT_EQ(s.grad[i], p.grad[i]);
}

TEST(BaseStep, AnalyticScalarCases) {
    ParamSet p = scalar_model(1.0);
    const std::vector<NoiseVector> none{NoiseVector{0.0}};
    base_train_step(p, none, square_loss(), 0.1);
    EXPECT_NEAR(p[0].value[0], 0.8, 1e-15);

    ParamSet still = scalar_model(0.0);
    base_train_step(still, none, square_loss(), 0.5);
    EXPECT_EQ(still[0].value[0], 0.0);

    ParamSet q = scalar_model(0.4);
    const std::vector<NoiseVector> draws{{0.003}, {-0.007}, {0.001}};
    const LossGrad lg = noise_averaged(q, draws, square_loss());
    EXPECT_NEAR(lg.grad[0][0], 2.0 * (0.4 + (0.003 - 0.007 + 0.001) / 3.0), 1e-12);

    EXPECT_THROW(base_train_step(q, draws, square_loss(), 0.0), ContractError);
}

TEST(BaseStep, NonFiniteGradientDiverges) {
    ParamSet p = scalar_model(1.0);
    const LossGradFn bad = [](const ParamSet&) { return LossGrad{1.0, {Tensor::unchecked({1}, {NAN})}}; };
    const std::vector<NoiseVector> none{NoiseVector{0.0}};
    EXPECT_THROW(base_train_step(p, none, bad, 0.1), DivergenceError);
}

TEST(TrainBase, ZeroEpochsKeepsInitialisation) {
    const Dataset d = oracle::blobs(3, 6, 4, 3.0, 2, 10);
    NetworkConfig net = oracle::small_net(4, {5}, 3, 3, 1, 77);
    TrainConfig cfg;
    cfg.base_epochs = 0;
    cfg.flags.pn = false;
    const BaseResult r = train_base(d, net, cfg);
    EXPECT_EQ(r.params, init_network(net));
    EXPECT_EQ(r.head_classes, (std::vector<int>{10, 11, 12}));
    const ClassMeans expected = compute_prototypes(r.params, d, {10, 11, 12});
    for (const auto& [c, v] : expected) EXPECT_EQ(r.store.at(c).vector, v);
    EXPECT_EQ(r.region.anchor, r.params.eligible_values());
}

TEST(TrainBase, SeparableBlobsReachHighNcmAccuracy) {
    const Dataset d = oracle::blobs(2, 40, 4, 3.0, 3);
    TrainConfig cfg;
    cfg.base_epochs = 50;
    const BaseResult r = train_base(d, oracle::small_net(4, {16}, 4, 2, 2, 1), cfg);
    const auto labels = ncm_classify_batch(r.store, embed(r.params, d.matrix()));
    std::size_t hit = 0;
    for (std::size_t i = 0; i < d.size(); ++i) hit += labels[i] == d.labels[i];
    EXPECT_GE(static_cast<double>(hit) / d.size(), 0.95);
}

TEST(TrainBase, NoiseAndPenaltyOffMatchesReferenceSgd) {
    const Dataset d = oracle::blobs(4, 30, 6, 2.0, 4, 3);
    const NetworkConfig net = oracle::small_net(6, {10, 7}, 5, 4, 2, 2024);
    TrainConfig cfg;
    cfg.flags = Flags::parse("pc");
    cfg.batch_size = 12;
    cfg.base_epochs = 10;  // 120 samples / 12 = 100 steps
    cfg.seed = 31;
    const BaseResult r = train_base(d, net, cfg);
    const std::vector<double> ref = oracle::reference_sgd(d, net, cfg.batch_size, cfg.base_lr, cfg.seed, 100);
    const std::vector<double> got = r.params.flatten();
    ASSERT_EQ(got.size(), ref.size());
    EXPECT_EQ(std::memcmp(got.data(), ref.data(), got.size() * sizeof(double)), 0);
}

TEST(MetricLoss, Cases) {
    Dataset one(2);
    one.add(std::vector<double>{0.3, -1}, 4);
    ParamSet id({{"embed.0.weight", Tensor::matrix({{1, 0}, {0, 1}}), Group::embedding, true},
                 {"embed.0.bias", Tensor({2}, 0.0), Group::embedding, true},
                 {"head.weight", Tensor({2, 1}, 0.0), Group::classifier, false},
                 {"head.bias", Tensor({1}, 0.0), Group::classifier, false}});
    EXPECT_EQ(metric_loss(id, {{4, {5, 5}}}, one), 0.0);

    Dataset centre(2);
    centre.add(std::vector<double>{0, 0}, 1);
    const ClassMeans ring{{1, {1, 0}}, {2, {0, 1}}, {3, {-1, 0}}};
    EXPECT_NEAR(metric_loss(id, ring, centre), std::log(3.0), 1e-15);

    Dataset q(2);
    q.add(std::vector<double>{0.5, 0.2}, 1);
    q.add(std::vector<double>{-0.4, 1.1}, 3);
    double oracle = 0.0;
    for (std::size_t i = 0; i < 2; ++i) {
        const auto x = q.row(i);
        double s = 0.0, own = 0.0;
        for (const auto& [c, p] : ring) {
            const double d2 = (x[0] - p[0]) * (x[0] - p[0]) + (x[1] - p[1]) * (x[1] - p[1]);
            s += std::exp(-d2);
            if (c == q.labels[i]) own = -d2;
        }
        oracle += std::log(s) - own;
    }
    EXPECT_NEAR(metric_loss(id, ring, q), oracle / 2.0, 1e-10);
}

TEST(MetricLoss, GradientMatchesFiniteDifferences) {
    const Toy t = toy_problem(9, 3, 3);
    std::mt19937_64 rng(10);
    const ClassMeans protos{{0, oracle::random_vector(3, rng)}, {1, oracle::random_vector(3, rng)},
                            {2, oracle::random_vector(3, rng)}};
    const LossGrad lg = metric_loss_grad(t.params, protos, t.batch);
    std::vector<Tensor> values;
    for (const Param& p : t.params.params()) values.push_back(p.value);
    const auto fd = ad::finite_difference_gradient(
        [&](const std::vector<Tensor>& v) {
            ParamSet q = t.params;
            for (std::size_t i = 0; i < v.size(); ++i) q[i].value = v[i];
            return metric_loss(q, protos, t.batch);
        },
        values);
    EXPECT_TRUE(ad::gradients_match(lg.grad, fd, 1e-5, 1e-8)) << ad::max_gradient_mismatch(lg.grad, fd);
}

TEST(Clamp, ProjectionProperties) {
    ParamSet p = scalar_model(0.0);
    const FlatRegion region{{0.3}, 0.01};
    p[0].value[0] = 0.305;
    clamp_to_region(p, region);
    EXPECT_EQ(p[0].value[0], 0.305);

    p[0].value[0] = 0.3 + 2 * 0.01;
    clamp_to_region(p, region);
    EXPECT_LE(std::abs(p[0].value[0] - 0.3), 0.01);
    EXPECT_NEAR(p[0].value[0], 0.31, 1e-15);
    const double once = p[0].value[0];
    clamp_to_region(p, region);
    EXPECT_EQ(p[0].value[0], once);
}

TEST(Clamp, InvariantHoldsExactlyOnRandomValues) {
    std::mt19937_64 rng(21);
    std::uniform_real_distribution<double> u(-3, 3), bd(1e-4, 0.1);
    for (int trial = 0; trial < 20000; ++trial) {
        const double a = u(rng), b = bd(rng);
        ParamSet p = scalar_model(a + u(rng) * b);
        clamp_to_region(p, FlatRegion{{a}, b});
        ASSERT_LE(std::abs(p[0].value[0] - a), b) << a << " " << b;
    }
}

class Sessions : public ::testing::Test {
protected:
    ExperimentConfig config = oracle::desk_benchmark(0);
    TrainTest data;
    std::vector<SessionSpec> sessions;
    RunState state;

    void SetUp() override {
        config = seeded(config);
        data = load_data(config);
        sessions = split_sessions(data.train, 12, 2, 5, derive_seed(config.seed, 11));
        config.net.input_dim = data.train.dim;
        BaseResult base = train_base(sessions[0].train, config.net, config.train);
        state = make_run_state(config.net, std::move(base), 5);
    }
};

TEST_F(Sessions, ZeroEpochsFreezeTheExtractor) {
    TrainConfig cfg = config.train;
    cfg.inc_epochs = 0;
    cfg.flags.pn = false;
    RunState s = state;
    incremental_session(s, sessions[1], cfg);
    EXPECT_EQ(s.params, state.params);
    const std::set<int> cls(sessions[1].classes.begin(), sessions[1].classes.end());
    for (const auto& [c, v] : compute_prototypes(state.params, sessions[1].train, cls)) EXPECT_EQ(s.store.at(c).vector, v);
    EXPECT_EQ(s.exemplars.size(), 10u);
}

TEST_F(Sessions, ClampHoldsAfterEveryStep) {
    RunState s = state;
    std::size_t checks = 0;
    for (std::size_t t = 1; t < sessions.size(); ++t)
        incremental_session(s, sessions[t], config.train, [&](const ParamSet& p) {
            ++checks;
            const auto v = p.eligible_values();
            for (std::size_t i = 0; i < v.size(); ++i)
                ASSERT_LE(std::abs(v[i] - s.region->anchor[i]), s.region->bound);
        });
    EXPECT_GT(checks, 0u);
}

TEST_F(Sessions, FineTuningBeatsFrozenOnNewClasses) {
    RunState tuned = state, frozen = state;
    TrainConfig zero = config.train;
    zero.inc_epochs = 0;
    incremental_session(tuned, sessions[1], config.train);
    incremental_session(frozen, sessions[1], zero);
    const auto a = session_accuracy(tuned.params, tuned.store, data.test);
    const auto b = session_accuracy(frozen.params, frozen.store, data.test);
    EXPECT_GT(*a.novel_joint, *b.novel_joint);
}

TEST_F(Sessions, ProtocolAndStateErrors) {
    RunState s = state;
    SessionSpec reuse = sessions[1];
    reuse.classes = {sessions[0].classes.front()};
    EXPECT_THROW(incremental_session(s, reuse, config.train), ProtocolError);

    RunState no_region = state;
    no_region.region.reset();
    EXPECT_THROW(incremental_session(no_region, sessions[1], config.train), StateError);

    RunState wild = state;
    TrainConfig hot = config.train;
    hot.flags.pc = false;
    hot.inc_lr = 1e300;
    EXPECT_THROW(incremental_session(wild, sessions[1], hot), DivergenceError);
}

TEST_F(Sessions, RunStateRoundTrip) {
    RunState s = state;
    incremental_session(s, sessions[1], config.train);
    const auto dir = std::filesystem::temp_directory_path() / "f2m_state_test";
    save_run_state(dir, s);
    EXPECT_EQ(load_run_state(dir), s);
    std::filesystem::remove_all(dir);
}
