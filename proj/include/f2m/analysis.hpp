#pragma once

// Flatness probing, gradient-norm monitoring and evaluation metrics.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "f2m/dataset.hpp"
#include "f2m/engine.hpp"
#include "f2m/kernels.hpp"
#include "f2m/net.hpp"
#include "f2m/proto.hpp"
#include "json.hpp"

namespace f2m {

struct FlatnessReport {
    double anchor_loss = 0.0;
    std::vector<double> sample_losses;
    double mean_loss = 0.0;
    /// Mean squared deviation of the perturbed losses from the anchor loss.
    double indicator = 0.0;
    /// Mean squared deviation from the sample mean.
    double variance = 0.0;
    std::size_t sample_count = 0;
    double bound = 0.0;
    std::string split = "train";
};

using ValueFn = std::function<double(const ParamSet& at)>;

/// Evaluates loss at n uniform perturbations of the eligible coordinates.
/// Noise is drawn sequentially from the seed; evaluations may run in parallel.
FlatnessReport flatness_probe(const ParamSet& params, const ValueFn& loss, double bound, std::size_t n_samples,
                              std::uint64_t seed, kernels::Exec exec = kernels::Exec::parallel);

/// Full-dataset mean cross-entropy; labels are classifier-head indices.
double cross_entropy_loss(const ParamSet& params, const Dataset& data,
                          kernels::Exec exec = kernels::Exec::parallel);

FlatnessReport flatness_indicator(const ParamSet& params, double bound, const Dataset& data, std::size_t n_samples,
                                  std::uint64_t seed, kernels::Exec exec = kernels::Exec::parallel);

/// Squared norm of the M-draw noise-averaged gradient of `full` at params.
double grad_norm_estimate(const ParamSet& params, const LossGradFn& full, const NoiseSpec& spec, Rng& rng);

struct GradNormPoint {
    std::size_t step = 0;
    double sq_norm = 0.0;
};

/// R(theta) = 1/2 sum_i curvature_i (theta_i - center_i)^2, all coordinates eligible.
struct QuadraticToy {
    std::vector<double> curvature;
    std::vector<double> center;
    std::vector<double> start;

    ParamSet start_params() const;
    LossGradFn loss() const;
};

struct ConvergenceConfig {
    std::size_t steps = 500;
    double base_lr = 0.1;
    double lr_decay = 0.01;
    NoiseSpec noise;
    std::size_t record_every = 50;
};

/// Runs the noise-averaged update on the toy with alpha_k = base_lr / (1 + lr_decay k)
/// and records the gradient-norm estimate at step 0, every record_every steps, and the end.
std::vector<GradNormPoint> quadratic_convergence(const QuadraticToy& toy, const ConvergenceConfig& config);

struct SessionAccuracy {
    int session = kBaseSession;
    /// NCM over every encountered class.
    double all = 0.0;
    /// Base-class test samples classified among base classes only.
    double base = 0.0;
    /// New-class test samples classified among new classes only; absent in the base session.
    std::optional<double> novel;
    /// Base / new test samples classified among all encountered classes.
    double base_joint = 0.0;
    std::optional<double> novel_joint;
};

/// Accuracy on the test samples of every class in the store.
SessionAccuracy session_accuracy(const ParamSet& params, const PrototypeStore& store, const Dataset& test,
                                 kernels::Exec exec = kernels::Exec::parallel);

/// First-session accuracy minus last-session accuracy.
double performance_dropping_rate(std::span<const double> accuracies);

/// Rounds to the given number of decimals (for reporting at published precision).
double round_to(double value, int decimals);

struct Metrics {
    std::vector<SessionAccuracy> sessions;
    std::vector<GradNormPoint> grad_norm_trace;

    std::vector<double> accuracies() const;
    std::optional<double> pd() const;
};

nlohmann::json to_json(const FlatnessReport& report, bool include_samples = false);
nlohmann::json to_json(const SessionAccuracy& acc);
nlohmann::json to_json(const Metrics& metrics);

}  // namespace f2m
