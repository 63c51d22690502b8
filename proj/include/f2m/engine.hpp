#pragma once

// Flat-minima training engine.
//
// Base session: minibatch SGD on the noise-averaged base loss. Each step draws
// M noise vectors on the eligible embedding coordinates, evaluates the
// cross-entropy plus the prototype-fixing penalty at each perturbed point and
// descends along the averaged gradient.
//
// Few-shot sessions: the eligible embedding coordinates are fine-tuned with
// the prototype-distance metric loss and projected back into the flat box
// around the base solution after every step.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "f2m/dataset.hpp"
#include "f2m/kernels.hpp"
#include "f2m/net.hpp"
#include "f2m/proto.hpp"
#include "f2m/random.hpp"

namespace f2m {

/// Ablation switches: flat-minima noise (fm), prototype fixing (pf),
/// parameter clamping (pc), prototype normalization (pn).
struct Flags {
    bool fm = true;
    bool pf = true;
    bool pc = true;
    bool pn = true;

    static Flags none() { return {false, false, false, false}; }
    /// Comma-separated subset of fm,pf,pc,pn; "none" or "" clears all.
    static Flags parse(const std::string& text);
    /// Canonical "fm,pf,pc,pn" form ("none" when empty).
    std::string label() const;
    bool operator==(const Flags&) const = default;
};

struct NoiseSpec {
    double bound = 0.01;
    std::size_t samples = 2;
    std::uint64_t seed = 0;

    void validate() const;
    bool operator==(const NoiseSpec&) const = default;
};

/// Box [anchor - bound, anchor + bound] over the noise-eligible coordinates.
struct FlatRegion {
    std::vector<double> anchor;
    double bound = 0.01;

    bool operator==(const FlatRegion&) const = default;
};

struct TrainConfig {
    std::size_t base_epochs = 40;
    double base_lr = 0.05;
    /// Base step size alpha_k = base_lr / (1 + lr_decay * k).
    double lr_decay = 0.0;
    std::size_t batch_size = 32;
    std::size_t inc_epochs = 6;
    double inc_lr = 0.02;
    double lambda = 1.0;
    std::size_t exemplars_per_class = 5;
    Flags flags;
    NoiseSpec noise;
    std::uint64_t seed = 0;

    double base_step(std::size_t k) const { return base_lr / (1.0 + lr_decay * static_cast<double>(k)); }
    void validate() const;
    bool operator==(const TrainConfig&) const = default;
};

/// Uniform draws on [-b, b] for eligible coordinates; zero elsewhere is implied
/// by the NoiseVector layout.
NoiseVector sample_noise(const NoiseSpec& spec, const ParamSet& params, Rng& rng);

struct LossGrad {
    double value = 0.0;
    Gradients grad;
};

/// Loss and gradient evaluated at the given (possibly perturbed) parameters.
using LossGradFn = std::function<LossGrad(const ParamSet& at)>;

/// Base loss at phi + noise: mean cross-entropy plus lambda times the mean
/// squared distance between noisy and clean batch prototypes. Batch labels
/// are classifier-head indices; `clean` is keyed by the same indices.
double base_loss(const ParamSet& params, const NoiseVector& noise, const Dataset& batch, double lambda,
                 const ClassMeans& clean);
LossGrad base_loss_grad(const ParamSet& params, const NoiseVector& noise, const Dataset& batch,
                        double lambda, const ClassMeans& clean);

/// Clean batch prototypes at the unperturbed parameters.
ClassMeans clean_batch_prototypes(const ParamSet& params, const Dataset& batch);

/// Average of fn over the perturbed points params + draws[j]. Draws are
/// evaluated independently (in parallel under Exec::parallel) and summed in
/// draw order.
LossGrad noise_averaged(const ParamSet& params, std::span<const NoiseVector> draws, const LossGradFn& fn,
                        kernels::Exec exec = kernels::Exec::parallel);

LossGrad multi_noise_loss(const ParamSet& params, std::span<const NoiseVector> draws, const Dataset& batch,
                          double lambda, kernels::Exec exec = kernels::Exec::parallel);
LossGrad multi_noise_loss(const ParamSet& params, const NoiseSpec& spec, Rng& rng, const Dataset& batch,
                          double lambda, kernels::Exec exec = kernels::Exec::parallel);

/// theta <- theta - step * grad. Throws DivergenceError on a non-finite gradient or result.
void apply_update(ParamSet& params, const Gradients& grad, double step);

LossGrad base_train_step(ParamSet& params, std::span<const NoiseVector> draws, const LossGradFn& fn, double step,
                         kernels::Exec exec = kernels::Exec::parallel);
LossGrad base_train_step(ParamSet& params, std::span<const NoiseVector> draws, const Dataset& batch,
                         double lambda, double step, kernels::Exec exec = kernels::Exec::parallel);

/// Maps class ids to classifier-head indices (position in `head_classes`).
Dataset to_head_labels(const Dataset& data, std::span<const int> head_classes);

struct BaseResult {
    ParamSet params;
    FlatRegion region;
    PrototypeStore store;
    /// Sorted base class ids; position = classifier-head index.
    std::vector<int> head_classes;
    std::vector<double> epoch_losses;
};

/// Called after every base epoch with the epoch index (1-based) and parameters.
using EpochObserver = std::function<void(std::size_t epoch, const ParamSet& params)>;

BaseResult train_base(const Dataset& base_data, const NetworkConfig& net, const TrainConfig& config,
                      const EpochObserver& observer = nullptr);

/// Mean over the batch of -log softmax(-||f(x) - p_c||^2)[label]. Labels are class ids.
double metric_loss(const ParamSet& params, const ClassMeans& prototypes, const Dataset& batch);
LossGrad metric_loss_grad(const ParamSet& params, const ClassMeans& prototypes, const Dataset& batch);

void clamp_to_region(ParamSet& params, const FlatRegion& region);
/// max_i |phi_i - anchor_i| over the governed coordinates.
double region_drift(const ParamSet& params, const FlatRegion& region);

struct SessionSpec {
    int index = kBaseSession;
    std::vector<int> classes;
    Dataset train;
    std::size_t way = 0;
    std::size_t shot = 0;
};

/// Everything carried between sessions.
struct RunState {
    NetworkConfig net;
    ParamSet params;
    std::optional<FlatRegion> region;
    PrototypeStore store;
    ExemplarBuffer exemplars;
    std::vector<int> head_classes;
    int last_session = 0;

    bool operator==(const RunState&) const = default;
};

RunState make_run_state(const NetworkConfig& net, BaseResult base, std::size_t exemplar_capacity);

/// Called after every incremental update (after clamping, when enabled).
using StepObserver = std::function<void(const ParamSet& params)>;

struct SessionLog {
    std::vector<double> epoch_losses;
    std::size_t steps = 0;
};

SessionLog incremental_session(RunState& state, const SessionSpec& session, const TrainConfig& config,
                               const StepObserver& observer = nullptr);

void save_run_state(const std::filesystem::path& dir, const RunState& state);
RunState load_run_state(const std::filesystem::path& dir);

}  // namespace f2m
