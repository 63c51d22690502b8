#pragma once

// The model: an MLP embedding network (phi) followed by a linear classifier
// head (psi). Parameters live in a ParamSet, ordered as
//   embed.0.weight, embed.0.bias, ..., embed.{L-1}.bias, head.weight, head.bias
// Weights are [fan_in x fan_out].

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "f2m/autodiff.hpp"
#include "f2m/kernels.hpp"
#include "f2m/tensor.hpp"

namespace f2m {

struct NetworkConfig {
    std::size_t input_dim = 16;
    std::vector<std::size_t> hidden{32, 32};
    std::size_t embedding_dim = 8;
    std::size_t class_count = 12;
    /// Trailing embedding layers whose parameters receive noise.
    std::size_t noise_last_k = 2;
    bool noise_biases = true;
    std::uint64_t seed = 0;

    std::size_t embedding_layers() const noexcept { return hidden.size() + 1; }
    void validate() const;
    bool operator==(const NetworkConfig&) const = default;
};

enum class Group { embedding, classifier };

struct Param {
    std::string name;
    Tensor value;
    Group group = Group::embedding;
    bool noise_eligible = false;

    bool operator==(const Param&) const = default;
};

using Gradients = std::vector<Tensor>;
/// One value per noise-eligible coordinate, in ParamSet order.
using NoiseVector = std::vector<double>;

class ParamSet {
public:
    ParamSet() = default;
    explicit ParamSet(std::vector<Param> params);

    std::vector<Param>& params() noexcept { return params_; }
    const std::vector<Param>& params() const noexcept { return params_; }
    std::size_t size() const noexcept { return params_.size(); }
    Param& operator[](std::size_t i) { return params_[i]; }
    const Param& operator[](std::size_t i) const { return params_[i]; }
    const Param& get(const std::string& name) const;

    std::size_t total_count() const;
    std::size_t eligible_count() const;
    std::size_t embedding_layers() const;

    std::vector<double> flatten() const;
    void unflatten(std::span<const double> values);
    std::vector<double> eligible_values() const;
    void set_eligible_values(std::span<const double> values);

    Gradients zero_gradients() const;
    bool operator==(const ParamSet&) const = default;

private:
    std::vector<Param> params_;
};

ParamSet init_network(const NetworkConfig& config);

/// Embedding-network forward pass: linear+ReLU per hidden layer, final layer linear.
Tensor embed(const ParamSet& params, const Tensor& x, kernels::Exec exec = kernels::Exec::parallel);
Tensor logits(const ParamSet& params, const Tensor& x, kernels::Exec exec = kernels::Exec::parallel);

/// Registers every parameter on the tape, in ParamSet order, so that
/// tape.backward() gradients line up with params.
std::vector<ad::Var> bind(ad::Tape& tape, const ParamSet& params);
ad::Var embed(const ParamSet& layout, std::span<const ad::Var> vars, ad::Var x);
ad::Var logits(const ParamSet& layout, std::span<const ad::Var> vars, ad::Var x);

/// Copy of params with noise added to the eligible coordinates.
ParamSet perturbed(const ParamSet& params, const NoiseVector& noise);

/// Adds noise to params in place; reset() (or destruction) restores the
/// original values bit-identically.
class NoiseGuard {
public:
    NoiseGuard(ParamSet& params, const NoiseVector& noise);
    ~NoiseGuard() { reset(); }
    NoiseGuard(const NoiseGuard&) = delete;
    NoiseGuard& operator=(const NoiseGuard&) = delete;
    void reset();

private:
    ParamSet* params_;
    std::vector<double> saved_;
    bool active_ = true;
};

void save_checkpoint(const std::filesystem::path& path, const NetworkConfig& config, const ParamSet& params);
std::pair<NetworkConfig, ParamSet> load_checkpoint(const std::filesystem::path& path);

}  // namespace f2m
