#pragma once

// Synthetic data, session scheduling, CSV ingestion and the experiment
// drivers (full pipeline, ablation grid, bound sweep).

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "f2m/analysis.hpp"
#include "f2m/dataset.hpp"
#include "f2m/engine.hpp"
#include "f2m/net.hpp"
#include "json.hpp"

namespace f2m {

struct SyntheticSpec {
    std::size_t class_count = 20;
    std::size_t input_dim = 16;
    /// Distance scale of the class means from the origin.
    double separation = 3.0;
    double within_std = 1.0;
    std::size_t base_classes = 12;
    std::size_t new_classes = 8;
    std::size_t train_per_class = 50;
    std::size_t test_per_class = 50;
    std::uint64_t seed = 0;

    void validate() const;
    bool operator==(const SyntheticSpec&) const = default;
};

struct TrainTest {
    Dataset train;
    Dataset test;
};

/// Gaussian clusters around random class means of norm `separation`.
TrainTest gen_synthetic(const SyntheticSpec& spec);

/// Session 1 holds all training data of `base_class_count` random classes;
/// every later session holds `way` fresh classes with exactly `shot` samples each.
std::vector<SessionSpec> split_sessions(const Dataset& train, std::size_t base_class_count, std::size_t way,
                                        std::size_t shot, std::uint64_t seed);

/// Rows are `label,feat_1,...,feat_d`.
Dataset load_csv(const std::filesystem::path& path);
void write_csv(const std::filesystem::path& path, const Dataset& data);

struct DataConfig {
    SyntheticSpec synthetic;
    /// When set, data comes from these CSV files instead of the generator.
    std::string train_csv;
    std::string test_csv;
    std::size_t way = 2;
    std::size_t shot = 5;

    bool operator==(const DataConfig&) const = default;
};

struct ExperimentConfig {
    NetworkConfig net;
    TrainConfig train;
    DataConfig data;
    std::uint64_t seed = 0;
    std::size_t flatness_samples = 1000;
    bool measure_flatness = false;
    /// Record the base-training gradient-norm proxy after every epoch.
    bool trace_grad_norm = false;
    /// Stop after the base session.
    bool base_only = false;

    bool operator==(const ExperimentConfig&) const = default;
};

/// Copy of config with every component seed derived from config.seed.
ExperimentConfig seeded(ExperimentConfig config);

struct ExperimentResult {
    Metrics metrics;
    std::optional<FlatnessReport> flatness_train;
    std::optional<FlatnessReport> flatness_test;
    RunState state;
    /// Largest |phi - anchor| observed after any incremental update.
    double max_drift = 0.0;
    /// Norm statistics of the stored prototypes at the end of the run.
    std::optional<NormStats> base_norms;
    std::optional<NormStats> new_norms;
};

TrainTest load_data(const ExperimentConfig& config);

struct SplitFlatness {
    FlatnessReport train;
    FlatnessReport test;
};

/// Cross-entropy flatness of a base-session solution on the base classes'
/// train and test data, regenerated from `config` (unseeded form).
SplitFlatness probe_base_flatness(const ExperimentConfig& config, const ParamSet& params,
                                  const std::vector<int>& head_classes);
ExperimentResult run_experiment(const ExperimentConfig& config, const StepObserver& observer = nullptr);

struct SessionSummary {
    std::vector<double> mean;
    std::vector<double> stddev;
};

/// Mean and population standard deviation of per-session accuracy across runs.
SessionSummary summarize(const std::vector<ExperimentResult>& runs);

/// Flag sets of the ablation grid, in table order.
std::vector<Flags> ablation_flag_sets();

struct AblationRow {
    Flags flags;
    std::vector<double> accuracy;
    std::optional<double> pd;
};

std::vector<AblationRow> run_ablation_grid(const ExperimentConfig& config);

std::vector<double> default_bound_grid();

struct SweepRow {
    double bound = 0.0;
    double session1 = 0.0;
    double last_all = 0.0;
    double last_base = 0.0;
    std::optional<double> last_new;
};

std::vector<SweepRow> run_bound_sweep(const ExperimentConfig& config, const std::vector<double>& grid);

// Artifact writers. All emit deterministic content.
void write_metrics_json(const std::filesystem::path& path, const nlohmann::json& doc);
nlohmann::json experiment_json(const ExperimentResult& result);
void write_sessions_csv(const std::filesystem::path& path, const Metrics& metrics);
void write_ablation_csv(const std::filesystem::path& path, const std::vector<AblationRow>& rows);
void write_sweep_csv(const std::filesystem::path& path, const std::vector<SweepRow>& rows);
void write_flatness_csv(const std::filesystem::path& path, const std::vector<FlatnessReport>& reports);

}  // namespace f2m
