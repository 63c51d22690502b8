#pragma once

// Class prototypes (mean embeddings), nearest-class-mean classification,
// prototype normalization and the exemplar buffer for few-shot sessions.

#include <cstddef>
#include <cstdint>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <vector>

#include "f2m/dataset.hpp"
#include "f2m/net.hpp"
#include "json.hpp"

namespace f2m {

using ClassMeans = std::map<int, std::vector<double>>;

/// Session index of the base session.
inline constexpr int kBaseSession = 1;

struct Prototype {
    int class_id = 0;
    std::vector<double> vector;
    int session = kBaseSession;

    bool operator==(const Prototype&) const = default;
};

class PrototypeStore {
public:
    /// Throws ProtocolError if the class is already stored.
    void add(int class_id, std::vector<double> vector, int session);

    bool contains(int class_id) const { return protos_.count(class_id) != 0; }
    const Prototype& at(int class_id) const;
    const std::map<int, Prototype>& prototypes() const noexcept { return protos_; }
    std::map<int, Prototype>& prototypes() noexcept { return protos_; }
    bool empty() const noexcept { return protos_.empty(); }
    std::size_t size() const noexcept { return protos_.size(); }
    std::set<int> classes() const;
    ClassMeans means() const;

    std::optional<double> target_norm;

    bool operator==(const PrototypeStore&) const = default;

private:
    std::map<int, Prototype> protos_;
};

/// Per-class arithmetic mean of the rows of `embeddings` (row i has label labels[i]).
ClassMeans class_means(const Tensor& embeddings, std::span<const int> labels, const std::set<int>& classes);

ClassMeans compute_prototypes(const ParamSet& params, const Dataset& samples, const std::set<int>& classes);

/// Class whose prototype is nearest (squared Euclidean) to the embedding; ties
/// go to the smallest class id. `candidates`, when given, restricts the search.
int nearest_prototype(const PrototypeStore& store, std::span<const double> embedding,
                      const std::set<int>* candidates = nullptr);

int ncm_classify(const PrototypeStore& store, const ParamSet& params, std::span<const double> x);
std::vector<int> ncm_classify_batch(const PrototypeStore& store, const Tensor& embeddings,
                                    const std::set<int>* candidates = nullptr);

/// Rescales every prototype to the store's target norm, fixing it to the mean
/// base-session prototype norm on first use.
void normalize_prototypes(PrototypeStore& store);

enum class Split { base, novel };

struct NormStats {
    double mean = 0.0;
    double stddev = 0.0;
};

NormStats prototype_norm_stats(const PrototypeStore& store, Split split);

/// Stored samples from past few-shot sessions, at most `capacity` per class.
struct ExemplarBuffer {
    std::size_t capacity = 5;
    std::map<int, Dataset> per_class;

    /// Throws ContractError if an addition would exceed capacity.
    void add(const std::map<int, Dataset>& additions);
    Dataset all() const;
    std::size_t size() const;

    bool operator==(const ExemplarBuffer&) const = default;
};

/// Uniform selection without replacement of min(k, available) samples per class.
std::map<int, Dataset> select_exemplars(const Dataset& session_data, std::size_t k, std::uint64_t seed);

nlohmann::json to_json(const PrototypeStore& store);
PrototypeStore store_from_json(const nlohmann::json& doc);
nlohmann::json to_json(const ExemplarBuffer& buffer);
ExemplarBuffer exemplars_from_json(const nlohmann::json& doc);

}  // namespace f2m
