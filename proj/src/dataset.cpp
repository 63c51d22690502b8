#include "f2m/dataset.hpp"

#include <string>

#include "f2m/errors.hpp"

namespace f2m {

void Dataset::add(std::span<const double> x, int label) {
    if (x.size() != dim)
        throw DimensionError("sample has " + std::to_string(x.size()) + " features, dataset expects " +
                             std::to_string(dim));
    features.insert(features.end(), x.begin(), x.end());
    labels.push_back(label);
}

void Dataset::append(const Dataset& other) {
    if (other.empty()) return;
    if (empty() && dim == 0) dim = other.dim;
    if (other.dim != dim)
        throw DimensionError("cannot append " + std::to_string(other.dim) + "-dim samples to a " +
                             std::to_string(dim) + "-dim dataset");
    features.insert(features.end(), other.features.begin(), other.features.end());
    labels.insert(labels.end(), other.labels.begin(), other.labels.end());
}

Dataset Dataset::subset(std::span<const std::size_t> indices) const {
    Dataset out(dim);
    out.features.reserve(indices.size() * dim);
    out.labels.reserve(indices.size());
    for (auto i : indices) {
        if (i >= size()) throw IndexError("sample index " + std::to_string(i) + " out of range");
        out.add(row(i), labels[i]);
    }
    return out;
}

Dataset Dataset::filter_classes(const std::set<int>& keep) const {
    Dataset out(dim);
    for (std::size_t i = 0; i < size(); ++i)
        if (keep.count(labels[i])) out.add(row(i), labels[i]);
    return out;
}

std::set<int> Dataset::classes() const { return {labels.begin(), labels.end()}; }

std::map<int, std::vector<std::size_t>> Dataset::indices_by_class() const {
    std::map<int, std::vector<std::size_t>> out;
    for (std::size_t i = 0; i < size(); ++i) out[labels[i]].push_back(i);
    return out;
}

Tensor Dataset::matrix() const {
    if (empty()) throw StateError("feature matrix of an empty dataset");
    return Tensor({size(), dim}, features);
}

}  // namespace f2m
