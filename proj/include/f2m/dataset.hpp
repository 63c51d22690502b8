#pragma once

#include <cstddef>
#include <map>
#include <set>
#include <span>
#include <vector>

#include "f2m/tensor.hpp"

namespace f2m {

/// Labeled samples with a fixed feature dimension, stored row-major.
struct Dataset {
    std::size_t dim = 0;
    std::vector<double> features;
    std::vector<int> labels;

    Dataset() = default;
    explicit Dataset(std::size_t d) : dim(d) {}

    std::size_t size() const noexcept { return labels.size(); }
    bool empty() const noexcept { return labels.empty(); }
    std::span<const double> row(std::size_t i) const { return {features.data() + i * dim, dim}; }

    void add(std::span<const double> x, int label);
    void append(const Dataset& other);
    Dataset subset(std::span<const std::size_t> indices) const;
    Dataset filter_classes(const std::set<int>& classes) const;

    std::set<int> classes() const;
    std::map<int, std::vector<std::size_t>> indices_by_class() const;

    /// Feature matrix [size x dim].
    Tensor matrix() const;

    bool operator==(const Dataset&) const = default;
};

}  // namespace f2m
