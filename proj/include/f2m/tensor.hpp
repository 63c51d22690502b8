#pragma once

#include <cstddef>
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

namespace f2m {

using Shape = std::vector<std::size_t>;

std::string shape_string(const Shape& shape);
std::size_t shape_size(const Shape& shape);

/// Dense row-major tensor of doubles. An empty shape denotes a scalar.
/// Construction rejects zero-sized dimensions, size mismatches and
/// non-finite values.
class Tensor {
public:
    Tensor() : shape_{}, values_(1, 0.0) {}
    Tensor(Shape shape, std::vector<double> values);
    explicit Tensor(Shape shape, double fill = 0.0);

    /// Skips the finiteness check; used for computed intermediates whose
    /// finiteness the caller verifies (training loops raise DivergenceError).
    static Tensor unchecked(Shape shape, std::vector<double> values);
    static Tensor scalar(double v) { return Tensor(Shape{}, std::vector<double>{v}); }
    static Tensor vector(std::vector<double> v);
    static Tensor matrix(std::initializer_list<std::initializer_list<double>> rows);
    static Tensor zeros_like(const Tensor& t) { return Tensor(t.shape_, 0.0); }

    const Shape& shape() const noexcept { return shape_; }
    std::size_t rank() const noexcept { return shape_.size(); }
    std::size_t size() const noexcept { return values_.size(); }
    bool is_scalar() const noexcept { return values_.size() == 1; }

    std::size_t rows() const;
    std::size_t cols() const;

    double item() const;
    double& operator[](std::size_t i) { return values_[i]; }
    double operator[](std::size_t i) const { return values_[i]; }
    double& at(std::size_t r, std::size_t c) { return values_[r * cols() + c]; }
    double at(std::size_t r, std::size_t c) const { return values_[r * cols() + c]; }

    std::span<double> data() noexcept { return values_; }
    std::span<const double> data() const noexcept { return values_; }
    const std::vector<double>& values() const noexcept { return values_; }

    bool all_finite() const;
    bool operator==(const Tensor& other) const = default;

private:
    Shape shape_;
    std::vector<double> values_;
};

}  // namespace f2m
