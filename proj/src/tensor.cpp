#include "f2m/tensor.hpp"

#include <cmath>
#include <sstream>

#include "f2m/errors.hpp"

namespace f2m {

std::string shape_string(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << 'x';
        os << shape[i];
    }
    os << ']';
    return os.str();
}

std::size_t shape_size(const Shape& shape) {
    std::size_t n = 1;
    for (auto d : shape) n *= d;
    return n;
}

namespace {
void check_shape(const Shape& shape) {
    for (auto d : shape)
        if (d == 0) throw DimensionError("zero-sized dimension in shape " + shape_string(shape));
}
}  // namespace

Tensor::Tensor(Shape shape, std::vector<double> values)
    : shape_(std::move(shape)), values_(std::move(values)) {
    check_shape(shape_);
    if (shape_size(shape_) != values_.size())
        throw DimensionError("shape " + shape_string(shape_) + " holds " +
                             std::to_string(shape_size(shape_)) + " values, got " +
                             std::to_string(values_.size()));
    if (!all_finite()) throw ContractError("tensor constructed with non-finite values");
}

Tensor Tensor::unchecked(Shape shape, std::vector<double> values) {
    check_shape(shape);
    if (shape_size(shape) != values.size())
        throw DimensionError("shape " + shape_string(shape) + " holds " +
                             std::to_string(shape_size(shape)) + " values, got " +
                             std::to_string(values.size()));
    Tensor t;
    t.shape_ = std::move(shape);
    t.values_ = std::move(values);
    return t;
}

Tensor::Tensor(Shape shape, double fill) : shape_(std::move(shape)) {
    check_shape(shape_);
    if (!std::isfinite(fill)) throw ContractError("tensor constructed with non-finite fill");
    values_.assign(shape_size(shape_), fill);
}

Tensor Tensor::vector(std::vector<double> v) {
    const std::size_t n = v.size();
    return Tensor(Shape{n}, std::move(v));
}

Tensor Tensor::matrix(std::initializer_list<std::initializer_list<double>> rows) {
    const std::size_t r = rows.size();
    const std::size_t c = r ? rows.begin()->size() : 0;
    std::vector<double> v;
    v.reserve(r * c);
    for (const auto& row : rows) {
        if (row.size() != c) throw DimensionError("ragged matrix literal");
        v.insert(v.end(), row.begin(), row.end());
    }
    return Tensor(Shape{r, c}, std::move(v));
}

std::size_t Tensor::rows() const {
    if (rank() != 2) throw DimensionError("expected a matrix, got shape " + shape_string(shape_));
    return shape_[0];
}

std::size_t Tensor::cols() const {
    if (rank() != 2) throw DimensionError("expected a matrix, got shape " + shape_string(shape_));
    return shape_[1];
}

double Tensor::item() const {
    if (!is_scalar()) throw ContractError("item() on tensor of shape " + shape_string(shape_));
    return values_[0];
}

bool Tensor::all_finite() const {
    for (double v : values_)
        if (!std::isfinite(v)) return false;
    return true;
}

}  // namespace f2m
