// SPDX-License-Identifier: Apache-2.0
#include "moelab/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "moelab/errors.hpp"

namespace moelab {

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto e : shape) n *= e;
  return n;
}

std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
  os << ']';
  return os.str();
}

namespace {
void check_extents(const Shape& shape) {
  if (shape.empty()) throw DimensionError("tensor rank must be at least 1");
  for (auto e : shape) {
    if (e == 0) throw DimensionError("tensor extents must be positive, got " + shape_string(shape));
  }
}
}  // namespace

Tensor::Tensor(Shape shape) : shape_(std::move(shape)) {
  check_extents(shape_);
  data_.assign(shape_numel(shape_), 0.0);
}

Tensor::Tensor(Shape shape, std::vector<double> data) : shape_(std::move(shape)), data_(std::move(data)) {
  check_extents(shape_);
  if (shape_numel(shape_) != data_.size()) {
    throw DimensionError("shape " + shape_string(shape_) + " needs " + std::to_string(shape_numel(shape_)) +
                         " values, got " + std::to_string(data_.size()));
  }
}

Tensor Tensor::filled(Shape shape, double value) {
  Tensor t(std::move(shape));
  std::fill(t.data_.begin(), t.data_.end(), value);
  return t;
}

Tensor Tensor::matrix(std::initializer_list<std::initializer_list<double>> rows) {
  const std::size_t r = rows.size();
  const std::size_t c = r ? rows.begin()->size() : 0;
  std::vector<double> values;
  values.reserve(r * c);
  for (const auto& row : rows) {
    if (row.size() != c) throw DimensionError("ragged matrix literal");
    values.insert(values.end(), row.begin(), row.end());
  }
  return Tensor({r, c}, std::move(values));
}

Tensor Tensor::vector(std::initializer_list<double> values) {
  return Tensor({values.size()}, std::vector<double>(values));
}

std::size_t Tensor::dim(std::size_t axis) const {
  if (axis >= shape_.size()) throw DimensionError("axis out of range for shape " + shape_string(shape_));
  return shape_[axis];
}

std::size_t Tensor::rows() const {
  if (rank() != 2) throw DimensionError("expected a matrix, got shape " + shape_string(shape_));
  return shape_[0];
}

std::size_t Tensor::cols() const {
  if (rank() != 2) throw DimensionError("expected a matrix, got shape " + shape_string(shape_));
  return shape_[1];
}

double& Tensor::at(std::size_t r, std::size_t c) { return data_[r * cols() + c]; }
double Tensor::at(std::size_t r, std::size_t c) const { return data_[r * cols() + c]; }

std::span<double> Tensor::grad() {
  if (grad_.empty()) grad_.assign(data_.size(), 0.0);
  return grad_;
}

void Tensor::zero_grad() {
  if (!grad_.empty()) std::fill(grad_.begin(), grad_.end(), 0.0);
}

bool Tensor::all_finite() const noexcept {
  return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
}

Tensor Tensor::reshaped(Shape shape) const {
  if (shape_numel(shape) != numel()) {
    throw DimensionError("cannot reshape " + shape_string(shape_) + " to " + shape_string(shape));
  }
  return Tensor(std::move(shape), data_);
}

}  // namespace moelab
