#include "fusion3d/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "fusion3d/errors.hpp"

namespace fusion3d {

std::size_t shape_product(const std::vector<std::size_t>& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

Tensor::Tensor(std::vector<std::size_t> shape, double fill)
    : shape_(std::move(shape)), data_(shape_product(shape_), fill) {}

Tensor::Tensor(std::vector<std::size_t> shape, std::vector<double> data)
    : shape_(std::move(shape)), data_(std::move(data)) {
  if (data_.size() != shape_product(shape_)) {
    throw DimensionError("tensor data length " + std::to_string(data_.size()) +
                         " does not match shape " + shape_string());
  }
}

std::size_t Tensor::dim(std::size_t axis) const {
  if (axis >= shape_.size()) {
    throw DimensionError("axis " + std::to_string(axis) + " out of range for shape " + shape_string());
  }
  return shape_[axis];
}

std::span<double> Tensor::row(std::size_t r) {
  const std::size_t w = shape_.back();
  return {data_.data() + r * w, w};
}

std::span<const double> Tensor::row(std::size_t r) const {
  const std::size_t w = shape_.back();
  return {data_.data() + r * w, w};
}

void Tensor::fill(double v) { std::fill(data_.begin(), data_.end(), v); }

Tensor& Tensor::operator+=(const Tensor& other) {
  if (!same_shape(other)) {
    throw DimensionError("cannot add " + other.shape_string() + " into " + shape_string());
  }
  for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += other.data_[i];
  return *this;
}

Tensor& Tensor::operator*=(double s) {
  for (auto& v : data_) v *= s;
  return *this;
}

Tensor Tensor::slice_rows(std::size_t begin, std::size_t end) const {
  const std::size_t w = cols();
  Tensor out({end - begin, w});
  std::copy(data_.begin() + static_cast<std::ptrdiff_t>(begin * w),
            data_.begin() + static_cast<std::ptrdiff_t>(end * w), out.data_.begin());
  return out;
}

bool Tensor::all_finite() const {
  return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
}

std::string Tensor::shape_string() const {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape_.size(); ++i) {
    if (i) os << ',';
    os << shape_[i];
  }
  os << ']';
  return os.str();
}

void require_shape(const Tensor& t, const std::vector<std::size_t>& shape, const std::string& what) {
  if (t.shape() != shape) {
    std::ostringstream os;
    os << what << ": expected shape [";
    for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
    os << "], got " << t.shape_string();
    throw DimensionError(os.str());
  }
}

}  // namespace fusion3d
