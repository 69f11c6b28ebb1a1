#include "nowcast/tensor.hpp"

#include <cmath>

#include <fmt/format.h>

#include "nowcast/error.hpp"

namespace nowcast {

std::string shape_string(const Shape& shape) {
  std::string out = "(";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(shape[i]);
  }
  return out + ")";
}

std::int64_t shape_numel(const Shape& shape) {
  std::int64_t n = 1;
  for (auto d : shape) {
    if (d < 0) throw ShapeError(fmt::format("negative dimension in {}", shape_string(shape)));
    n *= d;
  }
  return n;
}

Dims4 dims4(const Shape& shape, const char* what) {
  if (shape.size() != 4) {
    throw ShapeError(fmt::format("{} must be rank 4 (N,C,H,W), got {}", what, shape_string(shape)));
  }
  return {shape[0], shape[1], shape[2], shape[3]};
}

template <std::floating_point T>
Tensor<T>::Tensor(Shape shape, T fill)
    : shape_(std::move(shape)), data_(static_cast<std::size_t>(shape_numel(shape_)), fill) {}

template <std::floating_point T>
Tensor<T>::Tensor(Shape shape, std::vector<T> data) : shape_(std::move(shape)), data_(data.begin(), data.end()) {
  if (shape_numel(shape_) != static_cast<std::int64_t>(data_.size())) {
    throw ShapeError(fmt::format("shape {} needs {} values, got {}", shape_string(shape_),
                                 shape_numel(shape_), data_.size()));
  }
}

template <std::floating_point T>
Tensor<T> Tensor<T>::reshaped(Shape shape) const {
  if (shape_numel(shape) != numel()) {
    throw ShapeError(fmt::format("cannot reshape {} to {}", shape_string(shape_), shape_string(shape)));
  }
  Tensor out = *this;
  out.shape_ = std::move(shape);
  return out;
}

template <std::floating_point T>
bool Tensor<T>::all_finite() const {
  return std::all_of(data_.begin(), data_.end(), [](T v) { return std::isfinite(v); });
}

template class Tensor<float>;
template class Tensor<double>;

}  // namespace nowcast
