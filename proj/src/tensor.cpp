#include "axfault/tensor.hpp"

#include <algorithm>
#include <cmath>

namespace axfault {

std::string shape_string(const Shape& shape) {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += "x";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

FTensor::FTensor(Shape s, std::vector<double> d)
    : shape(std::move(s)), data(std::move(d)) {
  if (data.size() != shape_size(shape)) {
    throw ShapeError("tensor data length " + std::to_string(data.size()) +
                     " does not match shape " + shape_string(shape));
  }
}

FTensor FTensor::zeros(Shape s) {
  const std::size_t n = shape_size(s);
  return FTensor(std::move(s), std::vector<double>(n, 0.0));
}

bool FTensor::all_finite() const {
  return std::all_of(data.begin(), data.end(),
                     [](double v) { return std::isfinite(v); });
}

}  // namespace axfault
