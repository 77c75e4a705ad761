#pragma once

// Symmetric per-tensor int8 quantisation. Codes live in [-127, 127] so the
// representable set is closed under negation.

#include <cmath>
#include <cstdint>
#include <span>

#include "axfault/tensor.hpp"

namespace axfault {

inline constexpr int kQuantMax = 127;

// max|v| / 127, or 1 when every value is zero.
double symmetric_scale(std::span<const double> values);

inline std::int8_t quantize_value(double v, double scale) {
  const double scaled = v / scale;
  // round half away from zero
  double r = std::floor(std::fabs(scaled) + 0.5);
  if (r > kQuantMax) r = kQuantMax;
  return static_cast<std::int8_t>(scaled < 0 ? -r : r);
}

QTensor quantize(const FTensor& t);
QTensor quantize(std::span<const double> values, Shape shape);
FTensor dequantize(const QTensor& q);

// f_i = acc_i * w_scale * a_scale
FTensor requantize_accum(std::span<const std::int32_t> acc, Shape shape, double w_scale,
                         double a_scale);

}  // namespace axfault
