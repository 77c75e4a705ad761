#include "axfault/quant.hpp"

#include <algorithm>

#include "axfault/error.hpp"

namespace axfault {

double symmetric_scale(std::span<const double> values) {
  double peak = 0.0;
  for (double v : values) {
    if (!std::isfinite(v)) throw InvalidArgument("cannot quantize a non-finite value");
    peak = std::max(peak, std::fabs(v));
  }
  return peak == 0.0 ? 1.0 : peak / kQuantMax;
}

QTensor quantize(std::span<const double> values, Shape shape) {
  if (shape_size(shape) != values.size()) {
    throw ShapeError("quantize: data length does not match shape " + shape_string(shape));
  }
  QTensor q;
  q.shape = std::move(shape);
  q.scale = symmetric_scale(values);
  q.data.resize(values.size());
  std::transform(values.begin(), values.end(), q.data.begin(),
                 [s = q.scale](double v) { return quantize_value(v, s); });
  return q;
}

QTensor quantize(const FTensor& t) { return quantize(t.data, t.shape); }

FTensor dequantize(const QTensor& q) {
  std::vector<double> out(q.data.size());
  std::transform(q.data.begin(), q.data.end(), out.begin(),
                 [s = q.scale](std::int8_t c) { return c * s; });
  return FTensor(q.shape, std::move(out));
}

FTensor requantize_accum(std::span<const std::int32_t> acc, Shape shape, double w_scale,
                         double a_scale) {
  if (!(w_scale > 0.0) || !(a_scale > 0.0)) {
    throw InvalidArgument("requantize_accum: scales must be positive");
  }
  const double s = w_scale * a_scale;
  std::vector<double> out(acc.size());
  std::transform(acc.begin(), acc.end(), out.begin(),
                 [s](std::int32_t v) { return static_cast<double>(v) * s; });
  return FTensor(std::move(shape), std::move(out));
}

}  // namespace axfault
