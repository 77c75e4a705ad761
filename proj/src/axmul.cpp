#include "axfault/axmul.hpp"

#include <charconv>
#include <cstdlib>
#include <limits>

#include "axfault/error.hpp"
#include "binary_io.hpp"

namespace axfault {
namespace {

using Table = std::vector<std::int16_t>;

template <class Fn>
std::shared_ptr<const Table> tabulate(Fn&& product) {
  auto table = std::make_shared<Table>(kLutEntries);
  for (int x = -128; x <= 127; ++x) {
    for (int y = -128; y <= 127; ++y) {
      const auto xi = static_cast<std::int8_t>(x);
      const auto yi = static_cast<std::int8_t>(y);
      (*table)[lut_index(xi, yi)] = product(xi, yi);
    }
  }
  return table;
}

std::int16_t exact_product(std::int8_t x, std::int8_t y) {
  return static_cast<std::int16_t>(x * y);
}

int parse_int(std::string_view text, std::string_view what) {
  int value = 0;
  const auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), value);
  if (ec != std::errc{} || ptr != text.data() + text.size()) {
    throw InvalidArgument("bad " + std::string(what) + ": '" + std::string(text) + "'");
  }
  return value;
}

}  // namespace

std::string_view to_string(MultiplierKind kind) {
  switch (kind) {
    case MultiplierKind::exact: return "exact";
    case MultiplierKind::truncated: return "truncated";
    case MultiplierKind::broken_carry: return "broken_carry";
    case MultiplierKind::lut: return "lut";
  }
  return "?";
}

AxMultiplier::AxMultiplier(std::string id, MultiplierKind kind, int parameter,
                           std::shared_ptr<const Table> table)
    : id_(std::move(id)), kind_(kind), parameter_(parameter), table_(std::move(table)) {}

AxMultiplier AxMultiplier::exact() {
  static const auto table = tabulate(exact_product);
  return AxMultiplier("exact", MultiplierKind::exact, 0, table);
}

AxMultiplier AxMultiplier::truncated(int k) {
  if (k < 0 || k > 15) {
    throw InvalidArgument("truncated multiplier needs k in 0..15, got " + std::to_string(k));
  }
  // Clear the k low bits of the 16-bit two's-complement product pattern.
  const auto mask = static_cast<std::uint16_t>(0xFFFFu << k);
  auto table = tabulate([mask](std::int8_t x, std::int8_t y) {
    const auto pattern = static_cast<std::uint16_t>(exact_product(x, y));
    return static_cast<std::int16_t>(pattern & mask);
  });
  return AxMultiplier("truncated:" + std::to_string(k), MultiplierKind::truncated, k,
                      std::move(table));
}

AxMultiplier AxMultiplier::broken_carry(int k) {
  if (k < 0 || k > 7) {
    throw InvalidArgument("broken_carry multiplier needs k in 0..7, got " + std::to_string(k));
  }
  // Operand LSBs are dropped before the partial products are formed.
  const auto mask = static_cast<std::uint8_t>(0xFFu << k);
  auto table = tabulate([mask](std::int8_t x, std::int8_t y) {
    const auto xm = static_cast<std::int8_t>(static_cast<std::uint8_t>(x) & mask);
    const auto ym = static_cast<std::int8_t>(static_cast<std::uint8_t>(y) & mask);
    return exact_product(xm, ym);
  });
  return AxMultiplier("broken_carry:" + std::to_string(k), MultiplierKind::broken_carry, k,
                      std::move(table));
}

AxMultiplier AxMultiplier::from_table(std::string id, std::vector<std::int16_t> table) {
  if (table.size() != kLutEntries) {
    throw FormatError("multiplier table needs " + std::to_string(kLutEntries) +
                      " entries, got " + std::to_string(table.size()));
  }
  return AxMultiplier(std::move(id), MultiplierKind::lut, 0,
                      std::make_shared<const Table>(std::move(table)));
}

AxMultiplier parse_multiplier(std::string_view spec) {
  if (spec == "exact") return AxMultiplier::exact();
  const auto colon = spec.find(':');
  if (colon == std::string_view::npos) {
    throw InvalidArgument("unknown multiplier '" + std::string(spec) + "'");
  }
  const auto family = spec.substr(0, colon);
  const auto arg = spec.substr(colon + 1);
  if (family == "truncated") return AxMultiplier::truncated(parse_int(arg, "truncation width"));
  if (family == "broken_carry") return AxMultiplier::broken_carry(parse_int(arg, "operand cut"));
  if (family == "lut") return load_lut(std::filesystem::path(std::string(arg)), std::string(spec));
  throw InvalidArgument("unknown multiplier family '" + std::string(family) + "'");
}

AxMultiplier load_lut(const std::filesystem::path& path) {
  return load_lut(path, "lut:" + path.stem().string());
}

AxMultiplier load_lut(const std::filesystem::path& path, std::string id) {
  const auto bytes = detail::read_file(path);
  if (bytes.size() != kLutBytes) {
    throw FormatError("LUT file " + path.string() + " has " + std::to_string(bytes.size()) +
                      " bytes, expected " + std::to_string(kLutBytes));
  }
  Table table(kLutEntries);
  for (std::size_t i = 0; i < kLutEntries; ++i) {
    const auto lo = static_cast<std::uint16_t>(bytes[2 * i]);
    const auto hi = static_cast<std::uint16_t>(bytes[2 * i + 1]);
    table[i] = static_cast<std::int16_t>(static_cast<std::uint16_t>(lo | (hi << 8)));
  }
  return AxMultiplier::from_table(std::move(id), std::move(table));
}

void save_lut(const AxMultiplier& m, const std::filesystem::path& path) {
  detail::ByteWriter out;
  for (std::int16_t v : m.table()) out.le16(static_cast<std::uint16_t>(v));
  detail::write_file(path, out.bytes());
}

ErrorMetrics mae(const AxMultiplier& m) {
  ErrorMetrics metrics;
  std::int64_t total = 0;
  for (int x = -128; x <= 127; ++x) {
    for (int y = -128; y <= 127; ++y) {
      const auto xi = static_cast<std::int8_t>(x);
      const auto yi = static_cast<std::int8_t>(y);
      const std::int64_t err = std::llabs(static_cast<std::int64_t>(m.multiply(xi, yi)) - x * y);
      total += err;
      metrics.worst_case_abs = std::max(metrics.worst_case_abs, err);
      metrics.error_count += err != 0;
    }
  }
  const double mean = static_cast<double>(total) / static_cast<double>(kLutEntries);
  metrics.mae_percent = 100.0 * mean / 65536.0;
  return metrics;
}

ActivationSample ActivationSample::uniform_full() {
  ActivationSample s;
  s.id = "uniform-full";
  s.counts.fill(1);
  return s;
}

ActivationSample ActivationSample::from_codes(std::string id,
                                              std::span<const std::int8_t> codes) {
  ActivationSample s;
  s.id = std::move(id);
  for (std::int8_t c : codes) s.add(c);
  return s;
}

std::uint64_t ActivationSample::total() const {
  std::uint64_t t = 0;
  for (auto c : counts) t += c;
  return t;
}

bool WeightMapTable::is_identity() const {
  for (int w = -128; w <= 127; ++w) {
    if (map[w + 128] != w) return false;
  }
  return true;
}

WeightMapTable WeightMapTable::identity(std::string multiplier_id,
                                        std::string activation_set_id) {
  WeightMapTable t;
  for (int w = -128; w <= 127; ++w) t.map[w + 128] = static_cast<std::int8_t>(w);
  t.multiplier_id = std::move(multiplier_id);
  t.activation_set_id = std::move(activation_set_id);
  return t;
}

WeightMapTable build_weight_map(const AxMultiplier& m, const ActivationSample& acts) {
  if (acts.total() == 0) throw InvalidArgument("activation sample is empty");

  // Only activation codes that actually occur contribute to the objective.
  std::vector<int> codes;
  std::vector<std::int64_t> weights;
  for (int a = -128; a <= 127; ++a) {
    if (acts.counts[a + 128] != 0) {
      codes.push_back(a);
      weights.push_back(static_cast<std::int64_t>(acts.counts[a + 128]));
    }
  }

  // approx[w'][i] = M(codes[i], w')
  std::vector<std::int32_t> approx(256 * codes.size());
  for (int wp = -128; wp <= 127; ++wp) {
    for (std::size_t i = 0; i < codes.size(); ++i) {
      approx[(wp + 128) * codes.size() + i] =
          m.multiply(static_cast<std::int8_t>(codes[i]), static_cast<std::int8_t>(wp));
    }
  }

  WeightMapTable table;
  table.multiplier_id = m.id();
  table.activation_set_id = acts.id;
  for (int w = -128; w <= 127; ++w) {
    std::int64_t best_cost = std::numeric_limits<std::int64_t>::max();
    int best = w;
    for (int wp = -128; wp <= 127; ++wp) {
      const std::int32_t* row = &approx[(wp + 128) * codes.size()];
      std::int64_t cost = 0;
      for (std::size_t i = 0; i < codes.size(); ++i) {
        cost += weights[i] * std::llabs(static_cast<std::int64_t>(row[i]) - codes[i] * w);
      }
      const bool better =
          cost < best_cost ||
          (cost == best_cost && (std::abs(wp - w) < std::abs(best - w) ||
                                 (std::abs(wp - w) == std::abs(best - w) && wp < best)));
      if (better) {
        best_cost = cost;
        best = wp;
      }
    }
    table.map[w + 128] = static_cast<std::int8_t>(best);
  }
  return table;
}

void save_weight_map(const WeightMapTable& table, const std::filesystem::path& path) {
  detail::ByteWriter out;
  out.raw("AXWM", 4);
  out.u8(1);
  for (int i = 0; i < 3; ++i) out.u8(0);
  out.raw(table.map.data(), table.map.size());
  detail::write_file(path, out.bytes());
}

WeightMapTable load_weight_map(const std::filesystem::path& path, std::string multiplier_id,
                               std::string activation_set_id) {
  const auto bytes = detail::read_file(path);
  if (bytes.size() != 8 + 256) {
    throw FormatError("weight map " + path.string() + " has wrong size");
  }
  if (std::memcmp(bytes.data(), "AXWM", 4) != 0) {
    throw FormatError("weight map " + path.string() + " has bad magic");
  }
  if (bytes[4] != 1) {
    throw FormatError("weight map " + path.string() + " has unsupported version " +
                      std::to_string(bytes[4]));
  }
  WeightMapTable table;
  std::memcpy(table.map.data(), bytes.data() + 8, 256);
  table.multiplier_id = std::move(multiplier_id);
  table.activation_set_id = std::move(activation_set_id);
  return table;
}

}  // namespace axfault
