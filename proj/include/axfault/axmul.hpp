#pragma once

// Approximate 8x8 -> 16-bit signed multipliers, their exhaustive error
// metrics, and the per-multiplier weight retuning tables.

#include <array>
#include <cstdint>
#include <filesystem>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace axfault {

inline constexpr std::size_t kLutEntries = 65536;
inline constexpr std::size_t kLutBytes = kLutEntries * 2;

constexpr std::size_t lut_index(std::int8_t x, std::int8_t y) {
  return (static_cast<std::size_t>(x + 128) << 8) |
         static_cast<std::size_t>(y + 128);
}

enum class MultiplierKind { exact, truncated, broken_carry, lut };

std::string_view to_string(MultiplierKind kind);

// Immutable once built; copies share the product table.
class AxMultiplier {
 public:
  static AxMultiplier exact();
  static AxMultiplier truncated(int k);
  static AxMultiplier broken_carry(int k);
  static AxMultiplier from_table(std::string id, std::vector<std::int16_t> table);

  std::int16_t multiply(std::int8_t x, std::int8_t y) const {
    return (*table_)[lut_index(x, y)];
  }

  const std::string& id() const { return id_; }
  MultiplierKind kind() const { return kind_; }
  // k for the parametric families, 0 otherwise.
  int parameter() const { return parameter_; }
  std::span<const std::int16_t> table() const { return *table_; }

  std::optional<double> energy_per_op_pj;

 private:
  AxMultiplier(std::string id, MultiplierKind kind, int parameter,
               std::shared_ptr<const std::vector<std::int16_t>> table);

  std::string id_;
  MultiplierKind kind_;
  int parameter_;
  std::shared_ptr<const std::vector<std::int16_t>> table_;
};

inline AxMultiplier build_truncated(int k) { return AxMultiplier::truncated(k); }
inline AxMultiplier build_broken_carry(int k) {
  return AxMultiplier::broken_carry(k);
}

// Parses "exact", "truncated:<k>", "broken_carry:<k>" or "lut:<path>".
AxMultiplier parse_multiplier(std::string_view spec);

AxMultiplier load_lut(const std::filesystem::path& path);
AxMultiplier load_lut(const std::filesystem::path& path, std::string id);
void save_lut(const AxMultiplier& m, const std::filesystem::path& path);

struct ErrorMetrics {
  double mae_percent = 0.0;
  std::int64_t worst_case_abs = 0;
  std::int64_t error_count = 0;
};

// Exhaustive over all 2^16 operand pairs. The mean absolute error is
// normalised by 2^16 (the signed 8x8 output range) and reported in percent.
ErrorMetrics mae(const AxMultiplier& m);

// Histogram over int8 activation codes; counts[a + 128] is the multiplicity.
struct ActivationSample {
  std::string id;
  std::array<std::uint64_t, 256> counts{};

  static ActivationSample uniform_full();
  static ActivationSample from_codes(std::string id,
                                     std::span<const std::int8_t> codes);

  void add(std::int8_t code, std::uint64_t n = 1) { counts[code + 128] += n; }
  std::uint64_t total() const;
};

struct WeightMapTable {
  std::array<std::int8_t, 256> map{};
  std::string multiplier_id;
  std::string activation_set_id;

  std::int8_t apply(std::int8_t w) const { return map[w + 128]; }
  bool is_identity() const;

  static WeightMapTable identity(std::string multiplier_id,
                                 std::string activation_set_id);
};

// For every weight code w picks the code w' minimising
//   sum_a count(a) * |M(a, w') - a * w|
// ties going to the smallest |w' - w|, then to the smaller w'.
WeightMapTable build_weight_map(const AxMultiplier& m,
                                const ActivationSample& acts);

// Cache format: "AXWM", version byte, 3 reserved bytes, 256 signed bytes.
void save_weight_map(const WeightMapTable& table,
                     const std::filesystem::path& path);
WeightMapTable load_weight_map(const std::filesystem::path& path,
                               std::string multiplier_id,
                               std::string activation_set_id);

}  // namespace axfault
