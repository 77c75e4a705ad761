#pragma once

// Permanent stuck-at faults on multiplier outputs and the two GEMM engines
// that honour them: a weight-stationary systolic array (faulty MACs are
// reused by every tile of a larger matrix) and a GPU-style tiled GEMM (faults
// confined to one output tile).

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "axfault/axmul.hpp"
#include "axfault/tensor.hpp"

namespace axfault {

enum class StuckAt : std::uint8_t { sa0, sa1 };

std::string to_string(StuckAt kind);
StuckAt parse_stuck_at(std::string_view text);

struct StuckAtFault {
  int bit = 15;  // position in the 16-bit product, 0 = LSB
  StuckAt kind = StuckAt::sa1;

  friend bool operator==(const StuckAtFault&, const StuckAtFault&) = default;
};

void validate(const StuckAtFault& f);

inline std::int16_t apply_fault(std::int16_t product, StuckAtFault f) {
  const auto pattern = static_cast<std::uint16_t>(product);
  const auto bit = static_cast<std::uint16_t>(1u << f.bit);
  return static_cast<std::int16_t>(f.kind == StuckAt::sa1 ? pattern | bit
                                                          : pattern & ~bit);
}

// Stuck-at assignments over an n x n MAC grid, at most one per MAC.
class FaultMap {
 public:
  struct Entry {
    std::size_t row;
    std::size_t col;
    StuckAtFault fault;
  };

  explicit FaultMap(std::size_t n);

  std::size_t n() const { return n_; }
  std::size_t size() const { return count_; }
  bool empty() const { return count_ == 0; }

  // Throws if (row, col) is out of range or already faulty.
  void insert(std::size_t row, std::size_t col, StuckAtFault fault);
  const StuckAtFault* find(std::size_t row, std::size_t col) const {
    const auto& slot = grid_[row * n_ + col];
    return slot ? &*slot : nullptr;
  }

  // Row-major order.
  std::vector<Entry> entries() const;

  friend bool operator==(const FaultMap&, const FaultMap&) = default;

 private:
  std::size_t n_;
  std::size_t count_ = 0;
  std::vector<std::optional<StuckAtFault>> grid_;
};

// floor(percent * n^2 / 100) distinct MACs drawn uniformly without
// replacement; all carry `fault`.
FaultMap random_fault_map(std::size_t n, double percent, StuckAtFault fault, std::uint64_t seed);

// Text format: "n=<dim>" then one "i,j,bit,kind" line per fault.
void save_fault_map(const FaultMap& fm, const std::filesystem::path& path);
FaultMap load_fault_map(const std::filesystem::path& path);

enum class InjectMode { propagate, bypass };

std::string to_string(InjectMode mode);
InjectMode parse_inject_mode(std::string_view text);

struct SystolicConfig {
  std::size_t n = 64;
  InjectMode mode = InjectMode::propagate;
};

// Per-weight action for a stationed R x C weight matrix: which fault (if any)
// the MAC holding weight (r, c) applies. Weight (r, c) sits on MAC
// (r mod n, c mod n).
class StationPlan {
 public:
  static constexpr std::int8_t kClean = -1;
  static constexpr std::int8_t kBypass = -2;

  StationPlan(std::size_t rows, std::size_t cols, const FaultMap& fm, InjectMode mode);

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  bool clean() const { return faulty_ == 0; }
  std::size_t faulty_weights() const { return faulty_; }

  // kClean, kBypass, or an index into faults().
  std::int8_t action(std::size_t r, std::size_t c) const { return actions_[r * cols_ + c]; }
  const std::vector<std::int8_t>& actions() const { return actions_; }
  const std::vector<StuckAtFault>& faults() const { return faults_; }

 private:
  std::size_t rows_;
  std::size_t cols_;
  std::size_t faulty_ = 0;
  std::vector<std::int8_t> actions_;
  std::vector<StuckAtFault> faults_;
};

// out(r, b) = sum_c fault(M(A(c, b), W(r, c))) with the fault of the MAC
// that holds W(r, c). Functional, not cycle accurate.
Matrix<std::int32_t> systolic_gemm(const Matrix<std::int8_t>& weights,
                                   const Matrix<std::int8_t>& activations,
                                   const AxMultiplier& m, const FaultMap& fm,
                                   const SystolicConfig& cfg);

// Same computation against a prebuilt plan.
Matrix<std::int32_t> stationed_gemm(const Matrix<std::int8_t>& weights,
                                    const Matrix<std::int8_t>& activations,
                                    const AxMultiplier& m, const StationPlan& plan);

struct TileFaultSpec {
  std::size_t tile_index = 0;
  double damaged_fraction = 0.40;
  StuckAtFault fault;
  std::uint64_t seed = 0;
};

// Output-local MAC positions (row-major within a tile x tile block) that the
// spec damages: ceil(fraction * tile^2) of them, seeded.
std::vector<std::size_t> damaged_tile_positions(const TileFaultSpec& tf, std::size_t tile);

// Number of tile x tile output blocks of an R x B result.
std::size_t tile_count(std::size_t rows, std::size_t cols, std::size_t tile);

// Output blocks are numbered row-major; only block tf.tile_index is damaged
// and faults never recur in other blocks.
Matrix<std::int32_t> gpu_tile_gemm(const Matrix<std::int8_t>& weights,
                                   const Matrix<std::int8_t>& activations,
                                   const AxMultiplier& m, const TileFaultSpec& tf,
                                   std::size_t tile);

// Weights stationed on faulty MACs, row-major.
std::vector<std::pair<std::size_t, std::size_t>> map_pruned_indices(const FaultMap& fm,
                                                                     std::size_t rows,
                                                                     std::size_t cols);

}  // namespace axfault
