#include "axfault/faultsim.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>

#include "axfault/error.hpp"
#include "axfault/rng.hpp"

namespace axfault {
namespace {

// Largest reduction length for which 32-bit accumulation of (possibly
// faulted) 16-bit products cannot overflow.
constexpr std::size_t kMaxReduction = std::size_t{1} << 15;

void check_gemm_shapes(const Matrix<std::int8_t>& w, const Matrix<std::int8_t>& a) {
  if (w.cols() != a.rows()) {
    throw ShapeError("GEMM inner dimensions differ: weights " + std::to_string(w.rows()) + "x" +
                     std::to_string(w.cols()) + ", activations " + std::to_string(a.rows()) +
                     "x" + std::to_string(a.cols()));
  }
  if (w.cols() > kMaxReduction) {
    throw ShapeError("GEMM reduction length " + std::to_string(w.cols()) +
                     " exceeds the 32-bit accumulator bound");
  }
}

// Uniform sample of `count` distinct values from [0, population).
std::vector<std::size_t> sample_without_replacement(std::size_t population, std::size_t count,
                                                    std::uint64_t seed) {
  std::vector<std::size_t> pool(population);
  std::iota(pool.begin(), pool.end(), std::size_t{0});
  Rng rng(seed);
  for (std::size_t i = 0; i < count; ++i) {
    const std::size_t j = i + static_cast<std::size_t>(rng.below(population - i));
    std::swap(pool[i], pool[j]);
  }
  pool.resize(count);
  return pool;
}

}  // namespace

std::string to_string(StuckAt kind) { return kind == StuckAt::sa0 ? "sa0" : "sa1"; }

StuckAt parse_stuck_at(std::string_view text) {
  if (text == "sa0" || text == "0") return StuckAt::sa0;
  if (text == "sa1" || text == "1") return StuckAt::sa1;
  throw InvalidArgument("unknown stuck-at kind '" + std::string(text) + "'");
}

void validate(const StuckAtFault& f) {
  if (f.bit < 0 || f.bit > 15) {
    throw InvalidArgument("fault bit must be in 0..15, got " + std::to_string(f.bit));
  }
}

std::string to_string(InjectMode mode) {
  return mode == InjectMode::propagate ? "propagate" : "bypass";
}

InjectMode parse_inject_mode(std::string_view text) {
  if (text == "propagate") return InjectMode::propagate;
  if (text == "bypass") return InjectMode::bypass;
  throw InvalidArgument("unknown inject mode '" + std::string(text) + "'");
}

FaultMap::FaultMap(std::size_t n) : n_(n), grid_(n * n) {
  if (n == 0) throw InvalidArgument("fault map dimension must be positive");
}

void FaultMap::insert(std::size_t row, std::size_t col, StuckAtFault fault) {
  validate(fault);
  if (row >= n_ || col >= n_) {
    throw InvalidArgument("fault at (" + std::to_string(row) + "," + std::to_string(col) +
                          ") outside a " + std::to_string(n_) + "x" + std::to_string(n_) +
                          " array");
  }
  auto& slot = grid_[row * n_ + col];
  if (slot) {
    throw InvalidArgument("MAC (" + std::to_string(row) + "," + std::to_string(col) +
                          ") already has a fault");
  }
  slot = fault;
  ++count_;
}

std::vector<FaultMap::Entry> FaultMap::entries() const {
  std::vector<Entry> out;
  out.reserve(count_);
  for (std::size_t i = 0; i < grid_.size(); ++i) {
    if (grid_[i]) out.push_back({i / n_, i % n_, *grid_[i]});
  }
  return out;
}

FaultMap random_fault_map(std::size_t n, double percent, StuckAtFault fault, std::uint64_t seed) {
  validate(fault);
  if (!(percent >= 0.0 && percent <= 100.0)) {
    throw InvalidArgument("fault percentage must be in [0, 100]");
  }
  FaultMap fm(n);
  const std::size_t macs = n * n;
  // Nudge before flooring so that e.g. 29% of 100 is not lost to rounding.
  const auto count = std::min(
      macs, static_cast<std::size_t>(std::floor(percent * static_cast<double>(macs) / 100.0 + 1e-9)));
  for (std::size_t idx : sample_without_replacement(macs, count, seed)) {
    fm.insert(idx / n, idx % n, fault);
  }
  return fm;
}

void save_fault_map(const FaultMap& fm, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot create " + path.string());
  out << "n=" << fm.n() << '\n';
  for (const auto& e : fm.entries()) {
    out << e.row << ',' << e.col << ',' << e.fault.bit << ',' << to_string(e.fault.kind) << '\n';
  }
  if (!out) throw IoError("write failed: " + path.string());
}

FaultMap load_fault_map(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  std::string line;
  if (!std::getline(in, line) || line.rfind("n=", 0) != 0) {
    throw FormatError("fault map " + path.string() + " must start with 'n=<dim>'");
  }
  std::size_t n = 0;
  try {
    n = std::stoul(line.substr(2));
  } catch (const std::exception&) {
    throw FormatError("fault map header '" + line + "' is not a dimension");
  }
  FaultMap fm(n);
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::string i, j, bit, kind;
    if (!std::getline(ss, i, ',') || !std::getline(ss, j, ',') || !std::getline(ss, bit, ',') ||
        !std::getline(ss, kind)) {
      throw FormatError("fault map line " + std::to_string(lineno) + " is not i,j,bit,kind");
    }
    try {
      fm.insert(std::stoul(i), std::stoul(j), {std::stoi(bit), parse_stuck_at(kind)});
    } catch (const InvalidArgument& e) {
      throw FormatError("fault map line " + std::to_string(lineno) + ": " + e.what());
    } catch (const std::logic_error&) {
      throw FormatError("fault map line " + std::to_string(lineno) + " has a bad number");
    }
  }
  return fm;
}

StationPlan::StationPlan(std::size_t rows, std::size_t cols, const FaultMap& fm, InjectMode mode)
    : rows_(rows), cols_(cols), actions_(rows * cols, kClean) {
  if (fm.empty()) return;
  const std::size_t n = fm.n();
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < cols; ++c) {
      const StuckAtFault* f = fm.find(r % n, c % n);
      if (!f) continue;
      ++faulty_;
      if (mode == InjectMode::bypass) {
        actions_[r * cols + c] = kBypass;
        continue;
      }
      auto it = std::find(faults_.begin(), faults_.end(), *f);
      if (it == faults_.end()) it = faults_.insert(faults_.end(), *f);
      actions_[r * cols + c] = static_cast<std::int8_t>(it - faults_.begin());
    }
  }
}

Matrix<std::int32_t> stationed_gemm(const Matrix<std::int8_t>& weights,
                                    const Matrix<std::int8_t>& activations,
                                    const AxMultiplier& m, const StationPlan& plan) {
  check_gemm_shapes(weights, activations);
  if (plan.rows() != weights.rows() || plan.cols() != weights.cols()) {
    throw ShapeError("station plan does not match the weight matrix");
  }
  const std::size_t R = weights.rows();
  const std::size_t C = weights.cols();
  const std::size_t B = activations.cols();
  const std::int16_t* table = m.table().data();

  Matrix<std::int32_t> out(R, B, 0);
  for (std::size_t r = 0; r < R; ++r) {
    std::int32_t* acc = out.row(r).data();
    for (std::size_t c = 0; c < C; ++c) {
      const std::int8_t action = plan.action(r, c);
      if (action == StationPlan::kBypass) continue;
      // table[(a + 128) << 8 | (w + 128)] = M(a, w)
      const std::int16_t* by_act = table + (weights(r, c) + 128);
      const std::int8_t* a = activations.row(c).data();
      if (action == StationPlan::kClean) {
        for (std::size_t b = 0; b < B; ++b) acc[b] += by_act[(a[b] + 128) << 8];
      } else {
        const StuckAtFault f = plan.faults()[static_cast<std::size_t>(action)];
        for (std::size_t b = 0; b < B; ++b) acc[b] += apply_fault(by_act[(a[b] + 128) << 8], f);
      }
    }
  }
  return out;
}

Matrix<std::int32_t> systolic_gemm(const Matrix<std::int8_t>& weights,
                                   const Matrix<std::int8_t>& activations,
                                   const AxMultiplier& m, const FaultMap& fm,
                                   const SystolicConfig& cfg) {
  if (fm.n() != cfg.n) {
    throw ShapeError("fault map is " + std::to_string(fm.n()) + "x" + std::to_string(fm.n()) +
                     " but the array is " + std::to_string(cfg.n) + "x" + std::to_string(cfg.n));
  }
  check_gemm_shapes(weights, activations);
  return stationed_gemm(weights, activations, m,
                        StationPlan(weights.rows(), weights.cols(), fm, cfg.mode));
}

std::vector<std::size_t> damaged_tile_positions(const TileFaultSpec& tf, std::size_t tile) {
  if (tile == 0) throw InvalidArgument("tile size must be positive");
  if (!(tf.damaged_fraction > 0.0 && tf.damaged_fraction <= 1.0)) {
    throw InvalidArgument("damaged fraction must be in (0, 1]");
  }
  validate(tf.fault);
  const std::size_t macs = tile * tile;
  const auto count = std::min(
      macs, static_cast<std::size_t>(std::ceil(tf.damaged_fraction * static_cast<double>(macs) - 1e-9)));
  auto picked = sample_without_replacement(macs, std::max<std::size_t>(count, 1), tf.seed);
  std::sort(picked.begin(), picked.end());
  return picked;
}

std::size_t tile_count(std::size_t rows, std::size_t cols, std::size_t tile) {
  if (tile == 0) throw InvalidArgument("tile size must be positive");
  return ((rows + tile - 1) / tile) * ((cols + tile - 1) / tile);
}

Matrix<std::int32_t> gpu_tile_gemm(const Matrix<std::int8_t>& weights,
                                   const Matrix<std::int8_t>& activations,
                                   const AxMultiplier& m, const TileFaultSpec& tf,
                                   std::size_t tile) {
  check_gemm_shapes(weights, activations);
  const std::size_t R = weights.rows();
  const std::size_t C = weights.cols();
  const std::size_t B = activations.cols();
  const std::size_t blocks = tile_count(R, B, tile);
  if (tf.tile_index >= blocks) {
    throw InvalidArgument("tile index " + std::to_string(tf.tile_index) + " out of range (" +
                          std::to_string(blocks) + " tiles)");
  }

  Matrix<std::int32_t> out = stationed_gemm(weights, activations, m,
                                            StationPlan(R, C, FaultMap(1), InjectMode::propagate));

  const std::size_t blocks_per_row = (B + tile - 1) / tile;
  const std::size_t r0 = (tf.tile_index / blocks_per_row) * tile;
  const std::size_t b0 = (tf.tile_index % blocks_per_row) * tile;
  for (std::size_t pos : damaged_tile_positions(tf, tile)) {
    const std::size_t r = r0 + pos / tile;
    const std::size_t b = b0 + pos % tile;
    if (r >= R || b >= B) continue;
    std::int32_t acc = 0;
    for (std::size_t c = 0; c < C; ++c) {
      acc += apply_fault(m.multiply(activations(c, b), weights(r, c)), tf.fault);
    }
    out(r, b) = acc;
  }
  return out;
}

std::vector<std::pair<std::size_t, std::size_t>> map_pruned_indices(const FaultMap& fm,
                                                                     std::size_t rows,
                                                                     std::size_t cols) {
  const std::size_t n = fm.n();
  std::vector<std::pair<std::size_t, std::size_t>> out;
  // Enumerate the replicas of each faulty MAC across the tiling.
  for (const auto& e : fm.entries()) {
    for (std::size_t r = e.row; r < rows; r += n) {
      for (std::size_t c = e.col; c < cols; c += n) out.emplace_back(r, c);
    }
  }
  std::sort(out.begin(), out.end());
  return out;
}

}  // namespace axfault
