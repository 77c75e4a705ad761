#pragma once

// Fal-reTune: prune the weights stationed on faulty MACs, retrain with them
// pinned to zero, retune the surviving codes through the multiplier's weight
// map, then run approximate inference with the faulty MACs bypassed.

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "axfault/axmul.hpp"
#include "axfault/dataset.hpp"
#include "axfault/faultsim.hpp"
#include "axfault/network.hpp"
#include "axfault/train.hpp"

namespace axfault {

enum class ActivationSource { uniform, empirical };

std::string to_string(ActivationSource s);
ActivationSource parse_activation_source(std::string_view text);

struct FalRetuneConfig {
  SystolicConfig array;  // the final evaluation always runs in bypass mode
  HyperParams hp;
  // Retraining stops early once float test accuracy reaches this.
  double acc_thresh = 100.0;
  ActivationSource acts = ActivationSource::uniform;
  // Restrict faults (and pruning) to one GEMM layer.
  std::optional<std::size_t> layer_filter;
  EvalOptions eval;
  std::optional<std::filesystem::path> map_cache_dir;
};

struct FaultMapSummary {
  std::size_t n = 0;
  std::size_t faulty_macs = 0;
  double percent = 0.0;
  std::string faults;  // e.g. "sa1@15", comma-joined when mixed, "none" when empty
};

FaultMapSummary summarize(const FaultMap& fm);

struct MitigationReport {
  std::string model;
  std::string multiplier_id;
  std::string activation_set_id;
  double baseline_acc = 0.0;
  double faulty_acc_before = 0.0;
  double acc_after = 0.0;
  std::vector<std::size_t> pruned_count;  // per GEMM layer
  std::size_t epochs_used = 0;
  double acc_thresh = 0.0;
  bool below_threshold = false;
  FaultMapSummary fault_map;
};

struct MitigationResult {
  MitigationReport report;
  WeightSet retrained;  // float weights after masked retraining
  WeightSet retuned;    // retuned codes dequantised with the layer scale
  std::vector<EpochStats> log;
};

// Per GEMM layer, the weights stationed on faulty MACs. Layers outside the
// filter get an all-false mask.
PruneMask prune_mask(const ModelSpec& model, const FaultMap& fm,
                     std::optional<std::size_t> layer_filter = std::nullopt);

// Quantises every GEMM weight tensor, maps the unmasked codes, pins masked
// codes to zero and dequantises with the original scale.
WeightSet retune_weights(const ModelSpec& model, const WeightSet& weights,
                         const WeightMapTable& map, const PruneMask& mask);

// Histogram of the quantised GEMM-input codes of every layer over a
// fault-free exact pass.
ActivationSample harvest_activations(const ModelSpec& model, const WeightSet& weights,
                                     const Dataset& data, std::optional<std::size_t> limit = {});

MitigationResult fal_retune(const ModelSpec& model, const WeightSet& pretrained,
                            const FaultMap& fm, const AxMultiplier& m, const Dataset& train_data,
                            const Dataset& test_data, const FalRetuneConfig& cfg);

struct PrecomputedMaps {
  std::map<std::string, WeightMapTable> tables;  // keyed by multiplier id
  std::size_t computed = 0;
  std::size_t loaded = 0;
};

// One weight map per multiplier. With a cache directory, tables are read
// from / written to "<id>__<acts>.axwm" files there.
PrecomputedMaps precompute_maps(std::span<const AxMultiplier> multipliers,
                                const ActivationSample& acts,
                                const std::optional<std::filesystem::path>& cache_dir = {});

std::string report_to_json(const MitigationReport& r);
void save_report(const MitigationReport& r, const std::filesystem::path& path);

}  // namespace axfault
