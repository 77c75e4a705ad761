#pragma once

// Fault-injection sweeps: the Cartesian product of the configured axes, one
// record per cell, plus energy accounting and report generation.

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "axfault/dataset.hpp"
#include "axfault/faultsim.hpp"
#include "axfault/network.hpp"
#include "axfault/train.hpp"

namespace axfault {

// multiplier id -> picojoules per multiply-accumulate
struct EnergyTable {
  std::map<std::string, double> pj_per_mac;
  std::string note;

  double at(const std::string& multiplier_id) const;
};

// {"note": "...", "pj_per_mac": {"exact": 1.0, ...}}
EnergyTable parse_energy_table(std::string_view json_text);
EnergyTable load_energy_table(const std::filesystem::path& path);

// Multiply-accumulates in the GEMMs of one forward pass: dense in*out, conv
// kh*kw*cin*cout*Hout*Wout.
std::uint64_t mac_count(const ModelSpec& model);
std::uint64_t mac_count(const ModelSpec& model, std::size_t layer);
// Joules per inference.
double energy_estimate(const ModelSpec& model, const std::string& multiplier_id,
                       const EnergyTable& table);

enum class EngineKind { systolic, gpu_tiles };

std::string to_string(EngineKind e);
EngineKind parse_engine_kind(std::string_view text);

struct MitigationSpec {
  HyperParams hp;
  double acc_thresh = 100.0;
  std::string acts = "uniform";
};

struct CampaignSpec {
  std::string model = "mp-tanh-desk";  // zoo name or model file
  // Directory with IDX files, or "synth:<classes>:<n>:<dim>:<seed>".
  std::string dataset;
  std::optional<std::string> weights;  // trained with `train` when absent
  HyperParams train;

  std::vector<std::string> multipliers{"exact"};
  std::vector<StuckAt> fault_kinds{StuckAt::sa1};
  std::vector<int> bits{15};
  std::vector<double> percents{16.0};
  std::vector<std::optional<std::size_t>> layers{std::nullopt};  // nullopt = all
  std::vector<std::size_t> array_sizes{64};
  std::vector<EngineKind> engines{EngineKind::systolic};
  std::vector<std::uint64_t> seeds{1};
  InjectMode inject_mode = InjectMode::propagate;
  std::optional<MitigationSpec> mitigation;
  std::optional<std::size_t> sample_limit = 2000;

  std::uint64_t master_seed = 0;
  std::optional<std::string> energy_table;
  bool record_timing = false;
  std::filesystem::path base_dir;  // relative asset paths resolve against this

  std::size_t cell_count() const;
  void validate() const;
};

// Relative paths inside the document are resolved against base_dir.
CampaignSpec parse_campaign_spec(std::string_view json_text,
                                 const std::filesystem::path& base_dir = {});
CampaignSpec load_campaign_spec(const std::filesystem::path& path);

struct CampaignRecord {
  std::string model;
  std::string dataset;
  std::string engine;
  std::string multiplier;
  double mae_percent = 0.0;
  std::string fault_kind;
  int bit = 0;
  double percent_faulty = 0.0;
  std::string layer;  // "all" or a GEMM-layer index
  std::size_t array_size = 0;
  std::uint64_t seed = 0;
  double baseline_acc = 0.0;
  double faulty_acc = 0.0;
  double acc_loss = 0.0;
  std::optional<double> mitigated_acc;
  std::optional<double> energy_pj;  // per inference
  double wall_time_ms = 0.0;
  std::string error;  // empty on success

  bool failed() const { return !error.empty(); }
};

// Seed that picks the faulty MACs of a cell. Depends only on the master seed,
// array size, percent and replicate seed, so multipliers, fault kinds, bits
// and layers of the same replicate share one placement.
std::uint64_t cell_seed(std::uint64_t master_seed, std::string_view engine, std::size_t array_size,
                        double percent, std::uint64_t seed);

struct CampaignAssets {
  ModelSpec model;
  WeightSet weights;
  DatasetPair data;
  std::optional<EnergyTable> energy;
};

CampaignAssets load_assets(const CampaignSpec& spec);

struct RunOptions {
  std::size_t workers = 1;
};

// Records come back in canonical order (engine, multiplier, fault kind, bit,
// percent, layer, array size, seed; each axis in spec order) whatever the
// worker count. A failing cell is recorded with its error and the sweep
// continues.
std::vector<CampaignRecord> run_campaign(const CampaignSpec& spec, const CampaignAssets& assets,
                                         const RunOptions& opts = {});
std::vector<CampaignRecord> run_campaign(const CampaignSpec& spec, const RunOptions& opts = {});

inline constexpr std::string_view kResultsHeader =
    "model,dataset,engine,multiplier,mae_percent,fault_kind,bit,percent_faulty,layer,array_size,"
    "seed,baseline_acc,faulty_acc,acc_loss,mitigated_acc,energy_pj,wall_time_ms";

std::string results_csv(const std::vector<CampaignRecord>& records);
std::vector<CampaignRecord> parse_results_csv(std::string_view text);
std::vector<CampaignRecord> load_results_csv(const std::filesystem::path& path);

// Axes whose values differ across the records, in column order.
std::vector<std::string> swept_axes(const std::vector<CampaignRecord>& records);

struct RankEntry {
  std::string multiplier;
  double value = 0.0;
};

// Mean faulty accuracy per multiplier, best first.
std::vector<RankEntry> accuracy_ranking(const std::vector<CampaignRecord>& records);
// Mean energy per inference per multiplier, cheapest first; multipliers
// without an energy figure are left out.
std::vector<RankEntry> energy_ranking(const std::vector<CampaignRecord>& records);

std::string summary_markdown(const std::vector<CampaignRecord>& records);
std::string axis_chart_svg(const std::vector<CampaignRecord>& records, std::string_view axis);

// Writes results.csv, summary.md and accuracy_<axis>.svg for each swept
// axis. Returns the files written.
std::vector<std::filesystem::path> emit_report(const std::vector<CampaignRecord>& records,
                                               const std::filesystem::path& out_dir);

}  // namespace axfault
