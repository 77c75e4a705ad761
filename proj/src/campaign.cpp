#include "axfault/campaign.hpp"

#include <fmt/format.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <map>
#include <mutex>

#include "axfault/error.hpp"
#include "axfault/mitigate.hpp"
#include "axfault/parallel.hpp"
#include "axfault/rng.hpp"
#include "binary_io.hpp"
#include "json.hpp"

namespace axfault {

using nlohmann::json;

double EnergyTable::at(const std::string& multiplier_id) const {
  const auto it = pj_per_mac.find(multiplier_id);
  if (it == pj_per_mac.end()) {
    throw NotFound(fmt::format("no energy entry for multiplier '{}'", multiplier_id));
  }
  return it->second;
}

EnergyTable parse_energy_table(std::string_view json_text) {
  json doc;
  try {
    doc = json::parse(json_text);
  } catch (const json::exception& e) {
    throw FormatError(fmt::format("energy table: {}", e.what()));
  }
  if (!doc.is_object() || !doc.contains("pj_per_mac") || !doc["pj_per_mac"].is_object()) {
    throw FormatError("energy table needs a \"pj_per_mac\" object");
  }
  EnergyTable t;
  if (doc.contains("note")) t.note = doc["note"].get<std::string>();
  for (const auto& [id, v] : doc["pj_per_mac"].items()) {
    if (!v.is_number()) throw FormatError(fmt::format("energy for '{}' is not a number", id));
    const double pj = v.get<double>();
    if (!(pj > 0.0) || !std::isfinite(pj)) {
      throw InvalidArgument(fmt::format("energy for '{}' must be positive", id));
    }
    t.pj_per_mac[id] = pj;
  }
  return t;
}

EnergyTable load_energy_table(const std::filesystem::path& path) {
  return parse_energy_table(detail::read_text(path));
}

std::uint64_t mac_count(const ModelSpec& model, std::size_t layer) {
  const auto shapes = model.output_shapes();
  const auto& spec = model.layers.at(layer);
  if (const auto* d = std::get_if<DenseLayer>(&spec.kind)) {
    return static_cast<std::uint64_t>(d->in) * d->out;
  }
  if (const auto* c = std::get_if<Conv2dLayer>(&spec.kind)) {
    const Shape& out = shapes[layer];  // {Hout, Wout, cout}
    return static_cast<std::uint64_t>(c->kh) * c->kw * c->cin * c->cout * out[0] * out[1];
  }
  return 0;
}

std::uint64_t mac_count(const ModelSpec& model) {
  std::uint64_t total = 0;
  for (std::size_t i = 0; i < model.layers.size(); ++i) total += mac_count(model, i);
  return total;
}

double energy_estimate(const ModelSpec& model, const std::string& multiplier_id,
                       const EnergyTable& table) {
  return static_cast<double>(mac_count(model)) * table.at(multiplier_id) * 1e-12;
}

std::string to_string(EngineKind e) { return e == EngineKind::systolic ? "systolic" : "gpu_tiles"; }

EngineKind parse_engine_kind(std::string_view text) {
  if (text == "systolic") return EngineKind::systolic;
  if (text == "gpu_tiles" || text == "gpu") return EngineKind::gpu_tiles;
  throw InvalidArgument(fmt::format("unknown engine '{}'", text));
}

std::size_t CampaignSpec::cell_count() const {
  return engines.size() * multipliers.size() * fault_kinds.size() * bits.size() *
         percents.size() * layers.size() * array_sizes.size() * seeds.size();
}

void CampaignSpec::validate() const {
  auto nonempty = [](bool ok, const char* axis) {
    if (!ok) throw InvalidArgument(fmt::format("campaign axis '{}' is empty", axis));
  };
  nonempty(!multipliers.empty(), "multipliers");
  nonempty(!fault_kinds.empty(), "fault_kinds");
  nonempty(!bits.empty(), "bits");
  nonempty(!percents.empty(), "percents");
  nonempty(!layers.empty(), "layers");
  nonempty(!array_sizes.empty(), "array_sizes");
  nonempty(!engines.empty(), "engines");
  nonempty(!seeds.empty(), "seeds");
  if (dataset.empty()) throw InvalidArgument("campaign needs a dataset");
  for (int b : bits) {
    if (b < 0 || b > 15) throw InvalidArgument(fmt::format("fault bit {} out of range 0..15", b));
  }
  for (double p : percents) {
    if (!(p >= 0.0 && p <= 100.0)) {
      throw InvalidArgument(fmt::format("percent {} out of range 0..100", p));
    }
  }
  for (auto n : array_sizes) {
    if (n == 0) throw InvalidArgument("array size must be positive");
  }
  if (sample_limit && *sample_limit == 0) throw InvalidArgument("sample_limit must be positive");
  train.validate();
  if (mitigation) {
    mitigation->hp.validate();
    (void)parse_activation_source(mitigation->acts);
  }
}

namespace {

template <class T>
std::vector<T> axis_list(const json& doc, const char* key, std::vector<T> fallback) {
  if (!doc.contains(key)) return fallback;
  const json& v = doc[key];
  if (!v.is_array()) return {v.get<T>()};
  return v.get<std::vector<T>>();
}

HyperParams parse_hp(const json& j, HyperParams hp) {
  if (j.contains("lr")) hp.lr = j["lr"].get<double>();
  if (j.contains("momentum")) hp.momentum = j["momentum"].get<double>();
  if (j.contains("epochs")) hp.epochs = j["epochs"].get<std::size_t>();
  if (j.contains("batch_size")) hp.batch_size = j["batch_size"].get<std::size_t>();
  if (j.contains("seed")) hp.seed = j["seed"].get<std::uint64_t>();
  return hp;
}

std::filesystem::path resolve(const std::filesystem::path& base, const std::string& p) {
  const std::filesystem::path path(p);
  if (path.is_absolute() || base.empty()) return path;
  return base / path;
}

std::string format_percent(double p) { return fmt::format("{:g}", p); }

}  // namespace

CampaignSpec parse_campaign_spec(std::string_view json_text, const std::filesystem::path& base_dir) {
  json doc;
  try {
    doc = json::parse(json_text);
  } catch (const json::exception& e) {
    throw FormatError(fmt::format("campaign spec: {}", e.what()));
  }
  if (!doc.is_object()) throw FormatError("campaign spec must be an object");
  CampaignSpec s;
  s.base_dir = base_dir;
  try {
    if (doc.contains("model")) s.model = doc["model"].get<std::string>();
    if (doc.contains("dataset")) s.dataset = doc["dataset"].get<std::string>();
    if (doc.contains("weights")) s.weights = doc["weights"].get<std::string>();
    if (doc.contains("train")) s.train = parse_hp(doc["train"], s.train);
    s.multipliers = axis_list<std::string>(doc, "multipliers", s.multipliers);
    if (doc.contains("fault_kinds")) {
      s.fault_kinds.clear();
      for (const auto& k : axis_list<std::string>(doc, "fault_kinds", {})) {
        s.fault_kinds.push_back(parse_stuck_at(k));
      }
    }
    s.bits = axis_list<int>(doc, "bits", s.bits);
    s.percents = axis_list<double>(doc, "percents", s.percents);
    if (doc.contains("layers")) {
      const json& l = doc["layers"];
      s.layers.clear();
      if (l.is_string()) {
        if (l.get<std::string>() != "all") throw FormatError("layers must be \"all\" or a list");
        s.layers.push_back(std::nullopt);
      } else {
        for (const auto& v : l) {
          if (v.is_null() || (v.is_string() && v.get<std::string>() == "all")) {
            s.layers.push_back(std::nullopt);
          } else {
            s.layers.push_back(v.get<std::size_t>());
          }
        }
      }
    }
    s.array_sizes = axis_list<std::size_t>(doc, "array_sizes", s.array_sizes);
    if (doc.contains("engines")) {
      s.engines.clear();
      for (const auto& e : axis_list<std::string>(doc, "engines", {})) {
        s.engines.push_back(parse_engine_kind(e));
      }
    }
    s.seeds = axis_list<std::uint64_t>(doc, "seeds", s.seeds);
    if (doc.contains("inject_mode")) {
      s.inject_mode = parse_inject_mode(doc["inject_mode"].get<std::string>());
    }
    if (doc.contains("mitigation") && !doc["mitigation"].is_null()) {
      const json& m = doc["mitigation"];
      if (m.is_string()) {
        if (m.get<std::string>() != "off") {
          throw FormatError("mitigation must be \"off\" or an object");
        }
      } else {
        MitigationSpec ms;
        ms.hp.epochs = 5;
        ms.hp = parse_hp(m, ms.hp);
        if (m.contains("acc_thresh")) ms.acc_thresh = m["acc_thresh"].get<double>();
        if (m.contains("acts")) ms.acts = m["acts"].get<std::string>();
        s.mitigation = ms;
      }
    }
    if (doc.contains("sample_limit")) {
      if (doc["sample_limit"].is_null()) {
        s.sample_limit.reset();
      } else {
        s.sample_limit = doc["sample_limit"].get<std::size_t>();
      }
    }
    if (doc.contains("master_seed")) s.master_seed = doc["master_seed"].get<std::uint64_t>();
    if (doc.contains("energy_table")) s.energy_table = doc["energy_table"].get<std::string>();
    if (doc.contains("record_timing")) s.record_timing = doc["record_timing"].get<bool>();
  } catch (const json::exception& e) {
    throw FormatError(fmt::format("campaign spec: {}", e.what()));
  }
  s.validate();
  return s;
}

CampaignSpec load_campaign_spec(const std::filesystem::path& path) {
  return parse_campaign_spec(detail::read_text(path), path.parent_path());
}

std::uint64_t cell_seed(std::uint64_t master_seed, std::string_view engine, std::size_t array_size,
                        double percent, std::uint64_t seed) {
  const std::string key =
      fmt::format("engine={};n={};percent={};seed={}", engine, array_size, format_percent(percent), seed);
  return hash_seed(master_seed, key);
}

CampaignAssets load_assets(const CampaignSpec& spec) {
  spec.validate();
  CampaignAssets a;
  const auto zoo = zoo_names();
  if (std::find(zoo.begin(), zoo.end(), spec.model) != zoo.end()) {
    a.model = zoo_model(spec.model);
  } else {
    a.model = load_model(resolve(spec.base_dir, spec.model));
  }
  a.data = open_dataset(spec.dataset, spec.base_dir);
  if (spec.weights) {
    a.weights = load_weights(a.model, resolve(spec.base_dir, *spec.weights));
  } else {
    a.weights = train(a.model, a.data.train, spec.train).weights;
  }
  if (spec.energy_table) a.energy = load_energy_table(resolve(spec.base_dir, *spec.energy_table));
  return a;
}

namespace {

struct Cell {
  std::size_t engine, mul, kind, bit, pct, layer, size, seed;
};

AxMultiplier load_campaign_multiplier(const CampaignSpec& spec, const std::string& text) {
  if (text.rfind("lut:", 0) == 0) {
    return load_lut(resolve(spec.base_dir, text.substr(4)), text);
  }
  return parse_multiplier(text);
}

ExecEnv make_env(EngineKind engine, std::size_t n, InjectMode mode, const AxMultiplier& m) {
  ExecEnv env;
  env.multiplier = m;
  if (engine == EngineKind::systolic) {
    env.engine = SystolicEngine{SystolicConfig{n, mode}, FaultMap(n)};
  } else {
    env.engine = GpuTileEngine{n, std::nullopt};
  }
  return env;
}

}  // namespace

std::vector<CampaignRecord> run_campaign(const CampaignSpec& spec, const CampaignAssets& assets,
                                         const RunOptions& opts) {
  spec.validate();
  const std::size_t gemm_count = assets.model.gemm_layers().size();
  for (const auto& l : spec.layers) {
    if (l && *l >= gemm_count) {
      throw InvalidArgument(
          fmt::format("layer {} out of range ({} GEMM layers)", *l, gemm_count));
    }
  }

  std::vector<AxMultiplier> muls;
  std::vector<double> maes;
  for (const auto& text : spec.multipliers) {
    muls.push_back(load_campaign_multiplier(spec, text));
    maes.push_back(mae(muls.back()).mae_percent);
  }

  const Dataset test = spec.sample_limit ? assets.data.test.head(*spec.sample_limit)
                                         : assets.data.test;
  const EvalOptions eval{std::nullopt, 1};

  std::vector<Cell> cells;
  cells.reserve(spec.cell_count());
  for (std::size_t e = 0; e < spec.engines.size(); ++e)
    for (std::size_t m = 0; m < muls.size(); ++m)
      for (std::size_t k = 0; k < spec.fault_kinds.size(); ++k)
        for (std::size_t b = 0; b < spec.bits.size(); ++b)
          for (std::size_t p = 0; p < spec.percents.size(); ++p)
            for (std::size_t l = 0; l < spec.layers.size(); ++l)
              for (std::size_t n = 0; n < spec.array_sizes.size(); ++n)
                for (std::size_t s = 0; s < spec.seeds.size(); ++s)
                  cells.push_back({e, m, k, b, p, l, n, s});

  // Fault-free accuracy per (engine, multiplier, array size).
  std::map<std::tuple<std::size_t, std::size_t, std::size_t>, std::size_t> baseline_slot;
  std::vector<std::tuple<std::size_t, std::size_t, std::size_t>> baseline_keys;
  for (const auto& c : cells) {
    const auto key = std::make_tuple(c.engine, c.mul, c.size);
    if (baseline_slot.emplace(key, baseline_keys.size()).second) baseline_keys.push_back(key);
  }
  std::vector<double> baselines(baseline_keys.size(), 0.0);
  std::vector<std::string> baseline_errors(baseline_keys.size());
  parallel_for(baseline_keys.size(), opts.workers, [&](std::size_t i) {
    const auto [e, m, n] = baseline_keys[i];
    try {
      baselines[i] = evaluate(assets.model, assets.weights, test,
                              make_env(spec.engines[e], spec.array_sizes[n], spec.inject_mode,
                                       muls[m]),
                              eval);
    } catch (const Error& err) {
      baseline_errors[i] = fmt::format("{}: {}", err.category(), err.what());
    }
  });

  std::vector<CampaignRecord> records(cells.size());
  parallel_for(cells.size(), opts.workers, [&](std::size_t i) {
    const Cell& c = cells[i];
    const auto t0 = std::chrono::steady_clock::now();
    CampaignRecord& r = records[i];
    const EngineKind engine = spec.engines[c.engine];
    const std::size_t n = spec.array_sizes[c.size];
    const double pct = spec.percents[c.pct];
    const StuckAtFault fault{spec.bits[c.bit], spec.fault_kinds[c.kind]};
    const auto layer = spec.layers[c.layer];
    r.model = assets.model.name;
    r.dataset = assets.data.test.id;
    r.engine = to_string(engine);
    r.multiplier = muls[c.mul].id();
    r.mae_percent = maes[c.mul];
    r.fault_kind = to_string(fault.kind);
    r.bit = fault.bit;
    r.percent_faulty = pct;
    r.layer = layer ? std::to_string(*layer) : "all";
    r.array_size = n;
    r.seed = spec.seeds[c.seed];
    try {
      const std::size_t slot = baseline_slot.at({c.engine, c.mul, c.size});
      if (!baseline_errors[slot].empty()) throw Error(baseline_errors[slot]);
      r.baseline_acc = baselines[slot];
      const std::uint64_t seed = cell_seed(spec.master_seed, r.engine, n, pct, r.seed);
      ExecEnv env = make_env(engine, n, spec.inject_mode, muls[c.mul]);
      env.layer_filter = layer;
      FaultMap fm(n);
      if (engine == EngineKind::systolic) {
        fm = random_fault_map(n, pct, fault, seed);
        std::get<SystolicEngine>(env.engine).faults = fm;
      } else if (pct > 0.0) {
        std::get<GpuTileEngine>(env.engine).fault = TileFaultSpec{0, pct / 100.0, fault, seed};
      }
      r.faulty_acc = evaluate(assets.model, assets.weights, test, env, eval);
      r.acc_loss = r.baseline_acc - r.faulty_acc;
      if (spec.mitigation && engine == EngineKind::systolic) {
        FalRetuneConfig cfg;
        cfg.array = SystolicConfig{n, spec.inject_mode};
        cfg.hp = spec.mitigation->hp;
        cfg.acc_thresh = spec.mitigation->acc_thresh;
        cfg.acts = parse_activation_source(spec.mitigation->acts);
        cfg.layer_filter = layer;
        cfg.eval = eval;
        r.mitigated_acc =
            fal_retune(assets.model, assets.weights, fm, muls[c.mul], assets.data.train, test, cfg)
                .report.acc_after;
      }
      if (assets.energy && assets.energy->pj_per_mac.count(r.multiplier)) {
        r.energy_pj = static_cast<double>(mac_count(assets.model)) *
                      assets.energy->pj_per_mac.at(r.multiplier);
      }
    } catch (const Error& err) {
      r.error = std::string_view(err.category()) == "error"
                    ? std::string(err.what())
                    : fmt::format("{}: {}", err.category(), err.what());
    } catch (const std::exception& err) {
      r.error = err.what();
    }
    if (spec.record_timing) {
      r.wall_time_ms =
          std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
    }
  });
  return records;
}

std::vector<CampaignRecord> run_campaign(const CampaignSpec& spec, const RunOptions& opts) {
  return run_campaign(spec, load_assets(spec), opts);
}

}  // namespace axfault
