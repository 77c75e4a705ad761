#include "axfault/mitigate.hpp"

#include <fmt/format.h>

#include <cmath>
#include <set>

#include "axfault/error.hpp"
#include "axfault/quant.hpp"
#include "binary_io.hpp"
#include "json.hpp"

namespace axfault {

std::string to_string(ActivationSource s) {
  return s == ActivationSource::uniform ? "uniform" : "empirical";
}

ActivationSource parse_activation_source(std::string_view text) {
  if (text == "uniform" || text == "uniform-full") return ActivationSource::uniform;
  if (text == "empirical") return ActivationSource::empirical;
  throw InvalidArgument(fmt::format("unknown activation source '{}'", text));
}

FaultMapSummary summarize(const FaultMap& fm) {
  FaultMapSummary s;
  s.n = fm.n();
  s.faulty_macs = fm.size();
  s.percent = 100.0 * static_cast<double>(fm.size()) / static_cast<double>(fm.n() * fm.n());
  std::set<std::pair<int, int>> kinds;  // (bit, kind)
  for (const auto& e : fm.entries()) kinds.insert({e.fault.bit, static_cast<int>(e.fault.kind)});
  if (kinds.empty()) {
    s.faults = "none";
  } else {
    for (const auto& [bit, kind] : kinds) {
      if (!s.faults.empty()) s.faults += ",";
      s.faults += fmt::format("{}@{}", to_string(static_cast<StuckAt>(kind)), bit);
    }
  }
  return s;
}

PruneMask prune_mask(const ModelSpec& model, const FaultMap& fm,
                     std::optional<std::size_t> layer_filter) {
  PruneMask mask = PruneMask::empty(model);
  const auto gemm = model.gemm_layers();
  if (layer_filter && *layer_filter >= gemm.size()) {
    throw InvalidArgument(fmt::format("layer {} out of range ({} GEMM layers)", *layer_filter,
                                      gemm.size()));
  }
  for (std::size_t g = 0; g < gemm.size(); ++g) {
    if (layer_filter && *layer_filter != g) continue;
    const Shape ws = model.weight_shape(gemm[g]);
    const std::size_t rows = ws[0];
    const std::size_t cols = shape_size(ws) / rows;
    auto& m = mask.layers[gemm[g]];
    for (const auto& [r, c] : map_pruned_indices(fm, rows, cols)) m[r * cols + c] = 1;
  }
  return mask;
}

WeightSet retune_weights(const ModelSpec& model, const WeightSet& weights,
                         const WeightMapTable& map, const PruneMask& mask) {
  weights.check(model);
  WeightSet out = weights;
  for (std::size_t i : model.gemm_layers()) {
    auto& w = out.layers[i].weight;
    const QTensor q = quantize(w);
    const auto& m = mask.layers.at(i);
    if (m.size() != q.data.size()) throw ShapeError("prune mask layer size mismatch");
    for (std::size_t k = 0; k < q.data.size(); ++k) {
      const std::int8_t code = m[k] ? std::int8_t{0} : map.apply(q.data[k]);
      w.data[k] = static_cast<double>(code) * q.scale;
    }
  }
  return out;
}

ActivationSample harvest_activations(const ModelSpec& model, const WeightSet& weights,
                                     const Dataset& data, std::optional<std::size_t> limit) {
  ExecEnv env;
  env.engine = SystolicEngine{SystolicConfig{}, FaultMap(SystolicConfig{}.n)};
  const CompiledModel compiled(model, weights, env);
  ActivationSample sample;
  sample.id = fmt::format("empirical:{}:all", model.name);
  const std::size_t count = limit ? std::min(*limit, data.size()) : data.size();
  if (count == 0) throw InvalidArgument("no samples to harvest activations from");
  const CodeObserver observer = [&](std::size_t, std::span<const std::int8_t> codes) {
    for (auto c : codes) sample.add(c);
  };
  for (std::size_t i = 0; i < count; ++i) compiled.run(data.image(i), observer);
  return sample;
}

namespace {

std::string cache_name(const std::string& multiplier_id, const std::string& acts_id) {
  std::string name = multiplier_id + "__" + acts_id;
  for (auto& ch : name) {
    const bool ok = (ch >= 'a' && ch <= 'z') || (ch >= 'A' && ch <= 'Z') ||
                    (ch >= '0' && ch <= '9') || ch == '-' || ch == '_' || ch == '.';
    if (!ok) ch = '_';
  }
  return name + ".axwm";
}

double eval_systolic(const ModelSpec& model, const WeightSet& weights, const AxMultiplier& m,
                     const FaultMap& fm, InjectMode mode, const FalRetuneConfig& cfg,
                     const std::optional<WeightMapTable>& map,
                     const std::optional<PruneMask>& pinned, const Dataset& test) {
  ExecEnv env;
  env.engine = SystolicEngine{SystolicConfig{cfg.array.n, mode}, fm};
  env.multiplier = m;
  env.layer_filter = cfg.layer_filter;
  env.weight_map = map;
  env.pinned_zero = pinned;
  return evaluate(model, weights, test, env, cfg.eval);
}

}  // namespace

PrecomputedMaps precompute_maps(std::span<const AxMultiplier> multipliers,
                                const ActivationSample& acts,
                                const std::optional<std::filesystem::path>& cache_dir) {
  PrecomputedMaps out;
  for (const auto& m : multipliers) {
    if (out.tables.count(m.id())) continue;
    std::optional<std::filesystem::path> file;
    if (cache_dir) file = *cache_dir / cache_name(m.id(), acts.id);
    if (file && std::filesystem::exists(*file)) {
      out.tables.emplace(m.id(), load_weight_map(*file, m.id(), acts.id));
      ++out.loaded;
      continue;
    }
    WeightMapTable table = build_weight_map(m, acts);
    if (file) save_weight_map(table, *file);
    out.tables.emplace(m.id(), std::move(table));
    ++out.computed;
  }
  return out;
}

MitigationResult fal_retune(const ModelSpec& model, const WeightSet& pretrained,
                            const FaultMap& fm, const AxMultiplier& m, const Dataset& train_data,
                            const Dataset& test_data, const FalRetuneConfig& cfg) {
  pretrained.check(model);
  if (fm.n() != cfg.array.n) {
    throw InvalidArgument(
        fmt::format("fault map is {0}x{0} but the array is {1}x{1}", fm.n(), cfg.array.n));
  }
  if (!(cfg.acc_thresh >= 0.0 && cfg.acc_thresh <= 100.0)) {
    throw InvalidArgument("acc_thresh must be in [0, 100]");
  }

  MitigationResult result;
  MitigationReport& rep = result.report;
  rep.model = model.name;
  rep.multiplier_id = m.id();
  rep.acc_thresh = cfg.acc_thresh;
  rep.fault_map = summarize(fm);

  const FaultMap no_faults(cfg.array.n);
  rep.baseline_acc = eval_systolic(model, pretrained, m, no_faults, InjectMode::propagate, cfg,
                                   std::nullopt, std::nullopt, test_data);
  rep.faulty_acc_before = eval_systolic(model, pretrained, m, fm, cfg.array.mode, cfg,
                                        std::nullopt, std::nullopt, test_data);

  const PruneMask mask = prune_mask(model, fm, cfg.layer_filter);
  for (std::size_t i : model.gemm_layers()) rep.pruned_count.push_back(mask.count(i));

  TrainOptions opts;
  opts.test = &test_data;
  opts.on_epoch = [&](const EpochStats& s, const WeightSet&) {
    return s.test_acc && *s.test_acc >= cfg.acc_thresh;
  };
  TrainResult tr = retrain_masked(model, pretrained, mask, train_data, cfg.hp, opts);
  rep.epochs_used = tr.log.size();
  result.log = std::move(tr.log);
  result.retrained = std::move(tr.weights);

  const ActivationSample acts = cfg.acts == ActivationSource::uniform
                                    ? ActivationSample::uniform_full()
                                    : harvest_activations(model, result.retrained, train_data);
  const AxMultiplier one[] = {m};
  WeightMapTable map = precompute_maps(one, acts, cfg.map_cache_dir).tables.at(m.id());
  rep.activation_set_id = acts.id;

  rep.acc_after = eval_systolic(model, result.retrained, m, fm, InjectMode::bypass, cfg, map,
                                mask, test_data);
  rep.below_threshold = rep.acc_after < cfg.acc_thresh;
  result.retuned = retune_weights(model, result.retrained, map, mask);
  return result;
}

std::string report_to_json(const MitigationReport& r) {
  nlohmann::ordered_json j;
  j["model"] = r.model;
  j["multiplier"] = r.multiplier_id;
  j["activation_set"] = r.activation_set_id;
  j["baseline_acc"] = r.baseline_acc;
  j["faulty_acc_before"] = r.faulty_acc_before;
  j["acc_after"] = r.acc_after;
  j["acc_loss_before"] = r.baseline_acc - r.faulty_acc_before;
  j["acc_loss_after"] = r.baseline_acc - r.acc_after;
  j["pruned_count"] = r.pruned_count;
  j["epochs_used"] = r.epochs_used;
  j["acc_thresh"] = r.acc_thresh;
  j["below_threshold"] = r.below_threshold;
  j["fault_map"] = {{"n", r.fault_map.n},
                    {"faulty_macs", r.fault_map.faulty_macs},
                    {"percent", r.fault_map.percent},
                    {"faults", r.fault_map.faults}};
  return j.dump(2) + "\n";
}

void save_report(const MitigationReport& r, const std::filesystem::path& path) {
  detail::write_text(path, report_to_json(r));
}

}  // namespace axfault
