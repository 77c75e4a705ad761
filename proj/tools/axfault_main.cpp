// axfault: command-line front end.

#include <fmt/format.h>

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include "CLI11.hpp"
#include "axfault/axmul.hpp"
#include "axfault/campaign.hpp"
#include "axfault/dataset.hpp"
#include "axfault/error.hpp"
#include "axfault/faultsim.hpp"
#include "axfault/mitigate.hpp"
#include "axfault/network.hpp"
#include "axfault/train.hpp"

namespace {

using namespace axfault;

// Flags shared by the commands that run a trained model.
struct ModelArgs {
  std::string model = "mp-tanh-desk";
  std::string weights;
  std::string data;
  std::optional<std::size_t> limit;
  std::size_t workers = 1;

  void add(CLI::App* app, bool need_weights = true) {
    app->add_option("--model", model, "zoo model name or model file")->capture_default_str();
    auto* w = app->add_option("--weights", weights, "weights file (.axw)");
    if (need_weights) w->required();
    app->add_option("--data", data, "dataset directory or synth:<classes>:<n>:<dim>:<seed>")
        ->required();
    app->add_option("--limit", limit, "evaluate on the first K test samples only");
    app->add_option("--workers", workers, "evaluation threads")->capture_default_str();
  }
};

// Flags describing one fault injection.
struct FaultArgs {
  std::string engine = "systolic";
  std::string multiplier = "exact";
  std::size_t array_size = 64;
  double percent = 16.0;
  int bit = 15;
  std::string kind = "sa1";
  std::string mode = "propagate";
  std::optional<std::size_t> layer;
  std::string fault_map_in;
  std::string fault_map_out;
  std::size_t tile_index = 0;

  void add(CLI::App* app, bool with_engine = true) {
    if (with_engine) {
      app->add_option("--engine", engine, "systolic or gpu_tiles")->capture_default_str();
      app->add_option("--tile-index", tile_index, "damaged output block (gpu_tiles)")
          ->capture_default_str();
      app->add_option("--mode", mode, "propagate or bypass (systolic)")->capture_default_str();
    }
    app->add_option("--multiplier", multiplier,
                    "exact, truncated:<k>, broken_carry:<k> or lut:<path>")
        ->capture_default_str();
    app->add_option("--array-size", array_size, "systolic array dimension (tile size on gpu_tiles)")
        ->capture_default_str();
    app->add_option("--percent", percent, "faulty MACs in percent (damaged tile share on gpu_tiles)")
        ->capture_default_str();
    app->add_option("--bit", bit, "faulty product bit, 0 = LSB")->capture_default_str();
    app->add_option("--kind", kind, "sa0 or sa1")->capture_default_str();
    app->add_option("--layer", layer, "inject into this GEMM layer only (0-based)");
    app->add_option("--fault-map", fault_map_in, "read the fault map from a file instead");
    app->add_option("--save-fault-map", fault_map_out, "write the fault map used");
  }

  StuckAtFault fault() const {
    StuckAtFault f{bit, parse_stuck_at(kind)};
    validate(f);
    return f;
  }

  FaultMap fault_map(std::uint64_t seed) const {
    FaultMap fm = fault_map_in.empty() ? random_fault_map(array_size, percent, fault(), seed)
                                       : load_fault_map(fault_map_in);
    if (!fault_map_out.empty()) save_fault_map(fm, fault_map_out);
    return fm;
  }
};

struct HpArgs {
  HyperParams hp;

  void add(CLI::App* app, std::size_t default_epochs) {
    hp.epochs = default_epochs;
    app->add_option("--epochs", hp.epochs, "training epochs")->capture_default_str();
    app->add_option("--lr", hp.lr, "learning rate")->capture_default_str();
    app->add_option("--momentum", hp.momentum, "SGD momentum")->capture_default_str();
    app->add_option("--batch-size", hp.batch_size, "mini-batch size")->capture_default_str();
  }
};

std::uint64_t g_seed = 1;

void print_kv(std::string_view key, double v) { fmt::print("{}: {:.4f}\n", key, v); }

ExecEnv base_env(const std::string& engine, std::size_t n, InjectMode mode, const AxMultiplier& m) {
  ExecEnv env;
  env.multiplier = m;
  const EngineKind kind = parse_engine_kind(engine);
  if (kind == EngineKind::systolic) {
    env.engine = SystolicEngine{SystolicConfig{n, mode}, FaultMap(n)};
  } else {
    env.engine = GpuTileEngine{n, std::nullopt};
  }
  return env;
}

int cmd_train(const ModelArgs& a, const HpArgs& h, const std::string& out, const std::string& log) {
  const ModelSpec model = resolve_model(a.model);
  const DatasetPair data = open_dataset(a.data);
  HyperParams hp = h.hp;
  hp.seed = g_seed;
  TrainOptions opts;
  opts.test = &data.test;
  opts.on_epoch = [](const EpochStats& s, const WeightSet&) {
    fmt::print("epoch {} loss {:.6f} train_acc {:.2f} test_acc {:.2f}\n", s.epoch, s.loss,
               s.train_acc, s.test_acc.value_or(0.0));
    std::fflush(stdout);
    return false;
  };
  const TrainResult r = train(model, data.train, hp, opts);
  save_weights(model, r.weights, out);
  if (!log.empty()) write_training_log(r.log, log);
  const double acc = evaluate(model, r.weights, data.test, ExecEnv{}, EvalOptions{a.limit, a.workers});
  print_kv("test_acc", acc);
  return 0;
}

int cmd_eval(const ModelArgs& a, const std::string& engine, const std::string& multiplier,
             std::size_t n, const std::string& weight_map) {
  const ModelSpec model = resolve_model(a.model);
  const WeightSet w = load_weights(model, a.weights);
  const DatasetPair data = open_dataset(a.data);
  ExecEnv env;
  if (engine != "float") {
    env = base_env(engine, n, InjectMode::propagate, parse_multiplier(multiplier));
    if (!weight_map.empty()) {
      env.weight_map = load_weight_map(weight_map, env.multiplier.id(), "file");
    }
  } else if (multiplier != "exact" || !weight_map.empty()) {
    throw InvalidArgument("the float engine does not use a multiplier or weight map");
  }
  fmt::print("engine: {}\n", engine_name(env.engine));
  fmt::print("multiplier: {}\n", env.multiplier.id());
  print_kv("accuracy", evaluate(model, w, data.test, env, EvalOptions{a.limit, a.workers}));
  return 0;
}

AxMultiplier family_multiplier(const std::string& family, int k, const std::string& lut,
                               const std::string& spec) {
  if (!spec.empty()) return parse_multiplier(spec);
  if (!lut.empty()) return load_lut(lut);
  if (family == "exact") return AxMultiplier::exact();
  if (family == "truncated") return build_truncated(k);
  if (family == "broken_carry") return build_broken_carry(k);
  throw InvalidArgument(fmt::format("unknown multiplier family '{}'", family));
}

int cmd_inject(const ModelArgs& a, const FaultArgs& f) {
  const ModelSpec model = resolve_model(a.model);
  const WeightSet w = load_weights(model, a.weights);
  const DatasetPair data = open_dataset(a.data);
  const AxMultiplier m = parse_multiplier(f.multiplier);
  const InjectMode mode = parse_inject_mode(f.mode);
  const EvalOptions eval{a.limit, a.workers};

  ExecEnv env = base_env(f.engine, f.array_size, mode, m);
  const double baseline = evaluate(model, w, data.test, env, eval);
  env.layer_filter = f.layer;
  if (auto* s = std::get_if<SystolicEngine>(&env.engine)) {
    s->faults = f.fault_map(g_seed);
    if (s->faults.n() != f.array_size) {
      throw InvalidArgument(fmt::format("fault map is {0}x{0} but the array is {1}x{1}",
                                        s->faults.n(), f.array_size));
    }
    fmt::print("faulty_macs: {}\n", s->faults.size());
  } else if (f.percent > 0.0) {
    std::get<GpuTileEngine>(env.engine).fault =
        TileFaultSpec{f.tile_index, f.percent / 100.0, f.fault(), g_seed};
  }
  const double faulty = evaluate(model, w, data.test, env, eval);
  fmt::print("engine: {}\nmultiplier: {}\n", engine_name(env.engine), m.id());
  print_kv("baseline_acc", baseline);
  print_kv("faulty_acc", faulty);
  print_kv("acc_loss", accuracy_loss(baseline, faulty));
  return 0;
}

int cmd_mitigate(const ModelArgs& a, const FaultArgs& f, const HpArgs& h, double acc_thresh,
                 const std::string& acts, const std::string& out_dir,
                 const std::string& cache_dir) {
  const ModelSpec model = resolve_model(a.model);
  const WeightSet w = load_weights(model, a.weights);
  const DatasetPair data = open_dataset(a.data);
  const AxMultiplier m = parse_multiplier(f.multiplier);
  FalRetuneConfig cfg;
  cfg.array = SystolicConfig{f.array_size, InjectMode::propagate};
  cfg.hp = h.hp;
  cfg.hp.seed = g_seed;
  cfg.acc_thresh = acc_thresh;
  cfg.acts = parse_activation_source(acts);
  cfg.layer_filter = f.layer;
  cfg.eval = EvalOptions{a.limit, a.workers};
  if (!cache_dir.empty()) cfg.map_cache_dir = cache_dir;
  const FaultMap fm = f.fault_map(g_seed);
  const Dataset test = a.limit ? data.test.head(*a.limit) : data.test;
  const MitigationResult r = fal_retune(model, w, fm, m, data.train, test, cfg);
  const std::filesystem::path dir(out_dir);
  save_report(r.report, dir / "report.json");
  save_weights(model, r.retuned, dir / "retuned.axw");
  write_training_log(r.log, dir / "retrain_log.csv");
  std::cout << report_to_json(r.report);
  return 0;
}

int cmd_mul_info(const AxMultiplier& m) {
  const ErrorMetrics e = mae(m);
  fmt::print("id: {}\nkind: {}\nmae_percent: {:.12g}\nworst_case_abs: {}\nerror_count: {}\n", m.id(),
             to_string(m.kind()), e.mae_percent, e.worst_case_abs, e.error_count);
  return 0;
}

int cmd_mul_map(const AxMultiplier& m, const std::string& out, const std::string& acts,
                const ModelArgs& a) {
  ActivationSample sample = ActivationSample::uniform_full();
  if (parse_activation_source(acts) == ActivationSource::empirical) {
    if (a.weights.empty() || a.data.empty()) {
      throw InvalidArgument("empirical activations need --weights and --data");
    }
    const ModelSpec model = resolve_model(a.model);
    const DatasetPair data = open_dataset(a.data);
    sample = harvest_activations(model, load_weights(model, a.weights), data.train, a.limit);
  }
  const WeightMapTable t = build_weight_map(m, sample);
  save_weight_map(t, out);
  std::size_t changed = 0;
  for (int w = -128; w <= 127; ++w) changed += t.apply(static_cast<std::int8_t>(w)) != w;
  fmt::print("multiplier: {}\nactivation_set: {}\nchanged_codes: {}\n", t.multiplier_id,
             t.activation_set_id, changed);
  return 0;
}

int cmd_campaign_run(const std::string& spec_path, const std::string& out_dir, std::size_t workers,
                     bool with_report) {
  CampaignSpec spec = load_campaign_spec(spec_path);
  spec.master_seed = g_seed;
  const auto records = run_campaign(spec, RunOptions{workers});
  const std::filesystem::path dir(out_dir);
  if (with_report) {
    emit_report(records, dir);
  } else {
    std::filesystem::create_directories(dir);
    std::ofstream(dir / "results.csv", std::ios::binary) << results_csv(records);
  }
  std::size_t failed = 0;
  for (const auto& r : records) failed += r.failed();
  fmt::print("records: {}\nfailed: {}\nresults: {}\n", records.size(), failed,
             (dir / "results.csv").string());
  return 0;
}

int cmd_campaign_report(const std::string& results, const std::string& out_dir) {
  const auto records = load_results_csv(results);
  for (const auto& p : emit_report(records, out_dir)) fmt::print("{}\n", p.string());
  return 0;
}

std::string one_line(std::string s) {
  for (auto& c : s) {
    if (c == '\n' || c == '\r') c = ' ';
  }
  while (!s.empty() && s.back() == ' ') s.pop_back();
  return s;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Stuck-at fault simulation for quantised DNNs on approximate-multiplier accelerators",
               "axfault"};
  app.require_subcommand(1);
  app.set_version_flag("--version", "axfault 0.1.0");
  std::uint64_t seed = 1;
  app.add_option("--seed", seed, "seed for all randomness (env AXFAULT_SEED)")
      ->envname("AXFAULT_SEED")
      ->capture_default_str();
  app.fallthrough();

  std::function<int()> action;

  // train
  ModelArgs train_args;
  HpArgs train_hp;
  std::string train_out, train_log;
  auto* train_cmd = app.add_subcommand("train", "train a model in float");
  train_args.add(train_cmd, false);
  train_hp.add(train_cmd, 15);
  train_cmd->add_option("--out", train_out, "weights file to write")->required();
  train_cmd->add_option("--log", train_log, "training log CSV");
  train_cmd->callback([&] { action = [&] { return cmd_train(train_args, train_hp, train_out, train_log); }; });

  // eval
  ModelArgs eval_args;
  std::string eval_engine = "float", eval_mul = "exact", eval_map;
  std::size_t eval_n = 64;
  auto* eval_cmd = app.add_subcommand("eval", "fault-free test accuracy");
  eval_args.add(eval_cmd);
  eval_cmd->add_option("--engine", eval_engine, "float, systolic or gpu_tiles")->capture_default_str();
  eval_cmd->add_option("--multiplier", eval_mul, "multiplier for quantised engines")->capture_default_str();
  eval_cmd->add_option("--array-size", eval_n, "array or tile dimension")->capture_default_str();
  eval_cmd->add_option("--weight-map", eval_map, "retune weights through this map file");
  eval_cmd->callback([&] {
    action = [&] { return cmd_eval(eval_args, eval_engine, eval_mul, eval_n, eval_map); };
  });

  // mul
  auto* mul_cmd = app.add_subcommand("mul", "approximate multipliers");
  mul_cmd->require_subcommand(1);
  std::string mul_family = "exact", mul_lut, mul_spec, mul_out, mul_acts = "uniform";
  int mul_k = 0;
  ModelArgs mul_model;
  auto add_family = [&](CLI::App* c) {
    c->add_option("--family", mul_family, "exact, truncated or broken_carry")->capture_default_str();
    c->add_option("--k", mul_k, "family parameter")->capture_default_str();
    c->add_option("--lut", mul_lut, "LUT file instead of a family");
    c->add_option("--multiplier", mul_spec, "multiplier spec, e.g. truncated:4");
  };
  auto* info_cmd = mul_cmd->add_subcommand("info", "exhaustive error metrics");
  add_family(info_cmd);
  info_cmd->callback([&] {
    action = [&] { return cmd_mul_info(family_multiplier(mul_family, mul_k, mul_lut, mul_spec)); };
  });
  auto* lut_cmd = mul_cmd->add_subcommand("gen-lut", "write a 131072-byte LUT file");
  add_family(lut_cmd);
  lut_cmd->add_option("--out", mul_out, "LUT file to write")->required();
  lut_cmd->callback([&] {
    action = [&] {
      const auto m = family_multiplier(mul_family, mul_k, mul_lut, mul_spec);
      save_lut(m, mul_out);
      fmt::print("id: {}\nwrote: {}\n", m.id(), mul_out);
      return 0;
    };
  });
  auto* map_cmd = mul_cmd->add_subcommand("map", "weight-retuning map for a multiplier");
  add_family(map_cmd);
  map_cmd->add_option("--out", mul_out, "map file to write")->required();
  map_cmd->add_option("--acts", mul_acts, "uniform or empirical")->capture_default_str();
  map_cmd->add_option("--model", mul_model.model, "model for empirical activations")->capture_default_str();
  map_cmd->add_option("--weights", mul_model.weights, "weights for empirical activations");
  map_cmd->add_option("--data", mul_model.data, "dataset for empirical activations");
  map_cmd->add_option("--limit", mul_model.limit, "harvest from the first K training samples");
  map_cmd->callback([&] {
    action = [&] {
      return cmd_mul_map(family_multiplier(mul_family, mul_k, mul_lut, mul_spec), mul_out, mul_acts,
                         mul_model);
    };
  });

  // inject
  ModelArgs inj_args;
  FaultArgs inj_fault;
  auto* inj_cmd = app.add_subcommand("inject", "one fault-injection run");
  inj_args.add(inj_cmd);
  inj_fault.add(inj_cmd);
  inj_cmd->callback([&] { action = [&] { return cmd_inject(inj_args, inj_fault); }; });

  // mitigate
  ModelArgs mit_args;
  FaultArgs mit_fault;
  HpArgs mit_hp;
  double mit_thresh = 100.0;
  std::string mit_acts = "uniform", mit_out, mit_cache;
  auto* mit_cmd = app.add_subcommand("mitigate", "Fal-reTune: prune, retrain masked, retune");
  mit_args.add(mit_cmd);
  mit_fault.add(mit_cmd, false);
  mit_hp.add(mit_cmd, 5);
  mit_cmd->add_option("--acc-thresh", mit_thresh, "stop retraining once float test accuracy reaches this")
      ->capture_default_str();
  mit_cmd->add_option("--acts", mit_acts, "activation set for the weight map: uniform or empirical")
      ->capture_default_str();
  mit_cmd->add_option("--out-dir", mit_out, "directory for report.json and retuned.axw")->required();
  mit_cmd->add_option("--map-cache", mit_cache, "weight-map cache directory");
  mit_cmd->callback([&] {
    action = [&] {
      return cmd_mitigate(mit_args, mit_fault, mit_hp, mit_thresh, mit_acts, mit_out, mit_cache);
    };
  });

  // campaign
  auto* camp_cmd = app.add_subcommand("campaign", "fault-injection sweeps");
  camp_cmd->require_subcommand(1);
  std::string camp_spec, camp_out = "campaign-out", camp_results;
  std::size_t camp_workers = 1;
  bool camp_report = false;
  auto* run_cmd = camp_cmd->add_subcommand("run", "run a campaign spec");
  run_cmd->add_option("--spec", camp_spec, "campaign spec (JSON)")->required();
  run_cmd->add_option("--out", camp_out, "output directory")->capture_default_str();
  run_cmd->add_option("--workers", camp_workers, "worker threads")->capture_default_str();
  run_cmd->add_flag("--report", camp_report, "also write summary.md and charts");
  run_cmd->callback([&] {
    action = [&] { return cmd_campaign_run(camp_spec, camp_out, camp_workers, camp_report); };
  });
  auto* rep_cmd = camp_cmd->add_subcommand("report", "summary.md and charts from results.csv");
  rep_cmd->add_option("--results", camp_results, "results.csv (default <out>/results.csv)");
  rep_cmd->add_option("--out", camp_out, "output directory")->capture_default_str();
  rep_cmd->callback([&] {
    action = [&] {
      const std::string results =
          camp_results.empty() ? (std::filesystem::path(camp_out) / "results.csv").string()
                               : camp_results;
      return cmd_campaign_report(results, camp_out);
    };
  });

  // dataset
  auto* ds_cmd = app.add_subcommand("dataset", "dataset helpers");
  ds_cmd->require_subcommand(1);
  std::string ds_format = "idx", ds_out;
  std::string tr_img, tr_lbl, te_img, te_lbl, te_batch;
  std::vector<std::string> tr_batches;
  auto* conv_cmd = ds_cmd->add_subcommand("convert", "normalise IDX or CIFAR-10 binaries into a dataset directory");
  conv_cmd->add_option("--format", ds_format, "idx or cifar10")->capture_default_str();
  conv_cmd->add_option("--train-images", tr_img, "IDX training images");
  conv_cmd->add_option("--train-labels", tr_lbl, "IDX training labels");
  conv_cmd->add_option("--test-images", te_img, "IDX test images");
  conv_cmd->add_option("--test-labels", te_lbl, "IDX test labels");
  conv_cmd->add_option("--train-batches", tr_batches, "CIFAR-10 training batch files");
  conv_cmd->add_option("--test-batch", te_batch, "CIFAR-10 test batch file");
  conv_cmd->add_option("--out", ds_out, "output directory")->required();
  conv_cmd->callback([&] {
    action = [&] {
      DatasetPair pair;
      if (ds_format == "idx") {
        if (tr_img.empty() || tr_lbl.empty() || te_img.empty() || te_lbl.empty()) {
          throw InvalidArgument("idx conversion needs --train-images/--train-labels/--test-images/--test-labels");
        }
        pair = {load_idx(tr_img, tr_lbl), load_idx(te_img, te_lbl)};
      } else if (ds_format == "cifar10") {
        if (tr_batches.empty() || te_batch.empty()) {
          throw InvalidArgument("cifar10 conversion needs --train-batches and --test-batch");
        }
        std::vector<std::filesystem::path> trp(tr_batches.begin(), tr_batches.end());
        const std::filesystem::path tep[] = {te_batch};
        pair = {load_cifar10(trp), load_cifar10(tep)};
      } else {
        throw InvalidArgument(fmt::format("unknown dataset format '{}'", ds_format));
      }
      write_dataset_dir(pair, ds_out);
      fmt::print("train: {}\ntest: {}\nout: {}\n", pair.train.size(), pair.test.size(), ds_out);
      return 0;
    };
  });
  std::size_t syn_classes = 2, syn_n = 500, syn_dim = 8;
  auto* syn_cmd = ds_cmd->add_subcommand("synth", "seeded Gaussian blobs as a dataset directory");
  syn_cmd->add_option("--classes", syn_classes, "class count")->capture_default_str();
  syn_cmd->add_option("--n", syn_n, "samples per split")->capture_default_str();
  syn_cmd->add_option("--dim", syn_dim, "features per sample")->capture_default_str();
  syn_cmd->add_option("--out", ds_out, "output directory")->required();
  syn_cmd->callback([&] {
    action = [&] {
      DatasetPair pair = synth_blobs_pair(syn_classes, syn_n, syn_n, syn_dim, g_seed);
      // IDX stores bytes, so squash the blobs into [0, 1]
      for (Dataset* d : {&pair.train, &pair.test}) {
        for (auto& v : d->images) v = std::clamp(0.5 + v / 16.0, 0.0, 1.0);
      }
      write_dataset_dir(pair, ds_out);
      fmt::print("train: {}\ntest: {}\nout: {}\n", pair.train.size(), pair.test.size(), ds_out);
      return 0;
    };
  });

  try {
    app.parse(argc, argv);
  } catch (const CLI::Success& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::fprintf(stderr, "axfault: error: usage: %s\n", one_line(e.what()).c_str());
    return 2;
  }
  g_seed = seed;
  try {
    return action ? action() : 0;
  } catch (const axfault::Error& e) {
    std::fprintf(stderr, "axfault: error: %s: %s\n", e.category(), one_line(e.what()).c_str());
  } catch (const std::exception& e) {
    std::fprintf(stderr, "axfault: error: internal: %s\n", one_line(e.what()).c_str());
  }
  return 1;
}
