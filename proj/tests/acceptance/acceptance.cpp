// Acceptance suite: one PASS/FAIL line per criterion.
//
//   acceptance --data <mnist dir> [--only C4,C5] [--known-red C6] [--out results.txt]
//
// Exit status is 0 when every failing criterion was listed in --known-red.
#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iterator>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <fmt/core.h>

#include "CLI11.hpp"
#include "axfault/axmul.hpp"
#include "axfault/campaign.hpp"
#include "axfault/faultsim.hpp"
#include "axfault/mitigate.hpp"
#include "axfault/network.hpp"
#include "axfault/rng.hpp"
#include "axfault/train.hpp"

using namespace axfault;
namespace fs = std::filesystem;

namespace tol {
constexpr double kBaselineAcc = 93.0;          // C4, percent
constexpr double kBaselineCpuSeconds = 600.0;  // C4
constexpr double kGradRelErr = 1e-4;           // C4
constexpr double kMsbMaxAcc = 30.0;            // C5
constexpr double kLsbMaxDrop = 8.0;            // C5, points below baseline
constexpr double kInversionPoints = 2.0;       // C7
constexpr std::size_t kInversionsAllowed = 1;  // C7
constexpr double kRecover16 = 2.0;             // C10, points below baseline
constexpr double kRecover50 = 6.0;             // C10
constexpr double kRetuneSeconds = 20 * 60.0;   // C10
constexpr double kConvAbs = 1e-5;              // C11
constexpr double kLenetAcc = 95.0;             // C11
}  // namespace tol

namespace cfg {
constexpr std::size_t kSeeds = 5;
constexpr std::size_t kArray = 64;
constexpr double kPercent = 16.0;
constexpr std::size_t kTanhEpochs = 15;
constexpr std::size_t kLenetEpochs = 5;
constexpr std::size_t kRetuneEpochs = 5;
constexpr std::uint64_t kTrainSeed = 1;
}  // namespace cfg

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

double cpu_seconds() { return static_cast<double>(std::clock()) / CLOCKS_PER_SEC; }

double wall_seconds(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

std::string fmt_list(const std::vector<double>& v) {
  std::string s;
  for (double x : v) s += fmt::format("{}{:.2f}", s.empty() ? "" : " ", x);
  return s;
}

class TempDir {
 public:
  TempDir() {
    static int counter = 0;
    path_ = fs::temp_directory_path() /
            fmt::format("axfault-accept-{}-{}", static_cast<long>(std::time(nullptr)), counter++);
    fs::remove_all(path_);
    fs::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    fs::remove_all(path_, ec);
  }
  const fs::path& path() const { return path_; }

 private:
  fs::path path_;
};

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

// Trained models shared by several criteria, built on first use.
class Fixtures {
 public:
  explicit Fixtures(fs::path data_dir) : data_dir_(std::move(data_dir)) {}

  const DatasetPair& data() {
    if (!data_) data_ = load_dataset_dir(data_dir_);
    return *data_;
  }

  struct Tanh {
    ModelSpec model;
    TrainResult trained;
    double cpu_s = 0.0;
    double float_acc = 0.0;
  };

  const Tanh& tanh() {
    if (!tanh_) {
      Tanh t;
      t.model = zoo_model("mp-tanh-desk");
      HyperParams hp;
      hp.epochs = cfg::kTanhEpochs;
      hp.seed = cfg::kTrainSeed;
      TrainOptions opts;
      opts.test = &data().test;
      const double c0 = cpu_seconds();
      t.trained = train(t.model, data().train, hp, opts);
      t.cpu_s = cpu_seconds() - c0;
      t.float_acc = *t.trained.log.back().test_acc;
      tanh_ = std::move(t);
    }
    return *tanh_;
  }

  CampaignAssets tanh_assets() {
    CampaignAssets a;
    a.model = tanh().model;
    a.weights = tanh().trained.weights;
    a.data = data();
    return a;
  }

  CampaignSpec tanh_spec() const {
    CampaignSpec s;
    s.model = "mp-tanh-desk";
    s.dataset = data_dir_.string();
    s.array_sizes = {cfg::kArray};
    s.percents = {cfg::kPercent};
    s.fault_kinds = {StuckAt::sa1};
    s.bits = {15};
    s.seeds.clear();
    for (std::uint64_t i = 1; i <= cfg::kSeeds; ++i) s.seeds.push_back(i);
    s.sample_limit = std::nullopt;  // the whole test split
    return s;
  }

 private:
  fs::path data_dir_;
  std::optional<DatasetPair> data_;
  std::optional<Tanh> tanh_;
};

// Mean faulty accuracy of the records selected by key.
std::map<std::string, double> mean_by(const std::vector<CampaignRecord>& recs,
                                      const std::function<std::string(const CampaignRecord&)>& key) {
  std::map<std::string, std::pair<double, std::size_t>> acc;
  for (const auto& r : recs) {
    if (r.failed()) throw Error("campaign cell failed: " + r.error);
    auto& [sum, n] = acc[key(r)];
    sum += r.faulty_acc;
    ++n;
  }
  std::map<std::string, double> out;
  for (const auto& [k, v] : acc) out[k] = v.first / static_cast<double>(v.second);
  return out;
}

Matrix<std::int8_t> random_codes(Rng& rng, std::size_t rows, std::size_t cols) {
  Matrix<std::int8_t> m(rows, cols);
  for (auto& v : m.data()) v = static_cast<std::int8_t>(static_cast<int>(rng.below(256)) - 128);
  return m;
}

Outcome c1_gemm_oracle() {
  Rng rng(101);
  const std::size_t sizes[] = {4, 8, 16};
  std::size_t mismatched = 0;
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t r = 1 + rng.below(64), c = 1 + rng.below(64), b = 1 + rng.below(64);
    const auto w = random_codes(rng, r, c);
    const auto a = random_codes(rng, c, b);
    Matrix<std::int32_t> ref(r, b, 0);
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t k = 0; k < c; ++k) {
        const std::int32_t wv = w(i, k);
        for (std::size_t j = 0; j < b; ++j) ref(i, j) += wv * a(k, j);
      }
    const std::size_t n = sizes[trial % 3];
    const auto got = systolic_gemm(w, a, AxMultiplier::exact(), FaultMap(n), {n, InjectMode::propagate});
    mismatched += got != ref;
  }
  return {mismatched == 0, fmt::format("{} of 100 shapes differ", mismatched)};
}

Outcome c2_multipliers() {
  const auto exact = AxMultiplier::exact();
  std::size_t bad = 0;
  for (int x = -128; x <= 127; ++x)
    for (int y = -128; y <= 127; ++y)
      bad += exact.multiply(static_cast<std::int8_t>(x), static_cast<std::int8_t>(y)) != x * y;
  const double mae0 = mae(exact).mae_percent;
  bool monotone = true;
  double prev = -1;
  for (int k = 0; k <= 15; ++k) {
    const double v = mae(build_truncated(k)).mae_percent;
    monotone = monotone && v >= prev;
    prev = v;
  }
  TempDir dir;
  bool round_trip = true;
  for (const auto& m : {exact, build_truncated(5), build_broken_carry(3)}) {
    save_lut(m, dir.path() / "m.lut");
    const auto back = load_lut(dir.path() / "m.lut");
    round_trip = round_trip && std::equal(m.table().begin(), m.table().end(), back.table().begin());
  }
  return {bad == 0 && mae0 == 0.0 && monotone && round_trip,
          fmt::format("mismatches={} mae(exact)={} monotone={} lut_round_trip={}", bad, mae0, monotone,
                      round_trip)};
}

Outcome c3_fault_bits() {
  std::size_t bad = 0;
  for (int bit = 0; bit < 16; ++bit) {
    for (auto kind : {StuckAt::sa0, StuckAt::sa1}) {
      const StuckAtFault f{bit, kind};
      const std::uint32_t mask = 1u << bit;
      for (std::uint32_t p = 0; p < 65536; ++p) {
        const auto once = apply_fault(static_cast<std::int16_t>(static_cast<std::uint16_t>(p)), f);
        const std::uint32_t u = static_cast<std::uint16_t>(once);
        bad += apply_fault(once, f) != once;
        bad += ((u & mask) != 0) != (kind == StuckAt::sa1);
        bad += (u & ~mask) != (p & ~mask);
      }
    }
  }
  return {bad == 0, fmt::format("{} violations over 2^16 x 16 x 2", bad)};
}

Outcome c4_baseline(Fixtures& fx) {
  const auto& t = fx.tanh();
  double grad = 0;
  Rng rng(4);
  for (int i = 0; i < 3; ++i) {
    const std::size_t idx = rng.below(fx.data().test.size());
    grad = std::max(grad, grad_check(t.model, t.trained.weights, fx.data().test.sample(idx),
                                     fx.data().test.labels[idx], 7 + i));
  }
  const bool ok = t.float_acc >= tol::kBaselineAcc && t.cpu_s <= tol::kBaselineCpuSeconds &&
                  grad <= tol::kGradRelErr;
  return {ok, fmt::format("test_acc={:.2f}% after {} epochs, cpu={:.1f}s, grad_rel_err={:.2e}",
                          t.float_acc, cfg::kTanhEpochs, t.cpu_s, grad)};
}

Outcome c5_msb_lsb(Fixtures& fx) {
  auto s = fx.tanh_spec();
  s.bits = {15, 0};
  const auto recs = run_campaign(s, fx.tanh_assets());
  const auto m = mean_by(recs, [](const CampaignRecord& r) { return std::to_string(r.bit); });
  const double base = recs.front().baseline_acc;
  const bool ok = m.at("15") <= tol::kMsbMaxAcc && m.at("0") >= base - tol::kLsbMaxDrop;
  return {ok, fmt::format("baseline={:.2f} sa1@15={:.2f} (<= {}) sa1@0={:.2f} (>= {:.2f})", base,
                          m.at("15"), tol::kMsbMaxAcc, m.at("0"), base - tol::kLsbMaxDrop)};
}

Outcome c6_fault_type(Fixtures& fx) {
  auto s = fx.tanh_spec();
  s.fault_kinds = {StuckAt::sa0, StuckAt::sa1};
  const auto recs = run_campaign(s, fx.tanh_assets());
  const auto m = mean_by(recs, [](const CampaignRecord& r) { return r.fault_kind; });
  std::vector<double> sa0, sa1;
  for (const auto& r : recs) (r.fault_kind == "sa0" ? sa0 : sa1).push_back(r.faulty_acc);
  return {m.at("sa0") >= m.at("sa1"),
          fmt::format("mean sa0@15={:.2f} [{}] sa1@15={:.2f} [{}]", m.at("sa0"), fmt_list(sa0),
                      m.at("sa1"), fmt_list(sa1))};
}

Outcome c7_amplification(Fixtures& fx) {
  auto s = fx.tanh_spec();
  s.multipliers = {"exact", "truncated:2", "truncated:4", "truncated:6"};
  const auto recs = run_campaign(s, fx.tanh_assets());
  const auto m = mean_by(recs, [](const CampaignRecord& r) { return r.multiplier; });
  std::vector<std::pair<double, std::string>> order;
  std::map<std::string, double> maes;
  for (const auto& r : recs) maes[r.multiplier] = r.mae_percent;
  for (const auto& [id, e] : maes) order.emplace_back(e, id);
  std::sort(order.begin(), order.end());
  std::size_t inversions = 0;
  bool small = true;
  std::string detail;
  for (std::size_t i = 0; i < order.size(); ++i) {
    const double acc = m.at(order[i].second);
    detail += fmt::format("{}{}(mae {:.4f}%)={:.2f}", i ? " " : "", order[i].second, order[i].first, acc);
    if (i > 0) {
      const double rise = acc - m.at(order[i - 1].second);
      if (rise > 0) {
        ++inversions;
        small = small && rise <= tol::kInversionPoints;
      }
    }
  }
  return {inversions <= tol::kInversionsAllowed && small,
          detail + fmt::format("; inversions={}", inversions)};
}

Outcome c8_layers(Fixtures& fx) {
  auto s = fx.tanh_spec();
  const std::size_t last = fx.tanh().model.gemm_layers().size() - 1;
  s.layers = {std::size_t{0}, last};
  const auto recs = run_campaign(s, fx.tanh_assets());
  const auto m = mean_by(recs, [](const CampaignRecord& r) { return r.layer; });
  const double first = m.at("0"), final = m.at(std::to_string(last));
  return {first <= final, fmt::format("first layer={:.2f} last layer={:.2f}", first, final)};
}

Outcome c9_array_size(Fixtures& fx) {
  auto s = fx.tanh_spec();
  s.array_sizes = {8, 64};
  const auto recs = run_campaign(s, fx.tanh_assets());
  const auto m = mean_by(recs, [](const CampaignRecord& r) { return std::to_string(r.array_size); });
  return {m.at("8") <= m.at("64"), fmt::format("n=8: {:.2f}  n=64: {:.2f}", m.at("8"), m.at("64"))};
}

Outcome c10_retune(Fixtures& fx) {
  const auto& t = fx.tanh();
  const auto mul = build_truncated(3);
  const auto t0 = std::chrono::steady_clock::now();
  FalRetuneConfig rc;
  rc.array = {cfg::kArray, InjectMode::propagate};
  rc.hp.epochs = cfg::kRetuneEpochs;

  bool ok = true;
  std::string detail;
  for (double pct : {16.0, 50.0}) {
    const double allowed = pct == 16.0 ? tol::kRecover16 : tol::kRecover50;
    std::vector<double> after;
    double base = 0;
    for (std::uint64_t seed = 1; seed <= 3; ++seed) {
      rc.hp.seed = seed;
      const auto fm = random_fault_map(cfg::kArray, pct, {15, StuckAt::sa1},
                                       cell_seed(0, "systolic", cfg::kArray, pct, seed));
      const auto rep = fal_retune(t.model, t.trained.weights, fm, mul, fx.data().train, fx.data().test, rc).report;
      base = rep.baseline_acc;
      after.push_back(rep.acc_after);
      ok = ok && rep.acc_after >= rep.baseline_acc - allowed;
    }
    detail += fmt::format("{}%: baseline={:.2f} after=[{}] (>= {:.2f}); ", pct, base, fmt_list(after),
                          base - allowed);
  }
  FalRetuneConfig idc = rc;
  idc.hp.epochs = 0;
  const auto id = fal_retune(t.model, t.trained.weights, FaultMap(cfg::kArray), mul, fx.data().train,
                             fx.data().test, idc).report;
  const bool identity = id.acc_after == id.baseline_acc;
  const double secs = wall_seconds(t0);
  ok = ok && identity && secs <= tol::kRetuneSeconds;
  detail += fmt::format("identity case {:.2f}=={:.2f}: {}; {:.0f}s", id.acc_after, id.baseline_acc,
                        identity ? "yes" : "no", secs);
  return {ok, detail};
}

Outcome c11_conv(Fixtures& fx) {
  // nested-loop oracle: 12x12x8 input, 5x5 kernel, pad 2
  ModelSpec m;
  m.input_shape = {12, 12, 8};
  m.layers = {{Conv2dLayer{5, 5, 8, 16, 1, 2}, Activation::none}};
  auto w = init_weights(m, 5);
  Rng rng(6);
  for (auto& v : w.layers[0].bias.data) v = rng.uniform(-1, 1);
  FTensor x = FTensor::zeros({12, 12, 8});
  for (auto& v : x.data) v = rng.uniform(-1, 1);
  const auto out = forward(m, w, x, {}).output;
  const auto& k = w.layers[0].weight.data;
  double worst = 0;
  for (int oy = 0; oy < 12; ++oy)
    for (int ox = 0; ox < 12; ++ox)
      for (int co = 0; co < 16; ++co) {
        double s = w.layers[0].bias.data[co];
        for (int ky = 0; ky < 5; ++ky)
          for (int kx = 0; kx < 5; ++kx) {
            const int iy = oy + ky - 2, ix = ox + kx - 2;
            if (iy < 0 || iy >= 12 || ix < 0 || ix >= 12) continue;
            for (int ci = 0; ci < 8; ++ci)
              s += k[((co * 5 + ky) * 5 + kx) * 8 + ci] * x.data[(iy * 12 + ix) * 8 + ci];
          }
        worst = std::max(worst, std::fabs(s - out.data[(oy * 12 + ox) * 16 + co]));
      }

  const auto lenet = zoo_model("lenet-desk");
  HyperParams hp;
  hp.epochs = cfg::kLenetEpochs;
  hp.seed = cfg::kTrainSeed;
  const auto trained = train(lenet, fx.data().train, hp);
  const double acc = evaluate(lenet, trained.weights, fx.data().test, {});
  return {worst <= tol::kConvAbs && acc >= tol::kLenetAcc,
          fmt::format("conv max_abs_err={:.2e}; lenet-desk test_acc={:.2f}% after {} epochs", worst,
                      acc, cfg::kLenetEpochs)};
}

Outcome c12_determinism(Fixtures& fx) {
  auto s = fx.tanh_spec();
  s.multipliers = {"exact", "truncated:4", "broken_carry:2"};
  s.percents = {5, 16, 40};
  s.seeds = {1, 2, 3};
  s.master_seed = 2024;
  s.sample_limit = 500;
  const auto assets = fx.tanh_assets();
  TempDir dir;
  std::vector<std::string> csvs;
  for (std::size_t workers : {1u, 1u, 4u, 4u}) {
    const fs::path out = dir.path() / fmt::format("run{}", csvs.size());
    emit_report(run_campaign(s, assets, {workers}), out);
    csvs.push_back(slurp(out / "results.csv"));
  }
  const bool same = std::all_of(csvs.begin(), csvs.end(), [&](const auto& c) { return c == csvs[0]; });
  return {same && !csvs[0].empty(),
          fmt::format("{} cells, 4 runs (1,1,4,4 workers) byte-identical: {}", s.cell_count(),
                      same ? "yes" : "no")};
}

Outcome c13_energy(Fixtures& fx) {
  struct Geo {
    const char* name;
    ModelSpec model;
    std::uint64_t hand;
  };
  auto single = [](Shape in, LayerSpec l) {
    ModelSpec m;
    m.input_shape = std::move(in);
    m.layers = {std::move(l)};
    return m;
  };
  const std::vector<Geo> geos{
      {"dense 784x64", single({784}, {DenseLayer{784, 64}, Activation::none}), 784ull * 64},
      {"conv 5x5x1x8 on 28x28", single({28, 28, 1}, {Conv2dLayer{5, 5, 1, 8, 1, 0}, Activation::none}),
       5ull * 5 * 1 * 8 * 24 * 24},
      {"conv 3x3x4x6 s2 p1 on 9x9", single({9, 9, 4}, {Conv2dLayer{3, 3, 4, 6, 2, 1}, Activation::none}),
       3ull * 3 * 4 * 6 * 5 * 5},
  };
  const auto table = parse_energy_table(
      R"({"pj_per_mac":{"exact":1.0,"truncated:2":0.9,"truncated:4":0.8,"truncated:6":0.65}})");
  bool ok = true;
  std::string detail;
  for (const auto& g : geos) {
    const auto macs = mac_count(g.model);
    const double joules = energy_estimate(g.model, "truncated:4", table);
    const double hand = static_cast<double>(g.hand) * 0.8 * 1e-12;
    ok = ok && macs == g.hand && joules == hand;
    detail += fmt::format("{}: {} MACs (hand {}); ", g.name, macs, g.hand);
  }

  auto s = fx.tanh_spec();
  s.multipliers = {"exact", "truncated:2", "truncated:4", "truncated:6"};
  s.seeds = {1, 2};
  auto assets = fx.tanh_assets();
  assets.energy = table;
  const auto recs = run_campaign(s, assets);
  const auto energy = energy_ranking(recs);
  std::vector<std::string> expect;
  {
    std::vector<std::pair<double, std::string>> v;
    for (const auto& [id, pj] : table.pj_per_mac) v.emplace_back(pj, id);
    std::sort(v.begin(), v.end());
    for (const auto& p : v) expect.push_back(p.second);
  }
  std::vector<std::string> got;
  for (const auto& e : energy) got.push_back(e.multiplier);
  const auto md = summary_markdown(recs);
  const bool both = md.find("## Ranking by accuracy under faults") != std::string::npos &&
                    md.find("## Ranking by energy") != std::string::npos;
  ok = ok && got == expect && both;
  detail += fmt::format("energy order matches table: {}; report shows both rankings: {}",
                        got == expect ? "yes" : "no", both ? "yes" : "no");
  return {ok, detail};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"axfault acceptance suite"};
  std::string data_dir;
  std::string only_text;
  std::string known_text;
  std::string out_path;
  app.add_option("--data", data_dir, "MNIST subset directory")->required();
  app.add_option("--only", only_text, "comma-separated criteria to run, e.g. C1,C4");
  app.add_option("--known-red", known_text, "criteria whose failure does not fail the run");
  app.add_option("--out", out_path, "also write the result lines to this file");
  CLI11_PARSE(app, argc, argv);

  auto split = [](const std::string& text) {
    std::set<std::string> out;
    std::stringstream ss(text);
    for (std::string item; std::getline(ss, item, ',');)
      if (!item.empty()) out.insert(item);
    return out;
  };
  const auto only = split(only_text);
  const auto known = split(known_text);

  Fixtures fx(data_dir);
  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria{
      {"C1", c1_gemm_oracle},
      {"C2", c2_multipliers},
      {"C3", c3_fault_bits},
      {"C4", [&] { return c4_baseline(fx); }},
      {"C5", [&] { return c5_msb_lsb(fx); }},
      {"C6", [&] { return c6_fault_type(fx); }},
      {"C7", [&] { return c7_amplification(fx); }},
      {"C8", [&] { return c8_layers(fx); }},
      {"C9", [&] { return c9_array_size(fx); }},
      {"C10", [&] { return c10_retune(fx); }},
      {"C11", [&] { return c11_conv(fx); }},
      {"C12", [&] { return c12_determinism(fx); }},
      {"C13", [&] { return c13_energy(fx); }},
  };

  std::ofstream out_file;
  if (!out_path.empty()) out_file.open(out_path);
  auto emit = [&](const std::string& line) {
    std::fputs(line.c_str(), stdout);
    std::fflush(stdout);
    if (out_file) out_file << line << std::flush;
  };

  std::size_t passed = 0, ran = 0;
  std::vector<std::string> unexpected;
  for (const auto& [id, fn] : criteria) {
    if (!only.empty() && !only.count(id)) continue;
    ++ran;
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = fn();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    const char* tag = o.pass ? "PASS" : (known.count(id) ? "FAIL (known red)" : "FAIL");
    emit(fmt::format("{} {}: {} [{:.1f}s]\n", tag, id, o.detail, wall_seconds(t0)));
    if (o.pass) {
      ++passed;
    } else if (!known.count(id)) {
      unexpected.push_back(id);
    }
  }
  emit(fmt::format("{}/{} criteria passed\n", passed, ran));
  if (!unexpected.empty()) {
    std::string ids;
    for (const auto& u : unexpected) ids += (ids.empty() ? "" : ",") + u;
    emit(fmt::format("unexpected failures: {}\n", ids));
    return 1;
  }
  return 0;
}
