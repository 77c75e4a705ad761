#include <fstream>
#include <iterator>
#include <set>

#include "axfault/campaign.hpp"
#include "axfault/error.hpp"
#include "doctest.h"
#include "fixtures.hpp"
#include "support.hpp"

using namespace axfault;

namespace {

CampaignAssets assets() {
  const auto& t = testsupport::trained();
  CampaignAssets a;
  a.model = t.model;
  a.weights = t.weights;
  a.data = t.data;
  return a;
}

CampaignSpec base_spec() {
  CampaignSpec s;
  s.model = "small-mlp";
  s.dataset = "synth:4:200:8:5";
  s.array_sizes = {4};
  s.sample_limit = 60;
  return s;
}

ModelSpec dense(std::size_t in, std::size_t out) {
  ModelSpec m;
  m.input_shape = {in};
  m.layers = {{DenseLayer{in, out}, Activation::softmax}};
  return m;
}

}  // namespace

TEST_SUITE("campaign") {
  TEST_CASE("mac counts") {
    CHECK(mac_count(dense(784, 10)) == 7840);
    CHECK(mac_count(dense(784, 20)) == 2 * mac_count(dense(784, 10)));
    const auto lenet = zoo_model("lenet-desk");
    CHECK(mac_count(lenet, 0) == 115200);
    CHECK(mac_count(lenet, 1) == 0);
    CHECK(mac_count(lenet, 2) == 5 * 5 * 8 * 16 * 8 * 8);
    CHECK(mac_count(lenet) == 115200 + 204800 + 256 * 64 + 64 * 10);
    CHECK(mac_count(zoo_model("mp-tanh-desk")) == 784 * 64 + 64 * 32 + 32 * 10);
  }

  TEST_CASE("energy estimate") {
    const auto table = parse_energy_table(R"({"note":"n","pj_per_mac":{"exact":1.0,"truncated:4":0.5}})");
    CHECK(table.note == "n");
    CHECK(energy_estimate(dense(784, 10), "exact", table) == doctest::Approx(7.84e-9));
    CHECK(energy_estimate(dense(784, 10), "truncated:4", table) == doctest::Approx(3.92e-9));
    CHECK_THROWS_AS(table.at("broken_carry:1"), NotFound);
    CHECK_THROWS_AS(parse_energy_table("{}"), FormatError);
  }

  TEST_CASE("spec parsing and validation") {
    const auto s = parse_campaign_spec(R"({
      "dataset": "data", "multipliers": ["exact", "truncated:4"], "bits": [15, 10],
      "percents": [0, 16], "layers": [null, 1], "engines": ["gpu"], "seeds": [1, 2, 3],
      "mitigation": {"epochs": 2}, "sample_limit": null})",
                                        "/tmp/base");
    CHECK(s.cell_count() == 2 * 1 * 2 * 2 * 2 * 1 * 1 * 3);
    CHECK(s.engines == std::vector<EngineKind>{EngineKind::gpu_tiles});
    CHECK(s.mitigation->hp.epochs == 2);
    CHECK_FALSE(s.sample_limit.has_value());
    CHECK(s.layers[1] == std::size_t{1});
    CHECK(parse_campaign_spec(R"({"dataset":"d","layers":"all"})").layers.size() == 1);
    CHECK_THROWS_AS(parse_campaign_spec(R"({"dataset":"d","bits":[16]})"), InvalidArgument);
    CHECK_THROWS_AS(parse_campaign_spec(R"({"dataset":"d","percents":[]})"), InvalidArgument);
    CHECK_THROWS_AS(parse_campaign_spec(R"({"multipliers":["exact"]})"), InvalidArgument);
    CHECK_THROWS(parse_campaign_spec("[1,2"));
  }

  TEST_CASE("cell seeds") {
    CHECK(cell_seed(0, "systolic", 64, 16, 1) == cell_seed(0, "systolic", 64, 16, 1));
    std::set<std::uint64_t> seen;
    for (double p : {8.0, 16.0, 16.5})
      for (std::uint64_t s : {1, 2}) seen.insert(cell_seed(0, "systolic", 64, p, s));
    CHECK(seen.size() == 6);
    CHECK(cell_seed(0, "systolic", 64, 16, 1) != cell_seed(1, "systolic", 64, 16, 1));
  }

  TEST_CASE("a single cell") {
    const auto recs = run_campaign(base_spec(), assets());
    REQUIRE(recs.size() == 1);
    CHECK_FALSE(recs[0].failed());
    CHECK(recs[0].layer == "all");
    CHECK(recs[0].acc_loss == doctest::Approx(recs[0].baseline_acc - recs[0].faulty_acc));
    CHECK_FALSE(recs[0].energy_pj.has_value());
    CHECK(recs[0].wall_time_ms == 0.0);
  }

  TEST_CASE("zero percent faults leave accuracy unchanged") {
    auto s = base_spec();
    s.percents = {0};
    s.engines = {EngineKind::systolic, EngineKind::gpu_tiles};
    for (const auto& r : run_campaign(s, assets())) CHECK(r.faulty_acc == r.baseline_acc);
  }

  TEST_CASE("cartesian product in canonical order") {
    auto s = base_spec();
    s.multipliers = {"exact", "truncated:4"};
    s.fault_kinds = {StuckAt::sa0, StuckAt::sa1};
    s.bits = {15, 10, 3};
    s.percents = {0, 5, 10, 25, 50};
    const auto recs = run_campaign(s, assets());
    REQUIRE(recs.size() == 60);
    CHECK(recs[0].multiplier == "exact");
    CHECK(recs[0].fault_kind == "sa0");
    CHECK(recs[0].bit == 15);
    CHECK(recs[1].percent_faulty == 5);
    CHECK(recs[5].bit == 10);
    CHECK(recs[15].fault_kind == "sa1");
    CHECK(recs[30].multiplier == "truncated:4");
    CHECK(recs[30].mae_percent > 0);
    // the baseline is shared by every cell of a multiplier
    for (std::size_t i = 0; i < 30; ++i) CHECK(recs[i].baseline_acc == recs[0].baseline_acc);
  }

  TEST_CASE("worker count does not change results") {
    auto s = base_spec();
    s.multipliers = {"exact", "broken_carry:2"};
    s.percents = {10, 40};
    s.seeds = {1, 2};
    s.engines = {EngineKind::systolic, EngineKind::gpu_tiles};
    const auto a = assets();
    CHECK(results_csv(run_campaign(s, a, {1})) == results_csv(run_campaign(s, a, {3})));
  }

  TEST_CASE("layers are checked before the sweep starts") {
    auto s = base_spec();
    s.layers = {std::nullopt, std::size_t{9}};
    CHECK_THROWS_AS(run_campaign(s, assets()), InvalidArgument);
  }

  TEST_CASE("failing cells are recorded and the sweep continues") {
    auto s = base_spec();
    s.percents = {0, 30};
    s.mitigation = MitigationSpec{};
    s.mitigation->hp.epochs = 1;
    s.mitigation->hp.lr = 1e307;
    const auto recs = run_campaign(s, assets());
    REQUIRE(recs.size() == 2);
    for (const auto& r : recs) {
      CHECK(r.failed());
      CHECK(r.error.find("non-finite") != std::string::npos);
    }
  }

  TEST_CASE("mitigation and energy columns") {
    auto s = base_spec();
    s.mitigation = MitigationSpec{};
    s.mitigation->hp.epochs = 1;
    s.mitigation->hp.batch_size = 16;
    auto a = assets();
    a.energy = parse_energy_table(R"({"pj_per_mac":{"exact":1.0}})");
    const auto recs = run_campaign(s, a);
    REQUIRE(recs.size() == 1);
    CHECK(recs[0].mitigated_acc.has_value());
    CHECK(*recs[0].energy_pj == doctest::Approx(static_cast<double>(mac_count(a.model))));
  }

  TEST_CASE("results csv round trip") {
    auto s = base_spec();
    s.percents = {0, 30};
    s.layers = {std::nullopt, std::size_t{1}};
    auto recs = run_campaign(s, assets());
    recs[1].error = "boom";
    const auto csv = results_csv(recs);
    CHECK(csv.rfind(std::string(kResultsHeader), 0) == 0);
    CHECK(results_csv(parse_results_csv(csv)) == csv);
    CHECK_THROWS_AS(parse_results_csv("a,b\n1,2\n"), FormatError);
  }

  TEST_CASE("report generation") {
    auto s = base_spec();
    s.multipliers = {"exact", "truncated:6"};
    s.percents = {10, 30};
    auto a = assets();
    a.energy = parse_energy_table(R"({"pj_per_mac":{"exact":1.0,"truncated:6":0.6}})");
    const auto recs = run_campaign(s, a);
    CHECK(swept_axes(recs) == std::vector<std::string>{"multiplier", "percent_faulty"});
    CHECK(accuracy_ranking(recs).size() == 2);
    const auto energy = energy_ranking(recs);
    REQUIRE(energy.size() == 2);
    CHECK(energy[0].multiplier == "truncated:6");

    testsupport::TempDir d1, d2;
    const auto files = emit_report(recs, d1.path());
    CHECK(files.size() == 2 + swept_axes(recs).size());
    emit_report(recs, d2.path());
    for (const auto& f : files) {
      const auto rel = f.filename().string();
      CHECK(std::filesystem::exists(d2 / rel));
      std::ifstream x(f), y(d2 / rel);
      const std::string sx((std::istreambuf_iterator<char>(x)), {});
      const std::string sy((std::istreambuf_iterator<char>(y)), {});
      CHECK(sx == sy);
    }
    const auto md = summary_markdown(recs);
    CHECK(md.find("truncated:6") != std::string::npos);
    CHECK(axis_chart_svg(recs, "percent_faulty").rfind("<svg", 0) == 0);
  }
}
