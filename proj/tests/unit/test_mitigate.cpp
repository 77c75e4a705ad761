#include "axfault/error.hpp"
#include "axfault/mitigate.hpp"
#include "axfault/quant.hpp"
#include "doctest.h"
#include "fixtures.hpp"
#include "support.hpp"

using namespace axfault;

namespace {

FaultMap full_map(std::size_t n) {
  FaultMap fm(n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) fm.insert(i, j, {15, StuckAt::sa1});
  return fm;
}

FalRetuneConfig config(std::size_t n, std::size_t epochs) {
  FalRetuneConfig cfg;
  cfg.array = {n, InjectMode::propagate};
  cfg.hp.epochs = epochs;
  cfg.hp.batch_size = 16;
  return cfg;
}

}  // namespace

TEST_SUITE("mitigate") {
  TEST_CASE("prune mask follows modular stationing") {
    const auto m = testsupport::small_mlp();
    FaultMap fm(4);
    fm.insert(0, 0, {15, StuckAt::sa1});
    const auto mask = prune_mask(m, fm);
    // 12x8, 8x12 and 4x8 weight matrices on a 4x4 array
    CHECK(mask.count(0) == 3 * 2);
    CHECK(mask.count(1) == 2 * 3);
    CHECK(mask.count(2) == 1 * 2);
    CHECK(mask.layers[0][0] == 1);
    CHECK(mask.layers[0][4] == 1);
    CHECK(mask.layers[0][1] == 0);
    const auto only = prune_mask(m, fm, 1);
    CHECK(only.count(0) == 0);
    CHECK(only.count(1) == 6);
    CHECK(only.count(2) == 0);
    CHECK(prune_mask(m, FaultMap(4)).total() == 0);
  }

  TEST_CASE("retune with an identity map is plain quantisation") {
    const auto& t = testsupport::trained();
    const auto map = build_weight_map(AxMultiplier::exact(), ActivationSample::uniform_full());
    const auto r = retune_weights(t.model, t.weights, map, PruneMask::empty(t.model));
    for (std::size_t l = 0; l < t.model.layers.size(); ++l) {
      CHECK(r.layers[l].weight.data == dequantize(quantize(t.weights.layers[l].weight)).data);
      CHECK(r.layers[l].bias.data == t.weights.layers[l].bias.data);
    }
  }

  TEST_CASE("fault-free exact run changes nothing") {
    const auto& t = testsupport::trained();
    const auto res = fal_retune(t.model, t.weights, FaultMap(4), AxMultiplier::exact(), t.data.train,
                                t.data.test, config(4, 0));
    CHECK(res.report.acc_after == res.report.baseline_acc);
    CHECK(res.report.faulty_acc_before == res.report.baseline_acc);
    CHECK(res.report.pruned_count == std::vector<std::size_t>{0, 0, 0});
    CHECK(res.report.epochs_used == 0);
    CHECK(res.report.fault_map.faults == "none");
  }

  TEST_CASE("all MACs faulty gives the bias-only network") {
    const auto& t = testsupport::trained();
    const auto res = fal_retune(t.model, t.weights, full_map(2), build_truncated(3), t.data.train,
                                t.data.test, config(2, 1));
    for (const auto& l : res.retuned.layers)
      for (double v : l.weight.data) CHECK(v == 0.0);
    CHECK(res.report.pruned_count == std::vector<std::size_t>{96, 96, 32});
    CHECK(res.report.acc_after == evaluate(t.model, res.retuned, t.data.test, {}));
    CHECK(res.report.fault_map.percent == 100.0);
  }

  TEST_CASE("retraining recovers accuracy lost to faults") {
    const auto& t = testsupport::trained();
    const auto fm = random_fault_map(4, 25, {15, StuckAt::sa1}, 2);
    const auto res = fal_retune(t.model, t.weights, fm, build_truncated(3), t.data.train, t.data.test,
                                config(4, 4));
    CHECK(res.report.faulty_acc_before < res.report.baseline_acc);
    CHECK(res.report.acc_after > res.report.faulty_acc_before);
    CHECK(res.log.size() == res.report.epochs_used);
    const auto mask = prune_mask(t.model, fm);
    for (std::size_t l = 0; l < 3; ++l)
      for (std::size_t i = 0; i < mask.layers[l].size(); ++i)
        if (mask.layers[l][i]) CHECK(res.retuned.layers[l].weight.data[i] == 0.0);
  }

  TEST_CASE("accuracy threshold stops retraining early") {
    const auto& t = testsupport::trained();
    auto cfg = config(4, 5);
    cfg.acc_thresh = 1.0;
    const auto res = fal_retune(t.model, t.weights, random_fault_map(4, 25, {}, 2), build_truncated(3),
                                t.data.train, t.data.test, cfg);
    CHECK(res.report.epochs_used == 1);
  }

  TEST_CASE("empirical activations") {
    const auto& t = testsupport::trained();
    const auto acts = harvest_activations(t.model, t.weights, t.data.test, 20);
    CHECK(acts.total() == 20 * (8 + 12 + 8));
    CHECK(acts.id == "empirical:small-mlp:all");
    CHECK(parse_activation_source("uniform-full") == ActivationSource::uniform);
    CHECK(parse_activation_source("empirical") == ActivationSource::empirical);
    CHECK_THROWS_AS(parse_activation_source("gaussian"), InvalidArgument);
  }

  TEST_CASE("precomputed maps are cached") {
    testsupport::TempDir dir;
    const std::vector<AxMultiplier> ms{build_truncated(4), build_broken_carry(2)};
    const auto acts = ActivationSample::uniform_full();
    const auto first = precompute_maps(ms, acts, dir.path());
    CHECK(first.computed == 2);
    CHECK(first.loaded == 0);
    const auto second = precompute_maps(ms, acts, dir.path());
    CHECK(second.computed == 0);
    CHECK(second.loaded == 2);
    CHECK(second.tables.at("broken_carry:2").map == first.tables.at("broken_carry:2").map);
    const auto none = precompute_maps(ms, acts);
    CHECK(none.computed == 2);
  }

  TEST_CASE("report json") {
    MitigationReport r;
    r.model = "m";
    r.baseline_acc = 96;
    r.faulty_acc_before = 40;
    r.acc_after = 92;
    r.pruned_count = {1, 2};
    const auto text = report_to_json(r);
    CHECK(text.find("\"acc_loss_before\": 56") != std::string::npos);
    CHECK(text.find("\"acc_loss_after\": 4") != std::string::npos);
    testsupport::TempDir dir;
    save_report(r, dir / "r.json");
    CHECK(std::filesystem::file_size(dir / "r.json") > 0);
  }
}
