#include <algorithm>
#include <fstream>
#include <cmath>

#include "axfault/error.hpp"
#include "axfault/network.hpp"
#include "axfault/rng.hpp"
#include "axfault/train.hpp"
#include "doctest.h"
#include "support.hpp"

using namespace axfault;

namespace {

ModelSpec single_conv() {
  ModelSpec m;
  m.name = "conv";
  m.input_shape = {6, 6, 2};
  m.layers = {{Conv2dLayer{3, 3, 2, 3, 1, 1}, Activation::none}};
  return m;
}

ModelSpec dense_chain() {
  ModelSpec m;
  m.name = "chain";
  m.input_shape = {8};
  m.layers = {{DenseLayer{8, 8}, Activation::tanh},
              {DenseLayer{8, 8}, Activation::tanh},
              {DenseLayer{8, 4}, Activation::softmax}};
  return m;
}

void fill_random(WeightSet& w, std::uint64_t seed, double span) {
  Rng rng(seed);
  for (auto& l : w.layers) {
    for (auto& v : l.weight.data) v = rng.uniform(-span, span);
    for (auto& v : l.bias.data) v = rng.uniform(-span, span);
  }
}

std::vector<double> random_input(std::size_t n, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<double> x(n);
  for (auto& v : x) v = rng.uniform(-1, 1);
  return x;
}

ExecEnv systolic(std::size_t n, FaultMap fm, InjectMode mode) {
  ExecEnv env;
  env.engine = SystolicEngine{{n, mode}, std::move(fm)};
  return env;
}

}  // namespace

TEST_SUITE("network") {
  TEST_CASE("zoo models are well formed") {
    for (const auto& name : zoo_names()) {
      const auto m = zoo_model(name);
      CHECK_NOTHROW(m.validate());
      CHECK(m.classes() == 10);
    }
    CHECK(zoo_model("mp-tanh-desk").gemm_layers().size() == 3);
    const auto lenet = zoo_model("lenet-desk");
    CHECK(lenet.gemm_layers() == std::vector<std::size_t>{0, 2, 5, 6});
    CHECK(lenet.output_shapes()[1] == Shape{12, 12, 8});
    CHECK(lenet.weight_shape(0) == Shape{8, 5, 5, 1});
    CHECK(lenet.weight_shape(1).empty());
    CHECK_THROWS_AS(zoo_model("resnet"), NotFound);
  }

  TEST_CASE("mismatched layers are rejected") {
    ModelSpec m;
    m.input_shape = {4};
    m.layers = {{DenseLayer{4, 3}, Activation::none}, {DenseLayer{4, 2}, Activation::softmax}};
    CHECK_THROWS_AS(m.validate(), ShapeError);
    CHECK_THROWS_AS(parse_model("{\"input_shape\":[4],\"layers\":[{\"type\":\"pool3d\"}]}"),
                    FormatError);
    CHECK_THROWS_AS(parse_model("not json"), FormatError);
  }

  TEST_CASE("model json round trip") {
    for (const auto& name : zoo_names()) {
      const auto m = zoo_model(name);
      const auto back = parse_model(model_to_json(m));
      CHECK(model_to_json(back) == model_to_json(m));
      CHECK(back.output_shapes() == m.output_shapes());
    }
    testsupport::TempDir dir;
    save_model(zoo_model("lenet-desk"), dir / "lenet.json");
    CHECK(resolve_model((dir / "lenet.json").string()).gemm_layers().size() == 4);
  }

  TEST_CASE("weights file round trip") {
    testsupport::TempDir dir;
    const auto m = zoo_model("lenet-desk");
    auto w = init_weights(m, 3);
    fill_random(w, 4, 0.5);
    // stored as f32, so compare against f32-rounded values
    for (auto& l : w.layers) {
      for (auto& v : l.weight.data) v = static_cast<float>(v);
      for (auto& v : l.bias.data) v = static_cast<float>(v);
    }
    save_weights(m, w, dir / "w.axw");
    CHECK(load_weights(m, dir / "w.axw") == w);
    CHECK_THROWS_AS(load_weights(zoo_model("mp-tanh-desk"), dir / "w.axw"), FormatError);
    std::ofstream(dir / "junk.axw", std::ios::binary) << "JUNK";
    CHECK_THROWS_AS(load_weights(m, dir / "junk.axw"), FormatError);
    CHECK_THROWS_AS(load_weights(m, dir / "none.axw"), IoError);
  }

  TEST_CASE("im2col conv matches a nested-loop convolution") {
    const auto m = single_conv();
    auto w = init_weights(m, 1);
    fill_random(w, 2, 1.0);
    const auto x = random_input(6 * 6 * 2, 3);
    const auto out = forward(m, w, FTensor({6, 6, 2}, x), {}).output;
    REQUIRE(out.size() == 6 * 6 * 3);
    const auto& k = w.layers[0].weight.data;  // {cout, kh, kw, cin}
    double worst = 0;
    for (int oy = 0; oy < 6; ++oy)
      for (int ox = 0; ox < 6; ++ox)
        for (int co = 0; co < 3; ++co) {
          double s = w.layers[0].bias.data[co];
          for (int ky = 0; ky < 3; ++ky)
            for (int kx = 0; kx < 3; ++kx) {
              const int iy = oy + ky - 1, ix = ox + kx - 1;
              if (iy < 0 || iy >= 6 || ix < 0 || ix >= 6) continue;
              for (int ci = 0; ci < 2; ++ci)
                s += k[((co * 3 + ky) * 3 + kx) * 2 + ci] * x[(iy * 6 + ix) * 2 + ci];
            }
          worst = std::max(worst, std::fabs(s - out.data[(oy * 6 + ox) * 3 + co]));
        }
    CHECK(worst <= 1e-5);
  }

  TEST_CASE("im2col layout") {
    // 3x3 single channel, 2x2 kernel: column 0 is the top-left patch
    const std::vector<int> x{1, 2, 3, 4, 5, 6, 7, 8, 9};
    const auto cols = im2col<int>(x, ConvGeometry{3, 3, 1, 2, 2, 1, 0});
    CHECK(cols.rows() == 4);
    CHECK(cols.cols() == 4);
    CHECK(cols(0, 0) == 1);
    CHECK(cols(1, 0) == 2);
    CHECK(cols(2, 0) == 4);
    CHECK(cols(3, 0) == 5);
    CHECK(cols(3, 3) == 9);
    const auto padded = im2col<int>(x, ConvGeometry{3, 3, 1, 3, 3, 1, 1});
    CHECK(padded(0, 0) == 0);
    CHECK(padded(4, 0) == 1);
  }

  TEST_CASE("identity dense layer") {
    ModelSpec m;
    m.input_shape = {4};
    m.layers = {{DenseLayer{4, 4}, Activation::none}};
    auto w = init_weights(m, 1);
    for (std::size_t i = 0; i < 4; ++i)
      for (std::size_t j = 0; j < 4; ++j) w.layers[0].weight.data[i * 4 + j] = i == j;
    const std::vector<double> x{0.25, -1.0, 0.5, 0.0};
    const auto out = forward(m, w, FTensor({4}, x), {}).output;
    for (std::size_t i = 0; i < 4; ++i) CHECK(out.data[i] == doctest::Approx(x[i]));
    // exact multiplier on a fault-free array only adds quantisation error
    const auto q = forward(m, w, FTensor({4}, x), systolic(4, FaultMap(4), InjectMode::propagate)).output;
    for (std::size_t i = 0; i < 4; ++i) CHECK(q.data[i] == doctest::Approx(x[i]).epsilon(0.01));
  }

  TEST_CASE("all MACs bypassed leaves only the bias") {
    ModelSpec m;
    m.input_shape = {5};
    m.layers = {{DenseLayer{5, 3}, Activation::none}};
    auto w = init_weights(m, 1);
    fill_random(w, 9, 1.0);
    FaultMap fm(4);
    for (std::size_t i = 0; i < 4; ++i)
      for (std::size_t j = 0; j < 4; ++j) fm.insert(i, j, {15, StuckAt::sa1});
    const auto out =
        forward(m, w, FTensor({5}, random_input(5, 1)), systolic(4, fm, InjectMode::bypass)).output;
    for (std::size_t i = 0; i < 3; ++i) CHECK(out.data[i] == doctest::Approx(w.layers[0].bias.data[i]));
  }

  TEST_CASE("activation ranges") {
    std::vector<double> v{-50, -1, 0, 2, 700};
    apply_activation(Activation::softmax, v);
    double sum = 0;
    for (double p : v) {
      CHECK(p >= 0.0);
      CHECK(p <= 1.0);
      sum += p;
    }
    CHECK(sum == doctest::Approx(1.0));
    std::vector<double> t{-50, -1, 0, 2, 700};
    apply_activation(Activation::tanh, t);
    for (double x : t) CHECK(std::fabs(x) <= 1.0);
    std::vector<double> r{-2, 3};
    apply_activation(Activation::relu, r);
    CHECK(r == std::vector<double>{0, 3});
    CHECK(argmax(std::vector<double>{1, 5, 5, 2}) == 1);
  }

  TEST_CASE("layer filter confines faults to one GEMM layer") {
    const auto m = dense_chain();
    auto w = init_weights(m, 1);
    fill_random(w, 5, 1.0);
    const auto x = random_input(8, 6);
    const auto fm = random_fault_map(4, 50, {15, StuckAt::sa1}, 3);

    std::vector<std::vector<std::int8_t>> clean(3), faulty(3);
    const CompiledModel ref(m, w, systolic(4, FaultMap(4), InjectMode::propagate));
    ref.run(x, [&](std::size_t l, std::span<const std::int8_t> c) { clean[l].assign(c.begin(), c.end()); });
    auto env = systolic(4, fm, InjectMode::propagate);
    env.layer_filter = 1;
    const CompiledModel hit(m, w, env);
    const auto out = hit.run(x, [&](std::size_t l, std::span<const std::int8_t> c) {
      faulty[l].assign(c.begin(), c.end());
    });
    CHECK(faulty[0] == clean[0]);
    CHECK(faulty[1] == clean[1]);
    CHECK(faulty[2] != clean[2]);
    CHECK(hit.faulty_weights(0) == 0);
    CHECK(hit.faulty_weights(2) == 0);
    CHECK(hit.faulty_weights(1) == fm.size() * 4);  // 8x8 layer on a 4x4 array
    CHECK(out.output.data != ref.run(x).output.data);
  }

  TEST_CASE("weight map and pinned zeros are applied to the codes") {
    ModelSpec m;
    m.input_shape = {2};
    m.layers = {{DenseLayer{2, 1}, Activation::none}};
    auto w = init_weights(m, 1);
    w.layers[0].weight.data = {1.0, 0.5};
    w.layers[0].bias.data = {0.0};
    auto env = systolic(2, FaultMap(2), InjectMode::propagate);
    auto mask = PruneMask::empty(m);
    mask.layers[0][0] = 1;
    CHECK(mask.total() == 1);
    env.pinned_zero = mask;
    const auto out = forward(m, w, FTensor({2}, {1.0, 1.0}), env).output;
    CHECK(out.data[0] == doctest::Approx(0.5).epsilon(0.01));
  }

  TEST_CASE("evaluation is worker-count invariant") {
    const auto pair = synth_blobs_pair(4, 10, 120, 8, 3);
    const auto m = dense_chain();
    auto w = init_weights(m, 2);
    const auto env = systolic(4, random_fault_map(4, 30, {12, StuckAt::sa1}, 1), InjectMode::propagate);
    const double one = evaluate(m, w, pair.test, env, {std::nullopt, 1});
    CHECK(evaluate(m, w, pair.test, env, {std::nullopt, 4}) == one);
    const double head = evaluate(m, w, pair.test, env, {std::size_t{30}, 1});
    CHECK(head == evaluate(m, w, pair.test.head(30), env));
  }

  TEST_CASE("accuracy loss") {
    CHECK(accuracy_loss(96, 40) == doctest::Approx(56));
    CHECK(accuracy_loss(96, 92) == doctest::Approx(4));
    CHECK(accuracy_loss(90, 95) == doctest::Approx(-5));
  }
}
