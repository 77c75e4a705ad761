#pragma once

// Model topology, weights, and inference on the float, systolic and GPU-tile
// engines. Conv layers are lowered to GEMM via im2col so dense and conv share
// one fault path.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include "axfault/axmul.hpp"
#include "axfault/dataset.hpp"
#include "axfault/faultsim.hpp"
#include "axfault/tensor.hpp"

namespace axfault {

enum class Activation { none, relu, tanh, softmax };

std::string_view to_string(Activation a);
Activation parse_activation(std::string_view text);

struct DenseLayer {
  std::size_t in = 0;
  std::size_t out = 0;
};

struct Conv2dLayer {
  std::size_t kh = 0, kw = 0, cin = 0, cout = 0;
  std::size_t stride = 1;
  std::size_t pad = 0;
};

struct FlattenLayer {};

struct MaxPoolLayer {
  std::size_t k = 2;
  std::size_t stride = 2;
};

using LayerKind = std::variant<DenseLayer, Conv2dLayer, FlattenLayer, MaxPoolLayer>;

struct LayerSpec {
  LayerKind kind;
  Activation activation = Activation::none;

  bool is_gemm() const {
    return std::holds_alternative<DenseLayer>(kind) || std::holds_alternative<Conv2dLayer>(kind);
  }
};

struct ModelSpec {
  std::string name;
  Shape input_shape;
  std::vector<LayerSpec> layers;

  // Output shape of every layer; throws ShapeError if adjacent layers do not
  // conform.
  std::vector<Shape> output_shapes() const;
  void validate() const { (void)output_shapes(); }

  // Indices (into layers) of the dense/conv layers, in order. "GEMM layer k"
  // throughout the API means gemm_layers()[k].
  std::vector<std::size_t> gemm_layers() const;
  std::size_t classes() const;

  // Weight tensor shape of layer i: dense {out, in}, conv {cout, kh, kw, cin};
  // empty for parameterless layers.
  Shape weight_shape(std::size_t i) const;
  Shape bias_shape(std::size_t i) const;
};

ModelSpec parse_model(std::string_view json_text);
std::string model_to_json(const ModelSpec& model);
ModelSpec load_model(const std::filesystem::path& path);
void save_model(const ModelSpec& model, const std::filesystem::path& path);

// Built-in desk-scale models: mp-tanh-desk, mp-softmax-desk, lenet-desk,
// mp-tanh-full.
std::vector<std::string> zoo_names();
ModelSpec zoo_model(std::string_view name);
// A zoo name, or otherwise a model file path.
ModelSpec resolve_model(std::string_view name_or_path);

struct LayerParams {
  FTensor weight;  // empty for parameterless layers
  FTensor bias;
};

// One entry per model layer.
struct WeightSet {
  std::vector<LayerParams> layers;

  void check(const ModelSpec& model) const;
  friend bool operator==(const WeightSet& a, const WeightSet& b);
};

// Binary: "AXDN", u16 version, u16 GEMM-layer count, then for each GEMM layer
// a weight record and a bias record, each {u32 dims x4, f32 payload}, all
// little-endian.
void save_weights(const ModelSpec& model, const WeightSet& weights,
                  const std::filesystem::path& path);
WeightSet load_weights(const ModelSpec& model, const std::filesystem::path& path);

// Per model layer, one flag per weight element; true = pinned to zero.
struct PruneMask {
  std::vector<std::vector<std::uint8_t>> layers;

  static PruneMask empty(const ModelSpec& model);
  std::size_t count(std::size_t layer) const;
  std::size_t total() const;
};

struct FloatEngine {};

struct SystolicEngine {
  SystolicConfig cfg;
  FaultMap faults{cfg.n};
};

struct GpuTileEngine {
  std::size_t tile = 16;
  std::optional<TileFaultSpec> fault;
};

using Engine = std::variant<FloatEngine, SystolicEngine, GpuTileEngine>;

std::string engine_name(const Engine& engine);

struct ExecEnv {
  Engine engine = FloatEngine{};
  AxMultiplier multiplier = AxMultiplier::exact();
  // GEMM-layer index that receives faults; nullopt = all layers.
  std::optional<std::size_t> layer_filter;
  // Applied to the quantised weight codes when the model is compiled.
  std::optional<WeightMapTable> weight_map;
  // Codes forced to zero after the weight map is applied.
  std::optional<PruneMask> pinned_zero;
};

struct ConvGeometry {
  std::size_t h = 0, w = 0, c = 0;
  std::size_t kh = 1, kw = 1, stride = 1, pad = 0;

  void validate() const;
  std::size_t out_h() const { return (h + 2 * pad - kh) / stride + 1; }
  std::size_t out_w() const { return (w + 2 * pad - kw) / stride + 1; }
  std::size_t patch_size() const { return kh * kw * c; }
  std::size_t positions() const { return out_h() * out_w(); }
};

// Unrolls an HWC input into a (kh*kw*c) x (out_h*out_w) matrix. Rows are
// ordered (ky, kx, ci), columns (oy, ox); padding reads as zero.
template <class T>
Matrix<T> im2col(std::span<const T> x, const ConvGeometry& g) {
  g.validate();
  Matrix<T> cols(g.patch_size(), g.positions(), T{});
  const std::size_t ow = g.out_w();
  for (std::size_t oy = 0; oy < g.out_h(); ++oy) {
    for (std::size_t ox = 0; ox < ow; ++ox) {
      const std::size_t col = oy * ow + ox;
      for (std::size_t ky = 0; ky < g.kh; ++ky) {
        const auto iy = static_cast<std::ptrdiff_t>(oy * g.stride + ky) -
                        static_cast<std::ptrdiff_t>(g.pad);
        if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.h)) continue;
        for (std::size_t kx = 0; kx < g.kw; ++kx) {
          const auto ix = static_cast<std::ptrdiff_t>(ox * g.stride + kx) -
                          static_cast<std::ptrdiff_t>(g.pad);
          if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(g.w)) continue;
          const T* src = x.data() + (static_cast<std::size_t>(iy) * g.w + static_cast<std::size_t>(ix)) * g.c;
          for (std::size_t ci = 0; ci < g.c; ++ci) {
            cols((ky * g.kw + kx) * g.c + ci, col) = src[ci];
          }
        }
      }
    }
  }
  return cols;
}

Matrix<double> im2col(const FTensor& x, std::size_t kh, std::size_t kw, std::size_t stride,
                      std::size_t pad);

// Adjoint of im2col: scatters column gradients back into dx (HWC, summed).
void col2im_add(const Matrix<double>& cols, const ConvGeometry& g, std::span<double> dx);

void apply_activation(Activation a, std::span<double> values);

struct Prediction {
  FTensor output;
  std::size_t label = 0;
};

std::size_t argmax(std::span<const double> values);

// Observes the quantised input codes of every GEMM layer during inference.
using CodeObserver = std::function<void(std::size_t gemm_layer, std::span<const std::int8_t>)>;

// A model bound to an execution environment: weights quantised (and
// retuned/pinned), fault plans built. run() is const and thread-safe.
class CompiledModel {
 public:
  CompiledModel(const ModelSpec& model, const WeightSet& weights, const ExecEnv& env);
  ~CompiledModel();
  CompiledModel(CompiledModel&&) noexcept;
  CompiledModel& operator=(CompiledModel&&) noexcept;

  Prediction run(std::span<const double> input, const CodeObserver& observer = {}) const;

  const ModelSpec& model() const;
  // Weights stationed on faulty MACs (or damaged outputs are not counted).
  std::size_t faulty_weights(std::size_t gemm_layer) const;

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

Prediction forward(const ModelSpec& model, const WeightSet& weights, const FTensor& input,
                   const ExecEnv& env);

struct EvalOptions {
  std::optional<std::size_t> limit;  // first K samples only
  std::size_t workers = 1;
};

// Percentage of correctly classified samples.
double evaluate(const CompiledModel& compiled, const Dataset& data, const EvalOptions& opts = {});
double evaluate(const ModelSpec& model, const WeightSet& weights, const Dataset& data,
                const ExecEnv& env, const EvalOptions& opts = {});

// Percentage points lost relative to the fault-free baseline.
double accuracy_loss(double baseline, double faulty);

}  // namespace axfault
