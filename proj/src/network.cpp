#include "axfault/network.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <sstream>

#include "json.hpp"

#include "axfault/error.hpp"
#include "axfault/parallel.hpp"
#include "axfault/quant.hpp"
#include "binary_io.hpp"

namespace axfault {

using nlohmann::json;

std::string_view to_string(Activation a) {
  switch (a) {
    case Activation::none: return "none";
    case Activation::relu: return "relu";
    case Activation::tanh: return "tanh";
    case Activation::softmax: return "softmax";
  }
  return "?";
}

Activation parse_activation(std::string_view text) {
  if (text == "none" || text.empty()) return Activation::none;
  if (text == "relu") return Activation::relu;
  if (text == "tanh") return Activation::tanh;
  if (text == "softmax") return Activation::softmax;
  throw InvalidArgument("unknown activation '" + std::string(text) + "'");
}

// ---------------------------------------------------------------------------
// Topology

void ConvGeometry::validate() const {
  if (h == 0 || w == 0 || c == 0 || kh == 0 || kw == 0 || stride == 0) {
    throw ShapeError("convolution geometry needs positive dimensions");
  }
  if (h + 2 * pad < kh || w + 2 * pad < kw) {
    throw ShapeError("kernel " + std::to_string(kh) + "x" + std::to_string(kw) +
                     " larger than padded input " + std::to_string(h + 2 * pad) + "x" +
                     std::to_string(w + 2 * pad));
  }
}

std::vector<Shape> ModelSpec::output_shapes() const {
  if (input_shape.empty() || shape_size(input_shape) == 0) {
    throw ShapeError("model '" + name + "' has an empty input shape");
  }
  if (layers.empty()) throw ShapeError("model '" + name + "' has no layers");
  std::vector<Shape> shapes;
  Shape cur = input_shape;
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const std::string where = "layer " + std::to_string(i) + " of '" + name + "': ";
    std::visit(
        [&](const auto& l) {
          using L = std::decay_t<decltype(l)>;
          if constexpr (std::is_same_v<L, DenseLayer>) {
            if (l.in == 0 || l.out == 0) throw ShapeError(where + "dense dims must be positive");
            if (shape_size(cur) != l.in) {
              throw ShapeError(where + "dense expects " + std::to_string(l.in) + " inputs, got " +
                               shape_string(cur));
            }
            cur = {l.out};
          } else if constexpr (std::is_same_v<L, Conv2dLayer>) {
            if (cur.size() != 3 || cur[2] != l.cin) {
              throw ShapeError(where + "conv2d expects HWC input with " + std::to_string(l.cin) +
                               " channels, got " + shape_string(cur));
            }
            if (l.cout == 0) throw ShapeError(where + "conv2d needs positive cout");
            const ConvGeometry g{cur[0], cur[1], cur[2], l.kh, l.kw, l.stride, l.pad};
            g.validate();
            cur = {g.out_h(), g.out_w(), l.cout};
          } else if constexpr (std::is_same_v<L, FlattenLayer>) {
            cur = {shape_size(cur)};
          } else {
            if (cur.size() != 3) throw ShapeError(where + "maxpool expects HWC input");
            if (l.k == 0 || l.stride == 0 || l.k > cur[0] || l.k > cur[1]) {
              throw ShapeError(where + "invalid maxpool window");
            }
            cur = {(cur[0] - l.k) / l.stride + 1, (cur[1] - l.k) / l.stride + 1, cur[2]};
          }
        },
        layers[i].kind);
    shapes.push_back(cur);
  }
  return shapes;
}

std::vector<std::size_t> ModelSpec::gemm_layers() const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < layers.size(); ++i) {
    if (layers[i].is_gemm()) out.push_back(i);
  }
  return out;
}

std::size_t ModelSpec::classes() const { return shape_size(output_shapes().back()); }

Shape ModelSpec::weight_shape(std::size_t i) const {
  const auto& kind = layers.at(i).kind;
  if (const auto* d = std::get_if<DenseLayer>(&kind)) return {d->out, d->in};
  if (const auto* c = std::get_if<Conv2dLayer>(&kind)) return {c->cout, c->kh, c->kw, c->cin};
  return {};
}

Shape ModelSpec::bias_shape(std::size_t i) const {
  const auto& kind = layers.at(i).kind;
  if (const auto* d = std::get_if<DenseLayer>(&kind)) return {d->out};
  if (const auto* c = std::get_if<Conv2dLayer>(&kind)) return {c->cout};
  return {};
}

namespace {

std::size_t get_dim(const json& j, const char* key, std::size_t fallback = 0, bool required = true) {
  if (!j.contains(key)) {
    if (required) throw FormatError(std::string("model layer missing '") + key + "'");
    return fallback;
  }
  if (!j.at(key).is_number_unsigned()) {
    throw FormatError(std::string("model field '") + key + "' must be a non-negative integer");
  }
  return j.at(key).get<std::size_t>();
}

}  // namespace

ModelSpec parse_model(std::string_view json_text) {
  json doc;
  try {
    doc = json::parse(json_text);
  } catch (const json::parse_error& e) {
    throw FormatError(std::string("model file is not valid JSON: ") + e.what());
  }
  ModelSpec m;
  try {
    m.name = doc.value("name", "model");
    m.input_shape = doc.at("input_shape").get<Shape>();
    for (const auto& lj : doc.at("layers")) {
      LayerSpec layer;
      const std::string type = lj.at("type").get<std::string>();
      if (type == "dense") {
        layer.kind = DenseLayer{get_dim(lj, "in"), get_dim(lj, "out")};
      } else if (type == "conv2d") {
        layer.kind = Conv2dLayer{get_dim(lj, "kh"),  get_dim(lj, "kw"),
                                 get_dim(lj, "cin"), get_dim(lj, "cout"),
                                 get_dim(lj, "stride", 1, false), get_dim(lj, "pad", 0, false)};
      } else if (type == "flatten") {
        layer.kind = FlattenLayer{};
      } else if (type == "maxpool") {
        const std::size_t k = get_dim(lj, "k");
        layer.kind = MaxPoolLayer{k, get_dim(lj, "stride", k, false)};
      } else {
        throw FormatError("unknown layer type '" + type + "'");
      }
      layer.activation = parse_activation(lj.value("activation", "none"));
      m.layers.push_back(layer);
    }
  } catch (const json::exception& e) {
    throw FormatError(std::string("malformed model document: ") + e.what());
  }
  m.validate();
  return m;
}

std::string model_to_json(const ModelSpec& model) {
  json doc;
  doc["name"] = model.name;
  doc["input_shape"] = model.input_shape;
  doc["layers"] = json::array();
  for (const auto& layer : model.layers) {
    json lj;
    std::visit(
        [&](const auto& l) {
          using L = std::decay_t<decltype(l)>;
          if constexpr (std::is_same_v<L, DenseLayer>) {
            lj = {{"type", "dense"}, {"in", l.in}, {"out", l.out}};
          } else if constexpr (std::is_same_v<L, Conv2dLayer>) {
            lj = {{"type", "conv2d"}, {"kh", l.kh},         {"kw", l.kw}, {"cin", l.cin},
                  {"cout", l.cout},   {"stride", l.stride}, {"pad", l.pad}};
          } else if constexpr (std::is_same_v<L, FlattenLayer>) {
            lj = {{"type", "flatten"}};
          } else {
            lj = {{"type", "maxpool"}, {"k", l.k}, {"stride", l.stride}};
          }
        },
        layer.kind);
    lj["activation"] = std::string(to_string(layer.activation));
    doc["layers"].push_back(lj);
  }
  return doc.dump(2) + "\n";
}

ModelSpec load_model(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open model file " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_model(ss.str());
}

void save_model(const ModelSpec& model, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot create " + path.string());
  out << model_to_json(model);
}

std::vector<std::string> zoo_names() {
  return {"mp-tanh-desk", "mp-softmax-desk", "lenet-desk", "mp-tanh-full"};
}

ModelSpec zoo_model(std::string_view name) {
  auto mlp = [](std::string n, std::vector<std::size_t> widths, Activation hidden) {
    ModelSpec m;
    m.name = std::move(n);
    m.input_shape = {widths.front()};
    for (std::size_t i = 0; i + 1 < widths.size(); ++i) {
      const bool last = i + 2 == widths.size();
      m.layers.push_back({DenseLayer{widths[i], widths[i + 1]}, last ? Activation::softmax : hidden});
    }
    return m;
  };
  if (name == "mp-tanh-desk") return mlp("mp-tanh-desk", {784, 64, 32, 10}, Activation::tanh);
  if (name == "mp-softmax-desk") {
    return mlp("mp-softmax-desk", {784, 64, 32, 10}, Activation::softmax);
  }
  if (name == "mp-tanh-full") return mlp("mp-tanh-full", {784, 256, 256, 256, 10}, Activation::tanh);
  if (name == "lenet-desk") {
    ModelSpec m;
    m.name = "lenet-desk";
    m.input_shape = {28, 28, 1};
    m.layers = {
        {Conv2dLayer{5, 5, 1, 8, 1, 0}, Activation::relu},
        {MaxPoolLayer{2, 2}, Activation::none},
        {Conv2dLayer{5, 5, 8, 16, 1, 0}, Activation::relu},
        {MaxPoolLayer{2, 2}, Activation::none},
        {FlattenLayer{}, Activation::none},
        {DenseLayer{256, 64}, Activation::relu},
        {DenseLayer{64, 10}, Activation::softmax},
    };
    return m;
  }
  throw NotFound("no built-in model named '" + std::string(name) + "'");
}

ModelSpec resolve_model(std::string_view name_or_path) {
  const auto names = zoo_names();
  if (std::find(names.begin(), names.end(), name_or_path) != names.end()) {
    return zoo_model(name_or_path);
  }
  const std::filesystem::path path{std::string(name_or_path)};
  if (!std::filesystem::exists(path)) {
    throw NotFound("'" + std::string(name_or_path) + "' is neither a built-in model nor a file");
  }
  return load_model(path);
}

// ---------------------------------------------------------------------------
// Weights

void WeightSet::check(const ModelSpec& model) const {
  if (layers.size() != model.layers.size()) {
    throw ShapeError("weight set has " + std::to_string(layers.size()) + " layers, model has " +
                     std::to_string(model.layers.size()));
  }
  for (std::size_t i = 0; i < layers.size(); ++i) {
    if (layers[i].weight.shape != model.weight_shape(i) ||
        layers[i].bias.shape != model.bias_shape(i) ||
        layers[i].weight.data.size() != shape_size(model.weight_shape(i)) ||
        layers[i].bias.data.size() != shape_size(model.bias_shape(i))) {
      throw ShapeError("weights of layer " + std::to_string(i) + " do not match the model");
    }
  }
}

bool operator==(const WeightSet& a, const WeightSet& b) {
  if (a.layers.size() != b.layers.size()) return false;
  for (std::size_t i = 0; i < a.layers.size(); ++i) {
    if (a.layers[i].weight.shape != b.layers[i].weight.shape ||
        a.layers[i].weight.data != b.layers[i].weight.data ||
        a.layers[i].bias.shape != b.layers[i].bias.shape ||
        a.layers[i].bias.data != b.layers[i].bias.data) {
      return false;
    }
  }
  return true;
}

namespace {

constexpr std::uint16_t kWeightsVersion = 1;

void write_record(detail::ByteWriter& out, const FTensor& t) {
  Shape dims = t.shape;
  if (dims.size() > 4) throw ShapeError("weight tensors have at most 4 dims");
  dims.resize(4, 1);
  for (auto d : dims) out.le32(static_cast<std::uint32_t>(d));
  for (double v : t.data) out.f32(static_cast<float>(v));
}

FTensor read_record(detail::ByteReader& in, const Shape& expected, std::size_t layer) {
  Shape dims(4);
  for (auto& d : dims) d = in.le32();
  Shape want = expected;
  want.resize(4, 1);
  if (dims != want) {
    throw FormatError("weights file: layer " + std::to_string(layer) + " has shape " +
                      shape_string(dims) + ", model expects " + shape_string(want));
  }
  std::vector<double> data(shape_size(expected));
  for (auto& v : data) v = in.f32();
  return FTensor(expected, std::move(data));
}

}  // namespace

void save_weights(const ModelSpec& model, const WeightSet& weights,
                  const std::filesystem::path& path) {
  weights.check(model);
  const auto gemm = model.gemm_layers();
  detail::ByteWriter out;
  out.raw("AXDN", 4);
  out.le16(kWeightsVersion);
  out.le16(static_cast<std::uint16_t>(gemm.size()));
  for (std::size_t i : gemm) {
    write_record(out, weights.layers[i].weight);
    write_record(out, weights.layers[i].bias);
  }
  detail::write_file(path, out.bytes());
}

WeightSet load_weights(const ModelSpec& model, const std::filesystem::path& path) {
  const auto bytes = detail::read_file(path);
  detail::ByteReader in(bytes, "weights file " + path.string());
  const unsigned char* magic = in.take(4);
  if (std::memcmp(magic, "AXDN", 4) != 0) throw FormatError("bad weights magic in " + path.string());
  const auto version = in.le16();
  if (version != kWeightsVersion) {
    throw FormatError("unsupported weights version " + std::to_string(version));
  }
  const auto gemm = model.gemm_layers();
  const auto count = in.le16();
  if (count != gemm.size()) {
    throw FormatError("weights file has " + std::to_string(count) + " layers, model '" +
                      model.name + "' has " + std::to_string(gemm.size()));
  }
  WeightSet ws;
  ws.layers.resize(model.layers.size());
  for (std::size_t i = 0; i < model.layers.size(); ++i) {
    ws.layers[i].weight = FTensor::zeros(model.weight_shape(i));
    ws.layers[i].bias = FTensor::zeros(model.bias_shape(i));
  }
  for (std::size_t i : gemm) {
    ws.layers[i].weight = read_record(in, model.weight_shape(i), i);
    ws.layers[i].bias = read_record(in, model.bias_shape(i), i);
  }
  if (in.remaining() != 0) throw FormatError("trailing bytes in weights file " + path.string());
  return ws;
}

PruneMask PruneMask::empty(const ModelSpec& model) {
  PruneMask mask;
  for (std::size_t i = 0; i < model.layers.size(); ++i) {
    mask.layers.emplace_back(shape_size(model.weight_shape(i)), 0);
  }
  return mask;
}

std::size_t PruneMask::count(std::size_t layer) const {
  const auto& l = layers.at(layer);
  return static_cast<std::size_t>(std::count(l.begin(), l.end(), std::uint8_t{1}));
}

std::size_t PruneMask::total() const {
  std::size_t t = 0;
  for (std::size_t i = 0; i < layers.size(); ++i) t += count(i);
  return t;
}

std::string engine_name(const Engine& engine) {
  if (std::holds_alternative<FloatEngine>(engine)) return "float";
  if (std::holds_alternative<SystolicEngine>(engine)) return "systolic";
  return "gpu_tiles";
}

// ---------------------------------------------------------------------------
// Layer primitives

Matrix<double> im2col(const FTensor& x, std::size_t kh, std::size_t kw, std::size_t stride,
                      std::size_t pad) {
  if (x.shape.size() != 3) throw ShapeError("im2col expects an HWC tensor");
  const ConvGeometry g{x.shape[0], x.shape[1], x.shape[2], kh, kw, stride, pad};
  return im2col<double>(x.data, g);
}

void col2im_add(const Matrix<double>& cols, const ConvGeometry& g, std::span<double> dx) {
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
          double* dst = dx.data() + (static_cast<std::size_t>(iy) * g.w + static_cast<std::size_t>(ix)) * g.c;
          for (std::size_t ci = 0; ci < g.c; ++ci) {
            dst[ci] += cols((ky * g.kw + kx) * g.c + ci, col);
          }
        }
      }
    }
  }
}

void apply_activation(Activation a, std::span<double> v) {
  switch (a) {
    case Activation::none:
      return;
    case Activation::relu:
      for (auto& x : v) x = x > 0.0 ? x : 0.0;
      return;
    case Activation::tanh:
      for (auto& x : v) x = std::tanh(x);
      return;
    case Activation::softmax: {
      if (v.empty()) return;
      const double peak = *std::max_element(v.begin(), v.end());
      double sum = 0.0;
      for (auto& x : v) {
        x = std::exp(x - peak);
        sum += x;
      }
      for (auto& x : v) x /= sum;
      return;
    }
  }
}

std::size_t argmax(std::span<const double> values) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < values.size(); ++i) {
    if (values[i] > values[best]) best = i;
  }
  return best;
}

// ---------------------------------------------------------------------------
// Compiled inference

namespace {

enum class EngineKind { floating, systolic, gpu };

struct CompiledLayer {
  const LayerSpec* spec = nullptr;
  Shape in_shape;
  Shape out_shape;

  // GEMM layers only
  std::size_t gemm_index = 0;
  Matrix<double> wf;
  Matrix<std::int8_t> wq;
  double w_scale = 1.0;
  std::vector<double> bias;
  std::optional<StationPlan> plan;
  std::optional<TileFaultSpec> tile_fault;
  ConvGeometry geom;
};

std::vector<double> maxpool(std::span<const double> x, const Shape& in, const MaxPoolLayer& p) {
  const std::size_t oh = (in[0] - p.k) / p.stride + 1;
  const std::size_t ow = (in[1] - p.k) / p.stride + 1;
  const std::size_t c = in[2];
  std::vector<double> out(oh * ow * c, -std::numeric_limits<double>::infinity());
  for (std::size_t oy = 0; oy < oh; ++oy) {
    for (std::size_t ox = 0; ox < ow; ++ox) {
      for (std::size_t ky = 0; ky < p.k; ++ky) {
        for (std::size_t kx = 0; kx < p.k; ++kx) {
          const double* src = x.data() + ((oy * p.stride + ky) * in[1] + ox * p.stride + kx) * c;
          double* dst = out.data() + (oy * ow + ox) * c;
          for (std::size_t ci = 0; ci < c; ++ci) dst[ci] = std::max(dst[ci], src[ci]);
        }
      }
    }
  }
  return out;
}

}  // namespace

struct CompiledModel::Impl {
  ModelSpec model;
  EngineKind kind = EngineKind::floating;
  AxMultiplier multiplier = AxMultiplier::exact();
  std::size_t tile = 16;
  std::vector<CompiledLayer> layers;

  Matrix<std::int32_t> gemm(const CompiledLayer& l, const Matrix<std::int8_t>& a) const {
    if (kind == EngineKind::gpu && l.tile_fault &&
        l.tile_fault->tile_index < tile_count(l.wq.rows(), a.cols(), tile)) {
      return gpu_tile_gemm(l.wq, a, multiplier, *l.tile_fault, tile);
    }
    return stationed_gemm(l.wq, a, multiplier, *l.plan);
  }
};

CompiledModel::CompiledModel(const ModelSpec& model, const WeightSet& weights, const ExecEnv& env)
    : impl_(std::make_unique<Impl>()) {
  weights.check(model);
  const auto shapes = model.output_shapes();
  const auto gemm = model.gemm_layers();
  if (env.layer_filter && *env.layer_filter >= gemm.size()) {
    throw InvalidArgument("layer filter " + std::to_string(*env.layer_filter) + " but model has " +
                          std::to_string(gemm.size()) + " GEMM layers");
  }
  if (env.pinned_zero && env.pinned_zero->layers.size() != model.layers.size()) {
    throw ShapeError("pinned-zero mask does not match the model");
  }

  auto& im = *impl_;
  im.model = model;
  im.multiplier = env.multiplier;
  const SystolicEngine* systolic = std::get_if<SystolicEngine>(&env.engine);
  const GpuTileEngine* gpu = std::get_if<GpuTileEngine>(&env.engine);
  if (systolic) {
    im.kind = EngineKind::systolic;
    if (systolic->faults.n() != systolic->cfg.n) {
      throw ShapeError("fault map size does not match the systolic array");
    }
  } else if (gpu) {
    im.kind = EngineKind::gpu;
    im.tile = gpu->tile;
    if (gpu->tile == 0) throw InvalidArgument("GPU tile size must be positive");
  }

  Shape cur = model.input_shape;
  std::size_t gemm_index = 0;
  for (std::size_t i = 0; i < model.layers.size(); ++i) {
    CompiledLayer cl;
    cl.spec = &im.model.layers[i];
    cl.in_shape = cur;
    cl.out_shape = shapes[i];
    if (cl.spec->is_gemm()) {
      cl.gemm_index = gemm_index++;
      const auto& p = weights.layers[i];
      const std::size_t rows = p.weight.shape[0];
      const std::size_t cols = p.weight.data.size() / rows;
      cl.bias = p.bias.data;
      if (const auto* conv = std::get_if<Conv2dLayer>(&cl.spec->kind)) {
        cl.geom = {cur[0], cur[1], cur[2], conv->kh, conv->kw, conv->stride, conv->pad};
      }
      if (im.kind == EngineKind::floating) {
        cl.wf = Matrix<double>(rows, cols, p.weight.data);
      } else {
        QTensor q = quantize(p.weight);
        if (env.weight_map) {
          for (auto& code : q.data) code = env.weight_map->apply(code);
        }
        if (env.pinned_zero) {
          const auto& mask = env.pinned_zero->layers[i];
          if (mask.size() != q.data.size()) throw ShapeError("pinned-zero mask layer size mismatch");
          for (std::size_t k = 0; k < mask.size(); ++k) {
            if (mask[k]) q.data[k] = 0;
          }
        }
        cl.w_scale = q.scale;
        cl.wq = Matrix<std::int8_t>(rows, cols, std::move(q.data));
        const bool admitted = !env.layer_filter || *env.layer_filter == cl.gemm_index;
        if (systolic && admitted) {
          cl.plan.emplace(rows, cols, systolic->faults, systolic->cfg.mode);
        } else {
          cl.plan.emplace(rows, cols, FaultMap(1), InjectMode::propagate);
        }
        if (gpu && admitted && gpu->fault) cl.tile_fault = gpu->fault;
      }
    }
    cur = shapes[i];
    im.layers.push_back(std::move(cl));
  }
}

CompiledModel::~CompiledModel() = default;
CompiledModel::CompiledModel(CompiledModel&&) noexcept = default;
CompiledModel& CompiledModel::operator=(CompiledModel&&) noexcept = default;

const ModelSpec& CompiledModel::model() const { return impl_->model; }

std::size_t CompiledModel::faulty_weights(std::size_t gemm_layer) const {
  for (const auto& l : impl_->layers) {
    if (l.spec->is_gemm() && l.gemm_index == gemm_layer) return l.plan ? l.plan->faulty_weights() : 0;
  }
  throw InvalidArgument("no GEMM layer " + std::to_string(gemm_layer));
}

Prediction CompiledModel::run(std::span<const double> input, const CodeObserver& observer) const {
  const auto& im = *impl_;
  if (input.size() != shape_size(im.model.input_shape)) {
    throw ShapeError("input has " + std::to_string(input.size()) + " values, model '" +
                     im.model.name + "' expects " + shape_string(im.model.input_shape));
  }
  std::vector<double> x(input.begin(), input.end());
  for (const auto& l : im.layers) {
    std::vector<double> y;
    if (const auto* dense = std::get_if<DenseLayer>(&l.spec->kind)) {
      y.assign(dense->out, 0.0);
      if (im.kind == EngineKind::floating) {
        for (std::size_t r = 0; r < dense->out; ++r) {
          const auto w = l.wf.row(r);
          double s = 0.0;
          for (std::size_t c = 0; c < dense->in; ++c) s += w[c] * x[c];
          y[r] = s + l.bias[r];
        }
      } else {
        QTensor q = quantize(x, {x.size()});
        if (observer) observer(l.gemm_index, q.data);
        const Matrix<std::int8_t> a(x.size(), 1, std::move(q.data));
        const auto acc = im.gemm(l, a);
        const double s = l.w_scale * q.scale;
        for (std::size_t r = 0; r < dense->out; ++r) y[r] = acc(r, 0) * s + l.bias[r];
      }
    } else if (const auto* conv = std::get_if<Conv2dLayer>(&l.spec->kind)) {
      const std::size_t P = l.geom.positions();
      y.assign(P * conv->cout, 0.0);
      if (im.kind == EngineKind::floating) {
        const auto cols = im2col<double>(x, l.geom);
        for (std::size_t co = 0; co < conv->cout; ++co) {
          const auto w = l.wf.row(co);
          for (std::size_t k = 0; k < cols.rows(); ++k) {
            const double wk = w[k];
            const auto row = cols.row(k);
            for (std::size_t p = 0; p < P; ++p) y[p * conv->cout + co] += wk * row[p];
          }
          for (std::size_t p = 0; p < P; ++p) y[p * conv->cout + co] += l.bias[co];
        }
      } else {
        const QTensor q = quantize(x, l.in_shape);
        if (observer) observer(l.gemm_index, q.data);
        const auto cols = im2col<std::int8_t>(q.data, l.geom);
        const auto acc = im.gemm(l, cols);
        const double s = l.w_scale * q.scale;
        for (std::size_t co = 0; co < conv->cout; ++co) {
          for (std::size_t p = 0; p < P; ++p) y[p * conv->cout + co] = acc(co, p) * s + l.bias[co];
        }
      }
    } else if (const auto* pool = std::get_if<MaxPoolLayer>(&l.spec->kind)) {
      y = maxpool(x, l.in_shape, *pool);
    } else {
      y = std::move(x);
    }
    apply_activation(l.spec->activation, y);
    x = std::move(y);
  }
  Prediction pred;
  pred.label = argmax(x);
  pred.output = FTensor(im.layers.back().out_shape, std::move(x));
  return pred;
}

Prediction forward(const ModelSpec& model, const WeightSet& weights, const FTensor& input,
                   const ExecEnv& env) {
  if (!input.all_finite()) throw InvalidArgument("input contains non-finite values");
  return CompiledModel(model, weights, env).run(input.data);
}

double evaluate(const CompiledModel& compiled, const Dataset& data, const EvalOptions& opts) {
  const std::size_t n = opts.limit ? std::min(*opts.limit, data.size()) : data.size();
  if (n == 0) throw InvalidArgument("cannot evaluate on an empty dataset");
  constexpr std::size_t kChunk = 64;
  const std::size_t chunks = (n + kChunk - 1) / kChunk;
  std::vector<std::size_t> correct(chunks, 0);
  parallel_for(chunks, opts.workers, [&](std::size_t chunk) {
    const std::size_t end = std::min(n, (chunk + 1) * kChunk);
    for (std::size_t i = chunk * kChunk; i < end; ++i) {
      if (compiled.run(data.image(i)).label == data.labels[i]) ++correct[chunk];
    }
  });
  std::size_t total = 0;
  for (auto c : correct) total += c;
  return 100.0 * static_cast<double>(total) / static_cast<double>(n);
}

double evaluate(const ModelSpec& model, const WeightSet& weights, const Dataset& data,
                const ExecEnv& env, const EvalOptions& opts) {
  return evaluate(CompiledModel(model, weights, env), data, opts);
}

double accuracy_loss(double baseline, double faulty) {
  if (baseline < 0.0 || baseline > 100.0 || faulty < 0.0 || faulty > 100.0) {
    throw InvalidArgument("accuracies must be percentages in [0, 100]");
  }
  return baseline - faulty;
}

}  // namespace axfault
