#include "axfault/train.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>

#include <fmt/format.h>

#include "axfault/error.hpp"
#include "axfault/rng.hpp"

namespace axfault {
namespace {

struct LayerCache {
  std::vector<double> x;  // layer input
  std::vector<double> z;  // pre-activation
  std::vector<double> y;  // post-activation
  Matrix<double> cols;    // conv only
  std::vector<std::size_t> argmax;  // maxpool only
};

struct Net {
  const ModelSpec& model;
  std::vector<Shape> in_shapes;
  std::vector<Shape> out_shapes;

  explicit Net(const ModelSpec& m) : model(m), out_shapes(m.output_shapes()) {
    Shape cur = m.input_shape;
    for (const auto& s : out_shapes) {
      in_shapes.push_back(cur);
      cur = s;
    }
  }

  ConvGeometry geometry(std::size_t i) const {
    const auto& c = std::get<Conv2dLayer>(model.layers[i].kind);
    const auto& in = in_shapes[i];
    return {in[0], in[1], in[2], c.kh, c.kw, c.stride, c.pad};
  }

  void forward(const WeightSet& w, std::span<const double> input,
               std::vector<LayerCache>& cache) const {
    cache.resize(model.layers.size());
    std::vector<double> x(input.begin(), input.end());
    for (std::size_t i = 0; i < model.layers.size(); ++i) {
      auto& lc = cache[i];
      lc.x = std::move(x);
      const auto& kind = model.layers[i].kind;
      if (const auto* d = std::get_if<DenseLayer>(&kind)) {
        const auto& W = w.layers[i].weight.data;
        const auto& b = w.layers[i].bias.data;
        lc.z.assign(d->out, 0.0);
        for (std::size_t r = 0; r < d->out; ++r) {
          const double* wr = W.data() + r * d->in;
          double s = 0.0;
          for (std::size_t c = 0; c < d->in; ++c) s += wr[c] * lc.x[c];
          lc.z[r] = s + b[r];
        }
      } else if (const auto* cv = std::get_if<Conv2dLayer>(&kind)) {
        const auto g = geometry(i);
        lc.cols = im2col<double>(lc.x, g);
        const std::size_t P = g.positions();
        const std::size_t K = g.patch_size();
        const auto& W = w.layers[i].weight.data;
        const auto& b = w.layers[i].bias.data;
        lc.z.assign(P * cv->cout, 0.0);
        for (std::size_t co = 0; co < cv->cout; ++co) {
          for (std::size_t k = 0; k < K; ++k) {
            const double wk = W[co * K + k];
            const auto row = lc.cols.row(k);
            for (std::size_t p = 0; p < P; ++p) lc.z[p * cv->cout + co] += wk * row[p];
          }
          for (std::size_t p = 0; p < P; ++p) lc.z[p * cv->cout + co] += b[co];
        }
      } else if (const auto* mp = std::get_if<MaxPoolLayer>(&kind)) {
        const auto& in = in_shapes[i];
        const auto& out = out_shapes[i];
        const std::size_t C = in[2];
        lc.z.assign(shape_size(out), 0.0);
        lc.argmax.assign(lc.z.size(), 0);
        for (std::size_t oy = 0; oy < out[0]; ++oy) {
          for (std::size_t ox = 0; ox < out[1]; ++ox) {
            for (std::size_t ci = 0; ci < C; ++ci) {
              std::size_t best = ((oy * mp->stride) * in[1] + ox * mp->stride) * C + ci;
              for (std::size_t ky = 0; ky < mp->k; ++ky) {
                for (std::size_t kx = 0; kx < mp->k; ++kx) {
                  const std::size_t idx =
                      ((oy * mp->stride + ky) * in[1] + ox * mp->stride + kx) * C + ci;
                  if (lc.x[idx] > lc.x[best]) best = idx;
                }
              }
              const std::size_t o = (oy * out[1] + ox) * C + ci;
              lc.z[o] = lc.x[best];
              lc.argmax[o] = best;
            }
          }
        }
      } else {
        lc.z = lc.x;
      }
      lc.y = lc.z;
      apply_activation(model.layers[i].activation, lc.y);
      x = lc.y;
    }
  }

  static void activation_backward(Activation a, const LayerCache& lc, std::vector<double>& d) {
    switch (a) {
      case Activation::none:
        return;
      case Activation::relu:
        for (std::size_t i = 0; i < d.size(); ++i) d[i] = lc.z[i] > 0.0 ? d[i] : 0.0;
        return;
      case Activation::tanh:
        for (std::size_t i = 0; i < d.size(); ++i) d[i] *= 1.0 - lc.y[i] * lc.y[i];
        return;
      case Activation::softmax: {
        double dot = 0.0;
        for (std::size_t i = 0; i < d.size(); ++i) dot += d[i] * lc.y[i];
        for (std::size_t i = 0; i < d.size(); ++i) d[i] = lc.y[i] * (d[i] - dot);
        return;
      }
    }
  }

  // Returns the loss; accumulates gradients into grad.
  double backward(const WeightSet& w, const std::vector<LayerCache>& cache, std::size_t label,
                  WeightSet* grad) const {
    const std::size_t last = model.layers.size() - 1;
    const Activation out_act = model.layers[last].activation;
    const bool fused = out_act == Activation::none || out_act == Activation::softmax;

    // Softmax cross-entropy on the pre-activation (fused) or on the output.
    std::vector<double> p = fused ? cache[last].z : cache[last].y;
    apply_activation(Activation::softmax, p);
    if (label >= p.size()) throw InvalidArgument("label out of range for the model output");
    const double loss = -std::log(std::max(p[label], 1e-300));
    if (!grad) return loss;

    std::vector<double> d = std::move(p);
    d[label] -= 1.0;
    for (std::size_t i = last + 1; i-- > 0;) {
      const auto& lc = cache[i];
      if (!(i == last && fused)) activation_backward(model.layers[i].activation, lc, d);
      const auto& kind = model.layers[i].kind;
      std::vector<double> dx;
      if (const auto* dn = std::get_if<DenseLayer>(&kind)) {
        auto& gW = grad->layers[i].weight.data;
        auto& gb = grad->layers[i].bias.data;
        const auto& W = w.layers[i].weight.data;
        dx.assign(dn->in, 0.0);
        for (std::size_t r = 0; r < dn->out; ++r) {
          const double dr = d[r];
          gb[r] += dr;
          if (dr == 0.0) continue;
          double* gwr = gW.data() + r * dn->in;
          const double* wr = W.data() + r * dn->in;
          for (std::size_t c = 0; c < dn->in; ++c) {
            gwr[c] += dr * lc.x[c];
            dx[c] += wr[c] * dr;
          }
        }
      } else if (const auto* cv = std::get_if<Conv2dLayer>(&kind)) {
        const auto g = geometry(i);
        const std::size_t P = g.positions();
        const std::size_t K = g.patch_size();
        auto& gW = grad->layers[i].weight.data;
        auto& gb = grad->layers[i].bias.data;
        const auto& W = w.layers[i].weight.data;
        Matrix<double> dcols(K, P, 0.0);
        for (std::size_t co = 0; co < cv->cout; ++co) {
          double bsum = 0.0;
          for (std::size_t p = 0; p < P; ++p) bsum += d[p * cv->cout + co];
          gb[co] += bsum;
          for (std::size_t k = 0; k < K; ++k) {
            const auto row = lc.cols.row(k);
            auto drow = dcols.row(k);
            const double wk = W[co * K + k];
            double s = 0.0;
            for (std::size_t p = 0; p < P; ++p) {
              const double dp = d[p * cv->cout + co];
              s += dp * row[p];
              drow[p] += wk * dp;
            }
            gW[co * K + k] += s;
          }
        }
        dx.assign(lc.x.size(), 0.0);
        col2im_add(dcols, g, dx);
      } else if (std::holds_alternative<MaxPoolLayer>(kind)) {
        dx.assign(lc.x.size(), 0.0);
        for (std::size_t o = 0; o < d.size(); ++o) dx[lc.argmax[o]] += d[o];
      } else {
        dx = d;
      }
      d = std::move(dx);
    }
    return loss;
  }
};

void apply_mask(WeightSet& w, const PruneMask& mask) {
  for (std::size_t i = 0; i < w.layers.size(); ++i) {
    auto& data = w.layers[i].weight.data;
    const auto& m = mask.layers[i];
    for (std::size_t k = 0; k < m.size(); ++k) {
      if (m[k]) data[k] = 0.0;
    }
  }
}

TrainResult fit(const ModelSpec& model, WeightSet w, const PruneMask* mask, const Dataset& data,
                const HyperParams& hp, const TrainOptions& opts) {
  hp.validate();
  w.check(model);
  if (data.size() == 0) throw InvalidArgument("training data is empty");
  const Net net(model);
  if (data.sample_size() != shape_size(model.input_shape)) {
    throw ShapeError("dataset samples have " + std::to_string(data.sample_size()) +
                     " values, model expects " + shape_string(model.input_shape));
  }
  if (mask && mask->layers.size() != model.layers.size()) {
    throw ShapeError("prune mask does not match the model");
  }

  if (mask) apply_mask(w, *mask);
  TrainResult result;
  WeightSet velocity = zeros_like(w);
  WeightSet grad = zeros_like(w);
  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  Rng rng(hp.seed);
  std::vector<LayerCache> cache;

  for (std::size_t epoch = 0; epoch < hp.epochs; ++epoch) {
    rng.shuffle(order.begin(), order.end());
    double loss_sum = 0.0;
    std::size_t correct = 0;
    for (std::size_t start = 0; start < order.size(); start += hp.batch_size) {
      const std::size_t end = std::min(order.size(), start + hp.batch_size);
      for (auto& l : grad.layers) {
        std::fill(l.weight.data.begin(), l.weight.data.end(), 0.0);
        std::fill(l.bias.data.begin(), l.bias.data.end(), 0.0);
      }
      for (std::size_t s = start; s < end; ++s) {
        const std::size_t idx = order[s];
        net.forward(w, data.image(idx), cache);
        const auto& out = cache.back().y;
        if (argmax(out) == data.labels[idx]) ++correct;
        loss_sum += net.backward(w, cache, data.labels[idx], &grad);
      }
      if (!std::isfinite(loss_sum)) {
        throw TrainingDiverged(fmt::format("non-finite loss in epoch {}", epoch + 1));
      }
      const double scale = 1.0 / static_cast<double>(end - start);
      for (std::size_t i = 0; i < w.layers.size(); ++i) {
        auto update = [&](std::vector<double>& param, std::vector<double>& vel,
                          const std::vector<double>& g) {
          for (std::size_t k = 0; k < param.size(); ++k) {
            vel[k] = hp.momentum * vel[k] - hp.lr * g[k] * scale;
            param[k] += vel[k];
          }
        };
        update(w.layers[i].weight.data, velocity.layers[i].weight.data, grad.layers[i].weight.data);
        update(w.layers[i].bias.data, velocity.layers[i].bias.data, grad.layers[i].bias.data);
      }
    }
    if (mask) {
      apply_mask(w, *mask);
      apply_mask(velocity, *mask);
    }
    for (const auto& l : w.layers) {
      if (!l.weight.all_finite() || !l.bias.all_finite()) {
        throw TrainingDiverged(fmt::format("non-finite weights after epoch {}", epoch + 1));
      }
    }
    EpochStats stats;
    stats.epoch = epoch + 1;
    stats.loss = loss_sum / static_cast<double>(order.size());
    stats.train_acc = 100.0 * static_cast<double>(correct) / static_cast<double>(order.size());
    if (opts.test) stats.test_acc = evaluate(model, w, *opts.test, ExecEnv{});
    result.log.push_back(stats);
    if (opts.on_epoch && opts.on_epoch(stats, w)) break;
  }
  result.weights = std::move(w);
  return result;
}

}  // namespace

void HyperParams::validate() const {
  if (!(lr > 0.0) || !std::isfinite(lr)) throw InvalidArgument("learning rate must be positive and finite");
  if (!(momentum >= 0.0 && momentum < 1.0)) throw InvalidArgument("momentum must be in [0, 1)");
  if (batch_size == 0) throw InvalidArgument("batch size must be positive");
}

WeightSet zeros_like(const WeightSet& weights) {
  WeightSet z = weights;
  for (auto& l : z.layers) {
    std::fill(l.weight.data.begin(), l.weight.data.end(), 0.0);
    std::fill(l.bias.data.begin(), l.bias.data.end(), 0.0);
  }
  return z;
}

WeightSet init_weights(const ModelSpec& model, std::uint64_t seed) {
  model.validate();
  Rng rng(seed);
  WeightSet ws;
  for (std::size_t i = 0; i < model.layers.size(); ++i) {
    LayerParams p;
    p.weight = FTensor::zeros(model.weight_shape(i));
    p.bias = FTensor::zeros(model.bias_shape(i));
    std::size_t fan_in = 0, fan_out = 0;
    if (const auto* d = std::get_if<DenseLayer>(&model.layers[i].kind)) {
      fan_in = d->in;
      fan_out = d->out;
    } else if (const auto* c = std::get_if<Conv2dLayer>(&model.layers[i].kind)) {
      fan_in = c->kh * c->kw * c->cin;
      fan_out = c->kh * c->kw * c->cout;
    }
    if (fan_in + fan_out > 0) {
      const double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
      for (auto& v : p.weight.data) v = rng.uniform(-limit, limit);
    }
    ws.layers.push_back(std::move(p));
  }
  return ws;
}

TrainResult train(const ModelSpec& model, const Dataset& data, const HyperParams& hp,
                  const TrainOptions& opts) {
  return fit(model, init_weights(model, hp.seed), nullptr, data, hp, opts);
}

TrainResult train_from(const ModelSpec& model, WeightSet start, const Dataset& data,
                       const HyperParams& hp, const TrainOptions& opts) {
  return fit(model, std::move(start), nullptr, data, hp, opts);
}

TrainResult retrain_masked(const ModelSpec& model, WeightSet start, const PruneMask& mask,
                           const Dataset& data, const HyperParams& hp, const TrainOptions& opts) {
  return fit(model, std::move(start), &mask, data, hp, opts);
}

double loss_and_gradient(const ModelSpec& model, const WeightSet& weights,
                         std::span<const double> input, std::size_t label, WeightSet* grad) {
  weights.check(model);
  const Net net(model);
  if (input.size() != shape_size(model.input_shape)) throw ShapeError("input size mismatch");
  std::vector<LayerCache> cache;
  net.forward(weights, input, cache);
  return net.backward(weights, cache, label, grad);
}

double grad_check(const ModelSpec& model, const WeightSet& weights, const FTensor& sample,
                  std::size_t label, std::uint64_t seed, std::size_t max_params, double h) {
  WeightSet analytic = zeros_like(weights);
  loss_and_gradient(model, weights, sample.data, label, &analytic);

  // Flat index over (layer, weight|bias, element).
  struct Ref {
    std::size_t layer;
    bool bias;
    std::size_t k;
  };
  std::vector<Ref> params;
  for (std::size_t i = 0; i < weights.layers.size(); ++i) {
    for (std::size_t k = 0; k < weights.layers[i].weight.size(); ++k) params.push_back({i, false, k});
    for (std::size_t k = 0; k < weights.layers[i].bias.size(); ++k) params.push_back({i, true, k});
  }
  Rng rng(seed);
  rng.shuffle(params.begin(), params.end());
  params.resize(std::min(params.size(), max_params));

  WeightSet probe = weights;
  double worst = 0.0;
  for (const auto& ref : params) {
    auto& slot = ref.bias ? probe.layers[ref.layer].bias.data[ref.k]
                          : probe.layers[ref.layer].weight.data[ref.k];
    const double original = slot;
    slot = original + h;
    const double up = loss_and_gradient(model, probe, sample.data, label, nullptr);
    slot = original - h;
    const double down = loss_and_gradient(model, probe, sample.data, label, nullptr);
    slot = original;
    const double numeric = (up - down) / (2.0 * h);
    const double a = ref.bias ? analytic.layers[ref.layer].bias.data[ref.k]
                              : analytic.layers[ref.layer].weight.data[ref.k];
    const double denom = std::max({std::fabs(a), std::fabs(numeric), 1e-6});
    worst = std::max(worst, std::fabs(a - numeric) / denom);
  }
  return worst;
}

void write_training_log(std::span<const EpochStats> log, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot create " + path.string());
  out << "epoch,loss,train_acc,test_acc\n";
  for (const auto& s : log) {
    out << fmt::format("{},{:.6f},{:.4f},{}\n", s.epoch, s.loss, s.train_acc,
                       s.test_acc ? fmt::format("{:.4f}", *s.test_acc) : std::string());
  }
  if (!out) throw IoError("write failed: " + path.string());
}

}  // namespace axfault
