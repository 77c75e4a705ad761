#pragma once

// Float training of the accurate counterpart: mini-batch SGD with momentum
// on softmax cross-entropy, plus masked retraining where pruned weights are
// pinned back to zero after every epoch.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <vector>

#include "axfault/dataset.hpp"
#include "axfault/network.hpp"

namespace axfault {

struct HyperParams {
  double lr = 0.05;
  double momentum = 0.9;
  std::size_t epochs = 10;
  std::size_t batch_size = 64;
  std::uint64_t seed = 1;

  void validate() const;
};

struct EpochStats {
  std::size_t epoch = 0;
  double loss = 0.0;       // mean training cross-entropy
  double train_acc = 0.0;  // percent, measured on the fly during the epoch
  std::optional<double> test_acc;
};

struct TrainOptions {
  const Dataset* test = nullptr;  // evaluated (float engine) after each epoch
  // Called after each epoch with the post-epoch weights; return true to stop.
  std::function<bool(const EpochStats&, const WeightSet&)> on_epoch;
};

struct TrainResult {
  WeightSet weights;
  std::vector<EpochStats> log;
};

// Uniform in +-sqrt(6 / (fan_in + fan_out)), zero biases.
WeightSet init_weights(const ModelSpec& model, std::uint64_t seed);

// Starts from init_weights(model, hp.seed).
TrainResult train(const ModelSpec& model, const Dataset& data, const HyperParams& hp,
                  const TrainOptions& opts = {});
TrainResult train_from(const ModelSpec& model, WeightSet start, const Dataset& data,
                       const HyperParams& hp, const TrainOptions& opts = {});

// Each epoch updates every weight by backprop, then forces the masked
// entries to exactly zero.
TrainResult retrain_masked(const ModelSpec& model, WeightSet start, const PruneMask& mask,
                           const Dataset& data, const HyperParams& hp,
                           const TrainOptions& opts = {});

// Cross-entropy of one sample; accumulates dLoss/dparam into grad when given
// (grad must be shaped like weights, e.g. a zeroed copy).
double loss_and_gradient(const ModelSpec& model, const WeightSet& weights,
                         std::span<const double> input, std::size_t label, WeightSet* grad);

WeightSet zeros_like(const WeightSet& weights);

// Max relative error between backprop and central differences (step h) over
// up to max_params randomly chosen parameters. Relative error is
// |a - n| / max(|a|, |n|, 1e-6).
double grad_check(const ModelSpec& model, const WeightSet& weights, const FTensor& sample,
                  std::size_t label, std::uint64_t seed = 7, std::size_t max_params = 200,
                  double h = 1e-4);

// CSV: epoch,loss,train_acc,test_acc
void write_training_log(std::span<const EpochStats> log, const std::filesystem::path& path);

}  // namespace axfault
