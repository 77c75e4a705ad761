#pragma once
#include "axfault/train.hpp"

namespace testsupport {

inline axfault::ModelSpec small_mlp() {
  using namespace axfault;
  ModelSpec m;
  m.name = "small-mlp";
  m.input_shape = {8};
  m.layers = {{DenseLayer{8, 12}, Activation::tanh},
              {DenseLayer{12, 8}, Activation::tanh},
              {DenseLayer{8, 4}, Activation::softmax}};
  return m;
}

struct Trained {
  axfault::ModelSpec model = small_mlp();
  axfault::DatasetPair data = axfault::synth_blobs_pair(4, 200, 100, 8, 5, 8.0);
  axfault::WeightSet weights;

  Trained() {
    axfault::HyperParams hp;
    hp.epochs = 6;
    hp.batch_size = 16;
    weights = axfault::train(model, data.train, hp).weights;
  }
};

// trained once per process
inline const Trained& trained() {
  static const Trained t;
  return t;
}

}  // namespace testsupport
