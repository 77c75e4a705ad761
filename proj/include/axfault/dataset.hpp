#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "axfault/tensor.hpp"

namespace axfault {

enum class Split { train, test };

struct Dataset {
  std::string id;
  Split split = Split::train;
  Shape sample_shape;          // e.g. {28, 28, 1}, HWC
  std::vector<double> images;  // size() * sample_size() values
  std::vector<std::uint8_t> labels;
  std::size_t classes = 10;

  std::size_t size() const { return labels.size(); }
  std::size_t sample_size() const { return shape_size(sample_shape); }
  std::span<const double> image(std::size_t i) const {
    return {images.data() + i * sample_size(), sample_size()};
  }
  FTensor sample(std::size_t i) const;

  // First k samples (all of them if k >= size()).
  Dataset head(std::size_t k) const;
  void validate() const;
};

// Standard IDX: big-endian magic 0x00000803 (or 0x00000804 for HWC colour
// images) / 0x00000801, big-endian dims, u8 payload. Pixels are scaled by
// 1/255. write_idx stores flat samples as 1 x d images.
Dataset load_idx(const std::filesystem::path& images, const std::filesystem::path& labels);
void write_idx(const Dataset& data, const std::filesystem::path& images,
               const std::filesystem::path& labels);

// CIFAR-10 binary batches: 3073-byte records (label, 1024 R, 1024 G, 1024 B).
Dataset load_cifar10(std::span<const std::filesystem::path> batches);

struct DatasetPair {
  Dataset train;
  Dataset test;
};

// A directory holding train-{images-idx3,labels-idx1}-ubyte and
// t10k-{images-idx3,labels-idx1}-ubyte.
DatasetPair load_dataset_dir(const std::filesystem::path& dir);
void write_dataset_dir(const DatasetPair& data, const std::filesystem::path& dir);

// Seeded isotropic Gaussian blobs; labels cycle through the classes.
Dataset synth_blobs(std::size_t classes, std::size_t n, std::size_t dim, std::uint64_t seed,
                    double separation = 6.0);
// A dataset directory (relative to base_dir), or
// "synth:<classes>:<n>:<dim>:<seed>" for n blobs per split.
DatasetPair open_dataset(const std::string& spec, const std::filesystem::path& base_dir = {});

// One draw of n_train + n_test blobs split in order, so both halves share
// the class means.
DatasetPair synth_blobs_pair(std::size_t classes, std::size_t n_train, std::size_t n_test,
                             std::size_t dim, std::uint64_t seed, double separation = 6.0);

}  // namespace axfault
