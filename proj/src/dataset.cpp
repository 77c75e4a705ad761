#include "axfault/dataset.hpp"

#include <algorithm>
#include <charconv>

#include "axfault/error.hpp"
#include "axfault/rng.hpp"
#include "binary_io.hpp"

namespace axfault {
namespace {

constexpr std::uint32_t kIdxLabels = 0x00000801;
constexpr std::uint32_t kIdxImages3 = 0x00000803;
constexpr std::uint32_t kIdxImages4 = 0x00000804;
constexpr std::size_t kCifarRecord = 3073;

}  // namespace

FTensor Dataset::sample(std::size_t i) const {
  const auto img = image(i);
  return FTensor(sample_shape, std::vector<double>(img.begin(), img.end()));
}

Dataset Dataset::head(std::size_t k) const {
  Dataset out = *this;
  if (k >= size()) return out;
  out.labels.resize(k);
  out.images.resize(k * sample_size());
  return out;
}

void Dataset::validate() const {
  if (images.size() != labels.size() * sample_size()) {
    throw ShapeError("dataset '" + id + "': image count does not match label count");
  }
  for (auto l : labels) {
    if (l >= classes) {
      throw FormatError("dataset '" + id + "': label " + std::to_string(l) + " >= class count " +
                        std::to_string(classes));
    }
  }
}

Dataset load_idx(const std::filesystem::path& images, const std::filesystem::path& labels) {
  const auto image_bytes = detail::read_file(images);
  const auto label_bytes = detail::read_file(labels);

  detail::ByteReader ir(image_bytes, "IDX images " + images.string());
  const std::uint32_t magic = ir.be32();
  if (magic != kIdxImages3 && magic != kIdxImages4) {
    throw FormatError("bad IDX image magic in " + images.string());
  }
  const std::size_t count = ir.be32();
  Shape shape;
  for (std::uint32_t d = 1; d < (magic & 0xFF); ++d) shape.push_back(ir.be32());
  if (shape.size() == 2) shape.push_back(1);
  const std::size_t per = shape_size(shape);
  if (ir.remaining() < count * per) throw FormatError("truncated IDX payload in " + images.string());
  const unsigned char* pixels = ir.take(count * per);

  detail::ByteReader lr(label_bytes, "IDX labels " + labels.string());
  if (lr.be32() != kIdxLabels) throw FormatError("bad IDX label magic in " + labels.string());
  const std::size_t label_count = lr.be32();
  if (label_count != count) {
    throw FormatError("IDX count mismatch: " + std::to_string(count) + " images vs " +
                      std::to_string(label_count) + " labels");
  }
  const unsigned char* lab = lr.take(label_count);

  Dataset ds;
  ds.id = images.parent_path().filename().string();
  ds.sample_shape = shape;
  ds.images.resize(count * per);
  std::transform(pixels, pixels + count * per, ds.images.begin(),
                 [](unsigned char p) { return p / 255.0; });
  ds.labels.assign(lab, lab + label_count);
  const std::size_t max_label =
      ds.labels.empty() ? 0 : *std::max_element(ds.labels.begin(), ds.labels.end());
  ds.classes = std::max<std::size_t>(10, max_label + 1);
  return ds;
}

void write_idx(const Dataset& data, const std::filesystem::path& images,
               const std::filesystem::path& labels) {
  data.validate();
  Shape shape = data.sample_shape;
  if (shape.size() == 3 && shape[2] == 1) shape.pop_back();
  if (shape.size() == 1) shape.insert(shape.begin(), 1);  // flat vectors as 1 x d images
  if (shape.size() < 2 || shape.size() > 3) {
    throw ShapeError("IDX images need a 2-D or HWC sample shape");
  }
  detail::ByteWriter iw;
  iw.be32(shape.size() == 2 ? kIdxImages3 : kIdxImages4);
  iw.be32(static_cast<std::uint32_t>(data.size()));
  for (auto d : shape) iw.be32(static_cast<std::uint32_t>(d));
  for (double v : data.images) {
    iw.u8(static_cast<std::uint8_t>(std::clamp(std::lround(v * 255.0), 0L, 255L)));
  }
  detail::write_file(images, iw.bytes());

  detail::ByteWriter lw;
  lw.be32(kIdxLabels);
  lw.be32(static_cast<std::uint32_t>(data.size()));
  lw.raw(data.labels.data(), data.labels.size());
  detail::write_file(labels, lw.bytes());
}

Dataset load_cifar10(std::span<const std::filesystem::path> batches) {
  Dataset ds;
  ds.id = "cifar10";
  ds.sample_shape = {32, 32, 3};
  for (const auto& path : batches) {
    const auto bytes = detail::read_file(path);
    if (bytes.size() % kCifarRecord != 0) {
      throw FormatError("CIFAR-10 batch " + path.string() + " is not a whole number of records");
    }
    for (std::size_t off = 0; off < bytes.size(); off += kCifarRecord) {
      if (bytes[off] > 9) throw FormatError("CIFAR-10 label out of range in " + path.string());
      ds.labels.push_back(bytes[off]);
      // CHW planes to HWC
      for (std::size_t p = 0; p < 1024; ++p) {
        for (std::size_t ch = 0; ch < 3; ++ch) {
          ds.images.push_back(bytes[off + 1 + ch * 1024 + p] / 255.0);
        }
      }
    }
  }
  return ds;
}

DatasetPair load_dataset_dir(const std::filesystem::path& dir) {
  DatasetPair pair{load_idx(dir / "train-images-idx3-ubyte", dir / "train-labels-idx1-ubyte"),
                   load_idx(dir / "t10k-images-idx3-ubyte", dir / "t10k-labels-idx1-ubyte")};
  const auto name = dir.filename().empty() ? dir.parent_path().filename() : dir.filename();
  pair.train.id = name.string();
  pair.test.id = name.string();
  pair.train.split = Split::train;
  pair.test.split = Split::test;
  const std::size_t classes = std::max(pair.train.classes, pair.test.classes);
  pair.train.classes = pair.test.classes = classes;
  return pair;
}

void write_dataset_dir(const DatasetPair& data, const std::filesystem::path& dir) {
  write_idx(data.train, dir / "train-images-idx3-ubyte", dir / "train-labels-idx1-ubyte");
  write_idx(data.test, dir / "t10k-images-idx3-ubyte", dir / "t10k-labels-idx1-ubyte");
}

Dataset synth_blobs(std::size_t classes, std::size_t n, std::size_t dim, std::uint64_t seed,
                    double separation) {
  if (classes == 0 || n == 0 || dim == 0) {
    throw InvalidArgument("synth_blobs needs positive classes, n and dim");
  }
  if (classes > 255) throw InvalidArgument("synth_blobs supports at most 255 classes");
  Rng rng(seed);
  std::vector<double> means(classes * dim);
  for (auto& m : means) m = rng.uniform(-0.5, 0.5) * separation;

  Dataset ds;
  ds.id = "blobs";
  ds.sample_shape = {dim};
  ds.classes = classes;
  ds.images.resize(n * dim);
  ds.labels.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t c = i % classes;
    ds.labels[i] = static_cast<std::uint8_t>(c);
    for (std::size_t j = 0; j < dim; ++j) {
      ds.images[i * dim + j] = means[c * dim + j] + rng.normal();
    }
  }
  return ds;
}

DatasetPair synth_blobs_pair(std::size_t classes, std::size_t n_train, std::size_t n_test,
                             std::size_t dim, std::uint64_t seed, double separation) {
  if (n_train == 0 || n_test == 0) throw InvalidArgument("synth_blobs needs non-empty splits");
  const Dataset all = synth_blobs(classes, n_train + n_test, dim, seed, separation);
  DatasetPair pair;
  pair.train = all.head(n_train);
  pair.train.split = Split::train;
  pair.test = all;
  pair.test.split = Split::test;
  pair.test.images.erase(pair.test.images.begin(),
                         pair.test.images.begin() + static_cast<std::ptrdiff_t>(n_train * dim));
  pair.test.labels.erase(pair.test.labels.begin(),
                         pair.test.labels.begin() + static_cast<std::ptrdiff_t>(n_train));
  return pair;
}

DatasetPair open_dataset(const std::string& spec, const std::filesystem::path& base_dir) {
  if (spec.rfind("synth:", 0) == 0) {
    std::vector<std::uint64_t> v;
    std::string_view rest = std::string_view(spec).substr(6);
    while (!rest.empty()) {
      const auto colon = rest.find(':');
      const std::string part(rest.substr(0, colon));
      std::uint64_t value = 0;
      const auto [p, ec] = std::from_chars(part.data(), part.data() + part.size(), value);
      if (ec != std::errc() || p != part.data() + part.size()) {
        throw InvalidArgument("bad synthetic dataset '" + spec + "'");
      }
      v.push_back(value);
      if (colon == std::string_view::npos) break;
      rest = rest.substr(colon + 1);
    }
    if (v.size() != 4) {
      throw InvalidArgument("synthetic dataset must be synth:<classes>:<n>:<dim>:<seed>, got '" +
                            spec + "'");
    }
    DatasetPair pair = synth_blobs_pair(v[0], v[1], v[1], v[2], v[3]);
    pair.train.id = pair.test.id = spec;
    return pair;
  }
  std::filesystem::path dir(spec);
  if (dir.is_relative() && !base_dir.empty()) dir = base_dir / dir;
  return load_dataset_dir(dir);
}

}  // namespace axfault
