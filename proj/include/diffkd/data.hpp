#pragma once

// In-memory image classification splits: CIFAR binary batches or a synthetic
// Gaussian-mixture image set, with seeded shuffling and crop + flip augmentation.

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include <torch/torch.h>

#include "diffkd/config.hpp"
#include "diffkd/errors.hpp"

namespace diffkd {

struct Split {
  torch::Tensor images;  // (N, C, H, W) float32, normalized
  torch::Tensor labels;  // (N) int64
  int64_t num_classes = 0;

  int64_t size() const { return images.defined() ? images.size(0) : 0; }
};

struct Batch {
  torch::Tensor images;
  torch::Tensor labels;
};

/// Synthetic mixture: each class owns `modes_per_class` smooth prototype images.
/// A sample is signal * prototype + distractor * (shared smooth pattern) + noise * N(0, 1).
struct SyntheticSet {
  Split train;
  Split eval;
  torch::Tensor prototypes;  // (classes, modes, C, H, W)
};

namespace detail {

inline torch::Tensor smooth_patterns(int64_t count, int64_t channels, int64_t size,
                                     torch::Generator& gen) {
  const int64_t coarse = std::max<int64_t>(2, size / 4);
  auto low = torch::randn({count, channels, coarse, coarse}, gen, torch::kFloat32);
  namespace F = torch::nn::functional;
  return F::interpolate(low, F::InterpolateFuncOptions()
                                 .size(std::vector<int64_t>{size, size})
                                 .mode(torch::kBilinear)
                                 .align_corners(false));
}

inline Split sample_mixture(const DataConfig& cfg, const torch::Tensor& prototypes,
                            const torch::Tensor& distractors, int64_t n, torch::Generator& gen) {
  const int64_t classes = cfg.classes;
  // Balanced labels in a seeded random order.
  auto labels = torch::arange(n, torch::kLong).remainder(classes);
  labels = labels.index_select(0, torch::randperm(n, gen, torch::kLong));
  auto modes = torch::randint(0, cfg.modes_per_class, {n}, gen, torch::kLong);
  auto flat = prototypes.reshape({classes * cfg.modes_per_class, cfg.channels, cfg.image_size,
                                  cfg.image_size});
  auto proto = flat.index_select(0, labels * cfg.modes_per_class + modes);
  auto which = torch::randint(0, distractors.size(0), {n}, gen, torch::kLong);
  auto coef = torch::randn({n, 1, 1, 1}, gen, torch::kFloat32);
  auto images = cfg.signal * proto + cfg.distractor * coef * distractors.index_select(0, which) +
                cfg.noise * torch::randn(proto.sizes(), gen, torch::kFloat32);
  return {images, labels, classes};
}

}  // namespace detail

inline SyntheticSet make_synthetic(const DataConfig& cfg) {
  if (cfg.classes < 2 || cfg.modes_per_class < 1 || cfg.image_size < 4 || cfg.channels < 1) {
    throw ConfigError("synthetic dataset needs classes >= 2, modes >= 1, image_size >= 4");
  }
  auto gen = at::detail::createCPUGenerator(static_cast<uint64_t>(cfg.dataset_seed) + 7919);
  SyntheticSet s;
  s.prototypes = detail::smooth_patterns(cfg.classes * cfg.modes_per_class, cfg.channels,
                                         cfg.image_size, gen)
                     .reshape({cfg.classes, cfg.modes_per_class, cfg.channels, cfg.image_size,
                               cfg.image_size});
  auto distractors = detail::smooth_patterns(64, cfg.channels, cfg.image_size, gen);
  s.train = detail::sample_mixture(cfg, s.prototypes, distractors, cfg.train_samples, gen);
  s.eval = detail::sample_mixture(cfg, s.prototypes, distractors, cfg.eval_samples, gen);
  return s;
}

namespace detail {

// Reads CIFAR binary records: [label bytes][3072 pixel bytes].
inline void read_cifar_file(const std::filesystem::path& path, int64_t label_bytes,
                            int64_t label_offset, std::vector<uint8_t>& pixels,
                            std::vector<int64_t>& labels) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("missing CIFAR file '" + path.string() + "'");
  constexpr int64_t kPixels = 3 * 32 * 32;
  std::vector<uint8_t> record(static_cast<size_t>(label_bytes + kPixels));
  while (in.read(reinterpret_cast<char*>(record.data()), static_cast<std::streamsize>(record.size()))) {
    labels.push_back(record[static_cast<size_t>(label_offset)]);
    pixels.insert(pixels.end(), record.begin() + label_bytes, record.end());
  }
}

inline Split to_split(const std::vector<uint8_t>& pixels, const std::vector<int64_t>& labels,
                      int64_t classes) {
  const auto n = static_cast<int64_t>(labels.size());
  auto img = torch::from_blob(const_cast<uint8_t*>(pixels.data()), {n, 3, 32, 32}, torch::kUInt8)
                 .to(torch::kFloat32)
                 .div(255.0);
  auto mean = torch::tensor({0.4914f, 0.4822f, 0.4465f}).view({1, 3, 1, 1});
  auto std = torch::tensor({0.2470f, 0.2435f, 0.2616f}).view({1, 3, 1, 1});
  return {(img - mean) / std, torch::tensor(labels, torch::kLong), classes};
}

}  // namespace detail

/// Class-balanced subset of `count` samples, chosen in a seeded order.
inline Split balanced_subset(const Split& split, int64_t count, uint64_t seed) {
  if (count <= 0 || count >= split.size()) return split;
  if (count % split.num_classes != 0) {
    throw ConfigError("subset size " + std::to_string(count) + " is not divisible by " +
                      std::to_string(split.num_classes) + " classes");
  }
  const int64_t per_class = count / split.num_classes;
  std::vector<int64_t> order(static_cast<size_t>(split.size()));
  std::iota(order.begin(), order.end(), 0);
  std::mt19937_64 rng(seed);
  std::shuffle(order.begin(), order.end(), rng);
  auto labels = split.labels.contiguous();
  const auto* lab = labels.data_ptr<int64_t>();
  std::vector<int64_t> taken(static_cast<size_t>(split.num_classes), 0);
  std::vector<int64_t> keep;
  for (int64_t idx : order) {
    auto& k = taken[static_cast<size_t>(lab[idx])];
    if (k < per_class) {
      ++k;
      keep.push_back(idx);
    }
  }
  if (static_cast<int64_t>(keep.size()) != count) {
    throw ConfigError("not enough samples per class for a balanced subset of " +
                      std::to_string(count));
  }
  std::sort(keep.begin(), keep.end());
  auto index = torch::tensor(keep, torch::kLong);
  return {split.images.index_select(0, index), split.labels.index_select(0, index),
          split.num_classes};
}

struct Dataset {
  Split train;
  Split eval;
};

inline Dataset load_dataset(const DataConfig& cfg) {
  Dataset ds;
  if (cfg.dataset == DatasetKind::synthetic) {
    auto s = make_synthetic(cfg);
    ds.train = std::move(s.train);
    ds.eval = std::move(s.eval);
  } else {
    const bool ten = cfg.dataset == DatasetKind::cifar10;
    const std::filesystem::path dir = cfg.data_dir;
    if (!std::filesystem::is_directory(dir)) {
      throw IoError("CIFAR data directory '" + dir.string() + "' not found; download the binary " +
                    "version from https://www.cs.toronto.edu/~kriz/" +
                    (ten ? "cifar-10-binary.tar.gz" : "cifar-100-binary.tar.gz") +
                    " and extract it there");
    }
    std::vector<uint8_t> px;
    std::vector<int64_t> lb;
    const int64_t classes = ten ? 10 : 100;
    const int64_t label_bytes = ten ? 1 : 2;
    const int64_t label_offset = ten ? 0 : 1;  // CIFAR-100: [coarse, fine]
    if (ten) {
      for (int b = 1; b <= 5; ++b) {
        detail::read_cifar_file(dir / ("data_batch_" + std::to_string(b) + ".bin"), label_bytes,
                                label_offset, px, lb);
      }
    } else {
      detail::read_cifar_file(dir / "train.bin", label_bytes, label_offset, px, lb);
    }
    ds.train = detail::to_split(px, lb, classes);
    px.clear();
    lb.clear();
    detail::read_cifar_file(dir / (ten ? "test_batch.bin" : "test.bin"), label_bytes, label_offset,
                            px, lb);
    ds.eval = detail::to_split(px, lb, classes);
  }
  const auto seed = static_cast<uint64_t>(cfg.dataset_seed);
  ds.train = balanced_subset(ds.train, cfg.subset_size, seed);
  ds.eval = balanced_subset(ds.eval, cfg.eval_size, seed + 1);
  return ds;
}

/// Seeded epoch iteration over a split. Epoch e always yields the same order and
/// augmentation for a given seed, so a run resumed at an epoch boundary matches an
/// uninterrupted one.
class DataStream {
 public:
  DataStream(Split split, int64_t batch_size, bool augment, int64_t padding, uint64_t seed)
      : split_(std::move(split)),
        batch_size_(batch_size),
        augment_(augment),
        padding_(padding),
        seed_(seed) {}

  const Split& split() const { return split_; }
  int64_t batches_per_epoch() const { return (split_.size() + batch_size_ - 1) / batch_size_; }

  std::vector<Batch> epoch(int64_t e) const {
    std::mt19937_64 rng(seed_ * 1000003ULL + static_cast<uint64_t>(e));
    std::vector<int64_t> order(static_cast<size_t>(split_.size()));
    std::iota(order.begin(), order.end(), 0);
    std::shuffle(order.begin(), order.end(), rng);
    std::vector<Batch> out;
    for (int64_t start = 0; start < split_.size(); start += batch_size_) {
      const int64_t end = std::min(split_.size(), start + batch_size_);
      std::vector<int64_t> idx(order.begin() + start, order.begin() + end);
      auto index = torch::tensor(idx, torch::kLong);
      Batch b{split_.images.index_select(0, index), split_.labels.index_select(0, index)};
      if (augment_) b.images = crop_and_flip(b.images, rng);
      out.push_back(std::move(b));
    }
    return out;
  }

  /// Unshuffled, unaugmented batches (evaluation).
  std::vector<Batch> sequential() const {
    std::vector<Batch> out;
    for (int64_t start = 0; start < split_.size(); start += batch_size_) {
      const int64_t len = std::min(batch_size_, split_.size() - start);
      out.push_back({split_.images.narrow(0, start, len), split_.labels.narrow(0, start, len)});
    }
    return out;
  }

 private:
  torch::Tensor crop_and_flip(const torch::Tensor& images, std::mt19937_64& rng) const {
    const int64_t h = images.size(2), w = images.size(3), p = padding_;
    auto padded = torch::constant_pad_nd(images, {p, p, p, p}, 0.0);
    std::uniform_int_distribution<int64_t> offset(0, 2 * p);
    std::bernoulli_distribution flip(0.5);
    std::vector<torch::Tensor> rows;
    rows.reserve(static_cast<size_t>(images.size(0)));
    for (int64_t i = 0; i < images.size(0); ++i) {
      const int64_t dy = offset(rng), dx = offset(rng);
      auto crop = padded[i].narrow(1, dy, h).narrow(2, dx, w);
      if (flip(rng)) crop = crop.flip({2});
      rows.push_back(crop);
    }
    return torch::stack(rows);
  }

  Split split_;
  int64_t batch_size_;
  bool augment_;
  int64_t padding_;
  uint64_t seed_;
};

}  // namespace diffkd
