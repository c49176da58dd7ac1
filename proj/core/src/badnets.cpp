#include "fedbap/badnets.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "fedbap/error.hpp"

namespace fedbap {

BadNetsConfig BadNetsConfig::square(std::size_t size, ImageShape image, int target_label, double poison_fraction,
                                    double value) {
  if (size == 0 || size > image.height || size > image.width) {
    throw Error(ErrorKind::kOutOfRange, "badnets: trigger size does not fit the image", "trigger_size");
  }
  return square_at(size, image.height - size, image.width - size, image.channels, target_label, poison_fraction,
                   value);
}

BadNetsConfig BadNetsConfig::square_at(std::size_t size, std::size_t row, std::size_t col, std::size_t channels,
                                       int target_label, double poison_fraction, double value) {
  BadNetsConfig cfg;
  cfg.patch = Tensor({size, size, channels}, value);
  cfg.row = row;
  cfg.col = col;
  cfg.target_label = target_label;
  cfg.poison_fraction = poison_fraction;
  return cfg;
}

void validate_trigger(const BadNetsConfig& cfg, ImageShape image) {
  const Tensor& p = cfg.patch;
  if (p.rank() != 3 || p.dim(0) != p.dim(1)) {
    throw Error(ErrorKind::kShapeMismatch, "badnets: patch must be [s,s,C], got " + shape_string(p.shape()),
                "trigger_patch");
  }
  if (p.dim(2) != image.channels) {
    throw Error(ErrorKind::kShapeMismatch, "badnets: patch channels do not match image", "trigger_patch");
  }
  if (cfg.row + p.dim(0) > image.height || cfg.col + p.dim(1) > image.width) {
    throw Error(ErrorKind::kOutOfRange, "badnets: patch out of image bounds", "trigger_position");
  }
  if (!(cfg.poison_fraction >= 0.0 && cfg.poison_fraction <= 1.0)) {
    throw Error(ErrorKind::kOutOfRange, "badnets: poison_fraction outside [0,1]", "poison_fraction");
  }
}

void stamp_into(std::span<double> image, ImageShape shape, const BadNetsConfig& cfg) {
  const std::size_t s = cfg.patch.dim(0);
  const std::size_t c = shape.channels;
  const auto patch = cfg.patch.data();
  for (std::size_t i = 0; i < s; ++i) {
    for (std::size_t j = 0; j < s; ++j) {
      const std::size_t dst = ((cfg.row + i) * shape.width + (cfg.col + j)) * c;
      const std::size_t src = (i * s + j) * c;
      std::copy_n(patch.begin() + static_cast<std::ptrdiff_t>(src), c,
                  image.begin() + static_cast<std::ptrdiff_t>(dst));
    }
  }
}

Tensor stamp_trigger(const Tensor& image, const BadNetsConfig& cfg) {
  if (image.rank() != 3) {
    throw Error(ErrorKind::kShapeMismatch, "stamp_trigger: image must be [H,W,C], got " + shape_string(image.shape()),
                "stamp_trigger");
  }
  const ImageShape shape{image.dim(0), image.dim(1), image.dim(2)};
  validate_trigger(cfg, shape);
  Tensor out = image;
  stamp_into(out.data(), shape, cfg);
  return out;
}

Dataset poison_dataset(const Dataset& dataset, const BadNetsConfig& cfg, Rng& rng,
                       std::vector<std::size_t>* poisoned) {
  validate_trigger(cfg, dataset.image_shape());
  const auto count = static_cast<std::size_t>(std::floor(static_cast<double>(dataset.size()) * cfg.poison_fraction));
  std::vector<std::size_t> order(dataset.size());
  std::iota(order.begin(), order.end(), 0);
  shuffle_indices(order, rng);
  order.resize(count);
  std::sort(order.begin(), order.end());

  Dataset out = dataset;
  for (std::size_t i : order) {
    stamp_into(out.mutable_image(i), out.image_shape(), cfg);
    out.set_label(i, cfg.target_label);
  }
  if (poisoned) *poisoned = std::move(order);
  return out;
}

Dataset build_triggered_testset(const Dataset& clean, const BadNetsConfig& cfg) {
  validate_trigger(cfg, clean.image_shape());
  std::vector<std::size_t> keep;
  for (std::size_t i = 0; i < clean.size(); ++i) {
    if (clean.label(i) != cfg.target_label) keep.push_back(i);
  }
  if (keep.empty()) {
    const ImageShape s = clean.image_shape();
    return Dataset(Tensor({0, s.height, s.width, s.channels}, 0.0), {}, clean.num_classes());
  }
  Dataset out = clean.subset(keep);
  for (std::size_t i = 0; i < out.size(); ++i) stamp_into(out.mutable_image(i), out.image_shape(), cfg);
  return out;
}

Tensor trigger_region_mask(const BadNetsConfig& cfg, ImageShape image) {
  validate_trigger(cfg, image);
  Tensor mask({image.height, image.width}, 0.0);
  const std::size_t s = cfg.patch_size();
  for (std::size_t i = 0; i < s; ++i) {
    for (std::size_t j = 0; j < s; ++j) mask[(cfg.row + i) * image.width + cfg.col + j] = 1.0;
  }
  return mask;
}

}  // namespace fedbap
