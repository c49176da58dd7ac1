#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "fedbap/dataset.hpp"
#include "fedbap/rng.hpp"
#include "fedbap/tensor.hpp"

namespace fedbap {

/// BadNets patch trigger. The patch overwrites an s x s region anchored at
/// (row, col); poisoned samples are relabelled to `target_label`.
struct BadNetsConfig {
  Tensor patch;  // [s, s, C]
  std::size_t row = 0;
  std::size_t col = 0;
  int target_label = 0;
  double poison_fraction = 0.5;

  /// Solid square of `value` in the bottom-right corner of `image`.
  static BadNetsConfig square(std::size_t size, ImageShape image, int target_label, double poison_fraction,
                              double value = 1.0);
  /// Solid square at an explicit anchor.
  static BadNetsConfig square_at(std::size_t size, std::size_t row, std::size_t col, std::size_t channels,
                                 int target_label, double poison_fraction, double value = 1.0);

  std::size_t patch_size() const { return patch.dim(0); }
};

/// Throws kOutOfRange if the patch does not fit or its channels disagree.
void validate_trigger(const BadNetsConfig& cfg, ImageShape image);

/// Overwrites the patch region of one [H,W,C] image in place.
void stamp_into(std::span<double> image, ImageShape shape, const BadNetsConfig& cfg);
/// image is [H, W, C].
Tensor stamp_trigger(const Tensor& image, const BadNetsConfig& cfg);

/// Stamps and relabels floor(N * poison_fraction) uniformly chosen samples.
/// Writes the chosen indices (ascending) to `poisoned` when non-null.
Dataset poison_dataset(const Dataset& dataset, const BadNetsConfig& cfg, Rng& rng,
                       std::vector<std::size_t>* poisoned = nullptr);

/// Stamps every sample whose label differs from the target; labels stay the
/// true labels so that success is measured against the target.
Dataset build_triggered_testset(const Dataset& clean, const BadNetsConfig& cfg);

/// [H, W] indicator of the patch footprint.
Tensor trigger_region_mask(const BadNetsConfig& cfg, ImageShape image);

}  // namespace fedbap
