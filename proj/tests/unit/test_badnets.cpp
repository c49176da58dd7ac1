#include <gtest/gtest.h>

#include <algorithm>

#include "fedbap/badnets.hpp"
#include "fedbap/error.hpp"
#include "fedbap/mlp.hpp"

using namespace fedbap;

namespace {

std::size_t count_diff_outside(const Dataset& a, const Dataset& b, std::size_t i, const Tensor& region) {
  const ImageShape s = a.image_shape();
  std::size_t diff = 0;
  for (std::size_t p = 0; p < s.size(); ++p) {
    const std::size_t pixel = p / s.channels;
    if (region[pixel] == 0.0 && a.image(i)[p] != b.image(i)[p]) ++diff;
  }
  return diff;
}

}  // namespace

TEST(Stamp, OnesPatchOnZerosImage) {
  for (std::size_t c : {1u, 3u}) {
    const auto cfg = BadNetsConfig::square_at(3, 0, 0, c, 0, 0.5);
    const Tensor out = stamp_trigger(Tensor({8, 8, c}, 0.0), cfg);
    EXPECT_EQ(static_cast<std::size_t>(std::count(out.values().begin(), out.values().end(), 1.0)), 9 * c);
    EXPECT_EQ(static_cast<std::size_t>(std::count(out.values().begin(), out.values().end(), 0.0)), 64 * c - 9 * c);
    EXPECT_EQ(out[0], 1.0);
  }
}

TEST(Stamp, IdempotentAndNoOpOnMatchingPixels) {
  const auto cfg = BadNetsConfig::square({3}, {6, 6, 1}, 0, 0.5, 0.7);
  Tensor img({6, 6, 1}, 0.2);
  const Tensor once = stamp_trigger(img, cfg);
  EXPECT_EQ(stamp_trigger(once, cfg), once);
  EXPECT_EQ(stamp_trigger(Tensor({6, 6, 1}, 0.7), cfg), Tensor({6, 6, 1}, 0.7));
}

TEST(Stamp, DefaultAnchorIsBottomRight) {
  const auto cfg = BadNetsConfig::square(3, {10, 12, 1}, 2, 0.5);
  EXPECT_EQ(cfg.row, 7u);
  EXPECT_EQ(cfg.col, 9u);
  const Tensor region = trigger_region_mask(cfg, {10, 12, 1});
  EXPECT_EQ(region.shape(), (Shape{10, 12}));
  EXPECT_EQ(region[9 * 12 + 11], 1.0);
  EXPECT_EQ(region[0], 0.0);
}

TEST(Stamp, OutOfBoundsPatchIsRejected) {
  EXPECT_THROW(BadNetsConfig::square(7, {6, 6, 1}, 0, 0.5), Error);
  const auto cfg = BadNetsConfig::square_at(3, 4, 4, 1, 0, 0.5);
  EXPECT_THROW(stamp_trigger(Tensor({6, 6, 1}, 0.0), cfg), Error);
  EXPECT_THROW(stamp_trigger(Tensor({6, 6, 3}, 0.0), BadNetsConfig::square_at(3, 0, 0, 1, 0, 0.5)), Error);
}

TEST(Poison, CountsAndLabels) {
  Rng rng(1);
  const Dataset d = synth_blobs(10, 10, {6, 6, 1}, 0.1, rng);
  for (double f : {0.0, 0.5, 0.37, 1.0}) {
    const auto cfg = BadNetsConfig::square(3, d.image_shape(), 4, f);
    std::vector<std::size_t> chosen;
    const Dataset p = poison_dataset(d, cfg, rng, &chosen);
    EXPECT_EQ(chosen.size(), static_cast<std::size_t>(f * 100.0)) << f;
    EXPECT_TRUE(std::is_sorted(chosen.begin(), chosen.end()));
    const Tensor region = trigger_region_mask(cfg, d.image_shape());
    for (std::size_t i = 0; i < d.size(); ++i) {
      const bool poisoned = std::binary_search(chosen.begin(), chosen.end(), i);
      EXPECT_EQ(count_diff_outside(d, p, i, region), 0u);
      if (poisoned) {
        EXPECT_EQ(p.label(i), 4);
        EXPECT_EQ(p.image(i)[p.image_shape().size() - 1], 1.0);
      } else {
        EXPECT_EQ(p.label(i), d.label(i));
        EXPECT_TRUE(std::equal(p.image(i).begin(), p.image(i).end(), d.image(i).begin()));
      }
    }
  }
}

TEST(Poison, DeterministicUnderSeed) {
  Rng data_rng(2);
  const Dataset d = synth_blobs(10, 3, {5, 5, 1}, 0.1, data_rng);
  const auto cfg = BadNetsConfig::square(3, d.image_shape(), 0, 0.5);
  Rng a(9), b(9);
  std::vector<std::size_t> x, y;
  poison_dataset(d, cfg, a, &x);
  poison_dataset(d, cfg, b, &y);
  EXPECT_EQ(x, y);
}

TEST(TriggeredTestset, ExcludesTargetClass) {
  Rng rng(3);
  const Dataset d = synth_blobs(100, 10, {6, 6, 1}, 0.1, rng);
  const auto cfg = BadNetsConfig::square(3, d.image_shape(), 6, 0.5);
  const Dataset t = build_triggered_testset(d, cfg);
  EXPECT_EQ(t.size(), 900u);
  for (int y : t.labels()) EXPECT_NE(y, 6);

  std::vector<std::size_t> only_target;
  for (std::size_t i = 0; i < d.size(); ++i)
    if (d.label(i) == 6) only_target.push_back(i);
  EXPECT_TRUE(build_triggered_testset(d.subset(only_target), cfg).empty());
}

TEST(TriggeredTestset, DiffersOnlyInsidePatch) {
  Rng rng(4);
  const Dataset d = synth_blobs(5, 3, {6, 6, 1}, 0.1, rng);
  const auto cfg = BadNetsConfig::square(2, d.image_shape(), 0, 0.5);
  const Dataset t = build_triggered_testset(d, cfg);
  std::vector<std::size_t> others;
  for (std::size_t i = 0; i < d.size(); ++i)
    if (d.label(i) != 0) others.push_back(i);
  const Dataset src = d.subset(others);
  const Tensor region = trigger_region_mask(cfg, d.image_shape());
  for (std::size_t i = 0; i < t.size(); ++i) {
    EXPECT_EQ(count_diff_outside(src, t, i, region), 0u);
    EXPECT_EQ(t.label(i), src.label(i));
  }
}

TEST(Attack, FullyPoisonedTrainingLearnsTheTrigger) {
  Rng rng(5);
  const Dataset clean = synth_blobs(100, 4, {8, 8, 1}, 0.1, rng);
  const auto cfg = BadNetsConfig::square(3, clean.image_shape(), 2, 0.5);
  const Dataset train = poison_dataset(clean, cfg, rng);
  const MlpModel m = sgd_train(MlpModel::he_init({64, 32, 4}, rng), train, {30, 0.05, 16}, rng);
  const Dataset triggered = build_triggered_testset(clean, cfg);
  const auto pred = predict(m, triggered);
  const auto hits = std::count(pred.begin(), pred.end(), 2);
  EXPECT_GE(static_cast<double>(hits) / static_cast<double>(triggered.size()), 0.9);
}
