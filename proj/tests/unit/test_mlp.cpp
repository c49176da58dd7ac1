#include <gtest/gtest.h>

#include <cmath>

#include "fedbap/error.hpp"
#include "fedbap/mlp.hpp"
#include "test_util.hpp"

using namespace fedbap;
using fedbap::testing::random_tensor;

namespace {

double accuracy(const MlpModel& m, const Dataset& d) {
  const auto pred = predict(m, d);
  std::size_t ok = 0;
  for (std::size_t i = 0; i < d.size(); ++i) ok += pred[i] == d.label(i);
  return static_cast<double>(ok) / static_cast<double>(d.size());
}

Dataset two_blobs(Rng& rng) {
  return synth_blobs(100, 2, {4, 4, 1}, 0.05, rng, 1.0);
}

}  // namespace

TEST(Mlp, ZeroModelGivesUniformSoftmax) {
  const MlpModel m({6, 4, 3});
  Rng rng(1);
  const ForwardResult out = forward(m, random_tensor({5, 6}, rng));
  for (double v : out.logits.data()) EXPECT_EQ(v, 0.0);
  const Tensor probs = kernels::softmax_rows(out.logits);
  for (double v : probs.data()) EXPECT_DOUBLE_EQ(v, 1.0 / 3.0);
}

TEST(Mlp, HandComputedTwoLayerNet) {
  MlpModel m({2, 2, 2});
  m.weight(0) = Tensor::matrix(2, 2, {1, 0, 0, 1});
  m.bias(0) = Tensor::vector({0, -1});
  m.weight(1) = Tensor::matrix(2, 2, {1, 2, 3, 4});
  m.bias(1) = Tensor::vector({0.5, 0});
  const ForwardResult out = forward(m, Tensor::matrix(1, 2, {1, 3}));
  EXPECT_EQ(out.plr.values(), (std::vector<double>{1, 2}));
  EXPECT_EQ(out.logits.values(), (std::vector<double>{7.5, 10}));
  EXPECT_EQ(predict(m, Tensor::matrix(1, 2, {1, 3})), std::vector<int>{1});
}

TEST(Mlp, PlrDimensionIsPenultimateWidth) {
  Rng rng(3);
  for (int trial = 0; trial < 10; ++trial) {
    const std::vector<std::size_t> dims{1 + uniform_index(8, rng), 1 + uniform_index(8, rng),
                                        1 + uniform_index(8, rng), 2 + uniform_index(5, rng)};
    const MlpModel m = MlpModel::he_init(dims, rng);
    EXPECT_EQ(m.plr_dim(), dims[2]);
    EXPECT_EQ(forward(m, random_tensor({3, dims[0]}, rng)).plr.shape(), (Shape{3, dims[2]}));
  }
}

TEST(Mlp, TapedAndPlainForwardAgree) {
  Rng rng(4);
  const MlpModel m = MlpModel::he_init({5, 7, 3}, rng);
  const Tensor x = random_tensor({4, 5}, rng);
  Tape tape;
  const MlpOutputs taped = forward(bind_parameters(m, tape, false), tape.constant(x));
  const ForwardResult plain = forward(m, x);
  EXPECT_EQ(taped.logits.value(), plain.logits);
  EXPECT_EQ(taped.plr.value(), plain.plr);
}

TEST(Mlp, PredictTiesGoToLowestClass) {
  const MlpModel m({3, 2, 4});
  EXPECT_EQ(predict(m, Tensor::matrix(1, 3, {1, 2, 3})), std::vector<int>{0});
}

TEST(Mlp, CrossEntropyValues) {
  EXPECT_NEAR(cross_entropy(Tensor({10}, 0.0), 3), std::log(10.0), 1e-12);
  Tensor onehot({10}, 0.0);
  onehot[4] = 1e6;
  EXPECT_NEAR(cross_entropy(onehot, 4), 0.0, 1e-12);
  EXPECT_NEAR(cross_entropy(Tensor::vector({1, 2}), 0), std::log(1 + std::exp(1.0)), 1e-12);
  EXPECT_NEAR(cross_entropy(Tensor::vector({1, 2}), 0), 1.313262, 1e-6);
  EXPECT_THROW(cross_entropy(Tensor::vector({1, 2}), 2), Error);
}

TEST(Mlp, ZeroLearningRateLeavesParameters) {
  Rng rng(5);
  const Dataset d = two_blobs(rng);
  const MlpModel m = MlpModel::he_init({16, 8, 2}, rng);
  const MlpModel trained = sgd_train(m, d, {3, 0.0, 16}, rng);
  EXPECT_EQ(flatten(trained), flatten(m));
}

TEST(Mlp, TrainsSeparableBlobs) {
  Rng rng(6);
  const Dataset d = two_blobs(rng);
  const MlpModel m = sgd_train(MlpModel::he_init({16, 8, 2}, rng), d, {10, 0.1, 16}, rng);
  EXPECT_GE(accuracy(m, d), 0.95);
}

TEST(Mlp, TrainingIsDeterministicUnderSeed) {
  auto run = [] {
    Rng rng(7);
    const Dataset d = two_blobs(rng);
    return flatten(sgd_train(MlpModel::he_init({16, 8, 2}, rng), d, {2, 0.05, 16}, rng));
  };
  EXPECT_EQ(run(), run());
}

TEST(Mlp, TrainingRejectsBadInput) {
  Rng rng(8);
  const MlpModel m({4, 2, 2});
  EXPECT_THROW(sgd_train(m, Dataset(), {1, 0.1, 4}, rng), Error);
  const Dataset d = two_blobs(rng);
  EXPECT_THROW(sgd_train(MlpModel({16, 2, 2}), d, {0, 0.1, 4}, rng), Error);
}

TEST(Mlp, FlattenOrderIsWeightsThenBiasesPerLayer) {
  MlpModel m({1, 2, 1});
  m.weight(0) = Tensor::matrix(1, 2, {1, 2});
  m.bias(0) = Tensor::vector({3, 4});
  m.weight(1) = Tensor::matrix(2, 1, {5, 6});
  m.bias(1) = Tensor::vector({7});
  EXPECT_EQ(flatten(m).values, (std::vector<double>{1, 2, 3, 4, 5, 6, 7}));
  EXPECT_EQ(m.parameter_count(), 7u);
}

TEST(Mlp, DeltaArithmetic) {
  Rng rng(9);
  const MlpModel m = MlpModel::he_init({4, 3, 2}, rng);
  const ParamVector zero{std::vector<double>(m.parameter_count(), 0.0)};
  EXPECT_EQ(apply_delta(m, zero), m);

  ParamVector d{std::vector<double>(m.parameter_count())};
  for (double& v : d.values) v = uniform01(rng) - 0.5;
  const ParamVector moved = flatten(apply_delta(m, d));
  const ParamVector base = flatten(m);
  for (std::size_t i = 0; i < d.size(); ++i) EXPECT_DOUBLE_EQ(moved.values[i], base.values[i] + d.values[i]);
  EXPECT_EQ(param_difference(moved, base).size(), d.size());
  EXPECT_THROW(apply_delta(m, ParamVector{{1.0}}), Error);
}

TEST(Mlp, UnflattenRoundTripPreservesOutputs) {
  Rng rng(10);
  const MlpModel m = MlpModel::he_init({6, 5, 4, 3}, rng);
  const MlpModel back = unflatten(flatten(m), m.layer_dims());
  const Tensor x = random_tensor({8, 6}, rng);
  EXPECT_EQ(forward(m, x).logits, forward(back, x).logits);
  EXPECT_THROW(unflatten(ParamVector{{1.0, 2.0}}, m.layer_dims()), Error);
}

TEST(Mlp, SpectralNormOfDiagonal) {
  Rng rng(11);
  EXPECT_NEAR(spectral_norm(Tensor::matrix(2, 2, {3, 0, 0, -5}), 200, rng), 5.0, 1e-9);
}

// Logit differences are bounded by the output layer's operator norm times
// the representation difference.
TEST(Mlp, LogitGapBoundedBySpectralNormTimesPlrGap) {
  Rng rng(12);
  int violations = 0;
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t in = 2 + uniform_index(10, rng);
    const MlpModel m = MlpModel::he_init({in, 2 + uniform_index(10, rng), 2 + uniform_index(8, rng),
                                          2 + uniform_index(9, rng)},
                                         rng);
    const ForwardResult a = forward(m, random_tensor({1, in}, rng, 0.0, 1.0));
    const ForwardResult b = forward(m, random_tensor({1, in}, rng, 0.0, 1.0));
    double dq = 0.0, dr = 0.0;
    for (std::size_t i = 0; i < a.logits.size(); ++i) dq += std::pow(a.logits[i] - b.logits[i], 2);
    for (std::size_t i = 0; i < a.plr.size(); ++i) dr += std::pow(a.plr[i] - b.plr[i], 2);
    const double omega = spectral_norm(m.output_weight(), 1000, rng);
    if (std::sqrt(dq) > omega * std::sqrt(dr) * (1.0 + 1e-9) + 1e-12) ++violations;
  }
  EXPECT_EQ(violations, 0);
}
