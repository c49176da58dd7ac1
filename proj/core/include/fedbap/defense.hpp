#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "fedbap/autodiff.hpp"
#include "fedbap/dataset.hpp"
#include "fedbap/mlp.hpp"
#include "fedbap/rng.hpp"
#include "fedbap/tensor.hpp"

namespace fedbap {

/// Mask M ([H,W], shared by all channels) and pattern ([H,W,C]) that are
/// blended into an image as (1 - M) * x + M * pattern.
struct PerturbationTrigger {
  Tensor mask;
  Tensor pattern;

  /// L1 norm of the mask.
  double backdoor_distance() const;
};

/// (1 - M) * x + M * pattern for one [H,W,C] image.
Tensor embed_trigger(const Tensor& image, const Tensor& mask, const Tensor& pattern);
/// Batched form on a tape. x is [B, H*W*C]; mask [H,W]; pattern [H,W,C].
Var embed_trigger(Var x, Var mask, Var pattern);
/// Tape-free batched form, bitwise equal to the taped one.
Tensor embed_trigger_batch(const Tensor& x, const Tensor& mask, const Tensor& pattern);

/// Fraction of `data` classified as `target` once the trigger is embedded.
double backdoor_accuracy(const MlpModel& model, const Dataset& data, const Tensor& mask, const Tensor& pattern,
                         int target);

// -------------------------------------------------------------------------
// Mask generation

struct MaskGenParams {
  int epochs = 100;
  double lr = 0.1;
  double acc_threshold = 0.9;
  double lambda = 0.01;
  std::size_t batch_size = 64;
};

struct MaskGenResult {
  Tensor mask;  // [H, W], values in [0,1]
  double distance = 0.0;
  int target_class = -1;  // -1 when the all-ones initial mask survived
  double accuracy = 0.0;
  bool reached_threshold = false;
};

/// Reverse-engineers, for every candidate target class, the smallest mask
/// (with a jointly optimised pattern) that flips the client's samples to
/// that class, minimising CE(model(embed(x, M, P)), y_t) + lambda * |M|_1.
/// Returns the lowest-L1 mask among (class, epoch) checkpoints reaching
/// `acc_threshold`. If none qualifies, returns the lowest-L1 mask among
/// those with the highest accuracy seen.
MaskGenResult mask_gen_client(const MlpModel& model, const Dataset& data, const MaskGenParams& params, Rng& rng);

/// Cellwise mean of the client masks, binarised at >= 0.5.
Tensor merge_masks(std::span<const Tensor> client_masks);

// -------------------------------------------------------------------------
// Pattern generation

struct PatternGenParams {
  int epochs = 100;
  double lr = 10.0;
  std::size_t batch_size = 64;
};

/// Optimises a client pattern that minimises the cosine similarity between
/// the penultimate-layer representations of triggered and clean inputs.
Tensor pattern_gen_client(const MlpModel& model, const Tensor& mask, const Dataset& data,
                          const PatternGenParams& params, Rng& rng);

/// Mean over `data` of cos(PLR(embed(x, M, P)), PLR(x)).
double mean_plr_cosine(const MlpModel& model, const Tensor& mask, const Tensor& pattern, const Dataset& data);

/// Random pattern in [0,1], used when pattern optimisation is disabled.
Tensor random_pattern(ImageShape shape, Rng& rng);

// -------------------------------------------------------------------------
// Benign adversarial perturbation

struct BapParams {
  int epochs = 10;
  double lr = 0.01;
  std::size_t batch_size = 64;
  // > 0 rescales each step so the global gradient norm is at most this value.
  double clip_norm = 0.0;
};

struct BapResult {
  double mean_loss = 0.0;
  MlpModel model;
};

/// SGD on c * CE(model(embed(x, M, P)), y) with the true labels y. The
/// reported loss is the scaled loss averaged over every batch of every
/// epoch.
BapResult bap_gen(double scale_factor, MlpModel model, const Dataset& data, const Tensor& mask,
                  const Tensor& pattern, const BapParams& params, Rng& rng);

// -------------------------------------------------------------------------
// Adaptive scaling

struct ScalingState {
  double c = 1.0;
  std::vector<double> loss_history;
  std::vector<double> alpha_history;
  int start_round = 0;
  double delta = 1.0;
  int window = 5;
};

ScalingState make_scaling_state(int start_round, double initial_c, double delta, int window);

/// Advances the scaling factor after round t given the round's mean
/// perturbation loss. Rounds must be fed consecutively from start_round.
///
///   alpha_t = 1 at the start round, else loss_t / loss_{t-1}
///   beta    = mean of the previous alphas (at most `window` of them),
///             1 at the start round
///   c      += delta * beta / sqrt(alpha_t)   if alpha_t >= 1
///   c      += delta * beta / alpha_t^2       otherwise
ScalingState adaptive_scaling(ScalingState state, double loss_t, int t);

}  // namespace fedbap
