#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "fedbap/autodiff.hpp"
#include "fedbap/dataset.hpp"
#include "fedbap/rng.hpp"
#include "fedbap/tensor.hpp"

namespace fedbap {

/// All model parameters flattened in canonical order: W0, b0, W1, b1, ...
/// with each weight matrix row-major [in, out].
struct ParamVector {
  std::vector<double> values;

  std::size_t size() const noexcept { return values.size(); }
  friend bool operator==(const ParamVector&, const ParamVector&) = default;
};

/// Fully connected classifier: relu on hidden layers, raw logits out.
/// The last hidden activation is the penultimate-layer representation.
class MlpModel {
 public:
  MlpModel() = default;
  /// All-zero parameters.
  explicit MlpModel(std::vector<std::size_t> layer_dims);

  /// He-normal weights, zero biases.
  static MlpModel he_init(std::vector<std::size_t> layer_dims, Rng& rng);

  const std::vector<std::size_t>& layer_dims() const noexcept { return dims_; }
  std::size_t num_layers() const noexcept { return weights_.size(); }
  std::size_t input_dim() const { return dims_.front(); }
  std::size_t num_classes() const { return dims_.back(); }
  std::size_t plr_dim() const { return dims_.at(dims_.size() - 2); }
  std::size_t parameter_count() const;

  Tensor& weight(std::size_t layer) { return weights_.at(layer); }
  const Tensor& weight(std::size_t layer) const { return weights_.at(layer); }
  Tensor& bias(std::size_t layer) { return biases_.at(layer); }
  const Tensor& bias(std::size_t layer) const { return biases_.at(layer); }
  /// Weights connecting the penultimate layer to the output, [plr_dim, C].
  const Tensor& output_weight() const { return weights_.back(); }

  friend bool operator==(const MlpModel&, const MlpModel&) = default;

 private:
  std::vector<std::size_t> dims_;
  std::vector<Tensor> weights_;
  std::vector<Tensor> biases_;
};

/// Parameters of a model recorded on a tape.
struct MlpVars {
  std::vector<Var> weights;
  std::vector<Var> biases;
};

struct MlpOutputs {
  Var logits;
  Var plr;
};

struct ForwardResult {
  Tensor logits;
  Tensor plr;
};

/// Records the parameters as leaves (trainable) or constants.
MlpVars bind_parameters(const MlpModel& model, Tape& tape, bool trainable);
/// x is [B, input_dim].
MlpOutputs forward(const MlpVars& params, Var x);
/// Tape-free forward; x is [B, input_dim] or [input_dim].
ForwardResult forward(const MlpModel& model, const Tensor& x);

/// argmax of logits for each row of x; ties go to the lowest class.
std::vector<int> predict(const MlpModel& model, const Tensor& x);
/// Predictions over a whole dataset in batches.
std::vector<int> predict(const MlpModel& model, const Dataset& data, std::size_t batch_size = 256);

/// -log softmax(logits)[label] for a single logit vector.
double cross_entropy(const Tensor& logits, int label);

/// params -= lr * grad for every parameter bound in `vars`.
void apply_gradients(MlpModel& model, const Tape& tape, const MlpVars& vars, double lr);

struct SgdOptions {
  int epochs = 2;
  double lr = 0.01;
  std::size_t batch_size = 64;
};

/// Minibatch SGD on mean cross-entropy; samples are reshuffled each epoch.
MlpModel sgd_train(MlpModel model, const Dataset& data, const SgdOptions& options, Rng& rng);

ParamVector flatten(const MlpModel& model);
MlpModel unflatten(const ParamVector& params, const std::vector<std::size_t>& layer_dims);
MlpModel apply_delta(MlpModel model, const ParamVector& delta);
/// a - b coordinatewise.
ParamVector param_difference(const ParamVector& a, const ParamVector& b);

/// Largest singular value by power iteration on A^T A.
double spectral_norm(const Tensor& matrix, int iterations, Rng& rng);

}  // namespace fedbap
