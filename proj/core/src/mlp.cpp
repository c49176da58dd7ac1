#include "fedbap/mlp.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "fedbap/error.hpp"

namespace fedbap {

MlpModel::MlpModel(std::vector<std::size_t> layer_dims) : dims_(std::move(layer_dims)) {
  if (dims_.size() < 3) {
    throw Error(ErrorKind::kInvalidArgument, "mlp: need at least input, one hidden and output layer", "layer_dims");
  }
  for (std::size_t d : dims_) {
    if (d == 0) throw Error(ErrorKind::kInvalidArgument, "mlp: zero-width layer", "layer_dims");
  }
  for (std::size_t i = 0; i + 1 < dims_.size(); ++i) {
    weights_.emplace_back(Shape{dims_[i], dims_[i + 1]}, 0.0);
    biases_.emplace_back(Shape{dims_[i + 1]}, 0.0);
  }
}

MlpModel MlpModel::he_init(std::vector<std::size_t> layer_dims, Rng& rng) {
  MlpModel model(std::move(layer_dims));
  std::normal_distribution<double> normal(0.0, 1.0);
  for (std::size_t l = 0; l < model.num_layers(); ++l) {
    const double stddev = std::sqrt(2.0 / static_cast<double>(model.dims_[l]));
    for (double& w : model.weights_[l].data()) w = stddev * normal(rng);
  }
  return model;
}

std::size_t MlpModel::parameter_count() const {
  std::size_t total = 0;
  for (std::size_t i = 0; i + 1 < dims_.size(); ++i) total += dims_[i] * dims_[i + 1] + dims_[i + 1];
  return total;
}

// -------------------------------------------------------------------------

MlpVars bind_parameters(const MlpModel& model, Tape& tape, bool trainable) {
  MlpVars vars;
  for (std::size_t l = 0; l < model.num_layers(); ++l) {
    vars.weights.push_back(trainable ? tape.leaf(model.weight(l)) : tape.constant(model.weight(l)));
    vars.biases.push_back(trainable ? tape.leaf(model.bias(l)) : tape.constant(model.bias(l)));
  }
  return vars;
}

MlpOutputs forward(const MlpVars& params, Var x) {
  Var h = x;
  Var plr = x;
  const std::size_t layers = params.weights.size();
  for (std::size_t l = 0; l < layers; ++l) {
    h = add_bias(matmul(h, params.weights[l]), params.biases[l]);
    if (l + 1 < layers) {
      h = relu(h);
      plr = h;
    }
  }
  return {h, plr};
}

ForwardResult forward(const MlpModel& model, const Tensor& x) {
  Tensor h = x.rank() == 1 ? x.reshaped({1, x.size()}) : x;
  if (h.rank() != 2 || h.dim(1) != model.input_dim()) {
    throw Error(ErrorKind::kShapeMismatch,
                "forward: input " + shape_string(x.shape()) + " for input_dim " + std::to_string(model.input_dim()),
                "forward");
  }
  Tensor plr;
  for (std::size_t l = 0; l < model.num_layers(); ++l) {
    h = kernels::matmul(h, model.weight(l));
    kernels::add_bias_inplace(h, model.bias(l));
    if (l + 1 < model.num_layers()) {
      kernels::relu_inplace(h);
      plr = h;
    }
  }
  return {std::move(h), std::move(plr)};
}

std::vector<int> predict(const MlpModel& model, const Tensor& x) {
  const Tensor logits = forward(model, x).logits;
  const std::size_t rows = logits.dim(0), cols = logits.dim(1);
  std::vector<int> out(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const auto row = logits.data().subspan(r * cols, cols);
    out[r] = static_cast<int>(std::max_element(row.begin(), row.end()) - row.begin());
  }
  return out;
}

std::vector<int> predict(const MlpModel& model, const Dataset& data, std::size_t batch_size) {
  std::vector<int> out;
  out.reserve(data.size());
  std::vector<std::size_t> idx;
  for (std::size_t start = 0; start < data.size(); start += batch_size) {
    const std::size_t stop = std::min(data.size(), start + batch_size);
    idx.resize(stop - start);
    std::iota(idx.begin(), idx.end(), start);
    const auto batch = predict(model, data.gather(idx));
    out.insert(out.end(), batch.begin(), batch.end());
  }
  return out;
}

double cross_entropy(const Tensor& logits, int label) {
  const auto z = logits.data();
  if (label < 0 || static_cast<std::size_t>(label) >= z.size()) {
    throw Error(ErrorKind::kOutOfRange, "cross_entropy: label outside class range", "label");
  }
  const double mx = *std::max_element(z.begin(), z.end());
  double s = 0.0;
  for (double v : z) s += std::exp(v - mx);
  return mx + std::log(s) - z[static_cast<std::size_t>(label)];
}

void apply_gradients(MlpModel& model, const Tape& tape, const MlpVars& vars, double lr) {
  auto step = [lr](Tensor& param, const Tensor& grad) {
    auto p = param.data();
    auto g = grad.data();
    for (std::size_t i = 0; i < p.size(); ++i) p[i] -= lr * g[i];
  };
  for (std::size_t l = 0; l < model.num_layers(); ++l) {
    step(model.weight(l), tape.grad(vars.weights[l]));
    step(model.bias(l), tape.grad(vars.biases[l]));
  }
}

MlpModel sgd_train(MlpModel model, const Dataset& data, const SgdOptions& options, Rng& rng) {
  if (data.empty()) throw Error(ErrorKind::kInvalidArgument, "sgd_train: empty dataset", "dataset");
  if (options.epochs < 1) throw Error(ErrorKind::kInvalidArgument, "sgd_train: epochs must be >= 1", "local_epochs");
  if (!(options.lr >= 0.0)) throw Error(ErrorKind::kInvalidArgument, "sgd_train: negative learning rate", "lr");
  if (options.batch_size == 0) throw Error(ErrorKind::kInvalidArgument, "sgd_train: zero batch size", "batch_size");

  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), 0);
  for (int epoch = 0; epoch < options.epochs; ++epoch) {
    shuffle_indices(order, rng);
    for (std::size_t start = 0; start < order.size(); start += options.batch_size) {
      const std::size_t stop = std::min(order.size(), start + options.batch_size);
      const std::span<const std::size_t> batch(order.data() + start, stop - start);
      Tape tape;
      const MlpVars vars = bind_parameters(model, tape, true);
      const Var x = tape.constant(data.gather(batch));
      const auto labels = data.gather_labels(batch);
      const Var loss = cross_entropy_mean(forward(vars, x).logits, labels);
      tape.backward(loss);
      apply_gradients(model, tape, vars, options.lr);
    }
  }
  return model;
}

// -------------------------------------------------------------------------

ParamVector flatten(const MlpModel& model) {
  ParamVector out;
  out.values.reserve(model.parameter_count());
  for (std::size_t l = 0; l < model.num_layers(); ++l) {
    const auto w = model.weight(l).data();
    const auto b = model.bias(l).data();
    out.values.insert(out.values.end(), w.begin(), w.end());
    out.values.insert(out.values.end(), b.begin(), b.end());
  }
  return out;
}

MlpModel unflatten(const ParamVector& params, const std::vector<std::size_t>& layer_dims) {
  MlpModel model(layer_dims);
  if (params.size() != model.parameter_count()) {
    throw Error(ErrorKind::kShapeMismatch,
                "unflatten: " + std::to_string(params.size()) + " values for " +
                    std::to_string(model.parameter_count()) + " parameters",
                "unflatten");
  }
  std::size_t offset = 0;
  for (std::size_t l = 0; l < model.num_layers(); ++l) {
    for (Tensor* t : {&model.weight(l), &model.bias(l)}) {
      auto d = t->data();
      std::copy_n(params.values.begin() + static_cast<std::ptrdiff_t>(offset), d.size(), d.begin());
      offset += d.size();
    }
  }
  return model;
}

MlpModel apply_delta(MlpModel model, const ParamVector& delta) {
  if (delta.size() != model.parameter_count()) {
    throw Error(ErrorKind::kShapeMismatch,
                "apply_delta: delta of length " + std::to_string(delta.size()) + " for " +
                    std::to_string(model.parameter_count()) + " parameters",
                "apply_delta");
  }
  std::size_t offset = 0;
  for (std::size_t l = 0; l < model.num_layers(); ++l) {
    for (Tensor* t : {&model.weight(l), &model.bias(l)}) {
      for (double& v : t->data()) v += delta.values[offset++];
    }
  }
  return model;
}

ParamVector param_difference(const ParamVector& a, const ParamVector& b) {
  if (a.size() != b.size()) {
    throw Error(ErrorKind::kShapeMismatch, "param_difference: length mismatch", "param_difference");
  }
  ParamVector out{std::vector<double>(a.size())};
  for (std::size_t i = 0; i < a.size(); ++i) out.values[i] = a.values[i] - b.values[i];
  return out;
}

double spectral_norm(const Tensor& matrix, int iterations, Rng& rng) {
  if (matrix.rank() != 2) {
    throw Error(ErrorKind::kShapeMismatch, "spectral_norm: expected a matrix, got " + shape_string(matrix.shape()),
                "spectral_norm");
  }
  const std::size_t rows = matrix.dim(0), cols = matrix.dim(1);
  std::vector<double> v(cols), u(rows);
  std::normal_distribution<double> normal(0.0, 1.0);
  for (double& x : v) x = normal(rng);
  const auto a = matrix.data();
  double sigma = 0.0;
  for (int it = 0; it < iterations; ++it) {
    double vn = 0.0;
    for (double x : v) vn += x * x;
    vn = std::sqrt(vn);
    if (vn == 0.0) return 0.0;
    for (double& x : v) x /= vn;
    // u = A v
    std::fill(u.begin(), u.end(), 0.0);
    for (std::size_t i = 0; i < rows; ++i) {
      for (std::size_t j = 0; j < cols; ++j) u[i] += a[i * cols + j] * v[j];
    }
    double un = 0.0;
    for (double x : u) un += x * x;
    sigma = std::sqrt(un);
    // v = A^T u
    std::fill(v.begin(), v.end(), 0.0);
    for (std::size_t i = 0; i < rows; ++i) {
      for (std::size_t j = 0; j < cols; ++j) v[j] += a[i * cols + j] * u[i];
    }
  }
  return sigma;
}

}  // namespace fedbap
