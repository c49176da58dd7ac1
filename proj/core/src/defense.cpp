#include "fedbap/defense.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>

#include "fedbap/error.hpp"

namespace fedbap {

namespace {

constexpr double kDivisorFloor = 1e-12;

void check_trigger_shapes(const char* op, const Tensor& mask, const Tensor& pattern, std::size_t sample_dim) {
  if (mask.rank() != 2 || pattern.rank() != 3 || pattern.dim(0) != mask.dim(0) || pattern.dim(1) != mask.dim(1)) {
    throw Error(ErrorKind::kShapeMismatch,
                std::string(op) + ": mask " + shape_string(mask.shape()) + " and pattern " +
                    shape_string(pattern.shape()) + " are incompatible",
                op);
  }
  if (pattern.size() != sample_dim) {
    throw Error(ErrorKind::kShapeMismatch,
                std::string(op) + ": pattern " + shape_string(pattern.shape()) + " does not match sample size " +
                    std::to_string(sample_dim),
                op);
  }
}

void clamp_unit(Tensor& t) {
  for (double& v : t.data()) v = std::clamp(v, 0.0, 1.0);
}

Tensor uniform_tensor(Shape shape, Rng& rng) {
  Tensor t(std::move(shape), 0.0);
  for (double& v : t.data()) v = uniform01(rng);
  return t;
}

void gradient_step(Tensor& param, const Tensor& grad, double lr) {
  auto p = param.data();
  auto g = grad.data();
  for (std::size_t i = 0; i < p.size(); ++i) p[i] -= lr * g[i];
}

// Calls fn(batch) for consecutive slices of a freshly shuffled order.
void for_each_shuffled_batch(std::vector<std::size_t>& order, std::size_t batch_size, Rng& rng,
                             const std::function<void(std::span<const std::size_t>)>& fn) {
  if (batch_size == 0) throw Error(ErrorKind::kInvalidArgument, "batch size must be positive", "batch_size");
  shuffle_indices(order, rng);
  for (std::size_t start = 0; start < order.size(); start += batch_size) {
    const std::size_t stop = std::min(order.size(), start + batch_size);
    fn(std::span<const std::size_t>(order.data() + start, stop - start));
  }
}

std::vector<std::size_t> iota_indices(std::size_t n) {
  std::vector<std::size_t> v(n);
  std::iota(v.begin(), v.end(), 0);
  return v;
}

}  // namespace

double PerturbationTrigger::backdoor_distance() const {
  double total = 0.0;
  for (double v : mask.data()) total += std::abs(v);
  return total;
}

// -------------------------------------------------------------------------

Tensor embed_trigger(const Tensor& image, const Tensor& mask, const Tensor& pattern) {
  if (image.shape() != pattern.shape()) {
    throw Error(ErrorKind::kShapeMismatch,
                "embed_trigger: image " + shape_string(image.shape()) + " vs pattern " + shape_string(pattern.shape()),
                "embed_trigger");
  }
  check_trigger_shapes("embed_trigger", mask, pattern, image.size());
  const Tensor flat = embed_trigger_batch(image.reshaped({1, image.size()}), mask, pattern);
  return flat.reshaped(image.shape());
}

Tensor embed_trigger_batch(const Tensor& x, const Tensor& mask, const Tensor& pattern) {
  if (x.rank() != 2) {
    throw Error(ErrorKind::kShapeMismatch, "embed_trigger: batch must be [B,D], got " + shape_string(x.shape()),
                "embed_trigger");
  }
  check_trigger_shapes("embed_trigger", mask, pattern, x.dim(1));
  const std::size_t rows = x.dim(0), d = x.dim(1), channels = pattern.dim(2);
  Tensor out(x.shape(), 0.0);
  auto o = out.data();
  const auto xv = x.data();
  const auto m = mask.data();
  const auto p = pattern.data();
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t j = 0; j < d; ++j) {
      const double mj = m[j / channels];
      o[r * d + j] = (1.0 - mj) * xv[r * d + j] + mj * p[j];
    }
  }
  return out;
}

Var embed_trigger(Var x, Var mask, Var pattern) {
  const Tensor& xv = x.value();
  if (xv.rank() != 2) {
    throw Error(ErrorKind::kShapeMismatch, "embed_trigger: batch must be [B,D], got " + shape_string(xv.shape()),
                "embed_trigger");
  }
  check_trigger_shapes("embed_trigger", mask.value(), pattern.value(), xv.dim(1));
  const std::size_t rows = xv.dim(0);
  const Var mb = broadcast_rows(broadcast_channels(mask, pattern.value().dim(2)), rows);
  const Var pb = broadcast_rows(pattern, rows);
  return add(mul(one_minus(mb), x), mul(mb, pb));
}

double backdoor_accuracy(const MlpModel& model, const Dataset& data, const Tensor& mask, const Tensor& pattern,
                         int target) {
  if (data.empty()) return 0.0;
  std::size_t hits = 0;
  const std::size_t batch = 256;
  std::vector<std::size_t> idx;
  for (std::size_t start = 0; start < data.size(); start += batch) {
    const std::size_t stop = std::min(data.size(), start + batch);
    idx.resize(stop - start);
    std::iota(idx.begin(), idx.end(), start);
    for (int y : predict(model, embed_trigger_batch(data.gather(idx), mask, pattern))) hits += y == target;
  }
  return static_cast<double>(hits) / static_cast<double>(data.size());
}

// -------------------------------------------------------------------------

MaskGenResult mask_gen_client(const MlpModel& model, const Dataset& data, const MaskGenParams& params, Rng& rng) {
  if (data.empty()) throw Error(ErrorKind::kInvalidArgument, "mask_gen: empty client dataset", "dataset");
  const ImageShape shape = data.image_shape();

  MaskGenResult best;
  best.mask = Tensor({shape.height, shape.width}, 1.0);
  best.distance = static_cast<double>(shape.height * shape.width);

  // Fallback when no checkpoint reaches the threshold.
  MaskGenResult fallback;
  fallback.accuracy = -1.0;

  std::vector<std::size_t> order = iota_indices(data.size());
  for (int target = 0; target < data.num_classes(); ++target) {
    Tensor mask = uniform_tensor({shape.height, shape.width}, rng);
    Tensor pattern = uniform_tensor({shape.height, shape.width, shape.channels}, rng);

    for (int epoch = 0; epoch < params.epochs; ++epoch) {
      for_each_shuffled_batch(order, params.batch_size, rng, [&](std::span<const std::size_t> batch) {
        Tape tape;
        const MlpVars weights = bind_parameters(model, tape, false);
        const Var m = tape.leaf(mask);
        const Var p = tape.leaf(pattern);
        const Var mc = clamp01(m);
        const Var x = embed_trigger(tape.constant(data.gather(batch)), mc, clamp01(p));
        const std::vector<int> targets(batch.size(), target);
        const Var loss = add(cross_entropy_mean(forward(weights, x).logits, targets), scale(l1_norm(mc), params.lambda));
        tape.backward(loss);
        gradient_step(mask, tape.grad(m), params.lr);
        gradient_step(pattern, tape.grad(p), params.lr);
        clamp_unit(mask);
        clamp_unit(pattern);
      });

      const double acc = backdoor_accuracy(model, data, mask, pattern, target);
      const double dist = PerturbationTrigger{mask, pattern}.backdoor_distance();
      if (acc >= params.acc_threshold && dist < best.distance) {
        best = {mask, dist, target, acc, true};
      }
      if (acc > fallback.accuracy || (acc == fallback.accuracy && dist < fallback.distance)) {
        fallback = {mask, dist, target, acc, false};
      }
    }
  }
  return best.reached_threshold ? best : fallback;
}

Tensor merge_masks(std::span<const Tensor> client_masks) {
  if (client_masks.empty()) throw Error(ErrorKind::kInvalidArgument, "merge_masks: no client masks", "merge_masks");
  const Shape& shape = client_masks.front().shape();
  Tensor total(shape, 0.0);
  for (const Tensor& m : client_masks) {
    if (m.shape() != shape) {
      throw Error(ErrorKind::kShapeMismatch,
                  "merge_masks: " + shape_string(m.shape()) + " vs " + shape_string(shape), "merge_masks");
    }
    for (std::size_t i = 0; i < m.size(); ++i) total[i] += m[i];
  }
  const double n = static_cast<double>(client_masks.size());
  for (double& v : total.data()) v = (v / n) >= 0.5 ? 1.0 : 0.0;
  return total;
}

// -------------------------------------------------------------------------

Tensor random_pattern(ImageShape shape, Rng& rng) {
  return uniform_tensor({shape.height, shape.width, shape.channels}, rng);
}

Tensor pattern_gen_client(const MlpModel& model, const Tensor& mask, const Dataset& data,
                          const PatternGenParams& params, Rng& rng) {
  if (data.empty()) throw Error(ErrorKind::kInvalidArgument, "pattern_gen: empty client dataset", "dataset");
  Tensor pattern = random_pattern(data.image_shape(), rng);
  check_trigger_shapes("pattern_gen", mask, pattern, data.sample_dim());

  std::vector<std::size_t> order = iota_indices(data.size());
  for (int epoch = 0; epoch < params.epochs; ++epoch) {
    for_each_shuffled_batch(order, params.batch_size, rng, [&](std::span<const std::size_t> batch) {
      Tape tape;
      const MlpVars weights = bind_parameters(model, tape, false);
      const Tensor clean = data.gather(batch);
      const Var p = tape.leaf(pattern);
      const Var triggered = embed_trigger(tape.constant(clean), tape.constant(mask), clamp01(p));
      const Var r1 = forward(weights, triggered).plr;
      const Var r2 = forward(weights, tape.constant(clean)).plr;
      tape.backward(row_cosine_mean(r1, r2));
      gradient_step(pattern, tape.grad(p), params.lr);
      clamp_unit(pattern);
    });
  }
  return pattern;
}

double mean_plr_cosine(const MlpModel& model, const Tensor& mask, const Tensor& pattern, const Dataset& data) {
  if (data.empty()) return 0.0;
  const auto all = iota_indices(data.size());
  const Tensor clean = data.gather(all);
  Tape tape(false);
  const Var r1 = tape.constant(forward(model, embed_trigger_batch(clean, mask, pattern)).plr);
  const Var r2 = tape.constant(forward(model, clean).plr);
  return row_cosine_mean(r1, r2).value().item();
}

// -------------------------------------------------------------------------

BapResult bap_gen(double scale_factor, MlpModel model, const Dataset& data, const Tensor& mask,
                  const Tensor& pattern, const BapParams& params, Rng& rng) {
  if (!(scale_factor >= 0.0)) {
    throw Error(ErrorKind::kInvalidArgument, "bap_gen: scaling factor must be non-negative", "scale");
  }
  if (data.empty()) throw Error(ErrorKind::kInvalidArgument, "bap_gen: empty client dataset", "dataset");
  check_trigger_shapes("bap_gen", mask, pattern, data.sample_dim());

  double loss_total = 0.0;
  std::size_t batches = 0;
  std::vector<std::size_t> order = iota_indices(data.size());
  for (int epoch = 0; epoch < params.epochs; ++epoch) {
    for_each_shuffled_batch(order, params.batch_size, rng, [&](std::span<const std::size_t> batch) {
      Tape tape;
      const MlpVars vars = bind_parameters(model, tape, true);
      const Var x = tape.constant(embed_trigger_batch(data.gather(batch), mask, pattern));
      const auto labels = data.gather_labels(batch);
      const Var loss = scale(cross_entropy_mean(forward(vars, x).logits, labels), scale_factor);
      tape.backward(loss);
      double lr = params.lr;
      if (params.clip_norm > 0.0) {
        double sq = 0.0;
        for (std::size_t l = 0; l < model.num_layers(); ++l) {
          for (const Var v : {vars.weights[l], vars.biases[l]}) {
            const Tensor grad = tape.grad(v);
            for (double g : grad.data()) sq += g * g;
          }
        }
        const double norm = std::sqrt(sq);
        if (norm > params.clip_norm) lr *= params.clip_norm / norm;
      }
      apply_gradients(model, tape, vars, lr);
      loss_total += loss.value().item();
      ++batches;
    });
  }
  return {batches ? loss_total / static_cast<double>(batches) : 0.0, std::move(model)};
}

// -------------------------------------------------------------------------

ScalingState make_scaling_state(int start_round, double initial_c, double delta, int window) {
  if (!(delta > 0.0)) throw Error(ErrorKind::kOutOfRange, "adaptive_scaling: delta must be positive", "delta");
  if (window < 1) throw Error(ErrorKind::kOutOfRange, "adaptive_scaling: window must be >= 1", "window");
  if (!(initial_c > 0.0)) {
    throw Error(ErrorKind::kOutOfRange, "adaptive_scaling: initial scaling factor must be positive", "initial_scale");
  }
  ScalingState s;
  s.c = initial_c;
  s.start_round = start_round;
  s.delta = delta;
  s.window = window;
  return s;
}

ScalingState adaptive_scaling(ScalingState state, double loss_t, int t) {
  if (t < state.start_round) {
    throw Error(ErrorKind::kInvalidArgument, "adaptive_scaling: round precedes the start round", "round");
  }
  const auto elapsed = static_cast<std::size_t>(t - state.start_round);
  if (elapsed != state.alpha_history.size()) {
    throw Error(ErrorKind::kInvalidArgument, "adaptive_scaling: rounds must be consecutive", "round");
  }
  if (!(loss_t >= 0.0)) throw Error(ErrorKind::kInvalidArgument, "adaptive_scaling: negative loss", "loss");

  double alpha = 1.0;
  double beta = 1.0;
  if (elapsed > 0) {
    alpha = loss_t / std::max(state.loss_history.back(), kDivisorFloor);
    const std::size_t span = std::min<std::size_t>(elapsed, static_cast<std::size_t>(state.window));
    const auto first = state.alpha_history.end() - static_cast<std::ptrdiff_t>(span);
    beta = std::accumulate(first, state.alpha_history.end(), 0.0) / static_cast<double>(span);
  }

  if (alpha >= 1.0) {
    state.c += state.delta * beta / std::sqrt(alpha);
  } else {
    const double a = std::max(alpha, kDivisorFloor);
    state.c += state.delta * beta / (a * a);
  }
  state.loss_history.push_back(loss_t);
  state.alpha_history.push_back(alpha);
  return state;
}

}  // namespace fedbap
