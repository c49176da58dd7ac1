#pragma once

#include <cstddef>
#include <functional>
#include <span>
#include <vector>

#include "fedbap/tensor.hpp"

namespace fedbap {

class Tape;

/// Handle to a value recorded on a Tape. Cheap to copy; valid while the
/// tape lives.
class Var {
 public:
  Var() = default;

  Tape& tape() const { return *tape_; }
  std::size_t id() const noexcept { return id_; }
  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }

 private:
  friend class Tape;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

/// Define-by-run reverse-mode tape. Every primitive appends one node; the
/// backward pass walks the nodes in exact reverse order. A tape is confined
/// to a single thread.
///
/// With recording disabled the same kernels run but no adjoints are kept,
/// so forward values are bitwise identical either way.
class Tape {
 public:
  using Backward = std::function<void(Tape&, std::size_t)>;

  explicit Tape(bool recording = true) : recording_(recording) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// Differentiable input.
  Var leaf(Tensor value);
  /// Input that never receives a gradient.
  Var constant(Tensor value);

  bool recording() const noexcept { return recording_; }
  std::size_t size() const noexcept { return nodes_.size(); }

  const Tensor& value(std::size_t id) const { return nodes_.at(id).value; }
  bool requires_grad(std::size_t id) const { return nodes_.at(id).requires_grad; }

  /// Seeds d(output)/d(output) = 1 and propagates adjoints. `output` must
  /// hold a single element.
  void backward(Var output);

  /// Accumulated adjoint of `v`; zeros if `v` was not on a path to the
  /// output (or backward has not run).
  Tensor grad(Var v) const;

  // Primitive construction. `backward` is dropped when not recording or
  // when no parent requires a gradient.
  Var push(Tensor value, std::span<const Var> parents, Backward backward);
  Tensor& grad_slot(std::size_t id);

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    bool requires_grad = false;
    Backward backward;
  };

  bool recording_;
  std::vector<Node> nodes_;
};

// -------------------------------------------------------------------------
// Primitives. Shape violations throw Error(kShapeMismatch) naming the
// primitive and the offending shapes.

Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var scale(Var a, double factor);
/// 1 - a, elementwise.
Var one_minus(Var a);
/// [m,k] x [k,n] -> [m,n].
Var matmul(Var a, Var b);
/// [m,n] + [n] broadcast over rows.
Var add_bias(Var a, Var bias);
/// Any shape S with |S| = d  ->  [rows, d].
Var broadcast_rows(Var a, std::size_t rows);
/// [H,W] -> [H,W,C]: the same value in every channel.
Var broadcast_channels(Var mask, std::size_t channels);
Var reshape(Var a, Shape shape);
/// Adjoint at exactly 0 is 0.
Var relu(Var a);
/// Softmax over the last axis (rank 1 or 2).
Var softmax(Var a);
/// Natural log; inputs must be strictly positive.
Var log(Var a);
Var exp(Var a);
Var sum(Var a);
Var mean(Var a);
/// Sum of |a_i|; adjoint sign(a) with sign(0) = 0.
Var l1_norm(Var a);
/// Euclidean norm; adjoint a/|a|, zero at the origin.
Var l2_norm(Var a);
Var dot(Var a, Var b);
/// Clamp to [0,1] with a straight-through adjoint: passes unchanged inside
/// the interval, zero outside.
Var clamp01(Var a);
/// Mean over rows of -log softmax(logits_i)[labels_i]. Fused for numerical
/// stability at large logits.
Var cross_entropy_mean(Var logits, std::span<const int> labels);
/// Mean over rows of cos(a_i, b_i); norms are floored at 1e-12.
Var row_cosine_mean(Var a, Var b);

inline Var operator+(Var a, Var b) { return add(a, b); }
inline Var operator-(Var a, Var b) { return sub(a, b); }
inline Var operator*(Var a, Var b) { return mul(a, b); }

// -------------------------------------------------------------------------
// Plain kernels shared by the primitives and tape-free inference.
namespace kernels {

Tensor matmul(const Tensor& a, const Tensor& b);
void add_bias_inplace(Tensor& a, const Tensor& bias);
void relu_inplace(Tensor& a);
Tensor softmax_rows(const Tensor& a);

}  // namespace kernels

// -------------------------------------------------------------------------

using GraphFn = std::function<Var(Tape&, std::span<const Var>)>;

struct ValueAndGradients {
  Tensor value;
  std::vector<Tensor> gradients;  // one per leaf, leaf-shaped
};

/// Records `graph` over fresh leaves holding `leaves`, runs backward, and
/// returns the scalar output with d(output)/d(leaf) for each leaf.
ValueAndGradients evaluate_with_gradients(const GraphFn& graph, std::span<const Tensor> leaves);

/// Central differences (f(x + eps e_i) - f(x - eps e_i)) / (2 eps) per
/// coordinate.
Tensor finite_difference_gradient(const std::function<double(const Tensor&)>& f, const Tensor& x,
                                  double eps);

}  // namespace fedbap
