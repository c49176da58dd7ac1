#include "fedbap/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "fedbap/error.hpp"

namespace fedbap {

namespace {

constexpr double kNormFloor = 1e-12;

[[noreturn]] void shape_error(const char* op, const std::string& detail) {
  throw Error(ErrorKind::kShapeMismatch, std::string(op) + ": " + detail, op);
}

void require_same_shape(const char* op, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) shape_error(op, shape_string(a.shape()) + " vs " + shape_string(b.shape()));
}

void require_same_tape(const char* op, Var a, Var b) {
  if (&a.tape() != &b.tape()) shape_error(op, "operands recorded on different tapes");
}

void require_finite(const char* op, const Tensor& t) {
  if (!t.all_finite()) throw Error(ErrorKind::kNumeric, std::string(op) + ": non-finite result", op);
}

// Rows/cols view of a rank-1 or rank-2 tensor over its last axis.
std::pair<std::size_t, std::size_t> rows_cols(const char* op, const Tensor& t) {
  if (t.rank() == 1) return {1, t.dim(0)};
  if (t.rank() == 2) return {t.dim(0), t.dim(1)};
  shape_error(op, "expected rank 1 or 2, got " + shape_string(t.shape()));
}

Var unary(const char* op, Var a, Tensor out, Tape::Backward backward) {
  require_finite(op, out);
  const Var parents[] = {a};
  return a.tape().push(std::move(out), parents, std::move(backward));
}

Var binary(const char* op, Var a, Var b, Tensor out, Tape::Backward backward) {
  require_finite(op, out);
  const Var parents[] = {a, b};
  return a.tape().push(std::move(out), parents, std::move(backward));
}

// g_out += factor * src
void axpy(Tensor& out, double factor, const Tensor& src) {
  auto o = out.data();
  auto s = src.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] += factor * s[i];
}

// out[m,k] += g[m,n] * b[k,n]^T
void matmul_bt_accumulate(Tensor& out, const Tensor& g, const Tensor& b) {
  const std::size_t m = g.dim(0), n = g.dim(1), k = b.dim(0);
  const double* gp = g.data().data();
  const double* bp = b.data().data();
  double* op = out.data().data();
  for (std::size_t i = 0; i < m; ++i) {
    const double* grow = gp + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double* brow = bp + p * n;
      double acc = 0.0;
      for (std::size_t j = 0; j < n; ++j) acc += grow[j] * brow[j];
      op[i * k + p] += acc;
    }
  }
}

// out[k,n] += a[m,k]^T * g[m,n]
void matmul_at_accumulate(Tensor& out, const Tensor& a, const Tensor& g) {
  const std::size_t m = a.dim(0), k = a.dim(1), n = g.dim(1);
  const double* ap = a.data().data();
  const double* gp = g.data().data();
  double* op = out.data().data();
  for (std::size_t i = 0; i < m; ++i) {
    const double* grow = gp + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = ap[i * k + p];
      if (av == 0.0) continue;
      double* orow = op + p * n;
      for (std::size_t j = 0; j < n; ++j) orow[j] += av * grow[j];
    }
  }
}

}  // namespace

// -------------------------------------------------------------------------

const Tensor& Var::value() const { return tape_->value(id_); }

Var Tape::leaf(Tensor value) {
  nodes_.push_back(Node{std::move(value), Tensor{}, true, nullptr});
  return Var(this, nodes_.size() - 1);
}

Var Tape::constant(Tensor value) {
  nodes_.push_back(Node{std::move(value), Tensor{}, false, nullptr});
  return Var(this, nodes_.size() - 1);
}

Var Tape::push(Tensor value, std::span<const Var> parents, Backward backward) {
  bool needs = false;
  for (const Var& p : parents) needs = needs || nodes_.at(p.id()).requires_grad;
  if (!recording_ || !needs) backward = nullptr;
  nodes_.push_back(Node{std::move(value), Tensor{}, needs, std::move(backward)});
  return Var(this, nodes_.size() - 1);
}

Tensor& Tape::grad_slot(std::size_t id) {
  Node& node = nodes_.at(id);
  if (node.grad.shape() != node.value.shape() || node.grad.size() != node.value.size()) {
    node.grad = Tensor(node.value.shape(), 0.0);
  }
  return node.grad;
}

void Tape::backward(Var output) {
  if (&output.tape() != this) shape_error("backward", "output belongs to another tape");
  if (!recording_) throw Error(ErrorKind::kInvalidArgument, "backward: tape is not recording", "backward");
  if (value(output.id()).size() != 1) {
    shape_error("backward", "output must be scalar, got " + shape_string(value(output.id()).shape()));
  }
  grad_slot(output.id())[0] += 1.0;
  for (std::size_t id = output.id() + 1; id-- > 0;) {
    Node& node = nodes_[id];
    if (node.backward && node.grad.size() == node.value.size() && node.value.size() > 0) {
      node.backward(*this, id);
    }
  }
}

Tensor Tape::grad(Var v) const {
  const Node& node = nodes_.at(v.id());
  if (node.grad.size() != node.value.size()) return Tensor(node.value.shape(), 0.0);
  return node.grad;
}

// -------------------------------------------------------------------------

namespace kernels {

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
    shape_error("matmul", shape_string(a.shape()) + " x " + shape_string(b.shape()));
  }
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  Tensor out({m, n}, 0.0);
  const double* ap = a.data().data();
  const double* bp = b.data().data();
  double* op = out.data().data();
  for (std::size_t i = 0; i < m; ++i) {
    double* orow = op + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = ap[i * k + p];
      if (av == 0.0) continue;
      const double* brow = bp + p * n;
      for (std::size_t j = 0; j < n; ++j) orow[j] += av * brow[j];
    }
  }
  return out;
}

void add_bias_inplace(Tensor& a, const Tensor& bias) {
  if (a.rank() != 2 || bias.rank() != 1 || a.dim(1) != bias.dim(0)) {
    shape_error("add_bias", shape_string(a.shape()) + " + " + shape_string(bias.shape()));
  }
  const std::size_t m = a.dim(0), n = a.dim(1);
  auto d = a.data();
  auto b = bias.data();
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) d[i * n + j] += b[j];
  }
}

void relu_inplace(Tensor& a) {
  for (double& v : a.data()) v = v > 0.0 ? v : 0.0;
}

Tensor softmax_rows(const Tensor& a) {
  const auto [rows, cols] = rows_cols("softmax", a);
  Tensor out = a;
  auto d = out.data();
  for (std::size_t r = 0; r < rows; ++r) {
    double* row = d.data() + r * cols;
    const double mx = *std::max_element(row, row + cols);
    double total = 0.0;
    for (std::size_t j = 0; j < cols; ++j) {
      row[j] = std::exp(row[j] - mx);
      total += row[j];
    }
    for (std::size_t j = 0; j < cols; ++j) row[j] /= total;
  }
  return out;
}

}  // namespace kernels

// -------------------------------------------------------------------------

Var add(Var a, Var b) {
  require_same_tape("add", a, b);
  require_same_shape("add", a.value(), b.value());
  Tensor out = a.value();
  axpy(out, 1.0, b.value());
  return binary("add", a, b, std::move(out), [ia = a.id(), ib = b.id()](Tape& t, std::size_t self) {
    const Tensor& g = t.grad_slot(self);
    if (t.requires_grad(ia)) axpy(t.grad_slot(ia), 1.0, g);
    if (t.requires_grad(ib)) axpy(t.grad_slot(ib), 1.0, g);
  });
}

Var sub(Var a, Var b) {
  require_same_tape("sub", a, b);
  require_same_shape("sub", a.value(), b.value());
  Tensor out = a.value();
  axpy(out, -1.0, b.value());
  return binary("sub", a, b, std::move(out), [ia = a.id(), ib = b.id()](Tape& t, std::size_t self) {
    const Tensor& g = t.grad_slot(self);
    if (t.requires_grad(ia)) axpy(t.grad_slot(ia), 1.0, g);
    if (t.requires_grad(ib)) axpy(t.grad_slot(ib), -1.0, g);
  });
}

Var mul(Var a, Var b) {
  require_same_tape("mul", a, b);
  require_same_shape("mul", a.value(), b.value());
  Tensor out = a.value();
  {
    auto o = out.data();
    auto bv = b.value().data();
    for (std::size_t i = 0; i < o.size(); ++i) o[i] *= bv[i];
  }
  return binary("mul", a, b, std::move(out), [ia = a.id(), ib = b.id()](Tape& t, std::size_t self) {
    const Tensor& g = t.grad_slot(self);
    if (t.requires_grad(ia)) {
      auto ga = t.grad_slot(ia).data();
      auto bv = t.value(ib).data();
      for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g[i] * bv[i];
    }
    if (t.requires_grad(ib)) {
      auto gb = t.grad_slot(ib).data();
      auto av = t.value(ia).data();
      for (std::size_t i = 0; i < gb.size(); ++i) gb[i] += g[i] * av[i];
    }
  });
}

Var scale(Var a, double factor) {
  Tensor out = a.value();
  for (double& v : out.data()) v *= factor;
  return unary("scale", a, std::move(out), [ia = a.id(), factor](Tape& t, std::size_t self) {
    axpy(t.grad_slot(ia), factor, t.grad_slot(self));
  });
}

Var one_minus(Var a) {
  Tensor out = a.value();
  for (double& v : out.data()) v = 1.0 - v;
  return unary("one_minus", a, std::move(out), [ia = a.id()](Tape& t, std::size_t self) {
    axpy(t.grad_slot(ia), -1.0, t.grad_slot(self));
  });
}

Var matmul(Var a, Var b) {
  require_same_tape("matmul", a, b);
  Tensor out = kernels::matmul(a.value(), b.value());
  return binary("matmul", a, b, std::move(out), [ia = a.id(), ib = b.id()](Tape& t, std::size_t self) {
    const Tensor& g = t.grad_slot(self);
    if (t.requires_grad(ia)) matmul_bt_accumulate(t.grad_slot(ia), g, t.value(ib));
    if (t.requires_grad(ib)) matmul_at_accumulate(t.grad_slot(ib), t.value(ia), g);
  });
}

Var add_bias(Var a, Var bias) {
  require_same_tape("add_bias", a, bias);
  Tensor out = a.value();
  kernels::add_bias_inplace(out, bias.value());
  return binary("add_bias", a, bias, std::move(out), [ia = a.id(), ib = bias.id()](Tape& t, std::size_t self) {
    const Tensor& g = t.grad_slot(self);
    if (t.requires_grad(ia)) axpy(t.grad_slot(ia), 1.0, g);
    if (t.requires_grad(ib)) {
      auto gb = t.grad_slot(ib).data();
      const std::size_t n = gb.size();
      const std::size_t m = g.size() / n;
      for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t j = 0; j < n; ++j) gb[j] += g[i * n + j];
      }
    }
  });
}

Var broadcast_rows(Var a, std::size_t rows) {
  const std::size_t d = a.value().size();
  Tensor out({rows, d}, 0.0);
  auto o = out.data();
  auto av = a.value().data();
  for (std::size_t r = 0; r < rows; ++r) std::copy(av.begin(), av.end(), o.begin() + r * d);
  return unary("broadcast_rows", a, std::move(out), [ia = a.id(), rows, d](Tape& t, std::size_t self) {
    const Tensor& g = t.grad_slot(self);
    auto ga = t.grad_slot(ia).data();
    for (std::size_t r = 0; r < rows; ++r) {
      for (std::size_t j = 0; j < d; ++j) ga[j] += g[r * d + j];
    }
  });
}

Var broadcast_channels(Var mask, std::size_t channels) {
  const Tensor& m = mask.value();
  if (m.rank() != 2) shape_error("broadcast_channels", "mask must be [H,W], got " + shape_string(m.shape()));
  const std::size_t cells = m.size();
  Tensor out({m.dim(0), m.dim(1), channels}, 0.0);
  auto o = out.data();
  for (std::size_t i = 0; i < cells; ++i) {
    for (std::size_t c = 0; c < channels; ++c) o[i * channels + c] = m[i];
  }
  return unary("broadcast_channels", mask, std::move(out),
               [im = mask.id(), cells, channels](Tape& t, std::size_t self) {
                 const Tensor& g = t.grad_slot(self);
                 auto gm = t.grad_slot(im).data();
                 for (std::size_t i = 0; i < cells; ++i) {
                   for (std::size_t c = 0; c < channels; ++c) gm[i] += g[i * channels + c];
                 }
               });
}

Var reshape(Var a, Shape shape) {
  Tensor out = a.value().reshaped(std::move(shape));
  return unary("reshape", a, std::move(out), [ia = a.id()](Tape& t, std::size_t self) {
    axpy(t.grad_slot(ia), 1.0, t.grad_slot(self));
  });
}

Var relu(Var a) {
  Tensor out = a.value();
  kernels::relu_inplace(out);
  return unary("relu", a, std::move(out), [ia = a.id()](Tape& t, std::size_t self) {
    const Tensor& g = t.grad_slot(self);
    auto ga = t.grad_slot(ia).data();
    auto av = t.value(ia).data();
    for (std::size_t i = 0; i < ga.size(); ++i) {
      if (av[i] > 0.0) ga[i] += g[i];
    }
  });
}

Var softmax(Var a) {
  Tensor out = kernels::softmax_rows(a.value());
  return unary("softmax", a, std::move(out), [ia = a.id()](Tape& t, std::size_t self) {
    const Tensor& y = t.value(self);
    const Tensor& g = t.grad_slot(self);
    const auto [rows, cols] = rows_cols("softmax", y);
    auto ga = t.grad_slot(ia).data();
    for (std::size_t r = 0; r < rows; ++r) {
      double inner = 0.0;
      for (std::size_t j = 0; j < cols; ++j) inner += g[r * cols + j] * y[r * cols + j];
      for (std::size_t j = 0; j < cols; ++j) {
        ga[r * cols + j] += y[r * cols + j] * (g[r * cols + j] - inner);
      }
    }
  });
}

Var log(Var a) {
  Tensor out = a.value();
  for (double& v : out.data()) {
    if (!(v > 0.0)) throw Error(ErrorKind::kNumeric, "log: non-positive input", "log");
    v = std::log(v);
  }
  return unary("log", a, std::move(out), [ia = a.id()](Tape& t, std::size_t self) {
    const Tensor& g = t.grad_slot(self);
    auto ga = t.grad_slot(ia).data();
    auto av = t.value(ia).data();
    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g[i] / av[i];
  });
}

Var exp(Var a) {
  Tensor out = a.value();
  for (double& v : out.data()) v = std::exp(v);
  return unary("exp", a, std::move(out), [ia = a.id()](Tape& t, std::size_t self) {
    const Tensor& g = t.grad_slot(self);
    const Tensor& y = t.value(self);
    auto ga = t.grad_slot(ia).data();
    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g[i] * y[i];
  });
}

Var sum(Var a) {
  double total = 0.0;
  for (double v : a.value().data()) total += v;
  return unary("sum", a, Tensor::scalar(total), [ia = a.id()](Tape& t, std::size_t self) {
    const double g = t.grad_slot(self)[0];
    for (double& v : t.grad_slot(ia).data()) v += g;
  });
}

Var mean(Var a) {
  const std::size_t n = a.value().size();
  if (n == 0) shape_error("mean", "empty tensor");
  double total = 0.0;
  for (double v : a.value().data()) total += v;
  return unary("mean", a, Tensor::scalar(total / static_cast<double>(n)), [ia = a.id(), n](Tape& t, std::size_t self) {
    const double g = t.grad_slot(self)[0] / static_cast<double>(n);
    for (double& v : t.grad_slot(ia).data()) v += g;
  });
}

Var l1_norm(Var a) {
  double total = 0.0;
  for (double v : a.value().data()) total += std::abs(v);
  return unary("l1_norm", a, Tensor::scalar(total), [ia = a.id()](Tape& t, std::size_t self) {
    const double g = t.grad_slot(self)[0];
    auto ga = t.grad_slot(ia).data();
    auto av = t.value(ia).data();
    for (std::size_t i = 0; i < ga.size(); ++i) {
      if (av[i] > 0.0) ga[i] += g;
      else if (av[i] < 0.0) ga[i] -= g;
    }
  });
}

Var l2_norm(Var a) {
  double sq = 0.0;
  for (double v : a.value().data()) sq += v * v;
  const double norm = std::sqrt(sq);
  return unary("l2_norm", a, Tensor::scalar(norm), [ia = a.id(), norm](Tape& t, std::size_t self) {
    if (norm == 0.0) return;
    const double g = t.grad_slot(self)[0] / norm;
    axpy(t.grad_slot(ia), g, t.value(ia));
  });
}

Var dot(Var a, Var b) {
  require_same_tape("dot", a, b);
  if (a.value().size() != b.value().size()) {
    shape_error("dot", shape_string(a.shape()) + " . " + shape_string(b.shape()));
  }
  double total = 0.0;
  auto av = a.value().data();
  auto bv = b.value().data();
  for (std::size_t i = 0; i < av.size(); ++i) total += av[i] * bv[i];
  return binary("dot", a, b, Tensor::scalar(total), [ia = a.id(), ib = b.id()](Tape& t, std::size_t self) {
    const double g = t.grad_slot(self)[0];
    const Tensor& a_val = t.value(ia);
    const Tensor& b_val = t.value(ib);
    if (t.requires_grad(ia)) axpy(t.grad_slot(ia), g, b_val);
    if (t.requires_grad(ib)) axpy(t.grad_slot(ib), g, a_val);
  });
}

Var clamp01(Var a) {
  Tensor out = a.value();
  for (double& v : out.data()) v = std::clamp(v, 0.0, 1.0);
  return unary("clamp01", a, std::move(out), [ia = a.id()](Tape& t, std::size_t self) {
    const Tensor& g = t.grad_slot(self);
    auto ga = t.grad_slot(ia).data();
    auto av = t.value(ia).data();
    for (std::size_t i = 0; i < ga.size(); ++i) {
      if (av[i] >= 0.0 && av[i] <= 1.0) ga[i] += g[i];
    }
  });
}

Var cross_entropy_mean(Var logits, std::span<const int> labels) {
  const auto [rows, cols] = rows_cols("cross_entropy", logits.value());
  if (labels.size() != rows) {
    shape_error("cross_entropy", std::to_string(labels.size()) + " labels for logits " +
                                     shape_string(logits.shape()));
  }
  const auto z = logits.value().data();
  std::vector<double> probs(rows * cols);
  std::vector<int> lab(labels.begin(), labels.end());
  double total = 0.0;
  for (std::size_t r = 0; r < rows; ++r) {
    const int y = lab[r];
    if (y < 0 || static_cast<std::size_t>(y) >= cols) {
      throw Error(ErrorKind::kOutOfRange,
                  "cross_entropy: label " + std::to_string(y) + " outside [0," + std::to_string(cols) + ")",
                  "cross_entropy");
    }
    const double* row = z.data() + r * cols;
    const double mx = *std::max_element(row, row + cols);
    double s = 0.0;
    for (std::size_t j = 0; j < cols; ++j) {
      probs[r * cols + j] = std::exp(row[j] - mx);
      s += probs[r * cols + j];
    }
    for (std::size_t j = 0; j < cols; ++j) probs[r * cols + j] /= s;
    total += (mx + std::log(s)) - row[y];
  }
  const double n = static_cast<double>(rows);
  return unary("cross_entropy", logits, Tensor::scalar(total / n),
               [il = logits.id(), probs = std::move(probs), lab = std::move(lab), cols, n](Tape& t, std::size_t self) {
                 const double g = t.grad_slot(self)[0] / n;
                 auto gl = t.grad_slot(il).data();
                 for (std::size_t r = 0; r < lab.size(); ++r) {
                   for (std::size_t j = 0; j < cols; ++j) {
                     const double onehot = static_cast<int>(j) == lab[r] ? 1.0 : 0.0;
                     gl[r * cols + j] += g * (probs[r * cols + j] - onehot);
                   }
                 }
               });
}

Var row_cosine_mean(Var a, Var b) {
  require_same_tape("row_cosine", a, b);
  require_same_shape("row_cosine", a.value(), b.value());
  const auto [rows, cols] = rows_cols("row_cosine", a.value());
  const auto av = a.value().data();
  const auto bv = b.value().data();
  std::vector<double> na(rows), nb(rows), cosine(rows);
  double total = 0.0;
  for (std::size_t r = 0; r < rows; ++r) {
    double aa = 0.0, bb = 0.0, ab = 0.0;
    for (std::size_t j = 0; j < cols; ++j) {
      const double x = av[r * cols + j], y = bv[r * cols + j];
      aa += x * x;
      bb += y * y;
      ab += x * y;
    }
    na[r] = std::sqrt(aa);
    nb[r] = std::sqrt(bb);
    cosine[r] = ab / (std::max(na[r], kNormFloor) * std::max(nb[r], kNormFloor));
    total += cosine[r];
  }
  const double n = static_cast<double>(rows);
  return binary("row_cosine", a, b, Tensor::scalar(total / n),
                [ia = a.id(), ib = b.id(), na = std::move(na), nb = std::move(nb), cosine = std::move(cosine), cols,
                 n](Tape& t, std::size_t self) {
                  const double g = t.grad_slot(self)[0] / n;
                  const Tensor& a_val = t.value(ia);
                  const Tensor& b_val = t.value(ib);
                  // d cos / d a = b/(|a||b|) - cos * a/|a|^2 ; the second term vanishes
                  // when |a| sits on the floor (treated as a constant).
                  auto side = [&](std::size_t target, const Tensor& self_val, const Tensor& other_val,
                                  const std::vector<double>& self_norm, const std::vector<double>& other_norm) {
                    auto gt = t.grad_slot(target).data();
                    for (std::size_t r = 0; r < self_norm.size(); ++r) {
                      const double ns = std::max(self_norm[r], kNormFloor);
                      const double no = std::max(other_norm[r], kNormFloor);
                      const double radial = self_norm[r] > kNormFloor ? cosine[r] / (ns * ns) : 0.0;
                      for (std::size_t j = 0; j < cols; ++j) {
                        const std::size_t k = r * cols + j;
                        gt[k] += g * (other_val[k] / (ns * no) - radial * self_val[k]);
                      }
                    }
                  };
                  if (t.requires_grad(ia)) side(ia, a_val, b_val, na, nb);
                  if (t.requires_grad(ib)) side(ib, b_val, a_val, nb, na);
                });
}

// -------------------------------------------------------------------------

ValueAndGradients evaluate_with_gradients(const GraphFn& graph, std::span<const Tensor> leaves) {
  Tape tape;
  std::vector<Var> vars;
  vars.reserve(leaves.size());
  for (const Tensor& leaf : leaves) vars.push_back(tape.leaf(leaf));
  const Var out = graph(tape, vars);
  if (out.value().size() != 1) {
    shape_error("evaluate_with_gradients", "graph output must be scalar, got " + shape_string(out.shape()));
  }
  tape.backward(out);
  ValueAndGradients result{out.value(), {}};
  result.gradients.reserve(vars.size());
  for (const Var& v : vars) result.gradients.push_back(tape.grad(v));
  return result;
}

Tensor finite_difference_gradient(const std::function<double(const Tensor&)>& f, const Tensor& x, double eps) {
  if (!(eps > 0.0)) {
    throw Error(ErrorKind::kInvalidArgument, "finite_difference_gradient: eps must be positive", "eps");
  }
  Tensor probe = x;
  Tensor grad(x.shape(), 0.0);
  for (std::size_t i = 0; i < x.size(); ++i) {
    probe[i] = x[i] + eps;
    const double hi = f(probe);
    probe[i] = x[i] - eps;
    const double lo = f(probe);
    probe[i] = x[i];
    grad[i] = (hi - lo) / (2.0 * eps);
  }
  return grad;
}

}  // namespace fedbap
