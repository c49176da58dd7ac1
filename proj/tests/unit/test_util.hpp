#pragma once

#include <cmath>
#include <ostream>
#include <vector>

#include "fedbap/rng.hpp"
#include "fedbap/simulation.hpp"
#include "fedbap/tensor.hpp"

namespace fedbap {

// gtest printer so failed tensor comparisons show values.
inline void PrintTo(const Tensor& t, std::ostream* os) {
  *os << shape_string(t.shape()) << " {";
  for (std::size_t i = 0; i < t.size() && i < 16; ++i) *os << (i ? ", " : "") << t[i];
  if (t.size() > 16) *os << ", ...";
  *os << "}";
}

}  // namespace fedbap

namespace fedbap::testing {

inline Tensor random_tensor(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  Tensor t(std::move(shape));
  for (double& v : t.data()) v = lo + (hi - lo) * uniform01(rng);
  return t;
}

inline double max_abs_diff(const Tensor& a, const Tensor& b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

// Small enough for a unit test to run a handful of rounds in well under a
// second.
inline ExperimentConfig tiny_config() {
  ExperimentConfig c;
  c.n_clients = 6;
  c.select_fraction = 0.5;
  c.malicious_fraction = 0.34;
  c.rounds = 6;
  c.start_round = 4;
  c.lr = 0.05;
  c.batch_size = 16;
  c.image_height = 8;
  c.image_width = 8;
  c.trigger_size = 3;
  c.hidden_layers = {16, 8};
  c.blob_train_per_class = 20;
  c.blob_test_per_class = 5;
  c.blob_contrast = 1.0;
  c.maskgen_epochs = 3;
  c.patterngen_epochs = 3;
  c.bap_epochs = 2;
  c.eval_window = 2;
  return c;
}

}  // namespace fedbap::testing
