// Runs every acceptance criterion and prints one PASS/FAIL line per
// criterion. Usage: fedbap_acceptance <desk-config.json>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <limits>
#include <numeric>
#include <string>
#include <vector>

#include "fedbap/aggregation.hpp"
#include "fedbap/badnets.hpp"
#include "fedbap/defense.hpp"
#include "fedbap/io.hpp"
#include "fedbap/simulation.hpp"
#include "gradcheck.hpp"
#include "test_util.hpp"

using namespace fedbap;
using fedbap::testing::random_tensor;

namespace {

constexpr int kSeeds = 3;

struct Outcome {
  bool pass = false;
  std::string detail;
};

int failures = 0;

void report(int id, const std::string& name, const std::function<Outcome()>& check) {
  const auto t0 = std::chrono::steady_clock::now();
  Outcome o;
  try {
    o = check();
  } catch (const std::exception& e) {
    o = {false, std::string("exception: ") + e.what()};
  }
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  if (!o.pass) ++failures;
  std::printf("%s criterion %2d %-28s %s (%.1fs)\n", o.pass ? "PASS" : "FAIL", id, name.c_str(), o.detail.c_str(),
              secs);
  std::fflush(stdout);
}

std::string fmt(const char* f, double a, double b = 0, double c = 0, double d = 0) {
  char buf[256];
  std::snprintf(buf, sizeof buf, f, a, b, c, d);
  return buf;
}

Summary mean_summary(ExperimentConfig cfg) {
  Summary s;
  for (int k = 0; k < kSeeds; ++k) {
    cfg.seed = static_cast<std::uint64_t>(k);
    const Summary r = run_experiment(cfg).summary.value();
    s.absr += r.absr / kSeeds;
    s.bbsr += r.bbsr / kSeeds;
    s.acc += r.acc / kSeeds;
  }
  return s;
}

Outcome autodiff_oracle() {
  const auto t0 = std::chrono::steady_clock::now();
  const double worst = fedbap::testing::random_graph_worst_error(100, 7);
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return {worst < 1e-4 && secs < 10.0, fmt("max rel err %.3g", worst)};
}

Outcome logit_gap_bound() {
  Rng rng(11);
  int violations = 0;
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t in = 2 + uniform_index(12, rng);
    const MlpModel m = MlpModel::he_init(
        {in, 2 + uniform_index(12, rng), 2 + uniform_index(10, rng), 2 + uniform_index(9, rng)}, rng);
    const ForwardResult a = forward(m, random_tensor({1, in}, rng, 0.0, 1.0));
    const ForwardResult b = forward(m, random_tensor({1, in}, rng, 0.0, 1.0));
    double dq = 0.0, dr = 0.0;
    for (std::size_t i = 0; i < a.logits.size(); ++i) dq += std::pow(a.logits[i] - b.logits[i], 2);
    for (std::size_t i = 0; i < a.plr.size(); ++i) dr += std::pow(a.plr[i] - b.plr[i], 2);
    const double omega = spectral_norm(m.output_weight(), 1000, rng);
    if (std::sqrt(dq) > omega * std::sqrt(dr) * (1.0 + 1e-9) + 1e-12) ++violations;
  }
  return {violations == 0, fmt("%.0f violations / 100", violations)};
}

Outcome embed_identities() {
  Rng rng(12);
  int bad = 0;
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t h = 1 + uniform_index(8, rng), w = 1 + uniform_index(8, rng), c = 1 + uniform_index(3, rng);
    const Tensor x = random_tensor({h, w, c}, rng, 0.0, 1.0);
    const Tensor p = random_tensor({h, w, c}, rng, 0.0, 1.0);
    const Tensor m = random_tensor({h, w}, rng, 0.0, 1.0);
    bad += !(embed_trigger(x, Tensor({h, w}, 0.0), p) == x);
    bad += !(embed_trigger(x, Tensor({h, w}, 1.0), p) == p);
    bad += fedbap::testing::max_abs_diff(embed_trigger(x, m, x), x) > 4 * std::numeric_limits<double>::epsilon();
  }
  return {bad == 0, fmt("%.0f mismatches / 300", bad)};
}

Outcome scaling_arithmetic() {
  ScalingState s = adaptive_scaling(make_scaling_state(0, 1.0, 1.0, 5), 1.0, 0);
  const double e1 = std::abs(s.c - 2.0);
  const double e2 = std::abs(adaptive_scaling(s, 2.0, 1).c - s.c - 1.0 / std::sqrt(2.0));
  const double e3 = std::abs(adaptive_scaling(s, 0.5, 1).c - s.c - 4.0);
  Rng rng(13);
  bool increasing = true;
  for (int trial = 0; trial < 20; ++trial) {
    ScalingState st = make_scaling_state(5, 1.0, 1.0 + uniform01(rng), 5);
    for (int t = 5; t < 55; ++t) {
      const double before = st.c;
      st = adaptive_scaling(st, 1e-3 + 10.0 * uniform01(rng), t);
      increasing = increasing && st.c > before;
    }
  }
  const double worst = std::max({e1, e2, e3});
  return {worst <= 1e-12 && increasing, fmt("max err %.3g, strictly increasing %.0f", worst, increasing)};
}

Outcome krum_oracle() {
  Rng rng(14);
  int mismatches = 0;
  for (int trial = 0; trial < 50; ++trial) {
    const int f = static_cast<int>(uniform_index(3, rng));
    const std::size_t n = static_cast<std::size_t>(f) + 3 + uniform_index(static_cast<std::size_t>(6 - f), rng);
    const std::size_t dim = 1 + uniform_index(16, rng);
    std::vector<std::vector<double>> rows(n, std::vector<double>(dim));
    for (auto& r : rows)
      for (double& v : r) v = 2.0 * uniform01(rng) - 1.0;
    std::vector<ClientUpdate> u;
    for (std::size_t i = 0; i < n; ++i) u.push_back({static_cast<int>(i), ParamVector{rows[i]}});
    const UpdateSet set(std::move(u));

    std::vector<double> scores(n);
    for (std::size_t i = 0; i < n; ++i) {
      std::vector<double> d;
      for (std::size_t j = 0; j < n; ++j) {
        if (j == i) continue;
        double s = 0.0;
        for (std::size_t k = 0; k < dim; ++k) s += (rows[i][k] - rows[j][k]) * (rows[i][k] - rows[j][k]);
        d.push_back(s);
      }
      std::sort(d.begin(), d.end());
      scores[i] = std::accumulate(d.begin(), d.begin() + static_cast<long>(n) - f - 2, 0.0);
    }
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
    const int keep = 1 + static_cast<int>(uniform_index(n - static_cast<std::size_t>(f), rng));
    std::vector<std::size_t> top(order.begin(), order.begin() + keep);
    std::sort(top.begin(), top.end());
    mismatches += krum_select(set, f) != order[0];
    mismatches += multikrum_select(set, f, keep) != top;
  }
  std::vector<ClientUpdate> hand{{0, ParamVector{{1.0}}}, {1, ParamVector{{1.0}}}, {2, ParamVector{{-1.0}}}};
  const double rlr = aggregate_rlr(UpdateSet(hand), 2, 1.0).values[0];
  const bool rlr_ok = rlr == -1.0 / 3.0;
  return {mismatches == 0 && rlr_ok, fmt("%.0f selection mismatches, rlr %.6f", mismatches, rlr)};
}

Outcome dirichlet_invariants() {
  Rng meta(15);
  int broken = 0;
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t clients = 1 + uniform_index(20, meta);
    const double h = 0.05 + 20.0 * uniform01(meta);
    Rng rng(meta());
    const Dataset d = synth_blobs(20 + uniform_index(40, meta), 10, {2, 2, 1}, 0.1, rng);
    const Partition p = dirichlet_partition(d, clients, h, rng);
    std::vector<int> seen(d.size(), 0);
    for (const auto& shard : p.client_indices) {
      broken += shard.empty();
      for (std::size_t i : shard) ++seen[i];
    }
    broken += std::any_of(seen.begin(), seen.end(), [](int s) { return s != 1; });
  }
  Rng data_rng(16);
  const Dataset d = synth_blobs(100, 10, {1, 1, 1}, 0.1, data_rng);
  double e[3] = {0, 0, 0};
  const double hs[3] = {0.5, 0.9, 100.0};
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    for (int k = 0; k < 3; ++k) {
      Rng rng(seed * 31 + 1);
      const Partition p = dirichlet_partition(d, 10, hs[k], rng);
      for (const auto& shard : p.client_indices) e[k] += label_entropy(d, shard) / 100.0;
    }
  }
  const bool monotone = e[0] < e[1] && e[1] < e[2];
  return {broken == 0 && monotone, fmt("%.0f broken partitions, entropy %.3f < %.3f < %.3f", broken, e[0], e[1], e[2])};
}

Outcome determinism(const ExperimentConfig& desk) {
  const std::string a = format_metrics_csv(run_experiment(desk).records);
  const std::string b = format_metrics_csv(run_experiment(desk).records);
  return {a == b && !a.empty(), fmt("%.0f bytes, identical %.0f", static_cast<double>(a.size()), a == b)};
}

double iou(const Tensor& mask, const Tensor& region) {
  double inter = 0.0, uni = 0.0;
  for (std::size_t i = 0; i < mask.size(); ++i) {
    inter += mask[i] >= 0.5 && region[i] >= 0.5;
    uni += mask[i] >= 0.5 || region[i] >= 0.5;
  }
  return uni == 0.0 ? 0.0 : inter / uni;
}

double mean_distance(const TriggerSet& t) {
  double s = 0.0;
  for (const auto& m : t.client_masks) s += m.distance;
  return s / static_cast<double>(t.client_masks.size());
}

// A centrally trained model with a planted trigger against its clean twin;
// masks are recovered from clean client shards.
Outcome mask_recovery(ExperimentConfig cfg) {
  cfg.malicious_fraction = 0.0;
  const Simulation sim(cfg);
  const ExperimentData& data = sim.data();
  Rng rng(17);
  const Dataset poisoned = poison_dataset(data.train, data.trigger, rng);
  const MlpModel init = MlpModel::he_init(model_layer_dims(cfg, data.train.sample_dim()), rng);
  const SgdOptions opt{10, cfg.lr, static_cast<std::size_t>(cfg.batch_size)};
  const MlpModel backdoored = sgd_train(init, poisoned, opt, rng);
  const MlpModel clean = sgd_train(init, data.train, opt, rng);

  const TriggerSet bd = sim.generate_triggers(backdoored);
  const TriggerSet cl = sim.generate_triggers(clean);
  const double overlap = iou(bd.merged_mask, trigger_region_mask(data.trigger, data.train.image_shape()));
  const double ratio = mean_distance(cl) / mean_distance(bd);
  return {overlap >= 0.3 && ratio >= 2.0,
          fmt("IoU %.3f, distance clean %.2f / backdoored %.2f = %.2f", overlap, mean_distance(cl), mean_distance(bd),
              ratio)};
}

}  // namespace

int main(int argc, char** argv) {
  if (argc != 2) {
    std::fprintf(stderr, "usage: fedbap_acceptance <desk-config.json>\n");
    return 2;
  }
  const ExperimentConfig desk = parse_config(argv[1]);
  ExperimentConfig no_defense = desk;
  no_defense.fedbap = false;

  report(1, "autodiff gradient oracle", autodiff_oracle);
  report(2, "logit gap bound", logit_gap_bound);
  report(3, "trigger embedding identities", embed_identities);
  report(4, "adaptive scaling arithmetic", scaling_arithmetic);
  report(5, "krum / multikrum / rlr", krum_oracle);
  report(6, "dirichlet partition", dirichlet_invariants);
  report(7, "run determinism", [&] { return determinism(desk); });

  Summary base;
  report(8, "attack baseline", [&] {
    base = mean_summary(no_defense);
    return Outcome{base.absr >= 0.80 && base.acc >= 0.80, fmt("ABSR %.3f ACC %.3f", base.absr, base.acc)};
  });

  Summary full;
  report(9, "defense efficacy", [&] {
    full = mean_summary(desk);
    const bool ok = full.absr <= 0.10 && full.bbsr <= 0.15 && std::abs(full.acc - base.acc) <= 0.05;
    return Outcome{ok, fmt("ABSR %.3f BBSR %.3f ACC %.3f (baseline %.3f)", full.absr, full.bbsr, full.acc, base.acc)};
  });

  report(10, "ablation ordering", [&] {
    ExperimentConfig no_bap = desk, no_pg = desk;
    no_bap.bap = false;
    no_pg.pattern_gen = false;
    const double a_bap = mean_summary(no_bap).absr;
    const double a_pg = mean_summary(no_pg).absr;
    const bool ok = a_bap >= 0.80 && a_pg > full.absr && a_pg < a_bap;
    return Outcome{ok, fmt("w/o BAP %.3f > w/o PG %.3f > full %.3f", a_bap, a_pg, full.absr)};
  });

  report(11, "malicious proportion", [&] {
    const double fractions[4] = {0.1, 0.2, 0.3, 0.4};
    const double deltas[4] = {1.0, 1.0, 1.0, 3.0};
    bool ok = true;
    std::string detail;
    for (int i = 0; i < 4; ++i) {
      ExperimentConfig on = desk, off = no_defense;
      on.malicious_fraction = off.malicious_fraction = fractions[i];
      on.delta = deltas[i];
      const double a_on = fractions[i] == desk.malicious_fraction && deltas[i] == desk.delta ? full.absr
                                                                                              : mean_summary(on).absr;
      const double a_off = fractions[i] == desk.malicious_fraction ? base.absr : mean_summary(off).absr;
      ok = ok && a_on <= 0.10 && a_off >= 0.80;
      detail += fmt("%.1f: fedbap %.3f fedavg %.3f; ", fractions[i], a_on, a_off);
    }
    return Outcome{ok, detail};
  });

  report(12, "mask recovery", [&] { return mask_recovery(desk); });

  std::printf("%d of 12 criteria failed\n", failures);
  return failures == 0 ? 0 : 1;
}
