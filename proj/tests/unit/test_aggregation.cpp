#include <gtest/gtest.h>

#include <algorithm>
#include <numeric>

#include "fedbap/aggregation.hpp"
#include "fedbap/error.hpp"

using namespace fedbap;

namespace {

UpdateSet make_set(const std::vector<std::vector<double>>& rows) {
  std::vector<ClientUpdate> u;
  for (std::size_t i = 0; i < rows.size(); ++i) u.push_back({static_cast<int>(i), ParamVector{rows[i]}});
  return UpdateSet(std::move(u));
}

double sq_dist(const std::vector<double>& a, const std::vector<double>& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
  return s;
}

// Exhaustive reference: for each candidate, sort the distances to all others
// and add up the n - f - 2 smallest.
std::vector<double> brute_scores(const std::vector<std::vector<double>>& rows, int f) {
  const std::size_t n = rows.size();
  std::vector<double> scores(n);
  for (std::size_t i = 0; i < n; ++i) {
    std::vector<double> d;
    for (std::size_t j = 0; j < n; ++j)
      if (j != i) d.push_back(sq_dist(rows[i], rows[j]));
    std::sort(d.begin(), d.end());
    scores[i] = std::accumulate(d.begin(), d.begin() + static_cast<long>(n) - f - 2, 0.0);
  }
  return scores;
}

std::vector<std::size_t> brute_rank(const std::vector<double>& scores) {
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  return order;
}

}  // namespace

TEST(UpdateSetType, SortsAndValidates) {
  const UpdateSet s({{5, ParamVector{{1.0}}}, {2, ParamVector{{2.0}}}});
  EXPECT_EQ(s[0].client_id, 2);
  EXPECT_THROW(UpdateSet({{1, ParamVector{{1.0}}}, {1, ParamVector{{2.0}}}}), Error);
  EXPECT_THROW(UpdateSet({{1, ParamVector{{1.0}}}, {2, ParamVector{{2.0, 3.0}}}}), Error);
}

TEST(FedAvg, Examples) {
  EXPECT_EQ(aggregate_fedavg(make_set({{1, 2}, {3, 4}, {5, 6}})).values, (std::vector<double>{3, 4}));
  EXPECT_EQ(aggregate_fedavg(make_set({{0.3, -2}})).values, (std::vector<double>{0.3, -2}));
  EXPECT_EQ(aggregate_fedavg(make_set({{0.3, -2}, {-0.3, 2}})).values, (std::vector<double>{0, 0}));
  EXPECT_THROW(aggregate_fedavg(UpdateSet()), Error);
}

TEST(FedAvg, TranslationEquivariant) {
  Rng rng(1);
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<std::vector<double>> rows(5, std::vector<double>(4)), shifted = rows;
    const std::vector<double> c{1.0, -2.0, 0.5, 3.0};
    for (std::size_t i = 0; i < 5; ++i)
      for (std::size_t k = 0; k < 4; ++k) {
        rows[i][k] = uniform01(rng);
        shifted[i][k] = rows[i][k] + c[k];
      }
    const auto base = aggregate_fedavg(make_set(rows)).values;
    const auto moved = aggregate_fedavg(make_set(shifted)).values;
    for (std::size_t k = 0; k < 4; ++k) EXPECT_NEAR(moved[k], base[k] + c[k], 1e-12);
  }
}

TEST(FedAvg, ZeroDeltasKeepTheModel) {
  EXPECT_EQ(aggregate_fedavg(make_set({{0, 0, 0}, {0, 0, 0}})).values, (std::vector<double>(3, 0.0)));
}

TEST(Krum, IdenticalUpdatesPickLowestId) {
  const UpdateSet s = make_set({{1, 1}, {1, 1}, {1, 1}, {1, 1}});
  EXPECT_EQ(krum_select(s, 1), 0u);
  EXPECT_EQ(aggregate_krum(s, 1).values, (std::vector<double>{1, 1}));
}

TEST(Krum, OutlierNeverSelected) {
  const UpdateSet s = make_set({{0.05, 0}, {0, 0.1}, {-0.05, 0.02}, {0.01, -0.07}, {100, 0}});
  EXPECT_NE(krum_select(s, 1), 4u);
  const auto kept = multikrum_select(s, 1, 3);
  EXPECT_EQ(std::count(kept.begin(), kept.end(), 4u), 0);
}

TEST(Krum, TooFewUpdatesIsRejected) {
  const UpdateSet s = make_set({{1}, {2}, {3}});
  EXPECT_THROW(krum_select(s, 1), Error);
  EXPECT_THROW(aggregate_multikrum(make_set({{1}, {2}, {3}, {4}}), 1, 4), Error);
  EXPECT_THROW(aggregate_multikrum(make_set({{1}, {2}, {3}, {4}}), 1, 0), Error);
}

TEST(Krum, MatchesBruteForceOracle) {
  Rng rng(2);
  for (int trial = 0; trial < 50; ++trial) {
    const int f = static_cast<int>(uniform_index(3, rng));
    const std::size_t n = static_cast<std::size_t>(f) + 3 + uniform_index(static_cast<std::size_t>(6 - f), rng);
    const std::size_t dim = 1 + uniform_index(16, rng);
    std::vector<std::vector<double>> rows(n, std::vector<double>(dim));
    for (auto& r : rows)
      for (double& v : r) v = uniform01(rng) * 2.0 - 1.0;
    // Repeat a row now and then so ties are exercised.
    if (trial % 5 == 0) rows[n - 1] = rows[0];
    const UpdateSet s = make_set(rows);

    const auto want = brute_scores(rows, f);
    const auto got = krum_scores(s, f);
    for (std::size_t i = 0; i < n; ++i) ASSERT_NEAR(got[i], want[i], 1e-12);
    const auto rank = brute_rank(want);
    ASSERT_EQ(krum_select(s, f), rank[0]);
    EXPECT_EQ(aggregate_krum(s, f).values, rows[rank[0]]);

    const int keep = 1 + static_cast<int>(uniform_index(n - static_cast<std::size_t>(f), rng));
    std::vector<std::size_t> top(rank.begin(), rank.begin() + keep);
    std::sort(top.begin(), top.end());
    ASSERT_EQ(multikrum_select(s, f, keep), top);
  }
}

TEST(MultiKrum, Reductions) {
  const UpdateSet s = make_set({{0.1, 0.2}, {0.3, -0.1}, {0.0, 0.0}, {-0.2, 0.4}, {0.5, 0.5}});
  EXPECT_EQ(aggregate_multikrum(s, 1, 1).values, aggregate_krum(s, 1).values);
  // keep-all only satisfies the precondition with f = 0.
  const auto all = aggregate_multikrum(s, 0, 5).values;
  const auto avg = aggregate_fedavg(s).values;
  for (std::size_t k = 0; k < 2; ++k) EXPECT_NEAR(all[k], avg[k], 1e-15);
}

TEST(MultiKrum, ExcludesOutlier) {
  const UpdateSet s = make_set({{0.0}, {0.1}, {0.2}, {0.15}, {50.0}});
  const double got = aggregate_multikrum(s, 1, 3).values[0];
  EXPECT_LT(got, 1.0);
}

TEST(Rlr, HandExample) {
  const ParamVector out = aggregate_rlr(make_set({{1}, {1}, {-1}}), 2, 1.0);
  EXPECT_DOUBLE_EQ(out.values[0], -1.0 / 3.0);
  EXPECT_DOUBLE_EQ(aggregate_rlr(make_set({{1}, {1}, {-1}}), 2, 0.5).values[0], -0.5 / 3.0);
}

TEST(Rlr, ThresholdZeroAndUnanimous) {
  const UpdateSet s = make_set({{1, -2}, {3, 0.5}, {-1, -1}});
  const auto avg = aggregate_fedavg(s).values;
  const auto r0 = aggregate_rlr(s, 0, 2.0).values;
  for (std::size_t k = 0; k < 2; ++k) EXPECT_DOUBLE_EQ(r0[k], 2.0 * avg[k]);
  const UpdateSet agree = make_set({{1, -2}, {3, -0.5}, {2, -1}});
  EXPECT_EQ(aggregate_rlr(agree, 3, 1.0).values, aggregate_fedavg(agree).values);
}

TEST(Rlr, ZeroHasNoSign) {
  // sign votes: +1, 0, 0 -> |1| < 2, flipped.
  EXPECT_LT(aggregate_rlr(make_set({{3}, {0}, {0}}), 2, 1.0).values[0], 0.0);
}

TEST(Aggregation, PermutationInvariant) {
  Rng rng(3);
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<ClientUpdate> u;
    for (int i = 0; i < 7; ++i) {
      std::vector<double> v(5);
      for (double& x : v) x = uniform01(rng) - 0.5;
      u.push_back({i * 3, ParamVector{v}});
    }
    std::vector<ClientUpdate> shuffled = u;
    std::shuffle(shuffled.begin(), shuffled.end(), rng);
    for (auto rule : {AggregationRule::kFedAvg, AggregationRule::kKrum, AggregationRule::kMultiKrum,
                      AggregationRule::kRlr}) {
      const AggregationConfig cfg{rule, 2, 3, 3, 1.0};
      EXPECT_EQ(aggregate(UpdateSet(u), cfg), aggregate(UpdateSet(shuffled), cfg));
    }
  }
}

TEST(Aggregation, RuleNames) {
  for (auto rule : {AggregationRule::kFedAvg, AggregationRule::kKrum, AggregationRule::kMultiKrum,
                    AggregationRule::kRlr})
    EXPECT_EQ(parse_aggregation_rule(to_string(rule)), rule);
  EXPECT_THROW(parse_aggregation_rule("median"), Error);
}
