#include "fedbap/aggregation.hpp"

#include <algorithm>
#include <cstdlib>
#include <numeric>

#include "fedbap/error.hpp"

namespace fedbap {

namespace {

void require_nonempty(const UpdateSet& updates, const char* rule) {
  if (updates.empty()) throw Error(ErrorKind::kInvalidArgument, std::string(rule) + ": empty update set", rule);
}

void require_krum_size(const UpdateSet& updates, int f, const char* rule) {
  require_nonempty(updates, rule);
  if (f < 0 || updates.size() < static_cast<std::size_t>(f) + 3) {
    throw Error(ErrorKind::kInvalidArgument,
                std::string(rule) + ": need n >= f + 3 (n=" + std::to_string(updates.size()) +
                    ", f=" + std::to_string(f) + ")",
                "krum_f");
  }
}

double squared_distance(const ParamVector& a, const ParamVector& b) {
  double total = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = a.values[i] - b.values[i];
    total += d * d;
  }
  return total;
}

ParamVector mean_of(const UpdateSet& updates, const std::vector<std::size_t>& members) {
  ParamVector out{std::vector<double>(updates.dim(), 0.0)};
  for (std::size_t i : members) {
    const auto& v = updates[i].delta.values;
    for (std::size_t d = 0; d < v.size(); ++d) out.values[d] += v[d];
  }
  const double n = static_cast<double>(members.size());
  for (double& v : out.values) v /= n;
  return out;
}

std::vector<std::size_t> all_indices(const UpdateSet& updates) {
  std::vector<std::size_t> idx(updates.size());
  std::iota(idx.begin(), idx.end(), 0);
  return idx;
}

}  // namespace

UpdateSet::UpdateSet(std::vector<ClientUpdate> updates) : updates_(std::move(updates)) {
  std::sort(updates_.begin(), updates_.end(),
            [](const ClientUpdate& a, const ClientUpdate& b) { return a.client_id < b.client_id; });
  for (std::size_t i = 1; i < updates_.size(); ++i) {
    if (updates_[i].client_id == updates_[i - 1].client_id) {
      throw Error(ErrorKind::kInvalidArgument, "update_set: duplicate client id " + std::to_string(updates_[i].client_id),
                  "update_set");
    }
    if (updates_[i].delta.size() != updates_[0].delta.size()) {
      throw Error(ErrorKind::kShapeMismatch, "update_set: updates differ in length", "update_set");
    }
  }
}

AggregationRule parse_aggregation_rule(std::string_view name) {
  if (name == "fedavg") return AggregationRule::kFedAvg;
  if (name == "krum") return AggregationRule::kKrum;
  if (name == "multikrum") return AggregationRule::kMultiKrum;
  if (name == "rlr") return AggregationRule::kRlr;
  throw Error(ErrorKind::kOutOfRange, "unknown aggregation rule '" + std::string(name) + "'", "aggregation");
}

std::string_view to_string(AggregationRule rule) {
  switch (rule) {
    case AggregationRule::kFedAvg: return "fedavg";
    case AggregationRule::kKrum: return "krum";
    case AggregationRule::kMultiKrum: return "multikrum";
    case AggregationRule::kRlr: return "rlr";
  }
  return "fedavg";
}

ParamVector aggregate_fedavg(const UpdateSet& updates) {
  require_nonempty(updates, "fedavg");
  return mean_of(updates, all_indices(updates));
}

std::vector<double> krum_scores(const UpdateSet& updates, int f) {
  require_krum_size(updates, f, "krum");
  const std::size_t n = updates.size();
  std::vector<double> dist(n * n, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = i + 1; j < n; ++j) {
      dist[i * n + j] = dist[j * n + i] = squared_distance(updates[i].delta, updates[j].delta);
    }
  }
  const std::size_t neighbours = n - static_cast<std::size_t>(f) - 2;
  std::vector<double> scores(n);
  std::vector<double> row;
  for (std::size_t i = 0; i < n; ++i) {
    row.clear();
    for (std::size_t j = 0; j < n; ++j) {
      if (j != i) row.push_back(dist[i * n + j]);
    }
    std::sort(row.begin(), row.end());
    scores[i] = std::accumulate(row.begin(), row.begin() + static_cast<std::ptrdiff_t>(neighbours), 0.0);
  }
  return scores;
}

std::size_t krum_select(const UpdateSet& updates, int f) {
  const auto scores = krum_scores(updates, f);
  // Updates are sorted by id, so the first minimum has the lowest id.
  return static_cast<std::size_t>(std::min_element(scores.begin(), scores.end()) - scores.begin());
}

ParamVector aggregate_krum(const UpdateSet& updates, int f) { return updates[krum_select(updates, f)].delta; }

std::vector<std::size_t> multikrum_select(const UpdateSet& updates, int f, int m_keep) {
  const auto scores = krum_scores(updates, f);
  if (m_keep < 1 || static_cast<std::size_t>(m_keep) > updates.size() - static_cast<std::size_t>(f)) {
    throw Error(ErrorKind::kInvalidArgument, "multikrum: m_keep must lie in [1, n - f]", "multikrum_keep");
  }
  auto order = all_indices(updates);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  order.resize(static_cast<std::size_t>(m_keep));
  std::sort(order.begin(), order.end());
  return order;
}

ParamVector aggregate_multikrum(const UpdateSet& updates, int f, int m_keep) {
  return mean_of(updates, multikrum_select(updates, f, m_keep));
}

ParamVector aggregate_rlr(const UpdateSet& updates, int threshold, double server_lr) {
  require_nonempty(updates, "rlr");
  if (threshold < 0) throw Error(ErrorKind::kOutOfRange, "rlr: threshold must be >= 0", "rlr_threshold");
  ParamVector out = aggregate_fedavg(updates);
  for (std::size_t d = 0; d < out.size(); ++d) {
    int votes = 0;
    for (const auto& u : updates.updates()) {
      const double v = u.delta.values[d];
      votes += (v > 0.0) - (v < 0.0);
    }
    const double lr = std::abs(votes) >= threshold ? server_lr : -server_lr;
    out.values[d] *= lr;
  }
  return out;
}

ParamVector aggregate(const UpdateSet& updates, const AggregationConfig& cfg) {
  switch (cfg.rule) {
    case AggregationRule::kFedAvg: return aggregate_fedavg(updates);
    case AggregationRule::kKrum: return aggregate_krum(updates, cfg.krum_f);
    case AggregationRule::kMultiKrum: return aggregate_multikrum(updates, cfg.krum_f, cfg.multikrum_keep);
    case AggregationRule::kRlr: return aggregate_rlr(updates, cfg.rlr_threshold, cfg.server_lr);
  }
  return aggregate_fedavg(updates);
}

}  // namespace fedbap
