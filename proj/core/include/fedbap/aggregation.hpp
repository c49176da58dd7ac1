#pragma once

#include <string>
#include <string_view>
#include <vector>

#include "fedbap/mlp.hpp"

namespace fedbap {

struct ClientUpdate {
  int client_id = 0;
  ParamVector delta;
};

/// One round's uploads, sorted by client id. All deltas share one length.
class UpdateSet {
 public:
  UpdateSet() = default;
  /// Sorts by client id; rejects duplicate ids and ragged lengths.
  explicit UpdateSet(std::vector<ClientUpdate> updates);

  std::size_t size() const noexcept { return updates_.size(); }
  bool empty() const noexcept { return updates_.empty(); }
  std::size_t dim() const noexcept { return updates_.empty() ? 0 : updates_.front().delta.size(); }
  const ClientUpdate& operator[](std::size_t i) const { return updates_[i]; }
  const std::vector<ClientUpdate>& updates() const noexcept { return updates_; }

 private:
  std::vector<ClientUpdate> updates_;
};

enum class AggregationRule { kFedAvg, kKrum, kMultiKrum, kRlr };

AggregationRule parse_aggregation_rule(std::string_view name);
std::string_view to_string(AggregationRule rule);

ParamVector aggregate_fedavg(const UpdateSet& updates);

/// Krum score of each update: sum of squared distances to its n - f - 2
/// nearest peers.
std::vector<double> krum_scores(const UpdateSet& updates, int f);
/// Index (into `updates`) of the lowest score; ties go to the lowest client id.
std::size_t krum_select(const UpdateSet& updates, int f);
ParamVector aggregate_krum(const UpdateSet& updates, int f);

/// Indices of the m_keep lowest scores, ascending.
std::vector<std::size_t> multikrum_select(const UpdateSet& updates, int f, int m_keep);
ParamVector aggregate_multikrum(const UpdateSet& updates, int f, int m_keep);

/// Robust learning rate: coordinates whose summed update signs fall short
/// of `threshold` in magnitude get a negated server learning rate.
ParamVector aggregate_rlr(const UpdateSet& updates, int threshold, double server_lr);

struct AggregationConfig {
  AggregationRule rule = AggregationRule::kFedAvg;
  int krum_f = 1;
  int multikrum_keep = 1;
  int rlr_threshold = 4;
  double server_lr = 1.0;
};

ParamVector aggregate(const UpdateSet& updates, const AggregationConfig& cfg);

}  // namespace fedbap
