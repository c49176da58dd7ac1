#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "fedbap/aggregation.hpp"
#include "fedbap/badnets.hpp"
#include "fedbap/dataset.hpp"
#include "fedbap/defense.hpp"
#include "fedbap/mlp.hpp"

namespace fedbap {

/// Every knob of one experiment. Defaults follow the full-scale profile
/// (100 clients, 200 rounds, defense from round 100).
struct ExperimentConfig {
  // Federation
  int n_clients = 100;
  double select_fraction = 0.1;
  double malicious_fraction = 0.1;
  int rounds = 200;
  int local_epochs = 2;
  double lr = 0.01;
  int batch_size = 64;

  // Aggregation; krum_f / multikrum_keep < 0 mean "derive from the round size".
  AggregationRule aggregation = AggregationRule::kFedAvg;
  int krum_f = -1;
  int multikrum_keep = -1;
  int rlr_threshold = 4;
  double server_lr = 1.0;

  // BadNets; trigger_row / trigger_col < 0 anchor the patch bottom-right.
  int trigger_size = 5;
  int target_label = 0;
  double poison_fraction = 0.5;
  double trigger_value = 1.0;
  int trigger_row = -1;
  int trigger_col = -1;

  // FedBAP
  bool fedbap = true;
  int start_round = 100;
  int maskgen_epochs = 100;
  double maskgen_lr = 0.1;
  double acc_threshold = 0.9;
  double lambda = 0.01;
  int patterngen_epochs = 100;
  double patterngen_lr = 10.0;
  int bap_epochs = 10;
  double bap_lr = 0.01;
  double bap_clip_norm = 0.0;  // 0 disables clipping
  double delta = 1.0;
  int window = 5;
  double initial_scale = 1.0;
  bool malicious_run_bap = false;
  // Ablation switches.
  bool adaptive_scaling = true;
  bool pattern_gen = true;
  bool bap = true;

  // Data
  std::string dataset = "blobs";  // "blobs" | "idx"
  std::string train_images;
  std::string train_labels;
  std::string test_images;
  std::string test_labels;
  int train_limit = 0;  // 0 = use all
  int test_limit = 0;
  int num_classes = 10;
  int image_height = 28;
  int image_width = 28;
  int image_channels = 1;
  int blob_train_per_class = 400;
  int blob_test_per_class = 100;
  double blob_spread = 0.15;
  double blob_contrast = 0.6;
  int blob_margin = 0;  // dark frame width around blob centers
  double dirichlet_h = 0.9;

  // Model
  std::vector<int> hidden_layers = {128, 64};

  // Harness
  std::uint64_t seed = 0;
  int eval_window = 20;
  int threads = 1;
};

/// Throws Error(kOutOfRange / kInvalidArgument) naming the offending key.
void validate(const ExperimentConfig& cfg);

enum class Role { kBenign, kMalicious };

struct ClientState {
  int id = 0;
  Role role = Role::kBenign;
  Dataset data;  // poisoned at construction for malicious clients
  Tensor pattern;  // personal perturbation pattern, set at the start round
};

struct RoundRecord {
  int round = 0;
  double acc = 0.0;
  double bsr = 0.0;
  double c = 0.0;  // scaling factor used during the round
  double mean_bap_loss = 0.0;
  std::vector<int> selected;
};

struct EvalResult {
  double acc = 0.0;
  double bsr = 0.0;
};

struct Summary {
  double absr = 0.0;
  double bbsr = 0.0;
  double acc = 0.0;
};

/// acc on the clean set; bsr = fraction of the triggered set predicted as
/// `target_label`.
EvalResult evaluate(const MlpModel& model, const Dataset& clean_test, const Dataset& triggered_test,
                    int target_label);

/// Mean / max bsr and mean acc over the last `window` records.
Summary summarize(std::span<const RoundRecord> records, int window);

struct TriggerSet {
  std::vector<MaskGenResult> client_masks;  // indexed by client id
  Tensor merged_mask;
  std::vector<Tensor> patterns;  // indexed by client id
};

/// Stream tags for seed derivation.
enum class SeedPurpose : std::uint64_t {
  kData = 1,
  kPartition,
  kRoles,
  kPoison,
  kInit,
  kSelect,
  kTrain,
  kBap,
  kMaskGen,
  kPatternGen,
};

std::uint64_t purpose_seed(std::uint64_t master, SeedPurpose purpose, std::uint64_t a = 0, std::uint64_t b = 0);

/// Train/test data and the attack configuration derived from a config.
struct ExperimentData {
  Dataset train;
  Dataset test;
  Dataset triggered_test;
  BadNetsConfig trigger;
};

ExperimentData build_experiment_data(const ExperimentConfig& cfg);
std::vector<std::size_t> model_layer_dims(const ExperimentConfig& cfg, std::size_t input_dim);

/// Round-by-round federated simulation with BadNets clients and the FedBAP
/// hooks. Client work within a round is independent and reduced in client id
/// order, so results do not depend on the thread count.
class Simulation {
 public:
  explicit Simulation(ExperimentConfig cfg);

  /// Executes round t (1-based) and returns its record.
  RoundRecord run_round(int t);

  const ExperimentConfig& config() const noexcept { return cfg_; }
  const MlpModel& global_model() const noexcept { return global_; }
  void set_global_model(MlpModel model);
  const std::vector<ClientState>& clients() const noexcept { return clients_; }
  const Partition& partition() const noexcept { return partition_; }
  const ExperimentData& data() const noexcept { return data_; }
  const ScalingState& scaling() const noexcept { return scaling_; }
  const Tensor& merged_mask() const noexcept { return merged_mask_; }
  const std::vector<MaskGenResult>& client_masks() const noexcept { return client_masks_; }

  std::size_t clients_per_round() const;
  /// Ascending ids of the clients sampled for round t.
  std::vector<int> select_clients(int t) const;
  /// Mask generation over every client, merge, then pattern generation.
  TriggerSet generate_triggers(const MlpModel& model) const;
  bool defense_active(int t) const;
  AggregationConfig aggregation_config() const;

 private:
  struct ClientResult {
    ParamVector delta;
    double loss = 0.0;
  };

  ClientResult run_client(const ClientState& client, int t, double c_t) const;

  ExperimentConfig cfg_;
  ExperimentData data_;
  Partition partition_;
  std::vector<ClientState> clients_;
  MlpModel global_;
  ScalingState scaling_;
  Tensor merged_mask_;
  std::vector<MaskGenResult> client_masks_;
};

struct ExperimentResult {
  MlpModel model;
  std::vector<RoundRecord> records;
  std::optional<Summary> summary;  // empty when no rounds ran
};

using RoundCallback = std::function<void(const RoundRecord&)>;

ExperimentResult run_experiment(const ExperimentConfig& cfg, const RoundCallback& on_round = {});

}  // namespace fedbap
