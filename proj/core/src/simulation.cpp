#include "fedbap/simulation.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "fedbap/error.hpp"
#include "fedbap/parallel.hpp"

namespace fedbap {

namespace {

[[noreturn]] void bad_value(const std::string& key, const std::string& why) {
  throw Error(ErrorKind::kOutOfRange, key + ": " + why, key);
}

void require_fraction(const std::string& key, double v) {
  if (!(v >= 0.0 && v <= 1.0)) bad_value(key, "must lie in [0,1]");
}

void require_positive(const std::string& key, double v) {
  if (!(v > 0.0)) bad_value(key, "must be positive");
}

void require_at_least(const std::string& key, long long v, long long lo) {
  if (v < lo) bad_value(key, "must be >= " + std::to_string(lo));
}

Dataset take_prefix(const Dataset& d, int limit) {
  if (limit <= 0 || static_cast<std::size_t>(limit) >= d.size()) return d;
  std::vector<std::size_t> idx(static_cast<std::size_t>(limit));
  std::iota(idx.begin(), idx.end(), 0);
  return d.subset(idx);
}

}  // namespace

void validate(const ExperimentConfig& c) {
  require_at_least("n_clients", c.n_clients, 1);
  require_fraction("select_fraction", c.select_fraction);
  if (c.select_fraction == 0.0) bad_value("select_fraction", "must be positive");
  require_fraction("malicious_fraction", c.malicious_fraction);
  require_at_least("rounds", c.rounds, 0);
  require_at_least("local_epochs", c.local_epochs, 1);
  require_positive("lr", c.lr);
  require_at_least("batch_size", c.batch_size, 1);
  require_at_least("rlr_threshold", c.rlr_threshold, 0);
  require_positive("server_lr", c.server_lr);
  require_at_least("trigger_size", c.trigger_size, 1);
  if (c.target_label < 0 || c.target_label >= c.num_classes) bad_value("target_label", "outside the class range");
  require_fraction("poison_fraction", c.poison_fraction);
  require_fraction("trigger_value", c.trigger_value);
  require_at_least("start_round", c.start_round, 1);
  require_at_least("maskgen_epochs", c.maskgen_epochs, 1);
  require_positive("maskgen_lr", c.maskgen_lr);
  require_fraction("acc_threshold", c.acc_threshold);
  if (!(c.lambda >= 0.0)) bad_value("lambda", "must be >= 0");
  require_at_least("patterngen_epochs", c.patterngen_epochs, 1);
  require_positive("patterngen_lr", c.patterngen_lr);
  require_at_least("bap_epochs", c.bap_epochs, 1);
  require_positive("bap_lr", c.bap_lr);
  if (!(c.bap_clip_norm >= 0.0)) bad_value("bap_clip_norm", "must be >= 0");
  require_positive("delta", c.delta);
  require_at_least("window", c.window, 1);
  require_positive("initial_scale", c.initial_scale);
  if (c.dataset != "blobs" && c.dataset != "idx") bad_value("dataset", "must be \"blobs\" or \"idx\"");
  require_at_least("train_limit", c.train_limit, 0);
  require_at_least("test_limit", c.test_limit, 0);
  require_at_least("blob_margin", c.blob_margin, 0);
  require_at_least("num_classes", c.num_classes, 2);
  require_at_least("image_height", c.image_height, 1);
  require_at_least("image_width", c.image_width, 1);
  require_at_least("image_channels", c.image_channels, 1);
  if (c.trigger_size > std::min(c.image_height, c.image_width)) bad_value("trigger_size", "larger than the image");
  if (c.trigger_row >= 0 && c.trigger_row + c.trigger_size > c.image_height) bad_value("trigger_row", "patch out of bounds");
  if (c.trigger_col >= 0 && c.trigger_col + c.trigger_size > c.image_width) bad_value("trigger_col", "patch out of bounds");
  require_at_least("blob_train_per_class", c.blob_train_per_class, 1);
  require_at_least("blob_test_per_class", c.blob_test_per_class, 1);
  require_positive("blob_spread", c.blob_spread);
  require_fraction("blob_contrast", c.blob_contrast);
  require_positive("dirichlet_h", c.dirichlet_h);
  if (c.hidden_layers.empty()) bad_value("hidden_layers", "need at least one hidden layer");
  for (int h : c.hidden_layers) require_at_least("hidden_layers", h, 1);
  require_at_least("eval_window", c.eval_window, 1);
  require_at_least("threads", c.threads, 0);
}

std::uint64_t purpose_seed(std::uint64_t master, SeedPurpose purpose, std::uint64_t a, std::uint64_t b) {
  return derive_seed(master, {static_cast<std::uint64_t>(purpose), a, b});
}

// -------------------------------------------------------------------------

EvalResult evaluate(const MlpModel& model, const Dataset& clean_test, const Dataset& triggered_test,
                    int target_label) {
  if (clean_test.empty() || triggered_test.empty()) {
    throw Error(ErrorKind::kInvalidArgument, "evaluate: empty test set", "evaluate");
  }
  EvalResult r;
  const auto clean_pred = predict(model, clean_test);
  std::size_t correct = 0;
  for (std::size_t i = 0; i < clean_pred.size(); ++i) correct += clean_pred[i] == clean_test.label(i);
  r.acc = static_cast<double>(correct) / static_cast<double>(clean_test.size());

  const auto trig_pred = predict(model, triggered_test);
  std::size_t hits = 0;
  for (int y : trig_pred) hits += y == target_label;
  r.bsr = static_cast<double>(hits) / static_cast<double>(triggered_test.size());
  return r;
}

Summary summarize(std::span<const RoundRecord> records, int window) {
  if (window <= 0) throw Error(ErrorKind::kOutOfRange, "summarize: window must be positive", "eval_window");
  if (static_cast<std::size_t>(window) > records.size()) {
    throw Error(ErrorKind::kOutOfRange, "summarize: window exceeds the number of rounds", "eval_window");
  }
  const auto tail = records.subspan(records.size() - static_cast<std::size_t>(window));
  Summary s;
  s.bbsr = tail.front().bsr;
  for (const RoundRecord& r : tail) {
    s.absr += r.bsr;
    s.acc += r.acc;
    s.bbsr = std::max(s.bbsr, r.bsr);
  }
  s.absr /= static_cast<double>(window);
  s.acc /= static_cast<double>(window);
  return s;
}

// -------------------------------------------------------------------------

ExperimentData build_experiment_data(const ExperimentConfig& cfg) {
  ExperimentData out;
  if (cfg.dataset == "blobs") {
    Rng rng(purpose_seed(cfg.seed, SeedPurpose::kData));
    const ImageShape shape{static_cast<std::size_t>(cfg.image_height), static_cast<std::size_t>(cfg.image_width),
                           static_cast<std::size_t>(cfg.image_channels)};
    const BlobCenters centers = make_blob_centers(cfg.num_classes, shape, cfg.blob_contrast, rng, cfg.blob_margin);
    out.train = sample_blobs(centers, static_cast<std::size_t>(cfg.blob_train_per_class), cfg.blob_spread, rng);
    out.test = sample_blobs(centers, static_cast<std::size_t>(cfg.blob_test_per_class), cfg.blob_spread, rng);
  } else {
    out.train = take_prefix(load_idx(cfg.train_images, cfg.train_labels, cfg.num_classes), cfg.train_limit);
    out.test = take_prefix(load_idx(cfg.test_images, cfg.test_labels, cfg.num_classes), cfg.test_limit);
  }

  const ImageShape shape = out.train.image_shape();
  const auto size = static_cast<std::size_t>(cfg.trigger_size);
  out.trigger = (cfg.trigger_row < 0 || cfg.trigger_col < 0)
                    ? BadNetsConfig::square(size, shape, cfg.target_label, cfg.poison_fraction, cfg.trigger_value)
                    : BadNetsConfig::square_at(size, static_cast<std::size_t>(cfg.trigger_row),
                                               static_cast<std::size_t>(cfg.trigger_col), shape.channels,
                                               cfg.target_label, cfg.poison_fraction, cfg.trigger_value);
  validate_trigger(out.trigger, shape);
  out.triggered_test = build_triggered_testset(out.test, out.trigger);
  return out;
}

std::vector<std::size_t> model_layer_dims(const ExperimentConfig& cfg, std::size_t input_dim) {
  std::vector<std::size_t> dims{input_dim};
  for (int h : cfg.hidden_layers) dims.push_back(static_cast<std::size_t>(h));
  dims.push_back(static_cast<std::size_t>(cfg.num_classes));
  return dims;
}

Simulation::Simulation(ExperimentConfig cfg) : cfg_(std::move(cfg)) {
  validate(cfg_);
  data_ = build_experiment_data(cfg_);

  Rng part_rng(purpose_seed(cfg_.seed, SeedPurpose::kPartition));
  partition_ = dirichlet_partition(data_.train, static_cast<std::size_t>(cfg_.n_clients), cfg_.dirichlet_h, part_rng);

  std::vector<std::size_t> ids(static_cast<std::size_t>(cfg_.n_clients));
  std::iota(ids.begin(), ids.end(), 0);
  Rng role_rng(purpose_seed(cfg_.seed, SeedPurpose::kRoles));
  shuffle_indices(ids, role_rng);
  const auto n_malicious =
      static_cast<std::size_t>(std::floor(cfg_.malicious_fraction * static_cast<double>(cfg_.n_clients)));
  std::vector<Role> roles(ids.size(), Role::kBenign);
  for (std::size_t k = 0; k < n_malicious; ++k) roles[ids[k]] = Role::kMalicious;

  clients_.resize(ids.size());
  for (std::size_t id = 0; id < clients_.size(); ++id) {
    ClientState& c = clients_[id];
    c.id = static_cast<int>(id);
    c.role = roles[id];
    c.data = data_.train.subset(partition_.client_indices[id]);
    if (c.role == Role::kMalicious) {
      Rng poison_rng(purpose_seed(cfg_.seed, SeedPurpose::kPoison, id));
      c.data = poison_dataset(c.data, data_.trigger, poison_rng);
    }
  }

  Rng init_rng(purpose_seed(cfg_.seed, SeedPurpose::kInit));
  global_ = MlpModel::he_init(model_layer_dims(cfg_, data_.train.sample_dim()), init_rng);
  scaling_ = make_scaling_state(cfg_.start_round, cfg_.initial_scale, cfg_.delta, cfg_.window);
}

void Simulation::set_global_model(MlpModel model) {
  if (model.layer_dims() != global_.layer_dims()) {
    throw Error(ErrorKind::kShapeMismatch, "simulation: model architecture does not match the config", "layer_dims");
  }
  global_ = std::move(model);
}

std::size_t Simulation::clients_per_round() const {
  const auto n = static_cast<std::size_t>(cfg_.n_clients);
  const auto m = static_cast<std::size_t>(std::ceil(cfg_.select_fraction * static_cast<double>(n) - 1e-9));
  return std::clamp<std::size_t>(m, 1, n);
}

std::vector<int> Simulation::select_clients(int t) const {
  std::vector<std::size_t> ids(clients_.size());
  std::iota(ids.begin(), ids.end(), 0);
  Rng rng(purpose_seed(cfg_.seed, SeedPurpose::kSelect, static_cast<std::uint64_t>(t)));
  shuffle_indices(ids, rng);
  ids.resize(clients_per_round());
  std::sort(ids.begin(), ids.end());
  return {ids.begin(), ids.end()};
}

bool Simulation::defense_active(int t) const { return cfg_.fedbap && cfg_.bap && t >= cfg_.start_round; }

AggregationConfig Simulation::aggregation_config() const {
  const int m = static_cast<int>(clients_per_round());
  AggregationConfig a;
  a.rule = cfg_.aggregation;
  a.krum_f = cfg_.krum_f >= 0 ? cfg_.krum_f
                              : std::clamp(static_cast<int>(std::floor(cfg_.malicious_fraction * m)), 0,
                                           std::max(0, m - 3));
  a.multikrum_keep = cfg_.multikrum_keep > 0 ? cfg_.multikrum_keep : std::max(1, m - a.krum_f);
  a.rlr_threshold = cfg_.rlr_threshold;
  a.server_lr = cfg_.server_lr;
  return a;
}

TriggerSet Simulation::generate_triggers(const MlpModel& model) const {
  TriggerSet out;
  const std::size_t n = clients_.size();
  const auto threads = static_cast<unsigned>(cfg_.threads);

  const MaskGenParams mask_params{cfg_.maskgen_epochs, cfg_.maskgen_lr, cfg_.acc_threshold, cfg_.lambda,
                                  static_cast<std::size_t>(cfg_.batch_size)};
  out.client_masks.resize(n);
  parallel_for(n, threads, [&](std::size_t id) {
    Rng rng(purpose_seed(cfg_.seed, SeedPurpose::kMaskGen, id));
    out.client_masks[id] = mask_gen_client(model, clients_[id].data, mask_params, rng);
  });

  std::vector<Tensor> masks;
  masks.reserve(n);
  for (const auto& r : out.client_masks) masks.push_back(r.mask);
  out.merged_mask = merge_masks(masks);

  const PatternGenParams pattern_params{cfg_.patterngen_epochs, cfg_.patterngen_lr,
                                        static_cast<std::size_t>(cfg_.batch_size)};
  out.patterns.resize(n);
  parallel_for(n, threads, [&](std::size_t id) {
    Rng rng(purpose_seed(cfg_.seed, SeedPurpose::kPatternGen, id));
    out.patterns[id] = cfg_.pattern_gen
                           ? pattern_gen_client(model, out.merged_mask, clients_[id].data, pattern_params, rng)
                           : random_pattern(clients_[id].data.image_shape(), rng);
  });
  return out;
}

Simulation::ClientResult Simulation::run_client(const ClientState& client, int t, double c_t) const {
  const auto id = static_cast<std::uint64_t>(client.id);
  const auto round = static_cast<std::uint64_t>(t);
  ClientResult result;
  MlpModel local = global_;

  const bool run_bap = defense_active(t) && (client.role == Role::kBenign || cfg_.malicious_run_bap);
  if (run_bap) {
    Rng rng(purpose_seed(cfg_.seed, SeedPurpose::kBap, id, round));
    const BapParams params{cfg_.bap_epochs, cfg_.bap_lr, static_cast<std::size_t>(cfg_.batch_size),
                           cfg_.bap_clip_norm};
    BapResult bap = bap_gen(c_t, std::move(local), client.data, merged_mask_, client.pattern, params, rng);
    result.loss = bap.mean_loss;
    local = std::move(bap.model);
  }

  Rng rng(purpose_seed(cfg_.seed, SeedPurpose::kTrain, id, round));
  const SgdOptions opts{cfg_.local_epochs, cfg_.lr, static_cast<std::size_t>(cfg_.batch_size)};
  local = sgd_train(std::move(local), client.data, opts, rng);
  result.delta = param_difference(flatten(local), flatten(global_));
  return result;
}

RoundRecord Simulation::run_round(int t) {
  if (t < 1) throw Error(ErrorKind::kOutOfRange, "run_round: rounds are 1-based", "round");
  RoundRecord record;
  record.round = t;
  record.selected = select_clients(t);

  if (defense_active(t) && t == cfg_.start_round) {
    TriggerSet triggers = generate_triggers(global_);
    merged_mask_ = std::move(triggers.merged_mask);
    client_masks_ = std::move(triggers.client_masks);
    for (std::size_t id = 0; id < clients_.size(); ++id) clients_[id].pattern = std::move(triggers.patterns[id]);
  }

  const double c_t = scaling_.c;
  std::vector<ClientResult> results(record.selected.size());
  parallel_for(record.selected.size(), static_cast<unsigned>(cfg_.threads), [&](std::size_t k) {
    results[k] = run_client(clients_[static_cast<std::size_t>(record.selected[k])], t, c_t);
  });

  if (defense_active(t)) {
    double total = 0.0;
    for (const auto& r : results) total += r.loss;
    record.mean_bap_loss = total / static_cast<double>(results.size());
    if (cfg_.adaptive_scaling) scaling_ = adaptive_scaling(std::move(scaling_), record.mean_bap_loss, t);
  }
  record.c = c_t;

  std::vector<ClientUpdate> uploads;
  uploads.reserve(results.size());
  for (std::size_t k = 0; k < results.size(); ++k) uploads.push_back({record.selected[k], std::move(results[k].delta)});
  const ParamVector step = aggregate(UpdateSet(std::move(uploads)), aggregation_config());
  global_ = apply_delta(std::move(global_), step);

  const EvalResult eval = evaluate(global_, data_.test, data_.triggered_test, cfg_.target_label);
  record.acc = eval.acc;
  record.bsr = eval.bsr;
  return record;
}

ExperimentResult run_experiment(const ExperimentConfig& cfg, const RoundCallback& on_round) {
  Simulation sim(cfg);
  ExperimentResult result;
  result.records.reserve(static_cast<std::size_t>(cfg.rounds));
  for (int t = 1; t <= cfg.rounds; ++t) {
    result.records.push_back(sim.run_round(t));
    if (on_round) on_round(result.records.back());
  }
  if (!result.records.empty()) {
    result.summary = summarize(result.records, std::min(cfg.eval_window, static_cast<int>(result.records.size())));
  }
  result.model = sim.global_model();
  return result;
}

}  // namespace fedbap
