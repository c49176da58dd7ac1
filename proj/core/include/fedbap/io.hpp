#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "fedbap/defense.hpp"
#include "fedbap/mlp.hpp"
#include "fedbap/simulation.hpp"

namespace fedbap {

inline constexpr std::string_view kVersion = "0.1.0";
inline constexpr int kCheckpointVersion = 1;
inline constexpr int kTriggerVersion = 1;

// -------------------------------------------------------------------------
// Config

/// Parses a JSON config object. Unknown keys are rejected; missing keys keep
/// their defaults; values are range-checked. Errors name the key.
ExperimentConfig parse_config_text(std::string_view json_text);
ExperimentConfig parse_config(const std::filesystem::path& path);
/// Full config as a JSON object (every key), accepted by parse_config_text.
std::string config_to_json(const ExperimentConfig& cfg, int indent = 2);

// -------------------------------------------------------------------------
// Metrics

inline constexpr std::string_view kMetricsHeader = "round,acc,bsr,c,mean_bap_loss";

/// Header line then one row per record, reals in fixed 6-decimal notation,
/// LF line endings.
std::string format_metrics_csv(const std::vector<RoundRecord>& records);
void write_metrics_csv(const std::vector<RoundRecord>& records, const std::filesystem::path& path);
std::vector<RoundRecord> read_metrics_csv(const std::filesystem::path& path);

// -------------------------------------------------------------------------
// Checkpoints: one JSON header line
//   {"version":1,"layer_dims":[...],"param_count":N,"encoding":"f64-le"}
// followed by N little-endian doubles in canonical parameter order.

void save_checkpoint(const MlpModel& model, const std::filesystem::path& path);
MlpModel load_checkpoint(const std::filesystem::path& path);

// -------------------------------------------------------------------------
// Run manifest

struct RunManifest {
  ExperimentConfig config;
  std::string code_version{kVersion};
  std::uint64_t seed = 0;
  std::string started_at;
  std::string finished_at;
  std::optional<Summary> summary;
};

void write_manifest(const RunManifest& manifest, const std::filesystem::path& path);
RunManifest read_manifest(const std::filesystem::path& path);

/// UTC ISO-8601 timestamp.
std::string utc_timestamp();

// -------------------------------------------------------------------------
// Trigger artifacts: one JSON header line
//   {"format":"fedbap-trigger","version":1,"mask_shape":[H,W],
//    "pattern_shape":[H,W,C],"round":t,"client_id":k,"encoding":"f64-le"}
// followed by H*W mask doubles then H*W*C pattern doubles, little-endian.
// client_id is -1 for a server-side merged trigger.

struct TriggerArtifact {
  PerturbationTrigger trigger;
  int round = 0;
  int client_id = -1;
};

void save_trigger(const TriggerArtifact& artifact, const std::filesystem::path& path);
TriggerArtifact load_trigger(const std::filesystem::path& path);

// -------------------------------------------------------------------------

/// client_id,class_0,...,class_{C-1} per client.
std::string format_partition_csv(const Dataset& train, const Partition& partition);

/// Single-line JSON diagnostic for an error.
std::string error_line(const std::exception& e);

}  // namespace fedbap
