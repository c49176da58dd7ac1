#include <CLI11.hpp>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <nlohmann/json.hpp>

#include "fedbap/error.hpp"
#include "fedbap/io.hpp"
#include "fedbap/simulation.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr const char* kOutDirEnv = "FEDBAP_OUT_DIR";

fs::path output_dir(const std::string& flag) {
  fs::path dir = "fedbap_out";
  if (const char* env = std::getenv(kOutDirEnv); env != nullptr && *env != '\0') dir = env;
  if (!flag.empty()) dir = flag;
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw fedbap::Error(fedbap::ErrorKind::kIo, "cannot create output directory " + dir.string(), "out");
  return dir;
}

void write_file(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  out << text;
  if (!out) throw fedbap::Error(fedbap::ErrorKind::kIo, "cannot write " + path.string(), path.string());
}

json summary_json(const fedbap::Summary& s) { return {{"absr", s.absr}, {"bbsr", s.bbsr}, {"acc", s.acc}}; }

int cmd_run(const std::string& config_path, const std::string& out_flag, bool quiet) {
  const fedbap::ExperimentConfig cfg = fedbap::parse_config(config_path);
  const fs::path dir = output_dir(out_flag);

  fedbap::RunManifest manifest;
  manifest.config = cfg;
  manifest.seed = cfg.seed;
  manifest.started_at = fedbap::utc_timestamp();
  const auto result = fedbap::run_experiment(cfg, [&](const fedbap::RoundRecord& r) {
    if (!quiet) {
      std::cerr << "round " << r.round << " acc=" << r.acc << " bsr=" << r.bsr << " c=" << r.c << '\n';
    }
  });
  manifest.finished_at = fedbap::utc_timestamp();
  manifest.summary = result.summary;

  fedbap::write_metrics_csv(result.records, dir / "metrics.csv");
  fedbap::save_checkpoint(result.model, dir / "model.ckpt");
  fedbap::write_manifest(manifest, dir / "manifest.json");

  json out = {{"out_dir", dir.string()}, {"rounds", result.records.size()}};
  out["summary"] = result.summary ? summary_json(*result.summary) : json(nullptr);
  std::cout << out.dump() << '\n';
  return 0;
}

int cmd_evaluate(const std::string& checkpoint, const std::string& config_path) {
  const fedbap::ExperimentConfig cfg = fedbap::parse_config(config_path);
  const fedbap::MlpModel model = fedbap::load_checkpoint(checkpoint);
  const fedbap::ExperimentData data = fedbap::build_experiment_data(cfg);
  const auto expected = fedbap::model_layer_dims(cfg, data.train.sample_dim());
  if (model.layer_dims() != expected) {
    throw fedbap::Error(fedbap::ErrorKind::kShapeMismatch, "checkpoint layer_dims do not match the config",
                        "layer_dims");
  }
  const fedbap::EvalResult r = fedbap::evaluate(model, data.test, data.triggered_test, cfg.target_label);
  std::cout << json{{"acc", r.acc}, {"bsr", r.bsr}}.dump() << '\n';
  return 0;
}

int cmd_gen_trigger(const std::string& checkpoint, const std::string& config_path, const std::string& out_flag,
                    int round) {
  const fedbap::ExperimentConfig cfg = fedbap::parse_config(config_path);
  fedbap::Simulation sim(cfg);
  sim.set_global_model(fedbap::load_checkpoint(checkpoint));
  const fs::path dir = output_dir(out_flag);

  const fedbap::TriggerSet triggers = sim.generate_triggers(sim.global_model());
  json clients = json::array();
  for (std::size_t id = 0; id < triggers.patterns.size(); ++id) {
    fedbap::TriggerArtifact a;
    a.trigger = {triggers.merged_mask, triggers.patterns[id]};
    a.round = round;
    a.client_id = static_cast<int>(id);
    fedbap::save_trigger(a, dir / ("trigger_client_" + std::to_string(id) + ".bin"));
    const auto& m = triggers.client_masks[id];
    clients.push_back({{"client_id", id},
                       {"target_class", m.target_class},
                       {"distance", m.distance},
                       {"accuracy", m.accuracy},
                       {"reached_threshold", m.reached_threshold}});
  }
  double merged_l1 = 0.0;
  for (double v : triggers.merged_mask.data()) merged_l1 += v;
  std::cout << json{{"out_dir", dir.string()}, {"merged_mask_l1", merged_l1}, {"clients", clients}}.dump() << '\n';
  return 0;
}

int cmd_partition(const std::string& config_path, const std::string& out_flag, bool to_stdout) {
  const fedbap::ExperimentConfig cfg = fedbap::parse_config(config_path);
  const fedbap::Simulation sim(cfg);
  const std::string csv = fedbap::format_partition_csv(sim.data().train, sim.partition());
  if (to_stdout) {
    std::cout << csv;
  } else {
    const fs::path path = output_dir(out_flag) / "partition.csv";
    write_file(path, csv);
    std::cout << json{{"path", path.string()}}.dump() << '\n';
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Federated backdoor-defense simulator"};
  app.set_version_flag("--version", std::string(fedbap::kVersion));
  app.require_subcommand(1);

  std::string config_path, checkpoint, out_flag;
  bool quiet = false, to_stdout = false;
  int round = 0;

  auto* run = app.add_subcommand("run", "Run a full experiment; writes metrics.csv, manifest.json, model.ckpt");
  run->add_option("config", config_path, "JSON config")->required();
  run->add_option("--out", out_flag, std::string("Output directory (default $") + kOutDirEnv + " or ./fedbap_out)");
  run->add_flag("-q,--quiet", quiet, "Suppress per-round progress");

  auto* eval = app.add_subcommand("evaluate", "Print ACC and BSR of a checkpoint");
  eval->add_option("checkpoint", checkpoint)->required();
  eval->add_option("config", config_path)->required();

  auto* gen = app.add_subcommand("gen-trigger", "Run mask and pattern generation against a checkpoint");
  gen->add_option("checkpoint", checkpoint)->required();
  gen->add_option("config", config_path)->required();
  gen->add_option("--out", out_flag, "Output directory");
  gen->add_option("--round", round, "Round number recorded in the artifacts");

  auto* part = app.add_subcommand("partition", "Per-client label histograms as CSV");
  part->add_option("config", config_path)->required();
  part->add_option("--out", out_flag, "Output directory");
  part->add_flag("--stdout", to_stdout, "Write the CSV to stdout instead of a file");

  try {
    app.parse(argc, argv);
  } catch (const CLI::Success& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << json{{"error", "usage"}, {"key", ""}, {"message", e.what()}}.dump() << '\n';
    return 2;
  }

  try {
    if (*run) return cmd_run(config_path, out_flag, quiet);
    if (*eval) return cmd_evaluate(checkpoint, config_path);
    if (*gen) return cmd_gen_trigger(checkpoint, config_path, out_flag, round);
    if (*part) return cmd_partition(config_path, out_flag, to_stdout);
  } catch (const std::exception& e) {
    std::cerr << fedbap::error_line(e) << '\n';
    return 1;
  }
  return 1;
}
