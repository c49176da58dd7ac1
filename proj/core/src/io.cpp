#include "fedbap/io.hpp"

#include <bit>
#include <chrono>
#include <cstdio>
#include <ctime>
#include <fstream>
#include <functional>
#include <iterator>
#include <nlohmann/json.hpp>
#include <sstream>

#include "fedbap/error.hpp"

namespace fedbap {

using nlohmann::json;

namespace {

// ---- config field table --------------------------------------------------

[[noreturn]] void type_error(const std::string& key, const char* expected) {
  throw Error(ErrorKind::kParse, key + ": expected " + expected, key);
}

struct Field {
  std::string key;
  std::function<void(const json&, ExperimentConfig&)> read;
  std::function<void(const ExperimentConfig&, json&)> write;
};

template <typename T>
Field field(const char* key, T ExperimentConfig::*member) {
  Field f;
  f.key = key;
  f.write = [key, member](const ExperimentConfig& c, json& j) {
    if constexpr (std::is_same_v<T, AggregationRule>) {
      j[key] = std::string(to_string(c.*member));
    } else {
      j[key] = c.*member;
    }
  };
  f.read = [k = std::string(key), member](const json& v, ExperimentConfig& c) {
    if constexpr (std::is_same_v<T, bool>) {
      if (!v.is_boolean()) type_error(k, "a boolean");
      c.*member = v.get<bool>();
    } else if constexpr (std::is_same_v<T, int>) {
      if (!v.is_number_integer()) type_error(k, "an integer");
      const auto x = v.get<long long>();
      if (x < std::numeric_limits<int>::min() || x > std::numeric_limits<int>::max()) {
        throw Error(ErrorKind::kOutOfRange, k + ": integer out of range", k);
      }
      c.*member = static_cast<int>(x);
    } else if constexpr (std::is_same_v<T, std::uint64_t>) {
      if (!v.is_number_unsigned()) type_error(k, "a non-negative integer");
      c.*member = v.get<std::uint64_t>();
    } else if constexpr (std::is_same_v<T, double>) {
      if (!v.is_number()) type_error(k, "a number");
      c.*member = v.get<double>();
    } else if constexpr (std::is_same_v<T, std::string>) {
      if (!v.is_string()) type_error(k, "a string");
      c.*member = v.get<std::string>();
    } else if constexpr (std::is_same_v<T, std::vector<int>>) {
      if (!v.is_array()) type_error(k, "an array of integers");
      std::vector<int> out;
      for (const json& e : v) {
        if (!e.is_number_integer()) type_error(k, "an array of integers");
        out.push_back(e.get<int>());
      }
      c.*member = std::move(out);
    } else if constexpr (std::is_same_v<T, AggregationRule>) {
      if (!v.is_string()) type_error(k, "a string");
      c.*member = parse_aggregation_rule(v.get<std::string>());
    }
  };
  return f;
}

const std::vector<Field>& config_fields() {
  using C = ExperimentConfig;
  static const std::vector<Field> fields = {
      field("n_clients", &C::n_clients),
      field("select_fraction", &C::select_fraction),
      field("malicious_fraction", &C::malicious_fraction),
      field("rounds", &C::rounds),
      field("local_epochs", &C::local_epochs),
      field("lr", &C::lr),
      field("batch_size", &C::batch_size),
      field("aggregation", &C::aggregation),
      field("krum_f", &C::krum_f),
      field("multikrum_keep", &C::multikrum_keep),
      field("rlr_threshold", &C::rlr_threshold),
      field("server_lr", &C::server_lr),
      field("trigger_size", &C::trigger_size),
      field("target_label", &C::target_label),
      field("poison_fraction", &C::poison_fraction),
      field("trigger_value", &C::trigger_value),
      field("trigger_row", &C::trigger_row),
      field("trigger_col", &C::trigger_col),
      field("fedbap", &C::fedbap),
      field("start_round", &C::start_round),
      field("maskgen_epochs", &C::maskgen_epochs),
      field("maskgen_lr", &C::maskgen_lr),
      field("acc_threshold", &C::acc_threshold),
      field("lambda", &C::lambda),
      field("patterngen_epochs", &C::patterngen_epochs),
      field("patterngen_lr", &C::patterngen_lr),
      field("bap_epochs", &C::bap_epochs),
      field("bap_lr", &C::bap_lr),
      field("bap_clip_norm", &C::bap_clip_norm),
      field("delta", &C::delta),
      field("window", &C::window),
      field("initial_scale", &C::initial_scale),
      field("malicious_run_bap", &C::malicious_run_bap),
      field("adaptive_scaling", &C::adaptive_scaling),
      field("pattern_gen", &C::pattern_gen),
      field("bap", &C::bap),
      field("dataset", &C::dataset),
      field("train_images", &C::train_images),
      field("train_labels", &C::train_labels),
      field("test_images", &C::test_images),
      field("test_labels", &C::test_labels),
      field("train_limit", &C::train_limit),
      field("test_limit", &C::test_limit),
      field("num_classes", &C::num_classes),
      field("image_height", &C::image_height),
      field("image_width", &C::image_width),
      field("image_channels", &C::image_channels),
      field("blob_train_per_class", &C::blob_train_per_class),
      field("blob_test_per_class", &C::blob_test_per_class),
      field("blob_spread", &C::blob_spread),
      field("blob_contrast", &C::blob_contrast),
      field("blob_margin", &C::blob_margin),
      field("dirichlet_h", &C::dirichlet_h),
      field("hidden_layers", &C::hidden_layers),
      field("seed", &C::seed),
      field("eval_window", &C::eval_window),
      field("threads", &C::threads),
  };
  return fields;
}

json config_object(const ExperimentConfig& cfg) {
  json j = json::object();
  for (const Field& f : config_fields()) f.write(cfg, j);
  return j;
}

ExperimentConfig config_from_object(const json& j) {
  if (!j.is_object()) throw Error(ErrorKind::kParse, "config: top level must be a JSON object");
  ExperimentConfig cfg;
  for (const auto& [key, value] : j.items()) {
    const auto& fields = config_fields();
    const auto it = std::find_if(fields.begin(), fields.end(), [&](const Field& f) { return f.key == key; });
    if (it == fields.end()) throw Error(ErrorKind::kUnknownKey, "config: unknown key '" + key + "'", key);
    it->read(value, cfg);
  }
  validate(cfg);
  return cfg;
}

// ---- binary helpers ------------------------------------------------------

std::string read_text_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorKind::kIo, "cannot open " + path.string(), path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_text_file(const std::filesystem::path& path, std::string_view content) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(ErrorKind::kIo, "cannot write " + path.string(), path.string());
  out.write(content.data(), static_cast<std::streamsize>(content.size()));
  if (!out) throw Error(ErrorKind::kIo, "write failed for " + path.string(), path.string());
}

void append_f64_le(std::string& out, double v) {
  const auto bits = std::bit_cast<std::uint64_t>(v);
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((bits >> (8 * i)) & 0xff));
}

double read_f64_le(std::string_view bytes, std::size_t offset) {
  std::uint64_t bits = 0;
  for (int i = 0; i < 8; ++i) {
    bits |= std::uint64_t{static_cast<unsigned char>(bytes[offset + static_cast<std::size_t>(i)])} << (8 * i);
  }
  return std::bit_cast<double>(bits);
}

// Splits "header\npayload"; the header must parse as a JSON object.
std::pair<json, std::string_view> split_header(std::string_view blob, const std::string& what) {
  const auto nl = blob.find('\n');
  if (nl == std::string_view::npos) throw Error(ErrorKind::kFormat, what + ": missing header line", what);
  json header;
  try {
    header = json::parse(blob.substr(0, nl));
  } catch (const json::exception& e) {
    throw Error(ErrorKind::kFormat, what + ": malformed header (" + e.what() + ")", what);
  }
  if (!header.is_object()) throw Error(ErrorKind::kFormat, what + ": header is not an object", what);
  return {std::move(header), blob.substr(nl + 1)};
}

template <typename T>
T header_value(const json& header, const char* key, const std::string& what) {
  if (!header.contains(key)) throw Error(ErrorKind::kFormat, what + ": header lacks '" + key + "'", key);
  try {
    return header.at(key).get<T>();
  } catch (const json::exception&) {
    throw Error(ErrorKind::kFormat, what + ": header field '" + std::string(key) + "' has the wrong type", key);
  }
}

std::string fixed6(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.6f", v);
  return buf;
}

json summary_object(const Summary& s) { return {{"absr", s.absr}, {"bbsr", s.bbsr}, {"acc", s.acc}}; }

}  // namespace

// -------------------------------------------------------------------------

ExperimentConfig parse_config_text(std::string_view json_text) {
  json j;
  try {
    j = json::parse(json_text);
  } catch (const json::parse_error& e) {
    throw Error(ErrorKind::kParse, std::string("config: ") + e.what());
  }
  return config_from_object(j);
}

ExperimentConfig parse_config(const std::filesystem::path& path) { return parse_config_text(read_text_file(path)); }

std::string config_to_json(const ExperimentConfig& cfg, int indent) { return config_object(cfg).dump(indent); }

// -------------------------------------------------------------------------

std::string format_metrics_csv(const std::vector<RoundRecord>& records) {
  std::string out(kMetricsHeader);
  out += '\n';
  for (const RoundRecord& r : records) {
    out += std::to_string(r.round);
    for (double v : {r.acc, r.bsr, r.c, r.mean_bap_loss}) {
      out += ',';
      out += fixed6(v);
    }
    out += '\n';
  }
  return out;
}

void write_metrics_csv(const std::vector<RoundRecord>& records, const std::filesystem::path& path) {
  write_text_file(path, format_metrics_csv(records));
}

std::vector<RoundRecord> read_metrics_csv(const std::filesystem::path& path) {
  std::istringstream in(read_text_file(path));
  std::string line;
  if (!std::getline(in, line) || line != kMetricsHeader) {
    throw Error(ErrorKind::kFormat, "metrics: missing or wrong header", "metrics");
  }
  std::vector<RoundRecord> records;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    RoundRecord r;
    if (std::sscanf(line.c_str(), "%d,%lf,%lf,%lf,%lf", &r.round, &r.acc, &r.bsr, &r.c, &r.mean_bap_loss) != 5) {
      throw Error(ErrorKind::kFormat, "metrics: malformed row '" + line + "'", "metrics");
    }
    records.push_back(std::move(r));
  }
  return records;
}

// -------------------------------------------------------------------------

void save_checkpoint(const MlpModel& model, const std::filesystem::path& path) {
  const ParamVector params = flatten(model);
  json header = {{"version", kCheckpointVersion},
                 {"layer_dims", model.layer_dims()},
                 {"param_count", params.size()},
                 {"encoding", "f64-le"}};
  std::string blob = header.dump();
  blob += '\n';
  blob.reserve(blob.size() + params.size() * 8);
  for (double v : params.values) append_f64_le(blob, v);
  write_text_file(path, blob);
}

MlpModel load_checkpoint(const std::filesystem::path& path) {
  const std::string blob = read_text_file(path);
  const std::string what = "checkpoint";
  const auto [header, payload] = split_header(blob, what);
  if (const int version = header_value<int>(header, "version", what); version != kCheckpointVersion) {
    throw Error(ErrorKind::kFormat, "checkpoint: unsupported version " + std::to_string(version), "version");
  }
  if (header_value<std::string>(header, "encoding", what) != "f64-le") {
    throw Error(ErrorKind::kFormat, "checkpoint: unsupported encoding", "encoding");
  }
  const auto dims = header_value<std::vector<std::size_t>>(header, "layer_dims", what);
  const auto count = header_value<std::size_t>(header, "param_count", what);
  if (payload.size() != count * 8) {
    throw Error(ErrorKind::kFormat,
                "checkpoint: header declares " + std::to_string(count) + " parameters but payload holds " +
                    std::to_string(payload.size()) + " bytes",
                "param_count");
  }
  ParamVector params{std::vector<double>(count)};
  for (std::size_t i = 0; i < count; ++i) params.values[i] = read_f64_le(payload, i * 8);
  MlpModel shape_check(dims);
  if (shape_check.parameter_count() != count) {
    throw Error(ErrorKind::kFormat, "checkpoint: param_count does not match layer_dims", "layer_dims");
  }
  return unflatten(params, dims);
}

// -------------------------------------------------------------------------

std::string utc_timestamp() {
  const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

void write_manifest(const RunManifest& m, const std::filesystem::path& path) {
  json j = {{"config", config_object(m.config)},
            {"code_version", m.code_version},
            {"seed", m.seed},
            {"started_at", m.started_at},
            {"finished_at", m.finished_at}};
  j["summary"] = m.summary ? summary_object(*m.summary) : json(nullptr);
  write_text_file(path, j.dump(2) + "\n");
}

RunManifest read_manifest(const std::filesystem::path& path) {
  json j;
  try {
    j = json::parse(read_text_file(path));
  } catch (const json::parse_error& e) {
    throw Error(ErrorKind::kParse, std::string("manifest: ") + e.what(), "manifest");
  }
  RunManifest m;
  try {
    m.config = config_from_object(j.at("config"));
    m.code_version = j.at("code_version").get<std::string>();
    m.seed = j.at("seed").get<std::uint64_t>();
    m.started_at = j.at("started_at").get<std::string>();
    m.finished_at = j.at("finished_at").get<std::string>();
    if (!j.at("summary").is_null()) {
      const json& s = j.at("summary");
      m.summary = Summary{s.at("absr").get<double>(), s.at("bbsr").get<double>(), s.at("acc").get<double>()};
    }
  } catch (const json::exception& e) {
    throw Error(ErrorKind::kFormat, std::string("manifest: ") + e.what(), "manifest");
  }
  return m;
}

// -------------------------------------------------------------------------

void save_trigger(const TriggerArtifact& a, const std::filesystem::path& path) {
  const Tensor& mask = a.trigger.mask;
  const Tensor& pattern = a.trigger.pattern;
  if (mask.rank() != 2 || pattern.rank() != 3 || mask.dim(0) != pattern.dim(0) || mask.dim(1) != pattern.dim(1)) {
    throw Error(ErrorKind::kShapeMismatch, "trigger: mask and pattern shapes disagree", "trigger");
  }
  json header = {{"format", "fedbap-trigger"},
                 {"version", kTriggerVersion},
                 {"mask_shape", mask.shape()},
                 {"pattern_shape", pattern.shape()},
                 {"round", a.round},
                 {"client_id", a.client_id},
                 {"encoding", "f64-le"}};
  std::string blob = header.dump();
  blob += '\n';
  for (double v : mask.data()) append_f64_le(blob, v);
  for (double v : pattern.data()) append_f64_le(blob, v);
  write_text_file(path, blob);
}

TriggerArtifact load_trigger(const std::filesystem::path& path) {
  const std::string blob = read_text_file(path);
  const std::string what = "trigger";
  const auto [header, payload] = split_header(blob, what);
  if (header_value<std::string>(header, "format", what) != "fedbap-trigger") {
    throw Error(ErrorKind::kFormat, "trigger: not a trigger artifact", "format");
  }
  if (const int version = header_value<int>(header, "version", what); version != kTriggerVersion) {
    throw Error(ErrorKind::kFormat, "trigger: unsupported version " + std::to_string(version), "version");
  }
  const auto mask_shape = header_value<Shape>(header, "mask_shape", what);
  const auto pattern_shape = header_value<Shape>(header, "pattern_shape", what);
  const std::size_t nm = shape_size(mask_shape), np = shape_size(pattern_shape);
  if (payload.size() != (nm + np) * 8) throw Error(ErrorKind::kFormat, "trigger: payload size mismatch", "payload");

  TriggerArtifact a;
  a.round = header_value<int>(header, "round", what);
  a.client_id = header_value<int>(header, "client_id", what);
  std::vector<double> m(nm), p(np);
  for (std::size_t i = 0; i < nm; ++i) m[i] = read_f64_le(payload, i * 8);
  for (std::size_t i = 0; i < np; ++i) p[i] = read_f64_le(payload, (nm + i) * 8);
  a.trigger.mask = Tensor(mask_shape, std::move(m));
  a.trigger.pattern = Tensor(pattern_shape, std::move(p));
  return a;
}

// -------------------------------------------------------------------------

std::string format_partition_csv(const Dataset& train, const Partition& partition) {
  std::string out = "client_id";
  for (int c = 0; c < train.num_classes(); ++c) out += ",class_" + std::to_string(c);
  out += '\n';
  for (std::size_t k = 0; k < partition.num_clients(); ++k) {
    out += std::to_string(k);
    for (std::size_t count : label_histogram(train, partition.client_indices[k])) out += "," + std::to_string(count);
    out += '\n';
  }
  return out;
}

std::string error_line(const std::exception& e) {
  json j;
  if (const auto* err = dynamic_cast<const Error*>(&e)) {
    j = {{"error", std::string(to_string(err->kind()))}, {"key", err->key()}, {"message", err->what()}};
  } else {
    j = {{"error", "internal"}, {"key", ""}, {"message", e.what()}};
  }
  return j.dump();
}

}  // namespace fedbap
