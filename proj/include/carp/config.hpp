#pragma once

#include <charconv>
#include <cstdio>
#include <fstream>
#include <functional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "carp/trainer.hpp"

// Flat key=value run configuration. One pair per line, '#' starts a comment,
// keys are RunConfig field names, unknown keys are rejected.

namespace carp {

class ConfigError : public std::runtime_error {
 public:
  ConfigError(std::string key, const std::string& message)
      : std::runtime_error(message), key_(std::move(key)) {}
  const std::string& key() const { return key_; }

 private:
  std::string key_;
};

/// Where the training samples come from.
struct DatasetConfig {
  std::string source = "blobs";  // blobs | idx
  std::string idx_images;
  std::string idx_labels;
  std::string idx_test_images;
  std::string idx_test_labels;

  bool operator==(const DatasetConfig&) const = default;
};

struct FileConfig {
  RunConfig run;
  DatasetConfig dataset;
};

namespace detail {

inline std::string trim(const std::string& s) {
  const auto first = s.find_first_not_of(" \t\r");
  if (first == std::string::npos) return {};
  const auto last = s.find_last_not_of(" \t\r");
  return s.substr(first, last - first + 1);
}

inline std::string format_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

template <typename T>
T parse_number(const std::string& key, const std::string& text) {
  T value{};
  const auto* end = text.data() + text.size();
  auto [ptr, ec] = std::from_chars(text.data(), end, value);
  if (ec != std::errc{} || ptr != end)
    throw ConfigError(key, "invalid value '" + text + "' for key '" + key + "'");
  return value;
}

// libstdc++ 11 has no floating-point from_chars fallback on every platform.
template <>
inline double parse_number<double>(const std::string& key, const std::string& text) {
  std::size_t used = 0;
  double value = 0.0;
  try {
    value = std::stod(text, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used == 0 || used != text.size())
    throw ConfigError(key, "invalid value '" + text + "' for key '" + key + "'");
  return value;
}

inline bool parse_bool(const std::string& key, const std::string& text) {
  if (text == "true" || text == "1") return true;
  if (text == "false" || text == "0") return false;
  throw ConfigError(key, "invalid boolean '" + text + "' for key '" + key + "'");
}

inline std::vector<std::size_t> parse_widths(const std::string& key, const std::string& text) {
  std::vector<std::size_t> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ','))
    out.push_back(parse_number<std::size_t>(key, trim(item)));
  if (out.empty()) throw ConfigError(key, "empty width list for key '" + key + "'");
  return out;
}

inline std::string join_widths(const std::vector<std::size_t>& widths) {
  std::string out;
  for (std::size_t i = 0; i < widths.size(); ++i) out += (i ? "," : "") + std::to_string(widths[i]);
  return out;
}

struct ConfigField {
  std::string key;
  std::function<std::string(const FileConfig&)> get;
  std::function<void(FileConfig&, const std::string&)> set;
};

template <typename T>
ConfigField number_field(const std::string& key, T RunConfig::*member) {
  return {key,
          [member](const FileConfig& c) {
            if constexpr (std::is_floating_point_v<T>)
              return format_double(c.run.*member);
            else
              return std::to_string(c.run.*member);
          },
          [member, key](FileConfig& c, const std::string& v) {
            c.run.*member = parse_number<T>(key, v);
          }};
}

inline ConfigField string_field(const std::string& key, std::string DatasetConfig::*member) {
  return {key, [member](const FileConfig& c) { return c.dataset.*member; },
          [member](FileConfig& c, const std::string& v) { c.dataset.*member = v; }};
}

template <typename E>
ConfigField enum_field(const std::string& key, E RunConfig::*member, E (*parse)(const std::string&)) {
  return {key, [member](const FileConfig& c) { return to_string(c.run.*member); },
          [member, parse, key](FileConfig& c, const std::string& v) {
            try {
              c.run.*member = parse(v);
            } catch (const ContractError& e) {
              throw ConfigError(key, std::string(e.what()) + " for key '" + key + "'");
            }
          }};
}

inline const std::vector<ConfigField>& config_fields() {
  static const std::vector<ConfigField> fields = {
      number_field("seed", &RunConfig::seed),
      number_field("epochs", &RunConfig::epochs),
      number_field("batch_size", &RunConfig::batch_size),
      number_field("k", &RunConfig::k),
      number_field("block_size", &RunConfig::block_size),
      enum_field("partition_strategy", &RunConfig::partition_strategy, &parse_partition_strategy),
      enum_field("objective", &RunConfig::objective, &parse_objective),
      number_field("lambda_e", &RunConfig::lambda_e),
      number_field("lr_start", &RunConfig::lr_start),
      number_field("lr_end", &RunConfig::lr_end),
      number_field("momentum", &RunConfig::momentum),
      number_field("weight_decay", &RunConfig::weight_decay),
      {"use_teacher", [](const FileConfig& c) { return std::string(c.run.use_teacher ? "true" : "false"); },
       [](FileConfig& c, const std::string& v) { c.run.use_teacher = parse_bool("use_teacher", v); }},
      number_field("eta_start", &RunConfig::eta_start),
      number_field("eta_end", &RunConfig::eta_end),
      {"encoder_hidden", [](const FileConfig& c) { return join_widths(c.run.encoder_hidden); },
       [](FileConfig& c, const std::string& v) { c.run.encoder_hidden = parse_widths("encoder_hidden", v); }},
      {"projector_hidden", [](const FileConfig& c) { return join_widths(c.run.projector_hidden); },
       [](FileConfig& c, const std::string& v) {
         c.run.projector_hidden = parse_widths("projector_hidden", v);
       }},
      string_field("dataset", &DatasetConfig::source),
      string_field("idx_images", &DatasetConfig::idx_images),
      string_field("idx_labels", &DatasetConfig::idx_labels),
      string_field("idx_test_images", &DatasetConfig::idx_test_images),
      string_field("idx_test_labels", &DatasetConfig::idx_test_labels),
      number_field("num_classes", &RunConfig::num_classes),
      number_field("per_class", &RunConfig::per_class),
      number_field("test_per_class", &RunConfig::test_per_class),
      number_field("in_dim", &RunConfig::in_dim),
      number_field("spread", &RunConfig::spread),
      number_field("view_noise", &RunConfig::view_noise),
      number_field("view_mask", &RunConfig::view_mask),
      number_field("eval_every", &RunConfig::eval_every),
      number_field("knn_k", &RunConfig::knn_k),
      number_field("knn_tau", &RunConfig::knn_tau),
      enum_field("eval_features", &RunConfig::eval_features, &parse_feature_source),
      number_field("grad_shards", &RunConfig::grad_shards),
      number_field("threads", &RunConfig::threads),
  };
  return fields;
}

}  // namespace detail

inline void apply_config_entry(FileConfig& cfg, const std::string& key, const std::string& value) {
  for (const auto& field : detail::config_fields())
    if (field.key == key) {
      field.set(cfg, value);
      return;
    }
  throw ConfigError(key, "unknown config key '" + key + "'");
}

inline FileConfig parse_config(std::istream& in) {
  FileConfig cfg;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    line = detail::trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw ConfigError(line, "line " + std::to_string(line_no) + ": expected key=value");
    apply_config_entry(cfg, detail::trim(line.substr(0, eq)), detail::trim(line.substr(eq + 1)));
  }
  if (cfg.dataset.source != "blobs" && cfg.dataset.source != "idx")
    throw ConfigError("dataset", "dataset must be 'blobs' or 'idx'");
  return cfg;
}

inline FileConfig parse_config_text(const std::string& text) {
  std::istringstream in(text);
  return parse_config(in);
}

inline FileConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("", "cannot read config file " + path);
  return parse_config(in);
}

/// Every key with its effective value, in a fixed order; parse_config of this
/// text yields the same FileConfig.
inline std::string resolved_config_text(const FileConfig& cfg) {
  std::string out;
  for (const auto& field : detail::config_fields()) out += field.key + "=" + field.get(cfg) + "\n";
  return out;
}

}  // namespace carp
