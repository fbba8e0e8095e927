#pragma once

// Training configuration and its text form.
//
// The config file is one `key = value` per line; `#` starts a comment and
// blank lines are ignored. Lists are comma separated. Unknown keys are
// errors. format_config() prints every key, so its output parses back to the
// same configuration.

#include <charconv>
#include <cstdint>
#include <fstream>
#include <functional>
#include <cmath>
#include <sstream>
#include <string>
#include <vector>

#include "adp/errors.hpp"
#include "adp/losses.hpp"
#include "adp/projector.hpp"

namespace adp {

struct TrainConfig {
  std::size_t batch_size = 32;
  std::size_t epochs = 10;
  double learning_rate = 1e-4;
  std::uint64_t seed = 42;
  std::vector<int> k_choices{1, 4, 8};
  std::vector<std::size_t> levels;  // empty: every level of the records
  double label_threshold = 0.0;
  std::size_t max_steps = 0;        // 0: no cap beyond epochs
  LossConfig loss;
  ProjectorConfig projector;
  // Reference matching.
  std::size_t grid_size = 5;     // S
  std::size_t num_clusters = 5;  // N_c
  std::size_t top_k = 8;         // K

  void validate() const {
    if (batch_size < 2) throw ConfigError("batch_size must be >= 2");
    if (epochs < 1) throw ConfigError("epochs must be >= 1");
    if (!(learning_rate > 0)) throw ConfigError("learning_rate must be > 0");
    if (k_choices.empty()) throw ConfigError("k_choices must not be empty");
    for (int k : k_choices)
      if (k < 1) throw ConfigError("k_choices entries must be >= 1");
    if (!(label_threshold >= 0 && label_threshold < 1)) throw ConfigError("label_threshold must be in [0, 1)");
    if (projector.num_layers < 1) throw ConfigError("num_layers must be >= 1");
    if (projector.num_refs < 1) throw ConfigError("num_refs must be >= 1");
    if (projector.n_heads < 1) throw ConfigError("n_heads must be >= 1");
    if (grid_size < 1 || num_clusters < 1 || top_k < 1)
      throw ConfigError("grid_size, num_clusters and top_k must be >= 1");
    loss.validate();
  }
};

namespace config_detail {

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

inline double parse_double(const std::string& key, const std::string& v) {
  double out = 0;
  const auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || p != v.data() + v.size() || !std::isfinite(out))
    throw ConfigError("invalid number for " + key + ": '" + v + "'");
  return out;
}

inline std::uint64_t parse_uint(const std::string& key, const std::string& v) {
  std::uint64_t out = 0;
  const auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || p != v.data() + v.size() || v.empty())
    throw ConfigError("invalid non-negative integer for " + key + ": '" + v + "'");
  return out;
}

inline std::vector<std::string> split_list(const std::string& v) {
  std::vector<std::string> out;
  std::stringstream ss(v);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

inline std::string format_double(double v) {
  char buf[64];
  const auto [p, ec] = std::to_chars(buf, buf + sizeof buf, v);
  (void)ec;
  return std::string(buf, p);
}

template <typename T>
std::string join(const std::vector<T>& xs) {
  std::string out;
  for (std::size_t i = 0; i < xs.size(); ++i) out += (i ? "," : "") + std::to_string(xs[i]);
  return out;
}

struct Field {
  std::function<void(TrainConfig&, const std::string&)> set;
  std::function<std::string(const TrainConfig&)> get;
};

inline const std::vector<std::pair<std::string, Field>>& fields() {
  using C = TrainConfig;
  auto uint_field = [](const char* key, auto member) {
    return Field{[key, member](C& c, const std::string& v) { member(c) = parse_uint(key, v); },
                 [member](const C& c) { return std::to_string(member(const_cast<C&>(c))); }};
  };
  auto real_field = [](const char* key, auto member) {
    return Field{[key, member](C& c, const std::string& v) { member(c) = parse_double(key, v); },
                 [member](const C& c) { return format_double(member(const_cast<C&>(c))); }};
  };
  static const std::vector<std::pair<std::string, Field>> table = {
      {"batch_size", uint_field("batch_size", [](C& c) -> std::size_t& { return c.batch_size; })},
      {"epochs", uint_field("epochs", [](C& c) -> std::size_t& { return c.epochs; })},
      {"learning_rate", real_field("learning_rate", [](C& c) -> double& { return c.learning_rate; })},
      {"seed", uint_field("seed", [](C& c) -> std::uint64_t& { return c.seed; })},
      {"k_choices",
       Field{[](C& c, const std::string& v) {
               c.k_choices.clear();
               for (const auto& s : split_list(v)) c.k_choices.push_back(static_cast<int>(parse_uint("k_choices", s)));
             },
             [](const C& c) { return join(c.k_choices); }}},
      {"levels",
       Field{[](C& c, const std::string& v) {
               c.levels.clear();
               if (v == "all") return;
               for (const auto& s : split_list(v)) c.levels.push_back(parse_uint("levels", s));
             },
             [](const C& c) { return c.levels.empty() ? std::string("all") : join(c.levels); }}},
      {"label_threshold", real_field("label_threshold", [](C& c) -> double& { return c.label_threshold; })},
      {"max_steps", uint_field("max_steps", [](C& c) -> std::size_t& { return c.max_steps; })},
      {"tau", real_field("tau", [](C& c) -> double& { return c.loss.tau; })},
      {"radius", real_field("radius", [](C& c) -> double& { return c.loss.radius; })},
      {"delta_r", real_field("delta_r", [](C& c) -> double& { return c.loss.delta_r; })},
      {"lambda", real_field("lambda", [](C& c) -> double& { return c.loss.lambda; })},
      {"denominator_mode",
       Field{[](C& c, const std::string& v) { c.loss.denominator_mode = parse_denominator_mode(v); },
             [](const C& c) { return std::string(mode_name(c.loss.denominator_mode)); }}},
      {"center_momentum", real_field("center_momentum", [](C& c) -> double& { return c.loss.center_momentum; })},
      {"center_mode",
       Field{[](C& c, const std::string& v) { c.loss.center_mode = parse_center_mode(v); },
             [](const C& c) { return std::string(mode_name(c.loss.center_mode)); }}},
      {"angle_anchor_cap", uint_field("angle_anchor_cap", [](C& c) -> std::size_t& { return c.loss.angle_anchor_cap; })},
      {"num_layers", uint_field("num_layers", [](C& c) -> std::size_t& { return c.projector.num_layers; })},
      {"num_refs", uint_field("num_refs", [](C& c) -> std::size_t& { return c.projector.num_refs; })},
      {"hidden_dim", uint_field("hidden_dim", [](C& c) -> std::size_t& { return c.projector.hidden_dim; })},
      {"n_heads", uint_field("n_heads", [](C& c) -> std::size_t& { return c.projector.n_heads; })},
      {"init_seed", uint_field("init_seed", [](C& c) -> std::uint64_t& { return c.projector.init_seed; })},
      {"grid_size", uint_field("grid_size", [](C& c) -> std::size_t& { return c.grid_size; })},
      {"num_clusters", uint_field("num_clusters", [](C& c) -> std::size_t& { return c.num_clusters; })},
      {"top_k", uint_field("top_k", [](C& c) -> std::size_t& { return c.top_k; })},
  };
  return table;
}

}  // namespace config_detail

/// Names of every config key, in print order.
inline std::vector<std::string> config_keys() {
  std::vector<std::string> out;
  for (const auto& [k, f] : config_detail::fields()) out.push_back(k);
  return out;
}

inline std::string get_config_value(const TrainConfig& c, const std::string& key) {
  for (const auto& [k, f] : config_detail::fields())
    if (k == key) return f.get(c);
  throw ConfigError("unknown config key '" + key + "'");
}

inline void set_config_value(TrainConfig& c, const std::string& key, const std::string& value) {
  for (const auto& [k, f] : config_detail::fields()) {
    if (k != key) continue;
    f.set(c, config_detail::trim(value));
    return;
  }
  throw ConfigError("unknown config key '" + key + "'");
}

inline void apply_config_text(TrainConfig& c, const std::string& text, const std::string& origin = "config") {
  std::stringstream ss(text);
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(ss, line)) {
    ++line_no;
    if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    line = config_detail::trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw ConfigError(origin + " line " + std::to_string(line_no) + ": expected key = value");
    try {
      set_config_value(c, config_detail::trim(line.substr(0, eq)), line.substr(eq + 1));
    } catch (const ConfigError& e) {
      throw ConfigError(origin + " line " + std::to_string(line_no) + ": " + e.what());
    }
  }
}

inline TrainConfig parse_config(const std::string& text) {
  TrainConfig c;
  apply_config_text(c, text);
  return c;
}

inline TrainConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  TrainConfig c;
  apply_config_text(c, ss.str(), path);
  return c;
}

inline std::string format_config(const TrainConfig& c) {
  std::string out;
  for (const auto& [k, f] : config_detail::fields()) out += k + " = " + f.get(c) + "\n";
  return out;
}

}  // namespace adp
