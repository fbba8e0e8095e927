#pragma once

// Training checkpoint: per-level projector weights, centers, Adam moments and
// the configuration needed to rebuild them. Stored in the tagged container.

#include <filesystem>
#include <string>
#include <vector>

#include "adp/adam.hpp"
#include "adp/config.hpp"
#include "adp/container.hpp"
#include "adp/losses.hpp"
#include "adp/projector.hpp"

namespace adp {

inline constexpr const char* kCheckpointFormat = "adp-checkpoint";

struct LevelState {
  std::size_t source_level = 0;  // index into record levels
  ProjectorParams<float> params;
  CenterEstimator<float> center;
};

struct Checkpoint {
  TrainConfig config;
  std::uint64_t step = 0;  // optimizer steps taken
  std::vector<LevelState> levels;
  AdamState<float> adam;

  const LevelState& level(std::size_t source_level) const {
    for (const auto& l : levels)
      if (l.source_level == source_level) return l;
    throw DataError("checkpoint has no projector for level " + std::to_string(source_level));
  }
};

inline std::string level_prefix(std::size_t source_level) { return "level" + std::to_string(source_level) + "/"; }

/// Parameter refs across all levels in a fixed order; names double as
/// optimizer slot names.
inline std::vector<ParamRef<float>> param_refs(std::vector<LevelState>& levels,
                                               const std::vector<std::vector<Tensor<float>>>* grads = nullptr) {
  std::vector<ParamRef<float>> out;
  for (std::size_t i = 0; i < levels.size(); ++i) {
    std::size_t j = 0;
    visit_params(levels[i].params, [&](const std::string& name, Tensor<float>& t) {
      out.push_back({level_prefix(levels[i].source_level) + name, &t, grads ? &(*grads)[i][j] : nullptr});
      ++j;
    });
  }
  return out;
}

inline Container encode_checkpoint(const Checkpoint& ck) {
  Container c;
  c.put_string("format", kCheckpointFormat);
  c.put_string("config", format_config(ck.config));
  c.put_u64("step", ck.step);
  c.put_u64("level_count", ck.levels.size());
  for (std::size_t i = 0; i < ck.levels.size(); ++i) {
    const auto& l = ck.levels[i];
    const std::string pre = level_prefix(l.source_level);
    c.put_u64("levels/" + std::to_string(i), l.source_level);
    c.put_u64(pre + "input_dim", l.params.input_dim);
    c.put_u64(pre + "hidden_dim", l.params.hidden_dim);
    c.put_u64(pre + "n_heads", l.params.n_heads);
    c.put_u64(pre + "num_layers", l.params.blocks.size());
    visit_params(l.params, [&](const std::string& name, const Tensor<float>& t) { c.put_tensor(pre + "param/" + name, t); });
    c.put_u64(pre + "center_initialized", l.center.initialized ? 1 : 0);
    if (l.center.initialized) c.put_tensor(pre + "center", l.center.center);
  }
  c.put_f64("adam/learning_rate", ck.adam.config.learning_rate);
  c.put_f64("adam/beta1", ck.adam.config.beta1);
  c.put_f64("adam/beta2", ck.adam.config.beta2);
  c.put_f64("adam/eps", ck.adam.config.eps);
  c.put_u64("adam/step", ck.adam.step);
  c.put_u64("adam/slot_count", ck.adam.slots.size());
  for (std::size_t i = 0; i < ck.adam.slots.size(); ++i) {
    const auto& s = ck.adam.slots[i];
    c.put_string("adam/slot/" + std::to_string(i), s.name);
    c.put_tensor("adam/m/" + s.name, s.m);
    c.put_tensor("adam/v/" + s.name, s.v);
  }
  return c;
}

inline Checkpoint decode_checkpoint(const Container& c) {
  if (!c.has("format") || c.get_string("format") != kCheckpointFormat)
    throw FormatError("not a checkpoint container");
  Checkpoint ck;
  ck.config = parse_config(c.get_string("config"));
  ck.step = c.get_u64("step");
  const std::size_t count = c.get_u64("level_count");
  for (std::size_t i = 0; i < count; ++i) {
    LevelState l;
    l.source_level = c.get_u64("levels/" + std::to_string(i));
    const std::string pre = level_prefix(l.source_level);
    ProjectorConfig pc = ck.config.projector;
    pc.num_layers = c.get_u64(pre + "num_layers");
    pc.hidden_dim = c.get_u64(pre + "hidden_dim");
    pc.n_heads = c.get_u64(pre + "n_heads");
    l.params = init_params<float>(pc, c.get_u64(pre + "input_dim"));
    visit_params(l.params, [&](const std::string& name, Tensor<float>& t) {
      auto stored = c.get_tensor<float>(pre + "param/" + name);
      if (stored.shape() != t.shape()) throw FormatError("checkpoint: shape mismatch for " + pre + name);
      t = std::move(stored);
    });
    l.center.momentum = ck.config.loss.center_momentum;
    l.center.initialized = c.get_u64(pre + "center_initialized") != 0;
    if (l.center.initialized) l.center.center = c.get_tensor<float>(pre + "center");
    ck.levels.push_back(std::move(l));
  }
  ck.adam.config.learning_rate = c.get_f64("adam/learning_rate");
  ck.adam.config.beta1 = c.get_f64("adam/beta1");
  ck.adam.config.beta2 = c.get_f64("adam/beta2");
  ck.adam.config.eps = c.get_f64("adam/eps");
  ck.adam.step = c.get_u64("adam/step");
  const std::size_t slots = c.get_u64("adam/slot_count");
  for (std::size_t i = 0; i < slots; ++i) {
    AdamSlot<float> s;
    s.name = c.get_string("adam/slot/" + std::to_string(i));
    s.m = c.get_tensor<float>("adam/m/" + s.name);
    s.v = c.get_tensor<float>("adam/v/" + s.name);
    ck.adam.slots.push_back(std::move(s));
  }
  return ck;
}

inline void save_checkpoint(const Checkpoint& ck, const std::filesystem::path& path) {
  // Write then rename so an interrupted save never leaves a torn checkpoint.
  auto tmp = path;
  tmp += ".tmp";
  encode_checkpoint(ck).save(tmp);
  std::filesystem::rename(tmp, path);
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  return decode_checkpoint(Container::load(path));
}

}  // namespace adp
