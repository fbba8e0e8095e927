#pragma once

// Residual projector pretraining.
//
// Each step takes a batch of training records, draws random references for
// each from the normal records of its class, residualizes the record and its
// augmented twin, projects every selected level with that level's projector,
// and minimises the sum of the per-level losses with Adam.
//
// Randomness is keyed by (seed, epoch) for the batch order and (seed, step)
// for references and anchor subsets, so a run resumed from a checkpoint
// replays the uninterrupted run exactly.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "adp/adam.hpp"
#include "adp/autodiff.hpp"
#include "adp/checkpoint.hpp"
#include "adp/config.hpp"
#include "adp/feature_store.hpp"
#include "adp/losses.hpp"
#include "adp/projector.hpp"
#include "adp/residual.hpp"

namespace adp {

struct StepLog {
  std::uint64_t step = 0;  // 0-based index of the step just taken
  std::uint64_t epoch = 0;
  double total = 0;
  std::vector<LossBreakdown> levels;  // one per trained level
};

struct PretrainOptions {
  std::filesystem::path checkpoint_path;  // empty: nothing is written
  const Checkpoint* resume = nullptr;
  std::function<void(const StepLog&)> on_step;
};

struct PretrainResult {
  Checkpoint checkpoint;
  std::vector<StepLog> history;  // steps taken by this call only
};

/// Training records plus, for each, the pool of normal records it may draw
/// references from: same class, train or reference split, not itself.
struct TrainingData {
  std::vector<MultiLevelFeatureRecord> records;
  std::vector<std::string> paths;
  std::vector<std::size_t> train;              // indices into records
  std::vector<std::vector<std::size_t>> pools;  // parallel to train

  static TrainingData load(const Manifest& m) {
    TrainingData d;
    for (std::size_t i = 0; i < m.entries.size(); ++i) {
      const auto& e = m.entries[i];
      const bool is_train = e.split == Split::train;
      if (!is_train && !(e.split == Split::reference && e.image_label == 0)) continue;
      auto r = m.load(i);
      if (is_train && !r.augmented_levels)
        throw DataError("training record " + e.record_path + " has no augmented twin");
      if (!d.records.empty()) {
        const auto& first = d.records.front();
        bool same = r.levels.size() == first.levels.size();
        for (std::size_t l = 0; same && l < r.levels.size(); ++l) same = r.levels[l].same_dims(first.levels[l]);
        if (!same) throw DataError("record " + e.record_path + " level dims differ from " + d.paths.front());
      }
      if (is_train) d.train.push_back(d.records.size());
      d.records.push_back(std::move(r));
      d.paths.push_back(e.record_path);
    }
    if (d.train.empty()) throw DataError("manifest has no training records");
    for (std::size_t t : d.train) {
      std::vector<std::size_t> pool;
      for (std::size_t j = 0; j < d.records.size(); ++j)
        if (j != t && d.records[j].image_label == 0 && d.records[j].class_id == d.records[t].class_id)
          pool.push_back(j);
      d.pools.push_back(std::move(pool));
    }
    return d;
  }
};

inline std::size_t steps_per_epoch(std::size_t records, std::size_t batch_size) {
  return (records + batch_size - 1) / batch_size;
}

inline std::vector<std::size_t> epoch_order(std::size_t n, std::uint64_t seed, std::uint64_t epoch) {
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  std::seed_seq seq{seed, epoch, std::uint64_t{0xe90c}};
  std::mt19937_64 rng(seq);
  std::shuffle(order.begin(), order.end(), rng);
  return order;
}

inline std::mt19937_64 step_rng(std::uint64_t seed, std::uint64_t step) {
  std::seed_seq seq{seed, step, std::uint64_t{0x57e9}};
  return std::mt19937_64(seq);
}

inline std::vector<std::size_t> resolve_levels(const TrainConfig& cfg, std::size_t available) {
  if (cfg.levels.empty()) {
    std::vector<std::size_t> all(available);
    for (std::size_t i = 0; i < available; ++i) all[i] = i;
    return all;
  }
  for (std::size_t l : cfg.levels)
    if (l >= available)
      throw ConfigError("level " + std::to_string(l) + " requested but records have " + std::to_string(available));
  return cfg.levels;
}

/// Fresh training state: projectors initialised per level, no Adam moments.
inline Checkpoint initial_checkpoint(const TrainConfig& cfg, const MultiLevelFeatureRecord& sample) {
  Checkpoint ck;
  ck.config = cfg;
  ck.adam.config.learning_rate = cfg.learning_rate;
  for (std::size_t l : resolve_levels(cfg, sample.levels.size())) {
    LevelState s;
    s.source_level = l;
    ProjectorConfig pc = cfg.projector;
    pc.init_seed = cfg.projector.init_seed + 0x9e3779b97f4a7c15ULL * l;
    s.params = init_params<float>(pc, sample.levels[l].channels);
    s.center.momentum = cfg.loss.center_momentum;
    ck.levels.push_back(std::move(s));
  }
  return ck;
}

namespace pretrain_detail {

// Residuals of one record and its twin against a fresh random draw of references.
inline ResidualRecord draw_residual(const TrainingData& data, std::size_t slot, const ReferenceSampler& sampler,
                                    double threshold, std::mt19937_64& rng) {
  const auto refs = sampler.draw(data.pools[slot], rng);
  std::vector<const MultiLevelFeatureRecord*> ptrs;
  for (std::size_t j : refs) ptrs.push_back(&data.records[j]);
  return residualize(data.records[data.train[slot]], build_bank(ptrs), threshold);
}

// Rows: every original patch of the batch, then every twin patch in the same order.
inline Tensor<float> stack_level(const std::vector<ResidualRecord>& res, std::size_t level,
                                 std::vector<std::uint8_t>& labels) {
  const std::size_t patches = res.front().levels[level].patches();
  const std::size_t c = res.front().levels[level].channels;
  const std::size_t n = res.size() * patches;
  Tensor<float> x(Shape{2 * n, c});
  labels.assign(2 * n, 0);
  for (std::size_t b = 0; b < res.size(); ++b) {
    const auto& orig = res[b].levels[level].values;
    const auto& twin = (*res[b].augmented_levels)[level].values;
    std::copy(orig.begin(), orig.end(), x.values().begin() + static_cast<std::ptrdiff_t>(b * patches * c));
    std::copy(twin.begin(), twin.end(), x.values().begin() + static_cast<std::ptrdiff_t>((n + b * patches) * c));
    for (std::size_t p = 0; p < patches; ++p) labels[b * patches + p] = labels[n + b * patches + p] = res[b].labels[level][p];
  }
  return x;
}

// Epoch-mode center: mean projected normal feature over every training record.
inline void recompute_centers(const TrainingData& data, Checkpoint& ck, std::uint64_t epoch) {
  const TrainConfig& cfg = ck.config;
  const ReferenceSampler sampler(cfg.k_choices);
  std::seed_seq seq{cfg.seed, epoch, std::uint64_t{0xce47}};
  std::mt19937_64 rng(seq);
  std::vector<std::vector<double>> sums(ck.levels.size());
  std::vector<std::size_t> counts(ck.levels.size(), 0);
  for (std::size_t slot = 0; slot < data.train.size(); ++slot) {
    const auto res = draw_residual(data, slot, sampler, cfg.label_threshold, rng);
    for (std::size_t i = 0; i < ck.levels.size(); ++i) {
      const std::size_t l = ck.levels[i].source_level;
      std::vector<std::uint8_t> labels;
      const auto x = stack_level({res}, l, labels);
      const auto y = normal_rows(project_values(x, ck.levels[i].params), labels);
      if (sums[i].empty()) sums[i].assign(y.cols(), 0.0);
      for (std::size_t r = 0; r < y.rows(); ++r)
        for (std::size_t c = 0; c < y.cols(); ++c) sums[i][c] += y(r, c);
      counts[i] += y.rows();
    }
  }
  for (std::size_t i = 0; i < ck.levels.size(); ++i) {
    if (counts[i] == 0) continue;
    auto& est = ck.levels[i].center;
    est.center = Tensor<float>(Shape{sums[i].size()});
    for (std::size_t c = 0; c < sums[i].size(); ++c) est.center[c] = static_cast<float>(sums[i][c] / counts[i]);
    est.initialized = true;
  }
}

}  // namespace pretrain_detail

/// One optimisation step on the given batch. Updates ck in place.
inline StepLog train_step(const TrainingData& data, Checkpoint& ck, const std::vector<std::size_t>& batch_slots,
                          std::uint64_t step, std::uint64_t epoch) {
  const TrainConfig& cfg = ck.config;
  auto rng = step_rng(cfg.seed, step);
  const ReferenceSampler sampler(cfg.k_choices);
  std::vector<ResidualRecord> res;
  res.reserve(batch_slots.size());
  for (std::size_t slot : batch_slots)
    res.push_back(pretrain_detail::draw_residual(data, slot, sampler, cfg.label_threshold, rng));

  StepLog log;
  log.step = step;
  log.epoch = epoch;
  Tape<float> tape;
  std::vector<ProjectorVars<float>> vars;
  std::optional<Var<float>> total;
  for (std::size_t i = 0; i < ck.levels.size(); ++i) {
    auto& level = ck.levels[i];
    std::vector<std::uint8_t> labels;
    const auto x = pretrain_detail::stack_level(res, level.source_level, labels);
    vars.push_back(bind_params(tape, level.params, true));
    const Var<float> y = project(tape.constant(x), vars.back());
    if (cfg.loss.center_mode == CenterMode::ema) level.center.update(normal_rows(y.value(), labels));
    ContrastiveBatch<float> batch{y, labels,
                                  level.center.initialized ? level.center.center : Tensor<float>(Shape{y.value().cols()})};
    std::vector<std::size_t> anchors;
    const std::size_t pairs = labels.size() / 2;
    if (cfg.loss.angle_anchor_cap > 0 && cfg.loss.angle_anchor_cap < pairs)
      anchors = sample_anchors(pairs, cfg.loss.angle_anchor_cap, rng);
    auto loss = total_loss(batch, cfg.loss, anchors.empty() ? nullptr : &anchors);
    log.levels.push_back(loss.breakdown);
    total = total ? add(*total, loss.value) : loss.value;
  }
  log.total = static_cast<double>(total->value()[0]);
  if (!std::isfinite(log.total)) throw NumericError("non-finite loss");
  tape.backward(*total);

  std::vector<std::vector<Tensor<float>>> grads(ck.levels.size());
  for (std::size_t i = 0; i < ck.levels.size(); ++i)
    visit_params(vars[i], [&](const std::string&, const Var<float>& v) { grads[i].push_back(tape.grad(v)); });
  auto refs = param_refs(ck.levels, &grads);
  ck.adam.config.learning_rate = cfg.learning_rate;
  adam_step(refs, ck.adam);
  ck.step = step + 1;
  return log;
}

/// Runs training to cfg.epochs (or cfg.max_steps). With options.resume the
/// checkpoint's state and config are used, except epochs and max_steps which
/// come from cfg so a run can be extended.
inline PretrainResult pretrain(const Manifest& manifest, const TrainConfig& cfg, const PretrainOptions& options = {}) {
  cfg.validate();
  const TrainingData data = TrainingData::load(manifest);
  PretrainResult out;
  Checkpoint& ck = out.checkpoint;
  if (options.resume) {
    ck = *options.resume;
    ck.config.epochs = cfg.epochs;
    ck.config.max_steps = cfg.max_steps;
    ck.config.validate();
  } else {
    ck = initial_checkpoint(cfg, data.records[data.train.front()]);
  }
  const TrainConfig& c = ck.config;
  for (const auto& level : ck.levels) {
    const std::size_t l = level.source_level;
    if (l >= data.records.front().levels.size() ||
        data.records.front().levels[l].channels != level.params.input_dim)
      throw DataError("checkpoint projector for level " + std::to_string(l) + " does not match the records");
  }

  const std::size_t spe = steps_per_epoch(data.train.size(), c.batch_size);
  std::uint64_t last = static_cast<std::uint64_t>(c.epochs) * spe;
  if (c.max_steps > 0) last = std::min<std::uint64_t>(last, c.max_steps);

  std::vector<std::size_t> order;
  std::uint64_t order_epoch = ~std::uint64_t{0};
  for (std::uint64_t s = ck.step; s < last; ++s) {
    const std::uint64_t epoch = s / spe, b = s % spe;
    if (epoch != order_epoch) {
      order = epoch_order(data.train.size(), c.seed, epoch);
      order_epoch = epoch;
    }
    if (b == 0 && c.loss.center_mode == CenterMode::epoch) pretrain_detail::recompute_centers(data, ck, epoch);
    const std::size_t begin = b * c.batch_size, end = std::min(order.size(), begin + c.batch_size);
    std::vector<std::size_t> batch(order.begin() + static_cast<std::ptrdiff_t>(begin),
                                   order.begin() + static_cast<std::ptrdiff_t>(end));
    StepLog log;
    try {
      log = train_step(data, ck, batch, s, epoch);
    } catch (const NumericError& e) {
      throw NumericError("step " + std::to_string(s) + ": " + e.what());
    }
    if (options.on_step) options.on_step(log);
    out.history.push_back(std::move(log));
    if (!options.checkpoint_path.empty() && ((s + 1) % spe == 0 || s + 1 == last))
      save_checkpoint(ck, options.checkpoint_path);
  }
  if (!options.checkpoint_path.empty() && out.history.empty()) save_checkpoint(ck, options.checkpoint_path);
  return out;
}

}  // namespace adp
