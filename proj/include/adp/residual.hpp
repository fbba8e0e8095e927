#pragma once

// Residual features: every patch feature minus its nearest normal reference
// feature from a per-level bank of K reference images.

#include <algorithm>
#include <cstdint>
#include <limits>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "adp/errors.hpp"
#include "adp/feature_store.hpp"
#include "adp/parallel.hpp"

namespace adp {

struct BankLevel {
  std::uint32_t channels = 0;
  std::size_t rows = 0;
  std::vector<float> values;  // rows x channels

  std::span<const float> row(std::size_t r) const { return {values.data() + r * channels, channels}; }
};

/// Flattened normal patch features, one matrix per level. Row order is
/// reference order, then h, then w.
struct ReferenceBank {
  std::vector<BankLevel> levels;
  std::vector<std::string> reference_ids;
  // Grid dims the bank was built from, used to validate inputs.
  std::vector<FeatureGrid> level_dims;

  std::size_t k() const noexcept { return reference_ids.size(); }
};

inline ReferenceBank build_bank(std::span<const MultiLevelFeatureRecord* const> references) {
  if (references.empty()) throw DataError("build_bank: empty reference list");
  ReferenceBank bank;
  const auto& first = *references.front();
  for (const auto* ref : references) {
    if (ref->image_label != 0)
      throw DataError("build_bank: reference '" + ref->image_id + "' is abnormal");
    if (ref->levels.size() != first.levels.size())
      throw DataError("build_bank: reference '" + ref->image_id + "' has a different level count");
    for (std::size_t l = 0; l < first.levels.size(); ++l)
      if (!ref->levels[l].same_dims(first.levels[l]))
        throw DataError("build_bank: reference '" + ref->image_id + "' level " + std::to_string(l) +
                        " dims differ");
    bank.reference_ids.push_back(ref->image_id);
  }
  for (const auto& g : first.levels) {
    BankLevel level;
    level.channels = g.channels;
    level.rows = g.patches() * references.size();
    level.values.reserve(level.rows * g.channels);
    bank.levels.push_back(std::move(level));
    bank.level_dims.emplace_back(g.height, g.width, g.channels);
    bank.level_dims.back().values.clear();
  }
  for (const auto* ref : references)
    for (std::size_t l = 0; l < ref->levels.size(); ++l)
      bank.levels[l].values.insert(bank.levels[l].values.end(), ref->levels[l].values.begin(),
                                   ref->levels[l].values.end());
  return bank;
}

inline ReferenceBank build_bank(const std::vector<MultiLevelFeatureRecord>& references) {
  std::vector<const MultiLevelFeatureRecord*> ptrs;
  for (const auto& r : references) ptrs.push_back(&r);
  return build_bank(ptrs);
}

/// Index of the nearest bank row (squared Euclidean, accumulated in double)
/// for each patch of the grid. Ties go to the lowest row index.
inline std::vector<std::uint32_t> nearest_rows(const FeatureGrid& grid, const BankLevel& bank) {
  if (grid.channels != bank.channels)
    throw ShapeError("nearest_rows: grid has " + std::to_string(grid.channels) + " channels, bank " +
                     std::to_string(bank.channels));
  if (bank.rows == 0) throw DataError("nearest_rows: empty bank");
  const std::size_t n = grid.patches();
  const std::size_t c = grid.channels;
  std::vector<std::uint32_t> nearest(n);
  parallel_for(n, 8, [&](std::size_t begin, std::size_t end) {
    for (std::size_t p = begin; p < end; ++p) {
      const float* x = grid.values.data() + p * c;
      double best = std::numeric_limits<double>::infinity();
      std::uint32_t best_row = 0;
      for (std::size_t r = 0; r < bank.rows; ++r) {
        const float* b = bank.values.data() + r * c;
        double d = 0.0;
        for (std::size_t k = 0; k < c; ++k) {
          const double diff = static_cast<double>(x[k]) - static_cast<double>(b[k]);
          d += diff * diff;
          if (d >= best) break;
        }
        if (d < best) {
          best = d;
          best_row = static_cast<std::uint32_t>(r);
        }
      }
      nearest[p] = best_row;
    }
  });
  return nearest;
}

inline FeatureGrid residualize_grid(const FeatureGrid& grid, const BankLevel& bank) {
  const auto nearest = nearest_rows(grid, bank);
  FeatureGrid out(grid.height, grid.width, grid.channels);
  const std::size_t c = grid.channels;
  for (std::size_t p = 0; p < nearest.size(); ++p) {
    const float* b = bank.values.data() + std::size_t{nearest[p]} * c;
    for (std::size_t k = 0; k < c; ++k) out.values[p * c + k] = grid.values[p * c + k] - b[k];
  }
  return out;
}

struct ResidualRecord {
  std::string image_id;
  std::string class_id;
  std::uint8_t image_label = 0;
  std::vector<FeatureGrid> levels;
  std::optional<std::vector<FeatureGrid>> augmented_levels;
  // Empty when labels were not requested.
  std::vector<std::vector<std::uint8_t>> labels;
};

/// Patch label rule: 1 iff the anomaly fraction exceeds the threshold.
inline std::vector<std::uint8_t> patch_labels(const MultiLevelFeatureRecord& record, std::size_t level,
                                              double threshold) {
  const std::size_t n = record.levels.at(level).patches();
  if (!record.anomaly_fractions) {
    if (record.image_label != 0)
      throw DataError("residualize: abnormal record '" + record.image_id +
                      "' has no fraction map but labels were requested");
    return std::vector<std::uint8_t>(n, 0);
  }
  const auto& f = (*record.anomaly_fractions)[level];
  std::vector<std::uint8_t> m(n);
  for (std::size_t i = 0; i < n; ++i) m[i] = static_cast<double>(f[i]) > threshold ? 1 : 0;
  return m;
}

/// Residualizes every level of a record (and its augmented twin, when present)
/// against the bank. Pass std::nullopt as threshold to skip labels.
inline ResidualRecord residualize(const MultiLevelFeatureRecord& record, const ReferenceBank& bank,
                                  std::optional<double> label_threshold = 0.0) {
  if (record.levels.size() != bank.levels.size())
    throw ShapeError("residualize: record '" + record.image_id + "' has " +
                     std::to_string(record.levels.size()) + " levels, bank " +
                     std::to_string(bank.levels.size()));
  for (std::size_t l = 0; l < record.levels.size(); ++l)
    if (!record.levels[l].same_dims(bank.level_dims[l]))
      throw ShapeError("residualize: record '" + record.image_id + "' level " + std::to_string(l) +
                       " dims do not match the bank");
  ResidualRecord out;
  out.image_id = record.image_id;
  out.class_id = record.class_id;
  out.image_label = record.image_label;
  for (std::size_t l = 0; l < record.levels.size(); ++l)
    out.levels.push_back(residualize_grid(record.levels[l], bank.levels[l]));
  if (record.augmented_levels) {
    out.augmented_levels.emplace();
    for (std::size_t l = 0; l < record.levels.size(); ++l)
      out.augmented_levels->push_back(residualize_grid((*record.augmented_levels)[l], bank.levels[l]));
  }
  if (label_threshold) {
    for (std::size_t l = 0; l < record.levels.size(); ++l)
      out.labels.push_back(patch_labels(record, l, *label_threshold));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Random reference sampling
// ---------------------------------------------------------------------------

/// Draws K uniformly from k_choices, then K distinct pool members uniformly.
class ReferenceSampler {
 public:
  explicit ReferenceSampler(std::vector<int> k_choices) : k_choices_(std::move(k_choices)) {
    if (k_choices_.empty()) throw ConfigError("k_choices must not be empty");
    for (int k : k_choices_)
      if (k < 1) throw ConfigError("k_choices entries must be >= 1");
  }

  int max_k() const { return *std::max_element(k_choices_.begin(), k_choices_.end()); }

  template <typename Rng>
  std::vector<std::size_t> draw(std::span<const std::size_t> pool, Rng& rng) const {
    if (pool.size() < static_cast<std::size_t>(max_k()))
      throw DataError("reference pool has " + std::to_string(pool.size()) +
                      " normal records, need at least " + std::to_string(max_k()));
    std::uniform_int_distribution<std::size_t> pick_k(0, k_choices_.size() - 1);
    const auto k = static_cast<std::size_t>(k_choices_[pick_k(rng)]);
    std::vector<std::size_t> items(pool.begin(), pool.end());
    for (std::size_t i = 0; i < k; ++i) {
      std::uniform_int_distribution<std::size_t> pick(i, items.size() - 1);
      std::swap(items[i], items[pick(rng)]);
    }
    items.resize(k);
    return items;
  }

 private:
  std::vector<int> k_choices_;
};

/// One reference draw per training sample over the normal entries of a
/// manifest. Returned values index into pool.entries.
inline std::vector<std::vector<std::size_t>> sample_references(const Manifest& pool,
                                                               const std::vector<int>& k_choices,
                                                               std::uint64_t seed, std::size_t draws) {
  std::vector<std::size_t> normals;
  for (std::size_t i = 0; i < pool.entries.size(); ++i)
    if (pool.entries[i].image_label == 0) normals.push_back(i);
  ReferenceSampler sampler(k_choices);
  std::mt19937_64 rng(seed);
  std::vector<std::vector<std::size_t>> out;
  out.reserve(draws);
  for (std::size_t d = 0; d < draws; ++d) out.push_back(sampler.draw(normals, rng));
  return out;
}

}  // namespace adp
