#pragma once

// End-to-end glue: residualize records against their class references,
// project them with a trained checkpoint, score, and write or read score
// files.
//
// Score file (JSONL), one line per image:
//   {"image_id", "class_id", "image_label", "image_score", "score_map"}
// score_map is a path, relative to the score file, of a single-level ADFR
// record holding the fused H x W x 1 map.

#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "adp/checkpoint.hpp"
#include "adp/feature_store.hpp"
#include "adp/metrics.hpp"
#include "adp/projector.hpp"
#include "adp/residual.hpp"
#include "adp/scorers.hpp"

namespace adp {

struct ProjectedRecord {
  std::string image_id;
  std::string class_id;
  std::uint8_t image_label = 0;
  std::vector<std::size_t> source_levels;
  std::vector<FeatureGrid> levels;  // parallel to source_levels
};

/// Residuals against the bank, then each trained level through its
/// projector. Without a checkpoint the raw residuals of every level are
/// returned.
inline ProjectedRecord project_record(const MultiLevelFeatureRecord& record, const ReferenceBank& bank,
                                      const Checkpoint* ck) {
  const auto res = residualize(record, bank, std::nullopt);
  ProjectedRecord out;
  out.image_id = record.image_id;
  out.class_id = record.class_id;
  out.image_label = record.image_label;
  if (!ck) {
    for (std::size_t l = 0; l < res.levels.size(); ++l) {
      out.source_levels.push_back(l);
      out.levels.push_back(res.levels[l]);
    }
    return out;
  }
  for (const auto& level : ck->levels) {
    const std::size_t l = level.source_level;
    if (l >= res.levels.size() || res.levels[l].channels != level.params.input_dim)
      throw DataError("checkpoint level " + std::to_string(l) + " does not match record '" + record.image_id + "'");
    const auto& g = res.levels[l];
    const Tensor<float> x(Shape{g.patches(), g.channels}, g.values);
    const auto y = project_values(x, level.params);
    FeatureGrid pg(g.height, g.width, static_cast<std::uint32_t>(y.cols()));
    pg.values.assign(y.values().begin(), y.values().end());
    out.source_levels.push_back(l);
    out.levels.push_back(std::move(pg));
  }
  return out;
}

/// Normal reference-split records of a manifest, grouped by class.
inline std::map<std::string, std::vector<MultiLevelFeatureRecord>> load_reference_sets(const Manifest& refs) {
  std::map<std::string, std::vector<MultiLevelFeatureRecord>> out;
  for (std::size_t i : refs.select(Split::reference))
    if (refs.entries[i].image_label == 0) out[refs.entries[i].class_id].push_back(refs.load(i));
  if (out.empty()) throw DataError("reference manifest has no normal reference-split records");
  return out;
}

inline const std::vector<MultiLevelFeatureRecord>& references_for(
    const std::map<std::string, std::vector<MultiLevelFeatureRecord>>& sets, const std::string& class_id) {
  const auto it = sets.find(class_id);
  if (it == sets.end()) throw DataError("no reference records for class '" + class_id + "'");
  return it->second;
}

enum class Method { featurenorm, padim, patchcore };

inline const char* method_name(Method m) {
  switch (m) {
    case Method::featurenorm: return "featurenorm";
    case Method::padim: return "padim";
    case Method::patchcore: return "patchcore";
  }
  return "?";
}

inline Method parse_method(const std::string& s) {
  if (s == "featurenorm") return Method::featurenorm;
  if (s == "padim") return Method::padim;
  if (s == "patchcore") return Method::patchcore;
  throw ConfigError("unknown method '" + s + "' (allowed: featurenorm, padim, patchcore)");
}

struct ScoreOptions {
  Method method = Method::featurenorm;
  double shrinkage = 0.01;
  double coreset_fraction = 0.1;
  Aggregate aggregate = Aggregate::max;
  std::size_t topk = 10;
};

struct ImageScore {
  std::string image_id;
  std::string class_id;
  std::uint8_t image_label = 0;
  double image_score = 0;
  std::vector<ScoreGrid> levels;
  ScoreGrid fused;
};

/// Per-class fitted models for the gaussian and coreset scorers. Training
/// features are the references themselves, each residualized against the
/// other references of its class.
struct ClassModels {
  std::vector<GaussianModel> gaussians;  // per projected level
  std::vector<Coreset> coresets;
};

inline std::vector<ProjectedRecord> leave_one_out_features(const std::vector<MultiLevelFeatureRecord>& refs,
                                                           const Checkpoint* ck) {
  if (refs.size() < 2)
    throw DataError("fitting a scorer needs at least 2 references per class, got " + std::to_string(refs.size()));
  std::vector<ProjectedRecord> out;
  for (std::size_t i = 0; i < refs.size(); ++i) {
    std::vector<const MultiLevelFeatureRecord*> others;
    for (std::size_t j = 0; j < refs.size(); ++j)
      if (j != i) others.push_back(&refs[j]);
    out.push_back(project_record(refs[i], build_bank(others), ck));
  }
  return out;
}

inline ClassModels fit_class_models(const std::vector<MultiLevelFeatureRecord>& refs, const Checkpoint* ck,
                                    const ScoreOptions& opt) {
  ClassModels m;
  if (opt.method == Method::featurenorm) return m;
  const auto feats = leave_one_out_features(refs, ck);
  for (std::size_t l = 0; l < feats.front().levels.size(); ++l) {
    if (opt.method == Method::padim) {
      std::vector<const FeatureGrid*> grids;
      for (const auto& f : feats) grids.push_back(&f.levels[l]);
      m.gaussians.push_back(fit_gaussian(grids, opt.shrinkage));
    } else {
      std::vector<float> rows;
      for (const auto& f : feats) rows.insert(rows.end(), f.levels[l].values.begin(), f.levels[l].values.end());
      m.coresets.push_back(build_coreset(rows, feats.front().levels[l].channels, opt.coreset_fraction));
    }
  }
  return m;
}

inline ImageScore score_projected(const ProjectedRecord& p, const ClassModels& models, const ScoreOptions& opt) {
  ImageScore s;
  s.image_id = p.image_id;
  s.class_id = p.class_id;
  s.image_label = p.image_label;
  for (std::size_t l = 0; l < p.levels.size(); ++l) {
    switch (opt.method) {
      case Method::featurenorm: s.levels.push_back(feature_norm_map(p.levels[l])); break;
      case Method::padim: s.levels.push_back(mahalanobis_map(p.levels[l], models.gaussians.at(l))); break;
      case Method::patchcore: s.levels.push_back(knn_map(p.levels[l], models.coresets.at(l))); break;
    }
  }
  s.fused = fuse(s.levels);
  s.image_score = aggregate(s.fused, opt.aggregate, opt.topk);
  return s;
}

/// Scores every test-split record of `test` against its class references.
inline std::vector<ImageScore> score_manifest(const Manifest& test, const Manifest& refs, const Checkpoint* ck,
                                              const ScoreOptions& opt) {
  const auto sets = load_reference_sets(refs);
  std::map<std::string, ClassModels> models;
  std::map<std::string, ReferenceBank> banks;
  std::vector<ImageScore> out;
  const auto idx = test.select(Split::test);
  if (idx.empty()) throw DataError("test manifest has no test-split records");
  for (std::size_t i : idx) {
    const auto record = test.load(i);
    const auto& cls = record.class_id;
    if (!banks.count(cls)) {
      const auto& r = references_for(sets, cls);
      banks.emplace(cls, build_bank(r));
      models.emplace(cls, fit_class_models(r, ck, opt));
    }
    out.push_back(score_projected(project_record(record, banks.at(cls), ck), models.at(cls), opt));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Score files
// ---------------------------------------------------------------------------

inline MultiLevelFeatureRecord map_record(const ImageScore& s) {
  MultiLevelFeatureRecord r;
  r.image_id = s.image_id;
  r.class_id = s.class_id;
  r.image_label = s.image_label;
  FeatureGrid g(static_cast<std::uint32_t>(s.fused.height), static_cast<std::uint32_t>(s.fused.width), 1);
  for (std::size_t i = 0; i < s.fused.values.size(); ++i) g.values[i] = static_cast<float>(s.fused.values[i]);
  r.levels.push_back(std::move(g));
  return r;
}

inline void write_scores(const std::vector<ImageScore>& scores, const std::filesystem::path& path) {
  namespace fs = std::filesystem;
  const fs::path dir = path.parent_path().empty() ? fs::path(".") : path.parent_path();
  const fs::path maps = path.stem().string() + "_maps";
  fs::create_directories(dir / maps);
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  for (const auto& s : scores) {
    const fs::path rel = maps / (s.image_id + ".adfr");
    write_record(map_record(s), dir / rel);
    nlohmann::json j{{"image_id", s.image_id},
                     {"class_id", s.class_id},
                     {"image_label", s.image_label},
                     {"image_score", s.image_score},
                     {"score_map", rel.generic_string()}};
    out << j.dump() << "\n";
  }
  if (!out) throw IoError("write failed for " + path.string());
}

struct ScoreLine {
  std::string image_id;
  std::string class_id;
  int image_label = 0;
  double image_score = 0;
  std::filesystem::path score_map;  // resolved
};

inline std::vector<ScoreLine> read_scores(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open score file " + path.string());
  std::vector<ScoreLine> out;
  std::string line;
  std::size_t no = 0;
  while (std::getline(in, line)) {
    ++no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      ScoreLine s;
      s.image_id = j.at("image_id").get<std::string>();
      s.class_id = j.value("class_id", std::string());
      s.image_label = j.value("image_label", -1);
      s.image_score = j.at("image_score").get<double>();
      if (j.contains("score_map") && !j["score_map"].is_null()) {
        std::filesystem::path p = j["score_map"].get<std::string>();
        s.score_map = p.is_absolute() ? p : path.parent_path() / p;
      }
      out.push_back(std::move(s));
    } catch (const nlohmann::json::exception& e) {
      throw FormatError(path.string() + " line " + std::to_string(no) + ": " + e.what());
    }
  }
  return out;
}

/// Ground-truth mask from the level with the most patches: 1 where the
/// anomaly fraction exceeds the threshold. Empty when the record has no
/// fraction maps.
inline BinaryMask record_mask(const MultiLevelFeatureRecord& r, double threshold = 0.5) {
  BinaryMask m;
  if (!r.anomaly_fractions) return m;
  std::size_t finest = 0;
  for (std::size_t l = 1; l < r.levels.size(); ++l)
    if (r.levels[l].patches() > r.levels[finest].patches()) finest = l;
  m.height = r.levels[finest].height;
  m.width = r.levels[finest].width;
  for (float f : (*r.anomaly_fractions)[finest]) m.values.push_back(static_cast<double>(f) > threshold ? 1 : 0);
  return m;
}

/// Joins score lines with the records of a manifest by image id.
inline std::vector<EvalItem> load_eval_items(const std::filesystem::path& scores_path, const Manifest& masks,
                                             double mask_threshold = 0.5) {
  std::map<std::string, std::size_t> by_id;
  std::vector<MultiLevelFeatureRecord> records;
  for (std::size_t i = 0; i < masks.entries.size(); ++i) {
    auto r = masks.load(i);
    if (!by_id.emplace(r.image_id, records.size()).second)
      throw DataError("image id '" + r.image_id + "' appears twice in the mask manifest");
    records.push_back(std::move(r));
  }
  std::vector<EvalItem> items;
  for (const auto& s : read_scores(scores_path)) {
    const auto it = by_id.find(s.image_id);
    if (it == by_id.end()) throw DataError("scored image '" + s.image_id + "' is not in the mask manifest");
    const auto& r = records[it->second];
    if (s.image_label >= 0 && s.image_label != r.image_label)
      throw DataError("score file label for '" + s.image_id + "' disagrees with the record");
    EvalItem e;
    e.image_id = s.image_id;
    e.class_id = r.class_id;
    e.label = r.image_label;
    e.image_score = s.image_score;
    if (!s.score_map.empty()) {
      const auto m = read_record(s.score_map);
      const auto& g = m.levels.at(0);
      e.map = ScoreGrid(g.height, g.width);
      for (std::size_t k = 0; k < g.patches(); ++k) e.map.values[k] = g.values[k * g.channels];
      e.mask = record_mask(r, mask_threshold);
    }
    items.push_back(std::move(e));
  }
  if (items.empty()) throw DataError("score file " + scores_path.string() + " is empty");
  return items;
}

}  // namespace adp
