#pragma once

// Image-level AUROC and region-level PRO.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <map>
#include <numeric>
#include <string>
#include <vector>

#include <json.hpp>

#include "adp/errors.hpp"
#include "adp/parallel.hpp"
#include "adp/scorers.hpp"

namespace adp {

/// Mann-Whitney AUROC; tied scores share their average rank (a tie counts 1/2).
inline double auroc(const std::vector<double>& scores, const std::vector<std::uint8_t>& labels) {
  if (scores.size() != labels.size()) throw ShapeError("auroc: scores and labels differ in length");
  std::size_t pos = 0;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    if (!std::isfinite(scores[i])) throw NumericError("auroc: non-finite score at index " + std::to_string(i));
    if (labels[i] > 1) throw DataError("auroc: labels must be 0 or 1");
    pos += labels[i];
  }
  const std::size_t neg = scores.size() - pos;
  if (pos == 0 || neg == 0) throw DataError("auroc: both classes must be present");
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  double rank_sum = 0;
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j + 1 < order.size() && scores[order[j + 1]] == scores[order[i]]) ++j;
    const double avg = 0.5 * static_cast<double>(i + j) + 1.0;  // 1-based ranks i+1..j+1
    for (std::size_t k = i; k <= j; ++k)
      if (labels[order[k]]) rank_sum += avg;
    i = j + 1;
  }
  const double p = static_cast<double>(pos), n = static_cast<double>(neg);
  return (rank_sum - p * (p + 1) / 2) / (p * n);
}

struct BinaryMask {
  std::size_t height = 0, width = 0;
  std::vector<std::uint8_t> values;
};

/// 4-connected component labels (-1 for background) and the component count.
inline std::pair<std::vector<int>, std::size_t> connected_components(const BinaryMask& m) {
  const std::size_t n = m.height * m.width;
  if (m.values.size() != n) throw ShapeError("connected_components: mask size does not match dims");
  std::vector<std::size_t> parent(n);
  std::iota(parent.begin(), parent.end(), 0);
  auto find = [&](std::size_t x) {
    while (parent[x] != x) x = parent[x] = parent[parent[x]];
    return x;
  };
  auto unite = [&](std::size_t a, std::size_t b) {
    a = find(a), b = find(b);
    if (a != b) parent[std::max(a, b)] = std::min(a, b);
  };
  for (std::size_t r = 0; r < m.height; ++r)
    for (std::size_t c = 0; c < m.width; ++c) {
      const std::size_t i = r * m.width + c;
      if (!m.values[i]) continue;
      if (c > 0 && m.values[i - 1]) unite(i, i - 1);
      if (r > 0 && m.values[i - m.width]) unite(i, i - m.width);
    }
  std::vector<int> labels(n, -1);
  std::vector<int> id(n, -1);
  std::size_t count = 0;
  for (std::size_t i = 0; i < n; ++i) {
    if (!m.values[i]) continue;
    const std::size_t root = find(i);
    if (id[root] < 0) id[root] = static_cast<int>(count++);
    labels[i] = id[root];
  }
  return {std::move(labels), count};
}

struct ProPoint {
  double threshold = 0, fpr = 0, pro = 0;
};

namespace metrics_detail {

struct Region {
  std::size_t image;
  std::vector<std::size_t> pixels;
};

struct Prepared {
  std::vector<Region> regions;
  std::size_t negatives = 0;
};

inline Prepared prepare(const std::vector<ScoreGrid>& maps, const std::vector<BinaryMask>& masks) {
  if (maps.size() != masks.size()) throw ShapeError("pro: map and mask counts differ");
  Prepared p;
  for (std::size_t i = 0; i < maps.size(); ++i) {
    if (maps[i].height != masks[i].height || maps[i].width != masks[i].width)
      throw ShapeError("pro: map " + std::to_string(i) + " does not match its mask");
    for (double v : maps[i].values)
      if (!std::isfinite(v)) throw NumericError("pro: non-finite score in map " + std::to_string(i));
    const auto [labels, count] = connected_components(masks[i]);
    std::vector<Region> local(count);
    for (auto& r : local) r.image = i;
    for (std::size_t k = 0; k < labels.size(); ++k) {
      if (labels[k] >= 0) local[static_cast<std::size_t>(labels[k])].pixels.push_back(k);
      else ++p.negatives;
    }
    for (auto& r : local) p.regions.push_back(std::move(r));
  }
  if (p.regions.empty()) throw DataError("pro: no anomalous regions in the ground truth");
  return p;
}

inline ProPoint evaluate(const Prepared& p, const std::vector<ScoreGrid>& maps, const std::vector<BinaryMask>& masks,
                         double t) {
  ProPoint out;
  out.threshold = t;
  std::size_t fp = 0;
  for (std::size_t i = 0; i < maps.size(); ++i)
    for (std::size_t k = 0; k < maps[i].values.size(); ++k) fp += !masks[i].values[k] && maps[i].values[k] >= t;
  out.fpr = p.negatives ? static_cast<double>(fp) / static_cast<double>(p.negatives) : 0.0;
  double sum = 0;
  for (const auto& r : p.regions) {
    std::size_t hit = 0;
    for (std::size_t k : r.pixels) hit += maps[r.image].values[k] >= t;
    sum += static_cast<double>(hit) / static_cast<double>(r.pixels.size());
  }
  out.pro = sum / static_cast<double>(p.regions.size());
  return out;
}

}  // namespace metrics_detail

/// PRO and FPR at a single threshold (pixels with score >= t are predicted).
inline ProPoint pro_at(const std::vector<ScoreGrid>& maps, const std::vector<BinaryMask>& masks, double t) {
  const auto p = metrics_detail::prepare(maps, masks);
  return metrics_detail::evaluate(p, maps, masks, t);
}

/// Curve over `thresholds` values evenly spaced between the smallest and
/// largest score, plus the (0, 0) and (1, 1) endpoints, sorted by FPR.
inline std::vector<ProPoint> pro_curve(const std::vector<ScoreGrid>& maps, const std::vector<BinaryMask>& masks,
                                       std::size_t thresholds = 200) {
  if (thresholds < 2) throw ConfigError("pro: need at least 2 thresholds");
  const auto p = metrics_detail::prepare(maps, masks);
  double lo = std::numeric_limits<double>::infinity(), hi = -lo;
  for (const auto& m : maps)
    for (double v : m.values) lo = std::min(lo, v), hi = std::max(hi, v);
  std::vector<ProPoint> curve(thresholds);
  parallel_for(thresholds, 4, [&](std::size_t begin, std::size_t end) {
    for (std::size_t i = begin; i < end; ++i) {
      const double t = i + 1 == thresholds ? hi : lo + (hi - lo) * static_cast<double>(i) / static_cast<double>(thresholds - 1);
      curve[i] = metrics_detail::evaluate(p, maps, masks, t);
    }
  });
  curve.push_back({std::numeric_limits<double>::infinity(), 0.0, 0.0});
  curve.push_back({-std::numeric_limits<double>::infinity(), 1.0, 1.0});
  std::stable_sort(curve.begin(), curve.end(), [](const ProPoint& a, const ProPoint& b) {
    return a.fpr != b.fpr ? a.fpr < b.fpr : a.pro < b.pro;
  });
  return curve;
}

/// Trapezoid area under PRO(FPR) on [0, limit], divided by limit. The curve
/// is linearly interpolated at the limit.
inline double pro_integral(const std::vector<ProPoint>& curve, double fpr_limit = 0.3) {
  if (!(fpr_limit > 0 && fpr_limit <= 1)) throw ConfigError("pro: fpr_limit must be in (0, 1]");
  double area = 0;
  for (std::size_t i = 0; i + 1 < curve.size(); ++i) {
    const double x0 = curve[i].fpr, x1 = curve[i + 1].fpr;
    if (x0 >= fpr_limit) break;
    const double y0 = curve[i].pro, y1 = curve[i + 1].pro;
    if (x1 <= fpr_limit) {
      area += (x1 - x0) * (y0 + y1) / 2;
    } else {
      const double y = y0 + (y1 - y0) * (fpr_limit - x0) / (x1 - x0);
      area += (fpr_limit - x0) * (y0 + y) / 2;
    }
  }
  return area / fpr_limit;
}

inline double pro(const std::vector<ScoreGrid>& maps, const std::vector<BinaryMask>& masks, double fpr_limit = 0.3,
                  std::size_t thresholds = 200) {
  return pro_integral(pro_curve(maps, masks, thresholds), fpr_limit);
}

// ---------------------------------------------------------------------------
// Report
// ---------------------------------------------------------------------------

struct EvalItem {
  std::string image_id;
  std::string class_id;
  std::uint8_t label = 0;
  double image_score = 0;
  ScoreGrid map;
  BinaryMask mask;  // empty: no localisation ground truth
};

struct ClassReport {
  std::string class_id;
  std::size_t images = 0;
  double image_auroc = std::numeric_limits<double>::quiet_NaN();  // NaN: undefined
  double pro = std::numeric_limits<double>::quiet_NaN();
};

struct EvalReport {
  double image_auroc = 0;
  double pro = std::numeric_limits<double>::quiet_NaN();
  double pixel_auroc = std::numeric_limits<double>::quiet_NaN();  // auxiliary only
  double fpr_limit = 0.3;
  std::size_t thresholds = 200;
  std::size_t images = 0;
  std::vector<ClassReport> per_class;
  std::vector<ProPoint> curve;
};

namespace metrics_detail {

// Score maps resampled to their mask resolution.
inline void collect(const std::vector<const EvalItem*>& items, std::vector<ScoreGrid>& maps,
                    std::vector<BinaryMask>& masks) {
  for (const auto* it : items) {
    if (it->mask.values.empty()) continue;
    maps.push_back(resize_bilinear(it->map, it->mask.height, it->mask.width));
    masks.push_back(it->mask);
  }
}

inline double safe_auroc(const std::vector<const EvalItem*>& items) {
  std::vector<double> s;
  std::vector<std::uint8_t> l;
  for (const auto* it : items) s.push_back(it->image_score), l.push_back(it->label);
  try {
    return auroc(s, l);
  } catch (const DataError&) {
    return std::numeric_limits<double>::quiet_NaN();
  }
}

}  // namespace metrics_detail

/// Overall image AUROC and PRO must be defined; per-class values that are not
/// (a class with one label, or no regions) are reported as NaN.
inline EvalReport evaluate(const std::vector<EvalItem>& items, double fpr_limit = 0.3, std::size_t thresholds = 200) {
  EvalReport r;
  r.fpr_limit = fpr_limit;
  r.thresholds = thresholds;
  r.images = items.size();
  std::vector<double> scores;
  std::vector<std::uint8_t> labels;
  std::vector<const EvalItem*> all;
  std::map<std::string, std::vector<const EvalItem*>> by_class;
  for (const auto& it : items) {
    scores.push_back(it.image_score);
    labels.push_back(it.label);
    all.push_back(&it);
    by_class[it.class_id].push_back(&it);
  }
  r.image_auroc = auroc(scores, labels);

  std::vector<ScoreGrid> maps;
  std::vector<BinaryMask> masks;
  metrics_detail::collect(all, maps, masks);
  if (!masks.empty()) {
    r.curve = pro_curve(maps, masks, thresholds);
    r.pro = pro_integral(r.curve, fpr_limit);
    std::vector<double> px;
    std::vector<std::uint8_t> pl;
    for (std::size_t i = 0; i < maps.size(); ++i) {
      px.insert(px.end(), maps[i].values.begin(), maps[i].values.end());
      pl.insert(pl.end(), masks[i].values.begin(), masks[i].values.end());
    }
    r.pixel_auroc = auroc(px, pl);
  }
  for (const auto& [cls, group] : by_class) {
    ClassReport c;
    c.class_id = cls;
    c.images = group.size();
    c.image_auroc = metrics_detail::safe_auroc(group);
    std::vector<ScoreGrid> cm;
    std::vector<BinaryMask> ck;
    metrics_detail::collect(group, cm, ck);
    try {
      if (!ck.empty()) c.pro = pro(cm, ck, fpr_limit, thresholds);
    } catch (const DataError&) {
    }
    r.per_class.push_back(std::move(c));
  }
  return r;
}

inline nlohmann::json json_number(double v) { return std::isfinite(v) ? nlohmann::json(v) : nlohmann::json(nullptr); }

/// JSON layout:
///   {"image_auroc", "pro", "pixel_auroc", "fpr_limit", "thresholds", "images",
///    "per_class": [{"class_id", "images", "image_auroc", "pro"}],
///    "curve": [{"threshold", "fpr", "pro"}]}
/// Undefined values are null; the endpoint thresholds are written as null.
inline nlohmann::json report_json(const EvalReport& r) {
  nlohmann::json j;
  j["image_auroc"] = json_number(r.image_auroc);
  j["pro"] = json_number(r.pro);
  j["pixel_auroc"] = json_number(r.pixel_auroc);
  j["fpr_limit"] = r.fpr_limit;
  j["thresholds"] = r.thresholds;
  j["images"] = r.images;
  j["per_class"] = nlohmann::json::array();
  for (const auto& c : r.per_class)
    j["per_class"].push_back(
        {{"class_id", c.class_id}, {"images", c.images}, {"image_auroc", json_number(c.image_auroc)}, {"pro", json_number(c.pro)}});
  j["curve"] = nlohmann::json::array();
  for (const auto& p : r.curve)
    j["curve"].push_back({{"threshold", json_number(p.threshold)}, {"fpr", p.fpr}, {"pro", p.pro}});
  return j;
}

/// "AUROC/PRO: 98.7/91.2" in percent; n/a when a value is undefined.
inline std::string headline(const EvalReport& r) {
  auto pct = [](double v) {
    if (!std::isfinite(v)) return std::string("n/a");
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.1f", 100.0 * v);
    return std::string(buf);
  };
  return "AUROC/PRO: " + pct(r.image_auroc) + "/" + pct(r.pro);
}

}  // namespace adp
