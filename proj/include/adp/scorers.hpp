#pragma once

// Patch-level anomaly scorers over projected features and multi-level fusion.
//
//   feature norm   score = |x|
//   gaussian       score = sqrt((x - mu)^T S^-1 (x - mu)), one model per position
//   coreset kNN    score = distance to the nearest row of a greedy k-center subset
//
// Level maps are bilinearly resampled to the finest level grid and averaged;
// the image score aggregates the fused map.

#include <algorithm>
#include <cmath>
#include <limits>
#include <mutex>
#include <span>
#include <string>
#include <vector>

#include "adp/errors.hpp"
#include "adp/feature_store.hpp"
#include "adp/parallel.hpp"

namespace adp {

struct ScoreGrid {
  std::size_t height = 0, width = 0;
  std::vector<double> values;  // row-major

  ScoreGrid() = default;
  ScoreGrid(std::size_t h, std::size_t w, double fill = 0.0) : height(h), width(w), values(h * w, fill) {}
  double& operator()(std::size_t r, std::size_t c) { return values[r * width + c]; }
  double operator()(std::size_t r, std::size_t c) const { return values[r * width + c]; }
};

enum class Aggregate { max, topk_mean };

inline const char* aggregate_name(Aggregate a) { return a == Aggregate::max ? "max" : "topk_mean"; }
inline Aggregate parse_aggregate(const std::string& s) {
  if (s == "max") return Aggregate::max;
  if (s == "topk_mean") return Aggregate::topk_mean;
  throw ConfigError("unknown aggregate '" + s + "' (allowed: max, topk_mean)");
}

// ---------------------------------------------------------------------------
// Fusion
// ---------------------------------------------------------------------------

/// Bilinear resampling with half-pixel centers and edge clamping.
inline ScoreGrid resize_bilinear(const ScoreGrid& in, std::size_t out_h, std::size_t out_w) {
  if (in.height == 0 || in.width == 0) throw ShapeError("resize: empty map");
  if (in.height == out_h && in.width == out_w) return in;
  ScoreGrid out(out_h, out_w);
  auto source = [](std::size_t dst, std::size_t in_n, std::size_t out_n, std::size_t& i0, std::size_t& i1, double& t) {
    double s = (static_cast<double>(dst) + 0.5) * static_cast<double>(in_n) / static_cast<double>(out_n) - 0.5;
    s = std::clamp(s, 0.0, static_cast<double>(in_n - 1));
    i0 = static_cast<std::size_t>(std::floor(s));
    i1 = std::min(i0 + 1, in_n - 1);
    t = s - static_cast<double>(i0);
  };
  for (std::size_t r = 0; r < out_h; ++r) {
    std::size_t r0, r1;
    double tr;
    source(r, in.height, out_h, r0, r1, tr);
    for (std::size_t c = 0; c < out_w; ++c) {
      std::size_t c0, c1;
      double tc;
      source(c, in.width, out_w, c0, c1, tc);
      const double top = in(r0, c0) * (1 - tc) + in(r0, c1) * tc;
      const double bottom = in(r1, c0) * (1 - tc) + in(r1, c1) * tc;
      out(r, c) = top * (1 - tr) + bottom * tr;
    }
  }
  return out;
}

/// Resamples every level to the grid with the most patches and averages.
inline ScoreGrid fuse(const std::vector<ScoreGrid>& levels) {
  if (levels.empty()) throw ShapeError("fuse: no level maps");
  std::size_t finest = 0;
  for (std::size_t i = 1; i < levels.size(); ++i)
    if (levels[i].height * levels[i].width > levels[finest].height * levels[finest].width) finest = i;
  ScoreGrid out(levels[finest].height, levels[finest].width);
  for (const auto& l : levels) {
    const auto r = resize_bilinear(l, out.height, out.width);
    for (std::size_t i = 0; i < out.values.size(); ++i) out.values[i] += r.values[i];
  }
  for (auto& v : out.values) v /= static_cast<double>(levels.size());
  return out;
}

inline double aggregate(const ScoreGrid& map, Aggregate how = Aggregate::max, std::size_t topk = 10) {
  if (map.values.empty()) throw ShapeError("aggregate: empty map");
  if (how == Aggregate::max) return *std::max_element(map.values.begin(), map.values.end());
  auto v = map.values;
  const std::size_t k = std::clamp<std::size_t>(topk, 1, v.size());
  std::partial_sort(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(k), v.end(), std::greater<>());
  double s = 0;
  for (std::size_t i = 0; i < k; ++i) s += v[i];
  return s / static_cast<double>(k);
}

// ---------------------------------------------------------------------------
// Feature norm
// ---------------------------------------------------------------------------

inline ScoreGrid feature_norm_map(const FeatureGrid& g) {
  ScoreGrid out(g.height, g.width);
  for (std::size_t p = 0; p < g.patches(); ++p) {
    double s = 0;
    for (float v : g.patch(p)) s += static_cast<double>(v) * v;
    out.values[p] = std::sqrt(s);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Gaussian / Mahalanobis
// ---------------------------------------------------------------------------

/// In-place lower Cholesky factor of a row-major n x n SPD matrix. Returns
/// false when a pivot is not positive.
inline bool cholesky(std::vector<double>& a, std::size_t n) {
  for (std::size_t j = 0; j < n; ++j) {
    double d = a[j * n + j];
    for (std::size_t k = 0; k < j; ++k) d -= a[j * n + k] * a[j * n + k];
    if (!(d > 0) || !std::isfinite(d)) return false;
    const double l = std::sqrt(d);
    a[j * n + j] = l;
    for (std::size_t i = j + 1; i < n; ++i) {
      double s = a[i * n + j];
      for (std::size_t k = 0; k < j; ++k) s -= a[i * n + k] * a[j * n + k];
      a[i * n + j] = s / l;
    }
    for (std::size_t k = j + 1; k < n; ++k) a[j * n + k] = 0;
  }
  return true;
}

/// sqrt(d^T S^-1 d) given the lower Cholesky factor L of S: solve L y = d,
/// then the distance is |y|.
inline double mahalanobis(std::span<const double> diff, std::span<const double> chol) {
  const std::size_t n = diff.size();
  std::vector<double> y(n);
  double s = 0;
  for (std::size_t i = 0; i < n; ++i) {
    double v = diff[i];
    for (std::size_t k = 0; k < i; ++k) v -= chol[i * n + k] * y[k];
    y[i] = v / chol[i * n + i];
    s += y[i] * y[i];
  }
  return std::sqrt(s);
}

struct GaussianModel {
  std::size_t height = 0, width = 0, channels = 0;
  double shrinkage = 0.01;
  std::size_t samples = 0;
  std::vector<double> means;     // P x C
  std::vector<double> factors;   // P x C x C, lower Cholesky of the shrunk covariance
};

/// Per-position mean and covariance (unbiased, plus shrinkage * I).
inline GaussianModel fit_gaussian(const std::vector<const FeatureGrid*>& train, double shrinkage = 0.01) {
  if (train.size() < 2) throw DataError("gaussian fit needs at least 2 samples per position, got " + std::to_string(train.size()));
  if (!(shrinkage >= 0)) throw ConfigError("shrinkage must be >= 0");
  const FeatureGrid& first = *train.front();
  for (const auto* g : train)
    if (!g->same_dims(first)) throw ShapeError("gaussian fit: training grids differ in dims");
  GaussianModel m;
  m.height = first.height;
  m.width = first.width;
  m.channels = first.channels;
  m.shrinkage = shrinkage;
  m.samples = train.size();
  const std::size_t P = first.patches(), C = first.channels, n = train.size();
  m.means.assign(P * C, 0.0);
  m.factors.assign(P * C * C, 0.0);
  std::string failure;
  std::mutex failure_mu;
  parallel_for(P, 1, [&](std::size_t begin, std::size_t end) {
    std::vector<double> cov(C * C);
    for (std::size_t p = begin; p < end; ++p) {
      double* mu = &m.means[p * C];
      for (const auto* g : train)
        for (std::size_t c = 0; c < C; ++c) mu[c] += g->patch(p)[c];
      for (std::size_t c = 0; c < C; ++c) mu[c] /= static_cast<double>(n);
      std::fill(cov.begin(), cov.end(), 0.0);
      for (const auto* g : train) {
        const auto x = g->patch(p);
        for (std::size_t i = 0; i < C; ++i) {
          const double di = x[i] - mu[i];
          for (std::size_t j = 0; j <= i; ++j) cov[i * C + j] += di * (x[j] - mu[j]);
        }
      }
      for (std::size_t i = 0; i < C; ++i) {
        for (std::size_t j = 0; j <= i; ++j) {
          cov[i * C + j] /= static_cast<double>(n - 1);
          cov[j * C + i] = cov[i * C + j];
        }
        cov[i * C + i] += shrinkage;
      }
      if (!cholesky(cov, C)) {
        std::lock_guard lock(failure_mu);
        if (failure.empty()) failure = "gaussian fit: covariance at position " + std::to_string(p) + " is singular";
        continue;
      }
      std::copy(cov.begin(), cov.end(), m.factors.begin() + static_cast<std::ptrdiff_t>(p * C * C));
    }
  });
  if (!failure.empty()) throw NumericError(failure);
  return m;
}

inline ScoreGrid mahalanobis_map(const FeatureGrid& g, const GaussianModel& m) {
  if (g.height != m.height || g.width != m.width || g.channels != m.channels)
    throw ShapeError("mahalanobis: feature grid does not match the fitted model");
  ScoreGrid out(g.height, g.width);
  const std::size_t C = m.channels;
  parallel_for(g.patches(), 4, [&](std::size_t begin, std::size_t end) {
    std::vector<double> diff(C);
    for (std::size_t p = begin; p < end; ++p) {
      for (std::size_t c = 0; c < C; ++c) diff[c] = g.patch(p)[c] - m.means[p * C + c];
      out.values[p] = mahalanobis(diff, std::span<const double>(m.factors).subspan(p * C * C, C * C));
    }
  });
  return out;
}

// ---------------------------------------------------------------------------
// Coreset kNN
// ---------------------------------------------------------------------------

struct Coreset {
  std::size_t dim = 0;
  double fraction = 0.1;
  std::vector<std::size_t> indices;  // into the training rows, in selection order
  std::vector<float> rows;           // indices.size() x dim

  std::size_t size() const { return indices.size(); }
  std::span<const float> row(std::size_t i) const { return {rows.data() + i * dim, dim}; }
};

inline double squared_distance(std::span<const float> a, std::span<const float> b) {
  double s = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = static_cast<double>(a[i]) - b[i];
    s += d * d;
  }
  return s;
}

inline std::size_t coreset_size(std::size_t n, double fraction) {
  return std::max<std::size_t>(1, static_cast<std::size_t>(std::ceil(fraction * static_cast<double>(n) - 1e-9)));
}

/// Greedy farthest-point selection over n rows of width dim, starting from
/// row 0; ties go to the lowest index.
inline Coreset build_coreset(std::span<const float> data, std::size_t dim, double fraction = 0.1) {
  if (!(fraction > 0 && fraction <= 1)) throw ConfigError("coreset fraction must be in (0, 1]");
  if (dim == 0 || data.empty() || data.size() % dim != 0) throw DataError("coreset: empty training set");
  const std::size_t n = data.size() / dim;
  const std::size_t k = coreset_size(n, fraction);
  auto row = [&](std::size_t i) { return data.subspan(i * dim, dim); };
  Coreset cs;
  cs.dim = dim;
  cs.fraction = fraction;
  std::vector<double> nearest(n, std::numeric_limits<double>::infinity());
  std::size_t next = 0;
  for (std::size_t s = 0; s < k; ++s) {
    cs.indices.push_back(next);
    const auto chosen = row(next);
    cs.rows.insert(cs.rows.end(), chosen.begin(), chosen.end());
    parallel_for(n, 256, [&](std::size_t begin, std::size_t end) {
      for (std::size_t i = begin; i < end; ++i) nearest[i] = std::min(nearest[i], squared_distance(row(i), chosen));
    });
    next = static_cast<std::size_t>(std::max_element(nearest.begin(), nearest.end()) - nearest.begin());
  }
  return cs;
}

/// Distance from x to the nearest coreset row.
inline double knn_distance(std::span<const float> x, const Coreset& cs) {
  if (x.size() != cs.dim) throw ShapeError("knn: feature width does not match the coreset");
  double best = std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < cs.size(); ++i) best = std::min(best, squared_distance(x, cs.row(i)));
  return std::sqrt(best);
}

inline ScoreGrid knn_map(const FeatureGrid& g, const Coreset& cs) {
  if (g.channels != cs.dim) throw ShapeError("knn: feature width does not match the coreset");
  ScoreGrid out(g.height, g.width);
  parallel_for(g.patches(), 4, [&](std::size_t begin, std::size_t end) {
    for (std::size_t p = begin; p < end; ++p) out.values[p] = knn_distance(g.patch(p), cs);
  });
  return out;
}

}  // namespace adp
