#pragma once

// Spatially aligned reference retrieval.
//
// A feature map is cut into an S x S grid of cells. Each cell gets N_c
// k-means centers from the pool's patches in that cell. A patch's histogram
// is its similarity to all S^2 * N_c centers, mapped through (1 + cos) / 2,
// floored at 1e-8 and L1 normalised. Candidates are ranked by the mean over
// cells of the largest per-position KL(candidate || query).

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <limits>
#include <random>
#include <string>
#include <vector>

#include "adp/container.hpp"
#include "adp/errors.hpp"
#include "adp/feature_store.hpp"
#include "adp/parallel.hpp"

namespace adp {

inline constexpr double kSignatureFloor = 1e-8;

/// [begin, end) of cell i along an axis of n patches: floor-sized blocks,
/// the remainder goes to the last cell.
inline std::pair<std::size_t, std::size_t> cell_range(std::size_t i, std::size_t n, std::size_t cells) {
  const std::size_t size = n / cells;
  const std::size_t begin = i * size;
  return {begin, i + 1 == cells ? n : begin + size};
}

struct AlignmentCodebook {
  std::size_t grid = 5;      // S
  std::size_t clusters = 5;  // N_c
  std::uint32_t height = 0, width = 0, channels = 0;
  std::uint64_t seed = 0;
  std::vector<float> centers;          // (S*S*N_c) x C, cell-major
  std::vector<std::uint8_t> padded;    // per cell: centers were padded with the cell mean

  std::size_t bins() const { return grid * grid * clusters; }
  std::span<const float> center(std::size_t i) const { return {centers.data() + i * channels, channels}; }

  /// Cheap identity used to check two signatures came from the same codebook.
  std::uint64_t fingerprint() const {
    std::uint64_t h = 1469598103934665603ULL;
    auto mix = [&](std::uint64_t v) { h = (h ^ v) * 1099511628211ULL; };
    mix(grid), mix(clusters), mix(height), mix(width), mix(channels), mix(seed);
    for (float f : centers) {
      std::uint32_t bits;
      std::memcpy(&bits, &f, 4);
      mix(bits);
    }
    return h;
  }
};

namespace refmatch_detail {

inline double sq_dist(const double* a, const double* b, std::size_t c) {
  double s = 0;
  for (std::size_t i = 0; i < c; ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
  return s;
}

}  // namespace refmatch_detail

/// Seeded k-means (k-means++ seeding, Lloyd iterations). points: n x c,
/// row-major. Stops after max_iter or when no center moves more than tol.
/// A cluster that loses all points keeps its previous center.
inline std::vector<double> kmeans(const std::vector<double>& points, std::size_t c, std::size_t k, std::mt19937_64& rng,
                                  std::size_t max_iter = 100, double tol = 1e-6) {
  using refmatch_detail::sq_dist;
  const std::size_t n = points.size() / c;
  if (k == 0 || n < k) throw DataError("kmeans: need at least k points");
  std::vector<double> centers;
  centers.reserve(k * c);
  const std::size_t first = std::uniform_int_distribution<std::size_t>(0, n - 1)(rng);
  centers.insert(centers.end(), points.begin() + first * c, points.begin() + (first + 1) * c);
  std::vector<double> d2(n, std::numeric_limits<double>::infinity());
  for (std::size_t j = 1; j < k; ++j) {
    const double* last = &centers[(j - 1) * c];
    double total = 0;
    for (std::size_t i = 0; i < n; ++i) {
      d2[i] = std::min(d2[i], sq_dist(&points[i * c], last, c));
      total += d2[i];
    }
    std::size_t pick = 0;
    if (total > 0) {
      double u = std::uniform_real_distribution<double>(0.0, total)(rng);
      for (pick = 0; pick + 1 < n; ++pick) {
        if (u < d2[pick]) break;
        u -= d2[pick];
      }
      while (d2[pick] == 0 && pick > 0) --pick;  // never land on a zero-weight point
    }
    centers.insert(centers.end(), points.begin() + pick * c, points.begin() + (pick + 1) * c);
  }

  std::vector<std::size_t> assign(n, 0);
  std::vector<double> sums(k * c);
  std::vector<std::size_t> counts(k);
  for (std::size_t it = 0; it < max_iter; ++it) {
    for (std::size_t i = 0; i < n; ++i) {
      double best = std::numeric_limits<double>::infinity();
      for (std::size_t j = 0; j < k; ++j) {
        const double d = sq_dist(&points[i * c], &centers[j * c], c);
        if (d < best) best = d, assign[i] = j;
      }
    }
    std::fill(sums.begin(), sums.end(), 0.0);
    std::fill(counts.begin(), counts.end(), 0);
    for (std::size_t i = 0; i < n; ++i) {
      ++counts[assign[i]];
      for (std::size_t d = 0; d < c; ++d) sums[assign[i] * c + d] += points[i * c + d];
    }
    double shift = 0;
    for (std::size_t j = 0; j < k; ++j) {
      if (counts[j] == 0) continue;
      double s = 0;
      for (std::size_t d = 0; d < c; ++d) {
        const double v = sums[j * c + d] / static_cast<double>(counts[j]);
        s += (v - centers[j * c + d]) * (v - centers[j * c + d]);
        centers[j * c + d] = v;
      }
      shift = std::max(shift, std::sqrt(s));
    }
    if (shift <= tol) break;
  }
  return centers;
}

/// Per-cell k-means over every pool patch falling in that cell.
inline AlignmentCodebook build_codebook(const std::vector<const FeatureGrid*>& pool, std::size_t grid = 5,
                                        std::size_t clusters = 5, std::uint64_t seed = 42) {
  if (pool.empty()) throw DataError("codebook: empty pool");
  if (grid < 1 || clusters < 1) throw ConfigError("codebook: grid and clusters must be >= 1");
  const FeatureGrid& first = *pool.front();
  if (first.height < grid || first.width < grid)
    throw ShapeError("codebook: " + std::to_string(first.height) + "x" + std::to_string(first.width) +
                     " map is smaller than a " + std::to_string(grid) + "x" + std::to_string(grid) + " grid");
  for (const auto* g : pool)
    if (!g->same_dims(first)) throw ShapeError("codebook: pool maps differ in dims");
  AlignmentCodebook cb;
  cb.grid = grid;
  cb.clusters = clusters;
  cb.height = first.height;
  cb.width = first.width;
  cb.channels = first.channels;
  cb.seed = seed;
  const std::size_t C = first.channels;
  cb.centers.assign(grid * grid * clusters * C, 0.0f);
  cb.padded.assign(grid * grid, 0);
  parallel_for(grid * grid, 1, [&](std::size_t begin, std::size_t end) {
    for (std::size_t cell = begin; cell < end; ++cell) {
      const auto [r0, r1] = cell_range(cell / grid, first.height, grid);
      const auto [c0, c1] = cell_range(cell % grid, first.width, grid);
      std::vector<std::vector<double>> pts;
      for (const auto* g : pool)
        for (std::size_t r = r0; r < r1; ++r)
          for (std::size_t c = c0; c < c1; ++c) {
            const auto p = g->patch(r, c);
            pts.emplace_back(p.begin(), p.end());
          }
      // Sorting makes the result independent of pool order.
      std::sort(pts.begin(), pts.end());
      std::vector<double> mean(C, 0.0), flat;
      std::size_t distinct = 0;
      for (std::size_t i = 0; i < pts.size(); ++i) {
        distinct += i == 0 || pts[i] != pts[i - 1];
        for (std::size_t d = 0; d < C; ++d) mean[d] += pts[i][d];
        flat.insert(flat.end(), pts[i].begin(), pts[i].end());
      }
      for (auto& v : mean) v /= static_cast<double>(pts.size());
      const std::size_t k = std::min(distinct, clusters);
      std::seed_seq seq{seed, std::uint64_t{cell}};
      std::mt19937_64 rng(seq);
      auto centers = kmeans(flat, C, k, rng);
      if (k < clusters) {
        cb.padded[cell] = 1;
        for (std::size_t j = k; j < clusters; ++j) centers.insert(centers.end(), mean.begin(), mean.end());
      }
      for (std::size_t i = 0; i < clusters * C; ++i)
        cb.centers[cell * clusters * C + i] = static_cast<float>(centers[i]);
    }
  });
  return cb;
}

struct HistogramSignature {
  std::uint64_t codebook = 0;  // fingerprint
  std::size_t grid = 0, bins = 0;
  std::uint32_t height = 0, width = 0;
  std::vector<double> histograms;  // (H*W) x bins, row-major patch order
  std::size_t zero_norm_patches = 0;

  std::span<const double> at(std::size_t patch) const { return {histograms.data() + patch * bins, bins}; }
};

inline HistogramSignature signature(const FeatureGrid& map, const AlignmentCodebook& cb) {
  if (map.height != cb.height || map.width != cb.width || map.channels != cb.channels)
    throw ShapeError("signature: map dims do not match the codebook");
  HistogramSignature s;
  s.codebook = cb.fingerprint();
  s.grid = cb.grid;
  s.bins = cb.bins();
  s.height = map.height;
  s.width = map.width;
  s.histograms.assign(map.patches() * s.bins, 0.0);
  std::vector<double> center_norm(s.bins);
  for (std::size_t b = 0; b < s.bins; ++b) {
    double n = 0;
    for (float v : cb.center(b)) n += double(v) * v;
    center_norm[b] = std::sqrt(n);
  }
  for (std::size_t p = 0; p < map.patches(); ++p) {
    const auto x = map.patch(p);
    double xn = 0;
    for (float v : x) xn += double(v) * v;
    xn = std::sqrt(xn);
    if (xn == 0) ++s.zero_norm_patches;
    double* h = &s.histograms[p * s.bins];
    double total = 0;
    for (std::size_t b = 0; b < s.bins; ++b) {
      double cos = 0;
      if (xn > 0 && center_norm[b] > 0) {
        const auto c = cb.center(b);
        for (std::size_t d = 0; d < x.size(); ++d) cos += double(x[d]) * c[d];
        cos /= xn * center_norm[b];
      }
      h[b] = (1.0 + cos) / 2.0 + kSignatureFloor;
      total += h[b];
    }
    for (std::size_t b = 0; b < s.bins; ++b) h[b] /= total;
  }
  return s;
}

inline double kl_divergence(std::span<const double> p, std::span<const double> q) {
  if (p.size() != q.size()) throw ShapeError("kl: histogram lengths differ");
  double s = 0;
  for (std::size_t i = 0; i < p.size(); ++i)
    if (p[i] > 0) s += p[i] * std::log(p[i] / q[i]);
  return s;
}

/// Mean over cells of the maximum per-position KL(candidate || query).
inline double alignment_degree(const HistogramSignature& query, const HistogramSignature& candidate) {
  if (query.codebook != candidate.codebook || query.bins != candidate.bins || query.grid != candidate.grid ||
      query.height != candidate.height || query.width != candidate.width)
    throw ShapeError("alignment: signatures come from different codebooks");
  const std::size_t S = query.grid;
  double total = 0;
  for (std::size_t cell = 0; cell < S * S; ++cell) {
    const auto [r0, r1] = cell_range(cell / S, query.height, S);
    const auto [c0, c1] = cell_range(cell % S, query.width, S);
    double worst = 0;
    for (std::size_t r = r0; r < r1; ++r)
      for (std::size_t c = c0; c < c1; ++c) {
        const std::size_t p = r * query.width + c;
        worst = std::max(worst, kl_divergence(candidate.at(p), query.at(p)));
      }
    total += worst;
  }
  return total / static_cast<double>(S * S);
}

struct AlignmentCandidate {
  std::size_t index = 0;  // into the pool
  double degree = 0;
};

struct AlignmentResult {
  std::vector<AlignmentCandidate> ranked;  // ascending degree, ties by pool index
  std::vector<std::size_t> selected;       // first K pool indices of `ranked`
};

inline AlignmentResult rank_candidates(const HistogramSignature& query, const std::vector<HistogramSignature>& pool,
                                       std::size_t k) {
  if (k < 1) throw ConfigError("match: K must be >= 1");
  if (pool.size() < k)
    throw DataError("match: pool has " + std::to_string(pool.size()) + " images, need at least " + std::to_string(k));
  AlignmentResult r;
  r.ranked.resize(pool.size());
  parallel_for(pool.size(), 4, [&](std::size_t begin, std::size_t end) {
    for (std::size_t i = begin; i < end; ++i) r.ranked[i] = {i, alignment_degree(query, pool[i])};
  });
  std::sort(r.ranked.begin(), r.ranked.end(), [](const AlignmentCandidate& a, const AlignmentCandidate& b) {
    return a.degree != b.degree ? a.degree < b.degree : a.index < b.index;
  });
  for (std::size_t i = 0; i < k; ++i) r.selected.push_back(r.ranked[i].index);
  return r;
}

/// Builds the codebook from the pool, then ranks the pool against the query.
inline AlignmentResult match_references(const FeatureGrid& query, const std::vector<const FeatureGrid*>& pool,
                                        std::size_t k = 8, std::size_t grid = 5, std::size_t clusters = 5,
                                        std::uint64_t seed = 42) {
  const auto cb = build_codebook(pool, grid, clusters, seed);
  std::vector<HistogramSignature> sigs(pool.size());
  parallel_for(pool.size(), 1, [&](std::size_t begin, std::size_t end) {
    for (std::size_t i = begin; i < end; ++i) sigs[i] = signature(*pool[i], cb);
  });
  return rank_candidates(signature(query, cb), sigs, k);
}

// ---------------------------------------------------------------------------
// Signature cache
// ---------------------------------------------------------------------------

struct SignatureCache {
  AlignmentCodebook codebook;
  std::vector<std::string> ids;  // one per signature
  std::vector<HistogramSignature> signatures;
};

inline void save_signature_cache(const SignatureCache& cache, const std::filesystem::path& path) {
  const auto& cb = cache.codebook;
  Container c;
  c.put_string("format", "adp-signatures");
  c.put_u64("grid", cb.grid);
  c.put_u64("clusters", cb.clusters);
  c.put_u64("height", cb.height);
  c.put_u64("width", cb.width);
  c.put_u64("channels", cb.channels);
  c.put_u64("seed", cb.seed);
  c.put_tensor("centers", Tensor<float>(Shape{cb.bins(), cb.channels}, cb.centers));
  std::vector<float> padded(cb.padded.begin(), cb.padded.end());
  c.put_tensor("padded", Tensor<float>(Shape{padded.size()}, padded));
  c.put_u64("count", cache.signatures.size());
  for (std::size_t i = 0; i < cache.signatures.size(); ++i) {
    const auto& s = cache.signatures[i];
    c.put_string("id/" + std::to_string(i), cache.ids.at(i));
    c.put_u64("zero_norm/" + std::to_string(i), s.zero_norm_patches);
    c.put_tensor("signature/" + std::to_string(i),
                 Tensor<double>(Shape{std::size_t{s.height} * s.width, s.bins}, s.histograms));
  }
  c.save(path);
}

inline SignatureCache load_signature_cache(const std::filesystem::path& path) {
  const Container c = Container::load(path);
  if (!c.has("format") || c.get_string("format") != "adp-signatures") throw FormatError("not a signature cache");
  SignatureCache cache;
  auto& cb = cache.codebook;
  cb.grid = c.get_u64("grid");
  cb.clusters = c.get_u64("clusters");
  cb.height = static_cast<std::uint32_t>(c.get_u64("height"));
  cb.width = static_cast<std::uint32_t>(c.get_u64("width"));
  cb.channels = static_cast<std::uint32_t>(c.get_u64("channels"));
  cb.seed = c.get_u64("seed");
  const auto centers = c.get_tensor<float>("centers");
  if (centers.size() != cb.bins() * cb.channels) throw FormatError("signature cache: center count mismatch");
  cb.centers.assign(centers.values().begin(), centers.values().end());
  const auto padded = c.get_tensor<float>("padded");
  for (float v : padded.values()) cb.padded.push_back(v != 0.0f);
  const std::uint64_t fp = cb.fingerprint();
  const std::size_t count = c.get_u64("count");
  for (std::size_t i = 0; i < count; ++i) {
    HistogramSignature s;
    s.codebook = fp;
    s.grid = cb.grid;
    s.bins = cb.bins();
    s.height = cb.height;
    s.width = cb.width;
    s.zero_norm_patches = c.get_u64("zero_norm/" + std::to_string(i));
    const auto h = c.get_tensor<double>("signature/" + std::to_string(i));
    if (h.size() != std::size_t{s.height} * s.width * s.bins) throw FormatError("signature cache: histogram size mismatch");
    s.histograms.assign(h.values().begin(), h.values().end());
    cache.ids.push_back(c.get_string("id/" + std::to_string(i)));
    cache.signatures.push_back(std::move(s));
  }
  return cache;
}

}  // namespace adp
