#pragma once

// Contrastive objectives on projected features.
//
// A batch holds 2N rows: rows [0, N) are originals, rows [N, 2N) their
// augmented twins (row i pairs with row i + N). Labels are per row, 0 normal
// and 1 abnormal, and must agree within each pair.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "adp/autodiff.hpp"
#include "adp/errors.hpp"
#include "adp/tensor.hpp"

namespace adp {

enum class DenominatorMode { literal, include_positive };
enum class CenterMode { ema, epoch };

inline const char* mode_name(DenominatorMode m) {
  return m == DenominatorMode::literal ? "literal" : "include_positive";
}
inline DenominatorMode parse_denominator_mode(const std::string& s) {
  if (s == "literal") return DenominatorMode::literal;
  if (s == "include_positive") return DenominatorMode::include_positive;
  throw ConfigError("unknown denominator_mode '" + s + "' (allowed: literal, include_positive)");
}
inline const char* mode_name(CenterMode m) { return m == CenterMode::ema ? "ema" : "epoch"; }
inline CenterMode parse_center_mode(const std::string& s) {
  if (s == "ema") return CenterMode::ema;
  if (s == "epoch") return CenterMode::epoch;
  throw ConfigError("unknown center_mode '" + s + "' (allowed: ema, epoch)");
}

struct LossConfig {
  double tau = 0.15;
  double radius = 0.4;   // r
  double delta_r = 0.75; // r' = r + delta_r
  double lambda = 1.0;
  DenominatorMode denominator_mode = DenominatorMode::literal;
  double center_momentum = 0.9;
  CenterMode center_mode = CenterMode::ema;
  std::size_t angle_anchor_cap = 0;  // 0 disables subsampling

  double outer_radius() const noexcept { return radius + delta_r; }

  void validate() const {
    if (!(tau > 0)) throw ConfigError("tau must be > 0");
    if (!(radius > 0)) throw ConfigError("radius must be > 0");
    if (!(delta_r >= 0)) throw ConfigError("delta_r must be >= 0");
    if (!(lambda >= 0)) throw ConfigError("lambda must be >= 0");
    if (!(center_momentum >= 0 && center_momentum < 1))
      throw ConfigError("center_momentum must be in [0, 1)");
  }
};

template <typename T>
struct ContrastiveBatch {
  Var<T> features;                   // 2N x C_h
  std::vector<std::uint8_t> labels;  // 2N
  Tensor<T> center;                  // C_h, treated as a constant

  std::size_t pairs() const { return features.value().rows() / 2; }
};

namespace detail {

template <typename T>
void check_batch(const char* op, const Var<T>& x, const std::vector<std::uint8_t>& labels) {
  const Tensor<T>& xv = x.value();
  if (xv.rank() != 2) throw ShapeError(std::string(op) + ": features must be a matrix");
  const std::size_t rows = xv.rows();
  if (rows < 2 || rows % 2 != 0)
    throw ShapeError(std::string(op) + ": expected 2N rows, got " + std::to_string(rows));
  if (labels.size() != rows)
    throw ShapeError(std::string(op) + ": " + std::to_string(labels.size()) + " labels for " +
                     std::to_string(rows) + " rows");
  const std::size_t n = rows / 2;
  for (std::size_t i = 0; i < rows; ++i)
    if (labels[i] > 1) throw DataError(std::string(op) + ": label must be 0 or 1");
  for (std::size_t i = 0; i < n; ++i)
    if (labels[i] != labels[i + n])
      throw DataError(std::string(op) + ": row " + std::to_string(i) + " and its twin carry different labels");
}

template <typename T>
Var<T> constant_vector(Tape<T>& tape, std::vector<T> v) {
  return tape.constant(Tensor<T>::vector(std::move(v)));
}

template <typename T>
void require_nonzero_rows(const char* op, const Tensor<T>& x) {
  for (std::size_t i = 0; i < x.rows(); ++i) {
    bool nonzero = false;
    for (T v : x.row(i)) nonzero = nonzero || v != T{0};
    if (!nonzero) throw NumericError(std::string(op) + ": row " + std::to_string(i) + " has zero norm");
  }
}

}  // namespace detail

/// Uniform subset of anchor indices in [0, n), sorted. Returns all of them
/// when cap is 0 or not smaller than n.
template <typename Rng>
std::vector<std::size_t> sample_anchors(std::size_t n, std::size_t cap, Rng& rng) {
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  if (cap == 0 || cap >= n) return idx;
  for (std::size_t i = 0; i < cap; ++i) {
    std::uniform_int_distribution<std::size_t> pick(i, n - 1);
    std::swap(idx[i], idx[pick(rng)]);
  }
  idx.resize(cap);
  std::sort(idx.begin(), idx.end());
  return idx;
}

template <typename T>
struct AngleTerms {
  Var<T> sum;                     // sum of per-anchor terms (skipped anchors add 0)
  std::size_t anchors = 0;        // anchors evaluated
  std::size_t contributing = 0;
  std::size_t skipped = 0;
};

/// Per-anchor angle terms about the center c:
///   -log( exp(s(i,i')/tau) / sum_{k != i, m_k != m_i} exp(s(i,k)/tau) )
/// with s the cosine of the center-shifted features. In include_positive
/// mode the positive term also enters the denominator. When anchors is given
/// only those pairs (and their twins) take part, as anchors and as negatives.
template <typename T>
AngleTerms<T> angle_terms(const ContrastiveBatch<T>& batch, const LossConfig& cfg,
                          const std::vector<std::size_t>* anchors = nullptr) {
  constexpr const char* op = "angle_loss";
  const Var<T>& x = batch.features;
  detail::check_batch(op, x, batch.labels);
  Tape<T>& tape = *x.tape();
  const std::size_t n = x.value().rows() / 2;
  if (batch.center.size() != x.value().cols())
    throw ShapeError("angle_loss: center width does not match features");

  std::vector<std::size_t> pairs;
  if (anchors) {
    pairs = *anchors;
    for (std::size_t a : pairs)
      if (a >= n) throw ShapeError("angle_loss: anchor index out of range");
  } else {
    pairs.resize(n);
    std::iota(pairs.begin(), pairs.end(), std::size_t{0});
  }
  const std::size_t na = pairs.size();
  AngleTerms<T> out;
  out.anchors = na;
  if (na == 0) {
    out.sum = tape.constant(Tensor<T>::scalar(T{0}));
    return out;
  }

  const Var<T> centred = sub_row(x, tape.constant(batch.center));
  detail::require_nonzero_rows(op, centred.value());
  const Var<T> unit = normalize_rows(centred);

  // Columns: the selected originals followed by their twins.
  std::vector<std::size_t> cols(pairs);
  for (std::size_t a : pairs) cols.push_back(a + n);
  const bool full = na == n;
  const Var<T> u_anchor = full ? slice_rows(unit, 0, n) : gather_rows(unit, pairs);
  const Var<T> u_cols = full ? unit : gather_rows(unit, cols);
  const Var<T> sims = scale(matmul_bt(u_anchor, u_cols), static_cast<T>(1.0 / cfg.tau));

  const std::size_t nc = cols.size();
  std::vector<std::uint8_t> mask(na * nc, 0);
  std::vector<std::size_t> positive(na);
  std::vector<T> weight(na, T{0});
  for (std::size_t a = 0; a < na; ++a) {
    const std::size_t i = pairs[a];
    bool any_negative = false;
    for (std::size_t j = 0; j < nc; ++j) {
      if (cols[j] == i) continue;
      if (batch.labels[cols[j]] != batch.labels[i]) {
        mask[a * nc + j] = 1;
        any_negative = true;
      }
    }
    positive[a] = na + a;
    if (any_negative) {
      if (cfg.denominator_mode == DenominatorMode::include_positive) mask[a * nc + positive[a]] = 1;
      weight[a] = T{1};
      ++out.contributing;
    } else {
      ++out.skipped;
    }
  }
  const Var<T> lse = masked_logsumexp_rows(sims, std::move(mask));
  const Var<T> pos = pick(sims, std::move(positive));
  out.sum = sum(mul(sub(lse, pos), detail::constant_vector(tape, std::move(weight))));
  return out;
}

/// Mean angle term over contributing anchors; 0 when every anchor is skipped.
template <typename T>
Var<T> angle_loss(const ContrastiveBatch<T>& batch, const LossConfig& cfg) {
  const auto terms = angle_terms(batch, cfg);
  if (terms.contributing == 0) return terms.sum;
  return scale(terms.sum, T{1} / static_cast<T>(terms.contributing));
}

/// Baseline InfoNCE with plain cosine similarity: anchors are the originals,
/// the denominator runs over every other row.
template <typename T>
Var<T> infonce(const Var<T>& x, double tau) {
  constexpr const char* op = "infonce";
  const Tensor<T>& xv = x.value();
  if (xv.rank() != 2 || xv.rows() < 4 || xv.rows() % 2 != 0)
    throw ShapeError("infonce: expected 2N >= 4 rows, got " + shape_str(xv.shape()));
  if (!(tau > 0)) throw ConfigError("infonce: tau must be > 0");
  detail::require_nonzero_rows(op, xv);
  const std::size_t n = xv.rows() / 2;
  const Var<T> unit = normalize_rows(x);
  const Var<T> sims = scale(matmul_bt(slice_rows(unit, 0, n), unit), static_cast<T>(1.0 / tau));
  std::vector<std::uint8_t> mask(n * 2 * n, 1);
  std::vector<std::size_t> positive(n);
  for (std::size_t i = 0; i < n; ++i) {
    mask[i * 2 * n + i] = 0;
    positive[i] = i + n;
  }
  return mean(sub(masked_logsumexp_rows(sims, std::move(mask)), pick(sims, std::move(positive))));
}

/// Pseudo-Huber norm sqrt(|x|^2 + 1) - 1 per row.
template <typename T>
Var<T> pseudo_huber_rows(const Var<T>& x) {
  return add_scalar(sqrt(add_scalar(sum_sq_rows(x), T{1})), T{-1});
}

template <typename T>
double pseudo_huber(std::span<const T> x) {
  double s = 0;
  for (T v : x) s += static_cast<double>(v) * static_cast<double>(v);
  return std::sqrt(s + 1.0) - 1.0;
}

/// -log sigmoid(-d) * exp(d), elementwise.
template <typename T>
Var<T> contraction(const Var<T>& d) {
  return scale(mul(log_sigmoid(scale(d, T{-1})), exp(d)), T{-1});
}

template <typename T>
struct NormTerms {
  Var<T> per_row;  // 2N
  Var<T> sum;
};

/// Normal rows: contraction at d = n - r. Abnormal rows: contraction at
/// d = r' - n while n <= r', and exactly 0 beyond r'.
template <typename T>
NormTerms<T> norm_terms(const Var<T>& x, const std::vector<std::uint8_t>& labels, const LossConfig& cfg) {
  const Tensor<T>& xv = x.value();
  if (xv.rank() != 2) throw ShapeError("norm_loss: features must be a matrix");
  if (labels.size() != xv.rows()) throw ShapeError("norm_loss: one label per row required");
  Tape<T>& tape = *x.tape();
  const std::size_t rows = xv.rows();
  const Var<T> n = pseudo_huber_rows(x);
  const double r_out = cfg.outer_radius();
  std::vector<T> sign(rows), offset(rows), gate(rows);
  for (std::size_t i = 0; i < rows; ++i) {
    if (labels[i] == 0) {
      sign[i] = T{1};
      offset[i] = static_cast<T>(-cfg.radius);
      gate[i] = T{1};
    } else {
      sign[i] = T{-1};
      offset[i] = static_cast<T>(r_out);
      gate[i] = static_cast<double>(n.value()[i]) > r_out ? T{0} : T{1};
    }
  }
  const Var<T> d = add(mul(n, detail::constant_vector(tape, std::move(sign))),
                       detail::constant_vector(tape, std::move(offset)));
  // Gated rows are clamped before exp so an unbounded abnormal norm cannot
  // overflow a term that is multiplied by zero anyway.
  NormTerms<T> out;
  out.per_row = mul(contraction(mul(d, detail::constant_vector(tape, gate))),
                    detail::constant_vector(tape, gate));
  out.sum = sum(out.per_row);
  return out;
}

template <typename T>
Var<T> norm_loss(const ContrastiveBatch<T>& batch, const LossConfig& cfg) {
  detail::check_batch("norm_loss", batch.features, batch.labels);
  const auto terms = norm_terms(batch.features, batch.labels, cfg);
  return scale(terms.sum, T{1} / static_cast<T>(batch.labels.size()));
}

struct LossBreakdown {
  double total = 0;
  double angle = 0;  // lambda * (sum of angle terms) / 2N, after anchor-cap rescaling
  double norm = 0;   // mean norm term over 2N rows
  std::size_t anchors = 0;
  std::size_t contributing = 0;
  std::size_t skipped = 0;
};

template <typename T>
struct TotalLoss {
  Var<T> value;
  LossBreakdown breakdown;
};

/// (1/2N) * sum_i [ lambda * [i < N] * angle_i + norm_i ]. With an anchor
/// subset A the angle sum is rescaled by N / |A|.
template <typename T>
TotalLoss<T> total_loss(const ContrastiveBatch<T>& batch, const LossConfig& cfg,
                        const std::vector<std::size_t>* anchors = nullptr) {
  cfg.validate();
  detail::check_batch("total_loss", batch.features, batch.labels);
  const std::size_t rows = batch.labels.size();
  const std::size_t n = rows / 2;
  const auto norm = norm_terms(batch.features, batch.labels, cfg);
  const Var<T> norm_mean = scale(norm.sum, T{1} / static_cast<T>(rows));

  TotalLoss<T> out;
  out.breakdown.norm = static_cast<double>(norm_mean.value()[0]);
  Var<T> total = norm_mean;
  if (cfg.lambda != 0) {
    const auto angle = angle_terms(batch, cfg, anchors);
    const double rescale = angle.anchors == 0 ? 0.0 : static_cast<double>(n) / static_cast<double>(angle.anchors);
    const Var<T> angle_part = scale(angle.sum, static_cast<T>(cfg.lambda * rescale / static_cast<double>(rows)));
    out.breakdown.angle = static_cast<double>(angle_part.value()[0]);
    out.breakdown.anchors = angle.anchors;
    out.breakdown.contributing = angle.contributing;
    out.breakdown.skipped = angle.skipped;
    total = add(angle_part, norm_mean);
  }
  out.value = total;
  out.breakdown.total = static_cast<double>(total.value()[0]);
  return out;
}

/// Running estimate of the normal-feature center. Updates happen outside
/// the tape, so no gradient flows through c.
template <typename T>
struct CenterEstimator {
  double momentum = 0.9;
  bool initialized = false;
  Tensor<T> center;

  /// normal_rows: N0 x C. Empty input is a no-op.
  void update(const Tensor<T>& normal_rows) {
    if (normal_rows.size() == 0 || normal_rows.rows() == 0) return;
    const std::size_t rows = normal_rows.rows(), cols = normal_rows.cols();
    std::vector<double> mu(cols, 0.0);
    for (std::size_t i = 0; i < rows; ++i)
      for (std::size_t j = 0; j < cols; ++j) mu[j] += static_cast<double>(normal_rows(i, j));
    for (auto& v : mu) v /= static_cast<double>(rows);
    if (!initialized) {
      center = Tensor<T>(Shape{cols});
      for (std::size_t j = 0; j < cols; ++j) center[j] = static_cast<T>(mu[j]);
      initialized = true;
      return;
    }
    if (center.size() != cols) throw ShapeError("center update: width changed");
    for (std::size_t j = 0; j < cols; ++j)
      center[j] = static_cast<T>(momentum * static_cast<double>(center[j]) + (1.0 - momentum) * mu[j]);
  }
};

/// Rows of x whose label is 0.
template <typename T>
Tensor<T> normal_rows(const Tensor<T>& x, const std::vector<std::uint8_t>& labels) {
  std::size_t count = 0;
  for (auto m : labels) count += m == 0;
  Tensor<T> out(Shape{count, x.cols()});
  std::size_t r = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] != 0) continue;
    std::copy(x.row(i).begin(), x.row(i).end(), out.row(r).begin());
    ++r;
  }
  return out;
}

}  // namespace adp
