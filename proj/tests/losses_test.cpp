#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "adp/losses.hpp"
#include "adp/projector.hpp"
#include "test_support.hpp"

using namespace adp;
using adp_test::random_tensor;

namespace {

constexpr double kTau = 0.15;

// ---- scalar oracles -------------------------------------------------------

double cosine(const std::vector<double>& a, const std::vector<double>& b) {
  double ab = 0, aa = 0, bb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) ab += a[i] * b[i], aa += a[i] * a[i], bb += b[i] * b[i];
  return ab / std::sqrt(aa * bb);
}

std::vector<std::vector<double>> rows_of(const Tensor<double>& x, const std::vector<double>& shift) {
  std::vector<std::vector<double>> out;
  for (std::size_t i = 0; i < x.rows(); ++i) {
    std::vector<double> r(x.cols());
    for (std::size_t j = 0; j < x.cols(); ++j) r[j] = x(i, j) - shift[j];
    out.push_back(std::move(r));
  }
  return out;
}

struct AngleOracle {
  double sum = 0;
  std::size_t contributing = 0;
};

AngleOracle angle_oracle(const Tensor<double>& x, const std::vector<std::uint8_t>& m, const std::vector<double>& c,
                         double tau, bool include_positive) {
  const auto xs = rows_of(x, c);
  const std::size_t n = xs.size() / 2;
  AngleOracle out;
  for (std::size_t i = 0; i < n; ++i) {
    const double pos = std::exp(cosine(xs[i], xs[i + n]) / tau);
    double den = 0;
    bool any = false;
    for (std::size_t k = 0; k < xs.size(); ++k) {
      if (k == i || m[k] == m[i]) continue;
      den += std::exp(cosine(xs[i], xs[k]) / tau);
      any = true;
    }
    if (!any) continue;
    if (include_positive) den += pos;
    out.sum += -std::log(pos / den);
    ++out.contributing;
  }
  return out;
}

double contraction_oracle(double d) { return std::log1p(std::exp(d)) * std::exp(d); }

double norm_oracle(const Tensor<double>& x, const std::vector<std::uint8_t>& m, double r, double dr) {
  double s = 0;
  for (std::size_t i = 0; i < x.rows(); ++i) {
    double sq = 0;
    for (double v : x.row(i)) sq += v * v;
    const double n = std::sqrt(sq + 1) - 1;
    if (m[i] == 0) s += contraction_oracle(n - r);
    else if (n <= r + dr) s += contraction_oracle(r + dr - n);
  }
  return s / static_cast<double>(x.rows());
}

// ---- helpers -------------------------------------------------------------

std::vector<std::uint8_t> pair_labels(const std::vector<std::uint8_t>& first_half) {
  auto m = first_half;
  m.insert(m.end(), first_half.begin(), first_half.end());
  return m;
}

double eval_angle(const Tensor<double>& x, const std::vector<std::uint8_t>& m, const std::vector<double>& c,
                  const LossConfig& cfg) {
  Tape<double> tape;
  ContrastiveBatch<double> b{tape.leaf(x), m, Tensor<double>::vector(c)};
  return angle_loss(b, cfg).value()[0];
}

double eval_norm(const Tensor<double>& x, const std::vector<std::uint8_t>& m, const LossConfig& cfg) {
  Tape<double> tape;
  ContrastiveBatch<double> b{tape.leaf(x), m, Tensor<double>(Shape{x.cols()})};
  return norm_loss(b, cfg).value()[0];
}

double eval_infonce(const Tensor<double>& x, double tau) {
  Tape<double> tape;
  return infonce(tape.leaf(x), tau).value()[0];
}

std::vector<double> random_vec(std::size_t n, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(-1, 1);
  std::vector<double> v(n);
  for (auto& e : v) e = u(rng);
  return v;
}

Tensor<double> random_orthogonal(std::size_t n, std::mt19937_64& rng) {
  auto a = random_tensor({n, n}, rng);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t k = 0; k < i; ++k) {
      double dot = 0;
      for (std::size_t j = 0; j < n; ++j) dot += a(i, j) * a(k, j);
      for (std::size_t j = 0; j < n; ++j) a(i, j) -= dot * a(k, j);
    }
    double nn = 0;
    for (std::size_t j = 0; j < n; ++j) nn += a(i, j) * a(i, j);
    nn = std::sqrt(nn);
    for (std::size_t j = 0; j < n; ++j) a(i, j) /= nn;
  }
  return a;
}

Tensor<double> rotate(const Tensor<double>& x, const Tensor<double>& q) {
  Tensor<double> y(x.shape());
  for (std::size_t i = 0; i < x.rows(); ++i)
    for (std::size_t j = 0; j < x.cols(); ++j)
      for (std::size_t k = 0; k < x.cols(); ++k) y(i, j) += x(i, k) * q(j, k);
  return y;
}

}  // namespace

// ---- InfoNCE ---------------------------------------------------------------

TEST(InfoNce, IdenticalFeatures) {
  const auto x = Tensor<double>::matrix(4, 2, {1, 2, 1, 2, 1, 2, 1, 2});
  EXPECT_NEAR(eval_infonce(x, kTau), -std::log(1.0 / 3.0), 1e-12);
}

TEST(InfoNce, OppositeNegatives) {
  const auto x = Tensor<double>::matrix(4, 2, {1, 0, -1, 0, 1, 0, -1, 0});
  const double e = std::exp(1 / kTau), ei = std::exp(-1 / kTau);
  EXPECT_NEAR(eval_infonce(x, kTau), -std::log(e / (e + 2 * ei)), 1e-12);
}

TEST(InfoNce, RescaleInvariance) {
  std::mt19937_64 rng(1);
  const auto x = random_tensor({8, 5}, rng);
  Tensor<double> x3 = x;
  for (auto& v : x3.values()) v *= 3;
  EXPECT_NEAR(eval_infonce(x, kTau), eval_infonce(x3, kTau), 1e-10);
}

TEST(InfoNce, ZeroFeatureRejected) {
  const auto x = Tensor<double>::matrix(4, 2, {0, 0, 1, 0, 1, 0, -1, 0});
  EXPECT_THROW(eval_infonce(x, kTau), NumericError);
}

// ---- angle loss ------------------------------------------------------------

TEST(AngleLoss, SameLabelBatchIsSkipped) {
  std::mt19937_64 rng(2);
  const auto x = random_tensor({6, 4}, rng);
  Tape<double> tape;
  ContrastiveBatch<double> b{tape.leaf(x), pair_labels({0, 0, 0}), Tensor<double>(Shape{4})};
  const auto terms = angle_terms(b, LossConfig{});
  EXPECT_EQ(terms.skipped, 3u);
  EXPECT_EQ(terms.contributing, 0u);
  EXPECT_EQ(angle_loss(b, LossConfig{}).value()[0], 0.0);
}

TEST(AngleLoss, OppositeCrossLabelNegativesLiteral) {
  // Pair 0 normal at +e1, pair 1 abnormal at -e1: each anchor has a positive
  // at cosine 1 and two cross-label negatives at cosine -1.
  const auto x = Tensor<double>::matrix(4, 2, {1, 0, -1, 0, 1, 0, -1, 0});
  LossConfig cfg;
  const double v = eval_angle(x, {0, 1, 0, 1}, {0, 0}, cfg);
  EXPECT_NEAR(v, -2 / kTau + std::log(2.0), 1e-12);
  EXPECT_LT(v, 0.0);
}

TEST(AngleLoss, OppositeCrossLabelNegativesIncludePositive) {
  const auto x = Tensor<double>::matrix(4, 2, {1, 0, -1, 0, 1, 0, -1, 0});
  LossConfig cfg;
  cfg.denominator_mode = DenominatorMode::include_positive;
  EXPECT_NEAR(eval_angle(x, {0, 1, 0, 1}, {0, 0}, cfg), std::log1p(2 * std::exp(-2 / kTau)), 1e-15);
}

TEST(AngleLoss, SingleNegativeClosedForms) {
  // The anchor-level closed forms for one negative: -2/tau and log(1+e^{-2/tau}).
  const double literal = -std::log(std::exp(1 / kTau) / std::exp(-1 / kTau));
  EXPECT_NEAR(literal, -13.333333333333334, 1e-12);
  const double incl = -std::log(std::exp(1 / kTau) / (std::exp(1 / kTau) + std::exp(-1 / kTau)));
  EXPECT_NEAR(incl, std::log1p(std::exp(-2 / kTau)), 1e-15);
  EXPECT_NEAR(incl, 1.62e-6, 0.01e-6);
}

TEST(AngleLoss, MatchesScalarOracleOnRandomBatches) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    std::mt19937_64 rng(100 + seed);
    const auto x = random_tensor({10, 6}, rng);
    const auto m = pair_labels({0, 1, 0, 0, 1});
    const auto c = random_vec(6, rng);
    for (bool incl : {false, true}) {
      LossConfig cfg;
      cfg.denominator_mode = incl ? DenominatorMode::include_positive : DenominatorMode::literal;
      const auto o = angle_oracle(x, m, c, kTau, incl);
      EXPECT_NEAR(eval_angle(x, m, c, cfg), o.sum / o.contributing, 1e-10);
    }
  }
}

TEST(AngleLoss, TranslationInvariance) {
  std::mt19937_64 rng(3);
  const auto x = random_tensor({8, 5}, rng);
  const auto m = pair_labels({0, 1, 1, 0});
  const auto c = random_vec(5, rng);
  const auto v = random_vec(5, rng);
  Tensor<double> xs = x;
  auto cs = c;
  for (std::size_t i = 0; i < 8; ++i)
    for (std::size_t j = 0; j < 5; ++j) xs(i, j) += 7 * v[j];
  for (std::size_t j = 0; j < 5; ++j) cs[j] += 7 * v[j];
  for (auto mode : {DenominatorMode::literal, DenominatorMode::include_positive}) {
    LossConfig cfg;
    cfg.denominator_mode = mode;
    EXPECT_NEAR(eval_angle(x, m, c, cfg), eval_angle(xs, m, cs, cfg), 1e-10);
  }
}

TEST(AngleLoss, ScaleInvarianceOfCentredFeatures) {
  std::mt19937_64 rng(4);
  const auto x = random_tensor({8, 5}, rng);
  const auto m = pair_labels({1, 0, 1, 0});
  const auto c = random_vec(5, rng);
  Tensor<double> xs = x;
  for (std::size_t i = 0; i < 8; ++i)
    for (std::size_t j = 0; j < 5; ++j) xs(i, j) = c[j] + 4.5 * (x(i, j) - c[j]);
  EXPECT_NEAR(eval_angle(x, m, c, LossConfig{}), eval_angle(xs, m, c, LossConfig{}), 1e-10);
}

TEST(AngleLoss, ZeroCentredFeatureRejected) {
  const auto x = Tensor<double>::matrix(4, 2, {1, 1, 0, 1, 2, 0, 1, 1});
  EXPECT_THROW(eval_angle(x, {0, 1, 0, 1}, {1, 1}, LossConfig{}), NumericError);
}

TEST(AngleLoss, MismatchedTwinLabelsRejected) {
  const auto x = Tensor<double>::matrix(4, 2, {1, 0, 0, 1, 1, 1, 2, 1});
  EXPECT_THROW(eval_angle(x, {0, 1, 1, 1}, {0, 0}, LossConfig{}), DataError);
}

TEST(AngleLoss, AnchorSubsetEqualsSubBatch) {
  std::mt19937_64 rng(5);
  const auto x = random_tensor({12, 4}, rng);
  const auto m = pair_labels({0, 1, 0, 1, 1, 0});
  const auto c = random_vec(4, rng);
  const std::vector<std::size_t> anchors{1, 2, 5};
  Tape<double> tape;
  ContrastiveBatch<double> b{tape.leaf(x), m, Tensor<double>::vector(c)};
  const auto terms = angle_terms(b, LossConfig{}, &anchors);
  // Same loss on the explicit sub-batch of the selected pairs.
  Tensor<double> sub_x({6, 4});
  std::vector<std::uint8_t> sub_m;
  const std::vector<std::size_t> rows{1, 2, 5, 7, 8, 11};
  for (std::size_t r = 0; r < 6; ++r) {
    for (std::size_t j = 0; j < 4; ++j) sub_x(r, j) = x(rows[r], j);
    sub_m.push_back(m[rows[r]]);
  }
  const auto o = angle_oracle(sub_x, sub_m, c, kTau, false);
  EXPECT_NEAR(terms.sum.value()[0], o.sum, 1e-10);
  EXPECT_EQ(terms.contributing, o.contributing);
}

TEST(AngleLoss, SampleAnchorsIsSortedUniqueAndSeeded) {
  std::mt19937_64 a(9), b(9);
  const auto s1 = sample_anchors(50, 10, a);
  const auto s2 = sample_anchors(50, 10, b);
  EXPECT_EQ(s1, s2);
  EXPECT_EQ(s1.size(), 10u);
  EXPECT_TRUE(std::is_sorted(s1.begin(), s1.end()));
  EXPECT_EQ(std::set<std::size_t>(s1.begin(), s1.end()).size(), 10u);
  EXPECT_EQ(sample_anchors(5, 0, a).size(), 5u);
}

// ---- norm loss -------------------------------------------------------------

TEST(NormLoss, ZeroMarginGivesLn2) {
  // |x| chosen so that the pseudo-Huber norm equals r exactly.
  const double r = 0.4;
  const double len = std::sqrt((r + 1) * (r + 1) - 1);
  const auto x = Tensor<double>::matrix(2, 2, {len, 0, 0, len});
  EXPECT_NEAR(eval_norm(x, {0, 0}, LossConfig{}), std::log(2.0), 1e-12);
}

TEST(NormLoss, NormalFeatureAtOrigin) {
  const auto x = Tensor<double>::matrix(2, 3, {0, 0, 0, 0, 0, 0});
  EXPECT_NEAR(eval_norm(x, {0, 0}, LossConfig{}), 0.34389, 1e-5);
  EXPECT_NEAR(eval_norm(x, {0, 0}, LossConfig{}), std::log1p(std::exp(-0.4)) * std::exp(-0.4), 1e-15);
}

TEST(NormLoss, AbnormalBeyondOuterRadiusIsExactlyZero) {
  const auto x = Tensor<double>::matrix(2, 2, {3, 0, 0, -4});
  Tape<double> tape;
  auto leaf = tape.leaf(x);
  ContrastiveBatch<double> b{leaf, {1, 1}, Tensor<double>(Shape{2})};
  const auto loss = norm_loss(b, LossConfig{});
  EXPECT_EQ(loss.value()[0], 0.0);
  tape.backward(loss);
  const auto grad = tape.grad(leaf);
  for (double g : grad.values()) EXPECT_EQ(g, 0.0);
}

TEST(NormLoss, MatchesScalarOracle) {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    std::mt19937_64 rng(200 + seed);
    const auto x = random_tensor({8, 4}, rng, -1.2, 1.2);
    const auto m = pair_labels({0, 1, 1, 0});
    EXPECT_NEAR(eval_norm(x, m, LossConfig{}), norm_oracle(x, m, 0.4, 0.75), 1e-12);
  }
}

TEST(NormLoss, RotationInvariance) {
  std::mt19937_64 rng(6);
  const auto x = random_tensor({8, 6}, rng);
  const auto q = random_orthogonal(6, rng);
  const auto m = pair_labels({0, 1, 0, 1});
  EXPECT_NEAR(eval_norm(x, m, LossConfig{}), eval_norm(rotate(x, q), m, LossConfig{}), 1e-8);
}

TEST(NormLoss, ContractionDerivativeIdentity) {
  // d/dd [-log sigma(-d) e^d] = sigma(d) e^d + (-log sigma(-d)) e^d.
  for (int k = 0; k <= 10; ++k) {
    const double d = -5.0 + k;
    Tape<double> tape;
    auto v = tape.leaf(Tensor<double>::vector({d}));
    tape.backward(sum(contraction(v)));
    const double sig = 1 / (1 + std::exp(-d));
    const double expected = sig * std::exp(d) + std::log1p(std::exp(d)) * std::exp(d);
    EXPECT_NEAR(tape.grad(v)[0], expected, 1e-8) << "d=" << d;
    EXPECT_GT(tape.grad(v)[0], 0.0);
  }
}

TEST(NormLoss, ContractionValueAtZero) {
  Tape<double> tape;
  auto v = tape.leaf(Tensor<double>::vector({0.0}));
  auto y = sum(contraction(v));
  EXPECT_NEAR(y.value()[0], std::log(2.0), 1e-15);
  tape.backward(y);
  EXPECT_NEAR(tape.grad(v)[0], 0.5 + std::log(2.0), 1e-15);
}

// ---- total loss ------------------------------------------------------------

TEST(TotalLoss, LambdaZeroIsNormMean) {
  std::mt19937_64 rng(7);
  const auto x = random_tensor({8, 4}, rng);
  const auto m = pair_labels({0, 1, 0, 1});
  LossConfig cfg;
  cfg.lambda = 0;
  Tape<double> tape;
  ContrastiveBatch<double> b{tape.leaf(x), m, Tensor<double>::vector(random_vec(4, rng))};
  const auto t = total_loss(b, cfg);
  EXPECT_NEAR(t.breakdown.total, norm_oracle(x, m, 0.4, 0.75), 1e-12);
  EXPECT_EQ(t.breakdown.angle, 0.0);
}

TEST(TotalLoss, AllNormalBatchIsContractionOnly) {
  std::mt19937_64 rng(8);
  const auto x = random_tensor({6, 4}, rng);
  const auto m = pair_labels({0, 0, 0});
  Tape<double> tape;
  ContrastiveBatch<double> b{tape.leaf(x), m, Tensor<double>::vector(random_vec(4, rng))};
  const auto t = total_loss(b, LossConfig{});
  EXPECT_EQ(t.breakdown.skipped, 3u);
  EXPECT_EQ(t.breakdown.angle, 0.0);
  EXPECT_NEAR(t.breakdown.total, norm_oracle(x, m, 0.4, 0.75), 1e-12);
}

TEST(TotalLoss, EqualsHandSummedComponents) {
  const auto x = Tensor<double>::matrix(4, 3, {0.3, -0.2, 0.1, 1.1, 0.4, -0.9, 0.25, -0.1, 0.2, 0.9, 0.6, -1.0});
  const std::vector<std::uint8_t> m{0, 1, 0, 1};
  const std::vector<double> c{0.05, 0.02, -0.01};
  const auto o = angle_oracle(x, m, c, kTau, false);
  const double expected = (o.sum + 4 * norm_oracle(x, m, 0.4, 0.75)) / 4.0;
  Tape<double> tape;
  ContrastiveBatch<double> b{tape.leaf(x), m, Tensor<double>::vector(c)};
  EXPECT_NEAR(total_loss(b, LossConfig{}).breakdown.total, expected, 1e-10);
}

TEST(TotalLoss, InvalidConfigRejected) {
  LossConfig cfg;
  cfg.tau = 0;
  EXPECT_THROW(cfg.validate(), ConfigError);
  cfg = LossConfig{};
  cfg.delta_r = -1;
  EXPECT_THROW(cfg.validate(), ConfigError);
}

// ---- gradients -------------------------------------------------------------

class LossGradient : public ::testing::TestWithParam<int> {};

TEST_P(LossGradient, AgreesWithFiniteDifferences) {
  const int which = GetParam();
  for (std::uint64_t trial = 0; trial < 20; ++trial) {
    std::mt19937_64 rng(300 + trial);
    const auto x = random_tensor({8, 5}, rng);
    const auto m = pair_labels({0, 1, 0, static_cast<std::uint8_t>(trial % 2)});
    const auto c = Tensor<double>::vector(random_vec(5, rng));
    LossConfig cfg;
    if (which == 1) cfg.denominator_mode = DenominatorMode::include_positive;
    const auto r = adp_test::grad_check(
        [&](Tape<double>&, const std::vector<Var<double>>& v) {
          ContrastiveBatch<double> b{v[0], m, c};
          switch (which) {
            case 0:
            case 1: return angle_loss(b, cfg);
            case 2: return norm_loss(b, cfg);
            default: return total_loss(b, cfg).value;
          }
        },
        {x});
    EXPECT_LE(r.max_rel_error, 1e-4) << "trial " << trial;
  }
}

std::string loss_case_name(const ::testing::TestParamInfo<int>& info) {
  static const char* const names[] = {"AngleLiteral", "AngleIncludePositive", "Norm", "Total"};
  return names[info.param];
}

INSTANTIATE_TEST_SUITE_P(Losses, LossGradient, ::testing::Values(0, 1, 2, 3), loss_case_name);

TEST(LossGradient, ProjectorComposedWithTotalLoss) {
  ProjectorConfig pc;
  pc.num_refs = 8;
  pc.n_heads = 2;
  pc.init_seed = 3;
  for (std::uint64_t trial = 0; trial < 5; ++trial) {
    auto p = init_params<double>(pc, 16);
    std::mt19937_64 rng(400 + trial);
    const auto x = random_tensor({8, 16}, rng);
    const auto m = pair_labels({0, 1, 0, 0});
    const auto c = Tensor<double>::vector(random_vec(16, rng));
    const auto r = adp_test::grad_check(
        [&](Tape<double>& tape, const std::vector<Var<double>>& v) {
          auto vars = bind_params(tape, p, false);
          vars.reference = v[0];
          vars.blocks[0].q_weight = v[1];
          ContrastiveBatch<double> b{project(tape.constant(x), vars), m, c};
          return total_loss(b, LossConfig{}).value;
        },
        {p.reference, p.blocks[0].q_weight});
    EXPECT_LE(r.max_rel_error, 1e-4) << "trial " << trial;
  }
}

TEST(LossDescent, GradientStepsDecreaseTotal) {
  std::mt19937_64 rng(10);
  auto x = random_tensor({8, 4}, rng);
  const auto m = pair_labels({0, 1, 0, 1});
  const auto c = Tensor<double>::vector(random_vec(4, rng));
  double prev = 1e300;
  for (int step = 0; step < 200; ++step) {
    Tape<double> tape;
    auto leaf = tape.leaf(x);
    ContrastiveBatch<double> b{leaf, m, c};
    auto t = total_loss(b, LossConfig{});
    tape.backward(t.value);
    const auto g = tape.grad(leaf);
    double gn = 0;
    for (double v : g.values()) gn += v * v;
    if (std::sqrt(gn) <= 1e-6) break;
    EXPECT_LT(t.breakdown.total, prev) << "step " << step;
    prev = t.breakdown.total;
    for (std::size_t k = 0; k < x.size(); ++k) x[k] -= 1e-3 * g[k];
  }
}

// ---- center ----------------------------------------------------------------

TEST(Center, FirstUpdateIsBatchMean) {
  CenterEstimator<double> est;
  est.update(Tensor<double>::matrix(2, 2, {1, 2, 3, 6}));
  EXPECT_TRUE(est.initialized);
  EXPECT_EQ(est.center, Tensor<double>::vector({2, 4}));
}

TEST(Center, ZeroMomentumTracksLatestMean) {
  CenterEstimator<double> est;
  est.momentum = 0;
  est.update(Tensor<double>::matrix(1, 2, {1, 1}));
  est.update(Tensor<double>::matrix(1, 2, {5, -3}));
  EXPECT_EQ(est.center, Tensor<double>::vector({5, -3}));
}

TEST(Center, ConstantStreamConvergesGeometrically) {
  CenterEstimator<double> est;
  est.momentum = 0.5;
  est.update(Tensor<double>::matrix(1, 1, {8}));
  for (int k = 1; k <= 10; ++k) {
    est.update(Tensor<double>::matrix(1, 1, {0}));
    EXPECT_NEAR(est.center[0], 8 * std::pow(0.5, k), 1e-12);
  }
  CenterEstimator<double> slow;
  slow.update(Tensor<double>::matrix(1, 1, {1}));
  slow.update(Tensor<double>::matrix(1, 1, {0}));
  EXPECT_NEAR(slow.center[0], 0.9, 1e-12);
}

TEST(Center, EmptyBatchIsNoOp) {
  CenterEstimator<double> est;
  est.update(Tensor<double>(Shape{0, 3}));
  EXPECT_FALSE(est.initialized);
}

TEST(Center, NormalRowsSelection) {
  const auto x = Tensor<double>::matrix(3, 1, {1, 2, 3});
  EXPECT_EQ(normal_rows(x, {0, 1, 0}), Tensor<double>::matrix(2, 1, {1, 3}));
}
