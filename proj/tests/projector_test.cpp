#include <gtest/gtest.h>

#include <random>

#include "adp/projector.hpp"
#include "test_support.hpp"

using namespace adp;
using adp_test::random_tensor;

namespace {

ProjectorConfig small_config(std::size_t layers = 1, std::size_t heads = 2, std::size_t refs = 8) {
  ProjectorConfig cfg;
  cfg.num_layers = layers;
  cfg.num_refs = refs;
  cfg.n_heads = heads;
  cfg.init_seed = 11;
  return cfg;
}

// Biases and gains start at 0 / 1; randomise them so gradient checks and
// identities exercise every parameter.
void perturb(ProjectorParams<double>& p, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(-0.3, 0.3);
  visit_params(p, [&](const std::string&, Tensor<double>& t) {
    for (auto& v : t.values()) v += u(rng);
  });
}

}  // namespace

TEST(Projector, OutputShape) {
  ProjectorConfig cfg = small_config(1, 8, 16);
  const auto p = init_params<float>(cfg, 768);
  std::mt19937_64 rng(1);
  const auto x = random_tensor({256, 768}, rng).cast<float>();
  EXPECT_EQ(project_values(x, p).shape(), (Shape{256, 768}));
}

TEST(Projector, DefaultReferenceShape) {
  ProjectorConfig cfg;
  const auto p = init_params<float>(cfg, 768);
  EXPECT_EQ(p.reference.shape(), (Shape{2048, 768}));
  EXPECT_EQ(p.n_heads, 8u);
  EXPECT_EQ(p.hidden_dim, 768u);
  EXPECT_FALSE(p.input_projection);
}

TEST(Projector, InitIsDeterministicPerSeed) {
  auto cfg = small_config();
  const auto a = init_params<float>(cfg, 16);
  const auto b = init_params<float>(cfg, 16);
  cfg.init_seed = 12;
  const auto c = init_params<float>(cfg, 16);
  EXPECT_EQ(a.reference, b.reference);
  EXPECT_EQ(a.blocks[0].mlp_out_weight, b.blocks[0].mlp_out_weight);
  EXPECT_NE(a.reference, c.reference);
}

TEST(Projector, InitScaleFollowsFanIn) {
  ProjectorConfig cfg = small_config(1, 4, 64);
  const auto p = init_params<double>(cfg, 64);
  const double bound = 1.0 / std::sqrt(64.0);
  double var = 0;
  for (double v : p.blocks[0].q_weight.values()) {
    EXPECT_LE(std::abs(v), bound);
    var += v * v;
  }
  var /= static_cast<double>(p.blocks[0].q_weight.size());
  EXPECT_NEAR(var, 1.0 / (3.0 * 64.0), 0.15 / (3.0 * 64.0));
  for (double v : p.blocks[0].ln1_gain.values()) EXPECT_EQ(v, 1.0);
  for (double v : p.blocks[0].q_bias.values()) EXPECT_EQ(v, 0.0);
}

TEST(Projector, ZeroValuePathGivesSubtractionIdentity) {
  auto p = init_params<double>(small_config(2), 16);
  for (auto& b : p.blocks) {
    b.v_weight.fill(0.0);
    b.v_bias.fill(0.0);
    b.out_bias.fill(0.0);
    b.mlp_out_weight.fill(0.0);
    b.mlp_out_bias.fill(0.0);
  }
  std::mt19937_64 rng(2);
  const auto x = random_tensor({5, 16}, rng);
  EXPECT_EQ(project_values(x, p), x);
}

TEST(Projector, SubtractionMergeWithoutMlp) {
  // With the MLP branch silenced the block output is x - attention(x).
  auto p = init_params<double>(small_config(1, 1, 3), 4);
  perturb(p, 3);
  p.blocks[0].mlp_out_weight.fill(0.0);
  p.blocks[0].mlp_out_bias.fill(0.0);
  std::mt19937_64 rng(3);
  const auto x = random_tensor({2, 4}, rng);
  const auto out = project_values(x, p);

  // Direct scalar evaluation of one-head attention.
  const auto& b = p.blocks[0];
  auto lin = [](const std::vector<double>& v, const Tensor<double>& w, const Tensor<double>& bias) {
    std::vector<double> o(w.cols(), 0.0);
    for (std::size_t j = 0; j < w.cols(); ++j) {
      o[j] = bias[j];
      for (std::size_t i = 0; i < v.size(); ++i) o[j] += v[i] * w(i, j);
    }
    return o;
  };
  std::vector<std::vector<double>> keys, vals;
  for (std::size_t r = 0; r < 3; ++r) {
    std::vector<double> row(p.reference.row(r).begin(), p.reference.row(r).end());
    const auto rh = lin(row, p.ref_weight, p.ref_bias);
    keys.push_back(lin(rh, b.k_weight, b.k_bias));
    vals.push_back(lin(rh, b.v_weight, b.v_bias));
  }
  for (std::size_t i = 0; i < 2; ++i) {
    std::vector<double> xi(x.row(i).begin(), x.row(i).end());
    double mu = 0, var = 0;
    for (double v : xi) mu += v;
    mu /= 4;
    for (double v : xi) var += (v - mu) * (v - mu);
    var /= 4;
    std::vector<double> ln(4);
    for (std::size_t j = 0; j < 4; ++j)
      ln[j] = (xi[j] - mu) / std::sqrt(var + 1e-5) * b.ln1_gain[j] + b.ln1_bias[j];
    const auto q = lin(ln, b.q_weight, b.q_bias);
    std::vector<double> s(3);
    double mx = -1e300, z = 0;
    for (std::size_t r = 0; r < 3; ++r) {
      s[r] = 0;
      for (std::size_t j = 0; j < 4; ++j) s[r] += q[j] * keys[r][j];
      s[r] /= 2.0;  // sqrt(head_dim = 4)
      mx = std::max(mx, s[r]);
    }
    for (auto& v : s) z += v = std::exp(v - mx);
    std::vector<double> att(4, 0.0);
    for (std::size_t r = 0; r < 3; ++r)
      for (std::size_t j = 0; j < 4; ++j) att[j] += s[r] / z * vals[r][j];
    const auto a = lin(att, b.out_weight, b.out_bias);
    for (std::size_t j = 0; j < 4; ++j) EXPECT_NEAR(out(i, j), xi[j] - a[j], 1e-12);
  }
}

TEST(Projector, InputPermutationEquivariance) {
  auto p = init_params<double>(small_config(2), 16);
  perturb(p, 4);
  std::mt19937_64 rng(4);
  const auto x = random_tensor({6, 16}, rng);
  const std::vector<std::size_t> perm{3, 0, 5, 1, 4, 2};
  Tensor<double> xp({6, 16});
  for (std::size_t i = 0; i < 6; ++i)
    for (std::size_t j = 0; j < 16; ++j) xp(i, j) = x(perm[i], j);
  const auto y = project_values(x, p);
  const auto yp = project_values(xp, p);
  for (std::size_t i = 0; i < 6; ++i)
    for (std::size_t j = 0; j < 16; ++j) EXPECT_EQ(yp(i, j), y(perm[i], j));
}

TEST(Projector, ReferenceRowPermutationInvariance) {
  auto p = init_params<double>(small_config(1, 2, 8), 16);
  perturb(p, 5);
  std::mt19937_64 rng(5);
  const auto x = random_tensor({4, 16}, rng);
  auto q = p;
  const std::vector<std::size_t> perm{7, 2, 5, 0, 6, 1, 3, 4};
  for (std::size_t r = 0; r < 8; ++r)
    for (std::size_t j = 0; j < 16; ++j) q.reference(r, j) = p.reference(perm[r], j);
  const auto y = project_values(x, p);
  const auto yq = project_values(x, q);
  for (std::size_t k = 0; k < y.size(); ++k) EXPECT_NEAR(yq[k], y[k], 1e-12);
}

TEST(Projector, GradientWithRespectToReferenceMatchesFiniteDifferences) {
  auto p = init_params<double>(small_config(2, 2, 4), 8);
  perturb(p, 6);
  std::mt19937_64 rng(6);
  const auto x = random_tensor({5, 8}, rng);
  const auto w = random_tensor({5, 8}, rng);
  const auto r = adp_test::grad_check(
      [&](Tape<double>& tape, const std::vector<Var<double>>& v) {
        auto vars = bind_params(tape, p, false);
        vars.reference = v[0];
        return sum(mul(project(tape.constant(x), vars), tape.constant(w)));
      },
      {p.reference});
  EXPECT_LE(r.max_rel_error, 1e-4);
}

TEST(Projector, GradientWithRespectToAllParameters) {
  ProjectorConfig cfg = small_config(1, 2, 4);
  cfg.hidden_dim = 6;  // exercises the input projection
  auto p = init_params<double>(cfg, 4);
  perturb(p, 7);
  std::mt19937_64 rng(7);
  const auto x = random_tensor({3, 4}, rng);
  std::vector<Tensor<double>> inputs;
  visit_params(p, [&](const std::string&, const Tensor<double>& t) { inputs.push_back(t); });
  inputs.push_back(x);
  const auto r = adp_test::grad_check(
      [&](Tape<double>& tape, const std::vector<Var<double>>& v) {
        auto vars = bind_params(tape, p, false);
        std::size_t i = 0;
        visit_params(vars, [&](const std::string&, Var<double>& slot) { slot = v[i++]; });
        const auto y = project(v.back(), vars);
        return sum(mul(y, y));
      },
      inputs);
  EXPECT_LE(r.max_rel_error, 1e-4);
}

TEST(Projector, InvalidConfigsRejected) {
  ProjectorConfig cfg = small_config(1, 3);
  EXPECT_THROW(init_params<float>(cfg, 16), ConfigError);
  cfg = small_config(0);
  EXPECT_THROW(init_params<float>(cfg, 16), ConfigError);
  cfg = small_config(1, 2, 0);
  EXPECT_THROW(init_params<float>(cfg, 16), ConfigError);
}

TEST(Projector, InputWidthMismatchRejected) {
  const auto p = init_params<float>(small_config(), 16);
  EXPECT_THROW(project_values(Tensor<float>({3, 12}), p), ShapeError);
}

TEST(Projector, HiddenWidthDiffersFromInput) {
  ProjectorConfig cfg = small_config(1, 2, 4);
  cfg.hidden_dim = 10;
  const auto p = init_params<float>(cfg, 6);
  EXPECT_TRUE(p.input_projection);
  std::mt19937_64 rng(8);
  EXPECT_EQ(project_values(random_tensor({3, 6}, rng).cast<float>(), p).shape(), (Shape{3, 10}));
}
