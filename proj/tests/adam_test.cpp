#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "adp/adam.hpp"
#include "adp/autodiff.hpp"
#include "test_support.hpp"

using namespace adp;

namespace {

// One bias-corrected update computed by hand: m = (1-b1) g, v = (1-b2) g^2,
// m_hat = g, v_hat = g^2, so w1 = w0 - lr * g / (|g| + eps).
double hand_step(double w0, double g, double lr, double eps) { return w0 - lr * g / (std::abs(g) + eps); }

}  // namespace

TEST(Adam, SingleStepOnSquare) {
  Tensor<double> w = Tensor<double>::vector({1.0});
  AdamState<double> state;
  state.config.learning_rate = 0.1;
  Tape<double> tape;
  auto vw = tape.leaf(w);
  tape.backward(sum(mul(vw, vw)));
  const Tensor<double> g = tape.grad(vw);
  std::vector<ParamRef<double>> params{{"w", &w, &g}};
  adam_step(params, state);
  EXPECT_NEAR(w[0], hand_step(1.0, 2.0, 0.1, 1e-8), 1e-15);
  EXPECT_LE(std::abs(w[0] - 0.9), 1e-6);
  EXPECT_EQ(state.step, 1u);
}

TEST(Adam, ZeroGradientLeavesParametersUnchanged) {
  Tensor<float> w = Tensor<float>::vector({0.25f, -3.0f});
  const Tensor<float> g(Shape{2}, 0.0f);
  AdamState<float> state;
  std::vector<ParamRef<float>> params{{"w", &w, &g}};
  for (int i = 0; i < 5; ++i) adam_step(params, state);
  EXPECT_EQ(w, Tensor<float>::vector({0.25f, -3.0f}));
}

TEST(Adam, NaNGradientAbortsWithName) {
  Tensor<float> a = Tensor<float>::vector({1.0f});
  Tensor<float> b = Tensor<float>::vector({2.0f});
  const Tensor<float> ga = Tensor<float>::vector({0.5f});
  const Tensor<float> gb = Tensor<float>::vector({std::nanf("")});
  AdamState<float> state;
  std::vector<ParamRef<float>> params{{"alpha", &a, &ga}, {"beta", &b, &gb}};
  try {
    adam_step(params, state);
    FAIL() << "expected NumericError";
  } catch (const NumericError& e) {
    EXPECT_NE(std::string(e.what()).find("beta"), std::string::npos);
  }
  EXPECT_EQ(a[0], 1.0f);
  EXPECT_EQ(state.step, 0u);
}

TEST(Adam, StepCounterIncreases) {
  Tensor<float> w = Tensor<float>::vector({1.0f});
  const Tensor<float> g = Tensor<float>::vector({1.0f});
  AdamState<float> state;
  std::vector<ParamRef<float>> params{{"w", &w, &g}};
  for (std::uint64_t i = 1; i <= 4; ++i) {
    adam_step(params, state);
    EXPECT_EQ(state.step, i);
  }
}

TEST(Adam, MismatchedStateRejected) {
  Tensor<float> w = Tensor<float>::vector({1.0f});
  const Tensor<float> g = Tensor<float>::vector({1.0f});
  AdamState<float> state;
  std::vector<ParamRef<float>> params{{"w", &w, &g}};
  adam_step(params, state);
  Tensor<float> w2 = Tensor<float>::vector({1.0f, 2.0f});
  const Tensor<float> g2 = Tensor<float>::vector({1.0f, 2.0f});
  std::vector<ParamRef<float>> other{{"w", &w2, &g2}};
  EXPECT_THROW(adam_step(other, state), ShapeError);
}

TEST(Adam, HundredStepsAreBitIdentical) {
  auto run = [] {
    std::mt19937_64 rng(42);
    auto w = adp_test::random_tensor({4, 3}, rng).cast<float>();
    const auto target = adp_test::random_tensor({4, 3}, rng).cast<float>();
    AdamState<float> state;
    state.config.learning_rate = 1e-2;
    for (int step = 0; step < 100; ++step) {
      Tape<float> tape;
      auto vw = tape.leaf(w);
      auto diff = sub(vw, tape.constant(target));
      tape.backward(sum(mul(diff, diff)));
      const auto g = tape.grad(vw);
      std::vector<ParamRef<float>> params{{"w", &w, &g}};
      adam_step(params, state);
    }
    return w;
  };
  EXPECT_EQ(run(), run());
}
