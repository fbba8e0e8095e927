#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "adp/autodiff.hpp"
#include "adp/feature_store.hpp"

namespace adp_test {

using adp::Shape;
using adp::Tape;
using adp::Tensor;
using adp::Var;

inline Tensor<double> random_tensor(Shape shape, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> dist(lo, hi);
  Tensor<double> t(std::move(shape));
  for (auto& v : t.values()) v = dist(rng);
  return t;
}

/// Builds a scalar from the given leaves on a fresh tape.
using ScalarFn = std::function<Var<double>(Tape<double>&, const std::vector<Var<double>>&)>;

struct GradCheck {
  double max_rel_error = 0;
  double max_abs_error = 0;
};

/// Compares tape gradients with central differences of step h for every
/// input entry. Relative error uses max(|a|, |b|, 1) as the scale so that
/// near-zero gradients are compared absolutely.
inline GradCheck grad_check(const ScalarFn& fn, const std::vector<Tensor<double>>& inputs, double h = 1e-5) {
  std::vector<Tensor<double>> analytic;
  {
    Tape<double> tape;
    std::vector<Var<double>> leaves;
    for (const auto& in : inputs) leaves.push_back(tape.leaf(in));
    const Var<double> y = fn(tape, leaves);
    tape.backward(y);
    for (const auto& l : leaves) analytic.push_back(tape.grad(l));
  }
  auto eval = [&](const std::vector<Tensor<double>>& xs) {
    Tape<double> tape;
    std::vector<Var<double>> leaves;
    for (const auto& in : xs) leaves.push_back(tape.leaf(in));
    return fn(tape, leaves).value()[0];
  };
  GradCheck out;
  std::vector<Tensor<double>> xs = inputs;
  for (std::size_t k = 0; k < xs.size(); ++k) {
    for (std::size_t i = 0; i < xs[k].size(); ++i) {
      const double orig = xs[k][i];
      xs[k][i] = orig + h;
      const double fp = eval(xs);
      xs[k][i] = orig - h;
      const double fm = eval(xs);
      xs[k][i] = orig;
      const double numeric = (fp - fm) / (2 * h);
      const double a = analytic[k][i];
      const double abs_err = std::abs(a - numeric);
      const double scale = std::max({std::abs(a), std::abs(numeric), 1.0});
      out.max_abs_error = std::max(out.max_abs_error, abs_err);
      out.max_rel_error = std::max(out.max_rel_error, abs_err / scale);
    }
  }
  return out;
}

/// Per-test scratch directory under the system temp dir, emptied on creation.
inline std::filesystem::path scratch_dir(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / ("adp_test_" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

inline adp::FeatureGrid random_grid(std::uint32_t h, std::uint32_t w, std::uint32_t c, std::mt19937_64& rng,
                                    float sigma = 1.0f) {
  std::normal_distribution<float> dist(0.0f, sigma);
  adp::FeatureGrid g(h, w, c);
  for (auto& v : g.values) v = dist(rng);
  return g;
}

}  // namespace adp_test
