#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "adp/errors.hpp"
#include "adp/tensor.hpp"

namespace adp {

struct AdamConfig {
  double learning_rate = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// Moment accumulators for one named parameter tensor.
template <typename T>
struct AdamSlot {
  std::string name;
  Tensor<T> m;
  Tensor<T> v;
};

template <typename T>
struct AdamState {
  AdamConfig config;
  std::uint64_t step = 0;
  std::vector<AdamSlot<T>> slots;
};

/// A parameter being optimised: a name (for diagnostics and checkpoint
/// keys), the tensor updated in place and its gradient.
template <typename T>
struct ParamRef {
  std::string name;
  Tensor<T>* value;
  const Tensor<T>* grad;
};

/// One bias-corrected Adam update. Slots are matched to parameters by
/// position and created on the first step. The whole step is rejected before
/// any parameter is touched if a gradient is non-finite.
template <typename T>
void adam_step(std::vector<ParamRef<T>>& params, AdamState<T>& state) {
  if (state.slots.empty()) {
    for (const auto& p : params)
      state.slots.push_back({p.name, Tensor<T>(p.value->shape()), Tensor<T>(p.value->shape())});
  }
  if (state.slots.size() != params.size())
    throw ShapeError("adam: " + std::to_string(params.size()) + " parameters but " +
                     std::to_string(state.slots.size()) + " optimizer slots");
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto& p = params[i];
    if (state.slots[i].name != p.name || p.grad->shape() != p.value->shape() ||
        state.slots[i].m.shape() != p.value->shape())
      throw ShapeError("adam: parameter '" + p.name + "' does not match optimizer state");
    if (!p.grad->all_finite()) throw NumericError("adam: non-finite gradient for '" + p.name + "'");
  }

  ++state.step;
  const AdamConfig& c = state.config;
  const double t = static_cast<double>(state.step);
  const double bc1 = 1.0 - std::pow(c.beta1, t);
  const double bc2 = 1.0 - std::pow(c.beta2, t);
  const T b1 = static_cast<T>(c.beta1), b2 = static_cast<T>(c.beta2);
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor<T>& w = *params[i].value;
    const Tensor<T>& g = *params[i].grad;
    Tensor<T>& m = state.slots[i].m;
    Tensor<T>& v = state.slots[i].v;
    for (std::size_t k = 0; k < w.size(); ++k) {
      m[k] = b1 * m[k] + (T{1} - b1) * g[k];
      v[k] = b2 * v[k] + (T{1} - b2) * g[k] * g[k];
      const double m_hat = static_cast<double>(m[k]) / bc1;
      const double v_hat = static_cast<double>(v[k]) / bc2;
      w[k] = static_cast<T>(static_cast<double>(w[k]) -
                            c.learning_rate * m_hat / (std::sqrt(v_hat) + c.eps));
    }
  }
}

}  // namespace adp
