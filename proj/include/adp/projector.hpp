#pragma once

// Feature projector: a stack of Transformer-style blocks whose attention takes
// queries from the input features and keys/values from a learnable reference
// matrix R (shared by all blocks after one linear projection). The attention
// output is subtracted from the input; the MLP branch is added back as usual.
//
//   x1  = LN1(x)
//   a   = MultiHead(Q = x1 Wq, K = R_h Wk, V = R_h Wv) Wo
//   h   = x - a
//   out = h + MLP(LN2(h))

#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "adp/autodiff.hpp"
#include "adp/errors.hpp"
#include "adp/tensor.hpp"

namespace adp {

struct ProjectorConfig {
  std::size_t num_layers = 1;
  std::size_t num_refs = 2048;   // N_r
  std::size_t hidden_dim = 0;    // C_h; 0 means "same as the input width"
  std::size_t n_heads = 8;
  std::uint64_t init_seed = 42;
};

template <typename F>
struct BlockFields {
  F ln1_gain, ln1_bias;
  F q_weight, q_bias;
  F k_weight, k_bias;
  F v_weight, v_bias;
  F out_weight, out_bias;
  F ln2_gain, ln2_bias;
  F mlp_in_weight, mlp_in_bias;
  F mlp_out_weight, mlp_out_bias;
};

/// Parameter layout shared by the tensor form (ProjectorParams) and the
/// tape-bound form used during a forward pass.
template <typename F>
struct ProjectorFields {
  std::size_t input_dim = 0;
  std::size_t hidden_dim = 0;
  std::size_t n_heads = 1;
  bool input_projection = false;  // present only when hidden_dim != input_dim
  F reference;                    // N_r x C
  F ref_weight, ref_bias;         // C -> C_h
  F in_weight, in_bias;           // C -> C_h, unused unless input_projection
  std::vector<BlockFields<F>> blocks;
};

template <typename T>
using ProjectorParams = ProjectorFields<Tensor<T>>;

template <typename T>
using ProjectorVars = ProjectorFields<Var<T>>;

/// Calls fn(name, field) for every parameter in a fixed order. The order is
/// the serialization and optimizer-slot order.
template <typename P, typename Fn>
void visit_params(P& p, Fn&& fn) {
  fn(std::string("reference"), p.reference);
  fn(std::string("ref_weight"), p.ref_weight);
  fn(std::string("ref_bias"), p.ref_bias);
  if (p.input_projection) {
    fn(std::string("in_weight"), p.in_weight);
    fn(std::string("in_bias"), p.in_bias);
  }
  for (std::size_t i = 0; i < p.blocks.size(); ++i) {
    auto& b = p.blocks[i];
    const std::string pre = "block" + std::to_string(i) + "/";
    fn(pre + "ln1_gain", b.ln1_gain);
    fn(pre + "ln1_bias", b.ln1_bias);
    fn(pre + "q_weight", b.q_weight);
    fn(pre + "q_bias", b.q_bias);
    fn(pre + "k_weight", b.k_weight);
    fn(pre + "k_bias", b.k_bias);
    fn(pre + "v_weight", b.v_weight);
    fn(pre + "v_bias", b.v_bias);
    fn(pre + "out_weight", b.out_weight);
    fn(pre + "out_bias", b.out_bias);
    fn(pre + "ln2_gain", b.ln2_gain);
    fn(pre + "ln2_bias", b.ln2_bias);
    fn(pre + "mlp_in_weight", b.mlp_in_weight);
    fn(pre + "mlp_in_bias", b.mlp_in_bias);
    fn(pre + "mlp_out_weight", b.mlp_out_weight);
    fn(pre + "mlp_out_bias", b.mlp_out_bias);
  }
}

/// Weights ~ U(-1/sqrt(fan_in), 1/sqrt(fan_in)) (variance 1/(3 fan_in)),
/// biases 0, layer-norm gains 1. R uses the input width as fan_in.
template <typename T>
ProjectorParams<T> init_params(const ProjectorConfig& cfg, std::size_t input_dim) {
  if (cfg.num_layers < 1) throw ConfigError("projector: num_layers must be >= 1");
  if (cfg.num_refs < 1) throw ConfigError("projector: num_refs must be >= 1");
  if (input_dim < 1) throw ConfigError("projector: input width must be >= 1");
  const std::size_t ch = cfg.hidden_dim == 0 ? input_dim : cfg.hidden_dim;
  if (cfg.n_heads < 1 || ch % cfg.n_heads != 0)
    throw ConfigError("projector: hidden width " + std::to_string(ch) + " is not divisible by " +
                      std::to_string(cfg.n_heads) + " heads");

  ProjectorParams<T> p;
  p.input_dim = input_dim;
  p.hidden_dim = ch;
  p.n_heads = cfg.n_heads;
  p.input_projection = ch != input_dim;

  std::mt19937_64 rng(cfg.init_seed);
  auto uniform = [&rng](std::size_t rows, std::size_t cols, std::size_t fan_in) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
    std::uniform_real_distribution<double> dist(-bound, bound);
    Tensor<T> t(Shape{rows, cols});
    for (auto& v : t.values()) v = static_cast<T>(dist(rng));
    return t;
  };
  auto zeros = [](std::size_t n) { return Tensor<T>(Shape{n}, T{0}); };
  auto ones = [](std::size_t n) { return Tensor<T>(Shape{n}, T{1}); };

  p.reference = uniform(cfg.num_refs, input_dim, input_dim);
  p.ref_weight = uniform(input_dim, ch, input_dim);
  p.ref_bias = zeros(ch);
  if (p.input_projection) {
    p.in_weight = uniform(input_dim, ch, input_dim);
    p.in_bias = zeros(ch);
  }
  for (std::size_t i = 0; i < cfg.num_layers; ++i) {
    BlockFields<Tensor<T>> b;
    b.ln1_gain = ones(ch);
    b.ln1_bias = zeros(ch);
    b.q_weight = uniform(ch, ch, ch);
    b.q_bias = zeros(ch);
    b.k_weight = uniform(ch, ch, ch);
    b.k_bias = zeros(ch);
    b.v_weight = uniform(ch, ch, ch);
    b.v_bias = zeros(ch);
    b.out_weight = uniform(ch, ch, ch);
    b.out_bias = zeros(ch);
    b.ln2_gain = ones(ch);
    b.ln2_bias = zeros(ch);
    b.mlp_in_weight = uniform(ch, 4 * ch, ch);
    b.mlp_in_bias = zeros(4 * ch);
    b.mlp_out_weight = uniform(4 * ch, ch, 4 * ch);
    b.mlp_out_bias = zeros(ch);
    p.blocks.push_back(std::move(b));
  }
  return p;
}

/// Puts every parameter on the tape as a leaf, mirroring the layout.
template <typename T>
ProjectorVars<T> bind_params(Tape<T>& tape, const ProjectorParams<T>& params, bool requires_grad) {
  ProjectorVars<T> vars;
  vars.input_dim = params.input_dim;
  vars.hidden_dim = params.hidden_dim;
  vars.n_heads = params.n_heads;
  vars.input_projection = params.input_projection;
  vars.blocks.resize(params.blocks.size());
  std::vector<Var<T>*> slots;
  visit_params(vars, [&](const std::string&, Var<T>& v) { slots.push_back(&v); });
  std::size_t i = 0;
  visit_params(params, [&](const std::string&, const Tensor<T>& t) {
    *slots[i++] = tape.leaf(t, requires_grad);
  });
  return vars;
}

template <typename T>
Var<T> linear(const Var<T>& x, const Var<T>& weight, const Var<T>& bias) {
  return add_row(matmul(x, weight), bias);
}

template <typename T>
Var<T> layer_norm(const Var<T>& x, const Var<T>& gain, const Var<T>& bias) {
  return add_row(mul_row(layer_norm_rows(x), gain), bias);
}

/// Projects N x C residual features to N x C_h.
template <typename T>
Var<T> project(const Var<T>& x, const ProjectorVars<T>& p) {
  const Tensor<T>& xv = x.value();
  if (xv.rank() != 2 || xv.cols() != p.input_dim)
    throw ShapeError("project: input " + shape_str(xv.shape()) + " does not match projector width " +
                     std::to_string(p.input_dim));
  if (xv.rows() < 1) throw ShapeError("project: no input features");

  Var<T> h = p.input_projection ? linear(x, p.in_weight, p.in_bias) : x;
  const Var<T> ref_hidden = linear(p.reference, p.ref_weight, p.ref_bias);
  const std::size_t head_dim = p.hidden_dim / p.n_heads;
  const T inv_sqrt_d = T{1} / std::sqrt(static_cast<T>(head_dim));

  for (const auto& b : p.blocks) {
    const Var<T> x1 = layer_norm(h, b.ln1_gain, b.ln1_bias);
    const Var<T> q = linear(x1, b.q_weight, b.q_bias);
    const Var<T> k = linear(ref_hidden, b.k_weight, b.k_bias);
    const Var<T> v = linear(ref_hidden, b.v_weight, b.v_bias);
    std::vector<Var<T>> heads;
    for (std::size_t hd = 0; hd < p.n_heads; ++hd) {
      const std::size_t off = hd * head_dim;
      const Var<T> scores =
          scale(matmul_bt(slice_cols(q, off, head_dim), slice_cols(k, off, head_dim)), inv_sqrt_d);
      heads.push_back(matmul(softmax_rows(scores), slice_cols(v, off, head_dim)));
    }
    const Var<T> attn = p.n_heads == 1 ? heads.front() : concat_cols(heads);
    const Var<T> a = linear(attn, b.out_weight, b.out_bias);
    const Var<T> merged = sub(h, a);
    const Var<T> mlp = linear(gelu(linear(layer_norm(merged, b.ln2_gain, b.ln2_bias), b.mlp_in_weight,
                                          b.mlp_in_bias)),
                              b.mlp_out_weight, b.mlp_out_bias);
    h = add(merged, mlp);
  }
  return h;
}

/// Gradient-free projection of a feature matrix.
template <typename T>
Tensor<T> project_values(const Tensor<T>& x, const ProjectorParams<T>& params) {
  Tape<T> tape;
  const auto vars = bind_params(tape, params, false);
  return project(tape.constant(x), vars).value();
}

}  // namespace adp
