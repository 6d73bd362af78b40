#pragma once

#include <map>
#include <random>
#include <string>
#include <vector>

#include "primed/autograd.hpp"

namespace primed::nn {

using Rng = std::mt19937_64;

// Owns every learnable tensor, keyed by module path ("cbcf.stage1.v_from_s.q.weight").
// Iteration order is the key order, which fixes checkpoint layout.
class ParamStore {
 public:
  ag::Var create(const std::string& name, Tensor init);
  bool contains(const std::string& name) const { return params_.count(name) != 0; }
  ag::Var& at(const std::string& name);
  const ag::Var& at(const std::string& name) const;
  const std::map<std::string, ag::Var>& params() const { return params_; }
  std::map<std::string, ag::Var>& params() { return params_; }
  void zero_grad();
  Index numel() const;

 private:
  std::map<std::string, ag::Var> params_;
};

Tensor uniform(Rng& rng, Shape shape, Scalar bound);
Tensor normal(Rng& rng, Shape shape, Scalar stddev);

// y = x W + b, W stored in x out.
struct Linear {
  Linear() = default;
  Linear(ParamStore& store, const std::string& name, Index in, Index out, Rng& rng, bool with_bias = true);
  ag::Var operator()(const ag::Var& x) const;

  ag::Var weight;
  ag::Var bias;
  Index in = 0;
  Index out = 0;
};

struct LayerNorm {
  LayerNorm() = default;
  LayerNorm(ParamStore& store, const std::string& name, Index width);
  ag::Var operator()(const ag::Var& x) const;

  ag::Var gamma;
  ag::Var beta;
};

// Two-layer ReLU perceptron.
struct Mlp {
  Mlp() = default;
  Mlp(ParamStore& store, const std::string& name, Index width, Index hidden, Index out, Rng& rng);
  ag::Var operator()(const ag::Var& x) const;

  Linear fc1;
  Linear fc2;
};

// Multi-head attention with separate query and key/value input widths.
// Inputs are token matrices holding `batch` independent groups stacked by row.
struct MultiHeadAttention {
  MultiHeadAttention() = default;
  MultiHeadAttention(ParamStore& store, const std::string& name, Index query_dim, Index kv_dim, Index width,
                     Index heads, Rng& rng);

  ag::Var operator()(const ag::Var& query, const ag::Var& key_value, Index batch, const ag::Var& key_bias = ag::Var(),
                     const std::vector<Index>& key_valid = {}) const;

  Linear q, k, v, o;
  Index heads = 1;
};

}  // namespace primed::nn
