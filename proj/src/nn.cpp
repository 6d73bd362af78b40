#include "primed/nn.hpp"

#include <cmath>
#include <stdexcept>

namespace primed::nn {

ag::Var ParamStore::create(const std::string& name, Tensor init) {
  if (params_.count(name)) throw std::logic_error("parameter registered twice: " + name);
  auto v = ag::parameter(std::move(init));
  params_.emplace(name, v);
  return v;
}

ag::Var& ParamStore::at(const std::string& name) {
  auto it = params_.find(name);
  if (it == params_.end()) throw std::out_of_range("unknown parameter: " + name);
  return it->second;
}

const ag::Var& ParamStore::at(const std::string& name) const {
  auto it = params_.find(name);
  if (it == params_.end()) throw std::out_of_range("unknown parameter: " + name);
  return it->second;
}

void ParamStore::zero_grad() {
  for (auto& [_, p] : params_) p.zero_grad();
}

Index ParamStore::numel() const {
  Index n = 0;
  for (const auto& [_, p] : params_) n += p.numel();
  return n;
}

Tensor uniform(Rng& rng, Shape shape, Scalar bound) {
  Tensor t(std::move(shape));
  std::uniform_real_distribution<Scalar> dist(-bound, bound);
  for (Index i = 0; i < t.numel(); ++i) t[i] = dist(rng);
  return t;
}

Tensor normal(Rng& rng, Shape shape, Scalar stddev) {
  Tensor t(std::move(shape));
  std::normal_distribution<Scalar> dist(0.0, stddev);
  for (Index i = 0; i < t.numel(); ++i) t[i] = dist(rng);
  return t;
}

Linear::Linear(ParamStore& store, const std::string& name, Index in_, Index out_, Rng& rng, bool with_bias)
    : in(in_), out(out_) {
  const Scalar bound = 1.0 / std::sqrt(static_cast<Scalar>(in));
  weight = store.create(name + ".weight", uniform(rng, {in, out}, bound));
  if (with_bias) bias = store.create(name + ".bias", uniform(rng, {out}, bound));
}

ag::Var Linear::operator()(const ag::Var& x) const {
  ag::Var y = ag::matmul(x, weight);
  return bias ? ag::add_bias(y, bias) : y;
}

LayerNorm::LayerNorm(ParamStore& store, const std::string& name, Index width) {
  gamma = store.create(name + ".gamma", Tensor({width}, 1.0));
  beta = store.create(name + ".beta", Tensor({width}, 0.0));
}

ag::Var LayerNorm::operator()(const ag::Var& x) const { return ag::layer_norm(x, gamma, beta); }

Mlp::Mlp(ParamStore& store, const std::string& name, Index width, Index hidden, Index out, Rng& rng)
    : fc1(store, name + ".fc1", width, hidden, rng), fc2(store, name + ".fc2", hidden, out, rng) {}

ag::Var Mlp::operator()(const ag::Var& x) const { return fc2(ag::relu(fc1(x))); }

MultiHeadAttention::MultiHeadAttention(ParamStore& store, const std::string& name, Index query_dim, Index kv_dim,
                                       Index width, Index heads_, Rng& rng)
    : q(store, name + ".q", query_dim, width, rng),
      k(store, name + ".k", kv_dim, width, rng),
      v(store, name + ".v", kv_dim, width, rng),
      o(store, name + ".o", width, query_dim, rng),
      heads(heads_) {
  if (width % heads != 0) throw std::invalid_argument(name + ": width not divisible by heads");
}

ag::Var MultiHeadAttention::operator()(const ag::Var& query, const ag::Var& key_value, Index batch,
                                       const ag::Var& key_bias, const std::vector<Index>& key_valid) const {
  ag::AttentionLayout layout{batch, heads, key_valid};
  return o(ag::attention(q(query), k(key_value), v(key_value), layout, key_bias));
}

}  // namespace primed::nn
