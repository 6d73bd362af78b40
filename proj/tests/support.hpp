#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "primed/autograd.hpp"
#include "primed/model.hpp"
#include "primed/nn.hpp"

namespace testing {

using primed::Index;
using primed::Scalar;
using primed::Shape;
using primed::Tensor;
namespace ag = primed::ag;

inline Tensor random_tensor(std::mt19937_64& rng, Shape shape, Scalar stddev = 1.0) {
  Tensor t(std::move(shape));
  std::normal_distribution<Scalar> n(0.0, stddev);
  for (auto& v : t.data()) v = n(rng);
  return t;
}

inline Tensor random_mask(std::mt19937_64& rng, Shape shape, double p = 0.4) {
  Tensor t(std::move(shape));
  std::bernoulli_distribution b(p);
  for (auto& v : t.data()) v = b(rng) ? 1.0 : 0.0;
  return t;
}

struct GradReport {
  double worst = 0;       // largest per-block relative error
  std::string worst_block;
  Index checked = 0;      // coordinates compared
};

// Central differences on up to `per_block` coordinates of every block.
// Error per block: ||analytic - numeric|| / max(||analytic||, ||numeric||, floor).
// Differencing noise at h = 1e-5 is ~1e-9 absolute.
inline GradReport gradcheck(const std::function<ag::Var()>& loss, std::vector<std::pair<std::string, ag::Var>> blocks,
                            Index per_block = 12, Scalar h = 1e-5, std::uint64_t seed = 7,
                            Scalar floor = 1e-5) {
  for (auto& [_, b] : blocks) b.zero_grad();
  ag::backward(loss());
  GradReport rep;
  std::mt19937_64 rng(seed);
  for (auto& [name, b] : blocks) {
    const Index n = b.numel();
    std::vector<Index> coords(static_cast<std::size_t>(n));
    for (Index i = 0; i < n; ++i) coords[static_cast<std::size_t>(i)] = i;
    std::shuffle(coords.begin(), coords.end(), rng);
    coords.resize(static_cast<std::size_t>(std::min(n, per_block)));
    const Tensor analytic = b.grad().empty() ? Tensor(b.shape()) : b.grad();
    double diff2 = 0, a2 = 0, n2 = 0;
    for (Index i : coords) {
      Tensor& w = b.mutable_value();
      const Scalar orig = w[i];
      Scalar up, down;
      {
        ag::NoGradGuard g;
        w[i] = orig + h;
        up = loss().value()[0];
        w[i] = orig - h;
        down = loss().value()[0];
      }
      w[i] = orig;
      const double num = (up - down) / (2 * h);
      diff2 += (analytic[i] - num) * (analytic[i] - num);
      a2 += analytic[i] * analytic[i];
      n2 += num * num;
      ++rep.checked;
    }
    const double denom = std::max({std::sqrt(a2), std::sqrt(n2), floor});
    const double err = std::sqrt(diff2) / denom;
    if (err > rep.worst) {
      rep.worst = err;
      rep.worst_block = name;
    }
  }
  return rep;
}

inline std::vector<std::pair<std::string, ag::Var>> all_blocks(primed::nn::ParamStore& store) {
  std::vector<std::pair<std::string, ag::Var>> out;
  for (auto& [name, p] : store.params()) out.emplace_back(name, p);
  return out;
}

// Small geometry: T frames on an 8 x 8 canvas with stage grids 8/4/2/1.
inline primed::model::ModelConfig tiny_model_config() {
  primed::model::ModelConfig c;
  c.channels = {4, 6, 8, 10};
  c.grids = {primed::cbcf::Grid{8, 8}, {4, 4}, {2, 2}, {1, 1}};
  c.canvas = {8, 8};
  c.audio_dim = 5;
  c.text_dim = 6;
  c.width = 8;
  c.distilled_width = 8;
  c.heads = 2;
  c.prior_hidden = 6;
  c.ffn_mult = 2;
  c.dense = {4, 4};
  c.sparse_tokens = 2;
  return c;
}

inline primed::model::Toggles tiny_toggles() {
  primed::model::Toggles t;
  t.num_tokens = 2;
  return t;
}

// Random clip matching cfg; the ground truth has foreground in every frame.
inline primed::model::Inputs random_inputs(const primed::model::ModelConfig& c, Index frames, std::uint64_t seed,
                                           Index text_len = 3, Index max_len = 5) {
  std::mt19937_64 rng(seed);
  primed::model::Inputs in;
  for (std::size_t n = 0; n < 4; ++n) in.visual[n] = random_tensor(rng, {frames * c.grids[n].positions(), c.channels[n]});
  in.audio = random_tensor(rng, {frames, c.audio_dim});
  in.text = Tensor({max_len, c.text_dim});
  Tensor t = random_tensor(rng, {text_len, c.text_dim});
  std::copy(t.data().begin(), t.data().end(), in.text.data().begin());
  in.text_len = text_len;
  in.gt = random_mask(rng, {frames, c.canvas.h, c.canvas.w});
  for (Index f = 0; f < frames; ++f) in.gt[f * c.canvas.positions()] = 1.0;
  in.label = {0.2, 0.5, 0.3};
  return in;
}

}  // namespace testing
