#include <doctest.h>

#include <Eigen/Dense>

#include "primed/semflow.hpp"
#include "support.hpp"

using namespace primed;
using namespace primed::semflow;
using testing::gradcheck;
using testing::random_tensor;
using Mat = Eigen::MatrixXd;

namespace {

Tensor row_tensor(std::initializer_list<Scalar> v) { return Tensor({1, static_cast<Index>(v.size())}, v); }

// C[i] = ((i - 1) C[i-1] + S[i-1]) / i, the running-mean recurrence.
Tensor recurrent_memory(const Tensor& s) {
  const Index T = s.rows(), d = s.cols();
  Tensor c({T, d});
  for (Index i = 1; i < T; ++i)
    for (Index k = 0; k < d; ++k)
      c[i * d + k] = ((i - 1) * c[(i - 1) * d + k] + s[(i - 1) * d + k]) / static_cast<Scalar>(i);
  return c;
}

Mat to_mat(const Tensor& t) {
  Mat m(t.rows(), t.cols());
  for (Index r = 0; r < t.rows(); ++r)
    for (Index c = 0; c < t.cols(); ++c) m(r, c) = t[r * t.cols() + c];
  return m;
}

Mat lin(const Mat& x, const nn::Linear& l) {
  Mat y = x * to_mat(l.weight.value().reshaped({l.in, l.out}));
  if (l.bias) y.rowwise() += to_mat(l.bias.value().reshaped({1, l.out})).row(0);
  return y;
}

Mat layer_norm(const Mat& x, const nn::LayerNorm& n) {
  Mat y(x.rows(), x.cols());
  const auto g = n.gamma.value(), b = n.beta.value();
  for (Index r = 0; r < x.rows(); ++r) {
    const double mu = x.row(r).mean();
    const double var = (x.row(r).array() - mu).square().mean();
    for (Index c = 0; c < x.cols(); ++c) y(r, c) = (x(r, c) - mu) / std::sqrt(var + 1e-5) * g[c] + b[c];
  }
  return y;
}

Mat mhsa(const Mat& x, const nn::MultiHeadAttention& a) {
  const Mat q = lin(x, a.q), k = lin(x, a.k), v = lin(x, a.v);
  const Index dh = q.cols() / a.heads;
  Mat out(x.rows(), q.cols());
  for (Index h = 0; h < a.heads; ++h) {
    Mat logits = q.middleCols(h * dh, dh) * k.middleCols(h * dh, dh).transpose() / std::sqrt(static_cast<double>(dh));
    for (Index r = 0; r < logits.rows(); ++r) {
      const double mx = logits.row(r).maxCoeff();
      logits.row(r) = (logits.row(r).array() - mx).exp();
      logits.row(r) /= logits.row(r).sum();
    }
    out.middleCols(h * dh, dh) = logits * v.middleCols(h * dh, dh);
  }
  return lin(out, a.o);
}

Mat reference_fusion(const FusionBlock& f, const Tensor& audio, const Tensor& text) {
  Mat x(audio.rows() + text.rows(), f.audio_proj.out);
  x << lin(to_mat(audio), f.audio_proj), lin(to_mat(text), f.text_proj);
  x = layer_norm(x + mhsa(x, f.attn), f.norm1);
  Mat h = lin(x, f.ffn.fc1).cwiseMax(0.0);
  return layer_norm(x + lin(h, f.ffn.fc2), f.norm2);
}

}  // namespace

TEST_CASE("prior decoder: zero params give a uniform prior") {
  nn::ParamStore store;
  nn::Rng rng(1);
  PriorDecoder mpd(store, "mpd", 6, 8, rng);
  for (auto& [_, p] : store.params()) p.mutable_value().fill(0.0);
  const auto prior = mpd(ag::constant(random_tensor(rng, {1, 6})));
  for (Index i = 0; i < 3; ++i) CHECK(prior.probs.value()[i] == doctest::Approx(1.0 / 3).epsilon(1e-12));
}

TEST_CASE("prior decoder: hand softmax and normalisation") {
  const auto p = ag::softmax_rows(ag::constant(row_tensor({0.0, std::log(2.0), 0.0})));
  CHECK(p.value()[0] == doctest::Approx(0.25).epsilon(1e-12));
  CHECK(p.value()[1] == doctest::Approx(0.5).epsilon(1e-12));
  CHECK(p.value()[2] == doctest::Approx(0.25).epsilon(1e-12));

  nn::ParamStore store;
  nn::Rng rng(3);
  PriorDecoder mpd(store, "mpd", 6, 8, rng);
  for (int trial = 0; trial < 20; ++trial) {
    const auto prior = mpd(ag::constant(random_tensor(rng, {1, 6}, 3.0)));
    double s = 0;
    for (Index i = 0; i < 3; ++i) s += prior.probs.value()[i];
    CHECK(std::abs(s - 1.0) < 1e-6);
    // Shifting the logits by a constant leaves the prior unchanged.
    const auto shifted = ag::softmax_rows(ag::add_scalar(prior.logits, 17.3));
    for (Index i = 0; i < 3; ++i) CHECK(std::abs(shifted.value()[i] - prior.probs.value()[i]) < 1e-7);
  }
  CHECK_THROWS(mpd(ag::constant(row_tensor({0, 0, std::nan(""), 0, 0, 0}))));
}

TEST_CASE("kl_loss hand cases") {
  CHECK(kl_loss(ag::constant(row_tensor({0.2, 0.3, 0.5})), {0.2, 0.3, 0.5}).value()[0] ==
        doctest::Approx(0.0).epsilon(1e-12));
  CHECK(std::abs(kl_loss(ag::constant(row_tensor({0.25, 0.25, 0.5})), {0.5, 0.5, 0.0}).value()[0] - std::log(2.0)) <
        1e-6);
  CHECK(std::abs(kl_loss(ag::constant(row_tensor({1.0 / 3, 1.0 / 3, 1.0 / 3})), {1, 0, 0}).value()[0] -
                 std::log(3.0)) < 1e-6);
  // A zero probability is clamped at 1e-8.
  const double clamped = kl_loss(ag::constant(row_tensor({0.0, 0.5, 0.5})), {1, 0, 0}).value()[0];
  CHECK(clamped == doctest::Approx(-std::log(1e-8)));
  CHECK(std::isfinite(clamped));
}

TEST_CASE("kl_loss gradient through the prior decoder") {
  nn::ParamStore store;
  nn::Rng rng(5);
  PriorDecoder mpd(store, "mpd", 6, 8, rng);
  const auto tg = ag::constant(random_tensor(rng, {1, 6}));
  const auto rep =
      gradcheck([&] { return kl_loss(mpd(tg).probs, {0.6, 0.3, 0.1}); }, testing::all_blocks(store), 48);
  CHECK(rep.worst < 1e-3);
}

TEST_CASE("cached memory matches the recurrent definition") {
  std::mt19937_64 rng(11);
  for (int trial = 0; trial < 100; ++trial) {
    const Index T = 1 + static_cast<Index>(rng() % 16), d = 1 + static_cast<Index>(rng() % 8);
    const Tensor s = random_tensor(rng, {T, d});
    const double beta = std::uniform_real_distribution<double>(0.0, 2.0)(rng);
    const auto out = temporal_enhance(ag::constant(s), beta);
    const Tensor oracle = recurrent_memory(s);
    for (Index i = 0; i < s.numel(); ++i) {
      REQUIRE(std::abs(out.memory.value()[i] - oracle[i]) < 1e-6);
      REQUIRE(std::abs(out.enhanced.value()[i] - ((beta + 1) * s[i] - beta * oracle[i])) < 1e-6);
    }
  }
}

TEST_CASE("temporal_enhance worked examples") {
  const auto a = temporal_enhance(ag::constant(Tensor({3, 1}, {1, 2, 3})), 1.0);
  CHECK(a.memory.value() == Tensor({3, 1}, {0, 1, 1.5}));
  CHECK(a.enhanced.value() == Tensor({3, 1}, {2, 3, 4.5}));

  std::mt19937_64 rng(2);
  const Tensor s = random_tensor(rng, {5, 3});
  CHECK(temporal_enhance(ag::constant(s), 0.0).enhanced.value() == s);

  const double c = 0.7, beta = 2.5;
  const auto k = temporal_enhance(ag::constant(Tensor({6, 2}, c)), beta);
  for (Index j = 0; j < 2; ++j) CHECK(k.enhanced.value()[j] == doctest::Approx((beta + 1) * c));
  for (Index i = 2; i < 12; ++i) CHECK(k.enhanced.value()[i] == doctest::Approx(c));
}

TEST_CASE("temporal_enhance is causal") {
  std::mt19937_64 rng(4);
  const Index T = 7, d = 3;
  const Tensor s = random_tensor(rng, {T, d});
  const Tensor base = temporal_enhance(ag::constant(s), 1.0).enhanced.value();
  for (Index i = 0; i < T; ++i) {
    Tensor p = s;
    p[i * d + 1] += 0.5;
    const Tensor moved = temporal_enhance(ag::constant(p), 1.0).enhanced.value();
    for (Index j = 0; j < T; ++j) {
      bool changed = false;
      for (Index k = 0; k < d; ++k) changed |= moved[j * d + k] != base[j * d + k];
      CHECK(changed == (j >= i));
    }
  }
}

TEST_CASE("gradient of the enhanced-audio energy") {
  std::mt19937_64 rng(9);
  auto s = ag::parameter(random_tensor(rng, {6, 4}));
  const auto rep = gradcheck(
      [&] {
        const auto e = temporal_enhance(s, 1.0).enhanced;
        return ag::sum(ag::mul(e, e));
      },
      {{"S_A", s}}, 24);
  CHECK(rep.worst < 1e-3);
}

TEST_CASE("fusion block shapes and the residual-only path") {
  nn::ParamStore store;
  nn::Rng rng(6);
  FusionBlock f(store, "fuse", 5, 6, 8, 2, 4, rng);
  std::mt19937_64 g(1);
  const Tensor audio = random_tensor(g, {3, 5}), text = random_tensor(g, {4, 6});
  const auto out = f(ag::constant(audio), ag::constant(text), 4);
  CHECK(out.audio.shape() == Shape{3, 8});
  CHECK(out.text.shape() == Shape{4, 8});

  for (auto* l : {&f.attn.v, &f.attn.o, &f.ffn.fc2}) {
    l->weight.mutable_value().fill(0.0);
    l->bias.mutable_value().fill(0.0);
  }
  const auto res = f(ag::constant(audio), ag::constant(text), 4);
  Mat proj(7, 8);
  proj << lin(to_mat(audio), f.audio_proj), lin(to_mat(text), f.text_proj);
  const Mat expect = layer_norm(layer_norm(proj, f.norm1), f.norm2);
  for (Index r = 0; r < 3; ++r)
    for (Index c = 0; c < 8; ++c) CHECK(res.audio.value()[r * 8 + c] == doctest::Approx(expect(r, c)).epsilon(1e-9));
  for (Index r = 0; r < 4; ++r)
    for (Index c = 0; c < 8; ++c)
      CHECK(res.text.value()[r * 8 + c] == doctest::Approx(expect(3 + r, c)).epsilon(1e-9));
}

TEST_CASE("fusion block matches a straight-line reference") {
  nn::ParamStore store;
  nn::Rng rng(8);
  FusionBlock f(store, "fuse", 3, 5, 4, 2, 4, rng);
  std::mt19937_64 g(12);
  const Tensor audio = random_tensor(g, {3, 3}), text = random_tensor(g, {2, 5});
  const auto out = f(ag::constant(audio), ag::constant(text), 2);
  const Mat ref = reference_fusion(f, audio, text);
  for (Index r = 0; r < 5; ++r)
    for (Index c = 0; c < 4; ++c) {
      const double got = r < 3 ? out.audio.value()[r * 4 + c] : out.text.value()[(r - 3) * 4 + c];
      CHECK(std::abs(got - ref(r, c)) < 1e-6);
    }
}

TEST_CASE("fusion block ignores text padding rows") {
  nn::ParamStore store;
  nn::Rng rng(8);
  FusionBlock f(store, "fuse", 3, 5, 4, 2, 4, rng);
  std::mt19937_64 g(12);
  const Tensor audio = random_tensor(g, {3, 3});
  Tensor text = random_tensor(g, {6, 5});
  const auto a = f(ag::constant(audio), ag::constant(text), 2);
  for (Index i = 10; i < text.numel(); ++i) text[i] = 1e3;
  const auto b = f(ag::constant(audio), ag::constant(text), 2);
  CHECK(a.audio.value() == b.audio.value());
  CHECK(a.text.value() == b.text.value());
  CHECK_THROWS(f(ag::constant(audio), ag::constant(text), 0));
  CHECK_THROWS(f(ag::constant(Tensor({0, 3})), ag::constant(text), 2));
}

TEST_CASE("build_flow broadcast and ordering") {
  std::mt19937_64 g(3);
  const Index T = 3, L = 2, d = 4;
  const Tensor a = random_tensor(g, {T, d}), s = random_tensor(g, {L, d});
  const auto flow = build_flow(ag::constant(a), ag::constant(s)).value();
  CHECK(flow.shape() == Shape{T * (T + L), d});
  const Index per = (T + L) * d;
  for (Index i = 0; i < per; ++i) CHECK(flow[i] == flow[(T - 1) * per + i]);
  for (Index t = 0; t < T; ++t)
    for (Index j = 0; j < L; ++j)
      for (Index c = 0; c < d; ++c) CHECK(flow[t * per + (T + j) * d + c] == s[j * d + c]);
  CHECK_THROWS(build_flow(ag::constant(a), ag::constant(Tensor({L, d + 1}))));
}
