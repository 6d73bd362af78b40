#include <doctest.h>

#include "primed/cbcf.hpp"
#include "support.hpp"

using namespace primed;
using namespace primed::cbcf;
using testing::random_tensor;

namespace {

void zero_linear(nn::Linear& l) {
  l.weight.mutable_value().fill(0.0);
  if (l.bias) l.bias.mutable_value().fill(0.0);
}

struct StackFixture {
  nn::ParamStore store;
  nn::Rng rng{21};
  std::array<Index, 4> channels{4, 6, 8, 10};
  std::array<Grid, 4> grids{Grid{8, 16}, {4, 8}, {2, 4}, {1, 2}};
  Index frames = 2, per_frame = 5, width = 8;
  Stack stack;
  ModalityBias bias_net;
  StackInputs in;
  Tensor tg, audio;

  StackFixture() : stack(store, "cbcf", channels, width, 8, 2, rng), bias_net(store, "bias", 6, 5, 10, 8, rng) {
    std::mt19937_64 g(3);
    for (std::size_t n = 0; n < 4; ++n)
      in.visual[n] = ag::constant(random_tensor(g, {frames * grids[n].positions(), channels[n]}));
    in.grids = grids;
    in.flow = ag::constant(random_tensor(g, {frames * per_frame, width}));
    in.distilled = ag::constant(random_tensor(g, {frames * 2, 8}));
    in.frames = frames;
    tg = random_tensor(g, {1, 6});
    audio = random_tensor(g, {frames, 5});
  }

  BiasField bias(std::array<Scalar, 3> p) const {
    return bias_net(ag::constant(Tensor({1, 3}, {p[0], p[1], p[2]})), ag::constant(tg), ag::constant(audio),
                    in.visual[3]);
  }
};

}  // namespace

TEST_CASE("bias from scores: neutral and saturated cases") {
  auto gamma = ag::parameter(Tensor({1}, 1.7));
  const auto neutral = bias_from_scores(ag::constant(Tensor({4, 1}, 0.5)), gamma);
  for (Scalar v : neutral.bias.value().data()) CHECK(v == 0.0);
  const auto sat = bias_from_scores(ag::constant(Tensor({1, 1}, 1.0)), gamma);
  CHECK(sat.bias.value()[0] == doctest::Approx(1.7 * std::log(9999.0)).epsilon(1e-12));
  CHECK(std::log(9999.0) == doctest::Approx(9.2102).epsilon(1e-5));
  const auto low = bias_from_scores(ag::constant(Tensor({1, 1}, 0.0)), gamma);
  CHECK(low.bias.value()[0] == doctest::Approx(-1.7 * std::log(9999.0)).epsilon(1e-12));
}

TEST_CASE("modality bias hand cases") {
  nn::ParamStore store;
  nn::Rng rng(1);
  ModalityBias mb(store, "bias", 2, 2, 2, 2, rng);
  for (auto* l : {&mb.text_proj, &mb.audio_proj, &mb.visual_proj}) {
    zero_linear(*l);
    l->weight.mutable_value() = Tensor({2, 2}, {1, 0, 0, 1});
  }
  mb.gamma.mutable_value()[0] = 2.0;
  const auto visual = ag::constant(Tensor({3, 2}, {1, 0, 2, 0, 0.5, 0}));

  // Visual prior with T_g parallel to every visual token.
  const auto par = mb(ag::constant(Tensor({1, 3}, {0, 1, 0})), ag::constant(Tensor({1, 2}, {3, 0})),
                      ag::constant(Tensor({1, 2}, {0, 1})), visual);
  for (Scalar v : par.bias.value().data()) CHECK(v == doctest::Approx(2.0 * std::log(9999.0)).epsilon(1e-9));

  // Uniform prior with T_g and A_g orthogonal to the visual tokens.
  const auto orth = mb(ag::constant(Tensor({1, 3}, {1.0 / 3, 1.0 / 3, 1.0 / 3})), ag::constant(Tensor({1, 2}, {0, 1})),
                       ag::constant(Tensor({1, 2}, {0, -2})), visual);
  const double p = (0.5 + 0.5 + 0.25) / 3;
  for (Index i = 0; i < 3; ++i) {
    CHECK(orth.scores.value()[i] == doctest::Approx(p).epsilon(1e-12));
    CHECK(orth.bias.value()[i] == doctest::Approx(2.0 * std::log(p / (1 - p))).epsilon(1e-9));
  }
  CHECK(std::log(p / (1 - p)) == doctest::Approx(-0.3365).epsilon(1e-3));

  // A zero-norm global vector counts as neutral.
  const auto flagged = mb(ag::constant(Tensor({1, 3}, {0, 1, 0})), ag::constant(Tensor({1, 2})),
                          ag::constant(Tensor({1, 2}, {0, 1})), visual);
  CHECK(flagged.neutral_flags == 1);
  for (Scalar v : flagged.bias.value().data()) CHECK(v == doctest::Approx(0.0).epsilon(1e-12));
}

TEST_CASE("biased attention: constant and zero bias") {
  std::mt19937_64 g(5);
  const Index batch = 2, nq = 3, nk = 4, d = 4;
  const auto q = ag::constant(random_tensor(g, {batch * nq, d}));
  const auto k = ag::constant(random_tensor(g, {batch * nk, d}));
  const auto v = ag::constant(random_tensor(g, {batch * nk, d}));
  ag::AttentionLayout layout{batch, 2, {}};
  const Tensor plain = ag::attention(q, k, v, layout).value();
  CHECK(ag::attention(q, k, v, layout, ag::constant(Tensor({batch, nk}))).value() == plain);
  Tensor rows({batch, nk});
  for (Index b = 0; b < batch; ++b)
    for (Index j = 0; j < nk; ++j) rows[b * nk + j] = 3.0 * static_cast<Scalar>(b + 1) - 1.1;
  CHECK(max_abs_diff(ag::attention(q, k, v, layout, ag::constant(rows)).value(), plain) < 1e-6);

  Tensor spike({batch, nk});
  spike[1] = 30.0;
  spike[nk + 1] = 30.0;
  const Tensor probs = ag::attention_probs(q.value(), k.value(), layout, &spike);
  for (Index b = 0; b < batch; ++b)
    for (Index h = 0; h < 2; ++h)
      for (Index i = 0; i < nq; ++i) CHECK(probs[((b * 2 + h) * nq + i) * nk + 1] > 0.999);
}

TEST_CASE("biased attention: raising one key's bias raises its weight") {
  std::mt19937_64 g(6);
  const Index nq = 3, nk = 5, d = 4;
  ag::AttentionLayout layout{1, 2, {}};
  for (int trial = 0; trial < 20; ++trial) {
    const Tensor q = random_tensor(g, {nq, d}), k = random_tensor(g, {nk, d});
    Tensor b = random_tensor(g, {1, nk});
    const Index j = static_cast<Index>(g() % nk);
    const Tensor before = ag::attention_probs(q, k, layout, &b);
    b[j] += 0.3;
    const Tensor after = ag::attention_probs(q, k, layout, &b);
    for (Index r = 0; r < 2 * nq; ++r) CHECK(after[r * nk + j] > before[r * nk + j]);
  }
}

TEST_CASE("bias_to_keys nearest resize") {
  const auto b = ag::constant(Tensor({2 * 4, 1}, {1, 2, 3, 4, 5, 6, 7, 8}));
  const auto keys = bias_to_keys(b, 2, Grid{2, 2}, Grid{4, 4});
  CHECK(keys.shape() == Shape{2, 16});
  CHECK(keys.value()[0] == 1);
  CHECK(keys.value()[3] == 2);
  CHECK(keys.value()[15] == 4);
  CHECK(keys.value()[16 + 10] == 8);
}

TEST_CASE("stage with zero attention outputs is a pure residual") {
  nn::ParamStore store;
  nn::Rng rng(4);
  Stage st(store, "s", 6, 8, 8, 2, rng);
  for (auto* a : {&st.v_from_s1, &st.s_from_v1, &st.v_from_dis, &st.s_from_dis, &st.v_from_s2, &st.s_from_v2})
    zero_linear(a->o);
  std::mt19937_64 g(2);
  const auto visual = ag::constant(random_tensor(g, {2 * 4, 6}));
  const auto semantic = ag::constant(random_tensor(g, {2 * 3, 8}));
  const auto out = st(visual, semantic, ag::constant(random_tensor(g, {2 * 2, 8})), ag::Var(), 2);
  CHECK(out.semantic.value() == semantic.value());
  CHECK(max_abs_diff(out.visual.value(), st.out_proj(st.in_proj(visual)).value()) < 1e-12);
  CHECK(out.visual.shape() == Shape{8, 6});
}

TEST_CASE("stack shapes, propagation and bias liveness") {
  StackFixture fx;
  const auto out = fx.stack(fx.in);
  for (std::size_t n = 0; n < 3; ++n) {
    CHECK(out[n].visual.shape() == Shape{fx.frames * fx.grids[n].positions(), fx.channels[n]});
    CHECK(out[n].semantic.shape() == Shape{fx.frames * fx.per_frame, fx.width});
  }

  StackInputs moved = fx.in;
  Tensor v1 = fx.in.visual[0].value();
  v1[3] += 0.5;
  moved.visual[0] = ag::constant(v1);
  const auto out2 = fx.stack(moved);
  CHECK(max_abs_diff(out[1].visual.value(), out2[1].visual.value()) > 1e-9);
  CHECK(max_abs_diff(out[2].visual.value(), out2[2].visual.value()) > 1e-9);

  StackInputs vis = fx.in, aud = fx.in;
  vis.bias = fx.bias({0, 1, 0});
  aud.bias = fx.bias({1, 0, 0});
  CHECK(max_abs_diff(fx.stack(vis)[2].visual.value(), fx.stack(aud)[2].visual.value()) > 1e-6);
}

TEST_CASE("stack bias neutrality") {
  StackFixture fx;
  const auto plain = fx.stack(fx.in);
  StackInputs biased = fx.in;
  biased.bias = bias_from_scores(ag::constant(Tensor({fx.frames * 2, 1}, 0.5)), fx.bias_net.gamma);
  const auto neutral = fx.stack(biased);
  for (std::size_t n = 0; n < 3; ++n) {
    CHECK(max_abs_diff(plain[n].visual.value(), neutral[n].visual.value()) < 1e-6);
    CHECK(max_abs_diff(plain[n].semantic.value(), neutral[n].semantic.value()) < 1e-6);
  }
  // A bias that is constant over each frame's keys also cancels.
  biased.bias = bias_from_scores(ag::constant(Tensor({fx.frames * 2, 1}, {0.9, 0.9, 0.2, 0.2})), fx.bias_net.gamma);
  const auto shifted = fx.stack(biased);
  for (std::size_t n = 0; n < 3; ++n) CHECK(max_abs_diff(plain[n].visual.value(), shifted[n].visual.value()) < 1e-6);
}

TEST_CASE("stack works without distilled tokens and rejects bad grids") {
  StackFixture fx;
  StackInputs in = fx.in;
  in.distilled = ag::Var();
  CHECK_NOTHROW(fx.stack(in));
  in.grids[1] = Grid{3, 3};
  CHECK_THROWS(fx.stack(in));
}

TEST_CASE("stack gradient") {
  StackFixture fx;
  fx.in.bias = fx.bias({0.2, 0.5, 0.3});
  std::mt19937_64 g(9);
  const Tensor w = random_tensor(g, {fx.frames * 8, 8});
  auto blocks = testing::all_blocks(fx.store);
  const auto rep = testing::gradcheck(
      [&] {
        StackInputs in = fx.in;
        in.bias = fx.bias({0.2, 0.5, 0.3});
        const auto out = fx.stack(in);
        auto loss = ag::sum(ag::mul(out[2].visual, ag::constant(w)));
        return ag::add(loss, ag::mean(ag::mul(out[2].semantic, out[2].semantic)));
      },
      blocks, 6);
  INFO(rep.worst_block);
  CHECK(rep.worst < 1e-3);
}
