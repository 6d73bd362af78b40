#include "primed/distiller.hpp"

#include <cmath>
#include <stdexcept>

namespace primed::distiller {

TokenDistiller::TokenDistiller(nn::ParamStore& store, const std::string& name, Index in_channels, Index width,
                               Index tokens, Index heads, nn::Rng& rng)
    : psi(store, name + ".psi", in_channels, width, rng) {
  if (tokens <= 0) throw std::invalid_argument("distiller: token count must be positive");
  seeds = store.create(name + ".seeds", nn::normal(rng, {tokens, width}, 1.0));
  attn = nn::MultiHeadAttention(store, name + ".attn", width, width, width, heads, rng);
  mlp = nn::Mlp(store, name + ".mlp", width, width * 4, width, rng);
}

ag::Var TokenDistiller::operator()(const ag::Var& visual, Index frames) const {
  if (frames <= 0 || visual.rows() % frames != 0) throw std::invalid_argument("distiller: token count not divisible by frames");
  auto f = psi(visual);
  auto v0 = ag::tile_rows(seeds, frames);
  auto v_hat = ag::add(v0, attn(v0, f, frames));
  return ag::add(v_hat, mlp(v_hat));
}

namespace {

Scalar row_norm(const Tensor& t) {
  Scalar s = 0;
  for (Index i = 0; i < t.numel(); ++i) s += t[i] * t[i];
  return std::sqrt(s);
}

}  // namespace

Orthogonalized orthogonalize(const ag::Var& raw, Index frames, Scalar tolerance) {
  if (frames <= 0 || raw.rows() % frames != 0) throw std::invalid_argument("orthogonalize: rows not divisible by frames");
  const Index K = raw.rows() / frames, d = raw.cols();
  if (K > d) throw std::invalid_argument("orthogonalize: more tokens than dimensions");
  Orthogonalized out;
  std::vector<ag::Var> rows;
  rows.reserve(static_cast<std::size_t>(raw.rows()));
  for (Index f = 0; f < frames; ++f) {
    std::vector<ag::Var> basis;
    for (Index j = 0; j < K; ++j) {
      auto v = ag::slice_rows(raw, f * K + j, f * K + j + 1);
      auto u = v;
      for (const auto& e : basis) u = ag::sub(u, ag::mul_col(e, ag::rowwise_dot(v, e)));
      if (row_norm(u.value()) < tolerance) {
        ++out.degenerate;
        // First standard basis vector that survives projection.
        for (Index axis = 0; axis < d; ++axis) {
          Tensor unit({1, d});
          unit[axis] = 1.0;
          auto c = ag::constant(unit);
          auto w = c;
          for (const auto& e : basis) w = ag::sub(w, ag::mul_col(e, ag::rowwise_dot(c, e)));
          if (row_norm(w.value()) >= 0.5) {
            u = w;
            break;
          }
        }
      }
      auto e = ag::l2_normalize_rows(u);
      basis.push_back(e);
      rows.push_back(e);
    }
  }
  out.tokens = ag::concat_rows(rows);
  return out;
}

ag::Var orth_loss(const ag::Var& raw, Index frames, Index* zero_rows) {
  if (frames <= 0 || raw.rows() % frames != 0) throw std::invalid_argument("orth_loss: rows not divisible by frames");
  const Index K = raw.rows() / frames;
  if (K < 2) throw std::invalid_argument("orth_loss: needs at least two tokens");
  auto v = ag::l2_normalize_rows(raw, 1e-12, zero_rows);
  std::vector<ag::Var> per_frame;
  for (Index f = 0; f < frames; ++f) {
    auto vf = ag::slice_rows(v, f * K, (f + 1) * K);
    auto gram = ag::matmul_nt(vf, vf);
    auto diag = ag::rowwise_dot(vf, vf);
    per_frame.push_back(ag::sub(ag::sum(ag::mul(gram, gram)), ag::sum(ag::mul(diag, diag))));
  }
  return ag::scale(ag::sum(ag::concat_rows(per_frame)), 1.0 / static_cast<Scalar>(frames * K * (K - 1)));
}

}  // namespace primed::distiller
