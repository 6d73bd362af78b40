#pragma once

#include "primed/nn.hpp"

// Distilled global visual tokens: K learnable seeds cross-attend to the top
// visual stage of every frame. No normalisation layers on this path.
namespace primed::distiller {

class TokenDistiller {
 public:
  TokenDistiller() = default;
  TokenDistiller(nn::ParamStore& store, const std::string& name, Index in_channels, Index width, Index tokens,
                 Index heads, nn::Rng& rng);

  // visual: (T * M4) x C4 tokens. Returns (T * K) x d0 raw tokens.
  ag::Var operator()(const ag::Var& visual, Index frames) const;

  Index tokens() const { return seeds.rows(); }

  nn::Linear psi;
  ag::Var seeds;  // K x d0
  nn::MultiHeadAttention attn;
  nn::Mlp mlp;
};

struct Orthogonalized {
  ag::Var tokens;         // (T * K) x d0, orthonormal rows per frame
  Index degenerate = 0;   // rows replaced by a fallback basis vector
};

// Classical Gram-Schmidt over the K rows of each frame in index order.
Orthogonalized orthogonalize(const ag::Var& raw, Index frames, Scalar tolerance = 1e-6);

// Mean over frames of sum_{i != j} (v_i . v_j)^2 / (K (K - 1)) on row-normalised tokens.
ag::Var orth_loss(const ag::Var& raw, Index frames, Index* zero_rows = nullptr);

}  // namespace primed::distiller
