#pragma once

#include <array>
#include <optional>

#include "primed/nn.hpp"

// Stage-wise bidirectional cross-attention between visual tokens and the
// semantic flow, with a prior-weighted logit bias on visual keys at the top
// fused stage.
namespace primed::cbcf {

struct Grid {
  Index h = 0, w = 0;
  Index positions() const { return h * w; }
};

struct BiasField {
  ag::Var scores;  // (T * M4) x 1, clamped unified scores
  ag::Var bias;    // (T * M4) x 1, gamma * logit(scores)
  Index neutral_flags = 0;  // zero-norm vectors whose similarity was set to 0.5
};

inline constexpr Scalar kScoreClamp = 1e-4;

// b = gamma * log(P / (1 - P)) after clamping P into [eps, 1 - eps].
BiasField bias_from_scores(const ag::Var& scores, const ag::Var& gamma);

class ModalityBias {
 public:
  ModalityBias() = default;
  ModalityBias(nn::ParamStore& store, const std::string& name, Index text_dim, Index audio_dim, Index visual_dim,
               Index width, nn::Rng& rng);

  // probs 1 x 3 [p_A, p_V, p_AV]; t_g 1 x d_T; audio T x d_A; visual (T * M4) x C4.
  BiasField operator()(const ag::Var& probs, const ag::Var& t_g, const ag::Var& audio, const ag::Var& visual) const;

  nn::Linear text_proj, audio_proj, visual_proj;
  ag::Var gamma;
};

// Resizes a (T * M4) x 1 bias to a T x M_n key-bias matrix by nearest neighbour.
ag::Var bias_to_keys(const ag::Var& bias, Index frames, Grid from, Grid to);

struct StageOutput {
  ag::Var visual;    // (T * M_n) x C_n, V_fused
  ag::Var semantic;  // (T * N_s) x d, S_fused
};

class Stage {
 public:
  Stage() = default;
  Stage(nn::ParamStore& store, const std::string& name, Index channels, Index width, Index distilled_width,
        Index heads, nn::Rng& rng);

  // distilled may be undefined (distiller removed). key_bias is T x M_n or undefined.
  StageOutput operator()(const ag::Var& visual, const ag::Var& semantic, const ag::Var& distilled,
                         const ag::Var& key_bias, Index frames) const;

  nn::Linear in_proj, out_proj;
  nn::LayerNorm norm_v1, norm_s1, norm_v2, norm_s2, norm_v3, norm_s3;
  nn::MultiHeadAttention v_from_s1, s_from_v1, v_from_dis, s_from_dis, v_from_s2, s_from_v2;
};

struct StackInputs {
  std::array<ag::Var, 4> visual;  // stage maps as (T * M_n) x C_n tokens
  std::array<Grid, 4> grids;
  ag::Var flow;       // (T * N_s) x d
  ag::Var distilled;  // (T * K) x d0 or undefined
  std::optional<BiasField> bias;
  Index frames = 0;
};

class Stack {
 public:
  Stack() = default;
  Stack(nn::ParamStore& store, const std::string& name, const std::array<Index, 4>& channels, Index width,
        Index distilled_width, Index heads, nn::Rng& rng);

  std::array<StageOutput, 3> operator()(const StackInputs& in) const;

  std::array<Stage, 3> stages;
  std::array<nn::Linear, 2> modulate;  // C_n -> C_{n+1}
};

}  // namespace primed::cbcf
