#pragma once

#include <array>

#include "primed/nn.hpp"

// Modality prior decoder, audio/text fusion block, cached-memory audio
// enhancement and the per-frame semantic flow.
namespace primed::semflow {

// logits and probs are 1 x 3, ordered [audio, visual, joint].
struct ModalityPrior {
  ag::Var logits;
  ag::Var probs;
};

class PriorDecoder {
 public:
  PriorDecoder() = default;
  PriorDecoder(nn::ParamStore& store, const std::string& name, Index text_dim, Index hidden, nn::Rng& rng);

  // t_g is 1 x d_T.
  ModalityPrior operator()(const ag::Var& t_g) const;

  nn::Linear fc1, fc2;
};

// KL(target || probs); probs clamped below at 1e-8.
ag::Var kl_loss(const ag::Var& probs, const std::array<double, 3>& target);

struct FusedSemantics {
  ag::Var audio;  // T x d
  ag::Var text;   // L x d
};

// One post-norm transformer block over [audio ; text].
class FusionBlock {
 public:
  FusionBlock() = default;
  FusionBlock(nn::ParamStore& store, const std::string& name, Index audio_dim, Index text_dim, Index width,
              Index heads, Index ffn_mult, nn::Rng& rng);

  // F_T may carry padding rows; only the first text_len rows take part.
  FusedSemantics operator()(const ag::Var& audio, const ag::Var& text, Index text_len) const;

  nn::Linear audio_proj, text_proj;
  nn::MultiHeadAttention attn;
  nn::LayerNorm norm1, norm2;
  nn::Mlp ffn;
};

// C_A[0] = 0, C_A[i] = mean(S_A[0..i-1]), computed with one prefix-sum pass.
ag::Var cached_memory(const ag::Var& audio);

struct Enhanced {
  ag::Var memory;    // C_A
  ag::Var enhanced;  // (beta + 1) S_A - beta C_A
};
Enhanced temporal_enhance(const ag::Var& audio, double beta);

// Per-frame sequence [enhanced audio ; text] replicated over frames:
// (T * (T + L)) x d.
ag::Var build_flow(const ag::Var& enhanced_audio, const ag::Var& text);

struct SemanticFlow {
  ag::Var audio;           // S_A
  ag::Var text;            // S_T
  ag::Var memory;          // C_A, undefined when the cache is off
  ag::Var enhanced_audio;  // equals S_A when the cache is off
  ag::Var flow;            // F_se
  Index frames = 0;
  Index tokens_per_frame = 0;
};

}  // namespace primed::semflow
