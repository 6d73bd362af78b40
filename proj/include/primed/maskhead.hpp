#pragma once

#include <array>

#include "primed/cbcf.hpp"

// Prompt construction/injection and a small trainable FPN-style mask decoder.
namespace primed::maskhead {

using cbcf::Grid;

enum class InjectionOrder { CoarseFirst, FineFirst };

struct Config {
  std::array<Index, 4> channels{32, 64, 128, 256};
  std::array<Grid, 4> grids{Grid{16, 16}, Grid{8, 8}, Grid{4, 4}, Grid{2, 2}};
  Index width = 64;
  Index heads = 4;
  Grid dense{16, 16};
  Index sparse_tokens = 4;
  Grid canvas{64, 64};
  InjectionOrder order = InjectionOrder::CoarseFirst;
};

struct Prompts {
  ag::Var dense;   // (T * dense positions) x d, d^(n) or E_d
  ag::Var sparse;  // (T * N_s) x d, s^(n) or E_s
};

class PromptMaker {
 public:
  PromptMaker() = default;
  PromptMaker(nn::ParamStore& store, const std::string& name, Index channels, Index width, nn::Rng& rng);

  // Increments d^(n), s^(n) from one fused stage.
  Prompts operator()(const ag::Var& fused_visual, Grid grid, const ag::Var& fused_semantic, Grid dense,
                     Index sparse_tokens, Index frames) const;

  nn::Linear conv;  // 1x1 convolution, no bias
  nn::Linear lin;
};

struct DecodeResult {
  ag::Var logits;               // (T * H) x W, reshaped to T x H x W
  std::array<ag::Var, 4> maps;  // decoder maps from coarse (index 0) to fine (index 3)
  std::array<Grid, 4> map_grids;
};

class Decoder {
 public:
  Decoder() = default;
  Decoder(nn::ParamStore& store, const std::string& name, const Config& cfg, nn::Rng& rng);

  // fused[n] is V_fused for stage n + 1; prompts[n] the injected pair for stage n + 1.
  DecodeResult operator()(const ag::Var& top_visual, const std::array<ag::Var, 3>& fused,
                          const std::array<Prompts, 3>& prompts, Index frames) const;

  Config cfg;
  nn::Linear stem;
  std::array<nn::Linear, 3> lateral;
  std::array<nn::MultiHeadAttention, 3> cross;
  std::array<nn::LayerNorm, 3> norm_a, norm_b;
  std::array<nn::Mlp, 3> mlp;
  nn::Linear head;
};

struct MaskHeadOutput {
  DecodeResult decoded;
  std::array<Prompts, 3> increments;
  std::array<Prompts, 3> injected;
};

class MaskHead {
 public:
  MaskHead() = default;
  MaskHead(nn::ParamStore& store, const std::string& name, const Config& cfg, nn::Rng& rng);

  MaskHeadOutput operator()(const ag::Var& top_visual, const std::array<ag::Var, 3>& fused_visual,
                            const std::array<ag::Var, 3>& fused_semantic, Index frames, bool use_dense,
                            bool use_sparse) const;

  // E = base + increment, per frame.
  Prompts inject(const Prompts& increment, Index frames) const;

  Config cfg;
  ag::Var dense_base;   // dense positions x d, zero-init
  ag::Var sparse_base;  // N_s x d, zero-init
  std::array<PromptMaker, 3> makers;
  Decoder decoder;
};

// Probability map for logits; binary mask at threshold 0.5.
Tensor binarize(const Tensor& logits);

}  // namespace primed::maskhead
