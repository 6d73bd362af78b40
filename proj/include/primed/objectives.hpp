#pragma once

#include "primed/autograd.hpp"
#include "primed/cbcf.hpp"
#include "primed/nn.hpp"

namespace primed::objectives {

using cbcf::Grid;

// logits and gt are T x H x W (any layout with T leading). Per-frame mean BCE
// plus soft Dice, averaged over frames.
ag::Var seg_loss(const ag::Var& logits, const Tensor& gt);

struct SasaConfig {
  Grid grid{64, 64};
  Index negatives = 10;
  Scalar temperature = 0.07;
};

struct SasaStats {
  Index valid_frames = 0;
  Index skipped_frames = 0;
};

// Contrastive loss of one frame on already projected and normalised tokens.
// tokens: N x d grid tokens, anchor: 1 x d, mask: N entries in {0,1}.
ag::Var sasa_frame(const ag::Var& tokens, const ag::Var& anchor, const std::vector<bool>& foreground, Index negatives,
                   Scalar temperature);

// Indices of the k background tokens most similar to the anchor; ties go to
// the lowest index.
std::vector<Index> hard_negatives(const Tensor& similarity, const std::vector<bool>& foreground, Index k);

class SasaHead {
 public:
  SasaHead() = default;
  SasaHead(nn::ParamStore& store, const std::string& name, Index width, nn::Rng& rng);

  // fpn: (T * fpn positions) x d; gt: T x H x W; flow: (T * N_s) x d.
  ag::Var operator()(const ag::Var& fpn, Grid fpn_grid, const Tensor& gt, const ag::Var& flow, Index frames,
                     const SasaConfig& cfg, SasaStats* stats = nullptr) const;

  nn::Linear proj;
};

// Nearest-neighbour resize of a T x H x W binary mask.
Tensor resize_mask(const Tensor& gt, Grid to);

struct LossWeights {
  Scalar sasa = 5.0;
  Scalar kl = 1.0;
  Scalar orth = 1.0;
};

// Undefined components count as zero.
ag::Var total_loss(const ag::Var& seg, const ag::Var& sasa, const ag::Var& kl, const ag::Var& orth,
                   const LossWeights& w);

}  // namespace primed::objectives
