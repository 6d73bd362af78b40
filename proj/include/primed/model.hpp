#pragma once

#include <array>
#include <functional>
#include <optional>

#include <json.hpp>

#include "primed/cbcf.hpp"
#include "primed/distiller.hpp"
#include "primed/maskhead.hpp"
#include "primed/objectives.hpp"
#include "primed/semflow.hpp"

// Full pipeline: semantic flow -> distilled tokens -> fused stages -> masks.
namespace primed::model {

using cbcf::Grid;
using json = nlohmann::json;

struct ModelConfig {
  std::array<Index, 4> channels{32, 64, 128, 256};
  std::array<Grid, 4> grids{Grid{16, 16}, Grid{8, 8}, Grid{4, 4}, Grid{2, 2}};
  Grid canvas{64, 64};
  Index audio_dim = 64;
  Index text_dim = 64;
  Index width = 64;            // d
  Index distilled_width = 64;  // d0
  Index heads = 4;
  Index prior_hidden = 128;
  Index ffn_mult = 4;
  Grid dense{16, 16};
  Index sparse_tokens = 4;
  Scalar beta = 1.0;
  maskhead::InjectionOrder order = maskhead::InjectionOrder::CoarseFirst;
};

struct Toggles {
  bool use_prior = true;
  bool use_distiller = true;
  bool use_sparse = true;
  bool use_dense = true;
  bool use_sasa = true;
  bool use_orth = true;
  bool use_cached_memory = true;
  bool orthogonalize = true;
  Index num_tokens = 4;
};

// Tensors consumed by the network for one clip.
struct Inputs {
  std::array<Tensor, 4> visual;  // (T * M_n) x C_n
  Tensor audio;                  // T x d_A
  Tensor text;                   // L_max x d_T
  Index text_len = 0;
  Tensor gt;                     // T x H x W
  std::array<double, 3> label{1.0 / 3, 1.0 / 3, 1.0 / 3};
  Index frames() const { return audio.rows(); }
};

struct Losses {
  ag::Var seg, sasa, kl, orth, total;
};

struct Diagnostics {
  Index gs_degenerate = 0;
  Index orth_zero_rows = 0;
  Index bias_neutral_flags = 0;
  objectives::SasaStats sasa;
};

struct ForwardOutput {
  std::optional<semflow::ModalityPrior> prior;
  semflow::SemanticFlow flow;
  ag::Var distilled_raw;
  ag::Var distilled;
  std::optional<cbcf::BiasField> bias;
  std::array<cbcf::StageOutput, 3> stages;
  maskhead::MaskHeadOutput masks;
  ag::Var logits;  // T x H x W
  Losses losses;
  Diagnostics diag;
};

// Observes every forward pass; used to assert toggle fidelity.
using ForwardHook = std::function<void(const ForwardOutput&)>;

class Model {
 public:
  Model(const ModelConfig& cfg, const Toggles& toggles, std::uint64_t seed);

  // Builds the graph; losses are computed when compute_losses is set.
  ForwardOutput forward(const Inputs& in, bool compute_losses = true) const;

  // Overrides the unified scores fed to the bias (testing hook).
  std::function<ag::Var(const ag::Var& scores)> score_override;
  ForwardHook hook;

  nn::ParamStore& params() { return store_; }
  const nn::ParamStore& params() const { return store_; }
  const ModelConfig& config() const { return cfg_; }
  const Toggles& toggles() const { return toggles_; }

  objectives::SasaConfig sasa;
  objectives::LossWeights weights;

  semflow::PriorDecoder prior;
  semflow::FusionBlock fusion;
  distiller::TokenDistiller distill;
  cbcf::ModalityBias bias;
  cbcf::Stack stack;
  maskhead::MaskHead head;
  objectives::SasaHead sasa_head;

 private:
  ModelConfig cfg_;
  Toggles toggles_;
  nn::ParamStore store_;
};

maskhead::Config head_config(const ModelConfig& cfg);

json to_json(const ModelConfig& cfg);
ModelConfig model_config_from_json(const json& j);
json to_json(const Toggles& t);
Toggles toggles_from_json(const json& j);

}  // namespace primed::model
