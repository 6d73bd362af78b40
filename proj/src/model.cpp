#include "primed/model.hpp"

#include <set>
#include <stdexcept>

namespace primed::model {

maskhead::Config head_config(const ModelConfig& cfg) {
  maskhead::Config h;
  h.channels = cfg.channels;
  h.grids = cfg.grids;
  h.width = cfg.width;
  h.heads = cfg.heads;
  h.dense = cfg.dense;
  h.sparse_tokens = cfg.sparse_tokens;
  h.canvas = cfg.canvas;
  h.order = cfg.order;
  return h;
}

Model::Model(const ModelConfig& cfg, const Toggles& toggles, std::uint64_t seed) : cfg_(cfg), toggles_(toggles) {
  if (toggles.num_tokens < 1) throw std::invalid_argument("num_tokens must be positive");
  nn::Rng rng(seed);
  prior = semflow::PriorDecoder(store_, "semflow.prior", cfg.text_dim, cfg.prior_hidden, rng);
  fusion = semflow::FusionBlock(store_, "semflow.fusion", cfg.audio_dim, cfg.text_dim, cfg.width, cfg.heads,
                                cfg.ffn_mult, rng);
  distill = distiller::TokenDistiller(store_, "distiller", cfg.channels[3], cfg.distilled_width, toggles.num_tokens,
                                      cfg.heads, rng);
  bias = cbcf::ModalityBias(store_, "cbcf.bias", cfg.text_dim, cfg.audio_dim, cfg.channels[3], cfg.width, rng);
  stack = cbcf::Stack(store_, "cbcf", cfg.channels, cfg.width, cfg.distilled_width, cfg.heads, rng);
  head = maskhead::MaskHead(store_, "maskhead", head_config(cfg), rng);
  sasa_head = objectives::SasaHead(store_, "objectives.sasa", cfg.width, rng);
}

ForwardOutput Model::forward(const Inputs& in, bool compute_losses) const {
  const Index T = in.frames();
  if (T < 1) throw std::invalid_argument("forward: clip has no frames");
  ForwardOutput out;
  std::array<ag::Var, 4> visual;
  for (std::size_t n = 0; n < 4; ++n) {
    if (in.visual[n].rows() != T * cfg_.grids[n].positions() || in.visual[n].cols() != cfg_.channels[n])
      throw std::invalid_argument("forward: visual stage " + std::to_string(n + 1) + " has shape " +
                                  shape_str(in.visual[n].shape()));
    visual[n] = ag::constant(in.visual[n]);
  }
  auto audio = ag::constant(in.audio);
  auto text = ag::constant(in.text);
  auto t_g = ag::slice_rows(text, 0, 1);

  if (toggles_.use_prior) out.prior = prior(t_g);

  auto sem = fusion(audio, text, in.text_len);
  out.flow.audio = sem.audio;
  out.flow.text = sem.text;
  out.flow.frames = T;
  if (toggles_.use_cached_memory) {
    auto e = semflow::temporal_enhance(sem.audio, cfg_.beta);
    out.flow.memory = e.memory;
    out.flow.enhanced_audio = e.enhanced;
  } else {
    out.flow.enhanced_audio = sem.audio;
  }
  out.flow.flow = semflow::build_flow(out.flow.enhanced_audio, sem.text);
  out.flow.tokens_per_frame = out.flow.flow.rows() / T;

  if (toggles_.use_distiller) {
    out.distilled_raw = distill(visual[3], T);
    if (toggles_.orthogonalize) {
      auto o = distiller::orthogonalize(out.distilled_raw, T);
      out.distilled = o.tokens;
      out.diag.gs_degenerate = o.degenerate;
    } else {
      out.distilled = out.distilled_raw;
    }
  }

  if (out.prior) {
    out.bias = bias(out.prior->probs, t_g, audio, visual[3]);
    out.diag.bias_neutral_flags = out.bias->neutral_flags;
    if (score_override) {
      const Index flags = out.bias->neutral_flags;
      out.bias = cbcf::bias_from_scores(score_override(out.bias->scores), bias.gamma);
      out.bias->neutral_flags = flags;
    }
  }

  cbcf::StackInputs si;
  si.visual = visual;
  si.grids = cfg_.grids;
  si.flow = out.flow.flow;
  si.distilled = out.distilled;
  si.bias = out.bias;
  si.frames = T;
  out.stages = stack(si);

  std::array<ag::Var, 3> fv, fs;
  for (std::size_t n = 0; n < 3; ++n) {
    fv[n] = out.stages[n].visual;
    fs[n] = out.stages[n].semantic;
  }
  out.masks = head(visual[3], fv, fs, T, toggles_.use_dense, toggles_.use_sparse);
  out.logits = out.masks.decoded.logits;

  if (compute_losses) {
    if (in.gt.numel() != out.logits.numel()) throw std::invalid_argument("forward: gt does not match canvas");
    auto& L = out.losses;
    L.seg = objectives::seg_loss(out.logits, in.gt);
    if (toggles_.use_sasa)
      L.sasa = sasa_head(out.masks.decoded.maps[2], out.masks.decoded.map_grids[2], in.gt, out.flow.flow, T, sasa,
                         &out.diag.sasa);
    if (out.prior) L.kl = semflow::kl_loss(out.prior->probs, in.label);
    if (toggles_.use_distiller && toggles_.use_orth && toggles_.num_tokens >= 2)
      L.orth = distiller::orth_loss(out.distilled_raw, T, &out.diag.orth_zero_rows);
    L.total = objectives::total_loss(L.seg, L.sasa, L.kl, L.orth, weights);
  }
  if (hook) hook(out);
  return out;
}

// ------------------------------------------------------------------ JSON

namespace {

void check_keys(const json& j, const std::set<std::string>& known, const std::string& where) {
  if (!j.is_object()) throw std::invalid_argument(where + ": expected an object");
  for (const auto& [k, _] : j.items())
    if (!known.count(k)) throw std::invalid_argument(where + ": unknown key '" + k + "'");
}

json grid_json(Grid g) { return json::array({g.h, g.w}); }
Grid grid_from(const json& j) { return {j.at(0).get<Index>(), j.at(1).get<Index>()}; }

}  // namespace

json to_json(const ModelConfig& c) {
  json grids = json::array();
  for (const auto& g : c.grids) grids.push_back(grid_json(g));
  return {{"channels", c.channels},
          {"grids", grids},
          {"canvas", grid_json(c.canvas)},
          {"audio_dim", c.audio_dim},
          {"text_dim", c.text_dim},
          {"width", c.width},
          {"distilled_width", c.distilled_width},
          {"heads", c.heads},
          {"prior_hidden", c.prior_hidden},
          {"ffn_mult", c.ffn_mult},
          {"dense", grid_json(c.dense)},
          {"sparse_tokens", c.sparse_tokens},
          {"beta", c.beta},
          {"injection_order", c.order == maskhead::InjectionOrder::CoarseFirst ? "coarse_first" : "fine_first"}};
}

ModelConfig model_config_from_json(const json& j) {
  check_keys(j,
             {"channels", "grids", "canvas", "audio_dim", "text_dim", "width", "distilled_width", "heads",
              "prior_hidden", "ffn_mult", "dense", "sparse_tokens", "beta", "injection_order"},
             "model");
  ModelConfig c;
  if (j.contains("channels")) c.channels = j.at("channels").get<std::array<Index, 4>>();
  if (j.contains("grids"))
    for (std::size_t n = 0; n < 4; ++n) c.grids[n] = grid_from(j.at("grids").at(n));
  if (j.contains("canvas")) c.canvas = grid_from(j.at("canvas"));
  c.audio_dim = j.value("audio_dim", c.audio_dim);
  c.text_dim = j.value("text_dim", c.text_dim);
  c.width = j.value("width", c.width);
  c.distilled_width = j.value("distilled_width", c.distilled_width);
  c.heads = j.value("heads", c.heads);
  c.prior_hidden = j.value("prior_hidden", c.prior_hidden);
  c.ffn_mult = j.value("ffn_mult", c.ffn_mult);
  if (j.contains("dense")) c.dense = grid_from(j.at("dense"));
  c.sparse_tokens = j.value("sparse_tokens", c.sparse_tokens);
  c.beta = j.value("beta", c.beta);
  if (j.contains("injection_order")) {
    const auto o = j.at("injection_order").get<std::string>();
    if (o == "coarse_first") c.order = maskhead::InjectionOrder::CoarseFirst;
    else if (o == "fine_first") c.order = maskhead::InjectionOrder::FineFirst;
    else throw std::invalid_argument("model: injection_order must be coarse_first or fine_first");
  }
  if (c.width % c.heads != 0 || c.distilled_width % c.heads != 0)
    throw std::invalid_argument("model: widths must be divisible by heads");
  return c;
}

json to_json(const Toggles& t) {
  return {{"use_prior", t.use_prior},     {"use_distiller", t.use_distiller},
          {"use_sparse", t.use_sparse},   {"use_dense", t.use_dense},
          {"use_sasa", t.use_sasa},       {"use_orth", t.use_orth},
          {"use_cached_memory", t.use_cached_memory}, {"orthogonalize", t.orthogonalize},
          {"num_tokens", t.num_tokens}};
}

Toggles toggles_from_json(const json& j) {
  check_keys(j,
             {"use_prior", "use_distiller", "use_sparse", "use_dense", "use_sasa", "use_orth", "use_cached_memory",
              "orthogonalize", "num_tokens"},
             "ablation");
  Toggles t;
  t.use_prior = j.value("use_prior", t.use_prior);
  t.use_distiller = j.value("use_distiller", t.use_distiller);
  t.use_sparse = j.value("use_sparse", t.use_sparse);
  t.use_dense = j.value("use_dense", t.use_dense);
  t.use_sasa = j.value("use_sasa", t.use_sasa);
  t.use_orth = j.value("use_orth", t.use_orth);
  t.use_cached_memory = j.value("use_cached_memory", t.use_cached_memory);
  t.orthogonalize = j.value("orthogonalize", t.orthogonalize);
  t.num_tokens = j.value("num_tokens", t.num_tokens);
  if (t.num_tokens < 2 || (t.num_tokens & (t.num_tokens - 1)) != 0)
    throw std::invalid_argument("ablation: num_tokens must be a power of two >= 2");
  return t;
}

}  // namespace primed::model
