#include "primed/cbcf.hpp"

#include <stdexcept>

namespace primed::cbcf {

BiasField bias_from_scores(const ag::Var& scores, const ag::Var& gamma) {
  BiasField out;
  out.scores = ag::clamp(scores, kScoreClamp, 1.0 - kScoreClamp);
  auto logit = ag::sub(ag::log(out.scores), ag::log(ag::add_scalar(ag::scale(out.scores, -1.0), 1.0)));
  out.bias = ag::mul_scalar(logit, gamma);
  return out;
}

ModalityBias::ModalityBias(nn::ParamStore& store, const std::string& name, Index text_dim, Index audio_dim,
                           Index visual_dim, Index width, nn::Rng& rng)
    : text_proj(store, name + ".text_proj", text_dim, width, rng),
      audio_proj(store, name + ".audio_proj", audio_dim, width, rng),
      visual_proj(store, name + ".visual_proj", visual_dim, width, rng) {
  gamma = store.create(name + ".gamma", Tensor({1}, 1.0));
}

BiasField ModalityBias::operator()(const ag::Var& probs, const ag::Var& t_g, const ag::Var& audio,
                                   const ag::Var& visual) const {
  if (probs.numel() != 3) throw std::invalid_argument("modality_bias: prior must hold three probabilities");
  Index flags = 0;
  auto tg = ag::l2_normalize_rows(text_proj(t_g), 1e-12, &flags);
  auto a_g = ag::l2_normalize_rows(ag::group_mean(audio_proj(audio), audio.rows()), 1e-12, &flags);
  auto fv = ag::l2_normalize_rows(visual_proj(visual), 1e-12, &flags);
  auto sim_vis = ag::add_scalar(ag::scale(ag::matmul_nt(fv, tg), 0.5), 0.5);
  auto sim_aud = ag::add_scalar(ag::scale(ag::matmul_nt(fv, a_g), 0.5), 0.5);
  auto p = ag::reshape(probs, {1, 3});
  auto score = ag::add(ag::add(ag::mul_scalar(sim_vis, ag::slice_cols(p, 1, 2)),
                               ag::mul_scalar(sim_aud, ag::slice_cols(p, 0, 1))),
                       ag::mul_scalar(ag::mul(sim_vis, sim_aud), ag::slice_cols(p, 2, 3)));
  BiasField out = bias_from_scores(score, gamma);
  out.neutral_flags = flags;
  return out;
}

ag::Var bias_to_keys(const ag::Var& bias, Index frames, Grid from, Grid to) {
  auto resized = ag::resample(bias, frames, ag::nearest_resize_map(from.h, from.w, to.h, to.w));
  return ag::reshape(resized, {frames, to.positions()});
}

Stage::Stage(nn::ParamStore& store, const std::string& name, Index channels, Index width, Index distilled_width,
             Index heads, nn::Rng& rng)
    : in_proj(store, name + ".in_proj", channels, width, rng),
      out_proj(store, name + ".out_proj", width, channels, rng),
      norm_v1(store, name + ".norm_v1", width),
      norm_s1(store, name + ".norm_s1", width),
      norm_v2(store, name + ".norm_v2", width),
      norm_s2(store, name + ".norm_s2", width),
      norm_v3(store, name + ".norm_v3", width),
      norm_s3(store, name + ".norm_s3", width),
      v_from_s1(store, name + ".v_from_s1", width, width, width, heads, rng),
      s_from_v1(store, name + ".s_from_v1", width, width, width, heads, rng),
      v_from_dis(store, name + ".v_from_dis", width, distilled_width, width, heads, rng),
      s_from_dis(store, name + ".s_from_dis", width, distilled_width, width, heads, rng),
      v_from_s2(store, name + ".v_from_s2", width, width, width, heads, rng),
      s_from_v2(store, name + ".s_from_v2", width, width, width, heads, rng) {}

StageOutput Stage::operator()(const ag::Var& visual, const ag::Var& semantic, const ag::Var& distilled,
                              const ag::Var& key_bias, Index frames) const {
  if (visual.cols() != in_proj.in) throw std::invalid_argument("cbcf stage: visual channel mismatch");
  if (visual.rows() % frames != 0 || semantic.rows() % frames != 0)
    throw std::invalid_argument("cbcf stage: token counts not divisible by frames");
  if (key_bias && key_bias.numel() != visual.rows()) throw std::invalid_argument("cbcf stage: bias size mismatch");
  auto v = in_proj(visual);
  auto s = semantic;

  auto lv = norm_v1(v), ls = norm_s1(s);
  v = ag::add(v, v_from_s1(lv, ls, frames));
  s = ag::add(s, s_from_v1(ls, lv, frames, key_bias));

  if (distilled) {
    v = ag::add(v, v_from_dis(norm_v2(v), distilled, frames));
    s = ag::add(s, s_from_dis(norm_s2(s), distilled, frames));
  }

  lv = norm_v3(v);
  ls = norm_s3(s);
  v = ag::add(v, v_from_s2(lv, ls, frames));
  s = ag::add(s, s_from_v2(ls, lv, frames, key_bias));
  return {out_proj(v), s};
}

Stack::Stack(nn::ParamStore& store, const std::string& name, const std::array<Index, 4>& channels, Index width,
             Index distilled_width, Index heads, nn::Rng& rng) {
  for (std::size_t n = 0; n < 3; ++n)
    stages[n] = Stage(store, name + ".stage" + std::to_string(n + 1), channels[n], width, distilled_width, heads, rng);
  for (std::size_t n = 0; n < 2; ++n)
    modulate[n] = nn::Linear(store, name + ".modulate" + std::to_string(n + 1), channels[n], channels[n + 1], rng);
}

std::array<StageOutput, 3> Stack::operator()(const StackInputs& in) const {
  std::array<StageOutput, 3> out;
  ag::Var v = in.visual[0];
  ag::Var s = in.flow;
  for (std::size_t n = 0; n < 3; ++n) {
    if (in.grids[n].positions() * in.frames != v.rows()) throw std::invalid_argument("cbcf: stage grid mismatch");
    ag::Var key_bias;
    if (n == 2 && in.bias) key_bias = bias_to_keys(in.bias->bias, in.frames, in.grids[3], in.grids[2]);
    out[n] = stages[n](v, s, in.distilled, key_bias, in.frames);
    if (n < 2) {
      const auto& g = in.grids[n];
      if (g.h != 2 * in.grids[n + 1].h || g.w != 2 * in.grids[n + 1].w)
        throw std::invalid_argument("cbcf: stage sizes must halve");
      auto pooled = ag::resample(out[n].visual, in.frames, ag::avg_pool_map(g.h, g.w, 2));
      v = ag::add(in.visual[n + 1], modulate[n](pooled));
      s = out[n].semantic;
    }
  }
  return out;
}

}  // namespace primed::cbcf
