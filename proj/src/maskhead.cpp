#include "primed/maskhead.hpp"

#include <stdexcept>

namespace primed::maskhead {

PromptMaker::PromptMaker(nn::ParamStore& store, const std::string& name, Index channels, Index width, nn::Rng& rng)
    : conv(store, name + ".conv", channels, width, rng, false), lin(store, name + ".lin", width, width, rng) {}

Prompts PromptMaker::operator()(const ag::Var& fused_visual, Grid grid, const ag::Var& fused_semantic, Grid dense,
                                Index sparse_tokens, Index frames) const {
  Prompts p;
  p.dense = ag::resample(conv(fused_visual), frames, ag::adaptive_avg_pool_map(grid.h, grid.w, dense.h, dense.w));
  const Index per_frame = fused_semantic.rows() / frames;
  p.sparse = ag::repeat_rows(ag::group_mean(lin(fused_semantic), per_frame), sparse_tokens);
  return p;
}

Decoder::Decoder(nn::ParamStore& store, const std::string& name, const Config& c, nn::Rng& rng)
    : cfg(c), stem(store, name + ".stem", c.channels[3], c.width, rng), head(store, name + ".head", c.width, 1, rng) {
  for (std::size_t k = 0; k < 3; ++k) {
    const std::string b = name + ".block" + std::to_string(k + 1);
    const std::size_t stage = 2 - k;  // block 1 runs at the stage-3 grid
    lateral[k] = nn::Linear(store, b + ".lateral", c.channels[stage], c.width, rng);
    cross[k] = nn::MultiHeadAttention(store, b + ".cross", c.width, c.width, c.width, c.heads, rng);
    norm_a[k] = nn::LayerNorm(store, b + ".norm_a", c.width);
    norm_b[k] = nn::LayerNorm(store, b + ".norm_b", c.width);
    mlp[k] = nn::Mlp(store, b + ".mlp", c.width, c.width * 2, c.width, rng);
  }
}

DecodeResult Decoder::operator()(const ag::Var& top_visual, const std::array<ag::Var, 3>& fused,
                                 const std::array<Prompts, 3>& prompts, Index frames) const {
  DecodeResult out;
  auto x = stem(top_visual);
  out.maps[0] = x;
  out.map_grids[0] = cfg.grids[3];
  for (std::size_t k = 0; k < 3; ++k) {
    const std::size_t stage = 2 - k;
    const Grid from = cfg.grids[stage + 1], to = cfg.grids[stage];
    if (!fused[stage]) throw std::invalid_argument("decode_masks: missing fused stage " + std::to_string(stage + 1));
    const std::size_t src = cfg.order == InjectionOrder::CoarseFirst ? stage : k;
    const Prompts& pr = prompts[src];
    x = ag::add(ag::resample(x, frames, ag::nearest_resize_map(from.h, from.w, to.h, to.w)), lateral[k](fused[stage]));
    x = norm_a[k](ag::add(x, cross[k](x, pr.sparse, frames)));
    x = ag::add(x, ag::resample(pr.dense, frames, ag::adaptive_avg_pool_map(cfg.dense.h, cfg.dense.w, to.h, to.w)));
    x = norm_b[k](ag::add(x, mlp[k](x)));
    out.maps[k + 1] = x;
    out.map_grids[k + 1] = to;
  }
  const Grid fine = cfg.grids[0];
  auto logits = ag::resample(head(x), frames, ag::bilinear_map(fine.h, fine.w, cfg.canvas.h, cfg.canvas.w));
  out.logits = ag::reshape(logits, {frames, cfg.canvas.h, cfg.canvas.w});
  return out;
}

MaskHead::MaskHead(nn::ParamStore& store, const std::string& name, const Config& c, nn::Rng& rng) : cfg(c) {
  dense_base = store.create(name + ".dense_base", Tensor({c.dense.h * c.dense.w, c.width}));
  sparse_base = store.create(name + ".sparse_base", Tensor({c.sparse_tokens, c.width}));
  for (std::size_t n = 0; n < 3; ++n)
    makers[n] = PromptMaker(store, name + ".prompt" + std::to_string(n + 1), c.channels[n], c.width, rng);
  decoder = Decoder(store, name + ".decoder", c, rng);
}

Prompts MaskHead::inject(const Prompts& inc, Index frames) const {
  Prompts e;
  e.dense = ag::tile_rows(dense_base, frames);
  e.sparse = ag::tile_rows(sparse_base, frames);
  if (inc.dense) e.dense = ag::add(e.dense, inc.dense);
  if (inc.sparse) e.sparse = ag::add(e.sparse, inc.sparse);
  return e;
}

MaskHeadOutput MaskHead::operator()(const ag::Var& top_visual, const std::array<ag::Var, 3>& fused_visual,
                                    const std::array<ag::Var, 3>& fused_semantic, Index frames, bool use_dense,
                                    bool use_sparse) const {
  MaskHeadOutput out;
  for (std::size_t n = 0; n < 3; ++n)
    if (!fused_visual[n] || !fused_semantic[n])
      throw std::invalid_argument("decode_masks: missing fused stage " + std::to_string(n + 1));
  for (std::size_t n = 0; n < 3; ++n) {
    Prompts inc = makers[n](fused_visual[n], cfg.grids[n], fused_semantic[n], cfg.dense, cfg.sparse_tokens, frames);
    if (!use_dense) inc.dense = ag::Var();
    if (!use_sparse) inc.sparse = ag::Var();
    out.increments[n] = inc;
    out.injected[n] = inject(inc, frames);
  }
  out.decoded = decoder(top_visual, fused_visual, out.injected, frames);
  return out;
}

Tensor binarize(const Tensor& logits) {
  Tensor out(logits.shape());
  for (Index i = 0; i < logits.numel(); ++i) out[i] = logits[i] > 0.0 ? 1.0 : 0.0;
  return out;
}

}  // namespace primed::maskhead
