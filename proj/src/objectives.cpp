#include "primed/objectives.hpp"

#include <algorithm>
#include <numeric>
#include <stdexcept>

namespace primed::objectives {

ag::Var seg_loss(const ag::Var& logits, const Tensor& gt) {
  if (logits.numel() != gt.numel()) throw std::invalid_argument("seg_loss: logits and gt differ in size");
  if (!all_finite(logits.value())) throw std::domain_error("seg_loss: non-finite logits");
  const Index T = gt.dim(0);
  const Index pixels = gt.numel() / T;
  for (Scalar v : gt.data())
    if (v != 0.0 && v != 1.0) throw std::invalid_argument("seg_loss: gt must be binary");
  auto x = ag::reshape(logits, {T, pixels});
  auto y = ag::constant(gt.reshaped({T, pixels}));
  auto bce = ag::mean(ag::sub(ag::softplus(x), ag::mul(x, y)));
  auto p = ag::sigmoid(x);
  auto inter = ag::row_sum(ag::mul(p, y));
  auto denom = ag::add(ag::row_sum(p), ag::add_scalar(ag::row_sum(y), 1.0));
  auto dice = ag::scale(ag::div(ag::add_scalar(ag::scale(inter, 2.0), 1.0), denom), -1.0);
  return ag::add(bce, ag::add_scalar(ag::mean(dice), 1.0));
}

std::vector<Index> hard_negatives(const Tensor& similarity, const std::vector<bool>& foreground, Index k) {
  std::vector<Index> bg;
  for (Index i = 0; i < static_cast<Index>(foreground.size()); ++i)
    if (!foreground[static_cast<std::size_t>(i)]) bg.push_back(i);
  const auto take = static_cast<std::ptrdiff_t>(std::min<Index>(k, static_cast<Index>(bg.size())));
  std::partial_sort(bg.begin(), bg.begin() + take, bg.end(), [&](Index a, Index b) {
    if (similarity[a] != similarity[b]) return similarity[a] > similarity[b];
    return a < b;
  });
  bg.resize(static_cast<std::size_t>(take));
  return bg;
}

ag::Var sasa_frame(const ag::Var& tokens, const ag::Var& anchor, const std::vector<bool>& foreground, Index negatives,
                   Scalar temperature) {
  if (static_cast<Index>(foreground.size()) != tokens.rows()) throw std::invalid_argument("sasa: mask size mismatch");
  std::vector<Index> fg;
  for (Index i = 0; i < tokens.rows(); ++i)
    if (foreground[static_cast<std::size_t>(i)]) fg.push_back(i);
  if (fg.empty()) return ag::Var();
  if (static_cast<Index>(fg.size()) == tokens.rows()) return ag::constant(Tensor::scalar(0.0));

  auto proto = ag::l2_normalize_rows(ag::group_mean(ag::gather_rows(tokens, fg), static_cast<Index>(fg.size())));
  auto pos = ag::rowwise_dot(anchor, proto);  // 1 x 1

  Tensor sim({tokens.rows()});
  {
    const Tensor& z = tokens.value();
    const Tensor& a = anchor.value();
    const Index d = tokens.cols();
    for (Index i = 0; i < tokens.rows(); ++i) {
      Scalar s = 0;
      for (Index c = 0; c < d; ++c) s += z[i * d + c] * a[c];
      sim[i] = s;
    }
  }
  const auto neg_idx = hard_negatives(sim, foreground, negatives);
  auto neg = ag::matmul_nt(ag::gather_rows(tokens, neg_idx), anchor);  // k x 1
  auto logits = ag::scale(ag::reshape(ag::concat_rows({pos, neg}), {1, 1 + static_cast<Index>(neg_idx.size())}),
                          1.0 / temperature);
  return ag::sub(ag::logsumexp_rows(logits), ag::scale(pos, 1.0 / temperature));
}

SasaHead::SasaHead(nn::ParamStore& store, const std::string& name, Index width, nn::Rng& rng)
    : proj(store, name + ".proj", width, width, rng) {}

Tensor resize_mask(const Tensor& gt, Grid to) {
  const Index T = gt.dim(0), H = gt.dim(1), W = gt.dim(2);
  if (H == to.h && W == to.w) return gt.reshaped({T * H * W, 1});
  return ag::resample(gt.reshaped({T * H * W, 1}), T, ag::nearest_resize_map(H, W, to.h, to.w));
}

ag::Var SasaHead::operator()(const ag::Var& fpn, Grid fpn_grid, const Tensor& gt, const ag::Var& flow, Index frames,
                             const SasaConfig& cfg, SasaStats* stats) const {
  if (gt.rank() != 3 || gt.dim(0) != frames) throw std::invalid_argument("sasa: gt must be T x H x W");
  // The projection is affine and bilinear weights sum to one, so projecting
  // before resizing equals projecting the resized map.
  auto z = ag::l2_normalize_rows(
      ag::resample(proj(fpn), frames, ag::bilinear_map(fpn_grid.h, fpn_grid.w, cfg.grid.h, cfg.grid.w)));
  const Index per_frame = flow.rows() / frames;
  auto anchors = ag::l2_normalize_rows(proj(ag::group_mean(flow, per_frame)));
  const Tensor mask = resize_mask(gt, cfg.grid);
  const Index N = cfg.grid.positions();

  std::vector<ag::Var> losses;
  SasaStats st;
  for (Index f = 0; f < frames; ++f) {
    std::vector<bool> fg(static_cast<std::size_t>(N));
    for (Index i = 0; i < N; ++i) fg[static_cast<std::size_t>(i)] = mask[f * N + i] != 0.0;
    auto l = sasa_frame(ag::slice_rows(z, f * N, (f + 1) * N), ag::slice_rows(anchors, f, f + 1), fg, cfg.negatives,
                        cfg.temperature);
    if (!l) {
      ++st.skipped_frames;
      continue;
    }
    ++st.valid_frames;
    losses.push_back(ag::reshape(l, {1, 1}));
  }
  if (stats) *stats = st;
  if (losses.empty()) return ag::constant(Tensor::scalar(0.0));
  return ag::mean(ag::concat_rows(losses));
}

ag::Var total_loss(const ag::Var& seg, const ag::Var& sasa, const ag::Var& kl, const ag::Var& orth,
                   const LossWeights& w) {
  if (w.sasa < 0 || w.kl < 0 || w.orth < 0) throw std::invalid_argument("total_loss: negative weight");
  auto check = [](const ag::Var& v, const char* name) {
    if (v && v.value()[0] < -1e-9) throw std::logic_error(std::string("total_loss: negative component ") + name);
  };
  check(seg, "seg");
  check(sasa, "sasa");
  check(kl, "kl");
  check(orth, "orth");
  ag::Var total = seg;
  if (sasa && w.sasa != 0) total = ag::add(total, ag::scale(sasa, w.sasa));
  if (kl && w.kl != 0) total = ag::add(total, ag::scale(kl, w.kl));
  if (orth && w.orth != 0) total = ag::add(total, ag::scale(orth, w.orth));
  return total;
}

}  // namespace primed::objectives
