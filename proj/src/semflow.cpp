#include "primed/semflow.hpp"

#include <stdexcept>

namespace primed::semflow {

PriorDecoder::PriorDecoder(nn::ParamStore& store, const std::string& name, Index text_dim, Index hidden, nn::Rng& rng)
    : fc1(store, name + ".fc1", text_dim, hidden, rng), fc2(store, name + ".fc2", hidden, 3, rng) {}

ModalityPrior PriorDecoder::operator()(const ag::Var& t_g) const {
  if (!all_finite(t_g.value())) throw std::domain_error("prior decoder: non-finite global text token");
  ModalityPrior out;
  out.logits = fc2(ag::relu(fc1(t_g)));
  out.probs = ag::softmax_rows(out.logits);
  return out;
}

ag::Var kl_loss(const ag::Var& probs, const std::array<double, 3>& target) {
  if (probs.numel() != 3) throw std::invalid_argument("kl_loss: prior must hold three probabilities");
  Scalar entropy_term = 0;
  for (double p : target)
    if (p > 0) entropy_term += p * std::log(p);
  auto q = ag::constant(Tensor({1, 3}, {target[0], target[1], target[2]}));
  auto log_p = ag::log(ag::clamp(ag::reshape(probs, {1, 3}), 1e-8, 1.0));
  return ag::add_scalar(ag::scale(ag::sum(ag::mul(q, log_p)), -1.0), entropy_term);
}

FusionBlock::FusionBlock(nn::ParamStore& store, const std::string& name, Index audio_dim, Index text_dim,
                         Index width, Index heads, Index ffn_mult, nn::Rng& rng)
    : audio_proj(store, name + ".audio_proj", audio_dim, width, rng),
      text_proj(store, name + ".text_proj", text_dim, width, rng),
      attn(store, name + ".attn", width, width, width, heads, rng),
      norm1(store, name + ".norm1", width),
      norm2(store, name + ".norm2", width),
      ffn(store, name + ".ffn", width, width * ffn_mult, width, rng) {}

FusedSemantics FusionBlock::operator()(const ag::Var& audio, const ag::Var& text, Index text_len) const {
  const Index T = audio.rows();
  if (T == 0 || text_len <= 0) throw std::invalid_argument("fuse_semantics: empty audio or text sequence");
  if (text_len > text.rows()) throw std::invalid_argument("fuse_semantics: text length exceeds buffer");
  auto x = ag::concat_rows({audio_proj(audio), text_proj(ag::slice_rows(text, 0, text_len))});
  x = norm1(ag::add(x, attn(x, x, 1)));
  x = norm2(ag::add(x, ffn(x)));
  return {ag::slice_rows(x, 0, T), ag::slice_rows(x, T, T + text_len)};
}

ag::Var cached_memory(const ag::Var& audio) {
  const Index T = audio.rows(), d = audio.cols();
  if (T < 1) throw std::invalid_argument("cached_memory: need at least one frame");
  Tensor mem({T, d});
  std::vector<Scalar> prefix(static_cast<std::size_t>(d), 0.0);
  const Tensor& s = audio.value();
  for (Index i = 0; i < T; ++i) {
    if (i > 0)
      for (Index c = 0; c < d; ++c) mem[i * d + c] = prefix[static_cast<std::size_t>(c)] / static_cast<Scalar>(i);
    for (Index c = 0; c < d; ++c) prefix[static_cast<std::size_t>(c)] += s[i * d + c];
  }
  return ag::custom(std::move(mem), {audio}, [T, d](ag::Node& self) {
    Tensor* g = ag::input_grad(self, 0);
    if (!g) return;
    // dS[j] = sum_{i > j} dC[i] / i, a suffix sum.
    std::vector<Scalar> suffix(static_cast<std::size_t>(d), 0.0);
    for (Index j = T - 1; j >= 0; --j) {
      for (Index c = 0; c < d; ++c) (*g)[j * d + c] += suffix[static_cast<std::size_t>(c)];
      if (j > 0)
        for (Index c = 0; c < d; ++c) suffix[static_cast<std::size_t>(c)] += self.grad[j * d + c] / static_cast<Scalar>(j);
    }
  });
}

Enhanced temporal_enhance(const ag::Var& audio, double beta) {
  Enhanced out;
  out.memory = cached_memory(audio);
  out.enhanced = ag::sub(ag::scale(audio, beta + 1.0), ag::scale(out.memory, beta));
  return out;
}

ag::Var build_flow(const ag::Var& enhanced_audio, const ag::Var& text) {
  if (enhanced_audio.cols() != text.cols()) throw std::invalid_argument("build_flow: width mismatch");
  return ag::tile_rows(ag::concat_rows({enhanced_audio, text}), enhanced_audio.rows());
}

}  // namespace primed::semflow
