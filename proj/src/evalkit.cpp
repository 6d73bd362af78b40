#include "primed/evalkit.hpp"

#include <algorithm>
#include <cmath>
#include <set>
#include <stdexcept>

namespace primed::evalkit {

namespace {

void require_same(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape())
    throw std::invalid_argument(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                                shape_str(b.shape()));
}

Index count(const Tensor& m) {
  Index n = 0;
  for (Scalar v : m.data()) n += v != 0.0;
  return n;
}

Tensor dilate(const Tensor& m, double radius) {
  const Index H = m.dim(0), W = m.dim(1);
  const auto r = static_cast<Index>(std::floor(radius));
  Tensor out({H, W});
  for (Index y = 0; y < H; ++y)
    for (Index x = 0; x < W; ++x) {
      if (m[y * W + x] == 0.0) continue;
      for (Index dy = -r; dy <= r; ++dy)
        for (Index dx = -r; dx <= r; ++dx) {
          if (static_cast<double>(dx * dx + dy * dy) > radius * radius) continue;
          const Index yy = y + dy, xx = x + dx;
          if (yy >= 0 && yy < H && xx >= 0 && xx < W) out[yy * W + xx] = 1.0;
        }
    }
  return out;
}

Tensor frame(const Tensor& video, Index t) {
  const Index H = video.dim(1), W = video.dim(2);
  std::vector<Scalar> d(video.data().begin() + t * H * W, video.data().begin() + (t + 1) * H * W);
  return Tensor({H, W}, std::move(d));
}

}  // namespace

double jaccard(const Tensor& pred, const Tensor& gt) {
  require_same(pred, gt, "jaccard");
  Index inter = 0, uni = 0;
  for (Index i = 0; i < pred.numel(); ++i) {
    const bool p = pred[i] != 0.0, g = gt[i] != 0.0;
    inter += p && g;
    uni += p || g;
  }
  return uni == 0 ? 1.0 : static_cast<double>(inter) / static_cast<double>(uni);
}

Tensor boundary(const Tensor& m) {
  if (m.rank() != 2) throw std::invalid_argument("boundary: expects an H x W mask");
  const Index H = m.dim(0), W = m.dim(1);
  Tensor out({H, W});
  auto at = [&](Index y, Index x) { return y >= 0 && y < H && x >= 0 && x < W && m[y * W + x] != 0.0; };
  for (Index y = 0; y < H; ++y)
    for (Index x = 0; x < W; ++x)
      if (at(y, x) && (!at(y - 1, x) || !at(y + 1, x) || !at(y, x - 1) || !at(y, x + 1))) out[y * W + x] = 1.0;
  return out;
}

double boundary_f(const Tensor& pred, const Tensor& gt, double tolerance_px) {
  require_same(pred, gt, "boundary_f");
  const Tensor bp = boundary(pred), bg = boundary(gt);
  const Index np = count(bp), ng = count(bg);
  if (np == 0 && ng == 0) return 1.0;
  const Tensor dp = dilate(bp, tolerance_px), dg = dilate(bg, tolerance_px);
  Index mp = 0, mg = 0;
  for (Index i = 0; i < bp.numel(); ++i) {
    mp += bp[i] != 0.0 && dg[i] != 0.0;
    mg += bg[i] != 0.0 && dp[i] != 0.0;
  }
  const double precision = np == 0 ? 1.0 : static_cast<double>(mp) / static_cast<double>(np);
  const double recall = ng == 0 ? 1.0 : static_cast<double>(mg) / static_cast<double>(ng);
  if (precision + recall == 0.0) return 0.0;
  return 2.0 * precision * recall / (precision + recall);
}

SScore s_metric(const Tensor& pred) {
  const Tensor v = pred.rank() == 2 ? pred.reshaped({1, pred.dim(0), pred.dim(1)}) : pred;
  const Index T = v.dim(0), N = v.dim(1) * v.dim(2);
  SScore s;
  for (Index t = 0; t < T; ++t) {
    Index fg = 0;
    for (Index i = 0; i < N; ++i) fg += v[t * N + i] != 0.0;
    const Index bg = N - fg;
    if (bg == 0) {
      s.capped = true;
      s.value += std::sqrt(static_cast<double>(N));
    } else {
      s.value += std::sqrt(static_cast<double>(fg) / static_cast<double>(bg));
    }
  }
  s.value /= static_cast<double>(T);
  return s;
}

double video_jaccard(const Tensor& pred, const Tensor& gt) {
  require_same(pred, gt, "video_jaccard");
  double acc = 0;
  for (Index t = 0; t < pred.dim(0); ++t) acc += jaccard(frame(pred, t), frame(gt, t));
  return acc / static_cast<double>(pred.dim(0));
}

double video_boundary_f(const Tensor& pred, const Tensor& gt, double tolerance_px) {
  require_same(pred, gt, "video_boundary_f");
  double acc = 0;
  for (Index t = 0; t < pred.dim(0); ++t) acc += boundary_f(frame(pred, t), frame(gt, t), tolerance_px);
  return acc / static_cast<double>(pred.dim(0));
}

MetricReport aggregate(const std::string& split, const std::vector<SampleMetrics>& samples) {
  MetricReport r;
  r.split = split;
  r.per_sample = samples;
  if (samples.empty()) return r;
  double j = 0, f = 0, s = 0;
  for (const auto& m : samples) {
    j += m.J;
    f += m.F;
    s += m.S;
  }
  const double n = static_cast<double>(samples.size());
  r.J = 100.0 * j / n;
  r.F = 100.0 * f / n;
  r.JF = (r.J + r.F) / 2.0;
  if (split == "null") {
    r.S = s / n;
    r.degenerate = true;
  }
  return r;
}

MetricReport mix(const MetricReport& seen, const MetricReport& unseen) {
  MetricReport r;
  r.split = "mix";
  r.J = (seen.J + unseen.J) / 2.0;
  r.F = (seen.F + unseen.F) / 2.0;
  r.JF = (r.J + r.F) / 2.0;
  return r;
}

std::map<std::string, MetricReport> aggregate_by_split(const std::vector<SampleMetrics>& samples,
                                                       const std::vector<std::string>& known_splits) {
  const std::set<std::string> known(known_splits.begin(), known_splits.end());
  std::map<std::string, std::vector<SampleMetrics>> groups;
  for (const auto& s : samples) {
    if (!known.count(s.split)) throw std::invalid_argument("unknown split tag: " + s.split);
    groups[s.split].push_back(s);
  }
  std::map<std::string, MetricReport> out;
  for (const auto& [split, g] : groups) out[split] = aggregate(split, g);
  if (out.count("seen") && out.count("unseen")) out["mix"] = mix(out["seen"], out["unseen"]);
  return out;
}

json to_json(const MetricReport& r) {
  json per = json::array();
  for (const auto& m : r.per_sample) {
    json e{{"id", m.id}, {"split", m.split}, {"J", m.J}, {"F", m.F}};
    e["S"] = m.S;
    if (m.s_capped) e["S_capped"] = true;
    per.push_back(e);
  }
  json j{{"split", r.split}, {"J", r.J}, {"F", r.F}, {"JF", r.JF}};
  j["S"] = r.S ? json(*r.S) : json(nullptr);
  if (r.degenerate) j["degenerate"] = true;
  j["per_sample"] = per;
  return j;
}

MetricReport report_from_json(const json& j) {
  MetricReport r;
  r.split = j.at("split").get<std::string>();
  r.J = j.at("J").get<double>();
  r.F = j.at("F").get<double>();
  r.JF = j.at("JF").get<double>();
  if (!j.at("S").is_null()) r.S = j.at("S").get<double>();
  r.degenerate = j.value("degenerate", false);
  for (const auto& e : j.at("per_sample")) {
    SampleMetrics m;
    m.id = e.at("id").get<std::string>();
    m.split = e.at("split").get<std::string>();
    m.J = e.at("J").get<double>();
    m.F = e.at("F").get<double>();
    m.S = e.at("S").get<double>();
    m.s_capped = e.value("S_capped", false);
    r.per_sample.push_back(m);
  }
  return r;
}

}  // namespace primed::evalkit
