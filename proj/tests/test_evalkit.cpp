#include <doctest.h>

#include <random>

#include "primed/evalkit.hpp"

using namespace primed;
using namespace primed::evalkit;

namespace {

Tensor mask_from_bits(unsigned bits, Index h, Index w) {
  Tensor m({h, w});
  for (Index i = 0; i < h * w; ++i) m[i] = (bits >> i) & 1u ? 1.0 : 0.0;
  return m;
}

Tensor square(Index H, Index W, Index y0, Index x0, Index size) {
  Tensor m({H, W});
  for (Index y = y0; y < y0 + size; ++y)
    for (Index x = x0; x < x0 + size; ++x) m[y * W + x] = 1.0;
  return m;
}

struct Pixel {
  Index y, x;
};

// Foreground pixels with a 4-neighbour outside the mask.
std::vector<Pixel> oracle_boundary(const Tensor& m) {
  const Index H = m.dim(0), W = m.dim(1);
  auto fg = [&](Index y, Index x) { return y >= 0 && y < H && x >= 0 && x < W && m[y * W + x] != 0.0; };
  std::vector<Pixel> out;
  for (Index y = 0; y < H; ++y)
    for (Index x = 0; x < W; ++x)
      if (fg(y, x) && !(fg(y - 1, x) && fg(y + 1, x) && fg(y, x - 1) && fg(y, x + 1))) out.push_back({y, x});
  return out;
}

// Fraction of `from` pixels within Euclidean distance `tol` of some `to` pixel.
double matched(const std::vector<Pixel>& from, const std::vector<Pixel>& to, double tol) {
  if (from.empty()) return 1.0;
  Index hits = 0;
  for (const auto& p : from)
    for (const auto& q : to) {
      const double dy = static_cast<double>(p.y - q.y), dx = static_cast<double>(p.x - q.x);
      if (dy * dy + dx * dx <= tol * tol) {
        ++hits;
        break;
      }
    }
  return static_cast<double>(hits) / static_cast<double>(from.size());
}

double oracle_f(const Tensor& pred, const Tensor& gt, double tol) {
  const auto bp = oracle_boundary(pred), bg = oracle_boundary(gt);
  if (bp.empty() && bg.empty()) return 1.0;
  const double p = matched(bp, bg, tol), r = matched(bg, bp, tol);
  return p + r == 0 ? 0.0 : 2 * p * r / (p + r);
}

double oracle_j(unsigned a, unsigned b) {
  const int inter = __builtin_popcount(a & b), uni = __builtin_popcount(a | b);
  return uni == 0 ? 1.0 : static_cast<double>(inter) / uni;
}

}  // namespace

TEST_CASE("jaccard worked examples") {
  const Tensor a = square(6, 6, 1, 1, 3);
  CHECK(jaccard(a, a) == 1.0);
  CHECK(jaccard(a, square(6, 6, 4, 4, 2)) == 0.0);
  CHECK(jaccard(Tensor({4, 4}), Tensor({4, 4})) == 1.0);
  // |inter| = 2, |union| = 6.
  Tensor p({2, 4}, {1, 1, 1, 1, 0, 0, 0, 0}), g({2, 4}, {0, 0, 1, 1, 1, 1, 0, 0});
  CHECK(jaccard(p, g) == doctest::Approx(1.0 / 3).epsilon(1e-15));
  CHECK_THROWS(jaccard(p, Tensor({4, 2})));
}

TEST_CASE("exhaustive 3x3 oracle for J and boundary F") {
  std::vector<Tensor> masks;
  for (unsigned b = 0; b < 512; ++b) masks.push_back(mask_from_bits(b, 3, 3));
  Index compared = 0, mismatches = 0;
  for (unsigned a = 0; a < 512; ++a)
    for (unsigned b = 0; b < 512; ++b) {
      const double j = jaccard(masks[a], masks[b]);
      const double f = boundary_f(masks[a], masks[b], 1.0);
      mismatches += j != oracle_j(a, b);
      mismatches += std::abs(f - oracle_f(masks[a], masks[b], 1.0)) > 1e-12;
      ++compared;
    }
  CHECK(compared == (1 << 18));
  CHECK(mismatches == 0);
}

TEST_CASE("boundary F worked examples") {
  const Tensor a = square(8, 8, 2, 2, 4);
  CHECK(boundary_f(a, a) == 1.0);
  CHECK(boundary_f(Tensor({5, 5}), Tensor({5, 5})) == 1.0);
  const Tensor shifted = square(8, 8, 2, 3, 4);
  CHECK(boundary_f(shifted, a, 1.0) == 1.0);
  CHECK(boundary_f(shifted, a, 0.0) < 1.0);
  CHECK(boundary_f(Tensor({8, 8}), a) == 0.0);
  // Random masks agree with the distance oracle at larger tolerances.
  std::mt19937_64 g(3);
  for (int trial = 0; trial < 200; ++trial) {
    Tensor p({7, 9}), q({7, 9});
    for (Index i = 0; i < p.numel(); ++i) {
      p[i] = g() % 2 ? 1.0 : 0.0;
      q[i] = g() % 3 == 0 ? 1.0 : 0.0;
    }
    for (double tol : {0.0, 1.0, 1.5, 2.0, 3.0}) CHECK(boundary_f(p, q, tol) == doctest::Approx(oracle_f(p, q, tol)));
  }
}

TEST_CASE("JF is the mean of J and F") {
  std::vector<SampleMetrics> s{{"a", "seen", 0.5, 0.7, 0, false}};
  const auto r = aggregate("seen", s);
  CHECK(r.J == 50.0);
  CHECK(r.F == 70.0);
  CHECK(r.JF == 60.0);
  std::mt19937_64 g(5);
  std::uniform_real_distribution<double> u(0, 1);
  std::vector<SampleMetrics> many;
  for (int i = 0; i < 17; ++i) many.push_back({"x" + std::to_string(i), "seen", u(g), u(g), 0, false});
  const auto m = aggregate("seen", many);
  CHECK(m.JF == (m.J + m.F) / 2);
}

TEST_CASE("s metric") {
  CHECK(s_metric(Tensor({1, 10, 10})).value == 0.0);
  Tensor four({1, 10, 10});
  for (Index i = 0; i < 4; ++i) four[i * 7] = 1.0;
  CHECK(s_metric(four).value == doctest::Approx(std::sqrt(4.0 / 96.0)).epsilon(1e-15));
  CHECK(s_metric(four).value == doctest::Approx(0.2041).epsilon(1e-3));
  const auto full = s_metric(Tensor({1, 10, 10}, 1.0));
  CHECK(full.value == 10.0);
  CHECK(full.capped);
  Tensor two({2, 10, 10});
  for (Index i = 0; i < 4; ++i) two[i * 7] = 1.0;
  CHECK(s_metric(two).value == doctest::Approx(std::sqrt(4.0 / 96.0) / 2));
  CHECK_FALSE(s_metric(two).capped);
}

TEST_CASE("video metrics average frames") {
  Tensor p({2, 4, 4}), g({2, 4, 4});
  p[0] = g[0] = 1.0;            // frame 0: J = 1
  p[16] = 1.0, g[17] = 1.0;     // frame 1: J = 0
  CHECK(video_jaccard(p, g) == 0.5);
  CHECK(video_boundary_f(p, g, 0.0) == 0.5);
}

TEST_CASE("mix reproduces the published arithmetic") {
  MetricReport seen, unseen;
  seen.J = 66.0;
  seen.F = 71.5;
  unseen.J = 71.8;
  unseen.F = 74.3;
  const auto m = mix(seen, unseen);
  CHECK(m.J == doctest::Approx(68.9).epsilon(1e-12));
  CHECK(m.F == doctest::Approx(72.9).epsilon(1e-12));
  CHECK(m.split == "mix");
}

TEST_CASE("aggregate by split") {
  std::vector<SampleMetrics> s{{"a", "seen", 0.4, 0.6, 0, false},
                               {"b", "seen", 0.6, 0.8, 0, false},
                               {"c", "unseen", 1.0, 1.0, 0, false},
                               {"d", "null", 1.0, 1.0, 0.25, false}};
  const auto by = aggregate_by_split(s, {"seen", "unseen", "null"});
  CHECK(by.at("seen").J == doctest::Approx(50.0));
  CHECK(by.at("unseen").J == 100.0);
  CHECK(by.at("mix").J == doctest::Approx(75.0));
  REQUIRE(by.at("null").S.has_value());
  CHECK(*by.at("null").S == 0.25);
  CHECK(by.at("null").degenerate);
  CHECK_FALSE(by.at("seen").S.has_value());
  const auto single = aggregate("val", {s[1]});
  CHECK(single.J == doctest::Approx(60.0));
}

TEST_CASE("reports round-trip through JSON") {
  std::vector<SampleMetrics> s{{"a", "null", 0.3, 0.9, 0.123456789, true}, {"b", "null", 0.1, 0.2, 0.5, false}};
  const auto r = aggregate("null", s);
  const auto back = report_from_json(json::parse(to_json(r).dump()));
  CHECK(back.J == r.J);
  CHECK(back.F == r.F);
  CHECK(back.JF == r.JF);
  CHECK(back.S == r.S);
  CHECK(back.degenerate == r.degenerate);
  REQUIRE(back.per_sample.size() == 2);
  CHECK(back.per_sample[0].S == s[0].S);
  CHECK(back.per_sample[0].s_capped);
  CHECK(to_json(back) == to_json(r));
}
