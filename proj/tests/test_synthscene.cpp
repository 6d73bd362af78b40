#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <set>

#include "primed/io.hpp"
#include "primed/synthscene.hpp"

using namespace primed;
using namespace primed::synth;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  auto p = fs::temp_directory_path() / ("primed_synth_" + name);
  fs::remove_all(p);
  return p;
}

std::string slurp(const fs::path& p) { return io::read_text(p); }

GenerationConfig small_config() {
  GenerationConfig c;
  c.splits["train"] = default_template_counts("train", 20);
  c.splits["unseen"] = default_template_counts("unseen", 6);
  c.splits["null"] = default_template_counts("null", 6);
  return c;
}

bool sounds_at_all(const SceneObject& o) { return !o.sounding.empty(); }

}  // namespace

TEST_CASE("generation is byte-identical for a fixed seed") {
  const auto a = scratch("det_a"), b = scratch("det_b");
  gen_dataset(small_config(), a);
  gen_dataset(small_config(), b);
  std::size_t files = 0;
  for (const auto& e : fs::recursive_directory_iterator(a)) {
    if (!e.is_regular_file()) continue;
    const auto rel = fs::relative(e.path(), a);
    REQUIRE(fs::exists(b / rel));
    CHECK(slurp(e.path()) == slurp(b / rel));
    ++files;
  }
  CHECK(files > 32 * 5);
}

TEST_CASE("manifest lists every sample with its split") {
  const auto dir = scratch("count");
  GenerationConfig c = generation_config_from_json({{"splits", {{"train", 240}, {"val", 60}}}});
  const auto m = gen_dataset(c, dir);
  CHECK(m.samples.size() == 300);
  CHECK(m.in_split("train").size() == 240);
  CHECK(m.in_split("val").size() == 60);
  const auto loaded = load_manifest(dir);
  CHECK(loaded.samples.size() == 300);
  std::set<std::string> dirs;
  for (const auto& e : fs::directory_iterator(dir))
    if (e.is_directory()) dirs.insert(e.path().filename().string());
  CHECK(dirs.size() == 300);
  for (const auto& s : loaded.samples) CHECK(dirs.count(s.id) == 1);
}

TEST_CASE("default template mix") {
  const auto train = default_template_counts("train", 240);
  CHECK(train.at(Template::Audio) == 72);
  CHECK(train.at(Template::Visual) == 72);
  CHECK(train.at(Template::Joint) == 72);
  CHECK(train.at(Template::Null) == 24);
  const auto val = default_template_counts("val", 61);
  CHECK(val.at(Template::Audio) + val.at(Template::Visual) + val.at(Template::Joint) == 61);
  CHECK(default_template_counts("null", 9).at(Template::Null) == 9);
}

TEST_CASE("generation rejects bad counts and unwritable output") {
  CHECK_THROWS(generation_config_from_json({{"splits", {{"train", 0}}}}));
  CHECK_THROWS(generation_config_from_json({{"splits", {{"train", -3}}}}));
  CHECK_THROWS(generation_config_from_json({{"colour", 1}}));
  CHECK_THROWS(generation_config_from_json({{"splits", {{"null", {{"audio", 2}}}}}}));
  const auto file = scratch("blocker");
  io::write_text(file, "x");
  CHECK_THROWS(gen_dataset(small_config(), file / "sub"));
}

TEST_CASE("null samples have empty masks and no target") {
  GenerationConfig c;
  for (int i = 0; i < 30; ++i) {
    const Sample s = generate_sample(c, "null", i, Template::Null);
    CHECK_FALSE(s.scene.target.has_value());
    for (Scalar v : s.masks.data()) REQUIRE(v == 0.0);
  }
}

TEST_CASE("every referred target is uniquely identified by its template evidence") {
  GenerationConfig c;
  for (auto t : {Template::Audio, Template::Visual, Template::Joint}) {
    for (int i = 0; i < 40; ++i) {
      const Sample s = generate_sample(c, "train", i, t);
      REQUIRE(s.scene.target.has_value());
      const auto& objs = s.scene.objects;
      const int tgt = *s.scene.target;
      Index fg = 0;
      for (Scalar v : s.masks.data()) fg += v != 0.0;
      CHECK(fg > 0);
      if (t == Template::Audio) {
        for (int k = 0; k < static_cast<int>(objs.size()); ++k) CHECK(sounds_at_all(objs[k]) == (k == tgt));
      } else if (t == Template::Visual) {
        const std::string named = s.scene.words[s.scene.words.size() == 5 ? 4 : 1];
        int sounding_distractors = 0;
        for (int k = 0; k < static_cast<int>(objs.size()); ++k) {
          CHECK((palette()[objs[k].color].name == named) == (k == tgt));
          sounding_distractors += k != tgt && sounds_at_all(objs[k]);
        }
        CHECK(sounding_distractors >= 1);
        CHECK(s.scene.audio_conflict);
      } else {
        const int family = palette()[objs[tgt].color].family;
        CHECK(s.scene.words[1 + (s.scene.words[1] == "sounding")] == family_word(family));
        int audio_only = 0, visual_only = 0;
        for (int k = 0; k < static_cast<int>(objs.size()); ++k) {
          const bool fam = palette()[objs[k].color].family == family;
          CHECK((fam && sounds_at_all(objs[k])) == (k == tgt));
          audio_only += !fam && sounds_at_all(objs[k]);
          visual_only += k != tgt && fam;
        }
        CHECK(audio_only >= 1);
        CHECK(visual_only >= 1);
      }
    }
  }
}

TEST_CASE("template labels put their mass on the declared modality") {
  CHECK(template_label(Template::Audio).p[0] == doctest::Approx(0.8));
  CHECK(template_label(Template::Visual).p[1] == doctest::Approx(0.8));
  CHECK(template_label(Template::Joint).p[2] == doctest::Approx(0.8));
  for (auto t : {Template::Audio, Template::Visual, Template::Joint, Template::Null})
    CHECK_NOTHROW(validate(template_label(t)));
}

TEST_CASE("unseen split draws held-out shapes only") {
  GenerationConfig c;
  const std::set<ShapeKind> held(c.unseen_shapes.begin(), c.unseen_shapes.end());
  for (int i = 0; i < 20; ++i) {
    const auto unseen = generate_sample(c, "unseen", i, Template::Joint);
    const auto seen = generate_sample(c, "seen", i, Template::Joint);
    for (const auto& o : unseen.scene.objects) CHECK(held.count(o.shape) == 1);
    for (const auto& o : seen.scene.objects) CHECK(held.count(o.shape) == 0);
  }
}

TEST_CASE("sounding intervals lie inside the clip and scenes round-trip") {
  GenerationConfig c;
  c.num_frames = 7;
  for (int i = 0; i < 20; ++i) {
    const auto s = generate_sample(c, "train", i, static_cast<Template>(i % 4));
    for (const auto& o : s.scene.objects)
      for (const auto& iv : o.sounding) {
        CHECK(iv.begin >= 0);
        CHECK(iv.end <= 7);
      }
    const auto back = scene_from_json(to_json(s.scene));
    CHECK(to_json(back) == to_json(s.scene));
  }
}

TEST_CASE("scene validation") {
  SceneSpec s;
  s.referring_template = Template::Audio;
  CHECK_THROWS(validate(s));  // non-null without target
  s.objects.push_back({});
  s.target = 0;
  CHECK_NOTHROW(validate(s));
  s.objects[0].sounding.push_back({2, 9});
  CHECK_THROWS(validate(s));
  s.objects[0].sounding = {};
  s.num_frames = 0;
  CHECK_THROWS(validate(s));
}

TEST_CASE("soft-label JSONL round trip and validation") {
  const auto dir = scratch("labels");
  fs::create_directories(dir);
  std::map<std::string, SoftLabel> labels{{"a", {{0.2, 0.3, 0.5}, "file"}}, {"b", {{1, 0, 0}, "file"}}};
  write_soft_labels_jsonl(dir / "l.jsonl", labels);
  const auto back = read_soft_labels_jsonl(dir / "l.jsonl");
  REQUIRE(back.size() == 2);
  CHECK(back.at("a").p == labels.at("a").p);
  CHECK(back.at("b").source == "file");
  io::write_text(dir / "bad.jsonl", "{\"id\": \"x\", \"p\": [0.5, 0.4, 0.4], \"source\": \"file\"}\n");
  CHECK_THROWS(read_soft_labels_jsonl(dir / "bad.jsonl"));
}

TEST_CASE("sample files follow the array codec") {
  const auto dir = scratch("layout");
  GenerationConfig c;
  const auto s = generate_sample(c, "train", 3, Template::Audio);
  write_sample(dir, s);
  for (const char* f : {"frames.bin", "audio.bin", "mask.bin", "text.json", "label.json"}) CHECK(fs::exists(dir / s.id / f));
  CHECK(fs::file_size(dir / s.id / "frames.bin") == 4u * 3 * 64 * 64 * 4);
  CHECK(fs::file_size(dir / s.id / "mask.bin") == 4u * 64 * 64);
  const auto back = load_sample(dir, s.id);
  CHECK(back.frames == s.frames);
  CHECK(back.masks == s.masks);
  CHECK(back.audio == s.audio);
  CHECK(back.scene.words == s.scene.words);
}

// ------------------------------------------------------------------ encoders

TEST_CASE("encode_visual stage shapes and zero input") {
  Encoders enc;
  Tensor black({2, 3, 64, 64});
  const auto maps = enc.encode_visual(black);
  const Index sizes[4] = {16, 8, 4, 2};
  for (std::size_t n = 0; n < 4; ++n) {
    CHECK(maps[n].shape() == Shape{2, sizes[n], sizes[n], enc.config().channels[n]});
    for (Scalar v : maps[n].data()) REQUIRE(v == 0.0);
  }
  CHECK_THROWS(enc.encode_visual(Tensor({1, 3, 48, 64})));
}

TEST_CASE("encode_visual is frame-local") {
  Encoders enc;
  GenerationConfig c;
  const auto s = generate_sample(c, "train", 0, Template::Visual);
  const auto before = enc.encode_visual(s.frames);
  Tensor flipped = s.frames;
  flipped.at({2, 1, 10, 20}) = 1.0 - flipped.at({2, 1, 10, 20});
  const auto after = enc.encode_visual(flipped);
  for (std::size_t n = 0; n < 4; ++n) {
    const Index per_frame = before[n].numel() / 4;
    for (Index t = 0; t < 4; ++t) {
      bool changed = false;
      for (Index i = t * per_frame; i < (t + 1) * per_frame; ++i) changed |= before[n][i] != after[n][i];
      CHECK(changed == (t == 2));
    }
  }
}

TEST_CASE("encode_audio sums class codebook rows") {
  Encoders enc;
  const auto& book = enc.audio_codebook();
  const Index D = enc.config().audio_dim;
  Tensor silent({4, num_sound_classes()});
  const auto quiet = enc.encode_audio(silent, 1, 0.0);
  for (Scalar v : quiet.data()) CHECK(v == 0.0);

  Tensor one({4, num_sound_classes()});
  for (Index t = 0; t < 4; ++t) one.at({t, 2}) = 1.0;
  const auto a = enc.encode_audio(one, 1, 0.0);
  for (Index t = 0; t < 4; ++t)
    for (Index k = 0; k < D; ++k) CHECK(a[t * D + k] == book[2 * D + k]);

  Tensor two({4, num_sound_classes()});
  two.at({2, 0}) = 1.0;
  two.at({2, 4}) = 1.0;
  const auto b = enc.encode_audio(two, 1, 0.0);
  for (Index k = 0; k < D; ++k) CHECK(b[2 * D + k] == doctest::Approx(book[k] + book[4 * D + k]));
  for (Index k = 0; k < D; ++k) CHECK(b[1 * D + k] == 0.0);

  // Noise only on silent seconds when sigma > 0.
  const auto noisy = enc.encode_audio(silent, 9);
  double energy = 0;
  for (Scalar v : noisy.data()) energy += v * v;
  CHECK(std::sqrt(energy / static_cast<double>(noisy.numel())) == doctest::Approx(0.05).epsilon(0.3));
}

TEST_CASE("encode_text sentence slot and padding") {
  Encoders enc;
  const Index D = enc.config().text_dim;
  const auto empty = enc.encode_text({});
  CHECK(empty.length == 1);
  for (Index k = 0; k < D; ++k) CHECK(empty.tokens[k] == enc.sentence_slot()[k]);

  const auto a = enc.encode_text({"the", "red", "object"});
  const auto b = enc.encode_text({"object", "the", "red"});
  CHECK(a.length == 4);
  for (Index k = 0; k < D; ++k) CHECK(a.tokens[k] == doctest::Approx(b.tokens[k]).epsilon(1e-12));
  bool rows_differ = false;
  for (Index k = D; k < 4 * D; ++k) rows_differ |= a.tokens[k] != b.tokens[k];
  CHECK(rows_differ);
  for (Index k = 4 * D; k < a.tokens.numel(); ++k) CHECK(a.tokens[k] == 0.0);

  CHECK_THROWS(enc.encode_text({"the", "zebra"}));
  CHECK_THROWS(enc.encode_text(std::vector<std::string>(12, "the")));
}

TEST_CASE("global text cosine matches a brute-force dot product") {
  Encoders enc;
  const auto a = enc.encode_text({"the", "sounding", "object"});
  const auto b = enc.encode_text({"warm", "noise"});
  const Index D = enc.config().text_dim;
  double dot = 0, na = 0, nb = 0;
  for (Index k = 0; k < D; ++k) {
    dot += a.tokens[k] * b.tokens[k];
    na += a.tokens[k] * a.tokens[k];
    nb += b.tokens[k] * b.tokens[k];
  }
  const Tensor ga({D}, std::vector<Scalar>(a.tokens.data().begin(), a.tokens.data().begin() + D));
  const Tensor gb({D}, std::vector<Scalar>(b.tokens.data().begin(), b.tokens.data().begin() + D));
  CHECK(cosine(ga, gb) == doctest::Approx(dot / std::sqrt(na * nb)).epsilon(1e-6));
}

TEST_CASE("feature bundles are finite with halving stages") {
  Encoders enc;
  GenerationConfig c;
  const auto fb = build_features(enc, generate_sample(c, "val", 1, Template::Joint));
  for (std::size_t n = 0; n < 4; ++n) CHECK(all_finite(fb.visual[n]));
  for (std::size_t n = 0; n + 1 < 4; ++n) CHECK(fb.visual[n].dim(1) == 2 * fb.visual[n + 1].dim(1));
  CHECK(all_finite(fb.audio));
  CHECK(fb.frames() == 4);
  CHECK(fb.global_text().numel() == enc.config().text_dim);
}
