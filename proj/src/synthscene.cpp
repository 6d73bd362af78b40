#include "primed/synthscene.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>
#include <set>
#include <sstream>
#include <stdexcept>

#include "primed/io.hpp"

namespace primed::synth {

namespace {

using Rng = std::mt19937_64;

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

std::uint64_t fnv1a(const std::string& s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

int uniform_int(Rng& rng, int lo, int hi) { return std::uniform_int_distribution<int>(lo, hi)(rng); }
double uniform_real(Rng& rng, double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(rng); }

template <typename T>
const T& pick(Rng& rng, const std::vector<T>& v) {
  return v[static_cast<std::size_t>(uniform_int(rng, 0, static_cast<int>(v.size()) - 1))];
}

const std::vector<std::vector<std::string>>& audio_phrasings() {
  static const std::vector<std::vector<std::string>> p{
      {"the", "object", "making", "a", "sound"},
      {"the", "sounding", "object"},
      {"the", "thing", "that", "is", "making", "noise"}};
  return p;
}

// "@" is replaced by a colour word.
const std::vector<std::vector<std::string>>& visual_phrasings() {
  static const std::vector<std::vector<std::string>> p{
      {"the", "@", "object"}, {"the", "@", "one"}, {"the", "object", "that", "is", "@"}};
  return p;
}

// "@" is replaced by a family word.
const std::vector<std::vector<std::string>>& joint_phrasings() {
  static const std::vector<std::vector<std::string>> p{
      {"the", "@", "object", "making", "a", "sound"},
      {"the", "sounding", "@", "object"},
      {"the", "@", "thing", "that", "is", "making", "noise"}};
  return p;
}

std::vector<std::string> instantiate(const std::vector<std::string>& phrasing, const std::string& fill) {
  std::vector<std::string> out = phrasing;
  for (auto& w : out)
    if (w == "@") w = fill;
  return out;
}

std::vector<int> colors_in_family(int family) {
  std::vector<int> out;
  for (std::size_t i = 0; i < palette().size(); ++i)
    if (palette()[i].family == family) out.push_back(static_cast<int>(i));
  return out;
}

SoundInterval random_interval(Rng& rng, int frames) {
  const int min_len = std::max(1, (frames + 1) / 2);
  const int len = uniform_int(rng, min_len, frames);
  const int begin = uniform_int(rng, 0, frames - len);
  return {begin, begin + len};
}

std::map<Template, int> largest_remainder(int count, const std::vector<std::pair<Template, double>>& weights) {
  double total = 0;
  for (const auto& [_, w] : weights) total += w;
  std::map<Template, int> out;
  std::vector<std::pair<double, std::size_t>> rema;
  int assigned = 0;
  for (std::size_t i = 0; i < weights.size(); ++i) {
    const double exact = count * weights[i].second / total;
    const int base = static_cast<int>(std::floor(exact));
    out[weights[i].first] = base;
    assigned += base;
    rema.emplace_back(exact - base, i);
  }
  std::stable_sort(rema.begin(), rema.end(), [](const auto& a, const auto& b) { return a.first > b.first; });
  for (std::size_t i = 0; assigned < count; ++i, ++assigned) out[weights[rema[i % rema.size()].second].first] += 1;
  return out;
}

}  // namespace

// ----------------------------------------------------------------- naming

std::string to_string(ShapeKind s) {
  switch (s) {
    case ShapeKind::Circle: return "circle";
    case ShapeKind::Square: return "square";
    case ShapeKind::Triangle: return "triangle";
    case ShapeKind::Diamond: return "diamond";
    case ShapeKind::Cross: return "cross";
  }
  return "?";
}

std::string to_string(Template t) {
  switch (t) {
    case Template::Audio: return "audio";
    case Template::Visual: return "visual";
    case Template::Joint: return "joint";
    case Template::Null: return "null";
  }
  return "?";
}

ShapeKind shape_from_string(const std::string& s) {
  for (auto k : {ShapeKind::Circle, ShapeKind::Square, ShapeKind::Triangle, ShapeKind::Diamond, ShapeKind::Cross})
    if (to_string(k) == s) return k;
  throw std::invalid_argument("unknown shape kind: " + s);
}

Template template_from_string(const std::string& s) {
  for (auto t : {Template::Audio, Template::Visual, Template::Joint, Template::Null})
    if (to_string(t) == s) return t;
  throw std::invalid_argument("unknown referring template: " + s);
}

const std::vector<ColorInfo>& palette() {
  static const std::vector<ColorInfo> p{
      {"red", {0.9, 0.1, 0.1}, 0},   {"yellow", {0.9, 0.9, 0.1}, 0}, {"pink", {0.9, 0.1, 0.9}, 0},
      {"green", {0.1, 0.9, 0.1}, 1}, {"cyan", {0.1, 0.9, 0.9}, 1},   {"blue", {0.1, 0.1, 0.9}, 1}};
  return p;
}

const char* family_word(int family) { return family == 0 ? "warm" : "cool"; }

int num_sound_classes() { return static_cast<int>(palette().size()); }

// ------------------------------------------------------------- validation

void validate(const SceneSpec& scene) {
  if (scene.num_frames < 1) throw std::invalid_argument("scene needs at least one frame");
  if (scene.height < 1 || scene.width < 1) throw std::invalid_argument("scene canvas must be non-empty");
  const bool is_null = scene.referring_template == Template::Null;
  if (is_null == scene.target.has_value())
    throw std::invalid_argument("scene target must be absent exactly when the template is null");
  if (scene.target && (*scene.target < 0 || *scene.target >= static_cast<int>(scene.objects.size())))
    throw std::invalid_argument("scene target index out of range");
  for (const auto& o : scene.objects) {
    if (o.color < 0 || o.color >= static_cast<int>(palette().size())) throw std::invalid_argument("bad colour id");
    for (const auto& iv : o.sounding)
      if (iv.begin < 0 || iv.end > scene.num_frames || iv.begin >= iv.end)
        throw std::invalid_argument("sounding interval outside [0, T)");
  }
}

void validate(const SoftLabel& label) {
  double s = 0;
  for (double v : label.p) {
    if (!(v >= 0)) throw std::invalid_argument("soft label component must be non-negative");
    s += v;
  }
  if (std::abs(s - 1.0) > 1e-6) throw std::invalid_argument("soft label must sum to 1");
}

SoftLabel template_label(Template t) {
  switch (t) {
    case Template::Audio: return {{0.8, 0.1, 0.1}, "template"};
    case Template::Visual: return {{0.1, 0.8, 0.1}, "template"};
    case Template::Joint: return {{0.1, 0.1, 0.8}, "template"};
    case Template::Null: return {{1.0 / 3, 1.0 / 3, 1.0 / 3}, "template"};
  }
  return {};
}

// ------------------------------------------------------------ JSON forms

json to_json(const SceneSpec& s) {
  json objs = json::array();
  for (const auto& o : s.objects) {
    json iv = json::array();
    for (const auto& i : o.sounding) iv.push_back({i.begin, i.end});
    objs.push_back({{"shape", to_string(o.shape)},
                    {"color", o.color},
                    {"radius", o.radius},
                    {"trajectory", {o.trajectory.x0, o.trajectory.y0, o.trajectory.vx, o.trajectory.vy}},
                    {"sounding", iv},
                    {"sound_class", o.sound_class}});
  }
  return {{"seed", s.seed},
          {"num_frames", s.num_frames},
          {"height", s.height},
          {"width", s.width},
          {"objects", objs},
          {"template", to_string(s.referring_template)},
          {"target", s.target ? json(*s.target) : json(nullptr)},
          {"words", s.words},
          {"audio_conflict", s.audio_conflict}};
}

SceneSpec scene_from_json(const json& j) {
  SceneSpec s;
  s.seed = j.at("seed").get<std::uint64_t>();
  s.num_frames = j.at("num_frames").get<int>();
  s.height = j.at("height").get<int>();
  s.width = j.at("width").get<int>();
  for (const auto& o : j.at("objects")) {
    SceneObject obj;
    obj.shape = shape_from_string(o.at("shape").get<std::string>());
    obj.color = o.at("color").get<int>();
    obj.radius = o.at("radius").get<double>();
    const auto tr = o.at("trajectory").get<std::vector<double>>();
    obj.trajectory = {tr.at(0), tr.at(1), tr.at(2), tr.at(3)};
    for (const auto& iv : o.at("sounding")) obj.sounding.push_back({iv.at(0).get<int>(), iv.at(1).get<int>()});
    obj.sound_class = o.at("sound_class").get<int>();
    s.objects.push_back(obj);
  }
  s.referring_template = template_from_string(j.at("template").get<std::string>());
  if (!j.at("target").is_null()) s.target = j.at("target").get<int>();
  s.words = j.at("words").get<std::vector<std::string>>();
  s.audio_conflict = j.at("audio_conflict").get<bool>();
  validate(s);
  return s;
}

std::map<std::string, SoftLabel> read_soft_labels_jsonl(const fs::path& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot open soft-label file: " + path.string());
  std::map<std::string, SoftLabel> out;
  std::string line;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      const json j = json::parse(line);
      SoftLabel l;
      const auto p = j.at("p").get<std::vector<double>>();
      if (p.size() != 3) throw std::invalid_argument("p must have three components");
      l.p = {p[0], p[1], p[2]};
      l.source = j.at("source").get<std::string>();
      validate(l);
      out[j.at("id").get<std::string>()] = l;
    } catch (const std::exception& e) {
      throw std::runtime_error(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return out;
}

void write_soft_labels_jsonl(const fs::path& path, const std::map<std::string, SoftLabel>& labels) {
  std::ostringstream os;
  for (const auto& [id, l] : labels) os << json{{"id", id}, {"p", l.p}, {"source", l.source}}.dump() << '\n';
  io::write_text(path, os.str());
}

// ------------------------------------------------------------ generation

int GenerationConfig::total() const {
  int n = 0;
  for (const auto& [_, counts] : splits)
    for (const auto& [__, c] : counts) n += c;
  return n;
}

std::map<Template, int> default_template_counts(const std::string& split, int count) {
  if (split == "null") return {{Template::Null, count}};
  if (split == "train")
    return largest_remainder(count, {{Template::Audio, 0.3}, {Template::Visual, 0.3}, {Template::Joint, 0.3},
                                     {Template::Null, 0.1}});
  return largest_remainder(count, {{Template::Audio, 1.0}, {Template::Visual, 1.0}, {Template::Joint, 1.0}});
}

GenerationConfig generation_config_from_json(const json& j) {
  static const std::set<std::string> known{"seed",       "num_frames",    "height",      "width",         "splits",
                                           "seen_shapes", "unseen_shapes", "pixel_noise", "write_features"};
  for (const auto& [k, _] : j.items())
    if (!known.count(k)) throw std::invalid_argument("unknown generation config key: " + k);
  GenerationConfig c;
  c.seed = j.value("seed", c.seed);
  c.num_frames = j.value("num_frames", c.num_frames);
  c.height = j.value("height", c.height);
  c.width = j.value("width", c.width);
  c.pixel_noise = j.value("pixel_noise", c.pixel_noise);
  c.write_features = j.value("write_features", c.write_features);
  if (j.contains("seen_shapes")) {
    c.seen_shapes.clear();
    for (const auto& s : j.at("seen_shapes")) c.seen_shapes.push_back(shape_from_string(s.get<std::string>()));
  }
  if (j.contains("unseen_shapes")) {
    c.unseen_shapes.clear();
    for (const auto& s : j.at("unseen_shapes")) c.unseen_shapes.push_back(shape_from_string(s.get<std::string>()));
  }
  if (j.contains("splits")) {
    for (const auto& [name, v] : j.at("splits").items()) {
      if (v.is_number_integer()) {
        const int n = v.get<int>();
        if (n <= 0) throw std::invalid_argument("split '" + name + "' count must be positive");
        c.splits[name] = default_template_counts(name, n);
      } else {
        std::map<Template, int> counts;
        int total = 0;
        for (const auto& [t, n] : v.items()) {
          const int cnt = n.get<int>();
          if (cnt < 0) throw std::invalid_argument("split '" + name + "' has a negative template count");
          counts[template_from_string(t)] = cnt;
          total += cnt;
        }
        if (total <= 0) throw std::invalid_argument("split '" + name + "' count must be positive");
        c.splits[name] = counts;
      }
    }
  }
  if (c.num_frames < 1) throw std::invalid_argument("num_frames must be >= 1");
  for (const auto& [name, counts] : c.splits)
    if (name == "null")
      for (const auto& [t, n] : counts)
        if (t != Template::Null && n > 0) throw std::invalid_argument("the null split may only hold null samples");
  return c;
}

json to_json(const GenerationConfig& c) {
  json splits = json::object();
  for (const auto& [name, counts] : c.splits) {
    json cj = json::object();
    for (const auto& [t, n] : counts) cj[to_string(t)] = n;
    splits[name] = cj;
  }
  json seen = json::array(), unseen = json::array();
  for (auto s : c.seen_shapes) seen.push_back(to_string(s));
  for (auto s : c.unseen_shapes) unseen.push_back(to_string(s));
  return {{"seed", c.seed},         {"num_frames", c.num_frames},   {"height", c.height},
          {"width", c.width},       {"splits", splits},             {"seen_shapes", seen},
          {"unseen_shapes", unseen}, {"pixel_noise", c.pixel_noise}, {"write_features", c.write_features}};
}

SceneSpec make_scene(const GenerationConfig& cfg, std::uint64_t seed, Template t, bool unseen_shapes) {
  Rng rng(seed);
  SceneSpec s;
  s.seed = seed;
  s.num_frames = cfg.num_frames;
  s.height = cfg.height;
  s.width = cfg.width;
  s.referring_template = t;
  const auto& shapes = unseen_shapes ? cfg.unseen_shapes : cfg.seen_shapes;
  if (shapes.empty()) throw std::invalid_argument("no shape kinds available for scene");

  const int num_colors = static_cast<int>(palette().size());
  std::vector<int> colors(static_cast<std::size_t>(num_colors));
  std::iota(colors.begin(), colors.end(), 0);
  std::shuffle(colors.begin(), colors.end(), rng);

  // Roles: (colour, sounding). The first entry is the target for non-null templates.
  struct Role {
    int color;
    bool sounding;
  };
  std::vector<Role> roles;
  int target_shape_twin = -1;
  Template form = t;
  if (t == Template::Null) form = static_cast<Template>(uniform_int(rng, 0, 2));

  switch (form) {
    case Template::Audio: {
      const int n = uniform_int(rng, 3, 4);
      for (int i = 0; i < n; ++i) roles.push_back({colors[static_cast<std::size_t>(i)], t != Template::Null && i == 0});
      target_shape_twin = 1;  // silent distractor sharing the target's shape
      s.words = pick(rng, audio_phrasings());
      break;
    }
    case Template::Visual: {
      const int n = uniform_int(rng, 3, 4);
      // Null variant names a colour absent from the scene.
      const int named = colors[0];
      const int offset = t == Template::Null ? 1 : 0;
      for (int i = 0; i < n; ++i) roles.push_back({colors[static_cast<std::size_t>(i + offset)], i == 1});
      s.words = instantiate(pick(rng, visual_phrasings()), palette()[static_cast<std::size_t>(named)].name);
      s.audio_conflict = t != Template::Null;
      break;
    }
    case Template::Joint: {
      const int family = uniform_int(rng, 0, 1);
      auto same = colors_in_family(family);
      auto other = colors_in_family(1 - family);
      std::shuffle(same.begin(), same.end(), rng);
      std::shuffle(other.begin(), other.end(), rng);
      if (t == Template::Null) {
        // The named family never sounds; the other family may.
        roles = {{same[0], false}, {other[0], true}, {same[1], false}};
        if (uniform_int(rng, 0, 1)) roles.push_back({other[1], false});
      } else {
        roles = {{same[0], true}, {other[0], true}, {same[1], false}};
        if (uniform_int(rng, 0, 1)) roles.push_back({other[1], false});
      }
      s.words = instantiate(pick(rng, joint_phrasings()), family_word(family));
      break;
    }
    case Template::Null: break;
  }

  const double cell = std::min(s.height, s.width) / 2.0;
  std::vector<int> cells{0, 1, 2, 3};
  std::shuffle(cells.begin(), cells.end(), rng);
  std::vector<SceneObject> objects;
  for (std::size_t i = 0; i < roles.size(); ++i) {
    SceneObject o;
    o.shape = pick(rng, shapes);
    if (static_cast<int>(i) == target_shape_twin) o.shape = objects[0].shape;
    o.color = roles[i].color;
    o.sound_class = o.color;
    o.radius = uniform_real(rng, 0.25 * cell, 0.34 * cell);
    const double jitter = 0.06 * cell;
    const int c = cells[i];
    const double cx = (c % 2 + 0.5) * cell + uniform_real(rng, -jitter, jitter);
    const double cy = (c / 2 + 0.5) * cell + uniform_real(rng, -jitter, jitter);
    const double room = std::max(0.0, cell / 2 - o.radius - jitter - 1.0);
    const double vmax = std::min(0.04 * cell, room / std::max(1, s.num_frames - 1));
    o.trajectory = {cx, cy, uniform_real(rng, -vmax, vmax), uniform_real(rng, -vmax, vmax)};
    if (roles[i].sounding) o.sounding.push_back(random_interval(rng, s.num_frames));
    objects.push_back(o);
  }

  // Shuffle object order so the target index is not always 0.
  std::vector<std::size_t> order(objects.size());
  std::iota(order.begin(), order.end(), 0);
  std::shuffle(order.begin(), order.end(), rng);
  for (std::size_t i = 0; i < order.size(); ++i) {
    s.objects.push_back(objects[order[i]]);
    if (t != Template::Null && order[i] == 0) s.target = static_cast<int>(i);
  }
  validate(s);
  return s;
}

bool shape_contains(ShapeKind shape, double dx, double dy, double r) {
  switch (shape) {
    case ShapeKind::Circle: return dx * dx + dy * dy <= r * r;
    case ShapeKind::Square: return std::abs(dx) <= 0.85 * r && std::abs(dy) <= 0.85 * r;
    case ShapeKind::Triangle: return dy >= -r && dy <= 0.7 * r && std::abs(dx) <= (dy + r) / 1.7;
    case ShapeKind::Diamond: return std::abs(dx) + std::abs(dy) <= r;
    case ShapeKind::Cross:
      return (std::abs(dx) <= r / 3 && std::abs(dy) <= r) || (std::abs(dy) <= r / 3 && std::abs(dx) <= r);
  }
  return false;
}

Rendered render(const SceneSpec& s, double pixel_noise) {
  validate(s);
  const Index T = s.num_frames, H = s.height, W = s.width;
  Rendered r{Tensor({T, 3, H, W}), Tensor({T, H, W})};
  Rng rng(splitmix64(s.seed ^ 0x5eedf00dULL));
  std::normal_distribution<double> noise(0.0, 1.0);
  constexpr double background = 0.1;
  for (Index t = 0; t < T; ++t) {
    for (Index y = 0; y < H; ++y)
      for (Index x = 0; x < W; ++x) {
        std::array<double, 3> px{background, background, background};
        bool is_target = false;
        for (std::size_t k = 0; k < s.objects.size(); ++k) {
          const auto& o = s.objects[k];
          const double cx = o.trajectory.x0 + o.trajectory.vx * static_cast<double>(t);
          const double cy = o.trajectory.y0 + o.trajectory.vy * static_cast<double>(t);
          if (shape_contains(o.shape, static_cast<double>(x) + 0.5 - cx, static_cast<double>(y) + 0.5 - cy, o.radius)) {
            px = palette()[static_cast<std::size_t>(o.color)].rgb;
            is_target = s.target && static_cast<int>(k) == *s.target;
          }
        }
        for (Index c = 0; c < 3; ++c) {
          double v = px[static_cast<std::size_t>(c)];
          if (pixel_noise > 0) v += pixel_noise * noise(rng);
          r.frames.at({t, c, y, x}) = std::clamp(v, 0.0, 1.0);
        }
        r.masks.at({t, y, x}) = is_target ? 1.0 : 0.0;
      }
  }
  io::round_to_float32(r.frames);
  return r;
}

Tensor audio_events(const SceneSpec& s) {
  Tensor ev({s.num_frames, num_sound_classes()});
  for (const auto& o : s.objects)
    for (const auto& iv : o.sounding)
      for (int t = iv.begin; t < iv.end; ++t) ev.at({t, o.sound_class}) = 1.0;
  return ev;
}

std::uint64_t sample_seed(std::uint64_t base, const std::string& split, int index) {
  return splitmix64(splitmix64(base) ^ fnv1a(split) ^ (static_cast<std::uint64_t>(index) * 0x9e3779b97f4a7c15ULL));
}

Sample generate_sample(const GenerationConfig& cfg, const std::string& split, int index, Template t) {
  Sample s;
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%05d", index);
  s.id = split + "_" + buf;
  s.split = split;
  s.scene = make_scene(cfg, sample_seed(cfg.seed, split, index), t, split == "unseen");
  auto rendered = render(s.scene, cfg.pixel_noise);
  s.frames = std::move(rendered.frames);
  s.masks = std::move(rendered.masks);
  s.audio = audio_events(s.scene);
  s.label = template_label(t == Template::Null ? Template::Null : t);
  return s;
}

std::vector<ManifestEntry> Manifest::in_split(const std::string& split) const {
  std::vector<ManifestEntry> out;
  for (const auto& e : samples)
    if (e.split == split) out.push_back(e);
  return out;
}

json to_json(const Manifest& m) {
  json samples = json::array();
  for (const auto& e : m.samples)
    samples.push_back({{"id", e.id},
                       {"split", e.split},
                       {"template", to_string(e.referring_template)},
                       {"audio_conflict", e.audio_conflict}});
  return {{"format_version", 1}, {"generation", to_json(m.config)}, {"samples", samples}};
}

Manifest manifest_from_json(const json& j) {
  if (j.at("format_version").get<int>() != 1) throw std::runtime_error("unsupported manifest format version");
  Manifest m;
  m.config = generation_config_from_json(j.at("generation"));
  for (const auto& e : j.at("samples"))
    m.samples.push_back({e.at("id").get<std::string>(), e.at("split").get<std::string>(),
                         template_from_string(e.at("template").get<std::string>()), e.at("audio_conflict").get<bool>()});
  return m;
}

void write_sample(const fs::path& dir, const Sample& s) {
  const fs::path d = dir / s.id;
  fs::create_directories(d);
  io::write_array(d / "frames.bin", s.frames, io::DType::Float32);
  io::write_array(d / "audio.bin", s.audio, io::DType::Float32);
  io::write_array(d / "mask.bin", s.masks, io::DType::UInt8);
  io::write_json(d / "text.json", {{"words", s.scene.words}, {"template", to_string(s.scene.referring_template)}});
  io::write_json(d / "label.json", {{"p", s.label.p}, {"source", s.label.source}});
  io::write_json(d / "scene.json", to_json(s.scene));
}

Manifest gen_dataset(const GenerationConfig& cfg, const fs::path& out) {
  if (cfg.splits.empty()) throw std::invalid_argument("generation config lists no splits");
  for (const auto& [name, counts] : cfg.splits) {
    int n = 0;
    for (const auto& [_, c] : counts) {
      if (c < 0) throw std::invalid_argument("negative count in split " + name);
      n += c;
    }
    if (n <= 0) throw std::invalid_argument("split '" + name + "' count must be positive");
  }
  std::error_code ec;
  fs::create_directories(out, ec);
  if (ec || !fs::is_directory(out)) throw std::runtime_error("output directory not writable: " + out.string());

  Manifest m;
  m.config = cfg;
  std::optional<Encoders> enc;
  if (cfg.write_features) enc.emplace();
  for (const auto& [split, counts] : cfg.splits) {
    std::vector<Template> seq;
    for (const auto& [t, n] : counts) seq.insert(seq.end(), static_cast<std::size_t>(n), t);
    Rng rng(splitmix64(cfg.seed ^ fnv1a(split)));
    std::shuffle(seq.begin(), seq.end(), rng);
    for (std::size_t i = 0; i < seq.size(); ++i) {
      Sample s = generate_sample(cfg, split, static_cast<int>(i), seq[i]);
      write_sample(out, s);
      if (enc) {
        const auto fb = build_features(*enc, s);
        const fs::path fd = out / s.id / "features";
        fs::create_directories(fd);
        for (int n = 0; n < 4; ++n)
          io::write_array(fd / ("visual" + std::to_string(n + 1) + ".bin"), fb.visual[static_cast<std::size_t>(n)],
                          io::DType::Float32);
        io::write_array(fd / "audio.bin", fb.audio, io::DType::Float32);
        io::write_array(fd / "text.bin", fb.text, io::DType::Float32);
      }
      m.samples.push_back({s.id, split, seq[i], s.scene.audio_conflict});
    }
  }
  io::write_json(out / "manifest.json", to_json(m));
  return m;
}

Manifest load_manifest(const fs::path& dir) { return manifest_from_json(io::read_json(dir / "manifest.json")); }

Sample load_sample(const fs::path& dir, const std::string& id) {
  const fs::path d = dir / id;
  Sample s;
  s.id = id;
  s.scene = scene_from_json(io::read_json(d / "scene.json"));
  s.frames = io::read_array(d / "frames.bin");
  s.audio = io::read_array(d / "audio.bin");
  s.masks = io::read_array(d / "mask.bin");
  const json label = io::read_json(d / "label.json");
  const auto p = label.at("p").get<std::vector<double>>();
  if (p.size() != 3) throw std::runtime_error("label.json: p must have three components");
  s.label = {{p[0], p[1], p[2]}, label.at("source").get<std::string>()};
  validate(s.label);
  const json text = io::read_json(d / "text.json");
  s.scene.words = text.at("words").get<std::vector<std::string>>();
  return s;
}

// ---------------------------------------------------------------- encoders

const std::vector<std::string>& vocabulary() {
  static const std::vector<std::string> v = [] {
    std::vector<std::string> w{"the",  "object", "making", "a",   "sound", "sounding", "thing",
                               "that", "is",     "noise",  "one", "warm",  "cool"};
    for (const auto& c : palette()) w.emplace_back(c.name);
    return w;
  }();
  return v;
}

Encoders::Encoders(EncoderConfig cfg) : cfg_(cfg) {
  Rng rng(cfg_.seed);
  std::normal_distribution<double> n01(0.0, 1.0);
  auto gaussian = [&](Shape shape, double std) {
    Tensor t(std::move(shape));
    for (auto& v : t.data()) v = std * n01(rng);
    return t;
  };
  for (std::size_t n = 0; n < 4; ++n) visual_proj_[n] = gaussian({3, cfg_.channels[n]}, 1.0 / std::sqrt(3.0));
  codebook_ = gaussian({num_sound_classes(), cfg_.audio_dim}, 0.5);
  slot_ = gaussian({cfg_.text_dim}, 0.5);
  words_ = gaussian({static_cast<Index>(vocabulary().size()), cfg_.text_dim}, 0.5);
}

std::array<Tensor, 4> Encoders::encode_visual(const Tensor& frames) const {
  if (frames.rank() != 4 || frames.dim(1) != 3) throw std::invalid_argument("encode_visual expects T x 3 x H x W frames");
  const Index T = frames.dim(0), H = frames.dim(2), W = frames.dim(3);
  if (H % 32 != 0 || W % 32 != 0) throw std::invalid_argument("encode_visual: H and W must be divisible by 32");
  std::array<Tensor, 4> out;
  for (std::size_t n = 0; n < 4; ++n) {
    const Index p = Index{4} << n;
    const Index h = H / p, w = W / p, C = cfg_.channels[n];
    const Tensor& proj = visual_proj_[n];
    Tensor map({T, h, w, C});
    const double inv = 1.0 / static_cast<double>(p * p);
    for (Index t = 0; t < T; ++t)
      for (Index py = 0; py < h; ++py)
        for (Index px = 0; px < w; ++px) {
          std::array<double, 3> mean{0, 0, 0};
          for (Index c = 0; c < 3; ++c) {
            double acc = 0;
            for (Index y = py * p; y < (py + 1) * p; ++y)
              for (Index x = px * p; x < (px + 1) * p; ++x) acc += frames.at({t, c, y, x});
            mean[static_cast<std::size_t>(c)] = acc * inv;
          }
          Scalar* dst = map.ptr() + ((t * h + py) * w + px) * C;
          for (Index k = 0; k < C; ++k)
            dst[k] = mean[0] * proj[0 * C + k] + mean[1] * proj[1 * C + k] + mean[2] * proj[2 * C + k];
        }
    out[n] = std::move(map);
  }
  return out;
}

Tensor Encoders::encode_audio(const Tensor& events, std::uint64_t noise_seed) const {
  return encode_audio(events, noise_seed, cfg_.audio_noise);
}

Tensor Encoders::encode_audio(const Tensor& events, std::uint64_t noise_seed, double sigma) const {
  if (events.rank() != 2 || events.dim(1) != num_sound_classes())
    throw std::invalid_argument("encode_audio expects a T x classes event matrix");
  const Index T = events.dim(0), D = cfg_.audio_dim;
  Tensor fa({T, D});
  Rng rng(splitmix64(noise_seed ^ 0xa0d10ULL));
  std::normal_distribution<double> n01(0.0, 1.0);
  for (Index t = 0; t < T; ++t) {
    for (Index c = 0; c < num_sound_classes(); ++c)
      if (events.at({t, c}) != 0.0)
        for (Index k = 0; k < D; ++k) fa[t * D + k] += codebook_[c * D + k];
    for (Index k = 0; k < D; ++k) {
      const double z = n01(rng);
      if (sigma > 0) fa[t * D + k] += sigma * z;
    }
  }
  return fa;
}

TextEncoding Encoders::encode_text(const std::vector<std::string>& words) const {
  const Index n = static_cast<Index>(words.size());
  if (n + 1 > cfg_.max_text_len)
    throw std::invalid_argument("referring expression longer than " + std::to_string(cfg_.max_text_len - 1) + " words");
  const Index D = cfg_.text_dim;
  TextEncoding enc{Tensor({cfg_.max_text_len, D}), n + 1};
  const auto& vocab = vocabulary();
  for (Index i = 0; i < n; ++i) {
    auto it = std::find(vocab.begin(), vocab.end(), words[static_cast<std::size_t>(i)]);
    if (it == vocab.end()) throw std::invalid_argument("unknown vocabulary symbol: " + words[static_cast<std::size_t>(i)]);
    const Index row = it - vocab.begin();
    for (Index k = 0; k < D; ++k) enc.tokens[(i + 1) * D + k] = words_[row * D + k];
  }
  for (Index k = 0; k < D; ++k) {
    double mean = 0;
    for (Index i = 1; i <= n; ++i) mean += enc.tokens[i * D + k];
    enc.tokens[k] = slot_[k] + (n > 0 ? mean / static_cast<double>(n) : 0.0);
  }
  return enc;
}

Tensor FeatureBundle::global_text() const {
  const Index D = text.cols();
  return Tensor({1, D}, std::vector<Scalar>(text.data().begin(), text.data().begin() + D));
}

FeatureBundle build_features(const Encoders& enc, const Sample& s) {
  FeatureBundle fb;
  fb.visual = enc.encode_visual(s.frames);
  fb.audio = enc.encode_audio(s.audio, s.scene.seed);
  auto text = enc.encode_text(s.scene.words);
  fb.text = std::move(text.tokens);
  fb.text_len = text.length;
  fb.gt_masks = s.masks;
  fb.label = s.label;
  return fb;
}

double cosine(const Tensor& a, const Tensor& b) {
  if (a.numel() != b.numel()) throw std::invalid_argument("cosine: size mismatch");
  double dot = 0, na = 0, nb = 0;
  for (Index i = 0; i < a.numel(); ++i) {
    dot += a[i] * b[i];
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  if (na == 0 || nb == 0) return 0.0;
  return dot / std::sqrt(na * nb);
}

}  // namespace primed::synth
