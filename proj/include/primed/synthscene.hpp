#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "primed/tensor.hpp"

// Deterministic audio-visual-text toy benchmark and the frozen encoder stand-ins.
//
// Scenes hold 3-4 coloured shapes moving inside their own quadrant. Every
// colour has a sound class, so audio evidence is visually groundable, and
// colours fall into two families ("warm", "cool") that joint expressions use.
namespace primed::synth {

namespace fs = std::filesystem;
using json = nlohmann::json;

enum class ShapeKind { Circle, Square, Triangle, Diamond, Cross };
enum class Template { Audio, Visual, Joint, Null };

std::string to_string(ShapeKind s);
std::string to_string(Template t);
ShapeKind shape_from_string(const std::string& s);
Template template_from_string(const std::string& s);

struct ColorInfo {
  const char* name;
  std::array<double, 3> rgb;
  int family;  // 0 = warm, 1 = cool
};
const std::vector<ColorInfo>& palette();
const char* family_word(int family);
int num_sound_classes();

struct Trajectory {
  double x0 = 0, y0 = 0;  // centre at frame 0, pixels
  double vx = 0, vy = 0;  // pixels per frame
};

struct SoundInterval {
  int begin = 0;  // seconds, half-open [begin, end)
  int end = 0;
};

struct SceneObject {
  ShapeKind shape = ShapeKind::Circle;
  int color = 0;
  double radius = 8;
  Trajectory trajectory;
  std::vector<SoundInterval> sounding;
  int sound_class = 0;
};

struct SceneSpec {
  std::uint64_t seed = 0;
  int num_frames = 4;
  int height = 64;
  int width = 64;
  std::vector<SceneObject> objects;
  Template referring_template = Template::Null;
  std::optional<int> target;
  std::vector<std::string> words;  // instantiated referring expression
  bool audio_conflict = false;     // a non-target object is audible and the expression is visual
};

void validate(const SceneSpec& scene);
json to_json(const SceneSpec& scene);
SceneSpec scene_from_json(const json& j);

// p = [p_A, p_V, p_AV].
struct SoftLabel {
  std::array<double, 3> p{1.0 / 3, 1.0 / 3, 1.0 / 3};
  std::string source = "template";
};

void validate(const SoftLabel& label);
SoftLabel template_label(Template t);

// One record per line: {"id": str, "p": [pA, pV, pAV], "source": str}.
std::map<std::string, SoftLabel> read_soft_labels_jsonl(const fs::path& path);
void write_soft_labels_jsonl(const fs::path& path, const std::map<std::string, SoftLabel>& labels);

struct GenerationConfig {
  std::uint64_t seed = 0;
  int num_frames = 4;
  int height = 64;
  int width = 64;
  // Split name -> per-template counts. Splits named "null" hold only null samples.
  std::map<std::string, std::map<Template, int>> splits;
  std::vector<ShapeKind> seen_shapes{ShapeKind::Circle, ShapeKind::Square, ShapeKind::Triangle};
  std::vector<ShapeKind> unseen_shapes{ShapeKind::Diamond, ShapeKind::Cross};
  double pixel_noise = 0.02;
  bool write_features = false;

  int total() const;
};

// Accepts {"train": 240, ...} (default template mix per split name) or
// {"train": {"audio": 80, ...}}. Unknown keys are errors.
GenerationConfig generation_config_from_json(const json& j);
json to_json(const GenerationConfig& cfg);
std::map<Template, int> default_template_counts(const std::string& split, int count);

SceneSpec make_scene(const GenerationConfig& cfg, std::uint64_t sample_seed, Template t, bool unseen_shapes);

struct Rendered {
  Tensor frames;  // T x 3 x H x W, float32-representable
  Tensor masks;   // T x H x W in {0,1}
};
Rendered render(const SceneSpec& scene, double pixel_noise);
bool shape_contains(ShapeKind shape, double dx, double dy, double radius);

// T x num_sound_classes indicator of which classes sound in each second.
Tensor audio_events(const SceneSpec& scene);

struct ManifestEntry {
  std::string id;
  std::string split;
  Template referring_template = Template::Null;
  bool audio_conflict = false;
};

struct Manifest {
  GenerationConfig config;
  std::vector<ManifestEntry> samples;

  std::vector<ManifestEntry> in_split(const std::string& split) const;
};

json to_json(const Manifest& m);
Manifest manifest_from_json(const json& j);

struct Sample {
  std::string id;
  std::string split;
  SceneSpec scene;
  Tensor frames;
  Tensor audio;  // event matrix, T x classes
  Tensor masks;
  SoftLabel label;
};

Sample generate_sample(const GenerationConfig& cfg, const std::string& split, int index, Template t);
std::uint64_t sample_seed(std::uint64_t base, const std::string& split, int index);

Manifest gen_dataset(const GenerationConfig& cfg, const fs::path& out_dir);
Manifest load_manifest(const fs::path& dataset_dir);
Sample load_sample(const fs::path& dataset_dir, const std::string& id);
void write_sample(const fs::path& dataset_dir, const Sample& s);

// ---------------------------------------------------------------- encoders

struct EncoderConfig {
  std::uint64_t seed = 20240601;
  std::array<Index, 4> channels{32, 64, 128, 256};
  Index audio_dim = 64;
  Index text_dim = 64;
  Index max_text_len = 12;
  double audio_noise = 0.05;
};

struct TextEncoding {
  Tensor tokens;  // max_text_len x text_dim, rows >= length are zero
  Index length = 0;
};

const std::vector<std::string>& vocabulary();

// Stage maps are stored channel-last: T x H_n x W_n x C_n.
class Encoders {
 public:
  explicit Encoders(EncoderConfig cfg = {});

  const EncoderConfig& config() const { return cfg_; }

  std::array<Tensor, 4> encode_visual(const Tensor& frames) const;
  Tensor encode_audio(const Tensor& events, std::uint64_t noise_seed) const;
  Tensor encode_audio(const Tensor& events, std::uint64_t noise_seed, double sigma) const;
  TextEncoding encode_text(const std::vector<std::string>& words) const;

  const Tensor& visual_projection(int stage) const { return visual_proj_[static_cast<std::size_t>(stage)]; }
  const Tensor& audio_codebook() const { return codebook_; }
  const Tensor& sentence_slot() const { return slot_; }
  const Tensor& word_embeddings() const { return words_; }

 private:
  EncoderConfig cfg_;
  std::array<Tensor, 4> visual_proj_;  // 3 x C_n
  Tensor codebook_;                    // classes x audio_dim
  Tensor slot_;                        // text_dim
  Tensor words_;                       // vocab x text_dim
};

struct FeatureBundle {
  std::array<Tensor, 4> visual;
  Tensor audio;  // T x d_A
  Tensor text;   // L_max x d_T
  Index text_len = 0;
  Tensor gt_masks;  // T x H x W
  SoftLabel label;

  Index frames() const { return audio.dim(0); }
  Tensor global_text() const;  // first row of text
};

FeatureBundle build_features(const Encoders& enc, const Sample& s);

double cosine(const Tensor& a, const Tensor& b);

}  // namespace primed::synth
