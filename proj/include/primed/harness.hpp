#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "primed/evalkit.hpp"
#include "primed/model.hpp"
#include "primed/synthscene.hpp"

// Configuration, optimisation, checkpoints, training/evaluation loops and the
// ablation sweep runner.
namespace primed::harness {

namespace fs = std::filesystem;
using json = nlohmann::json;

struct OptimConfig {
  double lr = 5e-5;
  double weight_decay = 0.01;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double warmup_fraction = 0.05;
  double warmup_start_factor = 0.1;
  double grad_clip = 0.0;  // global norm; 0 disables
  int epochs = 5;
  int batch = 1;
};

struct RunConfig {
  std::string dataset;
  std::string train_split = "train";
  std::string val_split = "val";
  std::string soft_labels;  // optional JSONL overriding template labels
  model::ModelConfig model;
  model::Toggles toggles;
  objectives::LossWeights weights;
  objectives::SasaConfig sasa;
  OptimConfig optim;
  std::uint64_t seed = 0;
  bool deterministic = false;
};

RunConfig run_config_from_json(const json& j);
json to_json(const RunConfig& c);
RunConfig load_run_config(const fs::path& path);

// Fills the data-dependent model fields (channels, grids, canvas, encoder widths).
void bind_to_dataset(RunConfig& cfg, const synth::GenerationConfig& gen, const synth::EncoderConfig& enc);

// Learning-rate multiplier for a 0-based step: linear warmup from the start
// factor, then cosine decay to zero.
double lr_factor(const OptimConfig& o, long step, long total_steps);

class AdamW {
 public:
  AdamW(nn::ParamStore& store, const OptimConfig& cfg);

  // Applies one update with the given learning rate; returns the pre-clip gradient norm.
  double step(double lr);

  long steps() const { return step_; }
  void set_steps(long s) { step_ = s; }
  std::map<std::string, Tensor>& first_moment() { return m_; }
  std::map<std::string, Tensor>& second_moment() { return v_; }
  const std::map<std::string, Tensor>& first_moment() const { return m_; }
  const std::map<std::string, Tensor>& second_moment() const { return v_; }

  // Rank >= 2 tensors receive weight decay.
  static bool decays(const Tensor& param) { return param.rank() >= 2; }

 private:
  nn::ParamStore& store_;
  OptimConfig cfg_;
  long step_ = 0;
  std::map<std::string, Tensor> m_, v_;
};

// --- checkpoints ---

struct CheckpointMeta {
  RunConfig config;
  int epoch = 0;
};

void save_checkpoint(const fs::path& path, const model::Model& m, const AdamW& opt, const CheckpointMeta& meta);
// Restores parameters (and optimiser state when opt is given) into an existing model.
CheckpointMeta load_checkpoint(const fs::path& path, model::Model& m, AdamW* opt = nullptr);
CheckpointMeta read_checkpoint_meta(const fs::path& path);

// --- data ---

struct Example {
  std::string id;
  std::string split;
  synth::Template referring_template = synth::Template::Null;
  bool audio_conflict = false;
  model::Inputs inputs;
};

model::Inputs make_inputs(const synth::FeatureBundle& fb);

std::vector<Example> load_examples(const fs::path& dataset, const synth::Manifest& manifest, const std::string& split,
                                   const synth::Encoders& enc,
                                   const std::map<std::string, synth::SoftLabel>& soft_labels = {});

// --- training / evaluation ---

struct EpochLog {
  int epoch = 0;
  double seg = 0, sasa = 0, kl = 0, orth = 0, total = 0;
  double val_J = 0;  // percent
};

json to_json(const EpochLog& e);

class TrainingAborted : public std::runtime_error {
 public:
  TrainingAborted(const std::string& what, json dump) : std::runtime_error(what), dump(std::move(dump)) {}
  json dump;
};

struct TrainResult {
  std::vector<EpochLog> logs;
  fs::path checkpoint;
};

struct TrainOptions {
  bool write_checkpoint = true;
  bool evaluate_val = true;
  bool verbose = true;
  long max_steps = -1;  // stop early after this many steps (tests)
};

// Trains on cfg.train_split, logs to <out>/train_log.jsonl, writes <out>/checkpoint.bin.
TrainResult train(const RunConfig& cfg, const fs::path& out, const TrainOptions& opts = {});

// Same, on preloaded data and an existing model.
TrainResult train_model(model::Model& m, const RunConfig& cfg, const std::vector<Example>& train_set,
                        const std::vector<Example>& val_set, const fs::path& out, const TrainOptions& opts = {});

// When masks_dir is set, each binarised prediction is written there as <id>.bin (uint8, T x H x W).
std::vector<evalkit::SampleMetrics> score(const model::Model& m, const std::vector<Example>& data,
                                          const fs::path& masks_dir = {});
evalkit::MetricReport evaluate_examples(const model::Model& m, const std::vector<Example>& data,
                                        const std::string& split);

// Loads the checkpoint, rebuilds the model and evaluates one split of `dataset`.
evalkit::MetricReport evaluate(const fs::path& checkpoint, const fs::path& dataset, const std::string& split,
                               const fs::path& masks_dir = {});

std::unique_ptr<model::Model> build_model(const RunConfig& cfg);

// --- ablation ---

struct Variant {
  std::string name;
  json overrides;  // keys of the "ablation" section
};

struct SweepSpec {
  std::vector<Variant> variants;
  std::vector<std::uint64_t> seeds{0, 1, 2};
  std::vector<std::string> splits{"val", "seen", "unseen", "null"};
};

SweepSpec sweep_from_json(const json& j);

struct Stat {
  double mean = 0, spread = 0;  // spread = sample standard deviation
};

struct VariantResult {
  std::string name;
  model::Toggles toggles;
  std::map<std::string, std::map<std::string, Stat>> metrics;  // split -> {J, F, S}
  Stat conflict_J;
  std::vector<json> runs;
};

struct AblationTable {
  std::vector<VariantResult> rows;
  std::vector<std::string> splits;
};

Stat summarize(const std::vector<double>& values);

AblationTable ablate(const RunConfig& base, const SweepSpec& sweep, const fs::path& out, bool verbose = true);
json to_json(const AblationTable& t);
std::string format_table(const AblationTable& t);

}  // namespace primed::harness
