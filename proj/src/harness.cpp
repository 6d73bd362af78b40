#include "primed/harness.hpp"

#include <algorithm>
#include <bit>
#include <chrono>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <numbers>
#include <numeric>
#include <set>
#include <sstream>

#include "primed/io.hpp"

namespace primed::harness {

static_assert(std::endian::native == std::endian::little, "checkpoint codec assumes a little-endian host");

namespace {

void check_keys(const json& j, const std::set<std::string>& known, const std::string& where) {
  if (!j.is_object()) throw std::invalid_argument(where + ": expected an object");
  for (const auto& [k, _] : j.items())
    if (!known.count(k)) throw std::invalid_argument(where + ": unknown key '" + k + "'");
}

}  // namespace

// ------------------------------------------------------------------ config

RunConfig run_config_from_json(const json& j) {
  check_keys(j,
             {"dataset", "train_split", "val_split", "soft_labels", "model", "ablation", "loss", "optim", "seed",
              "deterministic"},
             "config");
  RunConfig c;
  c.dataset = j.value("dataset", c.dataset);
  c.train_split = j.value("train_split", c.train_split);
  c.val_split = j.value("val_split", c.val_split);
  c.soft_labels = j.value("soft_labels", c.soft_labels);
  if (j.contains("model")) c.model = model::model_config_from_json(j.at("model"));
  if (j.contains("ablation")) c.toggles = model::toggles_from_json(j.at("ablation"));
  if (j.contains("loss")) {
    const auto& l = j.at("loss");
    check_keys(l, {"sasa", "kl", "orth", "temperature", "negatives", "sasa_grid"}, "loss");
    c.weights.sasa = l.value("sasa", c.weights.sasa);
    c.weights.kl = l.value("kl", c.weights.kl);
    c.weights.orth = l.value("orth", c.weights.orth);
    c.sasa.temperature = l.value("temperature", c.sasa.temperature);
    c.sasa.negatives = l.value("negatives", c.sasa.negatives);
    if (l.contains("sasa_grid")) c.sasa.grid = {l.at("sasa_grid").at(0).get<Index>(), l.at("sasa_grid").at(1).get<Index>()};
    if (c.weights.sasa < 0 || c.weights.kl < 0 || c.weights.orth < 0)
      throw std::invalid_argument("loss: weights must be non-negative");
    if (c.sasa.temperature <= 0) throw std::invalid_argument("loss: temperature must be positive");
  }
  if (j.contains("optim")) {
    const auto& o = j.at("optim");
    check_keys(o,
               {"lr", "weight_decay", "beta1", "beta2", "eps", "warmup_fraction", "warmup_start_factor", "grad_clip",
                "epochs", "batch"},
               "optim");
    auto& p = c.optim;
    p.lr = o.value("lr", p.lr);
    p.weight_decay = o.value("weight_decay", p.weight_decay);
    p.beta1 = o.value("beta1", p.beta1);
    p.beta2 = o.value("beta2", p.beta2);
    p.eps = o.value("eps", p.eps);
    p.warmup_fraction = o.value("warmup_fraction", p.warmup_fraction);
    p.warmup_start_factor = o.value("warmup_start_factor", p.warmup_start_factor);
    p.grad_clip = o.value("grad_clip", p.grad_clip);
    p.epochs = o.value("epochs", p.epochs);
    p.batch = o.value("batch", p.batch);
    if (p.epochs < 1 || p.batch < 1) throw std::invalid_argument("optim: epochs and batch must be >= 1");
    if (p.lr <= 0) throw std::invalid_argument("optim: lr must be positive");
  }
  c.seed = j.value("seed", c.seed);
  c.deterministic = j.value("deterministic", c.deterministic);
  if (!c.toggles.use_distiller && c.toggles.use_orth && j.contains("ablation") && j.at("ablation").contains("use_orth"))
    throw std::invalid_argument("ablation: use_orth requires use_distiller");
  return c;
}

json to_json(const RunConfig& c) {
  const auto& o = c.optim;
  return {{"dataset", c.dataset},
          {"train_split", c.train_split},
          {"val_split", c.val_split},
          {"soft_labels", c.soft_labels},
          {"model", model::to_json(c.model)},
          {"ablation", model::to_json(c.toggles)},
          {"loss",
           {{"sasa", c.weights.sasa},
            {"kl", c.weights.kl},
            {"orth", c.weights.orth},
            {"temperature", c.sasa.temperature},
            {"negatives", c.sasa.negatives},
            {"sasa_grid", {c.sasa.grid.h, c.sasa.grid.w}}}},
          {"optim",
           {{"lr", o.lr},
            {"weight_decay", o.weight_decay},
            {"beta1", o.beta1},
            {"beta2", o.beta2},
            {"eps", o.eps},
            {"warmup_fraction", o.warmup_fraction},
            {"warmup_start_factor", o.warmup_start_factor},
            {"grad_clip", o.grad_clip},
            {"epochs", o.epochs},
            {"batch", o.batch}}},
          {"seed", c.seed},
          {"deterministic", c.deterministic}};
}

RunConfig load_run_config(const fs::path& path) {
  try {
    return run_config_from_json(io::read_json(path));
  } catch (const std::invalid_argument& e) {
    throw std::invalid_argument(path.string() + ": " + e.what());
  }
}

void bind_to_dataset(RunConfig& cfg, const synth::GenerationConfig& gen, const synth::EncoderConfig& enc) {
  auto& m = cfg.model;
  m.channels = enc.channels;
  m.audio_dim = enc.audio_dim;
  m.text_dim = enc.text_dim;
  m.canvas = {gen.height, gen.width};
  for (std::size_t n = 0; n < 4; ++n) {
    const Index p = Index{4} << n;
    m.grids[n] = {gen.height / p, gen.width / p};
  }
}

// --------------------------------------------------------------- optimiser

double lr_factor(const OptimConfig& o, long step, long total) {
  const long warm = std::max<long>(1, std::lround(o.warmup_fraction * static_cast<double>(total)));
  if (step < warm)
    return o.warmup_start_factor + (1.0 - o.warmup_start_factor) * static_cast<double>(step) / static_cast<double>(warm);
  const long span = std::max<long>(1, total - warm);
  const double progress = std::min(1.0, static_cast<double>(step - warm) / static_cast<double>(span));
  return 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

AdamW::AdamW(nn::ParamStore& store, const OptimConfig& cfg) : store_(store), cfg_(cfg) {}

double AdamW::step(double lr) {
  double sq = 0;
  for (auto& [_, p] : store_.params())
    if (p.node()->has_grad())
      for (Scalar g : p.grad().data()) sq += g * g;
  const double norm = std::sqrt(sq);
  const double clip = cfg_.grad_clip > 0 && norm > cfg_.grad_clip ? cfg_.grad_clip / norm : 1.0;

  ++step_;
  const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(step_));
  const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(step_));
  for (auto& [name, p] : store_.params()) {
    if (!p.node()->has_grad()) continue;
    Tensor& w = p.mutable_value();
    const Tensor& g = p.grad();
    auto [mit, fresh] = m_.try_emplace(name, w.shape());
    auto vit = v_.try_emplace(name, w.shape()).first;
    Tensor& m = mit->second;
    Tensor& v = vit->second;
    const bool decay = decays(w);
    for (Index i = 0; i < w.numel(); ++i) {
      const double gi = g[i] * clip;
      m[i] = cfg_.beta1 * m[i] + (1.0 - cfg_.beta1) * gi;
      v[i] = cfg_.beta2 * v[i] + (1.0 - cfg_.beta2) * gi * gi;
      double update = (m[i] / bc1) / (std::sqrt(v[i] / bc2) + cfg_.eps);
      if (decay) update += cfg_.weight_decay * w[i];
      w[i] -= lr * update;
    }
  }
  return norm;
}

// -------------------------------------------------------------- checkpoint

namespace {

constexpr char kMagic[8] = {'P', 'R', 'I', 'M', 'E', 'D', 'C', 'K'};
constexpr std::uint32_t kVersion = 1;

class Writer {
 public:
  template <typename T>
  void put(const T& v) {
    const auto* p = reinterpret_cast<const char*>(&v);
    buf_.insert(buf_.end(), p, p + sizeof(T));
  }
  void bytes(const void* data, std::size_t n) {
    const auto* p = static_cast<const char*>(data);
    buf_.insert(buf_.end(), p, p + n);
  }
  void str(const std::string& s) {
    put<std::uint64_t>(s.size());
    bytes(s.data(), s.size());
  }
  void tensor(const Tensor& t) {
    put<std::uint32_t>(static_cast<std::uint32_t>(t.rank()));
    for (Index d : t.shape()) put<std::int64_t>(d);
    bytes(t.ptr(), static_cast<std::size_t>(t.numel()) * sizeof(Scalar));
  }
  const std::vector<char>& data() const { return buf_; }

 private:
  std::vector<char> buf_;
};

class Reader {
 public:
  explicit Reader(std::string data, std::string path) : data_(std::move(data)), path_(std::move(path)) {}
  template <typename T>
  T get() {
    T v;
    need(sizeof(T));
    std::memcpy(&v, data_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return v;
  }
  std::string str() {
    const auto n = get<std::uint64_t>();
    need(n);
    std::string s = data_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  Tensor tensor() {
    const auto rank = get<std::uint32_t>();
    if (rank > 8) fail("implausible tensor rank");
    Shape shape;
    for (std::uint32_t i = 0; i < rank; ++i) shape.push_back(get<std::int64_t>());
    Tensor t(shape);
    const std::size_t n = static_cast<std::size_t>(t.numel()) * sizeof(Scalar);
    need(n);
    std::memcpy(t.ptr(), data_.data() + pos_, n);
    pos_ += n;
    return t;
  }
  bool done() const { return pos_ == data_.size(); }
  [[noreturn]] void fail(const std::string& what) const { throw std::runtime_error(path_ + ": " + what); }

 private:
  void need(std::size_t n) const {
    if (pos_ + n > data_.size()) fail("truncated checkpoint");
  }
  std::string data_;
  std::string path_;
  std::size_t pos_ = 0;
};

struct ParsedCheckpoint {
  CheckpointMeta meta;
  std::map<std::string, Tensor> params;
  long opt_step = 0;
  std::map<std::string, Tensor> m, v;
};

ParsedCheckpoint parse_checkpoint(const fs::path& path) {
  Reader r(io::read_text(path), path.string());
  char magic[8];
  for (char& c : magic) c = r.get<char>();
  if (std::memcmp(magic, kMagic, 8) != 0) r.fail("not a checkpoint file");
  const auto version = r.get<std::uint32_t>();
  if (version != kVersion) r.fail("unsupported checkpoint version " + std::to_string(version));
  ParsedCheckpoint out;
  const json header = json::parse(r.str());
  out.meta.config = run_config_from_json(header.at("config"));
  out.meta.epoch = header.at("epoch").get<int>();
  const auto n = r.get<std::uint64_t>();
  for (std::uint64_t i = 0; i < n; ++i) {
    std::string name = r.str();
    out.params.emplace(std::move(name), r.tensor());
  }
  out.opt_step = r.get<std::int64_t>();
  for (auto* moments : {&out.m, &out.v}) {
    const auto k = r.get<std::uint64_t>();
    for (std::uint64_t i = 0; i < k; ++i) {
      std::string name = r.str();
      moments->emplace(std::move(name), r.tensor());
    }
  }
  if (!r.done()) r.fail("trailing bytes after checkpoint payload");
  return out;
}

}  // namespace

void save_checkpoint(const fs::path& path, const model::Model& m, const AdamW& opt, const CheckpointMeta& meta) {
  Writer w;
  w.bytes(kMagic, 8);
  w.put<std::uint32_t>(kVersion);
  w.str(json{{"config", to_json(meta.config)}, {"epoch", meta.epoch}}.dump());
  w.put<std::uint64_t>(m.params().params().size());
  for (const auto& [name, p] : m.params().params()) {
    w.str(name);
    w.tensor(p.value());
  }
  w.put<std::int64_t>(opt.steps());
  for (const auto* moments : {&opt.first_moment(), &opt.second_moment()}) {
    w.put<std::uint64_t>(moments->size());
    for (const auto& [name, t] : *moments) {
      w.str(name);
      w.tensor(t);
    }
  }
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) throw std::runtime_error("cannot write checkpoint: " + path.string());
    os.write(w.data().data(), static_cast<std::streamsize>(w.data().size()));
    if (!os) throw std::runtime_error("checkpoint write failed: " + path.string());
  }
  fs::rename(tmp, path);
}

CheckpointMeta load_checkpoint(const fs::path& path, model::Model& m, AdamW* opt) {
  ParsedCheckpoint ck = parse_checkpoint(path);
  auto& params = m.params().params();
  for (const auto& [name, p] : params)
    if (!ck.params.count(name)) throw std::runtime_error("checkpoint lacks parameter block '" + name + "'");
  for (auto& [name, t] : ck.params) {
    auto it = params.find(name);
    if (it == params.end()) throw std::runtime_error("checkpoint block '" + name + "' has no counterpart in the model");
    if (it->second.shape() != t.shape())
      throw std::runtime_error("parameter block '" + name + "' has shape " + shape_str(t.shape()) +
                               " in the checkpoint but " + shape_str(it->second.shape()) + " in the model");
    it->second.mutable_value() = std::move(t);
  }
  if (opt) {
    opt->set_steps(ck.opt_step);
    opt->first_moment() = std::move(ck.m);
    opt->second_moment() = std::move(ck.v);
  }
  return ck.meta;
}

CheckpointMeta read_checkpoint_meta(const fs::path& path) { return parse_checkpoint(path).meta; }

// -------------------------------------------------------------------- data

model::Inputs make_inputs(const synth::FeatureBundle& fb) {
  model::Inputs in;
  for (std::size_t n = 0; n < 4; ++n) {
    const auto& v = fb.visual[n];
    in.visual[n] = v.reshaped({v.dim(0) * v.dim(1) * v.dim(2), v.dim(3)});
  }
  in.audio = fb.audio;
  in.text = fb.text;
  in.text_len = fb.text_len;
  in.gt = fb.gt_masks;
  in.label = fb.label.p;
  return in;
}

std::vector<Example> load_examples(const fs::path& dataset, const synth::Manifest& manifest, const std::string& split,
                                   const synth::Encoders& enc,
                                   const std::map<std::string, synth::SoftLabel>& soft_labels) {
  std::vector<Example> out;
  for (const auto& e : manifest.in_split(split)) {
    synth::Sample s = synth::load_sample(dataset, e.id);
    s.split = e.split;
    if (auto it = soft_labels.find(e.id); it != soft_labels.end()) s.label = it->second;
    out.push_back({e.id, e.split, e.referring_template, e.audio_conflict, make_inputs(synth::build_features(enc, s))});
  }
  if (out.empty()) throw std::invalid_argument("split '" + split + "' has no samples in " + dataset.string());
  return out;
}

// ---------------------------------------------------------------- training

json to_json(const EpochLog& e) {
  return {{"epoch", e.epoch}, {"seg", e.seg},     {"sasa", e.sasa},  {"kl", e.kl},
          {"orth", e.orth},   {"total", e.total}, {"val_J", e.val_J}};
}

std::unique_ptr<model::Model> build_model(const RunConfig& cfg) {
  auto m = std::make_unique<model::Model>(cfg.model, cfg.toggles, cfg.seed);
  m->weights = cfg.weights;
  m->sasa = cfg.sasa;
  return m;
}

namespace {

double value_or_zero(const ag::Var& v) { return v ? v.value()[0] : 0.0; }

json loss_dump(const model::Losses& l) {
  return {{"seg", value_or_zero(l.seg)},
          {"sasa", value_or_zero(l.sasa)},
          {"kl", value_or_zero(l.kl)},
          {"orth", value_or_zero(l.orth)},
          {"total", value_or_zero(l.total)}};
}

}  // namespace

TrainResult train_model(model::Model& m, const RunConfig& cfg, const std::vector<Example>& train_set,
                        const std::vector<Example>& val_set, const fs::path& out, const TrainOptions& opts) {
  if (train_set.empty()) throw std::invalid_argument("train: empty training set");
  fs::create_directories(out);
  TrainResult result;
  result.checkpoint = out / "checkpoint.bin";
  const fs::path log_path = out / "train_log.jsonl";
  std::ofstream log(log_path, std::ios::trunc);
  if (!log) throw std::runtime_error("cannot open training log: " + log_path.string());

  AdamW opt(m.params(), cfg.optim);
  const long steps_per_epoch = static_cast<long>((train_set.size() + static_cast<std::size_t>(cfg.optim.batch) - 1) /
                                                 static_cast<std::size_t>(cfg.optim.batch));
  const long total_steps = steps_per_epoch * cfg.optim.epochs;
  long step = 0;
  const auto t0 = std::chrono::steady_clock::now();

  for (int epoch = 1; epoch <= cfg.optim.epochs; ++epoch) {
    std::vector<std::size_t> order(train_set.size());
    std::iota(order.begin(), order.end(), 0);
    nn::Rng rng(cfg.seed * 0x9e3779b97f4a7c15ULL + static_cast<std::uint64_t>(epoch));
    std::shuffle(order.begin(), order.end(), rng);

    EpochLog rec;
    rec.epoch = epoch;
    std::size_t seen = 0;
    for (std::size_t b = 0; b < order.size(); b += static_cast<std::size_t>(cfg.optim.batch)) {
      if (opts.max_steps >= 0 && step >= opts.max_steps) break;
      m.params().zero_grad();
      const std::size_t end = std::min(order.size(), b + static_cast<std::size_t>(cfg.optim.batch));
      for (std::size_t i = b; i < end; ++i) {
        const Example& ex = train_set[order[i]];
        model::ForwardOutput fwd;
        try {
          fwd = m.forward(ex.inputs);
        } catch (const std::domain_error& e) {
          json dump{{"error", e.what()}, {"sample", ex.id}, {"epoch", epoch}, {"step", step}};
          throw TrainingAborted("non-finite values at step " + std::to_string(step) + ": " + dump.dump(), dump);
        }
        const auto& L = fwd.losses;
        if (!std::isfinite(L.total.value()[0])) {
          json dump = loss_dump(L);
          dump["sample"] = ex.id;
          dump["epoch"] = epoch;
          dump["step"] = step;
          throw TrainingAborted("non-finite loss at step " + std::to_string(step) + ": " + dump.dump(), dump);
        }
        rec.seg += value_or_zero(L.seg);
        rec.sasa += value_or_zero(L.sasa);
        rec.kl += value_or_zero(L.kl);
        rec.orth += value_or_zero(L.orth);
        rec.total += value_or_zero(L.total);
        ++seen;
        ag::backward(end - b > 1 ? ag::scale(L.total, 1.0 / static_cast<Scalar>(end - b)) : L.total);
      }
      opt.step(cfg.optim.lr * lr_factor(cfg.optim, step, total_steps));
      ++step;
    }
    if (seen > 0) {
      const double n = static_cast<double>(seen);
      rec.seg /= n;
      rec.sasa /= n;
      rec.kl /= n;
      rec.orth /= n;
      rec.total /= n;
    }
    if (opts.evaluate_val && !val_set.empty()) rec.val_J = evaluate_examples(m, val_set, cfg.val_split).J;
    log << to_json(rec).dump() << '\n';
    log.flush();
    result.logs.push_back(rec);
    if (opts.write_checkpoint) save_checkpoint(result.checkpoint, m, opt, {cfg, epoch});
    if (opts.verbose) {
      const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      std::cerr << "epoch " << epoch << "/" << cfg.optim.epochs << "  total " << std::fixed << std::setprecision(4)
                << rec.total << "  seg " << rec.seg << "  sasa " << rec.sasa << "  kl " << rec.kl << "  orth "
                << rec.orth << "  val_J " << std::setprecision(2) << rec.val_J << "  (" << std::setprecision(1)
                << secs << " s)\n";
    }
    if (opts.max_steps >= 0 && step >= opts.max_steps) break;
  }
  return result;
}

namespace {

struct LoadedData {
  synth::Manifest manifest;
  synth::Encoders enc;
  std::map<std::string, synth::SoftLabel> labels;
};

LoadedData open_dataset(RunConfig& cfg) {
  if (cfg.dataset.empty()) throw std::invalid_argument("config: 'dataset' is required");
  LoadedData d{synth::load_manifest(cfg.dataset), synth::Encoders(), {}};
  bind_to_dataset(cfg, d.manifest.config, d.enc.config());
  if (!cfg.soft_labels.empty()) d.labels = synth::read_soft_labels_jsonl(cfg.soft_labels);
  return d;
}

}  // namespace

TrainResult train(const RunConfig& config, const fs::path& out, const TrainOptions& opts) {
  RunConfig cfg = config;
  auto data = open_dataset(cfg);
  auto train_set = load_examples(cfg.dataset, data.manifest, cfg.train_split, data.enc, data.labels);
  std::vector<Example> val_set;
  if (opts.evaluate_val && !data.manifest.in_split(cfg.val_split).empty())
    val_set = load_examples(cfg.dataset, data.manifest, cfg.val_split, data.enc, data.labels);
  auto m = build_model(cfg);
  return train_model(*m, cfg, train_set, val_set, out, opts);
}

std::vector<evalkit::SampleMetrics> score(const model::Model& m, const std::vector<Example>& data,
                                          const fs::path& masks_dir) {
  ag::NoGradGuard guard;
  if (!masks_dir.empty()) fs::create_directories(masks_dir);
  std::vector<evalkit::SampleMetrics> out;
  out.reserve(data.size());
  for (const auto& ex : data) {
    auto fwd = m.forward(ex.inputs, false);
    const Tensor pred = maskhead::binarize(fwd.logits.value());
    if (!masks_dir.empty()) io::write_array(masks_dir / (ex.id + ".bin"), pred, io::DType::UInt8);
    evalkit::SampleMetrics s;
    s.id = ex.id;
    s.split = ex.split;
    s.J = evalkit::video_jaccard(pred, ex.inputs.gt);
    s.F = evalkit::video_boundary_f(pred, ex.inputs.gt);
    const auto sm = evalkit::s_metric(pred);
    s.S = sm.value;
    s.s_capped = sm.capped;
    out.push_back(s);
  }
  return out;
}

evalkit::MetricReport evaluate_examples(const model::Model& m, const std::vector<Example>& data,
                                        const std::string& split) {
  return evalkit::aggregate(split, score(m, data));
}

evalkit::MetricReport evaluate(const fs::path& checkpoint, const fs::path& dataset, const std::string& split,
                               const fs::path& masks_dir) {
  RunConfig cfg = read_checkpoint_meta(checkpoint).config;
  const auto manifest = synth::load_manifest(dataset);
  synth::Encoders enc;
  RunConfig bound = cfg;
  bind_to_dataset(bound, manifest.config, enc.config());
  if (model::to_json(bound.model) != model::to_json(cfg.model))
    throw std::invalid_argument("dataset geometry does not match the checkpoint model (canvas/stage grids)");
  auto m = build_model(cfg);
  load_checkpoint(checkpoint, *m);
  return evalkit::aggregate(split, score(*m, load_examples(dataset, manifest, split, enc), masks_dir));
}

// ---------------------------------------------------------------- ablation

SweepSpec sweep_from_json(const json& j) {
  check_keys(j, {"variants", "seeds", "splits"}, "sweep");
  SweepSpec s;
  std::set<std::string> names;
  for (const auto& v : j.at("variants")) {
    check_keys(v, {"name", "overrides"}, "sweep variant");
    Variant var{v.at("name").get<std::string>(), v.value("overrides", json::object())};
    if (!names.insert(var.name).second) throw std::invalid_argument("sweep: duplicate variant '" + var.name + "'");
    const model::Toggles t = model::toggles_from_json(var.overrides);
    if (!t.use_distiller && var.overrides.value("use_orth", false))
      throw std::invalid_argument("sweep: variant '" + var.name + "' sets use_orth without the distiller");
    s.variants.push_back(std::move(var));
  }
  if (s.variants.empty()) throw std::invalid_argument("sweep: no variants");
  if (j.contains("seeds")) s.seeds = j.at("seeds").get<std::vector<std::uint64_t>>();
  if (j.contains("splits")) s.splits = j.at("splits").get<std::vector<std::string>>();
  if (s.seeds.empty()) throw std::invalid_argument("sweep: no seeds");
  return s;
}

Stat summarize(const std::vector<double>& values) {
  Stat s;
  if (values.empty()) return s;
  for (double v : values) s.mean += v;
  s.mean /= static_cast<double>(values.size());
  if (values.size() > 1) {
    double acc = 0;
    for (double v : values) acc += (v - s.mean) * (v - s.mean);
    s.spread = std::sqrt(acc / static_cast<double>(values.size() - 1));
  }
  return s;
}

AblationTable ablate(const RunConfig& base, const SweepSpec& sweep, const fs::path& out, bool verbose) {
  RunConfig cfg0 = base;
  auto data = open_dataset(cfg0);
  auto train_set = load_examples(cfg0.dataset, data.manifest, cfg0.train_split, data.enc, data.labels);
  std::map<std::string, std::vector<Example>> eval_sets;
  for (const auto& split : sweep.splits)
    eval_sets[split] = load_examples(cfg0.dataset, data.manifest, split, data.enc, data.labels);

  AblationTable table;
  table.splits = sweep.splits;
  for (const auto& var : sweep.variants) {
    VariantResult row;
    row.name = var.name;
    json toggles = model::to_json(base.toggles);
    for (const auto& [k, v] : var.overrides.items()) toggles[k] = v;
    row.toggles = model::toggles_from_json(toggles);
    std::map<std::string, std::map<std::string, std::vector<double>>> per_split;
    std::vector<double> conflict;
    for (auto seed : sweep.seeds) {
      RunConfig cfg = cfg0;
      cfg.toggles = row.toggles;
      cfg.seed = seed;
      if (verbose) std::cerr << "[ablate] " << var.name << " seed " << seed << "\n";
      auto m = build_model(cfg);
      TrainOptions opts;
      opts.verbose = verbose;
      opts.evaluate_val = false;
      const fs::path run_dir = out / var.name / ("seed" + std::to_string(seed));
      auto tr = train_model(*m, cfg, train_set, {}, run_dir, opts);
      json run{{"seed", seed}, {"final_total", tr.logs.back().total}};
      std::vector<double> conflict_j;
      for (const auto& split : sweep.splits) {
        const auto& set = eval_sets.at(split);
        auto samples = score(*m, set);
        auto rep = evalkit::aggregate(split, samples);
        per_split[split]["J"].push_back(rep.J);
        per_split[split]["F"].push_back(rep.F);
        if (rep.S) per_split[split]["S"].push_back(*rep.S);
        run[split] = {{"J", rep.J}, {"F", rep.F}, {"S", rep.S ? json(*rep.S) : json(nullptr)}};
        for (std::size_t i = 0; i < set.size(); ++i)
          if (set[i].audio_conflict) conflict_j.push_back(100.0 * samples[i].J);
      }
      const double cj = conflict_j.empty() ? 0.0 : summarize(conflict_j).mean;
      run["conflict_J"] = cj;
      run["conflict_samples"] = conflict_j.size();
      conflict.push_back(cj);
      row.runs.push_back(run);
    }
    for (const auto& [split, metrics] : per_split)
      for (const auto& [name, values] : metrics) row.metrics[split][name] = summarize(values);
    row.conflict_J = summarize(conflict);
    table.rows.push_back(std::move(row));
  }
  return table;
}

json to_json(const AblationTable& t) {
  json rows = json::array();
  for (const auto& r : t.rows) {
    json metrics = json::object();
    for (const auto& [split, m] : r.metrics)
      for (const auto& [name, s] : m) metrics[split][name] = {{"mean", s.mean}, {"spread", s.spread}};
    rows.push_back({{"variant", r.name},
                    {"ablation", model::to_json(r.toggles)},
                    {"metrics", metrics},
                    {"conflict_J", {{"mean", r.conflict_J.mean}, {"spread", r.conflict_J.spread}}},
                    {"runs", r.runs}});
  }
  return {{"splits", t.splits}, {"rows", rows}};
}

std::string format_table(const AblationTable& t) {
  std::vector<std::vector<std::string>> cells;
  std::vector<std::string> header{"variant"};
  for (const auto& split : t.splits) {
    if (split == "null") {
      header.push_back("null S");
    } else {
      header.push_back(split + " J");
      header.push_back(split + " F");
    }
  }
  header.push_back("conflict J");
  cells.push_back(header);
  auto fmt = [](const Stat& s, int prec) {
    std::ostringstream os;
    os << std::fixed << std::setprecision(prec) << s.mean << " +/- " << s.spread;
    return os.str();
  };
  for (const auto& r : t.rows) {
    std::vector<std::string> line{r.name};
    for (const auto& split : t.splits) {
      const auto it = r.metrics.find(split);
      auto get = [&](const std::string& k) {
        if (it == r.metrics.end() || !it->second.count(k)) return Stat{};
        return it->second.at(k);
      };
      if (split == "null") {
        line.push_back(fmt(get("S"), 3));
      } else {
        line.push_back(fmt(get("J"), 1));
        line.push_back(fmt(get("F"), 1));
      }
    }
    line.push_back(fmt(r.conflict_J, 1));
    cells.push_back(line);
  }
  std::vector<std::size_t> widths(header.size(), 0);
  for (const auto& row : cells)
    for (std::size_t c = 0; c < row.size(); ++c) widths[c] = std::max(widths[c], row[c].size());
  std::ostringstream os;
  for (const auto& row : cells) {
    for (std::size_t c = 0; c < row.size(); ++c) {
      os << (c == 0 ? std::left : std::right) << std::setw(static_cast<int>(widths[c])) << row[c];
      os << (c + 1 < row.size() ? "  " : "\n");
    }
  }
  return os.str();
}

}  // namespace primed::harness
