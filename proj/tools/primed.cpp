#include <CLI11.hpp>
#include <Eigen/Core>

#include <iostream>

#include "primed/harness.hpp"
#include "primed/io.hpp"

namespace fs = std::filesystem;
using namespace primed;

int main(int argc, char** argv) {
  CLI::App app{"primed: referring audio-visual segmentation toolkit"};
  app.require_subcommand(1);

  std::optional<std::uint64_t> seed;
  bool deterministic = false;
  app.add_option("--seed", seed, "override the configured seed");
  app.add_flag("--deterministic", deterministic, "single-threaded, bit-reproducible execution");

  std::string config, out, sweep, ckpt, data, split, report, masks;

  auto* gen = app.add_subcommand("gen", "generate a synthetic dataset");
  gen->add_option("--config", config, "generation config (JSON)")->required()->check(CLI::ExistingFile);
  gen->add_option("--out", out, "output directory")->required();

  auto* train = app.add_subcommand("train", "train a model");
  train->add_option("--config", config, "run config (JSON)")->required()->check(CLI::ExistingFile);
  train->add_option("--out", out, "run directory")->required();

  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint on one split");
  eval->add_option("--ckpt", ckpt, "checkpoint file")->required()->check(CLI::ExistingFile);
  eval->add_option("--data", data, "dataset directory")->required()->check(CLI::ExistingDirectory);
  eval->add_option("--split", split, "split name")->required();
  eval->add_option("--report", report, "report path (JSON)")->required();
  eval->add_option("--masks", masks, "directory for predicted masks (uint8 arrays)");

  auto* abl = app.add_subcommand("ablate", "run an ablation sweep");
  abl->add_option("--config", config, "base run config (JSON)")->required()->check(CLI::ExistingFile);
  abl->add_option("--sweep", sweep, "sweep spec (JSON)")->required()->check(CLI::ExistingFile);
  abl->add_option("--out", out, "output directory")->required();

  CLI11_PARSE(app, argc, argv);

  try {
    if (deterministic) Eigen::setNbThreads(1);
    if (*gen) {
      auto cfg = synth::generation_config_from_json(io::read_json(config));
      if (seed) cfg.seed = *seed;
      const auto m = synth::gen_dataset(cfg, out);
      std::cout << "wrote " << m.samples.size() << " samples to " << out << "\n";
    } else if (*train) {
      auto cfg = harness::load_run_config(config);
      if (seed) cfg.seed = *seed;
      cfg.deterministic = cfg.deterministic || deterministic;
      const auto r = harness::train(cfg, out);
      std::cout << "checkpoint: " << r.checkpoint.string() << "\n";
    } else if (*eval) {
      const auto r = harness::evaluate(ckpt, data, split, masks);
      io::write_json(report, evalkit::to_json(r));
      std::cout << split << ": J " << r.J << "  F " << r.F << "  JF " << r.JF;
      if (r.S) std::cout << "  S " << *r.S;
      std::cout << "\n";
    } else if (*abl) {
      auto cfg = harness::load_run_config(config);
      if (seed) cfg.seed = *seed;
      cfg.deterministic = cfg.deterministic || deterministic;
      const auto spec = harness::sweep_from_json(io::read_json(sweep));
      fs::create_directories(out);
      const auto table = harness::ablate(cfg, spec, out);
      io::write_json(fs::path(out) / "ablation.json", harness::to_json(table));
      const std::string text = harness::format_table(table);
      io::write_text(fs::path(out) / "ablation.txt", text);
      std::cout << text;
    }
  } catch (const harness::TrainingAborted& e) {
    std::cerr << "training aborted: " << e.what() << "\n";
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
