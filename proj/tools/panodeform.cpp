// panodeform: data synthesis, source training, bank initialisation,
// adaptation, evaluation, gradient checks, model inspection and the full run.

#include <CLI11.hpp>
#include <chrono>
#include <iostream>

#include "panodeform/config.hpp"
#include "panodeform/gradsuite.hpp"
#include "panodeform/ops.hpp"
#include "panodeform/pipeline.hpp"

namespace pd = panodeform;
namespace fs = std::filesystem;

namespace {

struct Common {
  std::string config_file;
  std::vector<std::string> overrides;
  std::optional<std::uint64_t> seed;
  std::string out;
  bool force = false;

  void attach(CLI::App* cmd, bool with_out) {
    cmd->add_option("--config", config_file, "JSON config file")->check(CLI::ExistingFile);
    cmd->add_option("--set", overrides, "Dotted-path override, e.g. trainer.lr0=1e-4 (repeatable)");
    cmd->add_option("--seed", seed, "Run seed (all RNG streams)");
    if (with_out) {
      cmd->add_option("--out", out, "Output directory")->required();
      cmd->add_flag("--force", force, "Write into a non-empty output directory");
    }
  }

  pd::config::RunConfig resolve(std::vector<std::string> extra = {}) const {
    auto all = overrides;
    if (seed) all.push_back("seed=" + std::to_string(*seed));
    all.insert(all.end(), extra.begin(), extra.end());
    return pd::config::load(config_file, all);
  }

  // Prepares the output directory and writes the config snapshot.
  fs::path output(const pd::config::RunConfig& cfg) const {
    pd::pipeline::prepare_dir(out, force);
    pd::pipeline::write_snapshot(out, cfg);
    return out;
  }
};

void print_summary(const pd::panogeo::DatasetManifest& m) {
  std::cout << "classes " << m.classes << "\n";
  for (const char* s : {"source", "target", "test", "test_pinhole"}) {
    std::cout << "  " << s << ": " << m.split(s).size() << " scenes\n";
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Deformable panoramic segmentation with prototypical adaptation"};
  app.require_subcommand(1);

  Common c;
  std::string data, checkpoint, bank, mode;
  std::optional<std::size_t> classes;
  std::string scope = "all";
  pd::gradsuite::Options gopts;
  std::string fault;
  std::size_t height = 64, width = 128;

  auto* synth = app.add_subcommand("synth", "Render the source/target/test datasets");
  c.attach(synth, true);
  synth->add_option("--classes", classes, "Number of classes (shorthand for --set data.classes=K)");

  auto* train = app.add_subcommand("train-source", "Supervised training on the pinhole source split");
  c.attach(train, true);
  train->add_option("--data", data, "manifest.json or its directory")->required();

  auto* init = app.add_subcommand("init-bank", "Initial class prototypes from a source-trained checkpoint");
  c.attach(init, true);
  init->add_option("--data", data, "manifest.json or its directory")->required();
  init->add_option("--checkpoint", checkpoint, "Checkpoint directory")->required();

  auto* adapt = app.add_subcommand("adapt", "Adapt a source-trained checkpoint to the panorama domain");
  c.attach(adapt, true);
  adapt->add_option("--data", data, "manifest.json or its directory")->required();
  adapt->add_option("--checkpoint", checkpoint, "Source-trained checkpoint directory")->required();
  adapt->add_option("--bank", bank, "Prototype bank directory (required for mpa and mpa+ssl)");
  adapt->add_option("--mode", mode, "ssl | mpa | mpa+ssl")->required()->check(CLI::IsMember({"ssl", "mpa", "mpa+ssl"}));

  auto* eval = app.add_subcommand("eval", "Panorama mIoU, polar sectors and pinhole gap");
  c.attach(eval, true);
  eval->add_option("--data", data, "manifest.json or its directory")->required();
  eval->add_option("--checkpoint", checkpoint, "Checkpoint directory")->required();

  auto* grad = app.add_subcommand("gradcheck", "Finite-difference check of every differentiable op");
  grad->add_option("--scope", scope, "op | module | model | all")->check(CLI::IsMember({"op", "module", "model", "all"}));
  grad->add_option("--seed", gopts.seed, "Seed of the random shapes and inputs");
  grad->add_option("--shapes", gopts.shapes_per_op, "Random shapes per op")->check(CLI::PositiveNumber);
  grad->add_option("--tolerance", gopts.tolerance, "Relative error tolerance");
  grad->add_option("--inject-fault", fault, "Self-test: deliberately break a backward pass")
      ->check(CLI::IsMember({"bilinear-coord-sign"}));

  auto* describe = app.add_subcommand("describe", "Per-stage shapes and parameter counts");
  c.attach(describe, false);
  describe->add_option("--height", height, "Input height (multiple of 32)");
  describe->add_option("--width", width, "Input width (multiple of 32)");

  auto* pipe = app.add_subcommand("pipeline", "synth -> train-source -> init-bank -> adapt(mode) -> eval");
  c.attach(pipe, true);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  try {
    if (*synth) {
      std::vector<std::string> extra;
      if (classes) extra.push_back("data.classes=" + std::to_string(*classes));
      const auto cfg = c.resolve(extra);
      const auto out = c.output(cfg);
      const auto m = pd::pipeline::synth(cfg, out);
      std::cout << (out / "manifest.json").string() << "\n";
      print_summary(m);
    } else if (*train) {
      const auto cfg = c.resolve();
      const auto m = pd::pipeline::open_manifest(data);
      const auto out = c.output(cfg);
      pd::pipeline::train_source(cfg, m, out, &std::cout);
      std::cout << "checkpoint " << (out / "checkpoint").string() << "\n";
    } else if (*init) {
      const auto cfg = c.resolve();
      const auto m = pd::pipeline::open_manifest(data);
      const auto out = c.output(cfg);
      const auto b = pd::pipeline::init_bank(cfg, m, checkpoint, out);
      std::size_t ready = 0;
      for (std::size_t k = 0; k < b.classes(); ++k) ready += b.initialized(k);
      std::cout << "bank " << out.string() << ": " << ready << "/" << b.classes() << " classes initialized\n";
    } else if (*adapt) {
      const auto cfg = c.resolve();
      const auto m = pd::pipeline::open_manifest(data);
      const auto out = c.output(cfg);
      pd::pipeline::adapt(cfg, m, checkpoint, bank, mode, out, &std::cout);
      std::cout << "checkpoint " << (out / "checkpoint").string() << "\n";
    } else if (*eval) {
      const auto cfg = c.resolve();
      const auto m = pd::pipeline::open_manifest(data);
      const auto out = c.output(cfg);
      std::cout << pd::pipeline::evaluate(cfg, m, checkpoint, out).to_text();
    } else if (*grad) {
      if (fault == "bilinear-coord-sign") pd::fault::inject(pd::fault::Kind::kBilinearCoordSign);
      const auto start = std::chrono::steady_clock::now();
      const auto cases = pd::gradsuite::run(pd::gradsuite::parse_scope(scope), gopts);
      const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
      std::cout << pd::gradsuite::table(cases) << "elapsed " << secs << " s\n";
      if (!pd::gradsuite::all_passed(cases)) {
        std::cerr << "gradcheck: some ops exceed the tolerance\n";
        return 4;
      }
    } else if (*describe) {
      const auto cfg = c.resolve();
      pd::model::Trans4Pass net(cfg.model, cfg.model_seed());
      std::cout << net.describe(height, width);
    } else if (*pipe) {
      const auto cfg = c.resolve();
      const auto result = pd::pipeline::run_pipeline(cfg, c.out, c.force, &std::cout);
      std::cout << "\nmode        panorama  pinhole  gap\n";
      for (const auto& [m, r] : result.reports) {
        std::printf("%-10s  %8.2f  %7.2f  %5.2f\n", m.c_str(), r.panorama.miou, r.pinhole_miou.value_or(0.0),
                    r.gap().value_or(0.0));
      }
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return pd::pipeline::exit_code(e);
  }
  return 0;
}
