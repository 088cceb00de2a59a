#pragma once

// Pipeline stages shared by the CLI subcommands and the full run:
// synth -> train-source -> init-bank -> adapt(mode) -> eval.
//
// Run directory of `run_pipeline`:
//   config.json                resolved configuration
//   data/                      manifest.json + scene blobs
//   source/checkpoint/         params.json + one .pdt per parameter
//   source/train_log.jsonl
//   bank/                      prototypes.pdt + bank.json (MPA modes only)
//   adapt-<mode>/checkpoint/, adapt-<mode>/train_log.jsonl, adapt-<mode>/bank/
//   eval-<mode>/eval.json, eval.txt, sectors.csv
//   summary.json

#include <exception>
#include <filesystem>
#include <map>
#include <ostream>
#include <string>

#include "panodeform/config.hpp"
#include "panodeform/metrics.hpp"
#include "panodeform/model.hpp"
#include "panodeform/mpa.hpp"
#include "panodeform/panogeo.hpp"

namespace panodeform::pipeline {

namespace fs = std::filesystem;

/// Creates `dir`; a non-empty existing directory is a ConfigError unless `force`.
void prepare_dir(const fs::path& dir, bool force);
/// Writes `config.json` (resolved) into `dir`.
void write_snapshot(const fs::path& dir, const config::RunConfig& cfg);
void write_text(const fs::path& path, const std::string& text);

/// `manifest` may name manifest.json or the directory holding it.
panogeo::DatasetManifest open_manifest(const fs::path& manifest);

panogeo::DatasetManifest synth(const config::RunConfig& cfg, const fs::path& out_dir);

model::Trans4Pass load_model(const config::RunConfig& cfg, const fs::path& checkpoint);

/// Writes out_dir/checkpoint and out_dir/train_log.jsonl.
void train_source(const config::RunConfig& cfg, const panogeo::DatasetManifest& data, const fs::path& out_dir,
                  std::ostream* progress = nullptr);

/// Writes the bank into out_dir.
mpa::PrototypeBank init_bank(const config::RunConfig& cfg, const panogeo::DatasetManifest& data,
                             const fs::path& checkpoint, const fs::path& out_dir);

/// `bank_dir` is required for the MPA modes. Writes out_dir/checkpoint,
/// out_dir/train_log.jsonl and, in MPA modes, the updated out_dir/bank.
void adapt(const config::RunConfig& cfg, const panogeo::DatasetManifest& data, const fs::path& checkpoint,
           const fs::path& bank_dir, const std::string& mode, const fs::path& out_dir,
           std::ostream* progress = nullptr);

/// Writes eval.json, eval.txt and sectors.csv into out_dir.
metrics::EvalReport evaluate(const config::RunConfig& cfg, const panogeo::DatasetManifest& data,
                             const fs::path& checkpoint, const fs::path& out_dir);

/// Reports keyed by mode, in the order of `cfg.modes`.
struct PipelineResult {
  std::vector<std::pair<std::string, metrics::EvalReport>> reports;

  const metrics::EvalReport& at(const std::string& mode) const;
};

/// Every stage, in order. A failing stage rethrows its error, of the same
/// type, with the message prefixed by "stage <name>: ".
PipelineResult run_pipeline(const config::RunConfig& cfg, const fs::path& out_dir, bool force,
                            std::ostream* progress = nullptr);

/// 2 config/usage, 3 data/I-O, 4 numerical, 1 anything else.
int exit_code(const std::exception& e);

/// Rethrows the in-flight exception as the same type, message prefixed by the stage.
[[noreturn]] void rethrow_with_stage(const std::string& stage);

/// Runs `fn`, prefixing any error message with the stage name.
template <class Fn>
auto run_stage(const std::string& stage, Fn&& fn) -> decltype(fn()) {
  try {
    return fn();
  } catch (...) {
    rethrow_with_stage(stage);
  }
}

}  // namespace panodeform::pipeline
