#pragma once

// One JSON document holds every knob of a run: data generation, model,
// source training, adaptation and the MPA loss. Unknown keys are errors.

#include <filesystem>
#include <json.hpp>
#include <stdexcept>
#include <string>
#include <vector>

#include "panodeform/model.hpp"
#include "panodeform/mpa.hpp"
#include "panodeform/panogeo.hpp"
#include "panodeform/trainer.hpp"

namespace panodeform::config {

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct DataConfig {
  panogeo::SceneSpec spec;
  std::size_t n_source = 16;
  std::size_t n_target = 16;
  std::size_t n_test = 8;
};

struct RunConfig {
  /// Threaded into data generation, weight init and every training stream.
  std::uint64_t seed = 1;
  DataConfig data;
  model::ModelConfig model = model::ModelConfig::nano();
  trainer::TrainConfig source;
  trainer::TrainConfig adapt;
  mpa::AdaptConfig mpa;
  /// Rows of the ablation ladder: "none" (source only), "ssl", "mpa", "mpa+ssl".
  std::vector<std::string> modes{"none", "ssl", "mpa", "mpa+ssl"};

  /// Calibrated desk-scale defaults (see README).
  static RunConfig defaults();

  /// Copies the run seed into the sub-configs and the class count into the model.
  void resolve();
  /// Throws ConfigError on any invalid field.
  void validate() const;

  /// Model seed and per-phase training seeds derived from `seed`.
  std::uint64_t model_seed() const;
};

nlohmann::ordered_json to_json(const RunConfig& cfg);
/// Fields absent from `doc` keep their defaults; unknown keys throw ConfigError.
RunConfig from_json(const nlohmann::json& doc, RunConfig base = RunConfig::defaults());

/// Applies `path.to.key=value`; the value is parsed as JSON when possible and
/// as a string otherwise. The key must already exist in `doc`.
void apply_override(nlohmann::ordered_json& doc, const std::string& assignment);

/// Defaults, then the optional file, then overrides, then `resolve()` and `validate()`.
RunConfig load(const std::filesystem::path& file, const std::vector<std::string>& overrides);

}  // namespace panodeform::config
