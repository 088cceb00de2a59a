#include "panodeform/pipeline.hpp"

#include <fstream>
#include <iomanip>
#include <json.hpp>

#include "panodeform/pdt_io.hpp"
#include "panodeform/tensor.hpp"
#include "panodeform/trainer.hpp"

namespace panodeform::pipeline {

using panogeo::DataError;

void prepare_dir(const fs::path& dir, bool force) {
  std::error_code ec;
  if (fs::exists(dir, ec)) {
    if (!fs::is_directory(dir, ec)) throw config::ConfigError(dir.string() + " exists and is not a directory");
    if (!fs::is_empty(dir, ec) && !force) {
      throw config::ConfigError("output directory " + dir.string() + " is not empty (use --force)");
    }
  }
  fs::create_directories(dir, ec);
  if (ec) throw DataError("cannot create " + dir.string() + ": " + ec.message());
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  os << text;
  os.flush();
  if (!os) throw DataError("cannot write " + path.string());
}

void write_snapshot(const fs::path& dir, const config::RunConfig& cfg) {
  write_text(dir / "config.json", config::to_json(cfg).dump(2) + "\n");
}

panogeo::DatasetManifest open_manifest(const fs::path& manifest) {
  return panogeo::load_manifest(fs::is_directory(manifest) ? manifest / "manifest.json" : manifest);
}

namespace {

std::vector<panogeo::LabeledScene> split(const config::RunConfig& cfg, const panogeo::DatasetManifest& data,
                                         const std::string& name) {
  if (data.classes != cfg.data.spec.classes) {
    throw DataError("dataset has " + std::to_string(data.classes) + " classes but the config expects " +
                    std::to_string(cfg.data.spec.classes));
  }
  auto scenes = panogeo::load_split(data, name);
  if (scenes.empty()) throw DataError("split '" + name + "' is empty");
  return scenes;
}

// Streams the JSON-lines log to disk and a short progress line every 100 iterations.
class LogWriter {
 public:
  LogWriter(const fs::path& path, std::ostream* progress, std::string tag)
      : os_(path, std::ios::binary | std::ios::trunc), path_(path), progress_(progress), tag_(std::move(tag)) {
    if (!os_) throw DataError("cannot write " + path.string());
  }

  trainer::LogSink sink() {
    return [this](const trainer::LogRecord& r) {
      os_ << r.to_json() << '\n';
      if (progress_ && (r.iter % 100 == 0)) {
        *progress_ << "  [" << tag_ << "] iter " << r.iter << " loss " << std::setprecision(4) << r.total << '\n';
      }
    };
  }

  void close() {
    os_.flush();
    if (!os_) throw DataError("cannot write " + path_.string());
  }

 private:
  std::ofstream os_;
  fs::path path_;
  std::ostream* progress_;
  std::string tag_;
};

}  // namespace

panogeo::DatasetManifest synth(const config::RunConfig& cfg, const fs::path& out_dir) {
  return panogeo::build_datasets(cfg.data.spec, cfg.data.n_source, cfg.data.n_target, cfg.data.n_test, cfg.seed,
                                 out_dir);
}

model::Trans4Pass load_model(const config::RunConfig& cfg, const fs::path& checkpoint) {
  model::Trans4Pass net(cfg.model, cfg.model_seed());
  net.params().load(checkpoint);
  return net;
}

void train_source(const config::RunConfig& cfg, const panogeo::DatasetManifest& data, const fs::path& out_dir,
                  std::ostream* progress) {
  const auto source = split(cfg, data, "source");
  model::Trans4Pass net(cfg.model, cfg.model_seed());
  LogWriter log(out_dir / "train_log.jsonl", progress, "source");
  trainer::train_source(net, source, cfg.source, log.sink());
  log.close();
  net.params().save(out_dir / "checkpoint");
}

mpa::PrototypeBank init_bank(const config::RunConfig& cfg, const panogeo::DatasetManifest& data,
                             const fs::path& checkpoint, const fs::path& out_dir) {
  const auto net = load_model(cfg, checkpoint);
  auto bank = mpa::init_bank(net, split(cfg, data, "source"), split(cfg, data, "target"), cfg.mpa);
  bank.save(out_dir);
  return bank;
}

void adapt(const config::RunConfig& cfg, const panogeo::DatasetManifest& data, const fs::path& checkpoint,
           const fs::path& bank_dir, const std::string& mode_name, const fs::path& out_dir,
           std::ostream* progress) {
  const auto mode = trainer::parse_adapt_mode(mode_name);
  const bool uses_bank = mode != trainer::AdaptMode::kSsl;
  if (uses_bank && bank_dir.empty()) {
    throw config::ConfigError("mode " + mode_name + " needs a prototype bank (run init-bank first)");
  }
  auto net = load_model(cfg, checkpoint);
  std::optional<mpa::PrototypeBank> bank;
  if (uses_bank) bank = mpa::PrototypeBank::load(bank_dir);
  const auto source = split(cfg, data, "source");
  const auto target = split(cfg, data, "target");
  LogWriter log(out_dir / "train_log.jsonl", progress, mode_name);
  trainer::adapt(net, bank ? &*bank : nullptr, source, target, cfg.adapt, cfg.mpa, mode, log.sink());
  log.close();
  net.params().save(out_dir / "checkpoint");
  if (bank) bank->save(out_dir / "bank");
}

metrics::EvalReport evaluate(const config::RunConfig& cfg, const panogeo::DatasetManifest& data,
                             const fs::path& checkpoint, const fs::path& out_dir) {
  const auto net = load_model(cfg, checkpoint);
  const auto report = trainer::evaluate(net, split(cfg, data, "test"), split(cfg, data, "test_pinhole"));
  write_text(out_dir / "eval.json", report.to_json() + "\n");
  write_text(out_dir / "eval.txt", report.to_text());
  write_text(out_dir / "sectors.csv", report.sectors_csv());
  return report;
}

const metrics::EvalReport& PipelineResult::at(const std::string& mode) const {
  for (const auto& [m, r] : reports) {
    if (m == mode) return r;
  }
  throw std::out_of_range("no report for mode " + mode);
}

PipelineResult run_pipeline(const config::RunConfig& cfg, const fs::path& out_dir, bool force,
                            std::ostream* progress) {
  auto say = [&](const std::string& line) {
    if (progress) *progress << line << std::endl;
  };
  cfg.validate();
  prepare_dir(out_dir, force);
  write_snapshot(out_dir, cfg);

  bool needs_bank = false;
  for (const auto& m : cfg.modes) {
    if (m != "none") {
      needs_bank = needs_bank || trainer::parse_adapt_mode(m) != trainer::AdaptMode::kSsl;
    }
  }

  say("stage synth");
  const auto data = run_stage("synth", [&] {
    synth(cfg, out_dir / "data");
    return open_manifest(out_dir / "data");
  });
  say("stage train-source");
  const fs::path source_ckpt = out_dir / "source" / "checkpoint";
  run_stage("train-source", [&] {
    fs::create_directories(out_dir / "source");
    train_source(cfg, data, out_dir / "source", progress);
  });
  if (needs_bank) {
    say("stage init-bank");
    run_stage("init-bank", [&] { init_bank(cfg, data, source_ckpt, out_dir / "bank"); });
  }

  PipelineResult result;
  nlohmann::ordered_json summary;
  for (const auto& mode : cfg.modes) {
    fs::path ckpt = source_ckpt;
    if (mode != "none") {
      say("stage adapt-" + mode);
      const fs::path dir = out_dir / ("adapt-" + mode);
      run_stage("adapt-" + mode, [&] {
        fs::create_directories(dir);
        const bool bank = trainer::parse_adapt_mode(mode) != trainer::AdaptMode::kSsl;
        adapt(cfg, data, source_ckpt, bank ? out_dir / "bank" : fs::path(), mode, dir, progress);
      });
      ckpt = dir / "checkpoint";
    }
    say("stage eval-" + mode);
    const fs::path dir = out_dir / ("eval-" + mode);
    auto report = run_stage("eval-" + mode, [&] {
      fs::create_directories(dir);
      return evaluate(cfg, data, ckpt, dir);
    });
    say("  " + mode + ": panorama mIoU " + std::to_string(report.panorama.miou));
    nlohmann::ordered_json row{{"miou", report.panorama.miou}};
    row["pinhole_miou"] = report.pinhole_miou ? nlohmann::ordered_json(*report.pinhole_miou) : nullptr;
    row["gap"] = report.gap() ? nlohmann::ordered_json(*report.gap()) : nullptr;
    summary[mode] = row;
    result.reports.emplace_back(mode, std::move(report));
  }
  write_text(out_dir / "summary.json", summary.dump(2) + "\n");
  return result;
}

namespace {

template <class E>
[[noreturn]] void rethrow_as(const std::string& msg) {
  throw E(msg);
}

}  // namespace

void rethrow_with_stage(const std::string& stage) {
  const std::string prefix = "stage " + stage + ": ";
  try {
    throw;
  } catch (const config::ConfigError& e) {
    rethrow_as<config::ConfigError>(prefix + e.what());
  } catch (const DimensionError& e) {
    rethrow_as<DimensionError>(prefix + e.what());
  } catch (const std::invalid_argument& e) {
    rethrow_as<std::invalid_argument>(prefix + e.what());
  } catch (const NumericalError& e) {
    rethrow_as<NumericalError>(prefix + e.what());
  } catch (const FormatError& e) {
    rethrow_as<FormatError>(prefix + e.what());
  } catch (const DataError& e) {
    rethrow_as<DataError>(prefix + e.what());
  } catch (const fs::filesystem_error& e) {
    rethrow_as<DataError>(prefix + e.what());
  } catch (const std::exception& e) {
    rethrow_as<std::runtime_error>(prefix + e.what());
  } catch (...) {
    throw;
  }
}

int exit_code(const std::exception& e) {
  if (dynamic_cast<const NumericalError*>(&e)) return 4;
  if (dynamic_cast<const FormatError*>(&e) || dynamic_cast<const DataError*>(&e) ||
      dynamic_cast<const fs::filesystem_error*>(&e)) {
    return 3;
  }
  if (dynamic_cast<const std::invalid_argument*>(&e)) return 2;
  return 1;
}

}  // namespace panodeform::pipeline
