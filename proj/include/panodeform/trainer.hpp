#pragma once

// Optimization loops: supervised source training, and target adaptation with
// pseudo-label self-training, mutual prototypical alignment, or both.

#include <cstdint>
#include <functional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "panodeform/metrics.hpp"
#include "panodeform/model.hpp"
#include "panodeform/mpa.hpp"
#include "panodeform/panogeo.hpp"

namespace panodeform::trainer {

struct AugmentConfig {
  bool resize = true;
  double min_ratio = 0.5;
  double max_ratio = 2.0;
  bool flip = true;
  bool crop = true;
  std::size_t crop_height = 64;
  std::size_t crop_width = 64;

  void validate() const;
};

struct TrainConfig {
  double lr0 = 5e-5;
  double power = 0.9;
  double weight_decay = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::size_t batch_size = 2;
  std::size_t max_iters = 300;
  std::uint64_t seed = 0;
  AugmentConfig augment;
  /// Target scenes during adaptation: flip only, full resolution.
  AugmentConfig target_augment{false, 1.0, 1.0, true, false, 0, 0};

  void validate() const;
};

/// lr0 (1 - iter / max_iter)^power.
double poly_lr(std::size_t iter, std::size_t max_iter, double lr0, double power);

struct AdamState {
  std::vector<double> m, v;
  std::uint64_t step = 0;
};

/// One decoupled-weight-decay Adam update of a flat parameter block;
/// the moment buffers are created on first use.
void adamw_step(std::span<double> params, std::span<const double> grads, AdamState& state, double lr,
                const TrainConfig& cfg);

/// AdamW over every parameter of a store, in registration order.
class AdamW {
 public:
  AdamW(ParamStore& store, const TrainConfig& cfg);
  void step(double lr);
  std::uint64_t steps() const { return states_.empty() ? 0 : states_.front().step; }

 private:
  ParamStore* store_;
  TrainConfig cfg_;
  std::vector<AdamState> states_;
};

panogeo::LabeledScene flip_horizontal(const panogeo::LabeledScene& scene);
/// Bilinear image / nearest-label resize.
panogeo::LabeledScene resize(const panogeo::LabeledScene& scene, std::size_t height, std::size_t width);
/// Random resize, flip and crop; crop windows running past the image are
/// padded with black pixels and the ignore label.
panogeo::LabeledScene augment(const panogeo::LabeledScene& scene, const AugmentConfig& cfg, std::mt19937_64& rng);

struct LogRecord {
  std::size_t iter = 0;
  double lr = 0;
  double loss_seg = 0, loss_ssl = 0;
  /// alpha-weighted, so that total is the plain sum of the four parts.
  double loss_mpa_s = 0, loss_mpa_t = 0;
  double total = 0;

  std::string to_json() const;
};

using LogSink = std::function<void(const LogRecord&)>;

/// Minimises the source cross entropy over augmented labeled batches.
std::vector<LogRecord> train_source(model::Trans4Pass& net, const std::vector<panogeo::LabeledScene>& source,
                                    const TrainConfig& cfg, const LogSink& sink = {});

enum class AdaptMode { kSsl, kMpa, kMpaSsl };

std::string to_string(AdaptMode mode);
/// "ssl", "mpa", "mpa+ssl"; throws std::invalid_argument otherwise.
AdaptMode parse_adapt_mode(const std::string& name);

/// Pseudo-labels of every target scene from the model as it is now.
std::vector<std::vector<std::int32_t>> pseudo_labels(const model::Trans4Pass& net,
                                                      const std::vector<panogeo::LabeledScene>& target,
                                                      std::optional<double> threshold);

/// Adaptation from a source-trained model. Pseudo-labels are fixed once at the
/// start; in the MPA modes the bank (required) is updated online from each
/// batch's detached features. The optimizer state starts fresh.
std::vector<LogRecord> adapt(model::Trans4Pass& net, mpa::PrototypeBank* bank,
                             const std::vector<panogeo::LabeledScene>& source,
                             const std::vector<panogeo::LabeledScene>& target, const TrainConfig& cfg,
                             const mpa::AdaptConfig& adapt_cfg, AdaptMode mode, const LogSink& sink = {});

std::vector<std::int32_t> predict(const model::Trans4Pass& net, const Tensor& image);

/// Fraction of labeled pixels predicted correctly.
double pixel_accuracy(const model::Trans4Pass& net, const std::vector<panogeo::LabeledScene>& scenes);

/// Panorama test mIoU with polar breakdown; pinhole scenes (may be empty) give the gap.
metrics::EvalReport evaluate(const model::Trans4Pass& net, const std::vector<panogeo::LabeledScene>& panorama,
                             const std::vector<panogeo::LabeledScene>& pinhole);

}  // namespace panodeform::trainer
