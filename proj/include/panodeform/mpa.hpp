#pragma once

// Mutual prototypical adaptation: a class-prototype bank pooled over both
// domains, prototype-composed feature targets, and the distillation loss that
// pulls fused decoder features towards them.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <vector>

#include "panodeform/model.hpp"
#include "panodeform/panogeo.hpp"
#include "panodeform/tensor.hpp"

namespace panodeform::mpa {

struct AdaptConfig {
  double temperature = 20.0;
  double lambda = 0.9;
  double alpha = 0.001;
  double momentum = 0.999;
  /// Pixels whose max class probability is below this become ignore.
  std::optional<double> threshold;
  /// Recompute target pseudo-labels with the current model every this many
  /// adaptation iterations; 1 takes them from each batch's own forward pass,
  /// 0 keeps the source model's labels throughout.
  std::size_t refresh_every = 0;

  void validate() const;
};

class PrototypeBank {
 public:
  PrototypeBank() = default;
  PrototypeBank(std::size_t classes, std::size_t channels, double momentum = 0.999);

  std::size_t classes() const { return classes_; }
  std::size_t channels() const { return channels_; }
  double momentum() const { return momentum_; }

  std::span<const double> prototype(std::size_t k) const { return {protos_.data() + k * channels_, channels_}; }
  bool initialized(std::size_t k) const { return initialized_[k] != 0; }
  std::uint64_t update_count(std::size_t k) const { return updates_[k]; }

  /// Sets P_k outright and marks it initialized (update count unchanged).
  void set(std::size_t k, std::span<const double> value);
  /// P_k <- m P_k + (1 - m) batch_mean, or P_k <- batch_mean if P_k is not yet initialized.
  void blend(std::size_t k, std::span<const double> batch_mean);

  /// `prototypes.pdt` [K x C] plus `bank.json` {momentum, classes: {k: {initialized, update_count}}}.
  void save(const std::filesystem::path& dir) const;
  static PrototypeBank load(const std::filesystem::path& dir);

 private:
  std::size_t classes_ = 0;
  std::size_t channels_ = 0;
  double momentum_ = 0.999;
  std::vector<double> protos_;
  std::vector<std::uint8_t> initialized_;
  std::vector<std::uint64_t> updates_;
};

/// Argmax class per pixel of [H x W x K] scores (ties -> lowest index); with a
/// threshold, pixels whose max softmax probability is below it become 255.
std::vector<std::int32_t> pseudo_label(const Tensor& logits, std::optional<double> threshold = std::nullopt);

/// Nearest-neighbour resize of an H x W label map: output (i, j) reads
/// input (floor((i + 0.5) H / h), floor((j + 0.5) W / w)).
std::vector<std::int32_t> downsample_labels(std::span<const std::int32_t> labels, std::size_t height,
                                            std::size_t width, std::size_t out_h, std::size_t out_w);

/// Per-class running sums of feature vectors, for class means over many maps.
class ClassMeans {
 public:
  ClassMeans(std::size_t classes, std::size_t channels);
  /// features [h x w x C], labels h*w (255 and labels >= K skipped).
  void add(const Tensor& features, std::span<const std::int32_t> labels);
  std::uint64_t count(std::size_t k) const { return counts_[k]; }
  std::vector<double> mean(std::size_t k) const;

 private:
  std::size_t classes_, channels_;
  std::vector<double> sums_;
  std::vector<std::uint64_t> counts_;
};

/// Fused features of a scene and its labels at the feature resolution.
struct FeatureLabels {
  Tensor features;                   // [h x w x C]
  std::vector<std::int32_t> labels;  // h*w
};

/// One pass over both domains: source pixels use ground truth, target pixels
/// the model's pseudo-labels; P_k is the mean of all fused-feature pixels of
/// class k. Classes never seen stay uninitialized.
PrototypeBank init_bank(const model::Trans4Pass& net, const std::vector<panogeo::LabeledScene>& source,
                        const std::vector<panogeo::LabeledScene>& target, const AdaptConfig& cfg);

/// Bank built from already computed features (the pooling step of init_bank).
PrototypeBank bank_from_features(const std::vector<FeatureLabels>& items, std::size_t classes, double momentum);

/// EMA update with the batch class means pooled over all items; classes
/// absent from the batch are untouched.
void update_bank(PrototypeBank& bank, const std::vector<FeatureLabels>& batch);

struct PrototypeMap {
  Tensor map;                       // [h x w x C]
  std::vector<std::uint8_t> mask;   // 1 where the pixel has an initialized prototype
};

PrototypeMap prototypical_map(const PrototypeBank& bank, std::span<const std::int32_t> labels, std::size_t height,
                              std::size_t width);

/// lambda T^2 KL(softmax(f_hat / T) || softmax(f / T)) + (1 - lambda) CE(y, softmax(f)).
/// The KL mean runs over pixels with an initialized prototype, the CE mean over
/// pixels with a valid label (label k selects feature channel k).
Tensor mpa_loss(const Tensor& f, const PrototypeMap& target, std::span<const std::int32_t> labels,
                const AdaptConfig& cfg);

/// Per-scene training inputs for the combined objective.
struct SceneOutputs {
  Tensor logits;                     // [H x W x K]
  Tensor fused;                      // [H/4 x W/4 x C_emb]
  std::vector<std::int32_t> labels;  // H*W ground truth or pseudo-labels
  /// Labels for the MPA terms when they differ from `labels` (empty: use `labels`).
  std::vector<std::int32_t> proto_labels;
};

struct LossParts {
  Tensor total;
  double seg = 0, ssl = 0, mpa_s = 0, mpa_t = 0;
};

/// SEG + SSL + alpha (MPA_s + MPA_t); each term is a mean over its batch.
/// `use_ssl=false` drops the pseudo-label CE; `bank=nullptr` drops both MPA terms.
LossParts total_loss(const std::vector<SceneOutputs>& source, const std::vector<SceneOutputs>& target,
                     const PrototypeBank* bank, bool use_ssl, const AdaptConfig& cfg);

}  // namespace panodeform::mpa
