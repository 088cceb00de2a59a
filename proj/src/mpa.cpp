#include "panodeform/mpa.hpp"

#include <cmath>
#include <fstream>
#include <json.hpp>
#include <stdexcept>

#include "panodeform/ops.hpp"
#include "panodeform/pdt_io.hpp"

namespace panodeform::mpa {

void AdaptConfig::validate() const {
  if (!(temperature > 0)) throw std::invalid_argument("adapt: temperature must be > 0");
  if (!(lambda >= 0 && lambda <= 1)) throw std::invalid_argument("adapt: lambda must be in [0, 1]");
  if (!(alpha >= 0)) throw std::invalid_argument("adapt: alpha must be >= 0");
  if (!(momentum > 0 && momentum < 1)) throw std::invalid_argument("adapt: momentum must be in (0, 1)");
}

PrototypeBank::PrototypeBank(std::size_t classes, std::size_t channels, double momentum)
    : classes_(classes),
      channels_(channels),
      momentum_(momentum),
      protos_(classes * channels, 0.0),
      initialized_(classes, 0),
      updates_(classes, 0) {
  if (!(momentum > 0 && momentum < 1)) throw std::invalid_argument("bank: momentum must be in (0, 1)");
}

void PrototypeBank::set(std::size_t k, std::span<const double> value) {
  if (value.size() != channels_) throw DimensionError("bank: prototype width mismatch");
  std::copy(value.begin(), value.end(), protos_.begin() + static_cast<std::ptrdiff_t>(k * channels_));
  initialized_[k] = 1;
}

void PrototypeBank::blend(std::size_t k, std::span<const double> batch_mean) {
  if (batch_mean.size() != channels_) throw DimensionError("bank: prototype width mismatch");
  if (!initialized_[k]) {
    set(k, batch_mean);
  } else {
    double* p = protos_.data() + k * channels_;
    for (std::size_t c = 0; c < channels_; ++c) p[c] = momentum_ * p[c] + (1.0 - momentum_) * batch_mean[c];
  }
  ++updates_[k];
}

void PrototypeBank::save(const std::filesystem::path& dir) const {
  std::filesystem::create_directories(dir);
  save_pdt(dir / "prototypes.pdt", Tensor::from({classes_, channels_}, protos_));
  nlohmann::ordered_json doc;
  doc["momentum"] = momentum_;
  nlohmann::ordered_json cls;
  for (std::size_t k = 0; k < classes_; ++k) {
    cls[std::to_string(k)] = {{"initialized", initialized_[k] != 0}, {"update_count", updates_[k]}};
  }
  doc["classes"] = cls;
  std::ofstream os(dir / "bank.json");
  os << doc.dump(2) << "\n";
  if (!os) throw std::runtime_error("cannot write " + (dir / "bank.json").string());
}

PrototypeBank PrototypeBank::load(const std::filesystem::path& dir) {
  std::ifstream is(dir / "bank.json");
  if (!is) throw panogeo::DataError("no prototype bank at " + dir.string());
  Tensor protos = load_pdt(dir / "prototypes.pdt");
  if (protos.rank() != 2) throw panogeo::DataError("bank: prototypes must be K x C");
  try {
    const auto doc = nlohmann::json::parse(is);
    PrototypeBank bank(protos.dim(0), protos.dim(1), doc.at("momentum").get<double>());
    bank.protos_.assign(protos.data().begin(), protos.data().end());
    for (std::size_t k = 0; k < bank.classes_; ++k) {
      const auto& c = doc.at("classes").at(std::to_string(k));
      bank.initialized_[k] = c.at("initialized").get<bool>() ? 1 : 0;
      bank.updates_[k] = c.at("update_count").get<std::uint64_t>();
    }
    return bank;
  } catch (const nlohmann::json::exception& ex) {
    throw panogeo::DataError("malformed bank.json: " + std::string(ex.what()));
  }
}

std::vector<std::int32_t> pseudo_label(const Tensor& logits, std::optional<double> threshold) {
  std::vector<std::int32_t> labels = model::argmax_labels(logits);
  if (!threshold) return labels;
  const std::size_t K = logits.shape().back();
  auto d = logits.data();
  for (std::size_t i = 0; i < labels.size(); ++i) {
    // max softmax probability = 1 / sum_k exp(z_k - z_max)
    const double zmax = d[i * K + static_cast<std::size_t>(labels[i])];
    double denom = 0;
    for (std::size_t k = 0; k < K; ++k) denom += std::exp(d[i * K + k] - zmax);
    if (1.0 / denom < *threshold) labels[i] = kIgnoreLabel;
  }
  return labels;
}

std::vector<std::int32_t> downsample_labels(std::span<const std::int32_t> labels, std::size_t height,
                                            std::size_t width, std::size_t out_h, std::size_t out_w) {
  if (labels.size() != height * width) throw DimensionError("downsample_labels: size mismatch");
  std::vector<std::int32_t> out(out_h * out_w);
  for (std::size_t i = 0; i < out_h; ++i) {
    const std::size_t si = (2 * i + 1) * height / (2 * out_h);
    for (std::size_t j = 0; j < out_w; ++j) {
      const std::size_t sj = (2 * j + 1) * width / (2 * out_w);
      out[i * out_w + j] = labels[si * width + sj];
    }
  }
  return out;
}

ClassMeans::ClassMeans(std::size_t classes, std::size_t channels)
    : classes_(classes), channels_(channels), sums_(classes * channels, 0.0), counts_(classes, 0) {}

void ClassMeans::add(const Tensor& features, std::span<const std::int32_t> labels) {
  if (features.shape().back() != channels_ || features.numel() != labels.size() * channels_) {
    throw DimensionError("class means: features " + shape_str(features.shape()) + " vs " +
                         std::to_string(labels.size()) + " labels");
  }
  auto f = features.data();
  for (std::size_t p = 0; p < labels.size(); ++p) {
    if (labels[p] < 0 || static_cast<std::size_t>(labels[p]) >= classes_) continue;
    const auto k = static_cast<std::size_t>(labels[p]);
    for (std::size_t c = 0; c < channels_; ++c) sums_[k * channels_ + c] += f[p * channels_ + c];
    ++counts_[k];
  }
}

std::vector<double> ClassMeans::mean(std::size_t k) const {
  std::vector<double> m(channels_);
  for (std::size_t c = 0; c < channels_; ++c) m[c] = sums_[k * channels_ + c] / static_cast<double>(counts_[k]);
  return m;
}

PrototypeBank bank_from_features(const std::vector<FeatureLabels>& items, std::size_t classes, double momentum) {
  if (items.empty()) throw std::invalid_argument("init_bank: no scenes");
  const std::size_t C = items.front().features.shape().back();
  ClassMeans means(classes, C);
  for (const auto& it : items) means.add(it.features, it.labels);
  PrototypeBank bank(classes, C, momentum);
  for (std::size_t k = 0; k < classes; ++k) {
    if (means.count(k) > 0) bank.set(k, means.mean(k));
  }
  return bank;
}

namespace {

FeatureLabels features_of(const model::Trans4Pass& net, const panogeo::LabeledScene& scene, const AdaptConfig& cfg) {
  NoGradGuard no_grad;
  auto out = net.forward(scene.image);
  const auto& fused = out.decoded.fused;
  const auto labels = scene.labeled() ? scene.labels : pseudo_label(out.logits, cfg.threshold);
  return {fused, downsample_labels(labels, scene.height, scene.width, fused.dim(0), fused.dim(1))};
}

}  // namespace

PrototypeBank init_bank(const model::Trans4Pass& net, const std::vector<panogeo::LabeledScene>& source,
                        const std::vector<panogeo::LabeledScene>& target, const AdaptConfig& cfg) {
  cfg.validate();
  std::vector<FeatureLabels> items;
  for (const auto& s : source) {
    if (!s.labeled()) throw panogeo::DataError("init_bank: source scene " + s.id + " has no labels");
    items.push_back(features_of(net, s, cfg));
  }
  for (const auto& t : target) {
    panogeo::LabeledScene unlabeled = t;
    unlabeled.labels.clear();  // target supervision is always the model's own prediction
    items.push_back(features_of(net, unlabeled, cfg));
  }
  return bank_from_features(items, net.config().num_classes, cfg.momentum);
}

void update_bank(PrototypeBank& bank, const std::vector<FeatureLabels>& batch) {
  ClassMeans means(bank.classes(), bank.channels());
  for (const auto& it : batch) means.add(it.features, it.labels);
  for (std::size_t k = 0; k < bank.classes(); ++k) {
    if (means.count(k) > 0) bank.blend(k, means.mean(k));
  }
}

PrototypeMap prototypical_map(const PrototypeBank& bank, std::span<const std::int32_t> labels, std::size_t height,
                              std::size_t width) {
  if (labels.size() != height * width) throw DimensionError("prototypical_map: label size mismatch");
  const std::size_t C = bank.channels();
  std::vector<double> v(height * width * C, 0.0);
  std::vector<std::uint8_t> mask(height * width, 0);
  for (std::size_t p = 0; p < labels.size(); ++p) {
    const auto y = labels[p];
    if (y < 0 || static_cast<std::size_t>(y) >= bank.classes() || !bank.initialized(static_cast<std::size_t>(y))) {
      continue;
    }
    auto proto = bank.prototype(static_cast<std::size_t>(y));
    std::copy(proto.begin(), proto.end(), v.begin() + static_cast<std::ptrdiff_t>(p * C));
    mask[p] = 1;
  }
  return {Tensor::from({height, width, C}, std::move(v)), std::move(mask)};
}

Tensor mpa_loss(const Tensor& f, const PrototypeMap& target, std::span<const std::int32_t> labels,
                const AdaptConfig& cfg) {
  cfg.validate();
  if (f.shape() != target.map.shape()) {
    throw DimensionError("mpa_loss: features " + shape_str(f.shape()) + " vs prototypes " +
                         shape_str(target.map.shape()));
  }
  const std::size_t axis = f.rank() - 1;
  const double T = cfg.temperature;
  Tensor p_ref = ops::softmax(ops::scale(target.map, 1.0 / T), axis);
  Tensor p = ops::softmax(ops::scale(f, 1.0 / T), axis);
  Tensor kl = ops::kl_div(p_ref, p, target.mask);
  Tensor ce = ops::cross_entropy(f, labels);
  return ops::add(ops::scale(kl, cfg.lambda * T * T), ops::scale(ce, 1.0 - cfg.lambda));
}

namespace {

Tensor batch_mean(std::vector<Tensor> terms) {
  const double n = static_cast<double>(terms.size());
  return ops::scale(ops::add_n(terms), 1.0 / n);
}

FeatureLabels at_feature_resolution(const SceneOutputs& s) {
  const auto& labels = s.proto_labels.empty() ? s.labels : s.proto_labels;
  return {s.fused, downsample_labels(labels, s.logits.dim(0), s.logits.dim(1), s.fused.dim(0), s.fused.dim(1))};
}

}  // namespace

LossParts total_loss(const std::vector<SceneOutputs>& source, const std::vector<SceneOutputs>& target,
                     const PrototypeBank* bank, bool use_ssl, const AdaptConfig& cfg) {
  if (source.empty()) throw std::invalid_argument("total_loss: empty source batch");
  std::vector<Tensor> seg, ssl, mpa_s, mpa_t;
  auto mpa_term = [&](const SceneOutputs& s) {
    FeatureLabels fl = at_feature_resolution(s);
    PrototypeMap target_map = prototypical_map(*bank, fl.labels, fl.features.dim(0), fl.features.dim(1));
    return mpa_loss(s.fused, target_map, fl.labels, cfg);
  };
  for (const auto& s : source) {
    seg.push_back(ops::cross_entropy(s.logits, s.labels));
    if (bank) mpa_s.push_back(mpa_term(s));
  }
  for (const auto& t : target) {
    if (use_ssl) ssl.push_back(ops::cross_entropy(t.logits, t.labels));
    if (bank) mpa_t.push_back(mpa_term(t));
  }
  LossParts parts;
  std::vector<Tensor> terms{batch_mean(seg)};
  parts.seg = terms[0].item();
  if (!ssl.empty()) {
    terms.push_back(batch_mean(ssl));
    parts.ssl = terms.back().item();
  }
  if (bank && !mpa_s.empty()) {
    Tensor ms = batch_mean(mpa_s);
    parts.mpa_s = ms.item();
    Tensor sum = ms;
    if (!mpa_t.empty()) {
      Tensor mt = batch_mean(mpa_t);
      parts.mpa_t = mt.item();
      sum = ops::add(ms, mt);
    }
    terms.push_back(ops::scale(sum, cfg.alpha));
  }
  parts.total = terms.size() == 1 ? terms[0] : ops::add_n(terms);
  return parts;
}

}  // namespace panodeform::mpa
