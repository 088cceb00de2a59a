#include "panodeform/trainer.hpp"

#include <cmath>
#include <json.hpp>
#include <stdexcept>

#include "panodeform/ops.hpp"
#include "panodeform/rng.hpp"

namespace panodeform::trainer {

using panogeo::LabeledScene;

void AugmentConfig::validate() const {
  if (resize && !(min_ratio > 0 && min_ratio <= max_ratio)) {
    throw std::invalid_argument("augment: need 0 < min_ratio <= max_ratio");
  }
  if (crop && (crop_height == 0 || crop_width == 0 || crop_height % 32 || crop_width % 32)) {
    throw std::invalid_argument("augment: crop size must be a positive multiple of 32");
  }
}

void TrainConfig::validate() const {
  if (!(lr0 > 0)) throw std::invalid_argument("trainer: lr0 must be > 0");
  if (!(power > 0)) throw std::invalid_argument("trainer: power must be > 0");
  if (!(weight_decay >= 0)) throw std::invalid_argument("trainer: weight_decay must be >= 0");
  if (!(beta1 >= 0 && beta1 < 1 && beta2 >= 0 && beta2 < 1)) throw std::invalid_argument("trainer: betas in [0, 1)");
  if (!(eps > 0)) throw std::invalid_argument("trainer: eps must be > 0");
  if (batch_size == 0) throw std::invalid_argument("trainer: batch_size must be > 0");
  augment.validate();
  target_augment.validate();
}

double poly_lr(std::size_t iter, std::size_t max_iter, double lr0, double power) {
  if (iter > max_iter || max_iter == 0) throw std::invalid_argument("poly_lr: need 0 <= iter <= max_iter");
  return lr0 * std::pow(1.0 - static_cast<double>(iter) / static_cast<double>(max_iter), power);
}

void adamw_step(std::span<double> params, std::span<const double> grads, AdamState& state, double lr,
                const TrainConfig& cfg) {
  if (grads.size() != params.size()) throw DimensionError("adamw: gradient size does not match parameters");
  if (state.m.empty()) {
    state.m.assign(params.size(), 0.0);
    state.v.assign(params.size(), 0.0);
  }
  if (state.m.size() != params.size()) throw DimensionError("adamw: optimizer state does not match parameters");
  ++state.step;
  const double c1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    const double g = grads[i];
    state.m[i] = cfg.beta1 * state.m[i] + (1 - cfg.beta1) * g;
    state.v[i] = cfg.beta2 * state.v[i] + (1 - cfg.beta2) * g * g;
    params[i] -= lr * cfg.weight_decay * params[i];
    params[i] -= lr * (state.m[i] / c1) / (std::sqrt(state.v[i] / c2) + cfg.eps);
  }
}

AdamW::AdamW(ParamStore& store, const TrainConfig& cfg)
    : store_(&store), cfg_(cfg), states_(store.items().size()) {}

void AdamW::step(double lr) {
  std::size_t i = 0;
  for (auto [name, t] : store_->items()) {
    // Parameters untouched by this graph have no gradient buffer: zero gradient.
    std::vector<double> zeros;
    std::span<const double> g = t.grad();
    if (!t.has_grad()) {
      zeros.assign(t.numel(), 0.0);
      g = zeros;
    }
    adamw_step(t.mutable_data(), g, states_[i++], lr, cfg_);
  }
}

LabeledScene flip_horizontal(const LabeledScene& scene) {
  const std::size_t H = scene.height, W = scene.width, C = scene.image.dim(2);
  LabeledScene out = scene;
  out.image = scene.image.clone();
  auto src = scene.image.data();
  auto dst = out.image.mutable_data();
  for (std::size_t i = 0; i < H; ++i) {
    for (std::size_t j = 0; j < W; ++j) {
      for (std::size_t c = 0; c < C; ++c) dst[(i * W + j) * C + c] = src[(i * W + (W - 1 - j)) * C + c];
      if (scene.labeled()) out.labels[i * W + j] = scene.labels[i * W + (W - 1 - j)];
    }
  }
  return out;
}

LabeledScene resize(const LabeledScene& scene, std::size_t height, std::size_t width) {
  LabeledScene out = scene;
  {
    NoGradGuard no_grad;
    out.image = ops::upsample_bilinear(scene.image, height, width);
  }
  if (scene.labeled()) out.labels = mpa::downsample_labels(scene.labels, scene.height, scene.width, height, width);
  out.height = height;
  out.width = width;
  return out;
}

LabeledScene augment(const LabeledScene& scene, const AugmentConfig& cfg, std::mt19937_64& rng) {
  LabeledScene s = scene;
  if (cfg.resize) {
    const double ratio = uniform(rng, cfg.min_ratio, cfg.max_ratio);
    const auto h = std::max<std::size_t>(1, static_cast<std::size_t>(std::lround(static_cast<double>(s.height) * ratio)));
    const auto w = std::max<std::size_t>(1, static_cast<std::size_t>(std::lround(static_cast<double>(s.width) * ratio)));
    if (h != s.height || w != s.width) s = resize(s, h, w);
  }
  if (cfg.flip && uniform01(rng) < 0.5) s = flip_horizontal(s);
  if (!cfg.crop) return s;

  const std::size_t ch = cfg.crop_height, cw = cfg.crop_width, C = s.image.dim(2);
  const std::size_t top = s.height > ch ? uniform_index(rng, s.height - ch + 1) : 0;
  const std::size_t left = s.width > cw ? uniform_index(rng, s.width - cw + 1) : 0;
  std::vector<double> img(ch * cw * C, 0.0);
  std::vector<std::int32_t> labels(s.labeled() ? ch * cw : 0, kIgnoreLabel);
  auto src = s.image.data();
  for (std::size_t i = 0; i < ch && top + i < s.height; ++i) {
    for (std::size_t j = 0; j < cw && left + j < s.width; ++j) {
      const std::size_t from = (top + i) * s.width + left + j;
      for (std::size_t c = 0; c < C; ++c) img[(i * cw + j) * C + c] = src[from * C + c];
      if (s.labeled()) labels[i * cw + j] = s.labels[from];
    }
  }
  s.image = Tensor::from({ch, cw, C}, std::move(img));
  s.labels = std::move(labels);
  s.height = ch;
  s.width = cw;
  return s;
}

std::string LogRecord::to_json() const {
  nlohmann::ordered_json j{{"iter", iter},           {"lr", lr},
                           {"loss_seg", loss_seg},   {"loss_ssl", loss_ssl},
                           {"loss_mpa_s", loss_mpa_s}, {"loss_mpa_t", loss_mpa_t},
                           {"total", total}};
  return j.dump();
}

namespace {

// Epoch-wise shuffled order (portable Fisher-Yates on our own uniform draws).
class Sampler {
 public:
  Sampler(std::size_t n, std::mt19937_64 rng) : n_(n), rng_(std::move(rng)) {
    if (n == 0) throw panogeo::DataError("trainer: empty split");
  }

  std::size_t next() {
    if (pos_ == order_.size()) reshuffle();
    return order_[pos_++];
  }

 private:
  void reshuffle() {
    order_.resize(n_);
    for (std::size_t i = 0; i < n_; ++i) order_[i] = i;
    for (std::size_t i = n_; i > 1; --i) std::swap(order_[i - 1], order_[uniform_index(rng_, i)]);
    pos_ = 0;
  }

  std::size_t n_;
  std::mt19937_64 rng_;
  std::vector<std::size_t> order_;
  std::size_t pos_ = 0;
};

mpa::SceneOutputs run(const model::Trans4Pass& net, const LabeledScene& s) {
  auto out = net.forward(s.image);
  return {out.logits, out.decoded.fused, s.labels};
}

LogRecord record(std::size_t iter, double lr, const mpa::LossParts& parts, double alpha) {
  LogRecord r;
  r.iter = iter;
  r.lr = lr;
  r.loss_seg = parts.seg;
  r.loss_ssl = parts.ssl;
  r.loss_mpa_s = alpha * parts.mpa_s;
  r.loss_mpa_t = alpha * parts.mpa_t;
  r.total = parts.total.item();
  if (!std::isfinite(r.total)) throw NumericalError("training loss is not finite at iteration " + std::to_string(iter));
  return r;
}

void step(model::Trans4Pass& net, AdamW& opt, const Tensor& loss, double lr) {
  net.params().zero_grad();
  loss.backward();
  opt.step(lr);
}

}  // namespace

std::vector<LogRecord> train_source(model::Trans4Pass& net, const std::vector<LabeledScene>& source,
                                    const TrainConfig& cfg, const LogSink& sink) {
  cfg.validate();
  for (const auto& s : source) {
    if (!s.labeled()) throw panogeo::DataError("train_source: scene " + s.id + " has no labels");
  }
  Sampler order(source.size(), make_stream(cfg.seed, "source/order"));
  auto aug_rng = make_stream(cfg.seed, "source/augment");
  AdamW opt(net.params(), cfg);
  const mpa::AdaptConfig unused;
  std::vector<LogRecord> log;
  for (std::size_t it = 0; it < cfg.max_iters; ++it) {
    const double lr = poly_lr(it, cfg.max_iters, cfg.lr0, cfg.power);
    std::vector<mpa::SceneOutputs> batch;
    for (std::size_t b = 0; b < cfg.batch_size; ++b) batch.push_back(run(net, augment(source[order.next()], cfg.augment, aug_rng)));
    auto parts = mpa::total_loss(batch, {}, nullptr, false, unused);
    log.push_back(record(it, lr, parts, 0.0));
    if (sink) sink(log.back());
    step(net, opt, parts.total, lr);
  }
  return log;
}

std::string to_string(AdaptMode mode) {
  switch (mode) {
    case AdaptMode::kSsl: return "ssl";
    case AdaptMode::kMpa: return "mpa";
    case AdaptMode::kMpaSsl: return "mpa+ssl";
  }
  return "?";
}

AdaptMode parse_adapt_mode(const std::string& name) {
  if (name == "ssl") return AdaptMode::kSsl;
  if (name == "mpa") return AdaptMode::kMpa;
  if (name == "mpa+ssl") return AdaptMode::kMpaSsl;
  throw std::invalid_argument("unknown adaptation mode '" + name + "' (expected ssl, mpa or mpa+ssl)");
}

std::vector<std::vector<std::int32_t>> pseudo_labels(const model::Trans4Pass& net,
                                                      const std::vector<LabeledScene>& target,
                                                      std::optional<double> threshold) {
  NoGradGuard no_grad;
  std::vector<std::vector<std::int32_t>> out;
  for (const auto& t : target) out.push_back(mpa::pseudo_label(net.forward(t.image).logits, threshold));
  return out;
}

std::vector<LogRecord> adapt(model::Trans4Pass& net, mpa::PrototypeBank* bank, const std::vector<LabeledScene>& source,
                             const std::vector<LabeledScene>& target, const TrainConfig& cfg,
                             const mpa::AdaptConfig& adapt_cfg, AdaptMode mode, const LogSink& sink) {
  cfg.validate();
  adapt_cfg.validate();
  const bool use_mpa = mode != AdaptMode::kSsl;
  const bool use_ssl = mode != AdaptMode::kMpa;
  if (use_mpa && !bank) {
    throw std::invalid_argument("adapt: mode " + to_string(mode) + " needs a prototype bank; run init-bank first");
  }
  if (use_mpa && (bank->classes() != net.config().num_classes || bank->channels() != net.config().embed_dim)) {
    throw std::invalid_argument("adapt: prototype bank does not match the model");
  }
  for (const auto& s : source) {
    if (!s.labeled()) throw panogeo::DataError("adapt: source scene " + s.id + " has no labels");
  }

  // Target supervision: the model's own predictions, fixed at the start unless refreshed.
  std::vector<LabeledScene> pseudo = target;
  auto relabel = [&] {
    const auto labels = pseudo_labels(net, target, adapt_cfg.threshold);
    for (std::size_t i = 0; i < pseudo.size(); ++i) pseudo[i].labels = labels[i];
  };
  relabel();

  Sampler src_order(source.size(), make_stream(cfg.seed, "adapt/source-order"));
  Sampler tgt_order(pseudo.size(), make_stream(cfg.seed, "adapt/target-order"));
  auto aug_rng = make_stream(cfg.seed, "adapt/augment");
  AdamW opt(net.params(), cfg);
  std::vector<LogRecord> log;
  for (std::size_t it = 0; it < cfg.max_iters; ++it) {
    if (adapt_cfg.refresh_every > 1 && it > 0 && it % adapt_cfg.refresh_every == 0) relabel();
    const double lr = poly_lr(it, cfg.max_iters, cfg.lr0, cfg.power);
    std::vector<mpa::SceneOutputs> src, tgt;
    for (std::size_t b = 0; b < cfg.batch_size; ++b) src.push_back(run(net, augment(source[src_order.next()], cfg.augment, aug_rng)));
    for (std::size_t b = 0; b < cfg.batch_size; ++b) {
      tgt.push_back(run(net, augment(pseudo[tgt_order.next()], cfg.target_augment, aug_rng)));
      // Prototype targets and bank updates follow the current model's predictions.
      auto current = [&] { return mpa::pseudo_label(tgt.back().logits, adapt_cfg.threshold); };
      if (adapt_cfg.refresh_every == 1) tgt.back().labels = current();
      if (use_mpa) tgt.back().proto_labels = adapt_cfg.refresh_every == 1 ? tgt.back().labels : current();
    }
    auto parts = mpa::total_loss(src, tgt, use_mpa ? bank : nullptr, use_ssl, adapt_cfg);
    log.push_back(record(it, lr, parts, use_mpa ? adapt_cfg.alpha : 0.0));
    if (sink) sink(log.back());
    step(net, opt, parts.total, lr);

    if (use_mpa) {
      std::vector<mpa::FeatureLabels> batch;
      for (const auto* group : {&src, &tgt}) {
        for (const auto& s : *group) {
          const std::size_t h = s.fused.dim(0), w = s.fused.dim(1);
          const auto& labels = s.proto_labels.empty() ? s.labels : s.proto_labels;
          batch.push_back({s.fused.detach(), mpa::downsample_labels(labels, s.logits.dim(0), s.logits.dim(1), h, w)});
        }
      }
      mpa::update_bank(*bank, batch);
    }
  }
  return log;
}

std::vector<std::int32_t> predict(const model::Trans4Pass& net, const Tensor& image) {
  NoGradGuard no_grad;
  return model::argmax_labels(net.forward(image).logits);
}

double pixel_accuracy(const model::Trans4Pass& net, const std::vector<LabeledScene>& scenes) {
  std::size_t correct = 0, total = 0;
  for (const auto& s : scenes) {
    const auto pred = predict(net, s.image);
    for (std::size_t i = 0; i < pred.size(); ++i) {
      if (s.labels[i] == kIgnoreLabel) continue;
      correct += pred[i] == s.labels[i];
      ++total;
    }
  }
  return total ? static_cast<double>(correct) / static_cast<double>(total) : 0.0;
}

metrics::EvalReport evaluate(const model::Trans4Pass& net, const std::vector<LabeledScene>& panorama,
                             const std::vector<LabeledScene>& pinhole) {
  const std::size_t K = net.config().num_classes;
  metrics::ConfusionMatrix pano(K), pin(K);
  metrics::PolarAccumulator polar(K);
  for (const auto& s : panorama) {
    if (!s.labeled()) throw panogeo::DataError("evaluate: test scene " + s.id + " has no labels");
    const auto pred = predict(net, s.image);
    pano.accumulate(pred, s.labels);
    polar.accumulate(pred, s.labels, s.height, s.width);
  }
  for (const auto& s : pinhole) {
    if (!s.labeled()) throw panogeo::DataError("evaluate: pinhole test scene " + s.id + " has no labels");
    pin.accumulate(predict(net, s.image), s.labels);
  }
  return metrics::make_report(pano, polar, pinhole.empty() ? nullptr : &pin);
}

}  // namespace panodeform::trainer
