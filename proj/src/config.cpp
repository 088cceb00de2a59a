#include "panodeform/config.hpp"

#include <fstream>
#include <set>
#include <type_traits>

namespace panodeform::config {

using json = nlohmann::json;
using ojson = nlohmann::ordered_json;

RunConfig RunConfig::defaults() {
  RunConfig c;
  // Desk-scale calibration: the source model needs ~900 iterations at this
  // rate to converge; adaptation restarts AdamW at half the rate.
  c.source.lr0 = 1e-3;
  c.source.max_iters = 900;
  c.adapt.lr0 = 5e-4;
  c.adapt.max_iters = 300;
  c.adapt.target_augment = {true, 0.5, 2.0, true, true, 64, 128};
  c.mpa.threshold = 0.9;
  c.mpa.refresh_every = 1;
  return c;
}

void RunConfig::resolve() {
  model.num_classes = data.spec.classes;
  source.seed = seed;
  adapt.seed = seed;
}

std::uint64_t RunConfig::model_seed() const { return seed; }

void RunConfig::validate() const {
  try {
    data.spec.validate();
    model.validate();
    source.validate();
    adapt.validate();
    mpa.validate();
  } catch (const ConfigError&) {
    throw;
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
  if (data.n_source == 0 || data.n_target == 0 || data.n_test == 0) {
    throw ConfigError("data: every split needs at least one scene");
  }
  if (data.spec.pinhole_size % 32 || data.spec.pano_height % 32) {
    throw ConfigError("data: pinhole_size and pano_height must be multiples of 32 (network stride)");
  }
  if (model.num_classes != data.spec.classes) throw ConfigError("model: class count differs from data.classes");
  if (model.embed_dim < model.num_classes) {
    throw ConfigError("model: embed_dim must be >= classes (the MPA cross entropy reads channels 0..K-1)");
  }
  if (modes.empty()) throw ConfigError("pipeline.modes: at least one mode is required");
  for (const auto& m : modes) {
    if (m == "none") continue;
    try {
      trainer::parse_adapt_mode(m);
    } catch (const std::invalid_argument& e) {
      throw ConfigError(std::string("pipeline.modes: ") + e.what());
    }
  }
}

namespace {

template <class T>
const char* type_name() {
  if constexpr (std::is_same_v<T, bool>) return "a boolean";
  else if constexpr (std::is_unsigned_v<T>) return "a non-negative integer";
  else if constexpr (std::is_floating_point_v<T>) return "a number";
  else if constexpr (std::is_same_v<T, std::string>) return "a string";
  else return "an array of non-negative integers";
}

template <class T>
bool matches(const json& v) {
  if constexpr (std::is_same_v<T, bool>) return v.is_boolean();
  else if constexpr (std::is_unsigned_v<T>) return v.is_number_unsigned();
  else if constexpr (std::is_floating_point_v<T>) return v.is_number();
  else if constexpr (std::is_same_v<T, std::string>) return v.is_string();
  else {
    if (!v.is_array() || v.size() != std::tuple_size_v<T>) return false;
    for (const auto& e : v) {
      if (!e.is_number_unsigned()) return false;
    }
    return true;
  }
}

// Reads known keys of one object and rejects everything else.
class Reader {
 public:
  Reader(const json& obj, std::string path) : obj_(obj), path_(std::move(path)) {
    if (!obj.is_object()) throw ConfigError(path_ + ": expected an object");
  }

  template <class T>
  void get(const char* key, T& out) {
    seen_.insert(key);
    if (!obj_.contains(key)) return;
    const json& v = obj_.at(key);
    if (!matches<T>(v)) throw ConfigError(where(key) + ": expected " + type_name<T>());
    out = v.get<T>();
  }

  const json* child(const char* key) {
    seen_.insert(key);
    return obj_.contains(key) ? &obj_.at(key) : nullptr;
  }

  std::string where(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }

  void finish() const {
    for (const auto& [k, v] : obj_.items()) {
      if (!seen_.count(k)) throw ConfigError("unknown config key '" + where(k) + "'");
    }
  }

 private:
  const json& obj_;
  std::string path_;
  std::set<std::string> seen_;
};

ojson augment_json(const trainer::AugmentConfig& a) {
  return {{"resize", a.resize},           {"min_ratio", a.min_ratio}, {"max_ratio", a.max_ratio},
          {"flip", a.flip},               {"crop", a.crop},           {"crop_height", a.crop_height},
          {"crop_width", a.crop_width}};
}

void read_augment(const json& j, const std::string& path, trainer::AugmentConfig& a) {
  Reader r(j, path);
  r.get("resize", a.resize);
  r.get("min_ratio", a.min_ratio);
  r.get("max_ratio", a.max_ratio);
  r.get("flip", a.flip);
  r.get("crop", a.crop);
  r.get("crop_height", a.crop_height);
  r.get("crop_width", a.crop_width);
  r.finish();
}

ojson train_json(const trainer::TrainConfig& t, bool with_target) {
  ojson j{{"lr0", t.lr0},
          {"power", t.power},
          {"weight_decay", t.weight_decay},
          {"beta1", t.beta1},
          {"beta2", t.beta2},
          {"eps", t.eps},
          {"batch_size", t.batch_size},
          {"max_iters", t.max_iters},
          {"augment", augment_json(t.augment)}};
  if (with_target) j["target_augment"] = augment_json(t.target_augment);
  return j;
}

void read_train(const json& j, const std::string& path, bool with_target, trainer::TrainConfig& t) {
  Reader r(j, path);
  r.get("lr0", t.lr0);
  r.get("power", t.power);
  r.get("weight_decay", t.weight_decay);
  r.get("beta1", t.beta1);
  r.get("beta2", t.beta2);
  r.get("eps", t.eps);
  r.get("batch_size", t.batch_size);
  r.get("max_iters", t.max_iters);
  if (const json* a = r.child("augment")) read_augment(*a, r.where("augment"), t.augment);
  if (with_target) {
    if (const json* a = r.child("target_augment")) read_augment(*a, r.where("target_augment"), t.target_augment);
  }
  r.finish();
}

}  // namespace

ojson to_json(const RunConfig& c) {
  const auto& s = c.data.spec;
  const auto& m = c.model;
  ojson doc;
  doc["seed"] = c.seed;
  doc["data"] = {{"classes", s.classes},
                 {"min_objects", s.min_objects},
                 {"max_objects", s.max_objects},
                 {"fov_deg", s.fov_deg},
                 {"pinhole_size", s.pinhole_size},
                 {"pano_height", s.pano_height},
                 {"max_pitch_deg", s.max_pitch_deg},
                 {"noise", s.noise},
                 {"n_source", c.data.n_source},
                 {"n_target", c.data.n_target},
                 {"n_test", c.data.n_test}};
  doc["model"] = {{"strides", m.strides},
                  {"channels", m.channels},
                  {"depths", m.depths},
                  {"heads", m.heads},
                  {"reduction", m.reduction},
                  {"patch_sizes", m.patch_sizes},
                  {"mlp_ratio", m.mlp_ratio},
                  {"embed_dim", m.embed_dim},
                  {"r", m.r},
                  {"dmlp_max_groups", m.dmlp_max_groups},
                  {"deformable_encoder", m.deformable_encoder},
                  {"deformable_decoder_pe", m.deformable_decoder_pe},
                  {"decoder", m.decoder == model::DecoderKind::kDeformable ? "deformable" : "vanilla"},
                  {"border", m.border == Border::kClamp ? "clamp" : "wrap"}};
  doc["trainer"] = train_json(c.source, false);
  doc["adapt"] = train_json(c.adapt, true);
  doc["mpa"] = {{"temperature", c.mpa.temperature},
                {"lambda", c.mpa.lambda},
                {"alpha", c.mpa.alpha},
                {"momentum", c.mpa.momentum},
                {"threshold", c.mpa.threshold ? ojson(*c.mpa.threshold) : ojson(nullptr)},
                {"refresh_every", c.mpa.refresh_every}};
  doc["pipeline"] = {{"modes", c.modes}};
  return doc;
}

RunConfig from_json(const json& doc, RunConfig c) {
  Reader top(doc, "");
  top.get("seed", c.seed);
  if (const json* d = top.child("data")) {
    Reader r(*d, "data");
    auto& s = c.data.spec;
    r.get("classes", s.classes);
    r.get("min_objects", s.min_objects);
    r.get("max_objects", s.max_objects);
    r.get("fov_deg", s.fov_deg);
    r.get("pinhole_size", s.pinhole_size);
    r.get("pano_height", s.pano_height);
    r.get("max_pitch_deg", s.max_pitch_deg);
    r.get("noise", s.noise);
    r.get("n_source", c.data.n_source);
    r.get("n_target", c.data.n_target);
    r.get("n_test", c.data.n_test);
    r.finish();
  }
  if (const json* d = top.child("model")) {
    Reader r(*d, "model");
    auto& m = c.model;
    r.get("strides", m.strides);
    r.get("channels", m.channels);
    r.get("depths", m.depths);
    r.get("heads", m.heads);
    r.get("reduction", m.reduction);
    r.get("patch_sizes", m.patch_sizes);
    r.get("mlp_ratio", m.mlp_ratio);
    r.get("embed_dim", m.embed_dim);
    r.get("r", m.r);
    r.get("dmlp_max_groups", m.dmlp_max_groups);
    r.get("deformable_encoder", m.deformable_encoder);
    r.get("deformable_decoder_pe", m.deformable_decoder_pe);
    std::string decoder = m.decoder == model::DecoderKind::kDeformable ? "deformable" : "vanilla";
    r.get("decoder", decoder);
    if (decoder != "deformable" && decoder != "vanilla") throw ConfigError("model.decoder: deformable or vanilla");
    m.decoder = decoder == "deformable" ? model::DecoderKind::kDeformable : model::DecoderKind::kVanilla;
    std::string border = m.border == Border::kClamp ? "clamp" : "wrap";
    r.get("border", border);
    if (border != "clamp" && border != "wrap") throw ConfigError("model.border: clamp or wrap");
    m.border = border == "clamp" ? Border::kClamp : Border::kWrapHorizontal;
    r.finish();
  }
  if (const json* d = top.child("trainer")) read_train(*d, "trainer", false, c.source);
  if (const json* d = top.child("adapt")) read_train(*d, "adapt", true, c.adapt);
  if (const json* d = top.child("mpa")) {
    Reader r(*d, "mpa");
    r.get("temperature", c.mpa.temperature);
    r.get("lambda", c.mpa.lambda);
    r.get("alpha", c.mpa.alpha);
    r.get("momentum", c.mpa.momentum);
    if (const json* t = r.child("threshold")) {
      if (t->is_null()) {
        c.mpa.threshold.reset();
      } else if (t->is_number()) {
        c.mpa.threshold = t->get<double>();
      } else {
        throw ConfigError("mpa.threshold: expected a number or null");
      }
    }
    r.get("refresh_every", c.mpa.refresh_every);
    r.finish();
  }
  if (const json* d = top.child("pipeline")) {
    Reader r(*d, "pipeline");
    if (const json* modes = r.child("modes")) {
      if (!modes->is_array()) throw ConfigError("pipeline.modes: expected an array of strings");
      c.modes.clear();
      for (const auto& m : *modes) {
        if (!m.is_string()) throw ConfigError("pipeline.modes: expected an array of strings");
        c.modes.push_back(m.get<std::string>());
      }
    }
    r.finish();
  }
  top.finish();
  return c;
}

void apply_override(ojson& doc, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) throw ConfigError("override '" + assignment + "' is not key=value");
  const std::string path = assignment.substr(0, eq), text = assignment.substr(eq + 1);
  ojson* node = &doc;
  std::size_t start = 0;
  while (true) {
    const auto dot = path.find('.', start);
    const std::string key = path.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
    if (!node->is_object() || !node->contains(key)) throw ConfigError("unknown config key '" + path + "'");
    node = &(*node)[key];
    if (dot == std::string::npos) break;
    start = dot + 1;
  }
  ojson value;
  try {
    value = ojson::parse(text);
  } catch (const ojson::parse_error&) {
    value = text;
  }
  *node = value;
}

RunConfig load(const std::filesystem::path& file, const std::vector<std::string>& overrides) {
  RunConfig cfg = RunConfig::defaults();
  if (!file.empty()) {
    std::ifstream is(file);
    if (!is) throw ConfigError("cannot read config file " + file.string());
    json doc;
    try {
      doc = json::parse(is);
    } catch (const json::parse_error& e) {
      throw ConfigError(file.string() + ": " + e.what());
    }
    cfg = from_json(doc, cfg);
  }
  if (!overrides.empty()) {
    ojson doc = to_json(cfg);
    for (const auto& o : overrides) apply_override(doc, o);
    cfg = from_json(json(doc), RunConfig::defaults());
  }
  cfg.resolve();
  cfg.validate();
  return cfg;
}

}  // namespace panodeform::config
