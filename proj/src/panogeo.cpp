#include "panodeform/panogeo.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <json.hpp>

#include "panodeform/pdt_io.hpp"
#include "panodeform/rng.hpp"

namespace panodeform::panogeo {

namespace fs = std::filesystem;
using json = nlohmann::json;

const char* domain_name(Domain d) { return d == Domain::kPinhole ? "pinhole" : "panorama"; }

void SceneSpec::validate() const {
  if (classes < 2) throw std::invalid_argument("scene: need at least 2 classes");
  if (min_objects > max_objects) throw std::invalid_argument("scene: min_objects > max_objects");
  if (!(fov_deg > 0 && fov_deg < 180)) throw std::invalid_argument("scene: fov must be in (0, 180) degrees");
  if (pinhole_size == 0 || pano_height == 0) throw std::invalid_argument("scene: zero image size");
  if (noise < 0) throw std::invalid_argument("scene: negative noise");
}

Vec3 direction(double theta, double phi) {
  return {std::sin(phi) * std::cos(theta), std::sin(phi) * std::sin(theta), std::cos(phi)};
}

std::array<double, 2> angles(const Vec3& d) {
  const double n = std::sqrt(d.x * d.x + d.y * d.y + d.z * d.z);
  double theta = std::atan2(d.y, d.x);
  if (theta < 0) theta += 2 * kPi;
  if (theta >= 2 * kPi) theta = 0;
  return {theta, std::acos(std::clamp(d.z / n, -1.0, 1.0))};
}

namespace {

double dot(const Vec3& a, const Vec3& b) { return a.x * b.x + a.y * b.y + a.z * b.z; }

struct ClassLook {
  std::array<double, 3> base;
  int texture;  // 0 none, 1 stripes, 2 checker, 3 dots
};

ClassLook object_look(std::int32_t label) {
  static const ClassLook looks[] = {
      {{0.78, 0.32, 0.26}, 1},
      {{0.72, 0.38, 0.30}, 2},
      {{0.30, 0.62, 0.34}, 3},
      {{0.62, 0.34, 0.70}, 1},
      {{0.85, 0.75, 0.25}, 2},
  };
  return looks[(label - kFirstObject) % 5];
}

std::array<double, 3> shade(const std::array<double, 3>& c, double delta) {
  return {c[0] + delta, c[1] + delta, c[2] + delta};
}

}  // namespace

SphereWorld::SphereWorld(const SceneSpec& spec, std::uint64_t seed) : spec_(spec), seed_(seed) {
  spec.validate();
  auto rng = make_stream(seed, "world");
  for (auto& p : skyline_phase_) p = uniform(rng, 0, 2 * kPi);
  if (spec.classes < 4) return;
  const std::size_t n = spec.min_objects + uniform_index(rng, spec.max_objects - spec.min_objects + 1);
  const std::size_t kinds = spec.classes - kFirstObject;
  const std::size_t first = uniform_index(rng, kinds);
  for (std::size_t k = 0; k < n; ++k) {
    SphereObject o;
    // Objects stay clear of the theta = 0 seam (angular half-width < atan(0.35)),
    // keeping the wrap-around columns label-continuous.
    o.theta = uniform(rng, 0.4, 2 * kPi - 0.4);
    o.phi = kPi / 2 + uniform(rng, -0.25, 0.2);
    o.half_u = uniform(rng, 0.12, 0.35);
    o.half_v = uniform(rng, 0.10, 0.30);
    o.ellipse = uniform01(rng) < 0.5;
    o.label = static_cast<std::int32_t>(kFirstObject + (first + k) % kinds);
    objects_.push_back(o);
  }
}

double SphereWorld::wall_top(double theta) const {
  if (spec_.classes == 2) return kPi / 2;
  return kPi / 2 - 0.30 + 0.06 * std::sin(2 * theta + skyline_phase_[0]) +
         0.04 * std::sin(5 * theta + skyline_phase_[1]);
}

double SphereWorld::ground_top(double theta) const {
  if (spec_.classes == 2) return kPi / 2;
  return kPi / 2 + 0.10 + 0.03 * std::sin(3 * theta + skyline_phase_[2]);
}

Surface SphereWorld::surface(const Vec3& d) const {
  const auto [theta, phi] = angles(d);
  // Later objects are painted over earlier ones.
  for (auto it = objects_.rbegin(); it != objects_.rend(); ++it) {
    const Vec3 c = direction(it->theta, it->phi);
    const double depth = dot(d, c);
    if (depth <= 0) continue;
    const Vec3 e_u{-std::sin(it->theta), std::cos(it->theta), 0.0};
    const Vec3 e_v{std::cos(it->phi) * std::cos(it->theta), std::cos(it->phi) * std::sin(it->theta),
                   -std::sin(it->phi)};
    const double u = dot(d, e_u) / depth, v = dot(d, e_v) / depth;
    const double nu = u / it->half_u, nv = v / it->half_v;
    const bool inside = it->ellipse ? nu * nu + nv * nv <= 1.0 : std::abs(nu) <= 1.0 && std::abs(nv) <= 1.0;
    if (!inside) continue;
    const ClassLook look = object_look(it->label);
    double delta = 0;
    switch (look.texture) {
      case 1:
        delta = std::sin(2 * kPi * v / 0.10) > 0 ? 0.18 : -0.18;
        break;
      case 2: {
        const auto cell = static_cast<std::int64_t>(std::floor(u / 0.08)) + static_cast<std::int64_t>(std::floor(v / 0.08));
        delta = (cell & 1) ? -0.18 : 0.18;
        break;
      }
      case 3:
        delta = std::hypot(u - 0.1 * std::round(u / 0.1), v - 0.1 * std::round(v / 0.1)) < 0.03 ? -0.25 : 0.05;
        break;
    }
    return {it->label, shade(look.base, delta)};
  }
  if (spec_.classes == 2) {
    if (phi < kPi / 2) return {kSky, {0.55, 0.72, 0.92}};
    return {kGround, {0.42, 0.33, 0.24}};
  }
  if (phi < wall_top(theta)) {
    const double t = std::clamp(phi / (kPi / 2), 0.0, 1.0);
    return {kSky, shade({0.50, 0.68, 0.90}, 0.10 * t)};
  }
  if (phi < ground_top(theta)) {
    const double panel = theta * 12 / (2 * kPi);
    return {kWall, shade({0.58, 0.58, 0.60}, panel - std::floor(panel) < 0.08 ? -0.15 : 0.0)};
  }
  return {kGround, {0.42, 0.33, 0.24}};
}

SphereWorld generate_sphere_world(const SceneSpec& spec, std::uint64_t seed) { return SphereWorld(spec, seed); }

namespace {

LabeledScene allocate(std::size_t height, std::size_t width, Domain domain) {
  LabeledScene s;
  s.height = height;
  s.width = width;
  s.domain = domain;
  s.image = Tensor::zeros({height, width, 3});
  s.labels.assign(height * width, 0);
  return s;
}

void paint(LabeledScene& s, std::size_t i, std::size_t j, const Surface& surf, double noise,
           std::mt19937_64& rng) {
  auto img = s.image.mutable_data();
  for (std::size_t c = 0; c < 3; ++c) {
    img[(i * s.width + j) * 3 + c] = std::clamp(surf.rgb[c] + noise * normal(rng), 0.0, 1.0);
  }
  s.labels[i * s.width + j] = surf.label;
}

std::string view_tag(const char* kind, double a, double b) {
  char buf[96];
  std::snprintf(buf, sizeof buf, "%s/%.17g/%.17g", kind, a, b);
  return buf;
}

}  // namespace

LabeledScene render_equirectangular(const SphereWorld& world, std::size_t height, std::size_t width) {
  if (height == 0 || width != 2 * height) {
    throw std::invalid_argument("equirectangular render needs width == 2 * height, got " +
                                std::to_string(height) + "x" + std::to_string(width));
  }
  LabeledScene s = allocate(height, width, Domain::kPanorama);
  auto rng = make_stream(world.seed(), view_tag("pano", double(height), double(width)));
  for (std::size_t i = 0; i < height; ++i) {
    const double phi = kPi * (static_cast<double>(i) + 0.5) / static_cast<double>(height);
    for (std::size_t j = 0; j < width; ++j) {
      const double theta = 2 * kPi * (static_cast<double>(j) + 0.5) / static_cast<double>(width);
      paint(s, i, j, world.surface(direction(theta, phi)), world.spec().noise, rng);
    }
  }
  return s;
}

Vec3 pinhole_ray(std::size_t i, std::size_t j, std::size_t height, std::size_t width, double fov_deg,
                 double yaw, double pitch) {
  const double phi = kPi / 2 - pitch;
  const Vec3 f = direction(yaw, phi);
  const Vec3 right{-std::sin(yaw), std::cos(yaw), 0.0};
  const Vec3 up{-std::cos(phi) * std::cos(yaw), -std::cos(phi) * std::sin(yaw), std::sin(phi)};
  const double t = std::tan(fov_deg * kPi / 360.0);
  const double x = (2.0 * (static_cast<double>(j) + 0.5) / static_cast<double>(width) - 1.0) * t;
  const double y = (1.0 - 2.0 * (static_cast<double>(i) + 0.5) / static_cast<double>(height)) * t *
                   static_cast<double>(height) / static_cast<double>(width);
  return {f.x + x * right.x + y * up.x, f.y + x * right.y + y * up.y, f.z + x * right.z + y * up.z};
}

LabeledScene render_pinhole(const SphereWorld& world, std::size_t height, std::size_t width, double fov_deg,
                            double yaw, double pitch) {
  if (!(fov_deg > 0 && fov_deg < 180)) throw std::invalid_argument("pinhole fov must be in (0, 180) degrees");
  if (height == 0 || width == 0) throw std::invalid_argument("pinhole render: zero size");
  LabeledScene s = allocate(height, width, Domain::kPinhole);
  auto rng = make_stream(world.seed(), view_tag("pinhole", yaw, pitch));
  for (std::size_t i = 0; i < height; ++i) {
    for (std::size_t j = 0; j < width; ++j) {
      paint(s, i, j, world.surface(pinhole_ray(i, j, height, width, fov_deg, yaw, pitch)), world.spec().noise,
            rng);
    }
  }
  return s;
}

const std::vector<ManifestEntry>& DatasetManifest::split(const std::string& name) const {
  if (name == "source") return source;
  if (name == "target") return target;
  if (name == "test") return test;
  if (name == "test_pinhole") return test_pinhole;
  throw DataError("unknown split '" + name + "'");
}

void save_scene(const LabeledScene& scene, const fs::path& image_path, const fs::path& labels_path) {
  save_pdt(image_path, scene.image);
  if (labels_path.empty()) return;
  std::vector<double> v(scene.labels.begin(), scene.labels.end());
  save_pdt(labels_path, Tensor::from({scene.height, scene.width}, std::move(v)));
}

namespace {

// Source views look towards scene content so most crops contain objects.
std::array<double, 2> pick_view(const SphereWorld& w, std::mt19937_64& rng) {
  const double max_pitch = w.spec().max_pitch_deg * kPi / 180.0;
  double yaw = uniform(rng, 0, 2 * kPi);
  if (!w.objects().empty()) {
    const auto& o = w.objects()[uniform_index(rng, w.objects().size())];
    yaw = o.theta + uniform(rng, -0.35, 0.35);
  }
  return {yaw, uniform(rng, -max_pitch, max_pitch)};
}

json entries_json(const std::vector<ManifestEntry>& entries) {
  json arr = json::array();
  for (const auto& e : entries) {
    json j{{"id", e.id}, {"image", e.image}};
    if (!e.labels.empty()) j["labels"] = e.labels;
    arr.push_back(j);
  }
  return arr;
}

}  // namespace

DatasetManifest build_datasets(const SceneSpec& spec, std::size_t n_source, std::size_t n_target,
                               std::size_t n_test, std::uint64_t seed, const fs::path& out_dir) {
  spec.validate();
  if (n_source == 0 || n_target == 0 || n_test == 0) throw std::invalid_argument("dataset split counts must be >= 1");
  std::error_code ec;
  fs::create_directories(out_dir / "scenes", ec);
  if (ec) throw DataError("cannot create " + (out_dir / "scenes").string() + ": " + ec.message());

  DatasetManifest m;
  m.classes = spec.classes;
  m.root = out_dir;
  auto views = make_stream(seed, "views");
  auto emit = [&](std::vector<ManifestEntry>& split, const LabeledScene& scene, bool labeled) {
    ManifestEntry e{"scenes/" + scene.id + ".image.pdt", labeled ? "scenes/" + scene.id + ".labels.pdt" : "",
                    scene.id};
    try {
      save_scene(scene, out_dir / e.image, labeled ? out_dir / e.labels : fs::path());
    } catch (const std::exception& ex) {
      throw DataError(ex.what());
    }
    split.push_back(std::move(e));
  };
  const std::size_t ph = spec.pinhole_size, H = spec.pano_height;
  for (std::size_t k = 0; k < n_source; ++k) {
    SphereWorld w(spec, mix_seed(seed ^ mix_seed(0x5000 + k)));
    const auto [yaw, pitch] = pick_view(w, views);
    LabeledScene s = render_pinhole(w, ph, ph, spec.fov_deg, yaw, pitch);
    s.id = "source_" + std::to_string(k);
    emit(m.source, s, true);
  }
  for (std::size_t k = 0; k < n_target; ++k) {
    LabeledScene s = render_equirectangular(SphereWorld(spec, mix_seed(seed ^ mix_seed(0x7000 + k))), H, 2 * H);
    s.id = "target_" + std::to_string(k);
    emit(m.target, s, false);
  }
  for (std::size_t k = 0; k < n_test; ++k) {
    SphereWorld w(spec, mix_seed(seed ^ mix_seed(0x9000 + k)));
    LabeledScene s = render_equirectangular(w, H, 2 * H);
    s.id = "test_" + std::to_string(k);
    emit(m.test, s, true);
    const auto [yaw, pitch] = pick_view(w, views);
    LabeledScene p = render_pinhole(w, ph, ph, spec.fov_deg, yaw, pitch);
    p.id = "test_pinhole_" + std::to_string(k);
    emit(m.test_pinhole, p, true);
  }

  json doc{{"classes", spec.classes},
           {"source", entries_json(m.source)},
           {"target", entries_json(m.target)},
           {"test", entries_json(m.test)},
           {"test_pinhole", entries_json(m.test_pinhole)},
           {"seed", seed},
           {"spec",
            {{"min_objects", spec.min_objects},
             {"max_objects", spec.max_objects},
             {"fov_deg", spec.fov_deg},
             {"pinhole_size", spec.pinhole_size},
             {"pano_height", spec.pano_height},
             {"max_pitch_deg", spec.max_pitch_deg},
             {"noise", spec.noise}}}};
  std::ofstream os(out_dir / "manifest.json");
  os << doc.dump(2) << "\n";
  if (!os) throw DataError("cannot write " + (out_dir / "manifest.json").string());
  return m;
}

DatasetManifest load_manifest(const fs::path& manifest_path) {
  std::ifstream is(manifest_path);
  if (!is) throw DataError("cannot open manifest " + manifest_path.string());
  DatasetManifest m;
  m.root = manifest_path.parent_path();
  try {
    const json doc = json::parse(is);
    m.classes = doc.at("classes").get<std::size_t>();
    auto read = [&](const char* name, std::vector<ManifestEntry>& out) {
      if (!doc.contains(name)) return;
      for (const auto& e : doc.at(name)) {
        out.push_back({e.at("image").get<std::string>(), e.value("labels", std::string()),
                       e.value("id", std::string())});
      }
    };
    read("source", m.source);
    read("target", m.target);
    read("test", m.test);
    read("test_pinhole", m.test_pinhole);
  } catch (const json::exception& ex) {
    throw DataError("malformed manifest " + manifest_path.string() + ": " + ex.what());
  }
  return m;
}

std::vector<LabeledScene> load_split(const DatasetManifest& m, const std::string& split) {
  std::vector<LabeledScene> out;
  const bool pano = split == "target" || split == "test";
  for (const auto& e : m.split(split)) {
    LabeledScene s;
    s.id = e.id;
    s.domain = pano ? Domain::kPanorama : Domain::kPinhole;
    try {
      s.image = load_pdt(m.root / e.image);
      if (!e.labels.empty()) {
        Tensor lab = load_pdt(m.root / e.labels);
        for (double v : lab.data()) s.labels.push_back(static_cast<std::int32_t>(v));
      }
    } catch (const std::exception& ex) {
      throw DataError(std::string("split '") + split + "': " + ex.what());
    }
    if (s.image.rank() != 3 || s.image.dim(2) != 3) throw DataError(e.image + ": expected H x W x 3 image");
    s.height = s.image.dim(0);
    s.width = s.image.dim(1);
    if (s.labeled() && s.labels.size() != s.height * s.width) throw DataError(e.labels + ": label extents mismatch");
    for (auto y : s.labels) {
      if (!(y == 255 || (y >= 0 && static_cast<std::size_t>(y) < m.classes))) {
        throw DataError(e.labels + ": label " + std::to_string(y) + " out of range");
      }
    }
    out.push_back(std::move(s));
  }
  return out;
}

}  // namespace panodeform::panogeo
