#pragma once

// Procedural sphere worlds rendered as labeled pinhole crops and
// equirectangular panoramas.
//
// Spherical convention: phi is the polar angle from the zenith (0 = up,
// pi = down), theta the azimuth. Direction (theta, phi) is
// (sin phi cos theta, sin phi sin theta, cos phi). Panorama pixel (i, j) looks
// at phi = pi (i + 0.5) / H, theta = 2 pi (j + 0.5) / W.

#include <array>
#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

#include "panodeform/tensor.hpp"

namespace panodeform::panogeo {

inline constexpr double kPi = 3.14159265358979323846;

/// Dataset files missing, malformed or unwritable.
class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class Domain { kPinhole, kPanorama };

const char* domain_name(Domain d);

/// Fixed class ids; object classes start at kFirstObject and cycle when K > 5.
enum ClassId : std::int32_t { kSky = 0, kGround = 1, kWall = 2, kFirstObject = 3 };

struct LabeledScene {
  Tensor image;                      // [H x W x 3] in [0, 1]
  std::vector<std::int32_t> labels;  // H*W, empty for unlabeled target scenes
  std::size_t height = 0;
  std::size_t width = 0;
  Domain domain = Domain::kPinhole;
  std::string id;

  bool labeled() const { return !labels.empty(); }
};

struct SceneSpec {
  std::size_t classes = 5;
  std::size_t min_objects = 4;
  std::size_t max_objects = 7;
  double fov_deg = 70.0;
  std::size_t pinhole_size = 64;
  std::size_t pano_height = 64;  // width is twice this
  double max_pitch_deg = 12.0;
  double noise = 0.04;           // per-pixel appearance noise (std dev)

  void validate() const;
};

struct Vec3 {
  double x = 0, y = 0, z = 0;
};

Vec3 direction(double theta, double phi);
/// (theta in [0, 2pi), phi in [0, pi]) of a non-zero vector.
std::array<double, 2> angles(const Vec3& d);

struct SphereObject {
  double theta = 0, phi = 0;      // centre
  double half_u = 0, half_v = 0;  // half extents in tangent-plane units
  bool ellipse = false;
  std::int32_t label = kFirstObject;
};

struct Surface {
  std::int32_t label;
  std::array<double, 3> rgb;  // noise-free albedo
};

/// Procedural labeling of the unit sphere: sky band, wall band with an uneven
/// skyline, ground band and tangent-plane rectangles/ellipses on top.
class SphereWorld {
 public:
  SphereWorld() = default;
  SphereWorld(const SceneSpec& spec, std::uint64_t seed);

  Surface surface(const Vec3& d) const;
  std::int32_t label(const Vec3& d) const { return surface(d).label; }

  const SceneSpec& spec() const { return spec_; }
  std::uint64_t seed() const { return seed_; }
  const std::vector<SphereObject>& objects() const { return objects_; }
  /// Polar angle where the wall (or, for K = 2, the ground) begins at azimuth theta.
  double wall_top(double theta) const;
  double ground_top(double theta) const;

 private:
  SceneSpec spec_;
  std::uint64_t seed_ = 0;
  std::array<double, 3> skyline_phase_{};
  std::vector<SphereObject> objects_;
};

SphereWorld generate_sphere_world(const SceneSpec& spec, std::uint64_t seed);

/// Equirectangular render; `width` must equal 2 * `height`.
LabeledScene render_equirectangular(const SphereWorld& world, std::size_t height, std::size_t width);

/// Camera ray of pinhole pixel (i, j); yaw is the azimuth of the optical axis,
/// pitch its elevation above the horizon.
Vec3 pinhole_ray(std::size_t i, std::size_t j, std::size_t height, std::size_t width, double fov_deg,
                 double yaw, double pitch);

LabeledScene render_pinhole(const SphereWorld& world, std::size_t height, std::size_t width, double fov_deg,
                            double yaw, double pitch);

struct ManifestEntry {
  std::string image;
  std::string labels;  // empty for unlabeled scenes
  std::string id;
};

struct DatasetManifest {
  std::size_t classes = 0;
  std::filesystem::path root;
  std::vector<ManifestEntry> source, target, test, test_pinhole;

  const std::vector<ManifestEntry>& split(const std::string& name) const;
};

/// Renders n_source labeled pinhole crops, n_target unlabeled panoramas,
/// n_test labeled panoramas and n_test labeled pinhole crops of the test
/// worlds into `out_dir`, writing `manifest.json`.
DatasetManifest build_datasets(const SceneSpec& spec, std::size_t n_source, std::size_t n_target,
                               std::size_t n_test, std::uint64_t seed, const std::filesystem::path& out_dir);

DatasetManifest load_manifest(const std::filesystem::path& manifest_path);
std::vector<LabeledScene> load_split(const DatasetManifest& manifest, const std::string& split);

void save_scene(const LabeledScene& scene, const std::filesystem::path& image_path,
                const std::filesystem::path& labels_path);

}  // namespace panodeform::panogeo
