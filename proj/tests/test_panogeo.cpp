#include <doctest.h>

#include <cmath>
#include <fstream>
#include <set>

#include "panodeform/panogeo.hpp"
#include "panodeform/pdt_io.hpp"

using namespace panodeform;
using namespace panodeform::panogeo;
namespace fs = std::filesystem;

namespace {

SceneSpec bands_only(std::size_t classes) {
  SceneSpec spec;
  spec.classes = classes;
  spec.min_objects = spec.max_objects = 0;
  return spec;
}

fs::path scratch(const std::string& name) {
  fs::path p = fs::temp_directory_path() / ("panogeo_test_" + name);
  fs::remove_all(p);
  return p;
}

}  // namespace

TEST_SUITE("sphere world") {
  TEST_CASE("K=2 without objects is a two-band world") {
    SphereWorld w = generate_sphere_world(bands_only(2), 3);
    CHECK(w.objects().empty());
    LabeledScene s = render_equirectangular(w, 16, 32);
    for (std::size_t i = 0; i < 16; ++i) {
      for (std::size_t j = 0; j < 32; ++j) CHECK(s.labels[i * 32 + j] == (i < 8 ? kSky : kGround));
    }
  }

  TEST_CASE("same seed gives the same world, different seeds differ") {
    SceneSpec spec;
    auto a = render_equirectangular(generate_sphere_world(spec, 11), 32, 64);
    auto b = render_equirectangular(generate_sphere_world(spec, 11), 32, 64);
    auto c = render_equirectangular(generate_sphere_world(spec, 12), 32, 64);
    CHECK(a.labels == b.labels);
    CHECK(std::equal(a.image.data().begin(), a.image.data().end(), b.image.data().begin()));
    CHECK(a.labels != c.labels);
  }

  TEST_CASE("class histogram over 10 seeds covers every class") {
    SceneSpec spec;
    std::vector<std::size_t> counts(spec.classes, 0);
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
      auto s = render_equirectangular(generate_sphere_world(spec, seed), 32, 64);
      for (auto y : s.labels) ++counts.at(static_cast<std::size_t>(y));
    }
    for (auto c : counts) CHECK(c > 0);
  }

  TEST_CASE("angles invert direction") {
    for (double theta : {0.1, 1.5, 3.0, 5.9}) {
      for (double phi : {0.2, 1.2, 2.9}) {
        auto [t, p] = angles(direction(theta, phi));
        CHECK(t == doctest::Approx(theta).epsilon(1e-12));
        CHECK(p == doctest::Approx(phi).epsilon(1e-12));
      }
    }
  }
}

TEST_SUITE("equirectangular") {
  TEST_CASE("top row collapses onto the sky") {
    auto s = render_equirectangular(generate_sphere_world(SceneSpec{}, 5), 32, 64);
    for (std::size_t j = 0; j < 64; ++j) CHECK(s.labels[j] == kSky);
  }

  TEST_CASE("seam columns agree on at least 95% of rows") {
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
      auto s = render_equirectangular(generate_sphere_world(SceneSpec{}, seed), 64, 128);
      std::size_t same = 0;
      for (std::size_t i = 0; i < 64; ++i) same += s.labels[i * 128] == s.labels[i * 128 + 127];
      CHECK(same >= 61);
    }
  }

  TEST_CASE("ground band covers its analytic latitude range to within one row") {
    SphereWorld w = generate_sphere_world(bands_only(3), 9);
    const std::size_t H = 64, W = 128;
    auto s = render_equirectangular(w, H, W);
    for (std::size_t j = 0; j < W; ++j) {
      const double theta = 2 * kPi * (static_cast<double>(j) + 0.5) / W;
      const double expected = H * (kPi - w.ground_top(theta)) / kPi;
      std::size_t rows = 0;
      for (std::size_t i = 0; i < H; ++i) rows += s.labels[i * W + j] == kGround;
      CHECK(std::abs(static_cast<double>(rows) - expected) <= 1.0);
    }
  }

  TEST_CASE("aspect violation is rejected") {
    CHECK_THROWS_AS(render_equirectangular(generate_sphere_world(SceneSpec{}, 1), 32, 32), std::invalid_argument);
  }
}

TEST_SUITE("pinhole") {
  TEST_CASE("optical axis of the centre pixel") {
    // even size: the four centre pixels straddle the axis symmetrically
    Vec3 a = pinhole_ray(31, 31, 64, 64, 70, 0.0, 0.0), b = pinhole_ray(32, 32, 64, 64, 70, 0.0, 0.0);
    CHECK((a.x + b.x) / 2 == doctest::Approx(1.0));
    CHECK((a.y + b.y) / 2 == doctest::Approx(0.0));
    CHECK((a.z + b.z) / 2 == doctest::Approx(0.0));
  }

  TEST_CASE("tiny fov approaches a constant patch of the centre label") {
    SphereWorld w = generate_sphere_world(bands_only(3), 4);
    auto s = render_pinhole(w, 16, 16, 0.01, 1.0, 0.4);
    const std::int32_t centre = w.label(direction(1.0, kPi / 2 - 0.4));
    for (auto y : s.labels) CHECK(y == centre);
  }

  TEST_CASE("opposite yaws see different content") {
    SphereWorld w = generate_sphere_world(SceneSpec{}, 21);
    auto a = render_pinhole(w, 32, 32, 70, 0.0, 0.0), b = render_pinhole(w, 32, 32, 70, kPi, 0.0);
    CHECK_FALSE(std::equal(a.image.data().begin(), a.image.data().end(), b.image.data().begin()));
  }

  TEST_CASE("reprojected labels agree with the panorama on at least 98% of pixels") {
    for (std::uint64_t seed = 0; seed < 4; ++seed) {
      SphereWorld w = generate_sphere_world(SceneSpec{}, seed);
      const std::size_t H = 512, W = 1024;
      auto pano = render_equirectangular(w, H, W);
      const double yaw = w.objects().empty() ? 0.0 : w.objects()[0].theta, pitch = 0.1;
      auto pin = render_pinhole(w, 64, 64, 70, yaw, pitch);
      std::size_t agree = 0;
      for (std::size_t i = 0; i < 64; ++i) {
        for (std::size_t j = 0; j < 64; ++j) {
          auto [theta, phi] = angles(pinhole_ray(i, j, 64, 64, 70, yaw, pitch));
          const auto pi = std::min<std::size_t>(H - 1, static_cast<std::size_t>(phi / kPi * H));
          const auto pj = std::min<std::size_t>(W - 1, static_cast<std::size_t>(theta / (2 * kPi) * W));
          agree += pin.labels[i * 64 + j] == pano.labels[pi * W + pj];
        }
      }
      CHECK(agree >= 0.98 * 64 * 64);
    }
  }

  TEST_CASE("invalid fov is rejected") {
    SphereWorld w = generate_sphere_world(SceneSpec{}, 1);
    CHECK_THROWS_AS(render_pinhole(w, 8, 8, 0.0, 0, 0), std::invalid_argument);
    CHECK_THROWS_AS(render_pinhole(w, 8, 8, 180.0, 0, 0), std::invalid_argument);
  }
}

TEST_SUITE("datasets") {
  TEST_CASE("splits, label payloads and value ranges") {
    const fs::path dir = scratch("splits");
    SceneSpec spec;
    auto m = build_datasets(spec, 8, 3, 2, 42, dir);
    CHECK(m.source.size() == 8);
    CHECK(m.target.size() == 3);
    CHECK(m.test.size() == 2);
    CHECK(m.test_pinhole.size() == 2);
    std::size_t label_files = 0;
    for (const auto& e : fs::directory_iterator(dir / "scenes")) {
      label_files += e.path().string().find(".labels.") != std::string::npos;
    }
    CHECK(label_files == 8 + 2 + 2);
    for (const auto& e : m.target) CHECK(e.labels.empty());

    auto loaded = load_manifest(dir / "manifest.json");
    CHECK(loaded.classes == 5);
    auto source = load_split(loaded, "source");
    REQUIRE(source.size() == 8);
    CHECK(source[0].labeled());
    CHECK(source[0].height == 64);
    auto target = load_split(loaded, "target");
    CHECK_FALSE(target[0].labeled());
    CHECK(target[0].width == 128);
    for (const auto& s : load_split(loaded, "test")) {
      for (auto y : s.labels) CHECK((y == 255 || (y >= 0 && y < 5)));
    }
    fs::remove_all(dir);
  }

  TEST_CASE("identical spec and seed give byte-identical files") {
    const fs::path a = scratch("det_a"), b = scratch("det_b");
    build_datasets(SceneSpec{}, 2, 1, 1, 5, a);
    build_datasets(SceneSpec{}, 2, 1, 1, 5, b);
    for (const auto& e : fs::directory_iterator(a / "scenes")) {
      std::ifstream fa(e.path(), std::ios::binary), fb(b / "scenes" / e.path().filename(), std::ios::binary);
      std::string sa((std::istreambuf_iterator<char>(fa)), {}), sb((std::istreambuf_iterator<char>(fb)), {});
      CHECK(sa == sb);
    }
    fs::remove_all(a);
    fs::remove_all(b);
  }

  TEST_CASE("out-of-range labels and missing files are data errors") {
    const fs::path dir = scratch("bad");
    auto m = build_datasets(SceneSpec{}, 1, 1, 1, 6, dir);
    save_pdt(dir / m.source[0].labels, Tensor::full({64, 64}, 7.0));
    CHECK_THROWS_AS(load_split(m, "source"), DataError);
    fs::remove(dir / m.target[0].image);
    CHECK_THROWS_AS(load_split(m, "target"), DataError);
    CHECK_THROWS_AS(load_manifest(dir / "nope.json"), DataError);
    fs::remove_all(dir);
  }
}
