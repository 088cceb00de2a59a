#include <doctest.h>

#include <cmath>

#include "panodeform/deform.hpp"
#include "panodeform/gradcheck.hpp"
#include "test_util.hpp"

using namespace panodeform;
using namespace panodeform::deform;
using testing::probe;
using testing::probe_weights;
using testing::random_tensor;

namespace {

LinearParams random_linear(std::size_t in, std::size_t out, std::mt19937_64& rng, double scale = 0.5) {
  return {random_tensor({in, out}, rng, -scale, scale), random_tensor({out}, rng, -scale, scale)};
}

LinearParams zero_linear(std::size_t in, std::size_t out) {
  return {Tensor::zeros({in, out}, true), Tensor::zeros({out}, true)};
}

// Independent bilinear read with edge clamping, written from the textbook formula.
double naive_bilinear(const Tensor& f, double y, double x, std::size_t c) {
  const double H = static_cast<double>(f.dim(0)), W = static_cast<double>(f.dim(1));
  y = std::clamp(y, 0.0, H - 1);
  x = std::clamp(x, 0.0, W - 1);
  const double y0 = std::floor(y), x0 = std::floor(x);
  const double y1 = std::min(y0 + 1, H - 1), x1 = std::min(x0 + 1, W - 1);
  auto at = [&](double r, double col) {
    return f.data()[(static_cast<std::size_t>(r) * f.dim(1) + static_cast<std::size_t>(col)) * f.dim(2) + c];
  };
  const double ty = y - y0, tx = x - x0;
  return (1 - ty) * ((1 - tx) * at(y0, x0) + tx * at(y0, x1)) + ty * ((1 - tx) * at(y1, x0) + tx * at(y1, x1));
}

}  // namespace

TEST_SUITE("standard_pe") {
  TEST_CASE("8x8 map with s=4 gives HW/s^2 = 4 patches") {
    PatchEmbedConfig cfg{4, 4, 1, 2, false};
    auto rng = make_stream(1, "pe");
    Tensor f = random_tensor({8, 8, 1}, rng);
    Tensor z = standard_pe(f, cfg, random_linear(16, 2, rng));
    CHECK(z.shape() == Shape{2, 2, 2});
  }

  TEST_CASE("3x3 patch offsets span [-1,1]^2 around the anchor") {
    Tensor grid = patch_grid(6, 6, 3, 1);
    for (std::size_t cell = 0; cell < 36; ++cell) {
      const double ai = static_cast<double>(cell / 6), aj = static_cast<double>(cell % 6);
      double lo_r = 1e9, hi_r = -1e9, lo_c = 1e9, hi_c = -1e9;
      for (std::size_t t = 0; t < 9; ++t) {
        const double dr = grid.data()[(cell * 9 + t) * 2] - ai, dc = grid.data()[(cell * 9 + t) * 2 + 1] - aj;
        lo_r = std::min(lo_r, dr), hi_r = std::max(hi_r, dr), lo_c = std::min(lo_c, dc), hi_c = std::max(hi_c, dc);
      }
      CHECK(lo_r == -1);
      CHECK(hi_r == 1);
      CHECK(lo_c == -1);
      CHECK(hi_c == 1);
    }
  }

  TEST_CASE("identity projection reproduces raw patch pixels") {
    PatchEmbedConfig cfg{2, 2, 3, 12, false};
    auto rng = make_stream(2, "pe-id");
    Tensor f = random_tensor({4, 6, 3}, rng);
    LinearParams eye{Tensor::zeros({12, 12}), Tensor()};
    for (std::size_t i = 0; i < 12; ++i) eye.weight.mutable_data()[i * 13] = 1.0;
    Tensor z = standard_pe(f, cfg, eye);
    // patch (1, 2) tap (a=1, b=0) channel 2 comes from pixel (3, 4)
    CHECK(z.data()[(1 * 3 + 2) * 12 + (1 * 2 + 0) * 3 + 2] == f.data()[(3 * 6 + 4) * 3 + 2]);
  }

  TEST_CASE("indivisible input is rejected") {
    PatchEmbedConfig cfg{3, 2, 1, 2, false};
    auto rng = make_stream(3, "pe-div");
    CHECK_THROWS_AS(standard_pe(Tensor::zeros({5, 4, 1}), cfg, random_linear(9, 2, rng)), DimensionError);
  }
}

TEST_SUITE("predict_offsets") {
  TEST_CASE("zero-initialized predictor emits zero offsets") {
    auto rng = make_stream(4, "off0");
    Tensor f = random_tensor({8, 8, 2}, rng);
    OffsetField field = predict_offsets(f, zero_linear(18, 6), 3, 2, 4.0, Border::kClamp);
    CHECK(field.offsets.shape() == Shape{4, 4, 3, 2});
    for (double v : field.offsets.data()) CHECK(v == 0.0);
  }

  TEST_CASE("H=32, r=4 bounds rows to [-8, 8]") {
    auto rng = make_stream(5, "off-bound");
    Tensor f = random_tensor({32, 16, 2}, rng, -5, 5);
    OffsetField field = predict_offsets(f, random_linear(18, 8, rng, 20.0), 4, 1, 4.0, Border::kClamp);
    CHECK(field.bound_row == 8.0);
    CHECK(field.bound_col == 4.0);
    bool saturated = false;
    for (std::size_t i = 0; i < field.offsets.numel(); i += 2) {
      CHECK(std::abs(field.offsets.data()[i]) <= 8.0);
      CHECK(std::abs(field.offsets.data()[i + 1]) <= 4.0);
      saturated |= std::abs(field.offsets.data()[i]) == 8.0;
    }
    CHECK(saturated);
  }

  TEST_CASE("raw prediction 100 with W=40, r=4 clamps to 10") {
    Tensor f = Tensor::zeros({8, 40, 1});
    LinearParams g{Tensor::zeros({9, 2}), Tensor::from({2}, {100.0, 100.0})};
    OffsetField field = predict_offsets(f, g, 1, 1, 4.0, Border::kClamp);
    CHECK(field.offsets.data()[0] == 2.0);
    CHECK(field.offsets.data()[1] == 10.0);
  }

  TEST_CASE("non-positive r is rejected") {
    CHECK_THROWS(predict_offsets(Tensor::zeros({4, 4, 1}), zero_linear(9, 2), 1, 1, 0.0, Border::kClamp));
  }
}

TEST_SUITE("clamp semantics") {
  TEST_CASE("inside and outside the interval") {
    auto in = clamp_grad_semantics(5, -8, 8);
    CHECK(in.value == 5);
    CHECK(in.grad == 1);
    auto out = clamp_grad_semantics(9, -8, 8);
    CHECK(out.value == 8);
    CHECK(out.grad == 0);
  }

  TEST_CASE("tensor clamp agrees with finite differences away from the kinks") {
    auto rng = make_stream(6, "clamp");
    std::vector<double> xs;
    while (xs.size() < 30) {
      const double v = uniform(rng, -12, 12);
      if (std::abs(std::abs(v) - 8.0) > 1e-3) xs.push_back(v);
    }
    Tensor x = Tensor::from({30}, xs, true);
    Tensor w = probe_weights(30, rng);
    auto r = check_gradients("clamp", [&] { return probe(ops::clamp(x, -8, 8), w); }, {x});
    CHECK(r.passed);
    x.zero_grad();
    probe(ops::clamp(x, -8, 8), w).backward();
    for (std::size_t i = 0; i < 30; ++i) {
      const auto ref = clamp_grad_semantics(xs[i], -8, 8);
      CHECK(x.grad()[i] == ref.grad * w.data()[i]);
    }
  }
}

TEST_SUITE("dpe") {
  TEST_CASE("zero offsets reproduce the standard embedding bit-for-bit") {
    auto rng = make_stream(7, "dpe-red");
    for (auto border : {Border::kClamp, Border::kWrapHorizontal}) {
      PatchEmbedConfig cfg{7, 4, 3, 5, true, 4.0, border};
      Tensor f = random_tensor({16, 24, 3}, rng);
      LinearParams proj = random_linear(49 * 3, 5, rng);
      Tensor a = dpe(f, cfg, proj, zero_linear(27, 98));
      Tensor b = standard_pe(f, cfg, proj);
      CHECK(std::equal(a.data().begin(), a.data().end(), b.data().begin(), b.data().end()));
    }
  }

  TEST_CASE("64x128 input with stride 4 and 32 channels") {
    auto rng = make_stream(8, "dpe-shape");
    ParamStore store;
    PatchEmbed pe(store, "pe", {7, 4, 3, 32, true}, rng);
    Tensor x = random_tensor({64, 128, 3}, rng, 0, 1, false);
    CHECK(pe.forward(x).shape() == Shape{16, 32, 32});
  }

  TEST_CASE("offset path carries gradient and matches finite differences") {
    auto rng = make_stream(9, "dpe-grad");
    PatchEmbedConfig cfg{3, 2, 2, 3, true, 2.0};
    Tensor f = random_tensor({6, 8, 2}, rng);
    LinearParams proj = random_linear(18, 3, rng);
    LinearParams g = random_linear(18, 18, rng, 0.7);
    Tensor w = probe_weights(4 * 3 * 3, rng);
    auto loss = [&] { return probe(dpe(f, cfg, proj, g), w); };
    auto r = check_gradients("dpe", loss, {f, proj.weight, g.weight, g.bias});
    CHECK(r.max_rel_error < 1e-4);
    g.weight.zero_grad();
    loss().backward();
    double norm = 0;
    for (double v : g.weight.grad()) norm += v * v;
    CHECK(norm > 0);
  }

  TEST_CASE("shape contract over random H, W, s, stride") {
    auto rng = make_stream(10, "dpe-prop");
    for (int t = 0; t < 20; ++t) {
      const std::size_t stride = 1 + uniform_index(rng, 4), s = 1 + uniform_index(rng, 7);
      const std::size_t H = stride * (1 + uniform_index(rng, 5)), W = stride * (1 + uniform_index(rng, 5));
      const std::size_t cin = 1 + uniform_index(rng, 3), cout = 1 + uniform_index(rng, 4);
      PatchEmbedConfig cfg{s, stride, cin, cout, true, 4.0};
      Tensor f = random_tensor({H, W, cin}, rng);
      Tensor z = dpe(f, cfg, random_linear(s * s * cin, cout, rng), random_linear(9 * cin, 2 * s * s, rng));
      CHECK(z.shape() == Shape{H / stride, W / stride, cout});
    }
  }
}

TEST_SUITE("mlp mixing") {
  TEST_CASE("vanilla mix is permutation equivariant") {
    auto rng = make_stream(11, "perm");
    Tensor z = random_tensor({5, 3}, rng, -1, 1, false);
    LinearParams w = random_linear(3, 4, rng);
    const std::vector<std::size_t> perm{3, 0, 4, 1, 2};
    std::vector<double> permuted;
    for (auto p : perm) permuted.insert(permuted.end(), z.data().begin() + p * 3, z.data().begin() + p * 3 + 3);
    Tensor a = vanilla_mlp_mix(z, w);
    Tensor b = vanilla_mlp_mix(Tensor::from({5, 3}, permuted), w);
    for (std::size_t i = 0; i < 5; ++i) {
      for (std::size_t c = 0; c < 4; ++c) CHECK(b.data()[i * 4 + c] == a.data()[perm[i] * 4 + c]);
    }
  }

  TEST_CASE("identity weights return the input") {
    auto rng = make_stream(12, "mlp-id");
    Tensor z = random_tensor({4, 3}, rng, -1, 1, false);
    LinearParams eye{Tensor::from({3, 3}, {1, 0, 0, 0, 1, 0, 0, 0, 1}), Tensor()};
    Tensor out = vanilla_mlp_mix(z, eye);
    CHECK(std::equal(out.data().begin(), out.data().end(), z.data().begin()));
  }

  TEST_CASE("vanilla mix matches a plain matmul oracle") {
    auto rng = make_stream(13, "mlp-oracle");
    Tensor z = random_tensor({6, 4}, rng, -1, 1, false);
    LinearParams w = random_linear(4, 3, rng);
    Tensor out = vanilla_mlp_mix(z, w);
    for (std::size_t n = 0; n < 6; ++n) {
      for (std::size_t j = 0; j < 3; ++j) {
        double ref = w.bias.data()[j];
        for (std::size_t k = 0; k < 4; ++k) ref += z.data()[n * 4 + k] * w.weight.data()[k * 3 + j];
        CHECK(out.data()[n * 3 + j] == doctest::Approx(ref).epsilon(1e-14));
      }
    }
  }

  TEST_CASE("dmlp with zero offsets equals the vanilla mix bit-for-bit") {
    auto rng = make_stream(14, "dmlp-red");
    Tensor f = random_tensor({5, 7, 6}, rng, -1, 1, false);
    LinearParams w = random_linear(6, 6, rng);
    Tensor a = dmlp_mix(f, zero_linear(54, 12), w, 4.0, 64, Border::kClamp);
    Tensor b = vanilla_mlp_mix(ops::reshape(f, {35, 6}), w);
    CHECK(std::equal(a.data().begin(), a.data().end(), b.data().begin(), b.data().end()));
  }

  TEST_CASE("constant feature map makes offsets irrelevant") {
    auto rng = make_stream(15, "dmlp-const");
    std::vector<double> v;
    for (int p = 0; p < 16; ++p) v.insert(v.end(), {0.3, -1.2, 2.0});
    Tensor f = Tensor::from({4, 4, 3}, v);
    LinearParams w = random_linear(3, 2, rng);
    Tensor a = dmlp_mix(f, random_linear(27, 6, rng, 3.0), w, 2.0, 64, Border::kClamp);
    Tensor b = dmlp_mix(f, zero_linear(27, 6), w, 2.0, 64, Border::kClamp);
    for (std::size_t i = 0; i < a.numel(); ++i) CHECK(a.data()[i] == doctest::Approx(b.data()[i]).epsilon(1e-14));
  }

  TEST_CASE("4x4x2 random case against gather-then-matmul") {
    auto rng = make_stream(16, "dmlp-oracle");
    Tensor f = random_tensor({4, 4, 2}, rng, -1, 1, false);
    LinearParams g = random_linear(18, 4, rng, 0.8);
    LinearParams w = random_linear(2, 3, rng);
    OffsetField field;
    Tensor out = dmlp_mix(f, g, w, 4.0, 64, Border::kClamp, &field);
    CHECK(field.offsets.shape() == Shape{4, 4, 2, 2});
    for (std::size_t i = 0; i < 4; ++i) {
      for (std::size_t j = 0; j < 4; ++j) {
        double gathered[2];
        for (std::size_t c = 0; c < 2; ++c) {
          // recompute the clamped offset of channel c from the raw 3x3 conv
          double raw[2];
          for (std::size_t q = 0; q < 2; ++q) {
            double acc = g.bias.data()[c * 2 + q];
            for (std::size_t a = 0; a < 3; ++a) {
              for (std::size_t b = 0; b < 3; ++b) {
                const auto r = static_cast<std::size_t>(std::clamp<long>(long(i) + long(a) - 1, 0, 3));
                const auto s = static_cast<std::size_t>(std::clamp<long>(long(j) + long(b) - 1, 0, 3));
                for (std::size_t k = 0; k < 2; ++k) {
                  acc += f.data()[(r * 4 + s) * 2 + k] * g.weight.data()[((a * 3 + b) * 2 + k) * 4 + c * 2 + q];
                }
              }
            }
            raw[q] = std::clamp(acc, -1.0, 1.0);  // H/r = W/r = 1
          }
          gathered[c] = naive_bilinear(f, double(i) + raw[0], double(j) + raw[1], c);
        }
        for (std::size_t o = 0; o < 3; ++o) {
          double ref = w.bias.data()[o];
          for (std::size_t c = 0; c < 2; ++c) ref += gathered[c] * w.weight.data()[c * 3 + o];
          CHECK(out.data()[(i * 4 + j) * 3 + o] == doctest::Approx(ref).epsilon(1e-12));
        }
      }
    }
  }

  TEST_CASE("channels beyond the group cap share offsets round-robin") {
    CHECK(dmlp_groups(32, 64) == 32);
    CHECK(dmlp_groups(100, 64) == 64);
    auto rng = make_stream(17, "dmlp-cap");
    Tensor f = random_tensor({3, 3, 5}, rng, -1, 1, false);
    OffsetField field;
    dmlp_mix(f, random_linear(45, 4, rng), random_linear(5, 2, rng), 4.0, 2, Border::kClamp, &field);
    CHECK(field.offsets.shape() == Shape{3, 3, 2, 2});
  }

  TEST_CASE("dmlp gradients match finite differences") {
    auto rng = make_stream(18, "dmlp-grad");
    Tensor f = random_tensor({4, 5, 3}, rng);
    LinearParams g = random_linear(27, 6, rng, 0.6);
    LinearParams w = random_linear(3, 3, rng);
    Tensor pw = probe_weights(60, rng);
    auto r = check_gradients("dmlp", [&] { return probe(dmlp_mix(f, g, w, 2.0, 64, Border::kClamp), pw); },
                             {f, g.weight, g.bias, w.weight, w.bias});
    CHECK(r.max_rel_error < 1e-4);
  }
}
