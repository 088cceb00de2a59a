#include <doctest.h>

#include <boost/multiprecision/cpp_bin_float.hpp>
#include <cmath>
#include <numeric>
#include <sstream>

#include "panodeform/gradcheck.hpp"
#include "panodeform/kernels.hpp"
#include "panodeform/ops.hpp"
#include "panodeform/pdt_io.hpp"
#include "test_util.hpp"

using namespace panodeform;
using testing::probe;
using testing::probe_weights;
using testing::random_tensor;
using quad = boost::multiprecision::cpp_bin_float_quad;

namespace {

Tensor map2x2() { return Tensor::from({2, 2, 1}, {0, 1, 2, 3}, true); }

std::vector<double> quad_softmax(const std::vector<double>& x) {
  std::vector<quad> e;
  quad sum = 0;
  for (double v : x) {
    e.push_back(boost::multiprecision::exp(quad(v)));
    sum += e.back();
  }
  std::vector<double> out;
  for (auto& v : e) out.push_back(static_cast<double>(v / sum));
  return out;
}

}  // namespace

TEST_SUITE("matmul") {
  TEST_CASE("identity and unit selection") {
    Tensor eye = Tensor::from({2, 2}, {1, 0, 0, 1});
    Tensor m = Tensor::from({2, 2}, {1, 2, 3, 4});
    Tensor p = ops::matmul(eye, m);
    CHECK(std::vector<double>(p.data().begin(), p.data().end()) == std::vector<double>{1, 2, 3, 4});
    Tensor sel = ops::matmul(Tensor::from({1, 2}, {1, 0}), Tensor::from({2, 1}, {2, 5}));
    CHECK(sel.shape() == Shape{1, 1});
    CHECK(sel.item() == 2.0);
  }

  TEST_CASE("shape mismatch is a dimension error") {
    CHECK_THROWS_AS(ops::matmul(Tensor::zeros({2, 3}), Tensor::zeros({2, 3})), DimensionError);
  }

  TEST_CASE("4x3 * 3x2 gradient matches central differences") {
    auto rng = make_stream(7, "matmul");
    Tensor a = random_tensor({4, 3}, rng), b = random_tensor({3, 2}, rng);
    Tensor w = probe_weights(8, rng);
    auto r = check_gradients("matmul", [&] { return probe(ops::matmul(a, b), w); }, {a, b});
    CHECK(r.max_rel_error < 1e-6);
  }
}

TEST_SUITE("softmax") {
  TEST_CASE("symmetric input") {
    Tensor s = ops::softmax(Tensor::from({2}, {0, 0}), 0);
    CHECK(s.data()[0] == doctest::Approx(0.5).epsilon(1e-15));
    CHECK(s.data()[1] == doctest::Approx(0.5).epsilon(1e-15));
  }

  TEST_CASE("large logits do not overflow") {
    Tensor s = ops::softmax(Tensor::from({2}, {1000, 0}), 0);
    CHECK(std::abs(s.data()[0] - 1.0) < 1e-12);
    CHECK(std::abs(s.data()[1]) < 1e-12);
  }

  TEST_CASE("[1,2,3] matches quad-precision evaluation") {
    Tensor s = ops::softmax(Tensor::from({3}, {1, 2, 3}), 0);
    const auto ref = quad_softmax({1, 2, 3});
    for (int i = 0; i < 3; ++i) CHECK(std::abs(s.data()[i] - ref[i]) < 1e-15);
  }

  TEST_CASE("rows sum to one on random inputs along any axis") {
    auto rng = make_stream(3, "softmax-sum");
    for (int trial = 0; trial < 20; ++trial) {
      const Shape shape{1 + uniform_index(rng, 4), 1 + uniform_index(rng, 5), 1 + uniform_index(rng, 6)};
      Tensor x = random_tensor(shape, rng, -30, 30, false);
      for (std::size_t axis = 0; axis < 3; ++axis) {
        Tensor s = ops::softmax(x, axis);
        std::size_t inner = 1;
        for (std::size_t i = axis + 1; i < 3; ++i) inner *= shape[i];
        const std::size_t n = shape[axis];
        for (std::size_t o = 0; o < s.numel() / (n * inner); ++o) {
          for (std::size_t q = 0; q < inner; ++q) {
            double sum = 0;
            for (std::size_t i = 0; i < n; ++i) sum += s.data()[o * n * inner + i * inner + q];
            CHECK(std::abs(sum - 1.0) <= 1e-12);
          }
        }
      }
    }
  }

  TEST_CASE("gradient along the middle axis") {
    auto rng = make_stream(4, "softmax-grad");
    Tensor x = random_tensor({2, 3, 4}, rng, -2, 2);
    Tensor w = probe_weights(24, rng);
    auto r = check_gradients("softmax", [&] { return probe(ops::softmax(x, 1), w); }, {x});
    CHECK(r.passed);
  }
}

TEST_SUITE("layernorm") {
  TEST_CASE("constant row normalizes to zero") {
    Tensor y = ops::layernorm(Tensor::full({1, 4}, 3.5), Tensor::full({4}, 1.0), Tensor::zeros({4}));
    for (double v : y.data()) CHECK(v == 0.0);
  }

  TEST_CASE("two-point standardization") {
    Tensor y = ops::layernorm(Tensor::from({1, 2}, {1, 3}), Tensor::full({2}, 1.0), Tensor::zeros({2}), 0.0);
    CHECK(y.data()[0] == -1.0);
    CHECK(y.data()[1] == 1.0);
  }

  TEST_CASE("gradient check") {
    auto rng = make_stream(5, "ln");
    Tensor x = random_tensor({3, 5}, rng), g = random_tensor({5}, rng), b = random_tensor({5}, rng);
    Tensor w = probe_weights(15, rng);
    auto r = check_gradients("layernorm", [&] { return probe(ops::layernorm(x, g, b), w); }, {x, g, b});
    CHECK(r.max_rel_error < 1e-5);
  }
}

TEST_SUITE("bilinear_sample") {
  TEST_CASE("centre of four neighbours") {
    Tensor v = ops::bilinear_sample(map2x2(), Tensor::from({1, 2}, {0.5, 0.5}), Border::kClamp);
    CHECK(v.item() == doctest::Approx(1.5));
  }

  TEST_CASE("integer coordinate reads the grid exactly") {
    Tensor v = ops::bilinear_sample(map2x2(), Tensor::from({1, 2}, {1, 0}), Border::kClamp);
    CHECK(v.item() == 2.0);
  }

  TEST_CASE("clamp replicates edges, wrap joins the seam") {
    Tensor f = Tensor::from({1, 4, 1}, {10, 20, 30, 40});
    Tensor c = Tensor::from({3, 2}, {0, -1.0, 0, 3.5, 5.0, 1.0});
    Tensor clamp = ops::bilinear_sample(f, c, Border::kClamp);
    CHECK(clamp.data()[0] == 10.0);
    CHECK(clamp.data()[1] == 40.0);
    CHECK(clamp.data()[2] == 20.0);
    Tensor wrap = ops::bilinear_sample(f, c, Border::kWrapHorizontal);
    CHECK(wrap.data()[0] == 40.0);
    CHECK(wrap.data()[1] == doctest::Approx(25.0));  // halfway between 40 and 10
  }

  TEST_CASE("coordinate gradient at 20 random fractional points") {
    auto rng = make_stream(11, "bilinear");
    Tensor f = random_tensor({5, 6, 3}, rng);
    std::vector<double> pts;
    for (int i = 0; i < 20; ++i) {
      // keep clear of integer kinks by more than the FD step
      pts.push_back(std::floor(uniform(rng, 0, 4)) + uniform(rng, 0.05, 0.95));
      pts.push_back(std::floor(uniform(rng, 0, 5)) + uniform(rng, 0.05, 0.95));
    }
    Tensor coords = Tensor::from({20, 2}, pts, true);
    Tensor w = probe_weights(60, rng);
    for (auto border : {Border::kClamp, Border::kWrapHorizontal}) {
      auto r = check_gradients("bilinear", [&] { return probe(ops::bilinear_sample(f, coords, border), w); },
                               {f, coords});
      CHECK(r.max_rel_error < 1e-4);
    }
  }

  TEST_CASE("grouped sampling reads each channel at its own group") {
    Tensor f = Tensor::from({1, 3, 2}, {0, 100, 1, 101, 2, 102});
    Tensor coords = Tensor::from({1, 2, 2}, {0, 2, 0, 0.5});
    Tensor out = ops::bilinear_sample_grouped(f, coords, Border::kClamp);
    CHECK(out.data()[0] == 2.0);
    CHECK(out.data()[1] == doctest::Approx(100.5));
  }

  TEST_CASE("injected sign fault is visible to the gradient checker") {
    auto rng = make_stream(12, "fault");
    Tensor f = random_tensor({4, 4, 2}, rng);
    Tensor coords = Tensor::from({2, 2}, {1.3, 2.6, 0.4, 1.7}, true);
    Tensor w = probe_weights(4, rng);
    fault::inject(fault::Kind::kBilinearCoordSign);
    auto bad = check_gradients("bilinear", [&] { return probe(ops::bilinear_sample(f, coords, Border::kClamp), w); },
                               {coords});
    fault::inject(fault::Kind::kNone);
    CHECK_FALSE(bad.passed);
  }
}

TEST_SUITE("upsample_bilinear") {
  TEST_CASE("constant map stays constant") {
    Tensor u = ops::upsample_bilinear(Tensor::full({3, 2, 2}, 4.25), 7, 5);
    for (double v : u.data()) CHECK(v == 4.25);
  }

  TEST_CASE("2x column upsample matches a reference half-pixel resampler") {
    Tensor u = ops::upsample_bilinear(Tensor::from({2, 1, 1}, {0, 2}), 4, 1);
    // reference: src = (dst + 0.5) * in/out - 0.5, clamped into [0, in-1]
    const double in[2] = {0, 2};
    for (int d = 0; d < 4; ++d) {
      const double src = std::clamp((d + 0.5) * 0.5 - 0.5, 0.0, 1.0);
      const double ref = in[0] + (in[1] - in[0]) * src;
      CHECK(u.data()[d] == doctest::Approx(ref).epsilon(1e-15));
    }
    CHECK(u.data()[0] == 0.0);
    CHECK(u.data()[3] == 2.0);
  }

  TEST_CASE("same size is the identity") {
    auto rng = make_stream(1, "up-id");
    Tensor f = random_tensor({3, 4, 2}, rng);
    Tensor u = ops::upsample_bilinear(f, 3, 4);
    CHECK(std::equal(u.data().begin(), u.data().end(), f.data().begin()));
  }

  TEST_CASE("non-positive target is rejected") {
    CHECK_THROWS_AS(ops::upsample_bilinear(Tensor::zeros({2, 2, 1}), 0, 2), DimensionError);
  }
}

TEST_SUITE("cross_entropy") {
  TEST_CASE("one-hot perfect logits") {
    Tensor z = Tensor::from({2, 2, 2}, {20, -20, -20, 20, 20, -20, -20, 20});
    std::vector<std::int32_t> y{0, 1, 0, 1};
    CHECK(ops::cross_entropy(z, y).item() < 1e-8);
  }

  TEST_CASE("uniform logits give ln K") {
    Tensor z = Tensor::zeros({3, 4});
    std::vector<std::int32_t> y{0, 3, 2};
    CHECK(ops::cross_entropy(z, y).item() == doctest::Approx(std::log(4.0)).epsilon(1e-14));
  }

  TEST_CASE("random 3x3x2 case against direct summation") {
    auto rng = make_stream(21, "ce");
    Tensor z = random_tensor({3, 3, 2}, rng, -3, 3);
    std::vector<std::int32_t> y{0, 1, 1, kIgnoreLabel, 0, 1, 0, 0, kIgnoreLabel};
    long double total = 0;
    int valid = 0;
    for (int p = 0; p < 9; ++p) {
      if (y[p] == kIgnoreLabel) continue;
      const long double a = z.data()[2 * p], b = z.data()[2 * p + 1];
      total += -std::log(std::exp(y[p] == 0 ? a : b) / (std::exp(a) + std::exp(b)));
      ++valid;
    }
    CHECK(ops::cross_entropy(z, y).item() == doctest::Approx(static_cast<double>(total / valid)).epsilon(1e-13));
    auto r = check_gradients("ce", [&] { return ops::cross_entropy(z, y); }, {z});
    CHECK(r.passed);
  }

  TEST_CASE("no valid pixels gives zero loss and zero gradient") {
    Tensor z = Tensor::from({2, 3}, {1, 2, 3, 4, 5, 6}, true);
    std::vector<std::int32_t> y{kIgnoreLabel, kIgnoreLabel};
    Tensor l = ops::cross_entropy(z, y);
    CHECK(l.item() == 0.0);
    l.backward();
    for (double g : z.grad()) CHECK(g == 0.0);
  }

  TEST_CASE("label outside range is rejected") {
    std::vector<std::int32_t> y{5};
    CHECK_THROWS_AS(ops::cross_entropy(Tensor::zeros({1, 3}), y), DimensionError);
  }
}

TEST_SUITE("kl_div") {
  TEST_CASE("identical distributions") {
    Tensor p = Tensor::from({2, 3}, {0.2, 0.3, 0.5, 0.1, 0.1, 0.8});
    CHECK(ops::kl_div(p, p).item() == 0.0);
  }

  TEST_CASE("closed form ln 2") {
    CHECK(ops::kl_div(Tensor::from({1, 2}, {1, 0}), Tensor::from({1, 2}, {0.5, 0.5})).item() ==
          doctest::Approx(std::log(2.0)).epsilon(1e-15));
  }

  TEST_CASE("random pair against quad-precision summation") {
    auto rng = make_stream(31, "kl");
    Tensor a = ops::softmax(random_tensor({4, 5}, rng, -2, 2, false), 1);
    Tensor b = ops::softmax(random_tensor({4, 5}, rng, -2, 2, false), 1);
    quad total = 0;
    for (int r = 0; r < 4; ++r) {
      for (int c = 0; c < 5; ++c) {
        const quad pa = a.data()[r * 5 + c], pb = b.data()[r * 5 + c];
        total += pa * boost::multiprecision::log(pa / pb);
      }
    }
    CHECK(std::abs(ops::kl_div(a, b).item() - static_cast<double>(total / 4)) < 1e-15);
  }

  TEST_CASE("non-negative on random distributions and masked mean") {
    auto rng = make_stream(32, "kl-prop");
    for (int t = 0; t < 50; ++t) {
      Tensor a = ops::softmax(random_tensor({3, 4}, rng, -5, 5, false), 1);
      Tensor b = ops::softmax(random_tensor({3, 4}, rng, -5, 5, false), 1);
      CHECK(ops::kl_div(a, b).item() >= -1e-12);
    }
    Tensor a = Tensor::from({2, 2}, {1, 0, 0.5, 0.5});
    Tensor b = Tensor::from({2, 2}, {0.5, 0.5, 0.5, 0.5});
    std::vector<std::uint8_t> mask{0, 1};
    CHECK(ops::kl_div(a, b, mask).item() == 0.0);
  }

  TEST_CASE("gradients to both arguments") {
    auto rng = make_stream(33, "kl-grad");
    Tensor a = Tensor::from({2, 3}, {0.2, 0.3, 0.5, 0.6, 0.3, 0.1}, true);
    Tensor b = Tensor::from({2, 3}, {0.4, 0.4, 0.2, 0.2, 0.5, 0.3}, true);
    auto r = check_gradients("kl", [&] { return ops::kl_div(a, b); }, {a, b});
    CHECK(r.passed);
  }
}

TEST_SUITE("autograd graph") {
  TEST_CASE("shared inputs accumulate and nodes are visited once") {
    Tensor a = Tensor::from({2}, {1.0, 2.0}, true);
    Tensor b = ops::scale(a, 3.0);
    Tensor c = ops::add(b, b);  // diamond through b
    Tensor loss = ops::mean(ops::add(c, a));
    auto g = Graph::from_root(loss);
    std::vector<std::string> ops;
    for (const auto& rec : g.records()) ops.push_back(rec.node->op);
    CHECK(ops == std::vector<std::string>{"scale", "add", "add", "mean"});
    loss.backward();
    CHECK(a.grad()[0] == doctest::Approx(3.5));  // (6 + 1) / 2
  }

  TEST_CASE("no-grad mode records nothing") {
    Tensor a = Tensor::from({1}, {1.0}, true);
    NoGradGuard guard;
    Tensor b = ops::scale(a, 2.0);
    CHECK(b.impl()->grad_fn == nullptr);
  }

  TEST_CASE("non-finite results raise a numerical error") {
    CHECK_THROWS_AS(ops::scale(Tensor::from({1}, {1e308}), 1e10), NumericalError);
  }

  TEST_CASE("backward is bit-reproducible") {
    auto grads = [] {
      auto rng = make_stream(99, "repro");
      Tensor f = random_tensor({6, 6, 4}, rng);
      Tensor c = random_tensor({10, 2}, rng, 0.2, 4.8);
      Tensor w = probe_weights(40, rng);
      probe(ops::bilinear_sample(f, c, Border::kClamp), w).backward();
      std::vector<double> g(f.grad().begin(), f.grad().end());
      g.insert(g.end(), c.grad().begin(), c.grad().end());
      return g;
    };
    CHECK(grads() == grads());
  }
}

TEST_SUITE("kernels") {
  TEST_CASE("parallel kernels agree bit-for-bit with the serial reference") {
    auto rng = make_stream(41, "kernels");
    kernels::set_num_threads(4);
    for (int trial = 0; trial < 10; ++trial) {
      const std::size_t N = 1 + uniform_index(rng, 30), K = 1 + uniform_index(rng, 9), M = 1 + uniform_index(rng, 7);
      auto x = random_tensor({N, K}, rng, -1, 1, false), w = random_tensor({K, M}, rng, -1, 1, false),
           b = random_tensor({M}, rng, -1, 1, false), gy = random_tensor({N, M}, rng, -1, 1, false);
      std::vector<double> o1(N * M), o2(N * M), gx1(N * K), gx2(N * K), gw1(K * M), gw2(K * M), gb1(M), gb2(M);
      kernels::serial::linear_forward(x.data(), w.data(), b.data(), o1, N, K, M);
      kernels::parallel::linear_forward(x.data(), w.data(), b.data(), o2, N, K, M);
      CHECK(o1 == o2);
      kernels::serial::linear_backward_input(gy.data(), w.data(), gx1, N, K, M);
      kernels::parallel::linear_backward_input(gy.data(), w.data(), gx2, N, K, M);
      CHECK(gx1 == gx2);
      kernels::serial::linear_backward_weight(x.data(), gy.data(), gw1, gb1, N, K, M);
      kernels::parallel::linear_backward_weight(x.data(), gy.data(), gw2, gb2, N, K, M);
      CHECK(gw1 == gw2);
      CHECK(gb1 == gb2);

      const kernels::MapDims dims{2 + uniform_index(rng, 6), 2 + uniform_index(rng, 6), 1 + uniform_index(rng, 6)};
      const std::size_t G = 1 + uniform_index(rng, dims.channels);
      auto map = random_tensor({dims.height, dims.width, dims.channels}, rng, -1, 1, false);
      auto coords = random_tensor({N, G, 2}, rng, -2, 8, false);
      auto gout = random_tensor({N, dims.channels}, rng, -1, 1, false);
      for (auto border : {Border::kClamp, Border::kWrapHorizontal}) {
        std::vector<double> s1(N * dims.channels), s2(N * dims.channels);
        kernels::serial::sample_forward(map.data(), dims, coords.data(), N, G, border, s1);
        kernels::parallel::sample_forward(map.data(), dims, coords.data(), N, G, border, s2);
        CHECK(s1 == s2);
        std::vector<double> gm1(map.numel()), gm2(map.numel()), gc1(coords.numel()), gc2(coords.numel());
        kernels::serial::sample_backward(map.data(), dims, coords.data(), N, G, border, gout.data(), gm1, gc1);
        kernels::parallel::sample_backward(map.data(), dims, coords.data(), N, G, border, gout.data(), gm2, gc2);
        CHECK(gm1 == gm2);
        CHECK(gc1 == gc2);

        const std::size_t k = 1 + uniform_index(rng, 4);
        const kernels::PatchGeometry geom{k, 1, dims.height, dims.width};
        std::vector<double> p1(dims.height * dims.width * k * k * dims.channels), p2(p1.size());
        kernels::serial::patches_forward(map.data(), dims, geom, border, p1);
        kernels::parallel::patches_forward(map.data(), dims, geom, border, p2);
        CHECK(p1 == p2);
        std::vector<double> pb1(map.numel()), pb2(map.numel());
        kernels::serial::patches_backward(p1, dims, geom, border, pb1);
        kernels::parallel::patches_backward(p1, dims, geom, border, pb2);
        CHECK(pb1 == pb2);
      }
    }
    kernels::set_num_threads(1);
  }
}

TEST_SUITE("pdt format") {
  TEST_CASE("header layout") {
    std::ostringstream os;
    write_pdt(os, Tensor::from({2, 1}, {1.5, -2.0}));
    const std::string bytes = os.str();
    REQUIRE(bytes.size() == 4 + 1 + 8 + 16);
    CHECK(bytes.substr(0, 4) == "PDT1");
    CHECK(bytes[4] == 2);
    CHECK(static_cast<unsigned char>(bytes[5]) == 2);
    CHECK(bytes[6] == 0);
    CHECK(static_cast<unsigned char>(bytes[9]) == 1);
  }

  TEST_CASE("random tensors round-trip exactly") {
    auto rng = make_stream(51, "pdt");
    for (int t = 0; t < 10; ++t) {
      Shape shape;
      for (std::size_t r = 0, n = uniform_index(rng, 4); r <= n; ++r) shape.push_back(1 + uniform_index(rng, 5));
      Tensor x = random_tensor(shape, rng, -1e6, 1e6, false);
      std::stringstream ss;
      write_pdt(ss, x);
      Tensor y = read_pdt(ss);
      CHECK(y.shape() == x.shape());
      CHECK(std::equal(x.data().begin(), x.data().end(), y.data().begin()));
    }
  }

  TEST_CASE("corrupt input is rejected") {
    std::stringstream bad("PDT2\x01");
    CHECK_THROWS_AS(read_pdt(bad), FormatError);
    std::ostringstream os;
    write_pdt(os, Tensor::zeros({3}));
    std::stringstream truncated(os.str().substr(0, 12));
    CHECK_THROWS_AS(read_pdt(truncated), FormatError);
  }
}
