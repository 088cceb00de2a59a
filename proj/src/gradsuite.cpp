#include "panodeform/gradsuite.hpp"

#include <cmath>
#include <cstdio>
#include <functional>
#include <map>
#include <sstream>
#include <stdexcept>

#include "panodeform/deform.hpp"
#include "panodeform/model.hpp"
#include "panodeform/mpa.hpp"
#include "panodeform/ops.hpp"
#include "panodeform/rng.hpp"

namespace panodeform::gradsuite {

using Rng = std::mt19937_64;

Scope parse_scope(const std::string& name) {
  if (name == "op") return Scope::kOp;
  if (name == "module") return Scope::kModule;
  if (name == "model") return Scope::kModel;
  if (name == "all") return Scope::kAll;
  throw std::invalid_argument("unknown gradcheck scope '" + name + "' (expected op, module, model or all)");
}

namespace {

Tensor rnd(Shape shape, Rng& rng, double lo = -1, double hi = 1, bool grad = true) {
  std::vector<double> v(numel(shape));
  for (auto& x : v) x = uniform(rng, lo, hi);
  return Tensor::from(std::move(shape), std::move(v), grad);
}

std::size_t dim(Rng& rng, std::size_t lo, std::size_t hi) { return lo + uniform_index(rng, hi - lo + 1); }

// Fixed random linear functional so every output element gets its own adjoint.
Tensor probe(const Tensor& out, const Tensor& w) {
  return ops::reshape(ops::matmul(ops::reshape(out, {1, out.numel()}), w), {1});
}

Tensor probe_weights(std::size_t n, Rng& rng) { return rnd({n, 1}, rng, -1, 1, false); }

deform::LinearParams linear(std::size_t in, std::size_t out, Rng& rng, double scale = 0.5) {
  return {rnd({in, out}, rng, -scale, scale), rnd({out}, rng, -scale, scale)};
}

// A fractional coordinate at least 0.05 from either cell edge.
double fractional(Rng& rng, std::size_t cells) {
  return static_cast<double>(uniform_index(rng, cells)) + uniform(rng, 0.05, 0.95);
}

double min_cell_distance(const Tensor& offsets) {
  double m = 1.0;
  for (double v : offsets.data()) m = std::min(m, std::abs(v - std::round(v)));
  return m;
}

// Distance to the nearest non-smooth point of a clamped offset field: a
// bilinear cell edge or the restriction bound.
double kink_distance(const deform::OffsetField& f) {
  double m = min_cell_distance(f.offsets);
  auto d = f.offsets.data();
  for (std::size_t i = 0; i < d.size(); ++i) {
    const double bound = i % 2 == 0 ? f.bound_row : f.bound_col;
    m = std::min(m, bound - std::abs(d[i]));
  }
  return m;
}

struct Built {
  std::string shape;
  std::function<Tensor()> loss;
  std::vector<Tensor> inputs;
  GradCheckOptions opts;
  /// False when a bilinear sample sits within the FD step of a cell edge;
  /// central differences are then meaningless and the draw is repeated.
  bool valid = true;
};

using Builder = std::function<Built(Rng&)>;

std::string shape_of(std::initializer_list<std::size_t> dims) {
  std::string s;
  for (auto d : dims) s += (s.empty() ? "" : "x") + std::to_string(d);
  return s;
}

Built matmul_case(Rng& rng) {
  const std::size_t m = dim(rng, 1, 6), k = dim(rng, 1, 6), n = dim(rng, 1, 6);
  Tensor a = rnd({m, k}, rng), b = rnd({k, n}, rng), w = probe_weights(m * n, rng);
  return {shape_of({m, k, n}), [=] { return probe(ops::matmul(a, b), w); }, {a, b}};
}

Built softmax_case(Rng& rng) {
  const std::size_t d0 = dim(rng, 1, 4), d1 = dim(rng, 1, 4), d2 = dim(rng, 2, 6), axis = uniform_index(rng, 3);
  Tensor x = rnd({d0, d1, d2}, rng, -3, 3), w = probe_weights(d0 * d1 * d2, rng);
  return {shape_of({d0, d1, d2}) + " axis " + std::to_string(axis), [=] { return probe(ops::softmax(x, axis), w); },
          {x}};
}

Built layernorm_case(Rng& rng) {
  const std::size_t n = dim(rng, 1, 5), d = dim(rng, 2, 8);
  Tensor x = rnd({n, d}, rng, -2, 2), g = rnd({d}, rng, 0.5, 1.5), b = rnd({d}, rng), w = probe_weights(n * d, rng);
  return {shape_of({n, d}), [=] { return probe(ops::layernorm(x, g, b), w); }, {x, g, b}};
}

Built gelu_case(Rng& rng) {
  const std::size_t n = dim(rng, 1, 5), d = dim(rng, 1, 6);
  Tensor x = rnd({n, d}, rng, -3, 3), w = probe_weights(n * d, rng);
  return {shape_of({n, d}), [=] { return probe(ops::gelu(x), w); }, {x}};
}

Built bilinear_case(Rng& rng) {
  const std::size_t H = dim(rng, 2, 6), W = dim(rng, 2, 7), C = dim(rng, 1, 3), N = dim(rng, 3, 12);
  const Border border = uniform01(rng) < 0.5 ? Border::kClamp : Border::kWrapHorizontal;
  Tensor f = rnd({H, W, C}, rng);
  std::vector<double> pts;
  for (std::size_t i = 0; i < N; ++i) {
    pts.push_back(fractional(rng, H - 1));
    // wrap mode may read across the seam
    pts.push_back(border == Border::kWrapHorizontal ? fractional(rng, W) : fractional(rng, W - 1));
  }
  Tensor coords = Tensor::from({N, 2}, pts, true), w = probe_weights(N * C, rng);
  const std::string b = border == Border::kClamp ? " clamp" : " wrap";
  return {shape_of({H, W, C, N}) + b, [=] { return probe(ops::bilinear_sample(f, coords, border), w); }, {f, coords}};
}

Built grouped_case(Rng& rng) {
  const std::size_t H = dim(rng, 2, 5), W = dim(rng, 2, 5), G = dim(rng, 1, 3), C = G * dim(rng, 1, 2),
                    N = dim(rng, 2, 6);
  Tensor f = rnd({H, W, C}, rng);
  std::vector<double> pts;
  for (std::size_t i = 0; i < N * G; ++i) {
    pts.push_back(fractional(rng, H - 1));
    pts.push_back(fractional(rng, W - 1));
  }
  Tensor coords = Tensor::from({N, G, 2}, pts, true), w = probe_weights(N * C, rng);
  return {shape_of({H, W, C, N}) + " groups " + std::to_string(G),
          [=] { return probe(ops::bilinear_sample_grouped(f, coords, Border::kClamp), w); }, {f, coords}};
}

Built upsample_case(Rng& rng) {
  const std::size_t h = dim(rng, 1, 4), w = dim(rng, 1, 4), c = dim(rng, 1, 3), H = dim(rng, 1, 9), W = dim(rng, 1, 9);
  Tensor f = rnd({h, w, c}, rng), pw = probe_weights(H * W * c, rng);
  return {shape_of({h, w, c}) + " -> " + shape_of({H, W}), [=] { return probe(ops::upsample_bilinear(f, H, W), pw); },
          {f}};
}

Built ce_case(Rng& rng) {
  const std::size_t n = dim(rng, 2, 10), K = dim(rng, 2, 6);
  Tensor z = rnd({n, K}, rng, -3, 3);
  std::vector<std::int32_t> y(n);
  for (auto& v : y) v = uniform01(rng) < 0.2 ? kIgnoreLabel : static_cast<std::int32_t>(uniform_index(rng, K));
  y[0] = 0;  // at least one valid row
  return {shape_of({n, K}), [=] { return ops::cross_entropy(z, y); }, {z}};
}

Built kl_case(Rng& rng) {
  const std::size_t n = dim(rng, 1, 6), K = dim(rng, 2, 6);
  auto dist = [&] {
    Tensor t = rnd({n, K}, rng, 0.1, 1.0);
    auto d = t.mutable_data();
    for (std::size_t i = 0; i < n; ++i) {
      double s = 0;
      for (std::size_t k = 0; k < K; ++k) s += d[i * K + k];
      for (std::size_t k = 0; k < K; ++k) d[i * K + k] /= s;
    }
    return t;
  };
  Tensor a = dist(), b = dist();
  std::vector<std::uint8_t> mask(n);
  for (auto& m : mask) m = uniform01(rng) < 0.75;
  mask[0] = 1;
  return {shape_of({n, K}), [=] { return ops::kl_div(a, b, mask); }, {a, b}};
}

Built attention_case(Rng& rng) {
  const std::size_t heads = dim(rng, 1, 2), C = heads * dim(rng, 1, 3), N = dim(rng, 1, 5), M = dim(rng, 1, 5);
  Tensor q = rnd({N, C}, rng), k = rnd({M, C}, rng), v = rnd({M, C}, rng), w = probe_weights(N * C, rng);
  return {shape_of({N, M, C}) + " heads " + std::to_string(heads),
          [=] { return probe(ops::attention(q, k, v, heads), w); }, {q, k, v}};
}

Built dpe_case(Rng& rng) {
  const std::size_t s = dim(rng, 2, 3), stride = dim(rng, 1, 2), cin = dim(rng, 1, 3), cout = dim(rng, 1, 4);
  const std::size_t H = stride * dim(rng, 2, 4), W = stride * dim(rng, 2, 4);
  const double r = std::array<double, 3>{1, 2, 4}[uniform_index(rng, 3)];
  deform::PatchEmbedConfig cfg{s, stride, cin, cout, true, r};
  Tensor f = rnd({H, W, cin}, rng);
  auto proj = linear(s * s * cin, cout, rng), g = linear(9 * cin, 2 * s * s, rng, 0.6);
  const std::size_t n_out = (H / stride) * (W / stride) * cout;
  Tensor w = probe_weights(n_out, rng);
  Built b{shape_of({H, W, cin}) + " s" + std::to_string(s) + " stride" + std::to_string(stride),
          [=] { return probe(deform::dpe(f, cfg, proj, g), w); },
          {f, proj.weight, proj.bias, g.weight, g.bias}};
  deform::OffsetField field;
  {
    NoGradGuard no_grad;
    deform::dpe(f, cfg, proj, g, &field);
  }
  b.valid = min_cell_distance(field.offsets) > 1e-3;
  return b;
}

Built dmlp_case(Rng& rng) {
  const std::size_t H = dim(rng, 2, 5), W = dim(rng, 2, 5), C = dim(rng, 1, 4), cout = dim(rng, 1, 4);
  const std::size_t G = deform::dmlp_groups(C, 64);
  Tensor f = rnd({H, W, C}, rng);
  auto g = linear(9 * C, 2 * G, rng, 0.6), w = linear(C, cout, rng);
  Tensor pw = probe_weights(H * W * cout, rng);
  Built b{shape_of({H, W, C, cout}), [=] { return probe(deform::dmlp_mix(f, g, w, 2.0, 64, Border::kClamp), pw); },
          {f, g.weight, g.bias, w.weight, w.bias}};
  deform::OffsetField field;
  {
    NoGradGuard no_grad;
    deform::dmlp_mix(f, g, w, 2.0, 64, Border::kClamp, &field);
  }
  b.valid = min_cell_distance(field.offsets) > 1e-3;
  return b;
}

Built mpa_case(Rng& rng) {
  const std::size_t h = dim(rng, 1, 3), w = dim(rng, 1, 3), C = dim(rng, 3, 6);
  Tensor f = rnd({h, w, C}, rng, -2, 2);
  Tensor fhat = rnd({h, w, C}, rng, -2, 2, false);
  std::vector<std::uint8_t> mask(h * w);
  std::vector<std::int32_t> y(h * w);
  for (std::size_t p = 0; p < h * w; ++p) {
    mask[p] = uniform01(rng) < 0.8;
    y[p] = uniform01(rng) < 0.2 ? kIgnoreLabel : static_cast<std::int32_t>(uniform_index(rng, C));
  }
  mask[0] = 1;
  mpa::AdaptConfig cfg;
  cfg.temperature = uniform(rng, 1, 20);
  mpa::PrototypeMap target{fhat, mask};
  return {shape_of({h, w, C}), [=] { return mpa::mpa_loss(f, target, y, cfg); }, {f}};
}

model::ModelConfig probe_model() {
  model::ModelConfig c = model::ModelConfig::nano(3);
  c.channels = {4, 4, 8, 8};
  c.heads = {1, 2, 2, 1};
  c.mlp_ratio = 2;
  c.embed_dim = 4;
  c.patch_sizes = {3, 3, 3, 3};
  c.r = 1.0;  // keeps the mid-cell offsets clear of the restriction bound
  return c;
}

Built model_case(Rng& rng) {
  static const std::array<std::array<std::size_t, 2>, 5> sizes{{{32, 64}, {64, 32}, {32, 96}, {64, 64}, {32, 128}}};
  const auto hw = sizes[uniform_index(rng, sizes.size())];
  auto net = std::make_shared<model::Trans4Pass>(probe_model(), rng());
  // Init-scale weights give gradients small enough for FD noise to dominate;
  // random offsets exercise the deformable sampling paths.
  for (auto [name, t] : net->params().items()) {
    const bool offset = name.find(".offset.") != std::string::npos;
    const bool linear_w = name.back() == 'w' && name.find("ln") == std::string::npos &&
                          name.find("norm") == std::string::npos;
    if (offset) {
      // Zero offsets put every tap on a cell edge; centre them mid-cell instead.
      const bool bias = name.back() == 'b';
      for (auto& v : t.mutable_data()) v = bias ? uniform(rng, 0.3, 0.45) : uniform(rng, -0.01, 0.01);
    } else if (linear_w) {
      for (auto& v : t.mutable_data()) v = uniform(rng, -0.3, 0.3);
    }
  }
  Tensor x = rnd({hw[0], hw[1], 3}, rng, 0, 1);
  std::vector<std::int32_t> labels(hw[0] * hw[1]);
  for (auto& y : labels) y = static_cast<std::int32_t>(uniform_index(rng, 3));
  std::vector<Tensor> inputs{x};
  for (const char* name : {"enc.0.pe.proj.w", "enc.0.pe.offset.w", "enc.2.block0.attn.q.w", "enc.2.block0.attn.sr.w",
                           "enc.3.block0.mlp.fc1.w", "dec.0.pe.offset.w", "dec.1.dmlp.offset.w", "dec.2.dmlp.fc.w",
                           "dec.3.mlp.fc2.b", "head.ln.g", "head.cls.w"}) {
    inputs.push_back(net->params().get(name));
  }
  Built b{shape_of({hw[0], hw[1], 3}), [=] { return ops::cross_entropy(net->forward(x).logits, labels); }, inputs};
  b.opts.max_coords = 12;
  // Some parameter gradients are tiny next to the loss; a wider step keeps
  // roundoff below tolerance, and the kink margin below keeps it valid.
  b.opts.step = 1e-4;
  model::Probes probes;
  {
    NoGradGuard no_grad;
    net->forward(x, &probes);
  }
  double m = 1.0;
  for (std::size_t l = 0; l < 4; ++l) {
    m = std::min({m, kink_distance(probes.encoder_offsets[l]), kink_distance(probes.decoder_pe_offsets[l]),
                  kink_distance(probes.decoder_mix_offsets[l])});
  }
  b.valid = m > 5e-3;
  return b;
}

struct Entry {
  std::string op;
  Scope scope;
  Builder build;
};

const std::vector<Entry>& registry() {
  static const std::vector<Entry> r{
      {"matmul", Scope::kOp, matmul_case},
      {"softmax", Scope::kOp, softmax_case},
      {"layernorm", Scope::kOp, layernorm_case},
      {"gelu", Scope::kOp, gelu_case},
      {"bilinear_sample", Scope::kOp, bilinear_case},
      {"bilinear_sample_grouped", Scope::kOp, grouped_case},
      {"upsample_bilinear", Scope::kOp, upsample_case},
      {"cross_entropy", Scope::kOp, ce_case},
      {"kl_div", Scope::kOp, kl_case},
      {"attention", Scope::kOp, attention_case},
      {"dpe", Scope::kModule, dpe_case},
      {"dmlp", Scope::kModule, dmlp_case},
      {"mpa_loss", Scope::kModule, mpa_case},
      {"trans4pass", Scope::kModel, model_case},
  };
  return r;
}

}  // namespace

std::vector<Case> run(Scope scope, const Options& opts) {
  std::vector<Case> out;
  for (const auto& e : registry()) {
    if (scope != Scope::kAll && scope != e.scope) continue;
    auto rng = make_stream(opts.seed, "gradsuite/" + e.op);
    for (std::size_t i = 0; i < opts.shapes_per_op; ++i) {
      Built b = e.build(rng);
      for (int retry = 0; !b.valid && retry < 20; ++retry) b = e.build(rng);
      if (!b.valid) throw std::runtime_error("gradcheck: no kink-free draw for " + e.op);
      b.opts.tolerance = opts.tolerance;
      // One check per input, so a failure names the offending argument.
      Case c{e.op, b.shape, {}, 0};
      c.result.passed = true;
      for (std::size_t k = 0; k < b.inputs.size(); ++k) {
        auto r = check_gradients(e.op, b.loss, {b.inputs[k]}, b.opts);
        if (k == 0 || r.max_rel_error > c.result.max_rel_error) {
          c.result.max_rel_error = r.max_rel_error;
          c.worst_input = k;
        }
        c.result.coords_checked += r.coords_checked;
        c.result.passed = c.result.passed && r.passed;
      }
      c.result.name = e.op;
      out.push_back(c);
    }
  }
  return out;
}

std::string table(const std::vector<Case>& cases) {
  std::map<std::string, std::size_t> order;
  struct Row {
    std::size_t shapes = 0;
    double worst = 0;
    bool passed = true;
  };
  std::vector<std::pair<std::string, Row>> rows;
  for (const auto& c : cases) {
    if (!order.count(c.op)) {
      order[c.op] = rows.size();
      rows.push_back({c.op, {}});
    }
    Row& r = rows[order[c.op]].second;
    ++r.shapes;
    r.worst = std::max(r.worst, c.result.max_rel_error);
    r.passed = r.passed && c.result.passed;
  }
  std::ostringstream os;
  char line[128];
  std::snprintf(line, sizeof line, "%-24s %6s %12s  %s\n", "op", "shapes", "max_rel_err", "result");
  os << line;
  for (const auto& [op, r] : rows) {
    std::snprintf(line, sizeof line, "%-24s %6zu %12.3e  %s\n", op.c_str(), r.shapes, r.worst, r.passed ? "PASS" : "FAIL");
    os << line;
  }
  return os.str();
}

bool all_passed(const std::vector<Case>& cases) {
  for (const auto& c : cases) {
    if (!c.result.passed) return false;
  }
  return true;
}

}  // namespace panodeform::gradsuite
