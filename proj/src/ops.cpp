#include "panodeform/ops.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <limits>
#include <numbers>

namespace panodeform {

namespace fault {
namespace {
std::atomic<Kind> g_fault{Kind::kNone};
}
void inject(Kind kind) { g_fault.store(kind); }
Kind active() { return g_fault.load(); }
}  // namespace fault

namespace ops {

namespace {

using ImplPtr = std::shared_ptr<TensorImpl>;

// Gradient sink of an input, or nullptr when nothing upstream needs it.
double* sink(const ImplPtr& impl) {
  if (!impl || !(impl->requires_grad || impl->grad_fn)) return nullptr;
  return impl->grad_buffer().data();
}

std::span<double> sink_span(const ImplPtr& impl) {
  double* p = sink(impl);
  return p ? std::span<double>(p, impl->data.size()) : std::span<double>();
}

void require(bool ok, const std::string& msg) {
  if (!ok) throw DimensionError(msg);
}

std::size_t last_dim(const Tensor& t) { return t.shape().back(); }

kernels::MapDims map_dims(const Tensor& f, const char* op) {
  require(f.rank() == 3, std::string(op) + ": expected H x W x C map, got " + shape_str(f.shape()));
  return {f.dim(0), f.dim(1), f.dim(2)};
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
  require(a.rank() == 2 && b.rank() == 2 && a.dim(1) == b.dim(0),
          "matmul: incompatible shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape()));
  const std::size_t M = a.dim(0), K = a.dim(1), N = b.dim(1);
  std::vector<double> out(M * N);
  kernels::parallel::linear_forward(a.data(), b.data(), {}, out, M, K, N);
  ImplPtr ai = a.impl(), bi = b.impl();
  return make_result({M, N}, std::move(out), "matmul", {a, b},
                     [ai, bi, M, K, N](std::span<const double> gy) {
                       if (auto ga = sink_span(ai); !ga.empty())
                         kernels::parallel::linear_backward_input(gy, bi->data, ga, M, K, N);
                       if (auto gb = sink_span(bi); !gb.empty())
                         kernels::parallel::linear_backward_weight(ai->data, gy, gb, {}, M, K, N);
                     });
}

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) {
  require(w.rank() == 2 && x.rank() >= 1 && last_dim(x) == w.dim(0),
          "linear: input " + shape_str(x.shape()) + " vs weight " + shape_str(w.shape()));
  const std::size_t in_dim = w.dim(0), out_dim = w.dim(1);
  require(!b.defined() || (b.rank() == 1 && b.dim(0) == out_dim), "linear: bias shape");
  const std::size_t rows = x.numel() / in_dim;
  Shape shape = x.shape();
  shape.back() = out_dim;
  std::vector<double> out(rows * out_dim);
  kernels::parallel::linear_forward(x.data(), w.data(),
                                    b.defined() ? b.data() : std::span<const double>(), out, rows,
                                    in_dim, out_dim);
  ImplPtr xi = x.impl(), wi = w.impl(), bi = b.defined() ? b.impl() : nullptr;
  return make_result(std::move(shape), std::move(out), "linear", {x, w, b},
                     [xi, wi, bi, rows, in_dim, out_dim](std::span<const double> gy) {
                       if (auto gx = sink_span(xi); !gx.empty())
                         kernels::parallel::linear_backward_input(gy, wi->data, gx, rows, in_dim, out_dim);
                       auto gw = sink_span(wi);
                       auto gb = sink_span(bi);
                       if (!gw.empty()) {
                         kernels::parallel::linear_backward_weight(xi->data, gy, gw, gb, rows, in_dim, out_dim);
                       } else if (!gb.empty()) {
                         for (std::size_t n = 0; n < rows; ++n)
                           for (std::size_t j = 0; j < out_dim; ++j) gb[j] += gy[n * out_dim + j];
                       }
                     });
}

Tensor add(const Tensor& a, const Tensor& b) { return add_n({a, b}); }

Tensor add_n(const std::vector<Tensor>& terms) {
  require(!terms.empty(), "add_n: no terms");
  const Shape& shape = terms.front().shape();
  for (const auto& t : terms) {
    require(t.shape() == shape, "add: shape mismatch " + shape_str(shape) + " vs " + shape_str(t.shape()));
  }
  std::vector<double> out(terms.front().data().begin(), terms.front().data().end());
  for (std::size_t t = 1; t < terms.size(); ++t) {
    auto d = terms[t].data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += d[i];
  }
  std::vector<ImplPtr> impls;
  for (const auto& t : terms) impls.push_back(t.impl());
  return make_result(shape, std::move(out), "add", terms, [impls](std::span<const double> gy) {
    for (const auto& impl : impls) {
      if (double* g = sink(impl)) {
        for (std::size_t i = 0; i < gy.size(); ++i) g[i] += gy[i];
      }
    }
  });
}

Tensor scale(const Tensor& a, double factor) {
  std::vector<double> out(a.data().begin(), a.data().end());
  for (auto& v : out) v *= factor;
  ImplPtr ai = a.impl();
  return make_result(a.shape(), std::move(out), "scale", {a}, [ai, factor](std::span<const double> gy) {
    if (double* g = sink(ai)) {
      for (std::size_t i = 0; i < gy.size(); ++i) g[i] += factor * gy[i];
    }
  });
}

Tensor reshape(const Tensor& a, Shape shape) {
  require(numel(shape) == a.numel(),
          "reshape: " + shape_str(a.shape()) + " cannot become " + shape_str(shape));
  std::vector<double> out(a.data().begin(), a.data().end());
  ImplPtr ai = a.impl();
  return make_result(std::move(shape), std::move(out), "reshape", {a}, [ai](std::span<const double> gy) {
    if (double* g = sink(ai)) {
      for (std::size_t i = 0; i < gy.size(); ++i) g[i] += gy[i];
    }
  });
}

Tensor gelu(const Tensor& a) {
  constexpr double inv_sqrt2 = 0.70710678118654752440;
  const double inv_sqrt_2pi = 0.5 * std::numbers::inv_sqrtpi * std::numbers::sqrt2;
  auto x = a.data();
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = 0.5 * x[i] * (1.0 + std::erf(x[i] * inv_sqrt2));
  ImplPtr ai = a.impl();
  return make_result(a.shape(), std::move(out), "gelu", {a}, [ai, inv_sqrt_2pi](std::span<const double> gy) {
    if (double* g = sink(ai)) {
      const auto& xs = ai->data;
      for (std::size_t i = 0; i < gy.size(); ++i) {
        const double cdf = 0.5 * (1.0 + std::erf(xs[i] * inv_sqrt2));
        const double pdf = inv_sqrt_2pi * std::exp(-0.5 * xs[i] * xs[i]);
        g[i] += gy[i] * (cdf + xs[i] * pdf);
      }
    }
  });
}

Tensor softmax(const Tensor& x, std::size_t axis) {
  require(axis < x.rank(), "softmax: axis out of range for " + shape_str(x.shape()));
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= x.dim(i);
  for (std::size_t i = axis + 1; i < x.rank(); ++i) inner *= x.dim(i);
  const std::size_t n = x.dim(axis);
  auto in = x.data();
  std::vector<double> out(in.size());
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t q = 0; q < inner; ++q) {
      const std::size_t base = o * n * inner + q;
      double mx = in[base];
      for (std::size_t i = 1; i < n; ++i) mx = std::max(mx, in[base + i * inner]);
      double sum = 0.0;
      for (std::size_t i = 0; i < n; ++i) {
        const double e = std::exp(in[base + i * inner] - mx);
        out[base + i * inner] = e;
        sum += e;
      }
      for (std::size_t i = 0; i < n; ++i) out[base + i * inner] /= sum;
    }
  }
  auto saved = std::make_shared<std::vector<double>>(out);
  ImplPtr xi = x.impl();
  return make_result(x.shape(), std::move(out), "softmax", {x},
                     [xi, saved, outer, inner, n](std::span<const double> gy) {
                       double* g = sink(xi);
                       if (!g) return;
                       const auto& y = *saved;
                       for (std::size_t o = 0; o < outer; ++o) {
                         for (std::size_t q = 0; q < inner; ++q) {
                           const std::size_t base = o * n * inner + q;
                           double dot = 0.0;
                           for (std::size_t i = 0; i < n; ++i) dot += gy[base + i * inner] * y[base + i * inner];
                           for (std::size_t i = 0; i < n; ++i) {
                             const std::size_t idx = base + i * inner;
                             g[idx] += y[idx] * (gy[idx] - dot);
                           }
                         }
                       }
                     });
}

Tensor layernorm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
  const std::size_t C = last_dim(x);
  require(gamma.numel() == C && beta.numel() == C, "layernorm: affine size must equal last axis");
  const std::size_t rows = x.numel() / C;
  auto in = x.data();
  auto gm = gamma.data();
  auto bt = beta.data();
  std::vector<double> out(in.size());
  auto xhat = std::make_shared<std::vector<double>>(in.size());
  auto inv_std = std::make_shared<std::vector<double>>(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xr = in.data() + r * C;
    double mu = 0.0;
    for (std::size_t c = 0; c < C; ++c) mu += xr[c];
    mu /= static_cast<double>(C);
    double var = 0.0;
    for (std::size_t c = 0; c < C; ++c) var += (xr[c] - mu) * (xr[c] - mu);
    var /= static_cast<double>(C);
    const double is = 1.0 / std::sqrt(var + eps);
    (*inv_std)[r] = is;
    for (std::size_t c = 0; c < C; ++c) {
      const double h = (xr[c] - mu) * is;
      (*xhat)[r * C + c] = h;
      out[r * C + c] = gm[c] * h + bt[c];
    }
  }
  ImplPtr xi = x.impl(), gi = gamma.impl(), bi = beta.impl();
  return make_result(x.shape(), std::move(out), "layernorm", {x, gamma, beta},
                     [xi, gi, bi, xhat, inv_std, rows, C](std::span<const double> gy) {
                       double* gx = sink(xi);
                       double* gg = sink(gi);
                       double* gb = sink(bi);
                       const auto& h = *xhat;
                       const auto& gm = gi->data;
                       std::vector<double> gh(C);
                       for (std::size_t r = 0; r < rows; ++r) {
                         const double* g = gy.data() + r * C;
                         if (gg || gb) {
                           for (std::size_t c = 0; c < C; ++c) {
                             if (gg) gg[c] += g[c] * h[r * C + c];
                             if (gb) gb[c] += g[c];
                           }
                         }
                         if (!gx) continue;
                         double mean_gh = 0.0, mean_ghh = 0.0;
                         for (std::size_t c = 0; c < C; ++c) {
                           gh[c] = g[c] * gm[c];
                           mean_gh += gh[c];
                           mean_ghh += gh[c] * h[r * C + c];
                         }
                         mean_gh /= static_cast<double>(C);
                         mean_ghh /= static_cast<double>(C);
                         const double is = (*inv_std)[r];
                         for (std::size_t c = 0; c < C; ++c) {
                           gx[r * C + c] += is * (gh[c] - mean_gh - h[r * C + c] * mean_ghh);
                         }
                       }
                     });
}

namespace {

Tensor sample_impl(const Tensor& f, const Tensor& coords, std::size_t groups, Shape out_shape,
                   Border border, const char* op) {
  const auto dims = map_dims(f, op);
  const std::size_t points = coords.numel() / (2 * groups);
  require(coords.numel() == points * groups * 2, std::string(op) + ": coords must be [N x G x 2]");
  require(groups >= 1 && groups <= dims.channels, std::string(op) + ": invalid group count");
  check_finite(coords.data(), op);
  std::vector<double> out(points * dims.channels);
  kernels::parallel::sample_forward(f.data(), dims, coords.data(), points, groups, border, out);
  ImplPtr fi = f.impl(), ci = coords.impl();
  return make_result(std::move(out_shape), std::move(out), op, {f, coords},
                     [fi, ci, dims, points, groups, border](std::span<const double> gy) {
                       auto gf = sink_span(fi);
                       auto gc = sink_span(ci);
                       if (gf.empty() && gc.empty()) return;
                       std::vector<double> gc_local;
                       if (!gc.empty() && fault::active() == fault::Kind::kBilinearCoordSign) {
                         gc_local.assign(gc.size(), 0.0);
                       }
                       std::span<double> gc_target = gc_local.empty() ? gc : std::span<double>(gc_local);
                       kernels::parallel::sample_backward(fi->data, dims, ci->data, points, groups,
                                                          border, gy, gf, gc_target);
                       for (std::size_t i = 0; i < gc_local.size(); ++i) gc[i] -= gc_local[i];
                     });
}

}  // namespace

Tensor bilinear_sample(const Tensor& f, const Tensor& coords, Border border) {
  require(coords.rank() == 2 && coords.dim(1) == 2, "bilinear_sample: coords must be [N x 2]");
  const std::size_t C = f.rank() == 3 ? f.dim(2) : 0;
  return sample_impl(f, coords, 1, {coords.dim(0), C}, border, "bilinear_sample");
}

Tensor bilinear_sample_grouped(const Tensor& f, const Tensor& coords, Border border) {
  require(coords.rank() == 3 && coords.dim(2) == 2,
          "bilinear_sample_grouped: coords must be [N x G x 2]");
  const std::size_t C = f.rank() == 3 ? f.dim(2) : 0;
  return sample_impl(f, coords, coords.dim(1), {coords.dim(0), C}, border, "bilinear_sample_grouped");
}

Tensor extract_patches(const Tensor& f, std::size_t kernel, std::size_t stride, Border border) {
  const auto dims = map_dims(f, "extract_patches");
  require(kernel >= 1 && stride >= 1, "extract_patches: kernel and stride must be positive");
  require(dims.height % stride == 0 && dims.width % stride == 0,
          "extract_patches: " + shape_str(f.shape()) + " not divisible by stride " + std::to_string(stride));
  const kernels::PatchGeometry geom{kernel, stride, dims.height / stride, dims.width / stride};
  const std::size_t cells = geom.out_height * geom.out_width;
  const std::size_t row_len = kernel * kernel * dims.channels;
  std::vector<double> out(cells * row_len);
  kernels::parallel::patches_forward(f.data(), dims, geom, border, out);
  ImplPtr fi = f.impl();
  return make_result({cells, row_len}, std::move(out), "extract_patches", {f},
                     [fi, dims, geom, border](std::span<const double> gy) {
                       if (auto gf = sink_span(fi); !gf.empty())
                         kernels::parallel::patches_backward(gy, dims, geom, border, gf);
                     });
}

namespace {

struct ResampleTap {
  std::size_t lo, hi;
  double t;
};

std::vector<ResampleTap> resample_taps(std::size_t in, std::size_t out) {
  std::vector<ResampleTap> taps(out);
  const double ratio = static_cast<double>(in) / static_cast<double>(out);
  for (std::size_t o = 0; o < out; ++o) {
    double src = (static_cast<double>(o) + 0.5) * ratio - 0.5;
    if (src < 0.0) src = 0.0;
    auto lo = static_cast<std::size_t>(std::floor(src));
    if (lo > in - 1) lo = in - 1;
    const std::size_t hi = std::min(lo + 1, in - 1);
    taps[o] = {lo, hi, src - static_cast<double>(lo)};
  }
  return taps;
}

}  // namespace

Tensor upsample_bilinear(const Tensor& f, std::size_t out_height, std::size_t out_width) {
  const auto dims = map_dims(f, "upsample_bilinear");
  require(out_height > 0 && out_width > 0, "upsample_bilinear: target size must be positive");
  const std::size_t C = dims.channels;
  auto ty = std::make_shared<std::vector<ResampleTap>>(resample_taps(dims.height, out_height));
  auto tx = std::make_shared<std::vector<ResampleTap>>(resample_taps(dims.width, out_width));
  auto in = f.data();
  std::vector<double> out(out_height * out_width * C);
  for (std::size_t oy = 0; oy < out_height; ++oy) {
    const auto& a = (*ty)[oy];
    for (std::size_t ox = 0; ox < out_width; ++ox) {
      const auto& b = (*tx)[ox];
      const double* p00 = in.data() + (a.lo * dims.width + b.lo) * C;
      const double* p01 = in.data() + (a.lo * dims.width + b.hi) * C;
      const double* p10 = in.data() + (a.hi * dims.width + b.lo) * C;
      const double* p11 = in.data() + (a.hi * dims.width + b.hi) * C;
      double* o = out.data() + (oy * out_width + ox) * C;
      // lerp form keeps constant maps exactly constant
      for (std::size_t c = 0; c < C; ++c) {
        const double top = p00[c] + b.t * (p01[c] - p00[c]);
        const double bottom = p10[c] + b.t * (p11[c] - p10[c]);
        o[c] = top + a.t * (bottom - top);
      }
    }
  }
  ImplPtr fi = f.impl();
  return make_result({out_height, out_width, C}, std::move(out), "upsample_bilinear", {f},
                     [fi, ty, tx, dims, out_height, out_width](std::span<const double> gy) {
                       double* g = sink(fi);
                       if (!g) return;
                       const std::size_t C = dims.channels;
                       for (std::size_t oy = 0; oy < out_height; ++oy) {
                         const auto& a = (*ty)[oy];
                         for (std::size_t ox = 0; ox < out_width; ++ox) {
                           const auto& b = (*tx)[ox];
                           const double w[4] = {(1 - a.t) * (1 - b.t), (1 - a.t) * b.t, a.t * (1 - b.t), a.t * b.t};
                           const std::size_t idx[4] = {a.lo * dims.width + b.lo, a.lo * dims.width + b.hi,
                                                       a.hi * dims.width + b.lo, a.hi * dims.width + b.hi};
                           const double* go = gy.data() + (oy * out_width + ox) * C;
                           for (int q = 0; q < 4; ++q) {
                             double* gp = g + idx[q] * C;
                             for (std::size_t c = 0; c < C; ++c) gp[c] += w[q] * go[c];
                           }
                         }
                       }
                     });
}

Tensor clamp(const Tensor& x, double lo, double hi) {
  require(lo < hi, "clamp: lo must be below hi");
  auto in = x.data();
  std::vector<double> out(in.size());
  for (std::size_t i = 0; i < in.size(); ++i) out[i] = std::min(std::max(in[i], lo), hi);
  ImplPtr xi = x.impl();
  return make_result(x.shape(), std::move(out), "clamp", {x}, [xi, lo, hi](std::span<const double> gy) {
    if (double* g = sink(xi)) {
      const auto& v = xi->data;
      for (std::size_t i = 0; i < gy.size(); ++i) {
        if (v[i] >= lo && v[i] <= hi) g[i] += gy[i];
      }
    }
  });
}

Tensor clamp_offsets(const Tensor& raw, double bound_row, double bound_col) {
  require(raw.rank() >= 1 && raw.shape().back() == 2, "clamp_offsets: last axis must be 2 (row, col)");
  require(bound_row > 0 && bound_col > 0, "clamp_offsets: bounds must be positive");
  auto in = raw.data();
  std::vector<double> out(in.size());
  for (std::size_t i = 0; i < in.size(); ++i) {
    const double b = (i % 2 == 0) ? bound_row : bound_col;
    out[i] = std::min(std::max(-b, in[i]), b);
  }
  ImplPtr ri = raw.impl();
  return make_result(raw.shape(), std::move(out), "clamp_offsets", {raw},
                     [ri, bound_row, bound_col](std::span<const double> gy) {
                       if (double* g = sink(ri)) {
                         const auto& v = ri->data;
                         for (std::size_t i = 0; i < gy.size(); ++i) {
                           const double b = (i % 2 == 0) ? bound_row : bound_col;
                           if (v[i] >= -b && v[i] <= b) g[i] += gy[i];
                         }
                       }
                     });
}

Tensor cross_entropy(const Tensor& logits, std::span<const std::int32_t> labels,
                     std::int32_t ignore_index) {
  const std::size_t K = last_dim(logits);
  const std::size_t rows = logits.numel() / K;
  require(labels.size() == rows, "cross_entropy: " + std::to_string(labels.size()) +
                                     " labels for " + std::to_string(rows) + " rows");
  auto in = logits.data();
  auto probs = std::make_shared<std::vector<double>>(in.size());
  auto lbl = std::make_shared<std::vector<std::int32_t>>(labels.begin(), labels.end());
  double total = 0.0;
  std::size_t valid = 0;
  for (std::size_t r = 0; r < rows; ++r) {
    const double* z = in.data() + r * K;
    double mx = z[0];
    for (std::size_t k = 1; k < K; ++k) mx = std::max(mx, z[k]);
    double sum = 0.0;
    for (std::size_t k = 0; k < K; ++k) sum += std::exp(z[k] - mx);
    const double lse = mx + std::log(sum);
    for (std::size_t k = 0; k < K; ++k) (*probs)[r * K + k] = std::exp(z[k] - lse);
    const std::int32_t y = labels[r];
    if (y == ignore_index) continue;
    require(y >= 0 && static_cast<std::size_t>(y) < K,
            "cross_entropy: label " + std::to_string(y) + " outside [0, " + std::to_string(K) + ")");
    total += lse - z[y];
    ++valid;
  }
  const double loss = valid ? total / static_cast<double>(valid) : 0.0;
  ImplPtr li = logits.impl();
  return make_result({1}, {loss}, "cross_entropy", {logits},
                     [li, probs, lbl, K, rows, valid, ignore_index](std::span<const double> gy) {
                       double* g = sink(li);
                       if (!g || valid == 0) return;
                       const double s = gy[0] / static_cast<double>(valid);
                       for (std::size_t r = 0; r < rows; ++r) {
                         const std::int32_t y = (*lbl)[r];
                         if (y == ignore_index) continue;
                         for (std::size_t k = 0; k < K; ++k) {
                           const double onehot = static_cast<std::size_t>(y) == k ? 1.0 : 0.0;
                           g[r * K + k] += s * ((*probs)[r * K + k] - onehot);
                         }
                       }
                     });
}

Tensor kl_div(const Tensor& p_ref, const Tensor& p, std::span<const std::uint8_t> mask) {
  require(p_ref.shape() == p.shape(), "kl_div: shape mismatch " + shape_str(p_ref.shape()) +
                                          " vs " + shape_str(p.shape()));
  const std::size_t C = last_dim(p);
  const std::size_t rows = p.numel() / C;
  require(mask.empty() || mask.size() == rows, "kl_div: mask length must equal row count");
  auto mk = std::make_shared<std::vector<std::uint8_t>>(mask.begin(), mask.end());
  if (mk->empty()) mk->assign(rows, 1);
  auto a = p_ref.data();
  auto b = p.data();
  double total = 0.0;
  std::size_t valid = 0;
  for (std::size_t r = 0; r < rows; ++r) {
    if (!(*mk)[r]) continue;
    ++valid;
    double row = 0.0;
    for (std::size_t c = 0; c < C; ++c) {
      const double pr = a[r * C + c];
      if (pr <= 0.0) continue;
      row += pr * (std::log(std::max(pr, kKlFloor)) - std::log(std::max(b[r * C + c], kKlFloor)));
    }
    total += row;
  }
  const double loss = valid ? total / static_cast<double>(valid) : 0.0;
  ImplPtr ai = p_ref.impl(), bi = p.impl();
  return make_result({1}, {loss}, "kl_div", {p_ref, p},
                     [ai, bi, mk, rows, C, valid](std::span<const double> gy) {
                       if (valid == 0) return;
                       double* ga = sink(ai);
                       double* gb = sink(bi);
                       const double s = gy[0] / static_cast<double>(valid);
                       const auto& a = ai->data;
                       const auto& b = bi->data;
                       for (std::size_t r = 0; r < rows; ++r) {
                         if (!(*mk)[r]) continue;
                         for (std::size_t c = 0; c < C; ++c) {
                           const std::size_t i = r * C + c;
                           if (a[i] <= 0.0) continue;
                           if (ga) {
                             const double own = a[i] > kKlFloor ? 1.0 : 0.0;
                             ga[i] += s * (std::log(std::max(a[i], kKlFloor)) + own -
                                           std::log(std::max(b[i], kKlFloor)));
                           }
                           if (gb && b[i] > kKlFloor) gb[i] -= s * a[i] / b[i];
                         }
                       }
                     });
}

Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v, std::size_t heads,
                 std::vector<double>* probs) {
  require(q.rank() == 2 && k.rank() == 2 && v.rank() == 2, "attention: operands must be 2-D");
  const std::size_t N = q.dim(0), M = k.dim(0), C = q.dim(1);
  require(k.dim(1) == C && v.dim(1) == C && v.dim(0) == M, "attention: q/k/v shape mismatch");
  require(heads >= 1 && C % heads == 0, "attention: channels not divisible by heads");
  const std::size_t d = C / heads;
  const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(d));
  auto P = std::make_shared<std::vector<double>>(heads * N * M);
  auto qd = q.data(), kd = k.data(), vd = v.data();
  std::vector<double> out(N * C, 0.0);
  for (std::size_t h = 0; h < heads; ++h) {
    const std::size_t off = h * d;
    for (std::size_t n = 0; n < N; ++n) {
      double* prow = P->data() + (h * N + n) * M;
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t m = 0; m < M; ++m) {
        double s = 0.0;
        for (std::size_t c = 0; c < d; ++c) s += qd[n * C + off + c] * kd[m * C + off + c];
        prow[m] = s * inv_sqrt_d;
        mx = std::max(mx, prow[m]);
      }
      double sum = 0.0;
      for (std::size_t m = 0; m < M; ++m) {
        prow[m] = std::exp(prow[m] - mx);
        sum += prow[m];
      }
      for (std::size_t m = 0; m < M; ++m) prow[m] /= sum;
      double* o = out.data() + n * C + off;
      for (std::size_t m = 0; m < M; ++m) {
        const double pm = prow[m];
        for (std::size_t c = 0; c < d; ++c) o[c] += pm * vd[m * C + off + c];
      }
    }
  }
  if (probs) *probs = *P;
  ImplPtr qi = q.impl(), ki = k.impl(), vi = v.impl();
  return make_result({N, C}, std::move(out), "attention", {q, k, v},
                     [qi, ki, vi, P, N, M, C, d, heads, inv_sqrt_d](std::span<const double> gy) {
                       double* gq = sink(qi);
                       double* gk = sink(ki);
                       double* gv = sink(vi);
                       const auto& qd = qi->data;
                       const auto& kd = ki->data;
                       const auto& vd = vi->data;
                       std::vector<double> dp(M);
                       for (std::size_t h = 0; h < heads; ++h) {
                         const std::size_t off = h * d;
                         for (std::size_t n = 0; n < N; ++n) {
                           const double* prow = P->data() + (h * N + n) * M;
                           const double* go = gy.data() + n * C + off;
                           double dot = 0.0;
                           for (std::size_t m = 0; m < M; ++m) {
                             double s = 0.0;
                             for (std::size_t c = 0; c < d; ++c) s += go[c] * vd[m * C + off + c];
                             dp[m] = s;
                             dot += s * prow[m];
                             if (gv) {
                               for (std::size_t c = 0; c < d; ++c) gv[m * C + off + c] += prow[m] * go[c];
                             }
                           }
                           for (std::size_t m = 0; m < M; ++m) {
                             const double ds = prow[m] * (dp[m] - dot) * inv_sqrt_d;
                             if (gq) {
                               for (std::size_t c = 0; c < d; ++c) gq[n * C + off + c] += ds * kd[m * C + off + c];
                             }
                             if (gk) {
                               for (std::size_t c = 0; c < d; ++c) gk[m * C + off + c] += ds * qd[n * C + off + c];
                             }
                           }
                         }
                       }
                     });
}

Tensor mean(const Tensor& a) {
  double s = 0.0;
  for (double v : a.data()) s += v;
  const double n = static_cast<double>(a.numel());
  ImplPtr ai = a.impl();
  return make_result({1}, {s / n}, "mean", {a}, [ai, n](std::span<const double> gy) {
    if (double* g = sink(ai)) {
      for (std::size_t i = 0; i < ai->data.size(); ++i) g[i] += gy[0] / n;
    }
  });
}

}  // namespace ops
}  // namespace panodeform
