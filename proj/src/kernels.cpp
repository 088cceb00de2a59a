#include "panodeform/kernels.hpp"

#include <omp.h>

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdlib>
#include <vector>

namespace panodeform::kernels {

namespace {

std::atomic<int> g_threads{0};

int default_threads() {
  int n = omp_get_max_threads();
  if (const char* env = std::getenv("PANO_DEFORM_THREADS")) {
    const int cap = std::atoi(env);
    if (cap > 0) n = std::min(n, cap);
  }
  return std::max(n, 1);
}

std::size_t resolve_row(std::ptrdiff_t y, std::size_t height) {
  return static_cast<std::size_t>(std::clamp<std::ptrdiff_t>(y, 0, static_cast<std::ptrdiff_t>(height) - 1));
}

std::size_t resolve_col(std::ptrdiff_t x, std::size_t width, Border border) {
  const auto w = static_cast<std::ptrdiff_t>(width);
  if (border == Border::kWrapHorizontal) return static_cast<std::size_t>(((x % w) + w) % w);
  return static_cast<std::size_t>(std::clamp<std::ptrdiff_t>(x, 0, w - 1));
}

// Source pixel for kernel tap (a, b) of output cell (i, j).
std::size_t patch_source(std::size_t i, std::size_t j, std::size_t a, std::size_t b,
                         const MapDims& dims, const PatchGeometry& g, Border border) {
  const auto half = static_cast<std::ptrdiff_t>(g.kernel / 2);
  const auto anchor = static_cast<std::ptrdiff_t>(g.stride / 2);
  const auto y = static_cast<std::ptrdiff_t>(i * g.stride) + anchor + static_cast<std::ptrdiff_t>(a) - half;
  const auto x = static_cast<std::ptrdiff_t>(j * g.stride) + anchor + static_cast<std::ptrdiff_t>(b) - half;
  return resolve_row(y, dims.height) * dims.width + resolve_col(x, dims.width, border);
}

struct AxisInterp {
  std::size_t lo, hi;
  double t;     // fraction toward hi
  double gate;  // d(clamped coord)/d(coord)
};

AxisInterp clamp_axis(double v, std::size_t extent) {
  if (extent == 1) return {0, 0, 0.0, 0.0};
  const double top = static_cast<double>(extent - 1);
  const double gate = (v >= 0.0 && v <= top) ? 1.0 : 0.0;
  const double c = std::clamp(v, 0.0, top);
  auto lo = static_cast<std::size_t>(std::floor(c));
  if (lo >= extent - 1) lo = extent - 2;
  return {lo, lo + 1, c - static_cast<double>(lo), gate};
}

AxisInterp wrap_axis(double v, std::size_t extent) {
  const double e = static_cast<double>(extent);
  double w = v - e * std::floor(v / e);
  if (w >= e) w = 0.0;  // guards rounding of tiny negative inputs
  auto lo = static_cast<std::size_t>(std::floor(w));
  if (lo >= extent) lo = extent - 1;
  return {lo, (lo + 1) % extent, w - static_cast<double>(lo), 1.0};
}

}  // namespace

int num_threads() {
  int n = g_threads.load();
  if (n == 0) {
    n = default_threads();
    g_threads.store(n);
  }
  return n;
}

void set_num_threads(int n) { g_threads.store(std::max(n, 1)); }

BilinearStencil bilinear_stencil(double y, double x, std::size_t height, std::size_t width,
                                 Border border) {
  const AxisInterp ry = clamp_axis(y, height);
  const AxisInterp rx = border == Border::kWrapHorizontal ? wrap_axis(x, width) : clamp_axis(x, width);
  BilinearStencil s{};
  s.idx[0] = ry.lo * width + rx.lo;
  s.idx[1] = ry.lo * width + rx.hi;
  s.idx[2] = ry.hi * width + rx.lo;
  s.idx[3] = ry.hi * width + rx.hi;
  const double ty = ry.t, tx = rx.t;
  s.w[0] = (1.0 - ty) * (1.0 - tx);
  s.w[1] = (1.0 - ty) * tx;
  s.w[2] = ty * (1.0 - tx);
  s.w[3] = ty * tx;
  s.dw_dy[0] = -(1.0 - tx) * ry.gate;
  s.dw_dy[1] = -tx * ry.gate;
  s.dw_dy[2] = (1.0 - tx) * ry.gate;
  s.dw_dy[3] = tx * ry.gate;
  s.dw_dx[0] = -(1.0 - ty) * rx.gate;
  s.dw_dx[1] = (1.0 - ty) * rx.gate;
  s.dw_dx[2] = -ty * rx.gate;
  s.dw_dx[3] = ty * rx.gate;
  return s;
}

// ---------------------------------------------------------------------------
// serial reference

namespace serial {

void linear_forward(std::span<const double> x, std::span<const double> w,
                    std::span<const double> b, std::span<double> out, std::size_t rows,
                    std::size_t in_dim, std::size_t out_dim) {
  for (std::size_t n = 0; n < rows; ++n) {
    double* o = out.data() + n * out_dim;
    for (std::size_t j = 0; j < out_dim; ++j) o[j] = b.empty() ? 0.0 : b[j];
    for (std::size_t k = 0; k < in_dim; ++k) {
      const double xv = x[n * in_dim + k];
      const double* wr = w.data() + k * out_dim;
      for (std::size_t j = 0; j < out_dim; ++j) o[j] += xv * wr[j];
    }
  }
}

void linear_backward_input(std::span<const double> gy, std::span<const double> w,
                           std::span<double> gx, std::size_t rows, std::size_t in_dim,
                           std::size_t out_dim) {
  for (std::size_t n = 0; n < rows; ++n) {
    const double* g = gy.data() + n * out_dim;
    for (std::size_t k = 0; k < in_dim; ++k) {
      const double* wr = w.data() + k * out_dim;
      double acc = 0.0;
      for (std::size_t j = 0; j < out_dim; ++j) acc += g[j] * wr[j];
      gx[n * in_dim + k] += acc;
    }
  }
}

void linear_backward_weight(std::span<const double> x, std::span<const double> gy,
                            std::span<double> gw, std::span<double> gb, std::size_t rows,
                            std::size_t in_dim, std::size_t out_dim) {
  for (std::size_t n = 0; n < rows; ++n) {
    const double* g = gy.data() + n * out_dim;
    for (std::size_t k = 0; k < in_dim; ++k) {
      const double xv = x[n * in_dim + k];
      double* gr = gw.data() + k * out_dim;
      for (std::size_t j = 0; j < out_dim; ++j) gr[j] += xv * g[j];
    }
    if (!gb.empty()) {
      for (std::size_t j = 0; j < out_dim; ++j) gb[j] += g[j];
    }
  }
}

void sample_forward(std::span<const double> map, MapDims dims, std::span<const double> coords,
                    std::size_t points, std::size_t groups, Border border,
                    std::span<double> out) {
  const std::size_t C = dims.channels;
  for (std::size_t n = 0; n < points; ++n) {
    for (std::size_t g = 0; g < groups; ++g) {
      const double* cp = coords.data() + (n * groups + g) * 2;
      const auto s = bilinear_stencil(cp[0], cp[1], dims.height, dims.width, border);
      for (std::size_t c = g; c < C; c += groups) {
        double acc = 0.0;
        for (int q = 0; q < 4; ++q) acc += s.w[q] * map[s.idx[q] * C + c];
        out[n * C + c] = acc;
      }
    }
  }
}

void sample_backward(std::span<const double> map, MapDims dims, std::span<const double> coords,
                     std::size_t points, std::size_t groups, Border border,
                     std::span<const double> gout, std::span<double> gmap,
                     std::span<double> gcoords) {
  const std::size_t C = dims.channels;
  for (std::size_t n = 0; n < points; ++n) {
    for (std::size_t g = 0; g < groups; ++g) {
      const double* cp = coords.data() + (n * groups + g) * 2;
      const auto s = bilinear_stencil(cp[0], cp[1], dims.height, dims.width, border);
      double gy = 0.0, gx = 0.0;
      for (std::size_t c = g; c < C; c += groups) {
        const double go = gout[n * C + c];
        for (int q = 0; q < 4; ++q) {
          const double v = map[s.idx[q] * C + c];
          if (!gmap.empty()) gmap[s.idx[q] * C + c] += s.w[q] * go;
          gy += s.dw_dy[q] * v * go;
          gx += s.dw_dx[q] * v * go;
        }
      }
      if (!gcoords.empty()) {
        gcoords[(n * groups + g) * 2] += gy;
        gcoords[(n * groups + g) * 2 + 1] += gx;
      }
    }
  }
}

void patches_forward(std::span<const double> map, MapDims dims, PatchGeometry geom,
                     Border border, std::span<double> out) {
  const std::size_t C = dims.channels;
  const std::size_t row_len = geom.kernel * geom.kernel * C;
  for (std::size_t i = 0; i < geom.out_height; ++i) {
    for (std::size_t j = 0; j < geom.out_width; ++j) {
      double* o = out.data() + (i * geom.out_width + j) * row_len;
      for (std::size_t a = 0; a < geom.kernel; ++a) {
        for (std::size_t b = 0; b < geom.kernel; ++b) {
          const std::size_t src = patch_source(i, j, a, b, dims, geom, border);
          for (std::size_t c = 0; c < C; ++c) o[(a * geom.kernel + b) * C + c] = map[src * C + c];
        }
      }
    }
  }
}

void patches_backward(std::span<const double> gout, MapDims dims, PatchGeometry geom,
                      Border border, std::span<double> gmap) {
  const std::size_t C = dims.channels;
  const std::size_t row_len = geom.kernel * geom.kernel * C;
  for (std::size_t i = 0; i < geom.out_height; ++i) {
    for (std::size_t j = 0; j < geom.out_width; ++j) {
      const double* g = gout.data() + (i * geom.out_width + j) * row_len;
      for (std::size_t a = 0; a < geom.kernel; ++a) {
        for (std::size_t b = 0; b < geom.kernel; ++b) {
          const std::size_t src = patch_source(i, j, a, b, dims, geom, border);
          for (std::size_t c = 0; c < C; ++c) gmap[src * C + c] += g[(a * geom.kernel + b) * C + c];
        }
      }
    }
  }
}

}  // namespace serial

// ---------------------------------------------------------------------------
// OpenMP

namespace parallel {

void linear_forward(std::span<const double> x, std::span<const double> w,
                    std::span<const double> b, std::span<double> out, std::size_t rows,
                    std::size_t in_dim, std::size_t out_dim) {
  const auto n_rows = static_cast<std::ptrdiff_t>(rows);
#pragma omp parallel for num_threads(num_threads()) schedule(static)
  for (std::ptrdiff_t n = 0; n < n_rows; ++n) {
    double* o = out.data() + n * out_dim;
    for (std::size_t j = 0; j < out_dim; ++j) o[j] = b.empty() ? 0.0 : b[j];
    for (std::size_t k = 0; k < in_dim; ++k) {
      const double xv = x[n * in_dim + k];
      const double* wr = w.data() + k * out_dim;
      for (std::size_t j = 0; j < out_dim; ++j) o[j] += xv * wr[j];
    }
  }
}

void linear_backward_input(std::span<const double> gy, std::span<const double> w,
                           std::span<double> gx, std::size_t rows, std::size_t in_dim,
                           std::size_t out_dim) {
  const auto n_rows = static_cast<std::ptrdiff_t>(rows);
#pragma omp parallel for num_threads(num_threads()) schedule(static)
  for (std::ptrdiff_t n = 0; n < n_rows; ++n) {
    const double* g = gy.data() + n * out_dim;
    for (std::size_t k = 0; k < in_dim; ++k) {
      const double* wr = w.data() + k * out_dim;
      double acc = 0.0;
      for (std::size_t j = 0; j < out_dim; ++j) acc += g[j] * wr[j];
      gx[n * in_dim + k] += acc;
    }
  }
}

void linear_backward_weight(std::span<const double> x, std::span<const double> gy,
                            std::span<double> gw, std::span<double> gb, std::size_t rows,
                            std::size_t in_dim, std::size_t out_dim) {
  // Each thread owns whole rows of gw; rows of x are visited in order.
  const auto n_in = static_cast<std::ptrdiff_t>(in_dim);
#pragma omp parallel num_threads(num_threads())
  {
#pragma omp for schedule(static)
    for (std::ptrdiff_t k = 0; k < n_in; ++k) {
      double* gr = gw.data() + k * out_dim;
      for (std::size_t n = 0; n < rows; ++n) {
        const double xv = x[n * in_dim + k];
        const double* g = gy.data() + n * out_dim;
        for (std::size_t j = 0; j < out_dim; ++j) gr[j] += xv * g[j];
      }
    }
#pragma omp single
    if (!gb.empty()) {
      for (std::size_t n = 0; n < rows; ++n) {
        const double* g = gy.data() + n * out_dim;
        for (std::size_t j = 0; j < out_dim; ++j) gb[j] += g[j];
      }
    }
  }
}

void sample_forward(std::span<const double> map, MapDims dims, std::span<const double> coords,
                    std::size_t points, std::size_t groups, Border border,
                    std::span<double> out) {
  const std::size_t C = dims.channels;
  const auto n_points = static_cast<std::ptrdiff_t>(points);
#pragma omp parallel for num_threads(num_threads()) schedule(static)
  for (std::ptrdiff_t n = 0; n < n_points; ++n) {
    for (std::size_t g = 0; g < groups; ++g) {
      const double* cp = coords.data() + (n * groups + g) * 2;
      const auto s = bilinear_stencil(cp[0], cp[1], dims.height, dims.width, border);
      for (std::size_t c = g; c < C; c += groups) {
        double acc = 0.0;
        for (int q = 0; q < 4; ++q) acc += s.w[q] * map[s.idx[q] * C + c];
        out[n * C + c] = acc;
      }
    }
  }
}

void sample_backward(std::span<const double> map, MapDims dims, std::span<const double> coords,
                     std::size_t points, std::size_t groups, Border border,
                     std::span<const double> gout, std::span<double> gmap,
                     std::span<double> gcoords) {
  const std::size_t C = dims.channels;
  const std::size_t n_stencils = points * groups;
  std::vector<BilinearStencil> stencils(n_stencils);
  const auto n_st = static_cast<std::ptrdiff_t>(n_stencils);
#pragma omp parallel num_threads(num_threads())
  {
#pragma omp for schedule(static)
    for (std::ptrdiff_t s = 0; s < n_st; ++s) {
      stencils[s] = bilinear_stencil(coords[2 * s], coords[2 * s + 1], dims.height, dims.width, border);
    }
    if (!gcoords.empty()) {
#pragma omp for schedule(static)
      for (std::ptrdiff_t s = 0; s < n_st; ++s) {
        const std::size_t n = static_cast<std::size_t>(s) / groups;
        const std::size_t g = static_cast<std::size_t>(s) % groups;
        const auto& st = stencils[s];
        double gy = 0.0, gx = 0.0;
        for (std::size_t c = g; c < C; c += groups) {
          const double go = gout[n * C + c];
          for (int q = 0; q < 4; ++q) {
            const double v = map[st.idx[q] * C + c];
            gy += st.dw_dy[q] * v * go;
            gx += st.dw_dx[q] * v * go;
          }
        }
        gcoords[2 * s] += gy;
        gcoords[2 * s + 1] += gx;
      }
    }
    if (!gmap.empty()) {
      // Channels are disjoint across threads; points are scattered in order.
      const auto n_ch = static_cast<std::ptrdiff_t>(C);
#pragma omp for schedule(static)
      for (std::ptrdiff_t c = 0; c < n_ch; ++c) {
        const std::size_t g = static_cast<std::size_t>(c) % groups;
        for (std::size_t n = 0; n < points; ++n) {
          const auto& st = stencils[n * groups + g];
          const double go = gout[n * C + c];
          for (int q = 0; q < 4; ++q) gmap[st.idx[q] * C + c] += st.w[q] * go;
        }
      }
    }
  }
}

void patches_forward(std::span<const double> map, MapDims dims, PatchGeometry geom,
                     Border border, std::span<double> out) {
  const std::size_t C = dims.channels;
  const std::size_t row_len = geom.kernel * geom.kernel * C;
  const auto cells = static_cast<std::ptrdiff_t>(geom.out_height * geom.out_width);
#pragma omp parallel for num_threads(num_threads()) schedule(static)
  for (std::ptrdiff_t cell = 0; cell < cells; ++cell) {
    const std::size_t i = static_cast<std::size_t>(cell) / geom.out_width;
    const std::size_t j = static_cast<std::size_t>(cell) % geom.out_width;
    double* o = out.data() + cell * row_len;
    for (std::size_t a = 0; a < geom.kernel; ++a) {
      for (std::size_t b = 0; b < geom.kernel; ++b) {
        const std::size_t src = patch_source(i, j, a, b, dims, geom, border);
        for (std::size_t c = 0; c < C; ++c) o[(a * geom.kernel + b) * C + c] = map[src * C + c];
      }
    }
  }
}

void patches_backward(std::span<const double> gout, MapDims dims, PatchGeometry geom,
                      Border border, std::span<double> gmap) {
  const std::size_t C = dims.channels;
  const std::size_t row_len = geom.kernel * geom.kernel * C;
  const auto n_ch = static_cast<std::ptrdiff_t>(C);
#pragma omp parallel for num_threads(num_threads()) schedule(static)
  for (std::ptrdiff_t c = 0; c < n_ch; ++c) {
    for (std::size_t i = 0; i < geom.out_height; ++i) {
      for (std::size_t j = 0; j < geom.out_width; ++j) {
        const double* g = gout.data() + (i * geom.out_width + j) * row_len;
        for (std::size_t a = 0; a < geom.kernel; ++a) {
          for (std::size_t b = 0; b < geom.kernel; ++b) {
            const std::size_t src = patch_source(i, j, a, b, dims, geom, border);
            gmap[src * C + c] += g[(a * geom.kernel + b) * C + c];
          }
        }
      }
    }
  }
}

}  // namespace parallel

}  // namespace panodeform::kernels
