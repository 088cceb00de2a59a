#pragma once

// Raw inner loops behind the differentiable ops. Every kernel exists twice:
// `serial::` is the plain reference kept for testing and benchmarking, and
// `parallel::` is the OpenMP version used by the ops. Parallel kernels split
// work only over independent outputs and keep each output's accumulation
// order identical to the serial loop, so both produce bit-identical results
// for any thread count.

#include <cstddef>
#include <span>

namespace panodeform::kernels {

enum class Border {
  kClamp,           // replicate the edge in both directions
  kWrapHorizontal,  // wrap columns (360 deg continuity), clamp rows
};

/// Geometry of a row-major H x W x C map.
struct MapDims {
  std::size_t height;
  std::size_t width;
  std::size_t channels;
};

/// Patch extraction geometry. Output cell (i, j) reads input pixel
/// (i*stride + floor(stride/2) + a - floor(kernel/2), ...) for a, b in [0, kernel).
struct PatchGeometry {
  std::size_t kernel;
  std::size_t stride;
  std::size_t out_height;
  std::size_t out_width;
};

/// Four-corner bilinear stencil for one sampling point.
struct BilinearStencil {
  std::size_t idx[4];  // flattened pixel indices (y*W + x) of the corners
  double w[4];         // interpolation weights
  double dw_dy[4];     // d weight / d y
  double dw_dx[4];     // d weight / d x
};

BilinearStencil bilinear_stencil(double y, double x, std::size_t height, std::size_t width,
                                 Border border);

/// Number of threads the parallel kernels use (PANO_DEFORM_THREADS caps it).
int num_threads();
void set_num_threads(int n);

#define PANO_KERNEL_DECLS                                                                     \
  /* out[N x Cout] = x[N x Cin] * w[Cin x Cout] (+ b) */                                     \
  void linear_forward(std::span<const double> x, std::span<const double> w,                  \
                      std::span<const double> b, std::span<double> out, std::size_t rows,     \
                      std::size_t in_dim, std::size_t out_dim);                               \
  /* gx[N x Cin] += gy[N x Cout] * w^T */                                                     \
  void linear_backward_input(std::span<const double> gy, std::span<const double> w,          \
                             std::span<double> gx, std::size_t rows, std::size_t in_dim,      \
                             std::size_t out_dim);                                            \
  /* gw[Cin x Cout] += x^T * gy ; gb[Cout] += colsum(gy) when gb is non-empty */              \
  void linear_backward_weight(std::span<const double> x, std::span<const double> gy,         \
                              std::span<double> gw, std::span<double> gb, std::size_t rows,   \
                              std::size_t in_dim, std::size_t out_dim);                       \
  /* out[N x C]: channel c of point n is read at coords[n, c % G]. coords is [N x G x 2] */  \
  void sample_forward(std::span<const double> map, MapDims dims, std::span<const double> coords, \
                      std::size_t points, std::size_t groups, Border border,                  \
                      std::span<double> out);                                                 \
  /* Accumulates into gmap ([H x W x C]) and/or gcoords ([N x G x 2]); either may be empty. */ \
  void sample_backward(std::span<const double> map, MapDims dims,                             \
                       std::span<const double> coords, std::size_t points, std::size_t groups, \
                       Border border, std::span<const double> gout, std::span<double> gmap,   \
                       std::span<double> gcoords);                                            \
  /* out[(oh*ow) x (k*k*C)] */                                                                \
  void patches_forward(std::span<const double> map, MapDims dims, PatchGeometry geom,         \
                       Border border, std::span<double> out);                                 \
  void patches_backward(std::span<const double> gout, MapDims dims, PatchGeometry geom,      \
                        Border border, std::span<double> gmap);

namespace serial {
PANO_KERNEL_DECLS
}  // namespace serial

namespace parallel {
PANO_KERNEL_DECLS
}  // namespace parallel

#undef PANO_KERNEL_DECLS

}  // namespace panodeform::kernels
