#pragma once

// Differentiable operations. Shapes follow the repo-wide row-major H x W x C
// convention; "rows" below means every axis but the last flattened together.

#include <cstdint>
#include <span>
#include <vector>

#include "panodeform/kernels.hpp"
#include "panodeform/tensor.hpp"

namespace panodeform {

using kernels::Border;

inline constexpr std::int32_t kIgnoreLabel = 255;

namespace ops {

/// [M x K] * [K x N].
Tensor matmul(const Tensor& a, const Tensor& b);

/// x[..., Cin] * w[Cin x Cout] + b[Cout]; `b` may be undefined.
Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b);

Tensor add(const Tensor& a, const Tensor& b);
/// Element-wise sum of equally shaped tensors.
Tensor add_n(const std::vector<Tensor>& terms);
Tensor scale(const Tensor& a, double factor);
Tensor reshape(const Tensor& a, Shape shape);
Tensor gelu(const Tensor& a);

/// Max-subtracted softmax along `axis`.
Tensor softmax(const Tensor& x, std::size_t axis);

/// Normalizes over the last axis, then applies gamma/beta (both [C]).
Tensor layernorm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps = 1e-5);

/// Samples f[H x W x C] at N (row, col) points given as coords[N x 2].
Tensor bilinear_sample(const Tensor& f, const Tensor& coords, Border border);

/// Channel-wise sampling: coords[N x G x 2]; channel c of point n is read at
/// coords[n, c % G]. Returns [N x C].
Tensor bilinear_sample_grouped(const Tensor& f, const Tensor& coords, Border border);

/// im2col with the kernel geometry of kernels::PatchGeometry. Returns
/// [(H/stride)*(W/stride) x k*k*C]; H and W must be divisible by stride.
Tensor extract_patches(const Tensor& f, std::size_t kernel, std::size_t stride, Border border);

/// Bilinear resize of f[H x W x C] with half-pixel centers (align_corners=false).
Tensor upsample_bilinear(const Tensor& f, std::size_t out_height, std::size_t out_width);

/// Hard clamp; gradient 1 on [lo, hi], 0 outside.
Tensor clamp(const Tensor& x, double lo, double hi);

/// Clamps a [..., 2] (row, col) offset tensor to |row| <= bound_row, |col| <= bound_col.
Tensor clamp_offsets(const Tensor& raw, double bound_row, double bound_col);

/// Mean of -log softmax(logits)[label] over rows whose label != ignore.
/// No valid rows gives 0 with zero gradient.
Tensor cross_entropy(const Tensor& logits, std::span<const std::int32_t> labels,
                     std::int32_t ignore_index = kIgnoreLabel);

inline constexpr double kKlFloor = 1e-12;

/// sum_c p_ref * log(p_ref / p) along the last axis, averaged over rows with
/// mask != 0 (all rows when mask is empty). Both arguments are floored at 1e-12
/// inside the logarithm.
Tensor kl_div(const Tensor& p_ref, const Tensor& p, std::span<const std::uint8_t> mask = {});

/// Multi-head scaled dot-product attention. q[N x C], k/v[M x C]; C must be
/// divisible by `heads`. When `probs` is non-null it receives the
/// [heads x N x M] attention maps.
Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v, std::size_t heads,
                 std::vector<double>* probs = nullptr);

/// Mean of all elements, as a [1] tensor.
Tensor mean(const Tensor& a);

}  // namespace ops

/// Test-only fault switches used to prove the gradient checker catches bugs.
namespace fault {
enum class Kind { kNone, kBilinearCoordSign };
void inject(Kind kind);
Kind active();
}  // namespace fault

}  // namespace panodeform
