#include "panodeform/deform.hpp"

#include <algorithm>

namespace panodeform::deform {

LinearParams make_linear(ParamStore& store, const std::string& prefix, std::size_t in,
                         std::size_t out, Init weight_init, std::mt19937_64& rng) {
  return {store.add(prefix + ".w", {in, out}, weight_init, rng),
          store.add(prefix + ".b", {out}, Init::kZeros, rng)};
}

void validate(const PatchEmbedConfig& cfg) {
  if (cfg.patch_size < 1) throw std::invalid_argument("patch size must be >= 1");
  if (cfg.stride < 1) throw std::invalid_argument("stride must be >= 1");
  if (!(cfg.r > 0)) throw std::invalid_argument("offset restriction r must be > 0");
}

ClampValue clamp_grad_semantics(double x, double lo, double hi) {
  if (!(lo < hi)) throw std::invalid_argument("clamp: lo must be below hi");
  if (x < lo) return {lo, 0.0};
  if (x > hi) return {hi, 0.0};
  return {x, 1.0};
}

Tensor patch_grid(std::size_t height, std::size_t width, std::size_t patch_size,
                  std::size_t stride) {
  const std::size_t oh = height / stride, ow = width / stride, taps = patch_size * patch_size;
  const auto half = static_cast<double>(patch_size / 2);
  const auto anchor = static_cast<double>(stride / 2);
  std::vector<double> grid(oh * ow * taps * 2);
  std::size_t idx = 0;
  for (std::size_t i = 0; i < oh; ++i) {
    for (std::size_t j = 0; j < ow; ++j) {
      for (std::size_t a = 0; a < patch_size; ++a) {
        for (std::size_t b = 0; b < patch_size; ++b) {
          grid[idx++] = static_cast<double>(i * stride) + anchor + static_cast<double>(a) - half;
          grid[idx++] = static_cast<double>(j * stride) + anchor + static_cast<double>(b) - half;
        }
      }
    }
  }
  return Tensor::from({oh * ow, taps, 2}, std::move(grid));
}

namespace {

void check_map(const Tensor& f, std::size_t channels, std::size_t stride, const char* op) {
  if (f.rank() != 3) throw DimensionError(std::string(op) + ": expected H x W x C input");
  if (f.dim(2) != channels) {
    throw DimensionError(std::string(op) + ": expected " + std::to_string(channels) +
                         " channels, got " + shape_str(f.shape()));
  }
  if (f.dim(0) % stride != 0 || f.dim(1) % stride != 0) {
    throw DimensionError(std::string(op) + ": " + shape_str(f.shape()) +
                         " not divisible by stride " + std::to_string(stride));
  }
}

}  // namespace

Tensor standard_pe(const Tensor& f, const PatchEmbedConfig& cfg, const LinearParams& proj) {
  validate(cfg);
  check_map(f, cfg.in_channels, cfg.stride, "standard_pe");
  const std::size_t oh = f.dim(0) / cfg.stride, ow = f.dim(1) / cfg.stride;
  Tensor patches = ops::extract_patches(f, cfg.patch_size, cfg.stride, cfg.border);
  Tensor z = ops::linear(patches, proj.weight, proj.bias);
  return ops::reshape(z, {oh, ow, cfg.out_channels});
}

OffsetField predict_offsets(const Tensor& f, const LinearParams& g, std::size_t groups,
                            std::size_t stride, double r, Border border) {
  if (!(r > 0)) throw std::invalid_argument("offset restriction r must be > 0");
  if (f.rank() != 3) throw DimensionError("predict_offsets: expected H x W x C input");
  const std::size_t oh = f.dim(0) / stride, ow = f.dim(1) / stride;
  Tensor cols = ops::extract_patches(f, 3, stride, border);
  Tensor raw = ops::linear(cols, g.weight, g.bias);
  if (raw.dim(1) != 2 * groups) {
    throw DimensionError("predict_offsets: predictor emits " + std::to_string(raw.dim(1)) +
                         " values, expected " + std::to_string(2 * groups));
  }
  OffsetField field;
  field.r = r;
  field.bound_row = static_cast<double>(f.dim(0)) / r;
  field.bound_col = static_cast<double>(f.dim(1)) / r;
  field.offsets = ops::clamp_offsets(ops::reshape(raw, {oh, ow, groups, 2}), field.bound_row,
                                     field.bound_col);
  return field;
}

Tensor dpe(const Tensor& f, const PatchEmbedConfig& cfg, const LinearParams& proj,
           const LinearParams& g, OffsetField* field) {
  validate(cfg);
  check_map(f, cfg.in_channels, cfg.stride, "dpe");
  const std::size_t oh = f.dim(0) / cfg.stride, ow = f.dim(1) / cfg.stride;
  const std::size_t taps = cfg.patch_size * cfg.patch_size;
  OffsetField predicted = predict_offsets(f, g, taps, cfg.stride, cfg.r, cfg.border);
  Tensor grid = patch_grid(f.dim(0), f.dim(1), cfg.patch_size, cfg.stride);
  Tensor coords = ops::add(grid, ops::reshape(predicted.offsets, grid.shape()));
  Tensor sampled = ops::bilinear_sample(f, ops::reshape(coords, {oh * ow * taps, 2}), cfg.border);
  Tensor z = ops::linear(ops::reshape(sampled, {oh * ow, taps * cfg.in_channels}), proj.weight,
                         proj.bias);
  if (field) *field = predicted;
  return ops::reshape(z, {oh, ow, cfg.out_channels});
}

Tensor vanilla_mlp_mix(const Tensor& z, const LinearParams& w) {
  if (z.rank() != 2 || z.dim(1) != w.weight.dim(0)) {
    throw DimensionError("vanilla_mlp_mix: tokens " + shape_str(z.shape()) + " vs weight " +
                         shape_str(w.weight.shape()));
  }
  return ops::linear(z, w.weight, w.bias);
}

std::size_t dmlp_groups(std::size_t channels, std::size_t max_groups) {
  return std::max<std::size_t>(1, std::min(channels, max_groups));
}

Tensor dmlp_mix(const Tensor& f, const LinearParams& g, const LinearParams& w, double r,
                std::size_t max_groups, Border border, OffsetField* field) {
  if (f.rank() != 3) throw DimensionError("dmlp_mix: expected H x W x C input");
  const std::size_t H = f.dim(0), W = f.dim(1), C = f.dim(2);
  const std::size_t groups = dmlp_groups(C, max_groups);
  OffsetField predicted = predict_offsets(f, g, groups, 1, r, border);
  // Every group of position k starts at k itself.
  std::vector<double> base(H * W * groups * 2);
  for (std::size_t i = 0; i < H; ++i) {
    for (std::size_t j = 0; j < W; ++j) {
      for (std::size_t q = 0; q < groups; ++q) {
        const std::size_t o = ((i * W + j) * groups + q) * 2;
        base[o] = static_cast<double>(i);
        base[o + 1] = static_cast<double>(j);
      }
    }
  }
  Tensor grid = Tensor::from({H * W, groups, 2}, std::move(base));
  Tensor coords = ops::add(grid, ops::reshape(predicted.offsets, grid.shape()));
  Tensor gathered = ops::bilinear_sample_grouped(f, coords, border);
  Tensor z = vanilla_mlp_mix(gathered, w);
  if (field) *field = predicted;
  return ops::reshape(z, {H, W, w.weight.dim(1)});
}

PatchEmbed::PatchEmbed(ParamStore& store, const std::string& prefix, const PatchEmbedConfig& cfg,
                       std::mt19937_64& rng)
    : cfg_(cfg) {
  validate(cfg);
  const std::size_t taps = cfg.patch_size * cfg.patch_size;
  proj_ = make_linear(store, prefix + ".proj", taps * cfg.in_channels, cfg.out_channels,
                      Init::kTruncNormal, rng);
  if (cfg.deformable) {
    offsets_ = make_linear(store, prefix + ".offset", 9 * cfg.in_channels, 2 * taps, Init::kZeros, rng);
  }
}

Tensor PatchEmbed::forward(const Tensor& f, OffsetField* field) const {
  if (cfg_.deformable) return dpe(f, cfg_, proj_, offsets_, field);
  return standard_pe(f, cfg_, proj_);
}

DeformableMlp::DeformableMlp(ParamStore& store, const std::string& prefix, std::size_t in_channels,
                             std::size_t out_channels, bool deformable, double r,
                             std::size_t max_groups, Border border, std::mt19937_64& rng)
    : deformable_(deformable), r_(r), max_groups_(max_groups), border_(border) {
  fc_ = make_linear(store, prefix + ".fc", in_channels, out_channels, Init::kTruncNormal, rng);
  if (deformable) {
    const std::size_t groups = dmlp_groups(in_channels, max_groups);
    offsets_ = make_linear(store, prefix + ".offset", 9 * in_channels, 2 * groups, Init::kZeros, rng);
  }
}

Tensor DeformableMlp::forward(const Tensor& f, OffsetField* field) const {
  if (deformable_) return dmlp_mix(f, offsets_, fc_, r_, max_groups_, border_, field);
  if (f.rank() != 3) throw DimensionError("mlp: expected H x W x C input");
  Tensor z = ops::reshape(f, {f.dim(0) * f.dim(1), f.dim(2)});
  return ops::reshape(vanilla_mlp_mix(z, fc_), {f.dim(0), f.dim(1), fc_.weight.dim(1)});
}

}  // namespace panodeform::deform
