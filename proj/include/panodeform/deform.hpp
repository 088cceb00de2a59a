#pragma once

// Deformable Patch Embedding and Deformable MLP, together with the fixed
// patch embedding and per-token MLP they reduce to when offsets are zero.

#include <random>
#include <string>

#include "panodeform/ops.hpp"
#include "panodeform/params.hpp"

namespace panodeform::deform {

struct LinearParams {
  Tensor weight;  // [in x out]
  Tensor bias;    // [out], may be undefined
};

/// Registers a linear layer `<prefix>.w` / `<prefix>.b`.
LinearParams make_linear(ParamStore& store, const std::string& prefix, std::size_t in,
                         std::size_t out, Init weight_init, std::mt19937_64& rng);

/// Learned displacement map. `offsets` is [H' x W' x G x 2] holding (row, col)
/// pixel displacements; every entry satisfies |row| <= bound_row and
/// |col| <= bound_col where bounds are the source map extents divided by r.
struct OffsetField {
  Tensor offsets;
  double bound_row = 0.0;
  double bound_col = 0.0;
  double r = 4.0;
};

struct PatchEmbedConfig {
  std::size_t patch_size = 3;
  std::size_t stride = 1;
  std::size_t in_channels = 3;
  std::size_t out_channels = 16;
  bool deformable = true;
  double r = 4.0;
  Border border = Border::kClamp;
};

void validate(const PatchEmbedConfig& cfg);

/// Forward value and subgradient of a hard clamp.
struct ClampValue {
  double value;
  double grad;
};
ClampValue clamp_grad_semantics(double x, double lo, double hi);

/// Fixed sampling positions of every patch: [(H/stride)*(W/stride) x s*s x 2].
/// Patch (i, j) tap (a, b) reads row i*stride + floor(stride/2) + a - floor(s/2).
Tensor patch_grid(std::size_t height, std::size_t width, std::size_t patch_size,
                  std::size_t stride);

/// Fixed patch embedding: gather every s x s patch, flatten (s*s*C_in) and project.
Tensor standard_pe(const Tensor& f, const PatchEmbedConfig& cfg, const LinearParams& proj);

/// Offset prediction g(f): a 3x3 convolution evaluated on the output grid of
/// `stride`, emitting 2*groups raw values per position, then clamped to
/// +-H/r rows and +-W/r columns.
OffsetField predict_offsets(const Tensor& f, const LinearParams& g, std::size_t groups,
                            std::size_t stride, double r, Border border);

/// Deformable patch embedding: each of the s*s taps of a patch is displaced by
/// its own learned offset and read with bilinear interpolation.
Tensor dpe(const Tensor& f, const PatchEmbedConfig& cfg, const LinearParams& proj,
           const LinearParams& g, OffsetField* field = nullptr);

/// Per-token fully connected projection, z[N x C_in] -> [N x C_out].
Tensor vanilla_mlp_mix(const Tensor& z, const LinearParams& w);

/// Number of offset groups for a DMLP over `channels` channels.
std::size_t dmlp_groups(std::size_t channels, std::size_t max_groups);

/// Deformable MLP on f[H x W x C_in]: channel c at position k is gathered at
/// k + offset(k, c mod G), then the gathered C_in vector is projected by `w`.
Tensor dmlp_mix(const Tensor& f, const LinearParams& g, const LinearParams& w, double r,
                std::size_t max_groups, Border border, OffsetField* field = nullptr);

/// Patch embedding layer owning its parameters; `deformable=false` gives the
/// standard embedding.
class PatchEmbed {
 public:
  PatchEmbed() = default;
  PatchEmbed(ParamStore& store, const std::string& prefix, const PatchEmbedConfig& cfg,
             std::mt19937_64& rng);

  Tensor forward(const Tensor& f, OffsetField* field = nullptr) const;
  const PatchEmbedConfig& config() const { return cfg_; }
  const LinearParams& projection() const { return proj_; }
  const LinearParams& offset_predictor() const { return offsets_; }

 private:
  PatchEmbedConfig cfg_;
  LinearParams proj_;
  LinearParams offsets_;
};

/// Token-mixing layer; `deformable=false` gives the vanilla per-token MLP.
class DeformableMlp {
 public:
  DeformableMlp() = default;
  DeformableMlp(ParamStore& store, const std::string& prefix, std::size_t in_channels,
                std::size_t out_channels, bool deformable, double r, std::size_t max_groups,
                Border border, std::mt19937_64& rng);

  /// f[H x W x C_in] -> [H x W x C_out].
  Tensor forward(const Tensor& f, OffsetField* field = nullptr) const;
  bool deformable() const { return deformable_; }
  const LinearParams& fc() const { return fc_; }
  const LinearParams& offset_predictor() const { return offsets_; }

 private:
  bool deformable_ = true;
  double r_ = 4.0;
  std::size_t max_groups_ = 64;
  Border border_ = Border::kClamp;
  LinearParams fc_;
  LinearParams offsets_;
};

}  // namespace panodeform::deform
