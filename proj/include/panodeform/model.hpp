#pragma once

// Four-stage pyramid transformer encoder with deformable patch embeddings and
// the DPE + DMLP + MLP decoder that fuses all stages at quarter resolution.

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "panodeform/deform.hpp"
#include "panodeform/params.hpp"

namespace panodeform::model {

enum class DecoderKind {
  kDeformable,  // DMLP token mixing
  kVanilla,     // per-token MLP (ablation baseline)
};

struct ModelConfig {
  std::array<std::size_t, 4> strides{4, 8, 16, 32};
  std::array<std::size_t, 4> channels{16, 32, 48, 64};
  std::array<std::size_t, 4> depths{1, 1, 1, 1};
  std::array<std::size_t, 4> heads{1, 2, 3, 4};
  std::array<std::size_t, 4> reduction{8, 4, 2, 1};
  std::array<std::size_t, 4> patch_sizes{7, 3, 3, 3};
  std::size_t mlp_ratio = 4;
  std::size_t embed_dim = 32;
  std::size_t num_classes = 5;
  std::size_t in_channels = 3;
  double r = 4.0;
  std::size_t dmlp_max_groups = 64;
  bool deformable_encoder = true;
  bool deformable_decoder_pe = true;
  DecoderKind decoder = DecoderKind::kDeformable;
  Border border = Border::kClamp;

  static ModelConfig nano(std::size_t num_classes = 5);
  /// Channel/depth schedule of the full-size tiny model (shape tests only).
  static ModelConfig reference_tiny(std::size_t num_classes = 19);

  /// Throws std::invalid_argument on a malformed configuration.
  void validate() const;
  /// Patch-embedding stride of stage `l` relative to its input.
  std::size_t stage_stride(std::size_t l) const { return l == 0 ? strides[0] : strides[l] / strides[l - 1]; }
};

using FeaturePyramid = std::array<Tensor, 4>;

struct LayerNormParams {
  Tensor gamma;
  Tensor beta;
};

struct MlpParams {
  deform::LinearParams fc1;
  deform::LinearParams fc2;
};

struct AttentionParams {
  deform::LinearParams q, k, v, proj;
  deform::LinearParams sr;  // defined when the reduction ratio is > 1
  LayerNormParams sr_norm;
  std::size_t heads = 1;
  std::size_t reduction = 1;
};

struct EncoderBlock {
  LayerNormParams ln1;
  AttentionParams attn;
  LayerNormParams ln2;
  MlpParams mlp;
};

struct EncoderStage {
  deform::PatchEmbed embed;
  LayerNormParams embed_norm;
  std::vector<EncoderBlock> blocks;
  LayerNormParams norm;
};

struct DecoderStage {
  deform::PatchEmbed embed;
  deform::DeformableMlp mix;
  MlpParams mlp;
};

/// Optional observation points filled during a forward pass.
struct Probes {
  /// Attention maps of every encoder block, [heads x N x M] each.
  std::vector<std::vector<double>> attention;
  std::array<deform::OffsetField, 4> encoder_offsets;
  std::array<deform::OffsetField, 4> decoder_pe_offsets;
  std::array<deform::OffsetField, 4> decoder_mix_offsets;
};

struct DecodeResult {
  /// Quarter-resolution class scores [H/4 x W/4 x K].
  Tensor logits;
  /// Sum of the upsampled stage embeddings [H/4 x W/4 x C_emb].
  Tensor fused;
  /// Per-stage embeddings after upsampling to H/4 x W/4.
  std::array<Tensor, 4> stage_embeddings;
};

struct ForwardResult {
  Tensor logits;  // [H x W x K]
  DecodeResult decoded;
  FeaturePyramid pyramid;
};

Tensor layer_norm(const Tensor& x, const LayerNormParams& p);
Tensor mlp(const Tensor& x, const MlpParams& p);

/// Element-wise sum of the four quarter-resolution stage embeddings.
Tensor fuse_features(const std::array<Tensor, 4>& stage_embeddings);

class Trans4Pass {
 public:
  Trans4Pass(const ModelConfig& cfg, std::uint64_t seed);

  const ModelConfig& config() const { return cfg_; }
  ParamStore& params() { return params_; }
  const ParamStore& params() const { return params_; }

  /// One encoder stage: patch embedding then transformer blocks.
  Tensor encoder_stage(const Tensor& x, std::size_t stage, Probes* probes = nullptr) const;
  /// x[H x W x C_in] with H, W divisible by 32.
  FeaturePyramid encode(const Tensor& x, Probes* probes = nullptr) const;
  DecodeResult decode(const FeaturePyramid& pyramid, Probes* probes = nullptr) const;
  ForwardResult forward(const Tensor& x, Probes* probes = nullptr) const;

  /// Parameter count of every top-level group ("enc.0", ..., "dec.3", "head").
  std::vector<std::pair<std::string, std::size_t>> parameter_groups() const;

  /// Human-readable per-stage shape and parameter table for an H x W input.
  std::string describe(std::size_t height, std::size_t width) const;

 private:
  Tensor attention_block(const Tensor& x, const AttentionParams& p, std::size_t h, std::size_t w,
                         Probes* probes) const;

  ModelConfig cfg_;
  ParamStore params_;
  std::array<EncoderStage, 4> encoder_;
  std::array<DecoderStage, 4> decoder_;
  LayerNormParams head_norm_;
  deform::LinearParams classifier_;
};

/// Class-wise argmax of [H x W x K] scores; ties go to the lowest index.
std::vector<std::int32_t> argmax_labels(const Tensor& logits);

}  // namespace panodeform::model
