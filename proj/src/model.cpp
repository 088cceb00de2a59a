#include "panodeform/model.hpp"

#include <map>
#include <sstream>

#include "panodeform/rng.hpp"

namespace panodeform::model {

namespace {

LayerNormParams make_norm(ParamStore& store, const std::string& prefix, std::size_t dim,
                          std::mt19937_64& rng) {
  return {store.add(prefix + ".g", {dim}, Init::kOnes, rng),
          store.add(prefix + ".b", {dim}, Init::kZeros, rng)};
}

MlpParams make_mlp(ParamStore& store, const std::string& prefix, std::size_t dim,
                   std::size_t hidden, std::mt19937_64& rng) {
  return {deform::make_linear(store, prefix + ".fc1", dim, hidden, Init::kTruncNormal, rng),
          deform::make_linear(store, prefix + ".fc2", hidden, dim, Init::kTruncNormal, rng)};
}

Tensor tokens(const Tensor& map) { return ops::reshape(map, {map.dim(0) * map.dim(1), map.dim(2)}); }

}  // namespace

ModelConfig ModelConfig::nano(std::size_t num_classes) {
  ModelConfig cfg;
  cfg.num_classes = num_classes;
  return cfg;
}

ModelConfig ModelConfig::reference_tiny(std::size_t num_classes) {
  ModelConfig cfg;
  cfg.channels = {64, 128, 320, 512};
  cfg.depths = {2, 2, 2, 2};
  cfg.heads = {1, 2, 5, 8};
  cfg.embed_dim = 128;
  cfg.num_classes = num_classes;
  return cfg;
}

void ModelConfig::validate() const {
  for (std::size_t l = 0; l < 4; ++l) {
    if (strides[l] == 0 || (l > 0 && (strides[l] <= strides[l - 1] || strides[l] % strides[l - 1] != 0))) {
      throw std::invalid_argument("stage strides must be positive, strictly increasing multiples");
    }
    if (channels[l] == 0 || heads[l] == 0 || channels[l] % heads[l] != 0) {
      throw std::invalid_argument("stage " + std::to_string(l) + ": channels must divide into heads");
    }
    if (reduction[l] == 0 || patch_sizes[l] == 0) throw std::invalid_argument("zero reduction/patch size");
    if ((strides[3] / strides[l]) % reduction[l] != 0) {
      throw std::invalid_argument("stage " + std::to_string(l) + ": reduction ratio incompatible with stride");
    }
  }
  if (embed_dim == 0) throw std::invalid_argument("embedding channels must be > 0");
  if (num_classes < 2) throw std::invalid_argument("need at least 2 classes");
  if (!(r > 0)) throw std::invalid_argument("offset restriction r must be > 0");
  if (mlp_ratio == 0 || in_channels == 0 || dmlp_max_groups == 0) throw std::invalid_argument("zero-sized layer");
}

Tensor layer_norm(const Tensor& x, const LayerNormParams& p) { return ops::layernorm(x, p.gamma, p.beta); }

Tensor mlp(const Tensor& x, const MlpParams& p) {
  Tensor h = ops::gelu(ops::linear(x, p.fc1.weight, p.fc1.bias));
  return ops::linear(h, p.fc2.weight, p.fc2.bias);
}

Tensor fuse_features(const std::array<Tensor, 4>& stage_embeddings) {
  return ops::add_n({stage_embeddings.begin(), stage_embeddings.end()});
}

Trans4Pass::Trans4Pass(const ModelConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
  cfg_.validate();
  auto rng = make_stream(seed, "init");
  auto& store = params_;
  std::size_t in_ch = cfg.in_channels;
  for (std::size_t l = 0; l < 4; ++l) {
    const std::string p = "enc." + std::to_string(l);
    const std::size_t C = cfg.channels[l];
    deform::PatchEmbedConfig pe{cfg.patch_sizes[l], cfg.stage_stride(l), in_ch, C,
                                cfg.deformable_encoder, cfg.r, cfg.border};
    auto& stage = encoder_[l];
    stage.embed = deform::PatchEmbed(store, p + ".pe", pe, rng);
    stage.embed_norm = make_norm(store, p + ".pe_norm", C, rng);
    for (std::size_t b = 0; b < cfg.depths[l]; ++b) {
      const std::string bp = p + ".block" + std::to_string(b);
      EncoderBlock block;
      block.ln1 = make_norm(store, bp + ".ln1", C, rng);
      auto& a = block.attn;
      a.heads = cfg.heads[l];
      a.reduction = cfg.reduction[l];
      a.q = deform::make_linear(store, bp + ".attn.q", C, C, Init::kTruncNormal, rng);
      a.k = deform::make_linear(store, bp + ".attn.k", C, C, Init::kTruncNormal, rng);
      a.v = deform::make_linear(store, bp + ".attn.v", C, C, Init::kTruncNormal, rng);
      a.proj = deform::make_linear(store, bp + ".attn.proj", C, C, Init::kTruncNormal, rng);
      if (a.reduction > 1) {
        a.sr = deform::make_linear(store, bp + ".attn.sr", a.reduction * a.reduction * C, C,
                                   Init::kTruncNormal, rng);
        a.sr_norm = make_norm(store, bp + ".attn.sr_norm", C, rng);
      }
      block.ln2 = make_norm(store, bp + ".ln2", C, rng);
      block.mlp = make_mlp(store, bp + ".mlp", C, C * cfg.mlp_ratio, rng);
      stage.blocks.push_back(std::move(block));
    }
    stage.norm = make_norm(store, p + ".norm", C, rng);
    in_ch = C;
  }
  const std::size_t E = cfg.embed_dim;
  for (std::size_t l = 0; l < 4; ++l) {
    const std::string p = "dec." + std::to_string(l);
    deform::PatchEmbedConfig pe{3, 1, cfg.channels[l], E, cfg.deformable_decoder_pe, cfg.r, cfg.border};
    auto& stage = decoder_[l];
    stage.embed = deform::PatchEmbed(store, p + ".pe", pe, rng);
    stage.mix = deform::DeformableMlp(store, p + ".dmlp", E, E, cfg.decoder == DecoderKind::kDeformable,
                                      cfg.r, cfg.dmlp_max_groups, cfg.border, rng);
    stage.mlp = make_mlp(store, p + ".mlp", E, E, rng);
  }
  head_norm_ = make_norm(store, "head.ln", E, rng);
  classifier_ = deform::make_linear(store, "head.cls", E, cfg.num_classes, Init::kTruncNormal, rng);
}

Tensor Trans4Pass::attention_block(const Tensor& x, const AttentionParams& p, std::size_t h,
                                   std::size_t w, Probes* probes) const {
  const std::size_t C = x.dim(1);
  Tensor q = ops::linear(x, p.q.weight, p.q.bias);
  Tensor kv_src = x;
  if (p.reduction > 1) {
    Tensor map = ops::reshape(x, {h, w, C});
    Tensor pooled = ops::linear(ops::extract_patches(map, p.reduction, p.reduction, cfg_.border),
                                p.sr.weight, p.sr.bias);
    kv_src = layer_norm(pooled, p.sr_norm);
  }
  Tensor k = ops::linear(kv_src, p.k.weight, p.k.bias);
  Tensor v = ops::linear(kv_src, p.v.weight, p.v.bias);
  std::vector<double>* probe = nullptr;
  if (probes) probe = &probes->attention.emplace_back();
  Tensor o = ops::attention(q, k, v, p.heads, probe);
  return ops::linear(o, p.proj.weight, p.proj.bias);
}

Tensor Trans4Pass::encoder_stage(const Tensor& x, std::size_t l, Probes* probes) const {
  const auto& stage = encoder_[l];
  deform::OffsetField* field = probes ? &probes->encoder_offsets[l] : nullptr;
  Tensor map = layer_norm(stage.embed.forward(x, field), stage.embed_norm);
  const std::size_t h = map.dim(0), w = map.dim(1), C = map.dim(2);
  Tensor t = tokens(map);
  for (const auto& block : stage.blocks) {
    t = ops::add(t, attention_block(layer_norm(t, block.ln1), block.attn, h, w, probes));
    t = ops::add(t, mlp(layer_norm(t, block.ln2), block.mlp));
  }
  return ops::reshape(layer_norm(t, stage.norm), {h, w, C});
}

FeaturePyramid Trans4Pass::encode(const Tensor& x, Probes* probes) const {
  if (x.rank() != 3 || x.dim(2) != cfg_.in_channels) {
    throw DimensionError("encode: expected H x W x " + std::to_string(cfg_.in_channels) +
                         " input, got " + shape_str(x.shape()));
  }
  if (x.dim(0) % cfg_.strides[3] != 0 || x.dim(1) % cfg_.strides[3] != 0) {
    throw DimensionError("encode: input " + shape_str(x.shape()) + " not divisible by " +
                         std::to_string(cfg_.strides[3]));
  }
  FeaturePyramid pyr;
  Tensor cur = x;
  for (std::size_t l = 0; l < 4; ++l) {
    cur = encoder_stage(cur, l, probes);
    pyr[l] = cur;
  }
  return pyr;
}

DecodeResult Trans4Pass::decode(const FeaturePyramid& pyr, Probes* probes) const {
  for (std::size_t l = 0; l < 4; ++l) {
    if (!pyr[l].defined() || pyr[l].rank() != 3 || pyr[l].dim(2) != cfg_.channels[l]) {
      throw DimensionError("decode: stage " + std::to_string(l) + " has wrong shape");
    }
    if (l > 0 && (pyr[l].dim(0) * 2 != pyr[l - 1].dim(0) || pyr[l].dim(1) * 2 != pyr[l - 1].dim(1))) {
      throw DimensionError("decode: stage " + std::to_string(l) + " is not half of the previous stage");
    }
  }
  const std::size_t qh = pyr[0].dim(0), qw = pyr[0].dim(1);
  DecodeResult out;
  for (std::size_t l = 0; l < 4; ++l) {
    const auto& stage = decoder_[l];
    Tensor z = stage.embed.forward(pyr[l], probes ? &probes->decoder_pe_offsets[l] : nullptr);
    z = ops::add(stage.mix.forward(z, probes ? &probes->decoder_mix_offsets[l] : nullptr), z);
    z = ops::add(mlp(z, stage.mlp), z);
    out.stage_embeddings[l] = ops::upsample_bilinear(z, qh, qw);
  }
  out.fused = fuse_features(out.stage_embeddings);
  out.logits = ops::linear(layer_norm(out.fused, head_norm_), classifier_.weight, classifier_.bias);
  return out;
}

ForwardResult Trans4Pass::forward(const Tensor& x, Probes* probes) const {
  ForwardResult out;
  out.pyramid = encode(x, probes);
  out.decoded = decode(out.pyramid, probes);
  out.logits = ops::upsample_bilinear(out.decoded.logits, x.dim(0), x.dim(1));
  return out;
}

std::vector<std::pair<std::string, std::size_t>> Trans4Pass::parameter_groups() const {
  std::vector<std::pair<std::string, std::size_t>> groups;
  for (const auto& [name, t] : params_.items()) {
    const auto first = name.find('.');
    const auto second = name.find('.', first + 1);
    std::string group = name.substr(0, name.rfind("head", 0) == 0 ? first : second);
    if (groups.empty() || groups.back().first != group) groups.emplace_back(group, 0);
    groups.back().second += t.numel();
  }
  return groups;
}

std::string Trans4Pass::describe(std::size_t height, std::size_t width) const {
  std::map<std::string, std::size_t> counts;
  for (const auto& [g, n] : parameter_groups()) counts[g] = n;
  std::ostringstream os;
  os << "Trans4PASS (" << (cfg_.decoder == DecoderKind::kDeformable ? "DMLP" : "vanilla MLP")
     << " decoder), input " << height << "x" << width << "x" << cfg_.in_channels << "\n";
  os << "stage  stride  patch  shape            layers  params(enc)  params(dec)\n";
  for (std::size_t l = 0; l < 4; ++l) {
    char line[160];
    const std::string shape = std::to_string(height / cfg_.strides[l]) + "x" +
                              std::to_string(width / cfg_.strides[l]) + "x" +
                              std::to_string(cfg_.channels[l]);
    std::snprintf(line, sizeof line, "%-6zu %-7zu %-6zu %-16s %-7zu %-12zu %zu\n", l + 1,
                  cfg_.strides[l], cfg_.patch_sizes[l], shape.c_str(), cfg_.depths[l],
                  counts["enc." + std::to_string(l)], counts["dec." + std::to_string(l)]);
    os << line;
  }
  os << "decoder output " << height / 4 << "x" << width / 4 << "x" << cfg_.embed_dim << " -> "
     << cfg_.num_classes << " classes, head params " << counts["head"] << "\n";
  os << "total parameters " << params_.count() << "\n";
  return os.str();
}

std::vector<std::int32_t> argmax_labels(const Tensor& logits) {
  const std::size_t K = logits.shape().back();
  const std::size_t n = logits.numel() / K;
  auto d = logits.data();
  std::vector<std::int32_t> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    std::size_t best = 0;
    for (std::size_t k = 1; k < K; ++k) {
      if (d[i * K + k] > d[i * K + best]) best = k;
    }
    out[i] = static_cast<std::int32_t>(best);
  }
  return out;
}

}  // namespace panodeform::model
