#pragma once

// Multi-scale illumination estimation. Each configured scale pools the input
// to scale x scale, runs a small stem + transformer stack, and emits a
// strictly positive light map at the input resolution. Per-scale lit-up
// images are fused by a learned 3x3 convolution.

#include <string>
#include <vector>

#include "psg/error.hpp"
#include "psg/nn.hpp"
#include "psg/ops_basic.hpp"
#include "psg/ops_image.hpp"

namespace psg {
namespace illum {

inline constexpr float kMapFloor = 1e-3f;

struct IlluminationConfig {
  std::vector<int> scales{16, 32, 64};
  int embed_dim = 32;
  int attention_heads = 4;
  int ff_hidden = 128;

  void validate() const {
    if (scales.empty()) throw Error(ErrorCode::BadScale, "no scales configured");
    for (size_t i = 0; i < scales.size(); ++i) {
      if (scales[i] < 4) throw Error(ErrorCode::BadScale, "scale must be >= 4");
      if (i > 0 && scales[i] <= scales[i - 1])
        throw Error(ErrorCode::BadScale, "scales must be sorted ascending");
    }
    if (embed_dim % attention_heads != 0)
      throw Error(ErrorCode::DimMismatch, "embed_dim must be divisible by attention_heads");
  }
};

// element-wise product with a positive light map, clamped to [0,1]
inline Var lit_up(const Var& image, const Var& map) {
  check_same_shape(image.value(), map.value(), "lit_up");
  return ops::clamp01(ops::mul(image, map));
}

namespace detail {

// IE_s: stem -> transformer over flattened positions -> positive 3-channel map
struct ScaleEstimator {
  int scale = 0;
  nn::Conv2d stem1, stem2;
  Var pos_emb;
  nn::TransformerLayer transformer;
  nn::Conv2d head;

  ScaleEstimator() = default;
  ScaleEstimator(nn::ParamStore& ps, const std::string& name, int scale_,
                 const IlluminationConfig& cfg)
      : scale(scale_) {
    stem1 = nn::Conv2d(ps, name + ".stem1", 3, cfg.embed_dim, 3);
    stem2 = nn::Conv2d(ps, name + ".stem2", cfg.embed_dim, cfg.embed_dim, 3);
    pos_emb = ps.param(name + ".pos", {scale_ * scale_, cfg.embed_dim}, nn::Init::SmallNormal);
    transformer = nn::TransformerLayer(ps, name + ".tf", cfg.embed_dim, cfg.attention_heads,
                                       cfg.ff_hidden);
    head = nn::Conv2d(ps, name + ".head", cfg.embed_dim, 3, 3);
  }

  Var forward(const Var& image) const {
    const int h = image.value().dim(1), w = image.value().dim(2);
    Var pooled = ops::adaptive_avg_pool(image, scale, scale);
    Var f = stem2.forward(ops::gelu(stem1.forward(pooled)));
    Var tokens = ops::add(ops::chw_to_tokens(f), pos_emb);
    tokens = transformer.forward(tokens);
    Var m = head.forward(ops::tokens_to_chw(tokens, scale, scale));
    m = ops::softplus(m, kMapFloor);
    return ops::upsample_bilinear(m, h, w);
  }
};

}  // namespace detail

struct EstimateResult {
  Var lit;                // fused lit-up image, [3,H,W] in [0,1]
  std::vector<Var> maps;  // per-scale light maps at input resolution
};

class IlluminationEstimator {
 public:
  IlluminationEstimator() = default;

  IlluminationEstimator(nn::ParamStore& ps, const std::string& name, IlluminationConfig cfg)
      : cfg_(std::move(cfg)) {
    cfg_.validate();
    for (int s : cfg_.scales)
      estimators_.emplace_back(ps, name + ".s" + std::to_string(s), s, cfg_);
    fuse_ = nn::Conv2d(ps, name + ".fuse", 3 * static_cast<int>(cfg_.scales.size()), 3, 3);
  }

  const IlluminationConfig& config() const { return cfg_; }

  Var estimate_scale(const Var& image, int scale) const {
    for (const auto& e : estimators_)
      if (e.scale == scale) return e.forward(image);
    throw Error(ErrorCode::BadScale, "scale " + std::to_string(scale) + " not configured");
  }

  // channel concat of per-scale lit images followed by the learned fusion conv
  Var fuse_scales(const std::vector<Var>& lit_images) const {
    if (lit_images.size() != cfg_.scales.size())
      throw Error(ErrorCode::WrongCount,
                  "expected " + std::to_string(cfg_.scales.size()) + " lit images, got " +
                      std::to_string(lit_images.size()));
    for (const auto& v : lit_images)
      check_same_shape(v.value(), lit_images[0].value(), "fuse_scales");
    return ops::clamp01(fuse_.forward(ops::concat_channels(lit_images)));
  }

  EstimateResult estimate(const Var& image) const {
    EstimateResult out;
    std::vector<Var> lits;
    for (int s : cfg_.scales) {
      Var map = estimate_scale(image, s);
      lits.push_back(lit_up(image, map));
      out.maps.push_back(std::move(map));
    }
    out.lit = fuse_scales(lits);
    return out;
  }

  // Configures the fusion conv as an exact passthrough of the last scale's
  // lit image (center tap 1, everything else 0). With all maps forced to 1
  // every branch carries the raw image, so fusion reproduces it bit-exactly;
  // power-of-two averaging weights would not survive float summation order.
  void set_identity_fusion() {
    Tensor& w = fuse_.w.mutable_value();
    Tensor& b = fuse_.b.mutable_value();
    w.fill(0.0f);
    b.fill(0.0f);
    const int cin = 3 * static_cast<int>(cfg_.scales.size());
    const int last = cin - 3;
    for (int c = 0; c < 3; ++c) {
      // w[c][last + c][1][1]
      const int64_t idx = ((static_cast<int64_t>(c) * cin + last + c) * 3 + 1) * 3 + 1;
      w.data()[idx] = 1.0f;
    }
  }

 private:
  IlluminationConfig cfg_;
  std::vector<detail::ScaleEstimator> estimators_;
  nn::Conv2d fuse_;
};

}  // namespace illum
}  // namespace psg
