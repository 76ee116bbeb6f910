#pragma once

// Dual-branch image restorer. A pixel-wise random mask gates the semantics
// branch; both branches are U-shaped encoder-decoder networks whose stages
// mix axial attention with convolutions and inject the aligned text feature
// through cross-attention, with FiLM-style modulation at the bottleneck.
// Branch outputs are summed and squashed with a sigmoid.

#include <string>
#include <vector>

#include "psg/error.hpp"
#include "psg/nn.hpp"
#include "psg/ops_basic.hpp"
#include "psg/ops_image.hpp"
#include "psg/rng.hpp"

namespace psg {
namespace restore {

struct PixelMask {
  Tensor data;  // [1, H, W], entries in {0, 1}
  double ratio = 0.5;
  uint64_t seed = 0;

  int height() const { return data.dim(1); }
  int width() const { return data.dim(2); }

  double zero_fraction() const {
    int64_t zeros = 0;
    for (int64_t i = 0; i < data.size(); ++i) zeros += data.data()[i] == 0.0f ? 1 : 0;
    return static_cast<double>(zeros) / static_cast<double>(data.size());
  }
};

// Each pixel is dropped independently with probability `ratio`.
inline PixelMask make_mask(int height, int width, double ratio, uint64_t seed) {
  if (!(ratio >= 0.0 && ratio <= 1.0))
    throw Error(ErrorCode::BadRatio, "mask ratio must lie in [0,1]");
  PixelMask m;
  m.ratio = ratio;
  m.seed = seed;
  m.data = Tensor({1, height, width});
  Rng rng(mix_seed(seed, 0x3a5cull));
  const float r = static_cast<float>(ratio);
  for (int64_t i = 0; i < m.data.size(); ++i)
    m.data.data()[i] = rng.uniform() < r ? 0.0f : 1.0f;
  return m;
}

struct RestorerConfig {
  int base_channels = 32;
  int depth = 3;
  double mask_ratio = 0.5;
  bool share_branch_weights = false;
  int attention_heads = 4;
  int text_dim = 512;
  bool use_cfm = true;    // bottleneck modulation (off for the w/o-CFM variant)
  bool mha_swap = false;  // fuse blocks self-attend over image tokens instead

  void validate() const {
    if (depth < 1) throw Error(ErrorCode::BadShape, "depth must be >= 1");
    if (!(mask_ratio >= 0.0 && mask_ratio <= 1.0))
      throw Error(ErrorCode::BadRatio, "mask_ratio must lie in [0,1]");
    if (base_channels % attention_heads != 0)
      throw Error(ErrorCode::DimMismatch, "base_channels must be divisible by attention_heads");
  }
};

// Sum of an axial-attention path (rows then columns, pre-norm residuals,
// projections shared between the two passes) and a conv path of two 3x3
// convolutions each followed by batch normalization and ReLU.
struct TransformerConv {
  nn::LayerNorm ln_row, ln_col;
  nn::Mha axial;
  nn::Conv2d conv1, conv2;
  nn::BatchNorm2d bn1, bn2;
  int channels = 0;

  TransformerConv() = default;
  TransformerConv(nn::ParamStore& ps, const std::string& name, int channels_, int heads)
      : channels(channels_) {
    ln_row = nn::LayerNorm(ps, name + ".ln_row", channels_);
    ln_col = nn::LayerNorm(ps, name + ".ln_col", channels_);
    axial = nn::Mha(ps, name + ".axial", channels_, channels_, channels_, heads);
    conv1 = nn::Conv2d(ps, name + ".conv1", channels_, channels_, 3);
    conv2 = nn::Conv2d(ps, name + ".conv2", channels_, channels_, 3);
    bn1 = nn::BatchNorm2d(ps, name + ".bn1", channels_);
    bn2 = nn::BatchNorm2d(ps, name + ".bn2", channels_);
  }

  Var attention_path(const Var& x) const {
    const int c = x.value().dim(0), h = x.value().dim(1), w = x.value().dim(2);
    // rows: H sequences of W tokens
    Var rt = ops::reshape(ops::chw_to_tokens(x), {h, w, c});
    Var rn = ops::reshape(ln_row.forward(ops::reshape(rt, {h * w, c})), {h, w, c});
    Var r = ops::add(rt, axial.forward(rn, rn));
    Var mid = ops::tokens_to_chw(ops::reshape(r, {h * w, c}), h, w);
    // columns: W sequences of H tokens
    Var ct = ops::chw_to_coltokens(mid);
    Var cn = ops::reshape(ln_col.forward(ops::reshape(ct, {w * h, c})), {w, h, c});
    Var c2 = ops::add(ct, axial.forward(cn, cn));
    return ops::coltokens_to_chw(c2, h, w);
  }

  Var conv_path(const Var& x) const {
    Var y = ops::relu(bn1.forward(conv1.forward(x)));
    return ops::relu(bn2.forward(conv2.forward(y)));
  }

  Var forward(const Var& x) const {
    if (x.value().dim(0) != channels)
      throw Error(ErrorCode::ShapeMismatch, "transformer_conv channel mismatch");
    return ops::add(attention_path(x), conv_path(x));
  }
};

// Residual cross-attention where the flattened image queries a two-token
// key/value set: the text feature plus a learned context token. The context
// token keeps the softmax non-degenerate, so the query and key projections
// stay trainable; a lone key would receive constant weight 1.
struct FuseBlock {
  nn::Mha cross;
  Var ctx_token;
  nn::LayerNorm ln;
  int channels = 0;
  int text_dim = 0;
  bool self_swap = false;

  FuseBlock() = default;
  FuseBlock(nn::ParamStore& ps, const std::string& name, int channels_, int text_dim_, int heads,
            bool self_swap_ = false)
      : channels(channels_), text_dim(text_dim_), self_swap(self_swap_) {
    const int kv_dim = self_swap_ ? channels_ : text_dim_;
    cross = nn::Mha(ps, name + ".ca", channels_, kv_dim, channels_, heads);
    if (!self_swap_) ctx_token = ps.param(name + ".ctx", {1, text_dim_}, nn::Init::SmallNormal);
    ln = nn::LayerNorm(ps, name + ".ln", channels_);
  }

  Var forward(const Var& x, const Var& text_feature) const {
    const int c = x.value().dim(0), h = x.value().dim(1), w = x.value().dim(2);
    Var toks = ops::chw_to_tokens(x);  // [HW, C]
    Var att;
    if (self_swap) {
      att = cross.forward2d(toks, toks);
    } else {
      if (text_feature.value().size() != text_dim)
        throw Error(ErrorCode::DimMismatch, "fuse_block text feature dim");
      Var kv = ops::concat_rows({ops::reshape(text_feature, {1, text_dim}), ctx_token});
      att = cross.forward2d(toks, kv);
    }
    Var out = ln.forward(ops::add(att, toks));
    return ops::tokens_to_chw(out, h, w);
  }
};

// Cross-attention FiLM: pooled cross-attended features drive an MLP that
// emits per-channel scale and shift.
struct CfmBlock {
  nn::Mha cross;
  Var ctx_token;
  nn::Linear mlp1, mlp2;
  int channels = 0;
  int text_dim = 0;

  CfmBlock() = default;
  CfmBlock(nn::ParamStore& ps, const std::string& name, int channels_, int text_dim_, int heads)
      : channels(channels_), text_dim(text_dim_) {
    cross = nn::Mha(ps, name + ".ca", channels_, text_dim_, channels_, heads);
    ctx_token = ps.param(name + ".ctx", {1, text_dim_}, nn::Init::SmallNormal);
    mlp1 = nn::Linear(ps, name + ".mlp1", channels_, channels_);
    mlp2 = nn::Linear(ps, name + ".mlp2", channels_, 2 * channels_);
    // start as the identity modulation: gamma near 1, beta near 0
    for (int i = 0; i < channels_; ++i) mlp2.b.mutable_value().data()[i] = 1.0f;
  }

  // (gamma, beta) from pooled cross-attention
  std::pair<Var, Var> modulation(const Var& x, const Var& text_feature) const {
    if (text_feature.value().size() != text_dim)
      throw Error(ErrorCode::DimMismatch, "cfm text feature dim");
    Var toks = ops::chw_to_tokens(x);
    Var kv = ops::concat_rows({ops::reshape(text_feature, {1, text_dim}), ctx_token});
    Var att = cross.forward2d(toks, kv);           // [HW, C]
    Var pooled = ops::mean_rows(att);              // [C]
    Var hdn = ops::gelu(mlp1.forward(ops::reshape(pooled, {1, channels})));
    Var gb = ops::reshape(mlp2.forward(hdn), {2, channels});
    Var gamma = ops::reshape(ops::slice_rows(gb, 0, 1), {channels});
    Var beta = ops::reshape(ops::slice_rows(gb, 1, 2), {channels});
    return {gamma, beta};
  }

  Var forward(const Var& x, const Var& text_feature) const {
    auto [gamma, beta] = modulation(x, text_feature);
    return ops::channel_affine(x, gamma, beta);
  }

  // exact identity: gamma == 1, beta == 0 regardless of inputs
  void set_film_identity() {
    mlp2.w.mutable_value().fill(0.0f);
    Tensor& b = mlp2.b.mutable_value();
    for (int i = 0; i < channels; ++i) {
      b.data()[i] = 1.0f;
      b.data()[channels + i] = 0.0f;
    }
  }
};

// Semantics-guided encoder-decoder: per stage transformer-conv, text fusion,
// strided-conv downsampling; FiLM bottleneck; mirrored decoder with additive
// skips and a final 3-channel projection (no output normalization here).
struct Sged {
  struct EncStage {
    TransformerConv tc;
    FuseBlock fuse;
    nn::Conv2d down;
  };
  struct DecStage {
    nn::Conv2d up;
    TransformerConv tc;
  };

  RestorerConfig cfg;
  nn::Conv2d conv_in;
  std::vector<EncStage> enc;
  CfmBlock cfm;
  TransformerConv bottleneck_tc;
  std::vector<DecStage> dec;
  nn::Conv2d conv_out;

  Sged() = default;
  Sged(nn::ParamStore& ps, const std::string& name, const RestorerConfig& cfg_) : cfg(cfg_) {
    cfg.validate();
    const int base = cfg.base_channels;
    conv_in = nn::Conv2d(ps, name + ".conv_in", 3, base, 3);
    for (int s = 0; s < cfg.depth; ++s) {
      const int c = base << s;
      EncStage stage;
      stage.tc = TransformerConv(ps, name + ".enc" + std::to_string(s) + ".tc", c,
                                 cfg.attention_heads);
      stage.fuse = FuseBlock(ps, name + ".enc" + std::to_string(s) + ".fuse", c, cfg.text_dim,
                             cfg.attention_heads, cfg.mha_swap);
      stage.down = nn::Conv2d(ps, name + ".enc" + std::to_string(s) + ".down", c, c * 2, 3, 2, 1);
      enc.push_back(std::move(stage));
    }
    const int cb = base << cfg.depth;
    if (cfg.use_cfm)
      cfm = CfmBlock(ps, name + ".cfm", cb, cfg.text_dim, cfg.attention_heads);
    else
      bottleneck_tc = TransformerConv(ps, name + ".btc", cb, cfg.attention_heads);
    for (int s = cfg.depth - 1; s >= 0; --s) {
      const int c = base << s;
      DecStage stage;
      stage.up = nn::Conv2d(ps, name + ".dec" + std::to_string(s) + ".up", c * 2, c, 3);
      stage.tc = TransformerConv(ps, name + ".dec" + std::to_string(s) + ".tc", c,
                                 cfg.attention_heads);
      dec.push_back(std::move(stage));
    }
    conv_out = nn::Conv2d(ps, name + ".conv_out", base, 3, 3);
  }

  Var forward(const Var& image, const Var& text_feature) const {
    const int h = image.value().dim(1), w = image.value().dim(2);
    const int div = 1 << cfg.depth;
    if (h % div != 0 || w % div != 0)
      throw Error(ErrorCode::BadShape, "spatial dims must be divisible by 2^depth");

    Var x = conv_in.forward(image);
    std::vector<Var> skips;
    for (const auto& stage : enc) {
      x = stage.tc.forward(x);
      x = stage.fuse.forward(x, text_feature);
      skips.push_back(x);
      x = stage.down.forward(x);
    }
    x = cfg.use_cfm ? cfm.forward(x, text_feature) : bottleneck_tc.forward(x);
    for (size_t i = 0; i < dec.size(); ++i) {
      x = dec[i].up.forward(ops::upsample_nearest2x(x));
      x = ops::add(x, skips[skips.size() - 1 - i]);
      x = dec[i].tc.forward(x);
    }
    return conv_out.forward(x);
  }
};

struct RestoreResult {
  Var enhanced;        // sigmoid(branch outputs), strictly in (0,1)
  Var semantics_out;   // pre-normalization branch outputs
  Var image_out;
};

class Restorer {
 public:
  Restorer() = default;

  Restorer(nn::ParamStore& ps, const std::string& name, RestorerConfig cfg) : cfg_(cfg) {
    cfg_.validate();
    semantics_ = Sged(ps, name + ".sem", cfg_);
    if (!cfg_.share_branch_weights) image_ = Sged(ps, name + ".img", cfg_);
  }

  const RestorerConfig& config() const { return cfg_; }

  // I_1 = lit (.) mask feeds the semantics branch, I_2 = lit the image branch
  RestoreResult restore(const Var& lit, const Var& text_feature, const PixelMask& mask) const {
    if (mask.height() != lit.value().dim(1) || mask.width() != lit.value().dim(2))
      throw Error(ErrorCode::ShapeMismatch, "mask dims " + mask.data.shape_str() +
                                                " do not match image " + lit.value().shape_str());
    const Sged& image_branch = cfg_.share_branch_weights ? semantics_ : image_;
    RestoreResult out;
    out.semantics_out = semantics_.forward(ops::mask_mul(lit, mask.data), text_feature);
    out.image_out = image_branch.forward(lit, text_feature);
    out.enhanced = ops::sigmoid(ops::add(out.semantics_out, out.image_out));
    return out;
  }

  Sged& semantics_branch() { return semantics_; }
  Sged& image_branch() { return cfg_.share_branch_weights ? semantics_ : image_; }

 private:
  RestorerConfig cfg_;
  Sged semantics_, image_;
};

}  // namespace restore
}  // namespace psg
