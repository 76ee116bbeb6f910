#pragma once

// Text-side components: pluggable frozen text encoders (a deterministic
// trigram-hash toy and a precomputed-embedding file reader), the learnable
// image projection block, the two-token cross-modal aligner, and a frozen
// differentiable image encoder used by the semantic-similarity loss.

#include <cstdio>
#include <cstring>
#include <fstream>
#include <string>
#include <unordered_map>
#include <vector>

#include "psg/error.hpp"
#include "psg/nn.hpp"
#include "psg/ops_basic.hpp"
#include "psg/rng.hpp"
#include "psg/tensor.hpp"

namespace psg {
namespace text {

inline constexpr int kDefaultEmbedDim = 512;
inline constexpr int kTrigramBins = 2048;
inline constexpr uint64_t kToyEncoderSeed = 0x7e47c0de;

// Deterministic, dependency-free stand-in for a pretrained text encoder:
// character trigram counts hashed into a fixed histogram, projected by a
// seeded random matrix, then unit-normalized. Identical output for identical
// strings on any platform.
class ToyTextEncoder {
 public:
  explicit ToyTextEncoder(int embed_dim = kDefaultEmbedDim) : dim_(embed_dim) {
    proj_ = Tensor({dim_, kTrigramBins});
    Rng rng(mix_seed(kToyEncoderSeed, static_cast<uint64_t>(dim_)));
    for (int64_t i = 0; i < proj_.size(); ++i) proj_.data()[i] = rng.normal();
  }

  int dim() const { return dim_; }

  Tensor encode(const std::string& utf8) const {
    if (utf8.empty()) throw Error(ErrorCode::EmptyText, "cannot embed an empty string");
    std::vector<float> hist(kTrigramBins, 0.0f);
    const std::string padded = "^" + utf8 + "$";
    for (size_t i = 0; i + 3 <= padded.size(); ++i) {
      const uint64_t h = fnv1a(padded.data() + i, 3);
      hist[h % kTrigramBins] += 1.0f;
    }
    Tensor out({dim_});
    for (int d = 0; d < dim_; ++d) {
      const float* row = proj_.data() + static_cast<int64_t>(d) * kTrigramBins;
      double s = 0.0;
      for (int b = 0; b < kTrigramBins; ++b) s += static_cast<double>(row[b]) * hist[b];
      out.data()[d] = static_cast<float>(s);
    }
    const double norm = out.l2_norm();
    if (norm <= 0.0) throw Error(ErrorCode::ZeroVector, "degenerate text embedding");
    const float inv = static_cast<float>(1.0 / norm);
    for (int d = 0; d < dim_; ++d) out.data()[d] *= inv;
    return out;
  }

 private:
  int dim_;
  Tensor proj_;
};

// Precomputed embedding file. Layout, all little-endian:
//   "TEMB" | u32 version | u32 count | u32 dim | count * (u64 hash, dim * f32)
// Keys are FNV-1a hashes of the UTF-8 text.
struct EmbeddingFile {
  int dim = 0;
  std::unordered_map<uint64_t, Tensor> table;

  static void write(const std::string& path,
                    const std::vector<std::pair<uint64_t, Tensor>>& records, int dim) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw Error(ErrorCode::IOError, "cannot write " + path);
    const uint32_t version = 1, count = static_cast<uint32_t>(records.size()),
                   d = static_cast<uint32_t>(dim);
    out.write("TEMB", 4);
    out.write(reinterpret_cast<const char*>(&version), 4);
    out.write(reinterpret_cast<const char*>(&count), 4);
    out.write(reinterpret_cast<const char*>(&d), 4);
    for (const auto& [hash, vec] : records) {
      if (vec.size() != dim) throw Error(ErrorCode::DimMismatch, "embedding record dim");
      out.write(reinterpret_cast<const char*>(&hash), 8);
      out.write(reinterpret_cast<const char*>(vec.data()),
                static_cast<std::streamsize>(sizeof(float)) * dim);
    }
    if (!out) throw Error(ErrorCode::IOError, "short write: " + path);
  }

  static EmbeddingFile read(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error(ErrorCode::MissingFile, path);
    char magic[4];
    uint32_t version = 0, count = 0, dim = 0;
    in.read(magic, 4);
    in.read(reinterpret_cast<char*>(&version), 4);
    in.read(reinterpret_cast<char*>(&count), 4);
    in.read(reinterpret_cast<char*>(&dim), 4);
    if (!in || std::memcmp(magic, "TEMB", 4) != 0 || version != 1)
      throw Error(ErrorCode::SchemaError, "not a TEMB v1 file: " + path);
    EmbeddingFile f;
    f.dim = static_cast<int>(dim);
    for (uint32_t i = 0; i < count; ++i) {
      uint64_t hash = 0;
      Tensor vec({f.dim});
      in.read(reinterpret_cast<char*>(&hash), 8);
      in.read(reinterpret_cast<char*>(vec.data()),
              static_cast<std::streamsize>(sizeof(float)) * f.dim);
      if (!in) throw Error(ErrorCode::SchemaError, "truncated TEMB file: " + path);
      f.table.emplace(hash, std::move(vec));
    }
    return f;
  }
};

enum class BackendKind { toy_deterministic, pretrained_export };

// Frozen text encoder facade shared by training, losses, and the CLI.
class TextBackend {
 public:
  static TextBackend toy(int embed_dim = kDefaultEmbedDim) {
    TextBackend b;
    b.kind_ = BackendKind::toy_deterministic;
    b.toy_ = std::make_shared<ToyTextEncoder>(embed_dim);
    b.dim_ = embed_dim;
    return b;
  }

  static TextBackend from_file(const std::string& path) {
    TextBackend b;
    b.kind_ = BackendKind::pretrained_export;
    b.file_ = std::make_shared<EmbeddingFile>(EmbeddingFile::read(path));
    b.dim_ = b.file_->dim;
    return b;
  }

  BackendKind kind() const { return kind_; }
  int dim() const { return dim_; }

  Tensor encode(const std::string& utf8) const {
    if (utf8.empty()) throw Error(ErrorCode::EmptyText, "cannot embed an empty string");
    if (kind_ == BackendKind::toy_deterministic) return toy_->encode(utf8);
    auto it = file_->table.find(fnv1a(utf8));
    if (it == file_->table.end())
      throw Error(ErrorCode::MissingEmbedding, "text not present in embedding file");
    return it->second.clone();
  }

 private:
  BackendKind kind_ = BackendKind::toy_deterministic;
  std::shared_ptr<ToyTextEncoder> toy_;
  std::shared_ptr<EmbeddingFile> file_;
  int dim_ = kDefaultEmbedDim;
};

namespace ops_ext {

// [3, H, W] -> [n_patches, 3*p*p]; fails unless p divides both spatial dims
inline Var patchify(const Var& x, int p) {
  const int c = x.value().dim(0), h = x.value().dim(1), w = x.value().dim(2);
  if (h % p != 0 || w % p != 0)
    throw Error(ErrorCode::BadShape, "spatial dims " + x.value().shape_str() +
                                         " not divisible by patch size " + std::to_string(p));
  const int gy = h / p, gx = w / p;
  const int np = gy * gx, pd = c * p * p;
  Tensor out({np, pd});
  const float* px = x.value().data();
  for (int ty = 0; ty < gy; ++ty)
    for (int tx = 0; tx < gx; ++tx) {
      float* row = out.data() + (static_cast<int64_t>(ty) * gx + tx) * pd;
      int idx = 0;
      for (int ch = 0; ch < c; ++ch)
        for (int oy = 0; oy < p; ++oy)
          for (int ox = 0; ox < p; ++ox)
            row[idx++] = px[(static_cast<int64_t>(ch) * h + ty * p + oy) * w + tx * p + ox];
    }
  return make_op(std::move(out), {x},
                 [c, h, w, p, gy, gx, pd](const Tensor& g, const std::vector<Tensor*>& pg) {
                   if (!pg[0]) return;
                   float* dx = pg[0]->data();
                   for (int ty = 0; ty < gy; ++ty)
                     for (int tx = 0; tx < gx; ++tx) {
                       const float* row = g.data() + (static_cast<int64_t>(ty) * gx + tx) * pd;
                       int idx = 0;
                       for (int ch = 0; ch < c; ++ch)
                         for (int oy = 0; oy < p; ++oy)
                           for (int ox = 0; ox < p; ++ox)
                             dx[(static_cast<int64_t>(ch) * h + ty * p + oy) * w + tx * p + ox] +=
                                 row[idx++];
                     }
                 });
}

}  // namespace ops_ext

// Learnable projection block: patch embedding, mean pool, linear head.
struct ImageProjector {
  nn::Linear patch_proj, head;
  int patch = 16;
  int dim = kDefaultEmbedDim;

  ImageProjector() = default;
  ImageProjector(nn::ParamStore& ps, const std::string& name, int patch_, int embed_dim)
      : patch(patch_), dim(embed_dim) {
    patch_proj = nn::Linear(ps, name + ".patch", 3 * patch_ * patch_, embed_dim);
    head = nn::Linear(ps, name + ".head", embed_dim, embed_dim);
  }

  // [3, H, W] -> [dim]
  Var forward(const Var& image) const {
    Var patches = ops_ext::patchify(image, patch);
    Var emb = patch_proj.forward(patches);
    Var pooled = ops::mean_rows(emb);
    Var out = head.forward(ops::reshape(pooled, {1, dim}));
    return ops::reshape(out, {dim});
  }
};

struct AlignedFeatures {
  Var image_feature;  // E'_img
  Var text_feature;   // F'_text
};

// Two-token transformer over (image embedding, text embedding). Token roles
// are fixed by learned type embeddings: image first, text second.
struct CrossModalAligner {
  Var type_emb;
  std::vector<nn::TransformerLayer> layers;
  int dim = kDefaultEmbedDim;

  CrossModalAligner() = default;
  CrossModalAligner(nn::ParamStore& ps, const std::string& name, int embed_dim, int depth = 2,
                    int heads = 8)
      : dim(embed_dim) {
    type_emb = ps.param(name + ".type_emb", {2, embed_dim}, nn::Init::SmallNormal);
    layers.reserve(depth);
    for (int i = 0; i < depth; ++i)
      layers.emplace_back(ps, name + ".layer" + std::to_string(i), embed_dim, heads,
                          2 * embed_dim);
  }

  AlignedFeatures forward(const Var& image_emb, const Var& text_emb) const {
    if (image_emb.value().size() != dim || text_emb.value().size() != dim)
      throw Error(ErrorCode::DimMismatch,
                  "aligner expects two vectors of dim " + std::to_string(dim));
    Var tokens = ops::concat_rows(
        {ops::reshape(image_emb, {1, dim}), ops::reshape(text_emb, {1, dim})});
    tokens = ops::add(tokens, type_emb);
    for (const auto& layer : layers) tokens = layer.forward(tokens);
    AlignedFeatures out;
    out.image_feature = ops::reshape(ops::slice_rows(tokens, 0, 1), {dim});
    out.text_feature = ops::reshape(ops::slice_rows(tokens, 1, 2), {dim});
    return out;
  }
};

// Frozen patch-embedding image encoder for the semantic-similarity loss.
// Weights are fixed leaves (never trainable); gradients still flow through to
// the input image.
class FrozenImageEncoder {
 public:
  explicit FrozenImageEncoder(int embed_dim = kDefaultEmbedDim, int patch = 8,
                              uint64_t seed = 0xf02e4ull)
      : patch_(patch), dim_(embed_dim) {
    const int pd = 3 * patch * patch;
    const int hidden = 256;
    w1_ = Var::leaf(init(seed, {hidden, pd}, pd));
    b1_ = Var::leaf(Tensor::zeros({hidden}));
    w2_ = Var::leaf(init(seed + 1, {embed_dim, hidden}, hidden));
    b2_ = Var::leaf(Tensor::zeros({embed_dim}));
  }

  int dim() const { return dim_; }
  int patch() const { return patch_; }

  // differentiable w.r.t. image; weights receive no gradient
  Var forward(const Var& image) const {
    Var patches = ops_ext::patchify(image, patch_);
    Var h = ops::gelu(ops::linear(patches, w1_, b1_));
    Var pooled = ops::mean_rows(h);
    Var out = ops::linear(ops::reshape(pooled, {1, 256}), w2_, b2_);
    return ops::reshape(out, {dim_});
  }

  // exposed so tests can assert no gradient ever reaches them
  std::vector<Var> frozen_weights() const { return {w1_, b1_, w2_, b2_}; }

 private:
  static Tensor init(uint64_t seed, std::vector<int> shape, int fan_in) {
    Tensor t(std::move(shape));
    Rng rng(mix_seed(kToyEncoderSeed, seed));
    const float bound = 1.0f / std::sqrt(static_cast<float>(fan_in));
    for (int64_t i = 0; i < t.size(); ++i) t.data()[i] = rng.uniform(-bound, bound);
    return t;
  }

  int patch_;
  int dim_;
  Var w1_, b1_, w2_, b2_;
};

}  // namespace text
}  // namespace psg
