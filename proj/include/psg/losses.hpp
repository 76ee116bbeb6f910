#pragma once

// Training objective: pixel MSE, structural-similarity loss, feature-space
// perceptual loss behind a pluggable frozen extractor, and the image-text
// semantic-similarity term; combined as mse + ssim + alpha*perceptual +
// beta*itss.

#include <cmath>
#include <memory>
#include <string>
#include <vector>

#include "psg/error.hpp"
#include "psg/ops_basic.hpp"
#include "psg/ops_image.hpp"
#include "psg/rng.hpp"
#include "psg/tensor.hpp"
#include "psg/text_align.hpp"

namespace psg {
namespace loss {

struct LossWeights {
  double alpha = 0.1;        // perceptual
  double beta_itss = 1e-4;   // semantic similarity

  void validate() const {
    if (!(alpha >= 0.0) || !(beta_itss >= 0.0) || !std::isfinite(alpha) ||
        !std::isfinite(beta_itss))
      throw Error(ErrorCode::BadRatio, "loss weights must be finite and non-negative");
  }
};

inline Var mse_loss(const Var& enh, const Var& ref) {
  check_same_shape(enh.value(), ref.value(), "mse_loss");
  return ops::mean_all(ops::square(ops::sub(enh, ref)));
}

namespace detail {

inline const Tensor& ssim_window() {
  static const Tensor k = [] {
    constexpr int n = 11;
    constexpr double sigma = 1.5;
    Tensor t({n, n});
    double sum = 0.0;
    for (int y = 0; y < n; ++y)
      for (int x = 0; x < n; ++x) {
        const double dy = y - (n - 1) / 2.0, dx = x - (n - 1) / 2.0;
        const double v = std::exp(-(dx * dx + dy * dy) / (2.0 * sigma * sigma));
        t.data()[y * n + x] = static_cast<float>(v);
        sum += v;
      }
    for (int64_t i = 0; i < t.size(); ++i)
      t.data()[i] = static_cast<float>(t.data()[i] / sum);
    return t;
  }();
  return k;
}

}  // namespace detail

// mean SSIM over an 11x11 Gaussian window (sigma 1.5), K1=0.01, K2=0.03,
// dynamic range 1; computed per channel over the valid region.
inline Var ssim_mean(const Var& a, const Var& b) {
  check_same_shape(a.value(), b.value(), "ssim");
  if (a.value().dim(1) < 11 || a.value().dim(2) < 11)
    throw Error(ErrorCode::TooSmall, "ssim needs spatial dims >= 11, got " + a.value().shape_str());
  constexpr float c1 = 0.01f * 0.01f;
  constexpr float c2 = 0.03f * 0.03f;
  const Tensor& win = detail::ssim_window();

  Var mu_a = ops::fixed_blur_valid(a, win);
  Var mu_b = ops::fixed_blur_valid(b, win);
  Var aa = ops::fixed_blur_valid(ops::mul(a, a), win);
  Var bb = ops::fixed_blur_valid(ops::mul(b, b), win);
  Var ab = ops::fixed_blur_valid(ops::mul(a, b), win);

  Var mu_ab = ops::mul(mu_a, mu_b);
  Var var_a = ops::sub(aa, ops::mul(mu_a, mu_a));
  Var var_b = ops::sub(bb, ops::mul(mu_b, mu_b));
  Var cov = ops::sub(ab, mu_ab);

  Var num = ops::mul(ops::add_scalar(ops::mul_scalar(mu_ab, 2.0f), c1),
                     ops::add_scalar(ops::mul_scalar(cov, 2.0f), c2));
  Var den = ops::mul(ops::add_scalar(ops::add(ops::mul(mu_a, mu_a), ops::mul(mu_b, mu_b)), c1),
                     ops::add_scalar(ops::add(var_a, var_b), c2));
  return ops::mean_all(ops::div(num, den));
}

inline Var ssim_loss(const Var& enh, const Var& ref) {
  return ops::add_scalar(ops::mul_scalar(ssim_mean(enh, ref), -1.0f), 1.0f);
}

// Frozen random-conv feature extractor standing in for a pretrained network.
// Four stride-2 stages; layer_ids selects which stage outputs contribute.
class PerceptualBackend {
 public:
  static PerceptualBackend toy(std::vector<int> layer_ids = {1, 2, 3},
                               uint64_t seed = 0x9e7cull) {
    PerceptualBackend b;
    b.layer_ids_ = std::move(layer_ids);
    const int chans[5] = {3, 8, 16, 32, 64};
    for (int s = 0; s < 4; ++s) {
      Tensor w({chans[s + 1], chans[s], 3, 3});
      Rng rng(mix_seed(seed, static_cast<uint64_t>(s)));
      const float bound = 1.0f / std::sqrt(static_cast<float>(chans[s] * 9));
      for (int64_t i = 0; i < w.size(); ++i) w.data()[i] = rng.uniform(-bound, bound);
      b.weights_.push_back(Var::leaf(std::move(w)));
      b.biases_.push_back(Var::leaf(Tensor::zeros({chans[s + 1]})));
    }
    for (int id : b.layer_ids_)
      if (id < 0 || id > 3) throw Error(ErrorCode::BadShape, "perceptual layer id out of range");
    return b;
  }

  const std::vector<int>& layer_ids() const { return layer_ids_; }

  // feature maps for the configured layers; differentiable in x only
  std::vector<Var> features(const Var& x) const {
    std::vector<Var> taps;
    Var f = x;
    for (int s = 0; s < 4; ++s) {
      f = ops::gelu(ops::conv2d(f, weights_[s], biases_[s], 2, 1));
      taps.push_back(f);
    }
    std::vector<Var> out;
    for (int id : layer_ids_) out.push_back(taps[id]);
    return out;
  }

  std::vector<Var> frozen_weights() const {
    std::vector<Var> all = weights_;
    all.insert(all.end(), biases_.begin(), biases_.end());
    return all;
  }

 private:
  std::vector<int> layer_ids_;
  std::vector<Var> weights_, biases_;
};

// sum over configured layers of the mean squared feature distance
inline Var perceptual_loss(const Var& enh, const Var& ref, const PerceptualBackend& backend) {
  check_same_shape(enh.value(), ref.value(), "perceptual_loss");
  auto fa = backend.features(enh);
  auto fb = backend.features(ref);
  Var total;
  for (size_t i = 0; i < fa.size(); ++i) {
    Var term = ops::mean_all(ops::square(ops::sub(fa[i], fb[i])));
    total = total.defined() ? ops::add(total, term) : term;
  }
  return total;
}

// cosine similarity of two embedding vectors as a scalar graph node
inline Var cosine_similarity(const Var& a, const Var& b) {
  if (a.value().size() != b.value().size())
    throw Error(ErrorCode::DimMismatch, "cosine dims differ");
  const double na = a.value().l2_norm(), nb = b.value().l2_norm();
  if (na <= 1e-12 || nb <= 1e-12)
    throw Error(ErrorCode::ZeroVector, "cosine of a zero-norm embedding");
  Var num = ops::dot(a, b);
  Var den = ops::mul(ops::sqrt(ops::dot(a, a)), ops::sqrt(ops::dot(b, b)));
  return ops::div(num, den);
}

// | cos(e_enh, e_text) - cos(e_ref, e_text) |
inline Var itss_from_embeddings(const Var& emb_enh, const Var& emb_ref, const Var& emb_text) {
  Var cos_enh = cosine_similarity(emb_enh, emb_text);
  Var cos_ref = cosine_similarity(emb_ref, emb_text);
  return ops::abs(ops::sub(cos_enh, cos_ref));
}

// Gradients reach `enh` only: the reference and text sides enter as data.
inline Var itss_loss(const Var& enh, const Tensor& ref, const Tensor& text_embedding,
                     const text::FrozenImageEncoder& encoder) {
  Var emb_enh = encoder.forward(enh);
  Var emb_ref;
  {
    NoGradGuard ng;
    emb_ref = encoder.forward(Var::leaf(ref));
  }
  return itss_from_embeddings(emb_enh, emb_ref, Var::leaf(text_embedding));
}

struct LossTerms {
  Var total;  // weighted combination, carries the graph
  double mse = 0.0, ssim = 0.0, perceptual = 0.0, itss = 0.0;  // unweighted values

  double total_value() const { return total.value().item(); }
};

inline LossTerms total_loss(const Var& enh, const Var& ref, const Tensor& text_embedding,
                            const LossWeights& weights, const PerceptualBackend& perceptual,
                            const text::FrozenImageEncoder& image_encoder) {
  weights.validate();
  LossTerms t;
  Var mse = mse_loss(enh, ref);
  Var ssim = ssim_loss(enh, ref);
  Var perc = perceptual_loss(enh, ref, perceptual);
  Var itss = itss_loss(enh, ref.value(), text_embedding, image_encoder);
  t.mse = mse.value().item();
  t.ssim = ssim.value().item();
  t.perceptual = perc.value().item();
  t.itss = itss.value().item();
  t.total = ops::add(ops::add(mse, ssim),
                     ops::add(ops::mul_scalar(perc, static_cast<float>(weights.alpha)),
                              ops::mul_scalar(itss, static_cast<float>(weights.beta_itss))));
  return t;
}

}  // namespace loss
}  // namespace psg
