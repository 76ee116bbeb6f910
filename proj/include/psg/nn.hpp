#pragma once

#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "psg/autograd.hpp"
#include "psg/ops_attention.hpp"
#include "psg/ops_basic.hpp"
#include "psg/ops_image.hpp"
#include "psg/rng.hpp"
#include "psg/tensor.hpp"

namespace psg {
namespace nn {

enum class Init { FanInUniform, Zeros, Ones, SmallNormal };

// Ordered registry of trainable parameters. Each tensor is initialized from a
// stream seeded by (master seed, name), so values do not depend on
// registration order.
class ParamStore {
 public:
  explicit ParamStore(uint64_t seed = 0) : seed_(seed) {}

  Var param(const std::string& name, std::vector<int> shape, Init init, int fan_in = 0) {
    if (index_.count(name)) throw Error(ErrorCode::Internal, "duplicate parameter: " + name);
    Tensor t(shape);
    Rng rng(mix_seed(seed_, fnv1a(name)));
    switch (init) {
      case Init::FanInUniform: {
        const float bound = fan_in > 0 ? 1.0f / std::sqrt(static_cast<float>(fan_in)) : 0.05f;
        for (int64_t i = 0; i < t.size(); ++i) t.data()[i] = rng.uniform(-bound, bound);
        break;
      }
      case Init::Zeros:
        t.fill(0.0f);
        break;
      case Init::Ones:
        t.fill(1.0f);
        break;
      case Init::SmallNormal:
        for (int64_t i = 0; i < t.size(); ++i) t.data()[i] = 0.02f * rng.normal();
        break;
    }
    Var v = Var::leaf(std::move(t), /*param=*/true);
    index_[name] = items_.size();
    items_.emplace_back(name, v);
    return v;
  }

  size_t size() const { return items_.size(); }
  const std::vector<std::pair<std::string, Var>>& items() const { return items_; }

  Var* find(const std::string& name) {
    auto it = index_.find(name);
    return it == index_.end() ? nullptr : &items_[it->second].second;
  }

  int64_t total_elements() const {
    int64_t n = 0;
    for (const auto& [name, v] : items_) n += v.value().size();
    return n;
  }

  uint64_t seed() const { return seed_; }

 private:
  uint64_t seed_;
  std::vector<std::pair<std::string, Var>> items_;
  std::unordered_map<std::string, size_t> index_;
};

struct Linear {
  Var w, b;
  bool has_bias = true;

  Linear() = default;
  Linear(ParamStore& ps, const std::string& name, int in, int out, bool bias = true)
      : has_bias(bias) {
    w = ps.param(name + ".w", {out, in}, Init::FanInUniform, in);
    if (bias) b = ps.param(name + ".b", {out}, Init::Zeros);
  }

  // [T, in] -> [T, out]
  Var forward(const Var& x) const { return ops::linear(x, w, has_bias ? b : Var()); }
};

struct Conv2d {
  Var w, b;
  int stride = 1, pad = 1;

  Conv2d() = default;
  Conv2d(ParamStore& ps, const std::string& name, int cin, int cout, int k, int stride_ = 1,
         int pad_ = 1)
      : stride(stride_), pad(pad_) {
    w = ps.param(name + ".w", {cout, cin, k, k}, Init::FanInUniform, cin * k * k);
    b = ps.param(name + ".b", {cout}, Init::Zeros);
  }

  Var forward(const Var& x) const { return ops::conv2d(x, w, b, stride, pad); }
};

struct LayerNorm {
  Var g, b;

  LayerNorm() = default;
  LayerNorm(ParamStore& ps, const std::string& name, int dim) {
    g = ps.param(name + ".g", {dim}, Init::Ones);
    b = ps.param(name + ".b", {dim}, Init::Zeros);
  }

  Var forward(const Var& x) const { return ops::layer_norm(x, g, b); }
};

// batch normalization over spatial positions; statistics are per sample
// (forward passes here run one image at a time)
struct BatchNorm2d {
  Var g, b;

  BatchNorm2d() = default;
  BatchNorm2d(ParamStore& ps, const std::string& name, int channels) {
    g = ps.param(name + ".g", {channels}, Init::Ones);
    b = ps.param(name + ".b", {channels}, Init::Zeros);
  }

  Var forward(const Var& x) const { return ops::spatial_norm(x, g, b); }
};

// Multi-head attention block: projections + scaled dot-product core.
// Query tokens may live in a different width than key/value tokens.
struct Mha {
  Linear wq, wk, wv, wo;
  int heads = 1;
  int dim = 0;

  Mha() = default;
  Mha(ParamStore& ps, const std::string& name, int q_dim, int kv_dim, int model_dim, int heads_)
      : heads(heads_), dim(model_dim) {
    wq = Linear(ps, name + ".q", q_dim, model_dim);
    wk = Linear(ps, name + ".k", kv_dim, model_dim);
    wv = Linear(ps, name + ".v", kv_dim, model_dim);
    wo = Linear(ps, name + ".o", model_dim, model_dim);
  }

  // q [B, Tq, Dq] or [Tq, Dq]; kv likewise -> same rank, model_dim wide
  Var forward(const Var& q_in, const Var& kv_in) const {
    Var q = wq.forward(q_in);
    Var k = wk.forward(kv_in);
    Var v = wv.forward(kv_in);
    return wo.forward(ops::scaled_dot_attention(q, k, v, heads));
  }

  Var forward2d(const Var& q2, const Var& kv2) const { return forward(q2, kv2); }
};

struct FeedForward {
  Linear fc1, fc2;

  FeedForward() = default;
  FeedForward(ParamStore& ps, const std::string& name, int dim, int hidden) {
    fc1 = Linear(ps, name + ".fc1", dim, hidden);
    fc2 = Linear(ps, name + ".fc2", hidden, dim);
  }

  Var forward(const Var& x) const { return fc2.forward(ops::gelu(fc1.forward(x))); }
};

// Pre-norm transformer encoder layer on a [T, D] token sequence.
struct TransformerLayer {
  LayerNorm ln1, ln2;
  Mha attn;
  FeedForward ff;

  TransformerLayer() = default;
  TransformerLayer(ParamStore& ps, const std::string& name, int dim, int heads, int ff_hidden) {
    ln1 = LayerNorm(ps, name + ".ln1", dim);
    ln2 = LayerNorm(ps, name + ".ln2", dim);
    attn = Mha(ps, name + ".mha", dim, dim, dim, heads);
    ff = FeedForward(ps, name + ".ff", dim, ff_hidden);
  }

  Var forward(const Var& x) const {
    Var n = ln1.forward(x);
    Var y = ops::add(x, attn.forward2d(n, n));
    return ops::add(y, ff.forward(ln2.forward(y)));
  }
};

}  // namespace nn
}  // namespace psg
