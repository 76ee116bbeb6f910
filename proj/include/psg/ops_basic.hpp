#pragma once

// Elementwise, reduction, movement and dense linear-algebra ops with reverse
// passes. Everything accumulates (+=) into parent gradients so an input may
// appear several times in one graph.

#include <cmath>
#include <vector>

#include "psg/autograd.hpp"
#include "psg/gemm.hpp"
#include "psg/tensor.hpp"

namespace psg {

namespace ops {

// ---- elementwise binary ----

inline Var add(const Var& a, const Var& b) {
  check_same_shape(a.value(), b.value(), "add");
  Tensor out(a.value().shape());
  const float* pa = a.value().data();
  const float* pb = b.value().data();
  float* po = out.data();
  const int64_t n = out.size();
  for (int64_t i = 0; i < n; ++i) po[i] = pa[i] + pb[i];
  return make_op(std::move(out), {a, b}, [n](const Tensor& g, const std::vector<Tensor*>& pg) {
    const float* pgout = g.data();
    for (int slot = 0; slot < 2; ++slot)
      if (pg[slot]) {
        float* d = pg[slot]->data();
        for (int64_t i = 0; i < n; ++i) d[i] += pgout[i];
      }
  });
}

inline Var sub(const Var& a, const Var& b) {
  check_same_shape(a.value(), b.value(), "sub");
  Tensor out(a.value().shape());
  const float* pa = a.value().data();
  const float* pb = b.value().data();
  float* po = out.data();
  const int64_t n = out.size();
  for (int64_t i = 0; i < n; ++i) po[i] = pa[i] - pb[i];
  return make_op(std::move(out), {a, b}, [n](const Tensor& g, const std::vector<Tensor*>& pg) {
    const float* pgout = g.data();
    if (pg[0]) {
      float* d = pg[0]->data();
      for (int64_t i = 0; i < n; ++i) d[i] += pgout[i];
    }
    if (pg[1]) {
      float* d = pg[1]->data();
      for (int64_t i = 0; i < n; ++i) d[i] -= pgout[i];
    }
  });
}

inline Var mul(const Var& a, const Var& b) {
  check_same_shape(a.value(), b.value(), "mul");
  Tensor out(a.value().shape());
  Tensor va = a.value(), vb = b.value();
  const int64_t n = out.size();
  for (int64_t i = 0; i < n; ++i) out.data()[i] = va.data()[i] * vb.data()[i];
  return make_op(std::move(out), {a, b},
                 [va, vb, n](const Tensor& g, const std::vector<Tensor*>& pg) {
                   const float* pgout = g.data();
                   if (pg[0]) {
                     float* d = pg[0]->data();
                     const float* x = vb.data();
                     for (int64_t i = 0; i < n; ++i) d[i] += pgout[i] * x[i];
                   }
                   if (pg[1]) {
                     float* d = pg[1]->data();
                     const float* x = va.data();
                     for (int64_t i = 0; i < n; ++i) d[i] += pgout[i] * x[i];
                   }
                 });
}

inline Var div(const Var& a, const Var& b) {
  check_same_shape(a.value(), b.value(), "div");
  Tensor out(a.value().shape());
  Tensor va = a.value(), vb = b.value();
  const int64_t n = out.size();
  for (int64_t i = 0; i < n; ++i) out.data()[i] = va.data()[i] / vb.data()[i];
  Tensor vo = out;
  return make_op(std::move(out), {a, b},
                 [vb, vo, n](const Tensor& g, const std::vector<Tensor*>& pg) {
                   const float* pgout = g.data();
                   if (pg[0]) {
                     float* d = pg[0]->data();
                     for (int64_t i = 0; i < n; ++i) d[i] += pgout[i] / vb.data()[i];
                   }
                   if (pg[1]) {
                     float* d = pg[1]->data();
                     for (int64_t i = 0; i < n; ++i)
                       d[i] -= pgout[i] * vo.data()[i] / vb.data()[i];
                   }
                 });
}

// ---- elementwise with scalar constants ----

inline Var add_scalar(const Var& a, float s) {
  Tensor out(a.value().shape());
  const int64_t n = out.size();
  for (int64_t i = 0; i < n; ++i) out.data()[i] = a.value().data()[i] + s;
  return make_op(std::move(out), {a}, [n](const Tensor& g, const std::vector<Tensor*>& pg) {
    if (pg[0]) pg[0]->add_(g);
  });
}

inline Var mul_scalar(const Var& a, float s) {
  Tensor out(a.value().shape());
  const int64_t n = out.size();
  for (int64_t i = 0; i < n; ++i) out.data()[i] = a.value().data()[i] * s;
  return make_op(std::move(out), {a}, [s](const Tensor& g, const std::vector<Tensor*>& pg) {
    if (pg[0]) pg[0]->add_(g, s);
  });
}

// ---- elementwise unary ----

namespace detail {

template <class Fwd, class Bwd>
Var unary_op(const Var& a, Fwd fwd, Bwd bwd_from_input) {
  Tensor out(a.value().shape());
  Tensor vin = a.value();
  const int64_t n = out.size();
  for (int64_t i = 0; i < n; ++i) out.data()[i] = fwd(vin.data()[i]);
  return make_op(std::move(out), {a},
                 [vin, bwd_from_input, n](const Tensor& g, const std::vector<Tensor*>& pg) {
                   if (!pg[0]) return;
                   float* d = pg[0]->data();
                   const float* x = vin.data();
                   const float* go = g.data();
                   for (int64_t i = 0; i < n; ++i) d[i] += go[i] * bwd_from_input(x[i]);
                 });
}

}  // namespace detail

inline Var relu(const Var& a) {
  return detail::unary_op(
      a, [](float x) { return x > 0.0f ? x : 0.0f; },
      [](float x) { return x > 0.0f ? 1.0f : 0.0f; });
}

namespace detail {
inline constexpr float kGeluC1 = 0.7978845608028654f;  // sqrt(2/pi)
inline constexpr float kGeluC2 = 0.044715f;
}  // namespace detail

// tanh-form GELU; bulk Eigen expressions keep the tanh vectorized
inline Var gelu(const Var& a) {
  constexpr float kC1 = detail::kGeluC1;
  constexpr float kC2 = detail::kGeluC2;
  Tensor out(a.value().shape());
  Tensor vin = a.value();
  const int64_t n = out.size();
  {
    Eigen::Map<const Eigen::ArrayXf> x(vin.data(), n);
    Eigen::Map<Eigen::ArrayXf> y(out.data(), n);
    y = 0.5f * x * (1.0f + (kC1 * (x + kC2 * x.cube())).tanh());
  }
  return make_op(std::move(out), {a}, [vin, n](const Tensor& g, const std::vector<Tensor*>& pg) {
    if (!pg[0]) return;
    constexpr float c1 = detail::kGeluC1;
    constexpr float c2 = detail::kGeluC2;
    Eigen::Map<const Eigen::ArrayXf> x(vin.data(), n);
    Eigen::Map<const Eigen::ArrayXf> go(g.data(), n);
    Eigen::Map<Eigen::ArrayXf> dx(pg[0]->data(), n);
    const Eigen::ArrayXf t = (c1 * (x + c2 * x.cube())).tanh();
    dx += go * (0.5f * (1.0f + t) +
                0.5f * x * (1.0f - t.square()) * (c1 * (1.0f + 3.0f * c2 * x.square())));
  });
}

inline Var sigmoid(const Var& a) {
  Tensor out(a.value().shape());
  const int64_t n = out.size();
  for (int64_t i = 0; i < n; ++i) {
    const float x = a.value().data()[i];
    out.data()[i] = 1.0f / (1.0f + std::exp(-x));
  }
  Tensor vo = out;
  return make_op(std::move(out), {a}, [vo, n](const Tensor& g, const std::vector<Tensor*>& pg) {
    if (!pg[0]) return;
    float* d = pg[0]->data();
    for (int64_t i = 0; i < n; ++i) {
      const float y = vo.data()[i];
      d[i] += g.data()[i] * y * (1.0f - y);
    }
  });
}

// softplus(x) + floor, the positivity activation for illumination maps
inline Var softplus(const Var& a, float floor = 0.0f) {
  return detail::unary_op(
      a,
      [floor](float x) {
        const float sp = x > 20.0f ? x : std::log1p(std::exp(x));
        return sp + floor;
      },
      [](float x) { return 1.0f / (1.0f + std::exp(-x)); });
}

inline Var abs(const Var& a) {
  return detail::unary_op(
      a, [](float x) { return std::fabs(x); },
      [](float x) { return x > 0.0f ? 1.0f : (x < 0.0f ? -1.0f : 0.0f); });
}

inline Var sqrt(const Var& a) {
  Tensor out(a.value().shape());
  const int64_t n = out.size();
  for (int64_t i = 0; i < n; ++i) out.data()[i] = std::sqrt(a.value().data()[i]);
  Tensor vo = out;
  return make_op(std::move(out), {a}, [vo, n](const Tensor& g, const std::vector<Tensor*>& pg) {
    if (!pg[0]) return;
    float* d = pg[0]->data();
    for (int64_t i = 0; i < n; ++i) d[i] += g.data()[i] * 0.5f / vo.data()[i];
  });
}

inline Var square(const Var& a) {
  return detail::unary_op(
      a, [](float x) { return x * x; }, [](float x) { return 2.0f * x; });
}

// clamp to [0,1]; zero gradient outside the open interval
inline Var clamp01(const Var& a) {
  return detail::unary_op(
      a, [](float x) { return x < 0.0f ? 0.0f : (x > 1.0f ? 1.0f : x); },
      [](float x) { return (x > 0.0f && x < 1.0f) ? 1.0f : 0.0f; });
}

// ---- reductions ----

inline Var sum_all(const Var& a) {
  Tensor out({1});
  out.data()[0] = static_cast<float>(a.value().sum_double());
  const int64_t n = a.value().size();
  return make_op(std::move(out), {a}, [n](const Tensor& g, const std::vector<Tensor*>& pg) {
    if (!pg[0]) return;
    const float go = g.data()[0];
    float* d = pg[0]->data();
    for (int64_t i = 0; i < n; ++i) d[i] += go;
  });
}

inline Var mean_all(const Var& a) {
  const int64_t n = a.value().size();
  Tensor out({1});
  out.data()[0] = static_cast<float>(a.value().sum_double() / static_cast<double>(n));
  return make_op(std::move(out), {a}, [n](const Tensor& g, const std::vector<Tensor*>& pg) {
    if (!pg[0]) return;
    const float go = g.data()[0] / static_cast<float>(n);
    float* d = pg[0]->data();
    for (int64_t i = 0; i < n; ++i) d[i] += go;
  });
}

inline Var dot(const Var& a, const Var& b) {
  check_same_shape(a.value(), b.value(), "dot");
  const int64_t n = a.value().size();
  double s = 0.0;
  for (int64_t i = 0; i < n; ++i)
    s += static_cast<double>(a.value().data()[i]) * b.value().data()[i];
  Tensor out({1});
  out.data()[0] = static_cast<float>(s);
  Tensor va = a.value(), vb = b.value();
  return make_op(std::move(out), {a, b},
                 [va, vb, n](const Tensor& g, const std::vector<Tensor*>& pg) {
                   const float go = g.data()[0];
                   if (pg[0]) {
                     float* d = pg[0]->data();
                     for (int64_t i = 0; i < n; ++i) d[i] += go * vb.data()[i];
                   }
                   if (pg[1]) {
                     float* d = pg[1]->data();
                     for (int64_t i = 0; i < n; ++i) d[i] += go * va.data()[i];
                   }
                 });
}

// mean over rows: [T, D] -> [D]
inline Var mean_rows(const Var& a) {
  const int t = a.value().dim(0), d = a.value().dim(1);
  Tensor out = Tensor::zeros({d});
  const float* p = a.value().data();
  for (int r = 0; r < t; ++r)
    for (int c = 0; c < d; ++c) out.data()[c] += p[r * d + c];
  const float inv = 1.0f / static_cast<float>(t);
  for (int c = 0; c < d; ++c) out.data()[c] *= inv;
  return make_op(std::move(out), {a}, [t, d, inv](const Tensor& g, const std::vector<Tensor*>& pg) {
    if (!pg[0]) return;
    float* dst = pg[0]->data();
    for (int r = 0; r < t; ++r)
      for (int c = 0; c < d; ++c) dst[r * d + c] += g.data()[c] * inv;
  });
}

// global average pool: [C, H, W] -> [C]
inline Var gap_chw(const Var& a) {
  const int c = a.value().dim(0);
  const int hw = a.value().dim(1) * a.value().dim(2);
  Tensor out({c});
  const float* p = a.value().data();
  for (int ch = 0; ch < c; ++ch) {
    double s = 0.0;
    for (int i = 0; i < hw; ++i) s += p[ch * hw + i];
    out.data()[ch] = static_cast<float>(s / hw);
  }
  return make_op(std::move(out), {a}, [c, hw](const Tensor& g, const std::vector<Tensor*>& pg) {
    if (!pg[0]) return;
    float* d = pg[0]->data();
    for (int ch = 0; ch < c; ++ch) {
      const float go = g.data()[ch] / static_cast<float>(hw);
      for (int i = 0; i < hw; ++i) d[ch * hw + i] += go;
    }
  });
}

// ---- movement ----

inline Var reshape(const Var& a, std::vector<int> shape) {
  Tensor out = a.value().view(std::move(shape));
  return make_op(std::move(out), {a}, [](const Tensor& g, const std::vector<Tensor*>& pg) {
    if (pg[0]) pg[0]->add_(g);  // same element order
  });
}

inline Var concat_rows(const std::vector<Var>& parts) {
  if (parts.empty()) throw Error(ErrorCode::Internal, "concat of nothing");
  const int d = parts[0].value().dim(1);
  int total = 0;
  for (const auto& p : parts) {
    if (p.value().ndim() != 2 || p.value().dim(1) != d)
      throw Error(ErrorCode::DimMismatch, "concat_rows: inner dims differ");
    total += p.value().dim(0);
  }
  Tensor out({total, d});
  std::vector<int> row_of(parts.size());
  int r = 0;
  for (size_t i = 0; i < parts.size(); ++i) {
    row_of[i] = r;
    const Tensor& v = parts[i].value();
    std::memcpy(out.data() + static_cast<int64_t>(r) * d, v.data(), sizeof(float) * v.size());
    r += v.dim(0);
  }
  std::vector<Var> inputs(parts.begin(), parts.end());
  std::vector<int> rows(parts.size());
  for (size_t i = 0; i < parts.size(); ++i) rows[i] = parts[i].value().dim(0);
  return make_op(std::move(out), std::move(inputs),
                 [row_of, rows, d](const Tensor& g, const std::vector<Tensor*>& pg) {
                   for (size_t i = 0; i < pg.size(); ++i) {
                     if (!pg[i]) continue;
                     const float* src = g.data() + static_cast<int64_t>(row_of[i]) * d;
                     float* dst = pg[i]->data();
                     const int64_t n = static_cast<int64_t>(rows[i]) * d;
                     for (int64_t j = 0; j < n; ++j) dst[j] += src[j];
                   }
                 });
}

// rows [r0, r1) of a [T, D] tensor
inline Var slice_rows(const Var& a, int r0, int r1) {
  const int t = a.value().dim(0), d = a.value().dim(1);
  if (r0 < 0 || r1 > t || r0 >= r1) throw Error(ErrorCode::Internal, "slice_rows range");
  Tensor out({r1 - r0, d});
  std::memcpy(out.data(), a.value().data() + static_cast<int64_t>(r0) * d,
              sizeof(float) * out.size());
  return make_op(std::move(out), {a}, [r0, r1, d](const Tensor& g, const std::vector<Tensor*>& pg) {
    if (!pg[0]) return;
    float* dst = pg[0]->data() + static_cast<int64_t>(r0) * d;
    const float* src = g.data();
    const int64_t n = static_cast<int64_t>(r1 - r0) * d;
    for (int64_t i = 0; i < n; ++i) dst[i] += src[i];
  });
}

// channel concat: list of [Ci, H, W] -> [sum Ci, H, W]
inline Var concat_channels(const std::vector<Var>& parts) {
  if (parts.empty()) throw Error(ErrorCode::Internal, "concat of nothing");
  const int h = parts[0].value().dim(1), w = parts[0].value().dim(2);
  int ctot = 0;
  for (const auto& p : parts) {
    if (p.value().ndim() != 3 || p.value().dim(1) != h || p.value().dim(2) != w)
      throw Error(ErrorCode::ShapeMismatch, "concat_channels: spatial dims differ");
    ctot += p.value().dim(0);
  }
  Tensor out({ctot, h, w});
  int64_t off = 0;
  std::vector<int64_t> offsets(parts.size());
  std::vector<int64_t> sizes(parts.size());
  for (size_t i = 0; i < parts.size(); ++i) {
    offsets[i] = off;
    sizes[i] = parts[i].value().size();
    std::memcpy(out.data() + off, parts[i].value().data(), sizeof(float) * sizes[i]);
    off += sizes[i];
  }
  std::vector<Var> inputs(parts.begin(), parts.end());
  return make_op(std::move(out), std::move(inputs),
                 [offsets, sizes](const Tensor& g, const std::vector<Tensor*>& pg) {
                   for (size_t i = 0; i < pg.size(); ++i) {
                     if (!pg[i]) continue;
                     float* d = pg[i]->data();
                     const float* src = g.data() + offsets[i];
                     for (int64_t j = 0; j < sizes[i]; ++j) d[j] += src[j];
                   }
                 });
}

// [C, H, W] -> row-major token matrix [H*W, C]
inline Var chw_to_tokens(const Var& a) {
  const int c = a.value().dim(0), h = a.value().dim(1), w = a.value().dim(2);
  const int hw = h * w;
  Tensor out({hw, c});
  const float* p = a.value().data();
  for (int ch = 0; ch < c; ++ch)
    for (int i = 0; i < hw; ++i) out.data()[static_cast<int64_t>(i) * c + ch] = p[ch * hw + i];
  return make_op(std::move(out), {a}, [c, hw](const Tensor& g, const std::vector<Tensor*>& pg) {
    if (!pg[0]) return;
    float* d = pg[0]->data();
    const float* src = g.data();
    for (int ch = 0; ch < c; ++ch)
      for (int i = 0; i < hw; ++i) d[ch * hw + i] += src[static_cast<int64_t>(i) * c + ch];
  });
}

// [H*W, C] tokens -> [C, H, W]
inline Var tokens_to_chw(const Var& a, int h, int w) {
  const int hw = a.value().dim(0), c = a.value().dim(1);
  if (hw != h * w) throw Error(ErrorCode::Internal, "tokens_to_chw size");
  Tensor out({c, h, w});
  const float* p = a.value().data();
  for (int ch = 0; ch < c; ++ch)
    for (int i = 0; i < hw; ++i) out.data()[ch * hw + i] = p[static_cast<int64_t>(i) * c + ch];
  return make_op(std::move(out), {a}, [c, hw](const Tensor& g, const std::vector<Tensor*>& pg) {
    if (!pg[0]) return;
    float* d = pg[0]->data();
    const float* src = g.data();
    for (int ch = 0; ch < c; ++ch)
      for (int i = 0; i < hw; ++i) d[static_cast<int64_t>(i) * c + ch] += src[ch * hw + i];
  });
}

// [C, H, W] -> column token batch [W, H, C] (each of the W columns becomes a
// sequence of H tokens); exact inverse provided below
inline Var chw_to_coltokens(const Var& a) {
  const int c = a.value().dim(0), h = a.value().dim(1), w = a.value().dim(2);
  Tensor out({w, h, c});
  const float* p = a.value().data();
  for (int ch = 0; ch < c; ++ch)
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x)
        out.data()[(static_cast<int64_t>(x) * h + y) * c + ch] =
            p[(static_cast<int64_t>(ch) * h + y) * w + x];
  return make_op(std::move(out), {a}, [c, h, w](const Tensor& g, const std::vector<Tensor*>& pg) {
    if (!pg[0]) return;
    float* d = pg[0]->data();
    const float* src = g.data();
    for (int ch = 0; ch < c; ++ch)
      for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x)
          d[(static_cast<int64_t>(ch) * h + y) * w + x] +=
              src[(static_cast<int64_t>(x) * h + y) * c + ch];
  });
}

inline Var coltokens_to_chw(const Var& a, int h, int w) {
  const int c = a.value().dim(2);
  if (a.value().dim(0) != w || a.value().dim(1) != h)
    throw Error(ErrorCode::Internal, "coltokens_to_chw size");
  Tensor out({c, h, w});
  const float* p = a.value().data();
  for (int ch = 0; ch < c; ++ch)
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x)
        out.data()[(static_cast<int64_t>(ch) * h + y) * w + x] =
            p[(static_cast<int64_t>(x) * h + y) * c + ch];
  return make_op(std::move(out), {a}, [c, h, w](const Tensor& g, const std::vector<Tensor*>& pg) {
    if (!pg[0]) return;
    float* d = pg[0]->data();
    const float* src = g.data();
    for (int ch = 0; ch < c; ++ch)
      for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x)
          d[(static_cast<int64_t>(x) * h + y) * c + ch] +=
              src[(static_cast<int64_t>(ch) * h + y) * w + x];
  });
}

// ---- linear algebra ----

inline Var matmul(const Var& a, const Var& b) {
  const int m = a.value().dim(0), k = a.value().dim(1);
  if (b.value().dim(0) != k) throw Error(ErrorCode::DimMismatch, "matmul inner dims");
  const int n = b.value().dim(1);
  Tensor out({m, n});
  gemm(a.value().data(), b.value().data(), out.data(), m, k, n);
  Tensor va = a.value(), vb = b.value();
  return make_op(std::move(out), {a, b},
                 [va, vb, m, k, n](const Tensor& g, const std::vector<Tensor*>& pg) {
                   if (pg[0]) gemm_bt(g.data(), vb.data(), pg[0]->data(), m, n, k, true);
                   if (pg[1]) gemm_at(va.data(), g.data(), pg[1]->data(), k, m, n, true);
                 });
}

// x [..., In] * w^T [In, Out] + b; w stored [Out, In]; leading dims preserved
inline Var linear(const Var& x, const Var& w, const Var& b) {
  if (x.value().ndim() < 1) throw Error(ErrorCode::DimMismatch, "linear input rank");
  const int in = x.value().dim(x.value().ndim() - 1);
  const int t = static_cast<int>(x.value().size() / in);
  const int out_dim = w.value().dim(0);
  if (w.value().dim(1) != in) throw Error(ErrorCode::DimMismatch, "linear weight dims");
  std::vector<int> out_shape = x.value().shape();
  out_shape.back() = out_dim;
  Tensor out(out_shape);
  gemm_bt(x.value().data(), w.value().data(), out.data(), t, in, out_dim);
  const bool has_bias = b.defined();
  if (has_bias) {
    const float* pb = b.value().data();
    for (int r = 0; r < t; ++r) {
      float* row = out.data() + static_cast<int64_t>(r) * out_dim;
      for (int c = 0; c < out_dim; ++c) row[c] += pb[c];
    }
  }
  Tensor vx = x.value(), vw = w.value();
  std::vector<Var> inputs = has_bias ? std::vector<Var>{x, w, b} : std::vector<Var>{x, w};
  return make_op(std::move(out), std::move(inputs),
                 [vx, vw, t, in, out_dim](const Tensor& g, const std::vector<Tensor*>& pg) {
                   if (pg[0]) gemm(g.data(), vw.data(), pg[0]->data(), t, out_dim, in, true);
                   if (pg[1]) gemm_at(g.data(), vx.data(), pg[1]->data(), out_dim, t, in, true);
                   if (pg.size() > 2 && pg[2]) {
                     float* d = pg[2]->data();
                     for (int r = 0; r < t; ++r) {
                       const float* row = g.data() + static_cast<int64_t>(r) * out_dim;
                       for (int c = 0; c < out_dim; ++c) d[c] += row[c];
                     }
                   }
                 });
}

// ---- normalization ----

// per-row layer norm over the last dim of [..., D] with affine
inline Var layer_norm(const Var& x, const Var& gain, const Var& bias, float eps = 1e-5f) {
  const int d = x.value().dim(x.value().ndim() - 1);
  const int t = static_cast<int>(x.value().size() / d);
  if (gain.value().size() != d || bias.value().size() != d)
    throw Error(ErrorCode::DimMismatch, "layer_norm affine dims");
  Tensor out(x.value().shape());
  Tensor xhat({t, d});
  Tensor inv_std({t});
  const float* px = x.value().data();
  const float* pgain = gain.value().data();
  const float* pbias = bias.value().data();
  for (int r = 0; r < t; ++r) {
    const float* row = px + static_cast<int64_t>(r) * d;
    float mean = 0.0f;
    for (int c = 0; c < d; ++c) mean += row[c];
    mean /= static_cast<float>(d);
    float var = 0.0f;
    for (int c = 0; c < d; ++c) {
      const float dv = row[c] - mean;
      var += dv * dv;
    }
    var /= static_cast<float>(d);
    const float is = 1.0f / std::sqrt(var + eps);
    inv_std.data()[r] = is;
    float* xh = xhat.data() + static_cast<int64_t>(r) * d;
    float* o = out.data() + static_cast<int64_t>(r) * d;
    for (int c = 0; c < d; ++c) {
      xh[c] = (row[c] - mean) * is;
      o[c] = xh[c] * pgain[c] + pbias[c];
    }
  }
  Tensor vgain = gain.value();
  return make_op(std::move(out), {x, gain, bias},
                 [xhat, inv_std, vgain, t, d](const Tensor& g, const std::vector<Tensor*>& pg) {
                   for (int r = 0; r < t; ++r) {
                     const float* go = g.data() + static_cast<int64_t>(r) * d;
                     const float* xh = xhat.data() + static_cast<int64_t>(r) * d;
                     if (pg[1]) {
                       float* dg = pg[1]->data();
                       for (int c = 0; c < d; ++c) dg[c] += go[c] * xh[c];
                     }
                     if (pg[2]) {
                       float* db = pg[2]->data();
                       for (int c = 0; c < d; ++c) db[c] += go[c];
                     }
                     if (pg[0]) {
                       // dxhat = go * gain; dx = (dxhat - mean(dxhat) - xhat*mean(dxhat*xhat)) * inv_std
                       float sum_dxh = 0.0f, sum_dxh_xh = 0.0f;
                       for (int c = 0; c < d; ++c) {
                         const float dxh = go[c] * vgain.data()[c];
                         sum_dxh += dxh;
                         sum_dxh_xh += dxh * xh[c];
                       }
                       const float m1 = sum_dxh / static_cast<float>(d);
                       const float m2 = sum_dxh_xh / static_cast<float>(d);
                       float* dx = pg[0]->data() + static_cast<int64_t>(r) * d;
                       const float is = inv_std.data()[r];
                       for (int c = 0; c < d; ++c) {
                         const float dxh = go[c] * vgain.data()[c];
                         dx[c] += (dxh - m1 - xh[c] * m2) * is;
                       }
                     }
                   }
                 });
}

// per-channel normalization over spatial positions of [C, H, W] with affine;
// batch-norm semantics at batch size one (per-sample statistics)
inline Var spatial_norm(const Var& x, const Var& gain, const Var& bias, float eps = 1e-5f) {
  const int c = x.value().dim(0), h = x.value().dim(1), w = x.value().dim(2);
  const int hw = h * w;
  if (gain.value().size() != c || bias.value().size() != c)
    throw Error(ErrorCode::DimMismatch, "spatial_norm affine dims");
  Tensor out({c, h, w});
  Tensor xhat({c, h, w});
  Tensor inv_std({c});
  const float* px = x.value().data();
  for (int ch = 0; ch < c; ++ch) {
    const float* plane = px + static_cast<int64_t>(ch) * hw;
    double mean = 0.0;
    for (int i = 0; i < hw; ++i) mean += plane[i];
    mean /= hw;
    double var = 0.0;
    for (int i = 0; i < hw; ++i) {
      const double dv = plane[i] - mean;
      var += dv * dv;
    }
    var /= hw;
    const float is = 1.0f / std::sqrt(static_cast<float>(var) + eps);
    inv_std.data()[ch] = is;
    const float m = static_cast<float>(mean);
    const float gn = gain.value().data()[ch], bs = bias.value().data()[ch];
    float* xh = xhat.data() + static_cast<int64_t>(ch) * hw;
    float* o = out.data() + static_cast<int64_t>(ch) * hw;
    for (int i = 0; i < hw; ++i) {
      xh[i] = (plane[i] - m) * is;
      o[i] = xh[i] * gn + bs;
    }
  }
  Tensor vgain = gain.value();
  return make_op(std::move(out), {x, gain, bias},
                 [xhat, inv_std, vgain, c, hw](const Tensor& g, const std::vector<Tensor*>& pg) {
                   for (int ch = 0; ch < c; ++ch) {
                     const float* go = g.data() + static_cast<int64_t>(ch) * hw;
                     const float* xh = xhat.data() + static_cast<int64_t>(ch) * hw;
                     if (pg[1]) {
                       double s = 0.0;
                       for (int i = 0; i < hw; ++i) s += static_cast<double>(go[i]) * xh[i];
                       pg[1]->data()[ch] += static_cast<float>(s);
                     }
                     if (pg[2]) {
                       double s = 0.0;
                       for (int i = 0; i < hw; ++i) s += go[i];
                       pg[2]->data()[ch] += static_cast<float>(s);
                     }
                     if (pg[0]) {
                       const float gn = vgain.data()[ch];
                       double sum_dxh = 0.0, sum_dxh_xh = 0.0;
                       for (int i = 0; i < hw; ++i) {
                         const float dxh = go[i] * gn;
                         sum_dxh += dxh;
                         sum_dxh_xh += static_cast<double>(dxh) * xh[i];
                       }
                       const float m1 = static_cast<float>(sum_dxh / hw);
                       const float m2 = static_cast<float>(sum_dxh_xh / hw);
                       const float is = inv_std.data()[ch];
                       float* dx = pg[0]->data() + static_cast<int64_t>(ch) * hw;
                       for (int i = 0; i < hw; ++i) {
                         const float dxh = go[i] * gn;
                         dx[i] += (dxh - m1 - xh[i] * m2) * is;
                       }
                     }
                   }
                 });
}

// FiLM: y[c,h,w] = x[c,h,w] * gamma[c] + beta[c]
inline Var channel_affine(const Var& x, const Var& gamma, const Var& beta) {
  const int c = x.value().dim(0), h = x.value().dim(1), w = x.value().dim(2);
  const int hw = h * w;
  if (gamma.value().size() != c || beta.value().size() != c)
    throw Error(ErrorCode::DimMismatch, "channel_affine dims");
  Tensor out({c, h, w});
  const float* px = x.value().data();
  for (int ch = 0; ch < c; ++ch) {
    const float gm = gamma.value().data()[ch], bt = beta.value().data()[ch];
    const float* plane = px + static_cast<int64_t>(ch) * hw;
    float* o = out.data() + static_cast<int64_t>(ch) * hw;
    for (int i = 0; i < hw; ++i) o[i] = plane[i] * gm + bt;
  }
  Tensor vx = x.value(), vgamma = gamma.value();
  return make_op(std::move(out), {x, gamma, beta},
                 [vx, vgamma, c, hw](const Tensor& g, const std::vector<Tensor*>& pg) {
                   for (int ch = 0; ch < c; ++ch) {
                     const float* go = g.data() + static_cast<int64_t>(ch) * hw;
                     if (pg[0]) {
                       const float gm = vgamma.data()[ch];
                       float* dx = pg[0]->data() + static_cast<int64_t>(ch) * hw;
                       for (int i = 0; i < hw; ++i) dx[i] += go[i] * gm;
                     }
                     if (pg[1]) {
                       const float* plane = vx.data() + static_cast<int64_t>(ch) * hw;
                       double s = 0.0;
                       for (int i = 0; i < hw; ++i) s += static_cast<double>(go[i]) * plane[i];
                       pg[1]->data()[ch] += static_cast<float>(s);
                     }
                     if (pg[2]) {
                       double s = 0.0;
                       for (int i = 0; i < hw; ++i) s += go[i];
                       pg[2]->data()[ch] += static_cast<float>(s);
                     }
                   }
                 });
}

// multiply by a constant (non-differentiable) mask broadcast across channels;
// mask is [1, H, W] or [H, W]
inline Var mask_mul(const Var& x, const Tensor& mask) {
  const int c = x.value().dim(0), h = x.value().dim(1), w = x.value().dim(2);
  const int hw = h * w;
  if (mask.size() != hw) throw Error(ErrorCode::ShapeMismatch, "mask_mul: mask size");
  Tensor out({c, h, w});
  const float* px = x.value().data();
  const float* pm = mask.data();
  for (int ch = 0; ch < c; ++ch) {
    const float* plane = px + static_cast<int64_t>(ch) * hw;
    float* o = out.data() + static_cast<int64_t>(ch) * hw;
    for (int i = 0; i < hw; ++i) o[i] = plane[i] * pm[i];
  }
  Tensor vm = mask;
  return make_op(std::move(out), {x}, [vm, c, hw](const Tensor& g, const std::vector<Tensor*>& pg) {
    if (!pg[0]) return;
    const float* pm = vm.data();
    for (int ch = 0; ch < c; ++ch) {
      const float* go = g.data() + static_cast<int64_t>(ch) * hw;
      float* dx = pg[0]->data() + static_cast<int64_t>(ch) * hw;
      for (int i = 0; i < hw; ++i) dx[i] += go[i] * pm[i];
    }
  });
}

}  // namespace ops

}  // namespace psg
