#pragma once

// Spatial ops on [C, H, W] feature maps: convolution (im2col + GEMM),
// adaptive average pooling, bilinear / nearest resampling, and a fixed-kernel
// depthwise blur used by the structural-similarity loss.

#include <algorithm>
#include <cmath>
#include <cstring>
#include <vector>

#include "psg/autograd.hpp"
#include "psg/gemm.hpp"
#include "psg/tensor.hpp"

namespace psg {
namespace ops {

namespace detail {

// Output positions are processed in row chunks so the patch matrix stays
// cache-resident; it is rebuilt in the backward pass rather than saved.
// Patches are kept transposed, [Cin*kh*kw, chunk positions], which turns each
// kernel-tap row into a contiguous copy of an input line segment.
constexpr int kConvChunkRows = 4;

using StridedMap = Eigen::Map<EigenRowMat, 0, Eigen::OuterStride<>>;
using CStridedMap = Eigen::Map<const EigenRowMat, 0, Eigen::OuterStride<>>;

inline void im2col_t_rows(const float* x, int cin, int h, int w, int kh, int kw, int stride,
                          int pad, int wout, int oy0, int oy1, float* patches_t) {
  const int m = (oy1 - oy0) * wout;
  for (int c = 0; c < cin; ++c) {
    const float* plane = x + static_cast<int64_t>(c) * h * w;
    for (int ky = 0; ky < kh; ++ky) {
      for (int kx = 0; kx < kw; ++kx) {
        float* row = patches_t + (static_cast<int64_t>(c) * kh * kw + ky * kw + kx) * m;
        for (int oy = oy0; oy < oy1; ++oy) {
          float* seg = row + static_cast<int64_t>(oy - oy0) * wout;
          const int iy = oy * stride + ky - pad;
          if (iy < 0 || iy >= h) {
            std::fill(seg, seg + wout, 0.0f);
            continue;
          }
          const float* line = plane + static_cast<int64_t>(iy) * w;
          if (stride == 1) {
            // contiguous slice with zeroed out-of-range edges
            const int shift = kx - pad;
            const int lo = std::max(0, -shift);           // first valid ox
            const int hi = std::min(wout, w - shift);     // one past last valid ox
            for (int ox = 0; ox < lo; ++ox) seg[ox] = 0.0f;
            if (hi > lo)
              std::memcpy(seg + lo, line + lo + shift, sizeof(float) * (hi - lo));
            for (int ox = hi; ox < wout; ++ox) seg[ox] = 0.0f;
          } else {
            for (int ox = 0; ox < wout; ++ox) {
              const int ix = ox * stride + kx - pad;
              seg[ox] = (ix < 0 || ix >= w) ? 0.0f : line[ix];
            }
          }
        }
      }
    }
  }
}

inline void col2im_t_rows_add(const float* dpatches_t, int cin, int h, int w, int kh, int kw,
                              int stride, int pad, int wout, int oy0, int oy1, float* dx) {
  const int m = (oy1 - oy0) * wout;
  for (int c = 0; c < cin; ++c) {
    float* plane = dx + static_cast<int64_t>(c) * h * w;
    for (int ky = 0; ky < kh; ++ky) {
      for (int kx = 0; kx < kw; ++kx) {
        const float* row = dpatches_t + (static_cast<int64_t>(c) * kh * kw + ky * kw + kx) * m;
        for (int oy = oy0; oy < oy1; ++oy) {
          const float* seg = row + static_cast<int64_t>(oy - oy0) * wout;
          const int iy = oy * stride + ky - pad;
          if (iy < 0 || iy >= h) continue;
          float* line = plane + static_cast<int64_t>(iy) * w;
          if (stride == 1) {
            const int shift = kx - pad;
            const int lo = std::max(0, -shift);
            const int hi = std::min(wout, w - shift);
            float* dst = line + shift;
            for (int ox = lo; ox < hi; ++ox) dst[ox] += seg[ox];
          } else {
            for (int ox = 0; ox < wout; ++ox) {
              const int ix = ox * stride + kx - pad;
              if (ix >= 0 && ix < w) line[ix] += seg[ox];
            }
          }
        }
      }
    }
  }
}

}  // namespace detail

// x [Cin,H,W], w [Cout,Cin,kh,kw], optional b [Cout]
inline Var conv2d(const Var& x, const Var& w, const Var& b, int stride = 1, int pad = 1) {
  const int cin = x.value().dim(0), h = x.value().dim(1), wd = x.value().dim(2);
  const int cout = w.value().dim(0), kh = w.value().dim(2), kw = w.value().dim(3);
  if (w.value().dim(1) != cin) throw Error(ErrorCode::ShapeMismatch, "conv2d channel mismatch");
  const int hout = (h + 2 * pad - kh) / stride + 1;
  const int wout = (wd + 2 * pad - kw) / stride + 1;
  const int cols = cin * kh * kw;
  const int npos = hout * wout;
  const int chunk_rows = detail::kConvChunkRows;

  Tensor out({cout, hout, wout});
  const bool has_bias = b.defined();
  {
    std::vector<float> patches_t(static_cast<size_t>(cols) * chunk_rows * wout);
    CMapRM wm(w.value().data(), cout, cols);
    for (int oy0 = 0; oy0 < hout; oy0 += chunk_rows) {
      const int oy1 = std::min(oy0 + chunk_rows, hout);
      const int m = (oy1 - oy0) * wout;
      detail::im2col_t_rows(x.value().data(), cin, h, wd, kh, kw, stride, pad, wout, oy0, oy1,
                            patches_t.data());
      // out planes chunk [cout, m] = W [cout, cols] * patches_t [cols, m]
      CMapRM pm(patches_t.data(), cols, m);
      detail::StridedMap om(out.data() + static_cast<int64_t>(oy0) * wout, cout, m,
                            Eigen::OuterStride<>(npos));
      om.noalias() = wm * pm;
    }
    if (has_bias) {
      for (int c = 0; c < cout; ++c) {
        const float bias = b.value().data()[c];
        float* plane = out.data() + static_cast<int64_t>(c) * npos;
        for (int i = 0; i < npos; ++i) plane[i] += bias;
      }
    }
  }

  Tensor vx = x.value(), vw = w.value();
  std::vector<Var> inputs = has_bias ? std::vector<Var>{x, w, b} : std::vector<Var>{x, w};
  auto bw = [vx, vw, cin, h, wd, kh, kw, stride, pad, hout, wout, cout, cols, npos,
             chunk_rows](const Tensor& g, const std::vector<Tensor*>& pg) {
    std::vector<float> patches_t(static_cast<size_t>(cols) * chunk_rows * wout);
    std::vector<float> dpatches_t(static_cast<size_t>(cols) * chunk_rows * wout);
    CMapRM wm(vw.data(), cout, cols);
    for (int oy0 = 0; oy0 < hout; oy0 += chunk_rows) {
      const int oy1 = std::min(oy0 + chunk_rows, hout);
      const int m = (oy1 - oy0) * wout;
      // gradient chunk viewed in place as [cout, m] with plane stride
      detail::CStridedMap gm(g.data() + static_cast<int64_t>(oy0) * wout, cout, m,
                             Eigen::OuterStride<>(npos));
      if (pg[1]) {  // dW [cout, cols] += g_chunk * patches_t^T
        detail::im2col_t_rows(vx.data(), cin, h, wd, kh, kw, stride, pad, wout, oy0, oy1,
                              patches_t.data());
        CMapRM pm(patches_t.data(), cols, m);
        MapRM dwm(pg[1]->data(), cout, cols);
        dwm.noalias() += gm * pm.transpose();
      }
      if (pg[0]) {  // dpatches_t [cols, m] = W^T * g_chunk, scattered back
        MapRM dpm(dpatches_t.data(), cols, m);
        dpm.noalias() = wm.transpose() * gm;
        detail::col2im_t_rows_add(dpatches_t.data(), cin, h, wd, kh, kw, stride, pad, wout, oy0,
                                  oy1, pg[0]->data());
      }
    }
    if (pg.size() > 2 && pg[2]) {
      float* db = pg[2]->data();
      for (int c = 0; c < cout; ++c) {
        const float* plane = g.data() + static_cast<int64_t>(c) * npos;
        double s = 0.0;
        for (int i = 0; i < npos; ++i) s += plane[i];
        db[c] += static_cast<float>(s);
      }
    }
  };
  return make_op(std::move(out), std::move(inputs), std::move(bw));
}

// adaptive average pooling to [C, oh, ow]; window edges follow
// start = floor(i*H/oh), end = ceil((i+1)*H/oh)
inline Var adaptive_avg_pool(const Var& x, int oh, int ow) {
  const int c = x.value().dim(0), h = x.value().dim(1), w = x.value().dim(2);
  Tensor out({c, oh, ow});
  const float* px = x.value().data();
  auto lo = [](int i, int in, int on) { return (i * in) / on; };
  auto hi = [](int i, int in, int on) { return ((i + 1) * in + on - 1) / on; };
  for (int ch = 0; ch < c; ++ch) {
    const float* plane = px + static_cast<int64_t>(ch) * h * w;
    float* o = out.data() + static_cast<int64_t>(ch) * oh * ow;
    for (int oy = 0; oy < oh; ++oy) {
      const int y0 = lo(oy, h, oh), y1 = hi(oy, h, oh);
      for (int ox = 0; ox < ow; ++ox) {
        const int x0 = lo(ox, w, ow), x1 = hi(ox, w, ow);
        double s = 0.0;
        for (int y = y0; y < y1; ++y)
          for (int xx = x0; xx < x1; ++xx) s += plane[static_cast<int64_t>(y) * w + xx];
        o[static_cast<int64_t>(oy) * ow + ox] =
            static_cast<float>(s / ((y1 - y0) * (x1 - x0)));
      }
    }
  }
  return make_op(std::move(out), {x},
                 [c, h, w, oh, ow, lo, hi](const Tensor& g, const std::vector<Tensor*>& pg) {
                   if (!pg[0]) return;
                   for (int ch = 0; ch < c; ++ch) {
                     const float* go = g.data() + static_cast<int64_t>(ch) * oh * ow;
                     float* dx = pg[0]->data() + static_cast<int64_t>(ch) * h * w;
                     for (int oy = 0; oy < oh; ++oy) {
                       const int y0 = lo(oy, h, oh), y1 = hi(oy, h, oh);
                       for (int ox = 0; ox < ow; ++ox) {
                         const int x0 = lo(ox, w, ow), x1 = hi(ox, w, ow);
                         const float v =
                             go[static_cast<int64_t>(oy) * ow + ox] / ((y1 - y0) * (x1 - x0));
                         for (int y = y0; y < y1; ++y)
                           for (int xx = x0; xx < x1; ++xx)
                             dx[static_cast<int64_t>(y) * w + xx] += v;
                       }
                     }
                   }
                 });
}

namespace detail {

struct LerpPlan {
  std::vector<int> i0, i1;
  std::vector<float> w1;  // weight of i1; i0 gets (1 - w1)
};

// align_corners = false sampling grid
inline LerpPlan bilinear_plan(int in, int out) {
  LerpPlan p;
  p.i0.resize(out);
  p.i1.resize(out);
  p.w1.resize(out);
  const double scale = static_cast<double>(in) / out;
  for (int i = 0; i < out; ++i) {
    double src = (i + 0.5) * scale - 0.5;
    if (src < 0) src = 0;
    if (src > in - 1) src = in - 1;
    const int lo = static_cast<int>(src);
    const int hiI = lo + 1 < in ? lo + 1 : in - 1;
    p.i0[i] = lo;
    p.i1[i] = hiI;
    p.w1[i] = static_cast<float>(src - lo);
  }
  return p;
}

}  // namespace detail

inline Var upsample_bilinear(const Var& x, int oh, int ow) {
  const int c = x.value().dim(0), h = x.value().dim(1), w = x.value().dim(2);
  const auto py = detail::bilinear_plan(h, oh);
  const auto pxn = detail::bilinear_plan(w, ow);
  Tensor out({c, oh, ow});
  const float* px = x.value().data();
  for (int ch = 0; ch < c; ++ch) {
    const float* plane = px + static_cast<int64_t>(ch) * h * w;
    float* o = out.data() + static_cast<int64_t>(ch) * oh * ow;
    for (int oy = 0; oy < oh; ++oy) {
      const int y0 = py.i0[oy], y1 = py.i1[oy];
      const float wy = py.w1[oy];
      for (int ox = 0; ox < ow; ++ox) {
        const int x0 = pxn.i0[ox], x1 = pxn.i1[ox];
        const float wx = pxn.w1[ox];
        const float v00 = plane[static_cast<int64_t>(y0) * w + x0];
        const float v01 = plane[static_cast<int64_t>(y0) * w + x1];
        const float v10 = plane[static_cast<int64_t>(y1) * w + x0];
        const float v11 = plane[static_cast<int64_t>(y1) * w + x1];
        o[static_cast<int64_t>(oy) * ow + ox] =
            (1 - wy) * ((1 - wx) * v00 + wx * v01) + wy * ((1 - wx) * v10 + wx * v11);
      }
    }
  }
  return make_op(std::move(out), {x},
                 [c, h, w, oh, ow, py, pxn](const Tensor& g, const std::vector<Tensor*>& pg) {
                   if (!pg[0]) return;
                   for (int ch = 0; ch < c; ++ch) {
                     const float* go = g.data() + static_cast<int64_t>(ch) * oh * ow;
                     float* dx = pg[0]->data() + static_cast<int64_t>(ch) * h * w;
                     for (int oy = 0; oy < oh; ++oy) {
                       const int y0 = py.i0[oy], y1 = py.i1[oy];
                       const float wy = py.w1[oy];
                       for (int ox = 0; ox < ow; ++ox) {
                         const int x0 = pxn.i0[ox], x1 = pxn.i1[ox];
                         const float wx = pxn.w1[ox];
                         const float v = go[static_cast<int64_t>(oy) * ow + ox];
                         dx[static_cast<int64_t>(y0) * w + x0] += (1 - wy) * (1 - wx) * v;
                         dx[static_cast<int64_t>(y0) * w + x1] += (1 - wy) * wx * v;
                         dx[static_cast<int64_t>(y1) * w + x0] += wy * (1 - wx) * v;
                         dx[static_cast<int64_t>(y1) * w + x1] += wy * wx * v;
                       }
                     }
                   }
                 });
}

inline Var upsample_nearest2x(const Var& x) {
  const int c = x.value().dim(0), h = x.value().dim(1), w = x.value().dim(2);
  const int oh = h * 2, ow = w * 2;
  Tensor out({c, oh, ow});
  const float* px = x.value().data();
  for (int ch = 0; ch < c; ++ch) {
    const float* plane = px + static_cast<int64_t>(ch) * h * w;
    float* o = out.data() + static_cast<int64_t>(ch) * oh * ow;
    for (int oy = 0; oy < oh; ++oy) {
      const float* line = plane + static_cast<int64_t>(oy / 2) * w;
      float* oline = o + static_cast<int64_t>(oy) * ow;
      for (int ox = 0; ox < ow; ++ox) oline[ox] = line[ox / 2];
    }
  }
  return make_op(std::move(out), {x},
                 [c, h, w, oh, ow](const Tensor& g, const std::vector<Tensor*>& pg) {
                   if (!pg[0]) return;
                   for (int ch = 0; ch < c; ++ch) {
                     const float* go = g.data() + static_cast<int64_t>(ch) * oh * ow;
                     float* dx = pg[0]->data() + static_cast<int64_t>(ch) * h * w;
                     for (int oy = 0; oy < oh; ++oy) {
                       float* line = dx + static_cast<int64_t>(oy / 2) * w;
                       const float* gline = go + static_cast<int64_t>(oy) * ow;
                       for (int ox = 0; ox < ow; ++ox) line[ox / 2] += gline[ox];
                     }
                   }
                 });
}

// depthwise valid cross-correlation with a fixed (non-trainable) square kernel;
// output is [C, H-k+1, W-k+1]
inline Var fixed_blur_valid(const Var& x, const Tensor& kernel) {
  const int c = x.value().dim(0), h = x.value().dim(1), w = x.value().dim(2);
  const int k = kernel.dim(0);
  if (kernel.ndim() != 2 || kernel.dim(1) != k)
    throw Error(ErrorCode::Internal, "fixed_blur_valid: square kernel expected");
  const int oh = h - k + 1, ow = w - k + 1;
  if (oh <= 0 || ow <= 0) throw Error(ErrorCode::TooSmall, "image smaller than blur window");
  Tensor out({c, oh, ow});
  const float* px = x.value().data();
  const float* pk = kernel.data();
  for (int ch = 0; ch < c; ++ch) {
    const float* plane = px + static_cast<int64_t>(ch) * h * w;
    float* o = out.data() + static_cast<int64_t>(ch) * oh * ow;
    for (int oy = 0; oy < oh; ++oy) {
      for (int ox = 0; ox < ow; ++ox) {
        float s = 0.0f;
        for (int ky = 0; ky < k; ++ky) {
          const float* line = plane + static_cast<int64_t>(oy + ky) * w + ox;
          const float* kl = pk + static_cast<int64_t>(ky) * k;
          for (int kx = 0; kx < k; ++kx) s += line[kx] * kl[kx];
        }
        o[static_cast<int64_t>(oy) * ow + ox] = s;
      }
    }
  }
  Tensor vk = kernel;
  return make_op(std::move(out), {x},
                 [vk, c, h, w, k, oh, ow](const Tensor& g, const std::vector<Tensor*>& pg) {
                   if (!pg[0]) return;
                   const float* pk = vk.data();
                   for (int ch = 0; ch < c; ++ch) {
                     const float* go = g.data() + static_cast<int64_t>(ch) * oh * ow;
                     float* dx = pg[0]->data() + static_cast<int64_t>(ch) * h * w;
                     for (int oy = 0; oy < oh; ++oy) {
                       for (int ox = 0; ox < ow; ++ox) {
                         const float v = go[static_cast<int64_t>(oy) * ow + ox];
                         for (int ky = 0; ky < k; ++ky) {
                           float* line = dx + static_cast<int64_t>(oy + ky) * w + ox;
                           const float* kl = pk + static_cast<int64_t>(ky) * k;
                           for (int kx = 0; kx < k; ++kx) line[kx] += v * kl[kx];
                         }
                       }
                     }
                   }
                 });
}

}  // namespace ops
}  // namespace psg
