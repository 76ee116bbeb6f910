#pragma once

// Multi-head scaled dot-product attention over batched token sequences.
// q: [B, Tq, D], k/v: [B, Tk, D]. Score tiles are stored transposed
// ([Tk, tile]) and recomputed in the backward pass, so the [Tq, Tk] matrix
// never exists in memory at once and every tile stays cache-resident. The
// head width 8 (the common case here) gets hand-rolled kernels; other widths
// fall back to Eigen.

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

using psg::detail::AlignedVec;

// query-tile width; one transposed score tile is Tk * kAttnTile floats
constexpr int kAttnTile = 64;

// gather head slice [rows, dh] from [T, D] batch storage
inline void pack_head(const float* src, int d, int r0, int rows, int hoff, int dh, float scale,
                      float* dst) {
  for (int r = 0; r < rows; ++r) {
    const float* s = src + static_cast<int64_t>(r0 + r) * d + hoff;
    float* o = dst + static_cast<int64_t>(r) * dh;
    for (int c = 0; c < dh; ++c) o[c] = s[c] * scale;
  }
}

// gather head slice transposed: [dh, rows] with leading dimension ld
inline void pack_head_t(const float* src, int d, int r0, int rows, int hoff, int dh, float scale,
                        float* dst, int ld) {
  for (int r = 0; r < rows; ++r) {
    const float* s = src + static_cast<int64_t>(r0 + r) * d + hoff;
    for (int c = 0; c < dh; ++c) dst[static_cast<int64_t>(c) * ld + r] = s[c] * scale;
  }
}

inline void scatter_head_add(const float* src, int d, int r0, int rows, int hoff, int dh,
                             float scale, float* dst) {
  for (int r = 0; r < rows; ++r) {
    const float* s = src + static_cast<int64_t>(r) * dh;
    float* o = dst + static_cast<int64_t>(r0 + r) * d + hoff;
    for (int c = 0; c < dh; ++c) o[c] += s[c] * scale;
  }
}

// softmax over the columns of a row-major [tk, cols] tile, in place;
// row sweeps auto-vectorize and the exp runs once over the whole tile.
// Per-column max and reciprocal sum can be captured so the backward pass
// replays the softmax without redoing the reductions.
inline void softmax_cols_inplace(float* st, int tk, int cols, float* mx_out = nullptr,
                                 float* inv_out = nullptr) {
  if (cols > kAttnTile) throw Error(ErrorCode::Internal, "softmax tile wider than kAttnTile");
  float mx[kAttnTile], sum[kAttnTile];
  for (int c = 0; c < cols; ++c) mx[c] = st[c];
  for (int r = 1; r < tk; ++r) {
    const float* row = st + static_cast<int64_t>(r) * cols;
    for (int c = 0; c < cols; ++c) mx[c] = row[c] > mx[c] ? row[c] : mx[c];
  }
  for (int r = 0; r < tk; ++r) {
    float* row = st + static_cast<int64_t>(r) * cols;
    for (int c = 0; c < cols; ++c) row[c] -= mx[c];
  }
  Eigen::Map<Eigen::ArrayXf> flat(st, static_cast<int64_t>(tk) * cols);
  flat = flat.exp();
  for (int c = 0; c < cols; ++c) sum[c] = 0.0f;
  for (int r = 0; r < tk; ++r) {
    const float* row = st + static_cast<int64_t>(r) * cols;
    for (int c = 0; c < cols; ++c) sum[c] += row[c];
  }
  for (int c = 0; c < cols; ++c) sum[c] = 1.0f / sum[c];
  for (int r = 0; r < tk; ++r) {
    float* row = st + static_cast<int64_t>(r) * cols;
    for (int c = 0; c < cols; ++c) row[c] *= sum[c];
  }
  if (mx_out)
    for (int c = 0; c < cols; ++c) mx_out[c] = mx[c];
  if (inv_out)
    for (int c = 0; c < cols; ++c) inv_out[c] = sum[c];
}

// replay with saved statistics: P = exp(S - mx) * inv
inline void softmax_cols_replay(float* st, int tk, int cols, const float* mx,
                                const float* inv) {
  for (int r = 0; r < tk; ++r) {
    float* row = st + static_cast<int64_t>(r) * cols;
    for (int c = 0; c < cols; ++c) row[c] -= mx[c];
  }
  Eigen::Map<Eigen::ArrayXf> flat(st, static_cast<int64_t>(tk) * cols);
  flat = flat.exp();
  for (int r = 0; r < tk; ++r) {
    float* row = st + static_cast<int64_t>(r) * cols;
    for (int c = 0; c < cols; ++c) row[c] *= inv[c];
  }
}

// C [m, n] = A [m, 8] * B [8, n] with n <= kAttnTile; eight broadcast
// multiply-adds over short rows vectorize better than a general GEMM here
inline void gemm_k8(const float* __restrict a, const float* __restrict b, float* __restrict c,
                    int m, int n) {
  int i = 0;
  for (; i + 2 <= m; i += 2) {
    const float* ar = a + static_cast<int64_t>(i) * 8;
    const float a0 = ar[0], a1 = ar[1], a2 = ar[2], a3 = ar[3];
    const float a4 = ar[4], a5 = ar[5], a6 = ar[6], a7 = ar[7];
    const float b0 = ar[8], b1 = ar[9], b2 = ar[10], b3 = ar[11];
    const float b4 = ar[12], b5 = ar[13], b6 = ar[14], b7 = ar[15];
    float* c0 = c + static_cast<int64_t>(i) * n;
    float* c1 = c0 + n;
    for (int j = 0; j < n; ++j) {
      const float v0 = b[j], v1 = b[n + j], v2 = b[2 * n + j], v3 = b[3 * n + j];
      const float v4 = b[4 * n + j], v5 = b[5 * n + j], v6 = b[6 * n + j], v7 = b[7 * n + j];
      c0[j] = a0 * v0 + a1 * v1 + a2 * v2 + a3 * v3 + a4 * v4 + a5 * v5 + a6 * v6 + a7 * v7;
      c1[j] = b0 * v0 + b1 * v1 + b2 * v2 + b3 * v3 + b4 * v4 + b5 * v5 + b6 * v6 + b7 * v7;
    }
  }
  for (; i < m; ++i) {
    const float* ar = a + static_cast<int64_t>(i) * 8;
    const float a0 = ar[0], a1 = ar[1], a2 = ar[2], a3 = ar[3];
    const float a4 = ar[4], a5 = ar[5], a6 = ar[6], a7 = ar[7];
    float* cr = c + static_cast<int64_t>(i) * n;
    for (int j = 0; j < n; ++j)
      cr[j] = a0 * b[j] + a1 * b[n + j] + a2 * b[2 * n + j] + a3 * b[3 * n + j] +
              a4 * b[4 * n + j] + a5 * b[5 * n + j] + a6 * b[6 * n + j] + a7 * b[7 * n + j];
  }
}

// C [m, n] = A [m, 8] * B^T with B stored [n, 8]
inline void gemm_k8_bt(const float* a, const float* b, float* c, int m, int n,
                       float* bt_scratch) {
  for (int k = 0; k < 8; ++k)
    for (int j = 0; j < n; ++j) bt_scratch[k * n + j] = b[static_cast<int64_t>(j) * 8 + k];
  gemm_k8(a, bt_scratch, c, m, n);
}

}  // namespace detail

// [B, Tq, D] x [B, Tk, D] -> [B, Tq, D]; rank-2 operands are batch-of-one
inline Var scaled_dot_attention(const Var& q, const Var& k, const Var& v, int heads) {
  const Tensor& qv = q.value();
  const Tensor& kv = k.value();
  const Tensor& vv = v.value();
  if (qv.ndim() != kv.ndim() || qv.ndim() != vv.ndim() || (qv.ndim() != 2 && qv.ndim() != 3))
    throw Error(ErrorCode::Internal, "attention expects matching [B,T,D] or [T,D]");
  const bool batched = qv.ndim() == 3;
  const int b = batched ? qv.dim(0) : 1;
  const int tq = qv.dim(batched ? 1 : 0), d = qv.dim(batched ? 2 : 1);
  const int tk = kv.dim(batched ? 1 : 0);
  if ((batched && (kv.dim(0) != b || vv.dim(0) != b)) || vv.dim(batched ? 1 : 0) != tk ||
      kv.dim(batched ? 2 : 1) != d || vv.dim(batched ? 2 : 1) != d)
    throw Error(ErrorCode::DimMismatch, "attention operand shapes");
  if (d % heads != 0) throw Error(ErrorCode::DimMismatch, "heads must divide embed dim");
  const int dh = d / heads;
  const float scale = 1.0f / std::sqrt(static_cast<float>(dh));
  const int tile = std::min(detail::kAttnTile, tq);
  const bool fast8 = dh == 8;

  Tensor out = Tensor::zeros(qv.shape());
  const bool tracking =
      grad_enabled() && (q.needs_grad() || k.needs_grad() || v.needs_grad());
  Tensor stats;  // [2, b*heads*tq]: per-query softmax max and reciprocal sum
  if (tracking) stats = Tensor({2, b * heads * tq});
  detail::AlignedVec kh(static_cast<int64_t>(tk) * dh), vh(static_cast<int64_t>(tk) * dh);
  detail::AlignedVec qh(static_cast<int64_t>(tile) * dh);
  detail::AlignedVec scratch(static_cast<int64_t>(std::max(dh, 8)) * tile);
  detail::AlignedVec st(static_cast<int64_t>(tk) * tile);
  detail::AlignedVec orows(static_cast<int64_t>(tile) * dh);

  for (int bi = 0; bi < b; ++bi) {
    const float* qb = qv.data() + static_cast<int64_t>(bi) * tq * d;
    const float* kb = kv.data() + static_cast<int64_t>(bi) * tk * d;
    const float* vb = vv.data() + static_cast<int64_t>(bi) * tk * d;
    float* ob = out.data() + static_cast<int64_t>(bi) * tq * d;
    for (int h = 0; h < heads; ++h) {
      const int hoff = h * dh;
      detail::pack_head(kb, d, 0, tk, hoff, dh, 1.0f, kh.data());
      detail::pack_head(vb, d, 0, tk, hoff, dh, 1.0f, vh.data());
      for (int r0 = 0; r0 < tq; r0 += tile) {
        const int rows = std::min(tile, tq - r0);
        detail::pack_head(qb, d, r0, rows, hoff, dh, scale, qh.data());
        // S^T [tk, rows] = K [tk, dh] * Q_tile^T
        if (fast8)
          detail::gemm_k8_bt(kh.data(), qh.data(), st.data(), tk, rows, scratch.data());
        else
          gemm_bt(kh.data(), qh.data(), st.data(), tk, dh, rows);
        float* mx_out = nullptr;
        float* inv_out = nullptr;
        if (tracking) {
          const int64_t base = (static_cast<int64_t>(bi) * heads + h) * tq + r0;
          mx_out = stats.data() + base;
          inv_out = stats.data() + static_cast<int64_t>(b) * heads * tq + base;
        }
        detail::softmax_cols_inplace(st.data(), tk, rows, mx_out, inv_out);
        // O [rows, dh] = P^T^T * V
        {
          CMapRM pt_m(st.data(), tk, rows), vh_m(vh.data(), tk, dh);
          MapRM o_m(orows.data(), rows, dh);
          o_m.noalias() = pt_m.transpose() * vh_m;
        }
        detail::scatter_head_add(orows.data(), d, r0, rows, hoff, dh, 1.0f, ob);
      }
    }
  }

  Tensor cq = qv, ck = kv, cv = vv;
  auto bw = [cq, ck, cv, stats, b, tq, tk, d, heads, dh, scale, tile,
             fast8](const Tensor& g, const std::vector<Tensor*>& pg) {
    detail::AlignedVec kh(static_cast<int64_t>(tk) * dh), vh(static_cast<int64_t>(tk) * dh);
    detail::AlignedVec qh(static_cast<int64_t>(tile) * dh);
    detail::AlignedVec doh(static_cast<int64_t>(tile) * dh);
    detail::AlignedVec doht(static_cast<int64_t>(dh) * tile);
    detail::AlignedVec st(static_cast<int64_t>(tk) * tile);
    detail::AlignedVec dpt(static_cast<int64_t>(tk) * tile);
    detail::AlignedVec dqrows(static_cast<int64_t>(tile) * dh);
    detail::AlignedVec scratch(static_cast<int64_t>(std::max(dh, 8)) * tile);
    detail::AlignedVec dkh(static_cast<int64_t>(tk) * dh), dvh(static_cast<int64_t>(tk) * dh);

    for (int bi = 0; bi < b; ++bi) {
      const float* qb = cq.data() + static_cast<int64_t>(bi) * tq * d;
      const float* kb = ck.data() + static_cast<int64_t>(bi) * tk * d;
      const float* vb = cv.data() + static_cast<int64_t>(bi) * tk * d;
      const float* gb = g.data() + static_cast<int64_t>(bi) * tq * d;
      for (int h = 0; h < heads; ++h) {
        const int hoff = h * dh;
        detail::pack_head(kb, d, 0, tk, hoff, dh, 1.0f, kh.data());
        detail::pack_head(vb, d, 0, tk, hoff, dh, 1.0f, vh.data());
        std::fill(dkh.data(), dkh.data() + dkh.n, 0.0f);
        std::fill(dvh.data(), dvh.data() + dvh.n, 0.0f);
        for (int r0 = 0; r0 < tq; r0 += tile) {
          const int rows = std::min(tile, tq - r0);
          detail::pack_head(qb, d, r0, rows, hoff, dh, scale, qh.data());
          if (fast8)
            detail::gemm_k8_bt(kh.data(), qh.data(), st.data(), tk, rows, scratch.data());
          else
            gemm_bt(kh.data(), qh.data(), st.data(), tk, dh, rows);
          const int64_t stats_base = (static_cast<int64_t>(bi) * heads + h) * tq + r0;
          detail::softmax_cols_replay(st.data(), tk, rows, stats.data() + stats_base,
                                      stats.data() + static_cast<int64_t>(b) * heads * tq +
                                          stats_base);  // st == P^T
          detail::pack_head(gb, d, r0, rows, hoff, dh, 1.0f, doh.data());
          if (pg[2]) {  // dV [tk, dh] += P^T * dO_rows
            CMapRM pt_m(st.data(), tk, rows), do_m(doh.data(), rows, dh);
            MapRM dv_m(dvh.data(), tk, dh);
            dv_m.noalias() += pt_m * do_m;
          }
          // dP^T [tk, rows] = V [tk, dh] * dO^T
          if (fast8) {
            detail::pack_head_t(gb, d, r0, rows, hoff, dh, 1.0f, doht.data(), rows);
            detail::gemm_k8(vh.data(), doht.data(), dpt.data(), tk, rows);
          } else {
            CMapRM vh_m(vh.data(), tk, dh), do_m(doh.data(), rows, dh);
            MapRM dpt_m(dpt.data(), tk, rows);
            dpt_m.noalias() = vh_m * do_m.transpose();
          }
          // dS^T = P^T .* (dP^T - colsum(dP^T .* P^T))
          {
            float accv[detail::kAttnTile];
            for (int c = 0; c < rows; ++c) accv[c] = 0.0f;
            for (int r = 0; r < tk; ++r) {
              const float* pr = st.data() + static_cast<int64_t>(r) * rows;
              const float* dr = dpt.data() + static_cast<int64_t>(r) * rows;
              for (int c = 0; c < rows; ++c) accv[c] += pr[c] * dr[c];
            }
            for (int r = 0; r < tk; ++r) {
              float* pr = st.data() + static_cast<int64_t>(r) * rows;
              const float* dr = dpt.data() + static_cast<int64_t>(r) * rows;
              for (int c = 0; c < rows; ++c) pr[c] *= dr[c] - accv[c];  // st becomes dS^T
            }
          }
          if (pg[0]) {  // dQ_rows = dS^T^T * K, scaled back
            {
              CMapRM dst_m(st.data(), tk, rows), kh_m(kh.data(), tk, dh);
              MapRM dq_m(dqrows.data(), rows, dh);
              dq_m.noalias() = dst_m.transpose() * kh_m;
            }
            detail::scatter_head_add(dqrows.data(), d, r0, rows, hoff, dh, scale,
                                     pg[0]->data() + static_cast<int64_t>(bi) * tq * d);
          }
          if (pg[1]) {  // dK [tk, dh] += dS^T * Q_rows
            CMapRM dst_m(st.data(), tk, rows), qh_m(qh.data(), rows, dh);
            MapRM dk_m(dkh.data(), tk, dh);
            dk_m.noalias() += dst_m * qh_m;
          }
        }
        if (pg[1])
          detail::scatter_head_add(dkh.data(), d, 0, tk, hoff, dh, 1.0f,
                                   pg[1]->data() + static_cast<int64_t>(bi) * tk * d);
        if (pg[2])
          detail::scatter_head_add(dvh.data(), d, 0, tk, hoff, dh, 1.0f,
                                   pg[2]->data() + static_cast<int64_t>(bi) * tk * d);
      }
    }
  };
  return make_op(std::move(out), {q, k, v}, std::move(bw));
}

}  // namespace ops
}  // namespace psg
