#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <initializer_list>
#include <memory>
#include <numeric>
#include <sstream>
#include <unordered_map>
#include <string>
#include <vector>

#include "psg/error.hpp"

namespace psg {

namespace detail {

// Thread-local LIFO recycler for tensor storage. Training graphs hold many
// large activations alive until the backward pass, which defeats malloc's
// reuse; recycling exact-size buffers keeps pages hot across steps. Buffers
// are 64-byte aligned so that vectorized kernels see the same alignment on
// every run, keeping results bit-reproducible.
class BufferPool {
 public:
  static float* alloc(int64_t n) {
    return static_cast<float*>(::operator new(static_cast<size_t>(n) * sizeof(float),
                                              std::align_val_t(64)));
  }
  static void dealloc(float* p) { ::operator delete(p, std::align_val_t(64)); }

  float* acquire(int64_t n) {
    auto it = free_.find(n);
    if (it != free_.end() && !it->second.empty()) {
      float* p = it->second.back();
      it->second.pop_back();
      held_ -= n;
#ifdef PSG_POOL_POISON
      std::fill(p, p + n, 1e30f);
#endif
      return p;
    }
    return alloc(n);
  }

  void release(float* p, int64_t n) {
    if (held_ + n > kMaxHeldFloats) {
      dealloc(p);
      return;
    }
    free_[n].push_back(p);
    held_ += n;
  }

  ~BufferPool() {
    for (auto& [n, list] : free_)
      for (float* p : list) dealloc(p);
  }

 private:
  static constexpr int64_t kMaxHeldFloats = 384ll << 20;  // ~1.5 GB per thread
  std::unordered_map<int64_t, std::vector<float*>> free_;
  int64_t held_ = 0;
};

inline BufferPool& buffer_pool() {
  thread_local BufferPool pool;
  return pool;
}

// RAII aligned scratch for op internals; same 64-byte guarantee as tensors
// so vectorized kernels never change their head/tail split between calls
struct AlignedVec {
  float* ptr = nullptr;
  int64_t n = 0;
  explicit AlignedVec(int64_t n_) : ptr(BufferPool::alloc(n_)), n(n_) {}
  ~AlignedVec() { BufferPool::dealloc(ptr); }
  AlignedVec(const AlignedVec&) = delete;
  AlignedVec& operator=(const AlignedVec&) = delete;
  float* data() { return ptr; }
  const float* data() const { return ptr; }
};

inline std::shared_ptr<float[]> acquire_buffer(int64_t n) {
#ifdef PSG_DISABLE_BUFFER_POOL
  return std::shared_ptr<float[]>(BufferPool::alloc(n), [](float* q) { BufferPool::dealloc(q); });
#else
  float* p = buffer_pool().acquire(n);
  return std::shared_ptr<float[]>(p, [n](float* q) { buffer_pool().release(q, n); });
#endif
}

}  // namespace detail

// Dense row-major float32 tensor. Copies are shallow (shared storage); ops
// always allocate fresh outputs, so sharing is safe as long as callers only
// mutate tensors they created (grads, buffers).
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(std::vector<int> shape) : shape_(std::move(shape)) {
    size_ = 1;
    for (int d : shape_) {
      if (d <= 0) throw Error(ErrorCode::Internal, "non-positive tensor dim");
      size_ *= d;
    }
    data_ = detail::acquire_buffer(size_);
  }

  static Tensor zeros(std::vector<int> shape) {
    Tensor t(std::move(shape));
    std::memset(t.data(), 0, sizeof(float) * t.size());
    return t;
  }

  static Tensor full(std::vector<int> shape, float v) {
    Tensor t(std::move(shape));
    std::fill(t.data(), t.data() + t.size(), v);
    return t;
  }

  static Tensor from(std::vector<int> shape, const std::vector<float>& values) {
    Tensor t(std::move(shape));
    if (static_cast<int64_t>(values.size()) != t.size())
      throw Error(ErrorCode::Internal, "value count does not match shape");
    std::copy(values.begin(), values.end(), t.data());
    return t;
  }

  static Tensor scalar(float v) { return full({1}, v); }

  bool defined() const { return static_cast<bool>(data_); }
  int64_t size() const { return size_; }
  int ndim() const { return static_cast<int>(shape_.size()); }
  int dim(int i) const { return shape_[static_cast<size_t>(i)]; }
  const std::vector<int>& shape() const { return shape_; }

  float* data() { return data_.get(); }
  const float* data() const { return data_.get(); }

  float item() const {
    if (size_ != 1) throw Error(ErrorCode::Internal, "item() on non-scalar");
    return data_[0];
  }

  Tensor clone() const {
    Tensor t(shape_);
    std::memcpy(t.data(), data(), sizeof(float) * size());
    return t;
  }

  // Shares storage; element count must match.
  Tensor view(std::vector<int> shape) const {
    Tensor t;
    t.shape_ = std::move(shape);
    t.size_ = 1;
    for (int d : t.shape_) t.size_ *= d;
    if (t.size_ != size_) throw Error(ErrorCode::Internal, "view() size mismatch");
    t.data_ = data_;
    return t;
  }

  bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

  void fill(float v) { std::fill(data(), data() + size(), v); }

  void add_(const Tensor& o, float scale = 1.0f) {
    const float* src = o.data();
    float* dst = data();
    for (int64_t i = 0; i < size_; ++i) dst[i] += scale * src[i];
  }

  bool all_finite() const {
    const float* p = data();
    for (int64_t i = 0; i < size_; ++i)
      if (!std::isfinite(p[i])) return false;
    return true;
  }

  double sum_double() const {
    double s = 0.0;
    const float* p = data();
    for (int64_t i = 0; i < size_; ++i) s += p[i];
    return s;
  }

  double l2_norm() const {
    double s = 0.0;
    const float* p = data();
    for (int64_t i = 0; i < size_; ++i) s += static_cast<double>(p[i]) * p[i];
    return std::sqrt(s);
  }

  std::string shape_str() const {
    std::ostringstream os;
    os << "[";
    for (size_t i = 0; i < shape_.size(); ++i) os << (i ? "," : "") << shape_[i];
    os << "]";
    return os.str();
  }

 private:
  std::vector<int> shape_;
  std::shared_ptr<float[]> data_;
  int64_t size_ = 0;
};

inline void check_same_shape(const Tensor& a, const Tensor& b, const char* what) {
  if (!a.same_shape(b))
    throw Error(ErrorCode::ShapeMismatch,
                std::string(what) + ": " + a.shape_str() + " vs " + b.shape_str());
}

}  // namespace psg
