#pragma once

#include <cmath>
#include <functional>
#include <vector>

#include "psg/autograd.hpp"
#include "psg/ops_basic.hpp"
#include "psg/rng.hpp"
#include "psg/tensor.hpp"

namespace testutil {

inline psg::Tensor random_tensor(std::vector<int> shape, uint64_t seed, float lo = -1.0f,
                                 float hi = 1.0f) {
  psg::Tensor t(std::move(shape));
  psg::Rng rng(seed);
  for (int64_t i = 0; i < t.size(); ++i) t.data()[i] = rng.uniform(lo, hi);
  return t;
}

inline psg::Tensor random_image(int h, int w, uint64_t seed, float lo = 0.05f, float hi = 0.95f) {
  return random_tensor({3, h, w}, seed, lo, hi);
}

// Central-difference check of d(dot(f(inputs), probe))/d(inputs[i]) against
// the reverse pass. Checks a deterministic sample of entries per input.
struct FdReport {
  double max_rel_err = 0.0;
  int checked = 0;
};

inline FdReport fd_check(const std::function<psg::Var(const std::vector<psg::Var>&)>& f,
                         std::vector<psg::Tensor> inputs, uint64_t seed, float h = 5e-3f,
                         int entries_per_input = 6) {
  using namespace psg;
  std::vector<Var> vars;
  vars.reserve(inputs.size());
  for (auto& t : inputs) vars.push_back(Var::leaf(t, /*param=*/true));

  Var out = f(vars);
  Tensor probe = random_tensor(out.value().shape(), seed ^ 0xabcdef);
  Var loss = ops::dot(out, Var::leaf(probe));
  GradMap grads = backward(loss);

  auto loss_at = [&]() {
    NoGradGuard ng;
    Var o = f(vars);
    double s = 0.0;
    for (int64_t i = 0; i < o.value().size(); ++i)
      s += static_cast<double>(o.value().data()[i]) * probe.data()[i];
    return s;
  };

  FdReport rep;
  Rng pick(seed ^ 0x9999);
  for (size_t vi = 0; vi < vars.size(); ++vi) {
    const Tensor* g = grads.find(vars[vi]);
    Tensor& val = vars[vi].mutable_value();
    const int64_t n = val.size();
    const int count = static_cast<int>(std::min<int64_t>(entries_per_input, n));
    for (int e = 0; e < count; ++e) {
      const int64_t idx = static_cast<int64_t>(pick.below(static_cast<size_t>(n)));
      const float orig = val.data()[idx];
      val.data()[idx] = orig + h;
      const double lp = loss_at();
      val.data()[idx] = orig - h;
      const double lm = loss_at();
      val.data()[idx] = orig;
      const double fd = (lp - lm) / (2.0 * h);
      const double ad = g ? g->data()[idx] : 0.0;
      const double denom = std::max({std::fabs(fd), std::fabs(ad), 1e-2});
      rep.max_rel_err = std::max(rep.max_rel_err, std::fabs(fd - ad) / denom);
      ++rep.checked;
    }
  }
  return rep;
}

// Finite-difference check for module parameters: perturbs entries of the
// given parameter tensors in place and compares the loss slope against the
// reverse-mode gradient. The checked entry per parameter is the one with the
// largest |gradient| (avoids 0/0 comparisons on float32 noise).
struct ModuleFdReport {
  double max_rel_err = 0.0;
  int checked = 0;
};

// loss_fn builds the float32 graph for the reverse pass; value_fn evaluates
// the same loss in double from the float32 forward outputs, which keeps
// finite differences above the float32 rounding floor.
inline ModuleFdReport module_fd_check(
    const std::function<psg::Var()>& loss_fn, const std::function<double()>& value_fn,
    const std::vector<std::pair<std::string, psg::Var>>& params, uint64_t seed,
    int params_to_check = 5, float h = 2e-3f) {
  using namespace psg;
  Var loss = loss_fn();
  GradMap grads = backward(loss);

  auto loss_value = [&]() {
    NoGradGuard ng;
    return value_fn();
  };

  std::vector<size_t> idx(params.size());
  for (size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  Rng pick(seed);
  for (size_t i = idx.size(); i > 1; --i) std::swap(idx[i - 1], idx[pick.below(i)]);

  // Central differences of a float32-evaluated loss cannot resolve slopes
  // whose induced loss change is near the float32 quantum; parameters whose
  // whole gradient sits below that floor are skipped, not failed.
  const double loss_scale = std::fabs(static_cast<double>(loss.value().item()));
  const double fd_floor = 50.0 * (loss_scale + 1e-4) * 1.2e-7 / h;

  ModuleFdReport rep;
  for (size_t i = 0; i < idx.size() && rep.checked < params_to_check; ++i) {
    Var p = params[idx[i]].second;
    const Tensor* g = grads.find(p);
    if (!g) continue;
    int64_t best = 0;
    for (int64_t e = 1; e < g->size(); ++e)
      if (std::fabs(g->data()[e]) > std::fabs(g->data()[best])) best = e;
    if (std::fabs(g->data()[best]) < fd_floor) continue;

    Tensor& val = const_cast<Tensor&>(p.value());
    const float orig = val.data()[best];
    // five-point stencil: O(h^4) truncation
    val.data()[best] = orig + 2 * h;
    const double lp2 = loss_value();
    val.data()[best] = orig + h;
    const double lp1 = loss_value();
    val.data()[best] = orig - h;
    const double lm1 = loss_value();
    val.data()[best] = orig - 2 * h;
    const double lm2 = loss_value();
    val.data()[best] = orig;
    const double fd = (lm2 - 8.0 * lm1 + 8.0 * lp1 - lp2) / (12.0 * h);
    const double ad = g->data()[best];
    const double denom = std::max(std::fabs(fd), std::fabs(ad));
    rep.max_rel_err = std::max(rep.max_rel_err, std::fabs(fd - ad) / denom);
    ++rep.checked;
  }
  return rep;
}

// double-precision mean squared error between a forward output and a target
inline double mse_double(const psg::Tensor& out, const psg::Tensor& target) {
  double s = 0.0;
  for (int64_t i = 0; i < out.size(); ++i) {
    const double d = static_cast<double>(out.data()[i]) - target.data()[i];
    s += d * d;
  }
  return s / static_cast<double>(out.size());
}

}  // namespace testutil
