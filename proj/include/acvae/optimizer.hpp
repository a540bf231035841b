#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "acvae/errors.hpp"

namespace acvae::ad {

// Named learnable buffer. Gradients live alongside values so tapes can write
// into them as leaves.
template <class S>
struct Param {
  std::string name;
  std::vector<int64_t> shape;
  std::vector<S> value;
  std::vector<S> grad;

  Param() = default;
  Param(std::string n, std::vector<int64_t> sh) : name(std::move(n)), shape(std::move(sh)) {
    int64_t sz = 1;
    for (auto d : shape) sz *= d;
    value.assign(size_t(sz), S(0));
    grad.assign(size_t(sz), S(0));
  }
  size_t size() const { return value.size(); }
  int64_t rows() const { return shape.empty() ? 1 : shape[0]; }
  int64_t cols() const {
    int64_t c = 1;
    for (size_t i = 1; i < shape.size(); ++i) c *= shape[i];
    return c;
  }
};

enum class OptKind { adam, sgd };

// One optimizer instance owns the update state for a fixed parameter group.
// Weight decay is coupled L2: l2 * param is added to the raw gradient before
// any moment accumulation (adam) or the step (sgd).
template <class S>
class Optimizer {
 public:
  Optimizer() = default;
  Optimizer(OptKind kind, double lr, double l2) : kind_(kind), lr_(lr), l2_(l2) {}

  void attach(const std::vector<Param<S>*>& params) {
    moments_.clear();
    if (kind_ == OptKind::adam) {
      for (auto* p : params) {
        Moments m;
        m.m.assign(p->size(), S(0));
        m.v.assign(p->size(), S(0));
        moments_.push_back(std::move(m));
      }
    }
    step_ = 0;
  }

  // Throws NumericError naming the first parameter with a non-finite gradient.
  void step(const std::vector<Param<S>*>& params) {
    for (auto* p : params)
      for (S g : p->grad)
        if (!std::isfinite(double(g)))
          throw NumericError("non-finite gradient in parameter '" + p->name + "'");
    ++step_;
    if (kind_ == OptKind::sgd) {
      for (auto* p : params) {
        for (size_t i = 0; i < p->size(); ++i)
          p->value[i] -= S(lr_) * (p->grad[i] + S(l2_) * p->value[i]);
      }
      return;
    }
    const double bc1 = 1.0 - std::pow(beta1_, double(step_));
    const double bc2 = 1.0 - std::pow(beta2_, double(step_));
    for (size_t k = 0; k < params.size(); ++k) {
      Param<S>* p = params[k];
      Moments& mo = moments_[k];
      for (size_t i = 0; i < p->size(); ++i) {
        double g = double(p->grad[i]) + l2_ * double(p->value[i]);
        double m = beta1_ * double(mo.m[i]) + (1.0 - beta1_) * g;
        double v = beta2_ * double(mo.v[i]) + (1.0 - beta2_) * g * g;
        mo.m[i] = S(m);
        mo.v[i] = S(v);
        p->value[i] -= S(lr_ * (m / bc1) / (std::sqrt(v / bc2) + eps_));
      }
    }
  }

  OptKind kind() const { return kind_; }
  double lr() const { return lr_; }
  double l2() const { return l2_; }
  int64_t step_count() const { return step_; }
  void set_step_count(int64_t s) { step_ = s; }

  // moment access for checkpointing
  std::vector<S>& moment_m(size_t k) { return moments_[k].m; }
  std::vector<S>& moment_v(size_t k) { return moments_[k].v; }
  size_t num_moment_slots() const { return moments_.size(); }

 private:
  struct Moments {
    std::vector<S> m, v;
  };
  OptKind kind_ = OptKind::sgd;
  double lr_ = 0, l2_ = 0;
  double beta1_ = 0.9, beta2_ = 0.999, eps_ = 1e-8;
  int64_t step_ = 0;
  std::vector<Moments> moments_;
};

template <class S>
double grad_sq_norm(const std::vector<Param<S>*>& params) {
  double s = 0;
  for (auto* p : params)
    for (S g : p->grad) s += double(g) * double(g);
  return s;
}

// Global-norm clipping across the whole group being updated this step.
template <class S>
void clip_global_norm(const std::vector<Param<S>*>& params, double max_norm) {
  if (max_norm <= 0) return;
  double norm = std::sqrt(grad_sq_norm(params));
  if (!std::isfinite(norm)) {
    for (auto* p : params)
      for (S g : p->grad)
        if (!std::isfinite(double(g)))
          throw NumericError("non-finite gradient in parameter '" + p->name + "'");
  }
  if (norm > max_norm) {
    S c = S(max_norm / norm);
    for (auto* p : params)
      for (S& g : p->grad) g *= c;
  }
}

}  // namespace acvae::ad
