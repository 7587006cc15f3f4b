#pragma once

// Generator and discriminator objectives of the residual cycle GAN.
// Every squared / absolute norm is taken as a per-element mean over the whole
// batch, so the weights do not depend on patch or map size.

#include <cmath>
#include <string>

#include "hetfuse/errors.hpp"
#include "hetfuse/tensor.hpp"

namespace hetfuse {

struct LossWeights {
  double lambda = 10.0;   ///< content vs adversarial balance
  double lambda1 = 1.0;   ///< fusion-to-label L1 term
  double lambda2 = 1.0;   ///< cycle-consistency L1 term

  void validate() const {
    if (!std::isfinite(lambda) || !(lambda > 0.0)) throw ConfigError("lambda", "must be > 0");
    if (!std::isfinite(lambda1) || lambda1 < 0.0) throw ConfigError("lambda1", "must be >= 0");
    if (!std::isfinite(lambda2) || lambda2 < 0.0) throw ConfigError("lambda2", "must be >= 0");
  }
};

/// Everything the losses look at for one batch. `cycle_out` is the channel
/// stack (X-hat*, Y*, Z*) and `cycle_target` the matching (X-hat, Y, Z), with
/// members the strategy does not use left out of both.
template <typename T>
struct CycleBundle {
  Tensor<T> fusion;
  Tensor<T> label;
  Tensor<T> cycle_out;
  Tensor<T> cycle_target;
  Tensor<T> d_fusion;        ///< D_F(fusion)
  Tensor<T> d_cycle_out;     ///< D_B(X-hat*, Y*, Z*)
  Tensor<T> d_label;         ///< D_F(X)
  Tensor<T> d_cycle_target;  ///< D_B(X-hat, Y, Z)
};

/// Gradients with respect to each bundle member; filled lazily, accumulated.
template <typename T>
using BundleGrad = CycleBundle<T>;

namespace detail {

template <typename T>
Tensor<T>& grad_slot(Tensor<T>& slot, const Tensor<T>& like) {
  if (!slot.same_shape(like)) slot = Tensor<T>(like.n(), like.c(), like.h(), like.w());
  return slot;
}

/// mean((x - target)^2); adds scale * d/dx into `grad` when given.
template <typename T>
double mean_squared_to(const Tensor<T>& x, double target, double scale, Tensor<T>* grad,
                       const char* what) {
  if (x.size() == 0) throw ShapeError(std::string(what) + " is empty");
  const double n = static_cast<double>(x.size());
  double acc = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double r = static_cast<double>(x.storage()[i]) - target;
    acc += r * r;
    if (grad) grad->storage()[i] += static_cast<T>(scale * 2.0 * r / n);
  }
  return acc / n;
}

/// mean|a - b|; adds scale * sign(a - b) / n into the gradients when given.
template <typename T>
double mean_abs_diff(const Tensor<T>& a, const Tensor<T>& b, double scale, Tensor<T>* ga,
                     Tensor<T>* gb, const char* what) {
  if (!a.same_shape(b)) {
    throw ShapeError(std::string(what) + ": " + shape_string(a) + " vs " + shape_string(b));
  }
  if (a.size() == 0) throw ShapeError(std::string(what) + " is empty");
  const double n = static_cast<double>(a.size());
  double acc = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double r = static_cast<double>(a.storage()[i]) - static_cast<double>(b.storage()[i]);
    acc += std::abs(r);
    const double s = r > 0.0 ? 1.0 : (r < 0.0 ? -1.0 : 0.0);
    if (ga) ga->storage()[i] += static_cast<T>(scale * s / n);
    if (gb) gb->storage()[i] -= static_cast<T>(scale * s / n);
  }
  return acc / n;
}

template <typename T>
double adversarial(const CycleBundle<T>& b, double scale, BundleGrad<T>* g) {
  Tensor<T>* gf = g ? &grad_slot(g->d_fusion, b.d_fusion) : nullptr;
  Tensor<T>* gc = g ? &grad_slot(g->d_cycle_out, b.d_cycle_out) : nullptr;
  return mean_squared_to(b.d_fusion, 1.0, scale, gf, "D_F(fusion)") +
         mean_squared_to(b.d_cycle_out, 1.0, scale, gc, "D_B(cycle)");
}

template <typename T>
double content(const CycleBundle<T>& b, const LossWeights& w, double scale, BundleGrad<T>* g) {
  Tensor<T>* gf = g ? &grad_slot(g->fusion, b.fusion) : nullptr;
  Tensor<T>* gl = g ? &grad_slot(g->label, b.label) : nullptr;
  Tensor<T>* gco = g ? &grad_slot(g->cycle_out, b.cycle_out) : nullptr;
  Tensor<T>* gct = g ? &grad_slot(g->cycle_target, b.cycle_target) : nullptr;
  return w.lambda1 * mean_abs_diff(b.fusion, b.label, scale * w.lambda1, gf, gl, "fusion/label") +
         w.lambda2 * mean_abs_diff(b.cycle_out, b.cycle_target, scale * w.lambda2, gco, gct,
                                   "cycle");
}

}  // namespace detail

/// Least-squares adversarial loss of the two generators:
/// mean (D_F(fusion) - 1)^2 + mean (D_B(X-hat*, Y*, Z*) - 1)^2.
template <typename T>
double adversarial_loss(const CycleBundle<T>& b, BundleGrad<T>* grad = nullptr) {
  return detail::adversarial(b, 1.0, grad);
}

/// lambda1 * mean|fusion - X| + lambda2 * mean|(X-hat*, Y*, Z*) - (X-hat, Y, Z)|.
template <typename T>
double content_loss(const CycleBundle<T>& b, const LossWeights& w,
                    BundleGrad<T>* grad = nullptr) {
  return detail::content(b, w, 1.0, grad);
}

/// Joint objective of both generators: adversarial + lambda * content.
template <typename T>
double generator_loss(const CycleBundle<T>& b, const LossWeights& w,
                      BundleGrad<T>* grad = nullptr) {
  return detail::adversarial(b, 1.0, grad) + w.lambda * detail::content(b, w, w.lambda, grad);
}

/// Half of a discriminator objective: 0.5 * mean (map - target)^2. The
/// trainer back-propagates each half right after the matching forward pass.
template <typename T>
double discriminator_term(const Tensor<T>& map, double target, Tensor<T>* grad = nullptr,
                          const char* what = "discriminator map") {
  if (grad) detail::grad_slot(*grad, map);
  return 0.5 * detail::mean_squared_to(map, target, 0.5, grad, what);
}

/// Forward discriminator: fusion labelled 0, ground truth labelled 1.
template <typename T>
double forward_discriminator_loss(const CycleBundle<T>& b, BundleGrad<T>* grad = nullptr) {
  return discriminator_term(b.d_fusion, 0.0, grad ? &grad->d_fusion : nullptr, "D_F(fusion)") +
         discriminator_term(b.d_label, 1.0, grad ? &grad->d_label : nullptr, "D_F(X)");
}

/// Backward discriminator: observations labelled 1, regenerated ones 0.
template <typename T>
double backward_discriminator_loss(const CycleBundle<T>& b, BundleGrad<T>* grad = nullptr) {
  return discriminator_term(b.d_cycle_target, 1.0, grad ? &grad->d_cycle_target : nullptr,
                            "D_B(obs)") +
         discriminator_term(b.d_cycle_out, 0.0, grad ? &grad->d_cycle_out : nullptr,
                            "D_B(cycle)");
}

}  // namespace hetfuse
