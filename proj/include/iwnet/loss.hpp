#pragma once

// Soft-IoU loss, attraction loss over the high-weight region of M, and their
// blend. Each returns the value together with dL/d(pred). Sums are
// accumulated in double whatever the element type.

#include <cmath>
#include <span>
#include <vector>

#include "iwnet/common.hpp"

namespace iwnet {

struct LossConfig {
  double lambda1 = 0.68;
  double gamma = 0.59;
  double decay_p = 0.44;

  void validate() const {
    for (double v : {lambda1, gamma, decay_p})
      if (!(v >= 0.0 && v <= 1.0)) fail(Errc::invalid_argument, "loss parameters must lie in [0, 1]");
  }
};

template <class T>
struct LossValue {
  double total = 0.0;
  double iou_term = 0.0;
  double attraction_term = 0.0;
  std::vector<T> grad;
};

template <class T>
struct TermValue {
  double value = 0.0;
  std::vector<T> grad;
};

// L = 1 - I/U with I = sum(t p), U = sum(t + p) - I.
template <class T, class M>
TermValue<T> iou_loss(std::span<const T> pred, std::span<const M> target) {
  if (pred.size() != target.size()) fail(Errc::shape_mismatch, "prediction and target sizes differ");
  double inter = 0.0;
  double total = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const double t = static_cast<double>(target[i]);
    const double p = static_cast<double>(pred[i]);
    inter += t * p;
    total += t + p;
  }
  const double uni = total - inter;
  if (!(uni > 0.0)) fail(Errc::empty_mask, "IoU loss undefined: prediction and target are both empty");
  TermValue<T> out;
  out.value = 1.0 - inter / uni;
  out.grad.resize(pred.size());
  // dI/dp = t, dU/dp = 1 - t
  const double inv2 = 1.0 / (uni * uni);
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const double t = static_cast<double>(target[i]);
    out.grad[i] = static_cast<T>(-(t * uni - inter * (1.0 - t)) * inv2);
  }
  return out;
}

// R = {M > gamma}; L = 1 - mean of pred over R. Empty R gives zero loss.
template <class T, class W>
TermValue<T> attraction_loss(std::span<const T> pred, std::span<const W> weight, double gamma) {
  if (pred.size() != weight.size()) fail(Errc::shape_mismatch, "prediction and weight map sizes differ");
  if (!(gamma >= 0.0 && gamma <= 1.0)) fail(Errc::invalid_argument, "gamma must lie in [0, 1]");
  TermValue<T> out;
  out.grad.assign(pred.size(), T{});
  std::size_t count = 0;
  double sum = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    if (static_cast<double>(weight[i]) > gamma) {
      ++count;
      sum += static_cast<double>(pred[i]);
    }
  }
  if (count == 0) return out;
  out.value = 1.0 - sum / static_cast<double>(count);
  const T g = static_cast<T>(-1.0 / static_cast<double>(count));
  for (std::size_t i = 0; i < pred.size(); ++i)
    if (static_cast<double>(weight[i]) > gamma) out.grad[i] = g;
  return out;
}

template <class T, class M, class W>
LossValue<T> combined_loss(std::span<const T> pred, std::span<const M> target, std::span<const W> weight,
                           const LossConfig& cfg) {
  cfg.validate();
  auto a = iou_loss<T, M>(pred, target);
  auto b = attraction_loss<T, W>(pred, weight, cfg.gamma);
  LossValue<T> out;
  out.iou_term = a.value;
  out.attraction_term = b.value;
  const double l1 = cfg.lambda1;
  out.total = l1 * a.value + (1.0 - l1) * b.value;
  out.grad.resize(pred.size());
  for (std::size_t i = 0; i < pred.size(); ++i)
    out.grad[i] = static_cast<T>(l1 * static_cast<double>(a.grad[i]) + (1.0 - l1) * static_cast<double>(b.grad[i]));
  return out;
}

}  // namespace iwnet
