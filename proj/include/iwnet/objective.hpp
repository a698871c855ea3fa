#pragma once

// Per-batch training objective on a block output of shape (N, 1, z, y, x):
// the mean over samples of the soft-IoU loss (stage 1) or of the blended
// loss against each sample's weight map (stage 2).

#include <span>
#include <vector>

#include "iwnet/loss.hpp"
#include "iwnet/tensor.hpp"
#include "iwnet/volgrid.hpp"

namespace iwnet {

template <class T>
struct BatchLoss {
  double total = 0.0;
  double iou_term = 0.0;
  double attraction_term = 0.0;
  Tensor5<T> grad;
};

// `weights` empty means IoU loss only.
template <class T>
BatchLoss<T> batch_loss(const Tensor5<T>& pred, const std::vector<const BinaryMask*>& targets,
                        const std::vector<const SoftMask*>& weights, const LossConfig& cfg) {
  const int n = pred.shape.n;
  if (pred.shape.c != 1) fail(Errc::shape_mismatch, "loss expects a single-channel prediction");
  if (static_cast<int>(targets.size()) != n) fail(Errc::shape_mismatch, "one target per sample is required");
  if (!weights.empty() && static_cast<int>(weights.size()) != n)
    fail(Errc::shape_mismatch, "one weight map per sample is required");
  const std::size_t vox = pred.shape.spatial();
  BatchLoss<T> out;
  out.grad = Tensor5<T>(pred.shape);
  const double inv_n = 1.0 / n;
  for (int i = 0; i < n; ++i) {
    if (targets[i]->size() != vox) fail(Errc::shape_mismatch, "target does not match prediction");
    std::span<const T> p(pred.plane(i, 0), vox);
    std::span<const std::uint8_t> t(targets[i]->values);
    T* g = out.grad.plane(i, 0);
    if (weights.empty()) {
      auto r = iou_loss<T, std::uint8_t>(p, t);
      out.total += r.value * inv_n;
      out.iou_term += r.value * inv_n;
      for (std::size_t k = 0; k < vox; ++k) g[k] = static_cast<T>(static_cast<double>(r.grad[k]) * inv_n);
    } else {
      if (weights[i]->size() != vox) fail(Errc::shape_mismatch, "weight map does not match prediction");
      auto r = combined_loss<T, std::uint8_t, float>(p, t, std::span<const float>(weights[i]->values), cfg);
      out.total += r.total * inv_n;
      out.iou_term += r.iou_term * inv_n;
      out.attraction_term += r.attraction_term * inv_n;
      for (std::size_t k = 0; k < vox; ++k) g[k] = static_cast<T>(static_cast<double>(r.grad[k]) * inv_n);
    }
  }
  return out;
}

}  // namespace iwnet
