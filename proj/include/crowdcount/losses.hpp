#pragma once

// The four supervision terms and their weighted sum:
//   whole = fus + den + lambda1 * con + lambda2 * mul
// Euclidean terms for the two density maps, weighted BCE for the confidence
// map, softmax cross-entropy for the count group.

#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

#include "crowdcount/groundtruth.hpp"
#include "crowdcount/tensor.hpp"

namespace crowdcount {

inline constexpr double kConfidenceClamp = 1e-7;  // BCE operand clamp [eps, 1-eps]
inline constexpr double kEmptyMaskWeight = 1e-6;  // w when the mask has no foreground

// Per-pixel BCE weights: foreground pixels weigh 1-f and background pixels
// weigh f where f = mean(mask); an all-background mask collapses every
// weight to 1e-6 instead of 0.
inline Tensor bce_weights(const ConfidenceMask& mask) {
  double f = 0.0;
  for (double v : mask.values) f += v;
  f /= static_cast<double>(mask.values.size());
  Tensor w = Tensor::zeros({mask.h, mask.w});
  if (f == 0.0) {
    std::fill(w.data().begin(), w.data().end(), kEmptyMaskWeight);
  } else {
    // (1-2f)*y + f, evaluated branchwise so the two weight values are the
    // exact doubles f and 1-f
    for (std::size_t i = 0; i < mask.values.size(); ++i)
      w.data()[i] = mask.values[i] == 1.0 ? 1.0 - f : f;
  }
  return w;
}

// Softmax cross-entropy against the ground-truth group; the adjoint is
// softmax minus the one-hot target.
inline Tensor loss_cross_entropy(Tensor logits, int target_class) {
  if (logits.rank() != 1) throw ShapeError("loss_cross_entropy: logits must be rank 1");
  const int k = logits.extent(0);
  if (target_class < 0 || target_class >= k)
    throw std::invalid_argument("loss_cross_entropy: target " + std::to_string(target_class) +
                                " outside [0," + std::to_string(k) + ")");
  double m = logits.data()[0];
  for (double v : logits.data()) m = std::max(m, v);
  double z = 0.0;
  for (double v : logits.data()) z += std::exp(v - m);
  const double log_z = std::log(z);
  Tensor loss = Tensor::scalar(-(logits.data()[static_cast<std::size_t>(target_class)] - m) + log_z);
  if (detail::recording({&logits})) {
    detail::mark_output(loss);
    Graph::active()->record([logits, loss, target_class, m, log_z]() mutable {
      const double g = loss.grad()[0];
      for (std::size_t j = 0; j < logits.numel(); ++j) {
        const double softmax_j = std::exp(logits.data()[j] - m - log_z);
        logits.grad()[j] +=
            g * (softmax_j - (static_cast<int>(j) == target_class ? 1.0 : 0.0));
      }
    });
  }
  return loss;
}

// Mean over pixels of -w(p) * [y ln x + (1-y) ln(1-x)], with x clamped to
// [1e-7, 1-1e-7]; clamped pixels pass no gradient.
inline Tensor loss_weighted_bce(Tensor confidence, const ConfidenceMask& mask) {
  if (confidence.rank() < 2 || confidence.numel() != mask.values.size() ||
      confidence.extent(confidence.rank() - 2) != mask.h ||
      confidence.extent(confidence.rank() - 1) != mask.w)
    throw ShapeError("loss_weighted_bce: confidence does not match the mask raster");
  const Tensor w = bce_weights(mask);
  const double inv_n = 1.0 / static_cast<double>(mask.values.size());
  const double lo = kConfidenceClamp, hi = 1.0 - kConfidenceClamp;
  double total = 0.0;
  for (std::size_t i = 0; i < mask.values.size(); ++i) {
    const double x = std::clamp(confidence.data()[i], lo, hi);
    const double y = mask.values[i];
    total -= w.data()[i] * (y * std::log(x) + (1.0 - y) * std::log(1.0 - x));
  }
  Tensor loss = Tensor::scalar(total * inv_n);
  if (detail::recording({&confidence})) {
    detail::mark_output(loss);
    Graph::active()->record([confidence, loss, w, mask_values = mask.values, inv_n, lo,
                             hi]() mutable {
      const double g = loss.grad()[0] * inv_n;
      for (std::size_t i = 0; i < mask_values.size(); ++i) {
        const double raw = confidence.data()[i];
        if (raw <= lo || raw >= hi) continue;
        const double y = mask_values[i];
        confidence.grad()[i] -= g * w.data()[i] * (y / raw - (1.0 - y) / (1.0 - raw));
      }
    });
  }
  return loss;
}

// 0.5 * sum of squared residuals per sample (batch size is 1 throughout);
// the adjoint is the residual itself.
inline Tensor loss_euclidean(Tensor pred, const DensityMap& target) {
  if (pred.rank() < 2 || pred.numel() != target.values.size() ||
      pred.extent(pred.rank() - 2) != target.h || pred.extent(pred.rank() - 1) != target.w)
    throw ShapeError("loss_euclidean: prediction does not match the target raster");
  double total = 0.0;
  for (std::size_t i = 0; i < pred.numel(); ++i) {
    const double r = pred.data()[i] - target.values[i];
    total += r * r;
  }
  Tensor loss = Tensor::scalar(0.5 * total);
  if (detail::recording({&pred})) {
    detail::mark_output(loss);
    Graph::active()->record([pred, loss, target_values = target.values]() mutable {
      const double g = loss.grad()[0];
      for (std::size_t i = 0; i < pred.numel(); ++i)
        pred.grad()[i] += g * (pred.data()[i] - target_values[i]);
    });
  }
  return loss;
}

struct LossBreakdown {
  double l_fus = 0.0, l_den = 0.0, l_con = 0.0, l_mul = 0.0, l_whole = 0.0;
};

struct LossTerms {
  Tensor fus, den, mul;
  Tensor con;  // undefined when the confidence module is ablated
};

struct WholeLoss {
  Tensor total;
  LossBreakdown breakdown;
};

inline WholeLoss loss_whole(const LossTerms& terms, double lambda1, double lambda2) {
  WholeLoss out;
  Tensor density_part = add(terms.fus, terms.den);
  Tensor weighted_mul = scale(terms.mul, lambda2);
  if (terms.con.defined()) {
    out.total = add(density_part, add(scale(terms.con, lambda1), weighted_mul));
    out.breakdown.l_con = terms.con.value();
  } else {
    out.total = add(density_part, weighted_mul);
  }
  out.breakdown.l_fus = terms.fus.value();
  out.breakdown.l_den = terms.den.value();
  out.breakdown.l_mul = terms.mul.value();
  out.breakdown.l_whole = out.total.value();
  return out;
}

}  // namespace crowdcount
