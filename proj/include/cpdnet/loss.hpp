#pragma once

#include "cpdnet/tensor.hpp"

namespace cpdnet {

struct HflConfig {
  float lambda = 0.001f;  // weight of the focal-loss term
  float beta = 0.7f;      // FN weight inside the Tversky numerator
  float gamma = 0.75f;    // Tversky focusing exponent
  float omega = 0.25f;    // focal-loss balance factor
  float delta = 2.0f;     // focal-loss modulating exponent
  float c_stab = 1e-7f;   // stability constant
  // The squares in the Tversky numerator default to per-pixel products;
  // this flag switches to squaring the summed totals instead.
  bool square_of_sum = false;

  void validate() const;
};

// ((sum p*g + (1-beta)*sum(p(1-g))^2 + beta*sum((1-p)g)^2 + C) / (sum p*g + C))^gamma
// Always >= 1, with equality iff the FP and FN terms both vanish.
Tensor focal_tversky(const Tensor& pred, const Tensor& target, const HflConfig& cfg);

// -omega * sum[(1-p)^delta * g * log p + p^delta * (1-g) * log(1-p)],
// predictions clamped to [1e-7, 1-1e-7] before the logs.
Tensor focal_loss(const Tensor& pred, const Tensor& target, const HflConfig& cfg);

// focal_tversky + lambda * focal_loss
Tensor hybrid_focal(const Tensor& pred, const Tensor& target, const HflConfig& cfg);

// Class-balanced BCE with per-image weights: positive weight |neg|/|all|,
// negative weight 1.1*|pos|/|all|.
Tensor weighted_cross_entropy(const Tensor& pred, const Tensor& target);

}  // namespace cpdnet
