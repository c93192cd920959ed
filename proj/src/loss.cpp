#include "cpdnet/loss.hpp"

#include <stdexcept>
#include <string>

#include "cpdnet/ops.hpp"

namespace cpdnet {

namespace {

constexpr float kClampLo = 1e-7f;
constexpr float kClampHi = 1.0f - 1e-7f;

void validate_pair(const Tensor& pred, const Tensor& target, const char* op) {
  if (!(pred.shape() == target.shape())) {
    throw std::invalid_argument(std::string(op) + ": pred shape " + pred.shape().str() +
                                " != target shape " + target.shape().str());
  }
  for (float v : pred.data()) {
    if (v < -1e-6f || v > 1.0f + 1e-6f) {
      throw std::invalid_argument(std::string(op) + ": prediction value " + std::to_string(v) +
                                  " outside [0,1] beyond 1e-6 slack");
    }
  }
  for (float v : target.data()) {
    if (v < -1e-6f || v > 1.0f + 1e-6f) {
      throw std::invalid_argument(std::string(op) + ": target value " + std::to_string(v) +
                                  " outside [0,1]");
    }
  }
}

Tensor one_minus(const Tensor& x) { return add_scalar(scale(x, -1.0f), 1.0f); }

}  // namespace

void HflConfig::validate() const {
  if (!(beta > 0.0f && beta < 1.0f)) throw std::invalid_argument("HflConfig: beta must lie in (0,1)");
  if (!(gamma > 0.0f)) throw std::invalid_argument("HflConfig: gamma must be positive");
  if (lambda < 0.0f) throw std::invalid_argument("HflConfig: lambda must be non-negative");
  if (!(c_stab > 0.0f)) throw std::invalid_argument("HflConfig: c_stab must be positive");
}

Tensor focal_tversky(const Tensor& pred, const Tensor& target, const HflConfig& cfg) {
  cfg.validate();
  validate_pair(pred, target, "focal_tversky");

  Tensor tp = sum_all(mul(pred, target));
  Tensor fp_pp = mul(pred, one_minus(target));
  Tensor fn_pp = mul(one_minus(pred), target);

  Tensor fp_term, fn_term;
  if (cfg.square_of_sum) {
    fp_term = pow_scalar(sum_all(fp_pp), 2.0f);
    fn_term = pow_scalar(sum_all(fn_pp), 2.0f);
  } else {
    fp_term = sum_all(mul(fp_pp, fp_pp));
    fn_term = sum_all(mul(fn_pp, fn_pp));
  }

  Tensor numer = add_scalar(
      add(add(tp, scale(fp_term, 1.0f - cfg.beta)), scale(fn_term, cfg.beta)), cfg.c_stab);
  Tensor denom = add_scalar(tp, cfg.c_stab);
  Tensor ratio = mul(numer, pow_scalar(denom, -1.0f));
  return pow_scalar(ratio, cfg.gamma);
}

Tensor focal_loss(const Tensor& pred, const Tensor& target, const HflConfig& cfg) {
  cfg.validate();
  validate_pair(pred, target, "focal_loss");

  Tensor p = clamp(pred, kClampLo, kClampHi);
  Tensor q = one_minus(p);
  Tensor pos = mul(mul(pow_scalar(q, cfg.delta), target), log_op(p));
  Tensor neg = mul(mul(pow_scalar(p, cfg.delta), one_minus(target)), log_op(q));
  return scale(sum_all(add(pos, neg)), -cfg.omega);
}

Tensor hybrid_focal(const Tensor& pred, const Tensor& target, const HflConfig& cfg) {
  Tensor ft = focal_tversky(pred, target, cfg);
  Tensor fl = focal_loss(pred, target, cfg);
  return add(ft, scale(fl, cfg.lambda));
}

Tensor weighted_cross_entropy(const Tensor& pred, const Tensor& target) {
  validate_pair(pred, target, "weighted_cross_entropy");
  const Shape& s = target.shape();
  const std::int64_t per_image = static_cast<std::int64_t>(s.c) * s.h * s.w;

  // Per-image class weights are constants of the target, not graph nodes.
  Tensor weights = Tensor::zeros(s);
  for (int n = 0; n < s.n; ++n) {
    double pos = 0.0;
    const float* g = target.data().data() + n * per_image;
    for (std::int64_t i = 0; i < per_image; ++i) pos += g[i];
    const double neg = static_cast<double>(per_image) - pos;
    const float w_pos = static_cast<float>(neg / per_image);
    const float w_neg = static_cast<float>(1.1 * pos / per_image);
    float* w = weights.data().data() + n * per_image;
    for (std::int64_t i = 0; i < per_image; ++i) {
      w[i] = g[i] * w_pos + (1.0f - g[i]) * w_neg;
    }
  }

  Tensor p = clamp(pred, kClampLo, kClampHi);
  Tensor ce = add(mul(target, log_op(p)), mul(one_minus(target), log_op(one_minus(p))));
  return scale(sum_all(mul(weights, ce)), -1.0f);
}

}  // namespace cpdnet
