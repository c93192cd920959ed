#pragma once

#include <optional>
#include <vector>

#include "cpdnet/tensor.hpp"

namespace cpdnet {

struct ConvSpec {
  int in_channels = 0;
  int out_channels = 0;
  int kh = 3;
  int kw = 3;
  int stride = 1;
  int padding = 0;
  int dilation = 1;
  int groups = 1;

  void validate() const;
  int out_h(int h) const;
  int out_w(int w) const;
  Shape weight_shape() const {
    return Shape{out_channels, in_channels / groups, kh, kw};
  }
};

// Cross-correlation (no kernel flip), NCHW. Registers backward rules for
// input, weight and bias when a tape is active.
Tensor conv2d(const Tensor& input, const Tensor& weight,
              const std::optional<Tensor>& bias, const ConvSpec& spec);

Tensor relu(const Tensor& x);
Tensor gelu(const Tensor& x);  // tanh approximation
Tensor sigmoid(const Tensor& x);
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& x, float a);
Tensor add_scalar(const Tensor& x, float c);
Tensor pow_scalar(const Tensor& x, float e);  // elementwise x^e, x > 0 for fractional e
Tensor log_op(const Tensor& x);               // natural log, x > 0
Tensor clamp(const Tensor& x, float lo, float hi);

// Sum of all elements -> 1x1x1x1 scalar tensor (double accumulation).
Tensor sum_all(const Tensor& x);

// Per-channel spatial mean -> NxCx1x1.
Tensor global_avg_pool(const Tensor& x);

// y[n,c,h,w] = x[n,c,h,w] * gate[n,c,0,0]; gate must be NxCx1x1.
Tensor scale_channels(const Tensor& x, const Tensor& gate);

// Mean across channels of an NxCx1x1 tensor -> Nx1x1x1.
Tensor channel_mean(const Tensor& x);

// y[n,c,h,w] = x[n,c,h,w] * gamma[c] + beta[c]; gamma/beta are 1xCx1x1.
Tensor channel_affine(const Tensor& x, const Tensor& gamma, const Tensor& beta);

// y[n,c,0,0] = x[n,c,0,0] / d[n,0,0,0]; both inputs rank NxCx1x1 / Nx1x1x1.
Tensor div_broadcast(const Tensor& x, const Tensor& d);

Tensor concat_channels(const std::vector<Tensor>& inputs);

// Bilinear upsampling by an integer factor, align_corners=false.
Tensor upsample_bilinear(const Tensor& x, int factor);

// Batch normalization. Training mode normalizes by batch statistics
// (epsilon 1e-5) and updates running stats with momentum 0.1; inference
// mode normalizes by the running stats.
Tensor batch_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                  Tensor& running_mean, Tensor& running_var, bool training,
                  float momentum = 0.1f, float eps = 1e-5f);

// LayerNorm across the channel dimension at every (n,h,w) location.
Tensor layer_norm_channels(const Tensor& x, const Tensor& gamma,
                           const Tensor& beta, float eps = 1e-6f);

}  // namespace cpdnet
