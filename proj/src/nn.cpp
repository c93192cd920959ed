#include "cpdnet/nn.hpp"

#include <cmath>

namespace cpdnet {

void kaiming_uniform_(Tensor& w, int fan_in, Rng& rng) {
  const float bound = std::sqrt(6.0f / static_cast<float>(fan_in));
  for (float& v : w.data()) v = rng.uniform(-bound, bound);
}

Conv2d::Conv2d(ParamRegistry& reg, const std::string& name, const ConvSpec& sp,
               bool with_bias, Rng& rng)
    : spec(sp) {
  spec.validate();
  Tensor w = Tensor::zeros(spec.weight_shape());
  const int fan_in = (spec.in_channels / spec.groups) * spec.kh * spec.kw;
  kaiming_uniform_(w, fan_in, rng);
  weight = reg.add_parameter(name + ".weight", w).value;
  if (with_bias) {
    bias = reg.add_parameter(name + ".bias", Tensor::zeros(Shape{1, spec.out_channels, 1, 1})).value;
  }
}

Tensor Conv2d::forward(const Tensor& x) const {
  if (bias.defined()) return conv2d(x, weight, bias, spec);
  return conv2d(x, weight, std::nullopt, spec);
}

BatchNorm2d::BatchNorm2d(ParamRegistry& reg, const std::string& name, int channels) {
  const Shape s{1, channels, 1, 1};
  gamma = reg.add_parameter(name + ".gamma", Tensor::full(s, 1.0f)).value;
  beta = reg.add_parameter(name + ".beta", Tensor::zeros(s)).value;
  running_mean = reg.add_buffer(name + ".running_mean", Tensor::zeros(s));
  running_var = reg.add_buffer(name + ".running_var", Tensor::full(s, 1.0f));
}

Tensor BatchNorm2d::forward(const Tensor& x, bool training) {
  return batch_norm(x, gamma, beta, running_mean, running_var, training);
}

}  // namespace cpdnet
