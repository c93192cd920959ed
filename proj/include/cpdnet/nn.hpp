#pragma once

#include <string>

#include "cpdnet/ops.hpp"
#include "cpdnet/rng.hpp"
#include "cpdnet/tensor.hpp"

namespace cpdnet {

// Kaiming-uniform fill, fan-in mode: U(-sqrt(6/fan_in), sqrt(6/fan_in)).
void kaiming_uniform_(Tensor& w, int fan_in, Rng& rng);

struct Conv2d {
  ConvSpec spec;
  Tensor weight;
  Tensor bias;  // undefined when constructed bias-free

  Conv2d() = default;
  Conv2d(ParamRegistry& reg, const std::string& name, const ConvSpec& spec,
         bool with_bias, Rng& rng);

  Tensor forward(const Tensor& x) const;
};

struct BatchNorm2d {
  Tensor gamma;
  Tensor beta;
  Tensor running_mean;
  Tensor running_var;

  BatchNorm2d() = default;
  BatchNorm2d(ParamRegistry& reg, const std::string& name, int channels);

  Tensor forward(const Tensor& x, bool training);
};

}  // namespace cpdnet
