#pragma once

#include <array>
#include <string>
#include <vector>

#include "cpdnet/nn.hpp"
#include "cpdnet/ops.hpp"
#include "cpdnet/tensor.hpp"

namespace cpdnet {

// The four cycle pixel difference variants over the 3x3 neighborhood
//   [x1 x2 x3; x4 x5 x6; x7 x8 x9]  (stored 0-based, row-major).
// H cycles each row to the right, V cycles each column downward, D point-
// reflects the corners (1<->9, 3<->7), C point-reflects the edge midpoints
// (2<->8, 4<->6). Cells fixed by the permutation contribute zero difference.
enum class CpdcVariant { H, V, D, C };

const char* variant_name(CpdcVariant v);
CpdcVariant variant_from_name(const std::string& name);

struct KernelPermutation {
  CpdcVariant variant = CpdcVariant::H;
  std::array<int, 9> map{};  // map[i] = pi(i), 0-based cells

  static KernelPermutation make(CpdcVariant v);
  std::array<int, 9> inverse() const;
  bool is_bijection() const;
};

// Weight difference template: out[j] = w[j] - w[pi^-1(j)] on one 3x3 slice.
template <typename T>
void transform_kernel_3x3(const T* w, const KernelPermutation& perm, T* out) {
  const std::array<int, 9> inv = perm.inverse();
  for (int j = 0; j < 9; ++j) out[j] = w[j] - w[inv[j]];
}

// Differentiable transform applied independently to every (out,in) 3x3
// slice of a weight tensor. Gradients flow back to the original weights.
Tensor cpdc_transform(const Tensor& weight, const KernelPermutation& perm);

// Reference interpreter for a single 3x3 window: sum_i (x_i - x_pi(i)) * w_i.
template <typename T>
T cpdc_direct(const T* window, const T* kernel, const KernelPermutation& perm) {
  T acc = T(0);
  for (int i = 0; i < 9; ++i) {
    acc += (window[i] - window[perm.map[i]]) * kernel[i];
  }
  return acc;
}

// Sliding-window evaluation of the difference form over a full tensor with
// conv2d semantics (zero padding, stride, groups; 3x3 kernel, dilation 1).
// Used only as an oracle against the transformed-weight convolution.
template <typename T>
std::vector<T> cpdc_direct_sweep(const Tensor& input, const Tensor& weight,
                                 const ConvSpec& spec, const KernelPermutation& perm);

// Production forward of the operator: the im2col matrix is built from the
// per-cell cyclic differences and contracted with the untransformed weights.
// Numerically equal to conv2d with the transformed weights, and exactly zero
// on constant windows since each difference cancels before any product.
Tensor cpdc_conv(const Tensor& input, const Tensor& weight,
                 const std::optional<Tensor>& bias, const ConvSpec& spec,
                 const KernelPermutation& perm);

struct CpdcLayer {
  ConvSpec spec;  // 3x3 kernel, dilation 1
  KernelPermutation perm;
  Tensor weight;
  Tensor bias;  // undefined for bias-free layers

  CpdcLayer() = default;
  CpdcLayer(ParamRegistry& reg, const std::string& name, const ConvSpec& spec,
            CpdcVariant variant, bool with_bias, Rng& rng);

  // conv2d with the difference-transformed weights.
  Tensor forward(const Tensor& x) const;
};

// Four-branch residual block: each branch is CpdcLayer (C -> C/4) -> BN ->
// ReLU; branch outputs are concatenated back to C channels, fused by a 3x3
// convolution and added to the input.
struct CpdcBlock {
  int channels = 0;
  std::array<CpdcLayer, 4> branches;
  std::array<BatchNorm2d, 4> branch_bn;
  Conv2d fuse;

  CpdcBlock() = default;
  CpdcBlock(ParamRegistry& reg, const std::string& name, int channels,
            int branch_groups, Rng& rng);

  Tensor forward(const Tensor& x, bool training);
};

}  // namespace cpdnet
