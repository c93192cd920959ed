#include "cpdnet/cpdc.hpp"

#include <Eigen/Core>

#include <cstring>
#include <stdexcept>

namespace cpdnet {

namespace {

using RowMat = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using CMapMat = Eigen::Map<const RowMat>;

inline float sample_or_zero(const float* plane, int h, int w, int y, int x) {
  return (y >= 0 && y < h && x >= 0 && x < w) ? plane[static_cast<std::int64_t>(y) * w + x]
                                              : 0.0f;
}

// col[(ic, cell), p] = x(p + off(cell)) - x(p + off(perm(cell))).
void im2col_diff(const float* src, int channels, int h, int w, const ConvSpec& s,
                 const KernelPermutation& perm, int oh, int ow, float* col) {
  const std::int64_t plane = static_cast<std::int64_t>(h) * w;
  const std::int64_t ohw = static_cast<std::int64_t>(oh) * ow;
  std::int64_t r = 0;
  for (int c = 0; c < channels; ++c) {
    const float* cp = src + c * plane;
    for (int cell = 0; cell < 9; ++cell, ++r) {
      const int ky = cell / 3, kx = cell % 3;
      const int py = perm.map[cell] / 3, px = perm.map[cell] % 3;
      float* out = col + r * ohw;
      for (int oy = 0; oy < oh; ++oy) {
        const int base_y = oy * s.stride - s.padding;
        float* dst = out + static_cast<std::int64_t>(oy) * ow;
        for (int ox = 0; ox < ow; ++ox) {
          const int base_x = ox * s.stride - s.padding;
          dst[ox] = sample_or_zero(cp, h, w, base_y + ky, base_x + kx) -
                    sample_or_zero(cp, h, w, base_y + py, base_x + px);
        }
      }
    }
  }
}

// Adjoint of im2col_diff: scatter +g at off(cell), -g at off(perm(cell)).
void col2im_diff_add(const float* col, int channels, int h, int w, const ConvSpec& s,
                     const KernelPermutation& perm, int oh, int ow, float* dst) {
  const std::int64_t plane = static_cast<std::int64_t>(h) * w;
  const std::int64_t ohw = static_cast<std::int64_t>(oh) * ow;
  std::int64_t r = 0;
  for (int c = 0; c < channels; ++c) {
    float* cp = dst + c * plane;
    for (int cell = 0; cell < 9; ++cell, ++r) {
      const int ky = cell / 3, kx = cell % 3;
      const int py = perm.map[cell] / 3, px = perm.map[cell] % 3;
      const float* src = col + r * ohw;
      for (int oy = 0; oy < oh; ++oy) {
        const int iy_a = oy * s.stride - s.padding + ky;
        const int iy_b = oy * s.stride - s.padding + py;
        const float* srow = src + static_cast<std::int64_t>(oy) * ow;
        for (int ox = 0; ox < ow; ++ox) {
          const int ix_a = ox * s.stride - s.padding + kx;
          const int ix_b = ox * s.stride - s.padding + px;
          if (iy_a >= 0 && iy_a < h && ix_a >= 0 && ix_a < w) {
            cp[static_cast<std::int64_t>(iy_a) * w + ix_a] += srow[ox];
          }
          if (iy_b >= 0 && iy_b < h && ix_b >= 0 && ix_b < w) {
            cp[static_cast<std::int64_t>(iy_b) * w + ix_b] -= srow[ox];
          }
        }
      }
    }
  }
}

}  // namespace

const char* variant_name(CpdcVariant v) {
  switch (v) {
    case CpdcVariant::H: return "h";
    case CpdcVariant::V: return "v";
    case CpdcVariant::D: return "d";
    case CpdcVariant::C: return "c";
  }
  return "?";
}

CpdcVariant variant_from_name(const std::string& name) {
  if (name == "h" || name == "H") return CpdcVariant::H;
  if (name == "v" || name == "V") return CpdcVariant::V;
  if (name == "d" || name == "D") return CpdcVariant::D;
  if (name == "c" || name == "C") return CpdcVariant::C;
  throw std::invalid_argument("unknown CPDC variant '" + name + "'");
}

KernelPermutation KernelPermutation::make(CpdcVariant v) {
  KernelPermutation p;
  p.variant = v;
  switch (v) {
    case CpdcVariant::H:
      p.map = {1, 2, 0, 4, 5, 3, 7, 8, 6};
      break;
    case CpdcVariant::V:
      p.map = {3, 4, 5, 6, 7, 8, 0, 1, 2};
      break;
    case CpdcVariant::D:
      p.map = {8, 1, 6, 3, 4, 5, 2, 7, 0};
      break;
    case CpdcVariant::C:
      p.map = {0, 7, 2, 5, 4, 3, 6, 1, 8};
      break;
  }
  return p;
}

std::array<int, 9> KernelPermutation::inverse() const {
  std::array<int, 9> inv{};
  for (int i = 0; i < 9; ++i) inv[map[i]] = i;
  return inv;
}

bool KernelPermutation::is_bijection() const {
  std::array<bool, 9> seen{};
  for (int i = 0; i < 9; ++i) {
    if (map[i] < 0 || map[i] > 8 || seen[map[i]]) return false;
    seen[map[i]] = true;
  }
  return true;
}

Tensor cpdc_transform(const Tensor& weight, const KernelPermutation& perm) {
  const Shape& s = weight.shape();
  if (s.h != 3 || s.w != 3) {
    throw std::invalid_argument("cpdc_transform: kernel must be 3x3, got " + s.str());
  }
  Tensor out = Tensor::zeros(s);
  const std::int64_t slices = static_cast<std::int64_t>(s.n) * s.c;
  for (std::int64_t i = 0; i < slices; ++i) {
    transform_kernel_3x3(weight.data().data() + i * 9, perm, out.data().data() + i * 9);
  }
  if (grad_enabled_for(weight)) {
    out.set_requires_grad(true);
    Tensor w = weight, y = out;
    Tape::active()->record([w, y, perm]() mutable {
      // Adjoint of w'_j = w_j - w_{pi^-1(j)}:  gw_i += gy_i - gy_{pi(i)}.
      const std::int64_t slices = static_cast<std::int64_t>(w.shape().n) * w.shape().c;
      auto& gw = w.grad();
      const auto& gy = y.grad();
      for (std::int64_t sidx = 0; sidx < slices; ++sidx) {
        const float* g = gy.data() + sidx * 9;
        float* o = gw.data() + sidx * 9;
        for (int i = 0; i < 9; ++i) o[i] += g[i] - g[perm.map[i]];
      }
    });
  }
  return out;
}

template <typename T>
std::vector<T> cpdc_direct_sweep(const Tensor& input, const Tensor& weight,
                                 const ConvSpec& spec, const KernelPermutation& perm) {
  spec.validate();
  if (spec.kh != 3 || spec.kw != 3 || spec.dilation != 1) {
    throw std::invalid_argument("cpdc_direct_sweep: requires 3x3 kernel with dilation 1");
  }
  const Shape& xs = input.shape();
  const int oh = spec.out_h(xs.h), ow = spec.out_w(xs.w);
  const int g = spec.groups;
  const int cg = spec.in_channels / g;
  const int og = spec.out_channels / g;
  std::vector<T> out(static_cast<std::size_t>(xs.n) * spec.out_channels * oh * ow, T(0));

  T window[9], kernel[9];
  for (int n = 0; n < xs.n; ++n) {
    for (int gi = 0; gi < g; ++gi) {
      for (int ocl = 0; ocl < og; ++ocl) {
        const int oc = gi * og + ocl;
        for (int oy = 0; oy < oh; ++oy) {
          for (int ox = 0; ox < ow; ++ox) {
            T acc = T(0);
            for (int icl = 0; icl < cg; ++icl) {
              const int ic = gi * cg + icl;
              for (int ky = 0; ky < 3; ++ky) {
                for (int kx = 0; kx < 3; ++kx) {
                  const int iy = oy * spec.stride - spec.padding + ky;
                  const int ix = ox * spec.stride - spec.padding + kx;
                  window[ky * 3 + kx] =
                      (iy >= 0 && iy < xs.h && ix >= 0 && ix < xs.w)
                          ? static_cast<T>(input.at(n, ic, iy, ix))
                          : T(0);
                }
              }
              for (int i = 0; i < 9; ++i) {
                kernel[i] = static_cast<T>(weight.at(oc, icl, i / 3, i % 3));
              }
              acc += cpdc_direct(window, kernel, perm);
            }
            out[((static_cast<std::size_t>(n) * spec.out_channels + oc) * oh + oy) * ow + ox] = acc;
          }
        }
      }
    }
  }
  return out;
}

template std::vector<float> cpdc_direct_sweep<float>(const Tensor&, const Tensor&,
                                                     const ConvSpec&, const KernelPermutation&);
template std::vector<double> cpdc_direct_sweep<double>(const Tensor&, const Tensor&,
                                                       const ConvSpec&, const KernelPermutation&);

Tensor cpdc_conv(const Tensor& input, const Tensor& weight,
                 const std::optional<Tensor>& bias, const ConvSpec& spec,
                 const KernelPermutation& perm) {
  spec.validate();
  if (spec.kh != 3 || spec.kw != 3 || spec.dilation != 1) {
    throw std::invalid_argument("cpdc_conv: requires a 3x3 kernel with dilation 1");
  }
  const Shape& xs = input.shape();
  if (xs.c != spec.in_channels) {
    throw std::invalid_argument("cpdc_conv: input channel dim " + std::to_string(xs.c) +
                                " != spec.in_channels " + std::to_string(spec.in_channels));
  }
  if (!(weight.shape() == spec.weight_shape())) {
    throw std::invalid_argument("cpdc_conv: weight shape " + weight.shape().str() +
                                " != expected " + spec.weight_shape().str());
  }
  const int oh = spec.out_h(xs.h), ow = spec.out_w(xs.w);
  if (oh < 1 || ow < 1) {
    throw std::invalid_argument("cpdc_conv: output spatial dims must be >= 1 for input " +
                                xs.str());
  }
  const int g = spec.groups;
  const int cg = spec.in_channels / g;
  const int og = spec.out_channels / g;
  const std::int64_t k = static_cast<std::int64_t>(cg) * 9;
  const std::int64_t ohw = static_cast<std::int64_t>(oh) * ow;
  const std::int64_t in_plane = static_cast<std::int64_t>(xs.h) * xs.w;

  Tensor out = Tensor::zeros(Shape{xs.n, spec.out_channels, oh, ow});
  std::vector<float> col(static_cast<std::size_t>(k) * ohw);
  for (int n = 0; n < xs.n; ++n) {
    const float* xp = input.data().data() + static_cast<std::int64_t>(n) * xs.c * in_plane;
    float* yp = out.data().data() + static_cast<std::int64_t>(n) * spec.out_channels * ohw;
    for (int gi = 0; gi < g; ++gi) {
      im2col_diff(xp + static_cast<std::int64_t>(gi) * cg * in_plane, cg, xs.h, xs.w, spec,
                  perm, oh, ow, col.data());
      CMapMat wm(weight.data().data() + static_cast<std::int64_t>(gi) * og * k, og, k);
      CMapMat cm(col.data(), k, ohw);
      MapMat ym(yp + static_cast<std::int64_t>(gi) * og * ohw, og, ohw);
      ym.noalias() = wm * cm;
    }
    if (bias) {
      for (int oc = 0; oc < spec.out_channels; ++oc) {
        const float b = bias->data()[oc];
        float* row = yp + oc * ohw;
        for (std::int64_t i = 0; i < ohw; ++i) row[i] += b;
      }
    }
  }

  const bool need_x = grad_enabled_for(input);
  const bool need_w = grad_enabled_for(weight);
  const bool need_b = bias && grad_enabled_for(*bias);
  if (need_x || need_w || need_b) {
    out.set_requires_grad(true);
    Tensor x = input, w = weight, y = out;
    std::optional<Tensor> b = bias;
    Tape::active()->record([x, w, b, y, spec, perm, need_x, need_w, need_b]() mutable {
      const Shape& xs = x.shape();
      const int oh = y.shape().h, ow = y.shape().w;
      const int g = spec.groups;
      const int cg = spec.in_channels / g;
      const int og = spec.out_channels / g;
      const std::int64_t k = static_cast<std::int64_t>(cg) * 9;
      const std::int64_t ohw = static_cast<std::int64_t>(oh) * ow;
      const std::int64_t in_plane = static_cast<std::int64_t>(xs.h) * xs.w;
      const auto& gy = y.grad();

      if (need_b) {
        auto& gb = b->grad();
        for (int n = 0; n < xs.n; ++n) {
          for (int oc = 0; oc < spec.out_channels; ++oc) {
            const float* row =
                gy.data() + (static_cast<std::int64_t>(n) * spec.out_channels + oc) * ohw;
            double s = 0.0;
            for (std::int64_t i = 0; i < ohw; ++i) s += row[i];
            gb[oc] += static_cast<float>(s);
          }
        }
      }

      std::vector<float> col(static_cast<std::size_t>(k) * ohw);
      std::vector<float> gcol;
      if (need_x) gcol.resize(static_cast<std::size_t>(k) * ohw);
      for (int n = 0; n < xs.n; ++n) {
        const float* xp = x.data().data() + static_cast<std::int64_t>(n) * xs.c * in_plane;
        const float* gyp = gy.data() + static_cast<std::int64_t>(n) * spec.out_channels * ohw;
        for (int gi = 0; gi < g; ++gi) {
          CMapMat gym(gyp + static_cast<std::int64_t>(gi) * og * ohw, og, ohw);
          if (need_w) {
            im2col_diff(xp + static_cast<std::int64_t>(gi) * cg * in_plane, cg, xs.h, xs.w,
                        spec, perm, oh, ow, col.data());
            CMapMat cm(col.data(), k, ohw);
            MapMat gwm(w.grad().data() + static_cast<std::int64_t>(gi) * og * k, og, k);
            gwm.noalias() += gym * cm.transpose();
          }
          if (need_x) {
            CMapMat wm(w.data().data() + static_cast<std::int64_t>(gi) * og * k, og, k);
            MapMat gcm(gcol.data(), k, ohw);
            gcm.noalias() = wm.transpose() * gym;
            col2im_diff_add(gcol.data(), cg, xs.h, xs.w, spec, perm, oh, ow,
                            x.grad().data() + static_cast<std::int64_t>(n) * xs.c * in_plane +
                                static_cast<std::int64_t>(gi) * cg * in_plane);
          }
        }
      }
    });
  }
  return out;
}

CpdcLayer::CpdcLayer(ParamRegistry& reg, const std::string& name, const ConvSpec& sp,
                     CpdcVariant variant, bool with_bias, Rng& rng)
    : spec(sp), perm(KernelPermutation::make(variant)) {
  if (spec.kh != 3 || spec.kw != 3) {
    throw std::invalid_argument("CpdcLayer: kernel must be exactly 3x3");
  }
  if (spec.dilation != 1) {
    throw std::invalid_argument("CpdcLayer: dilation must be 1");
  }
  spec.validate();
  Tensor w = Tensor::zeros(spec.weight_shape());
  kaiming_uniform_(w, (spec.in_channels / spec.groups) * 9, rng);
  weight = reg.add_parameter(name + ".weight", w).value;
  if (with_bias) {
    bias = reg.add_parameter(name + ".bias", Tensor::zeros(Shape{1, spec.out_channels, 1, 1})).value;
  }
}

Tensor CpdcLayer::forward(const Tensor& x) const {
  if (bias.defined()) return cpdc_conv(x, weight, bias, spec, perm);
  return cpdc_conv(x, weight, std::nullopt, spec, perm);
}

CpdcBlock::CpdcBlock(ParamRegistry& reg, const std::string& name, int ch,
                     int branch_groups, Rng& rng)
    : channels(ch) {
  if (channels % 4 != 0) {
    throw std::invalid_argument("CpdcBlock: channel count " + std::to_string(channels) +
                                " not divisible by 4");
  }
  const int quarter = channels / 4;
  if (channels % branch_groups != 0 || quarter % branch_groups != 0) {
    throw std::invalid_argument("CpdcBlock: branch groups " + std::to_string(branch_groups) +
                                " incompatible with channel count " + std::to_string(channels));
  }
  const CpdcVariant variants[4] = {CpdcVariant::H, CpdcVariant::V, CpdcVariant::D,
                                   CpdcVariant::C};
  for (int i = 0; i < 4; ++i) {
    ConvSpec bs;
    bs.in_channels = channels;
    bs.out_channels = quarter;
    bs.kh = bs.kw = 3;
    bs.stride = 1;
    bs.padding = 1;
    bs.dilation = 1;
    bs.groups = branch_groups;
    // Branches are bias-free: the operator rejects constants and a bias
    // would re-introduce one; the fusion conv carries the bias instead.
    branches[i] = CpdcLayer(reg, name + ".cpdc_" + variant_name(variants[i]), bs,
                            variants[i], /*with_bias=*/false, rng);
    branch_bn[i] = BatchNorm2d(reg, name + ".bn_" + variant_name(variants[i]), quarter);
  }
  ConvSpec fs;
  fs.in_channels = channels;
  fs.out_channels = channels;
  fs.kh = fs.kw = 3;
  fs.stride = 1;
  fs.padding = 1;
  fuse = Conv2d(reg, name + ".fuse", fs, /*with_bias=*/true, rng);
}

Tensor CpdcBlock::forward(const Tensor& x, bool training) {
  if (x.shape().c != channels) {
    throw std::invalid_argument("CpdcBlock: input channels " + std::to_string(x.shape().c) +
                                " != block channels " + std::to_string(channels));
  }
  std::vector<Tensor> outs;
  outs.reserve(4);
  for (int i = 0; i < 4; ++i) {
    outs.push_back(relu(branch_bn[i].forward(branches[i].forward(x), training)));
  }
  return add(x, fuse.forward(concat_channels(outs)));
}

}  // namespace cpdnet
