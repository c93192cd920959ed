#include "cpdnet/ops.hpp"

#include <Eigen/Core>

#include <cmath>
#include <cstring>
#include <stdexcept>
#include <string>

namespace cpdnet {

namespace {

using RowMat = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using CMapMat = Eigen::Map<const RowMat>;

void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (!(a.shape() == b.shape())) {
    throw std::invalid_argument(std::string(op) + ": operand shapes differ, " +
                                a.shape().str() + " vs " + b.shape().str());
  }
}

void record_unary(const Tensor& x, Tensor& y, std::function<void()> fn) {
  if (grad_enabled_for(x)) {
    y.set_requires_grad(true);
    Tape::active()->record(std::move(fn));
  }
}

// im2col for one sample and one group: rows = cg*kh*kw, cols = oh*ow.
void im2col(const float* src, int channels, int h, int w, const ConvSpec& s,
            int oh, int ow, float* col) {
  const std::int64_t plane = static_cast<std::int64_t>(h) * w;
  std::int64_t r = 0;
  for (int c = 0; c < channels; ++c) {
    const float* cp = src + c * plane;
    for (int ky = 0; ky < s.kh; ++ky) {
      for (int kx = 0; kx < s.kw; ++kx, ++r) {
        float* out = col + r * static_cast<std::int64_t>(oh) * ow;
        for (int oy = 0; oy < oh; ++oy) {
          const int iy = oy * s.stride - s.padding + ky * s.dilation;
          if (iy < 0 || iy >= h) {
            std::memset(out + static_cast<std::int64_t>(oy) * ow, 0, sizeof(float) * ow);
            continue;
          }
          const float* row = cp + static_cast<std::int64_t>(iy) * w;
          float* dst = out + static_cast<std::int64_t>(oy) * ow;
          for (int ox = 0; ox < ow; ++ox) {
            const int ix = ox * s.stride - s.padding + kx * s.dilation;
            dst[ox] = (ix >= 0 && ix < w) ? row[ix] : 0.0f;
          }
        }
      }
    }
  }
}

// Adjoint of im2col: scatter-add col back into the input gradient.
void col2im_add(const float* col, int channels, int h, int w, const ConvSpec& s,
                int oh, int ow, float* dst) {
  const std::int64_t plane = static_cast<std::int64_t>(h) * w;
  std::int64_t r = 0;
  for (int c = 0; c < channels; ++c) {
    float* cp = dst + c * plane;
    for (int ky = 0; ky < s.kh; ++ky) {
      for (int kx = 0; kx < s.kw; ++kx, ++r) {
        const float* src = col + r * static_cast<std::int64_t>(oh) * ow;
        for (int oy = 0; oy < oh; ++oy) {
          const int iy = oy * s.stride - s.padding + ky * s.dilation;
          if (iy < 0 || iy >= h) continue;
          float* row = cp + static_cast<std::int64_t>(iy) * w;
          const float* srow = src + static_cast<std::int64_t>(oy) * ow;
          for (int ox = 0; ox < ow; ++ox) {
            const int ix = ox * s.stride - s.padding + kx * s.dilation;
            if (ix >= 0 && ix < w) row[ix] += srow[ox];
          }
        }
      }
    }
  }
}

bool is_pointwise(const ConvSpec& s) {
  return s.kh == 1 && s.kw == 1 && s.stride == 1 && s.padding == 0 && s.dilation == 1;
}

}  // namespace

void ConvSpec::validate() const {
  if (in_channels <= 0) throw std::invalid_argument("ConvSpec: in_channels must be positive");
  if (out_channels <= 0) throw std::invalid_argument("ConvSpec: out_channels must be positive");
  if (kh <= 0 || kw <= 0) throw std::invalid_argument("ConvSpec: kernel dims must be positive");
  if (stride <= 0) throw std::invalid_argument("ConvSpec: stride must be positive");
  if (padding < 0) throw std::invalid_argument("ConvSpec: padding must be non-negative");
  if (dilation <= 0) throw std::invalid_argument("ConvSpec: dilation must be positive");
  if (groups <= 0) throw std::invalid_argument("ConvSpec: groups must be positive");
  if (in_channels % groups != 0) {
    throw std::invalid_argument("ConvSpec: in_channels " + std::to_string(in_channels) +
                                " not divisible by groups " + std::to_string(groups));
  }
  if (out_channels % groups != 0) {
    throw std::invalid_argument("ConvSpec: out_channels " + std::to_string(out_channels) +
                                " not divisible by groups " + std::to_string(groups));
  }
}

int ConvSpec::out_h(int h) const {
  return (h + 2 * padding - dilation * (kh - 1) - 1) / stride + 1;
}

int ConvSpec::out_w(int w) const {
  return (w + 2 * padding - dilation * (kw - 1) - 1) / stride + 1;
}

Tensor conv2d(const Tensor& input, const Tensor& weight,
              const std::optional<Tensor>& bias, const ConvSpec& spec) {
  spec.validate();
  const Shape& xs = input.shape();
  if (xs.c != spec.in_channels) {
    throw std::invalid_argument("conv2d: input channel dim " + std::to_string(xs.c) +
                                " != spec.in_channels " + std::to_string(spec.in_channels));
  }
  const Shape want_w = spec.weight_shape();
  if (!(weight.shape() == want_w)) {
    throw std::invalid_argument("conv2d: weight shape " + weight.shape().str() +
                                " != expected " + want_w.str());
  }
  if (bias && !(bias->shape() == Shape{1, spec.out_channels, 1, 1})) {
    throw std::invalid_argument("conv2d: bias channel dim must be " +
                                std::to_string(spec.out_channels) + ", got shape " +
                                bias->shape().str());
  }
  const int oh = spec.out_h(xs.h);
  const int ow = spec.out_w(xs.w);
  if (oh < 1 || ow < 1) {
    throw std::invalid_argument("conv2d: output spatial dims " + std::to_string(oh) + "x" +
                                std::to_string(ow) + " must be >= 1 for input " + xs.str());
  }

  const int g = spec.groups;
  const int cg = spec.in_channels / g;
  const int og = spec.out_channels / g;
  const std::int64_t k = static_cast<std::int64_t>(cg) * spec.kh * spec.kw;
  const std::int64_t ohw = static_cast<std::int64_t>(oh) * ow;
  const std::int64_t in_plane = static_cast<std::int64_t>(xs.h) * xs.w;

  Tensor out = Tensor::zeros(Shape{xs.n, spec.out_channels, oh, ow});
  const bool pointwise = is_pointwise(spec);
  std::vector<float> col;
  if (!pointwise) col.resize(static_cast<std::size_t>(k) * ohw);

  for (int n = 0; n < xs.n; ++n) {
    const float* xp = input.data().data() + static_cast<std::int64_t>(n) * xs.c * in_plane;
    float* yp = out.data().data() + static_cast<std::int64_t>(n) * spec.out_channels * ohw;
    for (int gi = 0; gi < g; ++gi) {
      const float* xg = xp + static_cast<std::int64_t>(gi) * cg * in_plane;
      const float* colp;
      if (pointwise) {
        colp = xg;
      } else {
        im2col(xg, cg, xs.h, xs.w, spec, oh, ow, col.data());
        colp = col.data();
      }
      CMapMat wm(weight.data().data() + static_cast<std::int64_t>(gi) * og * k, og, k);
      CMapMat cm(colp, k, ohw);
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
    Tape::active()->record([x, w, b, y, spec, need_x, need_w, need_b]() mutable {
      const Shape& xs = x.shape();
      const int oh = y.shape().h, ow = y.shape().w;
      const int g = spec.groups;
      const int cg = spec.in_channels / g;
      const int og = spec.out_channels / g;
      const std::int64_t k = static_cast<std::int64_t>(cg) * spec.kh * spec.kw;
      const std::int64_t ohw = static_cast<std::int64_t>(oh) * ow;
      const std::int64_t in_plane = static_cast<std::int64_t>(xs.h) * xs.w;
      const bool pointwise = is_pointwise(spec);

      const std::vector<float>& gy = y.grad();
      std::vector<float> col, gcol;
      if (!pointwise) {
        col.resize(static_cast<std::size_t>(k) * ohw);
        if (need_x) gcol.resize(static_cast<std::size_t>(k) * ohw);
      }

      if (need_b) {
        std::vector<float>& gb = b->grad();
        for (int n = 0; n < xs.n; ++n) {
          for (int oc = 0; oc < spec.out_channels; ++oc) {
            const float* row = gy.data() + (static_cast<std::int64_t>(n) * spec.out_channels + oc) * ohw;
            double s = 0.0;
            for (std::int64_t i = 0; i < ohw; ++i) s += row[i];
            gb[oc] += static_cast<float>(s);
          }
        }
      }

      for (int n = 0; n < xs.n; ++n) {
        const float* xp = x.data().data() + static_cast<std::int64_t>(n) * xs.c * in_plane;
        const float* gyp = gy.data() + static_cast<std::int64_t>(n) * spec.out_channels * ohw;
        for (int gi = 0; gi < g; ++gi) {
          const float* xg = xp + static_cast<std::int64_t>(gi) * cg * in_plane;
          CMapMat gym(gyp + static_cast<std::int64_t>(gi) * og * ohw, og, ohw);
          if (need_w) {
            const float* colp;
            if (pointwise) {
              colp = xg;
            } else {
              im2col(xg, cg, xs.h, xs.w, spec, oh, ow, col.data());
              colp = col.data();
            }
            CMapMat cm(colp, k, ohw);
            MapMat gwm(w.grad().data() + static_cast<std::int64_t>(gi) * og * k, og, k);
            gwm.noalias() += gym * cm.transpose();
          }
          if (need_x) {
            CMapMat wm(w.data().data() + static_cast<std::int64_t>(gi) * og * k, og, k);
            if (pointwise) {
              MapMat gxm(x.grad().data() + static_cast<std::int64_t>(n) * xs.c * in_plane +
                             static_cast<std::int64_t>(gi) * cg * in_plane,
                         cg, ohw);
              gxm.noalias() += wm.transpose() * gym;
            } else {
              MapMat gcm(gcol.data(), k, ohw);
              gcm.noalias() = wm.transpose() * gym;
              col2im_add(gcol.data(), cg, xs.h, xs.w, spec, oh, ow,
                         x.grad().data() + static_cast<std::int64_t>(n) * xs.c * in_plane +
                             static_cast<std::int64_t>(gi) * cg * in_plane);
            }
          }
        }
      }
    });
  }
  return out;
}

Tensor relu(const Tensor& x) {
  Tensor y = Tensor::zeros(x.shape());
  const auto& xd = x.data();
  auto& yd = y.data();
  for (std::size_t i = 0; i < xd.size(); ++i) yd[i] = xd[i] > 0.0f ? xd[i] : 0.0f;
  record_unary(x, y, [x, y]() mutable {
    auto& gx = x.grad();
    const auto& gy = y.grad();
    const auto& xd = x.data();
    for (std::size_t i = 0; i < xd.size(); ++i)
      if (xd[i] > 0.0f) gx[i] += gy[i];
  });
  return y;
}

namespace {
constexpr float kGeluK = 0.7978845608028654f;  // sqrt(2/pi)
constexpr float kGeluA = 0.044715f;
}  // namespace

Tensor gelu(const Tensor& x) {
  Tensor y = Tensor::zeros(x.shape());
  const auto& xd = x.data();
  auto& yd = y.data();
  for (std::size_t i = 0; i < xd.size(); ++i) {
    const float v = xd[i];
    const float t = std::tanh(kGeluK * (v + kGeluA * v * v * v));
    yd[i] = 0.5f * v * (1.0f + t);
  }
  record_unary(x, y, [x, y]() mutable {
    auto& gx = x.grad();
    const auto& gy = y.grad();
    const auto& xd = x.data();
    for (std::size_t i = 0; i < xd.size(); ++i) {
      const float v = xd[i];
      const float t = std::tanh(kGeluK * (v + kGeluA * v * v * v));
      const float du = kGeluK * (1.0f + 3.0f * kGeluA * v * v);
      const float d = 0.5f * (1.0f + t) + 0.5f * v * (1.0f - t * t) * du;
      gx[i] += gy[i] * d;
    }
  });
  return y;
}

Tensor sigmoid(const Tensor& x) {
  Tensor y = Tensor::zeros(x.shape());
  const auto& xd = x.data();
  auto& yd = y.data();
  for (std::size_t i = 0; i < xd.size(); ++i) yd[i] = 1.0f / (1.0f + std::exp(-xd[i]));
  record_unary(x, y, [x, y]() mutable {
    auto& gx = x.grad();
    const auto& gy = y.grad();
    const auto& yd = y.data();
    for (std::size_t i = 0; i < yd.size(); ++i) gx[i] += gy[i] * yd[i] * (1.0f - yd[i]);
  });
  return y;
}

Tensor add(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "add");
  Tensor y = Tensor::zeros(a.shape());
  const auto& ad = a.data();
  const auto& bd = b.data();
  auto& yd = y.data();
  for (std::size_t i = 0; i < ad.size(); ++i) yd[i] = ad[i] + bd[i];
  const bool na = grad_enabled_for(a), nb = grad_enabled_for(b);
  if (na || nb) {
    y.set_requires_grad(true);
    Tensor ta = a, tb = b, ty = y;
    Tape::active()->record([ta, tb, ty, na, nb]() mutable {
      const auto& gy = ty.grad();
      if (na) {
        auto& ga = ta.grad();
        for (std::size_t i = 0; i < gy.size(); ++i) ga[i] += gy[i];
      }
      if (nb) {
        auto& gb = tb.grad();
        for (std::size_t i = 0; i < gy.size(); ++i) gb[i] += gy[i];
      }
    });
  }
  return y;
}

Tensor sub(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "sub");
  Tensor y = Tensor::zeros(a.shape());
  const auto& ad = a.data();
  const auto& bd = b.data();
  auto& yd = y.data();
  for (std::size_t i = 0; i < ad.size(); ++i) yd[i] = ad[i] - bd[i];
  const bool na = grad_enabled_for(a), nb = grad_enabled_for(b);
  if (na || nb) {
    y.set_requires_grad(true);
    Tensor ta = a, tb = b, ty = y;
    Tape::active()->record([ta, tb, ty, na, nb]() mutable {
      const auto& gy = ty.grad();
      if (na) {
        auto& ga = ta.grad();
        for (std::size_t i = 0; i < gy.size(); ++i) ga[i] += gy[i];
      }
      if (nb) {
        auto& gb = tb.grad();
        for (std::size_t i = 0; i < gy.size(); ++i) gb[i] -= gy[i];
      }
    });
  }
  return y;
}

Tensor mul(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "mul");
  Tensor y = Tensor::zeros(a.shape());
  const auto& ad = a.data();
  const auto& bd = b.data();
  auto& yd = y.data();
  for (std::size_t i = 0; i < ad.size(); ++i) yd[i] = ad[i] * bd[i];
  const bool na = grad_enabled_for(a), nb = grad_enabled_for(b);
  if (na || nb) {
    y.set_requires_grad(true);
    Tensor ta = a, tb = b, ty = y;
    Tape::active()->record([ta, tb, ty, na, nb]() mutable {
      const auto& gy = ty.grad();
      const auto& ad = ta.data();
      const auto& bd = tb.data();
      if (na) {
        auto& ga = ta.grad();
        for (std::size_t i = 0; i < gy.size(); ++i) ga[i] += gy[i] * bd[i];
      }
      if (nb) {
        auto& gb = tb.grad();
        for (std::size_t i = 0; i < gy.size(); ++i) gb[i] += gy[i] * ad[i];
      }
    });
  }
  return y;
}

Tensor scale(const Tensor& x, float a) {
  Tensor y = Tensor::zeros(x.shape());
  const auto& xd = x.data();
  auto& yd = y.data();
  for (std::size_t i = 0; i < xd.size(); ++i) yd[i] = xd[i] * a;
  record_unary(x, y, [x, y, a]() mutable {
    auto& gx = x.grad();
    const auto& gy = y.grad();
    for (std::size_t i = 0; i < gy.size(); ++i) gx[i] += gy[i] * a;
  });
  return y;
}

Tensor add_scalar(const Tensor& x, float c) {
  Tensor y = Tensor::zeros(x.shape());
  const auto& xd = x.data();
  auto& yd = y.data();
  for (std::size_t i = 0; i < xd.size(); ++i) yd[i] = xd[i] + c;
  record_unary(x, y, [x, y]() mutable {
    auto& gx = x.grad();
    const auto& gy = y.grad();
    for (std::size_t i = 0; i < gy.size(); ++i) gx[i] += gy[i];
  });
  return y;
}

Tensor pow_scalar(const Tensor& x, float e) {
  Tensor y = Tensor::zeros(x.shape());
  const auto& xd = x.data();
  auto& yd = y.data();
  for (std::size_t i = 0; i < xd.size(); ++i) yd[i] = std::pow(xd[i], e);
  record_unary(x, y, [x, y, e]() mutable {
    auto& gx = x.grad();
    const auto& gy = y.grad();
    const auto& xd = x.data();
    for (std::size_t i = 0; i < gy.size(); ++i) {
      gx[i] += gy[i] * e * std::pow(xd[i], e - 1.0f);
    }
  });
  return y;
}

Tensor log_op(const Tensor& x) {
  Tensor y = Tensor::zeros(x.shape());
  const auto& xd = x.data();
  auto& yd = y.data();
  for (std::size_t i = 0; i < xd.size(); ++i) yd[i] = std::log(xd[i]);
  record_unary(x, y, [x, y]() mutable {
    auto& gx = x.grad();
    const auto& gy = y.grad();
    const auto& xd = x.data();
    for (std::size_t i = 0; i < gy.size(); ++i) gx[i] += gy[i] / xd[i];
  });
  return y;
}

Tensor clamp(const Tensor& x, float lo, float hi) {
  if (lo > hi) throw std::invalid_argument("clamp: lo > hi");
  Tensor y = Tensor::zeros(x.shape());
  const auto& xd = x.data();
  auto& yd = y.data();
  for (std::size_t i = 0; i < xd.size(); ++i) {
    yd[i] = xd[i] < lo ? lo : (xd[i] > hi ? hi : xd[i]);
  }
  record_unary(x, y, [x, y, lo, hi]() mutable {
    auto& gx = x.grad();
    const auto& gy = y.grad();
    const auto& xd = x.data();
    for (std::size_t i = 0; i < gy.size(); ++i) {
      if (xd[i] >= lo && xd[i] <= hi) gx[i] += gy[i];
    }
  });
  return y;
}

Tensor sum_all(const Tensor& x) {
  Tensor y = Tensor::zeros(Shape{1, 1, 1, 1});
  double s = 0.0;
  for (float v : x.data()) s += v;
  y.data()[0] = static_cast<float>(s);
  record_unary(x, y, [x, y]() mutable {
    auto& gx = x.grad();
    const float g = y.grad()[0];
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += g;
  });
  return y;
}

Tensor global_avg_pool(const Tensor& x) {
  const Shape& s = x.shape();
  Tensor y = Tensor::zeros(Shape{s.n, s.c, 1, 1});
  const std::int64_t plane = static_cast<std::int64_t>(s.h) * s.w;
  for (int n = 0; n < s.n; ++n) {
    for (int c = 0; c < s.c; ++c) {
      const float* p = x.data().data() + (static_cast<std::int64_t>(n) * s.c + c) * plane;
      double acc = 0.0;
      for (std::int64_t i = 0; i < plane; ++i) acc += p[i];
      y.data()[static_cast<std::int64_t>(n) * s.c + c] = static_cast<float>(acc / plane);
    }
  }
  record_unary(x, y, [x, y]() mutable {
    const Shape& s = x.shape();
    const std::int64_t plane = static_cast<std::int64_t>(s.h) * s.w;
    auto& gx = x.grad();
    const auto& gy = y.grad();
    for (int n = 0; n < s.n; ++n) {
      for (int c = 0; c < s.c; ++c) {
        const float g = gy[static_cast<std::int64_t>(n) * s.c + c] / plane;
        float* p = gx.data() + (static_cast<std::int64_t>(n) * s.c + c) * plane;
        for (std::int64_t i = 0; i < plane; ++i) p[i] += g;
      }
    }
  });
  return y;
}

Tensor scale_channels(const Tensor& x, const Tensor& gate) {
  const Shape& s = x.shape();
  if (!(gate.shape() == Shape{s.n, s.c, 1, 1})) {
    throw std::invalid_argument("scale_channels: gate shape " + gate.shape().str() +
                                " must be " + Shape{s.n, s.c, 1, 1}.str());
  }
  Tensor y = Tensor::zeros(s);
  const std::int64_t plane = static_cast<std::int64_t>(s.h) * s.w;
  for (int n = 0; n < s.n; ++n) {
    for (int c = 0; c < s.c; ++c) {
      const float g = gate.data()[static_cast<std::int64_t>(n) * s.c + c];
      const float* xp = x.data().data() + (static_cast<std::int64_t>(n) * s.c + c) * plane;
      float* yp = y.data().data() + (static_cast<std::int64_t>(n) * s.c + c) * plane;
      for (std::int64_t i = 0; i < plane; ++i) yp[i] = xp[i] * g;
    }
  }
  const bool nx = grad_enabled_for(x), ng = grad_enabled_for(gate);
  if (nx || ng) {
    y.set_requires_grad(true);
    Tensor tx = x, tg = gate, ty = y;
    Tape::active()->record([tx, tg, ty, nx, ng]() mutable {
      const Shape& s = tx.shape();
      const std::int64_t plane = static_cast<std::int64_t>(s.h) * s.w;
      const auto& gy = ty.grad();
      for (int n = 0; n < s.n; ++n) {
        for (int c = 0; c < s.c; ++c) {
          const std::int64_t base = (static_cast<std::int64_t>(n) * s.c + c) * plane;
          const float g = tg.data()[static_cast<std::int64_t>(n) * s.c + c];
          if (nx) {
            auto& gx = tx.grad();
            for (std::int64_t i = 0; i < plane; ++i) gx[base + i] += gy[base + i] * g;
          }
          if (ng) {
            double acc = 0.0;
            for (std::int64_t i = 0; i < plane; ++i)
              acc += static_cast<double>(gy[base + i]) * tx.data()[base + i];
            tg.grad()[static_cast<std::int64_t>(n) * s.c + c] += static_cast<float>(acc);
          }
        }
      }
    });
  }
  return y;
}

Tensor channel_mean(const Tensor& x) {
  const Shape& s = x.shape();
  if (s.h != 1 || s.w != 1) {
    throw std::invalid_argument("channel_mean: expected NxCx1x1 input, got " + s.str());
  }
  Tensor y = Tensor::zeros(Shape{s.n, 1, 1, 1});
  for (int n = 0; n < s.n; ++n) {
    double acc = 0.0;
    for (int c = 0; c < s.c; ++c) acc += x.data()[static_cast<std::int64_t>(n) * s.c + c];
    y.data()[n] = static_cast<float>(acc / s.c);
  }
  record_unary(x, y, [x, y]() mutable {
    const Shape& s = x.shape();
    auto& gx = x.grad();
    const auto& gy = y.grad();
    for (int n = 0; n < s.n; ++n) {
      const float g = gy[n] / s.c;
      for (int c = 0; c < s.c; ++c) gx[static_cast<std::int64_t>(n) * s.c + c] += g;
    }
  });
  return y;
}

Tensor channel_affine(const Tensor& x, const Tensor& gamma, const Tensor& beta) {
  const Shape& s = x.shape();
  const Shape chan{1, s.c, 1, 1};
  if (!(gamma.shape() == chan) || !(beta.shape() == chan)) {
    throw std::invalid_argument("channel_affine: gamma/beta must have shape " + chan.str());
  }
  Tensor y = Tensor::zeros(s);
  const std::int64_t plane = static_cast<std::int64_t>(s.h) * s.w;
  for (int n = 0; n < s.n; ++n) {
    for (int c = 0; c < s.c; ++c) {
      const float g = gamma.data()[c], b = beta.data()[c];
      const std::int64_t base = (static_cast<std::int64_t>(n) * s.c + c) * plane;
      for (std::int64_t i = 0; i < plane; ++i) y.data()[base + i] = x.data()[base + i] * g + b;
    }
  }
  const bool nx = grad_enabled_for(x);
  const bool ng = grad_enabled_for(gamma);
  const bool nb = grad_enabled_for(beta);
  if (nx || ng || nb) {
    y.set_requires_grad(true);
    Tensor tx = x, tg = gamma, tb = beta, ty = y;
    Tape::active()->record([tx, tg, tb, ty, nx, ng, nb]() mutable {
      const Shape& s = tx.shape();
      const std::int64_t plane = static_cast<std::int64_t>(s.h) * s.w;
      const auto& gy = ty.grad();
      for (int c = 0; c < s.c; ++c) {
        const float g = tg.data()[c];
        double gacc = 0.0, bacc = 0.0;
        for (int n = 0; n < s.n; ++n) {
          const std::int64_t base = (static_cast<std::int64_t>(n) * s.c + c) * plane;
          for (std::int64_t i = 0; i < plane; ++i) {
            if (nx) tx.grad()[base + i] += gy[base + i] * g;
            gacc += static_cast<double>(gy[base + i]) * tx.data()[base + i];
            bacc += gy[base + i];
          }
        }
        if (ng) tg.grad()[c] += static_cast<float>(gacc);
        if (nb) tb.grad()[c] += static_cast<float>(bacc);
      }
    });
  }
  return y;
}

Tensor div_broadcast(const Tensor& x, const Tensor& d) {
  const Shape& s = x.shape();
  if (s.h != 1 || s.w != 1) {
    throw std::invalid_argument("div_broadcast: expected NxCx1x1 numerator, got " + s.str());
  }
  if (!(d.shape() == Shape{s.n, 1, 1, 1})) {
    throw std::invalid_argument("div_broadcast: divisor shape " + d.shape().str() +
                                " must be " + Shape{s.n, 1, 1, 1}.str());
  }
  Tensor y = Tensor::zeros(s);
  for (int n = 0; n < s.n; ++n) {
    const float dv = d.data()[n];
    for (int c = 0; c < s.c; ++c) {
      y.data()[static_cast<std::int64_t>(n) * s.c + c] =
          x.data()[static_cast<std::int64_t>(n) * s.c + c] / dv;
    }
  }
  const bool nx = grad_enabled_for(x), nd = grad_enabled_for(d);
  if (nx || nd) {
    y.set_requires_grad(true);
    Tensor tx = x, td = d, ty = y;
    Tape::active()->record([tx, td, ty, nx, nd]() mutable {
      const Shape& s = tx.shape();
      const auto& gy = ty.grad();
      for (int n = 0; n < s.n; ++n) {
        const float dv = td.data()[n];
        double dacc = 0.0;
        for (int c = 0; c < s.c; ++c) {
          const std::int64_t i = static_cast<std::int64_t>(n) * s.c + c;
          if (nx) tx.grad()[i] += gy[i] / dv;
          if (nd) dacc -= static_cast<double>(gy[i]) * tx.data()[i] / (static_cast<double>(dv) * dv);
        }
        if (nd) td.grad()[n] += static_cast<float>(dacc);
      }
    });
  }
  return y;
}

Tensor concat_channels(const std::vector<Tensor>& inputs) {
  if (inputs.empty()) throw std::invalid_argument("concat_channels: empty input list");
  const Shape& s0 = inputs[0].shape();
  int total_c = 0;
  for (const Tensor& t : inputs) {
    const Shape& s = t.shape();
    if (s.n != s0.n || s.h != s0.h || s.w != s0.w) {
      throw std::invalid_argument("concat_channels: spatial/batch mismatch, " + s.str() +
                                  " vs " + s0.str());
    }
    total_c += s.c;
  }
  Tensor y = Tensor::zeros(Shape{s0.n, total_c, s0.h, s0.w});
  const std::int64_t plane = static_cast<std::int64_t>(s0.h) * s0.w;
  for (int n = 0; n < s0.n; ++n) {
    std::int64_t coff = 0;
    for (const Tensor& t : inputs) {
      const int c = t.shape().c;
      std::memcpy(y.data().data() + (static_cast<std::int64_t>(n) * total_c + coff) * plane,
                  t.data().data() + static_cast<std::int64_t>(n) * c * plane,
                  sizeof(float) * c * plane);
      coff += c;
    }
  }
  bool any = false;
  for (const Tensor& t : inputs) any = any || grad_enabled_for(t);
  if (any) {
    y.set_requires_grad(true);
    std::vector<Tensor> ins = inputs;
    Tensor ty = y;
    Tape::active()->record([ins, ty, total_c, plane]() mutable {
      const auto& gy = ty.grad();
      const int n_batch = ty.shape().n;
      for (int n = 0; n < n_batch; ++n) {
        std::int64_t coff = 0;
        for (Tensor& t : ins) {
          const int c = t.shape().c;
          if (t.requires_grad()) {
            auto& gx = t.grad();
            const float* src = gy.data() + (static_cast<std::int64_t>(n) * total_c + coff) * plane;
            float* dst = gx.data() + static_cast<std::int64_t>(n) * c * plane;
            for (std::int64_t i = 0; i < c * plane; ++i) dst[i] += src[i];
          }
          coff += c;
        }
      }
    });
  }
  return y;
}

Tensor upsample_bilinear(const Tensor& x, int factor) {
  if (factor < 1) throw std::invalid_argument("upsample_bilinear: factor must be >= 1");
  if (factor == 1) {
    // Identity, but still a distinct node so gradients flow.
    return scale(x, 1.0f);
  }
  const Shape& s = x.shape();
  const int oh = s.h * factor, ow = s.w * factor;
  Tensor y = Tensor::zeros(Shape{s.n, s.c, oh, ow});

  // Precompute source indices/weights per output row and column
  // (align_corners=false convention).
  std::vector<int> y0(oh), y1(oh), x0(ow), x1(ow);
  std::vector<float> wy(oh), wx(ow);
  for (int oy = 0; oy < oh; ++oy) {
    float sy = (oy + 0.5f) / factor - 0.5f;
    if (sy < 0.0f) sy = 0.0f;
    if (sy > s.h - 1) sy = static_cast<float>(s.h - 1);
    y0[oy] = static_cast<int>(sy);
    y1[oy] = std::min(y0[oy] + 1, s.h - 1);
    wy[oy] = sy - y0[oy];
  }
  for (int ox = 0; ox < ow; ++ox) {
    float sx = (ox + 0.5f) / factor - 0.5f;
    if (sx < 0.0f) sx = 0.0f;
    if (sx > s.w - 1) sx = static_cast<float>(s.w - 1);
    x0[ox] = static_cast<int>(sx);
    x1[ox] = std::min(x0[ox] + 1, s.w - 1);
    wx[ox] = sx - x0[ox];
  }

  const std::int64_t in_plane = static_cast<std::int64_t>(s.h) * s.w;
  const std::int64_t out_plane = static_cast<std::int64_t>(oh) * ow;
  for (std::int64_t nc = 0; nc < static_cast<std::int64_t>(s.n) * s.c; ++nc) {
    const float* xp = x.data().data() + nc * in_plane;
    float* yp = y.data().data() + nc * out_plane;
    for (int oy = 0; oy < oh; ++oy) {
      const float* r0 = xp + static_cast<std::int64_t>(y0[oy]) * s.w;
      const float* r1 = xp + static_cast<std::int64_t>(y1[oy]) * s.w;
      const float fy = wy[oy];
      float* out = yp + static_cast<std::int64_t>(oy) * ow;
      for (int ox = 0; ox < ow; ++ox) {
        const float fx = wx[ox];
        const float top = r0[x0[ox]] * (1.0f - fx) + r0[x1[ox]] * fx;
        const float bot = r1[x0[ox]] * (1.0f - fx) + r1[x1[ox]] * fx;
        out[ox] = top * (1.0f - fy) + bot * fy;
      }
    }
  }

  record_unary(x, y, [x, y, factor, y0, y1, x0, x1, wy, wx]() mutable {
    const Shape& s = x.shape();
    const int oh = s.h * factor, ow = s.w * factor;
    const std::int64_t in_plane = static_cast<std::int64_t>(s.h) * s.w;
    const std::int64_t out_plane = static_cast<std::int64_t>(oh) * ow;
    auto& gx = x.grad();
    const auto& gy = y.grad();
    for (std::int64_t nc = 0; nc < static_cast<std::int64_t>(s.n) * s.c; ++nc) {
      float* gxp = gx.data() + nc * in_plane;
      const float* gyp = gy.data() + nc * out_plane;
      for (int oy = 0; oy < oh; ++oy) {
        const float fy = wy[oy];
        const float* grow = gyp + static_cast<std::int64_t>(oy) * ow;
        float* r0 = gxp + static_cast<std::int64_t>(y0[oy]) * s.w;
        float* r1 = gxp + static_cast<std::int64_t>(y1[oy]) * s.w;
        for (int ox = 0; ox < ow; ++ox) {
          const float fx = wx[ox];
          const float g = grow[ox];
          r0[x0[ox]] += g * (1.0f - fy) * (1.0f - fx);
          r0[x1[ox]] += g * (1.0f - fy) * fx;
          r1[x0[ox]] += g * fy * (1.0f - fx);
          r1[x1[ox]] += g * fy * fx;
        }
      }
    }
  });
  return y;
}

Tensor batch_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                  Tensor& running_mean, Tensor& running_var, bool training,
                  float momentum, float eps) {
  const Shape& s = x.shape();
  const Shape chan{1, s.c, 1, 1};
  if (!(gamma.shape() == chan) || !(beta.shape() == chan)) {
    throw std::invalid_argument("batch_norm: gamma/beta must have shape " + chan.str());
  }
  if (!(running_mean.shape() == chan) || !(running_var.shape() == chan)) {
    throw std::invalid_argument("batch_norm: running stats must have shape " + chan.str());
  }
  const std::int64_t plane = static_cast<std::int64_t>(s.h) * s.w;
  const std::int64_t count = static_cast<std::int64_t>(s.n) * plane;
  if (count <= 0) throw std::invalid_argument("batch_norm: zero-size batch rejected");

  std::vector<float> mean(s.c), inv_std(s.c);
  if (training) {
    for (int c = 0; c < s.c; ++c) {
      double acc = 0.0;
      for (int n = 0; n < s.n; ++n) {
        const float* p = x.data().data() + (static_cast<std::int64_t>(n) * s.c + c) * plane;
        for (std::int64_t i = 0; i < plane; ++i) acc += p[i];
      }
      const double mu = acc / count;
      double vacc = 0.0;
      for (int n = 0; n < s.n; ++n) {
        const float* p = x.data().data() + (static_cast<std::int64_t>(n) * s.c + c) * plane;
        for (std::int64_t i = 0; i < plane; ++i) {
          const double d = p[i] - mu;
          vacc += d * d;
        }
      }
      const double var = vacc / count;
      mean[c] = static_cast<float>(mu);
      inv_std[c] = static_cast<float>(1.0 / std::sqrt(var + eps));
      const double var_unbiased = count > 1 ? vacc / (count - 1) : var;
      running_mean.data()[c] =
          (1.0f - momentum) * running_mean.data()[c] + momentum * static_cast<float>(mu);
      running_var.data()[c] =
          (1.0f - momentum) * running_var.data()[c] + momentum * static_cast<float>(var_unbiased);
    }
  } else {
    for (int c = 0; c < s.c; ++c) {
      mean[c] = running_mean.data()[c];
      inv_std[c] = 1.0f / std::sqrt(running_var.data()[c] + eps);
    }
  }

  Tensor y = Tensor::zeros(s);
  for (int n = 0; n < s.n; ++n) {
    for (int c = 0; c < s.c; ++c) {
      const float* p = x.data().data() + (static_cast<std::int64_t>(n) * s.c + c) * plane;
      float* q = y.data().data() + (static_cast<std::int64_t>(n) * s.c + c) * plane;
      const float g = gamma.data()[c], b = beta.data()[c], m = mean[c], is = inv_std[c];
      for (std::int64_t i = 0; i < plane; ++i) q[i] = (p[i] - m) * is * g + b;
    }
  }

  const bool nx = grad_enabled_for(x);
  const bool ng = grad_enabled_for(gamma);
  const bool nb = grad_enabled_for(beta);
  if (nx || ng || nb) {
    y.set_requires_grad(true);
    Tensor tx = x, tg = gamma, tb = beta, ty = y;
    Tape::active()->record([tx, tg, tb, ty, mean, inv_std, training, nx, ng, nb]() mutable {
      const Shape& s = tx.shape();
      const std::int64_t plane = static_cast<std::int64_t>(s.h) * s.w;
      const std::int64_t count = static_cast<std::int64_t>(s.n) * plane;
      const auto& gy = ty.grad();
      for (int c = 0; c < s.c; ++c) {
        const float m = mean[c], is = inv_std[c], g = tg.data()[c];
        double sum_gy = 0.0, sum_gy_xhat = 0.0;
        for (int n = 0; n < s.n; ++n) {
          const std::int64_t base = (static_cast<std::int64_t>(n) * s.c + c) * plane;
          for (std::int64_t i = 0; i < plane; ++i) {
            const double xhat = (tx.data()[base + i] - m) * is;
            sum_gy += gy[base + i];
            sum_gy_xhat += gy[base + i] * xhat;
          }
        }
        if (ng) tg.grad()[c] += static_cast<float>(sum_gy_xhat);
        if (nb) tb.grad()[c] += static_cast<float>(sum_gy);
        if (nx) {
          auto& gx = tx.grad();
          if (training) {
            const double mean_gy = sum_gy / count;
            const double mean_gy_xhat = sum_gy_xhat / count;
            for (int n = 0; n < s.n; ++n) {
              const std::int64_t base = (static_cast<std::int64_t>(n) * s.c + c) * plane;
              for (std::int64_t i = 0; i < plane; ++i) {
                const double xhat = (tx.data()[base + i] - m) * is;
                gx[base + i] += static_cast<float>(
                    g * is * (gy[base + i] - mean_gy - xhat * mean_gy_xhat));
              }
            }
          } else {
            const float k = g * is;
            for (int n = 0; n < s.n; ++n) {
              const std::int64_t base = (static_cast<std::int64_t>(n) * s.c + c) * plane;
              for (std::int64_t i = 0; i < plane; ++i) gx[base + i] += gy[base + i] * k;
            }
          }
        }
      }
    });
  }
  return y;
}

Tensor layer_norm_channels(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                           float eps) {
  const Shape& s = x.shape();
  const Shape chan{1, s.c, 1, 1};
  if (!(gamma.shape() == chan) || !(beta.shape() == chan)) {
    throw std::invalid_argument("layer_norm_channels: gamma/beta must have shape " + chan.str());
  }
  const std::int64_t plane = static_cast<std::int64_t>(s.h) * s.w;
  Tensor y = Tensor::zeros(s);
  // Per-location statistics are recomputed in the backward pass.
  for (int n = 0; n < s.n; ++n) {
    for (std::int64_t i = 0; i < plane; ++i) {
      double acc = 0.0;
      for (int c = 0; c < s.c; ++c)
        acc += x.data()[(static_cast<std::int64_t>(n) * s.c + c) * plane + i];
      const double mu = acc / s.c;
      double vacc = 0.0;
      for (int c = 0; c < s.c; ++c) {
        const double d = x.data()[(static_cast<std::int64_t>(n) * s.c + c) * plane + i] - mu;
        vacc += d * d;
      }
      const double is = 1.0 / std::sqrt(vacc / s.c + eps);
      for (int c = 0; c < s.c; ++c) {
        const std::int64_t idx = (static_cast<std::int64_t>(n) * s.c + c) * plane + i;
        y.data()[idx] = static_cast<float>((x.data()[idx] - mu) * is) * gamma.data()[c] +
                        beta.data()[c];
      }
    }
  }
  const bool nx = grad_enabled_for(x);
  const bool ng = grad_enabled_for(gamma);
  const bool nb = grad_enabled_for(beta);
  if (nx || ng || nb) {
    y.set_requires_grad(true);
    Tensor tx = x, tg = gamma, tb = beta, ty = y;
    Tape::active()->record([tx, tg, tb, ty, eps, nx, ng, nb]() mutable {
      const Shape& s = tx.shape();
      const std::int64_t plane = static_cast<std::int64_t>(s.h) * s.w;
      const auto& gy = ty.grad();
      for (int n = 0; n < s.n; ++n) {
        for (std::int64_t i = 0; i < plane; ++i) {
          double acc = 0.0;
          for (int c = 0; c < s.c; ++c)
            acc += tx.data()[(static_cast<std::int64_t>(n) * s.c + c) * plane + i];
          const double mu = acc / s.c;
          double vacc = 0.0;
          for (int c = 0; c < s.c; ++c) {
            const double d = tx.data()[(static_cast<std::int64_t>(n) * s.c + c) * plane + i] - mu;
            vacc += d * d;
          }
          const double is = 1.0 / std::sqrt(vacc / s.c + eps);
          double m1 = 0.0, m2 = 0.0;
          for (int c = 0; c < s.c; ++c) {
            const std::int64_t idx = (static_cast<std::int64_t>(n) * s.c + c) * plane + i;
            const double xhat = (tx.data()[idx] - mu) * is;
            const double dyh = static_cast<double>(gy[idx]) * tg.data()[c];
            m1 += dyh;
            m2 += dyh * xhat;
            if (ng) tg.grad()[c] += static_cast<float>(gy[idx] * xhat);
            if (nb) tb.grad()[c] += gy[idx];
          }
          if (nx) {
            m1 /= s.c;
            m2 /= s.c;
            for (int c = 0; c < s.c; ++c) {
              const std::int64_t idx = (static_cast<std::int64_t>(n) * s.c + c) * plane + i;
              const double xhat = (tx.data()[idx] - mu) * is;
              const double dyh = static_cast<double>(gy[idx]) * tg.data()[c];
              tx.grad()[idx] += static_cast<float>(is * (dyh - m1 - xhat * m2));
            }
          }
        }
      }
    });
  }
  return y;
}

}  // namespace cpdnet
