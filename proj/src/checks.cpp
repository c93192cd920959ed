#include "cpdnet/checks.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <stdexcept>

#include "cpdnet/cpdc.hpp"
#include "cpdnet/gradcheck.hpp"
#include "cpdnet/model.hpp"
#include "cpdnet/rng.hpp"

namespace cpdnet::checks {

double scalar_focal_tversky(const std::vector<float>& pred, const std::vector<float>& target,
                            const HflConfig& cfg) {
  double tp = 0.0, fp_term = 0.0, fn_term = 0.0, fp_sum = 0.0, fn_sum = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const double p = pred[i], g = target[i];
    tp += p * g;
    const double fp = p * (1.0 - g);
    const double fn = (1.0 - p) * g;
    fp_term += fp * fp;
    fn_term += fn * fn;
    fp_sum += fp;
    fn_sum += fn;
  }
  if (cfg.square_of_sum) {
    fp_term = fp_sum * fp_sum;
    fn_term = fn_sum * fn_sum;
  }
  const double c = cfg.c_stab;
  const double numer = tp + (1.0 - cfg.beta) * fp_term + cfg.beta * fn_term + c;
  const double denom = tp + c;
  return std::pow(numer / denom, static_cast<double>(cfg.gamma));
}

double scalar_focal_loss(const std::vector<float>& pred, const std::vector<float>& target,
                         const HflConfig& cfg) {
  double acc = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const double p = std::clamp(static_cast<double>(pred[i]), 1e-7, 1.0 - 1e-7);
    const double g = target[i];
    acc += std::pow(1.0 - p, static_cast<double>(cfg.delta)) * g * std::log(p) +
           std::pow(p, static_cast<double>(cfg.delta)) * (1.0 - g) * std::log(1.0 - p);
  }
  return -static_cast<double>(cfg.omega) * acc;
}

double scalar_hybrid_focal(const std::vector<float>& pred, const std::vector<float>& target,
                           const HflConfig& cfg) {
  return scalar_focal_tversky(pred, target, cfg) +
         static_cast<double>(cfg.lambda) * scalar_focal_loss(pred, target, cfg);
}

double scalar_wce(const std::vector<float>& pred, const std::vector<float>& target,
                  int n_images) {
  if (n_images < 1 || pred.size() % n_images != 0) {
    throw std::invalid_argument("scalar_wce: buffer not divisible into images");
  }
  const std::size_t per_image = pred.size() / n_images;
  double acc = 0.0;
  for (int n = 0; n < n_images; ++n) {
    const float* p = pred.data() + n * per_image;
    const float* g = target.data() + n * per_image;
    double pos = 0.0;
    for (std::size_t i = 0; i < per_image; ++i) pos += g[i];
    const double w_pos = (per_image - pos) / per_image;
    const double w_neg = 1.1 * pos / per_image;
    for (std::size_t i = 0; i < per_image; ++i) {
      const double pc = std::clamp(static_cast<double>(p[i]), 1e-7, 1.0 - 1e-7);
      const double w = g[i] * w_pos + (1.0 - g[i]) * w_neg;
      acc += w * (g[i] * std::log(pc) + (1.0 - g[i]) * std::log(1.0 - pc));
    }
  }
  return -acc;
}

template <typename T>
std::vector<T> reference_conv2d(const Tensor& input, const std::vector<T>& weight,
                                const std::vector<T>* bias, const ConvSpec& spec) {
  spec.validate();
  const Shape& xs = input.shape();
  const int oh = spec.out_h(xs.h), ow = spec.out_w(xs.w);
  const int cg = spec.in_channels / spec.groups;
  const int og = spec.out_channels / spec.groups;
  std::vector<T> out(static_cast<std::size_t>(xs.n) * spec.out_channels * oh * ow, T(0));
  for (int n = 0; n < xs.n; ++n) {
    for (int oc = 0; oc < spec.out_channels; ++oc) {
      const int gi = oc / og;
      for (int oy = 0; oy < oh; ++oy) {
        for (int ox = 0; ox < ow; ++ox) {
          T acc = bias ? (*bias)[oc] : T(0);
          for (int icl = 0; icl < cg; ++icl) {
            const int ic = gi * cg + icl;
            for (int ky = 0; ky < spec.kh; ++ky) {
              for (int kx = 0; kx < spec.kw; ++kx) {
                const int iy = oy * spec.stride - spec.padding + ky * spec.dilation;
                const int ix = ox * spec.stride - spec.padding + kx * spec.dilation;
                if (iy < 0 || iy >= xs.h || ix < 0 || ix >= xs.w) continue;
                const T w = weight[((static_cast<std::size_t>(oc) * cg + icl) * spec.kh + ky) *
                                       spec.kw +
                                   kx];
                acc += static_cast<T>(input.at(n, ic, iy, ix)) * w;
              }
            }
          }
          out[((static_cast<std::size_t>(n) * spec.out_channels + oc) * oh + oy) * ow + ox] = acc;
        }
      }
    }
  }
  return out;
}

template std::vector<float> reference_conv2d<float>(const Tensor&, const std::vector<float>&,
                                                    const std::vector<float>*, const ConvSpec&);
template std::vector<double> reference_conv2d<double>(const Tensor&, const std::vector<double>&,
                                                      const std::vector<double>*, const ConvSpec&);

namespace {

Tensor random_tensor(const Shape& s, Rng& rng, float lo = -1.0f, float hi = 1.0f) {
  Tensor t = Tensor::zeros(s);
  for (float& v : t.data()) v = rng.uniform(lo, hi);
  return t;
}

ConvSpec equivalence_spec() {
  ConvSpec spec;
  spec.in_channels = 3;
  spec.out_channels = 4;
  spec.kh = spec.kw = 3;
  spec.stride = 1;
  spec.padding = 1;
  spec.dilation = 1;
  spec.groups = 1;
  return spec;
}

}  // namespace

SuiteResult run_equivalence_suite(std::uint64_t seed, int trials, bool inject_fault) {
  SuiteResult r;
  r.name = "cpdc-equivalence-f32";
  r.tolerance = 1e-5;
  const ConvSpec spec = equivalence_spec();
  Rng rng(seed);
  const CpdcVariant variants[4] = {CpdcVariant::H, CpdcVariant::V, CpdcVariant::D,
                                   CpdcVariant::C};
  for (CpdcVariant variant : variants) {
    const KernelPermutation perm = KernelPermutation::make(variant);
    for (int t = 0; t < trials; ++t) {
      const Tensor input = random_tensor(Shape{1, 3, 16, 16}, rng);
      const Tensor weight = random_tensor(spec.weight_shape(), rng);
      Tensor transformed = cpdc_transform(weight, perm);
      if (inject_fault) transformed.data()[0] = -transformed.data()[0];
      const Tensor conv = conv2d(input, transformed, std::nullopt, spec);
      const std::vector<float> direct = cpdc_direct_sweep<float>(input, weight, spec, perm);
      for (std::size_t i = 0; i < direct.size(); ++i) {
        r.max_error = std::max(r.max_error,
                               static_cast<double>(std::abs(conv.data()[i] - direct[i])));
      }
    }
  }
  r.pass = r.max_error <= r.tolerance;
  r.detail = "4 variants x " + std::to_string(trials) + " trials, 1x3x16x16";
  return r;
}

SuiteResult run_equivalence_suite_f64(std::uint64_t seed, int trials) {
  SuiteResult r;
  r.name = "cpdc-equivalence-f64";
  r.tolerance = 1e-10;
  const ConvSpec spec = equivalence_spec();
  Rng rng(seed);
  const CpdcVariant variants[4] = {CpdcVariant::H, CpdcVariant::V, CpdcVariant::D,
                                   CpdcVariant::C};
  for (CpdcVariant variant : variants) {
    const KernelPermutation perm = KernelPermutation::make(variant);
    for (int t = 0; t < trials; ++t) {
      const Tensor input = random_tensor(Shape{1, 3, 16, 16}, rng);
      const Tensor weight = random_tensor(spec.weight_shape(), rng);
      std::vector<double> wt(weight.data().size());
      const std::int64_t slices = static_cast<std::int64_t>(weight.shape().n) * weight.shape().c;
      std::vector<double> wd(weight.data().begin(), weight.data().end());
      for (std::int64_t sidx = 0; sidx < slices; ++sidx) {
        transform_kernel_3x3(wd.data() + sidx * 9, perm, wt.data() + sidx * 9);
      }
      const std::vector<double> conv = reference_conv2d<double>(input, wt, nullptr, spec);
      const std::vector<double> direct = cpdc_direct_sweep<double>(input, weight, spec, perm);
      for (std::size_t i = 0; i < direct.size(); ++i) {
        r.max_error = std::max(r.max_error, std::abs(conv[i] - direct[i]));
      }
    }
  }
  r.pass = r.max_error <= r.tolerance;
  r.detail = "4 variants x " + std::to_string(trials) + " trials, double precision";
  return r;
}

SuiteResult run_loss_oracle_suite(std::uint64_t seed, int trials) {
  SuiteResult r;
  r.name = "loss-scalar-oracle";
  r.tolerance = 1e-6;
  Rng rng(seed);
  HflConfig cfg;
  for (int t = 0; t < trials; ++t) {
    const Shape s{2, 1, 4, 4};
    Tensor pred = Tensor::zeros(s);
    Tensor target = Tensor::zeros(s);
    for (float& v : pred.data()) v = rng.uniform(0.02f, 0.98f);
    for (float& v : target.data()) v = rng.next_float() < 0.5f ? 0.0f : 1.0f;

    const double d_ft = std::abs(focal_tversky(pred, target, cfg).item() -
                                 scalar_focal_tversky(pred.data(), target.data(), cfg));
    const double d_fl = std::abs(focal_loss(pred, target, cfg).item() -
                                 scalar_focal_loss(pred.data(), target.data(), cfg));
    const double d_h = std::abs(hybrid_focal(pred, target, cfg).item() -
                                scalar_hybrid_focal(pred.data(), target.data(), cfg));
    const double d_w = std::abs(weighted_cross_entropy(pred, target).item() -
                                scalar_wce(pred.data(), target.data(), s.n));
    r.max_error = std::max({r.max_error, d_ft, d_fl, d_h, d_w});
  }
  r.pass = r.max_error <= r.tolerance;
  r.detail = std::to_string(trials) + " random 2x1x4x4 instances";
  return r;
}

SuiteResult run_loss_gradient_suite(std::uint64_t seed) {
  SuiteResult r;
  r.name = "loss-gradients";
  r.tolerance = 1e-3;
  Rng rng(seed);
  const Shape s{1, 1, 4, 4};
  Tensor target = Tensor::zeros(s);
  for (float& v : target.data()) v = rng.next_float() < 0.5f ? 0.0f : 1.0f;
  Tensor pred = Tensor::zeros(s);
  for (float& v : pred.data()) v = rng.uniform(0.05f, 0.95f);
  pred.set_requires_grad(true);

  HflConfig cfg;
  struct Case {
    std::function<Tensor()> tensor_loss;
    std::function<double(const std::vector<float>&)> scalar_loss;
  };
  const std::vector<Case> cases = {
      {[&]() { return hybrid_focal(pred, target, cfg); },
       [&](const std::vector<float>& p) { return scalar_hybrid_focal(p, target.data(), cfg); }},
      {[&]() { return focal_tversky(pred, target, cfg); },
       [&](const std::vector<float>& p) { return scalar_focal_tversky(p, target.data(), cfg); }},
      {[&]() { return focal_loss(pred, target, cfg); },
       [&](const std::vector<float>& p) { return scalar_focal_loss(p, target.data(), cfg); }},
      {[&]() { return weighted_cross_entropy(pred, target); },
       [&](const std::vector<float>& p) { return scalar_wce(p, target.data(), 1); }},
  };

  // Analytic gradients of the tensor path, central differences of the
  // independent scalar evaluators: two fully separate routes.
  const double eps = 1e-4;
  for (const Case& c : cases) {
    pred.zero_grad();
    Tape tape;
    {
      Tape::Scope scope(tape);
      tape.backward(c.tensor_loss());
    }
    const std::vector<float> analytic = pred.grad();
    std::vector<float> probe = pred.data();
    for (std::size_t i = 0; i < probe.size(); ++i) {
      const float saved = probe[i];
      probe[i] = saved + static_cast<float>(eps);
      const double lp = c.scalar_loss(probe);
      probe[i] = saved - static_cast<float>(eps);
      const double lm = c.scalar_loss(probe);
      probe[i] = saved;
      const double fd = (lp - lm) / (2.0 * eps);
      const double a = analytic[i];
      const double rel = std::abs(a - fd) / std::max({std::abs(a), std::abs(fd), 1e-8});
      r.max_error = std::max(r.max_error, rel);
    }
  }
  r.pass = r.max_error <= r.tolerance;
  r.detail = "hybrid/tversky/focal/wce w.r.t. predictions, 4x4, double-precision differences";
  return r;
}

SuiteResult run_stack_gradient_suite(std::uint64_t seed) {
  SuiteResult r;
  r.name = "stack-gradients";
  r.tolerance = 1e-2;
  Rng rng(seed);

  // Two CPDC blocks plus MSEM and DRC at 8 channels on an 8x8 input.
  ParamRegistry reg;
  ConvSpec stem_spec;
  stem_spec.in_channels = 3;
  stem_spec.out_channels = 8;
  stem_spec.kh = stem_spec.kw = 3;
  stem_spec.padding = 1;
  Conv2d stem(reg, "stem", stem_spec, true, rng);
  CpdcBlock block1(reg, "block1", 8, /*branch_groups=*/1, rng);
  CpdcBlock block2(reg, "block2", 8, /*branch_groups=*/1, rng);
  MsemModule msem(reg, "msem", 8, rng);
  DrcDecoder drc(reg, "drc", 8, rng);
  ConvSpec head_spec;
  head_spec.in_channels = 8;
  head_spec.out_channels = 1;
  head_spec.kh = head_spec.kw = 1;
  Conv2d head(reg, "head", head_spec, true, rng);

  const Tensor image = [&] {
    Tensor t = Tensor::zeros(Shape{1, 3, 8, 8});
    for (float& v : t.data()) v = rng.uniform(0.0f, 1.0f);
    return t;
  }();
  const Tensor target = [&] {
    Tensor t = Tensor::zeros(Shape{1, 1, 8, 8});
    for (float& v : t.data()) v = rng.next_float() < 0.3f ? 1.0f : 0.0f;
    return t;
  }();

  HflConfig cfg;
  auto loss_fn = [&]() {
    Tensor x = stem.forward(image);
    x = block1.forward(x, /*training=*/true);
    x = block2.forward(x, true);
    x = msem.forward(x);
    x = drc.forward(x, true);
    Tensor pred = sigmoid(head.forward(x));
    return hybrid_focal(pred, target, cfg);
  };

  std::vector<Parameter*> params;
  for (auto& p : reg.parameters()) params.push_back(&p);

  GradCheckOptions opts;
  opts.epsilon = 1e-3;
  opts.max_elements_per_param = 48;
  opts.sample_seed = seed ^ 0x5bd1e995;
  opts.significance = 1e-2;
  const GradCheckReport rep = finite_diff_check(loss_fn, params, opts);
  r.max_error = rep.max_rel_error;
  r.pass = rep.all_finite && r.max_error <= r.tolerance;
  r.detail = "2-block CPDC+MSEM+DRC stack, 1x3x8x8, sampled elements";
  return r;
}

std::vector<SuiteResult> run_all(std::uint64_t seed, int trials, bool inject_fault) {
  std::vector<SuiteResult> results;
  results.push_back(run_equivalence_suite(seed, trials, inject_fault));
  results.push_back(run_equivalence_suite_f64(seed, trials));
  results.push_back(run_loss_oracle_suite(seed, trials));
  results.push_back(run_loss_gradient_suite(seed));
  results.push_back(run_stack_gradient_suite(seed));
  return results;
}

}  // namespace cpdnet::checks
