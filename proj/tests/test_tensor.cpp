#include <doctest.h>

#include <cmath>

#include "cpdnet/gradcheck.hpp"
#include "cpdnet/ops.hpp"
#include "cpdnet/rng.hpp"
#include "cpdnet/tensor.hpp"

using namespace cpdnet;

namespace {

Tensor random_tensor(const Shape& s, std::uint64_t seed, float lo = -1.0f, float hi = 1.0f) {
  Rng rng(seed);
  Tensor t = Tensor::zeros(s);
  for (float& v : t.data()) v = rng.uniform(lo, hi);
  return t;
}

// Independent scalar reference: plain nested loops, no im2col, no GEMM.
std::vector<double> naive_conv(const Tensor& x, const Tensor& w, const ConvSpec& s,
                               const float* bias = nullptr) {
  const Shape& xs = x.shape();
  const int oh = s.out_h(xs.h), ow = s.out_w(xs.w);
  const int cg = s.in_channels / s.groups, og = s.out_channels / s.groups;
  std::vector<double> out(static_cast<std::size_t>(xs.n) * s.out_channels * oh * ow, 0.0);
  for (int n = 0; n < xs.n; ++n)
    for (int oc = 0; oc < s.out_channels; ++oc)
      for (int oy = 0; oy < oh; ++oy)
        for (int ox = 0; ox < ow; ++ox) {
          double acc = bias ? bias[oc] : 0.0;
          for (int ic = 0; ic < cg; ++ic)
            for (int ky = 0; ky < s.kh; ++ky)
              for (int kx = 0; kx < s.kw; ++kx) {
                const int iy = oy * s.stride - s.padding + ky * s.dilation;
                const int ix = ox * s.stride - s.padding + kx * s.dilation;
                if (iy < 0 || iy >= xs.h || ix < 0 || ix >= xs.w) continue;
                acc += static_cast<double>(x.at(n, (oc / og) * cg + ic, iy, ix)) *
                       w.at(oc, ic, ky, kx);
              }
          out[((static_cast<std::size_t>(n) * s.out_channels + oc) * oh + oy) * ow + ox] = acc;
        }
  return out;
}

ConvSpec spec_of(int ic, int oc, int k, int stride = 1, int pad = 0, int dil = 1, int g = 1) {
  ConvSpec s;
  s.in_channels = ic;
  s.out_channels = oc;
  s.kh = s.kw = k;
  s.stride = stride;
  s.padding = pad;
  s.dilation = dil;
  s.groups = g;
  return s;
}

}  // namespace

TEST_CASE("conv2d zero input gives zero output") {
  const ConvSpec s = spec_of(1, 1, 3);
  const Tensor x = Tensor::zeros(Shape{1, 1, 3, 3});
  const Tensor w = random_tensor(s.weight_shape(), 11);
  const Tensor y = conv2d(x, w, std::nullopt, s);
  CHECK(y.shape() == Shape{1, 1, 1, 1});
  CHECK(y.data()[0] == 0.0f);
}

TEST_CASE("conv2d delta kernel is the identity") {
  const ConvSpec s = spec_of(1, 1, 3, 1, 1);
  const Tensor x = Tensor::from_data(Shape{1, 1, 3, 3}, {1, 2, 3, 4, 5, 6, 7, 8, 9});
  Tensor w = Tensor::zeros(s.weight_shape());
  w.at(0, 0, 1, 1) = 1.0f;
  const Tensor y = conv2d(x, w, std::nullopt, s);
  REQUIRE(y.shape() == x.shape());
  for (std::size_t i = 0; i < x.data().size(); ++i) CHECK(y.data()[i] == x.data()[i]);
}

TEST_CASE("conv2d matches the naive reference") {
  SUBCASE("dilation 2") {
    const ConvSpec s = spec_of(1, 1, 3, 1, 2, 2);
    const Tensor x = random_tensor(Shape{1, 1, 5, 5}, 3);
    const Tensor w = random_tensor(s.weight_shape(), 4);
    const Tensor y = conv2d(x, w, std::nullopt, s);
    const std::vector<double> ref = naive_conv(x, w, s);
    REQUIRE(y.data().size() == ref.size());
    for (std::size_t i = 0; i < ref.size(); ++i) {
      CHECK(std::abs(y.data()[i] - ref[i]) < 1e-6);
    }
  }
  SUBCASE("stride 2, groups 2, bias") {
    const ConvSpec s = spec_of(4, 6, 3, 2, 1, 1, 2);
    const Tensor x = random_tensor(Shape{2, 4, 9, 7}, 5);
    const Tensor w = random_tensor(s.weight_shape(), 6);
    const Tensor b = random_tensor(Shape{1, 6, 1, 1}, 7);
    const Tensor y = conv2d(x, w, b, s);
    const std::vector<double> ref = naive_conv(x, w, s, b.data().data());
    REQUIRE(y.data().size() == ref.size());
    for (std::size_t i = 0; i < ref.size(); ++i) {
      CHECK(std::abs(y.data()[i] - ref[i]) < 1e-5);
    }
  }
}

TEST_CASE("conv2d is linear") {
  const ConvSpec s = spec_of(2, 3, 3, 1, 1);
  const Tensor x = random_tensor(Shape{1, 2, 6, 6}, 21);
  const Tensor y = random_tensor(Shape{1, 2, 6, 6}, 22);
  const Tensor w = random_tensor(s.weight_shape(), 23);
  const float a = 0.7f, b = -1.3f;
  const Tensor lhs = conv2d(add(scale(x, a), scale(y, b)), w, std::nullopt, s);
  const Tensor rhs = add(scale(conv2d(x, w, std::nullopt, s), a),
                         scale(conv2d(y, w, std::nullopt, s), b));
  for (std::size_t i = 0; i < lhs.data().size(); ++i) {
    CHECK(std::abs(lhs.data()[i] - rhs.data()[i]) < 1e-5);
  }
}

TEST_CASE("conv2d rejects mismatched shapes with a diagnostic") {
  const ConvSpec s = spec_of(3, 4, 3);
  const Tensor x = Tensor::zeros(Shape{1, 5, 8, 8});
  const Tensor w = Tensor::zeros(s.weight_shape());
  CHECK_THROWS_WITH_AS(conv2d(x, w, std::nullopt, s),
                       doctest::Contains("input channel dim 5"), std::invalid_argument);
  const Tensor x2 = Tensor::zeros(Shape{1, 3, 1, 1});
  CHECK_THROWS_AS(conv2d(x2, w, std::nullopt, s), std::invalid_argument);  // output < 1
}

TEST_CASE("elementwise forward anchors") {
  const Tensor x = Tensor::from_data(Shape{1, 1, 1, 2}, {-1.0f, 2.0f});
  const Tensor r = relu(x);
  CHECK(r.data()[0] == 0.0f);
  CHECK(r.data()[1] == 2.0f);
  CHECK(sigmoid(Tensor::zeros(Shape{1, 1, 1, 1})).data()[0] == doctest::Approx(0.5));
  CHECK(gelu(Tensor::zeros(Shape{1, 1, 1, 1})).data()[0] == 0.0f);
  CHECK_THROWS_AS(add(x, Tensor::zeros(Shape{1, 1, 2, 2})), std::invalid_argument);
}

TEST_CASE("gelu derivative matches central differences") {
  for (float v : {-2.0f, -1.0f, 0.5f, 3.0f}) {
    Parameter p{Tensor::from_data(Shape{1, 1, 1, 1}, {v}, true), "x"};
    GradCheckOptions opts;
    opts.epsilon = 1e-3;
    const auto rep = finite_diff_check([&]() { return sum_all(gelu(p.value)); }, {&p}, opts);
    CHECK(rep.pass(1e-3));
  }
}

TEST_CASE("batch_norm normalizes and applies affine") {
  const Shape s{4, 2, 3, 3};
  Tensor x = Tensor::zeros(s);
  Rng rng(9);
  for (float& v : x.data()) v = 5.0f + 2.0f * (rng.next_float() - 0.5f) * 3.464f;

  Tensor gamma = Tensor::full(Shape{1, 2, 1, 1}, 1.0f);
  Tensor beta = Tensor::zeros(Shape{1, 2, 1, 1});
  Tensor rm = Tensor::zeros(Shape{1, 2, 1, 1});
  Tensor rv = Tensor::full(Shape{1, 2, 1, 1}, 1.0f);
  const Tensor y = batch_norm(x, gamma, beta, rm, rv, true);

  const std::int64_t count = static_cast<std::int64_t>(s.n) * s.h * s.w;
  for (int c = 0; c < 2; ++c) {
    double mean = 0.0, var = 0.0;
    for (int n = 0; n < s.n; ++n)
      for (int hh = 0; hh < s.h; ++hh)
        for (int ww = 0; ww < s.w; ++ww) mean += y.at(n, c, hh, ww);
    mean /= count;
    for (int n = 0; n < s.n; ++n)
      for (int hh = 0; hh < s.h; ++hh)
        for (int ww = 0; ww < s.w; ++ww) {
          const double d = y.at(n, c, hh, ww) - mean;
          var += d * d;
        }
    var /= count;
    CHECK(std::abs(mean) < 1e-4);
    CHECK(std::abs(var - 1.0) < 1e-3);
  }

  // gamma=2, beta=3 on an already-normalized input
  Tensor gamma2 = Tensor::full(Shape{1, 2, 1, 1}, 2.0f);
  Tensor beta2 = Tensor::full(Shape{1, 2, 1, 1}, 3.0f);
  const Tensor z = batch_norm(y, gamma2, beta2, rm, rv, true);
  for (int c = 0; c < 2; ++c) {
    double mean = 0.0, var = 0.0;
    for (int n = 0; n < s.n; ++n)
      for (int hh = 0; hh < s.h; ++hh)
        for (int ww = 0; ww < s.w; ++ww) mean += z.at(n, c, hh, ww);
    mean /= count;
    for (int n = 0; n < s.n; ++n)
      for (int hh = 0; hh < s.h; ++hh)
        for (int ww = 0; ww < s.w; ++ww) {
          const double d = z.at(n, c, hh, ww) - mean;
          var += d * d;
        }
    var /= count;
    CHECK(std::abs(mean - 3.0) < 1e-4);
    CHECK(std::abs(std::sqrt(var) - 2.0) < 1e-3);
  }
}

TEST_CASE("batch_norm gradient matches finite differences") {
  const Shape s{2, 2, 3, 3};
  Parameter x{random_tensor(s, 31), "x"};
  x.value.set_requires_grad(true);
  Parameter gamma{Tensor::full(Shape{1, 2, 1, 1}, 1.2f, true), "gamma"};
  Parameter beta{Tensor::full(Shape{1, 2, 1, 1}, -0.3f, true), "beta"};
  const Tensor w = random_tensor(s, 32);  // weighting makes the sum non-degenerate
  auto loss = [&]() {
    Tensor rm = Tensor::zeros(Shape{1, 2, 1, 1});
    Tensor rv = Tensor::full(Shape{1, 2, 1, 1}, 1.0f);
    return sum_all(mul(batch_norm(x.value, gamma.value, beta.value, rm, rv, true), w));
  };
  GradCheckOptions opts;
  opts.epsilon = 1e-3;
  opts.significance = 1e-3;
  const auto rep = finite_diff_check(loss, {&x, &gamma, &beta}, opts);
  CHECK(rep.pass(1e-3));
}

TEST_CASE("batch_norm inference mode is deterministic and rejects bad shapes") {
  const Shape s{1, 2, 4, 4};
  const Tensor x = random_tensor(s, 41);
  Tensor gamma = Tensor::full(Shape{1, 2, 1, 1}, 1.0f);
  Tensor beta = Tensor::zeros(Shape{1, 2, 1, 1});
  Tensor rm = random_tensor(Shape{1, 2, 1, 1}, 42);
  Tensor rv = random_tensor(Shape{1, 2, 1, 1}, 43, 0.5f, 2.0f);
  const Tensor y1 = batch_norm(x, gamma, beta, rm, rv, false);
  const Tensor y2 = batch_norm(x, gamma, beta, rm, rv, false);
  CHECK(y1.data() == y2.data());
  Tensor bad_gamma = Tensor::zeros(Shape{1, 3, 1, 1});
  CHECK_THROWS_AS(batch_norm(x, bad_gamma, beta, rm, rv, false), std::invalid_argument);
}

TEST_CASE("upsample_bilinear anchors and oracle") {
  SUBCASE("factor 1 is the identity") {
    const Tensor x = random_tensor(Shape{1, 2, 3, 3}, 51);
    const Tensor y = upsample_bilinear(x, 1);
    CHECK(y.data() == x.data());
  }
  SUBCASE("constants stay constant") {
    const Tensor x = Tensor::full(Shape{1, 1, 3, 4}, 0.37f);
    const Tensor y = upsample_bilinear(x, 3);
    for (float v : y.data()) CHECK(v == doctest::Approx(0.37f));
  }
  SUBCASE("2x2 input, factor 2, per-pixel formula") {
    const Tensor x = Tensor::from_data(Shape{1, 1, 2, 2}, {1, 2, 3, 4});
    const Tensor y = upsample_bilinear(x, 2);
    REQUIRE(y.shape() == Shape{1, 1, 4, 4});
    // Independent per-pixel bilinear evaluation, align_corners=false.
    auto expect = [&](int oy, int ox) {
      auto src = [&](int yy, int xx) { return x.at(0, 0, yy, xx); };
      double sy = (oy + 0.5) / 2.0 - 0.5, sx = (ox + 0.5) / 2.0 - 0.5;
      sy = std::clamp(sy, 0.0, 1.0);
      sx = std::clamp(sx, 0.0, 1.0);
      const int y0 = static_cast<int>(sy), x0 = static_cast<int>(sx);
      const int y1 = std::min(y0 + 1, 1), x1 = std::min(x0 + 1, 1);
      const double fy = sy - y0, fx = sx - x0;
      return src(y0, x0) * (1 - fy) * (1 - fx) + src(y0, x1) * (1 - fy) * fx +
             src(y1, x0) * fy * (1 - fx) + src(y1, x1) * fy * fx;
    };
    for (int oy = 0; oy < 4; ++oy)
      for (int ox = 0; ox < 4; ++ox)
        CHECK(y.at(0, 0, oy, ox) == doctest::Approx(expect(oy, ox)).epsilon(1e-6));
  }
  SUBCASE("factor 0 rejected") {
    CHECK_THROWS_AS(upsample_bilinear(Tensor::zeros(Shape{1, 1, 2, 2}), 0),
                    std::invalid_argument);
  }
}

TEST_CASE("concat_channels behavior and gradient") {
  const Tensor a = Tensor::from_data(Shape{1, 2, 1, 1}, {1, 2});
  const Tensor b = Tensor::from_data(Shape{1, 2, 1, 1}, {3, 4});
  const Tensor y = concat_channels({a, b});
  REQUIRE(y.shape() == Shape{1, 4, 1, 1});
  CHECK(y.data() == std::vector<float>{1, 2, 3, 4});

  const Tensor single = concat_channels({a});
  CHECK(single.data() == a.data());

  // gradient of sum w.r.t. each input is all-ones
  Tensor ga = a.clone(), gb = b.clone();
  ga.set_requires_grad(true);
  gb.set_requires_grad(true);
  Tape tape;
  {
    Tape::Scope scope(tape);
    tape.backward(sum_all(concat_channels({ga, gb})));
  }
  CHECK(ga.grad() == std::vector<float>{1, 1});
  CHECK(gb.grad() == std::vector<float>{1, 1});

  CHECK_THROWS_AS(concat_channels({a, Tensor::zeros(Shape{1, 2, 2, 1})}), std::invalid_argument);
}

TEST_CASE("concat then split recovers inputs bit-exactly") {
  const Tensor a = random_tensor(Shape{2, 3, 4, 5}, 61);
  const Tensor b = random_tensor(Shape{2, 2, 4, 5}, 62);
  const Tensor y = concat_channels({a, b});
  for (int n = 0; n < 2; ++n)
    for (int c = 0; c < 3; ++c)
      for (int hh = 0; hh < 4; ++hh)
        for (int ww = 0; ww < 5; ++ww) CHECK(y.at(n, c, hh, ww) == a.at(n, c, hh, ww));
  for (int n = 0; n < 2; ++n)
    for (int c = 0; c < 2; ++c)
      for (int hh = 0; hh < 4; ++hh)
        for (int ww = 0; ww < 5; ++ww) CHECK(y.at(n, 3 + c, hh, ww) == b.at(n, c, hh, ww));
}

TEST_CASE("global_avg_pool anchors and gradcheck") {
  CHECK(global_avg_pool(Tensor::full(Shape{1, 1, 5, 7}, 0.25f)).data()[0] ==
        doctest::Approx(0.25f));
  const Tensor x = Tensor::from_data(Shape{1, 1, 2, 2}, {1, 2, 3, 4});
  CHECK(global_avg_pool(x).data()[0] == doctest::Approx(2.5f));

  Parameter p{random_tensor(Shape{1, 3, 3, 3}, 71), "x"};
  p.value.set_requires_grad(true);
  const Tensor w = random_tensor(Shape{1, 3, 1, 1}, 72);
  GradCheckOptions opts;
  opts.epsilon = 1e-3;
  const auto rep = finite_diff_check(
      [&]() { return sum_all(mul(global_avg_pool(p.value), w)); }, {&p}, opts);
  CHECK(rep.pass(1e-4));
}

TEST_CASE("finite_diff_check on simple losses") {
  SUBCASE("linear") {
    Parameter p{random_tensor(Shape{1, 1, 2, 3}, 81), "p"};
    p.value.set_requires_grad(true);
    GradCheckOptions opts;
    opts.epsilon = 1e-3;
    const auto rep = finite_diff_check([&]() { return sum_all(p.value); }, {&p}, opts);
    REQUIRE(rep.entries.size() == 1);
    CHECK(rep.max_rel_error < 1e-6);
  }
  SUBCASE("quadratic") {
    Parameter p{random_tensor(Shape{1, 1, 2, 2}, 82, 0.5f, 1.5f), "p"};
    p.value.set_requires_grad(true);
    GradCheckOptions opts;
    opts.epsilon = 1e-3;
    const auto rep =
        finite_diff_check([&]() { return sum_all(mul(p.value, p.value)); }, {&p}, opts);
    CHECK(rep.max_rel_error < 1e-4);
  }
  SUBCASE("epsilon range enforced") {
    Parameter p{Tensor::full(Shape{1, 1, 1, 1}, 1.0f, true), "p"};
    GradCheckOptions opts;
    opts.epsilon = 1.0;
    CHECK_THROWS_AS(finite_diff_check([&]() { return sum_all(p.value); }, {&p}, opts),
                    std::invalid_argument);
  }
  SUBCASE("non-finite loss reported, not thrown") {
    Parameter p{Tensor::full(Shape{1, 1, 1, 1}, -1.0f, true), "p"};
    GradCheckOptions opts;
    opts.epsilon = 1e-3;
    const auto rep = finite_diff_check([&]() { return log_op(p.value); }, {&p}, opts);
    CHECK_FALSE(rep.all_finite);
  }
}

TEST_CASE("every differentiable op passes a finite-difference check") {
  // One composite touching conv, activations, norm-free reductions and the
  // broadcast ops, on values in [-1, 1].
  const ConvSpec s = spec_of(4, 4, 3, 1, 1);
  Parameter w{random_tensor(s.weight_shape(), 91, -0.5f, 0.5f), "w"};
  Parameter x{random_tensor(Shape{1, 4, 5, 5}, 92), "x"};
  w.value.set_requires_grad(true);
  x.value.set_requires_grad(true);
  auto loss = [&]() {
    Tensor y = conv2d(x.value, w.value, std::nullopt, s);
    y = gelu(y);
    Tensor gate = sigmoid(global_avg_pool(y));
    y = scale_channels(y, gate);
    y = upsample_bilinear(y, 2);
    Tensor z = add_scalar(mul(sigmoid(y), sigmoid(y)), 0.1f);
    return sum_all(log_op(z));
  };
  GradCheckOptions opts;
  opts.epsilon = 1e-3;
  opts.significance = 1e-2;
  const auto rep = finite_diff_check(loss, {&w, &x}, opts);
  CHECK(rep.pass(1e-2));
}

TEST_CASE("layer_norm_channels and channel ops gradcheck") {
  Parameter x{random_tensor(Shape{2, 4, 3, 3}, 95), "x"};
  Parameter g{Tensor::full(Shape{1, 4, 1, 1}, 1.1f, true), "g"};
  Parameter b{Tensor::full(Shape{1, 4, 1, 1}, -0.2f, true), "b"};
  x.value.set_requires_grad(true);
  const Tensor wt = random_tensor(Shape{2, 4, 3, 3}, 96);
  auto loss = [&]() {
    Tensor y = layer_norm_channels(x.value, g.value, b.value);
    Tensor msq = global_avg_pool(mul(y, y));
    Tensor gx = pow_scalar(add_scalar(msq, 1e-12f), 0.5f);
    Tensor nx = div_broadcast(gx, add_scalar(channel_mean(gx), 1e-6f));
    return sum_all(mul(scale_channels(y, nx), wt));
  };
  GradCheckOptions opts;
  opts.epsilon = 1e-3;
  opts.significance = 1e-2;
  const auto rep = finite_diff_check(loss, {&x, &g, &b}, opts);
  CHECK(rep.pass(1e-2));
}

TEST_CASE("tensor invariants") {
  CHECK_THROWS_AS(Tensor::from_data(Shape{1, 1, 2, 2}, {1.0f}), std::invalid_argument);
  CHECK_THROWS_AS(Tensor::zeros(Shape{0, 1, 1, 1}), std::invalid_argument);
  const Tensor t = random_tensor(Shape{1, 2, 3, 4}, 99);
  CHECK(t.numel() == 24);
  CHECK(t.all_finite());
}
