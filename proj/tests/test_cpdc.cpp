#include <doctest.h>

#include <array>
#include <cmath>

#include "cpdnet/checks.hpp"
#include "cpdnet/cpdc.hpp"
#include "cpdnet/rng.hpp"

using namespace cpdnet;

namespace {

Tensor random_tensor(const Shape& s, std::uint64_t seed, float lo = -1.0f, float hi = 1.0f) {
  Rng rng(seed);
  Tensor t = Tensor::zeros(s);
  for (float& v : t.data()) v = rng.uniform(lo, hi);
  return t;
}

std::array<float, 9> transform9(const std::array<float, 9>& w, CpdcVariant v) {
  std::array<float, 9> out{};
  transform_kernel_3x3(w.data(), KernelPermutation::make(v), out.data());
  return out;
}

constexpr CpdcVariant kVariants[4] = {CpdcVariant::H, CpdcVariant::V, CpdcVariant::D,
                                      CpdcVariant::C};

}  // namespace

TEST_CASE("permutation tables are the specified bijections") {
  for (CpdcVariant v : kVariants) {
    CHECK(KernelPermutation::make(v).is_bijection());
  }
  const auto h = KernelPermutation::make(CpdcVariant::H).map;
  CHECK(h == std::array<int, 9>{1, 2, 0, 4, 5, 3, 7, 8, 6});
  const auto vv = KernelPermutation::make(CpdcVariant::V).map;
  CHECK(vv == std::array<int, 9>{3, 4, 5, 6, 7, 8, 0, 1, 2});
  const auto d = KernelPermutation::make(CpdcVariant::D).map;
  CHECK(d[0] == 8);
  CHECK(d[8] == 0);
  CHECK(d[2] == 6);
  CHECK(d[6] == 2);
  for (int i : {1, 3, 4, 5, 7}) CHECK(d[i] == i);
  const auto c = KernelPermutation::make(CpdcVariant::C).map;
  CHECK(c[1] == 7);
  CHECK(c[7] == 1);
  CHECK(c[3] == 5);
  CHECK(c[5] == 3);
  for (int i : {0, 2, 4, 6, 8}) CHECK(c[i] == i);
}

TEST_CASE("transform_weights anchors") {
  SUBCASE("variant H, w1=1") {
    const auto out = transform9({1, 0, 0, 0, 0, 0, 0, 0, 0}, CpdcVariant::H);
    CHECK(out[0] == 1.0f);   // w'_1 = w1 - w3 = 1
    CHECK(out[1] == -1.0f);  // w'_2 = w2 - w1 = -1
    for (int i : {2, 3, 4, 5, 6, 7, 8}) CHECK(out[i] == 0.0f);
  }
  SUBCASE("all-ones kernel collapses to zero") {
    for (CpdcVariant v : kVariants) {
      const auto out = transform9({1, 1, 1, 1, 1, 1, 1, 1, 1}, v);
      for (float x : out) CHECK(x == 0.0f);
    }
  }
  SUBCASE("variant D, center weight is a fixed point") {
    const auto out = transform9({0, 0, 0, 0, 1, 0, 0, 0, 0}, CpdcVariant::D);
    for (float x : out) CHECK(x == 0.0f);
  }
  SUBCASE("variant C, w2=1") {
    const auto out = transform9({0, 1, 0, 0, 0, 0, 0, 0, 0}, CpdcVariant::C);
    CHECK(out[1] == 1.0f);
    CHECK(out[7] == -1.0f);
    for (int i : {0, 2, 3, 4, 5, 6, 8}) CHECK(out[i] == 0.0f);
  }
}

TEST_CASE("transform is linear and sums to zero") {
  Rng rng(7);
  for (CpdcVariant v : kVariants) {
    std::array<float, 9> w1{}, w2{}, combo{};
    for (int i = 0; i < 9; ++i) {
      // integer-valued kernels: linearity is exact in float arithmetic
      w1[i] = static_cast<float>(static_cast<int>(rng.next_below(11)) - 5);
      w2[i] = static_cast<float>(static_cast<int>(rng.next_below(11)) - 5);
      combo[i] = 3.0f * w1[i] + 2.0f * w2[i];
    }
    const auto t1 = transform9(w1, v);
    const auto t2 = transform9(w2, v);
    const auto tc = transform9(combo, v);
    float total = 0.0f;
    for (int i = 0; i < 9; ++i) {
      CHECK(tc[i] == 3.0f * t1[i] + 2.0f * t2[i]);
      total += tc[i];
    }
    CHECK(total == 0.0f);
  }
}

TEST_CASE("transform twice on the involution variants doubles the template") {
  // For D and C, pi is an involution, so w'' = w' - w'(pi) = 2 w'.
  Rng rng(13);
  for (CpdcVariant v : {CpdcVariant::D, CpdcVariant::C}) {
    std::array<float, 9> w{};
    for (int i = 0; i < 9; ++i) w[i] = static_cast<float>(static_cast<int>(rng.next_below(9)) - 4);
    const auto once = transform9(w, v);
    const auto twice = transform9(once, v);
    for (int i = 0; i < 9; ++i) CHECK(twice[i] == 2.0f * once[i]);
  }
}

TEST_CASE("cpdc_direct anchors") {
  const double window[9] = {1, 2, 3, 4, 5, 6, 7, 8, 9};
  SUBCASE("variant H with w1 only") {
    const double kernel[9] = {1, 0, 0, 0, 0, 0, 0, 0, 0};
    const double r = cpdc_direct(window, kernel, KernelPermutation::make(CpdcVariant::H));
    CHECK(r == doctest::Approx(-1.0));  // (x1 - x2) * 1
  }
  SUBCASE("all-ones kernel telescopes to zero") {
    const double kernel[9] = {1, 1, 1, 1, 1, 1, 1, 1, 1};
    const double r = cpdc_direct(window, kernel, KernelPermutation::make(CpdcVariant::H));
    CHECK(r == doctest::Approx(0.0));
  }
  SUBCASE("constant window vanishes for every variant") {
    const double flat[9] = {4, 4, 4, 4, 4, 4, 4, 4, 4};
    Rng rng(3);
    double kernel[9];
    for (double& k : kernel) k = rng.next_double() - 0.5;
    for (CpdcVariant v : kVariants) {
      CHECK(cpdc_direct(flat, kernel, KernelPermutation::make(v)) == doctest::Approx(0.0));
    }
  }
}

TEST_CASE("cpdc_forward equals the direct interpreter sweep") {
  ConvSpec spec;
  spec.in_channels = 1;
  spec.out_channels = 1;
  spec.kh = spec.kw = 3;
  spec.padding = 1;
  for (CpdcVariant v : kVariants) {
    const KernelPermutation perm = KernelPermutation::make(v);
    for (std::uint64_t seed = 0; seed < 4; ++seed) {
      const Tensor input = random_tensor(Shape{1, 1, 8, 8}, 100 + seed);
      const Tensor weight = random_tensor(spec.weight_shape(), 200 + seed);
      const Tensor conv = conv2d(input, cpdc_transform(weight, perm), std::nullopt, spec);
      const std::vector<float> direct = cpdc_direct_sweep<float>(input, weight, spec, perm);
      for (std::size_t i = 0; i < direct.size(); ++i) {
        CHECK(std::abs(conv.data()[i] - direct[i]) <= 1e-5);
      }
    }
  }
}

TEST_CASE("multichannel equivalence on 1x3x16x16") {
  ConvSpec spec;
  spec.in_channels = 3;
  spec.out_channels = 2;
  spec.kh = spec.kw = 3;
  spec.padding = 1;
  for (CpdcVariant v : kVariants) {
    const KernelPermutation perm = KernelPermutation::make(v);
    const Tensor input = random_tensor(Shape{1, 3, 16, 16}, 301);
    const Tensor weight = random_tensor(spec.weight_shape(), 302);
    const Tensor conv = conv2d(input, cpdc_transform(weight, perm), std::nullopt, spec);
    const std::vector<float> direct = cpdc_direct_sweep<float>(input, weight, spec, perm);
    for (std::size_t i = 0; i < direct.size(); ++i) {
      CHECK(std::abs(conv.data()[i] - direct[i]) <= 1e-5);
    }
  }
}

TEST_CASE("constant input yields exactly zero before bias") {
  ConvSpec spec;
  spec.in_channels = 2;
  spec.out_channels = 2;
  spec.kh = spec.kw = 3;
  spec.padding = 0;  // interior windows only, so every window is constant
  for (CpdcVariant v : kVariants) {
    Rng rng(17);
    ParamRegistry reg;
    Rng init(23);
    CpdcLayer layer(reg, "l", spec, v, false, init);
    const Tensor input = Tensor::full(Shape{1, 2, 10, 10}, rng.uniform(-1.0f, 1.0f));
    const Tensor out = layer.forward(input);
    for (float x : out.data()) CHECK(x == 0.0f);
  }
}

TEST_CASE("CpdcLayer rejects non-3x3 kernels and dilation") {
  ParamRegistry reg;
  Rng rng(1);
  ConvSpec bad;
  bad.in_channels = 4;
  bad.out_channels = 1;
  bad.kh = bad.kw = 5;
  CHECK_THROWS_AS(CpdcLayer(reg, "bad", bad, CpdcVariant::H, false, rng),
                  std::invalid_argument);
  ConvSpec dil;
  dil.in_channels = 4;
  dil.out_channels = 1;
  dil.kh = dil.kw = 3;
  dil.dilation = 2;
  CHECK_THROWS_AS(CpdcLayer(reg, "bad2", dil, CpdcVariant::H, false, rng),
                  std::invalid_argument);
}

TEST_CASE("CpdcBlock is the identity at zero weights and preserves shape") {
  ParamRegistry reg;
  Rng rng(5);
  CpdcBlock block(reg, "block", 16, 4, rng);
  for (auto& p : reg.parameters()) {
    std::fill(p.value.data().begin(), p.value.data().end(), 0.0f);
  }
  const Tensor x = random_tensor(Shape{1, 16, 32, 32}, 55);
  const Tensor y = block.forward(x, true);
  REQUIRE(y.shape() == Shape{1, 16, 32, 32});
  CHECK(y.data() == x.data());

  CHECK_THROWS_AS(CpdcBlock(reg, "bad", 6, 1, rng), std::invalid_argument);
}

TEST_CASE("gradient reaches all four CPDC branch weights") {
  ParamRegistry reg;
  Rng rng(6);
  CpdcBlock block(reg, "block", 16, 4, rng);
  const Tensor x = random_tensor(Shape{1, 16, 8, 8}, 77);
  Tape tape;
  {
    Tape::Scope scope(tape);
    tape.backward(sum_all(block.forward(x, true)));
  }
  for (const char* name : {"block.cpdc_h.weight", "block.cpdc_v.weight", "block.cpdc_d.weight",
                           "block.cpdc_c.weight"}) {
    Parameter* p = reg.find(name);
    REQUIRE(p != nullptr);
    double norm = 0.0;
    for (float g : p->value.grad()) norm += static_cast<double>(g) * g;
    CHECK(norm > 0.0);
  }
}

TEST_CASE("verification suites pass and notice injected faults") {
  const auto f32 = checks::run_equivalence_suite(99, 10);
  CHECK(f32.pass);
  CHECK(f32.max_error <= 1e-5);
  const auto f64 = checks::run_equivalence_suite_f64(99, 5);
  CHECK(f64.pass);
  CHECK(f64.max_error <= 1e-10);
  const auto faulted = checks::run_equivalence_suite(99, 2, /*inject_fault=*/true);
  CHECK_FALSE(faulted.pass);
}
