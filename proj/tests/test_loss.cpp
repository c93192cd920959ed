#include <doctest.h>

#include <cmath>

#include "cpdnet/checks.hpp"
#include "cpdnet/loss.hpp"
#include "cpdnet/rng.hpp"
#include "cpdnet/tensor.hpp"

using namespace cpdnet;

namespace {

Tensor scalar_map(float v) { return Tensor::full(Shape{1, 1, 1, 1}, v); }

Tensor random_pred(const Shape& s, std::uint64_t seed, float lo = 0.02f, float hi = 0.98f) {
  Rng rng(seed);
  Tensor t = Tensor::zeros(s);
  for (float& v : t.data()) v = rng.uniform(lo, hi);
  return t;
}

Tensor random_binary(const Shape& s, std::uint64_t seed, float p = 0.5f) {
  Rng rng(seed);
  Tensor t = Tensor::zeros(s);
  for (float& v : t.data()) v = rng.next_float() < p ? 1.0f : 0.0f;
  return t;
}

}  // namespace

TEST_CASE("shipped defaults match the published configuration") {
  const HflConfig cfg;
  CHECK(cfg.lambda == doctest::Approx(0.001f));
  CHECK(cfg.beta == doctest::Approx(0.7f));
  CHECK(cfg.gamma == doctest::Approx(0.75f));
  CHECK(cfg.omega == doctest::Approx(0.25f));
  CHECK(cfg.delta == doctest::Approx(2.0f));
  CHECK(cfg.c_stab == doctest::Approx(1e-7f));
  CHECK_FALSE(cfg.square_of_sum);
}

TEST_CASE("focal_tversky anchors") {
  const HflConfig cfg;
  SUBCASE("perfect prediction with positives present is exactly 1") {
    const Tensor t = random_binary(Shape{1, 1, 4, 4}, 3, 0.4f);
    CHECK(focal_tversky(t, t, cfg).item() == 1.0f);
  }
  SUBCASE("empty prediction and target is exactly 1") {
    const Tensor z = Tensor::zeros(Shape{1, 1, 4, 4});
    CHECK(focal_tversky(z, z, cfg).item() == 1.0f);
  }
  SUBCASE("single pixel matches the scalar evaluator") {
    const Tensor pred = scalar_map(0.5f);
    const Tensor target = scalar_map(1.0f);
    const double expected = checks::scalar_focal_tversky(pred.data(), target.data(), cfg);
    CHECK(focal_tversky(pred, target, cfg).item() == doctest::Approx(expected).epsilon(1e-6));
    // hand check: ((0.5 + 0.7*0.25 + C)/(0.5 + C))^0.75
    CHECK(expected == doctest::Approx(std::pow(0.675 / 0.5, 0.75)).epsilon(1e-6));
  }
  SUBCASE("prediction outside [0,1] is rejected") {
    CHECK_THROWS_AS(focal_tversky(scalar_map(1.5f), scalar_map(1.0f), cfg),
                    std::invalid_argument);
  }
}

TEST_CASE("focal_tversky is always >= 1 with equality iff FP and FN vanish") {
  const HflConfig cfg;
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const Shape s{1, 1, 5, 5};
    const Tensor pred = random_pred(s, 900 + seed);
    const Tensor target = random_binary(s, 950 + seed);
    const float v = focal_tversky(pred, target, cfg).item();
    CHECK(v >= 1.0f);
    CHECK(std::isfinite(v));
  }
}

TEST_CASE("focal_loss anchors") {
  const HflConfig cfg;
  SUBCASE("confident correct prediction is near zero") {
    const Shape s{1, 1, 3, 3};
    const Tensor target = Tensor::full(s, 1.0f);
    const Tensor pred = Tensor::full(s, 1.0f - 1e-7f);
    CHECK(focal_loss(pred, target, cfg).item() <= 1e-5f * s.numel());
  }
  SUBCASE("single pixel value at g=1, p=0.5") {
    const float v = focal_loss(scalar_map(0.5f), scalar_map(1.0f), cfg).item();
    CHECK(v == doctest::Approx(0.04332).epsilon(1e-3));
    CHECK(std::abs(v - (-0.25 * 0.25 * std::log(0.5))) < 1e-7);
  }
  SUBCASE("the positive and negative terms are symmetric at p=0.5") {
    const float pos = focal_loss(scalar_map(0.5f), scalar_map(1.0f), cfg).item();
    const float neg = focal_loss(scalar_map(0.5f), scalar_map(0.0f), cfg).item();
    CHECK(pos == neg);
  }
}

TEST_CASE("hybrid_focal composition") {
  HflConfig cfg;
  const Shape s{1, 1, 4, 4};
  const Tensor pred = random_pred(s, 11);
  const Tensor target = random_binary(s, 12);
  SUBCASE("lambda = 0 reduces to focal_tversky exactly") {
    cfg.lambda = 0.0f;
    CHECK(hybrid_focal(pred, target, cfg).item() == focal_tversky(pred, target, cfg).item());
  }
  SUBCASE("perfect confident prediction is ~1") {
    const Tensor t = random_binary(s, 13, 0.4f);
    CHECK(hybrid_focal(t, t, HflConfig{}).item() == doctest::Approx(1.0).epsilon(1e-4));
  }
  SUBCASE("defaults match the scalar evaluator to 1e-6") {
    const double expected = checks::scalar_hybrid_focal(pred.data(), target.data(), HflConfig{});
    CHECK(hybrid_focal(pred, target, HflConfig{}).item() ==
          doctest::Approx(expected).epsilon(1e-6));
  }
}

TEST_CASE("square-of-sum reading is available and differs") {
  HflConfig per_pixel;
  HflConfig of_sum;
  of_sum.square_of_sum = true;
  const Shape s{1, 1, 4, 4};
  const Tensor pred = random_pred(s, 21);
  const Tensor target = random_binary(s, 22);
  const float a = focal_tversky(pred, target, per_pixel).item();
  const float b = focal_tversky(pred, target, of_sum).item();
  CHECK(a != b);
  CHECK(b == doctest::Approx(checks::scalar_focal_tversky(pred.data(), target.data(), of_sum))
                 .epsilon(1e-6));
}

TEST_CASE("weighted_cross_entropy anchors") {
  SUBCASE("balanced image at p=0.5 matches the closed form") {
    const Shape s{1, 1, 2, 2};
    const Tensor target = Tensor::from_data(s, {1, 1, 0, 0});
    const Tensor pred = Tensor::full(s, 0.5f);
    const double per_pixel = 0.5 * std::log(2.0) * (1.0 + 1.1) / 2.0;
    const double expected = per_pixel * s.numel();
    CHECK(weighted_cross_entropy(pred, target).item() ==
          doctest::Approx(expected).epsilon(1e-6));
    CHECK(checks::scalar_wce(pred.data(), target.data(), 1) ==
          doctest::Approx(expected).epsilon(1e-9));
  }
  SUBCASE("perfect confident prediction is ~0") {
    const Shape s{1, 1, 3, 3};
    const Tensor target = random_binary(s, 31);
    Tensor pred = target.clone();
    CHECK(weighted_cross_entropy(pred, target).item() == doctest::Approx(0.0).epsilon(1e-5));
  }
  SUBCASE("all-negative target with p->0 is ~0") {
    const Shape s{1, 1, 3, 3};
    const Tensor target = Tensor::zeros(s);
    const Tensor pred = Tensor::zeros(s);
    CHECK(weighted_cross_entropy(pred, target).item() == doctest::Approx(0.0).epsilon(1e-6));
  }
}

TEST_CASE("losses are finite on the clamped range") {
  const Shape s{2, 1, 4, 4};
  const HflConfig cfg;
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    Tensor pred = random_pred(s, 40 + seed, 0.0f, 1.0f);
    const Tensor target = random_binary(s, 50 + seed);
    CHECK(std::isfinite(hybrid_focal(pred, target, cfg).item()));
    CHECK(std::isfinite(weighted_cross_entropy(pred, target).item()));
  }
}

TEST_CASE("raising a positive-pixel prediction never increases hybrid_focal") {
  const HflConfig cfg;
  const Shape s{1, 1, 3, 3};
  Tensor target = random_binary(s, 61, 0.5f);
  target.data()[4] = 1.0f;  // probe pixel is a positive
  Tensor pred = random_pred(s, 62);
  float prev = std::numeric_limits<float>::infinity();
  for (float p = 0.05f; p <= 0.951f; p += 0.05f) {
    pred.data()[4] = p;
    const float v = hybrid_focal(pred, target, cfg).item();
    CHECK(v <= prev + 1e-6f);
    prev = v;
  }
}

TEST_CASE("loss oracle and gradient suites pass") {
  const auto oracle = checks::run_loss_oracle_suite(7, 25);
  CHECK(oracle.pass);
  for (std::uint64_t seed : {1ull, 2ull, 3ull, 4ull, 5ull}) {
    const auto grads = checks::run_loss_gradient_suite(seed);
    CHECK(grads.pass);
    CHECK(grads.max_error <= 1e-3);
  }
}
