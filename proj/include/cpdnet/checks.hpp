#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "cpdnet/loss.hpp"
#include "cpdnet/ops.hpp"
#include "cpdnet/tensor.hpp"

namespace cpdnet::checks {

// Scalar double-precision evaluators of the loss formulas, written as plain
// loops so they share nothing with the tensor-op implementations.
double scalar_focal_tversky(const std::vector<float>& pred, const std::vector<float>& target,
                            const HflConfig& cfg);
double scalar_focal_loss(const std::vector<float>& pred, const std::vector<float>& target,
                         const HflConfig& cfg);
double scalar_hybrid_focal(const std::vector<float>& pred, const std::vector<float>& target,
                           const HflConfig& cfg);
// n_images splits the buffers into equal-sized per-image slices for the
// per-image class weights.
double scalar_wce(const std::vector<float>& pred, const std::vector<float>& target,
                  int n_images);

// Naive nested-loop cross-correlation, independent of the im2col/GEMM path.
template <typename T>
std::vector<T> reference_conv2d(const Tensor& input, const std::vector<T>& weight,
                                const std::vector<T>* bias, const ConvSpec& spec);

struct SuiteResult {
  std::string name;
  double max_error = 0.0;
  double tolerance = 0.0;
  bool pass = false;
  std::string detail;
};

// Transformed-weight convolution against the direct difference interpreter,
// all four variants. `inject_fault` flips one transformed cell's sign to
// prove the harness notices.
SuiteResult run_equivalence_suite(std::uint64_t seed, int trials, bool inject_fault = false);
// Same comparison in full double precision.
SuiteResult run_equivalence_suite_f64(std::uint64_t seed, int trials);

// Tensor-op losses against the scalar evaluators on random instances.
SuiteResult run_loss_oracle_suite(std::uint64_t seed, int trials);

// Finite-difference gradient checks: the four losses w.r.t. predictions and
// a 2-block CPDC+MSEM+DRC stack w.r.t. every parameter.
SuiteResult run_loss_gradient_suite(std::uint64_t seed);
SuiteResult run_stack_gradient_suite(std::uint64_t seed);

std::vector<SuiteResult> run_all(std::uint64_t seed, int trials, bool inject_fault = false);

}  // namespace cpdnet::checks
