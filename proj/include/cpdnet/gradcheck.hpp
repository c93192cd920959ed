#pragma once

#include <functional>
#include <string>
#include <vector>

#include "cpdnet/tensor.hpp"

namespace cpdnet {

struct GradCheckOptions {
  double epsilon = 1e-3;        // central-difference step, must lie in [1e-5, 1e-2]
  int max_elements_per_param = 0;  // 0 checks every element; otherwise a seeded sample
  std::uint64_t sample_seed = 17;
  // 0 compares every checked element against the absolute floor 1e-8.
  // A positive value raises the floor to significance * max(|analytic|,|fd|)
  // over the parameter, which keeps fp32 round-off on near-zero entries from
  // dominating the report.
  double significance = 0.0;
};

struct GradCheckEntry {
  std::string name;
  double max_rel_error = 0.0;
  double max_abs_error = 0.0;
  long checked = 0;
  bool finite = true;
};

struct GradCheckReport {
  std::vector<GradCheckEntry> entries;
  bool all_finite = true;
  double max_rel_error = 0.0;

  bool pass(double tol) const { return all_finite && max_rel_error <= tol; }
};

// Compares reverse-mode gradients of a deterministic scalar loss against
// central finite differences, parameter by parameter. Relative error is
// |a - f| / max(|a|, |f|, floor). A non-finite loss value is reported as a
// failed entry rather than thrown.
GradCheckReport finite_diff_check(const std::function<Tensor()>& loss_fn,
                                  const std::vector<Parameter*>& params,
                                  const GradCheckOptions& opts = {});

}  // namespace cpdnet
