#include "cpdnet/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "cpdnet/rng.hpp"

namespace cpdnet {

GradCheckReport finite_diff_check(const std::function<Tensor()>& loss_fn,
                                  const std::vector<Parameter*>& params,
                                  const GradCheckOptions& opts) {
  if (opts.epsilon < 1e-5 || opts.epsilon > 1e-2) {
    throw std::invalid_argument("finite_diff_check: epsilon must lie in [1e-5, 1e-2]");
  }

  GradCheckReport report;

  // Analytic pass.
  for (Parameter* p : params) p->value.zero_grad();
  std::vector<std::vector<float>> analytic;
  {
    Tape tape;
    Tape::Scope scope(tape);
    Tensor loss = loss_fn();
    if (!std::isfinite(loss.item())) {
      for (Parameter* p : params) {
        report.entries.push_back({p->name, 0.0, 0.0, 0, false});
      }
      report.all_finite = false;
      return report;
    }
    tape.backward(loss);
  }
  for (Parameter* p : params) analytic.push_back(p->value.grad());

  Rng rng(opts.sample_seed);
  const double eps = opts.epsilon;

  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    Parameter* p = params[pi];
    auto& data = p->value.data();
    const std::int64_t n = static_cast<std::int64_t>(data.size());

    std::vector<std::int64_t> indices;
    if (opts.max_elements_per_param > 0 && n > opts.max_elements_per_param) {
      indices.reserve(opts.max_elements_per_param);
      for (int i = 0; i < opts.max_elements_per_param; ++i) {
        indices.push_back(static_cast<std::int64_t>(rng.next_below(n)));
      }
      std::sort(indices.begin(), indices.end());
      indices.erase(std::unique(indices.begin(), indices.end()), indices.end());
    } else {
      indices.resize(n);
      for (std::int64_t i = 0; i < n; ++i) indices[i] = i;
    }

    GradCheckEntry entry;
    entry.name = p->name;
    entry.checked = static_cast<long>(indices.size());

    std::vector<double> fds(indices.size());
    double scale = 0.0;
    for (std::size_t j = 0; j < indices.size(); ++j) {
      const std::int64_t i = indices[j];
      const float saved = data[i];
      data[i] = saved + static_cast<float>(eps);
      const double actual_p = data[i];  // the step as realized in fp32
      const double lp = loss_fn().item();
      data[i] = saved - static_cast<float>(eps);
      const double actual_m = data[i];
      const double lm = loss_fn().item();
      data[i] = saved;
      if (!std::isfinite(lp) || !std::isfinite(lm)) {
        entry.finite = false;
        break;
      }
      fds[j] = (lp - lm) / (actual_p - actual_m);
      scale = std::max({scale, std::abs(fds[j]),
                        std::abs(static_cast<double>(analytic[pi][i]))});
    }

    if (entry.finite) {
      const double floor = std::max(1e-8, opts.significance * scale);
      for (std::size_t j = 0; j < indices.size(); ++j) {
        const double a = analytic[pi][indices[j]];
        const double f = fds[j];
        const double abs_err = std::abs(a - f);
        const double rel = abs_err / std::max({std::abs(a), std::abs(f), floor});
        entry.max_abs_error = std::max(entry.max_abs_error, abs_err);
        entry.max_rel_error = std::max(entry.max_rel_error, rel);
      }
    }
    report.all_finite = report.all_finite && entry.finite;
    report.max_rel_error = std::max(report.max_rel_error, entry.max_rel_error);
    report.entries.push_back(std::move(entry));
  }
  return report;
}

}  // namespace cpdnet
