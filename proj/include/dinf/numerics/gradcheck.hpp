#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "dinf/numerics/parameter_store.hpp"
#include "dinf/numerics/tape.hpp"

namespace dinf {

struct GradcheckOptions {
  /// 0 checks every entry; otherwise a seeded sample of at most this many
  /// entries per parameter tensor.
  Index max_entries_per_param = 0;
  std::uint64_t sample_seed = 0;
};

struct GradcheckReport {
  bool passed = false;
  double max_rel_error = 0.0;
  std::string worst_param;
  Index worst_index = -1;
  Index checked = 0;
  /// Entries skipped because a perturbation of size h crossed a kink.
  Index excluded = 0;
  std::string failure;
};

/// Compares tape gradients of a scalar composite against central
/// differences (f(p+h) - f(p-h)) / 2h for every parameter entry.
///
/// `f(tape, params)` must record a deterministic scalar on `tape`. The
/// error of an entry is |analytic - numeric| / max(1, |analytic|, |numeric|),
/// i.e. absolute for small gradients and relative for large ones. An entry
/// is excluded when either perturbed forward pass takes a different branch
/// of any non-smooth primitive than the unperturbed pass.
template <typename Scalar, typename F>
GradcheckReport gradcheck(F&& f, ParameterStore<Scalar>& params, Scalar h, Scalar tol,
                          const GradcheckOptions& options = {}) {
  GradcheckReport report;
  for (const auto& [name, e] : params.entries()) {
    if (!e.value.all_finite()) {
      report.failure = "non-finite value in parameter '" + name + "'";
      return report;
    }
  }

  std::uint64_t base_signature = 0;
  ParameterStore<Scalar> analytic = params;
  analytic.zero_grad();
  {
    Tape<Scalar> tape;
    auto out = f(tape, static_cast<const ParameterStore<Scalar>&>(params));
    if (!std::isfinite(static_cast<double>(out.value()[0]))) {
      report.failure = "non-finite composite value";
      return report;
    }
    base_signature = tape.branch_signature();
    tape.backward(out);
    tape.accumulate_into(analytic);
  }

  auto evaluate = [&](std::uint64_t& signature) {
    Tape<Scalar> tape;
    auto out = f(tape, static_cast<const ParameterStore<Scalar>&>(params));
    signature = tape.branch_signature();
    return out.value()[0];
  };

  std::mt19937_64 rng(options.sample_seed);
  for (auto& [name, e] : params.entries()) {
    std::vector<Index> indices(static_cast<std::size_t>(e.value.size()));
    for (Index i = 0; i < e.value.size(); ++i) indices[i] = i;
    if (options.max_entries_per_param > 0 && e.value.size() > options.max_entries_per_param) {
      std::shuffle(indices.begin(), indices.end(), rng);
      indices.resize(static_cast<std::size_t>(options.max_entries_per_param));
      std::sort(indices.begin(), indices.end());
    }
    const Tensor<Scalar>& grad = analytic.entry(name).grad;
    for (Index i : indices) {
      const Scalar saved = e.value[i];
      std::uint64_t sig_plus = 0, sig_minus = 0;
      e.value[i] = saved + h;
      const Scalar f_plus = evaluate(sig_plus);
      e.value[i] = saved - h;
      const Scalar f_minus = evaluate(sig_minus);
      e.value[i] = saved;
      if (!std::isfinite(static_cast<double>(f_plus)) || !std::isfinite(static_cast<double>(f_minus)) ||
          !std::isfinite(static_cast<double>(grad[i]))) {
        report.failure = "NaN encountered in parameter '" + name + "'";
        report.worst_param = name;
        report.worst_index = i;
        return report;
      }
      if (sig_plus != base_signature || sig_minus != base_signature) {
        ++report.excluded;
        continue;
      }
      const double numeric = static_cast<double>((f_plus - f_minus) / (Scalar(2) * h));
      const double a = static_cast<double>(grad[i]);
      const double err = std::abs(a - numeric) / std::max({1.0, std::abs(a), std::abs(numeric)});
      ++report.checked;
      if (err > report.max_rel_error || report.worst_index < 0) {
        report.max_rel_error = err;
        report.worst_param = name;
        report.worst_index = i;
      }
    }
  }
  report.passed = report.max_rel_error <= static_cast<double>(tol);
  if (!report.passed) {
    report.failure = "max error " + std::to_string(report.max_rel_error) + " at '" + report.worst_param + "'[" +
                     std::to_string(report.worst_index) + "]";
  }
  return report;
}

}  // namespace dinf
