#pragma once

// Named finite-difference checks over every recorded primitive and the
// filter / network composites built from them.

#include <functional>
#include <span>
#include <string>
#include <vector>

#include "dinf/filter.hpp"
#include "dinf/numerics/gradcheck.hpp"

namespace dinf {

/// Problem sizes for the composite checks. `tiny` checks every entry of a
/// small model; `desk` uses the desk filter sizes and samples entries.
enum class GradcheckPreset { tiny, desk };

GradcheckPreset parse_gradcheck_preset(const std::string& name);

struct GradcheckCase {
  std::string name;
  double tol = 1e-6;
  std::function<GradcheckReport(GradcheckPreset)> run;
};

/// Step used by every case.
inline constexpr double kGradcheckStep = 1e-5;
inline constexpr double kPrimitiveTolerance = 1e-6;
inline constexpr double kCompositeTolerance = 1e-4;

/// Primitives (tolerance 1e-6) followed by the composites (1e-4), ending with
/// DINF + INFN at K = 3 + the IoU-focal-weighted loss.
std::vector<GradcheckCase> gradcheck_cases();

struct GradcheckOutcome {
  std::string name;
  double tol = 0;
  GradcheckReport report;
};

struct GradcheckSuiteResult {
  std::vector<GradcheckOutcome> outcomes;
  bool passed = true;
  /// Index into `outcomes` of the worst failing case, or -1.
  Index worst = -1;
};

GradcheckSuiteResult run_gradcheck_suite(std::span<const GradcheckCase> cases, GradcheckPreset preset,
                                         const std::function<void(const GradcheckOutcome&)>& on_case = {});

}  // namespace dinf
