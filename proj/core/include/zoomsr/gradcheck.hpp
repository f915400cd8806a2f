#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace zoomsr {

struct GradCheckOptions {
  std::uint64_t seed = 1;
  // Test hook: analytic gradients of checks whose name starts with this
  // string are corrupted by 1%, so the harness must report them as failures.
  std::string inject_bad_grad;
};

struct GradCheckResult {
  std::string op;
  double max_rel_err = 0.0;
  double tolerance = 0.0;
  std::size_t checked = 0;  // coordinates compared
  std::size_t skipped = 0;  // coordinates dropped by the stability guard
  bool pass = false;
};

// Central finite differences, step 1e-3, against the tape gradients. A
// coordinate is skipped when the forward selection snapshot (argmin/argmax
// choices, relu activation patterns) differs between the two probe points,
// so min-selection flips and kink crossings never pollute the comparison.
std::vector<GradCheckResult> run_diffcore_checks(const GradCheckOptions& opts = {});

// Matrix-level losses plus the full STCL-through-extractor path, gradients
// taken with respect to the SR image.
std::vector<GradCheckResult> run_stcl_checks(const GradCheckOptions& opts = {});

// End-to-end loss gradient with respect to a sampled subset of SR model
// parameters on a tiny model.
std::vector<GradCheckResult> run_trainer_checks(const GradCheckOptions& opts = {});

bool all_passed(const std::vector<GradCheckResult>& results);
std::string format_gradcheck_report(const std::vector<GradCheckResult>& results);

}  // namespace zoomsr
