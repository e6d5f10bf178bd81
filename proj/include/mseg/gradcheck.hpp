#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

#include "mseg/tensor.hpp"

namespace mseg {

struct GradcheckResult {
  std::string op;
  /// Largest elementwise |analytic - numeric| / max(|analytic|, |numeric|, floor),
  /// with floor = 1e-3 * max |numeric| of that tensor.
  double max_rel_err = 0;
  Index checked = 0;
  bool passed = false;
};

double grad_rel_err(const Tensor4d& analytic, const Tensor4d& numeric);

/// Reverse-mode gradients of every op kind, plus whole RFB and aggregation
/// graphs, against central finite differences at 64-bit precision.
std::vector<GradcheckResult> run_gradchecks(std::uint64_t seed, double tolerance = 1e-4, double eps = 1e-5);

nlohmann::ordered_json to_json(const std::vector<GradcheckResult>& results);
std::string format_table(const std::vector<GradcheckResult>& results);

}  // namespace mseg
