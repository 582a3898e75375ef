#pragma once

#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "visa/tensor.hpp"

namespace visa {

struct GradCheckOptions {
  double h = 1e-5;                // step is h * max(1, |x|) per element
  int64_t max_per_tensor = 0;     // 0 = every element; otherwise random sample
  uint64_t sample_seed = 0x5eed;  // which elements get sampled
  double denom_floor = 1e-6;      // relative error denominator floor
};

struct GradCheckEntry {
  std::string param;
  int64_t index = 0;
  double analytic = 0.0, numeric = 0.0, rel_err = 0.0;
};

struct GradCheckResult {
  double max_rel_err = 0.0;
  GradCheckEntry worst;
  int64_t checked = 0;
  std::vector<GradCheckEntry> per_param_worst;  // one row per parameter
};

/// Central-difference check of d(loss)/d(param) for every (sampled) element.
///
/// `make_loss` must rebuild the graph from the live parameter tensors on each
/// call; it is invoked twice per checked element plus once for the analytic
/// pass. Parameters should be f64, or truncation noise will dominate.
/// Throws NumericError if any analytic gradient is non-finite.
GradCheckResult gradcheck(const std::function<TensorPtr()>& make_loss,
                          const std::vector<std::pair<std::string, TensorPtr>>& params,
                          const GradCheckOptions& opts = {});

}  // namespace visa
