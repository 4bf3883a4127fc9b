#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "fdet/layers.hpp"

namespace fdet {

struct GradCheckEntry {
  std::string name;
  std::size_t checked = 0;
  double max_rel_error = 0;
};

struct GradCheckReport {
  double epsilon = 0;
  std::vector<GradCheckEntry> entries;

  double max_rel_error() const;
  std::string to_string() const;
};

struct GradCheckOptions {
  double eps = 1e-5;
  /// Elements per parameter; larger parameters are subsampled (seeded).
  std::size_t max_per_param = 200;
  std::uint64_t seed = 0;
  /// |analytic - numeric| / max(|analytic|, |numeric|, floor).
  double floor = 1e-4;
};

/// Central-difference check. `loss` runs a forward pass and returns the
/// scalar; `analytic` must zero the gradients and run forward+backward so
/// every Param::grad holds dL/dparam. Throws std::invalid_argument when eps
/// is outside [1e-7, 1e-3].
GradCheckReport finite_diff_check(std::span<Param* const> params,
                                  const std::function<double()>& loss,
                                  const std::function<void()>& analytic,
                                  const GradCheckOptions& opts = {});

}  // namespace fdet
