#pragma once

#include <string>
#include <vector>

#include "fdet/gradcheck.hpp"

namespace fdet {

struct GradSuiteCase {
  std::string name;
  GradCheckReport report;
};

/// Finite-difference checks over every layer, both losses, RoI pooling, the
/// normalize/concat/rescale chain, the backbone, and the full
/// concatenation head with its losses. Inputs are built away from ReLU,
/// pooling and smooth-L1 kinks.
std::vector<GradSuiteCase> gradient_suite(const GradCheckOptions& opts = {});

double max_rel_error(const std::vector<GradSuiteCase>& cases);
std::string format_suite(const std::vector<GradSuiteCase>& cases);

}  // namespace fdet
