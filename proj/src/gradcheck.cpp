#include "fdet/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <sstream>
#include <stdexcept>

namespace fdet {

double GradCheckReport::max_rel_error() const {
  double m = 0;
  for (const auto& e : entries) m = std::max(m, e.max_rel_error);
  return m;
}

std::string GradCheckReport::to_string() const {
  std::ostringstream os;
  os.precision(3);
  os << std::scientific;
  os << "gradcheck eps=" << epsilon << "\n";
  for (const auto& e : entries)
    os << "  " << e.name << "  checked=" << e.checked << "  max_rel_err=" << e.max_rel_error
       << "\n";
  os << "max_rel_err=" << max_rel_error() << "\n";
  return os.str();
}

GradCheckReport finite_diff_check(std::span<Param* const> params,
                                  const std::function<double()>& loss,
                                  const std::function<void()>& analytic,
                                  const GradCheckOptions& opts) {
  if (!(opts.eps >= 1e-7 && opts.eps <= 1e-3))
    throw std::invalid_argument("finite_diff_check: eps must lie in [1e-7, 1e-3]");
  analytic();
  std::vector<Tensor> grads;
  grads.reserve(params.size());
  for (Param* p : params) grads.push_back(p->grad);

  std::mt19937_64 rng(opts.seed);
  GradCheckReport report;
  report.epsilon = opts.eps;
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    Param& p = *params[pi];
    std::vector<std::size_t> idx(p.value.size());
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    if (idx.size() > opts.max_per_param) {
      std::shuffle(idx.begin(), idx.end(), rng);
      idx.resize(opts.max_per_param);
      std::sort(idx.begin(), idx.end());
    }
    GradCheckEntry entry{p.name, idx.size(), 0.0};
    for (std::size_t i : idx) {
      const double orig = p.value[i];
      p.value[i] = orig + opts.eps;
      const double lp = loss();
      p.value[i] = orig - opts.eps;
      const double lm = loss();
      p.value[i] = orig;
      const double numeric = (lp - lm) / (2 * opts.eps);
      const double a = grads[pi][i];
      const double denom = std::max({std::abs(a), std::abs(numeric), opts.floor});
      entry.max_rel_error = std::max(entry.max_rel_error, std::abs(a - numeric) / denom);
    }
    report.entries.push_back(entry);
  }
  return report;
}

}  // namespace fdet
