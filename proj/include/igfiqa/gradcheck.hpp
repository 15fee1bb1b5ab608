#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "igfiqa/common.hpp"

namespace igfiqa {

struct GradCheckReport {
  double max_rel_error = 0.0;
  double max_abs_error = 0.0;
  std::size_t checked = 0;
  // "tensor[index]" of the worst entry.
  std::string worst;
  bool passed = true;
};

/// |a - n| / max(|a|, |n|, floor); the floor keeps entries whose true gradient
/// is numerically zero from dominating the report.
inline double relative_error(double analytic, double numeric, double floor = 1e-6) {
  const double denom = std::max({std::abs(analytic), std::abs(numeric), floor});
  return std::abs(analytic - numeric) / denom;
}

/// Central finite differences over a subsample of parameter entries.
/// `params[k]` is perturbed in place (and restored); `analytic[k]` holds the
/// gradient claimed for it; `eval` recomputes the scalar loss.
template <typename T, typename Eval>
GradCheckReport compare_with_finite_differences(const std::vector<std::span<T>>& params,
                                                const std::vector<std::span<const T>>& analytic,
                                                const std::vector<std::string>& names, Eval&& eval,
                                                double step, double tol, std::size_t max_checks,
                                                std::uint64_t seed = 0) {
  if (params.size() != analytic.size() || params.size() != names.size())
    throw StructuralError("gradient check: parameter/gradient list mismatch");
  std::vector<std::pair<std::size_t, std::size_t>> entries;
  for (std::size_t k = 0; k < params.size(); ++k) {
    if (params[k].size() != analytic[k].size()) throw StructuralError("gradient check: shape mismatch for " + names[k]);
    for (std::size_t i = 0; i < params[k].size(); ++i) entries.emplace_back(k, i);
  }
  if (entries.size() > max_checks) {
    auto rng = make_rng(seed, {0x67636b00ULL});
    shuffle(entries.begin(), entries.end(), rng);
    entries.resize(max_checks);
    std::sort(entries.begin(), entries.end());
  }

  GradCheckReport report;
  for (auto [k, i] : entries) {
    T& x = params[k][i];
    const T saved = x;
    x = static_cast<T>(saved + step);
    const double up = static_cast<double>(eval());
    x = static_cast<T>(saved - step);
    const double down = static_cast<double>(eval());
    x = saved;
    const double numeric = (up - down) / (2.0 * step);
    const double a = static_cast<double>(analytic[k][i]);
    const double rel = relative_error(a, numeric);
    report.max_abs_error = std::max(report.max_abs_error, std::abs(a - numeric));
    if (rel > report.max_rel_error || report.worst.empty()) {
      report.max_rel_error = rel;
      report.worst = names[k] + "[" + std::to_string(i) + "]";
    }
    ++report.checked;
  }
  report.passed = report.max_rel_error <= tol;
  return report;
}

template <typename T>
std::span<T> flat(Mat<T>& m) {
  return {m.data(), static_cast<std::size_t>(m.size())};
}
template <typename T>
std::span<const T> flat(const Mat<T>& m) {
  return {m.data(), static_cast<std::size_t>(m.size())};
}
template <typename T>
std::span<T> flat(Vec<T>& v) {
  return {v.data(), static_cast<std::size_t>(v.size())};
}
template <typename T>
std::span<const T> flat(const Vec<T>& v) {
  return {v.data(), static_cast<std::size_t>(v.size())};
}

}  // namespace igfiqa
