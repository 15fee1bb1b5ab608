#pragma once

// Per-class EMA estimate of intra-class variance, using 1 - CCS as the
// per-sample observation, and the z-score clamped loss weights derived from it.

#include <cmath>
#include <cstdint>
#include <map>
#include <numeric>
#include <ostream>
#include <span>
#include <vector>

#include "igfiqa/common.hpp"

namespace igfiqa {

enum class AlphaSchedule : std::uint8_t { kLinear = 0, kFixed = 1 };

template <typename T>
struct WeightVector {
  std::vector<T> w;
  double mean = 0.0;
  double stddev = 0.0;

  std::size_t zero_count() const {
    return static_cast<std::size_t>(std::count(w.begin(), w.end(), T(0)));
  }
  double zero_fraction() const { return w.empty() ? 0.0 : static_cast<double>(zero_count()) / w.size(); }
};

inline constexpr double kDegenerateSigma = 1e-12;

template <typename T>
class VarianceTracker {
 public:
  VarianceTracker() = default;
  VarianceTracker(std::size_t num_classes, std::uint64_t total_steps, double alpha_start = 0.9, double alpha_end = 1.0)
      : v_(num_classes, T(1)), total_steps_(total_steps), alpha_start_(alpha_start), alpha_end_(alpha_end) {}

  /// Fixed momentum for every step (ablation of the schedule).
  static VarianceTracker fixed(std::size_t num_classes, std::uint64_t total_steps, double alpha) {
    VarianceTracker t(num_classes, total_steps, alpha, alpha);
    t.schedule_ = AlphaSchedule::kFixed;
    return t;
  }

  std::size_t num_classes() const { return v_.size(); }
  std::span<const T> v() const { return v_; }
  std::span<T> v_mut() { return v_; }
  std::uint64_t step() const { return step_; }
  std::uint64_t total_steps() const { return total_steps_; }
  double alpha_start() const { return alpha_start_; }
  double alpha_end() const { return alpha_end_; }
  AlphaSchedule schedule() const { return schedule_; }

  void restore(std::vector<T> v, std::uint64_t step, std::uint64_t total_steps, double alpha_start, double alpha_end,
               AlphaSchedule schedule) {
    if (total_steps > 0 && step > total_steps) throw StructuralError("tracker step exceeds total_steps");
    v_ = std::move(v);
    step_ = step;
    total_steps_ = total_steps;
    alpha_start_ = alpha_start;
    alpha_end_ = alpha_end;
    schedule_ = schedule;
  }

  /// Linear per-iteration ramp from alpha_start to alpha_end.
  double alpha_at() const {
    if (schedule_ == AlphaSchedule::kFixed) return alpha_start_;
    if (total_steps_ == 0) throw DomainError("alpha_at requires total_steps > 0");
    const double t = static_cast<double>(std::min(step_, total_steps_)) / static_cast<double>(total_steps_);
    return alpha_start_ + (alpha_end_ - alpha_start_) * t;
  }

  /// One EMA step per class present in the batch, fed by the class mean of
  /// (1 - CCS). Absent classes are untouched; the step counter advances once.
  void update(std::span<const std::uint32_t> labels, std::span<const double> ccs) {
    if (labels.size() != ccs.size()) throw StructuralError("tracker update: labels and CCS differ in length");
    std::map<std::uint32_t, std::pair<double, std::size_t>> sums;
    for (std::size_t i = 0; i < labels.size(); ++i) {
      if (labels[i] >= v_.size()) throw StructuralError("tracker update: unknown class " + std::to_string(labels[i]));
      auto& [sum, n] = sums[labels[i]];
      sum += 1.0 - ccs[i];
      ++n;
    }
    apply(sums);
  }

  void update(const std::map<std::uint32_t, std::vector<double>>& class_ccs) {
    std::map<std::uint32_t, std::pair<double, std::size_t>> sums;
    for (const auto& [cls, values] : class_ccs) {
      if (cls >= v_.size()) throw StructuralError("tracker update: unknown class " + std::to_string(cls));
      if (values.empty()) continue;
      auto& [sum, n] = sums[cls];
      for (double c : values) sum += 1.0 - c;
      n = values.size();
    }
    apply(sums);
  }

  /// w = 1 + clamp((v - mean) / sigma, -1, 0); all ones when sigma < 1e-12.
  WeightVector<T> weights() const { return z_clamped_weights<T>(v_); }

  template <typename U>
  static WeightVector<U> z_clamped_weights(std::span<const U> v) {
    WeightVector<U> out;
    out.w.assign(v.size(), U(1));
    if (v.empty()) return out;
    double mean = 0.0;
    for (auto x : v) mean += static_cast<double>(x);
    mean /= static_cast<double>(v.size());
    double var = 0.0;
    for (auto x : v) var += (static_cast<double>(x) - mean) * (static_cast<double>(x) - mean);
    // Population standard deviation over classes.
    const double sigma = std::sqrt(var / static_cast<double>(v.size()));
    out.mean = mean;
    out.stddev = sigma;
    if (sigma < kDegenerateSigma) return out;
    for (std::size_t i = 0; i < v.size(); ++i) {
      const double z = (static_cast<double>(v[i]) - mean) / sigma;
      out.w[i] = static_cast<U>(1.0 + std::clamp(z, -1.0, 0.0));
    }
    return out;
  }

  template <typename U>
  static WeightVector<U> z_clamped_weights(const std::vector<U>& v) {
    return z_clamped_weights<U>(std::span<const U>(v));
  }

  /// CSV `class_id,v,weight`.
  void write_csv(std::ostream& os) const {
    const auto w = weights();
    os << "class_id,v,weight\n";
    os.precision(9);
    for (std::size_t c = 0; c < v_.size(); ++c) os << c << ',' << v_[c] << ',' << w.w[c] << '\n';
  }

 private:
  void apply(const std::map<std::uint32_t, std::pair<double, std::size_t>>& sums) {
    const double alpha = alpha_at();
    for (const auto& [cls, acc] : sums) {
      const double obs = acc.first / static_cast<double>(acc.second);
      v_[cls] = static_cast<T>(alpha * static_cast<double>(v_[cls]) + (1.0 - alpha) * obs);
    }
    if (total_steps_ == 0 || step_ < total_steps_) ++step_;
  }

  std::vector<T> v_;
  std::uint64_t step_ = 0;
  std::uint64_t total_steps_ = 0;
  double alpha_start_ = 0.9;
  double alpha_end_ = 1.0;
  AlphaSchedule schedule_ = AlphaSchedule::kLinear;
};

}  // namespace igfiqa
