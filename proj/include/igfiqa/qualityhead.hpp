#pragma once

// Linear quality regressor R(f(x)) = w . f(x) (+ b), trained with a
// class-weighted Smooth L1 loss against certainty-ratio pseudo-labels.

#include <cmath>
#include <span>
#include <string>
#include <vector>

#include "igfiqa/common.hpp"
#include "igfiqa/gradcheck.hpp"

namespace igfiqa {

template <typename T>
struct RegressionHead {
  Vec<T> weight;
  // Holds one entry when the bias is enabled, none otherwise.
  Vec<T> bias;
  double beta = 1.0;

  RegressionHead() = default;
  explicit RegressionHead(std::size_t dim, bool with_bias = false, double smooth_l1_beta = 1.0)
      : weight(Vec<T>::Zero(static_cast<Eigen::Index>(dim))),
        bias(Vec<T>::Zero(with_bias ? 1 : 0)),
        beta(smooth_l1_beta) {
    validate();
  }

  bool has_bias() const { return bias.size() == 1; }
  std::size_t dim() const { return static_cast<std::size_t>(weight.size()); }

  void validate() const {
    if (!(beta > 0.0)) throw DomainError("smooth L1 beta must be > 0");
    if (!weight.allFinite() || !bias.allFinite()) throw NumericError("regression head has non-finite parameters");
  }

  std::vector<std::span<T>> parameters() {
    std::vector<std::span<T>> p{flat(weight)};
    if (has_bias()) p.push_back(flat(bias));
    return p;
  }
  std::vector<std::span<const T>> parameters() const {
    std::vector<std::span<const T>> p{flat(weight)};
    if (has_bias()) p.push_back(flat(bias));
    return p;
  }
  std::vector<std::string> parameter_names() const {
    std::vector<std::string> n{"head.w"};
    if (has_bias()) n.emplace_back("head.b");
    return n;
  }
};

template <typename T>
Vec<T> predict(const RegressionHead<T>& head, const Mat<T>& emb) {
  if (static_cast<std::size_t>(emb.cols()) != head.dim())
    throw StructuralError("embedding dimension " + std::to_string(emb.cols()) + " does not match regression head " +
                          std::to_string(head.dim()));
  Vec<T> out = emb * head.weight;
  if (head.has_bias()) out.array() += head.bias(0);
  return out;
}

inline double smooth_l1(double d, double beta) {
  const double a = std::abs(d);
  return a < beta ? 0.5 / beta * d * d : a - 0.5 * beta;
}

inline double smooth_l1_grad(double d, double beta) {
  return std::abs(d) < beta ? d / beta : (d > 0 ? 1.0 : (d < 0 ? -1.0 : 0.0));
}

template <typename T>
struct RegressionLossResult {
  double loss = 0.0;
  Vec<T> grad_weight;
  Vec<T> grad_bias;
  Mat<T> grad_emb;
  std::vector<double> predictions;
};

/// L = sum_i w_i * smooth_l1(cr_i - R(e_i)). Targets are constants.
template <typename T>
RegressionLossResult<T> weighted_regression_loss(const RegressionHead<T>& head, const Mat<T>& emb,
                                                 std::span<const double> cr_targets,
                                                 std::span<const double> sample_weights) {
  head.validate();
  const auto n = static_cast<std::size_t>(emb.rows());
  if (cr_targets.size() != n || sample_weights.size() != n)
    throw StructuralError("regression loss: targets/weights do not match the batch");
  const Vec<T> pred = predict(head, emb);

  RegressionLossResult<T> out;
  out.grad_weight = Vec<T>::Zero(head.weight.size());
  out.grad_bias = Vec<T>::Zero(head.bias.size());
  out.grad_emb = Mat<T>::Zero(emb.rows(), emb.cols());
  out.predictions.resize(n);
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double p = static_cast<double>(pred(static_cast<Eigen::Index>(i)));
    out.predictions[i] = p;
    const double wi = sample_weights[i];
    if (wi == 0.0) continue;
    const double d = cr_targets[i] - p;
    total += wi * smooth_l1(d, head.beta);
    // dL/dpred = -w * l'(d)
    const auto g = static_cast<T>(-wi * smooth_l1_grad(d, head.beta));
    const auto row = static_cast<Eigen::Index>(i);
    out.grad_weight += g * emb.row(row).transpose();
    if (head.has_bias()) out.grad_bias(0) += g;
    out.grad_emb.row(row) = g * head.weight.transpose();
  }
  out.loss = total;
  return out;
}

}  // namespace igfiqa
