#pragma once

// Prototype bank, additive angular margin loss, and the certainty-ratio
// pseudo-label (CR = CCS / (NNCCS + 1 + eps)).

#include <cmath>
#include <cstdint>
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include "igfiqa/common.hpp"
#include "igfiqa/gradcheck.hpp"

namespace igfiqa {

inline constexpr double kCrEpsilon = 1e-9;
inline constexpr double kMinSinTheta = 1e-7;

template <typename T>
struct PrototypeBank {
  Mat<T> weight;  // D x C, columns normalized at use
  double scale = 64.0;
  double margin = 0.5;

  PrototypeBank() = default;
  PrototypeBank(std::size_t dim, std::size_t classes, double s = 64.0, double m = 0.5)
      : weight(Mat<T>::Zero(static_cast<Eigen::Index>(dim), static_cast<Eigen::Index>(classes))), scale(s), margin(m) {
    validate();
  }

  /// Random unit columns.
  static PrototypeBank init(std::size_t dim, std::size_t classes, std::uint64_t seed, double s = 64.0, double m = 0.5) {
    PrototypeBank bank(dim, classes, s, m);
    auto rng = make_rng(seed, {id(Stream::kInit), 1});
    for (Eigen::Index c = 0; c < bank.weight.cols(); ++c) {
      for (Eigen::Index d = 0; d < bank.weight.rows(); ++d) bank.weight(d, c) = static_cast<T>(normal(rng));
      bank.weight.col(c).normalize();
    }
    return bank;
  }

  std::size_t dim() const { return static_cast<std::size_t>(weight.rows()); }
  std::size_t num_classes() const { return static_cast<std::size_t>(weight.cols()); }

  void validate() const {
    if (!(scale > 0.0)) throw DomainError("prototype scale s must be > 0");
    if (!(margin >= 0.0 && margin < std::numbers::pi / 2)) throw DomainError("margin m must lie in [0, pi/2)");
  }

  std::vector<std::span<T>> parameters() { return {flat(weight)}; }
  std::vector<std::span<const T>> parameters() const { return {flat(weight)}; }
  static std::vector<std::string> parameter_names() { return {"prototypes.w"}; }
};

template <typename T>
Vec<T> prototype_norms(const PrototypeBank<T>& bank) {
  Vec<T> norms = bank.weight.colwise().norm().transpose();
  for (Eigen::Index c = 0; c < norms.size(); ++c)
    if (!(static_cast<double>(norms(c)) > 0.0)) throw NumericError("prototype column " + std::to_string(c) + " has zero norm");
  return norms;
}

/// B x C matrix of cosines between embedding rows and normalized prototypes,
/// clamped to [-1, 1].
template <typename T>
Mat<T> cosines(const PrototypeBank<T>& bank, const Mat<T>& emb) {
  if (static_cast<std::size_t>(emb.cols()) != bank.dim())
    throw StructuralError("embedding dimension does not match prototype bank");
  const Vec<T> norms = prototype_norms(bank);
  Mat<T> cos = (emb * bank.weight) * norms.cwiseInverse().asDiagonal();
  return cos.cwiseMax(T(-1)).cwiseMin(T(1));
}

struct CcsPair {
  double ccs;
  double nnccs;
};

template <typename Row>
CcsPair ccs_nnccs(const Row& cos_row, std::size_t label) {
  const auto n = static_cast<std::size_t>(cos_row.size());
  if (n < 2) throw DomainError("NNCCS needs at least two classes");
  if (label >= n) throw StructuralError("label out of range");
  double best = -std::numeric_limits<double>::infinity();
  for (std::size_t j = 0; j < n; ++j)
    if (j != label) best = std::max(best, static_cast<double>(cos_row[j]));
  return {static_cast<double>(cos_row[label]), best};
}

/// Not clamped: the denominator approaches eps as NNCCS -> -1.
inline double cr(double ccs, double nnccs) { return ccs / (nnccs + 1.0 + kCrEpsilon); }

struct CrBatch {
  std::vector<double> ccs;
  std::vector<double> nnccs;
  std::vector<double> cr;

  std::size_t size() const { return ccs.size(); }
};

template <typename T>
CrBatch cr_batch(const Mat<T>& cos, std::span<const std::uint32_t> labels) {
  if (static_cast<std::size_t>(cos.rows()) != labels.size()) throw StructuralError("label count does not match batch");
  CrBatch out;
  out.ccs.reserve(labels.size());
  out.nnccs.reserve(labels.size());
  out.cr.reserve(labels.size());
  for (Eigen::Index i = 0; i < cos.rows(); ++i) {
    const auto p = ccs_nnccs(cos.row(i), labels[static_cast<std::size_t>(i)]);
    out.ccs.push_back(p.ccs);
    out.nnccs.push_back(p.nnccs);
    out.cr.push_back(cr(p.ccs, p.nnccs));
  }
  return out;
}

template <typename T>
struct ArcFaceResult {
  double loss = 0.0;
  Mat<T> grad_emb;  // B x D
  Mat<T> grad_w;    // D x C
  CrBatch cr;       // from unmargined cosines
};

/// Additive angular margin softmax cross-entropy, averaged over the batch.
/// Target logit s*cos(theta_y + m), others s*cos(theta_j). Past
/// theta_y = pi - m the target continues linearly as cos(theta_y) - m*sin(m).
/// sin(theta_y) is clamped to >= 1e-7 in both value and derivative, so the
/// margin term stays differentiable at theta in {0, pi}.
template <typename T>
ArcFaceResult<T> arcface_loss(const PrototypeBank<T>& bank, const Mat<T>& emb, std::span<const std::uint32_t> labels) {
  bank.validate();
  const auto batch = static_cast<std::size_t>(emb.rows());
  if (labels.size() != batch) throw StructuralError("label count does not match batch");
  if (batch == 0) throw StructuralError("empty batch");
  const std::size_t classes = bank.num_classes();
  for (auto y : labels)
    if (y >= classes) throw StructuralError("label " + std::to_string(y) + " out of range");

  const Vec<T> norms = prototype_norms(bank);
  const Mat<T> w_hat = bank.weight * norms.cwiseInverse().asDiagonal();
  const Mat<T> raw = emb * w_hat;  // unclamped cosines
  const Mat<T> cos = raw.cwiseMax(T(-1)).cwiseMin(T(1));

  ArcFaceResult<T> out;
  out.cr = cr_batch(cos, labels);

  const double s = bank.scale, m = bank.margin;
  const double cos_m = std::cos(m), sin_m = std::sin(m);
  const double fold_cos = std::cos(std::numbers::pi - m), fold_shift = std::sin(std::numbers::pi - m) * m;
  Mat<T> grad_cos = Mat<T>::Zero(cos.rows(), cos.cols());
  std::vector<double> logits(classes);
  double total = 0.0;
  for (std::size_t i = 0; i < batch; ++i) {
    const std::size_t y = labels[i];
    const double c = static_cast<double>(cos(i, y));
    const double sin_t = std::max(std::sqrt(std::max(0.0, 1.0 - c * c)), kMinSinTheta);
    double target = c * cos_m - sin_t * sin_m;
    // d target / d c; the clamp branch has d sin_t / dc = 0.
    double dtarget = (std::sqrt(std::max(0.0, 1.0 - c * c)) > kMinSinTheta) ? cos_m + sin_m * c / sin_t : cos_m;
    if (c <= fold_cos) {
      // theta + m would pass pi, where cos(theta + m) stops decreasing.
      target = c - fold_shift;
      dtarget = 1.0;
    }

    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < classes; ++j) {
      logits[j] = s * (j == y ? target : static_cast<double>(cos(i, j)));
      mx = std::max(mx, logits[j]);
    }
    double z = 0.0;
    for (std::size_t j = 0; j < classes; ++j) z += std::exp(logits[j] - mx);
    const double lse = mx + std::log(z);
    total += lse - logits[y];
    for (std::size_t j = 0; j < classes; ++j) {
      const double p = std::exp(logits[j] - lse);
      const double dlogit = (p - (j == y ? 1.0 : 0.0)) / static_cast<double>(batch);
      const double dcos = j == y ? s * dlogit * dtarget : s * dlogit;
      // The [-1, 1] clamp passes no gradient where it is active.
      const double r = static_cast<double>(raw(i, j));
      grad_cos(i, j) = (r > 1.0 || r < -1.0) ? T(0) : static_cast<T>(dcos);
    }
  }
  out.loss = total / static_cast<double>(batch);

  // cos = emb * w_hat; w_hat = W diag(1/|w|).
  out.grad_emb = grad_cos * w_hat.transpose();
  const Mat<T> g_what = emb.transpose() * grad_cos;  // D x C
  out.grad_w.resize(g_what.rows(), g_what.cols());
  for (Eigen::Index c = 0; c < g_what.cols(); ++c) {
    const auto col = w_hat.col(c);
    const T radial = col.dot(g_what.col(c));
    out.grad_w.col(c) = (g_what.col(c) - radial * col) / norms(c);
  }
  return out;
}

}  // namespace igfiqa
