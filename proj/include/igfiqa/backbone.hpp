#pragma once

// Two-layer embedding network: input -> hidden (ReLU) -> D, then L2 normalization.

#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "igfiqa/common.hpp"
#include "igfiqa/gradcheck.hpp"
#include "igfiqa/synthdata.hpp"

namespace igfiqa {

inline constexpr double kMinPreNormLength = 1e-8;

template <typename T>
class MlpBackbone {
 public:
  MlpBackbone() = default;
  MlpBackbone(std::size_t input_dim, std::size_t hidden_dim, std::size_t embed_dim)
      : w1(Mat<T>::Zero(hidden_dim, input_dim)),
        b1(Vec<T>::Zero(hidden_dim)),
        w2(Mat<T>::Zero(embed_dim, hidden_dim)),
        b2(Vec<T>::Zero(embed_dim)) {
    if (input_dim == 0 || hidden_dim == 0 || embed_dim == 0) throw StructuralError("backbone dimensions must be positive");
  }

  /// He-style uniform fan-in initialization, zero biases.
  static MlpBackbone init(std::size_t input_dim, std::size_t hidden_dim, std::size_t embed_dim, std::uint64_t seed) {
    MlpBackbone m(input_dim, hidden_dim, embed_dim);
    auto rng = make_rng(seed, {id(Stream::kInit), 0});
    const double bound1 = std::sqrt(6.0 / static_cast<double>(input_dim));
    const double bound2 = std::sqrt(6.0 / static_cast<double>(hidden_dim));
    for (auto& x : flat(m.w1)) x = static_cast<T>(uniform(rng, -bound1, bound1));
    for (auto& x : flat(m.w2)) x = static_cast<T>(uniform(rng, -bound2, bound2));
    return m;
  }

  std::size_t input_dim() const { return static_cast<std::size_t>(w1.cols()); }
  std::size_t hidden_dim() const { return static_cast<std::size_t>(w1.rows()); }
  std::size_t embed_dim() const { return static_cast<std::size_t>(w2.rows()); }

  // Declaration order: w1, b1, w2, b2. Checkpoints and optimizers rely on it.
  std::vector<std::span<T>> parameters() { return {flat(w1), flat(b1), flat(w2), flat(b2)}; }
  std::vector<std::span<const T>> parameters() const { return {flat(w1), flat(b1), flat(w2), flat(b2)}; }
  static std::vector<std::string> parameter_names() { return {"backbone.w1", "backbone.b1", "backbone.w2", "backbone.b2"}; }

  /// Must be called after any in-place parameter change; invalidates caches.
  void touch() { ++generation_; }
  std::uint64_t generation() const { return generation_; }

  void check_consistent() const {
    if (b1.size() != w1.rows() || w2.cols() != w1.rows() || b2.size() != w2.rows())
      throw StructuralError("backbone parameter shapes are inconsistent");
  }

  Mat<T> w1;  // hidden x input
  Vec<T> b1;
  Mat<T> w2;  // embed x hidden
  Vec<T> b2;

 private:
  std::uint64_t generation_ = 0;
};

template <typename T>
struct GradBuffer {
  Mat<T> w1;
  Vec<T> b1;
  Mat<T> w2;
  Vec<T> b2;

  static GradBuffer zeros_like(const MlpBackbone<T>& m) {
    return {Mat<T>::Zero(m.w1.rows(), m.w1.cols()), Vec<T>::Zero(m.b1.size()), Mat<T>::Zero(m.w2.rows(), m.w2.cols()),
            Vec<T>::Zero(m.b2.size())};
  }

  GradBuffer& operator+=(const GradBuffer& o) {
    w1 += o.w1;
    b1 += o.b1;
    w2 += o.w2;
    b2 += o.b2;
    return *this;
  }

  std::vector<std::span<T>> parameters() { return {flat(w1), flat(b1), flat(w2), flat(b2)}; }
  std::vector<std::span<const T>> parameters() const { return {flat(w1), flat(b1), flat(w2), flat(b2)}; }

  bool all_finite() const { return w1.allFinite() && b1.allFinite() && w2.allFinite() && b2.allFinite(); }
};

template <typename T>
struct ForwardCache {
  Mat<T> input;     // B x input, centered pixels
  Mat<T> hidden;    // B x hidden, post-ReLU
  Mat<T> pre_norm;  // B x D
  Vec<T> norms;     // B
  Mat<T> embeddings;
  const MlpBackbone<T>* model = nullptr;
  std::uint64_t generation = 0;
};

/// Pixels are centered (p - 0.5) before the first layer.
template <typename T>
Mat<T> batch_matrix(std::span<const Image> batch) {
  if (batch.empty()) throw StructuralError("empty batch");
  const auto px = batch.front().size();
  Mat<T> x(static_cast<Eigen::Index>(batch.size()), static_cast<Eigen::Index>(px));
  for (std::size_t i = 0; i < batch.size(); ++i) {
    if (batch[i].size() != px) throw StructuralError("mixed image sizes in batch");
    const auto pixels = batch[i].pixels();
    for (std::size_t j = 0; j < px; ++j) x(i, j) = static_cast<T>(pixels[j]) - static_cast<T>(0.5);
  }
  return x;
}

template <typename T>
ForwardCache<T> forward_matrix(const MlpBackbone<T>& model, Mat<T> input) {
  model.check_consistent();
  if (input.rows() == 0) throw StructuralError("empty batch");
  if (static_cast<std::size_t>(input.cols()) != model.input_dim())
    throw StructuralError("input width " + std::to_string(input.cols()) + " does not match backbone input " +
                          std::to_string(model.input_dim()));
  ForwardCache<T> cache;
  cache.input = std::move(input);
  cache.hidden = ((cache.input * model.w1.transpose()).rowwise() + model.b1.transpose()).cwiseMax(T(0));
  cache.pre_norm = (cache.hidden * model.w2.transpose()).rowwise() + model.b2.transpose();
  cache.norms = cache.pre_norm.rowwise().norm();
  for (Eigen::Index i = 0; i < cache.norms.size(); ++i)
    if (!(static_cast<double>(cache.norms(i)) >= kMinPreNormLength))
      throw NumericError("pre-normalization embedding of sample " + std::to_string(i) + " has degenerate norm " +
                         std::to_string(static_cast<double>(cache.norms(i))));
  cache.embeddings = cache.norms.cwiseInverse().asDiagonal() * cache.pre_norm;
  cache.model = &model;
  cache.generation = model.generation();
  return cache;
}

template <typename T>
ForwardCache<T> forward(const MlpBackbone<T>& model, std::span<const Image> batch) {
  if (batch.empty()) throw StructuralError("empty batch");
  if (batch.front().size() != model.input_dim())
    throw StructuralError("image has " + std::to_string(batch.front().size()) + " pixels, backbone expects " +
                          std::to_string(model.input_dim()));
  return forward_matrix(model, batch_matrix<T>(batch));
}

/// Embeddings only, for inference.
template <typename T>
Mat<T> embed(const MlpBackbone<T>& model, std::span<const Image> batch) {
  return forward(model, batch).embeddings;
}

/// Gradient w.r.t. parameters given the gradient w.r.t. the unit-norm
/// embeddings. The normalization Jacobian (I - e e^T) / |z| removes the
/// radial component of each row.
template <typename T>
GradBuffer<T> backward(const MlpBackbone<T>& model, const ForwardCache<T>& cache, const Mat<T>& grad_embeddings,
                       std::type_identity_t<Mat<T>>* grad_input = nullptr) {
  if (cache.model != &model || cache.generation != model.generation())
    throw StructuralError("stale forward cache: model changed since forward()");
  if (grad_embeddings.rows() != cache.embeddings.rows() || grad_embeddings.cols() != cache.embeddings.cols())
    throw StructuralError("embedding gradient shape does not match forward batch");

  const Mat<T>& e = cache.embeddings;
  const Vec<T> radial = (grad_embeddings.cwiseProduct(e)).rowwise().sum();
  Mat<T> g_pre = grad_embeddings - radial.asDiagonal() * e;
  g_pre = cache.norms.cwiseInverse().asDiagonal() * g_pre;

  GradBuffer<T> g;
  g.w2 = g_pre.transpose() * cache.hidden;
  g.b2 = g_pre.colwise().sum().transpose();
  Mat<T> g_hidden = g_pre * model.w2;
  g_hidden = g_hidden.cwiseProduct((cache.hidden.array() > T(0)).template cast<T>().matrix());
  g.w1 = g_hidden.transpose() * cache.input;
  g.b1 = g_hidden.colwise().sum().transpose();
  if (grad_input) *grad_input = g_hidden * model.w1;
  return g;
}

/// Compares backward() against central differences for a loss of the
/// embeddings. `loss_fn(emb)` returns {loss, d loss / d emb}.
template <typename T, typename LossFn>
GradCheckReport grad_check(const MlpBackbone<T>& model, LossFn&& loss_fn, std::span<const Image> batch, double tol,
                           double step = 1e-4, std::size_t max_checks = 400, std::uint64_t seed = 0) {
  MlpBackbone<T> work = model;
  const auto cache = forward(work, batch);
  const auto [loss, grad_emb] = loss_fn(cache.embeddings);
  (void)loss;
  const auto grads = backward(work, cache, grad_emb);
  auto eval = [&] { return loss_fn(forward(work, batch).embeddings).first; };
  return compare_with_finite_differences<T>(work.parameters(), grads.parameters(), MlpBackbone<T>::parameter_names(),
                                            eval, step, tol, max_checks, seed);
}

}  // namespace igfiqa
