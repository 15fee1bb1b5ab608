#pragma once

// Verification protocol, FMR-calibrated thresholds, error-versus-reject
// curves, correlation statistics and the brute-force oracles.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <optional>
#include <ostream>
#include <span>
#include <vector>

#include "igfiqa/backbone.hpp"
#include "igfiqa/common.hpp"
#include "igfiqa/igtracker.hpp"
#include "igfiqa/marginhead.hpp"
#include "igfiqa/synthdata.hpp"

namespace igfiqa {

struct VerificationPair {
  std::uint32_t index_a = 0;
  std::uint32_t index_b = 0;
  bool genuine = false;

  friend bool operator==(const VerificationPair&, const VerificationPair&) = default;
};

inline constexpr std::size_t kAllPairs = std::numeric_limits<std::size_t>::max();

/// All intra-class pairs (a seeded subset of max_per_class when a class has
/// more) plus `nonmated_count` random cross-class pairs.
inline std::vector<VerificationPair> gen_pairs(std::span<const std::uint32_t> labels, std::uint32_t num_classes,
                                               Rng& rng, std::size_t max_per_class, std::size_t nonmated_count) {
  std::vector<std::vector<std::uint32_t>> members(num_classes);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] >= num_classes) throw StructuralError("label out of range in gen_pairs");
    members[labels[i]].push_back(static_cast<std::uint32_t>(i));
  }
  std::vector<VerificationPair> out;
  for (const auto& m : members) {
    std::vector<VerificationPair> cls;
    for (std::size_t i = 0; i < m.size(); ++i)
      for (std::size_t j = i + 1; j < m.size(); ++j) cls.push_back({m[i], m[j], true});
    if (cls.size() > max_per_class) {
      shuffle(cls.begin(), cls.end(), rng);
      cls.resize(max_per_class);
      std::sort(cls.begin(), cls.end(), [](const auto& x, const auto& y) {
        return std::tie(x.index_a, x.index_b) < std::tie(y.index_a, y.index_b);
      });
    }
    out.insert(out.end(), cls.begin(), cls.end());
  }
  const std::size_t populated =
      static_cast<std::size_t>(std::count_if(members.begin(), members.end(), [](const auto& m) { return !m.empty(); }));
  if (populated >= 2) {
    const auto n = static_cast<std::uint64_t>(labels.size());
    for (std::size_t k = 0; k < nonmated_count;) {
      const auto a = static_cast<std::uint32_t>(uniform_index(rng, n));
      const auto b = static_cast<std::uint32_t>(uniform_index(rng, n));
      if (labels[a] == labels[b]) continue;
      out.push_back({std::min(a, b), std::max(a, b), false});
      ++k;
    }
  }
  return out;
}

inline std::vector<VerificationPair> gen_pairs(const IdentityDataset& ds, Rng& rng, std::size_t max_per_class,
                                               std::size_t nonmated_count) {
  return gen_pairs(ds.labels, ds.num_classes, rng, max_per_class, nonmated_count);
}

/// Cosine similarity per pair; embedding rows must be unit norm.
template <typename T>
std::vector<double> pair_similarities(std::span<const VerificationPair> pairs, const Mat<T>& emb) {
  std::vector<double> sims;
  sims.reserve(pairs.size());
  for (const auto& p : pairs) {
    if (p.index_a >= emb.rows() || p.index_b >= emb.rows()) throw StructuralError("pair index out of range");
    sims.push_back(static_cast<double>(emb.row(p.index_a).dot(emb.row(p.index_b))));
  }
  return sims;
}

/// Accept rule is sim >= t. With k = floor(fmr * n) and s_k the (k+1)-th
/// largest similarity, t sits halfway between s_k and the next larger
/// distinct value, so ties at s_k are rejected and the realized FMR never
/// exceeds the target.
inline double fmr_threshold(std::span<const double> nonmated_sims, double fmr_target) {
  if (nonmated_sims.empty()) throw DomainError("fmr_threshold needs at least one non-mated score");
  if (!(fmr_target > 0.0 && fmr_target < 1.0)) throw DomainError("fmr_target must lie in (0, 1)");
  std::vector<double> s(nonmated_sims.begin(), nonmated_sims.end());
  std::sort(s.begin(), s.end(), std::greater<>());
  const auto n = s.size();
  const auto k = static_cast<std::size_t>(std::floor(fmr_target * static_cast<double>(n)));
  if (k >= n) {
    // Every score may be accepted: go below the minimum.
    const double lo = s.back();
    return lo - std::max(1e-9, std::abs(lo) * 1e-9);
  }
  const double reject = s[k];
  // Smallest value strictly greater than s_k: scan upward from index k.
  std::size_t j = k;
  while (j > 0 && s[j - 1] == reject) --j;
  if (j == 0) return std::nextafter(reject, std::numeric_limits<double>::infinity());
  return 0.5 * (reject + s[j - 1]);
}

inline double realized_fmr(std::span<const double> nonmated_sims, double threshold) {
  if (nonmated_sims.empty()) return 0.0;
  const auto accepted = std::count_if(nonmated_sims.begin(), nonmated_sims.end(), [&](double x) { return x >= threshold; });
  return static_cast<double>(accepted) / static_cast<double>(nonmated_sims.size());
}

/// Fraction of kept mated pairs with sim < threshold; nullopt when nothing is kept.
inline std::optional<double> fnmr(std::span<const double> mated_sims, double threshold, std::span<const char> keep_mask) {
  if (keep_mask.size() != mated_sims.size()) throw StructuralError("keep mask length does not match score list");
  std::size_t kept = 0, misses = 0;
  for (std::size_t i = 0; i < mated_sims.size(); ++i) {
    if (!keep_mask[i]) continue;
    ++kept;
    if (mated_sims[i] < threshold) ++misses;
  }
  if (kept == 0) return std::nullopt;
  return static_cast<double>(misses) / static_cast<double>(kept);
}

inline std::optional<double> fnmr(std::span<const double> mated_sims, double threshold) {
  std::vector<char> all(mated_sims.size(), 1);
  return fnmr(mated_sims, threshold, all);
}

/// Trapezoidal area, unnormalized.
inline double auc(std::span<const std::pair<double, double>> points) {
  if (points.size() < 2) throw DomainError("AUC needs at least two points");
  double area = 0.0;
  for (std::size_t i = 1; i < points.size(); ++i) {
    const double dx = points[i].first - points[i - 1].first;
    if (!(dx > 0.0)) throw DomainError("AUC points must have strictly increasing x");
    area += 0.5 * dx * (points[i].second + points[i - 1].second);
  }
  return area;
}

struct ErcCurve {
  double fmr_target = 0.0;
  double threshold = 0.0;
  std::vector<std::pair<double, double>> points;  // (reject_rate, fnmr)
  double auc = std::numeric_limits<double>::quiet_NaN();

  void write_csv(std::ostream& os) const {
    os << "reject_rate,fnmr\n";
    os.precision(10);
    for (const auto& [r, f] : points) os << r << ',' << f << '\n';
  }
};

inline constexpr double kDefaultGridStep = 0.01;
inline constexpr double kMaxRejectRate = 0.95;

/// ERC at a fixed threshold. Pair quality is the min of its two sample
/// scores. At reject rate r the cutoff is the quality of the
/// floor(r*P)-th pair in ascending order (ties ordered by sample index), and
/// pairs strictly below the cutoff are dropped, so a tie group is never split.
inline ErcCurve erc_at_threshold(std::span<const VerificationPair> pairs, std::span<const double> sims,
                                 std::span<const double> quality_scores, double threshold,
                                 double grid_step = kDefaultGridStep, double max_reject = kMaxRejectRate) {
  if (pairs.size() != sims.size()) throw StructuralError("pair and similarity lists differ in length");
  if (!(grid_step > 0.0 && grid_step < 1.0)) throw DomainError("grid_step must lie in (0, 1)");
  const std::size_t n = pairs.size();
  std::vector<double> pq(n);
  for (std::size_t i = 0; i < n; ++i) {
    const auto& p = pairs[i];
    if (p.index_a >= quality_scores.size() || p.index_b >= quality_scores.size())
      throw StructuralError("pair index exceeds quality score list");
    pq[i] = std::min(quality_scores[p.index_a], quality_scores[p.index_b]);
  }
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t x, std::size_t y) {
    const auto kx = std::make_tuple(pq[x], std::min(pairs[x].index_a, pairs[x].index_b),
                                    std::max(pairs[x].index_a, pairs[x].index_b), x);
    const auto ky = std::make_tuple(pq[y], std::min(pairs[y].index_a, pairs[y].index_b),
                                    std::max(pairs[y].index_a, pairs[y].index_b), y);
    return kx < ky;
  });

  ErcCurve curve;
  curve.threshold = threshold;
  std::vector<char> keep(n);
  std::vector<double> mated;
  for (std::size_t k = 0;; ++k) {
    const double r = static_cast<double>(k) * grid_step;
    if (r > max_reject + 1e-12) break;
    const auto target = static_cast<std::size_t>(std::floor(r * static_cast<double>(n) + 1e-9));
    std::fill(keep.begin(), keep.end(), 1);
    if (target >= n) {
      std::fill(keep.begin(), keep.end(), 0);
    } else if (target > 0) {
      const double cutoff = pq[order[target]];
      for (std::size_t i = 0; i < n; ++i)
        if (pq[i] < cutoff) keep[i] = 0;
    }
    std::size_t kept = 0, misses = 0;
    for (std::size_t i = 0; i < n; ++i) {
      if (!pairs[i].genuine || !keep[i]) continue;
      ++kept;
      if (sims[i] < threshold) ++misses;
    }
    if (kept == 0) break;
    curve.points.emplace_back(r, static_cast<double>(misses) / static_cast<double>(kept));
  }
  if (curve.points.size() >= 2) curve.auc = auc(curve.points);
  return curve;
}

/// Calibrates the threshold once on all non-mated pairs, then sweeps rejection.
inline ErcCurve erc(std::span<const VerificationPair> pairs, std::span<const double> sims,
                    std::span<const double> quality_scores, double fmr_target, double grid_step = kDefaultGridStep) {
  if (pairs.size() != sims.size()) throw StructuralError("pair and similarity lists differ in length");
  std::vector<double> nonmated;
  for (std::size_t i = 0; i < pairs.size(); ++i)
    if (!pairs[i].genuine) nonmated.push_back(sims[i]);
  const double t = fmr_threshold(nonmated, fmr_target);
  ErcCurve curve = erc_at_threshold(pairs, sims, quality_scores, t, grid_step);
  curve.fmr_target = fmr_target;
  return curve;
}

// ---------------------------------------------------------------------------
// Statistics

inline double pearson(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw StructuralError("pearson: length mismatch");
  if (a.size() < 2) throw DomainError("pearson needs at least two points");
  const double n = static_cast<double>(a.size());
  const double ma = std::accumulate(a.begin(), a.end(), 0.0) / n;
  const double mb = std::accumulate(b.begin(), b.end(), 0.0) / n;
  double sab = 0.0, saa = 0.0, sbb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    sab += (a[i] - ma) * (b[i] - mb);
    saa += (a[i] - ma) * (a[i] - ma);
    sbb += (b[i] - mb) * (b[i] - mb);
  }
  if (saa == 0.0 || sbb == 0.0) throw DomainError("correlation undefined for constant input");
  return std::clamp(sab / std::sqrt(saa * sbb), -1.0, 1.0);
}

/// 1-based ranks with ties sharing their average rank.
inline std::vector<double> average_ranks(std::span<const double> x) {
  std::vector<std::size_t> order(x.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t i, std::size_t j) { return x[i] < x[j]; });
  std::vector<double> ranks(x.size());
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j + 1 < order.size() && x[order[j + 1]] == x[order[i]]) ++j;
    const double r = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t k = i; k <= j; ++k) ranks[order[k]] = r;
    i = j + 1;
  }
  return ranks;
}

inline double spearman(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw StructuralError("spearman: length mismatch");
  const auto ra = average_ranks(a), rb = average_ranks(b);
  return pearson(ra, rb);
}

/// Mean absolute change of CCS between two snapshots of the same samples.
inline double ccs_dist(std::span<const double> prev, std::span<const double> cur) {
  if (prev.size() != cur.size()) throw StructuralError("ccs_dist: snapshot lengths differ");
  if (prev.empty()) throw DomainError("ccs_dist needs at least one tracked sample");
  double total = 0.0;
  for (std::size_t i = 0; i < prev.size(); ++i) total += std::abs(cur[i] - prev[i]);
  return total / static_cast<double>(prev.size());
}

// ---------------------------------------------------------------------------
// Oracles

/// Embeds the whole dataset in chunks.
template <typename T>
Mat<T> embed_dataset(const MlpBackbone<T>& model, std::span<const Image> images, std::size_t chunk = 512) {
  Mat<T> out(static_cast<Eigen::Index>(images.size()), static_cast<Eigen::Index>(model.embed_dim()));
  for (std::size_t start = 0; start < images.size(); start += chunk) {
    const std::size_t len = std::min(chunk, images.size() - start);
    out.middleRows(static_cast<Eigen::Index>(start), static_cast<Eigen::Index>(len)) =
        embed(model, images.subspan(start, len));
  }
  return out;
}

/// Exact per-class mean squared distance to the class centroid.
template <typename T>
std::vector<double> oracle_variance_from_embeddings(const Mat<T>& emb, std::span<const std::uint32_t> labels,
                                                    std::size_t num_classes) {
  if (static_cast<std::size_t>(emb.rows()) != labels.size()) throw StructuralError("embedding/label count mismatch");
  const auto d = emb.cols();
  Mat<double> mean = Mat<double>::Zero(static_cast<Eigen::Index>(num_classes), d);
  std::vector<std::size_t> count(num_classes, 0);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] >= num_classes) throw StructuralError("label out of range");
    mean.row(labels[i]) += emb.row(static_cast<Eigen::Index>(i)).template cast<double>();
    ++count[labels[i]];
  }
  for (std::size_t c = 0; c < num_classes; ++c) {
    if (count[c] == 0) throw DomainError("oracle_variance: class " + std::to_string(c) + " has no samples");
    mean.row(static_cast<Eigen::Index>(c)) /= static_cast<double>(count[c]);
  }
  std::vector<double> var(num_classes, 0.0);
  for (std::size_t i = 0; i < labels.size(); ++i)
    var[labels[i]] +=
        (emb.row(static_cast<Eigen::Index>(i)).template cast<double>() - mean.row(labels[i])).squaredNorm();
  for (std::size_t c = 0; c < num_classes; ++c) var[c] /= static_cast<double>(count[c]);
  return var;
}

template <typename T>
std::vector<double> oracle_variance(const IdentityDataset& ds, const MlpBackbone<T>& model) {
  return oracle_variance_from_embeddings(embed_dataset(model, std::span<const Image>(ds.images)), ds.labels,
                                         ds.num_classes);
}

struct TrackerCostProbe {
  double ema_seconds = 0.0;    // per iteration
  double naive_seconds = 0.0;  // per iteration
  double ratio = 0.0;          // naive / ema
  std::vector<double> ema_v;   // tracker state after the probed updates
  std::vector<double> naive_variance;
};

/// Times one iteration of (a) the EMA path: forward a batch, take CCS against
/// the prototypes, update the tracker; and (b) the naive path: embed the full
/// dataset and recompute the exact per-class variance.
template <typename T>
TrackerCostProbe tracker_cost_probe(const IdentityDataset& ds, const MlpBackbone<T>& model,
                                    const PrototypeBank<T>& bank, VarianceTracker<T> tracker, std::size_t batch_size,
                                    std::size_t repeats = 3, std::uint64_t seed = 0) {
  using clock = std::chrono::steady_clock;
  if (ds.size() == 0) throw DomainError("tracker_cost_probe needs a nonempty dataset");
  batch_size = std::max<std::size_t>(1, std::min(batch_size, ds.size()));
  repeats = std::max<std::size_t>(1, repeats);
  auto rng = make_rng(seed, {id(Stream::kProbe)});

  TrackerCostProbe out;
  double ema_total = 0.0;
  for (std::size_t r = 0; r < repeats; ++r) {
    std::vector<Image> batch;
    std::vector<std::uint32_t> labels;
    for (std::size_t i = 0; i < batch_size; ++i) {
      const auto k = uniform_index(rng, ds.size());
      batch.push_back(ds.images[k]);
      labels.push_back(ds.labels[k]);
    }
    const auto t0 = clock::now();
    const Mat<T> emb = embed(model, std::span<const Image>(batch));
    const Mat<T> cos = cosines(bank, emb);
    std::vector<double> ccs(labels.size());
    for (std::size_t i = 0; i < labels.size(); ++i) ccs[i] = static_cast<double>(cos(static_cast<Eigen::Index>(i), labels[i]));
    tracker.update(labels, ccs);
    ema_total += std::chrono::duration<double>(clock::now() - t0).count();
  }
  double naive_total = 0.0;
  for (std::size_t r = 0; r < repeats; ++r) {
    const auto t0 = clock::now();
    out.naive_variance = oracle_variance(ds, model);
    naive_total += std::chrono::duration<double>(clock::now() - t0).count();
  }
  out.ema_seconds = ema_total / static_cast<double>(repeats);
  out.naive_seconds = naive_total / static_cast<double>(repeats);
  out.ratio = out.ema_seconds > 0.0 ? out.naive_seconds / out.ema_seconds : std::numeric_limits<double>::infinity();
  out.ema_v.assign(tracker.v().begin(), tracker.v().end());
  return out;
}

}  // namespace igfiqa
