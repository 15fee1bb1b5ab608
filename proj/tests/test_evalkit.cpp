#include <gtest/gtest.h>

#include <set>

#include "igfiqa/evalkit.hpp"

using namespace igfiqa;

namespace {

std::pair<std::vector<VerificationPair>, std::vector<double>> toy_pairs() {
  // Sample qualities 0.1, 0.9, 0.8, 0.7, 0.6.
  std::vector<VerificationPair> pairs = {{0, 1, true}, {1, 2, true}, {2, 3, true}, {1, 4, true}};
  std::vector<double> sims = {0.2, 0.3, 0.9, 0.6};
  return {pairs, sims};
}

const std::vector<double> kToyQuality = {0.1, 0.9, 0.8, 0.7, 0.6};

}  // namespace

TEST(Threshold, HandExamples) {
  std::vector<double> s;
  for (int i = 9; i >= 0; --i) s.push_back(0.1 * i);
  EXPECT_NEAR(fmr_threshold(s, 0.1), 0.85, 1e-12);
  EXPECT_DOUBLE_EQ(realized_fmr(s, fmr_threshold(s, 0.1)), 0.1);
  const double t = fmr_threshold(s, 0.05);
  EXPECT_GT(t, 0.9);
  EXPECT_EQ(realized_fmr(s, t), 0.0);
  EXPECT_NEAR(fmr_threshold(s, 0.25), 0.75, 1e-12);

  const std::vector<double> ties = {0.5, 0.5, 0.5, 0.1};
  EXPECT_EQ(realized_fmr(ties, fmr_threshold(ties, 0.5)), 0.0);
  const std::vector<double> low_tie = {0.9, 0.5, 0.5, 0.1};
  EXPECT_DOUBLE_EQ(realized_fmr(low_tie, fmr_threshold(low_tie, 0.5)), 0.25);

  EXPECT_THROW(fmr_threshold(std::vector<double>{}, 0.1), DomainError);
  EXPECT_THROW(fmr_threshold(s, 0.0), DomainError);
  EXPECT_THROW(fmr_threshold(s, 1.0), DomainError);
}

TEST(Threshold, RealizedFmrNeverExceedsTarget) {
  auto rng = make_rng(1, {300});
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t n = 1 + uniform_index(rng, 300);
    std::vector<double> s(n);
    // Coarse values force many ties.
    for (double& x : s) x = std::round(uniform(rng, -1.0, 1.0) * 20.0) / 20.0;
    for (double target : {0.001, 0.01, 0.1, 0.37}) {
      const double f = realized_fmr(s, fmr_threshold(s, target));
      EXPECT_LE(f, target + 1e-12);
    }
  }
}

TEST(Fnmr, HandExampleAndMask) {
  const std::vector<double> mated = {0.2, 0.6, 0.4, 0.9};
  EXPECT_DOUBLE_EQ(*fnmr(mated, 0.5), 0.5);
  const std::vector<char> mask = {0, 1, 1, 1};
  EXPECT_NEAR(*fnmr(mated, 0.5, mask), 1.0 / 3.0, 1e-15);
  const std::vector<char> none = {0, 0, 0, 0};
  EXPECT_FALSE(fnmr(mated, 0.5, none).has_value());
  EXPECT_DOUBLE_EQ(*fnmr(mated, 0.6), 0.5);  // accept rule is sim >= t
}

TEST(Auc, Trapezoid) {
  const std::vector<std::pair<double, double>> tri = {{0, 0}, {1, 1}};
  EXPECT_DOUBLE_EQ(auc(tri), 0.5);
  const std::vector<std::pair<double, double>> steps = {{0, 1}, {0.5, 1}, {1, 0}};
  EXPECT_DOUBLE_EQ(auc(steps), 0.75);
  const std::vector<std::pair<double, double>> bad = {{0, 1}, {0, 1}};
  EXPECT_THROW(auc(bad), DomainError);
  EXPECT_THROW(auc(std::vector<std::pair<double, double>>{{0, 1}}), DomainError);
}

TEST(Erc, HandComputedCurve) {
  const auto [pairs, sims] = toy_pairs();
  const auto c = erc_at_threshold(pairs, sims, kToyQuality, 0.5, 0.25);
  ASSERT_EQ(c.points.size(), 4u);
  EXPECT_DOUBLE_EQ(c.points[0].second, 0.5);
  EXPECT_NEAR(c.points[1].second, 1.0 / 3.0, 1e-15);
  EXPECT_DOUBLE_EQ(c.points[2].second, 0.5);
  EXPECT_DOUBLE_EQ(c.points[3].second, 1.0);
  EXPECT_DOUBLE_EQ(c.points[3].first, 0.75);
  EXPECT_NEAR(c.auc, 0.25 * ((0.5 + 1.0 / 3) / 2 + (1.0 / 3 + 0.5) / 2 + (0.5 + 1.0) / 2), 1e-15);
  std::ostringstream os;
  c.write_csv(os);
  EXPECT_EQ(os.str().substr(0, 22), "reject_rate,fnmr\n0,0.5");
}

TEST(Erc, ConstantQualityGivesFlatCurve) {
  auto rng = make_rng(2, {301});
  std::vector<std::uint32_t> labels;
  for (std::uint32_t c = 0; c < 10; ++c)
    for (int k = 0; k < 5; ++k) labels.push_back(c);
  const auto pairs = gen_pairs(labels, 10, rng, kAllPairs, 300);
  std::vector<double> sims;
  for (const auto& p : pairs) sims.push_back(p.genuine ? uniform(rng, 0.0, 1.0) : uniform(rng, -0.5, 0.6));
  const std::vector<double> q(labels.size(), 0.42);
  const auto c = erc(pairs, sims, q, 0.01);
  ASSERT_EQ(c.points.size(), 96u);
  for (const auto& p : c.points) EXPECT_EQ(p.second, c.points[0].second);
  EXPECT_NEAR(c.auc, c.points[0].second * 0.95, 1e-12);
}

TEST(Erc, InvariantToMonotoneQualityTransform) {
  auto rng = make_rng(3, {302});
  std::vector<std::uint32_t> labels;
  for (std::uint32_t c = 0; c < 8; ++c)
    for (int k = 0; k < 6; ++k) labels.push_back(c);
  const auto pairs = gen_pairs(labels, 8, rng, kAllPairs, 200);
  std::vector<double> sims, q(labels.size()), q2;
  for (const auto& p : pairs) sims.push_back(uniform(rng, -1.0, 1.0));
  for (double& x : q) x = std::round(uniform(rng, 0, 1) * 10) / 10;  // with ties
  for (double x : q) q2.push_back(std::exp(3 * x) - 7);
  const auto a = erc(pairs, sims, q, 0.05), b = erc(pairs, sims, q2, 0.05);
  EXPECT_EQ(a.points, b.points);
  EXPECT_EQ(a.threshold, b.threshold);
}

TEST(Erc, PerfectQualityDrivesFnmrDown) {
  // Quality that ranks every mated failure below every success.
  std::vector<VerificationPair> pairs;
  std::vector<double> sims, q;
  for (std::uint32_t i = 0; i < 100; ++i) {
    pairs.push_back({2 * i, 2 * i + 1, true});
    const double s = i < 30 ? 0.1 : 0.9;
    sims.push_back(s);
    q.push_back(s);
    q.push_back(s);
  }
  const auto c = erc_at_threshold(pairs, sims, q, 0.5);
  EXPECT_DOUBLE_EQ(c.points.front().second, 0.3);
  for (const auto& [r, f] : c.points)
    if (r >= 0.3 - 1e-12) EXPECT_EQ(f, 0.0);
}

TEST(Erc, RejectsMismatchedInputs) {
  const auto [pairs, sims] = toy_pairs();
  EXPECT_THROW(erc_at_threshold(pairs, std::vector<double>{0.1}, kToyQuality, 0.5), StructuralError);
  EXPECT_THROW(erc_at_threshold(pairs, sims, std::vector<double>{0.1}, 0.5), StructuralError);
  EXPECT_THROW(erc(pairs, sims, kToyQuality, 0.1), DomainError);  // no non-mated pairs
}

TEST(Pairs, CountsAndDeterminism) {
  std::vector<std::uint32_t> labels;
  for (std::uint32_t c = 0; c < 5; ++c)
    for (int k = 0; k < 4; ++k) labels.push_back(c);
  auto rng = make_rng(4, {303});
  const auto pairs = gen_pairs(labels, 5, rng, kAllPairs, 50);
  std::size_t genuine = 0;
  std::set<std::pair<std::uint32_t, std::uint32_t>> seen;
  for (const auto& p : pairs) {
    EXPECT_LT(p.index_a, p.index_b);
    EXPECT_EQ(p.genuine, labels[p.index_a] == labels[p.index_b]);
    if (p.genuine) {
      ++genuine;
      EXPECT_TRUE(seen.insert({p.index_a, p.index_b}).second);
    }
  }
  EXPECT_EQ(genuine, 5u * 6);
  EXPECT_EQ(pairs.size() - genuine, 50u);
  auto rng2 = make_rng(4, {303});
  EXPECT_EQ(gen_pairs(labels, 5, rng2, kAllPairs, 50), pairs);
  auto rng3 = make_rng(4, {303});
  const auto capped = gen_pairs(labels, 5, rng3, 2, 0);
  EXPECT_EQ(capped.size(), 10u);
}

TEST(Statistics, PearsonSpearmanAgainstReferenceValues) {
  const std::vector<double> x = {1, 2, 3, 4, 5}, y = {2, 3.9, 6.2, 8.1, 9.7};
  EXPECT_NEAR(pearson(x, y), 0.9982863806700337, 1e-12);
  const std::vector<double> b = {2, 1, 4, 3, 5};
  EXPECT_NEAR(spearman(x, b), 0.8, 1e-12);
  const std::vector<double> tx = {10, 20, 20, 30, 40}, ty = {1, 3, 2, 5, 4};
  EXPECT_NEAR(spearman(tx, ty), 0.8720815992723809, 1e-12);
  EXPECT_EQ(average_ranks(tx), (std::vector<double>{1, 2.5, 2.5, 4, 5}));
  EXPECT_THROW(pearson(x, std::vector<double>(5, 1.0)), DomainError);
  EXPECT_THROW(pearson(x, std::span<const double>(b).subspan(0, 3)), StructuralError);
}

TEST(Statistics, CcsDist) {
  EXPECT_NEAR(ccs_dist(std::vector<double>{0.1, 0.5}, std::vector<double>{0.2, 0.3}), 0.15, 1e-15);
  EXPECT_THROW(ccs_dist(std::vector<double>{}, std::vector<double>{}), DomainError);
  EXPECT_THROW(ccs_dist(std::vector<double>{0.1}, std::vector<double>{}), StructuralError);
}

TEST(Oracle, HandCases) {
  Mat<double> e(4, 2);
  e << 1, 0, -1, 0, 0.6, 0.8, 0.6, 0.8;
  const std::vector<std::uint32_t> y = {0, 0, 1, 1};
  const auto v = oracle_variance_from_embeddings(e, y, 2);
  EXPECT_DOUBLE_EQ(v[0], 1.0);
  EXPECT_DOUBLE_EQ(v[1], 0.0);
  EXPECT_THROW(oracle_variance_from_embeddings(e, y, 3), DomainError);
  const std::vector<std::uint32_t> bad = {0, 0, 1, 5};
  EXPECT_THROW(oracle_variance_from_embeddings(e, bad, 2), StructuralError);
}

TEST(Oracle, AgreesWithSecondMomentFormula) {
  auto rng = make_rng(5, {304});
  const std::size_t n = 400, c = 13;
  Mat<double> e(n, 6);
  std::vector<std::uint32_t> y(n);
  for (std::size_t i = 0; i < n; ++i) {
    y[i] = static_cast<std::uint32_t>(i % c);
    for (int d = 0; d < 6; ++d) e(i, d) = normal(rng) * (1 + y[i] % 3);
  }
  e.rowwise().normalize();
  const auto v = oracle_variance_from_embeddings(e, y, c);
  for (std::uint32_t k = 0; k < c; ++k) {
    Vec<double> sum = Vec<double>::Zero(6);
    double sq = 0;
    int cnt = 0;
    for (std::size_t i = 0; i < n; ++i)
      if (y[i] == k) sum += e.row(i).transpose(), sq += e.row(i).squaredNorm(), ++cnt;
    const double expected = sq / cnt - (sum / cnt).squaredNorm();
    EXPECT_NEAR(v[k], expected, 1e-10);
  }
}

TEST(Probe, ReplaysTrackerAndMatchesOracle) {
  SynthConfig sc;
  sc.num_classes = 5;
  sc.samples_per_class = 6;
  sc.image_side = 6;
  const auto ds = gen_dataset(sc);
  const auto model = MlpBackbone<double>::init(36, 8, 4, 1);
  const auto bank = PrototypeBank<double>::init(4, 5, 1);
  VarianceTracker<double> tracker(5, 10);
  const auto probe = tracker_cost_probe(ds, model, bank, tracker, 8, 3, 7);
  EXPECT_EQ(probe.naive_variance, oracle_variance(ds, model));
  EXPECT_GT(probe.ratio, 0.0);
  EXPECT_EQ(probe.ema_v.size(), 5u);
  for (double x : probe.ema_v) EXPECT_TRUE(std::isfinite(x));
  // Batch larger than the dataset is clamped.
  EXPECT_NO_THROW(tracker_cost_probe(ds, model, bank, tracker, 1000, 1, 7));
  IdentityDataset empty;
  EXPECT_THROW(tracker_cost_probe(empty, model, bank, tracker, 8), DomainError);
}
