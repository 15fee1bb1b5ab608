#include <gtest/gtest.h>

#include <set>
#include <sstream>

#include "igfiqa/trainer.hpp"

using namespace igfiqa;

namespace {

IdentityDataset small_dataset(std::uint64_t seed = 3) {
  SynthConfig c;
  c.num_classes = 6;
  c.samples_per_class = 8;
  c.image_side = 8;
  c.duplicate_class_fraction = 0.34;
  c.degrade_fraction = 0.25;
  c.seed = seed;
  return gen_dataset(c);
}

TrainConfig small_config() {
  TrainConfig c;
  c.batch_size = 8;
  c.epochs = 3;
  c.hidden_dim = 16;
  c.embed_dim = 8;
  c.s = 8.0;
  c.lr = 0.05;
  c.seed = 5;
  return c;
}

std::string checkpoint_bytes(const TrainState<float>& st) {
  std::ostringstream os;
  write_checkpoint(st, os);
  return os.str();
}

template <typename S>
auto snapshot(const std::vector<S>& params) {
  std::vector<std::vector<std::remove_cv_t<typename S::element_type>>> out;
  for (auto p : params) out.emplace_back(p.begin(), p.end());
  return out;
}

}  // namespace

TEST(Sgd, HandComputedMomentumSteps) {
  std::vector<double> p = {1.0}, g = {0.5}, b = {0.0};
  sgd_update<double>(p, g, b, 0.1, 0.9, 0.0);
  EXPECT_DOUBLE_EQ(b[0], 0.5);
  EXPECT_DOUBLE_EQ(p[0], 0.95);
  sgd_update<double>(p, g, b, 0.1, 0.9, 0.0);
  EXPECT_DOUBLE_EQ(b[0], 0.95);
  EXPECT_NEAR(p[0], 0.855, 1e-15);
  std::vector<double> q = {2.0}, h = {0.0}, c = {0.0};
  sgd_update<double>(q, h, c, 0.5, 0.9, 0.1);
  EXPECT_DOUBLE_EQ(q[0], 1.9);
  std::vector<double> bad = {0.0, 0.0};
  EXPECT_THROW(sgd_update<double>(q, bad, c, 0.1, 0.9, 0.0), StructuralError);
}

TEST(Schedule, DefaultMilestonesAndStepsPerEpoch) {
  TrainConfig c;
  c.epochs = 30;
  EXPECT_EQ(c.resolved_milestones(), (std::vector<std::uint32_t>{18, 24}));
  EXPECT_DOUBLE_EQ(c.lr_at(17), 0.1);
  EXPECT_DOUBLE_EQ(c.lr_at(18), 0.01);
  EXPECT_NEAR(c.lr_at(29), 0.001, 1e-15);
  EXPECT_EQ(steps_per_epoch(100, 16), 6u);
  EXPECT_EQ(steps_per_epoch(15, 16), 0u);
  c.batch_size = 7;
  EXPECT_THROW(c.validate(), ConfigError);
}

TEST(Variant, FlagsPerVariant) {
  const TrainConfig base;
  EXPECT_TRUE(apply_variant(base, Variant::kIg).use_ig_weights);
  EXPECT_EQ(apply_variant(base, Variant::kIg).augment_p, base.augment_p);
  EXPECT_FALSE(apply_variant(base, Variant::kCr).use_ig_weights);
  EXPECT_EQ(apply_variant(base, Variant::kCr).augment_p, 0.0);
  EXPECT_EQ(apply_variant(base, Variant::kIgNoAug).augment_p, 0.0);
  EXPECT_FALSE(apply_variant(base, Variant::kCrAug).split_batch);
  EXPECT_EQ(parse_variant("cr-aug"), Variant::kCrAug);
  EXPECT_STREQ(variant_name(Variant::kIgNoAug), "ig-noaug");
  EXPECT_THROW(parse_variant("foo"), ConfigError);
}

TEST(StepBatch, HalvesAreDisjointSlicesOfThePermutation) {
  const auto ds = small_dataset();
  const auto cfg = small_config();
  const auto perm = epoch_permutation(cfg.seed, 1, ds.size());
  EXPECT_EQ(std::set<std::uint32_t>(perm.begin(), perm.end()).size(), ds.size());
  const auto b = make_step_batch(ds, cfg, perm, 1, 2);
  ASSERT_EQ(b.clean.size(), 4u);
  ASSERT_EQ(b.aug.size(), 4u);
  for (std::size_t j = 0; j < 4; ++j) {
    EXPECT_EQ(b.clean_index[j], perm[16 + j]);
    EXPECT_EQ(b.aug_index[j], perm[20 + j]);
    EXPECT_EQ(b.clean_labels[j], ds.labels[b.clean_index[j]]);
    // Clean half: the source image, possibly mirrored.
    const auto& src = ds.images[b.clean_index[j]];
    EXPECT_TRUE(b.clean[j] == src || b.clean[j] == mirror(src));
  }
  EXPECT_THROW(make_step_batch(ds, cfg, perm, 1, 6), StructuralError);
}

TEST(StepBatch, NoAugmentationLeavesOnlyFlips) {
  const auto ds = small_dataset();
  const auto cfg = apply_variant(small_config(), Variant::kCr);
  const auto perm = epoch_permutation(cfg.seed, 0, ds.size());
  const auto b = make_step_batch(ds, cfg, perm, 0, 0);
  for (std::size_t j = 0; j < b.aug.size(); ++j) {
    const auto& src = ds.images[b.aug_index[j]];
    EXPECT_TRUE(b.aug[j] == src || b.aug[j] == mirror(src));
  }
}

TEST(TrainStep, WeightsComeFromTrackerAfterItsUpdate) {
  const auto ds = small_dataset();
  const auto cfg = small_config();
  auto st = init_state<double>(cfg, ds);
  const auto perm = epoch_permutation(cfg.seed, 0, ds.size());
  for (std::uint64_t s = 0; s < 3; ++s) {
    const auto b = make_step_batch(ds, cfg, perm, 0, s);
    const auto r = train_step(st, cfg, b, cfg.lr);
    const auto w = st.tracker.weights().w;
    for (std::size_t i = 0; i < b.aug_labels.size(); ++i) EXPECT_EQ(r.sample_weights[i], w[b.aug_labels[i]]);
  }
  EXPECT_EQ(st.tracker.step(), 3u);
}

TEST(TrainStep, CrVariantUsesUnitWeights) {
  const auto ds = small_dataset();
  const auto cfg = apply_variant(small_config(), Variant::kCr);
  auto st = init_state<float>(cfg, ds);
  for (int i = 0; i < 10; ++i) {
    const auto perm = epoch_permutation(cfg.seed, 0, ds.size());
    const auto r = train_step(st, cfg, make_step_batch(ds, cfg, perm, 0, i % 6), cfg.lr);
    for (double w : r.sample_weights) EXPECT_EQ(w, 1.0);
  }
}

TEST(TrainStep, ZeroWeightsLeaveTheHeadUnchanged) {
  const auto ds = small_dataset();
  auto cfg = small_config();
  cfg.weight_decay = 0.0;
  auto st = init_state<double>(cfg, ds);
  for (double& x : flat(st.head.weight)) x = 0.25;
  const Vec<double> before = st.head.weight;
  const std::vector<double> zeros(ds.num_classes, 0.0);
  const auto perm = epoch_permutation(cfg.seed, 0, ds.size());
  for (std::uint64_t s = 0; s < 4; ++s) {
    const auto r = train_step(st, cfg, make_step_batch(ds, cfg, perm, 0, s), cfg.lr, &zeros);
    EXPECT_EQ(r.l_ig, 0.0);
  }
  EXPECT_EQ(st.head.weight, before);
}

TEST(TrainStep, NonFiniteHeadIsNumericError) {
  const auto ds = small_dataset();
  const auto cfg = small_config();
  auto st = init_state<double>(cfg, ds);
  st.head.weight(0) = std::numeric_limits<double>::infinity();
  const auto perm = epoch_permutation(cfg.seed, 0, ds.size());
  EXPECT_THROW(train_step(st, cfg, make_step_batch(ds, cfg, perm, 0, 0), cfg.lr), NumericError);
}

// Gradients of the step objective, with the pseudo-labels and weights held
// fixed, against central differences over every parameter tensor.
TEST(EvaluateStep, GradientMatchesObjectiveWithFrozenPseudoLabels) {
  const auto ds = small_dataset();
  for (bool propagate : {false, true})
    for (bool split : {true, false}) {
      auto cfg = small_config();
      cfg.propagate_lig_to_backbone = propagate;
      cfg.split_batch = split;
      cfg.head_bias = true;
      cfg.lambda = 2.0;
      auto st = init_state<double>(cfg, ds);
      auto rng = make_rng(1, {200});
      for (double& x : flat(st.head.weight)) x = 0.3 * normal(rng);
      st.head.bias(0) = 0.2;
      const auto perm = epoch_permutation(cfg.seed, 0, ds.size());
      const auto batch = make_step_batch(ds, cfg, perm, 0, 1);
      std::vector<double> w(ds.num_classes);
      for (double& x : w) x = uniform(rng, 0.0, 1.0);
      auto wf = [&](const CrBatch&, const CrBatch&) { return w; };
      const auto ev = evaluate_step(st, cfg, batch, wf);
      const auto targets = ev.cr_targets;

      auto objective = [&](const TrainState<double>& s) {
        const auto e = evaluate_step(s, cfg, batch, wf, &targets);
        // Without propagation the backbone only sees the margin loss.
        return e;
      };
      auto params = st.parameters();
      const auto names = st.parameter_names();
      const double h = 1e-5;
      for (std::size_t k = 0; k < params.size(); ++k) {
        const bool backbone = k < 4;
        const std::size_t stride = std::max<std::size_t>(1, params[k].size() / 25);
        for (std::size_t i = 0; i < params[k].size(); i += stride) {
          const double saved = params[k][i];
          params[k][i] = saved + h;
          const auto up = objective(st);
          params[k][i] = saved - h;
          const auto down = objective(st);
          params[k][i] = saved;
          const double lig_up = cfg.lambda * up.l_ig, lig_down = cfg.lambda * down.l_ig;
          const double numeric = backbone && !propagate ? (up.l_arc - down.l_arc) / (2 * h)
                                                        : (up.l_arc + lig_up - down.l_arc - lig_down) / (2 * h);
          EXPECT_NEAR(ev.grads[k][i], numeric, 1e-5 * std::max(1.0, std::abs(numeric)))
              << names[k] << "[" << i << "] propagate=" << propagate << " split=" << split;
        }
      }
    }
}

TEST(Training, IsDeterministic) {
  const auto ds = small_dataset();
  const auto cfg = small_config();
  const auto a = run_training<float>(cfg, ds), b = run_training<float>(cfg, ds);
  EXPECT_EQ(checkpoint_bytes(a), checkpoint_bytes(b));
  ASSERT_EQ(a.logs.size(), 3u);
  EXPECT_EQ(a.global_step, 18u);
}

TEST(Training, ZeroEpochsReturnsInitialState) {
  const auto ds = small_dataset();
  auto cfg = small_config();
  cfg.epochs = 0;
  const auto st = run_training<float>(cfg, ds);
  EXPECT_TRUE(st.logs.empty());
  EXPECT_EQ(checkpoint_bytes(st), checkpoint_bytes(init_state<float>(cfg, ds)));
}

TEST(Training, BackboneIgnoresRegressionBranchWithoutPropagation) {
  const auto ds = small_dataset();
  const auto base = small_config();
  const auto ig = run_training<float>(apply_variant(base, Variant::kIg), ds);
  const auto cr = run_training<float>(apply_variant(base, Variant::kCr), ds);
  const auto noaug = run_training<float>(apply_variant(base, Variant::kIgNoAug), ds);
  auto lam0 = base;
  lam0.lambda = 0.0;
  lam0.propagate_lig_to_backbone = true;
  const auto zero = run_training<float>(lam0, ds);
  for (const auto* other : {&cr, &noaug, &zero}) {
    EXPECT_EQ(ig.backbone.w1, other->backbone.w1);
    EXPECT_EQ(ig.backbone.w2, other->backbone.w2);
    EXPECT_EQ(ig.bank.weight, other->bank.weight);
  }
  // With lambda = 0 the head never moves from its zero init.
  EXPECT_EQ(zero.head.weight.cwiseAbs().maxCoeff(), 0.0f);
  EXPECT_NE(ig.head.weight, cr.head.weight);
}

TEST(Training, PropagationChangesTheBackbone) {
  const auto ds = small_dataset();
  auto cfg = small_config();
  cfg.epochs = 1;
  const auto a = run_training<float>(cfg, ds);
  cfg.propagate_lig_to_backbone = true;
  const auto b = run_training<float>(cfg, ds);
  EXPECT_NE(a.backbone.w1, b.backbone.w1);
}

TEST(Training, LogsOneRowPerEpoch) {
  const auto ds = small_dataset();
  const auto st = run_training<float>(small_config(), ds);
  std::ostringstream os;
  write_report_csv(st.logs, os);
  std::istringstream is(os.str());
  std::string line;
  std::getline(is, line);
  EXPECT_EQ(line, "epoch,l_arc,l_ig,ccs_dist,pearson_var_v,frac_zero_weight");
  int rows = 0;
  while (std::getline(is, line)) ++rows;
  EXPECT_EQ(rows, 3);
  for (const auto& l : st.logs) {
    EXPECT_TRUE(std::isfinite(l.l_arc));
    EXPECT_GE(l.ccs_dist, 0.0);
    EXPECT_GE(l.frac_zero_weight, 0.0);
    EXPECT_LE(l.frac_zero_weight, 1.0);
    std::uint32_t total = 0;
    for (auto n : l.weight_histogram) total += n;
    EXPECT_EQ(total, ds.num_classes);
  }
}

TEST(Checkpoint, RoundTripIsByteExact) {
  const auto ds = small_dataset();
  auto cfg = small_config();
  cfg.head_bias = true;
  auto st = init_state<float>(cfg, ds);
  for (int i = 0; i < 4; ++i) advance(st, cfg, ds);
  const auto bytes = checkpoint_bytes(st);
  std::istringstream is(bytes);
  const auto back = read_checkpoint<float>(is);
  EXPECT_EQ(checkpoint_bytes(back), bytes);
  EXPECT_EQ(back.step_in_epoch, 4u);
  EXPECT_TRUE(back.head.has_bias());
  EXPECT_EQ(snapshot(back.parameters()), snapshot(st.parameters()));
}

TEST(Checkpoint, CorruptInputsAreFormatErrors) {
  const auto ds = small_dataset();
  const auto cfg = small_config();
  const auto bytes = checkpoint_bytes(init_state<float>(cfg, ds));
  for (std::size_t cut : {std::size_t{3}, std::size_t{20}, bytes.size() / 2, bytes.size() - 1}) {
    std::istringstream is(bytes.substr(0, cut));
    EXPECT_THROW(read_checkpoint<float>(is), FormatError) << cut;
  }
  std::string bad = bytes;
  bad[0] = 'X';
  std::istringstream bm(bad);
  EXPECT_THROW(read_checkpoint<float>(bm), FormatError);
  std::istringstream extra(bytes + "z");
  EXPECT_THROW(read_checkpoint<float>(extra), FormatError);
  std::string version = bytes;
  version[8] = 9;
  std::istringstream bv(version);
  EXPECT_THROW(read_checkpoint<float>(bv), FormatError);
}

TEST(Checkpoint, ResumeMatchesUninterruptedRun) {
  const auto ds = small_dataset();
  const auto cfg = small_config();
  const auto full = run_training<float>(cfg, ds);
  for (int stop : {4, 6, 11}) {
    auto st = init_state<float>(cfg, ds);
    for (int i = 0; i < stop; ++i) advance(st, cfg, ds);
    std::istringstream is(checkpoint_bytes(st));
    auto resumed = run_training<float>(cfg, ds, {}, read_checkpoint<float>(is));
    EXPECT_EQ(checkpoint_bytes(resumed), checkpoint_bytes(full)) << "stopped after " << stop;
  }
}

TEST(Checkpoint, IncompatibleResumeIsRejected) {
  const auto ds = small_dataset();
  auto cfg = small_config();
  auto st = init_state<float>(cfg, ds);
  cfg.embed_dim = 4;
  EXPECT_THROW(run_training<float>(cfg, ds, {}, std::move(st)), StructuralError);
}

TEST(Hooks, FireOnEpochsAndMilestones) {
  const auto ds = small_dataset();
  auto cfg = small_config();
  cfg.epochs = 4;
  cfg.lr_milestones = {2, 3};
  std::vector<std::uint32_t> epochs, milestones;
  TrainingHooks hooks;
  hooks.on_epoch = [&](const EpochLog& l) { epochs.push_back(l.epoch); };
  hooks.on_milestone = [&](std::uint32_t e) { milestones.push_back(e); };
  run_training<float>(cfg, ds, hooks);
  EXPECT_EQ(epochs, (std::vector<std::uint32_t>{1, 2, 3, 4}));
  EXPECT_EQ(milestones, (std::vector<std::uint32_t>{2, 3}));
}
