#pragma once

// Split-batch training loop. Each mini-batch of B shuffled samples is cut in
// two disjoint halves: the clean half (horizontal flip only) trains the
// backbone and prototypes through the margin loss and feeds the variance
// tracker; the augmented half produces CR pseudo-labels and trains the
// regression head through the class-weighted Smooth L1 loss.

#include <cmath>
#include <cstdint>
#include <fstream>
#include <functional>
#include <numeric>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "igfiqa/backbone.hpp"
#include "igfiqa/common.hpp"
#include "igfiqa/evalkit.hpp"
#include "igfiqa/igtracker.hpp"
#include "igfiqa/marginhead.hpp"
#include "igfiqa/qualityhead.hpp"
#include "igfiqa/synthdata.hpp"

namespace igfiqa {

enum class TrackerSource : std::uint8_t { kClean = 0, kAugmented = 1, kBoth = 2 };
enum class Reduction : std::uint8_t { kSum = 0, kMean = 1 };
enum class Variant : std::uint8_t { kIg, kCr, kIgNoAug, kCrAug };

struct TrainConfig {
  std::uint32_t batch_size = 64;
  double lambda = 10.0;
  double lr = 0.1;
  // Epoch indices at which the learning rate is divided by lr_divisor.
  // Empty means 60% and 80% of `epochs`.
  std::vector<std::uint32_t> lr_milestones;
  double lr_divisor = 10.0;
  double momentum = 0.9;
  double weight_decay = 5e-4;
  std::uint32_t epochs = 30;
  double augment_p = 0.3;
  std::uint64_t seed = 1;
  bool propagate_lig_to_backbone = false;
  TrackerSource tracker_source = TrackerSource::kClean;
  double beta = 1.0;
  double s = 64.0;
  double m = 0.5;
  std::uint32_t hidden_dim = 128;
  std::uint32_t embed_dim = 64;
  AlphaSchedule alpha_schedule = AlphaSchedule::kLinear;
  double alpha_start = 0.9;
  double alpha_end = 1.0;
  // Off: every class weight is 1 (plain CR pseudo-label regression).
  bool use_ig_weights = true;
  // Off: both halves are augmented and both feed the margin loss.
  bool split_batch = true;
  Reduction lig_reduction = Reduction::kSum;
  bool head_bias = false;

  std::vector<std::uint32_t> resolved_milestones() const {
    if (!lr_milestones.empty()) return lr_milestones;
    std::vector<std::uint32_t> out;
    for (double f : {0.6, 0.8}) {
      const auto e = static_cast<std::uint32_t>(std::lround(f * epochs));
      if (e > 0 && e < epochs && (out.empty() || e > out.back())) out.push_back(e);
    }
    return out;
  }

  double lr_at(std::uint32_t epoch) const {
    double rate = lr;
    for (auto ms : resolved_milestones())
      if (epoch >= ms) rate /= lr_divisor;
    return rate;
  }

  void validate() const {
    if (batch_size < 2 || batch_size % 2 != 0) throw ConfigError("batch_size must be even and >= 2");
    if (!(lambda >= 0.0)) throw ConfigError("lambda must be >= 0");
    if (!(lr > 0.0)) throw ConfigError("lr must be > 0");
    if (!(lr_divisor > 0.0)) throw ConfigError("lr_divisor must be > 0");
    for (std::size_t i = 0; i < lr_milestones.size(); ++i) {
      if (lr_milestones[i] >= epochs) throw ConfigError("lr_milestones must be < epochs");
      if (i > 0 && lr_milestones[i] <= lr_milestones[i - 1]) throw ConfigError("lr_milestones must be strictly increasing");
    }
    if (!(momentum >= 0.0 && momentum < 1.0)) throw ConfigError("momentum must lie in [0, 1)");
    if (!(weight_decay >= 0.0)) throw ConfigError("weight_decay must be >= 0");
    if (!(augment_p >= 0.0 && augment_p <= 1.0)) throw ConfigError("augment_p must lie in [0, 1]");
    if (!(beta > 0.0)) throw ConfigError("beta must be > 0");
    if (!(s > 0.0)) throw ConfigError("s must be > 0");
    if (!(m >= 0.0 && m < 1.5707963267948966)) throw ConfigError("m must lie in [0, pi/2)");
    if (hidden_dim == 0 || embed_dim == 0) throw ConfigError("hidden_dim and embed_dim must be positive");
    if (!(alpha_start >= 0.0 && alpha_start <= 1.0 && alpha_end >= 0.0 && alpha_end <= 1.0))
      throw ConfigError("alpha_start/alpha_end must lie in [0, 1]");
  }
};

inline Variant parse_variant(const std::string& name) {
  if (name == "ig") return Variant::kIg;
  if (name == "cr") return Variant::kCr;
  if (name == "ig-noaug") return Variant::kIgNoAug;
  if (name == "cr-aug") return Variant::kCrAug;
  throw ConfigError("unknown variant '" + name + "' (expected ig, cr, ig-noaug, cr-aug)");
}

inline const char* variant_name(Variant v) {
  switch (v) {
    case Variant::kIg: return "ig";
    case Variant::kCr: return "cr";
    case Variant::kIgNoAug: return "ig-noaug";
    case Variant::kCrAug: return "cr-aug";
  }
  return "?";
}

inline TrainConfig apply_variant(TrainConfig cfg, Variant v) {
  switch (v) {
    case Variant::kIg:
      cfg.use_ig_weights = true;
      cfg.split_batch = true;
      break;
    case Variant::kCr:
      cfg.use_ig_weights = false;
      cfg.split_batch = true;
      cfg.augment_p = 0.0;
      break;
    case Variant::kIgNoAug:
      cfg.use_ig_weights = true;
      cfg.split_batch = true;
      cfg.augment_p = 0.0;
      break;
    case Variant::kCrAug:
      cfg.use_ig_weights = false;
      cfg.split_batch = false;
      break;
  }
  return cfg;
}

struct EpochLog {
  std::uint32_t epoch = 0;  // 1-based
  double lr = 0.0;
  double l_arc = 0.0;  // mean over steps
  double l_ig = 0.0;   // mean over steps of the unreduced weighted sum
  double ccs_dist = 0.0;
  double pearson_var_v = std::numeric_limits<double>::quiet_NaN();
  double frac_zero_weight = 0.0;
  std::array<std::uint32_t, 10> weight_histogram{};
};

inline void write_report_csv(std::span<const EpochLog> logs, std::ostream& os) {
  os << "epoch,l_arc,l_ig,ccs_dist,pearson_var_v,frac_zero_weight\n";
  os.precision(10);
  for (const auto& l : logs)
    os << l.epoch << ',' << l.l_arc << ',' << l.l_ig << ',' << l.ccs_dist << ',' << l.pearson_var_v << ','
       << l.frac_zero_weight << '\n';
}

template <typename T>
struct TrainState {
  MlpBackbone<T> backbone;
  PrototypeBank<T> bank;
  RegressionHead<T> head;
  VarianceTracker<T> tracker;
  // One buffer per parameter tensor, in parameters() order.
  std::vector<std::vector<T>> momentum;

  std::uint32_t epoch = 0;          // completed epochs
  std::uint64_t step_in_epoch = 0;  // steps done in the current epoch
  std::uint64_t global_step = 0;
  double epoch_l_arc_sum = 0.0;
  double epoch_l_ig_sum = 0.0;
  std::vector<double> ccs_snapshot;  // CCS of every dataset sample at the last epoch boundary
  std::vector<EpochLog> logs;

  // Canonical order: backbone (w1, b1, w2, b2), prototypes, head (w[, b]).
  std::vector<std::span<T>> parameters() {
    auto p = backbone.parameters();
    for (auto s : bank.parameters()) p.push_back(s);
    for (auto s : head.parameters()) p.push_back(s);
    return p;
  }
  std::vector<std::span<const T>> parameters() const {
    auto p = backbone.parameters();
    for (auto s : bank.parameters()) p.push_back(s);
    for (auto s : head.parameters()) p.push_back(s);
    return p;
  }
  std::vector<std::string> parameter_names() const {
    auto n = MlpBackbone<T>::parameter_names();
    for (auto& s : PrototypeBank<T>::parameter_names()) n.push_back(s);
    for (auto& s : head.parameter_names()) n.push_back(s);
    return n;
  }
};

inline std::uint64_t steps_per_epoch(std::size_t dataset_size, std::uint32_t batch_size) {
  return dataset_size / batch_size;
}

/// buffer <- momentum * buffer + grad + wd * param; param <- param - lr * buffer.
template <typename T>
void sgd_update(std::span<T> param, std::span<const T> grad, std::span<T> buffer, double lr, double momentum,
                double weight_decay) {
  if (param.size() != grad.size() || param.size() != buffer.size()) throw StructuralError("sgd_update: shape mismatch");
  for (std::size_t i = 0; i < param.size(); ++i) {
    const double b = momentum * static_cast<double>(buffer[i]) + static_cast<double>(grad[i]) +
                     weight_decay * static_cast<double>(param[i]);
    buffer[i] = static_cast<T>(b);
    param[i] = static_cast<T>(static_cast<double>(param[i]) - lr * static_cast<double>(buffer[i]));
  }
}

template <typename T>
std::vector<double> dataset_ccs(const TrainState<T>& state, const Mat<T>& emb, std::span<const std::uint32_t> labels) {
  const Mat<T> cos = cosines(state.bank, emb);
  std::vector<double> out(labels.size());
  for (std::size_t i = 0; i < labels.size(); ++i) out[i] = static_cast<double>(cos(static_cast<Eigen::Index>(i), labels[i]));
  return out;
}

template <typename T>
TrainState<T> init_state(const TrainConfig& cfg, const IdentityDataset& ds) {
  cfg.validate();
  ds.validate();
  TrainState<T> st;
  const std::size_t input = static_cast<std::size_t>(ds.image_side) * ds.image_side;
  st.backbone = MlpBackbone<T>::init(input, cfg.hidden_dim, cfg.embed_dim, cfg.seed);
  st.bank = PrototypeBank<T>::init(cfg.embed_dim, ds.num_classes, cfg.seed, cfg.s, cfg.m);
  st.head = RegressionHead<T>(cfg.embed_dim, cfg.head_bias, cfg.beta);
  const std::uint64_t total = static_cast<std::uint64_t>(cfg.epochs) * steps_per_epoch(ds.size(), cfg.batch_size);
  st.tracker = cfg.alpha_schedule == AlphaSchedule::kFixed
                   ? VarianceTracker<T>::fixed(ds.num_classes, total, cfg.alpha_start)
                   : VarianceTracker<T>(ds.num_classes, total, cfg.alpha_start, cfg.alpha_end);
  for (auto p : st.parameters()) st.momentum.emplace_back(p.size(), T(0));
  if (ds.size() > 0) {
    const Mat<T> emb = embed_dataset(st.backbone, std::span<const Image>(ds.images));
    st.ccs_snapshot = dataset_ccs(st, emb, ds.labels);
  }
  return st;
}

struct StepBatch {
  std::vector<Image> clean;
  std::vector<std::uint32_t> clean_labels;
  std::vector<Image> aug;
  std::vector<std::uint32_t> aug_labels;
  std::vector<std::uint32_t> clean_index;
  std::vector<std::uint32_t> aug_index;
};

inline std::vector<std::uint32_t> epoch_permutation(std::uint64_t seed, std::uint32_t epoch, std::size_t n) {
  std::vector<std::uint32_t> perm(n);
  std::iota(perm.begin(), perm.end(), 0u);
  auto rng = make_rng(seed, {id(Stream::kShuffle), epoch});
  shuffle(perm.begin(), perm.end(), rng);
  return perm;
}

/// The first B/2 entries of the step's slice form the clean half, the next
/// B/2 the augmented half. Each image has its own RNG stream.
inline StepBatch make_step_batch(const IdentityDataset& ds, const TrainConfig& cfg, std::span<const std::uint32_t> perm,
                                 std::uint32_t epoch, std::uint64_t step) {
  const std::size_t half = cfg.batch_size / 2;
  const std::size_t start = static_cast<std::size_t>(step) * cfg.batch_size;
  if (start + cfg.batch_size > perm.size()) throw StructuralError("step beyond the end of the epoch");
  StepBatch b;
  for (std::size_t j = 0; j < half; ++j) {
    const auto idx = perm[start + j];
    auto rng = make_rng(cfg.seed, {id(Stream::kCleanAug), epoch, step, j});
    Image img = ds.images[idx];
    if (!cfg.split_batch) img = augment(img, rng, cfg.augment_p);
    b.clean.push_back(hflip(img, rng));
    b.clean_labels.push_back(ds.labels[idx]);
    b.clean_index.push_back(idx);
  }
  for (std::size_t j = 0; j < half; ++j) {
    const auto idx = perm[start + half + j];
    auto rng = make_rng(cfg.seed, {id(Stream::kRegAug), epoch, step, j});
    b.aug.push_back(hflip(augment(ds.images[idx], rng, cfg.augment_p), rng));
    b.aug_labels.push_back(ds.labels[idx]);
    b.aug_index.push_back(idx);
  }
  return b;
}

template <typename T>
struct StepEval {
  double l_arc = 0.0;
  double l_ig = 0.0;        // unreduced weighted sum
  double objective = 0.0;   // l_arc + lambda * reduced l_ig
  std::vector<std::vector<T>> grads;  // canonical parameter order
  std::vector<double> cr_targets;
  std::vector<double> sample_weights;
  CrBatch clean_cr;
  CrBatch aug_cr;
};

/// Loss terms and gradients for one step. `weights_fn(clean_cr, aug_cr)` is
/// called once the pseudo-labels exist and must return one weight per class;
/// the trainer uses it to update the tracker before reading its weights.
/// `frozen_targets` replaces the CR targets (used by gradient checks, which
/// must hold the stop-gradient labels fixed).
template <typename T, typename WeightsFn>
StepEval<T> evaluate_step(const TrainState<T>& st, const TrainConfig& cfg, const StepBatch& batch,
                          WeightsFn&& weights_fn, const std::vector<double>* frozen_targets = nullptr) {
  StepEval<T> ev;
  const auto& model = st.backbone;
  const std::size_t nc = batch.clean.size(), na = batch.aug.size();

  ForwardCache<T> clean_cache, aug_cache, joint_cache;
  ArcFaceResult<T> arc;
  Mat<T> aug_emb;
  if (cfg.split_batch) {
    clean_cache = forward(model, std::span<const Image>(batch.clean));
    arc = arcface_loss(st.bank, clean_cache.embeddings, batch.clean_labels);
    aug_cache = forward(model, std::span<const Image>(batch.aug));
    aug_emb = aug_cache.embeddings;
  } else {
    std::vector<Image> all = batch.clean;
    all.insert(all.end(), batch.aug.begin(), batch.aug.end());
    std::vector<std::uint32_t> labels = batch.clean_labels;
    labels.insert(labels.end(), batch.aug_labels.begin(), batch.aug_labels.end());
    joint_cache = forward(model, std::span<const Image>(all));
    arc = arcface_loss(st.bank, joint_cache.embeddings, labels);
    aug_emb = joint_cache.embeddings.bottomRows(static_cast<Eigen::Index>(na));
  }
  ev.l_arc = arc.loss;
  if (cfg.split_batch) {
    ev.clean_cr = arc.cr;
  } else {
    ev.clean_cr.ccs.assign(arc.cr.ccs.begin(), arc.cr.ccs.begin() + static_cast<std::ptrdiff_t>(nc));
    ev.clean_cr.nnccs.assign(arc.cr.nnccs.begin(), arc.cr.nnccs.begin() + static_cast<std::ptrdiff_t>(nc));
    ev.clean_cr.cr.assign(arc.cr.cr.begin(), arc.cr.cr.begin() + static_cast<std::ptrdiff_t>(nc));
  }
  ev.aug_cr = cr_batch(cosines(st.bank, aug_emb), batch.aug_labels);
  ev.cr_targets = frozen_targets ? *frozen_targets : ev.aug_cr.cr;

  const std::vector<T> class_w = weights_fn(ev.clean_cr, ev.aug_cr);
  ev.sample_weights.resize(na);
  for (std::size_t i = 0; i < na; ++i) ev.sample_weights[i] = static_cast<double>(class_w.at(batch.aug_labels[i]));

  const auto reg = weighted_regression_loss(st.head, aug_emb, ev.cr_targets, ev.sample_weights);
  ev.l_ig = reg.loss;
  const double reduce = cfg.lig_reduction == Reduction::kMean ? 1.0 / static_cast<double>(na) : 1.0;
  const double reg_scale = cfg.lambda * reduce;
  ev.objective = ev.l_arc + reg_scale * ev.l_ig;

  GradBuffer<T> gb;
  const bool reg_into_backbone = cfg.propagate_lig_to_backbone && reg_scale != 0.0;
  const Mat<T> g_reg = static_cast<T>(reg_scale) * reg.grad_emb;
  if (cfg.split_batch) {
    gb = backward(model, clean_cache, arc.grad_emb);
    if (reg_into_backbone) gb += backward(model, aug_cache, g_reg);
  } else {
    Mat<T> g = arc.grad_emb;
    if (reg_into_backbone) g.bottomRows(static_cast<Eigen::Index>(na)) += g_reg;
    gb = backward(model, joint_cache, g);
  }
  for (auto s : gb.parameters()) ev.grads.emplace_back(s.begin(), s.end());
  ev.grads.emplace_back(flat(arc.grad_w).begin(), flat(arc.grad_w).end());
  {
    Vec<T> gw = static_cast<T>(reg_scale) * reg.grad_weight;
    ev.grads.emplace_back(gw.data(), gw.data() + gw.size());
    if (st.head.has_bias()) ev.grads.push_back({static_cast<T>(reg_scale * static_cast<double>(reg.grad_bias(0)))});
  }
  return ev;
}

/// FIQ scores: the regression head applied to the embeddings.
template <typename T>
std::vector<double> quality_scores(const TrainState<T>& st, std::span<const Image> images, std::size_t chunk = 512) {
  std::vector<double> out;
  out.reserve(images.size());
  for (std::size_t start = 0; start < images.size(); start += chunk) {
    const auto part = images.subspan(start, std::min(chunk, images.size() - start));
    const Vec<T> q = predict(st.head, embed_dataset(st.backbone, part));
    for (Eigen::Index i = 0; i < q.size(); ++i) out.push_back(static_cast<double>(q(i)));
  }
  return out;
}

struct StepResult {
  double l_arc = 0.0;
  double l_ig = 0.0;
  double objective = 0.0;
  std::vector<double> cr_targets;
  std::vector<double> sample_weights;
};

/// One optimization step on an already-built batch. `weight_override`, when
/// set, replaces the per-class weights (the tracker is still updated).
template <typename T>
StepResult train_step(TrainState<T>& st, const TrainConfig& cfg, const StepBatch& batch, double lr,
                      const std::vector<T>* weight_override = nullptr) {
  auto weights_fn = [&](const CrBatch& clean_cr, const CrBatch& aug_cr) {
    switch (cfg.tracker_source) {
      case TrackerSource::kClean:
        st.tracker.update(batch.clean_labels, clean_cr.ccs);
        break;
      case TrackerSource::kAugmented:
        st.tracker.update(batch.aug_labels, aug_cr.ccs);
        break;
      case TrackerSource::kBoth: {
        std::vector<std::uint32_t> labels = batch.clean_labels;
        labels.insert(labels.end(), batch.aug_labels.begin(), batch.aug_labels.end());
        std::vector<double> ccs = clean_cr.ccs;
        ccs.insert(ccs.end(), aug_cr.ccs.begin(), aug_cr.ccs.end());
        st.tracker.update(labels, ccs);
        break;
      }
    }
    if (weight_override) return *weight_override;
    if (!cfg.use_ig_weights) return std::vector<T>(st.tracker.num_classes(), T(1));
    return st.tracker.weights().w;
  };
  const VarianceTracker<T> tracker_before = st.tracker;
  StepEval<T> ev = evaluate_step(st, cfg, batch, weights_fn);
  if (!std::isfinite(ev.l_arc) || !std::isfinite(ev.l_ig)) {
    st.tracker = tracker_before;
    std::ostringstream msg;
    msg << "non-finite loss at epoch " << st.epoch << " step " << st.step_in_epoch << " (global " << st.global_step
        << "): l_arc=" << ev.l_arc << " l_ig=" << ev.l_ig << " lr=" << lr;
    throw NumericError(msg.str());
  }
  auto params = st.parameters();
  for (std::size_t k = 0; k < params.size(); ++k)
    sgd_update<T>(params[k], ev.grads[k], st.momentum[k], lr, cfg.momentum, cfg.weight_decay);
  st.backbone.touch();
  return {ev.l_arc, ev.l_ig, ev.objective, std::move(ev.cr_targets), std::move(ev.sample_weights)};
}

template <typename T>
EpochLog close_epoch(TrainState<T>& st, const TrainConfig& cfg, const IdentityDataset& ds, std::uint64_t steps) {
  EpochLog log;
  log.epoch = st.epoch + 1;
  log.lr = cfg.lr_at(st.epoch);
  log.l_arc = steps ? st.epoch_l_arc_sum / static_cast<double>(steps) : 0.0;
  log.l_ig = steps ? st.epoch_l_ig_sum / static_cast<double>(steps) : 0.0;
  const Mat<T> emb = embed_dataset(st.backbone, std::span<const Image>(ds.images));
  std::vector<double> ccs = dataset_ccs(st, emb, ds.labels);
  log.ccs_dist = ccs_dist(st.ccs_snapshot, ccs);
  st.ccs_snapshot = std::move(ccs);
  const auto var = oracle_variance_from_embeddings(emb, ds.labels, ds.num_classes);
  std::vector<double> v(st.tracker.v().begin(), st.tracker.v().end());
  try {
    log.pearson_var_v = pearson(v, var);
  } catch (const DomainError&) {
    log.pearson_var_v = std::numeric_limits<double>::quiet_NaN();
  }
  const auto w = st.tracker.weights();
  log.frac_zero_weight = w.zero_fraction();
  for (auto x : w.w) {
    const auto bin = std::min<std::size_t>(9, static_cast<std::size_t>(static_cast<double>(x) * 10.0));
    ++log.weight_histogram[bin];
  }
  st.epoch += 1;
  st.step_in_epoch = 0;
  st.epoch_l_arc_sum = 0.0;
  st.epoch_l_ig_sum = 0.0;
  st.logs.push_back(log);
  return log;
}

/// Advances the state by one step of the run; closes the epoch when its last
/// step completes. Returns false once all epochs are done.
template <typename T>
bool advance(TrainState<T>& st, const TrainConfig& cfg, const IdentityDataset& ds) {
  if (st.epoch >= cfg.epochs) return false;
  const auto per_epoch = steps_per_epoch(ds.size(), cfg.batch_size);
  if (per_epoch == 0) throw ConfigError("dataset smaller than one batch");
  const auto perm = epoch_permutation(cfg.seed, st.epoch, ds.size());
  const auto batch = make_step_batch(ds, cfg, perm, st.epoch, st.step_in_epoch);
  const auto r = train_step(st, cfg, batch, cfg.lr_at(st.epoch));
  st.epoch_l_arc_sum += r.l_arc;
  st.epoch_l_ig_sum += r.l_ig;
  ++st.step_in_epoch;
  ++st.global_step;
  if (st.step_in_epoch == per_epoch) close_epoch(st, cfg, ds, per_epoch);
  return true;
}

// ---------------------------------------------------------------------------
// Checkpoints: "IGFQCKPT", u32 version, u32 dims (input, hidden, embed,
// classes, head_bias), f64 s, m, beta, then f32 parameter arrays in canonical
// order, f32 momentum buffers in the same order, tracker state, counters and
// the CCS snapshot.

inline constexpr std::string_view kCheckpointMagic = "IGFQCKPT";
inline constexpr std::uint32_t kCheckpointVersion = 1;

template <typename T>
void write_checkpoint(const TrainState<T>& st, std::ostream& os) {
  bin::Writer w(os);
  w.bytes(kCheckpointMagic);
  w.u32(kCheckpointVersion);
  w.u32(static_cast<std::uint32_t>(st.backbone.input_dim()));
  w.u32(static_cast<std::uint32_t>(st.backbone.hidden_dim()));
  w.u32(static_cast<std::uint32_t>(st.backbone.embed_dim()));
  w.u32(static_cast<std::uint32_t>(st.bank.num_classes()));
  w.u32(st.head.has_bias() ? 1u : 0u);
  w.put(st.bank.scale);
  w.put(st.bank.margin);
  w.put(st.head.beta);
  for (auto p : st.parameters())
    for (T x : p) w.f32(static_cast<float>(x));
  for (const auto& b : st.momentum)
    for (T x : b) w.f32(static_cast<float>(x));
  w.u8(static_cast<std::uint8_t>(st.tracker.schedule()));
  w.put(st.tracker.alpha_start());
  w.put(st.tracker.alpha_end());
  w.u64(st.tracker.step());
  w.u64(st.tracker.total_steps());
  for (T x : st.tracker.v()) w.f32(static_cast<float>(x));
  w.u32(st.epoch);
  w.u64(st.step_in_epoch);
  w.u64(st.global_step);
  w.put(st.epoch_l_arc_sum);
  w.put(st.epoch_l_ig_sum);
  w.u64(st.ccs_snapshot.size());
  for (double c : st.ccs_snapshot) w.put(c);
}

template <typename T>
TrainState<T> read_checkpoint(std::istream& is) {
  bin::Reader r(is);
  r.expect_magic(kCheckpointMagic);
  const auto version_at = r.offset();
  if (r.u32("version") != kCheckpointVersion) throw FormatError("unsupported checkpoint version", version_at);
  const auto dims_at = r.offset();
  const auto input = r.u32("input_dim"), hidden = r.u32("hidden_dim"), embed_dim = r.u32("embed_dim"),
             classes = r.u32("num_classes"), bias = r.u32("head_bias");
  if (input == 0 || hidden == 0 || embed_dim == 0 || classes == 0 || bias > 1)
    throw FormatError("invalid checkpoint dimensions", dims_at);
  // Guard against absurd allocations from a corrupt header.
  if (static_cast<std::uint64_t>(input) * hidden > (1ULL << 32) || static_cast<std::uint64_t>(embed_dim) * classes > (1ULL << 32))
    throw FormatError("checkpoint dimensions too large", dims_at);

  TrainState<T> st;
  const double scale = r.get<double>("scale"), margin = r.get<double>("margin"), beta = r.get<double>("beta");
  try {
    st.backbone = MlpBackbone<T>(input, hidden, embed_dim);
    st.bank = PrototypeBank<T>(embed_dim, classes, scale, margin);
    st.head = RegressionHead<T>(embed_dim, bias == 1, beta);
  } catch (const Error& e) {
    throw FormatError(std::string("invalid checkpoint hyperparameters: ") + e.what(), dims_at);
  }
  for (auto p : st.parameters())
    for (T& x : p) x = static_cast<T>(r.f32("parameter"));
  for (auto p : st.parameters()) {
    std::vector<T> b(p.size());
    for (T& x : b) x = static_cast<T>(r.f32("momentum buffer"));
    st.momentum.push_back(std::move(b));
  }
  const auto sched_at = r.offset();
  const auto sched = r.u8("alpha schedule");
  if (sched > 1) throw FormatError("unknown alpha schedule", sched_at);
  const double a0 = r.get<double>("alpha_start"), a1 = r.get<double>("alpha_end");
  const auto tstep_at = r.offset();
  const auto tstep = r.u64("tracker step"), ttotal = r.u64("tracker total_steps");
  std::vector<T> v(classes);
  for (T& x : v) x = static_cast<T>(r.f32("tracker v"));
  try {
    st.tracker.restore(std::move(v), tstep, ttotal, a0, a1, static_cast<AlphaSchedule>(sched));
  } catch (const Error& e) {
    throw FormatError(e.what(), tstep_at);
  }
  st.epoch = r.u32("epoch");
  st.step_in_epoch = r.u64("step_in_epoch");
  st.global_step = r.u64("global_step");
  st.epoch_l_arc_sum = r.get<double>("epoch_l_arc_sum");
  st.epoch_l_ig_sum = r.get<double>("epoch_l_ig_sum");
  const auto snap_at = r.offset();
  const auto snap = r.u64("snapshot length");
  if (snap > (1ULL << 32)) throw FormatError("snapshot length too large", snap_at);
  st.ccs_snapshot.resize(snap);
  for (double& c : st.ccs_snapshot) c = r.get<double>("ccs snapshot");
  r.expect_eof();
  return st;
}

template <typename T>
void checkpoint_save(const TrainState<T>& st, const std::string& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw Error("cannot open " + path + " for writing");
  write_checkpoint(st, os);
  if (!os) throw Error("write failed: " + path);
}

template <typename T>
TrainState<T> checkpoint_load(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError("cannot open checkpoint " + path, 0);
  return read_checkpoint<T>(is);
}

/// Checks that a loaded state can drive training on `ds` with `cfg`.
template <typename T>
void check_compatible(const TrainState<T>& st, const TrainConfig& cfg, const IdentityDataset& ds) {
  if (st.backbone.input_dim() != static_cast<std::size_t>(ds.image_side) * ds.image_side)
    throw StructuralError("checkpoint input size does not match dataset images");
  if (st.bank.num_classes() != ds.num_classes) throw StructuralError("checkpoint class count does not match dataset");
  if (st.backbone.hidden_dim() != cfg.hidden_dim || st.backbone.embed_dim() != cfg.embed_dim)
    throw StructuralError("checkpoint dimensions do not match the training config");
  if (st.ccs_snapshot.size() != ds.size()) throw StructuralError("checkpoint snapshot does not match dataset size");
}

struct TrainingHooks {
  // Called with the completed epoch at each learning-rate milestone.
  std::function<void(std::uint32_t)> on_milestone;
  std::function<void(const EpochLog&)> on_epoch;
};

/// `live`, when given, is pointed at the running state so hooks can read it.
template <typename T>
TrainState<T> run_training(const TrainConfig& cfg, const IdentityDataset& ds, const TrainingHooks& hooks = {},
                           std::optional<TrainState<T>> resume = std::nullopt, TrainState<T>** live = nullptr) {
  TrainState<T> st = resume ? std::move(*resume) : init_state<T>(cfg, ds);
  if (resume) check_compatible(st, cfg, ds);
  if (live) *live = &st;
  const auto milestones = cfg.resolved_milestones();
  while (st.epoch < cfg.epochs) {
    const auto before = st.epoch;
    advance(st, cfg, ds);
    if (st.epoch != before) {
      if (hooks.on_epoch) hooks.on_epoch(st.logs.back());
      if (hooks.on_milestone && std::find(milestones.begin(), milestones.end(), st.epoch) != milestones.end())
        hooks.on_milestone(st.epoch);
    }
  }
  return st;
}

}  // namespace igfiqa
