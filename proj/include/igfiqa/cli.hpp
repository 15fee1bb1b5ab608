#pragma once

// Command implementations behind the `igfiqa` executable. Every command is a
// function of a resolved JSON argument object; the same object is stored in
// the run manifest, so `replay` can re-execute a run from its manifest alone.

#include <openssl/evp.h>

#include <chrono>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <iostream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "igfiqa/config.hpp"
#include "igfiqa/evalkit.hpp"
#include "igfiqa/gradcheck.hpp"
#include "igfiqa/trainer.hpp"

namespace igfiqa::cli {

namespace fs = std::filesystem;
using json = nlohmann::json;

inline constexpr const char* kToolVersion = "igfiqa 0.1.0";
inline constexpr const char* kManifestName = "manifest.json";

inline std::string sha256_file(const fs::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError("cannot open " + path.string() + " for hashing", 0);
  EVP_MD_CTX* ctx = EVP_MD_CTX_new();
  EVP_DigestInit_ex(ctx, EVP_sha256(), nullptr);
  std::vector<char> buf(1 << 16);
  while (is) {
    is.read(buf.data(), static_cast<std::streamsize>(buf.size()));
    if (is.gcount() > 0) EVP_DigestUpdate(ctx, buf.data(), static_cast<std::size_t>(is.gcount()));
  }
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  EVP_DigestFinal_ex(ctx, md, &len);
  EVP_MD_CTX_free(ctx);
  std::ostringstream os;
  for (unsigned int i = 0; i < len; ++i) os << std::hex << std::setw(2) << std::setfill('0') << static_cast<int>(md[i]);
  return os.str();
}

/// Collects what a command read and wrote.
struct RunContext {
  fs::path out_dir;
  std::vector<fs::path> inputs;
  std::vector<std::string> outputs;  // relative to out_dir
  json metrics = json::object();
  std::ostream* log = &std::cerr;

  fs::path output(const std::string& name) {
    outputs.push_back(name);
    return out_dir / name;
  }
  fs::path input(const std::string& path) {
    inputs.emplace_back(path);
    return path;
  }
};

inline std::ofstream open_out(const fs::path& p) {
  std::ofstream os(p, std::ios::binary);
  if (!os) throw Error("cannot open " + p.string() + " for writing");
  return os;
}

inline KeyValues kv_from_json(const json& obj, const std::string& source) {
  KeyValues kv = KeyValues::parse_string("", source);
  for (auto it = obj.begin(); it != obj.end(); ++it) kv.set(it.key(), it.value().get<std::string>());
  return kv;
}

inline json json_from_kv(const std::map<std::string, std::string>& m) {
  json j = json::object();
  for (const auto& [k, v] : m) j[k] = v;
  return j;
}

inline void write_double(std::ostream& os, double v) {
  std::ostringstream s;
  s << std::setprecision(17) << v;
  os << s.str();
}

// ---------------------------------------------------------------------------
// Score files

inline void write_scores_csv(std::span<const double> scores, std::ostream& os) {
  os << "sample_id,score\n";
  for (std::size_t i = 0; i < scores.size(); ++i) {
    os << i << ',';
    write_double(os, scores[i]);
    os << '\n';
  }
}

inline std::vector<double> read_scores_csv(const fs::path& path, std::size_t expected) {
  std::ifstream is(path);
  if (!is) throw FormatError("cannot open scores file " + path.string(), 0);
  std::string line;
  if (!std::getline(is, line) || line != "sample_id,score")
    throw FormatError(path.string() + ": expected header 'sample_id,score'", 0);
  std::vector<double> out;
  std::uint64_t offset = line.size() + 1;
  while (std::getline(is, line)) {
    const auto comma = line.find(',');
    std::size_t id = 0, pos = 0;
    double v = 0.0;
    try {
      if (comma == std::string::npos) throw std::invalid_argument("comma");
      id = std::stoul(line.substr(0, comma));
      const std::string rest = line.substr(comma + 1);
      v = std::stod(rest, &pos);
      if (pos != rest.size()) throw std::invalid_argument("trailing");
    } catch (const std::exception&) {
      throw FormatError(path.string() + ": malformed row '" + line + "'", offset);
    }
    if (id != out.size()) throw FormatError(path.string() + ": sample ids must be 0..n-1 in order", offset);
    if (!std::isfinite(v)) throw FormatError(path.string() + ": non-finite score for sample " + std::to_string(id), offset);
    out.push_back(v);
    offset += line.size() + 1;
  }
  if (out.size() != expected)
    throw StructuralError(path.string() + ": " + std::to_string(out.size()) + " scores for a dataset of " +
                          std::to_string(expected) + " samples");
  return out;
}

// ---------------------------------------------------------------------------
// Commands

inline void cmd_synth(const json& args, RunContext& ctx) {
  const SynthConfig cfg = synth_config_from(kv_from_json(args.at("config"), "synth config"));
  const auto ds = gen_dataset(cfg);
  save_dataset(ds, ctx.output("dataset.bin"));
  ctx.metrics["samples"] = ds.size();
  *ctx.log << "synth: " << ds.size() << " samples, " << ds.num_classes << " classes\n";
}

inline void cmd_train(const json& args, RunContext& ctx) {
  const TrainConfig base = train_config_from(kv_from_json(args.at("config"), "train config"));
  const Variant variant = parse_variant(args.at("variant").get<std::string>());
  const TrainConfig cfg = apply_variant(base, variant);
  cfg.validate();
  const auto ds = load_dataset(ctx.input(args.at("data").get<std::string>()));
  std::optional<TrainState<float>> resume;
  if (args.contains("resume") && !args.at("resume").is_null())
    resume = checkpoint_load<float>(ctx.input(args.at("resume").get<std::string>()));
  if (steps_per_epoch(ds.size(), cfg.batch_size) == 0 && cfg.epochs > 0)
    throw ConfigError("dataset of " + std::to_string(ds.size()) + " samples is smaller than one batch");

  TrainingHooks hooks;
  hooks.on_epoch = [&](const EpochLog& l) {
    *ctx.log << "epoch " << l.epoch << " lr=" << l.lr << " l_arc=" << l.l_arc << " l_ig=" << l.l_ig
             << " ccs_dist=" << l.ccs_dist << " pearson(var,v)=" << l.pearson_var_v
             << " zero_w=" << l.frac_zero_weight << '\n';
  };
  TrainState<float>* live = nullptr;
  hooks.on_milestone = [&](std::uint32_t epoch) {
    if (live) checkpoint_save(*live, ctx.output("model_epoch" + std::to_string(epoch) + ".ckpt"));
  };
  auto st = run_training<float>(cfg, ds, hooks, std::move(resume), &live);
  checkpoint_save(st, ctx.output("model.ckpt"));
  {
    auto os = open_out(ctx.output("report.csv"));
    write_report_csv(st.logs, os);
  }
  {
    auto os = open_out(ctx.output("tracker.csv"));
    st.tracker.write_csv(os);
  }
  ctx.metrics["epochs"] = st.epoch;
  ctx.metrics["global_step"] = st.global_step;
  ctx.metrics["zero_weight_fraction"] = st.tracker.weights().zero_fraction();
  ctx.metrics["effective_config"] = json_from_kv(to_key_values(cfg));
}

inline void cmd_score(const json& args, RunContext& ctx) {
  const auto st = checkpoint_load<float>(ctx.input(args.at("model").get<std::string>()));
  const auto ds = load_dataset(ctx.input(args.at("data").get<std::string>()));
  if (st.backbone.input_dim() != static_cast<std::size_t>(ds.image_side) * ds.image_side)
    throw StructuralError("checkpoint expects " + std::to_string(st.backbone.input_dim()) + " pixels, dataset has " +
                          std::to_string(ds.image_side * ds.image_side));
  const auto scores = quality_scores(st, std::span<const Image>(ds.images));
  auto os = open_out(ctx.output("scores.csv"));
  write_scores_csv(scores, os);
  ctx.metrics["samples"] = scores.size();
}

struct NamedScores {
  std::string name;
  std::vector<double> scores;
};

inline void write_erc_gnuplot(std::ostream& os, const std::vector<std::string>& names, double fmr) {
  os << "# gnuplot -p erc.gp\n";
  os << "set datafile separator ','\n";
  os << "set xlabel 'ratio of unconsidered images'\n";
  os << "set ylabel 'FNMR at FMR=" << fmr << "'\n";
  os << "set key top right\n";
  os << "plot ";
  for (std::size_t i = 0; i < names.size(); ++i)
    os << (i ? ", \\\n     " : "") << "'erc_" << names[i] << ".csv' every ::1 using 1:2 with lines title '" << names[i]
       << "'";
  os << '\n';
}

inline void cmd_erc(const json& args, RunContext& ctx) {
  const double fmr = args.at("fmr").get<double>();
  if (!(fmr > 0.0 && fmr < 1.0)) throw ConfigError("--fmr must lie in (0, 1)");
  const double grid = args.at("grid_step").get<double>();
  if (!(grid > 0.0 && grid < 1.0)) throw ConfigError("--grid-step must lie in (0, 1)");
  const auto st = checkpoint_load<float>(ctx.input(args.at("model").get<std::string>()));
  const auto ds = load_dataset(ctx.input(args.at("data").get<std::string>()));
  if (st.backbone.input_dim() != static_cast<std::size_t>(ds.image_side) * ds.image_side)
    throw StructuralError("checkpoint and dataset image sizes differ");

  std::vector<NamedScores> methods;
  for (const auto& s : args.at("scores")) {
    NamedScores m;
    m.name = s.at("name").get<std::string>();
    m.scores = read_scores_csv(ctx.input(s.at("path").get<std::string>()), ds.size());
    methods.push_back(std::move(m));
  }
  if (args.value("oracle", false)) {
    NamedScores m{"oracle", {}};
    for (float d : ds.degradation_level) m.scores.push_back(1.0 - static_cast<double>(d));
    methods.push_back(std::move(m));
  }
  if (methods.empty()) throw ConfigError("erc needs at least one --scores file or --oracle");
  std::set<std::string> names;
  for (const auto& m : methods)
    if (!names.insert(m.name).second) throw ConfigError("duplicate method name '" + m.name + "'");

  auto rng = make_rng(args.at("seed").get<std::uint64_t>(), {id(Stream::kPairs)});
  const auto max_per_class = args.at("max_pairs_per_class").get<std::size_t>();
  const auto pairs = gen_pairs(ds, rng, max_per_class == 0 ? kAllPairs : max_per_class,
                               args.at("nonmated").get<std::size_t>());
  {
    auto os = open_out(ctx.output("pairs.csv"));
    os << "idx_a,idx_b,genuine\n";
    for (const auto& p : pairs) os << p.index_a << ',' << p.index_b << ',' << (p.genuine ? 1 : 0) << '\n';
  }
  const Mat<float> emb = embed_dataset(st.backbone, std::span<const Image>(ds.images));
  const auto sims = pair_similarities(std::span<const VerificationPair>(pairs), emb);

  auto summary = open_out(ctx.output("summary.csv"));
  summary << "method,fmr,auc\n";
  std::vector<std::string> order;
  for (const auto& m : methods) {
    const auto curve = erc(std::span<const VerificationPair>(pairs), sims, m.scores, fmr, grid);
    auto os = open_out(ctx.output("erc_" + m.name + ".csv"));
    curve.write_csv(os);
    summary << m.name << ',';
    write_double(summary, fmr);
    summary << ',';
    write_double(summary, curve.auc);
    summary << '\n';
    std::cout << "AUC " << m.name << " fmr=" << fmr << " " << std::setprecision(10) << curve.auc << '\n';
    ctx.metrics["auc"][m.name] = curve.auc;
    ctx.metrics["fnmr_at_zero_reject"][m.name] = curve.points.empty() ? 0.0 : curve.points.front().second;
    order.push_back(m.name);
  }
  if (args.value("gnuplot", false)) {
    auto os = open_out(ctx.output("erc.gp"));
    write_erc_gnuplot(os, order, fmr);
  }
}

inline void cmd_report(const json& args, RunContext& ctx) {
  const auto st = checkpoint_load<float>(ctx.input(args.at("model").get<std::string>()));
  const auto ds = load_dataset(ctx.input(args.at("data").get<std::string>()));
  if (st.bank.num_classes() != ds.num_classes || st.backbone.input_dim() != ds.image_side * ds.image_side)
    throw StructuralError("checkpoint does not match the dataset");
  const auto var = oracle_variance(ds, st.backbone);
  const auto w = st.tracker.weights();
  {
    auto os = open_out(ctx.output("tracker.csv"));
    st.tracker.write_csv(os);
  }
  std::size_t dup = 0, dup_zero = 0, normal = 0, normal_high = 0;
  {
    auto os = open_out(ctx.output("classes.csv"));
    os << "class_id,duplicate,v,oracle_variance,weight\n";
    for (std::size_t c = 0; c < ds.num_classes; ++c) {
      const bool is_dup = ds.class_flags[c] == ClassFlag::kDuplicate;
      os << c << ',' << (is_dup ? 1 : 0) << ',';
      write_double(os, static_cast<double>(st.tracker.v()[c]));
      os << ',';
      write_double(os, var[c]);
      os << ',';
      write_double(os, static_cast<double>(w.w[c]));
      os << '\n';
      if (is_dup) {
        ++dup;
        dup_zero += w.w[c] == 0.0f;
      } else {
        ++normal;
        normal_high += w.w[c] > 0.5f;
      }
    }
  }
  std::vector<double> v(st.tracker.v().begin(), st.tracker.v().end());
  double rho = std::numeric_limits<double>::quiet_NaN();
  try {
    rho = pearson(v, var);
  } catch (const DomainError&) {
  }
  const double dup_frac = dup ? static_cast<double>(dup_zero) / dup : 0.0;
  const double normal_frac = normal ? static_cast<double>(normal_high) / normal : 0.0;
  {
    auto os = open_out(ctx.output("summary.csv"));
    os << "metric,value\n";
    os << "pearson_v_oracle,";
    write_double(os, rho);
    os << "\nzero_weight_fraction,";
    write_double(os, w.zero_fraction());
    os << "\nduplicate_zero_fraction,";
    write_double(os, dup_frac);
    os << "\nnormal_above_half_fraction,";
    write_double(os, normal_frac);
    os << '\n';
  }
  std::cout << "pearson(v, oracle) " << rho << "\nzero-weight fraction " << w.zero_fraction()
            << "\nduplicate classes at weight 0: " << dup_zero << "/" << dup << "\nnormal classes with weight > 0.5: "
            << normal_high << "/" << normal << '\n';
  ctx.metrics["pearson_v_oracle"] = rho;
  ctx.metrics["duplicate_zero_fraction"] = dup_frac;
  ctx.metrics["normal_above_half_fraction"] = normal_frac;
  if (args.value("gnuplot", false)) {
    auto os = open_out(ctx.output("report.gp"));
    os << "# gnuplot -p report.gp\nset datafile separator ','\nset xlabel 'oracle intra-class variance'\n"
          "set ylabel 'tracked v'\nplot 'classes.csv' every ::1 using 4:3:($2) with points palette pt 7 title 'classes'\n";
  }
}

/// Mean squared pairwise distance over 2; equals the centroid variance.
inline std::vector<double> pairwise_variance(const Mat<float>& emb, std::span<const std::uint32_t> labels,
                                             std::size_t num_classes) {
  std::vector<std::vector<Eigen::Index>> members(num_classes);
  for (std::size_t i = 0; i < labels.size(); ++i) members[labels[i]].push_back(static_cast<Eigen::Index>(i));
  std::vector<double> out(num_classes, 0.0);
  for (std::size_t c = 0; c < num_classes; ++c) {
    const auto& m = members[c];
    double total = 0.0;
    for (std::size_t a = 0; a < m.size(); ++a)
      for (std::size_t b = a + 1; b < m.size(); ++b)
        total += (emb.row(m[a]).cast<double>() - emb.row(m[b]).cast<double>()).squaredNorm();
    const double n = static_cast<double>(m.size());
    out[c] = n > 0 ? total / (n * n) : 0.0;
  }
  return out;
}

inline void cmd_oracle_check(const json& args, RunContext& ctx) {
  IdentityDataset ds;
  if (args.contains("data"))
    ds = load_dataset(ctx.input(args.at("data").get<std::string>()));
  else
    ds = gen_dataset(synth_config_from(kv_from_json(args.at("config"), "synth config")));
  const auto seed = args.at("seed").get<std::uint64_t>();
  TrainState<float> st;
  if (args.contains("model")) {
    st = checkpoint_load<float>(ctx.input(args.at("model").get<std::string>()));
  } else {
    TrainConfig tc;
    tc.seed = seed;
    st = init_state<float>(tc, IdentityDataset{ds.num_classes, ds.samples_per_class, ds.image_side, {}, {}, {},
                                               std::vector<ClassFlag>(ds.num_classes)});
  }
  if (st.bank.num_classes() != ds.num_classes || st.backbone.input_dim() != ds.image_side * ds.image_side)
    throw StructuralError("model does not match the dataset");
  const auto batch = args.at("batch").get<std::size_t>();
  const auto repeats = args.at("repeats").get<std::size_t>();
  VarianceTracker<float> tracker(ds.num_classes, 1000, 0.9, 1.0);
  const auto probe = tracker_cost_probe(ds, st.backbone, st.bank, tracker, batch, repeats, seed);

  const Mat<float> emb = embed_dataset(st.backbone, std::span<const Image>(ds.images));
  const auto pw = pairwise_variance(emb, ds.labels, ds.num_classes);
  double worst = 0.0;
  {
    auto os = open_out(ctx.output("oracle_check.csv"));
    os << "class_id,oracle_variance,pairwise_variance,ema_v\n";
    for (std::size_t c = 0; c < ds.num_classes; ++c) {
      worst = std::max(worst, std::abs(probe.naive_variance[c] - pw[c]));
      os << c << ',';
      write_double(os, probe.naive_variance[c]);
      os << ',';
      write_double(os, pw[c]);
      os << ',';
      write_double(os, probe.ema_v[c]);
      os << '\n';
    }
  }
  // Timings vary run to run; they go to stdout and the manifest only.
  std::cout << "samples " << ds.size() << "\nema_seconds_per_iteration " << probe.ema_seconds
            << "\nnaive_seconds_per_iteration " << probe.naive_seconds << "\nratio " << probe.ratio
            << "\noracle_vs_pairwise_max_abs_error " << worst << '\n';
  ctx.metrics["samples"] = ds.size();
  ctx.metrics["ema_seconds"] = probe.ema_seconds;
  ctx.metrics["naive_seconds"] = probe.naive_seconds;
  ctx.metrics["ratio"] = probe.ratio;
  ctx.metrics["oracle_max_abs_error"] = worst;
  ctx.metrics["nondeterministic"] = json::array({"ema_seconds", "naive_seconds", "ratio"});
  if (!(worst <= 1e-9)) throw NumericError("oracle_variance disagrees with the pairwise formula by " + std::to_string(worst));
}

// ---------------------------------------------------------------------------
// Self-check

struct CheckResult {
  std::string name;
  double max_error = 0.0;
  double tolerance = 0.0;
  bool passed() const { return max_error <= tolerance; }
};

inline double fd_max_rel(const std::vector<double>& analytic, const std::function<double(std::size_t, double)>& eval,
                         double h) {
  double worst = 0.0;
  for (std::size_t i = 0; i < analytic.size(); ++i) {
    const double numeric = (eval(i, h) - eval(i, -h)) / (2 * h);
    worst = std::max(worst, relative_error(analytic[i], numeric));
  }
  return worst;
}

inline std::vector<CheckResult> run_selfchecks(std::uint64_t seed, bool inject_fault) {
  std::vector<CheckResult> out;
  auto rng = make_rng(seed, {id(Stream::kProbe), 7});
  const std::size_t b = 8, d = 16, c = 8;
  Mat<double> emb(b, d);
  for (Eigen::Index i = 0; i < emb.size(); ++i) emb.data()[i] = normal(rng);
  emb.rowwise().normalize();
  emb *= 0.95;
  std::vector<std::uint32_t> labels(b);
  for (auto& y : labels) y = static_cast<std::uint32_t>(uniform_index(rng, c));
  auto bank = PrototypeBank<double>::init(d, c, seed, 16.0, 0.5);

  {  // margin loss w.r.t. embeddings and prototypes
    const auto r = arcface_loss(bank, emb, labels);
    std::vector<double> a(r.grad_emb.data(), r.grad_emb.data() + r.grad_emb.size());
    a.insert(a.end(), r.grad_w.data(), r.grad_w.data() + r.grad_w.size());
    const auto ne = static_cast<std::size_t>(emb.size());
    auto eval = [&](std::size_t i, double h) {
      Mat<double> e = emb;
      auto bk = bank;
      if (i < ne)
        e.data()[i] += h;
      else
        bk.weight.data()[i - ne] += h;
      return arcface_loss(bk, e, labels).loss;
    };
    out.push_back({"margin_loss_gradient", fd_max_rel(a, eval, 1e-4), 1e-4});
  }
  {  // smooth L1 derivative, both branches
    std::vector<double> pts, a;
    for (double x = -3.05; x < 3.0; x += 0.1) pts.push_back(x), a.push_back(smooth_l1_grad(x, 1.0));
    auto eval = [&](std::size_t i, double h) { return smooth_l1(pts[i] + h, 1.0); };
    out.push_back({"smooth_l1_gradient", fd_max_rel(a, eval, 1e-4), 1e-4});
  }
  {  // weighted regression loss
    RegressionHead<double> head(d, true, 1.0);
    for (double& x : flat(head.weight)) x = 0.5 * normal(rng);
    head.bias(0) = 0.1;
    std::vector<double> t(b), w(b);
    for (std::size_t i = 0; i < b; ++i) t[i] = uniform(rng, -1.5, 1.5), w[i] = uniform(rng, 0.0, 1.0);
    const auto r = weighted_regression_loss(head, emb, t, w);
    std::vector<double> a(r.grad_weight.data(), r.grad_weight.data() + r.grad_weight.size());
    a.push_back(r.grad_bias(0));
    a.insert(a.end(), r.grad_emb.data(), r.grad_emb.data() + r.grad_emb.size());
    if (inject_fault) a[0] = -a[0];
    auto eval = [&](std::size_t i, double h) {
      auto hd = head;
      Mat<double> e = emb;
      if (i < d)
        hd.weight(static_cast<Eigen::Index>(i)) += h;
      else if (i == d)
        hd.bias(0) += h;
      else
        e.data()[i - d - 1] += h;
      return weighted_regression_loss(hd, e, t, w).loss;
    };
    out.push_back({"regression_loss_gradient", fd_max_rel(a, eval, 1e-4), 1e-4});
  }
  {  // backbone chained with the margin loss
    const auto model = MlpBackbone<double>::init(36, 24, d, seed);
    std::vector<Image> imgs;
    for (std::size_t i = 0; i < b; ++i) {
      Image img(6);
      for (float& p : img.pixels()) p = static_cast<float>(uniform(rng, 0.0, 1.0));
      imgs.push_back(img);
    }
    auto loss = [&](const Mat<double>& e) {
      auto r = arcface_loss(bank, e, labels);
      return std::pair<double, Mat<double>>{r.loss, r.grad_emb};
    };
    const auto rep = grad_check(model, loss, std::span<const Image>(imgs), 1e-4, 1e-5, 2000, seed);
    out.push_back({"backbone_chain_gradient", rep.max_rel_error, 1e-4});
  }
  {  // EMA: alpha = 1 keeps v, alpha = 0 copies the observation
    auto keep = VarianceTracker<double>::fixed(3, 10, 1.0);
    auto copy = VarianceTracker<double>::fixed(3, 10, 0.0);
    const std::vector<std::uint32_t> y = {0, 0, 2};
    const std::vector<double> ccs = {0.7, 0.9, 0.5};
    keep.update(y, ccs);
    copy.update(y, ccs);
    const double err = std::max({std::abs(keep.v()[0] - 1.0), std::abs(keep.v()[2] - 1.0), std::abs(copy.v()[0] - 0.2),
                                 std::abs(copy.v()[1] - 1.0), std::abs(copy.v()[2] - 0.5)});
    out.push_back({"ema_identities", err, 1e-12});
  }
  {  // clamp floor/ceiling and the degenerate-sigma rule
    const auto w = VarianceTracker<double>::z_clamped_weights(std::vector<double>{1, 2, 3});
    const auto flat_w = VarianceTracker<double>::z_clamped_weights(std::vector<double>{0.4, 0.4});
    const double err = std::max({std::abs(w.w[0]), std::abs(w.w[1] - 1), std::abs(w.w[2] - 1),
                                 std::abs(flat_w.w[0] - 1), std::abs(flat_w.w[1] - 1)});
    out.push_back({"weight_clamp_identities", err, 0.0});
  }
  {  // oracle variance against the pairwise formula
    Mat<float> e(60, 8);
    std::vector<std::uint32_t> y(60);
    for (Eigen::Index i = 0; i < e.size(); ++i) e.data()[i] = static_cast<float>(normal(rng));
    e.rowwise().normalize();
    for (std::size_t i = 0; i < 60; ++i) y[i] = static_cast<std::uint32_t>(i % 6);
    const auto a = oracle_variance_from_embeddings(e, y, 6);
    const auto p = pairwise_variance(e, y, 6);
    double err = 0.0;
    for (std::size_t k = 0; k < 6; ++k) err = std::max(err, std::abs(a[k] - p[k]));
    out.push_back({"oracle_variance_crosscheck", err, 1e-10});
  }
  {  // ERC hand example
    const std::vector<VerificationPair> pairs = {{0, 1, true}, {1, 2, true}, {2, 3, true}, {1, 4, true}};
    const std::vector<double> sims = {0.2, 0.3, 0.9, 0.6}, q = {0.1, 0.9, 0.8, 0.7, 0.6};
    const auto curve = erc_at_threshold(pairs, sims, q, 0.5, 0.25);
    const std::vector<double> expected = {0.5, 1.0 / 3.0, 0.5, 1.0};
    double err = curve.points.size() == expected.size() ? 0.0 : 1.0;
    for (std::size_t i = 0; i < std::min(expected.size(), curve.points.size()); ++i)
      err = std::max(err, std::abs(curve.points[i].second - expected[i]));
    out.push_back({"erc_hand_example", err, 1e-15});
  }
  return out;
}

inline void cmd_grad_check(const json& args, RunContext& ctx) {
  const auto checks = run_selfchecks(args.at("seed").get<std::uint64_t>(), args.value("inject_fault", false));
  auto os = open_out(ctx.output("selfcheck.csv"));
  os << "check,max_error,tolerance,passed\n";
  bool ok = true;
  for (const auto& c : checks) {
    os << c.name << ',';
    write_double(os, c.max_error);
    os << ',';
    write_double(os, c.tolerance);
    os << ',' << (c.passed() ? 1 : 0) << '\n';
    std::cout << (c.passed() ? "PASS " : "FAIL ") << std::left << std::setw(28) << c.name << " max_error=" << std::scientific
              << std::setprecision(3) << c.max_error << " tol=" << c.tolerance << std::defaultfloat << '\n';
    ok = ok && c.passed();
    ctx.metrics["checks"][c.name] = c.max_error;
  }
  os.close();
  if (!ok) throw NumericError("self-check failed");
}

// ---------------------------------------------------------------------------
// Execution and manifests

using CommandFn = std::function<void(const json&, RunContext&)>;

inline const std::map<std::string, CommandFn>& registry() {
  static const std::map<std::string, CommandFn> r = {
      {"synth", cmd_synth},   {"train", cmd_train},         {"score", cmd_score},
      {"erc", cmd_erc},       {"report", cmd_report},       {"oracle-check", cmd_oracle_check},
      {"grad-check", cmd_grad_check}, {"selfcheck", cmd_grad_check}};
  return r;
}

/// Runs `command` and writes `manifest.json` into `out_dir`. The manifest is
/// written even when the command fails, with the error recorded.
inline json execute(const std::string& command, const json& args, const fs::path& out_dir, std::ostream& log = std::cerr,
                    const json& extra = json::object()) {
  const auto it = registry().find(command);
  if (it == registry().end()) throw ConfigError("unknown command '" + command + "'");
  fs::create_directories(out_dir);
  RunContext ctx;
  ctx.out_dir = out_dir;
  ctx.log = &log;
  const auto t0 = std::chrono::steady_clock::now();
  json manifest;
  manifest["tool_version"] = kToolVersion;
  manifest["command"] = command;
  manifest["args"] = args;
  if (args.contains("seed"))
    manifest["seed"] = args.at("seed");
  else if (args.contains("config") && args.at("config").contains("seed"))
    manifest["seed"] = args.at("config").at("seed");
  else
    manifest["seed"] = nullptr;
  for (auto e = extra.begin(); e != extra.end(); ++e) manifest[e.key()] = e.value();
  auto finish = [&](const char* status, const std::string& error) {
    manifest["status"] = status;
    if (!error.empty()) manifest["error"] = error;
    manifest["wall_clock_seconds"] = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    json inputs = json::array();
    for (const auto& p : ctx.inputs)
      inputs.push_back({{"path", p.string()}, {"sha256", fs::exists(p) ? sha256_file(p) : std::string()}});
    manifest["inputs"] = inputs;
    json outputs = json::array();
    for (const auto& o : ctx.outputs)
      if (fs::exists(out_dir / o)) outputs.push_back({{"path", o}, {"sha256", sha256_file(out_dir / o)}});
    manifest["outputs"] = outputs;
    manifest["metrics"] = ctx.metrics;
    auto os = open_out(out_dir / kManifestName);
    os << manifest.dump(2) << '\n';
  };
  try {
    it->second(args, ctx);
  } catch (const std::exception& e) {
    finish("failed", e.what());
    throw;
  }
  finish("ok", "");
  return manifest;
}

inline json load_manifest(const fs::path& path) {
  std::ifstream is(path);
  if (!is) throw FormatError("cannot open manifest " + path.string(), 0);
  try {
    return json::parse(is);
  } catch (const json::parse_error& e) {
    throw FormatError(path.string() + ": " + e.what(), e.byte);
  }
}

struct ReplayResult {
  std::size_t identical = 0;
  std::vector<std::string> mismatched;
};

/// Re-executes a manifest into `out_dir` and compares output digests.
inline ReplayResult replay(const fs::path& manifest_path, const fs::path& out_dir, std::ostream& log = std::cerr) {
  const json m = load_manifest(manifest_path);
  if (!m.contains("command") || !m.contains("args") || !m.contains("outputs"))
    throw FormatError(manifest_path.string() + ": not a run manifest", 0);
  if (m.value("status", "ok") != "ok") throw ConfigError("manifest records a failed run; nothing to reproduce");
  for (const auto& in : m.value("inputs", json::array())) {
    const fs::path p = in.at("path").get<std::string>();
    if (!fs::exists(p)) throw FormatError("replay input missing: " + p.string(), 0);
    if (sha256_file(p) != in.at("sha256").get<std::string>())
      throw FormatError("replay input changed since the recorded run: " + p.string(), 0);
  }
  if (fs::weakly_canonical(out_dir) == fs::weakly_canonical(manifest_path.parent_path()))
    throw ConfigError("replay output directory must differ from the recorded run");
  const json again = execute(m.at("command").get<std::string>(), m.at("args"), out_dir, log,
                             {{"replay_of", fs::absolute(manifest_path).string()}});
  std::map<std::string, std::string> now;
  for (const auto& o : again.at("outputs")) now[o.at("path").get<std::string>()] = o.at("sha256").get<std::string>();
  ReplayResult r;
  for (const auto& o : m.at("outputs")) {
    const auto name = o.at("path").get<std::string>();
    auto it = now.find(name);
    if (it != now.end() && it->second == o.at("sha256").get<std::string>())
      ++r.identical;
    else
      r.mismatched.push_back(name);
  }
  if (now.size() != m.at("outputs").size()) r.mismatched.push_back("<output set differs>");
  return r;
}

/// CLI exit code for an exception escaping a command.
inline int exit_code_for(const std::exception& e) {
  if (dynamic_cast<const ConfigError*>(&e)) return 1;
  if (dynamic_cast<const NumericError*>(&e) || dynamic_cast<const DomainError*>(&e)) return 3;
  return 2;
}

}  // namespace igfiqa::cli
