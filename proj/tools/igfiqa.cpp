#include <iostream>

#include "CLI11.hpp"
#include "igfiqa/cli.hpp"

using namespace igfiqa;
using namespace igfiqa::cli;

namespace {

// Reads --config (if any), then applies --set key=value and --seed on top.
// Validation runs here so errors still point at file lines.
template <typename Validate>
json resolve_config(const std::string& path, const std::vector<std::string>& sets, const std::optional<std::uint64_t>& seed,
                    Validate validate) {
  KeyValues kv = path.empty() ? KeyValues::parse_string("", "<flags>") : KeyValues::load(path);
  for (const auto& s : sets) {
    const auto eq = s.find('=');
    if (eq == std::string::npos || eq == 0) throw ConfigError("--set expects key=value, got '" + s + "'");
    kv.set(s.substr(0, eq), s.substr(eq + 1));
  }
  if (seed) kv.set("seed", std::to_string(*seed));
  validate(kv);
  json j = json::object();
  for (const auto& [k, e] : kv.entries()) j[k] = e.value;
  return j;
}

std::string absolute(const std::string& p) { return fs::absolute(p).lexically_normal().string(); }

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Identity-aware face image quality training and evaluation on synthetic identities"};
  app.require_subcommand(1);
  app.set_version_flag("--version", kToolVersion);

  std::optional<std::uint64_t> seed;
  std::string config_path, out_dir;
  std::vector<std::string> sets;
  app.add_option("--seed", seed, "Seed; overrides the config file")->type_name("UINT");
  app.add_option("--config", config_path, "key=value config file")->check(CLI::ExistingFile);
  app.add_option("--out", out_dir, "Output directory");
  app.add_option("--set", sets, "Override a config key (key=value), repeatable");

  auto* synth = app.add_subcommand("synth", "Generate a synthetic identity dataset");
  synth->fallthrough();

  auto* train = app.add_subcommand("train", "Train a backbone and quality head");
  train->fallthrough();
  std::string variant = "ig", data, resume;
  train->add_option("--variant", variant, "ig | cr | ig-noaug | cr-aug")
      ->check(CLI::IsMember({"ig", "cr", "ig-noaug", "cr-aug"}));
  train->add_option("--data", data, "Dataset file")->required();
  train->add_option("--resume", resume, "Checkpoint to continue from");

  auto* score = app.add_subcommand("score", "Write quality scores for every sample");
  score->fallthrough();
  std::string model;
  score->add_option("--model", model, "Checkpoint")->required();
  score->add_option("--data", data, "Dataset file")->required();

  auto* ercc = app.add_subcommand("erc", "Error-versus-reject curves at a fixed FMR");
  ercc->fallthrough();
  std::vector<std::string> score_files;
  double fmr = 1e-2, grid = kDefaultGridStep;
  std::size_t max_pairs = 0, nonmated = 20000;
  bool oracle = false, gnuplot = false;
  ercc->add_option("--model", model, "Checkpoint whose backbone produces the comparison scores")->required();
  ercc->add_option("--data", data, "Dataset file")->required();
  ercc->add_option("--scores", score_files, "Quality scores as name=path or path, repeatable");
  ercc->add_option("--fmr", fmr, "FMR operating point, in (0, 1)");
  ercc->add_option("--grid-step", grid, "Rejection grid step");
  ercc->add_option("--max-pairs-per-class", max_pairs, "Cap on mated pairs per class (0 = all)");
  ercc->add_option("--nonmated", nonmated, "Number of random non-mated pairs");
  ercc->add_flag("--oracle", oracle, "Add 1 - degradation_level as an oracle quality");
  ercc->add_flag("--gnuplot", gnuplot, "Also write erc.gp");

  auto* report = app.add_subcommand("report", "Per-class tracker state against the oracle variance");
  report->fallthrough();
  report->add_option("--model", model, "Checkpoint")->required();
  report->add_option("--data", data, "Dataset file")->required();
  report->add_flag("--gnuplot", gnuplot, "Also write report.gp");

  auto* oracle_check = app.add_subcommand("oracle-check", "Time the EMA tracker against the exact oracle");
  oracle_check->fallthrough();
  std::size_t batch = 64, repeats = 3;
  oracle_check->add_option("--data", data, "Dataset file (default: synthesize from --config)");
  oracle_check->add_option("--model", model, "Checkpoint (default: freshly initialized network)");
  oracle_check->add_option("--batch", batch, "Tracker batch size");
  oracle_check->add_option("--repeats", repeats, "Timed repetitions");

  bool inject = false;
  auto* grad_check = app.add_subcommand("grad-check", "Gradient and formula self-checks");
  grad_check->fallthrough();
  grad_check->add_flag("--inject-fault", inject, "Flip one analytic gradient (sensitivity test)");
  auto* selfcheck = app.add_subcommand("selfcheck", "Alias of grad-check");
  selfcheck->fallthrough();
  selfcheck->add_flag("--inject-fault", inject, "Flip one analytic gradient (sensitivity test)");

  auto* rep = app.add_subcommand("replay", "Re-run a manifest and compare outputs");
  rep->fallthrough();
  std::string manifest_path;
  rep->add_option("manifest", manifest_path, "manifest.json of the recorded run")->required()->check(CLI::ExistingFile);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  try {
    auto* sub = app.get_subcommands().front();
    const std::string name = sub->get_name();
    auto need_out = [&] {
      if (out_dir.empty()) throw ConfigError(name + ": --out is required");
      return fs::path(out_dir);
    };
    auto no_config = [&] {
      if (!config_path.empty() || !sets.empty()) throw ConfigError(name + " takes no config file or --set overrides");
    };

    if (name == "replay") {
      const fs::path m = manifest_path;
      const fs::path dest = out_dir.empty() ? m.parent_path() / "replay" : fs::path(out_dir);
      const auto r = igfiqa::cli::replay(m, dest);
      if (!r.mismatched.empty()) {
        for (const auto& f : r.mismatched) std::cerr << "replay: output differs: " << f << '\n';
        return 2;
      }
      std::cout << "replay: " << r.identical << " outputs identical\n";
      return 0;
    }

    json args = json::object();
    auto as_synth = [](const KeyValues& kv) { synth_config_from(kv); };
    auto as_train = [](const KeyValues& kv) { train_config_from(kv).validate(); };
    if (name == "synth") {
      args["config"] = resolve_config(config_path, sets, seed, as_synth);
    } else if (name == "train") {
      args["config"] = resolve_config(config_path, sets, seed, as_train);
      args["variant"] = variant;
      args["data"] = absolute(data);
      if (!resume.empty()) args["resume"] = absolute(resume);
    } else if (name == "score") {
      no_config();
      args["model"] = absolute(model);
      args["data"] = absolute(data);
    } else if (name == "erc") {
      no_config();
      if (!(fmr > 0.0 && fmr < 1.0)) throw ConfigError("--fmr must lie in (0, 1)");
      args["model"] = absolute(model);
      args["data"] = absolute(data);
      args["fmr"] = fmr;
      args["grid_step"] = grid;
      args["max_pairs_per_class"] = max_pairs;
      args["nonmated"] = nonmated;
      args["oracle"] = oracle;
      args["gnuplot"] = gnuplot;
      args["seed"] = seed.value_or(1);
      args["scores"] = json::array();
      for (const auto& s : score_files) {
        const auto eq = s.find('=');
        const std::string path = eq == std::string::npos ? s : s.substr(eq + 1);
        const std::string label = eq == std::string::npos ? fs::path(s).stem().string() : s.substr(0, eq);
        args["scores"].push_back({{"name", label}, {"path", absolute(path)}});
      }
    } else if (name == "report") {
      no_config();
      args["model"] = absolute(model);
      args["data"] = absolute(data);
      args["gnuplot"] = gnuplot;
    } else if (name == "oracle-check") {
      if (!data.empty()) {
        no_config();
        args["data"] = absolute(data);
      } else {
        args["config"] = resolve_config(config_path, sets, std::nullopt, as_synth);
      }
      if (!model.empty()) args["model"] = absolute(model);
      args["batch"] = batch;
      args["repeats"] = repeats;
      args["seed"] = seed.value_or(1);
    } else {
      no_config();
      args["seed"] = seed.value_or(1);
      args["inject_fault"] = inject;
      if (out_dir.empty()) out_dir = "selfcheck";
    }
    execute(name, args, need_out());
    return 0;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return exit_code_for(e);
  }
}
