// Command-line front end for the landmark-localization pipeline.
//
// palnet <subcommand> [--config PATH] [--set KEY=VALUE ...] [--seed S]
//        [--jobs N] [--force] [--exclude-landmarks A,B,...]
//        [--postprocess nearest|centroid:K]
//
// Exit codes: 0 success, 1 invalid usage/configuration, 2 runtime failure.

#include <cstdio>
#include <exception>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "palnet/palnet.hpp"

namespace {

struct CommandArgs {
  std::string config_path;
  std::vector<std::string> overrides;
  std::uint64_t seed = 0;
  int jobs = 1;
  bool force = false;
  std::string exclude;
  std::string postprocess;

  CLI::Option* seed_opt = nullptr;
  CLI::Option* exclude_opt = nullptr;
  CLI::Option* postprocess_opt = nullptr;
};

void add_common_options(CLI::App* sub, CommandArgs& args) {
  sub->add_option("--config", args.config_path, "Pipeline configuration JSON file")
      ->check(CLI::ExistingFile);
  sub->add_option("--set", args.overrides,
                  "Override a config field by dotted path, e.g. --set train.alpha=0.5")
      ->type_name("KEY=VALUE");
  args.seed_opt = sub->add_option("--seed", args.seed, "Master seed (overrides the config)");
  sub->add_option("--jobs", args.jobs, "Parallel worker limit for per-subject stages")
      ->check(CLI::PositiveNumber);
  sub->add_flag("--force", args.force, "Re-run even when artifacts are up to date");
  args.exclude_opt = sub->add_option("--exclude-landmarks", args.exclude,
                                     "Comma-separated landmark names for the exclusion analysis");
  args.postprocess_opt = sub->add_option(
      "--postprocess", args.postprocess, "Surface re-projection: 'nearest' or 'centroid:K'");
}

std::vector<std::string> split_csv(const std::string& s) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (start <= s.size()) {
    const std::size_t comma = s.find(',', start);
    const std::string item = s.substr(start, comma == std::string::npos ? comma : comma - start);
    if (!item.empty()) out.push_back(item);
    if (comma == std::string::npos) break;
    start = comma + 1;
  }
  return out;
}

palnet::PipelineConfig build_config(const CommandArgs& args) {
  nlohmann::json root = nlohmann::json::object();
  if (!args.config_path.empty()) {
    std::ifstream in(args.config_path);
    if (!in) throw palnet::UsageError("config: cannot open '" + args.config_path + "'");
    try {
      in >> root;
    } catch (const nlohmann::json::exception& e) {
      throw palnet::UsageError("config: '" + args.config_path +
                               "' is not valid JSON: " + e.what());
    }
  }
  if (args.seed_opt && args.seed_opt->count() > 0) root["seed"] = args.seed;
  // Anything wrong while assembling the configuration is invalid usage
  // (exit code 1), not a runtime failure.
  try {
    for (const auto& assignment : args.overrides) palnet::apply_config_override(root, assignment);
    if (args.exclude_opt && args.exclude_opt->count() > 0)
      root["exclude_landmarks"] = split_csv(args.exclude);
    if (args.postprocess_opt && args.postprocess_opt->count() > 0)
      root["postprocess"] = args.postprocess;
    return palnet::pipeline_config_from_json(root);
  } catch (const palnet::UsageError&) {
    throw;
  } catch (const palnet::Error& e) {
    throw palnet::UsageError(e.what());
  }
}

void report(const std::string& stage, bool ran) {
  if (ran)
    std::cout << stage << ": done\n";
  else
    std::cout << stage << ": up to date (use --force to re-run)\n";
}

int dispatch(const std::string& name, const CommandArgs& args) {
  const palnet::PipelineConfig cfg = build_config(args);
  const palnet::StageOptions opt{args.force, args.jobs};

  if (name == "generate") {
    report("generate", palnet::run_generate(cfg, opt));
  } else if (name == "preprocess") {
    report("preprocess", palnet::run_preprocess(cfg, opt));
  } else if (name == "train") {
    report("train", palnet::run_train(cfg, opt));
  } else if (name == "predict") {
    report("predict", palnet::run_predict(cfg, opt));
  } else if (name == "evaluate") {
    const palnet::EvaluateOutcome out = palnet::run_evaluate(cfg, opt);
    std::printf("evaluate: pointwise %.3f mm (atlas baseline %.3f mm, improvement %.1f%%)\n",
                out.model.pointwise.overall_mean, out.baseline.pointwise.overall_mean,
                out.pointwise_improvement_percent);
    std::printf("evaluate: distance-wise %.3f mm (atlas baseline %.3f mm, improvement %.1f%%)\n",
                out.model.distance_matrix.mean_off_diagonal,
                out.baseline.distance_matrix.mean_off_diagonal,
                out.distance_improvement_percent);
    if (out.has_excluded)
      std::printf("evaluate: after exclusion %zu landmarks, pointwise %.3f mm\n",
                  out.model_excluded.pointwise.names.size(),
                  out.model_excluded.pointwise.overall_mean);
    std::cout << "evaluate: reports in " << cfg.evaluate_root() << "\n";
  } else if (name == "ablate") {
    const std::vector<palnet::AblateRow> rows = palnet::run_ablate(cfg, opt);
    std::printf("%-20s %12s %14s %14s %12s\n", "variant", "val_loss", "pointwise_mm",
                "distance_mm", "improv_%");
    for (const auto& r : rows)
      std::printf("%-20s %12.4f %14.3f %14.3f %12.1f\n", r.name.c_str(), r.val_loss,
                  r.pointwise_mm, r.distance_mm, r.improvement_percent);
    std::cout << "ablate: results in " << cfg.ablate_root() << "\n";
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Automated 3D anatomical facial landmark localization pipeline"};
  app.require_subcommand(1);

  const std::vector<std::pair<std::string, std::string>> commands = {
      {"generate", "Create the synthetic dataset (meshes, landmarks, reference, manifest)"},
      {"preprocess", "Align subjects to the reference, build fold atlases and patch tensors"},
      {"train", "Train the localization network per cross-validation fold"},
      {"predict", "Predict landmarks for each fold's validation subjects"},
      {"evaluate", "Compute evaluation reports against ground truth and the atlas baseline"},
      {"ablate", "Run the configuration-variant grid and tabulate the results"}};

  std::vector<CommandArgs> all_args(commands.size());
  for (std::size_t i = 0; i < commands.size(); ++i)
    add_common_options(app.add_subcommand(commands[i].first, commands[i].second), all_args[i]);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : 1;
  }

  try {
    for (std::size_t i = 0; i < commands.size(); ++i)
      if (app.get_subcommand(commands[i].first)->parsed())
        return dispatch(commands[i].first, all_args[i]);
    std::cerr << "error: no subcommand given\n";
    return 1;
  } catch (const palnet::UsageError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const palnet::Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
}
