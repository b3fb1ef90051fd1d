// fnlab command line: gen-data, train, evaluate, report.
//
// Settings resolve as config file < FNLAB_* environment < flags.

#include <cstdlib>
#include <exception>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "fnlab/experiment.hpp"

namespace fs = std::filesystem;

namespace {

struct CommonFlags {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> loss;
  std::optional<std::string> model;
  std::optional<std::string> mode;
  std::optional<std::string> out;
};

void add_common(CLI::App* app, CommonFlags& f, bool needs_config = true) {
  auto* opt = app->add_option("--config", f.config, "experiment config (JSON) or run manifest");
  if (needs_config) opt->required();
  app->add_option("--seed", f.seed, "master seed");
  app->add_option("--loss", f.loss, "log | delayed_feedback | pu | fn_weighted | fn_calibration");
  app->add_option("--model", f.model, "logistic | wide_deep");
  app->add_option("--mode", f.mode, "offline | continuous");
  app->add_option("--out", f.out, "output directory");
}

// Returns the effective config and output directory.
std::pair<fnlab::ExperimentConfig, fs::path> resolve(const CommonFlags& f, const std::string& default_out) {
  auto cfg = fnlab::load_config(f.config);
  const auto env = fnlab::env_overrides();
  env.apply(cfg);
  fnlab::Overrides flags{f.seed, f.loss, f.model, f.mode, f.out};
  flags.apply(cfg);
  std::string out = default_out;
  if (env.out) out = *env.out;
  if (f.out) out = *f.out;
  cfg.validate();
  return {cfg, fs::path(out)};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"fnlab: streaming CTR experiments with delayed and fake-negative labels"};
  app.require_subcommand(1);
  app.set_version_flag("--version", std::string(fnlab::kVersion));

  CommonFlags gen_flags, train_flags, eval_flags;
  auto* gen = app.add_subcommand("gen-data", "generate a synthetic impression stream");
  add_common(gen, gen_flags);

  auto* train = app.add_subcommand("train", "train one model and write snapshots");
  add_common(train, train_flags);

  std::vector<std::string> run_dirs;
  bool with_baseline = false;
  bool by_pattern = false;
  std::optional<std::string> snapshots;
  auto* evaluate = app.add_subcommand("evaluate", "score run snapshots on the shared evaluation set");
  add_common(evaluate, eval_flags);
  evaluate->add_option("runs", run_dirs, "run directories");
  evaluate->add_option("--snapshots", snapshots, "last | all");
  evaluate->add_flag("--with-baseline", with_baseline, "add the constant naive predictor as a row");
  evaluate->add_flag("--by-pattern", by_pattern, "per-feature-pattern calibration against the ground truth");

  std::vector<std::string> eval_dirs;
  std::optional<std::string> report_out;
  auto* report = app.add_subcommand("report", "aggregate evaluation summaries of repeated runs");
  report->add_option("dirs", eval_dirs, "evaluation directories or summary.csv files")->required();
  report->add_option("--out", report_out, "write the aggregate table as CSV");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : fnlab::exit_code::kConfig;
  }

  try {
    if (*gen) {
      auto [cfg, out] = resolve(gen_flags, "data");
      fnlab::cmd_gen_data(cfg, out);
      std::cout << "wrote synthetic data to " << out.string() << '\n';
    } else if (*train) {
      auto defaults = fnlab::load_config(train_flags.config);
      auto [cfg, out] = resolve(train_flags, "runs/" + defaults.name);
      const auto summary = fnlab::cmd_train(cfg, out);
      std::cout << cfg.name << ": " << summary.steps << " steps, " << summary.snapshot_versions.size()
                << " snapshot(s) in " << out.string() << '\n';
    } else if (*evaluate) {
      auto [cfg, out] = resolve(eval_flags, run_dirs.empty() ? "eval" : run_dirs.front());
      if (snapshots) cfg.eval.snapshots = *snapshots;
      std::vector<fs::path> runs(run_dirs.begin(), run_dirs.end());
      const auto reports = fnlab::cmd_evaluate(cfg, runs, out, {with_baseline, by_pattern});
      std::cout << fnlab::summary_csv(reports);
    } else if (*report) {
      std::vector<fs::path> dirs(eval_dirs.begin(), eval_dirs.end());
      const auto rep = fnlab::cmd_report(dirs);
      std::cout << rep.text;
      if (report_out) fnlab::write_text_file(*report_out, rep.csv);
    }
  } catch (const std::exception& e) {
    std::cerr << "fnlab: " << e.what() << '\n';
    return fnlab::exit_code_for(e);
  }
  return fnlab::exit_code::kOk;
}
