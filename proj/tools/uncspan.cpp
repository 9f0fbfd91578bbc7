// uncspan: config-driven pipelines for attacking and measuring the
// uncertainty of small softmax classifiers on synthetic data.
//
// Usage: uncspan <command> --config <path> [--out <dir>] [--threads N]
// Commands: generate, train, attack, span, calibrate, ood-eval,
//           verify-theory, report.
// Exit codes: 0 success, 2 missing/invalid input, 3 numerical failure,
//             4 tolerance failure in verify-theory.

#include <CLI11.hpp>
#include <cstdio>
#include <string>

#include "uncspan/pipeline.hpp"

int main(int argc, char** argv) {
  CLI::App app{"adversarial uncertainty evaluation pipelines"};
  app.require_subcommand(1);

  const std::vector<std::string> commands = {"generate", "train",         "attack",
                                             "span",     "calibrate",     "ood-eval",
                                             "verify-theory", "report"};
  std::string config_path, out_override;
  int threads = 1;
  for (const std::string& name : commands) {
    CLI::App* sub = app.add_subcommand(name);
    sub->add_option("--config", config_path, "experiment config file")->required();
    sub->add_option("--out", out_override, "output directory (overrides the config)");
    sub->add_option("--threads", threads, "worker threads")->check(CLI::PositiveNumber);
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    uncspan::ExperimentConfig cfg = uncspan::ExperimentConfig::from_file(config_path);
    uncspan::Pipeline pipeline = uncspan::make_pipeline(cfg, out_override, threads);
    return uncspan::run_command(app.get_subcommands().front()->get_name(), pipeline);
  } catch (const uncspan::NumericalError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 3;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  }
}
