// Experiment front door: config-driven teacher/student training, robustness
// evaluation and training-dynamics analysis.
//
// Exit codes: 0 success, 2 config error, 3 missing artifact, 4 numeric
// failure.

#include <exception>
#include <iostream>
#include <string>

#include <CLI11.hpp>

#include "rkd/config.hpp"
#include "rkd/harness.hpp"

namespace {

struct SubArgs {
  std::string config_path;
  std::string output_dir;  // overrides the config when set
};

rkd::ExperimentConfig load(const SubArgs& args) {
  rkd::ExperimentConfig cfg = rkd::load_experiment_config(args.config_path);
  if (!args.output_dir.empty()) cfg.output_dir = args.output_dir;
  return cfg;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"rkdlab: adversarial knowledge distillation on desk-scale models"};
  app.require_subcommand(1);

  SubArgs args;
  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", args.config_path, "experiment config file (JSON)")
        ->required();
    sub->add_option("--output-dir", args.output_dir, "override the config's output_dir");
  };

  CLI::App* train_teacher =
      app.add_subcommand("train-teacher", "train the teacher model(s) with per-epoch checkpoints");
  CLI::App* train_student =
      app.add_subcommand("train-student", "train the student against saved teacher checkpoints");
  CLI::App* evaluate = app.add_subcommand("evaluate", "clean and robust accuracy reports");
  CLI::App* analyze =
      app.add_subcommand("analyze", "difficulty, trajectory and entropy tables");
  for (CLI::App* sub : {train_teacher, train_student, evaluate, analyze}) add_common(sub);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;  // command-line problems are config errors
  }

  try {
    const rkd::ExperimentConfig cfg = load(args);
    if (train_teacher->parsed()) {
      rkd::run_train_teacher(cfg);
    } else if (train_student->parsed()) {
      rkd::run_train_student(cfg);
    } else if (evaluate->parsed()) {
      for (const rkd::MetricsReport& r : rkd::run_evaluate(cfg))
        std::cout << r.model << ": clean_acc=" << r.clean_acc
                  << " (report in " << cfg.output_dir << ")\n";
    } else if (analyze->parsed()) {
      rkd::run_analyze(cfg);
    }
  } catch (const rkd::ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const rkd::ArtifactError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 3;
  } catch (const rkd::NumericError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 4;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
