#include <exception>
#include <iostream>
#include <string>

#include "CLI11.hpp"
#include "adaslot/errors.hpp"
#include "adaslot/runner.hpp"

int main(int argc, char** argv) {
  CLI::App app{"adaptive slot-attention scene auto-encoder workbench"};
  app.set_version_flag("--version", std::string(adaslot::version_string()));
  app.require_subcommand(1);

  adaslot::GenArgs gen;
  auto* cgen = app.add_subcommand("gen", "generate a synthetic sprite dataset");
  cgen->add_option("--spec", gen.spec_path,
                   "scene-spec JSON (default: built-in spec)");
  auto* gen_seed = cgen->add_option("--seed", gen.seed, "dataset seed");
  auto* gen_count = cgen->add_option("--count", gen.count, "number of images");
  cgen->add_option("--out", gen.out, "dataset output path")->required();

  adaslot::TrainArgs train;
  auto* ctrain = app.add_subcommand("train", "train a model from a config");
  ctrain->add_option("--config", train.config_path, "run config file")
      ->required();
  ctrain->add_option("--out", train.out_dir, "run output directory")
      ->required();
  ctrain->add_option("--resume", train.resume, "checkpoint to resume from");
  ctrain->add_option("--set", train.overrides,
                     "config override key=value (repeatable)");

  adaslot::EvalArgs eval;
  auto* ceval = app.add_subcommand("eval", "evaluate a checkpoint on a dataset");
  ceval->add_option("--checkpoint", eval.checkpoint, "checkpoint file")
      ->required();
  ceval->add_option("--data", eval.data, "dataset path or *.spec.json")
      ->required();
  ceval->add_option("--out", eval.out_dir, "report output directory")
      ->required();
  ceval->add_option("--config", eval.config_path,
                    "run config (default: config.cfg beside the checkpoint)");
  ceval->add_flag("--fixed", eval.fixed, "keep all K_max slots (no selection)");
  ceval->add_option("--count", eval.count,
                    "held-out images (default: config eval_count)");

  adaslot::SweepArgs sweep;
  auto* csweep = app.add_subcommand("sweep", "train+eval across one ablation axis");
  csweep->add_option("--config", sweep.config_path, "base run config")
      ->required();
  csweep->add_option("--axis", sweep.axis, "lambda | kmax | decoder | gumbel")
      ->required();
  csweep->add_option("--values", sweep.values, "comma-separated axis values")
      ->required()
      ->delimiter(',');
  csweep->add_option("--seeds", sweep.seeds,
                     "comma-separated seed set (default: config seed)")
      ->delimiter(',');
  csweep->add_option("--out", sweep.out_dir, "sweep output directory")
      ->required();

  adaslot::ReportArgs report;
  auto* creport = app.add_subcommand("report", "merge run reports (mean +- std per config)");
  creport->add_option("--runs", report.runs_dir, "directory of run manifests")
      ->required();
  creport->add_option("--out", report.out_file, "merged CSV output file")
      ->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 1;
  }

  gen.seed_set = gen_seed->count() > 0;
  gen.count_set = gen_count->count() > 0;

  try {
    if (*cgen)
      adaslot::run_gen(gen, std::cout);
    else if (*ctrain)
      adaslot::run_train(train, std::cout);
    else if (*ceval)
      adaslot::run_eval(eval, std::cout);
    else if (*csweep)
      adaslot::run_sweep(sweep, std::cout);
    else if (*creport)
      adaslot::run_report(report, std::cout);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return adaslot::exit_code_for(e);
  }
  return 0;
}
