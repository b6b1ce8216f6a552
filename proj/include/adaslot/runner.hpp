#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include "adaslot/config.hpp"
#include "adaslot/eval.hpp"

namespace adaslot {

// git-describe-style build version, e.g. "0.1.0-g543afa7".
const char* version_string();

// Exit-code policy: 0 success, 1 usage error, 2 data/format error,
// 3 numeric failure.
int exit_code_for(const std::exception& e);

// Worker cap from ADASLOT_THREADS (default 1 for determinism).
int worker_threads();

// Each command writes a manifest (config, seed, version, output paths)
// next to its artifacts; any artifact is reproducible from manifest alone.

struct GenArgs {
  std::string spec_path;  // empty = built-in default spec
  std::uint64_t seed = 1;
  std::int64_t count = 1000;
  bool seed_set = false;   // --seed given (overrides a spec-file seed)
  bool count_set = false;  // --count given (overrides a spec-file count)
  std::string out;
};
// Writes dataset + sidecar, prints a per-count histogram to `os`.
void run_gen(const GenArgs& a, std::ostream& os);

struct TrainArgs {
  std::string config_path;
  std::string out_dir;
  std::string resume;                  // checkpoint path; empty = fresh run
  std::vector<std::string> overrides;  // "key=value" config overrides
};
// Trains per config; writes log, checkpoints, and periodic metric reports.
// Returns the final held-out report.
MetricReport run_train(const TrainArgs& a, std::ostream& os);

struct EvalArgs {
  std::string checkpoint;
  std::string data;
  std::string out_dir;
  std::string config_path;  // empty = config.cfg next to the checkpoint
  bool fixed = false;       // keep all K_max slots instead of the MAP rule
  std::int64_t count = 0;   // held-out images; 0 = config eval_count
};
MetricReport run_eval(const EvalArgs& a, std::ostream& os);

struct SweepArgs {
  std::string config_path;
  std::string axis;                  // lambda | kmax | decoder | gumbel
  std::vector<std::string> values;   // axis values, one run per value/seed
  std::vector<std::uint64_t> seeds;  // shared seed set; empty = config seed
  std::string out_dir;
};
// One full train+eval per (value, seed) in its own subdirectory, then a
// consolidated CSV with one row per value (seed means).
void run_sweep(const SweepArgs& a, std::ostream& os);

struct ReportArgs {
  std::string runs_dir;
  std::string out_file;
};
// Merges run manifests under runs_dir: mean +- std over seeds per config,
// ordered by config hash.  Prints a plain-text summary table to `os`.
void run_report(const ReportArgs& a, std::ostream& os);

}  // namespace adaslot
