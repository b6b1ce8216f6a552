#pragma once

#include <cstdint>
#include <fstream>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "adaslot/config.hpp"
#include "adaslot/model.hpp"
#include "adaslot/params.hpp"
#include "adaslot/scenegen.hpp"

namespace adaslot {

// lr(t) = lr_base * min(t / warmup, 1) * 2^(-max(t - warmup, 0) / half_life).
// t counts completed steps, so lr(0) = 0 under warmup.
double lr_at(const RunConfig& cfg, std::int64_t t);

// One bias-corrected Adam update in place; t1 is the 1-based step count.
void adam_update(Param& p, const std::vector<double>& grad, double lr,
                 std::int64_t t1, double beta1 = 0.9, double beta2 = 0.999,
                 double eps = 1e-8);

// Scales the referenced buffers so their joint L2 norm is at most max_norm.
// Returns the pre-clip norm.
double clip_global_norm(const std::vector<std::vector<double>*>& grads,
                        double max_norm);

// Checkpoint = parameter tensors + Adam moments + step counter + seed +
// config hash (stored as exact 32-bit halves).
void save_checkpoint_file(const std::string& path, const ParamStore& store,
                          const RunConfig& cfg, std::int64_t step);
// Refuses a config-hash mismatch, printing both hashes; otherwise loads
// values and moments and returns the stored step counter.
std::int64_t load_checkpoint_file(const std::string& path, ParamStore& store,
                                  const RunConfig& cfg);

struct StepStats {
  std::int64_t step = 0;  // 0-based index of the step just executed
  double total = 0.0;
  double recon = 0.0;
  double reg = 0.0;
  double mean_kept = 0.0;  // batch mean of sum(Z)
  double lr = 0.0;
  double grad_norm = 0.0;  // pre-clip global norm
};

struct TrainHooks {
  std::function<void(const StepStats&)> on_log;
  // Fired at the eval cadence and after the final step, once the checkpoint
  // for that step is on disk (path empty when no out dir is configured).
  std::function<void(std::int64_t step, const std::string& ckpt_path)> on_eval;
};

// Two-phase optimization loop.  Phase 1 (step < phase1_steps) trains the
// fixed-slot model: Z forced to ones, regularizer disabled.  Phase 2 enables
// sampling (per gumbel_mode) and the lambda term.
class Trainer {
 public:
  // out_dir may be empty: no CSV log or checkpoint files are written.
  Trainer(const RunConfig& cfg, const SceneSource& source, std::string out_dir);

  StepStats step_once();
  void run(const TrainHooks& hooks = {});

  void save_checkpoint(const std::string& path) const;
  void load_checkpoint(const std::string& path);

  ParamStore& params() { return store_; }
  const ParamStore& params() const { return store_; }
  const RunConfig& config() const { return cfg_; }
  std::int64_t step() const { return step_; }
  std::int64_t image_hw() const { return hw_; }

 private:
  void log_row(const StepStats& s);

  RunConfig cfg_;
  const SceneSource* source_;
  std::string out_dir_;
  std::int64_t hw_ = 0;
  ParamStore store_;
  std::int64_t step_ = 0;
  std::ofstream log_;
};

}  // namespace adaslot
