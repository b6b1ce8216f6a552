#pragma once

#include <cstdint>
#include <string>

namespace adaslot {

enum class Strategy { kZeroMask, kZeroSlot, kLearnableSlot };
enum class GumbelMode { kHard, kSoft };

std::string strategy_name(Strategy s);
Strategy strategy_from_name(const std::string& name);
std::string gumbel_mode_name(GumbelMode m);
GumbelMode gumbel_mode_from_name(const std::string& name);

// One flat run configuration; serialized as `key = value` lines with `#`
// comments.  Every field is addressable by its key.
struct RunConfig {
  // objective / selection
  double lambda = 0.05;
  std::int64_t k_max = 8;
  double tau = 1.0;
  Strategy decoder_strategy = Strategy::kZeroMask;
  GumbelMode gumbel_mode = GumbelMode::kHard;
  // optimization
  std::int64_t batch_size = 16;
  std::int64_t total_steps = 10000;
  std::int64_t warmup_steps = 500;
  double lr_base = 4e-4;
  std::int64_t lr_half_life_steps = 5000;
  double grad_clip_norm = 1.0;
  std::uint64_t seed = 1;
  std::int64_t phase1_steps = 2000;
  // data / cadence
  std::string dataset;
  std::int64_t eval_every = 1000;  // 0 = final eval only
  std::int64_t eval_count = 200;   // held-out images per eval
  // model dimensions
  std::int64_t patch_size = 8;
  std::int64_t d_feat = 64;
  std::int64_t enc_hidden = 64;
  std::int64_t d_slot = 64;
  std::int64_t sa_iters = 3;
  std::int64_t dec_hidden = 8;
  std::int64_t dec_pos = 8;
  double delta = 1e-8;
  // metrics
  double corloc_iou = 0.5;

  void validate() const;  // throws ConfigError
};

// Parse `key = value` text; unknown keys raise ConfigError naming the key.
RunConfig parse_config_text(const std::string& text);
RunConfig parse_config_file(const std::string& path);
// Apply a single "key=value" override.
void apply_override(RunConfig& cfg, const std::string& assignment);

// Canonical serialization (fixed key order, shortest round-trip floats).
std::string serialize_config(const RunConfig& cfg);
// FNV-1a over the canonical serialization.
std::uint64_t config_hash(const RunConfig& cfg);

}  // namespace adaslot
