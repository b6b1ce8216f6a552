#include "adaslot/config.hpp"

#include <cstdio>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include "adaslot/errors.hpp"

namespace adaslot {
namespace {

std::string trim(const std::string& s) {
  std::size_t b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  std::size_t e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

double parse_double(const std::string& key, const std::string& v) {
  try {
    std::size_t used = 0;
    double x = std::stod(v, &used);
    if (used != v.size()) throw std::invalid_argument(v);
    return x;
  } catch (const std::exception&) {
    throw ConfigError("config: key '" + key + "' expects a number, got '" + v + "'");
  }
}

std::int64_t parse_int(const std::string& key, const std::string& v) {
  try {
    std::size_t used = 0;
    long long x = std::stoll(v, &used);
    if (used != v.size()) throw std::invalid_argument(v);
    return x;
  } catch (const std::exception&) {
    throw ConfigError("config: key '" + key + "' expects an integer, got '" + v + "'");
  }
}

std::uint64_t parse_uint(const std::string& key, const std::string& v) {
  try {
    std::size_t used = 0;
    unsigned long long x = std::stoull(v, &used);
    if (used != v.size() || (!v.empty() && v[0] == '-')) throw std::invalid_argument(v);
    return x;
  } catch (const std::exception&) {
    throw ConfigError("config: key '" + key + "' expects an unsigned integer, got '" + v + "'");
  }
}

std::string fmt(double x) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", x);
  return buf;
}

void set_key(RunConfig& cfg, const std::string& key, const std::string& value) {
  if (key == "lambda") cfg.lambda = parse_double(key, value);
  else if (key == "k_max") cfg.k_max = parse_int(key, value);
  else if (key == "tau") cfg.tau = parse_double(key, value);
  else if (key == "decoder_strategy") cfg.decoder_strategy = strategy_from_name(value);
  else if (key == "gumbel_mode") cfg.gumbel_mode = gumbel_mode_from_name(value);
  else if (key == "batch_size") cfg.batch_size = parse_int(key, value);
  else if (key == "total_steps") cfg.total_steps = parse_int(key, value);
  else if (key == "warmup_steps") cfg.warmup_steps = parse_int(key, value);
  else if (key == "lr_base") cfg.lr_base = parse_double(key, value);
  else if (key == "lr_half_life_steps") cfg.lr_half_life_steps = parse_int(key, value);
  else if (key == "grad_clip_norm") cfg.grad_clip_norm = parse_double(key, value);
  else if (key == "seed") cfg.seed = parse_uint(key, value);
  else if (key == "phase1_steps") cfg.phase1_steps = parse_int(key, value);
  else if (key == "dataset") cfg.dataset = value;
  else if (key == "eval_every") cfg.eval_every = parse_int(key, value);
  else if (key == "eval_count") cfg.eval_count = parse_int(key, value);
  else if (key == "patch_size") cfg.patch_size = parse_int(key, value);
  else if (key == "d_feat") cfg.d_feat = parse_int(key, value);
  else if (key == "enc_hidden") cfg.enc_hidden = parse_int(key, value);
  else if (key == "d_slot") cfg.d_slot = parse_int(key, value);
  else if (key == "sa_iters") cfg.sa_iters = parse_int(key, value);
  else if (key == "dec_hidden") cfg.dec_hidden = parse_int(key, value);
  else if (key == "dec_pos") cfg.dec_pos = parse_int(key, value);
  else if (key == "delta") cfg.delta = parse_double(key, value);
  else if (key == "corloc_iou") cfg.corloc_iou = parse_double(key, value);
  else throw ConfigError("config: unknown key '" + key + "'");
}

}  // namespace

std::string strategy_name(Strategy s) {
  switch (s) {
    case Strategy::kZeroMask: return "zero_mask";
    case Strategy::kZeroSlot: return "zero_slot";
    case Strategy::kLearnableSlot: return "learnable_slot";
  }
  throw ConfigError("config: bad strategy enum");
}

Strategy strategy_from_name(const std::string& name) {
  if (name == "zero_mask") return Strategy::kZeroMask;
  if (name == "zero_slot") return Strategy::kZeroSlot;
  if (name == "learnable_slot") return Strategy::kLearnableSlot;
  throw ConfigError("config: unknown decoder_strategy '" + name +
                    "' (expected zero_mask, zero_slot or learnable_slot)");
}

std::string gumbel_mode_name(GumbelMode m) {
  return m == GumbelMode::kHard ? "hard" : "soft";
}

GumbelMode gumbel_mode_from_name(const std::string& name) {
  if (name == "hard") return GumbelMode::kHard;
  if (name == "soft") return GumbelMode::kSoft;
  throw ConfigError("config: unknown gumbel_mode '" + name + "' (expected hard or soft)");
}

void RunConfig::validate() const {
  if (lambda < 0.0) throw ConfigError("config: lambda must be >= 0");
  if (k_max < 1) throw ConfigError("config: k_max must be >= 1");
  if (tau <= 0.0) throw ConfigError("config: tau must be > 0");
  if (batch_size < 1) throw ConfigError("config: batch_size must be >= 1");
  if (total_steps < 1) throw ConfigError("config: total_steps must be >= 1");
  if (warmup_steps < 1) throw ConfigError("config: warmup_steps must be >= 1");
  if (lr_base <= 0.0) throw ConfigError("config: lr_base must be > 0");
  if (lr_half_life_steps < 1) throw ConfigError("config: lr_half_life_steps must be >= 1");
  if (grad_clip_norm <= 0.0) throw ConfigError("config: grad_clip_norm must be > 0");
  if (phase1_steps < 0 || phase1_steps > total_steps)
    throw ConfigError("config: phase1_steps must be in [0, total_steps]");
  if (eval_every < 0) throw ConfigError("config: eval_every must be >= 0");
  if (eval_count < 1) throw ConfigError("config: eval_count must be >= 1");
  if (patch_size < 1) throw ConfigError("config: patch_size must be >= 1");
  if (enc_hidden < 1 || dec_hidden < 1)
    throw ConfigError("config: hidden widths must be >= 1");
  if (d_feat < 2 || d_slot < 2)
    throw ConfigError("config: d_feat and d_slot must be >= 2 (layernorm)");
  if (dec_pos < 2)
    throw ConfigError("config: dec_pos must be >= 2 (coordinate head)");
  if (sa_iters < 1) throw ConfigError("config: sa_iters must be >= 1");
  if (delta <= 0.0) throw ConfigError("config: delta must be > 0");
  if (corloc_iou <= 0.0 || corloc_iou > 1.0)
    throw ConfigError("config: corloc_iou must be in (0, 1]");
}

RunConfig parse_config_text(const std::string& text) {
  RunConfig cfg;
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    std::size_t hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    std::size_t eq = line.find('=');
    if (eq == std::string::npos)
      throw ConfigError("config: line " + std::to_string(lineno) + " is not 'key = value': '" +
                        line + "'");
    std::string key = trim(line.substr(0, eq));
    std::string value = trim(line.substr(eq + 1));
    if (key.empty()) throw ConfigError("config: empty key on line " + std::to_string(lineno));
    set_key(cfg, key, value);
  }
  cfg.validate();
  return cfg;
}

RunConfig parse_config_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("config: cannot open '" + path + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_config_text(ss.str());
}

void apply_override(RunConfig& cfg, const std::string& assignment) {
  std::size_t eq = assignment.find('=');
  if (eq == std::string::npos)
    throw ConfigError("config: override '" + assignment + "' is not key=value");
  set_key(cfg, trim(assignment.substr(0, eq)), trim(assignment.substr(eq + 1)));
}

std::string serialize_config(const RunConfig& cfg) {
  std::ostringstream out;
  out << "lambda = " << fmt(cfg.lambda) << "\n";
  out << "k_max = " << cfg.k_max << "\n";
  out << "tau = " << fmt(cfg.tau) << "\n";
  out << "decoder_strategy = " << strategy_name(cfg.decoder_strategy) << "\n";
  out << "gumbel_mode = " << gumbel_mode_name(cfg.gumbel_mode) << "\n";
  out << "batch_size = " << cfg.batch_size << "\n";
  out << "total_steps = " << cfg.total_steps << "\n";
  out << "warmup_steps = " << cfg.warmup_steps << "\n";
  out << "lr_base = " << fmt(cfg.lr_base) << "\n";
  out << "lr_half_life_steps = " << cfg.lr_half_life_steps << "\n";
  out << "grad_clip_norm = " << fmt(cfg.grad_clip_norm) << "\n";
  out << "seed = " << cfg.seed << "\n";
  out << "phase1_steps = " << cfg.phase1_steps << "\n";
  out << "dataset = " << cfg.dataset << "\n";
  out << "eval_every = " << cfg.eval_every << "\n";
  out << "eval_count = " << cfg.eval_count << "\n";
  out << "patch_size = " << cfg.patch_size << "\n";
  out << "d_feat = " << cfg.d_feat << "\n";
  out << "enc_hidden = " << cfg.enc_hidden << "\n";
  out << "d_slot = " << cfg.d_slot << "\n";
  out << "sa_iters = " << cfg.sa_iters << "\n";
  out << "dec_hidden = " << cfg.dec_hidden << "\n";
  out << "dec_pos = " << cfg.dec_pos << "\n";
  out << "delta = " << fmt(cfg.delta) << "\n";
  out << "corloc_iou = " << fmt(cfg.corloc_iou) << "\n";
  return out.str();
}

std::uint64_t config_hash(const RunConfig& cfg) {
  std::string s = serialize_config(cfg);
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  return h;
}

}  // namespace adaslot
