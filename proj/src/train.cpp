#include "adaslot/train.hpp"

#if defined(__GLIBC__)
#include <malloc.h>
#endif

#include <cmath>
#include <cstdio>
#include <filesystem>

#include "adaslot/errors.hpp"
#include "adaslot/rng.hpp"

namespace adaslot {
namespace {

std::pair<double, double> split_u64(std::uint64_t x) {
  return {static_cast<double>(static_cast<std::uint32_t>(x)),
          static_cast<double>(static_cast<std::uint32_t>(x >> 32))};
}

std::uint64_t join_u64(double lo, double hi) {
  return static_cast<std::uint64_t>(lo) |
         (static_cast<std::uint64_t>(hi) << 32);
}

double scalar_entry(const std::vector<NamedTensor>& ts, const std::string& name) {
  const NamedTensor* t = find_tensor(ts, name);
  if (!t || t->values.size() != 1)
    throw FormatError("checkpoint: missing scalar entry '" + name + "'");
  return t->values[0];
}

std::string hex64(std::uint64_t x) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "0x%016llx", static_cast<unsigned long long>(x));
  return buf;
}

}  // namespace

double lr_at(const RunConfig& cfg, std::int64_t t) {
  const double warm =
      std::min(static_cast<double>(t) / static_cast<double>(cfg.warmup_steps), 1.0);
  const double past =
      std::max(static_cast<double>(t - cfg.warmup_steps), 0.0);
  return cfg.lr_base * warm *
         std::exp2(-past / static_cast<double>(cfg.lr_half_life_steps));
}

void adam_update(Param& p, const std::vector<double>& grad, double lr,
                 std::int64_t t1, double beta1, double beta2, double eps) {
  if (grad.size() != p.value.size())
    throw ShapeError("adam_update: grad size mismatch for '" + p.name + "'");
  if (t1 < 1) throw ContractError("adam_update: step count must be >= 1");
  const double c1 = 1.0 - std::pow(beta1, static_cast<double>(t1));
  const double c2 = 1.0 - std::pow(beta2, static_cast<double>(t1));
  for (std::size_t i = 0; i < p.value.size(); ++i) {
    const double g = grad[i];
    p.m[i] = beta1 * p.m[i] + (1.0 - beta1) * g;
    p.v[i] = beta2 * p.v[i] + (1.0 - beta2) * g * g;
    const double mhat = p.m[i] / c1;
    const double vhat = p.v[i] / c2;
    p.value[i] -= lr * mhat / (std::sqrt(vhat) + eps);
  }
}

double clip_global_norm(const std::vector<std::vector<double>*>& grads,
                        double max_norm) {
  if (max_norm <= 0.0) throw ContractError("clip_global_norm: max_norm must be > 0");
  double sq = 0.0;
  for (const auto* g : grads)
    for (double x : *g) sq += x * x;
  const double norm = std::sqrt(sq);
  if (norm > max_norm) {
    const double s = max_norm / norm;
    for (auto* g : grads)
      for (double& x : *g) x *= s;
  }
  return norm;
}

void save_checkpoint_file(const std::string& path, const ParamStore& store,
                          const RunConfig& cfg, std::int64_t step) {
  auto tensors = store.to_tensors(true);
  auto push1 = [&tensors](const std::string& name, double v) {
    tensors.push_back({name, {1}, {v}});
  };
  push1("trainer.step", static_cast<double>(step));
  const auto [slo, shi] = split_u64(cfg.seed);
  push1("trainer.seed_lo", slo);
  push1("trainer.seed_hi", shi);
  const auto [hlo, hhi] = split_u64(config_hash(cfg));
  push1("trainer.config_hash_lo", hlo);
  push1("trainer.config_hash_hi", hhi);
  write_container(path, tensors);
}

std::int64_t load_checkpoint_file(const std::string& path, ParamStore& store,
                                  const RunConfig& cfg) {
  const auto tensors = read_container(path);
  const std::uint64_t stored = join_u64(scalar_entry(tensors, "trainer.config_hash_lo"),
                                        scalar_entry(tensors, "trainer.config_hash_hi"));
  const std::uint64_t want = config_hash(cfg);
  if (stored != want)
    throw ConfigError("checkpoint '" + path + "' was written with config hash " +
                      hex64(stored) + " but the run config hashes to " +
                      hex64(want) + "; refusing to load");
  store.load_tensors(tensors);
  return static_cast<std::int64_t>(scalar_entry(tensors, "trainer.step"));
}

Trainer::Trainer(const RunConfig& cfg, const SceneSource& source,
                 std::string out_dir)
    : cfg_(cfg), source_(&source), out_dir_(std::move(out_dir)) {
  cfg_.validate();
  // Step graphs churn through multi-megabyte buffers; keep them on the
  // malloc free lists instead of cycling mmap/munmap (and the page faults
  // that come with it) every step.
#if defined(__GLIBC__)
  mallopt(M_MMAP_THRESHOLD, 64 << 20);
#endif
  hw_ = source.image_size();
  init_params(store_, cfg_, hw_, cfg_.seed);
  if (!out_dir_.empty()) {
    std::filesystem::create_directories(out_dir_);
    const std::string path = out_dir_ + "/train_log.csv";
    const bool fresh = !std::filesystem::exists(path) ||
                       std::filesystem::file_size(path) == 0;
    log_.open(path, std::ios::app);
    if (!log_) throw FormatError("train: cannot open log '" + path + "'");
    if (fresh) log_ << "step,total,recon,reg,mean_kept_slots,lr\n";
  }
}

StepStats Trainer::step_once() {
  const std::int64_t t = step_;
  if (t >= cfg_.total_steps)
    throw ContractError("train: all " + std::to_string(cfg_.total_steps) +
                        " steps already taken");
  const bool phase1 = t < cfg_.phase1_steps;
  const KeepRule rule = phase1 ? KeepRule::kOnes
                        : cfg_.gumbel_mode == GumbelMode::kHard
                            ? KeepRule::kSample
                            : KeepRule::kSoft;
  const double lam = phase1 ? 0.0 : cfg_.lambda;
  const double inv_b = 1.0 / static_cast<double>(cfg_.batch_size);
  const std::uint64_t batch_strm = rng::stream("train.batch");
  const std::uint64_t noise_strm = rng::stream("train.noise");

  StepGraph g(store_);
  StepStats st;
  st.step = t;
  for (std::int64_t j = 0; j < cfg_.batch_size; ++j) {
    const std::uint64_t idx =
        rng::below(cfg_.seed, rng::substream(batch_strm, t, j), 0,
                   static_cast<std::uint64_t>(source_->count()));
    const SceneSample scene = source_->get(static_cast<std::int64_t>(idx));
    const SlotNoise noise =
        draw_noise(cfg_, cfg_.seed, rng::substream(noise_strm, t, j));
    const Forward f = forward_image(g, cfg_, hw_, scene.image, noise, rule);
    const Tensor total_i =
        phase1 ? f.recon : add(f.recon, scale(f.reg, lam));
    backward(scale(total_i, inv_b));  // frees per-image graph on scope exit
    st.total += total_i.item();
    st.recon += f.recon.item();
    st.reg += f.reg.item();
    for (double z : f.z.values()) st.mean_kept += z;
  }
  st.total *= inv_b;
  st.recon *= inv_b;
  st.reg *= inv_b;
  st.mean_kept *= inv_b;
  if (!std::isfinite(st.total))
    throw NumericError("train: non-finite loss at step " + std::to_string(t));

  std::vector<std::vector<double>*> grads;
  grads.reserve(g.used().size());
  for (const auto& [param, leaf] : g.used())
    grads.push_back(&leaf.node()->grad_buf());
  st.grad_norm = clip_global_norm(grads, cfg_.grad_clip_norm);
  st.lr = lr_at(cfg_, t);
  for (const auto& [param, leaf] : g.used())
    adam_update(*param, leaf.node()->grad_buf(), st.lr, t + 1);
  step_ = t + 1;
  log_row(st);
  return st;
}

void Trainer::log_row(const StepStats& s) {
  if (!log_.is_open()) return;
  char buf[192];
  std::snprintf(buf, sizeof(buf), "%lld,%.12g,%.12g,%.12g,%.12g,%.12g",
                static_cast<long long>(s.step), s.total, s.recon, s.reg,
                s.mean_kept, s.lr);
  log_ << buf << '\n';
  log_.flush();
}

void Trainer::run(const TrainHooks& hooks) {
  while (step_ < cfg_.total_steps) {
    const StepStats st = step_once();
    if (hooks.on_log) hooks.on_log(st);
    const std::int64_t done = step_;
    const bool final = done == cfg_.total_steps;
    const bool cadence = cfg_.eval_every > 0 && done % cfg_.eval_every == 0;
    if (!final && !cadence) continue;
    std::string path;
    if (!out_dir_.empty()) {
      if (cadence) {
        char name[48];
        std::snprintf(name, sizeof(name), "/ckpt_%06lld.ckpt",
                      static_cast<long long>(done));
        path = out_dir_ + name;
        save_checkpoint(path);
      }
      if (final) {
        path = out_dir_ + "/ckpt_final.ckpt";
        save_checkpoint(path);
      }
    }
    if (hooks.on_eval) hooks.on_eval(done, path);
  }
}

void Trainer::save_checkpoint(const std::string& path) const {
  save_checkpoint_file(path, store_, cfg_, step_);
}

void Trainer::load_checkpoint(const std::string& path) {
  step_ = load_checkpoint_file(path, store_, cfg_);
}

}  // namespace adaslot
