#include "adaslot/runner.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <ostream>
#include <sstream>
#include <thread>

#include "adaslot/container.hpp"
#include "adaslot/errors.hpp"
#include "adaslot/model.hpp"
#include "adaslot/scenegen.hpp"
#include "adaslot/train.hpp"
#include "json.hpp"

namespace adaslot {
namespace fs = std::filesystem;

namespace {

// Dataset identity when the config names no file: a fixed-seed default-spec
// source, shared across model seeds so multi-seed comparisons see one dataset.
constexpr std::uint64_t kDefaultDataSeed = 97;
constexpr std::int64_t kDefaultDataCount = 10000;

std::string fmt_num(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.12g", v);
  return buf;
}

std::string hex64(std::uint64_t x) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "0x%016llx", static_cast<unsigned long long>(x));
  return buf;
}

std::string read_text_file(const std::string& path, const char* what) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError(std::string(what) + ": cannot open '" + path + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_text_file(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw FormatError("cannot write '" + path + "'");
  out << text;
  if (!out) throw FormatError("short write to '" + path + "'");
}

// Manifest next to the artifacts; `outputs` are paths relative to it.
void write_manifest(const std::string& path, const std::string& command,
                    const std::vector<std::string>& outputs,
                    const nlohmann::json& extra) {
  nlohmann::json j = extra;
  j["command"] = command;
  j["version"] = version_string();
  j["outputs"] = outputs;
  write_text_file(path, j.dump(2) + "\n");
}

nlohmann::json config_fields(const RunConfig& cfg) {
  return {{"config", serialize_config(cfg)},
          {"config_hash", hex64(config_hash(cfg))},
          {"seed", cfg.seed}};
}

double parse_double_strict(const std::string& s) {
  std::size_t pos = 0;
  double v = 0.0;
  try {
    v = std::stod(s, &pos);
  } catch (const std::exception&) {
    pos = 0;
  }
  if (pos != s.size() || s.empty())
    throw UsageError("not a number: '" + s + "'");
  return v;
}

std::int64_t parse_int_strict(const std::string& s) {
  std::size_t pos = 0;
  long long v = 0;
  try {
    v = std::stoll(s, &pos);
  } catch (const std::exception&) {
    pos = 0;
  }
  if (pos != s.size() || s.empty())
    throw UsageError("not an integer: '" + s + "'");
  return v;
}

std::string sanitize_token(const std::string& s) {
  std::string out;
  for (char c : s)
    out += (std::isalnum(static_cast<unsigned char>(c)) || c == '.' ||
            c == '-' || c == '_')
               ? c
               : '_';
  return out;
}

SceneSource open_train_source(const RunConfig& cfg) {
  if (!cfg.dataset.empty()) return SceneSource::open(cfg.dataset);
  return SceneSource::from_spec(SceneSpec::defaults(), kDefaultDataSeed,
                                kDefaultDataCount);
}

std::int64_t checkpoint_step(const std::string& path) {
  const auto tensors = read_container(path);
  const NamedTensor* t = find_tensor(tensors, "trainer.step");
  if (!t || t->values.size() != 1)
    throw FormatError("checkpoint '" + path + "' has no step counter");
  return static_cast<std::int64_t>(t->values[0]);
}

// Drops log rows at or past the resume step so the appended continuation
// leaves no gap and no overlap.
void truncate_log(const std::string& path, std::int64_t resume_step) {
  std::ifstream in(path);
  if (!in) return;
  std::string line;
  std::vector<std::string> keep;
  bool header = true;
  while (std::getline(in, line)) {
    if (header) {
      keep.push_back(line);
      header = false;
      continue;
    }
    char* end = nullptr;
    const long long step = std::strtoll(line.c_str(), &end, 10);
    if (end != line.c_str() && *end == ',' && step < resume_step)
      keep.push_back(line);
  }
  in.close();
  std::string text;
  for (const auto& l : keep) text += l + "\n";
  write_text_file(path, text);
}

std::string eval_dir_name(std::int64_t step) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "eval_%06lld", static_cast<long long>(step));
  return buf;
}

void write_panels(const std::string& dir, ParamStore& store,
                  const RunConfig& cfg, const SceneSource& source,
                  std::int64_t count, bool fixed,
                  std::vector<std::string>& outputs,
                  const std::string& rel_prefix) {
  const std::int64_t n = std::min<std::int64_t>(8, count);
  for (std::int64_t i = 0; i < n; ++i) {
    char name[40];
    std::snprintf(name, sizeof(name), "side_by_side_%02lld.ppm",
                  static_cast<long long>(i));
    write_side_by_side(dir + "/" + name, store, cfg, source, i, fixed);
    outputs.push_back(rel_prefix + name);
  }
}

struct TrainOutcome {
  MetricReport report;
  StepStats last;
};

// One full training run into out_dir: canonical config, CSV log, checkpoints,
// periodic metric reports, final report + panels, manifest.
TrainOutcome train_one(const RunConfig& cfg, const SceneSource& source,
                       const std::string& out_dir, const std::string& resume,
                       std::ostream* os) {
  fs::create_directories(out_dir);
  write_text_file(out_dir + "/config.cfg", serialize_config(cfg));
  if (!resume.empty())
    truncate_log(out_dir + "/train_log.csv", checkpoint_step(resume));
  Trainer trainer(cfg, source, out_dir);
  if (!resume.empty()) trainer.load_checkpoint(resume);

  const std::string run_id = fs::path(out_dir).filename().string();
  std::vector<std::string> outputs = {"config.cfg", "train_log.csv"};
  TrainOutcome out;
  TrainHooks hooks;
  hooks.on_log = [&](const StepStats& st) {
    out.last = st;
    if (os && (st.step % 500 == 0 || st.step + 1 == cfg.total_steps)) {
      char buf[160];
      std::snprintf(buf, sizeof(buf),
                    "step %6lld  total %.6f  recon %.6f  reg %.4f  kept %.3f",
                    static_cast<long long>(st.step), st.total, st.recon, st.reg,
                    st.mean_kept);
      *os << buf << '\n';
    }
  };
  hooks.on_eval = [&](std::int64_t step, const std::string&) {
    // Keep-head is untouched until phase 2; evaluate the warm-start phase
    // with all slots kept, the selection phase with the MAP rule.
    const bool fixed = step <= cfg.phase1_steps;
    const MetricReport r =
        evaluate_model(trainer.params(), cfg, source, cfg.eval_count, fixed);
    const bool final = step == cfg.total_steps;
    const std::string sub = final ? "eval_final" : eval_dir_name(step);
    write_report(out_dir + "/" + sub, run_id, r);
    outputs.push_back(sub + "/metrics.csv");
    if (final) {
      write_panels(out_dir + "/" + sub, trainer.params(), cfg, source,
                   cfg.eval_count, fixed, outputs, sub + "/");
      out.report = r;
    }
  };
  trainer.run(hooks);

  std::vector<std::string> ckpts;
  for (const auto& e : fs::directory_iterator(out_dir)) {
    const std::string name = e.path().filename().string();
    if (name.rfind("ckpt_", 0) == 0) ckpts.push_back(name);
  }
  std::sort(ckpts.begin(), ckpts.end());
  outputs.insert(outputs.end(), ckpts.begin(), ckpts.end());

  nlohmann::json extra = config_fields(cfg);
  extra["report_csv"] = "eval_final/metrics.csv";
  if (!resume.empty()) extra["resumed_from"] = resume;
  write_manifest(out_dir + "/manifest.json", "train", outputs, extra);
  return out;
}

// ---- report helpers ------------------------------------------------------

struct MetricsRow {
  std::string header;
  std::vector<std::string> names;  // header columns minus run_id
  std::vector<double> values;
};

std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : line) {
    if (c == ',') {
      out.push_back(cur);
      cur.clear();
    } else if (c != '\r') {
      cur += c;
    }
  }
  out.push_back(cur);
  return out;
}

MetricsRow read_metrics_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw FormatError("report: cannot open metrics '" + path + "'");
  std::string header, row;
  if (!std::getline(in, header) || !std::getline(in, row))
    throw FormatError("report: truncated metrics '" + path + "'");
  MetricsRow m;
  m.header = header;
  auto cols = split_csv(header);
  auto vals = split_csv(row);
  if (cols.size() != vals.size() || cols.empty() || cols[0] != "run_id")
    throw FormatError("report: malformed metrics '" + path + "'");
  for (std::size_t i = 1; i < cols.size(); ++i) {
    m.names.push_back(cols[i]);
    m.values.push_back(std::strtod(vals[i].c_str(), nullptr));
  }
  return m;
}

// Mean and sample std over the finite entries; no finite entries -> NaN.
std::pair<double, double> finite_mean_std(const std::vector<double>& v) {
  double sum = 0.0;
  std::int64_t n = 0;
  for (double x : v)
    if (std::isfinite(x)) {
      sum += x;
      ++n;
    }
  if (n == 0)
    return {std::numeric_limits<double>::quiet_NaN(),
            std::numeric_limits<double>::quiet_NaN()};
  const double mean = sum / static_cast<double>(n);
  if (n < 2) return {mean, 0.0};
  double sq = 0.0;
  for (double x : v)
    if (std::isfinite(x)) sq += (x - mean) * (x - mean);
  return {mean, std::sqrt(sq / static_cast<double>(n - 1))};
}

constexpr const char* kStatNames[] = {
    "ari", "precision", "recall",          "f1",       "ami",      "nmi",
    "mbo", "corloc",    "purity",          "mean_kept_slots", "spearman",
    "count_acc"};

std::vector<double> stat_values(const MetricReport& r) {
  return {r.ari, r.precision, r.recall,    r.f1,       r.ami,      r.nmi,
          r.mbo, r.corloc,    r.purity,    r.mean_kept, r.spearman,
          r.count_acc};
}

}  // namespace

const char* version_string() {
#ifdef ADASLOT_VERSION
  return ADASLOT_VERSION;
#else
  return "0.1.0-unknown";
#endif
}

int exit_code_for(const std::exception& e) {
  if (dynamic_cast<const UsageError*>(&e)) return 1;
  if (dynamic_cast<const NumericError*>(&e)) return 3;
  return 2;
}

int worker_threads() {
  const char* env = std::getenv("ADASLOT_THREADS");
  if (!env || !*env) return 1;
  const long n = std::strtol(env, nullptr, 10);
  return n < 1 ? 1 : static_cast<int>(n);
}

void run_gen(const GenArgs& a, std::ostream& os) {
  SceneSpec spec;
  std::uint64_t seed = a.seed;
  std::int64_t count = a.count;
  if (a.spec_path.empty()) {
    spec = SceneSpec::defaults();
  } else {
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(read_text_file(a.spec_path, "gen"));
    } catch (const nlohmann::json::exception& e) {
      throw FormatError("gen: spec '" + a.spec_path + "': " + e.what());
    }
    // seed/count keys are optional in a hand-written spec; flags override.
    if (!j.contains("seed")) j["seed"] = a.seed;
    if (!j.contains("count")) j["count"] = a.count;
    std::uint64_t fseed = 0;
    std::int64_t fcount = 0;
    spec_from_json(j.dump(), spec, fseed, fcount);
    if (!a.seed_set) seed = fseed;
    if (!a.count_set) count = fcount;
  }
  if (count <= 0) throw UsageError("gen: empty dataset (--count must be >= 1)");

  write_dataset(spec, seed, count, a.out);
  const auto tensors = read_container(a.out);
  const NamedTensor* counts = find_tensor(tensors, "counts");
  if (!counts) throw FormatError("gen: dataset '" + a.out + "' lacks counts");
  std::map<int, std::int64_t> hist;
  for (double v : counts->values) ++hist[static_cast<int>(v)];
  os << "n_objects,images\n";
  for (const auto& [n, c] : hist) os << n << ',' << c << '\n';

  const std::string base = fs::path(a.out).filename().string();
  write_manifest(a.out + ".manifest.json", "gen",
                 {base, base + ".spec.json"},
                 {{"config", spec_to_json(spec, seed, count)},
                  {"seed", seed},
                  {"count", count}});
}

MetricReport run_train(const TrainArgs& a, std::ostream& os) {
  RunConfig cfg = parse_config_file(a.config_path);
  for (const auto& ov : a.overrides) apply_override(cfg, ov);
  cfg.validate();
  const SceneSource source = open_train_source(cfg);
  const TrainOutcome t = train_one(cfg, source, a.out_dir, a.resume, &os);
  os << "train: " << cfg.total_steps << " steps done, final total "
     << fmt_num(t.last.total) << ", mean kept " << fmt_num(t.last.mean_kept)
     << "; report in " << a.out_dir << "/eval_final\n";
  return t.report;
}

MetricReport run_eval(const EvalArgs& a, std::ostream& os) {
  std::string cfg_path = a.config_path;
  if (cfg_path.empty()) {
    cfg_path = (fs::path(a.checkpoint).parent_path() / "config.cfg").string();
    if (!fs::exists(cfg_path))
      throw ConfigError("eval: no config at '" + cfg_path +
                        "'; pass --config explicitly");
  }
  const RunConfig cfg = parse_config_file(cfg_path);
  const SceneSource source = SceneSource::open(a.data);
  ParamStore store;
  init_params(store, cfg, source.image_size(), cfg.seed);
  const std::int64_t step = load_checkpoint_file(a.checkpoint, store, cfg);
  const std::int64_t count = a.count > 0 ? a.count : cfg.eval_count;

  const MetricReport r = evaluate_model(store, cfg, source, count, a.fixed);
  fs::create_directories(a.out_dir);
  const std::string run_id = fs::path(a.out_dir).filename().string();
  write_report(a.out_dir, run_id, r);
  std::vector<std::string> outputs = {"metrics.csv", "detail.json",
                                      "heatmap.csv"};
  if (fs::exists(a.out_dir + "/heatmap.ppm")) outputs.push_back("heatmap.ppm");
  write_panels(a.out_dir, store, cfg, source, count, a.fixed, outputs, "");

  nlohmann::json extra = config_fields(cfg);
  extra["report_csv"] = "metrics.csv";
  extra["checkpoint"] = a.checkpoint;
  extra["checkpoint_step"] = step;
  extra["data"] = a.data;
  extra["fixed_slots"] = a.fixed;
  extra["eval_images"] = count;
  write_manifest(a.out_dir + "/manifest.json", "eval", outputs, extra);

  os << "eval: " << count << " images, ari " << fmt_num(r.ari) << ", f1 "
     << fmt_num(r.f1) << ", mean kept " << fmt_num(r.mean_kept)
     << ", count acc " << fmt_num(r.count_acc) << "\n";
  return r;
}

void run_sweep(const SweepArgs& a, std::ostream& os) {
  static const std::vector<std::string> kAxes = {"lambda", "kmax", "decoder",
                                                 "gumbel"};
  if (std::find(kAxes.begin(), kAxes.end(), a.axis) == kAxes.end())
    throw UsageError("sweep: unknown axis '" + a.axis +
                     "' (expected lambda|kmax|decoder|gumbel)");
  if (a.values.empty())
    throw UsageError("sweep: --values must list at least one value");

  const RunConfig base = parse_config_file(a.config_path);
  const std::vector<std::uint64_t> seeds =
      a.seeds.empty() ? std::vector<std::uint64_t>{base.seed} : a.seeds;

  struct SweepRun {
    RunConfig cfg;
    std::string dir;  // relative to out_dir
    std::size_t value_index;
  };
  std::vector<SweepRun> runs;
  for (std::size_t vi = 0; vi < a.values.size(); ++vi) {
    const std::string& v = a.values[vi];
    RunConfig cfg = base;
    try {
      if (a.axis == "lambda")
        cfg.lambda = parse_double_strict(v);
      else if (a.axis == "kmax")
        cfg.k_max = parse_int_strict(v);
      else if (a.axis == "decoder")
        cfg.decoder_strategy = strategy_from_name(v);
      else
        cfg.gumbel_mode = gumbel_mode_from_name(v);
    } catch (const std::exception&) {
      throw UsageError("sweep: bad " + a.axis + " value '" + v + "'");
    }
    for (std::uint64_t seed : seeds) {
      cfg.seed = seed;
      cfg.validate();
      SweepRun r{cfg,
                 a.axis + "_" + sanitize_token(v) + "_s" + std::to_string(seed),
                 vi};
      for (const auto& prev : runs)
        if (prev.dir == r.dir)
          throw UsageError("sweep: duplicate run '" + r.dir + "'");
      runs.push_back(std::move(r));
    }
  }

  fs::create_directories(a.out_dir);
  const SceneSource source = open_train_source(base);
  std::vector<TrainOutcome> results(runs.size());
  std::vector<std::exception_ptr> errors(runs.size());
  std::atomic<std::size_t> next{0};
  auto work = [&] {
    for (;;) {
      const std::size_t i = next.fetch_add(1);
      if (i >= runs.size()) break;
      try {
        results[i] = train_one(runs[i].cfg, source,
                               a.out_dir + "/" + runs[i].dir, "", nullptr);
      } catch (...) {
        errors[i] = std::current_exception();
      }
    }
  };
  const int nthreads =
      std::min<int>(worker_threads(), static_cast<int>(runs.size()));
  if (nthreads <= 1) {
    work();
  } else {
    std::vector<std::thread> pool;
    for (int t = 0; t < nthreads; ++t) pool.emplace_back(work);
    for (auto& t : pool) t.join();
  }
  for (const auto& e : errors)
    if (e) std::rethrow_exception(e);

  // One consolidated row per axis value: seed means of the headline metrics.
  std::string csv = "axis,value,seeds";
  for (const char* name : kStatNames) csv += std::string(",") + name;
  csv += "\n";
  for (std::size_t vi = 0; vi < a.values.size(); ++vi) {
    std::vector<std::vector<double>> cols(std::size(kStatNames));
    for (std::size_t i = 0; i < runs.size(); ++i) {
      if (runs[i].value_index != vi) continue;
      const auto vals = stat_values(results[i].report);
      for (std::size_t c = 0; c < vals.size(); ++c) cols[c].push_back(vals[c]);
    }
    csv += a.axis + "," + a.values[vi] + "," + std::to_string(seeds.size());
    for (const auto& col : cols) csv += "," + fmt_num(finite_mean_std(col).first);
    csv += "\n";
  }
  write_text_file(a.out_dir + "/sweep.csv", csv);

  std::vector<std::string> outputs = {"sweep.csv"};
  for (const auto& r : runs) outputs.push_back(r.dir);
  nlohmann::json extra = {{"config", serialize_config(base)},
                          {"config_hash", hex64(config_hash(base))},
                          {"seed", base.seed},
                          {"axis", a.axis},
                          {"values", a.values},
                          {"seeds", seeds}};
  write_manifest(a.out_dir + "/manifest.json", "sweep", outputs, extra);

  os << csv;
  os << "sweep: " << runs.size() << " runs in " << a.out_dir << "\n";
}

void run_report(const ReportArgs& a, std::ostream& os) {
  if (!fs::is_directory(a.runs_dir))
    throw FormatError("report: '" + a.runs_dir + "' is not a directory");
  std::vector<fs::path> manifests;
  for (const auto& e : fs::recursive_directory_iterator(a.runs_dir))
    if (e.is_regular_file() && e.path().filename() == "manifest.json")
      manifests.push_back(e.path());
  std::sort(manifests.begin(), manifests.end());

  struct Run {
    fs::path manifest;
    RunConfig cfg;
    MetricsRow metrics;
  };
  std::vector<Run> loaded;
  for (const auto& mpath : manifests) {
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(read_text_file(mpath.string(), "report"));
    } catch (const nlohmann::json::exception& e) {
      throw FormatError("report: manifest '" + mpath.string() + "': " +
                        e.what());
    }
    if (!j.contains("report_csv") || !j.contains("config")) continue;
    Run r;
    r.manifest = mpath;
    r.cfg = parse_config_text(j.at("config").get<std::string>());
    const fs::path csv =
        mpath.parent_path() / j.at("report_csv").get<std::string>();
    r.metrics = read_metrics_csv(csv.string());
    loaded.push_back(std::move(r));
  }
  if (loaded.empty())
    throw FormatError("report: no run manifests with metrics under '" +
                      a.runs_dir + "'");

  const std::string& schema = loaded.front().metrics.header;
  std::string offenders;
  for (const auto& r : loaded)
    if (r.metrics.header != schema)
      offenders += (offenders.empty() ? "" : ", ") + r.manifest.string();
  if (!offenders.empty())
    throw FormatError("report: schema mismatch across runs (baseline '" +
                      loaded.front().manifest.string() + "'): " + offenders);

  // Group by configuration-modulo-seed; order groups by that config hash.
  std::map<std::uint64_t, std::vector<const Run*>> groups;
  for (const auto& r : loaded) {
    RunConfig keyed = r.cfg;
    keyed.seed = 0;
    groups[config_hash(keyed)].push_back(&r);
  }

  const auto& names = loaded.front().metrics.names;
  std::string csv = "config_hash,lambda,k_max,tau,decoder,gumbel,n_runs";
  for (const auto& n : names) csv += "," + n + "_mean," + n + "_std";
  csv += "\n";
  std::string table =
      "config      lambda  k_max  decoder         gumbel  n  ari            "
      "f1             mean_kept      count_acc\n";
  for (const auto& [hash, members] : groups) {
    const RunConfig& c0 = members.front()->cfg;
    csv += hex64(hash) + "," + fmt_num(c0.lambda) + "," +
           std::to_string(c0.k_max) + "," + fmt_num(c0.tau) + "," +
           strategy_name(c0.decoder_strategy) + "," +
           gumbel_mode_name(c0.gumbel_mode) + "," +
           std::to_string(members.size());
    std::map<std::string, std::pair<double, double>> stats;
    for (std::size_t c = 0; c < names.size(); ++c) {
      std::vector<double> col;
      for (const Run* r : members) col.push_back(r->metrics.values[c]);
      const auto ms = finite_mean_std(col);
      csv += "," + fmt_num(ms.first) + "," + fmt_num(ms.second);
      stats[names[c]] = ms;
    }
    csv += "\n";

    auto cell = [&](const char* name) {
      const auto it = stats.find(name);
      if (it == stats.end()) return std::string(14, ' ');
      char buf[40];
      std::snprintf(buf, sizeof(buf), "%.3f+-%.3f", it->second.first,
                    it->second.second);
      std::string s = buf;
      s.resize(14, ' ');
      return s;
    };
    char head[96];
    std::snprintf(head, sizeof(head), "%08llx    %-6g  %-5lld  %-14s  %-6s  %zu  ",
                  static_cast<unsigned long long>(hash & 0xffffffffull),
                  c0.lambda, static_cast<long long>(c0.k_max),
                  strategy_name(c0.decoder_strategy).c_str(),
                  gumbel_mode_name(c0.gumbel_mode).c_str(), members.size());
    table += std::string(head) + cell("ari") + " " + cell("f1") + " " +
             cell("mean_kept_slots") + " " + cell("count_acc") + "\n";
  }

  write_text_file(a.out_file, csv);
  write_manifest(a.out_file + ".manifest.json", "report", {fs::path(a.out_file).filename().string()},
                 {{"runs_dir", a.runs_dir}, {"runs", loaded.size()}});
  os << table;
  os << "report: " << loaded.size() << " runs, " << groups.size()
     << " configs -> " << a.out_file << "\n";
}

}  // namespace adaslot
