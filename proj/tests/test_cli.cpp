#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "adaslot/config.hpp"
#include "adaslot/container.hpp"
#include "adaslot/errors.hpp"
#include "adaslot/runner.hpp"
#include "adaslot/scenegen.hpp"
#include "adaslot/train.hpp"
#include "json.hpp"

using namespace adaslot;
namespace fs = std::filesystem;

namespace {

SceneSpec mini_scenes() {
  SceneSpec s = SceneSpec::defaults();
  s.image_size = 16;
  s.n_min = 1;
  s.n_max = 2;
  s.r_min = 3.0;
  s.r_max = 5.0;
  return s;
}

RunConfig tiny_cfg(const std::string& dataset) {
  RunConfig c;
  c.k_max = 3;
  c.lambda = 0.2;
  c.batch_size = 2;
  c.total_steps = 6;
  c.phase1_steps = 2;
  c.warmup_steps = 2;
  c.lr_base = 1e-3;
  c.lr_half_life_steps = 500;
  c.seed = 11;
  c.dataset = dataset;
  c.eval_every = 0;
  c.eval_count = 3;
  c.patch_size = 4;
  c.d_feat = 8;
  c.enc_hidden = 16;
  c.d_slot = 8;
  c.sa_iters = 2;
  c.dec_hidden = 8;
  c.dec_pos = 4;
  return c;
}

std::string fresh_dir(const std::string& name) {
  const std::string d = (fs::temp_directory_path() / name).string();
  fs::remove_all(d);
  fs::create_directories(d);
  return d;
}

std::string write_file(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  REQUIRE(out.good());
  out << text;
  return path;
}

std::string write_spec(const std::string& dir, std::int64_t count = 40) {
  return write_file(dir + "/scenes.spec.json",
                    spec_to_json(mini_scenes(), 7, count) + "\n");
}

std::string write_config(const std::string& dir, const RunConfig& cfg) {
  return write_file(dir + "/run.cfg", serialize_config(cfg));
}

std::string slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  REQUIRE(in.good());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

bool same_bytes(const std::string& a, const std::string& b) {
  return slurp(a) == slurp(b);
}

// Splits histogram-style "k,v" CSV (skipping the header) into pairs.
std::vector<std::pair<long long, long long>> parse_pairs(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  std::vector<std::pair<long long, long long>> rows;
  bool header = true;
  while (std::getline(in, line)) {
    if (header || line.empty()) {
      header = false;
      continue;
    }
    const auto comma = line.find(',');
    if (comma == std::string::npos) break;  // trailing prose
    rows.emplace_back(std::stoll(line.substr(0, comma)),
                      std::stoll(line.substr(comma + 1)));
  }
  return rows;
}

std::vector<std::string> csv_lines(const std::string& path) {
  std::istringstream in(slurp(path));
  std::string line;
  std::vector<std::string> rows;
  while (std::getline(in, line))
    if (!line.empty()) rows.push_back(line);
  return rows;
}

int run_bin(const std::string& args, std::string* text = nullptr) {
  const std::string cap = (fs::temp_directory_path() / "cli_capture.txt").string();
  const std::string cmd = std::string(ADASLOT_BIN) + " " + args + " >" + cap + " 2>&1";
  const int status = std::system(cmd.c_str());
  if (text) *text = slurp(cap);
  if (status == -1) return -1;
  return WIFEXITED(status) ? WEXITSTATUS(status) : -2;
}

}  // namespace

TEST_CASE("gen: histogram sums to count and reruns are identical") {
  const std::string dir = fresh_dir("cli_gen");
  const std::string spec = write_spec(dir, 40);

  GenArgs a;
  a.spec_path = spec;
  a.out = dir + "/ds1";
  std::ostringstream os1;
  run_gen(a, os1);

  CHECK(fs::exists(dir + "/ds1"));
  CHECK(fs::exists(dir + "/ds1.spec.json"));
  CHECK(fs::exists(dir + "/ds1.manifest.json"));

  const auto rows = parse_pairs(os1.str());
  CHECK(!rows.empty());
  long long total = 0;
  for (const auto& [n, c] : rows) {
    CHECK(n >= 1);
    CHECK(n <= 2);
    total += c;
  }
  CHECK(total == 40);  // seed/count come from the spec file

  a.out = dir + "/ds2";
  std::ostringstream os2;
  run_gen(a, os2);
  CHECK(os1.str() == os2.str());
  CHECK(same_bytes(dir + "/ds1", dir + "/ds2"));
  CHECK(same_bytes(dir + "/ds1.spec.json", dir + "/ds2.spec.json"));

  // explicit flags beat the spec-file values
  a.out = dir + "/ds3";
  a.count = 10;
  a.count_set = true;
  std::ostringstream os3;
  run_gen(a, os3);
  long long total3 = 0;
  for (const auto& [n, c] : parse_pairs(os3.str())) total3 += c;
  CHECK(total3 == 10);

  const nlohmann::json m = nlohmann::json::parse(slurp(dir + "/ds1.manifest.json"));
  CHECK(m.at("command") == "gen");
  CHECK(m.at("seed") == 7);
  CHECK(m.at("count") == 40);
  CHECK(!m.at("version").get<std::string>().empty());
  for (const auto& p : m.at("outputs"))
    CHECK(fs::exists(dir + "/" + p.get<std::string>()));
}

TEST_CASE("gen: zero count is rejected as an empty dataset") {
  GenArgs a;
  a.out = (fs::temp_directory_path() / "cli_gen_zero").string();
  a.count = 0;
  a.count_set = true;
  std::ostringstream os;
  try {
    run_gen(a, os);
    FAIL("expected UsageError");
  } catch (const UsageError& e) {
    CHECK(std::string(e.what()).find("empty dataset") != std::string::npos);
  }
}

TEST_CASE("train: artifacts, manifest, and per-seed logs") {
  const std::string dir = fresh_dir("cli_train");
  const std::string spec = write_spec(dir);
  const std::string cfg_path = write_config(dir, tiny_cfg(spec));

  TrainArgs a;
  a.config_path = cfg_path;
  a.out_dir = dir + "/run1";
  std::ostringstream os;
  const MetricReport r = run_train(a, os);
  CHECK(r.n_images == 3);

  CHECK(fs::exists(a.out_dir + "/config.cfg"));
  CHECK(fs::exists(a.out_dir + "/ckpt_final.ckpt"));
  CHECK(fs::exists(a.out_dir + "/eval_final/metrics.csv"));
  CHECK(fs::exists(a.out_dir + "/eval_final/detail.json"));
  CHECK(fs::exists(a.out_dir + "/eval_final/side_by_side_00.ppm"));
  const auto log1 = csv_lines(a.out_dir + "/train_log.csv");
  REQUIRE(log1.size() == 7);  // header + 6 steps
  CHECK(log1[0] == "step,total,recon,reg,mean_kept_slots,lr");

  const nlohmann::json m = nlohmann::json::parse(slurp(a.out_dir + "/manifest.json"));
  CHECK(m.at("command") == "train");
  CHECK(m.at("seed") == 11);
  CHECK(m.at("report_csv") == "eval_final/metrics.csv");
  for (const auto& p : m.at("outputs"))
    CHECK(fs::exists(a.out_dir + "/" + p.get<std::string>()));
  const RunConfig echoed = parse_config_text(m.at("config").get<std::string>());
  CHECK(config_hash(echoed) == config_hash(tiny_cfg(spec)));

  // second seed: distinct log, same schema
  a.out_dir = dir + "/run2";
  a.overrides = {"seed=12"};
  std::ostringstream os2;
  run_train(a, os2);
  const auto log2 = csv_lines(a.out_dir + "/train_log.csv");
  REQUIRE(log2.size() == 7);
  CHECK(log2[0] == log1[0]);
  CHECK(log2[1] != log1[1]);

  // unknown override key names itself
  a.out_dir = dir + "/run3";
  a.overrides = {"sdeed=1"};
  std::ostringstream os3;
  try {
    run_train(a, os3);
    FAIL("expected ConfigError");
  } catch (const ConfigError& e) {
    CHECK(std::string(e.what()).find("sdeed") != std::string::npos);
  }
}

TEST_CASE("train: resume continues the log without a step gap") {
  const std::string ref_parent = fresh_dir("cli_resume_a");
  const std::string part_parent = fresh_dir("cli_resume_b");
  const std::string spec = write_spec(ref_parent);
  RunConfig cfg = tiny_cfg(spec);
  cfg.eval_every = 2;
  cfg.eval_count = 2;
  const std::string cfg_path = write_config(ref_parent, cfg);

  TrainArgs ref;
  ref.config_path = cfg_path;
  ref.out_dir = ref_parent + "/run";
  std::ostringstream os;
  run_train(ref, os);

  // simulate an interrupted session: 4 steps logged, checkpoint on disk
  const std::string part_dir = part_parent + "/run";
  const std::string ckpt = part_dir + "/ckpt_000004.ckpt";
  {
    const SceneSource source = SceneSource::open(spec);
    Trainer trainer(cfg, source, part_dir);
    for (int i = 0; i < 4; ++i) trainer.step_once();
    trainer.save_checkpoint(ckpt);
  }
  // plus a stale row past the checkpoint, as after a crash mid-step
  {
    std::ofstream log(part_dir + "/train_log.csv", std::ios::app);
    log << "4,9,9,9,9,9\n";
  }

  TrainArgs res;
  res.config_path = cfg_path;
  res.out_dir = part_dir;
  res.resume = ckpt;
  std::ostringstream os2;
  run_train(res, os2);

  const auto rows = csv_lines(part_dir + "/train_log.csv");
  REQUIRE(rows.size() == 7);
  for (int i = 0; i < 6; ++i)
    CHECK(rows[i + 1].substr(0, 2) == std::to_string(i) + ",");
  CHECK(same_bytes(part_dir + "/train_log.csv", ref.out_dir + "/train_log.csv"));
  CHECK(same_bytes(part_dir + "/eval_final/metrics.csv",
                   ref.out_dir + "/eval_final/metrics.csv"));
}

TEST_CASE("eval: identical outputs on reruns, mismatched config refused") {
  const std::string dir = fresh_dir("cli_eval");
  const std::string spec = write_spec(dir);
  RunConfig cfg = tiny_cfg(spec);
  cfg.total_steps = 4;
  const std::string cfg_path = write_config(dir, cfg);

  TrainArgs t;
  t.config_path = cfg_path;
  t.out_dir = dir + "/run";
  std::ostringstream os;
  run_train(t, os);

  EvalArgs e;
  e.checkpoint = t.out_dir + "/ckpt_final.ckpt";
  e.data = spec;
  e.count = 5;
  fs::create_directories(dir + "/a");
  fs::create_directories(dir + "/b");
  e.out_dir = dir + "/a/report";
  std::ostringstream os1;
  const MetricReport r1 = run_eval(e, os1);
  CHECK(r1.n_images == 5);
  e.out_dir = dir + "/b/report";
  std::ostringstream os2;
  run_eval(e, os2);
  CHECK(os1.str() == os2.str());
  for (const char* f : {"metrics.csv", "detail.json", "heatmap.csv",
                        "side_by_side_00.ppm", "side_by_side_04.ppm"})
    CHECK(same_bytes(dir + "/a/report/" + std::string(f),
                     dir + "/b/report/" + std::string(f)));

  // fixed evaluation keeps every slot
  e.out_dir = dir + "/a/fixed";
  e.fixed = true;
  std::ostringstream os3;
  const MetricReport rf = run_eval(e, os3);
  CHECK(rf.mean_kept == doctest::Approx(3.0));

  // doctored config (different k_max) must be refused
  RunConfig wrong = cfg;
  wrong.k_max = 4;
  const std::string wrong_path = write_file(dir + "/wrong.cfg", serialize_config(wrong));
  e.out_dir = dir + "/a/bad";
  e.config_path = wrong_path;
  std::ostringstream os4;
  try {
    run_eval(e, os4);
    FAIL("expected ConfigError");
  } catch (const ConfigError& err) {
    CHECK(std::string(err.what()).find("config hash") != std::string::npos);
  }
}

TEST_CASE("sweep: one row per value, worker count does not change results") {
  const std::string dir = fresh_dir("cli_sweep");
  const std::string spec = write_spec(dir);
  RunConfig cfg = tiny_cfg(spec);
  cfg.total_steps = 4;
  const std::string cfg_path = write_config(dir, cfg);

  SweepArgs s;
  s.config_path = cfg_path;
  s.axis = "gumbel";
  s.values = {"hard", "soft"};
  s.seeds = {3, 4};
  s.out_dir = dir + "/sw1";
  std::ostringstream os1;
  run_sweep(s, os1);

  const auto rows = csv_lines(dir + "/sw1/sweep.csv");
  REQUIRE(rows.size() == 3);  // header + one row per value
  CHECK(rows[0].substr(0, 17) == "axis,value,seeds,");
  CHECK(rows[1].substr(0, 14) == "gumbel,hard,2,");
  CHECK(rows[2].substr(0, 14) == "gumbel,soft,2,");
  for (const char* run : {"gumbel_hard_s3", "gumbel_hard_s4", "gumbel_soft_s3",
                          "gumbel_soft_s4"}) {
    CHECK(fs::exists(dir + "/sw1/" + std::string(run) + "/manifest.json"));
    CHECK(fs::exists(dir + "/sw1/" + std::string(run) + "/eval_final/metrics.csv"));
  }

  // same sweep under two workers: byte-identical artifacts
  setenv("ADASLOT_THREADS", "2", 1);
  s.out_dir = dir + "/sw2";
  std::ostringstream os2;
  run_sweep(s, os2);
  unsetenv("ADASLOT_THREADS");
  CHECK(same_bytes(dir + "/sw1/sweep.csv", dir + "/sw2/sweep.csv"));
  CHECK(same_bytes(dir + "/sw1/gumbel_soft_s4/train_log.csv",
                   dir + "/sw2/gumbel_soft_s4/train_log.csv"));
  CHECK(same_bytes(dir + "/sw1/gumbel_soft_s4/eval_final/metrics.csv",
                   dir + "/sw2/gumbel_soft_s4/eval_final/metrics.csv"));

  SweepArgs bad = s;
  bad.out_dir = dir + "/sw3";
  bad.axis = "bogus";
  std::ostringstream os3;
  CHECK_THROWS_AS(run_sweep(bad, os3), UsageError);

  bad.axis = "decoder";
  bad.values = {"zero_mask", "bogus"};
  try {
    run_sweep(bad, os3);
    FAIL("expected UsageError");
  } catch (const UsageError& e) {
    CHECK(std::string(e.what()).find("bogus") != std::string::npos);
  }
}

TEST_CASE("report: seed grouping, hash ordering, and schema errors") {
  const std::string dir = fresh_dir("cli_report");
  const std::string spec = write_spec(dir);
  RunConfig cfg = tiny_cfg(spec);
  cfg.total_steps = 4;
  const std::string cfg_path = write_config(dir, cfg);

  SweepArgs s;
  s.config_path = cfg_path;
  s.axis = "lambda";
  s.values = {"0.1", "0.4"};
  s.seeds = {3, 4};
  s.out_dir = dir + "/sw";
  std::ostringstream os;
  run_sweep(s, os);

  ReportArgs rep;
  rep.runs_dir = dir + "/sw";
  rep.out_file = dir + "/merged.csv";
  std::ostringstream os1;
  run_report(rep, os1);
  CHECK(os1.str().find("config") != std::string::npos);

  const auto rows = csv_lines(dir + "/merged.csv");
  REQUIRE(rows.size() == 3);  // header + one row per lambda
  CHECK(rows[0].substr(0, 12) == "config_hash,");
  CHECK(rows[0].find("ari_mean,ari_std") != std::string::npos);
  CHECK(rows[1] < rows[2]);  // ordered by config hash
  for (std::size_t i = 1; i < rows.size(); ++i) {
    const auto cols = [&] {
      std::vector<std::string> c;
      std::istringstream ss(rows[i]);
      std::string tok;
      while (std::getline(ss, tok, ',')) c.push_back(tok);
      return c;
    }();
    CHECK(cols[6] == "2");  // n_runs: two seeds merged per config
    const double lam = std::stod(cols[1]);
    CHECK((lam == 0.1 || lam == 0.4));
  }

  // rerun -> identical merged file
  rep.out_file = dir + "/merged2.csv";
  std::ostringstream os2;
  run_report(rep, os2);
  CHECK(slurp(dir + "/merged.csv") == slurp(dir + "/merged2.csv"));

  // empty directory
  ReportArgs empty;
  empty.runs_dir = fresh_dir("cli_report_empty");
  empty.out_file = dir + "/none.csv";
  std::ostringstream os3;
  CHECK_THROWS_AS(run_report(empty, os3), FormatError);

  // corrupt one run's metrics header -> named in the schema error
  const std::string victim = dir + "/sw/lambda_0.4_s4";
  std::string text = slurp(victim + "/eval_final/metrics.csv");
  text.replace(text.find("ari"), 3, "arX");
  write_file(victim + "/eval_final/metrics.csv", text);
  std::ostringstream os4;
  try {
    run_report(rep, os4);
    FAIL("expected FormatError");
  } catch (const FormatError& e) {
    CHECK(std::string(e.what()).find("schema mismatch") != std::string::npos);
    CHECK(std::string(e.what()).find("lambda_0.4_s4") != std::string::npos);
  }
}

TEST_CASE("exit codes: usage 1, data 2, numeric 3") {
  CHECK(exit_code_for(UsageError("x")) == 1);
  CHECK(exit_code_for(ConfigError("x")) == 2);
  CHECK(exit_code_for(FormatError("x")) == 2);
  CHECK(exit_code_for(ShapeError("x")) == 2);
  CHECK(exit_code_for(GenerationError("x")) == 2);
  CHECK(exit_code_for(NumericError("x")) == 3);

  const std::string dir = fresh_dir("cli_codes");
  std::string out;
  CHECK(run_bin("--help", &out) == 0);
  CHECK(out.find("gen") != std::string::npos);
  CHECK(run_bin("--version", &out) == 0);
  CHECK(out.find("0.1.0-g") != std::string::npos);

  CHECK(run_bin("", &out) == 1);  // missing subcommand
  CHECK(run_bin("gen --count 0 --out " + dir + "/d", &out) == 1);
  CHECK(out.find("empty dataset") != std::string::npos);

  write_file(dir + "/bad.cfg", "k_max = 3\nsdeed = 1\n");
  CHECK(run_bin("train --config " + dir + "/bad.cfg --out " + dir + "/r", &out) == 2);
  CHECK(out.find("sdeed") != std::string::npos);

  write_file(dir + "/ok.cfg", "total_steps = 2\n");
  CHECK(run_bin("sweep --config " + dir + "/ok.cfg --axis bogus --values 1 --out " +
                    dir + "/s",
                &out) == 1);

  fs::create_directories(dir + "/empty");
  CHECK(run_bin("report --runs " + dir + "/empty --out " + dir + "/m.csv",
                &out) == 2);
}
