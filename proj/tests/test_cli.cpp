#include <doctest.h>

#include <cstddef>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "vbsd/checkpoint.hpp"
#include "vbsd/cli.hpp"
#include "vbsd/config.hpp"
#include "vbsd/error.hpp"

using namespace vbsd;

namespace {

std::filesystem::path scratch_dir(const std::string& name) {
  std::filesystem::path p = std::filesystem::temp_directory_path() / "vbsd_cli_tests" / name;
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p;
}

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  REQUIRE(in.good());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::vector<std::string> lines_of(const std::string& text) {
  std::vector<std::string> out;
  std::istringstream ss(text);
  for (std::string line; std::getline(ss, line);) out.push_back(line);
  return out;
}

// A grid run small enough that full training finishes in well under a second.
const char* kTinyGrid = R"({
  "env": {"kind": "grid", "grid_side": 3, "inner_steps": 4, "inner_episodes": 2},
  "model": {"belief_dim": 3, "embed_hidden": [6], "embed_dim": 4, "conv_channels": 2,
            "ssm_layers": 1, "ssm_dim": 5, "head_hidden": [7]},
  "planner": {"horizon": 2, "particles": 4, "nested": 2, "resample_every": 2},
  "train": {"minibatch": 4, "sgd_steps": 2, "unroll_len": 8, "parallel_envs": 2,
            "burn_in": 3, "unroll_window": 2, "decode_window": 2, "k_elbo": 2,
            "iterations": 3},
  "checkpoint_interval": 2,
  "eval_episodes": 3,
  "seed": 11
})";

const char* kTinyFourier = R"({
  "env": {"kind": "fourier", "fourier_dim": 1, "inner_steps": 5},
  "model": {"belief_dim": 2, "embed_hidden": [5], "embed_dim": 3,
            "ssm_layers": 1, "ssm_dim": 4, "head_hidden": [6]},
  "planner": {"horizon": 2, "particles": 4, "nested": 2},
  "train": {"minibatch": 4, "sgd_steps": 2, "unroll_len": 5, "parallel_envs": 2,
            "burn_in": 3, "unroll_window": 2, "decode_window": 2, "k_elbo": 2,
            "iterations": 2},
  "eval_episodes": 2,
  "seed": 5
})";

}  // namespace

TEST_CASE("config: empty object resolves to the published grid defaults") {
  config::RunConfig rc = config::parse_config("{}");
  CHECK(rc.layout().kind == envs::Kind::Grid);
  CHECK(rc.layout().grid_side == 5);
  CHECK(rc.layout().inner_steps == 10);
  CHECK(rc.layout().inner_episodes == 6);
  CHECK(rc.train.plan.discount == 0.99);
  CHECK(rc.train.discount == 0.99);
  CHECK(rc.train.plan.resample_every == 2);
  CHECK(rc.train.plan.temperature == 0.1);
  CHECK(rc.train.plan.nested == 8);
  CHECK(rc.train.optimizer.learning_rate == 3e-3);
  CHECK(rc.train.optimizer.weight_decay == 1e-6);
  CHECK(rc.train.optimizer.clip_value == 1.0);
  CHECK(rc.train.optimizer.clip_norm == 1.0);
  CHECK(rc.train.loss.belief_kl_weight == 0.01);
  CHECK(rc.train.minibatch == 1024);
  CHECK(rc.train.sgd_steps == 32);
  CHECK(rc.train.td_lambda == 1.0);
  CHECK(rc.train.buffer_max_age == 16);
}

TEST_CASE("config: family defaults differ where the published table says so") {
  config::RunConfig g = config::parse_config(R"({"env": {"kind": "grid"}})");
  config::RunConfig f = config::parse_config(R"({"env": {"kind": "fourier"}})");
  CHECK(g.train.unroll_len == 128);
  CHECK(f.train.unroll_len == 64);
  CHECK(g.train.loss.burn_in == 12);
  CHECK(f.train.loss.burn_in == 8);
  CHECK(g.train.loss.unroll_window == 6);
  CHECK(f.train.loss.unroll_window == 4);
  CHECK(g.train.loss.decode_window == 6);
  CHECK(f.train.loss.decode_window == 4);
  CHECK(g.train.loss.c_ent == 0.1);
  CHECK(f.train.loss.c_ent == 3e-4);
  CHECK(f.layout().kind == envs::Kind::Fourier);
  CHECK(f.layout().fourier_dim == 1);
  CHECK(f.layout().inner_steps == 20);
  CHECK(f.layout().inner_episodes == 1);
  // shared defaults stay shared
  CHECK(g.train.loss.c_v == 0.5);
  CHECK(f.train.loss.c_v == 0.5);
  CHECK(g.train.plan.particles == f.train.plan.particles);
}

TEST_CASE("config: overrides land in the right fields") {
  config::RunConfig rc = config::parse_config(
      R"({"planner": {"particles": 64}, "train": {"learning_rate": 0.001}, "seed": 9})");
  CHECK(rc.train.plan.particles == 64);
  CHECK(rc.train.optimizer.learning_rate == 0.001);
  CHECK(rc.seed == 9);
}

TEST_CASE("config: malformed inputs fail with the offending key path") {
  CHECK_THROWS_WITH_AS(config::parse_config(R"({"planner": {"particles": "many"}})"),
                       doctest::Contains("planner.particles"), Error);
  CHECK_THROWS_WITH_AS(config::parse_config(R"({"planner": {"particles": -3}})"),
                       doctest::Contains("planner.particles"), Error);
  CHECK_THROWS_WITH_AS(config::parse_config(R"({"planner": {"particle": 4}})"),
                       doctest::Contains("unknown key planner.particle"), Error);
  CHECK_THROWS_WITH_AS(config::parse_config(R"({"env": {"kind": "maze"}})"),
                       doctest::Contains("env.kind"), Error);
  CHECK_THROWS_WITH_AS(config::parse_config("{\n  \"seed\": oops\n}"),
                       doctest::Contains("line 2"), Error);
  CHECK_THROWS_WITH_AS(config::load_config("/nonexistent/vbsd.json"),
                       doctest::Contains("cannot open"), Error);
}

TEST_CASE("config: validation rejects a loss window that cannot fit the meta episode") {
  // grid defaults have burn-in 12; a 3-step meta horizon cannot hold it
  CHECK_THROWS_AS(config::parse_config(
                      R"({"env": {"kind": "grid", "inner_steps": 3, "inner_episodes": 1}})"),
                  Error);
  CHECK_THROWS_WITH_AS(config::parse_config(R"({"train": {"sgd_steps": 0}})"),
                       doctest::Contains("SGD step"), Error);
}

TEST_CASE("config: load-dump-load round trip is exact") {
  config::RunConfig rc = config::parse_config(kTinyGrid);
  std::string text = config::dump(rc);
  config::RunConfig rc2 = config::parse_config(text);
  CHECK(config::to_json(rc) == config::to_json(rc2));
  CHECK(config::dump(rc2) == text);

  config::RunConfig rf = config::parse_config(kTinyFourier);
  CHECK(config::to_json(config::parse_config(config::dump(rf))) == config::to_json(rf));
}

TEST_CASE("cli: float formatting round-trips exactly") {
  for (double x : {0.1, 1.0 / 3.0, 3e-4, 1e-17, -2.5, 0.0})
    CHECK(std::stod(cli::fmt(x)) == x);
}

TEST_CASE("cli: train writes deterministic metrics, config provenance, checkpoints") {
  std::filesystem::path dir_a = scratch_dir("train_a");
  std::filesystem::path dir_b = scratch_dir("train_b");
  config::RunConfig rc = config::parse_config(kTinyGrid);

  rc.out_dir = dir_a.string();
  std::vector<std::string> logged;
  REQUIRE(cli::run_train(rc, [&](const std::string& s) { logged.push_back(s); }) == 0);
  rc.out_dir = dir_b.string();
  REQUIRE(cli::run_train(rc) == 0);

  std::string metrics = slurp(dir_a / "metrics.csv");
  std::vector<std::string> rows = lines_of(metrics);
  REQUIRE(rows.size() == rc.iterations + 1);
  CHECK(rows[0] ==
        "iteration,episodes,mean_return,mean_ess,mean_root_value,loss_total,loss_value,"
        "loss_policy,loss_belief_kl,loss_belief_decode,loss_belief_entropy,loss_policy_entropy");
  CHECK(rows[1].substr(0, 2) == "1,");
  CHECK(logged.size() == rc.iterations + 1);  // per-iteration line + summary

  // identical bytes for every deterministic artifact across reruns
  CHECK(metrics == slurp(dir_b / "metrics.csv"));
  CHECK(slurp(dir_a / "model.ckpt") == slurp(dir_b / "model.ckpt"));
  CHECK(slurp(dir_a / "checkpoint_000002.bin") == slurp(dir_b / "checkpoint_000002.bin"));
  CHECK(!std::filesystem::exists(dir_a / "checkpoint_000003.bin"));  // interval 2, 3 iterations

  // provenance config reloads to the same resolved run
  rc.out_dir = dir_a.string();
  config::RunConfig back = config::load_config((dir_a / "config.json").string());
  CHECK(config::to_json(back) == config::to_json(rc));
}

TEST_CASE("cli: saved checkpoint restores the trained parameters") {
  std::filesystem::path dir = scratch_dir("ckpt");
  config::RunConfig rc = config::parse_config(kTinyFourier);
  rc.out_dir = dir.string();
  REQUIRE(cli::run_train(rc) == 0);

  models::Model trained = cli::build_model(rc);
  checkpoint::load(trained.params(), (dir / "model.ckpt").string());
  models::Model fresh = cli::build_model(rc);
  Tensor a = trained.params().flatten(), b = fresh.params().flatten();
  REQUIRE(a.size() == b.size());
  bool moved = false;
  for (std::size_t i = 0; i < a.size(); ++i) moved |= a[i] != b[i];
  CHECK(moved);
}

TEST_CASE("cli: eval emits per-episode returns and grid occupancy fractions") {
  std::filesystem::path dir = scratch_dir("eval_grid");
  config::RunConfig rc = config::parse_config(kTinyGrid);
  rc.out_dir = (dir / "train").string();
  REQUIRE(cli::run_train(rc) == 0);
  std::string ckpt = rc.out_dir + "/model.ckpt";

  rc.out_dir = (dir / "eval").string();
  REQUIRE(cli::run_eval(rc, ckpt, false) == 0);

  std::vector<std::string> rows = lines_of(slurp(dir / "eval" / "returns.csv"));
  REQUIRE(rows.size() == rc.eval_episodes + 1);
  CHECK(rows[0] == "episode,steps,return");

  std::vector<std::string> occ = lines_of(slurp(dir / "eval" / "occupancy.csv"));
  const envs::MetaLayout& l = rc.layout();
  const std::size_t n_tiles = l.grid_side * l.grid_side;
  REQUIRE(occ.size() == l.inner_episodes * n_tiles + 1);
  CHECK(occ[0] == "inner_episode,tile,visit_fraction");
  std::vector<double> sums(l.inner_episodes, 0.0);
  for (std::size_t i = 1; i < occ.size(); ++i) {
    std::istringstream ss(occ[i]);
    std::size_t e, t;
    char c1, c2;
    double frac;
    ss >> e >> c1 >> t >> c2 >> frac;
    REQUIRE(e < l.inner_episodes);
    REQUIRE(t < n_tiles);
    CHECK(frac >= 0.0);
    sums[e] += frac;
  }
  for (double s : sums) CHECK(s == doctest::Approx(1.0).epsilon(1e-12));

  // same seed, second directory: identical bytes
  config::RunConfig rc2 = rc;
  rc2.out_dir = (dir / "eval2").string();
  REQUIRE(cli::run_eval(rc2, ckpt, false) == 0);
  CHECK(slurp(dir / "eval" / "returns.csv") == slurp(dir / "eval2" / "returns.csv"));
  CHECK(slurp(dir / "eval" / "occupancy.csv") == slurp(dir / "eval2" / "occupancy.csv"));
}

TEST_CASE("cli: fourier eval adds a cumulative-regret column and no occupancy file") {
  std::filesystem::path dir = scratch_dir("eval_fourier");
  config::RunConfig rc = config::parse_config(kTinyFourier);
  rc.out_dir = dir.string();
  REQUIRE(cli::run_eval(rc, "", true) == 0);  // random baseline needs no checkpoint
  std::vector<std::string> rows = lines_of(slurp(dir / "returns.csv"));
  REQUIRE(rows.size() == rc.eval_episodes + 1);
  CHECK(rows[0] == "episode,steps,return,cumulative_regret");
  CHECK(!std::filesystem::exists(dir / "occupancy.csv"));

  // regret column is non-negative: per-step rewards never exceed the task optimum
  for (std::size_t i = 1; i < rows.size(); ++i) {
    std::string last = rows[i].substr(rows[i].rfind(',') + 1);
    CHECK(std::stod(last) >= 0.0);
  }
}

TEST_CASE("cli: eval with a missing checkpoint reports the path") {
  config::RunConfig rc = config::parse_config(kTinyFourier);
  rc.out_dir = scratch_dir("eval_missing").string();
  CHECK_THROWS_WITH_AS(cli::run_eval(rc, "/nonexistent/model.ckpt", false),
                       doctest::Contains("cannot open"), Error);
}

TEST_CASE("cli: plan report is deterministic and readable") {
  std::filesystem::path dir = scratch_dir("plan");
  config::RunConfig rc = config::parse_config(kTinyGrid);
  std::string f1 = (dir / "report1.txt").string(), f2 = (dir / "report2.txt").string();
  std::vector<std::string> logged;
  REQUIRE(cli::run_plan_report(rc, "", 3, f1,
                               [&](const std::string& s) { logged.push_back(s); }) == 0);
  REQUIRE(cli::run_plan_report(rc, "", 3, f2) == 0);
  std::string report = slurp(f1);
  CHECK(report == slurp(f2));
  CHECK(report.find("root value:") != std::string::npos);
  CHECK(report.find("ess depth 0:") != std::string::npos);
  CHECK(report.find("action 0: probability") != std::string::npos);
  CHECK(report.find("warm steps: 3") != std::string::npos);
  REQUIRE(!logged.empty());
  CHECK(logged[0] == "plan report");

  // fourier reports weighted action samples instead of a dense distribution
  config::RunConfig rf = config::parse_config(kTinyFourier);
  std::string f3 = (dir / "report3.txt").string();
  REQUIRE(cli::run_plan_report(rf, "", 1, f3) == 0);
  CHECK(slurp(f3).find("sample 0: weight") != std::string::npos);
}

TEST_CASE("cli: oracle check passes at large particle counts and fails honestly at tiny ones") {
  std::vector<std::string> logged;
  CHECK(cli::run_oracle_check(1024, 3, 0.05,
                              [&](const std::string& s) { logged.push_back(s); }) == 0);
  REQUIRE(logged.size() == 2);
  CHECK(logged[0].find("mean TV") != std::string::npos);
  CHECK(logged[1] == "PASS oracle-check");
  CHECK(cli::run_oracle_check(4, 2, 1e-3) == 1);
  CHECK_THROWS_AS(cli::run_oracle_check(0, 1, 0.05), Error);
}

TEST_CASE("cli: gradcheck passes over every op and both miniature families") {
  std::vector<std::string> logged;
  CHECK(cli::run_gradcheck([&](const std::string& s) { logged.push_back(s); }) == 0);
  REQUIRE(!logged.empty());
  CHECK(logged.back() == "PASS gradcheck");
}
