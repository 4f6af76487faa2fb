#include <cstdint>
#include <cstdio>
#include <string>

#include <CLI11.hpp>

#include "vbsd/cli.hpp"
#include "vbsd/config.hpp"

namespace {

struct Args {
  std::string config, out, checkpoint, report;
  std::uint64_t seed = 0;
  std::size_t iterations = 0, episodes = 0, steps = 0, particles = 4096, runs = 20;
  bool random = false, print_config = false;
};

bool given(const CLI::App* sub, const std::string& name) {
  const CLI::Option* o = sub->get_option_no_throw(name);
  return o != nullptr && o->count() > 0;
}

}  // namespace

int main(int argc, char** argv) {
  Args a;
  CLI::App app{"variational Bayes-adaptive sequential Monte-Carlo planner"};
  app.require_subcommand(1);

  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", a.config, "JSON config file (defaults: grid family)");
    sub->add_option("--seed", a.seed, "seed override");
    sub->add_option("--out", a.out, "output directory override");
    sub->add_flag("--print-config", a.print_config, "dump the resolved config and exit");
  };

  CLI::App* train = app.add_subcommand("train", "run training; writes metrics.csv + checkpoints");
  add_common(train);
  train->add_option("--iterations", a.iterations, "iteration count override");

  CLI::App* eval =
      app.add_subcommand("eval", "roll episodes; writes returns.csv (+ grid occupancy.csv)");
  add_common(eval);
  eval->add_option("--checkpoint", a.checkpoint, "trained parameters to load");
  eval->add_option("--episodes", a.episodes, "episode count override");
  eval->add_flag("--random", a.random, "uniform-random baseline instead of the planner");

  CLI::App* plan = app.add_subcommand("plan", "one planner call after a warm-up, readable report");
  add_common(plan);
  plan->add_option("--checkpoint", a.checkpoint, "trained parameters to load");
  plan->add_option("--steps", a.steps, "warm-up steps before the reported plan");
  plan->add_option("--report", a.report, "also write the report to this file");

  CLI::App* oracle = app.add_subcommand(
      "oracle-check", "planner vs exact tilted policy on the two-arm guessing bandit");
  oracle->add_option("--particles", a.particles, "root particle count");
  oracle->add_option("--runs", a.runs, "independent seeds to average over");

  CLI::App* gradcheck =
      app.add_subcommand("gradcheck", "finite differences over every op and the full loss");

  CLI11_PARSE(app, argc, argv);
  auto log = [](const std::string& line) { std::puts(line.c_str()); };

  try {
    if (gradcheck->parsed()) return vbsd::cli::run_gradcheck(log);
    if (oracle->parsed()) return vbsd::cli::run_oracle_check(a.particles, a.runs, 0.05, log);
  } catch (const vbsd::Error& e) {
    std::fprintf(stderr, "%s\n", e.what());
    return 1;
  }

  CLI::App* sub = app.get_subcommands().front();
  vbsd::config::RunConfig rc;
  try {
    rc = a.config.empty() ? vbsd::config::default_config(vbsd::envs::Kind::Grid)
                          : vbsd::config::load_config(a.config);
    if (given(sub, "--seed")) rc.seed = a.seed;
    if (given(sub, "--out")) rc.out_dir = a.out;
    if (given(sub, "--iterations")) rc.iterations = a.iterations;
    if (given(sub, "--episodes")) rc.eval_episodes = a.episodes;
    rc.validate();
  } catch (const vbsd::Error& e) {
    std::fprintf(stderr, "%s\n", e.what());
    return 2;
  }
  if (a.print_config) {
    std::fputs(vbsd::config::dump(rc).c_str(), stdout);
    return 0;
  }
  if (eval->parsed() && !a.random && a.checkpoint.empty()) {
    std::fprintf(stderr, "eval: --checkpoint is required unless --random is set\n");
    return 2;
  }

  try {
    if (train->parsed()) return vbsd::cli::run_train(rc, log);
    if (eval->parsed()) return vbsd::cli::run_eval(rc, a.checkpoint, a.random, log);
    return vbsd::cli::run_plan_report(rc, a.checkpoint, a.steps, a.report, log);
  } catch (const vbsd::Error& e) {
    std::fprintf(stderr, "%s\n", e.what());
    return 1;
  }
}
