#pragma once

#include <algorithm>
#include <chrono>
#include <cstddef>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <numeric>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "vbsd/belief.hpp"
#include "vbsd/checkpoint.hpp"
#include "vbsd/config.hpp"
#include "vbsd/envs.hpp"
#include "vbsd/error.hpp"
#include "vbsd/gradcheck.hpp"
#include "vbsd/models.hpp"
#include "vbsd/oracle.hpp"
#include "vbsd/planner.hpp"
#include "vbsd/rng.hpp"
#include "vbsd/tensor.hpp"
#include "vbsd/trainer.hpp"

// Subcommand implementations behind the command-line binary. Everything here
// is a plain function over RunConfig so tests drive the exact code the binary
// runs; the binary itself only parses flags and picks exit codes.
namespace vbsd::cli {

using LogFn = std::function<void(const std::string&)>;

// Round-trip-exact float formatting for emitted files; console summaries use
// the short form.
inline std::string fmt(double x) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", x);
  return buf;
}

inline std::string fmt_short(double x) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.4g", x);
  return buf;
}

namespace detail {

inline void say(const LogFn& log, const std::string& line) {
  if (log) log(line);
}

inline void write_file(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  require(out.good(), "cli: cannot write " + path);
  out << text;
  out.flush();
  require(out.good(), "cli: failed writing " + path);
}

inline std::string checkpoint_name(std::size_t iteration) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "checkpoint_%06zu.bin", iteration);
  return buf;
}

// What the environment shows right after an inner reset; the planner's
// adapter needs it to roll imagined trajectories across episode boundaries.
inline Tensor reset_observation(const envs::MetaLayout& layout, const envs::MetaEnv& env) {
  return layout.kind == envs::Kind::Grid
             ? envs::grid_observe(layout.grid_side, env.grid_task().start)
             : Tensor({layout.obs_dim()});
}

inline envs::Action random_action(const envs::MetaLayout& layout, RngStream& rng) {
  if (layout.discrete_actions())
    return envs::Action::make_discrete(int(rng.uniform_int(layout.action_dim())));
  std::vector<double> x(layout.action_dim());
  for (double& v : x) v = rng.uniform(-1.0, 1.0);
  return envs::Action::make_continuous(std::move(x));
}

}  // namespace detail

// Parameters are drawn from a stream split off the run seed so environment
// and training streams (split directly off the seed) never collide with it.
inline models::Model build_model(const config::RunConfig& rc) {
  RngStream init = RngStream(rc.seed).split(0xA11CE);
  return models::Model(rc.model, init);
}

// train: collect/optimize iterations, metrics.csv + config.json + checkpoints.
// Wall-clock time goes to the console only, keeping every file deterministic.
inline int run_train(const config::RunConfig& rc, const LogFn& log = {}) {
  std::filesystem::create_directories(rc.out_dir);
  models::Model model = build_model(rc);
  trainer::Trainer tr(model, rc.train, rc.seed);
  detail::write_file(rc.out_dir + "/config.json", config::dump(rc));

  std::ostringstream csv;
  csv << "iteration,episodes,mean_return,mean_ess,mean_root_value,loss_total,loss_value,"
         "loss_policy,loss_belief_kl,loss_belief_decode,loss_belief_entropy,loss_policy_entropy\n";
  for (std::size_t n = 1; n <= rc.iterations; ++n) {
    auto t0 = std::chrono::steady_clock::now();
    trainer::IterationRow row = tr.run_iteration(n);
    row.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    csv << row.iteration << ',' << row.episodes << ',' << fmt(row.mean_return) << ','
        << fmt(row.mean_ess) << ',' << fmt(row.mean_root_value) << ',' << fmt(row.loss.total)
        << ',' << fmt(row.loss.value) << ',' << fmt(row.loss.policy) << ','
        << fmt(row.loss.belief_kl) << ',' << fmt(row.loss.belief_decode) << ','
        << fmt(row.loss.belief_entropy) << ',' << fmt(row.loss.policy_entropy) << '\n';
    detail::say(log, "iter " + std::to_string(n) + "/" + std::to_string(rc.iterations) +
                         "  episodes " + std::to_string(row.episodes) + "  return " +
                         fmt_short(row.mean_return) + "  ess " + fmt_short(row.mean_ess) +
                         "  loss " + fmt_short(row.loss.total) + "  wall " +
                         fmt_short(row.wall_seconds) + "s");
    if (n % rc.checkpoint_interval == 0)
      checkpoint::save(model.params(), rc.out_dir + "/" + detail::checkpoint_name(n));
  }
  detail::write_file(rc.out_dir + "/metrics.csv", csv.str());
  checkpoint::save(model.params(), rc.out_dir + "/model.ckpt");
  detail::say(log, "wrote " + rc.out_dir + "/metrics.csv and " + rc.out_dir + "/model.ckpt");
  return 0;
}

// eval: E meta-episodes under the planner (or a uniform-random baseline),
// per-episode returns.csv; grid runs add tile-occupancy fractions keyed by
// inner episode, the raw material for adaptation heatmaps.
inline int run_eval(const config::RunConfig& rc, const std::string& checkpoint_path,
                    bool random_policy, const LogFn& log = {}) {
  std::filesystem::create_directories(rc.out_dir);
  models::Model model = build_model(rc);
  if (!random_policy) checkpoint::load(model.params(), checkpoint_path);
  const envs::MetaLayout& layout = rc.layout();
  const bool grid = layout.kind == envs::Kind::Grid;
  const std::size_t n_tiles = grid ? layout.grid_side * layout.grid_side : 0;

  std::ostringstream returns_csv;
  returns_csv << "episode,steps,return";
  if (!grid) returns_csv << ",cumulative_regret";
  returns_csv << '\n';
  std::vector<std::size_t> visits(layout.inner_episodes * n_tiles, 0);

  RngStream root(rc.seed);
  double total_return = 0;
  for (std::size_t ep = 0; ep < rc.eval_episodes; ++ep) {
    RngStream erng = root.split(ep);
    envs::MetaEnv env(layout);
    Tensor obs = env.reset(erng);
    models::Hidden hidden = model.initial_hidden();
    belief::BeliefParams phi = model.initial_belief();
    planner::LearnedAdapter adapter(model, detail::reset_observation(layout, env));
    std::uint64_t plan_child = 1000;
    const double best = grid ? 0.0 : env.fourier_task().max_reward();
    double ep_return = 0, regret = 0;
    std::size_t steps = 0;
    while (!env.done()) {
      if (grid) ++visits[env.clock().episode * n_tiles + std::size_t(env.tile())];
      envs::Action action;
      if (random_policy) {
        action = detail::random_action(layout, erng);
      } else {
        RngStream plan_rng = erng.split(plan_child++);
        planner::PlanResult plan =
            planner::plan(adapter, rc.train.plan, planner::LearnedState{obs, env.clock()},
                          planner::LearnedBelief{hidden, phi}, plan_rng);
        action = plan.root_policy.sample(erng);
      }
      Tensor action_raw = models::encode_action(layout, action);
      envs::StepResult sr = env.step(action);
      ep_return += sr.reward;
      regret += best - sr.reward;
      ++steps;
      if (!random_policy) {
        hidden = model.infer_step(hidden, {action_raw, sr.reward, sr.observation, sr.inner_done});
        phi = model.belief_of(hidden);
      }
      if (!sr.meta_done)
        obs = grid ? envs::grid_observe(layout.grid_side, env.tile()) : sr.observation;
    }
    total_return += ep_return;
    returns_csv << ep << ',' << steps << ',' << fmt(ep_return);
    if (!grid) returns_csv << ',' << fmt(regret);
    returns_csv << '\n';
  }
  detail::write_file(rc.out_dir + "/returns.csv", returns_csv.str());

  if (grid) {
    const double denom = double(rc.eval_episodes * layout.inner_steps);
    std::ostringstream occ;
    occ << "inner_episode,tile,visit_fraction\n";
    for (std::size_t e = 0; e < layout.inner_episodes; ++e)
      for (std::size_t t = 0; t < n_tiles; ++t)
        occ << e << ',' << t << ',' << fmt(double(visits[e * n_tiles + t]) / denom) << '\n';
    detail::write_file(rc.out_dir + "/occupancy.csv", occ.str());
  }
  detail::say(log, std::string(random_policy ? "random" : "planner") + " eval: mean return " +
                       fmt_short(total_return / double(rc.eval_episodes)) + " over " +
                       std::to_string(rc.eval_episodes) + " episodes");
  return 0;
}

// plan: warm the belief for a few steps, then a single planner call dumped as
// a readable report (root value, per-depth ESS, root policy).
inline int run_plan_report(const config::RunConfig& rc, const std::string& checkpoint_path,
                           std::size_t warm_steps, const std::string& out_file,
                           const LogFn& log = {}) {
  models::Model model = build_model(rc);
  if (!checkpoint_path.empty()) checkpoint::load(model.params(), checkpoint_path);
  const envs::MetaLayout& layout = rc.layout();
  const bool grid = layout.kind == envs::Kind::Grid;

  RngStream rng(rc.seed);
  envs::MetaEnv env(layout);
  Tensor obs = env.reset(rng);
  models::Hidden hidden = model.initial_hidden();
  belief::BeliefParams phi = model.initial_belief();
  planner::LearnedAdapter adapter(model, detail::reset_observation(layout, env));
  std::uint64_t plan_child = 1000;

  std::size_t warmed = 0;
  for (; warmed < warm_steps && !env.done(); ++warmed) {
    RngStream plan_rng = rng.split(plan_child++);
    planner::PlanResult plan =
        planner::plan(adapter, rc.train.plan, planner::LearnedState{obs, env.clock()},
                      planner::LearnedBelief{hidden, phi}, plan_rng);
    envs::Action action = plan.root_policy.sample(rng);
    Tensor action_raw = models::encode_action(layout, action);
    envs::StepResult sr = env.step(action);
    hidden = model.infer_step(hidden, {action_raw, sr.reward, sr.observation, sr.inner_done});
    phi = model.belief_of(hidden);
    if (!sr.meta_done)
      obs = grid ? envs::grid_observe(layout.grid_side, env.tile()) : sr.observation;
  }
  require(!env.done(), "plan: no acting state left after warm-up");

  RngStream plan_rng = rng.split(plan_child++);
  planner::PlanResult plan =
      planner::plan(adapter, rc.train.plan, planner::LearnedState{obs, env.clock()},
                    planner::LearnedBelief{hidden, phi}, plan_rng);

  std::ostringstream rep;
  rep << "plan report\n";
  rep << "  family: " << (grid ? "grid" : "fourier") << "\n";
  rep << "  warm steps: " << warmed << "\n";
  rep << "  clock: inner episode " << env.clock().episode << ", step "
      << env.clock().step_in_inner << "\n";
  rep << "  particles: " << rc.train.plan.particles << " (nested " << rc.train.plan.nested
      << ", temperature " << fmt_short(rc.train.plan.temperature) << ")\n";
  rep << "  root value: " << fmt(plan.root_value) << "\n";
  for (std::size_t d = 0; d < plan.ess.size(); ++d)
    rep << "  ess depth " << d << ": " << fmt_short(plan.ess[d]) << " / "
        << rc.train.plan.particles << "\n";
  if (layout.discrete_actions()) {
    std::vector<double> pi =
        planner::extract_root_policy(plan.root_policy, layout.action_dim());
    for (std::size_t a = 0; a < pi.size(); ++a)
      rep << "  action " << a << ": probability " << fmt(pi[a]) << "\n";
  } else {
    std::vector<std::size_t> order(plan.root_policy.actions.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
      return plan.root_policy.weights[a] > plan.root_policy.weights[b];
    });
    const std::size_t show = std::min<std::size_t>(order.size(), 8);
    for (std::size_t k = 0; k < show; ++k) {
      const envs::Action& a = plan.root_policy.actions[order[k]];
      rep << "  sample " << k << ": weight " << fmt(plan.root_policy.weights[order[k]])
          << " action [";
      for (std::size_t i = 0; i < a.continuous.size(); ++i)
        rep << (i ? ", " : "") << fmt_short(a.continuous[i]);
      rep << "]\n";
    }
  }
  const std::string text = rep.str();
  if (!out_file.empty()) detail::write_file(out_file, text);
  if (log) {
    std::istringstream lines(text);
    for (std::string line; std::getline(lines, line);) log(line);
  }
  return 0;
}

// oracle-check: the two-arm guessing bandit where the exact Bayes-adaptive
// tilted policy is enumerable; reports the mean root-policy TV distance.
inline int run_oracle_check(std::size_t particles, std::size_t runs, double threshold,
                            const LogFn& log = {}) {
  require(particles >= 1, "oracle-check: particles must be >= 1");
  require(runs >= 1, "oracle-check: runs must be >= 1");
  const std::size_t horizon = 3;
  const double temperature = 0.5;
  oracle::FiniteTaskSet task = oracle::FiniteTaskSet::guessing_bandit({0.7, 0.3});
  planner::ExactTaskAdapter adapter(task, horizon, temperature);
  std::vector<double> exact =
      oracle::exact_tilted_policy(task, 0, task.prior, horizon, temperature);

  planner::PlanConfig pc;
  pc.horizon = horizon;
  pc.particles = particles;
  pc.nested = 8;
  pc.temperature = temperature;
  pc.discount = 1.0;
  pc.resample_every = 2;

  double tv_sum = 0;
  for (std::size_t r = 0; r < runs; ++r) {
    RngStream rng(9000 + r);
    planner::PlanResult res = planner::plan(adapter, pc, planner::ExactTaskAdapter::State{0, 0},
                                            adapter.prior_belief(), rng);
    std::vector<double> pi = planner::extract_root_policy(res.root_policy, task.n_actions);
    double tv = 0;
    for (std::size_t a = 0; a < pi.size(); ++a) tv += std::abs(pi[a] - exact[a]);
    tv_sum += 0.5 * tv;
  }
  const double mean_tv = tv_sum / double(runs);
  detail::say(log, "oracle-check: mean TV " + fmt_short(mean_tv) + " over " +
                       std::to_string(runs) + " runs, " + std::to_string(particles) +
                       " particles (threshold " + fmt_short(threshold) + ")");
  const bool ok = mean_tv < threshold;
  detail::say(log, ok ? "PASS oracle-check" : "FAIL oracle-check");
  return ok ? 0 : 1;
}

namespace detail {

inline models::ModelConfig miniature_config(envs::Kind kind) {
  models::ModelConfig c;
  if (kind == envs::Kind::Grid) {
    c.layout = envs::MetaLayout::grid(3);
    c.layout.inner_steps = 4;
    c.layout.inner_episodes = 2;
    c.d_m = 3;
    c.embed_hidden = {6};
    c.embed_dim = 4;
    c.conv_channels = 2;
    c.ssm_layers = 1;
    c.ssm_dim = 5;
    c.head_hidden = {7};
  } else {
    c.layout = envs::MetaLayout::fourier(2);
    c.layout.inner_steps = 6;
    c.d_m = 2;
    c.embed_hidden = {5};
    c.embed_dim = 3;
    c.ssm_layers = 1;
    c.ssm_dim = 4;
    c.head_hidden = {6};
  }
  c.k_elbo = 2;
  return c;
}

// Random-action rollout with the trainer's bookkeeping and synthetic targets;
// enough structure to exercise every loss term.
inline std::vector<trainer::ReplayEntry> random_window(const models::Model& model, std::size_t n,
                                                       RngStream& rng) {
  const envs::MetaLayout& layout = model.config().layout;
  envs::MetaEnv env(layout);
  Tensor obs = env.reset(rng);
  models::Hidden hidden = model.initial_hidden();
  std::vector<trainer::ReplayEntry> out;
  for (std::size_t i = 0; i < n; ++i) {
    require(!env.done(), "gradcheck: window longer than the meta horizon");
    envs::Action a = random_action(layout, rng);
    trainer::ReplayEntry e;
    e.obs = obs;
    e.clock = env.clock();
    e.action_raw = models::encode_action(layout, a);
    e.meta_start = i == 0;
    e.hidden = hidden;
    e.phi = model.belief_of(hidden);
    e.td_target = rng.uniform(-1, 1);
    e.root_value = e.td_target;
    if (layout.discrete_actions()) {
      e.policy_probs.assign(layout.action_dim(), 0.0);
      double s = 0;
      for (double& p : e.policy_probs) {
        p = rng.uniform(0.05, 1.0);
        s += p;
      }
      for (double& p : e.policy_probs) p /= s;
    } else {
      for (int k = 0; k < 2; ++k) {
        std::vector<double> x(layout.action_dim());
        for (double& v : x) v = rng.uniform(-0.9, 0.9);
        e.policy_actions.push_back(envs::Action::make_continuous(std::move(x)));
      }
      e.policy_weights = {0.6, 0.4};
    }
    envs::StepResult sr = env.step(a);
    e.reward = sr.reward;
    e.next_obs = sr.observation;
    e.inner_done = sr.inner_done;
    e.meta_done = sr.meta_done;
    hidden = model.infer_step(hidden, {e.action_raw, e.reward, e.next_obs, e.inner_done});
    if (!sr.meta_done)
      obs = layout.kind == envs::Kind::Grid ? envs::grid_observe(layout.grid_side, env.tile())
                                            : sr.observation;
    out.push_back(std::move(e));
  }
  return out;
}

inline double miniature_loss_check(envs::Kind kind, std::string* worst_param) {
  models::Model model = [&] {
    RngStream init(41);
    return models::Model(miniature_config(kind), init);
  }();
  // Nudge parameters off zero-initialized biases so no piecewise-linear
  // activation sits exactly on its kink (all-zero grid rewards would pin the
  // reward embed there, where central differences straddle two slopes).
  RngStream jitter(91);
  Tensor flat = model.params().flatten();
  for (std::size_t i = 0; i < flat.size(); ++i) flat[i] += jitter.uniform(-0.05, 0.05);
  model.params().unflatten(flat);

  trainer::LossSettings ls;
  ls.burn_in = 2;
  ls.unroll_window = 2;
  ls.decode_window = 2;
  ls.k_elbo = 2;
  RngStream rng(42);
  std::vector<trainer::ReplayEntry> entries = random_window(model, ls.window_length(), rng);
  trainer::WindowView view{entries, model.initial_hidden(), "gradcheck"};
  return trainer::loss_gradient_check(model, view, ls, 777, worst_param);
}

}  // namespace detail

// gradcheck: finite differences over every tape op, then over the full
// training loss on miniature models of both families.
inline int run_gradcheck(const LogFn& log = {}) {
  constexpr double kOpTol = 1e-4;
  constexpr double kLossTol = 1e-3;

  std::vector<std::string> missing = ad::unchecked_ops();
  for (const std::string& m : missing) detail::say(log, "gradcheck: op without coverage: " + m);

  double worst_op = 0;
  std::string worst_op_name;
  std::vector<ad::OpCheckResult> ops = ad::run_op_checks();
  for (const ad::OpCheckResult& r : ops) {
    if (r.max_rel_err > worst_op) {
      worst_op = r.max_rel_err;
      worst_op_name = r.name;
    }
  }
  detail::say(log, "gradcheck: " + std::to_string(ops.size()) + " ops, worst rel err " +
                       fmt_short(worst_op) + " (" + worst_op_name + "), tolerance " +
                       fmt_short(kOpTol));

  double worst_loss = 0;
  std::string worst_loss_name;
  for (envs::Kind kind : {envs::Kind::Fourier, envs::Kind::Grid}) {
    std::string name;
    double e = detail::miniature_loss_check(kind, &name);
    detail::say(log, std::string("gradcheck: full loss on miniature ") +
                         (kind == envs::Kind::Grid ? "grid" : "fourier") + ", worst rel err " +
                         fmt_short(e) + " (" + name + "), tolerance " + fmt_short(kLossTol));
    if (e > worst_loss) {
      worst_loss = e;
      worst_loss_name = name;
    }
  }

  const bool ok = missing.empty() && worst_op < kOpTol && worst_loss < kLossTol;
  detail::say(log, ok ? "PASS gradcheck" : "FAIL gradcheck");
  return ok ? 0 : 1;
}

}  // namespace vbsd::cli
