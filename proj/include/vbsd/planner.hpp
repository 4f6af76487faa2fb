#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "vbsd/belief.hpp"
#include "vbsd/envs.hpp"
#include "vbsd/error.hpp"
#include "vbsd/models.hpp"
#include "vbsd/oracle.hpp"
#include "vbsd/rng.hpp"
#include "vbsd/stats.hpp"
#include "vbsd/tensor.hpp"
#include "vbsd/threads.hpp"

namespace vbsd::planner {

struct PlanConfig {
  std::size_t horizon = 4;         // simulated lookahead depth m
  std::size_t particles = 32;      // K
  std::size_t nested = 8;          // belief samples per particle step
  double temperature = 0.1;        // target temperature T
  double discount = 0.99;
  std::size_t resample_every = 2;  // multinomial resampling interval r

  void validate() const {
    require(particles >= 1, "plan: need at least one particle");
    require(nested >= 1, "plan: need at least one nested sample");
    require(temperature > 0, "plan: temperature must be positive");
    require(discount >= 0 && discount <= 1, "plan: discount must lie in [0, 1]");
    require(resample_every >= 1, "plan: resample interval must be >= 1");
  }
};

// T * ln sum_j w_j exp(V_j / T): the soft state value of a weighted belief
// ensemble. With uniform weights this reduces to T * (lse(V/T) - ln K).
inline double soft_value_term(std::span<const double> weights, std::span<const double> values,
                              double temperature) {
  require(weights.size() == values.size() && !weights.empty(),
          "soft_value_term: weight/value size mismatch");
  std::vector<double> terms(weights.size());
  for (std::size_t j = 0; j < weights.size(); ++j) {
    require(weights[j] >= 0.0, "soft_value_term: negative weight");
    terms[j] = weights[j] == 0.0 ? -std::numeric_limits<double>::infinity()
                                 : std::log(weights[j]) + values[j] / temperature;
  }
  return temperature * stats::log_sum_exp(terms);
}

// Log-weight increment for one simulated step: the belief-mean reward plus
// the change in the soft ensemble value, all in temperature units.
inline double weight_increment(double mean_reward, double soft_next, double soft_prev,
                               double temperature) {
  return (mean_reward + soft_next - soft_prev) / temperature;
}

inline std::vector<std::size_t> multinomial_resample(std::span<const double> weights,
                                                     std::size_t n, RngStream& rng) {
  std::vector<std::size_t> idx(n);
  for (std::size_t& i : idx) i = rng.next_categorical(weights);
  return idx;
}

// Softmax over particle log-weights; a fully vanished population is a
// planning failure, reported with the depth at which it happened.
inline std::vector<double> normalize_log_weights(std::span<const double> log_w,
                                                 std::size_t depth) {
  std::vector<double> terms(log_w.begin(), log_w.end());
  double lse = stats::log_sum_exp(terms);
  if (std::isinf(lse) && lse < 0)
    fail("particle degeneracy at depth " + std::to_string(depth) +
         ": all particle weights vanished");
  std::vector<double> out(terms.size());
  for (std::size_t i = 0; i < terms.size(); ++i) out[i] = std::exp(terms[i] - lse);
  return out;
}

inline double effective_sample_size(std::span<const double> normalized) {
  double s2 = 0;
  for (double w : normalized) s2 += w * w;
  return 1.0 / s2;
}

// Weighted set of root actions: the planner's approximation of the tilted
// one-step policy. Discrete actions aggregate into a dense distribution.
struct RootPolicy {
  std::vector<envs::Action> actions;
  std::vector<double> weights;  // normalized

  const envs::Action& sample(RngStream& rng) const {
    require(!actions.empty(), "RootPolicy: empty");
    return actions[rng.next_categorical(weights)];
  }
};

inline std::vector<double> extract_root_policy(const RootPolicy& rp, std::size_t n_actions) {
  std::vector<double> p(n_actions, 0.0);
  double total = 0;
  for (std::size_t i = 0; i < rp.actions.size(); ++i) {
    require(rp.actions[i].is_discrete(), "extract_root_policy: non-discrete root action");
    std::size_t a = std::size_t(rp.actions[i].discrete);
    require(a < n_actions, "extract_root_policy: action out of range");
    p[a] += rp.weights[i];
    total += rp.weights[i];
  }
  require(total > 0, "extract_root_policy: no weight mass");
  for (double& x : p) x /= total;
  return p;
}

template <class State, class Belief, class Ensemble>
struct StepOutcome {
  double mean_reward = 0;  // E[r] under the ensemble carried into the step
  State next_state;
  Belief next_belief;
  Ensemble next_ensemble;  // refreshed from the updated belief
  bool meta_done = false;
};

struct PlanResult {
  double root_value = 0;
  RootPolicy root_policy;
  std::vector<double> ess;  // per depth, before resampling
};

// Sequential Monte-Carlo planner over belief-conditioned rollouts. The
// Adapter supplies the model-specific pieces:
//   State / Belief / Ensemble          value-semantic particle components
//   prior_policy(state, belief, ensemble, rng)
//                                      action proposal conditioned on a
//                                      belief sample drawn from the ensemble;
//                                      returns an object with
//                                      .sample(RngStream&) -> Action
//   root_ensemble(state, belief, k, rng)
//   step(state, belief, ensemble, action, k, rng) -> StepOutcome
// Ensembles expose .weights and .values (normalized weights, one value per
// member). Particle rollouts run in parallel; each particle owns a split rng
// stream, so results do not depend on the thread count.
template <class Adapter>
PlanResult plan(const Adapter& adapter, const PlanConfig& cfg,
                const typename Adapter::State& root_state,
                const typename Adapter::Belief& root_belief, RngStream& rng) {
  cfg.validate();
  struct Particle {
    typename Adapter::State state;
    typename Adapter::Belief belief;
    typename Adapter::Ensemble ensemble;
    envs::Action root_action;
    double log_weight = 0;
    double ret = 0;        // discounted sum of belief-mean rewards
    double soft_prev = 0;  // soft ensemble value at the rollout frontier
    bool done = false;
    RngStream rng{0};
  };

  // Particles draw from pre-split child streams; fresh children are issued
  // after every resample so duplicated parents diverge. Splitting depends
  // only on the parent key, never on how much the master stream has drawn.
  std::uint64_t next_child = 0;
  std::vector<Particle> ps(cfg.particles);
  for (Particle& p : ps) {
    p.state = root_state;
    p.belief = root_belief;
    p.rng = rng.split(next_child++);
  }
  parallel_for(ps.size(), [&](std::size_t i) {
    Particle& p = ps[i];
    p.ensemble = adapter.root_ensemble(p.state, p.belief, cfg.nested, p.rng);
    p.soft_prev = soft_value_term(p.ensemble.weights, p.ensemble.values, cfg.temperature);
  });

  PlanResult result;
  if (cfg.horizon == 0) {
    // No lookahead: the root policy is an empirical sample of the prior
    // policy and the value is the aggregated root ensemble term.
    std::vector<double> g(ps.size());
    for (std::size_t i = 0; i < ps.size(); ++i) {
      Particle& p = ps[i];
      result.root_policy.actions.push_back(
          adapter.prior_policy(p.state, p.belief, p.ensemble, p.rng).sample(p.rng));
      result.root_policy.weights.push_back(1.0 / double(ps.size()));
      g[i] = std::log(1.0 / double(ps.size())) + p.soft_prev / cfg.temperature;
    }
    result.root_value = cfg.temperature * stats::log_sum_exp(g);
    return result;
  }

  for (std::size_t depth = 1; depth <= cfg.horizon; ++depth) {
    try {
      parallel_for(ps.size(), [&](std::size_t i) {
        Particle& p = ps[i];
        if (p.done) return;
        envs::Action a =
            adapter.prior_policy(p.state, p.belief, p.ensemble, p.rng).sample(p.rng);
        if (depth == 1) p.root_action = a;
        auto out = adapter.step(p.state, p.belief, p.ensemble, a, cfg.nested, p.rng);
        double soft_next =
            out.meta_done
                ? 0.0
                : soft_value_term(out.next_ensemble.weights, out.next_ensemble.values,
                                  cfg.temperature);
        p.log_weight +=
            weight_increment(out.mean_reward, soft_next, p.soft_prev, cfg.temperature);
        p.ret += std::pow(cfg.discount, double(depth - 1)) * out.mean_reward;
        p.state = std::move(out.next_state);
        p.belief = std::move(out.next_belief);
        p.ensemble = std::move(out.next_ensemble);
        p.soft_prev = soft_next;
        p.done = out.meta_done;
      });
    } catch (const Error& e) {
      fail("particle degeneracy at depth " + std::to_string(depth) + ": " + e.what());
    }

    std::vector<double> lw(ps.size());
    for (std::size_t i = 0; i < ps.size(); ++i) lw[i] = ps[i].log_weight;
    std::vector<double> wbar = normalize_log_weights(lw, depth);
    result.ess.push_back(effective_sample_size(wbar));

    if (depth % cfg.resample_every == 0 && depth < cfg.horizon) {
      std::vector<std::size_t> idx = multinomial_resample(wbar, ps.size(), rng);
      std::vector<Particle> next;
      next.reserve(ps.size());
      for (std::size_t i : idx) {
        Particle q = ps[i];
        q.log_weight = 0.0;
        q.rng = rng.split(next_child++);
        next.push_back(std::move(q));
      }
      ps = std::move(next);
    }
  }

  std::vector<double> lw(ps.size());
  for (std::size_t i = 0; i < ps.size(); ++i) lw[i] = ps[i].log_weight;
  std::vector<double> wbar = normalize_log_weights(lw, cfg.horizon);

  std::vector<double> g(ps.size());
  double tail = std::pow(cfg.discount, double(cfg.horizon));
  for (std::size_t i = 0; i < ps.size(); ++i) {
    double gi = ps[i].ret + tail * ps[i].soft_prev;
    g[i] = wbar[i] == 0.0 ? -std::numeric_limits<double>::infinity()
                          : std::log(wbar[i]) + gi / cfg.temperature;
  }
  result.root_value = cfg.temperature * stats::log_sum_exp(g);
  result.root_policy.actions.reserve(ps.size());
  for (const Particle& p : ps) result.root_policy.actions.push_back(p.root_action);
  result.root_policy.weights = std::move(wbar);
  return result;
}

// ---- learned-model adapter -------------------------------------------------

struct LearnedState {
  Tensor obs;
  envs::Clock clock;
};

struct LearnedBelief {
  models::Hidden hidden;
  belief::BeliefParams phi;
};

struct LearnedEnsemble {
  std::vector<Tensor> samples;
  std::vector<double> weights;
  std::vector<double> values;
};

// Runs the planner against the amortized inference network and decoders. The
// reset observation is what the environment shows after an inner-episode
// boundary (the grid start tile); the function family has a single inner
// episode per meta-episode so it never consults it.
class LearnedAdapter {
 public:
  using State = LearnedState;
  using Belief = LearnedBelief;
  using Ensemble = LearnedEnsemble;
  using Outcome = StepOutcome<State, Belief, Ensemble>;

  LearnedAdapter(const models::Model& model, Tensor reset_obs)
      : model_(&model), layout_(model.config().layout), reset_obs_(std::move(reset_obs)) {
    require(reset_obs_.size() == layout_.obs_dim(), "LearnedAdapter: reset observation size");
  }

  // Action proposal conditioned on one belief sample drawn from the carried
  // ensemble; keeps the proposal consistent with the nested belief measure.
  models::Model::PolicyDist prior_policy(const State& s, const Belief&, const Ensemble& ens,
                                         RngStream& rng) const {
    const Tensor& z = ens.samples[rng.next_categorical(ens.weights)];
    return model_->policy(models::state_features(layout_, s.obs, s.clock), z);
  }

  Ensemble root_ensemble(const State& s, const Belief& b, std::size_t k, RngStream& rng) const {
    Ensemble e;
    e.samples = belief::sample_gaussian(b.phi, k, rng);
    e.weights.assign(k, 1.0 / double(k));
    Tensor feat = models::state_features(layout_, s.obs, s.clock);
    e.values.reserve(k);
    for (const Tensor& m : e.samples) e.values.push_back(model_->value(feat, m));
    return e;
  }

  Outcome step(const State& s, const Belief& b, const Ensemble& ens, const envs::Action& a,
               std::size_t k, RngStream& rng) const {
    Tensor feat = models::state_features(layout_, s.obs, s.clock);
    Tensor act = models::encode_action(layout_, a);

    // Belief-mean reward under the ensemble carried into this step; one
    // committed member then realizes the simulated outcome.
    std::vector<double> rhat(ens.samples.size());
    double mean_reward = 0;
    for (std::size_t j = 0; j < ens.samples.size(); ++j) {
      rhat[j] = reward_mean(feat, act, ens.samples[j]);
      mean_reward += ens.weights[j] * rhat[j];
    }
    std::size_t jstar = rng.next_categorical(ens.weights);
    double r_sim = rhat[jstar];

    Tensor next_obs;
    if (layout_.kind == envs::Kind::Grid) {
      Tensor logits = state_logits(feat, act, ens.samples[jstar]);
      std::vector<double> p(logits.size());
      for (std::size_t t = 0; t < logits.size(); ++t) p[t] = 1.0 / (1.0 + std::exp(-logits[t]));
      std::size_t tile = rng.next_categorical(p);
      next_obs = envs::grid_observe(layout_.grid_side, int(tile));
    } else {
      next_obs = Tensor::full({layout_.obs_dim()}, r_sim);
    }

    envs::Clock clock2 = s.clock;
    auto [inner_done, meta_done] = clock2.advance(layout_);

    models::HistoryStep h;
    h.action_raw = act;
    h.reward = r_sim;
    h.next_obs = next_obs;
    h.inner_done = inner_done;
    models::Hidden hidden2 = model_->infer_step(b.hidden, h);
    belief::BeliefParams phi2 = model_->belief_of(hidden2);

    Ensemble e2;
    e2.samples = belief::sample_gaussian(phi2, k, rng);
    std::vector<double> log_liks(k);
    models::DecodeInput din{feat, act, r_sim, next_obs, inner_done};
    for (std::size_t j = 0; j < k; ++j)
      log_liks[j] = model_->decode_log_likelihood(e2.samples[j], din);
    belief::NestedWeights nw = belief::nested_log_weights(b.phi, phi2, e2.samples, log_liks);
    e2.weights = std::move(nw.normalized);

    State s2;
    s2.obs = inner_done && !meta_done && layout_.kind == envs::Kind::Grid ? reset_obs_ : next_obs;
    s2.clock = clock2;
    if (meta_done) {
      e2.values.assign(k, 0.0);
    } else {
      Tensor feat2 = models::state_features(layout_, s2.obs, s2.clock);
      e2.values.reserve(k);
      for (const Tensor& m : e2.samples) e2.values.push_back(model_->value(feat2, m));
    }

    Outcome out;
    out.mean_reward = mean_reward;
    out.next_state = std::move(s2);
    out.next_belief = {std::move(hidden2), std::move(phi2)};
    out.next_ensemble = std::move(e2);
    out.meta_done = meta_done;
    return out;
  }

 private:
  double reward_mean(const Tensor& feat, const Tensor& act, const Tensor& m) const {
    ad::Tape& tape = models::detail::scratch_tape();
    return tape
        .value(model_->reward_mean_node(tape, tape.constant(feat), tape.constant(act),
                                        tape.constant(m), true))
        .scalar_value();
  }

  Tensor state_logits(const Tensor& feat, const Tensor& act, const Tensor& m) const {
    ad::Tape& tape = models::detail::scratch_tape();
    return tape.value(model_->state_logits_node(tape, tape.constant(feat), tape.constant(act),
                                                tape.constant(m), true));
  }

  const models::Model* model_;
  envs::MetaLayout layout_;
  Tensor reset_obs_;
};

// ---- exact finite-task adapter ----------------------------------------------

// Planner adapter with exact Bayes filtering over an enumerable hypothesis
// set and exact per-hypothesis soft values. Convergence of the planner's
// root policy toward the enumerated tilted policy is checked against this.
class ExactTaskAdapter {
 public:
  struct State {
    int s = 0;
    std::size_t t = 0;  // elapsed planning steps (finite-horizon values)
  };
  struct Belief {
    std::vector<double> posterior;
  };
  struct Ensemble {
    std::vector<int> samples;  // hypothesis indices
    std::vector<double> weights;
    std::vector<double> values;
  };
  using Outcome = StepOutcome<State, Belief, Ensemble>;

  struct UniformPolicyDist {
    std::size_t n = 0;
    envs::Action sample(RngStream& rng) const {
      return envs::Action::make_discrete(int(rng.uniform_int(n)));
    }
  };

  ExactTaskAdapter(oracle::FiniteTaskSet task, std::size_t horizon, double temperature)
      : task_(std::move(task)), horizon_(horizon), temperature_(temperature) {
    task_.validate();
    require(temperature_ > 0, "ExactTaskAdapter: temperature must be positive");
  }

  Belief prior_belief() const { return {task_.prior}; }

  UniformPolicyDist prior_policy(const State&, const Belief&, const Ensemble&, RngStream&) const {
    return {task_.n_actions};
  }

  Ensemble root_ensemble(const State& st, const Belief& b, std::size_t k, RngStream& rng) const {
    Ensemble e;
    e.weights.assign(k, 1.0 / double(k));
    e.samples.reserve(k);
    e.values.reserve(k);
    for (std::size_t j = 0; j < k; ++j) {
      int h = int(rng.next_categorical(b.posterior));
      e.samples.push_back(h);
      e.values.push_back(hyp_value(h, st));
    }
    return e;
  }

  Outcome step(const State& st, const Belief& b, const Ensemble& ens, const envs::Action& a,
               std::size_t k, RngStream& rng) const {
    require(a.is_discrete(), "ExactTaskAdapter: expects discrete actions");
    int act = a.discrete;

    double mean_reward = 0;
    for (std::size_t j = 0; j < ens.samples.size(); ++j)
      mean_reward += ens.weights[j] * task_.r(std::size_t(ens.samples[j]), st.s, act);

    std::size_t jstar = rng.next_categorical(ens.weights);
    std::size_t h = std::size_t(ens.samples[jstar]);
    double r = task_.r(h, st.s, act);
    std::vector<double> row(task_.n_states);
    for (std::size_t s2 = 0; s2 < task_.n_states; ++s2) row[s2] = task_.p(h, st.s, act, s2);
    int s2 = int(rng.next_categorical(row));

    oracle::Transition tr{st.s, act, r, s2};
    std::vector<double> post = oracle::exact_posterior(task_, b.posterior, {&tr, 1});
    State st2{s2, st.t + 1};
    bool meta_done = st2.t >= horizon_;

    // Refresh the nested ensemble from the updated posterior; the importance
    // correction prior/proposal * likelihood is computed with the exact
    // categorical densities (it collapses to uniform up to normalization,
    // since the proposal here IS the exact posterior).
    Ensemble e2;
    std::vector<double> raw(k);
    e2.samples.reserve(k);
    for (std::size_t j = 0; j < k; ++j) {
      std::size_t hj = rng.next_categorical(post);
      e2.samples.push_back(int(hj));
      double lik = task_.r(hj, st.s, act) == r ? task_.p(hj, st.s, act, s2) : 0.0;
      raw[j] = std::log(b.posterior[hj]) - std::log(post[hj]) + std::log(lik);
    }
    double lse = stats::log_sum_exp(raw);
    if (std::isinf(lse) && lse < 0) fail("all nested weights vanished");
    e2.weights.resize(k);
    for (std::size_t j = 0; j < k; ++j) e2.weights[j] = std::exp(raw[j] - lse);
    if (meta_done) {
      e2.values.assign(k, 0.0);
    } else {
      e2.values.reserve(k);
      for (int hj : e2.samples) e2.values.push_back(hyp_value(hj, st2));
    }

    Outcome out;
    out.mean_reward = mean_reward;
    out.next_state = st2;
    out.next_belief = {std::move(post)};
    out.next_ensemble = std::move(e2);
    out.meta_done = meta_done;
    return out;
  }

  const oracle::FiniteTaskSet& task() const { return task_; }

 private:
  double hyp_value(int h, const State& st) const {
    return oracle::known_mdp_soft_value(task_, std::size_t(h), st.s, horizon_ - st.t,
                                        temperature_, oracle::uniform_policy(task_.n_actions));
  }

  oracle::FiniteTaskSet task_;
  std::size_t horizon_;
  double temperature_;
};

}  // namespace vbsd::planner
