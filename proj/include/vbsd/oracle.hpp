#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <span>
#include <vector>

#include "vbsd/error.hpp"

namespace vbsd::oracle {

// A tiny Bayes-adaptive problem: a handful of fully known candidate MDPs over
// a shared state/action space, plus a prior over which one is real. Rewards
// are deterministic per hypothesis, so observing a reward is hard evidence.
struct FiniteTaskSet {
  std::size_t n_states = 1;
  std::size_t n_actions = 1;
  std::size_t n_hyp = 1;
  std::vector<double> prior;       // [n_hyp]
  std::vector<double> reward;      // [n_hyp * n_states * n_actions]
  std::vector<double> transition;  // [n_hyp * n_states * n_actions * n_states]
  double discount = 1.0;

  double r(std::size_t h, std::size_t s, std::size_t a) const {
    return reward[(h * n_states + s) * n_actions + a];
  }
  double& r(std::size_t h, std::size_t s, std::size_t a) {
    return reward[(h * n_states + s) * n_actions + a];
  }
  double p(std::size_t h, std::size_t s, std::size_t a, std::size_t s2) const {
    return transition[((h * n_states + s) * n_actions + a) * n_states + s2];
  }
  double& p(std::size_t h, std::size_t s, std::size_t a, std::size_t s2) {
    return transition[((h * n_states + s) * n_actions + a) * n_states + s2];
  }

  void validate() const {
    require(n_states >= 1 && n_actions >= 1 && n_hyp >= 1, "FiniteTaskSet: empty dimension");
    require(prior.size() == n_hyp, "FiniteTaskSet: prior size mismatch");
    require(reward.size() == n_hyp * n_states * n_actions, "FiniteTaskSet: reward table size");
    require(transition.size() == n_hyp * n_states * n_actions * n_states,
            "FiniteTaskSet: transition table size");
    require(discount >= 0.0 && discount <= 1.0, "FiniteTaskSet: discount outside [0,1]");
    double ps = 0;
    for (double v : prior) {
      require(v >= 0.0, "FiniteTaskSet: negative prior mass");
      ps += v;
    }
    require(std::abs(ps - 1.0) <= 1e-9, "FiniteTaskSet: prior does not sum to 1");
    for (std::size_t h = 0; h < n_hyp; ++h)
      for (std::size_t s = 0; s < n_states; ++s)
        for (std::size_t a = 0; a < n_actions; ++a) {
          double ts = 0;
          for (std::size_t s2 = 0; s2 < n_states; ++s2) {
            require(p(h, s, a, s2) >= 0.0, "FiniteTaskSet: negative transition probability");
            ts += p(h, s, a, s2);
          }
          require(std::abs(ts - 1.0) <= 1e-9, "FiniteTaskSet: transition row does not sum to 1");
        }
  }

  // n_hyp-armed single-state guessing game: arm i pays 1 iff hypothesis i is
  // real. One pull fully reveals the hypothesis (for two hypotheses).
  static FiniteTaskSet guessing_bandit(std::vector<double> prior_, double discount_ = 1.0) {
    FiniteTaskSet t;
    t.n_states = 1;
    t.n_hyp = prior_.size();
    t.n_actions = t.n_hyp;
    t.prior = std::move(prior_);
    t.discount = discount_;
    t.reward.assign(t.n_hyp * t.n_actions, 0.0);
    t.transition.assign(t.n_hyp * t.n_actions, 1.0);
    for (std::size_t h = 0; h < t.n_hyp; ++h) t.r(h, 0, h) = 1.0;
    t.validate();
    return t;
  }
};

struct Transition {
  int s = 0;
  int a = 0;
  double r = 0;
  int s2 = 0;
};

// pi+(a | s, belief): the prior policy the soft values are regularized toward.
using PriorPolicyFn =
    std::function<std::vector<double>(int s, const std::vector<double>& belief)>;

inline PriorPolicyFn uniform_policy(std::size_t n_actions) {
  return [n_actions](int, const std::vector<double>&) {
    return std::vector<double>(n_actions, 1.0 / double(n_actions));
  };
}

// Exact Bayes filtering of the hypothesis belief along a history. Rewards are
// deterministic per hypothesis, so the reward likelihood is an indicator
// (compared exactly: histories must be generated from the task's own tables).
inline std::vector<double> exact_posterior(const FiniteTaskSet& task,
                                           std::vector<double> belief,
                                           std::span<const Transition> history) {
  require(belief.size() == task.n_hyp, "exact_posterior: belief size mismatch");
  for (const Transition& tr : history) {
    require(tr.s >= 0 && std::size_t(tr.s) < task.n_states, "exact_posterior: bad state");
    require(tr.s2 >= 0 && std::size_t(tr.s2) < task.n_states, "exact_posterior: bad next state");
    require(tr.a >= 0 && std::size_t(tr.a) < task.n_actions, "exact_posterior: bad action");
    double total = 0;
    for (std::size_t h = 0; h < task.n_hyp; ++h) {
      double lik = task.r(h, tr.s, tr.a) == tr.r ? task.p(h, tr.s, tr.a, tr.s2) : 0.0;
      belief[h] *= lik;
      total += belief[h];
    }
    require(total > 0.0, "exact_posterior: history impossible under all hypotheses");
    for (double& b : belief) b /= total;
  }
  return belief;
}

inline std::vector<double> exact_posterior(const FiniteTaskSet& task,
                                           std::span<const Transition> history) {
  return exact_posterior(task, task.prior, history);
}

namespace detail {

struct Outcome {
  double prob = 0;
  int s2 = 0;
  std::vector<double> posterior;
};

// All (reward, next-state) evidence branches of one action, with exact
// posterior per branch. Branches leading to the same next state with
// numerically identical posteriors are merged to bound tree width.
inline void action_outcomes(const FiniteTaskSet& task, int s, int a,
                            const std::vector<double>& belief, std::vector<Outcome>& out) {
  out.clear();
  for (std::size_t s2 = 0; s2 < task.n_states; ++s2) {
    for (std::size_t h0 = 0; h0 < task.n_hyp; ++h0) {
      if (belief[h0] <= 0.0) continue;
      double rv = task.r(h0, s, a);
      // Only the lowest-index hypothesis producing this (r, s2) evidence opens
      // the branch; the rest joined it below.
      bool first = true;
      for (std::size_t h = 0; h < h0; ++h)
        if (belief[h] > 0.0 && task.r(h, s, a) == rv && task.p(h, s, a, s2) > 0.0) first = false;
      if (!first || task.p(h0, s, a, s2) <= 0.0) continue;
      Outcome o;
      o.s2 = int(s2);
      o.posterior.assign(task.n_hyp, 0.0);
      for (std::size_t h = h0; h < task.n_hyp; ++h) {
        if (belief[h] <= 0.0 || task.r(h, s, a) != rv) continue;
        double w = belief[h] * task.p(h, s, a, s2);
        o.posterior[h] = w;
        o.prob += w;
      }
      if (o.prob <= 0.0) continue;
      for (double& v : o.posterior) v /= o.prob;
      bool merged = false;
      for (Outcome& prev : out) {
        if (prev.s2 != o.s2) continue;
        double diff = 0;
        for (std::size_t h = 0; h < task.n_hyp; ++h)
          diff = std::max(diff, std::abs(prev.posterior[h] - o.posterior[h]));
        if (diff <= 1e-12) {
          prev.prob += o.prob;
          merged = true;
          break;
        }
      }
      if (!merged) out.push_back(std::move(o));
    }
  }
}

}  // namespace detail

struct SoftBackup {
  double value = 0;            // V_soft(s, b) at the requested horizon
  std::vector<double> q;       // Q_soft(s, b, a)
  std::vector<double> tilted;  // q*(a) ∝ pi+(a) exp(Q_soft(a) / T)
};

// Backward induction over the exact belief tree:
//   V_soft(s,b) = T ln Σ_a pi+(a|s,b) exp((E_b[r] + γ E_b[V_soft(s', b')]) / T)
// The expectation over (r, s') sits inside the exponent's argument, not
// around the exponential: optimism enters only across actions.
inline SoftBackup soft_backup(const FiniteTaskSet& task, int s, const std::vector<double>& belief,
                              std::size_t horizon, double temperature,
                              const PriorPolicyFn& policy) {
  require(temperature > 0.0, "soft_backup: temperature must be positive");
  std::vector<double> prior_pi = policy(s, belief);
  require(prior_pi.size() == task.n_actions, "soft_backup: prior policy size mismatch");
  SoftBackup out;
  out.q.assign(task.n_actions, 0.0);
  if (horizon > 0) {
    std::vector<detail::Outcome> outcomes;
    for (std::size_t a = 0; a < task.n_actions; ++a) {
      double exp_r = 0;
      for (std::size_t h = 0; h < task.n_hyp; ++h) exp_r += belief[h] * task.r(h, s, int(a));
      detail::action_outcomes(task, s, int(a), belief, outcomes);
      double exp_v = 0;
      for (const detail::Outcome& o : outcomes)
        exp_v += o.prob *
                 soft_backup(task, o.s2, o.posterior, horizon - 1, temperature, policy).value;
      out.q[a] = exp_r + task.discount * exp_v;
    }
  }
  double qmax = *std::max_element(out.q.begin(), out.q.end());
  double z = 0;
  out.tilted.assign(task.n_actions, 0.0);
  for (std::size_t a = 0; a < task.n_actions; ++a) {
    require(prior_pi[a] >= 0.0, "soft_backup: negative prior policy mass");
    out.tilted[a] = prior_pi[a] * std::exp((out.q[a] - qmax) / temperature);
    z += out.tilted[a];
  }
  require(z > 0.0, "soft_backup: prior policy has no mass");
  for (double& v : out.tilted) v /= z;
  out.value = horizon == 0 ? 0.0 : qmax + temperature * std::log(z);
  return out;
}

inline double exact_soft_value(const FiniteTaskSet& task, int s, const std::vector<double>& belief,
                               std::size_t horizon, double temperature,
                               const PriorPolicyFn& policy) {
  require(horizon <= 6, "exact_soft_value: horizon too deep to enumerate");
  return soft_backup(task, s, belief, horizon, temperature, policy).value;
}

inline double exact_soft_value(const FiniteTaskSet& task, int s, const std::vector<double>& belief,
                               std::size_t horizon, double temperature) {
  return exact_soft_value(task, s, belief, horizon, temperature,
                          uniform_policy(task.n_actions));
}

inline std::vector<double> exact_tilted_policy(const FiniteTaskSet& task, int s,
                                               const std::vector<double>& belief,
                                               std::size_t horizon, double temperature,
                                               const PriorPolicyFn& policy) {
  require(horizon <= 6, "exact_tilted_policy: horizon too deep to enumerate");
  return soft_backup(task, s, belief, horizon, temperature, policy).tilted;
}

inline std::vector<double> exact_tilted_policy(const FiniteTaskSet& task, int s,
                                               const std::vector<double>& belief,
                                               std::size_t horizon, double temperature) {
  return exact_tilted_policy(task, s, belief, horizon, temperature,
                             uniform_policy(task.n_actions));
}

// Soft value of a single fully known hypothesis (degenerate belief): the same
// recursion without belief updates. Used as the per-sample value inside the
// planner's exact-model tests.
inline double known_mdp_soft_value(const FiniteTaskSet& task, std::size_t h, int s,
                                   std::size_t horizon, double temperature,
                                   const PriorPolicyFn& policy) {
  if (horizon == 0) return 0.0;
  std::vector<double> belief(task.n_hyp, 0.0);
  belief[h] = 1.0;
  std::vector<double> prior_pi = policy(s, belief);
  require(prior_pi.size() == task.n_actions, "known_mdp_soft_value: policy size mismatch");
  std::vector<double> q(task.n_actions, 0.0);
  for (std::size_t a = 0; a < task.n_actions; ++a) {
    double ev = 0;
    for (std::size_t s2 = 0; s2 < task.n_states; ++s2) {
      double pr = task.p(h, s, int(a), s2);
      if (pr > 0.0)
        ev += pr * known_mdp_soft_value(task, h, int(s2), horizon - 1, temperature, policy);
    }
    q[a] = task.r(h, s, int(a)) + task.discount * ev;
  }
  double qmax = *std::max_element(q.begin(), q.end());
  double z = 0;
  for (std::size_t a = 0; a < task.n_actions; ++a)
    z += prior_pi[a] * std::exp((q[a] - qmax) / temperature);
  require(z > 0.0, "known_mdp_soft_value: prior policy has no mass");
  return qmax + temperature * std::log(z);
}

}  // namespace vbsd::oracle
