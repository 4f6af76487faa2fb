#include <doctest.h>

#include <cmath>
#include <vector>

#include "vbsd/oracle.hpp"
#include "vbsd/rng.hpp"

using namespace vbsd;
using namespace vbsd::oracle;

namespace {

// Independent re-derivation of the soft backup used to cross-check the
// production recursion: iterates hypothesis-by-hypothesis over every evidence
// branch with no grouping or merging.
std::vector<double> naive_q(const FiniteTaskSet& task, int s, const std::vector<double>& belief,
                            std::size_t horizon, double T);

double naive_value(const FiniteTaskSet& task, int s, const std::vector<double>& belief,
                   std::size_t horizon, double T) {
  if (horizon == 0) return 0.0;
  std::vector<double> q = naive_q(task, s, belief, horizon, T);
  double acc = 0;
  for (double v : q) acc += std::exp(v / T) / double(task.n_actions);
  return T * std::log(acc);
}

std::vector<double> naive_q(const FiniteTaskSet& task, int s, const std::vector<double>& belief,
                            std::size_t horizon, double T) {
  std::vector<double> q(task.n_actions, 0.0);
  for (std::size_t a = 0; a < task.n_actions; ++a) {
    double er = 0;
    for (std::size_t h = 0; h < task.n_hyp; ++h) er += belief[h] * task.r(h, s, a);
    double ev = 0;
    for (std::size_t h = 0; h < task.n_hyp; ++h) {
      if (belief[h] <= 0.0) continue;
      for (std::size_t s2 = 0; s2 < task.n_states; ++s2) {
        double pr = task.p(h, s, a, s2);
        if (pr <= 0.0) continue;
        // Posterior given the evidence (a, r_h(s,a), s2) this branch emits.
        std::vector<double> post(task.n_hyp, 0.0);
        double z = 0;
        for (std::size_t h2 = 0; h2 < task.n_hyp; ++h2) {
          if (task.r(h2, s, a) != task.r(h, s, a)) continue;
          post[h2] = belief[h2] * task.p(h2, s, a, s2);
          z += post[h2];
        }
        for (double& v : post) v /= z;
        ev += belief[h] * pr * naive_value(task, int(s2), post, horizon - 1, T);
      }
    }
    q[a] = er + task.discount * ev;
  }
  return q;
}

std::vector<double> naive_tilted(const FiniteTaskSet& task, int s,
                                 const std::vector<double>& belief, std::size_t horizon,
                                 double T) {
  std::vector<double> q = naive_q(task, s, belief, horizon, T);
  std::vector<double> out(q.size());
  double z = 0;
  for (std::size_t a = 0; a < q.size(); ++a) z += std::exp(q[a] / T);
  for (std::size_t a = 0; a < q.size(); ++a) out[a] = std::exp(q[a] / T) / z;
  return out;
}

// Expected undiscounted-γ return of the uniform prior policy itself, by
// brute-force expectation over all action/outcome paths.
double uniform_policy_return(const FiniteTaskSet& task, int s, const std::vector<double>& belief,
                             std::size_t horizon) {
  if (horizon == 0) return 0.0;
  double total = 0;
  for (std::size_t a = 0; a < task.n_actions; ++a) {
    double er = 0;
    for (std::size_t h = 0; h < task.n_hyp; ++h) er += belief[h] * task.r(h, s, a);
    double ev = 0;
    for (std::size_t h = 0; h < task.n_hyp; ++h) {
      if (belief[h] <= 0.0) continue;
      for (std::size_t s2 = 0; s2 < task.n_states; ++s2) {
        double pr = task.p(h, s, a, s2);
        if (pr <= 0.0) continue;
        std::vector<double> post(task.n_hyp, 0.0);
        double z = 0;
        for (std::size_t h2 = 0; h2 < task.n_hyp; ++h2) {
          if (task.r(h2, s, a) != task.r(h, s, a)) continue;
          post[h2] = belief[h2] * task.p(h2, s, a, s2);
          z += post[h2];
        }
        for (double& v : post) v /= z;
        ev += belief[h] * pr * uniform_policy_return(task, int(s2), post, horizon - 1);
      }
    }
    total += (er + task.discount * ev) / double(task.n_actions);
  }
  return total;
}

FiniteTaskSet random_task(RngStream& rng, std::size_t n_states, std::size_t n_actions,
                          std::size_t n_hyp, bool nonneg_rewards = false) {
  FiniteTaskSet t;
  t.n_states = n_states;
  t.n_actions = n_actions;
  t.n_hyp = n_hyp;
  t.discount = rng.uniform(0.5, 1.0);
  t.prior.resize(n_hyp);
  double z = 0;
  for (double& v : t.prior) {
    v = rng.uniform(0.1, 1.0);
    z += v;
  }
  for (double& v : t.prior) v /= z;
  t.reward.resize(n_hyp * n_states * n_actions);
  // Rewards drawn from a small value set so distinct hypotheses often collide,
  // exercising the evidence-grouping paths.
  for (double& v : t.reward) v = 0.5 * double(rng.uniform_int(4)) - 0.5;
  if (nonneg_rewards)
    for (double& v : t.reward) v = std::abs(v);
  t.transition.assign(n_hyp * n_states * n_actions * n_states, 0.0);
  for (std::size_t h = 0; h < n_hyp; ++h)
    for (std::size_t s = 0; s < n_states; ++s)
      for (std::size_t a = 0; a < n_actions; ++a) {
        double rowz = 0;
        for (std::size_t s2 = 0; s2 < n_states; ++s2) {
          double w = rng.uniform(0.05, 1.0);
          t.p(h, s, a, s2) = w;
          rowz += w;
        }
        for (std::size_t s2 = 0; s2 < n_states; ++s2) t.p(h, s, a, s2) /= rowz;
      }
  t.validate();
  return t;
}

std::vector<Transition> simulate_history(const FiniteTaskSet& task, RngStream& rng,
                                         std::size_t len) {
  std::size_t h = rng.next_categorical(task.prior);
  std::vector<Transition> out;
  int s = 0;
  for (std::size_t i = 0; i < len; ++i) {
    int a = int(rng.uniform_int(task.n_actions));
    std::vector<double> row(task.n_states);
    for (std::size_t s2 = 0; s2 < task.n_states; ++s2) row[s2] = task.p(h, s, a, s2);
    int s2 = int(rng.next_categorical(row));
    out.push_back({s, a, task.r(h, s, a), s2});
    s = s2;
  }
  return out;
}

}  // namespace

TEST_CASE("task set validation rejects malformed tables") {
  FiniteTaskSet t = FiniteTaskSet::guessing_bandit({0.5, 0.5});
  t.validate();
  FiniteTaskSet bad = t;
  bad.prior = {0.5, 0.4};
  CHECK_THROWS_WITH_AS(bad.validate(), doctest::Contains("prior does not sum"), Error);
  bad = t;
  bad.transition[0] = 0.25;
  CHECK_THROWS_WITH_AS(bad.validate(), doctest::Contains("row does not sum"), Error);
  bad = t;
  bad.prior = {1.5, -0.5};
  CHECK_THROWS_WITH_AS(bad.validate(), doctest::Contains("negative prior"), Error);
}

TEST_CASE("exact posterior on the guessing bandit collapses after one pull") {
  FiniteTaskSet t = FiniteTaskSet::guessing_bandit({0.7, 0.3});
  Transition win{0, 0, 1.0, 0};
  std::vector<double> post = exact_posterior(t, {{win}});
  CHECK(post[0] == 1.0);
  CHECK(post[1] == 0.0);
  Transition lose{0, 0, 0.0, 0};
  post = exact_posterior(t, {{lose}});
  CHECK(post[0] == 0.0);
  CHECK(post[1] == 1.0);
}

TEST_CASE("uninformative evidence leaves the belief unchanged") {
  // Both hypotheses share reward and transition law for action 0; only
  // action 1 would distinguish them.
  FiniteTaskSet t;
  t.n_states = 2;
  t.n_actions = 2;
  t.n_hyp = 2;
  t.prior = {0.6, 0.4};
  t.reward.assign(8, 0.0);
  t.transition.assign(16, 0.0);
  for (std::size_t h = 0; h < 2; ++h) {
    t.r(h, 0, 1) = h == 0 ? 1.0 : 2.0;
    for (std::size_t s = 0; s < 2; ++s)
      for (std::size_t a = 0; a < 2; ++a) {
        t.p(h, s, a, 0) = 0.5;
        t.p(h, s, a, 1) = 0.5;
      }
  }
  t.validate();
  std::vector<Transition> hist = {{0, 0, 0.0, 1}, {1, 0, 0.0, 0}};
  std::vector<double> post = exact_posterior(t, hist);
  CHECK(post[0] == doctest::Approx(0.6).epsilon(1e-14));
  CHECK(post[1] == doctest::Approx(0.4).epsilon(1e-14));
}

TEST_CASE("posterior ratio equals prior ratio times likelihood ratio") {
  FiniteTaskSet t;
  t.n_states = 2;
  t.n_actions = 1;
  t.n_hyp = 2;
  t.prior = {0.25, 0.75};
  t.reward.assign(4, 0.0);
  t.transition.assign(8, 0.0);
  t.p(0, 0, 0, 1) = 0.3;
  t.p(0, 0, 0, 0) = 0.7;
  t.p(1, 0, 0, 1) = 0.6;
  t.p(1, 0, 0, 0) = 0.4;
  for (std::size_t h = 0; h < 2; ++h) {
    t.p(h, 1, 0, 0) = 1.0;
  }
  t.validate();
  std::vector<double> post = exact_posterior(t, {{Transition{0, 0, 0.0, 1}}});
  double want_ratio = (0.25 / 0.75) * (0.3 / 0.6);
  CHECK(post[0] / post[1] == doctest::Approx(want_ratio).epsilon(1e-12));
  CHECK(post[0] + post[1] == doctest::Approx(1.0).epsilon(1e-14));
}

TEST_CASE("impossible histories are rejected") {
  FiniteTaskSet t = FiniteTaskSet::guessing_bandit({0.7, 0.3});
  // Reward 0.5 is not producible by any hypothesis.
  CHECK_THROWS_WITH_AS(exact_posterior(t, {{Transition{0, 0, 0.5, 0}}}),
                       doctest::Contains("impossible under all hypotheses"), Error);
  // Arm 0 paying under h=0 then arm 0 failing is jointly impossible.
  std::vector<Transition> contradictory = {{0, 0, 1.0, 0}, {0, 0, 0.0, 0}};
  CHECK_THROWS_WITH_AS(exact_posterior(t, contradictory),
                       doctest::Contains("impossible under all hypotheses"), Error);
}

TEST_CASE("posterior normalizes across random tasks and histories") {
  RngStream rng(4011);
  for (int rep = 0; rep < 1000; ++rep) {
    FiniteTaskSet t = random_task(rng, 3, 2, 3);
    std::vector<Transition> hist = simulate_history(t, rng, 4);
    std::vector<double> post = exact_posterior(t, hist);
    double z = 0;
    for (double v : post) {
      CHECK(v >= 0.0);
      z += v;
    }
    CHECK(z == doctest::Approx(1.0).epsilon(1e-12));
  }
}

TEST_CASE("soft value at horizon zero is zero") {
  RngStream rng(4012);
  FiniteTaskSet t = random_task(rng, 2, 2, 2);
  CHECK(exact_soft_value(t, 0, t.prior, 0, 0.7) == 0.0);
  CHECK_THROWS_WITH_AS(exact_soft_value(t, 0, t.prior, 7, 0.7), doctest::Contains("too deep"),
                       Error);
}

TEST_CASE("single-action chains reduce to expected discounted reward sums") {
  RngStream rng(4013);
  for (int rep = 0; rep < 20; ++rep) {
    FiniteTaskSet t = random_task(rng, 3, 1, 3);
    const std::size_t horizon = 4;
    // Direct computation: discounted expected reward under each hypothesis,
    // then prior-weighted (one action, so the soft backup has no choice).
    double want = 0;
    for (std::size_t h = 0; h < t.n_hyp; ++h) {
      std::vector<double> dist(t.n_states, 0.0);
      dist[0] = 1.0;
      double g = 1.0, val = 0.0;
      for (std::size_t k = 0; k < horizon; ++k) {
        std::vector<double> next(t.n_states, 0.0);
        for (std::size_t s = 0; s < t.n_states; ++s) {
          if (dist[s] <= 0.0) continue;
          val += g * dist[s] * t.r(h, s, 0);
          for (std::size_t s2 = 0; s2 < t.n_states; ++s2)
            next[s2] += dist[s] * t.p(h, s, 0, s2);
        }
        dist.swap(next);
        g *= t.discount;
      }
      want += t.prior[h] * val;
    }
    double got = exact_soft_value(t, 0, t.prior, horizon, rng.uniform(0.2, 3.0));
    CHECK(got == doctest::Approx(want).epsilon(1e-12));
  }
}

TEST_CASE("soft value dominates the uniform-policy return") {
  RngStream rng(4014);
  for (int rep = 0; rep < 50; ++rep) {
    FiniteTaskSet t = random_task(rng, 2, 3, 2);
    for (std::size_t horizon : {1, 2, 3}) {
      double soft = exact_soft_value(t, 0, t.prior, horizon, 0.5);
      double flat = uniform_policy_return(t, 0, t.prior, horizon);
      CHECK(soft >= flat - 1e-12);
    }
  }
}

TEST_CASE("soft value grows with horizon when rewards are non-negative") {
  RngStream rng(4015);
  for (int rep = 0; rep < 30; ++rep) {
    FiniteTaskSet t = random_task(rng, 2, 2, 3, /*nonneg_rewards=*/true);
    double prev = 0.0;
    for (std::size_t horizon = 1; horizon <= 4; ++horizon) {
      double v = exact_soft_value(t, 0, t.prior, horizon, 1.3);
      CHECK(v >= prev - 1e-12);
      prev = v;
    }
  }
}

TEST_CASE("equal soft-Q actions tilt back to the prior policy") {
  // Reward and transitions ignore the action entirely.
  FiniteTaskSet t;
  t.n_states = 2;
  t.n_actions = 2;
  t.n_hyp = 2;
  t.prior = {0.5, 0.5};
  t.reward.assign(8, 0.0);
  t.transition.assign(16, 0.0);
  for (std::size_t h = 0; h < 2; ++h)
    for (std::size_t a = 0; a < 2; ++a) {
      t.r(h, 0, a) = h == 0 ? 0.2 : 0.9;
      t.r(h, 1, a) = 0.4;
      t.p(h, 0, a, 1) = 1.0;
      t.p(h, 1, a, 0) = 1.0;
    }
  t.validate();
  PriorPolicyFn skew = [](int, const std::vector<double>&) {
    return std::vector<double>{0.8, 0.2};
  };
  std::vector<double> q = exact_tilted_policy(t, 0, t.prior, 3, 0.5, skew);
  CHECK(q[0] == doctest::Approx(0.8).epsilon(1e-12));
  CHECK(q[1] == doctest::Approx(0.2).epsilon(1e-12));
}

TEST_CASE("tilted policy approaches the argmax as temperature vanishes") {
  FiniteTaskSet t = FiniteTaskSet::guessing_bandit({0.7, 0.3});
  std::vector<double> q = exact_tilted_policy(t, 0, t.prior, 2, 1e-6);
  CHECK(q[0] > 0.999);  // arm 0 has the higher expected payoff
  // And flattens toward the (uniform) prior policy for huge temperature.
  q = exact_tilted_policy(t, 0, t.prior, 2, 1e6);
  CHECK(q[0] == doctest::Approx(0.5).epsilon(1e-5));
}

TEST_CASE("grouped backward induction matches the naive enumeration") {
  RngStream rng(4016);
  for (int rep = 0; rep < 40; ++rep) {
    FiniteTaskSet t = random_task(rng, 2, 2, 2);
    for (std::size_t horizon : {1, 2, 3}) {
      double T = rng.uniform(0.3, 2.0);
      SoftBackup got = soft_backup(t, 0, t.prior, horizon, T, uniform_policy(t.n_actions));
      double want_v = naive_value(t, 0, t.prior, horizon, T);
      std::vector<double> want_q = naive_tilted(t, 0, t.prior, horizon, T);
      CHECK(got.value == doctest::Approx(want_v).epsilon(1e-9));
      for (std::size_t a = 0; a < t.n_actions; ++a)
        CHECK(got.tilted[a] == doctest::Approx(want_q[a]).epsilon(1e-9));
    }
  }
}

TEST_CASE("guessing bandit root policy has the closed sigmoid form") {
  // Pulling either arm reveals the hypothesis, and the post-revelation soft
  // values are equal by arm symmetry, so the continuation terms cancel and
  // q*(arm0) = sigmoid((b0 - b1) / T) exactly, at every horizon.
  FiniteTaskSet t = FiniteTaskSet::guessing_bandit({0.7, 0.3});
  double T = 0.5;
  double want = 1.0 / (1.0 + std::exp(-(0.7 - 0.3) / T));
  for (std::size_t horizon : {1, 2, 3}) {
    std::vector<double> q = exact_tilted_policy(t, 0, t.prior, horizon, T);
    CHECK(q[0] == doctest::Approx(want).epsilon(1e-12));
    CHECK(q[1] == doctest::Approx(1.0 - want).epsilon(1e-12));
    std::vector<double> nq = naive_tilted(t, 0, t.prior, horizon, T);
    CHECK(q[0] == doctest::Approx(nq[0]).epsilon(1e-11));
  }
}

TEST_CASE("relabelling hypotheses and states permutes the oracle outputs") {
  RngStream rng(4017);
  for (int rep = 0; rep < 20; ++rep) {
    FiniteTaskSet t = random_task(rng, 3, 2, 3);
    // Permute hypotheses by sigma_h = (1 2 0) and states by sigma_s = (2 0 1).
    const std::size_t sh[3] = {1, 2, 0}, ss[3] = {2, 0, 1};
    FiniteTaskSet u = t;
    for (std::size_t h = 0; h < 3; ++h) {
      u.prior[sh[h]] = t.prior[h];
      for (std::size_t s = 0; s < 3; ++s)
        for (std::size_t a = 0; a < 2; ++a) {
          u.r(sh[h], ss[s], a) = t.r(h, s, a);
          for (std::size_t s2 = 0; s2 < 3; ++s2)
            u.p(sh[h], ss[s], a, ss[s2]) = t.p(h, s, a, s2);
        }
    }
    u.validate();
    std::vector<Transition> hist = simulate_history(t, rng, 3);
    std::vector<Transition> hist2 = hist;
    for (Transition& tr : hist2) {
      tr.s = int(ss[std::size_t(tr.s)]);
      tr.s2 = int(ss[std::size_t(tr.s2)]);
    }
    std::vector<double> post = exact_posterior(t, hist);
    std::vector<double> post2 = exact_posterior(u, hist2);
    for (std::size_t h = 0; h < 3; ++h)
      CHECK(post2[sh[h]] == doctest::Approx(post[h]).epsilon(1e-12));
    double v = exact_soft_value(t, 1, t.prior, 3, 0.8);
    double v2 = exact_soft_value(u, int(ss[1]), u.prior, 3, 0.8);
    CHECK(v == doctest::Approx(v2).epsilon(1e-12));
  }
}

TEST_CASE("tilted policies normalize across a thousand random tasks") {
  RngStream rng(4018);
  for (int rep = 0; rep < 1000; ++rep) {
    FiniteTaskSet t = random_task(rng, 2, 3, 2);
    std::vector<double> q = exact_tilted_policy(t, 0, t.prior, 2, rng.uniform(0.2, 2.0));
    double z = 0;
    for (double v : q) {
      CHECK(v >= 0.0);
      z += v;
    }
    CHECK(z == doctest::Approx(1.0).epsilon(1e-12));
  }
}

TEST_CASE("degenerate beliefs reduce to the known-MDP soft value") {
  RngStream rng(4019);
  for (int rep = 0; rep < 20; ++rep) {
    FiniteTaskSet t = random_task(rng, 3, 2, 3);
    for (std::size_t h = 0; h < t.n_hyp; ++h) {
      std::vector<double> onehot(t.n_hyp, 0.0);
      onehot[h] = 1.0;
      double a = exact_soft_value(t, 0, onehot, 3, 0.9);
      double b = known_mdp_soft_value(t, h, 0, 3, 0.9, uniform_policy(t.n_actions));
      CHECK(a == doctest::Approx(b).epsilon(1e-12));
    }
  }
}

TEST_CASE("known-MDP soft value has the closed one-step form") {
  FiniteTaskSet t = FiniteTaskSet::guessing_bandit({0.5, 0.5});
  // Known hypothesis 0: arm 0 pays 1, arm 1 pays 0.
  double T = 1.0;
  double want = std::log(0.5 * (std::exp(1.0) + 1.0));
  double got = known_mdp_soft_value(t, 0, 0, 1, T, uniform_policy(2));
  CHECK(got == doctest::Approx(want).epsilon(1e-14));
}
