#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <limits>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "vbsd/autodiff.hpp"
#include "vbsd/belief.hpp"
#include "vbsd/checkpoint.hpp"
#include "vbsd/envs.hpp"
#include "vbsd/error.hpp"
#include "vbsd/models.hpp"
#include "vbsd/planner.hpp"
#include "vbsd/rng.hpp"
#include "vbsd/tensor.hpp"
#include "vbsd/threads.hpp"

namespace vbsd::trainer {

// ---- TD(lambda) targets ------------------------------------------------------

// values has length rewards.size() + 1: per-step state values plus the
// bootstrap at the trajectory end. meta_done[t] marks a true terminal (task
// lifetime over) — the return is cut there and nowhere else; inner-episode
// boundaries deliberately do not appear here at all.
inline std::vector<double> td_lambda_targets(std::span<const double> rewards,
                                             std::span<const double> values,
                                             std::span<const std::uint8_t> meta_done,
                                             double discount, double lambda) {
  const std::size_t n = rewards.size();
  require(values.size() == n + 1, "td_lambda_targets: need n+1 values (bootstrap at the end)");
  require(meta_done.size() == n, "td_lambda_targets: flag count mismatch");
  require(lambda >= 0 && lambda <= 1, "td_lambda_targets: lambda must lie in [0, 1]");
  std::vector<double> out(n);
  double g = values[n];
  for (std::size_t t = n; t-- > 0;) {
    g = meta_done[t]
            ? rewards[t]
            : rewards[t] + discount * ((1.0 - lambda) * values[t + 1] + lambda * g);
    out[t] = g;
  }
  return out;
}

// ---- optimizer ---------------------------------------------------------------

struct OptimizerConfig {
  double learning_rate = 3e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  double weight_decay = 1e-6;  // decoupled
  double clip_value = 1.0;     // elementwise, applied first
  double clip_norm = 1.0;      // global norm, applied second
};

// AdamW with the two clipping stages applied in order: elementwise clamp to
// |g| <= clip_value, then rescale everything to global norm <= clip_norm.
class AdamW {
 public:
  AdamW(OptimizerConfig cfg, const ParameterStore& params) : cfg_(cfg) {
    m_.reserve(params.count());
    v_.reserve(params.count());
    for (std::size_t i = 0; i < params.count(); ++i) {
      m_.push_back(Tensor(params.value(i).shape()));
      v_.push_back(Tensor(params.value(i).shape()));
    }
  }

  std::size_t steps() const { return t_; }

  void step(ParameterStore& params, std::vector<Tensor>& grads) {
    require(grads.size() == m_.size(), "AdamW: gradient count mismatch");
    double sq = 0;
    for (std::size_t i = 0; i < grads.size(); ++i) {
      require(grads[i].shape() == params.value(i).shape(), "AdamW: gradient shape mismatch");
      for (double& g : grads[i].data()) {
        require(std::isfinite(g), "AdamW: non-finite gradient");
        g = std::clamp(g, -cfg_.clip_value, cfg_.clip_value);
        sq += g * g;
      }
    }
    double norm = std::sqrt(sq);
    if (norm > cfg_.clip_norm) {
      double s = cfg_.clip_norm / norm;
      for (Tensor& g : grads)
        for (double& x : g.data()) x *= s;
    }
    ++t_;
    double bc1 = 1.0 - std::pow(cfg_.beta1, double(t_));
    double bc2 = 1.0 - std::pow(cfg_.beta2, double(t_));
    for (std::size_t i = 0; i < grads.size(); ++i) {
      std::span<double> theta = params.value(i).data();
      std::span<const double> g = grads[i].data();
      std::span<double> m = m_[i].data();
      std::span<double> v = v_[i].data();
      for (std::size_t j = 0; j < theta.size(); ++j) {
        m[j] = cfg_.beta1 * m[j] + (1.0 - cfg_.beta1) * g[j];
        v[j] = cfg_.beta2 * v[j] + (1.0 - cfg_.beta2) * g[j] * g[j];
        double mhat = m[j] / bc1;
        double vhat = v[j] / bc2;
        theta[j] -= cfg_.learning_rate *
                    (mhat / (std::sqrt(vhat) + cfg_.epsilon) + cfg_.weight_decay * theta[j]);
      }
    }
  }

 private:
  OptimizerConfig cfg_;
  std::size_t t_ = 0;
  std::vector<Tensor> m_, v_;
};

// Per-parameter gradients from a tape, zeros for parameters the graph never
// touched (e.g. the state decoder in the function family).
inline std::vector<Tensor> harvest_gradients(ad::Tape& tape, const ParameterStore& params) {
  std::vector<Tensor> out;
  out.reserve(params.count());
  for (std::size_t i = 0; i < params.count(); ++i) {
    const Tensor& p = params.value(i);
    out.push_back(tape.has_leaf(p) ? tape.grad(tape.leaf(p)) : Tensor(p.shape()));
  }
  return out;
}

// ---- replay ------------------------------------------------------------------

struct ReplayEntry {
  Tensor obs;             // observation at which the action was chosen
  envs::Clock clock;      // position inside the meta-episode at acting time
  Tensor action_raw;      // encoded action
  double reward = 0;
  Tensor next_obs;        // recorded observation emitted by the step
  bool inner_done = false;
  bool meta_done = false;
  bool meta_start = false;  // first step of a task lifetime (belief reset)
  std::vector<double> policy_probs;          // discrete planner target
  std::vector<envs::Action> policy_actions;  // continuous planner target …
  std::vector<double> policy_weights;        // … as weighted action samples
  double root_value = 0;  // planner value estimate at acting time
  double td_target = 0;
  models::Hidden hidden;     // inference state at acting time
  belief::BeliefParams phi;  // belief at acting time
  std::size_t cached_iteration = 0;
  std::size_t env_index = 0;
  std::uint64_t step_index = 0;
};

// Per-environment circular store over whole task lifetimes. Windows for the
// loss are sampled from contiguous in-lifetime runs only.
class ReplayBuffer {
 public:
  ReplayBuffer(std::size_t n_envs, std::size_t capacity_per_env)
      : cap_(capacity_per_env), rings_(n_envs), written_(n_envs, 0) {
    require(n_envs >= 1 && cap_ >= 1, "ReplayBuffer: empty dimensions");
    for (auto& r : rings_) r.resize(cap_);
  }

  std::size_t capacity_per_env() const { return cap_; }
  std::size_t n_envs() const { return rings_.size(); }
  std::uint64_t written(std::size_t env) const { return written_[env]; }
  std::uint64_t begin_index(std::size_t env) const {
    return written_[env] > cap_ ? written_[env] - cap_ : 0;
  }
  std::size_t size() const {
    std::size_t n = 0;
    for (std::size_t e = 0; e < rings_.size(); ++e)
      n += std::size_t(written_[e] - begin_index(e));
    return n;
  }

  void push(std::size_t env, ReplayEntry entry) {
    rings_[env][written_[env] % cap_] = std::move(entry);
    ++written_[env];
  }

  ReplayEntry& at(std::size_t env, std::uint64_t abs_index) {
    require(abs_index >= begin_index(env) && abs_index < written_[env],
            "ReplayBuffer: index expired or unwritten");
    return rings_[env][abs_index % cap_];
  }
  const ReplayEntry& at(std::size_t env, std::uint64_t abs_index) const {
    return const_cast<ReplayBuffer*>(this)->at(env, abs_index);
  }

  // One in-lifetime run of currently valid entries. `from_reset` tells
  // whether the run begins at the lifetime's first step (so the inference
  // prefix can be replayed from the initial state).
  struct Segment {
    std::size_t env = 0;
    std::uint64_t begin = 0;
    std::uint64_t end = 0;
    bool from_reset = false;
  };

  std::vector<Segment> segments() const {
    std::vector<Segment> out;
    for (std::size_t e = 0; e < rings_.size(); ++e) {
      std::uint64_t lo = begin_index(e), hi = written_[e];
      std::uint64_t start = lo;
      bool from_reset = lo < hi && at(e, lo).meta_start;
      for (std::uint64_t i = lo; i < hi; ++i) {
        const ReplayEntry& entry = at(e, i);
        if (i > start && entry.meta_start) {
          out.push_back({e, start, i, from_reset});
          start = i;
          from_reset = true;
        }
        if (entry.meta_done) {
          out.push_back({e, start, i + 1, from_reset});
          start = i + 1;
          from_reset = true;  // the next entry, if any, starts a lifetime
        }
      }
      if (start < hi) out.push_back({e, start, hi, from_reset});
    }
    return out;
  }

 private:
  std::size_t cap_;
  std::vector<std::vector<ReplayEntry>> rings_;
  std::vector<std::uint64_t> written_;
};

// ---- loss --------------------------------------------------------------------

struct LossSettings {
  std::size_t burn_in = 8;
  std::size_t unroll_window = 4;
  std::size_t decode_window = 4;
  std::size_t k_elbo = 10;
  double c_v = 0.5;
  double c_pi = 1.0;
  double c_ent = 3e-4;
  double belief_kl_weight = 0.01;  // multiplies only the KL inside the belief term
  double belief_entropy_weight = belief::kEntropyBonusWeight;

  std::size_t window_length() const { return burn_in + unroll_window; }

  void validate() const {
    require(unroll_window >= 1, "loss: unroll window must be at least 1");
    require(decode_window >= 1, "loss: decode window must be at least 1");
    require(burn_in >= decode_window, "loss: burn-in shorter than the decode window");
    require(burn_in >= unroll_window, "loss: burn-in shorter than the unroll window");
    require(k_elbo >= 1, "loss: need at least one decode sample");
  }
};

struct LossComponents {
  double value = 0;
  double policy = 0;
  double belief_kl = 0;
  double belief_decode = 0;
  double belief_entropy = 0;
  double policy_entropy = 0;
  double total = 0;

  LossComponents& operator+=(const LossComponents& o) {
    value += o.value;
    policy += o.policy;
    belief_kl += o.belief_kl;
    belief_decode += o.belief_decode;
    belief_entropy += o.belief_entropy;
    policy_entropy += o.policy_entropy;
    total += o.total;
    return *this;
  }
  LossComponents& operator/=(double d) {
    value /= d;
    policy /= d;
    belief_kl /= d;
    belief_decode /= d;
    belief_entropy /= d;
    policy_entropy /= d;
    total /= d;
    return *this;
  }
};

struct WindowView {
  std::span<const ReplayEntry> entries;  // burn_in + unroll_window entries
  models::Hidden start_hidden;           // inference state before entries[0]
  std::string id;                        // for error reports
};

namespace detail {
inline models::HistoryStep history_step(const ReplayEntry& e) {
  return {e.action_raw, e.reward, e.next_obs, e.inner_done};
}

inline ad::Value weighted_mean_sum(ad::Tape& tape, std::span<const ad::Value> terms,
                                   double inv_count) {
  ad::Value acc = terms[0];
  for (std::size_t i = 1; i < terms.size(); ++i) acc = tape.add(acc, terms[i]);
  return tape.scale(acc, inv_count);
}
}  // namespace detail

// Gradient-free burn-in: the inference state entering the loss region plus
// the beliefs along the prefix, which serve as the KL priors.
struct WindowPrefix {
  models::Hidden hidden;
  std::vector<belief::BeliefParams> priors;
};

inline WindowPrefix replay_prefix(const models::Model& model, const WindowView& w,
                                  const LossSettings& ls) {
  ls.validate();
  require(w.entries.size() == ls.window_length(), "window_loss: wrong entry count");
  WindowPrefix out;
  out.priors.reserve(ls.burn_in);
  out.hidden = w.start_hidden;
  for (std::size_t p = 0; p < ls.burn_in; ++p) {
    out.priors.push_back(model.belief_of(out.hidden));
    out.hidden = model.infer_step(out.hidden, detail::history_step(w.entries[p]));
  }
  return out;
}

// One training window given its replayed burn-in: unroll the loss steps on
// the tape. Per loss step t: value and policy losses at (S_t, sg[M_t ~ b_t]),
// cross-entropy toward the planner target, and the evidence bound of b_t
// against the belief from burn_in steps earlier, decoding the most recent
// decode_window transitions. Returns the per-window mean components;
// *total_out is the differentiable scalar
// c_v*value + c_pi*policy + (kl_w*KL - decode - ent_w*H_b) - c_ent*H_pi.
inline LossComponents window_loss_from(ad::Tape& tape, const models::Model& model,
                                       const WindowView& w, const WindowPrefix& prefix,
                                       const LossSettings& ls, RngStream& rng,
                                       ad::Value* total_out) {
  ls.validate();
  const envs::MetaLayout& layout = model.config().layout;
  require(w.entries.size() == ls.window_length(), "window_loss: wrong entry count");
  require(prefix.priors.size() == ls.burn_in, "window_loss: prefix length mismatch");
  const std::vector<belief::BeliefParams>& prior_phi = prefix.priors;

  std::vector<ad::Value> value_terms, policy_terms, kl_terms, decode_terms, belief_ent_terms,
      policy_ent_terms;
  models::Model::TapeHidden th = model.hidden_constants(tape, prefix.hidden);
  for (std::size_t i = 0; i < ls.unroll_window; ++i) {
    const std::size_t p = ls.burn_in + i;
    const ReplayEntry& entry = w.entries[p];
    models::Model::TapeBelief tb = model.belief_head_nodes(tape, th);

    // Head inputs: one reparameterized belief sample with stopped gradient.
    belief::BeliefParams phi_now(tape.value(tb.mean), tape.value(tb.log_std));
    ad::Value m_sg = tape.constant(belief::sample_gaussian(phi_now, rng));
    ad::Value feat =
        tape.constant(models::state_features(layout, entry.obs, entry.clock));

    ad::Value v = model.value_node(tape, feat, m_sg);
    value_terms.push_back(
        tape.scale(tape.square(tape.add_scalar(tape.neg(v), entry.td_target)), 0.5));

    models::Model::PolicyNodes pn = model.policy_nodes(tape, feat, m_sg);
    if (layout.discrete_actions()) {
      require(entry.policy_probs.size() == layout.action_dim(),
              "window_loss: bad policy target at " + w.id);
      Tensor q({entry.policy_probs.size()});
      for (std::size_t a = 0; a < q.size(); ++a) q[a] = entry.policy_probs[a];
      policy_terms.push_back(
          tape.neg(tape.sum(tape.mul(tape.constant(std::move(q)), pn.log_probs))));
    } else {
      require(!entry.policy_actions.empty(), "window_loss: empty policy target at " + w.id);
      ad::Value ce;
      bool first = true;
      for (std::size_t k = 0; k < entry.policy_actions.size(); ++k) {
        Tensor a_raw = models::encode_action(layout, entry.policy_actions[k]);
        ad::Value lp =
            tape.scale(model.policy_log_prob_node(tape, pn, a_raw), entry.policy_weights[k]);
        ce = first ? lp : tape.add(ce, lp);
        first = false;
      }
      policy_terms.push_back(tape.neg(ce));
    }
    policy_ent_terms.push_back(model.policy_entropy_node(tape, pn));

    kl_terms.push_back(belief::gaussian_kl_node(tape, tb.mean, tb.log_std, prior_phi[i]));
    belief_ent_terms.push_back(belief::gaussian_entropy_node(tape, tb.log_std));

    std::vector<ad::Value> samples = model.sample_belief_nodes(tape, tb, ls.k_elbo, rng);
    ad::Value dec;
    bool first_dec = true;
    for (const ad::Value& m : samples) {
      for (std::size_t q = p - ls.decode_window; q < p; ++q) {
        const ReplayEntry& de = w.entries[q];
        models::DecodeInput din{models::state_features(layout, de.obs, de.clock), de.action_raw,
                                de.reward, de.next_obs, de.inner_done};
        ad::Value term = model.decode_node(tape, m, din);
        dec = first_dec ? term : tape.add(dec, term);
        first_dec = false;
      }
    }
    decode_terms.push_back(tape.scale(dec, 1.0 / double(ls.k_elbo)));

    if (i + 1 < ls.unroll_window)
      th = model.infer_step_nodes(tape, th, detail::history_step(entry));
  }

  const double inv_w = 1.0 / double(ls.unroll_window);
  ad::Value value_mean = detail::weighted_mean_sum(tape, value_terms, inv_w);
  ad::Value policy_mean = detail::weighted_mean_sum(tape, policy_terms, inv_w);
  ad::Value kl_mean = detail::weighted_mean_sum(tape, kl_terms, inv_w);
  ad::Value decode_mean = detail::weighted_mean_sum(tape, decode_terms, inv_w);
  ad::Value belief_ent_mean = detail::weighted_mean_sum(tape, belief_ent_terms, inv_w);
  ad::Value policy_ent_mean = detail::weighted_mean_sum(tape, policy_ent_terms, inv_w);

  ad::Value total = tape.scale(value_mean, ls.c_v);
  total = tape.add(total, tape.scale(policy_mean, ls.c_pi));
  total = tape.add(total, tape.scale(kl_mean, ls.belief_kl_weight));
  total = tape.add(total, tape.scale(decode_mean, -1.0));
  total = tape.add(total, tape.scale(belief_ent_mean, -ls.belief_entropy_weight));
  total = tape.add(total, tape.scale(policy_ent_mean, -ls.c_ent));

  LossComponents out;
  out.value = tape.value(value_mean).scalar_value();
  out.policy = tape.value(policy_mean).scalar_value();
  out.belief_kl = tape.value(kl_mean).scalar_value();
  out.belief_decode = tape.value(decode_mean).scalar_value();
  out.belief_entropy = tape.value(belief_ent_mean).scalar_value();
  out.policy_entropy = tape.value(policy_ent_mean).scalar_value();
  out.total = tape.value(total).scalar_value();
  require(std::isfinite(out.total), "window_loss: non-finite loss for window " + w.id);
  if (total_out) *total_out = total;
  return out;
}

inline LossComponents window_loss(ad::Tape& tape, const models::Model& model,
                                  const WindowView& w, const LossSettings& ls, RngStream& rng,
                                  ad::Value* total_out) {
  return window_loss_from(tape, model, w, replay_prefix(model, w, ls), ls, rng, total_out);
}

// Max relative error between tape gradients of the window loss and central
// finite differences of the frozen-prefix objective. The designed truncations
// are accounted for analytically: the stop-gradient head sample (value/policy
// losses reach the belief pathway only through it) and the gradient-blocked
// policy term inside the decode likelihood. Parameters are perturbed in place
// and restored; worst_param, if given, names the worst element.
inline double loss_gradient_check(models::Model& model, const WindowView& w,
                                  const LossSettings& ls, std::uint64_t seed,
                                  std::string* worst_param = nullptr) {
  const WindowPrefix prefix = replay_prefix(model, w, ls);
  auto eval = [&]() {
    ad::Tape tape;
    RngStream rng(seed);
    return window_loss_from(tape, model, w, prefix, ls, rng, nullptr);
  };

  ad::Tape tape;
  RngStream rng(seed);
  ad::Value total;
  window_loss_from(tape, model, w, prefix, ls, rng, &total);
  tape.backward(total);
  std::vector<Tensor> analytic = harvest_gradients(tape, model.params());

  ParameterStore& ps = model.params();
  double worst = 0;
  for (std::size_t p = 0; p < ps.count(); ++p) {
    const std::string& name = ps.name(p);
    Tensor& theta = ps.value(p);
    for (std::size_t i = 0; i < theta.size(); ++i) {
      double keep = theta[i];
      double h = 1e-6 * std::max(1.0, std::abs(keep));
      theta[i] = keep + h;
      LossComponents up = eval();
      theta[i] = keep - h;
      LossComponents dn = eval();
      theta[i] = keep;
      auto fd = [&](double a, double b) { return (a - b) / (2.0 * h); };
      double expected = fd(up.total, dn.total);
      if (name.starts_with("head.policy")) {
        expected += fd(up.belief_decode, dn.belief_decode);
      } else if (!(name.starts_with("head.value") || name.starts_with("dec."))) {
        expected -= ls.c_v * fd(up.value, dn.value);
        expected -= ls.c_pi * fd(up.policy, dn.policy);
        expected += ls.c_ent * fd(up.policy_entropy, dn.policy_entropy);
      }
      double a = analytic[p][i];
      double rel = std::abs(a - expected) / std::max({1.0, std::abs(a), std::abs(expected)});
      if (rel > worst) {
        worst = rel;
        if (worst_param) *worst_param = name + "[" + std::to_string(i) + "]";
      }
    }
  }
  return worst;
}

// Recompute a stale cached inference state with the current parameters by
// replaying the task-lifetime prefix from the initial state. Possible only
// when the prefix back to the lifetime start is still in the ring
// (from_reset); entries cached within max_age/2 iterations are left alone.
// Returns whether a refresh happened.
inline bool refresh_cached_state(const models::Model& model, ReplayBuffer& buffer,
                                 std::size_t env, std::uint64_t seg_begin, bool from_reset,
                                 std::uint64_t start, std::size_t iteration,
                                 std::size_t max_age) {
  ReplayEntry& e = buffer.at(env, start);
  if (iteration <= e.cached_iteration + max_age / 2) return false;
  if (!from_reset) return false;
  std::vector<models::HistoryStep> prefix;
  prefix.reserve(std::size_t(start - seg_begin));
  for (std::uint64_t a = seg_begin; a < start; ++a)
    prefix.push_back(detail::history_step(buffer.at(env, a)));
  e.hidden = model.infer_scan(model.initial_hidden(), prefix);
  e.phi = model.belief_of(e.hidden);
  e.cached_iteration = iteration;
  return true;
}

// ---- training loop -----------------------------------------------------------

struct TrainConfig {
  planner::PlanConfig plan;  // K, K_Omega, depth, temperature, resample period
  LossSettings loss;
  OptimizerConfig optimizer;
  std::size_t minibatch = 1024;  // windows per SGD step
  std::size_t sgd_steps = 32;
  std::size_t unroll_len = 64;  // environment steps per outer iteration
  std::size_t parallel_envs = 32;
  double td_lambda = 1.0;
  double discount = 0.99;
  std::size_t buffer_max_age = 16;  // in outer iterations

  std::size_t buffer_capacity_per_env() const { return buffer_max_age * unroll_len; }

  void validate(const envs::MetaLayout& layout) const {
    plan.validate();
    loss.validate();
    require(minibatch >= 1 && sgd_steps >= 1, "train: need at least one SGD step");
    require(parallel_envs >= 1, "train: need at least one environment");
    require(buffer_max_age >= 1, "train: buffer max age must be at least 1");
    require(unroll_len >= loss.window_length(),
            "train: loss window longer than the unroll length");
    require(loss.window_length() <= layout.meta_len(),
            "train: loss window longer than a task lifetime");
  }

  static TrainConfig fourier_defaults() {
    TrainConfig c;
    c.loss.burn_in = 8;
    c.loss.unroll_window = 4;
    c.loss.decode_window = 4;
    c.loss.c_ent = 3e-4;
    c.unroll_len = 64;
    return c;
  }
  static TrainConfig grid_defaults() {
    TrainConfig c;
    c.loss.burn_in = 12;
    c.loss.unroll_window = 6;
    c.loss.decode_window = 6;
    c.loss.c_ent = 0.1;
    c.unroll_len = 128;
    return c;
  }
};

struct StepObservation {
  std::size_t iteration = 0;
  std::size_t env_index = 0;
  std::uint64_t step_index = 0;
  const models::Hidden* hidden = nullptr;    // post-update inference state
  const belief::BeliefParams* phi = nullptr;
  double reward = 0;
  bool inner_done = false;
  bool meta_done = false;
};
using StepObserver = std::function<void(const StepObservation&)>;

struct IterationRow {
  std::size_t iteration = 0;
  std::size_t episodes = 0;      // meta-episodes completed this iteration
  double mean_return = 0;        // over those episodes (nan if none)
  double mean_ess = 0;           // planner effective sample size, all depths
  double mean_root_value = 0;
  LossComponents loss;           // mean over the SGD steps
  double wall_seconds = 0;       // measured; excluded from deterministic files
};

// Soft ensemble readout of the value head for trajectory-end bootstraps.
inline double soft_value_bootstrap(const models::Model& model, const Tensor& obs,
                                   const envs::Clock& clock, const belief::BeliefParams& phi,
                                   std::size_t k, double temperature, RngStream& rng) {
  const envs::MetaLayout& layout = model.config().layout;
  if (clock.at_meta_end(layout)) return 0.0;
  Tensor feat = models::state_features(layout, obs, clock);
  std::vector<Tensor> samples = belief::sample_gaussian(phi, k, rng);
  std::vector<double> weights(k, 1.0 / double(k)), values(k);
  for (std::size_t j = 0; j < k; ++j) values[j] = model.value(feat, samples[j]);
  return planner::soft_value_term(weights, values, temperature);
}

class Trainer {
 public:
  Trainer(models::Model& model, TrainConfig cfg, std::uint64_t seed)
      : model_(&model),
        cfg_(std::move(cfg)),
        layout_(model.config().layout),
        buffer_(cfg_.parallel_envs, cfg_.buffer_capacity_per_env()),
        optimizer_(cfg_.optimizer, model.params()),
        root_(seed) {
    cfg_.validate(layout_);
    runners_.reserve(cfg_.parallel_envs);
    for (std::size_t e = 0; e < cfg_.parallel_envs; ++e) {
      runners_.push_back(EnvRunner{envs::MetaEnv(layout_), root_.split(e)});
    }
  }

  const ReplayBuffer& buffer() const { return buffer_; }
  const TrainConfig& config() const { return cfg_; }

  IterationRow run_iteration(std::size_t iteration, const StepObserver& observer = {}) {
    collect(iteration, observer);
    IterationRow row = stats_;
    row.iteration = iteration;
    row.loss = optimize(iteration);
    return row;
  }

  std::vector<IterationRow> run(std::size_t iterations, const StepObserver& observer = {}) {
    std::vector<IterationRow> rows;
    rows.reserve(iterations);
    for (std::size_t n = 1; n <= iterations; ++n) rows.push_back(run_iteration(n, observer));
    return rows;
  }

 private:
  struct EnvRunner {
    envs::MetaEnv env;
    RngStream rng;
    Tensor obs;
    models::Hidden hidden;
    belief::BeliefParams phi;
    double episode_return = 0;
    bool need_reset = true;
    std::uint64_t child = 0;     // split counter for plan calls
    std::uint64_t steps = 0;
    // per-iteration scratch
    std::vector<double> returns;
    double ess_sum = 0, value_sum = 0;
    std::size_t ess_count = 0, value_count = 0;
  };

  void collect(std::size_t iteration, const StepObserver& observer) {
    parallel_for(runners_.size(), [&](std::size_t e) { collect_env(e, iteration, observer); });
    std::size_t episodes = 0;
    double ret = 0, ess = 0, val = 0;
    std::size_t ess_n = 0, val_n = 0;
    for (EnvRunner& r : runners_) {
      episodes += r.returns.size();
      for (double x : r.returns) ret += x;
      ess += r.ess_sum;
      ess_n += r.ess_count;
      val += r.value_sum;
      val_n += r.value_count;
      r.returns.clear();
      r.ess_sum = r.value_sum = 0;
      r.ess_count = r.value_count = 0;
    }
    stats_ = IterationRow{};
    stats_.episodes = episodes;
    stats_.mean_return = episodes ? ret / double(episodes)
                                  : std::numeric_limits<double>::quiet_NaN();
    stats_.mean_ess = ess_n ? ess / double(ess_n) : double(cfg_.plan.particles);
    stats_.mean_root_value = val_n ? val / double(val_n) : 0.0;
  }

  void collect_env(std::size_t e, std::size_t iteration, const StepObserver& observer) {
    EnvRunner& r = runners_[e];
    const std::uint64_t first = buffer_.written(e);
    for (std::size_t s = 0; s < cfg_.unroll_len; ++s) {
      bool fresh = r.need_reset;
      if (fresh) {
        r.obs = r.env.reset(r.rng);
        r.hidden = model_->initial_hidden();
        r.phi = model_->initial_belief();
        r.episode_return = 0;
        r.need_reset = false;
      }

      planner::LearnedAdapter adapter(*model_, reset_observation(r));
      RngStream plan_rng = r.rng.split(r.child++);
      planner::PlanResult plan = planner::plan(
          adapter, cfg_.plan, planner::LearnedState{r.obs, r.env.clock()},
          planner::LearnedBelief{r.hidden, r.phi}, plan_rng);
      for (double x : plan.ess) {
        r.ess_sum += x;
        ++r.ess_count;
      }
      r.value_sum += plan.root_value;
      ++r.value_count;

      envs::Action action = plan.root_policy.sample(r.rng);

      ReplayEntry entry;
      entry.obs = r.obs;
      entry.clock = r.env.clock();
      entry.action_raw = models::encode_action(layout_, action);
      entry.meta_start = fresh;
      entry.root_value = plan.root_value;
      entry.td_target = plan.root_value;  // replaced after the unroll
      entry.hidden = r.hidden;
      entry.phi = r.phi;
      entry.cached_iteration = iteration;
      entry.env_index = e;
      entry.step_index = r.steps++;
      if (layout_.discrete_actions()) {
        entry.policy_probs = planner::extract_root_policy(plan.root_policy, layout_.action_dim());
      } else {
        entry.policy_actions = plan.root_policy.actions;
        entry.policy_weights = plan.root_policy.weights;
      }

      envs::StepResult sr = r.env.step(action);
      entry.reward = sr.reward;
      entry.next_obs = sr.observation;
      entry.inner_done = sr.inner_done;
      entry.meta_done = sr.meta_done;
      r.episode_return += sr.reward;

      models::HistoryStep hs{entry.action_raw, sr.reward, sr.observation, sr.inner_done};
      r.hidden = model_->infer_step(r.hidden, hs);
      r.phi = model_->belief_of(r.hidden);
      buffer_.push(e, std::move(entry));

      if (observer) {
        StepObservation so;
        so.iteration = iteration;
        so.env_index = e;
        so.step_index = r.steps - 1;
        so.hidden = &r.hidden;
        so.phi = &r.phi;
        so.reward = sr.reward;
        so.inner_done = sr.inner_done;
        so.meta_done = sr.meta_done;
        observer(so);
      }

      if (sr.meta_done) {
        r.returns.push_back(r.episode_return);
        r.need_reset = true;
      } else {
        r.obs = layout_.kind == envs::Kind::Grid
                    ? envs::grid_observe(layout_.grid_side, r.env.tile())
                    : sr.observation;
      }
    }

    // TD(lambda) over the entries just written, bootstrapped at the cut.
    const std::uint64_t last = buffer_.written(e);
    const std::size_t n = std::size_t(last - first);
    std::vector<double> rewards(n), values(n + 1);
    std::vector<std::uint8_t> done(n);
    for (std::size_t i = 0; i < n; ++i) {
      const ReplayEntry& entry = buffer_.at(e, first + i);
      rewards[i] = entry.reward;
      values[i] = entry.root_value;
      done[i] = entry.meta_done ? 1 : 0;
    }
    RngStream boot_rng = r.rng.split(r.child++);
    values[n] = r.need_reset ? 0.0
                             : soft_value_bootstrap(*model_, r.obs, r.env.clock(), r.phi,
                                                    cfg_.plan.nested, cfg_.plan.temperature,
                                                    boot_rng);
    std::vector<double> targets =
        td_lambda_targets(rewards, values, done, cfg_.discount, cfg_.td_lambda);
    for (std::size_t i = 0; i < n; ++i) buffer_.at(e, first + i).td_target = targets[i];
  }

  Tensor reset_observation(const EnvRunner& r) const {
    if (layout_.kind == envs::Kind::Grid)
      return envs::grid_observe(layout_.grid_side, r.env.grid_task().start);
    return Tensor({layout_.obs_dim()});
  }

  // A sampled window: its segment and absolute start index.
  struct WindowRef {
    std::size_t env = 0;
    std::uint64_t start = 0;
    bool from_reset = false;
    std::uint64_t seg_begin = 0;
  };

  LossComponents optimize(std::size_t iteration) {
    const std::size_t len = cfg_.loss.window_length();
    std::vector<ReplayBuffer::Segment> segs = buffer_.segments();
    std::vector<std::uint64_t> counts;
    std::uint64_t total = 0;
    for (const auto& s : segs) {
      std::uint64_t span = s.end - s.begin;
      std::uint64_t c = span >= len ? span - len + 1 : 0;
      counts.push_back(c);
      total += c;
    }
    require(total > 0, "train: no window in the replay buffer fits the loss window yet");

    RngStream iter_rng = root_.split(0x100000 + iteration);
    LossComponents mean;
    for (std::size_t step = 0; step < cfg_.sgd_steps; ++step) {
      std::vector<WindowRef> windows(cfg_.minibatch);
      for (WindowRef& w : windows) {
        std::uint64_t u = iter_rng.uniform_int(total);
        std::size_t si = 0;
        while (u >= counts[si]) u -= counts[si++];
        w.env = segs[si].env;
        w.start = segs[si].begin + u;
        w.from_reset = segs[si].from_reset;
        w.seg_begin = segs[si].begin;
      }
      for (const WindowRef& w : windows)
        refresh_cached_state(*model_, buffer_, w.env, w.seg_begin, w.from_reset, w.start,
                             iteration, cfg_.buffer_max_age);

      std::vector<std::vector<Tensor>> grads(windows.size());
      std::vector<LossComponents> comps(windows.size());
      parallel_for(windows.size(), [&](std::size_t i) {
        const WindowRef& w = windows[i];
        std::vector<ReplayEntry> entries;
        entries.reserve(len);
        for (std::uint64_t a = w.start; a < w.start + len; ++a)
          entries.push_back(buffer_.at(w.env, a));
        WindowView view{entries, buffer_.at(w.env, w.start).hidden,
                        "env " + std::to_string(w.env) + " step " +
                            std::to_string(entries.front().step_index)};
        RngStream wrng = iter_rng.split(step * cfg_.minibatch + i + 1);
        ad::Tape tape;
        ad::Value total_node;
        comps[i] = window_loss(tape, *model_, view, cfg_.loss, wrng, &total_node);
        tape.backward(total_node);
        grads[i] = harvest_gradients(tape, model_->params());
      });

      std::vector<Tensor> acc = std::move(grads[0]);
      for (std::size_t i = 1; i < grads.size(); ++i)
        for (std::size_t p = 0; p < acc.size(); ++p)
          for (std::size_t j = 0; j < acc[p].size(); ++j) acc[p][j] += grads[i][p][j];
      const double inv = 1.0 / double(windows.size());
      for (Tensor& g : acc)
        for (double& x : g.data()) x *= inv;
      optimizer_.step(model_->params(), acc);

      LossComponents batch;
      for (const LossComponents& c : comps) batch += c;
      batch /= double(comps.size());
      mean += batch;
    }
    mean /= double(cfg_.sgd_steps);
    return mean;
  }

  models::Model* model_;
  TrainConfig cfg_;
  envs::MetaLayout layout_;
  ReplayBuffer buffer_;
  AdamW optimizer_;
  RngStream root_;
  std::vector<EnvRunner> runners_;
  IterationRow stats_;
};

}  // namespace vbsd::trainer
