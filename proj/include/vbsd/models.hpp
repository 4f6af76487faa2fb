#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <map>
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include "vbsd/autodiff.hpp"
#include "vbsd/belief.hpp"
#include "vbsd/checkpoint.hpp"
#include "vbsd/envs.hpp"
#include "vbsd/error.hpp"
#include "vbsd/rng.hpp"
#include "vbsd/tensor.hpp"

namespace vbsd::models {

using belief::BeliefParams;

struct ModelConfig {
  envs::MetaLayout layout;
  std::size_t d_m = 32;                              // latent belief dimension
  std::vector<std::size_t> embed_hidden = {128, 64};  // embedder MLP hidden sizes
  std::size_t embed_dim = 32;                        // per-stream embedding width
  std::size_t conv_channels = 4;                     // grid image encoder channels
  std::size_t ssm_layers = 4;
  std::size_t ssm_dim = 64;
  std::vector<std::size_t> head_hidden = {128, 64, 32};
  double sigma_r = 0.1;       // reward decoder scale (fixed)
  std::size_t k_elbo = 10;    // reparameterized samples per ELBO evaluation
  double policy_log_std_min = -5.0;
  double policy_log_std_max = 2.0;

  std::size_t obs_dim() const { return layout.obs_dim(); }
  std::size_t action_raw_dim() const { return layout.action_dim(); }
  // Heads see the flat observation plus a normalized episode clock, which
  // makes finite-horizon values well-posed.
  std::size_t time_feat_dim() const { return layout.kind == envs::Kind::Grid ? 2 : 1; }
  std::size_t state_feat_dim() const { return obs_dim() + time_feat_dim(); }
  std::size_t policy_out_dim() const {
    return layout.discrete_actions() ? layout.action_dim() : 2 * layout.fourier_dim;
  }
};

// Flat head input for the state at the *current* clock position.
inline Tensor state_features(const envs::MetaLayout& layout, const Tensor& obs,
                             const envs::Clock& clock) {
  require(obs.size() == layout.obs_dim(), "state_features: observation size mismatch");
  std::size_t extra = layout.kind == envs::Kind::Grid ? 2 : 1;
  Tensor out({obs.size() + extra});
  for (std::size_t i = 0; i < obs.size(); ++i) out[i] = obs[i];
  if (layout.kind == envs::Kind::Grid) {
    out[obs.size()] = double(clock.step_in_inner) / double(layout.inner_steps);
    out[obs.size() + 1] = double(clock.episode) / double(layout.inner_episodes);
  } else {
    out[obs.size()] = double(clock.steps_into_meta(layout)) / double(layout.meta_len());
  }
  return out;
}

inline Tensor encode_action(const envs::MetaLayout& layout, const envs::Action& a) {
  if (layout.discrete_actions()) {
    require(a.is_discrete() && a.discrete < int(layout.action_dim()),
            "encode_action: bad discrete action");
    Tensor t({layout.action_dim()});
    t[std::size_t(a.discrete)] = 1.0;
    return t;
  }
  require(a.continuous.size() == layout.action_dim(), "encode_action: bad action dimension");
  return Tensor::vector(a.continuous);
}

// One recorded history step H_t = (A_t, R_t, S_{t+1}): everything the
// inference network consumes and the decoders must explain.
struct HistoryStep {
  Tensor action_raw;  // one-hot (grid) or raw coordinates (function env)
  double reward = 0;
  Tensor next_obs;
  bool inner_done = false;
};

// Decoding context for one transition: features of S_t plus the step itself.
struct DecodeInput {
  Tensor state_feat;
  Tensor action_raw;
  double reward = 0;
  Tensor next_obs;
  bool inner_done = false;
};

struct Hidden {
  std::vector<Tensor> x;  // one recurrent state per SSM layer
};

namespace detail {
inline ad::Tape& scratch_tape() {
  thread_local ad::Tape tape;
  tape.clear();
  return tape;
}
}  // namespace detail

class Model {
 public:
  struct TapeHidden {
    std::vector<ad::Value> x;
  };
  struct TapeBelief {
    ad::Value mean;
    ad::Value log_std;
  };
  struct PolicyNodes {
    bool discrete = true;
    ad::Value log_probs{};  // discrete: [A] log-probabilities
    ad::Value mean{};       // continuous: pre-squash Gaussian parameters
    ad::Value log_std{};
  };

  Model(ModelConfig cfg, RngStream& rng) : cfg_(std::move(cfg)) {
    const std::size_t grid = cfg_.layout.kind == envs::Kind::Grid;
    register_mlp("embed.action", cfg_.action_raw_dim(), cfg_.embed_hidden, cfg_.embed_dim, rng);
    if (grid) {
      const std::size_t c = cfg_.conv_channels;
      add_param("embed.obs.conv0.w", lecun({c, 1, 3, 3}, 9, rng));
      add_param("embed.obs.conv0.b", Tensor({c}));
      add_param("embed.obs.conv1.w", lecun({c, c, 3, 3}, 9 * c, rng));
      add_param("embed.obs.conv1.b", Tensor({c}));
      std::size_t side = conv_out(conv_out(cfg_.layout.grid_side));
      add_param("embed.obs.proj.w",
                lecun({cfg_.embed_dim, c * side * side}, c * side * side, rng));
      add_param("embed.obs.proj.b", Tensor({cfg_.embed_dim}));
    } else {
      register_mlp("embed.obs", cfg_.obs_dim(), cfg_.embed_hidden, cfg_.embed_dim, rng);
    }
    register_mlp("embed.reward", 2, cfg_.embed_hidden, cfg_.embed_dim, rng);

    std::size_t u_dim = 3 * cfg_.embed_dim;
    for (std::size_t l = 0; l < cfg_.ssm_layers; ++l) {
      std::string p = "ssm." + std::to_string(l) + ".";
      Tensor a_raw({cfg_.ssm_dim});
      // A_ii = exp(-exp(a_raw)) uniformly in [0.7, 0.99]: slow-forgetting init.
      for (double& v : a_raw.data()) v = std::log(-std::log(rng.uniform(0.7, 0.99)));
      add_param(p + "a_raw", std::move(a_raw));
      add_param(p + "b", lecun({cfg_.ssm_dim, u_dim}, u_dim, rng));
      add_param(p + "c", Tensor({cfg_.ssm_dim}));
      add_param(p + "x0", Tensor({cfg_.ssm_dim}));
      u_dim = cfg_.ssm_dim;
    }
    add_param("belief.w", lecun({2 * cfg_.d_m, cfg_.ssm_dim}, cfg_.ssm_dim, rng));
    add_param("belief.b", Tensor({2 * cfg_.d_m}));

    std::size_t hz = cfg_.state_feat_dim() + cfg_.d_m;
    register_mlp("head.policy", hz, cfg_.head_hidden, cfg_.policy_out_dim(), rng);
    register_mlp("head.value", hz, cfg_.head_hidden, 1, rng);
    std::size_t dz = cfg_.state_feat_dim() + cfg_.action_raw_dim() + cfg_.d_m;
    register_mlp("dec.reward", dz, cfg_.head_hidden, 1, rng);
    if (grid) register_mlp("dec.state", dz, cfg_.head_hidden, cfg_.obs_dim(), rng);
  }

  const ModelConfig& config() const { return cfg_; }
  ParameterStore& params() { return params_; }
  const ParameterStore& params() const { return params_; }

  // ---- inference network ----

  Hidden initial_hidden() const {
    Hidden h;
    for (std::size_t l = 0; l < cfg_.ssm_layers; ++l)
      h.x.push_back(params_.get("ssm." + std::to_string(l) + ".x0"));
    return h;
  }

  TapeHidden initial_hidden_nodes(ad::Tape& tape) const {
    TapeHidden h;
    for (std::size_t l = 0; l < cfg_.ssm_layers; ++l)
      h.x.push_back(bind(tape, "ssm." + std::to_string(l) + ".x0", false));
    return h;
  }

  TapeHidden hidden_constants(ad::Tape& tape, const Hidden& h) const {
    require(h.x.size() == cfg_.ssm_layers, "hidden_constants: layer count mismatch");
    TapeHidden out;
    for (const Tensor& x : h.x) out.x.push_back(tape.constant(x));
    return out;
  }

  TapeHidden infer_step_nodes(ad::Tape& tape, const TapeHidden& prev, const HistoryStep& step,
                              bool as_const = false) const {
    require(prev.x.size() == cfg_.ssm_layers, "infer_step: layer count mismatch");
    ad::Value u = step_embedding(tape, step, as_const);
    TapeHidden out;
    for (std::size_t l = 0; l < cfg_.ssm_layers; ++l) {
      ad::Value x2 = ssm_step(tape, l, prev.x[l], u, as_const);
      out.x.push_back(x2);
      u = tape.layer_norm(x2);
    }
    return out;
  }

  TapeBelief belief_head_nodes(ad::Tape& tape, const TapeHidden& h, bool as_const = false) const {
    ad::Value u = tape.layer_norm(h.x.back());
    ad::Value raw = tape.add(tape.matvec(bind(tape, "belief.w", as_const), u),
                             bind(tape, "belief.b", as_const));
    TapeBelief out;
    out.mean = tape.slice(raw, 0, cfg_.d_m);
    out.log_std =
        tape.clamp(tape.slice(raw, cfg_.d_m, 2 * cfg_.d_m), belief::kLogStdMin,
                   belief::kLogStdMax);
    return out;
  }

  // Plain (gradient-free) wrappers over the same graphs.
  Hidden infer_step(const Hidden& prev, const HistoryStep& step) const {
    ad::Tape& tape = detail::scratch_tape();
    TapeHidden h = infer_step_nodes(tape, hidden_constants(tape, prev), step, true);
    Hidden out;
    for (ad::Value v : h.x) out.x.push_back(tape.value(v));
    return out;
  }

  BeliefParams belief_of(const Hidden& h) const {
    ad::Tape& tape = detail::scratch_tape();
    TapeBelief b = belief_head_nodes(tape, hidden_constants(tape, h), true);
    return BeliefParams(tape.value(b.mean), tape.value(b.log_std));
  }

  BeliefParams initial_belief() const { return belief_of(initial_hidden()); }

  // Scan mode: consumes a whole step sequence with a doubling prefix
  // combination inside each layer; bit-compatible with repeated infer_step up
  // to floating-point associativity (tested to 1e-12).
  Hidden infer_scan(const Hidden& start, std::span<const HistoryStep> steps) const {
    if (steps.empty()) return start;
    ad::Tape& tape = detail::scratch_tape();
    const std::size_t n = steps.size();
    std::vector<ad::Value> u(n);
    for (std::size_t t = 0; t < n; ++t) u[t] = step_embedding(tape, steps[t], true);
    Hidden out;
    for (std::size_t l = 0; l < cfg_.ssm_layers; ++l) {
      std::string p = "ssm." + std::to_string(l) + ".";
      ad::Value a = tape.exp(tape.neg(tape.exp(tape.constant(params_.get(p + "a_raw")))));
      ad::Value b = tape.constant(params_.get(p + "b"));
      ad::Value c = tape.constant(params_.get(p + "c"));
      // Elementwise affine maps x -> ga*x + gb, combined by doubling.
      std::vector<ad::Value> ga(n, a), gb(n);
      for (std::size_t t = 0; t < n; ++t) gb[t] = tape.add(tape.matvec(b, u[t]), c);
      for (std::size_t shift = 1; shift < n; shift *= 2) {
        std::vector<ad::Value> nga = ga, ngb = gb;
        for (std::size_t t = n; t-- > shift;) {
          nga[t] = tape.mul(ga[t - shift], ga[t]);
          ngb[t] = tape.add(tape.mul(ga[t], gb[t - shift]), gb[t]);
        }
        ga.swap(nga);
        gb.swap(ngb);
      }
      ad::Value x0 = tape.constant(start.x[l]);
      for (std::size_t t = 0; t < n; ++t) {
        ad::Value xt = tape.add(tape.mul(ga[t], x0), gb[t]);
        u[t] = tape.layer_norm(xt);
        if (t + 1 == n) out.x.push_back(tape.value(xt));
      }
    }
    return out;
  }

  // ---- belief sampling (reparameterized) ----

  std::vector<ad::Value> sample_belief_nodes(ad::Tape& tape, const TapeBelief& phi,
                                             std::size_t count, RngStream& rng) const {
    std::vector<ad::Value> out;
    ad::Value sd = tape.exp(phi.log_std);
    for (std::size_t j = 0; j < count; ++j) {
      Tensor eps({cfg_.d_m});
      for (double& v : eps.data()) v = rng.next_gaussian();
      out.push_back(tape.add(phi.mean, tape.mul(sd, tape.constant(eps))));
    }
    return out;
  }

  // ---- heads ----

  ad::Value value_node(ad::Tape& tape, ad::Value state_feat, ad::Value z) const {
    ad::Value in = tape.concat({state_feat, z});
    return tape.sum(mlp_forward(tape, "head.value", in, false));
  }

  double value(const Tensor& state_feat, const Tensor& z) const {
    ad::Tape& tape = detail::scratch_tape();
    ad::Value v = value_node(tape, tape.constant(state_feat), tape.constant(z));
    return tape.value(v).scalar_value();
  }

  PolicyNodes policy_nodes(ad::Tape& tape, ad::Value state_feat, ad::Value z,
                           bool as_const = false) const {
    ad::Value in = tape.concat({state_feat, z});
    ad::Value raw = mlp_forward(tape, "head.policy", in, as_const);
    PolicyNodes out;
    if (cfg_.layout.discrete_actions()) {
      out.discrete = true;
      out.log_probs = tape.log_softmax(raw);
    } else {
      out.discrete = false;
      std::size_t d = cfg_.layout.fourier_dim;
      out.mean = tape.slice(raw, 0, d);
      out.log_std =
          tape.clamp(tape.slice(raw, d, 2 * d), cfg_.policy_log_std_min, cfg_.policy_log_std_max);
    }
    return out;
  }

  // Log-density of a stored environment action under the policy nodes. For
  // the squashed-Gaussian family the action is mapped back through atanh and
  // the exact change-of-variables correction is included.
  ad::Value policy_log_prob_node(ad::Tape& tape, const PolicyNodes& pi,
                                 const Tensor& action_raw) const {
    if (pi.discrete) {
      std::size_t a = argmax_onehot(action_raw);
      return tape.sum(tape.slice(pi.log_probs, a, a + 1));
    }
    std::size_t d = cfg_.layout.fourier_dim;
    Tensor g({d});
    double correction = 0;
    for (std::size_t i = 0; i < d; ++i) {
      double a = std::clamp(action_raw[i], -1.0 + 1e-9, 1.0 - 1e-9);
      g[i] = std::atanh(a);
      // ln(1 - tanh^2 g) = 2 (ln 2 - g - softplus(-2g))
      correction += 2.0 * (std::numbers::ln2 - g[i] - softplus(-2.0 * g[i]));
    }
    ad::Value base = tape.gaussian_log_prob(tape.constant(g), pi.mean, pi.log_std);
    return tape.add_scalar(base, -correction);
  }

  ad::Value policy_entropy_node(ad::Tape& tape, const PolicyNodes& pi) const {
    if (pi.discrete) {
      ad::Value probs = tape.exp(pi.log_probs);
      return tape.neg(tape.sum(tape.mul(probs, pi.log_probs)));
    }
    // Squashed family: the base Gaussian entropy serves as the bonus term.
    return belief::gaussian_entropy_node(tape, pi.log_std);
  }

  // Plain action distribution for rollouts.
  struct PolicyDist {
    bool discrete = true;
    Tensor probs;              // discrete
    Tensor mean, log_std;      // continuous (pre-squash)

    envs::Action sample(RngStream& rng) const {
      if (discrete) return envs::Action::make_discrete(int(rng.next_categorical(probs.data())));
      std::vector<double> a(mean.size());
      for (std::size_t i = 0; i < a.size(); ++i) {
        double g = mean[i] + std::exp(log_std[i]) * rng.next_gaussian();
        // tanh rounds to exactly +-1 past |g| ~ 19; keep samples strictly
        // inside the open interval.
        a[i] = std::clamp(std::tanh(g), -1.0 + 1e-12, 1.0 - 1e-12);
      }
      return envs::Action::make_continuous(std::move(a));
    }
  };

  PolicyDist policy(const Tensor& state_feat, const Tensor& z) const {
    ad::Tape& tape = detail::scratch_tape();
    PolicyNodes n = policy_nodes(tape, tape.constant(state_feat), tape.constant(z), true);
    PolicyDist out;
    out.discrete = n.discrete;
    if (n.discrete) {
      Tensor lp = tape.value(n.log_probs);
      out.probs = Tensor({lp.size()});
      for (std::size_t i = 0; i < lp.size(); ++i) out.probs[i] = std::exp(lp[i]);
    } else {
      out.mean = tape.value(n.mean);
      out.log_std = tape.value(n.log_std);
    }
    return out;
  }

  double policy_log_prob(const Tensor& state_feat, const Tensor& z,
                         const Tensor& action_raw) const {
    ad::Tape& tape = detail::scratch_tape();
    PolicyNodes n = policy_nodes(tape, tape.constant(state_feat), tape.constant(z), true);
    return tape.value(policy_log_prob_node(tape, n, action_raw)).scalar_value();
  }

  // ---- decoders ----

  ad::Value reward_mean_node(ad::Tape& tape, ad::Value state_feat, ad::Value action_raw,
                             ad::Value z, bool as_const = false) const {
    ad::Value in = tape.concat({state_feat, action_raw, z});
    return tape.sum(mlp_forward(tape, "dec.reward", in, as_const));
  }

  ad::Value state_logits_node(ad::Tape& tape, ad::Value state_feat, ad::Value action_raw,
                              ad::Value z, bool as_const = false) const {
    require(cfg_.layout.kind == envs::Kind::Grid, "state decoder is grid-only");
    ad::Value in = tape.concat({state_feat, action_raw, z});
    return mlp_forward(tape, "dec.state", in, as_const);
  }

  // ln p(H_t | S_t, M): reward Gaussian + per-tile Bernoulli next-state term
  // (grid only, masked across inner resets where the next observation is the
  // teleported start tile) + the policy term with gradients into the policy
  // head blocked (they still flow into M).
  ad::Value decode_node(ad::Tape& tape, ad::Value z, const DecodeInput& in,
                        bool as_const = false) const {
    ad::Value feat = tape.constant(in.state_feat);
    ad::Value act = tape.constant(in.action_raw);
    ad::Value rmean = reward_mean_node(tape, feat, act, z, as_const);
    ad::Value total = tape.gaussian_log_prob(
        tape.constant(Tensor::scalar(in.reward)), rmean,
        tape.constant(Tensor::scalar(std::log(cfg_.sigma_r))));
    if (cfg_.layout.kind == envs::Kind::Grid && !in.inner_done) {
      ad::Value logits = state_logits_node(tape, feat, act, z, as_const);
      total = tape.add(total, tape.bernoulli_log_prob(tape.sigmoid(logits),
                                                      tape.constant(in.next_obs)));
    }
    PolicyNodes pi = policy_nodes(tape, feat, z, /*as_const=*/true);
    return tape.add(total, policy_log_prob_node(tape, pi, in.action_raw));
  }

  double decode_log_likelihood(const Tensor& m, const DecodeInput& in) const {
    ad::Tape& tape = detail::scratch_tape();
    return tape.value(decode_node(tape, tape.constant(m), in, true)).scalar_value();
  }

 private:
  static std::size_t conv_out(std::size_t side) { return (side + 2 - 3) / 2 + 1; }

  static double softplus(double x) { return x > 0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x)); }

  static std::size_t argmax_onehot(const Tensor& onehot) {
    std::size_t best = 0;
    for (std::size_t i = 1; i < onehot.size(); ++i)
      if (onehot[i] > onehot[best]) best = i;
    return best;
  }

  Tensor lecun(std::vector<std::size_t> shape, std::size_t fan_in, RngStream& rng) {
    double lim = std::sqrt(3.0 / double(fan_in));
    return Tensor::random_uniform(std::move(shape), -lim, lim, rng);
  }

  void add_param(const std::string& name, Tensor t) { params_.add(name, std::move(t)); }

  void register_mlp(const std::string& prefix, std::size_t in,
                    const std::vector<std::size_t>& hidden, std::size_t out, RngStream& rng) {
    std::vector<std::size_t> dims;
    dims.push_back(in);
    for (std::size_t h : hidden) dims.push_back(h);
    dims.push_back(out);
    mlp_dims_[prefix] = dims;
    for (std::size_t i = 0; i + 1 < dims.size(); ++i) {
      std::string layer = prefix + ".w" + std::to_string(i);
      add_param(layer, lecun({dims[i + 1], dims[i]}, dims[i], rng));
      add_param(prefix + ".b" + std::to_string(i), Tensor({dims[i + 1]}));
    }
  }

  ad::Value bind(ad::Tape& tape, const std::string& name, bool as_const) const {
    return as_const ? tape.constant(params_.get(name)) : tape.leaf(params_.get(name));
  }

  // Embedder MLPs: leaky rectifier + layer normalization after every layer.
  // Heads: leaky rectifier between hidden layers, linear output.
  ad::Value mlp_forward(ad::Tape& tape, const std::string& prefix, ad::Value in,
                        bool as_const) const {
    const std::vector<std::size_t>& dims = mlp_dims_.at(prefix);
    bool embed_style = prefix.rfind("embed.", 0) == 0;
    ad::Value h = in;
    for (std::size_t i = 0; i + 1 < dims.size(); ++i) {
      h = tape.add(tape.matvec(bind(tape, prefix + ".w" + std::to_string(i), as_const), h),
                   bind(tape, prefix + ".b" + std::to_string(i), as_const));
      bool last = i + 2 == dims.size();
      if (embed_style) {
        h = tape.layer_norm(tape.leaky_relu(h, 0.01));
      } else if (!last) {
        h = tape.leaky_relu(h, 0.01);
      }
    }
    return h;
  }

  ad::Value obs_embedding(ad::Tape& tape, const Tensor& obs, bool as_const) const {
    if (cfg_.layout.kind != envs::Kind::Grid)
      return mlp_forward(tape, "embed.obs", tape.constant(obs), as_const);
    std::size_t side = cfg_.layout.grid_side;
    ad::Value img = tape.reshape(tape.constant(obs), {1, side, side});
    ad::Value c0 = tape.leaky_relu(
        tape.conv2d(img, bind(tape, "embed.obs.conv0.w", as_const),
                    bind(tape, "embed.obs.conv0.b", as_const), 2, 1),
        0.01);
    ad::Value c1 = tape.leaky_relu(
        tape.conv2d(c0, bind(tape, "embed.obs.conv1.w", as_const),
                    bind(tape, "embed.obs.conv1.b", as_const), 2, 1),
        0.01);
    std::size_t s2 = conv_out(conv_out(side));
    ad::Value flat = tape.reshape(c1, {cfg_.conv_channels * s2 * s2});
    ad::Value proj = tape.add(tape.matvec(bind(tape, "embed.obs.proj.w", as_const), flat),
                              bind(tape, "embed.obs.proj.b", as_const));
    return tape.layer_norm(tape.leaky_relu(proj, 0.01));
  }

  ad::Value step_embedding(ad::Tape& tape, const HistoryStep& step, bool as_const) const {
    require(step.action_raw.size() == cfg_.action_raw_dim(), "infer_step: action size mismatch");
    require(step.next_obs.size() == cfg_.obs_dim(), "infer_step: observation size mismatch");
    ad::Value act = mlp_forward(tape, "embed.action", tape.constant(step.action_raw), as_const);
    ad::Value obs = obs_embedding(tape, step.next_obs, as_const);
    Tensor r({2});
    r[0] = step.reward;
    r[1] = step.inner_done ? 1.0 : 0.0;
    ad::Value rew = mlp_forward(tape, "embed.reward", tape.constant(r), as_const);
    return tape.concat({act, obs, rew});
  }

  ad::Value ssm_step(ad::Tape& tape, std::size_t layer, ad::Value x, ad::Value u,
                     bool as_const) const {
    std::string p = "ssm." + std::to_string(layer) + ".";
    ad::Value a = tape.exp(tape.neg(tape.exp(bind(tape, p + "a_raw", as_const))));
    ad::Value drive = tape.add(tape.matvec(bind(tape, p + "b", as_const), u),
                               bind(tape, p + "c", as_const));
    return tape.add(tape.mul(a, x), drive);
  }

  ModelConfig cfg_;
  ParameterStore params_;
  std::map<std::string, std::vector<std::size_t>> mlp_dims_;
};

}  // namespace vbsd::models
