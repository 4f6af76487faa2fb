#pragma once

#include <cstdint>
#include <fstream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "vbsd/envs.hpp"
#include "vbsd/error.hpp"
#include "vbsd/models.hpp"
#include "vbsd/trainer.hpp"

namespace vbsd::config {

// Fully resolved run description: environment family and sizes, model
// architecture, planner and training hyperparameters, and artifact plumbing.
// Absent JSON fields fall back to the published defaults for the family.
struct RunConfig {
  models::ModelConfig model;  // layout embedded
  trainer::TrainConfig train;
  std::size_t iterations = 200;
  std::uint64_t seed = 0;
  std::string out_dir = "out";
  std::size_t checkpoint_interval = 50;
  std::size_t eval_episodes = 20;

  const envs::MetaLayout& layout() const { return model.layout; }

  void validate() const {
    const envs::MetaLayout& l = model.layout;
    require(l.kind != envs::Kind::Grid || l.grid_side >= 2, "config: env.grid_side must be >= 2");
    require(l.kind != envs::Kind::Fourier || l.fourier_dim >= 1,
            "config: env.fourier_dim must be >= 1");
    require(l.inner_steps >= 1, "config: env.inner_steps must be >= 1");
    require(l.inner_episodes >= 1, "config: env.inner_episodes must be >= 1");
    require(model.d_m >= 1, "config: model.belief_dim must be >= 1");
    require(model.embed_dim >= 1, "config: model.embed_dim must be >= 1");
    require(model.ssm_layers >= 1, "config: model.ssm_layers must be >= 1");
    require(model.ssm_dim >= 1, "config: model.ssm_dim must be >= 1");
    require(model.sigma_r > 0, "config: model.sigma_r must be positive");
    require(iterations >= 1, "config: train.iterations must be >= 1");
    require(checkpoint_interval >= 1, "config: checkpoint_interval must be >= 1");
    require(eval_episodes >= 1, "config: eval_episodes must be >= 1");
    require(!out_dir.empty(), "config: out_dir must not be empty");
    train.validate(model.layout);
  }
};

namespace detail {

inline double num_at(const nlohmann::json& j, const std::string& path) {
  require(j.is_number(), "config: expected a number at " + path);
  return j.get<double>();
}

inline std::size_t size_at(const nlohmann::json& j, const std::string& path) {
  require(j.is_number_integer(), "config: expected an integer at " + path);
  require(!j.is_number_integer() || j.get<std::int64_t>() >= 0,
          "config: expected a non-negative integer at " + path);
  return std::size_t(j.get<std::int64_t>());
}

inline std::uint64_t u64_at(const nlohmann::json& j, const std::string& path) {
  require(j.is_number_integer() && j.get<std::int64_t>() >= 0,
          "config: expected a non-negative integer at " + path);
  return j.get<std::uint64_t>();
}

inline std::string str_at(const nlohmann::json& j, const std::string& path) {
  require(j.is_string(), "config: expected a string at " + path);
  return j.get<std::string>();
}

inline std::vector<std::size_t> sizes_at(const nlohmann::json& j, const std::string& path) {
  require(j.is_array(), "config: expected an array of integers at " + path);
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < j.size(); ++i)
    out.push_back(size_at(j[i], path + "[" + std::to_string(i) + "]"));
  return out;
}

inline void reject_unknown(const nlohmann::json& j, const std::string& prefix,
                           const std::set<std::string>& known) {
  require(j.is_object(), "config: expected an object at " + (prefix.empty() ? "top level" : prefix));
  for (const auto& item : j.items())
    require(known.contains(item.key()), "config: unknown key " +
                                            (prefix.empty() ? item.key() : prefix + "." + item.key()));
}

}  // namespace detail

// Published defaults for a family: planner and loss schedules differ between
// the gridworld and the function-optimisation setup.
inline RunConfig default_config(envs::Kind kind) {
  RunConfig rc;
  if (kind == envs::Kind::Grid) {
    rc.model.layout = envs::MetaLayout::grid(5);
    rc.train = trainer::TrainConfig::grid_defaults();
  } else {
    rc.model.layout = envs::MetaLayout::fourier(1);
    rc.train = trainer::TrainConfig::fourier_defaults();
  }
  rc.model.k_elbo = rc.train.loss.k_elbo;
  return rc;
}

inline RunConfig from_json(const nlohmann::json& j) {
  detail::reject_unknown(j, "", {"env", "model", "planner", "train", "seed", "out_dir",
                                 "checkpoint_interval", "eval_episodes"});

  envs::Kind kind = envs::Kind::Grid;
  if (j.contains("env")) {
    const nlohmann::json& e = j["env"];
    detail::reject_unknown(e, "env",
                           {"kind", "grid_side", "fourier_dim", "inner_steps", "inner_episodes"});
    if (e.contains("kind")) {
      std::string k = detail::str_at(e["kind"], "env.kind");
      if (k == "grid")
        kind = envs::Kind::Grid;
      else if (k == "fourier")
        kind = envs::Kind::Fourier;
      else
        fail("config: env.kind must be \"grid\" or \"fourier\", got \"" + k + "\"");
    }
  }
  RunConfig rc = default_config(kind);
  envs::MetaLayout& l = rc.model.layout;

  if (j.contains("env")) {
    const nlohmann::json& e = j["env"];
    if (e.contains("grid_side")) l.grid_side = detail::size_at(e["grid_side"], "env.grid_side");
    if (e.contains("fourier_dim"))
      l.fourier_dim = detail::size_at(e["fourier_dim"], "env.fourier_dim");
    if (e.contains("inner_steps"))
      l.inner_steps = detail::size_at(e["inner_steps"], "env.inner_steps");
    if (e.contains("inner_episodes"))
      l.inner_episodes = detail::size_at(e["inner_episodes"], "env.inner_episodes");
  }

  if (j.contains("model")) {
    const nlohmann::json& m = j["model"];
    detail::reject_unknown(m, "model",
                           {"belief_dim", "embed_hidden", "embed_dim", "conv_channels",
                            "ssm_layers", "ssm_dim", "head_hidden", "sigma_r"});
    if (m.contains("belief_dim")) rc.model.d_m = detail::size_at(m["belief_dim"], "model.belief_dim");
    if (m.contains("embed_hidden"))
      rc.model.embed_hidden = detail::sizes_at(m["embed_hidden"], "model.embed_hidden");
    if (m.contains("embed_dim")) rc.model.embed_dim = detail::size_at(m["embed_dim"], "model.embed_dim");
    if (m.contains("conv_channels"))
      rc.model.conv_channels = detail::size_at(m["conv_channels"], "model.conv_channels");
    if (m.contains("ssm_layers"))
      rc.model.ssm_layers = detail::size_at(m["ssm_layers"], "model.ssm_layers");
    if (m.contains("ssm_dim")) rc.model.ssm_dim = detail::size_at(m["ssm_dim"], "model.ssm_dim");
    if (m.contains("head_hidden"))
      rc.model.head_hidden = detail::sizes_at(m["head_hidden"], "model.head_hidden");
    if (m.contains("sigma_r")) rc.model.sigma_r = detail::num_at(m["sigma_r"], "model.sigma_r");
  }

  if (j.contains("planner")) {
    const nlohmann::json& p = j["planner"];
    detail::reject_unknown(
        p, "planner", {"horizon", "particles", "nested", "temperature", "discount", "resample_every"});
    planner::PlanConfig& pc = rc.train.plan;
    if (p.contains("horizon")) pc.horizon = detail::size_at(p["horizon"], "planner.horizon");
    if (p.contains("particles")) pc.particles = detail::size_at(p["particles"], "planner.particles");
    if (p.contains("nested")) pc.nested = detail::size_at(p["nested"], "planner.nested");
    if (p.contains("temperature"))
      pc.temperature = detail::num_at(p["temperature"], "planner.temperature");
    if (p.contains("discount")) pc.discount = detail::num_at(p["discount"], "planner.discount");
    if (p.contains("resample_every"))
      pc.resample_every = detail::size_at(p["resample_every"], "planner.resample_every");
  }

  if (j.contains("train")) {
    const nlohmann::json& t = j["train"];
    detail::reject_unknown(
        t, "train",
        {"iterations",  "minibatch",      "sgd_steps",          "unroll_len",
         "parallel_envs", "td_lambda",    "discount",           "buffer_max_age",
         "burn_in",     "unroll_window",  "decode_window",      "k_elbo",
         "c_v",         "c_pi",           "c_ent",              "belief_kl_weight",
         "belief_entropy_weight",         "learning_rate",      "weight_decay",
         "clip_value",  "clip_norm"});
    trainer::TrainConfig& tc = rc.train;
    if (t.contains("iterations")) rc.iterations = detail::size_at(t["iterations"], "train.iterations");
    if (t.contains("minibatch")) tc.minibatch = detail::size_at(t["minibatch"], "train.minibatch");
    if (t.contains("sgd_steps")) tc.sgd_steps = detail::size_at(t["sgd_steps"], "train.sgd_steps");
    if (t.contains("unroll_len")) tc.unroll_len = detail::size_at(t["unroll_len"], "train.unroll_len");
    if (t.contains("parallel_envs"))
      tc.parallel_envs = detail::size_at(t["parallel_envs"], "train.parallel_envs");
    if (t.contains("td_lambda")) tc.td_lambda = detail::num_at(t["td_lambda"], "train.td_lambda");
    if (t.contains("discount")) tc.discount = detail::num_at(t["discount"], "train.discount");
    if (t.contains("buffer_max_age"))
      tc.buffer_max_age = detail::size_at(t["buffer_max_age"], "train.buffer_max_age");
    if (t.contains("burn_in")) tc.loss.burn_in = detail::size_at(t["burn_in"], "train.burn_in");
    if (t.contains("unroll_window"))
      tc.loss.unroll_window = detail::size_at(t["unroll_window"], "train.unroll_window");
    if (t.contains("decode_window"))
      tc.loss.decode_window = detail::size_at(t["decode_window"], "train.decode_window");
    if (t.contains("k_elbo")) {
      tc.loss.k_elbo = detail::size_at(t["k_elbo"], "train.k_elbo");
      rc.model.k_elbo = tc.loss.k_elbo;
    }
    if (t.contains("c_v")) tc.loss.c_v = detail::num_at(t["c_v"], "train.c_v");
    if (t.contains("c_pi")) tc.loss.c_pi = detail::num_at(t["c_pi"], "train.c_pi");
    if (t.contains("c_ent")) tc.loss.c_ent = detail::num_at(t["c_ent"], "train.c_ent");
    if (t.contains("belief_kl_weight"))
      tc.loss.belief_kl_weight = detail::num_at(t["belief_kl_weight"], "train.belief_kl_weight");
    if (t.contains("belief_entropy_weight"))
      tc.loss.belief_entropy_weight =
          detail::num_at(t["belief_entropy_weight"], "train.belief_entropy_weight");
    if (t.contains("learning_rate"))
      tc.optimizer.learning_rate = detail::num_at(t["learning_rate"], "train.learning_rate");
    if (t.contains("weight_decay"))
      tc.optimizer.weight_decay = detail::num_at(t["weight_decay"], "train.weight_decay");
    if (t.contains("clip_value"))
      tc.optimizer.clip_value = detail::num_at(t["clip_value"], "train.clip_value");
    if (t.contains("clip_norm"))
      tc.optimizer.clip_norm = detail::num_at(t["clip_norm"], "train.clip_norm");
  }

  if (j.contains("seed")) rc.seed = detail::u64_at(j["seed"], "seed");
  if (j.contains("out_dir")) rc.out_dir = detail::str_at(j["out_dir"], "out_dir");
  if (j.contains("checkpoint_interval"))
    rc.checkpoint_interval = detail::size_at(j["checkpoint_interval"], "checkpoint_interval");
  if (j.contains("eval_episodes"))
    rc.eval_episodes = detail::size_at(j["eval_episodes"], "eval_episodes");

  rc.validate();
  return rc;
}

// Fully resolved dump; from_json(to_json(rc)) reproduces rc exactly.
inline nlohmann::json to_json(const RunConfig& rc) {
  const envs::MetaLayout& l = rc.model.layout;
  nlohmann::json j;
  j["env"] = {{"kind", l.kind == envs::Kind::Grid ? "grid" : "fourier"},
              {"grid_side", l.grid_side},
              {"fourier_dim", l.fourier_dim},
              {"inner_steps", l.inner_steps},
              {"inner_episodes", l.inner_episodes}};
  j["model"] = {{"belief_dim", rc.model.d_m},
                {"embed_hidden", rc.model.embed_hidden},
                {"embed_dim", rc.model.embed_dim},
                {"conv_channels", rc.model.conv_channels},
                {"ssm_layers", rc.model.ssm_layers},
                {"ssm_dim", rc.model.ssm_dim},
                {"head_hidden", rc.model.head_hidden},
                {"sigma_r", rc.model.sigma_r}};
  const planner::PlanConfig& pc = rc.train.plan;
  j["planner"] = {{"horizon", pc.horizon},
                  {"particles", pc.particles},
                  {"nested", pc.nested},
                  {"temperature", pc.temperature},
                  {"discount", pc.discount},
                  {"resample_every", pc.resample_every}};
  const trainer::TrainConfig& tc = rc.train;
  j["train"] = {{"iterations", rc.iterations},
                {"minibatch", tc.minibatch},
                {"sgd_steps", tc.sgd_steps},
                {"unroll_len", tc.unroll_len},
                {"parallel_envs", tc.parallel_envs},
                {"td_lambda", tc.td_lambda},
                {"discount", tc.discount},
                {"buffer_max_age", tc.buffer_max_age},
                {"burn_in", tc.loss.burn_in},
                {"unroll_window", tc.loss.unroll_window},
                {"decode_window", tc.loss.decode_window},
                {"k_elbo", tc.loss.k_elbo},
                {"c_v", tc.loss.c_v},
                {"c_pi", tc.loss.c_pi},
                {"c_ent", tc.loss.c_ent},
                {"belief_kl_weight", tc.loss.belief_kl_weight},
                {"belief_entropy_weight", tc.loss.belief_entropy_weight},
                {"learning_rate", tc.optimizer.learning_rate},
                {"weight_decay", tc.optimizer.weight_decay},
                {"clip_value", tc.optimizer.clip_value},
                {"clip_norm", tc.optimizer.clip_norm}};
  j["seed"] = rc.seed;
  j["out_dir"] = rc.out_dir;
  j["checkpoint_interval"] = rc.checkpoint_interval;
  j["eval_episodes"] = rc.eval_episodes;
  return j;
}

inline std::string dump(const RunConfig& rc) { return to_json(rc).dump(2) + "\n"; }

// Parse from text; syntax errors are reported with a line number.
inline RunConfig parse_config(const std::string& text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    std::size_t line = 1;
    for (std::size_t i = 0; i + 1 < e.byte && i < text.size(); ++i)
      if (text[i] == '\n') ++line;
    fail("config: parse error at line " + std::to_string(line) + ": " + e.what());
  }
  return from_json(j);
}

inline RunConfig load_config(const std::string& path) {
  std::ifstream is(path);
  require(bool(is), "config: cannot open " + path);
  std::stringstream ss;
  ss << is.rdbuf();
  return parse_config(ss.str());
}

}  // namespace vbsd::config
