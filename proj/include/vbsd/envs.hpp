#pragma once

#include <array>
#include <cmath>
#include <cstddef>
#include <numbers>
#include <span>
#include <vector>

#include "vbsd/error.hpp"
#include "vbsd/rng.hpp"
#include "vbsd/tensor.hpp"

namespace vbsd::envs {

enum class Kind { Fourier, Grid };

// Action for either family: a categorical index (grid) or a coordinate vector
// in [-1,1]^D (function optimisation).
struct Action {
  int discrete = -1;
  std::vector<double> continuous;

  static Action make_discrete(int i) {
    Action a;
    a.discrete = i;
    return a;
  }
  static Action make_continuous(std::vector<double> x) {
    Action a;
    a.continuous = std::move(x);
    return a;
  }
  bool is_discrete() const { return discrete >= 0; }
};

// --- function-optimisation family -------------------------------------------

// Truncated Fourier series per input dimension:
//   f(u) = a0 + a1 cos(2pi (u - c) - phi1) + a2 cos(2pi (u - c) - phi2)
// with amplitudes in [0.1, 1.1], phases in [0, pi], shift c in [0, pi].
struct FourierTask {
  struct Series {
    std::array<double, 3> amp;
    std::array<double, 2> phase;
    double shift;
  };
  std::vector<Series> dims;

  static constexpr std::size_t kWaves = 3;

  static FourierTask sample(std::size_t d, RngStream& rng) {
    FourierTask task;
    task.dims.resize(d);
    for (auto& s : task.dims) {
      for (double& a : s.amp) a = rng.uniform(0.1, 1.1);
      for (double& p : s.phase) p = rng.uniform(0.0, std::numbers::pi);
      s.shift = rng.uniform(0.0, std::numbers::pi);
    }
    return task;
  }

  // Series value at input u. The argument is reduced to its fractional part
  // before any arithmetic, which makes f(u) == f(u+1) hold bit-for-bit.
  double value(std::size_t dim, double u) const {
    const Series& s = dims[dim];
    double m = u - std::floor(u);
    double f = s.amp[0];
    for (std::size_t k = 0; k < 2; ++k)
      f += s.amp[k + 1] * std::cos(2.0 * std::numbers::pi * (m - s.shift) - s.phase[k]);
    return f;
  }

  // Per-dimension values at an action in [-1,1]^D, mapped affinely onto one
  // period [0,1). Out-of-range coordinates are clipped to the domain.
  std::vector<double> evaluate(std::span<const double> action) const {
    require(action.size() == dims.size(), "FourierTask: action dimension mismatch");
    std::vector<double> out(dims.size());
    for (std::size_t i = 0; i < dims.size(); ++i) {
      double x = std::clamp(action[i], -1.0, 1.0);
      out[i] = value(i, (x + 1.0) * 0.5);
    }
    return out;
  }

  double reward(std::span<const double> action) const {
    std::vector<double> f = evaluate(action);
    double s = 0;
    for (double v : f) s += v;
    return s / double(f.size());
  }

  // Numerical maximum of the mean reward; the objective is separable so each
  // dimension is maximised on its own period (dense grid + parabolic refine).
  double max_reward() const {
    double total = 0;
    for (std::size_t d = 0; d < dims.size(); ++d) {
      const std::size_t n = 4096;
      double best = -1e300;
      std::size_t best_i = 0;
      for (std::size_t i = 0; i < n; ++i) {
        double v = value(d, double(i) / double(n));
        if (v > best) {
          best = v;
          best_i = i;
        }
      }
      // One parabolic refinement step around the grid argmax.
      double h = 1.0 / double(n);
      double u0 = double(best_i) / double(n);
      double fm = value(d, u0 - h), f0 = best, fp = value(d, u0 + h);
      double denom = fm - 2 * f0 + fp;
      if (denom < 0) {
        double du = 0.5 * (fm - fp) / denom;
        best = std::max(best, value(d, u0 + std::clamp(du, -1.0, 1.0) * h));
      }
      total += best;
    }
    return total / double(dims.size());
  }
};

// --- gridworld family --------------------------------------------------------

// Open n x n room. Actions: up, down, left, right, stay. Bumping the wall
// leaves the agent in place. Reward 1/t on the (hidden) goal tile at inner
// step t; zero elsewhere.
struct GridTask {
  std::size_t side = 5;
  int start = 0;
  int goal = 0;

  static GridTask sample(std::size_t side, RngStream& rng) {
    GridTask t;
    t.side = side;
    std::size_t n = side * side;
    t.start = int(rng.uniform_int(n));
    t.goal = int(rng.uniform_int(n - 1));
    if (t.goal >= t.start) ++t.goal;  // goal is hidden; never the start tile
    return t;
  }
};

enum GridAction { kUp = 0, kDown = 1, kLeft = 2, kRight = 3, kStay = 4 };
constexpr int kGridActions = 5;

// Pure transition function on tile indices (row-major).
inline int grid_step(std::size_t side, int tile, int action) {
  require(tile >= 0 && tile < int(side * side), "grid_step: tile out of range");
  require(action >= 0 && action < kGridActions, "grid_step: unknown action");
  int r = tile / int(side), c = tile % int(side);
  switch (action) {
    case kUp: r = std::max(r - 1, 0); break;
    case kDown: r = std::min(r + 1, int(side) - 1); break;
    case kLeft: c = std::max(c - 1, 0); break;
    case kRight: c = std::min(c + 1, int(side) - 1); break;
    case kStay: break;
  }
  return r * int(side) + c;
}

// Observation: flattened n x n image, 1 at the agent tile. The goal is not
// observable.
inline Tensor grid_observe(std::size_t side, int tile) {
  Tensor img({side * side});
  img[std::size_t(tile)] = 1.0;
  return img;
}

// --- meta-episode wrapper ------------------------------------------------

// Known episodic skeleton of a task lifetime: inner_episodes repetitions of
// inner_steps steps. Task parameters are resampled only at meta resets;
// inner resets restore the start state and nothing else.
struct MetaLayout {
  Kind kind = Kind::Fourier;
  std::size_t inner_steps = 20;
  std::size_t inner_episodes = 1;
  std::size_t grid_side = 5;
  std::size_t fourier_dim = 1;

  std::size_t meta_len() const { return inner_steps * inner_episodes; }
  std::size_t obs_dim() const {
    return kind == Kind::Grid ? grid_side * grid_side : fourier_dim;
  }
  std::size_t action_dim() const {
    return kind == Kind::Grid ? std::size_t(kGridActions) : fourier_dim;
  }
  bool discrete_actions() const { return kind == Kind::Grid; }

  static MetaLayout fourier(std::size_t dim) {
    MetaLayout l;
    l.kind = Kind::Fourier;
    l.inner_steps = 20;
    l.inner_episodes = 1;
    l.fourier_dim = dim;
    return l;
  }
  static MetaLayout grid(std::size_t side) {
    MetaLayout l;
    l.kind = Kind::Grid;
    l.inner_steps = 10;
    l.inner_episodes = 6;
    l.grid_side = side;
    return l;
  }
};

// Position within a meta-episode; shared by the live environment and the
// planner's simulated rollouts so boundary handling cannot diverge.
struct Clock {
  std::size_t step_in_inner = 0;  // completed steps in the current inner episode
  std::size_t episode = 0;

  std::size_t steps_into_meta(const MetaLayout& l) const {
    return episode * l.inner_steps + step_in_inner;
  }
  bool at_meta_end(const MetaLayout& l) const { return episode >= l.inner_episodes; }

  // Advances past one step; returns {inner_done, meta_done}.
  std::pair<bool, bool> advance(const MetaLayout& l) {
    require(!at_meta_end(l), "Clock: stepping past the meta horizon");
    ++step_in_inner;
    bool inner_done = step_in_inner >= l.inner_steps;
    if (inner_done) {
      step_in_inner = 0;
      ++episode;
    }
    return {inner_done, at_meta_end(l)};
  }
};

struct StepResult {
  Tensor observation;
  double reward = 0;
  bool inner_done = false;
  bool meta_done = false;
};

class MetaEnv {
 public:
  explicit MetaEnv(MetaLayout layout) : layout_(layout) {}

  const MetaLayout& layout() const { return layout_; }
  const Clock& clock() const { return clock_; }
  int tile() const { return tile_; }
  const FourierTask& fourier_task() const { return fourier_; }
  const GridTask& grid_task() const { return grid_; }
  bool done() const { return clock_.at_meta_end(layout_); }

  // Fresh task + meta reset.
  Tensor reset(RngStream& rng) {
    if (layout_.kind == Kind::Fourier) {
      fourier_ = FourierTask::sample(layout_.fourier_dim, rng);
    } else {
      grid_ = GridTask::sample(layout_.grid_side, rng);
    }
    return reset_with_current_task();
  }

  Tensor reset_with(FourierTask task) {
    require(layout_.kind == Kind::Fourier, "MetaEnv: wrong task family");
    fourier_ = std::move(task);
    return reset_with_current_task();
  }

  Tensor reset_with(GridTask task) {
    require(layout_.kind == Kind::Grid, "MetaEnv: wrong task family");
    require(task.side == layout_.grid_side, "MetaEnv: grid side mismatch");
    grid_ = task;
    return reset_with_current_task();
  }

  StepResult step(const Action& a) {
    require(!done(), "MetaEnv: step after meta end");
    StepResult out;
    if (layout_.kind == Kind::Fourier) {
      require(a.continuous.size() == layout_.fourier_dim, "MetaEnv: bad action dimension");
      std::vector<double> f = fourier_.evaluate(a.continuous);
      out.reward = 0;
      for (double v : f) out.reward += v;
      out.reward /= double(f.size());
      out.observation = Tensor::vector(std::move(f));
    } else {
      require(a.is_discrete(), "MetaEnv: grid expects a discrete action");
      tile_ = grid_step(layout_.grid_side, tile_, a.discrete);
      double t = double(clock_.step_in_inner + 1);
      out.reward = tile_ == grid_.goal ? 1.0 / t : 0.0;
      out.observation = grid_observe(layout_.grid_side, tile_);
    }
    auto [inner_done, meta_done] = clock_.advance(layout_);
    out.inner_done = inner_done;
    out.meta_done = meta_done;
    // Inner reset: position returns to the task's start tile; the task and
    // anything the caller carries across episodes (beliefs) are untouched.
    if (inner_done && !meta_done && layout_.kind == Kind::Grid) {
      tile_ = grid_.start;
    }
    return out;
  }

 private:
  Tensor reset_with_current_task() {
    clock_ = Clock{};
    if (layout_.kind == Kind::Grid) {
      tile_ = grid_.start;
      return grid_observe(layout_.grid_side, tile_);
    }
    return Tensor({layout_.fourier_dim});  // nothing observed before the first action
  }

  MetaLayout layout_;
  Clock clock_;
  FourierTask fourier_;
  GridTask grid_;
  int tile_ = 0;
};

}  // namespace vbsd::envs
