#pragma once

#include <functional>
#include <string>
#include <vector>

#include "vbsd/autodiff.hpp"
#include "vbsd/rng.hpp"

// Finite-difference harness over every differentiable tape operation. Each
// entry builds a random scalar-valued graph exercising one op (shapes <= 8x8)
// and compares tape gradients against central differences. Used by the unit
// suite, the acceptance gate, and the `gradcheck` CLI subcommand.
namespace vbsd::ad {

struct OpCheck {
  std::string name;
  // Runs one seeded trial, returns max relative gradient error.
  std::function<double(std::uint64_t seed)> run;
};

namespace detail {

inline Tensor rand_vec(std::size_t n, RngStream& rng, double lo = -1.5, double hi = 1.5) {
  return Tensor::random_uniform({n}, lo, hi, rng);
}

// Weighted sum with fixed random coefficients; makes every output element's
// gradient observable and distinct.
inline Value pool(Tape& t, Value v, RngStream& rng) {
  Tensor w(t.value(v).shape());
  for (double& x : w.data()) x = rng.uniform(-1, 1);
  return t.sum(t.mul(v, t.constant(std::move(w))));
}

inline double check_unary(const std::function<Value(Tape&, Value)>& op, std::uint64_t seed,
                          double lo = -1.5, double hi = 1.5, double step = 1e-5) {
  RngStream rng(seed);
  Tensor point = rand_vec(7, rng, lo, hi);
  RngStream pool_rng = rng.split(1);
  return finite_difference_check(
      [&](Tape& t, Value x) {
        RngStream r = pool_rng;
        return pool(t, op(t, x), r);
      },
      point, step);
}

}  // namespace detail

inline const std::vector<OpCheck>& op_checks() {
  using detail::check_unary;
  using detail::pool;
  using detail::rand_vec;
  static const std::vector<OpCheck> checks = {
      {"add",
       [](std::uint64_t s) {
         RngStream rng(s);
         Tensor p = detail::rand_vec(12, rng);
         RngStream pr = rng.split(1);
         return finite_difference_check(
             [&](Tape& t, Value x) {
               RngStream r = pr;
               return pool(t, t.add(t.slice(x, 0, 6), t.slice(x, 6, 12)), r);
             },
             p, 1e-5);
       }},
      {"sub",
       [](std::uint64_t s) {
         RngStream rng(s);
         Tensor p = detail::rand_vec(12, rng);
         RngStream pr = rng.split(1);
         return finite_difference_check(
             [&](Tape& t, Value x) {
               RngStream r = pr;
               return pool(t, t.sub(t.slice(x, 0, 6), t.slice(x, 6, 12)), r);
             },
             p, 1e-5);
       }},
      {"mul",
       [](std::uint64_t s) {
         RngStream rng(s);
         Tensor p = detail::rand_vec(12, rng);
         RngStream pr = rng.split(1);
         return finite_difference_check(
             [&](Tape& t, Value x) {
               RngStream r = pr;
               return pool(t, t.mul(t.slice(x, 0, 6), t.slice(x, 6, 12)), r);
             },
             p, 1e-5);
       }},
      {"matmul",
       [](std::uint64_t s) {
         RngStream rng(s);
         Tensor p = detail::rand_vec(3 * 4 + 4 * 5, rng);
         RngStream pr = rng.split(1);
         return finite_difference_check(
             [&](Tape& t, Value x) {
               RngStream r = pr;
               Value a = t.reshape(t.slice(x, 0, 12), {3, 4});
               Value b = t.reshape(t.slice(x, 12, 32), {4, 5});
               return pool(t, t.matmul(a, b), r);
             },
             p, 1e-5);
       }},
      {"matvec",
       [](std::uint64_t s) {
         RngStream rng(s);
         Tensor p = detail::rand_vec(5 * 4 + 4, rng);
         RngStream pr = rng.split(1);
         return finite_difference_check(
             [&](Tape& t, Value x) {
               RngStream r = pr;
               Value a = t.reshape(t.slice(x, 0, 20), {5, 4});
               Value b = t.slice(x, 20, 24);
               return pool(t, t.matvec(a, b), r);
             },
             p, 1e-5);
       }},
      {"exp", [](std::uint64_t s) { return check_unary([](Tape& t, Value x) { return t.exp(x); }, s); }},
      {"log",
       [](std::uint64_t s) {
         return check_unary([](Tape& t, Value x) { return t.log(x); }, s, 0.4, 2.5);
       }},
      {"tanh", [](std::uint64_t s) { return check_unary([](Tape& t, Value x) { return t.tanh(x); }, s); }},
      {"neg", [](std::uint64_t s) { return check_unary([](Tape& t, Value x) { return t.neg(x); }, s); }},
      {"square",
       [](std::uint64_t s) { return check_unary([](Tape& t, Value x) { return t.square(x); }, s); }},
      {"sigmoid",
       [](std::uint64_t s) { return check_unary([](Tape& t, Value x) { return t.sigmoid(x); }, s); }},
      {"softplus",
       [](std::uint64_t s) { return check_unary([](Tape& t, Value x) { return t.softplus(x); }, s); }},
      {"leaky_relu",
       [](std::uint64_t s) {
         // Keep points away from the kink at 0 where central differences lie.
         RngStream rng(s);
         Tensor p = detail::rand_vec(8, rng);
         for (double& x : p.data())
           if (std::abs(x) < 0.05) x += x >= 0 ? 0.1 : -0.1;
         RngStream pr = rng.split(1);
         return finite_difference_check(
             [&](Tape& t, Value x) {
               RngStream r = pr;
               return pool(t, t.leaky_relu(x, 0.01), r);
             },
             p, 1e-5);
       }},
      {"scale",
       [](std::uint64_t s) {
         return check_unary([](Tape& t, Value x) { return t.scale(x, -2.75); }, s);
       }},
      {"add_scalar",
       [](std::uint64_t s) {
         return check_unary([](Tape& t, Value x) { return t.add_scalar(x, 0.37); }, s);
       }},
      {"clamp",
       [](std::uint64_t s) {
         // Interior region only; the zero-gradient saturation is covered by a
         // dedicated unit test (central differences straddle the bound).
         return check_unary([](Tape& t, Value x) { return t.clamp(x, -2.0, 2.0); }, s, -1.4, 1.4);
       }},
      {"softmax",
       [](std::uint64_t s) {
         RngStream rng(s);
         Tensor p = detail::rand_vec(12, rng, -2, 2);
         RngStream pr = rng.split(1);
         return finite_difference_check(
             [&](Tape& t, Value x) {
               RngStream r = pr;
               return pool(t, t.softmax(t.reshape(x, {3, 4})), r);
             },
             p, 1e-5);
       }},
      {"log_softmax",
       [](std::uint64_t s) {
         RngStream rng(s);
         Tensor p = detail::rand_vec(8, rng, -2, 2);
         RngStream pr = rng.split(1);
         return finite_difference_check(
             [&](Tape& t, Value x) {
               RngStream r = pr;
               return pool(t, t.log_softmax(x), r);
             },
             p, 1e-5);
       }},
      {"layer_norm",
       [](std::uint64_t s) {
         return check_unary([](Tape& t, Value x) { return t.layer_norm(x); }, s);
       }},
      {"sum", [](std::uint64_t s) { return check_unary([](Tape& t, Value x) { return t.sum(x); }, s); }},
      {"mean",
       [](std::uint64_t s) { return check_unary([](Tape& t, Value x) { return t.mean(x); }, s); }},
      {"concat",
       [](std::uint64_t s) {
         RngStream rng(s);
         Tensor p = detail::rand_vec(9, rng);
         RngStream pr = rng.split(1);
         return finite_difference_check(
             [&](Tape& t, Value x) {
               RngStream r = pr;
               Value c = t.concat({t.slice(x, 0, 3), t.slice(x, 3, 5), t.slice(x, 5, 9)});
               return pool(t, c, r);
             },
             p, 1e-5);
       }},
      {"slice",
       [](std::uint64_t s) {
         return check_unary([](Tape& t, Value x) { return t.slice(x, 2, 6); }, s);
       }},
      {"reshape",
       [](std::uint64_t s) {
         RngStream rng(s);
         Tensor p = detail::rand_vec(6, rng);
         RngStream pr = rng.split(1);
         return finite_difference_check(
             [&](Tape& t, Value x) {
               RngStream r = pr;
               return pool(t, t.reshape(x, {2, 3}), r);
             },
             p, 1e-5);
       }},
      {"gaussian_log_prob",
       [](std::uint64_t s) {
         RngStream rng(s);
         Tensor p = detail::rand_vec(12, rng, -1.0, 1.0);
         return finite_difference_check(
             [&](Tape& t, Value x) {
               return t.gaussian_log_prob(t.slice(x, 0, 4), t.slice(x, 4, 8), t.slice(x, 8, 12));
             },
             p, 1e-5);
       }},
      {"bernoulli_log_prob",
       [](std::uint64_t s) {
         RngStream rng(s);
         Tensor p = Tensor::random_uniform({6}, 0.1, 0.9, rng);
         Tensor y({6});
         for (double& v : y.data()) v = rng.next_double() < 0.5 ? 0.0 : 1.0;
         return finite_difference_check(
             [&](Tape& t, Value x) { return t.bernoulli_log_prob(x, t.constant(y)); }, p, 1e-6);
       }},
      {"conv2d",
       [](std::uint64_t s) {
         RngStream rng(s);
         std::size_t nx = 2 * 5 * 5, nw = 3 * 2 * 3 * 3, nb = 3;
         Tensor p = detail::rand_vec(nx + nw + nb, rng, -0.8, 0.8);
         RngStream pr = rng.split(1);
         return finite_difference_check(
             [&](Tape& t, Value v) {
               RngStream r = pr;
               Value x = t.reshape(t.slice(v, 0, nx), {2, 5, 5});
               Value w = t.reshape(t.slice(v, nx, nx + nw), {3, 2, 3, 3});
               Value b = t.slice(v, nx + nw, nx + nw + nb);
               return pool(t, t.conv2d(x, w, b, 2, 1), r);
             },
             p, 1e-5);
       }},
      {"stop_grad",
       [](std::uint64_t s) {
         // Not a finite-difference check: the contract is that the analytic
         // gradient through stop_grad is exactly zero.
         RngStream rng(s);
         Tensor p = detail::rand_vec(6, rng);
         Tape t;
         Value x = t.input(p);
         RngStream pr = rng.split(1);
         Value y = pool(t, t.stop_grad(x), pr);
         t.backward(y);
         double worst = 0;
         for (double gx : t.grad(x).data()) worst = std::max(worst, std::abs(gx));
         return worst;
       }},
  };
  return checks;
}

// Every op in the enum must either appear in op_checks() or be a
// non-differentiable structural node. Guards against new ops skipping the
// finite-difference gate.
inline std::vector<std::string> unchecked_ops() {
  std::vector<std::string> missing;
  for (int raw = 0; raw <= int(Op::Conv2d); ++raw) {
    Op op = Op(raw);
    if (op == Op::Leaf || op == Op::Const) continue;
    std::string name = op_name(op);
    bool found = false;
    for (const auto& c : op_checks())
      if (c.name == name) found = true;
    if (!found) missing.push_back(name);
  }
  return missing;
}

struct OpCheckResult {
  std::string name;
  double max_rel_err = 0;
};

inline std::vector<OpCheckResult> run_op_checks(int seeds_per_op = 5,
                                                std::uint64_t seed_base = 1234) {
  std::vector<OpCheckResult> out;
  for (const auto& c : op_checks()) {
    OpCheckResult r{c.name, 0};
    for (int s = 0; s < seeds_per_op; ++s)
      r.max_rel_err = std::max(r.max_rel_err, c.run(seed_base + std::uint64_t(s)));
    out.push_back(std::move(r));
  }
  return out;
}

}  // namespace vbsd::ad
