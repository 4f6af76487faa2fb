#include <doctest.h>

#include <cmath>
#include <vector>

#include "vbsd/belief.hpp"
#include "vbsd/gradcheck.hpp"
#include "vbsd/oracle.hpp"
#include "vbsd/stats.hpp"

using namespace vbsd;
using namespace vbsd::belief;
using namespace vbsd::ad;

namespace {

BeliefParams make_params(std::vector<double> mu, std::vector<double> ls) {
  return BeliefParams(Tensor::vector(std::move(mu)), Tensor::vector(std::move(ls)));
}

BeliefParams random_params(RngStream& rng, std::size_t d) {
  std::vector<double> mu(d), ls(d);
  for (double& v : mu) v = rng.uniform(-2, 2);
  for (double& v : ls) v = rng.uniform(-1.5, 1.0);
  return make_params(std::move(mu), std::move(ls));
}

}  // namespace

TEST_CASE("belief parameters clamp the log-std range") {
  BeliefParams p = make_params({0, 0}, {-12.0, 5.0});
  CHECK(p.log_std[0] == -7.0);
  CHECK(p.log_std[1] == 2.0);
  CHECK_THROWS_WITH_AS(make_params({0}, {0, 0}), doctest::Contains("shape mismatch"), Error);
}

TEST_CASE("gaussian log-density matches the analytic form and the tape op") {
  BeliefParams std2 = BeliefParams::standard(2);
  Tensor origin({2});
  CHECK(gaussian_log_density(origin, std2) ==
        doctest::Approx(-std::log(2.0 * std::numbers::pi)).epsilon(1e-14));
  RngStream rng(551);
  for (int rep = 0; rep < 20; ++rep) {
    BeliefParams p = random_params(rng, 3);
    Tensor x = Tensor::random_uniform({3}, -2, 2, rng);
    Tape tape;
    Value node = tape.gaussian_log_prob(tape.leaf(x), tape.constant(p.mean),
                                        tape.constant(p.log_std));
    CHECK(tape.value(node).scalar_value() ==
          doctest::Approx(gaussian_log_density(x, p)).epsilon(1e-13));
  }
}

TEST_CASE("gaussian KL closed form: identical, shifted, scaled") {
  BeliefParams a = make_params({0.3, -1.0}, {0.2, -0.4});
  CHECK(gaussian_kl(a, a) == 0.0);
  // Unit shift at unit variance costs 1/2 per dimension.
  CHECK(gaussian_kl(make_params({1, 1, 1}, {0, 0, 0}), BeliefParams::standard(3)) ==
        doctest::Approx(1.5).epsilon(1e-14));
  // Pure scale: KL(N(0, e^{2ls}) || N(0,1)) = -ls + (e^{2ls} - 1) / 2.
  double ls = 0.3;
  CHECK(gaussian_kl(make_params({0}, {ls}), BeliefParams::standard(1)) ==
        doctest::Approx(-ls + 0.5 * (std::exp(2 * ls) - 1.0)).epsilon(1e-14));
}

TEST_CASE("gaussian KL matches its Monte-Carlo definition") {
  RngStream rng(552);
  BeliefParams q = make_params({0.6, -0.3}, {-0.2, 0.4});
  BeliefParams p = make_params({-0.1, 0.2}, {0.1, -0.5});
  const std::size_t n = 100000;
  double mean = 0, m2 = 0;
  for (std::size_t i = 1; i <= n; ++i) {
    Tensor m = sample_gaussian(q, rng);
    double v = gaussian_log_density(m, q) - gaussian_log_density(m, p);
    double d = v - mean;
    mean += d / double(i);
    m2 += d * (v - mean);
  }
  double stderr_ = std::sqrt(m2 / double(n - 1) / double(n));
  CHECK(std::abs(mean - gaussian_kl(q, p)) <= 3.0 * stderr_);
}

TEST_CASE("gaussian KL is non-negative over random parameter pairs") {
  RngStream rng(553);
  for (int rep = 0; rep < 10000; ++rep) {
    BeliefParams q = random_params(rng, 2), p = random_params(rng, 2);
    CHECK(gaussian_kl(q, p) >= 0.0);
  }
}

TEST_CASE("gaussian entropy matches analytic and Monte-Carlo values") {
  BeliefParams q = make_params({1.0, -2.0}, {0.3, -0.6});
  double want = std::log(2.0 * std::numbers::pi * std::numbers::e) + 0.3 - 0.6;
  CHECK(gaussian_entropy(q) == doctest::Approx(want).epsilon(1e-14));
  RngStream rng(554);
  const std::size_t n = 100000;
  double mean = 0, m2 = 0;
  for (std::size_t i = 1; i <= n; ++i) {
    double v = -gaussian_log_density(sample_gaussian(q, rng), q);
    double d = v - mean;
    mean += d / double(i);
    m2 += d * (v - mean);
  }
  double stderr_ = std::sqrt(m2 / double(n - 1) / double(n));
  CHECK(std::abs(mean - gaussian_entropy(q)) <= 3.0 * stderr_);
}

TEST_CASE("belief samples have the requested moments") {
  BeliefParams q = make_params({2.0}, {-0.7});
  RngStream rng(555);
  const std::size_t n = 100000;
  double mean = 0;
  for (std::size_t i = 0; i < n; ++i) mean += sample_gaussian(q, rng)[0];
  mean /= double(n);
  double sd = std::exp(-0.7);
  CHECK(std::abs(mean - 2.0) <= 3.0 * sd / std::sqrt(double(n)));
}

TEST_CASE("nested weights are uniform under symmetric evidence") {
  RngStream rng(556);
  BeliefParams phi = random_params(rng, 4);
  std::vector<Tensor> samples = sample_gaussian(phi, 16, rng);
  std::vector<double> liks(16, -1.25);
  NestedWeights w = nested_log_weights(phi, phi, samples, liks);
  double z = 0;
  for (double v : w.normalized) {
    CHECK(v == doctest::Approx(1.0 / 16).epsilon(1e-13));
    z += v;
  }
  CHECK(z == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(w.effective_sample_size() == doctest::Approx(16.0).epsilon(1e-12));
}

TEST_CASE("impossible evidence removes a sample's mass") {
  RngStream rng(557);
  BeliefParams phi = random_params(rng, 2);
  std::vector<Tensor> samples = sample_gaussian(phi, 4, rng);
  std::vector<double> liks = {-0.5, -std::numeric_limits<double>::infinity(), -0.5, -0.7};
  NestedWeights w = nested_log_weights(phi, phi, samples, liks);
  CHECK(w.normalized[1] == 0.0);
  CHECK(w.normalized[0] > 0.0);
  double z = 0;
  for (double v : w.normalized) z += v;
  CHECK(z == doctest::Approx(1.0).epsilon(1e-12));

  std::vector<double> dead(4, -std::numeric_limits<double>::infinity());
  CHECK_THROWS_WITH_AS(nested_log_weights(phi, phi, samples, dead),
                       doctest::Contains("all nested weights vanished"), Error);
  std::vector<double> bad = {0.0, 0.0, std::nan(""), 0.0};
  CHECK_THROWS_WITH_AS(nested_log_weights(phi, phi, samples, bad),
                       doctest::Contains("sample 2"), Error);
}

TEST_CASE("nested weights are invariant to constant likelihood shifts") {
  RngStream rng(558);
  BeliefParams prev = random_params(rng, 3), now = random_params(rng, 3);
  std::vector<Tensor> samples = sample_gaussian(now, 32, rng);
  std::vector<double> liks(32), shifted(32);
  for (std::size_t j = 0; j < 32; ++j) {
    liks[j] = rng.uniform(-3, 0);
    shifted[j] = liks[j] + 7.25;
  }
  NestedWeights a = nested_log_weights(prev, now, samples, liks);
  NestedWeights b = nested_log_weights(prev, now, samples, shifted);
  for (std::size_t j = 0; j < 32; ++j)
    CHECK(a.normalized[j] == doctest::Approx(b.normalized[j]).epsilon(1e-12));
}

TEST_CASE("sign-hypothesis importance weights recover the exact discrete posterior") {
  // Latent prior N(0,1); the binary hypothesis is sign(M), so the prior over
  // hypotheses is (1/2, 1/2). Three Bernoulli observations with success rate
  // 0.8 under + and 0.35 under -. Nested weights drawn from a *shifted*
  // proposal must still put the exact posterior mass on each half-line.
  const double p_plus = 0.8, p_minus = 0.35;
  oracle::FiniteTaskSet task;
  task.n_states = 2;
  task.n_actions = 1;
  task.n_hyp = 2;
  task.prior = {0.5, 0.5};
  task.reward.assign(4, 0.0);
  task.transition.assign(8, 0.0);
  task.p(0, 0, 0, 1) = p_plus;
  task.p(0, 0, 0, 0) = 1 - p_plus;
  task.p(1, 0, 0, 1) = p_minus;
  task.p(1, 0, 0, 0) = 1 - p_minus;
  for (std::size_t h = 0; h < 2; ++h) task.p(h, 1, 0, 0) = 1.0;
  task.validate();
  // Observations 1, 1, 0, each emitted from state 0.
  std::vector<oracle::Transition> hist = {{0, 0, 0.0, 1}, {0, 0, 0.0, 1}, {0, 0, 0.0, 0}};
  std::vector<double> post = oracle::exact_posterior(task, hist);

  BeliefParams prior_belief = BeliefParams::standard(1);
  BeliefParams proposal = make_params({0.3}, {0.1});
  RngStream rng(559);
  const std::size_t n = 10000;
  std::vector<Tensor> samples = sample_gaussian(proposal, n, rng);
  std::vector<double> liks(n);
  for (std::size_t j = 0; j < n; ++j) {
    double p = samples[j][0] > 0 ? p_plus : p_minus;
    liks[j] = 2.0 * std::log(p) + std::log(1.0 - p);
  }
  NestedWeights w = nested_log_weights(prior_belief, proposal, samples, liks);
  double mass_plus = 0;
  for (std::size_t j = 0; j < n; ++j)
    if (samples[j][0] > 0) mass_plus += w.normalized[j];
  double got_ratio = mass_plus / (1.0 - mass_plus);
  double want_ratio = post[0] / post[1];
  CHECK(got_ratio == doctest::Approx(want_ratio).epsilon(0.05));
}

TEST_CASE("elbo of the prior itself with no evidence is just the entropy bonus") {
  BeliefParams phi = make_params({0.2, -0.5}, {0.1, -0.3});
  RngStream rng(560);
  ElboTerms t = elbo_window(
      phi, phi, 0, 4, [](const Tensor&, std::size_t) { return 1e9; }, rng);
  CHECK(t.kl == 0.0);
  CHECK(t.decode == 0.0);
  CHECK(t.l_z() == kEntropyBonusWeight * gaussian_entropy(phi));
}

TEST_CASE("elbo decode term is additive over window steps") {
  BeliefParams phi = make_params({0.4}, {-0.2});
  BeliefParams prior = BeliefParams::standard(1);
  auto decode = [](const Tensor& m, std::size_t) { return -0.5 * m[0] * m[0] - 0.3; };
  RngStream r1(561), r2(561);  // identical sample draws for both windows
  ElboTerms one = elbo_window(phi, prior, 1, 64, decode, r1);
  ElboTerms two = elbo_window(phi, prior, 2, 64, decode, r2);
  CHECK(two.decode == doctest::Approx(2.0 * one.decode).epsilon(1e-12));
  CHECK(two.kl == one.kl);
}

TEST_CASE("conjugate gaussian evidence: the ELBO gap is exactly the posterior KL") {
  // Latent M ~ N(0,1); observations y_i ~ N(M, sigma_y^2). Everything below
  // has a closed form, so the lower-bound identity
  //   ln p(H) - [ -KL(q||prior) + E_q ln p(H|M) ] = KL(q || posterior)
  // can be checked to near machine precision, then re-checked by quadrature
  // and by the Monte-Carlo estimator.
  const std::vector<double> y = {0.4, -0.2, 0.9};
  const double sy = 0.7, vy = sy * sy;
  const double n = double(y.size());
  double sum_y = 0, sum_y2 = 0;
  for (double v : y) {
    sum_y += v;
    sum_y2 += v * v;
  }
  const double a = 1.0 + n / vy;  // posterior precision
  const double post_mu = (sum_y / vy) / a;
  const double post_ls = -0.5 * std::log(a);
  const BeliefParams posterior = make_params({post_mu}, {post_ls});
  const BeliefParams prior = BeliefParams::standard(1);
  const double log_evidence = -0.5 * n * std::log(2.0 * std::numbers::pi * vy) -
                              0.5 * sum_y2 / vy + 0.5 * (sum_y / vy) * (sum_y / vy) / a -
                              0.5 * std::log(a);

  auto log_lik = [&](double m) {
    double acc = -0.5 * n * std::log(2.0 * std::numbers::pi * vy);
    for (double v : y) acc -= 0.5 * (v - m) * (v - m) / vy;
    return acc;
  };

  RngStream rng(562);
  for (int rep = 0; rep < 10; ++rep) {
    BeliefParams q = random_params(rng, 1);
    // Closed-form expected decode under q.
    double mq = q.mean[0], vq = std::exp(2.0 * q.log_std[0]);
    double e_decode = -0.5 * n * std::log(2.0 * std::numbers::pi * vy);
    for (double v : y) e_decode -= 0.5 * ((v - mq) * (v - mq) + vq) / vy;
    double core = -gaussian_kl(q, prior) + e_decode;
    double gap = gaussian_kl(q, posterior);
    CHECK(log_evidence - core == doctest::Approx(gap).epsilon(1e-10));
    CHECK(core <= log_evidence + 1e-12);

    // Quadrature versions of both the evidence and the expected decode.
    double quad_evidence = std::log(stats::simpson(
        [&](double m) {
          return std::exp(gaussian_log_density(Tensor::vector({m}), prior) + log_lik(m));
        },
        -10, 10, 4000));
    double sdq = std::exp(q.log_std[0]);
    double quad_decode = stats::simpson(
        [&](double m) {
          return std::exp(gaussian_log_density(Tensor::vector({m}), q)) * log_lik(m);
        },
        std::min(-10.0, mq - 14 * sdq), std::max(10.0, mq + 14 * sdq), 8000);
    CHECK(quad_evidence == doctest::Approx(log_evidence).epsilon(1e-8));
    CHECK(quad_decode == doctest::Approx(e_decode).epsilon(1e-7));
  }

  // Monte-Carlo estimator agreement at 3 stderr.
  BeliefParams q = make_params({0.5}, {-0.4});
  double mq = q.mean[0], vq = std::exp(2.0 * q.log_std[0]);
  double e_decode = -0.5 * n * std::log(2.0 * std::numbers::pi * vy);
  for (double v : y) e_decode -= 0.5 * ((v - mq) * (v - mq) + vq) / vy;
  const std::size_t k = 20000;
  double mean = 0, m2 = 0;
  RngStream mc(563);
  for (std::size_t i = 1; i <= k; ++i) {
    double v = log_lik(sample_gaussian(q, mc)[0]);
    double d = v - mean;
    mean += d / double(i);
    m2 += d * (v - mean);
  }
  double stderr_ = std::sqrt(m2 / double(k - 1) / double(k));
  CHECK(std::abs(mean - e_decode) <= 3.0 * stderr_);
  RngStream er(564);
  ElboTerms terms = elbo_window(
      q, prior, y.size(), k,
      [&](const Tensor& m, std::size_t t) {
        return -0.5 * std::log(2.0 * std::numbers::pi * vy) -
               0.5 * (y[t] - m[0]) * (y[t] - m[0]) / vy;
      },
      er);
  CHECK(std::abs(-gaussian_kl(q, prior) + mean - (-terms.kl + terms.decode)) <= 6.0 * stderr_);
}

TEST_CASE("differentiable KL and entropy match the scalar forms") {
  RngStream rng(565);
  for (int rep = 0; rep < 10; ++rep) {
    BeliefParams q = random_params(rng, 4), p = random_params(rng, 4);
    Tape tape;
    Value mean = tape.leaf(q.mean), ls = tape.leaf(q.log_std);
    Value kl = gaussian_kl_node(tape, mean, ls, p);
    Value ent = gaussian_entropy_node(tape, ls);
    CHECK(tape.value(kl).scalar_value() == doctest::Approx(gaussian_kl(q, p)).epsilon(1e-12));
    CHECK(tape.value(ent).scalar_value() ==
          doctest::Approx(gaussian_entropy(q)).epsilon(1e-12));
  }
}

TEST_CASE("differentiable KL and entropy pass finite differences") {
  RngStream rng(566);
  BeliefParams p = random_params(rng, 3);
  Tensor point = Tensor::random_uniform({6}, -1, 1, rng);
  double err = finite_difference_check(
      [&](Tape& tape, Value flat) {
        Value mean = tape.slice(flat, 0, 3);
        Value ls = tape.slice(flat, 3, 6);
        return gaussian_kl_node(tape, mean, ls, p);
      },
      point, 1e-5);
  CHECK(err < 1e-4);
  err = finite_difference_check(
      [&](Tape& tape, Value flat) {
        return gaussian_entropy_node(tape, tape.slice(flat, 3, 6));
      },
      point, 1e-5);
  CHECK(err < 1e-4);
}
