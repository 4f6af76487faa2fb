#pragma once

#include <cmath>
#include <cstddef>
#include <limits>
#include <numbers>
#include <string>
#include <vector>

#include "vbsd/autodiff.hpp"
#include "vbsd/error.hpp"
#include "vbsd/rng.hpp"
#include "vbsd/tensor.hpp"

namespace vbsd::belief {

inline constexpr double kLogStdMin = -7.0;
inline constexpr double kLogStdMax = 2.0;
inline constexpr double kEntropyBonusWeight = 1e-5;

// Diagonal-Gaussian belief over the latent task variable.
struct BeliefParams {
  Tensor mean;
  Tensor log_std;

  BeliefParams() = default;
  BeliefParams(Tensor mu, Tensor ls) : mean(std::move(mu)), log_std(std::move(ls)) {
    require(mean.shape() == log_std.shape(), "BeliefParams: mean/logStd shape mismatch");
    require(mean.all_finite() && log_std.all_finite(), "BeliefParams: non-finite parameters");
    for (double& v : log_std.data()) v = std::clamp(v, kLogStdMin, kLogStdMax);
  }

  std::size_t dim() const { return mean.size(); }

  static BeliefParams standard(std::size_t d) {
    return BeliefParams(Tensor({d}), Tensor({d}));
  }
};

inline double gaussian_log_density(const Tensor& x, const BeliefParams& phi) {
  require(x.shape() == phi.mean.shape(), "gaussian_log_density: dimension mismatch");
  const double c = -0.5 * std::log(2.0 * std::numbers::pi);
  double acc = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    double ls = phi.log_std[i];
    double z = (x[i] - phi.mean[i]) * std::exp(-ls);
    acc += c - ls - 0.5 * z * z;
  }
  return acc;
}

// KL(q || p) for diagonal Gaussians, in closed form.
inline double gaussian_kl(const BeliefParams& q, const BeliefParams& p) {
  require(q.dim() == p.dim(), "gaussian_kl: dimension mismatch");
  double acc = 0;
  for (std::size_t i = 0; i < q.dim(); ++i) {
    double lq = q.log_std[i], lp = p.log_std[i];
    double vq = std::exp(2.0 * lq), vp = std::exp(2.0 * lp);
    double dm = q.mean[i] - p.mean[i];
    acc += lp - lq + 0.5 * (vq + dm * dm) / vp - 0.5;
  }
  return acc;
}

inline double gaussian_entropy(const BeliefParams& q) {
  const double c = 0.5 * std::log(2.0 * std::numbers::pi * std::numbers::e);
  double acc = 0;
  for (std::size_t i = 0; i < q.dim(); ++i) acc += c + q.log_std[i];
  return acc;
}

inline Tensor sample_gaussian(const BeliefParams& phi, RngStream& rng) {
  Tensor m({phi.dim()});
  for (std::size_t i = 0; i < phi.dim(); ++i)
    m[i] = phi.mean[i] + std::exp(phi.log_std[i]) * rng.next_gaussian();
  return m;
}

inline std::vector<Tensor> sample_gaussian(const BeliefParams& phi, std::size_t count,
                                           RngStream& rng) {
  std::vector<Tensor> out;
  out.reserve(count);
  for (std::size_t j = 0; j < count; ++j) out.push_back(sample_gaussian(phi, rng));
  return out;
}

// Importance weights of nested belief samples: each sample drawn from the
// current belief is re-weighted toward the pre-update belief times the
// evidence it explains,
//   ln ŵ^(j) = ln b_prev(M^(j)) − ln b_now(M^(j)) + ln p(H | S, M^(j)).
struct NestedWeights {
  std::vector<double> log_raw;     // ln ŵ^(j), may contain -inf
  std::vector<double> normalized;  // softmax(log_raw)

  std::size_t size() const { return log_raw.size(); }

  double effective_sample_size() const {
    double s2 = 0;
    for (double w : normalized) s2 += w * w;
    return 1.0 / s2;
  }
};

inline NestedWeights nested_log_weights(const BeliefParams& phi_prev, const BeliefParams& phi_now,
                                        const std::vector<Tensor>& samples,
                                        std::span<const double> log_liks) {
  require(samples.size() == log_liks.size(), "nested_log_weights: samples/likelihood mismatch");
  require(!samples.empty(), "nested_log_weights: no samples");
  NestedWeights out;
  out.log_raw.resize(samples.size());
  const double neg_inf = -std::numeric_limits<double>::infinity();
  double best = neg_inf;
  for (std::size_t j = 0; j < samples.size(); ++j) {
    double ll = log_liks[j];
    // -inf is admissible evidence (impossible under this sample); NaN or +inf
    // is a defect upstream.
    require(!std::isnan(ll) && ll != std::numeric_limits<double>::infinity(),
            "nested_log_weights: non-finite log-likelihood at sample " + std::to_string(j));
    double lw = gaussian_log_density(samples[j], phi_prev) -
                gaussian_log_density(samples[j], phi_now) + ll;
    require(!std::isnan(lw), "nested_log_weights: non-finite log-density at sample " +
                                 std::to_string(j));
    out.log_raw[j] = lw;
    best = std::max(best, lw);
  }
  require(best > neg_inf, "nested_log_weights: all nested weights vanished");
  out.normalized.resize(samples.size());
  double z = 0;
  for (std::size_t j = 0; j < samples.size(); ++j) {
    double w = out.log_raw[j] == neg_inf ? 0.0 : std::exp(out.log_raw[j] - best);
    out.normalized[j] = w;
    z += w;
  }
  for (double& w : out.normalized) w /= z;
  return out;
}

// One evidence window's lower bound on the marginal history likelihood:
//   L_Z = −KL(φ ∥ prior) + (1/K) Σ_{samples} Σ_{window} ln p(step | M)
// plus a small entropy bonus that discourages belief collapse. The pieces are
// kept separate so the outer loss can weight them individually.
struct ElboTerms {
  double kl = 0;
  double decode = 0;
  double entropy = 0;
  double entropy_weight = kEntropyBonusWeight;

  double l_z() const { return -kl + decode + entropy_weight * entropy; }
};

// DecodeFn: double(const Tensor& sample, std::size_t step_index).
template <class DecodeFn>
ElboTerms elbo_window(const BeliefParams& phi, const BeliefParams& prior, std::size_t n_steps,
                      std::size_t k_elbo, DecodeFn&& decode, RngStream& rng,
                      double entropy_weight = kEntropyBonusWeight) {
  require(k_elbo >= 1, "elbo_window: need at least one sample");
  ElboTerms out;
  out.kl = gaussian_kl(phi, prior);
  out.entropy = gaussian_entropy(phi);
  out.entropy_weight = entropy_weight;
  double acc = 0;
  for (std::size_t k = 0; k < k_elbo; ++k) {
    Tensor m = sample_gaussian(phi, rng);
    for (std::size_t t = 0; t < n_steps; ++t) acc += decode(m, t);
  }
  out.decode = acc / double(k_elbo);
  return out;
}

// --- differentiable builders for the outer loss ------------------------------

// KL(q || p) with q given as tape nodes and p as constants.
inline ad::Value gaussian_kl_node(ad::Tape& tape, ad::Value q_mean, ad::Value q_log_std,
                              const BeliefParams& p) {
  const std::size_t d = p.dim();
  require(tape.value(q_mean).size() == d && tape.value(q_log_std).size() == d,
          "gaussian_kl_node: dimension mismatch");
  Tensor inv_vp({d}), p_ls_minus_half({d});
  for (std::size_t i = 0; i < d; ++i) {
    inv_vp[i] = std::exp(-2.0 * p.log_std[i]);
    p_ls_minus_half[i] = p.log_std[i] - 0.5;
  }
  ad::Value vq = tape.exp(tape.scale(q_log_std, 2.0));
  ad::Value dm2 = tape.square(tape.sub(q_mean, tape.constant(p.mean)));
  ad::Value quad = tape.scale(tape.mul(tape.add(vq, dm2), tape.constant(inv_vp)), 0.5);
  ad::Value rest = tape.sub(tape.constant(p_ls_minus_half), q_log_std);
  return tape.sum(tape.add(quad, rest));
}

inline ad::Value gaussian_entropy_node(ad::Tape& tape, ad::Value q_log_std) {
  const double c = 0.5 * std::log(2.0 * std::numbers::pi * std::numbers::e);
  std::size_t d = tape.value(q_log_std).size();
  return tape.add_scalar(tape.sum(q_log_std), c * double(d));
}

}  // namespace vbsd::belief
