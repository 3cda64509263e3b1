#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "dithead/common.hpp"
#include "dithead/tensor.hpp"

namespace dithead {

// Per-step noise tables. Timesteps are 1-based; alpha_bar(0) == 1 is the
// "no noise" convention, so q_sample at t=0 is the identity.
struct NoiseSchedule {
  int steps = 0;
  std::vector<double> betas;       // beta[t-1] for t in [1..steps]
  std::vector<double> alphas;      // 1 - beta
  std::vector<double> alpha_bars;  // running product of alphas

  double beta(int t) const {
    check(t, 1);
    return betas[static_cast<size_t>(t - 1)];
  }
  double alpha(int t) const {
    check(t, 1);
    return alphas[static_cast<size_t>(t - 1)];
  }
  double alpha_bar(int t) const {
    check(t, 0);
    return t == 0 ? 1.0 : alpha_bars[static_cast<size_t>(t - 1)];
  }

 private:
  void check(int t, int lo) const {
    if (t < lo || t > steps)
      throw ParameterError("timestep " + std::to_string(t) + " outside [" + std::to_string(lo) + ".." +
                           std::to_string(steps) + "]");
  }
};

enum class SamplerKind { ddpm, ddim };

struct SamplerConfig {
  SamplerKind kind = SamplerKind::ddim;
  int num_inference_steps = 250;
  double eta = 0.0;
};

inline NoiseSchedule make_linear_schedule(int steps, double beta_start, double beta_end) {
  if (steps < 1) throw ParameterError("schedule: steps must be >= 1");
  if (!(beta_start > 0.0) || !(beta_start <= beta_end) || !(beta_end < 1.0))
    throw ParameterError("schedule: need 0 < beta_start <= beta_end < 1");
  NoiseSchedule s;
  s.steps = steps;
  s.betas.resize(static_cast<size_t>(steps));
  s.alphas.resize(static_cast<size_t>(steps));
  s.alpha_bars.resize(static_cast<size_t>(steps));
  double prod = 1.0;
  for (int i = 0; i < steps; ++i) {
    double b = steps == 1 ? beta_start : beta_start + (beta_end - beta_start) * static_cast<double>(i) / (steps - 1);
    s.betas[static_cast<size_t>(i)] = b;
    s.alphas[static_cast<size_t>(i)] = 1.0 - b;
    prod *= 1.0 - b;
    s.alpha_bars[static_cast<size_t>(i)] = prod;
  }
  return s;
}

// Strictly decreasing subsequence of [1..T], uniformly spaced, ending at the
// smallest selected step. Used by the samplers; pairs are (seq[i], seq[i+1])
// with an implicit final hop to 0.
inline std::vector<int> make_step_sequence(int total_steps, int num_inference_steps) {
  if (num_inference_steps < 1 || num_inference_steps > total_steps)
    throw ParameterError("sampler: num_inference_steps must be in [1.." + std::to_string(total_steps) + "]");
  std::vector<int> seq(static_cast<size_t>(num_inference_steps));
  if (num_inference_steps == 1) {
    seq[0] = total_steps;
    return seq;
  }
  for (int i = 0; i < num_inference_steps; ++i) {
    double f = static_cast<double>(i) / (num_inference_steps - 1);
    seq[static_cast<size_t>(i)] = total_steps - static_cast<int>(std::llround(f * (total_steps - 1)));
  }
  for (size_t i = 1; i < seq.size(); ++i)
    if (seq[i] >= seq[i - 1]) throw ParameterError("sampler: step sequence not strictly decreasing");
  return seq;
}

// z_t = sqrt(alpha_bar_t) z0 + sqrt(1 - alpha_bar_t) eps
template <typename T>
Tensor<T> q_sample(const Tensor<T>& z0, int t, const Tensor<T>& eps, const NoiseSchedule& schedule) {
  check_same_shape(z0, eps, "q_sample");
  double ab = schedule.alpha_bar(t);
  T c0 = static_cast<T>(std::sqrt(ab));
  T c1 = static_cast<T>(std::sqrt(1.0 - ab));
  std::vector<T> out(static_cast<size_t>(z0.numel()));
  const T* pz = z0.data();
  const T* pe = eps.data();
  for (size_t i = 0; i < out.size(); ++i) out[i] = c0 * pz[i] + c1 * pe[i];
  return Tensor<T>::from_data(z0.shape(), std::move(out));
}

// Applies the per-step transition z_s = sqrt(1-beta_s) z_{s-1} + sqrt(beta_s) eps_s
// for s = 1..t. Distributionally equal to q_sample; kept as its oracle.
template <typename T>
Tensor<T> q_sample_iterative(const Tensor<T>& z0, int t, const std::vector<Tensor<T>>& eps_sequence,
                             const NoiseSchedule& schedule) {
  if (t < 0 || t > schedule.steps) throw ParameterError("q_sample_iterative: t out of range");
  if (static_cast<int>(eps_sequence.size()) < t) throw ParameterError("q_sample_iterative: need t noise draws");
  Tensor<T> z = Tensor<T>::from_data(z0.shape(), z0.vec());
  for (int s = 1; s <= t; ++s) {
    const Tensor<T>& eps = eps_sequence[static_cast<size_t>(s - 1)];
    check_same_shape(z0, eps, "q_sample_iterative");
    double b = schedule.beta(s);
    T c0 = static_cast<T>(std::sqrt(1.0 - b));
    T c1 = static_cast<T>(std::sqrt(b));
    T* pz = z.data();
    const T* pe = eps.data();
    for (int64_t i = 0; i < z.numel(); ++i) pz[i] = c0 * pz[i] + c1 * pe[i];
  }
  return z;
}

// Deterministic at eta=0. Predicts the clean latent from eps_pred, then moves
// to t_prev along the implicit trajectory; fresh noise enters only via eta.
template <typename T>
Tensor<T> ddim_step(const Tensor<T>& z_t, const Tensor<T>& eps_pred, int t, int t_prev,
                    const NoiseSchedule& schedule, double eta, const Tensor<T>& noise = Tensor<T>()) {
  check_same_shape(z_t, eps_pred, "ddim_step");
  if (t_prev < 0 || t <= t_prev) throw ParameterError("ddim_step: need t > t_prev >= 0");
  double ab_t = schedule.alpha_bar(t);
  double ab_prev = schedule.alpha_bar(t_prev);
  double sigma = 0.0;
  if (eta > 0.0) {
    sigma = eta * std::sqrt((1.0 - ab_prev) / (1.0 - ab_t)) * std::sqrt(1.0 - ab_t / ab_prev);
    if (!noise.defined()) throw ParameterError("ddim_step: eta > 0 requires a noise tensor");
    check_same_shape(z_t, noise, "ddim_step noise");
  }
  double dir = 1.0 - ab_prev - sigma * sigma;
  if (dir < 0.0) dir = 0.0;
  T inv_sqrt_ab = static_cast<T>(1.0 / std::sqrt(ab_t));
  T c_eps = static_cast<T>(std::sqrt(1.0 - ab_t));
  T c0 = static_cast<T>(std::sqrt(ab_prev));
  T c1 = static_cast<T>(std::sqrt(dir));
  T c2 = static_cast<T>(sigma);
  std::vector<T> out(static_cast<size_t>(z_t.numel()));
  const T* pz = z_t.data();
  const T* pe = eps_pred.data();
  const T* pn = noise.defined() ? noise.data() : nullptr;
  for (size_t i = 0; i < out.size(); ++i) {
    T z0_hat = (pz[i] - c_eps * pe[i]) * inv_sqrt_ab;
    out[i] = c0 * z0_hat + c1 * pe[i];
    if (pn) out[i] += c2 * pn[i];
  }
  return Tensor<T>::from_data(z_t.shape(), std::move(out));
}

// Posterior-mean ancestral step with the fixed posterior variance
// beta_tilde_t = (1 - alpha_bar_{t-1}) / (1 - alpha_bar_t) * beta_t.
// The final step (t=1) adds no noise.
template <typename T>
Tensor<T> ddpm_step(const Tensor<T>& z_t, const Tensor<T>& eps_pred, int t, const NoiseSchedule& schedule,
                    const Tensor<T>& noise = Tensor<T>()) {
  check_same_shape(z_t, eps_pred, "ddpm_step");
  if (t < 1 || t > schedule.steps) throw ParameterError("ddpm_step: t out of range");
  double a_t = schedule.alpha(t);
  double ab_t = schedule.alpha_bar(t);
  double ab_prev = schedule.alpha_bar(t - 1);
  double beta_t = schedule.beta(t);
  double beta_tilde = (1.0 - ab_prev) / (1.0 - ab_t) * beta_t;
  T c_mean = static_cast<T>(1.0 / std::sqrt(a_t));
  T c_eps = static_cast<T>(beta_t / std::sqrt(1.0 - ab_t));
  T c_noise = static_cast<T>(t > 1 ? std::sqrt(beta_tilde) : 0.0);
  if (t > 1 && noise.defined()) check_same_shape(z_t, noise, "ddpm_step noise");
  std::vector<T> out(static_cast<size_t>(z_t.numel()));
  const T* pz = z_t.data();
  const T* pe = eps_pred.data();
  const T* pn = noise.defined() ? noise.data() : nullptr;
  for (size_t i = 0; i < out.size(); ++i) {
    out[i] = c_mean * (pz[i] - c_eps * pe[i]);
    if (pn && t > 1) out[i] += c_noise * pn[i];
  }
  return Tensor<T>::from_data(z_t.shape(), std::move(out));
}

}  // namespace dithead
