#pragma once
// Diffusion-chain mathematics: the linear variance schedule, closed-form
// forward corruption, posterior moments, the epsilon-prediction loss,
// condition assembly and the ancestral sampler.
//
// Step indices run 1..T. Arrays in NoiseSchedule are indexed by step and
// carry the t = 0 convention alpha_bar[0] = 1, so sigma2[1] = 0.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "fluiddiff/rng.hpp"
#include "fluiddiff/tensor.hpp"

namespace fluiddiff::ddpm {

struct NoiseSchedule {
  std::size_t steps = 0;           // T
  double beta_start = 0.0;
  double beta_end = 0.0;
  std::vector<double> beta;        // [0..T], beta[0] = 0
  std::vector<double> alpha;       // 1 - beta
  std::vector<double> alpha_bar;   // cumulative product, alpha_bar[0] = 1
  std::vector<double> sigma2;      // (1 - alpha_bar[t-1]) / (1 - alpha_bar[t]) * beta[t]

  /// Throws std::out_of_range unless 1 <= t <= T.
  void check_step(std::size_t t) const;
};

/// Linear betas from beta_start (t = 1) to beta_end (t = T).
NoiseSchedule make_schedule(std::size_t steps, double beta_start, double beta_end);

/// How the diffusion step reaches the time embedding.
enum class TimeInput { Integer, Normalized };

TimeInput parse_time_input(const std::string& name);
std::string to_string(TimeInput mode);

/// Scalar fed to the sinusoidal embedding for step t.
double time_feature(std::size_t t, std::size_t steps, TimeInput mode);

/// v[2k] = sin(w_k s), v[2k+1] = cos(w_k s), w_k = 10000^(-2k/d).
std::vector<double> sinusoidal_embed(double s, std::size_t dim);

/// sqrt(alpha_bar_t) x0 + sqrt(1 - alpha_bar_t) eps.
template <typename T>
Tensor<T> q_sample(const Tensor<T>& x0, std::size_t t, const Tensor<T>& eps,
                   const NoiseSchedule& sched);

/// Runs the one-step transitions x_s = sqrt(1-beta_s) x_{s-1} + sqrt(beta_s) z_s
/// for s = 1..t, drawing z_s from rng.
template <typename T>
Tensor<T> iterate_forward(const Tensor<T>& x0, std::size_t t, const NoiseSchedule& sched, Rng& rng);

template <typename T>
struct PosteriorMoments {
  Tensor<T> mean;
  double variance = 0.0;
};

/// Mean and variance of q(x_{t-1} | x_t, x_0).
template <typename T>
PosteriorMoments<T> posterior_mean_var(const Tensor<T>& x0, const Tensor<T>& xt, std::size_t t,
                                       const NoiseSchedule& sched);

/// (1/sqrt(alpha_t)) (x_t - (1 - alpha_t)/sqrt(1 - alpha_bar_t) eps): the
/// reverse-step mean written in terms of predicted noise.
template <typename T>
Tensor<T> eps_mean(const Tensor<T>& xt, const Tensor<T>& eps, std::size_t t, const NoiseSchedule& sched);

/// Mean squared error between predicted and true noise; differentiable.
template <typename T>
Tensor<T> diffusion_loss(Tape<T>& tape, const Tensor<T>& eps_pred, const Tensor<T>& eps);

/// One variational-bound term, ||mu_t(x_t, x_0) - mu_theta||^2 / (2 sigma2_t),
/// with mu_theta from eps_pred. Diagnostic only; needs t >= 2 (sigma2_1 = 0).
template <typename T>
double variational_term(const Tensor<T>& x0, const Tensor<T>& xt, const Tensor<T>& eps_pred,
                        std::size_t t, const NoiseSchedule& sched);

/// Conditioning channels: [initial density, tau / total_time], shape (2, H, W).
template <typename T>
struct Condition {
  Tensor<T> channels;
  double tau = 0.0;
};

/// `rho0` is (H, W) or (1, H, W). Throws std::out_of_range unless
/// 0 <= tau <= total_time.
template <typename T>
Condition<T> build_condition(const Tensor<T>& rho0, double tau, double total_time);

template <typename T>
using Denoiser = std::function<Tensor<T>(const Tensor<T>& xt, std::size_t t, const Condition<T>& y)>;

/// Reverse chain from x_T ~ N(0, I) down to x_0, with no noise on the last
/// step. Throws NumericalError naming the step if the denoiser output is not
/// finite.
template <typename T>
Tensor<T> ancestral_sample(const Denoiser<T>& denoiser, const Condition<T>& y, const Shape& shape,
                           const NoiseSchedule& sched, std::uint64_t seed);

}  // namespace fluiddiff::ddpm
