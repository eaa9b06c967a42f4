#include "fluiddiff/ddpm.hpp"

#include <cmath>
#include <stdexcept>

#include "fluiddiff/ops.hpp"

namespace fluiddiff::ddpm {
namespace {

template <typename T>
void require_same_shape(const char* op, const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape()) {
    throw std::invalid_argument(std::string(op) + ": shape mismatch " + shape_str(a.shape()) +
                                " vs " + shape_str(b.shape()));
  }
}

// out = ca * a + cb * b, evaluated in double.
template <typename T>
Tensor<T> combine(double ca, const Tensor<T>& a, double cb, const Tensor<T>& b) {
  Tensor<T> out(a.shape());
  for (std::size_t i = 0; i < out.numel(); ++i) {
    out[i] = static_cast<T>(ca * static_cast<double>(a[i]) + cb * static_cast<double>(b[i]));
  }
  return out;
}

}  // namespace

void NoiseSchedule::check_step(std::size_t t) const {
  if (t < 1 || t > steps) {
    throw std::out_of_range("diffusion step " + std::to_string(t) + " outside [1, " +
                            std::to_string(steps) + "]");
  }
}

NoiseSchedule make_schedule(std::size_t steps, double beta_start, double beta_end) {
  if (steps < 1) throw std::invalid_argument("make_schedule: T must be >= 1");
  if (!(beta_start > 0.0) || !(beta_start <= beta_end) || !(beta_end < 1.0)) {
    throw std::invalid_argument("make_schedule: need 0 < beta_start <= beta_end < 1");
  }
  NoiseSchedule s;
  s.steps = steps;
  s.beta_start = beta_start;
  s.beta_end = beta_end;
  s.beta.assign(steps + 1, 0.0);
  s.alpha.assign(steps + 1, 1.0);
  s.alpha_bar.assign(steps + 1, 1.0);
  s.sigma2.assign(steps + 1, 0.0);
  for (std::size_t t = 1; t <= steps; ++t) {
    const double frac = steps == 1 ? 0.0 : static_cast<double>(t - 1) / static_cast<double>(steps - 1);
    s.beta[t] = t == steps ? beta_end : beta_start + (beta_end - beta_start) * frac;
    s.alpha[t] = 1.0 - s.beta[t];
    s.alpha_bar[t] = s.alpha_bar[t - 1] * s.alpha[t];
    s.sigma2[t] = (1.0 - s.alpha_bar[t - 1]) / (1.0 - s.alpha_bar[t]) * s.beta[t];
  }
  return s;
}

TimeInput parse_time_input(const std::string& name) {
  if (name == "integer") return TimeInput::Integer;
  if (name == "normalized") return TimeInput::Normalized;
  throw std::invalid_argument("time_input must be 'integer' or 'normalized', got '" + name + "'");
}

std::string to_string(TimeInput mode) {
  return mode == TimeInput::Integer ? "integer" : "normalized";
}

double time_feature(std::size_t t, std::size_t steps, TimeInput mode) {
  return mode == TimeInput::Integer ? static_cast<double>(t)
                                    : static_cast<double>(t) / static_cast<double>(steps);
}

std::vector<double> sinusoidal_embed(double s, std::size_t dim) {
  if (dim < 2 || dim % 2 != 0) {
    throw std::invalid_argument("sinusoidal_embed: dimension must be even and >= 2, got " +
                                std::to_string(dim));
  }
  std::vector<double> v(dim);
  for (std::size_t k = 0; k < dim / 2; ++k) {
    const double omega = std::pow(10000.0, -2.0 * static_cast<double>(k) / static_cast<double>(dim));
    v[2 * k] = std::sin(omega * s);
    v[2 * k + 1] = std::cos(omega * s);
  }
  return v;
}

template <typename T>
Tensor<T> q_sample(const Tensor<T>& x0, std::size_t t, const Tensor<T>& eps, const NoiseSchedule& sched) {
  sched.check_step(t);
  require_same_shape("q_sample", x0, eps);
  return combine(std::sqrt(sched.alpha_bar[t]), x0, std::sqrt(1.0 - sched.alpha_bar[t]), eps);
}

template <typename T>
Tensor<T> iterate_forward(const Tensor<T>& x0, std::size_t t, const NoiseSchedule& sched, Rng& rng) {
  sched.check_step(t);
  std::vector<double> x(x0.data().begin(), x0.data().end());
  for (std::size_t s = 1; s <= t; ++s) {
    const double keep = std::sqrt(1.0 - sched.beta[s]);
    const double noise = std::sqrt(sched.beta[s]);
    for (double& v : x) v = keep * v + noise * rng.normal();
  }
  Tensor<T> out(x0.shape());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = static_cast<T>(x[i]);
  return out;
}

template <typename T>
PosteriorMoments<T> posterior_mean_var(const Tensor<T>& x0, const Tensor<T>& xt, std::size_t t,
                                       const NoiseSchedule& sched) {
  sched.check_step(t);
  require_same_shape("posterior_mean_var", x0, xt);
  const double ab = sched.alpha_bar[t], ab_prev = sched.alpha_bar[t - 1];
  const double c0 = std::sqrt(ab_prev) * sched.beta[t] / (1.0 - ab);
  const double ct = std::sqrt(sched.alpha[t]) * (1.0 - ab_prev) / (1.0 - ab);
  return {combine(c0, x0, ct, xt), sched.sigma2[t]};
}

template <typename T>
Tensor<T> eps_mean(const Tensor<T>& xt, const Tensor<T>& eps, std::size_t t, const NoiseSchedule& sched) {
  sched.check_step(t);
  require_same_shape("eps_mean", xt, eps);
  const double inv_sqrt_alpha = 1.0 / std::sqrt(sched.alpha[t]);
  const double eps_coef = (1.0 - sched.alpha[t]) / std::sqrt(1.0 - sched.alpha_bar[t]);
  return combine(inv_sqrt_alpha, xt, -inv_sqrt_alpha * eps_coef, eps);
}

template <typename T>
Tensor<T> diffusion_loss(Tape<T>& tape, const Tensor<T>& eps_pred, const Tensor<T>& eps) {
  require_same_shape("diffusion_loss", eps_pred, eps);
  return ops::mse(tape, eps_pred, eps);
}

template <typename T>
double variational_term(const Tensor<T>& x0, const Tensor<T>& xt, const Tensor<T>& eps_pred,
                        std::size_t t, const NoiseSchedule& sched) {
  sched.check_step(t);
  if (t < 2) throw std::out_of_range("variational_term: sigma2 vanishes at t = 1");
  const auto posterior = posterior_mean_var(x0, xt, t, sched);
  const Tensor<T> model_mean = eps_mean(xt, eps_pred, t, sched);
  double sq = 0.0;
  for (std::size_t i = 0; i < model_mean.numel(); ++i) {
    const double d = static_cast<double>(posterior.mean[i]) - static_cast<double>(model_mean[i]);
    sq += d * d;
  }
  return sq / (2.0 * posterior.variance);
}

template <typename T>
Condition<T> build_condition(const Tensor<T>& rho0, double tau, double total_time) {
  if (!(total_time > 0.0)) throw std::invalid_argument("build_condition: total_time must be > 0");
  if (!(tau >= 0.0 && tau <= total_time)) {
    throw std::out_of_range("build_condition: tau " + std::to_string(tau) + " outside [0, " +
                            std::to_string(total_time) + "]");
  }
  Shape shape;
  if (rho0.ndim() == 2) {
    shape = {2, rho0.dim(0), rho0.dim(1)};
  } else if (rho0.ndim() == 3 && rho0.dim(0) == 1) {
    shape = {2, rho0.dim(1), rho0.dim(2)};
  } else {
    throw std::invalid_argument("build_condition: rho0 must be (H, W) or (1, H, W), got " +
                                shape_str(rho0.shape()));
  }
  const std::size_t plane = shape[1] * shape[2];
  std::vector<T> data(2 * plane);
  std::copy(rho0.data().begin(), rho0.data().end(), data.begin());
  std::fill(data.begin() + static_cast<std::ptrdiff_t>(plane), data.end(), static_cast<T>(tau / total_time));
  return {Tensor<T>(std::move(shape), std::move(data)), tau};
}

template <typename T>
Tensor<T> ancestral_sample(const Denoiser<T>& denoiser, const Condition<T>& y, const Shape& shape,
                           const NoiseSchedule& sched, std::uint64_t seed) {
  Rng rng(seed);
  const std::size_t n = shape_numel(shape);
  std::vector<double> x(n);
  for (double& v : x) v = rng.normal();
  Tensor<T> xt(shape);
  for (std::size_t t = sched.steps; t >= 1; --t) {
    for (std::size_t i = 0; i < n; ++i) xt[i] = static_cast<T>(x[i]);
    const Tensor<T> eps = denoiser(xt, t, y);
    if (eps.shape() != shape) {
      throw std::invalid_argument("ancestral_sample: denoiser returned shape " + shape_str(eps.shape()));
    }
    if (!eps.all_finite()) {
      throw NumericalError("ancestral_sample: non-finite denoiser output at step " + std::to_string(t));
    }
    const double inv_sqrt_alpha = 1.0 / std::sqrt(sched.alpha[t]);
    const double eps_coef = (1.0 - sched.alpha[t]) / std::sqrt(1.0 - sched.alpha_bar[t]);
    const double sigma = std::sqrt(sched.sigma2[t]);
    for (std::size_t i = 0; i < n; ++i) {
      x[i] = inv_sqrt_alpha * (x[i] - eps_coef * static_cast<double>(eps[i]));
      if (t > 1) x[i] += sigma * rng.normal();
    }
  }
  Tensor<T> out(shape);
  for (std::size_t i = 0; i < n; ++i) out[i] = static_cast<T>(x[i]);
  return out;
}

#define FLUIDDIFF_INSTANTIATE_DDPM(T)                                                                    \
  template Tensor<T> q_sample(const Tensor<T>&, std::size_t, const Tensor<T>&, const NoiseSchedule&);   \
  template Tensor<T> iterate_forward(const Tensor<T>&, std::size_t, const NoiseSchedule&, Rng&);        \
  template PosteriorMoments<T> posterior_mean_var(const Tensor<T>&, const Tensor<T>&, std::size_t,      \
                                                  const NoiseSchedule&);                                \
  template Tensor<T> eps_mean(const Tensor<T>&, const Tensor<T>&, std::size_t, const NoiseSchedule&);   \
  template Tensor<T> diffusion_loss(Tape<T>&, const Tensor<T>&, const Tensor<T>&);                      \
  template double variational_term(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, std::size_t,   \
                                   const NoiseSchedule&);                                               \
  template Condition<T> build_condition(const Tensor<T>&, double, double);                              \
  template Tensor<T> ancestral_sample(const Denoiser<T>&, const Condition<T>&, const Shape&,            \
                                      const NoiseSchedule&, std::uint64_t);

FLUIDDIFF_INSTANTIATE_DDPM(float)
FLUIDDIFF_INSTANTIATE_DDPM(double)

#undef FLUIDDIFF_INSTANTIATE_DDPM

}  // namespace fluiddiff::ddpm
