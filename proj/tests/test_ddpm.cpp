#include <cmath>

#include "doctest.h"
#include "fluiddiff/ddpm.hpp"
#include "support/test_util.hpp"

using namespace fluiddiff;
using namespace fluiddiff::ddpm;
using fluiddiff::testing::random_tensor;

namespace {

// Per-pixel sample mean and standard deviation over `draws` realizations.
struct Moments {
  std::vector<double> mean, std;
};

template <typename Draw>
Moments pixel_moments(std::size_t n, std::size_t draws, Draw draw) {
  std::vector<double> s1(n, 0.0), s2(n, 0.0);
  for (std::size_t d = 0; d < draws; ++d) {
    const Tensor<double> x = draw();
    for (std::size_t i = 0; i < n; ++i) {
      s1[i] += x[i];
      s2[i] += x[i] * x[i];
    }
  }
  Moments m{std::vector<double>(n), std::vector<double>(n)};
  for (std::size_t i = 0; i < n; ++i) {
    m.mean[i] = s1[i] / draws;
    m.std[i] = std::sqrt(std::max(0.0, s2[i] / draws - m.mean[i] * m.mean[i]));
  }
  return m;
}

}  // namespace

TEST_CASE("make_schedule") {
  const NoiseSchedule s = make_schedule(400, 1e-4, 0.02);
  CHECK(s.beta[1] == 1e-4);
  CHECK(s.beta[400] == 0.02);
  CHECK(s.alpha_bar[0] == 1.0);
  CHECK(s.alpha_bar[1] == doctest::Approx(0.9999).epsilon(1e-15));
  CHECK(s.sigma2[1] == 0.0);
  // Reference: 30-digit product of (1 - beta_t), 0.0174728733726387...
  CHECK(s.alpha_bar[400] == doctest::Approx(0.017472873372638712).epsilon(1e-12));
  CHECK(s.alpha_bar[400] > 0.005);
  CHECK(s.alpha_bar[400] < 0.05);
  for (std::size_t t = 1; t <= 400; ++t) {
    CHECK(s.beta[t] > 0.0);
    CHECK(s.beta[t] < 1.0);
    CHECK(s.beta[t] >= s.beta[t - 1]);
    CHECK(s.alpha_bar[t] < s.alpha_bar[t - 1]);
  }
  CHECK_THROWS_AS(make_schedule(0, 1e-4, 0.02), std::invalid_argument);
  CHECK_THROWS_AS(make_schedule(10, 0.02, 1e-4), std::invalid_argument);
  CHECK_THROWS_AS(make_schedule(10, 0.0, 0.02), std::invalid_argument);
  CHECK_THROWS_AS(make_schedule(10, 1e-4, 1.0), std::invalid_argument);
}

TEST_CASE("q_sample") {
  const NoiseSchedule s = make_schedule(400, 1e-4, 0.02);
  Rng rng(1);
  const auto x0 = random_tensor(Shape{8, 8}, rng);
  SUBCASE("zero noise scales x0") {
    const auto out = q_sample(x0, 37, Tensor<double>(x0.shape()), s);
    for (std::size_t i = 0; i < 64; ++i) CHECK(out[i] == std::sqrt(s.alpha_bar[37]) * x0[i]);
  }
  SUBCASE("t=1 stays within sqrt(beta_1)|eps| of x0") {
    const auto eps = random_tensor(x0.shape(), rng);
    const auto out = q_sample(x0, 1, eps, s);
    for (std::size_t i = 0; i < 64; ++i) {
      CHECK(std::abs(out[i] - x0[i]) <= std::sqrt(s.beta[1]) * (std::abs(eps[i]) + std::abs(x0[i])));
    }
  }
  SUBCASE("step range is enforced") {
    CHECK_THROWS_AS(q_sample(x0, 0, x0, s), std::out_of_range);
    CHECK_THROWS_AS(q_sample(x0, 401, x0, s), std::out_of_range);
  }
  SUBCASE("Monte-Carlo moments match the closed form at t=100") {
    Rng draws(2);
    const auto m = pixel_moments(64, 10000, [&] {
      return q_sample(x0, 100, random_tensor(x0.shape(), draws), s);
    });
    for (std::size_t i = 0; i < 64; ++i) {
      CHECK(std::abs(m.mean[i] - std::sqrt(s.alpha_bar[100]) * x0[i]) < 0.05);
      CHECK(std::abs(m.std[i] - std::sqrt(1.0 - s.alpha_bar[100])) < 0.05);
    }
  }
}

TEST_CASE("iterate_forward") {
  const NoiseSchedule s = make_schedule(400, 1e-4, 0.02);
  Rng rng(3);
  const auto x0 = random_tensor(Shape{8, 8}, rng);
  SUBCASE("single step equals q_sample with the same noise") {
    Rng a(9), b(9);
    const auto stepped = iterate_forward(x0, 1, s, a);
    Tensor<double> z(x0.shape());
    for (auto& v : z.data()) v = b.normal();
    const auto closed = q_sample(x0, 1, z, s);
    for (std::size_t i = 0; i < 64; ++i) CHECK(stepped[i] == doctest::Approx(closed[i]).epsilon(1e-14));
  }
  SUBCASE("noise-free chain telescopes") {
    // With z_s = 0 the chain is a pure product of sqrt(alpha_s).
    std::vector<double> x(x0.data().begin(), x0.data().end());
    for (std::size_t t = 1; t <= 250; ++t)
      for (double& v : x) v *= std::sqrt(1.0 - s.beta[t]);
    for (std::size_t i = 0; i < 64; ++i) CHECK(x[i] == doctest::Approx(std::sqrt(s.alpha_bar[250]) * x0[i]).epsilon(1e-12));
  }
  SUBCASE("marginal at t=100 matches q_sample") {
    Rng chain(4), closed(5);
    const auto a = pixel_moments(64, 10000, [&] { return iterate_forward(x0, 100, s, chain); });
    const auto b = pixel_moments(64, 10000, [&] {
      return q_sample(x0, 100, random_tensor(x0.shape(), closed), s);
    });
    for (std::size_t i = 0; i < 64; ++i) {
      CHECK(std::abs(a.mean[i] - b.mean[i]) < 0.05);
      CHECK(std::abs(a.std[i] - b.std[i]) < 0.05);
    }
  }
}

TEST_CASE("posterior_mean_var") {
  SUBCASE("t=1 collapses onto x0") {
    const NoiseSchedule s = make_schedule(50, 1e-4, 0.02);
    Rng rng(6);
    const auto x0 = random_tensor(Shape{4}, rng), xt = random_tensor(Shape{4}, rng);
    const auto pm = posterior_mean_var(x0, xt, 1, s);
    for (std::size_t i = 0; i < 4; ++i) CHECK(std::abs(pm.mean[i] - x0[i]) < 1e-12);
    CHECK(pm.variance == 0.0);
  }
  SUBCASE("x0-form and eps-form agree for every t") {
    const NoiseSchedule s = make_schedule(400, 1e-4, 0.02);
    Rng rng(7);
    const auto x0 = random_tensor(Shape{3, 4, 4}, rng);
    for (std::size_t t = 1; t <= 400; ++t) {
      const auto eps = random_tensor(x0.shape(), rng);
      const auto xt = q_sample(x0, t, eps, s);
      const auto a = posterior_mean_var(x0, xt, t, s).mean;
      const auto b = eps_mean(xt, eps, t, s);
      for (std::size_t i = 0; i < a.numel(); ++i) {
        CHECK(std::abs(a[i] - b[i]) <= 1e-6 * std::max(1.0, std::abs(a[i])));
      }
    }
  }
  SUBCASE("two-step toy schedule by hand") {
    const NoiseSchedule s = make_schedule(2, 0.1, 0.2);
    REQUIRE(s.beta[1] == 0.1);
    REQUIRE(s.beta[2] == 0.2);
    const auto pm = posterior_mean_var(Tensor<double>::scalar(1.0), Tensor<double>::scalar(0.5), 2, s);
    // sqrt(.9)*.2/.28 * 1 + sqrt(.8)*.1/.28 * .5 and .1/.28 * .2
    CHECK(pm.mean.item() == doctest::Approx(0.8373500684289234).epsilon(1e-13));
    CHECK(pm.variance == doctest::Approx(0.07142857142857142).epsilon(1e-13));
  }
}

TEST_CASE("sinusoidal_embed") {
  const auto zero = sinusoidal_embed(0.0, 8);
  for (std::size_t i = 0; i < 8; ++i) CHECK(zero[i] == (i % 2 == 0 ? 0.0 : 1.0));
  const auto v = sinusoidal_embed(3.0, 4);
  CHECK(v[2] == doctest::Approx(std::sin(0.01 * 3.0)).epsilon(1e-15));
  CHECK(v[3] == doctest::Approx(std::cos(0.01 * 3.0)).epsilon(1e-15));
  Rng rng(8);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t d = 2 * (1 + rng.uniform_int(0, 31));
    const auto e = sinusoidal_embed(rng.uniform(-500, 500), d);
    CHECK(e.size() == d);
    for (double x : e) CHECK(std::abs(x) <= 1.0);
  }
  CHECK_THROWS_AS(sinusoidal_embed(1.0, 5), std::invalid_argument);
  CHECK(time_feature(40, 400, TimeInput::Integer) == 40.0);
  CHECK(time_feature(40, 400, TimeInput::Normalized) == 0.1);
  CHECK(parse_time_input("normalized") == TimeInput::Normalized);
  CHECK_THROWS_AS(parse_time_input("float"), std::invalid_argument);
}

TEST_CASE("build_condition") {
  Rng rng(9);
  const auto rho0 = random_tensor<float>(Shape{6, 5}, rng);
  const auto c0 = build_condition(rho0, 0.0, 8.0);
  REQUIRE(c0.channels.shape() == Shape{2, 6, 5});
  for (std::size_t i = 0; i < 30; ++i) {
    CHECK(c0.channels[i] == rho0[i]);
    CHECK(c0.channels[30 + i] == 0.0f);
  }
  const auto c1 = build_condition(rho0, 8.0, 8.0);
  for (std::size_t i = 0; i < 30; ++i) CHECK(c1.channels[30 + i] == 1.0f);
  CHECK_THROWS_AS(build_condition(rho0, 8.5, 8.0), std::out_of_range);
  CHECK_THROWS_AS(build_condition(rho0, -0.1, 8.0), std::out_of_range);
}

TEST_CASE("diffusion_loss") {
  Rng rng(10);
  Tape<double> tape(false);
  const auto eps = random_tensor(Shape{2, 4, 4}, rng);
  CHECK(diffusion_loss(tape, eps, eps).item() == 0.0);
  Tensor<double> shifted = eps.clone();
  for (auto& v : shifted.data()) v += 0.3;
  CHECK(diffusion_loss(tape, shifted, eps).item() == doctest::Approx(0.09).epsilon(1e-12));
  const auto other = random_tensor(eps.shape(), rng);
  double acc = 0;
  for (std::size_t i = 0; i < eps.numel(); ++i) acc += (other[i] - eps[i]) * (other[i] - eps[i]);
  const double loss = diffusion_loss(tape, other, eps).item();
  CHECK(std::abs(loss - acc / eps.numel()) <= 1e-6 * acc / eps.numel());
  CHECK(loss > 0.0);
  CHECK_THROWS_AS(diffusion_loss(tape, eps, Tensor<double>(Shape{2, 4, 3})), std::invalid_argument);
}

TEST_CASE("variational_term") {
  const NoiseSchedule s = make_schedule(100, 1e-4, 0.02);
  Rng rng(11);
  const auto x0 = random_tensor(Shape{8}, rng), eps = random_tensor(Shape{8}, rng);
  const auto xt = q_sample(x0, 50, eps, s);
  CHECK(variational_term(x0, xt, eps, 50, s) == doctest::Approx(0.0).epsilon(1e-12));
  CHECK(variational_term(x0, xt, Tensor<double>(Shape{8}), 50, s) > 0.0);
  CHECK_THROWS_AS(variational_term(x0, xt, eps, 1, s), std::out_of_range);
}

TEST_CASE("ancestral_sample") {
  SUBCASE("single step with a null denoiser") {
    const NoiseSchedule s = make_schedule(1, 0.01, 0.01);
    const Denoiser<double> zero = [](const Tensor<double>& x, std::size_t, const Condition<double>&) {
      return Tensor<double>(x.shape());
    };
    const auto out = ancestral_sample(zero, Condition<double>{}, Shape{3, 3}, s, 5);
    Rng rng(5);
    for (std::size_t i = 0; i < 9; ++i) CHECK(out[i] == doctest::Approx(rng.normal() / std::sqrt(0.99)).epsilon(1e-14));
  }
  SUBCASE("analytic denoiser concentrates on the Dirac target") {
    const NoiseSchedule s = make_schedule(100, 1e-4, 0.02);
    Rng rng(12);
    const auto target = random_tensor(Shape{8, 8}, rng);
    const Denoiser<double> oracle = [&](const Tensor<double>& x, std::size_t t, const Condition<double>&) {
      Tensor<double> eps(x.shape());
      for (std::size_t i = 0; i < x.numel(); ++i) {
        eps[i] = (x[i] - std::sqrt(s.alpha_bar[t]) * target[i]) / std::sqrt(1.0 - s.alpha_bar[t]);
      }
      return eps;
    };
    std::vector<double> mean(64, 0.0);
    for (std::uint64_t seed = 0; seed < 64; ++seed) {
      const auto x = ancestral_sample(oracle, Condition<double>{}, Shape{8, 8}, s, seed);
      for (std::size_t i = 0; i < 64; ++i) mean[i] += x[i] / 64.0;
    }
    double mae = 0;
    for (std::size_t i = 0; i < 64; ++i) mae += std::abs(mean[i] - target[i]) / 64.0;
    CHECK(mae < 0.05);
  }
  SUBCASE("deterministic per seed; non-finite output aborts") {
    const NoiseSchedule s = make_schedule(20, 1e-4, 0.02);
    const Denoiser<float> half = [](const Tensor<float>& x, std::size_t, const Condition<float>&) {
      Tensor<float> e = x.clone();
      for (auto& v : e.data()) v *= 0.5f;
      return e;
    };
    const auto a = ancestral_sample(half, Condition<float>{}, Shape{2, 4, 4}, s, 77);
    const auto b = ancestral_sample(half, Condition<float>{}, Shape{2, 4, 4}, s, 77);
    for (std::size_t i = 0; i < a.numel(); ++i) CHECK(a[i] == b[i]);

    const Denoiser<float> broken = [](const Tensor<float>& x, std::size_t t, const Condition<float>&) {
      Tensor<float> e(x.shape());
      if (t == 7) e[0] = std::nanf("");
      return e;
    };
    CHECK_THROWS_WITH_AS(ancestral_sample(broken, Condition<float>{}, Shape{2, 4, 4}, s, 1),
                         doctest::Contains("step 7"), NumericalError);
  }
}
