#include <cmath>

#include "doctest.h"
#include "fluiddiff/unet.hpp"
#include "support/test_util.hpp"

using namespace fluiddiff;
using namespace fluiddiff::unet;
using fluiddiff::testing::grad_check;
using fluiddiff::testing::random_tensor;

namespace {

UNetConfig tiny() {
  UNetConfig c;
  c.levels = 2;
  c.base_channels = 8;
  c.channel_mult = {1, 2};
  c.groups = 4;
  c.time_embed_dim = 16;
  c.attention_levels = {1};
  return c;
}

template <typename T>
double linf(const Tensor<T>& a, const Tensor<T>& b) {
  double m = 0;
  for (std::size_t i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(double(a[i]) - double(b[i])));
  return m;
}

}  // namespace

TEST_CASE("config validation") {
  UNetConfig c = tiny();
  CHECK_NOTHROW(c.validate_extent(16, 16));
  CHECK_NOTHROW(c.validate_extent(8, 12));
  CHECK_THROWS_AS(c.validate_extent(16, 10), std::invalid_argument);
  CHECK_THROWS_AS(c.validate_extent(6, 8), std::invalid_argument);
  c.groups = 3;
  CHECK_THROWS_AS(c.validate(), std::invalid_argument);
  c = tiny();
  c.channel_mult = {1};
  CHECK_THROWS_AS(c.validate(), std::invalid_argument);
  c = tiny();
  c.attention_levels = {2};
  CHECK_THROWS_AS(c.validate(), std::invalid_argument);
}

TEST_CASE("build_unet is seed-deterministic") {
  const auto a = build_unet<double>(tiny(), 11);
  const auto b = build_unet<double>(tiny(), 11);
  const auto c = build_unet<double>(tiny(), 12);
  REQUIRE(a.names() == b.names());
  bool any_diff = false;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const auto& x = a.tensors()[i];
    const auto& y = b.tensors()[i];
    REQUIRE(x.shape() == y.shape());
    for (std::size_t k = 0; k < x.numel(); ++k) REQUIRE(x[k] == y[k]);
    for (std::size_t k = 0; k < x.numel(); ++k) any_diff |= x[k] != c.tensors()[i][k];
    CHECK(x.all_finite());
    CHECK(x.requires_grad());
  }
  CHECK(any_diff);
}

TEST_CASE("count_params") {
  SUBCASE("hand count of the smallest network") {
    UNetConfig c;
    c.levels = 1;
    c.base_channels = 1;
    c.channel_mult = {1};
    c.groups = 1;
    c.time_embed_dim = 2;
    c.attention_levels = {};
    // down0: res 4->1 (36+1+2+5) + res 1->1 (12) + time (5) + down conv (10) = 71
    // mid:   2 res (24) + time (5) + attention (4)                           = 33
    // up0:   up conv (10) + res 2->1 (18+1+2+3) + res (12) + time (5)        = 51
    // out:   conv 1->2                                                       = 20
    CHECK(count_params(c) == 175);
    CHECK(build_unet<float>(c, 0).total_numel() == 175);
  }
  SUBCASE("closed form matches enumeration") {
    for (std::size_t levels : {1, 2, 3, 4}) {
      for (std::size_t base : {4, 8, 16}) {
        UNetConfig c;
        c.levels = levels;
        c.base_channels = base;
        c.channel_mult.clear();
        for (std::size_t l = 0; l < levels; ++l) c.channel_mult.push_back(std::size_t{1} << std::min<std::size_t>(l, 2));
        c.groups = 4;
        c.attention_levels = {levels - 1};
        CHECK(count_params(c) == build_unet<float>(c, 3).total_numel());
        CHECK(count_params(c) == build_unet<double>(c, 4).total_numel());
      }
    }
  }
  SUBCASE("doubling base_channels roughly quadruples the count") {
    UNetConfig a = tiny(), b = tiny();
    b.base_channels = 16;
    const double ratio = double(build_unet<float>(b, 0).total_numel()) / double(build_unet<float>(a, 0).total_numel());
    CHECK(count_params(b) == build_unet<float>(b, 9).total_numel());
    CHECK(ratio > 3.0);
    CHECK(ratio < 4.0);
  }
  SUBCASE("four-section network") {
    UNetConfig c;
    c.levels = 4;
    c.base_channels = 8;
    c.channel_mult = {1, 2, 2, 4};
    c.attention_levels = {3};
    const auto p = build_unet<float>(c, 0);
    std::size_t down = 0, up = 0;
    for (const auto& n : p.names()) {
      down += n.ends_with(".down.w");
      up += n.ends_with(".up.w");
    }
    CHECK(down == 4);
    CHECK(up == 4);
    CHECK_NOTHROW(c.validate_extent(64, 64));
  }
}

TEST_CASE("denoise shape, determinism and conditioning") {
  const UNetConfig c = tiny();
  const auto p = build_unet<float>(c, 5);
  Rng rng(6);
  Tape<float> tape(false);
  for (auto [h, w] : {std::pair<std::size_t, std::size_t>{8, 8}, {16, 16}, {16, 8}, {4, 12}}) {
    const auto xt = random_tensor<float>(Shape{2, h, w}, rng);
    const auto y = random_tensor<float>(Shape{2, h, w}, rng);
    const auto out = denoise(tape, c, p, xt, 17.0, y);
    CHECK(out.shape() == xt.shape());
    CHECK(out.all_finite());
    const auto again = denoise(tape, c, p, xt, 17.0, y);
    CHECK(linf(out, again) == 0.0);
  }
  const auto xt = random_tensor<float>(Shape{2, 16, 16}, rng);
  auto y = random_tensor<float>(Shape{2, 16, 16}, rng);
  const auto base = denoise(tape, c, p, xt, 100.0, y);
  CHECK(linf(base, denoise(tape, c, p, xt, 101.0, y)) > 0.0);
  auto y2 = y.clone();
  for (std::size_t i = 256; i < 512; ++i) y2[i] = 0.75f;
  CHECK(linf(base, denoise(tape, c, p, xt, 100.0, y2)) > 0.0);
  CHECK_THROWS_AS(denoise(tape, c, p, random_tensor<float>(Shape{2, 16, 10}, rng),
                          1.0, random_tensor<float>(Shape{2, 16, 10}, rng)),
                  std::invalid_argument);
  CHECK_THROWS_AS(denoise(tape, c, p, xt, 1.0, random_tensor<float>(Shape{3, 16, 16}, rng)),
                  std::invalid_argument);
}

TEST_CASE("skip connections are live") {
  const UNetConfig c = tiny();
  const auto p = build_unet<double>(c, 7);
  Rng rng(8);
  Tape<double> tape(false);
  const auto xt = random_tensor(Shape{2, 16, 16}, rng), y = random_tensor(Shape{2, 16, 16}, rng);
  const auto base = denoise(tape, c, p, xt, 3.0, y);
  for (int l = 0; l < 2; ++l) {
    DenoiseOptions o;
    o.ablate_skip = l;
    CHECK(linf(base, denoise(tape, c, p, xt, 3.0, y, o)) > 1e-6);
  }
}

TEST_CASE("every parameter receives a finite gradient") {
  const UNetConfig c = tiny();
  const auto p = build_unet<double>(c, 9);
  Rng rng(10);
  const auto xt = random_tensor(Shape{2, 16, 16}, rng), y = random_tensor(Shape{2, 16, 16}, rng);
  const auto eps = random_tensor(Shape{2, 16, 16}, rng);
  Tape<double> tape;
  const auto loss = ddpm::diffusion_loss(tape, denoise(tape, c, p, xt, 42.0, y), eps);
  tape.backward(loss);
  std::size_t nonzero = 0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    const auto& t = p.tensors()[i];
    INFO(p.names()[i]);
    REQUIRE(t.has_grad());
    double m = 0;
    for (double g : t.grad()) {
      CHECK(std::isfinite(g));
      m = std::max(m, std::abs(g));
    }
    nonzero += m > 0;
  }
  CHECK(nonzero == p.size());
}

TEST_CASE("end-to-end gradient matches finite differences") {
  const UNetConfig c = tiny();
  for (std::uint64_t seed = 0; seed < 2; ++seed) {
    const auto p = build_unet<double>(c, 100 + seed);
    Rng rng(200 + seed);
    const auto xt = random_tensor(Shape{2, 16, 16}, rng), y = random_tensor(Shape{2, 16, 16}, rng);
    const auto eps = random_tensor(Shape{2, 16, 16}, rng);
    std::vector<Tensor<double>> wrt(p.tensors().begin(), p.tensors().end());
    const auto r = grad_check(
        [&](Tape<double>& tape) { return ddpm::diffusion_loss(tape, denoise(tape, c, p, xt, 25.0, y), eps); },
        wrt, rng, 1e-5, 2);
    CHECK(r.max_rel_error < 1e-3);
  }
}

TEST_CASE("non-finite activations name the layer") {
  const UNetConfig c = tiny();
  auto p = build_unet<double>(c, 11);
  Tensor<double> w = p.at("mid.res0.conv.w");
  w[0] = std::nan("");
  Rng rng(12);
  Tape<double> tape(false);
  const auto xt = random_tensor(Shape{2, 16, 16}, rng), y = random_tensor(Shape{2, 16, 16}, rng);
  CHECK_THROWS_WITH_AS(denoise(tape, c, p, xt, 1.0, y), doctest::Contains("layer mid.res0"), NumericalError);
}

TEST_CASE("make_denoiser plugs into the sampler") {
  const UNetConfig c = tiny();
  const auto p = build_unet<float>(c, 13);
  const auto sched = ddpm::make_schedule(5, 1e-4, 0.02);
  const auto den = make_denoiser(c, p, sched, ddpm::TimeInput::Normalized);
  Rng rng(14);
  const auto y = ddpm::build_condition(random_tensor<float>(Shape{8, 8}, rng), 2.0, 8.0);
  const auto a = ddpm::ancestral_sample(den, y, Shape{2, 8, 8}, sched, 3);
  const auto b = ddpm::ancestral_sample(den, y, Shape{2, 8, 8}, sched, 3);
  CHECK(a.shape() == Shape{2, 8, 8});
  CHECK(linf(a, b) == 0.0);
}
