#include <cmath>
#include <numeric>

#include "doctest.h"
#include "fluiddiff/ops.hpp"
#include "support/primitive_grads.hpp"
#include "support/test_util.hpp"

using namespace fluiddiff;
using fluiddiff::testing::grad_check;
using fluiddiff::testing::random_param;
using fluiddiff::testing::random_tensor;

namespace {

// Direct cross-correlation, one output element at a time.
Tensor<double> naive_conv2d(const Tensor<double>& x, const Tensor<double>& w,
                            const Tensor<double>& b, std::size_t stride, std::size_t pad) {
  const std::size_t ci = x.dim(0), h = x.dim(1), wd = x.dim(2);
  const std::size_t co = w.dim(0), k = w.dim(2);
  const std::size_t oh = (h + 2 * pad - k) / stride + 1, ow = (wd + 2 * pad - k) / stride + 1;
  Tensor<double> out(Shape{co, oh, ow});
  for (std::size_t o = 0; o < co; ++o)
    for (std::size_t y = 0; y < oh; ++y)
      for (std::size_t xx = 0; xx < ow; ++xx) {
        double acc = b.defined() ? b[o] : 0.0;
        for (std::size_t c = 0; c < ci; ++c)
          for (std::size_t i = 0; i < k; ++i)
            for (std::size_t j = 0; j < k; ++j) {
              const long iy = static_cast<long>(y * stride + i) - static_cast<long>(pad);
              const long ix = static_cast<long>(xx * stride + j) - static_cast<long>(pad);
              if (iy < 0 || ix < 0 || iy >= static_cast<long>(h) || ix >= static_cast<long>(wd)) continue;
              acc += x[(c * h + iy) * wd + ix] * w[((o * ci + c) * k + i) * k + j];
            }
        out[(o * oh + y) * ow + xx] = acc;
      }
  return out;
}

double inner(const Tensor<double>& a, const Tensor<double>& b) {
  return std::inner_product(a.data().begin(), a.data().end(), b.data().begin(), 0.0);
}

// Attention with every intermediate matrix spelled out.
Tensor<double> naive_attention(const Tensor<double>& x, const Tensor<double>& wq,
                               const Tensor<double>& wk, const Tensor<double>& wv,
                               const Tensor<double>& wo) {
  const std::size_t c = x.dim(0), n = x.numel() / c;
  auto project = [&](const Tensor<double>& w) {
    std::vector<double> p(c * n, 0.0);
    for (std::size_t r = 0; r < c; ++r)
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t s = 0; s < c; ++s) p[r * n + i] += w[r * c + s] * x[s * n + i];
    return p;
  };
  const auto q = project(wq), k = project(wk), v = project(wv);
  std::vector<double> a(n * n);
  for (std::size_t i = 0; i < n; ++i) {
    std::vector<double> logits(n);
    for (std::size_t j = 0; j < n; ++j) {
      double s = 0;
      for (std::size_t r = 0; r < c; ++r) s += k[r * n + j] * q[r * n + i];
      logits[j] = s / std::sqrt(static_cast<double>(c));
    }
    double total = 0;
    for (double l : logits) total += std::exp(l);
    for (std::size_t j = 0; j < n; ++j) a[j * n + i] = std::exp(logits[j]) / total;
  }
  std::vector<double> o(c * n, 0.0);
  for (std::size_t r = 0; r < c; ++r)
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j) o[r * n + i] += v[r * n + j] * a[j * n + i];
  Tensor<double> out = x.clone();
  for (std::size_t r = 0; r < c; ++r)
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t s = 0; s < c; ++s) out[r * n + i] += wo[r * c + s] * o[s * n + i];
  return out;
}

}  // namespace

TEST_CASE("tensor invariants") {
  Tensor<float> t(Shape{2, 3}, 1.5f);
  CHECK(t.numel() == 6);
  CHECK_FALSE(t.has_grad());
  CHECK(t.grad().size() == 6);
  CHECK_THROWS_AS(Tensor<float>(Shape{2, 2}, std::vector<float>(3)), std::invalid_argument);
  CHECK_THROWS_AS(Tensor<float>(Shape{0, 2}), std::invalid_argument);
  auto s = Tensor<double>::scalar(4.0);
  CHECK(s.ndim() == 0);
  CHECK(s.item() == 4.0);
  auto c = t.clone();
  c[0] = 9.0f;
  CHECK(t[0] == 1.5f);
}

TEST_CASE("conv2d") {
  Tape<double> tape(false);
  SUBCASE("1x1 dot product") {
    Tensor<double> x(Shape{1, 1, 1}, {2.0});
    Tensor<double> w(Shape{1, 1, 1, 1}, {3.0});
    auto y = ops::conv2d(tape, x, w, Tensor<double>(), 1, 0);
    CHECK(y.shape() == Shape{1, 1, 1});
    CHECK(y[0] == 6.0);
  }
  SUBCASE("identity kernel with padding 1") {
    Rng rng(1);
    auto x = random_tensor(Shape{1, 4, 4}, rng);
    Tensor<double> w(Shape{1, 1, 3, 3});
    w[4] = 1.0;
    auto y = ops::conv2d(tape, x, w, Tensor<double>(), 1, 1);
    CHECK(y.shape() == x.shape());
    for (std::size_t i = 0; i < x.numel(); ++i) CHECK(y[i] == x[i]);
  }
  SUBCASE("matches the loop oracle") {
    Rng rng(2);
    auto x = random_tensor(Shape{1, 5, 5}, rng);
    auto w = random_tensor(Shape{1, 1, 3, 3}, rng);
    auto y = ops::conv2d(tape, x, w, Tensor<double>(), 1, 0);
    auto ref = naive_conv2d(x, w, Tensor<double>(), 1, 0);
    REQUIRE(y.shape() == ref.shape());
    for (std::size_t i = 0; i < y.numel(); ++i) CHECK(y[i] == doctest::Approx(ref[i]).epsilon(1e-12));

    auto x2 = random_tensor(Shape{3, 7, 6}, rng);
    auto w2 = random_tensor(Shape{4, 3, 3, 3}, rng);
    auto b2 = random_tensor(Shape{4}, rng);
    auto y2 = ops::conv2d(tape, x2, w2, b2, 2, 1);
    auto ref2 = naive_conv2d(x2, w2, b2, 2, 1);
    REQUIRE(y2.shape() == ref2.shape());
    CHECK(fluiddiff::testing::max_abs_diff(y2.data(), ref2.data()) < 1e-12);
  }
  SUBCASE("channel mismatch is rejected") {
    Tensor<double> x(Shape{2, 4, 4});
    Tensor<double> w(Shape{1, 3, 3, 3});
    CHECK_THROWS_WITH_AS(ops::conv2d(tape, x, w, Tensor<double>(), 1, 1),
                         doctest::Contains("channels"), std::invalid_argument);
  }
}

TEST_CASE("conv2d_transpose") {
  Tape<double> tape(false);
  SUBCASE("1x1 case") {
    Tensor<double> x(Shape{1, 1, 1}, {2.0});
    Tensor<double> w(Shape{1, 1, 1, 1}, {3.0});
    auto y = ops::conv2d_transpose(tape, x, w, Tensor<double>(), 1, 0);
    CHECK(y[0] == 6.0);
  }
  SUBCASE("stride 2 doubles the extent") {
    Tensor<double> x(Shape{3, 8, 8}, 1.0);
    CHECK(ops::conv2d_transpose(tape, x, Tensor<double>(Shape{3, 2, 4, 4}), Tensor<double>(), 2, 1)
              .shape() == Shape{2, 16, 16});
    CHECK(ops::conv2d_transpose(tape, x, Tensor<double>(Shape{3, 2, 3, 3}), Tensor<double>(), 2, 1, 1)
              .shape() == Shape{2, 16, 16});
  }
  SUBCASE("adjoint identity against conv2d") {
    struct Geometry { std::size_t k, stride, pad, out_pad, h; };
    for (const Geometry g : {Geometry{3, 1, 1, 0, 6}, Geometry{4, 2, 1, 0, 8}, Geometry{3, 2, 1, 1, 8},
                             Geometry{3, 2, 0, 1, 9}}) {
      for (std::uint64_t seed = 0; seed < 10; ++seed) {
        Rng rng(100 + seed);
        auto w = random_tensor(Shape{4, 3, g.k, g.k}, rng);
        auto x = random_tensor(Shape{3, g.h, g.h}, rng);
        auto cx = ops::conv2d(tape, x, w, Tensor<double>(), g.stride, g.pad);
        auto y = random_tensor(cx.shape(), rng);
        auto ty = ops::conv2d_transpose(tape, y, w, Tensor<double>(), g.stride, g.pad,
                                        (g.h + 2 * g.pad - g.k) % g.stride);
        REQUIRE(ty.shape() == x.shape());
        const double lhs = inner(cx, y), rhs = inner(x, ty);
        CHECK(std::abs(lhs - rhs) / std::max(std::abs(lhs), 1e-12) < 1e-6);
      }
    }
  }
}

TEST_CASE("group_norm") {
  Tape<double> tape(false);
  SUBCASE("constant input maps to beta") {
    Tensor<double> x(Shape{4, 3, 3}, 2.5);
    Tensor<double> gamma(Shape{4}, {1.0, 2.0, 3.0, 4.0});
    Tensor<double> beta(Shape{4}, {0.1, 0.2, 0.3, 0.4});
    auto y = ops::group_norm(tape, x, 2, gamma, beta, 1e-5);
    for (std::size_t c = 0; c < 4; ++c)
      for (std::size_t i = 0; i < 9; ++i) CHECK(y[c * 9 + i] == doctest::Approx(beta[c]));
  }
  SUBCASE("groups=1 normalizes over everything") {
    Rng rng(3);
    auto x = random_tensor(Shape{2, 3, 3}, rng, 3.0);
    Tensor<double> gamma(Shape{2}, 1.0), beta(Shape{2}, 0.0);
    auto y = ops::group_norm(tape, x, 1, gamma, beta, 1e-5);
    double mu = 0, var = 0;
    for (double v : x.data()) mu += v;
    mu /= 18.0;
    for (double v : x.data()) var += (v - mu) * (v - mu);
    var /= 18.0;
    for (std::size_t i = 0; i < 18; ++i) CHECK(y[i] == doctest::Approx((x[i] - mu) / std::sqrt(var + 1e-5)));
  }
  SUBCASE("per-group moments") {
    Rng rng(4);
    auto x = random_tensor(Shape{4, 4, 4}, rng, 2.0);
    Tensor<double> gamma(Shape{4}, 1.0), beta(Shape{4}, 0.0);
    auto y = ops::group_norm(tape, x, 2, gamma, beta, 1e-5);
    for (std::size_t g = 0; g < 2; ++g) {
      double m = 0, v = 0;
      for (std::size_t i = 0; i < 32; ++i) m += y[g * 32 + i];
      m /= 32.0;
      for (std::size_t i = 0; i < 32; ++i) v += (y[g * 32 + i] - m) * (y[g * 32 + i] - m);
      v /= 32.0;
      CHECK(std::abs(m) < 1e-6);
      CHECK(std::abs(v - 1.0) < 1e-4);
    }
  }
  SUBCASE("indivisible channel count is rejected") {
    Tensor<double> x(Shape{3, 2, 2});
    Tensor<double> p(Shape{3}, 1.0);
    CHECK_THROWS_AS(ops::group_norm(tape, x, 2, p, p, 1e-5), std::invalid_argument);
  }
}

TEST_CASE("silu") {
  Tape<double> tape(false);
  Tensor<double> x(Shape{4}, {0.0, 20.0, 1.0, -800.0});
  auto y = ops::silu(tape, x);
  CHECK(y[0] == 0.0);
  CHECK(std::abs(y[1] - 20.0) < 1e-6);
  // 1 / (1 + e^-1) to 12 digits.
  CHECK(y[2] == doctest::Approx(0.731058578630).epsilon(1e-11));
  CHECK(y[3] == doctest::Approx(0.0));
}

TEST_CASE("linear") {
  Tape<double> tape(false);
  Tensor<double> eye(Shape{3, 3});
  eye[0] = eye[4] = eye[8] = 1.0;
  Tensor<double> x(Shape{3}, {1.0, -2.0, 3.5});
  auto y = ops::linear(tape, x, eye, Tensor<double>(Shape{3}));
  for (std::size_t i = 0; i < 3; ++i) CHECK(y[i] == x[i]);

  auto z = ops::linear(tape, Tensor<double>(Shape{1}, {3.0}), Tensor<double>(Shape{1, 1}, {2.0}),
                       Tensor<double>(Shape{1}, {1.0}));
  CHECK(z[0] == 7.0);

  Rng rng(5);
  auto w = random_tensor(Shape{8, 8}, rng);
  auto b = random_tensor(Shape{8}, rng);
  auto v = random_tensor(Shape{8}, rng);
  auto out = ops::linear(tape, v, w, b);
  for (std::size_t r = 0; r < 8; ++r) {
    double acc = b[r];
    for (std::size_t c = 0; c < 8; ++c) acc += w[r * 8 + c] * v[c];
    CHECK(out[r] == doctest::Approx(acc).epsilon(1e-12));
  }
  CHECK_THROWS_AS(ops::linear(tape, Tensor<double>(Shape{4}), w, b), std::invalid_argument);
}

TEST_CASE("self_attention") {
  Tape<double> tape(false);
  Rng rng(6);
  SUBCASE("single position attends to itself") {
    auto x = random_tensor(Shape{3, 1}, rng);
    auto wq = random_tensor(Shape{3, 3}, rng), wk = random_tensor(Shape{3, 3}, rng);
    auto wv = random_tensor(Shape{3, 3}, rng), wo = random_tensor(Shape{3, 3}, rng);
    auto y = ops::self_attention(tape, x, wq, wk, wv, wo);
    for (std::size_t r = 0; r < 3; ++r) {
      double expect = x[r];
      for (std::size_t s = 0; s < 3; ++s)
        for (std::size_t u = 0; u < 3; ++u) expect += wo[r * 3 + s] * wv[s * 3 + u] * x[u];
      CHECK(y[r] == doctest::Approx(expect).epsilon(1e-12));
    }
  }
  SUBCASE("zero queries give mean pooling") {
    const std::size_t c = 2, n = 5;
    auto x = random_tensor(Shape{c, n}, rng);
    Tensor<double> wq(Shape{c, c});
    auto wk = random_tensor(Shape{c, c}, rng);
    Tensor<double> eye(Shape{c, c});
    eye[0] = eye[3] = 1.0;
    auto y = ops::self_attention(tape, x, wq, wk, eye, eye);
    for (std::size_t r = 0; r < c; ++r) {
      double m = 0;
      for (std::size_t j = 0; j < n; ++j) m += x[r * n + j];
      m /= n;
      for (std::size_t i = 0; i < n; ++i) CHECK(y[r * n + i] - x[r * n + i] == doctest::Approx(m));
    }
  }
  SUBCASE("matches the dense-matrix oracle") {
    auto x = random_tensor(Shape{4, 9}, rng);
    auto wq = random_tensor(Shape{4, 4}, rng, 0.5), wk = random_tensor(Shape{4, 4}, rng, 0.5);
    auto wv = random_tensor(Shape{4, 4}, rng), wo = random_tensor(Shape{4, 4}, rng);
    auto y = ops::self_attention(tape, x, wq, wk, wv, wo);
    auto ref = naive_attention(x, wq, wk, wv, wo);
    CHECK(fluiddiff::testing::max_abs_diff(y.data(), ref.data()) < 1e-12);
  }
}

TEST_CASE("concat and slice") {
  Tape<double> tape;
  Tensor<double> a(Shape{1, 2, 2}, {1, 2, 3, 4});
  Tensor<double> b(Shape{1, 2, 2}, {5, 6, 7, 8});
  a.set_requires_grad(true);
  b.set_requires_grad(true);
  auto c = ops::concat_channels(tape, a, b);
  CHECK(c.shape() == Shape{2, 2, 2});
  for (std::size_t i = 0; i < 4; ++i) {
    CHECK(c[i] == a[i]);
    CHECK(c[4 + i] == b[i]);
  }
  auto a2 = ops::slice_channels(tape, c, 0, 1);
  auto b2 = ops::slice_channels(tape, c, 1, 2);
  for (std::size_t i = 0; i < 4; ++i) {
    CHECK(a2[i] == a[i]);
    CHECK(b2[i] == b[i]);
  }
  Tape<double> sum_tape;
  auto cat = ops::concat_channels(sum_tape, a, b);
  auto loss = ops::scale(sum_tape, ops::mean(sum_tape, cat), 8.0);  // sum over 8 entries
  sum_tape.backward(loss);
  for (std::size_t i = 0; i < 4; ++i) {
    CHECK(a.grad()[i] == doctest::Approx(1.0));
    CHECK(b.grad()[i] == doctest::Approx(1.0));
  }
  CHECK_THROWS_AS(ops::concat_channels(tape, a, Tensor<double>(Shape{1, 3, 2})), std::invalid_argument);
}

TEST_CASE("backward basics") {
  SUBCASE("x^2 at 3") {
    Tape<double> tape;
    auto x = Tensor<double>::scalar(3.0);
    x.set_requires_grad(true);
    tape.backward(ops::mul(tape, x, x));
    CHECK(x.grad()[0] == doctest::Approx(6.0));
  }
  SUBCASE("silu slope at 0") {
    Tape<double> tape;
    auto x = Tensor<double>::scalar(0.0);
    x.set_requires_grad(true);
    tape.backward(ops::silu(tape, x));
    CHECK(x.grad()[0] == doctest::Approx(0.5));
  }
  SUBCASE("gradients accumulate across calls until reset") {
    auto x = Tensor<double>::scalar(3.0);
    x.set_requires_grad(true);
    for (int i = 0; i < 2; ++i) {
      Tape<double> tape;
      tape.backward(ops::mul(tape, x, x));
    }
    CHECK(x.grad()[0] == doctest::Approx(12.0));
    x.zero_grad();
    CHECK(x.grad()[0] == 0.0);
  }
  SUBCASE("non-scalar loss is rejected") {
    Tape<double> tape;
    Tensor<double> v(Shape{2}, 1.0);
    v.set_requires_grad(true);
    CHECK_THROWS_AS(tape.backward(ops::scale(tape, v, 2.0)), std::invalid_argument);
  }
  SUBCASE("tape is consumed") {
    Tape<double> tape;
    auto x = Tensor<double>::scalar(1.0);
    x.set_requires_grad(true);
    auto y = ops::scale(tape, x, 2.0);
    CHECK(tape.size() == 1);
    tape.backward(y);
    CHECK(tape.size() == 0);
  }
  SUBCASE("inference tape records nothing") {
    Tape<double> tape(false);
    auto x = Tensor<double>::scalar(1.0);
    x.set_requires_grad(true);
    auto y = ops::scale(tape, x, 2.0);
    CHECK(tape.size() == 0);
    CHECK_FALSE(y.requires_grad());
  }
}

TEST_CASE("overflow surfaces as NumericalError") {
  Tape<float> tape(false);
  Tensor<float> big(Shape{2}, 3e38f);
  CHECK_THROWS_AS(ops::add(tape, big, big), NumericalError);
}

TEST_CASE("forward passes are bit-deterministic") {
  Rng rng(7);
  auto x = random_tensor<float>(Shape{3, 8, 8}, rng);
  auto w = random_tensor<float>(Shape{4, 3, 3, 3}, rng);
  Tape<float> tape(false);
  auto a = ops::conv2d(tape, x, w, Tensor<float>(), 1, 1);
  auto b = ops::conv2d(tape, x, w, Tensor<float>(), 1, 1);
  for (std::size_t i = 0; i < a.numel(); ++i) CHECK(a[i] == b[i]);
}

// Finite-difference checks for every differentiable primitive over 10 seeds.
TEST_CASE("primitive gradients match central differences") {
  constexpr double kTol = 1e-4;
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    CAPTURE(seed);
    Rng rng(1000 + seed);
    fluiddiff::testing::for_each_primitive_case(
        rng, [&](const char* name, const fluiddiff::testing::GraphFn& f, std::vector<Tensor<double>> wrt) {
          auto r = grad_check(f, std::move(wrt), rng);
          INFO(name << " max rel err " << r.max_rel_error);
          CHECK(r.max_rel_error < kTol);
        });
  }
}
