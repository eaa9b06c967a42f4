#include "fluiddiff/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>
#include <vector>

#include "fluiddiff/simd.hpp"

namespace fluiddiff::ops {
namespace {

[[noreturn]] void reject(const std::string& op, const std::string& what) {
  throw std::invalid_argument(op + ": " + what);
}

template <typename T>
void require_finite(const Tensor<T>& t, const char* op) {
  if (!t.all_finite()) throw NumericalError(std::string(op) + ": produced a non-finite value");
}

template <typename T>
void accumulate(const Tensor<T>& dst, std::span<const T> g) {
  if (!dst.requires_grad()) return;
  auto out = dst.grad();
  for (std::size_t i = 0; i < g.size(); ++i) out[i] += g[i];
}

std::size_t trailing_size(const Shape& s) {
  std::size_t n = 1;
  for (std::size_t i = 1; i < s.size(); ++i) n *= s[i];
  return n;
}

struct ConvGeometry {
  std::size_t channels, height, width;  // image side
  std::size_t k, stride, pad;
  std::size_t out_h, out_w;             // column side
};

// cols[(c*k + ki)*k + kj][oy*out_w + ox] = img[c][oy*s - p + ki][ox*s - p + kj]
template <typename T>
void im2col(const ConvGeometry& g, const T* img, T* cols) {
  const std::size_t n = g.out_h * g.out_w;
  for (std::size_t c = 0; c < g.channels; ++c) {
    for (std::size_t ki = 0; ki < g.k; ++ki) {
      for (std::size_t kj = 0; kj < g.k; ++kj) {
        T* row = cols + ((c * g.k + ki) * g.k + kj) * n;
        for (std::size_t oy = 0; oy < g.out_h; ++oy) {
          const auto iy = static_cast<std::ptrdiff_t>(oy * g.stride + ki) -
                          static_cast<std::ptrdiff_t>(g.pad);
          T* dst = row + oy * g.out_w;
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.height)) {
            std::fill(dst, dst + g.out_w, T(0));
            continue;
          }
          const T* src = img + (c * g.height + static_cast<std::size_t>(iy)) * g.width;
          for (std::size_t ox = 0; ox < g.out_w; ++ox) {
            const auto ix = static_cast<std::ptrdiff_t>(ox * g.stride + kj) -
                            static_cast<std::ptrdiff_t>(g.pad);
            dst[ox] = (ix < 0 || ix >= static_cast<std::ptrdiff_t>(g.width))
                          ? T(0)
                          : src[static_cast<std::size_t>(ix)];
          }
        }
      }
    }
  }
}

// Adjoint of im2col: scatters columns back, accumulating into img.
template <typename T>
void col2im(const ConvGeometry& g, const T* cols, T* img) {
  const std::size_t n = g.out_h * g.out_w;
  for (std::size_t c = 0; c < g.channels; ++c) {
    for (std::size_t ki = 0; ki < g.k; ++ki) {
      for (std::size_t kj = 0; kj < g.k; ++kj) {
        const T* row = cols + ((c * g.k + ki) * g.k + kj) * n;
        for (std::size_t oy = 0; oy < g.out_h; ++oy) {
          const auto iy = static_cast<std::ptrdiff_t>(oy * g.stride + ki) -
                          static_cast<std::ptrdiff_t>(g.pad);
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.height)) continue;
          T* dst = img + (c * g.height + static_cast<std::size_t>(iy)) * g.width;
          const T* src = row + oy * g.out_w;
          for (std::size_t ox = 0; ox < g.out_w; ++ox) {
            const auto ix = static_cast<std::ptrdiff_t>(ox * g.stride + kj) -
                            static_cast<std::ptrdiff_t>(g.pad);
            if (ix >= 0 && ix < static_cast<std::ptrdiff_t>(g.width)) {
              dst[static_cast<std::size_t>(ix)] += src[ox];
            }
          }
        }
      }
    }
  }
}

template <typename T>
void check_bias(const char* op, const Tensor<T>& bias, std::size_t channels) {
  if (bias.defined() && (bias.ndim() != 1 || bias.dim(0) != channels)) {
    reject(op, "bias shape " + shape_str(bias.shape()) + " does not match " +
                   std::to_string(channels) + " output channels");
  }
}

template <typename T>
void add_bias(Tensor<T>& out, const Tensor<T>& bias) {
  if (!bias.defined()) return;
  const std::size_t n = trailing_size(out.shape());
  auto o = out.data();
  for (std::size_t c = 0; c < out.dim(0); ++c) {
    const T b = bias[c];
    for (std::size_t i = 0; i < n; ++i) o[c * n + i] += b;
  }
}

template <typename T>
void accumulate_bias_grad(const Tensor<T>& bias, std::span<const T> g, std::size_t channels) {
  if (!bias.defined() || !bias.requires_grad()) return;
  const std::size_t n = g.size() / channels;
  auto bg = bias.grad();
  const auto& kt = simd::kernels<T>();
  for (std::size_t c = 0; c < channels; ++c) bg[c] += kt.sum(n, g.data() + c * n);
}

template <typename T>
void require_same_shape(const char* op, const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape()) {
    reject(op, "shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
}

}  // namespace

template <typename T>
Tensor<T> conv2d(Tape<T>& tape, const Tensor<T>& input, const Tensor<T>& kernel,
                 const Tensor<T>& bias, std::size_t stride, std::size_t padding) {
  constexpr const char* op = "conv2d";
  if (input.ndim() != 3) reject(op, "input must be [C, H, W], got " + shape_str(input.shape()));
  if (kernel.ndim() != 4 || kernel.dim(2) != kernel.dim(3)) {
    reject(op, "kernel must be [C_out, C_in, k, k], got " + shape_str(kernel.shape()));
  }
  if (kernel.dim(1) != input.dim(0)) {
    reject(op, "input has " + std::to_string(input.dim(0)) + " channels but kernel expects " +
                   std::to_string(kernel.dim(1)));
  }
  if (stride < 1) reject(op, "stride must be >= 1");
  const std::size_t k = kernel.dim(2);
  const std::size_t h = input.dim(1), w = input.dim(2);
  if (k > h + 2 * padding || k > w + 2 * padding) reject(op, "kernel larger than padded input");
  const std::size_t c_out = kernel.dim(0);
  check_bias(op, bias, c_out);

  const ConvGeometry g{input.dim(0), h, w, k, stride, padding, (h + 2 * padding - k) / stride + 1,
                       (w + 2 * padding - k) / stride + 1};
  const std::size_t kk = g.channels * k * k;
  const std::size_t n = g.out_h * g.out_w;
  auto cols = std::make_shared<std::vector<T>>(kk * n);
  im2col(g, input.data().data(), cols->data());

  Tensor<T> out(Shape{c_out, g.out_h, g.out_w});
  simd::gemm_nn(c_out, n, kk, kernel.data().data(), cols->data(), out.data().data());
  add_bias(out, bias);
  require_finite(out, op);

  if (tape.needs_grad({&input, &kernel, &bias})) {
    tape.record({input, kernel, bias}, out, [=]() mutable {
      const T* gout = out.grad().data();
      if (kernel.requires_grad()) {
        simd::gemm_nt(c_out, kk, n, gout, cols->data(), kernel.grad().data());
      }
      accumulate_bias_grad(bias, std::span<const T>(gout, c_out * n), c_out);
      if (input.requires_grad()) {
        std::vector<T> dcols(kk * n, T(0));
        simd::gemm_tn(kk, n, c_out, kernel.data().data(), gout, dcols.data());
        col2im(g, dcols.data(), input.grad().data());
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> conv2d_transpose(Tape<T>& tape, const Tensor<T>& input, const Tensor<T>& kernel,
                           const Tensor<T>& bias, std::size_t stride, std::size_t padding,
                           std::size_t output_padding) {
  constexpr const char* op = "conv2d_transpose";
  if (input.ndim() != 3) reject(op, "input must be [C, H, W], got " + shape_str(input.shape()));
  if (kernel.ndim() != 4 || kernel.dim(2) != kernel.dim(3)) {
    reject(op, "kernel must be [C_in, C_out, k, k], got " + shape_str(kernel.shape()));
  }
  if (kernel.dim(0) != input.dim(0)) {
    reject(op, "input has " + std::to_string(input.dim(0)) + " channels but kernel expects " +
                   std::to_string(kernel.dim(0)));
  }
  if (stride < 1) reject(op, "stride must be >= 1");
  if (output_padding >= stride) reject(op, "output_padding must be smaller than stride");
  const std::size_t k = kernel.dim(2);
  const std::size_t c_in = input.dim(0), c_out = kernel.dim(1);
  const std::size_t h = input.dim(1), w = input.dim(2);
  const std::size_t full_h = (h - 1) * stride + k + output_padding;
  const std::size_t full_w = (w - 1) * stride + k + output_padding;
  if (full_h <= 2 * padding || full_w <= 2 * padding) reject(op, "padding removes entire output");
  check_bias(op, bias, c_out);

  // The output grid plays the image role of the forward convolution.
  const ConvGeometry g{c_out, full_h - 2 * padding, full_w - 2 * padding, k, stride, padding, h, w};
  const std::size_t kk = c_out * k * k;
  const std::size_t n = h * w;

  std::vector<T> cols(kk * n, T(0));
  simd::gemm_tn(kk, n, c_in, kernel.data().data(), input.data().data(), cols.data());
  Tensor<T> out(Shape{c_out, g.height, g.width});
  col2im(g, cols.data(), out.data().data());
  add_bias(out, bias);
  require_finite(out, op);

  if (tape.needs_grad({&input, &kernel, &bias})) {
    tape.record({input, kernel, bias}, out, [=]() mutable {
      const T* gout = out.grad().data();
      std::vector<T> dcols(kk * n);
      im2col(g, gout, dcols.data());
      if (input.requires_grad()) {
        simd::gemm_nn(c_in, n, kk, kernel.data().data(), dcols.data(), input.grad().data());
      }
      if (kernel.requires_grad()) {
        simd::gemm_nt(c_in, kk, n, input.data().data(), dcols.data(), kernel.grad().data());
      }
      accumulate_bias_grad(bias, std::span<const T>(gout, out.numel()), c_out);
    });
  }
  return out;
}

template <typename T>
Tensor<T> group_norm(Tape<T>& tape, const Tensor<T>& x, std::size_t groups, const Tensor<T>& gamma,
                     const Tensor<T>& beta, T eps) {
  constexpr const char* op = "group_norm";
  if (x.ndim() < 1) reject(op, "input needs a channel axis");
  const std::size_t c = x.dim(0);
  if (groups == 0 || c % groups != 0) {
    reject(op, std::to_string(c) + " channels not divisible by " + std::to_string(groups) +
                   " groups");
  }
  if (!(eps > T(0))) reject(op, "eps must be positive");
  if (gamma.numel() != c || beta.numel() != c) reject(op, "gamma/beta must have one entry per channel");

  const std::size_t spatial = trailing_size(x.shape());
  const std::size_t per_group = (c / groups) * spatial;
  Tensor<T> out(x.shape());
  auto xhat = std::make_shared<std::vector<T>>(x.numel());
  auto inv_std = std::make_shared<std::vector<T>>(groups);
  const auto xd = x.data();
  auto od = out.data();
  for (std::size_t grp = 0; grp < groups; ++grp) {
    const std::size_t base = grp * per_group;
    double mu = 0.0;
    for (std::size_t i = 0; i < per_group; ++i) mu += xd[base + i];
    mu /= static_cast<double>(per_group);
    double var = 0.0;
    for (std::size_t i = 0; i < per_group; ++i) {
      const double d = xd[base + i] - mu;
      var += d * d;
    }
    var /= static_cast<double>(per_group);
    const double inv = 1.0 / std::sqrt(var + static_cast<double>(eps));
    (*inv_std)[grp] = static_cast<T>(inv);
    for (std::size_t i = 0; i < per_group; ++i) {
      (*xhat)[base + i] = static_cast<T>((xd[base + i] - mu) * inv);
    }
  }
  for (std::size_t ch = 0; ch < c; ++ch) {
    for (std::size_t i = 0; i < spatial; ++i) {
      const std::size_t idx = ch * spatial + i;
      od[idx] = gamma[ch] * (*xhat)[idx] + beta[ch];
    }
  }
  require_finite(out, op);

  if (tape.needs_grad({&x, &gamma, &beta})) {
    tape.record({x, gamma, beta}, out, [=]() mutable {
      const auto g = out.grad();
      if (gamma.requires_grad() || beta.requires_grad()) {
        auto gg = gamma.requires_grad() ? gamma.grad() : std::span<T>{};
        auto bg = beta.requires_grad() ? beta.grad() : std::span<T>{};
        for (std::size_t ch = 0; ch < c; ++ch) {
          T sg = 0, sb = 0;
          for (std::size_t i = 0; i < spatial; ++i) {
            const std::size_t idx = ch * spatial + i;
            sg += g[idx] * (*xhat)[idx];
            sb += g[idx];
          }
          if (!gg.empty()) gg[ch] += sg;
          if (!bg.empty()) bg[ch] += sb;
        }
      }
      if (!x.requires_grad()) return;
      auto xg = x.grad();
      const std::size_t cpg = c / groups;
      std::vector<T> dxhat(per_group);
      for (std::size_t grp = 0; grp < groups; ++grp) {
        const std::size_t base = grp * per_group;
        double mean_d = 0.0, mean_dx = 0.0;
        for (std::size_t i = 0; i < per_group; ++i) {
          const std::size_t ch = grp * cpg + i / spatial;
          dxhat[i] = g[base + i] * gamma[ch];
          mean_d += dxhat[i];
          mean_dx += static_cast<double>(dxhat[i]) * (*xhat)[base + i];
        }
        mean_d /= static_cast<double>(per_group);
        mean_dx /= static_cast<double>(per_group);
        const double inv = (*inv_std)[grp];
        for (std::size_t i = 0; i < per_group; ++i) {
          xg[base + i] +=
              static_cast<T>(inv * (dxhat[i] - mean_d - (*xhat)[base + i] * mean_dx));
        }
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> silu(Tape<T>& tape, const Tensor<T>& x) {
  Tensor<T> out(x.shape());
  const auto xd = x.data();
  auto od = out.data();
  for (std::size_t i = 0; i < xd.size(); ++i) {
    const T v = xd[i];
    const T sig = v >= T(0) ? T(1) / (T(1) + std::exp(-v)) : std::exp(v) / (T(1) + std::exp(v));
    od[i] = v * sig;
  }
  require_finite(out, "silu");
  if (tape.needs_grad({&x})) {
    tape.record({x}, out, [=]() mutable {
      const auto g = out.grad();
      auto xg = x.grad();
      const auto xv = x.data();
      for (std::size_t i = 0; i < xv.size(); ++i) {
        const T v = xv[i];
        const T sig =
            v >= T(0) ? T(1) / (T(1) + std::exp(-v)) : std::exp(v) / (T(1) + std::exp(v));
        xg[i] += g[i] * sig * (T(1) + v * (T(1) - sig));
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> linear(Tape<T>& tape, const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias) {
  constexpr const char* op = "linear";
  if (weight.ndim() != 2) reject(op, "weight must be [m, n], got " + shape_str(weight.shape()));
  const std::size_t m = weight.dim(0), n = weight.dim(1);
  if (x.numel() != n) {
    reject(op, "input length " + std::to_string(x.numel()) + " does not match weight columns " +
                   std::to_string(n));
  }
  check_bias(op, bias, m);
  Tensor<T> out(Shape{m});
  const auto& kt = simd::kernels<T>();
  for (std::size_t r = 0; r < m; ++r) {
    out[r] = kt.dot(n, weight.data().data() + r * n, x.data().data()) + (bias.defined() ? bias[r] : T(0));
  }
  require_finite(out, op);
  if (tape.needs_grad({&x, &weight, &bias})) {
    tape.record({x, weight, bias}, out, [=]() mutable {
      const auto g = out.grad();
      const auto& kern = simd::kernels<T>();
      if (weight.requires_grad()) {
        auto wg = weight.grad();
        for (std::size_t r = 0; r < m; ++r) kern.axpy(n, g[r], x.data().data(), wg.data() + r * n);
      }
      if (bias.defined() && bias.requires_grad()) accumulate(bias, std::span<const T>(g));
      if (x.requires_grad()) {
        auto xg = x.grad();
        for (std::size_t r = 0; r < m; ++r) kern.axpy(n, g[r], weight.data().data() + r * n, xg.data());
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> self_attention(Tape<T>& tape, const Tensor<T>& x, const Tensor<T>& wq,
                         const Tensor<T>& wk, const Tensor<T>& wv, const Tensor<T>& wo) {
  constexpr const char* op = "self_attention";
  if (x.ndim() < 2) reject(op, "input must be [C, N] or [C, H, W]");
  const std::size_t c = x.dim(0);
  const std::size_t n = trailing_size(x.shape());
  for (const Tensor<T>* w : {&wq, &wk, &wv, &wo}) {
    if (w->ndim() != 2 || w->dim(0) != c || w->dim(1) != c) {
      reject(op, "projection must be [" + std::to_string(c) + ", " + std::to_string(c) + "], got " +
                     shape_str(w->shape()));
    }
  }
  const T* xd = x.data().data();
  auto q = std::make_shared<std::vector<T>>(c * n, T(0));
  auto k = std::make_shared<std::vector<T>>(c * n, T(0));
  auto v = std::make_shared<std::vector<T>>(c * n, T(0));
  simd::gemm_nn(c, n, c, wq.data().data(), xd, q->data());
  simd::gemm_nn(c, n, c, wk.data().data(), xd, k->data());
  simd::gemm_nn(c, n, c, wv.data().data(), xd, v->data());

  // attn[j, i]: weight of key j for query i; softmax runs over j.
  auto attn = std::make_shared<std::vector<T>>(n * n, T(0));
  simd::gemm_tn(n, n, c, k->data(), q->data(), attn->data());
  const T inv_sqrt_d = T(1) / std::sqrt(static_cast<T>(c));
  for (std::size_t i = 0; i < n; ++i) {
    T mx = -std::numeric_limits<T>::infinity();
    for (std::size_t j = 0; j < n; ++j) mx = std::max(mx, (*attn)[j * n + i] * inv_sqrt_d);
    T total = 0;
    for (std::size_t j = 0; j < n; ++j) {
      T& a = (*attn)[j * n + i];
      a = std::exp(a * inv_sqrt_d - mx);
      total += a;
    }
    for (std::size_t j = 0; j < n; ++j) (*attn)[j * n + i] /= total;
  }
  auto mixed = std::make_shared<std::vector<T>>(c * n, T(0));
  simd::gemm_nn(c, n, n, v->data(), attn->data(), mixed->data());

  Tensor<T> out(x.shape(), std::vector<T>(x.data().begin(), x.data().end()));
  simd::gemm_nn(c, n, c, wo.data().data(), mixed->data(), out.data().data());
  require_finite(out, op);

  if (tape.needs_grad({&x, &wq, &wk, &wv, &wo})) {
    tape.record({x, wq, wk, wv, wo}, out, [=]() mutable {
      const T* g = out.grad().data();
      if (x.requires_grad()) accumulate(x, std::span<const T>(g, c * n));
      if (wo.requires_grad()) simd::gemm_nt(c, c, n, g, mixed->data(), wo.grad().data());
      std::vector<T> dmixed(c * n, T(0));
      simd::gemm_tn(c, n, c, wo.data().data(), g, dmixed.data());

      std::vector<T> dv(c * n, T(0)), dattn(n * n, T(0));
      simd::gemm_nt(c, n, n, dmixed.data(), attn->data(), dv.data());
      simd::gemm_tn(n, n, c, v->data(), dmixed.data(), dattn.data());
      // Softmax Jacobian, column by column, folded with the 1/sqrt(d) scale.
      for (std::size_t i = 0; i < n; ++i) {
        T inner = 0;
        for (std::size_t j = 0; j < n; ++j) inner += (*attn)[j * n + i] * dattn[j * n + i];
        for (std::size_t j = 0; j < n; ++j) {
          T& d = dattn[j * n + i];
          d = (*attn)[j * n + i] * (d - inner) * inv_sqrt_d;
        }
      }
      std::vector<T> dq(c * n, T(0)), dk(c * n, T(0));
      simd::gemm_nn(c, n, n, k->data(), dattn.data(), dq.data());
      simd::gemm_nt(c, n, n, q->data(), dattn.data(), dk.data());

      const T* xv = x.data().data();
      auto project_back = [&](const Tensor<T>& w, const std::vector<T>& dproj) {
        if (w.requires_grad()) simd::gemm_nt(c, c, n, dproj.data(), xv, w.grad().data());
        if (x.requires_grad()) simd::gemm_tn(c, n, c, w.data().data(), dproj.data(), x.grad().data());
      };
      project_back(wq, dq);
      project_back(wk, dk);
      project_back(wv, dv);
    });
  }
  return out;
}

template <typename T>
Tensor<T> concat_channels(Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& b) {
  if (a.ndim() < 1 || a.ndim() != b.ndim() ||
      !std::equal(a.shape().begin() + 1, a.shape().end(), b.shape().begin() + 1)) {
    reject("concat_channels", "spatial shapes differ: " + shape_str(a.shape()) + " vs " +
                                  shape_str(b.shape()));
  }
  Shape shape = a.shape();
  shape[0] += b.dim(0);
  std::vector<T> data;
  data.reserve(a.numel() + b.numel());
  data.insert(data.end(), a.data().begin(), a.data().end());
  data.insert(data.end(), b.data().begin(), b.data().end());
  Tensor<T> out(std::move(shape), std::move(data));
  if (tape.needs_grad({&a, &b})) {
    tape.record({a, b}, out, [=]() mutable {
      const auto g = std::span<const T>(out.grad());
      accumulate(a, g.subspan(0, a.numel()));
      accumulate(b, g.subspan(a.numel(), b.numel()));
    });
  }
  return out;
}

template <typename T>
Tensor<T> slice_channels(Tape<T>& tape, const Tensor<T>& x, std::size_t begin, std::size_t end) {
  if (x.ndim() < 1 || begin >= end || end > x.dim(0)) {
    reject("slice_channels", "invalid channel range [" + std::to_string(begin) + ", " +
                                 std::to_string(end) + ") for shape " + shape_str(x.shape()));
  }
  const std::size_t per = trailing_size(x.shape());
  Shape shape = x.shape();
  shape[0] = end - begin;
  Tensor<T> out(std::move(shape), std::vector<T>(x.data().begin() + static_cast<std::ptrdiff_t>(begin * per),
                                                 x.data().begin() + static_cast<std::ptrdiff_t>(end * per)));
  if (tape.needs_grad({&x})) {
    tape.record({x}, out, [=]() mutable {
      const auto g = out.grad();
      auto xg = x.grad();
      for (std::size_t i = 0; i < g.size(); ++i) xg[begin * per + i] += g[i];
    });
  }
  return out;
}

template <typename T>
Tensor<T> add(Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape("add", a, b);
  Tensor<T> out(a.shape());
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = a[i] + b[i];
  require_finite(out, "add");
  if (tape.needs_grad({&a, &b})) {
    tape.record({a, b}, out, [=]() mutable {
      const auto g = std::span<const T>(out.grad());
      accumulate(a, g);
      accumulate(b, g);
    });
  }
  return out;
}

template <typename T>
Tensor<T> sub(Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape("sub", a, b);
  Tensor<T> out(a.shape());
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = a[i] - b[i];
  require_finite(out, "sub");
  if (tape.needs_grad({&a, &b})) {
    tape.record({a, b}, out, [=]() mutable {
      const auto g = out.grad();
      accumulate(a, std::span<const T>(g));
      if (b.requires_grad()) {
        auto bg = b.grad();
        for (std::size_t i = 0; i < g.size(); ++i) bg[i] -= g[i];
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> mul(Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape("mul", a, b);
  Tensor<T> out(a.shape());
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = a[i] * b[i];
  require_finite(out, "mul");
  if (tape.needs_grad({&a, &b})) {
    tape.record({a, b}, out, [=]() mutable {
      const auto g = out.grad();
      if (a.requires_grad()) {
        auto ag = a.grad();
        for (std::size_t i = 0; i < g.size(); ++i) ag[i] += g[i] * b[i];
      }
      if (b.requires_grad()) {
        auto bg = b.grad();
        for (std::size_t i = 0; i < g.size(); ++i) bg[i] += g[i] * a[i];
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> scale(Tape<T>& tape, const Tensor<T>& x, T factor) {
  Tensor<T> out = x.clone();
  simd::kernels<T>().scale(out.numel(), factor, out.data().data());
  require_finite(out, "scale");
  if (tape.needs_grad({&x})) {
    tape.record({x}, out, [=]() mutable {
      simd::kernels<T>().axpy(out.numel(), factor, out.grad().data(), x.grad().data());
    });
  }
  return out;
}

template <typename T>
Tensor<T> add_channel_bias(Tape<T>& tape, const Tensor<T>& x, const Tensor<T>& v) {
  if (x.ndim() < 1 || v.numel() != x.dim(0)) {
    reject("add_channel_bias", "need one bias per channel: " + shape_str(x.shape()) + " vs " +
                                   shape_str(v.shape()));
  }
  Tensor<T> out = x.clone();
  const std::size_t per = trailing_size(x.shape());
  for (std::size_t c = 0; c < x.dim(0); ++c) {
    for (std::size_t i = 0; i < per; ++i) out[c * per + i] += v[c];
  }
  require_finite(out, "add_channel_bias");
  if (tape.needs_grad({&x, &v})) {
    tape.record({x, v}, out, [=]() mutable {
      const auto g = std::span<const T>(out.grad());
      accumulate(x, g);
      if (v.requires_grad()) {
        auto vg = v.grad();
        const auto& kt = simd::kernels<T>();
        for (std::size_t c = 0; c < vg.size(); ++c) vg[c] += kt.sum(per, g.data() + c * per);
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> mean(Tape<T>& tape, const Tensor<T>& x) {
  const T n = static_cast<T>(x.numel());
  Tensor<T> out = Tensor<T>::scalar(simd::kernels<T>().sum(x.numel(), x.data().data()) / n);
  require_finite(out, "mean");
  if (tape.needs_grad({&x})) {
    tape.record({x}, out, [=]() mutable {
      const T g = out.grad()[0] / n;
      for (T& xg : x.grad()) xg += g;
    });
  }
  return out;
}

template <typename T>
Tensor<T> mse(Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape("mse", a, b);
  const std::size_t n = a.numel();
  double acc = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double d = static_cast<double>(a[i]) - static_cast<double>(b[i]);
    acc += d * d;
  }
  Tensor<T> out = Tensor<T>::scalar(static_cast<T>(acc / static_cast<double>(n)));
  require_finite(out, "mse");
  if (tape.needs_grad({&a, &b})) {
    tape.record({a, b}, out, [=]() mutable {
      const T scale_factor = T(2) * out.grad()[0] / static_cast<T>(n);
      if (a.requires_grad()) {
        auto ag = a.grad();
        for (std::size_t i = 0; i < n; ++i) ag[i] += scale_factor * (a[i] - b[i]);
      }
      if (b.requires_grad()) {
        auto bg = b.grad();
        for (std::size_t i = 0; i < n; ++i) bg[i] -= scale_factor * (a[i] - b[i]);
      }
    });
  }
  return out;
}

#define FLUIDDIFF_INSTANTIATE_OPS(T)                                                              \
  template Tensor<T> conv2d(Tape<T>&, const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,       \
                            std::size_t, std::size_t);                                            \
  template Tensor<T> conv2d_transpose(Tape<T>&, const Tensor<T>&, const Tensor<T>&,               \
                                      const Tensor<T>&, std::size_t, std::size_t, std::size_t);   \
  template Tensor<T> group_norm(Tape<T>&, const Tensor<T>&, std::size_t, const Tensor<T>&,        \
                                const Tensor<T>&, T);                                             \
  template Tensor<T> silu(Tape<T>&, const Tensor<T>&);                                            \
  template Tensor<T> linear(Tape<T>&, const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);      \
  template Tensor<T> self_attention(Tape<T>&, const Tensor<T>&, const Tensor<T>&,                 \
                                    const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);        \
  template Tensor<T> concat_channels(Tape<T>&, const Tensor<T>&, const Tensor<T>&);               \
  template Tensor<T> slice_channels(Tape<T>&, const Tensor<T>&, std::size_t, std::size_t);        \
  template Tensor<T> add(Tape<T>&, const Tensor<T>&, const Tensor<T>&);                           \
  template Tensor<T> sub(Tape<T>&, const Tensor<T>&, const Tensor<T>&);                           \
  template Tensor<T> mul(Tape<T>&, const Tensor<T>&, const Tensor<T>&);                           \
  template Tensor<T> scale(Tape<T>&, const Tensor<T>&, T);                                        \
  template Tensor<T> add_channel_bias(Tape<T>&, const Tensor<T>&, const Tensor<T>&);              \
  template Tensor<T> mean(Tape<T>&, const Tensor<T>&);                                            \
  template Tensor<T> mse(Tape<T>&, const Tensor<T>&, const Tensor<T>&);

FLUIDDIFF_INSTANTIATE_OPS(float)
FLUIDDIFF_INSTANTIATE_OPS(double)

#undef FLUIDDIFF_INSTANTIATE_OPS

}  // namespace fluiddiff::ops
