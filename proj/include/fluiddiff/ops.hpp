#pragma once
// Differentiable primitives. Every function evaluates eagerly and, when the
// tape is recording and an input requires a gradient, appends its backward
// rule to the tape.
//
// Layout conventions: feature maps are [C, H, W] (single sample, row-major);
// conv kernels are [C_out, C_in, k, k]; transposed-conv kernels are
// [C_in, C_out, k, k] so that a conv kernel can be reused as the kernel of
// its adjoint. Convolution is cross-correlation with zero padding.

#include <cstddef>

#include "fluiddiff/tensor.hpp"

namespace fluiddiff::ops {

/// H' = floor((H + 2*padding - k) / stride) + 1. `bias` may be undefined.
template <typename T>
Tensor<T> conv2d(Tape<T>& tape, const Tensor<T>& input, const Tensor<T>& kernel,
                 const Tensor<T>& bias, std::size_t stride, std::size_t padding);

/// Adjoint of conv2d: H' = (H - 1)*stride - 2*padding + k + output_padding,
/// with output_padding < stride.
template <typename T>
Tensor<T> conv2d_transpose(Tape<T>& tape, const Tensor<T>& input, const Tensor<T>& kernel,
                           const Tensor<T>& bias, std::size_t stride, std::size_t padding,
                           std::size_t output_padding = 0);

/// Normalizes each group of C/groups channels to zero mean and unit
/// (biased) variance, then applies a per-channel affine map.
template <typename T>
Tensor<T> group_norm(Tape<T>& tape, const Tensor<T>& x, std::size_t groups, const Tensor<T>& gamma,
                     const Tensor<T>& beta, T eps = T(1e-5));

template <typename T>
Tensor<T> silu(Tape<T>& tape, const Tensor<T>& x);

/// y = W x + b for x of shape [n], W of shape [m, n]; `b` may be undefined.
template <typename T>
Tensor<T> linear(Tape<T>& tape, const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias);

/// Single-head self-attention with residual:
///   out = Wo (V softmax_keys(K^T Q / sqrt(C))) + x
/// with Q = Wq x, K = Wk x, V = Wv x. `x` is [C, N] or [C, H, W] (positions
/// flattened); all projections are [C, C].
template <typename T>
Tensor<T> self_attention(Tape<T>& tape, const Tensor<T>& x, const Tensor<T>& wq,
                         const Tensor<T>& wk, const Tensor<T>& wv, const Tensor<T>& wo);

template <typename T>
Tensor<T> concat_channels(Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& b);

/// Channels [begin, end) of x.
template <typename T>
Tensor<T> slice_channels(Tape<T>& tape, const Tensor<T>& x, std::size_t begin, std::size_t end);

template <typename T>
Tensor<T> add(Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& b);

template <typename T>
Tensor<T> sub(Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& b);

template <typename T>
Tensor<T> mul(Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& b);

template <typename T>
Tensor<T> scale(Tape<T>& tape, const Tensor<T>& x, T factor);

/// x[c, ...] + v[c], broadcast over all trailing positions.
template <typename T>
Tensor<T> add_channel_bias(Tape<T>& tape, const Tensor<T>& x, const Tensor<T>& v);

/// Scalar mean over all elements.
template <typename T>
Tensor<T> mean(Tape<T>& tape, const Tensor<T>& x);

/// Scalar mean of (a - b)^2.
template <typename T>
Tensor<T> mse(Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& b);

}  // namespace fluiddiff::ops
