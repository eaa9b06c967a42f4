#pragma once
// Conditional epsilon-prediction U-Net over concatenated (x_t, y) channels.
//
// Down section l (channels C_l = base_channels * channel_mult[l]):
//   res -> res -> + time MLP -> [attention] -> (skip_l) -> stride-2 conv
// Bottleneck at the coarsest extent: res -> + time MLP -> attention -> res.
// Up section l, from coarse to fine:
//   3x3 stride-2 transposed conv -> concat skip_l -> res -> res -> + time MLP -> [attention]
// followed by a final 3x3 conv to out_channels.
//
// A residual block is silu(group_norm(conv3x3(x))) + shortcut(x), where the
// shortcut is a 1x1 conv when channel counts differ and the identity
// otherwise. Each time MLP maps the sinusoidal step embedding through
// Linear(d, C) -> SiLU -> Linear(C, C) and is broadcast over space.

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "fluiddiff/ddpm.hpp"
#include "fluiddiff/named_tensors.hpp"
#include "fluiddiff/tensor.hpp"

namespace fluiddiff::unet {

struct UNetConfig {
  std::size_t levels = 2;
  std::size_t base_channels = 16;
  std::vector<std::size_t> channel_mult = {1, 2};
  std::size_t groups = 4;
  std::size_t time_embed_dim = 32;
  std::vector<std::size_t> attention_levels = {1};
  std::size_t in_channels = 4;
  std::size_t out_channels = 2;

  /// Throws std::invalid_argument on an inconsistent configuration.
  void validate() const;
  /// Also requires height and width divisible by 2^levels.
  void validate_extent(std::size_t height, std::size_t width) const;

  std::size_t channels(std::size_t level) const { return base_channels * channel_mult.at(level); }
  bool has_attention(std::size_t level) const;

  bool operator==(const UNetConfig&) const = default;
};

template <typename T>
using DenoiserParams = NamedTensors<T>;

/// Fan-in scaled normal weights (std sqrt(1 / fan_in), a tenth of that for
/// the output conv), zero biases, unit norm gains. Every tensor requires
/// gradients.
template <typename T>
DenoiserParams<T> build_unet(const UNetConfig& config, std::uint64_t seed);

/// Closed-form parameter count; equals build_unet(config, s).total_numel().
std::size_t count_params(const UNetConfig& config);

struct DenoiseOptions {
  /// Zero the skip tensor of this level before concatenation (wiring probe).
  int ablate_skip = -1;
};

/// eps prediction for one sample. `xt` is (2, H, W), `cond` is (2, H, W),
/// `time_value` is the scalar fed to the sinusoidal embedding. Throws
/// NumericalError naming the layer whose activations became non-finite.
template <typename T>
Tensor<T> denoise(Tape<T>& tape, const UNetConfig& config, const DenoiserParams<T>& params,
                  const Tensor<T>& xt, double time_value, const Tensor<T>& cond,
                  const DenoiseOptions& options = {});

/// Inference-mode adapter for ddpm::ancestral_sample.
template <typename T>
ddpm::Denoiser<T> make_denoiser(const UNetConfig& config, const DenoiserParams<T>& params,
                                const ddpm::NoiseSchedule& sched, ddpm::TimeInput mode);

}  // namespace fluiddiff::unet
