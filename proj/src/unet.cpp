#include "fluiddiff/unet.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "fluiddiff/ops.hpp"
#include "fluiddiff/rng.hpp"

namespace fluiddiff::unet {

void UNetConfig::validate() const {
  auto fail = [](const std::string& msg) { throw std::invalid_argument("UNetConfig: " + msg); };
  if (levels < 1) fail("levels must be >= 1");
  if (channel_mult.size() != levels) {
    fail("channel_mult has " + std::to_string(channel_mult.size()) + " entries for " +
         std::to_string(levels) + " levels");
  }
  if (base_channels < 1) fail("base_channels must be >= 1");
  if (groups < 1 || base_channels % groups != 0) {
    fail("base_channels " + std::to_string(base_channels) + " not divisible by groups " +
         std::to_string(groups));
  }
  for (std::size_t m : channel_mult) {
    if (m < 1) fail("channel_mult entries must be >= 1");
  }
  if (time_embed_dim < 2 || time_embed_dim % 2 != 0) fail("time_embed_dim must be even and >= 2");
  for (std::size_t l : attention_levels) {
    if (l >= levels) fail("attention level " + std::to_string(l) + " out of range");
  }
  if (out_channels < 1 || in_channels <= out_channels) {
    fail("in_channels must exceed out_channels (condition channels are appended)");
  }
}

void UNetConfig::validate_extent(std::size_t height, std::size_t width) const {
  validate();
  const std::size_t f = std::size_t{1} << levels;
  if (height == 0 || width == 0 || height % f != 0 || width % f != 0) {
    throw std::invalid_argument("UNetConfig: extent " + std::to_string(height) + "x" +
                                std::to_string(width) + " not divisible by 2^levels = " +
                                std::to_string(f));
  }
}

bool UNetConfig::has_attention(std::size_t level) const {
  return std::find(attention_levels.begin(), attention_levels.end(), level) != attention_levels.end();
}

namespace {

enum class Init { FanIn, Zero, One };

// The output conv starts small so the initial noise prediction is near zero.
constexpr double kOutputGain = 0.1;

template <typename T>
class Builder {
 public:
  Builder(std::uint64_t seed, std::size_t embed_dim) : rng_(seed), d_(embed_dim) {}

  void param(const std::string& name, Shape shape, Init init, std::size_t fan_in = 1, double gain = 1.0) {
    Tensor<T> t(std::move(shape));
    if (init == Init::One) {
      std::fill(t.data().begin(), t.data().end(), T(1));
    } else if (init == Init::FanIn) {
      const double std_dev = gain * std::sqrt(1.0 / static_cast<double>(fan_in));
      for (auto& v : t.data()) v = static_cast<T>(std_dev * rng_.normal());
    }
    t.set_requires_grad(true);
    out.add(name, std::move(t));
  }

  void conv(const std::string& name, std::size_t cout, std::size_t cin, std::size_t k, double gain = 1.0) {
    param(name + ".w", {cout, cin, k, k}, Init::FanIn, cin * k * k, gain);
    param(name + ".b", {cout}, Init::Zero);
  }

  void res(const std::string& name, std::size_t cin, std::size_t c) {
    conv(name + ".conv", c, cin, 3);
    param(name + ".norm.g", {c}, Init::One);
    param(name + ".norm.b", {c}, Init::Zero);
    if (cin != c) conv(name + ".skip", c, cin, 1);
  }

  void time_mlp(const std::string& name, std::size_t c) {
    param(name + ".fc1.w", {c, d_}, Init::FanIn, d_);
    param(name + ".fc1.b", {c}, Init::Zero);
    param(name + ".fc2.w", {c, c}, Init::FanIn, c);
    param(name + ".fc2.b", {c}, Init::Zero);
  }

  void attention(const std::string& name, std::size_t c) {
    for (const char* p : {".q", ".k", ".v", ".o"}) param(name + p, {c, c}, Init::FanIn, c);
  }

  void upsample(const std::string& name, std::size_t c) {
    param(name + ".w", {c, c, 3, 3}, Init::FanIn, c * 9);
    param(name + ".b", {c}, Init::Zero);
  }

  NamedTensors<T> out;

 private:
  Rng rng_;
  std::size_t d_;
};

}  // namespace

template <typename T>
DenoiserParams<T> build_unet(const UNetConfig& config, std::uint64_t seed) {
  config.validate();
  Builder<T> b(seed, config.time_embed_dim);
  std::size_t cin = config.in_channels;
  for (std::size_t l = 0; l < config.levels; ++l) {
    const std::string s = "down" + std::to_string(l);
    const std::size_t c = config.channels(l);
    b.res(s + ".res0", cin, c);
    b.res(s + ".res1", c, c);
    b.time_mlp(s + ".time", c);
    if (config.has_attention(l)) b.attention(s + ".attn", c);
    b.conv(s + ".down", c, c, 3);
    cin = c;
  }
  b.res("mid.res0", cin, cin);
  b.time_mlp("mid.time", cin);
  b.attention("mid.attn", cin);
  b.res("mid.res1", cin, cin);
  for (std::size_t l = config.levels; l-- > 0;) {
    const std::string s = "up" + std::to_string(l);
    const std::size_t c = config.channels(l);
    b.upsample(s + ".up", cin);
    b.res(s + ".res0", cin + c, c);
    b.res(s + ".res1", c, c);
    b.time_mlp(s + ".time", c);
    if (config.has_attention(l)) b.attention(s + ".attn", c);
    cin = c;
  }
  b.conv("out", config.out_channels, cin, 3, kOutputGain);
  return std::move(b.out);
}

std::size_t count_params(const UNetConfig& config) {
  config.validate();
  const std::size_t d = config.time_embed_dim;
  auto res = [](std::size_t cin, std::size_t c) {
    return 9 * c * cin + c + 2 * c + (cin != c ? c * cin + c : 0);
  };
  auto time = [d](std::size_t c) { return d * c + c + c * c + c; };
  auto attn = [](std::size_t c) { return 4 * c * c; };
  auto conv3 = [](std::size_t cin, std::size_t c) { return 9 * c * cin + c; };

  std::size_t n = 0;
  std::size_t cin = config.in_channels;
  for (std::size_t l = 0; l < config.levels; ++l) {
    const std::size_t c = config.channels(l);
    n += res(cin, c) + res(c, c) + time(c) + conv3(c, c);
    if (config.has_attention(l)) n += attn(c);
    cin = c;
  }
  n += 2 * res(cin, cin) + time(cin) + attn(cin);
  for (std::size_t l = config.levels; l-- > 0;) {
    const std::size_t c = config.channels(l);
    n += conv3(cin, cin) + res(cin + c, c) + res(c, c) + time(c);
    if (config.has_attention(l)) n += attn(c);
    cin = c;
  }
  return n + conv3(cin, config.out_channels);
}

namespace {

template <typename T>
class Forward {
 public:
  Forward(Tape<T>& tape, const UNetConfig& config, const DenoiserParams<T>& params, double time_value)
      : tape_(tape), cfg_(config), p_(params) {
    const auto e = ddpm::sinusoidal_embed(time_value, config.time_embed_dim);
    embed_ = Tensor<T>(Shape{e.size()});
    for (std::size_t i = 0; i < e.size(); ++i) embed_[i] = static_cast<T>(e[i]);
  }

  // Runs f and tags any numerical failure with the layer name.
  template <typename F>
  Tensor<T> layer(const std::string& name, F&& f) {
    try {
      return f();
    } catch (const NumericalError& e) {
      throw NumericalError("layer " + name + ": " + e.what());
    }
  }

  Tensor<T> res(const std::string& name, const Tensor<T>& x) {
    return layer(name, [&] {
      Tensor<T> h = ops::conv2d(tape_, x, w(name + ".conv.w"), w(name + ".conv.b"), 1, 1);
      h = ops::group_norm(tape_, h, cfg_.groups, w(name + ".norm.g"), w(name + ".norm.b"));
      h = ops::silu(tape_, h);
      const Tensor<T> shortcut = p_.contains(name + ".skip.w")
                                     ? ops::conv2d(tape_, x, w(name + ".skip.w"), w(name + ".skip.b"), 1, 0)
                                     : x;
      return ops::add(tape_, h, shortcut);
    });
  }

  Tensor<T> time(const std::string& name, const Tensor<T>& x) {
    return layer(name, [&] {
      Tensor<T> v = ops::linear(tape_, embed_, w(name + ".fc1.w"), w(name + ".fc1.b"));
      v = ops::silu(tape_, v);
      v = ops::linear(tape_, v, w(name + ".fc2.w"), w(name + ".fc2.b"));
      return ops::add_channel_bias(tape_, x, v);
    });
  }

  Tensor<T> attention(const std::string& name, const Tensor<T>& x) {
    return layer(name, [&] {
      return ops::self_attention(tape_, x, w(name + ".q"), w(name + ".k"), w(name + ".v"), w(name + ".o"));
    });
  }

  Tensor<T> down(const std::string& name, const Tensor<T>& x) {
    return layer(name, [&] { return ops::conv2d(tape_, x, w(name + ".w"), w(name + ".b"), 2, 1); });
  }

  Tensor<T> up(const std::string& name, const Tensor<T>& x) {
    return layer(name, [&] {
      return ops::conv2d_transpose(tape_, x, w(name + ".w"), w(name + ".b"), 2, 1, 1);
    });
  }

  Tensor<T> out(const Tensor<T>& x) {
    return layer("out", [&] { return ops::conv2d(tape_, x, w("out.w"), w("out.b"), 1, 1); });
  }

 private:
  const Tensor<T>& w(const std::string& name) const { return p_.at(name); }

  Tape<T>& tape_;
  const UNetConfig& cfg_;
  const DenoiserParams<T>& p_;
  Tensor<T> embed_;
};

}  // namespace

template <typename T>
Tensor<T> denoise(Tape<T>& tape, const UNetConfig& config, const DenoiserParams<T>& params,
                  const Tensor<T>& xt, double time_value, const Tensor<T>& cond,
                  const DenoiseOptions& options) {
  if (xt.ndim() != 3 || xt.dim(0) != config.out_channels) {
    throw std::invalid_argument("denoise: x_t must be (" + std::to_string(config.out_channels) +
                                ", H, W), got " + shape_str(xt.shape()));
  }
  const std::size_t cond_ch = config.in_channels - config.out_channels;
  if (cond.ndim() != 3 || cond.dim(0) != cond_ch || cond.dim(1) != xt.dim(1) || cond.dim(2) != xt.dim(2)) {
    throw std::invalid_argument("denoise: condition must be (" + std::to_string(cond_ch) + ", " +
                                std::to_string(xt.dim(1)) + ", " + std::to_string(xt.dim(2)) +
                                "), got " + shape_str(cond.shape()));
  }
  config.validate_extent(xt.dim(1), xt.dim(2));

  Forward<T> f(tape, config, params, time_value);
  Tensor<T> h = ops::concat_channels(tape, xt, cond);
  std::vector<Tensor<T>> skips;
  for (std::size_t l = 0; l < config.levels; ++l) {
    const std::string s = "down" + std::to_string(l);
    h = f.res(s + ".res0", h);
    h = f.res(s + ".res1", h);
    h = f.time(s + ".time", h);
    if (config.has_attention(l)) h = f.attention(s + ".attn", h);
    skips.push_back(h);
    h = f.down(s + ".down", h);
  }
  h = f.res("mid.res0", h);
  h = f.time("mid.time", h);
  h = f.attention("mid.attn", h);
  h = f.res("mid.res1", h);
  for (std::size_t l = config.levels; l-- > 0;) {
    const std::string s = "up" + std::to_string(l);
    h = f.up(s + ".up", h);
    Tensor<T> skip = skips[l];
    if (options.ablate_skip == static_cast<int>(l)) skip = Tensor<T>(skip.shape());
    h = ops::concat_channels(tape, h, skip);
    h = f.res(s + ".res0", h);
    h = f.res(s + ".res1", h);
    h = f.time(s + ".time", h);
    if (config.has_attention(l)) h = f.attention(s + ".attn", h);
  }
  return f.out(h);
}

template <typename T>
ddpm::Denoiser<T> make_denoiser(const UNetConfig& config, const DenoiserParams<T>& params,
                                const ddpm::NoiseSchedule& sched, ddpm::TimeInput mode) {
  const std::size_t steps = sched.steps;
  return [config, params, steps, mode](const Tensor<T>& xt, std::size_t t, const ddpm::Condition<T>& y) {
    Tape<T> tape(false);
    return denoise(tape, config, params, xt, ddpm::time_feature(t, steps, mode), y.channels);
  };
}

#define FLUIDDIFF_INSTANTIATE_UNET(T)                                                                 \
  template DenoiserParams<T> build_unet<T>(const UNetConfig&, std::uint64_t);                        \
  template Tensor<T> denoise(Tape<T>&, const UNetConfig&, const DenoiserParams<T>&, const Tensor<T>&, \
                             double, const Tensor<T>&, const DenoiseOptions&);                        \
  template ddpm::Denoiser<T> make_denoiser(const UNetConfig&, const DenoiserParams<T>&,               \
                                           const ddpm::NoiseSchedule&, ddpm::TimeInput);

FLUIDDIFF_INSTANTIATE_UNET(float)
FLUIDDIFF_INSTANTIATE_UNET(double)

#undef FLUIDDIFF_INSTANTIATE_UNET

}  // namespace fluiddiff::unet
