#include "fluiddiff/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numbers>
#include <numeric>
#include <set>
#include <sstream>

#include "fluiddiff/io.hpp"
#include "fluiddiff/ops.hpp"

namespace fluiddiff::train {

using nlohmann::json;

namespace {

// Stream tags mixed into the base seed; iteration streams use the iteration
// index directly.
constexpr std::uint64_t kShuffleStream = 0x5348554646ULL;

template <typename V>
void take(const json& j, const char* key, V& out) {
  try {
    out = j.at(key).get<V>();
  } catch (const json::exception& e) {
    throw std::invalid_argument(std::string("config key '") + key + "': " + e.what());
  }
}

void reject_unknown(const json& j, const std::set<std::string>& known, const char* section) {
  if (!j.is_object()) throw std::invalid_argument(std::string(section) + " config must be a JSON object");
  for (const auto& [key, value] : j.items()) {
    if (!known.count(key)) throw std::invalid_argument(std::string("unknown ") + section + " config key '" + key + "'");
  }
}

template <typename T>
constexpr const char* dtype_name() {
  return dtype_of<T>() == DType::Float32 ? "float32" : "float64";
}

}  // namespace

void TrainConfig::validate() const {
  auto fail = [](const std::string& m) { throw std::invalid_argument("TrainConfig: " + m); };
  if (!(base_lr > 0.0) || !std::isfinite(base_lr)) fail("base_lr must be > 0");
  if (epochs < 1) fail("epochs must be >= 1");
  if (batch_size < 1) fail("batch_size must be >= 1");
  if (steps < 1) fail("diffusion_steps must be >= 1");
  if (!(beta_start > 0.0) || !(beta_start <= beta_end) || !(beta_end < 1.0)) {
    fail("need 0 < beta_start <= beta_end < 1");
  }
  if (!(grad_clip >= 0.0)) fail("grad_clip must be >= 0");
}

json to_json(const TrainConfig& c) {
  return json{{"base_lr", c.base_lr},       {"epochs", c.epochs},
              {"batch_size", c.batch_size}, {"diffusion_steps", c.steps},
              {"beta_start", c.beta_start}, {"beta_end", c.beta_end},
              {"seed", c.seed},             {"time_input", ddpm::to_string(c.time_input)},
              {"checkpoint_every", c.checkpoint_every}, {"grad_clip", c.grad_clip}};
}

json to_json(const unet::UNetConfig& c) {
  return json{{"levels", c.levels},
              {"base_channels", c.base_channels},
              {"channel_mult", c.channel_mult},
              {"groups", c.groups},
              {"time_embed_dim", c.time_embed_dim},
              {"attention_levels", c.attention_levels},
              {"in_channels", c.in_channels},
              {"out_channels", c.out_channels}};
}

TrainConfig train_config_from_json(const json& j) {
  reject_unknown(j, {"base_lr", "epochs", "batch_size", "diffusion_steps", "beta_start", "beta_end", "seed",
                     "time_input", "checkpoint_every", "grad_clip"},
                 "train");
  TrainConfig c;
  if (j.contains("base_lr")) take(j, "base_lr", c.base_lr);
  if (j.contains("epochs")) take(j, "epochs", c.epochs);
  if (j.contains("batch_size")) take(j, "batch_size", c.batch_size);
  if (j.contains("diffusion_steps")) take(j, "diffusion_steps", c.steps);
  if (j.contains("beta_start")) take(j, "beta_start", c.beta_start);
  if (j.contains("beta_end")) take(j, "beta_end", c.beta_end);
  if (j.contains("seed")) take(j, "seed", c.seed);
  if (j.contains("time_input")) {
    std::string mode;
    take(j, "time_input", mode);
    c.time_input = ddpm::parse_time_input(mode);
  }
  if (j.contains("checkpoint_every")) take(j, "checkpoint_every", c.checkpoint_every);
  if (j.contains("grad_clip")) take(j, "grad_clip", c.grad_clip);
  return c;
}

unet::UNetConfig unet_config_from_json(const json& j) {
  reject_unknown(j, {"levels", "base_channels", "channel_mult", "groups", "time_embed_dim", "attention_levels",
                     "in_channels", "out_channels"},
                 "unet");
  unet::UNetConfig c;
  if (j.contains("levels")) take(j, "levels", c.levels);
  if (j.contains("base_channels")) take(j, "base_channels", c.base_channels);
  if (j.contains("channel_mult")) take(j, "channel_mult", c.channel_mult);
  if (j.contains("groups")) take(j, "groups", c.groups);
  if (j.contains("time_embed_dim")) take(j, "time_embed_dim", c.time_embed_dim);
  if (j.contains("attention_levels")) take(j, "attention_levels", c.attention_levels);
  if (j.contains("in_channels")) take(j, "in_channels", c.in_channels);
  if (j.contains("out_channels")) take(j, "out_channels", c.out_channels);
  return c;
}

template <typename T>
AdamState<T> make_adam(const NamedTensors<T>& params) {
  AdamState<T> s;
  for (std::size_t i = 0; i < params.size(); ++i) {
    s.m.add(params.names()[i], Tensor<T>(params.tensors()[i].shape()));
    s.v.add(params.names()[i], Tensor<T>(params.tensors()[i].shape()));
  }
  return s;
}

template <typename T>
void adam_step(const NamedTensors<T>& params, AdamState<T>& state, double lr) {
  if (state.m.size() != params.size() || state.v.size() != params.size()) {
    throw std::invalid_argument("adam_step: optimizer state does not match the parameters");
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto& p = params.tensors()[i];
    if (!p.has_grad()) continue;
    for (T g : p.grad()) {
      if (!std::isfinite(g)) throw NumericalError("non-finite gradient for parameter " + params.names()[i]);
    }
  }
  ++state.step;
  const double b1 = state.beta1, b2 = state.beta2;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(state.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor<T> p = params.tensors()[i];
    Tensor<T> m = state.m.tensors()[i];
    Tensor<T> v = state.v.tensors()[i];
    if (m.shape() != p.shape() || v.shape() != p.shape()) {
      throw std::invalid_argument("adam_step: moment shape mismatch for " + params.names()[i]);
    }
    const bool has = p.has_grad();
    const auto g = has ? p.grad() : std::span<T>();
    for (std::size_t k = 0; k < p.numel(); ++k) {
      const double gk = has ? static_cast<double>(g[k]) : 0.0;
      const double mk = b1 * static_cast<double>(m[k]) + (1.0 - b1) * gk;
      const double vk = b2 * static_cast<double>(v[k]) + (1.0 - b2) * gk * gk;
      m[k] = static_cast<T>(mk);
      v[k] = static_cast<T>(vk);
      const double update = lr * (mk / c1) / (std::sqrt(vk / c2) + state.eps);
      p[k] = static_cast<T>(static_cast<double>(p[k]) - update);
    }
  }
}

double cosine_lr(std::size_t step, std::size_t total_steps, double base_lr) {
  if (total_steps == 0 || step > total_steps) {
    throw std::out_of_range("cosine_lr: step " + std::to_string(step) + " outside [0, " +
                            std::to_string(total_steps) + "]");
  }
  return base_lr * 0.5 *
         (1.0 + std::cos(std::numbers::pi * static_cast<double>(step) / static_cast<double>(total_steps)));
}

std::size_t draw_step(Rng& rng, std::size_t steps) { return static_cast<std::size_t>(rng.uniform_int(1, steps)); }

std::string loss_csv(const std::vector<LossRecord>& history) {
  std::string s = "iteration,lr,loss\n";
  char buf[96];
  for (const auto& r : history) {
    std::snprintf(buf, sizeof buf, "%zu,%.17g,%.17g\n", r.iteration, r.lr, r.loss);
    s += buf;
  }
  return s;
}

std::vector<LossRecord> parse_loss_csv(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line) || line != "iteration,lr,loss") {
    throw std::invalid_argument("loss.csv: missing header");
  }
  std::vector<LossRecord> out;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    LossRecord r;
    char* end = nullptr;
    r.iteration = std::strtoull(line.c_str(), &end, 10);
    if (*end != ',') throw std::invalid_argument("loss.csv: bad row '" + line + "'");
    r.lr = std::strtod(end + 1, &end);
    if (*end != ',') throw std::invalid_argument("loss.csv: bad row '" + line + "'");
    r.loss = std::strtod(end + 1, &end);
    if (*end != '\0') throw std::invalid_argument("loss.csv: bad row '" + line + "'");
    out.push_back(r);
  }
  return out;
}

template <typename T>
void save_checkpoint(const std::filesystem::path& dir, const Checkpoint<T>& c) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw io::IoError("cannot create " + dir.string() + ": " + ec.message());
  NamedTensors<T> moments;
  for (std::size_t i = 0; i < c.adam.m.size(); ++i) {
    moments.add("m." + c.adam.m.names()[i], c.adam.m.tensors()[i]);
    moments.add("v." + c.adam.v.names()[i], c.adam.v.tensors()[i]);
  }
  const json cfg{
      {"dtype", dtype_name<T>()},
      {"train", to_json(c.train)},
      {"unet", to_json(c.unet)},
      {"schedule", {{"T", c.train.steps}, {"beta_start", c.train.beta_start}, {"beta_end", c.train.beta_end}}},
      {"data",
       {{"height", c.data.height},
        {"width", c.data.width},
        {"total_time", c.data.total_time},
        {"normalization", dataset::to_json(c.data.normalization)}}},
      {"rng", {{"generator", std::string(Rng::kGeneratorName)}, {"seed", c.train.seed}}},
      {"adam", {{"step", c.adam.step}, {"beta1", c.adam.beta1}, {"beta2", c.adam.beta2}, {"eps", c.adam.eps}}},
      {"next_iteration", c.next_iteration},
      {"total_iterations", c.total_iterations},
  };
  io::write_named(dir / "params.fdt", c.params);
  io::write_named(dir / "adam.fdt", moments);
  io::write_text_file(dir / "loss.csv", loss_csv(c.history));
  io::write_text_file(dir / "config.json", cfg.dump(2) + "\n");
}

template <typename T>
Checkpoint<T> load_checkpoint(const std::filesystem::path& dir) {
  json cfg;
  try {
    cfg = json::parse(io::read_text_file(dir / "config.json"));
  } catch (const json::parse_error& e) {
    throw std::invalid_argument("checkpoint config.json: " + std::string(e.what()));
  }
  Checkpoint<T> c;
  try {
    if (cfg.at("dtype").get<std::string>() != dtype_name<T>()) {
      throw std::invalid_argument("checkpoint dtype " + cfg.at("dtype").get<std::string>() + " does not match");
    }
    const std::string gen = cfg.at("rng").at("generator").get<std::string>();
    if (gen != Rng::kGeneratorName) throw std::invalid_argument("checkpoint was written with generator " + gen);
    c.train = train_config_from_json(cfg.at("train"));
    c.unet = unet_config_from_json(cfg.at("unet"));
    const json& d = cfg.at("data");
    c.data.height = d.at("height").get<std::size_t>();
    c.data.width = d.at("width").get<std::size_t>();
    c.data.total_time = d.at("total_time").get<double>();
    c.data.normalization = dataset::norm_stats_from_json(d.at("normalization"));
    const json& a = cfg.at("adam");
    c.adam.step = a.at("step").get<std::size_t>();
    c.adam.beta1 = a.at("beta1").get<double>();
    c.adam.beta2 = a.at("beta2").get<double>();
    c.adam.eps = a.at("eps").get<double>();
    c.next_iteration = cfg.at("next_iteration").get<std::size_t>();
    c.total_iterations = cfg.at("total_iterations").get<std::size_t>();
  } catch (const json::exception& e) {
    throw std::invalid_argument("checkpoint config.json: " + std::string(e.what()));
  } catch (const dataset::DatasetError& e) {
    throw std::invalid_argument("checkpoint config.json: " + std::string(e.what()));
  }
  c.train.validate();
  c.unet.validate();

  const auto params = io::read_named<T>(dir / "params.fdt");
  const auto reference = unet::build_unet<T>(c.unet, 0);
  if (params.names() != reference.names()) throw std::invalid_argument("checkpoint parameters do not match the network");
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (params.tensors()[i].shape() != reference.tensors()[i].shape()) {
      throw std::invalid_argument("checkpoint parameter " + params.names()[i] + " has the wrong shape");
    }
    Tensor<T> t = params.tensors()[i];
    t.set_requires_grad(true);
    c.params.add(params.names()[i], t);
  }
  const auto moments = io::read_named<T>(dir / "adam.fdt");
  for (std::size_t i = 0; i < c.params.size(); ++i) {
    const std::string& n = c.params.names()[i];
    if (!moments.contains("m." + n) || !moments.contains("v." + n)) {
      throw std::invalid_argument("adam.fdt lacks moments for " + n);
    }
    c.adam.m.add(n, moments.at("m." + n));
    c.adam.v.add(n, moments.at("v." + n));
  }
  c.history = parse_loss_csv(io::read_text_file(dir / "loss.csv"));
  return c;
}

template <typename T>
Checkpoint<T> train(const std::vector<dataset::Pair<T>>& pairs, const DataInfo& data,
                    const TrainConfig& cfg, const unet::UNetConfig& unet_cfg, TrainOptions<T> options) {
  cfg.validate();
  unet_cfg.validate_extent(data.height, data.width);
  if (pairs.empty()) throw std::invalid_argument("train: no training pairs");
  for (const auto& p : pairs) {
    if (p.x0.shape() != Shape{unet_cfg.out_channels, data.height, data.width}) {
      throw std::invalid_argument("train: pair x0 shape " + shape_str(p.x0.shape()) + " inconsistent with grid");
    }
  }
  const ddpm::NoiseSchedule sched = ddpm::make_schedule(cfg.steps, cfg.beta_start, cfg.beta_end);
  const std::size_t n = pairs.size();
  const std::size_t per_epoch = (n + cfg.batch_size - 1) / cfg.batch_size;
  const std::size_t total = cfg.epochs * per_epoch;

  Checkpoint<T> ck;
  if (options.resume) {
    ck = std::move(*options.resume);
    if (!(ck.train == cfg) || !(ck.unet == unet_cfg)) {
      throw std::invalid_argument("train: resume checkpoint was written with a different configuration");
    }
    if (ck.total_iterations != total) throw std::invalid_argument("train: resume checkpoint has a different horizon");
  } else {
    ck.train = cfg;
    ck.unet = unet_cfg;
    ck.params = unet::build_unet<T>(unet_cfg, cfg.seed);
    ck.adam = make_adam(ck.params);
    ck.total_iterations = total;
  }
  ck.data = data;

  std::vector<Tensor<T>> conds;
  conds.reserve(n);
  for (const auto& p : pairs) conds.push_back(ddpm::build_condition(p.rho0, p.tau, data.total_time).channels);

  std::vector<std::size_t> order(n);
  std::size_t order_epoch = static_cast<std::size_t>(-1);
  const std::size_t stop = std::min(total, options.stop_at.value_or(total));

  for (std::size_t it = ck.next_iteration; it < stop; ++it) {
    const std::size_t epoch = it / per_epoch;
    if (epoch != order_epoch) {
      std::iota(order.begin(), order.end(), 0);
      Rng shuffle(mix_seed(mix_seed(cfg.seed, kShuffleStream), epoch));
      for (std::size_t i = n - 1; i > 0; --i) std::swap(order[i], order[shuffle.uniform_int(0, i)]);
      order_epoch = epoch;
    }
    const std::size_t begin = (it % per_epoch) * cfg.batch_size;
    const std::size_t end = std::min(n, begin + cfg.batch_size);
    const double lr = cosine_lr(it, total, cfg.base_lr);

    Rng rng(mix_seed(cfg.seed, it));
    for (const auto& p : ck.params.tensors()) p.zero_grad();
    double loss_value = 0.0;
    try {
      Tape<T> tape;
      Tensor<T> loss;
      const T weight = static_cast<T>(1.0 / static_cast<double>(end - begin));
      for (std::size_t b = begin; b < end; ++b) {
        const auto& pair = pairs[order[b]];
        const std::size_t t = draw_step(rng, cfg.steps);
        Tensor<T> eps(pair.x0.shape());
        for (auto& e : eps.data()) e = static_cast<T>(rng.normal());
        const Tensor<T> xt = ddpm::q_sample(pair.x0, t, eps, sched);
        const Tensor<T> pred = unet::denoise(tape, unet_cfg, ck.params, xt,
                                             ddpm::time_feature(t, cfg.steps, cfg.time_input), conds[order[b]]);
        const Tensor<T> term = ops::scale(tape, ddpm::diffusion_loss(tape, pred, eps), weight);
        loss = loss.defined() ? ops::add(tape, loss, term) : term;
      }
      loss_value = static_cast<double>(loss.item());
      if (!std::isfinite(loss_value)) throw NumericalError("loss is " + std::to_string(loss_value));
      tape.backward(loss);
      if (cfg.grad_clip > 0.0) {
        double sq = 0.0;
        for (const auto& p : ck.params.tensors()) {
          for (T g : p.grad()) sq += static_cast<double>(g) * static_cast<double>(g);
        }
        const double norm = std::sqrt(sq);
        if (norm > cfg.grad_clip) {
          const T factor = static_cast<T>(cfg.grad_clip / norm);
          for (const auto& p : ck.params.tensors()) {
            for (T& g : p.grad()) g *= factor;
          }
        }
      }
      adam_step(ck.params, ck.adam, lr);
    } catch (const NumericalError& e) {
      ck.next_iteration = it;
      if (!options.out_dir.empty()) save_checkpoint(options.out_dir, ck);
      throw TrainingError("non-finite loss at iteration " + std::to_string(it) + ": " + e.what(), it,
                          options.out_dir);
    }
    const LossRecord rec{it, lr, loss_value};
    ck.history.push_back(rec);
    ck.next_iteration = it + 1;
    if (options.on_iteration) options.on_iteration(rec);
    if (!options.out_dir.empty() && cfg.checkpoint_every > 0 && (it + 1) % cfg.checkpoint_every == 0 &&
        it + 1 < stop) {
      save_checkpoint(options.out_dir, ck);
    }
  }
  if (!options.out_dir.empty()) save_checkpoint(options.out_dir, ck);
  return ck;
}

template <typename T>
ddpm::Denoiser<T> checkpoint_denoiser(const Checkpoint<T>& ckpt) {
  return unet::make_denoiser(ckpt.unet, ckpt.params,
                             ddpm::make_schedule(ckpt.train.steps, ckpt.train.beta_start, ckpt.train.beta_end),
                             ckpt.train.time_input);
}

#define FLUIDDIFF_INSTANTIATE_TRAIN(T)                                                                   \
  template AdamState<T> make_adam(const NamedTensors<T>&);                                               \
  template void adam_step(const NamedTensors<T>&, AdamState<T>&, double);                                \
  template void save_checkpoint(const std::filesystem::path&, const Checkpoint<T>&);                     \
  template Checkpoint<T> load_checkpoint<T>(const std::filesystem::path&);                               \
  template Checkpoint<T> train(const std::vector<dataset::Pair<T>>&, const DataInfo&, const TrainConfig&, \
                               const unet::UNetConfig&, TrainOptions<T>);                                \
  template ddpm::Denoiser<T> checkpoint_denoiser(const Checkpoint<T>&);

FLUIDDIFF_INSTANTIATE_TRAIN(float)
FLUIDDIFF_INSTANTIATE_TRAIN(double)

#undef FLUIDDIFF_INSTANTIATE_TRAIN

}  // namespace fluiddiff::train
