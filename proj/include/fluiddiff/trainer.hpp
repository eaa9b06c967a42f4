#pragma once
// Adam, cosine learning-rate decay and the epsilon-prediction training loop
// with checkpointing.
//
// Checkpoint directory:
//   config.json  train/network configs, schedule, normalization stats,
//                dataset geometry, generator, optimizer counters
//   params.fdt   network parameters (named tensors)
//   adam.fdt     first and second moments, named "m.<param>" / "v.<param>"
//   loss.csv     iteration,lr,loss
//
// Randomness is keyed on (seed, iteration) and (seed, epoch), never on a
// running generator, so a resumed run replays the same batches, steps and
// noise as an uninterrupted one.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "fluiddiff/dataset.hpp"
#include "fluiddiff/ddpm.hpp"
#include "fluiddiff/rng.hpp"
#include "fluiddiff/unet.hpp"
#include "json.hpp"

namespace fluiddiff::train {

struct TrainConfig {
  double base_lr = 1e-4;
  std::size_t epochs = 10;
  std::size_t batch_size = 8;
  std::size_t steps = 400;  // diffusion T
  double beta_start = 1e-4;
  double beta_end = 0.02;
  std::uint64_t seed = 0;
  ddpm::TimeInput time_input = ddpm::TimeInput::Integer;
  std::size_t checkpoint_every = 0;  // iterations; 0 writes only the final checkpoint
  double grad_clip = 0.0;            // global-norm clip; 0 disables

  void validate() const;
  bool operator==(const TrainConfig&) const = default;
};

nlohmann::json to_json(const TrainConfig& c);
nlohmann::json to_json(const unet::UNetConfig& c);
/// Missing keys keep their defaults; unknown keys throw std::invalid_argument.
TrainConfig train_config_from_json(const nlohmann::json& j);
unet::UNetConfig unet_config_from_json(const nlohmann::json& j);

template <typename T>
struct AdamState {
  NamedTensors<T> m;
  NamedTensors<T> v;
  std::size_t step = 0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// Zero moments shaped like `params`.
template <typename T>
AdamState<T> make_adam(const NamedTensors<T>& params);

/// One bias-corrected Adam update using the gradients stored on `params`.
/// Every gradient is checked before anything is modified; a non-finite one
/// throws NumericalError naming the parameter.
template <typename T>
void adam_step(const NamedTensors<T>& params, AdamState<T>& state, double lr);

/// base_lr * (1 + cos(pi * step / total_steps)) / 2 for 0 <= step <= total_steps.
double cosine_lr(std::size_t step, std::size_t total_steps, double base_lr);

/// Uniform diffusion step in 1..steps.
std::size_t draw_step(Rng& rng, std::size_t steps);

struct LossRecord {
  std::size_t iteration = 0;
  double lr = 0.0;
  double loss = 0.0;
};

/// Grid and time range the model was trained on.
struct DataInfo {
  std::size_t height = 0;
  std::size_t width = 0;
  double total_time = 0.0;
  dataset::NormStats normalization;
};

template <typename T>
struct Checkpoint {
  TrainConfig train;
  unet::UNetConfig unet;
  DataInfo data;
  unet::DenoiserParams<T> params;
  AdamState<T> adam;
  std::size_t next_iteration = 0;
  std::size_t total_iterations = 0;
  std::vector<LossRecord> history;
};

template <typename T>
void save_checkpoint(const std::filesystem::path& dir, const Checkpoint<T>& ckpt);

/// Throws io::IoError, io::FormatError or std::invalid_argument.
template <typename T>
Checkpoint<T> load_checkpoint(const std::filesystem::path& dir);

std::string loss_csv(const std::vector<LossRecord>& history);
std::vector<LossRecord> parse_loss_csv(const std::string& text);

/// Non-finite loss or gradient. The last good state has been written to
/// `checkpoint_dir` when that is non-empty.
class TrainingError : public std::runtime_error {
 public:
  TrainingError(const std::string& what, std::size_t iteration, std::filesystem::path checkpoint_dir)
      : std::runtime_error(what), iteration_(iteration), checkpoint_dir_(std::move(checkpoint_dir)) {}
  std::size_t iteration() const { return iteration_; }
  const std::filesystem::path& checkpoint_dir() const { return checkpoint_dir_; }

 private:
  std::size_t iteration_;
  std::filesystem::path checkpoint_dir_;
};

template <typename T>
struct TrainOptions {
  std::filesystem::path out_dir;             // empty: no files
  std::optional<Checkpoint<T>> resume;       // continue from this state
  std::optional<std::size_t> stop_at;        // halt before this iteration
  std::function<void(const LossRecord&)> on_iteration;
};

/// Trains on (x0, rho0, tau) pairs. Per iteration: a batch from the epoch's
/// seeded shuffle, an independent t ~ U{1..T} and eps ~ N(0, I) per sample,
/// the batch-mean noise MSE, backward, optional clipping and an Adam step at
/// the cosine learning rate (horizon = epochs * batches per epoch).
template <typename T>
Checkpoint<T> train(const std::vector<dataset::Pair<T>>& pairs, const DataInfo& data,
                    const TrainConfig& train_cfg, const unet::UNetConfig& unet_cfg,
                    TrainOptions<T> options = {});

/// Ancestral-sampling denoiser for a trained checkpoint.
template <typename T>
ddpm::Denoiser<T> checkpoint_denoiser(const Checkpoint<T>& ckpt);

}  // namespace fluiddiff::train
