#pragma once
// Glue between a trained checkpoint and a dataset split: conditional
// prediction for one (rho0, tau) and batch prediction over every snapshot
// of a set of scenes.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <vector>

#include "fluiddiff/dataset.hpp"
#include "fluiddiff/metrics.hpp"
#include "fluiddiff/trainer.hpp"

namespace fluiddiff::pipeline {

/// Mean of `samples` ancestral samples, denormalized to physical units,
/// shape (2, H, W). Sample k uses seed mix_seed(seed, k). Throws
/// std::out_of_range if tau is outside [0, total_time] of the checkpoint.
template <typename T>
Tensor<double> predict(const train::Checkpoint<T>& ckpt, const Tensor<double>& rho0, double tau,
                       std::size_t samples, std::uint64_t seed);

/// Predictions paired with the ground truth for every snapshot of `scenes`.
/// Case (scene, snapshot) is seeded with mix_seed(mix_seed(seed, scene),
/// snapshot). With `oracle` set the truth is returned as the prediction and
/// no sampling happens.
template <typename T>
std::vector<metrics::EvalCase> predict_split(const train::Checkpoint<T>& ckpt, const std::filesystem::path& data_dir,
                                             const dataset::Manifest& manifest,
                                             const std::vector<std::size_t>& scenes, std::size_t samples,
                                             std::uint64_t seed, bool oracle = false);

}  // namespace fluiddiff::pipeline
