#pragma once
// Dataset generation, manifests, train/test splitting and velocity
// normalization.
//
// Layout of a dataset directory:
//   manifest.json          grid, physics and split metadata, normalization
//                          stats and a SHA-256 per scene file
//   scene_0000.fdt ...     named tensors rho0, tau_k, ux_k, uy_k (float64)
//
// Training pairs are x0 = normalized (u_x, u_y) at tau and
// y = (rho0, tau / total_time).

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

#include "fluiddiff/fluid.hpp"
#include "fluiddiff/tensor.hpp"
#include "json.hpp"

namespace fluiddiff::dataset {

/// Manifest/file inconsistency (missing file, hash or shape mismatch).
class DatasetError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct SplitRatio {
  double train = 4.0;
  double test = 1.0;
};

struct Split {
  std::vector<std::size_t> train;  // ascending scene indices
  std::vector<std::size_t> test;
};

/// Seeded permutation; the first floor(n * train / (train + test)) scenes of
/// it go to train. Rejects n < 2 and ratios that leave a side empty.
Split split_scenes(std::size_t n_scenes, SplitRatio ratio, std::uint64_t seed);

/// Per-channel scaling. `scale` is the smallest power of two >= max_abs, so
/// value / scale lies in [-1, 1] and the round trip is exact.
struct ChannelStats {
  double max_abs = 0.0;
  double scale = 1.0;
};

/// Falls back to scale 1 for a zero (or non-finite) max_abs and appends a
/// note to `warnings`.
ChannelStats make_channel_stats(double max_abs, const std::string& channel,
                                std::vector<std::string>& warnings);

struct NormStats {
  ChannelStats ux;
  ChannelStats uy;
  std::vector<std::string> warnings;
};

template <typename T>
void normalize(std::span<T> values, const ChannelStats& stats);

template <typename T>
void denormalize(std::span<T> values, const ChannelStats& stats);

/// Applies ux stats to channel 0 and uy stats to channel 1 of a (2, H, W)
/// tensor.
template <typename T>
Tensor<T> normalize_velocity(const Tensor<T>& velocity, const NormStats& stats);

template <typename T>
Tensor<T> denormalize_velocity(const Tensor<T>& velocity, const NormStats& stats);

struct SceneFile {
  std::size_t scene = 0;
  std::string path;  // relative to the dataset directory
  std::string sha256;
};

struct Manifest {
  std::uint32_t format_version = 1;
  std::size_t height = 0;
  std::size_t width = 0;
  std::size_t n_scenes = 0;
  std::size_t snapshots_per_scene = 0;
  double record_every = 0.0;
  double total_time = 0.0;
  double nu = 0.0;
  double eta = 0.0;
  double dt = 0.0;
  double cg_tol = 0.0;
  std::size_t cg_max_iter = 0;
  std::uint64_t base_seed = 0;
  SplitRatio split_ratio;
  Split split;
  NormStats normalization;
  std::string generator;
  std::vector<SceneFile> files;

  fluid::SimParams sim_params() const;
};

nlohmann::json to_json(const NormStats& n);
NormStats norm_stats_from_json(const nlohmann::json& j);

nlohmann::json to_json(const Manifest& m);
/// Throws DatasetError on missing or ill-typed fields.
Manifest manifest_from_json(const nlohmann::json& j);

Manifest read_manifest(const std::filesystem::path& dir);

struct SceneSnapshot {
  double tau = 0.0;
  Tensor<double> ux;  // (H, W)
  Tensor<double> uy;
};

struct SceneRecord {
  std::size_t scene = 0;
  Tensor<double> rho0;  // (H, W)
  std::vector<SceneSnapshot> snapshots;
};

SceneRecord scene_from_trajectory(std::size_t scene, const fluid::Trajectory& traj);
void write_scene(const std::filesystem::path& path, const SceneRecord& record);
/// Throws DatasetError if the names or shapes are inconsistent.
SceneRecord read_scene(const std::filesystem::path& path, std::size_t scene);

/// Simulates every scene with seed mix_seed(base_seed, index), writes the
/// scene files, then the manifest. Normalization stats come from the train
/// scenes only. A solver failure aborts the whole run with the scene index.
Manifest generate_dataset(const fluid::SimParams& params, std::size_t n_scenes, std::uint64_t base_seed,
                          const std::filesystem::path& out_dir, SplitRatio ratio = {});

/// Checks every manifest hash and scene shape. Throws DatasetError.
void verify_dataset(const std::filesystem::path& dir, const Manifest& manifest);

/// Max |u_x| and |u_y| over the given scenes.
NormStats compute_stats(const std::filesystem::path& dir, const Manifest& manifest,
                        const std::vector<std::size_t>& scenes);

/// One training or evaluation case.
template <typename T>
struct Pair {
  std::size_t scene = 0;
  std::size_t snapshot = 0;
  double tau = 0.0;
  Tensor<T> rho0;  // (H, W)
  Tensor<T> x0;    // normalized (2, H, W)
};

template <typename T>
std::vector<Pair<T>> load_pairs(const std::filesystem::path& dir, const Manifest& manifest,
                                const std::vector<std::size_t>& scenes);

}  // namespace fluiddiff::dataset
