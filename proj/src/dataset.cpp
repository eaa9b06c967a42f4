#include "fluiddiff/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>

#include "fluiddiff/io.hpp"
#include "fluiddiff/rng.hpp"

namespace fluiddiff::dataset {

using nlohmann::json;

Split split_scenes(std::size_t n_scenes, SplitRatio ratio, std::uint64_t seed) {
  if (n_scenes < 2) throw std::invalid_argument("split_scenes: need at least 2 scenes");
  if (!(ratio.train > 0.0) || !(ratio.test > 0.0)) {
    throw std::invalid_argument("split_scenes: ratio parts must be positive");
  }
  const auto n_train = static_cast<std::size_t>(
      std::floor(static_cast<double>(n_scenes) * ratio.train / (ratio.train + ratio.test)));
  if (n_train == 0 || n_train == n_scenes) {
    throw std::invalid_argument("split_scenes: ratio leaves the train or test side empty for " +
                                std::to_string(n_scenes) + " scenes");
  }
  std::vector<std::size_t> perm(n_scenes);
  std::iota(perm.begin(), perm.end(), 0);
  Rng rng(seed);
  for (std::size_t i = n_scenes - 1; i > 0; --i) std::swap(perm[i], perm[rng.uniform_int(0, i)]);
  Split s;
  s.train.assign(perm.begin(), perm.begin() + static_cast<std::ptrdiff_t>(n_train));
  s.test.assign(perm.begin() + static_cast<std::ptrdiff_t>(n_train), perm.end());
  std::sort(s.train.begin(), s.train.end());
  std::sort(s.test.begin(), s.test.end());
  return s;
}

ChannelStats make_channel_stats(double max_abs, const std::string& channel, std::vector<std::string>& warnings) {
  if (!(max_abs > 0.0) || !std::isfinite(max_abs)) {
    warnings.push_back(channel + ": max_abs is " + std::to_string(max_abs) + ", using scale 1");
    return {max_abs, 1.0};
  }
  int e = 0;
  const double m = std::frexp(max_abs, &e);
  return {max_abs, std::ldexp(1.0, m == 0.5 ? e - 1 : e)};
}

template <typename T>
void normalize(std::span<T> values, const ChannelStats& stats) {
  const T s = static_cast<T>(stats.scale);
  for (T& v : values) v /= s;
}

template <typename T>
void denormalize(std::span<T> values, const ChannelStats& stats) {
  const T s = static_cast<T>(stats.scale);
  for (T& v : values) v *= s;
}

namespace {

template <typename T, bool Forward>
Tensor<T> rescale_velocity(const Tensor<T>& velocity, const NormStats& stats) {
  if (velocity.ndim() != 3 || velocity.dim(0) != 2) {
    throw std::invalid_argument("velocity tensor must be (2, H, W), got " + shape_str(velocity.shape()));
  }
  Tensor<T> out = velocity.clone();
  const std::size_t plane = out.numel() / 2;
  auto ux = out.data().subspan(0, plane);
  auto uy = out.data().subspan(plane, plane);
  if constexpr (Forward) {
    normalize(ux, stats.ux);
    normalize(uy, stats.uy);
  } else {
    denormalize(ux, stats.ux);
    denormalize(uy, stats.uy);
  }
  return out;
}

Tensor<double> grid_tensor(const fluid::Grid& g) {
  return Tensor<double>(Shape{g.rows, g.cols}, g.values);
}

std::string scene_name(std::size_t scene) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "scene_%04zu.fdt", scene);
  return buf;
}

template <typename V>
V field(const json& j, const char* key) {
  if (!j.contains(key)) throw DatasetError(std::string("manifest: missing field '") + key + "'");
  try {
    return j.at(key).get<V>();
  } catch (const json::exception& e) {
    throw DatasetError(std::string("manifest: field '") + key + "': " + e.what());
  }
}

}  // namespace

template <typename T>
Tensor<T> normalize_velocity(const Tensor<T>& velocity, const NormStats& stats) {
  return rescale_velocity<T, true>(velocity, stats);
}

template <typename T>
Tensor<T> denormalize_velocity(const Tensor<T>& velocity, const NormStats& stats) {
  return rescale_velocity<T, false>(velocity, stats);
}

fluid::SimParams Manifest::sim_params() const {
  fluid::SimParams p;
  p.nu = nu;
  p.eta = eta;
  p.dt = dt;
  p.height = height;
  p.width = width;
  p.total_time = total_time;
  p.record_every = record_every;
  p.cg_tol = cg_tol;
  p.cg_max_iter = cg_max_iter;
  return p;
}

json to_json(const NormStats& n) {
  auto channel = [](const ChannelStats& c) { return json{{"max_abs", c.max_abs}, {"scale", c.scale}}; };
  return json{{"ux", channel(n.ux)}, {"uy", channel(n.uy)}, {"warnings", n.warnings}};
}

NormStats norm_stats_from_json(const json& j) {
  auto channel = [&](const char* key) {
    const json c = field<json>(j, key);
    return ChannelStats{field<double>(c, "max_abs"), field<double>(c, "scale")};
  };
  NormStats n;
  n.ux = channel("ux");
  n.uy = channel("uy");
  n.warnings = field<std::vector<std::string>>(j, "warnings");
  if (!(n.ux.scale > 0.0) || !(n.uy.scale > 0.0)) throw DatasetError("normalization scale must be positive");
  return n;
}

json to_json(const Manifest& m) {
  json files = json::array();
  for (const auto& f : m.files) files.push_back({{"scene", f.scene}, {"path", f.path}, {"sha256", f.sha256}});
  return json{
      {"format_version", m.format_version},
      {"height", m.height},
      {"width", m.width},
      {"n_scenes", m.n_scenes},
      {"snapshots_per_scene", m.snapshots_per_scene},
      {"record_every", m.record_every},
      {"total_time", m.total_time},
      {"nu", m.nu},
      {"eta", m.eta},
      {"dt", m.dt},
      {"cg_tol", m.cg_tol},
      {"cg_max_iter", m.cg_max_iter},
      {"base_seed", m.base_seed},
      {"split_ratio", {m.split_ratio.train, m.split_ratio.test}},
      {"split", {{"train", m.split.train}, {"test", m.split.test}}},
      {"normalization", to_json(m.normalization)},
      {"generator", m.generator},
      {"files", files},
  };
}

Manifest manifest_from_json(const json& j) {
  if (!j.is_object()) throw DatasetError("manifest: top level must be an object");
  Manifest m;
  m.format_version = field<std::uint32_t>(j, "format_version");
  if (m.format_version != io::kFormatVersion) {
    throw DatasetError("manifest: unsupported format_version " + std::to_string(m.format_version));
  }
  m.height = field<std::size_t>(j, "height");
  m.width = field<std::size_t>(j, "width");
  m.n_scenes = field<std::size_t>(j, "n_scenes");
  m.snapshots_per_scene = field<std::size_t>(j, "snapshots_per_scene");
  m.record_every = field<double>(j, "record_every");
  m.total_time = field<double>(j, "total_time");
  m.nu = field<double>(j, "nu");
  m.eta = field<double>(j, "eta");
  m.dt = field<double>(j, "dt");
  m.cg_tol = field<double>(j, "cg_tol");
  m.cg_max_iter = field<std::size_t>(j, "cg_max_iter");
  m.base_seed = field<std::uint64_t>(j, "base_seed");
  const auto ratio = field<std::vector<double>>(j, "split_ratio");
  if (ratio.size() != 2) throw DatasetError("manifest: split_ratio must have two entries");
  m.split_ratio = {ratio[0], ratio[1]};
  const json split = field<json>(j, "split");
  m.split.train = field<std::vector<std::size_t>>(split, "train");
  m.split.test = field<std::vector<std::size_t>>(split, "test");
  m.normalization = norm_stats_from_json(field<json>(j, "normalization"));
  m.generator = field<std::string>(j, "generator");
  for (const json& f : field<json>(j, "files")) {
    m.files.push_back({field<std::size_t>(f, "scene"), field<std::string>(f, "path"), field<std::string>(f, "sha256")});
  }
  return m;
}

Manifest read_manifest(const std::filesystem::path& dir) {
  const std::string text = io::read_text_file(dir / "manifest.json");
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    throw DatasetError(std::string("manifest: ") + e.what());
  }
  return manifest_from_json(j);
}

SceneRecord scene_from_trajectory(std::size_t scene, const fluid::Trajectory& traj) {
  SceneRecord r;
  r.scene = scene;
  r.rho0 = grid_tensor(traj.rho0);
  for (const auto& s : traj.snapshots) r.snapshots.push_back({s.tau, grid_tensor(s.ux), grid_tensor(s.uy)});
  return r;
}

void write_scene(const std::filesystem::path& path, const SceneRecord& record) {
  NamedTensors<double> t;
  t.add("rho0", record.rho0);
  for (std::size_t k = 0; k < record.snapshots.size(); ++k) {
    const auto& s = record.snapshots[k];
    const std::string suffix = "_" + std::to_string(k);
    t.add("tau" + suffix, Tensor<double>::scalar(s.tau));
    t.add("ux" + suffix, s.ux);
    t.add("uy" + suffix, s.uy);
  }
  io::write_named(path, t);
}

SceneRecord read_scene(const std::filesystem::path& path, std::size_t scene) {
  const auto t = io::read_named<double>(path);
  if (!t.contains("rho0")) throw DatasetError(path.string() + ": missing rho0");
  SceneRecord r;
  r.scene = scene;
  r.rho0 = t.at("rho0");
  if (r.rho0.ndim() != 2) throw DatasetError(path.string() + ": rho0 must be 2-D");
  for (std::size_t k = 0;; ++k) {
    const std::string suffix = "_" + std::to_string(k);
    if (!t.contains("tau" + suffix)) break;
    if (!t.contains("ux" + suffix) || !t.contains("uy" + suffix)) {
      throw DatasetError(path.string() + ": snapshot " + std::to_string(k) + " incomplete");
    }
    SceneSnapshot s{t.at("tau" + suffix).item(), t.at("ux" + suffix), t.at("uy" + suffix)};
    if (s.ux.shape() != r.rho0.shape() || s.uy.shape() != r.rho0.shape()) {
      throw DatasetError(path.string() + ": snapshot " + std::to_string(k) + " shape mismatch");
    }
    if (!r.snapshots.empty() && !(s.tau > r.snapshots.back().tau)) {
      throw DatasetError(path.string() + ": snapshot taus not strictly increasing");
    }
    r.snapshots.push_back(std::move(s));
  }
  if (t.size() != 1 + 3 * r.snapshots.size()) throw DatasetError(path.string() + ": unexpected tensors");
  return r;
}

namespace {

std::pair<double, double> velocity_max_abs(const SceneRecord& r) {
  double mx = 0.0, my = 0.0;
  for (const auto& s : r.snapshots) {
    for (double v : s.ux.data()) mx = std::max(mx, std::abs(v));
    for (double v : s.uy.data()) my = std::max(my, std::abs(v));
  }
  return {mx, my};
}

NormStats stats_from_max(double mx, double my) {
  NormStats n;
  n.ux = make_channel_stats(mx, "ux", n.warnings);
  n.uy = make_channel_stats(my, "uy", n.warnings);
  return n;
}

}  // namespace

Manifest generate_dataset(const fluid::SimParams& params, std::size_t n_scenes, std::uint64_t base_seed,
                          const std::filesystem::path& out_dir, SplitRatio ratio) {
  params.validate();
  if (n_scenes == 0) throw std::invalid_argument("generate_dataset: n_scenes must be >= 1");
  // A single scene cannot be split; it is kept for training.
  const Split split = n_scenes == 1 ? Split{{0}, {}} : split_scenes(n_scenes, ratio, base_seed);
  std::error_code ec;
  std::filesystem::create_directories(out_dir, ec);
  if (ec) throw io::IoError("cannot create " + out_dir.string() + ": " + ec.message());

  Manifest m;
  m.format_version = io::kFormatVersion;
  m.height = params.height;
  m.width = params.width;
  m.n_scenes = n_scenes;
  m.snapshots_per_scene = params.snapshot_count();
  m.record_every = params.record_every;
  m.total_time = params.total_time;
  m.nu = params.nu;
  m.eta = params.eta;
  m.dt = params.dt;
  m.cg_tol = params.cg_tol;
  m.cg_max_iter = params.cg_max_iter;
  m.base_seed = base_seed;
  m.split_ratio = ratio;
  m.split = split;
  m.generator = Rng::kGeneratorName;

  std::vector<std::pair<double, double>> scene_max(n_scenes);
  for (std::size_t i = 0; i < n_scenes; ++i) {
    fluid::Trajectory traj;
    try {
      traj = fluid::simulate(mix_seed(base_seed, i), params);
    } catch (const fluid::SolverError& e) {
      throw fluid::SolverError("scene " + std::to_string(i) + ": " + e.what(), e.residual(), e.iterations());
    }
    const SceneRecord rec = scene_from_trajectory(i, traj);
    scene_max[i] = velocity_max_abs(rec);
    const std::string name = scene_name(i);
    write_scene(out_dir / name, rec);
    m.files.push_back({i, name, io::sha256_file(out_dir / name)});
  }
  double mx = 0.0, my = 0.0;
  for (std::size_t i : split.train) {
    mx = std::max(mx, scene_max[i].first);
    my = std::max(my, scene_max[i].second);
  }
  m.normalization = stats_from_max(mx, my);
  io::write_text_file(out_dir / "manifest.json", to_json(m).dump(2) + "\n");
  return m;
}

void verify_dataset(const std::filesystem::path& dir, const Manifest& m) {
  if (m.files.size() != m.n_scenes) {
    throw DatasetError("manifest lists " + std::to_string(m.files.size()) + " files for " +
                       std::to_string(m.n_scenes) + " scenes");
  }
  std::vector<int> seen(m.n_scenes, 0);
  for (std::size_t i : m.split.train) {
    if (i >= m.n_scenes) throw DatasetError("split references scene " + std::to_string(i));
    ++seen[i];
  }
  for (std::size_t i : m.split.test) {
    if (i >= m.n_scenes) throw DatasetError("split references scene " + std::to_string(i));
    ++seen[i];
  }
  for (std::size_t i = 0; i < m.n_scenes; ++i) {
    if (seen[i] != 1) throw DatasetError("split is not a partition at scene " + std::to_string(i));
  }
  for (std::size_t k = 0; k < m.files.size(); ++k) {
    const auto& f = m.files[k];
    if (f.scene != k) throw DatasetError("manifest file entries out of order at " + std::to_string(k));
    const auto path = dir / f.path;
    if (!std::filesystem::exists(path)) throw DatasetError("missing scene file " + path.string());
    const std::string hash = io::sha256_file(path);
    if (hash != f.sha256) {
      throw DatasetError("hash mismatch for " + path.string() + ": manifest " + f.sha256 + ", file " + hash);
    }
    const SceneRecord r = read_scene(path, f.scene);
    if (r.rho0.shape() != Shape{m.height, m.width} || r.snapshots.size() != m.snapshots_per_scene) {
      throw DatasetError("scene " + std::to_string(k) + " does not match the manifest grid or snapshot count");
    }
  }
}

NormStats compute_stats(const std::filesystem::path& dir, const Manifest& m, const std::vector<std::size_t>& scenes) {
  double mx = 0.0, my = 0.0;
  for (std::size_t i : scenes) {
    const auto [a, b] = velocity_max_abs(read_scene(dir / m.files.at(i).path, i));
    mx = std::max(mx, a);
    my = std::max(my, b);
  }
  return stats_from_max(mx, my);
}

template <typename T>
std::vector<Pair<T>> load_pairs(const std::filesystem::path& dir, const Manifest& m,
                                const std::vector<std::size_t>& scenes) {
  std::vector<Pair<T>> pairs;
  for (std::size_t i : scenes) {
    const SceneRecord r = read_scene(dir / m.files.at(i).path, i);
    const Tensor<T> rho0 = io::convert<T>(r.rho0);
    for (std::size_t k = 0; k < r.snapshots.size(); ++k) {
      const auto& s = r.snapshots[k];
      Tensor<double> v(Shape{2, m.height, m.width});
      std::copy(s.ux.data().begin(), s.ux.data().end(), v.data().begin());
      std::copy(s.uy.data().begin(), s.uy.data().end(), v.data().begin() + static_cast<std::ptrdiff_t>(s.ux.numel()));
      pairs.push_back({i, k, s.tau, rho0, io::convert<T>(normalize_velocity(v, m.normalization))});
    }
  }
  return pairs;
}

#define FLUIDDIFF_INSTANTIATE_DATASET(T)                                                       \
  template void normalize(std::span<T>, const ChannelStats&);                                  \
  template void denormalize(std::span<T>, const ChannelStats&);                                \
  template Tensor<T> normalize_velocity(const Tensor<T>&, const NormStats&);                   \
  template Tensor<T> denormalize_velocity(const Tensor<T>&, const NormStats&);                 \
  template std::vector<Pair<T>> load_pairs(const std::filesystem::path&, const Manifest&,      \
                                           const std::vector<std::size_t>&);

FLUIDDIFF_INSTANTIATE_DATASET(float)
FLUIDDIFF_INSTANTIATE_DATASET(double)

#undef FLUIDDIFF_INSTANTIATE_DATASET

}  // namespace fluiddiff::dataset
