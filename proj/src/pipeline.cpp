#include "fluiddiff/pipeline.hpp"

#include <stdexcept>

#include "fluiddiff/io.hpp"

namespace fluiddiff::pipeline {

template <typename T>
Tensor<double> predict(const train::Checkpoint<T>& ckpt, const Tensor<double>& rho0, double tau,
                       std::size_t samples, std::uint64_t seed) {
  if (samples == 0) throw std::invalid_argument("predict: samples must be >= 1");
  const std::size_t h = ckpt.data.height;
  const std::size_t w = ckpt.data.width;
  if (rho0.shape() != Shape{h, w} && rho0.shape() != Shape{1, h, w}) {
    throw std::invalid_argument("predict: rho0 has shape " + shape_str(rho0.shape()) + ", checkpoint grid is " +
                                std::to_string(h) + "x" + std::to_string(w));
  }
  const auto y = ddpm::build_condition(io::convert<T>(rho0), tau, ckpt.data.total_time);
  const auto denoiser = train::checkpoint_denoiser(ckpt);
  const auto sched = ddpm::make_schedule(ckpt.train.steps, ckpt.train.beta_start, ckpt.train.beta_end);

  Tensor<double> mean(Shape{2, h, w});
  for (std::size_t k = 0; k < samples; ++k) {
    const Tensor<T> x = ddpm::ancestral_sample(denoiser, y, Shape{2, h, w}, sched, mix_seed(seed, k));
    for (std::size_t i = 0; i < mean.numel(); ++i) mean[i] += static_cast<double>(x[i]);
  }
  for (auto& v : mean.data()) v /= static_cast<double>(samples);
  return dataset::denormalize_velocity(mean, ckpt.data.normalization);
}

template <typename T>
std::vector<metrics::EvalCase> predict_split(const train::Checkpoint<T>& ckpt, const std::filesystem::path& data_dir,
                                             const dataset::Manifest& manifest,
                                             const std::vector<std::size_t>& scenes, std::size_t samples,
                                             std::uint64_t seed, bool oracle) {
  if (manifest.height != ckpt.data.height || manifest.width != ckpt.data.width) {
    throw std::invalid_argument("dataset grid does not match the checkpoint grid");
  }
  std::vector<metrics::EvalCase> cases;
  for (std::size_t scene : scenes) {
    const auto& file = manifest.files.at(scene);
    const auto rec = dataset::read_scene(data_dir / file.path, scene);
    for (std::size_t k = 0; k < rec.snapshots.size(); ++k) {
      const auto& snap = rec.snapshots[k];
      metrics::EvalCase c;
      c.tau = snap.tau;
      c.truth = Tensor<double>(Shape{2, manifest.height, manifest.width});
      const std::size_t n = snap.ux.numel();
      for (std::size_t i = 0; i < n; ++i) {
        c.truth[i] = snap.ux[i];
        c.truth[n + i] = snap.uy[i];
      }
      c.pred = oracle ? c.truth.clone()
                      : predict(ckpt, rec.rho0, snap.tau, samples, mix_seed(mix_seed(seed, scene), k));
      cases.push_back(std::move(c));
    }
  }
  return cases;
}

#define FLUIDDIFF_INSTANTIATE_PIPELINE(T)                                                                      \
  template Tensor<double> predict(const train::Checkpoint<T>&, const Tensor<double>&, double, std::size_t,     \
                                  std::uint64_t);                                                              \
  template std::vector<metrics::EvalCase> predict_split(const train::Checkpoint<T>&, const std::filesystem::path&, \
                                                        const dataset::Manifest&, const std::vector<std::size_t>&, \
                                                        std::size_t, std::uint64_t, bool);

FLUIDDIFF_INSTANTIATE_PIPELINE(float)
FLUIDDIFF_INSTANTIATE_PIPELINE(double)

#undef FLUIDDIFF_INSTANTIATE_PIPELINE

}  // namespace fluiddiff::pipeline
