// fluiddiff: data generation, training, sampling, evaluation and schedule
// inspection.
//
// Exit codes: 0 ok, 2 invalid flags or config, 3 I/O, format or dataset
// error, 4 solver failure, 5 non-finite training loss, 1 anything else.
// On failure the last stderr line reads
//   error: exit=<code> kind=<kind> message=<text>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "fluiddiff/dataset.hpp"
#include "fluiddiff/ddpm.hpp"
#include "fluiddiff/fluid.hpp"
#include "fluiddiff/io.hpp"
#include "fluiddiff/metrics.hpp"
#include "fluiddiff/pipeline.hpp"
#include "fluiddiff/trainer.hpp"
#include "json.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace fluiddiff;

namespace {

enum Exit { kOk = 0, kOther = 1, kUsage = 2, kIo = 3, kSolver = 4, kNonFinite = 5 };

// Bad flag value or config content discovered after parsing.
class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

int fail(int code, const std::string& kind, std::string message) {
  for (char& c : message) {
    if (c == '\n' || c == '\r') c = ' ';
  }
  std::cerr << "error: exit=" << code << " kind=" << kind << " message=" << message << '\n';
  return code;
}

json sim_to_json(const fluid::SimParams& p) {
  return {{"nu", p.nu},
          {"eta", p.eta},
          {"dt", p.dt},
          {"height", p.height},
          {"width", p.width},
          {"total_time", p.total_time},
          {"record_every", p.record_every},
          {"cg_tol", p.cg_tol},
          {"cg_max_iter", p.cg_max_iter}};
}

template <typename V>
void take(const json& j, const char* key, V& out) {
  if (j.contains(key)) out = j.at(key).get<V>();
}

fluid::SimParams sim_from_json(const json& j) {
  static const std::vector<std::string> known = {"nu",           "eta",          "dt",     "height",     "width",
                                                 "total_time", "record_every", "cg_tol", "cg_max_iter"};
  for (const auto& [key, _] : j.items()) {
    if (std::find(known.begin(), known.end(), key) == known.end()) throw UsageError("unknown sim key '" + key + "'");
  }
  fluid::SimParams p;
  take(j, "nu", p.nu);
  take(j, "eta", p.eta);
  take(j, "dt", p.dt);
  take(j, "height", p.height);
  take(j, "width", p.width);
  take(j, "total_time", p.total_time);
  take(j, "record_every", p.record_every);
  take(j, "cg_tol", p.cg_tol);
  take(j, "cg_max_iter", p.cg_max_iter);
  return p;
}

/// Config file: {"dtype", "sim", "dataset", "train", "unet"}, every section
/// optional. Unknown keys anywhere are rejected.
json load_config(const std::string& path) {
  if (path.empty()) return json::object();
  json j;
  try {
    j = json::parse(io::read_text_file(path));
  } catch (const json::parse_error& e) {
    throw UsageError("config " + path + ": " + e.what());
  }
  if (!j.is_object()) throw UsageError("config " + path + ": top level must be an object");
  for (const auto& [key, _] : j.items()) {
    if (key != "dtype" && key != "sim" && key != "dataset" && key != "train" && key != "unet") {
      throw UsageError("config " + path + ": unknown key '" + key + "'");
    }
  }
  return j;
}

json section(const json& cfg, const char* name) { return cfg.contains(name) ? cfg.at(name) : json::object(); }

template <typename V>
void overlay(json& j, const char* key, const std::optional<V>& flag) {
  if (flag) j[key] = *flag;
}

// Wraps invalid_argument from config parsing as a usage problem.
template <typename F>
auto parse_or_usage(F&& f) {
  try {
    return f();
  } catch (const json::exception& e) {
    throw UsageError(e.what());
  } catch (const std::invalid_argument& e) {
    throw UsageError(e.what());
  } catch (const std::out_of_range& e) {
    throw UsageError(e.what());
  }
}

void echo_config(const fs::path& path, const json& resolved) { io::write_text_file(path, resolved.dump(2) + "\n"); }

// ---------------------------------------------------------------- gen-data

struct GenDataArgs {
  std::string config;
  std::string out;
  std::optional<std::size_t> scenes;
  std::vector<std::size_t> size;
  std::optional<double> total_time, record_every, nu, eta, dt, cg_tol;
  std::optional<std::size_t> cg_max_iter;
  std::optional<std::uint64_t> seed;
  std::vector<double> split;
};

int cmd_gen_data(const GenDataArgs& a) {
  const json cfg = load_config(a.config);
  json sim = section(cfg, "sim");
  json data = section(cfg, "dataset");
  if (a.size.size() == 2) {
    sim["height"] = a.size[0];
    sim["width"] = a.size[1];
  }
  overlay(sim, "total_time", a.total_time);
  overlay(sim, "record_every", a.record_every);
  overlay(sim, "nu", a.nu);
  overlay(sim, "eta", a.eta);
  overlay(sim, "dt", a.dt);
  overlay(sim, "cg_tol", a.cg_tol);
  overlay(sim, "cg_max_iter", a.cg_max_iter);
  overlay(data, "n_scenes", a.scenes);
  overlay(data, "seed", a.seed);
  if (a.split.size() == 2) data["split"] = a.split;

  const auto [params, n_scenes, seed, ratio] = parse_or_usage([&] {
    for (const auto& [key, _] : data.items()) {
      if (key != "n_scenes" && key != "seed" && key != "split") throw UsageError("unknown dataset key '" + key + "'");
    }
    const fluid::SimParams p = sim_from_json(sim);
    p.validate();
    std::size_t n = 16;
    std::uint64_t s = 0;
    dataset::SplitRatio r;
    take(data, "n_scenes", n);
    take(data, "seed", s);
    if (data.contains("split")) {
      const auto v = data.at("split").get<std::vector<double>>();
      if (v.size() != 2 || !(v[0] > 0) || !(v[1] >= 0)) throw UsageError("split must be two ratios, train > 0");
      r = {v[0], v[1]};
    }
    if (n == 0) throw UsageError("--scenes must be >= 1");
    return std::tuple{p, n, s, r};
  });

  const auto manifest = dataset::generate_dataset(params, n_scenes, seed, a.out, ratio);
  const json resolved = {{"command", "gen-data"},
                         {"sim", sim_to_json(params)},
                         {"dataset", {{"n_scenes", n_scenes}, {"seed", seed}, {"split", {ratio.train, ratio.test}}}}};
  echo_config(fs::path(a.out) / "resolved_config.json", resolved);
  std::cout << "wrote " << manifest.n_scenes << " scenes x " << manifest.snapshots_per_scene << " snapshots to "
            << a.out << " (train " << manifest.split.train.size() << ", test " << manifest.split.test.size() << ")\n";
  for (const auto& w : manifest.normalization.warnings) std::cerr << "warning: " << w << '\n';
  return kOk;
}

// ------------------------------------------------------------------- train

struct TrainArgs {
  std::string data, config, out, resume;
  std::optional<std::size_t> stop_at, epochs, batch_size, steps, checkpoint_every, base_channels, levels;
  std::optional<double> lr;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> dtype, time_input;
  bool quiet = false;
};

std::string checkpoint_dtype(const fs::path& dir) {
  const json j = json::parse(io::read_text_file(dir / "config.json"));
  return j.at("dtype").get<std::string>();
}

template <typename T>
int run_train(const TrainArgs& a, const train::TrainConfig& tc, const unet::UNetConfig& uc, const json& resolved) {
  const auto manifest = dataset::read_manifest(a.data);
  dataset::verify_dataset(a.data, manifest);
  const auto pairs = dataset::load_pairs<T>(a.data, manifest, manifest.split.train);
  const train::DataInfo info{manifest.height, manifest.width, manifest.total_time, manifest.normalization};

  train::TrainOptions<T> opt;
  opt.out_dir = a.out;
  opt.stop_at = a.stop_at;
  if (!a.resume.empty()) opt.resume = train::load_checkpoint<T>(a.resume);
  if (!a.quiet) {
    opt.on_iteration = [](const train::LossRecord& r) {
      if (r.iteration % 50 == 0) std::printf("iter %zu lr %.3e loss %.6f\n", r.iteration, r.lr, r.loss);
    };
  }
  fs::create_directories(a.out);
  echo_config(fs::path(a.out) / "resolved_config.json", resolved);
  const auto ck = parse_or_usage([&] { return train::train<T>(pairs, info, tc, uc, std::move(opt)); });
  if (!ck.history.empty()) {
    std::printf("done: %zu/%zu iterations, final loss %.6f\n", ck.next_iteration, ck.total_iterations,
                ck.history.back().loss);
  }
  return kOk;
}

int cmd_train(const TrainArgs& a) {
  const json cfg = load_config(a.config);
  json tj = section(cfg, "train");
  json uj = section(cfg, "unet");
  std::string dtype = cfg.value("dtype", "float32");
  if (a.dtype) dtype = *a.dtype;
  if (dtype != "float32" && dtype != "float64") throw UsageError("dtype must be float32 or float64");
  overlay(tj, "epochs", a.epochs);
  overlay(tj, "batch_size", a.batch_size);
  overlay(tj, "diffusion_steps", a.steps);
  overlay(tj, "checkpoint_every", a.checkpoint_every);
  overlay(tj, "base_lr", a.lr);
  overlay(tj, "seed", a.seed);
  overlay(tj, "time_input", a.time_input);
  overlay(uj, "base_channels", a.base_channels);
  overlay(uj, "levels", a.levels);

  const auto tc = parse_or_usage([&] {
    auto c = train::train_config_from_json(tj);
    c.validate();
    return c;
  });
  const auto uc = parse_or_usage([&] {
    auto c = train::unet_config_from_json(uj);
    c.validate();
    return c;
  });
  const json resolved = {{"command", "train"},
                         {"data", a.data},
                         {"resume", a.resume},
                         {"stop_at", a.stop_at ? json(*a.stop_at) : json(nullptr)},
                         {"dtype", dtype},
                         {"train", train::to_json(tc)},
                         {"unet", train::to_json(uc)}};
  if (!a.resume.empty() && checkpoint_dtype(a.resume) != dtype) {
    throw UsageError("resume checkpoint dtype " + checkpoint_dtype(a.resume) + " differs from " + dtype);
  }
  return dtype == "float32" ? run_train<float>(a, tc, uc, resolved) : run_train<double>(a, tc, uc, resolved);
}

// ------------------------------------------------------------------ sample

struct SampleArgs {
  std::string checkpoint, rho0, out;
  double tau = 0.0;
  std::uint64_t seed = 0;
  std::size_t samples = 1;
};

// A plain tensor file, or a scene file whose "rho0" entry is used.
Tensor<double> read_rho0(const fs::path& path) {
  try {
    return io::read_tensor<double>(path);
  } catch (const io::FormatError& e) {
    if (e.kind() == io::FormatError::Kind::BadDType) return io::convert<double>(io::read_tensor<float>(path));
    if (e.kind() != io::FormatError::Kind::BadMagic) throw;
  }
  return io::read_named<double>(path).at("rho0");
}

template <typename T>
int run_sample(const SampleArgs& a) {
  const auto ck = train::load_checkpoint<T>(a.checkpoint);
  if (!(a.tau >= 0.0 && a.tau <= ck.data.total_time)) {
    throw UsageError("--tau " + std::to_string(a.tau) + " outside [0, " + std::to_string(ck.data.total_time) + "]");
  }
  const auto rho0 = read_rho0(a.rho0);
  const auto pred = parse_or_usage([&] { return pipeline::predict(ck, rho0, a.tau, a.samples, a.seed); });
  io::write_tensor(a.out, pred);
  echo_config(a.out + ".config.json", {{"command", "sample"},
                                        {"checkpoint", a.checkpoint},
                                        {"rho0", a.rho0},
                                        {"tau", a.tau},
                                        {"seed", a.seed},
                                        {"samples", a.samples}});
  std::printf("wrote %s %s\n", shape_str(pred.shape()).c_str(), a.out.c_str());
  return kOk;
}

int cmd_sample(const SampleArgs& a) {
  if (a.samples == 0) throw UsageError("--samples must be >= 1");
  return checkpoint_dtype(a.checkpoint) == "float32" ? run_sample<float>(a) : run_sample<double>(a);
}

// -------------------------------------------------------------------- eval

struct EvalArgs {
  std::string checkpoint, data, split = "test", out;
  std::size_t samples = 1;
  std::uint64_t seed = 0;
  std::size_t bins = 50;
  bool oracle = false;
};

template <typename T>
int run_eval(const EvalArgs& a) {
  const auto ck = train::load_checkpoint<T>(a.checkpoint);
  const auto manifest = dataset::read_manifest(a.data);
  dataset::verify_dataset(a.data, manifest);
  const auto& scenes = a.split == "test" ? manifest.split.test : manifest.split.train;
  if (scenes.empty()) throw UsageError("split '" + a.split + "' has no scenes");
  const auto cases = parse_or_usage(
      [&] { return pipeline::predict_split(ck, a.data, manifest, scenes, a.samples, a.seed, a.oracle); });
  const auto report = metrics::build_report(cases, a.bins);
  metrics::write_report(a.out, report);
  echo_config(fs::path(a.out) / "resolved_config.json", {{"command", "eval"},
                                                          {"checkpoint", a.checkpoint},
                                                          {"data", a.data},
                                                          {"split", a.split},
                                                          {"samples_per_case", a.samples},
                                                          {"seed", a.seed},
                                                          {"bins", a.bins},
                                                          {"oracle", a.oracle}});
  std::printf("mae %.6f rmse %.6f rmse/tau spearman %.4f (%zu cases)\n", report.mae, report.rmse,
              report.rmse_tau_spearman, cases.size());
  return kOk;
}

int cmd_eval(const EvalArgs& a) {
  if (a.samples == 0) throw UsageError("--samples-per-case must be >= 1");
  if (a.bins == 0) throw UsageError("--bins must be >= 1");
  return checkpoint_dtype(a.checkpoint) == "float32" ? run_eval<float>(a) : run_eval<double>(a);
}

// ---------------------------------------------------------------- schedule

struct ScheduleArgs {
  std::size_t steps = 400;
  double beta_start = 1e-4;
  double beta_end = 0.02;
  std::string out;
};

int cmd_schedule(const ScheduleArgs& a) {
  const auto s = parse_or_usage([&] { return ddpm::make_schedule(a.steps, a.beta_start, a.beta_end); });
  std::ostringstream csv;
  csv << "t,beta,alpha,alpha_bar,sigma2\n";
  char line[160];
  for (std::size_t t = 1; t <= s.steps; ++t) {
    std::snprintf(line, sizeof line, "%zu,%.17g,%.17g,%.17g,%.17g\n", t, s.beta[t], s.alpha[t], s.alpha_bar[t],
                  s.sigma2[t]);
    csv << line;
  }
  if (a.out.empty()) {
    std::cout << csv.str();
  } else {
    io::write_text_file(a.out, csv.str());
    echo_config(a.out + ".config.json",
                {{"command", "schedule"}, {"T", a.steps}, {"beta_start", a.beta_start}, {"beta_end", a.beta_end}});
  }
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Conditional diffusion model for 2D smoke velocity fields"};
  app.require_subcommand(1);

  GenDataArgs gd;
  auto* gen = app.add_subcommand("gen-data", "simulate smoke scenes and write a dataset");
  gen->add_option("--out", gd.out, "output directory")->required();
  gen->add_option("--config", gd.config, "JSON config (sections sim, dataset)");
  gen->add_option("--scenes", gd.scenes, "number of scenes");
  gen->add_option("--size", gd.size, "grid height and width")->expected(2);
  gen->add_option("--total-time", gd.total_time, "simulated seconds per scene");
  gen->add_option("--record-every", gd.record_every, "seconds between snapshots");
  gen->add_option("--seed", gd.seed, "base seed");
  gen->add_option("--nu", gd.nu, "kinematic viscosity");
  gen->add_option("--eta", gd.eta, "buoyancy coefficient");
  gen->add_option("--dt", gd.dt, "solver step in seconds");
  gen->add_option("--cg-tol", gd.cg_tol, "pressure solve tolerance");
  gen->add_option("--cg-max-iter", gd.cg_max_iter, "pressure solve iteration cap");
  gen->add_option("--split", gd.split, "train and test ratio, e.g. 4 1")->expected(2);

  TrainArgs tr;
  auto* trn = app.add_subcommand("train", "train the denoiser on a dataset");
  trn->add_option("--data", tr.data, "dataset directory")->required();
  trn->add_option("--out", tr.out, "checkpoint directory")->required();
  trn->add_option("--config", tr.config, "JSON config (sections dtype, train, unet)");
  trn->add_option("--resume", tr.resume, "continue from this checkpoint directory");
  trn->add_option("--stop-at", tr.stop_at, "halt before this iteration");
  trn->add_option("--epochs", tr.epochs);
  trn->add_option("--batch-size", tr.batch_size);
  trn->add_option("--lr", tr.lr, "base learning rate");
  trn->add_option("--seed", tr.seed);
  trn->add_option("--steps", tr.steps, "diffusion steps T");
  trn->add_option("--checkpoint-every", tr.checkpoint_every, "iterations between checkpoints");
  trn->add_option("--time-input", tr.time_input, "integer or normalized");
  trn->add_option("--base-channels", tr.base_channels);
  trn->add_option("--levels", tr.levels);
  trn->add_option("--dtype", tr.dtype, "float32 or float64");
  trn->add_flag("--quiet", tr.quiet, "no progress lines");

  SampleArgs sa;
  auto* smp = app.add_subcommand("sample", "predict a velocity field for one initial density and time");
  smp->add_option("--checkpoint", sa.checkpoint)->required();
  smp->add_option("--rho0", sa.rho0, "tensor file (H, W) or a scene file")->required();
  smp->add_option("--tau", sa.tau, "query time in seconds")->required();
  smp->add_option("--seed", sa.seed);
  smp->add_option("--samples", sa.samples, "average this many samples");
  smp->add_option("--out", sa.out, "output tensor file")->required();

  EvalArgs ev;
  auto* evl = app.add_subcommand("eval", "score predictions on a dataset split");
  evl->add_option("--checkpoint", ev.checkpoint)->required();
  evl->add_option("--data", ev.data)->required();
  evl->add_option("--split", ev.split)->check(CLI::IsMember({"train", "test"}));
  evl->add_option("--samples-per-case", ev.samples, "samples averaged per (scene, tau)");
  evl->add_option("--seed", ev.seed);
  evl->add_option("--bins", ev.bins, "histogram bins");
  evl->add_option("--out", ev.out, "report directory")->required();
  evl->add_flag("--oracle", ev.oracle, "use the truth as the prediction");

  ScheduleArgs sc;
  auto* sch = app.add_subcommand("schedule", "write the noise schedule as CSV");
  sch->add_option("--T", sc.steps, "diffusion steps");
  sch->add_option("--beta-start", sc.beta_start);
  sch->add_option("--beta-end", sc.beta_end);
  sch->add_option("--out", sc.out, "CSV file (stdout if omitted)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << app.help() << '\n';
    return fail(kUsage, "usage", e.what());
  }

  try {
    if (*gen) return cmd_gen_data(gd);
    if (*trn) return cmd_train(tr);
    if (*smp) return cmd_sample(sa);
    if (*evl) return cmd_eval(ev);
    return cmd_schedule(sc);
  } catch (const UsageError& e) {
    return fail(kUsage, "usage", e.what());
  } catch (const train::TrainingError& e) {
    return fail(kNonFinite, "non-finite-loss", std::string(e.what()) + "; last good checkpoint in " +
                                                   e.checkpoint_dir().string());
  } catch (const fluid::SolverError& e) {
    return fail(kSolver, "solver", e.what());
  } catch (const io::FormatError& e) {
    return fail(kIo, std::string("format-") + io::to_string(e.kind()), e.what());
  } catch (const io::IoError& e) {
    return fail(kIo, "io", e.what());
  } catch (const dataset::DatasetError& e) {
    return fail(kIo, "dataset", e.what());
  } catch (const fs::filesystem_error& e) {
    return fail(kIo, "io", e.what());
  } catch (const json::exception& e) {
    return fail(kIo, "format", e.what());
  } catch (const std::exception& e) {
    return fail(kOther, "internal", e.what());
  }
}
