#include "fluiddiff/metrics.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <sstream>
#include <stdexcept>

#include "fluiddiff/io.hpp"
#include "json.hpp"

namespace fluiddiff::metrics {
namespace {

std::string num(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

void require_same(std::size_t a, std::size_t b, const char* what) {
  if (a != b) {
    throw std::invalid_argument(std::string(what) + ": size mismatch " + std::to_string(a) + " vs " +
                                std::to_string(b));
  }
}

struct Sums {
  double abs = 0.0;
  double sq = 0.0;
  std::size_t n = 0;

  void add(double d) {
    abs += std::abs(d);
    sq += d * d;
    ++n;
  }
  double mae() const { return n ? abs / static_cast<double>(n) : 0.0; }
  double rmse() const { return n ? std::sqrt(sq / static_cast<double>(n)) : 0.0; }
};

std::vector<double> ranks(std::span<const double> x) {
  std::vector<std::size_t> idx(x.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return x[a] < x[b]; });
  std::vector<double> r(x.size());
  for (std::size_t i = 0; i < idx.size();) {
    std::size_t j = i;
    while (j + 1 < idx.size() && x[idx[j + 1]] == x[idx[i]]) ++j;
    const double avg = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t k = i; k <= j; ++k) r[idx[k]] = avg;
    i = j + 1;
  }
  return r;
}

std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> out;
  std::string cell;
  std::istringstream in(line);
  while (std::getline(in, cell, ',')) out.push_back(cell);
  return out;
}

double parse_double(const std::string& s) {
  char* end = nullptr;
  const double v = std::strtod(s.c_str(), &end);
  if (s.empty() || *end != '\0') throw std::invalid_argument("not a number: '" + s + "'");
  return v;
}

}  // namespace

double mae(std::span<const double> pred, std::span<const double> truth) {
  require_same(pred.size(), truth.size(), "mae");
  Sums s;
  for (std::size_t i = 0; i < pred.size(); ++i) s.add(pred[i] - truth[i]);
  return s.mae();
}

double rmse(std::span<const double> pred, std::span<const double> truth) {
  require_same(pred.size(), truth.size(), "rmse");
  Sums s;
  for (std::size_t i = 0; i < pred.size(); ++i) s.add(pred[i] - truth[i]);
  return s.rmse();
}

namespace {

Sums grid_sums(const std::vector<Tensor<double>>& pred, const std::vector<Tensor<double>>& truth) {
  require_same(pred.size(), truth.size(), "grid set");
  Sums s;
  for (std::size_t g = 0; g < pred.size(); ++g) {
    if (pred[g].shape() != truth[g].shape()) {
      throw std::invalid_argument("grid " + std::to_string(g) + ": shape " + shape_str(pred[g].shape()) +
                                  " vs " + shape_str(truth[g].shape()));
    }
    for (std::size_t i = 0; i < pred[g].numel(); ++i) s.add(pred[g][i] - truth[g][i]);
  }
  return s;
}

}  // namespace

double mae(const std::vector<Tensor<double>>& pred, const std::vector<Tensor<double>>& truth) {
  return grid_sums(pred, truth).mae();
}

double rmse(const std::vector<Tensor<double>>& pred, const std::vector<Tensor<double>>& truth) {
  return grid_sums(pred, truth).rmse();
}

std::vector<TauError> rmse_per_tau(const GridsByTau& pred, const GridsByTau& truth) {
  std::string missing;
  for (const auto& [tau, g] : pred) {
    if (!truth.count(tau)) missing += " " + num(tau) + " (truth)";
  }
  for (const auto& [tau, g] : truth) {
    if (!pred.count(tau)) missing += " " + num(tau) + " (prediction)";
  }
  if (!missing.empty()) throw std::invalid_argument("rmse_per_tau: taus missing from one side:" + missing);
  std::vector<TauError> out;
  for (const auto& [tau, p] : pred) {
    const Sums s = grid_sums(p, truth.at(tau));
    out.push_back({tau, s.n, s.mae(), s.rmse()});
  }
  return out;
}

Histogram histogram(std::span<const double> values, std::size_t n_bins, double lo, double hi) {
  if (n_bins < 1) throw std::invalid_argument("histogram: n_bins must be >= 1");
  if (!(lo < hi)) throw std::invalid_argument("histogram: need lo < hi");
  Histogram h;
  const double width = (hi - lo) / static_cast<double>(n_bins);
  h.edges.resize(n_bins + 1);
  for (std::size_t i = 0; i <= n_bins; ++i) h.edges[i] = lo + width * static_cast<double>(i);
  h.edges.back() = hi;
  std::vector<std::size_t> counts(n_bins, 0);
  for (double v : values) {
    const double pos = std::floor((v - lo) / width);
    const std::size_t bin =
        pos < 0.0 ? 0 : std::min(n_bins - 1, static_cast<std::size_t>(std::min(pos, static_cast<double>(n_bins))));
    ++counts[bin];
  }
  h.densities.assign(n_bins, 0.0);
  if (!values.empty()) {
    for (std::size_t i = 0; i < n_bins; ++i) {
      h.densities[i] = static_cast<double>(counts[i]) / (static_cast<double>(values.size()) * (h.edges[i + 1] - h.edges[i]));
    }
  }
  return h;
}

double spearman(std::span<const double> x, std::span<const double> y) {
  require_same(x.size(), y.size(), "spearman");
  if (x.size() < 2) return 0.0;
  const auto rx = ranks(x), ry = ranks(y);
  const double n = static_cast<double>(x.size());
  const double mx = std::accumulate(rx.begin(), rx.end(), 0.0) / n;
  const double my = std::accumulate(ry.begin(), ry.end(), 0.0) / n;
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < rx.size(); ++i) {
    sxy += (rx[i] - mx) * (ry[i] - my);
    sxx += (rx[i] - mx) * (rx[i] - mx);
    syy += (ry[i] - my) * (ry[i] - my);
  }
  if (sxx == 0.0 || syy == 0.0) return 0.0;
  return sxy / std::sqrt(sxx * syy);
}

MetricsReport build_report(const std::vector<EvalCase>& cases, std::size_t n_bins) {
  if (cases.empty()) throw std::invalid_argument("build_report: no cases");
  const Shape shape = cases.front().truth.shape();
  if (shape.size() != 3 || shape[0] != 2) throw std::invalid_argument("build_report: cases must be (2, H, W)");
  const std::size_t plane = shape[1] * shape[2];

  // [component][tau] sums; component 2 is both.
  std::map<double, std::array<Sums, 3>> by_tau;
  std::array<Sums, 3> total;
  std::array<std::vector<double>, 2> pred_values, truth_values;
  for (const auto& c : cases) {
    if (c.pred.shape() != shape || c.truth.shape() != shape) {
      throw std::invalid_argument("build_report: inconsistent case shapes");
    }
    auto& row = by_tau[c.tau];
    for (std::size_t comp = 0; comp < 2; ++comp) {
      for (std::size_t i = comp * plane; i < (comp + 1) * plane; ++i) {
        const double d = c.pred[i] - c.truth[i];
        row[comp].add(d);
        row[2].add(d);
        total[comp].add(d);
        total[2].add(d);
        pred_values[comp].push_back(c.pred[i]);
        truth_values[comp].push_back(c.truth[i]);
      }
    }
  }

  static const char* kNames[3] = {"ux", "uy", "all"};
  MetricsReport r;
  r.mae = total[2].mae();
  r.rmse = total[2].rmse();
  std::vector<double> taus, tau_rmse;
  for (const auto& [tau, sums] : by_tau) {
    for (std::size_t comp = 0; comp < 3; ++comp) r.rows.push_back({num(tau), kNames[comp], sums[comp].mae(), sums[comp].rmse()});
    taus.push_back(tau);
    tau_rmse.push_back(sums[2].rmse());
  }
  for (std::size_t comp = 0; comp < 3; ++comp) r.rows.push_back({"all", kNames[comp], total[comp].mae(), total[comp].rmse()});
  r.rmse_tau_spearman = spearman(taus, tau_rmse);
  const double global_mse = total[2].rmse() * total[2].rmse();
  double weighted_mean = 0.0;
  for (const auto& [tau, sums] : by_tau) {
    weighted_mean += static_cast<double>(sums[2].n) / static_cast<double>(total[2].n) * (sums[2].rmse() * sums[2].rmse());
  }
  r.mse_identity_error = std::abs(global_mse - weighted_mean);

  for (std::size_t comp = 0; comp < 2; ++comp) {
    const auto [mn, mx] = std::minmax_element(truth_values[comp].begin(), truth_values[comp].end());
    double lo = *mn, hi = *mx;
    if (!(lo < hi)) {
      lo -= 0.5;
      hi += 0.5;
    }
    const Histogram hp = histogram(pred_values[comp], n_bins, lo, hi);
    const Histogram ht = histogram(truth_values[comp], n_bins, lo, hi);
    r.histograms.push_back({kNames[comp], ht.edges, hp.densities, ht.densities});
  }
  return r;
}

std::string format_metrics_csv(const std::vector<MetricsRow>& rows) {
  std::string s = "tau,component,mae,rmse\n";
  for (const auto& r : rows) s += r.tau + "," + r.component + "," + num(r.mae) + "," + num(r.rmse) + "\n";
  return s;
}

std::vector<MetricsRow> parse_metrics_csv(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line) || line != "tau,component,mae,rmse") {
    throw std::invalid_argument("metrics.csv: missing header");
  }
  std::vector<MetricsRow> rows;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto cells = split_csv(line);
    if (cells.size() != 4) throw std::invalid_argument("metrics.csv: bad row '" + line + "'");
    rows.push_back({cells[0], cells[1], parse_double(cells[2]), parse_double(cells[3])});
  }
  return rows;
}

std::string format_histogram_csv(const ComponentHistogram& h) {
  std::string s = "bin_lo,bin_hi,density_pred,density_truth\n";
  for (std::size_t i = 0; i + 1 < h.edges.size(); ++i) {
    s += num(h.edges[i]) + "," + num(h.edges[i + 1]) + "," + num(h.density_pred[i]) + "," + num(h.density_truth[i]) + "\n";
  }
  return s;
}

ComponentHistogram parse_histogram_csv(const std::string& component, const std::string& text) {
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line) || line != "bin_lo,bin_hi,density_pred,density_truth") {
    throw std::invalid_argument("histogram csv: missing header");
  }
  ComponentHistogram h;
  h.component = component;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto cells = split_csv(line);
    if (cells.size() != 4) throw std::invalid_argument("histogram csv: bad row '" + line + "'");
    const double lo = parse_double(cells[0]), hi = parse_double(cells[1]);
    if (h.edges.empty()) h.edges.push_back(lo);
    if (h.edges.back() != lo) throw std::invalid_argument("histogram csv: bins are not contiguous");
    h.edges.push_back(hi);
    h.density_pred.push_back(parse_double(cells[2]));
    h.density_truth.push_back(parse_double(cells[3]));
  }
  return h;
}

void write_report(const std::filesystem::path& dir, const MetricsReport& r) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw io::IoError("cannot create " + dir.string() + ": " + ec.message());
  io::write_text_file(dir / "metrics.csv", format_metrics_csv(r.rows));
  for (const auto& h : r.histograms) io::write_text_file(dir / ("hist_" + h.component + ".csv"), format_histogram_csv(h));
  const nlohmann::json summary{
      {"mae", r.mae},
      {"rmse", r.rmse},
      {"rmse_tau_spearman", r.rmse_tau_spearman},
      {"mse_identity_error", r.mse_identity_error},
      {"reference",
       {{"mae", r.reference_mae},
        {"rmse", r.reference_rmse},
        {"note", "published full-scale model (64x64, 40k snapshots); annotation only, not comparable"}}},
  };
  io::write_text_file(dir / "summary.json", summary.dump(2) + "\n");
}

}  // namespace fluiddiff::metrics
