#pragma once
// Prediction-error metrics, per-time error series, value histograms and the
// CSV/JSON report written by evaluation.
//
// metrics.csv       tau,component,mae,rmse   (tau "all" for the totals)
// hist_<c>.csv      bin_lo,bin_hi,density_pred,density_truth
// summary.json      totals, rank correlation of rmse with tau, reference
//                   values of the published full-scale model (annotation)

#include <cstddef>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "fluiddiff/tensor.hpp"

namespace fluiddiff::metrics {

/// Published full-scale errors, carried for context only.
inline constexpr double kReferenceMae = 0.1975;
inline constexpr double kReferenceRmse = 0.3137;

double mae(std::span<const double> pred, std::span<const double> truth);
double rmse(std::span<const double> pred, std::span<const double> truth);
double mae(const std::vector<Tensor<double>>& pred, const std::vector<Tensor<double>>& truth);
double rmse(const std::vector<Tensor<double>>& pred, const std::vector<Tensor<double>>& truth);

struct TauError {
  double tau = 0.0;
  std::size_t count = 0;  // elements
  double mae = 0.0;
  double rmse = 0.0;
};

using GridsByTau = std::map<double, std::vector<Tensor<double>>>;

/// One entry per tau, ascending. Throws std::invalid_argument listing the
/// taus present on only one side.
std::vector<TauError> rmse_per_tau(const GridsByTau& pred, const GridsByTau& truth);

struct Histogram {
  std::vector<double> edges;      // n_bins + 1
  std::vector<double> densities;  // sum(density * width) = 1
};

/// Equal-width bins over [lo, hi]; values outside are counted in the end
/// bins. Throws std::invalid_argument unless n_bins >= 1 and lo < hi.
Histogram histogram(std::span<const double> values, std::size_t n_bins, double lo, double hi);

/// Spearman rank correlation with average ranks for ties; 0 if either side
/// is constant.
double spearman(std::span<const double> x, std::span<const double> y);

struct EvalCase {
  double tau = 0.0;
  Tensor<double> pred;   // (2, H, W), physical units
  Tensor<double> truth;
};

struct MetricsRow {
  std::string tau;        // decimal value or "all"
  std::string component;  // "ux", "uy" or "all"
  double mae = 0.0;
  double rmse = 0.0;
  bool operator==(const MetricsRow&) const = default;
};

struct ComponentHistogram {
  std::string component;
  std::vector<double> edges;
  std::vector<double> density_pred;
  std::vector<double> density_truth;
};

struct MetricsReport {
  double mae = 0.0;   // both components, all taus
  double rmse = 0.0;
  std::vector<MetricsRow> rows;
  std::vector<ComponentHistogram> histograms;
  double rmse_tau_spearman = 0.0;
  /// |global MSE - element-weighted mean of per-tau MSEs|.
  double mse_identity_error = 0.0;
  double reference_mae = kReferenceMae;
  double reference_rmse = kReferenceRmse;
};

/// Histogram range per component defaults to the truth min/max.
MetricsReport build_report(const std::vector<EvalCase>& cases, std::size_t n_bins = 50);

std::string format_metrics_csv(const std::vector<MetricsRow>& rows);
std::vector<MetricsRow> parse_metrics_csv(const std::string& text);
std::string format_histogram_csv(const ComponentHistogram& h);
ComponentHistogram parse_histogram_csv(const std::string& component, const std::string& text);

/// Writes metrics.csv, hist_ux.csv, hist_uy.csv and summary.json.
void write_report(const std::filesystem::path& dir, const MetricsReport& report);

}  // namespace fluiddiff::metrics
