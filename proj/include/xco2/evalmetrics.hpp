#pragma once

// Point and distributional scores for retrievals: RMSE, bias, Gaussian
// intervals, calibration curves, miscalibration area and density estimates.

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"

namespace xco2::evalmetrics {

struct PosteriorSummary {
  std::uint64_t id = 0;
  std::vector<double> samples;
  double mean = 0.0;
  double std = 0.0;  // Bessel-corrected
  double truth = 0.0;

  /// Moments from samples (std = 0 for a single sample).
  static PosteriorSummary from_samples(std::uint64_t id, std::vector<double> samples, double truth);
};

double rmse(std::span<const double> preds, std::span<const double> truths);

struct BiasStats {
  double mean = 0.0;
  double std = 0.0;
};
BiasStats bias_stats(std::span<const double> preds, std::span<const double> truths);

/// Standard-normal quantile: Acklam's rational approximation polished by one
/// Halley step against erfc.
double normal_quantile(double p);
/// Two-sided z with P(|Z| <= z) = p.
double two_sided_z(double p);

std::pair<double, double> gaussian_interval(const PosteriorSummary& s, double coverage);

struct CalibrationCurve {
  std::vector<double> expected;  // 0.01 .. 0.99
  std::vector<double> observed;
};

std::vector<double> coverage_grid();
CalibrationCurve calibration_curve(std::span<const PosteriorSummary> summaries);
/// Trapezoid of |observed - expected| over the grid, divided by the grid span.
double miscalibration_area(const CalibrationCurve& curve);

struct DensityOptions {
  std::size_t bins = 16;
  std::optional<std::pair<double, double>> range;  // histogram range; sample range when unset
  std::optional<double> bandwidth;                 // Silverman when unset
  std::size_t grid_points = 512;
};

struct DensityEstimate {
  std::vector<double> bin_edges;      // bins + 1
  std::vector<double> histogram;      // density; sum * width = 1 over in-range samples
  std::vector<double> grid;
  std::vector<double> kde;
  double bandwidth = 0.0;
  std::size_t modes = 0;              // strict local maxima (or flat tops) of the KDE
};

double silverman_bandwidth(std::span<const double> samples);
DensityEstimate density_estimate(std::span<const double> samples, const DensityOptions& options = {});

struct MetricsReport {
  std::string method;
  std::size_t n = 0;
  double rmse = 0.0;
  double bias_mean = 0.0;
  double bias_std = 0.0;
  double miscalibration_area = 0.0;  // NaN for methods without uncertainty

  nlohmann::json to_json() const;
  static std::string csv_header();
  std::string csv_row() const;
};

MetricsReport make_report(const std::string& method, std::span<const PosteriorSummary> summaries);

std::string calibration_csv(const CalibrationCurve& curve);
std::string calibration_svg(const std::vector<std::pair<std::string, CalibrationCurve>>& curves);
std::string density_svg(const DensityEstimate& d, const std::string& title,
                        std::optional<double> truth = std::nullopt);

}  // namespace xco2::evalmetrics
