#pragma once

// Empirical orthogonal functions of simulated-minus-observed radiance
// residuals, and the randomly scaled EOF perturbation
//   y'_sim = y_sim + sum_k c_k e_k        (per band)
// used to harden training radiances against sim-to-real differences.

#include <Eigen/Dense>
#include <array>
#include <string>
#include <vector>

#include "json.hpp"
#include "xco2/scenegen.hpp"

namespace xco2::sim2real {

using scenegen::Band;
using scenegen::kBandCount;

/// Rows are soundings, columns are channels of one band: y_sim - y_obs.
struct ResidualMatrix {
  Band band = Band::o2a;
  Eigen::MatrixXd values;
};

struct CoefficientFit {
  double mean = 0.0;
  double sd = 0.0;
};

struct BandEOFs {
  Band band = Band::o2a;
  Eigen::VectorXd center;              // column means removed before the SVD
  Eigen::MatrixXd vectors;             // channels x K, unit-norm columns e_k
  std::vector<double> singular_values; // K leading values, non-increasing
  std::vector<double> explained;       // fraction of total (centered) variance per k
  std::vector<CoefficientFit> coefficients;  // per k

  std::size_t channels() const { return static_cast<std::size_t>(vectors.rows()); }
  std::size_t k() const { return static_cast<std::size_t>(vectors.cols()); }
  /// center + projection onto the retained EOFs.
  Eigen::MatrixXd reconstruct(const Eigen::MatrixXd& m) const;
};

struct EOFSet {
  std::array<BandEOFs, kBandCount> bands;
};

enum class PerturbMode { none, fixed, random };
std::string mode_name(PerturbMode m);
PerturbMode mode_from_name(const std::string& s);

/// Build the per-band residual matrices from paired simulated/observed datasets
/// (same scenes, same order).
std::array<ResidualMatrix, kBandCount> residual_matrices(const scenegen::Dataset& simulated,
                                                         const scenegen::Dataset& observed);

/// Thin SVD of the mean-centered residuals; keeps the first k right singular
/// vectors. Coefficient fits start out as N(0, 0).
BandEOFs fit_eofs(const ResidualMatrix& m, std::size_t k);

/// Gaussian (mean, Bessel sd) fit; needs at least 10 samples.
CoefficientFit fit_coefficient_distribution(std::span<const double> projections);

/// Fits c_{j,k} on held-out residuals. Projections are taken of
/// (y_obs - y_sim) = -residual, so that adding sum_k c_k e_k to a simulated
/// spectrum moves it toward the observed one.
void fit_coefficients(EOFSet& eofs, const std::array<ResidualMatrix, kBandCount>& holdout);

/// Delta sum_k c_k e_k for one sounding; `random` draws c ~ N(mean, sd)
/// independently per (band, k), `fixed` uses c = mean, `none` returns zeros.
std::array<std::vector<double>, kBandCount> perturbation_delta(const EOFSet& eofs, Rng& rng,
                                                               PerturbMode mode);

scenegen::Radiance perturb_radiance(const scenegen::Radiance& y_sim, const EOFSet& eofs, Rng& rng,
                                    PerturbMode mode = PerturbMode::random);

/// Applies perturb_radiance to the radiance part of every record, with the
/// per-sounding stream derive_seed(seed, id).
scenegen::Dataset perturb_dataset(const scenegen::Dataset& ds, const EOFSet& eofs,
                                  PerturbMode mode, std::uint64_t seed);

/// Max |e_i . e_j - delta_ij| over all bands.
double orthonormality_error(const EOFSet& eofs);

// EOF1: "EOF1", u32 version, u32 bands, then per band u32 id, u32 channels,
// u32 K, f64 center[channels], f64 singular[K], f64 explained[K],
// f64 vectors[K][channels], f64 coef_mean[K], f64 coef_sd[K].
void save_eofs(const std::string& path, const EOFSet& eofs);
/// Rejects files whose eigenvectors are not orthonormal to 1e-10.
EOFSet load_eofs(const std::string& path);

nlohmann::json eof_summary(const EOFSet& eofs);

}  // namespace xco2::sim2real
