#pragma once

// Synthetic sounding generator: scene sampling, a three-band Beer-Lambert
// forward model, instrument noise, sim-to-real distortion, resampling to the
// common grid and XCD1 dataset files.

#include <array>
#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "xco2/common.hpp"

namespace xco2::scenegen {

enum class Band : std::uint32_t { o2a = 0, wco2 = 1, sco2 = 2 };
inline constexpr std::size_t kBandCount = 3;
inline constexpr std::size_t kStateSize = 5;  // xco2, albedo x3, aerosol
inline constexpr std::array<const char*, kBandCount> kBandNames{"O2A", "WCO2", "SCO2"};

struct Scene {
  double xco2 = 400.0;                       // ppm
  std::array<double, kBandCount> albedo{};   // per band, (0, 1]
  double aerosol = 0.0;                      // optical-depth-like, >= 0
  double sza = 30.0;                         // degrees, [0, 85)
  double p_surf = 1000.0;                    // hPa

  /// Retrieved state (xco2, albedo_O2A, albedo_WCO2, albedo_SCO2, aerosol).
  std::array<double, kStateSize> state() const;
  static Scene from_state(std::span<const double> x, double sza, double p_surf);
};

void validate(const Scene& scene);

struct WavelengthGrid {
  Band band = Band::o2a;
  std::vector<double> wavelengths;  // micrometres, strictly increasing
};
using WavelengthGrids = std::array<WavelengthGrid, kBandCount>;

void validate(const WavelengthGrids& grids);

struct Radiance {
  std::array<std::vector<double>, kBandCount> bands;

  std::size_t size() const;
  std::vector<double> flat() const;
  static Radiance from_flat(std::span<const double> v, std::span<const std::size_t> counts);
};

/// Diagonal instrument noise: sd = floor + frac * signal.
struct NoiseModel {
  double floor = 1e-4;
  double frac = 0.005;

  double sd(double signal) const { return floor + frac * std::abs(signal); }
  std::array<std::vector<double>, kBandCount> std_devs(const Radiance& signal) const;
};

/// One Gaussian absorption line: optical depth `depth * exp(-0.5 ((l - center)/width)^2)`.
struct AbsorptionLine {
  double center = 0.0;
  double width = 0.0;
  double depth = 0.0;
};

struct BandSpectroscopy {
  double center = 0.0;       // um
  double half_width = 0.0;   // um
  double solar_level = 1.0;
  std::vector<AbsorptionLine> co2_lines;  // depth per ppm
  std::vector<AbsorptionLine> air_lines;  // depth per hPa
  double aerosol_continuum = 0.0;         // depth per unit aerosol
};

struct Spectroscopy {
  std::array<BandSpectroscopy, kBandCount> bands;
  /// Aerosol scattering shortens the mean photon path, which shallows the CO2
  /// lines: tau_aer = continuum - path_shortening * tau_co2 (ppm per unit aerosol).
  double path_shortening = 15.0;

  static Spectroscopy standard();
};

/// Toy forward model:
///   y_j(l) = albedo_j cos(sza) S_j(l) exp(-xco2 tau_co2 - p_surf tau_air - aerosol tau_aer)
class ToyForwardModel {
 public:
  explicit ToyForwardModel(Spectroscopy spectroscopy = Spectroscopy::standard());

  const Spectroscopy& spectroscopy() const { return spec_; }

  double tau_co2(Band b, double wavelength) const;
  double tau_air(Band b, double wavelength) const;
  double tau_aerosol(Band b, double wavelength) const;
  double solar(Band b, double wavelength) const;

  /// Validates the scene first.
  Radiance evaluate(const Scene& scene, const WavelengthGrids& grids) const;
  /// No range checks; used inside iterative solvers that may step outside the
  /// physical box.
  Radiance evaluate_unchecked(const Scene& scene, const WavelengthGrids& grids) const;
  /// d(flat radiance)/d(state), row-major [channels x kStateSize].
  std::vector<double> jacobian(const Scene& scene, const WavelengthGrids& grids) const;

  WavelengthGrids common_grids(std::size_t channels) const;
  /// Instrument grid: common grid extended by one channel on each side and
  /// shifted by `shift` channel spacings.
  WavelengthGrids native_grids(std::size_t channels, double shift) const;

 private:
  Spectroscopy spec_;
};

Radiance toy_forward(const ToyForwardModel& fm, const Scene& scene, const WavelengthGrids& grids);

Radiance add_noise(const Radiance& radiance, const NoiseModel& noise, Rng& rng);

/// Piecewise-linear interpolation per band. Throws on extrapolation.
Radiance resample_to_common_grid(const Radiance& radiance, const WavelengthGrids& source,
                                 const WavelengthGrids& target);

struct SceneRanges {
  double xco2_min = 380.0, xco2_max = 440.0;
  double albedo_min = 0.05, albedo_max = 1.0;
  double sza_min = 0.0, sza_max = 70.0;
  double psurf_min = 600.0, psurf_max = 1050.0;
  // Two aerosol regimes: clean air ~ Exp(clean_mean), plumes ~ N(mean, sd)
  // truncated at zero.
  double aerosol_clean_mean = 0.05;
  double aerosol_plume_fraction = 0.3;
  double aerosol_plume_mean = 0.55;
  double aerosol_plume_sd = 0.07;

  void validate() const;
  double aerosol_density(double a) const;
};

Scene sample_scene(const SceneRanges& ranges, Rng& rng);

/// Systematic sim-to-real distortion applied to noiseless radiance:
///   y_obs = (1 + multiplicative_j) y + level_j * amplitude * sum_l a_l d_{j,l}
/// with a_l ~ N(shape_mean_l, shape_sd_l) drawn per sounding and level_j the
/// band-mean radiance. Shapes: spectral tilt, absorption-line pattern, curvature.
struct Discrepancy {
  std::array<double, kBandCount> multiplicative{0.0, 0.0, 0.0};
  double amplitude = 0.0;
  std::array<double, 3> shape_mean{0.0, 1.0, 0.5};
  std::array<double, 3> shape_sd{1.0, 1.0, 1.0};
  double grid_shift = 0.0;  // instrument grid offset in channel spacings

  bool is_zero() const;
  static Discrepancy none() { return {}; }
  static Discrepancy standard();
};

/// Spectral shape d_{j,l} sampled on `grid`.
std::vector<double> discrepancy_shape(const ToyForwardModel& fm, Band band, std::size_t shape,
                                      std::span<const double> grid);

Radiance apply_discrepancy(const ToyForwardModel& fm, const Radiance& radiance,
                           const WavelengthGrids& grids, const Discrepancy& d, Rng& rng);

enum class ForwardKind { beer_lambert, linear };

struct GeneratorConfig {
  std::size_t channels_per_band = 32;
  SceneRanges ranges;
  NoiseModel noise;
  Discrepancy discrepancy = Discrepancy::standard();
  ForwardKind forward = ForwardKind::beer_lambert;
};

/// Reference state used to linearize the toy model for ForwardKind::linear.
Scene linearization_reference(double sza, double p_surf);
Radiance linearized_forward(const ToyForwardModel& fm, const Scene& scene,
                            const WavelengthGrids& grids);

// eof_pairs tags the auxiliary sim/obs residual files used for EOF fitting.
enum class Split : std::uint32_t { train = 0, val = 1, test = 2, finetune = 3, eof_pairs = 4 };
std::string split_name(Split s);
Split split_from_name(const std::string& name);

/// Scene ids are unique across splits: (split << 40) + index.
std::uint64_t scene_id(Split split, std::size_t index);

/// Records hold raw (unnormalized) covariates
/// [radiance O2A | WCO2 | SCO2 on the common grid, sza, p_surf].
struct Dataset {
  Split split = Split::train;
  WavelengthGrids grids;
  std::size_t feature_count = 0;
  std::vector<std::uint64_t> ids;
  std::vector<double> labels;
  std::vector<double> features;  // row-major [n x feature_count]

  std::size_t size() const { return ids.size(); }
  std::span<const double> row(std::size_t i) const {
    return {features.data() + i * feature_count, feature_count};
  }
  std::span<double> row(std::size_t i) {
    return {features.data() + i * feature_count, feature_count};
  }
  std::size_t radiance_count() const { return feature_count - 2; }
  double sza(std::size_t i) const { return row(i)[feature_count - 2]; }
  double p_surf(std::size_t i) const { return row(i)[feature_count - 1]; }
  void push_back(std::uint64_t id, double label, std::span<const double> features);
  Dataset subset(std::span<const std::size_t> rows) const;
};

/// One generated sounding, before dataset assembly.
struct Sounding {
  Scene scene;
  Radiance simulated;  // noiseless, common grid
  Radiance observed;   // distorted + noisy, resampled to the common grid
};

Sounding simulate_sounding(const ToyForwardModel& fm, const GeneratorConfig& cfg,
                           bool apply_distortion, Rng& rng);

std::vector<double> covariates(const Radiance& radiance, double sza, double p_surf);

/// Simulated split: no distortion. Deterministic in (seed, split, n) and in
/// `workers`.
Dataset build_dataset(std::size_t n, const GeneratorConfig& cfg, std::uint64_t seed, Split split,
                      unsigned workers = 1);
/// Observation-like split: covariates carry the configured discrepancy, labels
/// stay exact truth.
Dataset build_finetune_set(std::size_t n, const GeneratorConfig& cfg, std::uint64_t seed,
                           Split split = Split::finetune, unsigned workers = 1);

/// Paired noiseless-simulated / observed radiances for residual (EOF) fitting.
struct ResidualPairs {
  Dataset simulated;
  Dataset observed;
};
ResidualPairs build_residual_pairs(std::size_t n, const GeneratorConfig& cfg, std::uint64_t seed,
                                   unsigned workers = 1);

/// Per-feature standardization, fitted on the training split only.
struct Normalization {
  std::vector<double> mean;
  std::vector<double> sd;

  static Normalization fit(const Dataset& train);
  void normalize(std::span<double> v) const;
  void denormalize(std::span<double> v) const;
  std::vector<double> normalized(std::span<const double> v) const;
  nlohmann::json to_json() const;
  static Normalization from_json(const nlohmann::json& j);
};

// XCD1: "XCD1", u32 version, u32 split, u64 records, u32 features, u32 bands,
// per band u32 id, u32 points, f64 wavelengths; then per record u64 id,
// f64 label, f64 features.
void save_dataset(const std::string& path, const Dataset& ds);
Dataset load_dataset(const std::string& path);

}  // namespace xco2::scenegen
