#include "xco2/scenegen.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>

namespace xco2::scenegen {

namespace {

constexpr double kDeg = std::numbers::pi / 180.0;

double line_sum(const std::vector<AbsorptionLine>& lines, double wl) {
  double tau = 0.0;
  for (const auto& l : lines) {
    const double u = (wl - l.center) / l.width;
    tau += l.depth * std::exp(-0.5 * u * u);
  }
  return tau;
}

std::vector<AbsorptionLine> make_lines(double center, double half_width, double width,
                                       std::initializer_list<std::pair<double, double>> spec) {
  std::vector<AbsorptionLine> out;
  for (auto [pos, depth] : spec) out.push_back({center + pos * half_width, width, depth});
  return out;
}

std::size_t band_index(Band b) { return static_cast<std::size_t>(b); }

}  // namespace

// ---------------------------------------------------------------- scenes

std::array<double, kStateSize> Scene::state() const {
  return {xco2, albedo[0], albedo[1], albedo[2], aerosol};
}

Scene Scene::from_state(std::span<const double> x, double sza_deg, double psurf) {
  require(x.size() == kStateSize, ErrorKind::validation, "scene state must have 5 entries");
  Scene s;
  s.xco2 = x[0];
  s.albedo = {x[1], x[2], x[3]};
  s.aerosol = x[4];
  s.sza = sza_deg;
  s.p_surf = psurf;
  return s;
}

void validate(const Scene& s) {
  auto check = [](bool ok, const std::string& msg) {
    require(ok, ErrorKind::validation, "scene out of range: " + msg);
  };
  check(std::isfinite(s.xco2) && s.xco2 >= 380.0 && s.xco2 <= 440.0,
        "xco2 " + std::to_string(s.xco2) + " not in [380, 440]");
  check(std::isfinite(s.sza) && s.sza >= 0.0 && s.sza < 85.0,
        "sza " + std::to_string(s.sza) + " not in [0, 85)");
  check(std::isfinite(s.p_surf) && s.p_surf >= 600.0 && s.p_surf <= 1050.0,
        "p_surf " + std::to_string(s.p_surf) + " not in [600, 1050]");
  for (std::size_t j = 0; j < kBandCount; ++j)
    check(std::isfinite(s.albedo[j]) && s.albedo[j] > 0.0 && s.albedo[j] <= 1.0,
          std::string("albedo ") + kBandNames[j] + " not in (0, 1]");
  check(std::isfinite(s.aerosol) && s.aerosol >= 0.0, "aerosol negative");
}

void validate(const WavelengthGrids& grids) {
  for (std::size_t j = 0; j < kBandCount; ++j) {
    const auto& g = grids[j];
    require(g.band == static_cast<Band>(j), ErrorKind::validation, "grid bands out of order");
    require(g.wavelengths.size() >= 8, ErrorKind::validation,
            std::string("grid ") + kBandNames[j] + " needs at least 8 points");
    for (std::size_t i = 1; i < g.wavelengths.size(); ++i)
      require(g.wavelengths[i] > g.wavelengths[i - 1], ErrorKind::validation,
              std::string("grid ") + kBandNames[j] + " is not strictly increasing");
  }
}

std::size_t Radiance::size() const {
  std::size_t n = 0;
  for (const auto& b : bands) n += b.size();
  return n;
}

std::vector<double> Radiance::flat() const {
  std::vector<double> out;
  out.reserve(size());
  for (const auto& b : bands) out.insert(out.end(), b.begin(), b.end());
  return out;
}

Radiance Radiance::from_flat(std::span<const double> v, std::span<const std::size_t> counts) {
  require(counts.size() == kBandCount, ErrorKind::validation, "radiance: need 3 band counts");
  Radiance r;
  std::size_t off = 0;
  for (std::size_t j = 0; j < kBandCount; ++j) {
    require(off + counts[j] <= v.size(), ErrorKind::validation, "radiance: flat vector too short");
    r.bands[j].assign(v.begin() + static_cast<std::ptrdiff_t>(off),
                      v.begin() + static_cast<std::ptrdiff_t>(off + counts[j]));
    off += counts[j];
  }
  require(off == v.size(), ErrorKind::validation, "radiance: flat vector too long");
  return r;
}

std::array<std::vector<double>, kBandCount> NoiseModel::std_devs(const Radiance& signal) const {
  std::array<std::vector<double>, kBandCount> out;
  for (std::size_t j = 0; j < kBandCount; ++j) {
    out[j].reserve(signal.bands[j].size());
    for (double v : signal.bands[j]) out[j].push_back(sd(v));
  }
  return out;
}

// ---------------------------------------------------------------- forward model

Spectroscopy Spectroscopy::standard() {
  Spectroscopy s;
  auto& o2a = s.bands[0];
  o2a.center = 0.765;
  o2a.half_width = 0.006;
  o2a.solar_level = 1.0;
  o2a.air_lines = make_lines(o2a.center, o2a.half_width, 0.0005,
                             {{-0.7, 8e-4}, {-0.35, 1.2e-3}, {0.05, 1.0e-3}, {0.4, 6e-4},
                              {0.75, 9e-4}});
  o2a.aerosol_continuum = 0.30;

  auto& w = s.bands[1];
  w.center = 1.610;
  w.half_width = 0.008;
  w.solar_level = 0.7;
  w.co2_lines = make_lines(w.center, w.half_width, 0.0006,
                           {{-0.75, 9e-4}, {-0.4, 1.4e-3}, {0.0, 1.1e-3}, {0.3, 7e-4},
                            {0.7, 1.2e-3}});
  w.air_lines = make_lines(w.center, w.half_width, 0.0006, {{0.5, 1e-4}});
  w.aerosol_continuum = 0.22;

  auto& st = s.bands[2];
  st.center = 2.060;
  st.half_width = 0.010;
  st.solar_level = 0.45;
  st.co2_lines = make_lines(st.center, st.half_width, 0.0008,
                            {{-0.65, 2.0e-3}, {-0.2, 2.6e-3}, {0.25, 1.8e-3}, {0.65, 2.3e-3}});
  st.air_lines = make_lines(st.center, st.half_width, 0.0008, {{-0.9, 1.5e-4}});
  st.aerosol_continuum = 0.18;
  return s;
}

ToyForwardModel::ToyForwardModel(Spectroscopy spectroscopy) : spec_(std::move(spectroscopy)) {}

double ToyForwardModel::tau_co2(Band b, double wl) const {
  return line_sum(spec_.bands[band_index(b)].co2_lines, wl);
}

double ToyForwardModel::tau_air(Band b, double wl) const {
  return line_sum(spec_.bands[band_index(b)].air_lines, wl);
}

double ToyForwardModel::tau_aerosol(Band b, double wl) const {
  return spec_.bands[band_index(b)].aerosol_continuum - spec_.path_shortening * tau_co2(b, wl);
}

double ToyForwardModel::solar(Band b, double wl) const {
  const auto& bs = spec_.bands[band_index(b)];
  const double u = (wl - bs.center) / bs.half_width;
  return bs.solar_level * (1.0 - 0.15 * u * u);
}

Radiance ToyForwardModel::evaluate_unchecked(const Scene& s, const WavelengthGrids& grids) const {
  Radiance r;
  const double mu = std::cos(s.sza * kDeg);
  for (std::size_t j = 0; j < kBandCount; ++j) {
    const Band b = static_cast<Band>(j);
    const auto& wl = grids[j].wavelengths;
    r.bands[j].resize(wl.size());
    for (std::size_t i = 0; i < wl.size(); ++i) {
      const double od = s.xco2 * tau_co2(b, wl[i]) + s.p_surf * tau_air(b, wl[i]) +
                        s.aerosol * tau_aerosol(b, wl[i]);
      r.bands[j][i] = s.albedo[j] * mu * solar(b, wl[i]) * std::exp(-od);
    }
  }
  return r;
}

Radiance ToyForwardModel::evaluate(const Scene& s, const WavelengthGrids& grids) const {
  validate(s);
  return evaluate_unchecked(s, grids);
}

std::vector<double> ToyForwardModel::jacobian(const Scene& s, const WavelengthGrids& grids) const {
  const Radiance y = evaluate_unchecked(s, grids);
  std::vector<double> k(y.size() * kStateSize, 0.0);
  std::size_t row = 0;
  for (std::size_t j = 0; j < kBandCount; ++j) {
    const Band b = static_cast<Band>(j);
    const auto& wl = grids[j].wavelengths;
    const double mu = std::cos(s.sza * kDeg);
    for (std::size_t i = 0; i < wl.size(); ++i, ++row) {
      const double yi = y.bands[j][i];
      double* r = k.data() + row * kStateSize;
      r[0] = -tau_co2(b, wl[i]) * yi;
      // d/d albedo_j without dividing by albedo, so albedo = 0 stays finite.
      const double od = s.xco2 * tau_co2(b, wl[i]) + s.p_surf * tau_air(b, wl[i]) +
                        s.aerosol * tau_aerosol(b, wl[i]);
      r[1 + j] = mu * solar(b, wl[i]) * std::exp(-od);
      r[4] = -tau_aerosol(b, wl[i]) * yi;
    }
  }
  return k;
}

WavelengthGrids ToyForwardModel::common_grids(std::size_t channels) const {
  WavelengthGrids g;
  for (std::size_t j = 0; j < kBandCount; ++j) {
    const auto& bs = spec_.bands[j];
    const double start = bs.center - bs.half_width;
    const double step = 2.0 * bs.half_width / static_cast<double>(channels - 1);
    g[j].band = static_cast<Band>(j);
    g[j].wavelengths.resize(channels);
    for (std::size_t i = 0; i < channels; ++i)
      g[j].wavelengths[i] = start + static_cast<double>(i) * step;
  }
  return g;
}

WavelengthGrids ToyForwardModel::native_grids(std::size_t channels, double shift) const {
  WavelengthGrids g;
  for (std::size_t j = 0; j < kBandCount; ++j) {
    const auto& bs = spec_.bands[j];
    const double start = bs.center - bs.half_width;
    const double step = 2.0 * bs.half_width / static_cast<double>(channels - 1);
    g[j].band = static_cast<Band>(j);
    g[j].wavelengths.resize(channels + 2);
    // With shift == 0 the interior points equal the common grid bit for bit.
    for (std::size_t k = 0; k < channels + 2; ++k)
      g[j].wavelengths[k] = start + ((static_cast<double>(k) - 1.0) + shift) * step;
  }
  return g;
}

Radiance toy_forward(const ToyForwardModel& fm, const Scene& scene, const WavelengthGrids& grids) {
  return fm.evaluate(scene, grids);
}

Scene linearization_reference(double sza, double p_surf) {
  Scene s;
  s.xco2 = 410.0;
  s.albedo = {0.4, 0.4, 0.4};
  s.aerosol = 0.1;
  s.sza = sza;
  s.p_surf = p_surf;
  return s;
}

Radiance linearized_forward(const ToyForwardModel& fm, const Scene& scene,
                            const WavelengthGrids& grids) {
  const Scene ref = linearization_reference(scene.sza, scene.p_surf);
  const Radiance y0 = fm.evaluate_unchecked(ref, grids);
  const auto k = fm.jacobian(ref, grids);
  const auto x = scene.state(), x0 = ref.state();
  std::vector<double> flat = y0.flat();
  for (std::size_t i = 0; i < flat.size(); ++i)
    for (std::size_t c = 0; c < kStateSize; ++c) flat[i] += k[i * kStateSize + c] * (x[c] - x0[c]);
  std::array<std::size_t, kBandCount> counts{};
  for (std::size_t j = 0; j < kBandCount; ++j) counts[j] = grids[j].wavelengths.size();
  return Radiance::from_flat(flat, counts);
}

// ---------------------------------------------------------------- noise / resampling

Radiance add_noise(const Radiance& radiance, const NoiseModel& noise, Rng& rng) {
  require(noise.floor >= 0.0 && noise.frac >= 0.0, ErrorKind::validation,
          "noise model: negative parameters");
  Radiance out = radiance;
  for (auto& band : out.bands)
    for (auto& v : band) {
      const double sd = noise.sd(v);
      v += sd * rng.normal();
    }
  return out;
}

Radiance resample_to_common_grid(const Radiance& radiance, const WavelengthGrids& source,
                                 const WavelengthGrids& target) {
  Radiance out;
  for (std::size_t j = 0; j < kBandCount; ++j) {
    const auto& xs = source[j].wavelengths;
    const auto& ys = radiance.bands[j];
    const auto& xt = target[j].wavelengths;
    require(xs.size() == ys.size() && xs.size() >= 2, ErrorKind::validation,
            std::string("resample: band ") + kBandNames[j] + " radiance/grid length mismatch");
    out.bands[j].resize(xt.size());
    for (std::size_t i = 0; i < xt.size(); ++i) {
      const double t = xt[i];
      require(t >= xs.front() && t <= xs.back(), ErrorKind::validation,
              std::string("resample: band ") + kBandNames[j] + " target " + std::to_string(t) +
                  " outside source span (extrapolation)");
      auto it = std::upper_bound(xs.begin(), xs.end(), t);
      std::size_t k = static_cast<std::size_t>(it - xs.begin());
      k = std::clamp<std::size_t>(k, 1, xs.size() - 1) - 1;
      if (t == xs[k + 1]) {
        out.bands[j][i] = ys[k + 1];
        continue;
      }
      const double w = (t - xs[k]) / (xs[k + 1] - xs[k]);
      out.bands[j][i] = ys[k] + w * (ys[k + 1] - ys[k]);
    }
  }
  return out;
}

// ---------------------------------------------------------------- sampling

void SceneRanges::validate() const {
  auto ok = [](bool c, const std::string& m) { require(c, ErrorKind::validation, "scene ranges: " + m); };
  ok(xco2_min >= 380.0 && xco2_max <= 440.0 && xco2_min < xco2_max, "xco2 must be within [380, 440]");
  ok(albedo_min > 0.0 && albedo_max <= 1.0 && albedo_min < albedo_max, "albedo must be within (0, 1]");
  ok(sza_min >= 0.0 && sza_max < 85.0 && sza_min <= sza_max, "sza must be within [0, 85)");
  ok(psurf_min >= 600.0 && psurf_max <= 1050.0 && psurf_min <= psurf_max,
     "p_surf must be within [600, 1050]");
  ok(aerosol_clean_mean > 0.0, "aerosol clean mean must be positive");
  ok(aerosol_plume_fraction >= 0.0 && aerosol_plume_fraction <= 1.0,
     "aerosol plume fraction must be in [0, 1]");
  ok(aerosol_plume_sd > 0.0, "aerosol plume sd must be positive");
}

double SceneRanges::aerosol_density(double a) const {
  if (a < 0.0) return 0.0;
  const double clean = std::exp(-a / aerosol_clean_mean) / aerosol_clean_mean;
  const double z = (a - aerosol_plume_mean) / aerosol_plume_sd;
  const double mass = 0.5 * std::erfc(-aerosol_plume_mean / (aerosol_plume_sd * std::numbers::sqrt2));
  const double plume =
      std::exp(-0.5 * z * z) / (aerosol_plume_sd * std::sqrt(2.0 * std::numbers::pi) * mass);
  return (1.0 - aerosol_plume_fraction) * clean + aerosol_plume_fraction * plume;
}

Scene sample_scene(const SceneRanges& r, Rng& rng) {
  Scene s;
  s.xco2 = rng.uniform(r.xco2_min, r.xco2_max);
  for (auto& a : s.albedo) a = rng.uniform(r.albedo_min, r.albedo_max);
  s.sza = rng.uniform(r.sza_min, r.sza_max);
  s.p_surf = rng.uniform(r.psurf_min, r.psurf_max);
  if (rng.uniform() < r.aerosol_plume_fraction) {
    double a = -1.0;
    while (a < 0.0) a = rng.normal(r.aerosol_plume_mean, r.aerosol_plume_sd);
    s.aerosol = a;
  } else {
    s.aerosol = -r.aerosol_clean_mean * std::log1p(-rng.uniform());
  }
  return s;
}

// ---------------------------------------------------------------- discrepancy

bool Discrepancy::is_zero() const {
  return amplitude == 0.0 && grid_shift == 0.0 &&
         std::all_of(multiplicative.begin(), multiplicative.end(), [](double m) { return m == 0.0; });
}

Discrepancy Discrepancy::standard() {
  Discrepancy d;
  d.amplitude = 0.003;
  d.grid_shift = 0.05;
  return d;
}

std::vector<double> discrepancy_shape(const ToyForwardModel& fm, Band band, std::size_t shape,
                                      std::span<const double> grid) {
  const auto& bs = fm.spectroscopy().bands[band_index(band)];
  std::vector<double> d(grid.size());
  if (shape == 1) {
    // absorption-line pattern of the band's dominant absorber, unit peak
    double peak = 0.0;
    for (std::size_t i = 0; i < grid.size(); ++i) {
      d[i] = band == Band::o2a ? fm.tau_air(band, grid[i]) : fm.tau_co2(band, grid[i]);
      peak = std::max(peak, d[i]);
    }
    if (peak > 0.0)
      for (auto& v : d) v /= peak;
    return d;
  }
  require(shape < 3, ErrorKind::validation, "discrepancy: shape index must be < 3");
  for (std::size_t i = 0; i < grid.size(); ++i) {
    const double u = (grid[i] - bs.center) / bs.half_width;
    d[i] = shape == 0 ? u : u * u - 1.0 / 3.0;
  }
  return d;
}

Radiance apply_discrepancy(const ToyForwardModel& fm, const Radiance& radiance,
                           const WavelengthGrids& grids, const Discrepancy& d, Rng& rng) {
  Radiance out = radiance;
  if (d.is_zero()) return out;
  for (std::size_t j = 0; j < kBandCount; ++j) {
    auto& band = out.bands[j];
    double level = 0.0;
    for (double v : radiance.bands[j]) level += v;
    level /= static_cast<double>(std::max<std::size_t>(band.size(), 1));
    for (auto& v : band) v *= 1.0 + d.multiplicative[j];
    if (d.amplitude == 0.0) continue;
    for (std::size_t l = 0; l < 3; ++l) {
      const double a = rng.normal(d.shape_mean[l], d.shape_sd[l]);
      const auto shape = discrepancy_shape(fm, static_cast<Band>(j), l, grids[j].wavelengths);
      for (std::size_t i = 0; i < band.size(); ++i) band[i] += level * d.amplitude * a * shape[i];
    }
  }
  return out;
}

// ---------------------------------------------------------------- datasets

std::string split_name(Split s) {
  switch (s) {
    case Split::train:
      return "train";
    case Split::val:
      return "val";
    case Split::test:
      return "test";
    case Split::finetune:
      return "finetune";
    case Split::eof_pairs:
      return "eof_pairs";
  }
  return "unknown";
}

Split split_from_name(const std::string& name) {
  for (auto s : {Split::train, Split::val, Split::test, Split::finetune, Split::eof_pairs})
    if (split_name(s) == name) return s;
  fail(ErrorKind::validation, "unknown split \"" + name + "\"");
}

std::uint64_t scene_id(Split split, std::size_t index) {
  return (static_cast<std::uint64_t>(split) << 40) + static_cast<std::uint64_t>(index);
}

void Dataset::push_back(std::uint64_t id, double label, std::span<const double> f) {
  if (ids.empty() && feature_count == 0) feature_count = f.size();
  require(f.size() == feature_count, ErrorKind::validation, "dataset: feature length mismatch");
  ids.push_back(id);
  labels.push_back(label);
  features.insert(features.end(), f.begin(), f.end());
}

Dataset Dataset::subset(std::span<const std::size_t> rows) const {
  Dataset out;
  out.split = split;
  out.grids = grids;
  out.feature_count = feature_count;
  for (auto r : rows) out.push_back(ids.at(r), labels.at(r), row(r));
  return out;
}

std::vector<double> covariates(const Radiance& radiance, double sza, double p_surf) {
  std::vector<double> f = radiance.flat();
  f.push_back(sza);
  f.push_back(p_surf);
  return f;
}

namespace {

Radiance forward_for(const ToyForwardModel& fm, const GeneratorConfig& cfg, const Scene& s,
                     const WavelengthGrids& grids) {
  return cfg.forward == ForwardKind::linear ? linearized_forward(fm, s, grids)
                                            : fm.evaluate(s, grids);
}

}  // namespace

Sounding simulate_sounding(const ToyForwardModel& fm, const GeneratorConfig& cfg,
                           bool apply_distortion, Rng& rng) {
  const std::size_t n = cfg.channels_per_band;
  const auto common = fm.common_grids(n);
  const double shift = apply_distortion ? cfg.discrepancy.grid_shift : 0.0;
  require(std::abs(shift) <= 1.0, ErrorKind::validation,
          "discrepancy: |grid_shift| must be at most one channel");
  const auto native = fm.native_grids(n, shift);

  Sounding out;
  out.scene = sample_scene(cfg.ranges, rng);
  Radiance y = forward_for(fm, cfg, out.scene, native);
  if (apply_distortion) y = apply_discrepancy(fm, y, native, cfg.discrepancy, rng);
  y = add_noise(y, cfg.noise, rng);
  out.observed = resample_to_common_grid(y, native, common);
  out.simulated = forward_for(fm, cfg, out.scene, common);
  return out;
}

namespace {

Dataset build_split(std::size_t n, const GeneratorConfig& cfg, std::uint64_t seed, Split split,
                    bool distort, unsigned workers) {
  require(n >= 1, ErrorKind::validation, "dataset: need at least one record");
  require(cfg.channels_per_band >= 8, ErrorKind::validation,
          "dataset: channels_per_band must be at least 8");
  cfg.ranges.validate();
  const ToyForwardModel fm;
  Dataset ds;
  ds.split = split;
  ds.grids = fm.common_grids(cfg.channels_per_band);
  ds.feature_count = kBandCount * cfg.channels_per_band + 2;
  ds.ids.resize(n);
  ds.labels.resize(n);
  ds.features.resize(n * ds.feature_count);
  parallel_for(n, workers, [&](std::size_t i) {
    const auto id = scene_id(split, i);
    Rng rng(derive_seed(seed, id));
    const auto s = simulate_sounding(fm, cfg, distort, rng);
    const auto f = covariates(s.observed, s.scene.sza, s.scene.p_surf);
    ds.ids[i] = id;
    ds.labels[i] = s.scene.xco2;
    std::copy(f.begin(), f.end(), ds.features.begin() + static_cast<std::ptrdiff_t>(i * ds.feature_count));
  });
  return ds;
}

}  // namespace

Dataset build_dataset(std::size_t n, const GeneratorConfig& cfg, std::uint64_t seed, Split split,
                      unsigned workers) {
  return build_split(n, cfg, seed, split, false, workers);
}

Dataset build_finetune_set(std::size_t n, const GeneratorConfig& cfg, std::uint64_t seed,
                           Split split, unsigned workers) {
  return build_split(n, cfg, seed, split, true, workers);
}

ResidualPairs build_residual_pairs(std::size_t n, const GeneratorConfig& cfg, std::uint64_t seed,
                                   unsigned workers) {
  require(n >= 2, ErrorKind::validation, "residual pairs: need at least two soundings");
  cfg.ranges.validate();
  const ToyForwardModel fm;
  ResidualPairs p;
  for (Dataset* ds : {&p.simulated, &p.observed}) {
    ds->split = Split::eof_pairs;
    ds->grids = fm.common_grids(cfg.channels_per_band);
    ds->feature_count = kBandCount * cfg.channels_per_band + 2;
    ds->ids.resize(n);
    ds->labels.resize(n);
    ds->features.resize(n * ds->feature_count);
  }
  parallel_for(n, workers, [&](std::size_t i) {
    const auto id = scene_id(Split::eof_pairs, i);
    Rng rng(derive_seed(seed, id));
    const auto s = simulate_sounding(fm, cfg, true, rng);
    const auto off = static_cast<std::ptrdiff_t>(i * p.simulated.feature_count);
    const auto fs = covariates(s.simulated, s.scene.sza, s.scene.p_surf);
    const auto fo = covariates(s.observed, s.scene.sza, s.scene.p_surf);
    for (auto [ds, f] : {std::pair{&p.simulated, &fs}, std::pair{&p.observed, &fo}}) {
      ds->ids[i] = id;
      ds->labels[i] = s.scene.xco2;
      std::copy(f->begin(), f->end(), ds->features.begin() + off);
    }
  });
  return p;
}

// ---------------------------------------------------------------- normalization

Normalization Normalization::fit(const Dataset& train) {
  require(train.size() >= 1, ErrorKind::validation, "normalization: empty dataset");
  const std::size_t f = train.feature_count, n = train.size();
  Normalization norm;
  norm.mean.assign(f, 0.0);
  norm.sd.assign(f, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    auto r = train.row(i);
    for (std::size_t k = 0; k < f; ++k) norm.mean[k] += r[k];
  }
  for (auto& m : norm.mean) m /= static_cast<double>(n);
  for (std::size_t i = 0; i < n; ++i) {
    auto r = train.row(i);
    for (std::size_t k = 0; k < f; ++k) {
      const double d = r[k] - norm.mean[k];
      norm.sd[k] += d * d;
    }
  }
  for (auto& s : norm.sd) {
    s = n > 1 ? std::sqrt(s / static_cast<double>(n - 1)) : 0.0;
    if (!(s > 1e-12)) s = 1.0;  // constant feature
  }
  return norm;
}

void Normalization::normalize(std::span<double> v) const {
  require(v.size() == mean.size(), ErrorKind::validation, "normalization: length mismatch");
  for (std::size_t k = 0; k < v.size(); ++k) v[k] = (v[k] - mean[k]) / sd[k];
}

void Normalization::denormalize(std::span<double> v) const {
  require(v.size() == mean.size(), ErrorKind::validation, "normalization: length mismatch");
  for (std::size_t k = 0; k < v.size(); ++k) v[k] = v[k] * sd[k] + mean[k];
}

std::vector<double> Normalization::normalized(std::span<const double> v) const {
  std::vector<double> out(v.begin(), v.end());
  normalize(out);
  return out;
}

nlohmann::json Normalization::to_json() const { return {{"mean", mean}, {"sd", sd}}; }

Normalization Normalization::from_json(const nlohmann::json& j) {
  Normalization n;
  try {
    n.mean = j.at("mean").get<std::vector<double>>();
    n.sd = j.at("sd").get<std::vector<double>>();
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::validation, std::string("normalization stats: ") + e.what());
  }
  require(n.mean.size() == n.sd.size(), ErrorKind::validation, "normalization: length mismatch");
  return n;
}

// ---------------------------------------------------------------- XCD1

namespace {
constexpr std::uint32_t kXcdVersion = 1;
}

void save_dataset(const std::string& path, const Dataset& ds) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  require(static_cast<bool>(os), ErrorKind::runtime, "cannot write " + path);
  bin::write_magic(os, "XCD1");
  bin::write_u32(os, kXcdVersion);
  bin::write_u32(os, static_cast<std::uint32_t>(ds.split));
  bin::write_u64(os, ds.size());
  bin::write_u32(os, static_cast<std::uint32_t>(ds.feature_count));
  bin::write_u32(os, static_cast<std::uint32_t>(kBandCount));
  for (const auto& g : ds.grids) {
    bin::write_u32(os, static_cast<std::uint32_t>(g.band));
    bin::write_u32(os, static_cast<std::uint32_t>(g.wavelengths.size()));
    bin::write_f64s(os, g.wavelengths);
  }
  for (std::size_t i = 0; i < ds.size(); ++i) {
    bin::write_u64(os, ds.ids[i]);
    bin::write_f64(os, ds.labels[i]);
    bin::write_f64s(os, ds.row(i));
  }
  require(static_cast<bool>(os), ErrorKind::runtime, "write failed for " + path);
}

Dataset load_dataset(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  require(static_cast<bool>(is), ErrorKind::runtime, "cannot open dataset " + path);
  bin::expect_magic(is, "XCD1", path);
  const auto version = bin::read_u32(is);
  require(version == kXcdVersion, ErrorKind::validation,
          path + ": unsupported XCD1 version " + std::to_string(version));
  Dataset ds;
  const auto split = bin::read_u32(is);
  require(split <= 4, ErrorKind::validation, path + ": bad split tag");
  ds.split = static_cast<Split>(split);
  const auto n = bin::read_u64(is);
  ds.feature_count = bin::read_u32(is);
  const auto bands = bin::read_u32(is);
  require(bands == kBandCount, ErrorKind::validation, path + ": expected 3 bands");
  std::size_t radiance = 0;
  for (std::size_t j = 0; j < kBandCount; ++j) {
    ds.grids[j].band = static_cast<Band>(bin::read_u32(is));
    const auto pts = bin::read_u32(is);
    require(pts <= 1u << 20, ErrorKind::validation, path + ": implausible grid size");
    ds.grids[j].wavelengths.resize(pts);
    bin::read_f64s(is, ds.grids[j].wavelengths);
    radiance += pts;
  }
  validate(ds.grids);
  require(ds.feature_count == radiance + 2, ErrorKind::validation,
          path + ": feature count does not match grids");
  ds.ids.resize(n);
  ds.labels.resize(n);
  ds.features.resize(n * ds.feature_count);
  for (std::size_t i = 0; i < n; ++i) {
    ds.ids[i] = bin::read_u64(is);
    ds.labels[i] = bin::read_f64(is);
    bin::read_f64s(is, ds.row(i));
  }
  return ds;
}

}  // namespace xco2::scenegen
