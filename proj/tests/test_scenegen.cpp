#include <cmath>
#include <filesystem>
#include <fstream>

#include "doctest.h"
#include "json.hpp"
#include "oracles.hpp"
#include "xco2/scenegen.hpp"

using namespace xco2;
using namespace xco2::scenegen;

namespace {

Scene typical_scene() {
  Scene s;
  s.xco2 = 405.0;
  s.albedo = {0.3, 0.25, 0.2};
  s.aerosol = 0.1;
  s.sza = 35.0;
  s.p_surf = 980.0;
  return s;
}

// Independent linear interpolation written against the definition.
double interp_oracle(const std::vector<double>& x, const std::vector<double>& y, double q) {
  for (std::size_t i = 0; i + 1 < x.size(); ++i)
    if (q >= x[i] && q <= x[i + 1]) return y[i] + (y[i + 1] - y[i]) * (q - x[i]) / (x[i + 1] - x[i]);
  throw std::runtime_error("outside");
}

}  // namespace

TEST_CASE("scene invariants are enforced") {
  const ToyForwardModel fm;
  const auto g = fm.common_grids(32);
  auto s = typical_scene();
  CHECK_NOTHROW(validate(s));
  for (auto mutate : std::vector<void (*)(Scene&)>{
           [](Scene& x) { x.xco2 = 379.0; }, [](Scene& x) { x.sza = 85.0; },
           [](Scene& x) { x.p_surf = 1051.0; }, [](Scene& x) { x.albedo[1] = 0.0; },
           [](Scene& x) { x.aerosol = -0.01; }}) {
    auto bad = s;
    mutate(bad);
    CHECK_THROWS_AS(fm.evaluate(bad, g), Error);
  }
}

TEST_CASE("toy forward: grazing sun and absent absorbers") {
  const ToyForwardModel fm;
  const auto g = fm.common_grids(32);
  auto s = typical_scene();
  s.sza = 89.999;
  const auto dark = fm.evaluate_unchecked(s, g);
  for (const auto& b : dark.bands)
    for (double v : b) CHECK(v < 2e-5);

  s = typical_scene();
  s.xco2 = 0.0;
  s.aerosol = 0.0;
  const auto y = fm.evaluate_unchecked(s, g);
  const double mu = std::cos(s.sza * M_PI / 180.0);
  for (std::size_t j = 0; j < kBandCount; ++j)
    for (std::size_t i = 0; i < g[j].wavelengths.size(); ++i) {
      const double l = g[j].wavelengths[i];
      const double expect = s.albedo[j] * mu * fm.solar(Band(j), l) * std::exp(-s.p_surf * fm.tau_air(Band(j), l));
      CHECK(y.bands[j][i] == doctest::Approx(expect).epsilon(1e-14));
    }
  for (double l : g[0].wavelengths) CHECK(fm.tau_co2(Band::o2a, l) == 0.0);
}

TEST_CASE("toy forward: more CO2 darkens every absorbing channel") {
  const ToyForwardModel fm;
  const auto g = fm.common_grids(32);
  auto lo = typical_scene(), hi = typical_scene();
  lo.xco2 = 400.0;
  hi.xco2 = 420.0;
  const auto a = fm.evaluate(lo, g), b = fm.evaluate(hi, g);
  std::size_t checked = 0;
  for (std::size_t j = 1; j < kBandCount; ++j)
    for (std::size_t i = 0; i < g[j].wavelengths.size(); ++i)
      if (fm.tau_co2(Band(j), g[j].wavelengths[i]) > 0.0) {
        CHECK(b.bands[j][i] < a.bands[j][i]);
        ++checked;
      }
  CHECK(checked == 64);
}

TEST_CASE("toy forward is continuous and its Jacobian matches finite differences") {
  const ToyForwardModel fm;
  const auto g = fm.common_grids(16);
  Rng rng(3);
  const SceneRanges r;
  for (int k = 0; k < 10; ++k) {
    const auto s = sample_scene(r, rng);
    const auto y = fm.evaluate(s, g).flat();
    auto near = s;
    near.xco2 += 1e-9;
    near.sza += 1e-9;
    near.p_surf += 1e-9;
    near.aerosol += 1e-9;
    for (auto& a : near.albedo) a = std::min(1.0, a + 1e-9);
    const auto y2 = fm.evaluate(near, g).flat();
    for (std::size_t i = 0; i < y.size(); ++i) CHECK(std::abs(y2[i] - y[i]) < 1e-8);

    const auto kj = fm.jacobian(s, g);
    const auto x = s.state();
    for (std::size_t c = 0; c < kStateSize; ++c) {
      auto xp = x, xm = x;
      const double h = 1e-6 * std::max(1.0, std::abs(x[c]));
      xp[c] += h;
      xm[c] -= h;
      const auto fp = fm.evaluate_unchecked(Scene::from_state(xp, s.sza, s.p_surf), g).flat();
      const auto fmn = fm.evaluate_unchecked(Scene::from_state(xm, s.sza, s.p_surf), g).flat();
      for (std::size_t i = 0; i < y.size(); ++i)
        CHECK(kj[i * kStateSize + c] == doctest::Approx((fp[i] - fmn[i]) / (2 * h)).epsilon(1e-6).scale(1e-9));
    }
  }
}

TEST_CASE("add_noise: zero model is identity, moments match the model") {
  const ToyForwardModel fm;
  const auto g = fm.common_grids(8);
  const auto y = fm.evaluate(typical_scene(), g);
  Rng rng(1);
  CHECK(add_noise(y, NoiseModel{0.0, 0.0}, rng).flat() == y.flat());

  const NoiseModel nm;
  const std::size_t n = 100000;
  const auto flat = y.flat();
  std::vector<double> sum(flat.size(), 0.0), sq(flat.size(), 0.0);
  for (std::size_t k = 0; k < n; ++k) {
    const auto z = add_noise(y, nm, rng).flat();
    for (std::size_t i = 0; i < z.size(); ++i) {
      const double d = z[i] - flat[i];
      sum[i] += d;
      sq[i] += d * d;
    }
  }
  for (std::size_t i = 0; i < flat.size(); ++i) {
    const double sd = nm.sd(flat[i]);
    CHECK(std::abs(sum[i] / n) < 4 * sd / std::sqrt(double(n)));
    CHECK(sq[i] / n == doctest::Approx(sd * sd).epsilon(0.05));
  }
}

TEST_CASE("resampling: identity, linear exactness, oracle agreement, no extrapolation") {
  const ToyForwardModel fm;
  const auto src = fm.native_grids(32, 0.37);
  const auto dst = fm.common_grids(32);
  Rng rng(9);
  Radiance r;
  for (std::size_t j = 0; j < kBandCount; ++j)
    for (std::size_t i = 0; i < src[j].wavelengths.size(); ++i) r.bands[j].push_back(rng.uniform());
  CHECK(resample_to_common_grid(r, src, src).flat() == r.flat());

  Radiance lin;
  for (std::size_t j = 0; j < kBandCount; ++j)
    for (double l : src[j].wavelengths) lin.bands[j].push_back(3.0 - 2.0 * l);
  const auto out = resample_to_common_grid(lin, src, dst);
  for (std::size_t j = 0; j < kBandCount; ++j)
    for (std::size_t i = 0; i < dst[j].wavelengths.size(); ++i)
      CHECK(out.bands[j][i] == doctest::Approx(3.0 - 2.0 * dst[j].wavelengths[i]).epsilon(1e-13));

  const auto rr = resample_to_common_grid(r, src, dst);
  for (std::size_t j = 0; j < kBandCount; ++j)
    for (std::size_t i = 0; i < dst[j].wavelengths.size(); ++i)
      CHECK(std::abs(rr.bands[j][i] - interp_oracle(src[j].wavelengths, r.bands[j], dst[j].wavelengths[i])) < 1e-12);

  auto wide = dst;
  wide[1].wavelengths.back() += 1.0;
  CHECK_THROWS_AS(resample_to_common_grid(r, src, wide), Error);
}

TEST_CASE("build_dataset: sizes, determinism, parallel equivalence, label coverage") {
  GeneratorConfig cfg;
  const auto one = build_dataset(1, cfg, 5, Split::train);
  REQUIRE(one.size() == 1);
  CHECK(one.feature_count == 98);
  for (double v : one.row(0)) CHECK(std::isfinite(v));

  const auto a = build_dataset(200, cfg, 5, Split::train);
  const auto b = build_dataset(200, cfg, 5, Split::train, 3);
  const auto c = build_dataset(200, cfg, 6, Split::train);
  CHECK(a.features == b.features);
  CHECK(a.labels == b.labels);
  CHECK(a.features != c.features);

  const auto big = build_dataset(10000, cfg, 7, Split::train);
  std::vector<int> hist(10, 0);
  for (double l : big.labels) {
    CHECK(l >= 380.0);
    CHECK(l <= 440.0);
    hist[std::min(9, int((l - 380.0) / 6.0))]++;
  }
  for (int h : hist) CHECK(std::abs(h - 1000) < 150);  // > 4.5 binomial sd
}

TEST_CASE("finetune set: distortion in covariates only") {
  GeneratorConfig zero;
  zero.discrepancy = Discrepancy::none();
  const auto plain = build_dataset(300, zero, 11, Split::test);
  const auto same = build_finetune_set(300, zero, 11, Split::test);
  CHECK(plain.features == same.features);

  GeneratorConfig mult = zero;
  mult.discrepancy.multiplicative = {0.01, 0.01, 0.01};
  const auto d = build_finetune_set(300, mult, 11, Split::test);
  CHECK(d.labels == plain.labels);
  double rel = 0.0;
  std::size_t n = 0;
  for (std::size_t i = 0; i < d.size(); ++i)
    for (std::size_t k = 0; k < d.radiance_count(); ++k) {
      rel += d.row(i)[k] / plain.row(i)[k] - 1.0;
      ++n;
    }
  CHECK(rel / double(n) == doctest::Approx(0.01).epsilon(0.02));

  const auto std_ft = build_finetune_set(300, GeneratorConfig{}, 11, Split::test);
  CHECK(std_ft.labels == plain.labels);
  CHECK(std_ft.features != plain.features);
}

TEST_CASE("normalization round-trip and train-only statistics") {
  const auto ds = build_dataset(100, GeneratorConfig{}, 2, Split::train);
  const auto norm = Normalization::fit(ds);
  for (std::size_t i = 0; i < 10; ++i) {
    std::vector<double> v(ds.row(i).begin(), ds.row(i).end());
    const auto orig = v;
    norm.normalize(v);
    norm.denormalize(v);
    for (std::size_t k = 0; k < v.size(); ++k) CHECK(v[k] == doctest::Approx(orig[k]).epsilon(1e-12));
  }
  const auto back = Normalization::from_json(norm.to_json());
  CHECK(back.mean == norm.mean);
  CHECK(back.sd == norm.sd);
}

TEST_CASE("XCD1 dataset files round-trip") {
  const auto ds = build_finetune_set(20, GeneratorConfig{}, 4);
  const auto path = (std::filesystem::temp_directory_path() / "xco2_xcd1_test.bin").string();
  save_dataset(path, ds);
  const auto back = load_dataset(path);
  CHECK(back.ids == ds.ids);
  CHECK(back.labels == ds.labels);
  CHECK(back.features == ds.features);
  CHECK(back.split == Split::finetune);
  for (std::size_t j = 0; j < kBandCount; ++j) CHECK(back.grids[j].wavelengths == ds.grids[j].wavelengths);
  std::ofstream(path, std::ios::binary) << "junk";
  CHECK_THROWS_AS(load_dataset(path), Error);
  std::filesystem::remove(path);
}

TEST_CASE("splits are disjoint by scene id") {
  GeneratorConfig cfg;
  const auto tr = build_dataset(50, cfg, 1, Split::train);
  const auto te = build_finetune_set(50, cfg, 1, Split::test);
  for (auto id : tr.ids) CHECK(std::find(te.ids.begin(), te.ids.end(), id) == te.ids.end());
}

TEST_CASE("an aerosol/albedo trade-off hides >= 5 ppm of XCO2 below the noise") {
  const ToyForwardModel fm;
  const auto g = fm.common_grids(32);
  const SceneRanges ranges;
  const NoiseModel noise;
  Rng rng(2024);
  bool found = false;
  Scene s1, s2;
  for (int attempt = 0; attempt < 2000 && !found; ++attempt) {
    s1 = sample_scene(ranges, rng);
    s2 = s1;
    const double dx = rng.uniform(5.0, 9.0);
    s2.xco2 += dx;
    s2.aerosol += dx / fm.spectroscopy().path_shortening;
    for (std::size_t j = 0; j < kBandCount; ++j)
      s2.albedo[j] *= std::exp(s2.aerosol * fm.spectroscopy().bands[j].aerosol_continuum -
                               s1.aerosol * fm.spectroscopy().bands[j].aerosol_continuum);
    try {
      validate(s2);
    } catch (const Error&) {
      continue;
    }
    const auto y1 = fm.evaluate(s1, g).flat(), y2 = fm.evaluate(s2, g).flat();
    found = true;
    for (std::size_t i = 0; i < y1.size(); ++i)
      found = found && std::abs(y1[i] - y2[i]) < noise.sd(y1[i]);
  }
  REQUIRE(found);
  CHECK(s2.xco2 - s1.xco2 >= 5.0);

  // The frozen fixture pair must keep satisfying the same property.
  std::ifstream is(oracle::fixture_path("ambiguous_scene.json"));
  REQUIRE(is);
  const auto j = nlohmann::json::parse(is);
  auto load = [](const nlohmann::json& o) {
    Scene s;
    s.xco2 = o.at("xco2");
    s.albedo = o.at("albedo").get<std::array<double, 3>>();
    s.aerosol = o.at("aerosol");
    s.sza = o.at("sza");
    s.p_surf = o.at("p_surf");
    return s;
  };
  const auto f1 = load(j.at("scene_a")), f2 = load(j.at("scene_b"));
  CHECK(f2.xco2 - f1.xco2 >= 5.0);
  const auto y1 = fm.evaluate(f1, g).flat(), y2 = fm.evaluate(f2, g).flat();
  for (std::size_t i = 0; i < y1.size(); ++i) CHECK(std::abs(y1[i] - y2[i]) < noise.sd(y1[i]));
}
