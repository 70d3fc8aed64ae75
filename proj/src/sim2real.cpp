#include "xco2/sim2real.hpp"

#include <cmath>
#include <fstream>

namespace xco2::sim2real {

using Eigen::Index;

std::string mode_name(PerturbMode m) {
  switch (m) {
    case PerturbMode::fixed:
      return "fixed";
    case PerturbMode::random:
      return "random";
    case PerturbMode::none:
      break;
  }
  return "none";
}

PerturbMode mode_from_name(const std::string& s) {
  if (s == "none") return PerturbMode::none;
  if (s == "fixed") return PerturbMode::fixed;
  if (s == "random") return PerturbMode::random;
  fail(ErrorKind::validation, "unknown EOF mode \"" + s + "\" (expected none, fixed or random)");
}

std::array<ResidualMatrix, kBandCount> residual_matrices(const scenegen::Dataset& sim,
                                                         const scenegen::Dataset& obs) {
  require(sim.size() == obs.size() && sim.feature_count == obs.feature_count, ErrorKind::validation,
          "residuals: simulated and observed sets differ in shape");
  std::array<ResidualMatrix, kBandCount> out;
  std::size_t off = 0;
  for (std::size_t j = 0; j < kBandCount; ++j) {
    const std::size_t ch = sim.grids[j].wavelengths.size();
    out[j].band = static_cast<Band>(j);
    out[j].values.resize(static_cast<Index>(sim.size()), static_cast<Index>(ch));
    for (std::size_t i = 0; i < sim.size(); ++i) {
      require(sim.ids[i] == obs.ids[i], ErrorKind::validation, "residuals: scene ids not paired");
      auto rs = sim.row(i), ro = obs.row(i);
      for (std::size_t c = 0; c < ch; ++c)
        out[j].values(static_cast<Index>(i), static_cast<Index>(c)) = rs[off + c] - ro[off + c];
    }
    off += ch;
  }
  return out;
}

Eigen::MatrixXd BandEOFs::reconstruct(const Eigen::MatrixXd& m) const {
  const Eigen::MatrixXd centered = m.rowwise() - center.transpose();
  Eigen::MatrixXd r = centered * vectors * vectors.transpose();
  r.rowwise() += center.transpose();
  return r;
}

BandEOFs fit_eofs(const ResidualMatrix& m, std::size_t k) {
  const auto& v = m.values;
  require(v.rows() >= 2, ErrorKind::validation, "fit_eofs: need at least two residual rows");
  require(v.allFinite(), ErrorKind::validation, "fit_eofs: non-finite residuals");
  require(k >= 1 && k <= static_cast<std::size_t>(std::min(v.rows(), v.cols())),
          ErrorKind::validation, "fit_eofs: k must be in [1, min(rows, cols)]");
  BandEOFs out;
  out.band = m.band;
  out.center = v.colwise().mean().transpose();
  const Eigen::MatrixXd centered = v.rowwise() - out.center.transpose();
  require(centered.cwiseAbs().maxCoeff() > 0.0, ErrorKind::validation,
          "fit_eofs: degenerate residual matrix (no variance)");
  Eigen::BDCSVD<Eigen::MatrixXd> svd(centered, Eigen::ComputeThinU | Eigen::ComputeThinV);
  const Eigen::VectorXd w = svd.singularValues();
  const double total = w.squaredNorm();
  out.vectors = svd.matrixV().leftCols(static_cast<Index>(k));
  for (std::size_t i = 0; i < k; ++i) {
    // Sign convention: largest-magnitude component positive.
    Index arg;
    out.vectors.col(static_cast<Index>(i)).cwiseAbs().maxCoeff(&arg);
    if (out.vectors(arg, static_cast<Index>(i)) < 0.0) out.vectors.col(static_cast<Index>(i)) *= -1.0;
    const double s = w[static_cast<Index>(i)];
    out.singular_values.push_back(s);
    out.explained.push_back(s * s / total);
  }
  out.coefficients.assign(k, CoefficientFit{});
  return out;
}

CoefficientFit fit_coefficient_distribution(std::span<const double> p) {
  require(p.size() >= 10, ErrorKind::validation,
          "coefficient fit: need at least 10 samples, got " + std::to_string(p.size()));
  double mean = 0.0;
  for (double v : p) mean += v;
  mean /= static_cast<double>(p.size());
  double ss = 0.0;
  for (double v : p) ss += (v - mean) * (v - mean);
  return {mean, std::sqrt(ss / static_cast<double>(p.size() - 1))};
}

void fit_coefficients(EOFSet& eofs, const std::array<ResidualMatrix, kBandCount>& holdout) {
  for (std::size_t j = 0; j < kBandCount; ++j) {
    auto& b = eofs.bands[j];
    const auto& m = holdout[j].values;
    require(static_cast<std::size_t>(m.cols()) == b.channels(), ErrorKind::validation,
            "fit_coefficients: channel count mismatch");
    const Eigen::MatrixXd proj = -(m * b.vectors);  // rows x K
    b.coefficients.clear();
    for (Index k = 0; k < proj.cols(); ++k) {
      std::vector<double> col(proj.col(k).data(), proj.col(k).data() + proj.rows());
      b.coefficients.push_back(fit_coefficient_distribution(col));
    }
  }
}

std::array<std::vector<double>, kBandCount> perturbation_delta(const EOFSet& eofs, Rng& rng,
                                                               PerturbMode mode) {
  std::array<std::vector<double>, kBandCount> delta;
  for (std::size_t j = 0; j < kBandCount; ++j) {
    const auto& b = eofs.bands[j];
    delta[j].assign(b.channels(), 0.0);
    if (mode == PerturbMode::none) continue;
    require(b.coefficients.size() == b.k(), ErrorKind::validation,
            "perturbation: coefficient fits missing");
    for (std::size_t k = 0; k < b.k(); ++k) {
      const auto& cf = b.coefficients[k];
      const double c = mode == PerturbMode::random ? cf.mean + cf.sd * rng.normal() : cf.mean;
      for (std::size_t i = 0; i < b.channels(); ++i)
        delta[j][i] += c * b.vectors(static_cast<Index>(i), static_cast<Index>(k));
    }
  }
  return delta;
}

scenegen::Radiance perturb_radiance(const scenegen::Radiance& y_sim, const EOFSet& eofs, Rng& rng,
                                    PerturbMode mode) {
  for (std::size_t j = 0; j < kBandCount; ++j)
    require(y_sim.bands[j].size() == eofs.bands[j].channels(), ErrorKind::validation,
            std::string("perturb: band ") + scenegen::kBandNames[j] +
                " channel count does not match EOF length");
  const auto delta = perturbation_delta(eofs, rng, mode);
  auto out = y_sim;
  for (std::size_t j = 0; j < kBandCount; ++j)
    for (std::size_t i = 0; i < out.bands[j].size(); ++i) out.bands[j][i] += delta[j][i];
  return out;
}

scenegen::Dataset perturb_dataset(const scenegen::Dataset& ds, const EOFSet& eofs,
                                  PerturbMode mode, std::uint64_t seed) {
  scenegen::Dataset out = ds;
  if (mode == PerturbMode::none) return out;
  std::array<std::size_t, kBandCount> counts{};
  for (std::size_t j = 0; j < kBandCount; ++j) counts[j] = ds.grids[j].wavelengths.size();
  const std::size_t nrad = counts[0] + counts[1] + counts[2];
  require(nrad + 2 == ds.feature_count, ErrorKind::validation,
          "perturb_dataset: dataset layout does not match its grids");
  for (std::size_t i = 0; i < out.size(); ++i) {
    Rng rng(derive_seed(seed, out.ids[i], 0xe0f));
    auto row = out.row(i);
    auto y = scenegen::Radiance::from_flat(row.subspan(0, nrad), counts);
    const auto flat = perturb_radiance(y, eofs, rng, mode).flat();
    std::copy(flat.begin(), flat.end(), row.begin());
  }
  return out;
}

double orthonormality_error(const EOFSet& eofs) {
  double err = 0.0;
  for (const auto& b : eofs.bands) {
    const Eigen::MatrixXd g = b.vectors.transpose() * b.vectors;
    err = std::max(err, (g - Eigen::MatrixXd::Identity(g.rows(), g.cols())).cwiseAbs().maxCoeff());
  }
  return err;
}

namespace {
constexpr std::uint32_t kEofVersion = 1;
}

void save_eofs(const std::string& path, const EOFSet& eofs) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  require(static_cast<bool>(os), ErrorKind::runtime, "cannot write " + path);
  bin::write_magic(os, "EOF1");
  bin::write_u32(os, kEofVersion);
  bin::write_u32(os, static_cast<std::uint32_t>(kBandCount));
  for (const auto& b : eofs.bands) {
    bin::write_u32(os, static_cast<std::uint32_t>(b.band));
    bin::write_u32(os, static_cast<std::uint32_t>(b.channels()));
    bin::write_u32(os, static_cast<std::uint32_t>(b.k()));
    bin::write_f64s(os, {b.center.data(), static_cast<std::size_t>(b.center.size())});
    bin::write_f64s(os, b.singular_values);
    bin::write_f64s(os, b.explained);
    for (std::size_t k = 0; k < b.k(); ++k)
      bin::write_f64s(os, {b.vectors.col(static_cast<Index>(k)).data(), b.channels()});
    for (const auto& c : b.coefficients) bin::write_f64(os, c.mean);
    for (const auto& c : b.coefficients) bin::write_f64(os, c.sd);
  }
  require(static_cast<bool>(os), ErrorKind::runtime, "write failed for " + path);
}

EOFSet load_eofs(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  require(static_cast<bool>(is), ErrorKind::runtime, "cannot open EOF file " + path);
  bin::expect_magic(is, "EOF1", path);
  require(bin::read_u32(is) == kEofVersion, ErrorKind::validation, path + ": unsupported EOF1 version");
  require(bin::read_u32(is) == kBandCount, ErrorKind::validation, path + ": expected 3 bands");
  EOFSet e;
  for (std::size_t j = 0; j < kBandCount; ++j) {
    auto& b = e.bands[j];
    b.band = static_cast<Band>(bin::read_u32(is));
    const auto ch = bin::read_u32(is), k = bin::read_u32(is);
    require(ch >= 1 && ch < (1u << 20) && k >= 1 && k <= ch, ErrorKind::validation,
            path + ": bad band header");
    b.center.resize(ch);
    bin::read_f64s(is, {b.center.data(), ch});
    b.singular_values.resize(k);
    bin::read_f64s(is, b.singular_values);
    b.explained.resize(k);
    bin::read_f64s(is, b.explained);
    b.vectors.resize(ch, k);
    for (std::uint32_t c = 0; c < k; ++c) bin::read_f64s(is, {b.vectors.col(c).data(), ch});
    b.coefficients.resize(k);
    for (auto& c : b.coefficients) c.mean = bin::read_f64(is);
    for (auto& c : b.coefficients) c.sd = bin::read_f64(is);
  }
  const double err = orthonormality_error(e);
  require(err < 1e-10, ErrorKind::validation,
          path + ": eigenvectors are not orthonormal (error " + std::to_string(err) + ")");
  return e;
}

nlohmann::json eof_summary(const EOFSet& eofs) {
  nlohmann::json bands = nlohmann::json::array();
  for (const auto& b : eofs.bands) {
    nlohmann::json coef = nlohmann::json::array();
    for (const auto& c : b.coefficients) coef.push_back({{"mean", c.mean}, {"sd", c.sd}});
    bands.push_back({{"band", scenegen::kBandNames[static_cast<std::size_t>(b.band)]},
                     {"channels", b.channels()},
                     {"k", b.k()},
                     {"singular_values", b.singular_values},
                     {"explained_variance", b.explained},
                     {"coefficients", coef}});
  }
  return {{"bands", bands}};
}

}  // namespace xco2::sim2real
