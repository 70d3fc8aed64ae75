#include "xco2/oe.hpp"

#include <cmath>
#include <functional>

namespace xco2::oe {

using scenegen::kStateSize;

Matrix ForwardModelHandle::analytic_jacobian(const Vector&) const {
  fail(ErrorKind::runtime, "forward model has no analytic Jacobian");
}

LinearForwardModel::LinearForwardModel(Matrix a, Vector offset)
    : a_(std::move(a)), offset_(std::move(offset)) {
  require(offset_.size() == a_.rows(), ErrorKind::validation, "linear model: offset length mismatch");
}

LinearForwardModel::LinearForwardModel(Matrix a) : a_(std::move(a)), offset_(Vector::Zero(a_.rows())) {}

Vector LinearForwardModel::evaluate(const Vector& x) const {
  require(x.size() == a_.cols(), ErrorKind::validation, "linear model: state length mismatch");
  return a_ * x + offset_;
}

FunctionForwardModel::FunctionForwardModel(std::size_t n_state, std::size_t n_obs, Fn fn)
    : n_state_(n_state), n_obs_(n_obs), fn_(std::move(fn)) {}

Vector FunctionForwardModel::evaluate(const Vector& x) const {
  Vector y = fn_(x);
  require(static_cast<std::size_t>(y.size()) == n_obs_, ErrorKind::validation,
          "forward model: output length mismatch");
  return y;
}

ToyRetrievalModel::ToyRetrievalModel(const scenegen::ToyForwardModel& fm,
                                     scenegen::WavelengthGrids grids, double sza, double p_surf,
                                     scenegen::ForwardKind kind)
    : fm_(fm), grids_(std::move(grids)), sza_(sza), p_surf_(p_surf), kind_(kind), n_obs_(0) {
  for (const auto& g : grids_) n_obs_ += g.wavelengths.size();
}

Vector ToyRetrievalModel::evaluate(const Vector& x) const {
  const auto s = scenegen::Scene::from_state({x.data(), static_cast<std::size_t>(x.size())}, sza_,
                                             p_surf_);
  const auto r = kind_ == scenegen::ForwardKind::linear
                     ? scenegen::linearized_forward(fm_, s, grids_)
                     : fm_.evaluate_unchecked(s, grids_);
  const auto flat = r.flat();
  return Eigen::Map<const Vector>(flat.data(), static_cast<Eigen::Index>(flat.size()));
}

Matrix ToyRetrievalModel::analytic_jacobian(const Vector& x) const {
  auto s = scenegen::Scene::from_state({x.data(), static_cast<std::size_t>(x.size())}, sza_, p_surf_);
  if (kind_ == scenegen::ForwardKind::linear) s = scenegen::linearization_reference(sza_, p_surf_);
  const auto k = fm_.jacobian(s, grids_);
  using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  return Eigen::Map<const RowMat>(k.data(), static_cast<Eigen::Index>(n_obs_),
                                  static_cast<Eigen::Index>(kStateSize));
}

Matrix spd_inverse(const Matrix& m, const char* what) {
  require(m.rows() == m.cols() && m.rows() > 0, ErrorKind::validation,
          std::string(what) + ": matrix must be square and non-empty");
  Eigen::LLT<Matrix> llt(m);
  require(llt.info() == Eigen::Success, ErrorKind::runtime,
          std::string(what) + ": singular or not positive definite");
  Matrix inv = llt.solve(Matrix::Identity(m.rows(), m.cols()));
  require(inv.allFinite(), ErrorKind::runtime, std::string(what) + ": singular");
  return 0.5 * (inv + inv.transpose());
}

void validate(const OEPrior& prior) {
  require(prior.mean.size() == prior.cov.rows() && prior.cov.rows() == prior.cov.cols(),
          ErrorKind::validation, "OE prior: mean/covariance shape mismatch");
  require((prior.cov - prior.cov.transpose()).cwiseAbs().maxCoeff() <=
              1e-12 * (1.0 + prior.cov.cwiseAbs().maxCoeff()),
          ErrorKind::validation, "OE prior: covariance is not symmetric");
  spd_inverse(prior.cov, "prior covariance B");
}

double cost_J(const Vector& x, const Vector& y, const ForwardModelHandle& fm, const Matrix& r,
              const OEPrior& prior) {
  require(static_cast<std::size_t>(y.size()) == fm.observation_size() && r.rows() == y.size() &&
              r.cols() == y.size(),
          ErrorKind::validation, "cost: observation dimensions inconsistent");
  require(x.size() == prior.mean.size() && prior.cov.rows() == x.size(), ErrorKind::validation,
          "cost: state dimensions inconsistent");
  const Matrix r_inv = spd_inverse(r, "noise covariance R");
  const Matrix b_inv = spd_inverse(prior.cov, "prior covariance B");
  const Vector dy = y - fm.evaluate(x);
  const Vector dx = x - prior.mean;
  return dy.dot(r_inv * dy) + dx.dot(b_inv * dx);
}

Matrix finite_difference_jacobian(const ForwardModelHandle& fm, const Vector& x) {
  const auto n = x.size();
  Matrix k(static_cast<Eigen::Index>(fm.observation_size()), n);
  for (Eigen::Index j = 0; j < n; ++j) {
    const double h = 1e-6 * std::max(std::abs(x[j]), 1.0);
    Vector xp = x, xm = x;
    xp[j] += h;
    xm[j] -= h;
    k.col(j) = (fm.evaluate(xp) - fm.evaluate(xm)) / (xp[j] - xm[j]);
  }
  return k;
}

Matrix jacobian(const ForwardModelHandle& fm, const Vector& x) {
  require(static_cast<std::size_t>(x.size()) == fm.state_size(), ErrorKind::validation,
          "jacobian: state length mismatch");
  Matrix k = fm.has_analytic_jacobian() ? fm.analytic_jacobian(x) : finite_difference_jacobian(fm, x);
  require(k.allFinite(), ErrorKind::runtime, "jacobian: non-finite entries");
  return k;
}

Matrix posterior_covariance(const Matrix& k, const Matrix& r, const Matrix& b) {
  require(k.rows() == r.rows() && r.rows() == r.cols() && k.cols() == b.rows() &&
              b.rows() == b.cols(),
          ErrorKind::validation, "posterior covariance: shapes inconsistent");
  const Matrix r_inv = spd_inverse(r, "noise covariance R");
  const Matrix b_inv = spd_inverse(b, "prior covariance B");
  return spd_inverse(k.transpose() * r_inv * k + b_inv, "posterior precision");
}

OEResult solve_map(const Vector& y, const ForwardModelHandle& fm, const Matrix& r,
                   const OEPrior& prior, const SolverOptions& options) {
  validate(prior);
  require(static_cast<std::size_t>(prior.mean.size()) == fm.state_size(), ErrorKind::validation,
          "solve_map: prior and forward model disagree on state size");
  require(static_cast<std::size_t>(y.size()) == fm.observation_size() && r.rows() == y.size() &&
              r.cols() == y.size(),
          ErrorKind::validation, "solve_map: observation dimensions inconsistent");
  require(options.lambda0 >= 0.0 && options.tolerance > 0.0, ErrorKind::validation,
          "solve_map: invalid options");
  const Matrix r_inv = spd_inverse(r, "noise covariance R");
  const Matrix b_inv = spd_inverse(prior.cov, "prior covariance B");
  auto cost = [&](const Vector& x, const Vector& fx) {
    const Vector dy = y - fx;
    const Vector dx = x - prior.mean;
    return dy.dot(r_inv * dy) + dx.dot(b_inv * dx);
  };

  OEResult res;
  Vector x = prior.mean;
  Vector fx = fm.evaluate(x);
  double j_cur = cost(x, fx);
  res.cost_trace.push_back(j_cur);
  double lambda = options.lambda0;

  // damped Gauss-Newton step from x; returns the trial point's cost
  Vector x_try, f_try;
  auto trial = [&](double damping) {
    const Matrix k = jacobian(fm, x);
    const Matrix kt_rinv = k.transpose() * r_inv;
    Matrix lhs = kt_rinv * k + b_inv;
    lhs.diagonal().array() += damping;
    const Vector rhs = kt_rinv * (y - fx) - b_inv * (x - prior.mean);
    Eigen::LLT<Matrix> llt(lhs);
    require(llt.info() == Eigen::Success, ErrorKind::runtime, "solve_map: singular normal equations");
    x_try = x + llt.solve(rhs);
    f_try = fm.evaluate(x_try);
    return f_try.allFinite() ? cost(x_try, f_try) : INFINITY;
  };
  auto accept = [&](double j) {
    x = x_try;
    fx = f_try;
    j_cur = j;
    res.cost_trace.push_back(j_cur);
  };

  while (res.iterations < options.max_iters) {
    ++res.iterations;
    const double j_try = trial(lambda);
    if (j_try <= j_cur) {
      const double dj = j_cur - j_try;
      accept(j_try);
      lambda /= 10.0;
      if (dj < options.tolerance * (1.0 + j_cur)) {
        res.converged = true;
        break;
      }
    } else {
      lambda = std::max(lambda, 1e-12) * 10.0;
    }
  }
  // The cost test stops with residual damping still in x; one undamped step
  // removes it (exactly, for a linear model). Near the minimum J is flat to
  // round-off, so the step is kept unless it raises J beyond that.
  if (res.converged) {
    const double j_try = trial(0.0);
    if (j_try <= j_cur) {
      accept(j_try);
    } else if (j_try <= j_cur + 1e-12 * (1.0 + j_cur)) {
      x = x_try;
      fx = f_try;
    }
  }

  res.x_hat = x;
  const Matrix k = jacobian(fm, x);
  res.s_hat = posterior_covariance(k, r, prior.cov);
  return res;
}

OEPrior toy_prior(const scenegen::SceneRanges& rg) {
  OEPrior p;
  p.mean = Vector(kStateSize);
  p.cov = Matrix::Zero(kStateSize, kStateSize);
  const double xm = 0.5 * (rg.xco2_min + rg.xco2_max);
  const double xs = (rg.xco2_max - rg.xco2_min) / std::sqrt(12.0);
  const double am = 0.5 * (rg.albedo_min + rg.albedo_max);
  const double as = (rg.albedo_max - rg.albedo_min) / std::sqrt(12.0);
  // aerosol mixture moments (plume truncation at zero ignored)
  const double f = rg.aerosol_plume_fraction, c = rg.aerosol_clean_mean;
  const double pm = rg.aerosol_plume_mean, ps = rg.aerosol_plume_sd;
  const double mean = (1 - f) * c + f * pm;
  const double second = (1 - f) * 2.0 * c * c + f * (ps * ps + pm * pm);
  const double aer_sd = std::sqrt(std::max(second - mean * mean, 1e-6));
  p.mean << xm, am, am, am, mean;
  p.cov.diagonal() << xs * xs, as * as, as * as, as * as, aer_sd * aer_sd;
  return p;
}

Matrix toy_noise_covariance(const scenegen::NoiseModel& noise, const Vector& y) {
  Matrix r = Matrix::Zero(y.size(), y.size());
  for (Eigen::Index i = 0; i < y.size(); ++i) {
    const double sd = noise.sd(y[i]);
    r(i, i) = sd * sd;
  }
  return r;
}

}  // namespace xco2::oe
