#pragma once

// Optimal Estimation baseline: the Gaussian MAP cost
//   J(x) = (y - F(x))' R^-1 (y - F(x)) + (x - xa)' B^-1 (x - xa)
// minimized by Levenberg-Marquardt, with the analytic posterior covariance
// (K' R^-1 K + B^-1)^-1 at the solution.

#include <Eigen/Dense>
#include <functional>
#include <memory>
#include <vector>

#include "xco2/scenegen.hpp"

namespace xco2::oe {

using Vector = Eigen::VectorXd;
using Matrix = Eigen::MatrixXd;

struct OEPrior {
  Vector mean;  // x_a
  Matrix cov;   // B
};

/// Evaluator for F(x, b) with b baked in.
class ForwardModelHandle {
 public:
  virtual ~ForwardModelHandle() = default;
  virtual std::size_t state_size() const = 0;
  virtual std::size_t observation_size() const = 0;
  virtual Vector evaluate(const Vector& x) const = 0;
  virtual bool has_analytic_jacobian() const { return false; }
  virtual Matrix analytic_jacobian(const Vector& x) const;
};

/// F(x) = A x + offset.
class LinearForwardModel final : public ForwardModelHandle {
 public:
  LinearForwardModel(Matrix a, Vector offset);
  explicit LinearForwardModel(Matrix a);

  std::size_t state_size() const override { return static_cast<std::size_t>(a_.cols()); }
  std::size_t observation_size() const override { return static_cast<std::size_t>(a_.rows()); }
  Vector evaluate(const Vector& x) const override;
  bool has_analytic_jacobian() const override { return true; }
  Matrix analytic_jacobian(const Vector&) const override { return a_; }

 private:
  Matrix a_;
  Vector offset_;
};

/// Wraps any callable as a model without an analytic Jacobian.
class FunctionForwardModel final : public ForwardModelHandle {
 public:
  using Fn = std::function<Vector(const Vector&)>;
  FunctionForwardModel(std::size_t n_state, std::size_t n_obs, Fn fn);

  std::size_t state_size() const override { return n_state_; }
  std::size_t observation_size() const override { return n_obs_; }
  Vector evaluate(const Vector& x) const override;

 private:
  std::size_t n_state_, n_obs_;
  Fn fn_;
};

/// Toy Beer-Lambert model on the common grid with the geometry (sza, p_surf)
/// held fixed. State = (xco2, albedo x3, aerosol).
class ToyRetrievalModel final : public ForwardModelHandle {
 public:
  ToyRetrievalModel(const scenegen::ToyForwardModel& fm, scenegen::WavelengthGrids grids,
                    double sza, double p_surf,
                    scenegen::ForwardKind kind = scenegen::ForwardKind::beer_lambert);

  std::size_t state_size() const override { return scenegen::kStateSize; }
  std::size_t observation_size() const override { return n_obs_; }
  Vector evaluate(const Vector& x) const override;
  bool has_analytic_jacobian() const override { return true; }
  Matrix analytic_jacobian(const Vector& x) const override;

 private:
  const scenegen::ToyForwardModel& fm_;
  scenegen::WavelengthGrids grids_;
  double sza_, p_surf_;
  scenegen::ForwardKind kind_;
  std::size_t n_obs_;
};

/// Cholesky-based inverse of an SPD matrix; throws on failure rather than
/// falling back to a pseudo-inverse.
Matrix spd_inverse(const Matrix& m, const char* what);
void validate(const OEPrior& prior);

double cost_J(const Vector& x, const Vector& y, const ForwardModelHandle& fm, const Matrix& r,
              const OEPrior& prior);

/// Central differences with h = 1e-6 * max(|x_j|, 1).
Matrix finite_difference_jacobian(const ForwardModelHandle& fm, const Vector& x);
/// Analytic when available, finite differences otherwise.
Matrix jacobian(const ForwardModelHandle& fm, const Vector& x);

Matrix posterior_covariance(const Matrix& k, const Matrix& r, const Matrix& b);

struct SolverOptions {
  std::size_t max_iters = 50;
  double lambda0 = 1e-3;
  double tolerance = 1e-8;  // on |dJ| relative to (1 + J)
};

struct OEResult {
  Vector x_hat;
  Matrix s_hat;
  bool converged = false;
  std::size_t iterations = 0;
  std::vector<double> cost_trace;  // J at the start and after every accepted step
};

OEResult solve_map(const Vector& y, const ForwardModelHandle& fm, const Matrix& r,
                   const OEPrior& prior, const SolverOptions& options = {});

/// Gaussian prior moment-matched to the scene sampler.
OEPrior toy_prior(const scenegen::SceneRanges& ranges);
/// Diagonal R from the noise model evaluated on the observation itself.
Matrix toy_noise_covariance(const scenegen::NoiseModel& noise, const Vector& y);

}  // namespace xco2::oe
