#pragma once

// Conditional diffusion over standardized XCO2 with a prior-shifted kernel:
//   q(x_t | x_0) = N(sqrt(abar_t) x_0 + (1 - sqrt(abar_t)) x_prior, 1 - abar_t)
// so the chain terminates at N(x_prior, 1).

#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "xco2/ndnet.hpp"
#include "xco2/priors.hpp"
#include "xco2/scenegen.hpp"

namespace xco2::diffusion {

using priors::LabelStandardizer;

/// Index t runs 1..T; entry 0 holds alpha_bar_0 = 1 and zeros elsewhere.
struct DiffusionSchedule {
  std::size_t T = 0;
  double s = 0.008;
  std::vector<double> beta, alpha, alpha_bar;
  std::vector<double> gamma0, gamma1, gamma2, beta_tilde;

  nlohmann::json to_json() const { return {{"T", T}, {"s", s}}; }
};

DiffusionSchedule build_cosine_schedule(std::size_t T, double s = 0.008);

struct NoisedLabel {
  double x_t = 0.0;
  double eps = 0.0;
};

double forward_noise_with(double x0, double x_prior, std::size_t t, const DiffusionSchedule& s,
                          double eps);
NoisedLabel forward_noise(double x0, double x_prior, std::size_t t, const DiffusionSchedule& s,
                          Rng& rng);

double reconstruct_x0(double x_t, std::size_t t, double eps_hat, double x_prior,
                      const DiffusionSchedule& s);
double reverse_step_with(double x_t, std::size_t t, double eps_hat, double x_prior,
                         const DiffusionSchedule& s, double z);
/// Draws z ~ N(0, 1) only for t > 1.
double reverse_step(double x_t, std::size_t t, double eps_hat, double x_prior,
                    const DiffusionSchedule& s, Rng& rng);

/// Sinusoidal embedding: [sin(t w_i), cos(t w_i)] with w_i = 10000^(-i / (dim/2)).
std::vector<double> timestep_embedding(std::size_t t, std::size_t dim);

struct DenoiserArchitecture {
  std::vector<std::size_t> hidden{128, 128};
  std::size_t embedding_dim = 16;

  nlohmann::json to_json() const { return {{"hidden", hidden}, {"embedding_dim", embedding_dim}}; }
  static DenoiserArchitecture from_json(const nlohmann::json& j);
};

/// epsilon_theta(y, x_prior, x_t, t): dense network over
/// [normalized covariates | x_prior | x_t | embedding(t)].
struct DenoiserNet {
  ndnet::NetworkSpec spec;
  ndnet::NetworkParams params;  // raw weights (training)
  ndnet::EMAState ema;          // shadow weights (inference)
  std::size_t covariate_count = 0;
  std::size_t embedding_dim = 16;
  scenegen::Normalization normalization;
  LabelStandardizer labels;
  std::size_t schedule_T = 0;
  double schedule_s = 0.0;

  nlohmann::json descriptor() const;
};

DenoiserNet make_denoiser(std::size_t covariate_count, const DenoiserArchitecture& arch,
                          const scenegen::Normalization& norm, const LabelStandardizer& labels,
                          const DiffusionSchedule& schedule, double ema_decay, std::uint64_t seed);

/// Standardized training tuples for a dataset under a fixed prior.
struct DenoisingSet {
  std::size_t n = 0, features = 0;
  std::vector<double> covariates;  // normalized, row-major
  std::vector<double> x0;          // standardized labels
  std::vector<double> x_prior;     // standardized prior values
};

DenoisingSet make_denoising_set(const DenoiserNet& net, const priors::PriorModel& prior,
                                const scenegen::Dataset& ds, std::span<const double> external = {});

/// Batched epsilon-hat for rows of `covariates` (normalized, [B x F]).
std::vector<double> predict_noise(const DenoiserNet& net, const ndnet::NetworkParams& weights,
                                  std::span<const double> covariates,
                                  std::span<const double> x_prior, std::span<const double> x_t,
                                  std::span<const std::size_t> t);

/// Mean squared denoising error with (t, eps) fixed per record by `seed`.
double denoising_loss(const DenoiserNet& net, const ndnet::NetworkParams& weights,
                      const DenoisingSet& set, const DiffusionSchedule& s, std::uint64_t seed);

struct DenoiserTrainOptions {
  std::size_t epochs = 30;
  std::size_t batch_size = 128;
  double learning_rate = 1e-3;
  std::uint64_t seed = 1;
};

struct DenoiserFinetuneOptions {
  std::size_t max_epochs = 40;
  std::size_t batch_size = 64;
  double learning_rate = 3e-4;
  std::size_t window = 5;         // evaluations
  double min_improvement = 1e-4;  // on validation loss over the window
  double ema_decay = 0.99;
  std::uint64_t seed = 1;
};

struct LossRow {
  std::size_t epoch = 0;
  double train_loss = 0.0;
  double val_loss = 0.0;  // NaN when not evaluated
};

struct DenoiserReport {
  std::vector<LossRow> rows;
  bool stabilized = false;
  std::size_t best_epoch = 0;  // 0: the incoming weights were kept
};

/// Continues training from `net`'s current weights; the prior stays fixed.
DenoiserNet train_denoiser(DenoiserNet net, const DenoisingSet& train, const DiffusionSchedule& s,
                           const DenoiserTrainOptions& options, DenoiserReport* report = nullptr);
DenoiserNet train_denoiser(DenoiserNet net, const priors::PriorModel& prior,
                           const scenegen::Dataset& train, const DiffusionSchedule& s,
                           const DenoiserTrainOptions& options, DenoiserReport* report = nullptr,
                           std::span<const double> external = {});

/// Trains against the finetuned prior until the validation loss stops
/// improving by `min_improvement` over `window` evaluations.
DenoiserNet finetune_denoiser(DenoiserNet net, const priors::PriorModel& finetuned_prior,
                              const scenegen::Dataset& finetune, const scenegen::Dataset& val,
                              const DiffusionSchedule& s, const DenoiserFinetuneOptions& options,
                              DenoiserReport* report = nullptr,
                              std::span<const double> external_finetune = {},
                              std::span<const double> external_val = {});

/// Posterior samples in ppm for one sounding. Sample k uses the stream
/// derive_seed(seed, sounding_id, k), so results do not depend on batching.
std::vector<double> sample_posterior(const DenoiserNet& net, const priors::PriorModel& prior,
                                     std::span<const double> covariates, std::size_t n_samples,
                                     const DiffusionSchedule& s, std::uint64_t seed,
                                     std::uint64_t sounding_id = 0,
                                     std::optional<double> external_value = std::nullopt);

/// Same, with the prior value given in ppm.
std::vector<double> sample_with_prior(const DenoiserNet& net, std::span<const double> covariates,
                                      double prior_ppm, std::size_t n_samples,
                                      const DiffusionSchedule& s, std::uint64_t seed,
                                      std::uint64_t sounding_id = 0);

/// Writes EMA weights to `path`, raw weights to `path + ".raw"` and the
/// descriptor to `path + ".json"`.
void save_denoiser(const std::string& path, const DenoiserNet& net, const nlohmann::json& extra = {});
DenoiserNet load_denoiser(const std::string& path);

}  // namespace xco2::diffusion
