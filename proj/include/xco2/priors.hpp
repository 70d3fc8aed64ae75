#pragma once

// Conditional-mean priors: an MLP or Conv1D regressor from covariates to
// XCO2, or an externally supplied per-sounding value.

#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "xco2/ndnet.hpp"
#include "xco2/scenegen.hpp"

namespace xco2::priors {

/// Maps ppm labels to zero-mean, unit-variance space.
struct LabelStandardizer {
  double mean = 0.0;
  double sd = 1.0;

  static LabelStandardizer fit(std::span<const double> labels);
  double standardize(double ppm) const { return (ppm - mean) / sd; }
  double destandardize(double z) const { return z * sd + mean; }
  nlohmann::json to_json() const { return {{"mean", mean}, {"sd", sd}}; }
  static LabelStandardizer from_json(const nlohmann::json& j);
};

enum class PriorKind { mlp, conv1d, external };
std::string kind_name(PriorKind k);
PriorKind kind_from_name(const std::string& s);

struct PriorArchitecture {
  std::vector<std::size_t> mlp_hidden{64, 64};
  std::vector<std::size_t> conv_channels{8, 16};
  std::size_t conv_kernel = 5;
  std::size_t pool = 2;
  std::vector<std::size_t> conv_dense{64};

  nlohmann::json to_json() const;
  static PriorArchitecture from_json(const nlohmann::json& j);
};

struct TrainOptions {
  std::size_t epochs = 60;
  std::size_t batch_size = 64;
  double learning_rate = 1e-3;
  std::size_t patience = 10;  // epochs without validation improvement
  std::uint64_t seed = 1;
};

struct FinetuneOptions {
  std::size_t unfreeze_layers = 2;  // trailing parameterized layers
  std::size_t epochs = 10;
  std::size_t batch_size = 32;
  double learning_rate = 5e-4;
  std::uint64_t seed = 1;
};

struct EpochLoss {
  std::size_t epoch = 0;
  double train_loss = 0.0;  // standardized MSE
  double val_loss = 0.0;    // standardized MSE, NaN when no validation set
};

struct TrainReport {
  std::vector<EpochLoss> epochs;
  std::size_t best_epoch = 0;
};

struct PriorModel {
  PriorKind kind = PriorKind::mlp;
  ndnet::NetworkSpec spec;
  ndnet::NetworkParams params;
  scenegen::Normalization normalization;
  LabelStandardizer labels;
  std::size_t channels_per_band = 0;  // conv1d input layout

  bool trained() const { return kind != PriorKind::external; }
  nlohmann::json descriptor() const;
};

/// Model skeleton with freshly initialized weights.
PriorModel make_prior(PriorKind kind, std::size_t feature_count, const PriorArchitecture& arch,
                      const scenegen::Normalization& norm, const LabelStandardizer& labels,
                      std::uint64_t seed);

/// Network input batch for the given dataset rows (raw features in, normalized
/// and reshaped for the model kind).
ndnet::TensorBuffer prior_inputs(const PriorModel& model, const scenegen::Dataset& ds,
                                 std::span<const std::size_t> rows);

PriorModel pretrain_prior(PriorKind kind, const scenegen::Dataset& train,
                          const scenegen::Dataset& val, const scenegen::Normalization& norm,
                          const PriorArchitecture& arch, const TrainOptions& options,
                          TrainReport* report = nullptr);

/// One raw covariate vector -> ppm. External kind returns `external_value`.
double predict_prior(const PriorModel& model, std::span<const double> covariates,
                     std::optional<double> external_value = std::nullopt);

/// Batched prediction over a dataset (ppm). For the external kind the
/// values come from `external`, which must match the dataset length.
std::vector<double> predict_dataset(const PriorModel& model, const scenegen::Dataset& ds,
                                    std::span<const double> external = {});

PriorModel finetune_prior(const PriorModel& model, const scenegen::Dataset& finetune,
                          const FinetuneOptions& options, TrainReport* report = nullptr);

/// Stand-in for an independent product: truth + N(0, sd^2), seeded per sounding id.
std::vector<double> external_surrogate(const scenegen::Dataset& ds, std::uint64_t seed,
                                       double sd = 3.0);

/// NDN1 checkpoint plus a JSON descriptor next to it (path + ".json").
void save_prior(const std::string& path, const PriorModel& model, const nlohmann::json& extra = {});
PriorModel load_prior(const std::string& path);

}  // namespace xco2::priors
