#pragma once

// Experiment orchestration behind the command-line tool: a schema-checked
// JSON configuration and one function per pipeline command. Every artifact
// gets a "<file>.meta.json" sidecar carrying the config echo, its hash and
// the seed.

#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "xco2/diffusion.hpp"
#include "xco2/evalmetrics.hpp"
#include "xco2/priors.hpp"
#include "xco2/scenegen.hpp"
#include "xco2/sim2real.hpp"

namespace xco2::pipeline {

/// Fully populated default configuration; doubles as the schema.
nlohmann::json default_config();

/// Overlays `user` onto `base`. Keys absent from `base` and type changes are
/// validation errors naming the offending path.
nlohmann::json merge_config(const nlohmann::json& base, const nlohmann::json& user);

struct ExperimentConfig {
  nlohmann::json raw;  // effective configuration
  std::uint64_t seed = 1;
  unsigned workers = 1;
  std::string output_dir;

  std::size_t n_train = 0, n_val = 0, n_test = 0, n_finetune = 0, n_eof_pairs = 0;
  scenegen::GeneratorConfig generator;

  sim2real::PerturbMode eof_mode = sim2real::PerturbMode::random;
  std::size_t eof_k = 3;
  std::string eof_reference = "oe";  // residual reference state: oe | truth

  priors::PriorKind prior_kind = priors::PriorKind::conv1d;
  priors::PriorArchitecture prior_arch;
  priors::TrainOptions prior_train;
  double external_sd = 3.0;

  std::size_t T = 50;
  double s = 0.008;
  diffusion::DenoiserArchitecture denoiser_arch;
  double ema_decay = 0.999;
  diffusion::DenoiserTrainOptions denoiser_train;

  priors::FinetuneOptions prior_finetune;
  diffusion::DenoiserFinetuneOptions denoiser_finetune;
  double finetune_val_fraction = 0.1;

  std::size_t n_samples = 10;
  std::vector<std::uint64_t> density_ids;
  std::size_t density_count = 2;  // used when density_ids is empty

  /// Merges over the defaults, then range-checks every field.
  static ExperimentConfig from_json(const nlohmann::json& user);
  /// Reads a JSON file (empty path = defaults) and applies `overrides` on top.
  static ExperimentConfig load(const std::string& path, const nlohmann::json& overrides = {});

  /// Config echo used in artifacts: everything except the runtime-only keys
  /// (workers, output_dir), which do not affect results.
  nlohmann::json experiment_json() const;
  std::string hash() const;
};

struct RetrieveOptions {
  std::string stage = "pre";           // pre | post (finetuned checkpoints)
  std::string split = "test";          // dataset under <out>/data unless `dataset` is set
  std::string dataset;                 // explicit XCD1 path
  std::optional<std::size_t> n_samples;
  std::string output;                  // default <out>/retrievals/diffusion_<stage>_<split>.jsonl
};

struct RetrieveOEOptions {
  std::string split = "test";
  std::string dataset;
  std::string output;                  // default <out>/retrievals/oe_<split>.jsonl
};

struct TimingSummary {
  std::size_t n = 0;
  double median_ms = 0.0;
  double p95_ms = 0.0;
};

struct RetrievalResult {
  std::string path;
  std::size_t records = 0;
  std::size_t converged = 0;  // OE only
  TimingSummary timing;
};

struct EvaluateOptions {
  std::vector<std::string> retrievals;
  std::string truth;  // XCD1 dataset; default <out>/data/test.xcd
  std::string output_dir;  // default <out>/reports
};

struct EvaluateResult {
  std::vector<evalmetrics::MetricsReport> reports;
  std::vector<std::string> files;
};

class Experiment {
 public:
  using Logger = std::function<void(const std::string&)>;

  explicit Experiment(ExperimentConfig cfg, Logger log = {});

  const ExperimentConfig& config() const { return cfg_; }
  /// Path under the output directory.
  std::string path(const std::string& relative) const;

  void gen_data();
  void fit_eofs();
  void train_prior();
  void train_diffusion();
  void finetune();
  RetrievalResult retrieve(const RetrieveOptions& options = {});
  RetrievalResult retrieve_oe(const RetrieveOEOptions& options = {});
  EvaluateResult evaluate(const EvaluateOptions& options);

  /// Runs gen-data through retrieve for both stages plus OE, then evaluate.
  EvaluateResult run_all();

 private:
  void log(const std::string& msg) const;
  nlohmann::json meta(const std::string& kind, const nlohmann::json& extra = {}) const;
  void write_meta(const std::string& artifact, const std::string& kind,
                  const nlohmann::json& extra = {}) const;
  std::string require_file(const std::string& relative, const std::string& producer) const;
  scenegen::Dataset training_set() const;
  std::vector<double> external_values(const scenegen::Dataset& ds) const;

  ExperimentConfig cfg_;
  Logger log_;
};

/// Relative artifact locations.
std::string dataset_file(scenegen::Split split);
inline constexpr const char* kEOFFile = "eofs/eofs.eof1";
inline constexpr const char* kPriorFile = "models/prior.ndn";
inline constexpr const char* kPriorFinetunedFile = "models/prior_ft.ndn";
inline constexpr const char* kDenoiserFile = "models/denoiser.ndn";
inline constexpr const char* kDenoiserFinetunedFile = "models/denoiser_ft.ndn";

/// Median and 95th percentile (linear interpolation) of per-sounding times.
TimingSummary summarize_timing(std::vector<double> seconds);

}  // namespace xco2::pipeline
