#include "xco2/pipeline.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <set>
#include <sstream>

#include "xco2/oe.hpp"

namespace xco2::pipeline {

namespace fs = std::filesystem;
using nlohmann::json;
using scenegen::Split;

// ---------------------------------------------------------------- config

json default_config() {
  const scenegen::SceneRanges r;
  const scenegen::NoiseModel n;
  const auto d = scenegen::Discrepancy::standard();
  const priors::PriorArchitecture pa;
  const priors::TrainOptions pt;
  const priors::FinetuneOptions pf;
  const diffusion::DenoiserArchitecture da;
  const diffusion::DenoiserTrainOptions dt;
  const diffusion::DenoiserFinetuneOptions df;
  return {
      {"seed", 1},
      {"workers", 1},
      {"output_dir", "xco2_run"},
      {"data",
       {{"n_train", 50000},
        {"n_val", 500},
        {"n_test", 500},
        {"n_finetune", 4000},
        {"n_eof_pairs", 600},
        {"channels_per_band", 32},
        {"forward", "beer_lambert"},
        {"ranges",
         {{"xco2_min", r.xco2_min},
          {"xco2_max", r.xco2_max},
          {"albedo_min", r.albedo_min},
          {"albedo_max", r.albedo_max},
          {"sza_min", r.sza_min},
          {"sza_max", r.sza_max},
          {"psurf_min", r.psurf_min},
          {"psurf_max", r.psurf_max},
          {"aerosol_clean_mean", r.aerosol_clean_mean},
          {"aerosol_plume_fraction", r.aerosol_plume_fraction},
          {"aerosol_plume_mean", r.aerosol_plume_mean},
          {"aerosol_plume_sd", r.aerosol_plume_sd}}},
        {"noise", {{"floor", n.floor}, {"frac", n.frac}}},
        {"discrepancy",
         {{"amplitude", d.amplitude},
          {"multiplicative", d.multiplicative},
          {"shape_mean", d.shape_mean},
          {"shape_sd", d.shape_sd},
          {"grid_shift", d.grid_shift}}}}},
      {"eof", {{"mode", "random"}, {"k", 3}, {"reference", "oe"}}},
      {"prior",
       {{"kind", "conv1d"},
        {"architecture", pa.to_json()},
        {"epochs", pt.epochs},
        {"batch_size", pt.batch_size},
        {"learning_rate", pt.learning_rate},
        {"patience", pt.patience},
        {"external_sd", 3.0}}},
      {"diffusion",
       {{"T", 50},
        {"s", 0.008},
        {"architecture", da.to_json()},
        {"ema_decay", 0.999},
        {"epochs", dt.epochs},
        {"batch_size", dt.batch_size},
        {"learning_rate", dt.learning_rate}}},
      {"finetune",
       {{"val_fraction", 0.1},
        {"prior",
         {{"unfreeze_layers", pf.unfreeze_layers},
          {"epochs", pf.epochs},
          {"batch_size", pf.batch_size},
          {"learning_rate", pf.learning_rate}}},
        {"denoiser",
         {{"max_epochs", df.max_epochs},
          {"batch_size", df.batch_size},
          {"learning_rate", df.learning_rate},
          {"window", df.window},
          {"min_improvement", df.min_improvement},
          {"ema_decay", df.ema_decay}}}}},
      {"evaluation",
       {{"n_samples", 10}, {"density_ids", json::array()}, {"density_count", 2}}},
  };
}

namespace {

std::string type_label(const json& j) {
  if (j.is_number_integer()) return "integer";
  if (j.is_number()) return "number";
  return j.type_name();
}

bool compatible(const json& base, const json& user) {
  if (base.is_number_integer()) return user.is_number_integer();
  if (base.is_number()) return user.is_number();
  return base.type() == user.type();
}

void merge_into(json& base, const json& user, const std::string& prefix) {
  for (auto it = user.begin(); it != user.end(); ++it) {
    const std::string key = prefix.empty() ? it.key() : prefix + "." + it.key();
    if (!base.contains(it.key())) fail(ErrorKind::validation, "unknown config key \"" + key + "\"");
    json& slot = base[it.key()];
    if (!compatible(slot, it.value()))
      fail(ErrorKind::validation, "config key \"" + key + "\" must be " + type_label(slot) + ", got " +
                                      type_label(it.value()));
    if (slot.is_object())
      merge_into(slot, it.value(), key);
    else
      slot = it.value();
  }
}

template <typename T>
T get(const json& j, const char* section, const char* key) {
  try {
    return j.at(key).get<T>();
  } catch (const json::exception& e) {
    fail(ErrorKind::validation, std::string("config ") + section + "." + key + ": " + e.what());
  }
}

void check(bool ok, const std::string& what) { require(ok, ErrorKind::validation, "config: " + what); }

template <typename T, std::size_t N>
std::array<T, N> fixed_array(const json& j, const char* section, const char* key) {
  const auto v = get<std::vector<T>>(j, section, key);
  check(v.size() == N, std::string(section) + "." + key + " needs " + std::to_string(N) + " entries");
  std::array<T, N> a{};
  std::copy(v.begin(), v.end(), a.begin());
  return a;
}

}  // namespace

json merge_config(const json& base, const json& user) {
  require(user.is_object() || user.is_null(), ErrorKind::validation, "config must be a JSON object");
  json out = base;
  if (user.is_object()) merge_into(out, user, "");
  return out;
}

ExperimentConfig ExperimentConfig::from_json(const json& user) {
  ExperimentConfig c;
  c.raw = merge_config(default_config(), user);
  const json& j = c.raw;
  c.seed = get<std::uint64_t>(j, "", "seed");
  c.workers = get<unsigned>(j, "", "workers");
  check(c.workers >= 1, "workers must be >= 1");
  c.output_dir = get<std::string>(j, "", "output_dir");
  check(!c.output_dir.empty(), "output_dir must not be empty");

  const json& d = j.at("data");
  c.n_train = get<std::size_t>(d, "data", "n_train");
  c.n_val = get<std::size_t>(d, "data", "n_val");
  c.n_test = get<std::size_t>(d, "data", "n_test");
  c.n_finetune = get<std::size_t>(d, "data", "n_finetune");
  c.n_eof_pairs = get<std::size_t>(d, "data", "n_eof_pairs");
  check(c.n_train >= 2, "data.n_train must be >= 2");
  check(c.n_val >= 1, "data.n_val must be >= 1");
  check(c.n_test >= 1, "data.n_test must be >= 1");
  auto& g = c.generator;
  g.channels_per_band = get<std::size_t>(d, "data", "channels_per_band");
  check(g.channels_per_band >= 4, "data.channels_per_band must be >= 4");
  const auto fwd = get<std::string>(d, "data", "forward");
  check(fwd == "beer_lambert" || fwd == "linear", "data.forward must be beer_lambert or linear");
  g.forward = fwd == "linear" ? scenegen::ForwardKind::linear : scenegen::ForwardKind::beer_lambert;
  const json& r = d.at("ranges");
  auto& rg = g.ranges;
  rg.xco2_min = get<double>(r, "data.ranges", "xco2_min");
  rg.xco2_max = get<double>(r, "data.ranges", "xco2_max");
  rg.albedo_min = get<double>(r, "data.ranges", "albedo_min");
  rg.albedo_max = get<double>(r, "data.ranges", "albedo_max");
  rg.sza_min = get<double>(r, "data.ranges", "sza_min");
  rg.sza_max = get<double>(r, "data.ranges", "sza_max");
  rg.psurf_min = get<double>(r, "data.ranges", "psurf_min");
  rg.psurf_max = get<double>(r, "data.ranges", "psurf_max");
  rg.aerosol_clean_mean = get<double>(r, "data.ranges", "aerosol_clean_mean");
  rg.aerosol_plume_fraction = get<double>(r, "data.ranges", "aerosol_plume_fraction");
  rg.aerosol_plume_mean = get<double>(r, "data.ranges", "aerosol_plume_mean");
  rg.aerosol_plume_sd = get<double>(r, "data.ranges", "aerosol_plume_sd");
  rg.validate();
  g.noise.floor = get<double>(d.at("noise"), "data.noise", "floor");
  g.noise.frac = get<double>(d.at("noise"), "data.noise", "frac");
  check(g.noise.floor > 0 && g.noise.frac >= 0, "data.noise needs floor > 0 and frac >= 0");
  const json& dd = d.at("discrepancy");
  g.discrepancy.amplitude = get<double>(dd, "data.discrepancy", "amplitude");
  g.discrepancy.multiplicative = fixed_array<double, 3>(dd, "data.discrepancy", "multiplicative");
  g.discrepancy.shape_mean = fixed_array<double, 3>(dd, "data.discrepancy", "shape_mean");
  g.discrepancy.shape_sd = fixed_array<double, 3>(dd, "data.discrepancy", "shape_sd");
  g.discrepancy.grid_shift = get<double>(dd, "data.discrepancy", "grid_shift");
  check(g.discrepancy.amplitude >= 0, "data.discrepancy.amplitude must be >= 0");
  check(std::abs(g.discrepancy.grid_shift) <= 1.0, "data.discrepancy.grid_shift must lie in [-1, 1]");

  const json& e = j.at("eof");
  c.eof_mode = sim2real::mode_from_name(get<std::string>(e, "eof", "mode"));
  c.eof_k = get<std::size_t>(e, "eof", "k");
  c.eof_reference = get<std::string>(e, "eof", "reference");
  check(c.eof_reference == "oe" || c.eof_reference == "truth", "eof.reference must be oe or truth");
  check(c.eof_k >= 1 && c.eof_k <= g.channels_per_band, "eof.k must lie in [1, channels_per_band]");
  if (c.eof_mode != sim2real::PerturbMode::none)
    check(c.n_eof_pairs >= 2 * std::max<std::size_t>(10, c.eof_k + 1),
          "data.n_eof_pairs too small for EOF fitting with a held-out half");

  const json& p = j.at("prior");
  c.prior_kind = priors::kind_from_name(get<std::string>(p, "prior", "kind"));
  try {
    c.prior_arch = priors::PriorArchitecture::from_json(p.at("architecture"));
  } catch (const json::exception& ex) {
    fail(ErrorKind::validation, std::string("config prior.architecture: ") + ex.what());
  }
  c.prior_train.epochs = get<std::size_t>(p, "prior", "epochs");
  c.prior_train.batch_size = get<std::size_t>(p, "prior", "batch_size");
  c.prior_train.learning_rate = get<double>(p, "prior", "learning_rate");
  c.prior_train.patience = get<std::size_t>(p, "prior", "patience");
  c.prior_train.seed = derive_seed(c.seed, 0x11);
  c.external_sd = get<double>(p, "prior", "external_sd");
  check(c.prior_train.batch_size >= 1 && c.prior_train.learning_rate > 0,
        "prior.batch_size and prior.learning_rate must be positive");
  check(c.external_sd >= 0, "prior.external_sd must be >= 0");

  const json& df = j.at("diffusion");
  c.T = get<std::size_t>(df, "diffusion", "T");
  c.s = get<double>(df, "diffusion", "s");
  check(c.T >= 2 && c.s > 0, "diffusion needs T >= 2 and s > 0");
  try {
    c.denoiser_arch = diffusion::DenoiserArchitecture::from_json(df.at("architecture"));
  } catch (const json::exception& ex) {
    fail(ErrorKind::validation, std::string("config diffusion.architecture: ") + ex.what());
  }
  c.ema_decay = get<double>(df, "diffusion", "ema_decay");
  check(c.ema_decay >= 0 && c.ema_decay <= 1, "diffusion.ema_decay must lie in [0, 1]");
  c.denoiser_train.epochs = get<std::size_t>(df, "diffusion", "epochs");
  c.denoiser_train.batch_size = get<std::size_t>(df, "diffusion", "batch_size");
  c.denoiser_train.learning_rate = get<double>(df, "diffusion", "learning_rate");
  c.denoiser_train.seed = derive_seed(c.seed, 0x12);
  check(c.denoiser_train.batch_size >= 1 && c.denoiser_train.learning_rate > 0,
        "diffusion.batch_size and diffusion.learning_rate must be positive");

  const json& f = j.at("finetune");
  c.finetune_val_fraction = get<double>(f, "finetune", "val_fraction");
  check(c.finetune_val_fraction > 0 && c.finetune_val_fraction < 1, "finetune.val_fraction must lie in (0, 1)");
  const json& fp = f.at("prior");
  c.prior_finetune.unfreeze_layers = get<std::size_t>(fp, "finetune.prior", "unfreeze_layers");
  c.prior_finetune.epochs = get<std::size_t>(fp, "finetune.prior", "epochs");
  c.prior_finetune.batch_size = get<std::size_t>(fp, "finetune.prior", "batch_size");
  c.prior_finetune.learning_rate = get<double>(fp, "finetune.prior", "learning_rate");
  c.prior_finetune.seed = derive_seed(c.seed, 0x13);
  const json& fd = f.at("denoiser");
  auto& dn = c.denoiser_finetune;
  dn.max_epochs = get<std::size_t>(fd, "finetune.denoiser", "max_epochs");
  dn.batch_size = get<std::size_t>(fd, "finetune.denoiser", "batch_size");
  dn.learning_rate = get<double>(fd, "finetune.denoiser", "learning_rate");
  dn.window = get<std::size_t>(fd, "finetune.denoiser", "window");
  dn.min_improvement = get<double>(fd, "finetune.denoiser", "min_improvement");
  dn.ema_decay = get<double>(fd, "finetune.denoiser", "ema_decay");
  dn.seed = derive_seed(c.seed, 0x14);
  check(dn.window >= 1 && dn.batch_size >= 1 && dn.learning_rate > 0,
        "finetune.denoiser needs window, batch_size and learning_rate > 0");
  check(dn.ema_decay >= 0 && dn.ema_decay <= 1, "finetune.denoiser.ema_decay must lie in [0, 1]");

  const json& ev = j.at("evaluation");
  c.n_samples = get<std::size_t>(ev, "evaluation", "n_samples");
  check(c.n_samples >= 1, "evaluation.n_samples must be >= 1");
  c.density_ids = get<std::vector<std::uint64_t>>(ev, "evaluation", "density_ids");
  c.density_count = get<std::size_t>(ev, "evaluation", "density_count");
  return c;
}

ExperimentConfig ExperimentConfig::load(const std::string& path, const json& overrides) {
  json user = json::object();
  if (!path.empty()) {
    std::ifstream is(path);
    require(static_cast<bool>(is), ErrorKind::usage, "cannot open config file " + path);
    try {
      user = json::parse(is);
    } catch (const json::exception& e) {
      fail(ErrorKind::validation, "config file " + path + ": " + e.what());
    }
  }
  if (!overrides.is_null()) user = merge_config(merge_config(default_config(), user), overrides);
  return from_json(user);
}

json ExperimentConfig::experiment_json() const {
  json j = raw;
  j.erase("workers");
  j.erase("output_dir");
  return j;
}

std::string ExperimentConfig::hash() const { return hex64(fnv1a(experiment_json().dump())); }

// ---------------------------------------------------------------- helpers

std::string dataset_file(Split split) { return "data/" + scenegen::split_name(split) + ".xcd"; }

TimingSummary summarize_timing(std::vector<double> seconds) {
  TimingSummary t;
  t.n = seconds.size();
  if (seconds.empty()) return t;
  std::sort(seconds.begin(), seconds.end());
  auto quantile = [&](double q) {
    const double pos = q * static_cast<double>(seconds.size() - 1);
    const auto lo = static_cast<std::size_t>(std::floor(pos));
    const auto hi = std::min(lo + 1, seconds.size() - 1);
    return seconds[lo] + (pos - static_cast<double>(lo)) * (seconds[hi] - seconds[lo]);
  };
  t.median_ms = 1e3 * quantile(0.5);
  t.p95_ms = 1e3 * quantile(0.95);
  return t;
}

namespace {

constexpr const char* kEOFSimFile = "data/eof_sim.xcd";
constexpr const char* kEOFObsFile = "data/eof_obs.xcd";

void ensure_parent(const std::string& path) {
  const auto parent = fs::path(path).parent_path();
  if (parent.empty()) return;
  std::error_code ec;
  fs::create_directories(parent, ec);
  require(!ec, ErrorKind::runtime, "cannot create directory " + parent.string() + ": " + ec.message());
}

void write_text(const std::string& path, const std::string& text) {
  ensure_parent(path);
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  require(static_cast<bool>(os), ErrorKind::runtime, "cannot write " + path);
  os << text;
  require(static_cast<bool>(os), ErrorKind::runtime, "write failed for " + path);
}

json read_json(const std::string& path) {
  std::ifstream is(path);
  require(static_cast<bool>(is), ErrorKind::runtime, "cannot read " + path);
  try {
    return json::parse(is);
  } catch (const json::exception& e) {
    fail(ErrorKind::validation, path + ": " + e.what());
  }
}

std::string loss_csv(const std::vector<priors::EpochLoss>& rows) {
  std::ostringstream os;
  os.precision(10);
  os << "epoch,train_loss,val_loss\n";
  for (const auto& r : rows) os << r.epoch << "," << r.train_loss << "," << r.val_loss << "\n";
  return os.str();
}

std::string loss_csv(const std::vector<diffusion::LossRow>& rows) {
  std::ostringstream os;
  os.precision(10);
  os << "epoch,train_loss,val_loss\n";
  for (const auto& r : rows) os << r.epoch << "," << r.train_loss << "," << r.val_loss << "\n";
  return os.str();
}

diffusion::DiffusionSchedule schedule_of(const ExperimentConfig& c) {
  return diffusion::build_cosine_schedule(c.T, c.s);
}

}  // namespace

Experiment::Experiment(ExperimentConfig cfg, Logger log) : cfg_(std::move(cfg)), log_(std::move(log)) {}

void Experiment::log(const std::string& msg) const {
  if (log_) log_(msg);
}

std::string Experiment::path(const std::string& relative) const {
  return (fs::path(cfg_.output_dir) / relative).string();
}

json Experiment::meta(const std::string& kind, const json& extra) const {
  json m{{"kind", kind}, {"seed", cfg_.seed}, {"config_hash", cfg_.hash()}, {"config", cfg_.experiment_json()}};
  if (extra.is_object())
    for (auto it = extra.begin(); it != extra.end(); ++it) m[it.key()] = it.value();
  return m;
}

void Experiment::write_meta(const std::string& artifact, const std::string& kind, const json& extra) const {
  write_text(artifact + ".meta.json", meta(kind, extra).dump(2) + "\n");
}

std::string Experiment::require_file(const std::string& relative, const std::string& producer) const {
  const auto p = path(relative);
  require(fs::exists(p), ErrorKind::runtime,
          "missing " + p + ": run `" + producer + "` first (same --out and config)");
  return p;
}

std::vector<double> Experiment::external_values(const scenegen::Dataset& ds) const {
  if (cfg_.prior_kind != priors::PriorKind::external) return {};
  return priors::external_surrogate(ds, derive_seed(cfg_.seed, 0xe7), cfg_.external_sd);
}

scenegen::Dataset Experiment::training_set() const {
  auto train = scenegen::load_dataset(require_file(dataset_file(Split::train), "gen-data"));
  if (cfg_.eof_mode == sim2real::PerturbMode::none) return train;
  const auto eofs = sim2real::load_eofs(require_file(kEOFFile, "fit-eofs"));
  return sim2real::perturb_dataset(train, eofs, cfg_.eof_mode, derive_seed(cfg_.seed, 0xe0f, 1));
}

// ---------------------------------------------------------------- commands

void Experiment::gen_data() {
  const auto& c = cfg_;
  const json cfg_echo = {{"generator_seed", c.seed}};
  auto save = [&](const scenegen::Dataset& ds, const std::string& rel, const char* role) {
    const auto p = path(rel);
    ensure_parent(p);
    scenegen::save_dataset(p, ds);
    json extra{{"split", scenegen::split_name(ds.split)},
               {"role", role},
               {"records", ds.size()},
               {"file_hash", hex64(file_hash(p))}};
    if (ds.split == Split::train) extra["normalization"] = scenegen::Normalization::fit(ds).to_json();
    write_meta(p, "dataset", extra);
    log("wrote " + p + " (" + std::to_string(ds.size()) + " records)");
  };
  save(scenegen::build_dataset(c.n_train, c.generator, c.seed, Split::train, c.workers), dataset_file(Split::train), "simulated");
  save(scenegen::build_dataset(c.n_val, c.generator, c.seed, Split::val, c.workers), dataset_file(Split::val), "simulated");
  save(scenegen::build_finetune_set(c.n_test, c.generator, c.seed, Split::test, c.workers), dataset_file(Split::test), "observed");
  save(scenegen::build_finetune_set(c.n_finetune, c.generator, c.seed, Split::finetune, c.workers),
       dataset_file(Split::finetune), "observed");
  if (c.n_eof_pairs > 0) {
    const auto pairs = scenegen::build_residual_pairs(c.n_eof_pairs, c.generator, c.seed, c.workers);
    save(pairs.simulated, kEOFSimFile, "eof_simulated");
    save(pairs.observed, kEOFObsFile, "eof_observed");
  }
}

namespace {

// Noiseless spectra at each sounding's OE-retrieved state, so the residuals
// carry only what the state cannot absorb.
scenegen::Dataset oe_fitted(const scenegen::Dataset& obs, const scenegen::GeneratorConfig& g, unsigned workers) {
  scenegen::Dataset fit = obs;
  const scenegen::ToyForwardModel fm;
  const auto prior = oe::toy_prior(g.ranges);
  const std::size_t nr = obs.radiance_count();
  parallel_for(obs.size(), workers, [&](std::size_t i) {
    const oe::ToyRetrievalModel model(fm, obs.grids, obs.sza(i), obs.p_surf(i), g.forward);
    const oe::Vector y = Eigen::Map<const oe::Vector>(obs.row(i).data(), static_cast<Eigen::Index>(nr));
    const auto res = oe::solve_map(y, model, oe::toy_noise_covariance(g.noise, y), prior);
    const oe::Vector f = model.evaluate(res.x_hat);
    std::copy(f.data(), f.data() + f.size(), fit.row(i).begin());
  });
  return fit;
}

}  // namespace

void Experiment::fit_eofs() {
  const auto obs = scenegen::load_dataset(require_file(kEOFObsFile, "gen-data"));
  const auto sim = cfg_.eof_reference == "oe" ? oe_fitted(obs, cfg_.generator, cfg_.workers)
                                               : scenegen::load_dataset(require_file(kEOFSimFile, "gen-data"));
  const auto mats = sim2real::residual_matrices(sim, obs);
  // first half for the SVD, second half held out for the coefficient fits
  const auto rows = static_cast<Eigen::Index>(sim.size());
  const Eigen::Index half = rows / 2;
  require(half >= 10 && half >= static_cast<Eigen::Index>(cfg_.eof_k), ErrorKind::validation,
          "fit-eofs: need at least " + std::to_string(2 * std::max<std::size_t>(10, cfg_.eof_k)) +
              " residual pairs, have " + std::to_string(rows));
  sim2real::EOFSet set;
  std::array<sim2real::ResidualMatrix, scenegen::kBandCount> holdout;
  for (std::size_t j = 0; j < scenegen::kBandCount; ++j) {
    const sim2real::ResidualMatrix fit{mats[j].band, mats[j].values.topRows(half)};
    holdout[j] = {mats[j].band, mats[j].values.bottomRows(rows - half)};
    set.bands[j] = sim2real::fit_eofs(fit, cfg_.eof_k);
  }
  sim2real::fit_coefficients(set, holdout);
  const auto p = path(kEOFFile);
  ensure_parent(p);
  sim2real::save_eofs(p, set);
  const auto summary = sim2real::eof_summary(set);
  write_text(path("eofs/eofs.json"), summary.dump(2) + "\n");
  write_meta(p, "eofs",
             {{"file_hash", hex64(file_hash(p))},
              {"reference", cfg_.eof_reference},
              {"fit_rows", half},
              {"holdout_rows", rows - half},
              {"summary", summary}});
  log("wrote " + p + " (K=" + std::to_string(cfg_.eof_k) + ")");
}

void Experiment::train_prior() {
  const auto train = training_set();
  const auto val = scenegen::load_dataset(require_file(dataset_file(Split::val), "gen-data"));
  const auto norm = scenegen::Normalization::fit(train);
  priors::PriorModel model;
  priors::TrainReport report;
  if (cfg_.prior_kind == priors::PriorKind::external) {
    model = priors::make_prior(priors::PriorKind::external, train.feature_count, cfg_.prior_arch, norm,
                               priors::LabelStandardizer::fit(train.labels), cfg_.seed);
  } else {
    model = priors::pretrain_prior(cfg_.prior_kind, train, val, norm, cfg_.prior_arch, cfg_.prior_train, &report);
  }
  const auto p = path(kPriorFile);
  ensure_parent(p);
  const json extra{{"config_hash", cfg_.hash()}, {"seed", cfg_.seed}, {"eof_mode", sim2real::mode_name(cfg_.eof_mode)}};
  priors::save_prior(p, model, extra);
  write_text(path("models/prior_loss.csv"), loss_csv(report.epochs));
  write_meta(p, "prior",
             {{"prior_kind", priors::kind_name(model.kind)},
              {"best_epoch", report.best_epoch},
              {"file_hash", hex64(file_hash(p + ".json"))}});
  log("wrote " + p + " (" + priors::kind_name(model.kind) + ", best epoch " + std::to_string(report.best_epoch) + ")");
}

namespace {

std::string prior_fingerprint(const std::string& p) {
  std::uint64_t h = file_hash(p + ".json");
  if (fs::exists(p)) h = mix64(h ^ file_hash(p));
  return hex64(h);
}

}  // namespace

void Experiment::train_diffusion() {
  const auto prior_path = require_file(kPriorFile, "train-prior");
  const auto prior = priors::load_prior(prior_path);
  const auto train = training_set();
  const auto sched = schedule_of(cfg_);
  const auto norm = prior.trained() ? prior.normalization : scenegen::Normalization::fit(train);
  auto net = diffusion::make_denoiser(train.feature_count, cfg_.denoiser_arch, norm, prior.labels, sched,
                                      cfg_.ema_decay, derive_seed(cfg_.seed, 0x15));
  diffusion::DenoiserReport report;
  net = diffusion::train_denoiser(std::move(net), prior, train, sched, cfg_.denoiser_train, &report,
                                  external_values(train));
  const auto p = path(kDenoiserFile);
  const json extra{{"config_hash", cfg_.hash()}, {"seed", cfg_.seed}, {"prior", kPriorFile},
                   {"prior_hash", prior_fingerprint(prior_path)}};
  diffusion::save_denoiser(p, net, extra);
  write_text(path("models/denoiser_loss.csv"), loss_csv(report.rows));
  write_meta(p, "denoiser", {{"prior", kPriorFile}, {"prior_hash", prior_fingerprint(prior_path)},
                             {"file_hash", hex64(file_hash(p))}});
  log("wrote " + p + " (final train loss " +
      (report.rows.empty() ? std::string("n/a") : std::to_string(report.rows.back().train_loss)) + ")");
}

void Experiment::finetune() {
  const auto den_path = require_file(kDenoiserFile, "train-diffusion");
  const auto prior_path = require_file(kPriorFile, "train-prior");
  const auto ft_all = scenegen::load_dataset(require_file(dataset_file(Split::finetune), "gen-data"));
  require(ft_all.size() >= 2, ErrorKind::validation, "finetune: the finetune split needs at least 2 records");
  const auto prior = priors::load_prior(prior_path);
  auto net = diffusion::load_denoiser(den_path);
  const auto sched = schedule_of(cfg_);

  // deterministic hold-out for the stabilization check
  Rng rng(derive_seed(cfg_.seed, 0xf7));
  const auto order = shuffled_indices(ft_all.size(), rng);
  const auto n_val = std::clamp<std::size_t>(
      static_cast<std::size_t>(std::llround(cfg_.finetune_val_fraction * double(ft_all.size()))), 1,
      ft_all.size() - 1);
  std::vector<std::size_t> val_rows(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_val));
  std::vector<std::size_t> ft_rows(order.begin() + static_cast<std::ptrdiff_t>(n_val), order.end());
  std::sort(val_rows.begin(), val_rows.end());
  std::sort(ft_rows.begin(), ft_rows.end());
  const auto ft = ft_all.subset(ft_rows);
  const auto val = ft_all.subset(val_rows);

  priors::TrainReport prior_report;
  const auto tuned_prior =
      prior.trained() ? priors::finetune_prior(prior, ft, cfg_.prior_finetune, &prior_report) : prior;
  const auto pp = path(kPriorFinetunedFile);
  priors::save_prior(pp, tuned_prior, {{"config_hash", cfg_.hash()}, {"seed", cfg_.seed}, {"finetuned_from", kPriorFile}});
  write_text(path("models/prior_ft_loss.csv"), loss_csv(prior_report.epochs));
  write_meta(pp, "prior", {{"prior_kind", priors::kind_name(tuned_prior.kind)}, {"finetuned_from", kPriorFile},
                           {"file_hash", hex64(file_hash(pp + ".json"))}});

  diffusion::DenoiserReport report;
  net = diffusion::finetune_denoiser(std::move(net), tuned_prior, ft, val, sched, cfg_.denoiser_finetune, &report,
                                     external_values(ft), external_values(val));
  const auto dp = path(kDenoiserFinetunedFile);
  const json extra{{"config_hash", cfg_.hash()}, {"seed", cfg_.seed}, {"prior", kPriorFinetunedFile},
                   {"prior_hash", prior_fingerprint(pp)}, {"stabilized", report.stabilized},
                   {"epochs", report.rows.size()}, {"best_epoch", report.best_epoch}};
  diffusion::save_denoiser(dp, net, extra);
  write_text(path("models/denoiser_ft_loss.csv"), loss_csv(report.rows));
  write_meta(dp, "denoiser", {{"prior", kPriorFinetunedFile}, {"prior_hash", prior_fingerprint(pp)},
                              {"stabilized", report.stabilized}, {"file_hash", hex64(file_hash(dp))}});
  log("wrote " + dp + " after " + std::to_string(report.rows.size()) + " epochs" +
      (report.stabilized ? " (validation loss stabilized)" : " (epoch cap reached)") + ", kept epoch " +
      std::to_string(report.best_epoch));
}

namespace {

struct DatasetChoice {
  std::string path;
  std::string label;
};

std::string stage_tag(const std::string& stage) {
  require(stage == "pre" || stage == "post", ErrorKind::usage, "stage must be pre or post, got " + stage);
  return stage;
}

}  // namespace

RetrievalResult Experiment::retrieve(const RetrieveOptions& o) {
  const auto stage = stage_tag(o.stage);
  const bool post = stage == "post";
  const std::string den_rel = post ? kDenoiserFinetunedFile : kDenoiserFile;
  const std::string prior_rel = post ? kPriorFinetunedFile : kPriorFile;
  const auto den_path = require_file(den_rel, post ? "finetune" : "train-diffusion");
  const auto prior_path = require_file(prior_rel, post ? "finetune" : "train-prior");
  const std::string ds_path = o.dataset.empty()
                                  ? require_file(dataset_file(scenegen::split_from_name(o.split)), "gen-data")
                                  : o.dataset;
  const std::string label = o.dataset.empty() ? o.split : fs::path(o.dataset).stem().string();
  const auto ds = scenegen::load_dataset(ds_path);
  const auto net = diffusion::load_denoiser(den_path);
  const auto prior = priors::load_prior(prior_path);

  // checkpoint consistency: schedule and the prior the denoiser was trained against
  const auto desc = read_json(den_path + ".json");
  require(net.schedule_T == cfg_.T && net.schedule_s == cfg_.s, ErrorKind::validation,
          "checkpoint " + den_path + " uses schedule (T=" + std::to_string(net.schedule_T) + ", s=" +
              std::to_string(net.schedule_s) + "), config asks for (T=" + std::to_string(cfg_.T) + ", s=" +
              std::to_string(cfg_.s) + ")");
  if (desc.contains("run") && desc["run"].contains("prior_hash"))
    require(desc["run"]["prior_hash"].get<std::string>() == prior_fingerprint(prior_path), ErrorKind::validation,
            "checkpoint mismatch: " + den_path + " was trained against a different " + prior_path);
  require(ds.feature_count == net.covariate_count, ErrorKind::validation,
          "dataset " + ds_path + " has " + std::to_string(ds.feature_count) + " covariates, checkpoint expects " +
              std::to_string(net.covariate_count));

  const std::size_t n_samples = o.n_samples.value_or(cfg_.n_samples);
  require(n_samples >= 1, ErrorKind::usage, "n_samples must be >= 1");
  const auto sched = schedule_of(cfg_);
  const auto ext = external_values(ds);
  const std::uint64_t sample_seed = derive_seed(cfg_.seed, 0x5a, post ? 1 : 0);
  std::vector<std::string> lines(ds.size());
  std::vector<double> seconds(ds.size());
  parallel_for(ds.size(), cfg_.workers, [&](std::size_t i) {
    const auto t0 = std::chrono::steady_clock::now();
    const double xp = priors::predict_prior(prior, ds.row(i), ext.empty() ? std::nullopt : std::optional<double>(ext[i]));
    const auto x = diffusion::sample_with_prior(net, ds.row(i), xp, n_samples, sched, sample_seed, ds.ids[i]);
    seconds[i] = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    const auto s = evalmetrics::PosteriorSummary::from_samples(ds.ids[i], x, ds.labels[i]);
    lines[i] = json{{"id", ds.ids[i]}, {"prior", xp}, {"samples", x}, {"mean", s.mean}, {"std", s.std}}.dump();
  });

  const std::string out = o.output.empty() ? path("retrievals/diffusion_" + stage + "_" + label + ".jsonl") : o.output;
  std::string text;
  for (const auto& l : lines) text += l + "\n";
  write_text(out, text);
  RetrievalResult r;
  r.path = out;
  r.records = ds.size();
  r.timing = summarize_timing(seconds);
  write_meta(out, "retrieval",
             {{"method", "diffusion_" + stage},
              {"dataset", ds_path},
              {"dataset_hash", hex64(file_hash(ds_path))},
              {"denoiser", den_rel},
              {"prior", prior_rel},
              {"n_samples", n_samples},
              {"records", ds.size()}});
  json timing{{"records", r.timing.n},
              {"n_samples", n_samples},
              {"T", cfg_.T},
              {"workers", cfg_.workers},
              {"median_ms", r.timing.median_ms},
              {"p95_ms", r.timing.p95_ms}};
  write_text(out + ".timing.json", timing.dump(2) + "\n");
  log("wrote " + out + " (" + std::to_string(ds.size()) + " soundings, median " +
      std::to_string(r.timing.median_ms) + " ms, p95 " + std::to_string(r.timing.p95_ms) + " ms)");
  return r;
}

RetrievalResult Experiment::retrieve_oe(const RetrieveOEOptions& o) {
  const std::string ds_path = o.dataset.empty()
                                  ? require_file(dataset_file(scenegen::split_from_name(o.split)), "gen-data")
                                  : o.dataset;
  const std::string label = o.dataset.empty() ? o.split : fs::path(o.dataset).stem().string();
  const auto ds = scenegen::load_dataset(ds_path);
  const scenegen::ToyForwardModel fm;
  const auto prior = oe::toy_prior(cfg_.generator.ranges);
  const std::size_t nr = ds.radiance_count();
  std::vector<std::string> lines(ds.size());
  std::vector<double> seconds(ds.size());
  std::vector<char> converged(ds.size(), 0);
  parallel_for(ds.size(), cfg_.workers, [&](std::size_t i) {
    const auto t0 = std::chrono::steady_clock::now();
    const auto row = ds.row(i);
    const oe::ToyRetrievalModel model(fm, ds.grids, ds.sza(i), ds.p_surf(i), cfg_.generator.forward);
    const oe::Vector y = Eigen::Map<const oe::Vector>(row.data(), static_cast<Eigen::Index>(nr));
    json rec{{"id", ds.ids[i]}};
    try {
      const auto res = oe::solve_map(y, model, oe::toy_noise_covariance(cfg_.generator.noise, y), prior);
      std::vector<double> x(res.x_hat.data(), res.x_hat.data() + res.x_hat.size());
      std::vector<double> sd(static_cast<std::size_t>(res.s_hat.rows()));
      for (Eigen::Index k = 0; k < res.s_hat.rows(); ++k) sd[static_cast<std::size_t>(k)] = res.s_hat(k, k);
      rec["xco2"] = x[0];
      rec["xco2_sd"] = std::sqrt(sd[0]);
      rec["x_hat"] = x;
      rec["s_hat_diag"] = sd;
      rec["converged"] = res.converged;
      rec["iterations"] = res.iterations;
      rec["cost"] = res.cost_trace.empty() ? 0.0 : res.cost_trace.back();
      converged[i] = res.converged;
    } catch (const Error& e) {
      // a failed sounding is reported in its record; the run continues
      rec["converged"] = false;
      rec["error"] = e.what();
    }
    seconds[i] = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    lines[i] = rec.dump();
  });
  const std::string out = o.output.empty() ? path("retrievals/oe_" + label + ".jsonl") : o.output;
  std::string text;
  for (const auto& l : lines) text += l + "\n";
  write_text(out, text);
  RetrievalResult r;
  r.path = out;
  r.records = ds.size();
  r.converged = static_cast<std::size_t>(std::count(converged.begin(), converged.end(), 1));
  r.timing = summarize_timing(seconds);
  write_meta(out, "retrieval",
             {{"method", "oe"},
              {"dataset", ds_path},
              {"dataset_hash", hex64(file_hash(ds_path))},
              {"records", ds.size()},
              {"converged", r.converged}});
  write_text(out + ".timing.json",
             json{{"records", r.timing.n}, {"median_ms", r.timing.median_ms}, {"p95_ms", r.timing.p95_ms}}.dump(2) + "\n");
  log("wrote " + out + " (" + std::to_string(r.converged) + "/" + std::to_string(ds.size()) + " converged)");
  return r;
}

namespace {

struct LoadedRetrieval {
  std::string method;
  std::map<std::uint64_t, json> records;
};

LoadedRetrieval load_retrieval(const std::string& file, const std::string& truth_hash) {
  const auto meta_path = file + ".meta.json";
  require(fs::exists(meta_path), ErrorKind::validation,
          "retrieval " + file + " has no sidecar " + meta_path + "; cannot verify which dataset it used");
  const auto meta = read_json(meta_path);
  LoadedRetrieval r;
  r.method = meta.value("method", fs::path(file).stem().string());
  const auto dh = meta.value("dataset_hash", std::string());
  require(dh == truth_hash, ErrorKind::validation,
          "dataset hash mismatch: " + file + " was produced from dataset " + dh + ", truth file hashes to " + truth_hash);
  std::ifstream is(file);
  require(static_cast<bool>(is), ErrorKind::runtime, "cannot read " + file);
  std::string line;
  std::size_t n = 0;
  while (std::getline(is, line)) {
    ++n;
    if (line.empty()) continue;
    json rec;
    try {
      rec = json::parse(line);
    } catch (const json::exception& e) {
      fail(ErrorKind::validation, file + ":" + std::to_string(n) + ": " + e.what());
    }
    const auto id = rec.at("id").get<std::uint64_t>();
    require(r.records.emplace(id, std::move(rec)).second, ErrorKind::validation,
            file + ": duplicate sounding id " + std::to_string(id));
  }
  return r;
}

evalmetrics::PosteriorSummary summarize(const json& rec, double truth) {
  evalmetrics::PosteriorSummary s;
  if (rec.contains("samples")) {
    s = evalmetrics::PosteriorSummary::from_samples(rec.at("id").get<std::uint64_t>(),
                                                    rec.at("samples").get<std::vector<double>>(), truth);
  } else {
    s.id = rec.at("id").get<std::uint64_t>();
    s.mean = rec.value("xco2", std::numeric_limits<double>::quiet_NaN());
    s.std = rec.value("xco2_sd", 0.0);
    s.truth = truth;
  }
  return s;
}

}  // namespace

EvaluateResult Experiment::evaluate(const EvaluateOptions& o) {
  require(!o.retrievals.empty(), ErrorKind::usage, "evaluate: give at least one retrieval file");
  const std::string truth_path = o.truth.empty() ? require_file(dataset_file(Split::test), "gen-data") : o.truth;
  const auto truth = scenegen::load_dataset(truth_path);
  const auto truth_hash = hex64(file_hash(truth_path));
  const std::string out_dir = o.output_dir.empty() ? path("reports") : o.output_dir;

  EvaluateResult result;
  std::vector<std::pair<std::string, evalmetrics::CalibrationCurve>> curves;
  std::set<std::uint64_t> truth_ids(truth.ids.begin(), truth.ids.end());
  json report_json = json::array();
  std::string csv = evalmetrics::MetricsReport::csv_header() + "\n";
  std::set<std::string> methods;
  for (const auto& file : o.retrievals) {
    auto r = load_retrieval(file, truth_hash);
    std::string method = r.method;
    for (int k = 2; !methods.insert(method).second; ++k) method = r.method + "_" + std::to_string(k);
    std::size_t missing = 0, extra = 0;
    for (auto id : truth.ids) missing += r.records.count(id) == 0;
    for (const auto& kv : r.records) extra += truth_ids.count(kv.first) == 0;
    require(missing == 0 && extra == 0, ErrorKind::validation,
            "join failed for " + file + ": " + std::to_string(missing) + " of " + std::to_string(truth.size()) +
                " truth ids have no retrieval, " + std::to_string(extra) + " of " +
                std::to_string(r.records.size()) + " retrieval ids are not in the truth dataset");
    std::vector<evalmetrics::PosteriorSummary> sums;
    sums.reserve(truth.size());
    std::size_t dropped = 0;
    for (std::size_t i = 0; i < truth.size(); ++i) {
      auto s = summarize(r.records.at(truth.ids[i]), truth.labels[i]);
      if (!std::isfinite(s.mean)) {
        ++dropped;  // failed OE soundings carry no estimate
        continue;
      }
      sums.push_back(std::move(s));
    }
    require(!sums.empty(), ErrorKind::validation, "evaluate: " + file + " has no usable estimates");
    auto rep = evalmetrics::make_report(method, sums);
    auto rj = rep.to_json();
    rj["source"] = file;
    rj["failed_records"] = dropped;
    report_json.push_back(rj);
    csv += rep.csv_row() + "\n";
    result.reports.push_back(rep);
    if (std::isfinite(rep.miscalibration_area)) {
      auto curve = evalmetrics::calibration_curve(sums);
      const auto cpath = out_dir + "/calibration_" + method + ".csv";
      write_text(cpath, evalmetrics::calibration_csv(curve));
      result.files.push_back(cpath);
      curves.emplace_back(method, std::move(curve));
    }
    // posterior density plots for flagged soundings
    std::vector<std::uint64_t> ids = cfg_.density_ids;
    if (ids.empty())
      for (std::size_t i = 0; i < std::min(cfg_.density_count, truth.size()); ++i) ids.push_back(truth.ids[i]);
    for (auto id : ids) {
      const auto it = r.records.find(id);
      if (it == r.records.end() || !it->second.contains("samples")) continue;
      const auto samples = it->second.at("samples").get<std::vector<double>>();
      if (samples.size() < 2) continue;
      const auto pos = std::find(truth.ids.begin(), truth.ids.end(), id) - truth.ids.begin();
      const auto d = evalmetrics::density_estimate(samples);
      const auto dpath = out_dir + "/density_" + method + "_" + std::to_string(id) + ".svg";
      write_text(dpath, evalmetrics::density_svg(d, method + " sounding " + std::to_string(id),
                                                 truth.labels[static_cast<std::size_t>(pos)]));
      result.files.push_back(dpath);
    }
  }
  const json summary{{"config_hash", cfg_.hash()}, {"seed", cfg_.seed}, {"truth", truth_path},
                     {"truth_hash", truth_hash}, {"reports", report_json}};
  write_text(out_dir + "/metrics.json", summary.dump(2) + "\n");
  write_text(out_dir + "/metrics.csv", csv);
  result.files.push_back(out_dir + "/metrics.json");
  result.files.push_back(out_dir + "/metrics.csv");
  if (!curves.empty()) {
    write_text(out_dir + "/calibration.svg", evalmetrics::calibration_svg(curves));
    result.files.push_back(out_dir + "/calibration.svg");
  }
  for (const auto& rep : result.reports)
    log(rep.method + ": rmse " + std::to_string(rep.rmse) + " ppm, bias " + std::to_string(rep.bias_mean) +
        " +- " + std::to_string(rep.bias_std) + ", miscalibration area " + std::to_string(rep.miscalibration_area));
  return result;
}

EvaluateResult Experiment::run_all() {
  gen_data();
  if (cfg_.eof_mode != sim2real::PerturbMode::none) fit_eofs();
  train_prior();
  train_diffusion();
  finetune();
  const auto pre = retrieve({});
  RetrieveOptions post_opt;
  post_opt.stage = "post";
  const auto post = retrieve(post_opt);
  const auto oe_run = retrieve_oe({});
  EvaluateOptions e;
  e.retrievals = {oe_run.path, pre.path, post.path};
  return evaluate(e);
}

}  // namespace xco2::pipeline
