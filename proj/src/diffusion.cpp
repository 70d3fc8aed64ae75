#include "xco2/diffusion.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <numbers>

namespace xco2::diffusion {

using ndnet::TensorBuffer;

DiffusionSchedule build_cosine_schedule(std::size_t T, double s) {
  require(T >= 2, ErrorKind::validation, "schedule: T must be >= 2");
  require(s > 0.0 && std::isfinite(s), ErrorKind::validation, "schedule: offset s must be > 0");
  DiffusionSchedule d;
  d.T = T;
  d.s = s;
  auto f = [&](double t) {
    const double c = std::cos((t / static_cast<double>(T) + s) / (1.0 + s) * std::numbers::pi / 2.0);
    return c * c;
  };
  const double f0 = f(0.0);
  d.beta.assign(T + 1, 0.0);
  d.alpha.assign(T + 1, 1.0);
  d.alpha_bar.assign(T + 1, 1.0);
  d.gamma0.assign(T + 1, 0.0);
  d.gamma1.assign(T + 1, 0.0);
  d.gamma2.assign(T + 1, 0.0);
  d.beta_tilde.assign(T + 1, 0.0);
  for (std::size_t t = 1; t <= T; ++t) {
    const double ratio = (f(static_cast<double>(t)) / f0) / (f(static_cast<double>(t - 1)) / f0);
    d.beta[t] = std::clamp(1.0 - ratio, 1e-6, 0.999);
    d.alpha[t] = 1.0 - d.beta[t];
    d.alpha_bar[t] = d.alpha_bar[t - 1] * d.alpha[t];
  }
  for (std::size_t t = 1; t <= T; ++t) {
    const double ab = d.alpha_bar[t], ab_prev = d.alpha_bar[t - 1];
    const double sab = std::sqrt(ab), sa = std::sqrt(d.alpha[t]), sab_prev = std::sqrt(ab_prev);
    d.gamma0[t] = d.beta[t] * sab_prev / (1.0 - ab);
    d.gamma1[t] = (1.0 - ab_prev) * sa / (1.0 - ab);
    d.gamma2[t] = 1.0 + (sab - 1.0) * (sa + sab_prev) / (1.0 - ab);
    d.beta_tilde[t] = (1.0 - ab_prev) * d.beta[t] / (1.0 - ab);
  }
  return d;
}

namespace {
void check_t(std::size_t t, const DiffusionSchedule& s) {
  require(t >= 1 && t <= s.T, ErrorKind::validation,
          "diffusion step t=" + std::to_string(t) + " outside [1, " + std::to_string(s.T) + "]");
}
}  // namespace

double forward_noise_with(double x0, double xp, std::size_t t, const DiffusionSchedule& s, double eps) {
  check_t(t, s);
  const double sab = std::sqrt(s.alpha_bar[t]);
  return sab * x0 + (1.0 - sab) * xp + std::sqrt(1.0 - s.alpha_bar[t]) * eps;
}

NoisedLabel forward_noise(double x0, double xp, std::size_t t, const DiffusionSchedule& s, Rng& rng) {
  const double eps = rng.normal();
  return {forward_noise_with(x0, xp, t, s, eps), eps};
}

double reconstruct_x0(double x_t, std::size_t t, double eps_hat, double xp, const DiffusionSchedule& s) {
  check_t(t, s);
  const double sab = std::sqrt(s.alpha_bar[t]);
  return (x_t - (1.0 - sab) * xp - std::sqrt(1.0 - s.alpha_bar[t]) * eps_hat) / sab;
}

double reverse_step_with(double x_t, std::size_t t, double eps_hat, double xp,
                         const DiffusionSchedule& s, double z) {
  const double x0 = reconstruct_x0(x_t, t, eps_hat, xp, s);
  const double noise = t > 1 ? std::sqrt(s.beta_tilde[t]) * z : 0.0;
  return s.gamma0[t] * x0 + s.gamma1[t] * x_t + s.gamma2[t] * xp + noise;
}

double reverse_step(double x_t, std::size_t t, double eps_hat, double xp, const DiffusionSchedule& s,
                    Rng& rng) {
  check_t(t, s);
  const double z = t > 1 ? rng.normal() : 0.0;
  return reverse_step_with(x_t, t, eps_hat, xp, s, z);
}

std::vector<double> timestep_embedding(std::size_t t, std::size_t dim) {
  require(dim >= 2 && dim % 2 == 0, ErrorKind::validation, "timestep embedding: dim must be even");
  const std::size_t half = dim / 2;
  std::vector<double> e(dim);
  for (std::size_t i = 0; i < half; ++i) {
    const double w = std::pow(10000.0, -static_cast<double>(i) / static_cast<double>(half));
    e[i] = std::sin(static_cast<double>(t) * w);
    e[half + i] = std::cos(static_cast<double>(t) * w);
  }
  return e;
}

DenoiserArchitecture DenoiserArchitecture::from_json(const nlohmann::json& j) {
  DenoiserArchitecture a;
  a.hidden = j.at("hidden").get<std::vector<std::size_t>>();
  a.embedding_dim = j.at("embedding_dim").get<std::size_t>();
  return a;
}

nlohmann::json DenoiserNet::descriptor() const {
  return {{"network", ndnet::spec_to_json(spec)},
          {"covariate_count", covariate_count},
          {"embedding_dim", embedding_dim},
          {"normalization", normalization.to_json()},
          {"labels", labels.to_json()},
          {"schedule", {{"T", schedule_T}, {"s", schedule_s}}},
          {"ema_decay", ema.decay}};
}

DenoiserNet make_denoiser(std::size_t covariate_count, const DenoiserArchitecture& arch,
                          const scenegen::Normalization& norm, const LabelStandardizer& labels,
                          const DiffusionSchedule& schedule, double ema_decay, std::uint64_t seed) {
  require(norm.mean.size() == covariate_count, ErrorKind::validation,
          "denoiser: normalization does not match the covariate count");
  DenoiserNet n;
  n.covariate_count = covariate_count;
  n.embedding_dim = arch.embedding_dim;
  timestep_embedding(1, arch.embedding_dim);
  n.spec = ndnet::make_mlp(covariate_count + 2 + arch.embedding_dim, arch.hidden, 1);
  Rng rng(derive_seed(seed, 0xd1f, 0));
  n.params = ndnet::init_params(n.spec, rng);
  n.ema = ndnet::ema_init(n.params, ema_decay);
  n.normalization = norm;
  n.labels = labels;
  n.schedule_T = schedule.T;
  n.schedule_s = schedule.s;
  return n;
}

namespace {

void check_schedule(const DenoiserNet& net, const DiffusionSchedule& s) {
  require(net.schedule_T == s.T && net.schedule_s == s.s, ErrorKind::validation,
          "denoiser was trained with schedule (T=" + std::to_string(net.schedule_T) + ", s=" +
              std::to_string(net.schedule_s) + ") but given (T=" + std::to_string(s.T) +
              ", s=" + std::to_string(s.s) + ")");
}

std::vector<std::vector<double>> embedding_table(const DenoiserNet& net, std::size_t T) {
  std::vector<std::vector<double>> tab(T + 1);
  for (std::size_t t = 1; t <= T; ++t) tab[t] = timestep_embedding(t, net.embedding_dim);
  return tab;
}

/// Network input row: [covariates | x_prior | x_t | embedding].
void fill_row(double* dst, std::span<const double> cov, double xp, double xt,
              const std::vector<double>& emb) {
  std::copy(cov.begin(), cov.end(), dst);
  dst[cov.size()] = xp;
  dst[cov.size() + 1] = xt;
  std::copy(emb.begin(), emb.end(), dst + cov.size() + 2);
}

std::size_t input_width(const DenoiserNet& net) { return net.covariate_count + 2 + net.embedding_dim; }

double run_epoch(DenoiserNet& net, const DenoisingSet& set, const DiffusionSchedule& s,
                 const std::vector<std::vector<double>>& emb, std::size_t batch,
                 ndnet::AdamState& adam, Rng& rng, std::size_t epoch) {
  const auto order = shuffled_indices(set.n, rng);
  const std::size_t w = input_width(net);
  double total = 0.0;
  std::size_t batches = 0;
  for (std::size_t start = 0; start < set.n; start += batch) {
    const std::size_t b = std::min(set.n, start + batch) - start;
    TensorBuffer in({b, w});
    std::vector<double> eps(b);
    for (std::size_t i = 0; i < b; ++i) {
      const std::size_t r = order[start + i];
      const std::size_t t = 1 + rng.index(s.T);
      const auto nl = forward_noise(set.x0[r], set.x_prior[r], t, s, rng);
      eps[i] = nl.eps;
      fill_row(in.values.data() + i * w, {set.covariates.data() + r * set.features, set.features},
               set.x_prior[r], nl.x_t, emb[t]);
    }
    const auto trace = ndnet::forward_trace(net.params, net.spec, in);
    TensorBuffer grad({b, 1});
    double loss = 0.0;
    for (std::size_t i = 0; i < b; ++i) {
      const double r = trace.output[i] - eps[i];
      loss += r * r;
      grad[i] = 2.0 * r / static_cast<double>(b);
    }
    loss /= static_cast<double>(b);
    require(std::isfinite(loss), ErrorKind::runtime,
            "denoiser training diverged: non-finite loss at epoch " + std::to_string(epoch) +
                ", batch " + std::to_string(batches));
    const auto g = ndnet::backward(net.params, net.spec, trace, grad);
    ndnet::adam_step(net.params, g.params, adam);
    ndnet::ema_update(net.ema, net.params);
    total += loss;
    ++batches;
  }
  return batches ? total / static_cast<double>(batches) : 0.0;
}

}  // namespace

DenoisingSet make_denoising_set(const DenoiserNet& net, const priors::PriorModel& prior,
                                const scenegen::Dataset& ds, std::span<const double> external) {
  require(ds.feature_count == net.covariate_count, ErrorKind::validation,
          "denoiser expects " + std::to_string(net.covariate_count) + " covariates, dataset has " +
              std::to_string(ds.feature_count));
  DenoisingSet set;
  set.n = ds.size();
  set.features = ds.feature_count;
  set.covariates = ds.features;
  for (std::size_t i = 0; i < set.n; ++i)
    net.normalization.normalize({set.covariates.data() + i * set.features, set.features});
  const auto xp = priors::predict_dataset(prior, ds, external);
  set.x0.resize(set.n);
  set.x_prior.resize(set.n);
  for (std::size_t i = 0; i < set.n; ++i) {
    set.x0[i] = net.labels.standardize(ds.labels[i]);
    set.x_prior[i] = net.labels.standardize(xp[i]);
  }
  return set;
}

std::vector<double> predict_noise(const DenoiserNet& net, const ndnet::NetworkParams& weights,
                                  std::span<const double> covariates, std::span<const double> xp,
                                  std::span<const double> xt, std::span<const std::size_t> t) {
  const std::size_t b = xt.size();
  require(xp.size() == b && t.size() == b && covariates.size() == b * net.covariate_count,
          ErrorKind::validation, "predict_noise: batch inputs disagree in length");
  const std::size_t w = input_width(net);
  TensorBuffer in({b, w});
  for (std::size_t i = 0; i < b; ++i)
    fill_row(in.values.data() + i * w,
             covariates.subspan(i * net.covariate_count, net.covariate_count), xp[i], xt[i],
             timestep_embedding(t[i], net.embedding_dim));
  return ndnet::forward(weights, net.spec, in).values;
}

double denoising_loss(const DenoiserNet& net, const ndnet::NetworkParams& weights,
                      const DenoisingSet& set, const DiffusionSchedule& s, std::uint64_t seed) {
  if (set.n == 0) return std::numeric_limits<double>::quiet_NaN();
  std::vector<double> xt(set.n), eps(set.n);
  std::vector<std::size_t> ts(set.n);
  for (std::size_t i = 0; i < set.n; ++i) {
    Rng rng(derive_seed(seed, i, 0x105));
    ts[i] = 1 + rng.index(s.T);
    const auto nl = forward_noise(set.x0[i], set.x_prior[i], ts[i], s, rng);
    xt[i] = nl.x_t;
    eps[i] = nl.eps;
  }
  const auto pred = predict_noise(net, weights, set.covariates, set.x_prior, xt, ts);
  double l = 0.0;
  for (std::size_t i = 0; i < set.n; ++i) l += (pred[i] - eps[i]) * (pred[i] - eps[i]);
  return l / static_cast<double>(set.n);
}

DenoiserNet train_denoiser(DenoiserNet net, const DenoisingSet& train, const DiffusionSchedule& s,
                           const DenoiserTrainOptions& opt, DenoiserReport* report) {
  check_schedule(net, s);
  require(opt.batch_size >= 1, ErrorKind::validation, "train_denoiser: batch size must be positive");
  DenoiserReport rep;
  if (train.n > 0) {
    const auto emb = embedding_table(net, s.T);
    auto adam = ndnet::adam_init(net.params, {opt.learning_rate});
    Rng rng(derive_seed(opt.seed, 0xd17, 0));
    for (std::size_t e = 1; e <= opt.epochs; ++e)
      rep.rows.push_back({e, run_epoch(net, train, s, emb, opt.batch_size, adam, rng, e),
                          std::numeric_limits<double>::quiet_NaN()});
  }
  if (report) *report = std::move(rep);
  return net;
}

DenoiserNet train_denoiser(DenoiserNet net, const priors::PriorModel& prior,
                           const scenegen::Dataset& train, const DiffusionSchedule& s,
                           const DenoiserTrainOptions& opt, DenoiserReport* report,
                           std::span<const double> external) {
  const auto set = make_denoising_set(net, prior, train, external);
  return train_denoiser(std::move(net), set, s, opt, report);
}

DenoiserNet finetune_denoiser(DenoiserNet net, const priors::PriorModel& prior,
                              const scenegen::Dataset& finetune, const scenegen::Dataset& val,
                              const DiffusionSchedule& s, const DenoiserFinetuneOptions& opt,
                              DenoiserReport* report, std::span<const double> ext_ft,
                              std::span<const double> ext_val) {
  check_schedule(net, s);
  DenoiserReport rep;
  if (finetune.size() == 0) {
    if (report) *report = std::move(rep);
    return net;
  }
  require(opt.window >= 1 && opt.batch_size >= 1, ErrorKind::validation,
          "finetune_denoiser: window and batch size must be positive");
  const auto train = make_denoising_set(net, prior, finetune, ext_ft);
  const auto vset = make_denoising_set(net, prior, val.size() ? val : finetune,
                                       val.size() ? ext_val : ext_ft);
  const auto emb = embedding_table(net, s.T);
  net.ema.decay = opt.ema_decay;
  auto adam = ndnet::adam_init(net.params, {opt.learning_rate});
  Rng rng(derive_seed(opt.seed, 0xd18, 0));
  const std::uint64_t val_seed = derive_seed(opt.seed, 0xd19, 0);
  std::vector<double> history;
  // scored on the shadow weights that sampling uses; the best epoch is kept
  double best = denoising_loss(net, net.ema.shadow, vset, s, val_seed);
  auto best_params = net.params;
  auto best_ema = net.ema;
  for (std::size_t e = 1; e <= opt.max_epochs; ++e) {
    const double tl = run_epoch(net, train, s, emb, opt.batch_size, adam, rng, e);
    const double vl = denoising_loss(net, net.ema.shadow, vset, s, val_seed);
    require(std::isfinite(vl), ErrorKind::runtime,
            "denoiser finetuning: non-finite validation loss at epoch " + std::to_string(e));
    rep.rows.push_back({e, tl, vl});
    history.push_back(vl);
    if (vl < best) {
      best = vl;
      best_params = net.params;
      best_ema = net.ema;
      rep.best_epoch = e;
    }
    if (history.size() > opt.window) {
      // best before the window vs best inside it
      const auto split = history.end() - static_cast<std::ptrdiff_t>(opt.window);
      const double before = *std::min_element(history.begin(), split);
      const double inside = *std::min_element(split, history.end());
      if (before - inside < opt.min_improvement) {
        rep.stabilized = true;
        break;
      }
    }
  }
  net.params = std::move(best_params);
  net.ema = std::move(best_ema);
  if (report) *report = std::move(rep);
  return net;
}

std::vector<double> sample_with_prior(const DenoiserNet& net, std::span<const double> covariates,
                                      double prior_ppm, std::size_t n, const DiffusionSchedule& s,
                                      std::uint64_t seed, std::uint64_t sounding_id) {
  check_schedule(net, s);
  require(n >= 1, ErrorKind::validation, "sample_posterior: n_samples must be >= 1");
  require(covariates.size() == net.covariate_count, ErrorKind::validation,
          "sample_posterior: covariate length mismatch");
  require(std::isfinite(prior_ppm), ErrorKind::validation, "sample_posterior: non-finite prior value");
  const auto cov = net.normalization.normalized(covariates);
  const double xp = net.labels.standardize(prior_ppm);
  const std::size_t w = input_width(net);

  std::vector<Rng> rngs;
  rngs.reserve(n);
  std::vector<double> x(n);
  for (std::size_t k = 0; k < n; ++k) {
    rngs.emplace_back(derive_seed(seed, sounding_id, k));
    x[k] = xp + rngs[k].normal();
  }
  TensorBuffer in({n, w});
  for (std::size_t k = 0; k < n; ++k) fill_row(in.values.data() + k * w, cov, xp, 0.0, std::vector<double>(net.embedding_dim));
  for (std::size_t t = s.T; t >= 1; --t) {
    const auto emb = timestep_embedding(t, net.embedding_dim);
    for (std::size_t k = 0; k < n; ++k) {
      double* row = in.values.data() + k * w;
      row[net.covariate_count + 1] = x[k];
      std::copy(emb.begin(), emb.end(), row + net.covariate_count + 2);
    }
    const auto eps = ndnet::forward(net.ema.shadow, net.spec, in);
    for (std::size_t k = 0; k < n; ++k) x[k] = reverse_step(x[k], t, eps[k], xp, s, rngs[k]);
  }
  for (auto& v : x) v = net.labels.destandardize(v);
  return x;
}

std::vector<double> sample_posterior(const DenoiserNet& net, const priors::PriorModel& prior,
                                     std::span<const double> covariates, std::size_t n,
                                     const DiffusionSchedule& s, std::uint64_t seed,
                                     std::uint64_t sounding_id, std::optional<double> external) {
  const double xp = priors::predict_prior(prior, covariates, external);
  return sample_with_prior(net, covariates, xp, n, s, seed, sounding_id);
}

void save_denoiser(const std::string& path, const DenoiserNet& net, const nlohmann::json& extra) {
  ndnet::save_params(path, net.spec, net.ema.shadow);
  ndnet::save_params(path + ".raw", net.spec, net.params);
  nlohmann::json d = net.descriptor();
  if (!extra.is_null()) d["run"] = extra;
  std::ofstream os(path + ".json", std::ios::trunc);
  require(static_cast<bool>(os), ErrorKind::runtime, "cannot write " + path + ".json");
  os << d.dump(2) << "\n";
}

DenoiserNet load_denoiser(const std::string& path) {
  std::ifstream is(path + ".json");
  require(static_cast<bool>(is), ErrorKind::runtime, "missing denoiser descriptor " + path + ".json");
  nlohmann::json d;
  try {
    d = nlohmann::json::parse(is);
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::validation, path + ".json: " + e.what());
  }
  DenoiserNet n;
  n.spec = ndnet::spec_from_json(d.at("network"));
  n.covariate_count = d.at("covariate_count").get<std::size_t>();
  n.embedding_dim = d.at("embedding_dim").get<std::size_t>();
  n.normalization = scenegen::Normalization::from_json(d.at("normalization"));
  n.labels = LabelStandardizer::from_json(d.at("labels"));
  n.schedule_T = d.at("schedule").at("T").get<std::size_t>();
  n.schedule_s = d.at("schedule").at("s").get<double>();
  n.params = ndnet::load_params(path + ".raw", n.spec);
  n.ema = ndnet::ema_init(ndnet::load_params(path, n.spec), d.at("ema_decay").get<double>());
  return n;
}

}  // namespace xco2::diffusion
