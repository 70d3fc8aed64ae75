#include "xco2/priors.hpp"

#include <cmath>
#include <fstream>
#include <limits>
#include <memory>

namespace xco2::priors {

using ndnet::TensorBuffer;

LabelStandardizer LabelStandardizer::fit(std::span<const double> labels) {
  require(labels.size() >= 2, ErrorKind::validation, "label standardizer: need at least two labels");
  double m = 0.0;
  for (double v : labels) m += v;
  m /= static_cast<double>(labels.size());
  double ss = 0.0;
  for (double v : labels) ss += (v - m) * (v - m);
  double sd = std::sqrt(ss / static_cast<double>(labels.size() - 1));
  if (!(sd > 0.0)) sd = 1.0;
  return {m, sd};
}

LabelStandardizer LabelStandardizer::from_json(const nlohmann::json& j) {
  LabelStandardizer s{j.at("mean").get<double>(), j.at("sd").get<double>()};
  require(s.sd > 0.0 && std::isfinite(s.mean), ErrorKind::validation, "label standardizer: sd must be > 0");
  return s;
}

std::string kind_name(PriorKind k) {
  switch (k) {
    case PriorKind::conv1d:
      return "conv1d";
    case PriorKind::external:
      return "external";
    case PriorKind::mlp:
      break;
  }
  return "mlp";
}

PriorKind kind_from_name(const std::string& s) {
  if (s == "mlp") return PriorKind::mlp;
  if (s == "conv1d") return PriorKind::conv1d;
  if (s == "external") return PriorKind::external;
  fail(ErrorKind::validation, "unknown prior kind \"" + s + "\" (expected mlp, conv1d or external)");
}

nlohmann::json PriorArchitecture::to_json() const {
  return {{"mlp_hidden", mlp_hidden},
          {"conv_channels", conv_channels},
          {"conv_kernel", conv_kernel},
          {"pool", pool},
          {"conv_dense", conv_dense}};
}

PriorArchitecture PriorArchitecture::from_json(const nlohmann::json& j) {
  PriorArchitecture a;
  a.mlp_hidden = j.at("mlp_hidden").get<std::vector<std::size_t>>();
  a.conv_channels = j.at("conv_channels").get<std::vector<std::size_t>>();
  a.conv_kernel = j.at("conv_kernel").get<std::size_t>();
  a.pool = j.at("pool").get<std::size_t>();
  a.conv_dense = j.at("conv_dense").get<std::vector<std::size_t>>();
  return a;
}

nlohmann::json PriorModel::descriptor() const {
  nlohmann::json j{{"kind", kind_name(kind)}, {"labels", labels.to_json()}};
  if (trained()) {
    j["network"] = ndnet::spec_to_json(spec);
    j["normalization"] = normalization.to_json();
    j["channels_per_band"] = channels_per_band;
  }
  return j;
}

namespace {

constexpr std::size_t kConvChannels = scenegen::kBandCount + 2;  // bands + sza + p_surf

ndnet::NetworkSpec conv_spec(std::size_t n, const PriorArchitecture& a) {
  ndnet::NetworkSpec s;
  s.input_shape = {kConvChannels, n};
  std::size_t cin = kConvChannels;
  for (std::size_t c : a.conv_channels) {
    s.layers.push_back(ndnet::Conv1dLayer{cin, c, a.conv_kernel, 1, ndnet::Activation::relu});
    s.layers.push_back(ndnet::MaxPool1dLayer{a.pool});
    cin = c;
  }
  s.layers.push_back(ndnet::FlattenLayer{});
  std::size_t in = ndnet::shape_product(s.layer_shapes().back());
  for (std::size_t h : a.conv_dense) {
    s.layers.push_back(ndnet::DenseLayer{in, h, ndnet::Activation::relu});
    in = h;
  }
  s.layers.push_back(ndnet::DenseLayer{in, 1, ndnet::Activation::identity});
  s.layer_shapes();
  return s;
}

void fill_input(const PriorModel& m, std::span<const double> raw, double* dst) {
  const auto z = m.normalization.normalized(raw);
  if (m.kind == PriorKind::mlp) {
    std::copy(z.begin(), z.end(), dst);
    return;
  }
  const std::size_t n = m.channels_per_band;
  std::copy(z.begin(), z.begin() + static_cast<std::ptrdiff_t>(scenegen::kBandCount * n), dst);
  double* geo = dst + scenegen::kBandCount * n;
  for (std::size_t i = 0; i < n; ++i) {
    geo[i] = z[scenegen::kBandCount * n];
    geo[n + i] = z[scenegen::kBandCount * n + 1];
  }
}

double mse(std::span<const double> pred, std::span<const double> target) {
  double s = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) s += (pred[i] - target[i]) * (pred[i] - target[i]);
  return s / static_cast<double>(pred.size());
}

std::vector<double> standardized_labels(const PriorModel& m, const scenegen::Dataset& ds) {
  std::vector<double> t(ds.size());
  for (std::size_t i = 0; i < ds.size(); ++i) t[i] = m.labels.standardize(ds.labels[i]);
  return t;
}

std::vector<double> predict_standardized(const PriorModel& m, const scenegen::Dataset& ds) {
  std::vector<double> out(ds.size());
  constexpr std::size_t chunk = 512;
  std::vector<std::size_t> rows;
  for (std::size_t start = 0; start < ds.size(); start += chunk) {
    const std::size_t end = std::min(ds.size(), start + chunk);
    rows.resize(end - start);
    for (std::size_t i = start; i < end; ++i) rows[i - start] = i;
    const auto y = ndnet::forward(m.params, m.spec, prior_inputs(m, ds, rows));
    std::copy(y.values.begin(), y.values.end(), out.begin() + static_cast<std::ptrdiff_t>(start));
  }
  return out;
}

/// One epoch of minibatch MSE regression; returns the mean batch loss.
double run_epoch(PriorModel& m, const scenegen::Dataset& ds, std::span<const double> targets,
                 std::size_t batch, ndnet::AdamState& adam, std::span<const bool> mask, Rng& rng,
                 std::size_t epoch) {
  const auto order = shuffled_indices(ds.size(), rng);
  double total = 0.0;
  std::size_t batches = 0;
  for (std::size_t start = 0; start < order.size(); start += batch) {
    const std::size_t end = std::min(order.size(), start + batch);
    std::span<const std::size_t> rows(order.data() + start, end - start);
    const auto trace = ndnet::forward_trace(m.params, m.spec, prior_inputs(m, ds, rows));
    TensorBuffer grad({rows.size(), 1});
    double loss = 0.0;
    for (std::size_t i = 0; i < rows.size(); ++i) {
      const double r = trace.output[i] - targets[rows[i]];
      loss += r * r;
      grad[i] = 2.0 * r / static_cast<double>(rows.size());
    }
    loss /= static_cast<double>(rows.size());
    require(std::isfinite(loss), ErrorKind::runtime,
            "prior training diverged: non-finite loss at epoch " + std::to_string(epoch) +
                ", batch " + std::to_string(batches));
    const auto g = ndnet::backward(m.params, m.spec, trace, grad);
    ndnet::adam_step(m.params, g.params, adam, mask);
    total += loss;
    ++batches;
  }
  return batches ? total / static_cast<double>(batches) : 0.0;
}

}  // namespace

PriorModel make_prior(PriorKind kind, std::size_t feature_count, const PriorArchitecture& arch,
                      const scenegen::Normalization& norm, const LabelStandardizer& labels,
                      std::uint64_t seed) {
  PriorModel m;
  m.kind = kind;
  m.labels = labels;
  if (kind == PriorKind::external) return m;
  require(norm.mean.size() == feature_count && norm.sd.size() == feature_count,
          ErrorKind::validation, "prior: normalization does not match the feature count");
  m.normalization = norm;
  if (kind == PriorKind::mlp) {
    m.spec = ndnet::make_mlp(feature_count, arch.mlp_hidden, 1);
  } else {
    require(feature_count >= 2 + scenegen::kBandCount &&
                (feature_count - 2) % scenegen::kBandCount == 0,
            ErrorKind::validation, "conv1d prior needs [3 equal bands | sza | p_surf] covariates");
    m.channels_per_band = (feature_count - 2) / scenegen::kBandCount;
    m.spec = conv_spec(m.channels_per_band, arch);
  }
  Rng rng(derive_seed(seed, 0x9e1, static_cast<std::uint64_t>(kind)));
  m.params = ndnet::init_params(m.spec, rng);
  return m;
}

TensorBuffer prior_inputs(const PriorModel& m, const scenegen::Dataset& ds,
                          std::span<const std::size_t> rows) {
  require(m.trained(), ErrorKind::validation, "external prior has no network input");
  require(ds.feature_count == m.normalization.mean.size(), ErrorKind::validation,
          "prior: dataset has " + std::to_string(ds.feature_count) + " features, model expects " +
              std::to_string(m.normalization.mean.size()));
  ndnet::Shape shape{rows.size()};
  shape.insert(shape.end(), m.spec.input_shape.begin(), m.spec.input_shape.end());
  TensorBuffer in(shape);
  const std::size_t per = ndnet::shape_product(m.spec.input_shape);
  for (std::size_t i = 0; i < rows.size(); ++i) fill_input(m, ds.row(rows[i]), in.values.data() + i * per);
  return in;
}

PriorModel pretrain_prior(PriorKind kind, const scenegen::Dataset& train,
                          const scenegen::Dataset& val, const scenegen::Normalization& norm,
                          const PriorArchitecture& arch, const TrainOptions& opt,
                          TrainReport* report) {
  require(kind != PriorKind::external, ErrorKind::validation, "the external prior is not trainable");
  require(train.size() >= 2, ErrorKind::validation, "pretrain_prior: training set too small");
  require(opt.batch_size >= 1 && opt.epochs >= 1, ErrorKind::validation,
          "pretrain_prior: epochs and batch size must be positive");
  PriorModel m = make_prior(kind, train.feature_count, arch, norm,
                            LabelStandardizer::fit(train.labels), opt.seed);
  const auto t_train = standardized_labels(m, train);
  const auto t_val = standardized_labels(m, val);
  auto adam = ndnet::adam_init(m.params, {opt.learning_rate});
  Rng rng(derive_seed(opt.seed, 0x9e2, 0));

  TrainReport rep;
  ndnet::NetworkParams best = m.params;
  double best_val = std::numeric_limits<double>::infinity();
  std::size_t since_best = 0;
  for (std::size_t e = 1; e <= opt.epochs; ++e) {
    EpochLoss row{e, run_epoch(m, train, t_train, opt.batch_size, adam, {}, rng, e),
                  std::numeric_limits<double>::quiet_NaN()};
    const double score = val.size() ? mse(predict_standardized(m, val), t_val) : row.train_loss;
    if (val.size()) row.val_loss = score;
    require(std::isfinite(score), ErrorKind::runtime,
            "prior training diverged: non-finite validation loss at epoch " + std::to_string(e));
    rep.epochs.push_back(row);
    if (score < best_val) {
      best_val = score;
      best = m.params;
      rep.best_epoch = e;
      since_best = 0;
    } else if (++since_best >= opt.patience) {
      break;
    }
  }
  m.params = std::move(best);
  if (report) *report = std::move(rep);
  return m;
}

double predict_prior(const PriorModel& m, std::span<const double> covariates,
                     std::optional<double> external_value) {
  if (m.kind == PriorKind::external) {
    require(external_value.has_value(), ErrorKind::validation,
            "external prior requires a supplied value for every sounding");
    return *external_value;
  }
  require(covariates.size() == m.normalization.mean.size(), ErrorKind::validation,
          "predict_prior: covariate length mismatch");
  ndnet::Shape shape{1};
  shape.insert(shape.end(), m.spec.input_shape.begin(), m.spec.input_shape.end());
  TensorBuffer in(shape);
  fill_input(m, covariates, in.values.data());
  return m.labels.destandardize(ndnet::forward(m.params, m.spec, in)[0]);
}

std::vector<double> predict_dataset(const PriorModel& m, const scenegen::Dataset& ds,
                                    std::span<const double> external) {
  if (m.kind == PriorKind::external) {
    require(external.size() == ds.size(), ErrorKind::validation,
            "external prior: " + std::to_string(external.size()) + " values supplied for " +
                std::to_string(ds.size()) + " soundings");
    return {external.begin(), external.end()};
  }
  auto z = predict_standardized(m, ds);
  for (auto& v : z) v = m.labels.destandardize(v);
  return z;
}

PriorModel finetune_prior(const PriorModel& model, const scenegen::Dataset& ft,
                          const FinetuneOptions& opt, TrainReport* report) {
  require(model.trained(), ErrorKind::validation, "finetune_prior: the external prior has nothing to finetune");
  PriorModel m = model;
  std::vector<bool> mask_v(m.params.layers.size(), false);
  std::size_t left = opt.unfreeze_layers;
  for (std::size_t i = m.params.layers.size(); i-- > 0 && left > 0;) {
    if (m.params.layers[i].empty()) continue;
    mask_v[i] = true;
    --left;
  }
  TrainReport rep;
  if (opt.unfreeze_layers == 0 || ft.size() == 0 || opt.epochs == 0) {
    if (report) *report = rep;
    return m;
  }
  std::unique_ptr<bool[]> mask(new bool[mask_v.size()]);
  for (std::size_t i = 0; i < mask_v.size(); ++i) mask[i] = mask_v[i];
  const auto targets = standardized_labels(m, ft);
  auto adam = ndnet::adam_init(m.params, {opt.learning_rate});
  Rng rng(derive_seed(opt.seed, 0x9e3, 0));
  for (std::size_t e = 1; e <= opt.epochs; ++e) {
    const double loss = run_epoch(m, ft, targets, std::max<std::size_t>(opt.batch_size, 1), adam,
                                  {mask.get(), mask_v.size()}, rng, e);
    rep.epochs.push_back({e, loss, std::numeric_limits<double>::quiet_NaN()});
  }
  rep.best_epoch = opt.epochs;
  if (report) *report = std::move(rep);
  return m;
}

std::vector<double> external_surrogate(const scenegen::Dataset& ds, std::uint64_t seed, double sd) {
  std::vector<double> out(ds.size());
  for (std::size_t i = 0; i < ds.size(); ++i) {
    Rng rng(derive_seed(seed, ds.ids[i], 0xe7));
    out[i] = ds.labels[i] + rng.normal(0.0, sd);
  }
  return out;
}

void save_prior(const std::string& path, const PriorModel& m, const nlohmann::json& extra) {
  if (m.trained()) ndnet::save_params(path, m.spec, m.params);
  nlohmann::json d = m.descriptor();
  if (!extra.is_null()) d["run"] = extra;
  std::ofstream os(path + ".json", std::ios::trunc);
  require(static_cast<bool>(os), ErrorKind::runtime, "cannot write " + path + ".json");
  os << d.dump(2) << "\n";
}

PriorModel load_prior(const std::string& path) {
  std::ifstream is(path + ".json");
  require(static_cast<bool>(is), ErrorKind::runtime, "missing prior descriptor " + path + ".json");
  nlohmann::json d;
  try {
    d = nlohmann::json::parse(is);
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::validation, path + ".json: " + e.what());
  }
  PriorModel m;
  m.kind = kind_from_name(d.at("kind").get<std::string>());
  m.labels = LabelStandardizer::from_json(d.at("labels"));
  if (m.trained()) {
    m.spec = ndnet::spec_from_json(d.at("network"));
    m.normalization = scenegen::Normalization::from_json(d.at("normalization"));
    m.channels_per_band = d.at("channels_per_band").get<std::size_t>();
    m.params = ndnet::load_params(path, m.spec);
  }
  return m;
}

}  // namespace xco2::priors
