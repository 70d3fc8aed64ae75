#include <cmath>
#include <cstdio>
#include <filesystem>

#include "doctest.h"
#include "xco2/evalmetrics.hpp"
#include "xco2/priors.hpp"

using namespace xco2;
using namespace xco2::priors;

namespace {

scenegen::GeneratorConfig config() {
  scenegen::GeneratorConfig c;
  c.channels_per_band = 32;
  return c;
}

struct Splits {
  scenegen::Dataset train, val, test;
};

const Splits& splits() {
  static const Splits s = [] {
    const auto c = config();
    return Splits{scenegen::build_dataset(2000, c, 11, scenegen::Split::train),
                  scenegen::build_dataset(400, c, 11, scenegen::Split::val),
                  scenegen::build_dataset(400, c, 11, scenegen::Split::test)};
  }();
  return s;
}

double pearson(const std::vector<double>& a, const std::vector<double>& b) {
  double ma = 0, mb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ma += a[i];
    mb += b[i];
  }
  ma /= a.size();
  mb /= b.size();
  double sab = 0, saa = 0, sbb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    sab += (a[i] - ma) * (b[i] - mb);
    saa += (a[i] - ma) * (a[i] - ma);
    sbb += (b[i] - mb) * (b[i] - mb);
  }
  return sab / std::sqrt(saa * sbb);
}

double mean_of(const std::vector<double>& v) {
  double m = 0;
  for (double x : v) m += x;
  return m / v.size();
}

}  // namespace

TEST_CASE("label standardizer round-trips") {
  const std::vector<double> l{400, 410, 420.5, 391};
  const auto s = LabelStandardizer::fit(l);
  for (double v : l) CHECK(std::abs(s.destandardize(s.standardize(v)) - v) < 1e-12);
  CHECK(LabelStandardizer::fit(std::vector<double>{3, 3, 3}).sd == 1.0);
}

TEST_CASE("constant labels are learned exactly enough") {
  auto train = splits().train;
  auto val = splits().val;
  for (auto& v : train.labels) v = 412.0;
  for (auto& v : val.labels) v = 412.0;
  TrainOptions o;
  o.epochs = 20;
  const auto m = pretrain_prior(PriorKind::mlp, train, val, scenegen::Normalization::fit(train), {}, o);
  const auto p = predict_dataset(m, val);
  CHECK(evalmetrics::rmse(p, val.labels) < 0.1);
}

TEST_CASE("mlp prior: loss decreases, predictions track labels and are deterministic") {
  const auto& s = splits();
  TrainReport rep;
  TrainOptions o;
  o.epochs = 30;
  const auto m = pretrain_prior(PriorKind::mlp, s.train, s.val, scenegen::Normalization::fit(s.train), {}, o, &rep);
  REQUIRE(!rep.epochs.empty());
  for (const auto& e : rep.epochs) CHECK(std::isfinite(e.train_loss));
  CHECK(rep.epochs.back().train_loss < rep.epochs.front().train_loss);
  const auto p = predict_dataset(m, s.test);
  MESSAGE("mlp test rmse " << evalmetrics::rmse(p, s.test.labels));
  CHECK(pearson(p, s.test.labels) > 0.5);
  CHECK(predict_dataset(m, s.test) == p);
  CHECK(predict_prior(m, s.test.row(3)) == doctest::Approx(p[3]).epsilon(1e-12));

  TrainOptions o2 = o;
  o2.epochs = 3;
  const auto a = pretrain_prior(PriorKind::mlp, s.train, s.val, m.normalization, {}, o2);
  const auto b = pretrain_prior(PriorKind::mlp, s.train, s.val, m.normalization, {}, o2);
  CHECK(a.params == b.params);
}

TEST_CASE("conv1d prior beats the mean predictor") {
  const auto& s = splits();
  TrainOptions o;
  o.epochs = 30;
  const auto m = pretrain_prior(PriorKind::conv1d, s.train, s.val, scenegen::Normalization::fit(s.train), {}, o);
  const auto p = predict_dataset(m, s.val);
  const double rmse = evalmetrics::rmse(p, s.val.labels);
  const std::vector<double> flat(s.val.size(), mean_of(s.train.labels));
  MESSAGE("conv1d val rmse " << rmse);
  CHECK(rmse < evalmetrics::rmse(flat, s.val.labels));
}

TEST_CASE("external prior passes values through") {
  PriorModel ext;
  ext.kind = PriorKind::external;
  const std::vector<double> cov(98, 0.0);
  CHECK(predict_prior(ext, cov, 415.0) == 415.0);
  CHECK_THROWS_AS(predict_prior(ext, cov), Error);
  CHECK_THROWS_AS(finetune_prior(ext, splits().val, {}), Error);
  const auto sur = external_surrogate(splits().val, 3);
  CHECK(sur == external_surrogate(splits().val, 3));
  CHECK(predict_dataset(ext, splits().val, sur) == sur);
  double sq = 0;
  for (std::size_t i = 0; i < sur.size(); ++i) sq += std::pow(sur[i] - splits().val.labels[i], 2);
  CHECK(std::sqrt(sq / sur.size()) == doctest::Approx(3.0).epsilon(0.15));
}

TEST_CASE("finetuning: frozen layers untouched and discrepancy reduced") {
  const auto& s = splits();
  TrainOptions o;
  o.epochs = 30;
  const auto base = pretrain_prior(PriorKind::mlp, s.train, s.val, scenegen::Normalization::fit(s.train), {}, o);

  FinetuneOptions none;
  none.unfreeze_layers = 0;
  CHECK(finetune_prior(base, s.val, none).params == base.params);

  const auto c = config();
  const auto ft = scenegen::build_finetune_set(400, c, 21, scenegen::Split::finetune);
  const auto hold = scenegen::build_finetune_set(400, c, 21, scenegen::Split::test);
  const auto tuned = finetune_prior(base, ft, {});
  // make_mlp(98, {64, 64}, 1): three dense layers, the last two trainable
  CHECK(tuned.params.layers[0] == base.params.layers[0]);
  CHECK_FALSE(tuned.params.layers[1] == base.params.layers[1]);
  CHECK_FALSE(tuned.params.layers[2] == base.params.layers[2]);

  const double before = evalmetrics::rmse(predict_dataset(base, hold), hold.labels);
  const double after = evalmetrics::rmse(predict_dataset(tuned, hold), hold.labels);
  MESSAGE("holdout rmse before " << before << " after " << after);
  CHECK(after < before);
}

TEST_CASE("prior checkpoints round-trip") {
  const auto& s = splits();
  TrainOptions o;
  o.epochs = 2;
  const auto m = pretrain_prior(PriorKind::conv1d, s.train, s.val, scenegen::Normalization::fit(s.train), {}, o);
  const auto path = (std::filesystem::temp_directory_path() / "xco2_prior_test.ndn").string();
  save_prior(path, m);
  const auto back = load_prior(path);
  CHECK(back.params == m.params);
  CHECK(predict_dataset(back, s.test) == predict_dataset(m, s.test));
  std::remove(path.c_str());
  std::remove((path + ".json").c_str());
}
