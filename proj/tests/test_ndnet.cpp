#include <cmath>
#include <cstdio>
#include <filesystem>
#include <memory>

#include "doctest.h"
#include "oracles.hpp"
#include "xco2/ndnet.hpp"

using namespace xco2;
using namespace xco2::ndnet;

namespace {

TensorBuffer random_tensor(Shape s, Rng& rng) {
  TensorBuffer t(std::move(s));
  for (auto& v : t.values) v = rng.normal();
  return t;
}

NetworkParams seeded(const NetworkSpec& spec, std::uint64_t seed) {
  Rng rng(seed);
  auto p = init_params(spec, rng);
  // non-zero biases so their gradients are exercised through the activations
  for (auto& l : p.layers)
    for (auto& b : l.bias.values) b = 0.1 * rng.normal();
  return p;
}

}  // namespace

TEST_CASE("dense identity layer passes inputs through") {
  NetworkSpec spec{{2}, {DenseLayer{2, 2, Activation::identity}}};
  NetworkParams p{{LayerParams{TensorBuffer({2, 2}, {1, 0, 0, 1}), TensorBuffer({2})}}};
  const auto out = forward(p, spec, TensorBuffer({1, 2}, {3, 4}));
  CHECK(out.values == std::vector<double>{3, 4});
}

TEST_CASE("relu clips negatives") {
  NetworkSpec spec{{2}, {DenseLayer{2, 2, Activation::relu}}};
  NetworkParams p{{LayerParams{TensorBuffer({2, 2}, {1, 0, 0, 1}), TensorBuffer({2})}}};
  CHECK(forward(p, spec, TensorBuffer({1, 2}, {-1, 2})).values == std::vector<double>{0, 2});
}

TEST_CASE("three-layer net matches a straight-line re-implementation") {
  const auto spec = make_mlp(3, {4, 5}, 2);
  Rng rng(0);
  const auto p = init_params(spec, rng);
  const std::vector<double> x{0.3, -1.2, 0.7};
  std::vector<double> h = x;
  for (std::size_t l = 0; l < 3; ++l) {
    const auto& w = p.layers[l].weight;
    const auto& b = p.layers[l].bias;
    const std::size_t out = w.dim(0), in = w.dim(1);
    std::vector<double> next(out);
    for (std::size_t o = 0; o < out; ++o) {
      double s = b[o];
      for (std::size_t i = 0; i < in; ++i) s += w[o * in + i] * h[i];
      next[o] = l < 2 ? std::max(0.0, s) : s;
    }
    h = next;
  }
  const auto y = forward(p, spec, TensorBuffer({1, 3}, x));
  CHECK(y[0] == doctest::Approx(h[0]).epsilon(1e-14));
  CHECK(y[1] == doctest::Approx(h[1]).epsilon(1e-14));
}

TEST_CASE("shape mismatches name the offending layer") {
  NetworkSpec spec{{4}, {DenseLayer{4, 3, Activation::relu}, DenseLayer{5, 1, Activation::identity}}};
  try {
    spec.layer_shapes();
    FAIL("expected an error");
  } catch (const Error& e) {
    CHECK(std::string(e.what()).find("layer 1") != std::string::npos);
  }
  const auto good = make_mlp(4, {3}, 1);
  Rng rng(1);
  const auto p = init_params(good, rng);
  CHECK_THROWS_AS(forward(p, good, TensorBuffer({2, 5})), Error);
}

TEST_CASE("maxpool drops a trailing remainder") {
  NetworkSpec spec{{1, 5}, {MaxPool1dLayer{2}}};
  NetworkParams p{{LayerParams{}}};
  const auto y = forward(p, spec, TensorBuffer({1, 1, 5}, {1, 3, 2, -1, 9}));
  CHECK(y.shape == Shape{1, 1, 2});
  CHECK(y.values == std::vector<double>{3, 2});
}

TEST_CASE("conv1d with kernel 1 equals a per-position dense map") {
  Rng rng(5);
  NetworkSpec conv{{3, 6}, {Conv1dLayer{3, 2, 1, 1, Activation::identity}}};
  const auto pc = seeded(conv, 9);
  const auto x = random_tensor({2, 3, 6}, rng);
  const auto y = forward(pc, conv, x);
  for (std::size_t b = 0; b < 2; ++b)
    for (std::size_t o = 0; o < 2; ++o)
      for (std::size_t pos = 0; pos < 6; ++pos) {
        double s = pc.layers[0].bias[o];
        for (std::size_t c = 0; c < 3; ++c) s += pc.layers[0].weight[o * 3 + c] * x[b * 18 + c * 6 + pos];
        CHECK(y[b * 12 + o * 6 + pos] == doctest::Approx(s).epsilon(1e-14));
      }
}

TEST_CASE("backward: single dense output weight gradient equals the input") {
  NetworkSpec spec{{3}, {DenseLayer{3, 1, Activation::identity}}};
  Rng rng(2);
  const auto p = init_params(spec, rng);
  const TensorBuffer x({1, 3}, {0.5, -2.0, 4.0});
  const auto g = backward(p, spec, x, TensorBuffer({1, 1}, {1.0}));
  CHECK(g.params.layers[0].weight.values == x.values);
  CHECK(g.params.layers[0].bias[0] == 1.0);
  const auto z = backward(p, spec, x, TensorBuffer({1, 1}, {0.0}));
  for (double v : z.params.layers[0].weight.values) CHECK(v == 0.0);
  for (double v : z.input.values) CHECK(v == 0.0);
}

TEST_CASE("finite-difference gradient check per layer type") {
  Rng rng(11);
  SUBCASE("dense, every activation") {
    for (auto act : {Activation::identity, Activation::relu, Activation::softplus}) {
      NetworkSpec spec{{5}, {DenseLayer{5, 4, act}, DenseLayer{4, 3, act}}};
      CHECK(oracle::gradient_rel_error(spec, seeded(spec, 1), random_tensor({3, 5}, rng), 2) < 1e-6);
    }
  }
  SUBCASE("conv1d with stride") {
    for (std::size_t stride : {1u, 2u}) {
      NetworkSpec spec{{2, 11}, {Conv1dLayer{2, 3, 3, stride, Activation::softplus}, FlattenLayer{}}};
      CHECK(oracle::gradient_rel_error(spec, seeded(spec, 3), random_tensor({2, 2, 11}, rng), 4) < 1e-6);
    }
  }
  SUBCASE("maxpool and flatten") {
    NetworkSpec spec{{2, 9},
                     {Conv1dLayer{2, 3, 2, 1, Activation::relu}, MaxPool1dLayer{2}, FlattenLayer{},
                      DenseLayer{12, 2, Activation::identity}}};
    CHECK(oracle::gradient_rel_error(spec, seeded(spec, 5), random_tensor({3, 2, 9}, rng), 6) < 1e-6);
  }
}

TEST_CASE("adam: hand-computed first step and zero gradient") {
  NetworkSpec spec{{1}, {DenseLayer{1, 1, Activation::identity}}};
  NetworkParams p{{LayerParams{TensorBuffer({1, 1}, {1.0}), TensorBuffer({1}, {0.0})}}};
  auto g = zeros_like(p);
  g.layers[0].weight[0] = 1.0;
  auto st = adam_init(p, {0.1});
  adam_step(p, g, st);
  // m_hat = 1, v_hat = 1 -> step = 0.1 / (1 + 1e-8)
  CHECK(p.layers[0].weight[0] == doctest::Approx(1.0 - 0.1 / (1.0 + 1e-8)).epsilon(1e-15));
  CHECK(p.layers[0].bias[0] == 0.0);
  CHECK(st.step == 1);

  const auto before = p;
  auto fresh = adam_init(p, {0.1});
  adam_step(p, zeros_like(p), fresh);
  CHECK(p == before);
}

TEST_CASE("adam: non-finite gradient throws without modifying anything") {
  const auto spec = make_mlp(2, {3}, 1);
  Rng rng(4);
  auto p = init_params(spec, rng);
  auto g = zeros_like(p);
  g.layers[1].weight[0] = NAN;
  auto st = adam_init(p, {});
  const auto p0 = p;
  CHECK_THROWS_AS(adam_step(p, g, st), Error);
  CHECK(p == p0);
  CHECK(st.step == 0);
}

TEST_CASE("adam: frozen layers stay bit-identical and runs are deterministic") {
  const auto spec = make_mlp(3, {4}, 1);
  auto run = [&](std::vector<char> mask_chars) {
    Rng rng(8);
    auto p = init_params(spec, rng);
    auto st = adam_init(p, {0.01});
    std::unique_ptr<bool[]> mask(new bool[mask_chars.size()]);
    for (std::size_t i = 0; i < mask_chars.size(); ++i) mask[i] = mask_chars[i];
    for (int k = 0; k < 5; ++k) {
      const auto x = random_tensor({4, 3}, rng);
      const auto g = backward(p, spec, x, random_tensor({4, 1}, rng));
      adam_step(p, g.params, st, {mask.get(), mask_chars.size()});
    }
    return p;
  };
  Rng rng(8);
  const auto init = init_params(spec, rng);
  const auto frozen_first = run({0, 1});
  CHECK(frozen_first.layers[0] == init.layers[0]);
  CHECK_FALSE(frozen_first.layers[1] == init.layers[1]);
  CHECK(run({1, 1}) == run({1, 1}));
}

TEST_CASE("ema update arithmetic") {
  NetworkParams p{{LayerParams{TensorBuffer({1, 1}, {2.0}), TensorBuffer({1}, {2.0})}}};
  auto e = ema_init(zeros_like(p), 0.5);
  e.updates = 1000;
  ema_update(e, p);
  CHECK(e.shadow.layers[0].weight[0] == 1.0);
  auto keep = ema_init(zeros_like(p), 1.0);
  keep.updates = 1000000;
  ema_update(keep, p);
  CHECK(keep.shadow.layers[0].weight[0] == doctest::Approx(2.0 * (1 - 1000001.0 / 1000010.0)));
  // warmup: the first update uses decay 1/10
  auto warm = ema_init(zeros_like(p), 0.999);
  ema_update(warm, p);
  CHECK(warm.shadow.layers[0].weight[0] == doctest::Approx(1.8));
  CHECK(warm.updates == 1);
  auto copy = ema_init(zeros_like(p), 0.0);
  ema_update(copy, p);
  CHECK(copy.shadow == p);
  CHECK_THROWS_AS(ema_init(p, 1.5), Error);
  e.decay = -0.1;
  CHECK_THROWS_AS(ema_update(e, p), Error);
}

TEST_CASE("NDN1 checkpoints round-trip bit-exactly and spec JSON round-trips") {
  NetworkSpec spec{{2, 12},
                   {Conv1dLayer{2, 4, 3, 1, Activation::relu}, MaxPool1dLayer{2}, FlattenLayer{},
                    DenseLayer{20, 3, Activation::softplus}, DenseLayer{3, 1, Activation::identity}}};
  const auto p = seeded(spec, 21);
  const auto path = (std::filesystem::temp_directory_path() / "xco2_ndn1_test.bin").string();
  save_params(path, spec, p);
  CHECK(load_params(path, spec) == p);
  const auto spec2 = spec_from_json(spec_to_json(spec));
  CHECK(spec_to_json(spec2) == spec_to_json(spec));
  const auto other = make_mlp(3, {2}, 1);
  CHECK_THROWS_AS(load_params(path, other), Error);
  std::remove(path.c_str());
}
