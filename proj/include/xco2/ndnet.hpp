#pragma once

// Small deterministic neural-network substrate: dense / conv1d / maxpool1d /
// flatten layers with explicit backward rules, Adam, and an EMA shadow.
// Everything is double precision and single-threaded.

#include <cstddef>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "json.hpp"
#include "xco2/common.hpp"

namespace xco2::ndnet {

using Shape = std::vector<std::size_t>;

/// Row-major dense array of doubles.
struct TensorBuffer {
  Shape shape;
  std::vector<double> values;

  TensorBuffer() = default;
  explicit TensorBuffer(Shape s, double fill = 0.0);
  TensorBuffer(Shape s, std::vector<double> v);

  std::size_t size() const { return values.size(); }
  std::size_t rank() const { return shape.size(); }
  std::size_t dim(std::size_t i) const { return shape.at(i); }
  double& operator[](std::size_t i) { return values[i]; }
  double operator[](std::size_t i) const { return values[i]; }
  bool all_finite() const;

  friend bool operator==(const TensorBuffer&, const TensorBuffer&) = default;
};

std::size_t shape_product(const Shape& s);
std::string shape_string(const Shape& s);

enum class Activation { identity, relu, softplus };

struct DenseLayer {
  std::size_t in = 0;
  std::size_t out = 0;
  Activation activation = Activation::identity;
};

/// Valid (unpadded) 1-D convolution over a [channels, length] sample.
struct Conv1dLayer {
  std::size_t channels_in = 0;
  std::size_t channels_out = 0;
  std::size_t kernel = 1;
  std::size_t stride = 1;
  Activation activation = Activation::identity;
};

/// Non-overlapping max pooling; a trailing remainder shorter than the window is dropped.
struct MaxPool1dLayer {
  std::size_t window = 2;
};

struct FlattenLayer {};

using Layer = std::variant<DenseLayer, Conv1dLayer, MaxPool1dLayer, FlattenLayer>;

std::string layer_name(const Layer& layer);
bool has_params(const Layer& layer);

struct NetworkSpec {
  Shape input_shape;  // per sample, without the batch dimension
  std::vector<Layer> layers;

  /// Per-layer output shapes (per sample). Throws naming the first
  /// incompatible layer.
  std::vector<Shape> layer_shapes() const;
  Shape output_shape() const;
};

/// Dense stack `in -> hidden... -> out`, relu on hidden layers, identity on the last.
NetworkSpec make_mlp(std::size_t in, const std::vector<std::size_t>& hidden, std::size_t out);

struct LayerParams {
  TensorBuffer weight;
  TensorBuffer bias;

  bool empty() const { return weight.values.empty() && bias.values.empty(); }
  friend bool operator==(const LayerParams&, const LayerParams&) = default;
};

struct NetworkParams {
  std::vector<LayerParams> layers;

  std::size_t parameter_count() const;
  bool all_finite() const;
  friend bool operator==(const NetworkParams&, const NetworkParams&) = default;
};

/// Glorot-uniform weights, zero biases.
NetworkParams init_params(const NetworkSpec& spec, Rng& rng);
NetworkParams zeros_like(const NetworkParams& p);
void check_params(const NetworkSpec& spec, const NetworkParams& params);

/// Intermediate values kept for the backward pass.
struct ForwardTrace {
  std::vector<TensorBuffer> inputs;       // input to layer i
  std::vector<TensorBuffer> preacts;      // pre-activation of layer i (dense/conv)
  std::vector<std::vector<std::size_t>> argmax;  // maxpool routing
  TensorBuffer output;
};

/// `input` carries a leading batch dimension: [batch, input_shape...].
TensorBuffer forward(const NetworkParams& params, const NetworkSpec& spec,
                     const TensorBuffer& input);
ForwardTrace forward_trace(const NetworkParams& params, const NetworkSpec& spec,
                           const TensorBuffer& input);

struct Gradients {
  NetworkParams params;
  TensorBuffer input;
};

Gradients backward(const NetworkParams& params, const NetworkSpec& spec,
                   const ForwardTrace& trace, const TensorBuffer& output_grad);
Gradients backward(const NetworkParams& params, const NetworkSpec& spec,
                   const TensorBuffer& input, const TensorBuffer& output_grad);

struct AdamOptions {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

struct AdamState {
  NetworkParams first_moment;
  NetworkParams second_moment;
  std::uint64_t step = 0;
  AdamOptions options;
};

AdamState adam_init(const NetworkParams& params, const AdamOptions& options);

/// Bias-corrected Adam update. Layers with trainable[i] == false are left
/// bit-identical; an empty mask trains everything. Non-finite gradients throw
/// before anything is modified.
void adam_step(NetworkParams& params, const NetworkParams& grads, AdamState& state,
               std::span<const bool> trainable = {});

/// Shadow weights with warmup: update n uses min(decay, (1 + n) / (10 + n)).
struct EMAState {
  NetworkParams shadow;
  double decay = 0.999;
  std::uint64_t updates = 0;
};

EMAState ema_init(const NetworkParams& params, double decay);
void ema_update(EMAState& ema, const NetworkParams& params);

// NDN1 checkpoint: "NDN1", u32 version, u32 layer count, then per layer
// u32 kind, u32 tensor count, and per tensor u32 rank, u32 dims..., f64 payload.
void save_params(const std::string& path, const NetworkSpec& spec, const NetworkParams& params);
NetworkParams load_params(const std::string& path, const NetworkSpec& spec);

nlohmann::json spec_to_json(const NetworkSpec& spec);
NetworkSpec spec_from_json(const nlohmann::json& j);

}  // namespace xco2::ndnet
