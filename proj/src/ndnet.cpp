#include "xco2/ndnet.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

namespace xco2::ndnet {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using CMapMat = Eigen::Map<const RowMat>;
using Eigen::Index;

Index idx(std::size_t n) { return static_cast<Index>(n); }

double activate(Activation a, double z) {
  switch (a) {
    case Activation::relu:
      return z > 0.0 ? z : 0.0;
    case Activation::softplus:
      return z > 30.0 ? z : std::log1p(std::exp(z));
    case Activation::identity:
      break;
  }
  return z;
}

double activate_grad(Activation a, double z) {
  switch (a) {
    case Activation::relu:
      return z > 0.0 ? 1.0 : 0.0;
    case Activation::softplus:
      return 1.0 / (1.0 + std::exp(-z));
    case Activation::identity:
      break;
  }
  return 1.0;
}

std::string activation_name(Activation a) {
  switch (a) {
    case Activation::relu:
      return "relu";
    case Activation::softplus:
      return "softplus";
    case Activation::identity:
      break;
  }
  return "identity";
}

Activation activation_from(const std::string& s) {
  if (s == "relu") return Activation::relu;
  if (s == "softplus") return Activation::softplus;
  if (s == "identity") return Activation::identity;
  fail(ErrorKind::validation, "unknown activation \"" + s + "\"");
}

std::string layer_error(std::size_t i, const Layer& layer, const std::string& msg) {
  return "layer " + std::to_string(i) + " (" + layer_name(layer) + "): " + msg;
}

std::size_t conv_out_len(const Conv1dLayer& c, std::size_t len) {
  return (len - c.kernel) / c.stride + 1;
}

// col[(c*k + q), p] = x[c, p*stride + q]
void im2col(const double* x, const Conv1dLayer& c, std::size_t len, std::size_t out_len,
            double* col) {
  for (std::size_t ch = 0; ch < c.channels_in; ++ch)
    for (std::size_t q = 0; q < c.kernel; ++q) {
      double* row = col + (ch * c.kernel + q) * out_len;
      const double* src = x + ch * len + q;
      for (std::size_t p = 0; p < out_len; ++p) row[p] = src[p * c.stride];
    }
}

void col2im_add(const double* col, const Conv1dLayer& c, std::size_t len,
                std::size_t out_len, double* dx) {
  for (std::size_t ch = 0; ch < c.channels_in; ++ch)
    for (std::size_t q = 0; q < c.kernel; ++q) {
      const double* row = col + (ch * c.kernel + q) * out_len;
      double* dst = dx + ch * len + q;
      for (std::size_t p = 0; p < out_len; ++p) dst[p * c.stride] += row[p];
    }
}

void check_batch_input(const NetworkSpec& spec, const TensorBuffer& input) {
  require(input.rank() == spec.input_shape.size() + 1, ErrorKind::validation,
          "network input: expected shape [batch, " + shape_string(spec.input_shape).substr(1) +
              " got " + shape_string(input.shape));
  for (std::size_t i = 0; i < spec.input_shape.size(); ++i)
    require(input.shape[i + 1] == spec.input_shape[i], ErrorKind::validation,
            "network input: expected per-sample shape " + shape_string(spec.input_shape) +
                ", got " + shape_string(input.shape));
  require(input.size() == shape_product(input.shape), ErrorKind::validation,
          "network input: value count does not match shape");
}

Shape batched(std::size_t batch, const Shape& s) {
  Shape out{batch};
  out.insert(out.end(), s.begin(), s.end());
  return out;
}

}  // namespace

// ---------------------------------------------------------------- tensors

std::size_t shape_product(const Shape& s) {
  std::size_t n = 1;
  for (auto d : s) n *= d;
  return n;
}

std::string shape_string(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? ", " : "") << s[i];
  os << ']';
  return os.str();
}

TensorBuffer::TensorBuffer(Shape s, double fill)
    : shape(std::move(s)), values(shape_product(shape), fill) {}

TensorBuffer::TensorBuffer(Shape s, std::vector<double> v)
    : shape(std::move(s)), values(std::move(v)) {
  require(values.size() == shape_product(shape), ErrorKind::validation,
          "tensor: " + std::to_string(values.size()) + " values do not fill shape " +
              shape_string(shape));
}

bool TensorBuffer::all_finite() const {
  return std::all_of(values.begin(), values.end(), [](double v) { return std::isfinite(v); });
}

// ---------------------------------------------------------------- spec

std::string layer_name(const Layer& layer) {
  struct {
    std::string operator()(const DenseLayer&) const { return "dense"; }
    std::string operator()(const Conv1dLayer&) const { return "conv1d"; }
    std::string operator()(const MaxPool1dLayer&) const { return "maxpool1d"; }
    std::string operator()(const FlattenLayer&) const { return "flatten"; }
  } v;
  return std::visit(v, layer);
}

bool has_params(const Layer& layer) {
  return std::holds_alternative<DenseLayer>(layer) || std::holds_alternative<Conv1dLayer>(layer);
}

std::vector<Shape> NetworkSpec::layer_shapes() const {
  require(!input_shape.empty(), ErrorKind::validation, "network spec: empty input shape");
  std::vector<Shape> shapes;
  Shape cur = input_shape;
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const Layer& layer = layers[i];
    if (auto* d = std::get_if<DenseLayer>(&layer)) {
      require(d->in > 0 && d->out > 0, ErrorKind::validation, layer_error(i, layer, "zero width"));
      require(cur.size() == 1 && cur[0] == d->in, ErrorKind::validation,
              layer_error(i, layer, "expected input [" + std::to_string(d->in) + "], got " +
                                        shape_string(cur)));
      cur = {d->out};
    } else if (auto* c = std::get_if<Conv1dLayer>(&layer)) {
      require(c->kernel > 0 && c->stride > 0 && c->channels_out > 0, ErrorKind::validation,
              layer_error(i, layer, "kernel, stride and channels must be positive"));
      require(cur.size() == 2 && cur[0] == c->channels_in, ErrorKind::validation,
              layer_error(i, layer, "expected input [" + std::to_string(c->channels_in) +
                                        ", L], got " + shape_string(cur)));
      require(cur[1] >= c->kernel, ErrorKind::validation,
              layer_error(i, layer, "input length shorter than kernel"));
      cur = {c->channels_out, conv_out_len(*c, cur[1])};
    } else if (auto* m = std::get_if<MaxPool1dLayer>(&layer)) {
      require(cur.size() == 2 && m->window > 0 && cur[1] >= m->window, ErrorKind::validation,
              layer_error(i, layer, "needs [C, L] input with L >= window, got " +
                                        shape_string(cur)));
      cur = {cur[0], cur[1] / m->window};
    } else {
      cur = {shape_product(cur)};
    }
    shapes.push_back(cur);
  }
  return shapes;
}

Shape NetworkSpec::output_shape() const {
  auto s = layer_shapes();
  return s.empty() ? input_shape : s.back();
}

NetworkSpec make_mlp(std::size_t in, const std::vector<std::size_t>& hidden, std::size_t out) {
  NetworkSpec spec;
  spec.input_shape = {in};
  std::size_t cur = in;
  for (auto h : hidden) {
    spec.layers.emplace_back(DenseLayer{cur, h, Activation::relu});
    cur = h;
  }
  spec.layers.emplace_back(DenseLayer{cur, out, Activation::identity});
  return spec;
}

// ---------------------------------------------------------------- params

std::size_t NetworkParams::parameter_count() const {
  std::size_t n = 0;
  for (const auto& l : layers) n += l.weight.size() + l.bias.size();
  return n;
}

bool NetworkParams::all_finite() const {
  return std::all_of(layers.begin(), layers.end(), [](const LayerParams& l) {
    return l.weight.all_finite() && l.bias.all_finite();
  });
}

NetworkParams init_params(const NetworkSpec& spec, Rng& rng) {
  spec.layer_shapes();
  NetworkParams params;
  for (const auto& layer : spec.layers) {
    LayerParams lp;
    std::size_t fan_in = 0, fan_out = 0;
    if (auto* d = std::get_if<DenseLayer>(&layer)) {
      lp.weight = TensorBuffer({d->out, d->in});
      lp.bias = TensorBuffer({d->out});
      fan_in = d->in;
      fan_out = d->out;
    } else if (auto* c = std::get_if<Conv1dLayer>(&layer)) {
      lp.weight = TensorBuffer({c->channels_out, c->channels_in, c->kernel});
      lp.bias = TensorBuffer({c->channels_out});
      fan_in = c->channels_in * c->kernel;
      fan_out = c->channels_out * c->kernel;
    }
    if (fan_in > 0) {
      const double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
      for (auto& w : lp.weight.values) w = rng.uniform(-limit, limit);
    }
    params.layers.push_back(std::move(lp));
  }
  return params;
}

NetworkParams zeros_like(const NetworkParams& p) {
  NetworkParams z;
  for (const auto& l : p.layers)
    z.layers.push_back({TensorBuffer(l.weight.shape), TensorBuffer(l.bias.shape)});
  return z;
}

void check_params(const NetworkSpec& spec, const NetworkParams& params) {
  require(params.layers.size() == spec.layers.size(), ErrorKind::validation,
          "network params: " + std::to_string(params.layers.size()) + " layers, spec has " +
              std::to_string(spec.layers.size()));
  for (std::size_t i = 0; i < spec.layers.size(); ++i) {
    const auto& layer = spec.layers[i];
    const auto& lp = params.layers[i];
    Shape w, b;
    if (auto* d = std::get_if<DenseLayer>(&layer)) {
      w = {d->out, d->in};
      b = {d->out};
    } else if (auto* c = std::get_if<Conv1dLayer>(&layer)) {
      w = {c->channels_out, c->channels_in, c->kernel};
      b = {c->channels_out};
    } else {
      require(lp.empty() && lp.weight.shape.empty() && lp.bias.shape.empty(), ErrorKind::validation,
              layer_error(i, layer, "layer takes no parameters"));
      continue;
    }
    require(lp.weight.shape == w && lp.bias.shape == b &&
                lp.weight.size() == shape_product(w) && lp.bias.size() == shape_product(b),
            ErrorKind::validation,
            layer_error(i, layer, "parameter shapes " + shape_string(lp.weight.shape) + "/" +
                                      shape_string(lp.bias.shape) + " do not match spec"));
  }
}

// ---------------------------------------------------------------- forward

ForwardTrace forward_trace(const NetworkParams& params, const NetworkSpec& spec,
                           const TensorBuffer& input) {
  check_batch_input(spec, input);
  check_params(spec, params);
  const auto shapes = spec.layer_shapes();
  const std::size_t batch = input.shape[0];

  ForwardTrace tr;
  tr.inputs.reserve(spec.layers.size());
  tr.preacts.resize(spec.layers.size());
  tr.argmax.resize(spec.layers.size());
  TensorBuffer cur = input;

  for (std::size_t i = 0; i < spec.layers.size(); ++i) {
    const Layer& layer = spec.layers[i];
    const LayerParams& lp = params.layers[i];
    TensorBuffer out(batched(batch, shapes[i]));
    if (auto* d = std::get_if<DenseLayer>(&layer)) {
      CMapMat x(cur.values.data(), idx(batch), idx(d->in));
      CMapMat w(lp.weight.values.data(), idx(d->out), idx(d->in));
      MapMat z(out.values.data(), idx(batch), idx(d->out));
      z.noalias() = x * w.transpose();
      Eigen::Map<const Eigen::RowVectorXd> b(lp.bias.values.data(), idx(d->out));
      z.rowwise() += b;
      tr.preacts[i] = out;
      for (auto& v : out.values) v = activate(d->activation, v);
    } else if (auto* c = std::get_if<Conv1dLayer>(&layer)) {
      const std::size_t len = cur.shape[2];
      const std::size_t out_len = shapes[i][1];
      const std::size_t rows = c->channels_in * c->kernel;
      std::vector<double> col(rows * out_len);
      CMapMat w(lp.weight.values.data(), idx(c->channels_out), idx(rows));
      for (std::size_t s = 0; s < batch; ++s) {
        im2col(cur.values.data() + s * c->channels_in * len, *c, len, out_len, col.data());
        CMapMat cm(col.data(), idx(rows), idx(out_len));
        MapMat z(out.values.data() + s * c->channels_out * out_len, idx(c->channels_out),
                 idx(out_len));
        z.noalias() = w * cm;
        for (std::size_t o = 0; o < c->channels_out; ++o) z.row(idx(o)).array() += lp.bias[o];
      }
      tr.preacts[i] = out;
      for (auto& v : out.values) v = activate(c->activation, v);
    } else if (auto* m = std::get_if<MaxPool1dLayer>(&layer)) {
      const std::size_t ch = cur.shape[1], len = cur.shape[2], out_len = shapes[i][1];
      auto& am = tr.argmax[i];
      am.resize(out.size());
      for (std::size_t s = 0; s < batch; ++s)
        for (std::size_t c2 = 0; c2 < ch; ++c2) {
          const std::size_t base = (s * ch + c2) * len;
          for (std::size_t p = 0; p < out_len; ++p) {
            std::size_t best = base + p * m->window;
            for (std::size_t q = 1; q < m->window; ++q) {
              const std::size_t k = base + p * m->window + q;
              if (cur.values[k] > cur.values[best]) best = k;
            }
            const std::size_t o = (s * ch + c2) * out_len + p;
            out.values[o] = cur.values[best];
            am[o] = best;
          }
        }
    } else {
      out.values = cur.values;
    }
    tr.inputs.push_back(std::move(cur));
    cur = std::move(out);
  }
  tr.output = std::move(cur);
  return tr;
}

TensorBuffer forward(const NetworkParams& params, const NetworkSpec& spec,
                     const TensorBuffer& input) {
  return forward_trace(params, spec, input).output;
}

// ---------------------------------------------------------------- backward

Gradients backward(const NetworkParams& params, const NetworkSpec& spec,
                   const ForwardTrace& trace, const TensorBuffer& output_grad) {
  require(output_grad.shape == trace.output.shape, ErrorKind::validation,
          "backward: output gradient shape " + shape_string(output_grad.shape) +
              " does not match network output " + shape_string(trace.output.shape));
  Gradients g;
  g.params = zeros_like(params);
  TensorBuffer grad = output_grad;
  const std::size_t batch = trace.output.shape[0];

  for (std::size_t li = spec.layers.size(); li-- > 0;) {
    const Layer& layer = spec.layers[li];
    const LayerParams& lp = params.layers[li];
    const TensorBuffer& x = trace.inputs[li];
    TensorBuffer dx(x.shape);
    if (auto* d = std::get_if<DenseLayer>(&layer)) {
      const auto& z = trace.preacts[li];
      for (std::size_t k = 0; k < grad.size(); ++k)
        grad.values[k] *= activate_grad(d->activation, z.values[k]);
      CMapMat dz(grad.values.data(), idx(batch), idx(d->out));
      CMapMat xm(x.values.data(), idx(batch), idx(d->in));
      CMapMat w(lp.weight.values.data(), idx(d->out), idx(d->in));
      MapMat dw(g.params.layers[li].weight.values.data(), idx(d->out), idx(d->in));
      dw.noalias() = dz.transpose() * xm;
      Eigen::Map<Eigen::RowVectorXd> db(g.params.layers[li].bias.values.data(), idx(d->out));
      db = dz.colwise().sum();
      MapMat dxm(dx.values.data(), idx(batch), idx(d->in));
      dxm.noalias() = dz * w;
    } else if (auto* c = std::get_if<Conv1dLayer>(&layer)) {
      const auto& z = trace.preacts[li];
      for (std::size_t k = 0; k < grad.size(); ++k)
        grad.values[k] *= activate_grad(c->activation, z.values[k]);
      const std::size_t len = x.shape[2];
      const std::size_t out_len = grad.shape[2];
      const std::size_t rows = c->channels_in * c->kernel;
      std::vector<double> col(rows * out_len), dcol(rows * out_len);
      CMapMat w(lp.weight.values.data(), idx(c->channels_out), idx(rows));
      MapMat dw(g.params.layers[li].weight.values.data(), idx(c->channels_out), idx(rows));
      auto& db = g.params.layers[li].bias.values;
      for (std::size_t s = 0; s < batch; ++s) {
        im2col(x.values.data() + s * c->channels_in * len, *c, len, out_len, col.data());
        CMapMat cm(col.data(), idx(rows), idx(out_len));
        CMapMat dz(grad.values.data() + s * c->channels_out * out_len, idx(c->channels_out),
                   idx(out_len));
        dw.noalias() += dz * cm.transpose();
        for (std::size_t o = 0; o < c->channels_out; ++o) db[o] += dz.row(idx(o)).sum();
        MapMat dc(dcol.data(), idx(rows), idx(out_len));
        dc.noalias() = w.transpose() * dz;
        col2im_add(dcol.data(), *c, len, out_len, dx.values.data() + s * c->channels_in * len);
      }
    } else if (std::holds_alternative<MaxPool1dLayer>(layer)) {
      const auto& am = trace.argmax[li];
      for (std::size_t o = 0; o < grad.size(); ++o) dx.values[am[o]] += grad.values[o];
    } else {
      dx.values = grad.values;
    }
    grad = std::move(dx);
  }
  g.input = std::move(grad);
  return g;
}

Gradients backward(const NetworkParams& params, const NetworkSpec& spec,
                   const TensorBuffer& input, const TensorBuffer& output_grad) {
  return backward(params, spec, forward_trace(params, spec, input), output_grad);
}

// ---------------------------------------------------------------- optimizers

AdamState adam_init(const NetworkParams& params, const AdamOptions& options) {
  return AdamState{zeros_like(params), zeros_like(params), 0, options};
}

void adam_step(NetworkParams& params, const NetworkParams& grads, AdamState& state,
               std::span<const bool> trainable) {
  require(grads.layers.size() == params.layers.size() &&
              state.first_moment.layers.size() == params.layers.size(),
          ErrorKind::validation, "adam: layer count mismatch");
  require(trainable.empty() || trainable.size() == params.layers.size(), ErrorKind::validation,
          "adam: trainable mask length mismatch");
  for (std::size_t i = 0; i < params.layers.size(); ++i) {
    require(grads.layers[i].weight.shape == params.layers[i].weight.shape &&
                grads.layers[i].bias.shape == params.layers[i].bias.shape,
            ErrorKind::validation, "adam: gradient shape mismatch at layer " + std::to_string(i));
    require(grads.layers[i].weight.all_finite() && grads.layers[i].bias.all_finite(),
            ErrorKind::runtime,
            "adam: non-finite gradient at layer " + std::to_string(i) + ", aborting");
  }
  state.step += 1;
  const auto& o = state.options;
  const double t = static_cast<double>(state.step);
  const double c1 = 1.0 - std::pow(o.beta1, t);
  const double c2 = 1.0 - std::pow(o.beta2, t);
  auto update = [&](std::vector<double>& p, const std::vector<double>& g, std::vector<double>& m,
                    std::vector<double>& v) {
    for (std::size_t k = 0; k < p.size(); ++k) {
      m[k] = o.beta1 * m[k] + (1.0 - o.beta1) * g[k];
      v[k] = o.beta2 * v[k] + (1.0 - o.beta2) * g[k] * g[k];
      const double mhat = m[k] / c1;
      const double vhat = v[k] / c2;
      p[k] -= o.learning_rate * mhat / (std::sqrt(vhat) + o.epsilon);
    }
  };
  for (std::size_t i = 0; i < params.layers.size(); ++i) {
    if (!trainable.empty() && !trainable[i]) continue;
    auto& p = params.layers[i];
    auto& m = state.first_moment.layers[i];
    auto& v = state.second_moment.layers[i];
    update(p.weight.values, grads.layers[i].weight.values, m.weight.values, v.weight.values);
    update(p.bias.values, grads.layers[i].bias.values, m.bias.values, v.bias.values);
  }
}

EMAState ema_init(const NetworkParams& params, double decay) {
  require(decay >= 0.0 && decay <= 1.0, ErrorKind::validation,
          "ema: decay must lie in [0, 1], got " + std::to_string(decay));
  return EMAState{params, decay};
}

void ema_update(EMAState& ema, const NetworkParams& params) {
  require(ema.decay >= 0.0 && ema.decay <= 1.0, ErrorKind::validation,
          "ema: decay must lie in [0, 1], got " + std::to_string(ema.decay));
  require(ema.shadow.layers.size() == params.layers.size(), ErrorKind::validation,
          "ema: layer count mismatch");
  const double n = static_cast<double>(ema.updates);
  const double d = std::min(ema.decay, (1.0 + n) / (10.0 + n));
  for (std::size_t i = 0; i < params.layers.size(); ++i) {
    auto mix = [&](std::vector<double>& s, const std::vector<double>& p) {
      require(s.size() == p.size(), ErrorKind::validation,
              "ema: shape mismatch at layer " + std::to_string(i));
      for (std::size_t k = 0; k < s.size(); ++k) s[k] = d * s[k] + (1.0 - d) * p[k];
    };
    mix(ema.shadow.layers[i].weight.values, params.layers[i].weight.values);
    mix(ema.shadow.layers[i].bias.values, params.layers[i].bias.values);
  }
  ++ema.updates;
}

// ---------------------------------------------------------------- persistence

namespace {

constexpr std::uint32_t kNdnVersion = 1;

std::uint32_t kind_code(const Layer& layer) { return static_cast<std::uint32_t>(layer.index()); }

void write_tensor(std::ostream& os, const TensorBuffer& t) {
  bin::write_u32(os, static_cast<std::uint32_t>(t.rank()));
  for (auto d : t.shape) bin::write_u32(os, static_cast<std::uint32_t>(d));
  bin::write_f64s(os, t.values);
}

TensorBuffer read_tensor(std::istream& is) {
  const auto rank = bin::read_u32(is);
  require(rank <= 8, ErrorKind::validation, "NDN1: implausible tensor rank");
  Shape s(rank);
  for (auto& d : s) d = bin::read_u32(is);
  TensorBuffer t(s);
  bin::read_f64s(is, t.values);
  return t;
}

}  // namespace

void save_params(const std::string& path, const NetworkSpec& spec, const NetworkParams& params) {
  check_params(spec, params);
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  require(static_cast<bool>(os), ErrorKind::runtime, "cannot write " + path);
  bin::write_magic(os, "NDN1");
  bin::write_u32(os, kNdnVersion);
  bin::write_u32(os, static_cast<std::uint32_t>(spec.layers.size()));
  for (std::size_t i = 0; i < spec.layers.size(); ++i) {
    bin::write_u32(os, kind_code(spec.layers[i]));
    if (has_params(spec.layers[i])) {
      bin::write_u32(os, 2);
      write_tensor(os, params.layers[i].weight);
      write_tensor(os, params.layers[i].bias);
    } else {
      bin::write_u32(os, 0);
    }
  }
  require(static_cast<bool>(os), ErrorKind::runtime, "write failed for " + path);
}

NetworkParams load_params(const std::string& path, const NetworkSpec& spec) {
  std::ifstream is(path, std::ios::binary);
  require(static_cast<bool>(is), ErrorKind::runtime, "cannot open checkpoint " + path);
  bin::expect_magic(is, "NDN1", path);
  const auto version = bin::read_u32(is);
  require(version == kNdnVersion, ErrorKind::validation,
          path + ": unsupported NDN1 version " + std::to_string(version));
  const auto count = bin::read_u32(is);
  require(count == spec.layers.size(), ErrorKind::validation,
          path + ": checkpoint has " + std::to_string(count) + " layers, spec has " +
              std::to_string(spec.layers.size()));
  NetworkParams params;
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto kind = bin::read_u32(is);
    require(kind == kind_code(spec.layers[i]), ErrorKind::validation,
            path + ": layer " + std::to_string(i) + " kind differs from spec");
    const auto tensors = bin::read_u32(is);
    LayerParams lp;
    if (tensors == 2) {
      lp.weight = read_tensor(is);
      lp.bias = read_tensor(is);
    } else {
      require(tensors == 0, ErrorKind::validation, path + ": bad tensor count");
    }
    params.layers.push_back(std::move(lp));
  }
  check_params(spec, params);
  return params;
}

nlohmann::json spec_to_json(const NetworkSpec& spec) {
  nlohmann::json layers = nlohmann::json::array();
  for (const auto& layer : spec.layers) {
    nlohmann::json j{{"type", layer_name(layer)}};
    if (auto* d = std::get_if<DenseLayer>(&layer)) {
      j["in"] = d->in;
      j["out"] = d->out;
      j["activation"] = activation_name(d->activation);
    } else if (auto* c = std::get_if<Conv1dLayer>(&layer)) {
      j["channels_in"] = c->channels_in;
      j["channels_out"] = c->channels_out;
      j["kernel"] = c->kernel;
      j["stride"] = c->stride;
      j["activation"] = activation_name(c->activation);
    } else if (auto* m = std::get_if<MaxPool1dLayer>(&layer)) {
      j["window"] = m->window;
    }
    layers.push_back(std::move(j));
  }
  return {{"input_shape", spec.input_shape}, {"layers", layers}};
}

NetworkSpec spec_from_json(const nlohmann::json& j) {
  NetworkSpec spec;
  try {
    spec.input_shape = j.at("input_shape").get<Shape>();
    for (const auto& l : j.at("layers")) {
      const auto type = l.at("type").get<std::string>();
      if (type == "dense") {
        spec.layers.emplace_back(DenseLayer{l.at("in").get<std::size_t>(),
                                            l.at("out").get<std::size_t>(),
                                            activation_from(l.at("activation"))});
      } else if (type == "conv1d") {
        spec.layers.emplace_back(Conv1dLayer{
            l.at("channels_in").get<std::size_t>(), l.at("channels_out").get<std::size_t>(),
            l.at("kernel").get<std::size_t>(), l.at("stride").get<std::size_t>(),
            activation_from(l.at("activation"))});
      } else if (type == "maxpool1d") {
        spec.layers.emplace_back(MaxPool1dLayer{l.at("window").get<std::size_t>()});
      } else if (type == "flatten") {
        spec.layers.emplace_back(FlattenLayer{});
      } else {
        fail(ErrorKind::validation, "unknown layer type \"" + type + "\"");
      }
    }
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::validation, std::string("network spec: ") + e.what());
  }
  spec.layer_shapes();
  return spec;
}

}  // namespace xco2::ndnet
