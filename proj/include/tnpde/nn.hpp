#pragma once

#include <cctype>
#include <cmath>
#include <cstdint>
#include <iomanip>
#include <istream>
#include <limits>
#include <ostream>
#include <span>
#include <sstream>
#include <string>
#include <variant>
#include <vector>

#include "tnpde/autodiff.hpp"
#include "tnpde/errors.hpp"
#include "tnpde/random.hpp"
#include "tnpde/tensor.hpp"

namespace tnpde {

enum class Activation { tanh, sine, relu, identity };

inline std::string to_string(Activation a) {
  switch (a) {
    case Activation::tanh: return "tanh";
    case Activation::sine: return "sine";
    case Activation::relu: return "relu";
    case Activation::identity: return "identity";
  }
  return "?";
}

inline Activation parse_activation(const std::string& name) {
  if (name == "tanh") return Activation::tanh;
  if (name == "sine" || name == "sin") return Activation::sine;
  if (name == "relu") return Activation::relu;
  if (name == "identity") return Activation::identity;
  throw InvalidArgument("unknown activation '" + name + "'");
}

inline VarRef activate(VarRef x, Activation a) {
  switch (a) {
    case Activation::tanh: return tanh(x);
    case Activation::sine: return sin(x);
    case Activation::relu: return relu(x);
    case Activation::identity: return x;
  }
  return x;
}

/// Fully connected layer: activation(x W^T + b), W is out x in.
struct DenseLayer {
  Tensor weight;
  Tensor bias;
  Activation activation = Activation::tanh;

  DenseLayer(std::size_t in, std::size_t out, Activation act)
      : weight(Tensor::zeros({static_cast<std::int64_t>(out), static_cast<std::int64_t>(in)})),
        bias(Tensor::zeros({static_cast<std::int64_t>(out)})),
        activation(act) {}

  std::size_t in() const { return weight.shape()[1]; }
  std::size_t out() const { return weight.shape()[0]; }
  std::size_t param_count() const { return weight.size() + bias.size(); }
};

/// Two-node MPO layer on d^2 features. core_a[i, j, alpha] holds A_alpha and
/// core_b[k, l, alpha] holds B_alpha; the weight is sum_alpha A_alpha (x) B_alpha.
struct TNLayer {
  Tensor core_a;
  Tensor core_b;
  Tensor bias;
  Activation activation = Activation::tanh;

  TNLayer(std::size_t d, std::size_t bond, Activation act)
      : core_a(Tensor::zeros({static_cast<std::int64_t>(d), static_cast<std::int64_t>(d),
                              static_cast<std::int64_t>(bond)})),
        core_b(core_a),
        bias(Tensor::zeros({static_cast<std::int64_t>(d * d)})),
        activation(act) {}

  std::size_t phys_dim() const { return core_a.shape()[0]; }
  std::size_t bond() const { return core_a.shape()[2]; }
  std::size_t width() const { return phys_dim() * phys_dim(); }
  std::size_t param_count() const { return core_a.size() + core_b.size() + bias.size(); }
};

using Layer = std::variant<DenseLayer, TNLayer>;

inline std::size_t layer_in(const Layer& l) {
  return std::visit([](const auto& x) -> std::size_t {
    if constexpr (std::is_same_v<std::decay_t<decltype(x)>, DenseLayer>) return x.in();
    else return x.width();
  }, l);
}

inline std::size_t layer_out(const Layer& l) {
  return std::visit([](const auto& x) -> std::size_t {
    if constexpr (std::is_same_v<std::decay_t<decltype(x)>, DenseLayer>) return x.out();
    else return x.width();
  }, l);
}

inline Activation layer_activation(const Layer& l) {
  return std::visit([](const auto& x) { return x.activation; }, l);
}

/// Trainable tensors of a layer in a fixed order (weights, then bias).
inline std::vector<Tensor*> layer_parameters(Layer& l) {
  if (auto* d = std::get_if<DenseLayer>(&l)) return {&d->weight, &d->bias};
  auto& t = std::get<TNLayer>(l);
  return {&t.core_a, &t.core_b, &t.bias};
}

/// Feed-forward network u(t, x). The input row is [t, x_1, ..., x_d].
class Network {
 public:
  Network(std::size_t input_dim, std::vector<Layer> layers)
      : input_dim_(input_dim), layers_(std::move(layers)) {
    std::size_t width = input_dim_;
    for (std::size_t i = 0; i < layers_.size(); ++i) {
      if (layer_in(layers_[i]) != width) {
        throw InvalidArchitecture("layer " + std::to_string(i) + " expects width " +
                                  std::to_string(layer_in(layers_[i])) + ", got " + std::to_string(width));
      }
      width = layer_out(layers_[i]);
    }
    if (!layers_.empty()) {
      if (width != 1) throw InvalidArchitecture("last layer must produce a scalar");
      if (layer_activation(layers_.back()) != Activation::identity) {
        throw InvalidArchitecture("last layer must use the identity activation");
      }
    }
  }

  std::size_t input_dim() const noexcept { return input_dim_; }
  std::size_t state_dim() const noexcept { return input_dim_ - 1; }
  const std::vector<Layer>& layers() const noexcept { return layers_; }
  std::vector<Layer>& layers() noexcept { return layers_; }

  std::vector<Tensor*> parameters() {
    std::vector<Tensor*> out;
    for (Layer& l : layers_)
      for (Tensor* p : layer_parameters(l)) out.push_back(p);
    return out;
  }

  std::vector<const Tensor*> parameters() const {
    std::vector<const Tensor*> out;
    for (Tensor* p : const_cast<Network*>(this)->parameters()) out.push_back(p);
    return out;
  }

 private:
  std::size_t input_dim_;
  std::vector<Layer> layers_;
};

inline std::size_t param_count(const Network& net) {
  std::size_t n = 0;
  for (const Layer& l : net.layers()) n += std::visit([](const auto& x) { return x.param_count(); }, l);
  return n;
}

/// DNN(x, y): dense x -> dense y -> scalar. TNN(x, chi): dense x -> TN layer
/// on x = d^2 features with bond chi -> scalar.
struct ArchitectureSpec {
  enum class Kind { dnn, tnn };

  Kind kind = Kind::dnn;
  std::size_t width = 1;
  std::size_t second = 1;  // y for DNN, chi for TNN
  std::size_t input_dim = 1;

  static ArchitectureSpec dnn(std::size_t x, std::size_t y, std::size_t input_dim) {
    return {Kind::dnn, x, y, input_dim};
  }
  static ArchitectureSpec tnn(std::size_t x, std::size_t chi, std::size_t input_dim) {
    return {Kind::tnn, x, chi, input_dim};
  }

  bool is_tnn() const noexcept { return kind == Kind::tnn; }
  std::size_t bond() const noexcept { return second; }

  /// sqrt(width) for a TNN.
  std::size_t phys_dim() const {
    const auto d = static_cast<std::size_t>(std::llround(std::sqrt(static_cast<double>(width))));
    return d;
  }

  void validate() const {
    if (width < 1 || second < 1 || input_dim < 2) {
      throw InvalidArchitecture("architecture " + name() + " has a zero width or input dimension < 2");
    }
    if (is_tnn() && phys_dim() * phys_dim() != width) {
      throw InvalidArchitecture("TNN width " + std::to_string(width) + " is not a perfect square");
    }
  }

  std::string name() const {
    return is_tnn() ? "TNN(" + std::to_string(width) + ",chi=" + std::to_string(second) + ")"
                    : "DNN(" + std::to_string(width) + "," + std::to_string(second) + ")";
  }

  /// Parameter count from the closed-form layer sizes.
  std::size_t formula_param_count() const {
    const std::size_t first = (input_dim + 1) * width;
    if (is_tnn()) return first + 2 * second * width + width + (width + 1);
    return first + (width + 1) * second + (second + 1);
  }

  friend bool operator==(const ArchitectureSpec&, const ArchitectureSpec&) = default;
};

/// Parses "dnn:6,35" or "tnn:16,4" (also "DNN(6,35)" / "TNN(16,chi=4)").
inline ArchitectureSpec parse_architecture(std::string text, std::size_t input_dim) {
  for (char& c : text) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  ArchitectureSpec::Kind kind;
  if (text.rfind("dnn", 0) == 0) kind = ArchitectureSpec::Kind::dnn;
  else if (text.rfind("tnn", 0) == 0) kind = ArchitectureSpec::Kind::tnn;
  else throw InvalidArchitecture("cannot parse architecture '" + text + "'");
  for (char& c : text)
    if (!std::isdigit(static_cast<unsigned char>(c))) c = ' ';
  std::istringstream is(text.substr(3));
  long long x = 0, y = 0;
  if (!(is >> x >> y) || x <= 0 || y <= 0) throw InvalidArchitecture("cannot parse architecture '" + text + "'");
  ArchitectureSpec spec{kind, static_cast<std::size_t>(x), static_cast<std::size_t>(y), input_dim};
  spec.validate();
  return spec;
}

enum class InitScheme { glorot, matched_magnitude };

inline std::string to_string(InitScheme s) { return s == InitScheme::glorot ? "glorot" : "matched"; }

inline InitScheme parse_init(const std::string& name) {
  if (name == "glorot") return InitScheme::glorot;
  if (name == "matched" || name == "matched_magnitude") return InitScheme::matched_magnitude;
  throw InvalidArgument("unknown init scheme '" + name + "'");
}

inline double glorot_stddev(std::size_t fan_in, std::size_t fan_out) {
  return std::sqrt(2.0 / static_cast<double>(fan_in + fan_out));
}

/// Core scale s for which sum_alpha a*b with a, b ~ N(0, s^2) has the Glorot
/// variance of a d^2 x d^2 dense layer: chi * s^4 = sigma_glorot^2.
inline double tn_core_stddev(std::size_t d, std::size_t bond) {
  const double sg = glorot_stddev(d * d, d * d);
  return std::pow(sg * sg / static_cast<double>(bond), 0.25);
}

/// Draws both MPO cores i.i.d. N(0, scale^2).
inline void init_tn_cores(TNLayer& layer, double scale, std::uint64_t seed) {
  layer.core_a = randn(layer.core_a.shape(), 0.0, scale, derive_seed(seed, {0}));
  layer.core_b = randn(layer.core_b.shape(), 0.0, scale, derive_seed(seed, {1}));
}

// ---------------------------------------------------------------------------
// MPO contraction

/// W = sum_alpha A_alpha (x) B_alpha as graph nodes: contract the bond into
/// a rank-4 tensor (i, j, k, l), regroup to rows (i, k) and columns (j, l).
inline VarRef tn_contract_weight(VarRef core_a, VarRef core_b) {
  const Shape& s = core_a.shape();
  if (s.rank() != 3 || s[0] != s[1] || core_b.shape() != s) {
    throw ShapeError("tn_contract_weight: cores must both be d x d x chi, got " + s.to_string() +
                     " and " + core_b.shape().to_string());
  }
  const auto d = static_cast<std::int64_t>(s[0]);
  const auto chi = static_cast<std::int64_t>(s[2]);
  const VarRef a = reshape(core_a, Shape{d * d, chi});
  const VarRef b = reshape(core_b, Shape{d * d, chi});
  const VarRef rank4 = reshape(matmul(a, transpose(b)), Shape{d, d, d, d});
  return reshape(transpose(rank4, {0, 2, 1, 3}), Shape{d * d, d * d});
}

inline Tensor tn_contract_weight(const TNLayer& layer) {
  Graph g;
  return tn_contract_weight(g.constant(layer.core_a), g.constant(layer.core_b)).value();
}

inline double sample_stddev(std::span<const double> v) {
  double m = 0.0;
  for (double x : v) m += x;
  m /= static_cast<double>(v.size());
  double s = 0.0;
  for (double x : v) s += (x - m) * (x - m);
  return std::sqrt(s / static_cast<double>(v.size() - 1));
}

// ---------------------------------------------------------------------------
// Initialisation

/// Dense weights ~ N(0, 2/(fan_in + fan_out)); MPO cores at the scale whose
/// contraction has that same variance; biases zero.
inline void init_glorot(Network& net, std::uint64_t seed) {
  for (std::size_t i = 0; i < net.layers().size(); ++i) {
    Layer& layer = net.layers()[i];
    const std::uint64_t layer_seed = derive_seed(seed, {i});
    if (auto* dense = std::get_if<DenseLayer>(&layer)) {
      dense->weight = randn(dense->weight.shape(), 0.0, glorot_stddev(dense->in(), dense->out()), layer_seed);
      dense->bias = Tensor::zeros(dense->bias.shape());
    } else {
      auto& tn = std::get<TNLayer>(layer);
      init_tn_cores(tn, tn_core_stddev(tn.phys_dim(), tn.bond()), layer_seed);
      tn.bias = Tensor::zeros(tn.bias.shape());
    }
  }
}

/// Glorot initialisation followed by an exact rescaling of every MPO so the
/// sample stddev of its contracted weight equals the dense Glorot stddev.
inline void init_matched_magnitude(Network& net, std::uint64_t seed) {
  bool found = false;
  for (const Layer& l : net.layers()) found = found || std::holds_alternative<TNLayer>(l);
  if (!found) throw InvalidArgument("init_matched_magnitude: network has no TN layer");
  init_glorot(net, seed);
  for (Layer& layer : net.layers()) {
    if (auto* tn = std::get_if<TNLayer>(&layer)) {
      const double target = glorot_stddev(tn->width(), tn->width());
      const double actual = sample_stddev(tn_contract_weight(*tn).data());
      // W is bilinear in the cores, so scaling both by lambda scales W by lambda^2.
      const double lambda = std::sqrt(target / actual);
      tn->core_a = scale(tn->core_a, lambda);
      tn->core_b = scale(tn->core_b, lambda);
    }
  }
}

inline Network build_network(const ArchitectureSpec& spec, Activation activation, InitScheme init,
                             std::uint64_t seed) {
  spec.validate();
  std::vector<Layer> layers;
  layers.emplace_back(DenseLayer(spec.input_dim, spec.width, activation));
  if (spec.is_tnn()) {
    layers.emplace_back(TNLayer(spec.phys_dim(), spec.bond(), activation));
    layers.emplace_back(DenseLayer(spec.width, 1, Activation::identity));
  } else {
    layers.emplace_back(DenseLayer(spec.width, spec.second, activation));
    layers.emplace_back(DenseLayer(spec.second, 1, Activation::identity));
  }
  Network net(spec.input_dim, std::move(layers));
  if (init == InitScheme::glorot || !spec.is_tnn()) init_glorot(net, seed);
  else init_matched_magnitude(net, seed);
  return net;
}

// ---------------------------------------------------------------------------
// Forward passes

/// Registers every parameter tensor as a graph variable, in parameters() order.
inline std::vector<VarRef> bind_parameters(Graph& g, const Network& net) {
  std::vector<VarRef> out;
  for (const Tensor* p : net.parameters()) out.push_back(g.variable(*p));
  return out;
}

namespace detail {
inline VarRef affine(VarRef input, VarRef weight, VarRef bias) {
  Graph& g = *input.graph();
  const auto rows = static_cast<std::int64_t>(input.shape()[0]);
  const auto out = static_cast<std::int64_t>(bias.shape()[0]);
  const VarRef ones = g.constant(Tensor::ones({rows, 1}));
  return matmul(input, transpose(weight)) + matmul(ones, reshape(bias, Shape{1, out}));
}
}  // namespace detail

/// activation(input W^T + b) for a batch `input` of shape rows x in. `params`
/// are the layer's bound parameters in layer_parameters() order.
inline VarRef layer_forward(const Layer& layer, std::span<const VarRef> params, VarRef input) {
  if (input.shape().rank() != 2 || input.shape()[1] != layer_in(layer)) {
    throw ShapeError("layer_forward: input " + input.shape().to_string() + " but layer expects width " +
                     std::to_string(layer_in(layer)));
  }
  if (std::holds_alternative<DenseLayer>(layer)) {
    return activate(detail::affine(input, params[0], params[1]), layer_activation(layer));
  }
  const VarRef weight = tn_contract_weight(params[0], params[1]);
  return activate(detail::affine(input, weight, params[2]), layer_activation(layer));
}

/// u for a batch of rows [t, x].
inline VarRef network_forward(const Network& net, std::span<const VarRef> params, VarRef input) {
  VarRef h = input;
  std::size_t offset = 0;
  for (const Layer& layer : net.layers()) {
    const std::size_t n = std::holds_alternative<DenseLayer>(layer) ? 2 : 3;
    h = layer_forward(layer, params.subspan(offset, n), h);
    offset += n;
  }
  return h;
}

struct NetworkOutput {
  VarRef u;       // rows x 1
  VarRef grad_x;  // rows x d, differentiable with respect to the parameters
};

/// Evaluates u(t, x) and its spatial gradient. `t_batch` is rows x 1,
/// `x_batch` rows x d.
inline NetworkOutput network_eval(const Network& net, std::span<const VarRef> params, Graph& g,
                                  const Tensor& t_batch, const Tensor& x_batch) {
  if (x_batch.rank() != 2 || x_batch.shape()[1] != net.state_dim()) {
    throw ShapeError("network_eval: state batch " + x_batch.shape().to_string() + " but network expects width " +
                     std::to_string(net.state_dim()));
  }
  if (t_batch.rank() != 2 || t_batch.shape()[1] != 1 || t_batch.shape()[0] != x_batch.shape()[0]) {
    throw ShapeError("network_eval: time batch " + t_batch.shape().to_string() + " does not match " +
                     x_batch.shape().to_string());
  }
  const VarRef x = g.variable(x_batch);
  const VarRef u = network_forward(net, params, concat({g.constant(t_batch), x}, 1));
  const auto grads = g.grad(sum(u), std::array{x}, true);
  return {u, grads.node(x)};
}

/// Plain value of u at a batch of points.
inline Tensor evaluate_u(const Network& net, const Tensor& t_batch, const Tensor& x_batch) {
  Graph g;
  std::vector<VarRef> params;
  for (const Tensor* p : net.parameters()) params.push_back(g.constant(*p));
  return network_forward(net, params, concat({g.constant(t_batch), g.constant(x_batch)}, 1)).value();
}

inline double evaluate_u(const Network& net, double t, std::span<const double> x) {
  const auto d = static_cast<std::int64_t>(x.size());
  return evaluate_u(net, Tensor::full({1, 1}, t), Tensor(Shape{1, d}, std::vector<double>(x.begin(), x.end())))
      .item();
}

// ---------------------------------------------------------------------------
// Weight snapshots
//
// Text format, whitespace separated:
//   tnpde-network 1
//   input_dim <n>
//   layers <count>
//   then per layer: "dense <activation>" or "tn <activation>", followed by its
//   parameter tensors, each as "tensor <rank> <dims...>" and the values in
//   row-major order printed with 17 significant digits.

inline void save_weights(std::ostream& os, const Network& net) {
  os << "tnpde-network 1\ninput_dim " << net.input_dim() << "\nlayers " << net.layers().size() << '\n';
  os << std::setprecision(17);
  for (const Layer& layer : net.layers()) {
    os << (std::holds_alternative<DenseLayer>(layer) ? "dense " : "tn ") << to_string(layer_activation(layer))
       << '\n';
    for (const Tensor* p : layer_parameters(const_cast<Layer&>(layer))) {
      os << "tensor " << p->rank();
      for (std::size_t dim : p->shape().dims()) os << ' ' << dim;
      os << '\n';
      for (std::size_t i = 0; i < p->size(); ++i) os << (i ? " " : "") << (*p)[i];
      os << '\n';
    }
  }
}

inline Network load_weights(std::istream& is) {
  auto expect = [&](const std::string& word) {
    std::string got;
    if (!(is >> got) || got != word) throw InvalidArgument("weights: expected '" + word + "', got '" + got + "'");
  };
  auto read_tensor = [&] {
    expect("tensor");
    std::size_t rank = 0;
    is >> rank;
    if (!is || rank > 4) throw InvalidArgument("weights: bad tensor rank");
    std::vector<std::int64_t> dims(rank);
    for (auto& d : dims) is >> d;
    if (!is) throw InvalidArgument("weights: truncated tensor header");
    Shape shape(dims);
    std::vector<double> values(shape.numel());
    for (double& v : values) is >> v;
    if (!is) throw InvalidArgument("weights: truncated tensor");
    return Tensor(shape, std::move(values));
  };
  expect("tnpde-network");
  int version = 0;
  is >> version;
  if (version != 1) throw InvalidArgument("weights: unsupported version");
  std::size_t input_dim = 0, count = 0;
  expect("input_dim");
  is >> input_dim;
  expect("layers");
  is >> count;
  std::vector<Layer> layers;
  for (std::size_t i = 0; i < count; ++i) {
    std::string kind, act;
    is >> kind >> act;
    if (kind == "dense") {
      Tensor w = read_tensor();
      Tensor b = read_tensor();
      if (w.rank() != 2 || b.shape() != Shape{static_cast<std::int64_t>(w.shape()[0])}) {
        throw InvalidArgument("weights: dense layer " + std::to_string(i) + " has inconsistent shapes");
      }
      DenseLayer layer(w.shape()[1], w.shape()[0], parse_activation(act));
      layer.weight = std::move(w);
      layer.bias = std::move(b);
      layers.emplace_back(std::move(layer));
    } else if (kind == "tn") {
      Tensor a = read_tensor();
      Tensor b = read_tensor();
      Tensor bias = read_tensor();
      const Shape& s = a.shape();
      if (s.rank() != 3 || s[0] != s[1] || b.shape() != s ||
          bias.shape() != Shape{static_cast<std::int64_t>(s[0] * s[0])}) {
        throw InvalidArgument("weights: tn layer " + std::to_string(i) + " has inconsistent shapes");
      }
      TNLayer layer(a.shape()[0], a.shape()[2], parse_activation(act));
      layer.core_a = std::move(a);
      layer.core_b = std::move(b);
      layer.bias = std::move(bias);
      layers.emplace_back(std::move(layer));
    } else {
      throw InvalidArgument("weights: unknown layer kind '" + kind + "'");
    }
  }
  return Network(input_dim, std::move(layers));
}

}  // namespace tnpde
