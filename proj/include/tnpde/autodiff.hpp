#pragma once

#include <array>
#include <cstddef>
#include <initializer_list>
#include <memory>
#include <numbers>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "tnpde/errors.hpp"
#include "tnpde/tensor.hpp"

namespace tnpde {

/// Node kinds recorded by the graph. Leaves are variables or constants;
/// every other kind is one of the fixed differentiable primitives.
enum class OpKind {
  leaf,
  matmul,
  add,
  sub,
  mul,
  reshape,
  transpose,
  concat,
  sum,
  mean,
  square,
  tanh,
  sin,
  relu,
  ln_cosh,
  norm_sq,
};

inline const char* op_name(OpKind kind) {
  switch (kind) {
    case OpKind::leaf: return "leaf";
    case OpKind::matmul: return "matmul";
    case OpKind::add: return "add";
    case OpKind::sub: return "sub";
    case OpKind::mul: return "mul";
    case OpKind::reshape: return "reshape";
    case OpKind::transpose: return "transpose";
    case OpKind::concat: return "concat";
    case OpKind::sum: return "sum";
    case OpKind::mean: return "mean";
    case OpKind::square: return "square";
    case OpKind::tanh: return "tanh";
    case OpKind::sin: return "sin";
    case OpKind::relu: return "relu";
    case OpKind::ln_cosh: return "ln_cosh";
    case OpKind::norm_sq: return "norm_sq";
  }
  return "?";
}

/// Per-op attributes: target shape for reshape, permutation for transpose,
/// axis for concat.
struct OpAttrs {
  Shape shape{};
  std::vector<std::size_t> perm{};
  std::size_t axis = 0;
};

class Graph;

/// Handle to a node of a Graph. Cheap to copy; valid while the graph lives.
class VarRef {
 public:
  VarRef() = default;

  Graph* graph() const noexcept { return graph_; }
  std::size_t id() const noexcept { return id_; }
  bool valid() const noexcept { return graph_ != nullptr; }

  inline const Tensor& value() const;
  inline const Shape& shape() const;

  friend bool operator==(const VarRef&, const VarRef&) = default;

 private:
  friend class Graph;
  VarRef(Graph* graph, std::size_t id) : graph_(graph), id_(id) {}

  Graph* graph_ = nullptr;
  std::size_t id_ = 0;
};

/// Gradients of a scalar with respect to a list of nodes. When produced with
/// create_graph, each entry is also available as a node of the graph so it
/// can be differentiated again.
class GradientMap {
 public:
  std::size_t size() const noexcept { return keys_.size(); }
  bool has_graph() const noexcept { return !nodes_.empty(); }

  const Tensor& operator[](VarRef v) const { return *values_.at(index_of(v)); }

  VarRef node(VarRef v) const {
    if (!has_graph()) throw ContractViolation("gradient was computed without create_graph");
    return nodes_.at(index_of(v));
  }

 private:
  friend class Graph;

  std::size_t index_of(VarRef v) const {
    for (std::size_t i = 0; i < keys_.size(); ++i)
      if (keys_[i] == v) return i;
    throw ContractViolation("no gradient recorded for node " + std::to_string(v.id()));
  }

  std::vector<VarRef> keys_;
  std::vector<std::shared_ptr<const Tensor>> values_;
  std::vector<VarRef> nodes_;
};

/// Append-only expression graph with eager evaluation. Node order is a
/// topological order. Single-threaded; one graph per training step is the
/// intended usage.
class Graph {
 public:
  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  /// Leaf that gradients may be requested for.
  VarRef variable(Tensor value) { return push_leaf(std::move(value), true); }

  /// Leaf treated as data.
  VarRef constant(Tensor value) { return push_leaf(std::move(value), false); }
  VarRef constant(double value) { return constant(Tensor::scalar(value)); }

  std::size_t size() const noexcept { return nodes_.size(); }
  const Tensor& value(VarRef v) const { return *node(v).value; }
  OpKind kind(VarRef v) const { return node(v).kind; }
  bool is_variable(VarRef v) const { return node(v).variable; }

  /// Records one primitive. Shapes are checked by the value kernel.
  VarRef apply(OpKind kind, std::span<const VarRef> inputs, const OpAttrs& attrs = {}) {
    if (kind == OpKind::leaf) throw ContractViolation("apply: leaf is not an operation");
    std::vector<std::size_t> ids;
    ids.reserve(inputs.size());
    for (const VarRef& in : inputs) {
      if (in.graph() != this) throw ContractViolation("apply: input belongs to another graph");
      ids.push_back(in.id());
    }
    check_arity(kind, ids.size());
    std::vector<std::shared_ptr<const Tensor>> vals;
    vals.reserve(ids.size());
    for (std::size_t id : ids) vals.push_back(nodes_[id].value);
    auto out = std::make_shared<const Tensor>(evaluate(kind, vals, attrs));
    nodes_.push_back(Node{kind, std::move(ids), attrs, std::move(out), false});
    return VarRef(this, nodes_.size() - 1);
  }

  /// Reverse-mode gradient of a rank-0 node. Nodes in `wrt` that `scalar`
  /// does not depend on get a zero gradient. With create_graph set, the
  /// backward pass is itself recorded so the result can be differentiated.
  GradientMap grad(VarRef scalar, std::span<const VarRef> wrt, bool create_graph) {
    if (scalar.graph() != this) throw ContractViolation("grad: node belongs to another graph");
    if (value(scalar).rank() != 0) {
      throw ContractViolation("grad: output must be rank 0, got shape " +
                              value(scalar).shape().to_string());
    }
    GradientMap result;
    if (create_graph) {
      GraphBackend backend{*this};
      auto grads = backward(backend, scalar, wrt);
      for (std::size_t i = 0; i < wrt.size(); ++i) {
        VarRef g = grads[i] ? *grads[i] : constant(Tensor::zeros(value(wrt[i]).shape()));
        result.keys_.push_back(wrt[i]);
        result.values_.push_back(nodes_[g.id()].value);
        result.nodes_.push_back(g);
      }
    } else {
      ValueBackend backend{};
      auto grads = backward(backend, scalar, wrt);
      for (std::size_t i = 0; i < wrt.size(); ++i) {
        result.keys_.push_back(wrt[i]);
        result.values_.push_back(
            grads[i] ? *grads[i] : std::make_shared<const Tensor>(Tensor::zeros(value(wrt[i]).shape())));
      }
    }
    return result;
  }

  GradientMap grad(VarRef scalar, std::initializer_list<VarRef> wrt, bool create_graph) {
    return grad(scalar, std::span<const VarRef>(wrt.begin(), wrt.size()), create_graph);
  }

 private:
  struct Node {
    OpKind kind;
    std::vector<std::size_t> inputs;
    OpAttrs attrs;
    std::shared_ptr<const Tensor> value;
    bool variable;
  };

  const Node& node(VarRef v) const {
    if (v.graph() != this || v.id() >= nodes_.size()) throw ContractViolation("stale node reference");
    return nodes_[v.id()];
  }

  VarRef push_leaf(Tensor value, bool variable) {
    nodes_.push_back(Node{OpKind::leaf, {}, {}, std::make_shared<const Tensor>(std::move(value)), variable});
    return VarRef(this, nodes_.size() - 1);
  }

  static void check_arity(OpKind kind, std::size_t n) {
    switch (kind) {
      case OpKind::matmul:
      case OpKind::add:
      case OpKind::sub:
      case OpKind::mul:
        if (n != 2) throw ContractViolation(std::string(op_name(kind)) + " takes two inputs");
        return;
      case OpKind::concat:
        if (n == 0) throw ContractViolation("concat needs at least one input");
        return;
      default:
        if (n != 1) throw ContractViolation(std::string(op_name(kind)) + " takes one input");
    }
  }

  static Tensor evaluate(OpKind kind, const std::vector<std::shared_ptr<const Tensor>>& in,
                         const OpAttrs& attrs) {
    switch (kind) {
      case OpKind::matmul: return tnpde::matmul(*in[0], *in[1]);
      case OpKind::add: return tnpde::add(*in[0], *in[1]);
      case OpKind::sub: return tnpde::sub(*in[0], *in[1]);
      case OpKind::mul: return tnpde::mul(*in[0], *in[1]);
      case OpKind::reshape: return tnpde::reshape(*in[0], attrs.shape);
      case OpKind::transpose: return tnpde::transpose(*in[0], attrs.perm);
      case OpKind::concat: {
        std::vector<const Tensor*> parts;
        for (const auto& p : in) parts.push_back(p.get());
        return tnpde::concat(parts, attrs.axis);
      }
      case OpKind::sum: return tnpde::sum(*in[0]);
      case OpKind::mean: return tnpde::mean(*in[0]);
      case OpKind::square: return tnpde::square(*in[0]);
      case OpKind::tanh: return tnpde::tanh(*in[0]);
      case OpKind::sin: return tnpde::sin(*in[0]);
      case OpKind::relu: return tnpde::relu(*in[0]);
      case OpKind::ln_cosh: return tnpde::ln_cosh(*in[0]);
      case OpKind::norm_sq: return tnpde::norm_sq(*in[0]);
      case OpKind::leaf: break;
    }
    throw ContractViolation("evaluate: unsupported op");
  }

  // Backends let one set of derivative rules either compute tensors directly
  // or record the backward pass as new graph nodes.
  struct ValueBackend {
    using Handle = std::shared_ptr<const Tensor>;

    static Handle wrap(Tensor t) { return std::make_shared<const Tensor>(std::move(t)); }
    Handle constant(Tensor t) { return wrap(std::move(t)); }
    Handle constant(double v) { return wrap(Tensor::scalar(v)); }
    const Tensor& value(const Handle& h) const { return *h; }
    Handle matmul(const Handle& a, const Handle& b) { return wrap(tnpde::matmul(*a, *b)); }
    Handle add(const Handle& a, const Handle& b) { return wrap(tnpde::add(*a, *b)); }
    Handle sub(const Handle& a, const Handle& b) { return wrap(tnpde::sub(*a, *b)); }
    Handle mul(const Handle& a, const Handle& b) { return wrap(tnpde::mul(*a, *b)); }
    Handle reshape(const Handle& a, const Shape& s) { return wrap(tnpde::reshape(*a, s)); }
    Handle transpose(const Handle& a, const std::vector<std::size_t>& p) {
      return wrap(tnpde::transpose(*a, p));
    }
    Handle sum(const Handle& a) { return wrap(tnpde::sum(*a)); }
    Handle square(const Handle& a) { return wrap(tnpde::square(*a)); }
    Handle tanh(const Handle& a) { return wrap(tnpde::tanh(*a)); }
    Handle sin(const Handle& a) { return wrap(tnpde::sin(*a)); }

    Handle handle_of(const Graph& g, std::size_t id) const { return g.nodes_[id].value; }
    void accumulate(std::optional<Handle>& slot, Handle h) {
      slot = slot ? wrap(tnpde::add(**slot, *h)) : std::move(h);
    }
  };

  struct GraphBackend {
    using Handle = VarRef;
    Graph& g;

    Handle constant(Tensor t) { return g.constant(std::move(t)); }
    Handle constant(double v) { return g.constant(v); }
    const Tensor& value(const Handle& h) const { return g.value(h); }
    Handle matmul(Handle a, Handle b) { return g.apply(OpKind::matmul, std::array{a, b}); }
    Handle add(Handle a, Handle b) { return g.apply(OpKind::add, std::array{a, b}); }
    Handle sub(Handle a, Handle b) { return g.apply(OpKind::sub, std::array{a, b}); }
    Handle mul(Handle a, Handle b) { return g.apply(OpKind::mul, std::array{a, b}); }
    Handle reshape(Handle a, const Shape& s) {
      return g.apply(OpKind::reshape, std::array{a}, OpAttrs{s, {}, 0});
    }
    Handle transpose(Handle a, const std::vector<std::size_t>& p) {
      return g.apply(OpKind::transpose, std::array{a}, OpAttrs{{}, p, 0});
    }
    Handle sum(Handle a) { return g.apply(OpKind::sum, std::array{a}); }
    Handle square(Handle a) { return g.apply(OpKind::square, std::array{a}); }
    Handle tanh(Handle a) { return g.apply(OpKind::tanh, std::array{a}); }
    Handle sin(Handle a) { return g.apply(OpKind::sin, std::array{a}); }

    Handle handle_of(Graph& graph, std::size_t id) const { return VarRef(&graph, id); }
    void accumulate(std::optional<Handle>& slot, Handle h) { slot = slot ? add(*slot, h) : h; }
  };

  template <class B>
  std::vector<std::optional<typename B::Handle>> backward(B& b, VarRef scalar,
                                                          std::span<const VarRef> wrt) {
    using Handle = typename B::Handle;
    const std::size_t top = scalar.id();

    // relevant[i]: node i depends on some wrt node, so gradient must flow into it.
    std::vector<char> relevant(top + 1, 0);
    for (const VarRef& w : wrt) {
      if (w.graph() != this) throw ContractViolation("grad: wrt node belongs to another graph");
      if (w.id() <= top) relevant[w.id()] = 1;
    }
    for (std::size_t i = 0; i <= top; ++i) {
      if (relevant[i]) continue;
      for (std::size_t in : nodes_[i].inputs) {
        if (relevant[in]) {
          relevant[i] = 1;
          break;
        }
      }
    }

    std::vector<char> keep(top + 1, 0);
    for (const VarRef& w : wrt)
      if (w.id() <= top) keep[w.id()] = 1;

    std::vector<std::optional<Handle>> grads(top + 1);
    if (relevant[top]) grads[top] = b.constant(1.0);

    for (std::size_t i = top + 1; i-- > 0;) {
      if (!grads[i] || nodes_[i].kind == OpKind::leaf) continue;
      // Copy: the graph backend appends to nodes_ while the rule runs.
      const OpKind kind = nodes_[i].kind;
      const std::vector<std::size_t> inputs = nodes_[i].inputs;
      const OpAttrs attrs = nodes_[i].attrs;
      std::vector<Handle> in;
      std::vector<Shape> in_shapes;
      std::vector<char> need;
      bool any = false;
      for (std::size_t id : inputs) {
        in.push_back(b.handle_of(*this, id));
        in_shapes.push_back(nodes_[id].value->shape());
        need.push_back(relevant[id]);
        any = any || relevant[id];
      }
      if (!any) continue;
      const Handle out = b.handle_of(*this, i);
      const Handle g = *grads[i];
      std::vector<std::optional<Handle>> contrib(inputs.size());
      derivative_rule(b, kind, attrs, in, in_shapes, out, g, need, contrib);
      for (std::size_t k = 0; k < inputs.size(); ++k) {
        if (contrib[k]) b.accumulate(grads[inputs[k]], *contrib[k]);
      }
      if (!keep[i]) grads[i].reset();
    }

    std::vector<std::optional<Handle>> result;
    for (const VarRef& w : wrt) result.push_back(w.id() <= top ? grads[w.id()] : std::nullopt);
    return result;
  }

  // Gradient of a broadcast operand: rank-0 operands collect the sum.
  template <class B>
  static typename B::Handle reduce_to(B& b, const typename B::Handle& g, const Shape& target) {
    if (target.rank() == 0 && b.value(g).rank() != 0) return b.sum(g);
    return g;
  }

  template <class B>
  static void derivative_rule(B& b, OpKind kind, const OpAttrs& attrs,
                              const std::vector<typename B::Handle>& in,
                              const std::vector<Shape>& in_shapes, const typename B::Handle& out,
                              const typename B::Handle& g, const std::vector<char>& need,
                              std::vector<std::optional<typename B::Handle>>& contrib) {
    switch (kind) {
      case OpKind::matmul:
        if (need[0]) contrib[0] = b.matmul(g, b.transpose(in[1], {1, 0}));
        if (need[1]) contrib[1] = b.matmul(b.transpose(in[0], {1, 0}), g);
        return;
      case OpKind::add:
        if (need[0]) contrib[0] = reduce_to(b, g, in_shapes[0]);
        if (need[1]) contrib[1] = reduce_to(b, g, in_shapes[1]);
        return;
      case OpKind::sub:
        if (need[0]) contrib[0] = reduce_to(b, g, in_shapes[0]);
        if (need[1]) contrib[1] = b.mul(reduce_to(b, g, in_shapes[1]), b.constant(-1.0));
        return;
      case OpKind::mul:
        if (need[0]) contrib[0] = reduce_to(b, b.mul(g, in[1]), in_shapes[0]);
        if (need[1]) contrib[1] = reduce_to(b, b.mul(g, in[0]), in_shapes[1]);
        return;
      case OpKind::reshape:
        contrib[0] = b.reshape(g, in_shapes[0]);
        return;
      case OpKind::transpose:
        contrib[0] = b.transpose(g, inverse_permutation(attrs.perm));
        return;
      case OpKind::concat: {
        // Each part is recovered by multiplying with a 0/1 selection matrix.
        std::size_t offset = 0;
        std::size_t total = 0;
        for (const Shape& s : in_shapes) total += s[attrs.axis];
        for (std::size_t k = 0; k < in.size(); ++k) {
          const std::size_t width = in_shapes[k][attrs.axis];
          if (need[k]) {
            if (attrs.axis == 1) {
              Tensor sel = Tensor::zeros(Shape{static_cast<std::int64_t>(total), static_cast<std::int64_t>(width)});
              for (std::size_t j = 0; j < width; ++j) sel.at(offset + j, j) = 1.0;
              contrib[k] = b.matmul(g, b.constant(std::move(sel)));
            } else {
              Tensor sel = Tensor::zeros(Shape{static_cast<std::int64_t>(width), static_cast<std::int64_t>(total)});
              for (std::size_t j = 0; j < width; ++j) sel.at(j, offset + j) = 1.0;
              contrib[k] = b.matmul(b.constant(std::move(sel)), g);
            }
          }
          offset += width;
        }
        return;
      }
      case OpKind::sum:
        contrib[0] = b.mul(b.constant(Tensor::ones(in_shapes[0])), g);
        return;
      case OpKind::mean:
        contrib[0] = b.mul(
            b.constant(Tensor::full(in_shapes[0], 1.0 / static_cast<double>(in_shapes[0].numel()))), g);
        return;
      case OpKind::square:
        contrib[0] = b.mul(g, b.mul(in[0], b.constant(2.0)));
        return;
      case OpKind::tanh:
        contrib[0] = b.mul(g, b.sub(b.constant(1.0), b.square(out)));
        return;
      case OpKind::sin:
        // cos(x) = sin(x + pi/2) keeps the rule inside the primitive set.
        contrib[0] = b.mul(g, b.sin(b.add(in[0], b.constant(std::numbers::pi / 2.0))));
        return;
      case OpKind::relu: {
        Tensor mask = Tensor::zeros(in_shapes[0]);
        const auto x = b.value(in[0]).data();
        for (std::size_t j = 0; j < mask.size(); ++j) mask[j] = x[j] > 0.0 ? 1.0 : 0.0;
        contrib[0] = b.mul(g, b.constant(std::move(mask)));
        return;
      }
      case OpKind::ln_cosh:
        contrib[0] = b.mul(g, b.tanh(in[0]));
        return;
      case OpKind::norm_sq:
        contrib[0] = b.mul(b.mul(in[0], b.constant(2.0)), g);
        return;
      case OpKind::leaf:
        return;
    }
  }

  std::vector<Node> nodes_;
};

inline const Tensor& VarRef::value() const { return graph_->value(*this); }
inline const Shape& VarRef::shape() const { return graph_->value(*this).shape(); }

// ---------------------------------------------------------------------------
// Expression helpers over VarRef. Scalars are lifted to graph constants.

namespace detail {
inline Graph& graph_of(VarRef a) {
  if (!a.valid()) throw ContractViolation("operation on an empty VarRef");
  return *a.graph();
}
inline VarRef binary_op(OpKind kind, VarRef a, VarRef b) {
  return graph_of(a).apply(kind, std::array{a, b});
}
inline VarRef unary_op(OpKind kind, VarRef a, const OpAttrs& attrs = {}) {
  return graph_of(a).apply(kind, std::array{a}, attrs);
}
}  // namespace detail

inline VarRef matmul(VarRef a, VarRef b) { return detail::binary_op(OpKind::matmul, a, b); }
inline VarRef operator+(VarRef a, VarRef b) { return detail::binary_op(OpKind::add, a, b); }
inline VarRef operator-(VarRef a, VarRef b) { return detail::binary_op(OpKind::sub, a, b); }
inline VarRef operator*(VarRef a, VarRef b) { return detail::binary_op(OpKind::mul, a, b); }
inline VarRef operator+(VarRef a, double s) { return a + detail::graph_of(a).constant(s); }
inline VarRef operator+(double s, VarRef a) { return detail::graph_of(a).constant(s) + a; }
inline VarRef operator-(VarRef a, double s) { return a - detail::graph_of(a).constant(s); }
inline VarRef operator-(double s, VarRef a) { return detail::graph_of(a).constant(s) - a; }
inline VarRef operator*(VarRef a, double s) { return a * detail::graph_of(a).constant(s); }
inline VarRef operator*(double s, VarRef a) { return detail::graph_of(a).constant(s) * a; }
inline VarRef operator-(VarRef a) { return a * -1.0; }

inline VarRef reshape(VarRef a, const Shape& shape) {
  return detail::unary_op(OpKind::reshape, a, OpAttrs{shape, {}, 0});
}
inline VarRef transpose(VarRef a, const std::vector<std::size_t>& perm) {
  return detail::unary_op(OpKind::transpose, a, OpAttrs{{}, perm, 0});
}
inline VarRef transpose(VarRef a) { return transpose(a, {1, 0}); }
inline VarRef concat(std::span<const VarRef> parts, std::size_t axis) {
  if (parts.empty()) throw ShapeError("concat: no inputs");
  return detail::graph_of(parts.front()).apply(OpKind::concat, parts, OpAttrs{{}, {}, axis});
}
inline VarRef concat(std::initializer_list<VarRef> parts, std::size_t axis) {
  return concat(std::span<const VarRef>(parts.begin(), parts.size()), axis);
}
inline VarRef sum(VarRef a) { return detail::unary_op(OpKind::sum, a); }
inline VarRef mean(VarRef a) { return detail::unary_op(OpKind::mean, a); }
inline VarRef square(VarRef a) { return detail::unary_op(OpKind::square, a); }
inline VarRef tanh(VarRef a) { return detail::unary_op(OpKind::tanh, a); }
inline VarRef sin(VarRef a) { return detail::unary_op(OpKind::sin, a); }
inline VarRef relu(VarRef a) { return detail::unary_op(OpKind::relu, a); }
inline VarRef ln_cosh(VarRef a) { return detail::unary_op(OpKind::ln_cosh, a); }
inline VarRef norm_sq(VarRef a) { return detail::unary_op(OpKind::norm_sq, a); }

}  // namespace tnpde
