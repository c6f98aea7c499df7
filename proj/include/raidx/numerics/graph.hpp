#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <string>
#include <vector>

#include "raidx/numerics/kernels.hpp"
#include "raidx/numerics/tensor.hpp"

namespace raidx {

class ContractError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

/// The closed primitive set. Everything else in the library is composed from
/// these.
enum class OpKind {
  kLeaf,
  kMatMul,
  kTranspose,
  kSoftmaxRows,
  kAdd,
  kSub,
  kMul,
  kScale,
  kTanh,
  kLog,
  kExp,
  kClip,
  kSum,
};

class Graph;

/// Handle to a node in a Graph. Cheap to copy; only valid while the graph lives.
struct Var {
  Graph* graph = nullptr;
  std::size_t id = 0;

  const Tensor& value() const;
  std::size_t rows() const { return value().rows(); }
  std::size_t cols() const { return value().cols(); }
};

/// Gradients produced by Graph::backward, one slot per node.
class Gradients {
 public:
  Gradients() = default;
  explicit Gradients(std::vector<Tensor> g) : grads_(std::move(g)) {}

  const Tensor& operator[](Var v) const { return grads_.at(v.id); }
  const Tensor& at(std::size_t id) const { return grads_.at(id); }
  std::size_t size() const { return grads_.size(); }

 private:
  std::vector<Tensor> grads_;
};

/// Tape of primitive applications. Nodes are appended in evaluation order, so
/// the node list is topologically sorted by construction.
class Graph {
 public:
  struct Node {
    OpKind op = OpKind::kLeaf;
    std::size_t in0 = 0;
    std::size_t in1 = 0;
    double p0 = 0.0;  // scale factor, or clip lower bound
    double p1 = 0.0;  // clip upper bound
    bool requires_grad = false;
    Tensor value;
  };

  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  Var leaf(Tensor value, bool requires_grad = true) {
    Node n;
    n.op = OpKind::kLeaf;
    n.requires_grad = requires_grad;
    n.value = std::move(value);
    return push(std::move(n));
  }
  Var constant(Tensor value) { return leaf(std::move(value), false); }

  const Node& node(std::size_t id) const { return nodes_.at(id); }
  std::size_t size() const { return nodes_.size(); }

  Var matmul(Var a, Var b) {
    return push(make(OpKind::kMatMul, a, b, kernels::matmul(val(a), val(b))));
  }

  Var transpose(Var a) {
    return push(make(OpKind::kTranspose, a, a, kernels::transpose(val(a))));
  }

  Var softmax_rows(Var x) {
    return push(make(OpKind::kSoftmaxRows, x, x, kernels::softmax_rows(val(x))));
  }

  Var add(Var a, Var b) { return binary(OpKind::kAdd, a, b); }
  Var sub(Var a, Var b) { return binary(OpKind::kSub, a, b); }
  Var mul(Var a, Var b) { return binary(OpKind::kMul, a, b); }

  Var scale(Var a, double s) {
    Tensor out = val(a);
    for (double& v : out.data()) v *= s;
    Node n = make(OpKind::kScale, a, a, std::move(out));
    n.p0 = s;
    return push(std::move(n));
  }

  Var tanh(Var a) {
    Tensor out = val(a);
    for (double& v : out.data()) v = std::tanh(v);
    return push(make(OpKind::kTanh, a, a, std::move(out)));
  }

  Var log(Var a) {
    Tensor out = val(a);
    for (double& v : out.data()) {
      if (!(v > 0.0))
        throw DomainError("log of non-positive value " + std::to_string(v));
      v = std::log(v);
    }
    return push(make(OpKind::kLog, a, a, std::move(out)));
  }

  Var exp(Var a) {
    Tensor out = val(a);
    for (double& v : out.data()) v = std::exp(v);
    return push(make(OpKind::kExp, a, a, std::move(out)));
  }

  /// Gradient passes where lo <= x <= hi (boundaries count as inside).
  Var clip(Var a, double lo, double hi) {
    if (lo > hi) throw ContractError("clip: lo > hi");
    Tensor out = val(a);
    for (double& v : out.data()) v = std::min(std::max(v, lo), hi);
    Node n = make(OpKind::kClip, a, a, std::move(out));
    n.p0 = lo;
    n.p1 = hi;
    return push(std::move(n));
  }

  Var sum(Var a) {
    return push(make(OpKind::kSum, a, a, Tensor::scalar(kernels::sum(val(a)))));
  }

  /// Reverse sweep from a scalar root. Every node gets a gradient slot; slots
  /// of nodes the root does not depend on hold zeros.
  Gradients backward(Var root) const {
    if (root.graph != this) throw ContractError("backward: root from another graph");
    if (!val(root).is_scalar())
      throw ContractError("backward: root must be scalar, got " +
                          val(root).shape_string());
    std::vector<Tensor> g(nodes_.size());
    g[root.id] = Tensor::scalar(1.0);
    for (std::size_t id = root.id + 1; id-- > 0;) {
      const Node& n = nodes_[id];
      if (g[id].size() == 0 || !n.requires_grad || n.op == OpKind::kLeaf) continue;
      propagate(n, g[id], g);
    }
    for (std::size_t id = 0; id < nodes_.size(); ++id)
      if (g[id].size() == 0)
        g[id] = Tensor(nodes_[id].value.rows(), nodes_[id].value.cols());
    return Gradients(std::move(g));
  }

 private:
  const Tensor& val(Var v) const {
    if (v.graph != this) throw ContractError("var belongs to another graph");
    return nodes_[v.id].value;
  }

  Node make(OpKind op, Var a, Var b, Tensor value) const {
    Node n;
    n.op = op;
    n.in0 = a.id;
    n.in1 = b.id;
    n.requires_grad = nodes_[a.id].requires_grad || nodes_[b.id].requires_grad;
    n.value = std::move(value);
    return n;
  }

  Var push(Node n) {
    nodes_.push_back(std::move(n));
    return Var{this, nodes_.size() - 1};
  }

  Var binary(OpKind op, Var a, Var b) {
    const Tensor& x = val(a);
    const Tensor& y = val(b);
    if (!x.same_shape(y) && !x.is_scalar() && !y.is_scalar())
      throw ShapeError("elementwise: shapes " + x.shape_string() + " and " +
                       y.shape_string() + " differ");
    const Tensor& big = x.is_scalar() ? y : x;
    Tensor out(big.rows(), big.cols());
    const bool xs = x.is_scalar() && !y.is_scalar();
    const bool ys = y.is_scalar() && !x.is_scalar();
    for (std::size_t i = 0; i < out.size(); ++i) {
      const double xv = xs ? x[0] : x[i];
      const double yv = ys ? y[0] : y[i];
      switch (op) {
        case OpKind::kAdd: out[i] = xv + yv; break;
        case OpKind::kSub: out[i] = xv - yv; break;
        case OpKind::kMul: out[i] = xv * yv; break;
        default: throw ContractError("binary: bad op");
      }
    }
    return push(make(op, a, b, std::move(out)));
  }

  // Adds `contrib` into slot `id`, reducing to a scalar if the slot is 1×1 and
  // the contribution is not (scalar broadcast).
  void accumulate(std::vector<Tensor>& g, std::size_t id, const Tensor& contrib) const {
    if (!nodes_[id].requires_grad) return;
    const Tensor& v = nodes_[id].value;
    Tensor& slot = g[id];
    if (slot.size() == 0) slot = Tensor(v.rows(), v.cols());
    if (v.is_scalar() && !contrib.is_scalar()) {
      slot[0] += kernels::sum(contrib);
      return;
    }
    for (std::size_t i = 0; i < slot.size(); ++i) slot[i] += contrib[i];
  }

  void propagate(const Node& n, const Tensor& go, std::vector<Tensor>& g) const {
    const Tensor& a = nodes_[n.in0].value;
    const Tensor& b = nodes_[n.in1].value;
    switch (n.op) {
      case OpKind::kLeaf:
        break;
      case OpKind::kMatMul:
        if (nodes_[n.in0].requires_grad) accumulate(g, n.in0, kernels::matmul_nt(go, b));
        if (nodes_[n.in1].requires_grad) accumulate(g, n.in1, kernels::matmul_tn(a, go));
        break;
      case OpKind::kTranspose:
        accumulate(g, n.in0, kernels::transpose(go));
        break;
      case OpKind::kSoftmaxRows: {
        // dx_ij = y_ij (dy_ij - sum_k dy_ik y_ik)
        const Tensor& y = n.value;
        Tensor dx(y.rows(), y.cols());
        for (std::size_t i = 0; i < y.rows(); ++i) {
          double dot = 0.0;
          for (std::size_t j = 0; j < y.cols(); ++j) dot += go(i, j) * y(i, j);
          for (std::size_t j = 0; j < y.cols(); ++j)
            dx(i, j) = y(i, j) * (go(i, j) - dot);
        }
        accumulate(g, n.in0, dx);
        break;
      }
      case OpKind::kAdd:
      case OpKind::kSub: {
        accumulate(g, n.in0, go);
        Tensor neg = go;
        if (n.op == OpKind::kSub)
          for (double& v : neg.data()) v = -v;
        accumulate(g, n.in1, neg);
        break;
      }
      case OpKind::kMul: {
        Tensor da(go.rows(), go.cols()), db(go.rows(), go.cols());
        for (std::size_t i = 0; i < go.size(); ++i) {
          const double av = a.is_scalar() ? a[0] : a[i];
          const double bv = b.is_scalar() ? b[0] : b[i];
          da[i] = go[i] * bv;
          db[i] = go[i] * av;
        }
        accumulate(g, n.in0, da);
        accumulate(g, n.in1, db);
        break;
      }
      case OpKind::kScale: {
        Tensor d = go;
        for (double& v : d.data()) v *= n.p0;
        accumulate(g, n.in0, d);
        break;
      }
      case OpKind::kTanh: {
        Tensor d = go;
        for (std::size_t i = 0; i < d.size(); ++i)
          d[i] *= 1.0 - n.value[i] * n.value[i];
        accumulate(g, n.in0, d);
        break;
      }
      case OpKind::kLog: {
        Tensor d = go;
        for (std::size_t i = 0; i < d.size(); ++i) d[i] /= a[i];
        accumulate(g, n.in0, d);
        break;
      }
      case OpKind::kExp: {
        Tensor d = go;
        for (std::size_t i = 0; i < d.size(); ++i) d[i] *= n.value[i];
        accumulate(g, n.in0, d);
        break;
      }
      case OpKind::kClip: {
        Tensor d = go;
        for (std::size_t i = 0; i < d.size(); ++i)
          if (a[i] < n.p0 || a[i] > n.p1) d[i] = 0.0;
        accumulate(g, n.in0, d);
        break;
      }
      case OpKind::kSum: {
        Tensor d(a.rows(), a.cols(), go[0]);
        accumulate(g, n.in0, d);
        break;
      }
    }
  }

  std::vector<Node> nodes_;
};

inline const Tensor& Var::value() const { return graph->node(id).value; }

inline Var operator+(Var a, Var b) { return a.graph->add(a, b); }
inline Var operator-(Var a, Var b) { return a.graph->sub(a, b); }
inline Var operator*(Var a, Var b) { return a.graph->mul(a, b); }
inline Var operator*(double s, Var a) { return a.graph->scale(a, s); }
inline Var operator*(Var a, double s) { return a.graph->scale(a, s); }

/// Central-difference gradient estimate, one coordinate at a time.
inline Tensor finite_diff_grad(const std::function<double(const Tensor&)>& f,
                               const Tensor& x, double h) {
  if (!(h > 0.0)) throw ContractError("finite_diff_grad: h must be positive");
  Tensor grad(x.rows(), x.cols());
  Tensor probe = x;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double orig = probe[i];
    probe[i] = orig + h;
    const double fp = f(probe);
    probe[i] = orig - h;
    const double fm = f(probe);
    probe[i] = orig;
    grad[i] = (fp - fm) / (2.0 * h);
  }
  return grad;
}

}  // namespace raidx
