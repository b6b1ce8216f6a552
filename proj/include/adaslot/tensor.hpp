#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "adaslot/errors.hpp"

namespace adaslot {

// Shapes are row-major; a rank-0 shape (empty vector) is a scalar with one
// element.  All values are f64.
using Shape = std::vector<std::int64_t>;

std::int64_t numel(const Shape& shape);
std::string shape_str(const Shape& shape);
bool all_finite(const std::vector<double>& v);

struct Node;
using NodePtr = std::shared_ptr<Node>;

// One vertex of the reverse-mode tape.  `vjp` accumulates this node's
// gradient into its parents' buffers; it may capture whatever forward
// state it needs.  Nodes are created in strictly increasing `id` order,
// which backward() uses to get a deterministic reverse-topological sweep.
struct Node {
  std::uint64_t id = 0;
  Shape shape;
  std::vector<double> values;
  std::vector<double> grad;  // empty until touched by backward
  bool requires_grad = false;
  std::vector<NodePtr> parents;
  std::function<void(Node&)> vjp;

  std::int64_t size() const { return static_cast<std::int64_t>(values.size()); }
  // Gradient buffer, sized and zero-filled on first access.
  std::vector<double>& grad_buf();
};

// Value-semantics handle to a Node.  Copies share the node.
class Tensor {
 public:
  Tensor() = default;

  static Tensor leaf(Shape shape, std::vector<double> values);      // tracked
  static Tensor constant(Shape shape, std::vector<double> values);  // frozen
  static Tensor zeros(Shape shape);
  static Tensor full(Shape shape, double value);
  static Tensor scalar(double value);  // rank-0 constant

  bool defined() const { return static_cast<bool>(n_); }
  const Shape& shape() const;
  std::int64_t size() const;
  const std::vector<double>& values() const;
  bool requires_grad() const;
  // After backward(); zeros if this tensor never received a gradient.
  std::vector<double> grad() const;

  double item() const;  // sole element; ContractError if size != 1

  NodePtr node() const { return n_; }
  explicit Tensor(NodePtr n) : n_(std::move(n)) {}

 private:
  NodePtr n_;
};

// Factory for ops (including fused ones defined outside tensor.cpp).
// Drops parents/vjp when no parent is tracked, pruning constant subgraphs.
Tensor make_tensor(Shape shape, std::vector<double> values,
                   std::vector<NodePtr> parents,
                   std::function<void(Node&)> vjp);

// Runs reverse-mode accumulation from a scalar root.  Each node's vjp fires
// exactly once, in decreasing creation order over the reachable tracked
// subgraph.  Graphs are single-use: re-running backward on the same graph
// keeps accumulating into the same buffers.
void backward(const Tensor& root);

// ---- elementwise, with numpy-style right-aligned broadcasting ----
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }

Tensor scale(const Tensor& a, double c);
Tensor add_scalar(const Tensor& a, double c);
inline Tensor operator*(const Tensor& a, double c) { return scale(a, c); }
inline Tensor operator*(double c, const Tensor& a) { return scale(a, c); }

Tensor neg(const Tensor& a);
Tensor relu(const Tensor& a);
// Fused relu(x + b), b broadcast along the last axis of x.  Values match the
// unfused composition bitwise; one node instead of two on the hot path.
Tensor bias_relu(const Tensor& x, const Tensor& b);
Tensor sigmoid(const Tensor& a);
Tensor tanh(const Tensor& a);
Tensor exp(const Tensor& a);
Tensor log(const Tensor& a);
Tensor square(const Tensor& a);
// Gradient passes where lo <= x <= hi, zero outside.
Tensor clamp(const Tensor& a, double lo, double hi);

// ---- linear algebra ----
// (M,K) x (K,N) -> (M,N), rank-2 only.
Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);  // rank-2

// ---- normalization ----
Tensor softmax(const Tensor& a, int axis);
// Normalizes to zero mean / unit variance along `axis` (biased variance,
// eps inside the sqrt).  Affine gain/bias, if any, are applied by callers.
Tensor layer_norm(const Tensor& a, int axis, double eps);

// ---- reductions ----
Tensor sum(const Tensor& a);             // rank-0
Tensor mean(const Tensor& a);            // rank-0
Tensor sum(const Tensor& a, int axis);   // drops the axis
Tensor mean(const Tensor& a, int axis);  // drops the axis

// ---- shape ----
Tensor reshape(const Tensor& a, Shape shape);
Tensor broadcast_to(const Tensor& a, const Shape& shape);
Tensor concat(const std::vector<Tensor>& parts, int axis);
Tensor slice(const Tensor& a, int axis, std::int64_t start, std::int64_t len);

// ---- graph surgery ----
Tensor stop_grad(const Tensor& a);
// Forward takes `hard_values`; gradient flows to `soft` unchanged.
Tensor straight_through(std::vector<double> hard_values, const Tensor& soft);

// ---- broadcast helpers shared with fused ops ----
Shape broadcast_shape(const Shape& a, const Shape& b);
// Accumulate `g` (laid out as `g_shape`) into `out`, summing over axes that
// were broadcast relative to `target`.  Deterministic ascending-index order.
void reduce_into(const std::vector<double>& g, const Shape& g_shape,
                 const Shape& target, std::vector<double>& out);

}  // namespace adaslot
