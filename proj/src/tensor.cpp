#include "adaslot/tensor.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstring>
#include <sstream>
#include <unordered_set>

namespace adaslot {

namespace {

std::atomic<std::uint64_t> g_next_id{1};

// Row kernel for C = A*B (or C += A*B): 8/4-wide column blocks with four
// independent accumulator chains, one store per block.  The summation order
// is fixed by the blocking, so results are deterministic run to run.
template <bool kAdd, std::int64_t JB>
void mm_block(const double* __restrict arow, const double* __restrict b,
              double* __restrict crow, std::int64_t K, std::int64_t N,
              std::int64_t j0) {
  double acc0[JB] = {0}, acc1[JB] = {0}, acc2[JB] = {0}, acc3[JB] = {0};
  std::int64_t k = 0;
  for (; k + 4 <= K; k += 4) {
    const double a0 = arow[k], a1 = arow[k + 1];
    const double a2 = arow[k + 2], a3 = arow[k + 3];
    const double* __restrict b0 = b + k * N + j0;
    const double* __restrict b1 = b0 + N;
    const double* __restrict b2 = b1 + N;
    const double* __restrict b3 = b2 + N;
    for (std::int64_t j = 0; j < JB; ++j) {
      acc0[j] += a0 * b0[j];
      acc1[j] += a1 * b1[j];
      acc2[j] += a2 * b2[j];
      acc3[j] += a3 * b3[j];
    }
  }
  for (; k < K; ++k) {
    const double ak = arow[k];
    const double* __restrict bk = b + k * N + j0;
    for (std::int64_t j = 0; j < JB; ++j) acc0[j] += ak * bk[j];
  }
  for (std::int64_t j = 0; j < JB; ++j) {
    const double s = (acc0[j] + acc1[j]) + (acc2[j] + acc3[j]);
    if constexpr (kAdd)
      crow[j0 + j] += s;
    else
      crow[j0 + j] = s;
  }
}

template <bool kAdd>
void mm_rows(const double* __restrict a, const double* __restrict b,
             double* __restrict c, std::int64_t M, std::int64_t K,
             std::int64_t N) {
  for (std::int64_t i = 0; i < M; ++i) {
    const double* arow = a + i * K;
    double* crow = c + i * N;
    std::int64_t j0 = 0;
    for (; j0 + 8 <= N; j0 += 8) mm_block<kAdd, 8>(arow, b, crow, K, N, j0);
    for (; j0 + 4 <= N; j0 += 4) mm_block<kAdd, 4>(arow, b, crow, K, N, j0);
    for (; j0 < N; ++j0) {
      double s = 0.0;
      for (std::int64_t k = 0; k < K; ++k) s += arow[k] * b[k * N + j0];
      if constexpr (kAdd)
        crow[j0] += s;
      else
        crow[j0] = s;
    }
  }
}

NodePtr new_node(Shape shape, std::vector<double> values) {
  auto n = std::make_shared<Node>();
  n->id = g_next_id.fetch_add(1, std::memory_order_relaxed);
  n->shape = std::move(shape);
  n->values = std::move(values);
  return n;
}

// Iteration plans live on the stack; ranks above this are rejected.
constexpr int kPlanCap = 8;

// Strides for reading `from` as if broadcast to `to` (0 on broadcast axes),
// written into st[0..to.size()).
void bcast_strides_into(const Shape& from, const Shape& to, std::int64_t* st) {
  const int rf = static_cast<int>(from.size());
  const int rt = static_cast<int>(to.size());
  std::int64_t nat[kPlanCap];
  std::int64_t acc = 1;
  for (int i = rf - 1; i >= 0; --i) {
    nat[i] = acc;
    acc *= from[i];
  }
  for (int k = 0; k < rt; ++k) {
    const int j = k - (rt - rf);
    if (j < 0) {
      st[k] = 0;
    } else if (from[j] == to[k]) {
      st[k] = nat[j];
    } else if (from[j] == 1) {
      st[k] = 0;
    } else {
      throw ShapeError("broadcast mismatch: " + shape_str(from) + " vs " +
                       shape_str(to));
    }
  }
}

// Broadcast iteration plan: dims with size 1 dropped, adjacent dims merged
// when every operand (including the contiguous output) strides through them
// contiguously.  Collapses most broadcast patterns to one or two loops.
struct IterPlan {
  int m = 0;                     // merged rank, >= 1 after make_plan
  std::int64_t dims[kPlanCap];   // outermost first
  std::int64_t st[3][kPlanCap];  // [operand][dim]; the output is last
};

IterPlan make_plan(const Shape& out, const std::int64_t* const* in_st,
                   int nin) {
  const int r = static_cast<int>(out.size());
  if (r > kPlanCap)
    throw ShapeError("rank above " + std::to_string(kPlanCap) +
                     " unsupported: " + shape_str(out));
  std::int64_t onat[kPlanCap];
  std::int64_t acc = 1;
  for (int i = r - 1; i >= 0; --i) {
    onat[i] = acc;
    acc *= out[i];
  }
  const int ntot = nin + 1;
  IterPlan p;
  for (int d = 0; d < r; ++d) {
    if (out[d] == 1) continue;
    std::int64_t sd[3];
    for (int q = 0; q < nin; ++q) sd[q] = in_st[q][d];
    sd[nin] = onat[d];
    bool merged = p.m > 0;
    if (merged)
      for (int q = 0; q < ntot; ++q)
        if (p.st[q][p.m - 1] != sd[q] * out[d]) {
          merged = false;
          break;
        }
    if (merged) {
      p.dims[p.m - 1] *= out[d];
      for (int q = 0; q < ntot; ++q) p.st[q][p.m - 1] = sd[q];
    } else {
      p.dims[p.m] = out[d];
      for (int q = 0; q < ntot; ++q) p.st[q][p.m] = sd[q];
      ++p.m;
    }
  }
  if (p.m == 0) {
    p.dims[0] = 1;
    for (int q = 0; q < ntot; ++q) p.st[q][0] = 0;
    p.m = 1;
  }
  return p;
}

// Run a two-operand plan: f(out_offset, a_offset, b_offset), output ascending.
// Ranks 1-3 get direct loop nests (with a unit-stride inner branch so the
// common contiguous case vectorizes); deeper plans take the generic walker.
template <class F>
void run_plan2(const IterPlan& p, F&& f) {
  const int m = p.m;
  const std::int64_t* A = p.st[0];
  const std::int64_t* B = p.st[1];
  const std::int64_t* O = p.st[2];
  const std::int64_t ni = p.dims[m - 1];
  const std::int64_t ia = A[m - 1], ib = B[m - 1], io = O[m - 1];
  if (m <= 3) {
    const std::int64_t d0 = m >= 2 ? p.dims[m - 2] : 1;
    const std::int64_t d1 = m == 3 ? p.dims[0] : 1;
    for (std::int64_t i1 = 0; i1 < d1; ++i1)
      for (std::int64_t i0 = 0; i0 < d0; ++i0) {
        std::int64_t pa = 0, pb = 0, po = 0;
        if (m == 3) {
          pa = i1 * A[0];
          pb = i1 * B[0];
          po = i1 * O[0];
        }
        if (m >= 2) {
          pa += i0 * A[m - 2];
          pb += i0 * B[m - 2];
          po += i0 * O[m - 2];
        }
        if (ia == 1 && ib == 1 && io == 1) {
          for (std::int64_t t = 0; t < ni; ++t) f(po + t, pa + t, pb + t);
        } else {
          for (std::int64_t t = 0; t < ni; ++t) {
            f(po, pa, pb);
            pa += ia;
            pb += ib;
            po += io;
          }
        }
      }
    return;
  }
  std::int64_t idx[kPlanCap] = {};
  std::int64_t oa = 0, ob = 0, oo = 0;
  while (true) {
    std::int64_t pa = oa, pb = ob, po = oo;
    for (std::int64_t t = 0; t < ni; ++t) {
      f(po, pa, pb);
      pa += ia;
      pb += ib;
      po += io;
    }
    int d = m - 2;
    for (; d >= 0; --d) {
      ++idx[d];
      oa += A[d];
      ob += B[d];
      oo += O[d];
      if (idx[d] < p.dims[d]) break;
      oa -= A[d] * p.dims[d];
      ob -= B[d] * p.dims[d];
      oo -= O[d] * p.dims[d];
      idx[d] = 0;
    }
    if (d < 0) break;
  }
}

// Single-operand variant.  f(out_offset, a_offset).
template <class F>
void run_plan1(const IterPlan& p, F&& f) {
  const int m = p.m;
  const std::int64_t* A = p.st[0];
  const std::int64_t* O = p.st[1];
  const std::int64_t ni = p.dims[m - 1];
  const std::int64_t ia = A[m - 1], io = O[m - 1];
  if (m <= 3) {
    const std::int64_t d0 = m >= 2 ? p.dims[m - 2] : 1;
    const std::int64_t d1 = m == 3 ? p.dims[0] : 1;
    for (std::int64_t i1 = 0; i1 < d1; ++i1)
      for (std::int64_t i0 = 0; i0 < d0; ++i0) {
        std::int64_t pa = 0, po = 0;
        if (m == 3) {
          pa = i1 * A[0];
          po = i1 * O[0];
        }
        if (m >= 2) {
          pa += i0 * A[m - 2];
          po += i0 * O[m - 2];
        }
        if (ia == 1 && io == 1) {
          for (std::int64_t t = 0; t < ni; ++t) f(po + t, pa + t);
        } else {
          for (std::int64_t t = 0; t < ni; ++t) {
            f(po, pa);
            pa += ia;
            po += io;
          }
        }
      }
    return;
  }
  std::int64_t idx[kPlanCap] = {};
  std::int64_t oa = 0, oo = 0;
  while (true) {
    std::int64_t pa = oa, po = oo;
    for (std::int64_t t = 0; t < ni; ++t) {
      f(po, pa);
      pa += ia;
      po += io;
    }
    int d = m - 2;
    for (; d >= 0; --d) {
      ++idx[d];
      oa += A[d];
      oo += O[d];
      if (idx[d] < p.dims[d]) break;
      oa -= A[d] * p.dims[d];
      oo -= O[d] * p.dims[d];
      idx[d] = 0;
    }
    if (d < 0) break;
  }
}

// Visit every element of `out` in ascending order, tracking offsets into two
// broadcast operands.  f(out_offset, a_offset, b_offset).
template <class F>
void for_each2(const Shape& out, const std::int64_t* sa, const std::int64_t* sb,
               F&& f) {
  const std::int64_t* ops[2] = {sa, sb};
  run_plan2(make_plan(out, ops, 2), std::forward<F>(f));
}

// Single-operand variant.  f(out_offset, a_offset).
template <class F>
void for_each1(const Shape& out, const std::int64_t* sa, F&& f) {
  const std::int64_t* ops[1] = {sa};
  run_plan1(make_plan(out, ops, 1), std::forward<F>(f));
}

void check_defined(const Tensor& t, const char* who) {
  if (!t.defined()) throw ContractError(std::string(who) + ": undefined tensor");
}

// (outer, len, inner) decomposition around `axis`.
void axis_dims(const Shape& s, int axis, std::int64_t& outer, std::int64_t& len,
               std::int64_t& inner) {
  if (axis < 0 || axis >= static_cast<int>(s.size()))
    throw ContractError("axis " + std::to_string(axis) + " out of range for " +
                        shape_str(s));
  outer = 1;
  inner = 1;
  for (int i = 0; i < axis; ++i) outer *= s[i];
  len = s[axis];
  for (int i = axis + 1; i < static_cast<int>(s.size()); ++i) inner *= s[i];
}

template <class F, class DF>
Tensor unary_op(const Tensor& a, F&& f, DF df) {
  check_defined(a, "unary op");
  const auto& xv = a.values();
  std::vector<double> out(xv.size());
  for (std::size_t i = 0; i < xv.size(); ++i) out[i] = f(xv[i]);
  NodePtr an = a.node();
  return make_tensor(a.shape(), std::move(out), {an}, [an, df](Node& self) {
    const auto& x = an->values;
    const auto& y = self.values;
    const auto& g = self.grad;
    auto& ga = an->grad;
    if (ga.empty()) {  // first contribution: write instead of accumulate
      ga.resize(x.size());
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] = g[i] * df(x[i], y[i]);
    } else {
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * df(x[i], y[i]);
    }
  });
}

}  // namespace

std::int64_t numel(const Shape& shape) {
  std::int64_t n = 1;
  for (auto d : shape) {
    if (d <= 0) throw ShapeError("non-positive dim in shape " + shape_str(shape));
    n *= d;
  }
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '(';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ')';
  return os.str();
}

bool all_finite(const std::vector<double>& v) {
  for (double x : v)
    if (!std::isfinite(x)) return false;
  return true;
}

std::vector<double>& Node::grad_buf() {
  if (grad.empty()) grad.assign(values.size(), 0.0);
  return grad;
}

Tensor Tensor::leaf(Shape shape, std::vector<double> values) {
  if (numel(shape) != static_cast<std::int64_t>(values.size()))
    throw ShapeError("leaf: " + std::to_string(values.size()) +
                     " values for shape " + shape_str(shape));
  auto n = new_node(std::move(shape), std::move(values));
  n->requires_grad = true;
  return Tensor(n);
}

Tensor Tensor::constant(Shape shape, std::vector<double> values) {
  if (numel(shape) != static_cast<std::int64_t>(values.size()))
    throw ShapeError("constant: " + std::to_string(values.size()) +
                     " values for shape " + shape_str(shape));
  return Tensor(new_node(std::move(shape), std::move(values)));
}

Tensor Tensor::zeros(Shape shape) {
  std::vector<double> v(numel(shape), 0.0);
  return constant(std::move(shape), std::move(v));
}

Tensor Tensor::full(Shape shape, double value) {
  std::vector<double> v(numel(shape), value);
  return constant(std::move(shape), std::move(v));
}

Tensor Tensor::scalar(double value) { return constant({}, {value}); }

const Shape& Tensor::shape() const {
  if (!n_) throw ContractError("shape(): undefined tensor");
  return n_->shape;
}

std::int64_t Tensor::size() const {
  if (!n_) throw ContractError("size(): undefined tensor");
  return n_->size();
}

const std::vector<double>& Tensor::values() const {
  if (!n_) throw ContractError("values(): undefined tensor");
  return n_->values;
}

bool Tensor::requires_grad() const { return n_ && n_->requires_grad; }

std::vector<double> Tensor::grad() const {
  if (!n_) throw ContractError("grad(): undefined tensor");
  if (n_->grad.empty()) return std::vector<double>(n_->values.size(), 0.0);
  return n_->grad;
}

double Tensor::item() const {
  if (size() != 1)
    throw ContractError("item(): tensor has shape " + shape_str(shape()));
  return n_->values[0];
}

Tensor make_tensor(Shape shape, std::vector<double> values,
                   std::vector<NodePtr> parents,
                   std::function<void(Node&)> vjp) {
  if (numel(shape) != static_cast<std::int64_t>(values.size()))
    throw ShapeError("make_tensor: " + std::to_string(values.size()) +
                     " values for shape " + shape_str(shape));
  auto n = new_node(std::move(shape), std::move(values));
  bool tracked = false;
  for (const auto& p : parents) {
    if (!p) throw ContractError("make_tensor: null parent");
    tracked = tracked || p->requires_grad;
  }
  if (tracked) {
    n->requires_grad = true;
    n->parents = std::move(parents);
    n->vjp = std::move(vjp);
  }
  return Tensor(n);
}

void backward(const Tensor& root) {
  check_defined(root, "backward");
  NodePtr r = root.node();
  if (r->size() != 1)
    throw ContractError("backward: root must be scalar, got " +
                        shape_str(r->shape));
  if (!r->requires_grad)
    throw ContractError("backward: root is not tracked");
  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  std::vector<Node*> stack{r.get()};
  seen.insert(r.get());
  while (!stack.empty()) {
    Node* n = stack.back();
    stack.pop_back();
    order.push_back(n);
    for (const auto& p : n->parents)
      if (p->requires_grad && seen.insert(p.get()).second)
        stack.push_back(p.get());
  }
  // Creation order is a valid topological order, so its reverse is a valid
  // (and deterministic) schedule.
  std::sort(order.begin(), order.end(),
            [](Node* x, Node* y) { return x->id > y->id; });
  r->grad_buf()[0] += 1.0;
  for (Node* n : order)
    if (n->vjp) n->vjp(*n);
}

Shape broadcast_shape(const Shape& a, const Shape& b) {
  const int ra = static_cast<int>(a.size());
  const int rb = static_cast<int>(b.size());
  const int r = std::max(ra, rb);
  Shape out(r);
  for (int k = 0; k < r; ++k) {
    const int ia = k - (r - ra);
    const int ib = k - (r - rb);
    const std::int64_t da = ia >= 0 ? a[ia] : 1;
    const std::int64_t db = ib >= 0 ? b[ib] : 1;
    if (da == db || da == 1 || db == 1) {
      out[k] = std::max(da, db);
    } else {
      throw ShapeError("cannot broadcast " + shape_str(a) + " with " +
                       shape_str(b));
    }
  }
  return out;
}

void reduce_into(const std::vector<double>& g, const Shape& g_shape,
                 const Shape& target, std::vector<double>& out) {
  if (out.size() != static_cast<std::size_t>(numel(target)))
    throw ShapeError("reduce_into: bad output buffer");
  if (g_shape == target) {
    for (std::size_t i = 0; i < g.size(); ++i) out[i] += g[i];
    return;
  }
  std::int64_t tst[kPlanCap];
  bcast_strides_into(target, g_shape, tst);
  const std::int64_t* ops[1] = {tst};
  const IterPlan p = make_plan(g_shape, ops, 1);
  const int m = p.m;
  const std::int64_t* T = p.st[0];
  const std::int64_t ni = p.dims[m - 1];
  // Summed middle axis over a short kept suffix (bias grads, per-slot
  // reductions): accumulate in a local block and touch `out` once instead of
  // once per row.  Rows are combined four at a time with a fixed add tree,
  // so the summation order is deterministic.
  if ((m == 2 || m == 3) && T[m - 1] == 1 && T[m - 2] == 0 && ni <= 32) {
    const std::int64_t rows = p.dims[m - 2];
    const std::int64_t outer = m == 3 ? p.dims[0] : 1;
    for (std::int64_t i0 = 0; i0 < outer; ++i0) {
      const double* __restrict gp =
          g.data() + (m == 3 ? i0 * p.st[1][0] : 0);
      double* __restrict op = out.data() + (m == 3 ? i0 * T[0] : 0);
      double acc[32] = {0};
      std::int64_t r = 0;
      for (; r + 4 <= rows; r += 4) {
        const double* __restrict g0 = gp + (r + 0) * ni;
        const double* __restrict g1 = gp + (r + 1) * ni;
        const double* __restrict g2 = gp + (r + 2) * ni;
        const double* __restrict g3 = gp + (r + 3) * ni;
        for (std::int64_t j = 0; j < ni; ++j)
          acc[j] += (g0[j] + g1[j]) + (g2[j] + g3[j]);
      }
      for (; r < rows; ++r) {
        const double* __restrict g0 = gp + r * ni;
        for (std::int64_t j = 0; j < ni; ++j) acc[j] += g0[j];
      }
      for (std::int64_t j = 0; j < ni; ++j) op[j] += acc[j];
    }
    return;
  }
  run_plan1(p, [&](std::int64_t i, std::int64_t ot) { out[ot] += g[i]; });
}

// ---------------------------------------------------------------- arithmetic

namespace {

enum class BinOp { kAdd, kSub, kMul, kDiv };

template <BinOp op>
Tensor binary(const Tensor& a, const Tensor& b) {
  check_defined(a, "binary op");
  check_defined(b, "binary op");
  const Shape os = broadcast_shape(a.shape(), b.shape());
  const auto& av = a.values();
  const auto& bv = b.values();
  std::vector<double> out(numel(os));
  auto apply = [](double x, double y) {
    if constexpr (op == BinOp::kAdd) return x + y;
    if constexpr (op == BinOp::kSub) return x - y;
    if constexpr (op == BinOp::kMul) return x * y;
    if constexpr (op == BinOp::kDiv) return x / y;
  };
  if (a.shape() == b.shape()) {
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = apply(av[i], bv[i]);
  } else {
    std::int64_t sa[kPlanCap], sb[kPlanCap];
    bcast_strides_into(a.shape(), os, sa);
    bcast_strides_into(b.shape(), os, sb);
    for_each2(os, sa, sb, [&](std::int64_t i, std::int64_t oa, std::int64_t ob) {
      out[i] = apply(av[oa], bv[ob]);
    });
  }
  NodePtr an = a.node(), bn = b.node();
  return make_tensor(os, std::move(out), {an, bn}, [an, bn](Node& self) {
    const auto& g = self.grad;
    const Shape& os2 = self.shape;
    const std::size_t n = g.size();
    if constexpr (op == BinOp::kAdd) {
      if (an->requires_grad) reduce_into(g, os2, an->shape, an->grad_buf());
      if (bn->requires_grad) reduce_into(g, os2, bn->shape, bn->grad_buf());
    } else if constexpr (op == BinOp::kSub) {
      if (an->requires_grad) reduce_into(g, os2, an->shape, an->grad_buf());
      if (bn->requires_grad) {
        std::vector<double> t(n);
        for (std::size_t i = 0; i < n; ++i) t[i] = -g[i];
        reduce_into(t, os2, bn->shape, bn->grad_buf());
      }
    } else if constexpr (op == BinOp::kMul) {
      if (an->requires_grad) {
        std::vector<double> t(n);
        if (bn->shape == os2) {
          for (std::size_t i = 0; i < n; ++i) t[i] = g[i] * bn->values[i];
        } else {
          std::int64_t sb[kPlanCap];
          bcast_strides_into(bn->shape, os2, sb);
          for_each1(os2, sb, [&](std::int64_t i, std::int64_t ob) {
            t[i] = g[i] * bn->values[ob];
          });
        }
        reduce_into(t, os2, an->shape, an->grad_buf());
      }
      if (bn->requires_grad) {
        std::vector<double> t(n);
        if (an->shape == os2) {
          for (std::size_t i = 0; i < n; ++i) t[i] = g[i] * an->values[i];
        } else {
          std::int64_t sa[kPlanCap];
          bcast_strides_into(an->shape, os2, sa);
          for_each1(os2, sa, [&](std::int64_t i, std::int64_t oa) {
            t[i] = g[i] * an->values[oa];
          });
        }
        reduce_into(t, os2, bn->shape, bn->grad_buf());
      }
    } else {  // kDiv
      std::int64_t sa[kPlanCap], sb[kPlanCap];
      bcast_strides_into(an->shape, os2, sa);
      bcast_strides_into(bn->shape, os2, sb);
      if (an->requires_grad) {
        std::vector<double> t(n);
        for_each1(os2, sb, [&](std::int64_t i, std::int64_t ob) {
          t[i] = g[i] / bn->values[ob];
        });
        reduce_into(t, os2, an->shape, an->grad_buf());
      }
      if (bn->requires_grad) {
        std::vector<double> t(n);
        for_each2(os2, sa, sb,
                  [&](std::int64_t i, std::int64_t oa, std::int64_t ob) {
                    const double bv2 = bn->values[ob];
                    t[i] = -g[i] * an->values[oa] / (bv2 * bv2);
                  });
        reduce_into(t, os2, bn->shape, bn->grad_buf());
      }
    }
  });
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) { return binary<BinOp::kAdd>(a, b); }
Tensor sub(const Tensor& a, const Tensor& b) { return binary<BinOp::kSub>(a, b); }
Tensor mul(const Tensor& a, const Tensor& b) { return binary<BinOp::kMul>(a, b); }
Tensor div(const Tensor& a, const Tensor& b) { return binary<BinOp::kDiv>(a, b); }

Tensor scale(const Tensor& a, double c) {
  return unary_op(
      a, [c](double x) { return c * x; },
      [c](double, double) { return c; });
}

Tensor add_scalar(const Tensor& a, double c) {
  return unary_op(
      a, [c](double x) { return x + c; }, [](double, double) { return 1.0; });
}

Tensor neg(const Tensor& a) { return scale(a, -1.0); }

Tensor relu(const Tensor& a) {
  return unary_op(
      a, [](double x) { return x < 0.0 ? 0.0 : x; },  // NaN passes through
      [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

Tensor bias_relu(const Tensor& x, const Tensor& b) {
  check_defined(x, "bias_relu");
  check_defined(b, "bias_relu");
  const Shape& xs = x.shape();
  const Shape& bs = b.shape();
  if (xs.empty() || bs.size() != 1 || bs[0] != xs.back())
    throw ShapeError("bias_relu: " + shape_str(xs) + " with bias " +
                     shape_str(bs));
  const auto& xv = x.values();
  const auto& bv = b.values();
  const std::int64_t n = numel(xs);
  const std::int64_t w = bs[0];
  std::vector<double> out(n);
  for (std::int64_t r = 0; r < n; r += w) {
    const double* __restrict xr = xv.data() + r;
    double* __restrict yr = out.data() + r;
    for (std::int64_t j = 0; j < w; ++j) {
      const double z = xr[j] + bv[j];
      yr[j] = z < 0.0 ? 0.0 : z;  // NaN passes through
    }
  }
  NodePtr xn = x.node(), bn = b.node();
  return make_tensor(xs, std::move(out), {xn, bn}, [xn, bn, w](Node& self) {
    const auto& g = self.grad;
    const auto& y = self.values;
    const std::int64_t n2 = static_cast<std::int64_t>(g.size());
    if (xn->requires_grad) {
      auto& gx = xn->grad;
      if (gx.empty()) {
        gx.resize(g.size());
        for (std::int64_t i = 0; i < n2; ++i)
          gx[i] = y[i] > 0.0 ? g[i] : 0.0;
      } else {
        for (std::int64_t i = 0; i < n2; ++i)
          if (y[i] > 0.0) gx[i] += g[i];
      }
    }
    if (bn->requires_grad) {
      auto& gb = bn->grad_buf();
      if (w <= 256) {
        // Accumulate in a local block, rows combined four at a time with a
        // fixed add tree (matching reduce_into), then touch `gb` once.
        double acc[256] = {0};
        const std::int64_t rows = n2 / w;
        std::int64_t r = 0;
        for (; r + 4 <= rows; r += 4) {
          const double* __restrict g0 = g.data() + (r + 0) * w;
          const double* __restrict g1 = g.data() + (r + 1) * w;
          const double* __restrict g2 = g.data() + (r + 2) * w;
          const double* __restrict g3 = g.data() + (r + 3) * w;
          const double* __restrict y0 = y.data() + (r + 0) * w;
          const double* __restrict y1 = y.data() + (r + 1) * w;
          const double* __restrict y2 = y.data() + (r + 2) * w;
          const double* __restrict y3 = y.data() + (r + 3) * w;
          for (std::int64_t j = 0; j < w; ++j) {
            const double m0 = y0[j] > 0.0 ? g0[j] : 0.0;
            const double m1 = y1[j] > 0.0 ? g1[j] : 0.0;
            const double m2 = y2[j] > 0.0 ? g2[j] : 0.0;
            const double m3 = y3[j] > 0.0 ? g3[j] : 0.0;
            acc[j] += (m0 + m1) + (m2 + m3);
          }
        }
        for (; r < rows; ++r) {
          const double* __restrict gr = g.data() + r * w;
          const double* __restrict yr = y.data() + r * w;
          for (std::int64_t j = 0; j < w; ++j)
            if (yr[j] > 0.0) acc[j] += gr[j];
        }
        for (std::int64_t j = 0; j < w; ++j) gb[j] += acc[j];
      } else {
        for (std::int64_t r = 0; r < n2; r += w)
          for (std::int64_t j = 0; j < w; ++j)
            if (y[r + j] > 0.0) gb[j] += g[r + j];
      }
    }
  });
}

Tensor sigmoid(const Tensor& a) {
  return unary_op(
      a,
      [](double x) {
        if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
        const double e = std::exp(x);
        return e / (1.0 + e);
      },
      [](double, double y) { return y * (1.0 - y); });
}

Tensor tanh(const Tensor& a) {
  return unary_op(
      a, [](double x) { return std::tanh(x); },
      [](double, double y) { return 1.0 - y * y; });
}

Tensor exp(const Tensor& a) {
  return unary_op(
      a, [](double x) { return std::exp(x); },
      [](double, double y) { return y; });
}

Tensor log(const Tensor& a) {
  return unary_op(
      a, [](double x) { return std::log(x); },
      [](double x, double) { return 1.0 / x; });
}

Tensor square(const Tensor& a) {
  return unary_op(
      a, [](double x) { return x * x; },
      [](double x, double) { return 2.0 * x; });
}

Tensor clamp(const Tensor& a, double lo, double hi) {
  if (!(lo <= hi)) throw ContractError("clamp: lo > hi");
  return unary_op(
      a, [lo, hi](double x) { return std::min(std::max(x, lo), hi); },
      [lo, hi](double x, double) { return (x >= lo && x <= hi) ? 1.0 : 0.0; });
}

// ------------------------------------------------------------ linear algebra

Tensor matmul(const Tensor& a, const Tensor& b) {
  check_defined(a, "matmul");
  check_defined(b, "matmul");
  if (a.shape().size() != 2 || b.shape().size() != 2)
    throw ShapeError("matmul: rank-2 required, got " + shape_str(a.shape()) +
                     " x " + shape_str(b.shape()));
  const std::int64_t M = a.shape()[0], K = a.shape()[1];
  const std::int64_t K2 = b.shape()[0], N = b.shape()[1];
  if (K != K2)
    throw ShapeError("matmul: inner dims " + shape_str(a.shape()) + " x " +
                     shape_str(b.shape()));
  const auto& av = a.values();
  const auto& bv = b.values();
  std::vector<double> out(M * N);
  mm_rows<false>(av.data(), bv.data(), out.data(), M, K, N);
  NodePtr an = a.node(), bn = b.node();
  return make_tensor({M, N}, std::move(out), {an, bn},
                     [an, bn, M, K, N](Node& self) {
                       const auto& g = self.grad;
                       if (an->requires_grad) {
                         // dA += dC * B^T, B^T materialized so the kernel
                         // reads stride-1 rows.  A fresh grad buffer is
                         // written outright, skipping the read-modify-write.
                         const auto& bv2 = bn->values;
                         std::vector<double> bt(N * K);
                         for (std::int64_t k = 0; k < K; ++k)
                           for (std::int64_t j = 0; j < N; ++j)
                             bt[j * K + k] = bv2[k * N + j];
                         auto& ga = an->grad;
                         if (ga.empty()) {
                           ga.resize(an->values.size());
                           mm_rows<false>(g.data(), bt.data(), ga.data(), M, N,
                                          K);
                         } else {
                           mm_rows<true>(g.data(), bt.data(), ga.data(), M, N,
                                         K);
                         }
                       }
                       if (bn->requires_grad) {
                         // dB += A^T * dC as a sum of row outer products; the
                         // (K,N) target stays cache-hot. Rows are consumed
                         // four at a time with a fixed add tree, so the
                         // summation order (and the result bits) never vary.
                         auto& gb = bn->grad_buf();
                         const auto& av2 = an->values;
                         std::int64_t i = 0;
                         for (; i + 4 <= M; i += 4) {
                           const double* __restrict a0 = &av2[(i + 0) * K];
                           const double* __restrict a1 = &av2[(i + 1) * K];
                           const double* __restrict a2 = &av2[(i + 2) * K];
                           const double* __restrict a3 = &av2[(i + 3) * K];
                           const double* __restrict g0 = &g[(i + 0) * N];
                           const double* __restrict g1 = &g[(i + 1) * N];
                           const double* __restrict g2 = &g[(i + 2) * N];
                           const double* __restrict g3 = &g[(i + 3) * N];
                           for (std::int64_t k = 0; k < K; ++k) {
                             const double x0 = a0[k], x1 = a1[k];
                             const double x2 = a2[k], x3 = a3[k];
                             double* __restrict gbrow = &gb[k * N];
                             for (std::int64_t j = 0; j < N; ++j)
                               gbrow[j] += (x0 * g0[j] + x1 * g1[j]) +
                                           (x2 * g2[j] + x3 * g3[j]);
                           }
                         }
                         for (; i < M; ++i)
                           for (std::int64_t k = 0; k < K; ++k) {
                             const double aik = av2[i * K + k];
                             const double* __restrict grow = &g[i * N];
                             double* __restrict gbrow = &gb[k * N];
                             for (std::int64_t j = 0; j < N; ++j)
                               gbrow[j] += aik * grow[j];
                           }
                       }
                     });
}

Tensor transpose(const Tensor& a) {
  check_defined(a, "transpose");
  if (a.shape().size() != 2)
    throw ShapeError("transpose: rank-2 required, got " + shape_str(a.shape()));
  const std::int64_t M = a.shape()[0], N = a.shape()[1];
  const auto& av = a.values();
  std::vector<double> out(M * N);
  for (std::int64_t i = 0; i < M; ++i)
    for (std::int64_t j = 0; j < N; ++j) out[j * M + i] = av[i * N + j];
  NodePtr an = a.node();
  return make_tensor({N, M}, std::move(out), {an}, [an, M, N](Node& self) {
    auto& ga = an->grad_buf();
    const auto& g = self.grad;
    for (std::int64_t i = 0; i < M; ++i)
      for (std::int64_t j = 0; j < N; ++j) ga[i * N + j] += g[j * M + i];
  });
}

// ------------------------------------------------------------- normalization

Tensor softmax(const Tensor& a, int axis) {
  check_defined(a, "softmax");
  std::int64_t outer, len, inner;
  axis_dims(a.shape(), axis, outer, len, inner);
  const auto& xv = a.values();
  std::vector<double> out(xv.size());
  if (inner == 1) {
    for (std::int64_t o = 0; o < outer; ++o) {
      const std::int64_t base = o * len;
      double mx = xv[base];
      for (std::int64_t l = 1; l < len; ++l) mx = std::max(mx, xv[base + l]);
      double sum = 0.0;
      for (std::int64_t l = 0; l < len; ++l) {
        const double e = std::exp(xv[base + l] - mx);
        out[base + l] = e;
        sum += e;
      }
      const double inv = 1.0 / sum;
      for (std::int64_t l = 0; l < len; ++l) out[base + l] *= inv;
    }
  } else {
    // Stride through rows so each pass streams contiguously.
    std::vector<double> mx(inner), sum(inner);
    for (std::int64_t o = 0; o < outer; ++o) {
      const std::int64_t base = o * len * inner;
      std::memcpy(mx.data(), &xv[base], sizeof(double) * inner);
      for (std::int64_t l = 1; l < len; ++l) {
        const double* row = &xv[base + l * inner];
        for (std::int64_t in = 0; in < inner; ++in)
          mx[in] = std::max(mx[in], row[in]);
      }
      std::fill(sum.begin(), sum.end(), 0.0);
      for (std::int64_t l = 0; l < len; ++l) {
        const double* row = &xv[base + l * inner];
        double* orow = &out[base + l * inner];
        for (std::int64_t in = 0; in < inner; ++in) {
          const double e = std::exp(row[in] - mx[in]);
          orow[in] = e;
          sum[in] += e;
        }
      }
      for (std::int64_t in = 0; in < inner; ++in) sum[in] = 1.0 / sum[in];
      for (std::int64_t l = 0; l < len; ++l) {
        double* orow = &out[base + l * inner];
        for (std::int64_t in = 0; in < inner; ++in) orow[in] *= sum[in];
      }
    }
  }
  NodePtr an = a.node();
  return make_tensor(
      a.shape(), std::move(out), {an}, [an, outer, len, inner](Node& self) {
        auto& ga = an->grad_buf();
        const auto& y = self.values;
        const auto& g = self.grad;
        if (inner == 1) {
          for (std::int64_t o = 0; o < outer; ++o) {
            const std::int64_t base = o * len;
            double dot = 0.0;
            for (std::int64_t l = 0; l < len; ++l)
              dot += g[base + l] * y[base + l];
            for (std::int64_t l = 0; l < len; ++l)
              ga[base + l] += y[base + l] * (g[base + l] - dot);
          }
        } else {
          std::vector<double> dot(inner);
          for (std::int64_t o = 0; o < outer; ++o) {
            const std::int64_t base = o * len * inner;
            std::fill(dot.begin(), dot.end(), 0.0);
            for (std::int64_t l = 0; l < len; ++l) {
              const double* grow = &g[base + l * inner];
              const double* yrow = &y[base + l * inner];
              for (std::int64_t in = 0; in < inner; ++in)
                dot[in] += grow[in] * yrow[in];
            }
            for (std::int64_t l = 0; l < len; ++l) {
              const double* grow = &g[base + l * inner];
              const double* yrow = &y[base + l * inner];
              double* garow = &ga[base + l * inner];
              for (std::int64_t in = 0; in < inner; ++in)
                garow[in] += yrow[in] * (grow[in] - dot[in]);
            }
          }
        }
      });
}

Tensor layer_norm(const Tensor& a, int axis, double eps) {
  check_defined(a, "layer_norm");
  std::int64_t outer, len, inner;
  axis_dims(a.shape(), axis, outer, len, inner);
  if (len < 2)
    throw ContractError("layer_norm: normalized axis must have size >= 2, got " +
                        std::to_string(len));
  const auto& xv = a.values();
  std::vector<double> out(xv.size());
  std::vector<double> invs(outer * inner);
  for (std::int64_t o = 0; o < outer; ++o) {
    for (std::int64_t in = 0; in < inner; ++in) {
      const std::int64_t base = o * len * inner + in;
      double mean = 0.0;
      for (std::int64_t l = 0; l < len; ++l) mean += xv[base + l * inner];
      mean /= static_cast<double>(len);
      double var = 0.0;
      for (std::int64_t l = 0; l < len; ++l) {
        const double d = xv[base + l * inner] - mean;
        var += d * d;
      }
      var /= static_cast<double>(len);
      const double inv = 1.0 / std::sqrt(var + eps);
      invs[o * inner + in] = inv;
      for (std::int64_t l = 0; l < len; ++l)
        out[base + l * inner] = (xv[base + l * inner] - mean) * inv;
    }
  }
  NodePtr an = a.node();
  return make_tensor(
      a.shape(), std::move(out), {an},
      [an, outer, len, inner, invs = std::move(invs)](Node& self) {
        auto& ga = an->grad_buf();
        const auto& y = self.values;
        const auto& g = self.grad;
        const double flen = static_cast<double>(len);
        for (std::int64_t o = 0; o < outer; ++o) {
          for (std::int64_t in = 0; in < inner; ++in) {
            const std::int64_t base = o * len * inner + in;
            const double inv = invs[o * inner + in];
            double mg = 0.0, mgy = 0.0;
            for (std::int64_t l = 0; l < len; ++l) {
              const std::int64_t p = base + l * inner;
              mg += g[p];
              mgy += g[p] * y[p];
            }
            mg /= flen;
            mgy /= flen;
            for (std::int64_t l = 0; l < len; ++l) {
              const std::int64_t p = base + l * inner;
              ga[p] += inv * (g[p] - mg - y[p] * mgy);
            }
          }
        }
      });
}

// ------------------------------------------------------------------ reductions

Tensor sum(const Tensor& a) {
  check_defined(a, "sum");
  const auto& xv = a.values();
  double acc = 0.0;
  for (double x : xv) acc += x;
  NodePtr an = a.node();
  return make_tensor({}, {acc}, {an}, [an](Node& self) {
    auto& ga = an->grad_buf();
    const double g = self.grad[0];
    for (auto& v : ga) v += g;
  });
}

Tensor mean(const Tensor& a) {
  check_defined(a, "mean");
  const auto& xv = a.values();
  double acc = 0.0;
  for (double x : xv) acc += x;
  const double inv = 1.0 / static_cast<double>(xv.size());
  NodePtr an = a.node();
  return make_tensor({}, {acc * inv}, {an}, [an, inv](Node& self) {
    auto& ga = an->grad_buf();
    const double g = self.grad[0] * inv;
    for (auto& v : ga) v += g;
  });
}

namespace {

Tensor reduce_axis(const Tensor& a, int axis, bool take_mean) {
  std::int64_t outer, len, inner;
  axis_dims(a.shape(), axis, outer, len, inner);
  const auto& xv = a.values();
  Shape os;
  for (int i = 0; i < static_cast<int>(a.shape().size()); ++i)
    if (i != axis) os.push_back(a.shape()[i]);
  std::vector<double> out(outer * inner, 0.0);
  for (std::int64_t o = 0; o < outer; ++o)
    for (std::int64_t l = 0; l < len; ++l) {
      const std::int64_t base = (o * len + l) * inner;
      double* orow = &out[o * inner];
      for (std::int64_t in = 0; in < inner; ++in) orow[in] += xv[base + in];
    }
  const double scale_v = take_mean ? 1.0 / static_cast<double>(len) : 1.0;
  if (take_mean)
    for (auto& v : out) v *= scale_v;
  NodePtr an = a.node();
  return make_tensor(std::move(os), std::move(out), {an},
                     [an, outer, len, inner, scale_v](Node& self) {
                       auto& ga = an->grad_buf();
                       const auto& g = self.grad;
                       for (std::int64_t o = 0; o < outer; ++o)
                         for (std::int64_t l = 0; l < len; ++l) {
                           const std::int64_t base = (o * len + l) * inner;
                           const double* grow = &g[o * inner];
                           for (std::int64_t in = 0; in < inner; ++in)
                             ga[base + in] += grow[in] * scale_v;
                         }
                     });
}

}  // namespace

Tensor sum(const Tensor& a, int axis) { return reduce_axis(a, axis, false); }
Tensor mean(const Tensor& a, int axis) { return reduce_axis(a, axis, true); }

// ----------------------------------------------------------------- shape ops

Tensor reshape(const Tensor& a, Shape shape) {
  check_defined(a, "reshape");
  if (numel(shape) != a.size())
    throw ShapeError("reshape: " + shape_str(a.shape()) + " -> " +
                     shape_str(shape) + " changes element count");
  NodePtr an = a.node();
  std::vector<double> out = a.values();
  return make_tensor(std::move(shape), std::move(out), {an}, [an](Node& self) {
    auto& ga = an->grad;
    const auto& g = self.grad;
    if (ga.empty()) {
      ga = g;
    } else {
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    }
  });
}

Tensor broadcast_to(const Tensor& a, const Shape& shape) {
  check_defined(a, "broadcast_to");
  if (broadcast_shape(a.shape(), shape) != shape)
    throw ShapeError("broadcast_to: " + shape_str(a.shape()) + " -> " +
                     shape_str(shape));
  const auto& xv = a.values();
  std::vector<double> out(numel(shape));
  std::int64_t st[kPlanCap];
  bcast_strides_into(a.shape(), shape, st);
  for_each1(shape, st,
            [&](std::int64_t i, std::int64_t oa) { out[i] = xv[oa]; });
  NodePtr an = a.node();
  return make_tensor(shape, std::move(out), {an}, [an](Node& self) {
    reduce_into(self.grad, self.shape, an->shape, an->grad_buf());
  });
}

Tensor concat(const std::vector<Tensor>& parts, int axis) {
  if (parts.empty()) throw ContractError("concat: no parts");
  for (const auto& p : parts) check_defined(p, "concat");
  const Shape& s0 = parts[0].shape();
  const int rank = static_cast<int>(s0.size());
  if (axis < 0 || axis >= rank) throw ContractError("concat: bad axis");
  Shape os = s0;
  std::int64_t total = 0;
  for (const auto& p : parts) {
    const Shape& s = p.shape();
    if (static_cast<int>(s.size()) != rank)
      throw ShapeError("concat: rank mismatch");
    for (int i = 0; i < rank; ++i)
      if (i != axis && s[i] != s0[i])
        throw ShapeError("concat: dim mismatch " + shape_str(s) + " vs " +
                         shape_str(s0));
    total += s[axis];
  }
  os[axis] = total;
  std::int64_t outer, len_total, inner;
  axis_dims(os, axis, outer, len_total, inner);
  std::vector<double> out(numel(os));
  std::vector<std::int64_t> offs;
  std::int64_t off = 0;
  for (const auto& p : parts) {
    const std::int64_t lp = p.shape()[axis];
    const auto& pv = p.values();
    for (std::int64_t o = 0; o < outer; ++o)
      std::memcpy(&out[(o * len_total + off) * inner], &pv[o * lp * inner],
                  sizeof(double) * lp * inner);
    offs.push_back(off);
    off += lp;
  }
  std::vector<NodePtr> pn;
  std::vector<std::int64_t> lens;
  for (const auto& p : parts) {
    pn.push_back(p.node());
    lens.push_back(p.shape()[axis]);
  }
  return make_tensor(
      std::move(os), std::move(out), pn,
      [pn, offs, lens, outer, len_total, inner](Node& self) {
        const auto& g = self.grad;
        for (std::size_t pi = 0; pi < pn.size(); ++pi) {
          if (!pn[pi]->requires_grad) continue;
          auto& gp = pn[pi]->grad_buf();
          const std::int64_t lp = lens[pi], o0 = offs[pi];
          for (std::int64_t o = 0; o < outer; ++o) {
            const double* gsrc = &g[(o * len_total + o0) * inner];
            double* gdst = &gp[o * lp * inner];
            for (std::int64_t i = 0; i < lp * inner; ++i) gdst[i] += gsrc[i];
          }
        }
      });
}

Tensor slice(const Tensor& a, int axis, std::int64_t start, std::int64_t len) {
  check_defined(a, "slice");
  std::int64_t outer, full, inner;
  axis_dims(a.shape(), axis, outer, full, inner);
  if (start < 0 || len <= 0 || start + len > full)
    throw ContractError("slice: [" + std::to_string(start) + "," +
                        std::to_string(start + len) + ") out of range for " +
                        shape_str(a.shape()));
  Shape os = a.shape();
  os[axis] = len;
  const auto& xv = a.values();
  std::vector<double> out(numel(os));
  for (std::int64_t o = 0; o < outer; ++o)
    std::memcpy(&out[o * len * inner], &xv[(o * full + start) * inner],
                sizeof(double) * len * inner);
  NodePtr an = a.node();
  return make_tensor(std::move(os), std::move(out), {an},
                     [an, outer, full, inner, start, len](Node& self) {
                       auto& ga = an->grad_buf();
                       const auto& g = self.grad;
                       for (std::int64_t o = 0; o < outer; ++o) {
                         const double* gsrc = &g[o * len * inner];
                         double* gdst = &ga[(o * full + start) * inner];
                         for (std::int64_t i = 0; i < len * inner; ++i)
                           gdst[i] += gsrc[i];
                       }
                     });
}

// -------------------------------------------------------------- graph surgery

Tensor stop_grad(const Tensor& a) {
  check_defined(a, "stop_grad");
  return Tensor::constant(a.shape(), a.values());
}

Tensor straight_through(std::vector<double> hard_values, const Tensor& soft) {
  check_defined(soft, "straight_through");
  if (static_cast<std::int64_t>(hard_values.size()) != soft.size())
    throw ShapeError("straight_through: size mismatch");
  NodePtr sn = soft.node();
  return make_tensor(soft.shape(), std::move(hard_values), {sn},
                     [sn](Node& self) {
                       auto& gs = sn->grad_buf();
                       const auto& g = self.grad;
                       for (std::size_t i = 0; i < g.size(); ++i) gs[i] += g[i];
                     });
}

}  // namespace adaslot
