// SPDX-License-Identifier: Apache-2.0
#include "vtr/tensor.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <initializer_list>
#include <unordered_set>
#include <utility>

namespace vtr {

namespace {

std::atomic<std::uint64_t> g_seq{0};

std::uint64_t next_seq() { return g_seq.fetch_add(1, std::memory_order_relaxed); }

constexpr double kMaskedLogit = -1e30;

void check_axis(const Tensor& x, std::size_t axis, const char* op) {
  if (axis >= x.rank()) {
    throw ShapeError(str(op, ": axis ", axis, " out of range for shape ",
                         shape_str(x.shape())));
  }
}

// rows/cols view of the last axis: everything before it is "rows"
std::pair<std::size_t, std::size_t> last_axis_view(const Shape& s) {
  const std::size_t d = s.back();
  return {shape_size(s) / d, d};
}

}  // namespace

std::size_t shape_size(const Shape& s) {
  std::size_t n = 1;
  for (std::size_t d : s) n *= d;
  return n;
}

std::string shape_str(const Shape& s) {
  std::string out = "[";
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) out += "x";
    out += std::to_string(s[i]);
  }
  return out + "]";
}

namespace ad {

std::vector<double>& ensure_grad(Node& n) {
  if (n.grad.empty()) n.grad.assign(n.value.size(), 0.0);
  return n.grad;
}

Tape::Tape(const NodePtr& root) {
  std::unordered_set<const Node*> seen;
  std::vector<Node*> stack{root.get()};
  seen.insert(root.get());
  while (!stack.empty()) {
    Node* n = stack.back();
    stack.pop_back();
    nodes_.push_back(n);
    for (const NodePtr& p : n->parents) {
      if (!p->requires_grad) continue;
      if (p->seq >= n->seq) {
        throw Error("tape: recording order violated");
      }
      if (seen.insert(p.get()).second) stack.push_back(p.get());
    }
  }
  std::sort(nodes_.begin(), nodes_.end(),
            [](const Node* a, const Node* b) { return a->seq < b->seq; });
}

void Tape::run() {
  for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
    Node* n = *it;
    if (n->backprop && !n->grad.empty()) n->backprop(*n);
  }
}

}  // namespace ad

// ---- Tensor handle ----

Tensor Tensor::leaf(Shape shape, std::vector<double> values,
                    bool requires_grad) {
  if (shape_size(shape) != values.size()) {
    throw ShapeError(str("leaf: shape ", shape_str(shape), " wants ",
                         shape_size(shape), " values, got ", values.size()));
  }
  auto n = std::make_shared<ad::Node>();
  n->shape = std::move(shape);
  n->value = std::move(values);
  n->requires_grad = requires_grad;
  n->is_leaf = true;
  n->seq = next_seq();
  return Tensor(std::move(n));
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  std::vector<double> v(shape_size(shape), 0.0);
  return leaf(std::move(shape), std::move(v), requires_grad);
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  std::vector<double> v(shape_size(shape), value);
  return leaf(std::move(shape), std::move(v), requires_grad);
}

Tensor Tensor::scalar(double v, bool requires_grad) {
  return leaf({1}, {v}, requires_grad);
}

const Shape& Tensor::shape() const {
  if (!node_) throw Error("tensor: undefined handle");
  return node_->shape;
}

std::size_t Tensor::size() const { return values().size(); }

const std::vector<double>& Tensor::values() const {
  if (!node_) throw Error("tensor: undefined handle");
  return node_->value;
}

double Tensor::at(std::size_t flat) const { return values().at(flat); }

double Tensor::value() const {
  if (size() != 1) {
    throw ShapeError(str("value(): tensor ", shape_str(shape()),
                         " is not a scalar"));
  }
  return node_->value[0];
}

bool Tensor::requires_grad() const {
  return node_ && node_->requires_grad;
}

bool Tensor::has_grad() const { return node_ && !node_->grad.empty(); }

const std::vector<double>& Tensor::grad() const {
  if (!has_grad()) {
    throw Error("grad(): no gradient recorded for this tensor");
  }
  return node_->grad;
}

void Tensor::zero_grad() {
  if (node_) node_->grad.clear();
}

std::vector<double>& Tensor::mutable_values() {
  if (!node_) throw Error("tensor: undefined handle");
  if (!node_->is_leaf) {
    throw Error("mutable_values(): only leaf tensors may be mutated");
  }
  return node_->value;
}

namespace detail {

Tensor make_op(Shape shape, std::vector<double> value,
               std::span<const Tensor> parents,
               std::function<void(const ad::Node&)> backprop) {
  if (shape_size(shape) != value.size()) {
    throw ShapeError(str("op: shape ", shape_str(shape), " wants ",
                         shape_size(shape), " values, got ", value.size()));
  }
  auto n = std::make_shared<ad::Node>();
  n->shape = std::move(shape);
  n->value = std::move(value);
  n->is_leaf = false;
  bool needs = false;
  for (const Tensor& p : parents) {
    if (p.requires_grad()) needs = true;
  }
  n->requires_grad = needs;
  if (needs) {
    n->parents.reserve(parents.size());
    for (const Tensor& p : parents) n->parents.push_back(p.node());
    n->backprop = std::move(backprop);
  }
  n->seq = next_seq();
  return Tensor(std::move(n));
}

}  // namespace detail

namespace {

Tensor make_op(Shape shape, std::vector<double> value,
               std::initializer_list<Tensor> parents,
               std::function<void(const ad::Node&)> backprop) {
  std::vector<Tensor> ps(parents);
  return detail::make_op(std::move(shape), std::move(value),
                         std::span<const Tensor>(ps), std::move(backprop));
}

// C[m x n] += A[m x k] * B[k x n]
void gemm_acc(const double* a, const double* b, double* c, std::size_t m,
              std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    double* crow = c + i * n;
    const double* arow = a + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = arow[p];
      const double* brow = b + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

// C[m x k] += A[m x n] * B^T where B is [k x n]
void gemm_nt_acc(const double* a, const double* b, double* c, std::size_t m,
                 std::size_t n, std::size_t k) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* arow = a + i * n;
    double* crow = c + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const double* brow = b + p * n;
      double acc = 0.0;
      for (std::size_t j = 0; j < n; ++j) acc += arow[j] * brow[j];
      crow[p] += acc;
    }
  }
}

// C[k x n] += A^T * B where A is [m x k], B is [m x n]
void gemm_tn_acc(const double* a, const double* b, double* c, std::size_t m,
                 std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* arow = a + i * k;
    const double* brow = b + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = arow[p];
      double* crow = c + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

enum class Broadcast { kNone, kAScalar, kBScalar, kARow, kBRow };

Broadcast classify_broadcast(const Shape& a, const Shape& b, const char* op) {
  if (a == b) return Broadcast::kNone;
  if (shape_size(b) == 1) return Broadcast::kBScalar;
  if (shape_size(a) == 1) return Broadcast::kAScalar;
  if (b.size() == 1 && b[0] == a.back()) return Broadcast::kBRow;
  if (a.size() == 1 && a[0] == b.back()) return Broadcast::kARow;
  throw ShapeError(str(op, ": incompatible shapes ", shape_str(a), " and ",
                       shape_str(b)));
}

// accumulate g reduced over broadcast copies back into the small side
void reduce_into_row(const std::vector<double>& g, std::vector<double>& out,
                     std::size_t d) {
  const std::size_t rows = g.size() / d;
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t j = 0; j < d; ++j) out[j] += g[r * d + j];
  }
}

template <class Fwd>
Tensor binary_elementwise(const Tensor& a, const Tensor& b, const char* name,
                          Fwd f, double da, double db) {
  // f(x, y); da = d/dx coefficient sign, db = d/dy (1 or -1 for add/sub)
  const Broadcast bc = classify_broadcast(a.shape(), b.shape(), name);
  const bool big_is_a =
      bc == Broadcast::kNone || bc == Broadcast::kBScalar || bc == Broadcast::kBRow;
  const Tensor& big = big_is_a ? a : b;
  const Tensor& small = big_is_a ? b : a;
  const auto& bv = big.values();
  const auto& sv = small.values();
  std::vector<double> out(bv.size());
  if (bc == Broadcast::kNone) {
    for (std::size_t i = 0; i < bv.size(); ++i)
      out[i] = big_is_a ? f(bv[i], sv[i]) : f(sv[i], bv[i]);
  } else if (bc == Broadcast::kAScalar || bc == Broadcast::kBScalar) {
    const double s = sv[0];
    for (std::size_t i = 0; i < bv.size(); ++i)
      out[i] = big_is_a ? f(bv[i], s) : f(s, bv[i]);
  } else {
    const std::size_t d = small.values().size();
    for (std::size_t i = 0; i < bv.size(); ++i)
      out[i] = big_is_a ? f(bv[i], sv[i % d]) : f(sv[i % d], bv[i]);
  }
  auto* an = a.node().get();
  auto* bn = b.node().get();
  const double ca = da, cb = db;
  return make_op(
      big.shape(), std::move(out), {a, b},
      [an, bn, bc, big_is_a, ca, cb](const ad::Node& o) {
        auto* bigp = big_is_a ? an : bn;
        auto* smallp = big_is_a ? bn : an;
        const double cbig = big_is_a ? ca : cb;
        const double csmall = big_is_a ? cb : ca;
        if (bigp->requires_grad) {
          auto& g = ad::ensure_grad(*bigp);
          for (std::size_t i = 0; i < o.grad.size(); ++i)
            g[i] += cbig * o.grad[i];
        }
        if (smallp->requires_grad) {
          auto& g = ad::ensure_grad(*smallp);
          if (bc == Broadcast::kNone) {
            for (std::size_t i = 0; i < o.grad.size(); ++i)
              g[i] += csmall * o.grad[i];
          } else if (bc == Broadcast::kAScalar || bc == Broadcast::kBScalar) {
            double acc = 0.0;
            for (double gv : o.grad) acc += gv;
            g[0] += csmall * acc;
          } else {
            const std::size_t d = g.size();
            const std::size_t rows = o.grad.size() / d;
            for (std::size_t r = 0; r < rows; ++r)
              for (std::size_t j = 0; j < d; ++j)
                g[j] += csmall * o.grad[r * d + j];
          }
        }
      });
}

}  // namespace

// ---- linear algebra ----

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2) {
    throw ShapeError(str("matmul: expects rank-2 operands, got ",
                         shape_str(a.shape()), " and ", shape_str(b.shape())));
  }
  const std::size_t m = a.shape()[0], k = a.shape()[1];
  const std::size_t k2 = b.shape()[0], n = b.shape()[1];
  if (k != k2) {
    throw ShapeError(str("matmul: inner dimensions differ, ",
                         shape_str(a.shape()), " vs ", shape_str(b.shape())));
  }
  std::vector<double> out(m * n, 0.0);
  gemm_acc(a.values().data(), b.values().data(), out.data(), m, k, n);
  auto* an = a.node().get();
  auto* bn = b.node().get();
  return make_op({m, n}, std::move(out), {a, b},
                 [an, bn, m, k, n](const ad::Node& o) {
                   if (an->requires_grad) {
                     auto& ga = ad::ensure_grad(*an);
                     gemm_nt_acc(o.grad.data(), bn->value.data(), ga.data(), m,
                                 n, k);
                   }
                   if (bn->requires_grad) {
                     auto& gb = ad::ensure_grad(*bn);
                     gemm_tn_acc(an->value.data(), o.grad.data(), gb.data(), m,
                                 k, n);
                   }
                 });
}

Tensor transpose(const Tensor& x) {
  if (x.rank() != 2) {
    throw ShapeError(str("transpose: expects rank-2, got ",
                         shape_str(x.shape())));
  }
  const std::size_t r = x.shape()[0], c = x.shape()[1];
  const auto& v = x.values();
  std::vector<double> out(v.size());
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[j * r + i] = v[i * c + j];
  auto* xn = x.node().get();
  return make_op({c, r}, std::move(out), {x}, [xn, r, c](const ad::Node& o) {
    if (!xn->requires_grad) return;
    auto& g = ad::ensure_grad(*xn);
    for (std::size_t j = 0; j < c; ++j)
      for (std::size_t i = 0; i < r; ++i) g[i * c + j] += o.grad[j * r + i];
  });
}

// ---- elementwise ----

Tensor add(const Tensor& a, const Tensor& b) {
  return binary_elementwise(
      a, b, "add", [](double x, double y) { return x + y; }, 1.0, 1.0);
}

Tensor sub(const Tensor& a, const Tensor& b) {
  return binary_elementwise(
      a, b, "sub", [](double x, double y) { return x - y; }, 1.0, -1.0);
}

Tensor mul(const Tensor& a, const Tensor& b) {
  const Broadcast bc = classify_broadcast(a.shape(), b.shape(), "mul");
  const bool big_is_a =
      bc == Broadcast::kNone || bc == Broadcast::kBScalar || bc == Broadcast::kBRow;
  const Tensor& big = big_is_a ? a : b;
  const auto& bv = big.values();
  const Tensor& small = big_is_a ? b : a;
  const auto& sv = small.values();
  std::vector<double> out(bv.size());
  if (bc == Broadcast::kNone) {
    for (std::size_t i = 0; i < bv.size(); ++i) out[i] = bv[i] * sv[i];
  } else if (bc == Broadcast::kAScalar || bc == Broadcast::kBScalar) {
    for (std::size_t i = 0; i < bv.size(); ++i) out[i] = bv[i] * sv[0];
  } else {
    const std::size_t d = sv.size();
    for (std::size_t i = 0; i < bv.size(); ++i) out[i] = bv[i] * sv[i % d];
  }
  auto* bigp = big.node().get();
  auto* smallp = small.node().get();
  return make_op(big.shape(), std::move(out), {a, b},
                 [bigp, smallp, bc](const ad::Node& o) {
                   const auto& bval = bigp->value;
                   const auto& sval = smallp->value;
                   if (bigp->requires_grad) {
                     auto& g = ad::ensure_grad(*bigp);
                     if (bc == Broadcast::kNone) {
                       for (std::size_t i = 0; i < g.size(); ++i)
                         g[i] += o.grad[i] * sval[i];
                     } else if (bc == Broadcast::kAScalar ||
                                bc == Broadcast::kBScalar) {
                       for (std::size_t i = 0; i < g.size(); ++i)
                         g[i] += o.grad[i] * sval[0];
                     } else {
                       const std::size_t d = sval.size();
                       for (std::size_t i = 0; i < g.size(); ++i)
                         g[i] += o.grad[i] * sval[i % d];
                     }
                   }
                   if (smallp->requires_grad) {
                     auto& g = ad::ensure_grad(*smallp);
                     if (bc == Broadcast::kNone) {
                       for (std::size_t i = 0; i < g.size(); ++i)
                         g[i] += o.grad[i] * bval[i];
                     } else if (bc == Broadcast::kAScalar ||
                                bc == Broadcast::kBScalar) {
                       double acc = 0.0;
                       for (std::size_t i = 0; i < o.grad.size(); ++i)
                         acc += o.grad[i] * bval[i];
                       g[0] += acc;
                     } else {
                       const std::size_t d = g.size();
                       for (std::size_t i = 0; i < o.grad.size(); ++i)
                         g[i % d] += o.grad[i] * bval[i];
                     }
                   }
                 });
}

Tensor scale(const Tensor& x, double c) {
  const auto& v = x.values();
  std::vector<double> out(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) out[i] = v[i] * c;
  auto* xn = x.node().get();
  return make_op(x.shape(), std::move(out), {x}, [xn, c](const ad::Node& o) {
    if (!xn->requires_grad) return;
    auto& g = ad::ensure_grad(*xn);
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += c * o.grad[i];
  });
}

Tensor exp(const Tensor& x) {
  const auto& v = x.values();
  std::vector<double> out(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) out[i] = std::exp(v[i]);
  auto* xn = x.node().get();
  return make_op(x.shape(), std::move(out), {x}, [xn](const ad::Node& o) {
    if (!xn->requires_grad) return;
    auto& g = ad::ensure_grad(*xn);
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i] * o.value[i];
  });
}

Tensor log(const Tensor& x) {
  const auto& v = x.values();
  std::vector<double> out(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (!(v[i] > 0.0)) {
      throw DomainError(str("log: non-positive input ", v[i], " at index ", i));
    }
    out[i] = std::log(v[i]);
  }
  auto* xn = x.node().get();
  return make_op(x.shape(), std::move(out), {x}, [xn](const ad::Node& o) {
    if (!xn->requires_grad) return;
    auto& g = ad::ensure_grad(*xn);
    for (std::size_t i = 0; i < g.size(); ++i)
      g[i] += o.grad[i] / xn->value[i];
  });
}

Tensor relu(const Tensor& x) {
  const auto& v = x.values();
  std::vector<double> out(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) out[i] = v[i] > 0.0 ? v[i] : 0.0;
  auto* xn = x.node().get();
  return make_op(x.shape(), std::move(out), {x}, [xn](const ad::Node& o) {
    if (!xn->requires_grad) return;
    auto& g = ad::ensure_grad(*xn);
    for (std::size_t i = 0; i < g.size(); ++i)
      if (xn->value[i] > 0.0) g[i] += o.grad[i];
  });
}

Tensor gelu(const Tensor& x) {
  // tanh approximation, with its exact analytic derivative below
  constexpr double kSqrt2OverPi = 0.7978845608028654;
  constexpr double kCubic = 0.044715;
  const auto& v = x.values();
  std::vector<double> out(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) {
    const double t =
        std::tanh(kSqrt2OverPi * (v[i] + kCubic * v[i] * v[i] * v[i]));
    out[i] = 0.5 * v[i] * (1.0 + t);
  }
  auto* xn = x.node().get();
  return make_op(x.shape(), std::move(out), {x}, [xn](const ad::Node& o) {
    if (!xn->requires_grad) return;
    auto& g = ad::ensure_grad(*xn);
    for (std::size_t i = 0; i < g.size(); ++i) {
      const double xi = xn->value[i];
      const double u = kSqrt2OverPi * (xi + kCubic * xi * xi * xi);
      const double t = std::tanh(u);
      const double du = kSqrt2OverPi * (1.0 + 3.0 * kCubic * xi * xi);
      g[i] += o.grad[i] * (0.5 * (1.0 + t) + 0.5 * xi * (1.0 - t * t) * du);
    }
  });
}

Tensor clamp_max(const Tensor& x, double cap) {
  const auto& v = x.values();
  std::vector<double> out(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) out[i] = std::min(v[i], cap);
  auto* xn = x.node().get();
  return make_op(x.shape(), std::move(out), {x}, [xn, cap](const ad::Node& o) {
    if (!xn->requires_grad) return;
    auto& g = ad::ensure_grad(*xn);
    for (std::size_t i = 0; i < g.size(); ++i)
      if (xn->value[i] <= cap) g[i] += o.grad[i];
  });
}

// ---- normalization ----

namespace {

// visits each 1-d slice along `axis` of a rank-1/2 tensor
template <class Fn>
void for_each_slice(const Shape& shape, std::size_t axis, Fn fn) {
  if (shape.size() == 1) {
    fn(0, 1, shape[0]);  // offset, stride, count
    return;
  }
  const std::size_t rows = shape[0], cols = shape[1];
  if (axis == 1) {
    for (std::size_t r = 0; r < rows; ++r) fn(r * cols, 1, cols);
  } else {
    for (std::size_t c = 0; c < cols; ++c) fn(c, cols, rows);
  }
}

void check_rank12(const Tensor& x, const char* op) {
  if (x.rank() < 1 || x.rank() > 2) {
    throw ShapeError(str(op, ": expects rank 1 or 2, got ",
                         shape_str(x.shape())));
  }
}

}  // namespace

Tensor softmax(const Tensor& x, std::size_t axis) {
  check_rank12(x, "softmax");
  check_axis(x, axis, "softmax");
  const auto& v = x.values();
  std::vector<double> out(v.size());
  for_each_slice(x.shape(), axis,
                 [&](std::size_t off, std::size_t stride, std::size_t n) {
                   double m = v[off];
                   for (std::size_t i = 1; i < n; ++i)
                     m = std::max(m, v[off + i * stride]);
                   double s = 0.0;
                   for (std::size_t i = 0; i < n; ++i) {
                     const double e = std::exp(v[off + i * stride] - m);
                     out[off + i * stride] = e;
                     s += e;
                   }
                   for (std::size_t i = 0; i < n; ++i)
                     out[off + i * stride] /= s;
                 });
  auto* xn = x.node().get();
  const Shape shape = x.shape();
  return make_op(shape, std::move(out), {x},
                 [xn, shape, axis](const ad::Node& o) {
                   if (!xn->requires_grad) return;
                   auto& g = ad::ensure_grad(*xn);
                   for_each_slice(shape, axis,
                                  [&](std::size_t off, std::size_t stride,
                                      std::size_t n) {
                                    double dot = 0.0;
                                    for (std::size_t i = 0; i < n; ++i) {
                                      const std::size_t k = off + i * stride;
                                      dot += o.grad[k] * o.value[k];
                                    }
                                    for (std::size_t i = 0; i < n; ++i) {
                                      const std::size_t k = off + i * stride;
                                      g[k] += o.value[k] * (o.grad[k] - dot);
                                    }
                                  });
                 });
}

Tensor log_softmax(const Tensor& x, std::size_t axis) {
  check_rank12(x, "log_softmax");
  check_axis(x, axis, "log_softmax");
  const auto& v = x.values();
  std::vector<double> out(v.size());
  for_each_slice(x.shape(), axis,
                 [&](std::size_t off, std::size_t stride, std::size_t n) {
                   double m = v[off];
                   for (std::size_t i = 1; i < n; ++i)
                     m = std::max(m, v[off + i * stride]);
                   double s = 0.0;
                   for (std::size_t i = 0; i < n; ++i)
                     s += std::exp(v[off + i * stride] - m);
                   const double lse = m + std::log(s);
                   for (std::size_t i = 0; i < n; ++i)
                     out[off + i * stride] = v[off + i * stride] - lse;
                 });
  auto* xn = x.node().get();
  const Shape shape = x.shape();
  return make_op(
      shape, std::move(out), {x}, [xn, shape, axis](const ad::Node& o) {
        if (!xn->requires_grad) return;
        auto& g = ad::ensure_grad(*xn);
        for_each_slice(
            shape, axis,
            [&](std::size_t off, std::size_t stride, std::size_t n) {
              double gsum = 0.0;
              for (std::size_t i = 0; i < n; ++i)
                gsum += o.grad[off + i * stride];
              for (std::size_t i = 0; i < n; ++i) {
                const std::size_t k = off + i * stride;
                g[k] += o.grad[k] - std::exp(o.value[k]) * gsum;
              }
            });
      });
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias,
                  double eps) {
  check_rank12(x, "layer_norm");
  const std::size_t d = x.shape().back();
  if (gain.shape() != Shape{d} || bias.shape() != Shape{d}) {
    throw ShapeError(str("layer_norm: gain/bias must be [", d, "], got ",
                         shape_str(gain.shape()), " and ",
                         shape_str(bias.shape())));
  }
  const auto [rows, cols] = last_axis_view(x.shape());
  const auto& v = x.values();
  const auto& gv = gain.values();
  const auto& bv = bias.values();
  std::vector<double> out(v.size());
  std::vector<double> xhat(v.size());
  std::vector<double> inv_std(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* row = v.data() + r * cols;
    double mu = 0.0;
    for (std::size_t j = 0; j < cols; ++j) mu += row[j];
    mu /= static_cast<double>(cols);
    double var = 0.0;
    for (std::size_t j = 0; j < cols; ++j) {
      const double c = row[j] - mu;
      var += c * c;
    }
    var /= static_cast<double>(cols);
    const double inv = 1.0 / std::sqrt(var + eps);
    inv_std[r] = inv;
    for (std::size_t j = 0; j < cols; ++j) {
      const double h = (row[j] - mu) * inv;
      xhat[r * cols + j] = h;
      out[r * cols + j] = gv[j] * h + bv[j];
    }
  }
  auto* xn = x.node().get();
  auto* gn = gain.node().get();
  auto* bn = bias.node().get();
  return make_op(
      x.shape(), std::move(out), {x, gain, bias},
      [xn, gn, bn, rows, cols, xhat = std::move(xhat),
       inv_std = std::move(inv_std)](const ad::Node& o) {
        if (bn->requires_grad) {
          auto& g = ad::ensure_grad(*bn);
          reduce_into_row(o.grad, g, cols);
        }
        if (gn->requires_grad) {
          auto& g = ad::ensure_grad(*gn);
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t j = 0; j < cols; ++j)
              g[j] += o.grad[r * cols + j] * xhat[r * cols + j];
        }
        if (xn->requires_grad) {
          auto& g = ad::ensure_grad(*xn);
          const auto& gainv = gn->value;
          for (std::size_t r = 0; r < rows; ++r) {
            double mean_dh = 0.0, mean_dh_xhat = 0.0;
            for (std::size_t j = 0; j < cols; ++j) {
              const double dh = o.grad[r * cols + j] * gainv[j];
              mean_dh += dh;
              mean_dh_xhat += dh * xhat[r * cols + j];
            }
            mean_dh /= static_cast<double>(cols);
            mean_dh_xhat /= static_cast<double>(cols);
            for (std::size_t j = 0; j < cols; ++j) {
              const double dh = o.grad[r * cols + j] * gainv[j];
              g[r * cols + j] += inv_std[r] * (dh - mean_dh -
                                               xhat[r * cols + j] *
                                                   mean_dh_xhat);
            }
          }
        }
      });
}

Tensor l2_normalize(const Tensor& x, std::size_t axis) {
  check_rank12(x, "l2_normalize");
  check_axis(x, axis, "l2_normalize");
  const auto& v = x.values();
  std::vector<double> out(v.size());
  std::vector<double> norms;
  std::vector<std::size_t> offs, strides, counts;
  for_each_slice(x.shape(), axis,
                 [&](std::size_t off, std::size_t stride, std::size_t n) {
                   double s = 0.0;
                   for (std::size_t i = 0; i < n; ++i) {
                     const double val = v[off + i * stride];
                     s += val * val;
                   }
                   const double norm = std::sqrt(s);
                   if (!(norm > 1e-150) || !std::isfinite(norm)) {
                     throw DomainError(
                         str("l2_normalize: degenerate slice with norm ", norm));
                   }
                   for (std::size_t i = 0; i < n; ++i)
                     out[off + i * stride] = v[off + i * stride] / norm;
                   norms.push_back(norm);
                   offs.push_back(off);
                   strides.push_back(stride);
                   counts.push_back(n);
                 });
  auto* xn = x.node().get();
  return make_op(
      x.shape(), std::move(out), {x},
      [xn, norms = std::move(norms), offs = std::move(offs),
       strides = std::move(strides), counts = std::move(counts)](
          const ad::Node& o) {
        if (!xn->requires_grad) return;
        auto& g = ad::ensure_grad(*xn);
        for (std::size_t s = 0; s < norms.size(); ++s) {
          const std::size_t off = offs[s], st = strides[s], n = counts[s];
          double dot = 0.0;
          for (std::size_t i = 0; i < n; ++i) {
            const std::size_t k = off + i * st;
            dot += o.grad[k] * o.value[k];
          }
          for (std::size_t i = 0; i < n; ++i) {
            const std::size_t k = off + i * st;
            g[k] += (o.grad[k] - o.value[k] * dot) / norms[s];
          }
        }
      });
}

// ---- reductions ----

Tensor sum(const Tensor& x, std::size_t axis) {
  if (x.rank() != 2) {
    throw ShapeError(str("sum: expects rank-2, got ", shape_str(x.shape())));
  }
  check_axis(x, axis, "sum");
  const std::size_t rows = x.shape()[0], cols = x.shape()[1];
  const auto& v = x.values();
  const std::size_t out_n = axis == 0 ? cols : rows;
  std::vector<double> out(out_n, 0.0);
  if (axis == 0) {
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t j = 0; j < cols; ++j) out[j] += v[r * cols + j];
  } else {
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t j = 0; j < cols; ++j) out[r] += v[r * cols + j];
  }
  auto* xn = x.node().get();
  return make_op({out_n}, std::move(out), {x},
                 [xn, rows, cols, axis](const ad::Node& o) {
                   if (!xn->requires_grad) return;
                   auto& g = ad::ensure_grad(*xn);
                   for (std::size_t r = 0; r < rows; ++r)
                     for (std::size_t j = 0; j < cols; ++j)
                       g[r * cols + j] += o.grad[axis == 0 ? j : r];
                 });
}

Tensor mean(const Tensor& x, std::size_t axis) {
  if (x.rank() != 2) {
    throw ShapeError(str("mean: expects rank-2, got ", shape_str(x.shape())));
  }
  check_axis(x, axis, "mean");
  const double n = static_cast<double>(x.shape()[axis]);
  return scale(sum(x, axis), 1.0 / n);
}

Tensor sum_all(const Tensor& x) {
  const auto& v = x.values();
  double acc = 0.0;
  for (double val : v) acc += val;
  auto* xn = x.node().get();
  return make_op({1}, {acc}, {x}, [xn](const ad::Node& o) {
    if (!xn->requires_grad) return;
    auto& g = ad::ensure_grad(*xn);
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[0];
  });
}

Tensor mean_all(const Tensor& x) {
  return scale(sum_all(x), 1.0 / static_cast<double>(x.size()));
}

// ---- structure ----

Tensor concat(std::span<const Tensor> parts, std::size_t axis) {
  if (parts.empty()) throw ShapeError("concat: no inputs");
  const std::size_t rank = parts[0].rank();
  if (axis >= rank) {
    throw ShapeError(str("concat: axis ", axis, " out of range for rank ",
                         rank));
  }
  Shape out_shape = parts[0].shape();
  for (std::size_t p = 1; p < parts.size(); ++p) {
    const Shape& s = parts[p].shape();
    if (s.size() != rank) {
      throw ShapeError(str("concat: rank mismatch ", shape_str(s), " vs ",
                           shape_str(out_shape)));
    }
    for (std::size_t d = 0; d < rank; ++d) {
      if (d == axis) continue;
      if (s[d] != out_shape[d]) {
        throw ShapeError(str("concat: shapes ", shape_str(out_shape), " and ",
                             shape_str(s), " differ off axis ", axis));
      }
    }
    out_shape[axis] += s[axis];
  }
  // outer = product of dims before axis, inner = product after
  std::size_t outer = 1, inner = 1;
  for (std::size_t d = 0; d < axis; ++d) outer *= out_shape[d];
  for (std::size_t d = axis + 1; d < rank; ++d) inner *= out_shape[d];
  std::vector<double> out(shape_size(out_shape));
  std::vector<std::size_t> spans(parts.size());
  for (std::size_t p = 0; p < parts.size(); ++p)
    spans[p] = parts[p].shape()[axis] * inner;
  const std::size_t out_row = out_shape[axis] * inner;
  for (std::size_t o = 0; o < outer; ++o) {
    std::size_t dst = o * out_row;
    for (std::size_t p = 0; p < parts.size(); ++p) {
      const auto& v = parts[p].values();
      std::copy(v.begin() + o * spans[p], v.begin() + (o + 1) * spans[p],
                out.begin() + dst);
      dst += spans[p];
    }
  }
  std::vector<ad::Node*> raw;
  raw.reserve(parts.size());
  for (const Tensor& t : parts) raw.push_back(t.node().get());
  return detail::make_op(
      out_shape, std::move(out), parts,
      [raw, spans, outer, out_row](const ad::Node& o) {
        for (std::size_t ofs = 0, p = 0; p < raw.size(); ofs += spans[p], ++p) {
          if (!raw[p]->requires_grad) continue;
          auto& g = ad::ensure_grad(*raw[p]);
          for (std::size_t ot = 0; ot < outer; ++ot) {
            const std::size_t src = ot * out_row + ofs;
            for (std::size_t i = 0; i < spans[p]; ++i)
              g[ot * spans[p] + i] += o.grad[src + i];
          }
        }
      });
}

Tensor concat(const Tensor& a, const Tensor& b, std::size_t axis) {
  const Tensor parts[] = {a, b};
  return concat(std::span<const Tensor>(parts), axis);
}

Tensor slice_rows(const Tensor& x, std::size_t start, std::size_t count) {
  if (x.rank() < 1) throw ShapeError("slice_rows: rank-0 input");
  const std::size_t rows = x.shape()[0];
  if (count == 0 || start + count > rows) {
    throw ShapeError(str("slice_rows: range [", start, ", ", start + count,
                         ") out of ", rows, " rows"));
  }
  const std::size_t stride = x.size() / rows;
  Shape out_shape = x.shape();
  out_shape[0] = count;
  const auto& v = x.values();
  std::vector<double> out(v.begin() + start * stride,
                          v.begin() + (start + count) * stride);
  auto* xn = x.node().get();
  return make_op(out_shape, std::move(out), {x},
                 [xn, start, stride](const ad::Node& o) {
                   if (!xn->requires_grad) return;
                   auto& g = ad::ensure_grad(*xn);
                   for (std::size_t i = 0; i < o.grad.size(); ++i)
                     g[start * stride + i] += o.grad[i];
                 });
}

Tensor reshape(const Tensor& x, Shape shape) {
  if (shape_size(shape) != x.size()) {
    throw ShapeError(str("reshape: ", shape_str(x.shape()), " to ",
                         shape_str(shape), " changes element count"));
  }
  auto* xn = x.node().get();
  std::vector<double> out = x.values();
  return make_op(std::move(shape), std::move(out), {x},
                 [xn](const ad::Node& o) {
                   if (!xn->requires_grad) return;
                   auto& g = ad::ensure_grad(*xn);
                   for (std::size_t i = 0; i < g.size(); ++i)
                     g[i] += o.grad[i];
                 });
}

Tensor gather_flat(const Tensor& x, std::vector<std::size_t> indices,
                   Shape out_shape) {
  if (shape_size(out_shape) != indices.size()) {
    throw ShapeError(str("gather_flat: ", indices.size(),
                         " indices vs output ", shape_str(out_shape)));
  }
  const auto& v = x.values();
  std::vector<double> out(indices.size());
  for (std::size_t i = 0; i < indices.size(); ++i) {
    if (indices[i] >= v.size()) {
      throw DomainError(str("gather_flat: index ", indices[i],
                            " out of range ", v.size()));
    }
    out[i] = v[indices[i]];
  }
  auto* xn = x.node().get();
  return make_op(std::move(out_shape), std::move(out), {x},
                 [xn, indices = std::move(indices)](const ad::Node& o) {
                   if (!xn->requires_grad) return;
                   auto& g = ad::ensure_grad(*xn);
                   for (std::size_t i = 0; i < indices.size(); ++i)
                     g[indices[i]] += o.grad[i];
                 });
}

Tensor gather_rows(const Tensor& table, std::span<const int> ids) {
  if (table.rank() != 2) {
    throw ShapeError(str("gather_rows: table must be rank-2, got ",
                         shape_str(table.shape())));
  }
  const std::size_t v = table.shape()[0], d = table.shape()[1];
  std::vector<std::size_t> idx;
  idx.reserve(ids.size() * d);
  for (int id : ids) {
    if (id < 0 || static_cast<std::size_t>(id) >= v) {
      throw DomainError(str("gather_rows: id ", id, " out of range [0, ", v,
                            ")"));
    }
    for (std::size_t j = 0; j < d; ++j)
      idx.push_back(static_cast<std::size_t>(id) * d + j);
  }
  return gather_flat(table, std::move(idx), {ids.size(), d});
}

Tensor add_key_mask(const Tensor& scores,
                    std::span<const std::uint8_t> valid) {
  if (scores.rank() != 2 || scores.shape()[1] != valid.size()) {
    throw ShapeError(str("add_key_mask: scores ", shape_str(scores.shape()),
                         " vs mask length ", valid.size()));
  }
  const std::size_t rows = scores.shape()[0], cols = scores.shape()[1];
  const auto& v = scores.values();
  std::vector<double> out(v.size());
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t j = 0; j < cols; ++j)
      out[r * cols + j] = valid[j] ? v[r * cols + j] : kMaskedLogit;
  auto* xn = scores.node().get();
  std::vector<std::uint8_t> keep(valid.begin(), valid.end());
  return make_op(scores.shape(), std::move(out), {scores},
                 [xn, rows, cols, keep = std::move(keep)](const ad::Node& o) {
                   if (!xn->requires_grad) return;
                   auto& g = ad::ensure_grad(*xn);
                   for (std::size_t r = 0; r < rows; ++r)
                     for (std::size_t j = 0; j < cols; ++j)
                       if (keep[j]) g[r * cols + j] += o.grad[r * cols + j];
                 });
}

// ---- backward & verification ----

void backward(const Tensor& loss) {
  if (!loss.defined()) throw Error("backward: undefined tensor");
  if (loss.size() != 1) {
    throw ShapeError(str("backward: loss must be scalar, got ",
                         shape_str(loss.shape())));
  }
  ad::Node* root = loss.node().get();
  if (root->used_as_root) {
    throw Error("backward: already ran from this root; rebuild the graph");
  }
  root->used_as_root = true;
  if (!root->requires_grad) return;
  ad::ensure_grad(*root)[0] += 1.0;
  ad::Tape tape(loss.node());
  tape.run();
}

double grad_check(const std::function<Tensor()>& forward, Tensor& x,
                  double eps) {
  if (!(eps > 0.0)) throw DomainError("grad_check: eps must be positive");
  if (!x.requires_grad()) {
    throw Error("grad_check: probe tensor does not require grad");
  }
  x.zero_grad();
  {
    Tensor y = forward();
    if (y.size() != 1) {
      throw ShapeError("grad_check: forward() must return a scalar");
    }
    backward(y);
  }
  std::vector<double> g_ad(x.size(), 0.0);
  if (x.has_grad()) g_ad = x.grad();
  x.zero_grad();
  auto& vals = x.mutable_values();
  double worst = 0.0;
  for (std::size_t i = 0; i < vals.size(); ++i) {
    const double orig = vals[i];
    vals[i] = orig + eps;
    const double fp = forward().value();
    vals[i] = orig - eps;
    const double fm = forward().value();
    vals[i] = orig;
    const double g_fd = (fp - fm) / (2.0 * eps);
    const double denom = std::max(1e-12, std::abs(g_ad[i]) + std::abs(g_fd));
    worst = std::max(worst, std::abs(g_ad[i] - g_fd) / denom);
  }
  return worst;
}

}  // namespace vtr
