// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "vtr/common.hpp"

namespace vtr {

using Shape = std::vector<std::size_t>;

std::size_t shape_size(const Shape& s);
std::string shape_str(const Shape& s);

namespace ad {

// One recorded value in the define-by-run graph. Nodes are created in
// program order; `seq` is monotonically increasing, so the parent of any
// node always carries a smaller seq than the node itself. Backward walks
// the reachable ops once, in descending seq order.
struct Node {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;  // allocated on first accumulation
  bool requires_grad = false;
  bool is_leaf = true;
  bool used_as_root = false;  // backward() may run once per root
  std::uint64_t seq = 0;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(const Node&)> backprop;
};

using NodePtr = std::shared_ptr<Node>;

std::vector<double>& ensure_grad(Node& n);

// The recorded-operation sequence reachable from one root, in recording
// order. Construction checks the topological invariant; run() visits each
// op exactly once, last-recorded first.
class Tape {
 public:
  explicit Tape(const NodePtr& root);
  void run();
  std::size_t op_count() const { return nodes_.size(); }

 private:
  std::vector<Node*> nodes_;  // ascending seq
};

}  // namespace ad

/// Dense tensor of 64-bit floats in row-major order, attached to the
/// reverse-mode graph. Copies are handles to the same node.
class Tensor {
 public:
  Tensor() = default;

  static Tensor leaf(Shape shape, std::vector<double> values,
                     bool requires_grad = false);
  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double v, bool requires_grad = false);
  static Tensor scalar(double v, bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const;
  std::size_t rank() const { return shape().size(); }
  std::size_t size() const;
  const std::vector<double>& values() const;
  double at(std::size_t flat) const;
  double value() const;  // size-1 tensors only

  bool requires_grad() const;
  bool has_grad() const;
  const std::vector<double>& grad() const;
  void zero_grad();

  // Leaf-only in-place mutation, for optimizer updates and
  // finite-difference probes. Never mutate between a forward pass and
  // the matching backward().
  std::vector<double>& mutable_values();

  ad::NodePtr node() const { return node_; }
  explicit Tensor(ad::NodePtr n) : node_(std::move(n)) {}

 private:
  ad::NodePtr node_;
};

namespace detail {
// Op factory: drops parents and the backward rule when no parent needs
// gradient, so constant subgraphs cost nothing at backward time.
Tensor make_op(Shape shape, std::vector<double> value,
               std::span<const Tensor> parents,
               std::function<void(const ad::Node&)> backprop);
}  // namespace detail

// ---- linear algebra ----
Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& x);

// ---- elementwise; add/sub/mul broadcast a size-1 tensor against
// anything and a [d] vector against the last axis of [.. x d] ----
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& x, double c);
Tensor exp(const Tensor& x);
Tensor log(const Tensor& x);
Tensor relu(const Tensor& x);
Tensor gelu(const Tensor& x);
Tensor clamp_max(const Tensor& x, double cap);

// ---- normalization ----
Tensor softmax(const Tensor& x, std::size_t axis);
Tensor log_softmax(const Tensor& x, std::size_t axis);
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias,
                  double eps = 1e-5);
Tensor l2_normalize(const Tensor& x, std::size_t axis);

// ---- reductions ----
Tensor sum(const Tensor& x, std::size_t axis);
Tensor mean(const Tensor& x, std::size_t axis);
Tensor sum_all(const Tensor& x);
Tensor mean_all(const Tensor& x);

// ---- structure ----
Tensor concat(std::span<const Tensor> parts, std::size_t axis);
Tensor concat(const Tensor& a, const Tensor& b, std::size_t axis);
Tensor slice_rows(const Tensor& x, std::size_t start, std::size_t count);
Tensor reshape(const Tensor& x, Shape shape);
Tensor gather_flat(const Tensor& x, std::vector<std::size_t> indices,
                   Shape out_shape);
Tensor gather_rows(const Tensor& table, std::span<const int> ids);

// Adds a large negative constant to every column whose validity flag is
// zero; exp() of such a logit underflows to exactly 0 after
// max-subtraction, so masked keys cannot influence the softmax.
Tensor add_key_mask(const Tensor& scores, std::span<const std::uint8_t> valid);

/// Populates grad on every requires_grad ancestor of `loss`. A second
/// call on the same root is an error.
void backward(const Tensor& loss);

/// Central-difference check of the tape gradient of `forward()` with
/// respect to `x`. Returns max over coordinates of
/// |g_ad - g_fd| / max(1e-12, |g_ad| + |g_fd|).
double grad_check(const std::function<Tensor()>& forward, Tensor& x,
                  double eps = 1e-5);

}  // namespace vtr
