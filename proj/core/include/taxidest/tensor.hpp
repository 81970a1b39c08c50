#pragma once

#include <functional>
#include <memory>
#include <span>
#include <vector>

#include "taxidest/rng.hpp"

namespace taxidest::nn {

namespace detail {
struct Node;
}

/// Reverse-mode autodiff tensor. A Tensor is a cheap handle onto a graph
/// node; copies alias the same node (clone() makes a detached deep copy).
/// Supported shapes are rank 0 (scalars, shape {}), rank 1 (vectors),
/// and rank 2 (matrices, row-major).
///
/// Every operation validates its output: a NaN or infinity anywhere makes
/// the op throw std::runtime_error immediately, so numerical blow-ups
/// surface at the op that produced them rather than as a corrupted loss.
class Tensor {
 public:
  Tensor() = default;

  static Tensor scalar(double v, bool requires_grad = false);
  static Tensor zeros(std::vector<int> shape, bool requires_grad = false);
  static Tensor from_values(std::vector<int> shape, std::vector<double> values,
                            bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  const std::vector<int>& shape() const;
  int size() const;
  bool requires_grad() const;

  const std::vector<double>& values() const;
  /// Direct write access to a leaf's storage (optimizer updates, loading
  /// checkpoints). Throws std::logic_error on non-leaf nodes; mutating an
  /// interior node would silently desynchronize the graph.
  std::vector<double>& leaf_values();

  /// Scalar read; throws unless size() == 1.
  double item() const;

  const std::vector<double>& grad() const;
  /// Write access to the gradient buffer (used by gradient clipping).
  std::vector<double>& mutable_grad();
  void zero_grad();

  /// Detached deep copy (a fresh leaf with the same values).
  Tensor clone(bool requires_grad = false) const;

  /// Reverse pass from this node, which must be a scalar. Accumulates into
  /// the .grad() of every reachable node with requires_grad set.
  void backward();

  detail::Node* node() const { return node_.get(); }
  std::shared_ptr<detail::Node> shared_node() const { return node_; }
  explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}

 private:
  std::shared_ptr<detail::Node> node_;
};

namespace detail {
struct Node {
  std::vector<int> shape;
  std::vector<double> val;
  std::vector<double> grad;  // allocated iff requires_grad
  bool requires_grad = false;
  bool is_leaf = true;
  std::vector<std::shared_ptr<Node>> parents;
  /// Accumulates d(output)/d(parent) * self.grad into each parent's grad.
  std::function<void(Node&)> backprop;
};
}  // namespace detail

// --- elementwise / arithmetic ----------------------------------------------

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);  // elementwise
Tensor scale(const Tensor& a, double s);
Tensor neg(const Tensor& a);

// --- linear algebra --------------------------------------------------------

/// (m x n) matrix times n-vector -> m-vector.
Tensor matvec(const Tensor& w, const Tensor& x);
/// m-vector times (m x n) matrix -> n-vector.
Tensor vecmat(const Tensor& x, const Tensor& w);
Tensor dot(const Tensor& a, const Tensor& b);

// --- shape ------------------------------------------------------------------

Tensor concat(std::span<const Tensor> parts);             // 1-D concatenation
Tensor row(const Tensor& w, int r);                       // matrix row as vector
Tensor element(const Tensor& x, int i);                   // component as scalar
Tensor scale_by(const Tensor& x, const Tensor& s);        // vector times scalar tensor

// --- activations ------------------------------------------------------------

Tensor sigmoid(const Tensor& x);
Tensor tanh(const Tensor& x);
Tensor relu(const Tensor& x);
Tensor softmax(const Tensor& x);

/// Inverted dropout: in training mode each component is zeroed with
/// probability p and survivors are scaled by 1/(1-p); in eval mode the
/// input passes through untouched, so no inference-time rescaling exists.
Tensor dropout(const Tensor& x, double p, Rng& rng, bool training);

// --- reductions / losses ----------------------------------------------------

Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);
/// Mean squared error against a constant target (no gradient flows into
/// the target even if it requires grad).
Tensor mse_loss(const Tensor& pred, std::span<const double> target);
/// Softmax cross-entropy fused with its stable log-sum-exp form;
/// gradient is softmax(logits) - onehot(target_class).
Tensor cross_entropy_with_logits(const Tensor& logits, int target_class);

// --- gradient checking ------------------------------------------------------

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::size_t n_checked = 0;
};

/// Central-difference check of d(loss)/d(param) for every component of
/// every listed parameter. `loss_fn` must rebuild its graph on each call
/// (it is invoked 2 * total_components + 1 times). Relative error uses
/// max(|analytic|, |numeric|, 1.0) as the denominator so near-zero
/// gradients do not inflate the ratio.
GradCheckResult grad_check(const std::function<Tensor()>& loss_fn, std::span<Tensor> params,
                           double eps = 1e-5);

}  // namespace taxidest::nn
