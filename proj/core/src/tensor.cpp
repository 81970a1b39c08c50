#include "taxidest/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>
#include <unordered_set>

namespace taxidest::nn {

using detail::Node;

namespace {

int shape_size(const std::vector<int>& shape) {
  int n = 1;
  for (const int d : shape) {
    if (d < 1) throw std::invalid_argument("Tensor: non-positive dimension");
    n *= d;
  }
  return n;
}

void check_finite(const Node& node, const char* op) {
  for (const double v : node.val) {
    if (!std::isfinite(v)) {
      throw std::runtime_error(std::string("non-finite value produced by ") + op);
    }
  }
}

std::shared_ptr<Node> make_leaf(std::vector<int> shape, std::vector<double> values,
                                bool requires_grad) {
  auto node = std::make_shared<Node>();
  node->shape = std::move(shape);
  const int n = shape_size(node->shape);
  if (static_cast<int>(values.size()) != n) {
    throw std::invalid_argument("Tensor: values do not match shape");
  }
  node->val = std::move(values);
  node->requires_grad = requires_grad;
  if (requires_grad) node->grad.assign(node->val.size(), 0.0);
  return node;
}

/// Child node over the given parents; requires_grad is inherited.
std::shared_ptr<Node> make_op(std::vector<int> shape,
                              std::vector<std::shared_ptr<Node>> parents) {
  auto node = std::make_shared<Node>();
  node->shape = std::move(shape);
  node->val.resize(static_cast<std::size_t>(shape_size(node->shape)));
  node->is_leaf = false;
  for (const auto& p : parents) node->requires_grad = node->requires_grad || p->requires_grad;
  if (node->requires_grad) node->grad.assign(node->val.size(), 0.0);
  node->parents = std::move(parents);
  return node;
}

Node& req(const Tensor& t, const char* op) {
  if (!t.defined()) throw std::invalid_argument(std::string(op) + ": undefined tensor");
  return *t.node();
}

void same_shape(const Node& a, const Node& b, const char* op) {
  if (a.shape != b.shape) throw std::invalid_argument(std::string(op) + ": shape mismatch");
}

void add_to_grad(Node& n, std::size_t i, double v) {
  if (n.requires_grad) n.grad[i] += v;
}

}  // namespace

// ---------------------------------------------------------------------------
// Tensor handle
// ---------------------------------------------------------------------------

Tensor Tensor::scalar(double v, bool requires_grad) {
  return Tensor(make_leaf({}, {v}, requires_grad));
}

Tensor Tensor::zeros(std::vector<int> shape, bool requires_grad) {
  const std::size_t n = static_cast<std::size_t>(shape_size(shape));
  return Tensor(make_leaf(std::move(shape), std::vector<double>(n, 0.0), requires_grad));
}

Tensor Tensor::from_values(std::vector<int> shape, std::vector<double> values,
                           bool requires_grad) {
  return Tensor(make_leaf(std::move(shape), std::move(values), requires_grad));
}

const std::vector<int>& Tensor::shape() const { return req(*this, "shape").shape; }
int Tensor::size() const { return static_cast<int>(req(*this, "size").val.size()); }
bool Tensor::requires_grad() const { return req(*this, "requires_grad").requires_grad; }
const std::vector<double>& Tensor::values() const { return req(*this, "values").val; }

std::vector<double>& Tensor::leaf_values() {
  Node& n = req(*this, "leaf_values");
  if (!n.is_leaf) throw std::logic_error("leaf_values on a non-leaf tensor");
  return n.val;
}

double Tensor::item() const {
  const Node& n = req(*this, "item");
  if (n.val.size() != 1) throw std::logic_error("item() on a non-scalar tensor");
  return n.val[0];
}

const std::vector<double>& Tensor::grad() const {
  const Node& n = req(*this, "grad");
  if (!n.requires_grad) throw std::logic_error("grad() on a tensor without requires_grad");
  return n.grad;
}

std::vector<double>& Tensor::mutable_grad() {
  Node& n = req(*this, "mutable_grad");
  if (!n.requires_grad) {
    throw std::logic_error("mutable_grad() on a tensor without requires_grad");
  }
  return n.grad;
}

void Tensor::zero_grad() {
  Node& n = req(*this, "zero_grad");
  if (n.requires_grad) std::fill(n.grad.begin(), n.grad.end(), 0.0);
}

Tensor Tensor::clone(bool requires_grad) const {
  const Node& n = req(*this, "clone");
  return Tensor(make_leaf(n.shape, n.val, requires_grad));
}

void Tensor::backward() {
  Node& root = req(*this, "backward");
  if (root.val.size() != 1) throw std::logic_error("backward() on a non-scalar tensor");
  if (!root.requires_grad) {
    throw std::logic_error("backward() on a graph with no trainable inputs");
  }

  // Iterative post-order DFS: children complete after all their parents
  // are discovered, so reversing gives a valid topological order.
  std::vector<Node*> order;
  std::unordered_set<Node*> visited;
  std::vector<std::pair<Node*, std::size_t>> stack;
  stack.emplace_back(&root, 0);
  visited.insert(&root);
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node* parent = node->parents[next].get();
      ++next;
      if (parent->requires_grad && visited.insert(parent).second) {
        stack.emplace_back(parent, 0);
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  root.grad[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    if ((*it)->backprop) (*it)->backprop(**it);
  }
}

// ---------------------------------------------------------------------------
// Elementwise arithmetic
// ---------------------------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b) {
  Node& na = req(a, "add");
  Node& nb = req(b, "add");
  same_shape(na, nb, "add");
  auto out = make_op(na.shape, {a.shared_node(), b.shared_node()});
  for (std::size_t i = 0; i < out->val.size(); ++i) out->val[i] = na.val[i] + nb.val[i];
  check_finite(*out, "add");
  if (out->requires_grad) {
    out->backprop = [](Node& self) {
      for (std::size_t i = 0; i < self.val.size(); ++i) {
        add_to_grad(*self.parents[0], i, self.grad[i]);
        add_to_grad(*self.parents[1], i, self.grad[i]);
      }
    };
  }
  return Tensor(std::move(out));
}

Tensor sub(const Tensor& a, const Tensor& b) {
  Node& na = req(a, "sub");
  Node& nb = req(b, "sub");
  same_shape(na, nb, "sub");
  auto out = make_op(na.shape, {a.shared_node(), b.shared_node()});
  for (std::size_t i = 0; i < out->val.size(); ++i) out->val[i] = na.val[i] - nb.val[i];
  check_finite(*out, "sub");
  if (out->requires_grad) {
    out->backprop = [](Node& self) {
      for (std::size_t i = 0; i < self.val.size(); ++i) {
        add_to_grad(*self.parents[0], i, self.grad[i]);
        add_to_grad(*self.parents[1], i, -self.grad[i]);
      }
    };
  }
  return Tensor(std::move(out));
}

Tensor mul(const Tensor& a, const Tensor& b) {
  Node& na = req(a, "mul");
  Node& nb = req(b, "mul");
  same_shape(na, nb, "mul");
  auto out = make_op(na.shape, {a.shared_node(), b.shared_node()});
  for (std::size_t i = 0; i < out->val.size(); ++i) out->val[i] = na.val[i] * nb.val[i];
  check_finite(*out, "mul");
  if (out->requires_grad) {
    out->backprop = [](Node& self) {
      Node& pa = *self.parents[0];
      Node& pb = *self.parents[1];
      for (std::size_t i = 0; i < self.val.size(); ++i) {
        add_to_grad(pa, i, self.grad[i] * pb.val[i]);
        add_to_grad(pb, i, self.grad[i] * pa.val[i]);
      }
    };
  }
  return Tensor(std::move(out));
}

Tensor scale(const Tensor& a, double s) {
  Node& na = req(a, "scale");
  auto out = make_op(na.shape, {a.shared_node()});
  for (std::size_t i = 0; i < out->val.size(); ++i) out->val[i] = na.val[i] * s;
  check_finite(*out, "scale");
  if (out->requires_grad) {
    out->backprop = [s](Node& self) {
      for (std::size_t i = 0; i < self.val.size(); ++i) {
        add_to_grad(*self.parents[0], i, self.grad[i] * s);
      }
    };
  }
  return Tensor(std::move(out));
}

Tensor neg(const Tensor& a) { return scale(a, -1.0); }

// ---------------------------------------------------------------------------
// Linear algebra
// ---------------------------------------------------------------------------

Tensor matvec(const Tensor& w, const Tensor& x) {
  Node& nw = req(w, "matvec");
  Node& nx = req(x, "matvec");
  if (nw.shape.size() != 2 || nx.shape.size() != 1 || nw.shape[1] != nx.shape[0]) {
    throw std::invalid_argument("matvec: need (m x n) matrix and n-vector");
  }
  const int m = nw.shape[0], n = nw.shape[1];
  auto out = make_op({m}, {w.shared_node(), x.shared_node()});
  for (int r = 0; r < m; ++r) {
    double acc = 0.0;
    const double* wrow = nw.val.data() + static_cast<std::size_t>(r) * n;
    for (int c = 0; c < n; ++c) acc += wrow[c] * nx.val[static_cast<std::size_t>(c)];
    out->val[static_cast<std::size_t>(r)] = acc;
  }
  check_finite(*out, "matvec");
  if (out->requires_grad) {
    out->backprop = [m, n](Node& self) {
      Node& pw = *self.parents[0];
      Node& px = *self.parents[1];
      for (int r = 0; r < m; ++r) {
        const double g = self.grad[static_cast<std::size_t>(r)];
        if (g == 0.0) continue;
        for (int c = 0; c < n; ++c) {
          const std::size_t wi = static_cast<std::size_t>(r) * n + c;
          add_to_grad(pw, wi, g * px.val[static_cast<std::size_t>(c)]);
          add_to_grad(px, static_cast<std::size_t>(c), g * pw.val[wi]);
        }
      }
    };
  }
  return Tensor(std::move(out));
}

Tensor vecmat(const Tensor& x, const Tensor& w) {
  Node& nx = req(x, "vecmat");
  Node& nw = req(w, "vecmat");
  if (nw.shape.size() != 2 || nx.shape.size() != 1 || nw.shape[0] != nx.shape[0]) {
    throw std::invalid_argument("vecmat: need m-vector and (m x n) matrix");
  }
  const int m = nw.shape[0], n = nw.shape[1];
  auto out = make_op({n}, {x.shared_node(), w.shared_node()});
  for (int c = 0; c < n; ++c) {
    double acc = 0.0;
    for (int r = 0; r < m; ++r) {
      acc += nx.val[static_cast<std::size_t>(r)] * nw.val[static_cast<std::size_t>(r) * n + c];
    }
    out->val[static_cast<std::size_t>(c)] = acc;
  }
  check_finite(*out, "vecmat");
  if (out->requires_grad) {
    out->backprop = [m, n](Node& self) {
      Node& px = *self.parents[0];
      Node& pw = *self.parents[1];
      for (int r = 0; r < m; ++r) {
        double xg = 0.0;
        for (int c = 0; c < n; ++c) {
          const std::size_t wi = static_cast<std::size_t>(r) * n + c;
          const double g = self.grad[static_cast<std::size_t>(c)];
          xg += g * pw.val[wi];
          add_to_grad(pw, wi, g * px.val[static_cast<std::size_t>(r)]);
        }
        add_to_grad(px, static_cast<std::size_t>(r), xg);
      }
    };
  }
  return Tensor(std::move(out));
}

Tensor dot(const Tensor& a, const Tensor& b) {
  Node& na = req(a, "dot");
  Node& nb = req(b, "dot");
  same_shape(na, nb, "dot");
  auto out = make_op({}, {a.shared_node(), b.shared_node()});
  double acc = 0.0;
  for (std::size_t i = 0; i < na.val.size(); ++i) acc += na.val[i] * nb.val[i];
  out->val[0] = acc;
  check_finite(*out, "dot");
  if (out->requires_grad) {
    out->backprop = [](Node& self) {
      Node& pa = *self.parents[0];
      Node& pb = *self.parents[1];
      const double g = self.grad[0];
      for (std::size_t i = 0; i < pa.val.size(); ++i) {
        add_to_grad(pa, i, g * pb.val[i]);
        add_to_grad(pb, i, g * pa.val[i]);
      }
    };
  }
  return Tensor(std::move(out));
}

// ---------------------------------------------------------------------------
// Shape ops
// ---------------------------------------------------------------------------

Tensor concat(std::span<const Tensor> parts) {
  if (parts.empty()) throw std::invalid_argument("concat: no inputs");
  int total = 0;
  std::vector<std::shared_ptr<Node>> parents;
  parents.reserve(parts.size());
  for (const Tensor& t : parts) {
    Node& n = req(t, "concat");
    if (n.shape.size() > 1) throw std::invalid_argument("concat: inputs must be scalars/vectors");
    total += static_cast<int>(n.val.size());
    parents.push_back(t.shared_node());
  }
  auto out = make_op({total}, std::move(parents));
  std::size_t off = 0;
  for (const auto& p : out->parents) {
    std::copy(p->val.begin(), p->val.end(), out->val.begin() + static_cast<std::ptrdiff_t>(off));
    off += p->val.size();
  }
  check_finite(*out, "concat");
  if (out->requires_grad) {
    out->backprop = [](Node& self) {
      std::size_t off2 = 0;
      for (const auto& p : self.parents) {
        if (p->requires_grad) {
          for (std::size_t i = 0; i < p->val.size(); ++i) p->grad[i] += self.grad[off2 + i];
        }
        off2 += p->val.size();
      }
    };
  }
  return Tensor(std::move(out));
}

Tensor row(const Tensor& w, int r) {
  Node& nw = req(w, "row");
  if (nw.shape.size() != 2) throw std::invalid_argument("row: input is not a matrix");
  if (r < 0 || r >= nw.shape[0]) throw std::out_of_range("row: index out of range");
  const int cols = nw.shape[1];
  auto out = make_op({cols}, {w.shared_node()});
  const std::size_t base = static_cast<std::size_t>(r) * cols;
  std::copy(nw.val.begin() + static_cast<std::ptrdiff_t>(base),
            nw.val.begin() + static_cast<std::ptrdiff_t>(base + cols), out->val.begin());
  check_finite(*out, "row");
  if (out->requires_grad) {
    out->backprop = [base](Node& self) {
      Node& p = *self.parents[0];
      for (std::size_t i = 0; i < self.val.size(); ++i) add_to_grad(p, base + i, self.grad[i]);
    };
  }
  return Tensor(std::move(out));
}

Tensor element(const Tensor& x, int i) {
  Node& nx = req(x, "element");
  if (i < 0 || i >= static_cast<int>(nx.val.size())) {
    throw std::out_of_range("element: index out of range");
  }
  auto out = make_op({}, {x.shared_node()});
  out->val[0] = nx.val[static_cast<std::size_t>(i)];
  if (out->requires_grad) {
    out->backprop = [i](Node& self) {
      add_to_grad(*self.parents[0], static_cast<std::size_t>(i), self.grad[0]);
    };
  }
  return Tensor(std::move(out));
}

Tensor scale_by(const Tensor& x, const Tensor& s) {
  Node& nx = req(x, "scale_by");
  Node& ns = req(s, "scale_by");
  if (ns.val.size() != 1) throw std::invalid_argument("scale_by: scale must be a scalar tensor");
  auto out = make_op(nx.shape, {x.shared_node(), s.shared_node()});
  for (std::size_t i = 0; i < out->val.size(); ++i) out->val[i] = nx.val[i] * ns.val[0];
  check_finite(*out, "scale_by");
  if (out->requires_grad) {
    out->backprop = [](Node& self) {
      Node& px = *self.parents[0];
      Node& ps = *self.parents[1];
      double sg = 0.0;
      for (std::size_t i = 0; i < self.val.size(); ++i) {
        add_to_grad(px, i, self.grad[i] * ps.val[0]);
        sg += self.grad[i] * px.val[i];
      }
      add_to_grad(ps, 0, sg);
    };
  }
  return Tensor(std::move(out));
}

// ---------------------------------------------------------------------------
// Activations
// ---------------------------------------------------------------------------

Tensor sigmoid(const Tensor& x) {
  Node& nx = req(x, "sigmoid");
  auto out = make_op(nx.shape, {x.shared_node()});
  for (std::size_t i = 0; i < out->val.size(); ++i) {
    out->val[i] = 1.0 / (1.0 + std::exp(-nx.val[i]));
  }
  check_finite(*out, "sigmoid");
  if (out->requires_grad) {
    out->backprop = [](Node& self) {
      for (std::size_t i = 0; i < self.val.size(); ++i) {
        const double s = self.val[i];
        add_to_grad(*self.parents[0], i, self.grad[i] * s * (1.0 - s));
      }
    };
  }
  return Tensor(std::move(out));
}

Tensor tanh(const Tensor& x) {
  Node& nx = req(x, "tanh");
  auto out = make_op(nx.shape, {x.shared_node()});
  for (std::size_t i = 0; i < out->val.size(); ++i) out->val[i] = std::tanh(nx.val[i]);
  check_finite(*out, "tanh");
  if (out->requires_grad) {
    out->backprop = [](Node& self) {
      for (std::size_t i = 0; i < self.val.size(); ++i) {
        const double t = self.val[i];
        add_to_grad(*self.parents[0], i, self.grad[i] * (1.0 - t * t));
      }
    };
  }
  return Tensor(std::move(out));
}

Tensor relu(const Tensor& x) {
  Node& nx = req(x, "relu");
  auto out = make_op(nx.shape, {x.shared_node()});
  for (std::size_t i = 0; i < out->val.size(); ++i) out->val[i] = std::max(0.0, nx.val[i]);
  check_finite(*out, "relu");
  if (out->requires_grad) {
    out->backprop = [](Node& self) {
      Node& p = *self.parents[0];
      for (std::size_t i = 0; i < self.val.size(); ++i) {
        if (p.val[i] > 0.0) add_to_grad(p, i, self.grad[i]);
      }
    };
  }
  return Tensor(std::move(out));
}

Tensor softmax(const Tensor& x) {
  Node& nx = req(x, "softmax");
  if (nx.shape.size() != 1) throw std::invalid_argument("softmax: input must be a vector");
  auto out = make_op(nx.shape, {x.shared_node()});
  const double mx = *std::max_element(nx.val.begin(), nx.val.end());
  double total = 0.0;
  for (std::size_t i = 0; i < out->val.size(); ++i) {
    out->val[i] = std::exp(nx.val[i] - mx);
    total += out->val[i];
  }
  for (double& v : out->val) v /= total;
  check_finite(*out, "softmax");
  if (out->requires_grad) {
    out->backprop = [](Node& self) {
      double inner = 0.0;
      for (std::size_t i = 0; i < self.val.size(); ++i) inner += self.grad[i] * self.val[i];
      for (std::size_t i = 0; i < self.val.size(); ++i) {
        add_to_grad(*self.parents[0], i, self.val[i] * (self.grad[i] - inner));
      }
    };
  }
  return Tensor(std::move(out));
}

Tensor dropout(const Tensor& x, double p, Rng& rng, bool training) {
  if (p < 0.0 || p >= 1.0) throw std::invalid_argument("dropout: p must be in [0, 1)");
  if (!training || p == 0.0) return x;
  Node& nx = req(x, "dropout");
  auto out = make_op(nx.shape, {x.shared_node()});
  auto mask = std::make_shared<std::vector<double>>(out->val.size());
  const double keep_scale = 1.0 / (1.0 - p);
  for (std::size_t i = 0; i < out->val.size(); ++i) {
    (*mask)[i] = rng.uniform() < p ? 0.0 : keep_scale;
    out->val[i] = nx.val[i] * (*mask)[i];
  }
  check_finite(*out, "dropout");
  if (out->requires_grad) {
    out->backprop = [mask](Node& self) {
      for (std::size_t i = 0; i < self.val.size(); ++i) {
        add_to_grad(*self.parents[0], i, self.grad[i] * (*mask)[i]);
      }
    };
  }
  return Tensor(std::move(out));
}

// ---------------------------------------------------------------------------
// Reductions and losses
// ---------------------------------------------------------------------------

Tensor sum(const Tensor& x) {
  Node& nx = req(x, "sum");
  auto out = make_op({}, {x.shared_node()});
  double acc = 0.0;
  for (const double v : nx.val) acc += v;
  out->val[0] = acc;
  check_finite(*out, "sum");
  if (out->requires_grad) {
    out->backprop = [](Node& self) {
      for (std::size_t i = 0; i < self.parents[0]->val.size(); ++i) {
        add_to_grad(*self.parents[0], i, self.grad[0]);
      }
    };
  }
  return Tensor(std::move(out));
}

Tensor mean(const Tensor& x) {
  Node& nx = req(x, "mean");
  if (nx.val.empty()) throw std::invalid_argument("mean: empty tensor");
  return scale(sum(x), 1.0 / static_cast<double>(nx.val.size()));
}

Tensor mse_loss(const Tensor& pred, std::span<const double> target) {
  Node& np = req(pred, "mse_loss");
  if (np.val.size() != target.size()) throw std::invalid_argument("mse_loss: size mismatch");
  if (np.val.empty()) throw std::invalid_argument("mse_loss: empty prediction");
  auto out = make_op({}, {pred.shared_node()});
  const std::size_t n = np.val.size();
  double acc = 0.0;
  auto diffs = std::make_shared<std::vector<double>>(n);
  for (std::size_t i = 0; i < n; ++i) {
    (*diffs)[i] = np.val[i] - target[i];
    acc += (*diffs)[i] * (*diffs)[i];
  }
  out->val[0] = acc / static_cast<double>(n);
  check_finite(*out, "mse_loss");
  if (out->requires_grad) {
    out->backprop = [diffs, n](Node& self) {
      const double g = self.grad[0] * 2.0 / static_cast<double>(n);
      for (std::size_t i = 0; i < n; ++i) add_to_grad(*self.parents[0], i, g * (*diffs)[i]);
    };
  }
  return Tensor(std::move(out));
}

Tensor cross_entropy_with_logits(const Tensor& logits, int target_class) {
  Node& nl = req(logits, "cross_entropy_with_logits");
  if (nl.shape.size() != 1) {
    throw std::invalid_argument("cross_entropy_with_logits: logits must be a vector");
  }
  if (target_class < 0 || target_class >= static_cast<int>(nl.val.size())) {
    throw std::out_of_range("cross_entropy_with_logits: target class out of range");
  }
  auto out = make_op({}, {logits.shared_node()});
  const double mx = *std::max_element(nl.val.begin(), nl.val.end());
  double z = 0.0;
  for (const double v : nl.val) z += std::exp(v - mx);
  const double lse = mx + std::log(z);
  out->val[0] = lse - nl.val[static_cast<std::size_t>(target_class)];
  check_finite(*out, "cross_entropy_with_logits");
  if (out->requires_grad) {
    auto probs = std::make_shared<std::vector<double>>(nl.val.size());
    for (std::size_t i = 0; i < nl.val.size(); ++i) (*probs)[i] = std::exp(nl.val[i] - lse);
    out->backprop = [probs, target_class](Node& self) {
      const double g = self.grad[0];
      for (std::size_t i = 0; i < probs->size(); ++i) {
        const double onehot = static_cast<int>(i) == target_class ? 1.0 : 0.0;
        add_to_grad(*self.parents[0], i, g * ((*probs)[i] - onehot));
      }
    };
  }
  return Tensor(std::move(out));
}

// ---------------------------------------------------------------------------
// Gradient checking
// ---------------------------------------------------------------------------

GradCheckResult grad_check(const std::function<Tensor()>& loss_fn, std::span<Tensor> params,
                           double eps) {
  for (Tensor& p : params) p.zero_grad();
  Tensor loss = loss_fn();
  loss.backward();

  std::vector<std::vector<double>> analytic;
  analytic.reserve(params.size());
  for (const Tensor& p : params) analytic.push_back(p.grad());

  GradCheckResult result;
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    std::vector<double>& vals = params[pi].leaf_values();
    for (std::size_t i = 0; i < vals.size(); ++i) {
      const double saved = vals[i];
      vals[i] = saved + eps;
      const double up = loss_fn().item();
      vals[i] = saved - eps;
      const double down = loss_fn().item();
      vals[i] = saved;
      const double numeric = (up - down) / (2.0 * eps);
      const double a = analytic[pi][i];
      const double denom = std::max({std::abs(a), std::abs(numeric), 1.0});
      result.max_rel_error = std::max(result.max_rel_error, std::abs(a - numeric) / denom);
      ++result.n_checked;
    }
  }
  return result;
}

}  // namespace taxidest::nn
