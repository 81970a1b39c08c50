#include "taxidest/nn.hpp"

#include <array>
#include <cmath>
#include <stdexcept>

namespace taxidest::nn {

Tensor apply_activation(const Tensor& x, Activation act) {
  return act == Activation::kTanh ? tanh(x) : relu(x);
}

// ---------------------------------------------------------------------------
// Initializers
// ---------------------------------------------------------------------------

Tensor uniform_init(std::vector<int> shape, double limit, Rng& rng, bool requires_grad) {
  Tensor t = Tensor::zeros(std::move(shape), requires_grad);
  for (double& v : t.leaf_values()) v = rng.uniform(-limit, limit);
  return t;
}

Tensor glorot_uniform(int rows, int cols, Rng& rng, bool requires_grad) {
  const double limit = std::sqrt(6.0 / static_cast<double>(rows + cols));
  return uniform_init({rows, cols}, limit, rng, requires_grad);
}

std::vector<double> orthogonal_matrix(int n, Rng& rng) {
  if (n < 1) throw std::invalid_argument("orthogonal_matrix: n must be >= 1");
  const std::size_t un = static_cast<std::size_t>(n);
  std::vector<double> a(un * un);
  for (double& v : a) v = rng.gaussian();

  // Modified Gram-Schmidt on columns, with a second sweep for stability.
  for (std::size_t j = 0; j < un; ++j) {
    for (int sweep = 0; sweep < 2; ++sweep) {
      for (std::size_t prev = 0; prev < j; ++prev) {
        double proj = 0.0;
        for (std::size_t r = 0; r < un; ++r) proj += a[r * un + prev] * a[r * un + j];
        for (std::size_t r = 0; r < un; ++r) a[r * un + j] -= proj * a[r * un + prev];
      }
    }
    double norm = 0.0;
    for (std::size_t r = 0; r < un; ++r) norm += a[r * un + j] * a[r * un + j];
    norm = std::sqrt(norm);
    if (norm < 1e-12) {
      // Degenerate draw (vanishing after projection); retry the column.
      for (std::size_t r = 0; r < un; ++r) a[r * un + j] = rng.gaussian();
      --j;
      continue;
    }
    for (std::size_t r = 0; r < un; ++r) a[r * un + j] /= norm;
  }
  return a;
}

// ---------------------------------------------------------------------------
// LSTM
// ---------------------------------------------------------------------------

namespace {

/// Gate matrix [R | G]: recurrent block orthogonal, input block Glorot.
Tensor gate_matrix(int input_size, int hidden_size, Rng& rng) {
  const int cols = hidden_size + input_size;
  Tensor w = Tensor::zeros({hidden_size, cols}, true);
  std::vector<double>& v = w.leaf_values();
  const std::vector<double> q = orthogonal_matrix(hidden_size, rng);
  const double limit = std::sqrt(6.0 / static_cast<double>(input_size + hidden_size));
  for (int r = 0; r < hidden_size; ++r) {
    for (int c = 0; c < hidden_size; ++c) {
      v[static_cast<std::size_t>(r) * cols + c] =
          q[static_cast<std::size_t>(r) * hidden_size + c];
    }
    for (int c = hidden_size; c < cols; ++c) {
      v[static_cast<std::size_t>(r) * cols + c] = rng.uniform(-limit, limit);
    }
  }
  return w;
}

}  // namespace

std::vector<Tensor> LstmParams::parameters() const {
  return {w_i, w_f, w_o, w_c, b_i, b_f, b_o, b_c};
}

LstmParams make_lstm(int input_size, int hidden_size, Rng& rng) {
  if (input_size < 1 || hidden_size < 1) {
    throw std::invalid_argument("make_lstm: sizes must be >= 1");
  }
  LstmParams p;
  p.input_size = input_size;
  p.hidden_size = hidden_size;
  p.w_i = gate_matrix(input_size, hidden_size, rng);
  p.w_f = gate_matrix(input_size, hidden_size, rng);
  p.w_o = gate_matrix(input_size, hidden_size, rng);
  p.w_c = gate_matrix(input_size, hidden_size, rng);
  p.b_i = Tensor::zeros({hidden_size}, true);
  p.b_f = Tensor::zeros({hidden_size}, true);
  p.b_o = Tensor::zeros({hidden_size}, true);
  p.b_c = Tensor::zeros({hidden_size}, true);
  for (double& v : p.b_f.leaf_values()) v = 1.0;
  return p;
}

LstmState lstm_initial_state(int hidden_size) {
  return {Tensor::zeros({hidden_size}), Tensor::zeros({hidden_size})};
}

LstmState lstm_step(const LstmParams& params, const Tensor& x, const LstmState& prev,
                    Activation act) {
  if (x.shape() != std::vector<int>{params.input_size}) {
    throw std::invalid_argument("lstm_step: input width does not match the cell");
  }
  const Tensor hx = concat(std::array{prev.h, x});
  const Tensor i = sigmoid(add(matvec(params.w_i, hx), params.b_i));
  const Tensor f = sigmoid(add(matvec(params.w_f, hx), params.b_f));
  const Tensor o = sigmoid(add(matvec(params.w_o, hx), params.b_o));
  const Tensor g = apply_activation(add(matvec(params.w_c, hx), params.b_c), act);
  const Tensor c = add(mul(f, prev.c), mul(i, g));
  const Tensor h = mul(o, apply_activation(c, act));
  return {h, c};
}

// ---------------------------------------------------------------------------
// Attention
// ---------------------------------------------------------------------------

std::vector<Tensor> attention_reweight(const Tensor& w, std::span<const Tensor> steps) {
  if (steps.empty()) throw std::invalid_argument("attention_reweight: no steps");
  std::vector<Tensor> scores;
  scores.reserve(steps.size());
  for (const Tensor& s : steps) scores.push_back(dot(w, s));
  const Tensor weights = softmax(concat(scores));
  std::vector<Tensor> out;
  out.reserve(steps.size());
  for (std::size_t j = 0; j < steps.size(); ++j) {
    out.push_back(scale_by(steps[j], element(weights, static_cast<int>(j))));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Optimizers
// ---------------------------------------------------------------------------

double global_grad_norm(std::span<const Tensor> params) {
  double total = 0.0;
  for (const Tensor& p : params) {
    for (const double g : p.grad()) total += g * g;
  }
  return std::sqrt(total);
}

double clip_global_norm(std::span<Tensor> params, double max_norm) {
  if (max_norm <= 0.0) throw std::invalid_argument("clip_global_norm: max_norm must be > 0");
  const double norm = global_grad_norm(params);
  if (norm > max_norm) {
    const double factor = max_norm / norm;
    for (Tensor& p : params) {
      for (double& g : p.mutable_grad()) g *= factor;
    }
  }
  return norm;
}

Adam::Adam(std::vector<Tensor> params, double lr, double beta1, double beta2, double eps)
    : params_(std::move(params)), lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {
  for (const Tensor& p : params_) {
    if (!p.requires_grad()) throw std::invalid_argument("Adam: parameter without requires_grad");
    m_.emplace_back(static_cast<std::size_t>(p.size()), 0.0);
    v_.emplace_back(static_cast<std::size_t>(p.size()), 0.0);
  }
}

void Adam::zero_grad() {
  for (Tensor& p : params_) p.zero_grad();
}

void Adam::step() {
  ++step_count_;
  const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(step_count_));
  const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(step_count_));
  for (std::size_t pi = 0; pi < params_.size(); ++pi) {
    const std::vector<double>& g = params_[pi].grad();
    std::vector<double>& vals = params_[pi].leaf_values();
    for (std::size_t i = 0; i < vals.size(); ++i) {
      m_[pi][i] = beta1_ * m_[pi][i] + (1.0 - beta1_) * g[i];
      v_[pi][i] = beta2_ * v_[pi][i] + (1.0 - beta2_) * g[i] * g[i];
      const double mhat = m_[pi][i] / bc1;
      const double vhat = v_[pi][i] / bc2;
      vals[i] -= lr_ * mhat / (std::sqrt(vhat) + eps_);
    }
  }
}

SgdMomentum::SgdMomentum(std::vector<Tensor> params, double lr, double momentum)
    : params_(std::move(params)), lr_(lr), momentum_(momentum) {
  for (const Tensor& p : params_) {
    if (!p.requires_grad()) {
      throw std::invalid_argument("SgdMomentum: parameter without requires_grad");
    }
    velocity_.emplace_back(static_cast<std::size_t>(p.size()), 0.0);
  }
}

void SgdMomentum::zero_grad() {
  for (Tensor& p : params_) p.zero_grad();
}

void SgdMomentum::step() {
  for (std::size_t pi = 0; pi < params_.size(); ++pi) {
    const std::vector<double>& g = params_[pi].grad();
    std::vector<double>& vals = params_[pi].leaf_values();
    for (std::size_t i = 0; i < vals.size(); ++i) {
      velocity_[pi][i] = momentum_ * velocity_[pi][i] + g[i];
      vals[i] -= lr_ * velocity_[pi][i];
    }
  }
}

}  // namespace taxidest::nn
