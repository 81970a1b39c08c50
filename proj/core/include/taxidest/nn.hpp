#pragma once

#include <span>
#include <vector>

#include "taxidest/rng.hpp"
#include "taxidest/tensor.hpp"

namespace taxidest::nn {

/// Candidate/output nonlinearity of the recurrent cell. kRelu swaps the
/// tanh in both the candidate and the cell-output path.
enum class Activation { kTanh, kRelu };

Tensor apply_activation(const Tensor& x, Activation act);

// --- initializers -----------------------------------------------------------

/// Uniform(-limit, limit) leaf tensor.
Tensor uniform_init(std::vector<int> shape, double limit, Rng& rng, bool requires_grad = true);

/// Glorot/Xavier uniform for a (rows x cols) dense matrix:
/// limit = sqrt(6 / (rows + cols)).
Tensor glorot_uniform(int rows, int cols, Rng& rng, bool requires_grad = true);

/// Row-major n x n matrix with orthonormal columns (Gram-Schmidt on a
/// Gaussian draw).
std::vector<double> orthogonal_matrix(int n, Rng& rng);

// --- LSTM -------------------------------------------------------------------

/// One-layer LSTM over the concatenation [h_prev, x] (hidden block first).
/// Each gate matrix is hidden x (hidden + input): the recurrent columns
/// start orthogonal, the input columns Glorot uniform. The forget-gate
/// bias starts at +1 so early training does not erase the cell state.
struct LstmParams {
  int input_size = 0;
  int hidden_size = 0;
  Tensor w_i, w_f, w_o, w_c;  // gate order: input, forget, output, candidate
  Tensor b_i, b_f, b_o, b_c;

  std::vector<Tensor> parameters() const;
};

LstmParams make_lstm(int input_size, int hidden_size, Rng& rng);

struct LstmState {
  Tensor h, c;
};

/// Zero state; constant (no gradient flows into it).
LstmState lstm_initial_state(int hidden_size);

LstmState lstm_step(const LstmParams& params, const Tensor& x, const LstmState& prev,
                    Activation act);

// --- attention --------------------------------------------------------------

/// Content attention with a learned score vector: score_j = w . x_j,
/// weights = softmax over all given steps, result_j = weight_j * x_j.
/// Steps that should not participate are simply not passed in, which is
/// how padding stays outside the softmax.
std::vector<Tensor> attention_reweight(const Tensor& w, std::span<const Tensor> steps);

// --- optimizers -------------------------------------------------------------

double global_grad_norm(std::span<const Tensor> params);

/// Scales every gradient so the global L2 norm is at most max_norm;
/// returns the norm before clipping.
double clip_global_norm(std::span<Tensor> params, double max_norm);

class Adam {
 public:
  explicit Adam(std::vector<Tensor> params, double lr = 1e-3, double beta1 = 0.9,
                double beta2 = 0.999, double eps = 1e-8);

  void zero_grad();
  /// Bias-corrected update from the gradients currently on the parameters.
  void step();

  void set_lr(double lr) { lr_ = lr; }
  double lr() const { return lr_; }
  std::span<Tensor> params() { return params_; }

 private:
  std::vector<Tensor> params_;
  std::vector<std::vector<double>> m_, v_;
  double lr_, beta1_, beta2_, eps_;
  long step_count_ = 0;
};

class SgdMomentum {
 public:
  explicit SgdMomentum(std::vector<Tensor> params, double lr, double momentum = 0.9);

  void zero_grad();
  void step();

  void set_lr(double lr) { lr_ = lr; }
  std::span<Tensor> params() { return params_; }

 private:
  std::vector<Tensor> params_;
  std::vector<std::vector<double>> velocity_;
  double lr_, momentum_;
};

}  // namespace taxidest::nn
