#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <array>
#include <cmath>
#include <cstddef>
#include <limits>
#include <vector>

#include "taxidest/nn.hpp"
#include "taxidest/rng.hpp"
#include "taxidest/tensor.hpp"

using namespace taxidest;
using nn::Tensor;

namespace {

Tensor vec(std::vector<double> v, bool grad = false) {
  const int n = static_cast<int>(v.size());
  return Tensor::from_values({n}, std::move(v), grad);
}

Tensor mat(int r, int c, std::vector<double> v, bool grad = false) {
  return Tensor::from_values({r, c}, std::move(v), grad);
}

double sig(double x) { return 1.0 / (1.0 + std::exp(-x)); }

}  // namespace

// ---------------------------------------------------------------------------
// Tensor handles
// ---------------------------------------------------------------------------

TEST_CASE("construction, shape, and access") {
  const Tensor s = Tensor::scalar(2.5);
  CHECK(s.shape().empty());
  CHECK(s.size() == 1);
  CHECK(s.item() == 2.5);
  CHECK(!s.requires_grad());

  const Tensor z = Tensor::zeros({2, 3}, true);
  CHECK(z.shape() == std::vector<int>{2, 3});
  CHECK(z.size() == 6);
  CHECK(z.requires_grad());

  CHECK_THROWS_AS(Tensor::from_values({2}, {1.0, 2.0, 3.0}), std::invalid_argument);
  CHECK_THROWS_AS(Tensor::zeros({0}), std::invalid_argument);
  CHECK_THROWS_AS(vec({1.0, 2.0}).item(), std::logic_error);
  CHECK_THROWS_AS(Tensor().size(), std::invalid_argument);
  CHECK_THROWS_AS(vec({1.0}).grad(), std::logic_error);
}

TEST_CASE("copies alias, clone detaches") {
  Tensor a = vec({1.0, 2.0}, true);
  Tensor alias = a;
  a.leaf_values()[0] = 9.0;
  CHECK(alias.values()[0] == 9.0);

  Tensor copy = a.clone();
  a.leaf_values()[0] = 1.0;
  CHECK(copy.values()[0] == 9.0);
  CHECK(!copy.requires_grad());

  const Tensor op = nn::add(a, a);
  CHECK_THROWS_AS(Tensor(op).leaf_values(), std::logic_error);
}

// ---------------------------------------------------------------------------
// Forward values
// ---------------------------------------------------------------------------

TEST_CASE("elementwise arithmetic") {
  const Tensor a = vec({1.0, -2.0, 3.0});
  const Tensor b = vec({0.5, 4.0, -1.0});
  CHECK(nn::add(a, b).values() == std::vector<double>{1.5, 2.0, 2.0});
  CHECK(nn::sub(a, b).values() == std::vector<double>{0.5, -6.0, 4.0});
  CHECK(nn::mul(a, b).values() == std::vector<double>{0.5, -8.0, -3.0});
  CHECK(nn::scale(a, -2.0).values() == std::vector<double>{-2.0, 4.0, -6.0});
  CHECK(nn::neg(a).values() == std::vector<double>{-1.0, 2.0, -3.0});
  CHECK_THROWS_AS(nn::add(a, vec({1.0})), std::invalid_argument);
}

TEST_CASE("matrix and vector products") {
  const Tensor w = mat(2, 3, {1, 2, 3, 4, 5, 6});
  const Tensor x = vec({1.0, 0.5, -1.0});
  CHECK(nn::matvec(w, x).values() == std::vector<double>{-1.0, 0.5});

  const Tensor y = vec({1.0, -1.0});
  CHECK(nn::vecmat(y, w).values() == std::vector<double>{-3.0, -3.0, -3.0});

  CHECK(nn::dot(vec({1, 2, 3}), vec({4, 5, 6})).item() == 32.0);

  CHECK_THROWS_AS(nn::matvec(w, y), std::invalid_argument);
  CHECK_THROWS_AS(nn::vecmat(x, w), std::invalid_argument);
}

TEST_CASE("shape helpers") {
  const Tensor w = mat(2, 3, {1, 2, 3, 4, 5, 6});
  CHECK(nn::row(w, 1).values() == std::vector<double>{4, 5, 6});
  CHECK_THROWS_AS(nn::row(w, 2), std::out_of_range);
  CHECK_THROWS_AS(nn::row(vec({1, 2}), 0), std::invalid_argument);

  const Tensor x = vec({7.0, 8.0});
  CHECK(nn::element(x, 1).item() == 8.0);
  CHECK_THROWS_AS(nn::element(x, 2), std::out_of_range);

  const std::array<Tensor, 3> parts = {vec({1, 2}), Tensor::scalar(3), vec({4})};
  CHECK(nn::concat(parts).values() == std::vector<double>{1, 2, 3, 4});
  CHECK(nn::concat(parts).shape() == std::vector<int>{4});
  CHECK_THROWS_AS(nn::concat({}), std::invalid_argument);

  CHECK(nn::scale_by(x, Tensor::scalar(0.5)).values() == std::vector<double>{3.5, 4.0});
  CHECK_THROWS_AS(nn::scale_by(x, vec({1, 2})), std::invalid_argument);
}

TEST_CASE("activations and reductions") {
  CHECK(nn::sigmoid(vec({0.0})).values()[0] == 0.5);
  CHECK(nn::sigmoid(vec({2.0})).values()[0] == doctest::Approx(sig(2.0)).epsilon(1e-15));
  CHECK(nn::tanh(vec({0.5})).values()[0] == std::tanh(0.5));
  CHECK(nn::relu(vec({-1.0, 0.0, 2.0})).values() == std::vector<double>{0.0, 0.0, 2.0});

  const std::vector<double> sm = nn::softmax(vec({0.0, 0.0})).values();
  CHECK(sm[0] == doctest::Approx(0.5).epsilon(1e-15));
  const std::vector<double> sm2 = nn::softmax(vec({1.0, 2.0, 3.0})).values();
  CHECK(sm2[0] + sm2[1] + sm2[2] == doctest::Approx(1.0).epsilon(1e-14));
  CHECK(sm2[2] > sm2[1]);

  // Log-sum-exp stability: huge logits neither overflow nor throw.
  const std::vector<double> hard = nn::softmax(vec({1000.0, 0.0})).values();
  CHECK(hard[0] == 1.0);
  CHECK(hard[1] == 0.0);
  CHECK_THROWS_AS(nn::softmax(mat(1, 2, {1, 2})), std::invalid_argument);

  CHECK(nn::sum(vec({1, 2, 3})).item() == 6.0);
  CHECK(nn::mean(vec({1, 2, 3, 6})).item() == 3.0);
}

TEST_CASE("losses") {
  const Tensor pred = vec({1.0, -1.0});
  const std::vector<double> target = {0.0, 1.0};
  CHECK(nn::mse_loss(pred, target).item() == doctest::Approx(2.5).epsilon(1e-15));
  CHECK_THROWS_AS(nn::mse_loss(pred, std::vector<double>{1.0}), std::invalid_argument);

  // Uniform logits: loss is ln(n) no matter the class.
  CHECK(nn::cross_entropy_with_logits(vec({0, 0, 0, 0}), 2).item() ==
        doctest::Approx(std::log(4.0)).epsilon(1e-14));
  // Shifting all logits leaves the loss unchanged.
  const double a = nn::cross_entropy_with_logits(vec({1.0, 2.0, 0.5}), 1).item();
  const double b = nn::cross_entropy_with_logits(vec({101.0, 102.0, 100.5}), 1).item();
  CHECK(a == doctest::Approx(b).epsilon(1e-12));
  CHECK_THROWS_AS(nn::cross_entropy_with_logits(vec({1, 2}), 2), std::out_of_range);
}

TEST_CASE("non-finite results throw at the producing op") {
  const double huge = std::numeric_limits<double>::max();
  CHECK_THROWS_WITH_AS(nn::add(vec({huge}), vec({huge})), doctest::Contains("add"),
                       std::runtime_error);
  CHECK_THROWS_WITH_AS(nn::scale(vec({huge}), 2.0), doctest::Contains("scale"),
                       std::runtime_error);
  CHECK_THROWS_AS(nn::mul(vec({huge}), vec({huge})), std::runtime_error);
}

// ---------------------------------------------------------------------------
// Backward pass
// ---------------------------------------------------------------------------

TEST_CASE("hand-checked gradients") {
  Tensor w = vec({2.0, -1.0}, true);
  const Tensor x = vec({3.0, 5.0});
  nn::dot(w, x).backward();
  CHECK(w.grad() == std::vector<double>{3.0, 5.0});

  // Gradients accumulate until zeroed.
  nn::dot(w, x).backward();
  CHECK(w.grad() == std::vector<double>{6.0, 10.0});
  w.zero_grad();
  CHECK(w.grad() == std::vector<double>{0.0, 0.0});

  // Shared subexpression: y = sum(a + a) with a = x*x, dy/dx = 4x.
  Tensor p = vec({1.5, -2.0}, true);
  const Tensor sq = nn::mul(p, p);
  nn::sum(nn::add(sq, sq)).backward();
  CHECK(p.grad()[0] == doctest::Approx(6.0).epsilon(1e-14));
  CHECK(p.grad()[1] == doctest::Approx(-8.0).epsilon(1e-14));

  CHECK_THROWS_AS(nn::add(p, p).backward(), std::logic_error);
  CHECK_THROWS_AS(nn::sum(vec({1.0, 2.0})).backward(), std::logic_error);
}

TEST_CASE("cross-entropy gradient is softmax minus one-hot") {
  Tensor logits = vec({0.4, -0.2, 1.1}, true);
  nn::cross_entropy_with_logits(logits, 1).backward();
  const std::vector<double> p = nn::softmax(logits.clone()).values();
  CHECK(logits.grad()[0] == doctest::Approx(p[0]).epsilon(1e-12));
  CHECK(logits.grad()[1] == doctest::Approx(p[1] - 1.0).epsilon(1e-12));
  CHECK(logits.grad()[2] == doctest::Approx(p[2]).epsilon(1e-12));
}

TEST_CASE("central differences agree for every op family") {
  Rng rng(2024);
  const auto randvec = [&](int n, bool grad) {
    std::vector<double> v(static_cast<std::size_t>(n));
    for (double& x : v) x = rng.uniform(-1.2, 1.2);
    return Tensor::from_values({n}, std::move(v), grad);
  };

  SUBCASE("dense sigmoid head with mse") {
    Tensor w = nn::glorot_uniform(3, 4, rng);
    Tensor b = randvec(3, true);
    Tensor x = randvec(4, true);
    const std::vector<double> target = {0.3, -0.1, 0.8};
    std::vector<Tensor> params = {w, b, x};
    const auto loss = [&] { return nn::mse_loss(nn::sigmoid(nn::add(nn::matvec(w, x), b)), target); };
    const nn::GradCheckResult r = nn::grad_check(loss, params);
    CHECK(r.max_rel_error < 1e-4);
    CHECK(r.n_checked == 12 + 3 + 4);
  }
  SUBCASE("vecmat, mul, tanh") {
    Tensor w = nn::glorot_uniform(3, 2, rng);
    Tensor x = randvec(3, true);
    Tensor v = randvec(2, true);
    std::vector<Tensor> params = {w, x, v};
    const auto loss = [&] { return nn::sum(nn::tanh(nn::mul(nn::vecmat(x, w), v))); };
    CHECK(nn::grad_check(loss, params).max_rel_error < 1e-4);
  }
  SUBCASE("softmax probabilities") {
    Tensor z = randvec(5, true);
    std::vector<Tensor> params = {z};
    const auto loss = [&] { return nn::element(nn::softmax(z), 2); };
    CHECK(nn::grad_check(loss, params).max_rel_error < 1e-4);
  }
  SUBCASE("cross entropy") {
    Tensor w = nn::glorot_uniform(4, 3, rng);
    Tensor x = randvec(3, true);
    std::vector<Tensor> params = {w, x};
    const auto loss = [&] { return nn::cross_entropy_with_logits(nn::matvec(w, x), 3); };
    CHECK(nn::grad_check(loss, params).max_rel_error < 1e-4);
  }
  SUBCASE("relu away from the kink") {
    Tensor x = vec({0.9, -0.7, 1.4, -2.0}, true);
    std::vector<Tensor> params = {x};
    const auto loss = [&] { return nn::sum(nn::relu(x)); };
    CHECK(nn::grad_check(loss, params).max_rel_error < 1e-4);
  }
  SUBCASE("concat, row, element, scale_by, neg, sub, scale, mean") {
    Tensor w = nn::glorot_uniform(2, 3, rng);
    Tensor x = randvec(2, true);
    Tensor s = randvec(3, true);
    std::vector<Tensor> params = {w, x, s};
    const auto loss = [&] {
      const Tensor joined = nn::concat(std::array{nn::row(w, 1), nn::neg(x)});
      const Tensor scaled = nn::scale_by(joined, nn::element(s, 0));
      return nn::mean(nn::scale(nn::sub(scaled, nn::concat(std::array{s, x})), 0.7));
    };
    CHECK(nn::grad_check(loss, params).max_rel_error < 1e-4);
  }
}

// ---------------------------------------------------------------------------
// Dropout
// ---------------------------------------------------------------------------

TEST_CASE("dropout semantics") {
  Rng rng(7);
  const Tensor x = vec({1.0, 2.0, 3.0, 4.0});

  SUBCASE("eval mode and p=0 are identity") {
    CHECK(nn::dropout(x, 0.5, rng, false).values() == x.values());
    CHECK(nn::dropout(x, 0.0, rng, true).values() == x.values());
  }
  SUBCASE("p outside [0,1) rejected") {
    CHECK_THROWS_AS(nn::dropout(x, 1.0, rng, true), std::invalid_argument);
    CHECK_THROWS_AS(nn::dropout(x, -0.1, rng, true), std::invalid_argument);
  }
  SUBCASE("survivors are scaled by 1/(1-p), expectation is preserved") {
    const double p = 0.3;
    double acc = 0.0;
    int kept = 0;
    const int trials = 100000;
    for (int t = 0; t < trials; ++t) {
      const double y = nn::dropout(vec({1.0}), p, rng, true).values()[0];
      if (y != 0.0) {
        CHECK(y == doctest::Approx(1.0 / (1.0 - p)).epsilon(1e-12));
        ++kept;
      }
      acc += y;
    }
    CHECK(acc / trials == doctest::Approx(1.0).epsilon(0.02));
    CHECK(static_cast<double>(kept) / trials == doctest::Approx(1.0 - p).epsilon(0.02));
  }
  SUBCASE("backward routes gradients through the mask") {
    Tensor g = vec({1.0, -2.0, 3.0, 0.5}, true);
    const Tensor y = nn::dropout(g, 0.5, rng, true);
    nn::sum(y).backward();
    for (std::size_t i = 0; i < 4; ++i) {
      const double expected = y.values()[i] / g.values()[i];  // 0 or 1/(1-p)
      CHECK(g.grad()[i] == doctest::Approx(expected).epsilon(1e-12));
    }
  }
}

// ---------------------------------------------------------------------------
// LSTM cell
// ---------------------------------------------------------------------------

namespace {

struct LstmOracleOut {
  std::vector<double> h, c;
};

// Scalar re-implementation of one step, independent of the tensor graph.
LstmOracleOut lstm_oracle(const nn::LstmParams& p, const std::vector<double>& x,
                          const std::vector<double>& h0, const std::vector<double>& c0,
                          nn::Activation act) {
  const int H = p.hidden_size, I = p.input_size;
  std::vector<double> hx(h0);
  hx.insert(hx.end(), x.begin(), x.end());
  const auto gate = [&](const Tensor& w, const Tensor& b, int r) {
    double s = b.values()[static_cast<std::size_t>(r)];
    for (int j = 0; j < H + I; ++j) {
      s += w.values()[static_cast<std::size_t>(r * (H + I) + j)] * hx[static_cast<std::size_t>(j)];
    }
    return s;
  };
  const auto f_act = [&](double v) {
    return act == nn::Activation::kTanh ? std::tanh(v) : std::max(0.0, v);
  };
  LstmOracleOut out;
  out.h.resize(static_cast<std::size_t>(H));
  out.c.resize(static_cast<std::size_t>(H));
  for (int r = 0; r < H; ++r) {
    const double i = sig(gate(p.w_i, p.b_i, r));
    const double f = sig(gate(p.w_f, p.b_f, r));
    const double o = sig(gate(p.w_o, p.b_o, r));
    const double g = f_act(gate(p.w_c, p.b_c, r));
    out.c[static_cast<std::size_t>(r)] = f * c0[static_cast<std::size_t>(r)] + i * g;
    out.h[static_cast<std::size_t>(r)] = o * f_act(out.c[static_cast<std::size_t>(r)]);
  }
  return out;
}

}  // namespace

TEST_CASE("lstm initialization invariants") {
  Rng rng(11);
  const nn::LstmParams p = nn::make_lstm(5, 4, rng);
  CHECK(p.w_i.shape() == std::vector<int>{4, 9});
  CHECK(p.b_c.shape() == std::vector<int>{4});
  CHECK(p.parameters().size() == 8);
  for (double v : p.b_f.values()) CHECK(v == 1.0);
  for (double v : p.b_i.values()) CHECK(v == 0.0);

  // The recurrent block (first hidden columns of each gate) is orthonormal.
  for (const Tensor& w : {p.w_i, p.w_f, p.w_o, p.w_c}) {
    for (int c1 = 0; c1 < 4; ++c1) {
      for (int c2 = 0; c2 < 4; ++c2) {
        double d = 0.0;
        for (int r = 0; r < 4; ++r) {
          d += w.values()[static_cast<std::size_t>(r * 9 + c1)] *
               w.values()[static_cast<std::size_t>(r * 9 + c2)];
        }
        CHECK(std::abs(d - (c1 == c2 ? 1.0 : 0.0)) < 1e-9);
      }
    }
  }
  CHECK_THROWS_AS(nn::make_lstm(0, 3, rng), std::invalid_argument);
}

TEST_CASE("lstm step matches a scalar oracle") {
  Rng rng(21);
  nn::LstmParams p = nn::make_lstm(3, 2, rng);
  const std::vector<double> x = {0.7, -1.1, 0.4};
  const std::vector<double> h0 = {0.3, -0.1};
  const std::vector<double> c0 = {0.2, 0.5};
  const nn::LstmState prev = {vec(h0), vec(c0)};

  for (const nn::Activation act : {nn::Activation::kTanh, nn::Activation::kRelu}) {
    const nn::LstmState next = nn::lstm_step(p, vec(x), prev, act);
    const LstmOracleOut want = lstm_oracle(p, x, h0, c0, act);
    for (std::size_t i = 0; i < 2; ++i) {
      CHECK(next.c.values()[i] == doctest::Approx(want.c[i]).epsilon(1e-12));
      CHECK(next.h.values()[i] == doctest::Approx(want.h[i]).epsilon(1e-12));
    }
  }
  CHECK_THROWS_AS(nn::lstm_step(p, vec({1.0}), prev, nn::Activation::kTanh),
                  std::invalid_argument);
}

TEST_CASE("saturated gates hold the cell state bit-exactly") {
  Rng rng(3);
  nn::LstmParams p = nn::make_lstm(2, 3, rng);
  // Forget-gate bias +1000 saturates f to exactly 1, input-gate bias -1000
  // pins i to exactly 0; the carousel then carries c through unchanged.
  for (double& v : p.w_f.leaf_values()) v = 0.0;
  for (double& v : p.w_i.leaf_values()) v = 0.0;
  for (double& v : p.b_f.leaf_values()) v = 1000.0;
  for (double& v : p.b_i.leaf_values()) v = -1000.0;

  nn::LstmState state = {vec({0.25, -0.5, 0.75}), vec({0.125, -1.5, 2.25})};
  for (int t = 0; t < 4; ++t) {
    state = nn::lstm_step(p, vec({1.0, -1.0}), state, nn::Activation::kTanh);
    CHECK(state.c.values() == std::vector<double>{0.125, -1.5, 2.25});
  }
}

TEST_CASE("lstm gradients pass central differences") {
  Rng rng(31);
  for (const nn::Activation act : {nn::Activation::kTanh, nn::Activation::kRelu}) {
    CAPTURE(static_cast<int>(act));
    nn::LstmParams p = nn::make_lstm(3, 2, rng);
    Tensor x0 = vec({0.5, -0.3, 0.8}, true);
    Tensor x1 = vec({-0.2, 0.9, 0.1}, true);
    std::vector<Tensor> params = p.parameters();
    params.push_back(x0);
    params.push_back(x1);
    const auto loss = [&] {
      nn::LstmState s = nn::lstm_initial_state(2);
      s = nn::lstm_step(p, x0, s, act);
      s = nn::lstm_step(p, x1, s, act);
      return nn::mse_loss(s.h, std::vector<double>{0.2, -0.4});
    };
    CHECK(nn::grad_check(loss, params).max_rel_error < 1e-4);
  }
}

// ---------------------------------------------------------------------------
// Attention
// ---------------------------------------------------------------------------

TEST_CASE("attention weights are a softmax over the given steps only") {
  const Tensor w = vec({0.0, 0.0});
  const std::vector<Tensor> steps = {vec({1.0, 0.0}), vec({0.0, 1.0})};
  const std::vector<Tensor> out = nn::attention_reweight(w, steps);
  REQUIRE(out.size() == 2);
  // Zero score vector: both steps weighted 0.5.
  CHECK(out[0].values() == std::vector<double>{0.5, 0.0});
  CHECK(out[1].values() == std::vector<double>{0.0, 0.5});

  // A strongly aligned score vector concentrates the mass.
  const std::vector<Tensor> hot = nn::attention_reweight(vec({50.0, 0.0}), steps);
  CHECK(hot[0].values()[0] == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(hot[1].values()[1] == doctest::Approx(0.0).epsilon(1e-12));

  CHECK_THROWS_AS(nn::attention_reweight(w, {}), std::invalid_argument);
}

TEST_CASE("steps left out of attention cannot influence the result") {
  const Tensor w = vec({0.3, -0.8, 0.5});
  const Tensor a = vec({0.2, 0.7, -0.1});
  const Tensor b = vec({-0.5, 0.1, 0.9});
  const std::vector<Tensor> two = nn::attention_reweight(w, std::array{a, b});

  // The same two steps plus a wild third one: dropping the third from the
  // call is the masking mechanism, so the pair's weights must change only
  // through the softmax denominator, never through the padded content.
  const Tensor pad = vec({1e6, -1e6, 1e6});
  const std::vector<Tensor> three = nn::attention_reweight(w, std::array{a, b, pad});
  CHECK(three.size() == 3);

  // Recover the weights: out_j = weight_j * x_j.
  const double w2a = two[0].values()[0] / a.values()[0];
  const double w2b = two[1].values()[0] / b.values()[0];
  CHECK(w2a + w2b == doctest::Approx(1.0).epsilon(1e-12));

  // Exclusion really is total: re-running with the pair gives identical
  // outputs no matter what the padding step contained.
  const std::vector<Tensor> again = nn::attention_reweight(w, std::array{a, b});
  CHECK(again[0].values() == two[0].values());
  CHECK(again[1].values() == two[1].values());
}

TEST_CASE("attention gradients pass central differences") {
  Rng rng(51);
  Tensor w = vec({0.4, -0.6}, true);
  Tensor a = vec({0.3, 0.9}, true);
  Tensor b = vec({-0.7, 0.2}, true);
  std::vector<Tensor> params = {w, a, b};
  const auto loss = [&] {
    const std::vector<Tensor> out = nn::attention_reweight(w, std::array{a, b});
    return nn::mse_loss(nn::add(out[0], out[1]), std::vector<double>{0.1, 0.4});
  };
  CHECK(nn::grad_check(loss, params).max_rel_error < 1e-4);
}

// ---------------------------------------------------------------------------
// Optimizers and clipping
// ---------------------------------------------------------------------------

TEST_CASE("gradient norm and global clipping") {
  Tensor a = vec({3.0}, true);
  Tensor b = vec({4.0}, true);
  a.mutable_grad()[0] = 3.0;
  b.mutable_grad()[0] = 4.0;
  std::vector<Tensor> params = {a, b};
  CHECK(nn::global_grad_norm(params) == doctest::Approx(5.0).epsilon(1e-15));

  CHECK(nn::clip_global_norm(params, 1.0) == doctest::Approx(5.0).epsilon(1e-15));
  CHECK(a.grad()[0] == doctest::Approx(0.6).epsilon(1e-15));
  CHECK(b.grad()[0] == doctest::Approx(0.8).epsilon(1e-15));

  // Below the ceiling nothing changes.
  CHECK(nn::clip_global_norm(params, 10.0) == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(a.grad()[0] == doctest::Approx(0.6).epsilon(1e-15));

  CHECK_THROWS_AS(nn::clip_global_norm(params, 0.0), std::invalid_argument);
}

TEST_CASE("adam follows the bias-corrected reference update") {
  Tensor p = vec({1.0, -2.0}, true);
  nn::Adam opt({p}, 0.1);

  // Reference state mirrored by hand.
  std::vector<double> m(2, 0.0), v(2, 0.0), ref = {1.0, -2.0};
  const std::vector<std::vector<double>> grads = {{1.0, -0.5}, {0.2, 0.8}, {-1.5, 0.1}};
  for (std::size_t t = 0; t < grads.size(); ++t) {
    opt.zero_grad();
    p.mutable_grad() = grads[t];
    opt.step();
    const double bc1 = 1.0 - std::pow(0.9, static_cast<double>(t + 1));
    const double bc2 = 1.0 - std::pow(0.999, static_cast<double>(t + 1));
    for (std::size_t i = 0; i < 2; ++i) {
      m[i] = 0.9 * m[i] + 0.1 * grads[t][i];
      v[i] = 0.999 * v[i] + 0.001 * grads[t][i] * grads[t][i];
      ref[i] -= 0.1 * (m[i] / bc1) / (std::sqrt(v[i] / bc2) + 1e-8);
      CHECK(p.values()[i] == doctest::Approx(ref[i]).epsilon(1e-14));
    }
  }
  CHECK_THROWS_AS(nn::Adam({vec({1.0})}, 0.1), std::invalid_argument);
}

TEST_CASE("adam minimizes a quadratic") {
  Tensor w = vec({-4.0}, true);
  nn::Adam opt({w}, 0.1);
  for (int i = 0; i < 500; ++i) {
    opt.zero_grad();
    nn::mse_loss(w, std::vector<double>{3.0}).backward();
    opt.step();
  }
  CHECK(w.values()[0] == doctest::Approx(3.0).epsilon(1e-3));
}

TEST_CASE("sgd momentum accumulates velocity") {
  Tensor p = vec({0.0}, true);
  nn::SgdMomentum opt({p}, 0.1, 0.9);
  for (int i = 0; i < 3; ++i) {
    opt.zero_grad();
    p.mutable_grad()[0] = 1.0;
    opt.step();
  }
  // v: 1, 1.9, 2.71; w = -0.1 * (1 + 1.9 + 2.71)
  CHECK(p.values()[0] == doctest::Approx(-0.561).epsilon(1e-14));
}

// ---------------------------------------------------------------------------
// End to end
// ---------------------------------------------------------------------------

TEST_CASE("tiny recurrent model with attention passes a full gradient check") {
  Rng rng(61);
  for (const nn::Activation act : {nn::Activation::kTanh, nn::Activation::kRelu}) {
    CAPTURE(static_cast<int>(act));
    nn::LstmParams cell = nn::make_lstm(4, 3, rng);
    Tensor att = nn::uniform_init({4}, 0.5, rng);
    Tensor head = nn::glorot_uniform(2, 3, rng);
    Tensor bias = Tensor::zeros({2}, true);
    std::vector<Tensor> inputs;
    for (int t = 0; t < 3; ++t) {
      std::vector<double> v(4);
      for (double& x : v) x = rng.uniform(-0.9, 0.9);
      inputs.push_back(Tensor::from_values({4}, std::move(v), true));
    }

    std::vector<Tensor> params = cell.parameters();
    params.insert(params.end(), {att, head, bias});
    params.insert(params.end(), inputs.begin(), inputs.end());

    const auto loss = [&] {
      const std::vector<Tensor> steps = nn::attention_reweight(att, inputs);
      nn::LstmState s = nn::lstm_initial_state(3);
      for (const Tensor& x : steps) s = nn::lstm_step(cell, x, s, act);
      const Tensor out = nn::add(nn::matvec(head, s.h), bias);
      return nn::mse_loss(out, std::vector<double>{0.25, -0.5});
    };
    const nn::GradCheckResult r = nn::grad_check(loss, params);
    CHECK(r.max_rel_error < 1e-3);
    CHECK(r.n_checked > 80);
  }
}

TEST_CASE("a few optimization steps reduce the end-to-end loss") {
  Rng rng(71);
  nn::LstmParams cell = nn::make_lstm(3, 4, rng);
  Tensor head = nn::glorot_uniform(2, 4, rng);
  std::vector<Tensor> params = cell.parameters();
  params.push_back(head);
  nn::Adam opt(params, 0.02);

  const std::vector<std::vector<double>> xs = {{0.1, -0.4, 0.9}, {0.7, 0.2, -0.3}};
  const std::vector<double> target = {0.6, -0.2};
  const auto loss_value = [&] {
    nn::LstmState s = nn::lstm_initial_state(4);
    for (const auto& x : xs) {
      s = nn::lstm_step(cell, vec(std::vector<double>(x)), s, nn::Activation::kTanh);
    }
    return nn::mse_loss(nn::matvec(head, s.h), target);
  };

  const double before = loss_value().item();
  for (int i = 0; i < 60; ++i) {
    opt.zero_grad();
    loss_value().backward();
    opt.step();
  }
  const double after = loss_value().item();
  CHECK(after < 0.2 * before);
}
