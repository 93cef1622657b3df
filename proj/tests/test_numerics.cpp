#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstring>
#include <vector>

#include "equiada/nn.hpp"
#include "equiada/rng.hpp"
#include "equiada/tensor.hpp"

using namespace equiada;

namespace {

// Independent matrix oracle: hand-rolled loops, no Eigen products.
Mat naive_linear(const Mat& x, const Mat& w, const Mat& b, bool act) {
  Mat out = Mat::Zero(x.rows(), w.cols());
  for (long r = 0; r < x.rows(); ++r) {
    for (long c = 0; c < w.cols(); ++c) {
      double acc = b(0, c);
      for (long k = 0; k < x.cols(); ++k) acc += x(r, k) * w(k, c);
      out(r, c) = act ? acc / (1.0 + std::exp(-acc)) : acc;
    }
  }
  return out;
}

}  // namespace

TEST_CASE("mlp_forward: all-zero weights return the bias") {
  Mat w = Mat::Zero(4, 3);
  Mat b(1, 3);
  b << 1.5, -2.0, 0.25;
  Mat x = Rng(7).normal_mat(5, 4);
  Mat out = mlp_forward({w}, {b}, x, Activation::kSilu);
  for (long r = 0; r < out.rows(); ++r) {
    CHECK((out.row(r) - b.row(0)).cwiseAbs().maxCoeff() == 0.0);
  }
}

TEST_CASE("mlp_forward: identity layer with identity activation") {
  Mat w = Mat::Identity(4, 4);
  Mat b = Mat::Zero(1, 4);
  Mat v = Rng(8).normal_mat(1, 4);
  Mat out = mlp_forward({w}, {b}, v, Activation::kIdentity);
  CHECK((out - v).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("mlp_forward: random 2-layer net matches the naive matrix oracle") {
  Rng rng(11);
  Mat w0 = rng.normal_mat(6, 5), b0 = rng.normal_mat(1, 5);
  Mat w1 = rng.normal_mat(5, 2), b1 = rng.normal_mat(1, 2);
  Mat x = rng.normal_mat(7, 6);
  Mat got = mlp_forward({w0, w1}, {b0, b1}, x, Activation::kSilu);
  Mat expect = naive_linear(naive_linear(x, w0, b0, true), w1, b1, false);
  CHECK((got - expect).cwiseAbs().maxCoeff() <= 1e-12);
}

TEST_CASE("mlp_forward: dimension mismatch names the layer") {
  Mat w0 = Mat::Zero(3, 4), b0 = Mat::Zero(1, 4);
  Mat w1 = Mat::Zero(5, 2), b1 = Mat::Zero(1, 2);  // expects 5 inputs, gets 4
  Mat x = Mat::Zero(1, 3);
  CHECK_THROWS_WITH_AS(mlp_forward({w0, w1}, {b0, b1}, x, Activation::kSilu),
                       doctest::Contains("layer 1"), std::invalid_argument);
}

TEST_CASE("backward: d(x^2)/dx at 3 is 6") {
  Tape tape;
  Value x = tape.param(Mat::Constant(1, 1, 3.0));
  Value y = cmul(x, x);
  tape.backward(y);
  CHECK(tape.gradient(x)(0, 0) == doctest::Approx(6.0).epsilon(1e-14));
}

TEST_CASE("backward: function constant in x gives zero gradient") {
  Tape tape;
  Value x = tape.param(Mat::Constant(1, 1, 2.0));
  Value c = tape.constant(Mat::Constant(1, 1, 5.0));
  Value y = cmul(c, c);
  tape.backward(y);
  CHECK(tape.gradient(x)(0, 0) == 0.0);
}

TEST_CASE("backward: non-scalar root is a contract violation") {
  Tape tape;
  Value x = tape.param(Mat::Ones(2, 2));
  CHECK_THROWS_AS(tape.backward(x), std::invalid_argument);
}

TEST_CASE("backward: random 3-op composite matches central differences") {
  ParamSet params;
  params.add("a", Rng(21).normal_mat(3, 4));
  params.add("b", Rng(22).normal_mat(4, 2));
  params.add("c", Rng(23).normal_mat(3, 2));
  auto loss = [](Tape& tape, Bound& bound) {
    Value y = silu(bound["a"] * bound["b"]) + bound["c"];
    return sum_sq(y);
  };
  CHECK(grad_check(loss, params, 1e-5) <= 1e-6);
}

TEST_CASE("tape ops: gather/scatter/concat gradients match finite differences") {
  ParamSet params;
  Rng rng(31);
  params.add("m", rng.normal_mat(6, 3, 0.5));
  params.add("row", rng.normal_mat(1, 3, 0.5));
  auto loss = [](Tape&, Bound& bound) {
    Value m = bound["m"];
    Value g = gather_rows(m, {0, 2, 2, 5, 1, 3});
    Value sc = scatter_rows(g, {1, 1, 0, 3, 2, 0}, 4);
    Value cc = concat_cols({sc, sigmoid(sc)});
    Value cr = concat_rows(cc, cc);
    Value rs = row_scale(cr, Eigen::VectorXd::LinSpaced(8, 0.5, 2.0));
    Value rv = add_rowvec(rs, concat_cols({bound["row"], bound["row"]}));
    return sum_sq(rv);
  };
  CHECK(grad_check(loss, params, 1e-5) <= 1e-6);
}

TEST_CASE("tape ops: softmax/reshape/broadcast gradients match finite differences") {
  ParamSet params;
  Rng rng(32);
  params.add("m", rng.normal_mat(8, 6, 0.5));
  params.add("s", rng.normal_mat(1, 1, 0.5));
  auto loss = [](Tape&, Bound& bound) {
    Value cm = cmul_col(bound["m"], repeat_row(cell(bound["s"], 0, 0), 8));
    Value soft = softmax_rows(reshape_rowmajor(cm, 6, 8));
    return sum_sq(soft) + sum_sq(mean_rows(soft)) + sum_all(smul(bound["s"], silu(cm)));
  };
  CHECK(grad_check(loss, params, 1e-5) <= 1e-6);
}

TEST_CASE("tape ops: block_matmul/centering gradients match finite differences") {
  ParamSet params;
  Rng rng(33);
  params.add("m", rng.normal_mat(6, 3, 0.5));
  params.add("col", rng.normal_mat(6, 1, 0.5));
  params.add("attn", rng.normal_mat(3, 3, 0.5));
  auto loss = [](Tape&, Bound& bound) {
    Value mix = block_matmul(bound["attn"], bound["m"], 3);
    Value centered = center_rows(mix + cmul_col(bound["m"], bound["col"]));
    return sum_sq(centered) + sum_sq(row_sum_sq(centered));
  };
  CHECK(grad_check(loss, params, 1e-5) <= 1e-6);
}

TEST_CASE("adam: zero gradients leave parameters unchanged") {
  ParamSet params;
  params.add("w", Rng(41).normal_mat(3, 3));
  Mat before = params.at("w");
  AdamState state(AdamConfig{0.01});
  GradMap grads;
  grads["w"] = Mat::Zero(3, 3);
  adam_step(params, grads, state);
  CHECK((params.at("w") - before).cwiseAbs().maxCoeff() == 0.0);
  CHECK(state.step() == 1);
}

TEST_CASE("adam: first step matches the bias-corrected closed form") {
  // Hand oracle: |dp| = lr * |g| / (|g| + eps * sqrt(1-beta2) / (1-beta1)).
  const double g = 0.37;
  const AdamConfig cfg;  // lr = 1e-4 per the hyper-parameter defaults
  CHECK(cfg.lr == 1e-4);
  CHECK(cfg.beta1 == 0.9);
  CHECK(cfg.beta2 == 0.999);
  CHECK(cfg.eps == 1e-8);

  ParamSet params;
  params.add("w", Mat::Constant(1, 1, 1.0));
  AdamState state(cfg);
  GradMap grads;
  grads["w"] = Mat::Constant(1, 1, g);
  adam_step(params, grads, state);

  const double expected_step =
      cfg.lr * g / (g + cfg.eps * std::sqrt(1.0 - cfg.beta2) / (1.0 - cfg.beta1));
  CHECK(params.at("w")(0, 0) == doctest::Approx(1.0 - expected_step).epsilon(1e-15));
}

TEST_CASE("adam: gradient routed to a frozen parameter is rejected") {
  ParamSet params;
  params.add("w", Mat::Ones(2, 2), /*trainable=*/false);
  AdamState state;
  GradMap grads;
  grads["w"] = Mat::Ones(2, 2);
  CHECK_THROWS_AS(adam_step(params, grads, state), std::invalid_argument);
}

TEST_CASE("adam: frozen parameters stay bitwise identical across steps") {
  ParamSet params;
  params.add("frozen", Rng(51).normal_mat(4, 4), /*trainable=*/false);
  params.add("live", Rng(52).normal_mat(4, 4));
  Mat frozen_before = params.at("frozen");
  AdamState state(AdamConfig{0.05});
  Rng rng(53);
  for (int step = 0; step < 25; ++step) {
    GradMap grads;
    grads["live"] = rng.normal_mat(4, 4);
    adam_step(params, grads, state);
  }
  CHECK(std::memcmp(frozen_before.data(), params.at("frozen").data(),
                    sizeof(double) * 16) == 0);
}

TEST_CASE("grad_check: quadratic loss is exact to rounding") {
  ParamSet params;
  params.add("w", Rng(61).normal_mat(3, 2));
  auto loss = [](Tape&, Bound& bound) { return sum_sq(bound["w"]); };
  CHECK(grad_check(loss, params, 1e-5) <= 1e-9);
}

TEST_CASE("grad_check: loss independent of a parameter gives zero error") {
  ParamSet params;
  params.add("used", Mat::Constant(1, 1, 2.0));
  params.add("unused", Mat::Constant(1, 1, 4.0));
  auto loss = [](Tape&, Bound& bound) { return sum_sq(bound["used"]); };
  CHECK(grad_check(loss, params, 1e-5) <= 1e-9);
}

TEST_CASE("frozen parameters receive no gradient entries") {
  ParamSet params;
  params.add("w", Mat::Ones(2, 2));
  params.add("f", Mat::Ones(2, 2), /*trainable=*/false);
  Tape tape;
  Bound bound(tape, params);
  Value y = sum_sq(bound["w"] + bound["f"]);
  tape.backward(y);
  GradMap grads = collect_gradients(bound);
  CHECK(grads.count("w") == 1);
  CHECK(grads.count("f") == 0);
}

TEST_CASE("determinism: identical seeds give bitwise-identical draws") {
  Mat a = Rng(99).normal_mat(8, 8);
  Mat b = Rng(99).normal_mat(8, 8);
  CHECK(std::memcmp(a.data(), b.data(), sizeof(double) * 64) == 0);
}
