#include "doctest.h"

#include <cmath>

#include "ggsd/rng.hpp"
#include "ggsd/tensor.hpp"

using namespace ggsd;

namespace {

Tensor random_tensor(std::vector<std::size_t> shape, Rng &rng) {
  Tensor t(std::move(shape));
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = rng.normal();
  return t;
}

}  // namespace

TEST_CASE("matmul identity and hand arithmetic") {
  Tape t;
  Tensor id3({3, 3});
  for (int i = 0; i < 3; ++i) id3.at(i, i) = 1.0;
  Rng rng(1);
  Tensor m = random_tensor({3, 3}, rng);
  Var r = matmul(t.leaf(id3), t.leaf(m));
  for (std::size_t i = 0; i < 9; ++i) CHECK(t.value(r)[i] == doctest::Approx(m[i]).epsilon(1e-14));

  Var s = matmul(t.leaf(Tensor({1, 2}, {1, 2})), t.leaf(Tensor({2, 1}, {3, 4})));
  CHECK(t.value(s)[0] == doctest::Approx(11.0));
}

TEST_CASE("matmul rejects mismatched inner dimensions") {
  Tape t;
  Var a = t.leaf(Tensor({2, 3}));
  Var b = t.leaf(Tensor({4, 2}));
  CHECK_THROWS_AS(matmul(a, b), ContractError);
}

TEST_CASE("matmul gradients match finite differences") {
  Rng rng(7);
  ParamStore ps;
  ps.add("a", random_tensor({4, 5}, rng));
  ps.add("b", random_tensor({5, 3}, rng));
  double err = grad_check(
      [&](Tape &t) {
        Var a = t.param_leaf(ps, 0);
        Var b = t.param_leaf(ps, 1);
        // nonlinearity so gradients are input dependent
        return mean(silu(matmul(a, b)));
      },
      ps, 1e-5);
  CHECK(err < 1e-6);
}

TEST_CASE("attention with a single key copies its value row") {
  Rng rng(3);
  Tape t;
  Var q = t.leaf(random_tensor({5, 8}, rng));
  Var k = t.leaf(random_tensor({1, 8}, rng));
  Tensor vrow = random_tensor({1, 8}, rng);
  Var v = t.leaf(vrow);
  Var o = softmax_attention(q, k, v, 2);
  for (std::size_t i = 0; i < 5; ++i)
    for (std::size_t c = 0; c < 8; ++c)
      CHECK(t.value(o).at(i, c) == doctest::Approx(vrow.at(0, c)).epsilon(1e-14));
}

TEST_CASE("attention with zero inputs averages values") {
  Tape t;
  Var q = t.leaf(Tensor({3, 4}));
  Var k = t.leaf(Tensor({6, 4}));
  Var v = t.leaf(Tensor({6, 4}));
  Var o = softmax_attention(q, k, v, 2);
  for (std::size_t i = 0; i < t.value(o).size(); ++i) CHECK(t.value(o)[i] == 0.0);
}

TEST_CASE("attention rejects width not divisible by heads") {
  Tape t;
  Var q = t.leaf(Tensor({3, 7}));
  CHECK_THROWS_AS(softmax_attention(q, q, q, 2), ConfigError);
}

TEST_CASE("attention gradients match finite differences") {
  Rng rng(11);
  ParamStore ps;
  ps.add("q", random_tensor({3, 8}, rng));
  ps.add("k", random_tensor({4, 8}, rng));
  ps.add("v", random_tensor({4, 8}, rng));
  double err = grad_check(
      [&](Tape &t) {
        Var o = softmax_attention(t.param_leaf(ps, 0), t.param_leaf(ps, 1),
                                  t.param_leaf(ps, 2), 2);
        return mean(mul(o, o));
      },
      ps, 1e-5);
  CHECK(err < 1e-6);
}

TEST_CASE("grad_check on x squared at x=3") {
  ParamStore ps;
  ps.add("x", Tensor({1}, {3.0}));
  double err = grad_check(
      [&](Tape &t) {
        Var x = t.param_leaf(ps, 0);
        return sum(mul(x, x));
      },
      ps, 1e-5);
  CHECK(err < 1e-9);
}

TEST_CASE("grad_check flags non-finite losses") {
  ParamStore ps;
  ps.add("x", Tensor({1}, {-1.0}));
  CHECK_THROWS_AS(grad_check(
                      [&](Tape &t) {
                        Var x = t.param_leaf(ps, 0);
                        Tensor lg = t.value(x);
                        lg[0] = std::log(lg[0]);  // NaN for negative input
                        return sum(t.leaf(lg));
                      },
                      ps, 1e-5),
                  NumericError);
}

TEST_CASE("elementwise and reduction gradients") {
  Rng rng(23);
  ParamStore ps;
  ps.add("x", random_tensor({4, 6}, rng));
  ps.add("g", random_tensor({6}, rng));
  ps.add("b", random_tensor({6}, rng));
  double err = grad_check(
      [&](Tape &t) {
        Var x = t.param_leaf(ps, 0);
        Var g = t.param_leaf(ps, 1);
        Var b = t.param_leaf(ps, 2);
        Var y = layer_norm(x, g, b);
        y = silu(add_rowvec(mul_rowvec(y, g), b));
        Var z = concat_cols(y, sigmoid(y));
        z = slice_cols(z, 2, 9);
        return add(mean(mul(z, z)), sum(scale(rows_mean(z), 0.5)));
      },
      ps, 1e-5);
  CHECK(err < 1e-6);
}

TEST_CASE("conv1d gradients match finite differences") {
  Rng rng(5);
  ParamStore ps;
  ps.add("x", random_tensor({7, 3}, rng));
  ps.add("w", random_tensor({4, 3, 3}, rng));
  ps.add("b", random_tensor({4}, rng));
  double err = grad_check(
      [&](Tape &t) {
        Var y = conv1d(t.param_leaf(ps, 0), t.param_leaf(ps, 1), t.param_leaf(ps, 2));
        return mean(mul(y, y));
      },
      ps, 1e-5);
  CHECK(err < 1e-6);
}

TEST_CASE("ppgn_matmul matches per-channel matrix product and its gradients") {
  Rng rng(9);
  Tensor a = random_tensor({3, 3, 2}, rng);
  Tensor b = random_tensor({3, 3, 2}, rng);
  Tape t;
  Var o = ppgn_matmul(t.leaf(a), t.leaf(b));
  for (std::size_t ch = 0; ch < 2; ++ch)
    for (std::size_t i = 0; i < 3; ++i)
      for (std::size_t j = 0; j < 3; ++j) {
        double want = 0.0;
        for (std::size_t k = 0; k < 3; ++k) want += a.at(i, k, ch) * b.at(k, j, ch);
        CHECK(t.value(o).at(i, j, ch) == doctest::Approx(want).epsilon(1e-12));
      }

  ParamStore ps;
  ps.add("a", a);
  ps.add("b", b);
  double err = grad_check(
      [&](Tape &tt) {
        Var y = ppgn_matmul(tt.param_leaf(ps, 0), tt.param_leaf(ps, 1));
        return mean(mul(y, y));
      },
      ps, 1e-5);
  CHECK(err < 1e-6);
}

TEST_CASE("bce_with_logits gradients and value") {
  Rng rng(31);
  ParamStore ps;
  ps.add("z", random_tensor({3, 3}, rng));
  Tensor y({3, 3});
  Tensor w = Tensor::full({3, 3}, 1.0);
  for (std::size_t i = 0; i < 9; ++i) y[i] = (i % 2 == 0) ? 1.0 : 0.0;
  double err = grad_check(
      [&](Tape &t) { return bce_with_logits_mean(t.param_leaf(ps, 0), y, w); }, ps, 1e-5);
  CHECK(err < 1e-6);

  // z=0 everywhere gives -log(0.5) per entry
  Tape t;
  Var z = t.leaf(Tensor({2, 2}));
  Var l = bce_with_logits_mean(z, Tensor({2, 2}, {1, 0, 1, 0}), Tensor::full({2, 2}, 1.0));
  CHECK(t.value(l)[0] == doctest::Approx(std::log(2.0)));
}

TEST_CASE("adam drives a quadratic to its minimum deterministically") {
  auto run = [] {
    ParamStore ps;
    ps.add("x", Tensor({2}, {5.0, -3.0}));
    Adam opt(AdamConfig{.lr = 0.1});
    for (int i = 0; i < 400; ++i) {
      Tape t;
      Var x = t.param_leaf(ps, 0);
      Var l = sum(mul(x, x));
      t.backward(l);
      opt.step(ps);
    }
    return std::pair(ps[0].value[0], ps[0].value[1]);
  };
  auto [x0, x1] = run();
  CHECK(std::abs(x0) < 1e-3);
  CHECK(std::abs(x1) < 1e-3);
  auto [y0, y1] = run();
  CHECK(x0 == y0);  // bit-identical reruns
  CHECK(x1 == y1);
}

TEST_CASE("adam rejects updates that produce non-finite parameters") {
  ParamStore ps;
  ps.add("x", Tensor({1}, {1.0}));
  ps[0].grad[0] = std::numeric_limits<double>::quiet_NaN();
  Adam opt;
  CHECK_THROWS_AS(opt.step(ps), NumericError);
}

TEST_CASE("parameter names must be unique") {
  ParamStore ps;
  ps.add("w", Tensor({1}));
  CHECK_THROWS_AS(ps.add("w", Tensor({1})), ContractError);
}

TEST_CASE("backward_into collects the same gradients as backward") {
  Rng rng(17);
  ParamStore ps;
  ps.add("a", random_tensor({3, 3}, rng));
  auto loss_on = [&](Tape &t) {
    Var a = t.param_leaf(ps, 0);
    return mean(silu(matmul(a, a)));
  };
  ps.zero_grad();
  {
    Tape t;
    t.backward(loss_on(t));
  }
  Tensor direct = ps[0].grad;
  ps.zero_grad();
  std::vector<Tensor> buf(1);
  {
    Tape t;
    t.backward_into(loss_on(t), buf);
  }
  for (std::size_t i = 0; i < direct.size(); ++i) CHECK(buf[0][i] == direct[i]);
}
