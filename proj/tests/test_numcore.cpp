#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <set>

#include "ikdrive/rng.hpp"
#include "ikdrive/tape.hpp"
#include "ikdrive/tensor.hpp"

using namespace ikdrive;

TEST_CASE("tensor shape errors carry both shapes") {
  Tensor a({2, 3});
  Tensor b({3, 2});
  try {
    require_same_shape(a, b, "add");
    FAIL("expected ShapeError");
  } catch (const ShapeError& e) {
    std::string msg = e.what();
    CHECK(msg.find("[2,3]") != std::string::npos);
    CHECK(msg.find("[3,2]") != std::string::npos);
  }
}

TEST_CASE("non-finite values trip a numeric error") {
  Tape t;
  Tensor bad({2}, {1.0, INFINITY});
  CHECK_THROWS_AS(t.constant(bad), NumericError);
  Var x = t.input(Tensor({1}, {-1.0}));
  // log of a negative number inside a primitive would be NaN; emulate by scaling
  // with NaN-producing arithmetic through mul of inf inputs is blocked above, so
  // check the guard directly:
  CHECK_THROWS_AS(Tensor({1}, {NAN}).check_finite("x"), NumericError);
  (void)x;
}

TEST_CASE("rng determinism and split independence") {
  Rng a(42), b(42);
  for (int i = 0; i < 100; ++i) CHECK(a.next_u64() == b.next_u64());
  Rng c(42);
  Rng s0 = c.split(0), s1 = c.split(1);
  int agree = 0;
  for (int i = 0; i < 64; ++i) agree += (s0.next_u64() == s1.next_u64());
  CHECK(agree == 0);
  // splitting does not disturb the parent
  Rng d(7);
  (void)d.split(3);
  Rng e(7);
  CHECK(d.next_u64() == e.next_u64());
}

TEST_CASE("rng uniform range and integer bound") {
  Rng r(1);
  for (int i = 0; i < 1000; ++i) {
    double u = r.next_uniform();
    CHECK(u > 0.0);
    CHECK(u < 1.0);
    int64_t k = r.next_below(7);
    CHECK(k >= 0);
    CHECK(k < 7);
  }
}

TEST_CASE("rng gaussian moments") {
  Rng r(2024);
  const int n = 200000;
  double s = 0.0, s2 = 0.0;
  for (int i = 0; i < n; ++i) {
    double g = r.next_gaussian();
    s += g;
    s2 += g * g;
  }
  double m = s / n;
  double var = s2 / n - m * m;
  CHECK(std::abs(m) < 0.02);
  CHECK(std::abs(var - 1.0) < 0.02);
}

TEST_CASE("softmax of a constant row is uniform") {
  Tape t;
  Var x = t.constant(Tensor({1, 3}, {0.0, 0.0, 0.0}));
  Var y = softmax(x);
  for (int i = 0; i < 3; ++i) CHECK(t.value(y)[i] == Catch::Approx(1.0 / 3.0).epsilon(1e-12));
}

TEST_CASE("softmax rows sum to one for random inputs") {
  Rng r(5);
  Tape t;
  Var x = t.constant(r.gaussian_tensor({7, 11}, 3.0));
  Var y = softmax(x);
  for (int64_t row = 0; row < 7; ++row) {
    double s = 0.0;
    for (int64_t c = 0; c < 11; ++c) s += t.value(y)[row * 11 + c];
    CHECK(s == Catch::Approx(1.0).epsilon(1e-12));
  }
}

TEST_CASE("matmul against identity and hand case") {
  Tape t;
  Var I = t.constant(Tensor({2, 2}, {1, 0, 0, 1}));
  Var x = t.constant(Tensor({2, 3}, {1, 2, 3, 4, 5, 6}));
  Var y = matmul(I, x);
  for (int i = 0; i < 6; ++i) CHECK(t.value(y)[i] == t.value(x)[i]);
  Var a = t.constant(Tensor({1, 2}, {2, 3}));
  Var b = t.constant(Tensor({2, 1}, {5, 7}));
  CHECK(t.value(matmul(a, b))[0] == 31.0);
}

TEST_CASE("layer_norm normalizes row moments") {
  Rng r(9);
  Tape t;
  Var x = t.constant(r.gaussian_tensor({4, 16}, 2.5));
  Var y = layer_norm(x);
  for (int64_t row = 0; row < 4; ++row) {
    double mu = 0.0, var = 0.0;
    for (int64_t c = 0; c < 16; ++c) mu += t.value(y)[row * 16 + c];
    mu /= 16;
    for (int64_t c = 0; c < 16; ++c) {
      double d = t.value(y)[row * 16 + c] - mu;
      var += d * d;
    }
    var /= 16;
    CHECK(std::abs(mu) < 1e-12);
    CHECK(var == Catch::Approx(1.0).epsilon(1e-4));
  }
}

TEST_CASE("simple analytic gradients") {
  SECTION("sum_sq") {
    Tape t;
    Var x = t.input(Tensor({2}, {1.0, 2.0}));
    t.backward(sum_sq(x));
    CHECK(t.grad(x)[0] == 2.0);
    CHECK(t.grad(x)[1] == 4.0);
  }
  SECTION("mean of matmul has outer-product structure") {
    Tape t;
    Tensor wv({2, 2}, {1, 2, 3, 4});
    Tensor xv({2, 2}, {5, 6, 7, 8});
    Var w = t.input(wv);
    Var x = t.constant(xv);
    t.backward(mean(matmul(w, x)));
    // d mean(WX) / dW_ij = (1/4) * sum_j' X[j,j'] summed over the row j of X
    for (int i = 0; i < 2; ++i)
      for (int j = 0; j < 2; ++j) {
        double expect = (xv[j * 2] + xv[j * 2 + 1]) / 4.0;
        CHECK(t.grad(w)[i * 2 + j] == Catch::Approx(expect).epsilon(1e-12));
      }
  }
  SECTION("constant loss leaves zero grads") {
    Tape t;
    Var x = t.input(Tensor({3}, {1, 2, 3}));
    Var c = t.constant(Tensor::scalar(5.0));
    t.backward(mean(c));
    CHECK(t.grad(x)[0] == 0.0);
  }
}

static Var composite_net(Tape& t, const std::vector<Var>& p) {
  // Touches every differentiable primitive at least once.
  Var x = p[0];                                    // [4, 6]
  Var w = p[1];                                    // [6, 8]
  Var bias = p[2];                                 // [8]
  Var h = add(matmul(x, w), bias);                 // [4, 8]
  Var g = gelu(h);
  Var n = layer_norm(g);
  Var attn = softmax(scale(matmul(n, transpose(n)), 0.5));  // [4, 4]
  Var mixed = matmul(attn, n);                              // [4, 8]
  Var left = slice(mixed, 1, 0, 4);
  Var right = slice(mixed, 1, 4, 4);
  Var cat = concat({left, mul(right, right)}, 1);  // [4, 8]
  Var r = relu(reshape(cat, {8, 4}));
  Var emb = sinusoid_embed(t, 3, 4);
  Var shifted = add(r, reshape(emb, {4}));
  return add(mean(shifted), scale(sum_sq(sub(shifted, r)), 0.01));
}

TEST_CASE("grad_check on a composite of all primitives") {
  Rng r(77);
  for (int rep = 0; rep < 3; ++rep) {
    std::vector<Tensor> params = {r.gaussian_tensor({4, 6}, 0.8), r.gaussian_tensor({6, 8}, 0.5),
                                  r.gaussian_tensor({8}, 0.3)};
    auto rep_out = grad_check(composite_net, params, r, 1e-5, 6);
    CAPTURE(rep, rep_out.max_rel_err, rep_out.max_abs_err);
    CHECK(rep_out.max_rel_err < 1e-5);
  }
}

TEST_CASE("grad_check tolerates exactly-zero gradients") {
  auto fn = [](Tape& t, const std::vector<Var>& p) {
    (void)p;
    return mean(t.constant(Tensor::scalar(1.0)));
  };
  Rng r(1);
  std::vector<Tensor> params = {Tensor({3}, {1, 2, 3})};
  auto rep = grad_check(fn, params, r);
  CHECK(rep.max_rel_err == 0.0);
  CHECK(rep.max_abs_err < 1e-8);
}

TEST_CASE("broadcast add and mul reduce gradients over the leading axis") {
  auto fn = [](Tape& t, const std::vector<Var>& p) {
    (void)t;
    return mean(mul(add(p[0], p[1]), p[2]));
  };
  Rng r(3);
  std::vector<Tensor> params = {r.gaussian_tensor({5, 3}), r.gaussian_tensor({3}), r.gaussian_tensor({3})};
  auto rep = grad_check(fn, params, r, 1e-5, 12);
  CHECK(rep.max_rel_err < 1e-6);
}

TEST_CASE("primitive evaluation is pure and repeatable") {
  Rng r(11);
  Tensor xv = r.gaussian_tensor({6, 6});
  auto run = [&]() {
    Tape t;
    Var x = t.constant(xv);
    Var y = matmul(softmax(x), transpose(gelu(x)));
    return t.value(y).vec();
  };
  auto a = run(), b = run();
  CHECK(a == b);
}

TEST_CASE("shape violations in primitives report both shapes") {
  Tape t;
  Var a = t.constant(Tensor({2, 3}));
  Var b = t.constant(Tensor({4, 5}));
  try {
    (void)matmul(a, b);
    FAIL("expected ShapeError");
  } catch (const ShapeError& e) {
    std::string msg = e.what();
    CHECK(msg.find("[2,3]") != std::string::npos);
    CHECK(msg.find("[4,5]") != std::string::npos);
  }
  CHECK_THROWS_AS(add(a, b), ShapeError);
  CHECK_THROWS_AS(slice(a, 1, 2, 5), ShapeError);
}
