#include <doctest.h>

#include <cmath>
#include <cstring>
#include <random>

#include "tail/grad_check.hpp"
#include "tail/tensor.hpp"
#include "helpers.hpp"

using namespace tail;
using tail::test::randn;
using tail::test::uniform;

namespace {

// Weighted sum keeps every coordinate's gradient O(1) for the checks.
ScalarFn weighted(std::function<Tensor(const Tensor&)> op, const Tensor& w) {
  return [op, w](const Tensor& x) { return sum(mul(op(x), w)); };
}

}  // namespace

TEST_CASE("matmul with identity returns the right operand") {
  const Tensor eye = Tensor::from_rows({{1, 0}, {0, 1}});
  const Tensor b = Tensor::from_rows({{7}, {2}});
  const Tensor c = matmul(eye, b);
  CHECK(c.shape() == Shape{2, 1});
  CHECK(c[0] == 7.0);
  CHECK(c[1] == 2.0);
}

TEST_CASE("softmax of equal logits is uniform") {
  const Tensor s = softmax(Tensor::from_vector({0, 0}), 0);
  CHECK(s[0] == 0.5);
  CHECK(s[1] == 0.5);
}

TEST_CASE("gelu fixes zero") { CHECK(gelu(Tensor::from_vector({0.0}))[0] == 0.0); }

TEST_CASE("backward of sum(x*x) is 2x") {
  Tape tape;
  const Tensor x = tape.variable(Tensor::from_vector({3.0}));
  const Gradients g = tape.backward(sum(mul(x, x)));
  REQUIRE(g.of(x));
  CHECK((*g.of(x))[0] == 6.0);
}

TEST_CASE("backward through matmul gives column sums, matching finite differences") {
  const Tensor w = Tensor::from_rows({{1, 2}, {3, 4}});
  Tape tape;
  const Tensor h = tape.variable(Tensor::from_vector({1, 1}));
  const Gradients g = tape.backward(sum(matmul(w, h)));
  const Vec& gh = *g.of(h);
  CHECK(gh[0] == doctest::Approx(4.0));
  CHECK(gh[1] == doctest::Approx(6.0));

  // finite-difference oracle
  auto f = [&](double h0, double h1) { return sum(matmul(w, Tensor::from_vector({h0, h1}))).item(); };
  const double e = 1e-6;
  CHECK((f(1 + e, 1) - f(1 - e, 1)) / (2 * e) == doctest::Approx(gh[0]).epsilon(1e-9));
  CHECK((f(1, 1 + e) - f(1, 1 - e)) / (2 * e) == doctest::Approx(gh[1]).epsilon(1e-9));
}

TEST_CASE("layer_norm of a constant row has a finite gradient") {
  const Tensor gamma = Tensor::from_vector({1.0, 2.0, 0.5});
  const Tensor beta = Tensor::from_vector({0.1, 0.0, -0.3});
  const Tensor w = Tensor::from_vector({0.3, -1.2, 0.7});
  ScalarFn f = [&](const Tensor& x) { return sum(mul(layer_norm(x, gamma, beta), w)); };
  const Tensor x = Tensor::full({3}, 2.5);
  Tape tape;
  const Tensor xv = tape.variable(x);
  const Gradients g = tape.backward(f(xv));
  REQUIRE(g.of(xv));
  CHECK(g.of(xv)->allFinite());
  CHECK(grad_check(f, x, 1e-6) < 1e-5);
}

TEST_CASE("grad_check fixtures") {
  std::mt19937_64 rng(7);
  const Tensor x = randn({5}, rng);
  CHECK(grad_check([](const Tensor& t) { return sum(tail::tanh(t)); }, x, 1e-6) < 1e-7);
  CHECK(grad_check([](const Tensor&) { return Tensor::scalar(3.0); }, x, 1e-6) == 0.0);
  CHECK_THROWS_AS(grad_check([](const Tensor& t) { return t; }, x, 1e-6), ShapeError);
  CHECK_THROWS(grad_check([](const Tensor& t) { return sum(t); }, x, 1e-2));
}

TEST_CASE("backward error paths") {
  Tape tape;
  const Tensor x = tape.variable(Tensor::from_vector({1, 2}));
  CHECK_THROWS_AS(tape.backward(mul(x, x)), AutogradError);
  CHECK_THROWS_AS(tape.backward(Tensor::scalar(1.0)), AutogradError);
  const Tensor loss = sum(x);
  tape.backward(loss);
  CHECK_THROWS_AS(tape.backward(loss), AutogradError);
  tape.reset();
  const Tensor y = tape.variable(Tensor::from_vector({1}));
  CHECK_NOTHROW(tape.backward(sum(y)));
}

TEST_CASE("shape errors name the op and shapes") {
  const Tensor a = Tensor::from_rows({{1, 2, 3}});
  const Tensor b = Tensor::from_rows({{1, 2}});
  try {
    (void)add(a, b);
    FAIL("expected ShapeError");
  } catch (const ShapeError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("add") != std::string::npos);
    CHECK(msg.find("[1,3]") != std::string::npos);
    CHECK(msg.find("[1,2]") != std::string::npos);
  }
  CHECK_THROWS_AS(matmul(a, a), ShapeError);
  CHECK_THROWS_AS(op_kind_from_name("convolve"), std::invalid_argument);
  CHECK(op_kind_from_name("layer_norm") == OpKind::layer_norm);
}

TEST_CASE("forward_op dispatches by kind") {
  const Tensor a = Tensor::from_rows({{1, 2}, {3, 4}});
  OpAttrs at;
  at.value = 2.0;
  const Tensor s = forward_op(OpKind::scale, std::array{a}, at);
  CHECK(s[3] == 8.0);
  at.axis = 1;
  const Tensor m = forward_op(OpKind::sum, std::array{a}, at);
  CHECK(m.shape() == Shape{2});
  CHECK(m[1] == 7.0);
}

TEST_CASE("every op passes grad_check over 20 seeds") {
  const double tol = 1e-6;
  double worst = 0.0;
  auto track = [&](double e) { worst = std::max(worst, e); };
  for (int seed = 0; seed < 20; ++seed) {
    std::mt19937_64 rng(1000 + seed);
    const Tensor a = randn({3, 4}, rng), b = randn({4, 2}, rng), c = randn({3, 4}, rng);
    const Tensor row = randn({4}, rng);
    const Tensor w34 = randn({3, 4}, rng), w32 = randn({3, 2}, rng);

    track(grad_check(weighted([&](const Tensor& x) { return matmul(x, b); }, w32), a));
    track(grad_check(weighted([&](const Tensor& x) { return matmul(a, x); }, w32), b));
    {
      const Tensor a3 = randn({2, 3, 4}, rng), b3 = randn({2, 4, 2}, rng), w3 = randn({2, 3, 2}, rng);
      track(grad_check(weighted([&](const Tensor& x) { return matmul(x, b3); }, w3), a3));
      track(grad_check(weighted([&](const Tensor& x) { return matmul(a3, x); }, w3), b3));
    }
    track(grad_check(weighted([&](const Tensor& x) { return add(x, c); }, w34), a));
    track(grad_check(weighted([&](const Tensor& x) { return add(a, x); }, w34), row));
    track(grad_check(weighted([&](const Tensor& x) { return sub(x, row); }, w34), a));
    track(grad_check(weighted([&](const Tensor& x) { return sub(a, x); }, w34), row));
    track(grad_check(weighted([&](const Tensor& x) { return mul(x, c); }, w34), a));
    track(grad_check(weighted([&](const Tensor& x) { return mul(a, x); }, w34), row));
    track(grad_check(weighted([&](const Tensor& x) { return scale(x, -1.7); }, w34), a));
    {
      const Tensor w = randn({3, 6}, rng);
      const Tensor d = randn({3, 2}, rng);
      track(grad_check(weighted([&](const Tensor& x) { return concat({x, d}, 1); }, w), a));
    }
    {
      const Tensor w = randn({3, 2}, rng);
      track(grad_check(weighted([&](const Tensor& x) { return slice(x, 1, 1, 3); }, w), a));
    }
    {
      const Tensor w = randn({2, 6}, rng);
      track(grad_check(weighted([&](const Tensor& x) { return reshape(x, {2, 6}); }, w), a));
    }
    {
      const Tensor w = randn({4, 3}, rng);
      track(grad_check(weighted([&](const Tensor& x) { return transpose(x); }, w), a));
      const Tensor t4 = randn({2, 3, 2, 2}, rng), w4 = randn({2, 2, 3, 2}, rng);
      const std::array<Index, 4> perm{0, 2, 1, 3};
      track(grad_check(weighted([&](const Tensor& x) { return transpose(x, perm); }, w4), t4));
    }
    {
      track(grad_check(weighted([&](const Tensor& x) { return softmax(x, 1); }, w34), a));
      track(grad_check(weighted([&](const Tensor& x) { return softmax(x, 0); }, w34), a));
      const Tensor w = randn({3}, rng);
      track(grad_check(weighted([&](const Tensor& x) { return logsumexp(x, 1); }, w), a));
    }
    {
      const Tensor g = randn({4}, rng), be = randn({4}, rng);
      track(grad_check(weighted([&](const Tensor& x) { return layer_norm(x, g, be); }, w34), a));
      track(grad_check(weighted([&](const Tensor& x) { return layer_norm(a, x, be); }, w34), g));
      track(grad_check(weighted([&](const Tensor& x) { return layer_norm(a, g, x); }, w34), be));
    }
    track(grad_check(weighted([](const Tensor& x) { return gelu(x); }, w34), a));
    track(grad_check(weighted([](const Tensor& x) { return tail::tanh(x); }, w34), a));
    track(grad_check(weighted([](const Tensor& x) { return tail::exp(x); }, w34), a));
    track(grad_check(weighted([](const Tensor& x) { return tail::log(x); }, w34), uniform({3, 4}, rng, 0.5, 2.0)));
    track(grad_check(weighted([](const Tensor& x) { return softplus(x); }, w34), a));
    {
      const Tensor w3 = randn({3}, rng), w4 = randn({4}, rng);
      track(grad_check(weighted([](const Tensor& x) { return sum(x, 1); }, w3), a));
      track(grad_check(weighted([](const Tensor& x) { return mean(x, 0); }, w4), a));
      track(grad_check([&](const Tensor& x) { return mean(mul(x, w34)); }, a));
    }
    {
      const std::array<Index, 5> rows{2, 0, 2, 1, 2};
      const Tensor w = randn({5, 4}, rng);
      track(grad_check(weighted([&](const Tensor& x) { return embedding_lookup(x, rows); }, w), a));
    }
    {
      const DropoutKey key{static_cast<std::uint64_t>(seed), 3, 1};
      track(grad_check(weighted([&](const Tensor& x) { return dropout(x, 0.3, key, true); }, w34), a));
    }
    {
      const Tensor mask = Tensor::from_vector({0, 1, 0, 1});
      track(grad_check(weighted([&](const Tensor& x) { return masked_fill(x, mask, -5.0); }, w34), a));
    }
  }
  MESSAGE("max relative error over all ops: " << worst);
  CHECK(worst < tol);
}

TEST_CASE("softmax normalises and ignores shifts") {
  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 50; ++trial) {
    const Tensor x = randn({4, 7}, rng, 3.0);
    const Tensor s = softmax(x, 1);
    const Tensor shifted = softmax(add(x, Tensor::full({7}, 11.25)), 1);
    for (Index r = 0; r < 4; ++r) {
      CHECK(std::abs(s.values().segment(r * 7, 7).sum() - 1.0) < 1e-12);
    }
    CHECK((s.values() - shifted.values()).cwiseAbs().maxCoeff() < 1e-12);
  }
}

TEST_CASE("layer_norm standardises non-degenerate rows") {
  std::mt19937_64 rng(4);
  const Tensor g = Tensor::full({16}, 1.0), b = Tensor::full({16}, 0.0);
  for (int trial = 0; trial < 20; ++trial) {
    // eps=1e-5 shifts the output variance by about eps/var, so rows are
    // drawn with variance well above 1e3 to test the 1e-8 band.
    const Tensor x = randn({8, 16}, rng, 300.0);
    const Tensor y = layer_norm(x, g, b);
    for (Index r = 0; r < 8; ++r) {
      const Vec row = y.values().segment(r * 16, 16);
      const double mu = row.mean();
      const double var = (row.array() - mu).square().mean();
      CHECK(std::abs(mu) < 1e-10);
      CHECK(std::abs(var - 1.0) < 1e-8);
    }
  }
}

TEST_CASE("concat then complementary slice is the identity") {
  std::mt19937_64 rng(5);
  for (Index axis = 0; axis < 3; ++axis) {
    Shape sa{2, 3, 4}, sb{2, 3, 4};
    sb[axis] = 5;
    const Tensor a = randn(sa, rng), b = randn(sb, rng);
    const Tensor c = concat({a, b}, axis);
    const Tensor a2 = slice(c, axis, 0, sa[axis]);
    const Tensor b2 = slice(c, axis, sa[axis], sa[axis] + 5);
    CHECK(std::memcmp(a2.data(), a.data(), sizeof(double) * a.numel()) == 0);
    CHECK(std::memcmp(b2.data(), b.data(), sizeof(double) * b.numel()) == 0);
  }
}

TEST_CASE("dropout is keyed and off at eval") {
  std::mt19937_64 rng(6);
  const Tensor x = randn({64}, rng);
  const DropoutKey k1{1, 2, 3}, k2{1, 2, 4};
  const Tensor d1 = dropout(x, 0.15, k1, true);
  const Tensor d1b = dropout(x, 0.15, k1, true);
  const Tensor d2 = dropout(x, 0.15, k2, true);
  CHECK(std::memcmp(d1.data(), d1b.data(), sizeof(double) * 64) == 0);
  CHECK(std::memcmp(d1.data(), d2.data(), sizeof(double) * 64) != 0);
  const Tensor off = dropout(x, 0.15, k1, false);
  CHECK(std::memcmp(off.data(), x.data(), sizeof(double) * 64) == 0);
}
