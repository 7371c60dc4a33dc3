#include <algorithm>
#include <numeric>

#include "doctest.h"
#include "uae/apply.hpp"
#include "uae/gradcheck.hpp"

using namespace uae;

namespace {

Tensor<double> randn(Rng& rng, Shape shape, double scale = 1.0) {
  std::vector<double> d(static_cast<size_t>(numel(shape)));
  for (auto& v : d) v = scale * rng.gaussian();
  return Tensor<double>::from_data(std::move(shape), std::move(d));
}

}  // namespace

TEST_CASE("relu forward matches definition") {
  auto x = Tensor<double>::from_data({3}, {-1, 0, 2});
  auto y = relu(x);
  CHECK(y.data() == std::vector<double>{0, 0, 2});
}

TEST_CASE("reduce_max over axis 0 with argmax") {
  auto x = Tensor<double>::from_data({2, 2}, {1, 5, 3, 2});
  std::vector<int64_t> arg;
  auto y = reduce_max(x, 0, &arg);
  CHECK(y.data() == std::vector<double>{3, 5});
  CHECK(arg == std::vector<int64_t>{1, 0});
}

TEST_CASE("reduce_max ties break to the lowest index") {
  auto x = Tensor<double>::param("x", {3}, {2, 2, 1});
  std::vector<int64_t> arg;
  auto y = reduce_max(x, 0, &arg);
  CHECK(arg == std::vector<int64_t>{0});
  auto g = backward(reduce_sum(y));
  CHECK(g.at("x").data() == std::vector<double>{1, 0, 0});
}

TEST_CASE("matmul 2x3 by 3x4 against hand product") {
  // A = [[1,2,3],[4,5,6]], B = [[1,0,2,1],[0,1,1,2],[3,1,0,1]]
  auto a = Tensor<double>::from_data({2, 3}, {1, 2, 3, 4, 5, 6});
  auto b = Tensor<double>::from_data({3, 4}, {1, 0, 2, 1, 0, 1, 1, 2, 3, 1, 0, 1});
  auto c = matmul(a, b);
  CHECK(c.shape() == Shape{2, 4});
  // Hand-computed rows: [10,5,4,8], [22,11,13,20].
  CHECK(c.data() == std::vector<double>{10, 5, 4, 8, 22, 11, 13, 20});
}

TEST_CASE("matmul shape mismatch names the operation") {
  auto a = Tensor<double>::zeros({2, 3});
  auto b = Tensor<double>::zeros({4, 2});
  CHECK_THROWS_WITH_AS(matmul(a, b), doctest::Contains("matmul"), ShapeError);
}

TEST_CASE("backward of sum of squares") {
  auto x = Tensor<double>::param("x", {2}, {1, 2});
  auto loss = reduce_sum(square(x));
  auto g = backward(loss);
  CHECK(g.at("x").data() == std::vector<double>{2, 4});
}

TEST_CASE("relu subgradient convention") {
  for (auto [v, expect] : std::vector<std::pair<double, double>>{{-1, 0}, {1, 1}, {0, 0}}) {
    auto x = Tensor<double>::param("x", {}, {v});
    auto g = backward(reduce_sum(relu(x)));
    CHECK(g.at("x").data()[0] == expect);
  }
}

TEST_CASE("backward rejects non-scalar and detached losses") {
  auto x = Tensor<double>::param("x", {2}, {1, 2});
  CHECK_THROWS_AS(backward(square(x)), ShapeError);
  auto c = Tensor<double>::from_data({}, {1.0});
  CHECK_THROWS_AS(backward(c), ValueError);
}

TEST_CASE("unreachable trainables map to zero tensors") {
  auto x = Tensor<double>::param("x", {2}, {1, 2});
  auto w = Tensor<double>::param("w", {3}, {1, 1, 1});
  auto g = backward(reduce_sum(square(x)), {x, w});
  CHECK(g.at("w").data() == std::vector<double>{0, 0, 0});
}

TEST_CASE("composite matmul+softmax+reduce_sum matches finite differences") {
  Rng rng(42);
  auto w = randn(rng, {3, 4});
  auto f = [&](const Tensor<double>& x) {
    auto h = matmul(x, w);
    auto p = softmax(h, 1);
    return reduce_sum(mul(p, p));
  };
  auto x = randn(rng, {2, 3});
  CHECK(finite_difference_check(f, x, 1e-5) < 1e-4);
}

TEST_CASE("fd check of sum is near machine precision") {
  Rng rng(7);
  auto x = randn(rng, {4, 3});
  auto f = [](const Tensor<double>& t) { return reduce_sum(t); };
  CHECK(finite_difference_check(f, x, 1e-5) < 1e-9);
}

TEST_CASE("broadcast add/mul values and gradients") {
  auto a = Tensor<double>::from_data({2, 3}, {1, 2, 3, 4, 5, 6});
  auto b = Tensor<double>::from_data({3}, {10, 20, 30});
  auto y = add(a, b);
  CHECK(y.data() == std::vector<double>{11, 22, 33, 14, 25, 36});

  Rng rng(3);
  auto bias = randn(rng, {3});
  auto f = [&](const Tensor<double>& x) { return reduce_sum(square(add(x, bias))); };
  CHECK(finite_difference_check(f, randn(rng, {2, 3}), 1e-5) < 1e-4);
  auto fb = [&](const Tensor<double>& x) {
    return reduce_sum(square(mul(Tensor<double>::from_data({2, 3}, {1, 2, 3, 4, 5, 6}), x)));
  };
  CHECK(finite_difference_check(fb, randn(rng, {3}), 1e-5) < 1e-4);
  CHECK_THROWS_AS(add(Tensor<double>::zeros({2, 3}), Tensor<double>::zeros({2, 2})), ShapeError);
}

TEST_CASE("backward is linear in the loss") {
  Rng rng(11);
  auto x1 = randn(rng, {3, 3});
  auto run = [&](int which) {
    auto x = Tensor<double>::param("x", x1.shape(), x1.data());
    auto l1 = reduce_sum(square(x));
    auto l2 = reduce_sum(exp(scale(x, 0.1)));
    Tensor<double> loss = which == 0 ? l1 : (which == 1 ? l2 : add(l1, l2));
    return backward(loss).at("x").data();
  };
  auto g1 = run(0), g2 = run(1), gs = run(2);
  for (size_t i = 0; i < g1.size(); ++i) CHECK(gs[i] == doctest::Approx(g1[i] + g2[i]).epsilon(1e-12));
}

TEST_CASE("dropout replay with recorded mask is bit-exact") {
  Rng rng(5);
  auto x = randn(rng, {4, 4});
  Rng dr(99);
  std::shared_ptr<std::vector<uint8_t>> mask;
  auto y1 = dropout(x, 0.5, true, dr, &mask);
  auto y2 = dropout_with_mask(x, 0.5, mask);
  CHECK(y1.data() == y2.data());
  CHECK_THROWS_AS(dropout(x, 1.0, true, dr), ValueError);
}

TEST_CASE("order-invariant reductions are bit-exact under permutation") {
  Rng rng(17);
  std::vector<double> vals(257);
  for (auto& v : vals) v = rng.gaussian() * std::pow(10.0, rng.uniform(-3, 3));
  auto s1 = reduce_sum(Tensor<double>::from_data({257}, vals)).scalar();
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<double> perm = vals;
    for (size_t i = perm.size(); i > 1; --i) std::swap(perm[i - 1], perm[rng.uniform_int(i)]);
    auto s2 = reduce_sum(Tensor<double>::from_data({257}, perm)).scalar();
    CHECK(s1 == s2);
  }
}

TEST_CASE("invariant matmul accumulation is permutation invariant") {
  Rng rng(23);
  const int64_t m = 9;
  auto a = randn(rng, {m, m});
  auto v = randn(rng, {m, 5});
  auto c = matmul(a, v, true);
  for (int trial = 0; trial < 10; ++trial) {
    std::vector<int64_t> p(m);
    std::iota(p.begin(), p.end(), 0);
    for (size_t i = p.size(); i > 1; --i) std::swap(p[i - 1], p[rng.uniform_int(i)]);
    // Permute A columns and V rows together.
    std::vector<double> ad(m * m), vd(m * 5);
    for (int64_t i = 0; i < m; ++i)
      for (int64_t j = 0; j < m; ++j) ad[i * m + j] = a.data()[i * m + p[j]];
    for (int64_t j = 0; j < m; ++j)
      for (int64_t d = 0; d < 5; ++d) vd[j * 5 + d] = v.data()[p[j] * 5 + d];
    auto c2 = matmul(Tensor<double>::from_data({m, m}, ad), Tensor<double>::from_data({m, 5}, vd), true);
    CHECK(c.data() == c2.data());
  }
}

TEST_CASE("batch_norm train/eval semantics and running stats") {
  auto x = Tensor<double>::from_data({4, 1}, {1, 2, 3, 4});
  auto gamma = Tensor<double>::from_data({1}, {1});
  auto beta = Tensor<double>::from_data({1}, {0});
  BNState<double> st;
  auto y = batch_norm(x, gamma, beta, st, true, 0.9);
  // mean 2.5, var 1.25.
  CHECK(st.running_mean[0] == doctest::Approx(0.9 * 0 + 0.1 * 2.5));
  CHECK(st.running_var[0] == doctest::Approx(0.9 * 1 + 0.1 * 1.25));
  double m = 0;
  for (double v : y.data()) m += v;
  CHECK(m == doctest::Approx(0).epsilon(1e-12));
  // Eval mode uses running stats.
  auto ye = batch_norm(x, gamma, beta, st, false, 0.9);
  CHECK(ye.data()[0] == doctest::Approx((1 - 0.25) / std::sqrt(1.025 + 1e-5)));
}

TEST_CASE("primitive gradient checks at 64-bit") {
  Rng rng(123);
  double tol = 1e-4;
  auto x = randn(rng, {3, 4});
  auto b = randn(rng, {3, 4});
  auto w = randn(rng, {4, 5});

  auto check = [&](const char* name, const ScalarFn& f, const Tensor<double>& at) {
    double err = finite_difference_check(f, at, 1e-5);
    INFO(name);
    CHECK(err < tol);
  };

  check("matmul", [&](const Tensor<double>& t) { return reduce_sum(square(matmul(t, w))); }, x);
  check("add", [&](const Tensor<double>& t) { return reduce_sum(square(add(t, b))); }, x);
  check("sub", [&](const Tensor<double>& t) { return reduce_sum(square(sub(t, b))); }, x);
  check("mul", [&](const Tensor<double>& t) { return reduce_sum(square(mul(t, b))); }, x);
  check("relu", [&](const Tensor<double>& t) { return reduce_sum(relu(t)); }, x);
  check("exp", [&](const Tensor<double>& t) { return reduce_sum(exp(t)); }, x);
  check("neg", [&](const Tensor<double>& t) { return reduce_sum(square(neg(t))); }, x);
  check("concat",
        [&](const Tensor<double>& t) { return reduce_sum(square(concat<double>({t, b}, 1))); }, x);
  check("reshape",
        [&](const Tensor<double>& t) { return reduce_sum(square(reshape(t, {2, 6}))); }, x);
  check("transpose",
        [&](const Tensor<double>& t) { return reduce_sum(square(transpose(t))); }, x);
  check("gather_rows",
        [&](const Tensor<double>& t) { return reduce_sum(square(gather_rows(t, {0, 2, 2}))); }, x);
  check("reduce_max",
        [&](const Tensor<double>& t) { return reduce_sum(square(reduce_max(t, 0))); }, x);
  check("reduce_mean",
        [&](const Tensor<double>& t) { return reduce_sum(square(reduce_mean(t, 1))); }, x);
  check("softmax",
        [&](const Tensor<double>& t) { return reduce_sum(square(softmax(t, 1))); }, x);
  check("l1_normalize",
        [&](const Tensor<double>& t) { return reduce_sum(square(l1_normalize(t, 1))); }, x);
  check("sqrt",
        [&](const Tensor<double>& t) { return reduce_sum(sqrt(add(square(t), Tensor<double>::full(t.shape(), 0.5)))); },
        x);
  check("square", [&](const Tensor<double>& t) { return reduce_sum(square(t)); }, x);
  check("batch_norm(train)",
        [&](const Tensor<double>& t) {
          BNState<double> st;
          auto g = Tensor<double>::from_data({4}, {1.1, 0.9, 1.2, 0.8});
          auto be = Tensor<double>::from_data({4}, {0.1, -0.2, 0.3, 0.0});
          return reduce_sum(square(batch_norm(t, g, be, st, true)));
        },
        x);
  check("dropout(fixed mask)",
        [&](const Tensor<double>& t) {
          auto mask = std::make_shared<std::vector<uint8_t>>(
              std::vector<uint8_t>{1, 0, 1, 1, 0, 1, 1, 1, 0, 1, 0, 1});
          return reduce_sum(square(dropout_with_mask(t, 0.25, mask)));
        },
        x);
}

TEST_CASE("apply dispatcher covers the closed primitive set") {
  auto x = Tensor<double>::from_data({2, 2}, {1, -2, 3, 4});
  Attrs<double> ax;
  ax.axis = 1;
  CHECK(apply<double>(PrimitiveKind::Softmax, {x}, ax).shape() == Shape{2, 2});
  CHECK(apply<double>(PrimitiveKind::Relu, {x}).data() == std::vector<double>{1, 0, 3, 4});
  CHECK_THROWS_AS(apply<double>(PrimitiveKind::Relu, {x, x}), ValueError);
  Attrs<double> bad;
  bad.axis = 5;
  CHECK_THROWS_WITH_AS(apply<double>(PrimitiveKind::Softmax, {x}, bad), doctest::Contains("axis"),
                       ValueError);
  Attrs<double> rs;
  rs.shape = {4};
  CHECK(apply<double>(PrimitiveKind::Reshape, {x}, rs).shape() == Shape{4});
}

TEST_CASE("apply is pure: replay reproduces outputs bit-exactly") {
  Rng rng(31);
  auto x = randn(rng, {5, 5});
  auto w = randn(rng, {5, 5});
  auto run = [&]() {
    auto y = relu(matmul(x, w));
    return softmax(y, 1).data();
  };
  CHECK(run() == run());
}
