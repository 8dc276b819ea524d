#include <doctest.h>

#include "dsmr/errors.hpp"
#include "dsmr/random.hpp"
#include "dsmr/tensor.hpp"
#include "oracles.hpp"

using namespace dsmr;

TEST_CASE("tensor basics") {
  Tensor<float> t(Shape{2, 3, 4, 5}, 1.5f);
  CHECK(t.size() == 120);
  CHECK(t.rank() == 4);
  CHECK(to_string(t.shape()) == "[2,3,4,5]");
  t.at(1, 2, 3, 4) = 7.0f;
  CHECK(t[119] == 7.0f);

  auto alias = t;
  auto copy = t.clone();
  alias[0] = -1.0f;
  CHECK(t[0] == -1.0f);
  CHECK(copy[0] == 1.5f);
  CHECK(alias.is_same(t));
  CHECK_FALSE(copy.is_same(t));

  CHECK(Tensor<double>::scalar(3.0).item() == 3.0);
  CHECK_THROWS_AS(t.item(), ContractError);
  CHECK_THROWS_AS(Tensor<float>(Shape{2, 2}, std::vector<float>(3)), DimensionError);
}

TEST_CASE("backward requires a scalar and accumulates into leaves") {
  CounterRng rng(1);
  auto a = oracle::random_tensor<double>(rng, {1, 2, 3, 3});
  a.set_requires_grad(true);
  Graph<double> g;
  auto y = ops::scale(g, a, 2.0);
  CHECK_THROWS_AS(g.backward(y), ContractError);

  auto loss = ops::l1_norm(g, y);
  g.backward(loss);
  const std::vector<double> once(a.grad().begin(), a.grad().end());
  g.backward(loss);
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(std::abs(once[i]) == doctest::Approx(2.0));
    CHECK(a.grad()[i] == doctest::Approx(2.0 * once[i]));
  }
}

TEST_CASE("inference graphs record nothing") {
  CounterRng rng(2);
  auto a = oracle::random_tensor<float>(rng, {1, 1, 4, 4});
  a.set_requires_grad(true);
  auto g = Graph<float>::inference();
  ops::relu(g, ops::upsample2(g, a));
  CHECK(g.size() == 0);

  Graph<float> rec;
  auto b = oracle::random_tensor<float>(rng, {1, 1, 4, 4});
  ops::relu(rec, b);  // no input requires grad
  CHECK(rec.size() == 0);
}

TEST_CASE("op shape contracts") {
  Graph<float> g;
  Tensor<float> x(Shape{1, 2, 5, 4});
  Tensor<float> k(Shape{3, 2, 4, 4});
  Tensor<float> b(Shape{3});
  CHECK_THROWS_AS(ops::maxpool2(g, x), DimensionError);
  CHECK_THROWS_AS(ops::conv2d(g, x, Tensor<float>(Shape{3, 1, 4, 4}), b, Padding::same4()),
                  DimensionError);
  CHECK_THROWS_AS(ops::conv2d(g, x, k, Tensor<float>(Shape{2}), Padding::same4()), DimensionError);
  CHECK_THROWS_AS(ops::add(g, x, Tensor<float>(Shape{1, 2, 4, 5})), DimensionError);
  CHECK_THROWS_AS(ops::prelu(g, x, Tensor<float>(Shape{3})), DimensionError);
  CHECK_THROWS_AS(ops::repeat_channels(g, x, 3), DimensionError);

  const auto y = ops::conv2d(g, x, k, b, Padding::same4());
  CHECK(y.shape() == Shape{1, 3, 5, 4});
}

TEST_CASE("maxpool ties resolve to the first element in window order") {
  Tensor<double> x(Shape{1, 1, 2, 2}, std::vector<double>{5, 5, 5, 5});
  x.set_requires_grad(true);
  Graph<double> g;
  std::vector<std::size_t> arg;
  auto y = ops::maxpool2(g, x, &arg);
  CHECK(arg == std::vector<std::size_t>{0});
  auto loss = ops::l1_norm(g, y);
  g.backward(loss);
  CHECK(x.grad()[0] == 1.0);
  CHECK(x.grad()[1] == 0.0);
  CHECK(x.grad()[3] == 0.0);
}

TEST_CASE("ops match brute-force oracles on random instances") {
  CounterRng rng(77);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t n = 1 + rng.below(2), ci = 1 + rng.below(3), co = 1 + rng.below(3);
    const std::size_t h = 2 * (1 + rng.below(4)), w = 2 * (1 + rng.below(4));
    const bool k4 = rng.below(2) == 0;
    const std::size_t ks = k4 ? 4 : 3;
    const Padding pad = k4 ? Padding::same4() : Padding::same3();
    auto x = oracle::random_tensor<double>(rng, {n, ci, h, w});
    auto k = oracle::random_tensor<double>(rng, {co, ci, ks, ks});
    auto b = oracle::random_tensor<double>(rng, {co});
    auto g = Graph<double>::inference();

    const auto y = ops::conv2d(g, x, k, b, pad);
    const auto ref = oracle::conv(oracle::from_tensor(x), oracle::values(k), co, ks, ks,
                                  oracle::values(b), pad.top, pad.left, pad.bottom, pad.right);
    CHECK(oracle::max_abs_diff(oracle::values(y), ref.v) < 1e-12);

    CHECK(oracle::max_abs_diff(oracle::values(ops::maxpool2(g, x)),
                               oracle::maxpool(oracle::from_tensor(x)).v) == 0.0);
    CHECK(oracle::max_abs_diff(oracle::values(ops::upsample2(g, x)),
                               oracle::upsample(oracle::from_tensor(x)).v) == 0.0);
  }
}
