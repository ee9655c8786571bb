#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "rkd/tensor.hpp"
#include "test_util.hpp"

using rkd::Tensor;

TEST_CASE("matmul forward matches hand arithmetic", "[tensor]") {
  Tensor a = Tensor::from_values({2, 2}, {1, 2, 3, 4});
  Tensor b = Tensor::from_values({2, 1}, {1, 1});
  Tensor c = rkd::matmul(a, b);
  REQUIRE(c.shape() == rkd::Shape{2, 1});
  CHECK(c.values()[0] == 3.0);
  CHECK(c.values()[1] == 7.0);
}

TEST_CASE("relu clips negatives", "[tensor]") {
  Tensor x = Tensor::from_values({3}, {-1, 0, 2});
  Tensor y = rkd::relu(x);
  CHECK(y.values() == std::vector<double>{0, 0, 2});
}

TEST_CASE("softmax of equal logits is uniform", "[tensor]") {
  Tensor y = rkd::softmax(Tensor::from_values({2}, {0, 0}));
  CHECK(y.values()[0] == Catch::Approx(0.5).margin(1e-15));
  CHECK(y.values()[1] == Catch::Approx(0.5).margin(1e-15));
}

TEST_CASE("softmax rows are strictly positive distributions", "[tensor]") {
  rkd::Rng rng(11);
  Tensor x = Tensor::zeros({8, 5});
  for (double& v : x.values()) v = rng.uniform(-50.0, 50.0);
  Tensor y = rkd::softmax(x);
  for (std::size_t r = 0; r < 8; ++r) {
    double sum = 0.0;
    for (std::size_t c = 0; c < 5; ++c) {
      const double p = y.values()[r * 5 + c];
      CHECK(p > 0.0);
      sum += p;
    }
    CHECK(sum == Catch::Approx(1.0).margin(1e-9));
  }
}

TEST_CASE("backward of sum(x*x) doubles the input", "[tensor]") {
  Tensor x = Tensor::from_values({1}, {3});
  x.set_requires_grad(true);
  Tensor out = rkd::sum(rkd::mul(x, x));
  rkd::backward(out);
  CHECK(x.grad()[0] == Catch::Approx(6.0).margin(1e-12));
}

TEST_CASE("log_softmax backward matches the hand derivative", "[tensor]") {
  // d/dz log_softmax(z)[0] at z = [0, 0] is [1 - 1/2, -1/2].
  Tensor z = Tensor::from_values({2}, {0, 0});
  z.set_requires_grad(true);
  Tensor mask = Tensor::from_values({2}, {1, 0});
  Tensor out = rkd::sum(rkd::mul(rkd::log_softmax(z), mask));
  rkd::backward(out);
  CHECK(z.grad()[0] == Catch::Approx(0.5).margin(1e-12));
  CHECK(z.grad()[1] == Catch::Approx(-0.5).margin(1e-12));
}

TEST_CASE("backward accumulates exactly twice without zeroing", "[tensor]") {
  Tensor x = Tensor::from_values({3}, {1, -2, 0.5});
  x.set_requires_grad(true);
  auto run = [&] {
    Tensor out = rkd::mean(rkd::mul(x, x));
    rkd::backward(out);
  };
  run();
  std::vector<double> once = x.grad();
  run();
  for (std::size_t i = 0; i < once.size(); ++i)
    CHECK(x.grad()[i] == Catch::Approx(2.0 * once[i]).margin(1e-15));
}

TEST_CASE("backward requires a scalar output with lineage", "[tensor]") {
  Tensor x = Tensor::from_values({2}, {1, 2});
  x.set_requires_grad(true);
  Tensor y = rkd::relu(x);
  CHECK_THROWS_AS(rkd::backward(y), rkd::ValueError);
  Tensor leaf = Tensor::scalar(1.0);
  CHECK_THROWS_AS(rkd::backward(leaf), rkd::ValueError);
}

TEST_CASE("shape mismatches name the op", "[tensor]") {
  Tensor a = Tensor::zeros({2, 3});
  Tensor b = Tensor::zeros({2, 3});
  CHECK_THROWS_WITH(rkd::matmul(a, b), Catch::Matchers::ContainsSubstring("matmul"));
  CHECK_THROWS_WITH(rkd::add(Tensor::zeros({2}), Tensor::zeros({3})),
                    Catch::Matchers::ContainsSubstring("add"));
  CHECK_THROWS_WITH(rkd::mul(a, Tensor::zeros({3, 2})),
                    Catch::Matchers::ContainsSubstring("mul"));
}

TEST_CASE("log without floor rejects non-positive input", "[tensor]") {
  CHECK_THROWS_AS(rkd::log(Tensor::from_values({1}, {0.0})), rkd::ValueError);
  CHECK_THROWS_AS(rkd::log(Tensor::from_values({1}, {-2.0})), rkd::ValueError);
  CHECK(rkd::log(Tensor::from_values({1}, {0.0}), 1e-12).values()[0] ==
        Catch::Approx(std::log(1e-12)));
}

TEST_CASE("add broadcasts over the leading batch dim only", "[tensor]") {
  Tensor x = Tensor::from_values({2, 3}, {1, 2, 3, 4, 5, 6});
  Tensor b = Tensor::from_values({3}, {10, 20, 30});
  Tensor y = rkd::add(x, b);
  CHECK(y.values() == std::vector<double>{11, 22, 33, 14, 25, 36});

  x.set_requires_grad(true);
  b.set_requires_grad(true);
  rkd::backward(rkd::sum(rkd::add(x, b)));
  CHECK(b.grad() == std::vector<double>{2, 2, 2});
  CHECK(x.grad() == std::vector<double>(6, 1.0));
}

TEST_CASE("finite differences recover polynomial gradients", "[tensor]") {
  Tensor x = Tensor::from_values({2}, {1, 2});
  auto sum_sq = [](const Tensor& t) {
    double s = 0.0;
    for (double v : t.values()) s += v * v;
    return s;
  };
  Tensor fd = rkd::finite_diff_grad(sum_sq, x, 1e-5);
  CHECK(fd.values()[0] == Catch::Approx(2.0).margin(1e-6));
  CHECK(fd.values()[1] == Catch::Approx(4.0).margin(1e-6));

  Tensor zero = rkd::finite_diff_grad([](const Tensor&) { return 42.0; }, x, 1e-5);
  CHECK(zero.values() == std::vector<double>{0, 0});
}

TEST_CASE("random graphs pass the finite-difference oracle", "[tensor][oracle]") {
  rkd::Rng rng(20240817);
  double worst = 0.0;
  for (int i = 0; i < 40; ++i) {
    auto g = rkdtest::make_random_graph(rng);
    worst = std::max(worst, rkdtest::grad_check(g));
  }
  CHECK(worst <= 1e-4);
}

TEST_CASE("conv2d forward and backward agree with finite differences", "[tensor]") {
  rkd::Rng rng(5);
  rkdtest::GraphCase g;
  Tensor x = Tensor::zeros({2, 2, 4, 4});
  Tensor w = Tensor::zeros({3, 2, 2, 2});
  Tensor b = Tensor::zeros({3});
  for (double& v : x.values()) v = rng.uniform(-1.0, 1.0);
  for (double& v : w.values()) v = rng.uniform(-1.0, 1.0);
  for (double& v : b.values()) v = rng.uniform(-0.5, 0.5);
  g.leaves = {x, w, b};
  g.build = [](const std::vector<Tensor>& leaves) {
    return rkd::mean(rkd::conv2d(leaves[0], leaves[1], leaves[2]));
  };
  CHECK(rkdtest::grad_check(g) <= 1e-4);

  // A 1x1 kernel of ones over a single channel is a passthrough.
  Tensor ones = Tensor::from_values({1, 1, 1, 1}, {1});
  Tensor zero_bias = Tensor::zeros({1});
  Tensor inp = Tensor::from_values({1, 1, 2, 2}, {1, 2, 3, 4});
  CHECK(rkd::conv2d(inp, ones, zero_bias).values() == inp.values());
}

TEST_CASE("ops stay finite for inputs within [-50, 50]", "[tensor]") {
  rkd::Rng rng(99);
  Tensor x = Tensor::zeros({4, 6});
  for (double& v : x.values()) v = rng.uniform(-50.0, 50.0);
  Tensor w = Tensor::zeros({6, 3});
  for (double& v : w.values()) v = rng.uniform(-50.0, 50.0);
  x.set_requires_grad(true);
  w.set_requires_grad(true);
  Tensor out = rkd::mean(rkd::log_softmax(rkd::relu(rkd::matmul(x, w))));
  rkd::backward(rkd::sum(rkd::mul(out, out)));
  for (double v : x.grad()) CHECK(std::isfinite(v));
  Tensor soft = rkd::softmax(rkd::scale(x.detach(), 10.0));
  for (double v : soft.values()) CHECK(std::isfinite(v));
}

TEST_CASE("apply dispatches the op catalog", "[tensor]") {
  Tensor x = Tensor::from_values({2}, {1, 2});
  CHECK(rkd::apply(rkd::Op::Negate, {x}).values() == std::vector<double>{-1, -2});
  rkd::OpAttrs attrs;
  attrs.scalar = 3.0;
  CHECK(rkd::apply(rkd::Op::Scale, {x}, attrs).values() == std::vector<double>{3, 6});
  attrs.shape = {2, 1};
  CHECK(rkd::apply(rkd::Op::Reshape, {x}, attrs).shape() == rkd::Shape{2, 1});
  CHECK_THROWS_AS(rkd::apply(rkd::Op::Add, {x}), rkd::ValueError);
}
