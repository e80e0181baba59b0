#include <cmath>
#include <random>

#include "caqa/error.hpp"
#include "caqa/grad_check.hpp"
#include "caqa/tensor.hpp"
#include "doctest.h"
#include "helpers.hpp"

using namespace caqa;
using caqa::test::random_tensor;

TEST_SUITE("tensor_core") {
  TEST_CASE("softmax of uniform logits is uniform") {
    Tensor z = Tensor::full({4}, 0.7);
    Tensor p = softmax(z);
    for (double v : p.values()) CHECK(v == doctest::Approx(0.25).epsilon(1e-15));
  }

  TEST_CASE("masked mean over a single selected row returns that row") {
    std::mt19937_64 rng(3);
    Tensor x = random_tensor({5, 3}, rng);
    const std::uint8_t mask[] = {0, 0, 1, 0, 0};
    Tensor m = masked_mean(x, mask);
    for (std::size_t j = 0; j < 3; ++j) CHECK(m[j] == x.at(2, j));
  }

  TEST_CASE("pairwise squared distance of (0,0) and (3,4) is 25") {
    Tensor a = Tensor::from({1, 2}, {0.0, 0.0});
    Tensor b = Tensor::from({1, 2}, {3.0, 4.0});
    CHECK(pairwise_sq_dist(a, b).item() == 25.0);
  }

  TEST_CASE("shape mismatch is rejected with the dimensions") {
    Tensor a = Tensor::zeros({2, 3});
    Tensor b = Tensor::zeros({3, 2});
    CHECK_THROWS_AS(add(a, b), ShapeError);
    CHECK_THROWS_WITH(matmul(a, a), doctest::Contains("[2,3]"));
  }

  TEST_CASE("log of a non-positive value is rejected") {
    CHECK_THROWS_AS(log(Tensor::from({2}, {1.0, 0.0})), InvalidArgument);
    CHECK_THROWS_AS(log(Tensor::from({1}, {-2.0})), InvalidArgument);
  }

  TEST_CASE("row broadcast over the leading dimension") {
    Tensor a = Tensor::from({2, 2}, {1, 2, 3, 4});
    Tensor b = Tensor::from({2}, {10, 20});
    Tensor c = add(a, b);
    CHECK(std::vector<double>(c.values().begin(), c.values().end()) == std::vector<double>{11, 22, 13, 24});
    CHECK_THROWS_AS(add(b, a), ShapeError);
  }

  TEST_CASE("backward of x*x at 3 gives 6") {
    Tensor x = Tensor::scalar(3.0, true);
    Tensor loss = mul(x, x);
    loss.backward();
    CHECK(x.grad()[0] == 6.0);
  }

  TEST_CASE("sum of softmax has zero gradient") {
    std::mt19937_64 rng(11);
    Tensor z = random_tensor({6}, rng, -2.0, 2.0, true);
    sum(softmax(z)).backward();
    for (double g : z.grad()) CHECK(std::abs(g) < 1e-15);
  }

  TEST_CASE("non-scalar loss is rejected") {
    Tensor x = Tensor::zeros({3}, true);
    CHECK_THROWS_AS(exp(x).backward(), GraphError);
  }

  TEST_CASE("graph is consumed by backward") {
    Tensor x = Tensor::scalar(2.0, true);
    Tensor loss = exp(x);
    loss.backward();
    CHECK_THROWS_AS(loss.backward(), GraphError);
  }

  TEST_CASE("leaf the loss does not depend on gets exactly zero gradient") {
    Tensor x = Tensor::from({2}, {1.0, 2.0}, true);
    Tensor unused = Tensor::from({2}, {3.0, 4.0}, true);
    Tensor other = add(unused, unused);  // recorded but not part of the loss
    sum(exp(x)).backward();
    for (double g : unused.grad()) CHECK(g == 0.0);
    CHECK(other.requires_grad());
  }

  TEST_CASE("gradients accumulate on leaves across backward calls") {
    Tensor x = Tensor::scalar(1.5, true);
    scale(x, 2.0).backward();
    scale(x, 3.0).backward();
    CHECK(x.grad()[0] == 5.0);
  }

  TEST_CASE("no-grad guard records nothing") {
    Tensor x = Tensor::scalar(1.0, true);
    NoGradGuard guard;
    Tensor y = exp(x);
    CHECK_FALSE(y.requires_grad());
  }

  TEST_CASE("softmax rows sum to one and log_softmax matches log(softmax)") {
    std::mt19937_64 rng(5);
    for (int trial = 0; trial < 50; ++trial) {
      Tensor z = random_tensor({4, 7}, rng, -20.0, 20.0);
      Tensor p = softmax(z);
      Tensor lp = log_softmax(z);
      for (std::size_t r = 0; r < 4; ++r) {
        double s = 0.0;
        for (std::size_t j = 0; j < 7; ++j) {
          s += p.at(r, j);
          CHECK(std::abs(lp.at(r, j) - std::log(p.at(r, j))) < 1e-10);
        }
        CHECK(std::abs(s - 1.0) < 1e-12);
      }
    }
  }

  TEST_CASE("operations are bitwise deterministic") {
    auto run = [] {
      std::mt19937_64 rng(99);
      Tensor a = random_tensor({5, 4}, rng);
      Tensor b = random_tensor({4, 6}, rng);
      Tensor g = random_tensor({6}, rng);
      Tensor beta = random_tensor({6}, rng);
      Tensor y = softmax(layer_norm(gelu(matmul(a, b)), g, beta));
      return std::vector<double>(y.values().begin(), y.values().end());
    };
    CHECK(run() == run());
  }

  TEST_CASE("finite differences: linear function") {
    std::mt19937_64 rng(1);
    Tensor x = random_tensor({7}, rng);
    auto r = finite_difference_check([](const Tensor& t) { return sum(t); }, x, 1e-5);
    CHECK(r.max_rel_error < 1e-10);
  }

  TEST_CASE("finite differences: random 3-layer composite") {
    // Three dense layers with smooth activations, log-softmax readout.
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
      std::mt19937_64 rng(seed);
      Tensor w1 = random_tensor({4, 5}, rng, -1, 1, true);
      Tensor w2 = random_tensor({5, 5}, rng, -1, 1, true);
      Tensor w3 = random_tensor({5, 3}, rng, -1, 1, true);
      Tensor x = random_tensor({3, 4}, rng);
      auto loss = [&] {
        Tensor h1 = gelu(matmul(x, w1));
        Tensor h2 = exp(scale(matmul(h1, w2), 0.3));
        return mean(log_softmax(matmul(h2, w3)));
      };
      Tensor leaves[] = {w1, w2, w3};
      auto r = check_gradients(loss, leaves, {.step = 1e-5});
      CHECK(r.max_rel_error < 1e-5);
    }
  }

  TEST_CASE("finite differences: richardson removes the h^2 term") {
    Tensor x = Tensor::from({3}, {-0.5, 0.2, 1.0}, true);
    Tensor leaves[] = {x};
    auto loss = [&] { return sum(exp(x)); };
    auto plain = check_gradients(loss, leaves, {.step = 1e-2});
    auto rich = check_gradients(loss, leaves, {.step = 1e-2, .richardson = true});
    CHECK(plain.max_rel_error > 5e-6);
    CHECK(rich.max_rel_error < 1e-9);
  }

  TEST_CASE("finite differences: corrupted gradient rule is caught") {
    std::mt19937_64 rng(4);
    Tensor x = random_tensor({5}, rng, 0.5, 2.0);
    auto wrong_square = [](const Tensor& t) {
      return sum(unary_map(
          t, [](double v) { return v * v; }, [](double v) { return 3.0 * v; }, "bad_square"));
    };
    auto r = finite_difference_check(wrong_square, x, 1e-5);
    CHECK(r.max_rel_error > 1e-2);
  }

  TEST_CASE("finite differences: non-finite loss reports the coordinate") {
    Tensor x = Tensor::from({3}, {1.0, 2.0, 1e-6});
    auto f = [](const Tensor& t) { return sum(log(t)); };
    CHECK_THROWS_AS(finite_difference_check(f, x, 1e-5), InvalidArgument);
    // exp overflows just above 709.7827, so only the +step probe is non-finite.
    Tensor big = Tensor::from({2}, {1.0, 709.78271});
    CHECK_THROWS_WITH_AS(finite_difference_check([](const Tensor& t) { return sum(exp(t)); }, big, 1e-5),
                         doctest::Contains("coordinate"), NonFiniteError);
  }

  TEST_CASE("every differentiable op passes finite differences on 100 seeds") {
    double worst = 0.0;
    for (std::uint64_t seed = 0; seed < 100; ++seed) {
      std::mt19937_64 rng(seed * 7919 + 1);
      Tensor a = random_tensor({3, 4}, rng, -1, 1, true);
      Tensor b = random_tensor({4, 3}, rng, -1, 1, true);
      Tensor c = random_tensor({3, 4}, rng, -1, 1, true);
      Tensor v = random_tensor({4}, rng, -1, 1, true);
      Tensor g = random_tensor({4}, rng, 0.5, 1.5, true);
      Tensor table = random_tensor({6, 4}, rng, -1, 1, true);
      Tensor pos = random_tensor({3, 4}, rng, 0.5, 2.0, true);
      const std::size_t ids[] = {2, 5, 2};
      const std::uint8_t mask[] = {1, 0, 1};
      auto loss = [&] {
        Tensor t = add(mul(a, c), v);                         // add, mul, broadcast
        t = sub(t, scale(c, 0.5));                            // sub, scale
        t = layer_norm(t, g, v);                              // layer_norm
        t = add(t, embedding(table, ids));                    // embedding
        Tensor m = matmul(t, b);                              // matmul [3,3]
        Tensor s = softmax(transpose(m));                     // transpose, softmax
        Tensor ls = log_softmax(add_scalar(neg(m), 0.2));     // neg, add_scalar, log_softmax
        Tensor d = pairwise_sq_dist(t, c);                    // pairwise distance
        Tensor mm = masked_mean(t, mask);                     // masked mean
        Tensor cat = concat_cols(std::vector<Tensor>{slice_cols(t, 0, 2), slice_cols(c, 1, 3)});
        Tensor st = stack_rows(std::vector<Tensor>{mm, row(t, 1)});
        Tensor lg = log(pos);
        Tensor sel = select(gelu(t), 5);
        Tensor total = add(sum(mul(s, ls)), scale(mean(exp(scale(clamp_min(d, 0.0), -0.3))), 2.0));
        total = add(total, add(sum(mul(cat, cat)), mean(st)));
        total = add(total, add(sum(lg), sel));
        return total;
      };
      Tensor leaves[] = {a, b, c, v, g, table, pos};
      auto r = check_gradients(loss, leaves, {.step = 1e-5});
      worst = std::max(worst, r.max_rel_error);
    }
    CHECK(worst < 1e-5);
  }

  TEST_CASE("relu gradient away from the kink") {
    Tensor x = Tensor::from({4}, {-1.0, -0.3, 0.4, 2.0});
    auto r = finite_difference_check([](const Tensor& t) { return sum(mul(relu(t), t)); }, x, 1e-5);
    CHECK(r.max_rel_error < 1e-8);
  }
}
