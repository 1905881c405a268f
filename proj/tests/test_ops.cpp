#include <cmath>
#include <numeric>

#include "amor/ops.hpp"
#include "doctest.h"
#include "helpers.hpp"

using namespace amor;
using amor::test::expect_gradients;
using amor::test::random_tensor;

namespace {

// Weighted sum of an op's output, so every output element gets a distinct upstream gradient.
Var probe_sum(Tape& tape, Var out, std::uint64_t seed) {
  const Var w = tape.constant(random_tensor(out.shape(), seed));
  return sum(mul(out, w));
}

double relu_safe(double x) { return std::abs(x) < 1e-3 ? x + 0.01 : x; }

}  // namespace

TEST_SUITE("ops") {
  TEST_CASE("tensor shape checks") {
    CHECK_THROWS_AS(Tensor(Shape{2, 3}, std::vector<double>(5)), DimensionError);
    const Tensor m = Tensor::matrix({{1, 2, 3}, {4, 5, 6}});
    CHECK(m.rows() == 2);
    CHECK(m.cols() == 3);
    CHECK(m.at(1, 2) == 6.0);
    CHECK_THROWS_AS(Tensor::vector({1, 2}).item(), DimensionError);
  }

  TEST_CASE("tape accumulates gradients additively over reuse") {
    Tape tape;
    const Var x = tape.leaf(Tensor::scalar(3.0), true);
    const Var y = add(mul(x, x), x);  // x^2 + x
    tape.backward(y);
    CHECK(x.grad()[0] == doctest::Approx(7.0));
  }

  TEST_CASE("constants receive no gradient") {
    Tape tape;
    const Var c = tape.constant(Tensor::scalar(2.0));
    const Var x = tape.leaf(Tensor::scalar(1.5), true);
    tape.backward(mul(c, x));
    CHECK(c.grad().empty());
    CHECK(x.grad()[0] == doctest::Approx(2.0));
  }

  TEST_CASE("multi-output backward seeds each output") {
    Tape tape;
    const Var x = tape.leaf(Tensor::vector({1.0, 2.0}), true);
    const Var a = scale(x, 2.0);
    const Var b = mul(x, x);
    const std::vector<std::pair<Var, std::vector<double>>> seeds{{a, {1.0, 0.0}}, {b, {0.0, 1.0}}};
    tape.backward(seeds);
    CHECK(x.grad()[0] == doctest::Approx(2.0));
    CHECK(x.grad()[1] == doctest::Approx(4.0));
  }

  TEST_CASE("matmul shape mismatch names both shapes") {
    Tape tape;
    const Var a = tape.constant(Tensor(Shape{2, 3}));
    const Var b = tape.constant(Tensor(Shape{4, 2}));
    try {
      matmul(a, b);
      FAIL("expected DimensionError");
    } catch (const DimensionError& e) {
      const std::string msg = e.what();
      CHECK(msg.find("[2x3]") != std::string::npos);
      CHECK(msg.find("[4x2]") != std::string::npos);
    }
  }

  TEST_CASE("log rejects non-positive input") {
    Tape tape;
    CHECK_THROWS_AS(log(tape.constant(Tensor::vector({1.0, 0.0}))), DomainError);
  }

  TEST_CASE("finite differences: elementwise") {
    const Tensor a = random_tensor({3, 4}, 1);
    const Tensor b = random_tensor({3, 4}, 2);
    for (const char* name : {"add", "sub", "mul"}) {
      CAPTURE(name);
      expect_gradients([&](Tape& t, std::span<const Var> v) { return probe_sum(t, elementwise(name, v[0], v[1]), 9); },
                       {a, b}, 1e-4);
    }
    Tensor r = a;
    for (auto& x : r.data()) x = relu_safe(x);
    for (const char* name : {"sigmoid", "tanh", "exp", "relu"}) {
      CAPTURE(name);
      expect_gradients([&](Tape& t, std::span<const Var> v) { return probe_sum(t, elementwise(name, v[0]), 9); }, {r},
                       1e-4);
    }
    Tensor pos = a;
    for (auto& x : pos.data()) x = std::abs(x) + 0.5;
    expect_gradients([](Tape& t, std::span<const Var> v) { return probe_sum(t, log(v[0]), 4); }, {pos}, 1e-4);
  }

  TEST_CASE("finite differences: scalar broadcast") {
    const Tensor a = random_tensor({2, 3}, 3);
    const Tensor s = Tensor::scalar(0.7);
    expect_gradients([](Tape& t, std::span<const Var> v) { return probe_sum(t, mul(v[1], sub(v[0], v[1])), 5); },
                     {a, s}, 1e-4);
  }

  TEST_CASE("finite differences: matmul, bias, scale") {
    const Tensor a = random_tensor({3, 5}, 4);
    const Tensor b = random_tensor({5, 2}, 5);
    const Tensor c = random_tensor({2}, 6);
    expect_gradients(
        [](Tape& t, std::span<const Var> v) { return probe_sum(t, scale(add_bias(matmul(v[0], v[1]), v[2]), 1.3), 7); },
        {a, b, c}, 1e-4);
  }

  TEST_CASE("finite differences: softmax family") {
    const Tensor x = random_tensor({4, 6}, 8, 2.0);
    expect_gradients([](Tape& t, std::span<const Var> v) { return probe_sum(t, softmax_lastdim(v[0]), 1); }, {x}, 1e-4);
    expect_gradients([](Tape& t, std::span<const Var> v) { return probe_sum(t, log_softmax_lastdim(v[0]), 2); }, {x},
                     1e-4);
    expect_gradients([](Tape& t, std::span<const Var> v) { return probe_sum(t, entropy_lastdim(v[0]), 3); }, {x}, 1e-4);
  }

  TEST_CASE("finite differences: cross entropy with mask") {
    const Tensor x = random_tensor({4, 5}, 10, 2.0);
    const std::vector<int> targets{1, 4, 0, 2};
    const std::vector<std::uint8_t> mask{1, 0, 1, 1};
    expect_gradients([&](Tape&, std::span<const Var> v) { return cross_entropy(v[0], targets, mask); }, {x}, 1e-4);
  }

  TEST_CASE("cross entropy errors") {
    Tape tape;
    const Var x = tape.constant(random_tensor({2, 3}, 1));
    const std::vector<int> targets{0, 1};
    const std::vector<std::uint8_t> none{0, 0};
    CHECK_THROWS_AS(cross_entropy(x, targets, none), std::invalid_argument);
    const std::vector<int> bad{0, 3};
    const std::vector<std::uint8_t> all{1, 1};
    CHECK_THROWS_AS(cross_entropy(x, bad, all), std::invalid_argument);
  }

  TEST_CASE("finite differences: top-k values") {
    const Tensor x = random_tensor({3, 7}, 11, 2.0);
    expect_gradients([](Tape& t, std::span<const Var> v) { return probe_sum(t, topk_lastdim(v[0], 3).values, 2); }, {x},
                     1e-4);
  }

  TEST_CASE("finite differences: shape ops") {
    const Tensor a = random_tensor({4, 3}, 12);
    const Tensor b = random_tensor({4, 2}, 13);
    expect_gradients([](Tape& t, std::span<const Var> v) { return probe_sum(t, concat_lastdim(v[0], v[1]), 1); },
                     {a, b}, 1e-4);
    expect_gradients(
        [](Tape& t, std::span<const Var> v) {
          const std::vector<Var> parts{slice_rows(v[0], 2, 4), slice_cols(v[1], 1, 2)};
          return probe_sum(t, concat_rows(std::vector<Var>{parts[0], slice_cols(v[0], 0, 3)}), 2);
        },
        {a, b}, 1e-4, {true, false});
    expect_gradients([](Tape& t, std::span<const Var> v) { return probe_sum(t, slice_cols(v[1], 1, 2), 2); }, {a, b},
                     1e-4, {false, true});
    const std::vector<std::size_t> rows{3, 0, 3};
    expect_gradients([&](Tape& t, std::span<const Var> v) { return probe_sum(t, gather_rows(v[0], rows), 3); }, {a},
                     1e-4);
    expect_gradients([](Tape& t, std::span<const Var> v) { return probe_sum(t, transpose(v[0]), 4); }, {a}, 1e-4);
    expect_gradients([](Tape& t, std::span<const Var> v) { return probe_sum(t, reshape(v[0], Shape{2, 6}), 5); }, {a},
                     1e-4);
  }

  TEST_CASE("finite differences: embedding, masked scale, reductions") {
    const Tensor table = random_tensor({5, 3}, 14);
    const std::vector<int> ids{4, 0, 4, 2};
    expect_gradients([&](Tape& t, std::span<const Var> v) { return probe_sum(t, embedding_lookup(v[0], ids), 6); },
                     {table}, 1e-4);
    const Tensor x = random_tensor({3, 4}, 15);
    const Tensor g = Tensor::vector({0.3, 1.0, 0.8});
    expect_gradients([](Tape& t, std::span<const Var> v) { return probe_sum(t, masked_scale(v[0], v[1]), 7); }, {x, g},
                     1e-4);
    expect_gradients([](Tape&, std::span<const Var> v) { return mean(mul(v[0], v[0])); }, {x}, 1e-4);
  }

  TEST_CASE("finite differences: layer norm") {
    const Tensor x = random_tensor({3, 6}, 16, 2.0);
    const Tensor gain = random_tensor({6}, 17);
    const Tensor bias = random_tensor({6}, 18);
    expect_gradients([](Tape& t, std::span<const Var> v) { return probe_sum(t, layer_norm(v[0], v[1], v[2]), 8); },
                     {x, gain, bias}, 1e-4);
  }

  TEST_CASE("finite differences: dropout with a fixed mask") {
    const Tensor x = random_tensor({4, 5}, 19);
    expect_gradients([](Tape& t, std::span<const Var> v) { return probe_sum(t, dropout(v[0], 0.3, 77), 9); }, {x},
                     1e-4);
  }

  TEST_CASE("softmax rows sum to one, including extreme logits") {
    Tape tape;
    const Tensor x = Tensor::matrix({{1000.0, 0.0, -1000.0}, {-5.0, -5.0, -5.0}, {0.1, 0.2, 0.3}});
    const Var p = softmax_lastdim(tape.constant(x));
    for (std::size_t r = 0; r < 3; ++r) {
      double s = 0.0;
      for (std::size_t c = 0; c < 3; ++c) {
        CHECK(std::isfinite(p.value().at(r, c)));
        s += p.value().at(r, c);
      }
      CHECK(s == doctest::Approx(1.0).epsilon(1e-12));
    }
    const Var lp = log_softmax_lastdim(tape.constant(x));
    CHECK(std::isfinite(lp.value().at(0, 2)));
  }

  TEST_CASE("entropy values") {
    Tape tape;
    const Var uniform = entropy_lastdim(tape.constant(Tensor(Shape{1, 11}, 0.3)));
    CHECK(uniform.value()[0] == doctest::Approx(std::log(11.0)).epsilon(1e-12));
    const Var half = entropy_lastdim(tape.constant(Tensor::matrix({{0.0, 0.0, -1e4, -1e4}})));
    CHECK(half.value()[0] == doctest::Approx(std::log(2.0)).epsilon(1e-12));
    const Var peaked = entropy_lastdim(tape.constant(Tensor::matrix({{30.0, 0.0, 0.0}})));
    CHECK(peaked.value()[0] < 1e-10);
  }

  TEST_CASE("top-k ties go to the lower index and order is deterministic") {
    Tape tape;
    const Var x = tape.constant(Tensor::matrix({{1.0, 3.0, 3.0, 2.0, 3.0}}));
    const TopK a = topk_lastdim(x, 2);
    CHECK(a.indices == std::vector<std::size_t>{1, 2});
    const TopK b = topk_lastdim(x, 4);
    CHECK(b.indices == std::vector<std::size_t>{1, 2, 4, 3});
    for (int rep = 0; rep < 5; ++rep) CHECK(topk_lastdim(x, 3).indices == std::vector<std::size_t>{1, 2, 4});
    CHECK_THROWS(topk_lastdim(x, 0));
    CHECK_THROWS(topk_lastdim(x, 6));
  }

  TEST_CASE("straight-through threshold") {
    Tape tape;
    const Var p = tape.leaf(Tensor::vector({0.2, 0.5, 0.51}), true);
    const Var h = ste_threshold(p, 0.5);
    CHECK(std::vector<double>(h.value().data().begin(), h.value().data().end()) == std::vector<double>{0, 0, 1});
    tape.backward(sum(scale(h, 2.0)));
    for (double g : p.grad()) CHECK(g == 2.0);
  }

  TEST_CASE("dropout mask is a pure function of the seed") {
    Tape tape;
    const Var x = tape.constant(Tensor(Shape{50, 20}, 1.0));
    const Var a = dropout(x, 0.5, 3);
    const Var b = dropout(x, 0.5, 3);
    const Var c = dropout(x, 0.5, 4);
    CHECK(a.value() == b.value());
    CHECK_FALSE(a.value() == c.value());
    const double kept = std::accumulate(a.value().data().begin(), a.value().data().end(), 0.0) / 2.0;
    CHECK(kept / 1000.0 == doctest::Approx(0.5).epsilon(0.1));
  }
}
