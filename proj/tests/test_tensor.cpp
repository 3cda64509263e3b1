#include <catch2/catch_amalgamated.hpp>

#include "dithead/optim.hpp"
#include "dithead/tensor.hpp"

using namespace dithead;

namespace {

Tensor<double> randn64(Shape shape, uint64_t seed, double std = 1.0) {
  Rng rng(seed);
  return Tensor<double>::randn(std::move(shape), rng, std);
}

}  // namespace

TEST_CASE("matmul identity and zero cases") {
  Rng rng(7);
  Tensor<double> a = Tensor<double>::randn({3, 5}, rng);
  Tensor<double> eye = Tensor<double>::zeros({3, 3});
  for (int i = 0; i < 3; ++i) eye.data()[i * 3 + i] = 1.0;
  Tensor<double> out = matmul(eye, a);
  for (int64_t i = 0; i < a.numel(); ++i) REQUIRE(out.data()[i] == a.data()[i]);

  Tensor<double> z = Tensor<double>::zeros({5, 4});
  Tensor<double> az = matmul(a, z);
  REQUIRE(az.shape() == Shape{3, 4});
  for (int64_t i = 0; i < az.numel(); ++i) REQUIRE(az.data()[i] == 0.0);
}

TEST_CASE("matmul rejects mismatched inner dims") {
  Rng rng(3);
  Tensor<double> a = Tensor<double>::randn({4, 5}, rng);
  Tensor<double> b = Tensor<double>::randn({4, 3}, rng);
  REQUIRE_THROWS_AS(matmul(a, b), DimensionError);
}

TEST_CASE("matmul gradients match finite differences") {
  Tensor<double> b0 = randn64({5, 3}, 21);
  auto f_a = [&](Tensor<double>& x) { return sum_all(mul(matmul(x, b0), matmul(x, b0))); };
  REQUIRE(grad_check<double>(f_a, randn64({4, 5}, 22), 1e-5) < 1e-4);

  Tensor<double> a0 = randn64({4, 5}, 23);
  auto f_b = [&](Tensor<double>& x) { return sum_all(mul(matmul(a0, x), matmul(a0, x))); };
  REQUIRE(grad_check<double>(f_b, randn64({5, 3}, 24), 1e-5) < 1e-4);
}

TEST_CASE("batched matmul with shared and batched rhs") {
  Rng rng(11);
  Tensor<double> a = Tensor<double>::randn({2, 3, 4}, rng);
  Tensor<double> w = Tensor<double>::randn({4, 5}, rng);
  Tensor<double> out = matmul(a, w);
  REQUIRE(out.shape() == Shape{2, 3, 5});
  // each batch slice equals the 2-d product
  for (int b = 0; b < 2; ++b) {
    Tensor<double> slice_a =
        Tensor<double>::from_data({3, 4}, std::vector<double>(a.data() + b * 12, a.data() + (b + 1) * 12));
    Tensor<double> expect = matmul(slice_a, w);
    for (int i = 0; i < 15; ++i) REQUIRE(out.data()[b * 15 + i] == Catch::Approx(expect.data()[i]));
  }
  auto f = [&](Tensor<double>& x) { return sum_all(mul(matmul(a, x), matmul(a, x))); };
  REQUIRE(grad_check<double>(f, randn64({4, 5}, 31), 1e-5) < 1e-4);

  Tensor<double> bb = Tensor<double>::randn({2, 4, 5}, rng);
  REQUIRE(matmul(a, bb).shape() == Shape{2, 3, 5});
  auto fb = [&](Tensor<double>& x) { return sum_all(mul(matmul(a, x), matmul(a, x))); };
  REQUIRE(grad_check<double>(fb, randn64({2, 4, 5}, 32), 1e-5) < 1e-4);
}

TEST_CASE("softmax of a constant vector is uniform") {
  Tensor<double> x = Tensor<double>::full({5}, 3.25);
  Tensor<double> y = softmax(x, 0);
  for (int i = 0; i < 5; ++i) REQUIRE(y.data()[i] == Catch::Approx(0.2).margin(1e-12));
}

TEST_CASE("softmax saturates without overflow") {
  Tensor<double> x = Tensor<double>::from_data({3}, {1000.0, 0.0, 0.0});
  Tensor<double> y = softmax(x, 0);
  REQUIRE(std::isfinite(y.data()[0]));
  REQUIRE(y.data()[0] == Catch::Approx(1.0).margin(1e-6));
  REQUIRE(y.data()[1] == Catch::Approx(0.0).margin(1e-6));
  REQUIRE(y.data()[2] == Catch::Approx(0.0).margin(1e-6));
}

TEST_CASE("softmax rows sum to one on every axis") {
  Rng rng(5);
  Tensor<double> x = Tensor<double>::randn({3, 4, 5}, rng);
  for (int axis = 0; axis < 3; ++axis) {
    Tensor<double> y = softmax(x, axis);
    // sum along the axis must be 1 for every slice
    int64_t outer = 1, inner = 1;
    int len = x.dim(axis);
    for (int i = 0; i < axis; ++i) outer *= x.dim(i);
    for (int i = axis + 1; i < 3; ++i) inner *= x.dim(i);
    for (int64_t o = 0; o < outer; ++o)
      for (int64_t in = 0; in < inner; ++in) {
        double s = 0.0;
        for (int i = 0; i < len; ++i) s += y.data()[o * len * inner + i * inner + in];
        REQUIRE(s == Catch::Approx(1.0).margin(1e-6));
      }
  }
}

TEST_CASE("softmax gradient matches finite differences") {
  Tensor<double> w = randn64({6}, 40);
  auto f = [&](Tensor<double>& x) { return sum_all(mul(softmax(x, 0), w)); };
  REQUIRE(grad_check<double>(f, randn64({6}, 41), 1e-6) < 1e-4);
}

TEST_CASE("layernorm of constant input returns the bias") {
  Tensor<double> x = Tensor<double>::full({2, 8}, 4.0);
  Tensor<double> g = Tensor<double>::full({8}, 1.5);
  Tensor<double> b = Tensor<double>::from_data({8}, {1, 2, 3, 4, 5, 6, 7, 8});
  Tensor<double> y = layernorm(x, g, b);
  for (int r = 0; r < 2; ++r)
    for (int i = 0; i < 8; ++i) REQUIRE(y.data()[r * 8 + i] == Catch::Approx(b.data()[i]).margin(1e-9));
}

TEST_CASE("layernorm gradients match finite differences") {
  Tensor<double> g = randn64({6}, 50, 0.5);
  Tensor<double> b = randn64({6}, 51);
  Tensor<double> w = randn64({3, 6}, 52);
  auto f_x = [&](Tensor<double>& x) { return sum_all(mul(layernorm(x, g, b), w)); };
  REQUIRE(grad_check<double>(f_x, randn64({3, 6}, 53), 1e-6) < 1e-4);
  Tensor<double> x0 = randn64({3, 6}, 54);
  auto f_g = [&](Tensor<double>& gg) { return sum_all(mul(layernorm(x0, gg, b), w)); };
  REQUIRE(grad_check<double>(f_g, randn64({6}, 55), 1e-6) < 1e-4);
  auto f_b = [&](Tensor<double>& bb) { return sum_all(mul(layernorm(x0, g, bb), w)); };
  REQUIRE(grad_check<double>(f_b, randn64({6}, 56), 1e-6) < 1e-4);
}

TEST_CASE("conv2d with 1x1 identity kernel preserves the input") {
  Rng rng(9);
  Tensor<double> x = Tensor<double>::randn({2, 5, 6, 3}, rng);
  Tensor<double> k = Tensor<double>::zeros({1, 1, 3, 3});
  for (int c = 0; c < 3; ++c) k.data()[c * 3 + c] = 1.0;
  Tensor<double> y = conv2d(x, k, 1, 0);
  REQUIRE(y.shape() == x.shape());
  for (int64_t i = 0; i < x.numel(); ++i) REQUIRE(y.data()[i] == Catch::Approx(x.data()[i]).margin(1e-12));
}

TEST_CASE("conv2d strided shapes and gradients") {
  Tensor<double> k0 = randn64({4, 4, 2, 3}, 60, 0.3);
  Tensor<double> x0 = randn64({1, 8, 8, 2}, 61);
  Tensor<double> y = conv2d(x0, k0, 2, 1);
  REQUIRE(y.shape() == Shape{1, 4, 4, 3});

  auto f_x = [&](Tensor<double>& x) { return sum_all(mul(conv2d(x, k0, 2, 1), conv2d(x, k0, 2, 1))); };
  REQUIRE(grad_check<double>(f_x, x0, 1e-5) < 1e-4);
  auto f_k = [&](Tensor<double>& k) { return sum_all(mul(conv2d(x0, k, 2, 1), conv2d(x0, k, 2, 1))); };
  REQUIRE(grad_check<double>(f_k, k0, 1e-5) < 1e-4);
  Tensor<double> b0 = randn64({3}, 62);
  auto f_b = [&](Tensor<double>& b) { return sum_all(mul(conv2d(x0, k0, 2, 1, b), conv2d(x0, k0, 2, 1, b))); };
  REQUIRE(grad_check<double>(f_b, b0, 1e-5) < 1e-4);
}

TEST_CASE("linear and gelu gradients match finite differences") {
  Tensor<double> w = randn64({4, 6}, 70, 0.5);
  Tensor<double> b = randn64({4}, 71);
  auto f_x = [&](Tensor<double>& x) { return sum_all(mul(linear(x, w, b), linear(x, w, b))); };
  REQUIRE(grad_check<double>(f_x, randn64({3, 6}, 72), 1e-5) < 1e-4);
  Tensor<double> x0 = randn64({3, 6}, 73);
  auto f_w = [&](Tensor<double>& ww) { return sum_all(mul(linear(x0, ww, b), linear(x0, ww, b))); };
  REQUIRE(grad_check<double>(f_w, w, 1e-5) < 1e-4);
  auto f_g = [&](Tensor<double>& x) { return sum_all(mul(gelu(x), gelu(x))); };
  REQUIRE(grad_check<double>(f_g, randn64({10}, 74), 1e-6) < 1e-4);
}

TEST_CASE("shape ops round-trip and backpropagate") {
  Rng rng(80);
  Tensor<double> x = Tensor<double>::randn({2, 3, 4}, rng);
  Tensor<double> p = permute(x, {2, 0, 1});
  REQUIRE(p.shape() == Shape{4, 2, 3});
  Tensor<double> back = permute(p, {1, 2, 0});
  for (int64_t i = 0; i < x.numel(); ++i) REQUIRE(back.data()[i] == x.data()[i]);

  Tensor<double> w = randn64({2, 3, 4}, 81);
  auto f_p = [&](Tensor<double>& t) { return sum_all(mul(permute(permute(t, {2, 0, 1}), {1, 2, 0}), w)); };
  REQUIRE(grad_check<double>(f_p, randn64({2, 3, 4}, 82), 1e-6) < 1e-4);

  Tensor<double> a = randn64({2, 3}, 83);
  Tensor<double> b = randn64({2, 2}, 84);
  Tensor<double> cat = concat<double>({a, b}, 1);
  REQUIRE(cat.shape() == Shape{2, 5});
  Tensor<double> sa = slice(cat, 1, 0, 3);
  Tensor<double> sb = slice(cat, 1, 3, 2);
  for (int64_t i = 0; i < a.numel(); ++i) REQUIRE(sa.data()[i] == a.data()[i]);
  for (int64_t i = 0; i < b.numel(); ++i) REQUIRE(sb.data()[i] == b.data()[i]);

  Tensor<double> wc = randn64({2, 5}, 85);
  auto f_c = [&](Tensor<double>& t) { return sum_all(mul(concat<double>({t, b}, 1), wc)); };
  REQUIRE(grad_check<double>(f_c, a, 1e-6) < 1e-4);
  auto f_s = [&](Tensor<double>& t) { return sum_all(mul(slice(t, 1, 1, 3), randn64({2, 3}, 86))); };
  REQUIRE(grad_check<double>(f_s, randn64({2, 5}, 87), 1e-6) < 1e-4);
}

TEST_CASE("gather_rows selects rows and scatters gradients") {
  Tensor<double> table = randn64({6, 3}, 90);
  std::vector<int> idx{4, 0, 4, 2};
  Tensor<double> rows = gather_rows(table, idx);
  REQUIRE(rows.shape() == Shape{4, 3});
  for (int i = 0; i < 4; ++i)
    for (int c = 0; c < 3; ++c) REQUIRE(rows.data()[i * 3 + c] == table.data()[idx[size_t(i)] * 3 + c]);
  Tensor<double> w = randn64({4, 3}, 91);
  auto f = [&](Tensor<double>& t) { return sum_all(mul(gather_rows(t, idx), w)); };
  REQUIRE(grad_check<double>(f, table, 1e-6) < 1e-4);
  REQUIRE_THROWS_AS(gather_rows(table, std::vector<int>{6}), ParameterError);
}

TEST_CASE("upsample and add_suffix gradients") {
  auto f_u = [&](Tensor<double>& x) {
    return sum_all(mul(upsample_nearest2(x), upsample_nearest2(x)));
  };
  REQUIRE(grad_check<double>(f_u, randn64({1, 3, 2, 2}, 95), 1e-6) < 1e-4);
  Tensor<double> pos = randn64({4, 3}, 96);
  auto f_s = [&](Tensor<double>& x) { return sum_all(mul(add_suffix(x, pos), add_suffix(x, pos))); };
  REQUIRE(grad_check<double>(f_s, randn64({2, 4, 3}, 97), 1e-6) < 1e-4);
  Tensor<double> x0 = randn64({2, 4, 3}, 98);
  auto f_b = [&](Tensor<double>& p) { return sum_all(mul(add_suffix(x0, p), add_suffix(x0, p))); };
  REQUIRE(grad_check<double>(f_b, pos, 1e-6) < 1e-4);
}

TEST_CASE("grad_check is exact for linear functions") {
  auto f = [](Tensor<double>& x) { return sum_all(x); };
  REQUIRE(grad_check<double>(f, randn64({7}, 100), 1e-4) < 1e-12);
}

TEST_CASE("grad_check on sum of squares at ones") {
  Tensor<double> x = Tensor<double>::full({5}, 1.0);
  x.set_requires_grad(true);
  Tensor<double> y = sum_all(mul(x, x));
  backward(y);
  for (int i = 0; i < 5; ++i) REQUIRE(x.grad()[i] == Catch::Approx(2.0).margin(1e-12));
  auto f = [](Tensor<double>& t) { return sum_all(mul(t, t)); };
  REQUIRE(grad_check<double>(f, Tensor<double>::full({5}, 1.0), 1e-5) < 1e-9);
}

TEST_CASE("grad_check flags non-finite values") {
  auto f = [](Tensor<double>& x) {
    Tensor<double> y = sum_all(x);
    y.data()[0] = std::numeric_limits<double>::infinity();
    return y;
  };
  REQUIRE_THROWS_AS(grad_check<double>(f, randn64({3}, 101), 1e-5), NumericError);
}

TEST_CASE("every differentiable op passes randomized gradient checks") {
  // ten seeds per op family, double precision
  for (uint64_t seed = 1; seed <= 10; ++seed) {
    Tensor<double> w1 = randn64({4, 5}, seed * 1000 + 1);
    auto f_mm = [&](Tensor<double>& x) { return sum_all(mul(matmul(x, w1), matmul(x, w1))); };
    REQUIRE(grad_check<double>(f_mm, randn64({3, 4}, seed * 1000 + 2), 1e-5) < 1e-3);

    auto f_sm = [&](Tensor<double>& x) { return sum_all(mul(softmax(x, 1), randn64({3, 4}, seed * 1000 + 3))); };
    REQUIRE(grad_check<double>(f_sm, randn64({3, 4}, seed * 1000 + 4), 1e-6) < 1e-3);

    Tensor<double> g = randn64({5}, seed * 1000 + 5, 0.3);
    Tensor<double> b = randn64({5}, seed * 1000 + 6);
    auto f_ln = [&](Tensor<double>& x) {
      return sum_all(mul(layernorm(x, g, b), randn64({2, 5}, seed * 1000 + 7)));
    };
    REQUIRE(grad_check<double>(f_ln, randn64({2, 5}, seed * 1000 + 8), 1e-6) < 1e-3);

    Tensor<double> k = randn64({3, 3, 2, 2}, seed * 1000 + 9, 0.4);
    auto f_cv = [&](Tensor<double>& x) { return sum_all(mul(conv2d(x, k, 1, 1), conv2d(x, k, 1, 1))); };
    REQUIRE(grad_check<double>(f_cv, randn64({1, 5, 5, 2}, seed * 1000 + 10), 1e-5) < 1e-3);

    auto f_gelu = [&](Tensor<double>& x) { return sum_all(mul(gelu(x), gelu(x))); };
    REQUIRE(grad_check<double>(f_gelu, randn64({8}, seed * 1000 + 11), 1e-6) < 1e-3);

    auto f_abs = [&](Tensor<double>& x) { return mean_all(abs_val(x)); };
    REQUIRE(grad_check<double>(f_abs, randn64({8}, seed * 1000 + 12), 1e-7) < 1e-3);

    auto f_lr = [&](Tensor<double>& x) { return sum_all(mul(leaky_relu(x), leaky_relu(x))); };
    REQUIRE(grad_check<double>(f_lr, randn64({8}, seed * 1000 + 13), 1e-7) < 1e-3);
  }
}

TEST_CASE("forward passes are deterministic") {
  Rng rng(123);
  Tensor<float> a = Tensor<float>::randn({16, 16}, rng);
  Tensor<float> b = Tensor<float>::randn({16, 16}, rng);
  Tensor<float> y1 = matmul(a, b);
  Tensor<float> y2 = matmul(a, b);
  for (int64_t i = 0; i < y1.numel(); ++i) REQUIRE(y1.data()[i] == y2.data()[i]);
  Tensor<float> s1 = softmax(a, 1);
  Tensor<float> s2 = softmax(a, 1);
  for (int64_t i = 0; i < s1.numel(); ++i) REQUIRE(s1.data()[i] == s2.data()[i]);
}

TEST_CASE("backward frees the tape but keeps leaf gradients") {
  Tensor<double> x = randn64({4}, 130);
  x.set_requires_grad(true);
  Tensor<double> y = sum_all(mul(x, x));
  REQUIRE(y.node()->parents.size() > 0);
  backward(y);
  REQUIRE(y.node()->parents.empty());
  REQUIRE(x.has_grad());
  // second backward through the freed tape is a no-op structure-wise
  REQUIRE(x.grad_vec().size() == 4);
}

TEST_CASE("no_grad mode suppresses graph recording") {
  Tensor<double> x = randn64({4}, 140);
  x.set_requires_grad(true);
  NoGradGuard ng;
  Tensor<double> y = mul(x, x);
  REQUIRE_FALSE(y.requires_grad());
  REQUIRE(y.node()->parents.empty());
}

TEST_CASE("adam reduces a quadratic objective") {
  Tensor<float> x = Tensor<float>::full({8}, 5.0f);
  Adam<float> opt({x}, 0.1);
  for (int i = 0; i < 200; ++i) {
    Tensor<float> loss = sum_all(mul(x, x));
    backward(loss);
    opt.step();
    opt.zero_grad();
  }
  for (int i = 0; i < 8; ++i) REQUIRE(std::abs(x.data()[i]) < 0.5f);
}
