#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <vector>

#include "dkd/rng.hpp"
#include "dkd/tensor.hpp"
#include "support/finite_diff.hpp"
#include "support/naive_ops.hpp"

using namespace dkd;
using dkd::testing::check_gradients;

namespace {

Tensor random_leaf(std::vector<int> shape, Rng& rng, bool requires_grad = true,
                   double lo = -1.0, double hi = 1.0) {
  std::int64_t n = 1;
  for (int d : shape) n *= d;
  std::vector<double> v(n);
  for (auto& x : v) x = rng.uniform(lo, hi);
  return Tensor::from(std::move(v), std::move(shape), requires_grad);
}

}  // namespace

// ---------------------------------------------------------------------------
// Gradient checks (central differences vs. the tape)
// ---------------------------------------------------------------------------

TEST_CASE("gradcheck: elementwise chain with tensor reuse") {
  Rng rng(7);
  Tensor a = random_leaf({3, 4}, rng);
  Tensor b = random_leaf({3, 4}, rng);
  // a participates twice (diamond): catches double-visit bugs in the sweep.
  auto fn = [&] { return sum(mul(add(a, b), sub(scalar_affine(a, 2.0, 0.3), b))); };
  auto r = check_gradients({a, b}, fn);
  CHECK(r.entries == 24);
  CHECK(r.max_rel_err < 1e-6);
}

TEST_CASE("gradcheck: tanh and relu away from the kink") {
  Rng rng(11);
  Tensor a = random_leaf({2, 5}, rng, true, 0.1, 0.9);
  Tensor b = random_leaf({2, 5}, rng, true, -0.9, -0.1);
  auto fn = [&] { return sum(add(relu(tanh_t(a)), relu(b))); };
  auto r = check_gradients({a, b}, fn);
  CHECK(r.max_rel_err < 1e-6);
}

TEST_CASE("gradcheck: matmul + add_bias (both operands)") {
  Rng rng(13);
  Tensor x = random_leaf({4, 3}, rng);
  Tensor w = random_leaf({3, 5}, rng);
  Tensor b = random_leaf({5}, rng);
  auto fn = [&] { return mean(tanh_t(add_bias(matmul(x, w), b))); };
  auto r = check_gradients({x, w, b}, fn);
  CHECK(r.max_rel_err < 1e-6);
}

TEST_CASE("gradcheck: conv2d f64, all three operands") {
  Rng rng(17);
  Tensor x = random_leaf({2, 2, 5, 4}, rng);
  Tensor w = random_leaf({3, 2, 3, 3}, rng);
  Tensor b = random_leaf({3}, rng);
  auto fn = [&] { return mean(tanh_t(reshape(conv2d(x, w, b), {2, 3 * 5 * 4}))); };
  auto r = check_gradients({x, w, b}, fn);
  CHECK(r.max_rel_err < 1e-5);
}

TEST_CASE("gradcheck: maxpool2 and global_avg_pool") {
  Rng rng(19);
  Tensor x = random_leaf({2, 3, 4, 4}, rng);
  auto fn = [&] { return sum(tanh_t(global_avg_pool(maxpool2(x)))); };
  auto r = check_gradients({x}, fn);
  CHECK(r.max_rel_err < 1e-6);
}

TEST_CASE("gradcheck: softmax -> cross-entropy composite") {
  Rng rng(23);
  Tensor z = random_leaf({4, 6}, rng, true, -2.0, 2.0);
  const std::vector<int> labels{0, 3, 5, 2};
  auto fn = [&] { return cross_entropy_mean(softmax_rows(z), labels); };
  auto r = check_gradients({z}, fn);
  CHECK(r.max_rel_err < 1e-6);
}

TEST_CASE("gradcheck: log_softmax weighted sum") {
  Rng rng(29);
  Tensor z = random_leaf({3, 5}, rng, true, -2.0, 2.0);
  Tensor wts = random_leaf({3, 5}, rng, false, 0.1, 1.0);
  auto fn = [&] { return sum(mul(wts, log_softmax_rows(z))); };
  auto r = check_gradients({z}, fn);
  CHECK(r.max_rel_err < 1e-6);
}

TEST_CASE("gradcheck: dot, l2_norm, select_scalar, reshape") {
  Rng rng(31);
  Tensor a = random_leaf({6}, rng);
  Tensor b = random_leaf({6}, rng);
  auto fn = [&] {
    Tensor d = dot(a, b);
    Tensor n = l2_norm(reshape(a, {2, 3}));
    Tensor s = select_scalar(b, 4);
    return add(add(d, n), s);
  };
  auto r = check_gradients({a, b}, fn);
  CHECK(r.max_rel_err < 1e-6);
}

TEST_CASE("gradcheck: cosine similarity, both sides") {
  Rng rng(37);
  Tensor a = random_leaf({4, 7}, rng, true, 0.2, 1.0);
  Tensor b = random_leaf({4, 7}, rng, true, 0.2, 1.0);
  auto fn = [&] { return cosine_similarity_mean(a, b); };
  auto r = check_gradients({a, b}, fn);
  CHECK(r.max_rel_err < 1e-6);
}

TEST_CASE("gradcheck: cosine similarity with a masked zero-norm row") {
  // Row 1 of a is exactly zero: it must contribute nothing, with zero grad.
  Tensor a = Tensor::from({0.5, 0.25, 0.0, 0.0}, {2, 2}, true);
  Tensor b = Tensor::from({0.3, 0.8, 0.4, 0.9}, {2, 2}, true);
  CosineStats stats;
  Tensor c = cosine_similarity_mean(a, b, &stats);
  CHECK(stats.zero_norm_rows == 1);
  // FDM only perturbs b: nudging the zero row itself would step across the
  // mask discontinuity, where finite differences do not apply.
  auto fn = [&] { return cosine_similarity_mean(a, b); };
  auto r = check_gradients({b}, fn);
  CHECK(r.max_rel_err < 1e-6);
  backward(c);
  CHECK(a.grad()[2] == 0.0);
  CHECK(a.grad()[3] == 0.0);
}

// ---------------------------------------------------------------------------
// Value oracles (naive reference kernels, hand examples)
// ---------------------------------------------------------------------------

TEST_CASE("matmul matches the naive triple loop") {
  Rng rng(41);
  Tensor a = random_leaf({7, 9}, rng, false);
  Tensor b = random_leaf({9, 5}, rng, false);
  auto ref = dkd::testing::naive_matmul(a.values(), b.values(), 7, 9, 5);
  Tensor c64 = matmul(a, b, Precision::f64);
  Tensor c32 = matmul(a, b, Precision::f32);
  for (std::size_t i = 0; i < ref.size(); ++i) {
    CHECK(c64.values()[i] == doctest::Approx(ref[i]).epsilon(1e-12));
    CHECK(c32.values()[i] == doctest::Approx(ref[i]).epsilon(5e-4));
  }
}

TEST_CASE("conv2d matches direct summation in both precisions") {
  Rng rng(43);
  for (auto [kh, kw] : {std::pair{3, 3}, std::pair{1, 1}, std::pair{5, 3}}) {
    Tensor x = random_leaf({2, 3, 6, 5}, rng, false);
    Tensor w = random_leaf({4, 3, kh, kw}, rng, false);
    Tensor b = random_leaf({4}, rng, false);
    auto ref = dkd::testing::naive_conv2d(x.values(), w.values(), b.values(), 2, 3, 6, 5, 4, kh, kw);
    Tensor y64 = conv2d(x, w, b, Precision::f64);
    Tensor y32 = conv2d(x, w, b, Precision::f32);
    REQUIRE(y64.numel() == static_cast<std::int64_t>(ref.size()));
    for (std::size_t i = 0; i < ref.size(); ++i) {
      CHECK(y64.values()[i] == doctest::Approx(ref[i]).epsilon(1e-12));
      CHECK(y32.values()[i] == doctest::Approx(ref[i]).epsilon(5e-4));
    }
  }
}

TEST_CASE("softmax rows are simplex points; log_softmax agrees") {
  Rng rng(47);
  Tensor z = random_leaf({5, 8}, rng, false, -30.0, 30.0);
  Tensor p = softmax_rows(z);
  Tensor lp = log_softmax_rows(z);
  for (int i = 0; i < 5; ++i) {
    double s = 0.0;
    for (int j = 0; j < 8; ++j) {
      const double pij = p.values()[i * 8 + j];
      CHECK(pij > 0.0);
      s += pij;
      CHECK(std::log(pij) == doctest::Approx(lp.values()[i * 8 + j]).epsilon(1e-9));
    }
    CHECK(s == doctest::Approx(1.0).epsilon(1e-12));
  }
}

TEST_CASE("maxpool2 and global_avg_pool hand example") {
  Tensor x = Tensor::from({1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11, 12, 13, 14, 15, 16}, {1, 1, 4, 4});
  Tensor mp = maxpool2(x);
  CHECK(mp.values() == std::vector<double>{6, 8, 14, 16});
  Tensor gap = global_avg_pool(x);
  CHECK(gap.values()[0] == doctest::Approx(8.5));
}

TEST_CASE("cross-entropy hand values and clamp semantics") {
  Tensor p = Tensor::from({0.7, 0.2, 0.1}, {1, 3}, true);
  Tensor ce = cross_entropy_mean(p, {0});
  CHECK(ce.value() == doctest::Approx(0.35667494393873245).epsilon(1e-12));

  // A zero probability is clamped at 1e-12 and its gradient vanishes there.
  Tensor q = Tensor::from({0.0, 1.0}, {1, 2}, true);
  Tensor ce0 = cross_entropy_mean(q, {0});
  CHECK(ce0.value() == doctest::Approx(-std::log(1e-12)).epsilon(1e-12));
  backward(ce0);
  CHECK(q.grad()[0] == 0.0);
}

TEST_CASE("cosine similarity hand values") {
  Tensor a = Tensor::from({1, 0, 0, 1}, {2, 2});
  Tensor b = Tensor::from({0, 1, 0, 2}, {2, 2});
  // row 0: orthogonal (0), row 1: parallel (1) -> mean 0.5
  CHECK(cosine_similarity_mean(a, b).value() == doctest::Approx(0.5).epsilon(1e-12));
}

// ---------------------------------------------------------------------------
// Tape contracts
// ---------------------------------------------------------------------------

TEST_CASE("backward: double sweep is rejected until reset") {
  Tensor a = Tensor::from({1.0, 2.0}, {2}, true);
  Tensor loss = sum(mul(a, a));
  backward(loss);
  CHECK(a.grad()[0] == doctest::Approx(2.0));
  CHECK_THROWS_AS(backward(loss), std::logic_error);
  loss.zero_grad();
  backward(loss);  // accumulates on top of the first sweep
  CHECK(a.grad()[0] == doctest::Approx(4.0));
}

TEST_CASE("backward: rejects non-scalar and grad-free roots") {
  Tensor a = Tensor::from({1.0, 2.0}, {2}, true);
  CHECK_THROWS_AS(backward(add(a, a)), std::invalid_argument);
  Tensor c = Tensor::from({1.0}, {1}, false);
  CHECK_THROWS_AS(backward(c), std::invalid_argument);
}

TEST_CASE("grad accumulation across separate graphs") {
  Tensor a = Tensor::from({3.0}, {1}, true);
  backward(mul(a, a));
  backward(mul(a, a));
  CHECK(a.grad()[0] == doctest::Approx(12.0));  // 2 * (2a)
}

TEST_CASE("shape and domain errors") {
  Tensor a = Tensor::from({1, 2, 3, 4}, {2, 2});
  Tensor b = Tensor::from({1, 2, 3, 4, 5, 6}, {2, 3});
  CHECK_THROWS_AS(add(a, b), std::invalid_argument);
  CHECK_THROWS_AS(matmul(a, Tensor::from({1, 2, 3}, {3, 1})), std::invalid_argument);
  CHECK_THROWS_AS(conv2d(Tensor::zeros({1, 1, 4, 4}), Tensor::zeros({1, 1, 2, 2}),
                         Tensor::zeros({1})),
                  std::invalid_argument);  // even kernel
  CHECK_THROWS_AS(conv2d(Tensor::zeros({1, 2, 4, 4}), Tensor::zeros({1, 1, 3, 3}),
                         Tensor::zeros({1})),
                  std::invalid_argument);  // channel mismatch
  CHECK_THROWS_AS(maxpool2(Tensor::zeros({1, 1, 5, 4})), std::invalid_argument);
  CHECK_THROWS_AS(cross_entropy_mean(a, {0, 5}), std::invalid_argument);  // label range
  CHECK_THROWS_AS(cross_entropy_mean(a, {0}), std::invalid_argument);     // label count
  CHECK_THROWS_AS(select_scalar(a, 4), std::invalid_argument);
  CHECK_THROWS_AS(reshape(a, {3, 2}), std::invalid_argument);
  CHECK_THROWS_AS(Tensor::from({std::nan("")}, {1}), std::runtime_error);
  Tensor nonleaf = add(a, a);
  CHECK_THROWS_AS(nonleaf.mutable_values(), std::logic_error);
  CHECK_THROWS_AS(nonleaf.set_requires_grad(true), std::logic_error);
}

// ---------------------------------------------------------------------------
// Adam
// ---------------------------------------------------------------------------

TEST_CASE("adam: first step moves every coordinate by ~lr against the gradient") {
  Tensor p = Tensor::from({0.5, -0.2, 1.5}, {3}, true);
  const std::vector<double> before = p.values();
  std::vector<Tensor> params{p};
  AdamState st;
  AdamConfig cfg;
  cfg.lr = 0.01;
  backward(sum(mul(p, p)));  // grad = 2p, nonzero everywhere
  const std::vector<double> g = p.grad();
  adam_step(params, st, cfg);
  for (int i = 0; i < 3; ++i) {
    const double step = p.values()[i] - before[i];
    CHECK(std::abs(std::abs(step) - cfg.lr) < 1e-6);
    CHECK(step * g[i] < 0.0);
  }
  CHECK(st.t == 1);
  // grads were consumed
  CHECK(p.grad()[0] == 0.0);
}

TEST_CASE("adam: snap_to_f32 keeps parameters on the float grid") {
  Tensor p = Tensor::from({0.123456789, -0.987654321}, {2}, true);
  std::vector<Tensor> params{p};
  AdamState st;
  AdamConfig cfg;
  cfg.lr = 1e-3;
  cfg.snap_to_f32 = true;
  for (int it = 0; it < 3; ++it) {
    backward(sum(mul(p, p)));
    adam_step(params, st, cfg);
    for (double v : p.values()) CHECK(v == static_cast<double>(static_cast<float>(v)));
  }
}

TEST_CASE("adam: non-finite gradient and state mismatch are rejected") {
  Tensor p = Tensor::from({1.0}, {1}, true);
  std::vector<Tensor> params{p};
  AdamState st;
  AdamConfig cfg;
  p.zero_grad();
  p.node()->grad[0] = std::nan("");
  CHECK_THROWS_AS(adam_step(params, st, cfg), std::runtime_error);

  Tensor q = Tensor::from({1.0, 2.0}, {2}, true);
  std::vector<Tensor> both{p, q};
  AdamState st2;
  p.zero_grad();
  q.zero_grad();
  adam_step(both, st2, cfg);
  CHECK_THROWS_AS(adam_step(params, st2, cfg), std::invalid_argument);
}

// ---------------------------------------------------------------------------
// Deterministic randomness
// ---------------------------------------------------------------------------

TEST_CASE("rng: identical seeds replay, different seeds diverge") {
  Rng a(123), b(123), c(124);
  bool same = true, diff = false;
  for (int i = 0; i < 100; ++i) {
    const double x = a.uniform(), y = b.uniform(), z = c.uniform();
    same = same && (x == y);
    diff = diff || (x != z);
    CHECK(x >= 0.0);
    CHECK(x < 1.0);
  }
  CHECK(same);
  CHECK(diff);

  std::vector<int> v1{1, 2, 3, 4, 5, 6, 7, 8}, v2{1, 2, 3, 4, 5, 6, 7, 8};
  Rng s1(9), s2(9);
  s1.shuffle(v1);
  s2.shuffle(v2);
  CHECK(v1 == v2);
}

TEST_CASE("rng: normal draws have sane first moments") {
  Rng r(2026);
  double s = 0.0, s2 = 0.0;
  const int n = 20000;
  for (int i = 0; i < n; ++i) {
    const double x = r.normal();
    s += x;
    s2 += x * x;
  }
  CHECK(std::abs(s / n) < 0.03);
  CHECK(std::abs(s2 / n - 1.0) < 0.05);
}
