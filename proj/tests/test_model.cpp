#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <array>
#include <cmath>
#include <vector>

#include "dkd/model.hpp"
#include "dkd/rng.hpp"
#include "dkd/tensor.hpp"
#include "support/finite_diff.hpp"

using namespace dkd;
using dkd::testing::check_gradients;

namespace {

Tensor random_image_batch(int n, std::array<int, 3> shp, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<double> v(static_cast<std::size_t>(n) * shp[0] * shp[1] * shp[2]);
  for (auto& x : v) x = rng.uniform();
  return Tensor::from(std::move(v), {n, shp[0], shp[1], shp[2]});
}

}  // namespace

TEST_CASE("architecture names round-trip") {
  for (Arch a : {Arch::toy, Arch::lenet_small, Arch::mnist, Arch::cifar10})
    CHECK(arch_from_string(to_string(a)) == a);
  CHECK_THROWS_AS(arch_from_string("resnet"), std::invalid_argument);
}

TEST_CASE("layer tables walk to the expected widths") {
  auto widths = [](Arch a) { return flattened_layer_widths(arch_layers(a), arch_input_shape(a)); };

  CHECK(widths(Arch::toy) == std::vector<int>{32, 10});
  CHECK(widths(Arch::lenet_small) == std::vector<int>{12544, 3136, 6272, 1568, 64, 10});
  CHECK(widths(Arch::mnist) ==
        std::vector<int>{25088, 25088, 6272, 12544, 12544, 3136, 200, 200, 10});
  CHECK(widths(Arch::cifar10) ==
        std::vector<int>{98304, 98304, 98304, 24576, 49152, 49152, 49152, 12288, 12288, 12288,
                         12288, 192, 10});

  // Default tap sits on the last hidden representation.
  CHECK(widths(Arch::toy)[default_tap(Arch::toy)] == 32);
  CHECK(widths(Arch::lenet_small)[default_tap(Arch::lenet_small)] == 64);
  CHECK(widths(Arch::mnist)[default_tap(Arch::mnist)] == 200);
  CHECK(widths(Arch::cifar10)[default_tap(Arch::cifar10)] == 192);
}

TEST_CASE("layer grammar violations are rejected") {
  using K = LayerKind;
  auto walk = [](std::vector<LayerSpec> specs, std::array<int, 3> in) {
    return flattened_layer_widths(specs, in);
  };

  // pooling an odd spatial dim (28 -> 14 -> 7 -> pool)
  CHECK_THROWS_AS(walk({{K::conv_relu, 4, 3, 3},
                        {K::max_pool},
                        {K::max_pool},
                        {K::max_pool},
                        {K::softmax_head, 10}},
                       {1, 28, 28}),
                  std::invalid_argument);
  // conv after flattening
  CHECK_THROWS_AS(walk({{K::dense_relu, 8}, {K::conv_relu, 4, 3, 3}, {K::softmax_head, 10}},
                       {1, 8, 8}),
                  std::invalid_argument);
  // even kernel
  CHECK_THROWS_AS(walk({{K::conv_relu, 4, 2, 2}, {K::softmax_head, 10}}, {1, 8, 8}),
                  std::invalid_argument);
  // head must be last and unique
  CHECK_THROWS_AS(walk({{K::softmax_head, 10}, {K::dense_relu, 8}}, {1, 8, 8}),
                  std::invalid_argument);
  CHECK_THROWS_AS(walk({{K::dense_relu, 8}}, {1, 8, 8}), std::invalid_argument);
  CHECK_THROWS_AS(walk({}, {1, 8, 8}), std::invalid_argument);
  // GAP after flattening
  CHECK_THROWS_AS(walk({{K::dense_relu, 8}, {K::global_avg_pool}, {K::softmax_head, 10}},
                       {1, 8, 8}),
                  std::invalid_argument);

  // tap bounds enforced at construction and on retarget
  CHECK_THROWS_AS(ModelGraph(arch_layers(Arch::toy), {1, 8, 8}, 2, 1), std::invalid_argument);
  CHECK_THROWS_AS(ModelGraph(arch_layers(Arch::toy), {1, 8, 8}, -1, 1), std::invalid_argument);
  ModelGraph m = build_model(Arch::toy, 1);
  CHECK_THROWS_AS(m.set_tap(2), std::invalid_argument);
}

TEST_CASE("parameter layout, init grid, and seed determinism") {
  ModelGraph m = build_model(Arch::toy, 7);
  CHECK(m.precision() == Precision::f64);
  CHECK(m.arch_tag() == Arch::toy);
  REQUIRE(m.parameters().size() == 4);
  CHECK(m.parameters()[0].shape() == std::vector<int>{64, 32});  // dense w (in x out)
  CHECK(m.parameters()[1].shape() == std::vector<int>{32});      // dense b
  CHECK(m.parameters()[2].shape() == std::vector<int>{32, 10});  // head w
  CHECK(m.parameters()[3].shape() == std::vector<int>{10});      // head b

  // biases zero; weights inside the He-uniform limit and on the f32 grid
  for (double v : m.parameters()[1].values()) CHECK(v == 0.0);
  const double limit = std::sqrt(6.0 / 64.0);
  for (double v : m.parameters()[0].values()) {
    CHECK(std::abs(v) <= limit);
    CHECK(v == static_cast<double>(static_cast<float>(v)));
  }

  ModelGraph m2 = build_model(Arch::toy, 7);
  ModelGraph m3 = build_model(Arch::toy, 8);
  bool same = true, differ = false;
  for (std::size_t p = 0; p < 4; ++p) {
    if (m.parameters()[p].values() != m2.parameters()[p].values()) same = false;
    if (m.parameters()[p].values() != m3.parameters()[p].values()) differ = true;
  }
  CHECK(same);
  CHECK(differ);

  ModelGraph lenet = build_model(Arch::lenet_small, 3);
  CHECK(lenet.precision() == Precision::f32);
  REQUIRE(lenet.parameters().size() == 8);
  CHECK(lenet.parameters()[0].shape() == std::vector<int>{16, 1, 3, 3});
  CHECK(lenet.parameters()[2].shape() == std::vector<int>{32, 16, 3, 3});
  CHECK(lenet.parameters()[4].shape() == std::vector<int>{1568, 64});
  CHECK(lenet.parameters()[6].shape() == std::vector<int>{64, 10});
}

TEST_CASE("forward produces logits, row-stochastic probs, and the tap latent") {
  ModelGraph m = build_model(Arch::toy, 11);
  Tensor x = random_image_batch(3, {1, 8, 8}, 21);
  ForwardResult r = m.forward(x);

  CHECK(r.logits.shape() == std::vector<int>{3, 10});
  CHECK(r.probs.shape() == std::vector<int>{3, 10});
  CHECK(r.latent.shape() == std::vector<int>{3, 32});
  CHECK(m.num_classes() == 10);
  CHECK(m.latent_dim() == 32);

  for (int i = 0; i < 3; ++i) {
    double row = 0.0;
    for (int j = 0; j < 10; ++j) row += r.probs.values()[i * 10 + j];
    CHECK(std::abs(row - 1.0) < 1e-12);
  }
  // probs agree with a direct softmax of the reported logits
  for (int i = 0; i < 3; ++i) {
    double mx = r.logits.values()[i * 10];
    for (int j = 1; j < 10; ++j) mx = std::max(mx, r.logits.values()[i * 10 + j]);
    double denom = 0.0;
    for (int j = 0; j < 10; ++j) denom += std::exp(r.logits.values()[i * 10 + j] - mx);
    for (int j = 0; j < 10; ++j)
      CHECK(std::abs(std::exp(r.logits.values()[i * 10 + j] - mx) / denom -
                     r.probs.values()[i * 10 + j]) < 1e-12);
  }
  for (double v : r.latent.values()) CHECK(v >= 0.0);  // relu tap
}

TEST_CASE("conv architecture forward shapes and tap retargeting") {
  ModelGraph m = build_model(Arch::lenet_small, 5);
  Tensor x = random_image_batch(2, {1, 28, 28}, 33);
  ForwardResult r = m.forward(x);
  CHECK(r.logits.shape() == std::vector<int>{2, 10});
  CHECK(r.latent.shape() == std::vector<int>{2, 64});
  for (int i = 0; i < 2; ++i) {
    double row = 0.0;
    for (int j = 0; j < 10; ++j) row += r.probs.values()[i * 10 + j];
    CHECK(std::abs(row - 1.0) < 1e-12);
  }

  m.set_tap(3);  // post-pool feature map, flattened
  CHECK(m.latent_dim() == 1568);
  CHECK(m.forward(x).latent.shape() == std::vector<int>{2, 1568});
}

TEST_CASE("input contract: shape always, pixel box only on the boxed entry") {
  ModelGraph m = build_model(Arch::toy, 2);
  CHECK_THROWS_AS(m.forward(random_image_batch(2, {1, 7, 8}, 1)), std::invalid_argument);
  CHECK_THROWS_AS(m.forward(Tensor()), std::invalid_argument);

  std::vector<double> v(64, 0.5);
  v[10] = 1.5;  // outside the pixel box
  Tensor bad = Tensor::from(std::move(v), {1, 1, 8, 8});
  CHECK_NOTHROW(m.forward(bad));  // raw entry: attacks probe out of the box
  CHECK_THROWS_AS(m.forward_boxed(bad), std::invalid_argument);

  Tensor edges = Tensor::from(std::vector<double>(64, 1.0), {1, 1, 8, 8});
  CHECK_NOTHROW(m.forward_boxed(edges));
}

TEST_CASE("freezing flips gradient tracking on every parameter") {
  ModelGraph m = build_model(Arch::toy, 4);
  m.set_requires_grad(false);
  for (const auto& p : m.parameters()) CHECK_FALSE(p.requires_grad());
  Tensor x = random_image_batch(1, {1, 8, 8}, 2);
  CHECK_FALSE(m.forward(x).logits.requires_grad());
  m.set_requires_grad(true);
  for (const auto& p : m.parameters()) CHECK(p.requires_grad());
  CHECK(m.forward(x).logits.requires_grad());
}

TEST_CASE("end-to-end gradient check through the toy network") {
  ModelGraph m = build_model(Arch::toy, 17);
  Tensor x = random_image_batch(2, {1, 8, 8}, 40);
  std::vector<int> labels{3, 7};
  auto loss = [&] { return cross_entropy_mean(m.forward(x).probs, labels); };
  auto res = check_gradients(m.parameters(), loss);
  CHECK(res.max_rel_err < 1e-6);
}
