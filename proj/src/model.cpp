#include "dkd/model.hpp"

#include <cmath>
#include <stdexcept>

#include "dkd/rng.hpp"

namespace dkd {

// ---------------------------------------------------------------------------
// Architecture tables
// ---------------------------------------------------------------------------

std::string to_string(Arch a) {
  switch (a) {
    case Arch::toy: return "toy";
    case Arch::lenet_small: return "lenet_small";
    case Arch::mnist: return "mnist";
    case Arch::cifar10: return "cifar10";
  }
  throw std::logic_error("to_string(Arch): unknown value");
}

Arch arch_from_string(const std::string& s) {
  if (s == "toy") return Arch::toy;
  if (s == "lenet_small") return Arch::lenet_small;
  if (s == "mnist") return Arch::mnist;
  if (s == "cifar10") return Arch::cifar10;
  throw std::invalid_argument("unknown architecture '" + s + "'");
}

std::vector<LayerSpec> arch_layers(Arch a) {
  using K = LayerKind;
  switch (a) {
    case Arch::toy:
      return {{K::dense_relu, 32}, {K::softmax_head, 10}};
    case Arch::lenet_small:
      return {{K::conv_relu, 16, 3, 3}, {K::max_pool},     {K::conv_relu, 32, 3, 3},
              {K::max_pool},            {K::dense_relu, 64}, {K::softmax_head, 10}};
    case Arch::mnist:
      return {{K::conv_relu, 32, 3, 3}, {K::conv_relu, 32, 3, 3}, {K::max_pool},
              {K::conv_relu, 64, 3, 3}, {K::conv_relu, 64, 3, 3}, {K::max_pool},
              {K::dense_relu, 200},     {K::dense_relu, 200},     {K::softmax_head, 10}};
    case Arch::cifar10:
      return {{K::conv_relu, 96, 3, 3},  {K::conv_relu, 96, 3, 3},  {K::conv_relu, 96, 3, 3},
              {K::max_pool},             {K::conv_relu, 192, 3, 3}, {K::conv_relu, 192, 3, 3},
              {K::conv_relu, 192, 3, 3}, {K::max_pool},             {K::conv_relu, 192, 3, 3},
              {K::conv_relu, 192, 1, 1}, {K::conv_relu, 192, 1, 1}, {K::global_avg_pool},
              {K::softmax_head, 10}};
  }
  throw std::logic_error("arch_layers: unknown value");
}

std::array<int, 3> arch_input_shape(Arch a) {
  switch (a) {
    case Arch::toy: return {1, 8, 8};
    case Arch::lenet_small: return {1, 28, 28};
    case Arch::mnist: return {1, 28, 28};
    case Arch::cifar10: return {3, 32, 32};
  }
  throw std::logic_error("arch_input_shape: unknown value");
}

int default_tap(Arch a) {
  switch (a) {
    case Arch::toy: return 0;           // dense-32 output
    case Arch::lenet_small: return 4;   // dense-64 output
    case Arch::mnist: return 7;         // second dense-200 output
    case Arch::cifar10: return 11;      // global-average-pool output
  }
  throw std::logic_error("default_tap: unknown value");
}

// ---------------------------------------------------------------------------
// Shape walk
// ---------------------------------------------------------------------------

namespace {

struct LayerShape {
  bool spatial;  // 4-D [*,c,h,w] vs flat [*,flat]
  int c = 0, h = 0, w = 0;
  int flat = 0;
};

std::vector<LayerShape> walk_shapes(const std::vector<LayerSpec>& specs,
                                    std::array<int, 3> in) {
  if (specs.empty()) throw std::invalid_argument("model: empty layer list");
  std::vector<LayerShape> out;
  LayerShape cur{true, in[0], in[1], in[2], in[0] * in[1] * in[2]};
  if (cur.c <= 0 || cur.h <= 0 || cur.w <= 0)
    throw std::invalid_argument("model: non-positive input shape");
  for (std::size_t i = 0; i < specs.size(); ++i) {
    const auto& s = specs[i];
    const bool last = i + 1 == specs.size();
    switch (s.kind) {
      case LayerKind::conv_relu:
        if (!cur.spatial) throw std::invalid_argument("model: conv after flattening");
        if (s.width <= 0 || s.kh <= 0 || s.kw <= 0 || s.kh % 2 == 0 || s.kw % 2 == 0)
          throw std::invalid_argument("model: conv needs positive width and odd kernel");
        cur.c = s.width;
        break;
      case LayerKind::max_pool:
        if (!cur.spatial) throw std::invalid_argument("model: pool after flattening");
        if (cur.h % 2 != 0 || cur.w % 2 != 0)
          throw std::invalid_argument("model: pooling an odd spatial dimension");
        cur.h /= 2;
        cur.w /= 2;
        break;
      case LayerKind::global_avg_pool:
        if (!cur.spatial) throw std::invalid_argument("model: GAP after flattening");
        cur = LayerShape{false, 0, 0, 0, cur.c};
        break;
      case LayerKind::dense_relu:
      case LayerKind::softmax_head:
        if (s.width <= 0) throw std::invalid_argument("model: dense needs positive width");
        cur = LayerShape{false, 0, 0, 0, s.width};
        break;
    }
    if (cur.spatial) cur.flat = cur.c * cur.h * cur.w;
    if ((s.kind == LayerKind::softmax_head) != last)
      throw std::invalid_argument("model: exactly one softmax head, and it must be last");
    out.push_back(cur);
  }
  return out;
}

}  // namespace

std::vector<int> flattened_layer_widths(const std::vector<LayerSpec>& specs,
                                        std::array<int, 3> input_shape) {
  std::vector<int> widths;
  for (const auto& s : walk_shapes(specs, input_shape)) widths.push_back(s.flat);
  return widths;
}

// ---------------------------------------------------------------------------
// ModelGraph
// ---------------------------------------------------------------------------

ModelGraph::ModelGraph(std::vector<LayerSpec> specs, std::array<int, 3> input_shape, int tap,
                       std::uint64_t seed, Precision prec)
    : specs_(std::move(specs)), input_shape_(input_shape), tap_(tap), prec_(prec) {
  const auto shapes = walk_shapes(specs_, input_shape_);
  if (tap_ < 0 || tap_ >= static_cast<int>(specs_.size()))
    throw std::invalid_argument("model: tap " + std::to_string(tap_) + " out of range");

  // He-uniform weights drawn on the f32 grid; zero biases. Draw order is
  // layer order, weights before bias, so (seed -> parameters) is stable.
  Rng rng(seed);
  auto he_leaf = [&](std::vector<int> shape, int fan_in) {
    const double limit = std::sqrt(6.0 / static_cast<double>(fan_in));
    std::int64_t n = 1;
    for (int d : shape) n *= d;
    std::vector<double> v(n);
    for (auto& x : v)
      x = static_cast<double>(static_cast<float>(rng.uniform(-limit, limit)));
    return Tensor::from(std::move(v), std::move(shape), true);
  };

  LayerShape in{true, input_shape_[0], input_shape_[1], input_shape_[2],
                input_shape_[0] * input_shape_[1] * input_shape_[2]};
  for (std::size_t i = 0; i < specs_.size(); ++i) {
    const auto& s = specs_[i];
    const LayerShape& prev = i == 0 ? in : shapes[i - 1];
    switch (s.kind) {
      case LayerKind::conv_relu: {
        params_.push_back(he_leaf({s.width, prev.c, s.kh, s.kw}, prev.c * s.kh * s.kw));
        params_.push_back(Tensor::zeros({s.width}, true));
        param_layer_.push_back(static_cast<int>(i));
        param_layer_.push_back(static_cast<int>(i));
        break;
      }
      case LayerKind::dense_relu:
      case LayerKind::softmax_head: {
        params_.push_back(he_leaf({prev.flat, s.width}, prev.flat));
        params_.push_back(Tensor::zeros({s.width}, true));
        param_layer_.push_back(static_cast<int>(i));
        param_layer_.push_back(static_cast<int>(i));
        break;
      }
      case LayerKind::max_pool:
      case LayerKind::global_avg_pool:
        break;
    }
  }
}

void ModelGraph::set_requires_grad(bool b) {
  for (auto& p : params_) p.set_requires_grad(b);
}

void ModelGraph::set_tap(int tap) {
  if (tap < 0 || tap >= static_cast<int>(specs_.size()))
    throw std::invalid_argument("model: tap " + std::to_string(tap) + " out of range");
  tap_ = tap;
}

int ModelGraph::num_classes() const { return specs_.back().width; }

int ModelGraph::latent_dim() const {
  return flattened_layer_widths(specs_, input_shape_)[tap_];
}

ForwardResult ModelGraph::forward(const Tensor& x) const {
  if (!x.defined() || x.shape().size() != 4 || x.shape()[1] != input_shape_[0] ||
      x.shape()[2] != input_shape_[1] || x.shape()[3] != input_shape_[2])
    throw std::invalid_argument("model: input must be [N," + std::to_string(input_shape_[0]) +
                                "," + std::to_string(input_shape_[1]) + "," +
                                std::to_string(input_shape_[2]) + "]");
  const int n = x.shape()[0];
  Tensor cur = x;
  Tensor logits, tap_out;
  std::size_t pi = 0;  // parameter cursor
  for (std::size_t i = 0; i < specs_.size(); ++i) {
    const auto& s = specs_[i];
    switch (s.kind) {
      case LayerKind::conv_relu: {
        const Tensor& w = params_[pi];
        const Tensor& b = params_[pi + 1];
        pi += 2;
        cur = relu(conv2d(cur, w, b, prec_));
        break;
      }
      case LayerKind::max_pool:
        cur = maxpool2(cur);
        break;
      case LayerKind::global_avg_pool:
        cur = global_avg_pool(cur);
        break;
      case LayerKind::dense_relu:
      case LayerKind::softmax_head: {
        if (cur.shape().size() != 2)
          cur = reshape(cur, {n, static_cast<int>(cur.numel() / n)});
        const Tensor& w = params_[pi];
        const Tensor& b = params_[pi + 1];
        pi += 2;
        cur = add_bias(matmul(cur, w, prec_), b);
        if (s.kind == LayerKind::dense_relu) {
          cur = relu(cur);
        } else {
          logits = cur;
          cur = softmax_rows(cur);
        }
        break;
      }
    }
    if (static_cast<int>(i) == tap_) tap_out = cur;
  }
  ForwardResult r;
  r.logits = logits;
  r.probs = cur;
  r.latent = reshape(tap_out, {n, static_cast<int>(tap_out.numel() / n)});
  return r;
}

ForwardResult ModelGraph::forward_boxed(const Tensor& x) const {
  if (x.defined()) {
    for (double v : x.values())
      if (v < -1e-9 || v > 1.0 + 1e-9)
        throw std::invalid_argument("model: pixel value outside [0,1]");
  }
  return forward(x);
}

ModelGraph build_model(Arch a, std::uint64_t seed, int tap_override) {
  const Precision prec = a == Arch::toy ? Precision::f64 : Precision::f32;
  ModelGraph m(arch_layers(a), arch_input_shape(a), tap_override < 0 ? default_tap(a) : tap_override,
               seed, prec);
  m.set_arch_tag(a);
  return m;
}

}  // namespace dkd
