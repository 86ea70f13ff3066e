#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "dkd/tensor.hpp"

namespace dkd {

/// Built-in architectures. `mnist` and `cifar10` follow the reference layer
/// tables; `toy` is a two-layer net for oracle-scale tests; `lenet_small` is
/// the desk-scale conv net that doubles as the black-box reference model.
enum class Arch { toy, lenet_small, mnist, cifar10 };

std::string to_string(Arch a);
Arch arch_from_string(const std::string& s);

enum class LayerKind { conv_relu, max_pool, global_avg_pool, dense_relu, softmax_head };

struct LayerSpec {
  LayerKind kind;
  int width = 0;  // filters (conv) or units (dense/head); unused for pools
  int kh = 0, kw = 0;  // conv kernel
};

/// Everything a training/attack step needs from one pass.
struct ForwardResult {
  Tensor logits;  // [N, classes], pre-softmax
  Tensor probs;   // [N, classes], softmax rows
  Tensor latent;  // [N, latent_dim], flattened tap-layer activation
};

/// A feed-forward image classifier: an ordered layer list with parameters,
/// a designated latent tap, and a GEMM precision. Forward is pure (builds a
/// fresh tape); parameters are leaves shared across passes.
class ModelGraph {
 public:
  ModelGraph() = default;

  /// Builds with He-uniform weights (drawn on the f32 grid) and zero biases.
  /// `tap` indexes a layer whose flattened output is the latent; it must not
  /// be negative or past the last layer. The last layer must be the only
  /// softmax head.
  ModelGraph(std::vector<LayerSpec> specs, std::array<int, 3> input_shape, int tap,
             std::uint64_t seed, Precision prec = Precision::f64);

  /// x: [N, C, H, W] matching input_shape. No pixel-range contract here —
  /// attack internals legitimately probe outside the box; range-checked
  /// entry points live in the trainer/evaluation layer.
  ForwardResult forward(const Tensor& x) const;

  /// forward() plus the [0,1] pixel-box precondition.
  ForwardResult forward_boxed(const Tensor& x) const;

  std::vector<Tensor>& parameters() { return params_; }
  const std::vector<Tensor>& parameters() const { return params_; }
  /// Flip gradient tracking on every parameter (freezing trained members).
  void set_requires_grad(bool b);

  const std::vector<LayerSpec>& layer_specs() const { return specs_; }
  std::array<int, 3> input_shape() const { return input_shape_; }
  int tap() const { return tap_; }
  void set_tap(int tap);
  Precision precision() const { return prec_; }
  void set_precision(Precision p) { prec_ = p; }
  int num_classes() const;
  int latent_dim() const;  // flattened tap width

  /// Architecture tag when built via build_model (used by checkpoints);
  /// custom models carry Arch::toy semantics only if tagged explicitly.
  Arch arch_tag() const { return arch_tag_; }
  void set_arch_tag(Arch a) { arch_tag_ = a; }

 private:
  std::vector<LayerSpec> specs_;
  std::array<int, 3> input_shape_{};  // C, H, W
  int tap_ = 0;
  Precision prec_ = Precision::f64;
  Arch arch_tag_ = Arch::toy;
  std::vector<Tensor> params_;       // w,b per parametric layer, layer order
  std::vector<int> param_layer_;     // parametric layer index -> spec index
};

/// Layer tables for the built-in architectures.
std::vector<LayerSpec> arch_layers(Arch a);
std::array<int, 3> arch_input_shape(Arch a);
/// Default latent tap: the last hidden (pre-softmax) representation.
int default_tap(Arch a);

/// Convenience constructor for the built-ins. `tap_override` < 0 keeps the
/// default tap. Training-scale archs default to the f32 GEMM path.
ModelGraph build_model(Arch a, std::uint64_t seed, int tap_override = -1);

/// Per-layer output widths (flattened) for a spec walk; validates the layer
/// grammar (single trailing softmax head, even pooling dims, positive
/// widths) and is shared by the builder and the checkpoint loader.
std::vector<int> flattened_layer_widths(const std::vector<LayerSpec>& specs,
                                        std::array<int, 3> input_shape);

}  // namespace dkd
