#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace dkd {

/// GEMM element type used inside conv/dense kernels. The surrounding engine
/// always stores values as double; f32 trades the multiply-accumulate width
/// for roughly 2x single-core throughput and is what the training-scale
/// architectures run. Oracle and gradient-check tests use f64.
enum class Precision { f32, f64 };

namespace detail {

enum class OpKind {
  leaf,
  add,
  sub,
  mul,
  scalar_affine,  // a*x + b
  matmul,
  add_bias,
  conv2d,
  relu,
  maxpool2,
  global_avg_pool,
  softmax_rows,
  log_softmax_rows,
  tanh_op,
  reshape,
  sum,
  dot,
  l2_norm,
  select_scalar,
  cross_entropy_mean,
  cosine_similarity_mean,
};

/// One record on the autodiff tape: the op that produced the value, the
/// value itself, and a closure that scatters d(loss)/d(value) into the
/// parents' grad buffers.
struct Node {
  OpKind op = OpKind::leaf;
  std::vector<int> shape;
  std::vector<double> value;
  std::vector<double> grad;  // allocated lazily, same length as value
  bool requires_grad = false;
  bool backward_consumed = false;  // set on a root once backward() ran from it
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward_fn;  // null for leaves

  std::int64_t numel() const {
    std::int64_t n = 1;
    for (int d : shape) n *= d;
    return n;
  }
  void ensure_grad() {
    if (grad.size() != value.size()) grad.assign(value.size(), 0.0);
  }
};

}  // namespace detail

/// Value handle over a tape node. Copying a Tensor aliases the node (cheap);
/// building ops extends the tape. The tape is a DAG of shared_ptrs and is
/// reclaimed when the last handle into it drops.
class Tensor {
 public:
  Tensor() = default;

  /// Leaf factories -----------------------------------------------------
  static Tensor from(std::vector<double> data, std::vector<int> shape, bool requires_grad = false);
  static Tensor zeros(std::vector<int> shape, bool requires_grad = false);
  static Tensor full(std::vector<int> shape, double v, bool requires_grad = false);
  static Tensor scalar(double v, bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  const std::vector<int>& shape() const;
  std::int64_t numel() const;
  bool requires_grad() const;

  const std::vector<double>& values() const;
  /// Leaf-only mutable access (parameter updates between tapes).
  std::vector<double>& mutable_values();
  /// Scalar read; errors unless numel() == 1.
  double value() const;

  const std::vector<double>& grad() const;
  void zero_grad();
  /// Toggle gradient tracking on a leaf (used to freeze trained models).
  void set_requires_grad(bool b);

  /// Copy of the value as a fresh leaf, detached from this tape.
  Tensor detach() const;

  std::shared_ptr<detail::Node> node() const { return node_; }
  explicit Tensor(std::shared_ptr<detail::Node> n) : node_(std::move(n)) {}

 private:
  std::shared_ptr<detail::Node> node_;
};

/// Differentiable ops ----------------------------------------------------
/// All ops validate shapes and finiteness of their outputs; violations
/// throw std::invalid_argument / std::runtime_error with the op name.

Tensor add(const Tensor& a, const Tensor& b);        // same shape
Tensor sub(const Tensor& a, const Tensor& b);        // same shape
Tensor mul(const Tensor& a, const Tensor& b);        // elementwise, same shape
Tensor scalar_affine(const Tensor& x, double a, double b);  // a*x + b
inline Tensor mul_scalar(const Tensor& x, double a) { return scalar_affine(x, a, 0.0); }
inline Tensor add_scalar(const Tensor& x, double b) { return scalar_affine(x, 1.0, b); }
inline Tensor neg(const Tensor& x) { return scalar_affine(x, -1.0, 0.0); }

/// [N,K] x [K,M] -> [N,M].
Tensor matmul(const Tensor& a, const Tensor& b, Precision prec = Precision::f64);
/// Adds bias[M] to every row of a[N,M] (the only broadcast in the engine).
Tensor add_bias(const Tensor& a, const Tensor& bias);

/// 2-D convolution, NCHW, stride 1, "same" zero padding, fused channel bias.
/// x: [N,C,H,W], w: [F,C,kh,kw], bias: [F] -> [N,F,H,W]. kh/kw must be odd.
Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& bias,
              Precision prec = Precision::f64);

Tensor relu(const Tensor& x);
/// 2x2 max pooling, stride 2; H and W must be even.
Tensor maxpool2(const Tensor& x);
/// [N,C,H,W] -> [N,C], mean over the spatial plane.
Tensor global_avg_pool(const Tensor& x);

/// Row-wise softmax / log-softmax over the last axis of [N,K].
/// Both subtract the row max first, so they are overflow-safe.
Tensor softmax_rows(const Tensor& x);
Tensor log_softmax_rows(const Tensor& x);

Tensor tanh_t(const Tensor& x);

/// Same data, new shape (numel must match). Backward restores the old shape.
Tensor reshape(const Tensor& x, std::vector<int> shape);

Tensor sum(const Tensor& x);                    // -> scalar
Tensor mean(const Tensor& x);                   // -> scalar
Tensor dot(const Tensor& a, const Tensor& b);   // full inner product -> scalar
Tensor l2_norm(const Tensor& x);                // sqrt(sum x^2) -> scalar
Tensor select_scalar(const Tensor& x, std::int64_t flat_index);  // -> scalar

/// Mean cross-entropy from probabilities (not logits): -mean_i log p[i, y_i].
/// Probabilities below 1e-12 are clamped before the log; the clamp region
/// deliberately has zero gradient.
Tensor cross_entropy_mean(const Tensor& probs, const std::vector<int>& labels);

struct CosineStats {
  int zero_norm_rows = 0;  // rows skipped because one side had zero norm
};

/// Mean over rows of cos(a_i, b_i) for a,b of shape [N,D]. Rows where either
/// side has exactly zero norm contribute 0 and are counted in stats.
Tensor cosine_similarity_mean(const Tensor& a, const Tensor& b, CosineStats* stats = nullptr);

/// Reverse-mode sweep from a scalar loss. Visits each node once in reverse
/// topological order and accumulates into leaf .grad buffers (+=, so
/// parameter grads survive across calls until zeroed). Errors if loss is
/// not scalar, does not require grad, or was already swept (zero_grad() on
/// the loss resets that latch; rebuilding the graph is the usual path).
void backward(const Tensor& loss);

/// Adam -------------------------------------------------------------------

struct AdamConfig {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  /// Round updated parameters to the nearest float32. Keeps parameters on
  /// the f32 grid so float32 checkpoints round-trip without loss.
  bool snap_to_f32 = false;
};

/// Per-parameter first/second moment buffers plus the shared step count.
struct AdamState {
  std::int64_t t = 0;
  std::vector<std::vector<double>> m, v;
};

/// One Adam step over params (order defines the state layout; keep it
/// stable). Uses .grad, then zeroes it. Throws on non-finite gradients.
void adam_step(std::vector<Tensor>& params, AdamState& state, const AdamConfig& cfg);

}  // namespace dkd
