#include "dkd/tensor.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <limits>
#include <sstream>
#include <stdexcept>
#include <unordered_set>

namespace dkd {

using detail::Node;
using detail::OpKind;

// ---------------------------------------------------------------------------
// Small helpers
// ---------------------------------------------------------------------------

namespace {

std::string shape_str(const std::vector<int>& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ']';
  return os.str();
}

[[noreturn]] void fail(const std::string& op, const std::string& what) {
  throw std::invalid_argument(op + ": " + what);
}

void check_finite(const char* op, const std::vector<double>& v) {
  for (double x : v) {
    if (!std::isfinite(x)) throw std::runtime_error(std::string(op) + ": non-finite output");
  }
}

std::int64_t numel_of(const std::vector<int>& shape) {
  std::int64_t n = 1;
  for (int d : shape) {
    if (d <= 0) throw std::invalid_argument("tensor: non-positive dimension " + shape_str(shape));
    n *= d;
  }
  return n;
}

std::shared_ptr<Node> make_node(OpKind op, std::vector<int> shape,
                                std::vector<std::shared_ptr<Node>> parents) {
  auto n = std::make_shared<Node>();
  n->op = op;
  n->shape = std::move(shape);
  n->parents = std::move(parents);
  for (const auto& p : n->parents) n->requires_grad = n->requires_grad || p->requires_grad;
  return n;
}

void require_same_shape(const char* op, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape())
    fail(op, "shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}

void require_defined(const char* op, const Tensor& t) {
  if (!t.defined()) fail(op, "undefined tensor operand");
}

// Reusable scratch, sized monotonically. Ops never nest within one thread,
// so handing out slots by index is safe.
std::vector<float>& f32_scratch(int slot) {
  static thread_local std::vector<float> bufs[6];
  return bufs[slot];
}

void cast_to(const double* src, std::size_t n, std::vector<float>& dst) {
  dst.resize(n);
  for (std::size_t i = 0; i < n; ++i) dst[i] = static_cast<float>(src[i]);
}

// Row-major GEMM c[n,m] = a[n,k] * b[k,m], computed in S.
template <typename S>
void gemm_rm(const double* a, const double* b, double* c, int n, int k, int m) {
  using RM = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  if constexpr (std::is_same_v<S, double>) {
    Eigen::Map<const RM> A(a, n, k), B(b, k, m);
    Eigen::Map<RM> C(c, n, m);
    C.noalias() = A * B;
  } else {
    auto& fa = f32_scratch(0);
    auto& fb = f32_scratch(1);
    auto& fc = f32_scratch(2);
    cast_to(a, static_cast<std::size_t>(n) * k, fa);
    cast_to(b, static_cast<std::size_t>(k) * m, fb);
    fc.resize(static_cast<std::size_t>(n) * m);
    Eigen::Map<const RM> A(fa.data(), n, k), B(fb.data(), k, m);
    Eigen::Map<RM> C(fc.data(), n, m);
    C.noalias() = A * B;
    for (std::size_t i = 0; i < fc.size(); ++i) c[i] = static_cast<double>(fc[i]);
  }
}

}  // namespace

// ---------------------------------------------------------------------------
// Tensor basics
// ---------------------------------------------------------------------------

Tensor Tensor::from(std::vector<double> data, std::vector<int> shape, bool requires_grad) {
  const auto n = numel_of(shape);
  if (static_cast<std::int64_t>(data.size()) != n)
    fail("Tensor::from", "data size " + std::to_string(data.size()) + " does not match shape " +
                             shape_str(shape));
  check_finite("Tensor::from", data);
  auto node = std::make_shared<Node>();
  node->shape = std::move(shape);
  node->value = std::move(data);
  node->requires_grad = requires_grad;
  return Tensor(std::move(node));
}

Tensor Tensor::zeros(std::vector<int> shape, bool requires_grad) {
  return full(std::move(shape), 0.0, requires_grad);
}

Tensor Tensor::full(std::vector<int> shape, double v, bool requires_grad) {
  const auto n = numel_of(shape);
  auto node = std::make_shared<Node>();
  node->shape = std::move(shape);
  node->value.assign(static_cast<std::size_t>(n), v);
  node->requires_grad = requires_grad;
  return Tensor(std::move(node));
}

Tensor Tensor::scalar(double v, bool requires_grad) { return full({1}, v, requires_grad); }

const std::vector<int>& Tensor::shape() const {
  require_defined("Tensor::shape", *this);
  return node_->shape;
}

std::int64_t Tensor::numel() const {
  require_defined("Tensor::numel", *this);
  return node_->numel();
}

bool Tensor::requires_grad() const { return node_ && node_->requires_grad; }

const std::vector<double>& Tensor::values() const {
  require_defined("Tensor::values", *this);
  return node_->value;
}

std::vector<double>& Tensor::mutable_values() {
  require_defined("Tensor::mutable_values", *this);
  if (node_->op != OpKind::leaf)
    throw std::logic_error("Tensor::mutable_values: only leaves may be mutated");
  return node_->value;
}

double Tensor::value() const {
  require_defined("Tensor::value", *this);
  if (node_->numel() != 1)
    throw std::logic_error("Tensor::value: tensor is not scalar, shape " + shape_str(node_->shape));
  return node_->value[0];
}

const std::vector<double>& Tensor::grad() const {
  require_defined("Tensor::grad", *this);
  if (!node_->requires_grad) throw std::logic_error("Tensor::grad: tensor does not require grad");
  node_->ensure_grad();
  return node_->grad;
}

void Tensor::zero_grad() {
  require_defined("Tensor::zero_grad", *this);
  node_->grad.assign(node_->value.size(), 0.0);
  node_->backward_consumed = false;
}

void Tensor::set_requires_grad(bool b) {
  require_defined("Tensor::set_requires_grad", *this);
  if (node_->op != OpKind::leaf)
    throw std::logic_error("Tensor::set_requires_grad: only valid on leaves");
  node_->requires_grad = b;
}

Tensor Tensor::detach() const {
  require_defined("Tensor::detach", *this);
  return Tensor::from(node_->value, node_->shape, false);
}

// ---------------------------------------------------------------------------
// Elementwise ops
// ---------------------------------------------------------------------------

namespace {

// Shared scaffolding for binary elementwise ops.
template <typename Fwd, typename Bwd>
Tensor binary_elementwise(const char* name, OpKind kind, const Tensor& a, const Tensor& b,
                          Fwd fwd, Bwd bwd) {
  require_defined(name, a);
  require_defined(name, b);
  require_same_shape(name, a, b);
  auto out = make_node(kind, a.shape(), {a.node(), b.node()});
  const auto& av = a.node()->value;
  const auto& bv = b.node()->value;
  out->value.resize(av.size());
  for (std::size_t i = 0; i < av.size(); ++i) out->value[i] = fwd(av[i], bv[i]);
  check_finite(name, out->value);
  if (out->requires_grad) {
    out->backward_fn = [bwd](Node& n) {
      Node& pa = *n.parents[0];
      Node& pb = *n.parents[1];
      if (pa.requires_grad) pa.ensure_grad();
      if (pb.requires_grad) pb.ensure_grad();
      for (std::size_t i = 0; i < n.value.size(); ++i) {
        const auto [da, db] = bwd(pa.value[i], pb.value[i]);
        if (pa.requires_grad) pa.grad[i] += da * n.grad[i];
        if (pb.requires_grad) pb.grad[i] += db * n.grad[i];
      }
    };
  }
  return Tensor(std::move(out));
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  return binary_elementwise(
      "add", OpKind::add, a, b, [](double x, double y) { return x + y; },
      [](double, double) { return std::pair{1.0, 1.0}; });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  return binary_elementwise(
      "sub", OpKind::sub, a, b, [](double x, double y) { return x - y; },
      [](double, double) { return std::pair{1.0, -1.0}; });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  return binary_elementwise(
      "mul", OpKind::mul, a, b, [](double x, double y) { return x * y; },
      [](double x, double y) { return std::pair{y, x}; });
}

Tensor scalar_affine(const Tensor& x, double a, double b) {
  require_defined("scalar_affine", x);
  if (!std::isfinite(a) || !std::isfinite(b)) fail("scalar_affine", "non-finite coefficient");
  auto out = make_node(OpKind::scalar_affine, x.shape(), {x.node()});
  const auto& xv = x.node()->value;
  out->value.resize(xv.size());
  for (std::size_t i = 0; i < xv.size(); ++i) out->value[i] = a * xv[i] + b;
  check_finite("scalar_affine", out->value);
  if (out->requires_grad) {
    out->backward_fn = [a](Node& n) {
      Node& p = *n.parents[0];
      p.ensure_grad();
      for (std::size_t i = 0; i < n.value.size(); ++i) p.grad[i] += a * n.grad[i];
    };
  }
  return Tensor(std::move(out));
}

Tensor relu(const Tensor& x) {
  require_defined("relu", x);
  auto out = make_node(OpKind::relu, x.shape(), {x.node()});
  const auto& xv = x.node()->value;
  out->value.resize(xv.size());
  for (std::size_t i = 0; i < xv.size(); ++i) out->value[i] = xv[i] > 0.0 ? xv[i] : 0.0;
  if (out->requires_grad) {
    out->backward_fn = [](Node& n) {
      Node& p = *n.parents[0];
      p.ensure_grad();
      for (std::size_t i = 0; i < n.value.size(); ++i)
        if (n.value[i] > 0.0) p.grad[i] += n.grad[i];
    };
  }
  return Tensor(std::move(out));
}

Tensor tanh_t(const Tensor& x) {
  require_defined("tanh", x);
  auto out = make_node(OpKind::tanh_op, x.shape(), {x.node()});
  const auto& xv = x.node()->value;
  out->value.resize(xv.size());
  for (std::size_t i = 0; i < xv.size(); ++i) out->value[i] = std::tanh(xv[i]);
  if (out->requires_grad) {
    out->backward_fn = [](Node& n) {
      Node& p = *n.parents[0];
      p.ensure_grad();
      for (std::size_t i = 0; i < n.value.size(); ++i)
        p.grad[i] += (1.0 - n.value[i] * n.value[i]) * n.grad[i];
    };
  }
  return Tensor(std::move(out));
}

Tensor reshape(const Tensor& x, std::vector<int> shape) {
  require_defined("reshape", x);
  if (numel_of(shape) != x.numel())
    fail("reshape", "cannot view " + shape_str(x.shape()) + " as " + shape_str(shape));
  auto out = make_node(OpKind::reshape, std::move(shape), {x.node()});
  out->value = x.node()->value;
  if (out->requires_grad) {
    out->backward_fn = [](Node& n) {
      Node& p = *n.parents[0];
      p.ensure_grad();
      for (std::size_t i = 0; i < n.value.size(); ++i) p.grad[i] += n.grad[i];
    };
  }
  return Tensor(std::move(out));
}

// ---------------------------------------------------------------------------
// Linear algebra
// ---------------------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b, Precision prec) {
  require_defined("matmul", a);
  require_defined("matmul", b);
  if (a.shape().size() != 2 || b.shape().size() != 2)
    fail("matmul", "expects rank-2 operands, got " + shape_str(a.shape()) + " x " +
                       shape_str(b.shape()));
  const int n = a.shape()[0], k = a.shape()[1], k2 = b.shape()[0], m = b.shape()[1];
  if (k != k2)
    fail("matmul", "inner dimensions differ: " + shape_str(a.shape()) + " x " +
                       shape_str(b.shape()));
  auto out = make_node(OpKind::matmul, {n, m}, {a.node(), b.node()});
  out->value.resize(static_cast<std::size_t>(n) * m);
  const double* av = a.node()->value.data();
  const double* bv = b.node()->value.data();
  if (prec == Precision::f64)
    gemm_rm<double>(av, bv, out->value.data(), n, k, m);
  else
    gemm_rm<float>(av, bv, out->value.data(), n, k, m);
  check_finite("matmul", out->value);
  if (out->requires_grad) {
    out->backward_fn = [n, k, m, prec](Node& nd) {
      Node& pa = *nd.parents[0];
      Node& pb = *nd.parents[1];
      // dA = dY * B^T ; dB = A^T * dY. Computed into scratch then accumulated
      // so the master grads stay in double.
      if (pa.requires_grad) {
        pa.ensure_grad();
        std::vector<double> bt(static_cast<std::size_t>(m) * k);
        for (int i = 0; i < k; ++i)
          for (int j = 0; j < m; ++j) bt[static_cast<std::size_t>(j) * k + i] = pb.value[static_cast<std::size_t>(i) * m + j];
        std::vector<double> da(static_cast<std::size_t>(n) * k);
        if (prec == Precision::f64)
          gemm_rm<double>(nd.grad.data(), bt.data(), da.data(), n, m, k);
        else
          gemm_rm<float>(nd.grad.data(), bt.data(), da.data(), n, m, k);
        for (std::size_t i = 0; i < da.size(); ++i) pa.grad[i] += da[i];
      }
      if (pb.requires_grad) {
        pb.ensure_grad();
        std::vector<double> at(static_cast<std::size_t>(k) * n);
        for (int i = 0; i < n; ++i)
          for (int j = 0; j < k; ++j) at[static_cast<std::size_t>(j) * n + i] = pa.value[static_cast<std::size_t>(i) * k + j];
        std::vector<double> db(static_cast<std::size_t>(k) * m);
        if (prec == Precision::f64)
          gemm_rm<double>(at.data(), nd.grad.data(), db.data(), k, n, m);
        else
          gemm_rm<float>(at.data(), nd.grad.data(), db.data(), k, n, m);
        for (std::size_t i = 0; i < db.size(); ++i) pb.grad[i] += db[i];
      }
    };
  }
  return Tensor(std::move(out));
}

Tensor add_bias(const Tensor& a, const Tensor& bias) {
  require_defined("add_bias", a);
  require_defined("add_bias", bias);
  if (a.shape().size() != 2 || bias.shape().size() != 1 || bias.shape()[0] != a.shape()[1])
    fail("add_bias", "expects [N,M] + [M], got " + shape_str(a.shape()) + " + " +
                         shape_str(bias.shape()));
  const int n = a.shape()[0], m = a.shape()[1];
  auto out = make_node(OpKind::add_bias, a.shape(), {a.node(), bias.node()});
  out->value.resize(a.node()->value.size());
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < m; ++j)
      out->value[static_cast<std::size_t>(i) * m + j] =
          a.node()->value[static_cast<std::size_t>(i) * m + j] + bias.node()->value[j];
  check_finite("add_bias", out->value);
  if (out->requires_grad) {
    out->backward_fn = [n, m](Node& nd) {
      Node& pa = *nd.parents[0];
      Node& pb = *nd.parents[1];
      if (pa.requires_grad) {
        pa.ensure_grad();
        for (std::size_t i = 0; i < nd.grad.size(); ++i) pa.grad[i] += nd.grad[i];
      }
      if (pb.requires_grad) {
        pb.ensure_grad();
        for (int i = 0; i < n; ++i)
          for (int j = 0; j < m; ++j) pb.grad[j] += nd.grad[static_cast<std::size_t>(i) * m + j];
      }
    };
  }
  return Tensor(std::move(out));
}

// ---------------------------------------------------------------------------
// Convolution (im2col + GEMM)
// ---------------------------------------------------------------------------

namespace {

struct ConvDims {
  int n, c, h, w;      // input
  int f, kh, kw;       // filters
  int ph, pw;          // padding ("same")
  std::int64_t ckk() const { return static_cast<std::int64_t>(c) * kh * kw; }
  std::int64_t plane() const { return static_cast<std::int64_t>(h) * w; }
};

// Gather the im2col matrix, TRANSPOSED layout: col is [cols, ckk]
// column-major (entry (q, r) at q + r*cols), where q = s*h*w + oh*w + ow and
// r = (c*kh + ki)*kw + kj. For a fixed r the writes stream over q and the
// reads stream over shifted input rows, so the whole gather is a set of
// row copies with zeroed borders.
template <typename S>
void im2col_t(const double* x, const ConvDims& d, S* col) {
  const std::int64_t plane = d.plane();
  const std::int64_t cols = static_cast<std::int64_t>(d.n) * plane;
  for (int c = 0; c < d.c; ++c) {
    for (int ki = 0; ki < d.kh; ++ki) {
      for (int kj = 0; kj < d.kw; ++kj) {
        const std::int64_t r = (static_cast<std::int64_t>(c) * d.kh + ki) * d.kw + kj;
        S* dst0 = col + r * cols;
        const int dj = kj - d.pw;
        const int lo = std::max(0, -dj);        // first valid ow
        const int hi = std::min(d.w, d.w - dj);  // one past last valid ow
        for (int s = 0; s < d.n; ++s) {
          const double* xc = x + (static_cast<std::int64_t>(s) * d.c + c) * plane;
          for (int oh = 0; oh < d.h; ++oh) {
            S* drow = dst0 + (static_cast<std::int64_t>(s) * d.h + oh) * d.w;
            const int ih = oh + ki - d.ph;
            if (ih < 0 || ih >= d.h) {
              std::fill(drow, drow + d.w, S(0));
              continue;
            }
            const double* xrow = xc + static_cast<std::int64_t>(ih) * d.w + dj;
            for (int ow = 0; ow < lo; ++ow) drow[ow] = S(0);
            for (int ow = lo; ow < hi; ++ow) drow[ow] = static_cast<S>(xrow[ow]);
            for (int ow = hi; ow < d.w; ++ow) drow[ow] = S(0);
          }
        }
      }
    }
  }
}

// Scatter-add of the column gradient back onto the input plane (reverse of
// im2col_t, same streaming structure).
template <typename S>
void col2im_t_add(const S* col, const ConvDims& d, double* dx) {
  const std::int64_t plane = d.plane();
  const std::int64_t cols = static_cast<std::int64_t>(d.n) * plane;
  for (int c = 0; c < d.c; ++c) {
    for (int ki = 0; ki < d.kh; ++ki) {
      for (int kj = 0; kj < d.kw; ++kj) {
        const std::int64_t r = (static_cast<std::int64_t>(c) * d.kh + ki) * d.kw + kj;
        const S* src0 = col + r * cols;
        const int dj = kj - d.pw;
        const int lo = std::max(0, -dj);
        const int hi = std::min(d.w, d.w - dj);
        for (int s = 0; s < d.n; ++s) {
          double* xc = dx + (static_cast<std::int64_t>(s) * d.c + c) * plane;
          for (int oh = 0; oh < d.h; ++oh) {
            const int ih = oh + ki - d.ph;
            if (ih < 0 || ih >= d.h) continue;
            const S* srow = src0 + (static_cast<std::int64_t>(s) * d.h + oh) * d.w;
            double* xrow = xc + static_cast<std::int64_t>(ih) * d.w + dj;
            for (int ow = lo; ow < hi; ++ow) xrow[ow] += static_cast<double>(srow[ow]);
          }
        }
      }
    }
  }
}

// Conv scratch buffers, reused across calls (allocation dominated the
// per-batch cost otherwise). Slots: 0 dY, 1 dC, 2 out.
template <typename S>
std::vector<S>& conv_scratch(int slot) {
  static thread_local std::vector<S> bufs[3];
  return bufs[slot];
}

// The im2col matrix is built once per forward and kept on the tape for the
// backward dW pass: rebuilding it was the single biggest cost of a training
// step. ~ckk*n*plane entries, handed back to a freelist when the tape dies
// (fresh 50MB allocations per batch were page-fault bound).
template <typename S>
using ColCache = std::shared_ptr<std::vector<S>>;

template <typename S>
std::vector<std::vector<S>*>& col_pool() {
  static thread_local std::vector<std::vector<S>*> pool;
  return pool;
}

template <typename S>
ColCache<S> acquire_col() {
  auto& pool = col_pool<S>();
  std::vector<S>* raw;
  if (pool.empty()) {
    raw = new std::vector<S>();
  } else {
    raw = pool.back();
    pool.pop_back();
  }
  return ColCache<S>(raw, [](std::vector<S>* p) { col_pool<S>().push_back(p); });
}

template <typename S>
void conv_forward(const double* x, const double* w, const double* bias, double* y,
                  const ConvDims& d, std::vector<S>& col) {
  using ColMat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic>;
  const std::int64_t ckk = d.ckk(), plane = d.plane();
  const std::int64_t cols = static_cast<std::int64_t>(d.n) * plane;
  // Weights as a col-major [f, ckk] matrix (source layout is row-major).
  ColMat W(d.f, ckk);
  for (int f = 0; f < d.f; ++f)
    for (std::int64_t r = 0; r < ckk; ++r) W(f, r) = static_cast<S>(w[f * ckk + r]);
  col.resize(static_cast<std::size_t>(ckk) * cols);
  im2col_t<S>(x, d, col.data());
  auto& outb = conv_scratch<S>(2);
  outb.resize(static_cast<std::size_t>(d.f) * cols);
  Eigen::Map<const ColMat> Ct(col.data(), cols, ckk);  // transposed im2col
  Eigen::Map<ColMat> out(outb.data(), d.f, cols);
  out.noalias() = W * Ct.transpose();
  // out is col-major [f, cols]: column (s,p) is contiguous over f. Walk
  // columns so reads stream; the strided writes stay in hot cache lines.
  for (int s = 0; s < d.n; ++s) {
    double* ys = y + (static_cast<std::int64_t>(s) * d.f) * plane;
    const S* ocol = outb.data() + static_cast<std::int64_t>(s) * plane * d.f;
    for (std::int64_t p = 0; p < plane; ++p, ocol += d.f)
      for (int f = 0; f < d.f; ++f)
        ys[f * plane + p] = static_cast<double>(ocol[f]) + bias[f];
  }
}

template <typename S>
void conv_backward(const double* w, const double* dy, double* dx, double* dw, double* db,
                   const ConvDims& d, const std::vector<S>& col) {
  using ColMat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic>;
  const std::int64_t ckk = d.ckk(), plane = d.plane();
  const std::int64_t cols = static_cast<std::int64_t>(d.n) * plane;
  // Gather upstream grad into col-major [f, cols]; columns written
  // contiguously (mirror of the forward scatter).
  auto& dyb = conv_scratch<S>(0);
  dyb.resize(static_cast<std::size_t>(d.f) * cols);
  for (int s = 0; s < d.n; ++s) {
    const double* dys = dy + (static_cast<std::int64_t>(s) * d.f) * plane;
    S* dcol = dyb.data() + static_cast<std::int64_t>(s) * plane * d.f;
    for (std::int64_t p = 0; p < plane; ++p, dcol += d.f)
      for (int f = 0; f < d.f; ++f) dcol[f] = static_cast<S>(dys[f * plane + p]);
  }
  Eigen::Map<const ColMat> dY(dyb.data(), d.f, cols);
  if (dw) {
    Eigen::Map<const ColMat> Ct(col.data(), cols, ckk);
    ColMat dW(d.f, ckk);
    dW.noalias() = dY * Ct;
    for (int f = 0; f < d.f; ++f)
      for (std::int64_t r = 0; r < ckk; ++r) dw[f * ckk + r] += static_cast<double>(dW(f, r));
  }
  if (dx) {
    ColMat W(d.f, ckk);
    for (int f = 0; f < d.f; ++f)
      for (std::int64_t r = 0; r < ckk; ++r) W(f, r) = static_cast<S>(w[f * ckk + r]);
    auto& dcb = conv_scratch<S>(1);
    dcb.resize(static_cast<std::size_t>(ckk) * cols);
    Eigen::Map<ColMat> dCt(dcb.data(), cols, ckk);
    dCt.noalias() = dY.transpose() * W;
    col2im_t_add<S>(dcb.data(), d, dx);
  }
  if (db) {
    const S* dcol = dyb.data();
    for (std::int64_t q = 0; q < cols; ++q, dcol += d.f)
      for (int f = 0; f < d.f; ++f) db[f] += static_cast<double>(dcol[f]);
  }
}

}  // namespace

Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& bias, Precision prec) {
  require_defined("conv2d", x);
  require_defined("conv2d", w);
  require_defined("conv2d", bias);
  if (x.shape().size() != 4) fail("conv2d", "input must be [N,C,H,W], got " + shape_str(x.shape()));
  if (w.shape().size() != 4)
    fail("conv2d", "weights must be [F,C,kh,kw], got " + shape_str(w.shape()));
  ConvDims d{x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3],
             w.shape()[0], w.shape()[2], w.shape()[3], 0, 0};
  if (w.shape()[1] != d.c)
    fail("conv2d", "channel mismatch: input " + shape_str(x.shape()) + " weights " +
                       shape_str(w.shape()));
  if (d.kh % 2 == 0 || d.kw % 2 == 0)
    fail("conv2d", "same-padding requires odd kernel, got " + shape_str(w.shape()));
  if (bias.shape() != std::vector<int>{d.f})
    fail("conv2d", "bias must be [F]=" + std::to_string(d.f) + ", got " + shape_str(bias.shape()));
  d.ph = d.kh / 2;
  d.pw = d.kw / 2;

  auto out = make_node(OpKind::conv2d, {d.n, d.f, d.h, d.w}, {x.node(), w.node(), bias.node()});
  out->value.resize(static_cast<std::size_t>(d.n) * d.f * d.h * d.w);
  ColCache<double> col64;
  ColCache<float> col32;
  if (prec == Precision::f64) {
    col64 = acquire_col<double>();
    conv_forward<double>(x.node()->value.data(), w.node()->value.data(),
                         bias.node()->value.data(), out->value.data(), d, *col64);
  } else {
    col32 = acquire_col<float>();
    conv_forward<float>(x.node()->value.data(), w.node()->value.data(), bias.node()->value.data(),
                        out->value.data(), d, *col32);
  }
  check_finite("conv2d", out->value);
  if (out->requires_grad) {
    out->backward_fn = [d, prec, col64, col32](Node& nd) {
      Node& px = *nd.parents[0];
      Node& pw = *nd.parents[1];
      Node& pb = *nd.parents[2];
      double* dx = nullptr;
      double* dw = nullptr;
      double* db = nullptr;
      if (px.requires_grad) {
        px.ensure_grad();
        dx = px.grad.data();
      }
      if (pw.requires_grad) {
        pw.ensure_grad();
        dw = pw.grad.data();
      }
      if (pb.requires_grad) {
        pb.ensure_grad();
        db = pb.grad.data();
      }
      if (prec == Precision::f64)
        conv_backward<double>(pw.value.data(), nd.grad.data(), dx, dw, db, d, *col64);
      else
        conv_backward<float>(pw.value.data(), nd.grad.data(), dx, dw, db, d, *col32);
    };
  }
  return Tensor(std::move(out));
}

// ---------------------------------------------------------------------------
// Pooling
// ---------------------------------------------------------------------------

Tensor maxpool2(const Tensor& x) {
  require_defined("maxpool2", x);
  if (x.shape().size() != 4)
    fail("maxpool2", "input must be [N,C,H,W], got " + shape_str(x.shape()));
  const int n = x.shape()[0], c = x.shape()[1], h = x.shape()[2], w = x.shape()[3];
  if (h % 2 != 0 || w % 2 != 0)
    fail("maxpool2", "spatial dims must be even, got " + shape_str(x.shape()));
  const int oh = h / 2, ow = w / 2;
  auto out = make_node(OpKind::maxpool2, {n, c, oh, ow}, {x.node()});
  out->value.resize(static_cast<std::size_t>(n) * c * oh * ow);
  // argmax positions are kept for the backward scatter
  auto arg = std::make_shared<std::vector<std::int64_t>>(out->value.size());
  const auto& xv = x.node()->value;
  std::size_t o = 0;
  for (int i = 0; i < n * c; ++i) {
    const std::int64_t base = static_cast<std::int64_t>(i) * h * w;
    for (int y = 0; y < oh; ++y) {
      for (int z = 0; z < ow; ++z) {
        double best = -std::numeric_limits<double>::infinity();
        std::int64_t bi = -1;
        for (int dy = 0; dy < 2; ++dy)
          for (int dz = 0; dz < 2; ++dz) {
            const std::int64_t idx = base + static_cast<std::int64_t>(2 * y + dy) * w + 2 * z + dz;
            if (xv[idx] > best) {
              best = xv[idx];
              bi = idx;
            }
          }
        out->value[o] = best;
        (*arg)[o++] = bi;
      }
    }
  }
  if (out->requires_grad) {
    out->backward_fn = [arg](Node& nd) {
      Node& p = *nd.parents[0];
      p.ensure_grad();
      for (std::size_t i = 0; i < nd.grad.size(); ++i) p.grad[(*arg)[i]] += nd.grad[i];
    };
  }
  return Tensor(std::move(out));
}

Tensor global_avg_pool(const Tensor& x) {
  require_defined("global_avg_pool", x);
  if (x.shape().size() != 4)
    fail("global_avg_pool", "input must be [N,C,H,W], got " + shape_str(x.shape()));
  const int n = x.shape()[0], c = x.shape()[1];
  const std::int64_t plane = static_cast<std::int64_t>(x.shape()[2]) * x.shape()[3];
  auto out = make_node(OpKind::global_avg_pool, {n, c}, {x.node()});
  out->value.resize(static_cast<std::size_t>(n) * c);
  const auto& xv = x.node()->value;
  for (int i = 0; i < n * c; ++i) {
    double acc = 0.0;
    for (std::int64_t p = 0; p < plane; ++p) acc += xv[static_cast<std::int64_t>(i) * plane + p];
    out->value[i] = acc / static_cast<double>(plane);
  }
  if (out->requires_grad) {
    out->backward_fn = [plane](Node& nd) {
      Node& p = *nd.parents[0];
      p.ensure_grad();
      const double inv = 1.0 / static_cast<double>(plane);
      for (std::size_t i = 0; i < nd.grad.size(); ++i) {
        const double g = nd.grad[i] * inv;
        for (std::int64_t q = 0; q < plane; ++q) p.grad[i * plane + q] += g;
      }
    };
  }
  return Tensor(std::move(out));
}

// ---------------------------------------------------------------------------
// Softmax family
// ---------------------------------------------------------------------------

namespace {

void require_matrix(const char* op, const Tensor& x) {
  if (x.shape().size() != 2) fail(op, "expects [N,K], got " + shape_str(x.shape()));
}

}  // namespace

Tensor softmax_rows(const Tensor& x) {
  require_defined("softmax_rows", x);
  require_matrix("softmax_rows", x);
  const int n = x.shape()[0], k = x.shape()[1];
  auto out = make_node(OpKind::softmax_rows, x.shape(), {x.node()});
  out->value.resize(x.node()->value.size());
  const auto& xv = x.node()->value;
  for (int i = 0; i < n; ++i) {
    const double* row = xv.data() + static_cast<std::size_t>(i) * k;
    double* orow = out->value.data() + static_cast<std::size_t>(i) * k;
    double mx = row[0];
    for (int j = 1; j < k; ++j) mx = std::max(mx, row[j]);
    double denom = 0.0;
    for (int j = 0; j < k; ++j) {
      orow[j] = std::exp(row[j] - mx);
      denom += orow[j];
    }
    for (int j = 0; j < k; ++j) orow[j] /= denom;
  }
  if (out->requires_grad) {
    out->backward_fn = [n, k](Node& nd) {
      Node& p = *nd.parents[0];
      p.ensure_grad();
      for (int i = 0; i < n; ++i) {
        const double* y = nd.value.data() + static_cast<std::size_t>(i) * k;
        const double* dy = nd.grad.data() + static_cast<std::size_t>(i) * k;
        double dotv = 0.0;
        for (int j = 0; j < k; ++j) dotv += dy[j] * y[j];
        double* dz = p.grad.data() + static_cast<std::size_t>(i) * k;
        for (int j = 0; j < k; ++j) dz[j] += y[j] * (dy[j] - dotv);
      }
    };
  }
  return Tensor(std::move(out));
}

Tensor log_softmax_rows(const Tensor& x) {
  require_defined("log_softmax_rows", x);
  require_matrix("log_softmax_rows", x);
  const int n = x.shape()[0], k = x.shape()[1];
  auto out = make_node(OpKind::log_softmax_rows, x.shape(), {x.node()});
  out->value.resize(x.node()->value.size());
  const auto& xv = x.node()->value;
  for (int i = 0; i < n; ++i) {
    const double* row = xv.data() + static_cast<std::size_t>(i) * k;
    double* orow = out->value.data() + static_cast<std::size_t>(i) * k;
    double mx = row[0];
    for (int j = 1; j < k; ++j) mx = std::max(mx, row[j]);
    double denom = 0.0;
    for (int j = 0; j < k; ++j) denom += std::exp(row[j] - mx);
    const double lse = mx + std::log(denom);
    for (int j = 0; j < k; ++j) orow[j] = row[j] - lse;
  }
  if (out->requires_grad) {
    out->backward_fn = [n, k](Node& nd) {
      Node& p = *nd.parents[0];
      p.ensure_grad();
      for (int i = 0; i < n; ++i) {
        const double* y = nd.value.data() + static_cast<std::size_t>(i) * k;  // log-probs
        const double* dy = nd.grad.data() + static_cast<std::size_t>(i) * k;
        double gsum = 0.0;
        for (int j = 0; j < k; ++j) gsum += dy[j];
        double* dz = p.grad.data() + static_cast<std::size_t>(i) * k;
        for (int j = 0; j < k; ++j) dz[j] += dy[j] - std::exp(y[j]) * gsum;
      }
    };
  }
  return Tensor(std::move(out));
}

// ---------------------------------------------------------------------------
// Reductions
// ---------------------------------------------------------------------------

Tensor sum(const Tensor& x) {
  require_defined("sum", x);
  auto out = make_node(OpKind::sum, {1}, {x.node()});
  double acc = 0.0;
  for (double v : x.node()->value) acc += v;
  out->value = {acc};
  check_finite("sum", out->value);
  if (out->requires_grad) {
    out->backward_fn = [](Node& nd) {
      Node& p = *nd.parents[0];
      p.ensure_grad();
      for (double& g : p.grad) g += nd.grad[0];
    };
  }
  return Tensor(std::move(out));
}

Tensor mean(const Tensor& x) {
  require_defined("mean", x);
  return mul_scalar(sum(x), 1.0 / static_cast<double>(x.numel()));
}

Tensor dot(const Tensor& a, const Tensor& b) {
  require_defined("dot", a);
  require_defined("dot", b);
  require_same_shape("dot", a, b);
  auto out = make_node(OpKind::dot, {1}, {a.node(), b.node()});
  double acc = 0.0;
  const auto& av = a.node()->value;
  const auto& bv = b.node()->value;
  for (std::size_t i = 0; i < av.size(); ++i) acc += av[i] * bv[i];
  out->value = {acc};
  check_finite("dot", out->value);
  if (out->requires_grad) {
    out->backward_fn = [](Node& nd) {
      Node& pa = *nd.parents[0];
      Node& pb = *nd.parents[1];
      const double g = nd.grad[0];
      if (pa.requires_grad) {
        pa.ensure_grad();
        for (std::size_t i = 0; i < pa.value.size(); ++i) pa.grad[i] += g * pb.value[i];
      }
      if (pb.requires_grad) {
        pb.ensure_grad();
        for (std::size_t i = 0; i < pb.value.size(); ++i) pb.grad[i] += g * pa.value[i];
      }
    };
  }
  return Tensor(std::move(out));
}

Tensor l2_norm(const Tensor& x) {
  require_defined("l2_norm", x);
  auto out = make_node(OpKind::l2_norm, {1}, {x.node()});
  double acc = 0.0;
  for (double v : x.node()->value) acc += v * v;
  out->value = {std::sqrt(acc)};
  check_finite("l2_norm", out->value);
  if (out->requires_grad) {
    out->backward_fn = [](Node& nd) {
      Node& p = *nd.parents[0];
      p.ensure_grad();
      const double nrm = nd.value[0];
      if (nrm == 0.0) return;  // subgradient 0 at the origin
      const double g = nd.grad[0] / nrm;
      for (std::size_t i = 0; i < p.value.size(); ++i) p.grad[i] += g * p.value[i];
    };
  }
  return Tensor(std::move(out));
}

Tensor select_scalar(const Tensor& x, std::int64_t flat_index) {
  require_defined("select_scalar", x);
  if (flat_index < 0 || flat_index >= x.numel())
    fail("select_scalar", "index " + std::to_string(flat_index) + " out of range for " +
                              shape_str(x.shape()));
  auto out = make_node(OpKind::select_scalar, {1}, {x.node()});
  out->value = {x.node()->value[static_cast<std::size_t>(flat_index)]};
  if (out->requires_grad) {
    out->backward_fn = [flat_index](Node& nd) {
      Node& p = *nd.parents[0];
      p.ensure_grad();
      p.grad[static_cast<std::size_t>(flat_index)] += nd.grad[0];
    };
  }
  return Tensor(std::move(out));
}

// ---------------------------------------------------------------------------
// Fused losses
// ---------------------------------------------------------------------------

Tensor cross_entropy_mean(const Tensor& probs, const std::vector<int>& labels) {
  require_defined("cross_entropy_mean", probs);
  require_matrix("cross_entropy_mean", probs);
  const int n = probs.shape()[0], k = probs.shape()[1];
  if (static_cast<int>(labels.size()) != n)
    fail("cross_entropy_mean", "expected " + std::to_string(n) + " labels, got " +
                                   std::to_string(labels.size()));
  for (int y : labels)
    if (y < 0 || y >= k)
      fail("cross_entropy_mean", "label " + std::to_string(y) + " outside [0," +
                                     std::to_string(k) + ")");
  constexpr double kFloor = 1e-12;  // probability clamp before the log
  auto out = make_node(OpKind::cross_entropy_mean, {1}, {probs.node()});
  const auto& pv = probs.node()->value;
  double acc = 0.0;
  for (int i = 0; i < n; ++i)
    acc -= std::log(std::max(pv[static_cast<std::size_t>(i) * k + labels[i]], kFloor));
  out->value = {acc / n};
  check_finite("cross_entropy_mean", out->value);
  if (out->requires_grad) {
    auto lab = std::make_shared<std::vector<int>>(labels);
    out->backward_fn = [lab, n, k](Node& nd) {
      Node& p = *nd.parents[0];
      p.ensure_grad();
      const double g = nd.grad[0] / n;
      for (int i = 0; i < n; ++i) {
        const std::size_t idx = static_cast<std::size_t>(i) * k + (*lab)[i];
        // zero gradient inside the clamp region
        if (p.value[idx] >= kFloor) p.grad[idx] -= g / p.value[idx];
      }
    };
  }
  return Tensor(std::move(out));
}

Tensor cosine_similarity_mean(const Tensor& a, const Tensor& b, CosineStats* stats) {
  require_defined("cosine_similarity_mean", a);
  require_defined("cosine_similarity_mean", b);
  require_matrix("cosine_similarity_mean", a);
  require_same_shape("cosine_similarity_mean", a, b);
  const int n = a.shape()[0], d = a.shape()[1];
  auto out = make_node(OpKind::cosine_similarity_mean, {1}, {a.node(), b.node()});
  const auto& av = a.node()->value;
  const auto& bv = b.node()->value;
  double acc = 0.0;
  int zero_rows = 0;
  for (int i = 0; i < n; ++i) {
    const double* ra = av.data() + static_cast<std::size_t>(i) * d;
    const double* rb = bv.data() + static_cast<std::size_t>(i) * d;
    double na2 = 0.0, nb2 = 0.0, ab = 0.0;
    for (int j = 0; j < d; ++j) {
      na2 += ra[j] * ra[j];
      nb2 += rb[j] * rb[j];
      ab += ra[j] * rb[j];
    }
    if (na2 == 0.0 || nb2 == 0.0) {
      ++zero_rows;  // contributes 0 to the mean, by definition
      continue;
    }
    acc += ab / std::sqrt(na2 * nb2);
  }
  out->value = {acc / n};
  if (stats) stats->zero_norm_rows = zero_rows;
  check_finite("cosine_similarity_mean", out->value);
  if (out->requires_grad) {
    out->backward_fn = [n, d](Node& nd) {
      Node& pa = *nd.parents[0];
      Node& pb = *nd.parents[1];
      if (pa.requires_grad) pa.ensure_grad();
      if (pb.requires_grad) pb.ensure_grad();
      const double g = nd.grad[0] / n;
      for (int i = 0; i < n; ++i) {
        const double* ra = pa.value.data() + static_cast<std::size_t>(i) * d;
        const double* rb = pb.value.data() + static_cast<std::size_t>(i) * d;
        double na2 = 0.0, nb2 = 0.0, ab = 0.0;
        for (int j = 0; j < d; ++j) {
          na2 += ra[j] * ra[j];
          nb2 += rb[j] * rb[j];
          ab += ra[j] * rb[j];
        }
        if (na2 == 0.0 || nb2 == 0.0) continue;  // masked rows: zero gradient
        const double na = std::sqrt(na2), nb = std::sqrt(nb2);
        const double cosv = ab / (na * nb);
        if (pa.requires_grad) {
          double* ga = pa.grad.data() + static_cast<std::size_t>(i) * d;
          for (int j = 0; j < d; ++j) ga[j] += g * (rb[j] / (na * nb) - cosv * ra[j] / na2);
        }
        if (pb.requires_grad) {
          double* gb = pb.grad.data() + static_cast<std::size_t>(i) * d;
          for (int j = 0; j < d; ++j) gb[j] += g * (ra[j] / (na * nb) - cosv * rb[j] / nb2);
        }
      }
    };
  }
  return Tensor(std::move(out));
}

// ---------------------------------------------------------------------------
// Backward sweep
// ---------------------------------------------------------------------------

void backward(const Tensor& loss) {
  require_defined("backward", loss);
  if (loss.numel() != 1)
    throw std::invalid_argument("backward: loss must be scalar, shape " + shape_str(loss.shape()));
  if (!loss.requires_grad())
    throw std::invalid_argument("backward: loss does not require grad");
  if (loss.node()->backward_consumed)
    throw std::logic_error(
        "backward: already called on this loss; zero_grad() it or rebuild the graph");
  loss.node()->backward_consumed = true;

  // Iterative post-order DFS; nodes that don't require grad are opaque.
  std::vector<Node*> order;
  std::unordered_set<Node*> visited;
  std::vector<std::pair<Node*, std::size_t>> stack{{loss.node().get(), 0}};
  visited.insert(loss.node().get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node* p = node->parents[next++].get();
      if (p->requires_grad && !visited.count(p)) {
        visited.insert(p);
        stack.emplace_back(p, 0);
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  // Interior grads are scratch space for this sweep; only leaves accumulate
  // across sweeps (that is what parameter grads rely on).
  for (Node* n : order)
    if (n->op != OpKind::leaf) n->grad.assign(n->value.size(), 0.0);

  loss.node()->ensure_grad();
  loss.node()->grad[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->backward_fn) {
      n->ensure_grad();
      n->backward_fn(*n);
    }
  }
}

// ---------------------------------------------------------------------------
// Adam
// ---------------------------------------------------------------------------

void adam_step(std::vector<Tensor>& params, AdamState& state, const AdamConfig& cfg) {
  if (state.m.empty()) {
    state.m.resize(params.size());
    state.v.resize(params.size());
    for (std::size_t i = 0; i < params.size(); ++i) {
      state.m[i].assign(params[i].numel(), 0.0);
      state.v[i].assign(params[i].numel(), 0.0);
    }
  }
  if (state.m.size() != params.size())
    throw std::invalid_argument("adam_step: state was built for a different parameter list");
  ++state.t;
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.t));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.t));
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& p = params[i];
    if (!p.requires_grad()) continue;
    const auto& g = p.grad();
    auto& val = p.node()->value;  // params are leaves; direct update
    if (state.m[i].size() != val.size())
      throw std::invalid_argument("adam_step: parameter " + std::to_string(i) + " changed size");
    auto& m = state.m[i];
    auto& v = state.v[i];
    for (std::size_t j = 0; j < val.size(); ++j) {
      if (!std::isfinite(g[j]))
        throw std::runtime_error("adam_step: non-finite gradient in parameter " +
                                 std::to_string(i));
      m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * g[j];
      v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * g[j] * g[j];
      const double mhat = m[j] / bc1;
      const double vhat = v[j] / bc2;
      double nv = val[j] - cfg.lr * mhat / (std::sqrt(vhat) + cfg.eps);
      if (cfg.snap_to_f32) nv = static_cast<double>(static_cast<float>(nv));
      val[j] = nv;
    }
    p.zero_grad();
  }
}

}  // namespace dkd
