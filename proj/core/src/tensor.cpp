#include "zoomsr/tensor.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstring>
#include <sstream>
#include <utility>

#if defined(__GLIBC__)
#include <malloc.h>
#endif

namespace zoomsr {

using detail::Node;
using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapRow = Eigen::Map<RowMat>;
using MapRowC = Eigen::Map<const RowMat>;

std::size_t numel(const Shape& shape) {
  std::size_t n = 1;
  for (std::size_t d : shape) n *= d;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '(';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ')';
  return os.str();
}

bool same_shape(const Shape& a, const Shape& b) { return a == b; }

namespace {

// Tensor buffers run tens of MB; keeping them on the heap instead of per-call
// mmap/munmap round trips is worth ~3x on the training loop.
struct MallocTuning {
  MallocTuning() {
#if defined(__GLIBC__)
    mallopt(M_MMAP_THRESHOLD, 512 * 1024 * 1024);
    mallopt(M_TRIM_THRESHOLD, 512 * 1024 * 1024);
#endif
  }
};
const MallocTuning g_malloc_tuning;

#ifdef NDEBUG
std::atomic<bool> g_finite_checks{false};
#else
std::atomic<bool> g_finite_checks{true};
#endif

void check_finite(const char* op, const std::vector<double>& v) {
  if (!g_finite_checks.load(std::memory_order_relaxed)) return;
  for (double x : v) {
    if (!std::isfinite(x)) {
      throw NumericError(std::string("non-finite value after op '") + op + "'");
    }
  }
}

}  // namespace

void set_finite_checks(bool enabled) { g_finite_checks.store(enabled); }
bool finite_checks_enabled() { return g_finite_checks.load(); }

// ---------------------------------------------------------------- Tensor ---

Tensor Tensor::constant(Shape shape, std::vector<double> data) {
  if (numel(shape) != data.size()) {
    throw DimensionError("constant: shape " + shape_str(shape) + " wants " +
                         std::to_string(numel(shape)) + " values, got " +
                         std::to_string(data.size()));
  }
  auto n = std::make_shared<Node>();
  n->shape = std::move(shape);
  n->value = std::move(data);
  n->op = "constant";
  return Tensor(std::move(n));
}

Tensor Tensor::scalar(double v) { return constant({1}, {v}); }

Tensor Tensor::zeros(Shape shape) {
  std::vector<double> d(numel(shape), 0.0);
  return constant(std::move(shape), std::move(d));
}

Tensor Tensor::full(Shape shape, double v) {
  std::vector<double> d(numel(shape), v);
  return constant(std::move(shape), std::move(d));
}

const Shape& Tensor::shape() const {
  if (!node_) throw ContractError("shape() on empty tensor");
  return node_->shape;
}

std::size_t Tensor::size() const { return node_ ? node_->value.size() : 0; }

const std::vector<double>& Tensor::data() const {
  if (!node_) throw ContractError("data() on empty tensor");
  return node_->value;
}

double Tensor::value() const {
  if (size() != 1) {
    throw ContractError("value() requires a scalar tensor, got shape " + shape_str(shape()));
  }
  return node_->value[0];
}

bool Tensor::requires_grad() const { return node_ && node_->requires_grad; }

Tape* Tensor::tape() const { return node_ ? node_->tape : nullptr; }

const char* Tensor::op_name() const { return node_ ? node_->op : "empty"; }

std::vector<double> Tensor::grad() const {
  if (!requires_grad()) {
    throw ContractError("grad() on a tensor that does not require gradients");
  }
  if (node_->grad.empty()) return std::vector<double>(node_->value.size(), 0.0);
  return node_->grad;
}

const std::vector<std::size_t>& Tensor::selection() const {
  if (!node_) throw ContractError("selection() on empty tensor");
  return node_->selection;
}

// ------------------------------------------------------------------ Tape ---

Tensor Tape::leaf(Shape shape, std::vector<double> data, bool requires_grad) {
  if (numel(shape) != data.size()) {
    throw DimensionError("leaf: shape " + shape_str(shape) + " wants " +
                         std::to_string(numel(shape)) + " values, got " +
                         std::to_string(data.size()));
  }
  auto n = std::make_shared<Node>();
  n->shape = std::move(shape);
  n->value = std::move(data);
  n->requires_grad = requires_grad;
  n->op = "leaf";
  if (requires_grad) {
    n->tape = this;
    record(n);
  }
  return Tensor(std::move(n));
}

void Tape::record(const std::shared_ptr<Node>& n) {
  n->order = nodes_.size();
  nodes_.push_back(n);
}

void Tape::backward(const Tensor& root) {
  if (!root.defined()) throw ContractError("backward: empty root");
  if (root.size() != 1) {
    throw ContractError("backward: root must be scalar, got shape " + shape_str(root.shape()));
  }
  if (!root.requires_grad() || root.tape() != this) {
    throw ContractError("backward: root is not a gradient-carrying tensor of this tape");
  }
  if (backward_done_) {
    throw ContractError("backward already ran on this tape; call reset() first");
  }
  backward_done_ = true;

  // Restrict the sweep to nodes reachable from the root.
  std::vector<char> reachable(nodes_.size(), 0);
  std::vector<const Node*> stack;
  stack.push_back(root.node_.get());
  reachable[root.node_->order] = 1;
  while (!stack.empty()) {
    const Node* n = stack.back();
    stack.pop_back();
    for (const auto& in : n->inputs) {
      if (in->requires_grad && !reachable[in->order]) {
        reachable[in->order] = 1;
        stack.push_back(in.get());
      }
    }
  }

  root.node_->ensure_grad();
  root.node_->grad[0] = 1.0;
  for (std::size_t i = nodes_.size(); i-- > 0;) {
    Node& n = *nodes_[i];
    if (!reachable[i] || n.grad.empty() || !n.backward_fn) continue;
    n.backward_fn(n);
  }
}

void Tape::reset() {
  for (auto& n : nodes_) n->grad.clear();
  backward_done_ = false;
}

bool Tape::topology_valid() const {
  for (std::size_t i = 0; i < nodes_.size(); ++i) {
    if (nodes_[i]->order != i) return false;
    for (const auto& in : nodes_[i]->inputs) {
      if (in->requires_grad && in->tape == nodes_[i]->tape && in->order >= i) return false;
    }
  }
  return true;
}

std::vector<std::size_t> Tape::selection_snapshot() const {
  std::vector<std::size_t> snap;
  for (const auto& n : nodes_) {
    snap.insert(snap.end(), n->selection.begin(), n->selection.end());
  }
  return snap;
}

// ------------------------------------------------------------- OpBuilder ---

struct OpBuilder {
  static Tape* common_tape(std::initializer_list<const Tensor*> ins) {
    Tape* t = nullptr;
    for (const Tensor* in : ins) {
      if (!in->defined()) throw ContractError("op input is an empty tensor");
      Tape* it = in->tape();
      if (!it) continue;
      if (t && it != t) throw ContractError("op inputs belong to different tapes");
      t = it;
    }
    return t;
  }

  static Tensor make(const char* op, Shape shape, std::vector<double> value,
                     std::initializer_list<const Tensor*> ins,
                     std::function<void(Node&)> backward_fn,
                     std::vector<std::size_t> selection = {}) {
    check_finite(op, value);
    auto n = std::make_shared<Node>();
    n->shape = std::move(shape);
    n->value = std::move(value);
    n->op = op;
    n->selection = std::move(selection);
    Tape* tape = common_tape(ins);
    bool any_grad = false;
    for (const Tensor* in : ins) any_grad = any_grad || in->requires_grad();
    if (any_grad) {
      n->requires_grad = true;
      n->tape = tape;
      for (const Tensor* in : ins) n->inputs.push_back(in->node_);
      n->backward_fn = std::move(backward_fn);
      tape->record(n);
    }
    return Tensor(std::move(n));
  }

  static std::shared_ptr<Node> node_of(const Tensor& t) { return t.node_; }
};

namespace {

void accumulate(Node& dst, const double* g, std::size_t n) {
  dst.ensure_grad();
  for (std::size_t i = 0; i < n; ++i) dst.grad[i] += g[i];
}

void require_same_shape(const char* op, const Tensor& a, const Tensor& b) {
  if (!same_shape(a.shape(), b.shape())) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
  }
}

// Shared implementation for elementwise binary ops.
template <class Fwd, class Bwd>
Tensor binary_op(const char* name, const Tensor& a, const Tensor& b, Fwd fwd, Bwd bwd) {
  require_same_shape(name, a, b);
  const std::size_t n = a.size();
  std::vector<double> out(n);
  const auto& av = a.data();
  const auto& bv = b.data();
  for (std::size_t i = 0; i < n; ++i) out[i] = fwd(av[i], bv[i]);
  auto an = OpBuilder::node_of(a);
  auto bn = OpBuilder::node_of(b);
  return OpBuilder::make(name, a.shape(), std::move(out), {&a, &b},
                         [an, bn, bwd, n](Node& self) {
                           for (std::size_t i = 0; i < n; ++i) {
                             double da = 0.0, db = 0.0;
                             bwd(self.grad[i], an->value[i], bn->value[i], self.value[i], da, db);
                             if (an->requires_grad) {
                               an->ensure_grad();
                               an->grad[i] += da;
                             }
                             if (bn->requires_grad) {
                               bn->ensure_grad();
                               bn->grad[i] += db;
                             }
                           }
                         });
}

template <class Fwd, class Bwd>
Tensor unary_op(const char* name, const Tensor& x, Fwd fwd, Bwd bwd) {
  const std::size_t n = x.size();
  std::vector<double> out(n);
  const auto& xv = x.data();
  for (std::size_t i = 0; i < n; ++i) out[i] = fwd(xv[i]);
  auto xn = OpBuilder::node_of(x);
  return OpBuilder::make(name, x.shape(), std::move(out), {&x}, [xn, bwd, n](Node& self) {
    xn->ensure_grad();
    for (std::size_t i = 0; i < n; ++i) {
      xn->grad[i] += bwd(self.grad[i], xn->value[i], self.value[i]);
    }
  });
}

}  // namespace

// ---------------------------------------------------------- elementwise ----

Tensor add(const Tensor& a, const Tensor& b) {
  return binary_op(
      "add", a, b, [](double x, double y) { return x + y; },
      [](double g, double, double, double, double& da, double& db) {
        da = g;
        db = g;
      });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  return binary_op(
      "sub", a, b, [](double x, double y) { return x - y; },
      [](double g, double, double, double, double& da, double& db) {
        da = g;
        db = -g;
      });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  return binary_op(
      "mul", a, b, [](double x, double y) { return x * y; },
      [](double g, double x, double y, double, double& da, double& db) {
        da = g * y;
        db = g * x;
      });
}

Tensor div(const Tensor& a, const Tensor& b) {
  return binary_op(
      "div", a, b, [](double x, double y) { return x / y; },
      [](double g, double x, double y, double, double& da, double& db) {
        da = g / y;
        db = -g * x / (y * y);
      });
}

Tensor affine(const Tensor& x, double scale, double shift) {
  return unary_op(
      "affine", x, [scale, shift](double v) { return scale * v + shift; },
      [scale](double g, double, double) { return g * scale; });
}

Tensor exp(const Tensor& x) {
  return unary_op(
      "exp", x, [](double v) { return std::exp(v); },
      [](double g, double, double out) { return g * out; });
}

Tensor log(const Tensor& x) {
  return unary_op(
      "log", x, [](double v) { return std::log(v); },
      [](double g, double in, double) { return g / in; });
}

Tensor sqrt(const Tensor& x) {
  return unary_op(
      "sqrt", x, [](double v) { return std::sqrt(v); },
      [](double g, double, double out) { return out > 0.0 ? g * 0.5 / out : 0.0; });
}

Tensor relu(const Tensor& x) {
  const std::size_t n = x.size();
  std::vector<double> out(n);
  std::uint64_t pattern = 1469598103934665603ULL;  // FNV offset
  const auto& xv = x.data();
  for (std::size_t i = 0; i < n; ++i) {
    const bool on = xv[i] > 0.0;
    out[i] = on ? xv[i] : 0.0;
    pattern = (pattern ^ (on ? 0x9eu : 0x31u)) * 1099511628211ULL;
  }
  auto xn = OpBuilder::node_of(x);
  // the activation pattern hash joins the selection snapshot so gradient
  // checks can detect kink crossings between probe points
  return OpBuilder::make(
      "relu", x.shape(), std::move(out), {&x},
      [xn, n](Node& self) {
        xn->ensure_grad();
        for (std::size_t i = 0; i < n; ++i) {
          if (xn->value[i] > 0.0) xn->grad[i] += self.grad[i];
        }
      },
      {static_cast<std::size_t>(pattern)});
}

// ----------------------------------------------------------- reductions ----

Tensor sum(const Tensor& x) {
  double s = 0.0;
  for (double v : x.data()) s += v;
  auto xn = OpBuilder::node_of(x);
  const std::size_t n = x.size();
  return OpBuilder::make("sum", {1}, {s}, {&x}, [xn, n](Node& self) {
    const double g = self.grad[0];
    xn->ensure_grad();
    for (std::size_t i = 0; i < n; ++i) xn->grad[i] += g;
  });
}

Tensor mean(const Tensor& x) {
  const std::size_t n = x.size();
  if (n == 0) throw DimensionError("mean of empty tensor");
  double s = 0.0;
  for (double v : x.data()) s += v;
  auto xn = OpBuilder::node_of(x);
  return OpBuilder::make("mean", {1}, {s / double(n)}, {&x}, [xn, n](Node& self) {
    const double g = self.grad[0] / double(n);
    xn->ensure_grad();
    for (std::size_t i = 0; i < n; ++i) xn->grad[i] += g;
  });
}

// ---------------------------------------------------------------- conv2d ---

namespace {

struct ConvDims {
  std::size_t n, ci, h, w, co, k, oh, ow;
};

ConvDims conv_dims(const Tensor& input, const Tensor& weights, std::size_t stride,
                   std::size_t padding) {
  if (input.rank() != 4 || weights.rank() != 4) {
    throw DimensionError("conv2d: expects input (N,C,H,W) and weights (Co,Ci,k,k), got " +
                         shape_str(input.shape()) + " and " + shape_str(weights.shape()));
  }
  if (weights.dim(2) != weights.dim(3)) {
    throw DimensionError("conv2d: kernel must be square, got " + shape_str(weights.shape()));
  }
  if (input.dim(1) != weights.dim(1)) {
    throw DimensionError("conv2d: input channel count " + std::to_string(input.dim(1)) +
                         " (shape " + shape_str(input.shape()) + ") does not match weight Ci " +
                         std::to_string(weights.dim(1)) + " (shape " +
                         shape_str(weights.shape()) + ")");
  }
  if (stride == 0) throw DimensionError("conv2d: stride must be >= 1");
  ConvDims d;
  d.n = input.dim(0);
  d.ci = input.dim(1);
  d.h = input.dim(2);
  d.w = input.dim(3);
  d.co = weights.dim(0);
  d.k = weights.dim(2);
  if (d.h + 2 * padding < d.k || d.w + 2 * padding < d.k) {
    throw DimensionError("conv2d: kernel " + std::to_string(d.k) + " larger than padded input " +
                         shape_str(input.shape()));
  }
  d.oh = (d.h + 2 * padding - d.k) / stride + 1;
  d.ow = (d.w + 2 * padding - d.k) / stride + 1;
  return d;
}

// cols is (Ci*k*k) x (OH*OW), row-major.
void im2col(const double* src, const ConvDims& d, std::size_t stride, std::size_t padding,
            double* cols) {
  const std::size_t span = d.oh * d.ow;
  for (std::size_t ci = 0; ci < d.ci; ++ci) {
    for (std::size_t ky = 0; ky < d.k; ++ky) {
      for (std::size_t kx = 0; kx < d.k; ++kx) {
        double* row = cols + ((ci * d.k + ky) * d.k + kx) * span;
        for (std::size_t oy = 0; oy < d.oh; ++oy) {
          const std::ptrdiff_t iy = std::ptrdiff_t(oy * stride + ky) - std::ptrdiff_t(padding);
          if (iy < 0 || iy >= std::ptrdiff_t(d.h)) {
            std::memset(row + oy * d.ow, 0, d.ow * sizeof(double));
            continue;
          }
          const double* srow = src + (ci * d.h + std::size_t(iy)) * d.w;
          for (std::size_t ox = 0; ox < d.ow; ++ox) {
            const std::ptrdiff_t ix = std::ptrdiff_t(ox * stride + kx) - std::ptrdiff_t(padding);
            row[oy * d.ow + ox] =
                (ix < 0 || ix >= std::ptrdiff_t(d.w)) ? 0.0 : srow[std::size_t(ix)];
          }
        }
      }
    }
  }
}

void col2im_accumulate(const double* cols, const ConvDims& d, std::size_t stride,
                       std::size_t padding, double* dst) {
  const std::size_t span = d.oh * d.ow;
  for (std::size_t ci = 0; ci < d.ci; ++ci) {
    for (std::size_t ky = 0; ky < d.k; ++ky) {
      for (std::size_t kx = 0; kx < d.k; ++kx) {
        const double* row = cols + ((ci * d.k + ky) * d.k + kx) * span;
        for (std::size_t oy = 0; oy < d.oh; ++oy) {
          const std::ptrdiff_t iy = std::ptrdiff_t(oy * stride + ky) - std::ptrdiff_t(padding);
          if (iy < 0 || iy >= std::ptrdiff_t(d.h)) continue;
          double* drow = dst + (ci * d.h + std::size_t(iy)) * d.w;
          for (std::size_t ox = 0; ox < d.ow; ++ox) {
            const std::ptrdiff_t ix = std::ptrdiff_t(ox * stride + kx) - std::ptrdiff_t(padding);
            if (ix < 0 || ix >= std::ptrdiff_t(d.w)) continue;
            drow[std::size_t(ix)] += row[oy * d.ow + ox];
          }
        }
      }
    }
  }
}

}  // namespace

namespace {

std::vector<double>& conv_scratch(std::size_t n) {
  thread_local std::vector<double> buf;
  if (buf.size() < n) buf.resize(n);
  return buf;
}

std::vector<double>& conv_scratch2(std::size_t n) {
  thread_local std::vector<double> buf;
  if (buf.size() < n) buf.resize(n);
  return buf;
}

}  // namespace

Tensor conv2d(const Tensor& input, const Tensor& weights, std::size_t stride,
              std::size_t padding) {
  const ConvDims d = conv_dims(input, weights, stride, padding);
  const std::size_t span = d.oh * d.ow;
  const std::size_t krows = d.ci * d.k * d.k;
  std::vector<double> out(d.n * d.co * span);
  std::vector<double>& cols = conv_scratch(krows * span);
  MapRowC wmat(weights.data().data(), d.co, krows);
  for (std::size_t n = 0; n < d.n; ++n) {
    im2col(input.data().data() + n * d.ci * d.h * d.w, d, stride, padding, cols.data());
    MapRowC cmat(cols.data(), krows, span);
    MapRow omat(out.data() + n * d.co * span, d.co, span);
    omat.noalias() = wmat * cmat;
  }
  auto in_n = OpBuilder::node_of(input);
  auto w_n = OpBuilder::node_of(weights);
  return OpBuilder::make(
      "conv2d", {d.n, d.co, d.oh, d.ow}, std::move(out), {&input, &weights},
      [in_n, w_n, d, stride, padding, span, krows](Node& self) {
        std::vector<double>& cols = conv_scratch(krows * span);
        std::vector<double>& dcols = conv_scratch2(krows * span);
        MapRowC wmat(w_n->value.data(), d.co, krows);
        if (w_n->requires_grad) w_n->ensure_grad();
        if (in_n->requires_grad) in_n->ensure_grad();
        for (std::size_t n = 0; n < d.n; ++n) {
          MapRowC gmat(self.grad.data() + n * d.co * span, d.co, span);
          if (w_n->requires_grad) {
            im2col(in_n->value.data() + n * d.ci * d.h * d.w, d, stride, padding, cols.data());
            MapRowC cmat(cols.data(), krows, span);
            MapRow dwmat(w_n->grad.data(), d.co, krows);
            dwmat.noalias() += gmat * cmat.transpose();
          }
          if (in_n->requires_grad) {
            MapRow dcmat(dcols.data(), krows, span);
            dcmat.noalias() = wmat.transpose() * gmat;
            col2im_accumulate(dcols.data(), d, stride, padding,
                              in_n->grad.data() + n * d.ci * d.h * d.w);
          }
        }
      });
}

Tensor add_channel_bias(const Tensor& x, const Tensor& bias) {
  if (x.rank() != 4 || bias.rank() != 1 || bias.dim(0) != x.dim(1)) {
    throw DimensionError("add_channel_bias: got " + shape_str(x.shape()) + " and " +
                         shape_str(bias.shape()));
  }
  const std::size_t n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  std::vector<double> out(x.data());
  for (std::size_t ni = 0; ni < n; ++ni)
    for (std::size_t ci = 0; ci < c; ++ci) {
      const double b = bias.at(ci);
      double* p = out.data() + (ni * c + ci) * hw;
      for (std::size_t i = 0; i < hw; ++i) p[i] += b;
    }
  auto xn = OpBuilder::node_of(x);
  auto bn = OpBuilder::node_of(bias);
  return OpBuilder::make("add_channel_bias", x.shape(), std::move(out), {&x, &bias},
                         [xn, bn, n, c, hw](Node& self) {
                           if (xn->requires_grad) {
                             accumulate(*xn, self.grad.data(), self.grad.size());
                           }
                           if (bn->requires_grad) {
                             bn->ensure_grad();
                             for (std::size_t ni = 0; ni < n; ++ni)
                               for (std::size_t ci = 0; ci < c; ++ci) {
                                 const double* g = self.grad.data() + (ni * c + ci) * hw;
                                 double s = 0.0;
                                 for (std::size_t i = 0; i < hw; ++i) s += g[i];
                                 bn->grad[ci] += s;
                               }
                           }
                         });
}

// --------------------------------------------------------- pixel shuffle ---

namespace {

// Forward index map out_idx -> in_idx for pixel_shuffle.
std::vector<std::size_t> shuffle_map(std::size_t n, std::size_t c_out, std::size_t h,
                                     std::size_t w, std::size_t r) {
  std::vector<std::size_t> map(n * c_out * h * r * w * r);
  const std::size_t oh = h * r, ow = w * r;
  std::size_t oi = 0;
  for (std::size_t ni = 0; ni < n; ++ni)
    for (std::size_t c = 0; c < c_out; ++c)
      for (std::size_t y = 0; y < oh; ++y)
        for (std::size_t x = 0; x < ow; ++x, ++oi) {
          const std::size_t dy = y % r, dx = x % r;
          const std::size_t ic = c * r * r + dy * r + dx;
          map[oi] = ((ni * (c_out * r * r) + ic) * h + y / r) * w + x / r;
        }
  return map;
}

Tensor apply_index_map(const char* name, const Tensor& x, Shape out_shape,
                       std::vector<std::size_t> map, bool map_is_gather) {
  // map_is_gather: out[i] = in[map[i]]; else out[map[i]] = in[i]
  const std::size_t n_out = numel(out_shape);
  std::vector<double> out(n_out);
  const auto& xv = x.data();
  if (map_is_gather) {
    for (std::size_t i = 0; i < n_out; ++i) out[i] = xv[map[i]];
  } else {
    for (std::size_t i = 0; i < xv.size(); ++i) out[map[i]] = xv[i];
  }
  auto xn = OpBuilder::node_of(x);
  auto shared_map = std::make_shared<std::vector<std::size_t>>(std::move(map));
  return OpBuilder::make(name, std::move(out_shape), std::move(out), {&x},
                         [xn, shared_map, map_is_gather](Node& self) {
                           xn->ensure_grad();
                           const auto& m = *shared_map;
                           if (map_is_gather) {
                             for (std::size_t i = 0; i < self.grad.size(); ++i)
                               xn->grad[m[i]] += self.grad[i];
                           } else {
                             for (std::size_t i = 0; i < xn->grad.size(); ++i)
                               xn->grad[i] += self.grad[m[i]];
                           }
                         });
}

}  // namespace

Tensor pixel_shuffle(const Tensor& x, std::size_t factor) {
  if (x.rank() != 4) throw DimensionError("pixel_shuffle: expects (N,C,H,W)");
  const std::size_t r2 = factor * factor;
  if (factor == 0 || x.dim(1) % r2 != 0) {
    throw DimensionError("pixel_shuffle: channels " + std::to_string(x.dim(1)) +
                         " not divisible by factor^2 = " + std::to_string(r2));
  }
  const std::size_t n = x.dim(0), c_out = x.dim(1) / r2, h = x.dim(2), w = x.dim(3);
  return apply_index_map("pixel_shuffle", x, {n, c_out, h * factor, w * factor},
                         shuffle_map(n, c_out, h, w, factor), true);
}

Tensor pixel_unshuffle(const Tensor& x, std::size_t factor) {
  if (x.rank() != 4) throw DimensionError("pixel_unshuffle: expects (N,C,H,W)");
  if (factor == 0 || x.dim(2) % factor != 0 || x.dim(3) % factor != 0) {
    throw DimensionError("pixel_unshuffle: spatial dims " + shape_str(x.shape()) +
                         " not divisible by factor " + std::to_string(factor));
  }
  const std::size_t n = x.dim(0), c = x.dim(1), oh = x.dim(2) / factor, ow = x.dim(3) / factor;
  // scatter through the shuffle map of the inverse op
  return apply_index_map("pixel_unshuffle", x, {n, c * factor * factor, oh, ow},
                         shuffle_map(n, c, oh, ow, factor), false);
}

// ------------------------------------------------------ bicubic downsample --

namespace {

double catmull_rom(double x) {
  constexpr double a = -0.5;
  x = std::fabs(x);
  if (x < 1.0) return ((a + 2.0) * x - (a + 3.0)) * x * x + 1.0;
  if (x < 2.0) return a * (((x - 5.0) * x + 8.0) * x - 4.0);
  return 0.0;
}

// (out x in) resample matrix for integer-factor downsampling. The kernel is
// stretched by the factor (area-consistent) and each row renormalized to sum
// 1 so constants are preserved exactly, including at the borders.
Eigen::MatrixXd bicubic_matrix(std::size_t in, std::size_t factor) {
  const std::size_t out = in / factor;
  Eigen::MatrixXd m = Eigen::MatrixXd::Zero(out, in);
  const double f = double(factor);
  for (std::size_t i = 0; i < out; ++i) {
    const double c = (double(i) + 0.5) * f - 0.5;
    const std::ptrdiff_t j0 = std::ptrdiff_t(std::ceil(c - 2.0 * f));
    const std::ptrdiff_t j1 = std::ptrdiff_t(std::floor(c + 2.0 * f));
    double wsum = 0.0;
    for (std::ptrdiff_t j = j0; j <= j1; ++j) {
      if (j < 0 || j >= std::ptrdiff_t(in)) continue;
      const double w = catmull_rom((double(j) - c) / f);
      m(i, j) = w;
      wsum += w;
    }
    m.row(i) /= wsum;
  }
  return m;
}

}  // namespace

Tensor downsample_bicubic(const Tensor& x, std::size_t factor) {
  if (x.rank() != 4) throw DimensionError("downsample_bicubic: expects (N,C,H,W)");
  if (factor == 0) throw DimensionError("downsample_bicubic: factor must be >= 1");
  const std::size_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  if (h % factor != 0 || w % factor != 0) {
    throw DimensionError("downsample_bicubic: dims " + shape_str(x.shape()) +
                         " not divisible by factor " + std::to_string(factor));
  }
  const std::size_t oh = h / factor, ow = w / factor;
  auto ah = std::make_shared<Eigen::MatrixXd>(bicubic_matrix(h, factor));
  auto aw = std::make_shared<Eigen::MatrixXd>(bicubic_matrix(w, factor));
  std::vector<double> out(n * c * oh * ow);
  for (std::size_t p = 0; p < n * c; ++p) {
    MapRowC src(x.data().data() + p * h * w, h, w);
    MapRow dst(out.data() + p * oh * ow, oh, ow);
    dst.noalias() = (*ah) * src * aw->transpose();
  }
  auto xn = OpBuilder::node_of(x);
  return OpBuilder::make("downsample_bicubic", {n, c, oh, ow}, std::move(out), {&x},
                         [xn, ah, aw, n, c, h, w, oh, ow](Node& self) {
                           xn->ensure_grad();
                           for (std::size_t p = 0; p < n * c; ++p) {
                             MapRowC g(self.grad.data() + p * oh * ow, oh, ow);
                             MapRow dx(xn->grad.data() + p * h * w, h, w);
                             dx.noalias() += ah->transpose() * g * (*aw);
                           }
                         });
}

// ------------------------------------------------------- matrix / layout ---

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
    throw DimensionError("matmul: incompatible shapes " + shape_str(a.shape()) + " and " +
                         shape_str(b.shape()));
  }
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  std::vector<double> out(m * n);
  {
    MapRowC am(a.data().data(), m, k);
    MapRowC bm(b.data().data(), k, n);
    MapRow om(out.data(), m, n);
    om.noalias() = am * bm;
  }
  auto an = OpBuilder::node_of(a);
  auto bn = OpBuilder::node_of(b);
  return OpBuilder::make("matmul", {m, n}, std::move(out), {&a, &b}, [an, bn, m, k, n](Node& self) {
    MapRowC g(self.grad.data(), m, n);
    if (an->requires_grad) {
      an->ensure_grad();
      MapRowC bm(bn->value.data(), k, n);
      MapRow da(an->grad.data(), m, k);
      da.noalias() += g * bm.transpose();
    }
    if (bn->requires_grad) {
      bn->ensure_grad();
      MapRowC am(an->value.data(), m, k);
      MapRow db(bn->grad.data(), k, n);
      db.noalias() += am.transpose() * g;
    }
  });
}

Tensor half_sqdist_matrix(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(1)) {
    throw DimensionError("half_sqdist_matrix: incompatible shapes " + shape_str(a.shape()) +
                         " and " + shape_str(b.shape()));
  }
  const std::size_t ka = a.dim(0), kb = b.dim(0), c = a.dim(1);
  std::vector<double> out(ka * kb);
  const double* av = a.data().data();
  const double* bv = b.data().data();
  for (std::size_t i = 0; i < ka; ++i) {
    const double* ai = av + i * c;
    for (std::size_t j = 0; j < kb; ++j) {
      const double* bj = bv + j * c;
      double s = 0.0;
      for (std::size_t d = 0; d < c; ++d) {
        const double diff = ai[d] - bj[d];
        s += diff * diff;
      }
      out[i * kb + j] = 0.5 * s;
    }
  }
  auto an = OpBuilder::node_of(a);
  auto bn = OpBuilder::node_of(b);
  return OpBuilder::make("half_sqdist_matrix", {ka, kb}, std::move(out), {&a, &b},
                         [an, bn, ka, kb, c](Node& self) {
                           if (an->requires_grad) an->ensure_grad();
                           if (bn->requires_grad) bn->ensure_grad();
                           for (std::size_t i = 0; i < ka; ++i) {
                             const double* ai = an->value.data() + i * c;
                             for (std::size_t j = 0; j < kb; ++j) {
                               const double g = self.grad[i * kb + j];
                               if (g == 0.0) continue;
                               const double* bj = bn->value.data() + j * c;
                               for (std::size_t d = 0; d < c; ++d) {
                                 const double diff = ai[d] - bj[d];
                                 if (an->requires_grad) an->grad[i * c + d] += g * diff;
                                 if (bn->requires_grad) bn->grad[j * c + d] -= g * diff;
                               }
                             }
                           }
                         });
}

Tensor transpose(const Tensor& a) {
  if (a.rank() != 2) throw DimensionError("transpose: expects rank 2, got " + shape_str(a.shape()));
  const std::size_t m = a.dim(0), n = a.dim(1);
  std::vector<double> out(m * n);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[j * m + i] = a.data()[i * n + j];
  auto an = OpBuilder::node_of(a);
  return OpBuilder::make("transpose", {n, m}, std::move(out), {&a}, [an, m, n](Node& self) {
    an->ensure_grad();
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) an->grad[i * n + j] += self.grad[j * m + i];
  });
}

Tensor reshape(const Tensor& x, Shape shape) {
  if (numel(shape) != x.size()) {
    throw DimensionError("reshape: " + shape_str(x.shape()) + " to " + shape_str(shape) +
                         " changes element count");
  }
  auto xn = OpBuilder::node_of(x);
  std::vector<double> out(x.data());
  return OpBuilder::make("reshape", std::move(shape), std::move(out), {&x}, [xn](Node& self) {
    accumulate(*xn, self.grad.data(), self.grad.size());
  });
}

Tensor permute(const Tensor& x, const std::vector<std::size_t>& axes) {
  const std::size_t r = x.rank();
  if (axes.size() != r) throw DimensionError("permute: axes rank mismatch");
  std::vector<char> seen(r, 0);
  for (std::size_t a : axes) {
    if (a >= r || seen[a]) throw DimensionError("permute: invalid axes");
    seen[a] = 1;
  }
  Shape out_shape(r);
  for (std::size_t i = 0; i < r; ++i) out_shape[i] = x.dim(axes[i]);
  // row-major strides
  std::vector<std::size_t> in_stride(r, 1), out_stride(r, 1);
  for (std::size_t i = r - 1; i-- > 0;) in_stride[i] = in_stride[i + 1] * x.dim(i + 1);
  for (std::size_t i = r - 1; i-- > 0;) out_stride[i] = out_stride[i + 1] * out_shape[i + 1];
  const std::size_t n = x.size();
  std::vector<std::size_t> map(n);  // out index -> in index
  std::vector<std::size_t> idx(r, 0);
  for (std::size_t oi = 0; oi < n; ++oi) {
    std::size_t ii = 0;
    for (std::size_t d = 0; d < r; ++d) ii += idx[d] * in_stride[axes[d]];
    map[oi] = ii;
    for (std::size_t d = r; d-- > 0;) {
      if (++idx[d] < out_shape[d]) break;
      idx[d] = 0;
    }
  }
  std::vector<double> out(n);
  for (std::size_t i = 0; i < n; ++i) out[i] = x.data()[map[i]];
  auto xn = OpBuilder::node_of(x);
  auto shared_map = std::make_shared<std::vector<std::size_t>>(std::move(map));
  return OpBuilder::make("permute", std::move(out_shape), std::move(out), {&x},
                         [xn, shared_map](Node& self) {
                           xn->ensure_grad();
                           const auto& m = *shared_map;
                           for (std::size_t i = 0; i < self.grad.size(); ++i)
                             xn->grad[m[i]] += self.grad[i];
                         });
}

// ------------------------------------------------------------- row ops -----

namespace {

void require_rank2(const char* op, const Tensor& x) {
  if (x.rank() != 2) {
    throw DimensionError(std::string(op) + ": expects rank 2, got " + shape_str(x.shape()));
  }
}

}  // namespace

Tensor center_columns(const Tensor& x) {
  require_rank2("center_columns", x);
  const std::size_t k = x.dim(0), c = x.dim(1);
  if (k == 0) throw DimensionError("center_columns: empty matrix");
  std::vector<double> mean(c, 0.0);
  const auto& xv = x.data();
  for (std::size_t i = 0; i < k; ++i)
    for (std::size_t j = 0; j < c; ++j) mean[j] += xv[i * c + j];
  for (double& m : mean) m /= double(k);
  std::vector<double> out(k * c);
  for (std::size_t i = 0; i < k; ++i)
    for (std::size_t j = 0; j < c; ++j) out[i * c + j] = xv[i * c + j] - mean[j];
  auto xn = OpBuilder::node_of(x);
  return OpBuilder::make("center_columns", x.shape(), std::move(out), {&x}, [xn, k, c](Node& self) {
    std::vector<double> gmean(c, 0.0);
    for (std::size_t i = 0; i < k; ++i)
      for (std::size_t j = 0; j < c; ++j) gmean[j] += self.grad[i * c + j];
    for (double& m : gmean) m /= double(k);
    xn->ensure_grad();
    for (std::size_t i = 0; i < k; ++i)
      for (std::size_t j = 0; j < c; ++j) xn->grad[i * c + j] += self.grad[i * c + j] - gmean[j];
  });
}

Tensor row_normalize(const Tensor& x) {
  require_rank2("row_normalize", x);
  constexpr double kZeroTol = 1e-12;
  const std::size_t k = x.dim(0), c = x.dim(1);
  std::vector<double> out(k * c);
  auto norms = std::make_shared<std::vector<double>>(k, 0.0);
  auto frozen = std::make_shared<std::vector<char>>(k, 0);
  const auto& xv = x.data();
  for (std::size_t i = 0; i < k; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < c; ++j) s += xv[i * c + j] * xv[i * c + j];
    const double norm = std::sqrt(s);
    (*norms)[i] = norm;
    if (norm < kZeroTol) {
      // canonical zero handling: first unit basis vector, no gradient
      (*frozen)[i] = 1;
      out[i * c] = 1.0;
      for (std::size_t j = 1; j < c; ++j) out[i * c + j] = 0.0;
    } else {
      for (std::size_t j = 0; j < c; ++j) out[i * c + j] = xv[i * c + j] / norm;
    }
  }
  auto xn = OpBuilder::node_of(x);
  return OpBuilder::make("row_normalize", x.shape(), std::move(out), {&x},
                         [xn, norms, frozen, k, c](Node& self) {
                           xn->ensure_grad();
                           for (std::size_t i = 0; i < k; ++i) {
                             if ((*frozen)[i]) continue;
                             const double n = (*norms)[i];
                             const double* u = self.value.data() + i * c;
                             const double* g = self.grad.data() + i * c;
                             double dot = 0.0;
                             for (std::size_t j = 0; j < c; ++j) dot += g[j] * u[j];
                             double* dx = xn->grad.data() + i * c;
                             for (std::size_t j = 0; j < c; ++j) dx[j] += (g[j] - dot * u[j]) / n;
                           }
                         });
}

namespace {

Tensor row_extreme(const char* name, const Tensor& x, bool take_min) {
  require_rank2(name, x);
  const std::size_t k = x.dim(0), m = x.dim(1);
  if (m == 0) throw DimensionError(std::string(name) + ": empty rows");
  std::vector<double> out(k);
  std::vector<std::size_t> sel(k);
  const auto& xv = x.data();
  for (std::size_t i = 0; i < k; ++i) {
    std::size_t best = 0;
    double bv = xv[i * m];
    for (std::size_t j = 1; j < m; ++j) {
      const double v = xv[i * m + j];
      if (take_min ? (v < bv) : (v > bv)) {
        bv = v;
        best = j;
      }
    }
    out[i] = bv;
    sel[i] = best;
  }
  auto xn = OpBuilder::node_of(x);
  auto shared_sel = std::make_shared<std::vector<std::size_t>>(sel);
  return OpBuilder::make(
      name, {k}, std::move(out), {&x},
      [xn, shared_sel, m](Node& self) {
        xn->ensure_grad();
        for (std::size_t i = 0; i < self.grad.size(); ++i)
          xn->grad[i * m + (*shared_sel)[i]] += self.grad[i];
      },
      std::move(sel));
}

}  // namespace

Tensor row_min(const Tensor& x) { return row_extreme("row_min", x, true); }
Tensor row_max(const Tensor& x) { return row_extreme("row_max", x, false); }

Tensor row_sum(const Tensor& x) {
  require_rank2("row_sum", x);
  const std::size_t k = x.dim(0), m = x.dim(1);
  std::vector<double> out(k, 0.0);
  for (std::size_t i = 0; i < k; ++i)
    for (std::size_t j = 0; j < m; ++j) out[i] += x.data()[i * m + j];
  auto xn = OpBuilder::node_of(x);
  return OpBuilder::make("row_sum", {k}, std::move(out), {&x}, [xn, m](Node& self) {
    xn->ensure_grad();
    for (std::size_t i = 0; i < self.grad.size(); ++i)
      for (std::size_t j = 0; j < m; ++j) xn->grad[i * m + j] += self.grad[i];
  });
}

Tensor div_rows(const Tensor& x, const Tensor& v) {
  require_rank2("div_rows", x);
  if (v.rank() != 1 || v.dim(0) != x.dim(0)) {
    throw DimensionError("div_rows: vector " + shape_str(v.shape()) + " does not match rows of " +
                         shape_str(x.shape()));
  }
  const std::size_t k = x.dim(0), m = x.dim(1);
  std::vector<double> out(k * m);
  for (std::size_t i = 0; i < k; ++i) {
    const double d = v.at(i);
    for (std::size_t j = 0; j < m; ++j) out[i * m + j] = x.data()[i * m + j] / d;
  }
  auto xn = OpBuilder::node_of(x);
  auto vn = OpBuilder::node_of(v);
  return OpBuilder::make("div_rows", x.shape(), std::move(out), {&x, &v}, [xn, vn, k, m](Node& self) {
    for (std::size_t i = 0; i < k; ++i) {
      const double d = vn->value[i];
      if (xn->requires_grad) {
        xn->ensure_grad();
        for (std::size_t j = 0; j < m; ++j) xn->grad[i * m + j] += self.grad[i * m + j] / d;
      }
      if (vn->requires_grad) {
        vn->ensure_grad();
        double s = 0.0;
        for (std::size_t j = 0; j < m; ++j) s += self.grad[i * m + j] * self.value[i * m + j];
        vn->grad[i] -= s / d;
      }
    }
  });
}

Tensor gather_rows(const Tensor& x, const std::vector<std::size_t>& indices) {
  require_rank2("gather_rows", x);
  const std::size_t c = x.dim(1);
  for (std::size_t idx : indices) {
    if (idx >= x.dim(0)) throw DimensionError("gather_rows: index out of range");
  }
  std::vector<double> out(indices.size() * c);
  for (std::size_t i = 0; i < indices.size(); ++i) {
    std::memcpy(out.data() + i * c, x.data().data() + indices[i] * c, c * sizeof(double));
  }
  auto xn = OpBuilder::node_of(x);
  auto shared_idx = std::make_shared<std::vector<std::size_t>>(indices);
  return OpBuilder::make("gather_rows", {indices.size(), c}, std::move(out), {&x},
                         [xn, shared_idx, c](Node& self) {
                           xn->ensure_grad();
                           const auto& idx = *shared_idx;
                           for (std::size_t i = 0; i < idx.size(); ++i)
                             for (std::size_t j = 0; j < c; ++j)
                               xn->grad[idx[i] * c + j] += self.grad[i * c + j];
                         });
}

}  // namespace zoomsr
