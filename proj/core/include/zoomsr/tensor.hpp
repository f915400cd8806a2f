#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "zoomsr/errors.hpp"

namespace zoomsr {

using Shape = std::vector<std::size_t>;

std::size_t numel(const Shape& shape);
std::string shape_str(const Shape& shape);
bool same_shape(const Shape& a, const Shape& b);

class Tape;

namespace detail {

struct Node {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;  // sized lazily during backward
  bool requires_grad = false;
  const char* op = "leaf";
  Tape* tape = nullptr;     // nullptr for constants
  std::size_t order = 0;    // creation index on the tape
  std::vector<std::shared_ptr<Node>> inputs;
  std::function<void(Node&)> backward_fn;
  // argmin/argmax selections frozen at forward time (row_min/row_max ops);
  // exposed so gradient checks can detect selection flips.
  std::vector<std::size_t> selection;

  void ensure_grad() {
    if (grad.size() != value.size()) grad.assign(value.size(), 0.0);
  }
};

}  // namespace detail

// Value-semantics handle to a node. Ops on tensors whose lineage contains a
// gradient-requiring leaf are recorded on that leaf's tape; everything else
// evaluates eagerly with no history, so intermediates are freed by refcount.
class Tensor {
 public:
  Tensor() = default;

  static Tensor constant(Shape shape, std::vector<double> data);
  static Tensor scalar(double v);
  static Tensor zeros(Shape shape);
  static Tensor full(Shape shape, double v);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const;
  std::size_t size() const;
  std::size_t rank() const { return shape().size(); }
  std::size_t dim(std::size_t i) const { return shape().at(i); }
  const std::vector<double>& data() const;
  double at(std::size_t i) const { return data().at(i); }
  double value() const;  // scalar tensors only
  bool requires_grad() const;
  Tape* tape() const;
  const char* op_name() const;

  // Gradient accumulated by the last Tape::backward (zeros if the tensor was
  // not reached); throws if the tensor never required a gradient.
  std::vector<double> grad() const;

  // Frozen argmin/argmax indices for selection ops.
  const std::vector<std::size_t>& selection() const;

 private:
  friend class Tape;
  friend struct OpBuilder;
  explicit Tensor(std::shared_ptr<detail::Node> n) : node_(std::move(n)) {}
  std::shared_ptr<detail::Node> node_;
};

// Records the op sequence for one forward evaluation. Creation order is a
// valid evaluation order by construction (inputs exist before their users).
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Tensor leaf(Shape shape, std::vector<double> data, bool requires_grad = true);

  // Reverse sweep from a scalar root. Each gradient-requiring tensor reachable
  // from the root receives d(root)/d(tensor). Calling backward twice without
  // reset() is a contract error.
  void backward(const Tensor& root);

  // Clears accumulated gradients and re-arms backward.
  void reset();

  std::size_t node_count() const { return nodes_.size(); }
  bool backward_has_run() const { return backward_done_; }

  // Verifies every node's inputs precede it in creation order.
  bool topology_valid() const;

  // Concatenated selection snapshots of all row_min/row_max nodes, in
  // creation order. Two evaluations of the same computation are comparable.
  std::vector<std::size_t> selection_snapshot() const;

 private:
  friend struct OpBuilder;
  void record(const std::shared_ptr<detail::Node>& n);
  std::vector<std::shared_ptr<detail::Node>> nodes_;
  bool backward_done_ = false;
};

// Debug-mode finite check after every op (throws NumericError on NaN/Inf).
// Defaults to on when NDEBUG is not defined.
void set_finite_checks(bool enabled);
bool finite_checks_enabled();

// ----- op set (closed; exactly what the extractor, SR net and losses need) --

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);
// y = scale * x + shift, elementwise
Tensor affine(const Tensor& x, double scale, double shift);
Tensor exp(const Tensor& x);
Tensor log(const Tensor& x);
Tensor sqrt(const Tensor& x);
Tensor relu(const Tensor& x);
Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);

// input (N,Ci,H,W) * weights (Co,Ci,k,k) -> (N,Co,OH,OW)
Tensor conv2d(const Tensor& input, const Tensor& weights, std::size_t stride,
              std::size_t padding);
// x (N,C,H,W) + bias (C) broadcast over N,H,W
Tensor add_channel_bias(const Tensor& x, const Tensor& bias);
// (N, C*r^2, H, W) -> (N, C, H*r, W*r)
Tensor pixel_shuffle(const Tensor& x, std::size_t factor);
// (N, C, H*r, W*r) -> (N, C*r^2, H, W); exact inverse of pixel_shuffle
Tensor pixel_unshuffle(const Tensor& x, std::size_t factor);
// Catmull-Rom (a = -0.5) area-consistent downsample by an integer factor,
// separable over H and W; H and W must be divisible by the factor.
Tensor downsample_bicubic(const Tensor& x, std::size_t factor);

Tensor matmul(const Tensor& a, const Tensor& b);  // (M,K)x(K,N)
// A (Ka,C), B (Kb,C) -> D (Ka,Kb) with D[i][j] = 0.5*||a_i - b_j||^2.
// For unit rows this equals the cosine distance 1 - <a_i, b_j>, but is
// exactly zero for bit-identical rows and never negative.
Tensor half_sqdist_matrix(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);                // rank 2
Tensor reshape(const Tensor& x, Shape shape);
Tensor permute(const Tensor& x, const std::vector<std::size_t>& axes);

// X (K,C): subtract the per-column mean over rows
Tensor center_columns(const Tensor& x);
// X (K,C): L2-normalize each row; rows with norm < 1e-12 become the first
// unit basis vector and receive zero gradient
Tensor row_normalize(const Tensor& x);
// X (K,M): per-row min/max value, selection frozen (ties -> lowest index)
Tensor row_min(const Tensor& x);
Tensor row_max(const Tensor& x);
Tensor row_sum(const Tensor& x);
// X (K,M) / v (K): divide row i by v[i]
Tensor div_rows(const Tensor& x, const Tensor& v);
// X (K,C), indices into rows -> (|idx|, C)
Tensor gather_rows(const Tensor& x, const std::vector<std::size_t>& indices);

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator/(const Tensor& a, const Tensor& b) { return div(a, b); }
inline Tensor operator*(const Tensor& a, double s) { return affine(a, s, 0.0); }
inline Tensor operator*(double s, const Tensor& a) { return affine(a, s, 0.0); }
inline Tensor operator+(const Tensor& a, double s) { return affine(a, 1.0, s); }
inline Tensor operator-(const Tensor& a, double s) { return affine(a, 1.0, -s); }
// s - x
inline Tensor rsub(double s, const Tensor& x) { return affine(x, -1.0, s); }

}  // namespace zoomsr
