// SPDX-License-Identifier: Apache-2.0
//
// Dense f64 tensors with reverse-mode automatic differentiation.
//
// Every op records its inputs and a backward closure on the result node when
// gradient recording is enabled and at least one input requires a gradient.
// `backward()` orders the recorded graph topologically and accumulates
// gradients into every reachable node. The graph is owned by the result
// tensors, so dropping the loss releases the whole tape.
#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace canet {

using Shape = std::vector<std::size_t>;

std::string shape_string(const Shape& shape);
std::size_t shape_numel(const Shape& shape);

namespace detail {

struct Node {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> inputs;
  std::function<void(Node&)> backward;

  void ensure_grad() {
    if (grad.size() != value.size()) grad.assign(value.size(), 0.0);
  }
};

}  // namespace detail

class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double fill, bool requires_grad = false);
  static Tensor from_values(Shape shape, std::vector<double> values,
                            bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);

  bool defined() const noexcept { return node_ != nullptr; }
  const Shape& shape() const;
  std::size_t rank() const { return shape().size(); }
  std::size_t dim(std::size_t axis) const;
  std::size_t numel() const;

  std::span<const double> values() const;
  /// Writable storage. Only leaves may be written; results of recorded ops
  /// are immutable.
  std::span<double> mutable_values();
  double item() const;
  double at(std::size_t i) const;
  double at(std::size_t row, std::size_t col) const;

  bool requires_grad() const;
  bool has_grad() const;
  std::span<const double> grad() const;
  std::span<double> mutable_grad();
  void zero_grad();

  /// Copy of the value with no history.
  Tensor detach() const;
  /// Deep copy of value (and requires_grad flag) as a fresh leaf.
  Tensor clone() const;

  detail::Node* node() const noexcept { return node_.get(); }
  const std::shared_ptr<detail::Node>& node_ptr() const noexcept { return node_; }
  explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}

 private:
  std::shared_ptr<detail::Node> node_;
};

// ---------------------------------------------------------------------------
// Recording control and instrumentation.

bool grad_enabled() noexcept;

/// Disables graph recording on this thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard() noexcept;
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

/// Counts floating point operations performed by the kernels on this thread
/// while alive (1 multiply-accumulate = 2 FLOPs, layer-norm 5 per element).
/// Counters nest; the innermost one receives the counts.
class FlopCounter {
 public:
  FlopCounter() noexcept;
  ~FlopCounter();
  FlopCounter(const FlopCounter&) = delete;
  FlopCounter& operator=(const FlopCounter&) = delete;

  std::uint64_t flops() const noexcept { return flops_; }
  void add(std::uint64_t n) noexcept { flops_ += n; }

 private:
  std::uint64_t flops_ = 0;
  FlopCounter* previous_;
};

void record_flops(std::uint64_t n) noexcept;

/// Runs reverse accumulation from a single-element tensor.
void backward(const Tensor& loss);

// ---------------------------------------------------------------------------
// Ops. Shapes are checked; mismatches raise DimensionError.

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double factor);
/// `a * s` where `s` is a single-element tensor.
Tensor mul_scalar(const Tensor& a, const Tensor& s);
Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);
Tensor reshape(const Tensor& a, Shape shape);

Tensor softmax(const Tensor& x, int axis = -1);
/// log(max(x, eps)); the gradient is zero where the clamp is active.
Tensor log_clamped(const Tensor& x, double eps);
Tensor gelu(const Tensor& x);

/// Single element `x[index]` of a flattened tensor, as a scalar.
Tensor select(const Tensor& x, std::size_t index);
/// Rows [begin, end) of a matrix.
Tensor slice_rows(const Tensor& x, std::size_t begin, std::size_t end);
/// Zeroes rows whose `keep` flag is 0.
Tensor mask_rows(const Tensor& x, std::span<const std::uint8_t> keep);
/// out[g] = sum of x[i] with group[i] == g, for g in [0, groups).
Tensor group_sum(const Tensor& x, std::span<const std::size_t> group, std::size_t groups);

/// y = x * W[:out, :in]^T + b[:out] where W is [D_out, D_in] and x is [T, in].
/// Output columns below `skip` are left uncomputed at -inf and pass no
/// gradient.
Tensor linear_slice(const Tensor& x, const Tensor& weight, const Tensor& bias,
                    std::size_t in, std::size_t out, std::size_t skip = 0);
/// Layer norm over the leading `width` features with sliced affine
/// parameters; population variance, eps inside the square root.
Tensor layernorm_slice(const Tensor& x, const Tensor& weight, const Tensor& bias,
                       std::size_t width, double eps);
/// Rows `ids` of `table`, restricted to the first `width` columns.
Tensor embedding_slice(const Tensor& table, std::span<const std::size_t> ids,
                       std::size_t width);
/// Strictly causal multi-head attention core on projected q, k, v ([T, d]).
/// Position t attends to positions j <= t whose `key_valid[j]` is set; rows
/// with no admissible key produce zeros. Scores are scaled by
/// 1/sqrt(d/heads).
Tensor causal_attention_core(const Tensor& q, const Tensor& k, const Tensor& v,
                             std::size_t heads, std::span<const std::uint8_t> key_valid);
/// Mean next-item cross entropy over rows with a nonzero target. Column 0
/// (padding id) is excluded from the normalization.
Tensor cross_entropy(const Tensor& logits, std::span<const std::size_t> targets);
/// Forward value is `out` unchanged; the backward pass also sends
/// sum(grad * out) / value(weight) into the single-element `weight`, i.e.
/// the derivative of out * weight / stop_gradient(weight).
Tensor ratio_gate(const Tensor& out, const Tensor& weight, double floor = 1e-12);
/// Same gate with the stop-gradient denominator pinned to `reference`: the
/// forward value is out * weight / reference (exactly `out` when the weight
/// equals the reference). Used to evaluate the gated objective at perturbed
/// parameters with the denominator frozen.
Tensor ratio_gate(const Tensor& out, const Tensor& weight, double reference, double floor);

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }

}  // namespace canet
