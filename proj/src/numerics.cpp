// SPDX-License-Identifier: Apache-2.0
#include "canet/numerics.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <sstream>
#include <unordered_set>

#include "canet/errors.hpp"

namespace canet {

namespace {

using detail::Node;
using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatrixView = Eigen::Map<RowMatrix, 0, Eigen::OuterStride<>>;
using ConstMatrixView = Eigen::Map<const RowMatrix, 0, Eigen::OuterStride<>>;

thread_local bool tls_grad_enabled = true;
thread_local FlopCounter* tls_flop_counter = nullptr;

ConstMatrixView cview(const double* data, std::size_t rows, std::size_t cols,
                      std::size_t stride) {
  return ConstMatrixView(data, static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols),
                         Eigen::OuterStride<>(static_cast<Eigen::Index>(stride)));
}

MatrixView mview(double* data, std::size_t rows, std::size_t cols, std::size_t stride) {
  return MatrixView(data, static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols),
                    Eigen::OuterStride<>(static_cast<Eigen::Index>(stride)));
}

// Builds a result node. History is only attached when recording is enabled
// and some input needs a gradient.
Tensor make_result(Shape shape, std::vector<double> value,
                   std::initializer_list<const Tensor*> inputs,
                   std::function<void(Node&)> backward_fn) {
  auto node = std::make_shared<Node>();
  node->shape = std::move(shape);
  node->value = std::move(value);
  bool needs = false;
  if (tls_grad_enabled) {
    for (const Tensor* t : inputs) needs = needs || t->requires_grad();
  }
  if (needs) {
    node->requires_grad = true;
    for (const Tensor* t : inputs) node->inputs.push_back(t->node_ptr());
    node->backward = std::move(backward_fn);
  }
  return Tensor(std::move(node));
}

// Gradient buffer of input `i`, or nullptr when it does not take gradients.
double* input_grad(Node& self, std::size_t i) {
  Node& in = *self.inputs[i];
  if (!in.requires_grad) return nullptr;
  in.ensure_grad();
  return in.grad.data();
}

void require_defined(const Tensor& t, const char* what) {
  if (!t.defined()) throw UsageError(std::string(what) + ": undefined tensor");
}

void require_matrix(const Tensor& t, const char* what) {
  require_defined(t, what);
  if (t.rank() != 2) {
    throw DimensionError(std::string(what) + ": expected a matrix, got shape " +
                         shape_string(t.shape()));
  }
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* what) {
  require_defined(a, what);
  require_defined(b, what);
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(what) + ": shape mismatch " + shape_string(a.shape()) +
                         " vs " + shape_string(b.shape()));
  }
}

}  // namespace

std::string shape_string(const Shape& shape) {
  std::ostringstream out;
  out << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) out << ',';
    out << shape[i];
  }
  out << ']';
  return out.str();
}

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (std::size_t d : shape) n *= d;
  return n;
}

// ---------------------------------------------------------------------------
// Tensor

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  return full(std::move(shape), 0.0, requires_grad);
}

Tensor Tensor::full(Shape shape, double fill, bool requires_grad) {
  const std::size_t n = shape_numel(shape);
  return from_values(std::move(shape), std::vector<double>(n, fill), requires_grad);
}

Tensor Tensor::from_values(Shape shape, std::vector<double> values, bool requires_grad) {
  for (std::size_t d : shape) {
    if (d == 0) throw DimensionError("tensor dimensions must be positive: " + shape_string(shape));
  }
  if (shape_numel(shape) != values.size()) {
    throw DimensionError("shape " + shape_string(shape) + " does not match " +
                         std::to_string(values.size()) + " values");
  }
  auto node = std::make_shared<Node>();
  node->shape = std::move(shape);
  node->value = std::move(values);
  node->requires_grad = requires_grad;
  return Tensor(std::move(node));
}

Tensor Tensor::scalar(double value, bool requires_grad) {
  return from_values({1}, {value}, requires_grad);
}

const Shape& Tensor::shape() const {
  require_defined(*this, "shape");
  return node_->shape;
}

std::size_t Tensor::dim(std::size_t axis) const {
  const Shape& s = shape();
  if (axis >= s.size()) {
    throw IndexError("axis " + std::to_string(axis) + " out of range for shape " + shape_string(s));
  }
  return s[axis];
}

std::size_t Tensor::numel() const { return shape_numel(shape()); }

std::span<const double> Tensor::values() const {
  require_defined(*this, "values");
  return node_->value;
}

std::span<double> Tensor::mutable_values() {
  require_defined(*this, "mutable_values");
  if (!node_->inputs.empty()) throw UsageError("cannot write to the result of a recorded op");
  return node_->value;
}

double Tensor::item() const {
  if (numel() != 1) throw UsageError("item() on tensor of shape " + shape_string(shape()));
  return node_->value[0];
}

double Tensor::at(std::size_t i) const {
  if (i >= numel()) throw IndexError("index " + std::to_string(i) + " out of range");
  return node_->value[i];
}

double Tensor::at(std::size_t row, std::size_t col) const {
  if (rank() != 2 || row >= dim(0) || col >= dim(1)) {
    throw IndexError("index (" + std::to_string(row) + "," + std::to_string(col) +
                     ") out of range for shape " + shape_string(shape()));
  }
  return node_->value[row * dim(1) + col];
}

bool Tensor::requires_grad() const { return node_ && node_->requires_grad; }

bool Tensor::has_grad() const { return node_ && node_->grad.size() == node_->value.size(); }

std::span<const double> Tensor::grad() const {
  if (!has_grad()) throw UsageError("tensor has no gradient");
  return node_->grad;
}

std::span<double> Tensor::mutable_grad() {
  require_defined(*this, "mutable_grad");
  node_->ensure_grad();
  return node_->grad;
}

void Tensor::zero_grad() {
  if (node_ && !node_->grad.empty()) std::fill(node_->grad.begin(), node_->grad.end(), 0.0);
}

Tensor Tensor::detach() const { return from_values(shape(), node_->value, false); }

Tensor Tensor::clone() const { return from_values(shape(), node_->value, node_->requires_grad); }

// ---------------------------------------------------------------------------
// Recording control

bool grad_enabled() noexcept { return tls_grad_enabled; }

NoGradGuard::NoGradGuard() noexcept : previous_(tls_grad_enabled) { tls_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { tls_grad_enabled = previous_; }

FlopCounter::FlopCounter() noexcept : previous_(tls_flop_counter) { tls_flop_counter = this; }
FlopCounter::~FlopCounter() { tls_flop_counter = previous_; }

void record_flops(std::uint64_t n) noexcept {
  if (tls_flop_counter) tls_flop_counter->add(n);
}

void backward(const Tensor& loss) {
  require_defined(loss, "backward");
  if (loss.numel() != 1) {
    throw UsageError("backward() needs a scalar loss, got shape " + shape_string(loss.shape()));
  }
  if (!loss.requires_grad()) throw UsageError("backward() on a tensor without recorded history");

  // Iterative post-order DFS gives a topological order (inputs first).
  std::vector<Node*> order;
  std::unordered_set<Node*> visited;
  std::vector<std::pair<Node*, std::size_t>> stack;
  stack.emplace_back(loss.node(), 0);
  visited.insert(loss.node());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->inputs.size()) {
      Node* child = node->inputs[next++].get();
      if (child->requires_grad && visited.insert(child).second) stack.emplace_back(child, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  for (Node* node : order) node->ensure_grad();
  loss.node()->grad[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    if ((*it)->backward) (*it)->backward(**it);
  }
}

// ---------------------------------------------------------------------------
// Elementwise and reductions

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_matrix(a, "matmul");
  require_matrix(b, "matmul");
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k) {
    throw DimensionError("matmul: inner dimensions differ for " + shape_string(a.shape()) +
                         " x " + shape_string(b.shape()));
  }
  std::vector<double> out(m * n);
  mview(out.data(), m, n, n).noalias() =
      cview(a.values().data(), m, k, k) * cview(b.values().data(), k, n, n);
  record_flops(2ULL * m * k * n);
  return make_result({m, n}, std::move(out), {&a, &b}, [m, k, n](Node& self) {
    const auto dy = cview(self.grad.data(), m, n, n);
    if (double* ga = input_grad(self, 0)) {
      mview(ga, m, k, k).noalias() += dy * cview(self.inputs[1]->value.data(), k, n, n).transpose();
    }
    if (double* gb = input_grad(self, 1)) {
      mview(gb, k, n, n).noalias() += cview(self.inputs[0]->value.data(), m, k, k).transpose() * dy;
    }
  });
}

namespace {

template <typename Fwd, typename Da, typename Db>
Tensor binary_elementwise(const Tensor& a, const Tensor& b, const char* what, Fwd fwd, Da da,
                          Db db) {
  require_same_shape(a, b, what);
  const auto av = a.values();
  const auto bv = b.values();
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = fwd(av[i], bv[i]);
  return make_result(a.shape(), std::move(out), {&a, &b}, [da, db](Node& self) {
    const auto& x = self.inputs[0]->value;
    const auto& y = self.inputs[1]->value;
    if (double* g = input_grad(self, 0)) {
      for (std::size_t i = 0; i < x.size(); ++i) g[i] += self.grad[i] * da(x[i], y[i]);
    }
    if (double* g = input_grad(self, 1)) {
      for (std::size_t i = 0; i < x.size(); ++i) g[i] += self.grad[i] * db(x[i], y[i]);
    }
  });
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  return binary_elementwise(
      a, b, "add", [](double x, double y) { return x + y; }, [](double, double) { return 1.0; },
      [](double, double) { return 1.0; });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  return binary_elementwise(
      a, b, "sub", [](double x, double y) { return x - y; }, [](double, double) { return 1.0; },
      [](double, double) { return -1.0; });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  return binary_elementwise(
      a, b, "mul", [](double x, double y) { return x * y; }, [](double, double y) { return y; },
      [](double x, double) { return x; });
}

Tensor scale(const Tensor& a, double factor) {
  require_defined(a, "scale");
  std::vector<double> out(a.values().begin(), a.values().end());
  for (double& v : out) v *= factor;
  return make_result(a.shape(), std::move(out), {&a}, [factor](Node& self) {
    if (double* g = input_grad(self, 0)) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += factor * self.grad[i];
    }
  });
}

Tensor mul_scalar(const Tensor& a, const Tensor& s) {
  require_defined(a, "mul_scalar");
  require_defined(s, "mul_scalar");
  if (s.numel() != 1) {
    throw DimensionError("mul_scalar: factor must have one element, got " + shape_string(s.shape()));
  }
  const double factor = s.item();
  std::vector<double> out(a.values().begin(), a.values().end());
  for (double& v : out) v *= factor;
  return make_result(a.shape(), std::move(out), {&a, &s}, [](Node& self) {
    const double factor = self.inputs[1]->value[0];
    const auto& x = self.inputs[0]->value;
    if (double* g = input_grad(self, 0)) {
      for (std::size_t i = 0; i < x.size(); ++i) g[i] += factor * self.grad[i];
    }
    if (double* g = input_grad(self, 1)) {
      double acc = 0.0;
      for (std::size_t i = 0; i < x.size(); ++i) acc += x[i] * self.grad[i];
      g[0] += acc;
    }
  });
}

Tensor sum(const Tensor& a) {
  require_defined(a, "sum");
  double total = 0.0;
  for (double v : a.values()) total += v;
  return make_result({1}, {total}, {&a}, [](Node& self) {
    if (double* g = input_grad(self, 0)) {
      const std::size_t n = self.inputs[0]->value.size();
      for (std::size_t i = 0; i < n; ++i) g[i] += self.grad[0];
    }
  });
}

Tensor mean(const Tensor& a) { return scale(sum(a), 1.0 / static_cast<double>(a.numel())); }

Tensor reshape(const Tensor& a, Shape shape) {
  require_defined(a, "reshape");
  if (shape_numel(shape) != a.numel()) {
    throw DimensionError("reshape: cannot view " + shape_string(a.shape()) + " as " +
                         shape_string(shape));
  }
  std::vector<double> out(a.values().begin(), a.values().end());
  return make_result(std::move(shape), std::move(out), {&a}, [](Node& self) {
    if (double* g = input_grad(self, 0)) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
    }
  });
}

Tensor softmax(const Tensor& x, int axis) {
  require_defined(x, "softmax");
  const Shape& shape = x.shape();
  const int rank = static_cast<int>(shape.size());
  const int ax = axis < 0 ? axis + rank : axis;
  if (ax < 0 || ax >= rank) throw IndexError("softmax: axis " + std::to_string(axis) + " out of range");
  std::size_t outer = 1, inner = 1;
  for (int i = 0; i < ax; ++i) outer *= shape[i];
  for (int i = ax + 1; i < rank; ++i) inner *= shape[i];
  const std::size_t d = shape[ax];

  const auto xv = x.values();
  for (double v : xv) {
    if (!std::isfinite(v)) throw NumericError("softmax: non-finite input");
  }
  std::vector<double> out(xv.size());
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t in = 0; in < inner; ++in) {
      const std::size_t base = o * d * inner + in;
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t j = 0; j < d; ++j) mx = std::max(mx, xv[base + j * inner]);
      double z = 0.0;
      for (std::size_t j = 0; j < d; ++j) {
        const double e = std::exp(xv[base + j * inner] - mx);
        out[base + j * inner] = e;
        z += e;
      }
      for (std::size_t j = 0; j < d; ++j) out[base + j * inner] /= z;
    }
  }
  return make_result(shape, std::move(out), {&x}, [outer, inner, d](Node& self) {
    double* g = input_grad(self, 0);
    if (!g) return;
    const auto& y = self.value;
    for (std::size_t o = 0; o < outer; ++o) {
      for (std::size_t in = 0; in < inner; ++in) {
        const std::size_t base = o * d * inner + in;
        double dot = 0.0;
        for (std::size_t j = 0; j < d; ++j) dot += y[base + j * inner] * self.grad[base + j * inner];
        for (std::size_t j = 0; j < d; ++j) {
          const std::size_t idx = base + j * inner;
          g[idx] += y[idx] * (self.grad[idx] - dot);
        }
      }
    }
  });
}

Tensor log_clamped(const Tensor& x, double eps) {
  require_defined(x, "log_clamped");
  const auto xv = x.values();
  std::vector<double> out(xv.size());
  for (std::size_t i = 0; i < xv.size(); ++i) out[i] = std::log(std::max(xv[i], eps));
  return make_result(x.shape(), std::move(out), {&x}, [eps](Node& self) {
    if (double* g = input_grad(self, 0)) {
      const auto& xv = self.inputs[0]->value;
      for (std::size_t i = 0; i < xv.size(); ++i) {
        if (xv[i] > eps) g[i] += self.grad[i] / xv[i];
      }
    }
  });
}

Tensor gelu(const Tensor& x) {
  require_defined(x, "gelu");
  const auto xv = x.values();
  std::vector<double> out(xv.size());
  for (std::size_t i = 0; i < xv.size(); ++i) {
    out[i] = 0.5 * xv[i] * (1.0 + std::erf(xv[i] * std::numbers::sqrt2 / 2.0));
  }
  return make_result(x.shape(), std::move(out), {&x}, [](Node& self) {
    if (double* g = input_grad(self, 0)) {
      const auto& xv = self.inputs[0]->value;
      const double inv_sqrt_2pi = 0.5 * std::numbers::inv_sqrtpi * std::numbers::sqrt2;
      for (std::size_t i = 0; i < xv.size(); ++i) {
        const double cdf = 0.5 * (1.0 + std::erf(xv[i] * std::numbers::sqrt2 / 2.0));
        const double pdf = inv_sqrt_2pi * std::exp(-0.5 * xv[i] * xv[i]);
        g[i] += self.grad[i] * (cdf + xv[i] * pdf);
      }
    }
  });
}

Tensor select(const Tensor& x, std::size_t index) {
  require_defined(x, "select");
  if (index >= x.numel()) {
    throw IndexError("select: index " + std::to_string(index) + " out of range for shape " +
                     shape_string(x.shape()));
  }
  return make_result({1}, {x.values()[index]}, {&x}, [index](Node& self) {
    if (double* g = input_grad(self, 0)) g[index] += self.grad[0];
  });
}

Tensor slice_rows(const Tensor& x, std::size_t begin, std::size_t end) {
  require_matrix(x, "slice_rows");
  if (begin >= end || end > x.dim(0)) {
    throw IndexError("slice_rows: [" + std::to_string(begin) + "," + std::to_string(end) +
                     ") out of range for shape " + shape_string(x.shape()));
  }
  const std::size_t cols = x.dim(1);
  const auto xv = x.values();
  std::vector<double> out(xv.begin() + begin * cols, xv.begin() + end * cols);
  return make_result({end - begin, cols}, std::move(out), {&x}, [begin, cols](Node& self) {
    if (double* g = input_grad(self, 0)) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[begin * cols + i] += self.grad[i];
    }
  });
}

Tensor mask_rows(const Tensor& x, std::span<const std::uint8_t> keep) {
  require_matrix(x, "mask_rows");
  if (keep.size() != x.dim(0)) {
    throw DimensionError("mask_rows: mask of length " + std::to_string(keep.size()) +
                         " for shape " + shape_string(x.shape()));
  }
  const std::size_t cols = x.dim(1);
  std::vector<std::uint8_t> mask(keep.begin(), keep.end());
  std::vector<double> out(x.values().begin(), x.values().end());
  for (std::size_t r = 0; r < mask.size(); ++r) {
    if (!mask[r]) std::fill_n(out.begin() + r * cols, cols, 0.0);
  }
  return make_result(x.shape(), std::move(out), {&x}, [mask = std::move(mask), cols](Node& self) {
    if (double* g = input_grad(self, 0)) {
      for (std::size_t r = 0; r < mask.size(); ++r) {
        if (!mask[r]) continue;
        for (std::size_t c = 0; c < cols; ++c) g[r * cols + c] += self.grad[r * cols + c];
      }
    }
  });
}

Tensor group_sum(const Tensor& x, std::span<const std::size_t> group, std::size_t groups) {
  require_defined(x, "group_sum");
  if (group.size() != x.numel()) {
    throw DimensionError("group_sum: " + std::to_string(group.size()) + " group ids for " +
                         std::to_string(x.numel()) + " values");
  }
  std::vector<std::size_t> ids(group.begin(), group.end());
  std::vector<double> out(groups, 0.0);
  const auto xv = x.values();
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] >= groups) throw IndexError("group_sum: group id out of range");
    out[ids[i]] += xv[i];
  }
  return make_result({groups}, std::move(out), {&x}, [ids = std::move(ids)](Node& self) {
    if (double* g = input_grad(self, 0)) {
      for (std::size_t i = 0; i < ids.size(); ++i) g[i] += self.grad[ids[i]];
    }
  });
}

// ---------------------------------------------------------------------------
// Sliced layers

Tensor linear_slice(const Tensor& x, const Tensor& weight, const Tensor& bias, std::size_t in,
                    std::size_t out, std::size_t skip) {
  require_matrix(x, "linear_slice");
  require_matrix(weight, "linear_slice");
  const std::size_t d_out = weight.dim(0), d_in = weight.dim(1);
  if (in < 1 || in > d_in || out < 1 || out > d_out || skip >= out) {
    throw SliceError("linear_slice: requested [" + std::to_string(out) + "," + std::to_string(in) +
                     "] of weight " + shape_string(weight.shape()));
  }
  if (x.dim(1) != in) {
    throw DimensionError("linear_slice: input " + shape_string(x.shape()) + " vs slice width " +
                         std::to_string(in));
  }
  if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != d_out)) {
    throw DimensionError("linear_slice: bias " + shape_string(bias.shape()) + " for weight " +
                         shape_string(weight.shape()));
  }
  const std::size_t rows = x.dim(0);
  const std::size_t live = out - skip;
  std::vector<double> y(rows * out, -std::numeric_limits<double>::infinity());
  auto yv = mview(y.data() + skip, rows, live, out);
  yv.noalias() = cview(x.values().data(), rows, in, in) *
                 cview(weight.values().data() + skip * d_in, live, in, d_in).transpose();
  if (bias.defined()) {
    const auto bv = bias.values();
    for (std::size_t r = 0; r < rows; ++r) {
      for (std::size_t o = skip; o < out; ++o) y[r * out + o] += bv[o];
    }
  }
  record_flops(2ULL * rows * in * live);
  const Tensor b = bias.defined() ? bias : Tensor::scalar(0.0);
  const bool has_bias = bias.defined();
  return make_result({rows, out}, std::move(y), {&x, &weight, &b},
                     [rows, in, out, skip, live, d_in, has_bias](Node& self) {
                       const auto dy = cview(self.grad.data() + skip, rows, live, out);
                       if (double* gx = input_grad(self, 0)) {
                         mview(gx, rows, in, in).noalias() +=
                             dy * cview(self.inputs[1]->value.data() + skip * d_in, live, in, d_in);
                       }
                       if (double* gw = input_grad(self, 1)) {
                         mview(gw + skip * d_in, live, in, d_in).noalias() +=
                             dy.transpose() * cview(self.inputs[0]->value.data(), rows, in, in);
                       }
                       if (has_bias) {
                         if (double* gb = input_grad(self, 2)) {
                           for (std::size_t r = 0; r < rows; ++r) {
                             for (std::size_t o = skip; o < out; ++o) gb[o] += self.grad[r * out + o];
                           }
                         }
                       }
                     });
}

Tensor layernorm_slice(const Tensor& x, const Tensor& weight, const Tensor& bias,
                       std::size_t width, double eps) {
  require_matrix(x, "layernorm_slice");
  require_defined(weight, "layernorm_slice");
  require_defined(bias, "layernorm_slice");
  const std::size_t d = weight.numel();
  if (width < 1 || width > d || bias.numel() != d) {
    throw SliceError("layernorm_slice: width " + std::to_string(width) + " for parameters of size " +
                     std::to_string(d));
  }
  if (x.dim(1) != width) {
    throw DimensionError("layernorm_slice: input " + shape_string(x.shape()) + " vs width " +
                         std::to_string(width));
  }
  const std::size_t rows = x.dim(0);
  const auto xv = x.values();
  const auto wv = weight.values();
  const auto bv = bias.values();
  std::vector<double> y(rows * width);
  std::vector<double> xhat(rows * width);
  std::vector<double> rstd(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* row = xv.data() + r * width;
    double mu = 0.0;
    for (std::size_t c = 0; c < width; ++c) mu += row[c];
    mu /= static_cast<double>(width);
    double var = 0.0;
    for (std::size_t c = 0; c < width; ++c) var += (row[c] - mu) * (row[c] - mu);
    var /= static_cast<double>(width);
    rstd[r] = 1.0 / std::sqrt(var + eps);
    for (std::size_t c = 0; c < width; ++c) {
      const double h = (row[c] - mu) * rstd[r];
      xhat[r * width + c] = h;
      y[r * width + c] = h * wv[c] + bv[c];
    }
  }
  record_flops(5ULL * rows * width);
  return make_result(
      {rows, width}, std::move(y), {&x, &weight, &bias},
      [rows, width, xhat = std::move(xhat), rstd = std::move(rstd)](Node& self) {
        const auto& wv = self.inputs[1]->value;
        double* gx = input_grad(self, 0);
        double* gw = input_grad(self, 1);
        double* gb = input_grad(self, 2);
        std::vector<double> dxhat(width);
        for (std::size_t r = 0; r < rows; ++r) {
          const double* dy = self.grad.data() + r * width;
          const double* h = xhat.data() + r * width;
          if (gw || gb) {
            for (std::size_t c = 0; c < width; ++c) {
              if (gw) gw[c] += dy[c] * h[c];
              if (gb) gb[c] += dy[c];
            }
          }
          if (!gx) continue;
          double mean_d = 0.0, mean_dh = 0.0;
          for (std::size_t c = 0; c < width; ++c) {
            dxhat[c] = dy[c] * wv[c];
            mean_d += dxhat[c];
            mean_dh += dxhat[c] * h[c];
          }
          mean_d /= static_cast<double>(width);
          mean_dh /= static_cast<double>(width);
          for (std::size_t c = 0; c < width; ++c) {
            gx[r * width + c] += rstd[r] * (dxhat[c] - mean_d - h[c] * mean_dh);
          }
        }
      });
}

Tensor embedding_slice(const Tensor& table, std::span<const std::size_t> ids, std::size_t width) {
  require_matrix(table, "embedding_slice");
  const std::size_t vocab = table.dim(0), d = table.dim(1);
  if (width < 1 || width > d) {
    throw SliceError("embedding_slice: width " + std::to_string(width) + " of table " +
                     shape_string(table.shape()));
  }
  if (ids.empty()) throw DataError("embedding_slice: empty id list");
  std::vector<std::size_t> rows(ids.begin(), ids.end());
  const auto tv = table.values();
  std::vector<double> out(rows.size() * width);
  for (std::size_t t = 0; t < rows.size(); ++t) {
    if (rows[t] >= vocab) {
      throw DataError("embedding_slice: id " + std::to_string(rows[t]) + " outside table of " +
                      std::to_string(vocab) + " rows");
    }
    std::copy_n(tv.begin() + rows[t] * d, width, out.begin() + t * width);
  }
  const std::size_t n = rows.size();
  return make_result({n, width}, std::move(out), {&table},
                     [rows = std::move(rows), width, d](Node& self) {
                       if (double* g = input_grad(self, 0)) {
                         for (std::size_t t = 0; t < rows.size(); ++t) {
                           for (std::size_t c = 0; c < width; ++c) {
                             g[rows[t] * d + c] += self.grad[t * width + c];
                           }
                         }
                       }
                     });
}

Tensor causal_attention_core(const Tensor& q, const Tensor& k, const Tensor& v, std::size_t heads,
                             std::span<const std::uint8_t> key_valid) {
  require_same_shape(q, k, "causal_attention_core");
  require_same_shape(q, v, "causal_attention_core");
  if (q.rank() != 2) throw DimensionError("causal_attention_core: expected [T, d] inputs");
  const std::size_t steps = q.dim(0), width = q.dim(1);
  if (heads == 0 || width % heads != 0) {
    throw ConfigError("attention width " + std::to_string(width) + " not divisible by " +
                      std::to_string(heads) + " heads");
  }
  if (key_valid.size() != steps) {
    throw DimensionError("causal_attention_core: key mask length " +
                         std::to_string(key_valid.size()) + " for " + std::to_string(steps) +
                         " positions");
  }
  const std::size_t hd = width / heads;
  const double inv_scale = 1.0 / std::sqrt(static_cast<double>(hd));
  const double* qv = q.values().data();
  const double* kv = k.values().data();
  const double* vv = v.values().data();
  std::vector<std::uint8_t> valid(key_valid.begin(), key_valid.end());

  // probs[h][t][j]
  std::vector<double> probs(heads * steps * steps, 0.0);
  std::vector<double> out(steps * width, 0.0);
  std::vector<double> scores(steps);
  for (std::size_t h = 0; h < heads; ++h) {
    const std::size_t off = h * hd;
    for (std::size_t t = 0; t < steps; ++t) {
      // Full score row, masked afterwards.
      for (std::size_t j = 0; j < steps; ++j) {
        double s = 0.0;
        for (std::size_t c = 0; c < hd; ++c) s += qv[t * width + off + c] * kv[j * width + off + c];
        scores[j] = s * inv_scale;
      }
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t j = 0; j <= t; ++j) {
        if (valid[j]) mx = std::max(mx, scores[j]);
      }
      if (!std::isfinite(mx)) continue;
      double* p = probs.data() + (h * steps + t) * steps;
      double z = 0.0;
      for (std::size_t j = 0; j <= t; ++j) {
        if (!valid[j]) continue;
        p[j] = std::exp(scores[j] - mx);
        z += p[j];
      }
      for (std::size_t j = 0; j <= t; ++j) p[j] /= z;
      // Full mix over all positions; masked weights are zero.
      for (std::size_t j = 0; j < steps; ++j) {
        const double w = p[j];
        for (std::size_t c = 0; c < hd; ++c) out[t * width + off + c] += w * vv[j * width + off + c];
      }
    }
  }
  record_flops(4ULL * steps * steps * width);
  return make_result(
      {steps, width}, std::move(out), {&q, &k, &v},
      [steps, width, heads, hd, inv_scale, probs = std::move(probs)](Node& self) {
        const double* qv = self.inputs[0]->value.data();
        const double* kv = self.inputs[1]->value.data();
        const double* vv = self.inputs[2]->value.data();
        double* gq = input_grad(self, 0);
        double* gk = input_grad(self, 1);
        double* gv = input_grad(self, 2);
        const double* dout = self.grad.data();
        std::vector<double> dp(steps);
        for (std::size_t h = 0; h < heads; ++h) {
          const std::size_t off = h * hd;
          for (std::size_t t = 0; t < steps; ++t) {
            const double* p = probs.data() + (h * steps + t) * steps;
            double weighted = 0.0;
            for (std::size_t j = 0; j <= t; ++j) {
              if (p[j] == 0.0) {
                dp[j] = 0.0;
                continue;
              }
              double s = 0.0;
              for (std::size_t c = 0; c < hd; ++c) s += dout[t * width + off + c] * vv[j * width + off + c];
              dp[j] = s;
              weighted += p[j] * s;
              if (gv) {
                for (std::size_t c = 0; c < hd; ++c) gv[j * width + off + c] += p[j] * dout[t * width + off + c];
              }
            }
            for (std::size_t j = 0; j <= t; ++j) {
              if (p[j] == 0.0) continue;
              const double ds = p[j] * (dp[j] - weighted) * inv_scale;
              for (std::size_t c = 0; c < hd; ++c) {
                if (gq) gq[t * width + off + c] += ds * kv[j * width + off + c];
                if (gk) gk[j * width + off + c] += ds * qv[t * width + off + c];
              }
            }
          }
        }
      });
}

Tensor cross_entropy(const Tensor& logits, std::span<const std::size_t> targets) {
  require_matrix(logits, "cross_entropy");
  const std::size_t rows = logits.dim(0), cols = logits.dim(1);
  if (targets.size() != rows) {
    throw DimensionError("cross_entropy: " + std::to_string(targets.size()) + " targets for logits " +
                         shape_string(logits.shape()));
  }
  if (cols < 2) throw DimensionError("cross_entropy: need at least one item column");
  std::vector<std::size_t> tgt(targets.begin(), targets.end());
  std::size_t count = 0;
  for (std::size_t t : tgt) {
    if (t >= cols) throw DataError("cross_entropy: target " + std::to_string(t) + " out of range");
    count += t != 0;
  }
  if (count == 0) throw DataError("cross_entropy: every position is padding");

  const auto lv = logits.values();
  // Softmax over columns 1..cols-1 of each counted row, kept for backward.
  std::vector<double> probs(rows * cols, 0.0);
  double total = 0.0;
  for (std::size_t r = 0; r < rows; ++r) {
    if (tgt[r] == 0) continue;
    const double* row = lv.data() + r * cols;
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t c = 1; c < cols; ++c) mx = std::max(mx, row[c]);
    if (!std::isfinite(mx)) throw NumericError("cross_entropy: non-finite logits");
    double z = 0.0;
    for (std::size_t c = 1; c < cols; ++c) {
      const double e = std::exp(row[c] - mx);
      probs[r * cols + c] = e;
      z += e;
    }
    for (std::size_t c = 1; c < cols; ++c) probs[r * cols + c] /= z;
    total += (mx + std::log(z)) - row[tgt[r]];
  }
  const double inv = 1.0 / static_cast<double>(count);
  return make_result({1}, {total * inv}, {&logits},
                     [rows, cols, inv, tgt = std::move(tgt), probs = std::move(probs)](Node& self) {
                       double* g = input_grad(self, 0);
                       if (!g) return;
                       const double up = self.grad[0] * inv;
                       for (std::size_t r = 0; r < rows; ++r) {
                         if (tgt[r] == 0) continue;
                         for (std::size_t c = 1; c < cols; ++c) g[r * cols + c] += up * probs[r * cols + c];
                         g[r * cols + tgt[r]] -= up;
                       }
                     });
}

Tensor ratio_gate(const Tensor& out, const Tensor& weight, double floor) {
  require_defined(weight, "ratio_gate");
  if (weight.numel() != 1) {
    throw DimensionError("ratio_gate: weight must have one element, got " +
                         shape_string(weight.shape()));
  }
  return ratio_gate(out, weight, weight.item(), floor);
}

Tensor ratio_gate(const Tensor& out, const Tensor& weight, double reference, double floor) {
  require_defined(out, "ratio_gate");
  require_defined(weight, "ratio_gate");
  if (weight.numel() != 1) {
    throw DimensionError("ratio_gate: weight must have one element, got " +
                         shape_string(weight.shape()));
  }
  const double denom = std::max(reference, floor);
  const double factor = weight.item() == reference ? 1.0 : weight.item() / denom;
  std::vector<double> value(out.values().begin(), out.values().end());
  if (factor != 1.0) {
    for (double& v : value) v *= factor;
  }
  return make_result(out.shape(), std::move(value), {&out, &weight}, [denom, factor](Node& self) {
    const auto& x = self.inputs[0]->value;
    if (double* g = input_grad(self, 0)) {
      for (std::size_t i = 0; i < x.size(); ++i) g[i] += self.grad[i] * factor;
    }
    if (double* g = input_grad(self, 1)) {
      double acc = 0.0;
      for (std::size_t i = 0; i < x.size(); ++i) acc += self.grad[i] * x[i];
      g[0] += acc / denom;
    }
  });
}

}  // namespace canet
