#pragma once

// Dense row-major tensors of doubles with a reverse-mode tape.
//
// Every op records a closure on its output node when at least one input
// requires a gradient (and recording is not disabled by NoGradGuard).
// backward() topologically orders the reachable nodes and runs the closures
// in reverse; leaf gradients accumulate across calls until zero_grad().

#include <algorithm>
#include <cmath>
#include <cstring>
#include <cstddef>
#include <functional>
#include <limits>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "vefuse/errors.hpp"

namespace vefuse {

using Shape = std::vector<std::size_t>;

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
  os << ']';
  return os.str();
}

inline std::size_t shape_numel(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

namespace detail {

struct Node {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward;

  void ensure_grad() {
    if (grad.size() != value.size()) grad.assign(value.size(), 0.0);
  }
};

inline thread_local int no_grad_depth = 0;

}  // namespace detail

/// Disables graph recording for the lifetime of the guard (evaluation passes).
class NoGradGuard {
 public:
  NoGradGuard() { ++detail::no_grad_depth; }
  ~NoGradGuard() { --detail::no_grad_depth; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;
};

inline bool grad_recording() { return detail::no_grad_depth == 0; }

class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(Shape shape, double fill = 0.0, bool requires_grad = false)
      : node_(std::make_shared<detail::Node>()) {
    node_->value.assign(shape_numel(shape), fill);
    node_->shape = std::move(shape);
    node_->requires_grad = requires_grad;
  }

  Tensor(Shape shape, std::vector<double> values, bool requires_grad = false)
      : node_(std::make_shared<detail::Node>()) {
    if (shape_numel(shape) != values.size()) {
      throw DimensionError("tensor shape " + shape_str(shape) + " holds " +
                           std::to_string(shape_numel(shape)) + " values, got " +
                           std::to_string(values.size()));
    }
    node_->shape = std::move(shape);
    node_->value = std::move(values);
    node_->requires_grad = requires_grad;
  }

  static Tensor scalar(double v, bool requires_grad = false) {
    return Tensor(Shape{}, std::vector<double>{v}, requires_grad);
  }

  static Tensor matrix(std::size_t rows, std::size_t cols, std::vector<double> values,
                       bool requires_grad = false) {
    return Tensor(Shape{rows, cols}, std::move(values), requires_grad);
  }

  bool defined() const { return static_cast<bool>(node_); }
  const Shape& shape() const { return node_->shape; }
  std::size_t dim() const { return node_->shape.size(); }
  std::size_t size() const { return node_->value.size(); }
  std::size_t rows() const { return node_->shape.at(0); }
  std::size_t cols() const { return node_->shape.at(1); }

  std::span<const double> values() const { return node_->value; }
  std::span<double> mutable_values() { return node_->value; }
  const std::vector<double>& vec() const { return node_->value; }

  double operator[](std::size_t i) const { return node_->value[i]; }
  double at(std::size_t r, std::size_t c) const { return node_->value[r * cols() + c]; }
  double item() const {
    if (size() != 1) throw DimensionError("item() on tensor of shape " + shape_str(shape()));
    return node_->value[0];
  }

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool on) { node_->requires_grad = on; }

  /// Accumulated gradient; empty when nothing has been accumulated yet.
  std::span<const double> grad() const { return node_->grad; }
  std::span<double> mutable_grad() {
    node_->ensure_grad();
    return node_->grad;
  }
  void zero_grad() {
    if (!node_->grad.empty()) std::fill(node_->grad.begin(), node_->grad.end(), 0.0);
  }

  /// Detached copy sharing nothing with this tensor's graph.
  Tensor clone(bool requires_grad = false) const {
    return Tensor(shape(), node_->value, requires_grad);
  }

  const std::shared_ptr<detail::Node>& node() const { return node_; }

  static Tensor from_node(std::shared_ptr<detail::Node> n) {
    Tensor t;
    t.node_ = std::move(n);
    return t;
  }

 private:
  std::shared_ptr<detail::Node> node_;
};

/// Runs reverse-mode accumulation from a scalar root (seed gradient 1).
/// Interior nodes release their closures afterwards; leaves keep their grads.
inline void backward(const Tensor& root) {
  if (root.size() != 1) throw DimensionError("backward() needs a scalar root, got " + shape_str(root.shape()));
  if (!root.requires_grad()) return;

  // Holding shared_ptrs keeps parents alive while interior closures are released.
  std::vector<std::shared_ptr<detail::Node>> order;
  std::unordered_set<detail::Node*> seen;
  std::vector<std::pair<std::shared_ptr<detail::Node>, std::size_t>> stack;
  stack.emplace_back(root.node(), 0);
  seen.insert(root.node().get());
  while (!stack.empty()) {
    auto& top = stack.back();
    if (top.second < top.first->parents.size()) {
      std::shared_ptr<detail::Node> p = top.first->parents[top.second++];
      if (p->requires_grad && !seen.count(p.get())) {
        seen.insert(p.get());
        stack.emplace_back(std::move(p), 0);
      }
    } else {
      order.push_back(std::move(top.first));
      stack.pop_back();
    }
  }

  root.node()->ensure_grad();
  root.node()->grad[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    detail::Node& n = **it;
    if (n.backward) {
      n.ensure_grad();
      n.backward(n);
      n.backward = nullptr;
      n.parents.clear();
    }
  }
}

namespace detail {

inline bool any_requires_grad(std::initializer_list<const Tensor*> ts) {
  if (!grad_recording()) return false;
  for (const Tensor* t : ts)
    if (t->defined() && t->requires_grad()) return true;
  return false;
}

inline Tensor make_result(Shape shape, std::vector<double> value, std::initializer_list<const Tensor*> inputs,
                          std::function<void(Node&)> fn) {
  Tensor out(std::move(shape), std::move(value));
  if (any_requires_grad(inputs)) {
    auto& n = *out.node();
    n.requires_grad = true;
    for (const Tensor* t : inputs) n.parents.push_back(t->node());
    n.backward = std::move(fn);
  }
  return out;
}

inline double* grad_of(Node& parent) {
  if (!parent.requires_grad) return nullptr;
  parent.ensure_grad();
  return parent.grad.data();
}

// Row-major GEMM kernels: C (+)= op(A) * op(B).

// Scalar reference: C[m,n] += A[m,k] * B[k,n] with leading dimensions.
inline void gemm_ref(const double* a, std::size_t lda, const double* b, std::size_t ldb, double* c, std::size_t ldc,
                     std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    double* ci = c + i * ldc;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = a[i * lda + p];
      const double* bp = b + p * ldb;
      for (std::size_t j = 0; j < n; ++j) ci[j] += av * bp[j];
    }
  }
}

#if defined(__GNUC__)
#if defined(__AVX512F__)
inline constexpr int kVecLanes = 8;
#elif defined(__AVX__)
inline constexpr int kVecLanes = 4;
#else
inline constexpr int kVecLanes = 2;
#endif
typedef double vecd __attribute__((vector_size(kVecLanes * sizeof(double))));

// 4 x (NV * lanes) tile of C kept in registers while summing over k.
template <int NV>
inline void gemm_tile(const double* a, std::size_t lda, const double* b, std::size_t ldb, double* c, std::size_t ldc,
                      std::size_t k) {
  vecd acc[4][NV];
  for (int r = 0; r < 4; ++r)
    for (int j = 0; j < NV; ++j) acc[r][j] = vecd{};
  for (std::size_t p = 0; p < k; ++p) {
    vecd bv[NV];
    for (int j = 0; j < NV; ++j) std::memcpy(&bv[j], b + p * ldb + kVecLanes * j, sizeof(vecd));
    for (int r = 0; r < 4; ++r) {
      const double av = a[r * lda + p];
      for (int j = 0; j < NV; ++j) acc[r][j] += av * bv[j];
    }
  }
  for (int r = 0; r < 4; ++r)
    for (int j = 0; j < NV; ++j) {
      vecd cv;
      std::memcpy(&cv, c + r * ldc + kVecLanes * j, sizeof(vecd));
      cv += acc[r][j];
      std::memcpy(c + r * ldc + kVecLanes * j, &cv, sizeof(vecd));
    }
}

// A[m,k] * B[k,n]
inline void gemm_nn(const double* a, const double* b, double* c, std::size_t m, std::size_t k, std::size_t n) {
  constexpr std::size_t wide = 16, narrow = 8;
  std::size_t i = 0;
  for (; i + 4 <= m; i += 4) {
    std::size_t j = 0;
    for (; j + wide <= n; j += wide) gemm_tile<wide / kVecLanes>(a + i * k, k, b + j, n, c + i * n + j, n, k);
    for (; j + narrow <= n; j += narrow) gemm_tile<narrow / kVecLanes>(a + i * k, k, b + j, n, c + i * n + j, n, k);
    if (j < n) gemm_ref(a + i * k, k, b + j, n, c + i * n + j, n, 4, k, n - j);
  }
  if (i < m) gemm_ref(a + i * k, k, b, n, c + i * n, n, m - i, k, n);
}
#else
inline void gemm_nn(const double* a, const double* b, double* c, std::size_t m, std::size_t k, std::size_t n) {
  gemm_ref(a, k, b, n, c, n, m, k, n);
}
#endif

// A[m,k] * B[n,k]^T, through a transposed copy of B.
inline void gemm_nt(const double* a, const double* b, double* c, std::size_t m, std::size_t k, std::size_t n) {
  thread_local std::vector<double> bt;
  bt.resize(k * n);
  for (std::size_t j = 0; j < n; ++j)
    for (std::size_t p = 0; p < k; ++p) bt[p * n + j] = b[j * k + p];
  gemm_nn(a, bt.data(), c, m, k, n);
}

// A[k,m]^T * B[k,n], through a transposed copy of A.
inline void gemm_tn(const double* a, const double* b, double* c, std::size_t m, std::size_t k, std::size_t n) {
  thread_local std::vector<double> at;
  at.resize(m * k);
  for (std::size_t p = 0; p < k; ++p)
    for (std::size_t i = 0; i < m; ++i) at[i * k + p] = a[p * m + i];
  gemm_nn(at.data(), b, c, m, k, n);
}

inline void require_2d(const Tensor& t, const char* op) {
  if (t.dim() != 2) throw DimensionError(std::string(op) + ": expected a matrix, got " + shape_str(t.shape()));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise and structural ops

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  detail::require_2d(a, "matmul");
  detail::require_2d(b, "matmul");
  const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  if (b.rows() != k) {
    throw DimensionError("matmul: inner dimensions differ, " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  }
  std::vector<double> out(m * n, 0.0);
  detail::gemm_nn(a.values().data(), b.values().data(), out.data(), m, k, n);
  return detail::make_result({m, n}, std::move(out), {&a, &b}, [m, k, n](detail::Node& self) {
    auto& an = *self.parents[0];
    auto& bn = *self.parents[1];
    if (double* ga = detail::grad_of(an)) detail::gemm_nt(self.grad.data(), bn.value.data(), ga, m, n, k);
    if (double* gb = detail::grad_of(bn)) detail::gemm_tn(an.value.data(), self.grad.data(), gb, k, m, n);
  });
}

/// x[r,in] * w[in,out] + b[out], fused.
inline Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) {
  detail::require_2d(x, "linear");
  detail::require_2d(w, "linear");
  const std::size_t m = x.rows(), k = x.cols(), n = w.cols();
  if (w.rows() != k || b.size() != n) {
    throw DimensionError("linear: " + shape_str(x.shape()) + " x " + shape_str(w.shape()) + " + " +
                         shape_str(b.shape()));
  }
  std::vector<double> out(m * n);
  for (std::size_t i = 0; i < m; ++i) std::copy(b.values().begin(), b.values().end(), out.begin() + i * n);
  detail::gemm_nn(x.values().data(), w.values().data(), out.data(), m, k, n);
  return detail::make_result({m, n}, std::move(out), {&x, &w, &b}, [m, k, n](detail::Node& self) {
    auto& xn = *self.parents[0];
    auto& wn = *self.parents[1];
    auto& bn = *self.parents[2];
    if (double* gx = detail::grad_of(xn)) detail::gemm_nt(self.grad.data(), wn.value.data(), gx, m, n, k);
    if (double* gw = detail::grad_of(wn)) detail::gemm_tn(xn.value.data(), self.grad.data(), gw, k, m, n);
    if (double* gb = detail::grad_of(bn)) {
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) gb[j] += self.grad[i * n + j];
    }
  });
}

inline Tensor add(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw DimensionError("add: shapes differ, " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] + b[i];
  return detail::make_result(a.shape(), std::move(out), {&a, &b}, [](detail::Node& self) {
    for (int p = 0; p < 2; ++p)
      if (double* g = detail::grad_of(*self.parents[p]))
        for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
  });
}

/// Adds a length-d vector to every row of x[r,d].
inline Tensor add_row(const Tensor& x, const Tensor& row) {
  detail::require_2d(x, "add_row");
  const std::size_t r = x.rows(), d = x.cols();
  if (row.size() != d) {
    throw DimensionError("add_row: " + shape_str(x.shape()) + " + " + shape_str(row.shape()));
  }
  std::vector<double> out(x.vec());
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < d; ++j) out[i * d + j] += row[j];
  return detail::make_result(x.shape(), std::move(out), {&x, &row}, [r, d](detail::Node& self) {
    if (double* gx = detail::grad_of(*self.parents[0]))
      for (std::size_t i = 0; i < r * d; ++i) gx[i] += self.grad[i];
    if (double* gr = detail::grad_of(*self.parents[1]))
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < d; ++j) gr[j] += self.grad[i * d + j];
  });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw DimensionError("mul: shapes differ, " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * b[i];
  return detail::make_result(a.shape(), std::move(out), {&a, &b}, [](detail::Node& self) {
    auto& an = *self.parents[0];
    auto& bn = *self.parents[1];
    if (double* g = detail::grad_of(an))
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i] * bn.value[i];
    if (double* g = detail::grad_of(bn))
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i] * an.value[i];
  });
}

inline Tensor reshape(const Tensor& x, Shape shape) {
  if (shape_numel(shape) != x.size()) {
    throw DimensionError("reshape: " + shape_str(x.shape()) + " to " + shape_str(shape));
  }
  return detail::make_result(std::move(shape), x.vec(), {&x}, [](detail::Node& self) {
    if (double* g = detail::grad_of(*self.parents[0]))
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
  });
}

inline Tensor scale(const Tensor& x, double s) {
  std::vector<double> out(x.vec());
  for (double& v : out) v *= s;
  return detail::make_result(x.shape(), std::move(out), {&x}, [s](detail::Node& self) {
    if (double* g = detail::grad_of(*self.parents[0]))
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += s * self.grad[i];
  });
}

/// Tanh-approximated GELU.
inline Tensor gelu(const Tensor& x) {
  constexpr double c = 0.7978845608028654;  // sqrt(2/pi)
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double v = x[i];
    out[i] = 0.5 * v * (1.0 + std::tanh(c * (v + 0.044715 * v * v * v)));
  }
  return detail::make_result(x.shape(), std::move(out), {&x}, [](detail::Node& self) {
    auto& xn = *self.parents[0];
    if (double* g = detail::grad_of(xn)) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) {
        const double v = xn.value[i];
        const double u = c * (v + 0.044715 * v * v * v);
        const double th = std::tanh(u);
        const double du = c * (1.0 + 3.0 * 0.044715 * v * v);
        g[i] += self.grad[i] * (0.5 * (1.0 + th) + 0.5 * v * (1.0 - th * th) * du);
      }
    }
  });
}

inline Tensor tanh(const Tensor& x) {
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::tanh(x[i]);
  return detail::make_result(x.shape(), std::move(out), {&x}, [](detail::Node& self) {
    if (double* g = detail::grad_of(*self.parents[0]))
      for (std::size_t i = 0; i < self.grad.size(); ++i)
        g[i] += self.grad[i] * (1.0 - self.value[i] * self.value[i]);
  });
}

/// Stacks 2-D tensors with equal column counts along the row axis.
inline Tensor concat_rows(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw DimensionError("concat_rows: no inputs");
  const std::size_t d = parts.front().cols();
  std::size_t total = 0;
  for (const auto& p : parts) {
    detail::require_2d(p, "concat_rows");
    if (p.cols() != d) {
      throw DimensionError("concat_rows: column mismatch " + shape_str(parts.front().shape()) + " vs " +
                           shape_str(p.shape()));
    }
    total += p.rows();
  }
  std::vector<double> out;
  out.reserve(total * d);
  bool track = false;
  for (const auto& p : parts) {
    out.insert(out.end(), p.values().begin(), p.values().end());
    track = track || (grad_recording() && p.requires_grad());
  }
  Tensor result(Shape{total, d}, std::move(out));
  if (track) {
    auto& n = *result.node();
    n.requires_grad = true;
    for (const auto& p : parts) n.parents.push_back(p.node());
    n.backward = [](detail::Node& self) {
      std::size_t off = 0;
      for (auto& p : self.parents) {
        const std::size_t cnt = p->value.size();
        if (double* g = detail::grad_of(*p))
          for (std::size_t i = 0; i < cnt; ++i) g[i] += self.grad[off + i];
        off += cnt;
      }
    };
  }
  return result;
}

/// Rows [begin, end) of a matrix.
inline Tensor slice_rows(const Tensor& x, std::size_t begin, std::size_t end) {
  detail::require_2d(x, "slice_rows");
  if (begin > end || end > x.rows()) {
    throw DimensionError("slice_rows: [" + std::to_string(begin) + "," + std::to_string(end) + ") of " +
                         shape_str(x.shape()));
  }
  const std::size_t d = x.cols();
  std::vector<double> out(x.values().begin() + static_cast<std::ptrdiff_t>(begin * d),
                          x.values().begin() + static_cast<std::ptrdiff_t>(end * d));
  return detail::make_result({end - begin, d}, std::move(out), {&x}, [begin, d](detail::Node& self) {
    if (double* g = detail::grad_of(*self.parents[0]))
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[begin * d + i] += self.grad[i];
  });
}

/// Gathers rows of table[V,d] by id.
inline Tensor embedding(const Tensor& table, const std::vector<int>& ids) {
  detail::require_2d(table, "embedding");
  const std::size_t vocab = table.rows(), d = table.cols();
  std::vector<double> out(ids.size() * d);
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= vocab) {
      throw DataError("embedding: id " + std::to_string(ids[i]) + " outside table of " + std::to_string(vocab));
    }
    std::copy_n(table.values().begin() + static_cast<std::ptrdiff_t>(ids[i] * d), d, out.begin() + i * d);
  }
  return detail::make_result({ids.size(), d}, std::move(out), {&table}, [ids, d](detail::Node& self) {
    if (double* g = detail::grad_of(*self.parents[0]))
      for (std::size_t i = 0; i < ids.size(); ++i)
        for (std::size_t j = 0; j < d; ++j) g[static_cast<std::size_t>(ids[i]) * d + j] += self.grad[i * d + j];
  });
}

/// Inverted dropout with an explicit keep mask (1 keeps, 0 drops).
inline Tensor dropout_mask(const Tensor& x, const std::vector<char>& keep, double p) {
  if (keep.size() != x.size()) throw DimensionError("dropout: mask size differs from " + shape_str(x.shape()));
  const double s = p < 1.0 ? 1.0 / (1.0 - p) : 0.0;
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = keep[i] ? x[i] * s : 0.0;
  return detail::make_result(x.shape(), std::move(out), {&x}, [keep, s](detail::Node& self) {
    if (double* g = detail::grad_of(*self.parents[0]))
      for (std::size_t i = 0; i < self.grad.size(); ++i)
        if (keep[i]) g[i] += s * self.grad[i];
  });
}

inline Tensor sum(const Tensor& x) {
  double s = 0.0;
  for (double v : x.values()) s += v;
  return detail::make_result({}, {s}, {&x}, [](detail::Node& self) {
    if (double* g = detail::grad_of(*self.parents[0]))
      for (std::size_t i = 0; i < self.parents[0]->value.size(); ++i) g[i] += self.grad[0];
  });
}

// ---------------------------------------------------------------------------
// Normalization and probabilities

/// Softmax along `axis`, stabilized by max subtraction.
inline Tensor softmax(const Tensor& x, std::size_t axis) {
  const Shape& s = x.shape();
  if (axis >= s.size()) throw DimensionError("softmax: axis " + std::to_string(axis) + " of " + shape_str(s));
  const std::size_t n = s[axis];
  if (n == 0) throw DimensionError("softmax: empty axis in " + shape_str(s));
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= s[i];
  for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];

  std::vector<double> out(x.size());
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t in = 0; in < inner; ++in) {
      const std::size_t base = o * n * inner + in;
      double mx = x[base];
      for (std::size_t k = 1; k < n; ++k) mx = std::max(mx, x[base + k * inner]);
      double z = 0.0;
      for (std::size_t k = 0; k < n; ++k) {
        const double e = std::exp(x[base + k * inner] - mx);
        out[base + k * inner] = e;
        z += e;
      }
      for (std::size_t k = 0; k < n; ++k) out[base + k * inner] /= z;
    }
  }
  return detail::make_result(s, std::move(out), {&x}, [outer, inner, n](detail::Node& self) {
    double* g = detail::grad_of(*self.parents[0]);
    if (!g) return;
    for (std::size_t o = 0; o < outer; ++o) {
      for (std::size_t in = 0; in < inner; ++in) {
        const std::size_t base = o * n * inner + in;
        double dot = 0.0;
        for (std::size_t k = 0; k < n; ++k) dot += self.grad[base + k * inner] * self.value[base + k * inner];
        for (std::size_t k = 0; k < n; ++k) {
          const std::size_t idx = base + k * inner;
          g[idx] += self.value[idx] * (self.grad[idx] - dot);
        }
      }
    }
  });
}

inline constexpr double kLayerNormEpsilon = 1e-5;

/// Normalizes each length-d slice of the last axis, then applies gain and bias.
inline Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double epsilon = kLayerNormEpsilon) {
  if (x.dim() == 0) throw DimensionError("layer_norm: scalar input");
  const std::size_t d = x.shape().back();
  if (d < 2) throw DimensionError("layer_norm: normalized axis needs at least 2 entries, got " + shape_str(x.shape()));
  if (gain.size() != d || bias.size() != d) {
    throw DimensionError("layer_norm: gain/bias " + shape_str(gain.shape()) + "/" + shape_str(bias.shape()) +
                         " for " + shape_str(x.shape()));
  }
  const std::size_t rows = x.size() / d;
  std::vector<double> out(x.size()), xhat(x.size()), inv_std(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xr = x.values().data() + r * d;
    double mean = 0.0;
    for (std::size_t j = 0; j < d; ++j) mean += xr[j];
    mean /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t j = 0; j < d; ++j) var += (xr[j] - mean) * (xr[j] - mean);
    var /= static_cast<double>(d);
    const double is = var + epsilon > 0.0 ? 1.0 / std::sqrt(var + epsilon) : 0.0;
    inv_std[r] = is;
    for (std::size_t j = 0; j < d; ++j) {
      const double h = (xr[j] - mean) * is;
      xhat[r * d + j] = h;
      out[r * d + j] = h * gain[j] + bias[j];
    }
  }
  return detail::make_result(
      x.shape(), std::move(out), {&x, &gain, &bias},
      [rows, d, xhat = std::move(xhat), inv_std = std::move(inv_std)](detail::Node& self) {
        auto& gn = *self.parents[1];
        double* gx = detail::grad_of(*self.parents[0]);
        double* gg = detail::grad_of(gn);
        double* gb = detail::grad_of(*self.parents[2]);
        std::vector<double> dh(d);
        for (std::size_t r = 0; r < rows; ++r) {
          const double* dy = self.grad.data() + r * d;
          const double* h = xhat.data() + r * d;
          double mean_dh = 0.0, mean_dh_h = 0.0;
          for (std::size_t j = 0; j < d; ++j) {
            if (gg) gg[j] += dy[j] * h[j];
            if (gb) gb[j] += dy[j];
            dh[j] = dy[j] * gn.value[j];
            mean_dh += dh[j];
            mean_dh_h += dh[j] * h[j];
          }
          if (!gx) continue;
          mean_dh /= static_cast<double>(d);
          mean_dh_h /= static_cast<double>(d);
          for (std::size_t j = 0; j < d; ++j) gx[r * d + j] += inv_std[r] * (dh[j] - mean_dh - h[j] * mean_dh_h);
        }
      });
}

/// Mean negative log-likelihood of integer targets under row-wise softmax.
inline Tensor cross_entropy(const Tensor& logits, const std::vector<int>& targets) {
  detail::require_2d(logits, "cross_entropy");
  const std::size_t b = logits.rows(), c = logits.cols();
  if (targets.size() != b) {
    throw DimensionError("cross_entropy: " + std::to_string(targets.size()) + " targets for logits " +
                         shape_str(logits.shape()));
  }
  std::vector<double> probs(b * c);
  double loss = 0.0;
  for (std::size_t i = 0; i < b; ++i) {
    if (targets[i] < 0 || static_cast<std::size_t>(targets[i]) >= c) {
      throw DataError("cross_entropy: target " + std::to_string(targets[i]) + " outside [0," + std::to_string(c) +
                      ")");
    }
    const double* row = logits.values().data() + i * c;
    double mx = row[0];
    for (std::size_t j = 1; j < c; ++j) mx = std::max(mx, row[j]);
    double z = 0.0;
    for (std::size_t j = 0; j < c; ++j) z += std::exp(row[j] - mx);
    const double log_z = mx + std::log(z);
    for (std::size_t j = 0; j < c; ++j) probs[i * c + j] = std::exp(row[j] - log_z);
    loss += log_z - row[targets[i]];
  }
  loss /= static_cast<double>(b);
  return detail::make_result({}, {loss}, {&logits},
                             [b, c, targets, probs = std::move(probs)](detail::Node& self) {
                               double* g = detail::grad_of(*self.parents[0]);
                               if (!g) return;
                               const double s = self.grad[0] / static_cast<double>(b);
                               for (std::size_t i = 0; i < b; ++i)
                                 for (std::size_t j = 0; j < c; ++j)
                                   g[i * c + j] += s * (probs[i * c + j] - (static_cast<int>(j) == targets[i]));
                             });
}

// ---------------------------------------------------------------------------
// Attention

struct AttentionParams {
  Tensor wq, wk, wv, wo;  // [d,d]
  Tensor bq, bk, bv, bo;  // [d]
};

struct AttentionOutput {
  Tensor output;   // [L,d]
  Tensor weights;  // [H,L,L], post-softmax, detached
};

/// Multi-head scaled dot-product self-attention over x[L,d].
///
/// Heads split the model dimension into contiguous blocks of d/H columns.
/// The returned weight tensor is a detached copy suitable for analysis.
inline AttentionOutput multi_head_attention(const Tensor& x, std::size_t num_heads, const AttentionParams& p) {
  detail::require_2d(x, "multi_head_attention");
  const std::size_t len = x.rows(), d = x.cols();
  if (num_heads == 0 || d % num_heads != 0) {
    throw ConfigurationError("multi_head_attention: model dim " + std::to_string(d) + " not divisible by " +
                             std::to_string(num_heads) + " heads");
  }
  for (const Tensor* w : {&p.wq, &p.wk, &p.wv, &p.wo})
    if (w->shape() != Shape{d, d}) throw DimensionError("multi_head_attention: weight " + shape_str(w->shape()));
  for (const Tensor* b : {&p.bq, &p.bk, &p.bv, &p.bo})
    if (b->size() != d) throw DimensionError("multi_head_attention: bias " + shape_str(b->shape()));

  const std::size_t hd = d / num_heads;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(hd));
  const double* xv = x.values().data();

  auto project = [&](const Tensor& w, const Tensor& b) {
    std::vector<double> out(len * d);
    for (std::size_t i = 0; i < len; ++i) std::copy(b.values().begin(), b.values().end(), out.begin() + i * d);
    detail::gemm_nn(xv, w.values().data(), out.data(), len, d, d);
    return out;
  };
  // Per-head contiguous [H][L][hd] copies of the projections.
  auto split = [&](const std::vector<double>& y) {
    std::vector<double> out(len * d);
    for (std::size_t h = 0; h < num_heads; ++h)
      for (std::size_t i = 0; i < len; ++i)
        std::copy_n(y.data() + i * d + h * hd, hd, out.data() + (h * len + i) * hd);
    return out;
  };
  const std::vector<double> q = split(project(p.wq, p.bq)), k = split(project(p.wk, p.bk)),
                            v = split(project(p.wv, p.bv));

  std::vector<double> attn(num_heads * len * len, 0.0);
  std::vector<double> ctx(len * d, 0.0);
  std::vector<double> ch(len * hd);
  for (std::size_t h = 0; h < num_heads; ++h) {
    double* a = attn.data() + h * len * len;
    const double* qh = q.data() + h * len * hd;
    detail::gemm_nt(qh, k.data() + h * len * hd, a, len, hd, len);
    for (std::size_t i = 0; i < len; ++i) {
      double* row = a + i * len;
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t j = 0; j < len; ++j) {
        row[j] *= inv_sqrt;
        mx = std::max(mx, row[j]);
      }
      double z = 0.0;
      for (std::size_t j = 0; j < len; ++j) {
        row[j] = std::exp(row[j] - mx);
        z += row[j];
      }
      for (std::size_t j = 0; j < len; ++j) row[j] /= z;
    }
    std::fill(ch.begin(), ch.end(), 0.0);
    detail::gemm_nn(a, v.data() + h * len * hd, ch.data(), len, len, hd);
    for (std::size_t i = 0; i < len; ++i) std::copy_n(ch.data() + i * hd, hd, ctx.data() + i * d + h * hd);
  }

  std::vector<double> out(len * d);
  for (std::size_t i = 0; i < len; ++i) std::copy(p.bo.values().begin(), p.bo.values().end(), out.begin() + i * d);
  detail::gemm_nn(ctx.data(), p.wo.values().data(), out.data(), len, d, d);

  Tensor weights(Shape{num_heads, len, len}, attn);
  Tensor output = detail::make_result(
      {len, d}, std::move(out), {&x, &p.wq, &p.wk, &p.wv, &p.wo, &p.bq, &p.bk, &p.bv, &p.bo},
      [len, d, num_heads, hd, inv_sqrt, q, k, v, attn = std::move(attn), ctx = std::move(ctx)](detail::Node& self) {
        auto& xn = *self.parents[0];
        auto& wq = *self.parents[1];
        auto& wk = *self.parents[2];
        auto& wv = *self.parents[3];
        auto& wo = *self.parents[4];
        const double* dout = self.grad.data();

        if (double* g = detail::grad_of(wo)) detail::gemm_tn(ctx.data(), dout, g, d, len, d);
        if (double* g = detail::grad_of(*self.parents[8]))
          for (std::size_t i = 0; i < len; ++i)
            for (std::size_t j = 0; j < d; ++j) g[j] += dout[i * d + j];

        std::vector<double> dctx(len * d, 0.0);
        detail::gemm_nt(dout, wo.value.data(), dctx.data(), len, d, d);

        // Gradients w.r.t. the merged [L,d] projections.
        std::vector<double> dq(len * d, 0.0), dk(len * d, 0.0), dv(len * d, 0.0);
        std::vector<double> dch(len * hd), da(len * len), dqh(len * hd), dkh(len * hd), dvh(len * hd);
        for (std::size_t h = 0; h < num_heads; ++h) {
          const double* a = attn.data() + h * len * len;
          const double* qh = q.data() + h * len * hd;
          const double* kh = k.data() + h * len * hd;
          const double* vh = v.data() + h * len * hd;
          for (std::size_t i = 0; i < len; ++i) std::copy_n(dctx.data() + i * d + h * hd, hd, dch.data() + i * hd);

          std::fill(dvh.begin(), dvh.end(), 0.0);
          detail::gemm_tn(a, dch.data(), dvh.data(), len, len, hd);
          std::fill(da.begin(), da.end(), 0.0);
          detail::gemm_nt(dch.data(), vh, da.data(), len, hd, len);
          for (std::size_t i = 0; i < len; ++i) {
            const double* row = a + i * len;
            double* dr = da.data() + i * len;
            double dot = 0.0;
            for (std::size_t j = 0; j < len; ++j) dot += dr[j] * row[j];
            for (std::size_t j = 0; j < len; ++j) dr[j] = row[j] * (dr[j] - dot) * inv_sqrt;
          }
          std::fill(dqh.begin(), dqh.end(), 0.0);
          detail::gemm_nn(da.data(), kh, dqh.data(), len, len, hd);
          std::fill(dkh.begin(), dkh.end(), 0.0);
          detail::gemm_tn(da.data(), qh, dkh.data(), len, len, hd);
          for (std::size_t i = 0; i < len; ++i) {
            std::copy_n(dqh.data() + i * hd, hd, dq.data() + i * d + h * hd);
            std::copy_n(dkh.data() + i * hd, hd, dk.data() + i * d + h * hd);
            std::copy_n(dvh.data() + i * hd, hd, dv.data() + i * d + h * hd);
          }
        }

        const double* xv = xn.value.data();
        std::pair<const std::vector<double>*, std::pair<detail::Node*, detail::Node*>> proj[] = {
            {&dq, {&wq, self.parents[5].get()}},
            {&dk, {&wk, self.parents[6].get()}},
            {&dv, {&wv, self.parents[7].get()}}};
        double* gx = detail::grad_of(xn);
        for (auto& [dy, wb] : proj) {
          if (double* g = detail::grad_of(*wb.first)) detail::gemm_tn(xv, dy->data(), g, d, len, d);
          if (double* g = detail::grad_of(*wb.second))
            for (std::size_t i = 0; i < len; ++i)
              for (std::size_t j = 0; j < d; ++j) g[j] += (*dy)[i * d + j];
          if (gx) detail::gemm_nt(dy->data(), wb.first->value.data(), gx, len, d, d);
        }
      });
  return {std::move(output), std::move(weights)};
}

inline bool all_finite(std::span<const double> v) {
  for (double x : v)
    if (!std::isfinite(x)) return false;
  return true;
}

}  // namespace vefuse
