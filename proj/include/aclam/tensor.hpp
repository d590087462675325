#pragma once

// Dense row-major tensors with tape-based reverse-mode differentiation.
//
// A Tensor is a shared handle: copies alias the same storage, so a parameter
// captured by a Graph receives gradient in place. A Graph records every
// operation executed through it and replays the record backwards exactly once.
//
// Broadcasting is limited to one pattern: in binary elementwise ops the second
// operand may drop the leading (batch) extent of the first. concat joins parts
// along the last axis; all other extents must agree.
//
// Reductions and matrix products accumulate in a fixed left-to-right order,
// so results are bit-reproducible for a given input.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace aclam::ad {

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& shape) {
  std::size_t n = 1;
  for (std::size_t e : shape) {
    n *= e;
  }
  return n;
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    os << (i ? "x" : "") << shape[i];
  }
  os << ']';
  return os.str();
}

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class GraphError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

template <typename T>
class Graph;

template <typename T>
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    for (std::size_t e : shape) {
      if (e == 0) {
        throw ShapeError("tensor extents must be positive, got " + shape_str(shape));
      }
    }
    Tensor t;
    t.impl_ = std::make_shared<Impl>();
    t.impl_->data.assign(numel(shape), T(0));
    t.impl_->shape = std::move(shape);
    t.impl_->requires_grad = requires_grad;
    return t;
  }

  static Tensor from(Shape shape, std::vector<T> data, bool requires_grad = false) {
    if (numel(shape) != data.size()) {
      throw ShapeError("data length " + std::to_string(data.size()) + " does not match shape " +
                       shape_str(shape));
    }
    Tensor t = zeros(std::move(shape), requires_grad);
    t.impl_->data = std::move(data);
    return t;
  }

  static Tensor scalar(T v) { return from({1}, {v}); }

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const { return impl_->shape; }
  std::size_t rank() const { return impl_->shape.size(); }
  std::size_t size() const { return impl_->data.size(); }
  std::size_t dim(std::size_t axis) const { return impl_->shape.at(axis); }

  std::span<const T> data() const { return impl_->data; }
  /// Direct write access. Only leaves (parameters, inputs) should be mutated.
  std::span<T> mutable_data() { return impl_->data; }
  T item() const {
    if (size() != 1) {
      throw ShapeError("item() on tensor of shape " + shape_str(shape()));
    }
    return impl_->data[0];
  }
  T operator[](std::size_t i) const { return impl_->data[i]; }

  bool requires_grad() const { return impl_->requires_grad; }
  void set_requires_grad(bool on) { impl_->requires_grad = on; }

  bool has_grad() const { return !impl_->grad.empty(); }
  std::span<const T> grad() const { return impl_->grad; }
  // Handles share storage, so gradient accumulation is allowed through const handles.
  std::span<T> mutable_grad() const {
    ensure_grad();
    return impl_->grad;
  }
  void zero_grad() { impl_->grad.clear(); }

  /// Gradient as a dense vector; zeros when no gradient reached this tensor.
  std::vector<T> grad_or_zeros() const {
    if (has_grad()) {
      return impl_->grad;
    }
    return std::vector<T>(size(), T(0));
  }

  /// Independent storage with the same values, not attached to any graph.
  Tensor clone() const { return from(shape(), impl_->data, impl_->requires_grad); }

  bool same_storage(const Tensor& other) const { return impl_ == other.impl_; }

 private:
  friend class Graph<T>;

  struct Impl {
    Shape shape;
    std::vector<T> data;
    std::vector<T> grad;
    bool requires_grad = false;
    const Graph<T>* producer = nullptr;
  };

  void ensure_grad() const {
    if (impl_->grad.empty()) {
      impl_->grad.assign(impl_->data.size(), T(0));
    }
  }

  std::shared_ptr<Impl> impl_;
};

// c[m x n] += a[m x k] * b[k x n], i-k-j order.
template <typename T>
void gemm_acc(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    T* crow = c + i * n;
    const T* arow = a + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const T av = arow[p];
      const T* brow = b + p * n;
      for (std::size_t j = 0; j < n; ++j) {
        crow[j] += av * brow[j];
      }
    }
  }
}

// c[k x n] += a^T * g where a is [m x k], g is [m x n].
template <typename T>
void gemm_tn_acc(const T* a, const T* g, T* c, std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const T* arow = a + i * k;
    const T* grow = g + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const T av = arow[p];
      T* crow = c + p * n;
      for (std::size_t j = 0; j < n; ++j) {
        crow[j] += av * grow[j];
      }
    }
  }
}

template <typename T>
std::vector<T> transpose(std::span<const T> x, std::size_t rows, std::size_t cols) {
  std::vector<T> out(x.size());
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < cols; ++c) {
      out[c * rows + r] = x[r * cols + c];
    }
  }
  return out;
}

enum class Elementwise { kAdd, kSub, kMul };
enum class Activation { kTanh, kRelu, kSigmoid };
enum class Reduction { kSum, kMean };

template <typename T>
class Graph {
 public:
  /// With `record == false` operations are evaluated without building a tape
  /// (inference mode); backward() is then an error.
  explicit Graph(bool record = true) : record_(record) {}
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  std::size_t tape_length() const { return tape_.size(); }

  Tensor<T> elementwise(Elementwise kind, const Tensor<T>& a, const Tensor<T>& b) {
    const bool broadcast = check_broadcast(a, b);
    Tensor<T> out = Tensor<T>::zeros(a.shape());
    const auto av = a.data();
    const auto bv = b.data();
    auto ov = out.mutable_data();
    const std::size_t inner = b.size();
    for (std::size_t i = 0; i < ov.size(); ++i) {
      const T x = av[i];
      const T y = bv[broadcast ? i % inner : i];
      switch (kind) {
        case Elementwise::kAdd: ov[i] = x + y; break;
        case Elementwise::kSub: ov[i] = x - y; break;
        case Elementwise::kMul: ov[i] = x * y; break;
      }
    }
    record({a, b}, out, [kind, broadcast, a, b, out]() mutable {
      const auto g = out.grad();
      const std::size_t inner = b.size();
      if (a.requires_grad()) {
        auto ga = a.mutable_grad();
        const auto bv = b.data();
        for (std::size_t i = 0; i < g.size(); ++i) {
          ga[i] += kind == Elementwise::kMul ? g[i] * bv[broadcast ? i % inner : i] : g[i];
        }
      }
      if (b.requires_grad()) {
        auto gb = b.mutable_grad();
        const auto av = a.data();
        for (std::size_t i = 0; i < g.size(); ++i) {
          T d = g[i];
          if (kind == Elementwise::kSub) {
            d = -d;
          } else if (kind == Elementwise::kMul) {
            d = d * av[i];
          }
          gb[broadcast ? i % inner : i] += d;
        }
      }
    });
    return out;
  }

  Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) { return elementwise(Elementwise::kAdd, a, b); }
  Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) { return elementwise(Elementwise::kSub, a, b); }
  Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) { return elementwise(Elementwise::kMul, a, b); }

  /// x * c for a constant c.
  Tensor<T> scale(const Tensor<T>& x, T c) {
    Tensor<T> out = Tensor<T>::zeros(x.shape());
    const auto xv = x.data();
    auto ov = out.mutable_data();
    for (std::size_t i = 0; i < ov.size(); ++i) {
      ov[i] = xv[i] * c;
    }
    record({x}, out, [x, out, c]() mutable {
      if (!x.requires_grad()) {
        return;
      }
      const auto g = out.grad();
      auto gx = x.mutable_grad();
      for (std::size_t i = 0; i < g.size(); ++i) {
        gx[i] += g[i] * c;
      }
    });
    return out;
  }

  Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.rank() != 2 || b.rank() != 2) {
      throw ShapeError("matmul expects 2-D operands, got " + shape_str(a.shape()) + " and " +
                       shape_str(b.shape()));
    }
    const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
    if (b.dim(0) != k) {
      throw ShapeError("matmul inner dimension mismatch: " + shape_str(a.shape()) + " * " +
                       shape_str(b.shape()));
    }
    Tensor<T> out = Tensor<T>::zeros({m, n});
    gemm_acc(a.data().data(), b.data().data(), out.mutable_data().data(), m, k, n);
    record({a, b}, out, [a, b, out, m, k, n]() mutable {
      const auto g = out.grad();
      if (a.requires_grad()) {
        const std::vector<T> bt = transpose(b.data(), k, n);
        gemm_acc(g.data(), bt.data(), a.mutable_grad().data(), m, n, k);
      }
      if (b.requires_grad()) {
        gemm_tn_acc(a.data().data(), g.data(), b.mutable_grad().data(), m, k, n);
      }
    });
    return out;
  }

  Tensor<T> activation(Activation kind, const Tensor<T>& x) {
    Tensor<T> out = Tensor<T>::zeros(x.shape());
    const auto xv = x.data();
    auto ov = out.mutable_data();
    for (std::size_t i = 0; i < ov.size(); ++i) {
      switch (kind) {
        case Activation::kTanh: ov[i] = std::tanh(xv[i]); break;
        case Activation::kRelu: ov[i] = xv[i] > T(0) ? xv[i] : T(0); break;
        case Activation::kSigmoid: ov[i] = sigmoid(xv[i]); break;
      }
    }
    record({x}, out, [kind, x, out]() mutable {
      if (!x.requires_grad()) {
        return;
      }
      const auto g = out.grad();
      const auto xv = x.data();
      const auto yv = out.data();
      auto gx = x.mutable_grad();
      for (std::size_t i = 0; i < g.size(); ++i) {
        switch (kind) {
          case Activation::kTanh: gx[i] += g[i] * (T(1) - yv[i] * yv[i]); break;
          case Activation::kRelu: gx[i] += xv[i] > T(0) ? g[i] : T(0); break;
          case Activation::kSigmoid: gx[i] += g[i] * yv[i] * (T(1) - yv[i]); break;
        }
      }
    });
    return out;
  }

  Tensor<T> tanh(const Tensor<T>& x) { return activation(Activation::kTanh, x); }
  Tensor<T> relu(const Tensor<T>& x) { return activation(Activation::kRelu, x); }
  Tensor<T> sigmoid(const Tensor<T>& x) { return activation(Activation::kSigmoid, x); }

  Tensor<T> reduce(Reduction kind, const Tensor<T>& x) {
    if (!x.defined() || x.size() == 0) {
      throw ShapeError("reduce over an empty tensor");
    }
    T acc = T(0);
    for (T v : x.data()) {
      acc += v;
    }
    const T n = static_cast<T>(x.size());
    if (kind == Reduction::kMean) {
      acc /= n;
    }
    Tensor<T> out = Tensor<T>::scalar(acc);
    record({x}, out, [kind, x, out, n]() mutable {
      if (!x.requires_grad()) {
        return;
      }
      const T g = kind == Reduction::kMean ? out.grad()[0] / n : out.grad()[0];
      for (T& gx : x.mutable_grad()) {
        gx += g;
      }
    });
    return out;
  }

  Tensor<T> sum(const Tensor<T>& x) { return reduce(Reduction::kSum, x); }
  Tensor<T> mean(const Tensor<T>& x) { return reduce(Reduction::kMean, x); }

  /// Mean over all elements of (a - b)^2.
  Tensor<T> mse(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.shape() != b.shape()) {
      throw ShapeError("mse shape mismatch: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    }
    const auto av = a.data();
    const auto bv = b.data();
    T acc = T(0);
    for (std::size_t i = 0; i < av.size(); ++i) {
      const T d = av[i] - bv[i];
      acc += d * d;
    }
    const T n = static_cast<T>(av.size());
    Tensor<T> out = Tensor<T>::scalar(acc / n);
    record({a, b}, out, [a, b, out, n]() mutable {
      const T g = out.grad()[0] * T(2) / n;
      const auto av = a.data();
      const auto bv = b.data();
      if (a.requires_grad()) {
        auto ga = a.mutable_grad();
        for (std::size_t i = 0; i < ga.size(); ++i) {
          ga[i] += g * (av[i] - bv[i]);
        }
      }
      if (b.requires_grad()) {
        auto gb = b.mutable_grad();
        for (std::size_t i = 0; i < gb.size(); ++i) {
          gb[i] -= g * (av[i] - bv[i]);
        }
      }
    });
    return out;
  }

  /// Joins parts along the last axis.
  Tensor<T> concat(const std::vector<Tensor<T>>& parts) {
    if (parts.empty()) {
      throw ShapeError("concat of zero parts");
    }
    const Shape& first = parts.front().shape();
    const std::size_t outer = numel(first) / first.back();
    std::vector<std::size_t> widths;
    std::size_t total = 0;
    for (const auto& p : parts) {
      const Shape& s = p.shape();
      if (s.size() != first.size() || !std::equal(s.begin(), s.end() - 1, first.begin())) {
        throw ShapeError("concat parts disagree on leading extents: " + shape_str(first) + " vs " +
                         shape_str(s));
      }
      widths.push_back(s.back());
      total += s.back();
    }
    Shape out_shape = first;
    out_shape.back() = total;
    Tensor<T> out = Tensor<T>::zeros(out_shape);
    auto ov = out.mutable_data();
    std::size_t offset = 0;
    for (std::size_t p = 0; p < parts.size(); ++p) {
      const auto pv = parts[p].data();
      for (std::size_t r = 0; r < outer; ++r) {
        std::copy_n(pv.begin() + r * widths[p], widths[p], ov.begin() + r * total + offset);
      }
      offset += widths[p];
    }
    record(parts, out, [parts, widths, out, outer, total]() mutable {
      const auto g = out.grad();
      std::size_t offset = 0;
      for (std::size_t p = 0; p < parts.size(); ++p) {
        if (parts[p].requires_grad()) {
          auto gp = parts[p].mutable_grad();
          for (std::size_t r = 0; r < outer; ++r) {
            for (std::size_t c = 0; c < widths[p]; ++c) {
              gp[r * widths[p] + c] += g[r * total + offset + c];
            }
          }
        }
        offset += widths[p];
      }
    });
    return out;
  }

  /// Columns [begin, end) of a 2-D tensor.
  Tensor<T> slice_cols(const Tensor<T>& x, std::size_t begin, std::size_t end) {
    if (x.rank() != 2 || begin >= end || end > x.dim(1)) {
      throw ShapeError("slice_cols [" + std::to_string(begin) + "," + std::to_string(end) +
                       ") out of range for " + shape_str(x.shape()));
    }
    const std::size_t rows = x.dim(0), cols = x.dim(1), width = end - begin;
    Tensor<T> out = Tensor<T>::zeros({rows, width});
    const auto xv = x.data();
    auto ov = out.mutable_data();
    for (std::size_t r = 0; r < rows; ++r) {
      std::copy_n(xv.begin() + r * cols + begin, width, ov.begin() + r * width);
    }
    record({x}, out, [x, out, rows, cols, begin, width]() mutable {
      if (!x.requires_grad()) {
        return;
      }
      const auto g = out.grad();
      auto gx = x.mutable_grad();
      for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t c = 0; c < width; ++c) {
          gx[r * cols + begin + c] += g[r * width + c];
        }
      }
    });
    return out;
  }

  /// Same data under a new shape with an equal element count.
  Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
    if (numel(shape) != x.size()) {
      throw ShapeError("reshape " + shape_str(x.shape()) + " to " + shape_str(shape));
    }
    Tensor<T> out = Tensor<T>::from(std::move(shape), std::vector<T>(x.data().begin(), x.data().end()));
    record({x}, out, [x, out]() mutable {
      if (!x.requires_grad()) {
        return;
      }
      const auto g = out.grad();
      auto gx = x.mutable_grad();
      for (std::size_t i = 0; i < g.size(); ++i) {
        gx[i] += g[i];
      }
    });
    return out;
  }

  /// Rows of a 2-D table selected by index; gradient scatters back to those rows.
  Tensor<T> gather_rows(const Tensor<T>& table, const std::vector<std::size_t>& rows) {
    if (table.rank() != 2 || rows.empty()) {
      throw ShapeError("gather_rows expects a 2-D table and at least one index");
    }
    const std::size_t width = table.dim(1);
    Tensor<T> out = Tensor<T>::zeros({rows.size(), width});
    const auto tv = table.data();
    auto ov = out.mutable_data();
    for (std::size_t r = 0; r < rows.size(); ++r) {
      if (rows[r] >= table.dim(0)) {
        throw ShapeError("gather_rows index " + std::to_string(rows[r]) + " out of range");
      }
      std::copy_n(tv.begin() + rows[r] * width, width, ov.begin() + r * width);
    }
    record({table}, out, [table, rows, out, width]() mutable {
      if (!table.requires_grad()) {
        return;
      }
      const auto g = out.grad();
      auto gt = table.mutable_grad();
      for (std::size_t r = 0; r < rows.size(); ++r) {
        for (std::size_t c = 0; c < width; ++c) {
          gt[rows[r] * width + c] += g[r * width + c];
        }
      }
    });
    return out;
  }

  /// Identity forward; no gradient flows back to x.
  Tensor<T> stop_gradient(const Tensor<T>& x) {
    Tensor<T> out = Tensor<T>::from(x.shape(), std::vector<T>(x.data().begin(), x.data().end()));
    out.impl_->producer = this;
    return out;
  }

  /// Forward value taken from `value`; backward passes the gradient to `x`
  /// unchanged. `value` receives nothing.
  Tensor<T> straight_through(const Tensor<T>& x, const Tensor<T>& value) {
    if (x.shape() != value.shape()) {
      throw ShapeError("straight_through shape mismatch: " + shape_str(x.shape()) + " vs " +
                       shape_str(value.shape()));
    }
    Tensor<T> out =
        Tensor<T>::from(value.shape(), std::vector<T>(value.data().begin(), value.data().end()));
    record({x}, out, [x, out]() mutable {
      if (!x.requires_grad()) {
        return;
      }
      const auto g = out.grad();
      auto gx = x.mutable_grad();
      for (std::size_t i = 0; i < g.size(); ++i) {
        gx[i] += g[i];
      }
    });
    return out;
  }

  /// Accumulates d(loss)/d(t) into every reachable tensor that requires grad.
  void backward(const Tensor<T>& loss) {
    if (!record_) {
      throw GraphError("backward on a graph built without recording");
    }
    if (consumed_) {
      throw GraphError("stale graph: backward already ran; build a new graph with a fresh forward pass");
    }
    if (loss.size() != 1) {
      throw ShapeError("backward expects a scalar loss, got " + shape_str(loss.shape()));
    }
    if (loss.impl_->producer != this) {
      throw GraphError("loss was not produced by this graph");
    }
    consumed_ = true;
    if (!loss.requires_grad()) {
      return;
    }
    Tensor<T> l = loss;
    l.mutable_grad()[0] += T(1);
    for (auto it = tape_.rbegin(); it != tape_.rend(); ++it) {
      if (it->output.has_grad()) {
        it->backward();
      }
    }
    tape_.clear();
  }

 private:
  struct Record {
    Tensor<T> output;
    std::function<void()> backward;
  };

  static T sigmoid(T v) {
    if (v >= T(0)) {
      return T(1) / (T(1) + std::exp(-v));
    }
    const T e = std::exp(v);
    return e / (T(1) + e);
  }

  static bool check_broadcast(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.shape() == b.shape()) {
      return false;
    }
    if (a.rank() >= 2 && std::equal(a.shape().begin() + 1, a.shape().end(), b.shape().begin(),
                                    b.shape().end())) {
      return true;
    }
    throw ShapeError("elementwise shape mismatch: " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  }

  void record(const std::vector<Tensor<T>>& inputs, Tensor<T>& out, std::function<void()> fn) {
    out.impl_->producer = this;
    if (!record_) {
      return;
    }
    const bool any = std::any_of(inputs.begin(), inputs.end(),
                                 [](const Tensor<T>& t) { return t.requires_grad(); });
    if (!any) {
      return;
    }
    out.set_requires_grad(true);
    tape_.push_back(Record{out, std::move(fn)});
  }

  bool record_;
  bool consumed_ = false;
  std::vector<Record> tape_;
};

}  // namespace aclam::ad
