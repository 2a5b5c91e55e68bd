#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <numbers>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Core>

#include "tnpde/errors.hpp"
#include "tnpde/random.hpp"

namespace tnpde {

inline bool all_finite(std::span<const double> values) noexcept {
  // x - x is NaN exactly when x is NaN or infinite.
  double acc = 0.0;
  for (double v : values) acc += v - v;
  return acc == 0.0;
}

/// Ordered list of positive extents. Rank 0 is a scalar with one element.
class Shape {
 public:
  Shape() = default;

  Shape(std::initializer_list<std::int64_t> dims) { assign(dims.begin(), dims.end()); }

  explicit Shape(const std::vector<std::int64_t>& dims) { assign(dims.begin(), dims.end()); }

  explicit Shape(const std::vector<std::size_t>& dims) { assign(dims.begin(), dims.end()); }

  std::size_t rank() const noexcept { return dims_.size(); }
  std::size_t operator[](std::size_t axis) const { return dims_.at(axis); }
  const std::vector<std::size_t>& dims() const noexcept { return dims_; }

  std::size_t numel() const noexcept {
    return std::accumulate(dims_.begin(), dims_.end(), std::size_t{1}, std::multiplies<>{});
  }

  friend bool operator==(const Shape&, const Shape&) = default;

  std::string to_string() const {
    std::ostringstream os;
    os << '(';
    for (std::size_t i = 0; i < dims_.size(); ++i) os << (i ? "," : "") << dims_[i];
    os << ')';
    return os.str();
  }

 private:
  template <class It>
  void assign(It first, It last) {
    for (; first != last; ++first) {
      const auto extent = static_cast<std::int64_t>(*first);
      if (extent <= 0) {
        throw ShapeError("invalid shape: extent " + std::to_string(extent) + " is not positive");
      }
      dims_.push_back(static_cast<std::size_t>(extent));
    }
  }

  std::vector<std::size_t> dims_;
};

/// Dense array of doubles, row-major (last index fastest).
class Tensor {
 public:
  Tensor() : data_(1, 0.0) {}

  Tensor(Shape shape, std::vector<double> data) : shape_(std::move(shape)), data_(std::move(data)) {
    if (data_.size() != shape_.numel()) {
      throw ShapeError("tensor data length " + std::to_string(data_.size()) +
                       " does not match shape " + shape_.to_string());
    }
    if (!all_finite(data_)) throw NonFiniteError("tensor of shape " + shape_.to_string() + " has non-finite entries");
  }

  /// Adopts kernel output without the finiteness scan.
  static Tensor unchecked(Shape shape, std::vector<double> data) {
    Tensor t;
    if (data.size() != shape.numel()) {
      throw ShapeError("tensor data length " + std::to_string(data.size()) + " does not match shape " +
                       shape.to_string());
    }
    t.shape_ = std::move(shape);
    t.data_ = std::move(data);
    return t;
  }

  static Tensor full(Shape shape, double value) {
    const std::size_t n = shape.numel();
    return Tensor(std::move(shape), std::vector<double>(n, value));
  }
  static Tensor zeros(Shape shape) { return full(std::move(shape), 0.0); }
  static Tensor ones(Shape shape) { return full(std::move(shape), 1.0); }
  static Tensor scalar(double value) { return Tensor(Shape{}, {value}); }

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.rank(); }
  std::size_t size() const noexcept { return data_.size(); }

  std::span<const double> data() const noexcept { return data_; }
  std::span<double> data() noexcept { return data_; }
  const std::vector<double>& values() const noexcept { return data_; }

  double operator[](std::size_t i) const { return data_[i]; }
  double& operator[](std::size_t i) { return data_[i]; }

  /// Rank-2 element access.
  double at(std::size_t row, std::size_t col) const { return data_[row * shape_[1] + col]; }
  double& at(std::size_t row, std::size_t col) { return data_[row * shape_[1] + col]; }

  /// Scalar value of a single-element tensor.
  double item() const {
    if (data_.size() != 1) throw ShapeError("item() on tensor of shape " + shape_.to_string());
    return data_[0];
  }

  friend bool operator==(const Tensor&, const Tensor&) = default;

 private:
  Shape shape_;
  std::vector<double> data_;
};

inline Tensor tensor_full(const Shape& shape, double value) { return Tensor::full(shape, value); }

/// i.i.d. N(mean, stddev^2) entries from a seeded xoshiro256** stream.
inline Tensor randn(const Shape& shape, double mean, double stddev, std::uint64_t seed) {
  if (!(stddev >= 0.0)) throw InvalidArgument("randn: stddev must be non-negative");
  Tensor out = Tensor::zeros(shape);
  NormalSampler normal(seed);
  for (double& v : out.data()) v = mean + stddev * normal();
  return out;
}

inline double max_abs_diff(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw ShapeError("max_abs_diff: " + a.shape().to_string() + " vs " + b.shape().to_string());
  }
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

namespace detail {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

inline void require_rank(const Tensor& t, std::size_t rank, const char* op) {
  if (t.rank() != rank) {
    throw ShapeError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got shape " +
                     t.shape().to_string());
  }
}

template <class F>
Tensor unary(const Tensor& x, F f) {
  std::vector<double> out(x.size());
  const auto in = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(in[i]);
  return Tensor::unchecked(x.shape(), std::move(out));
}

template <class F>
Tensor binary(const Tensor& a, const Tensor& b, F f, const char* op) {
  const auto da = a.data();
  const auto db = b.data();
  if (a.shape() == b.shape()) {
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(da[i], db[i]);
    return Tensor::unchecked(a.shape(), std::move(out));
  }
  if (b.rank() == 0) {
    const double s = db[0];
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(da[i], s);
    return Tensor::unchecked(a.shape(), std::move(out));
  }
  if (a.rank() == 0) {
    const double s = da[0];
    std::vector<double> out(b.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(s, db[i]);
    return Tensor::unchecked(b.shape(), std::move(out));
  }
  throw ShapeError(std::string(op) + ": shape mismatch " + a.shape().to_string() + " vs " +
                   b.shape().to_string());
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Value-level kernels. The autodiff graph records these; they are also usable
// directly on tensors.

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  detail::require_rank(a, 2, "matmul");
  detail::require_rank(b, 2, "matmul");
  const std::size_t m = a.shape()[0], k = a.shape()[1], n = b.shape()[1];
  if (b.shape()[0] != k) {
    throw ShapeError("matmul: inner dimensions differ " + a.shape().to_string() + " x " +
                     b.shape().to_string());
  }
  std::vector<double> out(m * n);
  using Map = Eigen::Map<const detail::RowMatrix>;
  Eigen::Map<detail::RowMatrix> c(out.data(), static_cast<Eigen::Index>(m), static_cast<Eigen::Index>(n));
  c.noalias() = Map(a.data().data(), static_cast<Eigen::Index>(m), static_cast<Eigen::Index>(k)) *
                Map(b.data().data(), static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(n));
  return Tensor::unchecked(Shape{static_cast<std::int64_t>(m), static_cast<std::int64_t>(n)}, std::move(out));
}

inline Tensor add(const Tensor& a, const Tensor& b) {
  return detail::binary(a, b, [](double x, double y) { return x + y; }, "add");
}
inline Tensor sub(const Tensor& a, const Tensor& b) {
  return detail::binary(a, b, [](double x, double y) { return x - y; }, "sub");
}
inline Tensor mul(const Tensor& a, const Tensor& b) {
  return detail::binary(a, b, [](double x, double y) { return x * y; }, "mul");
}

inline Tensor reshape(const Tensor& x, const Shape& shape) {
  if (shape.numel() != x.size()) {
    throw ShapeError("reshape: cannot view " + x.shape().to_string() + " as " + shape.to_string());
  }
  return Tensor::unchecked(shape, x.values());
}

inline std::vector<std::size_t> inverse_permutation(const std::vector<std::size_t>& perm) {
  std::vector<std::size_t> inv(perm.size());
  for (std::size_t i = 0; i < perm.size(); ++i) inv[perm[i]] = i;
  return inv;
}

/// Axis permutation: output axis i is input axis perm[i].
inline Tensor transpose(const Tensor& x, const std::vector<std::size_t>& perm) {
  const std::size_t rank = x.rank();
  std::vector<bool> seen(rank, false);
  if (perm.size() != rank) throw ShapeError("transpose: permutation rank mismatch");
  for (std::size_t p : perm) {
    if (p >= rank || seen[p]) throw ShapeError("transpose: invalid permutation");
    seen[p] = true;
  }
  const auto& in_dims = x.shape().dims();
  std::vector<std::size_t> out_dims(rank);
  for (std::size_t i = 0; i < rank; ++i) out_dims[i] = in_dims[perm[i]];

  std::vector<double> out(x.size());
  const auto in = x.data();
  if (rank == 2 && perm[0] == 1) {
    const std::size_t rows = in_dims[0], cols = in_dims[1];
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t c = 0; c < cols; ++c) out[c * rows + r] = in[r * cols + c];
    return Tensor::unchecked(Shape(out_dims), std::move(out));
  }

  std::vector<std::size_t> in_strides(rank, 1);
  for (std::size_t i = rank; i-- > 1;) in_strides[i - 1] = in_strides[i] * in_dims[i];
  std::vector<std::size_t> strides(rank);
  for (std::size_t i = 0; i < rank; ++i) strides[i] = in_strides[perm[i]];

  std::vector<std::size_t> idx(rank, 0);
  std::size_t src = 0;
  for (std::size_t dst = 0; dst < out.size(); ++dst) {
    out[dst] = in[src];
    for (std::size_t axis = rank; axis-- > 0;) {
      if (++idx[axis] < out_dims[axis]) {
        src += strides[axis];
        break;
      }
      src -= strides[axis] * (out_dims[axis] - 1);
      idx[axis] = 0;
    }
  }
  return Tensor::unchecked(Shape(out_dims), std::move(out));
}

/// Swaps the two axes of a matrix.
inline Tensor transpose(const Tensor& x) {
  detail::require_rank(x, 2, "transpose");
  return transpose(x, {1, 0});
}

/// Concatenation of matrices along axis 0 (rows) or 1 (columns).
inline Tensor concat(std::span<const Tensor* const> parts, std::size_t axis) {
  if (parts.empty()) throw ShapeError("concat: no inputs");
  if (axis > 1) throw ShapeError("concat: axis must be 0 or 1");
  for (const Tensor* p : parts) detail::require_rank(*p, 2, "concat");
  const std::size_t other = 1 - axis;
  const std::size_t fixed = parts.front()->shape()[other];
  std::size_t total = 0;
  for (const Tensor* p : parts) {
    if (p->shape()[other] != fixed) {
      throw ShapeError("concat: mismatched extent " + p->shape().to_string() + " vs " +
                       parts.front()->shape().to_string());
    }
    total += p->shape()[axis];
  }
  std::vector<double> out;
  out.reserve(total * fixed);
  if (axis == 0) {
    for (const Tensor* p : parts) out.insert(out.end(), p->data().begin(), p->data().end());
    return Tensor::unchecked(Shape{static_cast<std::int64_t>(total), static_cast<std::int64_t>(fixed)},
                  std::move(out));
  }
  for (std::size_t r = 0; r < fixed; ++r) {
    for (const Tensor* p : parts) {
      const std::size_t w = p->shape()[1];
      const auto row = p->data().subspan(r * w, w);
      out.insert(out.end(), row.begin(), row.end());
    }
  }
  return Tensor::unchecked(Shape{static_cast<std::int64_t>(fixed), static_cast<std::int64_t>(total)},
                std::move(out));
}

inline Tensor sum(const Tensor& x) {
  double s = 0.0;
  for (double v : x.data()) s += v;
  return Tensor::scalar(s);
}

inline Tensor mean(const Tensor& x) { return Tensor::scalar(sum(x).item() / static_cast<double>(x.size())); }

inline Tensor square(const Tensor& x) {
  return detail::unary(x, [](double v) { return v * v; });
}

inline Tensor tanh(const Tensor& x) {
  return detail::unary(x, [](double v) { return std::tanh(v); });
}

inline Tensor sin(const Tensor& x) {
  return detail::unary(x, [](double v) { return std::sin(v); });
}

inline Tensor relu(const Tensor& x) {
  return detail::unary(x, [](double v) { return v > 0.0 ? v : 0.0; });
}

/// ln(cosh(x)) written as |x| + ln((1 + e^{-2|x|}) / 2), finite for all finite x.
inline double ln_cosh(double x) {
  const double a = std::abs(x);
  return a + std::log1p(std::exp(-2.0 * a)) - std::numbers::ln2;
}

inline Tensor ln_cosh(const Tensor& x) {
  return detail::unary(x, [](double v) { return ln_cosh(v); });
}

inline Tensor norm_sq(const Tensor& x) {
  double s = 0.0;
  for (double v : x.data()) s += v * v;
  return Tensor::scalar(s);
}

inline Tensor scale(const Tensor& x, double factor) {
  return detail::unary(x, [factor](double v) { return v * factor; });
}

}  // namespace tnpde
