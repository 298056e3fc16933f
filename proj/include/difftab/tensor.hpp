#pragma once

#include <cmath>
#include <cstddef>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "difftab/errors.hpp"
#include "difftab/rng.hpp"

namespace difftab {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& s) {
  std::size_t n = 1;
  for (std::size_t d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ']';
  return os.str();
}

// Dense row-major tensor of doubles.  Ranks used in practice are 1..3; all
// dimensions must be positive and the element count always equals the product
// of the dimensions.
class Tensor {
 public:
  Tensor() = default;  // empty sentinel (size 0); fails shape checks on use

  explicit Tensor(Shape shape) : shape_(std::move(shape)) {
    validate_shape();
    data_.assign(shape_numel(shape_), 0.0);
  }

  Tensor(Shape shape, std::vector<double> data)
      : shape_(std::move(shape)), data_(std::move(data)) {
    validate_shape();
    if (data_.size() != shape_numel(shape_)) {
      throw DimensionError("tensor data length " + std::to_string(data_.size()) +
                           " does not match shape " + shape_str(shape_));
    }
  }

  static Tensor zeros(Shape shape) { return Tensor(std::move(shape)); }

  static Tensor full(Shape shape, double v) {
    Tensor t(std::move(shape));
    for (double& x : t.data_) x = v;
    return t;
  }

  static Tensor scalar(double v) { return Tensor({1}, {v}); }

  static Tensor vec(std::vector<double> v) {
    Shape shape{v.size()};  // read the size before moving v out
    return Tensor(std::move(shape), std::move(v));
  }

  static Tensor matrix(std::size_t rows, std::size_t cols, std::vector<double> v) {
    return Tensor({rows, cols}, std::move(v));
  }

  static Tensor randn(Shape shape, Rng& rng) {
    Tensor t(std::move(shape));
    for (double& x : t.data_) x = rng.normal();
    return t;
  }

  static Tensor rand_uniform(Shape shape, Rng& rng, double lo, double hi) {
    Tensor t(std::move(shape));
    for (double& x : t.data_) x = rng.uniform(lo, hi);
    return t;
  }

  bool empty() const { return data_.empty(); }
  std::size_t size() const { return data_.size(); }
  std::size_t rank() const { return shape_.size(); }
  const Shape& shape() const { return shape_; }

  std::size_t dim(std::size_t i) const {
    if (i >= shape_.size()) throw IndexError("tensor axis out of range");
    return shape_[i];
  }

  double* data() { return data_.data(); }
  const double* data() const { return data_.data(); }

  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }

  // Rank-2 access (row, col).
  double& operator()(std::size_t i, std::size_t j) {
    return data_[i * shape_[1] + j];
  }
  double operator()(std::size_t i, std::size_t j) const {
    return data_[i * shape_[1] + j];
  }

  // Rank-3 access (batch, channel, position).
  double& operator()(std::size_t b, std::size_t c, std::size_t l) {
    return data_[(b * shape_[1] + c) * shape_[2] + l];
  }
  double operator()(std::size_t b, std::size_t c, std::size_t l) const {
    return data_[(b * shape_[1] + c) * shape_[2] + l];
  }

  bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

  bool all_finite() const {
    for (double x : data_)
      if (!std::isfinite(x)) return false;
    return true;
  }

  Tensor reshaped(Shape shape) const {
    if (shape_numel(shape) != data_.size()) {
      throw DimensionError("reshape " + shape_str(shape_) + " -> " +
                           shape_str(shape) + " changes element count");
    }
    return Tensor(std::move(shape), data_);
  }

 private:
  void validate_shape() const {
    for (std::size_t d : shape_) {
      if (d == 0) throw DimensionError("tensor dimensions must be positive");
    }
  }

  Shape shape_;
  std::vector<double> data_;
};

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (!a.same_shape(b)) {
    throw DimensionError(std::string(op) + ": shape mismatch " +
                         shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
}

inline Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  Tensor out(a.shape());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = a[i] + b[i];
  return out;
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "sub");
  Tensor out(a.shape());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = a[i] - b[i];
  return out;
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mul");
  Tensor out(a.shape());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = a[i] * b[i];
  return out;
}

inline Tensor scale(const Tensor& a, double c) {
  Tensor out(a.shape());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = a[i] * c;
  return out;
}

// y += a * x
inline void axpy(Tensor& y, double a, const Tensor& x) {
  require_same_shape(y, x, "axpy");
  for (std::size_t i = 0; i < y.size(); ++i) y[i] += a * x[i];
}

inline double dot(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "dot");
  double acc = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) acc += a[i] * b[i];
  return acc;
}

inline double sum(const Tensor& a) {
  double acc = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) acc += a[i];
  return acc;
}

inline double mean(const Tensor& a) {
  if (a.size() == 0) throw ContractError("mean of empty tensor");
  return sum(a) / static_cast<double>(a.size());
}

inline double norm2(const Tensor& a) { return std::sqrt(dot(a, a)); }

inline Tensor transpose2(const Tensor& a) {
  if (a.rank() != 2) throw DimensionError("transpose2 expects a matrix");
  Tensor out({a.dim(1), a.dim(0)});
  for (std::size_t i = 0; i < a.dim(0); ++i)
    for (std::size_t j = 0; j < a.dim(1); ++j) out(j, i) = a(i, j);
  return out;
}

// C = A * B with a fixed row-major accumulation order (k innermost), so
// results are reproducible bit-for-bit across runs and platforms.
inline Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2) {
    throw DimensionError("matmul expects rank-2 operands, got " +
                         shape_str(a.shape()) + " and " + shape_str(b.shape()));
  }
  if (a.dim(1) != b.dim(0)) {
    throw DimensionError("matmul inner dimensions differ: " +
                         shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  Tensor out({m, n});
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      double acc = 0.0;
      for (std::size_t q = 0; q < k; ++q) acc += a(i, q) * b(q, j);
      out(i, j) = acc;
    }
  }
  return out;
}

// 1-d cross-correlation.  x is [batch, in_ch, len], kernel is
// [out_ch, in_ch, k]; zero padding on both ends; output length is
// (len + 2*padding - k) / stride + 1.
inline Tensor conv1d(const Tensor& x, const Tensor& kernel, std::size_t stride,
                     std::size_t padding) {
  if (x.rank() != 3 || kernel.rank() != 3) {
    throw DimensionError("conv1d expects rank-3 input and kernel");
  }
  if (x.dim(1) != kernel.dim(1)) {
    throw DimensionError("conv1d channel mismatch: input " + shape_str(x.shape()) +
                         " vs kernel " + shape_str(kernel.shape()));
  }
  if (stride == 0) throw DimensionError("conv1d stride must be positive");
  const std::size_t len = x.dim(2), k = kernel.dim(2);
  if (len + 2 * padding < k) {
    throw DimensionError("conv1d kernel longer than padded input");
  }
  const std::size_t batch = x.dim(0), in_ch = x.dim(1), out_ch = kernel.dim(0);
  const std::size_t out_len = (len + 2 * padding - k) / stride + 1;
  Tensor out({batch, out_ch, out_len});
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t oc = 0; oc < out_ch; ++oc) {
      for (std::size_t j = 0; j < out_len; ++j) {
        double acc = 0.0;
        for (std::size_t ic = 0; ic < in_ch; ++ic) {
          for (std::size_t t = 0; t < k; ++t) {
            // Signed position in the unpadded input.
            std::ptrdiff_t pos = static_cast<std::ptrdiff_t>(j * stride + t) -
                                 static_cast<std::ptrdiff_t>(padding);
            if (pos < 0 || pos >= static_cast<std::ptrdiff_t>(len)) continue;
            acc += x(b, ic, static_cast<std::size_t>(pos)) * kernel(oc, ic, t);
          }
        }
        out(b, oc, j) = acc;
      }
    }
  }
  return out;
}

// Gradients of conv1d with respect to input and kernel given the upstream
// gradient on the output; kept next to the forward kernel because the two
// must agree on the indexing convention.
inline std::pair<Tensor, Tensor> conv1d_backward(const Tensor& x,
                                                 const Tensor& kernel,
                                                 std::size_t stride,
                                                 std::size_t padding,
                                                 const Tensor& gout) {
  const std::size_t batch = x.dim(0), in_ch = x.dim(1), len = x.dim(2);
  const std::size_t out_ch = kernel.dim(0), k = kernel.dim(2);
  const std::size_t out_len = gout.dim(2);
  Tensor gx(x.shape());
  Tensor gk(kernel.shape());
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t oc = 0; oc < out_ch; ++oc) {
      for (std::size_t j = 0; j < out_len; ++j) {
        const double g = gout(b, oc, j);
        if (g == 0.0) continue;
        for (std::size_t ic = 0; ic < in_ch; ++ic) {
          for (std::size_t t = 0; t < k; ++t) {
            std::ptrdiff_t pos = static_cast<std::ptrdiff_t>(j * stride + t) -
                                 static_cast<std::ptrdiff_t>(padding);
            if (pos < 0 || pos >= static_cast<std::ptrdiff_t>(len)) continue;
            gx(b, ic, static_cast<std::size_t>(pos)) += g * kernel(oc, ic, t);
            gk(oc, ic, t) += g * x(b, ic, static_cast<std::size_t>(pos));
          }
        }
      }
    }
  }
  return {std::move(gx), std::move(gk)};
}

}  // namespace difftab
