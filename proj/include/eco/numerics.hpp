#ifndef ECO_NUMERICS_HPP_
#define ECO_NUMERICS_HPP_

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <numeric>
#include <span>
#include <string>
#include <type_traits>
#include <utility>
#include <vector>

#include "eco/errors.hpp"

namespace eco {

using Shape = std::vector<std::size_t>;

std::string shape_to_string(const Shape& shape);

inline std::size_t shape_size(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
}

template <typename T>
constexpr const char* precision_name() {
  if constexpr (std::is_same_v<T, float>) {
    return "f32";
  } else {
    static_assert(std::is_same_v<T, double>, "Tensor supports f32 and f64");
    return "f64";
  }
}

// Dense row-major tensor. Precision is the template parameter: float is the
// storage/training default, double is used wherever gradients are checked.
template <typename T>
class Tensor {
  static_assert(std::is_floating_point_v<T>);

 public:
  using value_type = T;

  Tensor() = default;
  explicit Tensor(Shape shape)
      : shape_(std::move(shape)), data_(shape_size(shape_), T{0}) {}
  Tensor(Shape shape, std::vector<T> data)
      : shape_(std::move(shape)), data_(std::move(data)) {
    if (shape_size(shape_) != data_.size()) {
      throw DimensionError("tensor data length " +
                           std::to_string(data_.size()) +
                           " does not match shape " + shape_to_string(shape_));
    }
  }

  static Tensor identity(std::size_t n) {
    Tensor t({n, n});
    for (std::size_t i = 0; i < n; ++i) t(i, i) = T{1};
    return t;
  }

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t extent(std::size_t axis) const { return shape_.at(axis); }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  T* data() { return data_.data(); }
  const T* data() const { return data_.data(); }
  std::span<T> values() { return data_; }
  std::span<const T> values() const { return data_; }
  const std::vector<T>& storage() const { return data_; }

  T& operator[](std::size_t i) { return data_[i]; }
  const T& operator[](std::size_t i) const { return data_[i]; }
  T& operator()(std::size_t i, std::size_t j) {
    return data_[i * shape_[1] + j];
  }
  const T& operator()(std::size_t i, std::size_t j) const {
    return data_[i * shape_[1] + j];
  }
  T& operator()(std::size_t i, std::size_t j, std::size_t k) {
    return data_[(i * shape_[1] + j) * shape_[2] + k];
  }
  const T& operator()(std::size_t i, std::size_t j, std::size_t k) const {
    return data_[(i * shape_[1] + j) * shape_[2] + k];
  }

  // Contiguous slice along the leading axis.
  std::size_t row_size() const { return shape_.empty() ? 0 : size() / shape_[0]; }
  std::span<T> row(std::size_t i) {
    return std::span<T>(data_).subspan(i * row_size(), row_size());
  }
  std::span<const T> row(std::size_t i) const {
    return std::span<const T>(data_).subspan(i * row_size(), row_size());
  }

  void fill(T value) { std::fill(data_.begin(), data_.end(), value); }

  template <typename U>
  Tensor<U> cast() const {
    std::vector<U> out(data_.begin(), data_.end());
    return Tensor<U>(shape_, std::move(out));
  }

  Tensor reshaped(Shape shape) const { return Tensor(std::move(shape), data_); }

  bool all_finite() const {
    for (T v : data_) {
      if (!std::isfinite(v)) return false;
    }
    return true;
  }

  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.shape_ == b.shape_ && a.data_ == b.data_;
  }

 private:
  Shape shape_;
  std::vector<T> data_;
};

namespace detail {

template <typename T>
void require_rank2(const Tensor<T>& t, const char* what) {
  if (t.rank() != 2) {
    throw DimensionError(std::string(what) + " expects a rank-2 tensor, got " +
                         shape_to_string(t.shape()));
  }
}

}  // namespace detail

// c = a * b
template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_rank2(a, "matmul");
  detail::require_rank2(b, "matmul");
  if (a.extent(1) != b.extent(0)) {
    throw DimensionError("matmul inner extents differ: " +
                         shape_to_string(a.shape()) + " x " +
                         shape_to_string(b.shape()));
  }
  const std::size_t m = a.extent(0), k = a.extent(1), n = b.extent(1);
  Tensor<T> c({m, n});
  for (std::size_t i = 0; i < m; ++i) {
    T* crow = c.data() + i * n;
    for (std::size_t t = 0; t < k; ++t) {
      const T av = a(i, t);
      const T* brow = b.data() + t * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
  return c;
}

// c = a * b^T
template <typename T>
Tensor<T> matmul_nt(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_rank2(a, "matmul_nt");
  detail::require_rank2(b, "matmul_nt");
  if (a.extent(1) != b.extent(1)) {
    throw DimensionError("matmul_nt inner extents differ: " +
                         shape_to_string(a.shape()) + " x " +
                         shape_to_string(b.shape()) + "^T");
  }
  const std::size_t m = a.extent(0), k = a.extent(1), n = b.extent(0);
  Tensor<T> c({m, n});
  for (std::size_t i = 0; i < m; ++i) {
    const T* arow = a.data() + i * k;
    for (std::size_t j = 0; j < n; ++j) {
      const T* brow = b.data() + j * k;
      T acc{0};
      for (std::size_t t = 0; t < k; ++t) acc += arow[t] * brow[t];
      c(i, j) = acc;
    }
  }
  return c;
}

// y[j] = sum_i x[i] * w[i][j] + bias[j], for a single row vector x.
template <typename T>
void vecmat(std::span<const T> x, const Tensor<T>& w, std::span<const T> bias,
            std::span<T> y) {
  const std::size_t n = w.extent(1);
  for (std::size_t j = 0; j < n; ++j) y[j] = bias.empty() ? T{0} : bias[j];
  for (std::size_t i = 0; i < x.size(); ++i) {
    const T xv = x[i];
    const T* wrow = w.data() + i * n;
    for (std::size_t j = 0; j < n; ++j) y[j] += xv * wrow[j];
  }
}

// y[i] = sum_j w[i][j] * g[j]; the transpose product used in backward passes.
template <typename T>
void matvec(const Tensor<T>& w, std::span<const T> g, std::span<T> y) {
  const std::size_t n = w.extent(1);
  for (std::size_t i = 0; i < w.extent(0); ++i) {
    const T* wrow = w.data() + i * n;
    T acc{0};
    for (std::size_t j = 0; j < n; ++j) acc += wrow[j] * g[j];
    y[i] = acc;
  }
}

template <typename T>
void softmax_inplace(std::span<T> x) {
  if (x.empty()) return;
  T max_v = x[0];
  for (T v : x) max_v = std::max(max_v, v);
  T sum{0};
  for (T& v : x) {
    v = std::exp(v - max_v);
    sum += v;
  }
  for (T& v : x) v /= sum;
}

template <typename T>
Tensor<T> softmax_rows(const Tensor<T>& x) {
  detail::require_rank2(x, "softmax_rows");
  Tensor<T> y = x;
  for (std::size_t i = 0; i < y.extent(0); ++i) softmax_inplace(y.row(i));
  return y;
}

// Per-row statistics kept by layer_norm for the backward pass.
template <typename T>
struct NormStats {
  T mean{0};
  T rstd{0};
};

template <typename T>
NormStats<T> layer_norm_into(std::span<const T> x, std::span<const T> gain,
                             std::span<const T> bias, T eps, std::span<T> y) {
  const T n = static_cast<T>(x.size());
  T mean{0};
  for (T v : x) mean += v;
  mean /= n;
  T var{0};
  for (T v : x) var += (v - mean) * (v - mean);
  var /= n;
  const T rstd = T{1} / std::sqrt(var + eps);
  for (std::size_t i = 0; i < x.size(); ++i) {
    y[i] = gain[i] * ((x[i] - mean) * rstd) + bias[i];
  }
  return {mean, rstd};
}

template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gain,
                     const Tensor<T>& bias, T eps) {
  if (x.rank() != 1 || gain.shape() != x.shape() || bias.shape() != x.shape()) {
    throw DimensionError("layer_norm shapes differ: x " +
                         shape_to_string(x.shape()) + ", gain " +
                         shape_to_string(gain.shape()) + ", bias " +
                         shape_to_string(bias.shape()));
  }
  if (x.size() == 0) throw DimensionError("layer_norm on an empty vector");
  if (!(eps > T{0})) throw ConfigError("layer_norm eps must be positive");
  Tensor<T> y(x.shape());
  layer_norm_into<T>(x.values(), gain.values(), bias.values(), eps, y.values());
  return y;
}

// dx for y = gain * (x - mean) * rstd + bias, given dy.
template <typename T>
void layer_norm_backward(std::span<const T> x, std::span<const T> gain,
                         NormStats<T> stats, std::span<const T> dy,
                         std::span<T> dx) {
  const std::size_t n = x.size();
  T mean_dxhat{0};
  T mean_dxhat_xhat{0};
  for (std::size_t i = 0; i < n; ++i) {
    const T xhat = (x[i] - stats.mean) * stats.rstd;
    const T dxhat = dy[i] * gain[i];
    mean_dxhat += dxhat;
    mean_dxhat_xhat += dxhat * xhat;
  }
  mean_dxhat /= static_cast<T>(n);
  mean_dxhat_xhat /= static_cast<T>(n);
  for (std::size_t i = 0; i < n; ++i) {
    const T xhat = (x[i] - stats.mean) * stats.rstd;
    const T dxhat = dy[i] * gain[i];
    dx[i] = stats.rstd * (dxhat - mean_dxhat - xhat * mean_dxhat_xhat);
  }
}

template <typename T>
T sigmoid(T x) {
  return T{1} / (T{1} + std::exp(-x));
}

inline constexpr double kQuickGeluAlpha = 1.702;

template <typename T>
T quick_gelu(T x) {
  return x * sigmoid(static_cast<T>(kQuickGeluAlpha) * x);
}

template <typename T>
T quick_gelu_derivative(T x) {
  const T a = static_cast<T>(kQuickGeluAlpha);
  const T s = sigmoid(a * x);
  return s + a * x * s * (T{1} - s);
}

template <typename T>
Tensor<T> quick_gelu(const Tensor<T>& x) {
  Tensor<T> y = x;
  for (T& v : y.values()) v = quick_gelu(v);
  return y;
}

// Central-difference gradient oracle, always evaluated in double precision.
Tensor<double> finite_difference_grad(
    const std::function<double(const Tensor<double>&)>& f,
    const Tensor<double>& x, double h);

// |a - b| / max(|a|, |b|, floor), maximised over coordinates.
double max_relative_error(std::span<const double> analytic,
                          std::span<const double> numeric,
                          double floor = 1e-8);

// Counter-based generator: draw i is splitmix64(seed, i), so the stream is a
// pure function of (seed, draw index) and identical on every platform.
class SeededRng {
 public:
  explicit SeededRng(std::uint64_t seed) : seed_(seed) {}

  std::uint64_t seed() const { return seed_; }
  std::uint64_t counter() const { return counter_; }

  std::uint64_t next_u64();
  // Uniform on [0, 1) with 53 random bits.
  double uniform();
  // Unbiased integer in [0, n).
  std::uint64_t uniform_index(std::uint64_t n);
  // Box-Muller; consumes exactly two draws per call.
  double gaussian(double mean, double std);

  // Independent stream for a named purpose or worker index.
  SeededRng derive(std::uint64_t stream) const;

 private:
  std::uint64_t seed_;
  std::uint64_t counter_ = 0;
};

std::uint64_t splitmix64(std::uint64_t x);

// 64-bit FNV-1a over raw bytes; used for content fingerprints.
class Hasher {
 public:
  void update(const void* data, std::size_t bytes);
  void update_u64(std::uint64_t v);
  void update_string(const std::string& s);
  template <typename T>
  void update_tensor(const Tensor<T>& t) {
    update_u64(t.rank());
    for (std::size_t e : t.shape()) update_u64(e);
    update(t.data(), t.size() * sizeof(T));
  }
  std::uint64_t digest() const { return state_; }

 private:
  std::uint64_t state_ = 14695981039346656037ULL;
};

std::string hash_to_hex(std::uint64_t h);
std::uint64_t hash_from_hex(const std::string& hex);

// Runs fn(i) for i in [0, n) on up to `threads` workers. Work is split into
// contiguous chunks; fn must only write to per-index outputs.
void parallel_for(std::size_t n, std::size_t threads,
                  const std::function<void(std::size_t)>& fn);

// Thread count from ECO_THREADS, or 1 when unset/invalid.
std::size_t default_thread_count();

}  // namespace eco

#endif  // ECO_NUMERICS_HPP_
