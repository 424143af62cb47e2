#pragma once

// Dense row-major float tensors plus the deterministic kernels everything
// else is built from. Every reduction runs in a fixed ascending index order,
// so identical inputs give bit-identical outputs run after run.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <sstream>
#include <stdexcept>
#include <string>
#include <type_traits>
#include <vector>

namespace cafe {

// Misuse of an interface: bad shapes, bad indices, bad configuration.
// The CLI maps this to exit code 1.
struct usage_error : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

// Bad data or a numeric failure: non-finite input, corrupt file, singular
// system. The CLI maps this to exit code 2.
struct data_error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

inline void require(bool cond, const std::string& msg) {
  if (!cond) throw usage_error(msg);
}

using Shape = std::vector<int>;

inline std::size_t shape_numel(const Shape& s) {
  std::size_t n = 1;
  for (int d : s) {
    require(d >= 0, "negative dimension in shape");
    n *= static_cast<std::size_t>(d);
  }
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
  os << ']';
  return os.str();
}

template <typename T>
class Tensor {
  static_assert(std::is_floating_point_v<T>, "Tensor is float or double");

 public:
  Tensor() = default;
  explicit Tensor(Shape shape)
      : shape_(std::move(shape)), data_(shape_numel(shape_), T(0)) {}
  Tensor(Shape shape, std::vector<T> data)
      : shape_(std::move(shape)), data_(std::move(data)) {
    require(data_.size() == shape_numel(shape_),
            "tensor data length does not match shape " + shape_str(shape_));
  }

  static Tensor zeros(Shape s) { return Tensor(std::move(s)); }
  static Tensor full(Shape s, T v) {
    Tensor t(std::move(s));
    std::fill(t.data_.begin(), t.data_.end(), v);
    return t;
  }
  static Tensor scalar(T v) { return Tensor({1, 1}, {v}); }
  // Entry point for values crossing an external boundary (files, CLI):
  // rejects NaN/Inf up front.
  static Tensor external(Shape s, std::vector<T> data, const char* what) {
    Tensor t(std::move(s), std::move(data));
    t.require_finite(what);
    return t;
  }

  int ndim() const { return static_cast<int>(shape_.size()); }
  int dim(int i) const { return shape_[static_cast<std::size_t>(i)]; }
  int rows() const {
    require(ndim() == 2, "rows() needs a 2-d tensor, got " + shape_str(shape_));
    return shape_[0];
  }
  int cols() const {
    require(ndim() == 2, "cols() needs a 2-d tensor, got " + shape_str(shape_));
    return shape_[1];
  }
  const Shape& shape() const { return shape_; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  T* data() { return data_.data(); }
  const T* data() const { return data_.data(); }
  std::vector<T>& vec() { return data_; }
  const std::vector<T>& vec() const { return data_; }

  T& operator[](std::size_t i) { return data_[i]; }
  T operator[](std::size_t i) const { return data_[i]; }
  T& operator()(int i, int j) {
    return data_[static_cast<std::size_t>(i) * shape_[1] + j];
  }
  T operator()(int i, int j) const {
    return data_[static_cast<std::size_t>(i) * shape_[1] + j];
  }

  bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

  Tensor reshaped(Shape s) const {
    require(shape_numel(s) == data_.size(),
            "reshape " + shape_str(shape_) + " -> " + shape_str(s));
    return Tensor(std::move(s), data_);
  }

  void require_finite(const char* what) const {
    for (T v : data_)
      if (!std::isfinite(v))
        throw data_error(std::string(what) + ": non-finite value");
  }

 private:
  Shape shape_;
  std::vector<T> data_;
};

// ---------------------------------------------------------------------------
// Kernels. 2-d unless stated otherwise; accumulation order is ascending in
// the reduced index and uses std::fma so tests can reproduce results exactly.

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  const int m = a.rows(), k = a.cols(), n = b.cols();
  require(b.rows() == k, "matmul inner dims: " + shape_str(a.shape()) + " x " +
                             shape_str(b.shape()));
  Tensor<T> c({m, n});
  const T* pa = a.data();
  const T* pb = b.data();
  T* pc = c.data();
  for (int i = 0; i < m; ++i) {
    T* crow = pc + static_cast<std::size_t>(i) * n;
    for (int kk = 0; kk < k; ++kk) {
      const T aik = pa[static_cast<std::size_t>(i) * k + kk];
      const T* brow = pb + static_cast<std::size_t>(kk) * n;
      for (int j = 0; j < n; ++j) crow[j] = std::fma(aik, brow[j], crow[j]);
    }
  }
  return c;
}

// a [M x N] times b^T where b is [K x N]: result [M x K].
template <typename T>
Tensor<T> matmul_nt(const Tensor<T>& a, const Tensor<T>& b) {
  const int m = a.rows(), n = a.cols(), k = b.rows();
  require(b.cols() == n, "matmul_nt inner dims");
  Tensor<T> c({m, k});
  for (int i = 0; i < m; ++i) {
    const T* arow = a.data() + static_cast<std::size_t>(i) * n;
    for (int kk = 0; kk < k; ++kk) {
      const T* brow = b.data() + static_cast<std::size_t>(kk) * n;
      T acc = 0;
      for (int j = 0; j < n; ++j) acc = std::fma(arow[j], brow[j], acc);
      c(i, kk) = acc;
    }
  }
  return c;
}

// a^T times b where a is [M x K], b is [M x N]: result [K x N].
template <typename T>
Tensor<T> matmul_tn(const Tensor<T>& a, const Tensor<T>& b) {
  const int m = a.rows(), k = a.cols(), n = b.cols();
  require(b.rows() == m, "matmul_tn inner dims");
  Tensor<T> c({k, n});
  for (int i = 0; i < m; ++i) {
    const T* arow = a.data() + static_cast<std::size_t>(i) * k;
    const T* brow = b.data() + static_cast<std::size_t>(i) * n;
    for (int kk = 0; kk < k; ++kk) {
      const T aik = arow[kk];
      T* crow = c.data() + static_cast<std::size_t>(kk) * n;
      for (int j = 0; j < n; ++j) crow[j] = std::fma(aik, brow[j], crow[j]);
    }
  }
  return c;
}

template <typename T>
Tensor<T> transpose(const Tensor<T>& a) {
  const int m = a.rows(), n = a.cols();
  Tensor<T> c({n, m});
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j) c(j, i) = a(i, j);
  return c;
}

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  require(a.same_shape(b), "add shape mismatch");
  Tensor<T> c(a.shape());
  for (std::size_t i = 0; i < a.size(); ++i) c[i] = a[i] + b[i];
  return c;
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  require(a.same_shape(b), "sub shape mismatch");
  Tensor<T> c(a.shape());
  for (std::size_t i = 0; i < a.size(); ++i) c[i] = a[i] - b[i];
  return c;
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T s) {
  Tensor<T> c(a.shape());
  for (std::size_t i = 0; i < a.size(); ++i) c[i] = a[i] * s;
  return c;
}

// x [M x N] plus v [N] broadcast over rows.
template <typename T>
Tensor<T> add_rowvec(const Tensor<T>& x, const Tensor<T>& v) {
  const int m = x.rows(), n = x.cols();
  require(static_cast<int>(v.size()) == n, "add_rowvec length mismatch");
  Tensor<T> c(x.shape());
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j) c(i, j) = x(i, j) + v[static_cast<std::size_t>(j)];
  return c;
}

template <typename T>
Tensor<T> sub_rowvec(const Tensor<T>& x, const Tensor<T>& v) {
  const int m = x.rows(), n = x.cols();
  require(static_cast<int>(v.size()) == n, "sub_rowvec length mismatch");
  Tensor<T> c(x.shape());
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j) c(i, j) = x(i, j) - v[static_cast<std::size_t>(j)];
  return c;
}

template <typename T>
Tensor<T> relu(const Tensor<T>& x) {
  Tensor<T> c(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) c[i] = x[i] > T(0) ? x[i] : T(0);
  return c;
}

// tanh-form GELU. Constants: sqrt(2/pi) and the cubic coefficient 0.044715.
inline constexpr double kGeluSqrt2OverPi = 0.7978845608028654;
inline constexpr double kGeluCubic = 0.044715;

template <typename T>
T gelu_scalar(T x) {
  const T c = static_cast<T>(kGeluSqrt2OverPi);
  const T a = static_cast<T>(kGeluCubic);
  const T u = c * (x + a * x * x * x);
  return T(0.5) * x * (T(1) + std::tanh(u));
}

template <typename T>
T gelu_grad_scalar(T x) {
  const T c = static_cast<T>(kGeluSqrt2OverPi);
  const T a = static_cast<T>(kGeluCubic);
  const T u = c * (x + a * x * x * x);
  const T t = std::tanh(u);
  const T du = c * (T(1) + T(3) * a * x * x);
  return T(0.5) * (T(1) + t) + T(0.5) * x * (T(1) - t * t) * du;
}

template <typename T>
Tensor<T> gelu(const Tensor<T>& x) {
  Tensor<T> c(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) c[i] = gelu_scalar(x[i]);
  return c;
}

// Row-wise softmax with rowmax subtraction.
template <typename T>
Tensor<T> softmax_rows(const Tensor<T>& x) {
  const int m = x.rows(), n = x.cols();
  Tensor<T> c(x.shape());
  for (int i = 0; i < m; ++i) {
    T mx = x(i, 0);
    for (int j = 1; j < n; ++j) mx = std::max(mx, x(i, j));
    T sum = 0;
    for (int j = 0; j < n; ++j) {
      const T e = std::exp(x(i, j) - mx);
      c(i, j) = e;
      sum += e;
    }
    const T inv = T(1) / sum;
    for (int j = 0; j < n; ++j) c(i, j) *= inv;
  }
  return c;
}

template <typename T>
struct LayerNormOut {
  Tensor<T> y;
  Tensor<T> mu;    // per-row mean
  Tensor<T> rstd;  // per-row 1/sqrt(var + eps)
};

// Per-row normalization with affine scale/shift. Two-pass mean/variance,
// biased variance, ascending-index sums.
template <typename T>
LayerNormOut<T> layer_norm_stats(const Tensor<T>& x, const Tensor<T>& gamma,
                                 const Tensor<T>& beta, T eps) {
  require(eps > T(0), "layer_norm eps must be > 0");
  const int m = x.rows(), n = x.cols();
  require(static_cast<int>(gamma.size()) == n && static_cast<int>(beta.size()) == n,
          "layer_norm gamma/beta length mismatch");
  LayerNormOut<T> out{Tensor<T>(x.shape()), Tensor<T>({m, 1}), Tensor<T>({m, 1})};
  for (int i = 0; i < m; ++i) {
    T mean = 0;
    for (int j = 0; j < n; ++j) mean += x(i, j);
    mean /= static_cast<T>(n);
    T var = 0;
    for (int j = 0; j < n; ++j) {
      const T d = x(i, j) - mean;
      var += d * d;
    }
    var /= static_cast<T>(n);
    const T r = T(1) / std::sqrt(var + eps);
    out.mu[static_cast<std::size_t>(i)] = mean;
    out.rstd[static_cast<std::size_t>(i)] = r;
    for (int j = 0; j < n; ++j)
      out.y(i, j) = (x(i, j) - mean) * r * gamma[static_cast<std::size_t>(j)] +
                    beta[static_cast<std::size_t>(j)];
  }
  return out;
}

template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma,
                     const Tensor<T>& beta, T eps) {
  return layer_norm_stats(x, gamma, beta, eps).y;
}

template <typename T>
T dot(const Tensor<T>& a, const Tensor<T>& b) {
  require(a.size() == b.size(), "dot length mismatch");
  T acc = 0;
  for (std::size_t i = 0; i < a.size(); ++i) acc = std::fma(a[i], b[i], acc);
  return acc;
}

template <typename T>
T sum(const Tensor<T>& a) {
  T acc = 0;
  for (std::size_t i = 0; i < a.size(); ++i) acc += a[i];
  return acc;
}

template <typename T>
T norm2(const Tensor<T>& a) {
  return std::sqrt(dot(a, a));
}

}  // namespace cafe
