#pragma once

#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "voxstreams/common.hpp"
#include "voxstreams/rng.hpp"

namespace voxstreams {

// Dense row-major tensor of doubles. Double precision throughout: the
// gradient acceptance gates need central finite differences at 1e-4
// relative error, which float32 cannot deliver. Checkpoints store float32.
struct Tensor {
  std::vector<std::int64_t> shape;
  std::vector<double> data;

  Tensor() = default;

  explicit Tensor(std::vector<std::int64_t> shp) : shape(std::move(shp)) {
    data.assign(static_cast<std::size_t>(numel_of(shape)), 0.0);
  }

  static std::int64_t numel_of(const std::vector<std::int64_t>& shp) {
    std::int64_t n = 1;
    for (auto d : shp) {
      check(d >= 0, "tensor dimension must be nonnegative");
      n *= d;
    }
    return n;
  }

  static Tensor zeros(std::vector<std::int64_t> shp) { return Tensor(std::move(shp)); }

  static Tensor full(std::vector<std::int64_t> shp, double value) {
    Tensor t(std::move(shp));
    for (auto& v : t.data) v = value;
    return t;
  }

  static Tensor from_vector(std::vector<double> values) {
    Tensor t;
    t.shape = {static_cast<std::int64_t>(values.size())};
    t.data = std::move(values);
    return t;
  }

  static Tensor gaussian(std::vector<std::int64_t> shp, Rng& rng, double stddev = 1.0) {
    Tensor t(std::move(shp));
    for (auto& v : t.data) v = stddev * rng.normal();
    return t;
  }

  std::int64_t numel() const { return static_cast<std::int64_t>(data.size()); }
  std::int64_t rank() const { return static_cast<std::int64_t>(shape.size()); }

  double& operator[](std::int64_t i) { return data[static_cast<std::size_t>(i)]; }
  double operator[](std::int64_t i) const { return data[static_cast<std::size_t>(i)]; }

  // Matrix accessor, shape (R, C).
  double& at2(std::int64_t i, std::int64_t j) {
    return data[static_cast<std::size_t>(i * shape[1] + j)];
  }
  double at2(std::int64_t i, std::int64_t j) const {
    return data[static_cast<std::size_t>(i * shape[1] + j)];
  }

  // Rank-3 accessor, shape (D0, D1, D2).
  double& at3(std::int64_t i, std::int64_t j, std::int64_t k) {
    return data[static_cast<std::size_t>((i * shape[1] + j) * shape[2] + k)];
  }
  double at3(std::int64_t i, std::int64_t j, std::int64_t k) const {
    return data[static_cast<std::size_t>((i * shape[1] + j) * shape[2] + k)];
  }

  bool same_shape(const Tensor& other) const { return shape == other.shape; }

  Tensor reshaped(std::vector<std::int64_t> new_shape) const {
    check(numel_of(new_shape) == numel(), "reshape: element count mismatch");
    Tensor t;
    t.shape = std::move(new_shape);
    t.data = data;
    return t;
  }

  bool all_finite() const {
    for (double v : data) {
      if (!std::isfinite(v)) return false;
    }
    return true;
  }

  std::string shape_str() const {
    std::ostringstream os;
    os << "(";
    for (std::size_t i = 0; i < shape.size(); ++i) {
      if (i) os << ",";
      os << shape[i];
    }
    os << ")";
    return os.str();
  }
};

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* where) {
  if (!a.same_shape(b)) {
    throw ValidationError(std::string(where) + ": shape mismatch " + a.shape_str() + " vs " +
                          b.shape_str());
  }
}

// C = A(MxK) * B(KxN)
inline Tensor matmul(const Tensor& a, const Tensor& b) {
  check(a.rank() == 2 && b.rank() == 2, "matmul: rank-2 tensors required");
  check(a.shape[1] == b.shape[0], "matmul: inner dimension mismatch");
  const std::int64_t m = a.shape[0], k = a.shape[1], n = b.shape[1];
  Tensor c({m, n});
  for (std::int64_t i = 0; i < m; ++i) {
    const double* arow = a.data.data() + i * k;
    double* crow = c.data.data() + i * n;
    for (std::int64_t p = 0; p < k; ++p) {
      const double av = arow[p];
      if (av == 0.0) continue;
      const double* brow = b.data.data() + p * n;
      for (std::int64_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
  return c;
}

// C = A(MxK) * B(NxK)^T
inline Tensor matmul_bt(const Tensor& a, const Tensor& b) {
  check(a.rank() == 2 && b.rank() == 2, "matmul_bt: rank-2 tensors required");
  check(a.shape[1] == b.shape[1], "matmul_bt: inner dimension mismatch");
  const std::int64_t m = a.shape[0], k = a.shape[1], n = b.shape[0];
  Tensor c({m, n});
  for (std::int64_t i = 0; i < m; ++i) {
    const double* arow = a.data.data() + i * k;
    for (std::int64_t j = 0; j < n; ++j) {
      const double* brow = b.data.data() + j * k;
      double acc = 0.0;
      for (std::int64_t p = 0; p < k; ++p) acc += arow[p] * brow[p];
      c.at2(i, j) = acc;
    }
  }
  return c;
}

// C = A(KxM)^T * B(KxN)
inline Tensor matmul_at(const Tensor& a, const Tensor& b) {
  check(a.rank() == 2 && b.rank() == 2, "matmul_at: rank-2 tensors required");
  check(a.shape[0] == b.shape[0], "matmul_at: inner dimension mismatch");
  const std::int64_t k = a.shape[0], m = a.shape[1], n = b.shape[1];
  Tensor c({m, n});
  for (std::int64_t p = 0; p < k; ++p) {
    const double* arow = a.data.data() + p * m;
    const double* brow = b.data.data() + p * n;
    for (std::int64_t i = 0; i < m; ++i) {
      const double av = arow[i];
      if (av == 0.0) continue;
      double* crow = c.data.data() + i * n;
      for (std::int64_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
  return c;
}

inline void add_inplace(Tensor& a, const Tensor& b, double scale = 1.0) {
  require_same_shape(a, b, "add_inplace");
  for (std::size_t i = 0; i < a.data.size(); ++i) a.data[i] += scale * b.data[i];
}

inline void scale_inplace(Tensor& a, double s) {
  for (auto& v : a.data) v *= s;
}

inline double dot(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "dot");
  double acc = 0.0;
  for (std::size_t i = 0; i < a.data.size(); ++i) acc += a.data[i] * b.data[i];
  return acc;
}

inline double l2_norm(const Tensor& a) { return std::sqrt(dot(a, a)); }

inline double max_abs_diff(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "max_abs_diff");
  double m = 0.0;
  for (std::size_t i = 0; i < a.data.size(); ++i) {
    m = std::max(m, std::abs(a.data[i] - b.data[i]));
  }
  return m;
}

}  // namespace voxstreams
