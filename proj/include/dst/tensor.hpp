// Dense row-major double tensor. Value type shared by every network,
// loss and attack in the library; autodiff lives in autodiff.hpp.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace dst {

using Shape = std::vector<int64_t>;

inline int64_t shape_numel(const Shape& s) {
  int64_t n = 1;
  for (int64_t e : s) n *= e;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "[";
  for (size_t i = 0; i < s.size(); ++i) os << (i ? ", " : "") << s[i];
  os << "]";
  return os.str();
}

struct Tensor {
  Shape shape;
  std::vector<double> data;

  Tensor() = default;
  explicit Tensor(Shape s, double fill = 0.0)
      : shape(std::move(s)), data(static_cast<size_t>(shape_numel(shape)), fill) {
    for (int64_t e : shape)
      if (e <= 0) throw std::invalid_argument("tensor extent must be positive, got " + shape_str(shape));
  }
  Tensor(Shape s, std::vector<double> d) : shape(std::move(s)), data(std::move(d)) {
    if (static_cast<int64_t>(data.size()) != shape_numel(shape))
      throw std::invalid_argument("tensor data size " + std::to_string(data.size()) +
                                  " does not match shape " + shape_str(shape));
  }

  static Tensor zeros(Shape s) { return Tensor(std::move(s), 0.0); }
  static Tensor ones(Shape s) { return Tensor(std::move(s), 1.0); }
  static Tensor full(Shape s, double v) { return Tensor(std::move(s), v); }
  static Tensor scalar(double v) { return Tensor({1}, std::vector<double>{v}); }
  // 2-D convenience for tests and small fixtures
  static Tensor matrix(int64_t rows, int64_t cols, std::initializer_list<double> v) {
    return Tensor({rows, cols}, std::vector<double>(v));
  }
  static Tensor vec(std::initializer_list<double> v) {
    return Tensor({static_cast<int64_t>(v.size())}, std::vector<double>(v));
  }

  int64_t numel() const { return static_cast<int64_t>(data.size()); }
  int64_t dim(size_t i) const { return shape.at(i); }
  size_t rank() const { return shape.size(); }

  double& operator[](int64_t i) { return data[static_cast<size_t>(i)]; }
  double operator[](int64_t i) const { return data[static_cast<size_t>(i)]; }

  double& at2(int64_t i, int64_t j) { return data[static_cast<size_t>(i * shape[1] + j)]; }
  double at2(int64_t i, int64_t j) const { return data[static_cast<size_t>(i * shape[1] + j)]; }

  // (b, c, h, w) indexing for feature maps
  double& at4(int64_t b, int64_t c, int64_t h, int64_t w) {
    return data[static_cast<size_t>(((b * shape[1] + c) * shape[2] + h) * shape[3] + w)];
  }
  double at4(int64_t b, int64_t c, int64_t h, int64_t w) const {
    return data[static_cast<size_t>(((b * shape[1] + c) * shape[2] + h) * shape[3] + w)];
  }

  bool same_shape(const Tensor& o) const { return shape == o.shape; }

  Tensor reshaped(Shape s) const {
    if (shape_numel(s) != numel())
      throw std::invalid_argument("reshape from " + shape_str(shape) + " to " + shape_str(s) +
                                  " changes element count");
    return Tensor(std::move(s), data);
  }

  bool all_finite() const {
    for (double v : data)
      if (!std::isfinite(v)) return false;
    return true;
  }

  double max_abs() const {
    double m = 0.0;
    for (double v : data) m = std::max(m, std::abs(v));
    return m;
  }
};

[[noreturn]] inline void fail_shape(const std::string& op, const Tensor& a, const Tensor& b) {
  throw std::invalid_argument("shape mismatch in " + op + ": " + shape_str(a.shape) + " vs " +
                              shape_str(b.shape));
}

[[noreturn]] inline void fail_shape(const std::string& op, const Tensor& a, const std::string& expect) {
  throw std::invalid_argument("shape mismatch in " + op + ": got " + shape_str(a.shape) + ", expected " +
                              expect);
}

// Row argmax with lowest-index tie-breaking.
inline int64_t argmax_row(const Tensor& t, int64_t row) {
  int64_t k = t.shape.back();
  const double* p = t.data.data() + row * k;
  int64_t best = 0;
  for (int64_t j = 1; j < k; ++j)
    if (p[j] > p[best]) best = j;
  return best;
}

inline std::vector<int64_t> argmax_rows(const Tensor& t) {
  int64_t rows = t.numel() / t.shape.back();
  std::vector<int64_t> out(static_cast<size_t>(rows));
  for (int64_t i = 0; i < rows; ++i) out[static_cast<size_t>(i)] = argmax_row(t, i);
  return out;
}

// FNV-1a over the raw bytes; used for parameter-immutability checks and
// config fingerprints.
inline uint64_t fnv1a(const void* ptr, size_t bytes, uint64_t h = 1469598103934665603ull) {
  const unsigned char* p = static_cast<const unsigned char*>(ptr);
  for (size_t i = 0; i < bytes; ++i) {
    h ^= p[i];
    h *= 1099511628211ull;
  }
  return h;
}

inline uint64_t tensor_hash(const Tensor& t, uint64_t h = 1469598103934665603ull) {
  h = fnv1a(t.shape.data(), t.shape.size() * sizeof(int64_t), h);
  return fnv1a(t.data.data(), t.data.size() * sizeof(double), h);
}

}  // namespace dst
