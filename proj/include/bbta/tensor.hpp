#pragma once

#include <cmath>
#include <cstddef>
#include <initializer_list>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace bbta {

/// Dense n-dimensional array of doubles, row-major.
struct Tensor {
  std::vector<std::size_t> shape;
  std::vector<double> data;

  Tensor() = default;

  explicit Tensor(std::vector<std::size_t> s) : shape(std::move(s)) {
    data.assign(numel_of(shape), 0.0);
  }

  Tensor(std::vector<std::size_t> s, std::vector<double> d)
      : shape(std::move(s)), data(std::move(d)) {
    if (numel_of(shape) != data.size())
      throw std::invalid_argument("tensor: shape " + shape_str(shape) + " expects " +
                                  std::to_string(numel_of(shape)) + " values, got " +
                                  std::to_string(data.size()));
  }

  static std::size_t numel_of(const std::vector<std::size_t>& s) {
    std::size_t n = 1;
    for (std::size_t d : s) n *= d;
    return n;
  }

  static std::string shape_str(const std::vector<std::size_t>& s) {
    std::ostringstream os;
    os << "(";
    for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
    os << ")";
    return os.str();
  }

  static Tensor zeros(std::vector<std::size_t> s) { return Tensor(std::move(s)); }

  static Tensor full(std::vector<std::size_t> s, double v) {
    Tensor t(std::move(s));
    t.data.assign(t.data.size(), v);
    return t;
  }

  std::size_t numel() const { return data.size(); }
  std::size_t rank() const { return shape.size(); }
  std::size_t dim(std::size_t i) const { return shape.at(i); }

  double& operator[](std::size_t i) { return data[i]; }
  double operator[](std::size_t i) const { return data[i]; }

  /// 4-d accessor for (N,C,H,W) layouts; no bounds checks in release.
  double& at4(std::size_t n, std::size_t c, std::size_t h, std::size_t w) {
    return data[((n * shape[1] + c) * shape[2] + h) * shape[3] + w];
  }
  double at4(std::size_t n, std::size_t c, std::size_t h, std::size_t w) const {
    return data[((n * shape[1] + c) * shape[2] + h) * shape[3] + w];
  }

  double& at2(std::size_t r, std::size_t c) { return data[r * shape[1] + c]; }
  double at2(std::size_t r, std::size_t c) const { return data[r * shape[1] + c]; }

  bool same_shape(const Tensor& o) const { return shape == o.shape; }

  bool all_finite() const {
    for (double v : data)
      if (!std::isfinite(v)) return false;
    return true;
  }

  /// Copies rows (slices along dim 0) given by `rows` into a new tensor.
  Tensor gather_rows(const std::vector<std::size_t>& rows) const {
    if (shape.empty()) throw std::invalid_argument("gather_rows: rank-0 tensor");
    const std::size_t stride = numel() / shape[0];
    std::vector<std::size_t> s = shape;
    s[0] = rows.size();
    Tensor out(std::move(s));
    for (std::size_t i = 0; i < rows.size(); ++i) {
      if (rows[i] >= shape[0]) throw std::out_of_range("gather_rows: row out of range");
      std::copy(data.begin() + rows[i] * stride, data.begin() + (rows[i] + 1) * stride,
                out.data.begin() + i * stride);
    }
    return out;
  }

  /// View of one slice along dim 0 as a (1, rest...) tensor, by copy.
  Tensor row(std::size_t i) const { return gather_rows({i}); }
};

inline void check_same_shape(const Tensor& a, const Tensor& b, const char* what) {
  if (!a.same_shape(b))
    throw std::invalid_argument(std::string(what) + ": shape mismatch, expected " +
                                Tensor::shape_str(a.shape) + " got " + Tensor::shape_str(b.shape));
}

inline Tensor operator+(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "tensor add");
  Tensor r = a;
  for (std::size_t i = 0; i < r.data.size(); ++i) r.data[i] += b.data[i];
  return r;
}

inline Tensor operator-(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "tensor sub");
  Tensor r = a;
  for (std::size_t i = 0; i < r.data.size(); ++i) r.data[i] -= b.data[i];
  return r;
}

inline Tensor operator*(double s, const Tensor& a) {
  Tensor r = a;
  for (double& v : r.data) v *= s;
  return r;
}

inline void axpy(double s, const Tensor& x, Tensor& y) {
  check_same_shape(x, y, "axpy");
  for (std::size_t i = 0; i < y.data.size(); ++i) y.data[i] += s * x.data[i];
}

inline double dot(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "dot");
  double s = 0.0;
  for (std::size_t i = 0; i < a.data.size(); ++i) s += a.data[i] * b.data[i];
  return s;
}

inline double norm2(const Tensor& a) { return std::sqrt(dot(a, a)); }

inline double cosine_similarity(const Tensor& a, const Tensor& b) {
  const double na = norm2(a), nb = norm2(b);
  if (na == 0.0 || nb == 0.0) return 0.0;
  return dot(a, b) / (na * nb);
}

}  // namespace bbta
