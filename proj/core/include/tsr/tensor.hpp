#pragma once

#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "tsr/error.hpp"

namespace tsr {

// Computation scalar width policy. Standard runs everything in float;
// HighPrecisionCheck is the double-width mode the gradient checks use.
enum class Precision { Standard, HighPrecisionCheck };

struct Shape {
  int n = 0;  // batch
  int c = 0;  // channels
  int h = 0;  // rows
  int w = 0;  // columns

  std::size_t count() const {
    return std::size_t(n) * std::size_t(c) * std::size_t(h) * std::size_t(w);
  }
  bool operator==(const Shape&) const = default;
  std::string str() const;
};

// Dense 4-D array in (batch, channels, height, width) order, row-major with
// width contiguous. Value semantics: ops return new tensors, inputs are never
// modified.
template <typename T>
class TensorT {
 public:
  TensorT() = default;
  explicit TensorT(Shape shape) : shape_(shape) {
    validate(shape);
    data_.assign(shape.count(), T(0));
  }
  TensorT(int n, int c, int h, int w) : TensorT(Shape{n, c, h, w}) {}

  static void validate(Shape s) {
    if (s.n < 1 || s.c < 1 || s.h < 1 || s.w < 1)
      throw ShapeError("tensor shape must have all dimensions >= 1, got " + s.str());
  }

  const Shape& shape() const { return shape_; }
  int n() const { return shape_.n; }
  int c() const { return shape_.c; }
  int h() const { return shape_.h; }
  int w() const { return shape_.w; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  T* data() { return data_.data(); }
  const T* data() const { return data_.data(); }

  T& operator[](std::size_t i) { return data_[i]; }
  const T& operator[](std::size_t i) const { return data_[i]; }

  std::size_t index(int b, int ch, int y, int x) const {
    return ((std::size_t(b) * shape_.c + ch) * shape_.h + y) * shape_.w + x;
  }
  T& at(int b, int ch, int y, int x) { return data_[index(b, ch, y, x)]; }
  const T& at(int b, int ch, int y, int x) const { return data_[index(b, ch, y, x)]; }

  // Pointer to the (b, ch) plane, h*w contiguous values.
  T* plane(int b, int ch) { return data_.data() + (std::size_t(b) * shape_.c + ch) * plane_size(); }
  const T* plane(int b, int ch) const {
    return data_.data() + (std::size_t(b) * shape_.c + ch) * plane_size();
  }
  std::size_t plane_size() const { return std::size_t(shape_.h) * shape_.w; }

  void fill(T v) { data_.assign(data_.size(), v); }

  TensorT reshape(Shape s) const {
    validate(s);
    if (s.count() != size())
      throw ShapeError("reshape " + shape_.str() + " -> " + s.str() + " changes element count");
    TensorT out = *this;
    out.shape_ = s;
    return out;
  }

  template <typename U>
  TensorT<U> cast() const {
    TensorT<U> out(shape_);
    for (std::size_t i = 0; i < data_.size(); ++i) out[i] = static_cast<U>(data_[i]);
    return out;
  }

  bool operator==(const TensorT&) const = default;

 private:
  Shape shape_{};
  std::vector<T> data_;
};

using Tensor = TensorT<float>;
using TensorD = TensorT<double>;

template <Precision P>
using scalar_t = std::conditional_t<P == Precision::HighPrecisionCheck, double, float>;

// -- constructors -----------------------------------------------------------

template <typename T = float>
TensorT<T> zeros(Shape shape) {
  return TensorT<T>(shape);
}

// I.i.d. normal samples, deterministic for a fixed generator state.
template <typename T = float>
TensorT<T> gaussian_init(Shape shape, double mean, double stddev, std::mt19937& rng) {
  if (!(stddev > 0)) throw Error("gaussian_init requires stddev > 0");
  TensorT<T> out(shape);
  std::normal_distribution<double> dist(mean, stddev);
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = static_cast<T>(dist(rng));
  return out;
}

template <typename T = float>
TensorT<T> gaussian_init(Shape shape, double mean, double stddev, std::uint64_t seed) {
  std::mt19937 rng(static_cast<std::mt19937::result_type>(seed));
  return gaussian_init<T>(shape, mean, stddev, rng);
}

// -- elementwise ops --------------------------------------------------------

template <typename T>
TensorT<T> add(const TensorT<T>& a, const TensorT<T>& b) {
  if (a.shape() != b.shape())
    throw ShapeError("add: shape mismatch " + a.shape().str() + " vs " + b.shape().str());
  TensorT<T> out = a;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += b[i];
  return out;
}

template <typename T>
TensorT<T> sub(const TensorT<T>& a, const TensorT<T>& b) {
  if (a.shape() != b.shape())
    throw ShapeError("sub: shape mismatch " + a.shape().str() + " vs " + b.shape().str());
  TensorT<T> out = a;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= b[i];
  return out;
}

template <typename T>
TensorT<T> mul_scalar(const TensorT<T>& a, T s) {
  TensorT<T> out = a;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= s;
  return out;
}

// max(x, 0) per element; the ReLU kernel.
template <typename T>
TensorT<T> max_with_zero(const TensorT<T>& a) {
  TensorT<T> out = a;
  for (std::size_t i = 0; i < out.size(); ++i)
    if (out[i] < T(0)) out[i] = T(0);
  return out;
}

template <typename T>
bool all_finite(const TensorT<T>& a) {
  for (std::size_t i = 0; i < a.size(); ++i)
    if (!std::isfinite(double(a[i]))) return false;
  return true;
}

// -- binary snapshot format --------------------------------------------------
// Magic "TSR1", little-endian u32 rank (always 4), u32 dims, f32 payload.
// Round-trips bit exactly.

void write_tensor(std::ostream& os, const Tensor& t);
Tensor read_tensor(std::istream& is);
void save_tensor(const std::string& path, const Tensor& t);
Tensor load_tensor(const std::string& path);

}  // namespace tsr
