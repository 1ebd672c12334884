#pragma once

#include <omp.h>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <optional>
#include <span>
#include <vector>

#include "tsr/blas.hpp"
#include "tsr/tensor.hpp"

namespace tsr {

// Layer shape descriptors. Convolution is cross-correlation (no kernel flip);
// output sizes use floor division. Pooling takes kernel <= padded input.

struct ConvSpec {
  int out_channels = 0;
  int kh = 0, kw = 0;
  int stride = 1;
  int pad = 0;
  int dilation = 1;
  bool has_bias = true;

  int eff_kh() const { return (kh - 1) * dilation + 1; }
  int eff_kw() const { return (kw - 1) * dilation + 1; }
};

enum class PoolKind { Max, Avg };

struct PoolSpec {
  PoolKind kind = PoolKind::Max;
  int kernel = 0;
  int stride = 0;
  int pad = 0;  // max pooling only; padded cells never win a window
};

inline int conv_out_dim(int in, int k_eff, int stride, int pad, const char* what) {
  const int span = in + 2 * pad - k_eff;
  if (span < 0)
    throw ShapeError(std::string(what) + ": kernel extent " + std::to_string(k_eff) +
                     " exceeds padded input " + std::to_string(in + 2 * pad));
  return span / stride + 1;
}

inline Shape conv_out_shape(Shape in, const ConvSpec& s) {
  return Shape{in.n, s.out_channels, conv_out_dim(in.h, s.eff_kh(), s.stride, s.pad, "conv"),
               conv_out_dim(in.w, s.eff_kw(), s.stride, s.pad, "conv")};
}

inline Shape pool_out_shape(Shape in, const PoolSpec& s) {
  return Shape{in.n, in.c, conv_out_dim(in.h, s.kernel, s.stride, s.pad, "pool"),
               conv_out_dim(in.w, s.kernel, s.stride, s.pad, "pool")};
}

// -- convolution -------------------------------------------------------------

namespace detail {

// Writes the patch matrix (ic*kh*kw rows, one column per output position).
template <typename T>
void im2col(const T* in, int ic, int h, int w, const ConvSpec& s, int oh, int ow, T* col) {
  const std::size_t ncols = std::size_t(oh) * ow;
  for (int c = 0; c < ic; ++c) {
    for (int ky = 0; ky < s.kh; ++ky) {
      for (int kx = 0; kx < s.kw; ++kx) {
        T* row = col + ((std::size_t(c) * s.kh + ky) * s.kw + kx) * ncols;
        const T* plane = in + std::size_t(c) * h * w;
        for (int y = 0; y < oh; ++y) {
          const int iy = y * s.stride - s.pad + ky * s.dilation;
          T* dst = row + std::size_t(y) * ow;
          if (iy < 0 || iy >= h) {
            std::fill(dst, dst + ow, T(0));
            continue;
          }
          const T* src = plane + std::size_t(iy) * w;
          int x = 0;
          if (s.stride == 1) {
            const int x0 = std::max(0, s.pad - kx * s.dilation);
            const int x1 = std::min(ow, w + s.pad - kx * s.dilation);
            for (; x < x0; ++x) dst[x] = T(0);
            if (x1 > x0) std::memcpy(dst + x0, src + x0 - s.pad + kx * s.dilation,
                                     std::size_t(x1 - x0) * sizeof(T));
            for (x = std::max(x, x1); x < ow; ++x) dst[x] = T(0);
          } else {
            for (; x < ow; ++x) {
              const int ix = x * s.stride - s.pad + kx * s.dilation;
              dst[x] = (ix >= 0 && ix < w) ? src[ix] : T(0);
            }
          }
        }
      }
    }
  }
}

// Gathered variant: only the listed output positions become columns.
template <typename T>
void im2col_at(const T* in, int ic, int h, int w, const ConvSpec& s, int ow,
               std::span<const int> cols, T* col) {
  const std::size_t ncols = cols.size();
  for (int c = 0; c < ic; ++c) {
    const T* plane = in + std::size_t(c) * h * w;
    for (int ky = 0; ky < s.kh; ++ky) {
      for (int kx = 0; kx < s.kw; ++kx) {
        T* row = col + ((std::size_t(c) * s.kh + ky) * s.kw + kx) * ncols;
        for (std::size_t j = 0; j < ncols; ++j) {
          const int y = cols[j] / ow, x = cols[j] % ow;
          const int iy = y * s.stride - s.pad + ky * s.dilation;
          const int ix = x * s.stride - s.pad + kx * s.dilation;
          row[j] = (iy >= 0 && iy < h && ix >= 0 && ix < w) ? plane[std::size_t(iy) * w + ix] : T(0);
        }
      }
    }
  }
}

template <typename T>
void col2im_add(const T* col, int ic, int h, int w, const ConvSpec& s, int oh, int ow, T* in) {
  const std::size_t ncols = std::size_t(oh) * ow;
  for (int c = 0; c < ic; ++c) {
    T* plane = in + std::size_t(c) * h * w;
    for (int ky = 0; ky < s.kh; ++ky) {
      for (int kx = 0; kx < s.kw; ++kx) {
        const T* row = col + ((std::size_t(c) * s.kh + ky) * s.kw + kx) * ncols;
        for (int y = 0; y < oh; ++y) {
          const int iy = y * s.stride - s.pad + ky * s.dilation;
          if (iy < 0 || iy >= h) continue;
          for (int x = 0; x < ow; ++x) {
            const int ix = x * s.stride - s.pad + kx * s.dilation;
            if (ix >= 0 && ix < w) plane[std::size_t(iy) * w + ix] += row[std::size_t(y) * ow + x];
          }
        }
      }
    }
  }
}

template <typename T>
void col2im_add_at(const T* col, int ic, int h, int w, const ConvSpec& s, int ow,
                   std::span<const int> cols, T* in) {
  const std::size_t ncols = cols.size();
  for (int c = 0; c < ic; ++c) {
    T* plane = in + std::size_t(c) * h * w;
    for (int ky = 0; ky < s.kh; ++ky) {
      for (int kx = 0; kx < s.kw; ++kx) {
        const T* row = col + ((std::size_t(c) * s.kh + ky) * s.kw + kx) * ncols;
        for (std::size_t j = 0; j < ncols; ++j) {
          const int y = cols[j] / ow, x = cols[j] % ow;
          const int iy = y * s.stride - s.pad + ky * s.dilation;
          const int ix = x * s.stride - s.pad + kx * s.dilation;
          if (iy >= 0 && iy < h && ix >= 0 && ix < w) plane[std::size_t(iy) * w + ix] += row[j];
        }
      }
    }
  }
}

inline bool is_pointwise(const ConvSpec& s) {
  return s.kh == 1 && s.kw == 1 && s.stride == 1 && s.pad == 0;
}

}  // namespace detail

template <typename T>
void validate_conv(const TensorT<T>& input, const ConvSpec& s, const TensorT<T>& weights,
                   const TensorT<T>& bias) {
  if (s.kh < 1 || s.kw < 1 || s.stride < 1 || s.dilation < 1)
    throw ShapeError("conv spec fields must be >= 1");
  if (weights.n() != s.out_channels || weights.h() != s.kh || weights.w() != s.kw)
    throw ShapeError("conv weights " + weights.shape().str() + " do not match spec");
  if (weights.c() != input.c())
    throw ShapeError("conv input channels " + std::to_string(input.c()) + " != weight channels " +
                     std::to_string(weights.c()));
  if (s.has_bias && (bias.c() != s.out_channels || bias.size() != std::size_t(s.out_channels)))
    throw ShapeError("conv bias shape mismatch");
}

template <typename T>
TensorT<T> conv2d_forward(const TensorT<T>& input, const ConvSpec& s, const TensorT<T>& weights,
                          const TensorT<T>& bias) {
  validate_conv(input, s, weights, bias);
  const Shape os = conv_out_shape(input.shape(), s);
  TensorT<T> out(os);
  const int k = input.c() * s.kh * s.kw;
  const std::size_t ncols = std::size_t(os.h) * os.w;
  const bool pointwise = detail::is_pointwise(s);

  auto run_one = [&](int b, std::vector<T>& scratch) {
    const T* col;
    if (pointwise) {
      col = input.plane(b, 0);
    } else {
      scratch.resize(std::size_t(k) * ncols);
      detail::im2col(input.plane(b, 0), input.c(), input.h(), input.w(), s, os.h, os.w,
                     scratch.data());
      col = scratch.data();
    }
    blasx::gemm_nn<T>(s.out_channels, int(ncols), k, weights.data(), col, out.plane(b, 0), T(0));
    if (s.has_bias) {
      for (int oc = 0; oc < s.out_channels; ++oc) {
        T* plane = out.plane(b, oc);
        const T bv = bias[oc];
        for (std::size_t i = 0; i < ncols; ++i) plane[i] += bv;
      }
    }
  };

  if (input.n() > 1 && !omp_in_parallel()) {
#pragma omp parallel
    {
      std::vector<T> scratch;
#pragma omp for schedule(dynamic)
      for (int b = 0; b < input.n(); ++b) run_one(b, scratch);
    }
  } else {
    std::vector<T> scratch;
    for (int b = 0; b < input.n(); ++b) run_one(b, scratch);
  }
  return out;
}

template <typename T>
struct ConvGrads {
  TensorT<T> input;    // empty when not requested
  TensorT<T> weights;
  TensorT<T> bias;     // empty when the layer has no bias
};

// Backward pass. `active` optionally lists the output spatial positions
// (row-major over oh*ow) that carry nonzero gradient; restricting the patch
// matrices to those columns is what keeps hard-example training cheap. The
// arithmetic per element is identical to the dense path.
template <typename T>
ConvGrads<T> conv2d_backward(const TensorT<T>& input, const ConvSpec& s, const TensorT<T>& weights,
                             const TensorT<T>& grad_out, bool want_grad_input = true,
                             std::span<const int> active = {}) {
  validate_conv(input, s, weights, TensorT<T>());
  const Shape os = conv_out_shape(input.shape(), s);
  if (grad_out.shape() != os)
    throw ShapeError("conv grad_out shape " + grad_out.shape().str() + " != forward output " +
                     os.str());
  if (!active.empty() && input.n() != 1)
    throw ShapeError("sparse conv backward supports batch 1 only");

  const int k = input.c() * s.kh * s.kw;
  const std::size_t ncols = std::size_t(os.h) * os.w;
  const bool pointwise = detail::is_pointwise(s);

  ConvGrads<T> g;
  g.weights = TensorT<T>(weights.shape());
  if (s.has_bias) g.bias = TensorT<T>(Shape{1, s.out_channels, 1, 1});
  if (want_grad_input) g.input = TensorT<T>(input.shape());

  if (s.has_bias) {
    for (int b = 0; b < grad_out.n(); ++b)
      for (int oc = 0; oc < s.out_channels; ++oc) {
        const T* plane = grad_out.plane(b, oc);
        T acc = 0;
        if (active.empty())
          for (std::size_t i = 0; i < ncols; ++i) acc += plane[i];
        else
          for (int p : active) acc += plane[p];
        g.bias[oc] += acc;
      }
  }

  if (!active.empty()) {
    const std::size_t na = active.size();
    // Gather the gradient columns once.
    std::vector<T> go(std::size_t(s.out_channels) * na);
    for (int oc = 0; oc < s.out_channels; ++oc) {
      const T* plane = grad_out.plane(0, oc);
      for (std::size_t j = 0; j < na; ++j) go[oc * na + j] = plane[active[j]];
    }
    std::vector<T> col(std::size_t(k) * na);
    if (pointwise) {
      const T* in = input.plane(0, 0);
      for (int c = 0; c < input.c(); ++c)
        for (std::size_t j = 0; j < na; ++j)
          col[c * na + j] = in[std::size_t(c) * ncols + active[j]];
    } else {
      detail::im2col_at(input.plane(0, 0), input.c(), input.h(), input.w(), s, os.w, active,
                        col.data());
    }
    blasx::gemm_nt<T>(s.out_channels, k, int(na), go.data(), col.data(), g.weights.data(), T(1));
    if (want_grad_input) {
      std::vector<T> colg(std::size_t(k) * na);
      blasx::gemm_tn<T>(k, int(na), s.out_channels, weights.data(), go.data(), colg.data(), T(0));
      if (pointwise) {
        T* gin = g.input.plane(0, 0);
        for (int c = 0; c < input.c(); ++c)
          for (std::size_t j = 0; j < na; ++j)
            gin[std::size_t(c) * ncols + active[j]] += colg[c * na + j];
      } else {
        detail::col2im_add_at(colg.data(), input.c(), input.h(), input.w(), s, os.w, active,
                              g.input.plane(0, 0));
      }
    }
    return g;
  }

  // Dense path. Weight gradients accumulate over the batch in index order.
  std::vector<T> col;
  for (int b = 0; b < input.n(); ++b) {
    const T* colp;
    if (pointwise) {
      colp = input.plane(b, 0);
    } else {
      col.resize(std::size_t(k) * ncols);
      detail::im2col(input.plane(b, 0), input.c(), input.h(), input.w(), s, os.h, os.w, col.data());
      colp = col.data();
    }
    blasx::gemm_nt<T>(s.out_channels, k, int(ncols), grad_out.plane(b, 0), colp, g.weights.data(),
                      T(1));
    if (want_grad_input) {
      std::vector<T> colg(std::size_t(k) * ncols);
      blasx::gemm_tn<T>(k, int(ncols), s.out_channels, weights.data(), grad_out.plane(b, 0),
                        colg.data(), T(0));
      if (pointwise) {
        T* gin = g.input.plane(b, 0);
        const T* src = colg.data();
        for (std::size_t i = 0; i < std::size_t(k) * ncols; ++i) gin[i] += src[i];
      } else {
        detail::col2im_add(colg.data(), input.c(), input.h(), input.w(), s, os.h, os.w,
                           g.input.plane(b, 0));
      }
    }
  }
  return g;
}

// -- pooling ------------------------------------------------------------------

template <typename T>
struct PoolOut {
  TensorT<T> out;
  std::vector<std::int32_t> argmax;  // winner input index per output element (max pooling)
};

template <typename T>
PoolOut<T> pool_forward(const TensorT<T>& input, const PoolSpec& s) {
  if (s.kernel < 1 || s.stride < 1) throw ShapeError("pool spec fields must be >= 1");
  if (s.pad > 0 && s.kind == PoolKind::Avg) throw ShapeError("padded average pooling unsupported");
  const Shape os = pool_out_shape(input.shape(), s);
  PoolOut<T> r;
  r.out = TensorT<T>(os);
  if (s.kind == PoolKind::Max) r.argmax.assign(r.out.size(), -1);
  const std::size_t planes = std::size_t(input.n()) * input.c();

#pragma omp parallel for schedule(static) if (planes > 8 && !omp_in_parallel())
  for (std::ptrdiff_t pc = 0; pc < std::ptrdiff_t(planes); ++pc) {
    const T* in = input.data() + pc * input.plane_size();
    T* out = r.out.data() + pc * r.out.plane_size();
    std::int32_t* am = s.kind == PoolKind::Max ? r.argmax.data() + pc * r.out.plane_size() : nullptr;
    for (int y = 0; y < os.h; ++y) {
      for (int x = 0; x < os.w; ++x) {
        const int y0 = y * s.stride - s.pad, x0 = x * s.stride - s.pad;
        if (s.kind == PoolKind::Max) {
          T best = -std::numeric_limits<T>::infinity();
          std::int32_t best_i = -1;
          for (int ky = std::max(0, -y0); ky < s.kernel; ++ky) {
            const int iy = y0 + ky;
            if (iy >= input.h()) break;
            for (int kx = std::max(0, -x0); kx < s.kernel; ++kx) {
              const int ix = x0 + kx;
              if (ix >= input.w()) break;
              const T v = in[std::size_t(iy) * input.w() + ix];
              if (v > best) {  // ties keep the first (lowest) index
                best = v;
                best_i = std::int32_t(iy * input.w() + ix);
              }
            }
          }
          out[std::size_t(y) * os.w + x] = best;
          am[std::size_t(y) * os.w + x] = best_i;
        } else {
          T acc = 0;
          for (int ky = 0; ky < s.kernel; ++ky)
            for (int kx = 0; kx < s.kernel; ++kx)
              acc += in[std::size_t(y0 + ky) * input.w() + (x0 + kx)];
          out[std::size_t(y) * os.w + x] = acc / T(s.kernel * s.kernel);
        }
      }
    }
  }
  return r;
}

template <typename T>
TensorT<T> pool_backward(const PoolSpec& s, Shape in_shape,
                         const std::vector<std::int32_t>& argmax, const TensorT<T>& grad_out) {
  if (grad_out.shape() != pool_out_shape(in_shape, s)) throw ShapeError("pool grad_out shape mismatch");
  if (s.kind == PoolKind::Max && argmax.size() != grad_out.size())
    throw ShapeError("pool backward missing argmax record");
  TensorT<T> gin(in_shape);
  const std::size_t planes = std::size_t(in_shape.n) * in_shape.c;
  const Shape os = grad_out.shape();

#pragma omp parallel for schedule(static) if (planes > 8 && !omp_in_parallel())
  for (std::ptrdiff_t pc = 0; pc < std::ptrdiff_t(planes); ++pc) {
    T* gi = gin.data() + pc * gin.plane_size();
    const T* go = grad_out.data() + pc * grad_out.plane_size();
    if (s.kind == PoolKind::Max) {
      const std::int32_t* am = argmax.data() + pc * grad_out.plane_size();
      for (std::size_t i = 0; i < grad_out.plane_size(); ++i)
        if (am[i] >= 0) gi[am[i]] += go[i];
    } else {
      const T inv = T(1) / T(s.kernel * s.kernel);
      for (int y = 0; y < os.h; ++y)
        for (int x = 0; x < os.w; ++x) {
          const T v = go[std::size_t(y) * os.w + x] * inv;
          for (int ky = 0; ky < s.kernel; ++ky)
            for (int kx = 0; kx < s.kernel; ++kx)
              gi[std::size_t(y * s.stride + ky) * in_shape.w + (x * s.stride + kx)] += v;
        }
    }
  }
  return gin;
}

// Max pool to a fixed square output size; used to align fusion taps.
inline PoolSpec adaptive_pool_spec(Shape in, int target) {
  if (target < 1 || in.h % target != 0 || in.w % target != 0 || in.h != in.w)
    throw ShapeError("adaptive pool requires square input divisible by target " +
                     std::to_string(target) + ", got " + in.str());
  const int k = in.h / target;
  return PoolSpec{PoolKind::Max, k, k, 0};
}

// -- relu ---------------------------------------------------------------------

template <typename T>
TensorT<T> relu_forward(const TensorT<T>& x) {
  return max_with_zero(x);
}

template <typename T>
TensorT<T> relu_backward(const TensorT<T>& x, const TensorT<T>& grad_out) {
  if (x.shape() != grad_out.shape()) throw ShapeError("relu grad shape mismatch");
  TensorT<T> gin(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) gin[i] = x[i] > T(0) ? grad_out[i] : T(0);
  return gin;
}

// -- softmax over channels ------------------------------------------------------

template <typename T>
TensorT<T> softmax_channels(const TensorT<T>& x) {
  if (x.c() < 2) throw ShapeError("softmax needs >= 2 channels");
  TensorT<T> out(x.shape());
  const std::size_t hw = x.plane_size();
  for (int b = 0; b < x.n(); ++b) {
    const T* in = x.plane(b, 0);
    T* o = out.plane(b, 0);
    for (std::size_t i = 0; i < hw; ++i) {
      T mx = in[i];
      for (int c = 1; c < x.c(); ++c) mx = std::max(mx, in[c * hw + i]);
      T sum = 0;
      for (int c = 0; c < x.c(); ++c) {
        const T e = std::exp(in[c * hw + i] - mx);
        o[c * hw + i] = e;
        sum += e;
      }
      for (int c = 0; c < x.c(); ++c) o[c * hw + i] /= sum;
    }
  }
  return out;
}

// -- fully connected -------------------------------------------------------------

template <typename T>
TensorT<T> fc_forward(const TensorT<T>& x, const TensorT<T>& weights, const TensorT<T>& bias) {
  const int in_dim = x.c() * x.h() * x.w();
  if (weights.c() != in_dim || weights.h() != 1 || weights.w() != 1)
    throw ShapeError("fc weights " + weights.shape().str() + " do not match flattened input " +
                     std::to_string(in_dim));
  const int out_dim = weights.n();
  TensorT<T> out(Shape{x.n(), out_dim, 1, 1});
  blasx::gemm_nt<T>(x.n(), out_dim, in_dim, x.data(), weights.data(), out.data(), T(0));
  if (!bias.empty()) {
    if (bias.size() != std::size_t(out_dim)) throw ShapeError("fc bias shape mismatch");
    for (int b = 0; b < x.n(); ++b)
      for (int o = 0; o < out_dim; ++o) out[std::size_t(b) * out_dim + o] += bias[o];
  }
  return out;
}

template <typename T>
struct FcGrads {
  TensorT<T> input, weights, bias;
};

template <typename T>
FcGrads<T> fc_backward(const TensorT<T>& x, const TensorT<T>& weights, const TensorT<T>& grad_out,
                       bool want_grad_input = true) {
  const int in_dim = x.c() * x.h() * x.w();
  const int out_dim = weights.n();
  if (grad_out.n() != x.n() || grad_out.c() != out_dim)
    throw ShapeError("fc grad_out shape mismatch");
  FcGrads<T> g;
  g.weights = TensorT<T>(weights.shape());
  g.bias = TensorT<T>(Shape{1, out_dim, 1, 1});
  blasx::gemm_tn<T>(out_dim, in_dim, x.n(), grad_out.data(), x.data(), g.weights.data(), T(0));
  for (int b = 0; b < x.n(); ++b)
    for (int o = 0; o < out_dim; ++o) g.bias[o] += grad_out[std::size_t(b) * out_dim + o];
  if (want_grad_input) {
    g.input = TensorT<T>(x.shape());
    blasx::gemm_nn<T>(x.n(), in_dim, out_dim, grad_out.data(), weights.data(), g.input.data(),
                      T(0));
  }
  return g;
}

// -- channel concatenation ---------------------------------------------------------

template <typename T>
TensorT<T> concat_channels(const std::vector<const TensorT<T>*>& inputs) {
  if (inputs.empty()) throw ShapeError("concat of zero tensors");
  int channels = 0;
  const Shape first = inputs[0]->shape();
  for (const auto* t : inputs) {
    if (t->n() != first.n || t->h() != first.h || t->w() != first.w)
      throw ShapeError("concat inputs must share batch and spatial dims: " + first.str() + " vs " +
                       t->shape().str());
    channels += t->c();
  }
  TensorT<T> out(Shape{first.n, channels, first.h, first.w});
  for (int b = 0; b < first.n; ++b) {
    int co = 0;
    for (const auto* t : inputs) {
      std::memcpy(out.plane(b, co), t->plane(b, 0), t->c() * t->plane_size() * sizeof(T));
      co += t->c();
    }
  }
  return out;
}

template <typename T>
std::vector<TensorT<T>> concat_backward(const std::vector<Shape>& input_shapes,
                                        const TensorT<T>& grad_out) {
  std::vector<TensorT<T>> grads;
  grads.reserve(input_shapes.size());
  int co = 0;
  for (const Shape& s : input_shapes) {
    TensorT<T> g(s);
    for (int b = 0; b < s.n; ++b)
      std::memcpy(g.plane(b, 0), grad_out.plane(b, co), g.c() * g.plane_size() * sizeof(T));
    co += s.c;
    grads.push_back(std::move(g));
  }
  if (co != grad_out.c()) throw ShapeError("concat backward channel total mismatch");
  return grads;
}

// -- global average pooling ----------------------------------------------------------

template <typename T>
TensorT<T> global_avg_pool_forward(const TensorT<T>& x) {
  TensorT<T> out(Shape{x.n(), x.c(), 1, 1});
  const T inv = T(1) / T(x.plane_size());
  for (int b = 0; b < x.n(); ++b)
    for (int c = 0; c < x.c(); ++c) {
      const T* p = x.plane(b, c);
      T acc = 0;
      for (std::size_t i = 0; i < x.plane_size(); ++i) acc += p[i];
      out.at(b, c, 0, 0) = acc * inv;
    }
  return out;
}

template <typename T>
TensorT<T> global_avg_pool_backward(Shape in_shape, const TensorT<T>& grad_out) {
  TensorT<T> gin(in_shape);
  const T inv = T(1) / T(gin.plane_size());
  for (int b = 0; b < in_shape.n; ++b)
    for (int c = 0; c < in_shape.c; ++c) {
      T* p = gin.plane(b, c);
      const T v = grad_out.at(b, c, 0, 0) * inv;
      for (std::size_t i = 0; i < gin.plane_size(); ++i) p[i] = v;
    }
  return gin;
}

// -- masked cross entropy -------------------------------------------------------------

constexpr std::int32_t kIgnoreLabel = -1;

template <typename T>
struct CeResult {
  TensorT<T> loss;         // (n,1,h,w); zero at ignored positions
  TensorT<T> grad_logits;  // (n,c,h,w); softmax-fused (p - onehot), zero at ignored
  int kept = 0;
};

// `labels` is row-major over (n,h,w): class index, or kIgnoreLabel to skip.
// `probs` must already be a per-position distribution (softmax output);
// the returned gradient is with respect to the pre-softmax logits.
template <typename T>
CeResult<T> masked_cross_entropy(const TensorT<T>& probs, const std::vector<std::int32_t>& labels) {
  const std::size_t hw = probs.plane_size();
  if (labels.size() != std::size_t(probs.n()) * hw)
    throw ShapeError("cross entropy: label grid size mismatch");
  CeResult<T> r;
  r.loss = TensorT<T>(Shape{probs.n(), 1, probs.h(), probs.w()});
  r.grad_logits = TensorT<T>(probs.shape());
  for (int b = 0; b < probs.n(); ++b) {
    const T* p = probs.plane(b, 0);
    T* gl = r.grad_logits.plane(b, 0);
    T* lo = r.loss.plane(b, 0);
    for (std::size_t i = 0; i < hw; ++i) {
      const std::int32_t y = labels[std::size_t(b) * hw + i];
      if (y == kIgnoreLabel) continue;
      if (y < 0 || y >= probs.c())
        throw Error("cross entropy: label " + std::to_string(y) + " out of range");
      const T pt = std::max(p[std::size_t(y) * hw + i], T(1e-12));
      lo[i] = -std::log(pt);
      for (int c = 0; c < probs.c(); ++c)
        gl[std::size_t(c) * hw + i] = p[std::size_t(c) * hw + i] - (c == y ? T(1) : T(0));
      ++r.kept;
    }
  }
  return r;
}

// Gradient restricted to selected positions (linear over n*h*w), scaled.
template <typename T>
TensorT<T> cross_entropy_grad_at(const TensorT<T>& probs, const std::vector<std::int32_t>& labels,
                                 std::span<const int> positions, T scale) {
  const std::size_t hw = probs.plane_size();
  TensorT<T> g(probs.shape());
  for (int pos : positions) {
    const int b = int(std::size_t(pos) / hw);
    const std::size_t i = std::size_t(pos) % hw;
    const std::int32_t y = labels[pos];
    if (y == kIgnoreLabel) throw Error("selected position is masked out");
    const T* p = probs.plane(b, 0);
    T* gl = g.plane(b, 0);
    for (int c = 0; c < probs.c(); ++c)
      gl[std::size_t(c) * hw + i] = (p[std::size_t(c) * hw + i] - (c == y ? T(1) : T(0))) * scale;
  }
  return g;
}

// Spatial positions (over h*w, batch 1) with any nonzero channel gradient.
// Returns nullopt when the grid is too dense for the gathered path to pay off.
template <typename T>
std::optional<std::vector<int>> sparse_positions(const TensorT<T>& grad, double max_fraction) {
  if (grad.n() != 1) return std::nullopt;
  const std::size_t hw = grad.plane_size();
  std::vector<int> pos;
  const std::size_t cap = std::size_t(double(hw) * max_fraction);
  for (std::size_t i = 0; i < hw; ++i) {
    for (int c = 0; c < grad.c(); ++c) {
      if (grad[std::size_t(c) * hw + i] != T(0)) {
        pos.push_back(int(i));
        break;
      }
    }
    if (pos.size() > cap) return std::nullopt;
  }
  return pos;
}

}  // namespace tsr
