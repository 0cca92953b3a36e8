#pragma once

// Differentiable primitives recorded on a Tape. Broadcasting is limited to the
// scalar-tensor and bias-add patterns spelled out below.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Core>

#include "cas/error.hpp"
#include "cas/tape.hpp"
#include "cas/tensor.hpp"

namespace cas {

namespace detail {

template <typename T>
using RowMatrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// C[m,n] (+)= op(A) * op(B), all row-major. A is [m,k] (or [k,m] when trans_a).
template <typename T>
void gemm(bool trans_a, bool trans_b, std::size_t m, std::size_t n, std::size_t k, const T* a, const T* b,
          T* c, bool accumulate) {
  using Map = Eigen::Map<const RowMatrix<T>>;
  const auto im = static_cast<Eigen::Index>(m);
  const auto in = static_cast<Eigen::Index>(n);
  const auto ik = static_cast<Eigen::Index>(k);
  Eigen::Map<RowMatrix<T>> out(c, im, in);
  Map lhs(a, trans_a ? ik : im, trans_a ? im : ik);
  Map rhs(b, trans_b ? in : ik, trans_b ? ik : in);
  auto apply = [&](const auto& l, const auto& r) {
    if (accumulate)
      out.noalias() += l * r;
    else
      out.noalias() = l * r;
  };
  if (trans_a && trans_b)
    apply(lhs.transpose(), rhs.transpose());
  else if (trans_a)
    apply(lhs.transpose(), rhs);
  else if (trans_b)
    apply(lhs, rhs.transpose());
  else
    apply(lhs, rhs);
}

inline void require_same_shape(const Shape& a, const Shape& b, const char* op) {
  require(a == b, ErrorCode::shape,
          std::string(op) + ": shape mismatch " + to_string(a) + " vs " + to_string(b));
}

inline void require_rank(const Shape& s, std::size_t rank, const char* op) {
  require(s.size() == rank, ErrorCode::shape,
          std::string(op) + ": expected rank " + std::to_string(rank) + " input, got " + to_string(s));
}

template <typename T, typename Fn>
Var<T> unary(Var<T> x, Fn&& forward, auto&& backward) {
  auto xv = x.value();
  std::vector<T> out(xv.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = forward(xv[i]);
  return x.tape->record(x.shape(), std::move(out), {x},
                        [x, backward](Tape<T>& tape, std::span<const T> g) {
                          auto xv = tape.value(x);
                          auto gx = tape.grad_of(x);
                          for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += g[i] * backward(xv[i]);
                        });
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise

template <std::floating_point T>
Var<T> add(Var<T> a, Var<T> b) {
  detail::require_same_shape(a.shape(), b.shape(), "add");
  auto av = a.value(), bv = b.value();
  std::vector<T> out(av.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] + bv[i];
  return a.tape->record(a.shape(), std::move(out), {a, b}, [a, b](Tape<T>& tape, std::span<const T> g) {
    if (tape.needs_grad(a)) {
      auto ga = tape.grad_of(a);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    }
    if (tape.needs_grad(b)) {
      auto gb = tape.grad_of(b);
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i];
    }
  });
}

template <std::floating_point T>
Var<T> sub(Var<T> a, Var<T> b) {
  detail::require_same_shape(a.shape(), b.shape(), "sub");
  auto av = a.value(), bv = b.value();
  std::vector<T> out(av.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] - bv[i];
  return a.tape->record(a.shape(), std::move(out), {a, b}, [a, b](Tape<T>& tape, std::span<const T> g) {
    if (tape.needs_grad(a)) {
      auto ga = tape.grad_of(a);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    }
    if (tape.needs_grad(b)) {
      auto gb = tape.grad_of(b);
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
    }
  });
}

template <std::floating_point T>
Var<T> mul(Var<T> a, Var<T> b) {
  detail::require_same_shape(a.shape(), b.shape(), "mul");
  auto av = a.value(), bv = b.value();
  std::vector<T> out(av.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * bv[i];
  return a.tape->record(a.shape(), std::move(out), {a, b}, [a, b](Tape<T>& tape, std::span<const T> g) {
    auto av = tape.value(a), bv = tape.value(b);
    if (tape.needs_grad(a)) {
      auto ga = tape.grad_of(a);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bv[i];
    }
    if (tape.needs_grad(b)) {
      auto gb = tape.grad_of(b);
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * av[i];
    }
  });
}

template <std::floating_point T>
Var<T> scale(Var<T> x, T s) {
  return detail::unary(x, [s](T v) { return v * s; }, [s](T) { return s; });
}

template <std::floating_point T>
Var<T> add_scalar(Var<T> x, T s) {
  return detail::unary(x, [s](T v) { return v + s; }, [](T) { return T{1}; });
}

template <std::floating_point T>
Var<T> neg(Var<T> x) {
  return scale(x, T{-1});
}

template <std::floating_point T>
Var<T> log(Var<T> x) {
  return detail::unary(x, [](T v) { return std::log(v); }, [](T v) { return T{1} / v; });
}

template <std::floating_point T>
Var<T> exp(Var<T> x) {
  return detail::unary(x, [](T v) { return std::exp(v); }, [](T v) { return std::exp(v); });
}

/// max(0, x). The subgradient at exactly 0 is 0.
template <std::floating_point T>
Var<T> relu(Var<T> x) {
  return detail::unary(x, [](T v) { return v > T{0} ? v : T{0}; }, [](T v) { return v > T{0} ? T{1} : T{0}; });
}

template <std::floating_point T>
Var<T> operator+(Var<T> a, Var<T> b) { return add(a, b); }
template <std::floating_point T>
Var<T> operator-(Var<T> a, Var<T> b) { return sub(a, b); }
template <std::floating_point T>
Var<T> operator*(Var<T> a, Var<T> b) { return mul(a, b); }
template <std::floating_point T>
Var<T> operator*(T s, Var<T> x) { return scale(x, s); }

// ---------------------------------------------------------------------------
// Reductions

template <std::floating_point T>
Var<T> sum(Var<T> x) {
  T total = 0;
  for (T v : x.value()) total += v;
  return x.tape->record(Shape{}, {total}, {x}, [x](Tape<T>& tape, std::span<const T> g) {
    for (T& gx : tape.grad_of(x)) gx += g[0];
  });
}

template <std::floating_point T>
Var<T> mean(Var<T> x) {
  const T inv = T{1} / static_cast<T>(x.size());
  T total = 0;
  for (T v : x.value()) total += v;
  return x.tape->record(Shape{}, {total * inv}, {x}, [x, inv](Tape<T>& tape, std::span<const T> g) {
    for (T& gx : tape.grad_of(x)) gx += g[0] * inv;
  });
}

/// Maximum over all elements; the gradient goes to the lowest flat index among ties.
template <std::floating_point T>
Var<T> max_reduce(Var<T> x) {
  auto xv = x.value();
  const std::size_t arg = static_cast<std::size_t>(std::max_element(xv.begin(), xv.end()) - xv.begin());
  return x.tape->record(Shape{}, {xv[arg]}, {x}, [x, arg](Tape<T>& tape, std::span<const T> g) {
    tape.grad_of(x)[arg] += g[0];
  });
}

/// Row-wise maximum of a [m,n] matrix -> [m]; ties resolve to the lowest column.
template <std::floating_point T>
Var<T> row_max(Var<T> x) {
  detail::require_rank(x.shape(), 2, "row_max");
  const std::size_t m = x.dim(0), n = x.dim(1);
  auto xv = x.value();
  std::vector<T> out(m);
  std::vector<std::size_t> arg(m);
  for (std::size_t r = 0; r < m; ++r) {
    const T* row = xv.data() + r * n;
    arg[r] = static_cast<std::size_t>(std::max_element(row, row + n) - row);
    out[r] = row[arg[r]];
  }
  return x.tape->record(Shape{m}, std::move(out), {x}, [x, n, arg](Tape<T>& tape, std::span<const T> g) {
    auto gx = tape.grad_of(x);
    for (std::size_t r = 0; r < arg.size(); ++r) gx[r * n + arg[r]] += g[r];
  });
}

// ---------------------------------------------------------------------------
// Linear algebra and shape

template <std::floating_point T>
Var<T> matmul(Var<T> a, Var<T> b) {
  detail::require_rank(a.shape(), 2, "matmul");
  detail::require_rank(b.shape(), 2, "matmul");
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  require(b.dim(0) == k, ErrorCode::shape,
          "matmul: inner dimensions differ " + to_string(a.shape()) + " x " + to_string(b.shape()));
  std::vector<T> out(m * n);
  detail::gemm(false, false, m, n, k, a.value().data(), b.value().data(), out.data(), false);
  return a.tape->record(Shape{m, n}, std::move(out), {a, b}, [a, b, m, n, k](Tape<T>& tape, std::span<const T> g) {
    if (tape.needs_grad(a))
      detail::gemm(false, true, m, k, n, g.data(), tape.value(b).data(), tape.grad_of(a).data(), true);
    if (tape.needs_grad(b))
      detail::gemm(true, false, k, n, m, tape.value(a).data(), g.data(), tape.grad_of(b).data(), true);
  });
}

/// Adds bias[C] along axis 1 of a [N,C] or [N,C,H,W] tensor.
template <std::floating_point T>
Var<T> add_bias(Var<T> x, Var<T> bias) {
  const Shape& s = x.shape();
  require(s.size() == 2 || s.size() == 4, ErrorCode::shape, "add_bias: expected rank 2 or 4 input, got " + to_string(s));
  require(bias.shape() == Shape{s[1]}, ErrorCode::shape,
          "add_bias: bias shape " + to_string(bias.shape()) + " does not match channels of " + to_string(s));
  const std::size_t n = s[0], c = s[1], inner = s.size() == 4 ? s[2] * s[3] : 1;
  auto xv = x.value(), bv = bias.value();
  std::vector<T> out(xv.begin(), xv.end());
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t ch = 0; ch < c; ++ch) {
      T* p = out.data() + (i * c + ch) * inner;
      for (std::size_t j = 0; j < inner; ++j) p[j] += bv[ch];
    }
  return x.tape->record(s, std::move(out), {x, bias}, [x, bias, n, c, inner](Tape<T>& tape, std::span<const T> g) {
    if (tape.needs_grad(x)) {
      auto gx = tape.grad_of(x);
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
    }
    if (tape.needs_grad(bias)) {
      auto gb = tape.grad_of(bias);
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t ch = 0; ch < c; ++ch) {
          const T* p = g.data() + (i * c + ch) * inner;
          T acc = 0;
          for (std::size_t j = 0; j < inner; ++j) acc += p[j];
          gb[ch] += acc;
        }
    }
  });
}

template <std::floating_point T>
Var<T> reshape(Var<T> x, Shape shape) {
  require(numel(shape) == x.size(), ErrorCode::shape,
          "reshape: cannot view " + to_string(x.shape()) + " as " + to_string(shape));
  auto xv = x.value();
  return x.tape->record(std::move(shape), std::vector<T>(xv.begin(), xv.end()), {x},
                        [x](Tape<T>& tape, std::span<const T> g) {
                          auto gx = tape.grad_of(x);
                          for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
                        });
}

/// [N, ...] -> [N, prod(...)]
template <std::floating_point T>
Var<T> flatten(Var<T> x) {
  require(x.shape().size() >= 1, ErrorCode::shape, "flatten: scalar input");
  const std::size_t n = x.dim(0);
  return reshape(x, Shape{n, x.size() / n});
}

// ---------------------------------------------------------------------------
// Convolution and pooling (N x C x H x W)

struct ConvGeometry {
  std::size_t batch, in_channels, height, width;
  std::size_t out_channels, kernel_h, kernel_w;
  std::size_t stride, padding;
  std::size_t out_h, out_w;

  std::size_t patch() const { return in_channels * kernel_h * kernel_w; }
  std::size_t out_area() const { return out_h * out_w; }
};

inline ConvGeometry conv_geometry(const Shape& input, const Shape& kernel, std::size_t stride, std::size_t padding) {
  detail::require_rank(input, 4, "conv2d");
  detail::require_rank(kernel, 4, "conv2d kernel");
  require(stride > 0, ErrorCode::invalid_argument, "conv2d: stride must be positive");
  require(kernel[1] == input[1], ErrorCode::shape,
          "conv2d: kernel expects " + std::to_string(kernel[1]) + " input channels, input has " +
              std::to_string(input[1]));
  const std::size_t ph = input[2] + 2 * padding, pw = input[3] + 2 * padding;
  require(kernel[2] <= ph && kernel[3] <= pw, ErrorCode::shape,
          "conv2d: kernel " + to_string(kernel) + " larger than padded input " + to_string(input));
  require((ph - kernel[2]) % stride == 0 && (pw - kernel[3]) % stride == 0, ErrorCode::shape,
          "conv2d: stride " + std::to_string(stride) + " does not evenly tile padded input " +
              std::to_string(ph) + "x" + std::to_string(pw) + " with kernel " + std::to_string(kernel[2]) + "x" +
              std::to_string(kernel[3]));
  return ConvGeometry{input[0], input[1], input[2], input[3], kernel[0], kernel[2], kernel[3], stride, padding,
                      (ph - kernel[2]) / stride + 1, (pw - kernel[3]) / stride + 1};
}

namespace detail {

/// Output columns [lo, hi) whose input column ow*stride + offset - padding lies inside [0, width).
inline std::pair<std::size_t, std::size_t> valid_range(std::size_t out, std::size_t stride, std::size_t offset,
                                                       std::size_t padding, std::size_t width) {
  std::size_t lo = 0;
  while (lo < out && lo * stride + offset < padding) ++lo;
  std::size_t hi = lo;
  while (hi < out && hi * stride + offset < padding + width) ++hi;
  return {lo, hi};
}

template <typename T>
void im2col(const ConvGeometry& g, const T* image, T* col, std::size_t row_stride) {
  const std::size_t area = g.out_area();
  for (std::size_t c = 0; c < g.in_channels; ++c)
    for (std::size_t ki = 0; ki < g.kernel_h; ++ki) {
      const auto [h_lo, h_hi] = valid_range(g.out_h, g.stride, ki, g.padding, g.height);
      for (std::size_t kj = 0; kj < g.kernel_w; ++kj) {
        const auto [w_lo, w_hi] = valid_range(g.out_w, g.stride, kj, g.padding, g.width);
        T* row = col + ((c * g.kernel_h + ki) * g.kernel_w + kj) * row_stride;
        std::fill(row, row + area, T{0});
        for (std::size_t oh = h_lo; oh < h_hi; ++oh) {
          const T* src = image + (c * g.height + oh * g.stride + ki - g.padding) * g.width + kj - g.padding;
          T* dst = row + oh * g.out_w;
          for (std::size_t ow = w_lo; ow < w_hi; ++ow) dst[ow] = src[ow * g.stride];
        }
      }
    }
}

template <typename T>
void col2im_add(const ConvGeometry& g, const T* col, std::size_t row_stride, T* image) {
  for (std::size_t c = 0; c < g.in_channels; ++c)
    for (std::size_t ki = 0; ki < g.kernel_h; ++ki) {
      const auto [h_lo, h_hi] = valid_range(g.out_h, g.stride, ki, g.padding, g.height);
      for (std::size_t kj = 0; kj < g.kernel_w; ++kj) {
        const auto [w_lo, w_hi] = valid_range(g.out_w, g.stride, kj, g.padding, g.width);
        const T* row = col + ((c * g.kernel_h + ki) * g.kernel_w + kj) * row_stride;
        for (std::size_t oh = h_lo; oh < h_hi; ++oh) {
          T* dst = image + (c * g.height + oh * g.stride + ki - g.padding) * g.width + kj - g.padding;
          const T* src = row + oh * g.out_w;
          for (std::size_t ow = w_lo; ow < w_hi; ++ow) dst[ow * g.stride] += src[ow];
        }
      }
    }
}

}  // namespace detail

namespace detail {

/// Examples per GEMM: enough to give each product ~256 output columns while
/// keeping the patch matrix cache-sized.
inline std::size_t conv_chunk(const ConvGeometry& g) {
  return std::clamp<std::size_t>((256 + g.out_area() - 1) / g.out_area(), 1, g.batch);
}

}  // namespace detail

/// Cross-correlation of input[N,Cin,H,W] with kernel[Cout,Cin,kh,kw] plus bias[Cout].
/// Examples are lowered in chunks to a [Cin*kh*kw, chunk*H'*W'] patch matrix,
/// one GEMM per chunk in each direction.
template <std::floating_point T>
Var<T> conv2d(Var<T> input, Var<T> kernel, Var<T> bias, std::size_t stride, std::size_t padding) {
  const ConvGeometry g = conv_geometry(input.shape(), kernel.shape(), stride, padding);
  require(bias.shape() == Shape{g.out_channels}, ErrorCode::shape,
          "conv2d: bias shape " + to_string(bias.shape()) + " does not match " + std::to_string(g.out_channels) +
              " output channels");
  const std::size_t patch = g.patch(), area = g.out_area(), chunk = detail::conv_chunk(g);
  const std::size_t in_stride = g.in_channels * g.height * g.width;
  const bool keep_cols = input.tape->needs_grad(kernel);
  auto xv = input.value(), wv = kernel.value(), bv = bias.value();
  std::vector<T> out(g.batch * g.out_channels * area);
  std::vector<T> cols(keep_cols ? patch * g.batch * area : patch * chunk * area);
  std::vector<T> product(g.out_channels * chunk * area);
  for (std::size_t first = 0; first < g.batch; first += chunk) {
    const std::size_t count = std::min(chunk, g.batch - first), width = count * area;
    T* col = cols.data() + (keep_cols ? patch * first * area : 0);
    for (std::size_t i = 0; i < count; ++i)
      detail::im2col(g, xv.data() + (first + i) * in_stride, col + i * area, width);
    detail::gemm(false, false, g.out_channels, width, patch, wv.data(), col, product.data(), false);
    for (std::size_t i = 0; i < count; ++i)
      for (std::size_t c = 0; c < g.out_channels; ++c) {
        const T* src = product.data() + c * width + i * area;
        T* dst = out.data() + ((first + i) * g.out_channels + c) * area;
        for (std::size_t j = 0; j < area; ++j) dst[j] = src[j] + bv[c];
      }
  }
  if (!keep_cols) cols = {};
  Shape out_shape{g.batch, g.out_channels, g.out_h, g.out_w};
  return input.tape->record(
      std::move(out_shape), std::move(out), {input, kernel, bias},
      [input, kernel, bias, g, chunk, cols = std::move(cols)](Tape<T>& tape, std::span<const T> grad) {
        const std::size_t patch = g.patch(), area = g.out_area();
        const std::size_t in_stride = g.in_channels * g.height * g.width;
        const bool want_x = tape.needs_grad(input), want_w = tape.needs_grad(kernel), want_b = tape.needs_grad(bias);
        auto wv = tape.value(kernel);
        std::vector<T> g_mat(g.out_channels * chunk * area);
        std::vector<T> dcols(want_x ? patch * chunk * area : 0);
        for (std::size_t first = 0; first < g.batch; first += chunk) {
          const std::size_t count = std::min(chunk, g.batch - first), width = count * area;
          // N x Cout x area -> Cout x (count * area), matching the patch matrix columns.
          for (std::size_t i = 0; i < count; ++i)
            for (std::size_t c = 0; c < g.out_channels; ++c)
              std::copy_n(grad.data() + ((first + i) * g.out_channels + c) * area, area,
                          g_mat.data() + c * width + i * area);
          if (want_w)
            detail::gemm(false, true, g.out_channels, patch, width, g_mat.data(), cols.data() + patch * first * area,
                         tape.grad_of(kernel).data(), true);
          if (want_b) {
            auto gb = tape.grad_of(bias);
            for (std::size_t c = 0; c < g.out_channels; ++c) {
              T acc = 0;
              for (std::size_t j = 0; j < width; ++j) acc += g_mat[c * width + j];
              gb[c] += acc;
            }
          }
          if (want_x) {
            detail::gemm(true, false, patch, width, g.out_channels, wv.data(), g_mat.data(), dcols.data(), false);
            auto gx = tape.grad_of(input);
            for (std::size_t i = 0; i < count; ++i)
              detail::col2im_add(g, dcols.data() + i * area, width, gx.data() + (first + i) * in_stride);
          }
        }
      });
}

/// 2x2 max pooling with stride 2. Odd trailing rows/columns are dropped; ties
/// route the gradient to the first element in row-major window order.
template <std::floating_point T>
Var<T> maxpool2d(Var<T> x) {
  detail::require_rank(x.shape(), 4, "maxpool2d");
  const std::size_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  require(h >= 2 && w >= 2, ErrorCode::shape, "maxpool2d: spatial size below window in " + to_string(x.shape()));
  const std::size_t oh = h / 2, ow = w / 2;
  auto xv = x.value();
  std::vector<T> out(n * c * oh * ow);
  std::vector<std::size_t> arg(out.size());
  std::size_t o = 0;
  for (std::size_t plane = 0; plane < n * c; ++plane) {
    const std::size_t base = plane * h * w;
    for (std::size_t i = 0; i < oh; ++i)
      for (std::size_t j = 0; j < ow; ++j, ++o) {
        std::size_t best = base + (2 * i) * w + 2 * j;
        for (std::size_t di = 0; di < 2; ++di)
          for (std::size_t dj = 0; dj < 2; ++dj) {
            const std::size_t idx = base + (2 * i + di) * w + 2 * j + dj;
            if (xv[idx] > xv[best]) best = idx;
          }
        arg[o] = best;
        out[o] = xv[best];
      }
  }
  return x.tape->record(Shape{n, c, oh, ow}, std::move(out), {x}, [x, arg = std::move(arg)](Tape<T>& tape, std::span<const T> g) {
    auto gx = tape.grad_of(x);
    for (std::size_t i = 0; i < arg.size(); ++i) gx[arg[i]] += g[i];
  });
}

/// Global average pooling: [N,K,H,W] -> [N,K], the spatial mean per channel.
template <std::floating_point T>
Var<T> gap(Var<T> x) {
  require(x.shape().size() == 4, ErrorCode::shape, "gap: expected a 4-D activation, got " + to_string(x.shape()));
  const std::size_t planes = x.dim(0) * x.dim(1), area = x.dim(2) * x.dim(3);
  const T inv = T{1} / static_cast<T>(area);
  auto xv = x.value();
  std::vector<T> out(planes);
  for (std::size_t p = 0; p < planes; ++p) {
    T acc = 0;
    for (std::size_t j = 0; j < area; ++j) acc += xv[p * area + j];
    out[p] = acc * inv;
  }
  return x.tape->record(Shape{x.dim(0), x.dim(1)}, std::move(out), {x},
                        [x, area, inv](Tape<T>& tape, std::span<const T> g) {
                          auto gx = tape.grad_of(x);
                          for (std::size_t p = 0; p < g.size(); ++p) {
                            const T v = g[p] * inv;
                            for (std::size_t j = 0; j < area; ++j) gx[p * area + j] += v;
                          }
                        });
}

/// Gathers columns of m[K,C]: out[n,k] = m[k, columns[n]].
template <std::floating_point T>
Var<T> select_columns(Var<T> m, std::span<const int> columns) {
  detail::require_rank(m.shape(), 2, "select_columns");
  const std::size_t k = m.dim(0), c = m.dim(1), n = columns.size();
  require(n > 0, ErrorCode::invalid_argument, "select_columns: empty selection");
  auto mv = m.value();
  std::vector<T> out(n * k);
  for (std::size_t i = 0; i < n; ++i) {
    require(columns[i] >= 0 && static_cast<std::size_t>(columns[i]) < c, ErrorCode::invalid_argument,
            "select_columns: column " + std::to_string(columns[i]) + " outside [0," + std::to_string(c) + ")");
    for (std::size_t r = 0; r < k; ++r) out[i * k + r] = mv[r * c + static_cast<std::size_t>(columns[i])];
  }
  return m.tape->record(Shape{n, k}, std::move(out), {m},
                        [m, k, c, cols = std::vector<int>(columns.begin(), columns.end())](Tape<T>& tape,
                                                                                            std::span<const T> g) {
                          auto gm = tape.grad_of(m);
                          for (std::size_t i = 0; i < cols.size(); ++i)
                            for (std::size_t r = 0; r < k; ++r)
                              gm[r * c + static_cast<std::size_t>(cols[i])] += g[i * k + r];
                        });
}

/// Channel-wise multiplication: out[n,k,i,j] = x[n,k,i,j] * w[n,k].
template <std::floating_point T>
Var<T> scale_channels(Var<T> x, Var<T> w) {
  detail::require_rank(x.shape(), 4, "scale_channels");
  require(w.shape() == Shape{x.dim(0), x.dim(1)}, ErrorCode::shape,
          "scale_channels: weights " + to_string(w.shape()) + " do not match activation " + to_string(x.shape()));
  const std::size_t planes = x.dim(0) * x.dim(1), area = x.dim(2) * x.dim(3);
  auto xv = x.value(), wv = w.value();
  std::vector<T> out(xv.size());
  for (std::size_t p = 0; p < planes; ++p)
    for (std::size_t j = 0; j < area; ++j) out[p * area + j] = xv[p * area + j] * wv[p];
  return x.tape->record(x.shape(), std::move(out), {x, w}, [x, w, planes, area](Tape<T>& tape, std::span<const T> g) {
    auto xv = tape.value(x), wv = tape.value(w);
    if (tape.needs_grad(x)) {
      auto gx = tape.grad_of(x);
      for (std::size_t p = 0; p < planes; ++p)
        for (std::size_t j = 0; j < area; ++j) gx[p * area + j] += g[p * area + j] * wv[p];
    }
    if (tape.needs_grad(w)) {
      auto gw = tape.grad_of(w);
      for (std::size_t p = 0; p < planes; ++p) {
        T acc = 0;
        for (std::size_t j = 0; j < area; ++j) acc += g[p * area + j] * xv[p * area + j];
        gw[p] += acc;
      }
    }
  });
}

/// Fixed per-channel affine map x*scale[c] + shift[c]; used for input normalisation.
template <std::floating_point T>
Var<T> channel_affine(Var<T> x, std::span<const T> scale_by, std::span<const T> shift_by) {
  detail::require_rank(x.shape(), 4, "channel_affine");
  const std::size_t c = x.dim(1), area = x.dim(2) * x.dim(3);
  require(scale_by.size() == c && shift_by.size() == c, ErrorCode::shape,
          "channel_affine: expected " + std::to_string(c) + " per-channel coefficients");
  auto xv = x.value();
  std::vector<T> out(xv.size());
  std::vector<T> factors(scale_by.begin(), scale_by.end());
  for (std::size_t p = 0; p < x.dim(0) * c; ++p)
    for (std::size_t j = 0; j < area; ++j) out[p * area + j] = xv[p * area + j] * factors[p % c] + shift_by[p % c];
  return x.tape->record(x.shape(), std::move(out), {x}, [x, c, area, factors](Tape<T>& tape, std::span<const T> g) {
    auto gx = tape.grad_of(x);
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * factors[(i / area) % c];
  });
}

}  // namespace cas
