#pragma once

// Forward and backward rules of the layers the encoder-decoder is built from:
// 3x3x3 same-padded convolution (stride 1 or 2), batch norm + ReLU,
// 2x nearest-neighbour upsampling, channel concatenation and a sigmoid head.
//
// Kernels are laid out [cout][cin][kz][ky][kx]. All loops run in a fixed
// order, so results are bit-reproducible for a given build.

#include <algorithm>
#include <array>
#include <cmath>
#include <span>
#include <type_traits>
#include <utility>
#include <vector>

#include <Eigen/Core>
#if defined(__AVX512F__)
#include <immintrin.h>
#endif

#include "iwnet/tensor.hpp"

namespace iwnet {

inline constexpr int kTaps = 27;

enum class Mode { train, eval };

namespace detail {

inline int conv_out_side(int side, int stride) { return stride == 1 ? side : (side + 1) / 2; }

// Stride-1 convolutions run as 27 shifted matrix products over a zero-padded
// copy of each sample: for every tap k, out += W_k * shift_k(in), where
// shift_k is a pointer offset into the padded buffer. Outputs are computed
// on the padded grid and the interior is kept.
struct PaddedLayout {
  int d, h, w;          // unpadded sides
  std::ptrdiff_t plane;  // (d+2)(h+2)(w+2)
  std::ptrdiff_t margin;
  std::ptrdiff_t cols;   // plane rounded up to a multiple of 48
  std::ptrdiff_t row;    // cols + 2 * margin, stride between channels

  PaddedLayout(int d_, int h_, int w_) : d(d_), h(h_), w(w_) {
    plane = static_cast<std::ptrdiff_t>(d + 2) * (h + 2) * (w + 2);
    margin = static_cast<std::ptrdiff_t>(h + 2) * (w + 2) + (w + 2) + 1;
    cols = (plane + 47) / 48 * 48;
    row = cols + 2 * margin;
  }

  std::ptrdiff_t tap_offset(int t) const {
    const int kz = t / 9;
    const int ky = (t / 3) % 3;
    const int kx = t % 3;
    return (kz - 1) * static_cast<std::ptrdiff_t>(h + 2) * (w + 2) + (ky - 1) * static_cast<std::ptrdiff_t>(w + 2) +
           (kx - 1);
  }

  std::ptrdiff_t padded_index(int z, int y, int x) const {
    return margin + (static_cast<std::ptrdiff_t>(z + 1) * (h + 2) + (y + 1)) * (w + 2) + (x + 1);
  }
};

template <class T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using StridedMap = Eigen::Map<RowMat<T>, 0, Eigen::OuterStride<>>;
template <class T>
using ConstStridedMap = Eigen::Map<const RowMat<T>, 0, Eigen::OuterStride<>>;

template <class T>
void pad_sample(const Tensor5<T>& t, int n, const PaddedLayout& L, std::vector<T>& buf) {
  const int c = t.shape.c;
  buf.assign(static_cast<std::size_t>(c) * L.row, T{});
  for (int ch = 0; ch < c; ++ch) {
    const T* src = t.plane(n, ch);
    T* dst = buf.data() + static_cast<std::ptrdiff_t>(ch) * L.row;
    for (int z = 0; z < L.d; ++z)
      for (int y = 0; y < L.h; ++y)
        std::copy_n(src + (static_cast<std::size_t>(z) * L.h + y) * L.w, L.w, dst + L.padded_index(z, y, 0));
  }
}

template <class T>
void unpad_add(const std::vector<T>& buf, std::ptrdiff_t stride, const PaddedLayout& L, Tensor5<T>& t, int n) {
  for (int ch = 0; ch < t.shape.c; ++ch) {
    const T* src = buf.data() + static_cast<std::ptrdiff_t>(ch) * stride;
    T* dst = t.plane(n, ch);
    for (int z = 0; z < L.d; ++z)
      for (int y = 0; y < L.h; ++y) {
        const T* s = src + L.padded_index(z, y, 0) - L.margin;
        T* o = dst + (static_cast<std::size_t>(z) * L.h + y) * L.w;
        for (int x = 0; x < L.w; ++x) o[x] += s[x];
      }
  }
}

// [cout][cin][27] -> 27 blocks of [cout][cin].
template <class T>
std::vector<T> taps_major(std::span<const T> kernel, int cout, int cin) {
  std::vector<T> out(kernel.size());
  for (int co = 0; co < cout; ++co)
    for (int ci = 0; ci < cin; ++ci)
      for (int t = 0; t < kTaps; ++t)
        out[(static_cast<std::size_t>(t) * cout + co) * cin + ci] =
            kernel[(static_cast<std::size_t>(co) * cin + ci) * kTaps + t];
  return out;
}

#if defined(__AVX512F__)
// Hand-blocked AVX-512 kernels for the f32 stride-1 case. They work on the
// same padded layout as the Eigen path and compute every position of the
// padded plane rounded up to kPosBlock.
namespace simd {

#ifndef IWNET_KGRAD_CHUNK
#define IWNET_KGRAD_CHUNK 512
#endif

inline constexpr int kVecs = 3;
inline constexpr int kPosBlock = 16 * kVecs;

// out[m][p] = sum_t sum_k w[t][k][m] * in[k][p + off[t]],  m in [m0, m0+CB)
template <int CB>
void tap_sum_block(const float* in, std::ptrdiff_t in_row, const float* w, int K, int M, int m0,
                   const std::ptrdiff_t* off, std::ptrdiff_t P, float* out, std::ptrdiff_t out_row) {
  for (std::ptrdiff_t p0 = 0; p0 < P; p0 += kPosBlock) {
    __m512 acc[CB][kVecs];
    for (int c = 0; c < CB; ++c)
      for (int j = 0; j < kVecs; ++j) acc[c][j] = _mm512_setzero_ps();
    for (int t = 0; t < kTaps; ++t) {
      const float* base = in + p0 + off[t];
      const float* wt = w + static_cast<std::ptrdiff_t>(t) * K * M + m0;
      for (int k = 0; k < K; ++k) {
        const float* s = base + k * in_row;
        __m512 v[kVecs];
        for (int j = 0; j < kVecs; ++j) v[j] = _mm512_loadu_ps(s + 16 * j);
        const float* wk = wt + static_cast<std::ptrdiff_t>(k) * M;
        for (int c = 0; c < CB; ++c) {
          const __m512 ww = _mm512_set1_ps(wk[c]);
          for (int j = 0; j < kVecs; ++j) acc[c][j] = _mm512_fmadd_ps(ww, v[j], acc[c][j]);
        }
      }
    }
    for (int c = 0; c < CB; ++c)
      for (int j = 0; j < kVecs; ++j) _mm512_storeu_ps(out + (m0 + c) * out_row + p0 + 16 * j, acc[c][j]);
  }
}

inline void tap_sum(const float* in, std::ptrdiff_t in_row, const float* w, int K, int M, const std::ptrdiff_t* off,
                    std::ptrdiff_t P, float* out, std::ptrdiff_t out_row) {
  int m0 = 0;
  for (; m0 + 8 <= M; m0 += 8) tap_sum_block<8>(in, in_row, w, K, M, m0, off, P, out, out_row);
  if (M - m0 >= 4) {
    tap_sum_block<4>(in, in_row, w, K, M, m0, off, P, out, out_row);
    m0 += 4;
  }
  if (M - m0 >= 2) {
    tap_sum_block<2>(in, in_row, w, K, M, m0, off, P, out, out_row);
    m0 += 2;
  }
  if (M - m0 >= 1) tap_sum_block<1>(in, in_row, w, K, M, m0, off, P, out, out_row);
}

// gw[t][co][ci] += sum_p g[co][p] * x[ci][p + off[t]] over p in [p0, p1),
// for co in [co0, co0+CO), ci in [ci0, ci0+CI).
template <int CO, int CI>
void kernel_grad_block(const float* g, const float* x, std::ptrdiff_t row, int cout, int cin, int co0, int ci0,
                       std::ptrdiff_t off, std::ptrdiff_t p0, std::ptrdiff_t p1, float* gw_t) {
  __m512 acc[CO][CI];
  for (int a = 0; a < CO; ++a)
    for (int b = 0; b < CI; ++b) acc[a][b] = _mm512_setzero_ps();
  for (std::ptrdiff_t p = p0; p < p1; p += 16) {
    __m512 xv[CI];
    for (int b = 0; b < CI; ++b) xv[b] = _mm512_loadu_ps(x + (ci0 + b) * row + p + off);
    for (int a = 0; a < CO; ++a) {
      const __m512 gv = _mm512_loadu_ps(g + (co0 + a) * row + p);
      for (int b = 0; b < CI; ++b) acc[a][b] = _mm512_fmadd_ps(gv, xv[b], acc[a][b]);
    }
  }
  for (int a = 0; a < CO; ++a)
    for (int b = 0; b < CI; ++b) gw_t[(co0 + a) * cin + ci0 + b] += _mm512_reduce_add_ps(acc[a][b]);
  (void)cout;
}

template <int CO>
void kernel_grad_co(const float* g, const float* x, std::ptrdiff_t row, int cout, int cin, int co0,
                    std::ptrdiff_t off, std::ptrdiff_t p0, std::ptrdiff_t p1, float* gw_t) {
  int ci0 = 0;
  for (; ci0 + 3 <= cin; ci0 += 3) kernel_grad_block<CO, 3>(g, x, row, cout, cin, co0, ci0, off, p0, p1, gw_t);
  if (cin - ci0 == 2) kernel_grad_block<CO, 2>(g, x, row, cout, cin, co0, ci0, off, p0, p1, gw_t);
  if (cin - ci0 == 1) kernel_grad_block<CO, 1>(g, x, row, cout, cin, co0, ci0, off, p0, p1, gw_t);
}

// g and x point at position 0 of their padded rows (i.e. past the margin).
inline void kernel_grad(const float* g, const float* x, std::ptrdiff_t row, int cout, int cin,
                        const std::ptrdiff_t* tap_off, std::ptrdiff_t P, float* gw) {
  // Chunks small enough that a block of gradient rows stays in L1 across
  // all taps.
  constexpr std::ptrdiff_t chunk = IWNET_KGRAD_CHUNK;
  auto taps = [&](auto co_block, int co0, std::ptrdiff_t p0, std::ptrdiff_t p1) {
    constexpr int CO = decltype(co_block)::value;
    for (int t = 0; t < kTaps; ++t)
      kernel_grad_co<CO>(g, x, row, cout, cin, co0, tap_off[t], p0, p1, gw + static_cast<std::ptrdiff_t>(t) * cout * cin);
  };
  for (std::ptrdiff_t p0 = 0; p0 < P; p0 += chunk) {
    const std::ptrdiff_t p1 = std::min(P, p0 + chunk);
    int co0 = 0;
    for (; co0 + 8 <= cout; co0 += 8) taps(std::integral_constant<int, 8>{}, co0, p0, p1);
    if (cout - co0 >= 4) {
      taps(std::integral_constant<int, 4>{}, co0, p0, p1);
      co0 += 4;
    }
    if (cout - co0 >= 2) {
      taps(std::integral_constant<int, 2>{}, co0, p0, p1);
      co0 += 2;
    }
    if (cout - co0 >= 1) taps(std::integral_constant<int, 1>{}, co0, p0, p1);
  }
}

}  // namespace simd
#endif

template <class T>
void conv3_forward_s1(const Tensor5<T>& in, std::span<const T> kernel, std::span<const T> bias, int cout,
                      Tensor5<T>& out) {
  const int cin = in.shape.c;
  const PaddedLayout L(in.shape.z, in.shape.y, in.shape.x);
  const auto wk = taps_major(kernel, cout, cin);
  std::vector<T> padded;
  std::vector<T> acc(static_cast<std::size_t>(cout) * L.cols);
#if defined(__AVX512F__)
  constexpr bool use_simd = std::is_same_v<T, float>;
  std::vector<T> wf;
  std::array<std::ptrdiff_t, kTaps> off{};
  if constexpr (use_simd) {
    // [t][ci][co]
    wf.resize(wk.size());
    for (int t = 0; t < kTaps; ++t)
      for (int co = 0; co < cout; ++co)
        for (int ci = 0; ci < cin; ++ci)
          wf[(static_cast<std::size_t>(t) * cin + ci) * cout + co] = wk[(static_cast<std::size_t>(t) * cout + co) * cin + ci];
    for (int t = 0; t < kTaps; ++t) off[t] = L.margin + L.tap_offset(t);
  }
#else
  constexpr bool use_simd = false;
#endif
  for (int n = 0; n < in.shape.n; ++n) {
    pad_sample(in, n, L, padded);
    if constexpr (use_simd) {
#if defined(__AVX512F__)
      simd::tap_sum(padded.data(), L.row, wf.data(), cin, cout, off.data(), L.cols, acc.data(), L.cols);
#endif
    } else {
      Eigen::Map<RowMat<T>, 0, Eigen::OuterStride<>> res(acc.data(), cout, L.plane, Eigen::OuterStride<>(L.cols));
      res.setZero();
      for (int t = 0; t < kTaps; ++t) {
        Eigen::Map<const RowMat<T>> w(wk.data() + static_cast<std::size_t>(t) * cout * cin, cout, cin);
        ConstStridedMap<T> x(padded.data() + L.margin + L.tap_offset(t), cin, L.plane, Eigen::OuterStride<>(L.row));
        res.noalias() += w * x;
      }
    }
    for (int co = 0; co < cout; ++co) {
      T* o = out.plane(n, co);
      const T b = bias.empty() ? T{} : bias[co];
      std::fill(o, o + out.shape.spatial(), b);
    }
    unpad_add(acc, L.cols, L, out, n);
  }
}

template <class T>
void conv3_backward_s1(const Tensor5<T>& in, std::span<const T> kernel, const Tensor5<T>& gout, Tensor5<T>* gin,
                       std::span<T> gkernel) {
  const int cin = in.shape.c;
  const int cout = gout.shape.c;
  const PaddedLayout L(in.shape.z, in.shape.y, in.shape.x);
  const auto wk = taps_major(kernel, cout, cin);
  std::vector<T> gk(wk.size(), T{});
  std::vector<T> pin;
  std::vector<T> pg;
  std::vector<T> acc(gin ? static_cast<std::size_t>(cin) * L.cols : 0);
#if defined(__AVX512F__)
  constexpr bool use_simd = std::is_same_v<T, float>;
#else
  constexpr bool use_simd = false;
#endif
  std::array<std::ptrdiff_t, kTaps> tap_off{};
  std::array<std::ptrdiff_t, kTaps> back_off{};
  for (int t = 0; t < kTaps; ++t) {
    tap_off[t] = L.tap_offset(t);
    back_off[t] = L.margin - L.tap_offset(t);
  }
  for (int n = 0; n < in.shape.n; ++n) {
    pad_sample(in, n, L, pin);
    pad_sample(gout, n, L, pg);
    if constexpr (use_simd) {
#if defined(__AVX512F__)
      simd::kernel_grad(pg.data() + L.margin, pin.data() + L.margin, L.row, cout, cin, tap_off.data(), L.cols,
                        gk.data());
      if (gin) {
        simd::tap_sum(pg.data(), L.row, wk.data(), cout, cin, back_off.data(), L.cols, acc.data(), L.cols);
        unpad_add(acc, L.cols, L, *gin, n);
      }
#endif
    } else {
      ConstStridedMap<T> g(pg.data() + L.margin, cout, L.plane, Eigen::OuterStride<>(L.row));
      for (int t = 0; t < kTaps; ++t) {
        ConstStridedMap<T> x(pin.data() + L.margin + tap_off[t], cin, L.plane, Eigen::OuterStride<>(L.row));
        Eigen::Map<RowMat<T>> gw(gk.data() + static_cast<std::size_t>(t) * cout * cin, cout, cin);
        gw.noalias() += g * x.transpose();
      }
      if (gin) {
        Eigen::Map<RowMat<T>, 0, Eigen::OuterStride<>> res(acc.data(), cin, L.plane, Eigen::OuterStride<>(L.cols));
        res.setZero();
        for (int t = 0; t < kTaps; ++t) {
          Eigen::Map<const RowMat<T>> w(wk.data() + static_cast<std::size_t>(t) * cout * cin, cout, cin);
          ConstStridedMap<T> gs(pg.data() + back_off[t], cout, L.plane, Eigen::OuterStride<>(L.row));
          res.noalias() += w.transpose() * gs;
        }
        unpad_add(acc, L.cols, L, *gin, n);
      }
    }
  }
  for (int co = 0; co < cout; ++co)
    for (int ci = 0; ci < cin; ++ci)
      for (int t = 0; t < kTaps; ++t)
        gkernel[(static_cast<std::size_t>(co) * cin + ci) * kTaps + t] +=
            gk[(static_cast<std::size_t>(t) * cout + co) * cin + ci];
}

// Strided convs gather a column matrix [cin*27][out voxels] on the (small)
// output grid; the kernel is then a plain [cout][cin*27] matrix.
template <class T>
void im2col_strided(const Tensor5<T>& in, int n, int stride, const Shape5& os, std::vector<T>& col) {
  const int cin = in.shape.c;
  const std::size_t vout = os.spatial();
  col.assign(static_cast<std::size_t>(cin) * kTaps * vout, T{});
  for (int ci = 0; ci < cin; ++ci) {
    const T* ip = in.plane(n, ci);
    for (int t = 0; t < kTaps; ++t) {
      const int kz = t / 9;
      const int ky = (t / 3) % 3;
      const int kx = t % 3;
      T* row = col.data() + (static_cast<std::size_t>(ci) * kTaps + t) * vout;
      for (int oz = 0; oz < os.z; ++oz) {
        const int iz = oz * stride + kz - 1;
        if (iz < 0 || iz >= in.shape.z) continue;
        for (int oy = 0; oy < os.y; ++oy) {
          const int iy = oy * stride + ky - 1;
          if (iy < 0 || iy >= in.shape.y) continue;
          const T* src = ip + (static_cast<std::size_t>(iz) * in.shape.y + iy) * in.shape.x;
          T* dst = row + (static_cast<std::size_t>(oz) * os.y + oy) * os.x;
          for (int ox = 0; ox < os.x; ++ox) {
            const int ix = ox * stride + kx - 1;
            if (ix >= 0 && ix < in.shape.x) dst[ox] = src[ix];
          }
        }
      }
    }
  }
}

template <class T>
void col2im_strided_add(const std::vector<T>& col, int stride, const Shape5& os, Tensor5<T>& gin, int n) {
  const int cin = gin.shape.c;
  const std::size_t vout = os.spatial();
  for (int ci = 0; ci < cin; ++ci) {
    T* gp = gin.plane(n, ci);
    for (int t = 0; t < kTaps; ++t) {
      const int kz = t / 9;
      const int ky = (t / 3) % 3;
      const int kx = t % 3;
      const T* row = col.data() + (static_cast<std::size_t>(ci) * kTaps + t) * vout;
      for (int oz = 0; oz < os.z; ++oz) {
        const int iz = oz * stride + kz - 1;
        if (iz < 0 || iz >= gin.shape.z) continue;
        for (int oy = 0; oy < os.y; ++oy) {
          const int iy = oy * stride + ky - 1;
          if (iy < 0 || iy >= gin.shape.y) continue;
          T* dst = gp + (static_cast<std::size_t>(iz) * gin.shape.y + iy) * gin.shape.x;
          const T* src = row + (static_cast<std::size_t>(oz) * os.y + oy) * os.x;
          for (int ox = 0; ox < os.x; ++ox) {
            const int ix = ox * stride + kx - 1;
            if (ix >= 0 && ix < gin.shape.x) dst[ix] += src[ox];
          }
        }
      }
    }
  }
}

template <class T>
void conv3_forward_strided(const Tensor5<T>& in, std::span<const T> kernel, std::span<const T> bias, int cout,
                           int stride, Tensor5<T>& out) {
  const int cin = in.shape.c;
  const auto& os = out.shape;
  std::vector<T> col;
  Eigen::Map<const RowMat<T>> w(kernel.data(), cout, static_cast<Eigen::Index>(cin) * kTaps);
  for (int n = 0; n < in.shape.n; ++n) {
    im2col_strided(in, n, stride, os, col);
    Eigen::Map<const RowMat<T>> x(col.data(), static_cast<Eigen::Index>(cin) * kTaps, os.spatial());
    Eigen::Map<RowMat<T>> o(out.plane(n, 0), cout, os.spatial());
    o.noalias() = w * x;
    if (!bias.empty())
      for (int co = 0; co < cout; ++co) o.row(co).array() += bias[co];
  }
}

template <class T>
void conv3_backward_strided(const Tensor5<T>& in, std::span<const T> kernel, const Tensor5<T>& gout, int stride,
                            Tensor5<T>* gin, std::span<T> gkernel) {
  const int cin = in.shape.c;
  const auto& os = gout.shape;
  const Eigen::Index k = static_cast<Eigen::Index>(cin) * kTaps;
  std::vector<T> col;
  std::vector<T> gcol(gin ? static_cast<std::size_t>(k) * os.spatial() : 0);
  Eigen::Map<const RowMat<T>> w(kernel.data(), os.c, k);
  Eigen::Map<RowMat<T>> gw(gkernel.data(), os.c, k);
  for (int n = 0; n < in.shape.n; ++n) {
    im2col_strided(in, n, stride, os, col);
    Eigen::Map<const RowMat<T>> x(col.data(), k, os.spatial());
    Eigen::Map<const RowMat<T>> g(gout.plane(n, 0), os.c, os.spatial());
    gw.noalias() += g * x.transpose();
    if (gin) {
      Eigen::Map<RowMat<T>> gc(gcol.data(), k, os.spatial());
      gc.noalias() = w.transpose() * g;
      col2im_strided_add(gcol, stride, os, *gin, n);
    }
  }
}

}  // namespace detail

// Same-padded 3x3x3 convolution. Stride 2 halves each spatial side.
template <class T>
Tensor5<T> conv3_forward(const Tensor5<T>& in, std::span<const T> kernel, std::span<const T> bias, int cout,
                         int stride) {
  if (stride != 1 && stride != 2) fail(Errc::invalid_argument, "conv stride must be 1 or 2");
  if (kernel.size() != static_cast<std::size_t>(cout) * in.shape.c * kTaps)
    fail(Errc::shape_mismatch, "conv kernel does not match input channels");
  if (!bias.empty() && bias.size() != static_cast<std::size_t>(cout))
    fail(Errc::shape_mismatch, "conv bias does not match output channels");
  const Shape5 os{in.shape.n, cout, detail::conv_out_side(in.shape.z, stride),
                  detail::conv_out_side(in.shape.y, stride), detail::conv_out_side(in.shape.x, stride)};
  Tensor5<T> out(os);
  if (stride == 1) {
    detail::conv3_forward_s1(in, kernel, bias, cout, out);
  } else {
    detail::conv3_forward_strided(in, kernel, bias, cout, stride, out);
  }
  return out;
}

// `gout` holds dL/d(output). Accumulates into gkernel / gbias (when
// non-empty) and, when gin is given, into gin->values (same shape as `in`).
template <class T>
void conv3_backward(const Tensor5<T>& in, std::span<const T> kernel, const Tensor5<T>& gout, int stride,
                    Tensor5<T>* gin, std::span<T> gkernel, std::span<T> gbias) {
  const int cout = gout.shape.c;
  if (!gbias.empty()) {
    for (int n = 0; n < gout.shape.n; ++n)
      for (int co = 0; co < cout; ++co) {
        const T* g = gout.plane(n, co);
        T sum{};
        for (std::size_t i = 0; i < gout.shape.spatial(); ++i) sum += g[i];
        gbias[co] += sum;
      }
  }
  if (stride != 1) {
    detail::conv3_backward_strided(in, kernel, gout, stride, gin, gkernel);
    return;
  }
  detail::conv3_backward_s1(in, kernel, gout, gin, gkernel);
}

inline constexpr double kBnEps = 1e-5;
inline constexpr double kBnMomentum = 0.9;

template <class T>
struct BatchNormCache {
  std::vector<T> xhat;
  std::vector<T> out;
  std::vector<double> inv_std;
  std::vector<double> batch_mean;
  std::vector<double> batch_var;
  Mode mode = Mode::eval;
};

namespace detail {

// Sum over [0, len) with a fixed 16-lane accumulation order. Unlike an
// Eigen reduction over a Map, the order does not depend on the pointer's
// alignment, which keeps training runs bit-reproducible.
template <class T, class F>
T lane_sum(std::size_t len, F&& term) {
  constexpr std::size_t W = 16;
  T acc[W] = {};
  std::size_t i = 0;
  for (; i + W <= len; i += W)
    for (std::size_t k = 0; k < W; ++k) acc[k] += term(i + k);
  for (std::size_t k = 0; i < len; ++i, ++k) acc[k] += term(i);
  T total{};
  for (std::size_t k = 0; k < W; ++k) total += acc[k];
  return total;
}

// Sums f over [0, n) in vectorised T blocks, accumulating blocks in double.
template <class T, class F>
double blocked_sum(std::size_t n, F&& f) {
  constexpr std::size_t block = 1024;
  double total = 0.0;
  for (std::size_t i0 = 0; i0 < n; i0 += block) total += static_cast<double>(f(i0, std::min(block, n - i0)));
  return total;
}

}  // namespace detail

// Per-channel batch normalisation followed by ReLU. Train mode normalises
// over (batch, z, y, x); eval mode uses the running statistics.
template <class T>
Tensor5<T> batchnorm_relu_forward(const Tensor5<T>& in, std::span<const T> scale, std::span<const T> shift,
                                  std::span<const T> running_mean, std::span<const T> running_var, Mode mode,
                                  BatchNormCache<T>* cache) {
  const auto& s = in.shape;
  if (s.n == 0) fail(Errc::invalid_argument, "batch norm needs a non-empty batch");
  if (scale.size() != static_cast<std::size_t>(s.c) || shift.size() != scale.size())
    fail(Errc::shape_mismatch, "batch norm parameters do not match channel count");
  const std::size_t sp = s.spatial();
  const double count = static_cast<double>(s.n) * sp;
  Tensor5<T> out(s);
  std::vector<T> xhat(cache ? in.size() : 0);
  std::vector<double> inv_std(s.c), bmean(s.c), bvar(s.c);
  for (int c = 0; c < s.c; ++c) {
    double mean = 0.0;
    double var = 0.0;
    if (mode == Mode::train) {
      for (int n = 0; n < s.n; ++n) {
        const T* p = in.plane(n, c);
        mean += detail::blocked_sum<T>(sp, [&](std::size_t i, std::size_t len) {
          return detail::lane_sum<T>(len, [&](std::size_t k) { return p[i + k]; });
        });
      }
      mean /= count;
      const T tm = static_cast<T>(mean);
      for (int n = 0; n < s.n; ++n) {
        const T* p = in.plane(n, c);
        var += detail::blocked_sum<T>(sp, [&](std::size_t i, std::size_t len) {
          return detail::lane_sum<T>(len, [&](std::size_t k) {
            const T d = p[i + k] - tm;
            return d * d;
          });
        });
      }
      var /= count;
    } else {
      mean = running_mean[c];
      var = running_var[c];
    }
    bmean[c] = mean;
    bvar[c] = var;
    const double inv = 1.0 / std::sqrt(var + kBnEps);
    inv_std[c] = inv;
    const T tm = static_cast<T>(mean);
    const T ti = static_cast<T>(inv);
    const T g = scale[c];
    const T b = shift[c];
    for (int n = 0; n < s.n; ++n) {
      const T* p = in.plane(n, c);
      T* o = out.plane(n, c);
      T* xh = cache ? xhat.data() + (static_cast<std::size_t>(n) * s.c + c) * sp : nullptr;
      for (std::size_t i = 0; i < sp; ++i) {
        const T v = (p[i] - tm) * ti;
        if (xh) xh[i] = v;
        const T y = g * v + b;
        o[i] = y > T{} ? y : T{};
      }
    }
  }
  if (cache) {
    cache->xhat = std::move(xhat);
    cache->out = out.values;
    cache->inv_std = std::move(inv_std);
    cache->batch_mean = std::move(bmean);
    cache->batch_var = std::move(bvar);
    cache->mode = mode;
  }
  return out;
}

template <class T>
Tensor5<T> batchnorm_relu_backward(const BatchNormCache<T>& cache, std::span<const T> scale, const Tensor5<T>& gout,
                                   std::span<T> gscale, std::span<T> gshift) {
  const auto& s = gout.shape;
  const std::size_t sp = s.spatial();
  const double count = static_cast<double>(s.n) * sp;
  Tensor5<T> gin(s);
  for (int c = 0; c < s.c; ++c) {
    double sum_dy = 0.0;
    double sum_dy_xhat = 0.0;
    for (int n = 0; n < s.n; ++n) {
      const std::size_t off = (static_cast<std::size_t>(n) * s.c + c) * sp;
      const T* g = gout.values.data() + off;
      const T* o = cache.out.data() + off;
      const T* xh = cache.xhat.data() + off;
      sum_dy += detail::blocked_sum<T>(sp, [&](std::size_t i, std::size_t len) {
        return detail::lane_sum<T>(len, [&](std::size_t k) { return o[i + k] > T{} ? g[i + k] : T{}; });
      });
      sum_dy_xhat += detail::blocked_sum<T>(sp, [&](std::size_t i, std::size_t len) {
        return detail::lane_sum<T>(len, [&](std::size_t k) { return o[i + k] > T{} ? g[i + k] * xh[i + k] : T{}; });
      });
    }
    gscale[c] += static_cast<T>(sum_dy_xhat);
    gshift[c] += static_cast<T>(sum_dy);
    const double gamma = scale[c];
    const double inv = cache.inv_std[c];
    for (int n = 0; n < s.n; ++n) {
      const std::size_t off = (static_cast<std::size_t>(n) * s.c + c) * sp;
      const T* g = gout.values.data() + off;
      const T* o = cache.out.data() + off;
      const T* xh = cache.xhat.data() + off;
      T* gi = gin.values.data() + off;
      if (cache.mode == Mode::train) {
        const T a = static_cast<T>(gamma * inv);
        const T mdy = static_cast<T>(sum_dy / count);
        const T mdx = static_cast<T>(sum_dy_xhat / count);
        for (std::size_t i = 0; i < sp; ++i) {
          const T dy = o[i] > T{} ? g[i] : T{};
          gi[i] = a * (dy - mdy - xh[i] * mdx);
        }
      } else {
        const T a = static_cast<T>(gamma * inv);
        for (std::size_t i = 0; i < sp; ++i) gi[i] = o[i] > T{} ? a * g[i] : T{};
      }
    }
  }
  return gin;
}

// Moves running statistics towards the batch statistics recorded in a
// train-mode forward pass.
template <class T>
void update_running_stats(const BatchNormCache<T>& cache, std::span<T> running_mean, std::span<T> running_var) {
  for (std::size_t c = 0; c < running_mean.size(); ++c) {
    running_mean[c] = static_cast<T>(kBnMomentum * running_mean[c] + (1.0 - kBnMomentum) * cache.batch_mean[c]);
    running_var[c] = static_cast<T>(kBnMomentum * running_var[c] + (1.0 - kBnMomentum) * cache.batch_var[c]);
  }
}

// Each voxel is replicated into a 2x2x2 block.
template <class T>
Tensor5<T> upsample_nn_forward(const Tensor5<T>& in) {
  const auto& s = in.shape;
  Tensor5<T> out({s.n, s.c, 2 * s.z, 2 * s.y, 2 * s.x});
  for (int n = 0; n < s.n; ++n)
    for (int c = 0; c < s.c; ++c)
      for (int z = 0; z < 2 * s.z; ++z)
        for (int y = 0; y < 2 * s.y; ++y) {
          const T* src = &in.at(n, c, z / 2, y / 2, 0);
          T* dst = &out.at(n, c, z, y, 0);
          for (int x = 0; x < 2 * s.x; ++x) dst[x] = src[x / 2];
        }
  return out;
}

// Sums the 8 child gradients back onto each source voxel.
template <class T>
Tensor5<T> upsample_nn_backward(const Tensor5<T>& gout) {
  const auto& g = gout.shape;
  Tensor5<T> gin({g.n, g.c, g.z / 2, g.y / 2, g.x / 2});
  for (int n = 0; n < g.n; ++n)
    for (int c = 0; c < g.c; ++c)
      for (int z = 0; z < g.z; ++z)
        for (int y = 0; y < g.y; ++y) {
          const T* src = &gout.at(n, c, z, y, 0);
          T* dst = &gin.at(n, c, z / 2, y / 2, 0);
          for (int x = 0; x < g.x; ++x) dst[x / 2] += src[x];
        }
  return gin;
}

template <class T>
Tensor5<T> concat_channels(const Tensor5<T>& a, const Tensor5<T>& b) {
  if (a.shape.n != b.shape.n || !a.shape.same_spatial(b.shape))
    fail(Errc::shape_mismatch, "concat needs equal batch and spatial dims");
  Tensor5<T> out({a.shape.n, a.shape.c + b.shape.c, a.shape.z, a.shape.y, a.shape.x});
  const std::size_t sp = a.shape.spatial();
  for (int n = 0; n < a.shape.n; ++n) {
    std::copy_n(a.plane(n, 0), a.shape.c * sp, out.plane(n, 0));
    std::copy_n(b.plane(n, 0), b.shape.c * sp, out.plane(n, a.shape.c));
  }
  return out;
}

// Splits the gradient of a concatenation into the slices belonging to the
// first `channels_a` channels and the rest.
template <class T>
std::pair<Tensor5<T>, Tensor5<T>> concat_channels_backward(const Tensor5<T>& gout, int channels_a) {
  const auto& g = gout.shape;
  if (channels_a < 0 || channels_a > g.c) fail(Errc::shape_mismatch, "concat split out of range");
  Tensor5<T> ga({g.n, channels_a, g.z, g.y, g.x});
  Tensor5<T> gb({g.n, g.c - channels_a, g.z, g.y, g.x});
  const std::size_t sp = g.spatial();
  for (int n = 0; n < g.n; ++n) {
    if (channels_a > 0) std::copy_n(gout.plane(n, 0), channels_a * sp, ga.plane(n, 0));
    if (g.c > channels_a) std::copy_n(gout.plane(n, channels_a), (g.c - channels_a) * sp, gb.plane(n, 0));
  }
  return {std::move(ga), std::move(gb)};
}

template <class T>
T sigmoid(T v) {
  return T{1} / (T{1} + std::exp(-v));
}

// 3x3x3 conv to one channel, then sigmoid.
template <class T>
Tensor5<T> sigmoid_head_forward(const Tensor5<T>& in, std::span<const T> kernel, std::span<const T> bias) {
  if (bias.size() != 1) fail(Errc::shape_mismatch, "sigmoid head must produce exactly one channel");
  Tensor5<T> out = conv3_forward(in, kernel, bias, 1, 1);
  for (auto& v : out.values) v = sigmoid(v);
  return out;
}

// `out` is the forward result, `gout` the gradient w.r.t. it.
template <class T>
void sigmoid_head_backward(const Tensor5<T>& in, std::span<const T> kernel, const Tensor5<T>& out,
                           const Tensor5<T>& gout, Tensor5<T>* gin, std::span<T> gkernel, std::span<T> gbias) {
  Tensor5<T> gpre(out.shape);
  for (std::size_t i = 0; i < out.size(); ++i) {
    const T s = out.values[i];
    gpre.values[i] = gout.values[i] * s * (T{1} - s);
  }
  conv3_backward(in, kernel, gpre, 1, gin, gkernel, gbias);
}

}  // namespace iwnet
