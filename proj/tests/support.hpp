#pragma once

// Test-only reference implementations. Everything here is deliberately
// written the slow, obvious way so it can serve as an oracle for the
// optimised library code.

#include <cmath>
#include <functional>
#include <limits>
#include <vector>

#include "iwnet/layers.hpp"
#include "iwnet/metrics.hpp"
#include "iwnet/volgrid.hpp"

namespace iwtest {

using namespace iwnet;

template <class T>
Tensor5<T> random_tensor(const Shape5& s, Rng& rng, double lo = -1.0, double hi = 1.0) {
  Tensor5<T> t(s);
  for (auto& v : t.values) v = static_cast<T>(rng.uniform(lo, hi));
  return t;
}

template <class T>
std::vector<T> random_vector(std::size_t n, Rng& rng, double lo = -1.0, double hi = 1.0) {
  std::vector<T> v(n);
  for (auto& x : v) x = static_cast<T>(rng.uniform(lo, hi));
  return v;
}

// Direct 7-loop convolution, zero padding 1, accumulated in double.
template <class T>
Tensor5<double> naive_conv3(const Tensor5<T>& in, const std::vector<T>& k, const std::vector<T>& bias, int cout,
                            int stride) {
  const auto& s = in.shape;
  auto os = [&](int n) { return stride == 1 ? n : (n + 1) / 2; };
  Tensor5<double> out({s.n, cout, os(s.z), os(s.y), os(s.x)});
  for (int n = 0; n < s.n; ++n)
    for (int co = 0; co < cout; ++co)
      for (int z = 0; z < out.shape.z; ++z)
        for (int y = 0; y < out.shape.y; ++y)
          for (int x = 0; x < out.shape.x; ++x) {
            double acc = bias.empty() ? 0.0 : static_cast<double>(bias[co]);
            for (int ci = 0; ci < s.c; ++ci)
              for (int kz = 0; kz < 3; ++kz)
                for (int ky = 0; ky < 3; ++ky)
                  for (int kx = 0; kx < 3; ++kx) {
                    const int iz = z * stride + kz - 1, iy = y * stride + ky - 1, ix = x * stride + kx - 1;
                    if (iz < 0 || iy < 0 || ix < 0 || iz >= s.z || iy >= s.y || ix >= s.x) continue;
                    acc += static_cast<double>(k[((static_cast<std::size_t>(co) * s.c + ci) * 3 + kz) * 9 + ky * 3 + kx]) *
                           static_cast<double>(in.at(n, ci, iz, iy, ix));
                  }
            out.at(n, co, z, y, x) = acc;
          }
  return out;
}

// Adjoint of naive_conv3: returns (dL/din, dL/dkernel, dL/dbias).
template <class T>
void naive_conv3_backward(const Tensor5<T>& in, const std::vector<T>& k, const Tensor5<T>& gout, int stride,
                          std::vector<double>& gin, std::vector<double>& gk, std::vector<double>& gb) {
  const auto& s = in.shape;
  const int cout = gout.shape.c;
  gin.assign(in.size(), 0.0);
  gk.assign(k.size(), 0.0);
  gb.assign(cout, 0.0);
  for (int n = 0; n < s.n; ++n)
    for (int co = 0; co < cout; ++co)
      for (int z = 0; z < gout.shape.z; ++z)
        for (int y = 0; y < gout.shape.y; ++y)
          for (int x = 0; x < gout.shape.x; ++x) {
            const double g = gout.at(n, co, z, y, x);
            gb[co] += g;
            for (int ci = 0; ci < s.c; ++ci)
              for (int kz = 0; kz < 3; ++kz)
                for (int ky = 0; ky < 3; ++ky)
                  for (int kx = 0; kx < 3; ++kx) {
                    const int iz = z * stride + kz - 1, iy = y * stride + ky - 1, ix = x * stride + kx - 1;
                    if (iz < 0 || iy < 0 || ix < 0 || iz >= s.z || iy >= s.y || ix >= s.x) continue;
                    const std::size_t ki = ((static_cast<std::size_t>(co) * s.c + ci) * 3 + kz) * 9 + ky * 3 + kx;
                    const std::size_t ii = ((static_cast<std::size_t>(n) * s.c + ci) * s.z + iz) * s.y * s.x +
                                           static_cast<std::size_t>(iy) * s.x + ix;
                    gk[ki] += g * static_cast<double>(in.values[ii]);
                    gin[ii] += g * static_cast<double>(k[ki]);
                  }
          }
}

// Central finite differences against an analytic gradient. A coordinate
// whose +-h evaluations see a different ReLU activity pattern straddles a
// kink, where the derivative is undefined; such coordinates are skipped.
struct FdStats {
  double max_rel = 0.0;
  int checked = 0;
  int skipped = 0;
};

inline double rel_error(double analytic, double numeric, double floor) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), floor});
}

template <class T, class Loss, class Pattern>
void fd_coordinate(FdStats& st, T& x, double analytic, double h, double floor, Loss&& loss, Pattern&& pattern) {
  const T orig = x;
  x = static_cast<T>(orig + h);
  const double hp = static_cast<double>(x) - static_cast<double>(orig);
  const double lp = loss();
  const auto pp = pattern();
  x = static_cast<T>(orig - h);
  const double hm = static_cast<double>(orig) - static_cast<double>(x);
  const double lm = loss();
  const auto pm = pattern();
  x = orig;
  if (pp != pm) {
    ++st.skipped;
    return;
  }
  const double numeric = (lp - lm) / (hp + hm);
  st.max_rel = std::max(st.max_rel, rel_error(analytic, numeric, floor));
  ++st.checked;
}

inline std::vector<bool> no_pattern() { return {}; }

template <class T>
std::vector<bool> relu_pattern(const std::vector<T>& v) {
  std::vector<bool> p(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) p[i] = v[i] > T{};
  return p;
}

// Brute-force surface set: foreground voxels with a background / outside
// 6-neighbour, found by checking all six neighbours explicitly.
inline std::vector<Voxel> brute_surface(const BinaryMask& m) {
  std::vector<Voxel> out;
  const auto& g = m.geometry;
  for (int z = 0; z < g.dims[0]; ++z)
    for (int y = 0; y < g.dims[1]; ++y)
      for (int x = 0; x < g.dims[2]; ++x) {
        if (!m.values[g.index(z, y, x)]) continue;
        bool surf = false;
        const int nb[6][3] = {{z - 1, y, x}, {z + 1, y, x}, {z, y - 1, x}, {z, y + 1, x}, {z, y, x - 1}, {z, y, x + 1}};
        for (const auto& q : nb)
          if (!g.contains(q[0], q[1], q[2]) || !m.values[g.index(q[0], q[1], q[2])]) surf = true;
        if (surf) out.push_back({z, y, x});
      }
  return out;
}

// All-pairs minimum surface distance, both directions, in mm.
inline double brute_asd(const BinaryMask& a, const BinaryMask& b) {
  const auto sa = brute_surface(a);
  const auto sb = brute_surface(b);
  const auto& sp = a.geometry.spacing_mm;
  auto directed = [&](const std::vector<Voxel>& from, const std::vector<Voxel>& to) {
    double sum = 0.0;
    for (const auto& p : from) {
      double best = std::numeric_limits<double>::infinity();
      for (const auto& q : to) {
        const double dz = (p[0] - q[0]) * sp[0], dy = (p[1] - q[1]) * sp[1], dx = (p[2] - q[2]) * sp[2];
        best = std::min(best, std::sqrt(dz * dz + dy * dy + dx * dx));
      }
      sum += best;
    }
    return sum / static_cast<double>(from.size());
  };
  return 0.5 * (directed(sa, sb) + directed(sb, sa));
}

inline double brute_iou(const BinaryMask& a, const BinaryMask& b) {
  int inter = 0, uni = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (a.values[i] == 1 && b.values[i] == 1) ++inter;
    if (a.values[i] == 1 || b.values[i] == 1) ++uni;
  }
  return static_cast<double>(inter) / uni;
}

inline BinaryMask random_mask(const VolumeGeometry& g, Rng& rng, double p = 0.5) {
  BinaryMask m(g);
  for (auto& v : m.values) v = rng.bernoulli(p) ? 1 : 0;
  return m;
}

// Rasterised ball of radius r voxels around c.
inline BinaryMask ball(const VolumeGeometry& g, const Vec3& c, double r) {
  BinaryMask m(g);
  for (std::size_t i = 0; i < m.size(); ++i) {
    const auto v = g.coords(i);
    const double dz = v[0] - c[0], dy = v[1] - c[1], dx = v[2] - c[2];
    m.values[i] = dz * dz + dy * dy + dx * dx <= r * r ? 1 : 0;
  }
  return m;
}

}  // namespace iwtest
