#pragma once

// Joint spatial augmentation of a training sample: the same affine map is
// applied to the image (trilinear), the target (nearest neighbour) and the
// two stroke end-points.

#include <array>
#include <cmath>
#include <numbers>

#include "iwnet/field.hpp"
#include "iwnet/volgrid.hpp"

namespace iwnet {

struct TrainSample {
  ScalarVolume volume;
  BinaryMask target;
  PointPair pair;
};

struct AugmentConfig {
  bool flips = true;
  bool translate = true;
  bool rotate = true;
  bool zoom = true;
  int max_shift = 4;             // voxels
  double max_small_angle = 10.0;  // degrees
  double zoom_lo = 0.9;
  double zoom_hi = 1.1;
  int retries = 5;

  bool enabled() const { return flips || translate || rotate || zoom; }
};

// Output voxel p maps from source voxel A (p_src - c) + c + shift, where c
// is the grid centre.
struct SpatialTransform {
  std::array<bool, 3> flip{false, false, false};
  std::array<int, 3> shift{0, 0, 0};
  int quarter_turns = 0;     // about the z axis
  double small_angle = 0.0;  // radians, about the z axis
  double zoom = 1.0;         // volumetric scale factor

  bool is_identity() const {
    return !flip[0] && !flip[1] && !flip[2] && shift == std::array<int, 3>{0, 0, 0} && quarter_turns % 4 == 0 &&
           small_angle == 0.0 && zoom == 1.0;
  }

  using Mat3 = std::array<std::array<double, 3>, 3>;

  Mat3 forward_matrix() const {
    // exact quarter turn in the (y, x) plane
    static constexpr int qc[4] = {1, 0, -1, 0};
    static constexpr int qs[4] = {0, 1, 0, -1};
    const int k = ((quarter_turns % 4) + 4) % 4;
    Mat3 q{{{1, 0, 0}, {0, double(qc[k]), double(-qs[k])}, {0, double(qs[k]), double(qc[k])}}};
    Mat3 r = q;
    if (small_angle != 0.0) {
      const double c = std::cos(small_angle), s = std::sin(small_angle);
      const Mat3 a{{{1, 0, 0}, {0, c, -s}, {0, s, c}}};
      for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 3; ++j) r[i][j] = a[i][0] * q[0][j] + a[i][1] * q[1][j] + a[i][2] * q[2][j];
    }
    const double lin = zoom == 1.0 ? 1.0 : std::cbrt(zoom);
    for (int j = 0; j < 3; ++j) {
      const double f = flip[j] ? -1.0 : 1.0;
      for (int i = 0; i < 3; ++i) r[i][j] *= f * lin;
    }
    return r;
  }

  // Inverse of the linear part: A = s R F with R orthogonal and F a signed
  // diagonal, so A^-1 = F R^T / s.
  Mat3 inverse_matrix() const {
    const Mat3 a = forward_matrix();
    const double lin = zoom == 1.0 ? 1.0 : std::cbrt(zoom);
    Mat3 inv{};
    for (int i = 0; i < 3; ++i)
      for (int j = 0; j < 3; ++j) inv[i][j] = a[j][i] / (lin * lin);
    return inv;
  }
};

inline Vec3 grid_center(const VolumeGeometry& g) {
  return {0.5 * (g.dims[0] - 1), 0.5 * (g.dims[1] - 1), 0.5 * (g.dims[2] - 1)};
}

inline Vec3 apply_forward(const SpatialTransform& t, const Vec3& p, const VolumeGeometry& g) {
  const auto a = t.forward_matrix();
  const Vec3 c = grid_center(g);
  const Vec3 d = p - c;
  Vec3 out{};
  for (int i = 0; i < 3; ++i) out[i] = a[i][0] * d[0] + a[i][1] * d[1] + a[i][2] * d[2] + c[i] + t.shift[i];
  return out;
}

inline SpatialTransform draw_transform(const AugmentConfig& cfg, Rng& rng) {
  SpatialTransform t;
  for (int a = 0; a < 3; ++a) {
    const bool f = rng.bernoulli(0.5);
    if (cfg.flips) t.flip[a] = f;
  }
  for (int a = 0; a < 3; ++a) {
    const int s = rng.integer(-cfg.max_shift, cfg.max_shift);
    if (cfg.translate) t.shift[a] = s;
  }
  const int k = rng.integer(0, 3);
  const double ang = rng.uniform(-cfg.max_small_angle, cfg.max_small_angle) * std::numbers::pi / 180.0;
  if (cfg.rotate) {
    t.quarter_turns = k;
    t.small_angle = ang;
  }
  const double z = rng.uniform(cfg.zoom_lo, cfg.zoom_hi);
  if (cfg.zoom) t.zoom = z;
  return t;
}

// Resamples volume and target under t. Image samples outside the grid
// replicate the border; mask samples outside are background.
inline TrainSample apply_transform(const TrainSample& s, const SpatialTransform& t) {
  const auto& g = s.volume.geometry;
  require_same_geometry(s.volume, s.target);
  if (t.is_identity()) return s;
  const auto inv = t.inverse_matrix();
  const Vec3 c = grid_center(g);
  TrainSample out{ScalarVolume(g), BinaryMask(s.target.geometry), {}};
  for (int z = 0; z < g.dims[0]; ++z)
    for (int y = 0; y < g.dims[1]; ++y)
      for (int x = 0; x < g.dims[2]; ++x) {
        const Vec3 d{z - c[0] - t.shift[0], y - c[1] - t.shift[1], x - c[2] - t.shift[2]};
        Vec3 src{};
        for (int i = 0; i < 3; ++i) src[i] = inv[i][0] * d[0] + inv[i][1] * d[1] + inv[i][2] * d[2] + c[i];
        const auto idx = g.index(z, y, x);
        out.volume.values[idx] = static_cast<float>(trilinear(s.volume.values, g, src));
        const int nz = static_cast<int>(round_half_up(src[0]));
        const int ny = static_cast<int>(round_half_up(src[1]));
        const int nx = static_cast<int>(round_half_up(src[2]));
        out.target.values[idx] = g.contains(nz, ny, nx) ? s.target.values[g.index(nz, ny, nx)] : 0;
      }
  out.pair = {apply_forward(t, s.pair.p0, g), apply_forward(t, s.pair.p1, g)};
  return out;
}

inline bool usable_augmentation(const TrainSample& s) {
  if (count_foreground(s.target) == 0) return false;
  try {
    check_pair(s.pair, s.volume.geometry);
  } catch (const Error&) {
    return false;
  }
  return true;
}

// Draws transforms until the target survives and both points stay inside
// the grid on distinct voxels; falls back to the identity.
inline TrainSample augment(const TrainSample& s, const AugmentConfig& cfg, Rng& rng) {
  if (!cfg.enabled()) return s;
  for (int attempt = 0; attempt < cfg.retries; ++attempt) {
    auto out = apply_transform(s, draw_transform(cfg, rng));
    if (usable_augmentation(out)) return out;
  }
  return s;
}

}  // namespace iwnet
