#pragma once

// Voxel grids, intensity preprocessing, cube extraction and resampling.

#include <algorithm>
#include <array>
#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "iwnet/common.hpp"

namespace iwnet {

struct VolumeGeometry {
  std::array<int, 3> dims{1, 1, 1};              // (nz, ny, nx)
  std::array<double, 3> spacing_mm{1.0, 1.0, 1.0};  // (sz, sy, sx)
  std::array<double, 3> origin_mm{0.0, 0.0, 0.0};   // world position of voxel (0,0,0)

  static VolumeGeometry cube(int side, double spacing = 1.0) {
    return {{side, side, side}, {spacing, spacing, spacing}, {0.0, 0.0, 0.0}};
  }

  std::size_t voxel_count() const {
    return static_cast<std::size_t>(dims[0]) * dims[1] * dims[2];
  }

  std::size_t index(int z, int y, int x) const {
    return (static_cast<std::size_t>(z) * dims[1] + y) * dims[2] + x;
  }

  std::array<int, 3> coords(std::size_t i) const {
    const int x = static_cast<int>(i % dims[2]);
    const int y = static_cast<int>((i / dims[2]) % dims[1]);
    const int z = static_cast<int>(i / (static_cast<std::size_t>(dims[2]) * dims[1]));
    return {z, y, x};
  }

  bool contains(int z, int y, int x) const {
    return z >= 0 && y >= 0 && x >= 0 && z < dims[0] && y < dims[1] && x < dims[2];
  }

  Vec3 world(const Vec3& voxel) const {
    return {origin_mm[0] + voxel[0] * spacing_mm[0], origin_mm[1] + voxel[1] * spacing_mm[1],
            origin_mm[2] + voxel[2] * spacing_mm[2]};
  }

  Vec3 voxel(const Vec3& world_mm) const {
    return {(world_mm[0] - origin_mm[0]) / spacing_mm[0],
            (world_mm[1] - origin_mm[1]) / spacing_mm[1],
            (world_mm[2] - origin_mm[2]) / spacing_mm[2]};
  }

  double voxel_volume_mm3() const { return spacing_mm[0] * spacing_mm[1] * spacing_mm[2]; }

  bool operator==(const VolumeGeometry&) const = default;

  const VolumeGeometry& validated() const {
    validate();
    return *this;
  }

  void validate() const {
    for (int a = 0; a < 3; ++a) {
      if (dims[a] < 1) fail(Errc::invalid_geometry, "volume dims must be >= 1");
      if (!(spacing_mm[a] > 0.0) || !std::isfinite(spacing_mm[a]))
        fail(Errc::invalid_geometry, "voxel spacing must be finite and > 0");
      if (!std::isfinite(origin_mm[a])) fail(Errc::invalid_geometry, "origin must be finite");
    }
  }
};

enum class GridKind { scalar, soft, mask };

inline const char* kind_name(GridKind k) {
  switch (k) {
    case GridKind::scalar: return "scalar";
    case GridKind::soft: return "soft";
    case GridKind::mask: return "mask";
  }
  return "?";
}

template <GridKind K>
struct GridTraits {
  using value_type = float;
};

template <>
struct GridTraits<GridKind::mask> {
  using value_type = std::uint8_t;
};

// A dense voxel grid, z-outermost row-major. The kind tag keeps images,
// soft predictions and binary masks from being mixed up.
template <GridKind K>
struct Grid {
  using value_type = typename GridTraits<K>::value_type;
  static constexpr GridKind kind = K;

  VolumeGeometry geometry;
  std::vector<value_type> values;

  Grid() = default;
  explicit Grid(const VolumeGeometry& g, value_type fill = value_type{})
      : geometry(g.validated()), values(g.voxel_count(), fill) {}
  Grid(const VolumeGeometry& g, std::vector<value_type> v)
      : geometry(g.validated()), values(std::move(v)) {
    if (values.size() != g.voxel_count())
      fail(Errc::shape_mismatch, "grid payload does not match its geometry");
  }

  value_type& at(int z, int y, int x) { return values[geometry.index(z, y, x)]; }
  const value_type& at(int z, int y, int x) const { return values[geometry.index(z, y, x)]; }

  std::size_t size() const { return values.size(); }

  bool operator==(const Grid&) const = default;
};

using ScalarVolume = Grid<GridKind::scalar>;
using SoftMask = Grid<GridKind::soft>;
using BinaryMask = Grid<GridKind::mask>;

inline std::size_t count_foreground(const BinaryMask& m) {
  return static_cast<std::size_t>(std::count(m.values.begin(), m.values.end(), std::uint8_t{1}));
}

template <GridKind A, GridKind B>
void require_same_geometry(const Grid<A>& a, const Grid<B>& b) {
  if (a.geometry.dims != b.geometry.dims)
    fail(Errc::shape_mismatch, "grids have different dimensions");
}

inline constexpr double kHuLow = -1000.0;
inline constexpr double kHuHigh = 400.0;

inline float hu_to_unit(double hu) {
  return static_cast<float>(std::clamp((hu - kHuLow) / (kHuHigh - kHuLow), 0.0, 1.0));
}

// Linear map of [-1000, 400] HU onto [0, 1], clamped.
inline ScalarVolume hu_window(const ScalarVolume& hu) {
  ScalarVolume out = hu;
  for (auto& v : out.values) v = hu_to_unit(v);
  return out;
}

// Cube of side_mm centred on center_mm, copied voxel-for-voxel from the scan.
// Per-axis voxel count is round-half-up(side / spacing); voxels outside the
// scan are filled with 0 (air after windowing).
template <GridKind K>
Grid<K> extract_cube(const Grid<K>& scan, const Vec3& center_mm, double side_mm) {
  if (!(side_mm > 0.0)) fail(Errc::invalid_argument, "cube side must be > 0");
  const auto& g = scan.geometry;
  VolumeGeometry out_g = g;
  std::array<int, 3> start{};
  for (int a = 0; a < 3; ++a) {
    const int n = static_cast<int>(round_half_up(side_mm / g.spacing_mm[a]));
    out_g.dims[a] = std::max(n, 1);
    const double c = (center_mm[a] - g.origin_mm[a]) / g.spacing_mm[a];
    start[a] = static_cast<int>(round_half_up(c - (out_g.dims[a] - 1) / 2.0));
    out_g.origin_mm[a] = g.origin_mm[a] + start[a] * g.spacing_mm[a];
    if (start[a] + out_g.dims[a] <= 0 || start[a] >= g.dims[a])
      fail(Errc::out_of_bounds, "cube lies entirely outside the scan");
  }
  Grid<K> out(out_g);
  for (int z = 0; z < out_g.dims[0]; ++z) {
    const int sz = start[0] + z;
    if (sz < 0 || sz >= g.dims[0]) continue;
    for (int y = 0; y < out_g.dims[1]; ++y) {
      const int sy = start[1] + y;
      if (sy < 0 || sy >= g.dims[1]) continue;
      for (int x = 0; x < out_g.dims[2]; ++x) {
        const int sx = start[2] + x;
        if (sx < 0 || sx >= g.dims[2]) continue;
        out.at(z, y, x) = scan.at(sz, sy, sx);
      }
    }
  }
  return out;
}

// Continuous source index for output index i when an axis of n_src samples
// is resampled to n_dst samples covering the same physical extent.
inline double resample_source_coord(int i, int n_src, int n_dst) {
  return (i + 0.5) * static_cast<double>(n_src) / n_dst - 0.5;
}

inline double resample_dest_coord(double src, int n_src, int n_dst) {
  return (src + 0.5) * static_cast<double>(n_dst) / n_src - 0.5;
}

inline VolumeGeometry resampled_geometry(const VolumeGeometry& g, const std::array<int, 3>& dims) {
  VolumeGeometry out = g;
  for (int a = 0; a < 3; ++a) {
    if (dims[a] < 1) fail(Errc::invalid_argument, "target dims must be >= 1");
    out.dims[a] = dims[a];
    out.spacing_mm[a] = g.dims[a] * g.spacing_mm[a] / dims[a];
    out.origin_mm[a] = g.origin_mm[a] - 0.5 * g.spacing_mm[a] + 0.5 * out.spacing_mm[a];
  }
  return out;
}

// Trilinear sample at a continuous voxel position, clamped to the grid.
template <class T>
double trilinear(const std::vector<T>& values, const VolumeGeometry& g, const Vec3& p) {
  std::array<int, 3> i0{};
  std::array<int, 3> i1{};
  std::array<double, 3> f{};
  for (int a = 0; a < 3; ++a) {
    const double c = std::clamp(p[a], 0.0, static_cast<double>(g.dims[a] - 1));
    i0[a] = static_cast<int>(std::floor(c));
    i1[a] = std::min(i0[a] + 1, g.dims[a] - 1);
    f[a] = c - i0[a];
  }
  auto v = [&](int z, int y, int x) { return static_cast<double>(values[g.index(z, y, x)]); };
  const double c00 = v(i0[0], i0[1], i0[2]) * (1 - f[2]) + v(i0[0], i0[1], i1[2]) * f[2];
  const double c01 = v(i0[0], i1[1], i0[2]) * (1 - f[2]) + v(i0[0], i1[1], i1[2]) * f[2];
  const double c10 = v(i1[0], i0[1], i0[2]) * (1 - f[2]) + v(i1[0], i0[1], i1[2]) * f[2];
  const double c11 = v(i1[0], i1[1], i0[2]) * (1 - f[2]) + v(i1[0], i1[1], i1[2]) * f[2];
  const double c0 = c00 * (1 - f[1]) + c01 * f[1];
  const double c1 = c10 * (1 - f[1]) + c11 * f[1];
  return c0 * (1 - f[0]) + c1 * f[0];
}

// Trilinear resampling onto a grid of the given dims spanning the same
// physical extent. Output values stay inside the input's [min, max].
template <GridKind K>
  requires(K != GridKind::mask)
Grid<K> resample(const Grid<K>& in, const std::array<int, 3>& dims) {
  const auto& g = in.geometry;
  Grid<K> out(resampled_geometry(g, dims));
  if (dims == g.dims) {
    out.values = in.values;
    return out;
  }
  for (int z = 0; z < dims[0]; ++z) {
    const double sz = resample_source_coord(z, g.dims[0], dims[0]);
    for (int y = 0; y < dims[1]; ++y) {
      const double sy = resample_source_coord(y, g.dims[1], dims[1]);
      for (int x = 0; x < dims[2]; ++x) {
        const double sx = resample_source_coord(x, g.dims[2], dims[2]);
        out.at(z, y, x) = static_cast<float>(trilinear(in.values, g, {sz, sy, sx}));
      }
    }
  }
  return out;
}

template <GridKind K>
  requires(K != GridKind::mask)
Grid<K> resample_iso(const Grid<K>& in, int side) {
  if (side < 1) fail(Errc::invalid_argument, "target side must be >= 1");
  return resample(in, {side, side, side});
}

// Nearest-neighbour resampling for masks.
inline BinaryMask resample_nearest(const BinaryMask& in, const std::array<int, 3>& dims) {
  const auto& g = in.geometry;
  BinaryMask out(resampled_geometry(g, dims));
  for (int z = 0; z < dims[0]; ++z) {
    const int sz = std::clamp(static_cast<int>(round_half_up(resample_source_coord(z, g.dims[0], dims[0]))), 0, g.dims[0] - 1);
    for (int y = 0; y < dims[1]; ++y) {
      const int sy = std::clamp(static_cast<int>(round_half_up(resample_source_coord(y, g.dims[1], dims[1]))), 0, g.dims[1] - 1);
      for (int x = 0; x < dims[2]; ++x) {
        const int sx = std::clamp(static_cast<int>(round_half_up(resample_source_coord(x, g.dims[2], dims[2]))), 0, g.dims[2] - 1);
        out.at(z, y, x) = in.at(sz, sy, sx);
      }
    }
  }
  return out;
}

// 1 where soft >= t.
inline BinaryMask threshold(const SoftMask& soft, double t = 0.5) {
  if (!(t >= 0.0 && t <= 1.0)) fail(Errc::invalid_argument, "threshold must lie in [0, 1]");
  BinaryMask out(soft.geometry);
  for (std::size_t i = 0; i < soft.size(); ++i) out.values[i] = soft.values[i] >= t ? 1 : 0;
  return out;
}

inline SoftMask to_soft(const BinaryMask& m) {
  SoftMask out(m.geometry);
  for (std::size_t i = 0; i < m.size(); ++i) out.values[i] = m.values[i];
  return out;
}

}  // namespace iwnet
