#pragma once

// Two-point attraction weight map. Each user point anchors a radial unit
// field whose magnitude decays with distance; the first point's field points
// outwards, the second's inwards, and M is the normalised magnitude of their
// sum. Everything is in voxel units of the grid the map is evaluated on.

#include <algorithm>
#include <cmath>
#include <optional>
#include <vector>

#include "iwnet/volgrid.hpp"

namespace iwnet {

struct FieldParams {
  double decay_p = 0.44;
  double epsilon = 1e-3;

  void validate() const {
    if (!(epsilon > 0.0)) fail(Errc::invalid_argument, "field epsilon must be > 0");
    if (!std::isfinite(decay_p) || decay_p < 0.0) fail(Errc::invalid_argument, "decay p must be finite and >= 0");
  }
};

struct PointPair {
  Vec3 p0{};
  Vec3 p1{};

  bool operator==(const PointPair&) const = default;
};

using VectorField = std::vector<Vec3>;

namespace detail {

inline void require_inside(const Vec3& c, const VolumeGeometry& g) {
  for (int a = 0; a < 3; ++a)
    if (!std::isfinite(c[a]) || c[a] < 0.0 || c[a] > g.dims[a] - 1)
      fail(Errc::out_of_bounds, "field center lies outside the volume");
}

inline Vec3 unit_at(const Vec3& v, const Vec3& center, double* dist) {
  const Vec3 d = v - center;
  const double n = norm(d);
  if (dist) *dist = n;
  if (n == 0.0) return {0.0, 0.0, 0.0};
  return {d[0] / n, d[1] / n, d[2] / n};
}

inline Vec3 point_vector(const Vec3& v, const Vec3& center, int sign_a, const FieldParams& fp) {
  double d = 0.0;
  const Vec3 u = unit_at(v, center, &d);
  double w = 1.0 / std::pow(std::max(d, fp.epsilon), fp.decay_p);
  if (sign_a) w = -w;
  return {u[0] * w, u[1] * w, u[2] * w};
}

inline Vec3 voxel_center(const VolumeGeometry& g, std::size_t i) {
  const auto c = g.coords(i);
  return {static_cast<double>(c[0]), static_cast<double>(c[1]), static_cast<double>(c[2])};
}

}  // namespace detail

inline VectorField unit_gradient(const Vec3& center, const VolumeGeometry& g) {
  detail::require_inside(center, g);
  VectorField out(g.voxel_count());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = detail::unit_at(detail::voxel_center(g, i), center, nullptr);
  return out;
}

// Q_a(v) = (-1)^a u(v) / max(d, eps)^p
inline VectorField point_field(const Vec3& center, int sign_a, const FieldParams& fp, const VolumeGeometry& g) {
  fp.validate();
  detail::require_inside(center, g);
  if (sign_a != 0 && sign_a != 1) fail(Errc::invalid_argument, "field sign must be 0 or 1");
  VectorField out(g.voxel_count());
  for (std::size_t i = 0; i < out.size(); ++i)
    out[i] = detail::point_vector(detail::voxel_center(g, i), center, sign_a, fp);
  return out;
}

inline void check_pair(const PointPair& pair, const VolumeGeometry& g) {
  detail::require_inside(pair.p0, g);
  detail::require_inside(pair.p1, g);
  bool same = true;
  for (int a = 0; a < 3; ++a) same = same && round_half_up(pair.p0[a]) == round_half_up(pair.p1[a]);
  if (same) fail(Errc::coincident_points, "the two points fall on the same voxel");
}

// ||Q_0 + Q_1|| before normalisation.
inline std::vector<double> field_magnitude(const PointPair& pair, const FieldParams& fp, const VolumeGeometry& g) {
  fp.validate();
  check_pair(pair, g);
  std::vector<double> out(g.voxel_count());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const Vec3 v = detail::voxel_center(g, i);
    out[i] = norm(detail::point_vector(v, pair.p0, 0, fp) + detail::point_vector(v, pair.p1, 1, fp));
  }
  return out;
}

inline SoftMask attraction_map(const std::optional<PointPair>& pair, const FieldParams& fp, const VolumeGeometry& g) {
  SoftMask m(g);
  if (!pair) return m;
  const auto mag = field_magnitude(*pair, fp, g);
  const double top = *std::max_element(mag.begin(), mag.end());
  if (!(top > 0.0) || !std::isfinite(top)) fail(Errc::non_finite, "weight map has no finite positive maximum");
  for (std::size_t i = 0; i < mag.size(); ++i) m.values[i] = static_cast<float>(mag[i] / top);
  return m;
}

// Distance from v to the closed segment [a, b].
inline double segment_distance(const Vec3& v, const Vec3& a, const Vec3& b) {
  const Vec3 ab = b - a;
  const Vec3 av = v - a;
  const double len2 = ab[0] * ab[0] + ab[1] * ab[1] + ab[2] * ab[2];
  double t = len2 > 0.0 ? (av[0] * ab[0] + av[1] * ab[1] + av[2] * ab[2]) / len2 : 0.0;
  t = std::clamp(t, 0.0, 1.0);
  return norm(v - (a + t * ab));
}

// Mean of M over voxels farther than `radius` from the stroke segment.
inline double off_segment_mean(const SoftMask& m, const PointPair& pair, double radius) {
  double sum = 0.0;
  std::size_t n = 0;
  for (std::size_t i = 0; i < m.size(); ++i) {
    if (segment_distance(detail::voxel_center(m.geometry, i), pair.p0, pair.p1) > radius) {
      sum += m.values[i];
      ++n;
    }
  }
  if (n == 0) fail(Errc::invalid_argument, "no voxels lie off the segment");
  return sum / static_cast<double>(n);
}

struct SweepEntry {
  double decay_p = 0.0;
  SoftMask slice;  // axial slice through the points, dims (1, ny, nx)
  double off_segment_mean = 0.0;
  double max_value = 0.0;
  bool swap_symmetric = false;
};

// Maps for several decay exponents on a cube, with the stroke along x on the
// middle axial slice.
inline std::vector<SweepEntry> field_sweep(const std::vector<double>& ps, int side = 32, double off_radius = 3.0) {
  if (side < 8) fail(Errc::invalid_argument, "sweep side must be >= 8");
  const auto g = VolumeGeometry::cube(side);
  const double mid = side / 2;
  const PointPair pair{{mid, mid, std::floor(side * 0.3)}, {mid, mid, std::floor(side * 0.7)}};
  const PointPair swapped{pair.p1, pair.p0};
  std::vector<SweepEntry> out;
  for (double p : ps) {
    const FieldParams fp{p, 1e-3};
    auto m = attraction_map(pair, fp, g);
    const auto ms = attraction_map(swapped, fp, g);
    SweepEntry e;
    e.decay_p = p;
    e.swap_symmetric = m.values == ms.values;
    e.max_value = *std::max_element(m.values.begin(), m.values.end());
    e.off_segment_mean = off_segment_mean(m, pair, off_radius);
    VolumeGeometry sg{{1, side, side}, g.spacing_mm, {mid, 0.0, 0.0}};
    e.slice = SoftMask(sg);
    const int z = static_cast<int>(mid);
    std::copy_n(m.values.begin() + static_cast<std::ptrdiff_t>(g.index(z, 0, 0)), side * side, e.slice.values.begin());
    out.push_back(std::move(e));
  }
  return out;
}

}  // namespace iwnet
