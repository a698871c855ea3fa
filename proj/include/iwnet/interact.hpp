#pragma once

#include <algorithm>
#include <cmath>
#include <vector>

#include "iwnet/field.hpp"
#include "iwnet/volgrid.hpp"

namespace iwnet {

enum class PointSource { simulated, user };

struct Interaction {
  PointSource source = PointSource::simulated;
  PointPair pair;
};

inline int centroid_slice(const BinaryMask& m) {
  const auto& g = m.geometry;
  double sz = 0.0;
  std::size_t n = 0;
  for (std::size_t i = 0; i < m.size(); ++i) {
    if (!m.values[i]) continue;
    sz += g.coords(i)[0];
    ++n;
  }
  if (n == 0) fail(Errc::empty_mask, "cannot place a stroke on an empty mask");
  return static_cast<int>(round_half_up(sz / static_cast<double>(n)));
}

// In-slice foreground pixels with a background or out-of-grid 4-neighbour,
// ordered by (y, x).
inline std::vector<std::array<int, 2>> slice_boundary(const BinaryMask& m, int z) {
  const auto& g = m.geometry;
  std::vector<std::array<int, 2>> out;
  auto fg = [&](int y, int x) { return y >= 0 && x >= 0 && y < g.dims[1] && x < g.dims[2] && m.values[g.index(z, y, x)]; };
  for (int y = 0; y < g.dims[1]; ++y)
    for (int x = 0; x < g.dims[2]; ++x)
      if (fg(y, x) && (!fg(y - 1, x) || !fg(y + 1, x) || !fg(y, x - 1) || !fg(y, x + 1))) out.push_back({y, x});
  return out;
}

// The two most distant boundary pixels of the axial slice through the
// centroid. Ties go to the pair that comes first in (y, x) order.
inline PointPair simulate_endpoints(const BinaryMask& m) {
  const int z = centroid_slice(m);
  const auto b = slice_boundary(m, z);
  if (b.size() < 2) fail(Errc::degenerate_stroke, "centroid slice has fewer than two boundary pixels");
  const auto& s = m.geometry.spacing_mm;
  double best = -1.0;
  std::size_t bi = 0, bj = 1;
  for (std::size_t i = 0; i < b.size(); ++i)
    for (std::size_t j = i + 1; j < b.size(); ++j) {
      const double dy = (b[i][0] - b[j][0]) * s[1];
      const double dx = (b[i][1] - b[j][1]) * s[2];
      const double d = dy * dy + dx * dx;
      if (d > best) {
        best = d;
        bi = i;
        bj = j;
      }
    }
  const double zd = z;
  return {{zd, static_cast<double>(b[bi][0]), static_cast<double>(b[bi][1])},
          {zd, static_cast<double>(b[bj][0]), static_cast<double>(b[bj][1])}};
}

// Clamps both points into the grid and rejects pairs that land on the same
// voxel.
inline PointPair validate_user_points(const Vec3& p0, const Vec3& p1, const VolumeGeometry& g) {
  g.validate();
  PointPair out{p0, p1};
  for (auto* p : {&out.p0, &out.p1})
    for (int a = 0; a < 3; ++a) {
      if (!std::isfinite((*p)[a])) fail(Errc::invalid_argument, "point coordinates must be finite");
      (*p)[a] = std::clamp((*p)[a], 0.0, static_cast<double>(g.dims[a] - 1));
    }
  check_pair(out, g);
  return out;
}

}  // namespace iwnet
