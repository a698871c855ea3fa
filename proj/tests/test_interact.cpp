#include <gtest/gtest.h>

#include "iwnet/interact.hpp"
#include "support.hpp"

using namespace iwnet;
using namespace iwtest;

namespace {

// Exhaustive farthest pair over an explicitly recomputed boundary.
double brute_max_distance(const BinaryMask& m, int z) {
  const auto& g = m.geometry;
  std::vector<std::array<int, 2>> b;
  for (int y = 0; y < g.dims[1]; ++y)
    for (int x = 0; x < g.dims[2]; ++x) {
      if (!m.at(z, y, x)) continue;
      const int nb[4][2] = {{y - 1, x}, {y + 1, x}, {y, x - 1}, {y, x + 1}};
      bool edge = false;
      for (const auto& q : nb)
        if (q[0] < 0 || q[1] < 0 || q[0] >= g.dims[1] || q[1] >= g.dims[2] || !m.at(z, q[0], q[1])) edge = true;
      if (edge) b.push_back({y, x});
    }
  double best = 0.0;
  for (const auto& p : b)
    for (const auto& q : b) best = std::max(best, std::hypot((p[0] - q[0]) * g.spacing_mm[1], (p[1] - q[1]) * g.spacing_mm[2]));
  return best;
}

}  // namespace

TEST(SimulateEndpoints, BallOnEquator) {
  const auto g = VolumeGeometry::cube(16);
  const auto m = ball(g, {8, 8, 8}, 5.0);
  const auto pair = simulate_endpoints(m);
  EXPECT_EQ(pair.p0[0], 8.0);
  EXPECT_EQ(pair.p1[0], 8.0);
  const double d = std::hypot(pair.p0[1] - pair.p1[1], pair.p0[2] - pair.p1[2]);
  EXPECT_GE(d, 9.0);
  EXPECT_LE(d, 10.0);
  EXPECT_DOUBLE_EQ(d, brute_max_distance(m, 8));
}

TEST(SimulateEndpoints, Errors) {
  const auto g = VolumeGeometry::cube(6);
  try {
    simulate_endpoints(BinaryMask(g));
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), Errc::empty_mask);
  }
  BinaryMask one(g);
  one.at(2, 3, 3) = 1;
  try {
    simulate_endpoints(one);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), Errc::degenerate_stroke);
  }
}

TEST(SimulateEndpoints, CentroidSliceRoundsHalfUp) {
  const auto g = VolumeGeometry::cube(6);
  BinaryMask m(g);
  // two full slices at z = 2 and z = 3: centroid 2.5 -> slice 3
  for (int z : {2, 3})
    for (int y = 1; y < 4; ++y)
      for (int x = 1; x < 4; ++x) m.at(z, y, x) = 1;
  EXPECT_EQ(centroid_slice(m), 3);
  EXPECT_EQ(simulate_endpoints(m).p0[0], 3.0);
}

TEST(SimulateEndpoints, TieBreakIsLexicographic) {
  const auto g = VolumeGeometry::cube(5);
  BinaryMask m(g);
  for (int y = 1; y < 4; ++y)
    for (int x = 1; x < 4; ++x) m.at(2, y, x) = 1;
  // a 3x3 square: both diagonals tie; the first in (y, x) order is (1,1)-(3,3)
  const auto p = simulate_endpoints(m);
  EXPECT_EQ(p.p0, (Vec3{2, 1, 1}));
  EXPECT_EQ(p.p1, (Vec3{2, 3, 3}));
}

TEST(SimulateEndpoints, RandomMasksAreMaximalAndOnBoundary) {
  Rng rng(30);
  for (int trial = 0; trial < 60; ++trial) {
    VolumeGeometry g{{5, 7, 8}, {1.0, rng.uniform(0.5, 2.0), rng.uniform(0.5, 2.0)}, {0, 0, 0}};
    const auto m = random_mask(g, rng, rng.uniform(0.2, 0.8));
    PointPair pair;
    try {
      pair = simulate_endpoints(m);
    } catch (const Error& e) {
      EXPECT_TRUE(e.code() == Errc::empty_mask || e.code() == Errc::degenerate_stroke);
      continue;
    }
    const int z = static_cast<int>(pair.p0[0]);
    EXPECT_EQ(z, centroid_slice(m));
    const auto b = slice_boundary(m, z);
    for (const auto* p : {&pair.p0, &pair.p1}) {
      const std::array<int, 2> yx{static_cast<int>((*p)[1]), static_cast<int>((*p)[2])};
      EXPECT_NE(std::find(b.begin(), b.end(), yx), b.end());
    }
    const double d = std::hypot((pair.p0[1] - pair.p1[1]) * g.spacing_mm[1], (pair.p0[2] - pair.p1[2]) * g.spacing_mm[2]);
    EXPECT_DOUBLE_EQ(d, brute_max_distance(m, z));
    EXPECT_EQ(simulate_endpoints(m), pair);
  }
}

TEST(ValidateUserPoints, ClampAndErrors) {
  const auto g = VolumeGeometry::cube(10);
  const auto ok = validate_user_points({1, 2, 3}, {4, 5, 6}, g);
  EXPECT_EQ(ok.p0, (Vec3{1, 2, 3}));
  EXPECT_EQ(ok.p1, (Vec3{4, 5, 6}));
  const auto cl = validate_user_points({-1, 5, 5}, {3, 12, 5}, g);
  EXPECT_EQ(cl.p0, (Vec3{0, 5, 5}));
  EXPECT_EQ(cl.p1, (Vec3{3, 9, 5}));
  try {
    validate_user_points({2, 2, 2}, {2, 2, 2}, g);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), Errc::coincident_points);
  }
  try {
    validate_user_points({2, std::nan(""), 2}, {5, 5, 5}, g);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), Errc::invalid_argument);
  }
  EXPECT_THROW(validate_user_points({0, 0, 0}, {1, 1, std::numeric_limits<double>::infinity()}, g), Error);
}
