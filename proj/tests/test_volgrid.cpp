#include <gtest/gtest.h>

#include <filesystem>

#include "iwnet/iwv.hpp"
#include "support.hpp"

using namespace iwnet;
using namespace iwtest;

namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  auto p = fs::temp_directory_path() / ("iwnet_test_" + std::to_string(::getpid())) / name;
  fs::create_directories(p.parent_path());
  return p;
}

ScalarVolume random_volume(const VolumeGeometry& g, Rng& rng) {
  ScalarVolume v(g);
  for (auto& x : v.values) x = static_cast<float>(rng.uniform());
  return v;
}

}  // namespace

TEST(HuWindow, Anchors) {
  EXPECT_EQ(hu_to_unit(-1000.0), 0.0f);
  EXPECT_EQ(hu_to_unit(400.0), 1.0f);
  EXPECT_FLOAT_EQ(hu_to_unit(-300.0), 0.5f);
  EXPECT_EQ(hu_to_unit(-2000.0), 0.0f);
  EXPECT_EQ(hu_to_unit(3000.0), 1.0f);
}

TEST(HuWindow, MonotoneAndIdempotentThroughInverse) {
  float prev = -1.0f;
  for (double hu = -1500.0; hu <= 800.0; hu += 7.3) {
    const float v = hu_to_unit(hu);
    EXPECT_GE(v, prev);
    prev = v;
    // map back to HU and window again
    const double back = kHuLow + v * (kHuHigh - kHuLow);
    EXPECT_NEAR(hu_to_unit(back), v, 1e-6);
  }
  ScalarVolume vol(VolumeGeometry::cube(3), -500.0f);
  const auto w = hu_window(vol);
  EXPECT_EQ(w.geometry, vol.geometry);
  for (float x : w.values) EXPECT_NEAR(x, 500.0 / 1400.0, 1e-7);
}

TEST(Geometry, WorldVoxelRoundTrip) {
  VolumeGeometry g{{4, 5, 6}, {2.0, 0.7, 1.3}, {-10.0, 3.5, 100.0}};
  for (std::size_t i = 0; i < g.voxel_count(); ++i) {
    const auto c = g.coords(i);
    EXPECT_EQ(g.index(c[0], c[1], c[2]), i);
    const Vec3 v{double(c[0]), double(c[1]), double(c[2])};
    const auto back = g.voxel(g.world(v));
    for (int a = 0; a < 3; ++a) EXPECT_NEAR(back[a], v[a], 1e-12);
  }
  EXPECT_EQ(g.world({1, 1, 1})[0], -8.0);
}

TEST(Geometry, ValidationRejectsBadDims) {
  VolumeGeometry g{{0, 4, 4}, {1, 1, 1}, {0, 0, 0}};
  EXPECT_THROW(g.validate(), Error);
  g.dims = {1, 1, 1};
  g.spacing_mm[1] = 0.0;
  EXPECT_THROW(g.validate(), Error);
}

TEST(ExtractCube, AlignedCenterNoPadding) {
  ScalarVolume scan(VolumeGeometry::cube(61));
  for (std::size_t i = 0; i < scan.size(); ++i) scan.values[i] = static_cast<float>(i % 97) + 1.0f;
  const auto cube = extract_cube(scan, {30.0, 30.0, 30.0}, 51.0);
  EXPECT_EQ(cube.geometry.dims, (std::array<int, 3>{51, 51, 51}));
  for (float v : cube.values) EXPECT_GT(v, 0.0f);
  EXPECT_EQ(cube.at(0, 0, 0), scan.at(5, 5, 5));
  EXPECT_EQ(cube.at(25, 25, 25), scan.at(30, 30, 30));
  EXPECT_EQ(cube.geometry.world({0, 0, 0}), scan.geometry.world({5, 5, 5}));
}

TEST(ExtractCube, CornerIsZeroPadded) {
  ScalarVolume scan(VolumeGeometry::cube(20), 0.7f);
  const auto cube = extract_cube(scan, {0.0, 0.0, 0.0}, 11.0);
  EXPECT_EQ(cube.geometry.dims, (std::array<int, 3>{11, 11, 11}));
  // voxel (5,5,5) of the cube is scan voxel (0,0,0)
  for (int z = 0; z < 11; ++z)
    for (int y = 0; y < 11; ++y)
      for (int x = 0; x < 11; ++x) {
        const bool inside = z >= 5 && y >= 5 && x >= 5;
        EXPECT_EQ(cube.at(z, y, x), inside ? 0.7f : 0.0f);
      }
}

TEST(ExtractCube, AnisotropicDimsRoundHalfUp) {
  ScalarVolume scan(VolumeGeometry{{40, 80, 80}, {2.0, 1.0, 1.0}, {0, 0, 0}}, 1.0f);
  const auto cube = extract_cube(scan, {40.0, 40.0, 40.0}, 51.0);
  // 51 / 2 = 25.5 -> 26
  EXPECT_EQ(cube.geometry.dims, (std::array<int, 3>{26, 51, 51}));
}

TEST(ExtractCube, EntirelyOutsideFails) {
  ScalarVolume scan(VolumeGeometry::cube(10), 1.0f);
  EXPECT_THROW(extract_cube(scan, {100.0, 100.0, 100.0}, 5.0), Error);
}

TEST(ExtractCube, NeverReadsOutsideScan) {
  // Every output voxel is either a copy of an in-scan voxel at the matching
  // world position or zero; a sentinel-free scan makes out-of-range reads show.
  Rng rng(3);
  ScalarVolume scan(VolumeGeometry{{7, 9, 8}, {1.5, 1.0, 0.5}, {2.0, -1.0, 0.0}});
  for (auto& v : scan.values) v = static_cast<float>(rng.uniform(1.0, 2.0));
  for (int trial = 0; trial < 40; ++trial) {
    const Vec3 c{rng.uniform(-3.0, 14.0), rng.uniform(-6.0, 10.0), rng.uniform(-3.0, 6.0)};
    Grid<GridKind::scalar> cube;
    try {
      cube = extract_cube(scan, c, rng.uniform(2.0, 9.0));
    } catch (const Error&) {
      continue;
    }
    for (std::size_t i = 0; i < cube.size(); ++i) {
      const auto ci = cube.geometry.coords(i);
      const auto w = cube.geometry.world({double(ci[0]), double(ci[1]), double(ci[2])});
      const auto sv = scan.geometry.voxel(w);
      std::array<int, 3> s{};
      for (int a = 0; a < 3; ++a) s[a] = static_cast<int>(std::lround(sv[a]));
      if (scan.geometry.contains(s[0], s[1], s[2]))
        EXPECT_EQ(cube.values[i], scan.at(s[0], s[1], s[2]));
      else
        EXPECT_EQ(cube.values[i], 0.0f);
    }
  }
}

TEST(Resample, ConstantStaysConstant) {
  ScalarVolume v(VolumeGeometry{{5, 7, 6}, {1.0, 2.0, 0.5}, {0, 0, 0}}, 0.3f);
  const auto r = resample_iso(v, 9);
  for (float x : r.values) EXPECT_FLOAT_EQ(x, 0.3f);
  EXPECT_NEAR(r.geometry.spacing_mm[1], 7 * 2.0 / 9, 1e-12);
}

TEST(Resample, IdentityIsExact) {
  Rng rng(1);
  const auto v = random_volume(VolumeGeometry::cube(6), rng);
  const auto r = resample_iso(v, 6);
  for (std::size_t i = 0; i < v.size(); ++i) EXPECT_NEAR(r.values[i], v.values[i], 1e-6);
}

TEST(Resample, LinearRampMatchesClosedForm) {
  const int n = 8;
  ScalarVolume v(VolumeGeometry::cube(n));
  for (int z = 0; z < n; ++z)
    for (int y = 0; y < n; ++y)
      for (int x = 0; x < n; ++x) v.at(z, y, x) = static_cast<float>(0.1 * x);
  const auto r = resample(v, {n, n, 2 * n});
  for (int x = 0; x < 2 * n; ++x) {
    // inside the sampled range the ramp is reproduced; outside it is clamped
    const double src = resample_source_coord(x, n, 2 * n);
    const double expect = 0.1 * std::clamp(src, 0.0, double(n - 1));
    EXPECT_NEAR(r.at(3, 4, x), expect, 1e-6);
  }
}

TEST(Resample, StaysWithinInputRange) {
  Rng rng(2);
  const auto v = random_volume(VolumeGeometry{{5, 6, 7}, {1, 1, 1}, {0, 0, 0}}, rng);
  const auto [lo, hi] = std::minmax_element(v.values.begin(), v.values.end());
  const auto r = resample(v, {11, 4, 13});
  for (float x : r.values) {
    EXPECT_GE(x, *lo);
    EXPECT_LE(x, *hi);
  }
}

TEST(Resample, UpThenDownRecoversSmoothInput) {
  const int n = 16;
  ScalarVolume v(VolumeGeometry::cube(n));
  for (int z = 0; z < n; ++z)
    for (int y = 0; y < n; ++y)
      for (int x = 0; x < n; ++x)
        v.at(z, y, x) = static_cast<float>(0.5 + 0.25 * std::sin(0.3 * x) * std::cos(0.25 * y) + 0.1 * std::sin(0.2 * z));
  const auto back = resample_iso(resample_iso(v, 2 * n), n);
  double worst = 0.0;
  for (std::size_t i = 0; i < v.size(); ++i) worst = std::max(worst, double(std::abs(back.values[i] - v.values[i])));
  EXPECT_LT(worst, 0.05);
}

TEST(Resample, BadTargetFails) {
  ScalarVolume v(VolumeGeometry::cube(4));
  EXPECT_THROW(resample_iso(v, 0), Error);
}

TEST(Threshold, BoundaryConvention) {
  SoftMask s(VolumeGeometry::cube(2), 0.5f);
  for (auto v : threshold(s, 0.5).values) EXPECT_EQ(v, 1);
  SoftMask z(VolumeGeometry::cube(2), 0.0f);
  for (auto v : threshold(z, 0.5).values) EXPECT_EQ(v, 0);
  SoftMask two(VolumeGeometry{{1, 1, 2}, {1, 1, 1}, {0, 0, 0}}, std::vector<float>{0.49f, 0.51f});
  EXPECT_EQ(threshold(two, 0.5).values, (std::vector<std::uint8_t>{0, 1}));
  EXPECT_THROW(threshold(two, 1.5), Error);
}

TEST(Iwv, RoundTripAllKinds) {
  Rng rng(4);
  const VolumeGeometry g{{8, 8, 8}, {1.25, 0.5, 2.0}, {-3.0, 1e-3, 7.5}};
  const auto v = random_volume(g, rng);
  save_volume(v, scratch("vol"));
  EXPECT_EQ(load_volume<GridKind::scalar>(scratch("vol.json")), v);

  SoftMask s(g);
  for (auto& x : s.values) x = static_cast<float>(rng.uniform());
  save_volume(s, scratch("soft.raw"));
  EXPECT_EQ(load_volume<GridKind::soft>(scratch("soft")), s);

  const auto m = random_mask(g, rng);
  save_volume(m, scratch("mask"));
  EXPECT_EQ(load_volume<GridKind::mask>(scratch("mask")), m);
  EXPECT_TRUE(std::holds_alternative<BinaryMask>(load_any(scratch("mask"))));
}

TEST(Iwv, BitExactSpecialFloats) {
  ScalarVolume v(VolumeGeometry{{1, 1, 4}, {1, 1, 1}, {0, 0, 0}},
                 std::vector<float>{-0.0f, 1e-40f, std::numeric_limits<float>::max(), 0.1f});
  const auto back = decode<GridKind::scalar>(iwv_header(v), encode_payload(v));
  for (std::size_t i = 0; i < 4; ++i)
    EXPECT_EQ(std::bit_cast<std::uint32_t>(back.values[i]), std::bit_cast<std::uint32_t>(v.values[i]));
}

TEST(Iwv, TruncatedPayload) {
  ScalarVolume v(VolumeGeometry::cube(3), 1.0f);
  auto bytes = encode_payload(v);
  bytes.pop_back();
  try {
    decode<GridKind::scalar>(iwv_header(v), bytes);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), Errc::payload_length);
  }
}

TEST(Iwv, HeaderValidation) {
  ScalarVolume v(VolumeGeometry::cube(4), 1.0f);
  auto h = iwv_header(v);
  h["dims"] = {0, 4, 4};
  try {
    decode<GridKind::scalar>(h, "");
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), Errc::invalid_geometry);
  }
  h = iwv_header(v);
  h["format"] = "IWV2";
  EXPECT_THROW(decode<GridKind::scalar>(h, encode_payload(v)), Error);
  h = iwv_header(v);
  h.erase("spacing_mm");
  EXPECT_THROW(decode<GridKind::scalar>(h, encode_payload(v)), Error);
  h = iwv_header(v);
  h["dtype"] = "u8";
  EXPECT_THROW(decode<GridKind::scalar>(h, encode_payload(v)), Error);
}

TEST(Iwv, MaskPayloadMustBeBinary) {
  BinaryMask m(VolumeGeometry::cube(2));
  auto bytes = encode_payload(m);
  bytes[3] = 2;
  EXPECT_THROW(decode<GridKind::mask>(iwv_header(m), bytes), Error);
}
