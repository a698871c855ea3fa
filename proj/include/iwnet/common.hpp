#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <numbers>
#include <random>
#include <string>

namespace iwnet {

enum class Errc {
  invalid_argument,
  invalid_geometry,
  malformed_format,
  unsupported_version,
  payload_length,
  shape_mismatch,
  empty_mask,
  degenerate_stroke,
  coincident_points,
  non_finite,
  out_of_bounds,
  io_failure,
};

inline const char* errc_name(Errc code) {
  switch (code) {
    case Errc::invalid_argument: return "invalid_argument";
    case Errc::invalid_geometry: return "invalid_geometry";
    case Errc::malformed_format: return "malformed_format";
    case Errc::unsupported_version: return "unsupported_version";
    case Errc::payload_length: return "payload_length";
    case Errc::shape_mismatch: return "shape_mismatch";
    case Errc::empty_mask: return "empty_mask";
    case Errc::degenerate_stroke: return "degenerate_stroke";
    case Errc::coincident_points: return "coincident_points";
    case Errc::non_finite: return "non_finite";
    case Errc::out_of_bounds: return "out_of_bounds";
    case Errc::io_failure: return "io_failure";
  }
  return "unknown";
}

class Error : public std::runtime_error {
 public:
  Error(Errc code, const std::string& message)
      : std::runtime_error(message), code_(code) {}

  Errc code() const noexcept { return code_; }

  // Everything except I/O and numerical blow-ups is caused by bad input.
  bool is_validation() const noexcept {
    return code_ != Errc::io_failure && code_ != Errc::non_finite;
  }

 private:
  Errc code_;
};

[[noreturn]] inline void fail(Errc code, const std::string& message) {
  throw Error(code, message);
}

// Continuous voxel coordinate, always (z, y, x).
using Vec3 = std::array<double, 3>;

inline double norm(const Vec3& v) {
  return std::sqrt(v[0] * v[0] + v[1] * v[1] + v[2] * v[2]);
}

inline Vec3 operator-(const Vec3& a, const Vec3& b) {
  return {a[0] - b[0], a[1] - b[1], a[2] - b[2]};
}

inline Vec3 operator+(const Vec3& a, const Vec3& b) {
  return {a[0] + b[0], a[1] + b[1], a[2] + b[2]};
}

inline Vec3 operator*(double s, const Vec3& a) { return {s * a[0], s * a[1], s * a[2]}; }

inline double round_half_up(double v) { return std::floor(v + 0.5); }

// splitmix64 step; used to derive independent per-case / per-step seeds.
inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

inline std::uint64_t derive_seed(std::uint64_t master, std::uint64_t index) {
  return splitmix64(master ^ splitmix64(index + 1));
}

// Thin wrapper over mt19937_64 with distribution code we own, so a seed
// reproduces the same stream regardless of the standard library's
// distribution implementations.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : engine_(seed) {}

  std::uint64_t next() { return engine_(); }

  // [0, 1)
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Inclusive range.
  int integer(int lo, int hi) {
    const auto span = static_cast<std::uint64_t>(hi - lo) + 1;
    return lo + static_cast<int>(engine_() % span);
  }

  bool bernoulli(double p) { return uniform() < p; }

  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double theta = 2.0 * std::numbers::pi * u2;
    spare_ = r * std::sin(theta);
    has_spare_ = true;
    return r * std::cos(theta);
  }

  template <class It>
  void shuffle(It first, It last) {
    const auto n = static_cast<int>(last - first);
    for (int i = n - 1; i > 0; --i) std::swap(first[i], first[integer(0, i)]);
  }

 private:
  std::mt19937_64 engine_;
  double spare_ = 0.0;
  bool has_spare_ = false;
};

}  // namespace iwnet
