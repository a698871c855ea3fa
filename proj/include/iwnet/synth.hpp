#pragma once

// Synthetic nodule scenes: a rotated ellipsoid with a smooth intensity
// profile in noisy parenchyma, an optional vessel or wall attachment, and
// several annotator masks obtained by smoothly perturbing the true surface.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <numbers>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "iwnet/interact.hpp"
#include "iwnet/iwv.hpp"
#include "iwnet/metrics.hpp"

namespace iwnet {

enum class Attachment { none, vessel, wall };

inline const char* attachment_name(Attachment a) {
  switch (a) {
    case Attachment::none: return "none";
    case Attachment::vessel: return "vessel";
    case Attachment::wall: return "wall";
  }
  return "?";
}

inline Attachment parse_attachment(const std::string& s) {
  if (s == "none") return Attachment::none;
  if (s == "vessel") return Attachment::vessel;
  if (s == "wall") return Attachment::wall;
  fail(Errc::invalid_argument, "unknown attachment '" + s + "'");
}

// Generator constants on the post-window [0, 1] scale.
inline constexpr double kParenchyma = 0.15;

inline double texture_core_intensity(Texture t) {
  switch (t) {
    case Texture::solid: return 0.85;
    case Texture::sub_solid: return 0.6;
    case Texture::non_solid: return 0.45;
  }
  return 0.85;
}

// Width (voxels) of the logistic edge of the intensity profile.
inline double texture_softness(Texture t) {
  switch (t) {
    case Texture::solid: return 0.35;
    case Texture::sub_solid: return 0.6;
    case Texture::non_solid: return 0.9;
  }
  return 0.35;
}

struct NoduleSpec {
  int side = 32;
  double spacing_mm = 1.0;
  Vec3 center{15.5, 15.5, 15.5};         // voxel coordinates
  std::array<double, 3> semi_axes{4, 4, 4};  // voxels, in the rotated frame
  std::array<double, 3> rotation{0, 0, 0};   // z-y-x Euler angles, radians
  Texture texture = Texture::solid;
  double core_intensity = 0.85;
  double boundary_softness = 0.35;
  Attachment attachment = Attachment::none;
  Vec3 attachment_dir{0, 0, 1};  // unit vector from the centre towards the attachment
  double vessel_radius = 1.0;
  double noise_sigma = 0.03;
  int annotators = 3;
  double perturbation = 0.1;  // relative radial amplitude of annotator disagreement
  std::uint64_t seed = 0;

  void validate() const {
    if (side < 8) fail(Errc::invalid_argument, "synthetic volume side must be >= 8");
    if (!(spacing_mm > 0.0)) fail(Errc::invalid_argument, "spacing must be > 0");
    for (double a : semi_axes)
      if (!(a >= 1.5)) fail(Errc::invalid_argument, "semi-axes must be >= 1.5 voxels");
    for (double v : {core_intensity, kParenchyma})
      if (!(v >= 0.0 && v <= 1.0)) fail(Errc::invalid_argument, "intensities must lie in [0, 1]");
    if (!(boundary_softness > 0.0)) fail(Errc::invalid_argument, "boundary softness must be > 0");
    if (!(noise_sigma >= 0.0)) fail(Errc::invalid_argument, "noise sigma must be >= 0");
    if (annotators < 1 || annotators > 4) fail(Errc::invalid_argument, "annotators must be in [1, 4]");
    if (!(perturbation >= 0.0 && perturbation <= 0.15)) fail(Errc::invalid_argument, "perturbation must be in [0, 0.15]");
    const double reach = *std::max_element(semi_axes.begin(), semi_axes.end()) * (1.0 + perturbation) + 1.0;
    for (int a = 0; a < 3; ++a)
      if (center[a] - reach < 0.0 || center[a] + reach > side - 1)
        fail(Errc::out_of_bounds, "nodule is not fully inside the volume");
  }
};

inline void to_json(nlohmann::json& j, const NoduleSpec& s) {
  j = {{"side", s.side},
       {"spacing_mm", s.spacing_mm},
       {"center", s.center},
       {"semi_axes", s.semi_axes},
       {"rotation", s.rotation},
       {"texture", texture_name(s.texture)},
       {"core_intensity", s.core_intensity},
       {"boundary_softness", s.boundary_softness},
       {"attachment", attachment_name(s.attachment)},
       {"attachment_dir", s.attachment_dir},
       {"vessel_radius", s.vessel_radius},
       {"noise_sigma", s.noise_sigma},
       {"annotators", s.annotators},
       {"perturbation", s.perturbation},
       {"seed", s.seed}};
}

inline void from_json(const nlohmann::json& j, NoduleSpec& s) {
  j.at("side").get_to(s.side);
  j.at("spacing_mm").get_to(s.spacing_mm);
  j.at("center").get_to(s.center);
  j.at("semi_axes").get_to(s.semi_axes);
  j.at("rotation").get_to(s.rotation);
  s.texture = parse_texture(j.at("texture").get<std::string>());
  j.at("core_intensity").get_to(s.core_intensity);
  j.at("boundary_softness").get_to(s.boundary_softness);
  s.attachment = parse_attachment(j.at("attachment").get<std::string>());
  j.at("attachment_dir").get_to(s.attachment_dir);
  j.at("vessel_radius").get_to(s.vessel_radius);
  j.at("noise_sigma").get_to(s.noise_sigma);
  j.at("annotators").get_to(s.annotators);
  j.at("perturbation").get_to(s.perturbation);
  j.at("seed").get_to(s.seed);
}

struct SynthCase {
  std::string id;
  ScalarVolume volume;
  AnnotationSet annotations;
  NoduleSpec spec;
};

namespace detail {

using Mat3 = std::array<std::array<double, 3>, 3>;

inline Mat3 euler_zyx(const std::array<double, 3>& r) {
  const double ca = std::cos(r[0]), sa = std::sin(r[0]);
  const double cb = std::cos(r[1]), sb = std::sin(r[1]);
  const double cc = std::cos(r[2]), sc = std::sin(r[2]);
  // rotations about the z, y and x axes of a (z, y, x) coordinate, composed
  const Mat3 rz{{{1, 0, 0}, {0, ca, -sa}, {0, sa, ca}}};
  const Mat3 ry{{{cb, 0, sb}, {0, 1, 0}, {-sb, 0, cb}}};
  const Mat3 rx{{{cc, -sc, 0}, {sc, cc, 0}, {0, 0, 1}}};
  auto mul = [](const Mat3& a, const Mat3& b) {
    Mat3 c{};
    for (int i = 0; i < 3; ++i)
      for (int j = 0; j < 3; ++j)
        for (int k = 0; k < 3; ++k) c[i][j] += a[i][k] * b[k][j];
    return c;
  };
  return mul(mul(rz, ry), rx);
}

// Position in the nodule frame, scaled so the true surface is the unit sphere.
struct EllipsoidFrame {
  Vec3 center;
  Mat3 rot;
  std::array<double, 3> axes;

  explicit EllipsoidFrame(const NoduleSpec& s) : center(s.center), rot(euler_zyx(s.rotation)), axes(s.semi_axes) {}

  Vec3 normalized(const Vec3& v) const {
    const Vec3 d = v - center;
    Vec3 q{};
    for (int i = 0; i < 3; ++i) q[i] = (rot[0][i] * d[0] + rot[1][i] * d[1] + rot[2][i] * d[2]) / axes[i];
    return q;
  }
};

// Low-order smooth function on the sphere: constant + linear + quadratic
// terms in the direction cosines, scaled to a given maximum magnitude.
struct RadialField {
  double c0 = 0.0;
  Vec3 c1{};
  Mat3 c2{};

  double raw(const Vec3& u) const {
    double v = c0;
    for (int i = 0; i < 3; ++i) {
      v += c1[i] * u[i];
      for (int j = 0; j < 3; ++j) v += c2[i][j] * u[i] * u[j];
    }
    return v;
  }

  static RadialField random(Rng& rng, double amplitude) {
    RadialField f;
    f.c0 = rng.uniform(-1, 1);
    for (int i = 0; i < 3; ++i) {
      f.c1[i] = rng.uniform(-1, 1);
      for (int j = 0; j < 3; ++j) f.c2[i][j] = rng.uniform(-1, 1);
    }
    // bound |f| by sampling the sphere on a fixed Fibonacci lattice
    double peak = 0.0;
    const int n = 400;
    for (int k = 0; k < n; ++k) {
      const double z = 1.0 - 2.0 * (k + 0.5) / n;
      const double r = std::sqrt(1.0 - z * z);
      const double phi = k * std::numbers::pi * (3.0 - std::sqrt(5.0));
      peak = std::max(peak, std::abs(f.raw({z, r * std::sin(phi), r * std::cos(phi)})));
    }
    const double s = peak > 0.0 ? amplitude / peak : 0.0;
    f.c0 *= s;
    for (int i = 0; i < 3; ++i) {
      f.c1[i] *= s;
      for (int j = 0; j < 3; ++j) f.c2[i][j] *= s;
    }
    return f;
  }
};

inline double logistic(double t) { return 1.0 / (1.0 + std::exp(-t)); }

// Number of 6-connected foreground components.
inline int component_count(const BinaryMask& m) {
  const auto& g = m.geometry;
  std::vector<std::uint8_t> seen(m.size(), 0);
  std::vector<std::size_t> stack;
  int comps = 0;
  for (std::size_t s = 0; s < m.size(); ++s) {
    if (!m.values[s] || seen[s]) continue;
    ++comps;
    seen[s] = 1;
    stack.push_back(s);
    while (!stack.empty()) {
      const auto c = g.coords(stack.back());
      stack.pop_back();
      static constexpr int off[6][3] = {{1, 0, 0}, {-1, 0, 0}, {0, 1, 0}, {0, -1, 0}, {0, 0, 1}, {0, 0, -1}};
      for (const auto& o : off) {
        const int z = c[0] + o[0], y = c[1] + o[1], x = c[2] + o[2];
        if (!g.contains(z, y, x)) continue;
        const auto j = g.index(z, y, x);
        if (m.values[j] && !seen[j]) {
          seen[j] = 1;
          stack.push_back(j);
        }
      }
    }
  }
  return comps;
}

inline double pairwise_min_iou(const AnnotationSet& ann) {
  double lo = 1.0;
  for (std::size_t i = 0; i < ann.size(); ++i)
    for (std::size_t j = i + 1; j < ann.size(); ++j) lo = std::min(lo, iou(ann[i], ann[j]));
  return lo;
}

}  // namespace detail

inline VolumeGeometry synth_geometry(const NoduleSpec& s) { return VolumeGeometry::cube(s.side, s.spacing_mm); }

// Rasterised true ellipsoid (voxel centres with normalised radius <= 1).
inline BinaryMask true_mask(const NoduleSpec& s) {
  const auto g = synth_geometry(s);
  const detail::EllipsoidFrame f(s);
  BinaryMask m(g);
  for (std::size_t i = 0; i < m.size(); ++i) {
    const auto c = g.coords(i);
    m.values[i] = norm(f.normalized({double(c[0]), double(c[1]), double(c[2])})) <= 1.0 ? 1 : 0;
  }
  return m;
}

inline ScalarVolume render_volume(const NoduleSpec& s) {
  const auto g = synth_geometry(s);
  const detail::EllipsoidFrame f(s);
  const double rmax = *std::max_element(s.semi_axes.begin(), s.semi_axes.end());
  const double rmin = *std::min_element(s.semi_axes.begin(), s.semi_axes.end());
  // vessel axis: through a surface point of the nodule, perpendicular to the
  // attachment direction
  const Vec3& u = s.attachment_dir;
  const Vec3 anchor = s.center + (rmin + 0.5 * s.vessel_radius) * u;
  Vec3 axis = std::abs(u[0]) < 0.9 ? Vec3{1, 0, 0} : Vec3{0, 1, 0};
  const double dot = axis[0] * u[0] + axis[1] * u[1] + axis[2] * u[2];
  axis = axis - dot * u;
  axis = (1.0 / norm(axis)) * axis;
  const double wall_offset = rmax + 0.5;

  Rng noise(derive_seed(s.seed, 0x6e6f697365));
  ScalarVolume v(g);
  for (std::size_t i = 0; i < v.size(); ++i) {
    const auto c = g.coords(i);
    const Vec3 p{double(c[0]), double(c[1]), double(c[2])};
    const Vec3 q = f.normalized(p);
    const double rho = norm(q);
    // distance to the surface along the ray from the centre, in voxels
    const double dist = norm(p - s.center);
    double w = rho > 0.0 ? detail::logistic(dist * (1.0 / rho - 1.0) / s.boundary_softness) : 1.0;
    if (s.attachment == Attachment::vessel) {
      const Vec3 d = p - anchor;
      const double along = d[0] * axis[0] + d[1] * axis[1] + d[2] * axis[2];
      const double radial = norm(d - along * axis);
      w = std::max(w, detail::logistic((s.vessel_radius - radial) / 0.35));
    } else if (s.attachment == Attachment::wall) {
      const Vec3 d = p - s.center;
      const double h = d[0] * u[0] + d[1] * u[1] + d[2] * u[2];
      w = std::max(w, detail::logistic((h - wall_offset) / 0.35));
    }
    double val = kParenchyma + (s.core_intensity - kParenchyma) * w;
    if (s.noise_sigma > 0.0) val += s.noise_sigma * noise.normal();
    v.values[i] = static_cast<float>(std::clamp(val, 0.0, 1.0));
  }
  return v;
}

// One annotator's mask: the true surface displaced radially by a smooth
// random relative amount.
inline BinaryMask perturbed_mask(const NoduleSpec& s, const detail::RadialField& field) {
  const auto g = synth_geometry(s);
  const detail::EllipsoidFrame f(s);
  BinaryMask m(g);
  for (std::size_t i = 0; i < m.size(); ++i) {
    const auto c = g.coords(i);
    const Vec3 q = f.normalized({double(c[0]), double(c[1]), double(c[2])});
    const double rho = norm(q);
    if (rho == 0.0) {
      m.values[i] = 1;
      continue;
    }
    m.values[i] = rho <= 1.0 + field.raw((1.0 / rho) * q) ? 1 : 0;
  }
  return m;
}

inline constexpr double kMinIouVsTruth = 0.5;
inline constexpr double kMinPairwiseIou = 0.4;

inline SynthCase generate_case(const NoduleSpec& spec, const std::string& id = "case") {
  spec.validate();
  SynthCase out;
  out.id = id;
  out.spec = spec;
  out.volume = render_volume(spec);
  const auto truth = true_mask(spec);
  if (count_foreground(truth) == 0) fail(Errc::empty_mask, "nodule rasterises to no voxels");
  Rng rng(derive_seed(spec.seed, 0x616e6e));
  for (int attempt = 0; attempt < 50; ++attempt) {
    AnnotationSet ann;
    for (int k = 0; k < spec.annotators; ++k) {
      for (int tries = 0;; ++tries) {
        if (tries == 50) fail(Errc::invalid_argument, "could not draw a valid annotation for " + id);
        auto m = perturbed_mask(spec, detail::RadialField::random(rng, spec.perturbation));
        if (count_foreground(m) == 0 || detail::component_count(m) != 1) continue;
        if (iou(m, truth) < kMinIouVsTruth) continue;
        try {
          simulate_endpoints(m);
        } catch (const Error&) {
          continue;
        }
        ann.push_back(std::move(m));
        break;
      }
    }
    if (detail::pairwise_min_iou(ann) >= kMinPairwiseIou) {
      out.annotations = std::move(ann);
      return out;
    }
  }
  fail(Errc::invalid_argument, "annotations of " + id + " never reached the agreement floor");
}

struct DatasetConfig {
  int n_cases = 200;
  int side = 32;
  double spacing_mm = 1.0;
  double radius_min_mm = 1.0;
  double radius_max_mm = 8.0;
  std::array<double, 3> texture_mix{0.80, 0.14, 0.06};  // solid, sub-solid, non-solid
  double noise_min = 0.02;
  double noise_max = 0.05;
  std::uint64_t seed = 1;

  void validate() const {
    if (n_cases < 1) fail(Errc::invalid_argument, "n_cases must be >= 1");
    if (!(radius_min_mm > 0.0 && radius_max_mm >= radius_min_mm))
      fail(Errc::invalid_argument, "radius range must satisfy 0 < min <= max");
    if (radius_max_mm * 1.15 + 2.0 > 0.5 * (side - 1) * spacing_mm)
      fail(Errc::invalid_argument, "largest radius does not fit in the volume");
    if (radius_max_mm < 1.5 * spacing_mm)
      fail(Errc::invalid_argument, "radius range lies below the 1.5-voxel minimum semi-axis");
    double total = 0.0;
    for (double r : texture_mix) {
      if (!(r >= 0.0)) fail(Errc::invalid_argument, "texture ratios must be >= 0");
      total += r;
    }
    if (!(total > 0.0)) fail(Errc::invalid_argument, "texture ratios must not all be zero");
    if (!(noise_min >= 0.0 && noise_max >= noise_min)) fail(Errc::invalid_argument, "invalid noise range");
  }
};

inline void to_json(nlohmann::json& j, const DatasetConfig& c) {
  j = {{"n_cases", c.n_cases},         {"side", c.side},
       {"spacing_mm", c.spacing_mm},   {"radius_min_mm", c.radius_min_mm},
       {"radius_max_mm", c.radius_max_mm}, {"texture_mix", c.texture_mix},
       {"noise_min", c.noise_min},     {"noise_max", c.noise_max},
       {"seed", c.seed}};
}

inline void from_json(const nlohmann::json& j, DatasetConfig& c) {
  c.n_cases = j.value("n_cases", c.n_cases);
  c.side = j.value("side", c.side);
  c.spacing_mm = j.value("spacing_mm", c.spacing_mm);
  c.radius_min_mm = j.value("radius_min_mm", c.radius_min_mm);
  c.radius_max_mm = j.value("radius_max_mm", c.radius_max_mm);
  c.texture_mix = j.value("texture_mix", c.texture_mix);
  c.noise_min = j.value("noise_min", c.noise_min);
  c.noise_max = j.value("noise_max", c.noise_max);
  c.seed = j.value("seed", c.seed);
}

// Largest-remainder apportionment of n items to the given ratios.
inline std::array<int, 3> stratified_counts(int n, const std::array<double, 3>& ratios) {
  const double total = ratios[0] + ratios[1] + ratios[2];
  std::array<int, 3> counts{};
  std::array<double, 3> rem{};
  int used = 0;
  for (int k = 0; k < 3; ++k) {
    const double exact = n * ratios[k] / total;
    counts[k] = static_cast<int>(std::floor(exact));
    rem[k] = exact - counts[k];
    used += counts[k];
  }
  while (used < n) {
    int best = 0;
    for (int k = 1; k < 3; ++k)
      if (rem[k] > rem[best]) best = k;
    ++counts[best];
    rem[best] = -1.0;
    ++used;
  }
  return counts;
}

inline Vec3 random_unit(Rng& rng) {
  for (;;) {
    const Vec3 v{rng.normal(), rng.normal(), rng.normal()};
    const double n = norm(v);
    if (n > 1e-6) return (1.0 / n) * v;
  }
}

// Draws the spec of case `index`. Equivalent radius is uniform over the
// requested range (in mm), clipped below at the 1.5-voxel semi-axis minimum.
inline NoduleSpec draw_spec(const DatasetConfig& cfg, Texture texture, std::uint64_t case_seed) {
  Rng rng(case_seed);
  NoduleSpec s;
  s.side = cfg.side;
  s.spacing_mm = cfg.spacing_mm;
  s.texture = texture;
  s.core_intensity = texture_core_intensity(texture);
  s.boundary_softness = texture_softness(texture);
  s.seed = derive_seed(case_seed, 1);
  const double lo = std::max(cfg.radius_min_mm, 1.5 * cfg.spacing_mm + 0.1);
  const double r = rng.uniform(lo, cfg.radius_max_mm) / cfg.spacing_mm;
  // mild anisotropy with the product of the axes preserved
  const double e0 = std::exp(rng.uniform(-0.15, 0.15));
  const double e1 = std::exp(rng.uniform(-0.15, 0.15));
  s.semi_axes = {r * e0, r * e1, r / (e0 * e1)};
  for (double& a : s.semi_axes) a = std::max(a, 1.5);
  s.rotation = {rng.uniform(0, 2 * std::numbers::pi), rng.uniform(0, 2 * std::numbers::pi),
                rng.uniform(0, 2 * std::numbers::pi)};
  const double mid = 0.5 * (cfg.side - 1);
  s.center = {mid + rng.uniform(-1.5, 1.5), mid + rng.uniform(-1.5, 1.5), mid + rng.uniform(-1.5, 1.5)};
  const double a = rng.uniform();
  s.attachment = a < 0.6 ? Attachment::none : (a < 0.85 ? Attachment::vessel : Attachment::wall);
  s.attachment_dir = random_unit(rng);
  s.vessel_radius = rng.uniform(0.7, 1.5);
  s.noise_sigma = rng.uniform(cfg.noise_min, cfg.noise_max);
  s.annotators = rng.integer(2, 4);
  s.perturbation = rng.uniform(0.05, 0.15);
  return s;
}

inline std::string case_id(int index) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "case_%04d", index);
  return buf;
}

// Case i uses the seed derive_seed(cfg.seed, i); redraws (with the next
// attempt's seed) when the realised mean equivalent radius of the
// annotations leaves the requested range.
inline SynthCase generate_indexed_case(const DatasetConfig& cfg, int index, Texture texture) {
  for (std::uint64_t attempt = 0; attempt < 100; ++attempt) {
    const auto seed = derive_seed(derive_seed(cfg.seed, static_cast<std::uint64_t>(index)), attempt);
    auto c = generate_case(draw_spec(cfg, texture, seed), case_id(index));
    const double r = equivalent_radius(c.annotations);
    if (r >= cfg.radius_min_mm && r <= cfg.radius_max_mm) return c;
  }
  fail(Errc::invalid_argument, "could not place a nodule inside the radius range");
}

// Texture assignment is stratified: exact counts by largest remainder,
// positions shuffled with the master seed.
inline std::vector<Texture> texture_plan(const DatasetConfig& cfg) {
  const auto counts = stratified_counts(cfg.n_cases, cfg.texture_mix);
  std::vector<Texture> plan;
  const Texture order[3] = {Texture::solid, Texture::sub_solid, Texture::non_solid};
  for (int k = 0; k < 3; ++k) plan.insert(plan.end(), counts[k], order[k]);
  Rng rng(derive_seed(cfg.seed, 0x7465787475726573));
  rng.shuffle(plan.begin(), plan.end());
  return plan;
}

inline std::vector<SynthCase> generate_dataset(const DatasetConfig& cfg) {
  cfg.validate();
  const auto plan = texture_plan(cfg);
  std::vector<SynthCase> out;
  out.reserve(plan.size());
  for (int i = 0; i < cfg.n_cases; ++i) out.push_back(generate_indexed_case(cfg, i, plan[i]));
  return out;
}

// ---------------------------------------------------------------------------
// On-disk layout: <dir>/case_<id>/{volume, ann_<k>}.{json,raw} + spec.json

inline void save_case(const SynthCase& c, const std::filesystem::path& dir) {
  const auto d = dir / c.id;
  std::filesystem::create_directories(d);
  save_volume(c.volume, d / "volume");
  for (std::size_t k = 0; k < c.annotations.size(); ++k) save_volume(c.annotations[k], d / ("ann_" + std::to_string(k)));
  write_file(d / "spec.json", nlohmann::json(c.spec).dump(2));
}

inline void save_dataset(const std::vector<SynthCase>& cases, const std::filesystem::path& dir) {
  for (const auto& c : cases) save_case(c, dir);
}

inline SynthCase load_case(const std::filesystem::path& d) {
  SynthCase c;
  c.id = d.filename().string();
  c.spec = parse_json_text(read_file(d / "spec.json"), (d / "spec.json").string()).get<NoduleSpec>();
  c.volume = load_volume<GridKind::scalar>(d / "volume");
  for (int k = 0; std::filesystem::exists(d / ("ann_" + std::to_string(k) + ".json")); ++k)
    c.annotations.push_back(load_volume<GridKind::mask>(d / ("ann_" + std::to_string(k))));
  if (c.annotations.empty()) fail(Errc::malformed_format, c.id + " has no annotations");
  for (const auto& a : c.annotations) require_same_geometry(c.volume, a);
  return c;
}

inline std::vector<SynthCase> load_dataset(const std::filesystem::path& dir) {
  if (!std::filesystem::is_directory(dir)) fail(Errc::io_failure, "dataset directory not found: " + dir.string());
  std::vector<std::filesystem::path> dirs;
  for (const auto& e : std::filesystem::directory_iterator(dir))
    if (e.is_directory() && std::filesystem::exists(e.path() / "spec.json")) dirs.push_back(e.path());
  std::sort(dirs.begin(), dirs.end());
  if (dirs.empty()) fail(Errc::invalid_argument, "no cases found in " + dir.string());
  std::vector<SynthCase> out;
  for (const auto& d : dirs) out.push_back(load_case(d));
  return out;
}

}  // namespace iwnet
