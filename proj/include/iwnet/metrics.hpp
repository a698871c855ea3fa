#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <numbers>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "iwnet/volgrid.hpp"

namespace iwnet {

using AnnotationSet = std::vector<BinaryMask>;
using Voxel = std::array<int, 3>;

inline double iou(const BinaryMask& a, const BinaryMask& b) {
  require_same_geometry(a, b);
  std::size_t inter = 0;
  std::size_t uni = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    inter += a.values[i] & b.values[i];
    uni += a.values[i] | b.values[i];
  }
  if (uni == 0) fail(Errc::empty_mask, "IoU undefined for two empty masks");
  return static_cast<double>(inter) / static_cast<double>(uni);
}

namespace detail {

inline bool is_surface(const BinaryMask& m, int z, int y, int x) {
  static constexpr int off[6][3] = {{-1, 0, 0}, {1, 0, 0}, {0, -1, 0}, {0, 1, 0}, {0, 0, -1}, {0, 0, 1}};
  const auto& g = m.geometry;
  for (const auto& o : off) {
    const int nz = z + o[0], ny = y + o[1], nx = x + o[2];
    if (!g.contains(nz, ny, nx) || !m.values[g.index(nz, ny, nx)]) return true;
  }
  return false;
}

// One pass of the lower-envelope squared distance transform along a line.
// f holds squared distances (inf for no site), s is the sample spacing.
inline void edt_1d(std::vector<double>& f, double s, std::vector<int>& v, std::vector<double>& zb,
                   std::vector<double>& out) {
  const int n = static_cast<int>(f.size());
  constexpr double inf = std::numeric_limits<double>::infinity();
  v.resize(n);
  zb.resize(n + 1);
  out.resize(n);
  int k = -1;
  for (int q = 0; q < n; ++q) {
    if (f[q] == inf) continue;
    const double sq = s * q;
    while (k >= 0) {
      const double sv = s * v[k];
      const double cut = ((f[q] + sq * sq) - (f[v[k]] + sv * sv)) / (2.0 * (sq - sv));
      if (cut <= zb[k]) {
        --k;
      } else {
        ++k;
        v[k] = q;
        zb[k] = cut;
        zb[k + 1] = inf;
        break;
      }
    }
    if (k < 0) {
      k = 0;
      v[0] = q;
      zb[0] = -inf;
      zb[1] = inf;
    }
  }
  if (k < 0) {
    std::fill(out.begin(), out.end(), inf);
  } else {
    int j = 0;
    for (int q = 0; q < n; ++q) {
      const double sq = s * q;
      while (zb[j + 1] < sq) ++j;
      const double d = sq - s * v[j];
      out[q] = d * d + f[v[j]];
    }
  }
  std::copy(out.begin(), out.end(), f.begin());
}

// Squared Euclidean distance (mm^2) from every voxel center to the nearest
// site, exact for anisotropic spacing.
inline std::vector<double> squared_distance_to(const std::vector<Voxel>& sites, const VolumeGeometry& g) {
  constexpr double inf = std::numeric_limits<double>::infinity();
  std::vector<double> d(g.voxel_count(), inf);
  for (const auto& s : sites) d[g.index(s[0], s[1], s[2])] = 0.0;
  std::vector<double> line;
  std::vector<int> v;
  std::vector<double> zb, out;
  const int nz = g.dims[0], ny = g.dims[1], nx = g.dims[2];
  // x, then y, then z
  for (int z = 0; z < nz; ++z)
    for (int y = 0; y < ny; ++y) {
      line.assign(d.begin() + static_cast<std::ptrdiff_t>(g.index(z, y, 0)),
                  d.begin() + static_cast<std::ptrdiff_t>(g.index(z, y, 0)) + nx);
      edt_1d(line, g.spacing_mm[2], v, zb, out);
      std::copy(line.begin(), line.end(), d.begin() + static_cast<std::ptrdiff_t>(g.index(z, y, 0)));
    }
  for (int z = 0; z < nz; ++z)
    for (int x = 0; x < nx; ++x) {
      line.resize(ny);
      for (int y = 0; y < ny; ++y) line[y] = d[g.index(z, y, x)];
      edt_1d(line, g.spacing_mm[1], v, zb, out);
      for (int y = 0; y < ny; ++y) d[g.index(z, y, x)] = line[y];
    }
  for (int y = 0; y < ny; ++y)
    for (int x = 0; x < nx; ++x) {
      line.resize(nz);
      for (int z = 0; z < nz; ++z) line[z] = d[g.index(z, y, x)];
      edt_1d(line, g.spacing_mm[0], v, zb, out);
      for (int z = 0; z < nz; ++z) d[g.index(z, y, x)] = line[z];
    }
  return d;
}

inline double mean_surface_distance(const std::vector<Voxel>& from, const std::vector<double>& sq_to,
                                    const VolumeGeometry& g) {
  double sum = 0.0;
  for (const auto& s : from) sum += std::sqrt(sq_to[g.index(s[0], s[1], s[2])]);
  return sum / static_cast<double>(from.size());
}

}  // namespace detail

// Foreground voxels with a 6-neighbour that is background or outside the grid.
inline std::vector<Voxel> surface_voxels(const BinaryMask& m) {
  std::vector<Voxel> out;
  const auto& d = m.geometry.dims;
  for (int z = 0; z < d[0]; ++z)
    for (int y = 0; y < d[1]; ++y)
      for (int x = 0; x < d[2]; ++x)
        if (m.values[m.geometry.index(z, y, x)] && detail::is_surface(m, z, y, x)) out.push_back({z, y, x});
  if (out.empty()) fail(Errc::empty_mask, "surface of an empty mask");
  return out;
}

// Symmetric average surface distance in mm.
inline double asd(const BinaryMask& a, const BinaryMask& b) {
  require_same_geometry(a, b);
  const auto sa = surface_voxels(a);
  const auto sb = surface_voxels(b);
  const auto& g = a.geometry;
  const double ab = detail::mean_surface_distance(sa, detail::squared_distance_to(sb, g), g);
  const double ba = detail::mean_surface_distance(sb, detail::squared_distance_to(sa, g), g);
  return 0.5 * (ab + ba);
}

// Each annotator in turn is the truth and every other one a prediction.
inline double interobserver_iou(const AnnotationSet& ann) {
  if (ann.size() < 2) fail(Errc::invalid_argument, "inter-observer IoU needs at least two annotations");
  double sum = 0.0;
  std::size_t n = 0;
  for (std::size_t i = 0; i < ann.size(); ++i)
    for (std::size_t j = 0; j < ann.size(); ++j) {
      if (i == j) continue;
      sum += iou(ann[i], ann[j]);
      ++n;
    }
  return sum / static_cast<double>(n);
}

inline double mean_iou_vs_annotators(const BinaryMask& pred, const AnnotationSet& ann) {
  if (ann.empty()) fail(Errc::invalid_argument, "empty annotation set");
  double sum = 0.0;
  for (const auto& s : ann) sum += iou(s, pred);
  return sum / static_cast<double>(ann.size());
}

struct BestOfTwo {
  double iou = 0.0;
  std::vector<bool> kept_corrected;  // per annotator
};

// Per annotator, the better of the corrected and the initial mask by IoU
// (ties keep the initial one), averaged.
inline BestOfTwo corrected_best(const AnnotationSet& ann, const BinaryMask& initial,
                                const std::vector<BinaryMask>& corrected) {
  if (ann.empty()) fail(Errc::invalid_argument, "empty annotation set");
  if (corrected.size() != ann.size())
    fail(Errc::invalid_argument, "need exactly one corrected mask per annotator");
  BestOfTwo out;
  double sum = 0.0;
  for (std::size_t n = 0; n < ann.size(); ++n) {
    const double c = iou(ann[n], corrected[n]);
    const double i = iou(ann[n], initial);
    out.kept_corrected.push_back(c > i);
    sum += std::max(c, i);
  }
  out.iou = sum / static_cast<double>(ann.size());
  return out;
}

inline double corrected_best_iou(const AnnotationSet& ann, const BinaryMask& initial,
                                 const std::vector<BinaryMask>& corrected) {
  return corrected_best(ann, initial, corrected).iou;
}

inline double equivalent_radius(const BinaryMask& m) {
  const auto n = count_foreground(m);
  if (n == 0) fail(Errc::empty_mask, "equivalent radius of an empty mask");
  const double v = static_cast<double>(n) * m.geometry.voxel_volume_mm3();
  return std::cbrt(3.0 * v / (4.0 * std::numbers::pi));
}

inline double equivalent_radius(const AnnotationSet& ann) {
  if (ann.empty()) fail(Errc::invalid_argument, "empty annotation set");
  double sum = 0.0;
  for (const auto& m : ann) sum += equivalent_radius(m);
  return sum / static_cast<double>(ann.size());
}

enum class Texture { solid, sub_solid, non_solid };

inline const char* texture_name(Texture t) {
  switch (t) {
    case Texture::solid: return "solid";
    case Texture::sub_solid: return "sub-solid";
    case Texture::non_solid: return "non-solid";
  }
  return "unknown";
}

inline Texture parse_texture(const std::string& s) {
  if (s == "solid") return Texture::solid;
  if (s == "sub-solid") return Texture::sub_solid;
  if (s == "non-solid") return Texture::non_solid;
  fail(Errc::invalid_argument, "unknown texture '" + s + "'");
}

// Average texture score on the 1..5 annotation scale.
inline Texture texture_from_score(double score) {
  if (score <= 2.0) return Texture::non_solid;
  if (score == 5.0) return Texture::solid;
  return Texture::sub_solid;
}

// ---------------------------------------------------------------------------
// Reports

struct EvalRecord {
  std::string nodule_id;
  double iou = 0.0;
  double asd_mm = 0.0;  // NaN when the prediction is empty
  double radius_mm = 0.0;
  Texture texture = Texture::solid;
  bool corrected = false;
};

inline std::string radius_bin(double radius_mm) {
  const int k = static_cast<int>(std::floor(radius_mm));
  return "[" + std::to_string(k) + "," + std::to_string(k + 1) + ")";
}

inline std::string records_csv(const std::vector<EvalRecord>& records) {
  std::ostringstream os;
  os.precision(17);
  os << "nodule_id,iou,asd_mm,radius_mm,texture,corrected\n";
  for (const auto& r : records) {
    os << r.nodule_id << ',' << r.iou << ',';
    if (std::isfinite(r.asd_mm)) os << r.asd_mm;
    else os << "nan";
    os << ',' << r.radius_mm << ',' << texture_name(r.texture) << ',' << (r.corrected ? 1 : 0) << '\n';
  }
  return os.str();
}

struct PairedRecord {
  const EvalRecord* initial = nullptr;
  const EvalRecord* corrected = nullptr;
};

namespace detail {

struct GroupStats {
  std::size_t n = 0;
  double iou_initial = 0.0;
  double iou_corrected = 0.0;
  std::size_t improved = 0;

  void add(const PairedRecord& p) {
    ++n;
    iou_initial += p.initial->iou;
    if (p.corrected) {
      iou_corrected += p.corrected->iou;
      if (p.corrected->iou > p.initial->iou) ++improved;
    }
  }

  nlohmann::json to_json(bool has_corrected) const {
    nlohmann::json j = {{"n", n}, {"mean_iou_initial", n ? iou_initial / n : 0.0}};
    if (has_corrected) {
      j["mean_iou_corrected"] = n ? iou_corrected / n : 0.0;
      j["mean_iou_gain"] = n ? (iou_corrected - iou_initial) / n : 0.0;
      j["pct_improved"] = n ? 100.0 * improved / n : 0.0;
    }
    return j;
  }
};

}  // namespace detail

// Pairs initial and corrected rows by nodule id and summarises them.
// Means over ASD only use nodules where every involved ASD is defined.
inline nlohmann::json summarize(const std::vector<EvalRecord>& records) {
  std::map<std::string, PairedRecord> by_id;
  std::vector<std::string> order;
  for (const auto& r : records) {
    auto [it, fresh] = by_id.try_emplace(r.nodule_id);
    if (fresh) order.push_back(r.nodule_id);
    (r.corrected ? it->second.corrected : it->second.initial) = &r;
  }
  bool has_corrected = false;
  for (const auto& id : order) {
    const auto& p = by_id[id];
    if (!p.initial) fail(Errc::invalid_argument, "nodule " + id + " has no initial evaluation");
    has_corrected = has_corrected || p.corrected;
  }
  if (has_corrected)
    for (const auto& id : order)
      if (!by_id[id].corrected) fail(Errc::invalid_argument, "nodule " + id + " has no corrected evaluation");

  detail::GroupStats all;
  std::map<std::string, detail::GroupStats> per_texture;
  std::map<int, detail::GroupStats> per_bin;
  double asd_i = 0.0, asd_c = 0.0;
  std::size_t asd_n = 0;
  for (const auto& id : order) {
    const auto& p = by_id[id];
    all.add(p);
    per_texture[texture_name(p.initial->texture)].add(p);
    per_bin[static_cast<int>(std::floor(p.initial->radius_mm))].add(p);
    const bool ok = std::isfinite(p.initial->asd_mm) && (!p.corrected || std::isfinite(p.corrected->asd_mm));
    if (ok) {
      ++asd_n;
      asd_i += p.initial->asd_mm;
      if (p.corrected) asd_c += p.corrected->asd_mm;
    }
  }
  nlohmann::json j;
  j["n_nodules"] = all.n;
  j["mean_iou"] = all.n ? (has_corrected ? all.iou_corrected : all.iou_initial) / all.n : 0.0;
  j["mean_iou_initial"] = all.n ? all.iou_initial / all.n : 0.0;
  j["n_asd_defined"] = asd_n;
  j["mean_asd_mm_initial"] = asd_n ? asd_i / asd_n : 0.0;
  j["mean_asd_mm"] = asd_n ? (has_corrected ? asd_c : asd_i) / asd_n : 0.0;
  if (has_corrected) {
    j["mean_iou_corrected"] = all.n ? all.iou_corrected / all.n : 0.0;
    j["mean_asd_mm_corrected"] = asd_n ? asd_c / asd_n : 0.0;
  }
  j["pct_improved"] = has_corrected && all.n ? 100.0 * all.improved / all.n : 0.0;
  j["per_texture"] = nlohmann::json::object();
  for (const auto& [k, s] : per_texture) j["per_texture"][k] = s.to_json(has_corrected);
  j["per_radius_bin"] = nlohmann::json::object();
  for (const auto& [k, s] : per_bin) j["per_radius_bin"][radius_bin(k)] = s.to_json(has_corrected);
  return j;
}

}  // namespace iwnet
