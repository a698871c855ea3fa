#pragma once

// End-to-end finite-difference check of dL/d(theta) for the whole two-block
// network under the blended loss. Analytic gradients (in T) are compared
// with fourth-order central differences of the 64-bit forward pass at the
// same point. A step that flips any ReLU is shrunk; a coordinate is skipped
// only if no step avoids the kink. Relative errors use a denominator floor
// of floor_frac times the largest gradient of the same layer type.

#include <chrono>
#include <map>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "iwnet/field.hpp"
#include "iwnet/interact.hpp"
#include "iwnet/objective.hpp"
#include "iwnet/wnet.hpp"

namespace iwnet {

inline WNetConfig gradcheck_config() { return {8, 2, 2, 2}; }

struct GradCheckGroup {
  std::string type;
  std::size_t available = 0;
  int checked = 0;
  int skipped = 0;
  double max_rel = 0.0;
  std::string worst;
};

struct GradCheckReport {
  std::string precision;
  WNetConfig config;
  std::vector<GradCheckGroup> groups;
  double max_rel = 0.0;
  double tolerance = 0.0;
  bool freeze_ok = false;
  double seconds = 0.0;

  bool passed() const { return freeze_ok && max_rel < tolerance; }

  nlohmann::json to_json() const {
    nlohmann::json g = nlohmann::json::array();
    for (const auto& x : groups)
      g.push_back({{"type", x.type},
                   {"available", x.available},
                   {"checked", x.checked},
                   {"skipped_kinks", x.skipped},
                   {"max_rel_err", x.max_rel},
                   {"worst", x.worst}});
    return {{"precision", precision}, {"config", config},    {"groups", g},
            {"max_rel_err", max_rel}, {"tolerance", tolerance}, {"freeze_ok", freeze_ok},
            {"passed", passed()},     {"seconds", seconds}};
  }
};

namespace detail {

inline std::string param_type(const std::string& name) {
  auto ends = [&](const std::string& s) { return name.size() >= s.size() && name.compare(name.size() - s.size(), s.size(), s) == 0; };
  if (name.find(".head.") != std::string::npos) return ends(".bias") ? "head_bias" : "head_kernel";
  if (ends(".bn_scale")) return "bn_scale";
  if (ends(".bn_shift")) return "bn_shift";
  if (name.find(".down") != std::string::npos) return "conv_stride2_kernel";
  return "conv_kernel";
}

struct GradCheckInputs {
  Tensor5<double> x;  // (N, 1, s, s, s)
  std::vector<BinaryMask> targets;
  std::vector<SoftMask> weights;
};

inline GradCheckInputs gradcheck_inputs(const WNetConfig& cfg, Rng& rng, int n) {
  const int s = cfg.input_side;
  const auto g = VolumeGeometry::cube(s);
  GradCheckInputs in;
  in.x = Tensor5<double>({n, 1, s, s, s});
  for (int i = 0; i < n; ++i) {
    const Vec3 c{rng.uniform(0.35, 0.65) * s, rng.uniform(0.35, 0.65) * s, rng.uniform(0.35, 0.65) * s};
    const double r = rng.uniform(0.2, 0.3) * s;
    BinaryMask t(g);
    for (std::size_t v = 0; v < t.size(); ++v) {
      const auto p = g.coords(v);
      const double d = norm(Vec3{p[0] - c[0], p[1] - c[1], p[2] - c[2]});
      t.values[v] = d <= r ? 1 : 0;
      in.x.plane(i, 0)[v] = (d <= r ? 0.8 : 0.15) + 0.05 * rng.normal();
    }
    in.weights.push_back(attraction_map(simulate_endpoints(t), {0.44, 1e-3}, g));
    in.targets.push_back(std::move(t));
  }
  return in;
}

template <class T>
Tensor5<T> cast_tensor(const Tensor5<double>& t) {
  Tensor5<T> out(t.shape);
  for (std::size_t i = 0; i < t.size(); ++i) out.values[i] = static_cast<T>(t.values[i]);
  return out;
}

template <class T>
Tensor5<T> stack_block2_input(const Tensor5<T>& x, const Tensor5<T>& y1, const std::vector<SoftMask>& weights) {
  const auto& s = x.shape;
  Tensor5<T> out({s.n, 3, s.z, s.y, s.x});
  const std::size_t vox = s.spatial();
  for (int i = 0; i < s.n; ++i) {
    std::copy_n(x.plane(i, 0), vox, out.plane(i, 0));
    std::copy_n(y1.plane(i, 0), vox, out.plane(i, 1));
    T* m = out.plane(i, 2);
    for (std::size_t v = 0; v < vox; ++v) m[v] = static_cast<T>(weights[i].values[v]);
  }
  return out;
}

template <class T>
void append_pattern(const BlockCache<T>& c, std::vector<bool>& pat) {
  auto add = [&](const ConvBnCache<T>& l) {
    for (T v : l.bn.out) pat.push_back(v > T{});
  };
  add(c.enc0);
  for (const auto& l : c.down) add(l);
  for (const auto& l : c.conv) add(l);
  for (const auto& l : c.dec) add(l);
}

// Joint forward through both blocks in train mode; optionally back-propagates
// into every parameter, including block 1 through block 2's input.
template <class T>
double joint_objective(WNetParams<T>& p, const GradCheckInputs& in, const LossConfig& cfg, bool backward,
                       std::vector<bool>* pattern) {
  const auto x = cast_tensor<T>(in.x);
  BlockCache<T> c1, c2;
  auto y1 = block_forward(p.block1, x, Mode::train, &c1);
  auto x2 = stack_block2_input(x, y1, in.weights);
  auto y2 = block_forward(p.block2, x2, Mode::train, &c2);
  std::vector<const BinaryMask*> t;
  std::vector<const SoftMask*> w;
  for (std::size_t i = 0; i < in.targets.size(); ++i) {
    t.push_back(&in.targets[i]);
    w.push_back(&in.weights[i]);
  }
  auto L = batch_loss(y2, t, w, cfg);
  if (pattern) {
    pattern->clear();
    append_pattern(c1, *pattern);
    append_pattern(c2, *pattern);
  }
  if (backward) {
    auto g2 = block_backward(p.block2, c2, L.grad, true);
    Tensor5<T> gy1(y1.shape);
    for (int i = 0; i < y1.shape.n; ++i) std::copy_n(g2.plane(i, 1), y1.shape.spatial(), gy1.plane(i, 0));
    block_backward(p.block1, c1, gy1);
  }
  return L.total;
}

}  // namespace detail

template <class T>
GradCheckReport grad_check(const WNetConfig& cfg, std::uint64_t seed, int per_type = 50, double h = 1e-3,
                           double floor_frac = 1e-3) {
  const auto t0 = std::chrono::steady_clock::now();
  cfg.validate();
  Rng rng(seed);
  auto params = make_wnet<T>(cfg, derive_seed(seed, 1));
  // move BN affine parameters and head biases off their initial values so
  // every gradient path is exercised at a generic point
  params.for_each_param([&](Param<T>& p) {
    const auto type = detail::param_type(p.name);
    if (!p.trainable) return;
    if (type == "bn_scale")
      for (auto& v : p.value) v = static_cast<T>(rng.uniform(0.6, 1.4));
    if (type == "bn_shift" || type == "head_bias")
      for (auto& v : p.value) v = static_cast<T>(rng.uniform(-0.2, 0.2));
  });
  const auto inputs = detail::gradcheck_inputs(cfg, rng, 2);
  const LossConfig loss_cfg{};

  params.for_each_param([](Param<T>& p) { p.zero_grad(); });
  detail::joint_objective(params, inputs, loss_cfg, true, nullptr);

  auto wide = convert_params<double>(params);
  std::vector<Param<T>*> pt;
  std::vector<Param<double>*> pw;
  params.for_each_param([&](Param<T>& p) { pt.push_back(&p); });
  wide.for_each_param([&](Param<double>& p) { pw.push_back(&p); });

  std::map<std::string, std::vector<std::pair<std::size_t, std::size_t>>> coords;
  std::map<std::string, double> gmax;
  for (std::size_t k = 0; k < pt.size(); ++k) {
    if (!pt[k]->trainable) continue;
    const auto type = detail::param_type(pt[k]->name);
    for (std::size_t i = 0; i < pt[k]->size(); ++i) {
      coords[type].push_back({k, i});
      gmax[type] = std::max(gmax[type], std::abs(static_cast<double>(pt[k]->grad[i])));
    }
  }

  GradCheckReport rep;
  rep.precision = std::is_same_v<T, double> ? "f64" : "f32";
  rep.config = cfg;
  rep.tolerance = std::is_same_v<T, double> ? 1e-6 : 1e-3;
  std::vector<bool> p0, pk;
  detail::joint_objective(wide, inputs, loss_cfg, false, &p0);
  for (auto& [type, list] : coords) {
    rng.shuffle(list.begin(), list.end());
    GradCheckGroup grp;
    grp.type = type;
    grp.available = list.size();
    const double floor = floor_frac * gmax[type];
    for (const auto& [k, i] : list) {
      if (grp.checked >= per_type) break;
      double& x = pw[k]->value[i];
      const double orig = x;
      bool kink = true;
      double numeric = 0.0;
      // shrink the step when a perturbation crosses a ReLU kink
      for (double step = h; kink && step >= h * 1e-2; step *= 0.1) {
        kink = false;
        auto eval = [&](double d) {
          x = orig + d;
          const double l = detail::joint_objective(wide, inputs, loss_cfg, false, &pk);
          x = orig;
          if (pk != p0) kink = true;
          return l;
        };
        numeric = (-eval(2 * step) + 8 * eval(step) - 8 * eval(-step) + eval(-2 * step)) / (12 * step);
      }
      if (kink) {
        ++grp.skipped;
        continue;
      }
      const double analytic = static_cast<double>(pt[k]->grad[i]);
      const double rel = std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), floor});
      if (rel > grp.max_rel) {
        grp.max_rel = rel;
        grp.worst = pt[k]->name + "[" + std::to_string(i) + "]";
      }
      ++grp.checked;
    }
    rep.max_rel = std::max(rep.max_rel, grp.max_rel);
    rep.groups.push_back(grp);
  }

  // Stage-2 mode: block 1 runs in eval mode and is never back-propagated.
  params.for_each_param([](Param<T>& p) { p.zero_grad(); });
  {
    const auto x = detail::cast_tensor<T>(inputs.x);
    auto y1 = block_forward(params.block1, x, Mode::eval, nullptr);
    auto x2 = detail::stack_block2_input(x, y1, inputs.weights);
    BlockCache<T> c2;
    auto y2 = block_forward(params.block2, x2, Mode::train, &c2);
    std::vector<const BinaryMask*> t{&inputs.targets[0], &inputs.targets[1]};
    std::vector<const SoftMask*> w{&inputs.weights[0], &inputs.weights[1]};
    auto L = batch_loss(y2, t, w, loss_cfg);
    block_backward(params.block2, c2, L.grad);
    bool zero = true;
    params.block1.for_each_param([&](const Param<T>& p) {
      for (T g : p.grad) zero = zero && g == T{};
    });
    bool moved = false;
    params.block2.for_each_param([&](const Param<T>& p) {
      for (T g : p.grad) moved = moved || g != T{};
    });
    rep.freeze_ok = zero && moved;
  }
  rep.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return rep;
}

}  // namespace iwnet
