#pragma once

// Two stacked 3D encoder-decoders. Block 1 maps the image to an initial soft
// segmentation; block 2 maps (image, initial segmentation, weight map) to the
// corrected segmentation. Each block:
//
//   enc0: conv-bn-relu, width w0, full resolution
//   level l = 1..depth: stride-2 conv-bn-relu (w_l), conv-bn-relu (w_l)
//   decoder l = depth-1..0: upsample x2, concat with encoder level l,
//                           conv-bn-relu (w_l)
//   head: conv + sigmoid, one channel
//
// with w_l = base_filters * 2^l.

#include <filesystem>
#include <string>
#include <type_traits>
#include <vector>

#include <nlohmann/json.hpp>

#include "iwnet/iwv.hpp"
#include "iwnet/layers.hpp"
#include "iwnet/volgrid.hpp"

namespace iwnet {

struct WNetConfig {
  int input_side = 32;
  int base_filters = 8;
  int depth = 3;
  int block2_extra_inputs = 2;  // initial segmentation + weight map

  int width(int level) const { return base_filters << level; }

  void validate() const {
    if (depth < 1) fail(Errc::invalid_argument, "network depth must be >= 1");
    if (base_filters < 1) fail(Errc::invalid_argument, "base_filters must be >= 1");
    if (input_side < 1 || input_side % (1 << depth) != 0)
      fail(Errc::invalid_argument, "input_side must be divisible by 2^depth");
    if (block2_extra_inputs != 2) fail(Errc::invalid_argument, "block 2 takes exactly two extra input channels");
  }

  bool operator==(const WNetConfig&) const = default;
};

inline void to_json(nlohmann::json& j, const WNetConfig& c) {
  j = {{"input_side", c.input_side},
       {"base_filters", c.base_filters},
       {"depth", c.depth},
       {"block2_extra_inputs", c.block2_extra_inputs}};
}

inline void from_json(const nlohmann::json& j, WNetConfig& c) {
  c.input_side = j.value("input_side", c.input_side);
  c.base_filters = j.value("base_filters", c.base_filters);
  c.depth = j.value("depth", c.depth);
  c.block2_extra_inputs = j.value("block2_extra_inputs", c.block2_extra_inputs);
}

template <class T>
struct ConvBn {
  int cin = 0;
  int cout = 0;
  int stride = 1;
  Param<T> kernel;
  Param<T> scale;
  Param<T> shift;
  Param<T> running_mean;
  Param<T> running_var;

  ConvBn() = default;
  ConvBn(const std::string& name, int in, int out, int s)
      : cin(in),
        cout(out),
        stride(s),
        kernel(name + ".kernel", {out, in, 3, 3, 3}),
        scale(name + ".bn_scale", {out}, T{1}),
        shift(name + ".bn_shift", {out}),
        running_mean(name + ".bn_running_mean", {out}),
        running_var(name + ".bn_running_var", {out}, T{1}) {
    running_mean.trainable = false;
    running_var.trainable = false;
  }
};

template <class T>
struct Head {
  int cin = 0;
  Param<T> kernel;
  Param<T> bias;

  Head() = default;
  Head(const std::string& name, int in) : cin(in), kernel(name + ".kernel", {1, in, 3, 3, 3}), bias(name + ".bias", {1}) {}
};

template <class T>
struct BlockParams {
  int in_channels = 0;
  ConvBn<T> enc0;
  std::vector<ConvBn<T>> down;  // index l-1 for level l
  std::vector<ConvBn<T>> conv;  // index l-1 for level l
  std::vector<ConvBn<T>> dec;   // index l for decoder output at level l
  Head<T> head;

  BlockParams() = default;
  BlockParams(const std::string& name, const WNetConfig& cfg, int inputs) : in_channels(inputs) {
    enc0 = ConvBn<T>(name + ".enc0", inputs, cfg.width(0), 1);
    for (int l = 1; l <= cfg.depth; ++l) {
      down.emplace_back(name + ".down" + std::to_string(l), cfg.width(l - 1), cfg.width(l), 2);
      conv.emplace_back(name + ".conv" + std::to_string(l), cfg.width(l), cfg.width(l), 1);
    }
    for (int l = 0; l < cfg.depth; ++l)
      dec.emplace_back(name + ".dec" + std::to_string(l), cfg.width(l + 1) + cfg.width(l), cfg.width(l), 1);
    head = Head<T>(name + ".head", cfg.width(0));
  }

  // Every conv-bn layer in checkpoint order.
  template <class F>
  void for_each_layer(F&& f) {
    f(enc0);
    for (std::size_t i = 0; i < down.size(); ++i) {
      f(down[i]);
      f(conv[i]);
    }
    for (auto& d : dec) f(d);
  }
  template <class F>
  void for_each_layer(F&& f) const {
    const_cast<BlockParams*>(this)->for_each_layer([&](const ConvBn<T>& l) { f(l); });
  }

  template <class F>
  void for_each_param(F&& f) {
    for_each_layer([&](ConvBn<T>& l) {
      f(l.kernel);
      f(l.scale);
      f(l.shift);
      f(l.running_mean);
      f(l.running_var);
    });
    f(head.kernel);
    f(head.bias);
  }
  template <class F>
  void for_each_param(F&& f) const {
    const_cast<BlockParams*>(this)->for_each_param([&](const Param<T>& p) { f(p); });
  }

  void zero_grad() {
    for_each_param([](Param<T>& p) { p.zero_grad(); });
  }
};

template <class T>
struct WNetParams {
  WNetConfig config;
  BlockParams<T> block1;
  BlockParams<T> block2;

  WNetParams() = default;
  explicit WNetParams(const WNetConfig& cfg)
      : config(cfg), block1("block1", cfg, 1), block2("block2", cfg, 1 + cfg.block2_extra_inputs) {
    cfg.validate();
  }

  template <class F>
  void for_each_param(F&& f) {
    block1.for_each_param(f);
    block2.for_each_param(f);
  }
  template <class F>
  void for_each_param(F&& f) const {
    block1.for_each_param(f);
    block2.for_each_param(f);
  }

  bool operator==(const WNetParams& o) const {
    if (!(config == o.config)) return false;
    std::vector<const std::vector<T>*> a;
    std::vector<const std::vector<T>*> b;
    for_each_param([&](const Param<T>& p) { a.push_back(&p.value); });
    o.for_each_param([&](const Param<T>& p) { b.push_back(&p.value); });
    if (a.size() != b.size()) return false;
    for (std::size_t i = 0; i < a.size(); ++i)
      if (*a[i] != *b[i]) return false;
    return true;
  }
};

template <class T>
std::size_t trainable_count(const BlockParams<T>& b) {
  std::size_t n = 0;
  b.for_each_param([&](const Param<T>& p) {
    if (p.trainable) n += p.size();
  });
  return n;
}

template <class T>
std::size_t trainable_count(const WNetParams<T>& p) {
  return trainable_count(p.block1) + trainable_count(p.block2);
}

// Trainable parameter count as a pure function of the configuration.
inline std::size_t parameter_count(const WNetConfig& cfg) {
  cfg.validate();
  auto block = [&](int inputs) {
    auto convbn = [](std::size_t cin, std::size_t cout) { return cout * cin * kTaps + 2 * cout; };
    std::size_t n = convbn(inputs, cfg.width(0));
    for (int l = 1; l <= cfg.depth; ++l) n += convbn(cfg.width(l - 1), cfg.width(l)) + convbn(cfg.width(l), cfg.width(l));
    for (int l = 0; l < cfg.depth; ++l) n += convbn(cfg.width(l + 1) + cfg.width(l), cfg.width(l));
    return n + static_cast<std::size_t>(cfg.width(0)) * kTaps + 1;
  };
  return block(1) + block(1 + cfg.block2_extra_inputs);
}

// He-normal kernels, zero biases, unit BN scale, zero BN shift.
template <class T>
void initialize(WNetParams<T>& p, Rng& rng) {
  auto init_kernel = [&](Param<T>& k, int cin) {
    const double sd = std::sqrt(2.0 / (static_cast<double>(cin) * kTaps));
    for (auto& v : k.value) v = static_cast<T>(sd * rng.normal());
  };
  for (auto* b : {&p.block1, &p.block2}) {
    b->for_each_layer([&](ConvBn<T>& l) { init_kernel(l.kernel, l.cin); });
    const double sd = std::sqrt(1.0 / (static_cast<double>(b->head.cin) * kTaps));
    for (auto& v : b->head.kernel.value) v = static_cast<T>(sd * rng.normal());
    std::fill(b->head.bias.value.begin(), b->head.bias.value.end(), T{});
  }
}

template <class T>
WNetParams<T> make_wnet(const WNetConfig& cfg, std::uint64_t seed) {
  WNetParams<T> p(cfg);
  Rng rng(seed);
  initialize(p, rng);
  return p;
}

template <class To, class From>
WNetParams<To> convert_params(const WNetParams<From>& src) {
  WNetParams<To> dst(src.config);
  std::vector<const Param<From>*> from;
  src.for_each_param([&](const Param<From>& p) { from.push_back(&p); });
  std::size_t i = 0;
  dst.for_each_param([&](Param<To>& p) {
    const auto& f = *from[i++];
    for (std::size_t k = 0; k < p.size(); ++k) p.value[k] = static_cast<To>(f.value[k]);
  });
  return dst;
}

// ---------------------------------------------------------------------------
// Forward / backward

template <class T>
struct ConvBnCache {
  Tensor5<T> input;
  BatchNormCache<T> bn;
};

template <class T>
struct BlockCache {
  Mode mode = Mode::eval;
  ConvBnCache<T> enc0;
  std::vector<ConvBnCache<T>> down;
  std::vector<ConvBnCache<T>> conv;
  std::vector<ConvBnCache<T>> dec;
  std::vector<int> dec_up_channels;
  Tensor5<T> head_input;
  Tensor5<T> output;
};

namespace detail {

template <class T>
Tensor5<T> convbn_forward(const ConvBn<T>& l, const Tensor5<T>& in, Mode mode, ConvBnCache<T>* cache) {
  if (in.shape.c != l.cin) fail(Errc::shape_mismatch, "layer " + l.kernel.name + " got the wrong channel count");
  auto pre = conv3_forward<T>(in, l.kernel.value, {}, l.cout, l.stride);
  auto out = batchnorm_relu_forward<T>(pre, l.scale.value, l.shift.value, l.running_mean.value, l.running_var.value,
                                       mode, cache ? &cache->bn : nullptr);
  if (cache) cache->input = in;
  return out;
}

// Returns dL/d(input) when want_input_grad is set, otherwise an empty tensor.
template <class T>
Tensor5<T> convbn_backward(ConvBn<T>& l, const ConvBnCache<T>& cache, const Tensor5<T>& gout, bool want_input_grad) {
  auto gpre = batchnorm_relu_backward<T>(cache.bn, l.scale.value, gout, l.scale.grad, l.shift.grad);
  Tensor5<T> gin;
  if (want_input_grad) gin = Tensor5<T>(cache.input.shape);
  conv3_backward<T>(cache.input, l.kernel.value, gpre, l.stride, want_input_grad ? &gin : nullptr, l.kernel.grad, {});
  return gin;
}

template <class T>
void add_into(Tensor5<T>& dst, const Tensor5<T>& src) {
  for (std::size_t i = 0; i < dst.size(); ++i) dst.values[i] += src.values[i];
}

}  // namespace detail

// Runs one encoder-decoder block. When `cache` is given, everything needed
// by block_backward is recorded in it.
template <class T>
Tensor5<T> block_forward(const BlockParams<T>& b, const Tensor5<T>& input, Mode mode,
                         std::type_identity_t<BlockCache<T>>* cache) {
  const int depth = static_cast<int>(b.down.size());
  if (input.shape.c != b.in_channels) fail(Errc::shape_mismatch, "block input has the wrong channel count");
  const int side_div = 1 << depth;
  if (input.shape.z % side_div || input.shape.y % side_div || input.shape.x % side_div)
    fail(Errc::shape_mismatch, "block input side must be divisible by 2^depth");
  if (cache) {
    cache->mode = mode;
    cache->down.assign(depth, {});
    cache->conv.assign(depth, {});
    cache->dec.assign(depth, {});
    cache->dec_up_channels.assign(depth, 0);
  }
  std::vector<Tensor5<T>> skips(depth + 1);
  skips[0] = detail::convbn_forward(b.enc0, input, mode, cache ? &cache->enc0 : nullptr);
  for (int l = 1; l <= depth; ++l) {
    auto t = detail::convbn_forward(b.down[l - 1], skips[l - 1], mode, cache ? &cache->down[l - 1] : nullptr);
    skips[l] = detail::convbn_forward(b.conv[l - 1], t, mode, cache ? &cache->conv[l - 1] : nullptr);
  }
  Tensor5<T> cur = std::move(skips[depth]);
  for (int l = depth - 1; l >= 0; --l) {
    auto up = upsample_nn_forward(cur);
    if (cache) cache->dec_up_channels[l] = up.shape.c;
    auto cat = concat_channels(up, skips[l]);
    cur = detail::convbn_forward(b.dec[l], cat, mode, cache ? &cache->dec[l] : nullptr);
  }
  auto out = sigmoid_head_forward<T>(cur, b.head.kernel.value, b.head.bias.value);
  if (cache) {
    cache->head_input = std::move(cur);
    cache->output = out;
  }
  return out;
}

// Back-propagates dL/d(block output) and accumulates parameter gradients.
// Returns dL/d(block input) when asked for it.
template <class T>
Tensor5<T> block_backward(BlockParams<T>& b, const BlockCache<T>& cache, const Tensor5<T>& gout,
                          bool want_input_grad = false) {
  const int depth = static_cast<int>(b.down.size());
  Tensor5<T> gcur(cache.head_input.shape);
  sigmoid_head_backward<T>(cache.head_input, b.head.kernel.value, cache.output, gout, &gcur, b.head.kernel.grad,
                           b.head.bias.grad);
  std::vector<Tensor5<T>> gskip(depth + 1);
  for (int l = 0; l < depth; ++l) {
    auto gcat = detail::convbn_backward(b.dec[l], cache.dec[l], gcur, true);
    auto [gup, gs] = concat_channels_backward(gcat, cache.dec_up_channels[l]);
    gskip[l] = std::move(gs);
    gcur = upsample_nn_backward(gup);
  }
  // gcur is now the gradient w.r.t. the bottleneck output.
  for (int l = depth; l >= 1; --l) {
    if (l < depth) detail::add_into(gcur, gskip[l]);
    auto gt = detail::convbn_backward(b.conv[l - 1], cache.conv[l - 1], gcur, true);
    gcur = detail::convbn_backward(b.down[l - 1], cache.down[l - 1], gt, true);
  }
  detail::add_into(gcur, gskip[0]);
  return detail::convbn_backward(b.enc0, cache.enc0, gcur, want_input_grad);
}

template <class T>
void apply_running_stats(BlockParams<T>& b, const BlockCache<T>& cache) {
  if (cache.mode != Mode::train) return;
  auto upd = [](ConvBn<T>& l, const ConvBnCache<T>& c) {
    update_running_stats<T>(c.bn, l.running_mean.value, l.running_var.value);
  };
  upd(b.enc0, cache.enc0);
  for (std::size_t i = 0; i < b.down.size(); ++i) {
    upd(b.down[i], cache.down[i]);
    upd(b.conv[i], cache.conv[i]);
  }
  for (std::size_t i = 0; i < b.dec.size(); ++i) upd(b.dec[i], cache.dec[i]);
}

// ---------------------------------------------------------------------------
// Grid <-> tensor helpers

template <class T, GridKind K>
void write_channel(Tensor5<T>& t, int n, int c, const Grid<K>& g) {
  if (t.shape.spatial() != g.size()) fail(Errc::shape_mismatch, "grid does not match tensor spatial size");
  T* p = t.plane(n, c);
  for (std::size_t i = 0; i < g.size(); ++i) p[i] = static_cast<T>(g.values[i]);
}

template <class T>
SoftMask channel_to_soft(const Tensor5<T>& t, int n, int c, const VolumeGeometry& g) {
  SoftMask out(g);
  const T* p = t.plane(n, c);
  for (std::size_t i = 0; i < out.size(); ++i) out.values[i] = static_cast<float>(p[i]);
  return out;
}

template <class T>
void check_network_input(const WNetConfig& cfg, const VolumeGeometry& g) {
  const int s = cfg.input_side;
  if (g.dims != std::array<int, 3>{s, s, s})
    fail(Errc::shape_mismatch, "volume side must equal the network input side " + std::to_string(s));
}

template <class T>
SoftMask forward_block1(const ScalarVolume& volume, const WNetParams<T>& p, Mode mode = Mode::eval) {
  check_network_input<T>(p.config, volume.geometry);
  const int s = p.config.input_side;
  Tensor5<T> x({1, 1, s, s, s});
  write_channel(x, 0, 0, volume);
  auto y = block_forward(p.block1, x, mode, nullptr);
  return channel_to_soft(y, 0, 0, volume.geometry);
}

template <class T>
Tensor5<T> block2_input(const ScalarVolume& volume, const SoftMask& initial, const SoftMask& weight_map) {
  require_same_geometry(volume, initial);
  require_same_geometry(volume, weight_map);
  const auto& d = volume.geometry.dims;
  Tensor5<T> x({1, 3, d[0], d[1], d[2]});
  write_channel(x, 0, 0, volume);
  write_channel(x, 0, 1, initial);
  write_channel(x, 0, 2, weight_map);
  return x;
}

template <class T>
SoftMask forward_block2(const ScalarVolume& volume, const SoftMask& initial, const SoftMask& weight_map,
                        const WNetParams<T>& p, Mode mode = Mode::eval) {
  check_network_input<T>(p.config, volume.geometry);
  auto x = block2_input<T>(volume, initial, weight_map);
  auto y = block_forward(p.block2, x, mode, nullptr);
  return channel_to_soft(y, 0, 0, volume.geometry);
}

// ---------------------------------------------------------------------------
// Checkpoints: `<path>.json` manifest + `<path>.bin` little-endian f32 blob.

inline constexpr int kCheckpointVersion = 1;

inline std::filesystem::path checkpoint_base(const std::filesystem::path& p) {
  auto ext = p.extension();
  if (ext == ".json" || ext == ".bin") return p.parent_path() / p.stem();
  return p;
}

template <class T>
void save_checkpoint(const WNetParams<T>& p, const std::filesystem::path& path) {
  nlohmann::json layers = nlohmann::json::array();
  std::string blob;
  p.for_each_param([&](const Param<T>& prm) {
    layers.push_back({{"name", prm.name}, {"shape", prm.shape}, {"count", prm.size()}, {"trainable", prm.trainable}});
    for (T v : prm.value) {
      const std::uint32_t bits = detail::to_little(std::bit_cast<std::uint32_t>(static_cast<float>(v)));
      blob.append(reinterpret_cast<const char*>(&bits), 4);
    }
  });
  nlohmann::json manifest = {{"format", "IWNET-CKPT"},
                             {"version", kCheckpointVersion},
                             {"dtype", "f32"},
                             {"config", p.config},
                             {"layers", layers},
                             {"total_values", blob.size() / 4}};
  const auto base = checkpoint_base(path);
  write_file(base.string() + ".json", manifest.dump(2) + "\n");
  write_file(base.string() + ".bin", blob);
}

template <class T>
WNetParams<T> load_checkpoint(const std::filesystem::path& path) {
  const auto base = checkpoint_base(path);
  const auto manifest = parse_json_text(read_file(base.string() + ".json"), "checkpoint manifest");
  const auto blob = read_file(base.string() + ".bin");
  if (manifest.value("format", "") != "IWNET-CKPT") fail(Errc::malformed_format, "not an iwnet checkpoint");
  if (manifest.value("version", 0) != kCheckpointVersion)
    fail(Errc::unsupported_version, "unsupported checkpoint version");
  if (manifest.value("dtype", "") != "f32") fail(Errc::malformed_format, "checkpoint dtype must be f32");
  WNetConfig cfg;
  try {
    cfg = manifest.at("config").get<WNetConfig>();
  } catch (const nlohmann::json::exception& e) {
    fail(Errc::malformed_format, std::string("bad checkpoint config: ") + e.what());
  }
  WNetParams<T> p(cfg);
  const auto& layers = manifest.at("layers");
  std::size_t expected = 0;
  p.for_each_param([&](const Param<T>& prm) { expected += prm.size(); });
  if (blob.size() != expected * 4)
    fail(Errc::payload_length, "checkpoint blob holds " + std::to_string(blob.size() / 4) + " values, expected " +
                                   std::to_string(expected));
  std::size_t i = 0;
  std::size_t offset = 0;
  p.for_each_param([&](Param<T>& prm) {
    if (i >= layers.size() || layers[i].value("name", "") != prm.name ||
        layers[i].value("shape", std::vector<int>{}) != prm.shape)
      fail(Errc::malformed_format, "checkpoint layer list does not match its config at " + prm.name);
    ++i;
    for (auto& v : prm.value) {
      std::uint32_t bits;
      std::memcpy(&bits, blob.data() + offset, 4);
      offset += 4;
      v = static_cast<T>(std::bit_cast<float>(detail::to_little(bits)));
    }
  });
  if (i != layers.size()) fail(Errc::malformed_format, "checkpoint lists extra layers");
  return p;
}

}  // namespace iwnet
