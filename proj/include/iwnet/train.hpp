#pragma once

// Optimiser, data splitting and the two-stage training schedule.

#include <chrono>
#include <cmath>
#include <limits>
#include <numeric>
#include <ostream>
#include <vector>

#include <nlohmann/json.hpp>

#include "iwnet/augment.hpp"
#include "iwnet/interact.hpp"
#include "iwnet/metrics.hpp"
#include "iwnet/objective.hpp"
#include "iwnet/synth.hpp"
#include "iwnet/wnet.hpp"

namespace iwnet {

// ---------------------------------------------------------------------------
// Adam

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct AdamState {
  AdamConfig cfg;
  long step = 0;
  std::vector<std::vector<double>> m;
  std::vector<std::vector<double>> v;
};

template <class T>
std::vector<Param<T>*> trainable_params(BlockParams<T>& b) {
  std::vector<Param<T>*> out;
  b.for_each_param([&](Param<T>& p) {
    if (p.trainable) out.push_back(&p);
  });
  return out;
}

template <class T>
AdamState make_adam(const std::vector<Param<T>*>& params, const AdamConfig& cfg = {}) {
  AdamState s;
  s.cfg = cfg;
  for (const auto* p : params) {
    s.m.emplace_back(p->size(), 0.0);
    s.v.emplace_back(p->size(), 0.0);
  }
  return s;
}

// One bias-corrected Adam update from the gradients stored in the params.
template <class T>
void adam_step(const std::vector<Param<T>*>& params, AdamState& s) {
  if (s.m.size() != params.size()) fail(Errc::shape_mismatch, "optimizer state does not match the parameter list");
  for (std::size_t k = 0; k < params.size(); ++k) {
    if (s.m[k].size() != params[k]->size() || params[k]->grad.size() != params[k]->size())
      fail(Errc::shape_mismatch, "optimizer state does not match " + params[k]->name);
    for (T g : params[k]->grad)
      if (!std::isfinite(static_cast<double>(g))) fail(Errc::non_finite, "non-finite gradient in " + params[k]->name);
  }
  ++s.step;
  const auto& c = s.cfg;
  const double bc1 = 1.0 - std::pow(c.beta1, static_cast<double>(s.step));
  const double bc2 = 1.0 - std::pow(c.beta2, static_cast<double>(s.step));
  for (std::size_t k = 0; k < params.size(); ++k) {
    auto& p = *params[k];
    auto& m = s.m[k];
    auto& v = s.v[k];
    for (std::size_t i = 0; i < p.size(); ++i) {
      const double g = static_cast<double>(p.grad[i]);
      m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g;
      v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g * g;
      const double mh = m[i] / bc1;
      const double vh = v[i] / bc2;
      p.value[i] = static_cast<T>(static_cast<double>(p.value[i]) - c.lr * mh / (std::sqrt(vh) + c.eps));
    }
  }
}

// ---------------------------------------------------------------------------
// Splits

struct DataSplit {
  std::vector<int> train;
  std::vector<int> val;
  std::vector<int> test;
};

inline void to_json(nlohmann::json& j, const DataSplit& s) {
  j = {{"train", s.train}, {"val", s.val}, {"test", s.test}};
}

// Scan-level split: a shuffled test fraction first, then a validation
// fraction of what remains. Each synthetic case is one scan.
inline DataSplit split_scans(int n, double test_frac, double val_frac, std::uint64_t seed) {
  if (n < 2) fail(Errc::invalid_argument, "need at least two scans to split");
  if (!(test_frac >= 0.0 && test_frac < 1.0 && val_frac >= 0.0 && val_frac < 1.0))
    fail(Errc::invalid_argument, "split fractions must lie in [0, 1)");
  std::vector<int> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  Rng rng(derive_seed(seed, 0x73706c6974));
  rng.shuffle(idx.begin(), idx.end());
  const int n_test = static_cast<int>(round_half_up(n * test_frac));
  const int rest = n - n_test;
  const int n_val = std::max(val_frac > 0.0 ? 1 : 0, static_cast<int>(round_half_up(rest * val_frac)));
  if (rest - n_val < 1) fail(Errc::invalid_argument, "split leaves no training scans");
  DataSplit s;
  s.test.assign(idx.begin(), idx.begin() + n_test);
  s.val.assign(idx.begin() + n_test, idx.begin() + n_test + n_val);
  s.train.assign(idx.begin() + n_test + n_val, idx.end());
  for (auto* v : {&s.train, &s.val, &s.test}) std::sort(v->begin(), v->end());
  return s;
}

// One sample per (case, annotator) pair, with simulated stroke end-points.
inline std::vector<TrainSample> make_samples(const std::vector<SynthCase>& cases, const std::vector<int>& indices) {
  std::vector<TrainSample> out;
  for (int i : indices)
    for (const auto& a : cases.at(static_cast<std::size_t>(i)).annotations)
      out.push_back({cases[static_cast<std::size_t>(i)].volume, a, simulate_endpoints(a)});
  return out;
}

// ---------------------------------------------------------------------------
// Configuration and logs

struct TrainConfig {
  int batch_size = 8;
  AdamConfig adam;
  int stage1_patience = 3;
  int stage2_patience = 5;
  int max_epochs = 0;  // per stage; 0 means no cap
  double min_delta = 1e-4;
  AugmentConfig augment;
  std::uint64_t seed = 1;
  LossConfig loss;
  double field_epsilon = 1e-3;

  void validate() const {
    if (batch_size < 1) fail(Errc::invalid_argument, "batch_size must be >= 1");
    if (stage1_patience < 1 || stage2_patience < 1) fail(Errc::invalid_argument, "patience must be >= 1");
    if (max_epochs < 0) fail(Errc::invalid_argument, "max_epochs must be >= 0");
    if (!(adam.lr > 0.0)) fail(Errc::invalid_argument, "learning rate must be > 0");
    if (!(min_delta >= 0.0)) fail(Errc::invalid_argument, "min_delta must be >= 0");
    loss.validate();
  }

  FieldParams field() const { return {loss.decay_p, field_epsilon}; }
};

inline void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = {{"batch_size", c.batch_size},
       {"lr", c.adam.lr},
       {"stage1_patience", c.stage1_patience},
       {"stage2_patience", c.stage2_patience},
       {"max_epochs", c.max_epochs},
       {"min_delta", c.min_delta},
       {"augment", c.augment.enabled()},
       {"seed", c.seed},
       {"lambda1", c.loss.lambda1},
       {"gamma", c.loss.gamma},
       {"decay_p", c.loss.decay_p}};
}

inline void from_json(const nlohmann::json& j, TrainConfig& c) {
  c.batch_size = j.value("batch_size", c.batch_size);
  c.adam.lr = j.value("lr", c.adam.lr);
  c.stage1_patience = j.value("stage1_patience", c.stage1_patience);
  c.stage2_patience = j.value("stage2_patience", c.stage2_patience);
  c.max_epochs = j.value("max_epochs", c.max_epochs);
  c.min_delta = j.value("min_delta", c.min_delta);
  if (j.contains("augment") && !j["augment"].get<bool>()) c.augment = {false, false, false, false};
  c.seed = j.value("seed", c.seed);
  c.loss.lambda1 = j.value("lambda1", c.loss.lambda1);
  c.loss.gamma = j.value("gamma", c.loss.gamma);
  c.loss.decay_p = j.value("decay_p", c.loss.decay_p);
}

struct EpochRecord {
  int stage = 1;
  int epoch = 0;
  double train_loss = 0.0;
  double val_loss = 0.0;
  double val_iou = 0.0;
  double seconds = 0.0;
};

inline void to_json(nlohmann::json& j, const EpochRecord& r) {
  j = {{"stage", r.stage},       {"epoch", r.epoch},     {"train_loss", r.train_loss},
       {"val_loss", r.val_loss}, {"val_iou", r.val_iou}, {"seconds", r.seconds}};
}

struct StageResult {
  std::vector<EpochRecord> history;
  int best_epoch = 0;
  double best_val_loss = std::numeric_limits<double>::infinity();
  bool stopped_early = false;
};

// "Stopped improving": the epoch validation loss failed to beat the best
// so far by more than min_delta.
class EarlyStopping {
 public:
  EarlyStopping(int patience, double min_delta) : patience_(patience), min_delta_(min_delta) {}

  bool update(double val_loss) {
    if (val_loss < best_ - min_delta_) {
      best_ = val_loss;
      bad_ = 0;
      return true;
    }
    ++bad_;
    return false;
  }

  bool should_stop() const { return bad_ >= patience_; }
  double best() const { return best_; }

 private:
  int patience_;
  double min_delta_;
  double best_ = std::numeric_limits<double>::infinity();
  int bad_ = 0;
};

// Runs epochs until early stopping or the epoch cap. `on_best` snapshots
// the parameters after every improving epoch.
template <class EpochFn, class OnBest>
StageResult run_stage(int stage, int patience, int max_epochs, double min_delta, EpochFn&& epoch_fn, OnBest&& on_best,
                      std::ostream* log) {
  StageResult res;
  EarlyStopping stop(patience, min_delta);
  for (int epoch = 1; max_epochs == 0 || epoch <= max_epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    EpochRecord r = epoch_fn(epoch);
    r.stage = stage;
    r.epoch = epoch;
    r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    if (!std::isfinite(r.train_loss) || !std::isfinite(r.val_loss))
      fail(Errc::non_finite, "non-finite loss in stage " + std::to_string(stage) + " epoch " + std::to_string(epoch));
    res.history.push_back(r);
    if (log) *log << nlohmann::json(r).dump() << '\n' << std::flush;
    if (stop.update(r.val_loss)) {
      res.best_epoch = epoch;
      res.best_val_loss = r.val_loss;
      on_best();
    }
    if (stop.should_stop()) {
      res.stopped_early = true;
      break;
    }
  }
  return res;
}

// ---------------------------------------------------------------------------
// Batches

namespace detail {

template <class T>
Tensor5<T> image_batch(const std::vector<const TrainSample*>& batch, int side) {
  Tensor5<T> x({static_cast<int>(batch.size()), 1, side, side, side});
  for (std::size_t i = 0; i < batch.size(); ++i) write_channel(x, static_cast<int>(i), 0, batch[i]->volume);
  return x;
}

template <class T>
Tensor5<T> correction_batch(const Tensor5<T>& image, const Tensor5<T>& initial, const std::vector<SoftMask>& maps) {
  const auto& s = image.shape;
  Tensor5<T> x({s.n, 3, s.z, s.y, s.x});
  const std::size_t vox = s.spatial();
  for (int i = 0; i < s.n; ++i) {
    std::copy_n(image.plane(i, 0), vox, x.plane(i, 0));
    std::copy_n(initial.plane(i, 0), vox, x.plane(i, 1));
    write_channel(x, i, 2, maps[static_cast<std::size_t>(i)]);
  }
  return x;
}

template <class T>
double batch_iou_sum(const Tensor5<T>& pred, const std::vector<const TrainSample*>& batch) {
  double s = 0.0;
  for (std::size_t i = 0; i < batch.size(); ++i) {
    const auto m = threshold(channel_to_soft(pred, static_cast<int>(i), 0, batch[i]->target.geometry));
    s += iou(m, batch[i]->target);
  }
  return s;
}

inline std::vector<const BinaryMask*> targets_of(const std::vector<const TrainSample*>& batch) {
  std::vector<const BinaryMask*> t;
  for (const auto* s : batch) t.push_back(&s->target);
  return t;
}

inline std::vector<const SoftMask*> pointers(const std::vector<SoftMask>& v) {
  std::vector<const SoftMask*> out;
  for (const auto& m : v) out.push_back(&m);
  return out;
}

template <class F>
void for_batches(std::size_t n, int batch_size, F&& f) {
  for (std::size_t b = 0; b < n; b += static_cast<std::size_t>(batch_size))
    f(b, std::min(n, b + static_cast<std::size_t>(batch_size)));
}

}  // namespace detail

inline SoftMask weight_map_for(const TrainSample& s, const FieldParams& fp) {
  return attraction_map(s.pair, fp, s.volume.geometry);
}

struct EvalPass {
  double loss = 0.0;
  double iou = 0.0;
};

// Stage 1: soft-IoU loss on the block-1 output.
template <class T>
EvalPass validate_stage1(const WNetParams<T>& p, const std::vector<TrainSample>& val, int batch_size) {
  EvalPass r;
  const int side = p.config.input_side;
  detail::for_batches(val.size(), batch_size, [&](std::size_t b, std::size_t e) {
    std::vector<const TrainSample*> batch;
    for (std::size_t i = b; i < e; ++i) batch.push_back(&val[i]);
    auto y = block_forward(p.block1, detail::image_batch<T>(batch, side), Mode::eval, nullptr);
    r.loss += batch_loss(y, detail::targets_of(batch), {}, LossConfig{}).total * static_cast<double>(batch.size());
    r.iou += detail::batch_iou_sum(y, batch);
  });
  r.loss /= static_cast<double>(val.size());
  r.iou /= static_cast<double>(val.size());
  return r;
}

template <class T>
StageResult train_stage1(WNetParams<T>& p, const std::vector<TrainSample>& train, const std::vector<TrainSample>& val,
                         const TrainConfig& cfg, std::ostream* log = nullptr) {
  cfg.validate();
  if (train.empty() || val.empty()) fail(Errc::invalid_argument, "stage 1 needs training and validation samples");
  const int side = p.config.input_side;
  auto params = trainable_params(p.block1);
  auto adam = make_adam(params, cfg.adam);
  BlockParams<T> best = p.block1;
  auto epoch_fn = [&](int epoch) {
    Rng rng(derive_seed(derive_seed(cfg.seed, 1), static_cast<std::uint64_t>(epoch)));
    std::vector<std::size_t> order(train.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    rng.shuffle(order.begin(), order.end());
    double total = 0.0;
    detail::for_batches(order.size(), cfg.batch_size, [&](std::size_t b, std::size_t e) {
      std::vector<TrainSample> aug;
      for (std::size_t i = b; i < e; ++i) aug.push_back(augment(train[order[i]], cfg.augment, rng));
      std::vector<const TrainSample*> batch;
      for (const auto& s : aug) batch.push_back(&s);
      BlockCache<T> cache;
      auto y = block_forward(p.block1, detail::image_batch<T>(batch, side), Mode::train, &cache);
      auto L = batch_loss(y, detail::targets_of(batch), {}, cfg.loss);
      p.block1.zero_grad();
      block_backward(p.block1, cache, L.grad);
      adam_step(params, adam);
      apply_running_stats(p.block1, cache);
      total += L.total * static_cast<double>(batch.size());
    });
    const auto v = validate_stage1(p, val, cfg.batch_size);
    return EpochRecord{1, epoch, total / static_cast<double>(train.size()), v.loss, v.iou, 0.0};
  };
  auto res = run_stage(1, cfg.stage1_patience, cfg.max_epochs, cfg.min_delta, epoch_fn, [&] { best = p.block1; }, log);
  p.block1 = best;
  return res;
}

// Validation inputs for stage 2 depend only on the frozen block 1, so they
// are built once.
template <class T>
struct Stage2Validation {
  std::vector<Tensor5<T>> inputs;  // per batch, (n, 3, s, s, s)
  std::vector<std::vector<const TrainSample*>> batches;
  std::vector<std::vector<SoftMask>> maps;
};

template <class T>
Stage2Validation<T> prepare_stage2_validation(const WNetParams<T>& p, const std::vector<TrainSample>& val,
                                              const TrainConfig& cfg) {
  Stage2Validation<T> out;
  const int side = p.config.input_side;
  detail::for_batches(val.size(), cfg.batch_size, [&](std::size_t b, std::size_t e) {
    std::vector<const TrainSample*> batch;
    std::vector<SoftMask> maps;
    for (std::size_t i = b; i < e; ++i) {
      batch.push_back(&val[i]);
      maps.push_back(weight_map_for(val[i], cfg.field()));
    }
    const auto x = detail::image_batch<T>(batch, side);
    const auto y1 = block_forward(p.block1, x, Mode::eval, nullptr);
    out.inputs.push_back(detail::correction_batch(x, y1, maps));
    out.batches.push_back(std::move(batch));
    out.maps.push_back(std::move(maps));
  });
  return out;
}

template <class T>
EvalPass validate_stage2(const WNetParams<T>& p, const Stage2Validation<T>& v, const LossConfig& loss) {
  EvalPass r;
  std::size_t n = 0;
  for (std::size_t b = 0; b < v.batches.size(); ++b) {
    auto y = block_forward(p.block2, v.inputs[b], Mode::eval, nullptr);
    const auto& batch = v.batches[b];
    r.loss += batch_loss(y, detail::targets_of(batch), detail::pointers(v.maps[b]), loss).total *
              static_cast<double>(batch.size());
    r.iou += detail::batch_iou_sum(y, batch);
    n += batch.size();
  }
  r.loss /= static_cast<double>(n);
  r.iou /= static_cast<double>(n);
  return r;
}

// Stage 2: block 1 runs in eval mode and receives no updates; block 2 is
// trained with the blended loss and per-sample weight maps built from each
// sample's (augmented) stroke.
template <class T>
StageResult train_stage2(WNetParams<T>& p, const std::vector<TrainSample>& train, const std::vector<TrainSample>& val,
                         const TrainConfig& cfg, std::ostream* log = nullptr) {
  cfg.validate();
  if (train.empty() || val.empty()) fail(Errc::invalid_argument, "stage 2 needs training and validation samples");
  const int side = p.config.input_side;
  auto params = trainable_params(p.block2);
  auto adam = make_adam(params, cfg.adam);
  const auto vset = prepare_stage2_validation(p, val, cfg);
  BlockParams<T> best = p.block2;
  const BlockParams<T>& frozen = p.block1;
  auto epoch_fn = [&](int epoch) {
    Rng rng(derive_seed(derive_seed(cfg.seed, 2), static_cast<std::uint64_t>(epoch)));
    std::vector<std::size_t> order(train.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    rng.shuffle(order.begin(), order.end());
    double total = 0.0;
    detail::for_batches(order.size(), cfg.batch_size, [&](std::size_t b, std::size_t e) {
      std::vector<TrainSample> aug;
      for (std::size_t i = b; i < e; ++i) aug.push_back(augment(train[order[i]], cfg.augment, rng));
      std::vector<const TrainSample*> batch;
      std::vector<SoftMask> maps;
      for (const auto& s : aug) {
        batch.push_back(&s);
        maps.push_back(weight_map_for(s, cfg.field()));
      }
      const auto x = detail::image_batch<T>(batch, side);
      const auto y1 = block_forward(frozen, x, Mode::eval, nullptr);
      BlockCache<T> cache;
      auto y = block_forward(p.block2, detail::correction_batch(x, y1, maps), Mode::train, &cache);
      auto L = batch_loss(y, detail::targets_of(batch), detail::pointers(maps), cfg.loss);
      p.block2.zero_grad();
      block_backward(p.block2, cache, L.grad);
      adam_step(params, adam);
      apply_running_stats(p.block2, cache);
      total += L.total * static_cast<double>(batch.size());
    });
    const auto v = validate_stage2(p, vset, cfg.loss);
    return EpochRecord{2, epoch, total / static_cast<double>(train.size()), v.loss, v.iou, 0.0};
  };
  auto res = run_stage(2, cfg.stage2_patience, cfg.max_epochs, cfg.min_delta, epoch_fn, [&] { best = p.block2; }, log);
  p.block2 = best;
  return res;
}

// ---------------------------------------------------------------------------
// Random search over {lambda1, gamma, p}

struct SearchStep {
  int step = 0;
  LossConfig loss;
  double val_iou = 0.0;
  double val_loss = 0.0;
};

inline void to_json(nlohmann::json& j, const SearchStep& s) {
  j = {{"step", s.step},         {"lambda1", s.loss.lambda1}, {"gamma", s.loss.gamma},
       {"decay_p", s.loss.decay_p}, {"val_iou", s.val_iou},   {"val_loss", s.val_loss}};
}

struct SearchResult {
  LossConfig best;
  double best_val_iou = -1.0;
  std::vector<SearchStep> steps;
};

inline LossConfig draw_loss_config(Rng& rng) {
  LossConfig c;
  c.lambda1 = rng.uniform();
  c.gamma = rng.uniform();
  c.decay_p = rng.uniform();
  return c;
}

// Every step trains block 2 from the same initialisation for a fixed epoch
// budget on top of the given (stage-1 trained) block 1, and is scored by
// the validation IoU of its best epoch.
template <class T>
SearchResult hyperparam_search(const WNetParams<T>& base, const std::vector<TrainSample>& train,
                               const std::vector<TrainSample>& val, const TrainConfig& cfg, int steps,
                               int epochs_per_step = 5, std::ostream* log = nullptr) {
  if (steps < 1) fail(Errc::invalid_argument, "search needs at least one step");
  if (epochs_per_step < 1) fail(Errc::invalid_argument, "epochs per step must be >= 1");
  Rng rng(derive_seed(cfg.seed, 0x736561726368));
  const auto fresh = make_wnet<T>(base.config, derive_seed(cfg.seed, 0xb2));
  SearchResult out;
  for (int s = 1; s <= steps; ++s) {
    TrainConfig c = cfg;
    c.loss = draw_loss_config(rng);
    c.max_epochs = epochs_per_step;
    c.stage2_patience = epochs_per_step;
    WNetParams<T> p = base;
    p.block2 = fresh.block2;
    const auto res = train_stage2(p, train, val, c, nullptr);
    const auto& best = res.history.at(static_cast<std::size_t>(res.best_epoch - 1));
    SearchStep step{s, c.loss, best.val_iou, best.val_loss};
    if (log) *log << nlohmann::json(step).dump() << '\n' << std::flush;
    if (step.val_iou > out.best_val_iou) {
      out.best_val_iou = step.val_iou;
      out.best = c.loss;
    }
    out.steps.push_back(step);
  }
  return out;
}

}  // namespace iwnet
