#include <gtest/gtest.h>

#include <set>
#include <sstream>

#include "iwnet/experiment.hpp"
#include "support.hpp"

using namespace iwnet;
using namespace iwtest;

namespace {

Param<double> scalar_param(double v) {
  Param<double> p("w", {1});
  p.value[0] = v;
  return p;
}

std::vector<SynthCase> tiny_cases(int n, std::uint64_t seed) {
  DatasetConfig cfg;
  cfg.n_cases = n;
  cfg.side = 16;
  cfg.radius_min_mm = 2.0;
  cfg.radius_max_mm = 4.0;
  cfg.seed = seed;
  return generate_dataset(cfg);
}

TrainSample ball_sample(int side, const Vec3& c, double r) {
  const auto g = VolumeGeometry::cube(side);
  TrainSample s{ScalarVolume(g), BinaryMask(g), {}};
  for (std::size_t i = 0; i < s.target.size(); ++i) {
    const auto p = g.coords(i);
    const bool in = norm(Vec3{p[0] - c[0], p[1] - c[1], p[2] - c[2]}) <= r;
    s.target.values[i] = in ? 1 : 0;
    s.volume.values[i] = static_cast<float>(in ? 0.8 : 0.1 + 0.01 * (i % 7));
  }
  s.pair = simulate_endpoints(s.target);
  return s;
}

bool same_values(const BlockParams<float>& a, const BlockParams<float>& b) {
  std::vector<const std::vector<float>*> x, y;
  a.for_each_param([&](const Param<float>& q) { x.push_back(&q.value); });
  b.for_each_param([&](const Param<float>& q) { y.push_back(&q.value); });
  for (std::size_t k = 0; k < x.size(); ++k)
    if (*x[k] != *y[k]) return false;
  return true;
}

TrainConfig quick_config(int max_epochs) {
  TrainConfig cfg;
  cfg.batch_size = 4;
  cfg.max_epochs = max_epochs;
  cfg.seed = 17;
  return cfg;
}

}  // namespace

TEST(Adam, ZeroGradientLeavesParamsUnchanged) {
  auto p = scalar_param(0.3);
  std::vector<Param<double>*> ps{&p};
  auto s = make_adam(ps);
  for (int i = 0; i < 3; ++i) adam_step(ps, s);
  EXPECT_EQ(p.value[0], 0.3);
  EXPECT_EQ(s.step, 3);
}

TEST(Adam, FirstStepHandValue) {
  auto p = scalar_param(0.0);
  p.grad[0] = 1.0;
  std::vector<Param<double>*> ps{&p};
  auto s = make_adam(ps);
  adam_step(ps, s);
  // m_hat = v_hat = 1, so the step is lr / (1 + eps)
  EXPECT_NEAR(p.value[0], -0.001 / (1.0 + 1e-8), 1e-18);
}

TEST(Adam, ConstantGradientStepsFollowMomentRecursion) {
  auto p = scalar_param(1.0);
  std::vector<Param<double>*> ps{&p};
  auto s = make_adam(ps);
  const double g = 0.37;
  double m = 0.0, v = 0.0, prev_step = 1e9;
  for (int t = 1; t <= 20; ++t) {
    const double before = p.value[0];
    p.grad[0] = g;
    adam_step(ps, s);
    m = 0.9 * m + 0.1 * g;
    v = 0.999 * v + 0.001 * g * g;
    const double expected = 1e-3 * (m / (1 - std::pow(0.9, t))) / (std::sqrt(v / (1 - std::pow(0.999, t))) + 1e-8);
    const double step = before - p.value[0];
    EXPECT_NEAR(step, expected, 1e-15);
    EXPECT_LE(step, prev_step * (1 + 1e-12));
    prev_step = step;
  }
}

TEST(Adam, ShrinkingGradientShrinksStep) {
  auto p = scalar_param(0.0);
  std::vector<Param<double>*> ps{&p};
  auto s = make_adam(ps);
  p.grad[0] = 1.0;
  adam_step(ps, s);
  const double d1 = -p.value[0];
  p.grad[0] = 0.5;
  adam_step(ps, s);
  const double d2 = -p.value[0] - d1;
  EXPECT_GT(d2, 0.0);
  EXPECT_LT(d2, d1);
}

TEST(Adam, RejectsNonFiniteAndMismatch) {
  auto p = scalar_param(2.0);
  std::vector<Param<double>*> ps{&p};
  auto s = make_adam(ps);
  p.grad[0] = std::numeric_limits<double>::quiet_NaN();
  try {
    adam_step(ps, s);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), Errc::non_finite);
  }
  EXPECT_EQ(p.value[0], 2.0);
  auto q = scalar_param(1.0);
  std::vector<Param<double>*> two{&p, &q};
  EXPECT_THROW(adam_step(two, s), Error);
}

TEST(Split, ScanLevelAndDisjoint) {
  const auto s = split_scans(200, 0.2, 0.2, 3);
  EXPECT_EQ(s.test.size(), 40u);
  EXPECT_EQ(s.val.size(), 32u);
  EXPECT_EQ(s.train.size(), 128u);
  std::set<int> all;
  for (const auto* v : {&s.train, &s.val, &s.test})
    for (int i : *v) EXPECT_TRUE(all.insert(i).second) << i;
  EXPECT_EQ(all.size(), 200u);
  EXPECT_EQ(split_scans(200, 0.2, 0.2, 3).test, s.test);
  EXPECT_NE(split_scans(200, 0.2, 0.2, 4).test, s.test);
  EXPECT_THROW(split_scans(1, 0.2, 0.2, 1), Error);
  EXPECT_THROW(split_scans(3, 0.5, 0.9, 1), Error);
}

TEST(Split, SamplesPairEveryAnnotator) {
  const auto cases = tiny_cases(4, 2);
  const auto s = make_samples(cases, {1, 3});
  ASSERT_EQ(s.size(), cases[1].annotations.size() + cases[3].annotations.size());
  for (std::size_t k = 0; k < cases[1].annotations.size(); ++k) {
    EXPECT_EQ(s[k].target, cases[1].annotations[k]);
    EXPECT_EQ(s[k].volume, cases[1].volume);
    const auto want = simulate_endpoints(cases[1].annotations[k]);
    EXPECT_EQ(s[k].pair.p0, want.p0);
    EXPECT_EQ(s[k].pair.p1, want.p1);
  }
}

TEST(Split, WeightMapFollowsTheAnnotator) {
  const auto cases = tiny_cases(1, 8);
  const auto s = make_samples(cases, {0});
  ASSERT_GE(s.size(), 2u);
  const FieldParams fp{0.44, 1e-3};
  bool any_diff = false;
  for (std::size_t k = 1; k < s.size(); ++k) {
    const bool same_pair = s[k].pair.p0 == s[0].pair.p0 && s[k].pair.p1 == s[0].pair.p1;
    const bool same_map = weight_map_for(s[k], fp) == weight_map_for(s[0], fp);
    EXPECT_EQ(same_pair, same_map);
    any_diff = any_diff || !same_map;
  }
  EXPECT_TRUE(any_diff);
}

TEST(Augment, IdentityIsExact) {
  const auto s = ball_sample(16, {7, 8, 6.5}, 4);
  const auto out = apply_transform(s, SpatialTransform{});
  EXPECT_EQ(out.volume, s.volume);
  EXPECT_EQ(out.target, s.target);
  EXPECT_EQ(out.pair.p0, s.pair.p0);
  AugmentConfig off{false, false, false, false};
  Rng rng(1);
  EXPECT_EQ(augment(s, off, rng).volume, s.volume);
}

TEST(Augment, XFlipMirrorsEverything) {
  const auto s = ball_sample(16, {7, 8, 5}, 3.5);
  SpatialTransform t;
  t.flip = {false, false, true};
  const auto out = apply_transform(s, t);
  BinaryMask flipped(s.target.geometry);
  for (int z = 0; z < 16; ++z)
    for (int y = 0; y < 16; ++y)
      for (int x = 0; x < 16; ++x) flipped.at(z, y, x) = s.target.at(z, y, 15 - x);
  EXPECT_EQ(iou(out.target, flipped), 1.0);
  EXPECT_EQ(out.pair.p0, (Vec3{s.pair.p0[0], s.pair.p0[1], 15 - s.pair.p0[2]}));
  EXPECT_EQ(out.pair.p1, (Vec3{s.pair.p1[0], s.pair.p1[1], 15 - s.pair.p1[2]}));
  for (int x = 0; x < 16; ++x) EXPECT_EQ(out.volume.at(3, 4, x), s.volume.at(3, 4, 15 - x));
}

TEST(Augment, IntegerTransformsMoveSingleVoxelWithItsPoint) {
  // quarter turns, flips and shifts are exact lattice maps
  Rng rng(4);
  for (int trial = 0; trial < 40; ++trial) {
    SpatialTransform t;
    for (int a = 0; a < 3; ++a) {
      t.flip[a] = rng.bernoulli(0.5);
      t.shift[a] = rng.integer(-2, 2);
    }
    t.quarter_turns = rng.integer(0, 3);
    const auto g = VolumeGeometry::cube(12);
    TrainSample s{ScalarVolume(g), BinaryMask(g), {}};
    const std::array<int, 3> v{rng.integer(3, 8), rng.integer(3, 8), rng.integer(3, 8)};
    s.target.at(v[0], v[1], v[2]) = 1;
    s.volume.at(v[0], v[1], v[2]) = 1.0f;
    s.pair = {{double(v[0]), double(v[1]), double(v[2])}, {0, 0, 0}};
    const auto out = apply_transform(s, t);
    const Vec3 q = out.pair.p0;
    ASSERT_EQ(count_foreground(out.target), 1u);
    const int qz = static_cast<int>(std::lround(q[0])), qy = static_cast<int>(std::lround(q[1])),
              qx = static_cast<int>(std::lround(q[2]));
    EXPECT_NEAR(q[0], qz, 1e-12);
    EXPECT_NEAR(q[1], qy, 1e-12);
    EXPECT_NEAR(q[2], qx, 1e-12);
    EXPECT_EQ(out.target.at(qz, qy, qx), 1);
    EXPECT_EQ(out.volume.at(qz, qy, qx), 1.0f);
  }
}

TEST(Augment, DeterministicUnderSeed) {
  const auto s = ball_sample(16, {8, 7, 8}, 4);
  AugmentConfig cfg;
  Rng a(99), b(99);
  const auto x = augment(s, cfg, a);
  const auto y = augment(s, cfg, b);
  EXPECT_EQ(x.volume, y.volume);
  EXPECT_EQ(x.target, y.target);
  EXPECT_EQ(x.pair.p0, y.pair.p0);
  EXPECT_EQ(x.pair.p1, y.pair.p1);
}

TEST(Augment, TargetStaysBinaryAndKeepsItsSize) {
  const auto s = ball_sample(32, {15.5, 15.5, 15.5}, 5);
  const double n0 = static_cast<double>(count_foreground(s.target));
  Rng rng(7);
  AugmentConfig cfg;
  for (int trial = 0; trial < 60; ++trial) {
    const auto t = draw_transform(cfg, rng);
    EXPECT_GE(t.zoom, 0.9);
    EXPECT_LE(t.zoom, 1.1);
    const auto out = apply_transform(s, t);
    for (auto v : out.target.values) EXPECT_TRUE(v == 0 || v == 1);
    const double ratio = static_cast<double>(count_foreground(out.target)) / n0;
    EXPECT_GE(ratio, 0.8);
    EXPECT_LE(ratio, 1.2);
    for (float v : out.volume.values) {
      EXPECT_GE(v, 0.1f);
      EXPECT_LE(v, 0.8f);
    }
  }
}

TEST(Augment, PointsStayOnTheTransformedStroke) {
  // the transformed end-points stay within a voxel of the transformed target
  const auto s = ball_sample(32, {15, 16, 15.5}, 6);
  Rng rng(12);
  AugmentConfig cfg;
  for (int trial = 0; trial < 20; ++trial) {
    const auto out = augment(s, cfg, rng);
    for (const auto& p : {out.pair.p0, out.pair.p1}) {
      bool near = false;
      for (int dz = -1; dz <= 1; ++dz)
        for (int dy = -1; dy <= 1; ++dy)
          for (int dx = -1; dx <= 1; ++dx) {
            const int z = static_cast<int>(std::lround(p[0])) + dz, y = static_cast<int>(std::lround(p[1])) + dy,
                      x = static_cast<int>(std::lround(p[2])) + dx;
            if (out.target.geometry.contains(z, y, x) && out.target.at(z, y, x)) near = true;
          }
      EXPECT_TRUE(near);
    }
  }
}

TEST(Augment, FallsBackToIdentity) {
  const auto s = ball_sample(16, {8, 8, 8}, 2);
  AugmentConfig cfg{false, true, false, false};
  cfg.max_shift = 1000;  // every draw pushes the target out of the grid
  Rng rng(5);
  const auto out = augment(s, cfg, rng);
  EXPECT_EQ(out.target, s.target);
  EXPECT_EQ(out.volume, s.volume);
}

TEST(EarlyStop, ConstantLossStopsAfterPatience) {
  for (int patience : {1, 3, 5}) {
    int snapshots = 0;
    const auto r = run_stage(
        1, patience, 0, 1e-4, [](int) { return EpochRecord{1, 0, 0.5, 0.7, 0.0, 0.0}; }, [&] { ++snapshots; }, nullptr);
    EXPECT_EQ(r.history.size(), static_cast<std::size_t>(1 + patience));
    EXPECT_EQ(r.best_epoch, 1);
    EXPECT_EQ(snapshots, 1);
    EXPECT_TRUE(r.stopped_early);
  }
}

TEST(EarlyStop, BestEpochAndTolerance) {
  const std::vector<double> losses{5, 4, 3, 2.99995, 3.5, 2.9998, 9};
  std::vector<int> snaps;
  int calls = 0;
  std::ostringstream log;
  const auto r = run_stage(
      2, 4, 7, 1e-4,
      [&](int epoch) {
        ++calls;
        return EpochRecord{0, epoch, 1.0, losses[static_cast<std::size_t>(epoch - 1)], 0.0, 0.0};
      },
      [&] { snaps.push_back(calls); }, &log);
  // 2.99995 is within the tolerance of 3; 2.9998 is not
  EXPECT_EQ(snaps, (std::vector<int>{1, 2, 3, 6}));
  EXPECT_EQ(r.best_epoch, 6);
  EXPECT_EQ(r.history.size(), 7u);
  EXPECT_FALSE(r.stopped_early);
  std::istringstream in(log.str());
  std::string line;
  int lines = 0;
  while (std::getline(in, line)) {
    const auto j = nlohmann::json::parse(line);
    for (const char* k : {"stage", "epoch", "train_loss", "val_loss", "val_iou", "seconds"}) EXPECT_TRUE(j.contains(k));
    EXPECT_EQ(j["stage"], 2);
    ++lines;
  }
  EXPECT_EQ(lines, 7);
}

TEST(EarlyStop, EpochCap) {
  int n = 0;
  const auto r = run_stage(
      1, 3, 4, 1e-4, [&](int) { return EpochRecord{1, 0, 1.0, 10.0 - ++n, 0.0, 0.0}; }, [] {}, nullptr);
  EXPECT_EQ(r.history.size(), 4u);
  EXPECT_FALSE(r.stopped_early);
  EXPECT_THROW(run_stage(
                   1, 3, 4, 1e-4, [](int) { return EpochRecord{1, 0, std::nan(""), 1.0, 0.0, 0.0}; }, [] {}, nullptr),
               Error);
}

class ToyTraining : public ::testing::Test {
 protected:
  void SetUp() override {
    cases = tiny_cases(8, 31);
    split = split_scans(8, 0.25, 0.2, 1);
    train = make_samples(cases, split.train);
    val = make_samples(cases, split.val);
  }
  WNetConfig net{16, 4, 2, 2};
  std::vector<SynthCase> cases;
  DataSplit split;
  std::vector<TrainSample> train, val;
};

TEST_F(ToyTraining, Stage1ImprovesAndKeepsBestParams) {
  auto p = make_wnet<float>(net, 3);
  auto cfg = quick_config(6);
  cfg.adam.lr = 3e-3;
  const auto r = train_stage1(p, train, val, cfg);
  ASSERT_GE(r.history.size(), 2u);
  const auto& best = r.history.at(static_cast<std::size_t>(r.best_epoch - 1));
  EXPECT_LT(best.train_loss, r.history.front().train_loss);
  EXPECT_LE(best.val_loss, r.history.front().val_loss);
  // returned params reproduce the best epoch, not the last one
  EXPECT_EQ(validate_stage1(p, val, cfg.batch_size).loss, r.best_val_loss);
}

TEST_F(ToyTraining, Stage2FreezesBlock1) {
  auto p = make_wnet<float>(net, 4);
  auto cfg = quick_config(2);
  train_stage1(p, train, val, cfg);
  const auto block1 = p.block1;
  const auto block2 = p.block2;
  cfg.max_epochs = 5;
  cfg.adam.lr = 3e-3;
  const auto r = train_stage2(p, train, val, cfg);
  double delta = 0.0;
  std::vector<const Param<float>*> before, after;
  block1.for_each_param([&](const Param<float>& q) { before.push_back(&q); });
  p.block1.for_each_param([&](const Param<float>& q) { after.push_back(&q); });
  for (std::size_t k = 0; k < before.size(); ++k)
    for (std::size_t i = 0; i < before[k]->size(); ++i)
      delta += std::abs(double(before[k]->value[i]) - double(after[k]->value[i]));
  EXPECT_EQ(delta, 0.0);
  EXPECT_FALSE(same_values(p.block2, block2));
  const auto& best = r.history.at(static_cast<std::size_t>(r.best_epoch - 1));
  EXPECT_LT(best.val_loss, r.history.front().val_loss);
  const auto v = prepare_stage2_validation(p, val, cfg);
  EXPECT_EQ(validate_stage2(p, v, cfg.loss).loss, r.best_val_loss);
}

TEST_F(ToyTraining, RunsAreDeterministic) {
  ExperimentConfig ec;
  ec.net = net;
  ec.train = quick_config(2);
  const auto a = train_model(cases, ec);
  const auto b = train_model(cases, ec);
  ASSERT_EQ(a.history().size(), b.history().size());
  for (std::size_t i = 0; i < a.history().size(); ++i) {
    EXPECT_EQ(a.history()[i].train_loss, b.history()[i].train_loss);
    EXPECT_EQ(a.history()[i].val_loss, b.history()[i].val_loss);
    EXPECT_EQ(a.history()[i].val_iou, b.history()[i].val_iou);
  }
  EXPECT_TRUE(a.params == b.params);
  ec.train.seed = 18;
  const auto c = train_model(cases, ec);
  EXPECT_NE(c.history()[0].train_loss, a.history()[0].train_loss);
}

TEST_F(ToyTraining, HyperparameterSearch) {
  auto p = make_wnet<float>(net, 5);
  auto cfg = quick_config(1);
  std::ostringstream log;
  const auto one = hyperparam_search(p, train, val, cfg, 1, 1, &log);
  ASSERT_EQ(one.steps.size(), 1u);
  EXPECT_EQ(nlohmann::json(one.best.lambda1), nlohmann::json(one.steps[0].loss.lambda1));
  EXPECT_EQ(one.best.gamma, one.steps[0].loss.gamma);
  EXPECT_EQ(one.best.decay_p, one.steps[0].loss.decay_p);
  EXPECT_EQ(nlohmann::json::parse(log.str())["step"], 1);
  const auto a = hyperparam_search(p, train, val, cfg, 2, 1);
  const auto b = hyperparam_search(p, train, val, cfg, 2, 1);
  for (std::size_t i = 0; i < 2; ++i) {
    EXPECT_EQ(a.steps[i].loss.lambda1, b.steps[i].loss.lambda1);
    EXPECT_EQ(a.steps[i].val_iou, b.steps[i].val_iou);
    for (double v : {a.steps[i].loss.lambda1, a.steps[i].loss.gamma, a.steps[i].loss.decay_p}) {
      EXPECT_GE(v, 0.0);
      EXPECT_LT(v, 1.0);
    }
  }
  EXPECT_EQ(a.steps[0].loss.lambda1, one.steps[0].loss.lambda1);
  EXPECT_THROW(hyperparam_search(p, train, val, cfg, 0, 1), Error);
}

TEST(TrainConfigJson, RoundTrip) {
  TrainConfig c;
  c.batch_size = 3;
  c.max_epochs = 7;
  c.loss.gamma = 0.25;
  c.augment = {false, false, false, false};
  const auto back = nlohmann::json(c).get<TrainConfig>();
  EXPECT_EQ(back.batch_size, 3);
  EXPECT_EQ(back.max_epochs, 7);
  EXPECT_EQ(back.loss.gamma, 0.25);
  EXPECT_FALSE(back.augment.enabled());
  TrainConfig bad;
  bad.batch_size = 0;
  EXPECT_THROW(bad.validate(), Error);
}
