#pragma once

// Whole-pipeline helpers: train both blocks on a case list, then evaluate
// automatic segmentation and simulated two-point correction on held-out
// cases.

#include <filesystem>
#include <limits>
#include <ostream>

#include "iwnet/train.hpp"

namespace iwnet {

struct ExperimentConfig {
  WNetConfig net;
  TrainConfig train;
  double test_frac = 0.2;
  double val_frac = 0.2;
  bool stage1_only = false;

  void validate() const {
    net.validate();
    train.validate();
  }
};

inline void to_json(nlohmann::json& j, const ExperimentConfig& c) {
  j = {{"net", c.net}, {"train", c.train}, {"test_frac", c.test_frac}, {"val_frac", c.val_frac},
       {"stage1_only", c.stage1_only}};
}

inline void from_json(const nlohmann::json& j, ExperimentConfig& c) {
  if (j.contains("net")) c.net = j["net"].get<WNetConfig>();
  if (j.contains("train")) c.train = j["train"].get<TrainConfig>();
  c.test_frac = j.value("test_frac", c.test_frac);
  c.val_frac = j.value("val_frac", c.val_frac);
  c.stage1_only = j.value("stage1_only", c.stage1_only);
}

struct TrainRun {
  WNetParams<float> params;
  DataSplit split;
  StageResult stage1;
  StageResult stage2;
  BlockParams<float> block1_after_stage1;
  double seconds = 0.0;

  std::vector<EpochRecord> history() const {
    auto h = stage1.history;
    h.insert(h.end(), stage2.history.begin(), stage2.history.end());
    return h;
  }
};

inline void check_case_sides(const std::vector<SynthCase>& cases, const WNetConfig& net) {
  for (const auto& c : cases)
    if (c.volume.geometry.dims != std::array<int, 3>{net.input_side, net.input_side, net.input_side})
      fail(Errc::shape_mismatch, c.id + " does not match the network input side " + std::to_string(net.input_side));
}

inline TrainRun train_model(const std::vector<SynthCase>& cases, const ExperimentConfig& cfg,
                            std::ostream* log = nullptr) {
  cfg.validate();
  check_case_sides(cases, cfg.net);
  const auto t0 = std::chrono::steady_clock::now();
  TrainRun run;
  run.split = split_scans(static_cast<int>(cases.size()), cfg.test_frac, cfg.val_frac, cfg.train.seed);
  const auto train = make_samples(cases, run.split.train);
  const auto val = make_samples(cases, run.split.val);
  run.params = make_wnet<float>(cfg.net, derive_seed(cfg.train.seed, 0x6e6574));
  run.stage1 = train_stage1(run.params, train, val, cfg.train, log);
  run.block1_after_stage1 = run.params.block1;
  if (!cfg.stage1_only) run.stage2 = train_stage2(run.params, train, val, cfg.train, log);
  run.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return run;
}

// ---------------------------------------------------------------------------
// Evaluation

inline double mean_asd(const AnnotationSet& ann, const std::vector<const BinaryMask*>& preds) {
  double s = 0.0;
  for (std::size_t n = 0; n < ann.size(); ++n) {
    if (count_foreground(*preds[n]) == 0) return std::numeric_limits<double>::quiet_NaN();
    s += asd(ann[n], *preds[n]);
  }
  return s / static_cast<double>(ann.size());
}

struct CaseEvaluation {
  EvalRecord initial;
  std::optional<EvalRecord> corrected;
};

// Initial mask: block 1 thresholded at 0.5, scored against every annotator.
// Correction: each annotator's own stroke (simulated end-points) drives
// block 2; per annotator the better of initial and corrected by IoU is kept
// and the ASD of the kept mask is reported.
template <class T>
CaseEvaluation evaluate_case(const SynthCase& c, const WNetParams<T>& p, const FieldParams& fp, bool correct) {
  CaseEvaluation out;
  const auto& ann = c.annotations;
  const auto soft = forward_block1(c.volume, p);
  const auto init = threshold(soft);
  const double radius = equivalent_radius(ann);
  std::vector<const BinaryMask*> same(ann.size(), &init);
  out.initial = {c.id, mean_iou_vs_annotators(init, ann), mean_asd(ann, same), radius, c.spec.texture, false};
  if (!correct) return out;
  std::vector<BinaryMask> fixed;
  for (const auto& a : ann) {
    const auto m = attraction_map(simulate_endpoints(a), fp, c.volume.geometry);
    fixed.push_back(threshold(forward_block2(c.volume, soft, m, p)));
  }
  const auto best = corrected_best(ann, init, fixed);
  std::vector<const BinaryMask*> kept;
  for (std::size_t n = 0; n < ann.size(); ++n) kept.push_back(best.kept_corrected[n] ? &fixed[n] : &init);
  out.corrected = EvalRecord{c.id, best.iou, mean_asd(ann, kept), radius, c.spec.texture, true};
  return out;
}

struct EvalReport {
  std::vector<EvalRecord> records;
  nlohmann::json summary;
};

template <class T>
EvalReport evaluate(const std::vector<SynthCase>& cases, const std::vector<int>& indices, const WNetParams<T>& p,
                    const FieldParams& fp, bool correct = true) {
  EvalReport r;
  for (int i : indices) {
    const auto e = evaluate_case(cases.at(static_cast<std::size_t>(i)), p, fp, correct);
    r.records.push_back(e.initial);
    if (e.corrected) r.records.push_back(*e.corrected);
  }
  r.summary = summarize(r.records);
  return r;
}

inline void write_report(const EvalReport& r, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  write_file(dir / "eval.csv", records_csv(r.records));
  write_file(dir / "summary.json", r.summary.dump(2));
}

}  // namespace iwnet
