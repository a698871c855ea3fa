// iwnet command line: synthetic data, training, evaluation, inference,
// diagnostics and the HTTP service.

#include "iwnet/experiment.hpp"
#include "iwnet/gradcheck.hpp"
#include "iwnet/serve.hpp"
#include "iwnet/synth.hpp"

#include <CLI11.hpp>

#include <csignal>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <sstream>

using namespace iwnet;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

// Optional --config file: {"data": {...}, "experiment": {"net": ..., "train": ...}}
struct CliConfig {
  DatasetConfig data;
  ExperimentConfig experiment;
};

CliConfig load_config(const std::string& path, std::optional<std::uint64_t> seed) {
  CliConfig c;
  if (!path.empty()) {
    const auto j = parse_json_text(read_file(path), path);
    if (!j.is_object()) fail(Errc::invalid_argument, path + " must hold a JSON object");
    try {
      if (j.contains("data")) c.data = j["data"].get<DatasetConfig>();
      if (j.contains("experiment")) c.experiment = j["experiment"].get<ExperimentConfig>();
    } catch (const json::exception& e) {
      fail(Errc::invalid_argument, path + ": " + e.what());
    }
  }
  if (seed) {
    c.data.seed = *seed;
    c.experiment.train.seed = *seed;
  }
  return c;
}

std::vector<double> parse_numbers(const std::string& text, const char* what) {
  std::vector<double> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    try {
      std::size_t used = 0;
      out.push_back(std::stod(item, &used));
      if (used != item.size()) throw std::invalid_argument(item);
    } catch (const std::logic_error&) {
      fail(Errc::invalid_argument, std::string("bad number '") + item + "' in " + what);
    }
  }
  return out;
}

std::string fmt_p(double p) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%g", p);
  return buf;
}

ServiceState load_model(const std::string& path, double decay_p) {
  if (path.empty()) fail(Errc::invalid_argument, "--model is required");
  return make_service(load_checkpoint<float>(path), decay_p);
}

// Default test indices for eval: the split stored next to the checkpoint.
std::vector<int> test_indices(const std::string& model, const std::string& split, int n) {
  fs::path p = split;
  if (p.empty() && !model.empty()) {
    const auto cand = checkpoint_base(model).parent_path() / "split.json";
    if (fs::exists(cand)) p = cand;
  }
  std::vector<int> idx;
  if (p.empty()) {
    idx.resize(static_cast<std::size_t>(n));
    std::iota(idx.begin(), idx.end(), 0);
    return idx;
  }
  const auto j = parse_json_text(read_file(p), p.string());
  idx = j.at("test").get<std::vector<int>>();
  for (int i : idx)
    if (i < 0 || i >= n) fail(Errc::out_of_bounds, "split index " + std::to_string(i) + " outside the dataset");
  return idx;
}

int cmd_gen_data(const CliConfig& cfg, const std::string& out, int n) {
  auto d = cfg.data;
  if (n > 0) d.n_cases = n;
  d.validate();
  const auto cases = generate_dataset(d);
  save_dataset(cases, out);
  write_file(fs::path(out) / "dataset.json", json(d).dump(2) + "\n");
  std::array<int, 3> tex{};
  for (const auto& c : cases) ++tex[static_cast<int>(c.spec.texture)];
  std::printf("wrote %zu cases to %s (solid %d, sub-solid %d, non-solid %d)\n", cases.size(), out.c_str(), tex[0],
              tex[1], tex[2]);
  return 0;
}

int cmd_train(const CliConfig& cfg, const std::string& data, const std::string& out, bool stage1_only) {
  auto e = cfg.experiment;
  e.stage1_only = e.stage1_only || stage1_only;
  e.validate();
  const auto cases = load_dataset(data);
  fs::create_directories(out);
  std::ofstream log(fs::path(out) / "history.jsonl");
  const auto run = train_model(cases, e, &log);
  save_checkpoint(run.params, fs::path(out) / "model");
  write_file(fs::path(out) / "split.json", json(run.split).dump(2) + "\n");
  write_file(fs::path(out) / "experiment.json", json(e).dump(2) + "\n");
  std::printf("stage 1: %zu epochs, best %d (val loss %.5f)\n", run.stage1.history.size(), run.stage1.best_epoch,
              run.stage1.best_val_loss);
  if (!e.stage1_only)
    std::printf("stage 2: %zu epochs, best %d (val loss %.5f)\n", run.stage2.history.size(), run.stage2.best_epoch,
                run.stage2.best_val_loss);
  std::printf("checkpoint %s (%.1f s)\n", (fs::path(out) / "model").c_str(), run.seconds);
  return 0;
}

int cmd_eval(const CliConfig& cfg, const std::string& data, const std::string& model, const std::string& split,
             const std::string& out, bool stage1_only) {
  const auto params = load_checkpoint<float>(model);
  const auto cases = load_dataset(data);
  check_case_sides(cases, params.config);
  const auto idx = test_indices(model, split, static_cast<int>(cases.size()));
  const auto report = evaluate(cases, idx, params, cfg.experiment.train.field(), !stage1_only);
  write_report(report, out);
  const auto& s = report.summary;
  std::printf("nodules %zu\n", s["n_nodules"].get<std::size_t>());
  std::printf("mean IoU initial %.4f\n", s["mean_iou_initial"].get<double>());
  std::printf("mean ASD initial %.4f mm\n", s["mean_asd_mm_initial"].get<double>());
  if (!stage1_only) {
    std::printf("mean IoU corrected %.4f\n", s["mean_iou_corrected"].get<double>());
    std::printf("mean ASD corrected %.4f mm\n", s["mean_asd_mm_corrected"].get<double>());
    std::printf("pct improved %.1f\n", s["pct_improved"].get<double>());
  }
  std::printf("report in %s\n", out.c_str());
  return 0;
}

void write_masks(const SoftMask& soft, const fs::path& out) {
  save_volume(soft, out / "soft");
  save_volume(threshold(soft), out / "mask");
}

int cmd_segment(const CliConfig& cfg, const std::string& volume, const std::string& model, const std::string& out) {
  const auto s = load_model(model, cfg.experiment.train.loss.decay_p);
  const auto seg = segment_volume(s, load_volume<GridKind::scalar>(volume));
  write_masks(seg.soft, out);
  std::printf("foreground voxels %zu, written to %s\n", count_foreground(threshold(seg.soft)), out.c_str());
  return 0;
}

int cmd_correct(const CliConfig& cfg, const std::string& volume, const std::string& model, const std::string& points,
                const std::string& prior, const std::string& out) {
  const auto xs = parse_numbers(points, "--points");
  if (xs.size() != 6) fail(Errc::invalid_argument, "--points needs six numbers z0,y0,x0,z1,y1,x1");
  const auto s = load_model(model, cfg.experiment.train.loss.decay_p);
  const auto vol = load_volume<GridKind::scalar>(volume);
  const auto initial = prior.empty() ? segment_volume(s, vol).soft : load_volume<GridKind::soft>(prior);
  const auto c = correct_volume(s, vol, initial, {xs[0], xs[1], xs[2]}, {xs[3], xs[4], xs[5]});
  write_masks(c.soft, out);
  if (prior.empty()) save_volume(initial, fs::path(out) / "initial");
  std::printf("foreground voxels initial %zu corrected %zu, written to %s\n", count_foreground(threshold(initial)),
              count_foreground(threshold(c.soft)), out.c_str());
  return 0;
}

int cmd_gradcheck(std::uint64_t seed, const std::string& out) {
  const auto cfg = gradcheck_config();
  const auto wide = grad_check<double>(cfg, seed);
  const auto narrow = grad_check<float>(cfg, seed);
  for (const auto* r : {&narrow, &wide})
    std::printf("%s max rel err %.3e (tolerance %.0e, %.1f s) %s\n", r->precision.c_str(), r->max_rel, r->tolerance,
                r->seconds, r->passed() ? "pass" : "FAIL");
  if (!out.empty()) write_file(out, json{{"f32", narrow.to_json()}, {"f64", wide.to_json()}}.dump(2) + "\n");
  return wide.passed() && narrow.passed() ? 0 : 1;
}

int cmd_fieldsweep(const std::string& ps, const std::string& out, int side) {
  const auto sweep = field_sweep(parse_numbers(ps, "--p"), side);
  for (const auto& e : sweep) {
    save_volume(e.slice, fs::path(out) / ("field_p" + fmt_p(e.decay_p)));
    std::printf("p=%-5s max %.3f off-segment mean %.5f swap-symmetric %s\n", fmt_p(e.decay_p).c_str(), e.max_value,
                e.off_segment_mean, e.swap_symmetric ? "yes" : "no");
  }
  return 0;
}

httplib::Server* g_server = nullptr;

int cmd_serve(const CliConfig& cfg, const std::string& model, const std::string& host, int port) {
  auto state = std::make_shared<const ServiceState>(load_model(model, cfg.experiment.train.loss.decay_p));
  httplib::Server srv;
  install_routes(srv, state);
  if (port == 0) port = srv.bind_to_any_port(host);
  else if (!srv.bind_to_port(host, port)) port = -1;
  if (port < 0) fail(Errc::io_failure, "cannot bind " + host);
  g_server = &srv;
  std::signal(SIGINT, [](int) { if (g_server) g_server->stop(); });
  std::signal(SIGTERM, [](int) { if (g_server) g_server->stop(); });
  std::printf("serving %s on http://%s:%d\n", state->model_version.c_str(), host.c_str(), port);
  std::fflush(stdout);
  srv.listen_after_bind();
  return 0;
}

bool is_validation(Errc e) {
  switch (e) {
    case Errc::io_failure:
    case Errc::non_finite: return false;
    default: return true;
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"iwnet: interactive two-block nodule segmentation"};
  app.require_subcommand(1);
  app.fallthrough();
  std::string config_path, out, model;
  std::optional<std::uint64_t> seed;
  app.add_option("--config", config_path, "JSON config with optional 'data' and 'experiment' sections");
  app.add_option("--seed", seed, "overrides the seed of data generation and training");

  auto* gen = app.add_subcommand("gen-data", "generate the synthetic nodule dataset");
  int n_cases = 0;
  gen->add_option("--out", out, "dataset directory")->required();
  gen->add_option("--n", n_cases, "number of cases");

  std::string data;
  bool stage1_only = false;
  auto* train = app.add_subcommand("train", "train block 1, then block 2 with block 1 frozen");
  train->add_option("--data", data, "dataset directory")->required();
  train->add_option("--out", out, "run directory (checkpoint, split, history)")->required();
  train->add_flag("--stage1-only", stage1_only, "skip the correction stage");

  std::string split;
  auto* eval = app.add_subcommand("eval", "score initial and corrected segmentations on held-out cases");
  eval->add_option("--data", data, "dataset directory")->required();
  eval->add_option("--model", model, "checkpoint")->required();
  eval->add_option("--split", split, "split.json (defaults to the one beside the checkpoint)");
  eval->add_option("--out", out, "report directory")->required();
  eval->add_flag("--stage1-only", stage1_only, "automatic segmentation only");

  std::string volume, points, prior;
  auto* seg = app.add_subcommand("segment", "automatic segmentation of one volume");
  seg->add_option("volume", volume, "IWV1 scalar volume")->required();
  seg->add_option("--model", model, "checkpoint")->required();
  seg->add_option("--out", out, "output directory")->required();

  auto* cor = app.add_subcommand("correct", "correct a segmentation from two boundary points");
  cor->add_option("volume", volume, "IWV1 scalar volume")->required();
  cor->add_option("--model", model, "checkpoint")->required();
  cor->add_option("--points", points, "z0,y0,x0,z1,y1,x1 in voxel coordinates")->required();
  cor->add_option("--prior", prior, "initial soft mask (default: run block 1)");
  cor->add_option("--out", out, "output directory")->required();

  std::uint64_t gc_seed = 1;
  auto* gc = app.add_subcommand("gradcheck", "compare analytic and numeric gradients on the tiny config");
  gc->add_option("--out", out, "JSON report path");

  std::string ps = "0,0.5,1,2";
  int sweep_side = 32;
  auto* sweep = app.add_subcommand("fieldsweep", "write attraction-map slices for several decay exponents");
  sweep->add_option("--p", ps, "comma-separated decay exponents");
  sweep->add_option("--side", sweep_side, "cube side");
  sweep->add_option("--out", out, "output directory")->required();

  std::string host = "127.0.0.1";
  int port = 8080;
  auto* serve = app.add_subcommand("serve", "run the HTTP correction service");
  serve->add_option("--model", model, "checkpoint")->required();
  serve->add_option("--port", port, "port (0 picks a free one)");
  serve->add_option("--host", host, "bind address");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  }

  try {
    const auto cfg = load_config(config_path, seed);
    if (*gen) return cmd_gen_data(cfg, out, n_cases);
    if (*train) return cmd_train(cfg, data, out, stage1_only);
    if (*eval) return cmd_eval(cfg, data, model, split, out, stage1_only);
    if (*seg) return cmd_segment(cfg, volume, model, out);
    if (*cor) return cmd_correct(cfg, volume, model, points, prior, out);
    if (*gc) return cmd_gradcheck(seed.value_or(gc_seed), out);
    if (*sweep) return cmd_fieldsweep(ps, out, sweep_side);
    if (*serve) return cmd_serve(cfg, model, host, port);
  } catch (const Error& e) {
    std::fprintf(stderr, "error (%s): %s\n", errc_name(e.code()), e.what());
    return is_validation(e.code()) ? 2 : 1;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 1;
}
