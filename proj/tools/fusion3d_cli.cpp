#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>

#include "CLI11.hpp"
#include "fusion3d/checkpoint.hpp"
#include "fusion3d/config.hpp"
#include "fusion3d/errors.hpp"
#include "fusion3d/gradsuite.hpp"
#include "fusion3d/kernels.hpp"
#include "fusion3d/logging.hpp"
#include "fusion3d/training.hpp"
#include "json.hpp"

using namespace fusion3d;
namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

enum Exit { kOk = 0, kCheckFailed = 1, kInputError = 2, kNumericFailure = 3 };

// Options shared by every command that builds a RunConfig.
struct ConfigArgs {
  std::string file;
  std::vector<std::string> sets;
  std::optional<std::size_t> stages, epochs, max_steps;
  std::optional<std::uint64_t> seed;
  std::optional<double> lr;

  void attach(CLI::App* cmd) {
    cmd->add_option("--config", file, "flat JSON config file")->check(CLI::ExistingFile);
    cmd->add_option("--set", sets, "override one field, key=value (repeatable)");
    cmd->add_option("--stages", stages, "cascade stages");
    cmd->add_option("--epochs", epochs, "training epochs");
    cmd->add_option("--max-steps", max_steps, "stop after this many optimizer steps");
    cmd->add_option("--seed", seed, "run seed");
    cmd->add_option("--lr", lr, "initial learning rate");
  }

  RunConfig build(const std::string& base_json = "") const {
    RunConfig cfg = file.empty() ? (base_json.empty() ? RunConfig{} : RunConfig::from_json(base_json))
                                 : RunConfig::load(file);
    for (const auto& s : sets) cfg.set(s);
    if (stages) cfg.model.stages = *stages;
    if (epochs) cfg.epochs = *epochs;
    if (max_steps) cfg.max_steps = *max_steps;
    if (seed) cfg.seed = *seed;
    if (lr) cfg.lr = *lr;
    cfg.validate();
    return cfg;
  }
};

void write_file(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw InputError("cannot write " + path.string());
  out << text;
}

std::vector<std::string> split_ids(const Manifest& m, const std::string& split) {
  if (split == "train") return m.train;
  if (split == "val") return m.val.empty() ? m.train : m.val;
  return m.ids;
}

struct Loaded {
  RunConfig cfg;
  Detector detector;
  ParamStore store;
};

Loaded load_model(const fs::path& path) {
  const Checkpoint ck = Checkpoint::load(path);
  RunConfig cfg = RunConfig::from_json(ck.config_json);
  Loaded m{cfg, Detector(cfg.model), {}};
  m.detector.init(m.store, cfg.seed);
  ck.restore(m.store);
  return m;
}

int cmd_synth(const ConfigArgs& ca, const fs::path& out, std::size_t count) {
  const RunConfig cfg = ca.build();
  const Manifest m = synthesize_dataset(out, count, cfg);
  spdlog::info("wrote {} scenes ({} train, {} val) to {}", m.ids.size(), m.train.size(), m.val.size(), out.string());
  return kOk;
}

int cmd_train(const ConfigArgs& ca, const fs::path& data, const fs::path& out, const std::string& log_file,
              const std::string& last, const std::string& resume) {
  const Manifest m = read_manifest(data);
  json manifest_cfg;
  {
    std::ifstream in(data / "manifest.json", std::ios::binary);
    manifest_cfg = json::parse(in).value("config", json::object());
  }
  const RunConfig cfg = ca.build(manifest_cfg.empty() ? "" : manifest_cfg.dump());
  Trainer trainer(cfg, load_scenes(data, m.train, cfg), load_scenes(data, m.val, cfg));
  if (!resume.empty()) trainer.resume(Checkpoint::load(resume));

  std::ofstream log_out;
  if (!log_file.empty()) {
    log_out.open(log_file, std::ios::binary);
    if (!log_out) throw InputError("cannot write " + log_file);
  }
  std::ostream& sink = log_file.empty() ? std::cout : log_out;
  TrainOptions opt;
  opt.log = [&](const std::string& line) { sink << line << '\n'; };
  opt.best_checkpoint = out;
  opt.last_checkpoint = last.empty() ? fs::path(out.string() + ".last") : fs::path(last);
  const TrainResult r = trainer.run(opt);
  spdlog::info("trained {} epochs, {} steps, best val mAP@0.25 {}", r.epochs_run, r.steps.size(), r.best_map);
  return kOk;
}

int cmd_eval(const std::string& ckpt, const std::string& det_dir, const fs::path& data, const std::string& split,
             const std::string& ablate, const std::string& out) {
  const Manifest m = read_manifest(data);
  const std::vector<std::string> ids = split_ids(m, split);
  const Ablation ab = Ablation::parse(ablate);
  std::string report;
  if (!det_dir.empty()) {
    // score existing detection files against the dataset
    json manifest_cfg;
    std::ifstream in(data / "manifest.json", std::ios::binary);
    manifest_cfg = json::parse(in).value("config", json::object());
    const RunConfig cfg = manifest_cfg.empty() ? RunConfig{} : RunConfig::from_json(manifest_cfg.dump());
    GroundTruthMap gts;
    std::vector<Detection> all;
    for (const auto& id : ids) {
      gts[id] = read_scene(data / id).boxes;
      auto dets = read_detections(fs::path(det_dir) / (id + ".json"));
      for (auto& d : dets) d.scene = id;
      all.insert(all.end(), dets.begin(), dets.end());
    }
    report = report_to_json(map_at_iou(all, gts, cfg.model.num_classes), ab.name(), cfg);
  } else {
    if (ckpt.empty()) throw InputError("eval needs --checkpoint or --detections");
    Loaded model = load_model(ckpt);
    const EvalResult r = evaluate(model.detector, model.store, load_scenes(data, ids, model.cfg), ab, model.cfg);
    report = report_to_json(r.report, ab.name(), model.cfg);
  }
  if (out.empty())
    std::cout << report;
  else
    write_file(out, report);
  return kOk;
}

int cmd_gradcheck(const std::string& module, std::size_t seeds, std::uint64_t base_seed, const std::string& corrupt) {
  kernels::testing::set_corrupted_backward(corrupt);
  const GradSuiteResult r = run_gradcheck_suite(module, seeds, base_seed);
  std::printf("%-10s %-44s %12s %6s %8s  %s\n", "module", "group", "max_rel_err", "seeds", "skipped", "status");
  for (const auto& row : r.rows) {
    std::printf("%-10s %-44s %12.3e %6zu %8zu  %s\n", row.module.c_str(), row.group.c_str(), row.max_rel_error,
                row.seeds, row.skipped, row.max_rel_error < kGradCheckTolerance ? "pass" : "FAIL");
  }
  std::printf("worst %s %.3e in %.1f s: %s\n", r.worst.c_str(), r.max_rel_error, r.seconds,
              r.passed() ? "PASS" : "FAIL");
  if (!r.passed()) {
    std::string failed;
    for (const auto& row : r.rows)
      if (row.max_rel_error >= kGradCheckTolerance) failed += " " + row.module + "/" + row.group;
    std::fprintf(stderr, "gradient check failed; worst parameter %s (rel err %.3e); failing:%s\n", r.worst.c_str(),
                 r.max_rel_error, failed.c_str());
    return kCheckFailed;
  }
  return kOk;
}

int cmd_infer(const std::string& ckpt, const fs::path& scene_dir, const fs::path& out, const std::string& ablate) {
  Loaded model = load_model(ckpt);
  const Ablation ab = Ablation::parse(ablate);
  const PreparedScene scene = load_scene(scene_dir, model.cfg);
  std::vector<Detection> dets;
  for (const auto& b : model.detector.detect(model.store, scene, ab, model.cfg.score_threshold, model.cfg.nms_iou))
    dets.push_back({b.box, b.score, scene.id});
  sort_detections(dets);
  write_detections(out, scene.id, dets, json{{"config", json::parse(model.cfg.to_json())}}.dump());
  spdlog::info("{} detections written to {}", dets.size(), out.string());
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  init_logging();
  CLI::App app{"Point cloud and image fusion 3D detector"};
  app.require_subcommand(1);

  ConfigArgs synth_cfg, train_cfg;
  std::string out, data, log_file, last, resume, ckpt, det_dir, split = "val", ablate, module = "all", corrupt, scene;
  std::size_t count = 0, seeds = 20;
  std::uint64_t base_seed = 0;

  auto* synth = app.add_subcommand("synth", "generate a synthetic dataset");
  synth_cfg.attach(synth);
  synth->add_option("--out", out, "dataset directory")->required();
  synth->add_option("--count", count, "number of scenes")->required();

  auto* train = app.add_subcommand("train", "train a detector");
  train_cfg.attach(train);
  train->add_option("--data", data, "dataset directory")->required();
  train->add_option("--out", out, "best checkpoint path")->required();
  train->add_option("--log", log_file, "step records file (default stdout)");
  train->add_option("--last", last, "checkpoint written after every epoch (default <out>.last)");
  train->add_option("--resume", resume, "continue from a checkpoint")->check(CLI::ExistingFile);

  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint or detection files");
  eval->add_option("--checkpoint", ckpt, "checkpoint path");
  eval->add_option("--detections", det_dir, "directory of <scene>.json detection files");
  eval->add_option("--data", data, "dataset directory")->required();
  eval->add_option("--split", split, "train, val or all")->check(CLI::IsMember({"train", "val", "all"}));
  eval->add_option("--ablate", ablate, "no-grm, no-gating, point-only or single-scale-k=K");
  eval->add_option("--out", out, "report path (default stdout)");

  auto* grad = app.add_subcommand("gradcheck", "finite-difference check of every backward rule");
  grad->add_option("--module", module, "all, kernels, backbones, grm, acmt or decoder");
  grad->add_option("--seeds", seeds, "seeds per check");
  grad->add_option("--seed", base_seed, "first seed");
  grad->add_option("--corrupt", corrupt)->group("");

  auto* infer = app.add_subcommand("infer", "detect objects in one scene");
  infer->add_option("--checkpoint", ckpt, "checkpoint path")->required();
  infer->add_option("--scene", scene, "scene directory")->required();
  infer->add_option("--out", out, "detection file")->required();
  infer->add_option("--ablate", ablate, "inference ablation");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kInputError;
  }

  try {
    if (*synth) return cmd_synth(synth_cfg, out, count);
    if (*train) return cmd_train(train_cfg, data, out, log_file, last, resume);
    if (*eval) return cmd_eval(ckpt, det_dir, data, split, ablate, out);
    if (*grad) return cmd_gradcheck(module, seeds, base_seed, corrupt);
    if (*infer) return cmd_infer(ckpt, scene, out, ablate);
  } catch (const NumericError& e) {
    spdlog::error("{}", e.what());
    return kNumericFailure;
  } catch (const Error& e) {
    spdlog::error("{}", e.what());
    return kInputError;
  } catch (const json::exception& e) {
    spdlog::error("{}", e.what());
    return kInputError;
  } catch (const fs::filesystem_error& e) {
    spdlog::error("{}", e.what());
    return kInputError;
  }
  return kInputError;
}
