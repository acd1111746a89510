#pragma once

#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "fusion3d/checkpoint.hpp"
#include "fusion3d/config.hpp"
#include "fusion3d/evalkit.hpp"
#include "fusion3d/model.hpp"
#include "fusion3d/optim.hpp"

// Datasets on disk, the training loop and evaluation.
namespace fusion3d {

// manifest.json in the dataset root: {"ids", "train", "val", "seed", "config"}.
struct Manifest {
  std::vector<std::string> ids, train, val;
  std::uint64_t seed = 0;
};

// Generates `count` scenes from cfg.seed into root/<id>/ and writes the
// manifest. Throws InputError for count == 0 or an unwritable root.
Manifest synthesize_dataset(const std::filesystem::path& root, std::size_t count, const RunConfig& cfg);
Manifest read_manifest(const std::filesystem::path& root);

// Reads one scene directory and runs the parameter-free preprocessing.
PreparedScene load_scene(const std::filesystem::path& dir, const RunConfig& cfg);
PreparedScene prepare_sample(const SceneSample& sample, const RunConfig& cfg);
std::vector<PreparedScene> load_scenes(const std::filesystem::path& root, const std::vector<std::string>& ids,
                                       const RunConfig& cfg);

struct StepRecord {
  std::size_t epoch = 0;
  std::size_t step = 0;
  double lr = 0.0;
  double grad_norm = 0.0;
  LossBreakdown loss;

  std::string to_json() const;
};

struct EvalResult {
  MapReport report;
  std::map<std::string, std::vector<Detection>> detections;  // per scene, descending score
};

EvalResult evaluate(const Detector& detector, const ParamStore& store, const std::vector<PreparedScene>& scenes,
                    const Ablation& ablation, const RunConfig& cfg);
// Report as JSON, with the config echoed.
std::string report_to_json(const MapReport& report, const std::string& ablation, const RunConfig& cfg);

struct TrainOptions {
  std::function<void(const std::string&)> log;  // one JSON record per call
  std::optional<std::filesystem::path> best_checkpoint;
  std::optional<std::filesystem::path> last_checkpoint;
};

struct TrainResult {
  std::vector<StepRecord> steps;
  double best_map = -1.0;  // validation mAP@0.25 of the best epoch, -1 if never evaluated
  std::size_t epochs_run = 0;
};

class Trainer {
 public:
  Trainer(RunConfig cfg, std::vector<PreparedScene> train, std::vector<PreparedScene> val = {});

  // Continues from a checkpoint written by a previous run with the same config.
  void resume(const Checkpoint& ckpt);
  // Throws NumericError naming the step when the loss or gradient is not finite.
  TrainResult run(const TrainOptions& options = {});

  const Detector& detector() const { return detector_; }
  ParamStore& store() { return store_; }
  const AdamW& optimizer() const { return optimizer_; }
  const RunConfig& config() const { return cfg_; }

 private:
  std::string state_json() const;

  RunConfig cfg_;
  Detector detector_;
  ParamStore store_;
  AdamW optimizer_;
  std::vector<PreparedScene> train_, val_;
  std::size_t next_epoch_ = 0;
  std::size_t step_ = 0;
  double best_map_ = -1.0;
};

}  // namespace fusion3d
