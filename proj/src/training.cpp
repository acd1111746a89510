#include "fusion3d/training.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>

#include <json.hpp>

#include "fusion3d/errors.hpp"
#include "fusion3d/logging.hpp"

namespace fusion3d {

using nlohmann::json;

Manifest synthesize_dataset(const std::filesystem::path& root, std::size_t count, const RunConfig& cfg) {
  if (count == 0) throw InputError("empty dataset: count must be positive");
  cfg.validate();
  std::error_code ec;
  std::filesystem::create_directories(root, ec);
  if (ec) throw InputError("cannot create " + root.string() + ": " + ec.message());
  const SceneSpec spec = cfg.scene_spec();
  Manifest m;
  m.seed = cfg.seed;
  for (std::size_t i = 0; i < count; ++i) {
    const std::string id = scene_id(i);
    write_scene(generate_scene(scene_seed(cfg.seed, i), spec, id), root / id);
    m.ids.push_back(id);
  }
  if (count >= 2) {
    std::tie(m.train, m.val) = split_dataset(m.ids, cfg.train_fraction, cfg.seed);
  } else {
    m.train = m.ids;
  }
  json j{{"ids", m.ids},
         {"train", m.train},
         {"val", m.val},
         {"seed", m.seed},
         {"config", json::parse(cfg.to_json())}};
  std::ofstream out(root / "manifest.json", std::ios::binary);
  if (!out) throw InputError("cannot write " + (root / "manifest.json").string());
  out << j.dump(2) << "\n";
  return m;
}

Manifest read_manifest(const std::filesystem::path& root) {
  const auto path = root / "manifest.json";
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InputError("missing dataset manifest " + path.string());
  json j;
  try {
    j = json::parse(in);
  } catch (const json::parse_error& e) {
    throw ParseError(std::string("manifest.json: ") + e.what());
  }
  Manifest m;
  auto list = [&](const char* key) {
    auto it = j.find(key);
    if (it == j.end() || !it->is_array()) throw ParseError(std::string("manifest.json: key '") + key + "' must be an array");
    std::vector<std::string> out;
    for (const auto& v : *it) {
      if (!v.is_string()) throw ParseError(std::string("manifest.json: key '") + key + "' must hold strings");
      out.push_back(v.get<std::string>());
    }
    return out;
  };
  m.ids = list("ids");
  m.train = list("train");
  m.val = list("val");
  if (auto it = j.find("seed"); it != j.end() && it->is_number_unsigned()) m.seed = it->get<std::uint64_t>();
  return m;
}

PreparedScene prepare_sample(const SceneSample& sample, const RunConfig& cfg) {
  if (cfg.voxel_size > 0) {
    SceneSample s = sample;
    s.cloud = voxel_downsample(s.cloud, cfg.voxel_size);
    return prepare_scene(s, cfg.model);
  }
  return prepare_scene(sample, cfg.model);
}

PreparedScene load_scene(const std::filesystem::path& dir, const RunConfig& cfg) {
  return prepare_sample(read_scene(dir), cfg);
}

std::vector<PreparedScene> load_scenes(const std::filesystem::path& root, const std::vector<std::string>& ids,
                                       const RunConfig& cfg) {
  std::vector<PreparedScene> out;
  out.reserve(ids.size());
  for (const auto& id : ids) out.push_back(load_scene(root / id, cfg));
  return out;
}

std::string StepRecord::to_json() const {
  json j{{"epoch", epoch},   {"step", step},         {"lr", lr},         {"grad_norm", grad_norm},
         {"cls", loss.cls},  {"reg", loss.reg},      {"ctr", loss.ctr},  {"total", loss.total},
         {"num_pos", loss.num_pos}};
  return j.dump();
}

EvalResult evaluate(const Detector& detector, const ParamStore& store, const std::vector<PreparedScene>& scenes,
                    const Ablation& ablation, const RunConfig& cfg) {
  EvalResult r;
  GroundTruthMap gts;
  std::vector<Detection> all;
  for (const auto& s : scenes) {
    gts[s.id] = s.boxes;
    auto& mine = r.detections[s.id];
    for (const auto& b : detector.detect(store, s, ablation, cfg.score_threshold, cfg.nms_iou)) {
      mine.push_back({b.box, b.score, s.id});
    }
    all.insert(all.end(), mine.begin(), mine.end());
  }
  r.report = map_at_iou(std::move(all), gts, cfg.model.num_classes);
  return r;
}

std::string report_to_json(const MapReport& report, const std::string& ablation, const RunConfig& cfg) {
  json j;
  j["ablation"] = ablation;
  j["num_gts"] = report.num_gts;
  json per = json::array();
  for (std::size_t t = 0; t < report.thresholds.size(); ++t) {
    per.push_back({{"iou", report.thresholds[t]}, {"ap", report.ap[t]}, {"map", report.map[t]}});
  }
  j["thresholds"] = per;
  j["config"] = json::parse(cfg.to_json());
  return j.dump(2) + "\n";
}

Trainer::Trainer(RunConfig cfg, std::vector<PreparedScene> train, std::vector<PreparedScene> val)
    : cfg_(std::move(cfg)), detector_(cfg_.model), train_(std::move(train)), val_(std::move(val)) {
  cfg_.validate();
  if (train_.empty()) throw InputError("training set is empty");
  detector_.init(store_, cfg_.seed);
  optimizer_.weight_decay = cfg_.weight_decay;
}

void Trainer::resume(const Checkpoint& ckpt) {
  ckpt.restore(store_);
  ckpt.restore_optimizer(optimizer_);
  json st;
  try {
    st = json::parse(ckpt.state_json);
    next_epoch_ = st.at("epoch").get<std::size_t>();
    step_ = st.at("step").get<std::size_t>();
    best_map_ = st.at("best_map").get<double>();
  } catch (const std::exception& e) {
    throw CheckpointError(std::string("checkpoint training state is unreadable: ") + e.what());
  }
}

std::string Trainer::state_json() const {
  return json{{"epoch", next_epoch_}, {"step", step_}, {"best_map", best_map_}}.dump();
}

TrainResult Trainer::run(const TrainOptions& options) {
  TrainResult result;
  const std::string config_json = cfg_.to_json();
  bool stop = false;
  for (std::size_t epoch = next_epoch_; epoch < cfg_.epochs && !stop; ++epoch) {
    std::vector<std::size_t> order(train_.size());
    std::iota(order.begin(), order.end(), 0);
    Rng rng(mix_seed(cfg_.seed, 0x5eed0000ULL + epoch));
    std::shuffle(order.begin(), order.end(), rng.engine());
    const double lr = cfg_.lr_at(epoch);
    for (std::size_t b = 0; b < order.size() && !stop; b += cfg_.batch_size) {
      const std::size_t end = std::min(order.size(), b + cfg_.batch_size);
      const double scale = 1.0 / static_cast<double>(end - b);
      store_.zero_grad();
      StepRecord rec;
      rec.epoch = epoch;
      rec.step = step_;
      rec.lr = lr;
      for (std::size_t i = b; i < end; ++i) {
        const LossBreakdown l = detector_.loss(store_, train_[order[i]], true, scale);
        rec.loss.cls += scale * l.cls;
        rec.loss.reg += scale * l.reg;
        rec.loss.ctr += scale * l.ctr;
        rec.loss.total += scale * l.total;
        rec.loss.num_pos += l.num_pos;
      }
      rec.grad_norm = clip_grad_norm(store_, cfg_.grad_clip);
      if (!std::isfinite(rec.loss.total) || !std::isfinite(rec.grad_norm)) {
        throw NumericError("non-finite loss or gradient at step " + std::to_string(step_) + ": " + rec.to_json());
      }
      optimizer_.step(store_, lr);
      ++step_;
      if (options.log) options.log(rec.to_json());
      result.steps.push_back(rec);
      if (cfg_.max_steps && step_ >= cfg_.max_steps) stop = true;
    }
    next_epoch_ = epoch + 1;
    ++result.epochs_run;
    const bool last = stop || next_epoch_ == cfg_.epochs;
    const bool due = last || (cfg_.eval_every && next_epoch_ % cfg_.eval_every == 0);
    bool improved = false;
    if (due && !val_.empty()) {
      const EvalResult ev = evaluate(detector_, store_, val_, {}, cfg_);
      const double m = ev.report.map[0];
      if (options.log) {
        options.log(json{{"epoch", epoch}, {"val_map25", ev.report.map[0]}, {"val_map50", ev.report.map[1]}}.dump());
      }
      if (m > best_map_) {
        best_map_ = m;
        improved = true;
      }
    } else if (val_.empty() && last) {
      improved = true;
    }
    if (improved && options.best_checkpoint) {
      Checkpoint::capture(store_, config_json, &optimizer_, state_json()).save(*options.best_checkpoint);
    }
    if (options.last_checkpoint) {
      Checkpoint::capture(store_, config_json, &optimizer_, state_json()).save(*options.last_checkpoint);
    }
  }
  result.best_map = best_map_;
  return result;
}

}  // namespace fusion3d
