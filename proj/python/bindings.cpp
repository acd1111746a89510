#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "fusion3d/checkpoint.hpp"
#include "fusion3d/errors.hpp"
#include "fusion3d/gradsuite.hpp"
#include "fusion3d/logging.hpp"
#include "fusion3d/training.hpp"

namespace py = pybind11;
using namespace fusion3d;

namespace {

OrientedBox3D box_from(const std::array<double, 7>& b) { return {{b[0], b[1], b[2]}, {b[3], b[4], b[5]}, b[6]}; }

std::array<double, 7> box_to(const OrientedBox3D& b) {
  return {b.center.x, b.center.y, b.center.z, b.extents.x, b.extents.y, b.extents.z, b.yaw};
}

py::array_t<double> points_of(const PointCloud& pc) {
  py::array_t<double> out({pc.size(), std::size_t{6}});
  auto a = out.mutable_unchecked<2>();
  for (std::size_t i = 0; i < pc.size(); ++i) {
    a(i, 0) = pc.positions[i].x;
    a(i, 1) = pc.positions[i].y;
    a(i, 2) = pc.positions[i].z;
    for (int c = 0; c < 3; ++c) a(i, 3 + c) = pc.colors[i][static_cast<std::size_t>(c)];
  }
  return out;
}

std::vector<std::array<double, 8>> boxes_of(const std::vector<LabeledBox>& boxes) {
  std::vector<std::array<double, 8>> out;
  for (const auto& b : boxes) {
    const auto t = box_to(b.box);
    out.push_back({t[0], t[1], t[2], t[3], t[4], t[5], t[6], static_cast<double>(b.label)});
  }
  return out;
}

py::dict scene_dict(const SceneSample& s) {
  py::dict d;
  d["id"] = s.id;
  d["seed"] = s.seed;
  d["points"] = points_of(s.cloud);
  d["boxes"] = boxes_of(s.boxes);
  d["K"] = s.camera.K;
  d["R"] = s.camera.R;
  d["t"] = s.camera.t;
  d["width"] = s.camera.width;
  d["height"] = s.camera.height;
  return d;
}

}  // namespace

PYBIND11_MODULE(fusion3d, m) {
  m.doc() = "Point cloud and image fusion 3D detector";
  init_logging();

  py::register_exception<InputError>(m, "InputError", PyExc_ValueError);
  py::register_exception<ConfigError>(m, "ConfigError", PyExc_ValueError);
  py::register_exception<ParseError>(m, "ParseError", PyExc_ValueError);
  py::register_exception<CheckpointError>(m, "CheckpointError", PyExc_ValueError);
  py::register_exception<GenerationError>(m, "GenerationError", PyExc_RuntimeError);
  py::register_exception<NumericError>(m, "NumericError", PyExc_ArithmeticError);

  // boxes are (x, y, z, w, l, h, yaw)
  m.def("rotated_iou3d", [](const std::array<double, 7>& a, const std::array<double, 7>& b) {
    return rotated_iou3d(box_from(a), box_from(b));
  });
  m.def("encode_deltas", [](const std::array<double, 7>& box, const std::array<double, 3>& p) {
    return encode_deltas(box_from(box), {p[0], p[1], p[2]}).d;
  });
  m.def("apply_center_update", [](const std::array<double, 3>& p, const std::array<double, 6>& d, double yaw) {
    DeltaSextet s;
    s.d = d;
    const Vec3 c = apply_center_update({p[0], p[1], p[2]}, s, yaw);
    return std::array<double, 3>{c.x, c.y, c.z};
  });
  m.def("centerness_target", [](const std::array<double, 6>& d) {
    DeltaSextet s;
    s.d = d;
    return centerness_target(s);
  });

  m.def(
      "generate_scene",
      [](std::uint64_t seed, std::size_t num_points) {
        SceneSpec spec;
        spec.num_points = num_points;
        return scene_dict(generate_scene(seed, spec));
      },
      py::arg("seed"), py::arg("num_points") = 2048);
  m.def("read_scene", [](const std::string& dir) { return scene_dict(read_scene(dir)); });
  m.def(
      "synthesize",
      [](const std::string& root, std::size_t count, const std::string& config_json) {
        const RunConfig cfg = config_json.empty() ? RunConfig{} : RunConfig::from_json(config_json);
        return synthesize_dataset(root, count, cfg).ids;
      },
      py::arg("root"), py::arg("count"), py::arg("config_json") = "");

  m.def("default_config", [] { return RunConfig{}.to_json(); });
  m.def("validate_config", [](const std::string& text) { return RunConfig::from_json(text).to_json(); });

  m.def(
      "average_precision",
      [](const std::vector<bool>& flags, std::size_t num_gts) { return average_precision(flags, num_gts).ap; },
      py::arg("flags"), py::arg("num_gts"));
  m.def(
      "map_at_iou",
      [](const std::vector<std::tuple<std::string, std::array<double, 8>, double>>& dets,
         const std::map<std::string, std::vector<std::array<double, 8>>>& gts, std::size_t num_classes) {
        std::vector<Detection> d;
        for (const auto& [scene, b, score] : dets) {
          std::array<double, 7> geo;
          std::copy_n(b.begin(), 7, geo.begin());
          d.push_back({{box_from(geo), static_cast<int>(b[7])}, score, scene});
        }
        GroundTruthMap g;
        for (const auto& [scene, list] : gts)
          for (const auto& b : list) {
            std::array<double, 7> geo;
            std::copy_n(b.begin(), 7, geo.begin());
            g[scene].push_back({box_from(geo), static_cast<int>(b[7])});
          }
        const MapReport r = map_at_iou(d, g, num_classes);
        py::dict out;
        out["ap25"] = r.ap[0];
        out["ap50"] = r.ap[1];
        out["map25"] = r.map[0];
        out["map50"] = r.map[1];
        return out;
      },
      py::arg("detections"), py::arg("ground_truth"), py::arg("num_classes"));

  m.def(
      "train",
      [](const std::string& data, const std::string& out, const std::string& config_json) {
        const RunConfig cfg = RunConfig::from_json(config_json);
        const Manifest man = read_manifest(data);
        py::gil_scoped_release release;
        Trainer t(cfg, load_scenes(data, man.train, cfg), load_scenes(data, man.val, cfg));
        TrainOptions opt;
        opt.best_checkpoint = out;
        const TrainResult r = t.run(opt);
        std::vector<double> losses;
        for (const auto& s : r.steps) losses.push_back(s.loss.total);
        return losses;
      },
      py::arg("data"), py::arg("out"), py::arg("config_json"), "Trains on the manifest's train split; returns per-step total loss.");
  m.def(
      "evaluate",
      [](const std::string& checkpoint, const std::string& data, const std::string& split, const std::string& ablate) {
        const Checkpoint ck = Checkpoint::load(checkpoint);
        const RunConfig cfg = RunConfig::from_json(ck.config_json);
        Detector det(cfg.model);
        ParamStore store;
        det.init(store, cfg.seed);
        ck.restore(store);
        const Manifest man = read_manifest(data);
        const auto& ids = split == "train" ? man.train : split == "all" ? man.ids : man.val;
        const Ablation ab = Ablation::parse(ablate);
        const EvalResult r = evaluate(det, store, load_scenes(data, ids, cfg), ab, cfg);
        return report_to_json(r.report, ab.name(), cfg);
      },
      py::arg("checkpoint"), py::arg("data"), py::arg("split") = "val", py::arg("ablate") = "",
      "Returns the metrics report as a JSON string.");
  m.def(
      "gradcheck",
      [](const std::string& module, std::size_t seeds) {
        const GradSuiteResult r = run_gradcheck_suite(module, seeds);
        return py::make_tuple(r.max_rel_error, r.worst, r.rows.size());
      },
      py::arg("module") = "all", py::arg("seeds") = 2);
}
