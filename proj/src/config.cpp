#include "fusion3d/config.hpp"

#include <cmath>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>

#include <json.hpp>

#include "fusion3d/errors.hpp"

namespace fusion3d {

using nlohmann::json;

namespace {

template <typename T>
T typed(const json& v, const std::string& key) {
  try {
    if constexpr (std::is_same_v<T, std::size_t> || std::is_same_v<T, std::uint64_t>) {
      if (!v.is_number_unsigned() && !(v.is_number_integer() && v.get<std::int64_t>() >= 0)) throw ConfigError("");
    } else if constexpr (std::is_same_v<T, double>) {
      if (!v.is_number()) throw ConfigError("");
    } else if constexpr (std::is_same_v<T, std::vector<std::size_t>>) {
      if (!v.is_array()) throw ConfigError("");
      for (const auto& e : v)
        if (!e.is_number_unsigned() && !(e.is_number_integer() && e.get<std::int64_t>() >= 0)) throw ConfigError("");
    }
    return v.get<T>();
  } catch (const std::exception&) {
    throw ConfigError("config key '" + key + "' has the wrong type: " + v.dump());
  }
}

// Binds every key to its field once, so reading, writing and overriding share
// one table.
struct Field {
  std::function<json(const RunConfig&)> get;
  std::function<void(RunConfig&, const json&)> set;
};

template <typename T>
Field bind_run(T RunConfig::*member) {
  return {[member](const RunConfig& c) { return json(c.*member); },
          [member](RunConfig& c, const json& v) { c.*member = typed<T>(v, ""); }};
}

template <typename T>
Field bind_model(T ModelConfig::*member) {
  return {[member](const RunConfig& c) { return json(c.model.*member); },
          [member](RunConfig& c, const json& v) { c.model.*member = typed<T>(v, ""); }};
}

const std::vector<std::pair<std::string, Field>>& fields() {
  static const std::vector<std::pair<std::string, Field>> table = {
      {"num_queries", bind_model(&ModelConfig::num_queries)},
      {"feature_dim", bind_model(&ModelConfig::feature_dim)},
      {"image_dim", bind_model(&ModelConfig::image_dim)},
      {"heads", bind_model(&ModelConfig::heads)},
      {"acmt_layers", bind_model(&ModelConfig::acmt_layers)},
      {"stages", bind_model(&ModelConfig::stages)},
      {"grm_scales", bind_model(&ModelConfig::grm_scales)},
      {"num_classes", bind_model(&ModelConfig::num_classes)},
      {"context_points", bind_model(&ModelConfig::context_points)},
      {"edge_dim", bind_model(&ModelConfig::edge_dim)},
      {"ffn_dim", bind_model(&ModelConfig::ffn_dim)},
      {"point_hidden", bind_model(&ModelConfig::point_hidden)},
      {"image_hidden", bind_model(&ModelConfig::image_hidden)},
      {"sampling_points", bind_model(&ModelConfig::sampling_points)},
      {"idw_k", bind_model(&ModelConfig::idw_k)},
      {"point_radius", bind_model(&ModelConfig::point_radius)},
      {"max_group", bind_model(&ModelConfig::max_group)},
      {"lr", bind_run(&RunConfig::lr)},
      {"lr_decay", bind_run(&RunConfig::lr_decay)},
      {"milestones", bind_run(&RunConfig::milestones)},
      {"weight_decay", bind_run(&RunConfig::weight_decay)},
      {"batch_size", bind_run(&RunConfig::batch_size)},
      {"epochs", bind_run(&RunConfig::epochs)},
      {"max_steps", bind_run(&RunConfig::max_steps)},
      {"grad_clip", bind_run(&RunConfig::grad_clip)},
      {"seed", bind_run(&RunConfig::seed)},
      {"eval_every", bind_run(&RunConfig::eval_every)},
      {"num_points", bind_run(&RunConfig::num_points)},
      {"voxel_size", bind_run(&RunConfig::voxel_size)},
      {"min_boxes", bind_run(&RunConfig::min_boxes)},
      {"max_boxes", bind_run(&RunConfig::max_boxes)},
      {"train_fraction", bind_run(&RunConfig::train_fraction)},
      {"score_threshold", bind_run(&RunConfig::score_threshold)},
      {"nms_iou", bind_run(&RunConfig::nms_iou)},
  };
  return table;
}

void assign(RunConfig& c, const std::string& key, const json& value) {
  for (const auto& [name, field] : fields()) {
    if (name != key) continue;
    try {
      field.set(c, value);
    } catch (const ConfigError&) {
      throw ConfigError("config key '" + key + "' has the wrong type: " + value.dump());
    }
    return;
  }
  throw ConfigError("unknown config key '" + key + "'");
}

}  // namespace

void RunConfig::validate() const {
  model.validate();
  auto fail = [](const std::string& m) { throw ConfigError(m); };
  if (!(lr > 0 && std::isfinite(lr))) fail("lr must be positive");
  if (!(lr_decay > 0 && lr_decay <= 1)) fail("lr_decay must lie in (0, 1]");
  if (!(weight_decay >= 0 && std::isfinite(weight_decay))) fail("weight_decay must be non-negative");
  if (batch_size == 0) fail("batch_size must be positive");
  if (epochs == 0) fail("epochs must be positive");
  if (!(grad_clip > 0)) fail("grad_clip must be positive");
  if (num_points < model.num_queries) fail("num_points must be at least num_queries");
  if (min_boxes == 0 || max_boxes < min_boxes) fail("need 1 <= min_boxes <= max_boxes");
  if (!(train_fraction > 0 && train_fraction < 1)) fail("train_fraction must lie in (0, 1)");
  if (!(score_threshold >= 0 && score_threshold <= 1)) fail("score_threshold must lie in [0, 1]");
  if (!(nms_iou > 0 && nms_iou <= 1)) fail("nms_iou must lie in (0, 1]");
  if (!std::isfinite(voxel_size)) fail("voxel_size must be finite");
}

SceneSpec RunConfig::scene_spec() const {
  SceneSpec s;
  s.num_points = num_points;
  s.min_boxes = min_boxes;
  s.max_boxes = max_boxes;
  s.num_classes = model.num_classes;
  return s;
}

double RunConfig::lr_at(std::size_t epoch) const {
  double r = lr;
  for (auto m : milestones)
    if (epoch >= m) r *= lr_decay;
  return r;
}

std::string RunConfig::to_json() const {
  json j = json::object();
  for (const auto& [name, field] : fields()) j[name] = field.get(*this);
  return j.dump(2);
}

RunConfig RunConfig::from_json(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ConfigError(std::string("config is not valid JSON: ") + e.what());
  }
  if (!j.is_object()) throw ConfigError("config must be a JSON object");
  RunConfig c;
  for (const auto& [key, value] : j.items()) assign(c, key, value);
  c.validate();
  return c;
}

RunConfig RunConfig::load(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw InputError("cannot read config " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return from_json(ss.str());
}

void RunConfig::set(const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) throw ConfigError("override '" + assignment + "' must be key=value");
  const std::string key = assignment.substr(0, eq);
  json value;
  try {
    value = json::parse(assignment.substr(eq + 1));
  } catch (const json::parse_error&) {
    throw ConfigError("override '" + assignment + "' has a value that is not JSON");
  }
  assign(*this, key, value);
}

}  // namespace fusion3d
