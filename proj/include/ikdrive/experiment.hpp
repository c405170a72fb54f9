#pragma once

#include <cstdint>
#include <filesystem>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "ikdrive/hashing.hpp"
#include "ikdrive/ioutil.hpp"
#include "ikdrive/models.hpp"
#include "ikdrive/trainer.hpp"
#include "ikdrive/worldsim.hpp"

namespace ikdrive {

inline constexpr const char* kToolVersion = "ikdrive 0.3.0";

// Knobs for the probe/analysis commands. Episode caps bound the per-command
// cost; 0 means "use everything".
struct AnalysisConfig {
  std::vector<Placement> placements{Placement::near, Placement::far, Placement::sky_far};
  std::vector<double> scales{1.0, 1.0, 1.0};
  double tau = 2.14;        // gap threshold for the correction-rate estimate
  double quantile = 0.25;   // group fraction for the variant comparison
  int chains = 1;           // sampling chains averaged per plan
  double dead_band = 0.0;   // stitch deltas inside the band do not count as deceleration
  double stratify_low = 0.30;
  double stratify_high = 0.30;
  int decomp_bins = 2;
  int decomp_bin_size = 32;
  int saliency_episodes = 8;
  int nsp_episodes = 32;
  int stitch_episodes = 64;
  int compare_episodes = 64;
  int plot_episodes = 4;

  void validate() const {
    auto bad = [](const std::string& what) { throw ConfigError("analysis config: " + what); };
    if (placements.empty()) bad("placements must not be empty");
    if (placements.size() != scales.size()) bad("scales must have one entry per placement");
    for (double s : scales)
      if (!(s >= 0.0)) bad("scales must be >= 0");
    if (!(tau >= 0.0)) bad("tau must be >= 0");
    if (!(quantile > 0.0 && quantile <= 0.5)) bad("quantile must lie in (0, 0.5]");
    if (chains < 1) bad("chains must be >= 1");
    if (!(dead_band >= 0.0)) bad("dead_band must be >= 0");
    if (!(stratify_low > 0.0 && stratify_high > 0.0 && stratify_low + stratify_high <= 1.0))
      bad("stratify fractions must be positive and sum to at most 1");
    if (decomp_bins < 1) bad("decomp_bins must be >= 1");
    if (decomp_bin_size < 2) bad("decomp_bin_size must be >= 2");
    if (saliency_episodes < 0 || nsp_episodes < 0 || stitch_episodes < 0 || compare_episodes < 0 ||
        plot_episodes < 0)
      bad("episode caps must be >= 0");
  }
};

struct IoConfig {
  std::string episode_file = "episodes.ikep";
  std::string preview_file = "episodes_preview.jsonl";
  int64_t preview_records = 8;
  std::string checkpoint_file = "checkpoint.ikck";
  std::string log_file = "train_log.csv";
  std::string report_file = "report.json";

  void validate() const {
    for (const std::string* s : {&episode_file, &preview_file, &checkpoint_file, &log_file, &report_file}) {
      if (s->empty()) throw ConfigError("io config: file names must not be empty");
      if (s->find('/') != std::string::npos || s->find('\\') != std::string::npos)
        throw ConfigError("io config: file names must be plain names, not paths: " + *s);
    }
    if (preview_records < 0) throw ConfigError("io config: preview_records must be >= 0");
  }
};

struct ExperimentConfig {
  uint64_t seed = 1;
  int64_t n_episodes = 256;
  WorldConfig world;
  TrainConfig train;  // train.seed mirrors the master seed
  ModelConfig model;  // grid dims and horizon are copied from the world section
  AnalysisConfig analysis;
  IoConfig io;

  void validate() const {
    if (n_episodes < 1) throw ConfigError("experiment config: n_episodes must be >= 1");
    world.validate();
    train.validate();
    model.validate();
    analysis.validate();
    io.validate();
  }
};

namespace detail {

// Strict field reader: present keys must have the right JSON type, absent keys
// keep their defaults, and leftover keys are rejected by done().
class FieldBinder {
 public:
  FieldBinder(const nlohmann::json& j, std::string section) : j_(j), section_(std::move(section)) {
    if (!j_.is_object()) throw ConfigError(section_ + ": expected a JSON object");
  }

  const nlohmann::json* find(const char* key) {
    seen_.insert(key);
    auto it = j_.find(key);
    return it == j_.end() ? nullptr : &*it;
  }

  void dbl(const char* key, double& out) {
    if (const nlohmann::json* v = find(key)) {
      if (!v->is_number()) throw ConfigError(loc(key) + ": expected a number");
      out = v->get<double>();
    }
  }

  void i32(const char* key, int& out) {
    if (const nlohmann::json* v = find(key)) {
      if (!v->is_number_integer()) throw ConfigError(loc(key) + ": expected an integer");
      out = v->get<int>();
    }
  }

  void i64(const char* key, int64_t& out) {
    if (const nlohmann::json* v = find(key)) {
      if (!v->is_number_integer()) throw ConfigError(loc(key) + ": expected an integer");
      out = v->get<int64_t>();
    }
  }

  void u64(const char* key, uint64_t& out) {
    if (const nlohmann::json* v = find(key)) {
      if (!v->is_number_integer() || (v->is_number_integer() && !v->is_number_unsigned() && v->get<int64_t>() < 0))
        throw ConfigError(loc(key) + ": expected a non-negative integer");
      out = v->get<uint64_t>();
    }
  }

  void bl(const char* key, bool& out) {
    if (const nlohmann::json* v = find(key)) {
      if (!v->is_boolean()) throw ConfigError(loc(key) + ": expected a boolean");
      out = v->get<bool>();
    }
  }

  void str(const char* key, std::string& out) {
    if (const nlohmann::json* v = find(key)) {
      if (!v->is_string()) throw ConfigError(loc(key) + ": expected a string");
      out = v->get<std::string>();
    }
  }

  void done() const {
    for (auto it = j_.begin(); it != j_.end(); ++it)
      if (!seen_.count(it.key()))
        throw ConfigError(section_ + ": unknown key '" + it.key() + "'");
  }

  std::string loc(const char* key) const { return section_ + "." + key; }

  const nlohmann::json& raw() const { return j_; }

 private:
  const nlohmann::json& j_;
  std::string section_;
  std::set<std::string> seen_;
};

inline WorldConfig world_from_json(const nlohmann::json& j) {
  WorldConfig w;
  FieldBinder b(j, "world");
  b.i32("grid_h", w.grid_h);
  b.i32("grid_w", w.grid_w);
  b.i32("grid_d", w.grid_d);
  b.i32("sky_rows", w.sky_rows);
  b.dbl("x_max", w.x_max);
  b.dbl("y_max", w.y_max);
  b.i32("horizon_steps", w.horizon_steps);
  b.dbl("dt", w.dt);
  b.dbl("epsilon", w.epsilon);
  b.dbl("speed_min", w.speed_min);
  b.dbl("speed_max", w.speed_max);
  b.dbl("blocking_speed_min", w.blocking_speed_min);
  b.dbl("vx_max", w.vx_max);
  b.dbl("yaw_rate_range", w.yaw_rate_range);
  b.dbl("yaw_max", w.yaw_max);
  b.dbl("accel_max", w.accel_max);
  if (const nlohmann::json* v = b.find("command_probs")) {
    if (!v->is_array() || v->size() != 3) throw ConfigError("world.command_probs: expected 3 numbers");
    for (size_t i = 0; i < 3; ++i) {
      if (!(*v)[i].is_number()) throw ConfigError("world.command_probs: expected 3 numbers");
      w.command_probs[i] = (*v)[i].get<double>();
    }
  }
  b.i32("clutter_max", w.clutter_max);
  b.i32("distractor_max", w.distractor_max);
  b.i32("max_obstacles", w.max_obstacles);
  b.dbl("obstacle_speed_max", w.obstacle_speed_max);
  b.dbl("clutter_radius_min", w.clutter_radius_min);
  b.dbl("clutter_radius_max", w.clutter_radius_max);
  b.dbl("blocking_radius_min", w.blocking_radius_min);
  b.dbl("blocking_radius_max", w.blocking_radius_max);
  b.dbl("blocking_dist_min", w.blocking_dist_min);
  b.dbl("blocking_end_margin", w.blocking_end_margin);
  b.dbl("turn_rate", w.turn_rate);
  b.dbl("blend_time", w.blend_time);
  b.dbl("correction_threshold", w.correction_threshold);
  b.dbl("corridor_halfwidth", w.corridor_halfwidth);
  b.dbl("standoff", w.standoff);
  b.dbl("clutter_clearance", w.clutter_clearance);
  b.dbl("lateral_offset", w.lateral_offset);
  b.dbl("sigma_obs", w.sigma_obs);
  b.dbl("road_base_amp", w.road_base_amp);
  b.dbl("dash_amp", w.dash_amp);
  b.dbl("dash_period", w.dash_period);
  b.dbl("dash_halfwidth", w.dash_halfwidth);
  b.dbl("sky_base_amp", w.sky_base_amp);
  b.dbl("vehicle_amp", w.vehicle_amp);
  b.dbl("pedestrian_amp", w.pedestrian_amp);
  b.dbl("distractor_amp", w.distractor_amp);
  b.dbl("unit_sprite_amp", w.unit_sprite_amp);
  b.dbl("scale_max", w.scale_max);
  b.dbl("sigma_xi", w.sigma_xi);
  b.dbl("offroad_x_max", w.offroad_x_max);
  b.i32("max_retries", w.max_retries);
  b.done();
  return w;
}

inline nlohmann::json world_to_json(const WorldConfig& w) {
  nlohmann::json j;
  j["grid_h"] = w.grid_h;
  j["grid_w"] = w.grid_w;
  j["grid_d"] = w.grid_d;
  j["sky_rows"] = w.sky_rows;
  j["x_max"] = w.x_max;
  j["y_max"] = w.y_max;
  j["horizon_steps"] = w.horizon_steps;
  j["dt"] = w.dt;
  j["epsilon"] = w.epsilon;
  j["speed_min"] = w.speed_min;
  j["speed_max"] = w.speed_max;
  j["blocking_speed_min"] = w.blocking_speed_min;
  j["vx_max"] = w.vx_max;
  j["yaw_rate_range"] = w.yaw_rate_range;
  j["yaw_max"] = w.yaw_max;
  j["accel_max"] = w.accel_max;
  j["command_probs"] = w.command_probs;
  j["clutter_max"] = w.clutter_max;
  j["distractor_max"] = w.distractor_max;
  j["max_obstacles"] = w.max_obstacles;
  j["obstacle_speed_max"] = w.obstacle_speed_max;
  j["clutter_radius_min"] = w.clutter_radius_min;
  j["clutter_radius_max"] = w.clutter_radius_max;
  j["blocking_radius_min"] = w.blocking_radius_min;
  j["blocking_radius_max"] = w.blocking_radius_max;
  j["blocking_dist_min"] = w.blocking_dist_min;
  j["blocking_end_margin"] = w.blocking_end_margin;
  j["turn_rate"] = w.turn_rate;
  j["blend_time"] = w.blend_time;
  j["correction_threshold"] = w.correction_threshold;
  j["corridor_halfwidth"] = w.corridor_halfwidth;
  j["standoff"] = w.standoff;
  j["clutter_clearance"] = w.clutter_clearance;
  j["lateral_offset"] = w.lateral_offset;
  j["sigma_obs"] = w.sigma_obs;
  j["road_base_amp"] = w.road_base_amp;
  j["dash_amp"] = w.dash_amp;
  j["dash_period"] = w.dash_period;
  j["dash_halfwidth"] = w.dash_halfwidth;
  j["sky_base_amp"] = w.sky_base_amp;
  j["vehicle_amp"] = w.vehicle_amp;
  j["pedestrian_amp"] = w.pedestrian_amp;
  j["distractor_amp"] = w.distractor_amp;
  j["unit_sprite_amp"] = w.unit_sprite_amp;
  j["scale_max"] = w.scale_max;
  j["sigma_xi"] = w.sigma_xi;
  j["offroad_x_max"] = w.offroad_x_max;
  j["max_retries"] = w.max_retries;
  return j;
}

// The model section only carries widths; grid dims and horizon are inherited
// from the world section so the two can never disagree.
inline void model_from_json(const nlohmann::json& j, ModelConfig& m) {
  FieldBinder b(j, "train.model");
  b.i32("d_backbone", m.d_backbone);
  b.i32("backbone_blocks", m.backbone_blocks);
  b.i32("backbone_heads", m.backbone_heads);
  b.i32("d_ik", m.d_ik);
  b.i32("ik_heads", m.ik_heads);
  b.i32("mlp_hidden", m.mlp_hidden);
  b.dbl("traj_scale", m.traj_scale);
  b.done();
}

inline nlohmann::json model_to_json(const ModelConfig& m) {
  nlohmann::json j;
  j["d_backbone"] = m.d_backbone;
  j["backbone_blocks"] = m.backbone_blocks;
  j["backbone_heads"] = m.backbone_heads;
  j["d_ik"] = m.d_ik;
  j["ik_heads"] = m.ik_heads;
  j["mlp_hidden"] = m.mlp_hidden;
  j["traj_scale"] = m.traj_scale;
  return j;
}

inline void train_from_json(const nlohmann::json& j, TrainConfig& t, ModelConfig& m) {
  FieldBinder b(j, "train");
  std::string variant = variant_name(t.variant);
  b.str("variant", variant);
  t.variant = variant_from_name(variant);
  b.dbl("lambda_state", t.lambda_state);
  b.dbl("lambda_traj", t.lambda_traj);
  b.dbl("lr_backbone", t.lr_backbone);
  b.dbl("lr_ik", t.lr_ik);
  b.dbl("warmup_ratio", t.warmup_ratio);
  b.dbl("grad_clip", t.grad_clip);
  b.dbl("weight_decay", t.weight_decay);
  b.i64("steps", t.steps);
  b.i64("batch_size", t.batch_size);
  b.i32("diffusion_steps", t.diffusion_steps);
  b.bl("stop_next_state_grad", t.stop_next_state_grad);
  if (const nlohmann::json* v = b.find("model")) model_from_json(*v, m);
  b.done();
}

inline nlohmann::json train_to_json(const TrainConfig& t, const ModelConfig& m) {
  nlohmann::json j;
  j["variant"] = variant_name(t.variant);
  j["lambda_state"] = t.lambda_state;
  j["lambda_traj"] = t.lambda_traj;
  j["lr_backbone"] = t.lr_backbone;
  j["lr_ik"] = t.lr_ik;
  j["warmup_ratio"] = t.warmup_ratio;
  j["grad_clip"] = t.grad_clip;
  j["weight_decay"] = t.weight_decay;
  j["steps"] = t.steps;
  j["batch_size"] = t.batch_size;
  j["diffusion_steps"] = t.diffusion_steps;
  j["stop_next_state_grad"] = t.stop_next_state_grad;
  j["model"] = model_to_json(m);
  return j;
}

inline AnalysisConfig analysis_from_json(const nlohmann::json& j) {
  AnalysisConfig a;
  FieldBinder b(j, "analysis");
  if (const nlohmann::json* v = b.find("placements")) {
    if (!v->is_array() || v->empty()) throw ConfigError("analysis.placements: expected a non-empty array");
    a.placements.clear();
    for (const nlohmann::json& e : *v) {
      if (!e.is_string()) throw ConfigError("analysis.placements: expected placement names");
      try {
        a.placements.push_back(placement_from_name(e.get<std::string>()));
      } catch (const ArgumentError& err) {
        throw ConfigError(std::string("analysis.placements: ") + err.what());
      }
    }
    // A placements override without scales means "scale 1 everywhere".
    a.scales.assign(a.placements.size(), 1.0);
  }
  if (const nlohmann::json* v = b.find("scales")) {
    if (!v->is_array()) throw ConfigError("analysis.scales: expected an array of numbers");
    a.scales.clear();
    for (const nlohmann::json& e : *v) {
      if (!e.is_number()) throw ConfigError("analysis.scales: expected an array of numbers");
      a.scales.push_back(e.get<double>());
    }
  }
  b.dbl("tau", a.tau);
  b.dbl("quantile", a.quantile);
  b.i32("chains", a.chains);
  b.dbl("dead_band", a.dead_band);
  b.dbl("stratify_low", a.stratify_low);
  b.dbl("stratify_high", a.stratify_high);
  b.i32("decomp_bins", a.decomp_bins);
  b.i32("decomp_bin_size", a.decomp_bin_size);
  b.i32("saliency_episodes", a.saliency_episodes);
  b.i32("nsp_episodes", a.nsp_episodes);
  b.i32("stitch_episodes", a.stitch_episodes);
  b.i32("compare_episodes", a.compare_episodes);
  b.i32("plot_episodes", a.plot_episodes);
  b.done();
  return a;
}

inline nlohmann::json analysis_to_json(const AnalysisConfig& a) {
  nlohmann::json j;
  nlohmann::json p = nlohmann::json::array();
  for (Placement pl : a.placements) p.push_back(placement_name(pl));
  j["placements"] = p;
  j["scales"] = a.scales;
  j["tau"] = a.tau;
  j["quantile"] = a.quantile;
  j["chains"] = a.chains;
  j["dead_band"] = a.dead_band;
  j["stratify_low"] = a.stratify_low;
  j["stratify_high"] = a.stratify_high;
  j["decomp_bins"] = a.decomp_bins;
  j["decomp_bin_size"] = a.decomp_bin_size;
  j["saliency_episodes"] = a.saliency_episodes;
  j["nsp_episodes"] = a.nsp_episodes;
  j["stitch_episodes"] = a.stitch_episodes;
  j["compare_episodes"] = a.compare_episodes;
  j["plot_episodes"] = a.plot_episodes;
  return j;
}

inline IoConfig io_from_json(const nlohmann::json& j) {
  IoConfig io;
  FieldBinder b(j, "io");
  b.str("episode_file", io.episode_file);
  b.str("preview_file", io.preview_file);
  b.i64("preview_records", io.preview_records);
  b.str("checkpoint_file", io.checkpoint_file);
  b.str("log_file", io.log_file);
  b.str("report_file", io.report_file);
  b.done();
  return io;
}

inline nlohmann::json io_to_json(const IoConfig& io) {
  nlohmann::json j;
  j["episode_file"] = io.episode_file;
  j["preview_file"] = io.preview_file;
  j["preview_records"] = io.preview_records;
  j["checkpoint_file"] = io.checkpoint_file;
  j["log_file"] = io.log_file;
  j["report_file"] = io.report_file;
  return j;
}

}  // namespace detail

inline ExperimentConfig experiment_from_json(const nlohmann::json& j) {
  ExperimentConfig cfg;
  detail::FieldBinder b(j, "config");
  b.u64("seed", cfg.seed);
  b.i64("n_episodes", cfg.n_episodes);
  if (const nlohmann::json* v = b.find("world")) cfg.world = detail::world_from_json(*v);
  if (const nlohmann::json* v = b.find("train")) detail::train_from_json(*v, cfg.train, cfg.model);
  if (const nlohmann::json* v = b.find("analysis")) cfg.analysis = detail::analysis_from_json(*v);
  if (const nlohmann::json* v = b.find("io")) cfg.io = detail::io_from_json(*v);
  b.done();

  // One master seed drives everything; the model's episode shape is the
  // world's episode shape by construction.
  cfg.train.seed = cfg.seed;
  cfg.model.grid_h = cfg.world.grid_h;
  cfg.model.grid_w = cfg.world.grid_w;
  cfg.model.grid_d = cfg.world.grid_d;
  cfg.model.sky_rows = cfg.world.sky_rows;
  cfg.model.horizon_steps = cfg.world.horizon_steps;

  cfg.validate();
  return cfg;
}

// Canonical full form: every field explicit, keys sorted by the JSON library.
// Hashes are computed over this form, so config files that merely omit
// defaults or reorder keys are identical for provenance purposes.
inline nlohmann::json experiment_to_json(const ExperimentConfig& cfg) {
  nlohmann::json j;
  j["seed"] = cfg.seed;
  j["n_episodes"] = cfg.n_episodes;
  j["world"] = detail::world_to_json(cfg.world);
  j["train"] = detail::train_to_json(cfg.train, cfg.model);
  j["analysis"] = detail::analysis_to_json(cfg.analysis);
  j["io"] = detail::io_to_json(cfg.io);
  return j;
}

struct ConfigHashes {
  std::string full;
  std::string world;  // world section + master seed: identifies a dataset
  std::string train;  // train section (includes seed + model): identifies a checkpoint
};

inline ConfigHashes config_hashes(const ExperimentConfig& cfg) {
  nlohmann::json j = experiment_to_json(cfg);
  ConfigHashes h;
  h.full = hex64(fnv1a(j.dump()));
  nlohmann::json world = j["world"];
  world["seed"] = cfg.seed;
  world["n_episodes"] = cfg.n_episodes;
  h.world = hex64(fnv1a(world.dump()));
  nlohmann::json tr = j["train"];
  tr["seed"] = cfg.seed;
  h.train = hex64(fnv1a(tr.dump()));
  return h;
}

inline ExperimentConfig load_experiment_config(const std::filesystem::path& path) {
  std::string text;
  try {
    text = read_file(path);
  } catch (const ArgumentError& e) {
    throw ConfigError(e.what());
  }
  nlohmann::json j = nlohmann::json::parse(text, nullptr, false);
  if (j.is_discarded()) throw ConfigError("config file is not valid JSON: " + path.string());
  return experiment_from_json(j);
}

}  // namespace ikdrive
