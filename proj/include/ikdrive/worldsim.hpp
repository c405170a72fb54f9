#pragma once
// Deterministic synthetic driving micro-world.
//
// Geometry: ego frame with x to the right and y forward, both in meters.
// The token grid is a camera-like view: rows [0, sky_rows) hold sky content,
// rows [sky_rows, h) map road distance y in [0, y_max] with the horizon at
// the top road row and the ego at the bottom. Columns map x in [-x_max, x_max].
//
// Every operation is a pure function of its value inputs plus an explicit
// 64-bit seed, so identical calls give bit-identical results.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include "ikdrive/rng.hpp"
#include "ikdrive/tensor.hpp"

namespace ikdrive {

struct WorldError : std::runtime_error {
  explicit WorldError(const std::string& msg) : std::runtime_error(msg) {}
};

// ====== configuration ======

struct WorldConfig {
  // grid geometry
  int grid_h = 12;
  int grid_w = 12;
  int grid_d = 16;
  int sky_rows = 4;
  double x_max = 9.0;
  double y_max = 24.0;

  // time base
  int horizon_steps = 6;
  double dt = 0.5;

  // scene sampling
  double epsilon = 0.1;
  double speed_min = 1.0;
  double speed_max = 8.0;
  double blocking_speed_min = 2.5;
  double vx_max = 0.5;
  double yaw_rate_range = 0.15;
  double yaw_max = 0.5;
  double accel_max = 1.0;
  std::array<double, 3> command_probs{0.2, 0.6, 0.2};  // left, forward, right
  int clutter_max = 3;
  int distractor_max = 2;
  int max_obstacles = 8;
  double obstacle_speed_max = 0.3;
  double clutter_radius_min = 0.4;
  double clutter_radius_max = 1.0;
  double blocking_radius_min = 0.5;
  double blocking_radius_max = 1.2;
  double blocking_dist_min = 3.0;
  double blocking_end_margin = 1.5;

  // kinematic base rollout
  double turn_rate = 0.25;
  double blend_time = 1.0;

  // vision correction
  double correction_threshold = 0.25;
  double corridor_halfwidth = 1.0;
  double standoff = 0.3;
  double clutter_clearance = 1.2;
  double lateral_offset = 0.0;  // optional sidestep after deceleration; 0 disables

  // rendering
  double sigma_obs = 0.05;
  double road_base_amp = 0.4;
  double dash_amp = 1.0;
  double dash_period = 6.0;
  double dash_halfwidth = 1.0;
  double sky_base_amp = 0.4;
  double vehicle_amp = 1.0;
  double pedestrian_amp = 0.8;
  double distractor_amp = 1.0;
  double unit_sprite_amp = 1.0;
  double scale_max = 4.0;

  // episode assembly
  double sigma_xi = 0.05;
  double offroad_x_max = 15.0;
  int max_retries = 8;

  double cell_x() const { return 2.0 * x_max / grid_w; }
  double cell_y() const { return y_max / (grid_h - sky_rows); }
  double horizon_seconds() const { return horizon_steps * dt; }

  void validate() const {
    auto bad = [](const std::string& what) { throw ConfigError("world config: " + what); };
    if (grid_h < 6 || grid_w < 3 || grid_d < 5) bad("grid too small (need h>=6, w>=3, d>=5)");
    if (sky_rows < 3 || grid_h - sky_rows < 4) bad("need >=3 sky rows and >=4 road rows");
    if (x_max <= 0 || y_max <= 0) bad("x_max and y_max must be positive");
    if (horizon_steps < 1 || dt <= 0) bad("horizon_steps >= 1 and dt > 0 required");
    if (epsilon < 0.0 || epsilon > 1.0) bad("epsilon must lie in [0,1]");
    if (speed_min < 0 || speed_max < speed_min) bad("speed range empty");
    if (blocking_speed_min <= 0) bad("blocking_speed_min must be positive");
    if (yaw_rate_range < 0 || yaw_rate_range > yaw_max) bad("yaw_rate_range must lie in [0, yaw_max]");
    double ps = command_probs[0] + command_probs[1] + command_probs[2];
    if (command_probs[0] < 0 || command_probs[1] < 0 || command_probs[2] < 0 || std::abs(ps - 1.0) > 1e-9)
      bad("command_probs must be non-negative and sum to 1");
    if (clutter_max < 0 || distractor_max < 0) bad("clutter/distractor counts must be non-negative");
    if (1 + clutter_max + distractor_max > max_obstacles) bad("max_obstacles too small for sampler");
    if (correction_threshold <= 0 || corridor_halfwidth <= 0 || standoff <= 0) bad("correction parameters must be positive");
    if (blocking_dist_min <= 0 || blocking_end_margin <= correction_threshold) bad("blocking placement range invalid");
    if (sigma_obs < 0 || sigma_xi < 0) bad("noise sigmas must be non-negative");
    if (dash_period <= 0) bad("dash_period must be positive");
    if (scale_max <= 0) bad("scale_max must be positive");
    if (turn_rate <= 0 || turn_rate > yaw_max) bad("turn_rate must lie in (0, yaw_max]");
    if (blend_time <= 0) bad("blend_time must be positive");
    if (max_retries < 1) bad("max_retries must be >= 1");
  }
};

// ====== domain types ======

struct EgoStatus {
  double vx = 0.0;
  double vy = 0.0;
  double yaw_rate = 0.0;
  double ax = 0.0;
  double ay = 0.0;

  void validate(double yaw_max = 0.5) const {
    for (double f : {vx, vy, yaw_rate, ax, ay})
      if (!std::isfinite(f)) throw NumericError("EgoStatus: non-finite field");
    if (vy < 0.0) throw ArgumentError("EgoStatus: vy must be >= 0");
    if (std::abs(yaw_rate) > yaw_max) throw ArgumentError("EgoStatus: |yaw_rate| exceeds cap");
  }
};

enum class Command : uint8_t { left = 0, forward = 1, right = 2 };

inline const char* command_name(Command c) {
  switch (c) {
    case Command::left: return "left";
    case Command::forward: return "forward";
    case Command::right: return "right";
  }
  throw ArgumentError("unknown command value");
}

inline Command command_from_name(const std::string& s) {
  if (s == "left") return Command::left;
  if (s == "forward") return Command::forward;
  if (s == "right") return Command::right;
  throw ArgumentError("unknown command name: " + s);
}

enum class ObstacleKind : uint8_t { vehicle = 0, pedestrian = 1, sky_distractor = 2 };

struct Obstacle {
  double x = 0.0;
  double y = 0.0;
  double radius = 1.0;
  double vel_x = 0.0;
  double vel_y = 0.0;
  ObstacleKind kind = ObstacleKind::vehicle;

  bool is_distractor() const { return kind == ObstacleKind::sky_distractor; }
  void validate() const {
    if (!(radius > 0.0)) throw ArgumentError("Obstacle: radius must be > 0");
    for (double f : {x, y, radius, vel_x, vel_y})
      if (!std::isfinite(f)) throw NumericError("Obstacle: non-finite field");
  }
};

struct Scene {
  EgoStatus ego;
  Command command = Command::forward;
  std::vector<Obstacle> obstacles;
  uint64_t noise_seed = 0;
  double road_phase = 0.0;  // world anchor of the lane-dash pattern, meters

  void validate(const WorldConfig& cfg) const {
    ego.validate(cfg.yaw_max);
    if (static_cast<int>(obstacles.size()) > cfg.max_obstacles)
      throw ArgumentError("Scene: obstacle count exceeds config max");
    for (const Obstacle& o : obstacles) o.validate();
  }
};

struct VisualTokenGrid {
  int h = 0, w = 0, d = 0, sky = 0;
  std::vector<double> data;          // row-major [h][w][d]
  std::vector<uint8_t> object_mask;  // [h][w]

  VisualTokenGrid() = default;
  VisualTokenGrid(int h_, int w_, int d_, int sky_)
      : h(h_), w(w_), d(d_), sky(sky_), data(static_cast<size_t>(h_) * w_ * d_, 0.0),
        object_mask(static_cast<size_t>(h_) * w_, 0) {}

  double& at(int i, int j, int c) { return data[(static_cast<size_t>(i) * w + j) * d + c]; }
  double at(int i, int j, int c) const { return data[(static_cast<size_t>(i) * w + j) * d + c]; }
  uint8_t& mask_at(int i, int j) { return object_mask[static_cast<size_t>(i) * w + j]; }
  uint8_t mask_at(int i, int j) const { return object_mask[static_cast<size_t>(i) * w + j]; }

  void validate() const {
    if (h <= 0 || w <= 0 || d <= 0 || sky < 0 || sky >= h) throw ArgumentError("VisualTokenGrid: bad dims");
    if (data.size() != static_cast<size_t>(h) * w * d || object_mask.size() != static_cast<size_t>(h) * w)
      throw ArgumentError("VisualTokenGrid: buffer sizes do not match dims");
    for (double v : data)
      if (!std::isfinite(v)) throw NumericError("VisualTokenGrid: non-finite value");
  }
};

struct Vec2 {
  double x = 0.0;
  double y = 0.0;
};

inline double dist2(Vec2 a, Vec2 b) {
  double dx = a.x - b.x, dy = a.y - b.y;
  return dx * dx + dy * dy;
}

struct Trajectory {
  std::vector<Vec2> points;

  Vec2 back() const { return points.empty() ? Vec2{} : points.back(); }
  size_t size() const { return points.size(); }
  void validate(int expected_len) const {
    if (static_cast<int>(points.size()) != expected_len)
      throw ArgumentError("Trajectory: expected " + std::to_string(expected_len) + " waypoints, got " +
                          std::to_string(points.size()));
    for (const Vec2& p : points)
      if (!std::isfinite(p.x) || !std::isfinite(p.y)) throw NumericError("Trajectory: non-finite waypoint");
  }
};

struct Episode {
  VisualTokenGrid v_now;
  VisualTokenGrid v_future;
  EgoStatus ego;
  Command command = Command::forward;
  Trajectory traj_gt;
  int indicator = 0;
  double ego_gap = 0.0;  // filled by analysis
  uint64_t seed = 0;
};

// ====== grid coordinate mapping ======

// Center of road row i (i in [sky_rows, h)), as forward distance.
inline double row_center_y(const WorldConfig& cfg, int i) {
  return (static_cast<double>(cfg.grid_h - 1 - i) + 0.5) * cfg.cell_y();
}

inline double col_center_x(const WorldConfig& cfg, int j) {
  return -cfg.x_max + (static_cast<double>(j) + 0.5) * cfg.cell_x();
}

// ====== kinematic base path ======

// Finely sampled rollout of the command-conditioned yaw profile at constant
// speed. Constant yaw rate uses the closed-form circular arc; a blended yaw
// profile is integrated with Simpson's rule on the exact heading.
struct BasePath {
  double speed = 0.0;
  double fine_h = 0.0;
  double duration = 0.0;
  std::vector<Vec2> pos;
  std::vector<double> heading;

  double total_arc() const { return speed * duration; }

  Vec2 pos_at_time(double t) const {
    if (pos.empty()) return {};
    double u = std::clamp(t, 0.0, duration) / fine_h;
    auto i = static_cast<size_t>(u);
    if (i >= pos.size() - 1) return pos.back();
    double f = u - static_cast<double>(i);
    return {pos[i].x + f * (pos[i + 1].x - pos[i].x), pos[i].y + f * (pos[i + 1].y - pos[i].y)};
  }

  double heading_at_time(double t) const {
    if (heading.empty()) return 0.0;
    double u = std::clamp(t, 0.0, duration) / fine_h;
    auto i = static_cast<size_t>(u);
    if (i >= heading.size() - 1) return heading.back();
    double f = u - static_cast<double>(i);
    return heading[i] + f * (heading[i + 1] - heading[i]);
  }

  Vec2 pos_at_arc(double s) const { return speed > 0.0 ? pos_at_time(s / speed) : Vec2{}; }
  double heading_at_arc(double s) const { return speed > 0.0 ? heading_at_time(s / speed) : heading.empty() ? 0.0 : heading.front(); }
};

namespace detail {

inline Vec2 rot(Vec2 v, double th) {
  double c = std::cos(th), s = std::sin(th);
  return {c * v.x - s * v.y, s * v.x + c * v.y};
}

// Closed-form position under constant yaw rate w from velocity v0 at t.
inline Vec2 arc_pos(Vec2 v0, double w, double t) {
  if (w == 0.0) return {v0.x * t, v0.y * t};
  double sw = std::sin(w * t), cw = std::cos(w * t);
  return {(v0.x * sw - v0.y * (1.0 - cw)) / w, (v0.x * (1.0 - cw) + v0.y * sw) / w};
}

struct YawProfile {
  double w0 = 0.0;      // initial yaw rate
  double wt = 0.0;      // target yaw rate
  double blend = 1.0;   // seconds of linear blend
  bool constant = true;

  double heading(double t) const {
    if (constant) return w0 * t;
    if (t <= blend) return w0 * t + (wt - w0) * t * t / (2.0 * blend);
    double hb = w0 * blend + (wt - w0) * blend / 2.0;
    return hb + wt * (t - blend);
  }
};

}  // namespace detail

inline constexpr int kPathSubsteps = 64;

inline BasePath base_path(const EgoStatus& ego, Command command, const WorldConfig& cfg) {
  ego.validate(cfg.yaw_max);
  BasePath p;
  Vec2 v0{ego.vx, ego.vy};
  p.speed = std::hypot(v0.x, v0.y);
  p.duration = cfg.horizon_seconds();
  p.fine_h = cfg.dt / kPathSubsteps;
  int n = cfg.horizon_steps * kPathSubsteps;
  p.pos.resize(static_cast<size_t>(n) + 1);
  p.heading.resize(static_cast<size_t>(n) + 1);

  detail::YawProfile yaw;
  yaw.w0 = ego.yaw_rate;
  yaw.blend = cfg.blend_time;
  if (command == Command::forward) {
    yaw.wt = ego.yaw_rate;
    yaw.constant = true;
  } else {
    yaw.wt = (command == Command::left) ? cfg.turn_rate : -cfg.turn_rate;
    yaw.constant = (yaw.wt == yaw.w0);
  }

  if (yaw.constant) {
    for (int i = 0; i <= n; ++i) {
      double t = static_cast<double>(i) * p.fine_h;
      p.pos[static_cast<size_t>(i)] = detail::arc_pos(v0, yaw.w0, t);
      p.heading[static_cast<size_t>(i)] = yaw.w0 * t;
    }
  } else {
    p.pos[0] = {0.0, 0.0};
    p.heading[0] = 0.0;
    for (int i = 0; i < n; ++i) {
      double t = static_cast<double>(i) * p.fine_h;
      double h = p.fine_h;
      auto f = [&](double s) { return detail::rot(v0, yaw.heading(s)); };
      Vec2 f0 = f(t), fm = f(t + 0.5 * h), f1 = f(t + h);
      Vec2 prev = p.pos[static_cast<size_t>(i)];
      p.pos[static_cast<size_t>(i) + 1] = {prev.x + h / 6.0 * (f0.x + 4.0 * fm.x + f1.x),
                                           prev.y + h / 6.0 * (f0.y + 4.0 * fm.y + f1.y)};
      p.heading[static_cast<size_t>(i) + 1] = yaw.heading(t + h);
    }
  }
  return p;
}

inline Trajectory trajectory_from_path(const BasePath& p, int horizon_steps) {
  Trajectory tr;
  tr.points.reserve(static_cast<size_t>(horizon_steps));
  for (int k = 1; k <= horizon_steps; ++k)
    tr.points.push_back(p.pos[static_cast<size_t>(k) * kPathSubsteps]);
  return tr;
}

inline Trajectory kinematic_base(const EgoStatus& ego, Command command, int horizon_steps, double dt,
                                 const WorldConfig& cfg) {
  if (horizon_steps < 1 || dt <= 0) throw ArgumentError("kinematic_base: horizon_steps >= 1 and dt > 0 required");
  WorldConfig c = cfg;
  c.horizon_steps = horizon_steps;
  c.dt = dt;
  return trajectory_from_path(base_path(ego, command, c), horizon_steps);
}

// Constant-velocity + constant-yaw-rate rollout from ego status alone.
inline Trajectory ego_extrapolate(const EgoStatus& ego, int horizon_steps, double dt) {
  if (horizon_steps < 1 || dt <= 0) throw ArgumentError("ego_extrapolate: horizon_steps >= 1 and dt > 0 required");
  Trajectory tr;
  Vec2 v0{ego.vx, ego.vy};
  for (int k = 1; k <= horizon_steps; ++k)
    tr.points.push_back(detail::arc_pos(v0, ego.yaw_rate, static_cast<double>(k) * dt));
  return tr;
}

// ====== vision correction ======

struct CorrectionResult {
  int indicator = 0;
  Trajectory corrected;
  double arc_end = 0.0;          // distance actually traveled along the base path
  double max_displacement = 0.0;
  bool full_stop = false;
};

inline CorrectionResult vision_correction_full(const Scene& scene, const BasePath& path, const WorldConfig& cfg) {
  Trajectory base = trajectory_from_path(path, cfg.horizon_steps);
  CorrectionResult res;
  res.corrected = base;
  res.arc_end = path.total_arc();

  if (path.speed == 0.0) {
    // Stationary ego: no corridor; only an obstacle sitting on the origin matters.
    for (const Obstacle& o : scene.obstacles) {
      if (o.is_distractor()) continue;
      if (std::hypot(o.x, o.y) <= o.radius + cfg.corridor_halfwidth) {
        res.indicator = 1;
        res.full_stop = true;
        break;
      }
    }
    return res;
  }

  // First arc length at which the path comes within (radius + halfwidth) of
  // any non-distractor obstacle.
  double d_block = std::numeric_limits<double>::infinity();
  for (size_t i = 0; i < path.pos.size(); ++i) {
    Vec2 p = path.pos[i];
    for (const Obstacle& o : scene.obstacles) {
      if (o.is_distractor()) continue;
      double trig = o.radius + cfg.corridor_halfwidth;
      if (dist2(p, {o.x, o.y}) <= trig * trig) {
        d_block = path.speed * (static_cast<double>(i) * path.fine_h);
        break;
      }
    }
    if (std::isfinite(d_block)) break;
  }
  if (!std::isfinite(d_block)) return res;

  double s_max = d_block - cfg.standoff;
  Trajectory corrected;
  if (s_max <= 0.0) {
    res.full_stop = true;
    corrected.points.assign(static_cast<size_t>(cfg.horizon_steps), Vec2{0.0, 0.0});
    res.arc_end = 0.0;
  } else {
    // Constant deceleration from the initial speed, stopping exactly at s_max.
    double v0 = path.speed;
    double a = v0 * v0 / (2.0 * s_max);
    double t_stop = v0 / a;
    for (int k = 1; k <= cfg.horizon_steps; ++k) {
      double t = static_cast<double>(k) * cfg.dt;
      double s = (t >= t_stop) ? s_max : v0 * t - 0.5 * a * t * t;
      corrected.points.push_back(path.pos_at_arc(std::min(s, s_max)));
    }
    res.arc_end = std::min(s_max, path.total_arc());
  }

  if (cfg.lateral_offset > 0.0 && !res.full_stop) {
    // Sidestep away from the first blocking obstacle, keeping the slowdown.
    const Obstacle* blocker = nullptr;
    double best = std::numeric_limits<double>::infinity();
    for (const Obstacle& o : scene.obstacles) {
      if (o.is_distractor()) continue;
      double dmin = std::numeric_limits<double>::infinity();
      for (const Vec2& p : path.pos) dmin = std::min(dmin, dist2(p, {o.x, o.y}));
      if (dmin < best) {
        best = dmin;
        blocker = &o;
      }
    }
    if (blocker != nullptr) {
      Vec2 at_block = path.pos_at_arc(d_block);
      double side = (blocker->x - at_block.x) >= 0.0 ? -1.0 : 1.0;
      Trajectory shifted = corrected;
      for (int k = 0; k < cfg.horizon_steps; ++k) {
        double t = static_cast<double>(k + 1) * cfg.dt;
        double th = path.heading_at_time(t);
        double ramp = std::min(1.0, static_cast<double>(k + 1) / cfg.horizon_steps);
        Vec2 lat = detail::rot({side * cfg.lateral_offset * ramp, 0.0}, th);
        shifted.points[static_cast<size_t>(k)].x += lat.x;
        shifted.points[static_cast<size_t>(k)].y += lat.y;
      }
      bool clear = true;
      for (const Vec2& p : shifted.points)
        for (const Obstacle& o : scene.obstacles) {
          if (o.is_distractor()) continue;
          if (dist2(p, {o.x, o.y}) <= o.radius * o.radius) clear = false;
        }
      if (clear) corrected = shifted;
    }
  }

  double max_disp = 0.0;
  for (int k = 0; k < cfg.horizon_steps; ++k)
    max_disp = std::max(max_disp, std::sqrt(dist2(corrected.points[static_cast<size_t>(k)],
                                                  base.points[static_cast<size_t>(k)])));
  res.corrected = corrected;
  res.max_displacement = max_disp;
  res.indicator = (res.full_stop || max_disp > cfg.correction_threshold) ? 1 : 0;
  return res;
}

inline std::pair<int, Trajectory> vision_correction(const Scene& scene, const Trajectory& base,
                                                    const WorldConfig& cfg) {
  base.validate(cfg.horizon_steps);
  CorrectionResult r = vision_correction_full(scene, base_path(scene.ego, scene.command, cfg), cfg);
  return {r.indicator, r.corrected};
}

// ====== rendering ======

namespace detail {

inline void paint_road_bump(VisualTokenGrid& g, const WorldConfig& cfg, double ox, double oy, double radius,
                            double amp, int channel) {
  if (oy < -3.0 || oy > cfg.y_max + 6.0 || std::abs(ox) > cfg.x_max + 4.5) return;  // outside frustum
  double sigma = 0.5 + radius / 2.0;
  double inv = 1.0 / (2.0 * sigma * sigma);
  for (int i = cfg.sky_rows; i < cfg.grid_h; ++i) {
    double dy = (row_center_y(cfg, i) - oy) / cfg.cell_y();
    for (int j = 0; j < cfg.grid_w; ++j) {
      double dx = (col_center_x(cfg, j) - ox) / cfg.cell_x();
      g.at(i, j, channel) += amp * std::exp(-(dx * dx + dy * dy) * inv);
    }
  }
}

inline void paint_sky_bump(VisualTokenGrid& g, const WorldConfig& cfg, double ox, double oy, double radius,
                           double amp, int channel) {
  if (std::abs(ox) > cfg.x_max + 4.5) return;
  double yc = std::clamp(oy, 0.0, cfg.y_max);
  double rf = (static_cast<double>(cfg.sky_rows) - 0.5) - (yc / cfg.y_max) * static_cast<double>(cfg.sky_rows);
  double sigma = 0.5 + radius / 2.0;
  double inv = 1.0 / (2.0 * sigma * sigma);
  for (int i = 0; i < cfg.sky_rows; ++i) {
    double dy = static_cast<double>(i) - rf;
    for (int j = 0; j < cfg.grid_w; ++j) {
      double dx = (col_center_x(cfg, j) - ox) / cfg.cell_x();
      g.at(i, j, channel) += amp * std::exp(-(dx * dx + dy * dy) * inv);
    }
  }
}

}  // namespace detail

inline constexpr int kChanRoadBase = 0;
inline constexpr int kChanDash = 1;
inline constexpr int kChanSkyBase = 2;
inline constexpr int kChanVehicle = 3;
inline constexpr int kChanPedestrian = 4;

// Render of lane geometry and sky background alone, at a given dash phase.
inline VisualTokenGrid render_road_template(double road_phase, const WorldConfig& cfg) {
  VisualTokenGrid g(cfg.grid_h, cfg.grid_w, cfg.grid_d, cfg.sky_rows);
  for (int i = 0; i < cfg.sky_rows; ++i)
    for (int j = 0; j < cfg.grid_w; ++j)
      g.at(i, j, kChanSkyBase) = cfg.sky_base_amp * (1.0 - 0.1 * static_cast<double>(i));
  for (int i = cfg.sky_rows; i < cfg.grid_h; ++i) {
    double y = row_center_y(cfg, i);
    constexpr double kTwoPi = 6.283185307179586476925286766559;
    double dash = cfg.dash_amp * 0.5 * (1.0 + std::cos(kTwoPi * (y + road_phase) / cfg.dash_period));
    for (int j = 0; j < cfg.grid_w; ++j) {
      double x = col_center_x(cfg, j);
      g.at(i, j, kChanRoadBase) = cfg.road_base_amp * (1.0 - 0.8 * std::abs(x) / cfg.x_max);
      if (std::abs(x) <= cfg.dash_halfwidth) g.at(i, j, kChanDash) = dash;
    }
  }
  return g;
}

inline VisualTokenGrid render_tokens(const Scene& scene, bool add_noise, const WorldConfig& cfg) {
  scene.validate(cfg);
  VisualTokenGrid g = render_road_template(scene.road_phase, cfg);

  for (const Obstacle& o : scene.obstacles) {
    switch (o.kind) {
      case ObstacleKind::vehicle:
        detail::paint_road_bump(g, cfg, o.x, o.y, o.radius, cfg.vehicle_amp, kChanVehicle);
        break;
      case ObstacleKind::pedestrian:
        detail::paint_road_bump(g, cfg, o.x, o.y, o.radius, cfg.pedestrian_amp, kChanPedestrian);
        break;
      case ObstacleKind::sky_distractor:
        // Distractors look like vehicles but live in the sky rows.
        detail::paint_sky_bump(g, cfg, o.x, o.y, o.radius, cfg.distractor_amp, kChanVehicle);
        break;
    }
  }

  for (int i = cfg.sky_rows; i < cfg.grid_h; ++i) {
    double y = row_center_y(cfg, i);
    for (int j = 0; j < cfg.grid_w; ++j) {
      double x = col_center_x(cfg, j);
      for (const Obstacle& o : scene.obstacles) {
        if (o.is_distractor()) continue;
        double dx = x - o.x, dy = y - o.y;
        if (dx * dx + dy * dy <= o.radius * o.radius) {
          g.mask_at(i, j) = 1;
          break;
        }
      }
    }
  }

  if (add_noise) {
    Rng nrng(scene.noise_seed);
    for (double& v : g.data) v += cfg.sigma_obs * nrng.next_gaussian();
  }
  g.validate();
  return g;
}

// ====== obstacle stitching ======

enum class Placement : uint8_t { near = 0, far = 1, very_far = 2, sky = 3, sky_far = 4 };

inline const char* placement_name(Placement p) {
  switch (p) {
    case Placement::near: return "near";
    case Placement::far: return "far";
    case Placement::very_far: return "very_far";
    case Placement::sky: return "sky";
    case Placement::sky_far: return "sky_far";
  }
  throw ArgumentError("unknown placement value");
}

inline Placement placement_from_name(const std::string& s) {
  if (s == "near") return Placement::near;
  if (s == "far") return Placement::far;
  if (s == "very_far") return Placement::very_far;
  if (s == "sky") return Placement::sky;
  if (s == "sky_far") return Placement::sky_far;
  throw ArgumentError("unknown placement name: " + s);
}

// Fixed cell (row, col) of a placement for the given grid geometry.
inline std::pair<int, int> placement_cell(Placement p, const WorldConfig& cfg) {
  int mid = cfg.grid_w / 2;
  switch (p) {
    case Placement::near: return {cfg.grid_h - 2, mid};
    case Placement::far: return {cfg.sky_rows + 1, mid};
    case Placement::very_far: return {cfg.sky_rows, mid};
    case Placement::sky: return {2, mid};
    case Placement::sky_far: return {1, mid};
  }
  throw ArgumentError("unknown placement value");
}

inline VisualTokenGrid stitch_obstacle(const VisualTokenGrid& grid, Placement placement, double scale,
                                       const WorldConfig& cfg) {
  if (!(scale >= 0.0) || scale > cfg.scale_max)
    throw ArgumentError("stitch_obstacle: scale must lie in [0, scale_max]");
  VisualTokenGrid out = grid;
  if (scale == 0.0) return out;
  auto [row, col] = placement_cell(placement, cfg);
  bool in_sky = row < cfg.sky_rows;
  double amp = scale * cfg.unit_sprite_amp;
  double sigma = 0.8;
  double inv = 1.0 / (2.0 * sigma * sigma);
  int i0 = in_sky ? 0 : cfg.sky_rows;
  int i1 = in_sky ? cfg.sky_rows : cfg.grid_h;
  for (int i = i0; i < i1; ++i)
    for (int j = 0; j < cfg.grid_w; ++j) {
      double dy = static_cast<double>(i - row);
      double dx = static_cast<double>(j - col);
      out.at(i, j, kChanVehicle) += amp * std::exp(-(dx * dx + dy * dy) * inv);
    }
  return out;
}

// ====== scene sampling and episode assembly ======

namespace detail {

struct SceneOverride {
  std::optional<EgoStatus> ego;
  std::optional<Command> command;
  bool force_clear = false;
};

inline double min_dist_to_path(const BasePath& path, Vec2 c) {
  double best = std::numeric_limits<double>::infinity();
  for (const Vec2& p : path.pos) best = std::min(best, dist2(p, c));
  return std::sqrt(best);
}

inline Scene sample_scene_impl(const WorldConfig& cfg, uint64_t seed, const SceneOverride& ov) {
  cfg.validate();
  Rng root(seed);
  Rng ego_rng = root.split(0);
  Rng cmd_rng = root.split(1);
  Rng intent_rng = root.split(2);
  Rng block_rng = root.split(3);
  Rng clutter_rng = root.split(4);
  Rng sky_rng = root.split(5);
  Rng misc_rng = root.split(6);

  Scene scene;
  bool blocking = !ov.force_clear && intent_rng.next_uniform() < cfg.epsilon;

  if (ov.ego.has_value()) {
    scene.ego = *ov.ego;
  } else {
    scene.ego.vy = ego_rng.next_range(cfg.speed_min, cfg.speed_max);
    scene.ego.vx = ego_rng.next_range(-cfg.vx_max, cfg.vx_max);
    scene.ego.yaw_rate = ego_rng.next_range(-cfg.yaw_rate_range, cfg.yaw_rate_range);
    scene.ego.ax = ego_rng.next_range(-cfg.accel_max, cfg.accel_max);
    scene.ego.ay = ego_rng.next_range(-cfg.accel_max, cfg.accel_max);
    if (blocking && scene.ego.vy < cfg.blocking_speed_min) scene.ego.vy = cfg.blocking_speed_min;
  }
  if (ov.command.has_value()) {
    scene.command = *ov.command;
  } else {
    double u = cmd_rng.next_uniform();
    if (u < cfg.command_probs[0]) scene.command = Command::left;
    else if (u < cfg.command_probs[0] + cfg.command_probs[1]) scene.command = Command::forward;
    else scene.command = Command::right;
  }

  BasePath path = base_path(scene.ego, scene.command, cfg);

  if (blocking && path.speed > 0.0) {
    double s_total = path.total_arc();
    double hi = s_total - cfg.blocking_end_margin;
    double d = block_rng.next_range(cfg.blocking_dist_min, std::max(cfg.blocking_dist_min + 0.1, hi));
    d = std::min(d, hi);
    Obstacle o;
    o.radius = block_rng.next_range(cfg.blocking_radius_min, cfg.blocking_radius_max);
    Vec2 at = path.pos_at_arc(d);
    double th = path.heading_at_arc(d);
    double jitter = block_rng.next_range(-0.8, 0.8) * o.radius;
    Vec2 lat = rot({jitter, 0.0}, th);
    o.x = at.x + lat.x;
    o.y = at.y + lat.y;
    o.kind = block_rng.next_uniform() < 0.75 ? ObstacleKind::vehicle : ObstacleKind::pedestrian;
    scene.obstacles.push_back(o);
  }

  int n_clutter = static_cast<int>(clutter_rng.next_below(cfg.clutter_max + 1));
  for (int c = 0; c < n_clutter; ++c) {
    Obstacle o;
    o.y = clutter_rng.next_range(2.0, cfg.y_max - 0.5);
    o.x = clutter_rng.next_range(-(cfg.x_max - 0.5), cfg.x_max - 0.5);
    o.radius = clutter_rng.next_range(cfg.clutter_radius_min, cfg.clutter_radius_max);
    o.kind = clutter_rng.next_uniform() < 0.7 ? ObstacleKind::vehicle : ObstacleKind::pedestrian;
    o.vel_x = clutter_rng.next_range(-cfg.obstacle_speed_max, cfg.obstacle_speed_max);
    o.vel_y = clutter_rng.next_range(-cfg.obstacle_speed_max, cfg.obstacle_speed_max);
    double needed = o.radius + cfg.corridor_halfwidth + cfg.clutter_clearance;
    if (min_dist_to_path(path, {o.x, o.y}) < needed) {
      // Push the obstacle laterally away from its nearest path point.
      Vec2 nearest{};
      double best = std::numeric_limits<double>::infinity();
      for (const Vec2& p : path.pos) {
        double d2 = dist2(p, {o.x, o.y});
        if (d2 < best) {
          best = d2;
          nearest = p;
        }
      }
      double dn = std::sqrt(best);
      Vec2 dir = dn > 1e-9 ? Vec2{(o.x - nearest.x) / dn, (o.y - nearest.y) / dn} : Vec2{1.0, 0.0};
      o.x = nearest.x + dir.x * needed;
      o.y = nearest.y + dir.y * needed;
      if (min_dist_to_path(path, {o.x, o.y}) < needed - 1e-6) continue;  // drop it
    }
    scene.obstacles.push_back(o);
  }

  int n_sky = static_cast<int>(sky_rng.next_below(cfg.distractor_max + 1));
  for (int s = 0; s < n_sky; ++s) {
    Obstacle o;
    o.kind = ObstacleKind::sky_distractor;
    o.x = sky_rng.next_range(-cfg.x_max, cfg.x_max);
    o.y = sky_rng.next_range(0.1 * cfg.y_max, 0.95 * cfg.y_max);
    o.radius = sky_rng.next_range(0.5, 1.5);
    o.vel_x = sky_rng.next_range(-cfg.obstacle_speed_max, cfg.obstacle_speed_max);
    o.vel_y = sky_rng.next_range(-cfg.obstacle_speed_max, cfg.obstacle_speed_max);
    scene.obstacles.push_back(o);
  }

  scene.noise_seed = misc_rng.next_u64();
  scene.road_phase = misc_rng.next_range(0.0, cfg.dash_period);
  return scene;
}

}  // namespace detail

inline Scene sample_scene(const WorldConfig& cfg, uint64_t seed) {
  return detail::sample_scene_impl(cfg, seed, {});
}

// Scene propagated to the end of the horizon: road obstacles advance by their
// own velocity and are re-expressed in the new ego frame (displaced by `disp`,
// rotated by `heading_change`); sky distractors are treated as being at
// infinity and only follow their own drift; the dash phase advances by the
// arc length actually traveled.
inline Scene propagate_scene(const Scene& scene, Vec2 disp, double heading_change, double arc_traveled,
                             double horizon_seconds) {
  Scene out = scene;
  for (Obstacle& o : out.obstacles) {
    double px = o.x + o.vel_x * horizon_seconds;
    double py = o.y + o.vel_y * horizon_seconds;
    if (o.is_distractor()) {
      o.x = px;
      o.y = py;
      continue;
    }
    Vec2 rel = detail::rot({px - disp.x, py - disp.y}, -heading_change);
    Vec2 rv = detail::rot({o.vel_x, o.vel_y}, -heading_change);
    o.x = rel.x;
    o.y = rel.y;
    o.vel_x = rv.x;
    o.vel_y = rv.y;
  }
  out.road_phase = scene.road_phase + arc_traveled;
  out.noise_seed = Rng(scene.noise_seed).split(1).next_u64();
  return out;
}

struct EpisodeBundle {
  Episode episode;
  Scene scene;
  Trajectory base;
  CorrectionResult correction;
};

namespace detail {

inline EpisodeBundle assemble_episode(const WorldConfig& cfg, uint64_t seed, const SceneOverride& ov) {
  cfg.validate();
  for (int attempt = 0; attempt < cfg.max_retries; ++attempt) {
    uint64_t scene_seed = attempt == 0 ? seed : Rng(seed).split(1000 + static_cast<uint64_t>(attempt)).next_u64();
    Scene scene = sample_scene_impl(cfg, scene_seed, ov);
    BasePath path = base_path(scene.ego, scene.command, cfg);
    CorrectionResult corr = vision_correction_full(scene, path, cfg);

    Trajectory traj = corr.corrected;
    Rng xi_rng = Rng(scene_seed).split(8);
    for (Vec2& p : traj.points) {
      p.x += cfg.sigma_xi * xi_rng.next_gaussian();
      p.y += cfg.sigma_xi * xi_rng.next_gaussian();
    }
    if (std::abs(traj.back().x) > cfg.offroad_x_max) continue;

    EpisodeBundle b;
    b.scene = scene;
    b.base = trajectory_from_path(path, cfg.horizon_steps);
    b.correction = corr;
    Episode& ep = b.episode;
    ep.seed = seed;
    ep.ego = scene.ego;
    ep.command = scene.command;
    ep.traj_gt = traj;
    ep.indicator = corr.indicator;
    ep.v_now = render_tokens(scene, true, cfg);
    double psi = path.heading_at_arc(corr.arc_end);
    Scene future = propagate_scene(scene, traj.back(), psi, corr.arc_end, cfg.horizon_seconds());
    ep.v_future = render_tokens(future, true, cfg);
    return b;
  }
  throw WorldError("make_episode: off-road propagation persisted after " + std::to_string(cfg.max_retries) +
                   " retries (seed " + std::to_string(seed) + ")");
}

}  // namespace detail

inline EpisodeBundle make_episode_full(const WorldConfig& cfg, uint64_t seed) {
  return detail::assemble_episode(cfg, seed, {});
}

inline Episode make_episode(const WorldConfig& cfg, uint64_t seed) {
  return detail::assemble_episode(cfg, seed, {}).episode;
}

// Episode with pinned (ego, command) and no corridor-blocking obstacle; used
// to draw repeated visual states at a fixed condition.
inline EpisodeBundle make_episode_at(const WorldConfig& cfg, const EgoStatus& ego, Command command,
                                     uint64_t seed) {
  detail::SceneOverride ov;
  ov.ego = ego;
  ov.command = command;
  ov.force_clear = true;
  return detail::assemble_episode(cfg, seed, ov);
}

}  // namespace ikdrive
