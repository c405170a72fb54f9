#pragma once
// Diagnostic suite: trajectory metrics, the obstacle-stitching causal probe,
// input-gradient saliency with object-grounding metrics, ego-gap
// stratification, variance estimators, the loss decomposition identity, and
// the paired variant-comparison protocol.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include "ikdrive/diffusion.hpp"
#include "ikdrive/models.hpp"
#include "ikdrive/planner.hpp"
#include "ikdrive/stats.hpp"
#include "ikdrive/worldsim.hpp"

namespace ikdrive {

// ====== trajectory metrics ======

inline double ade(const Trajectory& a, const Trajectory& b) {
  if (a.size() != b.size())
    throw ShapeError("ade: horizon mismatch, " + std::to_string(a.size()) + " vs " +
                     std::to_string(b.size()));
  if (a.points.empty()) throw ArgumentError("ade: empty trajectories");
  double acc = 0.0;
  for (size_t i = 0; i < a.size(); ++i) acc += std::sqrt(dist2(a.points[i], b.points[i]));
  return acc / static_cast<double>(a.size());
}

struct EndpointMetrics {
  double l2_1s = 0.0;
  double l2_2s = 0.0;
  double l2_3s = 0.0;
  double ade = 0.0;
};

// Waypoints are half-second spaced, so the k-second displacement lives at
// waypoint 2k (1-based). Horizons too short for a column report NaN there.
inline EndpointMetrics endpoint_metrics(const Trajectory& pred, const Trajectory& gt) {
  if (pred.size() != gt.size())
    throw ShapeError("endpoint_metrics: horizon mismatch, " + std::to_string(pred.size()) + " vs " +
                     std::to_string(gt.size()));
  if (pred.points.empty()) throw ArgumentError("endpoint_metrics: empty trajectories");
  auto l2_at = [&](size_t waypoint) {
    if (waypoint > pred.size()) return std::numeric_limits<double>::quiet_NaN();
    return std::sqrt(dist2(pred.points[waypoint - 1], gt.points[waypoint - 1]));
  };
  EndpointMetrics m;
  m.l2_1s = l2_at(2);
  m.l2_2s = l2_at(4);
  m.l2_3s = l2_at(6);
  m.ade = ade(pred, gt);
  return m;
}

// Final-waypoint displacement (the 3-second endpoint at the default step).
inline double endpoint_l2(const Trajectory& pred, const Trajectory& gt) {
  if (pred.size() != gt.size() || pred.points.empty())
    throw ShapeError("endpoint_l2: horizon mismatch or empty");
  return std::sqrt(dist2(pred.back(), gt.back()));
}

// 1 iff some waypoint k (at time k*dt) lies strictly inside a non-distractor
// obstacle disc advanced linearly to that time; tangent contact does not count.
inline int collision_proxy(const Trajectory& traj, const Scene& scene, double dt = 0.5) {
  if (!(dt > 0.0)) throw ArgumentError("collision_proxy: dt must be > 0");
  for (size_t k = 0; k < traj.size(); ++k) {
    double t = dt * static_cast<double>(k + 1);
    for (const Obstacle& o : scene.obstacles) {
      if (o.is_distractor()) continue;
      Vec2 c{o.x + o.vel_x * t, o.y + o.vel_y * t};
      if (dist2(traj.points[k], c) < o.radius * o.radius) return 1;
    }
  }
  return 0;
}

// ====== ego-status gap ======

// How far pure kinematic extrapolation of the ego status lands from the
// ground truth: the ADE between the constant-velocity/constant-yaw rollout
// and traj_gt. Large gap means vision carried information the ego state
// could not.
inline double ego_gap(const Episode& ep, double dt = 0.5) {
  Trajectory ex = ego_extrapolate(ep.ego, static_cast<int>(ep.traj_gt.size()), dt);
  return ade(ex, ep.traj_gt);
}

inline void fill_ego_gaps(std::vector<Episode>& eps, double dt = 0.5) {
  for (Episode& ep : eps) ep.ego_gap = ego_gap(ep, dt);
}

struct StratifyResult {
  std::vector<size_t> ego_dominated;    // indices of the lowest-gap episodes
  std::vector<size_t> vision_critical;  // indices of the highest-gap episodes
  double low_threshold = std::numeric_limits<double>::quiet_NaN();   // max gap in ego_dominated
  double high_threshold = std::numeric_limits<double>::quiet_NaN();  // min gap in vision_critical
};

// Bottom low_q fraction by ego gap -> EgoDominated, top high_q -> VisionCritical.
// Group sizes are floor(n*q); ties broken by episode seed, then input order.
inline StratifyResult stratify(const std::vector<Episode>& eps, double low_q = 0.30,
                               double high_q = 0.30, double dt = 0.5) {
  if (eps.empty()) throw ArgumentError("stratify: empty episode set");
  if (!(low_q > 0.0) || !(high_q > 0.0) || low_q + high_q > 1.0)
    throw ArgumentError("stratify: need low_q > 0, high_q > 0, low_q + high_q <= 1");
  size_t n = eps.size();
  std::vector<double> gap(n);
  for (size_t i = 0; i < n; ++i) gap[i] = ego_gap(eps[i], dt);
  std::vector<size_t> order(n);
  std::iota(order.begin(), order.end(), size_t{0});
  std::sort(order.begin(), order.end(), [&](size_t a, size_t b) {
    if (gap[a] != gap[b]) return gap[a] < gap[b];
    if (eps[a].seed != eps[b].seed) return eps[a].seed < eps[b].seed;
    return a < b;
  });
  size_t n_low = static_cast<size_t>(std::floor(static_cast<double>(n) * low_q));
  size_t n_high = static_cast<size_t>(std::floor(static_cast<double>(n) * high_q));
  StratifyResult r;
  for (size_t i = 0; i < n_low; ++i) r.ego_dominated.push_back(order[i]);
  for (size_t i = n - n_high; i < n; ++i) r.vision_critical.push_back(order[i]);
  if (n_low > 0) r.low_threshold = gap[order[n_low - 1]];
  if (n_high > 0) r.high_threshold = gap[order[n - n_high]];
  return r;
}

// Fraction of episodes whose ego gap is at least tau meters.
inline double estimate_epsilon(const std::vector<Episode>& eps, double tau = 2.14, double dt = 0.5) {
  if (eps.empty()) throw ArgumentError("estimate_epsilon: empty episode set");
  if (!(tau >= 0.0)) throw ArgumentError("estimate_epsilon: tau must be >= 0");
  int64_t hit = 0;
  for (const Episode& ep : eps) hit += ego_gap(ep, dt) >= tau;
  return static_cast<double>(hit) / static_cast<double>(eps.size());
}

// ====== intrinsic next-state variance ======

struct SigmaVReport {
  double marginal = 0.0;     // mean over elements of Var(v_future element)
  double conditional = 0.0;  // command-frequency-weighted mean of per-command variances
  double between = 0.0;      // marginal - conditional
  std::array<double, 3> per_command{};  // per-element variance by command
  std::array<int64_t, 3> command_count{};
};

// Per-element variance of the future visual state, marginally and conditioned
// on the discrete command. Population convention throughout, so the law of
// total variance gives between = marginal - conditional exactly. Rates are
// per element and directly comparable to state_loss.
inline SigmaVReport estimate_sigma_v(const std::vector<Episode>& eps) {
  if (eps.empty()) throw ArgumentError("estimate_sigma_v: empty episode set");
  const VisualTokenGrid& g0 = eps[0].v_future;
  size_t m = g0.data.size();
  std::vector<Welford> all(m);
  std::array<std::vector<Welford>, 3> per;
  SigmaVReport rep;
  for (const Episode& ep : eps) {
    if (ep.v_future.data.size() != m || ep.v_future.h != g0.h || ep.v_future.w != g0.w ||
        ep.v_future.d != g0.d)
      throw ShapeError("estimate_sigma_v: inconsistent v_future dims");
    size_t c = static_cast<size_t>(ep.command);
    if (per[c].empty()) per[c].resize(m);
    rep.command_count[c] += 1;
    for (size_t j = 0; j < m; ++j) {
      all[j].add(ep.v_future.data[j]);
      per[c][j].add(ep.v_future.data[j]);
    }
  }
  for (size_t c = 0; c < 3; ++c)
    if (rep.command_count[c] == 1)
      throw ArgumentError(std::string("estimate_sigma_v: command '") +
                          command_name(static_cast<Command>(c)) + "' has one episode; need >= 2");
  for (size_t j = 0; j < m; ++j) rep.marginal += all[j].variance();
  rep.marginal /= static_cast<double>(m);
  double n = static_cast<double>(eps.size());
  for (size_t c = 0; c < 3; ++c) {
    if (rep.command_count[c] == 0) continue;
    double acc = 0.0;
    for (size_t j = 0; j < m; ++j) acc += per[c][j].variance();
    rep.per_command[c] = acc / static_cast<double>(m);
    rep.conditional += static_cast<double>(rep.command_count[c]) / n * rep.per_command[c];
  }
  // Exact identity up to rounding; clamp stray negative epsilons.
  rep.between = std::max(0.0, rep.marginal - rep.conditional);
  return rep;
}

// ====== saliency ======

struct SaliencyMap {
  int h = 0, w = 0;
  std::vector<double> data;  // row-major [h][w], min-max normalized to [0,1]

  double at(int i, int j) const { return data[static_cast<size_t>(i) * w + j]; }
  double& at(int i, int j) { return data[static_cast<size_t>(i) * w + j]; }
};

struct SaliencyGrad {
  double scalar = 0.0;  // the backprop target value
  Tensor grad;          // d(scalar)/d(visual content), [N, D]
};

// Backprop scalar per family, differentiated with respect to the visual
// content channels at the model input. Sampling decoders score one mid-noise
// denoising step against the drawn noise (negated squared error); the
// deterministic families score the negative trajectory MSE against ground
// truth. Vision-masked models never read the content, so their gradient is
// identically zero.
inline SaliencyGrad saliency_gradient(ModelSet& m, const Episode& ep,
                                      const DiffusionSchedule& sched, uint64_t seed) {
  m.cfg.match_grid(ep.v_now);
  ep.traj_gt.validate(m.cfg.horizon_steps);
  Tape t;
  Var content = t.input(grid_content_tokens(ep.v_now), true);
  Tensor gt_norm = normalize_traj(ep.traj_gt, m.cfg.traj_scale);
  Var scalar;
  if (m.has_direct()) {
    DirectVars dv = lift_direct(t, m.direct, false);
    Var tokens = tokens_from_content_var(t, m.cfg, content);
    Var pred = direct_forward_tokens(t, dv, m.cfg, tokens, ep.ego, ep.command);
    scalar = scale(mse(pred, t.constant(gt_norm)), -1.0);
  } else if (m.has_head()) {
    BackboneVars bb = lift_backbone(t, m.backbone, false);
    HeadVars hv = lift_head(t, m.head, false);
    Var tokens = tokens_from_content_var(t, m.cfg, content);
    Var hidden = encoder_hidden(t, bb, m.cfg, tokens, ep.ego, ep.command, m.cfg.backbone_heads);
    Var pred = head_forward_var(t, hv, m.variant, m.cfg, hidden);
    scalar = scale(mse(pred, t.constant(gt_norm)), -1.0);
  } else {
    sched.validate();
    BackboneVars bb = lift_backbone(t, m.backbone, false);
    IkVars ik = lift_ik(t, m.ik, false);
    Var tokens = m.masks_vision() ? grid_tokens_var(t, m.cfg, ep.v_now, &bb)
                                  : tokens_from_content_var(t, m.cfg, content);
    Var state = backbone_forward_tokens(t, bb, m.cfg, tokens, ep.ego, ep.command);
    Var z_next = tokens_from_content_var(t, m.cfg, state);
    int t_mid = std::max(1, sched.T / 2);
    Tensor eps = Rng(seed).split(0).gaussian_tensor({m.cfg.horizon_steps, 2});
    Tensor x_t = q_sample(gt_norm, t_mid, eps, sched);
    Var eps_hat = ik_denoise_var(t, ik, m.cfg, t.constant(x_t), t_mid, tokens, z_next);
    scalar = scale(sum_sq(sub(eps_hat, t.constant(eps))), -1.0);
  }
  t.backward(scalar);
  return {t.value(scalar)[0], t.grad(content)};
}

// Per-cell saliency: rectify negative channel gradients to zero, take the
// channel L2 norm, then min-max normalize. A constant raw map (including the
// all-zero gradient of vision-masked models) maps to all zeros.
inline SaliencyMap saliency_map(ModelSet& m, const Episode& ep, const DiffusionSchedule& sched,
                                uint64_t seed) {
  SaliencyGrad sg = saliency_gradient(m, ep, sched, seed);
  int n = m.cfg.n_tokens(), d = m.cfg.grid_d;
  SaliencyMap s;
  s.h = m.cfg.grid_h;
  s.w = m.cfg.grid_w;
  s.data.assign(static_cast<size_t>(n), 0.0);
  for (int i = 0; i < n; ++i) {
    double acc = 0.0;
    for (int c = 0; c < d; ++c) {
      double gv = std::max(0.0, sg.grad.vec()[static_cast<size_t>(i * d + c)]);
      acc += gv * gv;
    }
    s.data[static_cast<size_t>(i)] = std::sqrt(acc);
  }
  double lo = *std::min_element(s.data.begin(), s.data.end());
  double hi = *std::max_element(s.data.begin(), s.data.end());
  if (hi > lo)
    for (double& v : s.data) v = (v - lo) / (hi - lo);
  else
    std::fill(s.data.begin(), s.data.end(), 0.0);
  return s;
}

// ====== grounding metrics ======

struct GroundingMetrics {
  double pm = 0.0;           // fraction of saliency mass inside the object mask
  std::optional<double> ap;  // precision-recall AUC; absent when the mask is empty
  double iou = 0.0;          // overlap at the top-20% binarization
  double f1 = 0.0;
  double p80 = 0.0;          // the binarization threshold used
};

// Mask agreement of a saliency map. Cells scoring strictly above the map's
// 80th percentile count as predicted positives; an empty union scores 0.
inline GroundingMetrics grounding_metrics(const SaliencyMap& s, const std::vector<uint8_t>& mask) {
  if (s.data.empty() || mask.size() != s.data.size())
    throw ShapeError("grounding_metrics: map/mask size mismatch, " + std::to_string(s.data.size()) +
                     " vs " + std::to_string(mask.size()));
  GroundingMetrics g;
  double total = 0.0, inside = 0.0;
  for (size_t i = 0; i < s.data.size(); ++i) {
    total += s.data[i];
    if (mask[i] != 0) inside += s.data[i];
  }
  g.pm = total > 0.0 ? inside / total : 0.0;
  g.ap = average_precision(s.data, mask);
  g.p80 = percentile_nearest_rank(s.data, 0.80);
  double tp = 0.0, fp = 0.0, fn = 0.0;
  for (size_t i = 0; i < s.data.size(); ++i) {
    bool pred = s.data[i] > g.p80;
    bool pos = mask[i] != 0;
    if (pred && pos) tp += 1.0;
    if (pred && !pos) fp += 1.0;
    if (!pred && pos) fn += 1.0;
  }
  g.iou = tp + fp + fn > 0.0 ? tp / (tp + fp + fn) : 0.0;
  g.f1 = 2.0 * tp + fp + fn > 0.0 ? 2.0 * tp / (2.0 * tp + fp + fn) : 0.0;
  return g;
}

// ====== obstacle stitching probe ======

struct StitchRow {
  Placement placement = Placement::near;
  double scale = 0.0;
  int64_t n = 0;
  double mean_delta = 0.0;     // signed mean endpoint displacement, meters
  double mean_abs = 0.0;
  double median_abs = 0.0;
  double frac_below_1m = 0.0;  // fraction with |delta| < 1 m
  double decel_ratio = 0.0;    // fraction with delta < -dead_band
};

struct StitchReport {
  std::vector<StitchRow> rows;                // one per requested placement
  std::vector<std::vector<double>> deltas;    // [placement][episode]
  bool has_paired_control = false;            // set when far and sky_far both requested
  double frac_far_exceeds_skyfar = 0.0;       // fraction with |d_far| > |d_skyfar|
  double paired_mean_delta = 0.0;             // mean of (d_far - d_skyfar)
  int64_t paired_n = 0;
};

// Injects a sprite at each placement into every episode's current grid and
// measures how the planned endpoint moves, with sampling noise shared between
// the clean and stitched runs: delta = after - before on the longitudinal
// endpoint, so negative means the plan pulled up short. One chain-noise seed
// per episode keeps deltas comparable across placements.
inline StitchReport stitching_probe(ModelSet& m, const std::vector<Episode>& episodes,
                                    const std::vector<Placement>& placements,
                                    const std::vector<double>& scales, const WorldConfig& wcfg,
                                    const DiffusionSchedule& sched, uint64_t seed, int K = 1,
                                    double dead_band = 0.0) {
  if (placements.size() != scales.size())
    throw ArgumentError("stitching_probe: placements/scales length mismatch");
  if (placements.empty()) throw ArgumentError("stitching_probe: no placements requested");
  if (episodes.empty()) throw ArgumentError("stitching_probe: empty episode set");
  if (dead_band < 0.0) throw ArgumentError("stitching_probe: dead_band must be >= 0");

  StitchReport rep;
  rep.deltas.resize(placements.size());
  std::vector<uint64_t> ep_seed(episodes.size());
  for (size_t i = 0; i < episodes.size(); ++i)
    ep_seed[i] = Rng(seed).split(static_cast<uint64_t>(i)).next_u64();

  for (size_t pi = 0; pi < placements.size(); ++pi) {
    std::vector<double>& ds = rep.deltas[pi];
    ds.reserve(episodes.size());
    for (size_t i = 0; i < episodes.size(); ++i) {
      const Episode& ep = episodes[i];
      VisualTokenGrid stitched = stitch_obstacle(ep.v_now, placements[pi], scales[pi], wcfg);
      PlanPair pp = paired_plan(m, ep.v_now, stitched, ep.ego, ep.command, sched, ep_seed[i], K);
      ds.push_back(pp.after.back().y - pp.before.back().y);
    }
    StitchRow row;
    row.placement = placements[pi];
    row.scale = scales[pi];
    row.n = static_cast<int64_t>(ds.size());
    std::vector<double> abs_d(ds.size());
    for (size_t i = 0; i < ds.size(); ++i) {
      row.mean_delta += ds[i];
      abs_d[i] = std::abs(ds[i]);
      row.mean_abs += abs_d[i];
      row.frac_below_1m += abs_d[i] < 1.0;
      row.decel_ratio += ds[i] < -dead_band;
    }
    double n = static_cast<double>(ds.size());
    row.mean_delta /= n;
    row.mean_abs /= n;
    row.frac_below_1m /= n;
    row.decel_ratio /= n;
    std::sort(abs_d.begin(), abs_d.end());
    size_t half = abs_d.size() / 2;
    row.median_abs = abs_d.size() % 2 == 1 ? abs_d[half] : 0.5 * (abs_d[half - 1] + abs_d[half]);
    rep.rows.push_back(row);
  }

  // Paired road-vs-sky control: same episodes, same chain noise, so the
  // magnitude comparison isolates where the sprite sits.
  auto find_placement = [&](Placement p) -> int {
    for (size_t i = 0; i < placements.size(); ++i)
      if (placements[i] == p) return static_cast<int>(i);
    return -1;
  };
  int far_i = find_placement(Placement::far);
  int sky_i = find_placement(Placement::sky_far);
  if (far_i >= 0 && sky_i >= 0) {
    rep.has_paired_control = true;
    const std::vector<double>& df = rep.deltas[static_cast<size_t>(far_i)];
    const std::vector<double>& dsf = rep.deltas[static_cast<size_t>(sky_i)];
    for (size_t i = 0; i < df.size(); ++i) {
      rep.frac_far_exceeds_skyfar += std::abs(df[i]) > std::abs(dsf[i]);
      rep.paired_mean_delta += df[i] - dsf[i];
    }
    rep.paired_n = static_cast<int64_t>(df.size());
    rep.frac_far_exceeds_skyfar /= static_cast<double>(df.size());
    rep.paired_mean_delta /= static_cast<double>(df.size());
  }
  return rep;
}

// ====== loss decomposition ======

struct ConditionBin {
  EgoStatus ego;
  Command command = Command::forward;
  std::vector<Episode> episodes;
};

// Repeated visual draws at one pinned condition. Scenes are forced clear of
// corridor-blocking obstacles, and any episode that still triggers the
// corrective override is rejected, so within a bin the target trajectory is
// the deterministic kinematic path plus execution noise.
inline ConditionBin make_condition_bin(const WorldConfig& cfg, const EgoStatus& ego, Command command,
                                       int64_t n, uint64_t seed) {
  if (n < 1) throw ArgumentError("make_condition_bin: n must be >= 1");
  ConditionBin bin;
  bin.ego = ego;
  bin.command = command;
  Rng root(seed);
  int64_t attempts = 0, max_attempts = 20 * n + 100;
  while (static_cast<int64_t>(bin.episodes.size()) < n) {
    if (++attempts > max_attempts)
      throw WorldError("make_condition_bin: exhausted attempts collecting clear episodes");
    EpisodeBundle b = make_episode_at(cfg, ego, command, root.split(static_cast<uint64_t>(attempts)).next_u64());
    if (b.episode.indicator != 0) continue;
    bin.episodes.push_back(std::move(b.episode));
  }
  return bin;
}

struct DecompositionReport {
  double bias2 = 0.0;     // || mean target - mean prediction ||^2, bin-weighted
  double variance = 0.0;  // mean || prediction - mean prediction ||^2
  double noise = 0.0;     // analytic execution-noise energy, 2 * horizon * sigma_xi^2
  double lhs = 0.0;       // mean || target - prediction ||^2
  double residual = 0.0;  // |lhs - (bias2 + variance + noise)| / lhs
  int64_t total_n = 0;
};

// Checks that the empirical planning loss splits into bias, prediction
// variance, and irreducible execution noise. Within each bin every episode is
// planned with the same chain-noise seed, so the variance term isolates the
// model's sensitivity to the visual draw.
inline DecompositionReport decomposition_check(ModelSet& m, const std::vector<ConditionBin>& bins,
                                               const WorldConfig& wcfg,
                                               const DiffusionSchedule& sched, uint64_t seed,
                                               int K = 1, int64_t min_per_bin = 2) {
  if (bins.empty()) throw ArgumentError("decomposition_check: no bins");
  DecompositionReport rep;
  rep.noise = 2.0 * static_cast<double>(wcfg.horizon_steps) * wcfg.sigma_xi * wcfg.sigma_xi;
  double bias_acc = 0.0, var_acc = 0.0, lhs_acc = 0.0;
  int64_t total = 0;
  size_t dim = 2 * static_cast<size_t>(wcfg.horizon_steps);

  for (size_t bi = 0; bi < bins.size(); ++bi) {
    const ConditionBin& bin = bins[bi];
    int64_t nb = static_cast<int64_t>(bin.episodes.size());
    if (nb < min_per_bin)
      throw ArgumentError("decomposition_check: bin " + std::to_string(bi) + " has " +
                          std::to_string(nb) + " episodes; need >= " + std::to_string(min_per_bin));
    uint64_t bin_seed = Rng(seed).split(static_cast<uint64_t>(bi)).next_u64();
    // Streaming moments per coordinate: identical predictions accumulate an
    // exactly-zero spread, which keeps the V-invariant variance term at 0.0.
    std::vector<Welford> wp(dim), wt(dim);
    double lhs_b = 0.0;
    for (const Episode& ep : bin.episodes) {
      if (ep.indicator != 0)
        throw ArgumentError("decomposition_check: bin " + std::to_string(bi) +
                            " contains a corrected episode");
      if (ep.command != bin.command || ep.ego.vx != bin.ego.vx || ep.ego.vy != bin.ego.vy ||
          ep.ego.yaw_rate != bin.ego.yaw_rate || ep.ego.ax != bin.ego.ax || ep.ego.ay != bin.ego.ay)
        throw ArgumentError("decomposition_check: bin " + std::to_string(bi) +
                            " episode condition differs from the bin condition");
      ep.traj_gt.validate(wcfg.horizon_steps);
      Trajectory pr = plan(m, ep.v_now, bin.ego, bin.command, sched, bin_seed, K);
      for (size_t k = 0; k < static_cast<size_t>(wcfg.horizon_steps); ++k) {
        double px = pr.points[k].x, py = pr.points[k].y;
        double tx = ep.traj_gt.points[k].x, ty = ep.traj_gt.points[k].y;
        wp[2 * k].add(px);
        wp[2 * k + 1].add(py);
        wt[2 * k].add(tx);
        wt[2 * k + 1].add(ty);
        lhs_b += (tx - px) * (tx - px) + (ty - py) * (ty - py);
      }
    }
    double bias_b = 0.0, var_b = 0.0;
    for (size_t j = 0; j < dim; ++j) {
      double d = wt[j].mean - wp[j].mean;
      bias_b += d * d;
      var_b += wp[j].m2;  // sum over episodes of squared deviation
    }
    bias_acc += bias_b * static_cast<double>(nb);
    var_acc += var_b;
    lhs_acc += lhs_b;
    total += nb;
  }
  rep.total_n = total;
  rep.bias2 = bias_acc / static_cast<double>(total);
  rep.variance = var_acc / static_cast<double>(total);
  rep.lhs = lhs_acc / static_cast<double>(total);
  double rhs = rep.bias2 + rep.variance + rep.noise;
  rep.residual = rep.lhs > 0.0 ? std::abs(rep.lhs - rhs) / rep.lhs : std::abs(rhs);
  return rep;
}

// ====== next-state loss vs planning accuracy ======

struct CorrelationPair {
  Correlation pearson;
  Correlation spearman;
};

struct NspQuartileRow {
  double mean_nsp = 0.0;
  double mean_l2_1s = 0.0;
  double mean_l2_2s = 0.0;
  double mean_l2_3s = 0.0;
  double mean_ade = 0.0;
  int64_t n = 0;
};

struct NspTrajReport {
  std::vector<double> nsp;  // per-episode next-state MSE, input order
  CorrelationPair l2_1s, l2_2s, l2_3s, ade;
  std::array<NspQuartileRow, 4> quartiles;  // ascending next-state MSE
};

// Does being a better next-state predictor make a model a better planner?
// Correlates the per-episode next-state MSE with plan displacement errors and
// tabulates mean displacement within next-state-MSE quartiles.
inline NspTrajReport nsp_traj_correlation(ModelSet& m, const std::vector<Episode>& episodes,
                                          const DiffusionSchedule& sched, uint64_t seed, int K = 1) {
  if (!m.has_backbone())
    throw ArgumentError("nsp_traj_correlation: variant has no next-state prediction path");
  if (episodes.size() < 4) throw ArgumentError("nsp_traj_correlation: need at least 4 episodes");
  NspTrajReport rep;
  std::vector<double> c1, c2, c3, ca;
  for (size_t i = 0; i < episodes.size(); ++i) {
    const Episode& ep = episodes[i];
    Tensor pred = backbone_predict(m.backbone, m.cfg, ep.v_now, ep.ego, ep.command, m.masks_vision());
    rep.nsp.push_back(state_loss(pred, grid_content_tokens(ep.v_future)));
    Trajectory traj =
        plan(m, ep.v_now, ep.ego, ep.command, sched, Rng(seed).split(static_cast<uint64_t>(i)).next_u64(), K);
    EndpointMetrics em = endpoint_metrics(traj, ep.traj_gt);
    if (!std::isfinite(em.l2_3s))
      throw ArgumentError("nsp_traj_correlation: horizon shorter than the 3 s column");
    c1.push_back(em.l2_1s);
    c2.push_back(em.l2_2s);
    c3.push_back(em.l2_3s);
    ca.push_back(em.ade);
  }
  rep.l2_1s = {pearson(rep.nsp, c1), spearman(rep.nsp, c1)};
  rep.l2_2s = {pearson(rep.nsp, c2), spearman(rep.nsp, c2)};
  rep.l2_3s = {pearson(rep.nsp, c3), spearman(rep.nsp, c3)};
  rep.ade = {pearson(rep.nsp, ca), spearman(rep.nsp, ca)};
  std::vector<std::vector<size_t>> bins = rank_bins(rep.nsp, 4);
  for (size_t q = 0; q < 4; ++q) {
    NspQuartileRow& row = rep.quartiles[q];
    row.n = static_cast<int64_t>(bins[q].size());
    for (size_t i : bins[q]) {
      row.mean_nsp += rep.nsp[i];
      row.mean_l2_1s += c1[i];
      row.mean_l2_2s += c2[i];
      row.mean_l2_3s += c3[i];
      row.mean_ade += ca[i];
    }
    double bn = static_cast<double>(bins[q].size());
    row.mean_nsp /= bn;
    row.mean_l2_1s /= bn;
    row.mean_l2_2s /= bn;
    row.mean_l2_3s /= bn;
    row.mean_ade /= bn;
  }
  return rep;
}

// ====== variant comparison ======

struct CharacteristicRow {
  std::string name;
  double mean_top = 0.0;     // mean over the B-beneficial (largest-delta) group
  double mean_bottom = 0.0;  // mean over the A-beneficial group
  double u = 0.0;            // Mann-Whitney U for the top group
  double p = 1.0;
};

struct VariantComparison {
  std::vector<double> delta;  // per episode: endpoint L2 of A minus endpoint L2 of B
  size_t group_size = 0;
  double top_threshold = 0.0;     // min delta inside the top group
  double bottom_threshold = 0.0;  // max delta inside the bottom group
  bool degenerate = false;        // all deltas equal; groups carry no signal
  std::array<CharacteristicRow, 4> characteristics;
};

// Scene characteristics the comparison stratifies on.
struct SceneCharacteristics {
  double yaw_rate_abs = 0.0;
  double speed = 0.0;
  double front_count = 0.0;
  double min_front_distance = 0.0;
};

inline SceneCharacteristics scene_characteristics(const Scene& scene, const WorldConfig& wcfg) {
  SceneCharacteristics c;
  c.yaw_rate_abs = std::abs(scene.ego.yaw_rate);
  c.speed = std::hypot(scene.ego.vx, scene.ego.vy);
  c.min_front_distance = wcfg.y_max;  // bounded default when the corridor is empty
  bool any = false;
  for (const Obstacle& o : scene.obstacles) {
    if (o.is_distractor() || o.y <= 0.0) continue;
    if (std::abs(o.x) > wcfg.corridor_halfwidth + o.radius) continue;
    c.front_count += 1.0;
    double d = std::hypot(o.x, o.y);
    c.min_front_distance = any ? std::min(c.min_front_distance, d) : d;
    any = true;
  }
  return c;
}

// Grouping and characteristic statistics for a precomputed delta vector;
// exposed separately so the grouping logic is testable with planted signals.
inline VariantComparison delta_group_report(const std::vector<double>& delta,
                                            const std::vector<EpisodeBundle>& bundles,
                                            const WorldConfig& wcfg, double quantile = 0.25) {
  if (delta.size() != bundles.size())
    throw ArgumentError("delta_group_report: delta/bundle length mismatch");
  if (delta.size() < 4) throw ArgumentError("delta_group_report: need at least 4 episodes");
  if (!(quantile > 0.0 && quantile <= 0.5))
    throw ArgumentError("delta_group_report: quantile must lie in (0, 0.5]");
  VariantComparison rep;
  rep.delta = delta;
  size_t n = delta.size();
  std::vector<size_t> order(n);
  std::iota(order.begin(), order.end(), size_t{0});
  std::sort(order.begin(), order.end(), [&](size_t a, size_t b) {
    return delta[a] != delta[b] ? delta[a] < delta[b] : a < b;
  });
  size_t g = static_cast<size_t>(std::floor(static_cast<double>(n) * quantile));
  if (g < 1) g = 1;
  rep.group_size = g;
  rep.bottom_threshold = delta[order[g - 1]];
  rep.top_threshold = delta[order[n - g]];
  rep.degenerate = delta[order[0]] == delta[order[n - 1]];

  std::vector<SceneCharacteristics> ch(n);
  for (size_t i = 0; i < n; ++i) ch[i] = scene_characteristics(bundles[i].scene, wcfg);
  const std::array<std::pair<std::string, double SceneCharacteristics::*>, 4> fields{{
      {"ego_yaw_rate_abs", &SceneCharacteristics::yaw_rate_abs},
      {"ego_speed", &SceneCharacteristics::speed},
      {"front_object_count", &SceneCharacteristics::front_count},
      {"min_front_distance", &SceneCharacteristics::min_front_distance},
  }};
  for (size_t f = 0; f < 4; ++f) {
    CharacteristicRow& row = rep.characteristics[f];
    row.name = fields[f].first;
    std::vector<double> top, bottom;
    for (size_t i = 0; i < g; ++i) bottom.push_back(ch[order[i]].*fields[f].second);
    for (size_t i = n - g; i < n; ++i) top.push_back(ch[order[i]].*fields[f].second);
    for (double v : top) row.mean_top += v;
    for (double v : bottom) row.mean_bottom += v;
    row.mean_top /= static_cast<double>(g);
    row.mean_bottom /= static_cast<double>(g);
    MannWhitney mw = mann_whitney_u(top, bottom);
    row.u = mw.u_a;
    row.p = mw.p_value;
  }
  return rep;
}

// Which scenes favor model B over model A? Per episode, both models plan with
// the same chain-noise seed; delta is A's endpoint displacement error minus
// B's (positive = B closer to ground truth). The top and bottom delta
// quartiles are then compared on scene characteristics.
inline VariantComparison compare_variants(ModelSet& a, ModelSet& b,
                                          const std::vector<EpisodeBundle>& bundles,
                                          const WorldConfig& wcfg, const DiffusionSchedule& sched,
                                          uint64_t seed, int K = 1, double quantile = 0.25) {
  if (a.cfg.grid_h != b.cfg.grid_h || a.cfg.grid_w != b.cfg.grid_w || a.cfg.grid_d != b.cfg.grid_d ||
      a.cfg.horizon_steps != b.cfg.horizon_steps)
    throw ConfigError("compare_variants: models disagree on episode shape");
  if (bundles.size() < 4) throw ArgumentError("compare_variants: need at least 4 episodes");
  std::vector<double> delta(bundles.size());
  for (size_t i = 0; i < bundles.size(); ++i) {
    const Episode& ep = bundles[i].episode;
    uint64_t s = Rng(seed).split(static_cast<uint64_t>(i)).next_u64();
    Trajectory ta = plan(a, ep.v_now, ep.ego, ep.command, sched, s, K);
    Trajectory tb = plan(b, ep.v_now, ep.ego, ep.command, sched, s, K);
    delta[i] = endpoint_l2(ta, ep.traj_gt) - endpoint_l2(tb, ep.traj_gt);
  }
  return delta_group_report(delta, bundles, wcfg, quantile);
}

}  // namespace ikdrive
