#pragma once

#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "ikdrive/analysis.hpp"
#include "ikdrive/episode_io.hpp"
#include "ikdrive/experiment.hpp"
#include "ikdrive/planner.hpp"
#include "ikdrive/trainer.hpp"

namespace ikdrive {

// Stream keys: every command derives its randomness from the master seed via
// a disjoint split so adding a command never perturbs another's draws.
inline constexpr uint64_t kStreamGen = 11;
inline constexpr uint64_t kStreamEval = 23;
inline constexpr uint64_t kStreamStitch = 37;
inline constexpr uint64_t kStreamSaliency = 41;
inline constexpr uint64_t kStreamBins = 53;
inline constexpr uint64_t kStreamDecomp = 59;
inline constexpr uint64_t kStreamNsp = 61;
inline constexpr uint64_t kStreamCompare = 67;

namespace detail {

inline std::string fmt_g17(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline nlohmann::json base_manifest(const ExperimentConfig& cfg, const char* command) {
  ConfigHashes h = config_hashes(cfg);
  nlohmann::json m;
  m["format_version"] = kManifestVersion;
  m["tool_version"] = kToolVersion;
  m["command"] = command;
  m["seed"] = cfg.seed;
  m["config_hash"] = h.full;
  m["world_hash"] = h.world;
  m["inputs"] = nlohmann::json::object();
  m["outputs"] = nlohmann::json::object();
  return m;
}

inline void require_manifest_seed(const nlohmann::json& m, uint64_t seed) {
  if (!m.contains("seed") || !m["seed"].is_number_integer())
    throw ManifestError("manifest missing field 'seed'");
  if (m["seed"].get<uint64_t>() != seed)
    throw ManifestError("manifest mismatch on 'seed': recorded " + m["seed"].dump() + ", expected " +
                        std::to_string(seed));
}

inline std::string require_recorded_output(const nlohmann::json& m, const std::string& file) {
  if (!m.contains("outputs") || !m["outputs"].is_object() || !m["outputs"].contains(file) ||
      !m["outputs"][file].is_string())
    throw ManifestError("manifest does not record output '" + file + "'");
  return m["outputs"][file].get<std::string>();
}

// Reads bytes of an artifact and checks them against the hash its producing
// command recorded, so silent edits to inputs are refused.
inline std::string read_recorded_file(const std::filesystem::path& dir, const std::string& file,
                                      const nlohmann::json& manifest) {
  std::filesystem::path p = dir / file;
  if (!std::filesystem::exists(p)) throw ManifestError("missing input artifact: " + p.string());
  std::string bytes = read_file(p);
  std::string want = require_recorded_output(manifest, file);
  std::string got = git_blob_hash(bytes);
  if (got != want)
    throw ManifestError("input artifact " + p.string() + " does not match its manifest: content " +
                        got + ", recorded " + want);
  return bytes;
}

struct GuardedData {
  std::vector<Episode> episodes;
  std::string content_hash;
};

inline GuardedData load_guarded_episodes(const ExperimentConfig& cfg, const std::filesystem::path& data_dir) {
  ConfigHashes h = config_hashes(cfg);
  nlohmann::json m = read_manifest(data_dir);
  require_manifest_field(m, "world_hash", h.world);
  require_manifest_seed(m, cfg.seed);
  GuardedData out;
  std::string bytes = read_recorded_file(data_dir, cfg.io.episode_file, m);
  out.content_hash = git_blob_hash(bytes);
  out.episodes = decode_episodes(bytes);
  return out;
}

struct GuardedModel {
  ModelSet model;
  std::string content_hash;
};

inline GuardedModel load_guarded_model(const ExperimentConfig& cfg, const std::filesystem::path& ckpt_dir,
                                       bool check_train_hash) {
  ConfigHashes h = config_hashes(cfg);
  nlohmann::json m = read_manifest(ckpt_dir);
  require_manifest_field(m, "world_hash", h.world);
  require_manifest_seed(m, cfg.seed);
  if (check_train_hash) require_manifest_field(m, "train_hash", h.train);
  GuardedModel out;
  std::string bytes = read_recorded_file(ckpt_dir, cfg.io.checkpoint_file, m);
  out.content_hash = git_blob_hash(bytes);
  decode_checkpoint(bytes, out.model);
  return out;
}

// Scenes are not stored in the episode file; they are regenerated from the
// per-episode seed and cross-checked against the stored target so a dataset
// produced under a different world config is refused.
inline EpisodeBundle regen_bundle(const ExperimentConfig& cfg, const Episode& ep) {
  EpisodeBundle b = make_episode_full(cfg.world, ep.seed);
  bool same = b.episode.traj_gt.points.size() == ep.traj_gt.points.size() &&
              b.episode.command == ep.command && b.episode.indicator == ep.indicator;
  if (same)
    for (size_t i = 0; i < ep.traj_gt.points.size(); ++i)
      same = same && b.episode.traj_gt.points[i].x == ep.traj_gt.points[i].x &&
             b.episode.traj_gt.points[i].y == ep.traj_gt.points[i].y;
  if (!same)
    throw ManifestError("episode " + std::to_string(ep.seed) +
                        " does not regenerate under this world config");
  return b;
}

inline size_t capped(size_t n, int cap) {
  return cap <= 0 ? n : std::min(n, static_cast<size_t>(cap));
}

inline void write_report(const std::filesystem::path& out_dir, const ExperimentConfig& cfg,
                         const nlohmann::json& report, nlohmann::json& manifest) {
  std::string text = report.dump(2) + "\n";
  manifest["outputs"][cfg.io.report_file] = git_blob_hash(text);
  atomic_write_file(out_dir / cfg.io.report_file, text);
}

inline void write_output(const std::filesystem::path& out_dir, const std::string& name,
                         const std::string& bytes, nlohmann::json& manifest) {
  manifest["outputs"][name] = git_blob_hash(bytes);
  atomic_write_file(out_dir / name, bytes);
}

inline nlohmann::json correlation_json(const CorrelationPair& c) {
  nlohmann::json j;
  j["pearson"] = {{"r", c.pearson.coefficient}, {"p", c.pearson.p_value}};
  j["spearman"] = {{"rho", c.spearman.coefficient}, {"p", c.spearman.p_value}};
  return j;
}

}  // namespace detail

// ---- gen-data --------------------------------------------------------------

inline nlohmann::json cmd_gen_data(const ExperimentConfig& cfg, const std::filesystem::path& out_dir) {
  cfg.validate();
  Rng stream = Rng(cfg.seed).split(kStreamGen);
  std::vector<Episode> eps;
  eps.reserve(static_cast<size_t>(cfg.n_episodes));
  for (int64_t i = 0; i < cfg.n_episodes; ++i)
    eps.push_back(make_episode(cfg.world, stream.split(static_cast<uint64_t>(i)).next_u64()));
  fill_ego_gaps(eps, cfg.world.dt);

  std::string bytes = encode_episodes(eps);
  nlohmann::json manifest = detail::base_manifest(cfg, "gen-data");
  detail::write_output(out_dir, cfg.io.episode_file, bytes, manifest);
  write_episode_jsonl(out_dir / cfg.io.preview_file, eps,
                      static_cast<size_t>(cfg.io.preview_records));
  manifest["outputs"][cfg.io.preview_file] =
      git_blob_hash(read_file(out_dir / cfg.io.preview_file));
  write_manifest(out_dir, manifest);

  nlohmann::json summary;
  summary["command"] = "gen-data";
  summary["n_episodes"] = eps.size();
  summary["episode_file_hash"] = manifest["outputs"][cfg.io.episode_file];
  int corrected = 0;
  for (const Episode& e : eps) corrected += e.indicator;
  summary["corrected_fraction"] = static_cast<double>(corrected) / static_cast<double>(eps.size());
  return summary;
}

// ---- train -----------------------------------------------------------------

inline nlohmann::json cmd_train(const ExperimentConfig& cfg, const std::filesystem::path& data_dir,
                                const std::filesystem::path& out_dir) {
  cfg.validate();
  ConfigHashes h = config_hashes(cfg);
  detail::GuardedData data = detail::load_guarded_episodes(cfg, data_dir);

  TrainResult res = train(cfg.train, cfg.model, data.episodes);

  nlohmann::json manifest = detail::base_manifest(cfg, "train");
  manifest["train_hash"] = h.train;
  manifest["inputs"][cfg.io.episode_file] = data.content_hash;
  manifest["final_param_hash"] = hex64(res.log.final_param_hash);
  std::string ckpt = encode_checkpoint(res.model, static_cast<uint64_t>(cfg.train.steps), h.train);
  detail::write_output(out_dir, cfg.io.checkpoint_file, ckpt, manifest);
  detail::write_output(out_dir, cfg.io.log_file, train_log_csv(res.log), manifest);
  write_manifest(out_dir, manifest);

  nlohmann::json summary;
  summary["command"] = "train";
  summary["variant"] = variant_name(cfg.train.variant);
  summary["steps"] = cfg.train.steps;
  summary["param_count"] = res.model.param_count();
  summary["final_param_hash"] = hex64(res.log.final_param_hash);
  if (!res.log.records.empty()) {
    summary["final_state_loss"] = res.log.records.back().state_loss;
    summary["final_traj_loss"] = res.log.records.back().traj_loss;
  }
  return summary;
}

// ---- eval ------------------------------------------------------------------

inline nlohmann::json cmd_eval(const ExperimentConfig& cfg, const std::filesystem::path& ckpt_dir,
                               const std::filesystem::path& data_dir,
                               const std::filesystem::path& out_dir) {
  cfg.validate();
  detail::GuardedData data = detail::load_guarded_episodes(cfg, data_dir);
  detail::GuardedModel gm = detail::load_guarded_model(cfg, ckpt_dir, true);
  const std::vector<Episode>& eps = data.episodes;
  DiffusionSchedule sched = cosine_schedule(cfg.train.diffusion_steps);
  Rng stream = Rng(cfg.seed).split(kStreamEval);

  std::vector<double> ade(eps.size()), l2_1(eps.size()), l2_2(eps.size()), l2_3(eps.size());
  double collisions = 0.0;
  for (size_t i = 0; i < eps.size(); ++i) {
    const Episode& ep = eps[i];
    EpisodeBundle bundle = detail::regen_bundle(cfg, ep);
    Trajectory traj = plan(gm.model, ep.v_now, ep.ego, ep.command, sched,
                           stream.split(static_cast<uint64_t>(i)).next_u64(), cfg.analysis.chains);
    EndpointMetrics em = endpoint_metrics(traj, ep.traj_gt);
    ade[i] = em.ade;
    l2_1[i] = em.l2_1s;
    l2_2[i] = em.l2_2s;
    l2_3[i] = em.l2_3s;
    collisions += collision_proxy(traj, bundle.scene, cfg.world.dt);
  }
  auto mean_of = [](const std::vector<double>& v, const std::vector<size_t>* idx) {
    double acc = 0.0;
    size_t n = idx ? idx->size() : v.size();
    if (n == 0) return std::numeric_limits<double>::quiet_NaN();
    if (idx)
      for (size_t i : *idx) acc += v[i];
    else
      for (double x : v) acc += x;
    return acc / static_cast<double>(n);
  };

  nlohmann::json report;
  report["command"] = "eval";
  report["tool_version"] = kToolVersion;
  report["variant"] = variant_name(gm.model.variant);
  report["n_episodes"] = eps.size();
  report["endpoint"] = {{"ade", mean_of(ade, nullptr)},
                        {"l2_1s", mean_of(l2_1, nullptr)},
                        {"l2_2s", mean_of(l2_2, nullptr)},
                        {"l2_3s", mean_of(l2_3, nullptr)}};
  report["collision_rate"] = collisions / static_cast<double>(eps.size());

  StratifyResult strat = stratify(eps, cfg.analysis.stratify_low, cfg.analysis.stratify_high, cfg.world.dt);
  double ed_ade = mean_of(ade, &strat.ego_dominated);
  double vc_ade = mean_of(ade, &strat.vision_critical);
  report["stratified"] = {
      {"ego_dominated", {{"n", strat.ego_dominated.size()}, {"mean_ade", ed_ade},
                         {"mean_l2_3s", mean_of(l2_3, &strat.ego_dominated)}}},
      {"vision_critical", {{"n", strat.vision_critical.size()}, {"mean_ade", vc_ade},
                           {"mean_l2_3s", mean_of(l2_3, &strat.vision_critical)}}},
      {"low_threshold", strat.low_threshold},
      {"high_threshold", strat.high_threshold},
      {"ade_ratio", vc_ade / ed_ade}};

  std::string csv = "set,n,mean_ade,mean_l2_3s\n";
  csv += "ego_dominated," + std::to_string(strat.ego_dominated.size()) + "," +
         detail::fmt_g17(ed_ade) + "," + detail::fmt_g17(mean_of(l2_3, &strat.ego_dominated)) + "\n";
  csv += "vision_critical," + std::to_string(strat.vision_critical.size()) + "," +
         detail::fmt_g17(vc_ade) + "," + detail::fmt_g17(mean_of(l2_3, &strat.vision_critical)) + "\n";

  nlohmann::json manifest = detail::base_manifest(cfg, "eval");
  manifest["train_hash"] = config_hashes(cfg).train;
  manifest["inputs"][cfg.io.episode_file] = data.content_hash;
  manifest["inputs"][cfg.io.checkpoint_file] = gm.content_hash;
  detail::write_output(out_dir, "stratified.csv", csv, manifest);
  detail::write_report(out_dir, cfg, report, manifest);
  write_manifest(out_dir, manifest);
  return report;
}

// ---- probe-stitch ----------------------------------------------------------

inline nlohmann::json cmd_probe_stitch(const ExperimentConfig& cfg, const std::filesystem::path& ckpt_dir,
                                       const std::filesystem::path& data_dir,
                                       const std::filesystem::path& out_dir) {
  cfg.validate();
  detail::GuardedData data = detail::load_guarded_episodes(cfg, data_dir);
  detail::GuardedModel gm = detail::load_guarded_model(cfg, ckpt_dir, true);
  std::vector<Episode> eps(data.episodes.begin(),
                           data.episodes.begin() +
                               static_cast<std::ptrdiff_t>(
                                   detail::capped(data.episodes.size(), cfg.analysis.stitch_episodes)));
  DiffusionSchedule sched = cosine_schedule(cfg.train.diffusion_steps);
  uint64_t probe_seed = Rng(cfg.seed).split(kStreamStitch).next_u64();

  StitchReport rep = stitching_probe(gm.model, eps, cfg.analysis.placements, cfg.analysis.scales,
                                     cfg.world, sched, probe_seed, cfg.analysis.chains,
                                     cfg.analysis.dead_band);

  nlohmann::json report;
  report["command"] = "probe-stitch";
  report["tool_version"] = kToolVersion;
  report["variant"] = variant_name(gm.model.variant);
  report["n_episodes"] = eps.size();
  nlohmann::json rows = nlohmann::json::array();
  for (const StitchRow& r : rep.rows)
    rows.push_back({{"placement", placement_name(r.placement)},
                    {"scale", r.scale},
                    {"n", r.n},
                    {"mean_delta", r.mean_delta},
                    {"mean_abs", r.mean_abs},
                    {"median_abs", r.median_abs},
                    {"frac_below_1m", r.frac_below_1m},
                    {"decel_ratio", r.decel_ratio}});
  report["rows"] = rows;
  report["has_paired_control"] = rep.has_paired_control;
  if (rep.has_paired_control) {
    report["frac_far_exceeds_skyfar"] = rep.frac_far_exceeds_skyfar;
    report["paired_mean_delta"] = rep.paired_mean_delta;
    report["paired_n"] = rep.paired_n;
  }

  // Raw before/after series for the first few episodes, one row per waypoint.
  std::string csv = "placement,scale,episode,step,x_before,y_before,x_after,y_after\n";
  size_t n_plot = detail::capped(eps.size(), cfg.analysis.plot_episodes);
  for (size_t pi = 0; pi < cfg.analysis.placements.size(); ++pi) {
    for (size_t i = 0; i < n_plot; ++i) {
      uint64_t ep_seed = Rng(probe_seed).split(static_cast<uint64_t>(i)).next_u64();
      VisualTokenGrid stitched =
          stitch_obstacle(eps[i].v_now, cfg.analysis.placements[pi], cfg.analysis.scales[pi], cfg.world);
      PlanPair pair = paired_plan(gm.model, eps[i].v_now, stitched, eps[i].ego, eps[i].command, sched,
                                  ep_seed, cfg.analysis.chains);
      for (size_t k = 0; k < pair.before.points.size(); ++k) {
        csv += std::string(placement_name(cfg.analysis.placements[pi])) + "," +
               detail::fmt_g17(cfg.analysis.scales[pi]) + "," + std::to_string(i) + "," +
               std::to_string(k + 1) + "," + detail::fmt_g17(pair.before.points[k].x) + "," +
               detail::fmt_g17(pair.before.points[k].y) + "," + detail::fmt_g17(pair.after.points[k].x) +
               "," + detail::fmt_g17(pair.after.points[k].y) + "\n";
      }
    }
  }

  nlohmann::json manifest = detail::base_manifest(cfg, "probe-stitch");
  manifest["train_hash"] = config_hashes(cfg).train;
  manifest["inputs"][cfg.io.episode_file] = data.content_hash;
  manifest["inputs"][cfg.io.checkpoint_file] = gm.content_hash;
  detail::write_output(out_dir, "stitch_trajectories.csv", csv, manifest);
  detail::write_report(out_dir, cfg, report, manifest);
  write_manifest(out_dir, manifest);
  return report;
}

// ---- probe-saliency --------------------------------------------------------

inline nlohmann::json cmd_probe_saliency(const ExperimentConfig& cfg,
                                         const std::filesystem::path& ckpt_dir,
                                         const std::filesystem::path& data_dir,
                                         const std::filesystem::path& out_dir) {
  cfg.validate();
  detail::GuardedData data = detail::load_guarded_episodes(cfg, data_dir);
  detail::GuardedModel gm = detail::load_guarded_model(cfg, ckpt_dir, true);
  size_t n = detail::capped(data.episodes.size(), cfg.analysis.saliency_episodes);
  DiffusionSchedule sched = cosine_schedule(cfg.train.diffusion_steps);
  Rng stream = Rng(cfg.seed).split(kStreamSaliency);

  nlohmann::json rows = nlohmann::json::array();
  std::string csv = "episode,pm,ap,iou,f1,p80\n";
  double pm_acc = 0.0, iou_acc = 0.0, f1_acc = 0.0, ap_acc = 0.0;
  int64_t ap_n = 0;
  std::vector<SaliencyMap> maps;
  for (size_t i = 0; i < n; ++i) {
    const Episode& ep = data.episodes[i];
    SaliencyMap map = saliency_map(gm.model, ep, sched, stream.split(static_cast<uint64_t>(i)).next_u64());
    GroundingMetrics g = grounding_metrics(map, ep.v_now.object_mask);
    nlohmann::json row;
    row["episode"] = i;
    row["pm"] = g.pm;
    row["ap"] = g.ap.has_value() ? nlohmann::json(g.ap.value()) : nlohmann::json(nullptr);
    row["iou"] = g.iou;
    row["f1"] = g.f1;
    row["p80"] = g.p80;
    rows.push_back(row);
    csv += std::to_string(i) + "," + detail::fmt_g17(g.pm) + "," +
           (g.ap.has_value() ? detail::fmt_g17(g.ap.value()) : std::string()) + "," +
           detail::fmt_g17(g.iou) + "," + detail::fmt_g17(g.f1) + "," + detail::fmt_g17(g.p80) + "\n";
    pm_acc += g.pm;
    iou_acc += g.iou;
    f1_acc += g.f1;
    if (g.ap.has_value()) {
      ap_acc += g.ap.value();
      ap_n += 1;
    }
    if (maps.size() < detail::capped(n, cfg.analysis.plot_episodes)) maps.push_back(std::move(map));
  }

  nlohmann::json report;
  report["command"] = "probe-saliency";
  report["tool_version"] = kToolVersion;
  report["variant"] = variant_name(gm.model.variant);
  report["n_episodes"] = n;
  report["rows"] = rows;
  report["mean"] = {{"pm", n ? pm_acc / static_cast<double>(n) : 0.0},
                    {"iou", n ? iou_acc / static_cast<double>(n) : 0.0},
                    {"f1", n ? f1_acc / static_cast<double>(n) : 0.0},
                    {"ap", ap_n ? nlohmann::json(ap_acc / static_cast<double>(ap_n))
                                : nlohmann::json(nullptr)},
                    {"ap_n", ap_n}};

  nlohmann::json manifest = detail::base_manifest(cfg, "probe-saliency");
  manifest["train_hash"] = config_hashes(cfg).train;
  manifest["inputs"][cfg.io.episode_file] = data.content_hash;
  manifest["inputs"][cfg.io.checkpoint_file] = gm.content_hash;
  detail::write_output(out_dir, "grounding.csv", csv, manifest);
  for (size_t i = 0; i < maps.size(); ++i) {
    std::string grid;
    for (int r = 0; r < maps[i].h; ++r) {
      for (int c = 0; c < maps[i].w; ++c) {
        if (c) grid += ",";
        grid += detail::fmt_g17(maps[i].at(r, c));
      }
      grid += "\n";
    }
    char name[64];
    std::snprintf(name, sizeof name, "saliency_%03zu.csv", i);
    detail::write_output(out_dir, name, grid, manifest);
  }
  detail::write_report(out_dir, cfg, report, manifest);
  write_manifest(out_dir, manifest);
  return report;
}

// ---- analyze ---------------------------------------------------------------

inline nlohmann::json cmd_analyze(const ExperimentConfig& cfg,
                                  const std::vector<std::filesystem::path>& ckpt_dirs,
                                  const std::filesystem::path& data_dir,
                                  const std::filesystem::path& out_dir) {
  cfg.validate();
  if (ckpt_dirs.empty()) throw ConfigError("analyze: need at least one checkpoint");
  detail::GuardedData data = detail::load_guarded_episodes(cfg, data_dir);
  const std::vector<Episode>& eps = data.episodes;

  // Mixing variants is the point of analyze, so only dataset provenance
  // (world section + master seed) is enforced on the checkpoints.
  std::vector<detail::GuardedModel> models;
  for (const std::filesystem::path& d : ckpt_dirs)
    models.push_back(detail::load_guarded_model(cfg, d, false));
  DiffusionSchedule sched = cosine_schedule(cfg.train.diffusion_steps);

  nlohmann::json report;
  report["command"] = "analyze";
  report["tool_version"] = kToolVersion;
  nlohmann::json variants = nlohmann::json::array();
  for (const detail::GuardedModel& m : models) variants.push_back(variant_name(m.model.variant));
  report["variants"] = variants;
  report["n_episodes"] = eps.size();
  report["tau"] = cfg.analysis.tau;
  report["epsilon_hat"] = estimate_epsilon(eps, cfg.analysis.tau, cfg.world.dt);

  SigmaVReport sv = estimate_sigma_v(eps);
  report["sigma_v"] = {{"marginal", sv.marginal},
                       {"conditional", sv.conditional},
                       {"between", sv.between},
                       {"per_command",
                        {{"left", sv.per_command[0]},
                         {"forward", sv.per_command[1]},
                         {"right", sv.per_command[2]}}},
                       {"command_count",
                        {{"left", sv.command_count[0]},
                         {"forward", sv.command_count[1]},
                         {"right", sv.command_count[2]}}}};

  // Condition bins for the loss decomposition: ego states drawn from the
  // middle of the world's speed/yaw bands, commands cycling.
  std::vector<ConditionBin> bins;
  for (int b = 0; b < cfg.analysis.decomp_bins; ++b) {
    Rng rb = Rng(cfg.seed).split(kStreamBins).split(static_cast<uint64_t>(b));
    EgoStatus ego;
    double span = cfg.world.speed_max - cfg.world.speed_min;
    ego.vy = cfg.world.speed_min + span * (0.25 + 0.5 * rb.next_uniform());
    ego.yaw_rate = (2.0 * rb.next_uniform() - 1.0) * cfg.world.yaw_rate_range;
    Command cmd = static_cast<Command>(b % 3);
    bins.push_back(make_condition_bin(cfg.world, ego, cmd, cfg.analysis.decomp_bin_size, rb.next_u64()));
  }
  DecompositionReport dec = decomposition_check(models[0].model, bins, cfg.world, sched,
                                                Rng(cfg.seed).split(kStreamDecomp).next_u64(),
                                                cfg.analysis.chains);
  report["decomposition"] = {{"bias2", dec.bias2},       {"variance", dec.variance},
                             {"noise", dec.noise},       {"lhs", dec.lhs},
                             {"residual", dec.residual}, {"total_n", dec.total_n}};

  nlohmann::json manifest = detail::base_manifest(cfg, "analyze");
  manifest["inputs"][cfg.io.episode_file] = data.content_hash;
  for (size_t i = 0; i < models.size(); ++i)
    manifest["inputs"]["checkpoint_" + std::to_string(i)] = models[i].content_hash;

  size_t n_nsp = detail::capped(eps.size(), cfg.analysis.nsp_episodes);
  if (models[0].model.has_backbone() && n_nsp >= 4) {
    std::vector<Episode> subset(eps.begin(), eps.begin() + static_cast<std::ptrdiff_t>(n_nsp));
    NspTrajReport nsp = nsp_traj_correlation(models[0].model, subset, sched,
                                             Rng(cfg.seed).split(kStreamNsp).next_u64(),
                                             cfg.analysis.chains);
    nlohmann::json quart = nlohmann::json::array();
    std::string csv = "quartile,mean_nsp,mean_l2_1s,mean_l2_2s,mean_l2_3s,mean_ade,n\n";
    for (size_t q = 0; q < 4; ++q) {
      const NspQuartileRow& r = nsp.quartiles[q];
      quart.push_back({{"mean_nsp", r.mean_nsp},
                       {"mean_l2_1s", r.mean_l2_1s},
                       {"mean_l2_2s", r.mean_l2_2s},
                       {"mean_l2_3s", r.mean_l2_3s},
                       {"mean_ade", r.mean_ade},
                       {"n", r.n}});
      csv += std::to_string(q + 1) + "," + detail::fmt_g17(r.mean_nsp) + "," +
             detail::fmt_g17(r.mean_l2_1s) + "," + detail::fmt_g17(r.mean_l2_2s) + "," +
             detail::fmt_g17(r.mean_l2_3s) + "," + detail::fmt_g17(r.mean_ade) + "," +
             std::to_string(r.n) + "\n";
    }
    report["nsp"] = {{"n", n_nsp},
                     {"l2_1s", detail::correlation_json(nsp.l2_1s)},
                     {"l2_2s", detail::correlation_json(nsp.l2_2s)},
                     {"l2_3s", detail::correlation_json(nsp.l2_3s)},
                     {"ade", detail::correlation_json(nsp.ade)},
                     {"quartiles", quart}};
    detail::write_output(out_dir, "nsp_quartiles.csv", csv, manifest);
  } else {
    report["nsp"] = nullptr;
  }

  if (models.size() >= 2) {
    size_t n_cmp = detail::capped(eps.size(), cfg.analysis.compare_episodes);
    std::vector<EpisodeBundle> bundles;
    for (size_t i = 0; i < n_cmp; ++i) bundles.push_back(detail::regen_bundle(cfg, eps[i]));
    VariantComparison vc = compare_variants(models[0].model, models[1].model, bundles, cfg.world, sched,
                                            Rng(cfg.seed).split(kStreamCompare).next_u64(),
                                            cfg.analysis.chains, cfg.analysis.quantile);
    nlohmann::json rows = nlohmann::json::array();
    std::string csv = "characteristic,mean_top,mean_bottom,u,p\n";
    for (const CharacteristicRow& r : vc.characteristics) {
      rows.push_back({{"characteristic", r.name},
                      {"mean_top", r.mean_top},
                      {"mean_bottom", r.mean_bottom},
                      {"u", r.u},
                      {"p", r.p}});
      csv += r.name + "," + detail::fmt_g17(r.mean_top) + "," + detail::fmt_g17(r.mean_bottom) + "," +
             detail::fmt_g17(r.u) + "," + detail::fmt_g17(r.p) + "\n";
    }
    report["compare"] = {{"a", variant_name(models[0].model.variant)},
                         {"b", variant_name(models[1].model.variant)},
                         {"n", n_cmp},
                         {"group_size", vc.group_size},
                         {"top_threshold", vc.top_threshold},
                         {"bottom_threshold", vc.bottom_threshold},
                         {"degenerate", vc.degenerate},
                         {"characteristics", rows}};
    detail::write_output(out_dir, "delta_groups.csv", csv, manifest);
  } else {
    report["compare"] = nullptr;
  }

  detail::write_report(out_dir, cfg, report, manifest);
  write_manifest(out_dir, manifest);
  return report;
}

// Exit-code families for the command binary: configuration 2, manifest 3,
// numeric 4, anything else 1.
inline int classify_error(const std::exception& e) {
  if (dynamic_cast<const ConfigError*>(&e)) return 2;
  if (dynamic_cast<const ManifestError*>(&e)) return 3;
  if (dynamic_cast<const NumericError*>(&e)) return 4;
  return 1;
}

}  // namespace ikdrive
