#pragma once

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <string>
#include <vector>

#include "ikdrive/diffusion.hpp"
#include "ikdrive/hashing.hpp"
#include "ikdrive/models.hpp"
#include "ikdrive/rng.hpp"
#include "ikdrive/tape.hpp"
#include "ikdrive/tensor.hpp"
#include "ikdrive/worldsim.hpp"

namespace ikdrive {

struct TrainConfig {
  Variant variant = Variant::ours;
  double lambda_state = 1.0;
  double lambda_traj = 1.0;
  double lr_backbone = 1e-5;
  double lr_ik = 1e-4;
  double warmup_ratio = 0.145;
  double grad_clip = 1.0;
  double weight_decay = 0.01;
  int64_t steps = 0;
  int64_t batch_size = 1;
  uint64_t seed = 0;
  int diffusion_steps = 50;
  bool stop_next_state_grad = false;

  void validate() const {
    if (lambda_state < 0.0 || lambda_traj < 0.0)
      throw ConfigError("TrainConfig: loss weights must be >= 0");
    if (!(warmup_ratio >= 0.0 && warmup_ratio < 1.0))
      throw ConfigError("TrainConfig: warmup_ratio must lie in [0, 1)");
    if (!(lr_backbone >= 0.0 && lr_ik >= 0.0)) throw ConfigError("TrainConfig: learning rates must be >= 0");
    if (grad_clip <= 0.0) throw ConfigError("TrainConfig: grad_clip must be positive");
    if (weight_decay < 0.0) throw ConfigError("TrainConfig: weight_decay must be >= 0");
    if (steps < 0) throw ConfigError("TrainConfig: steps must be >= 0");
    if (batch_size < 1) throw ConfigError("TrainConfig: batch_size must be >= 1");
    if (diffusion_steps < 1) throw ConfigError("TrainConfig: diffusion_steps must be >= 1");
  }
};

// Unitless schedule factor: 0 at step 0, linear rise to 1 at the end of
// warmup, cosine decay to 0 at cfg.steps. Group learning rates multiply this.
inline double lr_schedule(const TrainConfig& cfg, int64_t step) {
  if (step <= 0 || cfg.steps <= 0) return 0.0;
  int64_t warmup = static_cast<int64_t>(std::llround(cfg.warmup_ratio * static_cast<double>(cfg.steps)));
  if (step <= warmup) return static_cast<double>(step) / static_cast<double>(warmup);
  double progress = static_cast<double>(step - warmup) / static_cast<double>(cfg.steps - warmup);
  return 0.5 * (1.0 + std::cos(3.141592653589793 * progress));
}

struct StepRecord {
  int64_t step = 0;
  double state_loss = 0.0;
  double traj_loss = 0.0;
  double lr = 0.0;  // effective decoder-group rate this step
  double grad_norm = 0.0;  // global norm after clipping
};

struct TrainLog {
  std::vector<StepRecord> records;
  uint64_t final_param_hash = 0;
};

inline std::string train_log_csv(const TrainLog& log) {
  std::string out = "step,state_loss,traj_loss,lr,grad_norm\n";
  char buf[256];
  for (const StepRecord& r : log.records) {
    std::snprintf(buf, sizeof buf, "%lld,%.17g,%.17g,%.17g,%.17g\n", static_cast<long long>(r.step),
                  r.state_loss, r.traj_loss, r.lr, r.grad_norm);
    out += buf;
  }
  return out;
}

// Hash of all parameter payloads in declaration order.
inline uint64_t param_hash(ModelSet& model) {
  uint64_t h = 14695981039346656037ull;
  for (auto& [name, t] : model.entries()) {
    h = fnv1a(name.data(), name.size(), h);
    h = fnv1a(t->vec().data(), t->vec().size() * sizeof(double), h);
  }
  return h;
}

struct OptState {
  std::vector<Tensor> m, v;
  int64_t step = 0;
};

inline OptState make_opt_state(ModelSet& model) {
  OptState s;
  for (auto& [name, t] : model.entries()) {
    s.m.emplace_back(t->shape());
    s.v.emplace_back(t->shape());
  }
  return s;
}

namespace detail {

inline bool is_backbone_group(const std::string& name) {
  return name.rfind("backbone", 0) == 0 || name.rfind("direct.trunk", 0) == 0;
}

inline bool all_zero(const Tensor& t) {
  for (double v : t.vec())
    if (v != 0.0) return false;
  return true;
}

}  // namespace detail

// One optimization step of the joint objective
//   lambda_state * E||V_hat - V_target||^2 + lambda_traj * (decoder loss)
// over the given batch. Returns the per-step record; throws NumericError on a
// non-finite loss.
inline StepRecord joint_step(ModelSet& model, OptState& opt, const std::vector<const Episode*>& batch,
                             const TrainConfig& cfg, const DiffusionSchedule& sched, Rng& rng) {
  if (batch.empty()) throw ArgumentError("joint_step: empty batch");
  const ModelConfig& mcfg = model.cfg;
  const double inv_b = 1.0 / static_cast<double>(batch.size());

  Tape t;
  auto entries = model.entries();
  std::vector<Var> vars;
  vars.reserve(entries.size());
  for (auto& [name, ten] : entries) vars.push_back(t.input(*ten));

  size_t vi = 0;
  BackboneVars bb;
  IkVars ik;
  DirectVars dv;
  HeadVars hv;
  if (model.has_backbone()) bb = backbone_vars_from(vars, vi, mcfg.backbone_blocks);
  if (model.has_ik()) ik = ik_vars_from(vars, vi);
  if (model.has_direct()) dv = direct_vars_from(vars, vi, mcfg.backbone_blocks);
  if (model.has_head()) hv = head_vars_from(vars, vi);
  const bool mask = model.masks_vision();

  std::vector<Var> state_terms, traj_terms;
  std::vector<Tensor> x0s;
  std::vector<Var> z_nows, z_nexts;
  Tensor pos = grid_pos_tokens(mcfg.grid_h, mcfg.grid_w);

  for (const Episode* ep : batch) {
    mcfg.match_grid(ep->v_now);
    Tensor traj_target = normalize_traj(ep->traj_gt, mcfg.traj_scale);
    if (traj_target.shape()[0] != mcfg.horizon_steps)
      throw ConfigError("joint_step: trajectory horizon does not match model config");

    if (model.has_direct()) {
      Var pred = direct_forward_var(t, dv, mcfg, ep->v_now, ep->ego, ep->command, false);
      traj_terms.push_back(mse(pred, t.constant(traj_target)));
      continue;
    }

    Var vis = grid_tokens_var(t, mcfg, ep->v_now, mask ? &bb : nullptr);
    Var hidden = encoder_hidden(t, bb, mcfg, vis, ep->ego, ep->command, mcfg.backbone_heads);
    Var state_pred = add(matmul(slice(hidden, 0, 0, mcfg.n_tokens()), bb.head_W), bb.head_b);
    const VisualTokenGrid& state_target_grid =
        model.variant == Variant::no_next_state ? ep->v_now : ep->v_future;
    state_terms.push_back(mse(state_pred, t.constant(grid_content_tokens(state_target_grid))));

    if (model.has_ik()) {
      x0s.push_back(traj_target);
      z_nows.push_back(vis);
      Var z_next = concat({state_pred, t.constant(pos)}, 1);
      z_nexts.push_back(cfg.stop_next_state_grad ? t.constant(t.value(z_next)) : z_next);
    } else if (model.has_head()) {
      Var pred = head_forward_var(t, hv, model.variant, mcfg, hidden);
      traj_terms.push_back(mse(pred, t.constant(traj_target)));
    }
  }

  Var zero = t.constant(Tensor({1}));
  Var state_mean = zero;
  if (!state_terms.empty()) {
    Var acc = state_terms[0];
    for (size_t i = 1; i < state_terms.size(); ++i) acc = add(acc, state_terms[i]);
    state_mean = scale(acc, inv_b);
  }

  Var traj_mean = zero;
  if (model.has_ik()) {
    if (cfg.lambda_traj != 0.0) traj_mean = ik_loss_var(t, ik, mcfg, sched, x0s, z_nows, z_nexts, rng);
  } else if (!traj_terms.empty()) {
    Var acc = traj_terms[0];
    for (size_t i = 1; i < traj_terms.size(); ++i) acc = add(acc, traj_terms[i]);
    traj_mean = scale(acc, inv_b);
  }

  Var total = add(scale(state_mean, cfg.lambda_state), scale(traj_mean, cfg.lambda_traj));

  double state_val = t.value(state_mean)[0];
  double traj_val = t.value(traj_mean)[0];
  if (!std::isfinite(state_val) || !std::isfinite(traj_val))
    throw NumericError("joint_step: non-finite loss at step " + std::to_string(opt.step + 1) +
                       " (state " + std::to_string(state_val) + ", traj " + std::to_string(traj_val) + ")");

  t.backward(total);
  std::vector<Tensor> grads;
  grads.reserve(vars.size());
  double sq = 0.0;
  for (Var v : vars) {
    grads.push_back(t.grad(v));
    for (double g : grads.back().vec()) sq += g * g;
  }
  double norm = std::sqrt(sq);
  if (!std::isfinite(norm))
    throw NumericError("joint_step: non-finite gradient at step " + std::to_string(opt.step + 1));
  double clip_scale = norm > cfg.grad_clip ? cfg.grad_clip / norm : 1.0;

  opt.step += 1;
  double factor = lr_schedule(cfg, opt.step);
  double bc1 = 1.0 - std::pow(0.9, static_cast<double>(opt.step));
  double bc2 = 1.0 - std::pow(0.999, static_cast<double>(opt.step));
  for (size_t pi = 0; pi < entries.size(); ++pi) {
    // Parameters outside the active gradient path keep their exact bits; the
    // optimizer treats them as absent rather than decaying them.
    if (detail::all_zero(grads[pi])) continue;
    double lr = factor * (detail::is_backbone_group(entries[pi].first) ? cfg.lr_backbone : cfg.lr_ik);
    Tensor& theta = *entries[pi].second;
    for (int64_t i = 0; i < theta.numel(); ++i) {
      size_t k = static_cast<size_t>(i);
      double g = grads[pi].vec()[k] * clip_scale;
      opt.m[pi].vec()[k] = 0.9 * opt.m[pi].vec()[k] + 0.1 * g;
      opt.v[pi].vec()[k] = 0.999 * opt.v[pi].vec()[k] + 0.001 * g * g;
      double mhat = opt.m[pi].vec()[k] / bc1;
      double vhat = opt.v[pi].vec()[k] / bc2;
      theta.vec()[k] -= lr * (mhat / (std::sqrt(vhat) + 1e-8) + cfg.weight_decay * theta.vec()[k]);
      if (!std::isfinite(theta.vec()[k]))
        throw NumericError("joint_step: non-finite parameter after update at step " +
                           std::to_string(opt.step));
    }
  }

  StepRecord rec;
  rec.step = opt.step;
  rec.state_loss = state_val;
  rec.traj_loss = traj_val;
  rec.lr = factor * cfg.lr_ik;
  rec.grad_norm = norm * clip_scale;
  return rec;
}

struct TrainResult {
  ModelSet model;
  TrainLog log;
};

inline TrainResult train(const TrainConfig& cfg, const ModelConfig& mcfg,
                         const std::vector<Episode>& dataset) {
  cfg.validate();
  mcfg.validate();
  if (dataset.empty()) throw ConfigError("train: empty dataset");
  for (const Episode& ep : dataset) {
    for (const VisualTokenGrid* g : {&ep.v_now, &ep.v_future})
      if (g->h != mcfg.grid_h || g->w != mcfg.grid_w || g->d != mcfg.grid_d)
        throw ConfigError("train: episode grid " + shape_str({g->h, g->w, g->d}) +
                          " does not match model config " +
                          shape_str({mcfg.grid_h, mcfg.grid_w, mcfg.grid_d}));
    if (static_cast<int64_t>(ep.traj_gt.points.size()) != mcfg.horizon_steps)
      throw ConfigError("train: dataset horizon does not match model config");
  }

  TrainResult out{init_model_set(cfg.variant, mcfg, cfg.seed), {}};
  OptState opt = make_opt_state(out.model);
  DiffusionSchedule sched = cosine_schedule(cfg.diffusion_steps);
  Rng batch_rng = Rng(cfg.seed).split(1000003);
  Rng loss_rng = Rng(cfg.seed).split(1000033);

  out.log.records.reserve(static_cast<size_t>(cfg.steps));
  for (int64_t s = 1; s <= cfg.steps; ++s) {
    std::vector<const Episode*> batch;
    batch.reserve(static_cast<size_t>(cfg.batch_size));
    for (int64_t b = 0; b < cfg.batch_size; ++b)
      batch.push_back(&dataset[static_cast<size_t>(batch_rng.next_below(static_cast<int64_t>(dataset.size())))]);
    out.log.records.push_back(joint_step(out.model, opt, batch, cfg, sched, loss_rng));
  }
  out.log.final_param_hash = param_hash(out.model);
  return out;
}

}  // namespace ikdrive
