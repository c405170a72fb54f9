#pragma once
// Variant-uniform prediction facade. Every model family answers the same
// question — "given (grid, ego, command), what trajectory?" — and a paired
// entry point reuses sampling noise across two grids so the output difference
// isolates the visual change.

#include "ikdrive/diffusion.hpp"
#include "ikdrive/models.hpp"

namespace ikdrive {

// Condition tokens for a trajectory-decoder forward pass: z_now is whatever
// the model actually saw (null rows when the variant masks vision), z_next is
// the backbone's predicted next state with position channels appended.
struct IkConditions {
  Tensor z_now, z_next;
};

inline IkConditions ik_conditions(ModelSet& m, const VisualTokenGrid& v, const EgoStatus& e,
                                  Command c) {
  if (!m.has_ik()) throw ArgumentError("ik_conditions: variant has no trajectory decoder");
  IkConditions out;
  out.z_now = m.masks_vision() ? null_tokens(m.backbone, m.cfg) : grid_tokens(v);
  Tensor state = backbone_predict(m.backbone, m.cfg, v, e, c, m.masks_vision());
  out.z_next = tokens_from_content(state, m.cfg);
  return out;
}

// Mean of K reverse chains, chain k seeded Rng(seed).split(k). Chain seeds
// match paired_sample, so plan(v) is bitwise equal to paired_plan(v, v).
inline Trajectory mean_sample(IkParams& p, const ModelConfig& cfg, const Tensor& z_now,
                              const Tensor& z_next, const DiffusionSchedule& sched, uint64_t seed,
                              int K) {
  if (K < 1) throw ArgumentError("mean_sample: K must be >= 1");
  Shape shape{cfg.horizon_steps, 2};
  Tensor sum(shape);
  DenoiseFn d = make_ik_denoiser(p, cfg, z_now, z_next);
  for (int k = 1; k <= K; ++k) {
    NoiseSequence ns = draw_noise_sequence(sched, shape, Rng(seed).split(static_cast<uint64_t>(k)));
    Tensor x = ddpm_sample_core(d, sched, ns);
    for (int64_t i = 0; i < sum.numel(); ++i)
      sum.vec()[static_cast<size_t>(i)] += x.vec()[static_cast<size_t>(i)];
  }
  for (int64_t i = 0; i < sum.numel(); ++i) sum.vec()[static_cast<size_t>(i)] /= K;
  return denormalize_traj(sum, cfg.traj_scale);
}

// Trajectory in meters for any variant. Deterministic families ignore the
// sampling arguments.
inline Trajectory plan(ModelSet& m, const VisualTokenGrid& v, const EgoStatus& e, Command c,
                       const DiffusionSchedule& sched, uint64_t seed, int K = 1) {
  if (m.has_direct()) return direct_predict(m.direct, m.cfg, v, e, c);
  if (m.has_head()) return head_predict(m.backbone, m.head, m.variant, m.cfg, v, e, c);
  IkConditions ic = ik_conditions(m, v, e, c);
  return mean_sample(m.ik, m.cfg, ic.z_now, ic.z_next, sched, seed, K);
}

struct PlanPair {
  Trajectory before;
  Trajectory after;
};

// Plans for two grids under one ego/command. Sampling variants share the
// complete noise sequence chain-by-chain across the two grids.
inline PlanPair paired_plan(ModelSet& m, const VisualTokenGrid& v_before,
                            const VisualTokenGrid& v_after, const EgoStatus& e, Command c,
                            const DiffusionSchedule& sched, uint64_t seed, int K = 1) {
  if (m.has_direct() || m.has_head())
    return {plan(m, v_before, e, c, sched, seed, K), plan(m, v_after, e, c, sched, seed, K)};
  IkConditions a = ik_conditions(m, v_before, e, c);
  IkConditions b = ik_conditions(m, v_after, e, c);
  PairedSample ps = paired_sample(m.ik, m.cfg, a.z_now, a.z_next, b.z_now, b.z_next, sched, seed, K);
  return {ps.a, ps.b};
}

}  // namespace ikdrive
