#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <vector>

#include "ikdrive/models.hpp"
#include "ikdrive/rng.hpp"
#include "ikdrive/tape.hpp"
#include "ikdrive/tensor.hpp"

namespace ikdrive {

// ====== schedule ======

struct DiffusionSchedule {
  int T = 0;
  std::vector<double> alpha_bar;  // [T+1], alpha_bar[0] == 1
  std::vector<double> beta;       // [T], beta[t-1] is the step-t value

  double beta_at(int t) const {  // t in [1, T]
    if (t < 1 || t > T) throw ArgumentError("beta_at: step out of range");
    return beta[static_cast<size_t>(t - 1)];
  }

  double alpha_at(int t) const { return 1.0 - beta_at(t); }

  // Posterior variance of x_{t-1} given (x_t, x_0); zero at t=1 because
  // alpha_bar[0] = 1.
  double beta_tilde(int t) const {
    double ab_prev = alpha_bar[static_cast<size_t>(t - 1)];
    double ab = alpha_bar[static_cast<size_t>(t)];
    return (1.0 - ab_prev) / (1.0 - ab) * beta_at(t);
  }

  void validate() const {
    if (T < 1) throw ArgumentError("DiffusionSchedule: T must be >= 1");
    if (alpha_bar.size() != static_cast<size_t>(T) + 1 || beta.size() != static_cast<size_t>(T))
      throw ArgumentError("DiffusionSchedule: array sizes do not match T");
    if (alpha_bar[0] != 1.0) throw ArgumentError("DiffusionSchedule: alpha_bar[0] must be 1");
    for (int t = 1; t <= T; ++t) {
      if (!(alpha_bar[t] < alpha_bar[t - 1])) throw ArgumentError("DiffusionSchedule: alpha_bar not strictly decreasing");
      if (!(beta[t - 1] > 0.0 && beta[t - 1] <= 0.999)) throw ArgumentError("DiffusionSchedule: beta out of (0, 0.999]");
    }
    if (!(alpha_bar[T] > 0.0 && alpha_bar[T] < 1.0)) throw ArgumentError("DiffusionSchedule: alpha_bar[T] out of (0, 1)");
  }
};

inline DiffusionSchedule cosine_schedule(int T, double s_off = 0.008) {
  if (T < 1) throw ArgumentError("cosine_schedule: T must be >= 1");
  if (!(s_off > 0)) throw ArgumentError("cosine_schedule: s_off must be positive");
  constexpr double kHalfPi = 1.5707963267948966;
  auto f = [&](double u) {
    double c = std::cos((u + s_off) / (1.0 + s_off) * kHalfPi);
    return c * c;
  };
  DiffusionSchedule s;
  s.T = T;
  s.alpha_bar.resize(static_cast<size_t>(T) + 1);
  s.beta.resize(static_cast<size_t>(T));
  double f0 = f(0.0);
  std::vector<double> raw(static_cast<size_t>(T) + 1);
  for (int t = 0; t <= T; ++t) raw[static_cast<size_t>(t)] = f(static_cast<double>(t) / T) / f0;
  // Clip beta, then rebuild alpha_bar from the clipped betas so the two
  // arrays stay consistent.
  s.alpha_bar[0] = 1.0;
  for (int t = 1; t <= T; ++t) {
    double b = 1.0 - raw[static_cast<size_t>(t)] / raw[static_cast<size_t>(t - 1)];
    b = std::min(b, 0.999);
    s.beta[static_cast<size_t>(t - 1)] = b;
    s.alpha_bar[static_cast<size_t>(t)] = s.alpha_bar[static_cast<size_t>(t - 1)] * (1.0 - b);
  }
  s.validate();
  return s;
}

// ====== forward process ======

inline Tensor q_sample(const Tensor& x0, int t, const Tensor& eps, const DiffusionSchedule& sched) {
  if (t < 0 || t > sched.T) throw ArgumentError("q_sample: t out of [0, T]");
  require_same_shape(x0, eps, "q_sample");
  double ab = sched.alpha_bar[static_cast<size_t>(t)];
  double c0 = std::sqrt(ab);
  double c1 = std::sqrt(1.0 - ab);
  Tensor out(x0.shape());
  for (int64_t i = 0; i < x0.numel(); ++i)
    out.vec()[static_cast<size_t>(i)] = c0 * x0.vec()[static_cast<size_t>(i)] + c1 * eps.vec()[static_cast<size_t>(i)];
  return out;
}

// ====== training objective ======

// Graph-level loss so gradients can flow into the IK parameters and, through
// z_next, into the backbone. x0 entries are clean normalized trajectories.
inline Var ik_loss_var(Tape& t, const IkVars& ik, const ModelConfig& cfg,
                       const DiffusionSchedule& sched, const std::vector<Tensor>& x0s,
                       const std::vector<Var>& z_nows, const std::vector<Var>& z_nexts, Rng& rng) {
  if (x0s.empty()) throw ArgumentError("ik_loss: empty batch");
  if (z_nows.size() != x0s.size() || z_nexts.size() != x0s.size())
    throw ArgumentError("ik_loss: batch arrays must have equal length");
  std::vector<Var> terms;
  terms.reserve(x0s.size());
  for (size_t i = 0; i < x0s.size(); ++i) {
    int step = 1 + static_cast<int>(rng.next_below(static_cast<uint64_t>(sched.T)));
    Tensor eps = rng.gaussian_tensor(x0s[i].shape());
    Tensor x_t = q_sample(x0s[i], step, eps, sched);
    Var eps_hat = ik_denoise_var(t, ik, cfg, t.constant(x_t), step, z_nows[i], z_nexts[i]);
    terms.push_back(mse(eps_hat, t.constant(eps)));
  }
  Var acc = terms[0];
  for (size_t i = 1; i < terms.size(); ++i) acc = add(acc, terms[i]);
  return scale(acc, 1.0 / static_cast<double>(terms.size()));
}

// Denoiser callback so the objective and sampler can be exercised with
// oracles independent of the real network.
using DenoiseFn = std::function<Tensor(const Tensor& x_t, int t)>;

struct IkBatchItem {
  Tensor x0;      // normalized trajectory [H, 2]
  Tensor z_now;   // condition tokens [N, D+2]
  Tensor z_next;  // condition tokens [N, D+2]
};

inline double ik_loss_with(const DenoiseFn& denoise, const std::vector<Tensor>& x0s,
                           const DiffusionSchedule& sched, Rng& rng) {
  if (x0s.empty()) throw ArgumentError("ik_loss: empty batch");
  double acc = 0.0;
  for (const Tensor& x0 : x0s) {
    int step = 1 + static_cast<int>(rng.next_below(static_cast<uint64_t>(sched.T)));
    Tensor eps = rng.gaussian_tensor(x0.shape());
    Tensor x_t = q_sample(x0, step, eps, sched);
    Tensor eps_hat = denoise(x_t, step);
    require_same_shape(eps_hat, eps, "ik_loss denoiser output");
    double term = 0.0;
    for (int64_t i = 0; i < eps.numel(); ++i) {
      double d = eps_hat.vec()[static_cast<size_t>(i)] - eps.vec()[static_cast<size_t>(i)];
      term += d * d;
    }
    acc += term / static_cast<double>(eps.numel());
  }
  return acc / static_cast<double>(x0s.size());
}

inline double ik_loss(IkParams& p, const ModelConfig& cfg, const std::vector<IkBatchItem>& batch,
                      const DiffusionSchedule& sched, Rng& rng) {
  if (batch.empty()) throw ArgumentError("ik_loss: empty batch");
  Tape t;
  IkVars ik = lift_ik(t, p, false);
  std::vector<Tensor> x0s;
  std::vector<Var> z_nows, z_nexts;
  for (const IkBatchItem& item : batch) {
    x0s.push_back(item.x0);
    z_nows.push_back(t.constant(item.z_now));
    z_nexts.push_back(t.constant(item.z_next));
  }
  Var loss = ik_loss_var(t, ik, cfg, sched, x0s, z_nows, z_nexts, rng);
  return t.value(loss)[0];
}

// ====== ancestral sampling ======

// All randomness a reverse chain consumes, drawn up front in a fixed order so
// two conditions can share it exactly.
struct NoiseSequence {
  Tensor x_init;                // x_T draw
  std::vector<Tensor> z;        // z[t-1] is the noise injected at step t; z for t=1 is unused
};

inline NoiseSequence draw_noise_sequence(const DiffusionSchedule& sched, const Shape& shape, Rng rng) {
  NoiseSequence ns;
  ns.x_init = rng.gaussian_tensor(shape);
  ns.z.resize(static_cast<size_t>(sched.T));
  for (int t = sched.T; t >= 2; --t) ns.z[static_cast<size_t>(t - 1)] = rng.gaussian_tensor(shape);
  ns.z[0] = Tensor(shape);  // zeros; posterior variance at t=1 is zero
  return ns;
}

// Clean-sample estimates are clamped to this band (normalized units) before
// forming the posterior mean. Legitimate trajectories stay well inside it; the
// clamp only catches denoiser error blown up by the tiny signal level at high
// steps, where 1/sqrt(alpha_bar) is enormous.
inline constexpr double kDenoisedClip = 2.0;

// Reverse chain driven by an explicit noise sequence; returns x_0 in
// normalized units. The posterior mean is computed through the clamped clean
// estimate, which is algebraically the usual epsilon form whenever the clamp
// is inactive.
inline Tensor ddpm_sample_core(const DenoiseFn& denoise, const DiffusionSchedule& sched,
                               const NoiseSequence& ns) {
  sched.validate();
  Tensor x = ns.x_init;
  for (int t = sched.T; t >= 1; --t) {
    Tensor eps_hat = denoise(x, t);
    require_same_shape(eps_hat, x, "ddpm denoiser output");
    double beta = sched.beta_at(t);
    double ab = sched.alpha_bar[static_cast<size_t>(t)];
    double ab_prev = sched.alpha_bar[static_cast<size_t>(t - 1)];
    double x0_from_x = 1.0 / std::sqrt(ab);
    double x0_from_eps = std::sqrt(1.0 - ab) / std::sqrt(ab);
    double mean_from_x0 = std::sqrt(ab_prev) * beta / (1.0 - ab);
    double mean_from_x = std::sqrt(1.0 - beta) * (1.0 - ab_prev) / (1.0 - ab);
    double sd = t > 1 ? std::sqrt(sched.beta_tilde(t)) : 0.0;
    const Tensor& z = ns.z[static_cast<size_t>(t - 1)];
    require_same_shape(z, x, "ddpm noise sequence");
    for (int64_t i = 0; i < x.numel(); ++i) {
      size_t k = static_cast<size_t>(i);
      double x0_hat = x0_from_x * x.vec()[k] - x0_from_eps * eps_hat.vec()[k];
      x0_hat = std::clamp(x0_hat, -kDenoisedClip, kDenoisedClip);
      x.vec()[k] = mean_from_x0 * x0_hat + mean_from_x * x.vec()[k] + sd * z.vec()[k];
    }
    x.check_finite("ddpm_sample");
  }
  return x;
}

inline DenoiseFn make_ik_denoiser(IkParams& p, const ModelConfig& cfg, const Tensor& z_now,
                                  const Tensor& z_next) {
  return [&p, cfg, z_now, z_next](const Tensor& x_t, int t) {
    return ik_denoise(p, cfg, x_t, t, z_now, z_next);
  };
}

// Sample one trajectory (meters) for given condition tokens.
inline Trajectory ddpm_sample(IkParams& p, const ModelConfig& cfg, const Tensor& z_now,
                              const Tensor& z_next, const DiffusionSchedule& sched, uint64_t seed) {
  NoiseSequence ns = draw_noise_sequence(sched, {cfg.horizon_steps, 2}, Rng(seed).split(0));
  Tensor x0 = ddpm_sample_core(make_ik_denoiser(p, cfg, z_now, z_next), sched, ns);
  return denormalize_traj(x0, cfg.traj_scale);
}

struct PairedSample {
  Trajectory a;
  Trajectory b;
};

// K reverse chains per condition; chain k of condition A shares its entire
// noise sequence with chain k of condition B, so the output difference
// isolates the condition change. Returns per-condition mean trajectories.
inline PairedSample paired_sample(IkParams& p, const ModelConfig& cfg, const Tensor& z_now_a,
                                  const Tensor& z_next_a, const Tensor& z_now_b,
                                  const Tensor& z_next_b, const DiffusionSchedule& sched,
                                  uint64_t seed, int K) {
  if (K < 1) throw ArgumentError("paired_sample: K must be >= 1");
  Shape shape{cfg.horizon_steps, 2};
  Tensor sum_a(shape), sum_b(shape);
  DenoiseFn da = make_ik_denoiser(p, cfg, z_now_a, z_next_a);
  DenoiseFn db = make_ik_denoiser(p, cfg, z_now_b, z_next_b);
  for (int k = 1; k <= K; ++k) {
    NoiseSequence ns = draw_noise_sequence(sched, shape, Rng(seed).split(static_cast<uint64_t>(k)));
    Tensor xa = ddpm_sample_core(da, sched, ns);
    Tensor xb = ddpm_sample_core(db, sched, ns);
    for (int64_t i = 0; i < xa.numel(); ++i) {
      sum_a.vec()[static_cast<size_t>(i)] += xa.vec()[static_cast<size_t>(i)];
      sum_b.vec()[static_cast<size_t>(i)] += xb.vec()[static_cast<size_t>(i)];
    }
  }
  for (int64_t i = 0; i < sum_a.numel(); ++i) {
    sum_a.vec()[static_cast<size_t>(i)] /= K;
    sum_b.vec()[static_cast<size_t>(i)] /= K;
  }
  return {denormalize_traj(sum_a, cfg.traj_scale), denormalize_traj(sum_b, cfg.traj_scale)};
}

}  // namespace ikdrive
