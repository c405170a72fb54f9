#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <vector>

#include <catch2/catch_amalgamated.hpp>

#include "ikdrive/analysis.hpp"

using namespace ikdrive;

namespace {

ModelConfig tiny_model_config(const WorldConfig& wc) {
  ModelConfig mc;
  mc.grid_h = wc.grid_h;
  mc.grid_w = wc.grid_w;
  mc.grid_d = 16;
  mc.sky_rows = wc.sky_rows;
  mc.horizon_steps = wc.horizon_steps;
  mc.d_backbone = 8;
  mc.backbone_blocks = 1;
  mc.backbone_heads = 2;
  mc.d_ik = 12;
  mc.ik_heads = 2;
  mc.mlp_hidden = 9;
  return mc;
}

Trajectory straight_line(int n, double x, double step_y) {
  Trajectory t;
  for (int k = 1; k <= n; ++k) t.points.push_back({x, step_y * k});
  return t;
}

// Episode whose ego gap is exactly `gap`: a stationary ego extrapolates to the
// origin, and every ground-truth waypoint sits `gap` meters away.
Episode gap_episode(double gap, uint64_t seed) {
  Episode ep;
  ep.ego = EgoStatus{};  // vy = 0: extrapolation stays at the origin
  ep.seed = seed;
  for (int k = 0; k < 4; ++k) ep.traj_gt.points.push_back({gap, 0.0});
  return ep;
}

double ap_oracle(const std::vector<double>& s, const std::vector<uint8_t>& l) {
  std::vector<double> thr = s;
  std::sort(thr.begin(), thr.end(), std::greater<>());
  thr.erase(std::unique(thr.begin(), thr.end()), thr.end());
  double pos = 0.0;
  for (uint8_t v : l) pos += v != 0;
  double ap = 0.0, prev_r = 0.0;
  for (double t : thr) {
    double tp = 0.0, fp = 0.0;
    for (size_t i = 0; i < s.size(); ++i)
      if (s[i] >= t) {
        if (l[i] != 0)
          tp += 1.0;
        else
          fp += 1.0;
      }
    double r = tp / pos;
    ap += (r - prev_r) * (tp / (tp + fp));
    prev_r = r;
  }
  return ap;
}

}  // namespace

TEST_CASE("endpoint metrics: identical, shifted, and recomputed trajectories") {
  Trajectory gt = straight_line(6, 0.0, 1.5);
  EndpointMetrics zero = endpoint_metrics(gt, gt);
  CHECK(zero.l2_1s == 0.0);
  CHECK(zero.l2_2s == 0.0);
  CHECK(zero.l2_3s == 0.0);
  CHECK(zero.ade == 0.0);

  Trajectory shifted = gt;
  for (Vec2& p : shifted.points) p.x += 1.0;
  EndpointMetrics one = endpoint_metrics(shifted, gt);
  CHECK(one.l2_1s == Catch::Approx(1.0).margin(1e-15));
  CHECK(one.l2_2s == Catch::Approx(1.0).margin(1e-15));
  CHECK(one.l2_3s == Catch::Approx(1.0).margin(1e-15));
  CHECK(one.ade == Catch::Approx(1.0).margin(1e-15));

  Rng rng(501);
  for (int it = 0; it < 25; ++it) {
    Trajectory a, b;
    for (int k = 0; k < 6; ++k) {
      a.points.push_back({rng.next_gaussian() * 3.0, rng.next_gaussian() * 3.0});
      b.points.push_back({rng.next_gaussian() * 3.0, rng.next_gaussian() * 3.0});
    }
    EndpointMetrics m = endpoint_metrics(a, b);
    auto d = [&](int i) { return std::sqrt(dist2(a.points[static_cast<size_t>(i)], b.points[static_cast<size_t>(i)])); };
    double acc = 0.0;
    for (int i = 0; i < 6; ++i) acc += d(i);
    CHECK(std::abs(m.l2_1s - d(1)) < 1e-12);
    CHECK(std::abs(m.l2_2s - d(3)) < 1e-12);
    CHECK(std::abs(m.l2_3s - d(5)) < 1e-12);
    CHECK(std::abs(m.ade - acc / 6.0) < 1e-12);
    CHECK(std::abs(endpoint_l2(a, b) - d(5)) < 1e-12);
  }

  // Short horizons leave the unreachable columns undefined.
  Trajectory short_t = straight_line(4, 0.0, 1.0);
  EndpointMetrics sm = endpoint_metrics(short_t, short_t);
  CHECK(std::isfinite(sm.l2_2s));
  CHECK(std::isnan(sm.l2_3s));

  CHECK_THROWS_AS(endpoint_metrics(straight_line(5, 0, 1), gt), ShapeError);
  CHECK_THROWS_AS(endpoint_metrics(Trajectory{}, Trajectory{}), ArgumentError);
}

TEST_CASE("collision proxy: static, moving, tangent, and distractor obstacles") {
  Trajectory traj = straight_line(6, 0.0, 2.0);  // waypoint k at (0, 2k), time 0.5k
  Scene empty;
  CHECK(collision_proxy(traj, empty) == 0);

  Scene hit;
  hit.obstacles.push_back({0.0, 4.0, 0.5, 0.0, 0.0, ObstacleKind::vehicle});
  CHECK(collision_proxy(traj, hit) == 1);

  Scene tangent;
  tangent.obstacles.push_back({0.0, 4.5, 0.5, 0.0, 0.0, ObstacleKind::vehicle});
  CHECK(collision_proxy(traj, tangent) == 0);  // boundary contact is not interior

  Scene inside;
  inside.obstacles.push_back({0.0, 4.4, 0.5, 0.0, 0.0, ObstacleKind::pedestrian});
  CHECK(collision_proxy(traj, inside) == 1);

  // Oncoming obstacle crosses waypoint 2 (time 1.0 s) exactly when the ego does.
  Scene moving;
  moving.obstacles.push_back({0.0, 8.0, 0.5, 0.0, -4.0, ObstacleKind::vehicle});
  CHECK(collision_proxy(traj, moving) == 1);
  Scene receding;
  receding.obstacles.push_back({0.0, 8.0, 0.5, 0.0, 4.0, ObstacleKind::vehicle});
  CHECK(collision_proxy(traj, receding) == 0);

  Scene distractor;
  distractor.obstacles.push_back({0.0, 4.0, 2.0, 0.0, 0.0, ObstacleKind::sky_distractor});
  CHECK(collision_proxy(traj, distractor) == 0);

  CHECK_THROWS_AS(collision_proxy(traj, empty, 0.0), ArgumentError);
}

TEST_CASE("ego gap: exact-zero construction, hand offset, recomputation") {
  // Noise-free clear episodes whose command matches the current motion: the
  // kinematic extrapolation reproduces the target exactly.
  WorldConfig wc;
  wc.sigma_xi = 0.0;
  EgoStatus straight;
  straight.vy = 4.0;
  for (uint64_t s : {11ull, 12ull, 13ull}) {
    Episode ep = make_episode_at(wc, straight, Command::forward, s).episode;
    REQUIRE(ep.indicator == 0);
    CHECK(ego_gap(ep, wc.dt) < 1e-12);
  }
  EgoStatus turning;
  turning.vy = 4.0;
  turning.yaw_rate = 0.3;
  Episode ept = make_episode_at(wc, turning, Command::forward, 14).episode;
  CHECK(ego_gap(ept, wc.dt) < 1e-12);

  // Uniform 1 m offset -> gap exactly 1.
  Episode off;
  off.ego.vy = 2.0;
  off.traj_gt = ego_extrapolate(off.ego, 6, 0.5);
  for (Vec2& p : off.traj_gt.points) p.x += 1.0;
  CHECK(ego_gap(off) == Catch::Approx(1.0).margin(1e-12));

  // Random episode: matches a direct recomputation.
  WorldConfig wr;
  Episode er = make_episode(wr, 99);
  Trajectory ex = ego_extrapolate(er.ego, wr.horizon_steps, wr.dt);
  double acc = 0.0;
  for (size_t i = 0; i < ex.size(); ++i) acc += std::sqrt(dist2(ex.points[i], er.traj_gt.points[i]));
  CHECK(ego_gap(er, wr.dt) == Catch::Approx(acc / 6.0).margin(1e-12));
  CHECK(ego_gap(er, wr.dt) >= 0.0);

  std::vector<Episode> eps{off, er};
  fill_ego_gaps(eps, 0.5);
  CHECK(eps[0].ego_gap == Catch::Approx(1.0).margin(1e-12));
}

TEST_CASE("stratify: hand gaps, seed tie-breaks, bounds") {
  // Gaps 1..10 shuffled; bottom 30% must be the 1,2,3 episodes, top 30% the
  // 8,9,10 episodes, regardless of input order.
  std::vector<double> gaps{5, 1, 8, 3, 10, 2, 9, 4, 7, 6};
  std::vector<Episode> eps;
  for (size_t i = 0; i < gaps.size(); ++i) eps.push_back(gap_episode(gaps[i], 1000 + i));
  StratifyResult r = stratify(eps);
  REQUIRE(r.ego_dominated.size() == 3);
  REQUIRE(r.vision_critical.size() == 3);
  std::vector<double> low, high;
  for (size_t i : r.ego_dominated) low.push_back(gaps[i]);
  for (size_t i : r.vision_critical) high.push_back(gaps[i]);
  std::sort(low.begin(), low.end());
  std::sort(high.begin(), high.end());
  CHECK(low == std::vector<double>{1, 2, 3});
  CHECK(high == std::vector<double>{8, 9, 10});
  CHECK(r.low_threshold == Catch::Approx(3.0).margin(1e-12));
  CHECK(r.high_threshold == Catch::Approx(8.0).margin(1e-12));

  // Disjointness.
  for (size_t a : r.ego_dominated)
    for (size_t b : r.vision_critical) CHECK(a != b);

  // All-equal gaps: the seed decides, deterministically.
  std::vector<uint64_t> seeds{31, 7, 99, 2, 55, 40};
  std::vector<Episode> tied;
  for (uint64_t s : seeds) tied.push_back(gap_episode(2.0, s));
  StratifyResult t = stratify(tied, 1.0 / 3.0, 1.0 / 3.0);
  REQUIRE(t.ego_dominated.size() == 2);
  REQUIRE(t.vision_critical.size() == 2);
  std::vector<uint64_t> low_seeds{seeds[t.ego_dominated[0]], seeds[t.ego_dominated[1]]};
  std::vector<uint64_t> high_seeds{seeds[t.vision_critical[0]], seeds[t.vision_critical[1]]};
  std::sort(low_seeds.begin(), low_seeds.end());
  std::sort(high_seeds.begin(), high_seeds.end());
  CHECK(low_seeds == std::vector<uint64_t>{2, 7});
  CHECK(high_seeds == std::vector<uint64_t>{55, 99});

  CHECK_THROWS_AS(stratify({}), ArgumentError);
  CHECK_THROWS_AS(stratify(eps, 0.0, 0.3), ArgumentError);
  CHECK_THROWS_AS(stratify(eps, 0.6, 0.6), ArgumentError);
}

TEST_CASE("epsilon estimator: endpoints, monotonicity, hand fraction") {
  std::vector<Episode> eps;
  for (int g = 1; g <= 10; ++g) eps.push_back(gap_episode(static_cast<double>(g), static_cast<uint64_t>(g)));
  CHECK(estimate_epsilon(eps, 0.0) == 1.0);
  CHECK(estimate_epsilon(eps, std::numeric_limits<double>::infinity()) == 0.0);
  CHECK(estimate_epsilon(eps, 5.0) == Catch::Approx(0.6).margin(1e-15));
  CHECK(estimate_epsilon(eps, 10.0) == Catch::Approx(0.1).margin(1e-15));

  double prev = 2.0;
  for (double tau : {0.0, 0.5, 2.0, 2.14, 5.0, 7.5, 11.0}) {
    double e = estimate_epsilon(eps, tau);
    CHECK(e <= prev);
    prev = e;
  }

  CHECK_THROWS_AS(estimate_epsilon({}, 1.0), ArgumentError);
  CHECK_THROWS_AS(estimate_epsilon(eps, -1.0), ArgumentError);
}

TEST_CASE("sigma_v estimator: zero variance, two-pass oracle, command identity") {
  auto grid_with = [](const std::vector<double>& vals) {
    VisualTokenGrid g(2, 2, 2, 1);
    g.data = vals;
    return g;
  };
  auto episode_with = [&](const std::vector<double>& vals, Command c) {
    Episode ep;
    ep.v_future = grid_with(vals);
    ep.command = c;
    return ep;
  };

  // Identical futures: every variance is zero.
  std::vector<double> base{1, 2, 3, 4, 5, 6, 7, 8};
  std::vector<Episode> flat;
  for (Command c : {Command::left, Command::forward, Command::right})
    for (int i = 0; i < 2; ++i) flat.push_back(episode_with(base, c));
  SigmaVReport zr = estimate_sigma_v(flat);
  CHECK(zr.marginal == 0.0);
  CHECK(zr.conditional == 0.0);
  CHECK(zr.between == 0.0);

  // Random set vs a two-pass recomputation.
  Rng rng(502);
  std::vector<Episode> eps;
  std::vector<Command> cmds{Command::left,    Command::left,    Command::left,
                            Command::forward, Command::forward, Command::forward,
                            Command::forward, Command::right,   Command::right};
  for (Command c : cmds) {
    std::vector<double> vals(8);
    double shift = 3.0 * static_cast<double>(static_cast<int>(c));  // command moves the mean
    for (double& v : vals) v = shift + rng.next_gaussian();
    eps.push_back(episode_with(vals, c));
  }
  SigmaVReport r = estimate_sigma_v(eps);

  auto two_pass = [&](const std::vector<const Episode*>& set) {
    double acc = 0.0;
    for (size_t j = 0; j < 8; ++j) {
      double mean = 0.0;
      for (const Episode* e : set) mean += e->v_future.data[j];
      mean /= static_cast<double>(set.size());
      double var = 0.0;
      for (const Episode* e : set) var += (e->v_future.data[j] - mean) * (e->v_future.data[j] - mean);
      acc += var / static_cast<double>(set.size());
    }
    return acc / 8.0;
  };
  std::vector<const Episode*> all;
  std::array<std::vector<const Episode*>, 3> per;
  for (const Episode& e : eps) {
    all.push_back(&e);
    per[static_cast<size_t>(e.command)].push_back(&e);
  }
  CHECK(r.marginal == Catch::Approx(two_pass(all)).epsilon(1e-10));
  double cond = 0.0;
  for (size_t c = 0; c < 3; ++c) {
    CHECK(r.per_command[c] == Catch::Approx(two_pass(per[c])).epsilon(1e-10));
    cond += static_cast<double>(per[c].size()) / static_cast<double>(eps.size()) * two_pass(per[c]);
  }
  CHECK(r.conditional == Catch::Approx(cond).epsilon(1e-10));
  CHECK(r.between == Catch::Approx(r.marginal - r.conditional).margin(1e-12));
  CHECK(r.between >= 0.0);
  CHECK(r.between > 0.1);  // the planted command shift must show up
  CHECK(r.command_count == std::array<int64_t, 3>{3, 4, 2});

  // A command with a single episode is rejected; an absent command is fine.
  std::vector<Episode> lone = {episode_with(base, Command::left), episode_with(base, Command::left),
                               episode_with(base, Command::right)};
  CHECK_THROWS_AS(estimate_sigma_v(lone), ArgumentError);
  std::vector<Episode> two_only = {episode_with(base, Command::left), episode_with(base, Command::left)};
  SigmaVReport ok = estimate_sigma_v(two_only);
  CHECK(ok.command_count[static_cast<size_t>(Command::forward)] == 0);

  CHECK_THROWS_AS(estimate_sigma_v({}), ArgumentError);
  std::vector<Episode> bad = two_only;
  bad.push_back(episode_with(base, Command::left));
  bad.back().v_future = VisualTokenGrid(2, 2, 3, 1);
  CHECK_THROWS_AS(estimate_sigma_v(bad), ShapeError);
}

TEST_CASE("saliency: masked-vision zero map, determinism, finite differences") {
  WorldConfig wc;
  ModelConfig mc = tiny_model_config(wc);
  DiffusionSchedule sched = cosine_schedule(8);
  Episode ep = make_episode(wc, 7);

  ModelSet vfree = init_model_set(Variant::v_free, mc, 5);
  SaliencyMap zero = saliency_map(vfree, ep, sched, 11);
  for (double v : zero.data) CHECK(v == 0.0);

  ModelSet ours = init_model_set(Variant::ours, mc, 3);
  SaliencyMap a = saliency_map(ours, ep, sched, 11);
  SaliencyMap b = saliency_map(ours, ep, sched, 11);
  CHECK(a.data == b.data);
  SaliencyMap c = saliency_map(ours, ep, sched, 12);
  CHECK(a.data != c.data);  // the noise draw enters the scalar

  double lo = *std::min_element(a.data.begin(), a.data.end());
  double hi = *std::max_element(a.data.begin(), a.data.end());
  CHECK(lo == 0.0);
  CHECK(hi == 1.0);
  for (double v : a.data) CHECK((v >= 0.0 && v <= 1.0));

  // Finite-difference check of the input gradient, on mass-carrying entries.
  auto fd_check = [&](ModelSet& m, int n_probes) {
    SaliencyGrad g = saliency_gradient(m, ep, sched, 11);
    std::vector<size_t> order(g.grad.vec().size());
    std::iota(order.begin(), order.end(), size_t{0});
    std::sort(order.begin(), order.end(), [&](size_t x, size_t y) {
      return std::abs(g.grad.vec()[x]) > std::abs(g.grad.vec()[y]);
    });
    double h = 1e-4;
    for (int p = 0; p < n_probes; ++p) {
      size_t idx = order[static_cast<size_t>(p) * 37];  // spread over the top entries
      Episode up = ep, dn = ep;
      up.v_now.data[idx] += h;
      dn.v_now.data[idx] -= h;
      double fd = (saliency_gradient(m, up, sched, 11).scalar -
                   saliency_gradient(m, dn, sched, 11).scalar) /
                  (2.0 * h);
      double want = g.grad.vec()[idx];
      CHECK(std::abs(fd - want) / std::max({std::abs(fd), std::abs(want), 1e-12}) < 1e-4);
    }
  };
  fd_check(ours, 5);
  ModelSet direct = init_model_set(Variant::direct, mc, 6);
  fd_check(direct, 2);
  ModelSet mlp = init_model_set(Variant::mlp_head, mc, 7);
  fd_check(mlp, 2);
  ModelSet pool = init_model_set(Variant::pool_head, mc, 8);
  fd_check(pool, 2);
}

TEST_CASE("grounding metrics: hand cases, brute-force oracle, invariances") {
  auto map_of = [](int h, int w, std::vector<double> vals) {
    SaliencyMap s;
    s.h = h;
    s.w = w;
    s.data = std::move(vals);
    return s;
  };

  // Uniform map: PM equals the mask coverage.
  SaliencyMap uni = map_of(2, 2, {0.5, 0.5, 0.5, 0.5});
  GroundingMetrics gu = grounding_metrics(uni, {1, 0, 0, 0});
  CHECK(gu.pm == Catch::Approx(0.25).margin(1e-15));

  // All mass inside the mask.
  SaliencyMap in = map_of(2, 2, {0.9, 0.4, 0.0, 0.0});
  GroundingMetrics gi = grounding_metrics(in, {1, 1, 0, 0});
  CHECK(gi.pm == Catch::Approx(1.0).margin(1e-15));
  REQUIRE(gi.ap.has_value());
  CHECK(gi.ap.value() == Catch::Approx(1.0).margin(1e-15));

  GroundingMetrics ge = grounding_metrics(in, {0, 0, 0, 0});
  CHECK_FALSE(ge.ap.has_value());
  CHECK(ge.pm == 0.0);

  CHECK_THROWS_AS(grounding_metrics(in, {1, 0, 0}), ShapeError);

  Rng rng(503);
  for (int it = 0; it < 120; ++it) {
    size_t n = 36;
    std::vector<double> s(n);
    std::vector<uint8_t> mask(n);
    for (double& v : s) v = 0.2 * static_cast<double>(rng.next_below(6));
    for (uint8_t& v : mask) v = static_cast<uint8_t>(rng.next_below(3) == 0);
    SaliencyMap m = map_of(6, 6, s);
    GroundingMetrics g = grounding_metrics(m, mask);

    double tot = 0.0, inside = 0.0;
    for (size_t i = 0; i < n; ++i) {
      tot += s[i];
      if (mask[i]) inside += s[i];
    }
    double pm_want = tot > 0.0 ? inside / tot : 0.0;
    CHECK(std::abs(g.pm - pm_want) < 1e-9);
    CHECK((g.pm >= 0.0 && g.pm <= 1.0));

    bool any_pos = std::any_of(mask.begin(), mask.end(), [](uint8_t v) { return v != 0; });
    REQUIRE(g.ap.has_value() == any_pos);
    if (any_pos) {
      CHECK(std::abs(g.ap.value() - ap_oracle(s, mask)) < 1e-9);
      CHECK((g.ap.value() >= 0.0 && g.ap.value() <= 1.0));
    }

    std::vector<double> sorted = s;
    std::sort(sorted.begin(), sorted.end());
    double p80 = sorted[static_cast<size_t>(std::ceil(0.8 * static_cast<double>(n))) - 1];
    double tp = 0, fp = 0, fn = 0;
    for (size_t i = 0; i < n; ++i) {
      bool pred = s[i] > p80, pos = mask[i] != 0;
      tp += pred && pos;
      fp += pred && !pos;
      fn += !pred && pos;
    }
    double iou_want = tp + fp + fn > 0 ? tp / (tp + fp + fn) : 0.0;
    double f1_want = 2 * tp + fp + fn > 0 ? 2 * tp / (2 * tp + fp + fn) : 0.0;
    CHECK(std::abs(g.iou - iou_want) < 1e-9);
    CHECK(std::abs(g.f1 - f1_want) < 1e-9);
    CHECK(g.iou <= g.f1 + 1e-15);

    // Positive scaling leaves every metric unchanged.
    SaliencyMap scaled = m;
    for (double& v : scaled.data) v *= 7.25;
    GroundingMetrics gs = grounding_metrics(scaled, mask);
    CHECK(std::abs(gs.pm - g.pm) < 1e-12);
    CHECK(gs.iou == g.iou);
    CHECK(gs.f1 == g.f1);
    if (any_pos) CHECK(gs.ap.value() == g.ap.value());

    // AP only sees the ranking.
    SaliencyMap warped = m;
    for (double& v : warped.data) v = std::exp(2.0 * v);
    if (any_pos) CHECK(grounding_metrics(warped, mask).ap.value() == g.ap.value());
  }
}

TEST_CASE("stitching probe: zero-scale exactness, masked model, determinism") {
  WorldConfig wc;
  ModelConfig mc = tiny_model_config(wc);
  DiffusionSchedule sched = cosine_schedule(6);
  std::vector<Episode> eps{make_episode(wc, 21), make_episode(wc, 22)};
  std::vector<Placement> pls{Placement::near, Placement::far, Placement::sky_far};

  ModelSet ours = init_model_set(Variant::ours, mc, 3);
  StitchReport zero = stitching_probe(ours, eps, pls, {0.0, 0.0, 0.0}, wc, sched, 31, 1);
  REQUIRE(zero.rows.size() == 3);
  for (const auto& ds : zero.deltas)
    for (double d : ds) CHECK(d == 0.0);
  for (const StitchRow& row : zero.rows) {
    CHECK(row.n == 2);
    CHECK(row.mean_delta == 0.0);
    CHECK(row.mean_abs == 0.0);
    CHECK(row.median_abs == 0.0);
    CHECK(row.frac_below_1m == 1.0);
    CHECK(row.decel_ratio == 0.0);
  }
  REQUIRE(zero.has_paired_control);
  CHECK(zero.frac_far_exceeds_skyfar == 0.0);  // no strict exceedance among zeros
  CHECK(zero.paired_mean_delta == 0.0);
  CHECK(zero.paired_n == 2);

  // A vision-masked model cannot react to the stitched obstacle at any scale.
  ModelSet vfree = init_model_set(Variant::v_free, mc, 5);
  StitchReport blind = stitching_probe(vfree, eps, pls, {1.0, 1.0, 1.0}, wc, sched, 31, 1);
  for (const auto& ds : blind.deltas)
    for (double d : ds) CHECK(d == 0.0);

  // Deterministic with live scales, fractions well-formed.
  StitchReport r1 = stitching_probe(ours, eps, pls, {1.0, 0.5, 0.5}, wc, sched, 31, 2);
  StitchReport r2 = stitching_probe(ours, eps, pls, {1.0, 0.5, 0.5}, wc, sched, 31, 2);
  REQUIRE(r1.rows.size() == 3);
  for (size_t i = 0; i < 3; ++i) {
    CHECK(r1.deltas[i] == r2.deltas[i]);
    CHECK(r1.rows[i].mean_delta == r2.rows[i].mean_delta);
    CHECK((r1.rows[i].frac_below_1m >= 0.0 && r1.rows[i].frac_below_1m <= 1.0));
    CHECK((r1.rows[i].decel_ratio >= 0.0 && r1.rows[i].decel_ratio <= 1.0));
    CHECK(r1.rows[i].scale == (i == 0 ? 1.0 : 0.5));
    CHECK(r1.rows[i].placement == pls[i]);
  }
  CHECK((r1.frac_far_exceeds_skyfar >= 0.0 && r1.frac_far_exceeds_skyfar <= 1.0));

  // A generous dead band empties the deceleration count.
  StitchReport db = stitching_probe(ours, eps, {Placement::near}, {1.0}, wc, sched, 31, 1, 1e9);
  CHECK(db.rows[0].decel_ratio == 0.0);
  CHECK_FALSE(db.has_paired_control);

  // Deterministic families: zero scale keeps the prediction bit-identical.
  ModelSet direct = init_model_set(Variant::direct, mc, 6);
  StitchReport dz = stitching_probe(direct, eps, {Placement::near}, {0.0}, wc, sched, 31, 1);
  CHECK(dz.deltas[0][0] == 0.0);
  CHECK(dz.deltas[0][1] == 0.0);

  CHECK_THROWS_AS(stitching_probe(ours, eps, pls, {1.0}, wc, sched, 31, 1), ArgumentError);
  CHECK_THROWS_AS(stitching_probe(ours, {}, pls, {1.0, 1.0, 1.0}, wc, sched, 31, 1), ArgumentError);
  CHECK_THROWS_AS(stitching_probe(ours, eps, {}, {}, wc, sched, 31, 1), ArgumentError);
  CHECK_THROWS_AS(stitching_probe(ours, eps, pls, {1.0, 1.0, 1.0}, wc, sched, 31, 1, -0.1),
                  ArgumentError);
}

TEST_CASE("decomposition: exact zeros, shrinking residual, error paths") {
  WorldConfig wc;
  wc.sigma_xi = 0.5;
  ModelConfig mc = tiny_model_config(wc);
  DiffusionSchedule sched = cosine_schedule(6);
  ModelSet ours = init_model_set(Variant::ours, mc, 3);
  ModelSet vfree = init_model_set(Variant::v_free, mc, 4);
  EgoStatus e1;
  e1.vy = 4.0;
  EgoStatus e2;
  e2.vy = 2.5;
  e2.yaw_rate = 0.2;

  // The V-invariant model shares every bin condition bitwise, so its
  // prediction spread is exactly zero.
  std::vector<ConditionBin> small;
  small.push_back(make_condition_bin(wc, e1, Command::forward, 9, 101));
  DecompositionReport rv = decomposition_check(vfree, small, wc, sched, 55, 1);
  CHECK(rv.variance == 0.0);
  CHECK(rv.noise == Catch::Approx(2.0 * 6 * 0.25).margin(1e-15));
  CHECK(rv.total_n == 9);

  // Noise-free targets make the identity exact.
  WorldConfig wc0 = wc;
  wc0.sigma_xi = 0.0;
  std::vector<ConditionBin> clean;
  clean.push_back(make_condition_bin(wc0, e1, Command::forward, 9, 101));
  clean.push_back(make_condition_bin(wc0, e2, Command::left, 7, 303));
  DecompositionReport r0 = decomposition_check(ours, clean, wc0, sched, 55, 1);
  CHECK(r0.noise == 0.0);
  CHECK(r0.residual < 1e-12);
  CHECK(r0.variance > 0.0);
  DecompositionReport rv0 = decomposition_check(vfree, clean, wc0, sched, 55, 1);
  CHECK(rv0.variance == 0.0);
  CHECK(rv0.residual < 1e-12);

  // With execution noise the residual is Monte Carlo and shrinks with more
  // draws per bin (seed-pinned sizes with a verified margin).
  auto residual_at = [&](int n) {
    std::vector<ConditionBin> bins;
    bins.push_back(make_condition_bin(wc, e1, Command::forward, n, 101));
    bins.push_back(make_condition_bin(wc, e2, Command::left, n, 202));
    return decomposition_check(ours, bins, wc, sched, 55, 1).residual;
  };
  double r20 = residual_at(20);
  double r320 = residual_at(320);
  CHECK(r20 < 0.02);
  CHECK(r320 < 0.02);
  CHECK(r320 < r20);

  // Determinism.
  DecompositionReport d1 = decomposition_check(ours, clean, wc0, sched, 55, 1);
  DecompositionReport d2 = decomposition_check(ours, clean, wc0, sched, 55, 1);
  CHECK(d1.bias2 == d2.bias2);
  CHECK(d1.variance == d2.variance);
  CHECK(d1.lhs == d2.lhs);

  // Error paths: empty, under-populated, foreign episode, corrected episode.
  CHECK_THROWS_AS(decomposition_check(ours, {}, wc, sched, 55, 1), ArgumentError);
  std::vector<ConditionBin> thin;
  thin.push_back(make_condition_bin(wc, e1, Command::forward, 3, 101));
  CHECK_THROWS_AS(decomposition_check(ours, thin, wc, sched, 55, 1, 4), ArgumentError);
  std::vector<ConditionBin> foreign = clean;
  foreign[0].episodes[0].command = Command::right;
  CHECK_THROWS_AS(decomposition_check(ours, foreign, wc0, sched, 55, 1), ArgumentError);
  std::vector<ConditionBin> corrected = clean;
  corrected[0].episodes[0].indicator = 1;
  CHECK_THROWS_AS(decomposition_check(ours, corrected, wc0, sched, 55, 1), ArgumentError);
  CHECK_THROWS_AS(make_condition_bin(wc, e1, Command::forward, 0, 1), ArgumentError);
}

TEST_CASE("nsp correlation: bounds, determinism, quartile bookkeeping, errors") {
  WorldConfig wc;
  ModelConfig mc = tiny_model_config(wc);
  DiffusionSchedule sched = cosine_schedule(6);
  ModelSet ours = init_model_set(Variant::ours, mc, 3);
  std::vector<Episode> eps;
  for (uint64_t s = 40; s < 46; ++s) eps.push_back(make_episode(wc, s));

  NspTrajReport r = nsp_traj_correlation(ours, eps, sched, 71, 1);
  REQUIRE(r.nsp.size() == 6);
  for (double v : r.nsp) CHECK(v >= 0.0);
  for (const CorrelationPair* cp : {&r.l2_1s, &r.l2_2s, &r.l2_3s, &r.ade}) {
    CHECK(std::abs(cp->pearson.coefficient) <= 1.0 + 1e-12);
    CHECK(std::abs(cp->spearman.coefficient) <= 1.0 + 1e-12);
    CHECK((cp->pearson.p_value >= 0.0 && cp->pearson.p_value <= 1.0));
    CHECK((cp->spearman.p_value >= 0.0 && cp->spearman.p_value <= 1.0));
  }
  int64_t total = 0;
  double prev_mean = -1.0;
  for (const NspQuartileRow& q : r.quartiles) {
    total += q.n;
    CHECK(q.n >= 1);
    CHECK(q.mean_nsp >= prev_mean);  // ascending next-state MSE
    prev_mean = q.mean_nsp;
  }
  CHECK(total == 6);

  NspTrajReport r2 = nsp_traj_correlation(ours, eps, sched, 71, 1);
  CHECK(r.nsp == r2.nsp);
  CHECK(r.l2_3s.pearson.coefficient == r2.l2_3s.pearson.coefficient);

  ModelSet direct = init_model_set(Variant::direct, mc, 6);
  CHECK_THROWS_AS(nsp_traj_correlation(direct, eps, sched, 71, 1), ArgumentError);
  std::vector<Episode> few(eps.begin(), eps.begin() + 3);
  CHECK_THROWS_AS(nsp_traj_correlation(ours, few, sched, 71, 1), ArgumentError);
}

TEST_CASE("variant comparison: identical models, planted signal, characteristics") {
  WorldConfig wc;
  ModelConfig mc = tiny_model_config(wc);
  DiffusionSchedule sched = cosine_schedule(6);

  // Characteristics of a hand-built scene.
  Scene sc;
  sc.ego.vx = 1.0;
  sc.ego.vy = 3.0;
  sc.ego.yaw_rate = -0.25;
  sc.obstacles.push_back({0.5, 5.0, 1.0, 0, 0, ObstacleKind::vehicle});        // in corridor
  sc.obstacles.push_back({8.0, 3.0, 0.5, 0, 0, ObstacleKind::vehicle});        // off to the side
  sc.obstacles.push_back({0.0, -2.0, 1.0, 0, 0, ObstacleKind::pedestrian});    // behind
  sc.obstacles.push_back({0.0, 4.0, 2.0, 0, 0, ObstacleKind::sky_distractor});  // not an object
  sc.obstacles.push_back({0.0, 9.0, 1.0, 0, 0, ObstacleKind::vehicle});        // in corridor, farther
  SceneCharacteristics ch = scene_characteristics(sc, wc);
  CHECK(ch.yaw_rate_abs == Catch::Approx(0.25).margin(1e-15));
  CHECK(ch.speed == Catch::Approx(std::hypot(1.0, 3.0)).margin(1e-15));
  CHECK(ch.front_count == 2.0);
  CHECK(ch.min_front_distance == Catch::Approx(std::hypot(0.5, 5.0)).margin(1e-12));
  Scene empty_sc;
  CHECK(scene_characteristics(empty_sc, wc).min_front_distance == wc.y_max);
  CHECK(scene_characteristics(empty_sc, wc).front_count == 0.0);

  // Identical models: all deltas zero, flagged degenerate.
  std::vector<EpisodeBundle> bundles;
  for (uint64_t s = 60; s < 64; ++s) bundles.push_back(make_episode_full(wc, s));
  ModelSet a = init_model_set(Variant::direct, mc, 6);
  ModelSet b = init_model_set(Variant::direct, mc, 6);
  VariantComparison same = compare_variants(a, b, bundles, wc, sched, 81, 1);
  for (double d : same.delta) CHECK(d == 0.0);
  CHECK(same.degenerate);
  CHECK(same.group_size == 1);
  for (const CharacteristicRow& row : same.characteristics) CHECK((row.p >= 0.0 && row.p <= 1.0));

  ModelSet wide = init_model_set(Variant::direct, ModelConfig{mc.grid_h + 1, mc.grid_w, mc.grid_d,
                                                              mc.sky_rows, mc.horizon_steps,
                                                              mc.d_backbone, mc.backbone_blocks,
                                                              mc.backbone_heads, mc.d_ik, mc.ik_heads,
                                                              mc.mlp_hidden},
                                 9);
  CHECK_THROWS_AS(compare_variants(a, wide, bundles, wc, sched, 81, 1), ConfigError);

  // Planted signal: the top-delta group carries high yaw rates; the grouping
  // must recover exactly that characteristic as significant.
  std::vector<EpisodeBundle> planted(20);
  std::vector<double> delta(20);
  for (size_t i = 0; i < 20; ++i) {
    planted[i].scene.ego.vy = 3.0;  // equal speeds
    bool top = i < 10;
    planted[i].scene.ego.yaw_rate = top ? 0.3 : 0.005;
    delta[i] = (top ? 1.0 : -1.0) + 0.01 * static_cast<double>(i);
  }
  VariantComparison vc = delta_group_report(delta, planted, wc, 0.25);
  CHECK(vc.group_size == 5);
  CHECK_FALSE(vc.degenerate);
  CHECK(vc.top_threshold > vc.bottom_threshold);
  const CharacteristicRow* yaw = nullptr;
  for (const CharacteristicRow& row : vc.characteristics)
    if (row.name == "ego_yaw_rate_abs") yaw = &row;
  REQUIRE(yaw != nullptr);
  CHECK(yaw->mean_top == Catch::Approx(0.3).margin(1e-12));
  CHECK(yaw->mean_bottom == Catch::Approx(0.005).margin(1e-12));
  CHECK(yaw->p < 0.05);
  for (const CharacteristicRow& row : vc.characteristics)
    if (row.name != "ego_yaw_rate_abs") CHECK(row.p == 1.0);  // everything else is tied

  CHECK_THROWS_AS(delta_group_report(delta, planted, wc, 0.0), ArgumentError);
  CHECK_THROWS_AS(delta_group_report({1.0, 2.0}, planted, wc, 0.25), ArgumentError);
  std::vector<EpisodeBundle> three(bundles.begin(), bundles.begin() + 3);
  CHECK_THROWS_AS(compare_variants(a, b, three, wc, sched, 81, 1), ArgumentError);
}
