#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <limits>
#include <map>
#include <sstream>

#include "ikdrive/trainer.hpp"

using namespace ikdrive;

namespace {

ModelConfig small_config() {
  ModelConfig c;
  c.grid_h = 5;
  c.grid_w = 4;
  c.grid_d = 6;
  c.sky_rows = 2;
  c.horizon_steps = 4;
  c.d_backbone = 8;
  c.backbone_blocks = 1;
  c.backbone_heads = 2;
  c.d_ik = 12;
  c.ik_heads = 2;
  c.mlp_hidden = 9;
  return c;
}

Episode synth_episode(const ModelConfig& c, uint64_t seed) {
  Rng rng(seed);
  Episode ep;
  ep.v_now = VisualTokenGrid(c.grid_h, c.grid_w, c.grid_d, c.sky_rows);
  ep.v_future = VisualTokenGrid(c.grid_h, c.grid_w, c.grid_d, c.sky_rows);
  for (double& v : ep.v_now.data) v = 0.5 * rng.next_gaussian();
  for (double& v : ep.v_future.data) v = 0.5 * rng.next_gaussian();
  ep.ego.vy = rng.next_range(2.0, 6.0);
  ep.ego.vx = rng.next_range(-0.3, 0.3);
  ep.ego.yaw_rate = rng.next_range(-0.1, 0.1);
  ep.command = static_cast<Command>(rng.next_below(3));
  for (int k = 0; k < c.horizon_steps; ++k)
    ep.traj_gt.points.push_back({rng.next_range(-2.0, 2.0), 2.5 * (k + 1)});
  ep.seed = seed;
  return ep;
}

std::vector<Episode> synth_dataset(const ModelConfig& c, int n, uint64_t seed) {
  std::vector<Episode> out;
  for (int i = 0; i < n; ++i) out.push_back(synth_episode(c, seed + static_cast<uint64_t>(i)));
  return out;
}

std::map<std::string, Tensor> snapshot(ModelSet& m) {
  std::map<std::string, Tensor> out;
  for (auto& [name, t] : m.entries()) out.emplace(name, *t);
  return out;
}

// Names (with a given prefix) whose tensors changed vs. the snapshot.
int changed_count(ModelSet& m, const std::map<std::string, Tensor>& before, const std::string& prefix) {
  int changed = 0;
  for (auto& [name, t] : m.entries()) {
    if (name.rfind(prefix, 0) != 0) continue;
    const Tensor& old = before.at(name);
    bool same = true;
    for (int64_t i = 0; i < t->numel(); ++i)
      if (t->vec()[static_cast<size_t>(i)] != old.vec()[static_cast<size_t>(i)]) same = false;
    if (!same) ++changed;
  }
  return changed;
}

int total_count(ModelSet& m, const std::string& prefix) {
  int n = 0;
  for (auto& [name, t] : m.entries())
    if (name.rfind(prefix, 0) == 0) ++n;
  return n;
}

StepRecord one_step(ModelSet& m, const std::vector<Episode>& eps, const TrainConfig& tc) {
  OptState opt = make_opt_state(m);
  DiffusionSchedule sched = cosine_schedule(tc.diffusion_steps);
  Rng rng = Rng(tc.seed).split(5);
  std::vector<const Episode*> batch;
  for (const Episode& e : eps) batch.push_back(&e);
  return joint_step(m, opt, batch, tc, sched, rng);
}

}  // namespace

TEST_CASE("learning rate schedule: zero start, linear warmup, cosine tail") {
  TrainConfig tc;
  tc.steps = 200;  // warmup_ratio 0.145 -> 29 warmup steps
  CHECK(lr_schedule(tc, 0) == 0.0);
  CHECK(lr_schedule(tc, 1) == 1.0 / 29.0);
  CHECK(lr_schedule(tc, 15) == 15.0 / 29.0);
  CHECK(lr_schedule(tc, 29) == 1.0);
  CHECK(lr_schedule(tc, 30) ==
        0.5 * (1.0 + std::cos(3.141592653589793 * (1.0 / 171.0))));
  CHECK(lr_schedule(tc, 115) ==
        0.5 * (1.0 + std::cos(3.141592653589793 * (86.0 / 171.0))));
  CHECK(lr_schedule(tc, 200) == 0.0);

  for (int64_t s = 1; s <= 29; ++s) CHECK(lr_schedule(tc, s) > lr_schedule(tc, s - 1));
  for (int64_t s = 30; s <= 200; ++s) CHECK(lr_schedule(tc, s) < lr_schedule(tc, s - 1));

  TrainConfig none;
  none.steps = 0;
  CHECK(lr_schedule(none, 0) == 0.0);

  TrainConfig instant;
  instant.steps = 10;
  instant.warmup_ratio = 0.0;  // no warmup: cosine from the first step
  CHECK(lr_schedule(instant, 0) == 0.0);
  CHECK(lr_schedule(instant, 1) == 0.5 * (1.0 + std::cos(3.141592653589793 * 0.1)));
  CHECK(lr_schedule(instant, 10) == 0.0);
}

TEST_CASE("train config validation") {
  TrainConfig tc;
  tc.steps = 1;
  REQUIRE_NOTHROW(tc.validate());

  TrainConfig bad = tc;
  bad.lambda_state = -0.5;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = tc;
  bad.warmup_ratio = 1.0;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = tc;
  bad.batch_size = 0;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = tc;
  bad.steps = -1;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = tc;
  bad.grad_clip = 0.0;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = tc;
  bad.diffusion_steps = 0;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
}

TEST_CASE("zero trajectory weight leaves decoder parameters bit-identical") {
  ModelConfig c = small_config();
  ModelSet m = init_model_set(Variant::ours, c, 17);
  auto before = snapshot(m);
  TrainConfig tc;
  tc.steps = 10;  // one_step runs a single update at the warmup peak
  tc.seed = 3;
  tc.lambda_traj = 0.0;
  one_step(m, synth_dataset(c, 2, 100), tc);
  CHECK(changed_count(m, before, "ik.") == 0);
  CHECK(changed_count(m, before, "backbone.") > 0);
}

TEST_CASE("zero state weight still updates the encoder through the decoder condition") {
  ModelConfig c = small_config();
  ModelSet m = init_model_set(Variant::ours, c, 18);
  auto before = snapshot(m);
  TrainConfig tc;
  tc.steps = 10;  // one_step runs a single update at the warmup peak
  tc.seed = 4;
  tc.lambda_state = 0.0;
  StepRecord rec = one_step(m, synth_dataset(c, 2, 200), tc);
  CHECK(changed_count(m, before, "ik.") > 0);
  CHECK(changed_count(m, before, "backbone.") > 0);
  CHECK(rec.state_loss > 0.0);  // reported unweighted
  CHECK(rec.traj_loss > 0.0);
}

TEST_CASE("stop-gradient toggle isolates the encoder from the trajectory loss") {
  ModelConfig c = small_config();
  ModelSet m = init_model_set(Variant::ours, c, 19);
  auto before = snapshot(m);
  TrainConfig tc;
  tc.steps = 10;  // one_step runs a single update at the warmup peak
  tc.seed = 5;
  tc.lambda_state = 0.0;
  tc.stop_next_state_grad = true;
  one_step(m, synth_dataset(c, 2, 300), tc);
  CHECK(changed_count(m, before, "backbone.") == 0);
  CHECK(changed_count(m, before, "ik.") > 0);
}

TEST_CASE("per-group learning rates split encoder and decoder updates") {
  ModelConfig c = small_config();
  SECTION("decoder rate zero freezes decoder despite live gradients") {
    ModelSet m = init_model_set(Variant::ours, c, 20);
    auto before = snapshot(m);
    TrainConfig tc;
    tc.steps = 10;  // one_step runs a single update at the warmup peak
    tc.seed = 6;
    tc.lr_ik = 0.0;
    one_step(m, synth_dataset(c, 2, 400), tc);
    CHECK(changed_count(m, before, "ik.") == 0);
    CHECK(changed_count(m, before, "backbone.") > 0);
  }
  SECTION("direct variant: trunk uses the encoder rate, head the decoder rate") {
    ModelSet m = init_model_set(Variant::direct, c, 21);
    auto before = snapshot(m);
    TrainConfig tc;
    tc.steps = 10;  // one_step runs a single update at the warmup peak
    tc.seed = 7;
    tc.lr_backbone = 0.0;
    StepRecord rec = one_step(m, synth_dataset(c, 2, 500), tc);
    CHECK(changed_count(m, before, "direct.trunk") == 0);
    CHECK(changed_count(m, before, "direct.head") > 0);
    CHECK(rec.state_loss == 0.0);  // no state objective for the regression baseline
    CHECK(rec.traj_loss > 0.0);
  }
}

TEST_CASE("trajectory heads route gradient into ego and command embeddings") {
  ModelConfig c = small_config();
  for (Variant v : {Variant::mlp_head, Variant::pool_head}) {
    ModelSet m = init_model_set(v, c, 22);
    auto before = snapshot(m);
    TrainConfig tc;
    tc.steps = 10;  // one_step runs a single update at the warmup peak
    tc.seed = 8;
    tc.lambda_state = 0.0;  // isolate the trajectory path
    one_step(m, synth_dataset(c, 2, 600), tc);
    CHECK(changed_count(m, before, "backbone.ego_W") == 1);
    CHECK(changed_count(m, before, "backbone.cmd_W") == 1);
    CHECK(changed_count(m, before, "head.") > 0);
  }
}

TEST_CASE("gradient clipping caps the reported norm") {
  ModelConfig c = small_config();
  std::vector<Episode> data = synth_dataset(c, 2, 700);

  TrainConfig tc;
  tc.steps = 10;  // one_step runs a single update at the warmup peak
  tc.seed = 9;
  ModelSet m1 = init_model_set(Variant::ours, c, 23);
  StepRecord rec = one_step(m1, data, tc);
  CHECK(rec.grad_norm <= tc.grad_clip + 1e-9);

  tc.grad_clip = 1e-6;  // certainly binding
  ModelSet m2 = init_model_set(Variant::ours, c, 23);
  StepRecord tight = one_step(m2, data, tc);
  CHECK(tight.grad_norm > 0.0);
  CHECK(tight.grad_norm <= 1e-6 * (1.0 + 1e-12));

  tc.grad_clip = 1e9;  // certainly not binding
  ModelSet m3 = init_model_set(Variant::ours, c, 23);
  StepRecord loose = one_step(m3, data, tc);
  CHECK(loose.grad_norm > tight.grad_norm);
  CHECK(std::isfinite(loose.grad_norm));
}

TEST_CASE("non-finite values raise numeric errors") {
  ModelConfig c = small_config();
  std::vector<Episode> data = synth_dataset(c, 1, 800);
  TrainConfig tc;
  tc.steps = 1;
  tc.seed = 10;

  SECTION("poisoned parameter") {
    ModelSet m = init_model_set(Variant::ours, c, 24);
    m.entries()[0].second->vec()[0] = std::numeric_limits<double>::quiet_NaN();
    CHECK_THROWS_AS(one_step(m, data, tc), NumericError);
  }
  SECTION("poisoned trajectory target") {
    ModelSet m = init_model_set(Variant::ours, c, 24);
    std::vector<Episode> bad = data;
    bad[0].traj_gt.points[1].x = std::numeric_limits<double>::infinity();
    CHECK_THROWS_AS(one_step(m, bad, tc), NumericError);
  }
}

TEST_CASE("training is bit-reproducible for a fixed config and dataset") {
  ModelConfig c = small_config();
  std::vector<Episode> data = synth_dataset(c, 3, 900);
  TrainConfig tc;
  tc.variant = Variant::ours;
  tc.steps = 12;
  tc.batch_size = 2;
  tc.seed = 11;

  TrainResult a = train(tc, c, data);
  TrainResult b = train(tc, c, data);
  REQUIRE(a.log.records.size() == 12);
  REQUIRE(b.log.records.size() == 12);
  for (size_t i = 0; i < a.log.records.size(); ++i) {
    CHECK(a.log.records[i].step == static_cast<int64_t>(i) + 1);
    CHECK(a.log.records[i].state_loss == b.log.records[i].state_loss);
    CHECK(a.log.records[i].traj_loss == b.log.records[i].traj_loss);
    CHECK(a.log.records[i].lr == b.log.records[i].lr);
    CHECK(a.log.records[i].grad_norm == b.log.records[i].grad_norm);
    CHECK(std::isfinite(a.log.records[i].state_loss));
    CHECK(std::isfinite(a.log.records[i].traj_loss));
    CHECK(std::isfinite(a.log.records[i].grad_norm));
  }
  CHECK(a.log.final_param_hash == b.log.final_param_hash);

  auto ea = a.model.entries();
  auto eb = b.model.entries();
  REQUIRE(ea.size() == eb.size());
  for (size_t i = 0; i < ea.size(); ++i)
    for (int64_t k = 0; k < ea[i].second->numel(); ++k)
      CHECK(ea[i].second->vec()[static_cast<size_t>(k)] == eb[i].second->vec()[static_cast<size_t>(k)]);

  // A different seed must produce a different stream.
  TrainConfig other = tc;
  other.seed = 12;
  TrainResult d = train(other, c, data);
  CHECK(d.log.final_param_hash != a.log.final_param_hash);
}

TEST_CASE("zero steps returns the untouched initialization") {
  ModelConfig c = small_config();
  std::vector<Episode> data = synth_dataset(c, 2, 1000);
  TrainConfig tc;
  tc.steps = 0;
  tc.seed = 13;

  TrainResult r = train(tc, c, data);
  CHECK(r.log.records.empty());

  ModelSet fresh = init_model_set(tc.variant, c, tc.seed);
  CHECK(r.log.final_param_hash == param_hash(fresh));
  auto er = r.model.entries();
  auto ef = fresh.entries();
  REQUIRE(er.size() == ef.size());
  for (size_t i = 0; i < er.size(); ++i)
    for (int64_t k = 0; k < er[i].second->numel(); ++k)
      CHECK(er[i].second->vec()[static_cast<size_t>(k)] == ef[i].second->vec()[static_cast<size_t>(k)]);
}

TEST_CASE("dataset that does not match the model config is rejected") {
  ModelConfig c = small_config();
  TrainConfig tc;
  tc.steps = 1;

  SECTION("wrong grid depth") {
    ModelConfig other = c;
    other.grid_d = c.grid_d + 1;
    std::vector<Episode> data = synth_dataset(other, 1, 1100);
    CHECK_THROWS_AS(train(tc, c, data), ConfigError);
  }
  SECTION("wrong horizon") {
    std::vector<Episode> data = synth_dataset(c, 1, 1200);
    data[0].traj_gt.points.pop_back();
    CHECK_THROWS_AS(train(tc, c, data), ConfigError);
  }
  SECTION("empty dataset") {
    CHECK_THROWS_AS(train(tc, c, {}), ConfigError);
  }
}

TEST_CASE("csv export carries one row per step") {
  ModelConfig c = small_config();
  TrainConfig tc;
  tc.steps = 3;
  tc.seed = 14;
  TrainResult r = train(tc, c, synth_dataset(c, 2, 1300));
  std::string csv = train_log_csv(r.log);

  std::istringstream in(csv);
  std::string line;
  REQUIRE(std::getline(in, line));
  CHECK(line == "step,state_loss,traj_loss,lr,grad_norm");
  int rows = 0;
  while (std::getline(in, line)) {
    ++rows;
    CHECK(line.rfind(std::to_string(rows) + ",", 0) == 0);
    int commas = 0;
    for (char ch : line) commas += ch == ',';
    CHECK(commas == 4);
  }
  CHECK(rows == 3);
}

TEST_CASE("variant dispatch trains every head type for a few steps") {
  ModelConfig c = small_config();
  std::vector<Episode> data = synth_dataset(c, 2, 1400);
  for (Variant v : {Variant::ours, Variant::direct, Variant::no_next_state, Variant::mlp_head,
                    Variant::pool_head, Variant::v_free}) {
    TrainConfig tc;
    tc.variant = v;
    tc.steps = 3;
    tc.batch_size = 2;
    tc.seed = 15;
    TrainResult r = train(tc, c, data);
    REQUIRE(r.log.records.size() == 3);
    for (const StepRecord& rec : r.log.records) {
      CHECK(std::isfinite(rec.state_loss));
      CHECK(std::isfinite(rec.traj_loss));
      CHECK(rec.grad_norm <= tc.grad_clip + 1e-9);
    }
    CHECK(r.log.records.back().traj_loss > 0.0);
  }
}

TEST_CASE("reconstruction variant supervises the current frame") {
  // With v_future deliberately far from v_now, the reconstruction variant's
  // state loss at init must track v_now, not v_future: a model that outputs
  // near-zero sees roughly the target's mean square.
  ModelConfig c = small_config();
  Episode ep = synth_episode(c, 1500);
  for (double& v : ep.v_now.data) v = 0.0;
  for (double& v : ep.v_future.data) v = 3.0;

  TrainConfig tc;
  tc.steps = 1;
  tc.seed = 16;

  tc.variant = Variant::no_next_state;
  ModelSet recon = init_model_set(tc.variant, c, 25);
  StepRecord rec_now = one_step(recon, {ep}, tc);

  tc.variant = Variant::ours;
  ModelSet fut = init_model_set(tc.variant, c, 25);
  StepRecord rec_fut = one_step(fut, {ep}, tc);

  CHECK(rec_now.state_loss < 3.0);       // near the init prediction's own energy
  CHECK(rec_fut.state_loss > 6.0);       // 3.0^2 dominates
  CHECK(rec_fut.state_loss > rec_now.state_loss + 3.0);
}

TEST_CASE("single-episode overfit drives the diffusion loss down") {
  ModelConfig c = small_config();
  c.d_ik = 48;
  c.ik_heads = 2;
  c.mlp_hidden = 48;

  Episode ep = synth_episode(c, 1600);
  TrainConfig tc;
  tc.variant = Variant::ours;
  tc.steps = 2000;
  tc.batch_size = 4;
  tc.seed = 7;
  tc.lr_ik = 3e-3;
  tc.lr_backbone = 3e-4;
  tc.weight_decay = 0.0;

  TrainResult r = train(tc, c, {ep});
  double tail = 0.0;
  for (size_t i = r.log.records.size() - 50; i < r.log.records.size(); ++i)
    tail += r.log.records[i].traj_loss;
  tail /= 50.0;
  INFO("tail-50 mean traj loss " << tail);
  CHECK(tail < 1e-2);
  CHECK(r.log.records.front().traj_loss > 10.0 * tail);
}
