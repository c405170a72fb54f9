#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "ikdrive/episode_io.hpp"
#include "ikdrive/hashing.hpp"
#include "ikdrive/ioutil.hpp"
#include "ikdrive/rng.hpp"
#include "ikdrive/tape.hpp"
#include "ikdrive/tensor.hpp"
#include "ikdrive/worldsim.hpp"

namespace ikdrive {

// ====== configuration ======

enum class Variant { ours, direct, no_next_state, mlp_head, pool_head, v_free };

inline const char* variant_name(Variant v) {
  switch (v) {
    case Variant::ours: return "ours";
    case Variant::direct: return "direct";
    case Variant::no_next_state: return "no_next_state";
    case Variant::mlp_head: return "mlp_head";
    case Variant::pool_head: return "pool_head";
    case Variant::v_free: return "v_free";
  }
  throw ArgumentError("unknown variant");
}

inline Variant variant_from_name(const std::string& s) {
  for (Variant v : {Variant::ours, Variant::direct, Variant::no_next_state, Variant::mlp_head,
                    Variant::pool_head, Variant::v_free})
    if (s == variant_name(v)) return v;
  throw ConfigError("unknown variant name: " + s);
}

struct ModelConfig {
  int grid_h = 12;
  int grid_w = 12;
  int grid_d = 16;
  int sky_rows = 4;
  int horizon_steps = 6;

  int d_backbone = 128;
  int backbone_blocks = 2;
  int backbone_heads = 4;

  int d_ik = 256;
  int ik_heads = 8;  // two cross-attention blocks, fixed

  int mlp_hidden = 128;
  double traj_scale = 20.0;

  int n_tokens() const { return grid_h * grid_w; }
  int token_dim() const { return grid_d + 2; }  // content + (row, col) position channels

  void validate() const {
    if (grid_h <= 0 || grid_w <= 0 || grid_d <= 0) throw ConfigError("ModelConfig: grid dims must be positive");
    if (sky_rows < 0 || sky_rows >= grid_h) throw ConfigError("ModelConfig: sky_rows out of range");
    if (horizon_steps <= 0) throw ConfigError("ModelConfig: horizon_steps must be positive");
    if (d_backbone <= 0 || d_ik <= 0 || mlp_hidden <= 0) throw ConfigError("ModelConfig: widths must be positive");
    if (backbone_blocks <= 0) throw ConfigError("ModelConfig: backbone_blocks must be positive");
    if (backbone_heads <= 0 || d_backbone % backbone_heads != 0)
      throw ConfigError("ModelConfig: d_backbone must be divisible by backbone_heads");
    if (ik_heads <= 0 || d_ik % ik_heads != 0)
      throw ConfigError("ModelConfig: d_ik must be divisible by ik_heads");
    if (!(traj_scale > 0)) throw ConfigError("ModelConfig: traj_scale must be positive");
  }

  void match_grid(const VisualTokenGrid& g) const {
    if (g.h != grid_h || g.w != grid_w || g.d != grid_d)
      throw ShapeError("grid does not match model config: got " +
                       shape_str({g.h, g.w, g.d}) + ", expected " +
                       shape_str({grid_h, grid_w, grid_d}));
  }
};

// ====== tokenization ======

// Content channels only, [N, D].
inline Tensor grid_content_tokens(const VisualTokenGrid& g) {
  Tensor t({g.h * g.w, g.d});
  std::copy(g.data.begin(), g.data.end(), t.data());
  return t;
}

// Normalized (row, col) channels, [N, 2].
inline Tensor grid_pos_tokens(int h, int w) {
  Tensor t({h * w, 2});
  for (int i = 0; i < h; ++i)
    for (int j = 0; j < w; ++j) {
      t.vec()[static_cast<size_t>(i * w + j) * 2 + 0] = h > 1 ? static_cast<double>(i) / (h - 1) : 0.0;
      t.vec()[static_cast<size_t>(i * w + j) * 2 + 1] = w > 1 ? static_cast<double>(j) / (w - 1) : 0.0;
    }
  return t;
}

// Full token set [N, D+2]: content plus position channels.
inline Tensor grid_tokens(const VisualTokenGrid& g) {
  Tensor content = grid_content_tokens(g);
  Tensor pos = grid_pos_tokens(g.h, g.w);
  Tensor t({g.h * g.w, g.d + 2});
  for (int n = 0; n < g.h * g.w; ++n) {
    for (int c = 0; c < g.d; ++c) t.vec()[static_cast<size_t>(n) * (g.d + 2) + c] = content.vec()[static_cast<size_t>(n) * g.d + c];
    for (int c = 0; c < 2; ++c) t.vec()[static_cast<size_t>(n) * (g.d + 2) + g.d + c] = pos.vec()[static_cast<size_t>(n) * 2 + c];
  }
  return t;
}

inline Tensor ego_tensor(const EgoStatus& e) {
  Tensor t({1, 5});
  t.vec() = {e.vx, e.vy, e.yaw_rate, e.ax, e.ay};
  return t;
}

inline Tensor command_onehot(Command c) {
  Tensor t({1, 3});
  t.vec()[static_cast<size_t>(c)] = 1.0;
  return t;
}

inline Tensor normalize_traj(const Trajectory& tr, double scale) {
  Tensor t({static_cast<int64_t>(tr.points.size()), 2});
  for (size_t k = 0; k < tr.points.size(); ++k) {
    t.vec()[k * 2 + 0] = tr.points[k].x / scale;
    t.vec()[k * 2 + 1] = tr.points[k].y / scale;
  }
  return t;
}

inline Trajectory denormalize_traj(const Tensor& t, double scale) {
  if (t.rank() != 2 || t.dim(1) != 2) throw ShapeError("trajectory tensor must be [n, 2], got " + shape_str(t.shape()));
  Trajectory tr;
  tr.points.resize(static_cast<size_t>(t.dim(0)));
  for (size_t k = 0; k < tr.points.size(); ++k) {
    tr.points[k].x = t.vec()[k * 2 + 0] * scale;
    tr.points[k].y = t.vec()[k * 2 + 1] * scale;
  }
  return tr;
}

// ====== parameter containers ======

using ParamEntries = std::vector<std::pair<std::string, Tensor*>>;

struct AttnBlockParams {
  Tensor Wq, bq, Wk, bk, Wv, bv, Wo, bo;  // attention projections
  Tensor W1, b1, W2, b2;                  // feed-forward

  // d_q: width of the residual stream; d_kv: width of key/value inputs.
  void init_shapes(int d_q, int d_kv, int d_ff) {
    Wq = Tensor({d_q, d_q});
    bq = Tensor({d_q});
    Wk = Tensor({d_kv, d_q});
    bk = Tensor({d_q});
    Wv = Tensor({d_kv, d_q});
    bv = Tensor({d_q});
    Wo = Tensor({d_q, d_q});
    bo = Tensor({d_q});
    W1 = Tensor({d_q, d_ff});
    b1 = Tensor({d_ff});
    W2 = Tensor({d_ff, d_q});
    b2 = Tensor({d_q});
  }

  void entries(const std::string& prefix, ParamEntries& out) {
    out.emplace_back(prefix + ".Wq", &Wq);
    out.emplace_back(prefix + ".bq", &bq);
    out.emplace_back(prefix + ".Wk", &Wk);
    out.emplace_back(prefix + ".bk", &bk);
    out.emplace_back(prefix + ".Wv", &Wv);
    out.emplace_back(prefix + ".bv", &bv);
    out.emplace_back(prefix + ".Wo", &Wo);
    out.emplace_back(prefix + ".bo", &bo);
    out.emplace_back(prefix + ".W1", &W1);
    out.emplace_back(prefix + ".b1", &b1);
    out.emplace_back(prefix + ".W2", &W2);
    out.emplace_back(prefix + ".b2", &b2);
  }
};

struct BackboneParams {
  Tensor embed_W, embed_b;  // [D+2, d], [d]
  Tensor null_content;      // [D] learned stand-in for masked visual content
  Tensor ego_W, ego_b;      // [5, d], [d]
  Tensor cmd_W;             // [3, d]
  std::vector<AttnBlockParams> blocks;
  Tensor head_W, head_b;  // [d, D]

  void init_shapes(const ModelConfig& cfg) {
    int d = cfg.d_backbone;
    embed_W = Tensor({cfg.token_dim(), d});
    embed_b = Tensor({d});
    null_content = Tensor({cfg.grid_d});
    ego_W = Tensor({5, d});
    ego_b = Tensor({d});
    cmd_W = Tensor({3, d});
    blocks.assign(cfg.backbone_blocks, {});
    for (auto& b : blocks) b.init_shapes(d, d, 4 * d);
    head_W = Tensor({d, cfg.grid_d});
    head_b = Tensor({cfg.grid_d});
  }

  void entries(const std::string& prefix, ParamEntries& out) {
    out.emplace_back(prefix + ".embed_W", &embed_W);
    out.emplace_back(prefix + ".embed_b", &embed_b);
    out.emplace_back(prefix + ".null_content", &null_content);
    out.emplace_back(prefix + ".ego_W", &ego_W);
    out.emplace_back(prefix + ".ego_b", &ego_b);
    out.emplace_back(prefix + ".cmd_W", &cmd_W);
    for (size_t i = 0; i < blocks.size(); ++i) blocks[i].entries(prefix + ".block" + std::to_string(i), out);
    out.emplace_back(prefix + ".head_W", &head_W);
    out.emplace_back(prefix + ".head_b", &head_b);
  }
};

struct IkParams {
  // The whole noisy trajectory is one query token: with no per-waypoint index
  // channel, separate waypoint queries would make the outputs exchangeable and
  // the decoder could not target distinct waypoints.
  Tensor x_embed_W, x_embed_b;  // [2*H, d]
  AttnBlockParams cross_now;    // keys/values over z_now tokens
  AttnBlockParams cross_next;   // keys/values over z_next tokens
  Tensor out_W1, out_b1, out_W2, out_b2;  // readout d -> hidden -> 2*H

  void init_shapes(const ModelConfig& cfg) {
    int d = cfg.d_ik;
    x_embed_W = Tensor({2 * cfg.horizon_steps, d});
    x_embed_b = Tensor({d});
    cross_now.init_shapes(d, cfg.token_dim(), 4 * d);
    cross_next.init_shapes(d, cfg.token_dim(), 4 * d);
    out_W1 = Tensor({d, cfg.mlp_hidden});
    out_b1 = Tensor({cfg.mlp_hidden});
    out_W2 = Tensor({cfg.mlp_hidden, 2 * cfg.horizon_steps});
    out_b2 = Tensor({2 * cfg.horizon_steps});
  }

  void entries(const std::string& prefix, ParamEntries& out) {
    out.emplace_back(prefix + ".x_embed_W", &x_embed_W);
    out.emplace_back(prefix + ".x_embed_b", &x_embed_b);
    cross_now.entries(prefix + ".cross_now", out);
    cross_next.entries(prefix + ".cross_next", out);
    out.emplace_back(prefix + ".out_W1", &out_W1);
    out.emplace_back(prefix + ".out_b1", &out_b1);
    out.emplace_back(prefix + ".out_W2", &out_W2);
    out.emplace_back(prefix + ".out_b2", &out_b2);
  }
};

struct DirectParams {
  BackboneParams trunk;                   // same encoder as the backbone (head unused)
  Tensor head_W1, head_b1, head_W2, head_b2;  // pooled hidden -> trajectory

  void init_shapes(const ModelConfig& cfg) {
    trunk.init_shapes(cfg);
    head_W1 = Tensor({cfg.d_backbone, cfg.mlp_hidden});
    head_b1 = Tensor({cfg.mlp_hidden});
    head_W2 = Tensor({cfg.mlp_hidden, 2 * cfg.horizon_steps});
    head_b2 = Tensor({2 * cfg.horizon_steps});
  }

  void entries(const std::string& prefix, ParamEntries& out) {
    trunk.entries(prefix + ".trunk", out);
    out.emplace_back(prefix + ".head_W1", &head_W1);
    out.emplace_back(prefix + ".head_b1", &head_b1);
    out.emplace_back(prefix + ".head_W2", &head_W2);
    out.emplace_back(prefix + ".head_b2", &head_b2);
  }
};

// Deterministic trajectory heads that replace the IK decoder in ablations.
struct HeadParams {
  // mlp_head path
  Tensor mlp_W1, mlp_b1, mlp_W2, mlp_b2;
  // pool_head path
  Tensor query;                  // [1, d]
  Tensor pool_Wk, pool_bk, pool_Wv, pool_bv, pool_Wo, pool_bo;

  void init_shapes(const ModelConfig& cfg) {
    int d = cfg.d_backbone;
    mlp_W1 = Tensor({d, cfg.mlp_hidden});
    mlp_b1 = Tensor({cfg.mlp_hidden});
    mlp_W2 = Tensor({cfg.mlp_hidden, 2 * cfg.horizon_steps});
    mlp_b2 = Tensor({2 * cfg.horizon_steps});
    query = Tensor({1, d});
    pool_Wk = Tensor({d, d});
    pool_bk = Tensor({d});
    pool_Wv = Tensor({d, d});
    pool_bv = Tensor({d});
    pool_Wo = Tensor({d, d});
    pool_bo = Tensor({d});
  }

  void entries(const std::string& prefix, ParamEntries& out) {
    out.emplace_back(prefix + ".mlp_W1", &mlp_W1);
    out.emplace_back(prefix + ".mlp_b1", &mlp_b1);
    out.emplace_back(prefix + ".mlp_W2", &mlp_W2);
    out.emplace_back(prefix + ".mlp_b2", &mlp_b2);
    out.emplace_back(prefix + ".query", &query);
    out.emplace_back(prefix + ".pool_Wk", &pool_Wk);
    out.emplace_back(prefix + ".pool_bk", &pool_bk);
    out.emplace_back(prefix + ".pool_Wv", &pool_Wv);
    out.emplace_back(prefix + ".pool_bv", &pool_bv);
    out.emplace_back(prefix + ".pool_Wo", &pool_Wo);
    out.emplace_back(prefix + ".pool_bo", &pool_bo);
  }
};

// All parameters of one trainable variant. Only the members a variant uses
// appear in entries(), so optimizers and checkpoints see a consistent set.
struct ModelSet {
  Variant variant = Variant::ours;
  ModelConfig cfg;
  BackboneParams backbone;
  IkParams ik;
  DirectParams direct;
  HeadParams head;

  bool has_backbone() const { return variant != Variant::direct; }
  bool has_ik() const {
    return variant == Variant::ours || variant == Variant::no_next_state || variant == Variant::v_free;
  }
  bool has_direct() const { return variant == Variant::direct; }
  bool has_head() const { return variant == Variant::mlp_head || variant == Variant::pool_head; }
  // Visual content replaced by the learned null vector (backbone input and IK z_now).
  bool masks_vision() const { return variant == Variant::v_free; }

  ParamEntries entries() {
    ParamEntries out;
    if (has_backbone()) backbone.entries("backbone", out);
    if (has_ik()) ik.entries("ik", out);
    if (has_direct()) direct.entries("direct", out);
    if (has_head()) head.entries("head", out);
    return out;
  }

  int64_t param_count() {
    int64_t n = 0;
    for (auto& [name, t] : entries()) n += t->numel();
    return n;
  }
};

inline ModelSet init_model_set(Variant variant, const ModelConfig& cfg, uint64_t seed) {
  cfg.validate();
  ModelSet m;
  m.variant = variant;
  m.cfg = cfg;
  if (m.has_backbone()) m.backbone.init_shapes(cfg);
  if (m.has_ik()) m.ik.init_shapes(cfg);
  if (m.has_direct()) m.direct.init_shapes(cfg);
  if (m.has_head()) m.head.init_shapes(cfg);
  Rng root(seed);
  uint64_t idx = 0;
  for (auto& [name, t] : m.entries()) {
    Rng stream = root.split(idx++);
    // Fan-in-scaled Gaussian weights; biases and the null content start at zero.
    size_t dot = name.rfind('.');
    std::string leaf = dot == std::string::npos ? name : name.substr(dot + 1);
    bool zero_init = leaf == "null_content" || (!leaf.empty() && leaf[0] == 'b');
    if (zero_init) {
      std::fill(t->vec().begin(), t->vec().end(), 0.0);
    } else {
      const Shape& s = t->shape();
      int64_t fan_in = s.size() == 2 ? s[0] : s[s.size() - 1];
      double sigma = 1.0 / std::sqrt(static_cast<double>(fan_in));
      for (double& v : t->vec()) v = sigma * stream.next_gaussian();
    }
  }
  return m;
}

// ====== forward passes (tape graphs) ======

namespace detail {

inline Var repeat_row(Tape& t, Var row, int64_t n) {
  // [1, d] -> [n, d] via ones [n,1] x row
  Tensor ones({n, 1});
  std::fill(ones.vec().begin(), ones.vec().end(), 1.0);
  return matmul(t.constant(ones), row);
}

inline Var multihead_attention(Tape& t, Var q, Var k, Var v, int heads) {
  const Shape& qs = t.value(q).shape();
  const Shape& ks = t.value(k).shape();
  if (qs.size() != 2 || ks.size() != 2) throw ShapeError("attention expects rank-2 q/k/v");
  int64_t d = qs[1];
  if (d % heads != 0) throw ArgumentError("attention width not divisible by head count");
  int64_t dh = d / heads;
  double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
  std::vector<Var> outs;
  outs.reserve(static_cast<size_t>(heads));
  for (int h = 0; h < heads; ++h) {
    Var qh = slice(q, 1, h * dh, dh);
    Var kh = slice(k, 1, h * dh, dh);
    Var vh = slice(v, 1, h * dh, dh);
    Var scores = scale(matmul(qh, transpose(kh)), inv_sqrt);
    Var att = softmax(scores);
    outs.push_back(matmul(att, vh));
  }
  return heads == 1 ? outs[0] : concat(outs, 1);
}

struct AttnBlockVars {
  Var Wq, bq, Wk, bk, Wv, bv, Wo, bo, W1, b1, W2, b2;
};

inline AttnBlockVars lift_block(Tape& t, AttnBlockParams& p, bool rg) {
  return {t.input(p.Wq, rg), t.input(p.bq, rg), t.input(p.Wk, rg), t.input(p.bk, rg),
          t.input(p.Wv, rg), t.input(p.bv, rg), t.input(p.Wo, rg), t.input(p.bo, rg),
          t.input(p.W1, rg), t.input(p.b1, rg), t.input(p.W2, rg), t.input(p.b2, rg)};
}

// Pre-norm residual block. Self-attention when kv is absent (keys/values from
// the normalized stream), cross-attention otherwise (keys/values from kv).
inline Var attn_block(Tape& t, const AttnBlockVars& B, Var x, const Var* kv, int heads) {
  Var a = layer_norm(x);
  Var q = add(matmul(a, B.Wq), B.bq);
  Var k_src = kv ? *kv : a;
  Var k = add(matmul(k_src, B.Wk), B.bk);
  Var v = add(matmul(k_src, B.Wv), B.bv);
  Var att = multihead_attention(t, q, k, v, heads);
  x = add(x, add(matmul(att, B.Wo), B.bo));
  Var m = layer_norm(x);
  Var ff = gelu(add(matmul(m, B.W1), B.b1));
  return add(x, add(matmul(ff, B.W2), B.b2));
}

}  // namespace detail

struct BackboneVars {
  Var embed_W, embed_b, null_content, ego_W, ego_b, cmd_W;
  std::vector<detail::AttnBlockVars> blocks;
  Var head_W, head_b;
};

inline BackboneVars lift_backbone(Tape& t, BackboneParams& p, bool rg = true) {
  BackboneVars v{t.input(p.embed_W, rg), t.input(p.embed_b, rg), t.input(p.null_content, rg),
                 t.input(p.ego_W, rg),   t.input(p.ego_b, rg),   t.input(p.cmd_W, rg),
                 {},
                 {},
                 {}};
  for (auto& b : p.blocks) v.blocks.push_back(detail::lift_block(t, b, rg));
  v.head_W = t.input(p.head_W, rg);
  v.head_b = t.input(p.head_b, rg);
  return v;
}

struct IkVars {
  Var x_embed_W, x_embed_b;
  detail::AttnBlockVars cross_now, cross_next;
  Var out_W1, out_b1, out_W2, out_b2;
};

inline IkVars lift_ik(Tape& t, IkParams& p, bool rg = true) {
  return {t.input(p.x_embed_W, rg), t.input(p.x_embed_b, rg),
          detail::lift_block(t, p.cross_now, rg), detail::lift_block(t, p.cross_next, rg),
          t.input(p.out_W1, rg), t.input(p.out_b1, rg), t.input(p.out_W2, rg), t.input(p.out_b2, rg)};
}

// Rebuild the Var structs from a flat list ordered like entries(); used by
// gradient checking, which owns parameters as a plain tensor vector.
namespace detail {
inline AttnBlockVars block_vars_from(const std::vector<Var>& vs, size_t& i) {
  AttnBlockVars b;
  b.Wq = vs[i++]; b.bq = vs[i++]; b.Wk = vs[i++]; b.bk = vs[i++];
  b.Wv = vs[i++]; b.bv = vs[i++]; b.Wo = vs[i++]; b.bo = vs[i++];
  b.W1 = vs[i++]; b.b1 = vs[i++]; b.W2 = vs[i++]; b.b2 = vs[i++];
  return b;
}
}  // namespace detail

inline BackboneVars backbone_vars_from(const std::vector<Var>& vs, size_t& i, int n_blocks) {
  BackboneVars v;
  v.embed_W = vs[i++]; v.embed_b = vs[i++]; v.null_content = vs[i++];
  v.ego_W = vs[i++]; v.ego_b = vs[i++]; v.cmd_W = vs[i++];
  for (int b = 0; b < n_blocks; ++b) v.blocks.push_back(detail::block_vars_from(vs, i));
  v.head_W = vs[i++]; v.head_b = vs[i++];
  return v;
}

inline IkVars ik_vars_from(const std::vector<Var>& vs, size_t& i) {
  IkVars v;
  v.x_embed_W = vs[i++]; v.x_embed_b = vs[i++];
  v.cross_now = detail::block_vars_from(vs, i);
  v.cross_next = detail::block_vars_from(vs, i);
  v.out_W1 = vs[i++]; v.out_b1 = vs[i++]; v.out_W2 = vs[i++]; v.out_b2 = vs[i++];
  return v;
}

// Token set [N, D+2] assembled from an explicit content matrix [N, D]. The
// content may be a live graph node, so callers can differentiate model
// outputs with respect to the grid data itself.
inline Var tokens_from_content_var(Tape& t, const ModelConfig& cfg, Var content) {
  const Shape& s = t.value(content).shape();
  if (s.size() != 2 || s[0] != cfg.n_tokens() || s[1] != cfg.grid_d)
    throw ShapeError("tokens_from_content: content must be [" + std::to_string(cfg.n_tokens()) +
                     ", " + std::to_string(cfg.grid_d) + "], got " + shape_str(s));
  Var pos = t.constant(grid_pos_tokens(cfg.grid_h, cfg.grid_w));
  return concat({content, pos}, 1);
}

inline Tensor tokens_from_content(const Tensor& content, const ModelConfig& cfg) {
  Tape t;
  return t.value(tokens_from_content_var(t, cfg, t.constant(content)));
}

// Token set for a grid, with content optionally replaced by the learned null
// vector (position channels are always kept).
inline Var grid_tokens_var(Tape& t, const ModelConfig& cfg, const VisualTokenGrid& g,
                           const BackboneVars* null_source) {
  cfg.match_grid(g);
  if (null_source == nullptr) return t.constant(grid_tokens(g));
  Var null_row = reshape(null_source->null_content, {1, cfg.grid_d});
  Var content = detail::repeat_row(t, null_row, cfg.n_tokens());
  return tokens_from_content_var(t, cfg, content);
}

// Tokens a vision-masked model actually sees: the learned null row at every
// cell, positions intact.
inline Tensor null_tokens(const BackboneParams& p, const ModelConfig& cfg) {
  Tensor content({cfg.n_tokens(), cfg.grid_d});
  for (int i = 0; i < cfg.n_tokens(); ++i)
    for (int d = 0; d < cfg.grid_d; ++d)
      content.vec()[static_cast<size_t>(i * cfg.grid_d + d)] = p.null_content.vec()[static_cast<size_t>(d)];
  return tokens_from_content(content, cfg);
}

// Hidden states of the encoder trunk, [N+2, d]: N visual tokens then the ego
// token then the command token.
inline Var encoder_hidden(Tape& t, const BackboneVars& bb, const ModelConfig& cfg, Var vis_tokens,
                          const EgoStatus& e, Command c, int heads) {
  Var x_v = add(matmul(vis_tokens, bb.embed_W), bb.embed_b);
  Var e_tok = add(matmul(t.constant(ego_tensor(e)), bb.ego_W), bb.ego_b);
  Var c_tok = matmul(t.constant(command_onehot(c)), bb.cmd_W);
  Var x = concat({x_v, e_tok, c_tok}, 0);
  for (const auto& blk : bb.blocks) x = detail::attn_block(t, blk, x, nullptr, heads);
  return layer_norm(x);
}

// Predicted next visual state as content tokens [N, D], from an already
// assembled token set.
inline Var backbone_forward_tokens(Tape& t, const BackboneVars& bb, const ModelConfig& cfg,
                                   Var tokens, const EgoStatus& e, Command c) {
  Var h = encoder_hidden(t, bb, cfg, tokens, e, c, cfg.backbone_heads);
  Var h_vis = slice(h, 0, 0, cfg.n_tokens());
  return add(matmul(h_vis, bb.head_W), bb.head_b);
}

inline Var backbone_forward_var(Tape& t, const BackboneVars& bb, const ModelConfig& cfg,
                                const VisualTokenGrid& v, const EgoStatus& e, Command c,
                                bool mask_vision) {
  Var tokens = grid_tokens_var(t, cfg, v, mask_vision ? &bb : nullptr);
  return backbone_forward_tokens(t, bb, cfg, tokens, e, c);
}

// Convenience: run the backbone without gradients, return a [N, D] tensor.
inline Tensor backbone_predict(BackboneParams& p, const ModelConfig& cfg, const VisualTokenGrid& v,
                               const EgoStatus& e, Command c, bool mask_vision) {
  Tape t;
  BackboneVars bb = lift_backbone(t, p, false);
  Var out = backbone_forward_var(t, bb, cfg, v, e, c, mask_vision);
  return t.value(out);
}

// Mean over tokens, [T, d] -> [1, d].
inline Var mean_pool(Tape& t, Var x) {
  const Shape& s = t.value(x).shape();
  if (s.size() != 2) throw ShapeError("mean_pool expects rank 2, got " + shape_str(s));
  Tensor ones({1, s[0]});
  std::fill(ones.vec().begin(), ones.vec().end(), 1.0 / static_cast<double>(s[0]));
  return matmul(t.constant(ones), x);
}

struct DirectVars {
  BackboneVars trunk;
  Var head_W1, head_b1, head_W2, head_b2;
};

inline DirectVars lift_direct(Tape& t, DirectParams& p, bool rg = true) {
  return {lift_backbone(t, p.trunk, rg), t.input(p.head_W1, rg), t.input(p.head_b1, rg),
          t.input(p.head_W2, rg), t.input(p.head_b2, rg)};
}

// Direct regression: trajectory in normalized units, [H, 2].
inline Var direct_forward_tokens(Tape& t, const DirectVars& dv, const ModelConfig& cfg, Var tokens,
                                 const EgoStatus& e, Command c) {
  Var h = encoder_hidden(t, dv.trunk, cfg, tokens, e, c, cfg.backbone_heads);
  Var pooled = mean_pool(t, h);
  Var hid = gelu(add(matmul(pooled, dv.head_W1), dv.head_b1));
  Var flat = add(matmul(hid, dv.head_W2), dv.head_b2);
  return reshape(flat, {cfg.horizon_steps, 2});
}

inline Var direct_forward_var(Tape& t, const DirectVars& dv, const ModelConfig& cfg,
                              const VisualTokenGrid& v, const EgoStatus& e, Command c,
                              bool mask_vision = false) {
  Var tokens = grid_tokens_var(t, cfg, v, mask_vision ? &dv.trunk : nullptr);
  return direct_forward_tokens(t, dv, cfg, tokens, e, c);
}

inline Trajectory direct_predict(DirectParams& p, const ModelConfig& cfg, const VisualTokenGrid& v,
                                 const EgoStatus& e, Command c) {
  Tape t;
  DirectVars dv = lift_direct(t, p, false);
  Var out = direct_forward_var(t, dv, cfg, v, e, c);
  return denormalize_traj(t.value(out), cfg.traj_scale);
}

struct HeadVars {
  Var mlp_W1, mlp_b1, mlp_W2, mlp_b2;
  Var query, pool_Wk, pool_bk, pool_Wv, pool_bv, pool_Wo, pool_bo;
};

inline HeadVars lift_head(Tape& t, HeadParams& p, bool rg = true) {
  return {t.input(p.mlp_W1, rg),  t.input(p.mlp_b1, rg),  t.input(p.mlp_W2, rg),
          t.input(p.mlp_b2, rg),  t.input(p.query, rg),   t.input(p.pool_Wk, rg),
          t.input(p.pool_bk, rg), t.input(p.pool_Wv, rg), t.input(p.pool_bv, rg),
          t.input(p.pool_Wo, rg), t.input(p.pool_bo, rg)};
}

inline DirectVars direct_vars_from(const std::vector<Var>& vs, size_t& i, int n_blocks) {
  DirectVars v;
  v.trunk = backbone_vars_from(vs, i, n_blocks);
  v.head_W1 = vs[i++]; v.head_b1 = vs[i++]; v.head_W2 = vs[i++]; v.head_b2 = vs[i++];
  return v;
}

inline HeadVars head_vars_from(const std::vector<Var>& vs, size_t& i) {
  HeadVars v;
  v.mlp_W1 = vs[i++]; v.mlp_b1 = vs[i++]; v.mlp_W2 = vs[i++]; v.mlp_b2 = vs[i++];
  v.query = vs[i++];
  v.pool_Wk = vs[i++]; v.pool_bk = vs[i++]; v.pool_Wv = vs[i++]; v.pool_bv = vs[i++];
  v.pool_Wo = vs[i++]; v.pool_bo = vs[i++];
  return v;
}

// Ablation heads read the encoder hidden states and emit a normalized
// trajectory deterministically.
inline Var head_forward_var(Tape& t, const HeadVars& hv, Variant variant, const ModelConfig& cfg,
                            Var hidden) {
  Var feat;
  if (variant == Variant::mlp_head) {
    feat = mean_pool(t, hidden);
  } else if (variant == Variant::pool_head) {
    Var k = add(matmul(hidden, hv.pool_Wk), hv.pool_bk);
    Var v = add(matmul(hidden, hv.pool_Wv), hv.pool_bv);
    Var att = detail::multihead_attention(t, hv.query, k, v, 1);
    feat = add(matmul(att, hv.pool_Wo), hv.pool_bo);
  } else {
    throw ArgumentError("head_forward_var: variant has no deterministic head");
  }
  Var hid = gelu(add(matmul(feat, hv.mlp_W1), hv.mlp_b1));
  Var flat = add(matmul(hid, hv.mlp_W2), hv.mlp_b2);
  return reshape(flat, {cfg.horizon_steps, 2});
}

inline Trajectory head_predict(BackboneParams& bp, HeadParams& hp, Variant variant,
                               const ModelConfig& cfg, const VisualTokenGrid& v, const EgoStatus& e,
                               Command c) {
  Tape t;
  BackboneVars bb = lift_backbone(t, bp, false);
  HeadVars hv = lift_head(t, hp, false);
  Var tokens = grid_tokens_var(t, cfg, v, nullptr);
  Var hidden = encoder_hidden(t, bb, cfg, tokens, e, c, cfg.backbone_heads);
  Var out = head_forward_var(t, hv, variant, cfg, hidden);
  return denormalize_traj(t.value(out), cfg.traj_scale);
}

// IK denoiser: eps_hat(x_t, t_step, z_now, z_next). By construction there is
// no ego-status or command input on this path.
inline Var ik_denoise_var(Tape& t, const IkVars& ik, const ModelConfig& cfg, Var x_t, int t_step,
                          Var z_now, Var z_next) {
  if (t_step < 0) throw ArgumentError("ik_denoise: negative timestep");
  const Shape& xs = t.value(x_t).shape();
  if (xs.size() != 2 || xs[0] != cfg.horizon_steps || xs[1] != 2)
    throw ShapeError("ik_denoise: x_t must be [" + std::to_string(cfg.horizon_steps) + ", 2], got " +
                     shape_str(xs));
  Var q = add(matmul(reshape(x_t, {1, 2 * cfg.horizon_steps}), ik.x_embed_W), ik.x_embed_b);
  q = add(q, sinusoid_embed(t, t_step, cfg.d_ik));
  q = detail::attn_block(t, ik.cross_now, q, &z_now, cfg.ik_heads);
  q = detail::attn_block(t, ik.cross_next, q, &z_next, cfg.ik_heads);
  // The readout sees the raw residual stream: the linear trajectory component
  // must survive to the output, which a terminal layer norm would erase.
  Var hid = gelu(add(matmul(q, ik.out_W1), ik.out_b1));
  return reshape(add(matmul(hid, ik.out_W2), ik.out_b2), {cfg.horizon_steps, 2});
}

inline Tensor ik_denoise(IkParams& p, const ModelConfig& cfg, const Tensor& x_t, int t_step,
                         const Tensor& z_now, const Tensor& z_next) {
  Tape t;
  IkVars ik = lift_ik(t, p, false);
  Var out = ik_denoise_var(t, ik, cfg, t.constant(x_t), t_step, t.constant(z_now), t.constant(z_next));
  return t.value(out);
}

// Per-element MSE between predicted and target content tokens.
inline Var state_loss_var(Var pred, Var target) { return mse(pred, target); }

inline double state_loss(const Tensor& pred, const Tensor& target) {
  require_same_shape(pred, target, "state_loss");
  double acc = 0.0;
  for (int64_t i = 0; i < pred.numel(); ++i) {
    double d = pred.vec()[static_cast<size_t>(i)] - target.vec()[static_cast<size_t>(i)];
    acc += d * d;
  }
  return acc / static_cast<double>(pred.numel());
}

// ====== checkpoints ======

inline constexpr uint32_t kCheckpointVersion = 1;
inline constexpr char kCheckpointMagic[4] = {'I', 'K', 'C', 'K'};

inline nlohmann::json model_config_json(const ModelConfig& c) {
  return {{"grid_h", c.grid_h},     {"grid_w", c.grid_w},
          {"grid_d", c.grid_d},     {"sky_rows", c.sky_rows},
          {"horizon_steps", c.horizon_steps}, {"d_backbone", c.d_backbone},
          {"backbone_blocks", c.backbone_blocks}, {"backbone_heads", c.backbone_heads},
          {"d_ik", c.d_ik},         {"ik_heads", c.ik_heads},
          {"mlp_hidden", c.mlp_hidden}, {"traj_scale", c.traj_scale}};
}

inline ModelConfig model_config_from_json(const nlohmann::json& j) {
  ModelConfig c;
  c.grid_h = j.at("grid_h").get<int>();
  c.grid_w = j.at("grid_w").get<int>();
  c.grid_d = j.at("grid_d").get<int>();
  c.sky_rows = j.at("sky_rows").get<int>();
  c.horizon_steps = j.at("horizon_steps").get<int>();
  c.d_backbone = j.at("d_backbone").get<int>();
  c.backbone_blocks = j.at("backbone_blocks").get<int>();
  c.backbone_heads = j.at("backbone_heads").get<int>();
  c.d_ik = j.at("d_ik").get<int>();
  c.ik_heads = j.at("ik_heads").get<int>();
  c.mlp_hidden = j.at("mlp_hidden").get<int>();
  c.traj_scale = j.at("traj_scale").get<double>();
  c.validate();
  return c;
}

inline std::string encode_checkpoint(ModelSet& m, uint64_t step, const std::string& config_hash) {
  nlohmann::json header;
  header["format_version"] = kCheckpointVersion;
  header["variant"] = variant_name(m.variant);
  header["model_config"] = model_config_json(m.cfg);
  header["step"] = step;
  header["config_hash"] = config_hash;
  nlohmann::json shapes = nlohmann::json::object();
  for (auto& [name, t] : m.entries()) shapes[name] = t->shape();
  header["shapes"] = shapes;
  std::string hdr = header.dump();

  std::string out;
  out.append(kCheckpointMagic, 4);
  detail::put_u32(out, kCheckpointVersion);
  detail::put_u64(out, hdr.size());
  out += hdr;
  for (auto& [name, t] : m.entries())
    for (double v : t->vec()) detail::put_f64(out, v);
  return out;
}

struct CheckpointInfo {
  uint64_t step = 0;
  std::string config_hash;
};

inline CheckpointInfo decode_checkpoint(std::string_view bytes, ModelSet& out) {
  detail::ByteReader r(bytes);
  if (bytes.size() < 4 || std::string_view(bytes.data(), 4) != std::string_view(kCheckpointMagic, 4))
    throw ManifestError("checkpoint has a bad magic header");
  r.u32();
  uint32_t version = r.u32();
  if (version != kCheckpointVersion)
    throw ManifestError("unsupported checkpoint version " + std::to_string(version));
  uint64_t hdr_len = r.u64();
  if (hdr_len > r.remaining()) throw ManifestError("checkpoint truncated");
  std::string hdr(bytes.substr(r.pos(), hdr_len));
  nlohmann::json header = nlohmann::json::parse(hdr, nullptr, false);
  if (header.is_discarded()) throw ManifestError("checkpoint header is not valid JSON");
  detail::ByteReader body(bytes.substr(r.pos() + hdr_len));

  Variant variant = variant_from_name(header.at("variant").get<std::string>());
  ModelConfig cfg = model_config_from_json(header.at("model_config"));
  out = ModelSet{};
  out.variant = variant;
  out.cfg = cfg;
  if (out.has_backbone()) out.backbone.init_shapes(cfg);
  if (out.has_ik()) out.ik.init_shapes(cfg);
  if (out.has_direct()) out.direct.init_shapes(cfg);
  if (out.has_head()) out.head.init_shapes(cfg);

  const nlohmann::json& shapes = header.at("shapes");
  for (auto& [name, t] : out.entries()) {
    if (!shapes.contains(name)) throw ManifestError("checkpoint missing tensor " + name);
    Shape want = shapes.at(name).get<Shape>();
    if (want != t->shape())
      throw ManifestError("checkpoint shape mismatch on " + name + ": file " + shape_str(want) +
                          ", model " + shape_str(t->shape()));
    for (double& v : t->vec()) v = body.f64();
  }
  if (!body.done()) throw ManifestError("checkpoint has trailing bytes");
  CheckpointInfo info;
  info.step = header.at("step").get<uint64_t>();
  info.config_hash = header.value("config_hash", "");
  return info;
}

inline void save_checkpoint(const std::filesystem::path& path, ModelSet& m, uint64_t step,
                            const std::string& config_hash) {
  atomic_write_file(path, encode_checkpoint(m, step, config_hash));
}

inline CheckpointInfo load_checkpoint(const std::filesystem::path& path, ModelSet& m) {
  return decode_checkpoint(read_file(path), m);
}

}  // namespace ikdrive
