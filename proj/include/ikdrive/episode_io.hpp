#pragma once

#include <bit>
#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "ikdrive/hashing.hpp"
#include "ikdrive/ioutil.hpp"
#include "ikdrive/worldsim.hpp"

namespace ikdrive {

inline constexpr uint32_t kEpisodeFormatVersion = 1;
inline constexpr char kEpisodeMagic[4] = {'I', 'K', 'E', 'P'};

namespace detail {

inline void put_u32(std::string& out, uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

inline void put_u64(std::string& out, uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

inline void put_f64(std::string& out, double v) { put_u64(out, std::bit_cast<uint64_t>(v)); }

class ByteReader {
 public:
  explicit ByteReader(std::string_view bytes) : bytes_(bytes) {}

  uint32_t u32() {
    uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<uint32_t>(byte()) << (8 * i);
    return v;
  }

  uint64_t u64() {
    uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<uint64_t>(byte()) << (8 * i);
    return v;
  }

  double f64() { return std::bit_cast<double>(u64()); }

  uint8_t u8() { return byte(); }

  size_t pos() const { return pos_; }
  size_t remaining() const { return bytes_.size() - pos_; }
  bool done() const { return pos_ == bytes_.size(); }

 private:
  uint8_t byte() {
    if (pos_ >= bytes_.size()) throw ManifestError("episode file truncated");
    return static_cast<uint8_t>(bytes_[pos_++]);
  }

  std::string_view bytes_;
  size_t pos_ = 0;
};

inline void encode_grid(std::string& out, const VisualTokenGrid& g) {
  put_u32(out, static_cast<uint32_t>(g.h));
  put_u32(out, static_cast<uint32_t>(g.w));
  put_u32(out, static_cast<uint32_t>(g.d));
  put_u32(out, static_cast<uint32_t>(g.sky));
  for (double v : g.data) put_f64(out, v);
  for (uint8_t m : g.object_mask) out.push_back(static_cast<char>(m));
}

inline VisualTokenGrid decode_grid(ByteReader& r) {
  int h = static_cast<int>(r.u32());
  int w = static_cast<int>(r.u32());
  int d = static_cast<int>(r.u32());
  int sky = static_cast<int>(r.u32());
  if (h <= 0 || w <= 0 || d <= 0 || sky < 0 || sky >= h || h > 4096 || w > 4096 || d > 4096)
    throw ManifestError("episode file carries invalid grid dimensions");
  VisualTokenGrid g(h, w, d, sky);
  for (double& v : g.data) v = r.f64();
  for (uint8_t& m : g.object_mask) {
    m = r.u8();
    if (m > 1) throw ManifestError("episode file carries an invalid mask byte");
  }
  return g;
}

}  // namespace detail

inline std::string encode_episodes(const std::vector<Episode>& eps) {
  std::string out;
  out.append(kEpisodeMagic, 4);
  detail::put_u32(out, kEpisodeFormatVersion);
  detail::put_u64(out, eps.size());
  for (const Episode& e : eps) {
    std::string rec;
    detail::encode_grid(rec, e.v_now);
    detail::encode_grid(rec, e.v_future);
    detail::put_f64(rec, e.ego.vx);
    detail::put_f64(rec, e.ego.vy);
    detail::put_f64(rec, e.ego.yaw_rate);
    detail::put_f64(rec, e.ego.ax);
    detail::put_f64(rec, e.ego.ay);
    detail::put_u32(rec, static_cast<uint32_t>(e.command));
    detail::put_u32(rec, static_cast<uint32_t>(e.traj_gt.points.size()));
    for (const Vec2& p : e.traj_gt.points) {
      detail::put_f64(rec, p.x);
      detail::put_f64(rec, p.y);
    }
    detail::put_u32(rec, static_cast<uint32_t>(e.indicator));
    detail::put_f64(rec, e.ego_gap);
    detail::put_u64(rec, e.seed);
    detail::put_u64(out, rec.size());
    out += rec;
  }
  return out;
}

inline std::vector<Episode> decode_episodes(std::string_view bytes) {
  detail::ByteReader r(bytes);
  if (bytes.size() < 4 || std::string_view(bytes.data(), 4) != std::string_view(kEpisodeMagic, 4))
    throw ManifestError("episode file has a bad magic header");
  r.u32();  // skip magic (validated above)
  uint32_t version = r.u32();
  if (version != kEpisodeFormatVersion)
    throw ManifestError("unsupported episode format version " + std::to_string(version));
  uint64_t count = r.u64();
  std::vector<Episode> eps;
  eps.reserve(count);
  for (uint64_t i = 0; i < count; ++i) {
    uint64_t len = r.u64();
    if (len > r.remaining()) throw ManifestError("episode file truncated");
    size_t start = r.pos();
    Episode e;
    e.v_now = detail::decode_grid(r);
    e.v_future = detail::decode_grid(r);
    e.ego.vx = r.f64();
    e.ego.vy = r.f64();
    e.ego.yaw_rate = r.f64();
    e.ego.ax = r.f64();
    e.ego.ay = r.f64();
    uint32_t cmd = r.u32();
    if (cmd > 2) throw ManifestError("episode file carries an invalid command code");
    e.command = static_cast<Command>(cmd);
    uint32_t n_pts = r.u32();
    if (n_pts > 4096) throw ManifestError("episode file carries an oversized trajectory");
    e.traj_gt.points.resize(n_pts);
    for (Vec2& p : e.traj_gt.points) {
      p.x = r.f64();
      p.y = r.f64();
    }
    uint32_t ind = r.u32();
    if (ind > 1) throw ManifestError("episode file carries an invalid indicator");
    e.indicator = static_cast<int>(ind);
    e.ego_gap = r.f64();
    e.seed = r.u64();
    if (r.pos() - start != len) throw ManifestError("episode record length mismatch");
    eps.push_back(std::move(e));
  }
  if (!r.done()) throw ManifestError("episode file has trailing bytes");
  return eps;
}

inline void write_episode_file(const std::filesystem::path& path, const std::vector<Episode>& eps) {
  atomic_write_file(path, encode_episodes(eps));
}

inline std::vector<Episode> read_episode_file(const std::filesystem::path& path) {
  return decode_episodes(read_file(path));
}

// One JSON object per line; full grids included so records are inspectable.
inline void write_episode_jsonl(const std::filesystem::path& path, const std::vector<Episode>& eps,
                                size_t max_records) {
  std::string out;
  size_t n = std::min(max_records, eps.size());
  for (size_t i = 0; i < n; ++i) {
    const Episode& e = eps[i];
    nlohmann::json j;
    j["seed"] = e.seed;
    j["command"] = command_name(e.command);
    j["ego"] = {{"vx", e.ego.vx}, {"vy", e.ego.vy}, {"yaw_rate", e.ego.yaw_rate},
                {"ax", e.ego.ax}, {"ay", e.ego.ay}};
    j["indicator"] = e.indicator;
    j["ego_gap"] = e.ego_gap;
    nlohmann::json traj = nlohmann::json::array();
    for (const Vec2& p : e.traj_gt.points) traj.push_back({p.x, p.y});
    j["traj_gt"] = traj;
    auto grid_json = [](const VisualTokenGrid& g) {
      nlohmann::json v;
      v["h"] = g.h;
      v["w"] = g.w;
      v["d"] = g.d;
      v["sky"] = g.sky;
      v["data"] = g.data;
      v["object_mask"] = g.object_mask;
      return v;
    };
    j["v_now"] = grid_json(e.v_now);
    j["v_future"] = grid_json(e.v_future);
    out += j.dump();
    out += '\n';
  }
  atomic_write_file(path, out);
}

// ---- dataset manifest ----------------------------------------------------

inline constexpr uint32_t kManifestVersion = 1;

inline void write_manifest(const std::filesystem::path& dir, const nlohmann::json& manifest) {
  atomic_write_file(dir / "manifest.json", manifest.dump(2) + "\n");
}

inline nlohmann::json read_manifest(const std::filesystem::path& dir) {
  std::filesystem::path p = dir / "manifest.json";
  if (!std::filesystem::exists(p)) throw ManifestError("missing manifest: " + p.string());
  nlohmann::json j = nlohmann::json::parse(read_file(p), nullptr, false);
  if (j.is_discarded()) throw ManifestError("unparseable manifest: " + p.string());
  return j;
}

inline void require_manifest_field(const nlohmann::json& m, const std::string& key,
                                   const std::string& expected) {
  if (!m.contains(key) || !m[key].is_string())
    throw ManifestError("manifest missing field '" + key + "'");
  std::string got = m[key].get<std::string>();
  if (got != expected)
    throw ManifestError("manifest mismatch on '" + key + "': recorded " + got + ", expected " +
                        expected);
}

}  // namespace ikdrive
