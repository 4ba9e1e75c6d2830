#pragma once

// Binary checkpoint container.
//
//   bytes 0..7    magic "STOEPCKP"
//   u32           format version (little-endian)
//   u64           manifest length M in bytes (little-endian)
//   M bytes       UTF-8 JSON manifest
//   payload       float64 little-endian values of every group, concatenated
//
// The manifest holds the model and threshold configuration, an FNV-1a hash of
// the serialized configuration, the epoch index, and for each group its name,
// shape and offset (in doubles) into the payload. Groups cover every
// learnable tensor plus "scaler.mean", "scaler.scale", "fmf.ema" (four slots,
// NaN when unset) and "meta.validation_loss".

#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <limits>
#include <string_view>
#include <type_traits>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "stoep/model.hpp"

namespace stoep {

inline constexpr char kCheckpointMagic[8] = {'S', 'T', 'O', 'E', 'P', 'C', 'K', 'P'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
  ModelConfig model;
  fmf::ThresholdConfig thresholds;
  std::vector<std::pair<std::string, Tensor>> groups;
  std::size_t epoch = 0;
  double validation_loss = std::numeric_limits<double>::quiet_NaN();

  const Tensor& group(const std::string& name) const {
    for (const auto& [n, t] : groups)
      if (n == name) return t;
    throw DataError("checkpoint: missing group '" + name + "'");
  }

  friend bool operator==(const Checkpoint&, const Checkpoint&) = default;
};

inline nlohmann::json to_json(const ModelConfig& c) {
  return {{"regions", c.regions},     {"channels", c.channels},   {"t_in", c.t_in},
          {"t_out", c.t_out},         {"recent_window", c.recent_window}, {"pattern_count", c.pattern_count},
          {"key_dim", c.key_dim},     {"embed_dim", c.embed_dim}, {"lifted", c.lifted},
          {"heads", c.heads},         {"hidden", c.hidden},       {"skip", c.skip},
          {"out_dim", c.out_dim},     {"dilations", c.dilations}, {"beta_init", c.beta_init},
          {"gamma_init", c.gamma_init}, {"seed", c.seed}};
}

inline ModelConfig model_config_from_json(const nlohmann::json& j) {
  ModelConfig c;
  j.at("regions").get_to(c.regions);
  j.at("channels").get_to(c.channels);
  j.at("t_in").get_to(c.t_in);
  j.at("t_out").get_to(c.t_out);
  j.at("recent_window").get_to(c.recent_window);
  j.at("pattern_count").get_to(c.pattern_count);
  j.at("key_dim").get_to(c.key_dim);
  j.at("embed_dim").get_to(c.embed_dim);
  j.at("lifted").get_to(c.lifted);
  j.at("heads").get_to(c.heads);
  j.at("hidden").get_to(c.hidden);
  j.at("skip").get_to(c.skip);
  j.at("out_dim").get_to(c.out_dim);
  j.at("dilations").get_to(c.dilations);
  j.at("beta_init").get_to(c.beta_init);
  j.at("gamma_init").get_to(c.gamma_init);
  j.at("seed").get_to(c.seed);
  return c;
}

inline nlohmann::json to_json(const fmf::ThresholdConfig& c) {
  return {{"kappa_infected", c.kappa_infected}, {"kappa_ratio", c.kappa_ratio}, {"kappa_beta", c.kappa_beta},
          {"kappa_gamma", c.kappa_gamma},       {"min_infected", c.min_infected}, {"min_ratio", c.min_ratio},
          {"min_beta", c.min_beta},             {"min_gamma", c.min_gamma},     {"ratio_cap", c.ratio_cap},
          {"ema_decay", c.ema_decay},           {"psi", c.psi}};
}

inline fmf::ThresholdConfig threshold_config_from_json(const nlohmann::json& j) {
  fmf::ThresholdConfig c;
  j.at("kappa_infected").get_to(c.kappa_infected);
  j.at("kappa_ratio").get_to(c.kappa_ratio);
  j.at("kappa_beta").get_to(c.kappa_beta);
  j.at("kappa_gamma").get_to(c.kappa_gamma);
  j.at("min_infected").get_to(c.min_infected);
  j.at("min_ratio").get_to(c.min_ratio);
  j.at("min_beta").get_to(c.min_beta);
  j.at("min_gamma").get_to(c.min_gamma);
  j.at("ratio_cap").get_to(c.ratio_cap);
  j.at("ema_decay").get_to(c.ema_decay);
  j.at("psi").get_to(c.psi);
  return c;
}

inline std::uint64_t fnv1a(std::string_view bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline std::uint64_t config_hash(const ModelConfig& m, const fmf::ThresholdConfig& t) {
  return fnv1a(nlohmann::json{{"model", to_json(m)}, {"thresholds", to_json(t)}}.dump());
}

inline Checkpoint snapshot(StoepModel& model, std::size_t epoch, double validation_loss) {
  Checkpoint c{model.config(), model.thresholds(), {}, epoch, validation_loss};
  for (auto& p : model.parameters()) c.groups.emplace_back(p.name, p.var.value());
  const std::size_t ch = model.scaler.mean.size();
  c.groups.emplace_back("scaler.mean", Tensor({ch}, model.scaler.mean));
  c.groups.emplace_back("scaler.scale", Tensor({ch}, model.scaler.scale));
  Tensor ema({4});
  for (std::size_t k = 0; k < 4; ++k)
    ema[k] = model.ema.slots[k].value_or(std::numeric_limits<double>::quiet_NaN());
  c.groups.emplace_back("fmf.ema", std::move(ema));
  c.groups.emplace_back("meta.validation_loss", Tensor::scalar(validation_loss));
  return c;
}

inline StoepModel restore(const Checkpoint& c) {
  StoepModel model(c.model, c.thresholds);
  for (auto& p : model.parameters()) {
    const Tensor& t = c.group(p.name);
    if (t.shape() != p.var.shape())
      throw DataError("checkpoint: group '" + p.name + "' has shape " + shape_string(t.shape()) + ", expected " +
                      shape_string(p.var.shape()));
    p.var.mutable_value() = t;
  }
  model.scaler.mean = c.group("scaler.mean").vec();
  model.scaler.scale = c.group("scaler.scale").vec();
  const Tensor& ema = c.group("fmf.ema");
  for (std::size_t k = 0; k < 4; ++k)
    if (!std::isnan(ema[k])) model.ema.slots[k] = ema[k];
  return model;
}

namespace detail {

template <class T>
void put_le(std::string& out, T v) {
  static_assert(std::is_trivially_copyable_v<T>);
  std::uint64_t bits = 0;
  std::memcpy(&bits, &v, sizeof(T));
  for (std::size_t i = 0; i < sizeof(T); ++i) out.push_back(static_cast<char>((bits >> (8 * i)) & 0xFF));
}

template <class T>
T get_le(const std::string& in, std::size_t& pos) {
  if (pos + sizeof(T) > in.size()) throw DataError("checkpoint: truncated file");
  std::uint64_t bits = 0;
  for (std::size_t i = 0; i < sizeof(T); ++i)
    bits |= static_cast<std::uint64_t>(static_cast<unsigned char>(in[pos + i])) << (8 * i);
  pos += sizeof(T);
  T v;
  std::memcpy(&v, &bits, sizeof(T));
  return v;
}

}  // namespace detail

inline std::string serialize(const Checkpoint& c) {
  nlohmann::json groups = nlohmann::json::array();
  std::size_t offset = 0;
  for (const auto& [name, t] : c.groups) {
    groups.push_back({{"name", name}, {"shape", t.shape()}, {"offset", offset}});
    offset += t.size();
  }
  const nlohmann::json manifest{{"format", "stoep-checkpoint"},
                                {"model", to_json(c.model)},
                                {"thresholds", to_json(c.thresholds)},
                                {"config_hash", config_hash(c.model, c.thresholds)},
                                {"epoch", c.epoch},
                                {"payload_doubles", offset},
                                {"groups", groups}};
  const std::string text = manifest.dump();
  std::string out(kCheckpointMagic, sizeof kCheckpointMagic);
  detail::put_le<std::uint32_t>(out, kCheckpointVersion);
  detail::put_le<std::uint64_t>(out, text.size());
  out += text;
  for (const auto& [name, t] : c.groups)
    for (double v : t.values()) detail::put_le<double>(out, v);
  return out;
}

inline Checkpoint deserialize(const std::string& bytes) {
  if (bytes.size() < 8 || std::memcmp(bytes.data(), kCheckpointMagic, 8) != 0)
    throw DataError("checkpoint: bad magic (not a checkpoint file)");
  std::size_t pos = 8;
  const auto version = detail::get_le<std::uint32_t>(bytes, pos);
  if (version != kCheckpointVersion)
    throw DataError("checkpoint: unsupported version " + std::to_string(version));
  const auto len = detail::get_le<std::uint64_t>(bytes, pos);
  if (pos + len > bytes.size()) throw DataError("checkpoint: truncated manifest");
  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(bytes.substr(pos, len));
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("checkpoint: malformed manifest: ") + e.what());
  }
  pos += len;
  const std::size_t payload_start = pos;

  Checkpoint c;
  try {
    c.model = model_config_from_json(manifest.at("model"));
    c.thresholds = threshold_config_from_json(manifest.at("thresholds"));
    if (manifest.at("config_hash").get<std::uint64_t>() != config_hash(c.model, c.thresholds))
      throw DataError("checkpoint: configuration hash mismatch");
    c.epoch = manifest.at("epoch").get<std::size_t>();
    const auto total = manifest.at("payload_doubles").get<std::size_t>();
    if (bytes.size() != payload_start + total * sizeof(double))
      throw DataError("checkpoint: payload size does not match manifest");
    for (const auto& g : manifest.at("groups")) {
      Shape shape = g.at("shape").get<Shape>();
      const auto offset = g.at("offset").get<std::size_t>();
      Tensor t(shape);
      if (offset + t.size() > total) throw DataError("checkpoint: group exceeds payload");
      std::size_t p = payload_start + offset * sizeof(double);
      for (double& v : t.values()) v = detail::get_le<double>(bytes, p);
      c.groups.emplace_back(g.at("name").get<std::string>(), std::move(t));
    }
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("checkpoint: malformed manifest: ") + e.what());
  }
  c.validation_loss = c.group("meta.validation_loss")[0];
  return c;
}

inline void save_checkpoint(const Checkpoint& c, const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path.string());
  const std::string bytes = serialize(c);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open checkpoint " + path.string());
  std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return deserialize(bytes);
}

}  // namespace stoep
