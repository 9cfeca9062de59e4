#pragma once

// Bit-exact checkpoint format:
//   "PMEC" | version u32 LE | header_len u32 LE | header JSON
//   | raw little-endian float64 payload | CRC32(payload) u32 LE
// The header carries the config and a named tensor table (name, shape,
// byte offset into the payload), so config inspection never touches the
// payload.

#include "pme/model.hpp"

#include <nlohmann/json.hpp>
#include <zlib.h>

#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

namespace pme {

class ChecksumMismatch : public std::runtime_error {
 public:
  explicit ChecksumMismatch(const std::string& what) : std::runtime_error(what) {}
};

class VersionMismatch : public std::runtime_error {
 public:
  explicit VersionMismatch(uint32_t got, uint32_t want)
      : std::runtime_error("checkpoint version " + std::to_string(got) + ", expected " +
                           std::to_string(want)) {}
};

constexpr uint32_t kCheckpointVersion = 1;
constexpr char kCheckpointMagic[4] = {'P', 'M', 'E', 'C'};

namespace detail {

inline void put_u32(std::string& out, uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(char((v >> (8 * i)) & 0xFF));
}

inline uint32_t get_u32(const char* p) {
  uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= uint32_t(uint8_t(p[i])) << (8 * i);
  return v;
}

inline nlohmann::json config_to_json(const ModelConfig& c) {
  return {{"n_layers", c.n_layers},   {"d_model", c.d_model},
          {"d_ff", c.d_ff},           {"n_heads", c.n_heads},
          {"vocab_size", c.vocab_size}, {"max_seq_len", c.max_seq_len},
          {"activation", c.activation}};
}

inline ModelConfig config_from_json(const nlohmann::json& j) {
  ModelConfig c;
  c.n_layers = j.at("n_layers").get<int>();
  c.d_model = j.at("d_model").get<int>();
  c.d_ff = j.at("d_ff").get<int>();
  c.n_heads = j.at("n_heads").get<int>();
  c.vocab_size = j.at("vocab_size").get<int>();
  c.max_seq_len = j.at("max_seq_len").get<int>();
  c.activation = j.at("activation").get<std::string>();
  return c;
}

}  // namespace detail

inline void save_checkpoint(const ToyTransformer& model, const std::string& path) {
  nlohmann::json tensors = nlohmann::json::array();
  std::string payload;
  model.params.visit([&](const std::string& name, const Matrix& m) {
    tensors.push_back({{"name", name},
                       {"shape", {m.rows(), m.cols()}},
                       {"offset", payload.size()}});
    const size_t bytes = m.size() * sizeof(double);
    const size_t at = payload.size();
    payload.resize(at + bytes);
    std::memcpy(payload.data() + at, m.data(), bytes);  // LE host assumed
  });
  nlohmann::json header = {{"config", detail::config_to_json(model.cfg)},
                           {"tensors", tensors}};
  const std::string header_str = header.dump();

  std::string out;
  out.append(kCheckpointMagic, 4);
  detail::put_u32(out, kCheckpointVersion);
  detail::put_u32(out, uint32_t(header_str.size()));
  out += header_str;
  out += payload;
  const uint32_t crc =
      uint32_t(::crc32(0L, reinterpret_cast<const Bytef*>(payload.data()), uInt(payload.size())));
  detail::put_u32(out, crc);

  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot write " + path);
  f.write(out.data(), std::streamsize(out.size()));
}

// Reads magic, version and header only; payload bytes are never touched.
inline ModelConfig read_checkpoint_config(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot read " + path);
  char fixed[12];
  if (!f.read(fixed, 12)) throw ChecksumMismatch("checkpoint too short: " + path);
  if (std::memcmp(fixed, kCheckpointMagic, 4) != 0)
    throw ChecksumMismatch("bad magic in " + path);
  const uint32_t version = detail::get_u32(fixed + 4);
  if (version != kCheckpointVersion) throw VersionMismatch(version, kCheckpointVersion);
  const uint32_t header_len = detail::get_u32(fixed + 8);
  std::string header_str(header_len, '\0');
  if (!f.read(header_str.data(), header_len))
    throw ChecksumMismatch("truncated header in " + path);
  return detail::config_from_json(nlohmann::json::parse(header_str).at("config"));
}

inline ToyTransformer load_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot read " + path);
  std::string blob((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  if (blob.size() < 16) throw ChecksumMismatch("checkpoint too short: " + path);
  if (std::memcmp(blob.data(), kCheckpointMagic, 4) != 0)
    throw ChecksumMismatch("bad magic in " + path);
  const uint32_t version = detail::get_u32(blob.data() + 4);
  if (version != kCheckpointVersion) throw VersionMismatch(version, kCheckpointVersion);
  const uint32_t header_len = detail::get_u32(blob.data() + 8);
  if (blob.size() < 12 + size_t(header_len) + 4)
    throw ChecksumMismatch("truncated checkpoint: " + path);
  const nlohmann::json header = nlohmann::json::parse(blob.substr(12, header_len));

  const size_t payload_at = 12 + header_len;
  const size_t payload_len = blob.size() - payload_at - 4;
  const uint32_t stored_crc = detail::get_u32(blob.data() + blob.size() - 4);
  const uint32_t crc = uint32_t(
      ::crc32(0L, reinterpret_cast<const Bytef*>(blob.data() + payload_at), uInt(payload_len)));
  if (crc != stored_crc) throw ChecksumMismatch("payload CRC mismatch in " + path);

  ToyTransformer model;
  model.cfg = detail::config_from_json(header.at("config"));
  model.cfg.validate();
  model.params = ModelParams::zeros_like(model.cfg);

  std::unordered_map<std::string, std::pair<size_t, std::pair<int, int>>> table;
  for (const auto& t : header.at("tensors"))
    table[t.at("name").get<std::string>()] = {
        t.at("offset").get<size_t>(),
        {t.at("shape")[0].get<int>(), t.at("shape")[1].get<int>()}};

  model.params.visit([&](const std::string& name, Matrix& m) {
    auto it = table.find(name);
    if (it == table.end()) throw ChecksumMismatch("missing tensor " + name + " in " + path);
    const auto [offset, shape] = it->second;
    if (shape.first != m.rows() || shape.second != m.cols())
      throw ChecksumMismatch("shape mismatch for tensor " + name + " in " + path);
    const size_t bytes = m.size() * sizeof(double);
    if (offset + bytes > payload_len)
      throw ChecksumMismatch("tensor " + name + " overruns payload in " + path);
    std::memcpy(m.data(), blob.data() + payload_at + offset, bytes);
    if (!m.all_finite()) throw ChecksumMismatch("non-finite values in tensor " + name);
  });
  return model;
}

}  // namespace pme
