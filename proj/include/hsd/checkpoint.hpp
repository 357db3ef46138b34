#pragma once

#include "hsd/artifact.hpp"
#include "hsd/model.hpp"
#include "hsd/vocab.hpp"

#include <json.hpp>

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>

namespace hsd {

// Layout:
//   line 1   "HSDCKPT 1 header_bytes=<n>"
//   line 2   artifact header (#hsd tool=... config=... seed=...)
//   n bytes  JSON: {format_version, config, src_vocab, tgt_vocab, params:[{name, shape, offset}]}
//   "\n"
//   raw little-endian IEEE-754 float32 arrays in manifest order

struct Checkpoint {
  ModelConfig config;
  ModelParams<float> params;
  Vocab src_vocab;
  Vocab tgt_vocab;
  std::uint64_t seed = 0;

  [[nodiscard]] Transformer<float> model() const { return Transformer<float>(config, params); }
};

inline constexpr int kCheckpointFormatVersion = 1;

namespace detail {

inline void put_f32_le(std::string& out, float x) {
  auto bits = std::bit_cast<std::uint32_t>(x);
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((bits >> (8 * i)) & 0xffu));
}

inline float get_f32_le(const unsigned char* p) {
  std::uint32_t bits = 0;
  for (int i = 0; i < 4; ++i) bits |= static_cast<std::uint32_t>(p[i]) << (8 * i);
  return std::bit_cast<float>(bits);
}

}  // namespace detail

inline std::string serialize_checkpoint(const Checkpoint& ck) {
  if (ck.src_vocab.size() != static_cast<std::size_t>(ck.config.vocab_src) ||
      ck.tgt_vocab.size() != static_cast<std::size_t>(ck.config.vocab_tgt))
    throw std::invalid_argument("checkpoint: vocabulary sizes disagree with config");
  nlohmann::json header;
  header["format_version"] = kCheckpointFormatVersion;
  header["config"] = ck.config;
  header["src_vocab"] = ck.src_vocab.words();
  header["tgt_vocab"] = ck.tgt_vocab.words();
  header["params"] = nlohmann::json::array();
  std::string blob;
  ck.params.visit([&](const std::string& name, const Tensor<float>& t) {
    header["params"].push_back({{"name", name}, {"shape", t.shape}, {"offset", blob.size()}});
    for (float x : t.data) detail::put_f32_le(blob, x);
  });
  const std::string text = header.dump();
  std::string out = "HSDCKPT " + std::to_string(kCheckpointFormatVersion) +
                    " header_bytes=" + std::to_string(text.size()) + "\n";
  out += artifact_header("checkpoint", digest_hex(nlohmann::json(ck.config).dump()), ck.seed) + "\n";
  out += text;
  out += "\n";
  out += blob;
  return out;
}

inline Checkpoint deserialize_checkpoint(const std::string& bytes) {
  std::istringstream in(bytes);
  std::string first, second;
  if (!std::getline(in, first) || first.rfind("HSDCKPT ", 0) != 0)
    throw std::runtime_error("checkpoint: bad magic line");
  const auto pos = first.find("header_bytes=");
  if (pos == std::string::npos) throw std::runtime_error("checkpoint: missing header size");
  const std::size_t header_bytes = std::stoull(first.substr(pos + 13));
  if (std::stoi(first.substr(8)) != kCheckpointFormatVersion)
    throw std::runtime_error("checkpoint: unsupported format version");
  if (!std::getline(in, second) || !is_artifact_header(second))
    throw std::runtime_error("checkpoint: missing artifact header");
  const std::size_t header_start = first.size() + 1 + second.size() + 1;
  if (bytes.size() < header_start + header_bytes + 1) throw std::runtime_error("checkpoint: truncated header");
  const auto header = nlohmann::json::parse(bytes.substr(header_start, header_bytes));
  const std::size_t blob_start = header_start + header_bytes + 1;

  Checkpoint ck;
  ck.config = header.at("config").get<ModelConfig>();
  ck.src_vocab = Vocab(header.at("src_vocab").get<std::vector<std::string>>());
  ck.tgt_vocab = Vocab(header.at("tgt_vocab").get<std::vector<std::string>>());
  const auto seed_pos = second.find(" seed=");
  if (seed_pos != std::string::npos) ck.seed = std::stoull(second.substr(seed_pos + 6));
  ck.params = make_params<float>(ck.config);
  const auto& manifest = header.at("params");
  std::size_t idx = 0;
  ck.params.visit([&](const std::string& name, Tensor<float>& t) {
    if (idx >= manifest.size()) throw std::runtime_error("checkpoint: manifest too short");
    const auto& entry = manifest[idx++];
    if (entry.at("name").get<std::string>() != name ||
        entry.at("shape").get<std::vector<std::size_t>>() != t.shape)
      throw std::runtime_error("checkpoint: manifest entry mismatch for " + name);
    const std::size_t off = blob_start + entry.at("offset").get<std::size_t>();
    if (off + 4 * t.size() > bytes.size()) throw std::runtime_error("checkpoint: truncated parameter data");
    const auto* p = reinterpret_cast<const unsigned char*>(bytes.data() + off);
    for (std::size_t i = 0; i < t.size(); ++i) t.data[i] = detail::get_f32_le(p + 4 * i);
  });
  if (idx != manifest.size()) throw std::runtime_error("checkpoint: manifest has extra entries");
  if (ck.src_vocab.size() != static_cast<std::size_t>(ck.config.vocab_src) ||
      ck.tgt_vocab.size() != static_cast<std::size_t>(ck.config.vocab_tgt))
    throw std::runtime_error("checkpoint: vocabulary sizes disagree with config");
  return ck;
}

inline void save_checkpoint(const std::string& path, const Checkpoint& ck) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write checkpoint: " + path);
  const auto bytes = serialize_checkpoint(ck);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

inline Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read checkpoint: " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return deserialize_checkpoint(ss.str());
}

}  // namespace hsd
