// SPDX-FileCopyrightText: (c) 2026 The qatf Authors
//
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <openssl/evp.h>

#include <array>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"
#include "qatf/model.hpp"

// File layout (all integers little-endian):
//   "QATF" | u32 version | u64 manifest length | manifest (UTF-8 JSON, sorted
//   keys, no whitespace) | 32-byte SHA-256 of the manifest | payload
// The payload is every tensor of the manifest's "tensors" list, in order, as
// 32-bit floats. The manifest records the payload's SHA-256.

namespace qatf {

using json = nlohmann::json;

inline constexpr std::string_view kCheckpointMagic = "QATF";
inline constexpr std::uint32_t kCheckpointVersion = 1;

class CheckpointError : public Error {
 public:
  using Error::Error;
};

using Sha256 = std::array<std::uint8_t, 32>;

inline Sha256 sha256(const void* data, std::size_t size) {
  Sha256 out{};
  unsigned int len = 0;
  if (EVP_Digest(data, size, out.data(), &len, EVP_sha256(), nullptr) != 1 || len != out.size())
    throw Error("sha256: digest failed");
  return out;
}

inline Sha256 sha256(std::string_view s) { return sha256(s.data(), s.size()); }

inline std::string to_hex(const Sha256& h) {
  static constexpr char kDigits[] = "0123456789abcdef";
  std::string s;
  s.reserve(64);
  for (auto b : h) {
    s.push_back(kDigits[b >> 4]);
    s.push_back(kDigits[b & 15]);
  }
  return s;
}

namespace detail {

inline void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}
inline void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}
inline std::uint64_t get_le(std::string_view in, std::size_t at, int bytes) {
  std::uint64_t v = 0;
  for (int i = 0; i < bytes; ++i) v |= static_cast<std::uint64_t>(static_cast<std::uint8_t>(in[at + i])) << (8 * i);
  return v;
}

template <typename T>
void put_f32(std::string& out, std::span<const T> values) {
  for (const T v : values) {
    const float f = static_cast<float>(v);
    std::uint32_t bits;
    std::memcpy(&bits, &f, 4);
    put_u32(out, bits);
  }
}

}  // namespace detail

/// Hash of a tensor's values as little-endian 32-bit floats.
template <typename T>
std::string tensor_sha256(const Tensor<T>& t) {
  std::string bytes;
  bytes.reserve(static_cast<std::size_t>(t.numel()) * 4);
  detail::put_f32<T>(bytes, t.data());
  return to_hex(sha256(bytes));
}

inline json scheme_to_json(const QuantScheme& s) {
  return {{"bitwidth", s.bitwidth}, {"symmetry", to_string(s.symmetry)}, {"per_channel", s.per_channel},
          {"axis", s.axis}};
}

inline QuantScheme scheme_from_json(const json& j) {
  QuantScheme s;
  s.bitwidth = j.at("bitwidth").get<int>();
  s.symmetry = symmetry_from_string(j.at("symmetry").get<std::string>());
  s.per_channel = j.at("per_channel").get<bool>();
  s.axis = j.at("axis").get<int>();
  s.validate();
  return s;
}

inline json model_config_to_json(const ModelConfig& c) {
  return {{"vocab_size", c.vocab_size}, {"n_layers", c.n_layers},       {"d_model", c.d_model},
          {"n_heads", c.n_heads},       {"d_ff", c.d_ff},               {"max_seq_len", c.max_seq_len},
          {"rope_base", c.rope_base},   {"rmsnorm_eps", c.rmsnorm_eps}};
}

inline ModelConfig model_config_from_json(const json& j) {
  ModelConfig c;
  c.vocab_size = j.at("vocab_size").get<int>();
  c.n_layers = j.at("n_layers").get<int>();
  c.d_model = j.at("d_model").get<int>();
  c.n_heads = j.at("n_heads").get<int>();
  c.d_ff = j.at("d_ff").get<int>();
  c.max_seq_len = j.at("max_seq_len").get<int>();
  c.rope_base = j.at("rope_base").get<double>();
  c.rmsnorm_eps = j.at("rmsnorm_eps").get<double>();
  c.validate();
  return c;
}

/// Serialized checkpoint bytes. `config` and `metadata` are stored verbatim
/// in the manifest.
template <typename T>
std::string serialize_checkpoint(const MicroLM<T>& model, const json& config = json::object(),
                                 const json& metadata = json::object()) {
  std::string payload;
  json tensors = json::array();
  std::uint64_t offset = 0;
  for (const auto& [name, t] : model.named_parameters()) {
    tensors.push_back({{"name", name}, {"shape", t.shape()}, {"dtype", "f32"}, {"offset", offset}});
    detail::put_f32<T>(payload, t.data());
    offset += static_cast<std::uint64_t>(t.numel()) * 4;
  }
  json quantizers = json::array();
  json activations = json::array();
  for (int l = 0; l < model.n_layers(); ++l) {
    for (Role r : kAllRoles) {
      const auto& lin = model.layer(l).proj(r);
      if (lin.quant)
        quantizers.push_back({{"layer", l},
                              {"role", role_name(r)},
                              {"scheme", scheme_to_json(lin.quant->scheme())},
                              {"scale", lin.quant->params().scale},
                              {"zero_point", lin.quant->params().zero_point},
                              {"enabled", lin.quant->enabled()},
                              {"frozen", lin.quant->frozen()}});
      if (lin.act)
        activations.push_back(
            {{"layer", l}, {"role", role_name(r)}, {"scale", lin.act->scale}, {"zero_point", lin.act->zero_point}});
    }
  }
  json manifest = {{"format", "qatf-checkpoint"},
                   {"model", model_config_to_json(model.config())},
                   {"tensors", tensors},
                   {"quantizers", quantizers},
                   {"activation_bits", model.activation_bits()},
                   {"activations", activations},
                   {"payload_bytes", payload.size()},
                   {"payload_sha256", to_hex(sha256(payload))},
                   {"config", config},
                   {"metadata", metadata}};
  const std::string m = manifest.dump();
  std::string out;
  out.reserve(4 + 4 + 8 + m.size() + 32 + payload.size());
  out.append(kCheckpointMagic);
  detail::put_u32(out, kCheckpointVersion);
  detail::put_u64(out, m.size());
  out.append(m);
  const Sha256 mh = sha256(m);
  out.append(reinterpret_cast<const char*>(mh.data()), mh.size());
  out.append(payload);
  return out;
}

struct Checkpoint {
  MicroLM<float> model;
  json manifest;
  json config;
  json metadata;
};

inline Checkpoint parse_checkpoint(std::string_view bytes) {
  constexpr std::size_t kHeader = 4 + 4 + 8;
  if (bytes.size() < kHeader || bytes.substr(0, 4) != kCheckpointMagic)
    throw CheckpointError("checkpoint: bad magic (not a qatf checkpoint)");
  const auto version = static_cast<std::uint32_t>(detail::get_le(bytes, 4, 4));
  if (version != kCheckpointVersion)
    throw CheckpointError("checkpoint: unsupported format version " + std::to_string(version));
  const std::uint64_t mlen = detail::get_le(bytes, 8, 8);
  if (mlen > bytes.size() - kHeader || bytes.size() - kHeader - mlen < 32)
    throw CheckpointError("checkpoint: truncated manifest");
  const std::string_view mtext = bytes.substr(kHeader, mlen);
  const std::string_view stored = bytes.substr(kHeader + mlen, 32);
  const Sha256 mh = sha256(mtext);
  if (std::memcmp(stored.data(), mh.data(), 32) != 0) throw CheckpointError("checkpoint: manifest hash mismatch");
  json manifest;
  try {
    manifest = json::parse(mtext);
  } catch (const json::exception& e) {
    throw CheckpointError(std::string("checkpoint: manifest is not valid JSON: ") + e.what());
  }
  const std::string_view payload = bytes.substr(kHeader + mlen + 32);
  try {
    if (payload.size() != manifest.at("payload_bytes").get<std::uint64_t>())
      throw CheckpointError("checkpoint: payload size " + std::to_string(payload.size()) + " does not match manifest");
    if (to_hex(sha256(payload)) != manifest.at("payload_sha256").get<std::string>())
      throw CheckpointError("checkpoint: payload hash does not match the manifest hash");

    MicroLM<float> model(model_config_from_json(manifest.at("model")), 0);
    auto params = model.named_parameters();
    const auto& tensors = manifest.at("tensors");
    if (tensors.size() != params.size())
      throw CheckpointError("checkpoint: expected " + std::to_string(params.size()) + " tensors, manifest lists " +
                            std::to_string(tensors.size()));
    for (std::size_t i = 0; i < params.size(); ++i) {
      auto& [name, t] = params[i];
      const auto& e = tensors[i];
      if (e.at("name").get<std::string>() != name || e.at("shape").get<Shape>() != t.shape() ||
          e.at("dtype").get<std::string>() != "f32")
        throw CheckpointError("checkpoint: tensor " + std::to_string(i) + " does not match parameter '" + name + "' " +
                              shape_str(t.shape()));
      const std::uint64_t off = e.at("offset").get<std::uint64_t>();
      const auto n = static_cast<std::uint64_t>(t.numel());
      if (off > payload.size() || payload.size() - off < n * 4)
        throw CheckpointError("checkpoint: tensor '" + name + "' exceeds the payload");
      auto dst = t.data();
      for (std::uint64_t k = 0; k < n; ++k) {
        const auto bits = static_cast<std::uint32_t>(detail::get_le(payload, off + 4 * k, 4));
        std::memcpy(&dst[k], &bits, 4);
      }
    }
    for (const auto& q : manifest.at("quantizers")) {
      const int l = q.at("layer").get<int>();
      const Role r = role_from_string(q.at("role").get<std::string>());
      if (l < 0 || l >= model.n_layers()) throw CheckpointError("checkpoint: quantizer layer out of range");
      auto& lin = model.layer(l).proj(r);
      QuantParams p{q.at("scale").get<std::vector<double>>(), q.at("zero_point").get<std::vector<std::int64_t>>()};
      QuantScheme s = scheme_from_json(q.at("scheme"));
      detail::check_params(p, s, detail::group_layout(lin.weight.shape(), s).groups);
      lin.quant = QuantizerState(s, std::move(p));
      lin.quant->set_enabled(q.at("enabled").get<bool>());
      if (q.at("frozen").get<bool>()) lin.quant->freeze();
    }
    model.set_activation_bits(manifest.at("activation_bits").get<int>());
    for (const auto& a : manifest.at("activations")) {
      const int l = a.at("layer").get<int>();
      if (l < 0 || l >= model.n_layers()) throw CheckpointError("checkpoint: activation layer out of range");
      model.layer(l).proj(role_from_string(a.at("role").get<std::string>())).act =
          QuantParams{a.at("scale").get<std::vector<double>>(), a.at("zero_point").get<std::vector<std::int64_t>>()};
    }
    return Checkpoint{std::move(model), manifest, manifest.at("config"), manifest.at("metadata")};
  } catch (const json::exception& e) {
    throw CheckpointError(std::string("checkpoint: malformed manifest: ") + e.what());
  }
}

inline void write_bytes(const std::filesystem::path& path, std::string_view bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot write '" + path.string() + "'");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error("write failed for '" + path.string() + "'");
}

template <typename T>
void save_checkpoint(const std::filesystem::path& path, const MicroLM<T>& model, const json& config = json::object(),
                     const json& metadata = json::object()) {
  write_bytes(path, serialize_checkpoint(model, config, metadata));
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw CheckpointError("checkpoint not found: '" + path.string() + "'");
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot open checkpoint '" + path.string() + "'");
  const std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  try {
    return parse_checkpoint(bytes);
  } catch (const CheckpointError& e) {
    throw CheckpointError(path.string() + ": " + e.what());
  }
}

}  // namespace qatf
