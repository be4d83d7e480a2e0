// SPDX-FileCopyrightText: (c) 2026 The qatf Authors
//
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <cstring>
#include <fstream>
#include <random>

#include "qatf/checkpoint.hpp"
#include "test_util.hpp"

using namespace qatf;
using qatf::test::random_tokens;
using qatf::test::TempDir;
using qatf::test::tiny_config;

namespace {

MicroLM<float> populated_model() {
  MicroLM<float> m(tiny_config(), 5);
  QuantPolicy p;
  p.roles = {Role::kQ, Role::kV, Role::kO, Role::kGate, Role::kDown};
  attach_quantizers(m, default_weight_scheme(4), p);
  m.layer(0).proj(Role::kV).quant->freeze();
  m.layer(1).proj(Role::kQ).quant->set_enabled(false);
  std::mt19937_64 rng(5);
  calibrate_activations_minmax(m, {{random_tokens(32, 259, rng), 2, 16}});
  return m;
}

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  return std::string(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

std::string error_of(std::string_view bytes) {
  try {
    parse_checkpoint(bytes);
  } catch (const CheckpointError& e) {
    return e.what();
  }
  return "";
}

}  // namespace

TEST(Sha256, KnownVectors) {
  EXPECT_EQ(to_hex(sha256("abc")), "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
  EXPECT_EQ(to_hex(sha256("")), "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855");
}

TEST(Checkpoint, SaveLoadSaveIsByteIdentical) {
  TempDir dir("ckpt");
  MicroLM<float> m = populated_model();
  const json cfg = {{"seed", 3}, {"note", "x"}};
  const json meta = {{"kind", "test"}, {"value", 1.25}};
  save_checkpoint(dir.path() / "a.ckpt", m, cfg, meta);
  Checkpoint ck = load_checkpoint(dir.path() / "a.ckpt");
  save_checkpoint(dir.path() / "b.ckpt", ck.model, ck.config, ck.metadata);
  const std::string a = slurp(dir.path() / "a.ckpt"), b = slurp(dir.path() / "b.ckpt");
  ASSERT_FALSE(a.empty());
  EXPECT_EQ(a, b);
  EXPECT_EQ(ck.config, cfg);
  EXPECT_EQ(ck.metadata, meta);
}

TEST(Checkpoint, RestoresWeightsQuantizersAndActivations) {
  MicroLM<float> m = populated_model();
  Checkpoint ck = parse_checkpoint(serialize_checkpoint(m));
  for (int l = 0; l < m.n_layers(); ++l)
    for (Role r : kAllRoles) {
      const auto& a = m.layer(l).proj(r);
      const auto& b = ck.model.layer(l).proj(r);
      ASSERT_EQ(a.quant.has_value(), b.quant.has_value());
      if (a.quant) {
        EXPECT_EQ(a.quant->params().scale, b.quant->params().scale);
        EXPECT_EQ(a.quant->params().zero_point, b.quant->params().zero_point);
        EXPECT_EQ(a.quant->enabled(), b.quant->enabled());
        EXPECT_EQ(a.quant->frozen(), b.quant->frozen());
        EXPECT_EQ(a.quant->scheme(), b.quant->scheme());
      }
      ASSERT_TRUE(b.act.has_value());
      EXPECT_EQ(a.act->scale, b.act->scale);
    }
  std::mt19937_64 rng(6);
  auto tok = random_tokens(20, 259, rng);
  Tensor<float> y1 = m.forward(tok, 2, 10), y2 = ck.model.forward(tok, 2, 10);
  EXPECT_EQ(std::memcmp(y1.data().data(), y2.data().data(), y1.numel() * sizeof(float)), 0);
  EXPECT_EQ(ck.model.activation_bits(), 16);
}

TEST(Checkpoint, LayoutHeader) {
  const std::string bytes = serialize_checkpoint(populated_model());
  EXPECT_EQ(bytes.substr(0, 4), "QATF");
  EXPECT_EQ(static_cast<unsigned char>(bytes[4]), 1);
  std::uint64_t mlen = 0;
  for (int i = 0; i < 8; ++i) mlen |= static_cast<std::uint64_t>(static_cast<unsigned char>(bytes[8 + i])) << (8 * i);
  const json manifest = json::parse(bytes.substr(16, mlen));
  const std::string payload = bytes.substr(16 + mlen + 32);
  EXPECT_EQ(manifest.at("payload_bytes").get<std::size_t>(), payload.size());
  EXPECT_EQ(manifest.at("payload_sha256").get<std::string>(), to_hex(sha256(payload)));
  EXPECT_EQ(manifest.at("tensors")[0].at("name"), "tok_emb");
  EXPECT_EQ(manifest.at("quantizers").size(), 10u);
}

TEST(Checkpoint, CorruptedPayloadIsDetected) {
  std::string bytes = serialize_checkpoint(populated_model());
  bytes[bytes.size() - 7] ^= 0x10;
  EXPECT_NE(error_of(bytes).find("payload hash"), std::string::npos) << error_of(bytes);
}

TEST(Checkpoint, CorruptedManifestIsDetected) {
  std::string bytes = serialize_checkpoint(populated_model());
  bytes[30] ^= 0x01;
  EXPECT_NE(error_of(bytes).find("manifest hash"), std::string::npos) << error_of(bytes);
}

TEST(Checkpoint, StructuralErrors) {
  const std::string bytes = serialize_checkpoint(populated_model());
  EXPECT_NE(error_of("NOPE").find("magic"), std::string::npos);
  std::string v2 = bytes;
  v2[4] = 2;
  EXPECT_NE(error_of(v2).find("version"), std::string::npos);
  EXPECT_NE(error_of(bytes.substr(0, 40)).find("truncated"), std::string::npos);
  EXPECT_NE(error_of(bytes.substr(0, bytes.size() - 4)).find("payload size"), std::string::npos);
}

TEST(Checkpoint, MissingFileNamesPath) {
  try {
    load_checkpoint("/nonexistent/dir/model.ckpt");
    FAIL();
  } catch (const CheckpointError& e) {
    EXPECT_NE(std::string(e.what()).find("/nonexistent/dir/model.ckpt"), std::string::npos);
  }
}
