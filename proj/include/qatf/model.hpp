// SPDX-FileCopyrightText: (c) 2026 The qatf Authors
//
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <random>
#include <set>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "qatf/ops.hpp"
#include "qatf/quant.hpp"
#include "qatf/tensor.hpp"

namespace qatf {

/// Weight roles inside one decoder layer.
enum class Role { kQ, kK, kV, kO, kGate, kUp, kDown };

inline constexpr std::array<Role, 7> kAllRoles = {Role::kQ,    Role::kK,  Role::kV,   Role::kO,
                                                  Role::kGate, Role::kUp, Role::kDown};
inline constexpr std::array<Role, 4> kAttentionRoles = {Role::kQ, Role::kK, Role::kV, Role::kO};

inline std::string_view role_name(Role r) {
  switch (r) {
    case Role::kQ: return "q";
    case Role::kK: return "k";
    case Role::kV: return "v";
    case Role::kO: return "o";
    case Role::kGate: return "gate";
    case Role::kUp: return "up";
    case Role::kDown: return "down";
  }
  return "?";
}

inline Role role_from_string(std::string_view s) {
  for (Role r : kAllRoles)
    if (role_name(r) == s) return r;
  throw Error("unknown layer role '" + std::string(s) + "'");
}

inline std::string_view role_param_suffix(Role r) {
  switch (r) {
    case Role::kQ: return "wq";
    case Role::kK: return "wk";
    case Role::kV: return "wv";
    case Role::kO: return "wo";
    case Role::kGate: return "w_gate";
    case Role::kUp: return "w_up";
    case Role::kDown: return "w_down";
  }
  return "?";
}

inline bool is_mlp_role(Role r) { return r == Role::kGate || r == Role::kUp || r == Role::kDown; }

struct ModelConfig {
  int vocab_size = 259;
  int n_layers = 4;
  int d_model = 128;
  int n_heads = 4;
  int d_ff = 344;
  int max_seq_len = 256;
  double rope_base = 10000.0;
  double rmsnorm_eps = 1e-5;

  int head_dim() const { return d_model / n_heads; }

  void validate() const {
    if (vocab_size <= 0 || n_layers <= 0 || d_model <= 0 || n_heads <= 0 || d_ff <= 0 || max_seq_len <= 0)
      throw Error("model config: dimensions must be positive");
    if (d_model % n_heads != 0) throw Error("model config: d_model must be divisible by n_heads");
    if (head_dim() % 2 != 0) throw Error("model config: head_dim must be even for rotary embeddings");
    if (!(rope_base > 0) || !(rmsnorm_eps >= 0)) throw Error("model config: invalid rope_base or rmsnorm_eps");
  }

  bool operator==(const ModelConfig&) const = default;
};

/// x / sqrt(mean(x^2) + eps) * weight over the last axis.
template <typename T>
Tensor<T> rmsnorm(const Tensor<T>& x, const Tensor<T>& weight, double eps) {
  const std::int64_t d = x.dim(-1);
  if (weight.numel() != d)
    throw ShapeError("rmsnorm: weight of " + std::to_string(weight.numel()) + " for last axis " +
                     std::to_string(d));
  const std::int64_t rows = x.numel() / d;
  Tensor<T> out = Tensor<T>::zeros(x.shape());
  std::vector<T> inv(static_cast<std::size_t>(rows));
  auto xs = x.data();
  auto ws = weight.data();
  auto os = out.data();
  for (std::int64_t r = 0; r < rows; ++r) {
    const T* xr = xs.data() + r * d;
    T ss = 0;
    for (std::int64_t i = 0; i < d; ++i) ss += xr[i] * xr[i];
    inv[r] = T(1) / std::sqrt(ss / static_cast<T>(d) + static_cast<T>(eps));
    for (std::int64_t i = 0; i < d; ++i) os[r * d + i] = xr[i] * inv[r] * ws[i];
  }
  return record_op<T>("rmsnorm", out, {&x, &weight}, [x, weight, inv, d, rows](std::span<const T> g) mutable {
    auto xs = x.data();
    auto ws = weight.data();
    std::span<T> gx = x.requires_grad() ? x.grad_buffer() : std::span<T>();
    std::span<T> gw = weight.requires_grad() ? weight.grad_buffer() : std::span<T>();
    for (std::int64_t r = 0; r < rows; ++r) {
      const T* xr = xs.data() + r * d;
      const T* gr = g.data() + r * d;
      const T ir = inv[r];
      if (!gw.empty())
        for (std::int64_t i = 0; i < d; ++i) gw[i] += gr[i] * xr[i] * ir;
      if (!gx.empty()) {
        T dot = 0;
        for (std::int64_t i = 0; i < d; ++i) dot += gr[i] * ws[i] * xr[i] * ir;
        dot /= static_cast<T>(d);
        for (std::int64_t i = 0; i < d; ++i)
          gx[r * d + i] += ir * (gr[i] * ws[i] - xr[i] * ir * dot);
      }
    }
  });
}

/// Rotary embedding. x has the sequence on `seq_axis` and head_dim last; pair
/// (2i, 2i+1) at position p is rotated by p * base^(-2i / head_dim).
template <typename T>
Tensor<T> rope(const Tensor<T>& x, std::span<const std::int64_t> positions, double base,
               std::int64_t seq_axis = -2) {
  if (x.rank() < 2) throw ShapeError("rope: expected [..., seq, head_dim], got " + shape_str(x.shape()));
  if (seq_axis < 0) seq_axis += x.rank();
  if (seq_axis < 0 || seq_axis >= x.rank() - 1) throw ShapeError("rope: invalid sequence axis");
  const std::int64_t hd = x.dim(-1), seq = x.dim(seq_axis);
  if (hd % 2 != 0) throw ShapeError("rope: head_dim " + std::to_string(hd) + " is odd");
  if (static_cast<std::int64_t>(positions.size()) != seq)
    throw ShapeError("rope: " + std::to_string(positions.size()) + " positions for sequence of " +
                     std::to_string(seq));
  // Rows (of head_dim values) sharing one position are contiguous in groups of `inner`.
  std::int64_t inner = 1;
  for (std::int64_t i = seq_axis + 1; i < x.rank() - 1; ++i) inner *= x.dim(i);
  const std::int64_t half = hd / 2;
  std::vector<T> cs(static_cast<std::size_t>(seq * half)), sn(cs.size());
  for (std::int64_t p = 0; p < seq; ++p)
    for (std::int64_t i = 0; i < half; ++i) {
      const double angle = static_cast<double>(positions[p]) *
                           std::pow(base, -2.0 * static_cast<double>(i) / static_cast<double>(hd));
      cs[p * half + i] = static_cast<T>(std::cos(angle));
      sn[p * half + i] = static_cast<T>(std::sin(angle));
    }
  Tensor<T> out = Tensor<T>::zeros(x.shape());
  auto xs = x.data();
  auto os = out.data();
  const std::int64_t rows = x.numel() / hd;
  for (std::int64_t r = 0; r < rows; ++r) {
    const std::int64_t p = (r / inner) % seq;
    for (std::int64_t i = 0; i < half; ++i) {
      const T a = xs[r * hd + 2 * i], b = xs[r * hd + 2 * i + 1];
      const T c = cs[p * half + i], s = sn[p * half + i];
      os[r * hd + 2 * i] = a * c - b * s;
      os[r * hd + 2 * i + 1] = a * s + b * c;
    }
  }
  return record_op<T>("rope", out, {&x}, [x, cs, sn, hd, seq, half, rows, inner](std::span<const T> g) {
    auto gx = x.grad_buffer();
    for (std::int64_t r = 0; r < rows; ++r) {
      const std::int64_t p = (r / inner) % seq;
      for (std::int64_t i = 0; i < half; ++i) {
        const T ga = g[r * hd + 2 * i], gb = g[r * hd + 2 * i + 1];
        const T c = cs[p * half + i], s = sn[p * half + i];
        gx[r * hd + 2 * i] += ga * c + gb * s;
        gx[r * hd + 2 * i + 1] += -ga * s + gb * c;
      }
    }
  });
}

template <typename T>
std::pair<Tensor<T>, Tensor<T>> rope(const Tensor<T>& q, const Tensor<T>& k,
                                     std::span<const std::int64_t> positions, double base) {
  return {rope(q, positions, base), rope(k, positions, base)};
}

enum class HeadLayout {
  kBatchHeadSeq,  // [batch, heads, seq, head_dim]
  kBatchSeqHead,  // [batch, seq, heads, head_dim]
};

namespace detail {

// Fused causal attention over every (batch, head) slice. Each slice is a
// [seq, head_dim] matrix with row stride `ld`.
template <typename T>
Tensor<T> fused_causal_attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v, HeadLayout layout,
                                 Tensor<T>* weights) {
  if (q.rank() != 4 || q.shape() != k.shape() || q.shape() != v.shape())
    throw ShapeError("causal_attention: expected equal rank-4 shapes, got " + shape_str(q.shape()) + ", " +
                     shape_str(k.shape()) + ", " + shape_str(v.shape()));
  const bool bhsd = layout == HeadLayout::kBatchHeadSeq;
  const std::int64_t batch = q.dim(0), heads = bhsd ? q.dim(1) : q.dim(2), seq = bhsd ? q.dim(2) : q.dim(1),
                     hd = q.dim(3);
  const std::int64_t ld = bhsd ? hd : heads * hd;
  auto offset = [=](std::int64_t b, std::int64_t h) { return bhsd ? (b * heads + h) * seq * hd : b * seq * heads * hd + h * hd; };
  using Strided = Eigen::Map<RowMat<T>, 0, Eigen::OuterStride<>>;
  using ConstStrided = Eigen::Map<const RowMat<T>, 0, Eigen::OuterStride<>>;
  const T scale = static_cast<T>(1.0 / std::sqrt(static_cast<double>(hd)));

  Tensor<T> out = Tensor<T>::zeros(q.shape());
  Tensor<T> probs = Tensor<T>::zeros({batch, heads, seq, seq});
  for (std::int64_t b = 0; b < batch; ++b)
    for (std::int64_t h = 0; h < heads; ++h) {
      const auto off = offset(b, h);
      ConstStrided qm(q.data().data() + off, seq, hd, Eigen::OuterStride<>(ld));
      ConstStrided km(k.data().data() + off, seq, hd, Eigen::OuterStride<>(ld));
      ConstStrided vm(v.data().data() + off, seq, hd, Eigen::OuterStride<>(ld));
      MapMat<T> pm(probs.data().data() + (b * heads + h) * seq * seq, seq, seq);
      pm.noalias() = (qm * km.transpose()) * scale;
      for (std::int64_t i = 0; i < seq; ++i) {
        auto row = pm.row(i).head(i + 1).array();
        row = (row - row.maxCoeff()).exp();
        row /= row.sum();
        pm.row(i).tail(seq - i - 1).setZero();
      }
      Strided om(out.data().data() + off, seq, hd, Eigen::OuterStride<>(ld));
      om.noalias() = pm * vm;
    }
  if (weights != nullptr) *weights = probs;
  return record_op<T>(
      "causal_attention", out, {&q, &k, &v},
      [q, k, v, probs, batch, heads, seq, hd, ld, offset, scale](std::span<const T> g) {
        RowMat<T> dp(seq, seq);
        for (std::int64_t b = 0; b < batch; ++b)
          for (std::int64_t h = 0; h < heads; ++h) {
            const auto off = offset(b, h);
            ConstStrided qm(q.data().data() + off, seq, hd, Eigen::OuterStride<>(ld));
            ConstStrided km(k.data().data() + off, seq, hd, Eigen::OuterStride<>(ld));
            ConstStrided vm(v.data().data() + off, seq, hd, Eigen::OuterStride<>(ld));
            ConstStrided gm(g.data() + off, seq, hd, Eigen::OuterStride<>(ld));
            MapConstMat<T> pm(probs.data().data() + (b * heads + h) * seq * seq, seq, seq);
            if (v.requires_grad()) {
              Strided gv(v.grad_buffer().data() + off, seq, hd, Eigen::OuterStride<>(ld));
              gv.noalias() += pm.transpose() * gm;
            }
            if (!q.requires_grad() && !k.requires_grad()) continue;
            dp.noalias() = gm * vm.transpose();
            for (std::int64_t i = 0; i < seq; ++i) {
              const T dot = (dp.row(i).array() * pm.row(i).array()).sum();
              dp.row(i).array() = pm.row(i).array() * (dp.row(i).array() - dot) * scale;
            }
            if (q.requires_grad()) {
              Strided gq(q.grad_buffer().data() + off, seq, hd, Eigen::OuterStride<>(ld));
              gq.noalias() += dp * km;
            }
            if (k.requires_grad()) {
              Strided gk(k.grad_buffer().data() + off, seq, hd, Eigen::OuterStride<>(ld));
              gk.noalias() += dp.transpose() * qm;
            }
          }
      });
}

}  // namespace detail

/// softmax(q k^T / sqrt(head_dim) + causal mask) v for [batch, heads, seq, head_dim]
/// inputs. When `weights` is given it receives the attention probabilities
/// [batch, heads, seq, seq].
template <typename T>
Tensor<T> causal_attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v,
                           Tensor<T>* weights = nullptr, HeadLayout layout = HeadLayout::kBatchHeadSeq) {
  return detail::fused_causal_attention(q, k, v, layout, weights);
}

/// The same computation assembled from primitive ops; slower, used as a
/// cross-check of the fused kernel.
template <typename T>
Tensor<T> causal_attention_composed(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v) {
  if (q.rank() != 4 || q.shape() != k.shape() || q.shape() != v.shape())
    throw ShapeError("causal_attention: expected equal [batch, heads, seq, head_dim] shapes");
  const std::int64_t seq = q.dim(2);
  const T scale = static_cast<T>(1.0 / std::sqrt(static_cast<double>(q.dim(3))));
  std::vector<std::uint8_t> mask(static_cast<std::size_t>(seq * seq), 0);
  for (std::int64_t i = 0; i < seq; ++i)
    for (std::int64_t j = i + 1; j < seq; ++j) mask[i * seq + j] = 1;
  Tensor<T> scores = mul_scalar(matmul(q, transpose(k)), scale);
  Tensor<T> probs = softmax(masked_fill(scores, std::span<const std::uint8_t>(mask), static_cast<T>(-1e9)));
  return matmul(probs, v);
}

template <typename T>
struct Linear {
  Tensor<T> weight;                     // [in, out]
  std::optional<QuantizerState> quant;  // weight fake quantizer
  std::optional<QuantParams> act;       // output activation params (evaluation only)
};

template <typename T>
struct DecoderLayer {
  Tensor<T> attn_norm;
  Tensor<T> mlp_norm;
  std::array<Linear<T>, 7> linears;  // indexed by Role

  Linear<T>& proj(Role r) { return linears[static_cast<std::size_t>(r)]; }
  const Linear<T>& proj(Role r) const { return linears[static_cast<std::size_t>(r)]; }
};

/// Receives each linear-layer output during forward.
template <typename T>
class ProjectionObserver {
 public:
  virtual ~ProjectionObserver() = default;
  virtual void on_projection(int layer, Role role, Tensor<T>& output) = 0;
};

/// Decoder-only LLaMA-style language model: pre-norm residual blocks with
/// RMSNorm, rotary causal attention and a SiLU-gated MLP.
template <typename T>
class MicroLM {
 public:
  MicroLM(const ModelConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
    cfg_.validate();
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> normal(0.0, 1.0);
    auto init = [&](Shape shape, double std) {
      Tensor<T> t = Tensor<T>::zeros(std::move(shape));
      for (auto& v : t.data()) v = static_cast<T>(normal(rng) * std);
      return t;
    };
    const std::int64_t d = cfg_.d_model, ff = cfg_.d_ff;
    const double base_std = 0.02;
    const double resid_std = base_std / std::sqrt(2.0 * cfg_.n_layers);
    tok_emb_ = init({cfg_.vocab_size, d}, base_std);
    layers_.resize(static_cast<std::size_t>(cfg_.n_layers));
    for (auto& layer : layers_) {
      layer.attn_norm = Tensor<T>::full({d}, T(1));
      layer.mlp_norm = Tensor<T>::full({d}, T(1));
      layer.proj(Role::kQ).weight = init({d, d}, base_std);
      layer.proj(Role::kK).weight = init({d, d}, base_std);
      layer.proj(Role::kV).weight = init({d, d}, base_std);
      layer.proj(Role::kO).weight = init({d, d}, resid_std);
      layer.proj(Role::kGate).weight = init({d, ff}, base_std);
      layer.proj(Role::kUp).weight = init({d, ff}, base_std);
      layer.proj(Role::kDown).weight = init({ff, d}, resid_std);
    }
    final_norm_ = Tensor<T>::full({d}, T(1));
    head_ = init({d, cfg_.vocab_size}, base_std);
  }

  MicroLM(const MicroLM&) = delete;
  MicroLM& operator=(const MicroLM&) = delete;
  MicroLM(MicroLM&&) noexcept = default;
  MicroLM& operator=(MicroLM&&) noexcept = default;

  /// Deep copy (parameters and quantizer states) converted to scalar type U.
  template <typename U = T>
  MicroLM<U> clone_as() const {
    MicroLM<U> out(cfg_);
    auto cast = [](const Tensor<T>& t) {
      std::vector<U> v(t.data().begin(), t.data().end());
      Tensor<U> r(t.shape(), std::move(v));
      r.set_requires_grad(t.requires_grad());
      return r;
    };
    out.tok_emb() = cast(tok_emb_);
    out.final_norm() = cast(final_norm_);
    out.head() = cast(head_);
    for (std::size_t l = 0; l < layers_.size(); ++l) {
      auto& dst = out.layer(static_cast<int>(l));
      const auto& src = layers_[l];
      dst.attn_norm = cast(src.attn_norm);
      dst.mlp_norm = cast(src.mlp_norm);
      for (Role r : kAllRoles) {
        dst.proj(r).weight = cast(src.proj(r).weight);
        dst.proj(r).quant = src.proj(r).quant;
        dst.proj(r).act = src.proj(r).act;
      }
    }
    return out;
  }
  MicroLM clone() const { return clone_as<T>(); }

  const ModelConfig& config() const { return cfg_; }
  int n_layers() const { return cfg_.n_layers; }
  DecoderLayer<T>& layer(int i) { return layers_.at(static_cast<std::size_t>(i)); }
  const DecoderLayer<T>& layer(int i) const { return layers_.at(static_cast<std::size_t>(i)); }
  Tensor<T>& tok_emb() { return tok_emb_; }
  Tensor<T>& final_norm() { return final_norm_; }
  Tensor<T>& head() { return head_; }
  const Tensor<T>& tok_emb() const { return tok_emb_; }
  const Tensor<T>& final_norm() const { return final_norm_; }
  const Tensor<T>& head() const { return head_; }

  /// All parameters in a fixed order with stable names.
  std::vector<std::pair<std::string, Tensor<T>>> named_parameters() const {
    std::vector<std::pair<std::string, Tensor<T>>> out;
    out.emplace_back("tok_emb", tok_emb_);
    for (std::size_t l = 0; l < layers_.size(); ++l) {
      const std::string p = "layers." + std::to_string(l) + ".";
      const auto& layer = layers_[l];
      out.emplace_back(p + "attn_norm", layer.attn_norm);
      for (Role r : kAttentionRoles) out.emplace_back(p + std::string(role_param_suffix(r)), layer.proj(r).weight);
      out.emplace_back(p + "mlp_norm", layer.mlp_norm);
      for (Role r : {Role::kGate, Role::kUp, Role::kDown})
        out.emplace_back(p + std::string(role_param_suffix(r)), layer.proj(r).weight);
    }
    out.emplace_back("final_norm", final_norm_);
    out.emplace_back("head", head_);
    return out;
  }

  ProjectionObserver<T>* observer() const { return observer_; }
  void set_observer(ProjectionObserver<T>* obs) { observer_ = obs; }

  /// Enables fake quantization of linear outputs with their activation params.
  /// Only honoured while no tape is recording.
  void set_activation_quant(bool on) { act_quant_ = on; }
  int activation_bits() const { return act_bits_; }
  void set_activation_bits(int bits) { act_bits_ = bits; }
  bool activation_quant() const { return act_quant_; }

  void set_weight_quant_enabled(bool on) {
    for (auto& layer : layers_)
      for (auto& lin : layer.linears)
        if (lin.quant) lin.quant->set_enabled(on);
  }

  /// tokens: batch * seq ids, row-major. Returns logits [batch, seq, vocab].
  Tensor<T> forward(std::span<const std::int32_t> tokens, std::int64_t batch, std::int64_t seq) const {
    if (batch <= 0 || seq <= 0 || static_cast<std::int64_t>(tokens.size()) != batch * seq)
      throw ShapeError("forward: " + std::to_string(tokens.size()) + " tokens for batch " +
                       std::to_string(batch) + " x seq " + std::to_string(seq));
    if (seq > cfg_.max_seq_len)
      throw Error("forward: sequence length " + std::to_string(seq) + " exceeds max_seq_len " +
                  std::to_string(cfg_.max_seq_len));
    for (auto t : tokens)
      if (t < 0 || t >= cfg_.vocab_size)
        throw Error("forward: token id " + std::to_string(t) + " outside vocabulary of " +
                    std::to_string(cfg_.vocab_size));
    const std::int64_t d = cfg_.d_model, h = cfg_.n_heads, hd = cfg_.head_dim();
    std::vector<std::int64_t> positions(static_cast<std::size_t>(seq));
    for (std::int64_t i = 0; i < seq; ++i) positions[i] = i;

    Tensor<T> x = embedding(tok_emb_, tokens);
    for (int l = 0; l < cfg_.n_layers; ++l) {
      try {
        const auto& layer = layers_[static_cast<std::size_t>(l)];
        Tensor<T> a = rmsnorm(x, layer.attn_norm, cfg_.rmsnorm_eps);
        auto heads = [&](const Tensor<T>& t) { return reshape(t, {batch, seq, h, hd}); };
        Tensor<T> q = rope(heads(linear(l, Role::kQ, a)), positions, cfg_.rope_base, 1);
        Tensor<T> k = rope(heads(linear(l, Role::kK, a)), positions, cfg_.rope_base, 1);
        Tensor<T> v = heads(linear(l, Role::kV, a));
        Tensor<T> att = causal_attention<T>(q, k, v, nullptr, HeadLayout::kBatchSeqHead);
        Tensor<T> merged = reshape(att, {batch * seq, d});
        x = add(x, linear(l, Role::kO, merged));
        Tensor<T> m = rmsnorm(x, layer.mlp_norm, cfg_.rmsnorm_eps);
        Tensor<T> gated = mul(silu(linear(l, Role::kGate, m)), linear(l, Role::kUp, m));
        x = add(x, linear(l, Role::kDown, gated));
      } catch (const NonFiniteError& e) {
        throw NonFiniteError("layer " + std::to_string(l) + ": " + e.what());
      }
    }
    x = rmsnorm(x, final_norm_, cfg_.rmsnorm_eps);
    return reshape(matmul(x, head_), {batch, seq, static_cast<std::int64_t>(cfg_.vocab_size)});
  }

 private:
  template <typename U>
  friend class MicroLM;

  explicit MicroLM(const ModelConfig& cfg) : cfg_(cfg), layers_(static_cast<std::size_t>(cfg.n_layers)) {}

  Tensor<T> linear(int l, Role role, const Tensor<T>& x) const {
    const auto& lin = layers_[static_cast<std::size_t>(l)].proj(role);
    Tensor<T> w = lin.quant ? fake_quant(lin.weight, *lin.quant) : lin.weight;
    Tensor<T> out = matmul(x, w);
    if (act_quant_ && lin.act && Tape<T>::current() == nullptr)
      out = quantize_dequantize(out, QuantizerState(activation_scheme(act_bits_), *lin.act));
    if (observer_ != nullptr) observer_->on_projection(l, role, out);
    return out;
  }

 public:
  static QuantScheme activation_scheme(int bits = 16) {
    return QuantScheme::per_tensor(bits, Symmetry::kAsymmetric);
  }

 private:
  ModelConfig cfg_;
  Tensor<T> tok_emb_;
  std::vector<DecoderLayer<T>> layers_;
  Tensor<T> final_norm_;
  Tensor<T> head_;
  ProjectionObserver<T>* observer_ = nullptr;
  bool act_quant_ = false;
  int act_bits_ = 16;
};

/// Which weights receive quantizers and how they are calibrated.
struct QuantPolicy {
  std::set<Role> roles{kAllRoles.begin(), kAllRoles.end()};
  CalibrationMethod method = CalibrationMethod::kMse;
  int grid_points = 101;
};

/// Per-output-channel weight quantization on axis 1 of the [in, out] weights.
inline QuantScheme default_weight_scheme(int bits = 4) {
  return QuantScheme::per_channel_on(bits, Symmetry::kSymmetricSigned, 1);
}

/// Calibrates and attaches a weight quantizer to every weight selected by the
/// policy. Returns the number of quantizers attached.
template <typename T>
int attach_quantizers(MicroLM<T>& model, const QuantScheme& scheme, const QuantPolicy& policy) {
  int count = 0;
  for (int l = 0; l < model.n_layers(); ++l) {
    for (Role r : kAllRoles) {
      auto& lin = model.layer(l).proj(r);
      if (!policy.roles.count(r)) {
        lin.quant.reset();
        continue;
      }
      lin.quant = QuantizerState(scheme, calibrate(lin.weight, scheme, policy.method, policy.grid_points));
      ++count;
    }
  }
  return count;
}

inline QuantPolicy policy_from_names(const std::vector<std::string>& names, CalibrationMethod method,
                                     int grid_points = 101) {
  QuantPolicy p;
  p.roles.clear();
  for (const auto& n : names) p.roles.insert(role_from_string(n));
  p.method = method;
  p.grid_points = grid_points;
  return p;
}

namespace detail {

template <typename T>
class RangeObserver : public ProjectionObserver<T> {
 public:
  explicit RangeObserver(int layers) : lo_(static_cast<std::size_t>(layers)), hi_(lo_.size()) {
    for (auto& a : lo_) a.fill(std::numeric_limits<double>::infinity());
    for (auto& a : hi_) a.fill(-std::numeric_limits<double>::infinity());
  }
  void on_projection(int layer, Role role, Tensor<T>& out) override {
    auto& lo = lo_[static_cast<std::size_t>(layer)][static_cast<std::size_t>(role)];
    auto& hi = hi_[static_cast<std::size_t>(layer)][static_cast<std::size_t>(role)];
    for (const T v : out.data()) {
      lo = std::min(lo, static_cast<double>(v));
      hi = std::max(hi, static_cast<double>(v));
    }
  }
  std::vector<std::array<double, 7>> lo_, hi_;
};

}  // namespace detail

/// One batch of token windows, [batch * seq] row-major.
struct TokenBatch {
  std::vector<std::int32_t> tokens;
  std::int64_t batch = 0;
  std::int64_t seq = 0;
};

/// Observes min/max of every linear output over `sample` and stores per-tensor
/// asymmetric activation params of the given bitwidth on each linear layer.
template <typename T>
void calibrate_activations_minmax(MicroLM<T>& model, const std::vector<TokenBatch>& sample, int bitwidth = 16) {
  if (sample.empty()) throw Error("calibrate_activations_minmax: empty calibration sample");
  detail::RangeObserver<T> obs(model.n_layers());
  auto* prev = model.observer();
  const bool prev_act = model.activation_quant();
  model.set_observer(&obs);
  model.set_activation_quant(false);
  {
    NoGrad<T> off;
    for (const auto& b : sample) model.forward(b.tokens, b.batch, b.seq);
  }
  model.set_observer(prev);
  model.set_activation_quant(prev_act);
  const QuantScheme scheme = MicroLM<T>::activation_scheme(bitwidth);
  model.set_activation_bits(bitwidth);
  for (int l = 0; l < model.n_layers(); ++l)
    for (Role r : kAllRoles) {
      QuantParams p{{0.0}, {0}};
      params_from_range(obs.lo_[l][static_cast<std::size_t>(r)], obs.hi_[l][static_cast<std::size_t>(r)], scheme,
                        p.scale[0], p.zero_point[0]);
      model.layer(l).proj(r).act = p;
    }
}

}  // namespace qatf
