// SPDX-FileCopyrightText: (c) 2026 The qatf Authors
//
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <span>
#include <string>
#include <vector>

#include "qatf/model.hpp"

namespace qatf {

// Byte-level tokenizer: content bytes map to ids 0..255.
inline constexpr std::int32_t kBos = 256;
inline constexpr std::int32_t kEos = 257;
inline constexpr std::int32_t kPad = 258;
inline constexpr int kByteVocab = 259;

/// [BOS, bytes...]
inline std::vector<std::int32_t> tokenize(std::span<const std::uint8_t> bytes) {
  std::vector<std::int32_t> ids;
  ids.reserve(bytes.size() + 1);
  ids.push_back(kBos);
  for (auto b : bytes) ids.push_back(b);
  return ids;
}

inline std::vector<std::int32_t> tokenize(std::string_view text) {
  return tokenize(std::span<const std::uint8_t>(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

/// Inverse of tokenize. A single leading BOS is dropped; any other special
/// token is an error.
inline std::string detokenize(std::span<const std::int32_t> ids) {
  std::string out;
  out.reserve(ids.size());
  for (std::size_t i = 0; i < ids.size(); ++i) {
    const auto id = ids[i];
    if (i == 0 && id == kBos) continue;
    if (id < 0 || id > 255)
      throw Error("detokenize: token " + std::to_string(id) + " at position " + std::to_string(i) +
                  " is not a content byte");
    out.push_back(static_cast<char>(static_cast<std::uint8_t>(id)));
  }
  return out;
}

/// Train / held-out token streams. Each source file is split at
/// floor(size * train_fraction) bytes; each segment is tokenized as its own
/// document.
struct Corpus {
  std::vector<std::string> sources;
  double train_fraction = 0.95;
  std::vector<std::int32_t> train;
  std::vector<std::int32_t> heldout;

  const std::vector<std::int32_t>& split(const std::string& name) const {
    if (name == "train") return train;
    if (name == "heldout") return heldout;
    throw Error("unknown corpus split '" + name + "'");
  }
};

inline std::string read_file_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open '" + path.string() + "'");
  return std::string(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

inline Corpus load_corpus(const std::vector<std::string>& paths, double train_fraction = 0.95) {
  if (paths.empty()) throw Error("corpus: no source files");
  if (!(train_fraction > 0 && train_fraction < 1)) throw Error("corpus: train fraction must lie in (0, 1)");
  Corpus c;
  c.sources = paths;
  c.train_fraction = train_fraction;
  for (const auto& p : paths) {
    if (!std::filesystem::exists(p)) throw Error("corpus file not found: '" + p + "'");
    const std::string bytes = read_file_bytes(p);
    const auto cut = static_cast<std::size_t>(std::floor(static_cast<double>(bytes.size()) * train_fraction));
    const std::string_view all(bytes);
    if (cut > 0) {
      auto t = tokenize(all.substr(0, cut));
      c.train.insert(c.train.end(), t.begin(), t.end());
    }
    if (cut < bytes.size()) {
      auto h = tokenize(all.substr(cut));
      c.heldout.insert(c.heldout.end(), h.begin(), h.end());
    }
  }
  if (c.heldout.size() < 2) throw Error("corpus: held-out split is empty");
  if (c.train.size() < 2) throw Error("corpus: train split is empty");
  return c;
}

struct EvalConfig {
  int context_length = 256;
  int stride = 0;  // 0 means context_length (non-overlapping windows)
  int batch_size = 8;

  int effective_stride() const { return stride > 0 ? stride : context_length; }

  void validate(int max_seq_len) const {
    if (context_length <= 0 || context_length > max_seq_len)
      throw Error("eval config: context_length must lie in (0, max_seq_len]");
    if (stride < 0 || effective_stride() > context_length)
      throw Error("eval config: stride must lie in (0, context_length]");
    if (batch_size <= 0) throw Error("eval config: batch_size must be positive");
  }

  bool operator==(const EvalConfig&) const = default;
};

/// One evaluation window: inputs tokens[begin, begin + length); the targets at
/// stream positions [score_from, begin + length] are scored.
struct EvalWindow {
  std::int64_t begin = 0;
  std::int64_t length = 0;
  std::int64_t score_from = 0;
};

inline std::vector<EvalWindow> eval_windows(std::int64_t n_tokens, const EvalConfig& cfg) {
  std::vector<EvalWindow> out;
  if (n_tokens < 2) return out;
  const std::int64_t last_target = n_tokens - 1;
  std::int64_t scored_to = 0;  // highest target position already scored
  for (std::int64_t b = 0; scored_to < last_target; b += cfg.effective_stride()) {
    const std::int64_t len = std::min<std::int64_t>(cfg.context_length, last_target - b);
    const std::int64_t end = b + len;  // last target position of this window
    if (end > scored_to) out.push_back({b, len, std::max(scored_to + 1, b + 1)});
    scored_to = std::max(scored_to, end);
  }
  return out;
}

struct EvalResult {
  std::string split;
  double ppl = 0.0;
  double nll = 0.0;  // total, natural log
  std::int64_t tokens = 0;
  int context_length = 0;
};

/// Teacher-forced perplexity exp(total NLL / predicted tokens). Windows are
/// batched by equal length; NLL is accumulated in window order.
template <typename T>
EvalResult perplexity(const MicroLM<T>& model, std::span<const std::int32_t> stream, const EvalConfig& cfg,
                      const std::string& split = "heldout") {
  cfg.validate(model.config().max_seq_len);
  if (stream.size() < 2) throw Error("perplexity: split '" + split + "' is empty");
  NoGrad<T> off;
  const auto windows = eval_windows(static_cast<std::int64_t>(stream.size()), cfg);
  std::vector<double> window_nll(windows.size(), 0.0);
  std::int64_t counted = 0;
  const std::int64_t vocab = model.config().vocab_size;
  std::size_t i = 0;
  while (i < windows.size()) {
    std::size_t j = i;
    while (j < windows.size() && j - i < static_cast<std::size_t>(cfg.batch_size) &&
           windows[j].length == windows[i].length)
      ++j;
    const std::int64_t len = windows[i].length;
    const auto nb = static_cast<std::int64_t>(j - i);
    std::vector<std::int32_t> tokens;
    tokens.reserve(static_cast<std::size_t>(nb * len));
    for (std::size_t w = i; w < j; ++w)
      tokens.insert(tokens.end(), stream.begin() + windows[w].begin, stream.begin() + windows[w].begin + len);
    Tensor<T> logp = log_softmax(model.forward(tokens, nb, len));
    auto lp = logp.data();
    for (std::size_t w = i; w < j; ++w) {
      const auto& win = windows[w];
      const std::int64_t row0 = static_cast<std::int64_t>(w - i) * len;
      double acc = 0.0;
      for (std::int64_t pos = win.score_from; pos <= win.begin + len; ++pos) {
        const std::int64_t row = row0 + (pos - 1 - win.begin);
        acc -= static_cast<double>(lp[row * vocab + stream[pos]]);
        ++counted;
      }
      window_nll[w] = acc;
    }
    i = j;
  }
  EvalResult r;
  r.split = split;
  for (double v : window_nll) r.nll += v;
  r.tokens = counted;
  r.ppl = std::exp(r.nll / static_cast<double>(counted));
  r.context_length = cfg.context_length;
  return r;
}

}  // namespace qatf
