// SPDX-FileCopyrightText: (c) 2026 The qatf Authors
//
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "qatf/model.hpp"

// Signal-propagation probes on the q/k/v/o projection outputs: the mean of
// the forward activation and the squared Frobenius norm of the loss gradient
// with respect to that activation.

namespace qatf {

enum class Stat { kFwdMean, kGradNormSq };

inline std::string_view stat_name(Stat s) { return s == Stat::kFwdMean ? "fwd_mean" : "grad_norm_sq"; }

inline Stat stat_from_string(std::string_view s) {
  if (s == "fwd_mean") return Stat::kFwdMean;
  if (s == "grad_norm_sq") return Stat::kGradNormSq;
  throw Error("unknown statistic '" + std::string(s) + "'");
}

struct TraceRecord {
  std::int64_t step = 0;
  int layer_id = 0;
  Role proj = Role::kQ;
  Stat stat = Stat::kFwdMean;
  double value = 0.0;

  bool operator==(const TraceRecord&) const = default;
};

inline constexpr const char* kTraceHeader = "step,layer_id,proj,stat,value";

/// One CSV line (no newline); values carry 9 significant digits.
inline std::string format_trace_record(const TraceRecord& r) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.9g", r.value);
  std::string line = std::to_string(r.step);
  line += ',';
  line += std::to_string(r.layer_id);
  line += ',';
  line += role_name(r.proj);
  line += ',';
  line += stat_name(r.stat);
  line += ',';
  line += buf;
  return line;
}

/// Squared Frobenius norm of the gradient held by `output`.
template <typename T>
double grad_norm_sq(const Tensor<T>& output) {
  if (!output.defined() || !output.has_grad()) throw Error("grad_norm_sq: tensor has no gradient");
  double acc = 0.0;
  for (const T g : output.grad()) acc += static_cast<double>(g) * static_cast<double>(g);
  return acc;
}

template <typename T>
double fwd_mean(const Tensor<T>& output) {
  if (!output.defined() || output.numel() == 0) throw Error("fwd_mean: empty tensor");
  double acc = 0.0;
  for (const T v : output.data()) acc += static_cast<double>(v);
  return acc / static_cast<double>(output.numel());
}

/// Append-only trace writer. Records must arrive in non-decreasing step order;
/// an empty path keeps them in memory only.
class TraceSink {
 public:
  explicit TraceSink(std::filesystem::path path = {}, std::size_t flush_every = 512)
      : path_(std::move(path)), flush_every_(flush_every) {
    if (!path_.empty()) {
      out_.open(path_, std::ios::binary | std::ios::trunc);
      if (!out_) throw Error("trace: cannot open '" + path_.string() + "' for writing");
      out_ << kTraceHeader << '\n';
    }
  }
  TraceSink(const TraceSink&) = delete;
  TraceSink& operator=(const TraceSink&) = delete;
  ~TraceSink() {
    try {
      flush();
    } catch (...) {
    }
  }

  void append(const TraceRecord& r) {
    if (!std::isfinite(r.value))
      throw NonFiniteError("trace: non-finite " + std::string(stat_name(r.stat)) + " at step " +
                           std::to_string(r.step) + ", layer " + std::to_string(r.layer_id) + ", proj " +
                           std::string(role_name(r.proj)));
    if (!records_.empty() && r.step < records_.back().step) throw Error("trace: records must arrive in step order");
    records_.push_back(r);
    pending_.push_back(r);
    if (pending_.size() >= flush_every_) flush();
  }

  void flush() {
    if (out_.is_open()) {
      for (const auto& r : pending_) out_ << format_trace_record(r) << '\n';
      out_.flush();
    }
    pending_.clear();
  }

  const std::vector<TraceRecord>& records() const { return records_; }
  const std::filesystem::path& path() const { return path_; }

 private:
  std::filesystem::path path_;
  std::size_t flush_every_;
  std::ofstream out_;
  std::vector<TraceRecord> records_;
  std::vector<TraceRecord> pending_;
};

/// Observer that records fwd_mean at forward time and grad_norm_sq once the
/// training step's backward pass has run. Sampling happens on steps that are
/// multiples of every_n_steps.
template <typename T>
class SignalProbe final : public ProjectionObserver<T> {
 public:
  SignalProbe(MicroLM<T>& model, TraceSink& sink, std::set<Role> roles, int every_n_steps)
      : model_(&model), sink_(&sink), roles_(std::move(roles)), every_n_(every_n_steps) {
    if (every_n_ <= 0) throw Error("probe: every_n_steps must be positive");
    for (Role r : roles_)
      if (is_mlp_role(r)) throw Error("probe: only q/k/v/o projections can be probed");
    if (model.observer() != nullptr) throw Error("probe: model already has probes installed");
    model.set_observer(this);
  }
  SignalProbe(const SignalProbe&) = delete;
  SignalProbe& operator=(const SignalProbe&) = delete;
  ~SignalProbe() override {
    if (model_->observer() == this) model_->set_observer(nullptr);
  }

  void begin_step(std::int64_t step) {
    step_ = step;
    active_ = step % every_n_ == 0;
    pending_.clear();
  }

  void on_projection(int layer, Role role, Tensor<T>& output) override {
    if (!active_ || !roles_.count(role)) return;
    // The gradient at this activation is needed even when nothing upstream
    // is trainable; marking it only adds records, never changes other grads.
    if (Tape<T>::current() != nullptr) output.set_requires_grad(true);
    pending_.push_back({layer, role, fwd_mean(output), output});
  }

  /// Emits this step's records ordered by (layer, proj, stat).
  void end_step() {
    if (!active_) return;
    std::stable_sort(pending_.begin(), pending_.end(), [](const Pending& a, const Pending& b) {
      return a.layer != b.layer ? a.layer < b.layer : a.role < b.role;
    });
    for (const auto& p : pending_) {
      sink_->append({step_, p.layer, p.role, Stat::kFwdMean, p.mean});
      sink_->append({step_, p.layer, p.role, Stat::kGradNormSq, grad_norm_sq(p.output)});
    }
    pending_.clear();
    active_ = false;
  }

  const std::set<Role>& roles() const { return roles_; }
  int every_n_steps() const { return every_n_; }

 private:
  struct Pending {
    int layer;
    Role role;
    double mean;
    Tensor<T> output;
  };

  MicroLM<T>* model_;
  TraceSink* sink_;
  std::set<Role> roles_;
  int every_n_;
  std::int64_t step_ = 0;
  bool active_ = false;
  std::vector<Pending> pending_;
};

template <typename T>
std::unique_ptr<SignalProbe<T>> install_probes(MicroLM<T>& model, TraceSink& sink,
                                               std::set<Role> roles = {kAttentionRoles.begin(), kAttentionRoles.end()},
                                               int every_n_steps = 10) {
  return std::make_unique<SignalProbe<T>>(model, sink, std::move(roles), every_n_steps);
}

/// Number of records a probed run of `steps` steps produces.
inline std::int64_t expected_trace_records(int layers, int roles, std::int64_t steps, int every_n) {
  return static_cast<std::int64_t>(layers) * roles * 2 * ((steps + every_n - 1) / every_n);
}

class TraceParseError : public Error {
 public:
  TraceParseError(std::size_t line, const std::string& what)
      : Error("trace line " + std::to_string(line) + ": " + what), line_(line) {}
  std::size_t line() const { return line_; }

 private:
  std::size_t line_;
};

inline std::vector<TraceRecord> parse_trace(std::istream& in) {
  std::vector<TraceRecord> out;
  std::string line;
  std::size_t lineno = 0;
  if (!std::getline(in, line)) return out;
  ++lineno;
  if (line != kTraceHeader) throw TraceParseError(lineno, "expected header '" + std::string(kTraceHeader) + "'");
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) f.push_back(cell);
    if (f.size() != 5) throw TraceParseError(lineno, "expected 5 fields, got " + std::to_string(f.size()));
    TraceRecord r;
    try {
      std::size_t used = 0;
      r.step = std::stoll(f[0], &used);
      if (used != f[0].size()) throw std::invalid_argument("step");
      r.layer_id = std::stoi(f[1], &used);
      if (used != f[1].size()) throw std::invalid_argument("layer_id");
      r.proj = role_from_string(f[2]);
      if (is_mlp_role(r.proj)) throw Error("proj");
      r.stat = stat_from_string(f[3]);
      r.value = std::stod(f[4], &used);
      if (used != f[4].size()) throw std::invalid_argument("value");
    } catch (const std::exception&) {
      throw TraceParseError(lineno, "malformed row '" + line + "'");
    }
    if (!std::isfinite(r.value)) throw TraceParseError(lineno, "non-finite value");
    out.push_back(r);
  }
  return out;
}

inline std::vector<TraceRecord> read_trace(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("trace: cannot open '" + path.string() + "'");
  return parse_trace(in);
}

inline double median_of(std::vector<double> v) {
  if (v.empty()) return std::nan("");
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 == 1 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

/// Per-layer medians of grad_norm_sq and the o/v-versus-q/k ratios.
struct LayerSummary {
  int layer_id = 0;
  std::map<Role, double> median_grad_norm_sq;
  double ratio_o_q = std::nan("");
  double ratio_o_k = std::nan("");
  double ratio_v_q = std::nan("");
  double ratio_v_k = std::nan("");
};

struct TraceReport {
  // series[(layer, stat)][step][proj] = value
  std::map<std::pair<int, Stat>, std::map<std::int64_t, std::map<Role, double>>> series;
  std::vector<LayerSummary> summary;
  std::set<Role> projections;
  bool empty() const { return series.empty(); }
};

inline TraceReport trace_report(const std::vector<TraceRecord>& records) {
  TraceReport rep;
  std::map<int, std::map<Role, std::vector<double>>> grads;
  for (const auto& r : records) {
    auto& cell = rep.series[{r.layer_id, r.stat}][r.step];
    if (cell.count(r.proj))
      throw Error("trace: duplicate record for step " + std::to_string(r.step) + ", layer " +
                  std::to_string(r.layer_id) + ", " + std::string(role_name(r.proj)) + ", " +
                  std::string(stat_name(r.stat)));
    cell[r.proj] = r.value;
    rep.projections.insert(r.proj);
    if (r.stat == Stat::kGradNormSq) grads[r.layer_id][r.proj].push_back(r.value);
  }
  auto ratio = [](const std::map<Role, double>& m, Role a, Role b) {
    if (!m.count(a) || !m.count(b) || m.at(b) == 0.0) return std::nan("");
    return m.at(a) / m.at(b);
  };
  for (const auto& [layer, per_role] : grads) {
    LayerSummary s;
    s.layer_id = layer;
    for (const auto& [role, values] : per_role) s.median_grad_norm_sq[role] = median_of(values);
    s.ratio_o_q = ratio(s.median_grad_norm_sq, Role::kO, Role::kQ);
    s.ratio_o_k = ratio(s.median_grad_norm_sq, Role::kO, Role::kK);
    s.ratio_v_q = ratio(s.median_grad_norm_sq, Role::kV, Role::kQ);
    s.ratio_v_k = ratio(s.median_grad_norm_sq, Role::kV, Role::kK);
    rep.summary.push_back(std::move(s));
  }
  return rep;
}

namespace detail {

inline std::string fmt9(double v) {
  if (std::isnan(v)) return "nan";
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.9g", v);
  return buf;
}

inline void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot write '" + path.string() + "'");
  out << text;
}

}  // namespace detail

inline std::string series_file_name(const std::string& prefix, int layer, Stat stat) {
  return prefix + "layer" + std::to_string(layer) + "_" + std::string(stat_name(stat)) + ".csv";
}

/// Writes `<prefix>layer<L>_<stat>.csv` (columns step + one per projection)
/// and `<prefix>summary.csv`. Returns the files written, summary last.
inline std::vector<std::filesystem::path> write_trace_report(const TraceReport& rep, const std::filesystem::path& dir,
                                                             const std::string& prefix = "") {
  std::filesystem::create_directories(dir);
  std::vector<std::filesystem::path> files;
  std::vector<Role> cols;
  for (Role r : kAttentionRoles)
    if (rep.projections.count(r)) cols.push_back(r);
  for (const auto& [key, steps] : rep.series) {
    std::string text = "step";
    for (Role r : cols) text += "," + std::string(role_name(r));
    text += '\n';
    for (const auto& [step, vals] : steps) {
      text += std::to_string(step);
      for (Role r : cols) text += "," + (vals.count(r) ? detail::fmt9(vals.at(r)) : std::string());
      text += '\n';
    }
    auto path = dir / series_file_name(prefix, key.first, key.second);
    detail::write_text(path, text);
    files.push_back(path);
  }
  std::string text = "layer_id,median_q,median_k,median_v,median_o,o/q,o/k,v/q,v/k\n";
  for (const auto& s : rep.summary) {
    text += std::to_string(s.layer_id);
    for (Role r : kAttentionRoles)
      text += "," + (s.median_grad_norm_sq.count(r) ? detail::fmt9(s.median_grad_norm_sq.at(r)) : std::string("nan"));
    text += "," + detail::fmt9(s.ratio_o_q) + "," + detail::fmt9(s.ratio_o_k) + "," + detail::fmt9(s.ratio_v_q) + "," +
            detail::fmt9(s.ratio_v_k) + "\n";
  }
  auto path = dir / (prefix + "summary.csv");
  detail::write_text(path, text);
  files.push_back(path);
  return files;
}

/// For several labelled runs, writes `overlay_layer<L>_<stat>_<proj>.csv`
/// with columns step,<label1>,<label2>,... over the union of sampled steps.
inline std::vector<std::filesystem::path> write_overlay(
    const std::vector<std::pair<std::string, TraceReport>>& runs, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  std::set<std::pair<int, Stat>> keys;
  std::set<Role> projs;
  for (const auto& [label, rep] : runs) {
    for (const auto& [key, _] : rep.series) keys.insert(key);
    projs.insert(rep.projections.begin(), rep.projections.end());
  }
  std::vector<std::filesystem::path> files;
  for (const auto& key : keys) {
    for (Role r : kAttentionRoles) {
      if (!projs.count(r)) continue;
      std::set<std::int64_t> steps;
      for (const auto& [label, rep] : runs)
        if (auto it = rep.series.find(key); it != rep.series.end())
          for (const auto& [step, _] : it->second) steps.insert(step);
      std::string text = "step";
      for (const auto& [label, _] : runs) text += "," + label;
      text += '\n';
      for (auto step : steps) {
        text += std::to_string(step);
        for (const auto& [label, rep] : runs) {
          std::string cell;
          if (auto it = rep.series.find(key); it != rep.series.end())
            if (auto st = it->second.find(step); st != it->second.end())
              if (auto v = st->second.find(r); v != st->second.end()) cell = detail::fmt9(v->second);
          text += "," + cell;
        }
        text += '\n';
      }
      auto path = dir / ("overlay_layer" + std::to_string(key.first) + "_" + std::string(stat_name(key.second)) + "_" +
                         std::string(role_name(r)) + ".csv");
      detail::write_text(path, text);
      files.push_back(path);
    }
  }
  return files;
}

}  // namespace qatf
