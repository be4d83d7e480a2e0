// SPDX-FileCopyrightText: (c) 2026 The qatf Authors
//
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <functional>
#include <map>
#include <random>
#include <set>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "qatf/eval.hpp"
#include "qatf/model.hpp"
#include "qatf/probe.hpp"

namespace qatf {

/// Projection roles held at their post-training-quantization values.
struct FreezePlan {
  std::string name = "none";
  std::set<Role> frozen;

  static const std::vector<std::string>& preset_names() {
    static const std::vector<std::string> names = {"none", "o", "v", "ov", "qkv", "oqkv"};
    return names;
  }

  static FreezePlan preset(const std::string& name) {
    if (name == "none") return {name, {}};
    if (name == "o") return {name, {Role::kO}};
    if (name == "v") return {name, {Role::kV}};
    if (name == "ov") return {name, {Role::kO, Role::kV}};
    if (name == "qkv") return {name, {Role::kQ, Role::kK, Role::kV}};
    if (name == "oqkv") return {name, {Role::kO, Role::kQ, Role::kK, Role::kV}};
    throw Error("unknown freeze preset '" + name + "' (expected none, o, v, ov, qkv or oqkv)");
  }

  /// Custom plan from role names among q, k, v, o and mlp.
  static FreezePlan from_roles(const std::vector<std::string>& roles) {
    FreezePlan p;
    p.name.clear();
    for (const auto& r : roles) {
      if (r == "mlp") {
        p.frozen.insert({Role::kGate, Role::kUp, Role::kDown});
      } else if (r == "q" || r == "k" || r == "v" || r == "o") {
        p.frozen.insert(role_from_string(r));
      } else {
        throw Error("freeze plan: unknown role '" + r + "' (expected q, k, v, o or mlp)");
      }
      p.name += r;
    }
    if (p.name.empty()) p.name = "none";
    return p;
  }

  bool is_frozen(Role r) const { return frozen.count(r) != 0; }
};

struct KDLossConfig {
  double alpha_ce = 1.0;
  double beta_kl = 1.0;
  double temperature = 1.0;

  void validate() const {
    if (!(alpha_ce >= 0) || !(beta_kl >= 0)) throw Error("kd loss: weights must be non-negative");
    if (!(alpha_ce + beta_kl > 0)) throw Error("kd loss: alpha_ce + beta_kl must be positive");
    if (!(temperature > 0)) throw Error("kd loss: temperature must be positive");
  }
  bool operator==(const KDLossConfig&) const = default;
};

struct TrainConfig {
  int steps = 2000;
  int batch_size = 2;
  int seq_len = 256;
  double learning_rate = 3e-4;
  int warmup_steps = 100;
  bool decay_to_zero = false;  // linear decay after warmup instead of a constant rate
  std::uint64_t seed = 0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double grad_clip = 1.0;  // 0 disables clipping
  int trace_every = 10;
  int eval_every = 0;          // 0: evaluate at the end only
  bool train_fp_params = false;  // also train embeddings, norms and head
  bool cache_teacher_logits = false;
  std::int64_t teacher_cache_mb = 512;

  void validate() const {
    if (steps < 0) throw Error("train config: steps must be non-negative");
    if (batch_size <= 0 || seq_len <= 0) throw Error("train config: batch_size and seq_len must be positive");
    if (!(learning_rate >= 0)) throw Error("train config: learning_rate must be non-negative");
    if (warmup_steps < 0) throw Error("train config: warmup_steps must be non-negative");
    if (!(beta1 >= 0 && beta1 < 1) || !(beta2 >= 0 && beta2 < 1)) throw Error("train config: betas must lie in [0, 1)");
    if (!(eps > 0)) throw Error("train config: eps must be positive");
    if (!(grad_clip >= 0)) throw Error("train config: grad_clip must be non-negative");
    if (trace_every <= 0) throw Error("train config: trace_every must be positive");
    if (eval_every < 0) throw Error("train config: eval_every must be non-negative");
    if (teacher_cache_mb < 0) throw Error("train config: teacher_cache_mb must be non-negative");
  }
  bool operator==(const TrainConfig&) const = default;
};

/// Loss value together with its two components (token means, before weighting).
template <typename T>
struct KDLoss {
  Tensor<T> loss;
  double ce = 0.0;
  double kl = 0.0;
};

/// alpha·CE(student, labels) + beta·T²·KL(softmax(teacher/T) ‖ softmax(student/T)),
/// averaged over tokens. Logits are [..., V]; labels has one id per row.
template <typename T>
KDLoss<T> kd_loss_parts(const Tensor<T>& student, const Tensor<T>& teacher, std::span<const std::int32_t> labels,
                        const KDLossConfig& cfg) {
  cfg.validate();
  if (student.shape() != teacher.shape())
    throw ShapeError("kd_loss: student logits " + shape_str(student.shape()) + " vs teacher logits " +
                     shape_str(teacher.shape()));
  if (teacher.requires_grad()) throw Error("kd_loss: teacher logits must not carry a gradient");
  const std::int64_t vocab = student.dim(-1);
  const std::int64_t rows = student.numel() / vocab;
  if (static_cast<std::int64_t>(labels.size()) != rows)
    throw ShapeError("kd_loss: " + std::to_string(labels.size()) + " labels for " + std::to_string(rows) + " rows");
  for (std::size_t i = 0; i < labels.size(); ++i)
    if (labels[i] < 0 || labels[i] >= vocab)
      throw Error("kd_loss: label " + std::to_string(labels[i]) + " at row " + std::to_string(i) +
                  " outside vocabulary of " + std::to_string(vocab));

  const double tau = cfg.temperature;
  const bool need_kl = cfg.beta_kl > 0;
  auto s = student.data();
  auto t = teacher.data();
  // Per-row softmax of student (T=1), student/T and teacher/T, kept for backward.
  std::vector<T> p1(s.size()), qs(need_kl ? s.size() : 0), pt(need_kl ? s.size() : 0);
  double ce_sum = 0.0, kl_sum = 0.0;
  std::vector<double> ls(static_cast<std::size_t>(vocab)), lt(static_cast<std::size_t>(vocab));
  auto log_softmax_row = [&](const T* z, double scale, std::vector<double>& out) {
    double m = -std::numeric_limits<double>::infinity();
    for (std::int64_t j = 0; j < vocab; ++j) m = std::max(m, static_cast<double>(z[j]) / scale);
    double acc = 0.0;
    for (std::int64_t j = 0; j < vocab; ++j) acc += std::exp(static_cast<double>(z[j]) / scale - m);
    const double lse = m + std::log(acc);
    for (std::int64_t j = 0; j < vocab; ++j) out[j] = static_cast<double>(z[j]) / scale - lse;
  };
  for (std::int64_t r = 0; r < rows; ++r) {
    const T* zs = s.data() + r * vocab;
    const T* zt = t.data() + r * vocab;
    log_softmax_row(zs, 1.0, ls);
    ce_sum -= ls[static_cast<std::size_t>(labels[r])];
    for (std::int64_t j = 0; j < vocab; ++j) p1[r * vocab + j] = static_cast<T>(std::exp(ls[j]));
    if (need_kl) {
      if (tau != 1.0) log_softmax_row(zs, tau, ls);
      log_softmax_row(zt, tau, lt);
      double kl = 0.0;
      for (std::int64_t j = 0; j < vocab; ++j) {
        const double ptj = std::exp(lt[j]);
        if (ptj > 0) kl += ptj * (lt[j] - ls[j]);
        qs[r * vocab + j] = static_cast<T>(std::exp(ls[j]));
        pt[r * vocab + j] = static_cast<T>(ptj);
      }
      kl_sum += std::max(kl, 0.0);
    }
  }
  const double n = static_cast<double>(rows);
  KDLoss<T> out;
  out.ce = ce_sum / n;
  out.kl = kl_sum / n;
  const double value = cfg.alpha_ce * out.ce + cfg.beta_kl * tau * tau * out.kl;
  std::vector<std::int32_t> lab(labels.begin(), labels.end());
  out.loss = record_op<T>(
      "kd_loss", Tensor<T>::scalar(static_cast<T>(value)), {&student},
      [student, p1 = std::move(p1), qs = std::move(qs), pt = std::move(pt), lab = std::move(lab), cfg, vocab, rows,
       need_kl](std::span<const T> g) {
        auto gs = student.grad_buffer();
        const double a = cfg.alpha_ce * static_cast<double>(g[0]) / static_cast<double>(rows);
        const double b = cfg.beta_kl * cfg.temperature * static_cast<double>(g[0]) / static_cast<double>(rows);
        for (std::int64_t r = 0; r < rows; ++r) {
          for (std::int64_t j = 0; j < vocab; ++j) {
            const std::size_t i = static_cast<std::size_t>(r * vocab + j);
            double d = a * (static_cast<double>(p1[i]) - (j == lab[static_cast<std::size_t>(r)] ? 1.0 : 0.0));
            if (need_kl) d += b * (static_cast<double>(qs[i]) - static_cast<double>(pt[i]));
            gs[i] += static_cast<T>(d);
          }
        }
      });
  return out;
}

template <typename T>
Tensor<T> kd_loss(const Tensor<T>& student, const Tensor<T>& teacher, std::span<const std::int32_t> labels,
                  const KDLossConfig& cfg = {}) {
  return kd_loss_parts(student, teacher, labels, cfg).loss;
}

/// Plain token-mean cross entropy (teacher pretraining).
template <typename T>
Tensor<T> cross_entropy(const Tensor<T>& logits, std::span<const std::int32_t> labels) {
  return kd_loss_parts(logits, Tensor<T>::zeros(logits.shape()), labels, KDLossConfig{1.0, 0.0, 1.0}).loss;
}

/// Parameters selected for optimization, in model order.
template <typename T>
using ParamList = std::vector<std::pair<std::string, Tensor<T>>>;

/// Marks frozen roles' weights as non-trainable and freezes their quantizer
/// params. Returns the parameters the optimizer should update. By default
/// only linear weights train; `train_fp_params` adds embeddings, norms and
/// the output head.
template <typename T>
ParamList<T> apply_freeze(MicroLM<T>& model, const FreezePlan& plan, bool train_fp_params = false) {
  ParamList<T> out;
  auto add = [&](const std::string& name, Tensor<T>& t, bool on) {
    t.set_requires_grad(on);
    if (on) out.emplace_back(name, t);
  };
  add("tok_emb", model.tok_emb(), train_fp_params);
  for (int l = 0; l < model.n_layers(); ++l) {
    auto& layer = model.layer(l);
    const std::string p = "layers." + std::to_string(l) + ".";
    add(p + "attn_norm", layer.attn_norm, train_fp_params);
    for (Role r : kAttentionRoles) {
      auto& lin = layer.proj(r);
      const bool frozen = plan.is_frozen(r);
      if (frozen && lin.quant) lin.quant->freeze();
      add(p + std::string(role_param_suffix(r)), lin.weight, !frozen);
    }
    add(p + "mlp_norm", layer.mlp_norm, train_fp_params);
    for (Role r : {Role::kGate, Role::kUp, Role::kDown}) {
      auto& lin = layer.proj(r);
      const bool frozen = plan.is_frozen(r);
      if (frozen && lin.quant) lin.quant->freeze();
      add(p + std::string(role_param_suffix(r)), lin.weight, !frozen);
    }
  }
  add("final_norm", model.final_norm(), train_fp_params);
  add("head", model.head(), train_fp_params);
  return out;
}

/// Every parameter trainable (teacher pretraining).
template <typename T>
ParamList<T> all_parameters_trainable(MicroLM<T>& model) {
  ParamList<T> out = model.named_parameters();
  for (auto& [name, t] : out) t.set_requires_grad(true);
  return out;
}

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

template <typename T>
class Adam {
 public:
  Adam(ParamList<T> params, AdamConfig cfg = {}) : params_(std::move(params)), cfg_(cfg) {
    for (const auto& [name, t] : params_) {
      m_.emplace_back(static_cast<std::size_t>(t.numel()), 0.0);
      v_.emplace_back(static_cast<std::size_t>(t.numel()), 0.0);
    }
  }

  /// One bias-corrected Adam update with learning rate `lr`. Parameters
  /// without a gradient are treated as having a zero gradient.
  void step(double lr) {
    ++t_;
    const double c1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    for (std::size_t i = 0; i < params_.size(); ++i) {
      auto& p = params_[i].second;
      auto w = p.data();
      auto g = p.has_grad() ? p.grad() : std::span<const T>();
      auto& m = m_[i];
      auto& v = v_[i];
      for (std::size_t j = 0; j < w.size(); ++j) {
        const double gj = g.empty() ? 0.0 : static_cast<double>(g[j]);
        m[j] = cfg_.beta1 * m[j] + (1.0 - cfg_.beta1) * gj;
        v[j] = cfg_.beta2 * v[j] + (1.0 - cfg_.beta2) * gj * gj;
        const double upd = lr * (m[j] / c1) / (std::sqrt(v[j] / c2) + cfg_.eps);
        w[j] = static_cast<T>(static_cast<double>(w[j]) - upd);
      }
    }
  }

  void zero_grad() {
    for (auto& [name, t] : params_) t.zero_grad();
  }

  const ParamList<T>& params() const { return params_; }
  std::int64_t steps_taken() const { return t_; }

 private:
  ParamList<T> params_;
  AdamConfig cfg_;
  std::vector<std::vector<double>> m_, v_;
  std::int64_t t_ = 0;
};

/// Global L2 norm of all gradients; when above `max_norm` (> 0) every gradient
/// is scaled by max_norm / norm. Returns the norm before clipping.
template <typename T>
double clip_grad_norm(const ParamList<T>& params, double max_norm) {
  double sq = 0.0;
  for (const auto& [name, t] : params)
    if (t.has_grad())
      for (const T g : t.grad()) sq += static_cast<double>(g) * static_cast<double>(g);
  const double norm = std::sqrt(sq);
  if (max_norm > 0 && norm > max_norm) {
    const double s = max_norm / norm;
    for (const auto& [name, t] : params)
      if (t.has_grad())
        for (T& g : t.grad_buffer()) g = static_cast<T>(static_cast<double>(g) * s);
  }
  return norm;
}

/// Learning rate at 0-based `step`: linear warmup over warmup_steps, then
/// constant (or linear decay to zero at cfg.steps).
inline double learning_rate_at(const TrainConfig& cfg, std::int64_t step) {
  double lr = cfg.learning_rate;
  if (cfg.warmup_steps > 0 && step < cfg.warmup_steps)
    return lr * static_cast<double>(step + 1) / static_cast<double>(cfg.warmup_steps);
  if (cfg.decay_to_zero && cfg.steps > cfg.warmup_steps)
    lr *= std::max(0.0, static_cast<double>(cfg.steps - step) / static_cast<double>(cfg.steps - cfg.warmup_steps));
  return lr;
}

/// Inputs and next-token labels for one step.
struct TrainBatch {
  TokenBatch inputs;
  std::vector<std::int32_t> labels;
};

/// Random contiguous windows from a token stream, driven by a seeded
/// mt19937_64 so the batch sequence is a pure function of (seed, stream).
class BatchSampler {
 public:
  BatchSampler(std::span<const std::int32_t> stream, int batch_size, int seq_len, std::uint64_t seed)
      : stream_(stream), batch_(batch_size), seq_(seq_len), rng_(seed) {
    if (static_cast<std::int64_t>(stream_.size()) < seq_ + 1)
      throw Error("corpus too small for one batch: " + std::to_string(stream_.size()) + " tokens, need " +
                  std::to_string(seq_ + 1));
  }

  TrainBatch next() {
    TrainBatch b;
    b.inputs.batch = batch_;
    b.inputs.seq = seq_;
    b.inputs.tokens.reserve(static_cast<std::size_t>(batch_ * seq_));
    b.labels.reserve(b.inputs.tokens.capacity());
    const std::uint64_t range = stream_.size() - static_cast<std::size_t>(seq_);
    for (int i = 0; i < batch_; ++i) {
      const std::size_t off = static_cast<std::size_t>(rng_() % range);
      b.inputs.tokens.insert(b.inputs.tokens.end(), stream_.begin() + off, stream_.begin() + off + seq_);
      b.labels.insert(b.labels.end(), stream_.begin() + off + 1, stream_.begin() + off + seq_ + 1);
    }
    return b;
  }

 private:
  std::span<const std::int32_t> stream_;
  std::int64_t batch_, seq_;
  std::mt19937_64 rng_;
};

/// Teacher logits keyed by step, reusable across runs that share a seed and
/// batch shape. Entries are checked against the batch tokens; insertions stop
/// at the memory cap.
template <typename T>
class TeacherCache {
 public:
  explicit TeacherCache(std::int64_t cap_mb = 512) : cap_bytes_(cap_mb * 1024 * 1024) {}

  const Tensor<T>* find(std::int64_t step, const TokenBatch& b) const {
    auto it = entries_.find(step);
    if (it == entries_.end() || it->second.tokens != b.tokens) return nullptr;
    return &it->second.logits;
  }

  void insert(std::int64_t step, const TokenBatch& b, const Tensor<T>& logits) {
    const std::int64_t bytes = logits.numel() * static_cast<std::int64_t>(sizeof(T));
    if (used_ + bytes > cap_bytes_ || entries_.count(step)) return;
    entries_.emplace(step, Entry{b.tokens, logits});
    used_ += bytes;
  }

  std::size_t size() const { return entries_.size(); }
  std::int64_t bytes_used() const { return used_; }

 private:
  struct Entry {
    std::vector<std::int32_t> tokens;
    Tensor<T> logits;
  };
  std::int64_t cap_bytes_;
  std::int64_t used_ = 0;
  std::unordered_map<std::int64_t, Entry> entries_;
};

struct StepMetrics {
  std::int64_t step = 0;
  double loss = 0.0;
  double ce = 0.0;
  double kl = 0.0;
  double grad_norm = 0.0;
  double lr = 0.0;
  double tokens_per_s = 0.0;
  double elapsed_ms = 0.0;
};

/// Training diverged; the message names the step and, when known, the layer.
class DivergenceError : public NonFiniteError {
 public:
  using NonFiniteError::NonFiniteError;
};

/// {"step":..,"loss":..,"ce":..,"kl":..,"grad_norm":..,"lr":..,"elapsed_ms":..}
inline std::string metrics_json_line(const StepMetrics& m) {
  char buf[320];
  std::snprintf(buf, sizeof buf,
                "{\"step\":%lld,\"loss\":%.9g,\"ce\":%.9g,\"kl\":%.9g,\"grad_norm\":%.9g,\"lr\":%.9g,\"elapsed_ms\":%.3f}",
                static_cast<long long>(m.step), m.loss, m.ce, m.kl, m.grad_norm, m.lr, m.elapsed_ms);
  return buf;
}

/// Owns the optimizer for one KD-QAT (or CE-only) run. The teacher may be
/// null, in which case the KL term is dropped and the loss is plain CE.
template <typename T>
class Trainer {
 public:
  Trainer(MicroLM<T>& student, const MicroLM<T>* teacher, ParamList<T> params, const TrainConfig& cfg,
          const KDLossConfig& kd = {})
      : student_(&student),
        teacher_(teacher),
        cfg_(cfg),
        kd_(teacher ? kd : KDLossConfig{1.0, 0.0, 1.0}),
        adam_(std::move(params), AdamConfig{cfg.beta1, cfg.beta2, cfg.eps}) {
    cfg_.validate();
    kd_.validate();
  }

  void set_teacher_cache(TeacherCache<T>* cache) { cache_ = cache; }

  StepMetrics step(std::int64_t step, const TrainBatch& batch, SignalProbe<T>* probe = nullptr) {
    const auto t0 = std::chrono::steady_clock::now();
    StepMetrics m;
    m.step = step;
    m.lr = learning_rate_at(cfg_, step);
    const auto& in = batch.inputs;
    try {
      Tensor<T> teacher_logits;
      if (teacher_ != nullptr) {
        const Tensor<T>* cached = cache_ ? cache_->find(step, in) : nullptr;
        if (cached != nullptr) {
          teacher_logits = *cached;
        } else {
          NoGrad<T> off;
          teacher_logits = teacher_->forward(in.tokens, in.batch, in.seq);
          if (cache_) cache_->insert(step, in, teacher_logits);
        }
      } else {
        teacher_logits = Tensor<T>::zeros({in.batch, in.seq, static_cast<std::int64_t>(student_->config().vocab_size)});
      }
      adam_.zero_grad();
      Tape<T> tape;
      KDLoss<T> loss;
      {
        typename Tape<T>::Scope scope(tape);
        if (probe) probe->begin_step(step);
        Tensor<T> logits = student_->forward(in.tokens, in.batch, in.seq);
        loss = kd_loss_parts(logits, teacher_logits, batch.labels, kd_);
      }
      m.loss = static_cast<double>(loss.loss.item());
      m.ce = loss.ce;
      m.kl = loss.kl;
      if (!std::isfinite(m.loss)) throw NonFiniteError("loss is not finite");
      tape.backward(loss.loss);
      if (probe) probe->end_step();
      for (const auto& [name, t] : adam_.params())
        if (t.has_grad())
          for (const T g : t.grad())
            if (!std::isfinite(static_cast<double>(g))) throw NonFiniteError("non-finite gradient in '" + name + "'");
      m.grad_norm = clip_grad_norm(adam_.params(), cfg_.grad_clip);
      adam_.step(m.lr);
    } catch (const NonFiniteError& e) {
      throw DivergenceError("step " + std::to_string(step) + ": " + e.what());
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    m.elapsed_ms = secs * 1000.0;
    m.tokens_per_s = secs > 0 ? static_cast<double>(in.batch * in.seq) / secs : 0.0;
    return m;
  }

  const ParamList<T>& params() const { return adam_.params(); }
  const TrainConfig& config() const { return cfg_; }

 private:
  MicroLM<T>* student_;
  const MicroLM<T>* teacher_;
  TrainConfig cfg_;
  KDLossConfig kd_;
  Adam<T> adam_;
  TeacherCache<T>* cache_ = nullptr;
};

struct TrainingLog {
  std::vector<StepMetrics> steps;
  std::vector<std::pair<std::int64_t, EvalResult>> evals;  // (steps completed, held-out result)
};

/// Runs cfg.steps steps over batches sampled from `train`. `on_step` sees each
/// step's metrics (e.g. to stream them to disk); held-out evaluation runs
/// every eval_every steps when `heldout` is nonempty.
template <typename T>
TrainingLog train_loop(Trainer<T>& trainer, MicroLM<T>& model, std::span<const std::int32_t> train,
                       std::span<const std::int32_t> heldout, const EvalConfig& eval_cfg,
                       SignalProbe<T>* probe = nullptr,
                       const std::function<void(const StepMetrics&)>& on_step = nullptr) {
  const auto& cfg = trainer.config();
  BatchSampler sampler(train, cfg.batch_size, cfg.seq_len, cfg.seed);
  TrainingLog log;
  for (std::int64_t s = 0; s < cfg.steps; ++s) {
    const TrainBatch batch = sampler.next();
    log.steps.push_back(trainer.step(s, batch, probe));
    if (on_step) on_step(log.steps.back());
    if (cfg.eval_every > 0 && (s + 1) % cfg.eval_every == 0 && s + 1 < cfg.steps && !heldout.empty())
      log.evals.emplace_back(s + 1, perplexity(model, heldout, eval_cfg));
  }
  return log;
}

struct TeacherResult {
  TrainingLog log;
  EvalResult heldout;
};

/// Trains every parameter of `model` with plain cross entropy and reports
/// held-out perplexity.
template <typename T>
TeacherResult pretrain_teacher(MicroLM<T>& model, const Corpus& corpus, const TrainConfig& cfg,
                               const EvalConfig& eval_cfg,
                               const std::function<void(const StepMetrics&)>& on_step = nullptr) {
  cfg.validate();
  eval_cfg.validate(model.config().max_seq_len);
  if (cfg.seq_len > model.config().max_seq_len) throw Error("pretrain: seq_len exceeds the model's max_seq_len");
  Trainer<T> trainer(model, nullptr, all_parameters_trainable(model), cfg);
  TeacherResult r;
  r.log = train_loop<T>(trainer, model, corpus.train, corpus.heldout, eval_cfg, nullptr, on_step);
  for (auto& [name, t] : model.named_parameters()) {
    t.set_requires_grad(false);
    t.drop_grad();
  }
  r.heldout = perplexity(model, corpus.heldout, eval_cfg, "heldout");
  return r;
}

}  // namespace qatf
