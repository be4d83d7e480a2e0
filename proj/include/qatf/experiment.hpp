// SPDX-FileCopyrightText: (c) 2026 The qatf Authors
//
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "json.hpp"
#include "qatf/checkpoint.hpp"
#include "qatf/distill.hpp"
#include "qatf/eval.hpp"
#include "qatf/probe.hpp"

namespace qatf {

/// Weight quantization settings of an experiment.
struct QuantConfig {
  bool enabled = true;
  QuantScheme scheme = default_weight_scheme(4);
  CalibrationMethod method = CalibrationMethod::kMse;
  int grid_points = 101;
  std::vector<std::string> roles = {"q", "k", "v", "o", "gate", "up", "down"};
  int activation_bits = 16;

  QuantPolicy policy() const { return policy_from_names(roles, method, grid_points); }
  bool operator==(const QuantConfig&) const = default;
};

struct ProbeConfig {
  bool enabled = true;
  std::vector<std::string> roles = {"q", "k", "v", "o"};
  bool operator==(const ProbeConfig&) const = default;
};

struct PathsConfig {
  std::vector<std::string> corpus = {
      "../data/corpus/as_you_like_it.txt",
      "../data/corpus/hamlet.txt",
      "../data/corpus/julius_caesar.txt",
      "../data/corpus/lear.txt",
      "../data/corpus/macbeth.txt",
      "../data/corpus/merchant_of_venice.txt",
      "../data/corpus/midsummer_nights_dream.txt",
      "../data/corpus/much_ado_about_nothing.txt",
      "../data/corpus/othello.txt",
      "../data/corpus/richard_iii.txt",
      "../data/corpus/romeo_and_juliet.txt",
      "../data/corpus/tempest.txt",
      "../data/corpus/twelfth_night.txt"};
  std::string output_dir = "../runs";
  std::string teacher_checkpoint = "../runs/teacher.ckpt";
  std::string ptq_checkpoint;  // empty: calibrate from the teacher
  bool operator==(const PathsConfig&) const = default;
};

struct ExperimentConfig {
  std::uint64_t seed = 0;
  ModelConfig model;
  TrainConfig teacher = default_teacher_train();
  TrainConfig train;
  KDLossConfig kd;
  QuantConfig quant;
  std::string freeze = "none";
  ProbeConfig probe;
  EvalConfig eval;
  double train_fraction = 0.95;
  PathsConfig paths;

  static TrainConfig default_teacher_train() {
    TrainConfig t;
    t.steps = 3000;
    t.learning_rate = 1e-3;
    t.warmup_steps = 100;
    t.decay_to_zero = true;
    t.train_fp_params = true;
    return t;
  }

  void validate() const {
    model.validate();
    teacher.validate();
    train.validate();
    kd.validate();
    quant.scheme.validate();
    if (quant.grid_points < 1) throw Error("config: quant.grid_points must be positive");
    if (quant.activation_bits < 2 || quant.activation_bits > 16)
      throw Error("config: quant.activation_bits must lie in [2, 16]");
    (void)quant.policy();
    (void)FreezePlan::preset(freeze);
    for (const auto& r : probe.roles)
      if (is_mlp_role(role_from_string(r))) throw Error("config: probe.roles may only name q, k, v or o");
    eval.validate(model.max_seq_len);
    if (train.seq_len > model.max_seq_len || teacher.seq_len > model.max_seq_len)
      throw Error("config: seq_len exceeds model.max_seq_len");
    if (!(train_fraction > 0 && train_fraction < 1)) throw Error("config: train_fraction must lie in (0, 1)");
    if (paths.corpus.empty()) throw Error("config: paths.corpus must list at least one file");
  }
};

namespace detail {

/// Reads one JSON object, remembering which keys were consumed so unknown
/// keys can be rejected with their full dotted path.
class ObjectReader {
 public:
  ObjectReader(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw Error("config: '" + display() + "' must be an object");
  }

  template <typename V>
  void get(const std::string& key, V& out) {
    seen_.insert(key);
    auto it = j_.find(key);
    if (it == j_.end()) return;
    try {
      if constexpr (std::is_integral_v<V> && !std::is_same_v<V, bool>) {
        if (!it->is_number_integer()) throw Error("expected an integer");
      } else if constexpr (std::is_floating_point_v<V>) {
        if (!it->is_number()) throw Error("expected a number");
      }
      out = it->template get<V>();
    } catch (const std::exception& e) {
      throw Error("config: bad value for '" + child(key) + "': " + e.what());
    }
  }

  ObjectReader sub(const std::string& key) {
    seen_.insert(key);
    auto it = j_.find(key);
    static const json kEmpty = json::object();
    return ObjectReader(it == j_.end() ? kEmpty : *it, child(key));
  }

  void finish() const {
    for (const auto& [key, _] : j_.items())
      if (!seen_.count(key)) throw Error("config: unknown key '" + child(key) + "'");
  }

 private:
  std::string child(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }
  std::string display() const { return path_.empty() ? "<root>" : path_; }

  const json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

inline void read_train(ObjectReader r, TrainConfig& t, bool kd_fields) {
  r.get("steps", t.steps);
  r.get("batch_size", t.batch_size);
  r.get("seq_len", t.seq_len);
  r.get("learning_rate", t.learning_rate);
  r.get("warmup_steps", t.warmup_steps);
  r.get("decay_to_zero", t.decay_to_zero);
  r.get("beta1", t.beta1);
  r.get("beta2", t.beta2);
  r.get("eps", t.eps);
  r.get("grad_clip", t.grad_clip);
  r.get("eval_every", t.eval_every);
  if (kd_fields) {
    r.get("trace_every", t.trace_every);
    r.get("train_fp_params", t.train_fp_params);
    r.get("cache_teacher_logits", t.cache_teacher_logits);
    r.get("teacher_cache_mb", t.teacher_cache_mb);
  }
  r.finish();
}

inline json train_to_json(const TrainConfig& t, bool kd_fields) {
  json j = {{"steps", t.steps},
            {"batch_size", t.batch_size},
            {"seq_len", t.seq_len},
            {"learning_rate", t.learning_rate},
            {"warmup_steps", t.warmup_steps},
            {"decay_to_zero", t.decay_to_zero},
            {"beta1", t.beta1},
            {"beta2", t.beta2},
            {"eps", t.eps},
            {"grad_clip", t.grad_clip},
            {"eval_every", t.eval_every}};
  if (kd_fields) {
    j["trace_every"] = t.trace_every;
    j["train_fp_params"] = t.train_fp_params;
    j["cache_teacher_logits"] = t.cache_teacher_logits;
    j["teacher_cache_mb"] = t.teacher_cache_mb;
  }
  return j;
}

inline std::string resolve_path(const std::string& p, const std::filesystem::path& base) {
  if (p.empty()) return p;
  std::filesystem::path path(p);
  if (path.is_relative() && !base.empty()) path = base / path;
  return path.lexically_normal().string();
}

}  // namespace detail

/// Parses a config object. Every key is optional; unknown keys are errors.
/// Relative paths are resolved against `base_dir` (the config file's folder).
inline ExperimentConfig config_from_json(const json& j, const std::filesystem::path& base_dir = {}) {
  ExperimentConfig c;
  detail::ObjectReader root(j, "");
  root.get("seed", c.seed);
  {
    auto r = root.sub("model");
    r.get("vocab_size", c.model.vocab_size);
    r.get("n_layers", c.model.n_layers);
    r.get("d_model", c.model.d_model);
    r.get("n_heads", c.model.n_heads);
    r.get("d_ff", c.model.d_ff);
    r.get("max_seq_len", c.model.max_seq_len);
    r.get("rope_base", c.model.rope_base);
    r.get("rmsnorm_eps", c.model.rmsnorm_eps);
    r.finish();
  }
  detail::read_train(root.sub("teacher"), c.teacher, false);
  detail::read_train(root.sub("train"), c.train, true);
  {
    auto r = root.sub("kd");
    r.get("alpha_ce", c.kd.alpha_ce);
    r.get("beta_kl", c.kd.beta_kl);
    r.get("temperature", c.kd.temperature);
    r.finish();
  }
  {
    auto r = root.sub("quant");
    std::string symmetry = to_string(c.quant.scheme.symmetry), method = to_string(c.quant.method);
    r.get("enabled", c.quant.enabled);
    r.get("bitwidth", c.quant.scheme.bitwidth);
    r.get("symmetry", symmetry);
    r.get("per_channel", c.quant.scheme.per_channel);
    r.get("axis", c.quant.scheme.axis);
    r.get("method", method);
    r.get("grid_points", c.quant.grid_points);
    r.get("roles", c.quant.roles);
    r.get("activation_bits", c.quant.activation_bits);
    r.finish();
    try {
      c.quant.scheme.symmetry = symmetry_from_string(symmetry);
      c.quant.method = calibration_from_string(method);
    } catch (const Error& e) {
      throw Error(std::string("config: quant: ") + e.what());
    }
  }
  root.get("freeze", c.freeze);
  {
    auto r = root.sub("probe");
    r.get("enabled", c.probe.enabled);
    r.get("roles", c.probe.roles);
    r.finish();
  }
  {
    auto r = root.sub("eval");
    r.get("context_length", c.eval.context_length);
    r.get("stride", c.eval.stride);
    r.get("batch_size", c.eval.batch_size);
    r.finish();
  }
  root.get("train_fraction", c.train_fraction);
  {
    auto r = root.sub("paths");
    r.get("corpus", c.paths.corpus);
    r.get("output_dir", c.paths.output_dir);
    r.get("teacher_checkpoint", c.paths.teacher_checkpoint);
    r.get("ptq_checkpoint", c.paths.ptq_checkpoint);
    r.finish();
  }
  root.finish();
  for (auto& p : c.paths.corpus) p = detail::resolve_path(p, base_dir);
  c.paths.output_dir = detail::resolve_path(c.paths.output_dir, base_dir);
  c.paths.teacher_checkpoint = detail::resolve_path(c.paths.teacher_checkpoint, base_dir);
  c.paths.ptq_checkpoint = detail::resolve_path(c.paths.ptq_checkpoint, base_dir);
  c.train.seed = c.seed;
  c.teacher.seed = c.seed;
  c.validate();
  return c;
}

/// Full config with every default made explicit; config_from_json inverts it.
inline json config_to_json(const ExperimentConfig& c) {
  return {{"seed", c.seed},
          {"model", model_config_to_json(c.model)},
          {"teacher", detail::train_to_json(c.teacher, false)},
          {"train", detail::train_to_json(c.train, true)},
          {"kd", {{"alpha_ce", c.kd.alpha_ce}, {"beta_kl", c.kd.beta_kl}, {"temperature", c.kd.temperature}}},
          {"quant",
           {{"enabled", c.quant.enabled},
            {"bitwidth", c.quant.scheme.bitwidth},
            {"symmetry", to_string(c.quant.scheme.symmetry)},
            {"per_channel", c.quant.scheme.per_channel},
            {"axis", c.quant.scheme.axis},
            {"method", to_string(c.quant.method)},
            {"grid_points", c.quant.grid_points},
            {"roles", c.quant.roles},
            {"activation_bits", c.quant.activation_bits}}},
          {"freeze", c.freeze},
          {"probe", {{"enabled", c.probe.enabled}, {"roles", c.probe.roles}}},
          {"eval",
           {{"context_length", c.eval.context_length}, {"stride", c.eval.stride}, {"batch_size", c.eval.batch_size}}},
          {"train_fraction", c.train_fraction},
          {"paths",
           {{"corpus", c.paths.corpus},
            {"output_dir", c.paths.output_dir},
            {"teacher_checkpoint", c.paths.teacher_checkpoint},
            {"ptq_checkpoint", c.paths.ptq_checkpoint}}}};
}

inline ExperimentConfig load_config(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw Error("config file not found: '" + path.string() + "'");
  std::ifstream in(path);
  json j;
  try {
    j = json::parse(in);
  } catch (const json::exception& e) {
    throw Error("config '" + path.string() + "' is not valid JSON: " + e.what());
  }
  return config_from_json(j, std::filesystem::absolute(path).parent_path());
}

/// First 12 hex digits of the SHA-256 of the canonical config without its
/// output directory and seed.
inline std::string config_hash(const ExperimentConfig& c) {
  json j = config_to_json(c);
  j.erase("seed");
  j["paths"].erase("output_dir");
  return to_hex(sha256(j.dump())).substr(0, 12);
}

inline std::string run_dir_name(const ExperimentConfig& c) {
  return "kdqat-" + config_hash(c) + "-seed" + std::to_string(c.seed);
}

inline Corpus load_experiment_corpus(const ExperimentConfig& c) { return load_corpus(c.paths.corpus, c.train_fraction); }

inline json eval_to_json(const EvalResult& r) {
  return {{"split", r.split}, {"ppl", r.ppl}, {"tokens", r.tokens}, {"context_length", r.context_length}};
}

class JsonLinesWriter {
 public:
  explicit JsonLinesWriter(const std::filesystem::path& path) : out_(path, std::ios::binary | std::ios::trunc) {
    if (!out_) throw Error("cannot write '" + path.string() + "'");
  }
  void write(const std::string& line) {
    out_ << line << '\n';
    out_.flush();
  }

 private:
  std::ofstream out_;
};

inline void write_json_file(const std::filesystem::path& path, const json& j) {
  write_bytes(path, j.dump(2) + "\n");
}

// ---- teacher -------------------------------------------------------------

struct TeacherRun {
  std::filesystem::path checkpoint;
  EvalResult heldout;
  std::vector<StepMetrics> metrics;
};

/// Trains the FP teacher and writes <teacher_checkpoint>, a metrics log next
/// to it (<stem>.metrics.jsonl) and the held-out record (<stem>.eval.json).
inline TeacherRun run_pretrain_teacher(const ExperimentConfig& c, std::ostream* log = nullptr) {
  c.validate();
  const Corpus corpus = load_experiment_corpus(c);
  MicroLM<float> model(c.model, c.seed);
  const std::filesystem::path ckpt = c.paths.teacher_checkpoint;
  if (ckpt.empty()) throw Error("config: paths.teacher_checkpoint is empty");
  if (ckpt.has_parent_path()) std::filesystem::create_directories(ckpt.parent_path());
  auto stem = ckpt;
  stem.replace_extension();
  JsonLinesWriter metrics(stem.string() + ".metrics.jsonl");
  auto res = pretrain_teacher<float>(model, corpus, c.teacher, c.eval, [&](const StepMetrics& m) {
    metrics.write(metrics_json_line(m));
    if (log && (m.step % 100 == 0 || m.step + 1 == c.teacher.steps))
      *log << "teacher step " << m.step << " loss " << m.loss << "\n" << std::flush;
  });
  json meta = {{"kind", "teacher"}, {"heldout", eval_to_json(res.heldout)}, {"steps", c.teacher.steps}};
  save_checkpoint(ckpt, model, config_to_json(c), meta);
  write_json_file(stem.string() + ".eval.json", eval_to_json(res.heldout));
  return {ckpt, res.heldout, std::move(res.log.steps)};
}

// ---- PTQ -----------------------------------------------------------------

/// Sample batches for activation range calibration, drawn from the train split.
inline std::vector<TokenBatch> activation_calibration_sample(const Corpus& corpus, const ExperimentConfig& c,
                                                             int batches = 8) {
  BatchSampler sampler(corpus.train, c.eval.batch_size, c.eval.context_length, c.seed);
  std::vector<TokenBatch> out;
  for (int i = 0; i < batches; ++i) out.push_back(sampler.next().inputs);
  return out;
}

struct TensorReconstruction {
  int layer = 0;
  Role role = Role::kQ;
  double mse = 0.0;
};

struct CalibrationReport {
  CalibrationMethod method = CalibrationMethod::kMse;
  std::vector<TensorReconstruction> tensors;
  double total_mse = 0.0;
  std::optional<EvalResult> teacher;
  std::optional<EvalResult> student;
};

/// Attaches calibrated weight quantizers per `q` and measures the per-tensor
/// reconstruction error against the FP weights.
template <typename T>
CalibrationReport calibrate_model(MicroLM<T>& model, const QuantConfig& q) {
  CalibrationReport rep;
  rep.method = q.method;
  attach_quantizers(model, q.scheme, q.policy());
  for (int l = 0; l < model.n_layers(); ++l)
    for (Role r : kAllRoles) {
      const auto& lin = model.layer(l).proj(r);
      if (!lin.quant) continue;
      const double mse = reconstruction_mse(lin.weight, lin.quant->params(), lin.quant->scheme());
      rep.tensors.push_back({l, r, mse});
      rep.total_mse += mse;
    }
  return rep;
}

inline json calibration_report_to_json(const CalibrationReport& r) {
  json tensors = json::array();
  for (const auto& t : r.tensors)
    tensors.push_back({{"layer", t.layer}, {"proj", role_name(t.role)}, {"reconstruction_mse", t.mse}});
  json j = {{"method", to_string(r.method)},
            {"quantized_tensors", r.tensors.size()},
            {"total_reconstruction_mse", r.total_mse},
            {"tensors", tensors}};
  if (r.teacher) j["teacher"] = eval_to_json(*r.teacher);
  if (r.student) j["ptq_student"] = eval_to_json(*r.student);
  return j;
}

struct PtqRun {
  MicroLM<float> student;
  CalibrationReport report;
};

/// PTQ student from the teacher checkpoint. With `corpus`, the teacher and
/// the quantized student are evaluated on the held-out split.
inline PtqRun run_calibrate(const Checkpoint& teacher, const ExperimentConfig& c, const Corpus* corpus) {
  MicroLM<float> student = teacher.model.clone();
  CalibrationReport rep = calibrate_model(student, c.quant);
  if (corpus) {
    rep.teacher = perplexity(teacher.model, corpus->heldout, c.eval);
    rep.student = perplexity(student, corpus->heldout, c.eval);
    calibrate_activations_minmax(student, activation_calibration_sample(*corpus, c), c.quant.activation_bits);
  }
  return {std::move(student), std::move(rep)};
}

// ---- KD-QAT --------------------------------------------------------------

struct KdQatOptions {
  bool force = false;
  std::ostream* log = nullptr;
  TeacherCache<float>* teacher_cache = nullptr;  // overrides the config's cache flag
};

struct KdQatResult {
  std::filesystem::path run_dir;
  EvalResult teacher;
  EvalResult initial;  // student before training (PTQ init)
  EvalResult final;
  std::vector<StepMetrics> metrics;
  std::map<std::string, std::string> hashes_before;  // every parameter
  std::map<std::string, std::string> hashes_after;
  std::int64_t trace_records = 0;
};

template <typename T>
std::map<std::string, std::string> parameter_hashes(const MicroLM<T>& m) {
  std::map<std::string, std::string> out;
  for (const auto& [name, t] : m.named_parameters()) out[name] = tensor_sha256(t);
  return out;
}

/// Calibration (or PTQ checkpoint load) -> freeze -> KD training with probes
/// -> evaluation. Writes into <output_dir>/<run_dir_name>: config.json,
/// metrics.jsonl, trace.csv, student.ckpt and result.json.
inline KdQatResult run_kd_qat(const ExperimentConfig& c, const KdQatOptions& opt = {}) {
  c.validate();
  const std::filesystem::path run_dir = std::filesystem::path(c.paths.output_dir) / run_dir_name(c);
  if (std::filesystem::exists(run_dir)) {
    if (!opt.force)
      throw Error("run directory '" + run_dir.string() + "' already exists (use --force to overwrite)");
    std::filesystem::remove_all(run_dir);
  }
  if (c.paths.teacher_checkpoint.empty() || !std::filesystem::exists(c.paths.teacher_checkpoint))
    throw Error("teacher checkpoint not found: '" + c.paths.teacher_checkpoint + "'");
  const Corpus corpus = load_experiment_corpus(c);
  Checkpoint teacher = load_checkpoint(c.paths.teacher_checkpoint);
  if (!(teacher.model.config() == c.model))
    throw Error("teacher checkpoint model dimensions differ from the config's model section");
  teacher.model.set_weight_quant_enabled(false);

  MicroLM<float> student = [&] {
    if (!c.quant.enabled) return teacher.model.clone();
    if (!c.paths.ptq_checkpoint.empty()) {
      Checkpoint ptq = load_checkpoint(c.paths.ptq_checkpoint);
      if (!(ptq.model.config() == c.model)) throw Error("PTQ checkpoint model dimensions differ from the config");
      return std::move(ptq.model);
    }
    MicroLM<float> s = teacher.model.clone();
    calibrate_model(s, c.quant);
    return s;
  }();
  student.set_activation_quant(false);
  for (int l = 0; l < student.n_layers(); ++l)
    for (auto& lin : student.layer(l).linears) lin.act.reset();

  std::filesystem::create_directories(run_dir);
  write_json_file(run_dir / "config.json", config_to_json(c));

  KdQatResult res;
  res.run_dir = run_dir;
  res.teacher = perplexity(teacher.model, corpus.heldout, c.eval);
  res.initial = perplexity(student, corpus.heldout, c.eval);
  res.hashes_before = parameter_hashes(student);

  const FreezePlan plan = FreezePlan::preset(c.freeze);
  ParamList<float> params = apply_freeze(student, plan, c.train.train_fp_params);
  Trainer<float> trainer(student, &teacher.model, std::move(params), c.train, c.kd);
  std::optional<TeacherCache<float>> own_cache;
  if (opt.teacher_cache) {
    trainer.set_teacher_cache(opt.teacher_cache);
  } else if (c.train.cache_teacher_logits) {
    own_cache.emplace(c.train.teacher_cache_mb);
    trainer.set_teacher_cache(&*own_cache);
  }

  TraceSink sink(run_dir / "trace.csv");
  std::unique_ptr<SignalProbe<float>> probe;
  if (c.probe.enabled) {
    std::set<Role> roles;
    for (const auto& r : c.probe.roles) roles.insert(role_from_string(r));
    probe = install_probes(student, sink, roles, c.train.trace_every);
  }
  JsonLinesWriter metrics(run_dir / "metrics.jsonl");
  json evals = json::array();
  auto log = train_loop<float>(trainer, student, corpus.train, corpus.heldout, c.eval, probe.get(),
                               [&](const StepMetrics& m) {
                                 metrics.write(metrics_json_line(m));
                                 if (opt.log && (m.step % 100 == 0 || m.step + 1 == c.train.steps))
                                   *opt.log << "kdqat[" << c.freeze << "] step " << m.step << " loss " << m.loss
                                            << " ce " << m.ce << " kl " << m.kl << "\n"
                                            << std::flush;
                               });
  probe.reset();
  sink.flush();
  res.trace_records = static_cast<std::int64_t>(sink.records().size());
  for (auto& [name, t] : student.named_parameters()) {
    t.set_requires_grad(false);
    t.drop_grad();
  }
  res.final = perplexity(student, corpus.heldout, c.eval);
  res.hashes_after = parameter_hashes(student);
  res.metrics = std::move(log.steps);

  for (int l = 0; l < student.n_layers(); ++l)
    for (Role r : kAllRoles)
      if (plan.is_frozen(r)) {
        const std::string name = "layers." + std::to_string(l) + "." + std::string(role_param_suffix(r));
        if (res.hashes_before.at(name) != res.hashes_after.at(name))
          throw Error("freeze contract violated: '" + name + "' changed during training");
      }

  if (c.quant.enabled)
    calibrate_activations_minmax(student, activation_calibration_sample(corpus, c), c.quant.activation_bits);
  for (const auto& [s, e] : log.evals) evals.push_back({{"step", s}, {"eval", eval_to_json(e)}});
  json meta = {{"kind", c.quant.enabled ? "kdqat" : "kd-fp"},
               {"freeze", c.freeze},
               {"steps", c.train.steps},
               {"initial", eval_to_json(res.initial)},
               {"final", eval_to_json(res.final)}};
  save_checkpoint(run_dir / "student.ckpt", student, config_to_json(c), meta);
  json frozen = json::array();
  for (Role r : plan.frozen) frozen.push_back(role_name(r));
  write_json_file(run_dir / "result.json", {{"config_hash", config_hash(c)},
                                            {"seed", c.seed},
                                            {"freeze", c.freeze},
                                            {"frozen_roles", frozen},
                                            {"quantized", c.quant.enabled},
                                            {"steps", c.train.steps},
                                            {"teacher", eval_to_json(res.teacher)},
                                            {"initial", eval_to_json(res.initial)},
                                            {"final", eval_to_json(res.final)},
                                            {"periodic_evals", evals},
                                            {"trace_records", res.trace_records},
                                            {"hashes_before", res.hashes_before},
                                            {"hashes_after", res.hashes_after}});
  return res;
}

// ---- evaluation ----------------------------------------------------------

/// Held-out (or train) perplexity of a checkpoint; with w4a16, linear outputs
/// are fake-quantized to 16-bit using stored or freshly calibrated params.
inline EvalResult run_eval(Checkpoint& ck, const ExperimentConfig& c, bool w4a16, const std::string& split = "heldout",
                           bool* calibrated_now = nullptr) {
  const Corpus corpus = load_experiment_corpus(c);
  if (calibrated_now) *calibrated_now = false;
  if (w4a16) {
    bool have = true;
    for (int l = 0; l < ck.model.n_layers(); ++l)
      for (const auto& lin : ck.model.layer(l).linears) have = have && lin.act.has_value();
    if (!have) {
      calibrate_activations_minmax(ck.model, activation_calibration_sample(corpus, c), c.quant.activation_bits);
      if (calibrated_now) *calibrated_now = true;
    }
    ck.model.set_activation_quant(true);
  }
  return perplexity(ck.model, corpus.split(split), c.eval, split);
}

}  // namespace qatf
