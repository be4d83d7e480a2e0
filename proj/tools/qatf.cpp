// SPDX-FileCopyrightText: (c) 2026 The qatf Authors
//
// SPDX-License-Identifier: Apache-2.0

#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "qatf/experiment.hpp"

namespace fs = std::filesystem;
using namespace qatf;

namespace {

void apply_thread_env() {
  const char* env = std::getenv("QATF_THREADS");
  if (env == nullptr || *env == '\0') return;
  char* end = nullptr;
  const long n = std::strtol(env, &end, 10);
  if (*end != '\0' || n <= 0) throw Error("QATF_THREADS must be a positive integer, got '" + std::string(env) + "'");
  Eigen::setNbThreads(static_cast<int>(n));
}

ExperimentConfig config_or_snapshot(const std::string& config_path, const Checkpoint& ck) {
  if (!config_path.empty()) return load_config(config_path);
  if (ck.config.is_object() && !ck.config.empty()) return config_from_json(ck.config);
  throw Error("checkpoint carries no config snapshot; pass --config");
}

void print_json(const json& j) { std::cout << j.dump(2) << std::endl; }

int cmd_pretrain(const std::string& config_path) {
  const ExperimentConfig c = load_config(config_path);
  const TeacherRun run = run_pretrain_teacher(c, &std::cerr);
  json out = eval_to_json(run.heldout);
  out["checkpoint"] = run.checkpoint.string();
  print_json(out);
  return 0;
}

int cmd_calibrate(const std::string& teacher_path, const std::string& method, const std::string& config_path,
                  std::string out_path, bool skip_eval) {
  const Checkpoint teacher = load_checkpoint(teacher_path);
  ExperimentConfig c = config_or_snapshot(config_path, teacher);
  c.quant.method = calibration_from_string(method);
  c.quant.enabled = true;
  std::optional<Corpus> corpus;
  if (!skip_eval) corpus = load_experiment_corpus(c);
  PtqRun ptq = run_calibrate(teacher, c, corpus ? &*corpus : nullptr);
  if (out_path.empty()) out_path = (fs::path(teacher_path).parent_path() / ("ptq-" + method + ".ckpt")).string();
  json report = calibration_report_to_json(ptq.report);
  json meta = {{"kind", "ptq"}, {"method", method}, {"teacher_checkpoint", fs::absolute(teacher_path).string()}};
  if (ptq.report.student) meta["heldout"] = eval_to_json(*ptq.report.student);
  save_checkpoint(out_path, ptq.student, config_to_json(c), meta);
  fs::path report_path = out_path;
  report_path.replace_extension(".report.json");
  write_json_file(report_path, report);
  report["checkpoint"] = out_path;
  print_json(report);
  return 0;
}

struct KdqatArgs {
  std::string config;
  std::string freeze;
  bool fp = false;
  std::string ptq;
  std::string teacher;
  std::string out;
  int steps = -1;
  bool force = false;
};

int cmd_kdqat(const KdqatArgs& a) {
  ExperimentConfig c = load_config(a.config);
  if (!a.freeze.empty()) c.freeze = a.freeze;
  if (a.fp) c.quant.enabled = false;
  if (!a.ptq.empty()) c.paths.ptq_checkpoint = fs::absolute(a.ptq).lexically_normal().string();
  if (!a.teacher.empty()) c.paths.teacher_checkpoint = fs::absolute(a.teacher).lexically_normal().string();
  if (!a.out.empty()) c.paths.output_dir = fs::absolute(a.out).lexically_normal().string();
  if (a.steps >= 0) c.train.steps = a.steps;
  if (c.freeze != "none" && !c.quant.enabled) throw Error("--fp runs train every projection; use --freeze none");
  c.validate();
  KdQatOptions opt;
  opt.force = a.force;
  opt.log = &std::cerr;
  const KdQatResult r = run_kd_qat(c, opt);
  print_json({{"run_dir", r.run_dir.string()},
              {"freeze", c.freeze},
              {"quantized", c.quant.enabled},
              {"teacher", eval_to_json(r.teacher)},
              {"initial", eval_to_json(r.initial)},
              {"final", eval_to_json(r.final)},
              {"trace_records", r.trace_records}});
  return 0;
}

int cmd_eval(const std::string& ckpt_path, bool w4a16, const std::string& config_path, const std::string& split) {
  Checkpoint ck = load_checkpoint(ckpt_path);
  const ExperimentConfig c = config_or_snapshot(config_path, ck);
  bool calibrated = false;
  const EvalResult r = run_eval(ck, c, w4a16, split, &calibrated);
  json out = eval_to_json(r);
  out["w4a16"] = w4a16;
  if (w4a16) out["activation_params"] = calibrated ? "calibrated" : "stored";
  print_json(out);
  return 0;
}

int cmd_trace_report(const std::vector<std::string>& traces, std::vector<std::string> labels, const std::string& out) {
  if (!labels.empty() && labels.size() != traces.size())
    throw Error("--label must be given once per --trace (" + std::to_string(traces.size()) + " traces, " +
                std::to_string(labels.size()) + " labels)");
  if (labels.empty())
    for (std::size_t i = 0; i < traces.size(); ++i)
      labels.push_back(traces.size() == 1 ? "" : fs::path(traces[i]).parent_path().filename().string());
  std::vector<std::pair<std::string, TraceReport>> reports;
  for (std::size_t i = 0; i < traces.size(); ++i) {
    TraceReport rep;
    try {
      rep = trace_report(read_trace(traces[i]));
    } catch (const Error& e) {
      throw Error(traces[i] + ": " + e.what());
    }
    if (rep.empty()) std::cerr << "warning: trace '" << traces[i] << "' has no records\n";
    const std::string prefix = labels[i].empty() ? "" : labels[i] + "_";
    const auto files = write_trace_report(rep, out, prefix);
    std::cout << (labels[i].empty() ? traces[i] : labels[i]) << "\n";
    std::cout << "layer  median_q  median_k  median_v  median_o  o/q  o/k  v/q  v/k\n";
    for (const auto& s : rep.summary) {
      std::cout << s.layer_id;
      for (Role r : kAttentionRoles)
        std::cout << "  " << (s.median_grad_norm_sq.count(r) ? detail::fmt9(s.median_grad_norm_sq.at(r)) : "nan");
      std::cout << "  " << detail::fmt9(s.ratio_o_q) << "  " << detail::fmt9(s.ratio_o_k) << "  "
                << detail::fmt9(s.ratio_v_q) << "  " << detail::fmt9(s.ratio_v_k) << "\n";
    }
    std::cout << "wrote " << files.size() << " files to " << out << "\n";
    reports.emplace_back(labels[i], std::move(rep));
  }
  if (reports.size() > 1) {
    const auto files = write_overlay(reports, out);
    std::cout << "wrote " << files.size() << " overlay files to " << out << "\n";
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"qatf: knowledge-distillation quantization-aware training lab"};
  app.require_subcommand(1);

  std::string config;
  auto* pretrain = app.add_subcommand("pretrain-teacher", "Train the full-precision teacher");
  pretrain->add_option("--config", config, "Experiment config (JSON)")->required();

  std::string teacher, method = "mse", cal_config, cal_out;
  bool no_eval = false;
  auto* calibrate = app.add_subcommand("calibrate", "Post-training quantization of the teacher");
  calibrate->add_option("--teacher", teacher, "Teacher checkpoint")->required();
  calibrate->add_option("--method", method, "Range setting")->check(CLI::IsMember({"minmax", "mse"}));
  calibrate->add_option("--config", cal_config, "Experiment config (default: the teacher's snapshot)");
  calibrate->add_option("--out", cal_out, "Output checkpoint (default: <teacher dir>/ptq-<method>.ckpt)");
  calibrate->add_flag("--no-eval", no_eval, "Skip the perplexity evaluation");

  KdqatArgs kd;
  auto* kdqat = app.add_subcommand("kdqat", "Knowledge-distillation QAT run");
  kdqat->add_option("--config", kd.config, "Experiment config (JSON)")->required();
  kdqat->add_option("--freeze", kd.freeze, "Freeze preset")->check(CLI::IsMember(FreezePlan::preset_names()));
  kdqat->add_flag("--fp", kd.fp, "Full-precision student (no weight quantizers)");
  kdqat->add_option("--ptq", kd.ptq, "PTQ student checkpoint to start from");
  kdqat->add_option("--teacher", kd.teacher, "Teacher checkpoint (overrides the config)");
  kdqat->add_option("--out", kd.out, "Output directory (overrides the config)");
  kdqat->add_option("--steps", kd.steps, "Training steps (overrides the config)")->check(CLI::NonNegativeNumber);
  kdqat->add_flag("--force", kd.force, "Overwrite an existing run directory");

  std::string ckpt, eval_config, split = "heldout";
  bool w4a16 = false;
  auto* eval = app.add_subcommand("eval", "Perplexity of a checkpoint");
  eval->add_option("--ckpt", ckpt, "Checkpoint")->required();
  eval->add_flag("--w4a16", w4a16, "Quantize linear outputs to 16 bits (min-max)");
  eval->add_option("--config", eval_config, "Experiment config (default: the checkpoint's snapshot)");
  eval->add_option("--split", split, "Corpus split")->check(CLI::IsMember({"heldout", "train"}));

  std::vector<std::string> traces, labels;
  std::string report_out = "trace-report";
  auto* report = app.add_subcommand("trace-report", "Summaries and series files from probe traces");
  report->add_option("--trace", traces, "Trace CSV (repeat for overlays)")->required();
  report->add_option("--label", labels, "Label per trace");
  report->add_option("--out", report_out, "Output directory");

  CLI11_PARSE(app, argc, argv);
  try {
    apply_thread_env();
    if (pretrain->parsed()) return cmd_pretrain(config);
    if (calibrate->parsed()) return cmd_calibrate(teacher, method, cal_config, cal_out, no_eval);
    if (kdqat->parsed()) return cmd_kdqat(kd);
    if (eval->parsed()) return cmd_eval(ckpt, w4a16, eval_config, split);
    if (report->parsed()) return cmd_trace_report(traces, labels, report_out);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 1;
}
