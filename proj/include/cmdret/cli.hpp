#pragma once

// Command-line front end: train, eval, gradcheck, synth, sweep-alpha.
// Exit codes: 0 success, 1 config, 2 data, 3 numeric, 4 io.

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "cmdret/checkpoint.hpp"
#include "cmdret/config.hpp"
#include "cmdret/dataio/dataset.hpp"
#include "cmdret/dataio/synth.hpp"
#include "cmdret/errors.hpp"
#include "cmdret/model.hpp"
#include "cmdret/numerics/gradcheck.hpp"
#include "cmdret/retrieval.hpp"
#include "cmdret/trainer.hpp"

namespace cmdret::cli {

inline constexpr std::size_t kGradcheckMaxDim = 32;

namespace fs = std::filesystem;

inline std::string banner(const std::string& command, const std::optional<fs::path>& file, const RunConfig& cfg) {
  std::string s = "command = " + command + "\n";
  s += "config_file = " + (file ? file->string() : std::string("(none)")) + "\n";
  return s + echo_config(cfg);
}

inline void print_commented(std::ostream& out, const std::string& text) {
  std::istringstream in(text);
  for (std::string line; std::getline(in, line);) out << "# " << line << '\n';
}

inline dataio::Dataset load_split(const RunConfig& cfg, const std::string& split) {
  if (cfg.manifest.empty()) throw ConfigError("no manifest given (set manifest = <path>)");
  if (!fs::is_regular_file(cfg.manifest)) throw ConfigError("manifest not found: " + cfg.manifest);
  const auto manifest = dataio::read_manifest(cfg.manifest);
  dataio::Dataset ds = dataio::load_dataset(manifest, split.empty() ? std::nullopt : std::optional(split));
  if (ds.captions.empty()) throw DataError("no captions in manifest " + cfg.manifest + " for split '" + split + "'");
  return ds;
}

inline std::string final_checkpoint(const RunConfig& cfg) {
  return cfg.checkpoint.empty() ? (checkpoint_dir(cfg.out_dir) / "final.ckpt").string() : cfg.checkpoint;
}

inline void check_output_dir(const RunConfig& cfg) {
  if (cfg.out_dir.empty()) throw ConfigError("out_dir must not be empty");
}

inline TrainResult train_one(const RunConfig& cfg, const dataio::Dataset& ds, const std::string& header) {
  TrainRunOptions opt;
  opt.out_dir = cfg.out_dir;
  opt.config_echo = header;
  opt.checkpoint_every = cfg.checkpoint_every;
  if (!cfg.resume.empty()) opt.resume_from = fs::path(cfg.resume);
  return run_training(ds, cfg.model, cfg.train, opt);
}

inline void write_report(const fs::path& path, const std::string& header, const RetrievalReport& rep) {
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw IoError("cannot write " + path.string());
  print_commented(f, header);
  f << rep.lines();
  if (!(f << std::flush)) throw IoError("failed writing " + path.string());
}

inline int cmd_train(const RunConfig& cfg, const std::string& header, std::ostream& out) {
  cfg.model.validate();
  cfg.train.validate();
  check_output_dir(cfg);
  const dataio::Dataset ds = load_split(cfg, cfg.split);
  print_commented(out, header);
  const TrainResult res = train_one(cfg, ds, header);
  if (!res.metrics.empty()) {
    const auto& last = res.metrics.back();
    char buf[200];
    std::snprintf(buf, sizeof buf, "final step %zu: l_sic %.6f  l_cmd %.6f  total %.6f  lr %.3g\n", last.step,
                  last.loss.l_sic, last.loss.l_cmd, last.loss.total, last.lr);
    out << buf;
  }
  out << "checkpoint " << res.last_checkpoint.string() << '\n';
  return 0;
}

inline int cmd_eval(const RunConfig& cfg, const std::string& header, std::ostream& out) {
  cfg.model.validate();
  check_output_dir(cfg);
  const std::string ckpt = final_checkpoint(cfg);
  if (!fs::is_regular_file(ckpt)) throw ConfigError("checkpoint not found: " + ckpt);
  const dataio::Dataset ds = load_split(cfg, cfg.eval_split.empty() ? cfg.split : cfg.eval_split);
  const Checkpoint ck = load_checkpoint(ckpt, cfg.model);
  const RetrievalReport rep = evaluate_dataset(ds, ck.params, cfg.model);
  fs::create_directories(cfg.out_dir);
  write_report(fs::path(cfg.out_dir) / "report.txt", header + "checkpoint_step = " + std::to_string(ck.step) + "\n",
               rep);
  out << rep.table() << rep.lines();
  return 0;
}

inline int cmd_gradcheck(const RunConfig& cfg, std::ostream& out) {
  if (cfg.model.speech_dim > kGradcheckMaxDim || cfg.model.shared_dim > kGradcheckMaxDim) {
    throw ConfigError("gradcheck refuses speech_dim " + std::to_string(cfg.model.speech_dim) + " / shared_dim " +
                      std::to_string(cfg.model.shared_dim) + ": both must be at most " +
                      std::to_string(kGradcheckMaxDim) + " to keep runtime bounded; try --speech_dim 8 --shared_dim 8");
  }
  GradCheckDims dims;
  dims.speech_dim = cfg.model.speech_dim;
  dims.shared_dim = cfg.model.shared_dim;
  dims.upstream_layers = cfg.model.upstream_layers;
  dims.heads = cfg.model.heads;
  dims.pre_norm = cfg.model.pre_norm;
  dims.positional_encoding = cfg.model.positional_encoding;
  dims.clamp_logit_scale = cfg.model.clamp_logit_scale;
  dims.frames = cfg.synth.frames;
  dims.patches = cfg.synth.patches;
  dims.batch = cfg.gradcheck_batch;
  dims.seed = cfg.train.seed;
  dims.alpha = cfg.train.alpha > 0.0 ? cfg.train.alpha : 0.5;
  GradCheckProblem prob = make_gradcheck_problem(
      dims, cfg.inject_grad_fault.empty() ? std::nullopt : std::optional(cfg.inject_grad_fault));
  GradCheckOptions opt;
  opt.step = cfg.gradcheck_step;
  opt.tolerance = cfg.gradcheck_tolerance;
  const GradCheckReport rep = finite_diff_check(prob.objective, prob.params, opt);

  char buf[200];
  for (const auto& [group, worst] : rep.by_group()) {
    const std::string name(group_name(group));
    std::snprintf(buf, sizeof buf, "%-12s max relative error %.3e %s\n", name.c_str(), worst,
                  worst < opt.tolerance ? "ok" : "FAIL");
    out << buf;
  }
  if (!rep.passed()) {
    std::string failing;
    for (const auto& p : rep.params)
      if (!(p.max_rel_error < opt.tolerance)) failing += (failing.empty() ? "" : ", ") + p.name;
    throw NumericError("gradient check failed for " + failing + "; " + rep.summary());
  }
  out << "gradcheck passed: " << rep.summary() << '\n';
  return 0;
}

inline int cmd_synth(const RunConfig& cfg, std::ostream& out) {
  check_output_dir(cfg);
  const auto m = dataio::write_synthetic_dataset(cfg.synth, cfg.out_dir);
  out << "wrote " << m.caption_count() << " captions to " << (fs::path(cfg.out_dir) / "manifest.tsv").string() << '\n';
  return 0;
}

inline int cmd_sweep_alpha(const RunConfig& cfg, const std::string& header, std::ostream& out) {
  cfg.model.validate();
  check_output_dir(cfg);
  for (double a : cfg.alphas) {
    if (!(a >= 0.0 && a <= 1.0)) throw ConfigError("alphas must lie in [0, 1], got " + detail::format_double(a));
  }
  for (double a : cfg.alphas) {
    RunConfig run = cfg;
    run.train.alpha = a;
    run.train.validate();
  }
  const dataio::Dataset train_ds = load_split(cfg, cfg.split);
  const dataio::Dataset eval_ds = load_split(cfg, cfg.eval_split.empty() ? cfg.split : cfg.eval_split);

  fs::create_directories(cfg.out_dir);
  const fs::path table = fs::path(cfg.out_dir) / "sweep.csv";
  std::ofstream csv(table, std::ios::trunc);
  if (!csv) throw IoError("cannot write " + table.string());
  print_commented(csv, header);
  csv << "alpha,mean_r1\n" << std::flush;
  for (double a : cfg.alphas) {
    RunConfig run = cfg;
    run.train.alpha = a;
    run.out_dir = (fs::path(cfg.out_dir) / ("alpha_" + detail::format_double(a))).string();
    const TrainResult res = train_one(run, train_ds, header + "alpha_override = " + detail::format_double(a) + "\n");
    const RetrievalReport rep = evaluate_dataset(eval_ds, res.params, run.model);
    char buf[64];
    std::snprintf(buf, sizeof buf, "%s,%.6f", detail::format_double(a).c_str(), rep.mean.at(1));
    out << buf << '\n' << std::flush;
    csv << buf << '\n' << std::flush;
  }
  return 0;
}

/// Runs one subcommand and returns its exit status. Diagnostics go to `err`.
inline int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Speech-image retrieval with cross-modal denoising"};
  app.require_subcommand(1);
  std::map<std::string, std::string> values;
  std::string config_file;
  const std::vector<std::pair<std::string, std::string>> commands{
      {"train", "train a model on a manifest"},
      {"eval", "Recall@K of a checkpoint on a manifest"},
      {"gradcheck", "compare analytic and finite-difference gradients"},
      {"synth", "write a synthetic dataset"},
      {"sweep-alpha", "train and evaluate one model per alpha"}};
  std::map<std::string, CLI::App*> subs;
  for (const auto& [name, help] : commands) {
    CLI::App* sub = app.add_subcommand(name, help);
    sub->add_option("--config", config_file, "key = value config file");
    for (const auto& key : config_keys()) sub->add_option("--" + key.name, values[key.name], key.help);
    subs[name] = sub;
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? 0 : static_cast<int>(ErrorKind::config);
  }

  std::string command;
  CLI::App* sub = nullptr;
  for (const auto& [name, s] : subs)
    if (s->parsed()) command = name, sub = s;

  try {
    std::vector<std::pair<std::string, std::string>> overrides;
    for (const auto& key : config_keys())
      if (sub->get_option("--" + key.name)->count() > 0) overrides.emplace_back(key.name, values[key.name]);
    const std::optional<fs::path> file = config_file.empty() ? std::nullopt : std::optional<fs::path>(config_file);
    const RunConfig cfg = resolve_config(file, overrides);
    const std::string header = banner(command, file, cfg);

    if (command == "train") return cmd_train(cfg, header, out);
    if (command == "eval") return cmd_eval(cfg, header, out);
    if (command == "gradcheck") return cmd_gradcheck(cfg, out);
    if (command == "synth") return cmd_synth(cfg, out);
    return cmd_sweep_alpha(cfg, header, out);
  } catch (const Error& e) {
    err << "error: " << e.what() << '\n';
    return e.exit_code();
  } catch (const fs::filesystem_error& e) {
    err << "error: io: " << e.what() << '\n';
    return static_cast<int>(ErrorKind::io);
  }
}

}  // namespace cmdret::cli
