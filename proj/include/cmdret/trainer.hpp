#pragma once

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "cmdret/checkpoint.hpp"
#include "cmdret/dataio/dataset.hpp"
#include "cmdret/errors.hpp"
#include "cmdret/model.hpp"
#include "cmdret/model_config.hpp"
#include "cmdret/optim.hpp"
#include "cmdret/params.hpp"
#include "cmdret/rng.hpp"

namespace cmdret {

struct LossBreakdown {
  double l_sic = 0.0;
  double l_cmd = 0.0;
  double total = 0.0;
};

/// Parameters updated by a step: everything, minus the fusion block when
/// α = 0 (it is then outside the objective).
inline std::vector<std::string> trainable_names(const ParamStore& params, double alpha) {
  std::vector<std::string> out;
  for (const auto& p : params)
    if (alpha > 0.0 || p.group != ParamGroup::fusion) out.push_back(p.name);
  return out;
}

/// Noise stream for a given step; a function of (seed, step) only.
inline NoiseSpec noise_for_step(const TrainConfig& cfg, std::size_t step) {
  return NoiseSpec{cfg.noise_ratio, mix_seed(cfg.seed, step)};
}

/// Forward, backward and one Adam update at lr_at_step(step + 1). `step`
/// counts completed updates. Returns the pre-update losses.
inline LossBreakdown train_step(const dataio::Batch& batch, ParamStore& params, OptimState& state,
                                const ModelConfig& model, const TrainConfig& cfg, std::size_t step) {
  if (batch.size() < 2 && cfg.alpha > 0.0) {
    throw ConfigError("batch size 1 with alpha > 0: patch noise needs a donor item");
  }
  Tape tape;
  Binding bound(tape, params);
  LossVars loss = forward_losses(bound, batch, model, cfg.alpha, noise_for_step(cfg, step));
  LossBreakdown out{loss.l_sic.value().item(), loss.l_cmd.value().item(), loss.total.value().item()};
  if (!std::isfinite(out.total) || !std::isfinite(out.l_cmd)) {
    throw NumericError("loss diverged at step " + std::to_string(step + 1) + " (l_sic " +
                       std::to_string(out.l_sic) + ", l_cmd " + std::to_string(out.l_cmd) + ")");
  }
  tape.backward(loss.total);
  adam_step(params, bound.grads(), state, lr_at_step(step + 1, cfg), cfg.weight_decay,
            trainable_names(params, cfg.alpha), cfg.weight_decay_mode);
  return out;
}

struct MetricsRow {
  std::size_t step = 0;  // 1-based
  LossBreakdown loss;
  double lr = 0.0;
};

inline std::string format_metrics_row(const MetricsRow& r) {
  char buf[160];
  std::snprintf(buf, sizeof buf, "%zu, %.17g, %.17g, %.17g, %.17g", r.step, r.loss.l_sic, r.loss.l_cmd,
                r.loss.total, r.lr);
  return buf;
}

/// Reads the data lines of a metrics log (comment lines start with '#').
inline std::vector<MetricsRow> read_metrics_log(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  std::vector<MetricsRow> rows;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty() || line[0] == '#') continue;
    MetricsRow r;
    if (std::sscanf(line.c_str(), "%zu, %lf, %lf, %lf, %lf", &r.step, &r.loss.l_sic, &r.loss.l_cmd,
                    &r.loss.total, &r.lr) != 5) {
      throw DataError("malformed metrics line: " + line);
    }
    rows.push_back(r);
  }
  return rows;
}

struct TrainRunOptions {
  std::filesystem::path out_dir;                   // receives metrics.log and checkpoints/
  std::string config_echo;                         // written verbatim as '#' header lines
  std::optional<std::filesystem::path> resume_from;
  std::size_t checkpoint_every = 0;                // 0: final checkpoint only
  std::optional<std::size_t> stop_after;           // halt (and checkpoint) after this many steps
  std::function<void(const MetricsRow&)> on_step;
};

struct TrainResult {
  ParamStore params;
  OptimState optim;
  std::vector<MetricsRow> metrics;  // rows produced by this invocation
  std::filesystem::path last_checkpoint;
  std::size_t steps_done = 0;
};

inline std::filesystem::path checkpoint_dir(const std::filesystem::path& out_dir) { return out_dir / "checkpoints"; }
inline std::filesystem::path metrics_path(const std::filesystem::path& out_dir) { return out_dir / "metrics.log"; }

namespace detail {

// Fails before any training work when outputs cannot be written.
inline void preflight_outputs(const std::filesystem::path& out_dir) {
  std::error_code ec;
  std::filesystem::create_directories(checkpoint_dir(out_dir), ec);
  if (ec) throw IoError("cannot create " + checkpoint_dir(out_dir).string() + ": " + ec.message());
  const auto probe = checkpoint_dir(out_dir) / ".write_probe";
  {
    std::ofstream f(probe);
    if (!f) throw IoError("checkpoint directory " + checkpoint_dir(out_dir).string() + " is not writable");
  }
  std::filesystem::remove(probe, ec);
}

}  // namespace detail

/// Seeded, epoch-shuffled training for cfg.total_steps updates. Batch
/// composition and noise depend only on (seed, step); a run resumed from a
/// step-k checkpoint continues exactly as the uninterrupted run.
inline TrainResult run_training(const dataio::Dataset& ds, const ModelConfig& model, const TrainConfig& cfg,
                                const TrainRunOptions& opt) {
  model.validate();
  cfg.validate();
  if (ds.captions.empty()) throw DataError("training dataset is empty");
  ds.validate();
  if (ds.speech_dim() != model.speech_dim || ds.shared_dim() != model.shared_dim ||
      ds.upstream_layers() != model.upstream_layers) {
    throw DataError("dataset dims (layers " + std::to_string(ds.upstream_layers()) + ", speech " +
                    std::to_string(ds.speech_dim()) + ", shared " + std::to_string(ds.shared_dim()) +
                    ") do not match model (layers " + std::to_string(model.upstream_layers) + ", speech " +
                    std::to_string(model.speech_dim) + ", shared " + std::to_string(model.shared_dim) + ")");
  }
  const std::size_t per_epoch = dataio::batches_per_epoch(ds.captions.size(), cfg.batch_size, true);
  if (per_epoch == 0) {
    throw DataError("dataset has " + std::to_string(ds.captions.size()) + " captions, fewer than batch_size " +
                    std::to_string(cfg.batch_size));
  }
  detail::preflight_outputs(opt.out_dir);

  TrainResult result;
  std::size_t start = 0;
  if (opt.resume_from) {
    Checkpoint ck = load_checkpoint(*opt.resume_from, model);
    result.params = std::move(ck.params);
    result.optim = std::move(ck.optim);
    start = ck.step;
    if (start > cfg.total_steps) throw DataError("checkpoint step is past total_steps");
  } else {
    result.params = init_params(model, cfg.seed);
  }

  std::ofstream log(metrics_path(opt.out_dir), opt.resume_from ? std::ios::app : std::ios::trunc);
  if (!log) throw IoError("cannot open " + metrics_path(opt.out_dir).string());
  std::istringstream echo(opt.config_echo);
  for (std::string line; std::getline(echo, line);) log << "# " << line << '\n';
  if (opt.resume_from) log << "# resumed from " << opt.resume_from->string() << " at step " << start << '\n';
  log << "# step, l_sic, l_cmd, total, lr\n";

  const std::size_t end = opt.stop_after ? std::min(cfg.total_steps, *opt.stop_after) : cfg.total_steps;
  std::optional<std::uint64_t> cached_epoch;
  std::vector<dataio::Batch> epoch_batches;
  for (std::size_t step = start; step < end; ++step) {
    const std::uint64_t epoch = step / per_epoch;
    if (cached_epoch != epoch) {
      epoch_batches = dataio::make_batches(ds, cfg.batch_size, cfg.seed, epoch, true);
      cached_epoch = epoch;
    }
    const auto& batch = epoch_batches[step % per_epoch];
    MetricsRow row{step + 1, train_step(batch, result.params, result.optim, model, cfg, step),
                   lr_at_step(step + 1, cfg)};
    log << format_metrics_row(row) << '\n';
    result.metrics.push_back(row);
    if (opt.on_step) opt.on_step(row);
    if (opt.checkpoint_every && (step + 1) % opt.checkpoint_every == 0 && step + 1 < end) {
      const auto path = checkpoint_dir(opt.out_dir) / ("step_" + std::to_string(step + 1) + ".ckpt");
      save_checkpoint(path, result.params, result.optim, step + 1, model);
      result.last_checkpoint = path;
    }
  }
  log.flush();
  if (!log) throw IoError("failed writing " + metrics_path(opt.out_dir).string());

  result.steps_done = end;
  const auto final_path = end == cfg.total_steps
                              ? checkpoint_dir(opt.out_dir) / "final.ckpt"
                              : checkpoint_dir(opt.out_dir) / ("step_" + std::to_string(end) + ".ckpt");
  save_checkpoint(final_path, result.params, result.optim, end, model);
  result.last_checkpoint = final_path;
  return result;
}

}  // namespace cmdret
