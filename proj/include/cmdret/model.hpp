#pragma once

// Full training objective for one batch: speech-image contrastive loss on the
// clean image globals plus the cross-modal denoising loss on fused features.

#include <cstdint>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include "cmdret/dataio/dataset.hpp"
#include "cmdret/dataio/synth.hpp"
#include "cmdret/encoders.hpp"
#include "cmdret/fusion.hpp"
#include "cmdret/model_config.hpp"
#include "cmdret/numerics/gradcheck.hpp"
#include "cmdret/numerics/ops.hpp"
#include "cmdret/objectives.hpp"
#include "cmdret/params.hpp"

namespace cmdret {

struct LossVars {
  Var l_sic;
  Var l_cmd;
  Var total;
  bool cmd_computed = false;  // false only for a single-item batch
};

/// Row-stacked S_cls for a batch (B×E).
inline Var encode_speech_batch(const Binding& p, const dataio::Batch& batch, const ModelConfig& cfg) {
  std::vector<Var> rows;
  rows.reserve(batch.size());
  for (std::size_t b = 0; b < batch.size(); ++b) {
    rows.push_back(encode_speech(p, batch.speech_layers(b), batch.lengths[b], cfg).cls);
  }
  return ops::concat_rows(rows);
}

/// Builds l_sic, l_cmd and l_sic + α·l_cmd. With α = 0 the CMD branch is
/// still evaluated for reporting but kept out of the total, so nothing
/// upstream of it receives gradient through it.
inline LossVars forward_losses(const Binding& p, const dataio::Batch& batch, const ModelConfig& cfg,
                               double alpha, const NoiseSpec& noise) {
  check_alpha(alpha);
  Tape& tape = p.tape();
  if (batch.size() < 2 && alpha > 0.0) {
    throw ConfigError("batch of size 1 cannot train the denoising task (no donor for patch noise)");
  }
  Var speech = encode_speech_batch(p, batch, cfg);
  Var image = ops::l2_normalize_rows(tape.constant(batch.image_cls));
  Var scale = logit_scale(p[names::log_tau], cfg);
  Var l_sic = sic_loss(speech, image, scale, batch.labels);

  if (batch.size() < 2) {
    Var zero = tape.constant(Tensor::scalar(0.0));
    return LossVars{l_sic, zero, l_sic, false};
  }
  NoisyImageBatch noisy = inject_patch_noise(batch.image_patches, noise);
  Var fused = fuse_project(cross_attend(speech, noisy), p);
  Var l_cmd = cmd_loss(speech, fused, scale, batch.labels);
  Var total = alpha > 0.0 ? total_loss(l_sic, l_cmd, alpha) : l_sic;
  return LossVars{l_sic, l_cmd, total, true};
}

struct GradCheckDims {
  std::size_t speech_dim = 8;   // D
  std::size_t shared_dim = 8;   // E
  std::size_t frames = 5;       // T
  std::size_t patches = 7;      // N
  std::size_t batch = 4;        // B
  std::size_t upstream_layers = 3;
  std::size_t heads = 8;
  bool pre_norm = false;
  bool positional_encoding = false;
  bool clamp_logit_scale = false;
  std::uint64_t seed = 0;
  double alpha = 0.5;
};

struct GradCheckProblem {
  ModelConfig model;
  ParamStore params;
  dataio::Batch batch;
  Objective objective;
};

/// Total loss on a small synthetic batch with two captions per image and
/// varying lengths. Noise is drawn once with a fixed seed. When
/// `fault_param` names a parameter, its backward path is routed through a
/// gradient-scaling identity.
inline GradCheckProblem make_gradcheck_problem(const GradCheckDims& dims,
                                               const std::optional<std::string>& fault_param = std::nullopt) {
  if (dims.batch < 2) throw ConfigError("gradcheck needs a batch of at least 2");
  GradCheckProblem prob;
  prob.model.upstream_layers = dims.upstream_layers;
  prob.model.speech_dim = dims.speech_dim;
  prob.model.shared_dim = dims.shared_dim;
  prob.model.heads = dims.heads;
  prob.model.pre_norm = dims.pre_norm;
  prob.model.positional_encoding = dims.positional_encoding;
  prob.model.clamp_logit_scale = dims.clamp_logit_scale;
  prob.model.validate();
  prob.params = init_params(prob.model, mix_seed(dims.seed, static_cast<std::uint64_t>(Stream::gradcheck)));
  if (fault_param && !prob.params.contains(*fault_param)) {
    throw ConfigError("cannot inject fault: unknown parameter " + *fault_param);
  }

  dataio::SynthConfig sc;
  sc.num_images = (dims.batch + 1) / 2;
  sc.captions_per_image = 2;
  sc.frames = dims.frames;
  sc.patches = dims.patches;
  sc.speech_dim = dims.speech_dim;
  sc.shared_dim = dims.shared_dim;
  sc.upstream_layers = dims.upstream_layers;
  sc.seed = dims.seed;
  const dataio::Dataset ds = dataio::synthesize_dataset(sc);
  std::vector<std::size_t> ids(dims.batch);
  std::iota(ids.begin(), ids.end(), std::size_t{0});
  prob.batch = dataio::assemble_batch(ds, ids);

  const ModelConfig model = prob.model;
  const dataio::Batch batch = prob.batch;
  const NoiseSpec noise{0.30, mix_seed(dims.seed, 1)};
  const double alpha = dims.alpha;
  prob.objective = [=](Tape&, const Binding& bound) {
    if (!fault_param) return forward_losses(bound, batch, model, alpha, noise).total;
    Binding routed = bound;
    routed.reroute(*fault_param, testing::faulty_identity(bound[*fault_param]));
    return forward_losses(routed, batch, model, alpha, noise).total;
  };
  return prob;
}

}  // namespace cmdret
