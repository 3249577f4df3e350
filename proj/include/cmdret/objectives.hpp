#pragma once

// Speech-image contrastive loss and the cross-modal denoising loss.
//
// Both are the symmetric cross-entropy between softmax(sim/τ) and
// multi-positive targets; they differ only in which image-side features
// the speech globals are compared against.

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <span>
#include <string>

#include "cmdret/errors.hpp"
#include "cmdret/model_config.hpp"
#include "cmdret/numerics/ops.hpp"
#include "cmdret/params.hpp"

namespace cmdret {

enum class Direction { speech_to_image, image_to_speech };

/// Row i puts mass 1/n on every column whose label matches label i.
///
/// With diagonal pairing (speech i belongs with image i) the matrix is
/// symmetric, so both directions produce the same targets.
inline Tensor build_targets(std::span<const std::int64_t> labels, Direction /*direction*/) {
  const std::size_t b = labels.size();
  if (b == 0) throw ContractError("build_targets on an empty batch");
  Tensor y(Shape{b, b});
  for (std::size_t i = 0; i < b; ++i) {
    std::size_t n = 0;
    for (std::size_t j = 0; j < b; ++j) n += labels[j] == labels[i];
    const double mass = 1.0 / static_cast<double>(n);
    for (std::size_t j = 0; j < b; ++j)
      if (labels[j] == labels[i]) y(i, j) = mass;
  }
  return y;
}

/// S·Iᵀ for row-stacked global features.
inline Var similarity_matrix(Var speech, Var image) {
  return ops::matmul(speech, ops::transpose(image));
}

/// 1/τ = exp(−log τ), optionally capped at cfg.max_logit_scale.
inline Var logit_scale(Var log_tau, const ModelConfig& cfg) {
  Var s = ops::exp(ops::scale(log_tau, -1.0));
  return cfg.clamp_logit_scale ? ops::clamp_max(s, cfg.max_logit_scale) : s;
}

/// Row-stochastic probabilities: softmax over j of sim(i,j)/τ for
/// speech→image, of sim(j,i)/τ for image→speech.
inline Tensor similarity_probs(const Tensor& sim, double tau, Direction direction) {
  require_rank(sim, 2, "similarity_probs");
  if (!(tau > 0.0)) throw ConfigError("temperature must be positive");
  for (double v : sim.data())
    if (!std::isfinite(v)) throw DataError("non-finite similarity entry");
  Tape tape;
  Var s = tape.constant(sim);
  if (direction == Direction::image_to_speech) s = ops::transpose(s);
  return ops::softmax_rows(ops::scale(s, 1.0 / tau)).value();
}

/// H(y, p) averaged over rows, computed from logits in log space.
inline Var cross_entropy(Var logits, const Tensor& targets) {
  require_same_shape(logits.value(), targets, "cross_entropy");
  const double rows = static_cast<double>(targets.rows());
  return ops::scale(ops::sum(ops::mul_const(ops::log_softmax_rows(logits), targets)), -1.0 / rows);
}

/// ½[H(y_s2i, softmax(sim·scale)) + H(y_i2s, softmax(simᵀ·scale))].
inline Var contrastive_loss(Var sim, Var scale, const Tensor& y_s2i, const Tensor& y_i2s) {
  Var logits = ops::mul_scalar(sim, scale);
  Var h_s2i = cross_entropy(logits, y_s2i);
  Var h_i2s = cross_entropy(ops::transpose(logits), y_i2s);
  return ops::scale(ops::add(h_s2i, h_i2s), 0.5);
}

/// Probability-space form: ½[H(y_s2i, p_s2i) + H(y_i2s, p_i2s)]. A zero
/// probability on a positive target yields +∞.
inline double contrastive_loss(const Tensor& p_s2i, const Tensor& p_i2s, const Tensor& y_s2i,
                               const Tensor& y_i2s) {
  require_same_shape(p_s2i, y_s2i, "contrastive_loss");
  require_same_shape(p_i2s, y_i2s, "contrastive_loss");
  require_same_shape(p_s2i, p_i2s, "contrastive_loss");
  auto h = [](const Tensor& y, const Tensor& p) {
    double total = 0.0;
    for (std::size_t i = 0; i < y.size(); ++i)
      if (y[i] != 0.0) total -= y[i] * std::log(p[i]);
    return total / static_cast<double>(y.rows());
  };
  return 0.5 * (h(y_s2i, p_s2i) + h(y_i2s, p_i2s));
}

/// Contrastive loss between speech globals and clean image globals.
inline Var sic_loss(Var speech_cls, Var image_cls, Var scale, std::span<const std::int64_t> labels) {
  return contrastive_loss(similarity_matrix(speech_cls, image_cls), scale,
                          build_targets(labels, Direction::speech_to_image),
                          build_targets(labels, Direction::image_to_speech));
}

/// Same machinery against the denoised globals F^{I'}: every speech global is
/// scored against every fused row.
inline Var cmd_loss(Var speech_cls, Var fused, Var scale, std::span<const std::int64_t> labels) {
  return sic_loss(speech_cls, fused, scale, labels);
}

inline void check_alpha(double alpha) {
  if (!(alpha >= 0.0)) throw ConfigError("alpha must be non-negative, got " + std::to_string(alpha));
}

inline Var total_loss(Var l_sic, Var l_cmd, double alpha) {
  check_alpha(alpha);
  return ops::add(l_sic, ops::scale(l_cmd, alpha));
}

inline double total_loss(double l_sic, double l_cmd, double alpha) {
  check_alpha(alpha);
  return l_sic + alpha * l_cmd;
}

}  // namespace cmdret
