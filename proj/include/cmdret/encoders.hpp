#pragma once

// Speech-side trainable encoder and the frozen image-side pass-through.
//
// Speech: frozen upstream layers -> convex layer weighting -> [CLS; frames]
// -> one transformer encoder layer -> CLS state projected to the shared space
// and unit-normalized.

#include <cmath>
#include <cstddef>
#include <optional>
#include <string>
#include <vector>

#include "cmdret/errors.hpp"
#include "cmdret/model_config.hpp"
#include "cmdret/numerics/ops.hpp"
#include "cmdret/numerics/tape.hpp"
#include "cmdret/params.hpp"

namespace cmdret {

enum class Modality : std::uint8_t { speech = 0, image = 1 };

/// Frozen upstream speech features: one T×D matrix per upstream layer.
struct MultiLayerSpeechFeatures {
  std::vector<Tensor> layers;

  std::size_t frames() const { return layers.at(0).dim(0); }
  std::size_t dim() const { return layers.at(0).dim(1); }

  void validate() const {
    if (layers.size() < 2) {
      throw DataError("speech features need at least 2 layers, got " +
                      std::to_string(layers.size()));
    }
    for (const Tensor& l : layers) {
      if (l.rank() != 2 || l.shape() != layers[0].shape()) {
        throw DataError("speech layers disagree: " + shape_str(layers[0].shape()) + " vs " +
                        shape_str(l.shape()));
      }
    }
  }
};

/// A sequence of token features with an optional global vector.
struct FeatureSequence {
  Tensor tokens;               // T×D frames or N×E patches
  std::optional<Tensor> cls;   // global vector, length D or E
  Modality modality = Modality::speech;
  bool normalized = false;     // cls has unit norm
};

/// Convex combination of upstream layers with softmax(layer_logits) weights.
inline Var aggregate_layers(Var layer_logits, const std::vector<Tensor>& layers) {
  if (layer_logits.value().rank() != 1 || layer_logits.value().dim(0) != layers.size()) {
    throw DimensionError("aggregate_layers: " + std::to_string(layers.size()) +
                         " layers vs logits " + shape_str(layer_logits.shape()));
  }
  return ops::weighted_sum(ops::softmax_rows(layer_logits), layers);
}

inline Tensor aggregate_layers(const MultiLayerSpeechFeatures& mls, const Tensor& layer_logits) {
  mls.validate();
  Tape tape;
  return aggregate_layers(tape.constant(layer_logits), mls.layers).value();
}

/// Sinusoidal position table, rows = positions.
inline Tensor sinusoidal_positions(std::size_t positions, std::size_t dim) {
  Tensor pe(Shape{positions, dim});
  for (std::size_t p = 0; p < positions; ++p) {
    for (std::size_t i = 0; i < dim; ++i) {
      const double freq = std::pow(10000.0, -static_cast<double>(i - i % 2) / static_cast<double>(dim));
      pe(p, i) = (i % 2 == 0) ? std::sin(static_cast<double>(p) * freq)
                              : std::cos(static_cast<double>(p) * freq);
    }
  }
  return pe;
}

namespace detail {

// Multi-head self-attention over the rows of x. `valid` masks keys.
inline Var self_attention(const Binding& p, Var x, const ModelConfig& cfg,
                          const std::vector<bool>& valid) {
  using namespace ops;
  Var q = linear(x, p[names::attn_q_w], p[names::attn_q_b]);
  Var k = linear(x, p[names::attn_k_w], p[names::attn_k_b]);
  Var v = linear(x, p[names::attn_v_w], p[names::attn_v_b]);
  const std::size_t dh = cfg.head_dim();
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
  std::vector<Var> heads;
  heads.reserve(cfg.heads);
  for (std::size_t h = 0; h < cfg.heads; ++h) {
    Var qh = slice_cols(q, h * dh, dh);
    Var kh = slice_cols(k, h * dh, dh);
    Var vh = slice_cols(v, h * dh, dh);
    Var w = softmax_rows(scale(matmul(qh, transpose(kh)), inv_sqrt), &valid);
    heads.push_back(matmul(w, vh));
  }
  return linear(concat_cols(heads), p[names::attn_o_w], p[names::attn_o_b]);
}

inline Var feed_forward(const Binding& p, Var x) {
  using namespace ops;
  return linear(gelu(linear(x, p[names::ffn_in_w], p[names::ffn_in_b])), p[names::ffn_out_w],
                p[names::ffn_out_b]);
}

}  // namespace detail

/// Encoder layer over [CLS; frames]; post-norm unless cfg.pre_norm.
inline Var transformer_layer(const Binding& p, Var x, const ModelConfig& cfg,
                             const std::vector<bool>& valid) {
  using namespace ops;
  if (cfg.pre_norm) {
    Var h = add(x, cmdret::detail::self_attention(
                       p, layer_norm(x, p[names::ln1_gamma], p[names::ln1_beta]), cfg, valid));
    return add(h, cmdret::detail::feed_forward(p, layer_norm(h, p[names::ln2_gamma], p[names::ln2_beta])));
  }
  Var h = layer_norm(add(x, cmdret::detail::self_attention(p, x, cfg, valid)), p[names::ln1_gamma],
                     p[names::ln1_beta]);
  return layer_norm(add(h, cmdret::detail::feed_forward(p, h)), p[names::ln2_gamma], p[names::ln2_beta]);
}

struct SpeechEncoding {
  Var cls;     // 1×E, unit norm
  Var tokens;  // length×D
};

/// Encodes `frames` (rows ≥ length; rows past `length` are padding and never
/// attended to).
inline SpeechEncoding encode_speech(const Binding& p, Var frames, std::size_t length,
                                    const ModelConfig& cfg) {
  using namespace ops;
  cfg.validate();
  const Tensor& fv = frames.value();
  if (fv.rank() != 2 || fv.dim(1) != cfg.speech_dim) {
    throw DimensionError("encode_speech: frames " + shape_str(fv.shape()) + " vs speech_dim " +
                         std::to_string(cfg.speech_dim));
  }
  if (length == 0 || length > fv.dim(0)) {
    throw DataError("encode_speech: length " + std::to_string(length) + " with " +
                    std::to_string(fv.dim(0)) + " frame rows");
  }
  const std::size_t rows = fv.dim(0) + 1;
  Var cls = reshape(p[names::cls_token], Shape{1, cfg.speech_dim});
  Var x = concat_rows({cls, frames});
  if (cfg.positional_encoding) x = add_const(x, sinusoidal_positions(rows, cfg.speech_dim));
  std::vector<bool> valid(rows, false);
  for (std::size_t i = 0; i <= length; ++i) valid[i] = true;
  Var y = transformer_layer(p, x, cfg, valid);
  Var global = l2_normalize_rows(linear(slice_rows(y, 0, 1), p[names::proj_w], p[names::proj_b]));
  return SpeechEncoding{global, slice_rows(y, 1, length)};
}

/// Layer aggregation followed by the encoder; the path used in training.
inline SpeechEncoding encode_speech(const Binding& p, const std::vector<Tensor>& layers,
                                    std::size_t length, const ModelConfig& cfg) {
  if (layers.size() != cfg.upstream_layers) {
    throw DimensionError("speech features have " + std::to_string(layers.size()) +
                         " layers, model expects " + std::to_string(cfg.upstream_layers));
  }
  Var frames = aggregate_layers(p[names::layer_logits], layers);
  return encode_speech(p, frames, length, cfg);
}

/// Inference-only speech encoding of unpadded upstream features.
inline FeatureSequence encode_speech(const MultiLayerSpeechFeatures& mls, const ParamStore& params,
                                     const ModelConfig& cfg) {
  mls.validate();
  Tape tape;
  Binding p(tape, params, /*trainable=*/false);
  SpeechEncoding enc = encode_speech(p, mls.layers, mls.frames(), cfg);
  Tensor cls = enc.cls.value().reshaped(Shape{cfg.shared_dim});
  return FeatureSequence{enc.tokens.value(), std::move(cls), Modality::speech, true};
}

inline Tensor normalized(const Tensor& v) {
  const double n = l2_norm(v.data());
  if (!(n >= 1e-12)) throw DataError("global feature has norm " + std::to_string(n) + " (underflow)");
  Tensor out = v;
  for (double& x : out.values()) x /= n;
  return out;
}

/// Frozen image features: cls unit-normalized, patches untouched.
inline FeatureSequence image_passthrough(const FeatureSequence& raw) {
  if (!raw.cls) throw DataError("image features carry no global (cls) vector");
  return FeatureSequence{raw.tokens, normalized(*raw.cls), Modality::image, true};
}

}  // namespace cmdret
