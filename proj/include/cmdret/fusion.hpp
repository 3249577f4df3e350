#pragma once

// Cross-modal denoising forward path: patch-swap noise within a batch, then
// attentive pooling of the noisy patches queried by the paired speech global
// feature, followed by FC + residual + LN.

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <numeric>
#include <string>
#include <vector>

#include "cmdret/errors.hpp"
#include "cmdret/model_config.hpp"
#include "cmdret/numerics/ops.hpp"
#include "cmdret/params.hpp"
#include "cmdret/rng.hpp"

namespace cmdret {

struct NoiseSpec {
  double ratio = 0.30;
  std::uint64_t seed = 0;
};

struct PatchDonor {
  std::size_t item;          // receiving item
  std::size_t position;      // receiving patch slot
  std::size_t source_item;   // donor item, never equal to `item`
  std::size_t source_patch;  // donor patch position
};

struct NoisyImageBatch {
  Tensor patches;                      // B×N×E
  std::vector<std::uint8_t> replaced;  // B·N flags, row-major
  std::vector<PatchDonor> donors;

  std::size_t batch() const { return patches.dim(0); }
  std::size_t num_patches() const { return patches.dim(1); }
  bool is_replaced(std::size_t b, std::size_t n) const { return replaced[b * num_patches() + n] != 0; }
};

/// Patches replaced per item: ratio·N rounded half up.
inline std::size_t replaced_count(double ratio, std::size_t n) {
  return static_cast<std::size_t>(std::floor(ratio * static_cast<double>(n) + 0.5));
}

inline NoisyImageBatch inject_patch_noise(const Tensor& patches, const NoiseSpec& spec) {
  if (patches.rank() != 3) {
    throw DimensionError("inject_patch_noise expects B×N×E patches, got " + shape_str(patches.shape()));
  }
  if (!(spec.ratio >= 0.0 && spec.ratio < 1.0)) {
    throw ConfigError("noise ratio " + std::to_string(spec.ratio) + " outside [0, 1)");
  }
  const std::size_t b_count = patches.dim(0), n = patches.dim(1), e = patches.dim(2);
  if (b_count < 2) throw ConfigError("batch size 1: no donor available for patch noise");

  NoisyImageBatch out{patches, std::vector<std::uint8_t>(b_count * n, 0), {}};
  const std::size_t k = replaced_count(spec.ratio, n);
  Rng rng(spec.seed, Stream::noise);
  std::vector<std::size_t> slots(n);
  for (std::size_t b = 0; b < b_count; ++b) {
    std::iota(slots.begin(), slots.end(), std::size_t{0});
    // Partial Fisher-Yates: the first k entries are a uniform k-subset.
    for (std::size_t i = 0; i < k; ++i) std::swap(slots[i], slots[i + rng.below(n - i)]);
    for (std::size_t i = 0; i < k; ++i) {
      std::size_t src = rng.below(b_count - 1);
      if (src >= b) ++src;
      const std::size_t src_patch = rng.below(n);
      const std::size_t dst = slots[i];
      for (std::size_t j = 0; j < e; ++j) {
        out.patches[(b * n + dst) * e + j] = patches[(src * n + src_patch) * e + j];
      }
      out.replaced[b * n + dst] = 1;
      out.donors.push_back(PatchDonor{b, dst, src, src_patch});
    }
  }
  return out;
}

/// Attentive pooling with identity Q/K/V: row i of the result is
/// Σₙ softmaxₙ(qᵢ·pᵢₙ/√E) pᵢₙ over item i's noisy patches.
inline Var cross_attend(Var speech_cls, const NoisyImageBatch& noisy) {
  using namespace ops;
  const Tensor& sv = speech_cls.value();
  const Tensor& pv = noisy.patches;
  if (sv.rank() != 2 || pv.rank() != 3 || sv.dim(0) != pv.dim(0) || sv.dim(1) != pv.dim(2)) {
    throw DimensionError("cross_attend: speech " + shape_str(sv.shape()) + " vs patches " +
                         shape_str(pv.shape()));
  }
  Tape& tape = *speech_cls.tape;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(sv.dim(1)));
  std::vector<Var> rows;
  rows.reserve(sv.dim(0));
  for (std::size_t i = 0; i < sv.dim(0); ++i) {
    Var kv = tape.constant(slice_leading(pv, i));
    Var q = slice_rows(speech_cls, i, 1);
    Var w = softmax_rows(scale(matmul(q, transpose(kv)), inv_sqrt));
    rows.push_back(matmul(w, kv));
  }
  return concat_rows(rows);
}

inline Tensor cross_attend(const Tensor& speech_cls, const NoisyImageBatch& noisy) {
  Tape tape;
  return cross_attend(tape.constant(speech_cls), noisy).value();
}

/// Plain-value copy of the fusion parameters.
struct FusionParams {
  Tensor fc_weight;  // E×E
  Tensor fc_bias;
  Tensor ln_gamma;
  Tensor ln_beta;

  static FusionParams from(const ParamStore& store) {
    return {store.value(names::fusion_fc_w), store.value(names::fusion_fc_b),
            store.value(names::fusion_ln_gamma), store.value(names::fusion_ln_beta)};
  }
};

/// normalize(LN(FC(a) + a)) per row.
inline Var fuse_project(Var attended, Var fc_weight, Var fc_bias, Var ln_gamma, Var ln_beta) {
  using namespace ops;
  const Tensor& w = fc_weight.value();
  if (w.rank() != 2 || w.dim(0) != w.dim(1)) {
    throw DimensionError("fusion FC must be square, got " + shape_str(w.shape()));
  }
  Var h = add(linear(attended, fc_weight, fc_bias), attended);
  return l2_normalize_rows(layer_norm(h, ln_gamma, ln_beta));
}

inline Var fuse_project(Var attended, const Binding& p) {
  return fuse_project(attended, p[names::fusion_fc_w], p[names::fusion_fc_b],
                      p[names::fusion_ln_gamma], p[names::fusion_ln_beta]);
}

/// Denoised global image features F^{I'} (B×E, unit rows).
inline Tensor fuse_project(const Tensor& attended, const FusionParams& fp) {
  Tape tape;
  return fuse_project(tape.constant(attended), tape.constant(fp.fc_weight),
                      tape.constant(fp.fc_bias), tape.constant(fp.ln_gamma),
                      tape.constant(fp.ln_beta))
      .value();
}

}  // namespace cmdret
