#pragma once

// Fusion-free inference scoring and Recall@K in both directions.

#include <algorithm>
#include <array>
#include <cstddef>
#include <cstdio>
#include <map>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "cmdret/dataio/dataset.hpp"
#include "cmdret/encoders.hpp"
#include "cmdret/errors.hpp"
#include "cmdret/model_config.hpp"
#include "cmdret/params.hpp"

namespace cmdret {

inline constexpr std::array<std::size_t, 3> kRecallKs{1, 5, 10};

/// Q×G dot products of unit-normalized global features.
inline Tensor score_all_pairs(const Tensor& speech_cls, const Tensor& image_cls) {
  if (speech_cls.rank() != 2 || image_cls.rank() != 2 || speech_cls.dim(1) != image_cls.dim(1)) {
    throw DimensionError("score_all_pairs: speech " + shape_str(speech_cls.shape()) + " vs image " +
                         shape_str(image_cls.shape()));
  }
  const std::size_t q = speech_cls.dim(0), g = image_cls.dim(0);
  Tensor sim(Shape{q, g});
  for (std::size_t i = 0; i < q; ++i)
    for (std::size_t j = 0; j < g; ++j) sim(i, j) = dot(speech_cls.row(i), image_cls.row(j));
  return sim;
}

/// Rank of gallery item `g` for a score row: the number of items ordered
/// before it (higher score, or equal score and lower index).
inline std::size_t gallery_rank(std::span<const double> scores, std::size_t g) {
  std::size_t rank = 0;
  for (std::size_t j = 0; j < scores.size(); ++j) {
    if (scores[j] > scores[g] || (scores[j] == scores[g] && j < g)) ++rank;
  }
  return rank;
}

/// Percentage of queries with a correct gallery item among their top K.
inline double recall_at_k(const Tensor& sim, const std::vector<std::vector<std::size_t>>& truth, std::size_t k) {
  require_rank(sim, 2, "recall_at_k");
  const std::size_t q = sim.dim(0), g = sim.dim(1);
  if (truth.size() != q) {
    throw DimensionError("recall_at_k: " + std::to_string(truth.size()) + " ground-truth sets for " +
                         std::to_string(q) + " queries");
  }
  if (k == 0 || k > g) {
    throw ContractError("recall_at_k: K=" + std::to_string(k) + " with gallery of " + std::to_string(g));
  }
  std::size_t hits = 0;
  for (std::size_t i = 0; i < q; ++i) {
    if (truth[i].empty()) throw DataError("query " + std::to_string(i) + " has no correct gallery item");
    const auto row = sim.row(i);
    for (std::size_t c : truth[i]) {
      if (c >= g) throw DataError("ground-truth index " + std::to_string(c) + " outside gallery");
      if (gallery_rank(row, c) < k) {
        ++hits;
        break;
      }
    }
  }
  return 100.0 * static_cast<double>(hits) / static_cast<double>(q);
}

struct RetrievalReport {
  std::map<std::size_t, double> speech_to_image;
  std::map<std::size_t, double> image_to_speech;
  std::map<std::size_t, double> mean;
  std::size_t num_speech = 0;
  std::size_t num_images = 0;

  /// Machine-readable form: one "direction,K,value" line per entry.
  std::string lines() const {
    std::ostringstream os;
    auto emit = [&](const char* dir, const std::map<std::size_t, double>& m) {
      for (const auto& [k, v] : m) {
        char buf[64];
        std::snprintf(buf, sizeof buf, "%s,%zu,%.6f", dir, k, v);
        os << buf << '\n';
      }
    };
    emit("s2i", speech_to_image);
    emit("i2s", image_to_speech);
    emit("mean", mean);
    return os.str();
  }

  std::string table() const {
    std::ostringstream os;
    char buf[128];
    std::snprintf(buf, sizeof buf, "%zu speech queries, %zu images\n", num_speech, num_images);
    os << buf;
    os << "direction        R@1      R@5     R@10\n";
    auto row = [&](const char* name, const std::map<std::size_t, double>& m) {
      std::snprintf(buf, sizeof buf, "%-12s %8.2f %8.2f %8.2f\n", name, m.at(1), m.at(5), m.at(10));
      os << buf;
    };
    row("speech->image", speech_to_image);
    row("image->speech", image_to_speech);
    row("mean", mean);
    return os.str();
  }
};

/// `caption_image[q]` is the gallery image of speech query q. Image→speech
/// counts any of the image's captions as a hit. K is capped at the gallery
/// size, so tiny galleries report R@K = R@G.
inline RetrievalReport evaluate_bidirectional(const Tensor& speech_cls, const Tensor& image_cls,
                                              std::span<const std::size_t> caption_image) {
  const Tensor sim = score_all_pairs(speech_cls, image_cls);
  const std::size_t q = sim.dim(0), g = sim.dim(1);
  if (caption_image.size() != q) {
    throw DataError("pairing covers " + std::to_string(caption_image.size()) + " of " + std::to_string(q) +
                    " speech items");
  }
  std::vector<std::vector<std::size_t>> s2i_truth(q), i2s_truth(g);
  for (std::size_t i = 0; i < q; ++i) {
    if (caption_image[i] >= g) throw DataError("speech item " + std::to_string(i) + " is paired to a missing image");
    s2i_truth[i].push_back(caption_image[i]);
    i2s_truth[caption_image[i]].push_back(i);
  }
  for (std::size_t j = 0; j < g; ++j)
    if (i2s_truth[j].empty()) throw DataError("image " + std::to_string(j) + " has no paired speech");

  Tensor sim_t(Shape{g, q});
  for (std::size_t i = 0; i < q; ++i)
    for (std::size_t j = 0; j < g; ++j) sim_t(j, i) = sim(i, j);

  RetrievalReport rep;
  rep.num_speech = q;
  rep.num_images = g;
  for (std::size_t k : kRecallKs) {
    const double s2i = recall_at_k(sim, s2i_truth, std::min(k, g));
    const double i2s = recall_at_k(sim_t, i2s_truth, std::min(k, q));
    rep.speech_to_image[k] = s2i;
    rep.image_to_speech[k] = i2s;
    rep.mean[k] = (s2i + i2s) / 2.0;
  }
  return rep;
}

struct EncodedSet {
  Tensor speech_cls;  // Q×E
  Tensor image_cls;   // G×E
  std::vector<std::size_t> pairing;
};

/// Global features for every caption and image. The fusion block is not
/// involved.
inline EncodedSet encode_dataset(const dataio::Dataset& ds, const ParamStore& params, const ModelConfig& cfg) {
  ds.validate();
  if (ds.speech_dim() != cfg.speech_dim || ds.shared_dim() != cfg.shared_dim ||
      ds.upstream_layers() != cfg.upstream_layers) {
    throw DataError("dataset dims (layers " + std::to_string(ds.upstream_layers()) + ", speech " +
                    std::to_string(ds.speech_dim()) + ", shared " + std::to_string(ds.shared_dim()) +
                    ") do not match model (layers " + std::to_string(cfg.upstream_layers) + ", speech " +
                    std::to_string(cfg.speech_dim) + ", shared " + std::to_string(cfg.shared_dim) + ")");
  }
  EncodedSet out{Tensor(Shape{ds.captions.size(), cfg.shared_dim}), Tensor(Shape{ds.images.size(), cfg.shared_dim}),
                 ds.pairing()};
  for (std::size_t i = 0; i < ds.captions.size(); ++i) {
    const FeatureSequence enc = encode_speech(ds.captions[i].speech, params, cfg);
    std::copy(enc.cls->data().begin(), enc.cls->data().end(), out.speech_cls.row(i).begin());
  }
  for (std::size_t j = 0; j < ds.images.size(); ++j) {
    std::copy(ds.images[j].cls.data().begin(), ds.images[j].cls.data().end(), out.image_cls.row(j).begin());
  }
  return out;
}

inline RetrievalReport evaluate_dataset(const dataio::Dataset& ds, const ParamStore& params, const ModelConfig& cfg) {
  const EncodedSet enc = encode_dataset(ds, params, cfg);
  return evaluate_bidirectional(enc.speech_cls, enc.image_cls, enc.pairing);
}

}  // namespace cmdret
