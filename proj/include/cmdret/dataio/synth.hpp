#pragma once

// Synthetic paired speech/image features for desk-scale runs.
//
// Each image owns a latent vector z. Patches are z plus patch-specific
// structure; the global feature is z. Captions carry A·z (A a fixed random
// D×E map) in their frames, mixed with junk that dominates the low upstream
// layers. `difficulty` adds isotropic noise everywhere; at 0 every caption is
// identifiable.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>

#include "cmdret/dataio/dataset.hpp"
#include "cmdret/dataio/feature_file.hpp"
#include "cmdret/errors.hpp"
#include "cmdret/rng.hpp"

namespace cmdret::dataio {

struct SynthConfig {
  std::size_t num_images = 32;
  std::size_t captions_per_image = 2;
  std::size_t frames = 6;    // maximum T; captions vary in [T-2, T]
  std::size_t patches = 9;   // N
  std::size_t speech_dim = 16;
  std::size_t shared_dim = 16;
  std::size_t upstream_layers = 3;
  std::uint64_t seed = 0;
  double difficulty = 0.0;

  void validate() const {
    if (num_images < 1 || captions_per_image < 1 || frames < 1 || patches < 1 || speech_dim < 1 ||
        shared_dim < 1) {
      throw ConfigError("synthetic dataset extents must be at least 1");
    }
    if (captions_per_image > 5) throw ConfigError("captions_per_image must be at most 5");
    if (upstream_layers < 2) throw ConfigError("upstream_layers must be at least 2");
    if (!(difficulty >= 0.0)) throw ConfigError("difficulty must be non-negative");
  }
};

namespace detail {

// Float-precision dataset with image cls vectors not yet normalized.
inline Dataset synthesize_raw(const SynthConfig& cfg) {
  cfg.validate();
  Rng rng(cfg.seed, Stream::synth);
  const std::size_t d = cfg.speech_dim, e = cfg.shared_dim, n = cfg.patches, layers = cfg.upstream_layers;
  const double noise = cfg.difficulty;

  Tensor mix(Shape{d, e});
  for (double& v : mix.values()) v = rng.normal() / std::sqrt(static_cast<double>(e));

  Dataset ds;
  for (std::size_t k = 0; k < cfg.num_images; ++k) {
    Tensor z(Shape{e});
    for (double& v : z.values()) v = rng.normal();
    Tensor patches(Shape{n, e});
    for (std::size_t p = 0; p < n; ++p)
      for (std::size_t j = 0; j < e; ++j) patches(p, j) = z[j] + 0.5 * rng.normal() + noise * rng.normal();
    Tensor cls = z;
    for (double& v : cls.values()) v += noise * rng.normal();
    ds.images.push_back(ImageItem{"img" + std::to_string(k), std::move(patches), normalized(cls)});

    Tensor az(Shape{d});
    for (std::size_t i = 0; i < d; ++i)
      for (std::size_t j = 0; j < e; ++j) az[i] += mix(i, j) * z[j];

    for (std::size_t c = 0; c < cfg.captions_per_image; ++c) {
      const std::size_t t = cfg.frames - rng.below(std::min<std::size_t>(cfg.frames, 3));
      Tensor base(Shape{t, d});
      for (std::size_t f = 0; f < t; ++f)
        for (std::size_t i = 0; i < d; ++i) base(f, i) = az[i] + 0.3 * rng.normal() + noise * rng.normal();
      MultiLayerSpeechFeatures mls;
      for (std::size_t l = 0; l < layers; ++l) {
        const double w = static_cast<double>(l) / static_cast<double>(layers - 1);
        Tensor layer(Shape{t, d});
        for (std::size_t i = 0; i < layer.size(); ++i) layer[i] = w * base[i] + (1.0 - w) * rng.normal();
        mls.layers.push_back(std::move(layer));
      }
      ds.captions.push_back(CaptionItem{k, std::move(mls)});
    }
  }
  // Rounded to float, matching the on-disk precision.
  auto to_float = [](Tensor& t) {
    for (double& v : t.values()) v = static_cast<double>(static_cast<float>(v));
  };
  for (auto& img : ds.images) {
    to_float(img.patches);
    to_float(img.cls);
  }
  for (auto& cap : ds.captions)
    for (auto& l : cap.speech.layers) to_float(l);
  return ds;
}

}  // namespace detail

/// In-memory synthesis; file output goes through write_synthetic_dataset.
inline Dataset synthesize_dataset(const SynthConfig& cfg) {
  Dataset ds = detail::synthesize_raw(cfg);
  for (auto& img : ds.images) img.cls = normalized(img.cls);
  ds.validate();
  return ds;
}

/// Writes one feature file per image and caption plus `manifest.tsv` under
/// `out_dir`. Returns the manifest (paths relative to out_dir).
inline DatasetManifest write_synthetic_dataset(const SynthConfig& cfg, const std::filesystem::path& out_dir) {
  const Dataset ds = detail::synthesize_raw(cfg);
  std::error_code ec;
  std::filesystem::create_directories(out_dir / "images", ec);
  std::filesystem::create_directories(out_dir / "speech", ec);
  if (ec) throw IoError("cannot create " + out_dir.string() + ": " + ec.message());

  DatasetManifest m;
  m.base_dir = out_dir;
  for (std::size_t k = 0; k < ds.images.size(); ++k) {
    const ImageItem& img = ds.images[k];
    const std::string image_rel = "images/" + img.pair_id + ".cmdf";
    write_feature_file(out_dir / image_rel, FeatureFile{Modality::image, {img.patches}, {img.cls}});
    m.entries.push_back(ManifestEntry{img.pair_id, image_rel, {}, "train"});
  }
  std::vector<std::size_t> seen(ds.images.size(), 0);
  for (const CaptionItem& cap : ds.captions) {
    const std::string rel = "speech/" + ds.images[cap.image].pair_id + "_" +
                            std::to_string(seen[cap.image]++) + ".cmdf";
    write_feature_file(out_dir / rel, FeatureFile{Modality::speech, cap.speech.layers, {}});
    m.entries[cap.image].speech_paths.push_back(rel);
  }
  write_manifest(out_dir / "manifest.tsv", m);
  return m;
}

}  // namespace cmdret::dataio
