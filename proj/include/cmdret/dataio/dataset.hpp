#pragma once

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "cmdret/dataio/feature_file.hpp"
#include "cmdret/encoders.hpp"
#include "cmdret/errors.hpp"
#include "cmdret/rng.hpp"

namespace cmdret::dataio {

struct ManifestEntry {
  std::string pair_id;
  std::string image_path;
  std::vector<std::string> speech_paths;
  std::string split = "train";
};

/// Image/caption pairing. Paths are relative to `base_dir` unless absolute.
struct DatasetManifest {
  std::vector<ManifestEntry> entries;
  std::filesystem::path base_dir;

  std::size_t caption_count() const {
    std::size_t n = 0;
    for (const auto& e : entries) n += e.speech_paths.size();
    return n;
  }

  std::filesystem::path resolve(const std::string& p) const {
    std::filesystem::path path(p);
    return path.is_absolute() ? path : base_dir / path;
  }
};

/// Text form: one caption per line, "pair_id<TAB>image_path<TAB>speech_path"
/// with an optional fourth split column (train/dev/test). Blank lines and
/// lines starting with '#' are skipped.
inline DatasetManifest parse_manifest(std::istream& in, std::filesystem::path base_dir) {
  DatasetManifest m;
  m.base_dir = std::move(base_dir);
  std::map<std::string, std::size_t> by_pair;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty() || line[0] == '#') continue;
    std::vector<std::string> fields;
    std::stringstream ss(line);
    std::string field;
    while (std::getline(ss, field, '\t')) fields.push_back(field);
    if (fields.size() < 3 || fields.size() > 4) {
      throw DataError("manifest line " + std::to_string(line_no) + ": expected 3 or 4 tab-separated fields, got " +
                      std::to_string(fields.size()));
    }
    for (const auto& f : fields)
      if (f.empty()) throw DataError("manifest line " + std::to_string(line_no) + ": empty field");
    const std::string split = fields.size() == 4 ? fields[3] : "train";
    if (split != "train" && split != "dev" && split != "test") {
      throw DataError("manifest line " + std::to_string(line_no) + ": unknown split '" + split + "'");
    }
    auto it = by_pair.find(fields[0]);
    if (it == by_pair.end()) {
      by_pair.emplace(fields[0], m.entries.size());
      m.entries.push_back(ManifestEntry{fields[0], fields[1], {fields[2]}, split});
      continue;
    }
    ManifestEntry& e = m.entries[it->second];
    if (e.image_path != fields[1]) {
      throw DataError("manifest line " + std::to_string(line_no) + ": pair_id '" + fields[0] +
                      "' already bound to image " + e.image_path);
    }
    if (e.split != split) {
      throw DataError("manifest line " + std::to_string(line_no) + ": pair_id '" + fields[0] +
                      "' appears in two splits");
    }
    e.speech_paths.push_back(fields[2]);
  }
  return m;
}

inline DatasetManifest read_manifest(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open manifest " + path.string());
  return parse_manifest(in, path.parent_path());
}

inline void write_manifest(const std::filesystem::path& path, const DatasetManifest& m) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  for (const auto& e : m.entries)
    for (const auto& s : e.speech_paths)
      out << e.pair_id << '\t' << e.image_path << '\t' << s << '\t' << e.split << '\n';
  if (!out) throw IoError("short write to " + path.string());
}

struct ImageItem {
  std::string pair_id;
  Tensor patches;  // N×E
  Tensor cls;      // E, unit norm
};

struct CaptionItem {
  std::size_t image;  // index into Dataset::images
  MultiLayerSpeechFeatures speech;
};

/// Fully loaded, validated features.
struct Dataset {
  std::vector<ImageItem> images;
  std::vector<CaptionItem> captions;

  std::size_t upstream_layers() const { return captions.at(0).speech.layers.size(); }
  std::size_t speech_dim() const { return captions.at(0).speech.dim(); }
  std::size_t shared_dim() const { return images.at(0).cls.size(); }
  std::size_t num_patches() const { return images.at(0).patches.dim(0); }

  /// Image index for every caption, in caption order.
  std::vector<std::size_t> pairing() const {
    std::vector<std::size_t> out;
    out.reserve(captions.size());
    for (const auto& c : captions) out.push_back(c.image);
    return out;
  }

  /// Checks the cross-item invariants shared by every consumer.
  void validate() const {
    if (images.empty() || captions.empty()) throw DataError("dataset is empty");
    const std::size_t layers = upstream_layers(), d = speech_dim(), e = shared_dim(), n = num_patches();
    std::vector<std::size_t> per_image(images.size(), 0);
    for (const auto& c : captions) {
      c.speech.validate();
      if (c.speech.layers.size() != layers || c.speech.dim() != d) {
        throw DataError("speech features disagree on shape: " + std::to_string(c.speech.layers.size()) +
                        " layers × dim " + std::to_string(c.speech.dim()) + " vs " + std::to_string(layers) +
                        " × " + std::to_string(d));
      }
      if (c.image >= images.size()) throw DataError("caption refers to a missing image");
      ++per_image[c.image];
    }
    for (std::size_t i = 0; i < images.size(); ++i) {
      const auto& img = images[i];
      if (img.patches.rank() != 2 || img.patches.dim(1) != e || img.patches.dim(0) != n ||
          img.cls.shape() != Shape{e}) {
        throw DataError("image '" + img.pair_id + "' has patches " + shape_str(img.patches.shape()) +
                        " and cls " + shape_str(img.cls.shape()) + "; expected [" + std::to_string(n) + "x" +
                        std::to_string(e) + "] and [" + std::to_string(e) + "]");
      }
      if (per_image[i] < 1 || per_image[i] > 5) {
        throw DataError("image '" + img.pair_id + "' has " + std::to_string(per_image[i]) +
                        " captions (expected 1 to 5)");
      }
    }
  }
};

/// Loads and validates every referenced file; a dataset that loads cannot
/// fail to parse later. `split`, when given, keeps only matching entries.
inline Dataset load_dataset(const DatasetManifest& manifest,
                            const std::optional<std::string>& split = std::nullopt) {
  Dataset ds;
  for (const auto& entry : manifest.entries) {
    if (split && entry.split != *split) continue;
    FeatureFile img = read_feature_file(manifest.resolve(entry.image_path));
    if (img.modality != Modality::image) throw DataError(entry.image_path + ": not an image feature file");
    if (img.layers.size() != 1 || img.cls.size() != 1) {
      throw DataError(entry.image_path + ": image files need exactly one layer and a cls vector");
    }
    FeatureSequence raw{img.layers[0], img.cls[0], Modality::image, false};
    FeatureSequence passed = image_passthrough(raw);
    ds.images.push_back(ImageItem{entry.pair_id, std::move(passed.tokens), std::move(*passed.cls)});
    for (const auto& sp : entry.speech_paths) {
      FeatureFile f = read_feature_file(manifest.resolve(sp));
      if (f.modality != Modality::speech) throw DataError(sp + ": not a speech feature file");
      ds.captions.push_back(CaptionItem{ds.images.size() - 1, MultiLayerSpeechFeatures{std::move(f.layers)}});
    }
  }
  ds.validate();
  return ds;
}

/// A training or evaluation batch. Speech is zero-padded to the longest
/// caption; `lengths` holds the true frame counts.
struct Batch {
  Tensor speech;                       // B×layers×T×D
  std::vector<std::size_t> lengths;    // B
  Tensor image_patches;                // B×N×E
  Tensor image_cls;                    // B×E
  std::vector<std::int64_t> labels;    // image index per row; equal labels are positives
  std::vector<std::size_t> caption_ids;

  std::size_t size() const { return lengths.size(); }

  /// Padded upstream layers (T×D each) of row b.
  std::vector<Tensor> speech_layers(std::size_t b) const {
    Tensor item = slice_leading(speech, b);
    std::vector<Tensor> out;
    for (std::size_t l = 0; l < item.dim(0); ++l) out.push_back(slice_leading(item, l));
    return out;
  }

  /// Frame mask of row b (true = real frame).
  std::vector<bool> frame_mask(std::size_t b) const {
    std::vector<bool> m(speech.dim(2), false);
    std::fill(m.begin(), m.begin() + static_cast<std::ptrdiff_t>(lengths.at(b)), true);
    return m;
  }
};

inline Batch assemble_batch(const Dataset& ds, std::span<const std::size_t> caption_ids) {
  if (caption_ids.empty()) throw ContractError("empty batch");
  const std::size_t b = caption_ids.size(), layers = ds.upstream_layers(), d = ds.speech_dim();
  const std::size_t n = ds.num_patches(), e = ds.shared_dim();
  std::size_t t_max = 0;
  for (std::size_t c : caption_ids) t_max = std::max(t_max, ds.captions.at(c).speech.frames());

  Batch batch{Tensor(Shape{b, layers, t_max, d}), {}, Tensor(Shape{b, n, e}), Tensor(Shape{b, e}), {}, {}};
  for (std::size_t i = 0; i < b; ++i) {
    const CaptionItem& cap = ds.captions[caption_ids[i]];
    const ImageItem& img = ds.images[cap.image];
    const std::size_t t = cap.speech.frames();
    for (std::size_t l = 0; l < layers; ++l) {
      const Tensor& src = cap.speech.layers[l];
      std::copy(src.data().begin(), src.data().end(),
                batch.speech.data().begin() + static_cast<std::ptrdiff_t>(((i * layers + l) * t_max) * d));
    }
    std::copy(img.patches.data().begin(), img.patches.data().end(),
              batch.image_patches.data().begin() + static_cast<std::ptrdiff_t>(i * n * e));
    std::copy(img.cls.data().begin(), img.cls.data().end(),
              batch.image_cls.data().begin() + static_cast<std::ptrdiff_t>(i * e));
    batch.lengths.push_back(t);
    batch.labels.push_back(static_cast<std::int64_t>(cap.image));
    batch.caption_ids.push_back(caption_ids[i]);
  }
  return batch;
}

/// Caption order for (seed, epoch): a Fisher-Yates shuffle of all captions.
inline std::vector<std::size_t> epoch_order(std::size_t captions, std::uint64_t seed, std::uint64_t epoch) {
  std::vector<std::size_t> order(captions);
  for (std::size_t i = 0; i < captions; ++i) order[i] = i;
  Rng rng(seed, Stream::shuffle, epoch);
  for (std::size_t i = captions; i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
  return order;
}

/// Training drops the final short batch; evaluation keeps it.
inline std::size_t batches_per_epoch(std::size_t captions, std::size_t batch_size, bool training) {
  return training ? captions / batch_size : (captions + batch_size - 1) / batch_size;
}

inline std::vector<Batch> make_batches(const Dataset& ds, std::size_t batch_size, std::uint64_t seed,
                                       std::uint64_t epoch, bool training) {
  if (ds.captions.empty()) throw DataError("dataset is empty");
  if (batch_size == 0) throw ConfigError("batch_size must be positive");
  if (training && batch_size < 2) {
    throw ConfigError("training batch_size must be at least 2 (patch noise needs a donor)");
  }
  const auto order = epoch_order(ds.captions.size(), seed, epoch);
  std::vector<Batch> out;
  const std::size_t count = batches_per_epoch(order.size(), batch_size, training);
  for (std::size_t k = 0; k < count; ++k) {
    const std::size_t begin = k * batch_size;
    const std::size_t end = std::min(order.size(), begin + batch_size);
    out.push_back(assemble_batch(ds, std::span<const std::size_t>(order).subspan(begin, end - begin)));
  }
  return out;
}

}  // namespace cmdret::dataio
