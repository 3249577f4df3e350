#include <gtest/gtest.h>

#include <cstring>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>
#include <vector>

#include "cmdret/dataio/dataset.hpp"
#include "cmdret/dataio/feature_file.hpp"
#include "cmdret/dataio/synth.hpp"
#include "cmdret/errors.hpp"
#include "test_util.hpp"

using namespace cmdret;
using namespace cmdret::dataio;
namespace fs = std::filesystem;

namespace {

Tensor float_tensor(Shape shape, Rng& rng) {
  Tensor t(std::move(shape));
  for (double& v : t.values()) v = static_cast<double>(static_cast<float>(rng.normal()));
  return t;
}

FeatureFile sample_file(Rng& rng, bool with_cls) {
  FeatureFile f;
  f.modality = with_cls ? Modality::image : Modality::speech;
  const std::size_t layers = with_cls ? 1 : 3;
  for (std::size_t l = 0; l < layers; ++l) f.layers.push_back(float_tensor(Shape{5, 4}, rng));
  if (with_cls) f.cls.push_back(float_tensor(Shape{4}, rng));
  return f;
}

std::uint64_t offset_of(const std::function<void()>& f) {
  try {
    f();
  } catch (const FormatError& e) {
    return e.offset();
  }
  ADD_FAILURE() << "no FormatError";
  return ~0ULL;
}

}  // namespace

TEST(FeatureFile, RoundtripIsBitExact) {
  Rng rng(1);
  const auto dir = test::temp_dir("ff");
  for (bool cls : {false, true}) {
    const FeatureFile f = sample_file(rng, cls);
    const auto path = dir / (cls ? "img.cmdf" : "sp.cmdf");
    write_feature_file(path, f);
    const auto bytes = dataio::detail::read_bytes(path);
    EXPECT_EQ(bytes.size(), kFeatureHeaderSize + (f.layers.size() * 20 + f.cls.size() * 4) * 4);
    const FeatureFile g = read_feature_file(path);
    EXPECT_EQ(g.modality, f.modality);
    ASSERT_EQ(g.layers.size(), f.layers.size());
    for (std::size_t l = 0; l < f.layers.size(); ++l) {
      ASSERT_EQ(g.layers[l].shape(), f.layers[l].shape());
      EXPECT_EQ(std::memcmp(g.layers[l].data().data(), f.layers[l].data().data(), 20 * sizeof(double)), 0);
    }
    ASSERT_EQ(g.cls.size(), f.cls.size());
    if (cls) {
      EXPECT_TRUE(g.cls[0] == f.cls[0]);
    }
    EXPECT_EQ(encode_feature_file(g), bytes);
  }
}

TEST(FeatureFile, HeaderLayoutIsLittleEndian) {
  Rng rng(2);
  const auto bytes = encode_feature_file(sample_file(rng, false));
  EXPECT_EQ(std::string(bytes.begin(), bytes.begin() + 4), "CMDF");
  EXPECT_EQ(bytes[4], 1);
  EXPECT_EQ(bytes[5], 0);
  EXPECT_EQ(bytes[6], 0);
  EXPECT_EQ(bytes[7], 3);
  EXPECT_EQ(bytes[9], 4);
  EXPECT_EQ(bytes[13], 5);
  EXPECT_EQ(bytes[17], 0);
  float first;
  std::memcpy(&first, bytes.data() + 18, 4);
  EXPECT_EQ(static_cast<double>(first), decode_feature_file(bytes).layers[0][0]);
}

TEST(FeatureFile, EveryTruncationIsDetectedAtTheEnd) {
  Rng rng(3);
  for (bool cls : {false, true}) {
    const auto bytes = encode_feature_file(sample_file(rng, cls));
    for (std::size_t len = 0; len < bytes.size(); ++len) {
      const std::vector<std::uint8_t> cut(bytes.begin(), bytes.begin() + static_cast<std::ptrdiff_t>(len));
      ASSERT_EQ(offset_of([&] { decode_feature_file(cut); }), len) << "length " << len;
    }
  }
}

TEST(FeatureFile, OneByteTruncationOnDiskNamesOffset) {
  Rng rng(4);
  const auto dir = test::temp_dir("ff");
  const auto path = dir / "x.cmdf";
  write_feature_file(path, sample_file(rng, true));
  const auto size = fs::file_size(path);
  fs::resize_file(path, size - 1);
  try {
    read_feature_file(path);
    FAIL() << "truncation not detected";
  } catch (const FormatError& e) {
    EXPECT_EQ(e.offset(), size - 1);
    EXPECT_NE(std::string(e.what()).find("x.cmdf"), std::string::npos);
    EXPECT_EQ(e.exit_code(), 2);
  }
}

TEST(FeatureFile, HeaderFieldErrorsReportFieldOffset) {
  Rng rng(5);
  const auto good = encode_feature_file(sample_file(rng, false));
  auto patched = [&](std::size_t at, std::uint8_t v) {
    auto b = good;
    b[at] = v;
    return b;
  };
  EXPECT_EQ(offset_of([&] { decode_feature_file(patched(0, 'X')); }), 0u);
  EXPECT_EQ(offset_of([&] { decode_feature_file(patched(4, 2)); }), 4u);
  EXPECT_EQ(offset_of([&] { decode_feature_file(patched(6, 7)); }), 6u);
  auto zero_layers = patched(7, 0);
  EXPECT_EQ(offset_of([&] { decode_feature_file(zero_layers); }), 7u);
  EXPECT_EQ(offset_of([&] { decode_feature_file(patched(9, 0)); }), 9u);
  EXPECT_EQ(offset_of([&] { decode_feature_file(patched(13, 0)); }), 13u);
  EXPECT_EQ(offset_of([&] { decode_feature_file(patched(17, 0x80)); }), 17u);
  auto longer = good;
  longer.push_back(0);
  EXPECT_EQ(offset_of([&] { decode_feature_file(longer); }), good.size());
  // Claiming a cls block that is not there reads as truncation.
  EXPECT_EQ(offset_of([&] { decode_feature_file(patched(17, kFlagHasCls)); }), good.size());
}

TEST(FeatureFile, EncodeRejectsBadContent) {
  Rng rng(6);
  FeatureFile f = sample_file(rng, true);
  f.layers[0](0, 0) = std::nan("");
  EXPECT_THROW(encode_feature_file(f), DataError);
  EXPECT_THROW(encode_feature_file(FeatureFile{}), DataError);
  FeatureFile g = sample_file(rng, true);
  g.cls[0] = float_tensor(Shape{3}, rng);
  EXPECT_THROW(encode_feature_file(g), DimensionError);
  FeatureFile h = sample_file(rng, false);
  h.layers[1] = float_tensor(Shape{4, 4}, rng);
  EXPECT_THROW(encode_feature_file(h), DimensionError);
  EXPECT_THROW(read_feature_file(test::temp_dir("none") / "missing.cmdf"), IoError);
}

TEST(Manifest, ParsesGroupsAndSplits) {
  std::istringstream in(
      "# comment\n"
      "a\timg/a.cmdf\tsp/a0.cmdf\n"
      "a\timg/a.cmdf\tsp/a1.cmdf\n"
      "\n"
      "b\timg/b.cmdf\tsp/b0.cmdf\ttest\r\n");
  const DatasetManifest m = parse_manifest(in, "/data");
  ASSERT_EQ(m.entries.size(), 2u);
  EXPECT_EQ(m.entries[0].speech_paths.size(), 2u);
  EXPECT_EQ(m.entries[0].split, "train");
  EXPECT_EQ(m.entries[1].split, "test");
  EXPECT_EQ(m.caption_count(), 3u);
  EXPECT_EQ(m.resolve("img/a.cmdf"), fs::path("/data/img/a.cmdf"));
  EXPECT_EQ(m.resolve("/abs/x.cmdf"), fs::path("/abs/x.cmdf"));
}

TEST(Manifest, RejectsMalformedLinesWithLineNumber) {
  auto err = [](const std::string& text) {
    std::istringstream in(text);
    try {
      parse_manifest(in, ".");
    } catch (const DataError& e) {
      return std::string(e.what());
    }
    return std::string("no error");
  };
  EXPECT_NE(err("a\tb\n").find("line 1"), std::string::npos);
  EXPECT_NE(err("a\tb\tc\n\na\tb\tc\td\te\n").find("line 3"), std::string::npos);
  EXPECT_NE(err("a\t\tc\n").find("empty field"), std::string::npos);
  EXPECT_NE(err("a\tb\tc\tvalid\n").find("unknown split"), std::string::npos);
  EXPECT_NE(err("a\tb\tc\na\tother\td\n").find("already bound"), std::string::npos);
  EXPECT_NE(err("a\tb\tc\ttrain\na\tb\td\ttest\n").find("two splits"), std::string::npos);
}

TEST(Dataset, SynthRoundtripsThroughFiles) {
  SynthConfig s;
  s.num_images = 5;
  s.captions_per_image = 3;
  s.speech_dim = 8;
  s.shared_dim = 6;
  const auto dir = test::temp_dir("synth");
  const DatasetManifest written = write_synthetic_dataset(s, dir);
  EXPECT_EQ(written.caption_count(), 15u);
  const Dataset mem = synthesize_dataset(s);
  const Dataset disk = load_dataset(read_manifest(dir / "manifest.tsv"));
  ASSERT_EQ(disk.captions.size(), mem.captions.size());
  ASSERT_EQ(disk.images.size(), mem.images.size());
  for (std::size_t i = 0; i < mem.images.size(); ++i) {
    EXPECT_TRUE(disk.images[i].patches == mem.images[i].patches);
    EXPECT_TRUE(disk.images[i].cls == mem.images[i].cls);
  }
  for (std::size_t c = 0; c < mem.captions.size(); ++c) {
    EXPECT_EQ(disk.captions[c].image, mem.captions[c].image);
    for (std::size_t l = 0; l < 3; ++l)
      EXPECT_TRUE(disk.captions[c].speech.layers[l] == mem.captions[c].speech.layers[l]);
  }
  EXPECT_THROW(load_dataset(read_manifest(dir / "manifest.tsv"), "test"), DataError);
}

TEST(Dataset, LoadRejectsWrongModalityAndBadCounts) {
  SynthConfig s;
  s.num_images = 2;
  s.speech_dim = 8;
  s.shared_dim = 8;
  const auto dir = test::temp_dir("synth");
  write_synthetic_dataset(s, dir);
  {
    std::ofstream m(dir / "swapped.tsv");
    m << "img0\tspeech/img0_0.cmdf\timages/img0.cmdf\n";
  }
  EXPECT_THROW(load_dataset(read_manifest(dir / "swapped.tsv")), DataError);
  {
    std::ofstream m(dir / "six.tsv");
    for (int i = 0; i < 6; ++i) m << "img0\timages/img0.cmdf\tspeech/img0_0.cmdf\n";
  }
  EXPECT_THROW(load_dataset(read_manifest(dir / "six.tsv")), DataError);
  {
    std::ofstream m(dir / "missing.tsv");
    m << "img0\timages/none.cmdf\tspeech/img0_0.cmdf\n";
  }
  EXPECT_THROW(load_dataset(read_manifest(dir / "missing.tsv")), IoError);
  EXPECT_THROW(read_manifest(dir / "absent.tsv"), IoError);
}

TEST(Batches, PaddingMasksAndLabels) {
  SynthConfig s;
  s.num_images = 6;
  s.speech_dim = 8;
  s.shared_dim = 8;
  s.frames = 6;
  const Dataset ds = synthesize_dataset(s);
  const auto batches = make_batches(ds, 4, 3, 0, true);
  ASSERT_EQ(batches.size(), 3u);
  std::set<std::size_t> seen;
  for (const Batch& b : batches) {
    ASSERT_EQ(b.size(), 4u);
    for (std::size_t i = 0; i < b.size(); ++i) {
      const std::size_t cid = b.caption_ids[i];
      seen.insert(cid);
      EXPECT_EQ(b.labels[i], static_cast<std::int64_t>(ds.captions[cid].image));
      const auto layers = b.speech_layers(i);
      const auto mask = b.frame_mask(i);
      for (std::size_t l = 0; l < layers.size(); ++l)
        for (std::size_t t = 0; t < mask.size(); ++t)
          for (std::size_t d = 0; d < 8; ++d) {
            if (mask[t]) EXPECT_EQ(layers[l](t, d), ds.captions[cid].speech.layers[l](t, d));
            else EXPECT_EQ(layers[l](t, d), 0.0);
          }
    }
  }
  EXPECT_EQ(seen.size(), 12u);
  EXPECT_EQ(make_batches(ds, 5, 3, 0, true).size(), 2u);
  EXPECT_EQ(make_batches(ds, 5, 3, 0, false).size(), 3u);
  EXPECT_EQ(make_batches(ds, 5, 3, 0, false).back().size(), 2u);
  EXPECT_THROW(make_batches(ds, 1, 0, 0, true), ConfigError);
  EXPECT_NE(epoch_order(12, 3, 0), epoch_order(12, 3, 1));
  EXPECT_EQ(epoch_order(12, 3, 1), epoch_order(12, 3, 1));
}

TEST(Synth, ValidatesAndIsDeterministic) {
  SynthConfig s;
  s.captions_per_image = 6;
  EXPECT_THROW(synthesize_dataset(s), ConfigError);
  s = SynthConfig{};
  s.upstream_layers = 1;
  EXPECT_THROW(synthesize_dataset(s), ConfigError);
  s = SynthConfig{};
  s.num_images = 3;
  const Dataset a = synthesize_dataset(s), b = synthesize_dataset(s);
  for (std::size_t i = 0; i < 3; ++i) EXPECT_TRUE(a.images[i].patches == b.images[i].patches);
  for (const auto& c : a.captions) {
    EXPECT_GE(c.speech.frames(), s.frames - 2);
    EXPECT_LE(c.speech.frames(), s.frames);
  }
}
