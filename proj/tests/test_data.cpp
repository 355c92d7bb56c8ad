// Copyright (c) 2026 The bkd Authors. All Rights Reserved.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#include <gtest/gtest.h>

#include <set>

#include "bkd/data.hpp"
#include "bkd/optim.hpp"
#include "bkd/text.hpp"
#include "test_util.hpp"

namespace bkd {
namespace {

// ---------------------------------------------------------------------------
// Vocabulary / text encoder

TEST(Vocabulary, ReservedIdsAndDenseIndex) {
  const Vocabulary v({"red", "circle", "red"});
  EXPECT_EQ(v.size(), 5);
  EXPECT_EQ(v.word(Vocabulary::kNull), "<null>");
  EXPECT_EQ(v.id("red"), 3);
  EXPECT_EQ(v.id("circle"), 4);
  EXPECT_EQ(v.id("zebra"), Vocabulary::kUnk);
}

TEST(Vocabulary, TokenizePadsAndTruncates) {
  const Vocabulary v({"a", "b", "c"});
  EXPECT_EQ(v.tokenize("A, b", 4), (std::vector<int>{3, 4, 1, 1}));
  EXPECT_EQ(v.tokenize("a b c a b", 3), (std::vector<int>{3, 4, 5}));
  EXPECT_EQ(v.detokenize(v.tokenize("c  B", 6)), "c b");
  EXPECT_EQ(Vocabulary::null_tokens(3), (std::vector<int>{0, 0, 0}));
  EXPECT_EQ(Vocabulary::from_json(v.to_json()), v);
}

TEST(TextEncoder, EncodeIsTokenPlusPosition) {
  const auto e = TextEncoder<float>::build(Vocabulary({"x", "y"}), 3, 4, 1);
  const auto ctx = e.encode({e.tokenize("y x"), e.null_tokens()});
  EXPECT_EQ(ctx.shape(), (Shape{2, 3, 4}));
  for (int d = 0; d < 4; ++d) {
    EXPECT_FLOAT_EQ(ctx[static_cast<std::size_t>(d)], e.token_embedding[4 * 4 + d] + e.position_embedding[d]);
    EXPECT_FLOAT_EQ(ctx[12 + 4 + d], e.token_embedding[d] + e.position_embedding[4 + d]);
  }
  EXPECT_THROW(e.encode({{1, 2}}), DimensionError);
  EXPECT_THROW(e.encode({{1, 2, 99}}), DomainError);
}

TEST(TextEncoder, BackwardIsAdjoint) {
  auto e = TextEncoder<double>::build(Vocabulary({"x", "y", "z"}), 4, 3, 2);
  const std::vector<std::vector<int>> ids{{3, 4, 4, 1}, {0, 0, 0, 0}};
  const auto w = randn<double>({2, 4, 3}, 5);
  Tensor<double> dt(e.token_embedding.shape()), dp(e.position_embedding.shape());
  e.backward(ids, w, dt, dp);
  auto loss = [&] {
    const auto c = e.encode(ids);
    return testing::dot(c, w);
  };
  EXPECT_LT(testing::fd_max_rel_err(e.token_embedding, dt, loss, 100, 1), 1e-6);
  EXPECT_LT(testing::fd_max_rel_err(e.position_embedding, dp, loss, 100, 2), 1e-6);
}

TEST(TextEncoder, ArchiveRoundTrip) {
  const auto e = TextEncoder<float>::build(synthetic_vocabulary(), 8, 16, 3);
  const auto back = text_encoder_from_archive(decode_archive(encode_archive(to_archive(e))));
  EXPECT_TRUE(back == e);
  Archive bad = to_archive(e);
  bad.metadata["dim"] = 15;
  EXPECT_THROW(text_encoder_from_archive(bad), ArchiveError);
}

// ---------------------------------------------------------------------------
// AdamW

TEST(AdamW, FirstStepMovesByLearningRate) {
  AdamWConfig c;
  c.lr = 0.1;
  c.weight_decay = 0.0;
  AdamW opt(c, {"w"}, {{3}});
  Tensor<float> w({3}, {1.0f, -2.0f, 0.5f});
  const Tensor<float> g({3}, {0.3f, -4.0f, 1e-3f});
  opt.step({&w}, {&g});
  EXPECT_NEAR(w[0], 0.9f, 1e-5);
  EXPECT_NEAR(w[1], -1.9f, 1e-5);
  EXPECT_NEAR(w[2], 0.4f, 1e-4);
}

TEST(AdamW, DecoupledDecayWithZeroGradient) {
  AdamWConfig c;
  c.lr = 0.1;
  c.weight_decay = 0.5;
  AdamW opt(c, {"w"}, {{1}});
  Tensor<float> w({1}, {2.0f});
  const Tensor<float> g({1}, {0.0f});
  opt.step({&w}, {&g});
  EXPECT_FLOAT_EQ(w[0], 2.0f * (1.0f - 0.05f));
}

TEST(AdamW, MinimizesQuadratic) {
  AdamWConfig c;
  c.lr = 0.05;
  c.weight_decay = 0.0;
  AdamW opt(c, {"w"}, {{4}});
  Tensor<float> w({4}, {3, -1, 2, 5});
  for (int i = 0; i < 2000; ++i) {
    Tensor<float> g = w;
    for (auto& v : g.vec()) v *= 2;
    opt.step({&w}, {&g});
  }
  for (float v : w.vec()) EXPECT_NEAR(v, 0.0f, 0.05f);
}

TEST(AdamW, StateRoundTripResumesExactly) {
  AdamWConfig c;
  c.lr = 0.01;
  AdamW a(c, {"w"}, {{5}});
  Tensor<float> wa = randn<float>({5}, 1);
  const Tensor<float> g1 = randn<float>({5}, 2), g2 = randn<float>({5}, 3);
  a.step({&wa}, {&g1});
  AdamW b(c, {"w"}, {{5}});
  b.load_state(decode_archive(encode_archive(a.state())));
  Tensor<float> wb = wa;
  a.step({&wa}, {&g2});
  b.step({&wb}, {&g2});
  EXPECT_EQ(wa.vec(), wb.vec());
  EXPECT_EQ(b.steps(), 2);
  AdamW other(c, {"v"}, {{5}});
  EXPECT_THROW(other.load_state(a.state()), ArchiveError);
}

// ---------------------------------------------------------------------------
// Images

Image checker(int w, int h) {
  Image img(w, h);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      auto* p = img.px(x, y);
      p[0] = static_cast<std::uint8_t>(x * 7);
      p[1] = static_cast<std::uint8_t>(y * 11);
      p[2] = static_cast<std::uint8_t>((x + y) % 2 ? 255 : 0);
    }
  }
  return img;
}

TEST(Image, PpmRoundTrip) {
  const Image img = checker(5, 3);
  EXPECT_EQ(decode_ppm(encode_ppm(img)), img);
  const Image one = decode_ppm("P6\n# comment\n1 1\n255\nabc");
  EXPECT_EQ(one.rgb, (std::vector<std::uint8_t>{'a', 'b', 'c'}));
  EXPECT_THROW(decode_ppm("P3\n1 1\n255\n0 0 0"), Error);
  EXPECT_THROW(decode_ppm("P6\n2 2\n255\nabc"), Error);
}

TEST(Image, CropOfWideImageKeepsFullHeight) {
  Image wide(40, 20);
  for (int y = 0; y < 20; ++y) {
    for (int x = 0; x < 40; ++x) wide.px(x, y)[0] = static_cast<std::uint8_t>(y * 10);
  }
  const Image c = resize_and_center_crop(wide, 10);
  EXPECT_EQ(c.width, 10);
  EXPECT_EQ(c.height, 10);
  // Rows still span the whole vertical range of the source.
  EXPECT_EQ(c.px(0, 0)[0], 5);
  EXPECT_EQ(c.px(0, 9)[0], 185);
}

TEST(Image, TensorConversionRoundTrip) {
  const Image img = checker(6, 4);
  EXPECT_EQ(tensor_to_image(image_to_tensor(img)), img);
  const Image f = flip_horizontal(img);
  EXPECT_EQ(f.px(0, 2)[0], img.px(5, 2)[0]);
  EXPECT_EQ(flip_horizontal(f), img);
}

TEST(Image, GridLayout) {
  const auto batch = randn<float>({5, 3, 4, 4}, 1);
  const Image g = make_grid(batch, 3, 1);
  EXPECT_EQ(g.width, 3 * 4 + 2);
  EXPECT_EQ(g.height, 2 * 4 + 1);
  const Image tile = tensor_to_image(slice_batch(batch, 4, 5).reshaped({3, 4, 4}));
  EXPECT_EQ(g.px(5 + 2, 5 + 3)[1], tile.px(2, 3)[1]);
}

// ---------------------------------------------------------------------------
// Synthetic shapes

TEST(Shapes, CaptionGrammarIsBijective) {
  std::set<std::string> seen;
  for (int s = 0; s < 3; ++s) {
    for (int c = 0; c < 8; ++c) {
      for (int p = 0; p < 9; ++p) {
        for (bool large : {false, true}) {
          const ShapeSpec spec{static_cast<ShapeKind>(s), c, p, large};
          const std::string cap = caption_of(spec);
          EXPECT_TRUE(seen.insert(cap).second);
          const auto back = parse_caption(cap);
          ASSERT_TRUE(back.has_value()) << cap;
          EXPECT_EQ(*back, spec);
        }
      }
    }
  }
  EXPECT_EQ(seen.size(), 432u);
  EXPECT_FALSE(parse_caption("a small red hexagon at top").has_value());
  EXPECT_FALSE(parse_caption("a red circle").has_value());
}

TEST(Shapes, EveryCaptionWordIsInVocabulary) {
  const auto v = synthetic_vocabulary();
  Rng rng(1);
  for (int i = 0; i < 200; ++i) {
    const auto cap = caption_of(random_shape(rng));
    const auto ids = v.tokenize(cap, 8);
    EXPECT_EQ(std::count(ids.begin(), ids.end(), Vocabulary::kUnk), 0);
    EXPECT_EQ(v.detokenize(ids), cap);
  }
}

TEST(Shapes, RenderedShapeSitsInItsCell) {
  for (int p = 0; p < 9; ++p) {
    const Image img = render_shape({ShapeKind::Square, 0, p, true}, 24);
    const int cx = (p % 3) * 8 + 4, cy = (p / 3) * 8 + 4;
    EXPECT_EQ(img.px(cx, cy)[0], palette()[0][0]);
    const int fx = (p % 3 == 0) ? 23 : 0;
    EXPECT_EQ(img.px(fx, cy)[0], kBackground[0]);
  }
}

DatasetManifest small_manifest(int count, std::uint64_t seed = 7) {
  DatasetManifest m;
  m.seed = seed;
  m.count = count;
  m.image_size = 12;
  return m;
}

TEST(Synthetic, SameManifestIsBitIdentical) {
  const auto a = generate_synthetic(small_manifest(100));
  const auto b = generate_synthetic(small_manifest(100));
  ASSERT_EQ(a.size(), 100u);
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a.records[i].image, b.records[i].image);
    EXPECT_EQ(a.records[i].caption, b.records[i].caption);
    EXPECT_EQ(a.records[i].tokens, b.records[i].tokens);
    EXPECT_EQ(a.records[i].val, b.records[i].val);
  }
  const auto c = generate_synthetic(small_manifest(100, 8));
  int same = 0;
  for (std::size_t i = 0; i < a.size(); ++i) same += a.records[i].caption == c.records[i].caption;
  EXPECT_LT(same, 10);
}

TEST(Synthetic, PrefixStableAcrossCounts) {
  const auto a = generate_synthetic(small_manifest(20));
  const auto b = generate_synthetic(small_manifest(50));
  for (std::size_t i = 0; i < 20; ++i) {
    EXPECT_EQ(a.records[i].image, b.records[i].image);
    EXPECT_EQ(a.records[i].val, b.records[i].val);
  }
}

TEST(Synthetic, CoversAllPaletteColors) {
  auto m = small_manifest(10000);
  m.image_size = 8;
  const auto d = generate_synthetic(m);
  std::set<int> colors;
  for (const auto& r : d.records) {
    for (std::size_t i = 0; i < r.image.rgb.size(); i += 3) {
      for (int c = 0; c < 8; ++c) {
        const auto& p = palette()[static_cast<std::size_t>(c)];
        if (r.image.rgb[i] == p[0] && r.image.rgb[i + 1] == p[1] && r.image.rgb[i + 2] == p[2]) colors.insert(c);
      }
    }
  }
  EXPECT_EQ(colors.size(), 8u);
}

TEST(Synthetic, SplitsDisjointAndNearFraction) {
  const auto d = generate_synthetic(small_manifest(2000));
  const auto tr = d.train_indices(), va = d.val_indices();
  EXPECT_EQ(tr.size() + va.size(), d.size());
  EXPECT_NEAR(static_cast<double>(va.size()) / d.size(), 0.1, 0.025);
  std::set<int> s(tr.begin(), tr.end());
  for (int i : va) EXPECT_EQ(s.count(i), 0u);
}

TEST(Latent, CodecProperties) {
  const auto img = randn<float>({3, 8, 8}, 1);
  EXPECT_EQ(decode_latent(encode_latent(img, 1), 1).vec(), img.vec());
  Tensor<float> flat({2, 3, 8, 8}, 0.25f);
  EXPECT_EQ(decode_latent(encode_latent(flat, 2), 2).vec(), flat.vec());
  const auto enc = encode_latent(img, 2);
  EXPECT_EQ(enc.shape(), (Shape{3, 4, 4}));
  double a = 0, b = 0;
  for (float v : img.vec()) a += v;
  for (float v : enc.vec()) b += v;
  EXPECT_NEAR(a / img.size(), b / enc.size(), 1e-6);
  EXPECT_THROW(encode_latent(randn<float>({3, 5, 5}, 1), 2), DimensionError);
}

// ---------------------------------------------------------------------------
// Folder ingestion and disk layout

TEST(Ingest, EmptyFolderGivesEmptyDataset) {
  auto dir = testing::scratch_dir("ingest_empty");
  DatasetManifest m;
  m.folder = dir.string();
  const auto d = ingest_folder(m);
  EXPECT_TRUE(d.empty());
  EXPECT_TRUE(d.warnings.empty());
}

TEST(Ingest, CaptionedImagesBecomeRecords) {
  auto dir = testing::scratch_dir("ingest_three");
  write_ppm(dir / "a.ppm", checker(20, 10));
  write_ppm(dir / "b.ppm", checker(10, 10));
  write_ppm(dir / "c.ppm", checker(10, 30));
  write_ppm(dir / "d.ppm", checker(10, 30));
  write_file(dir / "captions.tsv", "a.ppm\tA red thing\nb.ppm\tblue\nc.ppm\tgreen square\n");
  DatasetManifest m;
  m.folder = dir.string();
  m.image_size = 8;
  const auto d = ingest_folder(m);
  ASSERT_EQ(d.size(), 3u);
  ASSERT_EQ(d.warnings.size(), 1u);
  EXPECT_NE(d.warnings[0].find("d.ppm"), std::string::npos);
  EXPECT_EQ(d.records[0].caption, "A red thing");
  EXPECT_EQ(d.records[0].image.width, 8);
  EXPECT_EQ(d.manifest.vocabulary.detokenize(d.records[0].tokens), "a red thing");
}

TEST(Ingest, UnreadableImagesListedTogether) {
  auto dir = testing::scratch_dir("ingest_bad");
  write_file(dir / "x.ppm", "garbage");
  write_file(dir / "y.ppm", "P6\n4 4\n255\n");
  write_file(dir / "captions.tsv", "x.ppm\tone\ny.ppm\ttwo\n");
  DatasetManifest m;
  m.folder = dir.string();
  try {
    ingest_folder(m);
    FAIL();
  } catch (const Error& e) {
    const std::string w = e.what();
    EXPECT_NE(w.find("x.ppm"), std::string::npos);
    EXPECT_NE(w.find("y.ppm"), std::string::npos);
  }
}

TEST(Dataset, DiskRoundTrip) {
  auto dir = testing::scratch_dir("dataset_disk");
  const auto d = generate_synthetic(small_manifest(30));
  write_dataset(dir, d);
  EXPECT_TRUE(std::filesystem::exists(dir / "images" / "000029.ppm"));
  const auto back = load_dataset(dir);
  ASSERT_EQ(back.size(), d.size());
  EXPECT_EQ(back.manifest.vocabulary, d.manifest.vocabulary);
  EXPECT_EQ(back.manifest.source, "synthetic");
  for (std::size_t i = 0; i < d.size(); ++i) {
    EXPECT_EQ(back.records[i].image, d.records[i].image);
    EXPECT_EQ(back.records[i].tokens, d.records[i].tokens);
    EXPECT_EQ(back.records[i].val, d.records[i].val);
  }
  const auto regen = dataset_from_manifest(manifest_from_json(nlohmann::json::parse(read_file(dir / "manifest.json"))));
  EXPECT_EQ(regen.records[17].image, d.records[17].image);
}

TEST(Dataset, ManifestValidationListsAllProblems) {
  nlohmann::json j{{"source", "web"}, {"image_size", 0}, {"val_fraction", 1.5}, {"count", "many"}};
  try {
    manifest_from_json(j);
    FAIL();
  } catch (const ConfigError& e) {
    const std::string w = e.what();
    for (const char* f : {"source", "image_size", "val_fraction", "count"}) {
      EXPECT_NE(w.find(f), std::string::npos) << f;
    }
  }
}

}  // namespace
}  // namespace bkd
