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

#ifndef BKD_DATA_HPP
#define BKD_DATA_HPP

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "bkd/error.hpp"
#include "bkd/image.hpp"
#include "bkd/rng.hpp"
#include "bkd/tensor.hpp"
#include "bkd/text.hpp"

namespace bkd {

// ---------------------------------------------------------------------------
// Synthetic shapes

enum class ShapeKind { Circle, Square, Triangle };

struct ShapeSpec {
  ShapeKind shape = ShapeKind::Circle;
  int color = 0;     // palette index
  int position = 4;  // 3x3 grid cell, row-major
  bool large = false;

  friend bool operator==(const ShapeSpec&, const ShapeSpec&) = default;
};

inline const std::array<const char*, 3>& shape_names() {
  static const std::array<const char*, 3> n{"circle", "square", "triangle"};
  return n;
}

inline const std::array<const char*, 8>& color_names() {
  static const std::array<const char*, 8> n{"red", "green", "blue", "yellow", "cyan", "magenta", "white", "orange"};
  return n;
}

inline const std::array<std::array<std::uint8_t, 3>, 8>& palette() {
  static const std::array<std::array<std::uint8_t, 3>, 8> p{{{220, 40, 40},
                                                             {40, 180, 60},
                                                             {50, 80, 220},
                                                             {230, 210, 40},
                                                             {40, 200, 210},
                                                             {200, 50, 200},
                                                             {240, 240, 240},
                                                             {240, 140, 30}}};
  return p;
}

inline constexpr std::array<std::uint8_t, 3> kBackground{70, 70, 70};

inline const std::array<const char*, 9>& position_names() {
  static const std::array<const char*, 9> n{"top-left", "top",    "top-right", "left",        "center",
                                            "right",    "bottom-left", "bottom", "bottom-right"};
  return n;
}

inline std::string caption_of(const ShapeSpec& s) {
  return std::string("a ") + (s.large ? "large" : "small") + " " + color_names()[static_cast<std::size_t>(s.color)] +
         " " + shape_names()[static_cast<std::size_t>(s.shape)] + " at " +
         position_names()[static_cast<std::size_t>(s.position)];
}

/// Inverse of caption_of; nullopt for captions outside the grammar.
inline std::optional<ShapeSpec> parse_caption(const std::string& caption) {
  const auto w = Vocabulary::split(caption);
  if (w.size() != 6 || w[0] != "a" || w[4] != "at") return std::nullopt;
  auto find = [](const auto& names, const std::string& s) -> int {
    for (std::size_t i = 0; i < names.size(); ++i) {
      if (s == names[i]) return static_cast<int>(i);
    }
    return -1;
  };
  ShapeSpec s;
  if (w[1] == "large") s.large = true;
  else if (w[1] != "small") return std::nullopt;
  s.color = find(color_names(), w[2]);
  const int shape = find(shape_names(), w[3]);
  s.position = find(position_names(), w[5]);
  if (s.color < 0 || shape < 0 || s.position < 0) return std::nullopt;
  s.shape = static_cast<ShapeKind>(shape);
  return s;
}

inline Vocabulary synthetic_vocabulary() {
  std::vector<std::string> words{"a", "at", "small", "large"};
  for (const char* c : color_names()) words.emplace_back(c);
  for (const char* s : shape_names()) words.emplace_back(s);
  for (const char* p : position_names()) words.emplace_back(p);
  return Vocabulary(words);
}

/// Renders one shape on a flat background with 2x2 supersampling.
inline Image render_shape(const ShapeSpec& s, int size) {
  Image img(size, size);
  const auto& col = palette()[static_cast<std::size_t>(s.color)];
  const double cell = size / 3.0;
  const double cx = (s.position % 3 + 0.5) * cell, cy = (s.position / 3 + 0.5) * cell;
  const double r = (s.large ? 0.26 : 0.14) * size;
  auto inside = [&](double x, double y) {
    const double dx = x - cx, dy = y - cy;
    switch (s.shape) {
      case ShapeKind::Circle: return dx * dx + dy * dy <= r * r;
      case ShapeKind::Square: return std::abs(dx) <= 0.9 * r && std::abs(dy) <= 0.9 * r;
      case ShapeKind::Triangle: return dy >= -r && dy <= r && std::abs(dx) <= (dy + r) / 2.0;
    }
    return false;
  };
  for (int y = 0; y < size; ++y) {
    for (int x = 0; x < size; ++x) {
      int hits = 0;
      for (int sy = 0; sy < 2; ++sy) {
        for (int sx = 0; sx < 2; ++sx) hits += inside(x + 0.25 + 0.5 * sx, y + 0.25 + 0.5 * sy);
      }
      auto* p = img.px(x, y);
      for (int c = 0; c < 3; ++c) {
        p[c] = static_cast<std::uint8_t>((hits * col[static_cast<std::size_t>(c)] +
                                          (4 - hits) * kBackground[static_cast<std::size_t>(c)] + 2) / 4);
      }
    }
  }
  return img;
}

inline ShapeSpec random_shape(Rng& rng) {
  ShapeSpec s;
  s.shape = static_cast<ShapeKind>(uniform_int(rng, 0, 2));
  s.color = uniform_int(rng, 0, 7);
  s.position = uniform_int(rng, 0, 8);
  s.large = uniform_int(rng, 0, 1) == 1;
  return s;
}

// ---------------------------------------------------------------------------
// Latent codec: k x k average pooling / nearest-neighbour upsampling

/// [C, H, W] or [B, C, H, W].
inline Tensor<float> encode_latent(const Tensor<float>& img, int k) {
  if (k < 1) throw DomainError("latent factor must be >= 1");
  if (k == 1) return img;
  const int r = static_cast<int>(img.rank());
  const int h = img.dim(static_cast<std::size_t>(r - 2)), w = img.dim(static_cast<std::size_t>(r - 1));
  if (h % k || w % k) throw DimensionError("encode_latent: " + shape_str(img.shape()) + " not divisible by " + std::to_string(k));
  Shape out_shape = img.shape();
  out_shape[static_cast<std::size_t>(r - 2)] = h / k;
  out_shape[static_cast<std::size_t>(r - 1)] = w / k;
  Tensor<float> out(out_shape);
  const std::size_t planes = img.size() / (static_cast<std::size_t>(h) * w);
  const int ho = h / k, wo = w / k;
  for (std::size_t p = 0; p < planes; ++p) {
    for (int y = 0; y < ho; ++y) {
      for (int x = 0; x < wo; ++x) {
        double acc = 0;
        for (int u = 0; u < k; ++u) {
          for (int v = 0; v < k; ++v) acc += img[(p * h + y * k + u) * w + x * k + v];
        }
        out[(p * ho + y) * wo + x] = static_cast<float>(acc / (k * k));
      }
    }
  }
  return out;
}

inline Tensor<float> decode_latent(const Tensor<float>& lat, int k) {
  if (k < 1) throw DomainError("latent factor must be >= 1");
  if (k == 1) return lat;
  const int r = static_cast<int>(lat.rank());
  const int h = lat.dim(static_cast<std::size_t>(r - 2)), w = lat.dim(static_cast<std::size_t>(r - 1));
  Shape out_shape = lat.shape();
  out_shape[static_cast<std::size_t>(r - 2)] = h * k;
  out_shape[static_cast<std::size_t>(r - 1)] = w * k;
  Tensor<float> out(out_shape);
  const std::size_t planes = lat.size() / (static_cast<std::size_t>(h) * w);
  for (std::size_t p = 0; p < planes; ++p) {
    for (int y = 0; y < h * k; ++y) {
      for (int x = 0; x < w * k; ++x) out[(p * h * k + y) * w * k + x] = lat[(p * h + y / k) * w + x / k];
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Datasets

struct DatasetManifest {
  std::string source = "synthetic";  // "synthetic" | "folder"
  std::uint64_t seed = 7;
  int count = 1000;
  std::string folder;
  std::string caption_file = "captions.tsv";
  int image_size = 16;
  int latent_factor = 1;
  double val_fraction = 0.1;
  int context_len = 8;
  bool random_flip = false;
  Vocabulary vocabulary;
};

inline nlohmann::json to_json(const DatasetManifest& m) {
  return {{"source", m.source},
          {"seed", m.seed},
          {"count", m.count},
          {"folder", m.folder},
          {"caption_file", m.caption_file},
          {"image_size", m.image_size},
          {"latent_factor", m.latent_factor},
          {"val_fraction", m.val_fraction},
          {"context_len", m.context_len},
          {"random_flip", m.random_flip},
          {"vocabulary", m.vocabulary.to_json()}};
}

inline DatasetManifest manifest_from_json(const nlohmann::json& j) {
  DatasetManifest m;
  std::vector<std::string> problems;
  auto get = [&](const char* key, auto& dst) {
    if (!j.contains(key)) return;
    try {
      j.at(key).get_to(dst);
    } catch (const nlohmann::json::exception&) {
      problems.push_back(std::string("manifest.") + key + ": wrong type");
    }
  };
  get("source", m.source);
  get("seed", m.seed);
  get("count", m.count);
  get("folder", m.folder);
  get("caption_file", m.caption_file);
  get("image_size", m.image_size);
  get("latent_factor", m.latent_factor);
  get("val_fraction", m.val_fraction);
  get("context_len", m.context_len);
  get("random_flip", m.random_flip);
  if (j.contains("vocabulary")) m.vocabulary = Vocabulary::from_json(j.at("vocabulary"));
  if (m.source != "synthetic" && m.source != "folder") problems.push_back("manifest.source: unknown value '" + m.source + "'");
  if (m.count < 0) problems.push_back("manifest.count: must be nonnegative");
  if (m.image_size < 1) problems.push_back("manifest.image_size: must be positive");
  if (m.latent_factor < 1 || (m.image_size % std::max(1, m.latent_factor)) != 0) {
    problems.push_back("manifest.latent_factor: must be >= 1 and divide image_size");
  }
  if (m.val_fraction < 0 || m.val_fraction >= 1) problems.push_back("manifest.val_fraction: must lie in [0, 1)");
  if (m.context_len < 1) problems.push_back("manifest.context_len: must be positive");
  if (!problems.empty()) throw ConfigError(problems);
  return m;
}

struct Record {
  std::string name;
  std::string caption;
  std::vector<int> tokens;
  Image image;
  Tensor<float> latent;  // [C, h, w]
  bool val = false;
};

struct Dataset {
  DatasetManifest manifest;
  std::vector<Record> records;
  std::vector<std::string> warnings;

  std::size_t size() const { return records.size(); }
  bool empty() const { return records.empty(); }

  std::vector<int> split_indices(bool val) const {
    std::vector<int> out;
    for (std::size_t i = 0; i < records.size(); ++i) {
      if (records[i].val == val) out.push_back(static_cast<int>(i));
    }
    return out;
  }
  std::vector<int> train_indices() const { return split_indices(false); }
  std::vector<int> val_indices() const { return split_indices(true); }
};

/// Stable index-keyed split assignment.
inline bool in_val_split(std::uint64_t seed, std::size_t index, double fraction) {
  const std::uint64_t h = derive_seed(seed, {0x5A17ull, static_cast<std::uint64_t>(index)});
  return static_cast<double>(h % 1000000ull) < fraction * 1000000.0;
}

inline Record make_record(std::string name, std::string caption, Image image, const DatasetManifest& m,
                          std::size_t index) {
  Record r;
  r.name = std::move(name);
  r.caption = std::move(caption);
  r.tokens = m.vocabulary.tokenize(r.caption, m.context_len);
  r.latent = encode_latent(image_to_tensor(image), m.latent_factor);
  r.image = std::move(image);
  r.val = in_val_split(m.seed, index, m.val_fraction);
  return r;
}

inline std::string record_name(std::size_t i) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%06zu.ppm", i);
  return buf;
}

/// Seeded procedural shapes; each record draws from its own index-keyed stream.
inline Dataset generate_synthetic(DatasetManifest m) {
  m.source = "synthetic";
  if (m.vocabulary.size() <= 3) m.vocabulary = synthetic_vocabulary();
  Dataset d;
  d.manifest = m;
  d.records.reserve(static_cast<std::size_t>(m.count));
  for (int i = 0; i < m.count; ++i) {
    Rng rng(derive_seed(m.seed, {static_cast<std::uint64_t>(i)}));
    const ShapeSpec s = random_shape(rng);
    d.records.push_back(make_record(record_name(static_cast<std::size_t>(i)), caption_of(s),
                                    render_shape(s, m.image_size), m, static_cast<std::size_t>(i)));
  }
  return d;
}

inline std::map<std::string, std::string> read_captions(const std::filesystem::path& path) {
  std::map<std::string, std::string> out;
  if (!std::filesystem::exists(path)) return out;
  std::istringstream in(read_file(path));
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    const auto tab = line.find('\t');
    if (tab == std::string::npos) continue;
    out[line.substr(0, tab)] = line.substr(tab + 1);
  }
  return out;
}

/// Loads every image in `m.folder` that has a caption in `m.caption_file`
/// (resolved relative to the folder). Images are resized on the shorter edge
/// and center-cropped to `m.image_size`. Missing captions are skipped with a
/// warning; unreadable images raise one error listing all of them.
inline Dataset ingest_folder(DatasetManifest m) {
  namespace fs = std::filesystem;
  m.source = "folder";
  const fs::path dir = m.folder;
  if (!fs::is_directory(dir)) throw Error("ingest: not a directory: " + dir.string());
  fs::path cap_path = m.caption_file;
  if (cap_path.is_relative()) cap_path = dir / cap_path;
  const auto captions = read_captions(cap_path);
  std::vector<fs::path> files;
  for (const auto& e : fs::recursive_directory_iterator(dir)) {
    if (e.is_regular_file() && is_image_file(e.path())) files.push_back(e.path());
  }
  std::sort(files.begin(), files.end());

  Dataset d;
  std::vector<std::pair<std::string, Image>> loaded;
  std::vector<std::string> unreadable;
  for (const auto& f : files) {
    const std::string rel = fs::relative(f, dir).generic_string();
    auto it = captions.find(rel);
    if (it == captions.end()) it = captions.find(f.filename().string());
    if (it == captions.end()) {
      d.warnings.push_back("no caption for " + rel + "; skipped");
      continue;
    }
    try {
      loaded.emplace_back(it->second, resize_and_center_crop(read_image(f), m.image_size));
    } catch (const std::exception& e) {
      unreadable.push_back(rel + " (" + e.what() + ")");
    }
  }
  if (!unreadable.empty()) {
    std::string msg = "unreadable images:";
    for (const auto& u : unreadable) msg += "\n  - " + u;
    throw Error(msg);
  }
  if (m.vocabulary.size() <= 3) {
    std::set<std::string> words;
    for (const auto& [cap, img] : loaded) {
      for (const auto& w : Vocabulary::split(cap)) words.insert(w);
    }
    m.vocabulary = Vocabulary(std::vector<std::string>(words.begin(), words.end()));
  }
  d.manifest = m;
  for (std::size_t i = 0; i < loaded.size(); ++i) {
    d.records.push_back(make_record(record_name(i), std::move(loaded[i].first), std::move(loaded[i].second), m, i));
  }
  return d;
}

inline Dataset dataset_from_manifest(const DatasetManifest& m) {
  return m.source == "synthetic" ? generate_synthetic(m) : ingest_folder(m);
}

/// Writes images/NNNNNN.ppm, captions.tsv and manifest.json.
inline void write_dataset(const std::filesystem::path& dir, const Dataset& d) {
  std::filesystem::create_directories(dir / "images");
  std::string tsv;
  for (const auto& r : d.records) {
    write_ppm(dir / "images" / r.name, r.image);
    tsv += "images/" + r.name + "\t" + r.caption + "\n";
  }
  write_file(dir / "captions.tsv", tsv);
  write_file(dir / "manifest.json", to_json(d.manifest).dump(2) + "\n");
}

/// Reads a directory written by write_dataset. Records keep the stored
/// vocabulary and split assignment.
inline Dataset load_dataset(const std::filesystem::path& dir) {
  DatasetManifest m = manifest_from_json(nlohmann::json::parse(read_file(dir / "manifest.json")));
  const std::string source = m.source;
  m.folder = dir.string();
  m.caption_file = "captions.tsv";
  Dataset d = ingest_folder(m);
  d.manifest.source = source;
  return d;
}

}  // namespace bkd

#endif  // BKD_DATA_HPP
