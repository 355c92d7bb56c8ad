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

#ifndef BKD_ARCHIVE_HPP
#define BKD_ARCHIVE_HPP

// Named-tensor archive:
//   u64 little-endian manifest length N
//   N bytes UTF-8 JSON: {name: {"shape": [...], "dtype": "f32", "offset": k}, ...,
//                        "__metadata__": {...}}
//   zero padding up to the next 64-byte file offset
//   payload: little-endian f32 data; offsets are relative to the payload
//   start and 64-byte aligned.

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "bkd/error.hpp"
#include "bkd/tensor.hpp"
#include "bkd/unet.hpp"

namespace bkd {

static_assert(std::endian::native == std::endian::little, "archive I/O assumes a little-endian host");

constexpr std::size_t kArchiveAlign = 64;
constexpr const char* kMetadataKey = "__metadata__";

struct Archive {
  std::vector<std::pair<std::string, Tensor<float>>> tensors;
  nlohmann::json metadata = nlohmann::json::object();

  const Tensor<float>* find(std::string_view name) const {
    for (const auto& [n, t] : tensors) {
      if (n == name) return &t;
    }
    return nullptr;
  }
};

inline std::size_t align_up(std::size_t v, std::size_t a) { return (v + a - 1) / a * a; }

inline std::string encode_archive(const Archive& a) {
  nlohmann::ordered_json manifest = nlohmann::ordered_json::object();
  std::size_t offset = 0, end = 0;
  for (const auto& [name, t] : a.tensors) {
    if (name == kMetadataKey) throw ArchiveError("tensor name '__metadata__' is reserved");
    manifest[name] = {{"shape", t.shape()}, {"dtype", "f32"}, {"offset", offset}};
    end = offset + t.size() * sizeof(float);
    offset = align_up(end, kArchiveAlign);
  }
  manifest[kMetadataKey] = a.metadata;
  const std::string header = manifest.dump();
  const std::size_t payload_start = align_up(8 + header.size(), kArchiveAlign);
  std::string out(payload_start + end, '\0');
  const std::uint64_t n = header.size();
  std::memcpy(out.data(), &n, 8);
  std::memcpy(out.data() + 8, header.data(), header.size());
  std::size_t cursor = 0;
  for (const auto& [name, t] : a.tensors) {
    std::memcpy(out.data() + payload_start + cursor, t.data(), t.size() * sizeof(float));
    cursor = align_up(cursor + t.size() * sizeof(float), kArchiveAlign);
  }
  return out;
}

inline Archive decode_archive(std::string_view bytes) {
  if (bytes.size() < 8) throw ArchiveError("truncated archive: missing manifest length");
  std::uint64_t n = 0;
  std::memcpy(&n, bytes.data(), 8);
  if (n > bytes.size() - 8) throw ArchiveError("truncated archive: manifest extends past end of file");
  nlohmann::ordered_json manifest;
  try {
    manifest = nlohmann::ordered_json::parse(bytes.substr(8, n));
  } catch (const nlohmann::json::exception& e) {
    throw ArchiveError(std::string("malformed manifest: ") + e.what());
  }
  if (!manifest.is_object()) throw ArchiveError("malformed manifest: not an object");
  const std::size_t payload_start = align_up(8 + n, kArchiveAlign);
  Archive a;
  for (const auto& [name, entry] : manifest.items()) {
    if (name == kMetadataKey) {
      a.metadata = nlohmann::json::parse(entry.dump());
      continue;
    }
    Shape shape;
    std::size_t offset = 0;
    try {
      if (entry.at("dtype").get<std::string>() != "f32") {
        throw ArchiveError("tensor '" + name + "': unsupported dtype");
      }
      shape = entry.at("shape").get<Shape>();
      offset = entry.at("offset").get<std::size_t>();
    } catch (const nlohmann::json::exception& e) {
      throw ArchiveError("tensor '" + name + "': malformed entry: " + e.what());
    }
    if (offset % kArchiveAlign != 0) throw ArchiveError("tensor '" + name + "': misaligned offset");
    const std::size_t nbytes = shape_numel(shape) * sizeof(float);
    if (payload_start + offset + nbytes > bytes.size()) {
      throw ArchiveError("truncated payload: tensor '" + name + "' extends past end of file");
    }
    Tensor<float> t(shape);
    std::memcpy(t.data(), bytes.data() + payload_start + offset, nbytes);
    a.tensors.emplace_back(name, std::move(t));
  }
  return a;
}

inline void write_archive(const std::filesystem::path& path, const Archive& a) {
  const std::string bytes = encode_archive(a);
  std::ofstream f(path, std::ios::binary);
  if (!f) throw ArchiveError("cannot open '" + path.string() + "' for writing");
  f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw ArchiveError("write failed for '" + path.string() + "'");
}

inline Archive read_archive(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw ArchiveError("cannot open '" + path.string() + "'");
  std::string bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  return decode_archive(bytes);
}

template <typename T>
Archive to_archive(const Model<T>& model, const std::string& prefix = "") {
  Archive a;
  for (const auto& p : model.parameters()) {
    a.tensors.emplace_back(prefix + p.name, p.value.template cast<float>());
  }
  a.metadata["config"] = to_json(model.config());
  return a;
}

/// Copies archive tensors (names optionally prefixed) into `model`. Every
/// unknown name, missing parameter and shape mismatch is reported together;
/// on error the model is left untouched.
template <typename T>
void load_weights(Model<T>& model, const Archive& a, const std::string& prefix = "") {
  std::vector<std::string> problems;
  std::vector<const Tensor<float>*> src(model.parameters().size(), nullptr);
  for (const auto& [name, t] : a.tensors) {
    if (name.rfind(prefix, 0) != 0) continue;
    const std::string local = name.substr(prefix.size());
    if (!model.has(local)) {
      problems.push_back("unknown tensor '" + name + "'");
      continue;
    }
    const std::size_t i = model.index_of(local);
    if (t.shape() != model.parameters()[i].value.shape()) {
      problems.push_back("shape mismatch for '" + name + "': archive " + shape_str(t.shape()) +
                         " vs model " + shape_str(model.parameters()[i].value.shape()));
      continue;
    }
    src[i] = &t;
  }
  for (std::size_t i = 0; i < src.size(); ++i) {
    if (!src[i] && model.has(model.parameters()[i].name)) {
      const bool mismatched = std::any_of(problems.begin(), problems.end(), [&](const std::string& p) {
        return p.find("'" + prefix + model.parameters()[i].name + "'") != std::string::npos;
      });
      if (!mismatched) problems.push_back("missing tensor '" + prefix + model.parameters()[i].name + "'");
    }
  }
  if (!problems.empty()) {
    std::string msg = "cannot load weights:";
    for (const auto& p : problems) msg += "\n  - " + p;
    throw ArchiveError(msg);
  }
  for (std::size_t i = 0; i < src.size(); ++i) {
    model.parameters()[i].value = src[i]->template cast<T>();
  }
}

template <typename T>
void save_weights(const Model<T>& model, const std::filesystem::path& path,
                  const nlohmann::json& extra_metadata = nlohmann::json::object()) {
  Archive a = to_archive(model);
  for (const auto& [k, v] : extra_metadata.items()) a.metadata[k] = v;
  write_archive(path, a);
}

template <typename T>
void load_weights(Model<T>& model, const std::filesystem::path& path) {
  load_weights(model, read_archive(path));
}

/// Builds a model from an archive whose metadata carries its config.
inline Model<float> load_model(const Archive& a) {
  if (!a.metadata.contains("config")) throw ArchiveError("archive has no embedded config");
  Model<float> m = build_unet<float>(config_from_json(a.metadata["config"]), 0);
  load_weights(m, a);
  return m;
}

}  // namespace bkd

#endif  // BKD_ARCHIVE_HPP
