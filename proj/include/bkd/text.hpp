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

#ifndef BKD_TEXT_HPP
#define BKD_TEXT_HPP

#include <cctype>
#include <cstdint>
#include <string>
#include <unordered_map>
#include <vector>

#include <nlohmann/json.hpp>

#include "bkd/archive.hpp"
#include "bkd/error.hpp"
#include "bkd/rng.hpp"
#include "bkd/tensor.hpp"

namespace bkd {

/// Dense word ids. 0 is the null (unconditional) token, 1 padding, 2 unknown.
class Vocabulary {
 public:
  static constexpr int kNull = 0;
  static constexpr int kPad = 1;
  static constexpr int kUnk = 2;

  Vocabulary() : Vocabulary(std::vector<std::string>{}) {}
  explicit Vocabulary(const std::vector<std::string>& words) {
    for (const char* s : {"<null>", "<pad>", "<unk>"}) add(s);
    for (const auto& w : words) add(w);
  }

  int size() const { return static_cast<int>(words_.size()); }
  const std::vector<std::string>& words() const { return words_; }
  const std::string& word(int id) const { return words_.at(static_cast<std::size_t>(id)); }

  int id(const std::string& w) const {
    auto it = index_.find(w);
    return it == index_.end() ? kUnk : it->second;
  }

  /// Lower-cased words split on anything but [a-z0-9-].
  static std::vector<std::string> split(const std::string& caption) {
    std::vector<std::string> out;
    std::string cur;
    for (char ch : caption) {
      const char c = static_cast<char>(std::tolower(static_cast<unsigned char>(ch)));
      if (std::isalnum(static_cast<unsigned char>(c)) || c == '-') {
        cur += c;
      } else if (!cur.empty()) {
        out.push_back(cur);
        cur.clear();
      }
    }
    if (!cur.empty()) out.push_back(cur);
    return out;
  }

  /// Exactly `len` ids: words, then padding; longer captions are truncated.
  std::vector<int> tokenize(const std::string& caption, int len) const {
    std::vector<int> ids;
    for (const auto& w : split(caption)) {
      if (static_cast<int>(ids.size()) == len) break;
      ids.push_back(id(w));
    }
    ids.resize(static_cast<std::size_t>(len), kPad);
    return ids;
  }

  std::string detokenize(const std::vector<int>& ids) const {
    std::string out;
    for (int i : ids) {
      if (i == kPad || i == kNull) continue;
      if (!out.empty()) out += ' ';
      out += word(i);
    }
    return out;
  }

  static std::vector<int> null_tokens(int len) { return std::vector<int>(static_cast<std::size_t>(len), kNull); }

  nlohmann::json to_json() const {
    return std::vector<std::string>(words_.begin() + 3, words_.end());
  }
  static Vocabulary from_json(const nlohmann::json& j) { return Vocabulary(j.get<std::vector<std::string>>()); }

  friend bool operator==(const Vocabulary& a, const Vocabulary& b) { return a.words_ == b.words_; }

 private:
  void add(const std::string& w) {
    if (index_.count(w)) return;
    index_[w] = static_cast<int>(words_.size());
    words_.push_back(w);
  }
  std::vector<std::string> words_;
  std::unordered_map<std::string, int> index_;
};

/// Learned token + position embeddings producing a [L, D] context per caption.
template <typename T>
struct TextEncoder {
  Vocabulary vocab;
  int context_len = 0;
  int dim = 0;
  Tensor<T> token_embedding;     // [V, D]
  Tensor<T> position_embedding;  // [L, D]

  static TextEncoder build(Vocabulary vocab, int context_len, int dim, std::uint64_t seed) {
    TextEncoder e;
    e.vocab = std::move(vocab);
    e.context_len = context_len;
    e.dim = dim;
    e.token_embedding = randn<T>({e.vocab.size(), dim}, derive_seed(seed, {0x7E47}));
    e.position_embedding = randn<T>({context_len, dim}, derive_seed(seed, {0x7E48}));
    for (auto& v : e.position_embedding.vec()) v *= T(0.1);
    return e;
  }

  std::vector<int> tokenize(const std::string& caption) const { return vocab.tokenize(caption, context_len); }
  std::vector<int> null_tokens() const { return Vocabulary::null_tokens(context_len); }

  /// ids: B rows of context_len token ids -> [B, L, D].
  Tensor<T> encode(const std::vector<std::vector<int>>& ids) const {
    Tensor<T> out({static_cast<int>(ids.size()), context_len, dim});
    for (std::size_t b = 0; b < ids.size(); ++b) {
      if (static_cast<int>(ids[b].size()) != context_len) {
        throw DimensionError("text encoder: expected " + std::to_string(context_len) + " tokens, got " +
                             std::to_string(ids[b].size()));
      }
      for (int l = 0; l < context_len; ++l) {
        const int id = ids[b][static_cast<std::size_t>(l)];
        if (id < 0 || id >= vocab.size()) throw DomainError("text encoder: token id out of range");
        T* row = out.data() + (b * context_len + l) * static_cast<std::size_t>(dim);
        const T* te = token_embedding.data() + static_cast<std::size_t>(id) * dim;
        const T* pe = position_embedding.data() + static_cast<std::size_t>(l) * dim;
        for (int d = 0; d < dim; ++d) row[d] = te[d] + pe[d];
      }
    }
    return out;
  }

  /// Accumulates d(loss)/d(embeddings) given d(loss)/d(context).
  void backward(const std::vector<std::vector<int>>& ids, const Tensor<T>& dctx, Tensor<T>& d_token,
                Tensor<T>& d_position) const {
    for (std::size_t b = 0; b < ids.size(); ++b) {
      for (int l = 0; l < context_len; ++l) {
        const int id = ids[b][static_cast<std::size_t>(l)];
        const T* g = dctx.data() + (b * context_len + l) * static_cast<std::size_t>(dim);
        T* te = d_token.data() + static_cast<std::size_t>(id) * dim;
        T* pe = d_position.data() + static_cast<std::size_t>(l) * dim;
        for (int d = 0; d < dim; ++d) {
          te[d] += g[d];
          pe[d] += g[d];
        }
      }
    }
  }

  friend bool operator==(const TextEncoder& a, const TextEncoder& b) {
    return a.vocab == b.vocab && a.context_len == b.context_len && a.dim == b.dim &&
           a.token_embedding == b.token_embedding && a.position_embedding == b.position_embedding;
  }
};

template <typename T>
Archive to_archive(const TextEncoder<T>& e) {
  Archive a;
  a.tensors.emplace_back("token_embedding", e.token_embedding.template cast<float>());
  a.tensors.emplace_back("position_embedding", e.position_embedding.template cast<float>());
  a.metadata["vocabulary"] = e.vocab.to_json();
  a.metadata["context_len"] = e.context_len;
  a.metadata["dim"] = e.dim;
  return a;
}

inline TextEncoder<float> text_encoder_from_archive(const Archive& a) {
  TextEncoder<float> e;
  try {
    e.vocab = Vocabulary::from_json(a.metadata.at("vocabulary"));
    e.context_len = a.metadata.at("context_len").get<int>();
    e.dim = a.metadata.at("dim").get<int>();
  } catch (const nlohmann::json::exception& ex) {
    throw ArchiveError(std::string("text encoder archive: bad metadata: ") + ex.what());
  }
  const auto* tok = a.find("token_embedding");
  const auto* pos = a.find("position_embedding");
  if (!tok || !pos) throw ArchiveError("text encoder archive: missing embedding tensors");
  if (tok->shape() != Shape{e.vocab.size(), e.dim} || pos->shape() != Shape{e.context_len, e.dim}) {
    throw ArchiveError("text encoder archive: embedding shapes do not match metadata");
  }
  e.token_embedding = *tok;
  e.position_embedding = *pos;
  return e;
}

}  // namespace bkd

#endif  // BKD_TEXT_HPP
