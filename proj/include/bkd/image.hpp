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

#ifndef BKD_IMAGE_HPP
#define BKD_IMAGE_HPP

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#ifdef BKD_HAVE_PNG
#include <png.h>
#endif

#include "bkd/error.hpp"
#include "bkd/tensor.hpp"

namespace bkd {

/// 8-bit interleaved RGB.
struct Image {
  int width = 0;
  int height = 0;
  std::vector<std::uint8_t> rgb;

  Image() = default;
  Image(int w, int h) : width(w), height(h), rgb(static_cast<std::size_t>(w) * h * 3, 0) {}

  std::uint8_t* px(int x, int y) { return rgb.data() + (static_cast<std::size_t>(y) * width + x) * 3; }
  const std::uint8_t* px(int x, int y) const {
    return rgb.data() + (static_cast<std::size_t>(y) * width + x) * 3;
  }
  friend bool operator==(const Image&, const Image&) = default;
};

inline std::string encode_ppm(const Image& img) {
  std::string out = "P6\n" + std::to_string(img.width) + " " + std::to_string(img.height) + "\n255\n";
  out.append(reinterpret_cast<const char*>(img.rgb.data()), img.rgb.size());
  return out;
}

inline Image decode_ppm(const std::string& bytes) {
  std::size_t pos = 0;
  auto token = [&]() -> std::string {
    while (pos < bytes.size()) {
      if (bytes[pos] == '#') {
        while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
      } else if (std::isspace(static_cast<unsigned char>(bytes[pos]))) {
        ++pos;
      } else {
        break;
      }
    }
    std::string t;
    while (pos < bytes.size() && !std::isspace(static_cast<unsigned char>(bytes[pos]))) t += bytes[pos++];
    return t;
  };
  if (token() != "P6") throw Error("not a binary PPM (P6) image");
  int w = 0, h = 0, maxval = 0;
  try {
    w = std::stoi(token());
    h = std::stoi(token());
    maxval = std::stoi(token());
  } catch (const std::exception&) {
    throw Error("malformed PPM header");
  }
  if (w <= 0 || h <= 0 || maxval != 255) throw Error("unsupported PPM geometry or depth");
  ++pos;  // single whitespace before the raster
  Image img(w, h);
  if (bytes.size() < pos + img.rgb.size()) throw Error("truncated PPM raster");
  std::copy_n(bytes.data() + pos, img.rgb.size(), reinterpret_cast<char*>(img.rgb.data()));
  return img;
}

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline void write_file(const std::filesystem::path& path, const std::string& bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error("write failed for " + path.string());
}

inline void write_ppm(const std::filesystem::path& path, const Image& img) { write_file(path, encode_ppm(img)); }
inline Image read_ppm(const std::filesystem::path& path) { return decode_ppm(read_file(path)); }

constexpr bool png_supported() {
#ifdef BKD_HAVE_PNG
  return true;
#else
  return false;
#endif
}

#ifdef BKD_HAVE_PNG
inline void write_png(const std::filesystem::path& path, const Image& img) {
  png_image pi{};
  pi.version = PNG_IMAGE_VERSION;
  pi.width = static_cast<png_uint_32>(img.width);
  pi.height = static_cast<png_uint_32>(img.height);
  pi.format = PNG_FORMAT_RGB;
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  if (!png_image_write_to_file(&pi, path.string().c_str(), 0, img.rgb.data(), 0, nullptr)) {
    throw Error("cannot write PNG " + path.string() + ": " + pi.message);
  }
}

inline Image read_png(const std::filesystem::path& path) {
  png_image pi{};
  pi.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&pi, path.string().c_str())) {
    throw Error("cannot read PNG " + path.string() + ": " + pi.message);
  }
  pi.format = PNG_FORMAT_RGB;
  Image img(static_cast<int>(pi.width), static_cast<int>(pi.height));
  if (!png_image_finish_read(&pi, nullptr, img.rgb.data(), 0, nullptr)) {
    throw Error("cannot decode PNG " + path.string() + ": " + pi.message);
  }
  return img;
}
#endif

inline bool is_image_file(const std::filesystem::path& p) {
  const auto ext = p.extension().string();
  return ext == ".ppm" || (png_supported() && ext == ".png");
}

inline Image read_image(const std::filesystem::path& path) {
  const auto ext = path.extension().string();
  if (ext == ".ppm") return read_ppm(path);
#ifdef BKD_HAVE_PNG
  if (ext == ".png") return read_png(path);
#endif
  throw Error("unsupported image format: " + path.string());
}

/// Writes PPM, and additionally PNG next to it when built with libpng.
inline void write_image(const std::filesystem::path& ppm_path, const Image& img, bool also_png) {
  write_ppm(ppm_path, img);
#ifdef BKD_HAVE_PNG
  if (also_png) {
    auto p = ppm_path;
    write_png(p.replace_extension(".png"), img);
  }
#else
  (void)also_png;
#endif
}

// ---------------------------------------------------------------------------
// Geometry

inline Image flip_horizontal(const Image& img) {
  Image out(img.width, img.height);
  for (int y = 0; y < img.height; ++y) {
    for (int x = 0; x < img.width; ++x) std::copy_n(img.px(img.width - 1 - x, y), 3, out.px(x, y));
  }
  return out;
}

/// Area-weighted resampling (box filter over the source footprint).
inline Image resize(const Image& img, int w, int h) {
  Image out(w, h);
  const double sx = static_cast<double>(img.width) / w, sy = static_cast<double>(img.height) / h;
  for (int y = 0; y < h; ++y) {
    const double y0 = y * sy, y1 = (y + 1) * sy;
    for (int x = 0; x < w; ++x) {
      const double x0 = x * sx, x1 = (x + 1) * sx;
      double acc[3] = {0, 0, 0}, wsum = 0;
      for (int iy = static_cast<int>(std::floor(y0)); iy < std::min(img.height, static_cast<int>(std::ceil(y1))); ++iy) {
        const double wy = std::min(y1, iy + 1.0) - std::max(y0, static_cast<double>(iy));
        for (int ix = static_cast<int>(std::floor(x0)); ix < std::min(img.width, static_cast<int>(std::ceil(x1))); ++ix) {
          const double wx = std::min(x1, ix + 1.0) - std::max(x0, static_cast<double>(ix));
          const double wgt = wx * wy;
          if (wgt <= 0) continue;
          const auto* p = img.px(ix, iy);
          for (int c = 0; c < 3; ++c) acc[c] += wgt * p[c];
          wsum += wgt;
        }
      }
      for (int c = 0; c < 3; ++c) out.px(x, y)[c] = static_cast<std::uint8_t>(std::lround(acc[c] / wsum));
    }
  }
  return out;
}

inline Image crop(const Image& img, int x0, int y0, int w, int h) {
  Image out(w, h);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) std::copy_n(img.px(x0 + x, y0 + y), 3, out.px(x, y));
  }
  return out;
}

/// Scales the shorter edge to `size` (aspect preserved), then center-crops
/// to size x size.
inline Image resize_and_center_crop(const Image& img, int size) {
  int w, h;
  if (img.width <= img.height) {
    w = size;
    h = std::max(size, static_cast<int>(std::lround(static_cast<double>(img.height) * size / img.width)));
  } else {
    h = size;
    w = std::max(size, static_cast<int>(std::lround(static_cast<double>(img.width) * size / img.height)));
  }
  Image r = (w == img.width && h == img.height) ? img : resize(img, w, h);
  return crop(r, (w - size) / 2, (h - size) / 2, size, size);
}

// ---------------------------------------------------------------------------
// Tensor conversion ([-1, 1] floats, channel-first)

inline Tensor<float> image_to_tensor(const Image& img) {
  Tensor<float> t({3, img.height, img.width});
  const std::size_t hw = static_cast<std::size_t>(img.height) * img.width;
  for (std::size_t i = 0; i < hw; ++i) {
    for (int c = 0; c < 3; ++c) t[c * hw + i] = img.rgb[i * 3 + static_cast<std::size_t>(c)] / 127.5f - 1.0f;
  }
  return t;
}

inline std::uint8_t to_byte(float v) {
  const float s = std::clamp((v + 1.0f) * 127.5f, 0.0f, 255.0f);
  return static_cast<std::uint8_t>(std::lround(s));
}

/// [3, H, W] (or [1, H, W], replicated) -> Image.
inline Image tensor_to_image(const Tensor<float>& t) {
  const int c = t.dim(0), h = t.dim(1), w = t.dim(2);
  if (c != 3 && c != 1) throw DimensionError("tensor_to_image: expected 1 or 3 channels");
  Image img(w, h);
  const std::size_t hw = static_cast<std::size_t>(h) * w;
  for (std::size_t i = 0; i < hw; ++i) {
    for (int k = 0; k < 3; ++k) img.rgb[i * 3 + static_cast<std::size_t>(k)] = to_byte(t[(c == 3 ? k : 0) * hw + i]);
  }
  return img;
}

/// Tiles [B, 3, H, W] into a grid with `cols` columns and `pad` pixel gaps.
inline Image make_grid(const Tensor<float>& batch, int cols, int pad = 1) {
  const int n = batch.dim(0), h = batch.dim(2), w = batch.dim(3);
  cols = std::max(1, std::min(cols, n));
  const int rows = (n + cols - 1) / cols;
  Image out(cols * w + (cols - 1) * pad, rows * h + (rows - 1) * pad);
  for (int i = 0; i < n; ++i) {
    Image tile = tensor_to_image(slice_batch(batch, i, i + 1).reshaped({batch.dim(1), h, w}));
    const int ox = (i % cols) * (w + pad), oy = (i / cols) * (h + pad);
    for (int y = 0; y < h; ++y) {
      for (int x = 0; x < w; ++x) std::copy_n(tile.px(x, y), 3, out.px(ox + x, oy + y));
    }
  }
  return out;
}

/// [H, W] values in [0, 1] -> grayscale image.
inline Image gray_image(const Tensor<float>& map) {
  const int h = map.dim(0), w = map.dim(1);
  Image img(w, h);
  for (std::size_t i = 0; i < map.size(); ++i) {
    const auto v = static_cast<std::uint8_t>(std::lround(std::clamp(map[i], 0.0f, 1.0f) * 255.0f));
    for (int c = 0; c < 3; ++c) img.rgb[i * 3 + static_cast<std::size_t>(c)] = v;
  }
  return img;
}

}  // namespace bkd

#endif  // BKD_IMAGE_HPP
