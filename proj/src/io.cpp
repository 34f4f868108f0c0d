// Copyright 2026 The mvdiff Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     https://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#include "mvd/io.hpp"

#include <openssl/evp.h>
#include <png.h>

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <memory>
#include <sstream>

namespace mvd {
namespace {

constexpr const char* kModule = "io";

struct FileCloser {
  void operator()(std::FILE* f) const {
    if (f) std::fclose(f);
  }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

FilePtr open_file(const std::filesystem::path& path, const char* mode) {
  FilePtr f(std::fopen(path.c_str(), mode));
  if (!f) throw RuntimeError(kModule, "cannot open '" + path.string() + "': " + std::strerror(errno));
  return f;
}

std::uint8_t to_byte(double v) {
  if (!std::isfinite(v)) v = 0.0;
  return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
}

[[noreturn]] void png_fail(png_structp, png_const_charp msg) { throw RuntimeError(kModule, std::string("png: ") + msg); }
void png_warn(png_structp, png_const_charp) {}

}  // namespace

void write_png(const std::filesystem::path& path, const LatentField& img) {
  if (img.channels() != 1 && img.channels() != 3) {
    throw ContractError(kModule, "PNG needs 1 or 3 channels, got " + to_string(img.shape()));
  }
  const int w = img.width();
  const int h = img.height();
  const int c = img.channels();
  std::vector<std::uint8_t> rows(static_cast<std::size_t>(w) * h * c);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      for (int ch = 0; ch < c; ++ch) rows[(static_cast<std::size_t>(y) * w + x) * c + ch] = to_byte(img.at(ch, y, x));

  FilePtr f = open_file(path, "wb");
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, png_fail, png_warn);
  png_infop info = png_create_info_struct(png);
  try {
    png_init_io(png, f.get());
    png_set_IHDR(png, info, static_cast<png_uint_32>(w), static_cast<png_uint_32>(h), 8,
                 c == 3 ? PNG_COLOR_TYPE_RGB : PNG_COLOR_TYPE_GRAY, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT,
                 PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);
    for (int y = 0; y < h; ++y) png_write_row(png, rows.data() + static_cast<std::size_t>(y) * w * c);
    png_write_end(png, nullptr);
  } catch (...) {
    png_destroy_write_struct(&png, &info);
    throw;
  }
  png_destroy_write_struct(&png, &info);
}

LatentField read_png(const std::filesystem::path& path) {
  FilePtr f = open_file(path, "rb");
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, png_fail, png_warn);
  png_infop info = png_create_info_struct(png);
  LatentField out;
  try {
    png_init_io(png, f.get());
    png_read_info(png, info);
    png_set_strip_16(png);
    png_set_packing(png);
    png_set_palette_to_rgb(png);
    png_set_expand_gray_1_2_4_to_8(png);
    png_set_strip_alpha(png);
    png_read_update_info(png, info);
    const int w = static_cast<int>(png_get_image_width(png, info));
    const int h = static_cast<int>(png_get_image_height(png, info));
    const int c = png_get_channels(png, info);
    if (c != 1 && c != 3) throw RuntimeError(kModule, "unsupported PNG channel count in '" + path.string() + "'");
    std::vector<std::uint8_t> row(static_cast<std::size_t>(w) * c);
    out = LatentField({c, h, w}, Space::image);
    for (int y = 0; y < h; ++y) {
      png_read_row(png, row.data(), nullptr);
      for (int x = 0; x < w; ++x)
        for (int ch = 0; ch < c; ++ch) out.at(ch, y, x) = row[static_cast<std::size_t>(x) * c + ch] / 255.0;
    }
  } catch (...) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw;
  }
  png_destroy_read_struct(&png, &info, nullptr);
  return out;
}

void write_pfm(const std::filesystem::path& path, const LatentField& img) {
  if (img.channels() != 1 && img.channels() != 3) {
    throw ContractError(kModule, "PFM needs 1 or 3 channels, got " + to_string(img.shape()));
  }
  const int w = img.width();
  const int h = img.height();
  const int c = img.channels();
  std::string data = (c == 3 ? "PF\n" : "Pf\n") + std::to_string(w) + " " + std::to_string(h) + "\n-1.0\n";
  const std::size_t head = data.size();
  data.resize(head + static_cast<std::size_t>(w) * h * c * 4);
  std::size_t k = head;
  for (int y = h - 1; y >= 0; --y) {
    for (int x = 0; x < w; ++x) {
      for (int ch = 0; ch < c; ++ch) {
        const std::uint32_t bits = std::bit_cast<std::uint32_t>(static_cast<float>(img.at(ch, y, x)));
        for (int b = 0; b < 4; ++b) data[k++] = static_cast<char>((bits >> (8 * b)) & 0xff);
      }
    }
  }
  write_text_file(path, data);
}

LatentField read_pfm(const std::filesystem::path& path) {
  const std::string data = read_text_file(path);
  std::istringstream in(data);
  std::string magic;
  int w = 0, h = 0;
  double scale = 0.0;
  in >> magic >> w >> h >> scale;
  if (!in || (magic != "PF" && magic != "Pf") || w <= 0 || h <= 0 || scale == 0.0) {
    throw RuntimeError(kModule, "'" + path.string() + "' is not a PFM file");
  }
  in.get();  // single whitespace after the scale
  const int c = magic == "PF" ? 3 : 1;
  const std::size_t start = static_cast<std::size_t>(in.tellg());
  const std::size_t need = static_cast<std::size_t>(w) * h * c * 4;
  if (data.size() < start + need) throw RuntimeError(kModule, "'" + path.string() + "' is truncated");
  const bool little = scale < 0.0;
  LatentField out({c, h, w}, Space::image);
  std::size_t k = start;
  for (int y = h - 1; y >= 0; --y) {
    for (int x = 0; x < w; ++x) {
      for (int ch = 0; ch < c; ++ch) {
        std::uint32_t bits = 0;
        for (int b = 0; b < 4; ++b) {
          const auto byte = static_cast<std::uint32_t>(static_cast<unsigned char>(data[k + b]));
          bits |= little ? byte << (8 * b) : byte << (8 * (3 - b));
        }
        k += 4;
        out.at(ch, y, x) = static_cast<double>(std::bit_cast<float>(bits));
      }
    }
  }
  return out;
}

std::vector<std::filesystem::path> write_field_pfm(const std::filesystem::path& path, const LatentField& f) {
  if (f.channels() == 1 || f.channels() == 3) {
    write_pfm(path, f);
    return {path};
  }
  std::vector<std::filesystem::path> out;
  for (int c = 0; c < f.channels(); ++c) {
    LatentField one({1, f.height(), f.width()}, f.space());
    std::copy_n(f.storage().begin() + static_cast<std::ptrdiff_t>(c * f.shape().plane()), f.shape().plane(),
                one.storage().begin());
    std::filesystem::path p = path;
    p.replace_filename(path.stem().string() + "_c" + std::to_string(c) + path.extension().string());
    write_pfm(p, one);
    out.push_back(p);
  }
  return out;
}

std::string sha256_hex(const std::string& bytes) {
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(bytes.data(), bytes.size(), md, &len, EVP_sha256(), nullptr) != 1) {
    throw RuntimeError(kModule, "SHA-256 failed");
  }
  static const char* hex = "0123456789abcdef";
  std::string out;
  for (unsigned int i = 0; i < len; ++i) {
    out.push_back(hex[md[i] >> 4]);
    out.push_back(hex[md[i] & 15]);
  }
  return out;
}

std::string sha256_file(const std::filesystem::path& path) { return sha256_hex(read_text_file(path)); }

std::string read_text_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw RuntimeError(kModule, "cannot read '" + path.string() + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_text_file(const std::filesystem::path& path, const std::string& text) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw RuntimeError(kModule, "cannot write '" + path.string() + "'");
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  if (!out) throw RuntimeError(kModule, "write to '" + path.string() + "' failed");
}

}  // namespace mvd
