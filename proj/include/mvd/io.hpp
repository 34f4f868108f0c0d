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

#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "mvd/core.hpp"

namespace mvd {

/// 8-bit PNG of a 1- or 3-channel image; values are clamped to [0, 1] and
/// rounded to the nearest level.
void write_png(const std::filesystem::path& path, const LatentField& img);
/// Gray or RGB(A) PNG as 1 or 3 channels in [0, 1]; alpha is dropped.
LatentField read_png(const std::filesystem::path& path);

/// Standard PFM: "PF" (3 channels) or "Pf" (1 channel), negative scale for
/// little-endian, scanlines bottom to top.
void write_pfm(const std::filesystem::path& path, const LatentField& img);
LatentField read_pfm(const std::filesystem::path& path);

/// Writes 1/3-channel fields as one PFM, others as one "Pf" per channel with
/// a "_c<k>" suffix before the extension. Returns the files written.
std::vector<std::filesystem::path> write_field_pfm(const std::filesystem::path& path, const LatentField& f);

/// Lower-case hex SHA-256.
std::string sha256_hex(const std::string& bytes);
std::string sha256_file(const std::filesystem::path& path);

std::string read_text_file(const std::filesystem::path& path);
void write_text_file(const std::filesystem::path& path, const std::string& text);

}  // namespace mvd
