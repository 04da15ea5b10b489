/**
 * Copyright 2026 The Spill Detection Authors
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 * http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */

#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace spill {

enum class Modality { thermal, rgb, combined };

std::string_view to_string(Modality m) noexcept;
std::optional<Modality> parse_modality(std::string_view text) noexcept;

enum class ClassLabel { spill, no_spill };

std::string_view to_string(ClassLabel c) noexcept;
std::optional<ClassLabel> parse_class_label(std::string_view text) noexcept;

struct Size {
  int width = 0;
  int height = 0;
  friend bool operator==(const Size&, const Size&) = default;
};

/// Canonical frame dimensions per modality.
inline constexpr Size kThermalSize{256, 192};
inline constexpr Size kRgbRawSize{640, 360};
inline constexpr Size kCombinedSize{512, 192};

/// Dimensions a frame of the given modality has when it leaves a source
/// (thermal 256x192, raw RGB 640x360, combined 512x192).
Size canonical_size(Modality m) noexcept;

/// 3-channel 8-bit image, RGB interleaved, row-major.
struct Frame {
  int width = 0;
  int height = 0;
  Modality modality = Modality::rgb;
  std::int64_t timestamp_ms = 0;  ///< source-relative milliseconds
  std::string source_id;
  std::vector<std::uint8_t> pixels;

  static constexpr int kChannels = 3;

  /// Black frame of the given size.
  static Frame blank(int width, int height, Modality modality);

  Size size() const noexcept { return {width, height}; }
  std::size_t index(int x, int y, int c = 0) const noexcept {
    return (static_cast<std::size_t>(y) * static_cast<std::size_t>(width) +
            static_cast<std::size_t>(x)) * kChannels + static_cast<std::size_t>(c);
  }
  std::uint8_t& at(int x, int y, int c) noexcept { return pixels[index(x, y, c)]; }
  std::uint8_t at(int x, int y, int c) const noexcept { return pixels[index(x, y, c)]; }

  /// Pixel data equality (ignores timestamp and source id).
  bool same_pixels(const Frame& other) const noexcept {
    return width == other.width && height == other.height && pixels == other.pixels;
  }
};

/// Throws Error(invalid_argument) unless dims are positive and the buffer
/// length is width*height*3.
void check_frame(const Frame& f);

/// check_frame plus the modality's canonical dimensions.
void check_canonical(const Frame& f);

/// Lossless PNG. Throws Error(write_failure / source_unreadable).
void write_png(const Frame& frame, const std::filesystem::path& path);
Frame read_png(const std::filesystem::path& path, Modality modality);

/// PNG encode/decode to memory.
std::vector<std::uint8_t> encode_png(const Frame& frame);

}  // namespace spill
