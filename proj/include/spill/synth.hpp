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

#include <array>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "spill/dataset.hpp"
#include "spill/frame_sources.hpp"
#include "spill/geometry.hpp"
#include "spill/image.hpp"

namespace spill {

enum class FloorTexture { tile, concrete };

/// Parameters of the synthetic thermal/RGB scene generator. Intensities are
/// thermal gray levels before colour mapping.
struct SynthSpec {
  double background_mean = 90.0;
  double background_noise_sigma = 3.0;
  double blob_delta = 60.0;  ///< signed offset inside the spill region
  double blob_radius_min = 8.0;
  double blob_radius_max = 60.0;
  FloorTexture rgb_texture = FloorTexture::tile;
  std::uint64_t seed = 0;

  /// |blob_delta| well above the noise floor; used by acceptance thresholds.
  static SynthSpec separable(std::uint64_t seed = 0);
  /// blob_delta close to the noise sigma; exercises imperfect-accuracy paths.
  static SynthSpec hard(std::uint64_t seed = 0);

  /// |blob_delta| >= 3 * sigma
  bool is_separable() const noexcept;
};

/// Throws invalid_argument when a field is out of range.
void check_synth_spec(const SynthSpec& spec);

/// Monotone "ironbow"-style palette mapping gray level -> RGB. Injective, so
/// colour-mapped thermal frames can be decoded back to gray levels.
const std::array<std::array<std::uint8_t, 3>, 256>& thermal_palette();

/// Gray (w*h) -> colour-mapped thermal frame.
Frame colorize_thermal(std::span<const std::uint8_t> gray, int width, int height);

/// Inverse palette lookup (nearest palette colour for off-palette pixels).
std::vector<std::uint8_t> thermal_intensity(const Frame& thermal);

struct SpillSample {
  FramePair pair;
  std::vector<std::uint8_t> mask;  ///< 256x192, 1 inside the spill ellipse
  Point2 center;                   ///< thermal pixel coordinates
  double radius_major = 0.0;
  double radius_minor = 0.0;
  double angle_rad = 0.0;
  bool clipped = false;  ///< ellipse reaches past the frame border
};

/// Uniform background + Gaussian noise (thermal), procedural floor (RGB).
/// Deterministic in (spec.seed, index).
FramePair gen_no_spill(const SynthSpec& spec, std::uint64_t index);

/// Adds a soft-edged elliptical blob of blob_delta to the thermal frame and a
/// faint darkened blob at the same place in the RGB frame.
SpillSample gen_spill(const SynthSpec& spec, std::uint64_t index);

struct SynthDatasetOptions {
  /// (room, liquid) combinations cycled over the generated pairs. Default: all
  /// eight Atrium/J234 x four-liquid combinations.
  std::vector<std::pair<std::string, std::string>> combos;
  /// Also write the fused 512x192 frame for each pair (identity calibration).
  bool with_combined = false;
};

std::vector<std::pair<std::string, std::string>> default_combos();

/// Writes 2*n_per_class pairs in the capture layout (balanced classes) and
/// returns the manifest built from out_root.
DatasetManifest gen_dataset(const SynthSpec& spec, std::size_t n_per_class, const std::filesystem::path& out_root,
                            const SynthDatasetOptions& options = {});

}  // namespace spill
