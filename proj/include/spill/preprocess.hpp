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

#include <optional>
#include <span>
#include <string_view>

#include <torch/torch.h>

#include "spill/backbone.hpp"
#include "spill/image.hpp"
#include "spill/rng.hpp"

namespace spill {

/// Frames -> [N, 3, H, W] float32 model input: resize to `size` (the
/// backbone's native input by default), then the backbone family's
/// published normalization. Throws unknown_preprocess, invalid_argument.
torch::Tensor preprocess(std::span<const Frame> frames, const BackboneSpec& spec,
                         std::optional<Size> size = std::nullopt);

/// Normalization step alone, on RGB values in [0, 255], NCHW:
///   caffe: RGB -> BGR, subtract the ImageNet BGR means
///   tf:    x / 127.5 - 1
///   torch: x / 255, subtract ImageNet mean, divide by ImageNet std
///   raw:   unchanged (the network normalizes internally)
torch::Tensor normalize_input(const torch::Tensor& rgb, std::string_view preprocess_id);

/// Frames (all the same size) -> [N, 3, H, W] float32 in [0, 255].
torch::Tensor frames_to_tensor(std::span<const Frame> frames);

/// Training-time augmentation. Factors follow the usual layer semantics:
/// rotation is a fraction of a full turn, contrast a relative scale range.
struct AugmentConfig {
  bool horizontal_flip = true;
  double rotation_factor = 0.01;  ///< angle uniform in +-(factor * 360) degrees
  double contrast_factor = 0.01;  ///< scale uniform in [1 - factor, 1 + factor]

  static AugmentConfig none() { return {false, 0.0, 0.0}; }
};

/// Throws invalid_argument on negative factors.
void check_augment(const AugmentConfig& cfg);

struct AugmentDraw {
  bool flip = false;
  double angle_deg = 0.0;
  double contrast = 1.0;
};

AugmentDraw draw_augment(const AugmentConfig& cfg, Rng& rng);

/// Flip, rotate about the centre (bilinear, reflected border), then scale
/// contrast about the per-channel mean. Identity draws return the input
/// unchanged; dimensions never change.
Frame apply_augment(const Frame& frame, const AugmentDraw& draw);

inline Frame augment(const Frame& frame, const AugmentConfig& cfg, Rng& rng) {
  return apply_augment(frame, draw_augment(cfg, rng));
}

}  // namespace spill
