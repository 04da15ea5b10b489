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
#include <map>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <torch/torch.h>

#include <json.hpp>

#include "spill/backbone.hpp"

namespace spill {

using NamedTensors = std::vector<std::pair<std::string, torch::Tensor>>;

/// Weights file: "SPLW0001", u64 little-endian header length, a JSON header
/// {"tensors": [{name, shape, dtype: "f32", offset}], "meta": {...}}, then
/// the raw little-endian float32 data (offsets are relative to its start).
struct WeightsFile {
  NamedTensors tensors;
  nlohmann::json meta = nlohmann::json::object();

  std::map<std::string, torch::Tensor> by_name() const;
};

/// Written to a temporary file and renamed into place. Throws write_failure.
void save_weights(const std::filesystem::path& path, const NamedTensors& tensors, const nlohmann::json& meta);
/// Throws missing_file, model_load_failure (corrupt or foreign file).
WeightsFile load_weights(const std::filesystem::path& path);

/// Pretrained-weights store: SPILL_WEIGHTS_DIR, else ~/.cache/spill/weights.
std::filesystem::path weights_store_dir();
/// <store>/<backbone>.weights
std::filesystem::path pretrained_weights_path(const BackboneSpec& spec, const std::filesystem::path& store);

/// Builds the backbone and loads its pretrained weights from the store.
/// Throws weights_unavailable when the store has no file for it.
BackboneGraph load_pretrained_backbone(const BackboneSpec& spec,
                                       const std::filesystem::path& store = weights_store_dir());

/// Provenance recorded next to stored weights (<name>.json) and in the
/// weights header.
nlohmann::json stored_weights_provenance(const BackboneSpec& spec, const std::filesystem::path& store);

struct SurrogateOptions {
  std::uint64_t seed = 0;
  std::size_t calibration_images = 8;
  std::optional<Size> input;  ///< calibration input size; native by default
};

/// Seeded stand-in for published weights when none can be fetched:
/// He-normal kernels, then data-dependent rescaling on smooth-noise images
/// so activations and batch-norm statistics are well conditioned.
BackboneGraph make_surrogate_backbone(const BackboneSpec& spec, const SurrogateOptions& options);

/// Smooth random images (bilinear upsampling of coarse noise grids).
std::vector<Frame> smooth_noise_frames(std::size_t n, Size size, std::uint64_t seed);

/// Writes <store>/<name>.weights and its provenance sidecar; returns the
/// weights path.
std::filesystem::path write_surrogate_weights(const BackboneSpec& spec, const SurrogateOptions& options,
                                              const std::filesystem::path& store);

/// Writes weights imported from elsewhere (already in this layout) into the
/// store, recording `source` as their provenance.
std::filesystem::path install_weights(const BackboneSpec& spec, const std::filesystem::path& file,
                                      const std::string& source, const std::filesystem::path& store);

}  // namespace spill
