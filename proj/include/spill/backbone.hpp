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
#include <memory>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include <torch/torch.h>

#include <json.hpp>

#include "spill/image.hpp"

namespace spill {

/// One entry of the pretrained-backbone registry.
struct BackboneSpec {
  std::string name;
  Size native_input;          ///< width, height in pixels
  std::string preprocess_id;  ///< key into the preprocessing table
};

/// The eleven supported backbones in a stable order (VGG19 first).
const std::vector<BackboneSpec>& list_backbones();

/// Throws unknown_backbone.
const BackboneSpec& find_backbone(std::string_view name);

/// One node of a layer graph as exported from the reference framework.
struct LayerSpec {
  std::string name;
  std::string cls;
  std::vector<std::string> inbound;  ///< input layer names, in call order
  nlohmann::json config;
  std::vector<LayerSpec> sublayers;  ///< for Sequential containers
  bool op = false;                   ///< raw tensor op: graph node, not a model layer
};

struct GraphSpec {
  std::string name;
  Size native_input;
  std::string input;
  std::vector<std::string> outputs;
  std::vector<LayerSpec> layers;  ///< any order
};

GraphSpec parse_graph(const nlohmann::json& j);
/// Throws missing_file, invalid_argument.
GraphSpec load_graph(const std::filesystem::path& file);

/// Directory with the <name>.json graph descriptions; SPILL_DATA_DIR
/// overrides the build-time default.
std::filesystem::path backbone_data_dir();
GraphSpec load_backbone_graph(std::string_view name);

/// Layer enumeration order of the reference framework: nodes grouped by
/// depth (longest path to an output), deepest first; ties broken by the
/// first visit of a depth-first walk from the outputs. Raw ops are dropped
/// unless include_ops. Throws invalid_argument on dangling inputs or cycles.
std::vector<std::string> keras_layer_order(const GraphSpec& g, bool include_ops = false);

namespace detail {
class Layer;
}

/// Backbone interpreter. Input is NCHW float, already preprocessed;
/// internal layout is NCHW. Parameters and statistics are registered as
/// "<layer>/<weight>" with torch layouts: conv [O, I/groups, kh, kw],
/// depthwise [C*m, 1, kh, kw], dense [units, in].
class BackboneGraphImpl : public torch::nn::Module {
 public:
  explicit BackboneGraphImpl(const GraphSpec& spec);
  ~BackboneGraphImpl() override;

  const std::string& name() const noexcept { return name_; }
  /// Model layers in enumeration order (raw ops excluded).
  const std::vector<std::string>& layer_order() const noexcept { return layer_order_; }
  std::int64_t output_channels() const noexcept;

  /// Weight count of one layer, including non-trainable statistics.
  std::int64_t layer_param_count(std::string_view layer) const;
  std::int64_t count_params() const;

  /// Freezes every layer except the last n of layer_order(). Frozen
  /// batch-norm layers run in inference mode even while training.
  void freeze_all_but_last(int n);
  std::vector<std::string> trainable_layers() const;
  bool is_frozen(std::string_view layer) const;
  /// Elements in parameters that require grad.
  std::int64_t trainable_param_count() const;

  torch::Tensor forward(const torch::Tensor& x);
  /// Outputs of the frozen sub-graph that the trainable tail consumes.
  std::vector<torch::Tensor> forward_frozen(const torch::Tensor& x);
  torch::Tensor forward_tail(const std::vector<torch::Tensor>& boundary);
  /// Output of every model layer, keyed by name.
  std::map<std::string, torch::Tensor> forward_all(const torch::Tensor& x);

  /// Surrogate initialization: seeded random weights (He-normal kernels,
  /// unit gamma, zero beta and bias).
  void reset_parameters(std::uint64_t seed);
  /// Data-dependent rescaling on a calibration batch: every kernel is scaled
  /// to unit pre-activation std and batch-norm statistics are set to the
  /// batch statistics. Runs under no-grad.
  void calibrate(const torch::Tensor& x);

  /// Parameters and buffers, by registered name.
  std::vector<std::pair<std::string, torch::Tensor>> named_tensors() const;
  /// Copies values in place. Throws invalid_argument on a missing name or a
  /// shape mismatch.
  void load_tensors(const std::map<std::string, torch::Tensor>& values);

 private:
  struct Node;
  torch::Tensor run(std::vector<torch::Tensor>& values, std::span<const int> schedule, int output) const;

  std::string name_;
  std::vector<Node> nodes_;  // topological order, raw ops included
  std::vector<std::string> layer_order_;
  int input_node_ = 0;
  int output_node_ = 0;
  std::vector<int> frozen_schedule_;
  std::vector<int> tail_schedule_;
  std::vector<int> boundary_;
  bool calibrating_ = false;
};
TORCH_MODULE(BackboneGraph);

}  // namespace spill
