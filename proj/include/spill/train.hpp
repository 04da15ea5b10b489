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
#include <functional>
#include <limits>
#include <map>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <torch/torch.h>

#include <json.hpp>

#include "spill/backbone.hpp"
#include "spill/dataset.hpp"
#include "spill/eval.hpp"
#include "spill/preprocess.hpp"
#include "spill/weights.hpp"

namespace spill {

/// Patience that never triggers; the run ends at max_epochs.
inline constexpr int kUnlimitedPatience = std::numeric_limits<int>::max();

struct EarlyStopState {
  double best_val_loss = std::numeric_limits<double>::infinity();
  int best_epoch = 0;  ///< 1-based; 0 before the first epoch
  int epochs_since_improvement = 0;
};

enum class StopDecision { continue_training, stop };

struct EarlyStopStep {
  EarlyStopState state;
  StopDecision decision = StopDecision::continue_training;
  std::string diagnostic;  ///< set when a non-finite loss forced the stop
};

/// Strict improvement (val_loss < best) resets the counter and records the
/// epoch; the run stops once the counter reaches patience. A non-finite
/// val_loss stops immediately with a diagnostic. Throws invalid_argument
/// when patience < 1.
EarlyStopStep early_stop_update(const EarlyStopState& state, int epoch, double val_loss, int patience);

/// Optimizer (RMSprop, rho 0.9, eps 1e-7) and loss (binary cross-entropy)
/// are fixed by the recipe.
struct TrainConfig {
  std::string backbone = "VGG19";
  double learning_rate = 1e-5;
  int patience = 5;
  int max_epochs = 50;
  std::size_t batch_train = 8;
  std::size_t batch_val = 8;
  std::size_t batch_test = 2;
  int trainable_tail_layers = 5;
  AugmentConfig aug;
  std::uint64_t seed = 0;
  SubsetFilter subset;
  /// Model input size; the backbone's native input by default.
  std::optional<Size> input;
  std::filesystem::path weights_store = weights_store_dir();
};

/// Throws invalid_argument on out-of-range values, unknown_backbone.
void check_train_config(const TrainConfig& cfg);
nlohmann::json train_config_json(const TrainConfig& cfg);

struct FreezeReport {
  std::string backbone;
  std::size_t backbone_layers = 0;
  std::vector<std::string> unfrozen_layers;  ///< backbone layers only; the head always trains
  std::int64_t total_params = 0;             ///< backbone and head, statistics included
  std::int64_t trainable_params = 0;         ///< backbone tail and head
  std::int64_t head_params = 0;
};

nlohmann::json freeze_report_json(const FreezeReport& r);

/// Backbone without its classifier, then global average pooling and a
/// single sigmoid unit. forward() returns logits [N, 1].
class SpillNetImpl : public torch::nn::Module {
 public:
  /// The head is Glorot-uniform initialized from `seed`, bias zero.
  SpillNetImpl(BackboneGraph backbone, std::uint64_t seed);

  BackboneGraph& backbone() noexcept { return backbone_; }
  const BackboneGraph& backbone() const noexcept { return backbone_; }

  torch::Tensor forward(const torch::Tensor& x);
  /// Tail and head on cached outputs of the frozen sub-graph.
  torch::Tensor forward_from_boundary(const std::vector<torch::Tensor>& boundary);
  torch::Tensor head_logits(const torch::Tensor& feature_map);

  FreezeReport freeze_report() const;

  /// Backbone tensors plus "head/kernel" [1, C] and "head/bias" [1].
  NamedTensors named_tensors() const;
  void load_tensors(const std::map<std::string, torch::Tensor>& values);

 private:
  BackboneGraph backbone_;
  torch::nn::Linear head_{nullptr};
};
TORCH_MODULE(SpillNet);

/// Pretrained backbone from the store, everything but the last
/// `trainable_tail_layers` frozen, new head appended. Throws
/// weights_unavailable, unknown_backbone.
SpillNet build_classifier(const BackboneSpec& spec, int trainable_tail_layers = 5, std::uint64_t head_seed = 0,
                          const std::filesystem::path& store = weights_store_dir());

struct EpochRecord {
  int epoch = 0;
  double train_loss = 0.0;
  double val_loss = 0.0;
  double train_acc = 0.0;
  double val_acc = 0.0;
};

struct TrainHistory {
  std::vector<EpochRecord> epochs;
  int stopped_epoch = 0;   ///< last epoch run
  int restored_epoch = 0;  ///< epoch whose weights were kept
  bool early_stopped = false;
  std::string diagnostic;
};

/// "epoch,train_loss,val_loss,train_acc,val_acc"
void write_history_csv(const TrainHistory& h, const std::filesystem::path& path);

struct TrainedOn {
  Modality modality = Modality::thermal;
  std::optional<std::string> room;
  std::optional<std::string> liquid;
  std::string manifest_hash;
  std::uint64_t seed = 0;
};

struct TrainedModel {
  std::string backbone_name;
  std::filesystem::path weights_path;
  Size input_shape;
  TrainedOn trained_on;
  std::uintmax_t size_bytes = 0;
};

struct TrainHooks {
  /// Replaces the measured validation loss of an epoch (1-based) before it
  /// is recorded and fed to early stopping.
  std::function<double(int epoch, double measured)> val_loss;
  std::function<void(const EpochRecord&)> on_epoch;
};

struct TrainResult {
  TrainedModel model;
  TrainHistory history;
  FreezeReport freeze;
  /// Validation accuracy of the restored weights, measured in memory.
  double final_val_acc = 0.0;
  double final_val_loss = 0.0;
};

/// Fine-tunes on the train split of the configured subset with early
/// stopping on the val split, restores the best epoch, then writes
/// <out>/model.weights, <out>/history.csv and <out>/provenance.json.
/// Throws empty_split, out_of_memory, write_failure, weights_unavailable.
TrainResult train(const TrainConfig& cfg, const DatasetManifest& manifest, const std::filesystem::path& out_dir,
                  const TrainHooks& hooks = {});

/// Trained model behind the Classifier interface: preprocessing at the
/// trained input size, forward pass, sigmoid.
class TorchClassifier final : public Classifier {
 public:
  TorchClassifier(SpillNet net, BackboneSpec spec, Size input, Modality modality);

  std::vector<float> predict(std::span<const Frame> frames) override;
  Modality modality() const noexcept override { return modality_; }
  std::string name() const override { return spec_.name; }

  SpillNet& net() noexcept { return net_; }
  Size input_size() const noexcept { return input_; }

 private:
  SpillNet net_;
  BackboneSpec spec_;
  Size input_;
  Modality modality_;
};

/// Reloads a model.weights file written by train(); its header names the
/// backbone, input size and modality. Throws missing_file,
/// model_load_failure.
std::unique_ptr<TorchClassifier> load_classifier(const std::filesystem::path& weights_path);

}  // namespace spill
