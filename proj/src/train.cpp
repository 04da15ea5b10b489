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

#include "spill/train.hpp"

#include <cmath>
#include <fstream>
#include <iomanip>
#include <new>
#include <numeric>

#include <ATen/CPUGeneratorImpl.h>

#include "spill/errors.hpp"
#include "spill/rng.hpp"
#include "spill/timefmt.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using torch::Tensor;

namespace spill {

namespace {

constexpr double kRmsRho = 0.9;
constexpr double kRmsEps = 1e-7;
constexpr const char* kHeadKernel = "head/kernel";
constexpr const char* kHeadBias = "head/bias";

std::string layer_of(const std::string& tensor_name) { return tensor_name.substr(0, tensor_name.find('/')); }

}  // namespace

EarlyStopStep early_stop_update(const EarlyStopState& state, int epoch, double val_loss, int patience) {
  if (patience < 1) throw Error(Errc::invalid_argument, "patience must be >= 1");
  EarlyStopStep step{state, StopDecision::continue_training, {}};
  if (!std::isfinite(val_loss)) {
    step.decision = StopDecision::stop;
    step.diagnostic = "validation loss is not finite at epoch " + std::to_string(epoch);
    return step;
  }
  if (val_loss < state.best_val_loss) {
    step.state.best_val_loss = val_loss;
    step.state.best_epoch = epoch;
    step.state.epochs_since_improvement = 0;
  } else {
    ++step.state.epochs_since_improvement;
    if (step.state.epochs_since_improvement >= patience) step.decision = StopDecision::stop;
  }
  return step;
}

void check_train_config(const TrainConfig& cfg) {
  find_backbone(cfg.backbone);
  auto bad = [](const std::string& what) { throw Error(Errc::invalid_argument, "train config: " + what); };
  if (!(cfg.learning_rate >= 0.0) || !std::isfinite(cfg.learning_rate)) bad("learning_rate must be >= 0");
  if (cfg.patience < 1) bad("patience must be >= 1");
  if (cfg.max_epochs < 1) bad("max_epochs must be >= 1");
  if (cfg.batch_train < 1 || cfg.batch_val < 1 || cfg.batch_test < 1) bad("batch sizes must be >= 1");
  if (cfg.trainable_tail_layers < 0) bad("trainable_tail_layers must be >= 0");
  if (cfg.input && (cfg.input->width < 32 || cfg.input->height < 32)) bad("input must be at least 32x32");
  check_augment(cfg.aug);
}

json train_config_json(const TrainConfig& cfg) {
  json j{{"backbone", cfg.backbone},
         {"learning_rate", cfg.learning_rate},
         {"optimizer", {{"name", "RMSprop"}, {"rho", kRmsRho}, {"epsilon", kRmsEps}}},
         {"loss", "binary_crossentropy"},
         {"patience", cfg.patience == kUnlimitedPatience ? json(nullptr) : json(cfg.patience)},
         {"max_epochs", cfg.max_epochs},
         {"batch_train", cfg.batch_train},
         {"batch_val", cfg.batch_val},
         {"batch_test", cfg.batch_test},
         {"trainable_tail_layers", cfg.trainable_tail_layers},
         {"aug",
          {{"horizontal_flip", cfg.aug.horizontal_flip},
           {"rotation_factor", cfg.aug.rotation_factor},
           {"contrast_factor", cfg.aug.contrast_factor}}},
         {"seed", cfg.seed},
         {"modality", to_string(cfg.subset.modality)},
         {"room", cfg.subset.room ? json(*cfg.subset.room) : json(nullptr)},
         {"liquid", cfg.subset.liquid ? json(*cfg.subset.liquid) : json(nullptr)},
         {"early_stopping", {{"monitor", "val_loss"}, {"min_delta", 0}, {"restore_best_weights", true}}}};
  if (cfg.input) j["input"] = {cfg.input->width, cfg.input->height};
  return j;
}

json freeze_report_json(const FreezeReport& r) {
  return {{"backbone", r.backbone},
          {"backbone_layers", r.backbone_layers},
          {"unfrozen_layers", r.unfrozen_layers},
          {"total_params", r.total_params},
          {"trainable_params", r.trainable_params},
          {"head_params", r.head_params}};
}

SpillNetImpl::SpillNetImpl(BackboneGraph backbone, std::uint64_t seed) : backbone_(std::move(backbone)) {
  register_module("backbone", backbone_);
  const std::int64_t c = backbone_->output_channels();
  head_ = register_module("head", torch::nn::Linear(c, 1));
  torch::NoGradGuard ng;
  auto gen = at::make_generator<at::CPUGeneratorImpl>(derive_seed(seed, fnv1a("head")));
  const double limit = std::sqrt(6.0 / static_cast<double>(c + 1));
  head_->weight.uniform_(-limit, limit, gen);
  head_->bias.zero_();
}

Tensor SpillNetImpl::head_logits(const Tensor& feature_map) { return head_->forward(feature_map.mean({2, 3})); }

Tensor SpillNetImpl::forward(const Tensor& x) { return head_logits(backbone_->forward(x)); }

Tensor SpillNetImpl::forward_from_boundary(const std::vector<Tensor>& boundary) {
  return head_logits(backbone_->forward_tail(boundary));
}

FreezeReport SpillNetImpl::freeze_report() const {
  FreezeReport r;
  r.backbone = backbone_->name();
  r.backbone_layers = backbone_->layer_order().size();
  r.unfrozen_layers = backbone_->trainable_layers();
  r.head_params = head_->weight.numel() + head_->bias.numel();
  r.total_params = backbone_->count_params() + r.head_params;
  r.trainable_params = backbone_->trainable_param_count() + r.head_params;
  return r;
}

NamedTensors SpillNetImpl::named_tensors() const {
  NamedTensors out = backbone_->named_tensors();
  out.emplace_back(kHeadKernel, head_->weight);
  out.emplace_back(kHeadBias, head_->bias);
  return out;
}

void SpillNetImpl::load_tensors(const std::map<std::string, Tensor>& values) {
  std::map<std::string, Tensor> rest;
  Tensor kernel;
  Tensor bias;
  for (const auto& [name, t] : values) {
    if (name == kHeadKernel) {
      kernel = t;
    } else if (name == kHeadBias) {
      bias = t;
    } else {
      rest.emplace(name, t);
    }
  }
  if (!kernel.defined() || !bias.defined()) throw Error(Errc::invalid_argument, "weights lack the classifier head");
  if (kernel.sizes() != head_->weight.sizes() || bias.sizes() != head_->bias.sizes()) {
    throw Error(Errc::invalid_argument, "classifier head shape mismatch");
  }
  backbone_->load_tensors(rest);
  torch::NoGradGuard ng;
  head_->weight.copy_(kernel);
  head_->bias.copy_(bias);
}

SpillNet build_classifier(const BackboneSpec& spec, int trainable_tail_layers, std::uint64_t head_seed,
                          const fs::path& store) {
  BackboneGraph backbone = load_pretrained_backbone(spec, store);
  backbone->freeze_all_but_last(trainable_tail_layers);
  return SpillNet(std::move(backbone), head_seed);
}

void write_history_csv(const TrainHistory& h, const fs::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw Error(Errc::write_failure, "cannot write " + path.string());
  out << "epoch,train_loss,val_loss,train_acc,val_acc\n" << std::setprecision(9);
  for (const auto& e : h.epochs) {
    out << e.epoch << ',' << e.train_loss << ',' << e.val_loss << ',' << e.train_acc << ',' << e.val_acc << '\n';
  }
  if (!out) throw Error(Errc::write_failure, "short write to " + path.string());
}

namespace {

std::vector<Frame> load_frames(const DatasetManifest& m, std::span<const ManifestEntry> entries) {
  std::vector<Frame> out;
  out.reserve(entries.size());
  for (const auto& e : entries) out.push_back(read_png(m.absolute(e), e.modality));
  return out;
}

Tensor labels_of(std::span<const ManifestEntry> entries, std::span<const std::size_t> items) {
  std::vector<float> y;
  y.reserve(items.size());
  for (std::size_t i : items) y.push_back(entries[i].class_label == ClassLabel::spill ? 1.0f : 0.0f);
  return torch::tensor(y).view({-1, 1});
}

std::vector<std::vector<std::size_t>> batches_of(std::vector<std::size_t> order, std::size_t size) {
  std::vector<std::vector<std::size_t>> out;
  for (std::size_t i = 0; i < order.size(); i += size) {
    out.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(i),
                     order.begin() + static_cast<std::ptrdiff_t>(std::min(order.size(), i + size)));
  }
  return out;
}

std::vector<Frame> gather(std::span<const Frame> frames, std::span<const std::size_t> items) {
  std::vector<Frame> out;
  out.reserve(items.size());
  for (std::size_t i : items) out.push_back(frames[i]);
  return out;
}

/// Frozen-prefix outputs for a fixed split, computed once in inference mode.
struct CachedSplit {
  std::vector<std::vector<Tensor>> boundary;
  std::vector<Tensor> labels;
  std::size_t n = 0;
};

CachedSplit cache_split(SpillNet& net, const BackboneSpec& spec, Size size, std::span<const Frame> frames,
                        std::span<const ManifestEntry> entries, std::size_t batch) {
  CachedSplit c;
  c.n = frames.size();
  std::vector<std::size_t> order(frames.size());
  std::iota(order.begin(), order.end(), 0);
  torch::NoGradGuard ng;
  net->eval();
  for (const auto& b : batches_of(order, batch)) {
    const auto x = preprocess(gather(frames, b), spec, size);
    c.boundary.push_back(net->backbone()->forward_frozen(x));
    c.labels.push_back(labels_of(entries, b));
  }
  return c;
}

struct SplitScore {
  double loss = 0.0;
  double acc = 0.0;
};

SplitScore score_cached(SpillNet& net, const CachedSplit& c) {
  torch::NoGradGuard ng;
  net->eval();
  double loss = 0.0;
  double correct = 0.0;
  for (std::size_t i = 0; i < c.boundary.size(); ++i) {
    const Tensor logits = net->forward_from_boundary(c.boundary[i]);
    const Tensor& y = c.labels[i];
    loss += torch::binary_cross_entropy_with_logits(logits, y, {}, {}, at::Reduction::Sum).item<double>();
    correct += ((logits >= 0).to(torch::kFloat32) == y).sum().item<double>();
  }
  const auto n = static_cast<double>(c.n);
  return {loss / n, correct / n};
}

/// Tensors of layers that can change during training (the tail and head),
/// cloned so the best epoch can be restored.
std::map<std::string, Tensor> snapshot(const SpillNet& net) {
  std::map<std::string, Tensor> out;
  for (const auto& [name, t] : net->named_tensors()) {
    const std::string layer = layer_of(name);
    if (layer == "head" || !net->backbone()->is_frozen(layer)) out.emplace(name, t.detach().clone());
  }
  return out;
}

void restore(SpillNet& net, const std::map<std::string, Tensor>& saved) {
  torch::NoGradGuard ng;
  for (auto& [name, t] : net->named_tensors()) {
    if (auto it = saved.find(name); it != saved.end()) t.copy_(it->second);
  }
}

bool is_oom(const std::string& what) {
  return what.find("out of memory") != std::string::npos || what.find("can't allocate") != std::string::npos ||
         what.find("Cannot allocate") != std::string::npos;
}

[[noreturn]] void throw_oom(const TrainConfig& cfg, const std::string& what) {
  throw Error(Errc::out_of_memory, "training ran out of memory with batch_train=" + std::to_string(cfg.batch_train) +
                                       " (retry with --batch-train " +
                                       std::to_string(std::max<std::size_t>(1, cfg.batch_train / 2)) + "): " + what);
}

}  // namespace

TrainResult train(const TrainConfig& cfg, const DatasetManifest& manifest, const fs::path& out_dir,
                  const TrainHooks& hooks) {
  check_train_config(cfg);
  const BackboneSpec spec = find_backbone(cfg.backbone);
  const Size size = cfg.input.value_or(spec.native_input);
  const DatasetManifest subset = select_subset(manifest, cfg.subset);
  const auto train_entries = entries_in(subset, Split::train);
  const auto val_entries = entries_in(subset, Split::val);
  if (train_entries.empty()) throw Error(Errc::empty_split, "the train split of the selected subset is empty");
  if (val_entries.empty()) throw Error(Errc::empty_split, "the val split of the selected subset is empty");

  SpillNet net = build_classifier(spec, cfg.trainable_tail_layers, cfg.seed, cfg.weights_store);
  TrainResult result;
  result.freeze = net->freeze_report();
  torch::manual_seed(cfg.seed);

  const auto train_frames = load_frames(subset, train_entries);
  const auto val_frames = load_frames(subset, val_entries);

  std::vector<Tensor> trainable;
  for (const auto& p : net->parameters()) {
    if (p.requires_grad()) trainable.push_back(p);
  }
  torch::optim::RMSprop opt(trainable,
                            torch::optim::RMSpropOptions(cfg.learning_rate).alpha(kRmsRho).eps(kRmsEps));

  TrainHistory& history = result.history;
  try {
    const CachedSplit val = cache_split(net, spec, size, val_frames, val_entries, cfg.batch_val);
    EarlyStopState stop;
    std::map<std::string, Tensor> best = snapshot(net);
    Rng aug_rng(cfg.seed, fnv1a("augment"));

    for (int epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
      std::vector<std::size_t> order(train_frames.size());
      std::iota(order.begin(), order.end(), 0);
      Rng shuffle(cfg.seed, derive_seed(fnv1a("shuffle"), static_cast<std::uint64_t>(epoch)));
      for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[shuffle.below(i)]);

      net->train();
      double loss_sum = 0.0;
      double correct = 0.0;
      for (const auto& b : batches_of(order, cfg.batch_train)) {
        std::vector<Frame> frames;
        frames.reserve(b.size());
        for (std::size_t i : b) frames.push_back(augment(train_frames[i], cfg.aug, aug_rng));
        const Tensor x = preprocess(frames, spec, size);
        const Tensor y = labels_of(train_entries, b);
        std::vector<Tensor> boundary;
        {
          torch::NoGradGuard ng;
          boundary = net->backbone()->forward_frozen(x);
        }
        const Tensor logits = net->forward_from_boundary(boundary);
        const Tensor loss = torch::binary_cross_entropy_with_logits(logits, y);
        opt.zero_grad();
        if (loss.requires_grad()) {
          loss.backward();
          opt.step();
        }
        loss_sum += loss.item<double>() * static_cast<double>(b.size());
        correct += ((logits.detach() >= 0).to(torch::kFloat32) == y).sum().item<double>();
      }

      const SplitScore vs = score_cached(net, val);
      EpochRecord rec;
      rec.epoch = epoch;
      rec.train_loss = loss_sum / static_cast<double>(train_frames.size());
      rec.train_acc = correct / static_cast<double>(train_frames.size());
      rec.val_loss = hooks.val_loss ? hooks.val_loss(epoch, vs.loss) : vs.loss;
      rec.val_acc = vs.acc;
      history.epochs.push_back(rec);
      history.stopped_epoch = epoch;
      if (hooks.on_epoch) hooks.on_epoch(rec);

      const EarlyStopStep step = early_stop_update(stop, epoch, rec.val_loss, cfg.patience);
      if (step.state.best_epoch == epoch) best = snapshot(net);
      stop = step.state;
      if (step.decision == StopDecision::stop) {
        history.early_stopped = true;
        history.diagnostic = step.diagnostic;
        break;
      }
    }
    history.restored_epoch = stop.best_epoch;
    if (stop.best_epoch > 0) restore(net, best);
    const SplitScore final_val = score_cached(net, val);
    result.final_val_acc = final_val.acc;
    result.final_val_loss = final_val.loss;
  } catch (const c10::Error& e) {
    if (is_oom(e.what())) throw_oom(cfg, e.what());
    throw;
  } catch (const std::bad_alloc& e) {
    throw_oom(cfg, e.what());
  }

  TrainedModel& model = result.model;
  model.backbone_name = spec.name;
  model.input_shape = size;
  model.trained_on = {cfg.subset.modality, cfg.subset.room, cfg.subset.liquid, manifest_hash(subset), cfg.seed};

  json trained_on{{"modality", to_string(cfg.subset.modality)},
                  {"room", cfg.subset.room ? json(*cfg.subset.room) : json(nullptr)},
                  {"liquid", cfg.subset.liquid ? json(*cfg.subset.liquid) : json(nullptr)},
                  {"manifest_hash", model.trained_on.manifest_hash},
                  {"seed", cfg.seed}};
  const json meta{{"backbone", spec.name},
                  {"input", {size.width, size.height}},
                  {"modality", to_string(cfg.subset.modality)},
                  {"trained_on", trained_on},
                  {"backbone_weights", stored_weights_provenance(spec, cfg.weights_store)}};
  std::error_code ec;
  fs::create_directories(out_dir, ec);
  if (ec) throw Error(Errc::write_failure, "cannot create " + out_dir.string() + ": " + ec.message());
  model.weights_path = out_dir / "model.weights";
  save_weights(model.weights_path, net->named_tensors(), meta);
  model.size_bytes = fs::file_size(model.weights_path);
  write_history_csv(history, out_dir / "history.csv");

  json prov = meta;
  prov["config"] = train_config_json(cfg);
  prov["freeze"] = freeze_report_json(result.freeze);
  prov["stopped_epoch"] = history.stopped_epoch;
  prov["restored_epoch"] = history.restored_epoch;
  prov["early_stopped"] = history.early_stopped;
  if (!history.diagnostic.empty()) prov["diagnostic"] = history.diagnostic;
  prov["final_val_acc"] = result.final_val_acc;
  prov["n_train"] = train_entries.size();
  prov["n_val"] = val_entries.size();
  prov["size_bytes"] = model.size_bytes;
  prov["created_at"] = iso8601_utc();
  std::ofstream out(out_dir / "provenance.json", std::ios::trunc);
  out << prov.dump(2) << "\n";
  if (!out) throw Error(Errc::write_failure, "cannot write " + (out_dir / "provenance.json").string());
  return result;
}

TorchClassifier::TorchClassifier(SpillNet net, BackboneSpec spec, Size input, Modality modality)
    : net_(std::move(net)), spec_(std::move(spec)), input_(input), modality_(modality) {
  net_->eval();
}

std::vector<float> TorchClassifier::predict(std::span<const Frame> frames) {
  if (frames.empty()) return {};
  torch::NoGradGuard ng;
  net_->eval();
  const Tensor p = torch::sigmoid(net_->forward(preprocess(frames, spec_, input_))).reshape({-1}).contiguous();
  return {p.data_ptr<float>(), p.data_ptr<float>() + p.numel()};
}

std::unique_ptr<TorchClassifier> load_classifier(const fs::path& weights_path) {
  WeightsFile wf = load_weights(weights_path);
  auto fail = [&](const std::string& why) {
    return Error(Errc::model_load_failure, weights_path.string() + ": " + why);
  };
  try {
    const json& meta = wf.meta;
    const BackboneSpec spec = find_backbone(meta.at("backbone").get<std::string>());
    const auto input = meta.at("input").get<std::vector<int>>();
    if (input.size() != 2) throw fail("bad input size");
    const auto modality = parse_modality(meta.at("modality").get<std::string>());
    if (!modality) throw fail("unknown modality");
    SpillNet net(BackboneGraph(load_backbone_graph(spec.name)), 0);
    net->load_tensors(wf.by_name());
    return std::make_unique<TorchClassifier>(std::move(net), spec, Size{input[0], input[1]}, *modality);
  } catch (const json::exception& e) {
    throw fail(std::string("not a trained model: ") + e.what());
  } catch (const Error& e) {
    if (e.code() == Errc::model_load_failure) throw;
    throw fail(e.what());
  }
}

}  // namespace spill
