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

#include "spill/backbone.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <functional>
#include <limits>
#include <numeric>
#include <optional>
#include <unordered_map>
#include <unordered_set>

#include <ATen/CPUGeneratorImpl.h>

#include "spill/errors.hpp"

#ifndef SPILL_DATA_DIR
#define SPILL_DATA_DIR "data"
#endif

namespace fs = std::filesystem;
using nlohmann::json;
using torch::Tensor;

namespace spill {

const std::vector<BackboneSpec>& list_backbones() {
  static const std::vector<BackboneSpec> registry = {
      {"VGG19", {224, 224}, "caffe"},
      {"ResNet50", {224, 224}, "caffe"},
      {"ResNet50V2", {224, 224}, "tf"},
      {"EfficientNetB3", {300, 300}, "raw"},
      {"InceptionV3", {299, 299}, "tf"},
      {"InceptionResNetV2", {299, 299}, "tf"},
      {"Xception", {299, 299}, "tf"},
      {"DenseNet121", {224, 224}, "torch"},
      {"NASNetMobile", {224, 224}, "tf"},
      {"EfficientNetV2B3", {300, 300}, "raw"},
      {"ConvNeXtBase", {224, 224}, "raw"},
  };
  return registry;
}

const BackboneSpec& find_backbone(std::string_view name) {
  for (const auto& b : list_backbones()) {
    if (b.name == name) return b;
  }
  throw Error(Errc::unknown_backbone, "'" + std::string(name) + "' is not in the backbone registry");
}

// Graph description

namespace {

LayerSpec parse_layer(const json& j) {
  LayerSpec l;
  l.name = j.at("name").get<std::string>();
  l.cls = j.at("class").get<std::string>();
  if (j.contains("inbound")) l.inbound = j.at("inbound").get<std::vector<std::string>>();
  if (j.contains("config")) l.config = j.at("config");
  if (j.contains("layers")) {
    for (const auto& s : j.at("layers")) l.sublayers.push_back(parse_layer(s));
  }
  l.op = j.value("op", false);
  return l;
}

}  // namespace

GraphSpec parse_graph(const json& j) {
  try {
    GraphSpec g;
    g.name = j.at("name").get<std::string>();
    const auto size = j.at("native_input").get<std::vector<int>>();
    if (size.size() != 2) throw Error(Errc::invalid_argument, "native_input must be [h, w]");
    g.native_input = {size[1], size[0]};
    g.input = j.at("input").get<std::string>();
    g.outputs = j.at("outputs").get<std::vector<std::string>>();
    for (const auto& l : j.at("layers")) g.layers.push_back(parse_layer(l));
    return g;
  } catch (const json::exception& e) {
    throw Error(Errc::invalid_argument, std::string("bad graph description: ") + e.what());
  }
}

GraphSpec load_graph(const fs::path& file) {
  std::ifstream in(file);
  if (!in) throw Error(Errc::missing_file, "cannot open graph description " + file.string());
  try {
    return parse_graph(json::parse(in));
  } catch (const json::parse_error& e) {
    throw Error(Errc::invalid_argument, file.string() + ": " + e.what());
  }
}

fs::path backbone_data_dir() {
  if (const char* env = std::getenv("SPILL_DATA_DIR"); env && *env) return fs::path(env) / "backbones";
  return fs::path(SPILL_DATA_DIR) / "backbones";
}

GraphSpec load_backbone_graph(std::string_view name) {
  const auto& spec = find_backbone(name);
  return load_graph(backbone_data_dir() / (spec.name + ".json"));
}

std::vector<std::string> keras_layer_order(const GraphSpec& g, bool include_ops) {
  std::unordered_map<std::string, const LayerSpec*> by_name;
  for (const auto& l : g.layers) {
    if (!by_name.emplace(l.name, &l).second) throw Error(Errc::invalid_argument, "duplicate layer " + l.name);
  }
  auto layer = [&](const std::string& n) -> const LayerSpec& {
    const auto it = by_name.find(n);
    if (it == by_name.end()) throw Error(Errc::invalid_argument, "dangling reference to layer " + n);
    return *it->second;
  };

  // Post-order DFS from the outputs; traversal index on first visit.
  std::unordered_map<std::string, std::size_t> visit_index;
  std::vector<std::string> post;
  std::unordered_set<std::string> done, active;
  std::function<void(const std::string&)> visit = [&](const std::string& n) {
    if (done.count(n)) return;
    if (active.count(n)) throw Error(Errc::invalid_argument, "cycle through layer " + n);
    visit_index.emplace(n, visit_index.size());
    active.insert(n);
    for (const auto& p : layer(n).inbound) visit(p);
    active.erase(n);
    done.insert(n);
    post.push_back(n);
  };
  for (const auto& o : g.outputs) visit(o);

  // Depth = longest path to an output.
  std::unordered_map<std::string, int> depth;
  for (auto it = post.rbegin(); it != post.rend(); ++it) {
    const int d = depth.emplace(*it, 0).first->second;
    for (const auto& p : layer(*it).inbound) {
      auto [pos, inserted] = depth.emplace(p, d + 1);
      if (!inserted) pos->second = std::max(pos->second, d + 1);
    }
  }
  std::stable_sort(post.begin(), post.end(), [&](const std::string& a, const std::string& b) {
    if (depth.at(a) != depth.at(b)) return depth.at(a) > depth.at(b);
    return visit_index.at(a) < visit_index.at(b);
  });
  if (!include_ops) {
    std::erase_if(post, [&](const std::string& n) { return layer(n).op; });
  }
  return post;
}

// Layer interpreter

namespace detail {

struct Ctx {
  bool training = false;
  bool frozen = false;
  bool calibrating = false;
};

class Layer {
 public:
  virtual ~Layer() = default;
  virtual Tensor forward(std::span<const Tensor> in, const Ctx& ctx) = 0;
  virtual void reset(at::Generator&) {}
  std::int64_t out_channels = 0;
  /// Registered tensors counted as layer weights.
  std::vector<Tensor> weights;
  /// Registered parameters (subset of weights).
  std::vector<Tensor> params;
};

}  // namespace detail

namespace {

using detail::Ctx;
using detail::Layer;

/// Registers tensors on the owning module under "<layer>/<weight>".
struct Registrar {
  torch::nn::Module& module;
  Layer& layer;
  std::string prefix;

  Tensor param(const std::string& what, std::vector<std::int64_t> shape) {
    auto t = module.register_parameter(prefix + "/" + what, torch::zeros(shape));
    layer.weights.push_back(t);
    layer.params.push_back(t);
    return t;
  }
  Tensor buffer(const std::string& what, std::vector<std::int64_t> shape) {
    auto t = module.register_buffer(prefix + "/" + what, torch::zeros(shape));
    layer.weights.push_back(t);
    return t;
  }
};

std::pair<int, int> pair_of(const json& v) {
  if (v.is_number_integer()) return {v.get<int>(), v.get<int>()};
  const auto a = v.get<std::vector<int>>();
  if (a.size() != 2) throw Error(Errc::invalid_argument, "expected a pair, got " + v.dump());
  return {a[0], a[1]};
}

void require_channel_axis(const json& axis) {
  int a = 0;
  if (axis.is_array()) {
    if (axis.size() != 1) throw Error(Errc::invalid_argument, "only single-axis normalization is supported");
    a = axis[0].get<int>();
  } else {
    a = axis.get<int>();
  }
  if (a != -1 && a != 3) throw Error(Errc::invalid_argument, "only channel-axis normalization is supported");
}

Tensor activate(const Tensor& x, const std::string& kind) {
  if (kind == "linear") return x;
  if (kind == "relu") return torch::relu(x);
  if (kind == "silu" || kind == "swish") return torch::silu(x);
  if (kind == "sigmoid") return torch::sigmoid(x);
  if (kind == "gelu") return torch::gelu(x);
  if (kind == "tanh") return torch::tanh(x);
  throw Error(Errc::invalid_argument, "unsupported activation '" + kind + "'");
}

void check_activation(const std::string& kind) { activate(torch::zeros({1}), kind); }

/// Before/after padding per spatial axis for TF "same" padding.
struct SamePad {
  std::int64_t top = 0, bottom = 0, left = 0, right = 0;
  bool symmetric() const noexcept { return top == bottom && left == right; }
  bool none() const noexcept { return top == 0 && bottom == 0 && left == 0 && right == 0; }
};

std::pair<std::int64_t, std::int64_t> same_axis(std::int64_t n, std::int64_t k, std::int64_t s) {
  const std::int64_t out = (n + s - 1) / s;
  const std::int64_t total = std::max<std::int64_t>((out - 1) * s + k - n, 0);
  return {total / 2, total - total / 2};
}

SamePad same_pad(const Tensor& x, std::pair<int, int> k, std::pair<int, int> s) {
  SamePad p;
  std::tie(p.top, p.bottom) = same_axis(x.size(2), k.first, s.first);
  std::tie(p.left, p.right) = same_axis(x.size(3), k.second, s.second);
  return p;
}

Tensor pad(const Tensor& x, const SamePad& p, double value = 0.0) {
  if (p.none()) return x;
  return torch::constant_pad_nd(x, {p.left, p.right, p.top, p.bottom}, value);
}

/// Normal draws with the given std from a seeded generator.
void fill_normal(Tensor& t, double stddev, at::Generator& gen) {
  torch::NoGradGuard ng;
  t.normal_(0.0, stddev, gen);
}

void fill(Tensor& t, double v) {
  torch::NoGradGuard ng;
  t.fill_(v);
}

double unit_std_scale(const Tensor& y) {
  const double s = y.std().item<double>();
  return (std::isfinite(s) && s > 1e-8) ? 1.0 / s : 1.0;
}

struct ConvGeometry {
  std::pair<int, int> kernel{1, 1};
  std::pair<int, int> strides{1, 1};
  bool same = false;

  explicit ConvGeometry(const json& c) {
    kernel = pair_of(c.at("kernel_size"));
    strides = pair_of(c.value("strides", json::array({1, 1})));
    const auto padding = c.value("padding", std::string("valid"));
    if (padding != "same" && padding != "valid") throw Error(Errc::invalid_argument, "padding " + padding);
    same = padding == "same";
    if (c.contains("dilation_rate") && pair_of(c.at("dilation_rate")) != std::pair{1, 1}) {
      throw Error(Errc::invalid_argument, "dilated convolutions are not supported");
    }
  }

  Tensor conv(const Tensor& x, const Tensor& w, const Tensor& b, std::int64_t groups) const {
    const std::vector<std::int64_t> stride{strides.first, strides.second}, unit{1, 1}, zero{0, 0};
    if (!same) return torch::conv2d(x, w, b, stride, zero, unit, groups);
    const auto p = same_pad(x, kernel, strides);
    if (p.symmetric()) return torch::conv2d(x, w, b, stride, std::vector<std::int64_t>{p.top, p.left}, unit, groups);
    return torch::conv2d(pad(x, p), w, b, stride, zero, unit, groups);
  }
};

class InputLayer final : public Layer {
 public:
  Tensor forward(std::span<const Tensor> in, const Ctx&) override { return in[0]; }
};

class Conv2D final : public Layer {
 public:
  Conv2D(Registrar r, const json& c, std::int64_t in_ch) : geo_(c), act_(c.value("activation", "linear")) {
    check_activation(act_);
    groups_ = c.value("groups", 1);
    const auto filters = c.at("filters").get<std::int64_t>();
    if (groups_ < 1 || in_ch % groups_ != 0) throw Error(Errc::invalid_argument, "bad conv groups");
    kernel_ = r.param("kernel", {filters, in_ch / groups_, geo_.kernel.first, geo_.kernel.second});
    if (c.value("use_bias", true)) bias_ = r.param("bias", {filters});
    out_channels = filters;
  }
  Tensor forward(std::span<const Tensor> in, const Ctx& ctx) override {
    if (ctx.calibrating) {
      const Tensor y = geo_.conv(in[0], kernel_, {}, groups_);
      torch::NoGradGuard ng;
      kernel_.mul_(unit_std_scale(y));
      if (bias_.defined()) bias_.zero_();
    }
    return activate(geo_.conv(in[0], kernel_, bias_, groups_), act_);
  }
  void reset(at::Generator& gen) override {
    // He-normal, fan_out = filters * kh * kw
    const double fan_out = static_cast<double>(kernel_.size(0) * kernel_.size(2) * kernel_.size(3));
    fill_normal(kernel_, std::sqrt(2.0 / fan_out), gen);
    if (bias_.defined()) fill(bias_, 0.0);
  }

 private:
  ConvGeometry geo_;
  std::string act_;
  std::int64_t groups_ = 1;
  Tensor kernel_, bias_;
};

class DepthwiseConv2D final : public Layer {
 public:
  DepthwiseConv2D(Registrar r, const json& c, std::int64_t in_ch) : geo_(c), act_(c.value("activation", "linear")) {
    check_activation(act_);
    mult_ = c.value("depth_multiplier", 1);
    channels_ = in_ch;
    kernel_ = r.param("depthwise_kernel", {in_ch * mult_, 1, geo_.kernel.first, geo_.kernel.second});
    if (c.value("use_bias", true)) bias_ = r.param("bias", {in_ch * mult_});
    out_channels = in_ch * mult_;
  }
  Tensor forward(std::span<const Tensor> in, const Ctx& ctx) override {
    if (ctx.calibrating) {
      const Tensor y = geo_.conv(in[0], kernel_, {}, channels_);
      torch::NoGradGuard ng;
      kernel_.mul_(unit_std_scale(y));
      if (bias_.defined()) bias_.zero_();
    }
    return activate(geo_.conv(in[0], kernel_, bias_, channels_), act_);
  }
  void reset(at::Generator& gen) override {
    const double fan_out = static_cast<double>(mult_ * kernel_.size(2) * kernel_.size(3));
    fill_normal(kernel_, std::sqrt(2.0 / fan_out), gen);
    if (bias_.defined()) fill(bias_, 0.0);
  }

 private:
  ConvGeometry geo_;
  std::string act_;
  std::int64_t mult_ = 1;
  std::int64_t channels_ = 0;
  Tensor kernel_, bias_;
};

class SeparableConv2D final : public Layer {
 public:
  SeparableConv2D(Registrar r, const json& c, std::int64_t in_ch) : geo_(c), act_(c.value("activation", "linear")) {
    check_activation(act_);
    mult_ = c.value("depth_multiplier", 1);
    channels_ = in_ch;
    const auto filters = c.at("filters").get<std::int64_t>();
    depthwise_ = r.param("depthwise_kernel", {in_ch * mult_, 1, geo_.kernel.first, geo_.kernel.second});
    pointwise_ = r.param("pointwise_kernel", {filters, in_ch * mult_, 1, 1});
    if (c.value("use_bias", true)) bias_ = r.param("bias", {filters});
    out_channels = filters;
  }
  Tensor forward(std::span<const Tensor> in, const Ctx& ctx) override {
    if (ctx.calibrating) {
      const Tensor d = geo_.conv(in[0], depthwise_, {}, channels_);
      torch::NoGradGuard ng;
      depthwise_.mul_(unit_std_scale(d));
      const Tensor y = torch::conv2d(d * unit_std_scale(d), pointwise_);
      pointwise_.mul_(unit_std_scale(y));
      if (bias_.defined()) bias_.zero_();
    }
    const Tensor d = geo_.conv(in[0], depthwise_, {}, channels_);
    return activate(torch::conv2d(d, pointwise_, bias_), act_);
  }
  void reset(at::Generator& gen) override {
    fill_normal(depthwise_, std::sqrt(2.0 / static_cast<double>(mult_ * depthwise_.size(2) * depthwise_.size(3))), gen);
    fill_normal(pointwise_, std::sqrt(2.0 / static_cast<double>(pointwise_.size(0))), gen);
    if (bias_.defined()) fill(bias_, 0.0);
  }

 private:
  ConvGeometry geo_;
  std::string act_;
  std::int64_t mult_ = 1;
  std::int64_t channels_ = 0;
  Tensor depthwise_, pointwise_, bias_;
};

class Dense final : public Layer {
 public:
  Dense(Registrar r, const json& c, std::int64_t in_ch) : act_(c.value("activation", "linear")) {
    check_activation(act_);
    const auto units = c.at("units").get<std::int64_t>();
    kernel_ = r.param("kernel", {units, in_ch});
    if (c.value("use_bias", true)) bias_ = r.param("bias", {units});
    out_channels = units;
  }
  Tensor forward(std::span<const Tensor> in, const Ctx& ctx) override {
    if (ctx.calibrating) {
      const Tensor y = apply(in[0], {});
      torch::NoGradGuard ng;
      kernel_.mul_(unit_std_scale(y));
      if (bias_.defined()) bias_.zero_();
    }
    return activate(apply(in[0], bias_), act_);
  }
  void reset(at::Generator& gen) override {
    // Glorot normal
    fill_normal(kernel_, std::sqrt(2.0 / static_cast<double>(kernel_.size(0) + kernel_.size(1))), gen);
    if (bias_.defined()) fill(bias_, 0.0);
  }

 private:
  // Acts on the channel axis of NCHW input, or on the features of [N, C].
  Tensor apply(const Tensor& x, const Tensor& b) const {
    if (x.dim() == 4) return torch::conv2d(x, kernel_.view({kernel_.size(0), kernel_.size(1), 1, 1}), b);
    return torch::linear(x, kernel_, b);
  }
  std::string act_;
  Tensor kernel_, bias_;
};

class BatchNorm final : public Layer {
 public:
  BatchNorm(Registrar r, const json& c, std::int64_t in_ch) {
    require_channel_axis(c.value("axis", json(-1)));
    eps_ = c.value("epsilon", 1e-3);
    momentum_ = c.value("momentum", 0.99);
    if (c.value("scale", true)) gamma_ = r.param("gamma", {in_ch});
    if (c.value("center", true)) beta_ = r.param("beta", {in_ch});
    mean_ = r.buffer("moving_mean", {in_ch});
    var_ = r.buffer("moving_variance", {in_ch});
    fill(var_, 1.0);
    out_channels = in_ch;
  }
  Tensor forward(std::span<const Tensor> in, const Ctx& ctx) override {
    const Tensor& x = in[0];
    if (ctx.calibrating) {
      torch::NoGradGuard ng;
      mean_.copy_(x.mean({0, 2, 3}));
      var_.copy_(x.var({0, 2, 3}, /*unbiased=*/false));
    }
    if (!ctx.training || ctx.frozen || ctx.calibrating) {
      return torch::batch_norm(x, gamma_, beta_, mean_, var_, false, 0.0, eps_, false);
    }
    const Tensor m = x.mean({0, 2, 3});
    const Tensor v = x.var({0, 2, 3}, /*unbiased=*/false);
    {
      torch::NoGradGuard ng;
      mean_.mul_(momentum_).add_(m.detach() * (1.0 - momentum_));
      var_.mul_(momentum_).add_(v.detach() * (1.0 - momentum_));
    }
    Tensor y = (x - m.view({1, -1, 1, 1})) * torch::rsqrt(v.view({1, -1, 1, 1}) + eps_);
    if (gamma_.defined()) y = y * gamma_.view({1, -1, 1, 1});
    if (beta_.defined()) y = y + beta_.view({1, -1, 1, 1});
    return y;
  }
  void reset(at::Generator&) override {
    if (gamma_.defined()) fill(gamma_, 1.0);
    if (beta_.defined()) fill(beta_, 0.0);
    fill(mean_, 0.0);
    fill(var_, 1.0);
  }

 private:
  double eps_ = 1e-3;
  double momentum_ = 0.99;
  Tensor gamma_, beta_, mean_, var_;
};

class LayerNorm final : public Layer {
 public:
  LayerNorm(Registrar r, const json& c, std::int64_t in_ch) : channels_(in_ch) {
    require_channel_axis(c.value("axis", json(-1)));
    if (c.value("rms_scaling", false)) throw Error(Errc::invalid_argument, "rms_scaling is not supported");
    eps_ = c.value("epsilon", 1e-3);
    if (c.value("scale", true)) gamma_ = r.param("gamma", {in_ch});
    if (c.value("center", true)) beta_ = r.param("beta", {in_ch});
    out_channels = in_ch;
  }
  Tensor forward(std::span<const Tensor> in, const Ctx&) override {
    const Tensor& x = in[0];
    if (x.dim() == 2) return torch::layer_norm(x, {channels_}, gamma_, beta_, eps_);
    return torch::layer_norm(x.permute({0, 2, 3, 1}), {channels_}, gamma_, beta_, eps_).permute({0, 3, 1, 2});
  }
  void reset(at::Generator&) override {
    if (gamma_.defined()) fill(gamma_, 1.0);
    if (beta_.defined()) fill(beta_, 0.0);
  }

 private:
  std::int64_t channels_;
  double eps_ = 1e-3;
  Tensor gamma_, beta_;
};

/// Per-channel (x - mean) / sqrt(variance). Constants given in the config
/// are not weights; otherwise mean, variance and count are stored weights.
class Normalization final : public Layer {
 public:
  Normalization(Registrar r, const json& c, std::int64_t in_ch) {
    require_channel_axis(c.value("axis", json(-1)));
    if (c.value("invert", false)) throw Error(Errc::invalid_argument, "inverted normalization is not supported");
    const json& m = c.value("mean", json(nullptr));
    const json& v = c.value("variance", json(nullptr));
    if (m.is_null() != v.is_null()) throw Error(Errc::invalid_argument, "normalization needs both mean and variance");
    if (m.is_null()) {
      mean_ = r.buffer("mean", {in_ch});
      var_ = r.buffer("variance", {in_ch});
      count_ = r.buffer("count", {});
      fill(var_, 1.0);
    } else {
      mean_ = torch::tensor(m.get<std::vector<float>>());
      var_ = torch::tensor(v.get<std::vector<float>>());
      if (mean_.numel() != in_ch || var_.numel() != in_ch) throw Error(Errc::invalid_argument, "normalization size");
    }
    out_channels = in_ch;
  }
  Tensor forward(std::span<const Tensor> in, const Ctx&) override {
    const Tensor sd = torch::clamp_min(torch::sqrt(var_), 1e-7).view({1, -1, 1, 1});
    return (in[0] - mean_.view({1, -1, 1, 1})) / sd;
  }
  void reset(at::Generator&) override {
    if (!count_.defined()) return;
    // Surrogate statistics: ImageNet RGB moments in [0, 1] units, matching
    // the rescaling that precedes this layer in the registry backbones.
    torch::NoGradGuard ng;
    if (mean_.numel() == 3) {
      mean_.copy_(torch::tensor({0.485f, 0.456f, 0.406f}));
      var_.copy_(torch::tensor({0.229f * 0.229f, 0.224f * 0.224f, 0.225f * 0.225f}));
    } else {
      mean_.zero_();
      var_.fill_(1.0);
    }
    count_.zero_();
  }

 private:
  Tensor mean_, var_, count_;
};

class Activation final : public Layer {
 public:
  Activation(const json& c, std::int64_t in_ch) : act_(c.at("activation").get<std::string>()) {
    check_activation(act_);
    out_channels = in_ch;
  }
  Tensor forward(std::span<const Tensor> in, const Ctx&) override { return activate(in[0], act_); }

 private:
  std::string act_;
};

class Pool2D final : public Layer {
 public:
  Pool2D(const json& c, std::int64_t in_ch, bool max) : max_(max) {
    pool_ = pair_of(c.at("pool_size"));
    strides_ = c.contains("strides") && !c.at("strides").is_null() ? pair_of(c.at("strides")) : pool_;
    const auto padding = c.value("padding", std::string("valid"));
    if (padding != "same" && padding != "valid") throw Error(Errc::invalid_argument, "padding " + padding);
    same_ = padding == "same";
    out_channels = in_ch;
  }
  Tensor forward(std::span<const Tensor> in, const Ctx&) override {
    const std::vector<std::int64_t> k{pool_.first, pool_.second}, s{strides_.first, strides_.second};
    Tensor x = in[0];
    if (max_) {
      if (same_) x = pad(x, same_pad(x, pool_, strides_), -std::numeric_limits<double>::infinity());
      return torch::max_pool2d(x, k, s);
    }
    if (!same_) return torch::avg_pool2d(x, k, s);
    const auto p = same_pad(x, pool_, strides_);
    if (p.none()) return torch::avg_pool2d(x, k, s);
    // Padding is excluded from the average.
    const Tensor sum = torch::avg_pool2d(pad(x, p), k, s, {0, 0}, false, true, 1);
    const Tensor ones = torch::ones({1, 1, x.size(2), x.size(3)}, x.options());
    const Tensor count = torch::avg_pool2d(pad(ones, p), k, s, {0, 0}, false, true, 1);
    return sum / count;
  }

 private:
  bool max_;
  bool same_ = false;
  std::pair<int, int> pool_{2, 2};
  std::pair<int, int> strides_{2, 2};
};

class GlobalAveragePooling final : public Layer {
 public:
  GlobalAveragePooling(const json& c, std::int64_t in_ch) : keepdims_(c.value("keepdims", false)) {
    out_channels = in_ch;
  }
  Tensor forward(std::span<const Tensor> in, const Ctx&) override { return in[0].mean({2, 3}, keepdims_); }

 private:
  bool keepdims_;
};

class ZeroPadding final : public Layer {
 public:
  ZeroPadding(const json& c, std::int64_t in_ch) {
    const auto p = c.at("padding");
    if (p.is_array() && p.size() == 2 && p[0].is_array()) {
      pad_ = {p[0][0].get<int>(), p[0][1].get<int>(), p[1][0].get<int>(), p[1][1].get<int>()};
    } else {
      const auto [h, w] = pair_of(p);
      pad_ = {h, h, w, w};
    }
    out_channels = in_ch;
  }
  Tensor forward(std::span<const Tensor> in, const Ctx&) override { return pad(in[0], pad_); }

 private:
  SamePad pad_;
};

class Cropping final : public Layer {
 public:
  Cropping(const json& c, std::int64_t in_ch) {
    const auto p = c.at("cropping");
    top_ = p[0][0].get<int>();
    bottom_ = p[0][1].get<int>();
    left_ = p[1][0].get<int>();
    right_ = p[1][1].get<int>();
    out_channels = in_ch;
  }
  Tensor forward(std::span<const Tensor> in, const Ctx&) override {
    const Tensor& x = in[0];
    return x.slice(2, top_, x.size(2) - bottom_).slice(3, left_, x.size(3) - right_);
  }

 private:
  std::int64_t top_ = 0, bottom_ = 0, left_ = 0, right_ = 0;
};

class Merge final : public Layer {
 public:
  enum class Kind { add, multiply, concat };
  Merge(Kind kind, const json& c, std::span<const std::int64_t> in_ch) : kind_(kind) {
    if (in_ch.empty()) throw Error(Errc::invalid_argument, "merge layer without inputs");
    if (kind == Kind::concat) {
      const int axis = c.value("axis", -1);
      if (axis != -1 && axis != 3) throw Error(Errc::invalid_argument, "only channel concatenation is supported");
      out_channels = std::accumulate(in_ch.begin(), in_ch.end(), std::int64_t{0});
    } else {
      out_channels = *std::max_element(in_ch.begin(), in_ch.end());
    }
  }
  Tensor forward(std::span<const Tensor> in, const Ctx&) override {
    if (kind_ == Kind::concat) return torch::cat(std::vector<Tensor>(in.begin(), in.end()), 1);
    Tensor y = in[0];
    for (std::size_t i = 1; i < in.size(); ++i) y = kind_ == Kind::add ? y + in[i] : y * in[i];
    return y;
  }

 private:
  Kind kind_;
};

class Dropout final : public Layer {
 public:
  Dropout(const json& c, std::int64_t in_ch) : rate_(c.at("rate").get<double>()) {
    const json& ns = c.value("noise_shape", json(nullptr));
    per_sample_ = !ns.is_null();
    if (per_sample_ && ns != json::array({nullptr, 1, 1, 1})) {
      throw Error(Errc::invalid_argument, "unsupported dropout noise shape " + ns.dump());
    }
    out_channels = in_ch;
  }
  // Active whenever the model trains, frozen or not.
  Tensor forward(std::span<const Tensor> in, const Ctx& ctx) override {
    const Tensor& x = in[0];
    if (!ctx.training || ctx.calibrating || rate_ <= 0.0) return x;
    const auto shape = per_sample_ ? std::vector<std::int64_t>{x.size(0), 1, 1, 1} : x.sizes().vec();
    const Tensor keep = torch::bernoulli(torch::full(shape, 1.0 - rate_, x.options()));
    return x * keep / (1.0 - rate_);
  }

 private:
  double rate_;
  bool per_sample_ = false;
};

class Reshape final : public Layer {
 public:
  Reshape(const json& c, std::int64_t in_ch) {
    const auto t = c.at("target_shape").get<std::vector<std::int64_t>>();
    if (t.size() != 3 || t[0] != 1 || t[1] != 1 || t[2] != in_ch) {
      throw Error(Errc::invalid_argument, "only [N, C] -> [N, 1, 1, C] reshapes are supported");
    }
    out_channels = in_ch;
  }
  Tensor forward(std::span<const Tensor> in, const Ctx&) override {
    return in[0].reshape({in[0].size(0), out_channels, 1, 1});
  }
};

class Rescaling final : public Layer {
 public:
  Rescaling(const json& c, std::int64_t in_ch) {
    const json& s = c.at("scale");
    scale_ = s.is_array() ? torch::tensor(s.get<std::vector<float>>()) : torch::tensor({s.get<float>()});
    offset_ = c.value("offset", 0.0);
    out_channels = in_ch;
  }
  Tensor forward(std::span<const Tensor> in, const Ctx&) override {
    const Tensor s = scale_.numel() == 1 ? scale_ : scale_.view({1, -1, 1, 1});
    return in[0] * s + offset_;
  }

 private:
  Tensor scale_;
  double offset_ = 0.0;
};

class LayerScale final : public Layer {
 public:
  LayerScale(Registrar r, const json& c, std::int64_t in_ch) : init_(c.value("init_values", 1e-6)) {
    const auto dim = c.value("projection_dim", in_ch);
    if (dim != in_ch) throw Error(Errc::invalid_argument, "layer scale width mismatch");
    gamma_ = r.param("gamma", {in_ch});
    out_channels = in_ch;
  }
  Tensor forward(std::span<const Tensor> in, const Ctx&) override { return in[0] * gamma_.view({1, -1, 1, 1}); }
  void reset(at::Generator&) override { fill(gamma_, init_); }

 private:
  double init_;
  Tensor gamma_;
};

/// x0 + x1 * scale (residual scaling in Inception-ResNet blocks).
class CustomScale final : public Layer {
 public:
  CustomScale(const json& c, std::span<const std::int64_t> in_ch) : scale_(c.at("scale").get<double>()) {
    if (in_ch.size() != 2) throw Error(Errc::invalid_argument, "scale layer takes two inputs");
    out_channels = in_ch[0];
  }
  Tensor forward(std::span<const Tensor> in, const Ctx&) override { return in[0] + in[1] * scale_; }

 private:
  double scale_;
};

std::unique_ptr<Layer> make_layer(torch::nn::Module& owner, const LayerSpec& spec, std::span<const std::int64_t> in_ch,
                                  const std::string& prefix);

class SequentialLayer final : public Layer {
 public:
  SequentialLayer(torch::nn::Module& owner, const LayerSpec& spec, std::int64_t in_ch) {
    std::int64_t ch = in_ch;
    for (const auto& s : spec.sublayers) {
      auto l = make_layer(owner, s, std::span<const std::int64_t>(&ch, 1), spec.name + "/" + s.name);
      ch = l->out_channels;
      weights.insert(weights.end(), l->weights.begin(), l->weights.end());
      params.insert(params.end(), l->params.begin(), l->params.end());
      chain_.push_back(std::move(l));
    }
    out_channels = ch;
  }
  Tensor forward(std::span<const Tensor> in, const Ctx& ctx) override {
    Tensor x = in[0];
    for (auto& l : chain_) x = l->forward(std::span<const Tensor>(&x, 1), ctx);
    return x;
  }
  void reset(at::Generator& gen) override {
    for (auto& l : chain_) l->reset(gen);
  }

 private:
  std::vector<std::unique_ptr<Layer>> chain_;
};

// Weights register as "<prefix>/<weight>"; Sequential members nest under
// their container so the first path component is always a model layer.
std::unique_ptr<Layer> make_layer(torch::nn::Module& owner, const LayerSpec& spec, std::span<const std::int64_t> in_ch,
                                  const std::string& prefix) {
  const auto& c = spec.config;
  const auto& k = spec.cls;
  auto one = [&]() -> std::int64_t {
    if (in_ch.size() != 1) throw Error(Errc::invalid_argument, spec.name + " expects exactly one input");
    return in_ch[0];
  };
  std::unique_ptr<Layer> l;
  // Registrar needs the layer object first; two-phase for weighted layers.
  auto weighted = [&](auto make) {
    struct Holder final : public Layer {
      Tensor forward(std::span<const Tensor>, const Ctx&) override { return {}; }
    } scratch;
    Registrar r{owner, scratch, prefix};
    auto made = make(r);
    made->weights = std::move(scratch.weights);
    made->params = std::move(scratch.params);
    return made;
  };
  try {
    if (k == "InputLayer") {
      l = std::make_unique<InputLayer>();
      l->out_channels = 3;
    } else if (k == "Conv2D") {
      l = weighted([&](Registrar& r) { return std::make_unique<Conv2D>(r, c, one()); });
    } else if (k == "DepthwiseConv2D") {
      l = weighted([&](Registrar& r) { return std::make_unique<DepthwiseConv2D>(r, c, one()); });
    } else if (k == "SeparableConv2D") {
      l = weighted([&](Registrar& r) { return std::make_unique<SeparableConv2D>(r, c, one()); });
    } else if (k == "Dense") {
      l = weighted([&](Registrar& r) { return std::make_unique<Dense>(r, c, one()); });
    } else if (k == "BatchNormalization") {
      l = weighted([&](Registrar& r) { return std::make_unique<BatchNorm>(r, c, one()); });
    } else if (k == "LayerNormalization") {
      l = weighted([&](Registrar& r) { return std::make_unique<LayerNorm>(r, c, one()); });
    } else if (k == "Normalization") {
      l = weighted([&](Registrar& r) { return std::make_unique<Normalization>(r, c, one()); });
    } else if (k == "LayerScale") {
      l = weighted([&](Registrar& r) { return std::make_unique<LayerScale>(r, c, one()); });
    } else if (k == "Activation") {
      l = std::make_unique<Activation>(c, one());
    } else if (k == "MaxPooling2D" || k == "AveragePooling2D") {
      l = std::make_unique<Pool2D>(c, one(), k == "MaxPooling2D");
    } else if (k == "GlobalAveragePooling2D") {
      l = std::make_unique<GlobalAveragePooling>(c, one());
    } else if (k == "ZeroPadding2D") {
      l = std::make_unique<ZeroPadding>(c, one());
    } else if (k == "Cropping2D") {
      l = std::make_unique<Cropping>(c, one());
    } else if (k == "Add") {
      l = std::make_unique<Merge>(Merge::Kind::add, c, in_ch);
    } else if (k == "Multiply") {
      l = std::make_unique<Merge>(Merge::Kind::multiply, c, in_ch);
    } else if (k == "Concatenate") {
      l = std::make_unique<Merge>(Merge::Kind::concat, c, in_ch);
    } else if (k == "Dropout") {
      l = std::make_unique<Dropout>(c, one());
    } else if (k == "Reshape") {
      l = std::make_unique<Reshape>(c, one());
    } else if (k == "Rescaling") {
      l = std::make_unique<Rescaling>(c, one());
    } else if (k == "CustomScaleLayer") {
      l = std::make_unique<CustomScale>(c, in_ch);
    } else if (k == "Sequential") {
      l = std::make_unique<SequentialLayer>(owner, spec, one());
    } else {
      throw Error(Errc::invalid_argument, "unsupported layer class " + k);
    }
  } catch (const json::exception& e) {
    throw Error(Errc::invalid_argument, spec.name + ": bad config: " + e.what());
  }
  return l;
}

}  // namespace

struct BackboneGraphImpl::Node {
  std::string name;
  bool op = false;
  std::unique_ptr<detail::Layer> layer;
  std::vector<int> inputs;
  bool frozen = false;     // layer weights frozen
  bool in_prefix = false;  // computable from frozen layers only
};

BackboneGraphImpl::BackboneGraphImpl(const GraphSpec& spec) : name_(spec.name) {
  if (spec.outputs.size() != 1) throw Error(Errc::invalid_argument, "backbone must have exactly one output");
  const auto order = keras_layer_order(spec, /*include_ops=*/true);
  std::unordered_map<std::string, const LayerSpec*> by_name;
  for (const auto& l : spec.layers) by_name.emplace(l.name, &l);
  std::unordered_map<std::string, int> index;
  std::vector<std::int64_t> channels;
  nodes_.reserve(order.size());
  for (const auto& n : order) {
    const LayerSpec& ls = *by_name.at(n);
    Node node;
    node.name = n;
    node.op = ls.op;
    std::vector<std::int64_t> in_ch;
    for (const auto& p : ls.inbound) {
      node.inputs.push_back(index.at(p));
      in_ch.push_back(channels[static_cast<std::size_t>(index.at(p))]);
    }
    if (ls.cls == "InputLayer") {
      if (n != spec.input) throw Error(Errc::invalid_argument, "unexpected input layer " + n);
      input_node_ = static_cast<int>(nodes_.size());
    } else if (ls.inbound.empty()) {
      throw Error(Errc::invalid_argument, "layer " + n + " has no inputs");
    }
    node.layer = make_layer(*this, ls, in_ch, ls.name);
    channels.push_back(node.layer->out_channels);
    index.emplace(n, static_cast<int>(nodes_.size()));
    if (!ls.op) layer_order_.push_back(n);
    nodes_.push_back(std::move(node));
  }
  output_node_ = index.at(spec.outputs[0]);
  freeze_all_but_last(static_cast<int>(layer_order_.size()));
}

BackboneGraphImpl::~BackboneGraphImpl() = default;

std::int64_t BackboneGraphImpl::output_channels() const noexcept {
  return nodes_[static_cast<std::size_t>(output_node_)].layer->out_channels;
}

std::int64_t BackboneGraphImpl::layer_param_count(std::string_view layer) const {
  for (const auto& n : nodes_) {
    if (n.name != layer) continue;
    std::int64_t total = 0;
    for (const auto& t : n.layer->weights) total += t.numel();
    return total;
  }
  throw Error(Errc::invalid_argument, "no layer named " + std::string(layer));
}

std::int64_t BackboneGraphImpl::count_params() const {
  std::int64_t total = 0;
  for (const auto& n : nodes_) {
    for (const auto& t : n.layer->weights) total += t.numel();
  }
  return total;
}

void BackboneGraphImpl::freeze_all_but_last(int n) {
  const int total = static_cast<int>(layer_order_.size());
  if (n < 0 || n > total) {
    throw Error(Errc::invalid_argument, "cannot leave " + std::to_string(n) + " of " + std::to_string(total) +
                                            " layers trainable");
  }
  const std::unordered_set<std::string> trainable(layer_order_.end() - n, layer_order_.end());
  frozen_schedule_.clear();
  tail_schedule_.clear();
  boundary_.clear();
  for (std::size_t i = 0; i < nodes_.size(); ++i) {
    Node& node = nodes_[i];
    node.frozen = !trainable.count(node.name);
    for (auto& p : node.layer->params) p.set_requires_grad(!node.frozen);
    // Raw ops follow their inputs; a frozen layer may still be downstream
    // of a trainable one in principle, so prefix membership is transitive.
    node.in_prefix = node.frozen && std::all_of(node.inputs.begin(), node.inputs.end(), [&](int j) {
                       return nodes_[static_cast<std::size_t>(j)].in_prefix;
                     });
    (node.in_prefix ? frozen_schedule_ : tail_schedule_).push_back(static_cast<int>(i));
  }
  std::vector<bool> is_boundary(nodes_.size(), false);
  for (int i : tail_schedule_) {
    for (int j : nodes_[static_cast<std::size_t>(i)].inputs) {
      if (nodes_[static_cast<std::size_t>(j)].in_prefix) is_boundary[static_cast<std::size_t>(j)] = true;
    }
  }
  if (nodes_[static_cast<std::size_t>(output_node_)].in_prefix) is_boundary[static_cast<std::size_t>(output_node_)] = true;
  for (std::size_t i = 0; i < nodes_.size(); ++i) {
    if (is_boundary[i]) boundary_.push_back(static_cast<int>(i));
  }
}

std::vector<std::string> BackboneGraphImpl::trainable_layers() const {
  std::vector<std::string> out;
  for (const auto& name : layer_order_) {
    if (!is_frozen(name)) out.push_back(name);
  }
  return out;
}

bool BackboneGraphImpl::is_frozen(std::string_view layer) const {
  for (const auto& n : nodes_) {
    if (n.name == layer) return n.frozen;
  }
  throw Error(Errc::invalid_argument, "no layer named " + std::string(layer));
}

std::int64_t BackboneGraphImpl::trainable_param_count() const {
  std::int64_t total = 0;
  for (const auto& p : parameters()) {
    if (p.requires_grad()) total += p.numel();
  }
  return total;
}

Tensor BackboneGraphImpl::run(std::vector<Tensor>& values, std::span<const int> schedule, int output) const {
  // Reference counts within this schedule so intermediates are released early.
  std::vector<int> uses(nodes_.size(), 0);
  for (int i : schedule) {
    for (int j : nodes_[static_cast<std::size_t>(i)].inputs) ++uses[static_cast<std::size_t>(j)];
  }
  std::vector<bool> keep(nodes_.size(), false);
  if (output >= 0) keep[static_cast<std::size_t>(output)] = true;
  for (int b : boundary_) keep[static_cast<std::size_t>(b)] = true;
  std::vector<Tensor> in;
  for (int i : schedule) {
    const Node& node = nodes_[static_cast<std::size_t>(i)];
    if (i == input_node_) continue;
    in.clear();
    for (int j : node.inputs) in.push_back(values[static_cast<std::size_t>(j)]);
    Ctx ctx{is_training(), node.frozen, calibrating_};
    values[static_cast<std::size_t>(i)] = node.layer->forward(in, ctx);
    for (int j : node.inputs) {
      if (--uses[static_cast<std::size_t>(j)] == 0 && !keep[static_cast<std::size_t>(j)]) {
        values[static_cast<std::size_t>(j)] = Tensor();
      }
    }
  }
  return output >= 0 ? values[static_cast<std::size_t>(output)] : Tensor();
}

namespace {

void check_input(const Tensor& x) {
  if (x.dim() != 4 || x.size(1) != 3) throw Error(Errc::dimension_mismatch, "backbone input must be [N, 3, H, W]");
}

}  // namespace

Tensor BackboneGraphImpl::forward(const Tensor& x) {
  check_input(x);
  std::vector<Tensor> values(nodes_.size());
  values[static_cast<std::size_t>(input_node_)] = x;
  std::vector<int> all(nodes_.size());
  std::iota(all.begin(), all.end(), 0);
  return run(values, all, output_node_);
}

std::vector<Tensor> BackboneGraphImpl::forward_frozen(const Tensor& x) {
  check_input(x);
  std::vector<Tensor> values(nodes_.size());
  values[static_cast<std::size_t>(input_node_)] = x;
  run(values, frozen_schedule_, -1);
  std::vector<Tensor> out;
  for (int b : boundary_) out.push_back(values[static_cast<std::size_t>(b)]);
  return out;
}

Tensor BackboneGraphImpl::forward_tail(const std::vector<Tensor>& boundary) {
  if (boundary.size() != boundary_.size()) throw Error(Errc::invalid_argument, "boundary tensor count mismatch");
  std::vector<Tensor> values(nodes_.size());
  for (std::size_t i = 0; i < boundary_.size(); ++i) values[static_cast<std::size_t>(boundary_[i])] = boundary[i];
  if (nodes_[static_cast<std::size_t>(output_node_)].in_prefix) return values[static_cast<std::size_t>(output_node_)];
  return run(values, tail_schedule_, output_node_);
}

std::map<std::string, Tensor> BackboneGraphImpl::forward_all(const Tensor& x) {
  check_input(x);
  std::vector<Tensor> values(nodes_.size());
  values[static_cast<std::size_t>(input_node_)] = x;
  std::vector<Tensor> in;
  for (std::size_t i = 0; i < nodes_.size(); ++i) {
    if (static_cast<int>(i) == input_node_) continue;
    in.clear();
    for (int j : nodes_[i].inputs) in.push_back(values[static_cast<std::size_t>(j)]);
    values[i] = nodes_[i].layer->forward(in, Ctx{is_training(), nodes_[i].frozen, calibrating_});
  }
  std::map<std::string, Tensor> out;
  for (std::size_t i = 0; i < nodes_.size(); ++i) {
    if (!nodes_[i].op) out.emplace(nodes_[i].name, values[i]);
  }
  return out;
}

void BackboneGraphImpl::reset_parameters(std::uint64_t seed) {
  auto gen = at::make_generator<at::CPUGeneratorImpl>(seed);
  for (auto& n : nodes_) n.layer->reset(gen);
}

void BackboneGraphImpl::calibrate(const Tensor& x) {
  torch::NoGradGuard ng;
  const bool was_training = is_training();
  eval();
  calibrating_ = true;
  try {
    forward(x);
  } catch (...) {
    calibrating_ = false;
    train(was_training);
    throw;
  }
  calibrating_ = false;
  train(was_training);
}

std::vector<std::pair<std::string, Tensor>> BackboneGraphImpl::named_tensors() const {
  std::vector<std::pair<std::string, Tensor>> out;
  for (const auto& p : named_parameters(/*recurse=*/false)) out.emplace_back(p.key(), p.value());
  for (const auto& b : named_buffers(/*recurse=*/false)) out.emplace_back(b.key(), b.value());
  return out;
}

void BackboneGraphImpl::load_tensors(const std::map<std::string, Tensor>& values) {
  torch::NoGradGuard ng;
  for (auto& [name, t] : named_tensors()) {
    const auto it = values.find(name);
    if (it == values.end()) throw Error(Errc::invalid_argument, "weights lack " + name);
    if (it->second.sizes() != t.sizes()) {
      throw Error(Errc::invalid_argument, "shape mismatch for " + name);
    }
    t.copy_(it->second);
  }
}

}  // namespace spill
