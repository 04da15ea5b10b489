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

#include <algorithm>
#include <fstream>
#include <set>

#include <gtest/gtest.h>

#include <json.hpp>

#include "spill/backbone.hpp"
#include "spill/errors.hpp"
#include "spill/rng.hpp"

#ifndef SPILL_FIXTURE_DIR
#define SPILL_FIXTURE_DIR "tests/fixtures"
#endif

namespace spill {
namespace {

using nlohmann::json;

// Layer order, per-layer weight counts and output shapes recorded from the
// reference framework's own model objects.
const json& reference() {
  static const json j = [] {
    std::ifstream in(std::string(SPILL_FIXTURE_DIR) + "/keras_backbones.json");
    return json::parse(in);
  }();
  return j;
}

const json& reference(const std::string& name) { return reference().at("backbones").at(name); }

std::vector<std::string> registry_names() {
  std::vector<std::string> out;
  for (const auto& b : list_backbones()) out.push_back(b.name);
  return out;
}

TEST(Registry, ElevenBackbonesVggFirst) {
  const auto& r = list_backbones();
  ASSERT_EQ(r.size(), 11u);
  EXPECT_EQ(r.front().name, "VGG19");
  const auto names = registry_names();
  EXPECT_NE(std::find(names.begin(), names.end(), "NASNetMobile"), names.end());
  EXPECT_EQ(std::set<std::string>(names.begin(), names.end()).size(), names.size());
  EXPECT_EQ(names, (std::vector<std::string>{"VGG19", "ResNet50", "ResNet50V2", "EfficientNetB3", "InceptionV3",
                                             "InceptionResNetV2", "Xception", "DenseNet121", "NASNetMobile",
                                             "EfficientNetV2B3", "ConvNeXtBase"}));
}

TEST(Registry, StableAcrossCalls) {
  const auto a = registry_names();
  const auto b = registry_names();
  EXPECT_EQ(a, b);
}

TEST(Registry, NativeInputsAtLeast32AndKnownPreprocess) {
  const std::set<std::string> known{"caffe", "tf", "torch", "raw"};
  for (const auto& b : list_backbones()) {
    EXPECT_GE(b.native_input.width, 32) << b.name;
    EXPECT_GE(b.native_input.height, 32) << b.name;
    EXPECT_TRUE(known.count(b.preprocess_id)) << b.name;
  }
}

TEST(Registry, UnknownNameRejected) {
  try {
    find_backbone("AlexNet");
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), Errc::unknown_backbone);
  }
}

TEST(Graph, DescriptionMatchesRegistryInput) {
  for (const auto& b : list_backbones()) {
    const auto g = load_backbone_graph(b.name);
    EXPECT_EQ(g.name, b.name);
    EXPECT_EQ(g.native_input, b.native_input) << b.name;
  }
}

TEST(Graph, MissingFileReported) {
  try {
    load_graph("/nonexistent/graph.json");
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), Errc::missing_file);
  }
}

TEST(Graph, CycleAndDanglingInputRejected) {
  GraphSpec g;
  g.name = "toy";
  g.input = "in";
  g.outputs = {"b"};
  g.layers = {{"in", "InputLayer", {}, {}, {}, false},
              {"a", "Activation", {"b"}, {{"activation", "relu"}}, {}, false},
              {"b", "Activation", {"a"}, {{"activation", "relu"}}, {}, false}};
  EXPECT_THROW(keras_layer_order(g), Error);
  g.layers[1].inbound = {"ghost"};
  EXPECT_THROW(keras_layer_order(g), Error);
}

// Ties at equal depth follow the first visit from the output, so a branch
// listed first in the merge's inputs comes first.
TEST(Graph, OrderOnHandBuiltDiamond) {
  GraphSpec g;
  g.name = "toy";
  g.input = "in";
  g.outputs = {"merge"};
  auto act = json{{"activation", "relu"}};
  g.layers = {{"merge", "Add", {"right", "left_2"}, json::object(), {}, false},
              {"left_1", "Activation", {"in"}, act, {}, false},
              {"left_2", "Activation", {"left_1"}, act, {}, false},
              {"right", "Activation", {"in"}, act, {}, false},
              {"in", "InputLayer", {}, {}, {}, false}};
  // depths: merge 0, right 1, left_2 1, left_1 2, in 3
  EXPECT_EQ(keras_layer_order(g), (std::vector<std::string>{"in", "left_1", "right", "left_2", "merge"}));
}

class PerBackbone : public ::testing::TestWithParam<std::string> {};

TEST_P(PerBackbone, LayerOrderMatchesReference) {
  const auto g = load_backbone_graph(GetParam());
  const auto expected = reference(GetParam()).at("layer_order").get<std::vector<std::string>>();
  EXPECT_EQ(keras_layer_order(g), expected);
}

TEST_P(PerBackbone, LayerOrderIndependentOfListingOrder) {
  auto g = load_backbone_graph(GetParam());
  const auto expected = keras_layer_order(g);
  Rng rng(fnv1a(GetParam()));
  for (int trial = 0; trial < 3; ++trial) {
    rng.shuffle(g.layers.begin(), g.layers.end());
    EXPECT_EQ(keras_layer_order(g), expected) << "trial " << trial;
  }
}

TEST_P(PerBackbone, WeightCountsMatchReference) {
  const auto& ref = reference(GetParam());
  BackboneGraph net(load_backbone_graph(GetParam()));
  EXPECT_EQ(net->count_params(), ref.at("count_params").get<std::int64_t>());
  EXPECT_EQ(net->layer_order(), ref.at("layer_order").get<std::vector<std::string>>());
  for (const auto& name : net->layer_order()) {
    const auto& lp = ref.at("layer_params");
    const std::int64_t want = lp.contains(name) ? lp.at(name).get<std::int64_t>() : 0;
    EXPECT_EQ(net->layer_param_count(name), want) << name;
  }
}

TEST_P(PerBackbone, OutputShapesMatchReference) {
  const auto& spec = find_backbone(GetParam());
  BackboneGraph net(load_backbone_graph(GetParam()));
  net->eval();
  torch::NoGradGuard ng;
  const auto outs = net->forward_all(torch::zeros({1, 3, spec.native_input.height, spec.native_input.width}));
  const auto& shapes = reference(GetParam()).at("output_shapes");
  for (const auto& name : net->layer_order()) {
    const auto want = shapes.at(name).get<std::vector<std::int64_t>>();
    const auto& t = outs.at(name);
    std::vector<std::int64_t> got;
    if (t.dim() == 4) {
      got = {t.size(2), t.size(3), t.size(1)};
    } else {
      got = {t.size(1)};
    }
    EXPECT_EQ(got, want) << name;
  }
}

TEST_P(PerBackbone, LastFiveTrainable) {
  BackboneGraph net(load_backbone_graph(GetParam()));
  net->freeze_all_but_last(5);
  const auto& order = net->layer_order();
  const std::vector<std::string> tail(order.end() - 5, order.end());
  EXPECT_EQ(net->trainable_layers(), tail);
  EXPECT_LT(net->trainable_param_count(), net->count_params());
  std::int64_t tail_params = 0;
  for (const auto& [name, p] : net->named_parameters(false).pairs()) {
    if (p.requires_grad()) tail_params += p.numel();
    const auto layer = name.substr(0, name.find('/'));
    EXPECT_EQ(p.requires_grad(), !net->is_frozen(layer)) << name;
  }
  EXPECT_EQ(net->trainable_param_count(), tail_params);
}

// Some graphs end in weight-free layers (activations, concatenations); the
// tail then trains nothing and only the head learns.
TEST(Freeze, TailWeightsWhereTheGraphHasThem) {
  for (const auto& b : list_backbones()) {
    BackboneGraph net(load_backbone_graph(b.name));
    net->freeze_all_but_last(5);
    const bool weight_free = b.name == "InceptionV3" || b.name == "NASNetMobile";
    if (weight_free) {
      EXPECT_EQ(net->trainable_param_count(), 0) << b.name;
    } else {
      EXPECT_GT(net->trainable_param_count(), 0) << b.name;
    }
  }
}

std::string param_name(const ::testing::TestParamInfo<std::string>& info) { return info.param; }

INSTANTIATE_TEST_SUITE_P(Registry, PerBackbone, ::testing::ValuesIn(registry_names()), param_name);

TEST(Freeze, FrozenPrefixPlusTailEqualsFullForward) {
  BackboneGraph net(load_backbone_graph("ResNet50"));
  net->reset_parameters(3);
  net->freeze_all_but_last(5);
  net->eval();
  torch::NoGradGuard ng;
  const auto x = torch::randn({2, 3, 64, 64}, torch::TensorOptions().dtype(torch::kFloat32));
  const auto full = net->forward(x);
  const auto split = net->forward_tail(net->forward_frozen(x));
  EXPECT_TRUE(torch::equal(full, split));
}

TEST(Freeze, RejectsMoreThanLayerCount) {
  BackboneGraph net(load_backbone_graph("VGG19"));
  EXPECT_THROW(net->freeze_all_but_last(23), Error);
  EXPECT_THROW(net->freeze_all_but_last(-1), Error);
  net->freeze_all_but_last(0);
  EXPECT_EQ(net->trainable_param_count(), 0);
}

TEST(Init, SeededResetIsDeterministic) {
  BackboneGraph a(load_backbone_graph("NASNetMobile"));
  BackboneGraph b(load_backbone_graph("NASNetMobile"));
  a->reset_parameters(11);
  b->reset_parameters(11);
  const auto ta = a->named_tensors();
  const auto tb = b->named_tensors();
  ASSERT_EQ(ta.size(), tb.size());
  for (std::size_t i = 0; i < ta.size(); ++i) {
    EXPECT_EQ(ta[i].first, tb[i].first);
    EXPECT_TRUE(torch::equal(ta[i].second, tb[i].second)) << ta[i].first;
  }
  b->reset_parameters(12);
  EXPECT_FALSE(torch::equal(a->named_tensors().front().second, b->named_tensors().front().second));
}

TEST(Init, CalibrationNormalizesBatchNormInputs) {
  BackboneGraph net(load_backbone_graph("ResNet50"));
  net->reset_parameters(5);
  const auto x = torch::rand({4, 3, 64, 64}) * 255.0 - 120.0;
  net->calibrate(x);
  net->eval();
  torch::NoGradGuard ng;
  const auto outs = net->forward_all(x);
  // A calibrated batch-norm output is standardized on the calibration batch.
  const auto& bn = outs.at("conv1_bn");
  const auto mean = bn.mean({0, 2, 3});
  const auto sd = bn.std({0, 2, 3}, false);
  EXPECT_LT(mean.abs().max().item<double>(), 1e-3);
  EXPECT_NEAR(sd.mean().item<double>(), 1.0, 1e-2);
  EXPECT_TRUE(torch::isfinite(net->forward(x)).all().item<bool>());
}

}  // namespace
}  // namespace spill
