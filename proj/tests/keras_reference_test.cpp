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

// Numeric agreement between the C++ interpreter and keras.applications on
// identical weights and inputs. Skipped when Keras is not installed.
//
// Some surrogate networks amplify float32 rounding through their residual
// stacks, so neither implementation is accurate to 1e-3 in single
// precision. The interpreter's own float32/float64 drift detects those, and
// they are compared in double precision at a tighter tolerance instead.
#include <cstdlib>
#include <fstream>
#include <iterator>

#include <gtest/gtest.h>

#include "spill/backbone.hpp"
#include "spill/preprocess.hpp"
#include "spill/weights.hpp"
#include "test_support.hpp"

#ifndef SPILL_PYTHON
#define SPILL_PYTHON "python3"
#endif
#ifndef SPILL_TOOLS_DIR
#define SPILL_TOOLS_DIR "tools"
#endif

namespace spill {
namespace {

constexpr double kSingleTolerance = 1e-3;
// Float64 results pass through float32 files, so 1e-5 leaves ample room.
constexpr double kDoubleTolerance = 1e-5;

bool keras_available() {
  const std::string cmd = std::string(SPILL_PYTHON) + " -c \"import keras\" > /dev/null 2>&1";
  return std::system(cmd.c_str()) == 0;
}

TEST(KerasReference, AllBackbonesAgreeOnSurrogateWeights) {
  if (!keras_available()) GTEST_SKIP() << "keras is not installed";
  testing::ScratchDir dir("keras_ref");
  struct Case {
    std::string name;
    torch::Tensor ours;
    bool dbl = false;
  };
  std::vector<Case> cases;
  std::string cmd = std::string(SPILL_PYTHON) + " " + SPILL_TOOLS_DIR + "/keras_reference.py";
  for (const auto& spec : list_backbones()) {
    SurrogateOptions opt;
    opt.seed = 7;
    opt.calibration_images = 4;
    auto net = make_surrogate_backbone(spec, opt);
    net->eval();
    const auto x = preprocess(smooth_noise_frames(2, spec.native_input, 99), spec);
    torch::Tensor y32;
    torch::Tensor y64;
    {
      torch::NoGradGuard ng;
      y32 = net->forward(x);
      net->to(torch::kFloat64);
      y64 = net->forward(x.to(torch::kFloat64));
      net->to(torch::kFloat32);
    }
    const double drift = (y32.to(torch::kFloat64) - y64).abs().max().item<double>() /
                         std::max(1.0, y64.abs().max().item<double>());
    const bool dbl = drift > kSingleTolerance / 10;
    const auto w = dir / (spec.name + ".weights");
    save_weights(w, net->named_tensors(), {});
    save_weights(dir / (spec.name + ".in"), {{"input", x}}, {});
    cmd += " --case " + spec.name + " " + w.string() + " " + (dir / (spec.name + ".in")).string() + " " +
           (dir / (spec.name + ".out")).string() + (dbl ? " float64" : " float32");
    cases.push_back({spec.name, dbl ? y64.to(torch::kFloat32) : y32, dbl});
    RecordProperty(spec.name + "_f32_drift", std::to_string(drift));
  }
  const auto log = dir / "reference.log";
  if (std::system((cmd + " > " + log.string() + " 2>&1").c_str()) != 0) {
    std::ifstream in(log);
    const std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    FAIL() << "reference run failed:\n" << text.substr(text.size() > 4000 ? text.size() - 4000 : 0);
  }
  for (const auto& c : cases) {
    const auto ref = load_weights(dir / (c.name + ".out")).by_name().at("output");
    ASSERT_EQ(ref.sizes(), c.ours.sizes()) << c.name;
    const double scale = std::max(1.0, ref.abs().max().item<double>());
    const double err = (ref - c.ours).abs().max().item<double>();
    const double tol = c.dbl ? kDoubleTolerance : kSingleTolerance;
    EXPECT_LT(err / scale, tol) << c.name << (c.dbl ? " (float64)" : " (float32)") << " max abs error " << err
                                << " at scale " << scale;
    RecordProperty(c.name + "_rel_err", std::to_string(err / scale));
  }
}

}  // namespace
}  // namespace spill
