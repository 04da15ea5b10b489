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

#include "spill/preprocess.hpp"

#include <cmath>

#include <opencv2/imgproc.hpp>

#include "spill/errors.hpp"
#include "spill/geometry.hpp"

namespace spill {

torch::Tensor frames_to_tensor(std::span<const Frame> frames) {
  if (frames.empty()) throw Error(Errc::invalid_argument, "no frames to convert");
  const int w = frames[0].width;
  const int h = frames[0].height;
  auto out = torch::empty({static_cast<std::int64_t>(frames.size()), 3, h, w}, torch::kFloat32);
  for (std::size_t i = 0; i < frames.size(); ++i) {
    const Frame& f = frames[i];
    check_frame(f);
    if (f.width != w || f.height != h) throw Error(Errc::dimension_mismatch, "frames in a batch must share a size");
    // HWC bytes -> CHW floats
    auto hwc = torch::from_blob(const_cast<std::uint8_t*>(f.pixels.data()), {h, w, 3}, torch::kUInt8);
    out[static_cast<std::int64_t>(i)].copy_(hwc.permute({2, 0, 1}).to(torch::kFloat32));
  }
  return out;
}

torch::Tensor normalize_input(const torch::Tensor& rgb, std::string_view id) {
  if (id == "raw") return rgb;
  if (id == "tf") return rgb / 127.5 - 1.0;
  if (id == "caffe") {
    const auto mean = torch::tensor({103.939f, 116.779f, 123.68f}).view({1, 3, 1, 1});
    return rgb.flip({1}) - mean;
  }
  if (id == "torch") {
    const auto mean = torch::tensor({0.485f, 0.456f, 0.406f}).view({1, 3, 1, 1});
    const auto sd = torch::tensor({0.229f, 0.224f, 0.225f}).view({1, 3, 1, 1});
    return (rgb / 255.0 - mean) / sd;
  }
  throw Error(Errc::unknown_preprocess, "no preprocessing named '" + std::string(id) + "'");
}

torch::Tensor preprocess(std::span<const Frame> frames, const BackboneSpec& spec, std::optional<Size> size) {
  const Size target = size.value_or(spec.native_input);
  if (target.width < 1 || target.height < 1) throw Error(Errc::invalid_argument, "bad model input size");
  std::vector<Frame> resized;
  resized.reserve(frames.size());
  for (const Frame& f : frames) resized.push_back(resize_frame(f, target.width, target.height));
  return normalize_input(frames_to_tensor(resized), spec.preprocess_id);
}

void check_augment(const AugmentConfig& cfg) {
  if (!(cfg.rotation_factor >= 0.0) || !(cfg.contrast_factor >= 0.0)) {
    throw Error(Errc::invalid_argument, "augmentation factors must be >= 0");
  }
}

AugmentDraw draw_augment(const AugmentConfig& cfg, Rng& rng) {
  check_augment(cfg);
  AugmentDraw d;
  d.flip = cfg.horizontal_flip && rng.bernoulli(0.5);
  const double max_angle = cfg.rotation_factor * 360.0;
  d.angle_deg = max_angle > 0.0 ? rng.uniform(-max_angle, max_angle) : 0.0;
  d.contrast = cfg.contrast_factor > 0.0 ? rng.uniform(1.0 - cfg.contrast_factor, 1.0 + cfg.contrast_factor) : 1.0;
  return d;
}

Frame apply_augment(const Frame& frame, const AugmentDraw& draw) {
  check_frame(frame);
  Frame out = frame;
  cv::Mat img(out.height, out.width, CV_8UC3, out.pixels.data());
  if (draw.flip) cv::flip(img, img, 1);
  if (draw.angle_deg != 0.0) {
    const cv::Point2f centre(static_cast<float>(out.width - 1) / 2.0f, static_cast<float>(out.height - 1) / 2.0f);
    const cv::Mat m = cv::getRotationMatrix2D(centre, draw.angle_deg, 1.0);
    cv::Mat rotated;
    cv::warpAffine(img, rotated, m, img.size(), cv::INTER_LINEAR, cv::BORDER_REFLECT);
    rotated.copyTo(img);
  }
  if (draw.contrast != 1.0) {
    const cv::Scalar mean = cv::mean(img);
    for (int y = 0; y < out.height; ++y) {
      for (int x = 0; x < out.width; ++x) {
        for (int c = 0; c < 3; ++c) {
          const double v = (out.at(x, y, c) - mean[c]) * draw.contrast + mean[c];
          out.at(x, y, c) = static_cast<std::uint8_t>(std::clamp(std::lround(v), 0L, 255L));
        }
      }
    }
  }
  return out;
}

}  // namespace spill
