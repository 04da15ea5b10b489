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

#include "spill/image.hpp"

#include <fstream>

#include <opencv2/core.hpp>
#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include "spill/errors.hpp"

namespace spill {

std::string_view to_string(Errc code) noexcept {
  switch (code) {
    case Errc::invalid_argument: return "invalid argument";
    case Errc::unknown_source_kind: return "unknown source kind";
    case Errc::source_unreadable: return "source unreadable";
    case Errc::device_unavailable: return "device unavailable";
    case Errc::end_of_stream: return "end of stream";
    case Errc::skew_exceeded: return "skew exceeded";
    case Errc::write_failure: return "write failure";
    case Errc::index_collision: return "index collision";
    case Errc::too_few_points: return "too few points";
    case Errc::degenerate_configuration: return "degenerate configuration";
    case Errc::non_invertible: return "non-invertible transform";
    case Errc::out_of_bounds: return "out of bounds";
    case Errc::dimension_mismatch: return "dimension mismatch";
    case Errc::unreadable_root: return "unreadable root";
    case Errc::empty_subset: return "empty subset";
    case Errc::unknown_backbone: return "unknown backbone";
    case Errc::unknown_preprocess: return "unknown preprocess id";
    case Errc::weights_unavailable: return "weights unavailable offline";
    case Errc::empty_split: return "empty split";
    case Errc::out_of_memory: return "out of memory";
    case Errc::modality_mismatch: return "modality mismatch";
    case Errc::missing_file: return "missing file";
    case Errc::model_load_failure: return "model failed to load";
    case Errc::fusion_failure: return "fusion failure";
    case Errc::unknown_frame_ref: return "unknown frame ref";
    case Errc::no_active_session: return "no active session";
    case Errc::queue_full: return "queue full";
    case Errc::io_error: return "io error";
  }
  return "unknown error";
}

std::string_view to_string(Modality m) noexcept {
  switch (m) {
    case Modality::thermal: return "thermal";
    case Modality::rgb: return "rgb";
    case Modality::combined: return "combined";
  }
  return "?";
}

std::optional<Modality> parse_modality(std::string_view text) noexcept {
  if (text == "thermal") return Modality::thermal;
  if (text == "rgb") return Modality::rgb;
  if (text == "combined") return Modality::combined;
  return std::nullopt;
}

std::string_view to_string(ClassLabel c) noexcept {
  return c == ClassLabel::spill ? "spill" : "no_spill";
}

std::optional<ClassLabel> parse_class_label(std::string_view text) noexcept {
  if (text == "spill") return ClassLabel::spill;
  if (text == "no_spill" || text == "no-spill") return ClassLabel::no_spill;
  return std::nullopt;
}

Size canonical_size(Modality m) noexcept {
  switch (m) {
    case Modality::thermal: return kThermalSize;
    case Modality::rgb: return kRgbRawSize;
    case Modality::combined: return kCombinedSize;
  }
  return {};
}

Frame Frame::blank(int width, int height, Modality modality) {
  if (width < 1 || height < 1) {
    throw Error(Errc::invalid_argument, "frame dimensions must be >= 1");
  }
  Frame f;
  f.width = width;
  f.height = height;
  f.modality = modality;
  f.pixels.assign(static_cast<std::size_t>(width) * static_cast<std::size_t>(height) * kChannels, 0);
  return f;
}

void check_frame(const Frame& f) {
  if (f.width < 1 || f.height < 1) {
    throw Error(Errc::invalid_argument, "frame dimensions must be >= 1");
  }
  const auto expected = static_cast<std::size_t>(f.width) * static_cast<std::size_t>(f.height) * Frame::kChannels;
  if (f.pixels.size() != expected) {
    throw Error(Errc::invalid_argument, "pixel buffer length " + std::to_string(f.pixels.size()) +
                                            " != width*height*3 = " + std::to_string(expected));
  }
}

void check_canonical(const Frame& f) {
  check_frame(f);
  const Size want = canonical_size(f.modality);
  if (f.size() != want) {
    throw Error(Errc::dimension_mismatch,
                std::string(to_string(f.modality)) + " frame must be " + std::to_string(want.width) + "x" +
                    std::to_string(want.height) + ", got " + std::to_string(f.width) + "x" +
                    std::to_string(f.height));
  }
}

namespace {

cv::Mat to_bgr_mat(const Frame& frame) {
  check_frame(frame);
  cv::Mat rgb(frame.height, frame.width, CV_8UC3, const_cast<std::uint8_t*>(frame.pixels.data()));
  cv::Mat bgr;
  cv::cvtColor(rgb, bgr, cv::COLOR_RGB2BGR);
  return bgr;
}

}  // namespace

std::vector<std::uint8_t> encode_png(const Frame& frame) {
  std::vector<std::uint8_t> out;
  if (!cv::imencode(".png", to_bgr_mat(frame), out)) {
    throw Error(Errc::write_failure, "PNG encoding failed");
  }
  return out;
}

void write_png(const Frame& frame, const std::filesystem::path& path) {
  const std::vector<std::uint8_t> bytes = encode_png(frame);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(Errc::write_failure, "cannot open " + path.string() + " for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  out.close();
  if (!out) {
    std::error_code ec;
    std::filesystem::remove(path, ec);
    throw Error(Errc::write_failure, "short write to " + path.string());
  }
}

Frame read_png(const std::filesystem::path& path, Modality modality) {
  cv::Mat bgr = cv::imread(path.string(), cv::IMREAD_COLOR);
  if (bgr.empty()) throw Error(Errc::source_unreadable, "cannot decode image " + path.string());
  cv::Mat rgb;
  cv::cvtColor(bgr, rgb, cv::COLOR_BGR2RGB);
  Frame f = Frame::blank(rgb.cols, rgb.rows, modality);
  for (int y = 0; y < rgb.rows; ++y) {
    const auto* row = rgb.ptr<std::uint8_t>(y);
    std::copy(row, row + rgb.cols * 3, f.pixels.begin() + static_cast<std::ptrdiff_t>(f.index(0, y)));
  }
  f.source_id = path.filename().string();
  return f;
}

}  // namespace spill
