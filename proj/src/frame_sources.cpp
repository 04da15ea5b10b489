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

#include "spill/frame_sources.hpp"

#include <algorithm>
#include <charconv>
#include <cstdlib>
#include <fstream>
#include <map>
#include <regex>
#include <system_error>
#include <vector>

#include <json.hpp>
#include <opencv2/imgproc.hpp>
#include <opencv2/videoio.hpp>

#include "spill/errors.hpp"
#include "spill/geometry.hpp"
#include "spill/rng.hpp"
#include "spill/synth.hpp"

namespace fs = std::filesystem;

namespace spill {

bool is_filesystem_safe(std::string_view id) noexcept {
  if (id.empty()) return false;
  return std::all_of(id.begin(), id.end(), [](char c) {
    return (c >= 'A' && c <= 'Z') || (c >= 'a' && c <= 'z') || (c >= '0' && c <= '9') || c == '_' || c == '-';
  });
}

void check_session_meta(const SessionMeta& meta) {
  if (!is_filesystem_safe(meta.session_id)) {
    throw Error(Errc::invalid_argument, "session id must be non-empty and match [A-Za-z0-9_-]+: '" +
                                            meta.session_id + "'");
  }
}

namespace {

std::string_view trim(std::string_view s) {
  while (!s.empty() && std::isspace(static_cast<unsigned char>(s.front()))) s.remove_prefix(1);
  while (!s.empty() && std::isspace(static_cast<unsigned char>(s.back()))) s.remove_suffix(1);
  return s;
}

template <typename T>
std::optional<T> parse_number(std::string_view s) {
  s = trim(s);
  T v{};
  auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc{} || p != s.data() + s.size()) return std::nullopt;
  return v;
}

// Simulated camera: scene i is drawn from the synthetic generator, so a
// thermal and an RGB source opened with the same seed see the same scene.
class SimulatedSource final : public Source {
 public:
  explicit SimulatedSource(const SourceDescriptor& d)
      : desc_(d), spec_(SynthSpec::separable(d.seed)) {}

  std::optional<Frame> next() override {
    const std::uint64_t i = index_++;
    const bool spill = Rng(desc_.seed, 0x5CE4E000ull + i).bernoulli(0.5);
    FramePair scene = spill ? gen_spill(spec_, i).pair : gen_no_spill(spec_, i);
    Frame f;
    switch (desc_.modality) {
      case Modality::thermal: f = std::move(scene.thermal); break;
      case Modality::rgb: f = std::move(scene.rgb); break;
      case Modality::combined:
        f = fuse_side_by_side(scene.thermal, align_rgb(scene.rgb, identity_calibration()));
        break;
    }
    f.timestamp_ms = desc_.start_ms + static_cast<std::int64_t>(i) * desc_.period_ms;
    f.source_id = id();
    return f;
  }
  Modality modality() const noexcept override { return desc_.modality; }
  std::string id() const override { return "sim:" + std::to_string(desc_.seed); }

 private:
  SourceDescriptor desc_;
  SynthSpec spec_;
  std::uint64_t index_ = 0;
};

// Replays PNGs in lexicographic order. An optional timestamps.csv
// (file_name,ms) overrides the default period-based clock.
class ReplaySource final : public Source {
 public:
  explicit ReplaySource(const SourceDescriptor& d) : desc_(d) {
    std::error_code ec;
    if (!fs::is_directory(d.directory, ec)) {
      throw Error(Errc::source_unreadable, "replay directory not readable: " + d.directory.string());
    }
    for (fs::directory_iterator it(d.directory, ec), end; !ec && it != end; it.increment(ec)) {
      if (it->is_regular_file() && it->path().extension() == ".png") files_.push_back(it->path());
    }
    if (ec) throw Error(Errc::source_unreadable, "cannot list " + d.directory.string() + ": " + ec.message());
    if (files_.empty()) throw Error(Errc::source_unreadable, "replay directory has no PNG files: " + d.directory.string());
    std::sort(files_.begin(), files_.end());
    load_timestamps(d.directory / "timestamps.csv");
  }

  std::optional<Frame> next() override {
    if (pos_ >= files_.size()) return std::nullopt;
    const fs::path& p = files_[pos_];
    Frame f = read_png(p, desc_.modality);
    if (f.size() != canonical_size(desc_.modality)) {
      const Size s = canonical_size(desc_.modality);
      f = resize_frame(f, s.width, s.height);
      f.modality = desc_.modality;
    }
    auto ts = stamps_.find(p.filename().string());
    f.timestamp_ms = ts != stamps_.end() ? ts->second : static_cast<std::int64_t>(pos_) * desc_.period_ms;
    f.source_id = id();
    ++pos_;
    return f;
  }
  Modality modality() const noexcept override { return desc_.modality; }
  std::string id() const override { return "replay:" + desc_.directory.string(); }

 private:
  void load_timestamps(const fs::path& csv) {
    std::ifstream in(csv);
    if (!in) return;
    std::string line;
    while (std::getline(in, line)) {
      std::string_view v = trim(line);
      if (v.empty() || v.front() == '#') continue;
      const auto comma = v.find(',');
      if (comma == std::string_view::npos) continue;
      if (auto ms = parse_number<std::int64_t>(v.substr(comma + 1))) {
        stamps_[std::string(trim(v.substr(0, comma)))] = *ms;
      }
    }
  }

  SourceDescriptor desc_;
  std::vector<fs::path> files_;
  std::map<std::string, std::int64_t> stamps_;
  std::size_t pos_ = 0;
};

class DeviceSource final : public Source {
 public:
  explicit DeviceSource(const SourceDescriptor& d) : desc_(d), opened_(std::chrono::steady_clock::now()) {
    bool ok = false;
    if (auto idx = parse_number<int>(d.device_id)) {
      ok = cap_.open(*idx);
    } else if (fs::exists(d.device_id)) {
      ok = cap_.open(d.device_id);
    }
    if (!ok || !cap_.isOpened()) {
      throw Error(Errc::device_unavailable, "cannot open capture device '" + d.device_id + "'");
    }
  }

  std::optional<Frame> next() override {
    cv::Mat bgr;
    if (!cap_.read(bgr) || bgr.empty()) return std::nullopt;
    const auto now = std::chrono::steady_clock::now();
    const Size s = canonical_size(desc_.modality);
    if (bgr.cols != s.width || bgr.rows != s.height) {
      cv::resize(bgr, bgr, cv::Size(s.width, s.height), 0, 0, cv::INTER_AREA);
    }
    if (bgr.channels() == 1) cv::cvtColor(bgr, bgr, cv::COLOR_GRAY2BGR);
    cv::Mat rgb;
    cv::cvtColor(bgr, rgb, cv::COLOR_BGR2RGB);
    Frame f = Frame::blank(s.width, s.height, desc_.modality);
    for (int y = 0; y < s.height; ++y) {
      const auto* row = rgb.ptr<std::uint8_t>(y);
      std::copy(row, row + s.width * 3, f.pixels.begin() + static_cast<std::ptrdiff_t>(f.index(0, y)));
    }
    f.timestamp_ms = std::chrono::duration_cast<std::chrono::milliseconds>(now - opened_).count();
    f.source_id = id();
    return f;
  }
  Modality modality() const noexcept override { return desc_.modality; }
  std::string id() const override { return "dev:" + desc_.device_id; }

 private:
  SourceDescriptor desc_;
  cv::VideoCapture cap_;
  std::chrono::steady_clock::time_point opened_;
};

}  // namespace

SourceDescriptor parse_source_descriptor(std::string_view text, Modality modality) {
  const auto colon = text.find(':');
  if (colon == std::string_view::npos) {
    throw Error(Errc::unknown_source_kind, "source descriptor needs <kind>:<arg>: '" + std::string(text) + "'");
  }
  const std::string_view kind = text.substr(0, colon);
  const std::string_view arg = text.substr(colon + 1);
  SourceDescriptor d;
  d.modality = modality;
  if (kind == "sim") {
    auto seed = parse_number<std::uint64_t>(arg);
    if (!seed) throw Error(Errc::invalid_argument, "sim: seed must be a non-negative integer");
    d.kind = SourceDescriptor::Kind::simulated;
    d.seed = *seed;
  } else if (kind == "replay") {
    d.kind = SourceDescriptor::Kind::replay;
    d.directory = fs::path(std::string(arg));
  } else if (kind == "dev") {
    d.kind = SourceDescriptor::Kind::device;
    d.device_id = std::string(arg);
  } else {
    throw Error(Errc::unknown_source_kind, "unknown source kind '" + std::string(kind) + "'");
  }
  return d;
}

std::unique_ptr<Source> open_source(const SourceDescriptor& desc) {
  switch (desc.kind) {
    case SourceDescriptor::Kind::simulated: return std::make_unique<SimulatedSource>(desc);
    case SourceDescriptor::Kind::replay: return std::make_unique<ReplaySource>(desc);
    case SourceDescriptor::Kind::device: return std::make_unique<DeviceSource>(desc);
  }
  throw Error(Errc::unknown_source_kind, "unknown source kind");
}

FramePair capture_pair(Source& thermal_src, Source& rgb_src, std::int64_t max_skew_ms, const std::string& session_id) {
  if (max_skew_ms <= 0) throw Error(Errc::invalid_argument, "max_skew_ms must be > 0");
  if (thermal_src.modality() != Modality::thermal || rgb_src.modality() != Modality::rgb) {
    throw Error(Errc::modality_mismatch, "capture_pair needs a thermal and an rgb source");
  }
  auto t = thermal_src.next();
  if (!t) throw Error(Errc::end_of_stream, "thermal source exhausted: " + thermal_src.id());
  auto r = rgb_src.next();
  if (!r) throw Error(Errc::end_of_stream, "rgb source exhausted: " + rgb_src.id());
  const std::int64_t skew = std::abs(t->timestamp_ms - r->timestamp_ms);
  if (skew > max_skew_ms) {
    throw Error(Errc::skew_exceeded, "frame skew " + std::to_string(skew) + " ms exceeds " +
                                         std::to_string(max_skew_ms) + " ms");
  }
  FramePair pair;
  pair.thermal = std::move(*t);
  pair.rgb = std::move(*r);
  pair.thermal.modality = Modality::thermal;
  pair.rgb.modality = Modality::rgb;
  pair.skew_ms = skew;
  pair.session_id = session_id;
  return pair;
}

std::string pair_file_name(std::uint64_t index, Modality modality) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "pair_%06llu_", static_cast<unsigned long long>(index));
  return std::string(buf) + std::string(to_string(modality)) + ".png";
}

fs::path pair_path(const fs::path& root, Modality modality, ClassLabel label, std::uint64_t index) {
  return root / std::string(to_string(modality)) / std::string(to_string(label)) / pair_file_name(index, modality);
}

std::uint64_t scan_max_pair_index(const fs::path& root) {
  static const std::regex kName(R"(pair_(\d{6,})_[a-z]+\.png)");
  std::uint64_t best = 0;
  std::error_code ec;
  if (!fs::is_directory(root, ec)) return 0;
  for (fs::recursive_directory_iterator it(root, ec), end; !ec && it != end; it.increment(ec)) {
    if (!it->is_regular_file()) continue;
    std::smatch m;
    const std::string name = it->path().filename().string();
    if (std::regex_match(name, m, kName)) best = std::max<std::uint64_t>(best, std::stoull(m[1].str()));
  }
  return best;
}

PairWriter::PairWriter(fs::path root) : root_(std::move(root)), next_(scan_max_pair_index(root_) + 1) {}

std::uint64_t PairWriter::next_index() const {
  std::lock_guard lock(mu_);
  return next_;
}

namespace {

fs::path temp_name(const fs::path& final_path) {
  return final_path.parent_path() / ("." + final_path.filename().string() + ".tmp");
}

void remove_quietly(const fs::path& p) {
  std::error_code ec;
  fs::remove(p, ec);
}

void make_dirs(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec || !fs::is_directory(dir)) {
    throw Error(Errc::write_failure, "cannot create directory " + dir.string() + ": " + ec.message());
  }
}

}  // namespace

SavedPair PairWriter::save(const FramePair& pair, const SessionMeta& meta) {
  check_session_meta(meta);
  check_canonical(pair.thermal);
  check_canonical(pair.rgb);
  if (pair.thermal.modality != Modality::thermal || pair.rgb.modality != Modality::rgb) {
    throw Error(Errc::modality_mismatch, "pair must hold a thermal and an rgb frame");
  }

  std::lock_guard lock(mu_);
  SavedPair out;
  out.index = next_;
  out.thermal_path = pair_path(root_, Modality::thermal, meta.class_label, out.index);
  out.rgb_path = pair_path(root_, Modality::rgb, meta.class_label, out.index);
  if (fs::exists(out.thermal_path) || fs::exists(out.rgb_path)) {
    throw Error(Errc::index_collision, "pair index " + std::to_string(out.index) + " already exists under " +
                                           root_.string());
  }
  make_dirs(out.thermal_path.parent_path());
  make_dirs(out.rgb_path.parent_path());

  const fs::path t_tmp = temp_name(out.thermal_path);
  const fs::path r_tmp = temp_name(out.rgb_path);
  try {
    write_png(pair.thermal, t_tmp);
    write_png(pair.rgb, r_tmp);
    fs::rename(t_tmp, out.thermal_path);
    try {
      fs::rename(r_tmp, out.rgb_path);
    } catch (...) {
      remove_quietly(out.thermal_path);
      throw;
    }
  } catch (const fs::filesystem_error& e) {
    remove_quietly(t_tmp);
    remove_quietly(r_tmp);
    throw Error(Errc::write_failure, e.what());
  } catch (...) {
    remove_quietly(t_tmp);
    remove_quietly(r_tmp);
    throw;
  }

  nlohmann::json line{{"index", out.index},
                      {"session_id", meta.session_id},
                      {"room", meta.room},
                      {"liquid", meta.liquid},
                      {"class_label", to_string(meta.class_label)},
                      {"skew_ms", pair.skew_ms},
                      {"thermal_ts", pair.thermal.timestamp_ms},
                      {"rgb_ts", pair.rgb.timestamp_ms}};
  std::ofstream side(root_ / std::string(kPairsSidecar), std::ios::app);
  if (!side) {
    remove_quietly(out.thermal_path);
    remove_quietly(out.rgb_path);
    throw Error(Errc::write_failure, "cannot append to " + (root_ / std::string(kPairsSidecar)).string());
  }
  side << line.dump() << '\n';
  ++next_;
  return out;
}

fs::path PairWriter::save_extra(const Frame& frame, ClassLabel label, std::uint64_t index) {
  check_canonical(frame);
  std::lock_guard lock(mu_);
  const fs::path dest = pair_path(root_, frame.modality, label, index);
  if (fs::exists(dest)) throw Error(Errc::index_collision, dest.string() + " already exists");
  make_dirs(dest.parent_path());
  const fs::path tmp = temp_name(dest);
  try {
    write_png(frame, tmp);
    fs::rename(tmp, dest);
  } catch (const fs::filesystem_error& e) {
    remove_quietly(tmp);
    throw Error(Errc::write_failure, e.what());
  } catch (...) {
    remove_quietly(tmp);
    throw;
  }
  return dest;
}

SavedPair save_pair(const FramePair& pair, const SessionMeta& meta, const fs::path& root) {
  PairWriter writer(root);
  return writer.save(pair, meta);
}

}  // namespace spill
