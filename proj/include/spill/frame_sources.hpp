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

#include <chrono>
#include <cstdint>
#include <filesystem>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <string_view>

#include "spill/image.hpp"

namespace spill {

inline constexpr std::int64_t kDefaultMaxSkewMs = 50;

inline constexpr std::string_view kRoomAtrium = "Atrium";
inline constexpr std::string_view kRoomJ234 = "J234";
inline constexpr std::string_view kLiquids[] = {"water", "coke", "red_juice", "yellow_juice"};

/// [A-Za-z0-9_-]+
bool is_filesystem_safe(std::string_view id) noexcept;

/// Collection context for a run of captures. room and liquid are free
/// strings; the known values are Atrium/J234 and the four liquids above.
struct SessionMeta {
  std::string session_id;
  std::string room;
  std::string liquid;
  ClassLabel class_label = ClassLabel::no_spill;
};

void check_session_meta(const SessionMeta& meta);

/// One thermal and one RGB frame read back-to-back.
struct FramePair {
  Frame thermal;
  Frame rgb;
  std::int64_t skew_ms = 0;
  std::string session_id;
};

struct SourceDescriptor {
  enum class Kind { simulated, replay, device };
  Kind kind = Kind::simulated;
  Modality modality = Modality::thermal;
  std::uint64_t seed = 0;            // simulated
  std::filesystem::path directory{}; // replay
  std::string device_id{};           // device
  std::int64_t start_ms = 0;         // simulated clock origin
  std::int64_t period_ms = 100;      // simulated frame period
};

/// `sim:<seed>`, `replay:<dir>`, `dev:<id>`. Throws unknown_source_kind.
SourceDescriptor parse_source_descriptor(std::string_view text, Modality modality);

/// Single-consumer frame stream of one modality.
class Source {
 public:
  virtual ~Source() = default;
  /// Next frame, or nullopt at end of stream.
  virtual std::optional<Frame> next() = 0;
  virtual Modality modality() const noexcept = 0;
  virtual std::string id() const = 0;
};

/// Throws unknown_source_kind, source_unreadable, device_unavailable.
std::unique_ptr<Source> open_source(const SourceDescriptor& desc);

/// Reads one frame from each source. Throws end_of_stream, skew_exceeded,
/// modality_mismatch.
FramePair capture_pair(Source& thermal_src, Source& rgb_src, std::int64_t max_skew_ms = kDefaultMaxSkewMs,
                       const std::string& session_id = {});

struct SavedPair {
  std::uint64_t index = 0;
  std::filesystem::path thermal_path;
  std::filesystem::path rgb_path;
};

/// Name of the per-root sidecar recording session metadata for each pair.
inline constexpr std::string_view kPairsSidecar = "pairs.jsonl";

/// `pair_<6-digit index>_<modality>.png`
std::string pair_file_name(std::uint64_t index, Modality modality);
/// `<root>/<modality>/<class>/pair_<index>_<modality>.png`
std::filesystem::path pair_path(const std::filesystem::path& root, Modality modality, ClassLabel label,
                                std::uint64_t index);

/// Persists pairs under the session/class layout with a shared, monotonically
/// increasing index. Both files are written to temporaries and renamed, so a
/// failure leaves neither. Thread-safe.
class PairWriter {
 public:
  /// Resumes numbering after the highest index already present under root.
  explicit PairWriter(std::filesystem::path root);

  SavedPair save(const FramePair& pair, const SessionMeta& meta);
  /// Writes an additional modality (e.g. the fused frame) under an existing index.
  std::filesystem::path save_extra(const Frame& frame, ClassLabel label, std::uint64_t index);

  std::uint64_t next_index() const;
  const std::filesystem::path& root() const noexcept { return root_; }

 private:
  std::filesystem::path root_;
  std::uint64_t next_ = 1;
  mutable std::mutex mu_;
};

/// Highest pair index present under root (0 when none).
std::uint64_t scan_max_pair_index(const std::filesystem::path& root);

/// One-shot form of PairWriter::save.
SavedPair save_pair(const FramePair& pair, const SessionMeta& meta, const std::filesystem::path& root);

}  // namespace spill
