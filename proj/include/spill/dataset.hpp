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

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "spill/image.hpp"

namespace spill {

enum class Split { train, val, test, unassigned };

std::string_view to_string(Split s) noexcept;
std::optional<Split> parse_split(std::string_view text) noexcept;

inline constexpr std::string_view kUnknown = "unknown";
inline constexpr std::string_view kManifestFile = "manifest.jsonl";

struct ManifestEntry {
  std::filesystem::path path;  ///< relative to the manifest root
  Modality modality = Modality::thermal;
  ClassLabel class_label = ClassLabel::no_spill;
  std::string room{kUnknown};
  std::string liquid{kUnknown};
  Split split = Split::unassigned;
  std::uint64_t pair_index = 0;

  friend bool operator==(const ManifestEntry&, const ManifestEntry&) = default;
};

struct DatasetManifest {
  std::filesystem::path root;
  std::vector<ManifestEntry> entries;
  std::uint64_t seed = 0;
  /// Files under root that do not follow the capture layout.
  std::vector<std::filesystem::path> ignored;
  std::vector<std::string> warnings;

  std::size_t count(Split s) const noexcept;
  std::filesystem::path absolute(const ManifestEntry& e) const { return root / e.path; }
};

struct SplitRatios {
  double train = 0.7;
  double val = 0.2;
  double test = 0.1;
};

/// Throws invalid_argument unless each ratio is in (0,1) and they sum to 1.
void check_ratios(const SplitRatios& r);

/// Parses "0.7,0.2,0.1".
SplitRatios parse_ratios(std::string_view text);

/// Scans <root>/<modality>/<class>/pair_<index>_<modality>.png. Room and
/// liquid come from the pairs sidecar when present. Throws unreadable_root.
DatasetManifest build_manifest(const std::filesystem::path& root);

/// Largest-remainder apportionment of n over the ratios; ties favour train,
/// then val, then test. Returns {train, val, test}.
std::array<std::size_t, 3> apportion(std::size_t n, const SplitRatios& ratios);

struct SplitOptions {
  /// Keep both modalities of a pair in the same split.
  bool paired = false;
};

/// Stratified by (room, liquid, modality, class). Each cell receives the
/// floors of its quotas; the leftover units are then distributed, at most one
/// per split per cell, so that split totals equal apportion() of the whole
/// manifest. Cells with fewer than 3 entries go entirely to train with a
/// warning. Throws invalid_argument if any
/// entry is already assigned.
DatasetManifest split_manifest(DatasetManifest m, const SplitRatios& ratios, std::uint64_t seed,
                               const SplitOptions& options = {});

struct BalanceReport {
  std::size_t thermal = 0;
  std::size_t rgb = 0;
  std::size_t combined = 0;
  std::size_t spill = 0;
  std::size_t no_spill = 0;
  /// |thermal - rgb|, |spill - no_spill|
  std::size_t modality_delta = 0;
  std::size_t class_delta = 0;
  bool balanced = false;
  /// RGB entries without a thermal entry of the same pair index, and vice versa.
  std::vector<std::filesystem::path> orphans;
};

BalanceReport validate_dataset(const DatasetManifest& m);

struct SubsetFilter {
  std::optional<std::string> room;
  std::optional<std::string> liquid;
  Modality modality = Modality::thermal;
};

/// Throws empty_subset when nothing matches.
DatasetManifest select_subset(const DatasetManifest& m, const SubsetFilter& filter);

/// Entries of one split, in manifest order.
std::vector<ManifestEntry> entries_in(const DatasetManifest& m, Split s);

/// JSON Lines; paths are stored relative to the manifest file's directory
/// when the root is that directory or below it.
void save_manifest(const DatasetManifest& m, const std::filesystem::path& file);
DatasetManifest load_manifest(const std::filesystem::path& file);

/// Stable content hash over the entries (paths, labels, splits).
std::string manifest_hash(const DatasetManifest& m);

}  // namespace spill
