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

#include <gtest/gtest.h>

#include <fstream>
#include <map>

#include "spill/dataset.hpp"
#include "spill/errors.hpp"
#include "spill/frame_sources.hpp"
#include "spill/rng.hpp"
#include "test_support.hpp"

namespace spill {
namespace {

namespace fs = std::filesystem;
using testing::ScratchDir;
using testing::solid_frame;

void touch_image(const fs::path& root, Modality m, ClassLabel c, std::uint64_t index) {
  const fs::path p = pair_path(root, m, c, index);
  fs::create_directories(p.parent_path());
  const Size s = canonical_size(m);
  write_png(solid_frame(s.width, s.height, m, 10), p);
}

// In-memory manifest with `per_cell` entries in every (room, liquid,
// modality, class) cell.
DatasetManifest synthetic_manifest(std::size_t per_cell, const std::vector<std::string>& rooms,
                                   const std::vector<std::string>& liquids) {
  DatasetManifest m;
  m.root = "/data";
  std::uint64_t index = 1;
  for (const auto& room : rooms)
    for (const auto& liquid : liquids)
      for (ClassLabel c : {ClassLabel::spill, ClassLabel::no_spill})
        for (std::size_t i = 0; i < per_cell; ++i, ++index)
          for (Modality mod : {Modality::thermal, Modality::rgb}) {
            ManifestEntry e;
            e.path = fs::path(std::string(to_string(mod))) / std::string(to_string(c)) / pair_file_name(index, mod);
            e.modality = mod;
            e.class_label = c;
            e.room = room;
            e.liquid = liquid;
            e.pair_index = index;
            m.entries.push_back(e);
          }
  return m;
}

TEST(BuildManifest, EnumeratesImages) {
  ScratchDir dir("bm");
  touch_image(dir.path(), Modality::thermal, ClassLabel::spill, 1);
  touch_image(dir.path(), Modality::thermal, ClassLabel::spill, 2);
  touch_image(dir.path(), Modality::thermal, ClassLabel::no_spill, 3);
  touch_image(dir.path(), Modality::thermal, ClassLabel::no_spill, 4);
  const auto m = build_manifest(dir.path());
  ASSERT_EQ(m.entries.size(), 4u);
  for (const auto& e : m.entries) {
    EXPECT_EQ(e.split, Split::unassigned);
    EXPECT_EQ(e.modality, Modality::thermal);
    EXPECT_EQ(e.room, "unknown");
  }
  EXPECT_EQ(m.entries[0].path, fs::path("thermal/no_spill/pair_000003_thermal.png"));
  EXPECT_EQ(m.entries[3].class_label, ClassLabel::spill);
}

TEST(BuildManifest, EmptyRootWarns) {
  ScratchDir dir("bm_empty");
  const auto m = build_manifest(dir.path());
  EXPECT_TRUE(m.entries.empty());
  EXPECT_FALSE(m.warnings.empty());
}

TEST(BuildManifest, StrayFilesAreReported) {
  ScratchDir dir("bm_stray");
  touch_image(dir.path(), Modality::thermal, ClassLabel::spill, 1);
  std::ofstream(dir / "thermal" / "README.txt") << "notes";
  std::ofstream(dir / "thermal" / "spill" / "pair_000002_rgb.png") << "wrong modality dir";
  const auto m = build_manifest(dir.path());
  EXPECT_EQ(m.entries.size(), 1u);
  ASSERT_EQ(m.ignored.size(), 2u);
  EXPECT_EQ(m.ignored[0], fs::path("thermal/README.txt"));
}

TEST(BuildManifest, MissingRoot) {
  try {
    build_manifest("/nonexistent/root/for/test");
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), Errc::unreadable_root);
  }
}

TEST(BuildManifest, SidecarSuppliesRoomAndLiquid) {
  ScratchDir dir("bm_side");
  PairWriter w(dir.path());
  FramePair p;
  p.thermal = solid_frame(256, 192, Modality::thermal, 1);
  p.rgb = solid_frame(640, 360, Modality::rgb, 2);
  w.save(p, {"s", "J234", "coke", ClassLabel::spill});
  const auto m = build_manifest(dir.path());
  ASSERT_EQ(m.entries.size(), 2u);
  for (const auto& e : m.entries) {
    EXPECT_EQ(e.room, "J234");
    EXPECT_EQ(e.liquid, "coke");
    EXPECT_EQ(e.pair_index, 1u);
  }
}

TEST(Apportion, HandRunExamples) {
  EXPECT_EQ(apportion(10, {}), (std::array<std::size_t, 3>{7, 2, 1}));
  // 6.3, 1.8, 0.9 -> floors 6,1,0; remainders award test then val
  EXPECT_EQ(apportion(9, {}), (std::array<std::size_t, 3>{6, 2, 1}));
  EXPECT_EQ(apportion(4000, {}), (std::array<std::size_t, 3>{2800, 800, 400}));
  // ties favour train: 5 * (0.5, 0.25, 0.25) = 2.5, 1.25, 1.25
  EXPECT_EQ(apportion(5, {0.5, 0.25, 0.25}), (std::array<std::size_t, 3>{3, 1, 1}));
  EXPECT_EQ(apportion(145, {200.0 / 290, 60.0 / 290, 30.0 / 290}), (std::array<std::size_t, 3>{100, 30, 15}));
}

TEST(Apportion, SumsAndStaysWithinOneOfQuota) {
  Rng rng(1);
  for (int t = 0; t < 500; ++t) {
    const double a = rng.uniform(0.05, 0.9);
    const double b = rng.uniform(0.05, 0.95 - a);
    const SplitRatios r{a, b, 1.0 - a - b};
    const std::size_t n = rng.below(300);
    const auto c = apportion(n, r);
    EXPECT_EQ(c[0] + c[1] + c[2], n);
    EXPECT_LT(std::abs(double(c[0]) - n * r.train), 1.0);
    EXPECT_LT(std::abs(double(c[1]) - n * r.val), 1.0);
    EXPECT_LT(std::abs(double(c[2]) - n * r.test), 1.0);
  }
}

TEST(Ratios, ParseAndValidate) {
  const auto r = parse_ratios("0.7,0.2,0.1");
  EXPECT_DOUBLE_EQ(r.val, 0.2);
  EXPECT_THROW(parse_ratios("0.7,0.2"), Error);
  EXPECT_THROW(parse_ratios("0.7,0.3,0.1"), Error);
  EXPECT_THROW(parse_ratios("1,0,0"), Error);
  EXPECT_THROW(parse_ratios("a,b,c"), Error);
}

TEST(Split, FourThousandBalanced) {
  // 2 rooms x 4 liquids x 2 modalities x 2 classes, 125 per cell; per-cell
  // quotas 87.5/25/12.5
  const auto m = synthetic_manifest(125, {"Atrium", "J234"}, {"water", "coke", "red_juice", "yellow_juice"});
  ASSERT_EQ(m.entries.size(), 4000u);
  const auto s = split_manifest(m, {}, 17);
  EXPECT_EQ(s.count(Split::train), 2800u);
  EXPECT_EQ(s.count(Split::val), 800u);
  EXPECT_EQ(s.count(Split::test), 400u);
  EXPECT_EQ(s.count(Split::unassigned), 0u);
}

TEST(Split, CellOfTenAndNine) {
  auto m10 = synthetic_manifest(10, {"A"}, {"w"});
  auto s = split_manifest(m10, {}, 1);
  // four cells of 10
  EXPECT_EQ(s.count(Split::train), 28u);
  EXPECT_EQ(s.count(Split::val), 8u);
  EXPECT_EQ(s.count(Split::test), 4u);
  // a single cell of 9
  auto m9 = select_subset(synthetic_manifest(9, {"A"}, {"w"}), {std::nullopt, std::nullopt, Modality::thermal});
  std::erase_if(m9.entries, [](const ManifestEntry& e) { return e.class_label == ClassLabel::spill; });
  ASSERT_EQ(m9.entries.size(), 9u);
  s = split_manifest(m9, {}, 1);
  EXPECT_EQ(s.count(Split::train), 6u);
  EXPECT_EQ(s.count(Split::val), 2u);
  EXPECT_EQ(s.count(Split::test), 1u);
}

TEST(Split, TotalsFollowGlobalApportionment) {
  // four cells of 9: quotas 6.3/1.8/0.9 each, totals 25.2/7.2/3.6 -> 25/7/4
  const auto s = split_manifest(synthetic_manifest(9, {"A"}, {"w"}), {}, 1);
  EXPECT_EQ(s.count(Split::train), 25u);
  EXPECT_EQ(s.count(Split::val), 7u);
  EXPECT_EQ(s.count(Split::test), 4u);
}

DatasetManifest ragged_manifest(std::uint64_t seed) {
  Rng rng(seed);
  DatasetManifest m;
  std::uint64_t index = 1;
  for (const char* room : {"A", "B", "C"})
    for (ClassLabel c : {ClassLabel::spill, ClassLabel::no_spill}) {
      const std::size_t n = 3 + rng.below(40);
      for (std::size_t i = 0; i < n; ++i, ++index) {
        ManifestEntry e;
        e.path = "thermal/" + std::string(to_string(c)) + "/" + pair_file_name(index, Modality::thermal);
        e.class_label = c;
        e.room = room;
        e.pair_index = index;
        m.entries.push_back(e);
      }
    }
  return m;
}

TEST(Split, StratifiedPerCellWithExactTotals) {
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    const auto s = split_manifest(ragged_manifest(seed), {}, seed);
    std::map<std::string, std::array<double, 4>> cells;
    for (const auto& e : s.entries) {
      auto& c = cells[e.room + std::string(to_string(e.class_label))];
      c[static_cast<std::size_t>(e.split)] += 1;
      c[3] += 1;
    }
    EXPECT_EQ((std::array<std::size_t, 3>{s.count(Split::train), s.count(Split::val), s.count(Split::test)}),
              apportion(s.entries.size(), {}));
    for (const auto& [key, c] : cells) {
      EXPECT_LT(std::abs(c[0] - 0.7 * c[3]), 1.0) << key;
      EXPECT_LT(std::abs(c[1] - 0.2 * c[3]), 1.0) << key;
      EXPECT_LT(std::abs(c[2] - 0.1 * c[3]), 1.0) << key;
    }
  }
}

std::map<std::string, Split> assignment(const DatasetManifest& m) {
  std::map<std::string, Split> out;
  for (const auto& e : m.entries) out[e.path.generic_string()] = e.split;
  return out;
}

TEST(Split, DeterministicAndOrderIndependent) {
  auto m = synthetic_manifest(20, {"Atrium", "J234"}, {"water", "coke"});
  const auto a = assignment(split_manifest(m, {}, 99));
  EXPECT_EQ(a, assignment(split_manifest(m, {}, 99)));
  Rng rng(4);
  rng.shuffle(m.entries.begin(), m.entries.end());
  EXPECT_EQ(a, assignment(split_manifest(m, {}, 99)));
  EXPECT_NE(a, assignment(split_manifest(m, {}, 100)));
}

TEST(Split, TinyCellsGoToTrainWithWarning) {
  auto m = synthetic_manifest(2, {"A"}, {"w"});
  const auto s = split_manifest(m, {}, 1);
  EXPECT_EQ(s.count(Split::train), m.entries.size());
  EXPECT_EQ(s.warnings.size(), 4u);
}

TEST(Split, RejectsAlreadyAssigned) {
  auto m = synthetic_manifest(5, {"A"}, {"w"});
  m.entries[0].split = Split::val;
  EXPECT_THROW(split_manifest(m, {}, 1), Error);
}

TEST(Split, PairedKeepsPartnersTogether) {
  auto m = synthetic_manifest(20, {"A"}, {"w"});
  const auto s = split_manifest(m, {}, 3, {.paired = true});
  std::map<std::uint64_t, std::set<Split>> by_pair;
  for (const auto& e : s.entries) by_pair[e.pair_index].insert(e.split);
  for (const auto& [idx, splits] : by_pair) EXPECT_EQ(splits.size(), 1u) << idx;
  EXPECT_EQ(s.count(Split::train), 56u);
}

TEST(Validate, BalancedFourWay) {
  const auto m = synthetic_manifest(1000, {"A"}, {"w"});
  const auto r = validate_dataset(m);
  EXPECT_TRUE(r.balanced);
  EXPECT_EQ(r.thermal, 2000u);
  EXPECT_EQ(r.class_delta, 0u);
}

TEST(Validate, ImbalanceAndOrphans) {
  auto m = synthetic_manifest(1000, {"A"}, {"w"});
  // move one thermal no_spill entry into spill: 1001 vs 999
  for (auto& e : m.entries) {
    if (e.modality == Modality::thermal && e.class_label == ClassLabel::no_spill) {
      e.class_label = ClassLabel::spill;
      break;
    }
  }
  auto r = validate_dataset(m);
  EXPECT_FALSE(r.balanced);
  EXPECT_EQ(r.class_delta, 2u);
  EXPECT_TRUE(r.orphans.empty());

  auto m2 = synthetic_manifest(3, {"A"}, {"w"});
  m2.entries.erase(std::find_if(m2.entries.begin(), m2.entries.end(),
                                [](const ManifestEntry& e) { return e.modality == Modality::thermal; }));
  r = validate_dataset(m2);
  ASSERT_EQ(r.orphans.size(), 1u);
  EXPECT_NE(r.orphans[0].generic_string().find("_rgb.png"), std::string::npos);
}

TEST(Subset, FiltersAndPreservesSplits) {
  const auto m = split_manifest(synthetic_manifest(10, {"Atrium", "J234"}, {"water", "coke"}), {}, 1);
  const auto s = select_subset(m, {"Atrium", "water", Modality::thermal});
  EXPECT_EQ(s.entries.size(), 20u);
  for (const auto& e : s.entries) {
    EXPECT_EQ(e.room, "Atrium");
    EXPECT_EQ(e.liquid, "water");
    EXPECT_EQ(e.modality, Modality::thermal);
    const auto it = std::find_if(m.entries.begin(), m.entries.end(), [&](auto& x) { return x.path == e.path; });
    EXPECT_EQ(it->split, e.split);
  }
  EXPECT_EQ(select_subset(m, {std::nullopt, std::nullopt, Modality::thermal}).entries.size(), 80u);
  try {
    select_subset(m, {"Atrium", "unknown", Modality::thermal});
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), Errc::empty_subset);
  }
}

TEST(Persistence, JsonLinesRoundTrip) {
  ScratchDir dir("mf");
  auto m = split_manifest(synthetic_manifest(4, {"A"}, {"w"}), {}, 8);
  m.root = dir.path();
  save_manifest(m, dir / "manifest.jsonl");
  const auto back = load_manifest(dir / "manifest.jsonl");
  EXPECT_EQ(back.entries, m.entries);
  EXPECT_EQ(back.seed, 8u);
  EXPECT_EQ(manifest_hash(back), manifest_hash(m));
  std::ifstream in(dir / "manifest.jsonl");
  std::string line;
  std::size_t lines = 0;
  while (std::getline(in, line)) ++lines;
  EXPECT_EQ(lines, m.entries.size());
}

TEST(Persistence, HashChangesWithSplit) {
  auto m = synthetic_manifest(4, {"A"}, {"w"});
  const auto h0 = manifest_hash(m);
  EXPECT_NE(h0, manifest_hash(split_manifest(m, {}, 1)));
}

}  // namespace
}  // namespace spill
