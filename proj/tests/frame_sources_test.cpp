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
#include <thread>

#include "spill/errors.hpp"
#include "spill/frame_sources.hpp"
#include "test_support.hpp"

namespace spill {
namespace {

namespace fs = std::filesystem;
using testing::random_frame;
using testing::ScratchDir;

Errc code_of(auto&& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e.code();
  }
  ADD_FAILURE() << "no error thrown";
  return Errc::io_error;
}

TEST(Descriptor, ParsesAllKinds) {
  const auto s = parse_source_descriptor("sim:7", Modality::thermal);
  EXPECT_EQ(s.kind, SourceDescriptor::Kind::simulated);
  EXPECT_EQ(s.seed, 7u);
  const auto r = parse_source_descriptor("replay:/tmp/x", Modality::rgb);
  EXPECT_EQ(r.kind, SourceDescriptor::Kind::replay);
  EXPECT_EQ(r.directory, fs::path("/tmp/x"));
  EXPECT_EQ(parse_source_descriptor("dev:0", Modality::rgb).device_id, "0");
  EXPECT_EQ(code_of([] { parse_source_descriptor("ftp:x", Modality::rgb); }), Errc::unknown_source_kind);
  EXPECT_EQ(code_of([] { parse_source_descriptor("nocolon", Modality::rgb); }), Errc::unknown_source_kind);
}

TEST(SimulatedSource, FirstFrameIsReproducible) {
  const auto d = parse_source_descriptor("sim:7", Modality::thermal);
  auto a = open_source(d);
  auto b = open_source(d);
  const auto fa = a->next();
  const auto fb = b->next();
  ASSERT_TRUE(fa && fb);
  EXPECT_TRUE(fa->same_pixels(*fb));
  EXPECT_EQ(fa->modality, Modality::thermal);
  EXPECT_EQ(fa->size(), kThermalSize);
}

TEST(SimulatedSource, SequenceIsReproducibleBitForBit) {
  for (Modality m : {Modality::thermal, Modality::rgb}) {
    SourceDescriptor d;
    d.modality = m;
    d.seed = 99;
    auto a = open_source(d);
    auto b = open_source(d);
    for (int i = 0; i < 6; ++i) {
      const auto fa = a->next();
      const auto fb = b->next();
      ASSERT_TRUE(fa->same_pixels(*fb));
      EXPECT_EQ(fa->timestamp_ms, fb->timestamp_ms);
      EXPECT_EQ(fa->size(), canonical_size(m));
    }
  }
}

TEST(SimulatedSource, DifferentSeedsDiffer) {
  auto a = open_source(parse_source_descriptor("sim:1", Modality::thermal));
  auto b = open_source(parse_source_descriptor("sim:2", Modality::thermal));
  EXPECT_FALSE(a->next()->same_pixels(*b->next()));
}

void write_replay(const fs::path& dir, Modality m, int n, const std::vector<std::int64_t>& stamps = {}) {
  fs::create_directories(dir);
  const Size s = canonical_size(m);
  std::ofstream ts;
  if (!stamps.empty()) ts.open(dir / "timestamps.csv");
  for (int i = 0; i < n; ++i) {
    const std::string name = "f" + std::to_string(i) + ".png";
    write_png(random_frame(s.width, s.height, m, static_cast<std::uint64_t>(i)), dir / name);
    if (!stamps.empty()) ts << name << "," << stamps[static_cast<std::size_t>(i)] << "\n";
  }
}

TEST(ReplaySource, YieldsEachFileThenEnds) {
  ScratchDir dir("replay");
  write_replay(dir.path(), Modality::rgb, 3);
  auto src = open_source(parse_source_descriptor("replay:" + dir.path().string(), Modality::rgb));
  for (int i = 0; i < 3; ++i) {
    const auto f = src->next();
    ASSERT_TRUE(f);
    EXPECT_TRUE(f->same_pixels(random_frame(640, 360, Modality::rgb, static_cast<std::uint64_t>(i))));
  }
  EXPECT_FALSE(src->next());
}

TEST(ReplaySource, EmptyOrMissingDirectory) {
  ScratchDir dir("empty");
  EXPECT_EQ(code_of([&] { open_source(parse_source_descriptor("replay:" + dir.path().string(), Modality::rgb)); }),
            Errc::source_unreadable);
  EXPECT_EQ(code_of([&] { open_source(parse_source_descriptor("replay:" + (dir / "nope").string(), Modality::rgb)); }),
            Errc::source_unreadable);
}

TEST(DeviceSource, UnknownDeviceIsUnavailable) {
  EXPECT_EQ(code_of([] { open_source(parse_source_descriptor("dev:nonexistent0", Modality::thermal)); }),
            Errc::device_unavailable);
}

TEST(CapturePair, EqualTimestampsGiveZeroSkew) {
  SourceDescriptor t;
  t.modality = Modality::thermal;
  t.start_ms = 100;
  SourceDescriptor r = t;
  r.modality = Modality::rgb;
  auto ts = open_source(t);
  auto rs = open_source(r);
  const auto pair = capture_pair(*ts, *rs);
  EXPECT_EQ(pair.skew_ms, 0);
  EXPECT_EQ(pair.thermal.timestamp_ms, 100);
}

TEST(CapturePair, MeasuredSkewWithinLimit) {
  ScratchDir dir("skew");
  write_replay(dir / "t", Modality::thermal, 2, {100, 200});
  write_replay(dir / "r", Modality::rgb, 2, {130, 280});
  auto ts = open_source(parse_source_descriptor("replay:" + (dir / "t").string(), Modality::thermal));
  auto rs = open_source(parse_source_descriptor("replay:" + (dir / "r").string(), Modality::rgb));
  const auto pair = capture_pair(*ts, *rs, 50, "s1");
  EXPECT_EQ(pair.skew_ms, 30);
  EXPECT_EQ(pair.session_id, "s1");
  // second frames: 200 vs 280
  EXPECT_EQ(code_of([&] { capture_pair(*ts, *rs, 50); }), Errc::skew_exceeded);
  EXPECT_EQ(code_of([&] { capture_pair(*ts, *rs, 50); }), Errc::end_of_stream);
}

TEST(CapturePair, SkewOf80ExceedsDefault) {
  ScratchDir dir("skew80");
  write_replay(dir / "t", Modality::thermal, 1, {100});
  write_replay(dir / "r", Modality::rgb, 1, {180});
  auto ts = open_source(parse_source_descriptor("replay:" + (dir / "t").string(), Modality::thermal));
  auto rs = open_source(parse_source_descriptor("replay:" + (dir / "r").string(), Modality::rgb));
  EXPECT_EQ(code_of([&] { capture_pair(*ts, *rs, kDefaultMaxSkewMs); }), Errc::skew_exceeded);
}

TEST(CapturePair, RejectsSwappedModalities) {
  auto ts = open_source(parse_source_descriptor("sim:1", Modality::thermal));
  auto rs = open_source(parse_source_descriptor("sim:1", Modality::rgb));
  EXPECT_EQ(code_of([&] { capture_pair(*rs, *ts); }), Errc::modality_mismatch);
}

FramePair sim_pair(std::uint64_t seed) {
  auto ts = open_source(parse_source_descriptor("sim:" + std::to_string(seed), Modality::thermal));
  auto rs = open_source(parse_source_descriptor("sim:" + std::to_string(seed), Modality::rgb));
  return capture_pair(*ts, *rs);
}

TEST(SavePair, NamingAndCounter) {
  ScratchDir dir("save");
  const auto first = save_pair(sim_pair(1), {"s1", "Atrium", "water", ClassLabel::spill}, dir.path());
  EXPECT_EQ(first.thermal_path, dir / "thermal/spill/pair_000001_thermal.png");
  EXPECT_EQ(first.rgb_path, dir / "rgb/spill/pair_000001_rgb.png");
  EXPECT_TRUE(fs::exists(first.thermal_path));
  EXPECT_TRUE(fs::exists(first.rgb_path));
  const auto second = save_pair(sim_pair(2), {"s1", "Atrium", "water", ClassLabel::no_spill}, dir.path());
  EXPECT_EQ(second.index, 2u);
  EXPECT_EQ(second.thermal_path, dir / "thermal/no_spill/pair_000002_thermal.png");
  EXPECT_EQ(second.rgb_path, dir / "rgb/no_spill/pair_000002_rgb.png");
}

TEST(SavePair, SavedPixelsRoundTrip) {
  ScratchDir dir("rt");
  const FramePair p = sim_pair(3);
  const auto saved = save_pair(p, {"s1", "J234", "coke", ClassLabel::spill}, dir.path());
  EXPECT_TRUE(read_png(saved.thermal_path, Modality::thermal).same_pixels(p.thermal));
  EXPECT_TRUE(read_png(saved.rgb_path, Modality::rgb).same_pixels(p.rgb));
}

TEST(SavePair, UnwritableRootLeavesNothing) {
  ScratchDir dir("ro");
  // A regular file where the root directory should be: writes must fail
  // regardless of the process's privileges.
  std::ofstream(dir / "blocker") << "x";
  const fs::path root = dir / "blocker" / "data";
  EXPECT_EQ(code_of([&] { save_pair(sim_pair(1), {"s1", "Atrium", "water", ClassLabel::spill}, root); }),
            Errc::write_failure);
  std::size_t files = 0;
  for (auto& e : fs::recursive_directory_iterator(dir.path())) files += e.is_regular_file();
  EXPECT_EQ(files, 1u);
}

TEST(SavePair, FailureOnSecondFileLeavesNeither) {
  ScratchDir dir("half");
  // rgb/spill is occupied by a file, so only the thermal side can be written.
  fs::create_directories(dir / "rgb");
  std::ofstream(dir / "rgb" / "spill") << "x";
  EXPECT_THROW(save_pair(sim_pair(1), {"s1", "Atrium", "water", ClassLabel::spill}, dir.path()), Error);
  EXPECT_FALSE(fs::exists(dir / "thermal/spill/pair_000001_thermal.png"));
  for (auto& e : fs::recursive_directory_iterator(dir.path())) {
    EXPECT_EQ(e.path().filename().string().find(".tmp"), std::string::npos) << e.path();
  }
}

TEST(SavePair, IndexCollision) {
  ScratchDir dir("coll");
  PairWriter w(dir.path());
  // another writer claims index 1 behind this writer's back
  save_pair(sim_pair(1), {"s1", "Atrium", "water", ClassLabel::spill}, dir.path());
  EXPECT_EQ(code_of([&] { w.save(sim_pair(2), {"s1", "Atrium", "water", ClassLabel::spill}); }),
            Errc::index_collision);
}

TEST(SavePair, ResumesAfterExistingIndex) {
  ScratchDir dir("resume");
  save_pair(sim_pair(1), {"s1", "Atrium", "water", ClassLabel::spill}, dir.path());
  save_pair(sim_pair(2), {"s1", "Atrium", "water", ClassLabel::spill}, dir.path());
  EXPECT_EQ(scan_max_pair_index(dir.path()), 2u);
  EXPECT_EQ(PairWriter(dir.path()).next_index(), 3u);
}

TEST(SavePair, ConcurrentWritersGetDistinctIndices) {
  ScratchDir dir("mt");
  PairWriter w(dir.path());
  const FramePair p = sim_pair(4);
  std::vector<std::thread> threads;
  std::vector<std::uint64_t> got(8);
  for (int i = 0; i < 8; ++i) {
    threads.emplace_back([&, i] { got[static_cast<std::size_t>(i)] = w.save(p, {"s1", "A", "w", ClassLabel::spill}).index; });
  }
  for (auto& t : threads) t.join();
  std::sort(got.begin(), got.end());
  for (std::size_t i = 0; i < got.size(); ++i) EXPECT_EQ(got[i], i + 1);
}

TEST(SessionMeta, SessionIdMustBeFilesystemSafe) {
  EXPECT_TRUE(is_filesystem_safe("run_01-a"));
  EXPECT_FALSE(is_filesystem_safe(""));
  EXPECT_FALSE(is_filesystem_safe("a/b"));
  EXPECT_FALSE(is_filesystem_safe("a b"));
  EXPECT_THROW(check_session_meta({"../x", "Atrium", "water", ClassLabel::spill}), Error);
}

}  // namespace
}  // namespace spill
