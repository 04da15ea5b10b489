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

#include "spill/synth.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <unordered_map>

#include "spill/errors.hpp"
#include "spill/rng.hpp"

namespace spill {

SynthSpec SynthSpec::separable(std::uint64_t seed) {
  SynthSpec s;
  s.background_mean = 90.0;
  s.background_noise_sigma = 3.0;
  s.blob_delta = 60.0;
  s.seed = seed;
  return s;
}

SynthSpec SynthSpec::hard(std::uint64_t seed) {
  SynthSpec s;
  s.background_mean = 90.0;
  s.background_noise_sigma = 5.0;
  s.blob_delta = 5.0;
  s.seed = seed;
  return s;
}

bool SynthSpec::is_separable() const noexcept {
  return std::abs(blob_delta) >= 3.0 * background_noise_sigma;
}

void check_synth_spec(const SynthSpec& spec) {
  auto bad = [](const std::string& what) { throw Error(Errc::invalid_argument, "synth spec: " + what); };
  if (!(spec.background_mean >= 0.0 && spec.background_mean <= 255.0)) bad("background_mean must be in [0,255]");
  if (!(spec.background_noise_sigma >= 0.0) || !std::isfinite(spec.background_noise_sigma)) {
    bad("noise sigma must be finite and >= 0");
  }
  if (!std::isfinite(spec.blob_delta)) bad("blob_delta must be finite");
  if (!(spec.blob_radius_min >= 1.0 && spec.blob_radius_min <= spec.blob_radius_max) ||
      !std::isfinite(spec.blob_radius_max)) {
    bad("radius range must satisfy 1 <= min <= max");
  }
}

namespace {

struct Anchor {
  double t;
  double r, g, b;
};

constexpr Anchor kIronbow[] = {
    {0.00, 0, 0, 0},       {0.15, 30, 0, 90},    {0.35, 140, 0, 150},   {0.55, 220, 60, 40},
    {0.75, 250, 150, 0},   {0.90, 255, 220, 60}, {1.00, 255, 255, 255},
};

std::array<std::array<std::uint8_t, 3>, 256> build_palette() {
  std::array<std::array<std::uint8_t, 3>, 256> lut{};
  for (int i = 0; i < 256; ++i) {
    const double t = i / 255.0;
    std::size_t k = 0;
    while (k + 2 < std::size(kIronbow) && t > kIronbow[k + 1].t) ++k;
    const Anchor& a = kIronbow[k];
    const Anchor& b = kIronbow[k + 1];
    const double u = (t - a.t) / (b.t - a.t);
    auto mix = [u](double x, double y) { return static_cast<std::uint8_t>(std::lround(x + (y - x) * u)); };
    lut[static_cast<std::size_t>(i)] = {mix(a.r, b.r), mix(a.g, b.g), mix(a.b, b.b)};
  }
  return lut;
}

std::uint32_t pack(std::uint8_t r, std::uint8_t g, std::uint8_t b) {
  return (std::uint32_t{r} << 16) | (std::uint32_t{g} << 8) | b;
}

std::uint8_t clamp_u8(double v) {
  return static_cast<std::uint8_t>(std::clamp(std::lround(v), 0L, 255L));
}

constexpr double kRgbScaleX = 640.0 / 256.0;
constexpr double kRgbScaleY = 360.0 / 192.0;
constexpr double kEdgeRampPx = 3.0;
constexpr double kRgbDarken = 0.92;

// Sub-streams of the per-index generator.
enum Stream : std::uint64_t { kThermalNoise = 1, kFloor = 2, kBlob = 3 };

std::uint64_t stream_seed(const SynthSpec& spec, std::uint64_t index, Stream s) {
  return derive_seed(derive_seed(spec.seed, index), s);
}

std::vector<std::uint8_t> thermal_background(const SynthSpec& spec, std::uint64_t index) {
  Rng rng(stream_seed(spec, index, kThermalNoise));
  std::vector<std::uint8_t> gray(static_cast<std::size_t>(kThermalSize.width * kThermalSize.height));
  for (auto& g : gray) {
    const double noise = spec.background_noise_sigma > 0.0 ? spec.background_noise_sigma * rng.normal() : 0.0;
    g = clamp_u8(spec.background_mean + noise);
  }
  return gray;
}

// Floor texture in linear RGB; tile: 80 px tiles with grout, concrete: smooth
// value noise plus speckle.
Frame floor_texture(const SynthSpec& spec, std::uint64_t index) {
  Rng rng(stream_seed(spec, index, kFloor));
  Frame f = Frame::blank(kRgbRawSize.width, kRgbRawSize.height, Modality::rgb);
  const double base[3] = {rng.uniform(150, 190), rng.uniform(145, 185), rng.uniform(135, 175)};
  if (spec.rgb_texture == FloorTexture::tile) {
    constexpr int kTile = 80;
    constexpr int kGrout = 3;
    const int ox = static_cast<int>(rng.below(kTile));
    const int oy = static_cast<int>(rng.below(kTile));
    const int tiles_x = kRgbRawSize.width / kTile + 2;
    const int tiles_y = kRgbRawSize.height / kTile + 2;
    std::vector<double> shade(static_cast<std::size_t>(tiles_x * tiles_y));
    for (auto& s : shade) s = rng.uniform(-8, 8);
    for (int y = 0; y < f.height; ++y) {
      for (int x = 0; x < f.width; ++x) {
        const int tx = (x + ox) / kTile;
        const int ty = (y + oy) / kTile;
        const bool grout = (x + ox) % kTile < kGrout || (y + oy) % kTile < kGrout;
        const double s = grout ? -55.0 : shade[static_cast<std::size_t>(ty * tiles_x + tx)];
        const double speck = rng.uniform(-3, 3);
        for (int c = 0; c < 3; ++c) f.at(x, y, c) = clamp_u8(base[c] + s + speck);
      }
    }
  } else {
    constexpr int kCell = 32;
    const int gx = kRgbRawSize.width / kCell + 2;
    const int gy = kRgbRawSize.height / kCell + 2;
    std::vector<double> lattice(static_cast<std::size_t>(gx * gy));
    for (auto& v : lattice) v = rng.uniform(-14, 14);
    auto at = [&](int i, int j) { return lattice[static_cast<std::size_t>(j * gx + i)]; };
    for (int y = 0; y < f.height; ++y) {
      for (int x = 0; x < f.width; ++x) {
        const double fx = static_cast<double>(x) / kCell;
        const double fy = static_cast<double>(y) / kCell;
        const int i = static_cast<int>(fx);
        const int j = static_cast<int>(fy);
        const double u = fx - i;
        const double v = fy - j;
        const double su = u * u * (3 - 2 * u);
        const double sv = v * v * (3 - 2 * v);
        const double n = (at(i, j) * (1 - su) + at(i + 1, j) * su) * (1 - sv) +
                         (at(i, j + 1) * (1 - su) + at(i + 1, j + 1) * su) * sv;
        const double speck = rng.uniform(-6, 6);
        for (int c = 0; c < 3; ++c) f.at(x, y, c) = clamp_u8(base[c] - 20 + n + speck);
      }
    }
  }
  return f;
}

FramePair assemble(std::span<const std::uint8_t> gray, Frame rgb, std::uint64_t index) {
  FramePair p;
  p.thermal = colorize_thermal(gray, kThermalSize.width, kThermalSize.height);
  p.rgb = std::move(rgb);
  const auto ts = static_cast<std::int64_t>(index) * 100;
  p.thermal.timestamp_ms = ts;
  p.rgb.timestamp_ms = ts;
  p.thermal.source_id = "synth";
  p.rgb.source_id = "synth";
  p.session_id = "synth";
  return p;
}

struct Ellipse {
  double cx, cy, a, b, angle;

  // Normalized radial coordinate (1 on the boundary) and the Euclidean
  // distance outside the boundary measured along the ray from the centre.
  std::pair<double, double> locate(double x, double y) const {
    const double dx = x - cx;
    const double dy = y - cy;
    const double c = std::cos(angle);
    const double s = std::sin(angle);
    const double u = c * dx + s * dy;
    const double v = -s * dx + c * dy;
    const double rho = std::sqrt((u / a) * (u / a) + (v / b) * (v / b));
    if (rho <= 1.0) return {rho, 0.0};
    const double len = std::hypot(dx, dy);
    return {rho, len * (1.0 - 1.0 / rho)};
  }
};

double soft_alpha(const Ellipse& e, double x, double y, double ramp) {
  const auto [rho, outside] = e.locate(x, y);
  if (rho <= 1.0) return 1.0;
  return std::max(0.0, 1.0 - outside / ramp);
}

}  // namespace

const std::array<std::array<std::uint8_t, 3>, 256>& thermal_palette() {
  static const auto lut = build_palette();
  return lut;
}

Frame colorize_thermal(std::span<const std::uint8_t> gray, int width, int height) {
  if (gray.size() != static_cast<std::size_t>(width) * static_cast<std::size_t>(height)) {
    throw Error(Errc::dimension_mismatch, "gray buffer does not match frame size");
  }
  const auto& lut = thermal_palette();
  Frame f = Frame::blank(width, height, Modality::thermal);
  for (std::size_t i = 0; i < gray.size(); ++i) {
    const auto& c = lut[gray[i]];
    std::copy(c.begin(), c.end(), f.pixels.begin() + static_cast<std::ptrdiff_t>(i * 3));
  }
  return f;
}

std::vector<std::uint8_t> thermal_intensity(const Frame& thermal) {
  check_frame(thermal);
  static const auto inverse = [] {
    std::unordered_map<std::uint32_t, std::uint8_t> m;
    const auto& lut = thermal_palette();
    for (int i = 0; i < 256; ++i) {
      const auto& c = lut[static_cast<std::size_t>(i)];
      m.emplace(pack(c[0], c[1], c[2]), static_cast<std::uint8_t>(i));
    }
    return m;
  }();
  const auto& lut = thermal_palette();
  std::vector<std::uint8_t> out(static_cast<std::size_t>(thermal.width) * static_cast<std::size_t>(thermal.height));
  for (std::size_t i = 0; i < out.size(); ++i) {
    const std::uint8_t* p = &thermal.pixels[i * 3];
    if (auto it = inverse.find(pack(p[0], p[1], p[2])); it != inverse.end()) {
      out[i] = it->second;
      continue;
    }
    int best = 0;
    long best_d = -1;
    for (int k = 0; k < 256; ++k) {
      const auto& c = lut[static_cast<std::size_t>(k)];
      long d = 0;
      for (int ch = 0; ch < 3; ++ch) {
        const long diff = static_cast<long>(p[ch]) - c[static_cast<std::size_t>(ch)];
        d += diff * diff;
      }
      if (best_d < 0 || d < best_d) {
        best_d = d;
        best = k;
      }
    }
    out[i] = static_cast<std::uint8_t>(best);
  }
  return out;
}

FramePair gen_no_spill(const SynthSpec& spec, std::uint64_t index) {
  check_synth_spec(spec);
  const auto gray = thermal_background(spec, index);
  return assemble(gray, floor_texture(spec, index), index);
}

SpillSample gen_spill(const SynthSpec& spec, std::uint64_t index) {
  check_synth_spec(spec);
  Rng rng(stream_seed(spec, index, kBlob));
  const double a = rng.uniform(spec.blob_radius_min, spec.blob_radius_max);
  const double b = rng.uniform(std::max(spec.blob_radius_min, 0.5 * a), a);
  const double angle = rng.uniform(0.0, std::numbers::pi);
  const double W = kThermalSize.width;
  const double H = kThermalSize.height;
  // Keep the centre far enough in that the blob usually stays in frame.
  const double mx = std::min(a, W / 2.0);
  const double my = std::min(a, H / 2.0);
  const Ellipse e{rng.uniform(mx, W - mx), rng.uniform(my, H - my), a, b, angle};

  SpillSample out;
  out.center = {e.cx, e.cy};
  out.radius_major = a;
  out.radius_minor = b;
  out.angle_rad = angle;
  out.clipped = e.cx - a - kEdgeRampPx < 0 || e.cy - a - kEdgeRampPx < 0 || e.cx + a + kEdgeRampPx > W ||
                e.cy + a + kEdgeRampPx > H;

  // Noise is drawn exactly as for the no-spill frame, then the blob is added.
  Rng noise(stream_seed(spec, index, kThermalNoise));
  std::vector<std::uint8_t> gray(static_cast<std::size_t>(kThermalSize.width * kThermalSize.height));
  out.mask.assign(gray.size(), 0);
  for (int y = 0; y < kThermalSize.height; ++y) {
    for (int x = 0; x < kThermalSize.width; ++x) {
      const std::size_t i = static_cast<std::size_t>(y * kThermalSize.width + x);
      const double n = spec.background_noise_sigma > 0.0 ? spec.background_noise_sigma * noise.normal() : 0.0;
      const double alpha = soft_alpha(e, x, y, kEdgeRampPx);
      gray[i] = clamp_u8(spec.background_mean + n + alpha * spec.blob_delta);
      out.mask[i] = e.locate(x, y).first <= 1.0 ? 1 : 0;
    }
  }

  Frame rgb = floor_texture(spec, index);
  const Ellipse er{e.cx * kRgbScaleX, e.cy * kRgbScaleY, a * kRgbScaleX, b * kRgbScaleY, angle};
  for (int y = 0; y < rgb.height; ++y) {
    for (int x = 0; x < rgb.width; ++x) {
      const double alpha = soft_alpha(er, x, y, kEdgeRampPx * kRgbScaleX);
      if (alpha <= 0.0) continue;
      const double factor = 1.0 - alpha * (1.0 - kRgbDarken);
      for (int c = 0; c < 3; ++c) rgb.at(x, y, c) = clamp_u8(rgb.at(x, y, c) * factor);
    }
  }
  out.pair = assemble(gray, std::move(rgb), index);
  return out;
}

std::vector<std::pair<std::string, std::string>> default_combos() {
  std::vector<std::pair<std::string, std::string>> out;
  for (std::string_view room : {kRoomAtrium, kRoomJ234}) {
    for (std::string_view liquid : kLiquids) out.emplace_back(room, liquid);
  }
  return out;
}

DatasetManifest gen_dataset(const SynthSpec& spec, std::size_t n_per_class, const std::filesystem::path& out_root,
                            const SynthDatasetOptions& options) {
  check_synth_spec(spec);
  if (n_per_class < 2) throw Error(Errc::invalid_argument, "n_per_class must be >= 2");
  const auto combos = options.combos.empty() ? default_combos() : options.combos;
  PairWriter writer(out_root);
  const Calibration calib = identity_calibration();
  const std::string session = "synth_" + std::to_string(spec.seed);

  auto persist = [&](const FramePair& pair, ClassLabel label, std::size_t i) {
    const auto& [room, liquid] = combos[i % combos.size()];
    const SavedPair saved = writer.save(pair, {session, room, liquid, label});
    if (options.with_combined) {
      writer.save_extra(fuse_side_by_side(pair.thermal, align_rgb(pair.rgb, calib)), label, saved.index);
    }
  };
  for (std::size_t i = 0; i < n_per_class; ++i) {
    persist(gen_spill(spec, 2 * i).pair, ClassLabel::spill, i);
    persist(gen_no_spill(spec, 2 * i + 1), ClassLabel::no_spill, i);
  }
  DatasetManifest m = build_manifest(out_root);
  m.seed = spec.seed;
  save_manifest(m, out_root / std::string(kManifestFile));
  return m;
}

}  // namespace spill
