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
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "spill/image.hpp"

namespace spill {

struct Point2 {
  double x = 0.0;
  double y = 0.0;
};

/// RGB-frame pixel -> thermal-frame pixel correspondence.
struct PointPair {
  Point2 src;
  Point2 dst;
};

/// 3x3 projective map, row-major, stored with h[2][2] == 1.
class Homography {
 public:
  using Matrix = std::array<double, 9>;

  Homography() : m_{1, 0, 0, 0, 1, 0, 0, 0, 1} {}

  /// Normalizes so the bottom-right entry is 1. Throws non_invertible when
  /// the matrix is singular or the bottom-right entry vanishes.
  static Homography from_matrix(const Matrix& m);
  static Homography identity() { return {}; }
  static Homography translation(double tx, double ty);
  static Homography scaling(double sx, double sy);

  const Matrix& matrix() const noexcept { return m_; }
  double operator()(int r, int c) const noexcept { return m_[static_cast<std::size_t>(r * 3 + c)]; }

  Point2 apply(Point2 p) const noexcept;
  double determinant() const noexcept;
  Homography inverse() const;

  /// Composition: (a * b)(p) == a(b(p)).
  friend Homography operator*(const Homography& a, const Homography& b);

 private:
  explicit Homography(const Matrix& m) : m_(m) {}
  Matrix m_;
};

/// Frobenius distance between the normalized matrices.
double frobenius_distance(const Homography& a, const Homography& b) noexcept;

struct CropRect {
  int x = 0;
  int y = 0;
  int w = 0;
  int h = 0;
  friend bool operator==(const CropRect&, const CropRect&) = default;
};

/// Four pairs: the exact projective map through them. More than four:
/// normalized DLT initialisation refined by Levenberg-Marquardt on the
/// squared reprojection error in the destination image.
/// Throws too_few_points, degenerate_configuration.
Homography estimate_perspective(std::span<const PointPair> pairs);

/// Mean Euclidean distance between H(src) and dst over the pairs.
double mean_reprojection_error(const Homography& h, std::span<const PointPair> pairs);

/// out(x,y) = bilinear sample of frame at H^-1 (x,y). Integer coordinates
/// are pixel centres; neighbours outside the input contribute black.
Frame warp_frame(const Frame& frame, const Homography& h, int out_w, int out_h);

Frame crop_frame(const Frame& frame, const CropRect& rect);

/// Area averaging along axes that shrink, bilinear along axes that grow.
Frame resize_frame(const Frame& frame, int w, int h);

/// Warp (output at the input's size), crop, then resize to 256x192.
struct Calibration {
  Homography h;
  CropRect crop;
};

/// Maps an RGB-pixel -> thermal-pixel homography into the calibration that
/// align_rgb applies: the warp is pre-composed with the inverse of the
/// crop-and-resize map so the final 256x192 output lands in thermal coordinates.
Calibration make_calibration(const Homography& rgb_to_thermal, const CropRect& crop);

/// Full-frame crop with identity warp for a frame of the given size.
Calibration identity_calibration(Size rgb_size = kRgbRawSize);

Frame align_rgb(const Frame& rgb, const Calibration& calib);

/// Thermal on the left, aligned RGB on the right; 512x192, modality combined.
Frame fuse_side_by_side(const Frame& thermal, const Frame& rgb_aligned);

/// JSON: {"h": [[..],[..],[..]], "crop": {"x":..,"y":..,"w":..,"h":..}}
void save_calibration(const Calibration& calib, const std::filesystem::path& path);
Calibration load_calibration(const std::filesystem::path& path);
std::string calibration_to_json(const Calibration& calib);
Calibration calibration_from_json(const std::string& text);

/// Point-pair CSV: src_x,src_y,dst_x,dst_y per line; '#' comments and a
/// non-numeric header line are skipped.
std::vector<PointPair> load_point_pairs(const std::filesystem::path& path);

}  // namespace spill
