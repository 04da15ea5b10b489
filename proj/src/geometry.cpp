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

#include "spill/geometry.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <sstream>

#include <json.hpp>

#include "spill/errors.hpp"

namespace spill {

// ---------------------------------------------------------------------------
// Homography

Homography Homography::from_matrix(const Matrix& m) {
  for (double v : m) {
    if (!std::isfinite(v)) throw Error(Errc::non_invertible, "homography has non-finite entries");
  }
  const double s = m[8];
  double max_abs = 0.0;
  for (double v : m) max_abs = std::max(max_abs, std::abs(v));
  if (max_abs == 0.0 || std::abs(s) <= 1e-14 * max_abs) {
    throw Error(Errc::non_invertible, "homography bottom-right entry is zero");
  }
  Matrix n{};
  for (std::size_t i = 0; i < 9; ++i) n[i] = m[i] / s;
  n[8] = 1.0;
  Homography h(n);
  double scale = 0.0;
  for (double v : n) scale = std::max(scale, std::abs(v));
  if (std::abs(h.determinant()) <= 1e-12 * scale * scale * scale) {
    throw Error(Errc::non_invertible, "homography is singular");
  }
  return h;
}

Homography Homography::translation(double tx, double ty) { return Homography({1, 0, tx, 0, 1, ty, 0, 0, 1}); }

Homography Homography::scaling(double sx, double sy) {
  if (sx == 0.0 || sy == 0.0) throw Error(Errc::non_invertible, "zero scale");
  return Homography({sx, 0, 0, 0, sy, 0, 0, 0, 1});
}

Point2 Homography::apply(Point2 p) const noexcept {
  const double w = m_[6] * p.x + m_[7] * p.y + m_[8];
  return {(m_[0] * p.x + m_[1] * p.y + m_[2]) / w, (m_[3] * p.x + m_[4] * p.y + m_[5]) / w};
}

double Homography::determinant() const noexcept {
  const auto& a = m_;
  return a[0] * (a[4] * a[8] - a[5] * a[7]) - a[1] * (a[3] * a[8] - a[5] * a[6]) +
         a[2] * (a[3] * a[7] - a[4] * a[6]);
}

Homography Homography::inverse() const {
  const auto& a = m_;
  const Matrix adj{
      a[4] * a[8] - a[5] * a[7], a[2] * a[7] - a[1] * a[8], a[1] * a[5] - a[2] * a[4],
      a[5] * a[6] - a[3] * a[8], a[0] * a[8] - a[2] * a[6], a[2] * a[3] - a[0] * a[5],
      a[3] * a[7] - a[4] * a[6], a[1] * a[6] - a[0] * a[7], a[0] * a[4] - a[1] * a[3],
  };
  return from_matrix(adj);
}

Homography operator*(const Homography& a, const Homography& b) {
  Homography::Matrix r{};
  for (int i = 0; i < 3; ++i) {
    for (int j = 0; j < 3; ++j) {
      double s = 0.0;
      for (int k = 0; k < 3; ++k) s += a(i, k) * b(k, j);
      r[static_cast<std::size_t>(i * 3 + j)] = s;
    }
  }
  return Homography::from_matrix(r);
}

double frobenius_distance(const Homography& a, const Homography& b) noexcept {
  double s = 0.0;
  for (std::size_t i = 0; i < 9; ++i) {
    const double d = a.matrix()[i] - b.matrix()[i];
    s += d * d;
  }
  return std::sqrt(s);
}

// ---------------------------------------------------------------------------
// Estimation

namespace {

using Mat3 = Eigen::Matrix3d;

/// Similarity moving the centroid to the origin with mean distance sqrt(2).
Mat3 normalizing_transform(std::span<const Point2> pts) {
  double cx = 0, cy = 0;
  for (const auto& p : pts) {
    cx += p.x;
    cy += p.y;
  }
  cx /= static_cast<double>(pts.size());
  cy /= static_cast<double>(pts.size());
  double mean_dist = 0;
  for (const auto& p : pts) mean_dist += std::hypot(p.x - cx, p.y - cy);
  mean_dist /= static_cast<double>(pts.size());
  const double s = mean_dist > 0 ? std::sqrt(2.0) / mean_dist : 1.0;
  Mat3 t;
  t << s, 0, -s * cx, 0, s, -s * cy, 0, 0, 1;
  return t;
}

Eigen::Vector2d apply(const Mat3& t, const Point2& p) {
  const Eigen::Vector3d q = t * Eigen::Vector3d(p.x, p.y, 1.0);
  return {q.x() / q.z(), q.y() / q.z()};
}

bool nearly_collinear(const Point2& a, const Point2& b, const Point2& c) {
  const double abx = b.x - a.x, aby = b.y - a.y;
  const double acx = c.x - a.x, acy = c.y - a.y;
  const double cross = abx * acy - aby * acx;
  const double scale = std::hypot(abx, aby) * std::hypot(acx, acy);
  return scale == 0.0 || std::abs(cross) <= 1e-9 * scale;
}

void check_first_four(std::span<const PointPair> pairs) {
  const auto check = [&](auto get, const char* which) {
    for (int i = 0; i < 4; ++i)
      for (int j = i + 1; j < 4; ++j)
        for (int k = j + 1; k < 4; ++k)
          if (nearly_collinear(get(pairs[static_cast<std::size_t>(i)]), get(pairs[static_cast<std::size_t>(j)]),
                               get(pairs[static_cast<std::size_t>(k)]))) {
            throw Error(Errc::degenerate_configuration,
                        std::string("three of the first four ") + which + " points are collinear");
          }
  };
  check([](const PointPair& p) { return p.src; }, "source");
  check([](const PointPair& p) { return p.dst; }, "destination");
}

/// Direct linear transform in normalized coordinates; returns the
/// normalized-space matrix (maps normalized src to normalized dst).
Mat3 dlt(const std::vector<Eigen::Vector2d>& src, const std::vector<Eigen::Vector2d>& dst) {
  const auto n = static_cast<Eigen::Index>(src.size());
  Eigen::MatrixXd a = Eigen::MatrixXd::Zero(2 * n, 9);
  for (Eigen::Index i = 0; i < n; ++i) {
    const double x = src[static_cast<std::size_t>(i)].x(), y = src[static_cast<std::size_t>(i)].y();
    const double u = dst[static_cast<std::size_t>(i)].x(), v = dst[static_cast<std::size_t>(i)].y();
    a.row(2 * i) << -x, -y, -1, 0, 0, 0, u * x, u * y, u;
    a.row(2 * i + 1) << 0, 0, 0, -x, -y, -1, v * x, v * y, v;
  }
  Eigen::JacobiSVD<Eigen::MatrixXd> svd(a, Eigen::ComputeFullV);
  const Eigen::VectorXd h = svd.matrixV().col(8);
  Mat3 m;
  m << h(0), h(1), h(2), h(3), h(4), h(5), h(6), h(7), h(8);
  return m;
}

/// Levenberg-Marquardt over the eight free entries (h33 fixed at 1),
/// minimizing sum ||H(src) - dst||^2.
Mat3 refine(Mat3 h, const std::vector<Eigen::Vector2d>& src, const std::vector<Eigen::Vector2d>& dst) {
  if (std::abs(h(2, 2)) < 1e-12) return h;
  h /= h(2, 2);
  const std::size_t n = src.size();
  auto residuals = [&](const Eigen::Matrix<double, 8, 1>& p, Eigen::VectorXd& r) {
    r.resize(static_cast<Eigen::Index>(2 * n));
    for (std::size_t i = 0; i < n; ++i) {
      const double x = src[i].x(), y = src[i].y();
      const double w = p(6) * x + p(7) * y + 1.0;
      r(static_cast<Eigen::Index>(2 * i)) = (p(0) * x + p(1) * y + p(2)) / w - dst[i].x();
      r(static_cast<Eigen::Index>(2 * i + 1)) = (p(3) * x + p(4) * y + p(5)) / w - dst[i].y();
    }
    return r.squaredNorm();
  };
  Eigen::Matrix<double, 8, 1> p;
  p << h(0, 0), h(0, 1), h(0, 2), h(1, 0), h(1, 1), h(1, 2), h(2, 0), h(2, 1);
  Eigen::VectorXd r;
  double cost = residuals(p, r);
  double lambda = 1e-3;
  Eigen::MatrixXd jac(static_cast<Eigen::Index>(2 * n), 8);
  for (int iter = 0; iter < 100; ++iter) {
    for (std::size_t i = 0; i < n; ++i) {
      const double x = src[i].x(), y = src[i].y();
      const double w = p(6) * x + p(7) * y + 1.0;
      const double u = (p(0) * x + p(1) * y + p(2)) / w;
      const double v = (p(3) * x + p(4) * y + p(5)) / w;
      const auto r0 = static_cast<Eigen::Index>(2 * i);
      jac.row(r0) << x / w, y / w, 1 / w, 0, 0, 0, -u * x / w, -u * y / w;
      jac.row(r0 + 1) << 0, 0, 0, x / w, y / w, 1 / w, -v * x / w, -v * y / w;
    }
    const Eigen::Matrix<double, 8, 8> jtj = jac.transpose() * jac;
    const Eigen::Matrix<double, 8, 1> jtr = jac.transpose() * r;
    bool improved = false;
    for (int attempt = 0; attempt < 10 && !improved; ++attempt) {
      Eigen::Matrix<double, 8, 8> damped = jtj;
      damped.diagonal().array() *= (1.0 + lambda);
      const Eigen::Matrix<double, 8, 1> step = damped.ldlt().solve(-jtr);
      if (!step.allFinite()) break;
      const Eigen::Matrix<double, 8, 1> candidate = p + step;
      Eigen::VectorXd rc;
      const double c = residuals(candidate, rc);
      if (std::isfinite(c) && c < cost) {
        const double rel = (cost - c) / std::max(cost, 1e-300);
        p = candidate;
        r = rc;
        cost = c;
        lambda = std::max(lambda / 10.0, 1e-12);
        improved = true;
        if (rel < 1e-14) iter = 100;
      } else {
        lambda *= 10.0;
      }
    }
    if (!improved) break;
  }
  Mat3 out;
  out << p(0), p(1), p(2), p(3), p(4), p(5), p(6), p(7), 1.0;
  return out;
}

}  // namespace

Homography estimate_perspective(std::span<const PointPair> pairs) {
  if (pairs.size() < 4) {
    throw Error(Errc::too_few_points, "need at least 4 point pairs, got " + std::to_string(pairs.size()));
  }
  for (const auto& pp : pairs) {
    if (!std::isfinite(pp.src.x) || !std::isfinite(pp.src.y) || !std::isfinite(pp.dst.x) ||
        !std::isfinite(pp.dst.y)) {
      throw Error(Errc::invalid_argument, "point coordinates must be finite");
    }
  }
  check_first_four(pairs);

  std::vector<Point2> src_pts, dst_pts;
  src_pts.reserve(pairs.size());
  dst_pts.reserve(pairs.size());
  for (const auto& pp : pairs) {
    src_pts.push_back(pp.src);
    dst_pts.push_back(pp.dst);
  }
  const Mat3 t_src = normalizing_transform(src_pts);
  const Mat3 t_dst = normalizing_transform(dst_pts);
  std::vector<Eigen::Vector2d> ns, nd;
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    ns.push_back(apply(t_src, src_pts[i]));
    nd.push_back(apply(t_dst, dst_pts[i]));
  }
  Mat3 hn = dlt(ns, nd);
  if (pairs.size() > 4) hn = refine(hn, ns, nd);
  const Mat3 h = t_dst.inverse() * hn * t_src;

  Homography::Matrix m{};
  for (int r = 0; r < 3; ++r)
    for (int c = 0; c < 3; ++c) m[static_cast<std::size_t>(r * 3 + c)] = h(r, c);
  try {
    return Homography::from_matrix(m);
  } catch (const Error&) {
    throw Error(Errc::degenerate_configuration, "point configuration yields a singular transform");
  }
}

double mean_reprojection_error(const Homography& h, std::span<const PointPair> pairs) {
  if (pairs.empty()) return 0.0;
  double sum = 0.0;
  for (const auto& pp : pairs) {
    const Point2 q = h.apply(pp.src);
    sum += std::hypot(q.x - pp.dst.x, q.y - pp.dst.y);
  }
  return sum / static_cast<double>(pairs.size());
}

// ---------------------------------------------------------------------------
// Resampling

namespace {

std::uint8_t to_u8(double v) noexcept {
  const double r = std::floor(v + 0.5);
  return static_cast<std::uint8_t>(std::clamp(r, 0.0, 255.0));
}

}  // namespace

Frame warp_frame(const Frame& frame, const Homography& h, int out_w, int out_h) {
  check_frame(frame);
  if (out_w < 1 || out_h < 1) throw Error(Errc::invalid_argument, "output dimensions must be >= 1");
  const Homography inv = h.inverse();
  Frame out = Frame::blank(out_w, out_h, frame.modality);
  out.timestamp_ms = frame.timestamp_ms;
  out.source_id = frame.source_id;
  const auto& m = inv.matrix();
  for (int y = 0; y < out_h; ++y) {
    for (int x = 0; x < out_w; ++x) {
      const double w = m[6] * x + m[7] * y + m[8];
      if (!(w > 0.0)) continue;
      const double sx = (m[0] * x + m[1] * y + m[2]) / w;
      const double sy = (m[3] * x + m[4] * y + m[5]) / w;
      if (!std::isfinite(sx) || !std::isfinite(sy)) continue;
      if (sx <= -1.0 || sy <= -1.0 || sx >= frame.width || sy >= frame.height) continue;
      const int x0 = static_cast<int>(std::floor(sx));
      const int y0 = static_cast<int>(std::floor(sy));
      const double fx = sx - x0, fy = sy - y0;
      const double wts[4] = {(1 - fx) * (1 - fy), fx * (1 - fy), (1 - fx) * fy, fx * fy};
      const int xs[4] = {x0, x0 + 1, x0, x0 + 1};
      const int ys[4] = {y0, y0, y0 + 1, y0 + 1};
      double acc[3] = {0, 0, 0};
      for (int k = 0; k < 4; ++k) {
        if (wts[k] == 0.0 || xs[k] < 0 || ys[k] < 0 || xs[k] >= frame.width || ys[k] >= frame.height) continue;
        for (int c = 0; c < 3; ++c) acc[c] += wts[k] * frame.at(xs[k], ys[k], c);
      }
      for (int c = 0; c < 3; ++c) out.at(x, y, c) = to_u8(acc[c]);
    }
  }
  return out;
}

Frame crop_frame(const Frame& frame, const CropRect& rect) {
  check_frame(frame);
  if (rect.w < 1 || rect.h < 1 || rect.x < 0 || rect.y < 0 || rect.x + rect.w > frame.width ||
      rect.y + rect.h > frame.height) {
    throw Error(Errc::out_of_bounds, "crop rect (" + std::to_string(rect.x) + "," + std::to_string(rect.y) + "," +
                                         std::to_string(rect.w) + "," + std::to_string(rect.h) +
                                         ") not inside " + std::to_string(frame.width) + "x" +
                                         std::to_string(frame.height));
  }
  Frame out = Frame::blank(rect.w, rect.h, frame.modality);
  out.timestamp_ms = frame.timestamp_ms;
  out.source_id = frame.source_id;
  for (int y = 0; y < rect.h; ++y) {
    const auto begin = frame.pixels.begin() + static_cast<std::ptrdiff_t>(frame.index(rect.x, rect.y + y));
    std::copy(begin, begin + rect.w * 3, out.pixels.begin() + static_cast<std::ptrdiff_t>(out.index(0, y)));
  }
  return out;
}

namespace {

struct Tap {
  int src;
  double weight;
};

/// Per-output-index source taps along one axis.
std::vector<std::vector<Tap>> axis_taps(int n_in, int n_out) {
  std::vector<std::vector<Tap>> taps(static_cast<std::size_t>(n_out));
  if (n_out == n_in) {
    for (int i = 0; i < n_out; ++i) taps[static_cast<std::size_t>(i)].push_back({i, 1.0});
  } else if (n_out < n_in) {
    const double scale = static_cast<double>(n_in) / n_out;
    for (int i = 0; i < n_out; ++i) {
      const double lo = i * scale, hi = (i + 1) * scale;
      for (int s = static_cast<int>(std::floor(lo)); s < n_in && s < hi; ++s) {
        const double overlap = std::min<double>(hi, s + 1) - std::max<double>(lo, s);
        if (overlap > 1e-12) taps[static_cast<std::size_t>(i)].push_back({s, overlap / scale});
      }
    }
  } else {
    const double scale = static_cast<double>(n_in) / n_out;
    for (int i = 0; i < n_out; ++i) {
      const double src = std::clamp((i + 0.5) * scale - 0.5, 0.0, static_cast<double>(n_in - 1));
      const int s0 = static_cast<int>(std::floor(src));
      const double f = src - s0;
      taps[static_cast<std::size_t>(i)].push_back({s0, 1.0 - f});
      if (f > 0.0 && s0 + 1 < n_in) taps[static_cast<std::size_t>(i)].push_back({s0 + 1, f});
    }
  }
  return taps;
}

}  // namespace

Frame resize_frame(const Frame& frame, int w, int h) {
  check_frame(frame);
  if (w < 1 || h < 1) throw Error(Errc::invalid_argument, "resize target must be >= 1x1");
  if (w == frame.width && h == frame.height) return frame;
  const auto xt = axis_taps(frame.width, w);
  const auto yt = axis_taps(frame.height, h);
  // horizontal pass into a float buffer, then vertical
  std::vector<double> tmp(static_cast<std::size_t>(frame.height) * static_cast<std::size_t>(w) * 3, 0.0);
  for (int y = 0; y < frame.height; ++y) {
    for (int x = 0; x < w; ++x) {
      double* dst = &tmp[(static_cast<std::size_t>(y) * static_cast<std::size_t>(w) + static_cast<std::size_t>(x)) * 3];
      for (const Tap& t : xt[static_cast<std::size_t>(x)])
        for (int c = 0; c < 3; ++c) dst[c] += t.weight * frame.at(t.src, y, c);
    }
  }
  Frame out = Frame::blank(w, h, frame.modality);
  out.timestamp_ms = frame.timestamp_ms;
  out.source_id = frame.source_id;
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      double acc[3] = {0, 0, 0};
      for (const Tap& t : yt[static_cast<std::size_t>(y)]) {
        const double* src =
            &tmp[(static_cast<std::size_t>(t.src) * static_cast<std::size_t>(w) + static_cast<std::size_t>(x)) * 3];
        for (int c = 0; c < 3; ++c) acc[c] += t.weight * src[c];
      }
      for (int c = 0; c < 3; ++c) out.at(x, y, c) = to_u8(acc[c]);
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Alignment and fusion

Calibration make_calibration(const Homography& rgb_to_thermal, const CropRect& crop) {
  if (crop.w < 1 || crop.h < 1) throw Error(Errc::invalid_argument, "crop must be at least 1x1");
  const double sx = static_cast<double>(kThermalSize.width) / crop.w;
  const double sy = static_cast<double>(kThermalSize.height) / crop.h;
  // pixel-centre map of crop-then-resize: t = (q - crop + 0.5) * s - 0.5
  const Homography crop_resize = Homography::translation(-0.5, -0.5) * Homography::scaling(sx, sy) *
                                 Homography::translation(0.5 - crop.x, 0.5 - crop.y);
  return {crop_resize.inverse() * rgb_to_thermal, crop};
}

Calibration identity_calibration(Size rgb_size) {
  return {Homography::identity(), CropRect{0, 0, rgb_size.width, rgb_size.height}};
}

Frame align_rgb(const Frame& rgb, const Calibration& calib) {
  check_frame(rgb);
  if (rgb.modality != Modality::rgb) throw Error(Errc::modality_mismatch, "align_rgb expects an rgb frame");
  if (rgb.size() != kRgbRawSize) {
    throw Error(Errc::dimension_mismatch, "align_rgb expects a raw 640x360 frame, got " + std::to_string(rgb.width) +
                                              "x" + std::to_string(rgb.height));
  }
  const Frame warped = warp_frame(rgb, calib.h, rgb.width, rgb.height);
  const Frame cropped = crop_frame(warped, calib.crop);
  return resize_frame(cropped, kThermalSize.width, kThermalSize.height);
}

Frame fuse_side_by_side(const Frame& thermal, const Frame& rgb_aligned) {
  check_frame(thermal);
  check_frame(rgb_aligned);
  if (thermal.size() != kThermalSize || rgb_aligned.size() != kThermalSize) {
    throw Error(Errc::dimension_mismatch, "fusion inputs must both be 256x192 (thermal " +
                                              std::to_string(thermal.width) + "x" + std::to_string(thermal.height) +
                                              ", rgb " + std::to_string(rgb_aligned.width) + "x" +
                                              std::to_string(rgb_aligned.height) + ")");
  }
  Frame out = Frame::blank(kCombinedSize.width, kCombinedSize.height, Modality::combined);
  out.timestamp_ms = thermal.timestamp_ms;
  out.source_id = thermal.source_id;
  const auto row_bytes = static_cast<std::ptrdiff_t>(kThermalSize.width) * 3;
  for (int y = 0; y < kThermalSize.height; ++y) {
    auto dst = out.pixels.begin() + static_cast<std::ptrdiff_t>(out.index(0, y));
    auto t = thermal.pixels.begin() + static_cast<std::ptrdiff_t>(thermal.index(0, y));
    auto r = rgb_aligned.pixels.begin() + static_cast<std::ptrdiff_t>(rgb_aligned.index(0, y));
    std::copy(t, t + row_bytes, dst);
    std::copy(r, r + row_bytes, dst + row_bytes);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Persistence

std::string calibration_to_json(const Calibration& calib) {
  nlohmann::json j;
  j["h"] = nlohmann::json::array();
  for (int r = 0; r < 3; ++r) j["h"].push_back({calib.h(r, 0), calib.h(r, 1), calib.h(r, 2)});
  j["crop"] = {{"x", calib.crop.x}, {"y", calib.crop.y}, {"w", calib.crop.w}, {"h", calib.crop.h}};
  return j.dump(2);
}

Calibration calibration_from_json(const std::string& text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
    Homography::Matrix m{};
    const auto& h = j.at("h");
    if (h.size() == 3 && h[0].is_array()) {
      for (std::size_t r = 0; r < 3; ++r)
        for (std::size_t c = 0; c < 3; ++c) m[r * 3 + c] = h.at(r).at(c).get<double>();
    } else if (h.size() == 9) {
      for (std::size_t i = 0; i < 9; ++i) m[i] = h.at(i).get<double>();
    } else if (h.size() == 1 && h[0].is_array() && h[0].size() == 9) {
      for (std::size_t i = 0; i < 9; ++i) m[i] = h[0].at(i).get<double>();
    } else {
      throw Error(Errc::invalid_argument, "calibration \"h\" must hold 9 numbers");
    }
    const auto& c = j.at("crop");
    return {Homography::from_matrix(m),
            CropRect{c.at("x").get<int>(), c.at("y").get<int>(), c.at("w").get<int>(), c.at("h").get<int>()}};
  } catch (const nlohmann::json::exception& e) {
    throw Error(Errc::invalid_argument, std::string("malformed calibration: ") + e.what());
  }
}

void save_calibration(const Calibration& calib, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw Error(Errc::write_failure, "cannot open " + path.string());
  out << calibration_to_json(calib) << '\n';
  if (!out) throw Error(Errc::write_failure, "cannot write " + path.string());
}

Calibration load_calibration(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(Errc::missing_file, "cannot open calibration " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return calibration_from_json(ss.str());
}

std::vector<PointPair> load_point_pairs(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(Errc::missing_file, "cannot open point pairs " + path.string());
  std::vector<PointPair> pairs;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    std::replace(line.begin(), line.end(), ',', ' ');
    std::istringstream ls(line);
    PointPair pp;
    if (!(ls >> pp.src.x >> pp.src.y >> pp.dst.x >> pp.dst.y)) {
      if (pairs.empty() && line_no == 1) continue;  // header
      throw Error(Errc::invalid_argument, path.string() + ":" + std::to_string(line_no) + ": expected 4 numbers");
    }
    pairs.push_back(pp);
  }
  return pairs;
}

}  // namespace spill
