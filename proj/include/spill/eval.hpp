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

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "spill/dataset.hpp"
#include "spill/image.hpp"

namespace spill {

/// Decision threshold on the sigmoid output; spill when p >= threshold.
inline constexpr double kDecisionThreshold = 0.5;

inline ClassLabel decide(double p) noexcept { return p >= kDecisionThreshold ? ClassLabel::spill : ClassLabel::no_spill; }

/// Binary spill classifier over frames of one modality. predict() runs the
/// full per-frame pipeline (preprocessing and forward pass) and returns
/// P(spill) per frame. Implementations need not be thread-safe.
class Classifier {
 public:
  virtual ~Classifier() = default;
  virtual std::vector<float> predict(std::span<const Frame> frames) = 0;
  virtual Modality modality() const noexcept = 0;
  virtual std::string name() const = 0;
};

struct Confusion {
  std::size_t tp = 0;
  std::size_t tn = 0;
  std::size_t fp = 0;
  std::size_t fn = 0;
  std::size_t total() const noexcept { return tp + tn + fp + fn; }
  friend bool operator==(const Confusion&, const Confusion&) = default;
};

struct EvalReport {
  double accuracy = 0.0;
  std::size_t n_test = 0;
  Confusion confusion;
};

struct EvalOptions {
  std::size_t batch = 2;
  Split split = Split::test;
};

/// Scores one split of the manifest. Throws empty_split, modality_mismatch.
EvalReport evaluate_accuracy(Classifier& model, const DatasetManifest& manifest, const EvalOptions& options = {});

/// Scores frames against labels in batches.
EvalReport evaluate_frames(Classifier& model, std::span<const Frame> frames, std::span<const ClassLabel> labels,
                           std::size_t batch = 2);

std::string eval_report_json(const EvalReport& r);

struct LatencyOptions {
  std::size_t warmup = 10;
  std::size_t iterations = 100;
  std::string hardware_label;  ///< defaults to host_hardware_label()
};

struct LatencyStats {
  double mean_ms = 0.0;
  double std_ms = 0.0;  ///< population standard deviation
  double p50_ms = 0.0;
  double p95_ms = 0.0;
  std::size_t iterations = 0;
  std::size_t warmup = 0;
  std::string hardware_label;
  std::string measured_at;        ///< ISO-8601 UTC
  std::vector<double> timings_ms;  ///< retained iterations, in order
};

/// Single-image latency of preprocess + forward + threshold, cycling over
/// the sample frames. Throws invalid_argument unless iterations >= 10.
LatencyStats measure_latency(Classifier& model, std::span<const Frame> samples, const LatencyOptions& options = {});

/// Percentile with linear interpolation between order statistics.
double percentile(std::vector<double> values, double q);

/// "iteration,ms" per retained iteration.
void write_latency_csv(const LatencyStats& stats, const std::filesystem::path& path);
std::string latency_stats_json(const LatencyStats& stats);

/// CPU model name and thread count from the host.
std::string host_hardware_label();

struct ModelSize {
  std::uintmax_t bytes = 0;
  double mb = 0.0;  ///< bytes / 1e6
  std::optional<std::string> warning;
};

/// Throws missing_file.
ModelSize model_size(const std::filesystem::path& weights_path);

struct BenchmarkRow {
  std::string label;
  std::optional<double> test_accuracy;  ///< fraction
  std::optional<double> demo_accuracy;  ///< fraction
  std::optional<double> model_size_mb;
  std::optional<double> inference_ms;
};

enum class ReportFormat { text, csv, markdown };
std::optional<ReportFormat> parse_report_format(std::string_view text) noexcept;

/// "100%", "98.84%": two decimals, dropped when the value is whole.
std::string format_percent(double fraction);
/// "324.6 MB", "1.0 GB" from 1000 MB up.
std::string format_size(double mb);
/// "44 ms"
std::string format_ms(double ms);

/// Columns: label, % Test, Demo Accuracy, Model Size, Inference Time; a
/// missing value renders as "-". Throws invalid_argument on zero rows.
std::string render_report(std::span<const BenchmarkRow> rows, ReportFormat format,
                          std::string_view label_header = "Label");

/// Reads rows from CSV with a header line. Cells may be raw numbers
/// (fractions for accuracies, MB, ms) or rendered values ("98.84%",
/// "1.0 GB", "44 ms", "-").
std::vector<BenchmarkRow> load_rows_csv(const std::filesystem::path& path);
std::vector<BenchmarkRow> parse_rows_csv(std::string_view text);

}  // namespace spill
