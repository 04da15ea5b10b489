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

#include "spill/eval.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>
#include <thread>

#include <json.hpp>

#include "spill/errors.hpp"
#include "spill/timefmt.hpp"

namespace fs = std::filesystem;

namespace spill {

EvalReport evaluate_frames(Classifier& model, std::span<const Frame> frames, std::span<const ClassLabel> labels,
                           std::size_t batch) {
  if (frames.size() != labels.size()) throw Error(Errc::invalid_argument, "frames and labels differ in length");
  if (frames.empty()) throw Error(Errc::empty_split, "nothing to evaluate");
  if (batch < 1) throw Error(Errc::invalid_argument, "batch must be >= 1");
  EvalReport r;
  for (std::size_t start = 0; start < frames.size(); start += batch) {
    const std::size_t n = std::min(batch, frames.size() - start);
    const auto probs = model.predict(frames.subspan(start, n));
    if (probs.size() != n) throw Error(Errc::invalid_argument, "classifier returned wrong number of outputs");
    for (std::size_t i = 0; i < n; ++i) {
      const bool predicted_spill = decide(probs[i]) == ClassLabel::spill;
      const bool actual_spill = labels[start + i] == ClassLabel::spill;
      if (predicted_spill && actual_spill) ++r.confusion.tp;
      else if (!predicted_spill && !actual_spill) ++r.confusion.tn;
      else if (predicted_spill) ++r.confusion.fp;
      else ++r.confusion.fn;
    }
  }
  r.n_test = r.confusion.total();
  r.accuracy = static_cast<double>(r.confusion.tp + r.confusion.tn) / static_cast<double>(r.n_test);
  return r;
}

EvalReport evaluate_accuracy(Classifier& model, const DatasetManifest& manifest, const EvalOptions& options) {
  const auto entries = entries_in(manifest, options.split);
  if (entries.empty()) {
    throw Error(Errc::empty_split, "no entries in the " + std::string(to_string(options.split)) + " split");
  }
  std::vector<Frame> frames;
  std::vector<ClassLabel> labels;
  frames.reserve(entries.size());
  for (const auto& e : entries) {
    if (e.modality != model.modality()) {
      throw Error(Errc::modality_mismatch, "model expects " + std::string(to_string(model.modality())) +
                                               " but manifest holds " + std::string(to_string(e.modality)) +
                                               " (" + e.path.generic_string() + ")");
    }
    frames.push_back(read_png(manifest.absolute(e), e.modality));
    labels.push_back(e.class_label);
  }
  return evaluate_frames(model, frames, labels, options.batch);
}

std::string eval_report_json(const EvalReport& r) {
  nlohmann::json j{{"accuracy", r.accuracy},
                   {"n_test", r.n_test},
                   {"confusion", {{"tp", r.confusion.tp}, {"tn", r.confusion.tn}, {"fp", r.confusion.fp}, {"fn", r.confusion.fn}}}};
  return j.dump(2);
}

double percentile(std::vector<double> values, double q) {
  if (values.empty()) throw Error(Errc::invalid_argument, "percentile of an empty sample");
  std::sort(values.begin(), values.end());
  const double pos = std::clamp(q, 0.0, 1.0) * static_cast<double>(values.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const auto hi = std::min(lo + 1, values.size() - 1);
  return values[lo] + (values[hi] - values[lo]) * (pos - static_cast<double>(lo));
}

std::string host_hardware_label() {
  std::string model;
  std::ifstream in("/proc/cpuinfo");
  std::string line;
  while (std::getline(in, line)) {
    if (line.rfind("model name", 0) == 0) {
      const auto colon = line.find(':');
      if (colon != std::string::npos) model = line.substr(colon + 1);
      break;
    }
  }
  const auto first = model.find_first_not_of(' ');
  model = first == std::string::npos ? "unknown cpu" : model.substr(first);
  return model + " (" + std::to_string(std::max(1u, std::thread::hardware_concurrency())) + " threads)";
}

LatencyStats measure_latency(Classifier& model, std::span<const Frame> samples, const LatencyOptions& options) {
  if (options.iterations < 10) throw Error(Errc::invalid_argument, "latency needs at least 10 timed iterations");
  if (samples.empty()) throw Error(Errc::invalid_argument, "latency needs at least one sample frame");
  using clock = std::chrono::steady_clock;
  LatencyStats s;
  s.warmup = options.warmup;
  s.iterations = options.iterations;
  s.hardware_label = options.hardware_label.empty() ? host_hardware_label() : options.hardware_label;
  s.measured_at = iso8601_utc();
  s.timings_ms.reserve(options.iterations);
  volatile int sink = 0;
  for (std::size_t i = 0; i < options.warmup + options.iterations; ++i) {
    const Frame& f = samples[i % samples.size()];
    const auto t0 = clock::now();
    const auto p = model.predict(std::span<const Frame>(&f, 1));
    sink = sink + (decide(p.at(0)) == ClassLabel::spill ? 1 : 0);
    const auto t1 = clock::now();
    if (i >= options.warmup) s.timings_ms.push_back(std::chrono::duration<double, std::milli>(t1 - t0).count());
  }
  const double n = static_cast<double>(s.timings_ms.size());
  s.mean_ms = std::accumulate(s.timings_ms.begin(), s.timings_ms.end(), 0.0) / n;
  double var = 0.0;
  for (double t : s.timings_ms) var += (t - s.mean_ms) * (t - s.mean_ms);
  s.std_ms = std::sqrt(var / n);
  s.p50_ms = percentile(s.timings_ms, 0.50);
  s.p95_ms = percentile(s.timings_ms, 0.95);
  return s;
}

void write_latency_csv(const LatencyStats& stats, const fs::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw Error(Errc::write_failure, "cannot write " + path.string());
  out << "iteration,ms\n";
  char buf[64];
  for (std::size_t i = 0; i < stats.timings_ms.size(); ++i) {
    std::snprintf(buf, sizeof buf, "%zu,%.6f\n", i + 1, stats.timings_ms[i]);
    out << buf;
  }
  if (!out) throw Error(Errc::write_failure, "short write to " + path.string());
}

std::string latency_stats_json(const LatencyStats& s) {
  nlohmann::json j{{"mean_ms", s.mean_ms},   {"std_ms", s.std_ms},         {"p50_ms", s.p50_ms},
                   {"p95_ms", s.p95_ms},     {"iterations", s.iterations}, {"warmup", s.warmup},
                   {"hardware_label", s.hardware_label}, {"measured_at", s.measured_at}};
  return j.dump(2);
}

ModelSize model_size(const fs::path& weights_path) {
  std::error_code ec;
  if (!fs::is_regular_file(weights_path, ec)) {
    throw Error(Errc::missing_file, "weights file not found: " + weights_path.string());
  }
  ModelSize s;
  s.bytes = fs::file_size(weights_path, ec);
  if (ec) throw Error(Errc::io_error, "cannot stat " + weights_path.string() + ": " + ec.message());
  s.mb = static_cast<double>(s.bytes) / 1e6;
  if (s.bytes == 0) s.warning = "weights file is empty: " + weights_path.string();
  return s;
}

std::optional<ReportFormat> parse_report_format(std::string_view text) noexcept {
  if (text == "text") return ReportFormat::text;
  if (text == "csv") return ReportFormat::csv;
  if (text == "markdown" || text == "md") return ReportFormat::markdown;
  return std::nullopt;
}

std::string format_percent(double fraction) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f", fraction * 100.0);
  std::string s = buf;
  if (s.size() > 3 && s.compare(s.size() - 3, 3, ".00") == 0) s.resize(s.size() - 3);
  return s + "%";
}

std::string format_size(double mb) {
  char buf[32];
  if (mb >= 1000.0) {
    std::snprintf(buf, sizeof buf, "%.1f GB", mb / 1000.0);
  } else {
    std::snprintf(buf, sizeof buf, "%.1f MB", mb);
  }
  return buf;
}

std::string format_ms(double ms) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.0f ms", ms);
  return buf;
}

namespace {

constexpr std::string_view kMissing = "-";

std::vector<std::string> row_cells(const BenchmarkRow& r) {
  auto opt = [](const std::optional<double>& v, std::string (*fmt)(double)) {
    return v ? fmt(*v) : std::string(kMissing);
  };
  return {r.label, opt(r.test_accuracy, format_percent), opt(r.demo_accuracy, format_percent),
          opt(r.model_size_mb, format_size), opt(r.inference_ms, format_ms)};
}

std::string csv_escape(const std::string& cell) {
  if (cell.find_first_of(",\"\n") == std::string::npos) return cell;
  std::string out = "\"";
  for (char c : cell) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + "\"";
}

std::vector<std::string> split_csv_line(std::string_view line) {
  std::vector<std::string> cells;
  std::string cur;
  bool quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    const char c = line[i];
    if (quoted) {
      if (c == '"' && i + 1 < line.size() && line[i + 1] == '"') {
        cur += '"';
        ++i;
      } else if (c == '"') {
        quoted = false;
      } else {
        cur += c;
      }
    } else if (c == '"') {
      quoted = true;
    } else if (c == ',') {
      cells.push_back(cur);
      cur.clear();
    } else if (c != '\r') {
      cur += c;
    }
  }
  cells.push_back(cur);
  return cells;
}

std::string trim(std::string s) {
  const auto a = s.find_first_not_of(" \t");
  if (a == std::string::npos) return {};
  const auto b = s.find_last_not_of(" \t");
  return s.substr(a, b - a + 1);
}

enum class CellKind { fraction, size_mb, ms };

std::optional<double> parse_cell(std::string cell, CellKind kind, std::size_t lineno) {
  cell = trim(cell);
  if (cell.empty() || cell == kMissing) return std::nullopt;
  double scale = 1.0;
  auto strip = [&](std::string_view suffix, double factor) {
    if (cell.size() >= suffix.size() && cell.compare(cell.size() - suffix.size(), suffix.size(), suffix) == 0) {
      cell = trim(cell.substr(0, cell.size() - suffix.size()));
      scale = factor;
      return true;
    }
    return false;
  };
  switch (kind) {
    case CellKind::fraction: strip("%", 0.01); break;
    case CellKind::size_mb: strip("GB", 1000.0) || strip("MB", 1.0); break;
    case CellKind::ms: strip("ms", 1.0); break;
  }
  try {
    std::size_t used = 0;
    const double v = std::stod(cell, &used);
    if (used != cell.size() || !std::isfinite(v) || v < 0) throw std::invalid_argument(cell);
    return v * scale;
  } catch (const std::exception&) {
    throw Error(Errc::invalid_argument, "rows csv line " + std::to_string(lineno) + ": bad value '" + cell + "'");
  }
}

}  // namespace

std::string render_report(std::span<const BenchmarkRow> rows, ReportFormat format, std::string_view label_header) {
  if (rows.empty()) throw Error(Errc::invalid_argument, "report needs at least one row");
  const std::vector<std::string> header{std::string(label_header), "% Test", "Demo Accuracy", "Model Size",
                                        "Inference Time"};
  std::vector<std::vector<std::string>> body;
  for (const auto& r : rows) body.push_back(row_cells(r));

  std::ostringstream out;
  switch (format) {
    case ReportFormat::csv: {
      auto line = [&](const std::vector<std::string>& cells) {
        for (std::size_t i = 0; i < cells.size(); ++i) out << (i ? "," : "") << csv_escape(cells[i]);
        out << '\n';
      };
      line(header);
      for (const auto& b : body) line(b);
      break;
    }
    case ReportFormat::markdown: {
      auto line = [&](const std::vector<std::string>& cells) {
        out << '|';
        for (const auto& c : cells) out << ' ' << c << " |";
        out << '\n';
      };
      line(header);
      out << "|---|---|---|---|---|\n";
      for (const auto& b : body) line(b);
      break;
    }
    case ReportFormat::text: {
      std::vector<std::size_t> width(header.size());
      for (std::size_t i = 0; i < header.size(); ++i) {
        width[i] = header[i].size();
        for (const auto& b : body) width[i] = std::max(width[i], b[i].size());
      }
      auto line = [&](const std::vector<std::string>& cells) {
        std::string s;
        for (std::size_t i = 0; i < cells.size(); ++i) {
          if (i) s += "  ";
          s += cells[i] + std::string(width[i] - cells[i].size(), ' ');
        }
        s.erase(s.find_last_not_of(' ') + 1);
        out << s << '\n';
      };
      line(header);
      for (const auto& b : body) line(b);
      break;
    }
  }
  return out.str();
}

std::vector<BenchmarkRow> parse_rows_csv(std::string_view text) {
  std::vector<BenchmarkRow> rows;
  std::istringstream in{std::string(text)};
  std::string line;
  std::size_t lineno = 0;
  bool header_seen = false;
  while (std::getline(in, line)) {
    ++lineno;
    if (trim(line).empty() || trim(line)[0] == '#') continue;
    if (!header_seen) {
      header_seen = true;
      continue;
    }
    const auto cells = split_csv_line(line);
    if (cells.size() != 5) {
      throw Error(Errc::invalid_argument, "rows csv line " + std::to_string(lineno) + ": expected 5 columns, got " +
                                              std::to_string(cells.size()));
    }
    BenchmarkRow r;
    r.label = trim(cells[0]);
    r.test_accuracy = parse_cell(cells[1], CellKind::fraction, lineno);
    r.demo_accuracy = parse_cell(cells[2], CellKind::fraction, lineno);
    r.model_size_mb = parse_cell(cells[3], CellKind::size_mb, lineno);
    r.inference_ms = parse_cell(cells[4], CellKind::ms, lineno);
    rows.push_back(std::move(r));
  }
  return rows;
}

std::vector<BenchmarkRow> load_rows_csv(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(Errc::missing_file, "cannot open rows file " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_rows_csv(ss.str());
}

}  // namespace spill
