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
#include <condition_variable>
#include <cstdint>
#include <deque>
#include <filesystem>
#include <functional>
#include <future>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include "spill/eval.hpp"
#include "spill/frame_sources.hpp"
#include "spill/geometry.hpp"

namespace spill {

struct ClassVerdict {
  ClassLabel label = ClassLabel::no_spill;
  double confidence = 0.0;  ///< sigmoid output
  double latency_ms = 0.0;
  std::uint64_t frame_ref = 0;
  std::string timestamp;  ///< ISO-8601 UTC
};

/// Classifies one frame; the frame's modality must match the model's.
ClassVerdict classify(Classifier& model, const Frame& frame);

/// Builds the model's input from a captured pair (thermal frame, raw RGB
/// frame, or the fused 512x192 frame) and classifies it. Throws
/// fusion_failure when a combined model has no calibration.
ClassVerdict classify(Classifier& model, const FramePair& pair, const std::optional<Calibration>& calib);

/// Frame classify() feeds to a model of the given modality.
Frame model_input(const FramePair& pair, Modality modality, const std::optional<Calibration>& calib);

std::string verdict_json(const ClassVerdict& v);

/// Fraction of labelled verdicts whose label matches the operator's ground
/// truth; nullopt when nothing is labelled.
struct DemoTally {
  std::size_t labelled = 0;
  std::size_t correct = 0;
  std::optional<double> accuracy() const noexcept {
    if (labelled == 0) return std::nullopt;
    return static_cast<double>(correct) / static_cast<double>(labelled);
  }
};

struct VerdictRecord {
  ClassVerdict verdict;
  std::optional<ClassLabel> ground_truth;
};

/// One live capture session: its own capture directory and an append-only
/// verdicts.jsonl log from which the in-memory state can be rebuilt.
class Session {
 public:
  /// Creates <session_root>/<meta.session_id>/ and writes session.json.
  Session(SessionMeta meta, const std::filesystem::path& session_root);
  Session(const Session&) = delete;
  Session& operator=(const Session&) = delete;

  /// Rebuilds a session from its directory (meta, counts, log).
  static std::unique_ptr<Session> reopen(const std::filesystem::path& session_dir);

  const SessionMeta& meta() const noexcept { return meta_; }
  void set_label(ClassLabel label);
  const std::filesystem::path& dir() const noexcept { return dir_; }
  PairWriter& writer() noexcept { return writer_; }

  std::size_t captured(ClassLabel label) const noexcept;
  void record_capture(ClassLabel label, const ClassVerdict& v, const SavedPair& saved);
  /// Throws unknown_frame_ref. Relabelling replaces the earlier label.
  DemoTally record_outcome(std::uint64_t frame_ref, ClassLabel ground_truth, bool* relabelled = nullptr);
  DemoTally tally() const;
  const std::vector<VerdictRecord>& log() const noexcept { return log_; }

 private:
  void append(const std::string& line);

  SessionMeta meta_;
  std::filesystem::path dir_;
  PairWriter writer_;
  std::size_t spill_count_ = 0;
  std::size_t no_spill_count_ = 0;
  std::vector<VerdictRecord> log_;
};

/// Runs submitted jobs one at a time on a dedicated thread. At most `depth`
/// jobs may be waiting; submit() throws queue_full beyond that.
class InferenceWorker {
 public:
  explicit InferenceWorker(std::size_t depth = 4);
  ~InferenceWorker();
  InferenceWorker(const InferenceWorker&) = delete;
  InferenceWorker& operator=(const InferenceWorker&) = delete;

  template <typename F>
  auto submit(F&& fn) -> std::future<decltype(fn())> {
    using R = decltype(fn());
    auto task = std::make_shared<std::packaged_task<R()>>(std::forward<F>(fn));
    auto fut = task->get_future();
    enqueue([task] { (*task)(); });
    return fut;
  }

  std::size_t depth() const noexcept { return depth_; }

 private:
  void enqueue(std::function<void()> job);
  void run();

  std::size_t depth_;
  std::mutex mu_;
  std::condition_variable cv_;
  std::deque<std::function<void()>> queue_;
  bool stopping_ = false;
  std::thread thread_;
};

struct ServiceOptions {
  std::filesystem::path session_root;
  std::optional<Calibration> calibration;
  SourceDescriptor thermal_source{SourceDescriptor::Kind::simulated, Modality::thermal};
  SourceDescriptor rgb_source{SourceDescriptor::Kind::simulated, Modality::rgb};
  std::int64_t max_skew_ms = kDefaultMaxSkewMs;
  std::size_t queue_depth = 4;
};

struct CaptureResult {
  SavedPair saved;
  ClassVerdict verdict;
  ClassLabel class_label = ClassLabel::no_spill;
};

/// Model, sources and session state behind the HTTP API. Inference and
/// capture run on the single worker; session mutations are serialized.
class InferenceService {
 public:
  explicit InferenceService(ServiceOptions options);
  ~InferenceService();

  /// Installs the model; until then the service reports not-ready.
  void set_model(std::unique_ptr<Classifier> model);
  bool ready() const;
  std::string model_name() const;
  std::optional<Modality> model_modality() const;
  double uptime_s() const;

  std::string start_session(const std::string& room, const std::string& liquid);
  void set_label(ClassLabel label);
  std::optional<SessionMeta> session() const;
  /// Throws no_active_session, queue_full, and capture/classify errors.
  CaptureResult capture();
  /// Throws no_active_session, unknown_frame_ref.
  DemoTally record_outcome(std::uint64_t frame_ref, ClassLabel ground_truth);
  std::optional<DemoTally> tally() const;
  std::pair<std::size_t, std::size_t> counts() const;  ///< spill, no_spill

  /// Latest verdict; waits up to `wait` for one newer than `after`.
  std::optional<ClassVerdict> latest(std::optional<std::uint64_t> after = std::nullopt,
                                     std::chrono::milliseconds wait = std::chrono::milliseconds(0)) const;

  /// Classifies a saved image file. Its modality follows from its
  /// dimensions and must match the model's. Not logged to the session.
  ClassVerdict classify_file(const std::filesystem::path& path);

 private:
  std::shared_ptr<Classifier> model_or_throw() const;
  std::shared_ptr<Session> session_or_throw() const;
  void open_sources();

  ServiceOptions options_;
  std::chrono::steady_clock::time_point started_;
  mutable std::mutex mu_;
  mutable std::condition_variable verdict_cv_;
  std::shared_ptr<Classifier> model_;
  std::shared_ptr<Session> session_;
  std::unique_ptr<Source> thermal_;
  std::unique_ptr<Source> rgb_;
  std::optional<ClassVerdict> latest_;
  std::uint64_t session_counter_ = 0;
  InferenceWorker worker_;
};

/// JSON-over-HTTP front end.
///   POST /session/start {room, liquid} -> {session_id}
///   POST /session/label {class_label}
///   POST /capture -> {pair_index, thermal_path, rgb_path, verdict}
///   GET  /verdict/latest[?after=<frame_ref>&wait_ms=<n>]
///   POST /demo/outcome {frame_ref, ground_truth} -> {demo_accuracy}
///   GET  /health -> {model, modality, uptime}
///   GET  /session -> {session, counts, demo_accuracy, labelled}
///   POST /classify {path} -> verdict
class HttpFrontend {
 public:
  explicit HttpFrontend(InferenceService& service);
  ~HttpFrontend();
  HttpFrontend(const HttpFrontend&) = delete;
  HttpFrontend& operator=(const HttpFrontend&) = delete;

  /// Binds (port 0 picks a free port) and serves on a background thread.
  int start(const std::string& host, int port);
  /// Blocks serving on the calling thread.
  void listen_blocking(const std::string& host, int port);
  void stop();
  int port() const noexcept { return port_; }

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
  int port_ = 0;
};

/// "127.0.0.1:8750" -> host, port. Throws invalid_argument.
std::pair<std::string, int> parse_listen_address(const std::string& text);

}  // namespace spill
