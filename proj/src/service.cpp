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

#include "spill/service.hpp"

#include <algorithm>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "spill/errors.hpp"
#include "spill/timefmt.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace spill {

namespace {

constexpr std::string_view kSessionFile = "session.json";
constexpr std::string_view kVerdictLog = "verdicts.jsonl";

json verdict_to_json(const ClassVerdict& v) {
  return {{"label", to_string(v.label)},
          {"confidence", v.confidence},
          {"latency_ms", v.latency_ms},
          {"frame_ref", v.frame_ref},
          {"timestamp", v.timestamp}};
}

ClassVerdict verdict_from_json(const json& j) {
  ClassVerdict v;
  const auto label = parse_class_label(j.at("label").get<std::string>());
  if (!label) throw Error(Errc::invalid_argument, "bad verdict label");
  v.label = *label;
  v.confidence = j.at("confidence").get<double>();
  v.latency_ms = j.at("latency_ms").get<double>();
  v.frame_ref = j.at("frame_ref").get<std::uint64_t>();
  v.timestamp = j.value("timestamp", std::string());
  return v;
}

json meta_to_json(const SessionMeta& m) {
  return {{"session_id", m.session_id}, {"room", m.room}, {"liquid", m.liquid}, {"class_label", to_string(m.class_label)}};
}

void write_text_atomic(const fs::path& file, const std::string& text) {
  const fs::path tmp = file.parent_path() / ("." + file.filename().string() + ".tmp");
  {
    std::ofstream out(tmp, std::ios::trunc);
    out << text;
    if (!out) throw Error(Errc::write_failure, "cannot write " + file.string());
  }
  std::error_code ec;
  fs::rename(tmp, file, ec);
  if (ec) throw Error(Errc::write_failure, "cannot replace " + file.string() + ": " + ec.message());
}

std::optional<Modality> modality_for_size(Size s) {
  for (auto m : {Modality::thermal, Modality::rgb, Modality::combined}) {
    if (canonical_size(m) == s) return m;
  }
  return std::nullopt;
}

}  // namespace

Frame model_input(const FramePair& pair, Modality modality, const std::optional<Calibration>& calib) {
  switch (modality) {
    case Modality::thermal: return pair.thermal;
    case Modality::rgb: return pair.rgb;
    case Modality::combined:
      if (!calib) throw Error(Errc::fusion_failure, "combined model needs a calibration to align the RGB frame");
      try {
        return fuse_side_by_side(pair.thermal, align_rgb(pair.rgb, *calib));
      } catch (const Error& e) {
        throw Error(Errc::fusion_failure, e.what());
      }
  }
  throw Error(Errc::invalid_argument, "unknown modality");
}

ClassVerdict classify(Classifier& model, const Frame& frame) {
  if (frame.modality != model.modality()) {
    throw Error(Errc::modality_mismatch, "model expects " + std::string(to_string(model.modality())) + " but got " +
                                             std::string(to_string(frame.modality)));
  }
  check_canonical(frame);
  const auto t0 = std::chrono::steady_clock::now();
  const auto p = model.predict(std::span<const Frame>(&frame, 1));
  ClassVerdict v;
  v.confidence = p.at(0);
  v.label = decide(v.confidence);
  v.latency_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
  v.timestamp = iso8601_utc();
  return v;
}

ClassVerdict classify(Classifier& model, const FramePair& pair, const std::optional<Calibration>& calib) {
  const auto t0 = std::chrono::steady_clock::now();
  const Frame input = model_input(pair, model.modality(), calib);
  ClassVerdict v = classify(model, input);
  v.latency_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
  return v;
}

std::string verdict_json(const ClassVerdict& v) { return verdict_to_json(v).dump(); }

// Session

Session::Session(SessionMeta meta, const fs::path& session_root)
    : meta_(std::move(meta)), dir_(session_root / meta_.session_id), writer_(dir_) {
  check_session_meta(meta_);
  std::error_code ec;
  fs::create_directories(dir_, ec);
  if (ec) throw Error(Errc::write_failure, "cannot create session directory " + dir_.string() + ": " + ec.message());
  write_text_atomic(dir_ / std::string(kSessionFile), meta_to_json(meta_).dump(2) + "\n");
}

std::unique_ptr<Session> Session::reopen(const fs::path& session_dir) {
  std::ifstream in(session_dir / std::string(kSessionFile));
  if (!in) throw Error(Errc::missing_file, "no session.json in " + session_dir.string());
  SessionMeta meta;
  try {
    const json j = json::parse(in);
    meta.session_id = j.at("session_id").get<std::string>();
    meta.room = j.at("room").get<std::string>();
    meta.liquid = j.at("liquid").get<std::string>();
    meta.class_label = parse_class_label(j.at("class_label").get<std::string>()).value_or(ClassLabel::no_spill);
  } catch (const json::exception& e) {
    throw Error(Errc::invalid_argument, "bad session.json: " + std::string(e.what()));
  }
  auto s = std::make_unique<Session>(meta, session_dir.parent_path());
  std::ifstream log(session_dir / std::string(kVerdictLog));
  std::string line;
  while (std::getline(log, line)) {
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    json j;
    try {
      j = json::parse(line);
    } catch (const json::exception&) {
      break;  // torn final line after a crash
    }
    const std::string type = j.value("type", std::string());
    if (type == "capture") {
      const auto label = parse_class_label(j.at("class_label").get<std::string>()).value_or(ClassLabel::no_spill);
      (label == ClassLabel::spill ? s->spill_count_ : s->no_spill_count_) += 1;
      s->log_.push_back({verdict_from_json(j.at("verdict")), std::nullopt});
    } else if (type == "outcome") {
      const auto ref = j.at("frame_ref").get<std::uint64_t>();
      const auto gt = parse_class_label(j.at("ground_truth").get<std::string>());
      for (auto& r : s->log_) {
        if (r.verdict.frame_ref == ref) r.ground_truth = gt;
      }
    }
  }
  return s;
}

void Session::set_label(ClassLabel label) {
  meta_.class_label = label;
  write_text_atomic(dir_ / std::string(kSessionFile), meta_to_json(meta_).dump(2) + "\n");
}

std::size_t Session::captured(ClassLabel label) const noexcept {
  return label == ClassLabel::spill ? spill_count_ : no_spill_count_;
}

void Session::append(const std::string& line) {
  std::ofstream out(dir_ / std::string(kVerdictLog), std::ios::app);
  out << line << '\n';
  out.flush();
  if (!out) throw Error(Errc::write_failure, "cannot append to " + (dir_ / std::string(kVerdictLog)).string());
}

void Session::record_capture(ClassLabel label, const ClassVerdict& v, const SavedPair& saved) {
  if (!log_.empty() && v.frame_ref <= log_.back().verdict.frame_ref) {
    throw Error(Errc::index_collision, "frame_ref " + std::to_string(v.frame_ref) + " is not newer than the last");
  }
  append(json{{"type", "capture"},
              {"class_label", to_string(label)},
              {"thermal_path", saved.thermal_path.lexically_relative(dir_).generic_string()},
              {"rgb_path", saved.rgb_path.lexically_relative(dir_).generic_string()},
              {"verdict", verdict_to_json(v)}}
             .dump());
  (label == ClassLabel::spill ? spill_count_ : no_spill_count_) += 1;
  log_.push_back({v, std::nullopt});
}

DemoTally Session::record_outcome(std::uint64_t frame_ref, ClassLabel ground_truth, bool* relabelled) {
  auto it = std::find_if(log_.begin(), log_.end(), [&](const VerdictRecord& r) { return r.verdict.frame_ref == frame_ref; });
  if (it == log_.end()) throw Error(Errc::unknown_frame_ref, "no verdict with frame_ref " + std::to_string(frame_ref));
  const bool again = it->ground_truth.has_value();
  append(json{{"type", "outcome"},
              {"frame_ref", frame_ref},
              {"ground_truth", to_string(ground_truth)},
              {"relabel", again},
              {"timestamp", iso8601_utc()}}
             .dump());
  it->ground_truth = ground_truth;
  if (relabelled) *relabelled = again;
  return tally();
}

DemoTally Session::tally() const {
  DemoTally t;
  for (const auto& r : log_) {
    if (!r.ground_truth) continue;
    ++t.labelled;
    t.correct += r.verdict.label == *r.ground_truth ? 1 : 0;
  }
  return t;
}

// InferenceWorker

InferenceWorker::InferenceWorker(std::size_t depth) : depth_(depth), thread_([this] { run(); }) {}

InferenceWorker::~InferenceWorker() {
  {
    std::lock_guard lock(mu_);
    stopping_ = true;
  }
  cv_.notify_all();
  thread_.join();
}

void InferenceWorker::enqueue(std::function<void()> job) {
  {
    std::lock_guard lock(mu_);
    if (queue_.size() >= depth_) {
      throw Error(Errc::queue_full, "inference queue is full (" + std::to_string(depth_) + " waiting)");
    }
    queue_.push_back(std::move(job));
  }
  cv_.notify_one();
}

void InferenceWorker::run() {
  for (;;) {
    std::function<void()> job;
    {
      std::unique_lock lock(mu_);
      cv_.wait(lock, [this] { return stopping_ || !queue_.empty(); });
      if (queue_.empty()) return;
      job = std::move(queue_.front());
      queue_.pop_front();
    }
    job();  // packaged_task captures exceptions
  }
}

// InferenceService

InferenceService::InferenceService(ServiceOptions options)
    : options_(std::move(options)), started_(std::chrono::steady_clock::now()), worker_(options_.queue_depth) {
  if (options_.session_root.empty()) throw Error(Errc::invalid_argument, "session root is required");
  if (options_.thermal_source.modality != Modality::thermal || options_.rgb_source.modality != Modality::rgb) {
    throw Error(Errc::modality_mismatch, "thermal and rgb sources are swapped");
  }
}

InferenceService::~InferenceService() = default;

void InferenceService::set_model(std::unique_ptr<Classifier> model) {
  if (!model) throw Error(Errc::invalid_argument, "null model");
  if (model->modality() == Modality::combined && !options_.calibration) {
    throw Error(Errc::fusion_failure, "combined model needs a calibration");
  }
  std::lock_guard lock(mu_);
  model_ = std::move(model);
}

bool InferenceService::ready() const {
  std::lock_guard lock(mu_);
  return model_ != nullptr;
}

std::string InferenceService::model_name() const { return model_or_throw()->name(); }

std::optional<Modality> InferenceService::model_modality() const {
  std::lock_guard lock(mu_);
  if (!model_) return std::nullopt;
  return model_->modality();
}

double InferenceService::uptime_s() const {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - started_).count();
}

std::shared_ptr<Classifier> InferenceService::model_or_throw() const {
  std::lock_guard lock(mu_);
  if (!model_) throw Error(Errc::model_load_failure, "model not loaded yet");
  return model_;
}

std::shared_ptr<Session> InferenceService::session_or_throw() const {
  std::lock_guard lock(mu_);
  if (!session_) throw Error(Errc::no_active_session, "no active session; start one first");
  return session_;
}

std::string InferenceService::start_session(const std::string& room, const std::string& liquid) {
  if (room.empty() || liquid.empty()) throw Error(Errc::invalid_argument, "room and liquid are required");
  std::lock_guard lock(mu_);
  const std::string stamp = iso8601_utc();
  std::string base = "session_";
  for (char c : stamp.substr(0, 19)) {
    if (c != '-' && c != ':') base += c;
  }
  SessionMeta meta;
  meta.room = room;
  meta.liquid = liquid;
  do {
    meta.session_id = base + "_" + std::to_string(++session_counter_);
  } while (fs::exists(options_.session_root / meta.session_id));
  session_ = std::make_shared<Session>(meta, options_.session_root);
  latest_.reset();
  return meta.session_id;
}

void InferenceService::set_label(ClassLabel label) {
  auto s = session_or_throw();
  std::lock_guard lock(mu_);
  s->set_label(label);
}

std::optional<SessionMeta> InferenceService::session() const {
  std::lock_guard lock(mu_);
  if (!session_) return std::nullopt;
  return session_->meta();
}

void InferenceService::open_sources() {
  if (!thermal_) thermal_ = open_source(options_.thermal_source);
  if (!rgb_) rgb_ = open_source(options_.rgb_source);
}

CaptureResult InferenceService::capture() {
  auto session = session_or_throw();
  auto model = model_or_throw();
  auto fut = worker_.submit([this, session, model] {
    open_sources();  // only the worker touches the sources
    const auto pair = capture_pair(*thermal_, *rgb_, options_.max_skew_ms, session->meta().session_id);
    SessionMeta meta;
    {
      std::lock_guard lock(mu_);
      meta = session->meta();
    }
    CaptureResult r;
    r.class_label = meta.class_label;
    r.saved = session->writer().save(pair, meta);
    const auto t0 = std::chrono::steady_clock::now();
    const Frame input = model_input(pair, model->modality(), options_.calibration);
    r.verdict = classify(*model, input);
    r.verdict.latency_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
    r.verdict.frame_ref = r.saved.index;
    if (input.modality == Modality::combined) session->writer().save_extra(input, meta.class_label, r.saved.index);
    {
      std::lock_guard lock(mu_);
      session->record_capture(meta.class_label, r.verdict, r.saved);
      if (session_ == session) latest_ = r.verdict;
    }
    verdict_cv_.notify_all();
    return r;
  });
  return fut.get();
}

DemoTally InferenceService::record_outcome(std::uint64_t frame_ref, ClassLabel ground_truth) {
  auto s = session_or_throw();
  std::lock_guard lock(mu_);
  return s->record_outcome(frame_ref, ground_truth);
}

std::optional<DemoTally> InferenceService::tally() const {
  std::lock_guard lock(mu_);
  if (!session_) return std::nullopt;
  return session_->tally();
}

std::pair<std::size_t, std::size_t> InferenceService::counts() const {
  std::lock_guard lock(mu_);
  if (!session_) return {0, 0};
  return {session_->captured(ClassLabel::spill), session_->captured(ClassLabel::no_spill)};
}

std::optional<ClassVerdict> InferenceService::latest(std::optional<std::uint64_t> after,
                                                     std::chrono::milliseconds wait) const {
  std::unique_lock lock(mu_);
  auto newer = [&] { return latest_ && (!after || latest_->frame_ref > *after); };
  if (wait.count() > 0) verdict_cv_.wait_for(lock, wait, newer);
  if (after && !newer()) return std::nullopt;
  return latest_;
}

ClassVerdict InferenceService::classify_file(const fs::path& path) {
  auto model = model_or_throw();
  std::error_code ec;
  if (!fs::is_regular_file(path, ec)) throw Error(Errc::missing_file, "no such image: " + path.string());
  auto fut = worker_.submit([path, model] {
    Frame f = read_png(path, model->modality());
    const auto m = modality_for_size(f.size());
    if (m != model->modality()) {
      throw Error(Errc::modality_mismatch, std::to_string(f.width) + "x" + std::to_string(f.height) +
                                               " image does not match a " +
                                               std::string(to_string(model->modality())) + " model");
    }
    return classify(*model, f);
  });
  return fut.get();
}

std::pair<std::string, int> parse_listen_address(const std::string& text) {
  const auto colon = text.rfind(':');
  if (colon == std::string::npos || colon == 0) {
    throw Error(Errc::invalid_argument, "listen address must be host:port, got '" + text + "'");
  }
  const std::string port_text = text.substr(colon + 1);
  int port = -1;
  try {
    std::size_t used = 0;
    port = std::stoi(port_text, &used);
    if (used != port_text.size()) port = -1;
  } catch (const std::exception&) {
    port = -1;
  }
  if (port < 0 || port > 65535) throw Error(Errc::invalid_argument, "bad port in '" + text + "'");
  return {text.substr(0, colon), port};
}

}  // namespace spill
