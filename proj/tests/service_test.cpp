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

#include <httplib.h>

#include <future>
#include <json.hpp>

#include "spill/errors.hpp"
#include "spill/service.hpp"
#include "spill/synth.hpp"
#include "stub_classifiers.hpp"
#include "test_support.hpp"

using namespace spill;
using nlohmann::json;
using spill::testing::BlobThresholdClassifier;
using spill::testing::ConstantClassifier;
using spill::testing::ScratchDir;
using spill::testing::SleepClassifier;

namespace {

/// Service plus HTTP front end on a free loopback port.
struct Harness {
  explicit Harness(std::unique_ptr<Classifier> model = std::make_unique<BlobThresholdClassifier>(),
                   ServiceOptions opts = {})
      : dir("svc") {
    opts.session_root = dir.path() / "sessions";
    service = std::make_unique<InferenceService>(std::move(opts));
    if (model) service->set_model(std::move(model));
    http = std::make_unique<HttpFrontend>(*service);
    port = http->start("127.0.0.1", 0);
    client = std::make_unique<httplib::Client>("127.0.0.1", port);
    client->set_read_timeout(10, 0);
  }

  httplib::Result post(const std::string& path, const json& body = json::object()) {
    return client->Post(path, body.dump(), "application/json");
  }
  httplib::Result get(const std::string& path) { return client->Get(path); }

  ScratchDir dir;
  std::unique_ptr<InferenceService> service;
  std::unique_ptr<HttpFrontend> http;
  int port = 0;
  std::unique_ptr<httplib::Client> client;
};

json body_of(const httplib::Result& r) { return json::parse(r->body); }

}  // namespace

TEST(Http, HealthIs503UntilModelLoads) {
  Harness h(nullptr);
  auto r = h.get("/health");
  ASSERT_TRUE(r);
  EXPECT_EQ(r->status, 503);
  EXPECT_EQ(h.post("/capture")->status, 503);
  h.service->set_model(std::make_unique<BlobThresholdClassifier>());
  r = h.get("/health");
  EXPECT_EQ(r->status, 200);
  const auto j = body_of(r);
  EXPECT_EQ(j["model"], "blob-threshold");
  EXPECT_EQ(j["modality"], "thermal");
  EXPECT_GE(j["uptime"].get<double>(), 0.0);
}

TEST(Http, CaptureWithoutSessionIs409) {
  Harness h;
  auto r = h.post("/capture");
  ASSERT_TRUE(r);
  EXPECT_EQ(r->status, 409);
  EXPECT_EQ(body_of(r)["error"], "no_active_session");
  EXPECT_EQ(h.post("/session/label", {{"class_label", "spill"}})->status, 409);
}

TEST(Http, MalformedBodiesAre400) {
  Harness h;
  EXPECT_EQ(h.client->Post("/session/start", "{not json", "application/json")->status, 400);
  EXPECT_EQ(h.post("/session/start", {{"room", "Atrium"}})->status, 400);
  EXPECT_EQ(h.post("/session/start", json::array())->status, 400);
  ASSERT_EQ(h.post("/session/start", {{"room", "Atrium"}, {"liquid", "water"}})->status, 200);
  EXPECT_EQ(h.post("/session/label", {{"class_label", "puddle"}})->status, 400);
  EXPECT_EQ(h.post("/demo/outcome", {{"frame_ref", -1}, {"ground_truth", "spill"}})->status, 400);
  EXPECT_EQ(h.get("/verdict/latest?after=abc")->status, 400);
}

TEST(Http, StartLabelCaptureHappyPath) {
  Harness h;
  auto r = h.post("/session/start", {{"room", "J234"}, {"liquid", "coke"}});
  ASSERT_EQ(r->status, 200);
  const std::string sid = body_of(r)["session_id"];
  EXPECT_TRUE(is_filesystem_safe(sid));
  ASSERT_EQ(h.post("/session/label", {{"class_label", "spill"}})->status, 200);

  r = h.post("/capture");
  ASSERT_EQ(r->status, 200) << r->body;
  const auto j = body_of(r);
  EXPECT_EQ(j["pair_index"], 1);
  EXPECT_EQ(j["class_label"], "spill");
  const auto& v = j["verdict"];
  ASSERT_TRUE(v.contains("label"));
  ASSERT_TRUE(v.contains("latency_ms"));
  EXPECT_GE(v["latency_ms"].get<double>(), 0.0);
  EXPECT_EQ(v["frame_ref"], 1);
  const double c = v["confidence"];
  EXPECT_EQ(v["label"] == "spill", c >= 0.5);
  EXPECT_NE(v["timestamp"].get<std::string>().find('T'), std::string::npos);

  const std::filesystem::path thermal = j["thermal_path"].get<std::string>();
  EXPECT_TRUE(std::filesystem::exists(thermal));
  EXPECT_TRUE(std::filesystem::exists(j["rgb_path"].get<std::string>()));
  EXPECT_EQ(thermal, pair_path(h.dir.path() / "sessions" / sid, Modality::thermal, ClassLabel::spill, 1));

  r = h.get("/session");
  const auto s = body_of(r);
  EXPECT_EQ(s["session"]["room"], "J234");
  EXPECT_EQ(s["counts"]["spill"], 1);
  EXPECT_EQ(s["counts"]["no_spill"], 0);
  EXPECT_TRUE(s["demo_accuracy"].is_null());
}

TEST(Http, LatestVerdictImmediateAndLongPoll) {
  Harness h;
  h.post("/session/start", {{"room", "Atrium"}, {"liquid", "water"}});
  EXPECT_EQ(h.get("/verdict/latest")->status, 204);
  h.post("/capture");
  auto r = h.get("/verdict/latest");
  ASSERT_EQ(r->status, 200);
  EXPECT_EQ(body_of(r)["frame_ref"], 1);
  EXPECT_EQ(h.get("/verdict/latest?after=1&wait_ms=50")->status, 204);

  auto waiter = std::async(std::launch::async, [&] {
    httplib::Client c("127.0.0.1", h.port);
    c.set_read_timeout(10, 0);
    return c.Get("/verdict/latest?after=1&wait_ms=5000");
  });
  std::this_thread::sleep_for(std::chrono::milliseconds(100));
  h.post("/capture");
  auto polled = waiter.get();
  ASSERT_EQ(polled->status, 200);
  EXPECT_EQ(body_of(polled)["frame_ref"], 2);
}

TEST(Http, VerdictStreamIsMonotone) {
  Harness h;
  h.post("/session/start", {{"room", "Atrium"}, {"liquid", "water"}});
  std::uint64_t last = 0;
  for (int i = 0; i < 6; ++i) {
    const auto j = body_of(h.post("/capture"));
    const auto ref = j["verdict"]["frame_ref"].get<std::uint64_t>();
    EXPECT_GT(ref, last);
    last = ref;
  }
}

TEST(Http, DemoAccuracyThreeOfFive) {
  Harness h;
  h.post("/session/start", {{"room", "Atrium"}, {"liquid", "water"}});
  std::vector<json> verdicts;
  for (int i = 0; i < 5; ++i) verdicts.push_back(body_of(h.post("/capture"))["verdict"]);
  auto flip = [](const json& label) { return label == "spill" ? "no_spill" : "spill"; };
  json last;
  for (int i = 0; i < 5; ++i) {
    const json gt = i < 3 ? verdicts[i]["label"] : json(flip(verdicts[i]["label"]));
    auto r = h.post("/demo/outcome", {{"frame_ref", verdicts[i]["frame_ref"]}, {"ground_truth", gt}});
    ASSERT_EQ(r->status, 200) << r->body;
    last = body_of(r);
  }
  EXPECT_DOUBLE_EQ(last["demo_accuracy"].get<double>(), 0.6);
  EXPECT_EQ(last["labelled"], 5);
  const auto s = body_of(h.get("/session"));
  EXPECT_EQ(s["counts"]["spill"].get<int>() + s["counts"]["no_spill"].get<int>(), 5);
}

TEST(Http, DemoAccuracyAllCorrectAndRelabel) {
  Harness h;
  h.post("/session/start", {{"room", "Atrium"}, {"liquid", "water"}});
  std::vector<json> verdicts;
  for (int i = 0; i < 5; ++i) verdicts.push_back(body_of(h.post("/capture"))["verdict"]);
  json last;
  for (const auto& v : verdicts) {
    last = body_of(h.post("/demo/outcome", {{"frame_ref", v["frame_ref"]}, {"ground_truth", v["label"]}}));
  }
  EXPECT_DOUBLE_EQ(last["demo_accuracy"].get<double>(), 1.0);
  // Last label wins.
  const json wrong = verdicts[0]["label"] == "spill" ? "no_spill" : "spill";
  last = body_of(h.post("/demo/outcome", {{"frame_ref", verdicts[0]["frame_ref"]}, {"ground_truth", wrong}}));
  EXPECT_DOUBLE_EQ(last["demo_accuracy"].get<double>(), 0.8);
  EXPECT_EQ(last["labelled"], 5);
}

TEST(Http, UnknownFrameRefIs404) {
  Harness h;
  h.post("/session/start", {{"room", "Atrium"}, {"liquid", "water"}});
  h.post("/capture");
  auto r = h.post("/demo/outcome", {{"frame_ref", 99}, {"ground_truth", "spill"}});
  EXPECT_EQ(r->status, 404);
  EXPECT_EQ(body_of(r)["error"], "unknown_frame_ref");
}

TEST(Http, ClassifyMatchesOfflineClassify) {
  Harness h;
  ScratchDir data("svcdata");
  const auto m = gen_dataset(SynthSpec::separable(4), 10, data.path(), {{{"Atrium", "water"}}, false});
  BlobThresholdClassifier offline;
  std::size_t checked = 0;
  for (const auto& e : m.entries) {
    if (e.modality != Modality::thermal) continue;
    const auto path = m.absolute(e);
    const auto expected = classify(offline, read_png(path, Modality::thermal));
    auto r = h.post("/classify", {{"path", path.string()}});
    ASSERT_EQ(r->status, 200) << r->body;
    const auto j = body_of(r);
    EXPECT_EQ(j["label"], std::string(to_string(expected.label)));
    EXPECT_NEAR(j["confidence"].get<double>(), expected.confidence, 1e-6);
    EXPECT_EQ(expected.label, e.class_label);
    ++checked;
  }
  EXPECT_EQ(checked, 20u);
}

TEST(Http, ClassifyRejectsWrongModalityAndMissingFile) {
  Harness h;
  ScratchDir data("svcdata");
  const auto rgb = data / "rgb.png";
  write_png(spill::testing::solid_frame(640, 360, Modality::rgb, 10), rgb);
  auto r = h.post("/classify", {{"path", rgb.string()}});
  EXPECT_EQ(r->status, 422);
  EXPECT_EQ(body_of(r)["error"], "modality_mismatch");
  EXPECT_EQ(h.post("/classify", {{"path", (data / "none.png").string()}})->status, 404);
}

TEST(Http, CorsPreflight) {
  Harness h;
  auto r = h.client->Options("/capture");
  ASSERT_TRUE(r);
  EXPECT_EQ(r->status, 204);
  EXPECT_EQ(r->get_header_value("Access-Control-Allow-Origin"), "*");
}

TEST(Worker, RejectsBeyondQueueDepth) {
  InferenceWorker worker(2);
  std::promise<void> gate;
  auto opened = gate.get_future().share();
  std::promise<void> started;
  auto first = worker.submit([&, opened] {
    started.set_value();
    opened.wait();
    return 1;
  });
  started.get_future().wait();  // first job now running, queue empty
  auto a = worker.submit([opened] { opened.wait(); return 2; });
  auto b = worker.submit([opened] { opened.wait(); return 3; });
  try {
    worker.submit([] { return 4; });
    FAIL() << "expected queue_full";
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), Errc::queue_full);
  }
  gate.set_value();
  EXPECT_EQ(first.get() + a.get() + b.get(), 6);
  EXPECT_EQ(worker.submit([] { return 5; }).get(), 5);
}

TEST(Worker, PropagatesExceptions) {
  InferenceWorker worker;
  auto f = worker.submit([]() -> int { throw Error(Errc::io_error, "boom"); });
  EXPECT_THROW(f.get(), Error);
}

TEST(Http, FullQueueIs429) {
  ServiceOptions opts;
  opts.queue_depth = 1;
  Harness h(std::make_unique<SleepClassifier>(std::chrono::milliseconds(400)), opts);
  h.post("/session/start", {{"room", "Atrium"}, {"liquid", "water"}});
  std::vector<std::future<int>> calls;
  for (int i = 0; i < 4; ++i) {
    calls.push_back(std::async(std::launch::async, [&] {
      httplib::Client c("127.0.0.1", h.port);
      c.set_read_timeout(10, 0);
      return c.Post("/capture", "{}", "application/json")->status;
    }));
  }
  int ok = 0, rejected = 0;
  for (auto& c : calls) {
    const int status = c.get();
    ok += status == 200;
    rejected += status == 429;
  }
  EXPECT_EQ(ok + rejected, 4);
  EXPECT_GE(ok, 1);
  EXPECT_GE(rejected, 1);
}

TEST(Classify, ModalityAndFusionErrors) {
  BlobThresholdClassifier thermal_model;
  try {
    classify(thermal_model, spill::testing::solid_frame(640, 360, Modality::rgb, 0));
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), Errc::modality_mismatch);
  }
  const auto pair = gen_no_spill(SynthSpec::separable(1), 0);
  ConstantClassifier combined(0.7f, Modality::combined);
  try {
    classify(combined, pair, std::nullopt);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), Errc::fusion_failure);
  }
  const auto v = classify(combined, pair, identity_calibration());
  EXPECT_EQ(v.label, ClassLabel::spill);
  EXPECT_FLOAT_EQ(static_cast<float>(v.confidence), 0.7f);
  const auto fused = model_input(pair, Modality::combined, identity_calibration());
  EXPECT_EQ(fused.size(), kCombinedSize);
}

TEST(Classify, IdenticalInputIdenticalVerdict) {
  BlobThresholdClassifier model;
  const auto s = gen_spill(SynthSpec::separable(2), 0);
  const auto a = classify(model, s.pair.thermal);
  const auto b = classify(model, s.pair.thermal);
  EXPECT_EQ(a.label, b.label);
  EXPECT_EQ(a.confidence, b.confidence);
  EXPECT_EQ(a.label, ClassLabel::spill);
}

TEST(Service, CombinedModelNeedsCalibration) {
  ScratchDir dir("svc");
  ServiceOptions opts;
  opts.session_root = dir.path();
  InferenceService svc(opts);
  try {
    svc.set_model(std::make_unique<ConstantClassifier>(0.2f, Modality::combined));
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), Errc::fusion_failure);
  }
}

TEST(Service, CombinedCaptureSavesFusedFrame) {
  ScratchDir dir("svc");
  ServiceOptions opts;
  opts.session_root = dir.path();
  opts.calibration = identity_calibration();
  InferenceService svc(opts);
  svc.set_model(std::make_unique<ConstantClassifier>(0.2f, Modality::combined));
  const auto sid = svc.start_session("Atrium", "coke");
  const auto r = svc.capture();
  EXPECT_EQ(r.verdict.label, ClassLabel::no_spill);
  const auto fused = pair_path(dir.path() / sid, Modality::combined, ClassLabel::no_spill, r.saved.index);
  ASSERT_TRUE(std::filesystem::exists(fused));
  EXPECT_EQ(read_png(fused, Modality::combined).size(), kCombinedSize);
}

TEST(Service, SessionRebuildsFromLogAndFiles) {
  ScratchDir dir("svc");
  ServiceOptions opts;
  opts.session_root = dir.path();
  InferenceService svc(opts);
  svc.set_model(std::make_unique<BlobThresholdClassifier>());
  const auto sid = svc.start_session("J234", "red_juice");
  svc.set_label(ClassLabel::spill);
  std::vector<CaptureResult> caps;
  for (int i = 0; i < 3; ++i) caps.push_back(svc.capture());
  svc.set_label(ClassLabel::no_spill);
  for (int i = 0; i < 2; ++i) caps.push_back(svc.capture());
  svc.record_outcome(caps[0].verdict.frame_ref, caps[0].verdict.label);
  svc.record_outcome(caps[1].verdict.frame_ref,
                     caps[1].verdict.label == ClassLabel::spill ? ClassLabel::no_spill : ClassLabel::spill);
  const auto live = *svc.tally();

  const auto reopened = Session::reopen(dir.path() / sid);
  EXPECT_EQ(reopened->meta().room, "J234");
  EXPECT_EQ(reopened->meta().class_label, ClassLabel::no_spill);
  EXPECT_EQ(reopened->captured(ClassLabel::spill), 3u);
  EXPECT_EQ(reopened->captured(ClassLabel::no_spill), 2u);
  EXPECT_EQ(reopened->tally().labelled, live.labelled);
  EXPECT_EQ(reopened->tally().correct, live.correct);
  ASSERT_EQ(reopened->log().size(), 5u);
  for (std::size_t i = 0; i < 5; ++i) {
    EXPECT_EQ(reopened->log()[i].verdict.frame_ref, caps[i].verdict.frame_ref);
    EXPECT_DOUBLE_EQ(reopened->log()[i].verdict.confidence, caps[i].verdict.confidence);
  }
  // Counts equal files on disk.
  for (auto label : {ClassLabel::spill, ClassLabel::no_spill}) {
    for (auto mod : {Modality::thermal, Modality::rgb}) {
      const auto d = dir.path() / sid / std::string(to_string(mod)) / std::string(to_string(label));
      const auto n = static_cast<std::size_t>(
          std::distance(std::filesystem::directory_iterator(d), std::filesystem::directory_iterator()));
      EXPECT_EQ(n, reopened->captured(label));
    }
  }
}

TEST(Service, NewSessionResetsLatest) {
  ScratchDir dir("svc");
  ServiceOptions opts;
  opts.session_root = dir.path();
  InferenceService svc(opts);
  svc.set_model(std::make_unique<BlobThresholdClassifier>());
  const auto a = svc.start_session("Atrium", "water");
  svc.capture();
  EXPECT_TRUE(svc.latest());
  const auto b = svc.start_session("Atrium", "water");
  EXPECT_NE(a, b);
  EXPECT_FALSE(svc.latest());
  EXPECT_EQ(svc.counts(), std::make_pair(std::size_t{0}, std::size_t{0}));
}

TEST(Service, ReplaySourceExhaustionIs503) {
  ScratchDir dir("svc");
  ScratchDir frames("frames");
  for (auto mod : {Modality::thermal, Modality::rgb}) {
    std::filesystem::create_directories(frames / std::string(to_string(mod)));
    const auto size = canonical_size(mod);
    write_png(spill::testing::solid_frame(size.width, size.height, mod, 50),
              frames / std::string(to_string(mod)) / "f0.png");
  }
  ServiceOptions opts;
  opts.thermal_source = parse_source_descriptor("replay:" + (frames / "thermal").string(), Modality::thermal);
  opts.rgb_source = parse_source_descriptor("replay:" + (frames / "rgb").string(), Modality::rgb);
  Harness h(std::make_unique<BlobThresholdClassifier>(), opts);
  h.post("/session/start", {{"room", "Atrium"}, {"liquid", "water"}});
  EXPECT_EQ(h.post("/capture")->status, 200);
  auto r = h.post("/capture");
  EXPECT_EQ(r->status, 503);
  EXPECT_EQ(body_of(r)["error"], "end_of_stream");
}

TEST(ListenAddress, Parses) {
  EXPECT_EQ(parse_listen_address("127.0.0.1:8750"), std::make_pair(std::string("127.0.0.1"), 8750));
  EXPECT_EQ(parse_listen_address("localhost:0"), std::make_pair(std::string("localhost"), 0));
  EXPECT_THROW(parse_listen_address("8750"), Error);
  EXPECT_THROW(parse_listen_address("host:99999"), Error);
  EXPECT_THROW(parse_listen_address("host:12a"), Error);
}
