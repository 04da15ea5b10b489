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

#include <algorithm>

#include <httplib.h>
#include <json.hpp>

#include "spill/errors.hpp"
#include "spill/service.hpp"

using nlohmann::json;

namespace spill {

namespace {

int http_status(Errc code) {
  switch (code) {
    case Errc::invalid_argument: return 400;
    case Errc::no_active_session: return 409;
    case Errc::unknown_frame_ref:
    case Errc::missing_file: return 404;
    case Errc::queue_full: return 429;
    case Errc::modality_mismatch:
    case Errc::dimension_mismatch:
    case Errc::fusion_failure: return 422;
    case Errc::model_load_failure:
    case Errc::device_unavailable:
    case Errc::end_of_stream:
    case Errc::skew_exceeded: return 503;
    default: return 500;
  }
}

void reply(httplib::Response& res, int status, const json& body) {
  res.status = status;
  res.set_content(body.dump(), "application/json");
}

// Machine-readable code: "no active session" -> "no_active_session".
void reply_error(httplib::Response& res, int status, std::string_view code, const std::string& message) {
  std::string id(code);
  std::replace(id.begin(), id.end(), ' ', '_');
  reply(res, status, {{"error", id}, {"message", message}});
}

json parse_body(const httplib::Request& req) {
  if (req.body.empty()) return json::object();
  json j = json::parse(req.body);  // parse_error maps to 400
  if (!j.is_object()) throw Error(Errc::invalid_argument, "request body must be a JSON object");
  return j;
}

std::string required_string(const json& j, const char* key) {
  if (!j.contains(key) || !j[key].is_string()) throw Error(Errc::invalid_argument, std::string("missing string field '") + key + "'");
  return j[key].get<std::string>();
}

ClassLabel required_label(const json& j, const char* key) {
  const auto label = parse_class_label(required_string(j, key));
  if (!label) throw Error(Errc::invalid_argument, std::string("'") + key + "' must be spill or no_spill");
  return *label;
}

json verdict_body(const ClassVerdict& v) { return json::parse(verdict_json(v)); }

json accuracy_value(const DemoTally& t) {
  const auto a = t.accuracy();
  return a ? json(*a) : json(nullptr);
}

}  // namespace

struct HttpFrontend::Impl {
  explicit Impl(InferenceService& s) : service(s) {}
  InferenceService& service;
  httplib::Server server;
  std::thread thread;

  using Handler = std::function<void(const httplib::Request&, httplib::Response&)>;

  // Maps exceptions to status codes so every handler answers with JSON.
  Handler guarded(Handler h) {
    return [h = std::move(h)](const httplib::Request& req, httplib::Response& res) {
      try {
        h(req, res);
      } catch (const Error& e) {
        reply_error(res, http_status(e.code()), to_string(e.code()), e.what());
      } catch (const json::exception& e) {
        reply_error(res, 400, "invalid_argument", std::string("malformed JSON: ") + e.what());
      } catch (const std::exception& e) {
        reply_error(res, 500, "internal", e.what());
      }
    };
  }

  // Endpoints that need the model answer 503 until it is loaded.
  Handler needs_model(Handler h) {
    return guarded([this, h = std::move(h)](const httplib::Request& req, httplib::Response& res) {
      if (!service.ready()) {
        reply_error(res, 503, "not_ready", "model is still loading");
        return;
      }
      h(req, res);
    });
  }

  void routes() {
    server.set_default_headers({{"Access-Control-Allow-Origin", "*"},
                                {"Access-Control-Allow-Headers", "Content-Type"},
                                {"Access-Control-Allow-Methods", "GET, POST, OPTIONS"}});
    server.Options(R"(/.*)", [](const httplib::Request&, httplib::Response& res) { res.status = 204; });

    server.Get("/health", guarded([this](const httplib::Request&, httplib::Response& res) {
      if (!service.ready()) {
        reply(res, 503, {{"status", "loading"}, {"uptime", service.uptime_s()}});
        return;
      }
      reply(res, 200,
            {{"status", "ok"},
             {"model", service.model_name()},
             {"modality", to_string(*service.model_modality())},
             {"uptime", service.uptime_s()}});
    }));

    server.Post("/session/start", guarded([this](const httplib::Request& req, httplib::Response& res) {
      const json body = parse_body(req);
      const auto id = service.start_session(required_string(body, "room"), required_string(body, "liquid"));
      reply(res, 200, {{"session_id", id}});
    }));

    server.Post("/session/label", guarded([this](const httplib::Request& req, httplib::Response& res) {
      const json body = parse_body(req);
      const auto label = required_label(body, "class_label");
      service.set_label(label);
      reply(res, 200, {{"class_label", to_string(label)}});
    }));

    server.Get("/session", guarded([this](const httplib::Request&, httplib::Response& res) {
      const auto meta = service.session();
      if (!meta) {
        reply(res, 200, {{"session", nullptr}});
        return;
      }
      const auto [spill, no_spill] = service.counts();
      const auto tally = service.tally().value_or(DemoTally{});
      reply(res, 200,
            {{"session",
              {{"session_id", meta->session_id},
               {"room", meta->room},
               {"liquid", meta->liquid},
               {"class_label", to_string(meta->class_label)}}},
             {"counts", {{"spill", spill}, {"no_spill", no_spill}}},
             {"demo_accuracy", accuracy_value(tally)},
             {"labelled", tally.labelled}});
    }));

    server.Post("/capture", needs_model([this](const httplib::Request& req, httplib::Response& res) {
      parse_body(req);
      const auto r = service.capture();
      reply(res, 200,
            {{"pair_index", r.saved.index},
             {"thermal_path", r.saved.thermal_path.generic_string()},
             {"rgb_path", r.saved.rgb_path.generic_string()},
             {"class_label", to_string(r.class_label)},
             {"verdict", verdict_body(r.verdict)}});
    }));

    server.Get("/verdict/latest", guarded([this](const httplib::Request& req, httplib::Response& res) {
      std::optional<std::uint64_t> after;
      std::chrono::milliseconds wait{0};
      try {
        if (req.has_param("after")) after = std::stoull(req.get_param_value("after"));
        if (req.has_param("wait_ms")) {
          wait = std::chrono::milliseconds(std::clamp<long long>(std::stoll(req.get_param_value("wait_ms")), 0, 30000));
        }
      } catch (const std::exception&) {
        throw Error(Errc::invalid_argument, "after and wait_ms must be integers");
      }
      const auto v = service.latest(after, wait);
      if (!v) {
        res.status = 204;
        return;
      }
      reply(res, 200, verdict_body(*v));
    }));

    server.Post("/demo/outcome", guarded([this](const httplib::Request& req, httplib::Response& res) {
      const json body = parse_body(req);
      if (!body.contains("frame_ref") || !body["frame_ref"].is_number_unsigned()) {
        throw Error(Errc::invalid_argument, "missing non-negative integer field 'frame_ref'");
      }
      const auto t = service.record_outcome(body["frame_ref"].get<std::uint64_t>(), required_label(body, "ground_truth"));
      reply(res, 200, {{"demo_accuracy", accuracy_value(t)}, {"labelled", t.labelled}, {"correct", t.correct}});
    }));

    server.Post("/classify", needs_model([this](const httplib::Request& req, httplib::Response& res) {
      const json body = parse_body(req);
      reply(res, 200, verdict_body(service.classify_file(required_string(body, "path"))));
    }));
  }
};

HttpFrontend::HttpFrontend(InferenceService& service) : impl_(std::make_unique<Impl>(service)) { impl_->routes(); }

HttpFrontend::~HttpFrontend() { stop(); }

int HttpFrontend::start(const std::string& host, int port) {
  if (impl_->thread.joinable()) throw Error(Errc::invalid_argument, "server already running");
  if (port == 0) {
    port_ = impl_->server.bind_to_any_port(host);
  } else {
    port_ = impl_->server.bind_to_port(host, port) ? port : -1;
  }
  if (port_ <= 0) throw Error(Errc::io_error, "cannot bind " + host + ":" + std::to_string(port));
  impl_->thread = std::thread([this] { impl_->server.listen_after_bind(); });
  impl_->server.wait_until_ready();
  return port_;
}

void HttpFrontend::listen_blocking(const std::string& host, int port) {
  if (!impl_->server.bind_to_port(host, port)) {
    throw Error(Errc::io_error, "cannot bind " + host + ":" + std::to_string(port));
  }
  port_ = port;
  impl_->server.listen_after_bind();
}

void HttpFrontend::stop() {
  impl_->server.stop();
  if (impl_->thread.joinable()) impl_->thread.join();
}

}  // namespace spill
