#include "cardroute/service.hpp"

#include "cardroute/error.hpp"
#include "cardroute/io.hpp"
#include "cardroute/text.hpp"

#include <httplib.h>

#include <cmath>
#include <cstdlib>

namespace cardroute {

using nlohmann::json;

namespace {

std::filesystem::path resolve(const std::filesystem::path& base, const std::string& p) {
  std::filesystem::path path(p);
  return path.is_relative() ? base / path : path;
}

json error_body(const std::string& code, const std::string& message) {
  return {{"error", {{"code", code}, {"message", message}}}};
}

int status_for(ErrorCode code) {
  switch (code) {
    case ErrorCode::kInvalidArgument:
    case ErrorCode::kInvalidThresholds: return 400;
    case ErrorCode::kFixtureMissing:
    case ErrorCode::kRecordNotFound: return 404;
    case ErrorCode::kBackendUnreachable:
    case ErrorCode::kProtocolError:
    case ErrorCode::kLogprobsUnsupported:
    case ErrorCode::kUnknownFirstToken: return 502;
    default: return 500;
  }
}

}  // namespace

BackendSpec BackendSpec::from_json(const json& j, const std::filesystem::path& base_dir) {
  BackendSpec spec;
  const std::string kind = j.value("kind", std::string("scripted"));
  if (kind == "scripted") {
    spec.kind = Kind::kScripted;
    if (!j.contains("script") || !j["script"].is_string()) {
      throw Error(ErrorCode::kInvalidArgument, "scripted backend needs a 'script' path");
    }
    spec.script = resolve(base_dir, j["script"].get<std::string>());
  } else if (kind == "remote") {
    spec.kind = Kind::kRemote;
    spec.remote = RemoteBackendConfig::from_json(j);
  } else {
    throw Error(ErrorCode::kInvalidArgument, "backend kind must be 'scripted' or 'remote'");
  }
  return spec;
}

std::unique_ptr<VlmBackend> BackendSpec::open() const {
  if (kind == Kind::kScripted) return ScriptedBackend::load(script);
  return std::make_unique<RemoteBackend>(remote);
}

ServiceConfig ServiceConfig::from_json(const json& j, const std::filesystem::path& base_dir) {
  try {
    ServiceConfig c;
    c.cards = resolve(base_dir, j.at("cards").get<std::string>());
    c.audit_store = resolve(base_dir, j.at("audit_store").get<std::string>());
    if (j.contains("templates_dir")) c.templates_dir = resolve(base_dir, j["templates_dir"].get<std::string>());
    c.backend = BackendSpec::from_json(j.at("backend"), base_dir);
    if (j.contains("thresholds")) c.thresholds = Thresholds::from_json(j["thresholds"]);
    c.thresholds.validate();
    const std::string sets = j.value("abstain_sets", std::string("stage"));
    if (sets == "global") {
      c.pipeline.abstain_sets = AbstainSets::global();
    } else if (sets != "stage") {
      throw Error(ErrorCode::kInvalidArgument, "abstain_sets must be 'stage' or 'global'");
    }
    c.pipeline.top_k = j.value("top_k", c.pipeline.top_k);
    c.pipeline.max_answer_tokens = j.value("max_answer_tokens", c.pipeline.max_answer_tokens);
    c.pipeline.extra_modalities = j.value("extra_modalities", std::vector<std::string>{});
    c.host = j.value("host", c.host);
    c.port = j.value("port", c.port);
    return c;
  } catch (const json::exception& e) {
    throw Error(ErrorCode::kInvalidArgument, std::string("bad service config: ") + e.what());
  }
}

ServiceConfig ServiceConfig::load(const std::filesystem::path& path) {
  json j;
  try {
    j = json::parse(read_file(path));
  } catch (const json::parse_error& e) {
    throw Error(ErrorCode::kInvalidArgument, "config " + path.string() + " is not JSON: " + e.what());
  }
  return from_json(j, path.parent_path());
}

struct RoutingService::Http {
  httplib::Server server;
  int port = -1;
  std::mutex mu;
  bool running = false;
  bool stop_requested = false;
};

RoutingService::RoutingService(ServiceConfig config) : config_(std::move(config)) {
  owned_backend_ = config_.backend.open();
  backend_ = owned_backend_.get();
  prompts_ = config_.templates_dir ? PromptBuilder(PromptTemplates::load_dir(*config_.templates_dir)) : PromptBuilder();
  store_ = std::make_unique<AuditStore>(config_.audit_store);
  repo_ = std::make_shared<const CardRepository>(CardRepository::load(config_.cards));
}

RoutingService::RoutingService(ServiceConfig config, VlmBackend& backend)
    : config_(std::move(config)), backend_(&backend) {
  prompts_ = config_.templates_dir ? PromptBuilder(PromptTemplates::load_dir(*config_.templates_dir)) : PromptBuilder();
  store_ = std::make_unique<AuditStore>(config_.audit_store);
  repo_ = std::make_shared<const CardRepository>(CardRepository::load(config_.cards));
}

RoutingService::~RoutingService() { stop(); }

std::shared_ptr<const CardRepository> RoutingService::repository() const {
  std::lock_guard lock(repo_mu_);
  return repo_;
}

void RoutingService::reload_repository() {
  auto fresh = std::make_shared<const CardRepository>(CardRepository::load(config_.cards));
  std::lock_guard lock(repo_mu_);
  repo_ = std::move(fresh);
}

HttpReply RoutingService::handle_route(const RouteHttpRequest& request) {
  if (trim(request.case_id).empty() && !request.image) {
    return {400, error_body("InvalidArgument", "a case_id or an image is required")};
  }
  if (request.image && request.image->size() > kMaxImageBytes) {
    return {413, error_body("PayloadTooLarge", "image exceeds " + std::to_string(kMaxImageBytes) + " bytes")};
  }
  if (!request.image && config_.backend.kind == BackendSpec::Kind::kRemote) {
    return {400, error_body("InvalidArgument", "an image is required for stages 1 and 2")};
  }

  Thresholds thresholds = config_.thresholds;
  for (const auto& [key, text] : request.overrides) {
    double* slot = key == "tau1" ? &thresholds.tau1 : key == "tau2" ? &thresholds.tau2
                                                   : key == "tau3" ? &thresholds.tau3
                                                                   : nullptr;
    if (!slot) return {400, error_body("InvalidArgument", "unknown override '" + key + "'")};
    char* end = nullptr;
    const std::string value = trim(text);
    const double v = std::strtod(value.c_str(), &end);
    if (value.empty() || end != value.c_str() + value.size()) {
      return {400, error_body("InvalidThresholds", key + " is not a number: '" + text + "'")};
    }
    *slot = v;
  }
  try {
    thresholds.validate();
  } catch (const Error& e) {
    return {400, error_body(error_code_name(e.code()), e.what())};
  }

  RouteRequest route_req{request.case_id, nullptr, thresholds};
  if (request.image) {
    route_req.image = std::make_shared<const ImageBytes>(request.image->begin(), request.image->end());
  }
  const auto repo = repository();
  const RoutingPipeline pipeline(*repo, *backend_, prompts_, config_.pipeline);
  try {
    RouteResult result = pipeline.route(route_req);
    store_->append(result.record);
    return {200, {{"outcome", result.outcome.to_json()}, {"decision_record", result.record.to_json()}}};
  } catch (const RouteFailure& f) {
    try {
      store_->append(f.partial_record());
    } catch (const Error& e) {
      return {500, error_body(error_code_name(e.code()), std::string("audit append failed: ") + e.what())};
    }
    json body = error_body(error_code_name(f.code()), f.what());
    body["decision_record"] = f.partial_record().to_json();
    return {status_for(f.code()), std::move(body)};
  } catch (const Error& e) {
    return {status_for(e.code()), error_body(error_code_name(e.code()), e.what())};
  }
}

HttpReply RoutingService::handle_cards() const {
  const auto repo = repository();
  json cards = json::array();
  for (const auto& c : repo->cards()) {
    cards.push_back({{"id", c.id}, {"task_caption", c.task_caption}, {"modality", c.modality}});
  }
  return {200, {{"digest", repo->source_digest()}, {"cards", std::move(cards)}}};
}

HttpReply RoutingService::handle_decisions(std::size_t limit) const {
  json arr = json::array();
  for (const auto& r : store_->recent(limit)) arr.push_back(r.to_json());
  return {200, {{"decisions", std::move(arr)}}};
}

HttpReply RoutingService::handle_decision(const std::string& id) const {
  auto r = store_->find(id);
  if (!r) return {404, error_body("RecordNotFound", "no decision " + id)};
  return {200, r->to_json()};
}

HttpReply RoutingService::handle_health() {
  const bool ok = backend_->reachable();
  const auto repo = repository();
  return {ok ? 200 : 503,
          {{"status", ok ? "ok" : "degraded"},
           {"backend", backend_->identifier()},
           {"backend_reachable", ok},
           {"repo_digest", repo->source_digest()},
           {"cards", repo->size()},
           {"template_version", prompts_.template_version()}}};
}

namespace {

void send(httplib::Response& res, const HttpReply& reply) {
  res.status = reply.status;
  res.set_content(reply.body.dump(), "application/json");
}

}  // namespace

int RoutingService::bind() {
  if (http_) return http_->port;
  http_ = std::make_unique<Http>();
  auto& srv = http_->server;
  // Multipart framing overhead on top of the image limit; oversize images
  // within it are rejected by handle_route with 413.
  srv.set_payload_max_length(kMaxImageBytes + 1024 * 1024);

  srv.Post("/v1/route", [this](const httplib::Request& req, httplib::Response& res) {
    RouteHttpRequest r;
    auto field = [&](const char* name) -> std::optional<std::string> {
      if (req.has_file(name)) return req.get_file_value(name).content;
      if (req.has_param(name)) return req.get_param_value(name);
      return std::nullopt;
    };
    if (auto v = field("case_id")) r.case_id = *v;
    if (req.has_file("image")) r.image = req.get_file_value("image").content;
    for (const char* key : {"tau1", "tau2", "tau3"}) {
      if (auto v = field(key)) r.overrides[key] = *v;
    }
    send(res, handle_route(r));
  });
  srv.Get("/v1/cards", [this](const httplib::Request&, httplib::Response& res) { send(res, handle_cards()); });
  srv.Get("/v1/decisions", [this](const httplib::Request& req, httplib::Response& res) {
    std::size_t limit = 20;
    if (req.has_param("limit")) {
      const std::string text = req.get_param_value("limit");
      char* end = nullptr;
      const long v = std::strtol(text.c_str(), &end, 10);
      if (text.empty() || end != text.c_str() + text.size() || v < 1 || v > 1000) {
        send(res, {400, error_body("InvalidArgument", "limit must be an integer in [1, 1000]")});
        return;
      }
      limit = static_cast<std::size_t>(v);
    }
    send(res, handle_decisions(limit));
  });
  srv.Get(R"(/v1/decisions/([0-9A-Za-z_\-]+))", [this](const httplib::Request& req, httplib::Response& res) {
    send(res, handle_decision(req.matches[1]));
  });
  srv.Get("/healthz", [this](const httplib::Request&, httplib::Response& res) { send(res, handle_health()); });

  if (config_.port == 0) {
    http_->port = srv.bind_to_any_port(config_.host);
  } else {
    http_->port = srv.bind_to_port(config_.host, config_.port) ? config_.port : -1;
  }
  if (http_->port < 0) {
    http_.reset();
    throw Error(ErrorCode::kIo, "cannot bind " + config_.host + ":" + std::to_string(config_.port));
  }
  return http_->port;
}

void RoutingService::run() {
  if (!http_) throw Error(ErrorCode::kInvalidArgument, "bind() must be called before run()");
  {
    std::lock_guard lock(http_->mu);
    if (http_->stop_requested) return;
    http_->running = true;
  }
  http_->server.listen_after_bind();
}

void RoutingService::stop() {
  if (!http_) return;
  std::lock_guard lock(http_->mu);
  http_->stop_requested = true;
  // server.stop() is a no-op until the accept loop is up.
  if (http_->running) {
    http_->server.wait_until_ready();
    http_->server.stop();
  }
}

}  // namespace cardroute
