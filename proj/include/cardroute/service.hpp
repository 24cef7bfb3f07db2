#pragma once

#include "cardroute/audit_store.hpp"
#include "cardroute/card_repository.hpp"
#include "cardroute/decision_record.hpp"
#include "cardroute/prompt_builder.hpp"
#include "cardroute/remote_backend.hpp"
#include "cardroute/routing_pipeline.hpp"
#include "cardroute/vlm_backend.hpp"

#include <json.hpp>

#include <cstddef>
#include <filesystem>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>

namespace cardroute {

inline constexpr std::size_t kMaxImageBytes = 20u * 1024u * 1024u;

struct BackendSpec {
  enum class Kind { kScripted, kRemote } kind = Kind::kScripted;
  std::filesystem::path script;  // kScripted
  RemoteBackendConfig remote;    // kRemote

  static BackendSpec from_json(const nlohmann::json& j, const std::filesystem::path& base_dir);
  std::unique_ptr<VlmBackend> open() const;
};

// JSON config:
// { "cards": path, "audit_store": path, "templates_dir": path?,
//   "backend": {"kind": "scripted", "script": path} |
//              {"kind": "remote", "base_url", "model", "max_in_flight", "timeout_s", ...},
//   "thresholds": {"tau1", "tau2", "tau3"}, "abstain_sets": "stage" | "global",
//   "top_k": 5, "extra_modalities": [...], "host": "127.0.0.1", "port": 8080 }
// Relative paths resolve against the config file's directory.
struct ServiceConfig {
  std::filesystem::path cards;
  std::filesystem::path audit_store;
  std::optional<std::filesystem::path> templates_dir;
  BackendSpec backend;
  Thresholds thresholds;
  PipelineOptions pipeline;
  std::string host = "127.0.0.1";
  int port = 8080;  // 0 binds an ephemeral port

  static ServiceConfig from_json(const nlohmann::json& j, const std::filesystem::path& base_dir);
  static ServiceConfig load(const std::filesystem::path& path);
};

// Transport-independent request/response so handlers are testable without
// sockets; the HTTP server is a thin adapter over these.
struct HttpReply {
  int status = 200;
  nlohmann::json body;
};

struct RouteHttpRequest {
  std::string case_id;
  std::optional<std::string> image;  // raw bytes of the uploaded file
  std::map<std::string, std::string> overrides;  // tau1/tau2/tau3 as text
};

class RoutingService {
 public:
  explicit RoutingService(ServiceConfig config);
  // Wires an existing backend; the service does not own it.
  RoutingService(ServiceConfig config, VlmBackend& backend);
  ~RoutingService();

  // 200 {outcome, decision_record}; 400 bad overrides or missing image;
  // 404 unknown scripted case; 413 oversized image; 502 backend failure.
  // Every started route is appended to the audit store before returning.
  HttpReply handle_route(const RouteHttpRequest& request);
  HttpReply handle_cards() const;
  HttpReply handle_decisions(std::size_t limit) const;
  HttpReply handle_decision(const std::string& id) const;
  HttpReply handle_health();

  // Loads the card file again and swaps the snapshot in; in-flight routes
  // keep the snapshot they started with.
  void reload_repository();
  std::shared_ptr<const CardRepository> repository() const;

  // Binds host:port (port 0 picks one) and returns the bound port.
  int bind();
  // Serves until stop(); bind() must have been called.
  void run();
  void stop();

  const ServiceConfig& config() const noexcept { return config_; }
  AuditStore& audit_store() noexcept { return *store_; }

 private:
  struct Http;

  ServiceConfig config_;
  std::unique_ptr<VlmBackend> owned_backend_;
  VlmBackend* backend_;
  PromptBuilder prompts_;
  std::unique_ptr<AuditStore> store_;
  mutable std::mutex repo_mu_;
  std::shared_ptr<const CardRepository> repo_;
  std::unique_ptr<Http> http_;
};

}  // namespace cardroute
