#pragma once

#include "cardroute/vlm_backend.hpp"

#include <chrono>
#include <memory>
#include <string>

#include <json.hpp>

namespace cardroute {

inline constexpr const char* kBackendTokenEnv = "CARD_ROUTER_BACKEND_TOKEN";

struct RemoteBackendConfig {
  std::string base_url;  // e.g. http://127.0.0.1:8000
  std::string model;
  std::string auth_token;  // empty: read kBackendTokenEnv at construction
  int max_in_flight = 4;
  std::chrono::milliseconds timeout{60'000};
  int max_retries = 2;  // on 5xx and transport failures; never on 4xx
  std::chrono::milliseconds initial_backoff{500};

  static RemoteBackendConfig from_json(const nlohmann::json& j);
};

// OpenAI-style chat-completions client. The wire format is described in
// docs/protocol.md; the body builders and response parsers are exposed for
// golden tests.
class RemoteBackend final : public VlmBackend {
 public:
  explicit RemoteBackend(RemoteBackendConfig config);
  ~RemoteBackend() override;

  FirstTokenDistribution rank_first_tokens(const GenerationRequest& req, std::size_t k) override;
  std::string decode_with_first_token(const GenerationRequest& req, std::string_view first_token) override;
  std::string identifier() const override;
  bool reachable() override;

  const RemoteBackendConfig& config() const noexcept { return config_; }

  static nlohmann::json build_rank_body(const GenerationRequest& req, const std::string& model, std::size_t k);
  static nlohmann::json build_decode_body(const GenerationRequest& req, const std::string& model,
                                          std::string_view first_token);
  static FirstTokenDistribution parse_rank_response(const nlohmann::json& body, std::size_t k);
  static std::string parse_decode_response(const nlohmann::json& body, std::string_view first_token);

 private:
  nlohmann::json post_with_retries(const nlohmann::json& body);

  RemoteBackendConfig config_;
  struct Slots;
  std::unique_ptr<Slots> slots_;
};

std::string base64_encode(const ImageBytes& bytes);
// "image/png", "image/jpeg" or "application/octet-stream" from magic bytes.
std::string sniff_image_mime(const ImageBytes& bytes);

}  // namespace cardroute
