#include "cardroute/remote_backend.hpp"

#include "cardroute/error.hpp"
#include "cardroute/text.hpp"

#include <httplib.h>
#include <openssl/evp.h>

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <semaphore>
#include <thread>

namespace cardroute {

using nlohmann::json;

namespace {

constexpr const char* kCompletionsPath = "/v1/chat/completions";

[[noreturn]] void protocol_error(const std::string& detail) {
  throw Error(ErrorCode::kProtocolError, "backend protocol error: " + detail);
}

json user_message(const GenerationRequest& req) {
  json content = json::array();
  content.push_back({{"type", "text"}, {"text", req.user_prompt}});
  if (req.has_image()) {
    const std::string url = "data:" + sniff_image_mime(*req.image) + ";base64," + base64_encode(*req.image);
    content.push_back({{"type", "image_url"}, {"image_url", {{"url", url}}}});
  }
  return {{"role", "user"}, {"content", std::move(content)}};
}

json base_messages(const GenerationRequest& req) {
  json messages = json::array();
  messages.push_back({{"role", "system"}, {"content", req.system_prompt}});
  messages.push_back(user_message(req));
  return messages;
}

const json& first_choice(const json& body) {
  if (!body.is_object() || !body.contains("choices") || !body["choices"].is_array() || body["choices"].empty()) {
    protocol_error("response has no choices");
  }
  const json& choice = body["choices"][0];
  if (!choice.is_object()) protocol_error("choice is not an object");
  return choice;
}

std::string message_content(const json& choice) {
  if (!choice.contains("message") || !choice["message"].is_object()) protocol_error("choice has no message");
  const json& content = choice["message"].value("content", json());
  if (!content.is_string()) protocol_error("message content is not a string");
  return content.get<std::string>();
}

std::string strip_leading_space(std::string_view s) {
  std::size_t i = 0;
  while (i < s.size() && (s[i] == ' ' || s[i] == '\t' || s[i] == '\n')) ++i;
  return std::string(s.substr(i));
}

}  // namespace

struct RemoteBackend::Slots {
  explicit Slots(int n) : sem(n) {}
  std::counting_semaphore<1024> sem;
};

RemoteBackendConfig RemoteBackendConfig::from_json(const json& j) {
  RemoteBackendConfig c;
  c.base_url = j.value("base_url", std::string());
  c.model = j.value("model", std::string());
  c.auth_token = j.value("auth_token", std::string());
  c.max_in_flight = j.value("max_in_flight", c.max_in_flight);
  c.timeout = std::chrono::milliseconds(static_cast<long>(j.value("timeout_s", 60.0) * 1000.0));
  c.max_retries = j.value("max_retries", c.max_retries);
  c.initial_backoff = std::chrono::milliseconds(j.value("initial_backoff_ms", 500));
  return c;
}

RemoteBackend::RemoteBackend(RemoteBackendConfig config) : config_(std::move(config)) {
  if (config_.base_url.empty()) throw Error(ErrorCode::kInvalidArgument, "remote backend needs a base_url");
  if (config_.max_in_flight < 1 || config_.max_in_flight > 1024) {
    throw Error(ErrorCode::kInvalidArgument, "max_in_flight must be in [1, 1024]");
  }
  if (config_.max_retries < 0) throw Error(ErrorCode::kInvalidArgument, "max_retries must be >= 0");
  if (config_.auth_token.empty()) {
    if (const char* env = std::getenv(kBackendTokenEnv)) config_.auth_token = env;
  }
  while (!config_.base_url.empty() && config_.base_url.back() == '/') config_.base_url.pop_back();
  slots_ = std::make_unique<Slots>(config_.max_in_flight);
}

RemoteBackend::~RemoteBackend() = default;

std::string RemoteBackend::identifier() const {
  return "remote:" + config_.base_url + "#" + config_.model;
}

json RemoteBackend::build_rank_body(const GenerationRequest& req, const std::string& model, std::size_t k) {
  return {{"model", model},
          {"messages", base_messages(req)},
          {"max_tokens", req.max_answer_tokens},
          {"temperature", 0},
          {"logprobs", true},
          {"top_logprobs", k}};
}

json RemoteBackend::build_decode_body(const GenerationRequest& req, const std::string& model,
                                      std::string_view first_token) {
  json messages = base_messages(req);
  messages.push_back({{"role", "assistant"}, {"content", std::string(first_token)}});
  return {{"model", model},
          {"messages", std::move(messages)},
          {"max_tokens", std::max(1, req.max_answer_tokens - 1)},
          {"temperature", 0},
          {"add_generation_prompt", false},
          {"continue_final_message", true}};
}

FirstTokenDistribution RemoteBackend::parse_rank_response(const json& body, std::size_t k) {
  const json& choice = first_choice(body);
  const json logprobs = choice.value("logprobs", json());
  if (!logprobs.is_object() || !logprobs.contains("content") || !logprobs["content"].is_array() ||
      logprobs["content"].empty()) {
    throw Error(ErrorCode::kLogprobsUnsupported, "backend returned no token log-probabilities");
  }
  const json& first = logprobs["content"][0];
  if (!first.is_object() || !first.contains("top_logprobs") || !first["top_logprobs"].is_array() ||
      first["top_logprobs"].empty()) {
    throw Error(ErrorCode::kLogprobsUnsupported, "backend returned no top_logprobs for the first token");
  }
  if (!first.contains("token") || !first["token"].is_string()) protocol_error("first position has no token");
  const std::string generated = first["token"].get<std::string>();

  std::vector<RankedToken> entries;
  for (const auto& item : first["top_logprobs"]) {
    if (!item.is_object() || !item.contains("token") || !item["token"].is_string() || !item.contains("logprob") ||
        !item["logprob"].is_number()) {
      protocol_error("malformed top_logprobs entry");
    }
    const double logprob = item["logprob"].get<double>();
    if (!std::isfinite(logprob) && logprob != -INFINITY) protocol_error("non-finite logprob");
    if (logprob > 1e-9) protocol_error("positive logprob");
    std::string token = item["token"].get<std::string>();
    auto dup = std::find_if(entries.begin(), entries.end(), [&](const RankedToken& e) { return e.token == token; });
    if (dup != entries.end()) continue;
    entries.push_back({std::move(token), std::min(1.0, std::exp(logprob))});
  }
  std::stable_sort(entries.begin(), entries.end(),
                   [](const RankedToken& a, const RankedToken& b) { return a.prob > b.prob; });
  // On a probability tie the server's greedy pick goes first.
  auto picked = std::find_if(entries.begin(), entries.end(), [&](const RankedToken& e) { return e.token == generated; });
  if (picked == entries.end() || picked->prob != entries.front().prob) {
    protocol_error("greedy token '" + generated + "' is not the most probable first token");
  }
  std::rotate(entries.begin(), picked, picked + 1);
  if (entries.size() > k) entries.resize(k);
  if (entries.size() < 2) protocol_error("fewer than 2 first-token candidates returned");

  FirstTokenDistribution dist;
  dist.entries = std::move(entries);
  dist.truncated_at = dist.entries.size();
  dist.top_answer = message_content(choice);
  if (!starts_with(strip_leading_space(dist.top_answer), strip_leading_space(generated))) {
    protocol_error("answer does not begin with its first token");
  }
  dist.validate();
  return dist;
}

std::string RemoteBackend::parse_decode_response(const json& body, std::string_view first_token) {
  const std::string continuation = message_content(first_choice(body));
  return std::string(first_token) + continuation;
}

json RemoteBackend::post_with_retries(const json& body) {
  slots_->sem.acquire();
  struct Release {
    Slots* s;
    ~Release() { s->sem.release(); }
  } release{slots_.get()};

  const std::string payload = body.dump();
  httplib::Headers headers;
  if (!config_.auth_token.empty()) headers.emplace("Authorization", "Bearer " + config_.auth_token);

  const auto secs = std::chrono::duration_cast<std::chrono::seconds>(config_.timeout);
  const auto usecs = std::chrono::duration_cast<std::chrono::microseconds>(config_.timeout - secs);
  std::string last_failure;
  for (int attempt = 0; attempt <= config_.max_retries; ++attempt) {
    if (attempt > 0) std::this_thread::sleep_for(config_.initial_backoff * (1 << (attempt - 1)));
    httplib::Client client(config_.base_url);
    client.set_connection_timeout(secs.count(), usecs.count());
    client.set_read_timeout(secs.count(), usecs.count());
    client.set_write_timeout(secs.count(), usecs.count());
    auto res = client.Post(kCompletionsPath, headers, payload, "application/json");
    if (!res) {
      last_failure = "transport error: " + httplib::to_string(res.error());
      continue;
    }
    if (res->status >= 500) {
      last_failure = "HTTP " + std::to_string(res->status);
      continue;
    }
    if (res->status >= 400) {
      protocol_error("HTTP " + std::to_string(res->status) + ": " + res->body.substr(0, 512));
    }
    if (res->status != 200) protocol_error("unexpected HTTP " + std::to_string(res->status));
    try {
      return json::parse(res->body);
    } catch (const json::parse_error&) {
      protocol_error("response body is not JSON");
    }
  }
  throw Error(ErrorCode::kBackendUnreachable,
              "backend " + config_.base_url + " unreachable after " + std::to_string(config_.max_retries + 1) +
                  " attempt(s): " + last_failure);
}

FirstTokenDistribution RemoteBackend::rank_first_tokens(const GenerationRequest& req, std::size_t k) {
  if (k < 2) throw Error(ErrorCode::kInvalidArgument, "k must be at least 2");
  req.validate();
  return parse_rank_response(post_with_retries(build_rank_body(req, config_.model, k)), k);
}

std::string RemoteBackend::decode_with_first_token(const GenerationRequest& req, std::string_view first_token) {
  req.validate();
  return parse_decode_response(post_with_retries(build_decode_body(req, config_.model, first_token)), first_token);
}

bool RemoteBackend::reachable() {
  httplib::Client client(config_.base_url);
  client.set_connection_timeout(2, 0);
  client.set_read_timeout(5, 0);
  httplib::Headers headers;
  if (!config_.auth_token.empty()) headers.emplace("Authorization", "Bearer " + config_.auth_token);
  for (const char* path : {"/health", "/v1/models"}) {
    auto res = client.Get(path, headers);
    if (res && res->status == 200) return true;
    if (!res) return false;
  }
  return false;
}

std::string base64_encode(const ImageBytes& bytes) {
  std::string out(4 * ((bytes.size() + 2) / 3), '\0');
  const int n = EVP_EncodeBlock(reinterpret_cast<unsigned char*>(out.data()), bytes.data(),
                                static_cast<int>(bytes.size()));
  out.resize(static_cast<std::size_t>(n));
  return out;
}

std::string sniff_image_mime(const ImageBytes& bytes) {
  static constexpr std::uint8_t kPng[] = {0x89, 'P', 'N', 'G', 0x0d, 0x0a, 0x1a, 0x0a};
  if (bytes.size() >= sizeof(kPng) && std::equal(std::begin(kPng), std::end(kPng), bytes.begin())) {
    return "image/png";
  }
  if (bytes.size() >= 3 && bytes[0] == 0xff && bytes[1] == 0xd8 && bytes[2] == 0xff) return "image/jpeg";
  return "application/octet-stream";
}

}  // namespace cardroute
