#include "cardroute/digest.hpp"
#include "cardroute/error.hpp"
#include "cardroute/io.hpp"
#include "cardroute/text.hpp"
#include "cardroute/vlm_backend.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <set>

namespace cardroute {

using nlohmann::json;

void GenerationRequest::validate() const {
  if (trim(user_prompt).empty()) throw Error(ErrorCode::kInvalidArgument, "user prompt is empty");
  if (max_answer_tokens <= 0) throw Error(ErrorCode::kInvalidArgument, "max_answer_tokens must be positive");
  if (stage < 1 || stage > 3) throw Error(ErrorCode::kInvalidArgument, "stage must be 1, 2 or 3");
  if (stage == 3 && has_image()) {
    throw Error(ErrorCode::kInvalidArgument, "stage-3 requests must not carry an image");
  }
}

void FirstTokenDistribution::validate() const {
  if (entries.size() < 2 || truncated_at != entries.size()) {
    throw Error(ErrorCode::kProtocolError, "first-token distribution must retain at least 2 entries");
  }
  double mass = 0.0;
  for (std::size_t i = 0; i < entries.size(); ++i) {
    const double p = entries[i].prob;
    if (!std::isfinite(p) || p < 0.0 || p > 1.0) {
      throw Error(ErrorCode::kProtocolError, "token probability out of [0,1]");
    }
    if (i > 0 && p > entries[i - 1].prob) {
      throw Error(ErrorCode::kProtocolError, "first-token distribution is not descending");
    }
    mass += p;
  }
  if (mass > 1.0 + 1e-6) throw Error(ErrorCode::kProtocolError, "first-token probabilities sum above 1");
}

// --- ScriptedBackend --------------------------------------------------------

namespace {

[[noreturn]] void script_error(std::size_t line, const std::string& reason) {
  throw LineError(ErrorCode::kMalformedScript, line, reason);
}

ScriptResponse parse_script_line(std::string_view text, std::size_t line) {
  json obj;
  try {
    obj = json::parse(text);
  } catch (const json::parse_error& e) {
    script_error(line, std::string("invalid JSON: ") + e.what());
  }
  if (!obj.is_object()) script_error(line, "record is not a JSON object");
  for (const auto& [key, _] : obj.items()) {
    if (key != "case_id" && key != "stage" && key != "entries" && key != "after") {
      script_error(line, "unknown key '" + key + "'");
    }
  }
  ScriptResponse r;
  if (!obj.contains("case_id") || !obj["case_id"].is_string() || trim(obj["case_id"].get<std::string>()).empty()) {
    script_error(line, "case_id must be a non-empty string");
  }
  r.case_id = obj["case_id"].get<std::string>();
  if (!obj.contains("stage") || !obj["stage"].is_number_integer()) script_error(line, "stage must be an integer");
  r.stage = obj["stage"].get<int>();
  if (r.stage < 1 || r.stage > 3) script_error(line, "stage must be 1, 2 or 3");
  if (obj.contains("after")) {
    if (!obj["after"].is_string()) script_error(line, "after must be a string");
    r.after = obj["after"].get<std::string>();
  }
  if (!obj.contains("entries") || !obj["entries"].is_array()) script_error(line, "entries must be an array");
  std::set<std::string> tokens;
  double mass = 0.0;
  for (const auto& e : obj["entries"]) {
    if (!e.is_object()) script_error(line, "entry is not an object");
    for (const auto& [key, _] : e.items()) {
      if (key != "token" && key != "prob" && key != "answer") script_error(line, "unknown entry key '" + key + "'");
    }
    if (!e.contains("token") || !e["token"].is_string() || e["token"].get<std::string>().empty()) {
      script_error(line, "entry token must be a non-empty string");
    }
    if (!e.contains("prob") || !e["prob"].is_number()) script_error(line, "entry prob must be a number");
    if (!e.contains("answer") || !e["answer"].is_string()) script_error(line, "entry answer must be a string");
    ScriptEntry entry{e["token"].get<std::string>(), e["prob"].get<double>(), e["answer"].get<std::string>()};
    if (!(entry.prob >= 0.0 && entry.prob <= 1.0)) script_error(line, "prob for '" + entry.token + "' is outside [0,1]");
    if (!starts_with(entry.answer, entry.token)) {
      script_error(line, "answer '" + entry.answer + "' does not begin with token '" + entry.token + "'");
    }
    if (!tokens.insert(entry.token).second) script_error(line, "duplicate token '" + entry.token + "'");
    mass += entry.prob;
    r.entries.push_back(std::move(entry));
  }
  if (r.entries.size() < 2) script_error(line, "at least 2 entries are required");
  if (mass > 1.0 + 1e-6) script_error(line, "entry probabilities sum above 1");
  return r;
}

}  // namespace

std::unique_ptr<ScriptedBackend> ScriptedBackend::parse(std::string_view jsonl) {
  std::unique_ptr<ScriptedBackend> backend(new ScriptedBackend());
  std::size_t line_no = 0;
  for (std::string_view line : split_lines(jsonl)) {
    ++line_no;
    if (trim(line).empty()) continue;
    ScriptResponse r = parse_script_line(line, line_no);
    auto key = std::make_tuple(r.case_id, r.stage, fold_key(r.after));
    if (backend->responses_.count(key) > 0) {
      script_error(line_no, "duplicate response for case '" + r.case_id + "' stage " + std::to_string(r.stage) +
                                (r.after.empty() ? "" : " after '" + r.after + "'"));
    }
    backend->responses_.emplace(std::move(key), std::move(r));
  }
  backend->digest_ = sha256_hex(jsonl);
  return backend;
}

std::unique_ptr<ScriptedBackend> ScriptedBackend::load(const std::filesystem::path& path) {
  return parse(read_file(path));
}

bool ScriptedBackend::has_case(std::string_view case_id) const {
  return std::any_of(responses_.begin(), responses_.end(),
                     [&](const auto& kv) { return std::get<0>(kv.first) == case_id; });
}

const ScriptResponse& ScriptedBackend::lookup(const GenerationRequest& req) const {
  if (!req.prior_answer.empty()) {
    auto it = responses_.find({req.case_id, req.stage, fold_key(req.prior_answer)});
    if (it != responses_.end()) return it->second;
  }
  auto it = responses_.find({req.case_id, req.stage, std::string()});
  if (it == responses_.end()) {
    throw Error(ErrorCode::kFixtureMissing,
                "no scripted response for case '" + req.case_id + "' stage " + std::to_string(req.stage));
  }
  return it->second;
}

FirstTokenDistribution ScriptedBackend::rank_first_tokens(const GenerationRequest& req, std::size_t k) {
  if (k < 2) throw Error(ErrorCode::kInvalidArgument, "k must be at least 2");
  req.validate();
  const ScriptResponse& r = lookup(req);
  std::vector<const ScriptEntry*> sorted;
  for (const auto& e : r.entries) sorted.push_back(&e);
  std::stable_sort(sorted.begin(), sorted.end(),
                   [](const ScriptEntry* a, const ScriptEntry* b) { return a->prob > b->prob; });
  FirstTokenDistribution dist;
  for (std::size_t i = 0; i < sorted.size() && i < k; ++i) {
    dist.entries.push_back({sorted[i]->token, sorted[i]->prob});
  }
  dist.truncated_at = dist.entries.size();
  dist.top_answer = sorted.front()->answer;
  return dist;
}

std::string ScriptedBackend::decode_with_first_token(const GenerationRequest& req, std::string_view first_token) {
  req.validate();
  const ScriptResponse& r = lookup(req);
  for (const auto& e : r.entries) {
    if (e.token == first_token) return e.answer;
  }
  throw Error(ErrorCode::kUnknownFirstToken, "token '" + std::string(first_token) + "' is not in the fixture for case '" +
                                                 req.case_id + "' stage " + std::to_string(req.stage));
}

std::string ScriptedBackend::identifier() const { return "scripted:" + digest_.substr(0, 12); }

// --- RecordingBackend -------------------------------------------------------

void RecordingBackend::record(BackendCall call) {
  std::lock_guard lock(mu_);
  calls_.push_back(std::move(call));
}

FirstTokenDistribution RecordingBackend::rank_first_tokens(const GenerationRequest& req, std::size_t k) {
  record({BackendCall::Kind::kRank, req.case_id, req.stage, req.has_image(), req.prompt_digest, {}});
  return inner_.rank_first_tokens(req, k);
}

std::string RecordingBackend::decode_with_first_token(const GenerationRequest& req, std::string_view first_token) {
  record({BackendCall::Kind::kDecode, req.case_id, req.stage, req.has_image(), req.prompt_digest,
          std::string(first_token)});
  return inner_.decode_with_first_token(req, first_token);
}

std::vector<BackendCall> RecordingBackend::calls() const {
  std::lock_guard lock(mu_);
  return calls_;
}

std::size_t RecordingBackend::call_count() const {
  std::lock_guard lock(mu_);
  return calls_.size();
}

void RecordingBackend::clear() {
  std::lock_guard lock(mu_);
  calls_.clear();
}

// --- MemoizingBackend -------------------------------------------------------

std::string MemoizingBackend::request_key(const GenerationRequest& req) {
  return Sha256()
      .field(req.case_id)
      .field(std::to_string(req.stage))
      .field(req.prior_answer)
      .field(req.prompt_digest)
      .field(req.system_prompt)
      .field(req.user_prompt)
      .field(req.image_digest)
      .field(std::to_string(req.max_answer_tokens))
      .hex();
}

FirstTokenDistribution MemoizingBackend::rank_first_tokens(const GenerationRequest& req, std::size_t k) {
  const std::string key = request_key(req) + "|rank|" + std::to_string(k);
  {
    std::lock_guard lock(mu_);
    auto it = ranks_.find(key);
    if (it != ranks_.end()) {
      ++hits_;
      return it->second;
    }
    ++misses_;
  }
  // Values are deterministic per key; a concurrent duplicate miss just overwrites.
  FirstTokenDistribution dist = inner_.rank_first_tokens(req, k);
  std::lock_guard lock(mu_);
  ranks_[key] = dist;
  return dist;
}

std::string MemoizingBackend::decode_with_first_token(const GenerationRequest& req, std::string_view first_token) {
  const std::string key = request_key(req) + "|decode|" + Sha256().field(first_token).hex();
  {
    std::lock_guard lock(mu_);
    auto it = decodes_.find(key);
    if (it != decodes_.end()) {
      ++hits_;
      return it->second;
    }
    ++misses_;
  }
  std::string answer = inner_.decode_with_first_token(req, first_token);
  std::lock_guard lock(mu_);
  decodes_[key] = answer;
  return answer;
}

std::size_t MemoizingBackend::hits() const {
  std::lock_guard lock(mu_);
  return hits_;
}

std::size_t MemoizingBackend::misses() const {
  std::lock_guard lock(mu_);
  return misses_;
}

}  // namespace cardroute
