#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <mutex>
#include <string>
#include <string_view>
#include <tuple>
#include <vector>

namespace cardroute {

using ImageBytes = std::vector<std::uint8_t>;

inline constexpr int kDefaultMaxAnswerTokens = 24;
inline constexpr std::size_t kDefaultTopK = 5;

struct GenerationRequest {
  // Addressing metadata. The scripted backend keys on these; the remote
  // backend ignores them.
  std::string case_id;
  int stage = 1;
  std::string prior_answer;  // chosen answer of the previous stage, "" at stage 1

  std::string system_prompt;
  std::string user_prompt;
  std::string prompt_digest;  // StagePrompt::digest() of the prompt above
  std::shared_ptr<const ImageBytes> image;  // null when no image is attached
  std::string image_digest;                 // sha256 of *image, "" when null
  int max_answer_tokens = kDefaultMaxAnswerTokens;

  bool has_image() const noexcept { return image != nullptr; }

  // Throws Error(kInvalidArgument): empty user prompt, non-positive token
  // budget, or an image on a stage-3 request.
  void validate() const;
};

struct RankedToken {
  std::string token;
  double prob = 0.0;

  bool operator==(const RankedToken&) const = default;
};

struct FirstTokenDistribution {
  std::vector<RankedToken> entries;  // descending by prob
  std::size_t truncated_at = 0;      // number of entries retained
  // Greedy decode of the whole answer. Its first token is entries[0].token, so
  // the caller only needs decode_with_first_token for the runner-up.
  std::string top_answer;

  // Throws Error(kProtocolError) when ordering, ranges, mass or size are off.
  void validate() const;
};

// Two-phase contract: rank the first generated token, then decode a full
// answer with the first token fixed. Implementations must tolerate
// concurrent calls.
class VlmBackend {
 public:
  virtual ~VlmBackend() = default;

  virtual FirstTokenDistribution rank_first_tokens(const GenerationRequest& req, std::size_t k) = 0;
  virtual std::string decode_with_first_token(const GenerationRequest& req,
                                              std::string_view first_token) = 0;
  virtual std::string identifier() const = 0;
  virtual bool reachable() { return true; }
};

// --- scripted backend -----------------------------------------------------

struct ScriptEntry {
  std::string token;
  double prob = 0.0;
  std::string answer;  // must begin with token
};

struct ScriptResponse {
  std::string case_id;
  int stage = 1;
  std::string after;  // optional: only answers when prior_answer matches (case-insensitive)
  std::vector<ScriptEntry> entries;
};

// Deterministic backend answering from a JSONL fixture of
// {case_id, stage, [after], entries: [{token, prob, answer}]}.
// Lookup tries (case_id, stage, prior_answer) first and then (case_id, stage)
// without an `after` condition; anything else is Error(kFixtureMissing).
class ScriptedBackend final : public VlmBackend {
 public:
  static std::unique_ptr<ScriptedBackend> parse(std::string_view jsonl);
  static std::unique_ptr<ScriptedBackend> load(const std::filesystem::path& path);

  FirstTokenDistribution rank_first_tokens(const GenerationRequest& req, std::size_t k) override;
  std::string decode_with_first_token(const GenerationRequest& req, std::string_view first_token) override;
  std::string identifier() const override;

  std::size_t response_count() const noexcept { return responses_.size(); }
  bool has_case(std::string_view case_id) const;
  const std::string& script_digest() const noexcept { return digest_; }

 private:
  ScriptedBackend() = default;
  const ScriptResponse& lookup(const GenerationRequest& req) const;

  // key: (case_id, stage, folded `after`)
  std::map<std::tuple<std::string, int, std::string>, ScriptResponse> responses_;
  std::string digest_;
};

// --- decorators -----------------------------------------------------------

struct BackendCall {
  enum class Kind { kRank, kDecode } kind = Kind::kRank;
  std::string case_id;
  int stage = 0;
  bool had_image = false;
  std::string prompt_digest;
  std::string first_token;  // decode calls only
};

// Records every call before forwarding it. Thread-safe.
class RecordingBackend final : public VlmBackend {
 public:
  explicit RecordingBackend(VlmBackend& inner) : inner_(inner) {}

  FirstTokenDistribution rank_first_tokens(const GenerationRequest& req, std::size_t k) override;
  std::string decode_with_first_token(const GenerationRequest& req, std::string_view first_token) override;
  std::string identifier() const override { return inner_.identifier(); }
  bool reachable() override { return inner_.reachable(); }

  std::vector<BackendCall> calls() const;
  std::size_t call_count() const;
  void clear();

 private:
  void record(BackendCall call);

  VlmBackend& inner_;
  mutable std::mutex mu_;
  std::vector<BackendCall> calls_;
};

// Caches responses per distinct request. Threshold sweeps only change the
// post-hoc arbitration, so identical requests recur across grid points.
class MemoizingBackend final : public VlmBackend {
 public:
  explicit MemoizingBackend(VlmBackend& inner) : inner_(inner) {}

  FirstTokenDistribution rank_first_tokens(const GenerationRequest& req, std::size_t k) override;
  std::string decode_with_first_token(const GenerationRequest& req, std::string_view first_token) override;
  std::string identifier() const override { return inner_.identifier(); }
  bool reachable() override { return inner_.reachable(); }

  std::size_t hits() const;
  std::size_t misses() const;

  // (case, stage, prompt digest, image digest, k) plus the op and first token.
  static std::string request_key(const GenerationRequest& req);

 private:
  VlmBackend& inner_;
  mutable std::mutex mu_;
  std::map<std::string, FirstTokenDistribution> ranks_;
  std::map<std::string, std::string> decodes_;
  std::size_t hits_ = 0;
  std::size_t misses_ = 0;
};

}  // namespace cardroute
