#pragma once

#include "cardroute/answer_selector.hpp"
#include "cardroute/vlm_backend.hpp"

#include <json.hpp>

#include <optional>
#include <string>
#include <vector>

namespace cardroute {

// Calibrated per-stage cutoffs.
inline constexpr double kDefaultTau1 = 0.10;
inline constexpr double kDefaultTau2 = 0.30;
inline constexpr double kDefaultTau3 = 0.025;

struct Thresholds {
  double tau1 = kDefaultTau1;
  double tau2 = kDefaultTau2;
  double tau3 = kDefaultTau3;

  // Throws Error(kInvalidThresholds) unless every cutoff is finite and in [0,1].
  void validate() const;
  double for_stage(int stage) const;

  nlohmann::json to_json() const;
  static Thresholds from_json(const nlohmann::json& j);

  bool operator==(const Thresholds&) const = default;
};

// Stage-specific termination tokens: None/Other at stage 1, Normal at
// stage 2, None at stage 3. global() uses {None, Normal, Other} everywhere.
struct AbstainSets {
  AbstainSet stage1{AbstainToken::kNone, AbstainToken::kOther};
  AbstainSet stage2{AbstainToken::kNormal};
  AbstainSet stage3{AbstainToken::kNone};

  static AbstainSets global();
  const AbstainSet& for_stage(int stage) const;

  bool operator==(const AbstainSets&) const = default;
};

struct StageCandidate {
  std::string first_token;
  std::string raw_answer;  // as decoded by the backend
  CandidateAnswer answer;  // normalized text that was arbitrated

  bool operator==(const StageCandidate&) const = default;
};

struct StageOutcome {
  int stage = 1;
  bool skipped = false;  // stage 3 without candidate cards: no backend call
  std::string prompt_digest;
  bool image_attached = false;
  double cutoff = 0.0;
  AbstainSet abstain_set;
  std::vector<RankedToken> ranked;    // the top-k first-token distribution
  std::vector<StageCandidate> top2;  // empty when skipped
  SelectorDecision decision;

  bool operator==(const StageOutcome&) const = default;
};

struct RoutingOutcome {
  enum class Kind { kSelected, kAbstained };

  Kind kind = Kind::kAbstained;
  std::string card_id;    // kSelected only
  int abstain_stage = 0;  // kAbstained only
  AbstainToken abstain_token = AbstainToken::kNone;

  static RoutingOutcome selected(std::string card_id);
  static RoutingOutcome abstained(int stage, AbstainToken token);

  bool is_selected() const noexcept { return kind == Kind::kSelected; }
  // "Selected MODEL_01" or "Abstained at Stage 3 (None)".
  std::string describe() const;

  nlohmann::json to_json() const;
  static RoutingOutcome from_json(const nlohmann::json& j);

  bool operator==(const RoutingOutcome&) const = default;
};

inline constexpr int kDecisionRecordSchema = 1;

// One per routing request; the unit of the audit store.
struct DecisionRecord {
  int schema = kDecisionRecordSchema;
  std::string request_id;
  std::string timestamp;  // RFC 3339, UTC
  std::string case_id;
  std::string repo_digest;
  std::string template_version;
  std::string backend;
  Thresholds thresholds;
  AbstainSets abstain_sets;
  std::string image_digest;  // "" when no image was supplied
  std::vector<StageOutcome> stages;
  std::optional<RoutingOutcome> outcome;  // absent when routing failed
  std::string justification;              // stage-3 rationale when selected
  std::vector<std::string> warnings;
  std::string error;  // "<ErrorCode>: message" when routing failed

  nlohmann::json to_json() const;
  // Throws Error(kMalformedRecord) on schema violations.
  static DecisionRecord from_json(const nlohmann::json& j);

  // Equality ignoring request_id and timestamp.
  bool equivalent(const DecisionRecord& other) const;

  bool operator==(const DecisionRecord&) const = default;
};

std::string new_request_id();
std::string utc_timestamp_now();

}  // namespace cardroute
