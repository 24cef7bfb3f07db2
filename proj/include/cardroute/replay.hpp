#pragma once

#include "cardroute/card_repository.hpp"
#include "cardroute/decision_record.hpp"
#include "cardroute/prompt_builder.hpp"
#include "cardroute/vlm_backend.hpp"

#include <json.hpp>

#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace cardroute {

struct ReplayReport {
  std::string record_id;
  std::optional<RoutingOutcome> recorded;  // absent if the original route failed
  RoutingOutcome replayed;
  bool drift = false;
  std::vector<std::string> drift_reasons;
  DecisionRecord replay_record;

  nlohmann::json to_json() const;
};

// Re-runs a recorded route against the scripted backend with the record's
// thresholds and abstain sets, and reports any difference in outcome, stage
// decisions, template version or backend identity.
//
// Errors: kRecordNotFound, kRepoDigestMismatch (repo differs from the one the
// record was made with), kFixtureMissing (script has no entry for the case).
ReplayReport replay(const DecisionRecord& record, const CardRepository& repo, ScriptedBackend& backend,
                    const PromptBuilder& prompts);
ReplayReport replay(std::span<const DecisionRecord> store, std::string_view record_id, const CardRepository& repo,
                    ScriptedBackend& backend, const PromptBuilder& prompts);

}  // namespace cardroute
