#include "cardroute/answer_selector.hpp"

#include "cardroute/error.hpp"
#include "cardroute/text.hpp"

#include <cmath>

namespace cardroute {

const char* abstain_token_text(AbstainToken token) noexcept {
  switch (token) {
    case AbstainToken::kNone: return "None";
    case AbstainToken::kNormal: return "Normal";
    case AbstainToken::kOther: return "Other";
  }
  return "None";
}

bool parse_abstain_token(std::string_view text, AbstainToken& out) {
  const std::string key = fold_key(text);
  if (key == "none") {
    out = AbstainToken::kNone;
  } else if (key == "normal") {
    out = AbstainToken::kNormal;
  } else if (key == "other") {
    out = AbstainToken::kOther;
  } else {
    return false;
  }
  return true;
}

void SelectorConfig::validate() const {
  if (!std::isfinite(cutoff) || cutoff < 0.0 || cutoff > 1.0) {
    throw Error(ErrorCode::kInvalidArgument, "cutoff must be in [0,1]");
  }
  if (abstain_set.empty()) {
    throw Error(ErrorCode::kInvalidArgument, "abstain set must not be empty");
  }
}

const char* verdict_name(Verdict v) noexcept {
  return v == Verdict::kTerminate ? "TERMINATE" : "PROCEED";
}

const char* reason_name(SelectionReason r) noexcept {
  switch (r) {
    case SelectionReason::kTopKept: return "TopKept";
    case SelectionReason::kRunnerUpPromoted: return "RunnerUpPromoted";
    case SelectionReason::kAbstainChosen: return "AbstainChosen";
  }
  return "TopKept";
}

bool parse_verdict(std::string_view s, Verdict& out) {
  if (s == "PROCEED") {
    out = Verdict::kProceed;
  } else if (s == "TERMINATE") {
    out = Verdict::kTerminate;
  } else {
    return false;
  }
  return true;
}

bool parse_reason(std::string_view s, SelectionReason& out) {
  if (s == "TopKept") {
    out = SelectionReason::kTopKept;
  } else if (s == "RunnerUpPromoted") {
    out = SelectionReason::kRunnerUpPromoted;
  } else if (s == "AbstainChosen") {
    out = SelectionReason::kAbstainChosen;
  } else {
    return false;
  }
  return true;
}

std::pair<CandidateAnswer, CandidateAnswer> top2(std::span<const CandidateAnswer> ranked) {
  if (ranked.size() < 2) {
    throw Error(ErrorCode::kInsufficientCandidates,
                "need at least 2 candidates, got " + std::to_string(ranked.size()));
  }
  return {ranked[0], ranked[1]};
}

bool in_abstain_set(std::string_view text, const AbstainSet& set) {
  AbstainToken token;
  return parse_abstain_token(text, token) && set.count(token) > 0;
}

SelectorDecision arbitrate(const CandidateAnswer& top, const CandidateAnswer& runner_up,
                           const SelectorConfig& config) {
  SelectorDecision decision{top, Verdict::kProceed, SelectionReason::kTopKept};
  if (runner_up.first_token_prob >= config.cutoff && !iequals_trimmed(runner_up.text, top.text)) {
    decision.chosen = runner_up;
    decision.reason = SelectionReason::kRunnerUpPromoted;
  }
  if (in_abstain_set(decision.chosen.text, config.abstain_set)) {
    decision.verdict = Verdict::kTerminate;
    if (decision.reason == SelectionReason::kTopKept) {
      decision.reason = SelectionReason::kAbstainChosen;
    }
  }
  return decision;
}

}  // namespace cardroute
