#pragma once

#include <set>
#include <span>
#include <string>
#include <string_view>
#include <utility>

namespace cardroute {

enum class AbstainToken { kNone, kNormal, kOther };

const char* abstain_token_text(AbstainToken token) noexcept;
// Case-insensitive, whitespace-trimmed. Returns false for anything else.
bool parse_abstain_token(std::string_view text, AbstainToken& out);

using AbstainSet = std::set<AbstainToken>;

struct CandidateAnswer {
  std::string text;  // normalized decoded answer
  double first_token_prob = 0.0;

  bool operator==(const CandidateAnswer&) const = default;
};

struct SelectorConfig {
  double cutoff = 0.0;
  AbstainSet abstain_set;

  // Throws Error(kInvalidArgument) unless cutoff is in [0,1] and the set is non-empty.
  void validate() const;
};

enum class Verdict { kProceed, kTerminate };
enum class SelectionReason { kTopKept, kRunnerUpPromoted, kAbstainChosen };

const char* verdict_name(Verdict v) noexcept;
const char* reason_name(SelectionReason r) noexcept;
bool parse_verdict(std::string_view s, Verdict& out);
bool parse_reason(std::string_view s, SelectionReason& out);

struct SelectorDecision {
  CandidateAnswer chosen;
  Verdict verdict = Verdict::kProceed;
  SelectionReason reason = SelectionReason::kTopKept;

  bool operator==(const SelectorDecision&) const = default;
};

// First two entries of a list already sorted by descending probability.
// Throws Error(kInsufficientCandidates) for fewer than two.
std::pair<CandidateAnswer, CandidateAnswer> top2(std::span<const CandidateAnswer> ranked);

bool in_abstain_set(std::string_view text, const AbstainSet& set);

// Keeps the top answer unless the runner-up reaches the cutoff (p2 >= cutoff)
// with a different canonical text, then terminates iff the chosen text is an
// abstention token. The top probability is never compared to the cutoff.
//
// Reason precedence: an abstaining choice reports kAbstainChosen when the top
// answer was kept; a promoted runner-up always reports kRunnerUpPromoted.
SelectorDecision arbitrate(const CandidateAnswer& top, const CandidateAnswer& runner_up,
                           const SelectorConfig& config);

}  // namespace cardroute
