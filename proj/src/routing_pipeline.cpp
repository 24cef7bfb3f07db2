#include "cardroute/routing_pipeline.hpp"

#include "cardroute/digest.hpp"
#include "cardroute/text.hpp"

#include <functional>
#include <regex>
#include <unordered_set>

namespace cardroute {

namespace {

// Leading separators between a model code and its justification.
std::string_view strip_separators(std::string_view s) {
  static constexpr std::string_view kDashes[] = {"\xE2\x80\x94", "\xE2\x80\x93"};  // em, en dash
  bool changed = true;
  while (changed && !s.empty()) {
    changed = false;
    const char c = s.front();
    if (c == ' ' || c == '\t' || c == '\n' || c == '-' || c == ':' || c == ';' || c == ',' || c == '.' ||
        c == ')' || c == ']') {
      s.remove_prefix(1);
      changed = true;
      continue;
    }
    for (auto dash : kDashes) {
      if (starts_with(s, dash)) {
        s.remove_prefix(dash.size());
        changed = true;
      }
    }
  }
  return s;
}

}  // namespace

std::optional<ModelCodeMatch> parse_model_code(std::string_view answer,
                                               std::span<const CardCandidate> candidates) {
  if (candidates.empty()) throw Error(ErrorCode::kInvalidArgument, "parse_model_code needs candidates");
  static const std::regex kCode("MODEL_[0-9]{2,}");
  std::match_results<std::string_view::const_iterator> m;
  if (!std::regex_search(answer.begin(), answer.end(), m, kCode)) return std::nullopt;
  std::string id = m.str();
  bool known = false;
  for (const auto& c : candidates) known = known || c.id == id;
  if (!known) return std::nullopt;
  const auto rest = answer.substr(static_cast<std::size_t>(m.position(0) + m.length(0)));
  return ModelCodeMatch{std::move(id), trim(strip_separators(rest))};
}

RoutingPipeline::RoutingPipeline(const CardRepository& repo, VlmBackend& backend, const PromptBuilder& prompts,
                                 PipelineOptions options)
    : repo_(repo), backend_(backend), prompts_(prompts), options_(std::move(options)) {
  if (options_.top_k < 2) throw Error(ErrorCode::kInvalidArgument, "top_k must be at least 2");
  if (options_.max_answer_tokens <= 0) throw Error(ErrorCode::kInvalidArgument, "max_answer_tokens must be positive");
  for (int stage = 1; stage <= 3; ++stage) {
    if (options_.abstain_sets.for_stage(stage).empty()) {
      throw Error(ErrorCode::kInvalidArgument, "abstain set for stage " + std::to_string(stage) + " is empty");
    }
  }
}

namespace {

using Postprocess = std::function<std::string(const std::string&)>;

// One routing request in flight. Keeps the partial record so failures can
// report how far the route got.
class RouteRun {
 public:
  RouteRun(const CardRepository& repo, VlmBackend& backend, const PromptBuilder& prompts,
           const PipelineOptions& options, const RouteRequest& request)
      : repo_(repo), backend_(backend), prompts_(prompts), options_(options), request_(request) {
    record_.request_id = new_request_id();
    record_.timestamp = utc_timestamp_now();
    record_.case_id = request.case_id;
    record_.repo_digest = repo.source_digest();
    record_.template_version = prompts.template_version();
    record_.backend = backend.identifier();
    record_.thresholds = request.thresholds;
    record_.abstain_sets = options.abstain_sets;
    if (request.image) record_.image_digest = sha256_hex(*request.image);
  }

  RouteResult run() {
    try {
      RoutingOutcome outcome = run_stages();
      record_.outcome = outcome;
      return {outcome, record_};
    } catch (const Error& e) {
      record_.error = std::string(error_code_name(e.code())) + ": " + e.what();
      throw RouteFailure(e.code(), e.what(), record_);
    } catch (const std::exception& e) {
      record_.error = std::string("Internal: ") + e.what();
      throw RouteFailure(ErrorCode::kInternal, e.what(), record_);
    }
  }

 private:
  RoutingOutcome run_stages() {
    // Stage 1: modality.
    std::vector<std::string> modalities = repo_.unique_modalities();
    {
      std::unordered_set<std::string> seen;
      for (const auto& m : modalities) seen.insert(fold_key(m));
      for (const auto& extra : options_.extra_modalities) {
        if (!trim(extra).empty() && !is_reserved_token(extra) && seen.insert(fold_key(extra)).second) {
          modalities.push_back(trim(extra));
        }
      }
    }
    const StageOutcome& s1 = run_stage(prompts_.build_stage1(modalities), "", [&](const std::string& text) {
      return coerce_modality(text, modalities);
    });
    if (s1.decision.verdict == Verdict::kTerminate) return abstain_from(s1);
    const std::string modality = s1.decision.chosen.text;

    // Stage 2: primary abnormality.
    const StageOutcome& s2 = run_stage(prompts_.build_stage2(modality), modality, canonical_abstain);
    if (s2.decision.verdict == Verdict::kTerminate) return abstain_from(s2);
    const std::string abnormality = s2.decision.chosen.text;
    if (iequals_trimmed(abnormality, "Normal")) {
      record_.warnings.push_back("stage 2 chose Normal outside its abstain set; terminating");
      return RoutingOutcome::abstained(2, AbstainToken::kNormal);
    }

    // Stage 3: card selection, text only.
    const std::vector<CardCandidate> candidates = repo_.candidates_for_modality(modality);
    if (candidates.empty()) {
      record_.warnings.push_back("no model cards for modality '" + modality + "'; stage 3 skipped");
      StageOutcome skipped;
      skipped.stage = 3;
      skipped.skipped = true;
      skipped.cutoff = request_.thresholds.tau3;
      skipped.abstain_set = options_.abstain_sets.stage3;
      skipped.decision = {{"None", 0.0}, Verdict::kTerminate, SelectionReason::kAbstainChosen};
      record_.stages.push_back(std::move(skipped));
      return RoutingOutcome::abstained(3, AbstainToken::kNone);
    }
    const StageOutcome& s3 =
        run_stage(prompts_.build_stage3(modality, abnormality, candidates), abnormality, canonical_abstain);
    if (s3.decision.verdict == Verdict::kTerminate) return abstain_from(s3);
    auto match = parse_model_code(s3.decision.chosen.text, candidates);
    if (!match) {
      record_.warnings.push_back("stage 3 answer '" + s3.decision.chosen.text +
                                 "' names no candidate card; treated as None");
      return RoutingOutcome::abstained(3, AbstainToken::kNone);
    }
    record_.justification = match->justification;
    return RoutingOutcome::selected(match->id);
  }

  const StageOutcome& run_stage(const StagePrompt& prompt, const std::string& prior, const Postprocess& post) {
    GenerationRequest req;
    req.case_id = request_.case_id;
    req.stage = prompt.stage;
    req.prior_answer = prior;
    req.system_prompt = prompt.system_prompt;
    req.user_prompt = prompt.user_prompt;
    req.prompt_digest = prompt.digest();
    if (prompt.includes_image && request_.image) {
      req.image = request_.image;
      req.image_digest = record_.image_digest;
    }
    req.max_answer_tokens = options_.max_answer_tokens;
    req.validate();

    StageOutcome outcome;
    outcome.stage = prompt.stage;
    outcome.prompt_digest = req.prompt_digest;
    outcome.image_attached = req.has_image();
    outcome.cutoff = request_.thresholds.for_stage(prompt.stage);
    outcome.abstain_set = options_.abstain_sets.for_stage(prompt.stage);

    FirstTokenDistribution dist = backend_.rank_first_tokens(req, options_.top_k);
    dist.validate();
    outcome.ranked = dist.entries;
    const RankedToken& first = dist.entries[0];
    const RankedToken& second = dist.entries[1];
    const std::string runner_raw = backend_.decode_with_first_token(req, second.token);

    std::vector<CandidateAnswer> ranked;
    for (const auto& [token, raw, prob] :
         {std::tuple{first.token, dist.top_answer, first.prob}, std::tuple{second.token, runner_raw, second.prob}}) {
      std::string text = normalize_answer(raw);
      if (text.empty()) {
        throw Error(ErrorCode::kProtocolError, "stage " + std::to_string(prompt.stage) +
                                                   " answer for first token '" + token + "' is empty");
      }
      text = post(text);
      outcome.top2.push_back({token, raw, {text, prob}});
      ranked.push_back({std::move(text), prob});
    }
    auto [top, runner_up] = top2(ranked);
    outcome.decision = arbitrate(top, runner_up, {outcome.cutoff, outcome.abstain_set});
    record_.stages.push_back(std::move(outcome));
    return record_.stages.back();
  }

  // Answers outside the admissible list become "Other"; matching labels take
  // the repository's spelling.
  std::string coerce_modality(const std::string& text, const std::vector<std::string>& modalities) {
    AbstainToken token;
    if (parse_abstain_token(text, token)) {
      if (token != AbstainToken::kNormal) return abstain_token_text(token);
    } else {
      for (const auto& m : modalities) {
        if (iequals_trimmed(m, text)) return m;
      }
    }
    record_.warnings.push_back("stage 1 answer '" + text + "' is not an admissible modality; coerced to Other");
    return abstain_token_text(AbstainToken::kOther);
  }

  static std::string canonical_abstain(const std::string& text) {
    AbstainToken token;
    return parse_abstain_token(text, token) ? abstain_token_text(token) : text;
  }

  static RoutingOutcome abstain_from(const StageOutcome& s) {
    AbstainToken token = AbstainToken::kNone;
    parse_abstain_token(s.decision.chosen.text, token);
    return RoutingOutcome::abstained(s.stage, token);
  }

  const CardRepository& repo_;
  VlmBackend& backend_;
  const PromptBuilder& prompts_;
  const PipelineOptions& options_;
  const RouteRequest& request_;
  DecisionRecord record_;
};

}  // namespace

RouteResult RoutingPipeline::route(const RouteRequest& request) const {
  request.thresholds.validate();
  if (repo_.empty()) throw Error(ErrorCode::kInvalidArgument, "card repository is empty");
  return RouteRun(repo_, backend_, prompts_, options_, request).run();
}

RouteResult route(const RouteRequest& request, const CardRepository& repo, VlmBackend& backend,
                  const PipelineOptions& options) {
  static const PromptBuilder kBuiltin;
  return RoutingPipeline(repo, backend, kBuiltin, options).route(request);
}

}  // namespace cardroute
