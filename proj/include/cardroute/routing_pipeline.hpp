#pragma once

#include "cardroute/card_repository.hpp"
#include "cardroute/decision_record.hpp"
#include "cardroute/error.hpp"
#include "cardroute/prompt_builder.hpp"
#include "cardroute/vlm_backend.hpp"

#include <memory>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace cardroute {

struct ModelCodeMatch {
  std::string id;
  std::string justification;
};

// First MODEL_nn substring of the answer, if it names one of the candidates.
// nullopt means no match; route turns that into a stage-3 abstention.
// Throws Error(kInvalidArgument) when candidates is empty.
std::optional<ModelCodeMatch> parse_model_code(std::string_view answer,
                                               std::span<const CardCandidate> candidates);

struct PipelineOptions {
  AbstainSets abstain_sets;
  std::size_t top_k = kDefaultTopK;
  int max_answer_tokens = kDefaultMaxAnswerTokens;
  // Extra stage-1 labels offered to the model even though no card has them.
  // Choosing one ends in a stage-3 abstention without a backend call.
  std::vector<std::string> extra_modalities;
};

struct RouteRequest {
  std::string case_id;
  std::shared_ptr<const ImageBytes> image;
  Thresholds thresholds;
};

struct RouteResult {
  RoutingOutcome outcome;
  DecisionRecord record;
};

// A routing error with the record of the stages that completed before it.
class RouteFailure : public Error {
 public:
  RouteFailure(ErrorCode code, const std::string& message, DecisionRecord partial)
      : Error(code, message), partial_(std::move(partial)) {}

  const DecisionRecord& partial_record() const noexcept { return partial_; }

 private:
  DecisionRecord partial_;
};

// Three sequential stages: modality, primary abnormality, model card. Each
// stage ranks first tokens, decodes the top two answers and arbitrates them
// with that stage's cutoff; an abstention token ends the route early.
//
// Stateless apart from its references; route() may run concurrently.
class RoutingPipeline {
 public:
  RoutingPipeline(const CardRepository& repo, VlmBackend& backend,
                  const PromptBuilder& prompts, PipelineOptions options = {});

  // Throws Error(kInvalidThresholds) before any backend call, and
  // RouteFailure for failures after the record was started.
  RouteResult route(const RouteRequest& request) const;

  const PipelineOptions& options() const noexcept { return options_; }

 private:
  const CardRepository& repo_;
  VlmBackend& backend_;
  const PromptBuilder& prompts_;
  PipelineOptions options_;
};

// Convenience wrapper using the builtin templates.
RouteResult route(const RouteRequest& request, const CardRepository& repo, VlmBackend& backend,
                  const PipelineOptions& options = {});

}  // namespace cardroute
