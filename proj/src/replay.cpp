#include "cardroute/replay.hpp"

#include "cardroute/error.hpp"
#include "cardroute/routing_pipeline.hpp"

#include <algorithm>

namespace cardroute {

using nlohmann::json;

json ReplayReport::to_json() const {
  return {{"record_id", record_id},
          {"recorded", recorded ? recorded->to_json() : json()},
          {"replayed", replayed.to_json()},
          {"drift", drift},
          {"drift_reasons", drift_reasons},
          {"replay_record", replay_record.to_json()}};
}

namespace {

// image_attached is not compared: replays run without the original image.
bool same_stage(const StageOutcome& a, const StageOutcome& b) {
  return a.stage == b.stage && a.skipped == b.skipped && a.prompt_digest == b.prompt_digest && a.cutoff == b.cutoff &&
         a.abstain_set == b.abstain_set && a.ranked == b.ranked && a.top2 == b.top2 && a.decision == b.decision;
}

}  // namespace

ReplayReport replay(const DecisionRecord& record, const CardRepository& repo, ScriptedBackend& backend,
                    const PromptBuilder& prompts) {
  if (record.repo_digest != repo.source_digest()) {
    throw Error(ErrorCode::kRepoDigestMismatch, "record " + record.request_id + " was made with repository " +
                                                    record.repo_digest + ", loaded repository is " +
                                                    repo.source_digest());
  }
  if (!backend.has_case(record.case_id)) {
    throw Error(ErrorCode::kFixtureMissing, "scripted fixture has no case '" + record.case_id + "'");
  }

  PipelineOptions options;
  options.abstain_sets = record.abstain_sets;
  // A truncated stage holds exactly top_k entries and the others hold fewer,
  // so the largest ranked list recovers top_k.
  std::size_t top_k = 0;
  for (const auto& s : record.stages) top_k = std::max(top_k, s.ranked.size());
  if (top_k > 0) options.top_k = std::max<std::size_t>(2, top_k);
  RoutingPipeline pipeline(repo, backend, prompts, options);

  ReplayReport report;
  report.record_id = record.request_id;
  report.recorded = record.outcome;
  RouteResult result = pipeline.route({record.case_id, nullptr, record.thresholds});
  report.replayed = result.outcome;
  report.replay_record = result.record;

  auto flag = [&](std::string reason) {
    report.drift = true;
    report.drift_reasons.push_back(std::move(reason));
  };
  if (record.template_version != prompts.template_version()) {
    flag("template version " + record.template_version + " -> " + prompts.template_version());
  }
  if (record.backend != result.record.backend) flag("backend " + record.backend + " -> " + result.record.backend);
  if (!record.outcome) {
    flag("original route failed (" + record.error + ")");
  } else if (!(*record.outcome == result.outcome)) {
    flag("outcome " + record.outcome->describe() + " -> " + result.outcome.describe());
  }
  if (record.stages.size() != result.record.stages.size()) {
    flag("stage count " + std::to_string(record.stages.size()) + " -> " + std::to_string(result.record.stages.size()));
  } else {
    for (std::size_t i = 0; i < record.stages.size(); ++i) {
      if (!same_stage(record.stages[i], result.record.stages[i])) {
        flag("stage " + std::to_string(record.stages[i].stage) + " decision record differs");
      }
    }
  }
  return report;
}

ReplayReport replay(std::span<const DecisionRecord> store, std::string_view record_id, const CardRepository& repo,
                    ScriptedBackend& backend, const PromptBuilder& prompts) {
  for (const auto& r : store) {
    if (r.request_id == record_id) return replay(r, repo, backend, prompts);
  }
  throw Error(ErrorCode::kRecordNotFound, "no record with id " + std::string(record_id));
}

}  // namespace cardroute
