#pragma once

#include "cardroute/card_repository.hpp"
#include "cardroute/decision_record.hpp"
#include "cardroute/prompt_builder.hpp"
#include "cardroute/routing_pipeline.hpp"
#include "cardroute/vlm_backend.hpp"

#include <json.hpp>

#include <cstddef>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace cardroute {

// Ground truth is either a card id or an abstention. Token and stage are only
// compared in strict mode, and only when given.
struct LabeledCase {
  std::string case_id;
  RoutingOutcome::Kind expected_kind = RoutingOutcome::Kind::kAbstained;
  std::string expected_id;
  std::optional<AbstainToken> expected_token;
  std::optional<int> expected_stage;
  std::string image_path;  // optional; attached to stages 1-2 when set

  bool matches(const RoutingOutcome& got, bool strict) const;
};

// JSONL {case_id, expected_kind, expected_id?, expected_token?, expected_stage?, image?}.
// When repo is given, expected Selected ids must exist in it.
std::vector<LabeledCase> load_cases(const std::filesystem::path& path, const CardRepository* repo = nullptr);
std::vector<LabeledCase> parse_cases(std::string_view jsonl, const CardRepository* repo = nullptr);

struct MetricsRow {
  Thresholds thresholds;
  double selection_accuracy = 0.0;
  double false_selection_rate = 0.0;
  double abstention_precision = 0.0;
  double abstention_recall = 0.0;
  std::size_t n_cases = 0;   // all cases, scored or not
  std::size_t n_errors = 0;  // cases that failed and were excluded from the rates
  std::vector<std::string> errored_cases;

  nlohmann::json to_json() const;
  bool operator==(const MetricsRow&) const = default;
};

struct EvaluationOptions {
  bool strict = false;  // compare abstention stage/token too
  PipelineOptions pipeline;
  int parallelism = 1;  // concurrent cases; keep at or below the backend's in-flight limit
};

// Routes every case and tallies. Per-case failures are flagged and excluded;
// BackendUnreachable and InvalidThresholds propagate.
MetricsRow evaluate(std::span<const LabeledCase> cases, const Thresholds& thresholds, const CardRepository& repo,
                    VlmBackend& backend, const PromptBuilder& prompts, const EvaluationOptions& options = {});

struct ThresholdGrid {
  std::vector<double> tau1;
  std::vector<double> tau2;
  std::vector<double> tau3;

  std::size_t size() const noexcept { return tau1.size() * tau2.size() * tau3.size(); }
};

// "a,b;c;d,e" lists tau1, tau2 and tau3 values separated by ';'.
ThresholdGrid parse_grid_spec(std::string_view spec);

inline constexpr std::size_t kDefaultGridCap = 1000;
inline constexpr double kDefaultFalseSelectionCeiling = 0.05;

struct SweepOptions {
  EvaluationOptions evaluation;
  std::size_t grid_cap = kDefaultGridCap;
  double false_selection_ceiling = kDefaultFalseSelectionCeiling;
};

struct CalibrationReport {
  std::vector<MetricsRow> rows;  // Cartesian order, tau1 outermost
  std::optional<std::size_t> best_row;
  double false_selection_ceiling = kDefaultFalseSelectionCeiling;
  std::size_t backend_calls = 0;  // calls that reached the wrapped backend

  std::string to_csv() const;
  nlohmann::json to_json() const;
};

// Highest accuracy among rows under the false-selection ceiling; ties go to
// higher abstention precision, then the lexicographically smaller triple.
std::optional<std::size_t> select_best_row(std::span<const MetricsRow> rows, double false_selection_ceiling);

// Evaluates every grid triple through a shared memo, so each distinct
// backend request is issued once for the whole sweep.
CalibrationReport sweep(std::span<const LabeledCase> cases, const ThresholdGrid& grid, const CardRepository& repo,
                        VlmBackend& backend, const PromptBuilder& prompts, const SweepOptions& options = {});

}  // namespace cardroute
