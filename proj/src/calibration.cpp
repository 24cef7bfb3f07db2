#include "cardroute/calibration.hpp"

#include "cardroute/error.hpp"
#include "cardroute/io.hpp"
#include "cardroute/text.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdlib>
#include <thread>

namespace cardroute {

using nlohmann::json;

bool LabeledCase::matches(const RoutingOutcome& got, bool strict) const {
  if (expected_kind == RoutingOutcome::Kind::kSelected) return got.is_selected() && got.card_id == expected_id;
  if (got.is_selected()) return false;
  if (!strict) return true;
  if (expected_token && *expected_token != got.abstain_token) return false;
  if (expected_stage && *expected_stage != got.abstain_stage) return false;
  return true;
}

std::vector<LabeledCase> parse_cases(std::string_view jsonl, const CardRepository* repo) {
  std::vector<LabeledCase> cases;
  std::size_t line_no = 0;
  for (std::string_view line : split_lines(jsonl)) {
    ++line_no;
    if (trim(line).empty()) continue;
    auto bad = [&](const std::string& reason) { throw LineError(ErrorCode::kMalformedRecord, line_no, reason); };
    json obj;
    try {
      obj = json::parse(line);
    } catch (const json::parse_error& e) {
      bad(std::string("invalid JSON: ") + e.what());
    }
    if (!obj.is_object()) bad("record is not a JSON object");
    for (const auto& [key, _] : obj.items()) {
      if (key != "case_id" && key != "expected_kind" && key != "expected_id" && key != "expected_token" &&
          key != "expected_stage" && key != "image") {
        bad("unknown key '" + key + "'");
      }
    }
    LabeledCase c;
    if (!obj.contains("case_id") || !obj["case_id"].is_string() || obj["case_id"].get<std::string>().empty()) {
      bad("case_id must be a non-empty string");
    }
    c.case_id = obj["case_id"].get<std::string>();
    const std::string kind = obj.value("expected_kind", std::string());
    if (kind == "Selected") {
      c.expected_kind = RoutingOutcome::Kind::kSelected;
      if (!obj.contains("expected_id") || !obj["expected_id"].is_string()) bad("Selected case needs expected_id");
      c.expected_id = obj["expected_id"].get<std::string>();
      if (!is_valid_card_id(c.expected_id)) bad("expected_id '" + c.expected_id + "' is not a card id");
      if (repo && !repo->find(c.expected_id)) bad("expected_id " + c.expected_id + " is not in the repository");
    } else if (kind == "Abstained") {
      c.expected_kind = RoutingOutcome::Kind::kAbstained;
      if (obj.contains("expected_id")) bad("Abstained case must not have expected_id");
    } else {
      bad("expected_kind must be Selected or Abstained");
    }
    if (obj.contains("expected_token")) {
      AbstainToken t;
      if (!obj["expected_token"].is_string() || !parse_abstain_token(obj["expected_token"].get<std::string>(), t)) {
        bad("expected_token must be None, Normal or Other");
      }
      c.expected_token = t;
    }
    if (obj.contains("expected_stage")) {
      if (!obj["expected_stage"].is_number_integer()) bad("expected_stage must be an integer");
      const int s = obj["expected_stage"].get<int>();
      if (s < 1 || s > 3) bad("expected_stage must be 1, 2 or 3");
      c.expected_stage = s;
    }
    if (obj.contains("image")) {
      if (!obj["image"].is_string()) bad("image must be a path string");
      c.image_path = obj["image"].get<std::string>();
    }
    cases.push_back(std::move(c));
  }
  return cases;
}

std::vector<LabeledCase> load_cases(const std::filesystem::path& path, const CardRepository* repo) {
  auto cases = parse_cases(read_file(path), repo);
  // Relative image paths resolve against the case file's directory.
  for (auto& c : cases) {
    if (!c.image_path.empty() && std::filesystem::path(c.image_path).is_relative()) {
      c.image_path = (path.parent_path() / c.image_path).string();
    }
  }
  return cases;
}

json MetricsRow::to_json() const {
  return {{"tau1", thresholds.tau1},
          {"tau2", thresholds.tau2},
          {"tau3", thresholds.tau3},
          {"selection_accuracy", selection_accuracy},
          {"false_selection_rate", false_selection_rate},
          {"abstention_precision", abstention_precision},
          {"abstention_recall", abstention_recall},
          {"n_cases", n_cases},
          {"n_errors", n_errors},
          {"errored_cases", errored_cases}};
}

namespace {

double ratio(std::size_t num, std::size_t den) {
  return den == 0 ? 0.0 : static_cast<double>(num) / static_cast<double>(den);
}

}  // namespace

MetricsRow evaluate(std::span<const LabeledCase> cases, const Thresholds& thresholds, const CardRepository& repo,
                    VlmBackend& backend, const PromptBuilder& prompts, const EvaluationOptions& options) {
  if (cases.empty()) throw Error(ErrorCode::kInvalidArgument, "evaluate needs at least one case");
  thresholds.validate();
  for (const auto& c : cases) {
    if (c.expected_kind == RoutingOutcome::Kind::kSelected && !repo.find(c.expected_id)) {
      throw Error(ErrorCode::kInvalidArgument,
                  "case " + c.case_id + " expects " + c.expected_id + ", which is not in the repository");
    }
  }
  const RoutingPipeline pipeline(repo, backend, prompts, options.pipeline);

  std::vector<std::optional<RoutingOutcome>> outcomes(cases.size());
  std::vector<std::optional<Error>> fatal(cases.size());
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t i = next++; i < cases.size(); i = next++) {
      const LabeledCase& c = cases[i];
      try {
        RouteRequest req{c.case_id, nullptr, thresholds};
        if (!c.image_path.empty()) {
          std::string bytes = read_file(c.image_path);
          req.image = std::make_shared<const ImageBytes>(bytes.begin(), bytes.end());
        }
        outcomes[i] = pipeline.route(req).outcome;
      } catch (const Error& e) {
        if (e.code() == ErrorCode::kBackendUnreachable) fatal[i] = e;
      }
    }
  };
  const int workers = std::clamp(options.parallelism, 1, static_cast<int>(cases.size()));
  if (workers == 1) {
    worker();
  } else {
    std::vector<std::jthread> pool;
    for (int w = 0; w < workers; ++w) pool.emplace_back(worker);
  }
  for (const auto& f : fatal) {
    if (f) throw *f;
  }

  MetricsRow row;
  row.thresholds = thresholds;
  row.n_cases = cases.size();
  std::size_t scored = 0, correct = 0, false_selections = 0;
  std::size_t expected_abstain = 0, predicted_abstain = 0, true_abstain = 0;
  for (std::size_t i = 0; i < cases.size(); ++i) {
    if (!outcomes[i]) {
      ++row.n_errors;
      row.errored_cases.push_back(cases[i].case_id);
      continue;
    }
    const LabeledCase& c = cases[i];
    const RoutingOutcome& got = *outcomes[i];
    const bool expect_abstain = c.expected_kind == RoutingOutcome::Kind::kAbstained;
    const bool match = c.matches(got, options.strict);
    ++scored;
    if (match) ++correct;
    if (expect_abstain) ++expected_abstain;
    if (!got.is_selected()) ++predicted_abstain;
    if (expect_abstain && got.is_selected()) ++false_selections;
    if (expect_abstain && match) ++true_abstain;
  }
  row.selection_accuracy = ratio(correct, scored);
  row.false_selection_rate = ratio(false_selections, scored);
  row.abstention_precision = ratio(true_abstain, predicted_abstain);
  row.abstention_recall = ratio(true_abstain, expected_abstain);
  return row;
}

ThresholdGrid parse_grid_spec(std::string_view spec) {
  std::vector<std::vector<double>> axes;
  std::size_t start = 0;
  while (true) {
    std::size_t end = spec.find(';', start);
    std::string_view part = spec.substr(start, end == std::string_view::npos ? std::string_view::npos : end - start);
    std::vector<double> values;
    std::size_t vstart = 0;
    while (true) {
      std::size_t vend = part.find(',', vstart);
      std::string item = trim(part.substr(vstart, vend == std::string_view::npos ? std::string_view::npos : vend - vstart));
      char* stop = nullptr;
      const double v = std::strtod(item.c_str(), &stop);
      if (item.empty() || stop != item.c_str() + item.size()) {
        throw Error(ErrorCode::kInvalidArgument, "bad grid value '" + item + "'");
      }
      if (!std::isfinite(v) || v < 0.0 || v > 1.0) {
        throw Error(ErrorCode::kInvalidThresholds, "grid value " + item + " is outside [0, 1]");
      }
      values.push_back(v);
      if (vend == std::string_view::npos) break;
      vstart = vend + 1;
    }
    axes.push_back(std::move(values));
    if (end == std::string_view::npos) break;
    start = end + 1;
  }
  if (axes.size() != 3) {
    throw Error(ErrorCode::kInvalidArgument, "grid spec needs three ';'-separated axes (tau1;tau2;tau3)");
  }
  return {axes[0], axes[1], axes[2]};
}

std::optional<std::size_t> select_best_row(std::span<const MetricsRow> rows, double ceiling) {
  std::optional<std::size_t> best;
  auto key = [](const MetricsRow& r) {
    return std::make_tuple(r.thresholds.tau1, r.thresholds.tau2, r.thresholds.tau3);
  };
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const MetricsRow& r = rows[i];
    if (r.false_selection_rate > ceiling) continue;
    if (!best) {
      best = i;
      continue;
    }
    const MetricsRow& b = rows[*best];
    if (r.selection_accuracy != b.selection_accuracy) {
      if (r.selection_accuracy > b.selection_accuracy) best = i;
    } else if (r.abstention_precision != b.abstention_precision) {
      if (r.abstention_precision > b.abstention_precision) best = i;
    } else if (key(r) < key(b)) {
      best = i;
    }
  }
  return best;
}

CalibrationReport sweep(std::span<const LabeledCase> cases, const ThresholdGrid& grid, const CardRepository& repo,
                        VlmBackend& backend, const PromptBuilder& prompts, const SweepOptions& options) {
  if (grid.tau1.empty() || grid.tau2.empty() || grid.tau3.empty()) {
    throw Error(ErrorCode::kInvalidArgument, "every grid axis needs at least one value");
  }
  if (grid.size() > options.grid_cap) {
    throw Error(ErrorCode::kGridTooLarge, "grid has " + std::to_string(grid.size()) + " triples; cap is " +
                                              std::to_string(options.grid_cap));
  }
  for (double t1 : grid.tau1) {
    for (double t2 : grid.tau2) {
      for (double t3 : grid.tau3) Thresholds{t1, t2, t3}.validate();
    }
  }

  MemoizingBackend memo(backend);
  CalibrationReport report;
  report.false_selection_ceiling = options.false_selection_ceiling;
  for (double t1 : grid.tau1) {
    for (double t2 : grid.tau2) {
      for (double t3 : grid.tau3) {
        report.rows.push_back(evaluate(cases, {t1, t2, t3}, repo, memo, prompts, options.evaluation));
      }
    }
  }
  report.best_row = select_best_row(report.rows, options.false_selection_ceiling);
  report.backend_calls = memo.misses();
  return report;
}

namespace {

std::string num(double v) { return json(v).dump(); }

}  // namespace

std::string CalibrationReport::to_csv() const {
  std::string out =
      "tau1,tau2,tau3,selection_accuracy,false_selection_rate,abstention_precision,abstention_recall,n_cases,"
      "n_errors,best\n";
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const MetricsRow& r = rows[i];
    out += num(r.thresholds.tau1) + ',' + num(r.thresholds.tau2) + ',' + num(r.thresholds.tau3) + ',' +
           num(r.selection_accuracy) + ',' + num(r.false_selection_rate) + ',' + num(r.abstention_precision) + ',' +
           num(r.abstention_recall) + ',' + std::to_string(r.n_cases) + ',' + std::to_string(r.n_errors) + ',' +
           (best_row && *best_row == i ? "1" : "0") + '\n';
  }
  return out;
}

json CalibrationReport::to_json() const {
  json rows_json = json::array();
  for (const auto& r : rows) rows_json.push_back(r.to_json());
  return {{"rows", std::move(rows_json)},
          {"best_row", best_row ? json(rows[*best_row].to_json()) : json()},
          {"best_index", best_row ? json(*best_row) : json()},
          {"objective",
           {{"maximize", "selection_accuracy"},
            {"false_selection_ceiling", false_selection_ceiling},
            {"tie_break", json::array({"abstention_precision desc", "(tau1, tau2, tau3) asc"})}}},
          {"backend_calls", backend_calls}};
}

}  // namespace cardroute
