#include "cardroute/decision_record.hpp"

#include "cardroute/error.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <ctime>
#include <random>

namespace cardroute {

using nlohmann::json;

void Thresholds::validate() const {
  const double taus[] = {tau1, tau2, tau3};
  for (int i = 0; i < 3; ++i) {
    if (!std::isfinite(taus[i]) || taus[i] < 0.0 || taus[i] > 1.0) {
      throw Error(ErrorCode::kInvalidThresholds,
                  "tau" + std::to_string(i + 1) + " must be in [0,1], got " + std::to_string(taus[i]));
    }
  }
}

double Thresholds::for_stage(int stage) const {
  switch (stage) {
    case 1: return tau1;
    case 2: return tau2;
    case 3: return tau3;
  }
  throw Error(ErrorCode::kInvalidArgument, "no such stage: " + std::to_string(stage));
}

json Thresholds::to_json() const { return {{"tau1", tau1}, {"tau2", tau2}, {"tau3", tau3}}; }

Thresholds Thresholds::from_json(const json& j) {
  Thresholds t;
  t.tau1 = j.value("tau1", kDefaultTau1);
  t.tau2 = j.value("tau2", kDefaultTau2);
  t.tau3 = j.value("tau3", kDefaultTau3);
  return t;
}

AbstainSets AbstainSets::global() {
  const AbstainSet all{AbstainToken::kNone, AbstainToken::kNormal, AbstainToken::kOther};
  return {all, all, all};
}

const AbstainSet& AbstainSets::for_stage(int stage) const {
  switch (stage) {
    case 1: return stage1;
    case 2: return stage2;
    case 3: return stage3;
  }
  throw Error(ErrorCode::kInvalidArgument, "no such stage: " + std::to_string(stage));
}

RoutingOutcome RoutingOutcome::selected(std::string card_id) {
  RoutingOutcome o;
  o.kind = Kind::kSelected;
  o.card_id = std::move(card_id);
  return o;
}

RoutingOutcome RoutingOutcome::abstained(int stage, AbstainToken token) {
  RoutingOutcome o;
  o.kind = Kind::kAbstained;
  o.abstain_stage = stage;
  o.abstain_token = token;
  return o;
}

std::string RoutingOutcome::describe() const {
  if (is_selected()) return "Selected " + card_id;
  return "Abstained at Stage " + std::to_string(abstain_stage) + " (" + abstain_token_text(abstain_token) + ")";
}

json RoutingOutcome::to_json() const {
  if (is_selected()) return {{"kind", "Selected"}, {"card_id", card_id}};
  return {{"kind", "Abstained"}, {"stage", abstain_stage}, {"token", abstain_token_text(abstain_token)}};
}

namespace {

[[noreturn]] void malformed(const std::string& what) {
  throw Error(ErrorCode::kMalformedRecord, "malformed decision record: " + what);
}

json abstain_set_json(const AbstainSet& set) {
  json arr = json::array();
  for (auto t : set) arr.push_back(abstain_token_text(t));
  return arr;
}

AbstainSet abstain_set_from(const json& arr) {
  AbstainSet set;
  for (const auto& v : arr) {
    AbstainToken t;
    if (!v.is_string() || !parse_abstain_token(v.get<std::string>(), t)) malformed("bad abstain token");
    set.insert(t);
  }
  return set;
}

json stage_json(const StageOutcome& s) {
  json ranked = json::array();
  for (const auto& r : s.ranked) ranked.push_back({{"token", r.token}, {"prob", r.prob}});
  json top2 = json::array();
  for (const auto& c : s.top2) {
    top2.push_back({{"first_token", c.first_token},
                    {"raw_answer", c.raw_answer},
                    {"text", c.answer.text},
                    {"prob", c.answer.first_token_prob}});
  }
  return {{"stage", s.stage},
          {"skipped", s.skipped},
          {"prompt_digest", s.prompt_digest},
          {"image_attached", s.image_attached},
          {"cutoff", s.cutoff},
          {"abstain_set", abstain_set_json(s.abstain_set)},
          {"ranked", std::move(ranked)},
          {"top2", std::move(top2)},
          {"decision",
           {{"chosen", {{"text", s.decision.chosen.text}, {"prob", s.decision.chosen.first_token_prob}}},
            {"verdict", verdict_name(s.decision.verdict)},
            {"reason", reason_name(s.decision.reason)}}}};
}

StageOutcome stage_from(const json& j) {
  StageOutcome s;
  s.stage = j.at("stage").get<int>();
  s.skipped = j.at("skipped").get<bool>();
  s.prompt_digest = j.at("prompt_digest").get<std::string>();
  s.image_attached = j.at("image_attached").get<bool>();
  s.cutoff = j.at("cutoff").get<double>();
  s.abstain_set = abstain_set_from(j.at("abstain_set"));
  for (const auto& r : j.at("ranked")) s.ranked.push_back({r.at("token").get<std::string>(), r.at("prob").get<double>()});
  for (const auto& c : j.at("top2")) {
    s.top2.push_back({c.at("first_token").get<std::string>(), c.at("raw_answer").get<std::string>(),
                      {c.at("text").get<std::string>(), c.at("prob").get<double>()}});
  }
  const json& d = j.at("decision");
  s.decision.chosen = {d.at("chosen").at("text").get<std::string>(), d.at("chosen").at("prob").get<double>()};
  if (!parse_verdict(d.at("verdict").get<std::string>(), s.decision.verdict)) malformed("bad verdict");
  if (!parse_reason(d.at("reason").get<std::string>(), s.decision.reason)) malformed("bad reason");
  return s;
}

}  // namespace

RoutingOutcome RoutingOutcome::from_json(const json& j) {
  try {
    const std::string kind = j.at("kind").get<std::string>();
    if (kind == "Selected") return selected(j.at("card_id").get<std::string>());
    if (kind != "Abstained") malformed("unknown outcome kind '" + kind + "'");
    AbstainToken token;
    if (!parse_abstain_token(j.at("token").get<std::string>(), token)) malformed("bad abstain token");
    return abstained(j.at("stage").get<int>(), token);
  } catch (const json::exception& e) {
    malformed(e.what());
  }
}

json DecisionRecord::to_json() const {
  json stages_json = json::array();
  for (const auto& s : stages) stages_json.push_back(stage_json(s));
  return {{"schema", schema},
          {"request_id", request_id},
          {"timestamp", timestamp},
          {"case_id", case_id},
          {"repo_digest", repo_digest},
          {"template_version", template_version},
          {"backend", backend},
          {"thresholds", thresholds.to_json()},
          {"abstain_sets",
           {{"stage1", abstain_set_json(abstain_sets.stage1)},
            {"stage2", abstain_set_json(abstain_sets.stage2)},
            {"stage3", abstain_set_json(abstain_sets.stage3)}}},
          {"image_digest", image_digest},
          {"stages", std::move(stages_json)},
          {"outcome", outcome ? outcome->to_json() : json()},
          {"justification", justification},
          {"warnings", warnings},
          {"error", error}};
}

DecisionRecord DecisionRecord::from_json(const json& j) {
  try {
    DecisionRecord r;
    r.schema = j.at("schema").get<int>();
    if (r.schema != kDecisionRecordSchema) malformed("unsupported schema " + std::to_string(r.schema));
    r.request_id = j.at("request_id").get<std::string>();
    r.timestamp = j.at("timestamp").get<std::string>();
    r.case_id = j.at("case_id").get<std::string>();
    r.repo_digest = j.at("repo_digest").get<std::string>();
    r.template_version = j.at("template_version").get<std::string>();
    r.backend = j.at("backend").get<std::string>();
    const json& t = j.at("thresholds");
    r.thresholds = {t.at("tau1").get<double>(), t.at("tau2").get<double>(), t.at("tau3").get<double>()};
    const json& a = j.at("abstain_sets");
    r.abstain_sets = {abstain_set_from(a.at("stage1")), abstain_set_from(a.at("stage2")),
                      abstain_set_from(a.at("stage3"))};
    r.image_digest = j.at("image_digest").get<std::string>();
    for (const auto& s : j.at("stages")) r.stages.push_back(stage_from(s));
    if (!j.at("outcome").is_null()) r.outcome = RoutingOutcome::from_json(j.at("outcome"));
    r.justification = j.at("justification").get<std::string>();
    r.warnings = j.at("warnings").get<std::vector<std::string>>();
    r.error = j.at("error").get<std::string>();
    if (r.request_id.empty()) malformed("empty request_id");
    return r;
  } catch (const json::exception& e) {
    malformed(e.what());
  }
}

bool DecisionRecord::equivalent(const DecisionRecord& other) const {
  DecisionRecord a = *this;
  DecisionRecord b = other;
  a.request_id = b.request_id = {};
  a.timestamp = b.timestamp = {};
  return a == b;
}

std::string new_request_id() {
  thread_local std::mt19937_64 rng{std::random_device{}() ^
                                   static_cast<std::uint64_t>(
                                       std::chrono::steady_clock::now().time_since_epoch().count())};
  char buf[33];
  std::snprintf(buf, sizeof(buf), "%016llx%016llx", static_cast<unsigned long long>(rng()),
                static_cast<unsigned long long>(rng()));
  return buf;
}

std::string utc_timestamp_now() {
  const auto now = std::chrono::system_clock::now();
  const std::time_t secs = std::chrono::system_clock::to_time_t(now);
  const auto millis =
      std::chrono::duration_cast<std::chrono::milliseconds>(now.time_since_epoch()).count() % 1000;
  std::tm tm{};
  gmtime_r(&secs, &tm);
  char buf[40];
  std::size_t n = std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%S", &tm);
  std::snprintf(buf + n, sizeof(buf) - n, ".%03dZ", static_cast<int>(millis));
  return buf;
}

}  // namespace cardroute
