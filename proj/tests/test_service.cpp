#include "support.hpp"

#include "cardroute/error.hpp"
#include "cardroute/service.hpp"

#include <doctest.h>
#include <httplib.h>

#include <thread>

using namespace cardroute;
using namespace testsupport;
using nlohmann::json;

namespace {

// Passes stages through to the fixture until `fail_stage`, then fails as an
// unreachable server would.
class FailingBackend final : public VlmBackend {
 public:
  FailingBackend(VlmBackend& inner, int fail_stage) : inner_(inner), fail_stage_(fail_stage) {}
  FirstTokenDistribution rank_first_tokens(const GenerationRequest& req, std::size_t k) override {
    if (req.stage >= fail_stage_) throw Error(ErrorCode::kBackendUnreachable, "connection refused");
    return inner_.rank_first_tokens(req, k);
  }
  std::string decode_with_first_token(const GenerationRequest& req, std::string_view first) override {
    return inner_.decode_with_first_token(req, first);
  }
  std::string identifier() const override { return "failing:" + inner_.identifier(); }
  bool reachable() override { return false; }

 private:
  VlmBackend& inner_;
  int fail_stage_;
};

ServiceConfig scripted_config(const TempDir& dir) {
  ServiceConfig c;
  c.cards = data("cards.jsonl");
  c.audit_store = dir / "audit.jsonl";
  c.backend.kind = BackendSpec::Kind::kScripted;
  c.backend.script = data("scenarios.jsonl");
  c.port = 0;
  return c;
}

RouteHttpRequest request(std::string case_id, std::map<std::string, std::string> overrides = {}) {
  RouteHttpRequest r;
  r.case_id = std::move(case_id);
  r.overrides = std::move(overrides);
  return r;
}

}  // namespace

TEST_CASE("service: route returns the outcome and persists the record") {
  TempDir dir;
  RoutingService svc(scripted_config(dir));
  const auto reply = svc.handle_route(request("fig3_histopathology"));
  CHECK(reply.status == 200);
  CHECK(reply.body["outcome"]["kind"] == "Selected");
  CHECK(reply.body["outcome"]["card_id"] == "MODEL_01");
  const std::string id = reply.body["decision_record"]["request_id"];
  CHECK(svc.audit_store().find(id).has_value());
  const auto one = svc.handle_decision(id);
  CHECK(one.status == 200);
  CHECK(one.body == reply.body["decision_record"]);
  CHECK(svc.handle_decision("no-such-id").status == 404);
}

TEST_CASE("service: threshold overrides") {
  TempDir dir;
  RoutingService svc(scripted_config(dir));
  CHECK(svc.handle_route(request("fig2_renal", {{"tau2", "0.10"}})).body["outcome"]["card_id"] == "MODEL_07");
  CHECK(svc.handle_route(request("fig2_renal", {{"tau2", "0.30"}})).body["outcome"]["kind"] == "Abstained");

  const auto bad = svc.handle_route(request("fig2_renal", {{"tau2", "1.5"}}));
  CHECK(bad.status == 400);
  CHECK(bad.body["error"]["code"] == "InvalidThresholds");
  CHECK(svc.handle_route(request("fig2_renal", {{"tau2", "abc"}})).status == 400);
  CHECK(svc.handle_route(request("fig2_renal", {{"tau9", "0.1"}})).status == 400);
  // Rejected requests start no route and write nothing.
  CHECK(svc.audit_store().size() == 2);
}

TEST_CASE("service: request validation") {
  TempDir dir;
  RoutingService svc(scripted_config(dir));
  CHECK(svc.handle_route(request("")).status == 400);
  RouteHttpRequest big = request("fig3_histopathology");
  big.image = std::string(kMaxImageBytes + 1, 'x');
  const auto reply = svc.handle_route(big);
  CHECK(reply.status == 413);
  CHECK(reply.body["error"]["code"] == "PayloadTooLarge");
  const auto missing = svc.handle_route(request("no_such_case"));
  CHECK(missing.status == 404);
  CHECK(missing.body["error"]["code"] == "FixtureMissing");
}

TEST_CASE("service: a backend failure is a 502 with the partial record persisted") {
  TempDir dir;
  auto fixture = ScriptedBackend::load(data("scenarios.jsonl"));
  FailingBackend failing(*fixture, 2);
  RoutingService svc(scripted_config(dir), failing);
  const auto reply = svc.handle_route(request("fig3_histopathology"));
  CHECK(reply.status == 502);
  CHECK(reply.body["error"]["code"] == "BackendUnreachable");
  const auto& partial = reply.body["decision_record"];
  CHECK(partial["outcome"].is_null());
  CHECK(partial["stages"].size() == 1);
  const auto stored = svc.audit_store().find(partial["request_id"].get<std::string>());
  REQUIRE(stored.has_value());
  CHECK_FALSE(stored->outcome.has_value());
  CHECK(stored->error.rfind("BackendUnreachable", 0) == 0);
  CHECK(svc.handle_health().status == 503);
}

TEST_CASE("service: remote backend requires an image and reports unreachable servers") {
  TempDir dir;
  ServiceConfig c = scripted_config(dir);
  c.backend.kind = BackendSpec::Kind::kRemote;
  c.backend.remote.base_url = "http://127.0.0.1:1";
  c.backend.remote.model = "m";
  c.backend.remote.auth_token = "t";
  c.backend.remote.max_retries = 0;
  c.backend.remote.timeout = std::chrono::milliseconds(500);
  RoutingService svc(c);
  CHECK(svc.handle_route(request("anything")).status == 400);
  RouteHttpRequest with_image = request("anything");
  with_image.image = "\x89PNG fake";
  const auto reply = svc.handle_route(with_image);
  CHECK(reply.status == 502);
  CHECK(reply.body["error"]["code"] == "BackendUnreachable");
  CHECK(svc.audit_store().size() == 1);
}

TEST_CASE("service: cards, decisions and health") {
  TempDir dir;
  RoutingService svc(scripted_config(dir));
  const auto cards = svc.handle_cards();
  CHECK(cards.status == 200);
  CHECK(cards.body["cards"].size() == svc.repository()->size());
  CHECK(cards.body["digest"] == svc.repository()->source_digest());
  for (const char* id : {"cat_photo", "fundus_dr", "mri_brain"}) svc.handle_route(request(id));
  const auto recent = svc.handle_decisions(2);
  REQUIRE(recent.body["decisions"].size() == 2);
  CHECK(recent.body["decisions"][0]["case_id"] == "mri_brain");
  CHECK(recent.body["decisions"][1]["case_id"] == "fundus_dr");
  const auto health = svc.handle_health();
  CHECK(health.status == 200);
  CHECK(health.body["status"] == "ok");
}

TEST_CASE("service: reload swaps the repository") {
  TempDir dir;
  ServiceConfig c = scripted_config(dir);
  write_file(dir / "cards.jsonl", read_file(test_data("two_cards.jsonl")));
  c.cards = dir / "cards.jsonl";
  RoutingService svc(c);
  const auto before = svc.repository();
  CHECK(before->size() == 2);
  write_file(dir / "cards.jsonl", read_file(data("cards.jsonl")));
  svc.reload_repository();
  CHECK(svc.repository()->size() > 2);
  CHECK(svc.repository()->source_digest() != before->source_digest());
  // A snapshot held by an in-flight route is unaffected.
  CHECK(before->size() == 2);
  // A failed reload keeps the old snapshot.
  write_file(dir / "cards.jsonl", "not json\n");
  CHECK_THROWS_AS(svc.reload_repository(), Error);
  CHECK(svc.repository()->size() > 2);
}

TEST_CASE("service: config file parsing") {
  TempDir dir;
  write_file(dir / "svc.json", R"({"cards": "c.jsonl", "audit_store": "a.jsonl",
    "backend": {"kind": "scripted", "script": "s.jsonl"},
    "thresholds": {"tau1": 0.2, "tau2": 0.3, "tau3": 0.05}, "port": 0, "abstain_sets": "global"})");
  const auto c = ServiceConfig::load(dir / "svc.json");
  CHECK(c.cards == dir / "c.jsonl");
  CHECK(c.backend.script == dir / "s.jsonl");
  CHECK(c.thresholds == Thresholds{0.2, 0.3, 0.05});
  CHECK(c.pipeline.abstain_sets == AbstainSets::global());
  write_file(dir / "bad.json", R"({"cards": "c", "audit_store": "a", "backend": {"kind": "magic"}})");
  CHECK_THROWS_AS(ServiceConfig::load(dir / "bad.json"), Error);
  write_file(dir / "bad.json", R"({"cards": "c", "audit_store": "a", "backend": {"kind": "scripted", "script": "s"},
    "thresholds": {"tau1": 2, "tau2": 0.3, "tau3": 0.1}})");
  CHECK_THROWS_AS(ServiceConfig::load(dir / "bad.json"), Error);
}

TEST_CASE("service: HTTP end to end") {
  TempDir dir;
  RoutingService svc(scripted_config(dir));
  const int port = svc.bind();
  REQUIRE(port > 0);
  std::thread server([&] { svc.run(); });

  httplib::Client client("127.0.0.1", port);
  httplib::MultipartFormDataItems form = {{"case_id", "fig2_renal", "", ""},
                                          {"tau2", "0.10", "", ""},
                                          {"image", std::string("\x89PNG\r\n fake", 11), "scan.png", "image/png"}};
  auto res = client.Post("/v1/route", form);
  REQUIRE(res);
  CHECK(res->status == 200);
  const auto body = json::parse(res->body);
  CHECK(body["outcome"]["card_id"] == "MODEL_07");
  CHECK(body["decision_record"]["image_digest"].get<std::string>().size() == 64);

  form[1].content = "1.5";
  res = client.Post("/v1/route", form);
  REQUIRE(res);
  CHECK(res->status == 400);

  res = client.Get("/v1/decisions?limit=5");
  REQUIRE(res);
  CHECK(json::parse(res->body)["decisions"].size() == 1);
  CHECK(client.Get("/v1/decisions?limit=zero")->status == 400);
  const std::string id = body["decision_record"]["request_id"];
  res = client.Get("/v1/decisions/" + id);
  REQUIRE(res);
  CHECK(res->status == 200);
  CHECK(client.Get("/v1/cards")->status == 200);
  CHECK(client.Get("/healthz")->status == 200);

  svc.stop();
  server.join();
}
