#include "support.hpp"

#include "cardroute/error.hpp"
#include "cardroute/remote_backend.hpp"
#include "cardroute/text.hpp"

#include <doctest.h>
#include <httplib.h>
#include <json.hpp>

#include <cmath>
#include <cstdlib>
#include <thread>

using namespace cardroute;
using namespace testsupport;
using nlohmann::json;

namespace {

GenerationRequest request(std::string case_id, int stage, std::string prior = "") {
  GenerationRequest r;
  r.case_id = std::move(case_id);
  r.stage = stage;
  r.prior_answer = std::move(prior);
  r.system_prompt = "You are a medical-imaging specialist.";
  r.user_prompt = "Identify the finding.";
  return r;
}

template <typename Fn>
ErrorCode code_of(Fn&& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e.code();
  }
  return ErrorCode::kOk;
}

const char* kRenalStage2 =
    R"({"case_id":"fig2_renal","stage":2,"entries":[{"token":"Li","prob":0.55,"answer":"Liver cancer"},)"
    R"({"token":"No","prob":0.35,"answer":"Normal"}]})";

}  // namespace

TEST_CASE("scripted: ranked distribution from an authored fixture") {
  auto b = script(kRenalStage2);
  const auto d = b->rank_first_tokens(request("fig2_renal", 2), 5);
  REQUIRE(d.entries.size() == 2);
  CHECK(d.entries[0] == RankedToken{"Li", 0.55});
  CHECK(d.entries[1] == RankedToken{"No", 0.35});
  CHECK(d.top_answer == "Liver cancer");
  CHECK(b->decode_with_first_token(request("fig2_renal", 2), "Li") == "Liver cancer");
  CHECK(b->decode_with_first_token(request("fig2_renal", 2), "No") == "Normal");
  CHECK(code_of([&] { b->decode_with_first_token(request("fig2_renal", 2), "Ki"); }) ==
        ErrorCode::kUnknownFirstToken);
}

TEST_CASE("scripted: shipped fig2 fixture ranks liver cancer first") {
  auto b = ScriptedBackend::load(data("scenarios.jsonl"));
  const auto d = b->rank_first_tokens(request("fig2_renal", 2), 5);
  CHECK(d.entries[0].token == "Li");
  CHECK(d.entries[0].prob == doctest::Approx(0.55));
  CHECK(b->decode_with_first_token(request("fig2_renal", 2), "Li") == "Liver cancer");
}

TEST_CASE("scripted: truncation to k") {
  auto b = script(
      R"({"case_id":"c","stage":1,"entries":[{"token":"a","prob":0.3,"answer":"a"},{"token":"b","prob":0.25,"answer":"b"},)"
      R"({"token":"c","prob":0.2,"answer":"c"},{"token":"d","prob":0.15,"answer":"d"},{"token":"e","prob":0.1,"answer":"e"}]})");
  const auto d = b->rank_first_tokens(request("c", 1), 2);
  CHECK(d.entries.size() == 2);
  CHECK(d.truncated_at == 2);
  CHECK(b->rank_first_tokens(request("c", 1), 5).entries.size() == 5);
  CHECK(code_of([&] { b->rank_first_tokens(request("c", 1), 1); }) == ErrorCode::kInvalidArgument);
}

TEST_CASE("scripted: unordered fixture entries are ranked by probability, stably") {
  auto b = script(
      R"({"case_id":"c","stage":1,"entries":[{"token":"x","prob":0.1,"answer":"x"},{"token":"y","prob":0.4,"answer":"y"},)"
      R"({"token":"z","prob":0.4,"answer":"z"}]})");
  const auto d = b->rank_first_tokens(request("c", 1), 5);
  CHECK(d.entries[0].token == "y");
  CHECK(d.entries[1].token == "z");
  CHECK(d.entries[2].token == "x");
  CHECK(d.top_answer == "y");
}

TEST_CASE("scripted: 3 cases x 3 stages are 9 addressable responses") {
  std::string text;
  for (const char* c : {"a", "b", "c"}) {
    for (int s = 1; s <= 3; ++s) {
      text += std::string(R"({"case_id":")") + c + R"(","stage":)" + std::to_string(s) +
              R"(,"entries":[{"token":"P","prob":0.6,"answer":"Polyp"},{"token":"N","prob":0.3,"answer":"Normal"}]})" +
              "\n";
    }
  }
  auto b = script(text);
  CHECK(b->response_count() == 9);
  for (const char* c : {"a", "b", "c"}) {
    for (int s = 1; s <= 3; ++s) CHECK_NOTHROW(b->rank_first_tokens(request(c, s), 5));
  }
  CHECK(code_of([&] { b->rank_first_tokens(request("d", 1), 5); }) == ErrorCode::kFixtureMissing);
}

TEST_CASE("scripted: prior-answer keyed responses fall back to the unconditioned one") {
  auto b = script(
      R"({"case_id":"c","stage":3,"after":"Kidney stone","entries":[{"token":"MODEL","prob":0.9,"answer":"MODEL_07"},{"token":"None","prob":0.05,"answer":"None"}]})"
      "\n"
      R"({"case_id":"c","stage":3,"entries":[{"token":"None","prob":0.9,"answer":"None"},{"token":"MODEL","prob":0.05,"answer":"MODEL_07"}]})");
  CHECK(b->rank_first_tokens(request("c", 3, "kidney STONE"), 5).entries[0].token == "MODEL");
  CHECK(b->rank_first_tokens(request("c", 3, "Liver cancer"), 5).entries[0].token == "None");
}

TEST_CASE("scripted: deterministic") {
  auto b = ScriptedBackend::load(data("scenarios.jsonl"));
  const auto r = request("fig3_cardiomegaly", 3, "Cardiomegaly");
  const auto first = b->rank_first_tokens(r, 5);
  for (int i = 0; i < 10; ++i) {
    const auto again = b->rank_first_tokens(r, 5);
    CHECK(again.entries == first.entries);
    CHECK(again.top_answer == first.top_answer);
  }
}

TEST_CASE("scripted: every ranked token decodes to an answer that starts with it") {
  auto b = ScriptedBackend::load(data("scenarios.jsonl"));
  const auto text = read_file(data("scenarios.jsonl"));
  for (auto line : split_lines(text)) {
    const json j = json::parse(line);
    const auto r = request(j["case_id"], j["stage"], j.value("after", ""));
    const auto d = b->rank_first_tokens(r, 5);
    CHECK(starts_with(d.top_answer, d.entries[0].token));
    for (const auto& e : d.entries) CHECK(starts_with(b->decode_with_first_token(r, e.token), e.token));
  }
}

TEST_CASE("scripted: malformed scripts") {
  struct Row {
    std::string text;
    std::string needle;
  };
  const std::string ok = R"({"case_id":"c","stage":1,"entries":[{"token":"A","prob":0.6,"answer":"A"},{"token":"B","prob":0.3,"answer":"B"}]})";
  const std::vector<Row> rows = {
      {ok + "\n" + ok, "duplicate"},
      {R"({"case_id":"c","stage":4,"entries":[]})", "stage"},
      {R"({"case_id":"c","stage":1,"entries":[{"token":"A","prob":0.6,"answer":"A"}]})", "at least 2"},
      {R"({"case_id":"c","stage":1,"entries":[{"token":"A","prob":0.6,"answer":"A"},{"token":"B","prob":0.6,"answer":"B"}]})", "sum"},
      {R"({"case_id":"c","stage":1,"entries":[{"token":"A","prob":1.2,"answer":"A"},{"token":"B","prob":0.1,"answer":"B"}]})", "[0,1]"},
      {R"({"case_id":"c","stage":1,"entries":[{"token":"A","prob":0.6,"answer":"A"},{"token":"A","prob":0.3,"answer":"A"}]})", "token"},
      {R"({"case_id":"c","stage":1,"entries":[{"token":"A","prob":0.6,"answer":"A"},{"token":"B","prob":0.3,"answer":"Other"}]})", "begin"},
      {R"({"case_id":"c","stage":1,"entries":[],"extra":1})", "unknown key"},
      {"{", "invalid JSON"},
  };
  for (const auto& row : rows) {
    CAPTURE(row.text);
    try {
      script(row.text);
      FAIL("expected MalformedScript");
    } catch (const LineError& e) {
      CHECK(e.code() == ErrorCode::kMalformedScript);
      CHECK(std::string(e.what()).find(row.needle) != std::string::npos);
    }
  }
}

TEST_CASE("scripted: identifier pins the fixture digest") {
  auto a = ScriptedBackend::load(data("scenarios.jsonl"));
  auto b = script(kRenalStage2);
  CHECK(a->identifier().rfind("scripted:", 0) == 0);
  CHECK(a->identifier() != b->identifier());
  CHECK(a->identifier() == ScriptedBackend::load(data("scenarios.jsonl"))->identifier());
}

TEST_CASE("request validation rejects a stage-3 image") {
  auto r = request("c", 3);
  r.image = std::make_shared<const ImageBytes>(ImageBytes{1, 2, 3});
  CHECK(code_of([&] { r.validate(); }) == ErrorCode::kInvalidArgument);
  r.stage = 2;
  CHECK_NOTHROW(r.validate());
  r.user_prompt = " ";
  CHECK(code_of([&] { r.validate(); }) == ErrorCode::kInvalidArgument);
}

TEST_CASE("recording and memoizing decorators") {
  auto inner = ScriptedBackend::load(data("scenarios.jsonl"));
  RecordingBackend rec(*inner);
  MemoizingBackend memo(rec);
  const auto r = request("fig3_histopathology", 1);
  for (int i = 0; i < 3; ++i) {
    memo.rank_first_tokens(r, 5);
    memo.decode_with_first_token(r, "colorectal");
  }
  CHECK(rec.call_count() == 2);
  CHECK(memo.misses() == 2);
  CHECK(memo.hits() == 4);
  const auto calls = rec.calls();
  CHECK(calls[0].kind == BackendCall::Kind::kRank);
  CHECK(calls[1].kind == BackendCall::Kind::kDecode);
  CHECK(calls[1].first_token == "colorectal");
  // A different prompt is a different request.
  auto r2 = r;
  r2.user_prompt += " ";
  r2.prompt_digest = "other";
  memo.rank_first_tokens(r2, 5);
  CHECK(rec.call_count() == 3);
}

// --- remote backend ---------------------------------------------------------

namespace {

void check_golden_json(const std::string& name, const json& actual) {
  const auto path = kTestDataDir.parent_path() / "golden" / name;
  if (std::getenv("CARDROUTE_UPDATE_GOLDEN")) {
    write_file(path, actual.dump(2) + "\n");
    return;
  }
  CAPTURE(name);
  REQUIRE(std::filesystem::exists(path));
  CHECK(json::parse(read_file(path)) == actual);
}

json rank_response(const json& top, const std::string& generated, const std::string& content) {
  return {{"choices",
           {{{"index", 0},
             {"message", {{"role", "assistant"}, {"content", content}}},
             {"logprobs", {{"content", {{{"token", generated}, {"logprob", -0.1}, {"top_logprobs", top}}}}}}}}}};
}

json decode_response(const std::string& continuation) {
  return {{"choices", {{{"index", 0}, {"message", {{"role", "assistant"}, {"content", continuation}}}}}}};
}

}  // namespace

TEST_CASE("remote: golden request bodies") {
  auto r = request("ignored", 2);
  r.user_prompt = "This scan is a Colonoscopy.";
  r.image = std::make_shared<const ImageBytes>(ImageBytes{0x89, 'P', 'N', 'G', 0x0d, 0x0a, 0x1a, 0x0a, 0, 1});
  check_golden_json("remote_rank_body.json", RemoteBackend::build_rank_body(r, "medgemma-4b-it", 5));
  check_golden_json("remote_decode_body.json", RemoteBackend::build_decode_body(r, "medgemma-4b-it", "Pol"));

  auto text_only = request("ignored", 3);
  const json body = RemoteBackend::build_rank_body(text_only, "m", 5);
  CHECK(body["messages"][1]["content"].size() == 1);
  CHECK(body.dump().find("image_url") == std::string::npos);
}

TEST_CASE("remote: rank response parsing") {
  const json top = json::array({{{"token", "No"}, {"logprob", std::log(0.35)}},
                                {{"token", "Li"}, {"logprob", std::log(0.55)}},
                                {{"token", "Ki"}, {"logprob", std::log(0.05)}}});
  const auto d = RemoteBackend::parse_rank_response(rank_response(top, "Li", "Liver cancer"), 5);
  REQUIRE(d.entries.size() == 3);
  CHECK(d.entries[0].token == "Li");
  CHECK(d.entries[0].prob == doctest::Approx(0.55));
  CHECK(d.entries[1].token == "No");
  CHECK(d.entries[2].token == "Ki");
  CHECK(d.top_answer == "Liver cancer");
  for (const auto& e : d.entries) {
    CHECK(e.prob > 0.0);
    CHECK(e.prob <= 1.0);
  }
  CHECK(RemoteBackend::parse_rank_response(rank_response(top, "Li", "Liver cancer"), 2).entries.size() == 2);
}

TEST_CASE("remote: protocol errors") {
  const json top = json::array({{{"token", "Li"}, {"logprob", std::log(0.55)}},
                                {{"token", "No"}, {"logprob", std::log(0.35)}}});
  json no_logprobs = decode_response("Liver cancer");
  CHECK(code_of([&] { RemoteBackend::parse_rank_response(no_logprobs, 5); }) == ErrorCode::kLogprobsUnsupported);
  CHECK(code_of([&] { RemoteBackend::parse_rank_response(json::object(), 5); }) == ErrorCode::kProtocolError);
  CHECK(code_of([&] { RemoteBackend::parse_rank_response(rank_response(top, "No", "Normal"), 5); }) ==
        ErrorCode::kProtocolError);
  CHECK(code_of([&] { RemoteBackend::parse_rank_response(rank_response(top, "Li", "Kidney"), 5); }) ==
        ErrorCode::kProtocolError);
  const json one = json::array({{{"token", "Li"}, {"logprob", -0.1}}});
  CHECK(code_of([&] { RemoteBackend::parse_rank_response(rank_response(one, "Li", "Liver"), 5); }) ==
        ErrorCode::kProtocolError);
  CHECK(RemoteBackend::parse_decode_response(decode_response("rmal"), "No") == "Normal");
}

TEST_CASE("remote: base64 and mime sniffing") {
  CHECK(base64_encode(ImageBytes{}) == "");
  CHECK(base64_encode(ImageBytes{'f'}) == "Zg==");
  CHECK(base64_encode(ImageBytes{'f', 'o', 'o', 'b', 'a', 'r'}) == "Zm9vYmFy");
  CHECK(sniff_image_mime(ImageBytes{0xff, 0xd8, 0xff, 0xe0}) == "image/jpeg");
  CHECK(sniff_image_mime(ImageBytes{1, 2, 3}) == "application/octet-stream");
}

namespace {

// Minimal chat-completions server. Decides per request from the body.
class FakeServer {
 public:
  explicit FakeServer(std::function<void(const json&, httplib::Response&)> handler) : handler_(std::move(handler)) {
    server_.Post("/v1/chat/completions", [this](const httplib::Request& req, httplib::Response& res) {
      {
        std::lock_guard lock(mu_);
        ++requests_;
        auth_ = req.get_header_value("Authorization");
      }
      handler_(json::parse(req.body), res);
    });
    server_.Get("/health", [](const httplib::Request&, httplib::Response& res) { res.set_content("ok", "text/plain"); });
    port_ = server_.bind_to_any_port("127.0.0.1");
    thread_ = std::thread([this] { server_.listen_after_bind(); });
    server_.wait_until_ready();
  }
  ~FakeServer() {
    server_.stop();
    thread_.join();
  }
  std::string url() const { return "http://127.0.0.1:" + std::to_string(port_); }
  int requests() const {
    std::lock_guard lock(mu_);
    return requests_;
  }
  std::string auth() const {
    std::lock_guard lock(mu_);
    return auth_;
  }

 private:
  std::function<void(const json&, httplib::Response&)> handler_;
  httplib::Server server_;
  int port_ = 0;
  std::thread thread_;
  mutable std::mutex mu_;
  int requests_ = 0;
  std::string auth_;
};

RemoteBackendConfig config_for(const FakeServer& s) {
  RemoteBackendConfig c;
  c.base_url = s.url();
  c.model = "test-model";
  c.auth_token = "secret";
  c.timeout = std::chrono::milliseconds(2000);
  c.initial_backoff = std::chrono::milliseconds(1);
  return c;
}

}  // namespace

TEST_CASE("remote: rank and constrained decode over HTTP") {
  FakeServer server([](const json& body, httplib::Response& res) {
    if (body.value("continue_final_message", false)) {
      const std::string prefix = body["messages"].back()["content"];
      res.set_content(decode_response(prefix == "No" ? "rmal" : "?").dump(), "application/json");
      return;
    }
    const json top = json::array({{{"token", "Li"}, {"logprob", std::log(0.55)}},
                                  {{"token", "No"}, {"logprob", std::log(0.35)}}});
    res.set_content(rank_response(top, "Li", "Liver cancer").dump(), "application/json");
  });
  RemoteBackend b(config_for(server));
  const auto r = request("x", 2);
  const auto d = b.rank_first_tokens(r, 5);
  CHECK(d.entries[0].token == "Li");
  CHECK(d.top_answer == "Liver cancer");
  CHECK(b.decode_with_first_token(r, "No") == "Normal");
  CHECK(server.auth() == "Bearer secret");
  CHECK(b.reachable());
}

TEST_CASE("remote: missing logprobs is LogprobsUnsupported") {
  FakeServer server([](const json&, httplib::Response& res) {
    res.set_content(decode_response("Liver cancer").dump(), "application/json");
  });
  RemoteBackend b(config_for(server));
  CHECK(code_of([&] { b.rank_first_tokens(request("x", 2), 5); }) == ErrorCode::kLogprobsUnsupported);
}

TEST_CASE("remote: 5xx is retried, 4xx is not") {
  int failures_left = 2;
  std::mutex mu;
  FakeServer flaky([&](const json&, httplib::Response& res) {
    std::lock_guard lock(mu);
    if (failures_left > 0) {
      --failures_left;
      res.status = 503;
      return;
    }
    res.set_content(decode_response("rmal").dump(), "application/json");
  });
  RemoteBackend b(config_for(flaky));
  CHECK(b.decode_with_first_token(request("x", 2), "No") == "Normal");
  CHECK(flaky.requests() == 3);

  FakeServer down([](const json&, httplib::Response& res) { res.status = 500; });
  RemoteBackend d(config_for(down));
  CHECK(code_of([&] { d.decode_with_first_token(request("x", 2), "No"); }) == ErrorCode::kBackendUnreachable);
  CHECK(down.requests() == 3);

  FakeServer bad([](const json&, httplib::Response& res) { res.status = 400; });
  RemoteBackend e(config_for(bad));
  CHECK(code_of([&] { e.decode_with_first_token(request("x", 2), "No"); }) == ErrorCode::kProtocolError);
  CHECK(bad.requests() == 1);
}

TEST_CASE("remote: unreachable server") {
  RemoteBackendConfig c;
  c.base_url = "http://127.0.0.1:1";
  c.max_retries = 1;
  c.initial_backoff = std::chrono::milliseconds(1);
  c.timeout = std::chrono::milliseconds(500);
  RemoteBackend b(c);
  CHECK(code_of([&] { b.rank_first_tokens(request("x", 1), 5); }) == ErrorCode::kBackendUnreachable);
  CHECK_FALSE(b.reachable());
}

TEST_CASE("remote: in-flight requests are bounded") {
  std::atomic<int> in_flight{0}, peak{0};
  FakeServer server([&](const json&, httplib::Response& res) {
    const int now = ++in_flight;
    int prev = peak.load();
    while (now > prev && !peak.compare_exchange_weak(prev, now)) {
    }
    std::this_thread::sleep_for(std::chrono::milliseconds(30));
    --in_flight;
    res.set_content(decode_response("rmal").dump(), "application/json");
  });
  auto c = config_for(server);
  c.max_in_flight = 2;
  RemoteBackend b(c);
  std::vector<std::thread> threads;
  for (int i = 0; i < 6; ++i) {
    threads.emplace_back([&] { b.decode_with_first_token(request("x", 2), "No"); });
  }
  for (auto& t : threads) t.join();
  CHECK(peak.load() <= 2);
  CHECK(server.requests() == 6);
}

TEST_CASE("remote: token from the environment") {
  ::setenv(kBackendTokenEnv, "from-env", 1);
  RemoteBackendConfig c;
  c.base_url = "http://127.0.0.1:9/";
  RemoteBackend b(c);
  CHECK(b.config().auth_token == "from-env");
  CHECK(b.config().base_url == "http://127.0.0.1:9");
  ::unsetenv(kBackendTokenEnv);
  const auto parsed = RemoteBackendConfig::from_json(json{{"base_url", "http://h"}, {"timeout_s", 1.5}});
  CHECK(parsed.timeout == std::chrono::milliseconds(1500));
  CHECK(parsed.max_in_flight == 4);
  CHECK(parsed.max_retries == 2);
}
